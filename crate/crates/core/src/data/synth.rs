//! Synthetic worlds with planted cross-modal structure.
//!
//! Two latent fields drive everything. `z` is a smooth field at image
//! resolution that shapes band means and texture, topography, and the
//! seasonal amplitude and trend of the climate series. `w` is a coarse field
//! visible only through climate offsets. The label is a monotone function
//! of `(1 - climate_share) * z + climate_share * w` plus noise, so the two
//! modalities share `z` and the climate branch alone carries `w`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::raster::{band, LandCover, RasterStack};
use super::{ClimateGrid, Dataset, DatasetMode, SampleRecord, MINERAL_SOIL_CAP};
use crate::config::CLIMATE_VARS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub mode: DatasetMode,
    pub world_size: usize,
    pub patch_size: usize,
    /// Image pixels per climate cell along each axis.
    pub climate_factor: usize,
    pub series_len: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    /// Label noise as a fraction of the label range (log scale in stock mode).
    pub label_noise: f64,
    /// Per-pixel reflectance noise.
    pub image_noise: f64,
    /// Climate noise relative to each variable's seasonal amplitude.
    pub climate_noise: f64,
    /// Weight of the climate-only field in the label.
    pub climate_share: f64,
    /// Fraction of climate cells with a run of missing months.
    pub missing_rate: f64,
    /// Approximate area fraction of each irrelevant land-cover class.
    pub irrelevant_area: f64,
}

impl SynthParams {
    pub fn desk(mode: DatasetMode, labeled: usize, unlabeled: usize) -> Self {
        SynthParams {
            mode,
            world_size: 256,
            patch_size: 16,
            climate_factor: 8,
            series_len: 72,
            labeled,
            unlabeled,
            label_noise: 0.05,
            image_noise: 0.02,
            climate_noise: 0.1,
            climate_share: 0.3,
            missing_rate: 0.05,
            irrelevant_area: 0.06,
        }
    }

    pub fn paper(mode: DatasetMode, labeled: usize, unlabeled: usize) -> Self {
        SynthParams {
            world_size: 1024,
            patch_size: 64,
            ..Self::desk(mode, labeled, unlabeled)
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic world: {m}")));
        if self.patch_size == 0 || self.patch_size > self.world_size {
            return bad("patch size must be in 1..=world size");
        }
        if self.climate_factor == 0 || !self.world_size.is_multiple_of(self.climate_factor) {
            return bad("world size must be a multiple of the climate factor");
        }
        if self.series_len == 0 {
            return bad("series length must be positive");
        }
        if !(0.0..=1.0).contains(&self.climate_share) || !(0.0..=1.0).contains(&self.missing_rate) {
            return bad("climate_share and missing_rate must lie in [0, 1]");
        }
        if !(0.0..0.4).contains(&self.irrelevant_area) {
            return bad("irrelevant_area must lie in [0, 0.4)");
        }
        if [self.label_noise, self.image_noise, self.climate_noise].iter().any(|v| !(*v >= 0.0)) {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }
}

/// Everything the generator produced, including the fields behind the labels.
#[derive(Debug, Clone)]
pub struct World {
    pub raster: RasterStack,
    pub climate: ClimateGrid,
    /// Image-resolution latent, rank-transformed to `[0, 1]`.
    pub z: Vec<f64>,
    /// Climate-resolution latent, rank-transformed to `[0, 1]`.
    pub w: Vec<f64>,
    pub dataset: Dataset,
    /// Candidate locations dropped by the land-cover filter.
    pub rejected: usize,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Sum of Gaussian bumps on a `size`×`size` grid.
fn bump_field(rng: &mut ChaCha8Rng, size: usize, bumps: usize, width: (f64, f64)) -> Vec<f64> {
    let s = size as f64;
    let spec: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let cy = rng.gen::<f64>() * s;
            let cx = rng.gen::<f64>() * s;
            let sigma = s * (width.0 + (width.1 - width.0) * rng.gen::<f64>());
            let amp: f64 = StandardNormal.sample(rng);
            (cy, cx, 1.0 / (2.0 * sigma * sigma), amp)
        })
        .collect();
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            out[r * size + c] = spec
                .iter()
                .map(|&(cy, cx, k, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) * k).exp())
                .sum();
        }
    }
    out
}

/// Replaces values by their normalised ranks in `[0, 1]` (ties by index).
fn rank_uniform(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    let denom = (v.len().max(2) - 1) as f64;
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = rank as f64 / denom;
    }
    out
}

/// Per-variable climate shape: base, seasonal amplitude, how strongly the
/// shared latent scales the amplitude, the trend it induces over the whole
/// series, and the offset from the climate-only latent.
struct VarShape {
    base: f64,
    amp: f64,
    amp_z: f64,
    trend_z: f64,
    offset_z: f64,
    offset_w: f64,
    phase: f64,
    non_negative: bool,
}

const fn shape(base: f64, amp: f64, amp_z: f64, trend_z: f64, offset_z: f64, offset_w: f64, phase: f64, non_negative: bool) -> VarShape {
    VarShape { base, amp, amp_z, trend_z, offset_z, offset_w, phase, non_negative }
}

// tmmx is derived from tmmn, so its row only sets the diurnal range.
const VAR_SHAPES: [VarShape; 11] = [
    shape(2.0, 8.0, 0.8, 3.0, 2.0, 4.0, 0.0, false),     // tmmn
    shape(9.0, 0.0, 0.0, 0.0, 4.0, 1.0, 0.0, true),      // tmmx - tmmn
    shape(0.6, 0.4, 0.6, 0.3, 0.3, 0.3, 0.0, true),      // vpd
    shape(60.0, 30.0, 0.9, -20.0, -15.0, 35.0, 6.0, true), // pr
    shape(160.0, 90.0, 0.3, 15.0, 20.0, 10.0, 0.0, true), // srad
    shape(40.0, 25.0, 0.7, 10.0, 10.0, 15.0, 1.0, true),  // aet
    shape(0.0, 1.5, 0.5, -2.0, -1.0, 2.0, 3.0, false),    // pdsi
    shape(30.0, 20.0, 0.8, 10.0, 8.0, -10.0, 0.5, true),  // def
    shape(80.0, 45.0, 0.5, 15.0, 15.0, 5.0, 0.0, true),   // pet
    shape(1.0, 0.5, 0.4, 0.2, 0.2, 0.3, 0.0, true),       // vap
    shape(90.0, 40.0, 0.6, -25.0, -20.0, 40.0, 4.0, true), // soil
];

/// Generates the raster, climate grid and sampled records of one world.
pub fn gen_synthetic_world(seed: u64, params: &SynthParams) -> Result<World> {
    params.validate()?;
    let size = params.world_size;
    let n = size * size;
    let half = params.patch_size / 2;
    let valid_side = size - params.patch_size + 1;
    let wanted = params.labeled + params.unlabeled;
    if wanted > valid_side * valid_side / 2 {
        return Err(Error::Config(format!(
            "{wanted} locations exceed the capacity of a {size}x{size} world with patch {}",
            params.patch_size
        )));
    }

    // latent fields
    let mut field_rng = rng(seed, 1);
    let z = rank_uniform(&bump_field(&mut field_rng, size, 16, (0.06, 0.16)));
    let nuisance = rank_uniform(&bump_field(&mut field_rng, size, 12, (0.05, 0.2)));
    let relief = bump_field(&mut field_rng, size, 10, (0.05, 0.15));
    let cover_a = rank_uniform(&bump_field(&mut field_rng, size, 20, (0.02, 0.06)));
    let cover_b = rank_uniform(&bump_field(&mut field_rng, size, 20, (0.02, 0.06)));
    let cells = size / params.climate_factor;
    let w = rank_uniform(&bump_field(&mut field_rng, cells, 6, (0.15, 0.35)));

    // land cover
    let t = params.irrelevant_area;
    let landcover: Vec<LandCover> = (0..n)
        .map(|i| {
            if cover_a[i] < t {
                LandCover::Water
            } else if cover_b[i] > 1.0 - t {
                LandCover::BuiltUp
            } else if z[i] > 0.7 {
                LandCover::Grassland
            } else if nuisance[i] > 0.75 {
                LandCover::Forest
            } else {
                LandCover::Cropland
            }
        })
        .collect();

    // reflectance bands
    let mut noise_rng = rng(seed, 2);
    const BASE: [f64; 7] = [0.08, 0.09, 0.11, 0.13, 0.30, 0.24, 0.17];
    const NUIS: [f64; 7] = [0.02, 0.03, 0.04, 0.05, 0.10, 0.06, 0.05];
    const LATENT: [f64; 7] = [0.01, -0.01, -0.02, -0.03, 0.08, -0.04, -0.05];
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut bands = vec![vec![0.0; n]; 7];
    for i in 0..n {
        // texture amplitude grows with the latent
        let texture = params.image_noise * (0.5 + 2.5 * z[i]);
        let common: f64 = normal.sample(&mut noise_rng);
        for b in 0..7 {
            let own: f64 = normal.sample(&mut noise_rng);
            let mut v = BASE[b] + NUIS[b] * (nuisance[i] - 0.5) + LATENT[b] * (z[i] - 0.5) + texture * (0.7 * common + 0.3 * own);
            match landcover[i] {
                LandCover::Water if b >= band::NIR => v *= 0.15,
                LandCover::BuiltUp => v = 0.5 * v + 0.12,
                _ => {}
            }
            bands[b][i] = v.clamp(0.005, 1.0);
        }
    }
    let elevation: Vec<f64> = (0..n).map(|i| 250.0 + 120.0 * relief[i] + 60.0 * z[i]).collect();
    let raster = RasterStack::from_bands(size, bands, elevation, landcover, 30.0)?;

    // climate
    let mut clim_rng = rng(seed, 3);
    let (len, vars) = (params.series_len, CLIMATE_VARS.len());
    let mut values = vec![0.0; cells * cells * len * vars];
    let mut missing = vec![false; values.len()];
    for cell in 0..cells * cells {
        let (cr, cc) = (cell / cells, cell % cells);
        let centre = (cr * params.climate_factor + params.climate_factor / 2) * size + cc * params.climate_factor + params.climate_factor / 2;
        let (zc, wc) = (z[centre] - 0.5, w[cell] - 0.5);
        let base = cell * len * vars;
        for t in 0..len {
            let season_of = |phase: f64| (2.0 * std::f64::consts::PI * (t as f64 + phase) / 12.0).sin();
            let progress = t as f64 / len.max(2) as f64 - 0.5;
            for (v, s) in VAR_SHAPES.iter().enumerate() {
                let scale = if s.amp > 0.0 { s.amp } else { s.offset_z.abs().max(1.0) };
                let eps: f64 = normal.sample(&mut clim_rng);
                let x = s.base
                    + s.amp * (1.0 + s.amp_z * zc) * season_of(s.phase)
                    + s.trend_z * zc * progress
                    + s.offset_z * zc
                    + s.offset_w * wc
                    + params.climate_noise * scale * eps;
                values[base + t * vars + v] = x;
            }
            let tmin = values[base + t * vars];
            let range = &mut values[base + t * vars + 1];
            *range = tmin + range.max(0.5);
            for (v, s) in VAR_SHAPES.iter().enumerate().skip(2) {
                if s.non_negative {
                    let x = &mut values[base + t * vars + v];
                    *x = x.max(0.0);
                }
            }
        }
        if clim_rng.gen::<f64>() < params.missing_rate {
            let v = clim_rng.gen_range(0..vars);
            let start = clim_rng.gen_range(0..len);
            let run = clim_rng.gen_range(1..=6usize.min(len / 2).max(1));
            for t in start..(start + run).min(len) {
                missing[base + t * vars + v] = true;
            }
        }
    }
    let climate = ClimateGrid {
        cells,
        factor: params.climate_factor,
        len,
        vars,
        values,
        missing,
    };

    // locations and labels
    let mut loc_rng = rng(seed, 4);
    let mut label_rng = rng(seed, 5);
    let mut taken = HashSet::new();
    let mut records = Vec::with_capacity(wanted);
    let mut rejected = 0;
    let max_attempts = 50 * wanted + 1000;
    let mut attempts = 0;
    while records.len() < wanted {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "world capacity exhausted after {} of {wanted} locations",
                records.len()
            )));
        }
        let row = loc_rng.gen_range(0..valid_side) + half;
        let col = loc_rng.gen_range(0..valid_side) + half;
        if !taken.insert((row, col)) {
            continue;
        }
        let cover = raster.patch_landcover(row, col, params.patch_size)?;
        if LandCover::IRRELEVANT.contains(&cover) {
            rejected += 1;
            continue;
        }
        let i = row * size + col;
        let q = (1.0 - params.climate_share) * z[i] + params.climate_share * w[climate.cell_of(row, col)];
        let labeled = records.len() < params.labeled;
        let eps: f64 = normal.sample(&mut label_rng);
        let label = labeled.then(|| label_of(params.mode, q, params.label_noise * eps));
        records.push(SampleRecord {
            location_id: records.len() as u32,
            row: row as u32,
            col: col as u32,
            image: raster.extract_patch(row, col, params.patch_size)?,
            series: climate.series_at(row, col),
            label,
            landcover: cover,
            latent: Some(q as f32),
        });
    }

    let dataset = Dataset {
        mode: params.mode,
        image_size: params.patch_size,
        series_len: params.series_len,
        records,
        generator: Some(serde_json::json!({ "seed": seed, "params": params })),
    };
    Ok(World {
        raster,
        climate,
        z,
        w,
        dataset,
        rejected,
    })
}

/// Label from the combined latent `q` in `[0, 1]` and a noise draw already
/// scaled by the noise level.
fn label_of(mode: DatasetMode, q: f64, noise: f64) -> f32 {
    match mode {
        DatasetMode::LucasLike => {
            let y = 6.0 + 64.0 * (q + noise);
            // largest f32 strictly below the cap
            let cap = f32::from_bits((MINERAL_SOIL_CAP as f32).to_bits() - 1);
            (y.max(0.0) as f32).min(cap)
        }
        DatasetMode::RacaLike => (12.0 * (4.6 * q + 4.6 * noise).exp()) as f32,
    }
}
