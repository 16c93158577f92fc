//! Sample records, the feature pipeline, synthetic worlds and the on-disk
//! dataset format.

mod climate;
pub mod container;
mod normalize;
mod raster;
pub mod synth;

pub use climate::{knn_impute, ClimateGrid};
pub use container::{Blob, Container};
pub use normalize::{normalize, NormStats, NormalizedRecord};
pub use raster::{band, compute_indices, landcover_filter, landcover_mode, Indices, LandCover, RasterStack};
pub use synth::{gen_synthetic_world, SynthParams, World};

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{CLIMATE_VARS, IMAGE_CHANNELS, N_PRIMARY_CLIMATE};
use crate::encoders::{ImageInput, SeriesInput};
use crate::error::{Error, Result};

/// Label semantics: carbon content in g/kg with a mineral-soil cap, or
/// carbon stock in Mg/ha with a heavy right tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    LucasLike,
    RacaLike,
}

/// Labels in content mode are kept strictly below this value.
pub const MINERAL_SOIL_CAP: f64 = 87.0;

impl FromStr for DatasetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lucas-like" => Ok(DatasetMode::LucasLike),
            "raca-like" => Ok(DatasetMode::RacaLike),
            _ => Err(Error::Config(format!("unknown dataset mode {s:?} (lucas-like | raca-like)"))),
        }
    }
}

impl std::fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetMode::LucasLike => "lucas-like",
            DatasetMode::RacaLike => "raca-like",
        })
    }
}

/// One location: image patch, climate series and an optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub location_id: u32,
    pub row: u32,
    pub col: u32,
    pub image: ImageInput,
    pub series: SeriesInput,
    pub label: Option<f32>,
    pub landcover: LandCover,
    /// Generating latent value, present for synthetic data only.
    pub latent: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mode: DatasetMode,
    pub image_size: usize,
    pub series_len: usize,
    pub records: Vec<SampleRecord>,
    /// Generator seed and parameters for synthetic datasets.
    pub generator: Option<serde_json::Value>,
}

impl Dataset {
    pub fn labeled(&self) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.label.is_some()).collect()
    }

    pub fn unlabeled(&self) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.label.is_none()).collect()
    }

    /// Imputes missing climate cells of every record with `knn_impute`.
    pub fn impute(&mut self, k: usize) -> Result<usize> {
        let mut filled = 0;
        for r in &mut self.records {
            if r.series.has_missing() {
                filled += r.series.missing.iter().filter(|&&m| m).count();
                r.series = knn_impute(&r.series, k)?;
            }
        }
        Ok(filled)
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode,
            "image_size": self.image_size,
            "series_len": self.series_len,
            "counts": {
                "labeled": self.labeled().len(),
                "unlabeled": self.unlabeled().len(),
            },
            "channels": IMAGE_CHANNELS,
            "variables": CLIMATE_VARS,
            "toggle_groups": {
                "landsat": &IMAGE_CHANNELS[..12],
                "topo": &IMAGE_CHANNELS[12..],
                "prim_clim": &CLIMATE_VARS[..N_PRIMARY_CLIMATE],
                "sec_clim": &CLIMATE_VARS[N_PRIMARY_CLIMATE..],
            },
            "dtype": "f32",
            "generator": self.generator,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("dataset", self.meta());
        let rs = &self.records;
        let u32s = |f: &dyn Fn(&SampleRecord) -> u32| Blob::U32(rs.iter().map(f).collect());
        c.insert("location_id", u32s(&|r| r.location_id));
        c.insert("row", u32s(&|r| r.row));
        c.insert("col", u32s(&|r| r.col));
        c.insert("landcover", u32s(&|r| r.landcover as u32));
        c.insert("series_missing", Blob::U32(rs.iter().flat_map(|r| r.series.missing.iter().map(|&m| m as u32)).collect()));
        c.insert("images", Blob::F32(rs.iter().flat_map(|r| r.image.values.iter().copied()).collect()));
        c.insert("series", Blob::F32(rs.iter().flat_map(|r| r.series.values.iter().copied()).collect()));
        c.insert("labels", Blob::F32(rs.iter().map(|r| r.label.unwrap_or(f32::NAN)).collect()));
        c.insert("latent", Blob::F32(rs.iter().map(|r| r.latent.unwrap_or(f32::NAN)).collect()));
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        if c.kind != "dataset" {
            return Err(Error::Data(format!("container holds a {}, not a dataset", c.kind)));
        }
        let field = |key: &str| -> Result<serde_json::Value> {
            c.meta.get(key).cloned().ok_or_else(|| Error::Data(format!("manifest lacks `{key}`")))
        };
        let mode: DatasetMode = serde_json::from_value(field("mode")?)?;
        let image_size: usize = serde_json::from_value(field("image_size")?)?;
        let series_len: usize = serde_json::from_value(field("series_len")?)?;
        let generator = c.meta.get("generator").cloned().filter(|g| !g.is_null());
        let ids = c.take_u32("location_id")?;
        let n = ids.len();
        let rows = c.take_u32("row")?;
        let cols = c.take_u32("col")?;
        let covers = c.take_u32("landcover")?;
        let missing = c.take_u32("series_missing")?;
        let images = c.take_f32("images")?;
        let series = c.take_f32("series")?;
        let labels = c.take_f32("labels")?;
        let latent = c.take_f32("latent")?;
        let (ci, cs) = (IMAGE_CHANNELS.len() * image_size * image_size, series_len * CLIMATE_VARS.len());
        if [rows.len(), cols.len(), covers.len(), labels.len(), latent.len()].iter().any(|&l| l != n)
            || images.len() != n * ci
            || series.len() != n * cs
            || missing.len() != n * cs
        {
            return Err(Error::Data("dataset blobs disagree on the record count".into()));
        }
        let opt = |v: f32| if v.is_nan() { None } else { Some(v) };
        let records = (0..n)
            .map(|i| {
                Ok(SampleRecord {
                    location_id: ids[i],
                    row: rows[i],
                    col: cols[i],
                    image: ImageInput {
                        channels: IMAGE_CHANNELS.len(),
                        size: image_size,
                        values: images[i * ci..(i + 1) * ci].to_vec(),
                    },
                    series: SeriesInput {
                        len: series_len,
                        vars: CLIMATE_VARS.len(),
                        values: series[i * cs..(i + 1) * cs].to_vec(),
                        missing: missing[i * cs..(i + 1) * cs].iter().map(|&m| m != 0).collect(),
                    },
                    label: opt(labels[i]),
                    landcover: LandCover::from_code(u8::try_from(covers[i]).unwrap_or(u8::MAX))?,
                    latent: opt(latent[i]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            mode,
            image_size,
            series_len,
            records,
            generator,
        })
    }
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for r in &dataset.records {
        if r.image.size != dataset.image_size || r.image.channels != IMAGE_CHANNELS.len() {
            return Err(Error::Data(format!("record {} image does not match the dataset layout", r.location_id)));
        }
        if r.series.len != dataset.series_len || r.series.vars != CLIMATE_VARS.len() {
            return Err(Error::Data(format!("record {} series does not match the dataset layout", r.location_id)));
        }
        if let Some(l) = r.label {
            if !(l >= 0.0) || (dataset.mode == DatasetMode::LucasLike && f64::from(l) >= MINERAL_SOIL_CAP) {
                return Err(Error::Data(format!("record {} has invalid label {l}", r.location_id)));
            }
        }
    }
    dataset.to_container().write(dir)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::from_container(Container::read(dir)?)
}
