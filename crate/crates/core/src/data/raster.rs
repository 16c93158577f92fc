use serde::{Deserialize, Serialize};

use crate::encoders::ImageInput;
use crate::error::{Error, Result};

/// Index of each reflectance band within the first seven planes.
pub mod band {
    pub const GREEN: usize = 2;
    pub const RED: usize = 3;
    pub const NIR: usize = 4;
    pub const SWIR1: usize = 5;
    pub const SWIR2: usize = 6;
}

/// Land-cover classes of the synthetic worlds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[repr(u8)]
pub enum LandCover {
    Cropland = 0,
    Grassland = 1,
    Forest = 2,
    BuiltUp = 3,
    Water = 4,
}

impl LandCover {
    pub const ALL: [LandCover; 5] = [
        LandCover::Cropland,
        LandCover::Grassland,
        LandCover::Forest,
        LandCover::BuiltUp,
        LandCover::Water,
    ];

    /// Classes whose patches carry no soil signal.
    pub const IRRELEVANT: [LandCover; 2] = [LandCover::BuiltUp, LandCover::Water];

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown land-cover code {code}")))
    }
}

/// Five spectral-index planes and the number of pixels whose denominator
/// was zero (those pixels are set to 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Indices {
    pub planes: [Vec<f64>; 5],
    pub degenerate: usize,
}

fn ratio(a: f64, b: f64, degenerate: &mut usize) -> f64 {
    let den = a + b;
    if den == 0.0 {
        *degenerate += 1;
        0.0
    } else {
        (a - b) / den
    }
}

/// Normalised-difference indices from the seven band planes, in channel
/// order clay minerals, ferrous minerals, carbonate, rock outcrop, NDVI.
pub fn compute_indices(bands: &[Vec<f64>]) -> Result<Indices> {
    if bands.len() != 7 {
        return Err(Error::shape("compute_indices", &[bands.len()], &[7]));
    }
    let n = bands[0].len();
    if bands.iter().any(|b| b.len() != n) {
        return Err(Error::Data("band planes differ in size".into()));
    }
    use band::*;
    let mut degenerate = 0;
    let mut planes: [Vec<f64>; 5] = Default::default();
    for p in &mut planes {
        p.reserve(n);
    }
    for i in 0..n {
        let (g, r, nir, s1, s2) = (bands[GREEN][i], bands[RED][i], bands[NIR][i], bands[SWIR1][i], bands[SWIR2][i]);
        planes[0].push(ratio(s1, s2, &mut degenerate));
        planes[1].push(ratio(nir, s1, &mut degenerate));
        planes[2].push(ratio(r, g, &mut degenerate));
        planes[3].push(ratio(s1, g, &mut degenerate));
        planes[4].push(ratio(nir, r, &mut degenerate));
    }
    Ok(Indices { planes, degenerate })
}

/// Fourteen co-registered planes over a square world plus a land-cover plane.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    pub size: usize,
    /// `planes[c][row * size + col]`, channel order as in `IMAGE_CHANNELS`.
    pub planes: Vec<Vec<f64>>,
    pub landcover: Vec<LandCover>,
}

impl RasterStack {
    /// Assembles a stack from bands, elevation and land cover, deriving the
    /// index planes and the slope (percent, central differences, one-sided
    /// at the border) with `pixel_m` metres per pixel.
    pub fn from_bands(size: usize, bands: Vec<Vec<f64>>, elevation: Vec<f64>, landcover: Vec<LandCover>, pixel_m: f64) -> Result<Self> {
        let n = size * size;
        if elevation.len() != n || landcover.len() != n || bands.iter().any(|b| b.len() != n) {
            return Err(Error::Data("raster planes do not match the world size".into()));
        }
        let idx = compute_indices(&bands)?;
        let slope = slope_percent(&elevation, size, pixel_m);
        let mut planes = bands;
        planes.extend(idx.planes);
        planes.push(elevation);
        planes.push(slope);
        Ok(RasterStack { size, planes, landcover })
    }

    /// Top-left corner of a `size`-wide window centred on `(row, col)`,
    /// or an error when the window leaves the grid.
    pub fn window_origin(&self, row: usize, col: usize, size: usize) -> Result<(usize, usize)> {
        let half = size / 2;
        let out = || Error::Data(format!("patch of size {size} at ({row}, {col}) leaves the {0}x{0} grid", self.size));
        let (r0, c0) = (row.checked_sub(half).ok_or_else(out)?, col.checked_sub(half).ok_or_else(out)?);
        if size == 0 || r0 + size > self.size || c0 + size > self.size {
            return Err(out());
        }
        Ok((r0, c0))
    }

    /// All fourteen channels of the window centred on `(row, col)`; the
    /// centre pixel sits at `(size/2, size/2)` of the patch.
    pub fn extract_patch(&self, row: usize, col: usize, size: usize) -> Result<ImageInput> {
        let (r0, c0) = self.window_origin(row, col, size)?;
        let mut img = ImageInput::zeros(self.planes.len(), size);
        let mut k = 0;
        for plane in &self.planes {
            for r in r0..r0 + size {
                for c in c0..c0 + size {
                    img.values[k] = plane[r * self.size + c] as f32;
                    k += 1;
                }
            }
        }
        Ok(img)
    }

    /// Modal land-cover class over the window; ties go to the lower class code.
    pub fn patch_landcover(&self, row: usize, col: usize, size: usize) -> Result<LandCover> {
        let (r0, c0) = self.window_origin(row, col, size)?;
        let mut counts = [0usize; 5];
        for r in r0..r0 + size {
            for c in c0..c0 + size {
                counts[self.landcover[r * self.size + c] as usize] += 1;
            }
        }
        Ok(modal_class(&counts))
    }
}

fn modal_class(counts: &[usize; 5]) -> LandCover {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    LandCover::ALL[best]
}

/// Modal class of a set of pixel classes.
pub fn landcover_mode(classes: &[LandCover]) -> LandCover {
    let mut counts = [0usize; 5];
    for &c in classes {
        counts[c as usize] += 1;
    }
    modal_class(&counts)
}

/// `false` when the modal class of the pixels is one of `irrelevant`.
pub fn landcover_filter(classes: &[LandCover], irrelevant: &[LandCover]) -> bool {
    !irrelevant.contains(&landcover_mode(classes))
}

fn slope_percent(elev: &[f64], size: usize, pixel_m: f64) -> Vec<f64> {
    let at = |r: usize, c: usize| elev[r * size + c];
    let diff = |lo: f64, hi: f64, steps: usize| (hi - lo) / (steps as f64 * pixel_m);
    let mut out = vec![0.0; size * size];
    if size < 2 {
        return out;
    }
    for r in 0..size {
        let (r0, r1) = (r.saturating_sub(1), (r + 1).min(size - 1));
        for c in 0..size {
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(size - 1));
            let dx = diff(at(r, c0), at(r, c1), c1 - c0);
            let dy = diff(at(r0, c), at(r1, c), r1 - r0);
            out[r * size + c] = 100.0 * (dx * dx + dy * dy).sqrt();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bands_from(values: [f64; 7]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn index_formulas() {
        let idx = compute_indices(&bands_from([0.1, 0.1, 0.2, 0.1, 0.5, 0.3, 0.3])).unwrap();
        assert!((idx.planes[4][0] - 0.4 / 0.6).abs() < 1e-15);
        assert_eq!(idx.planes[0][0], 0.0);
        assert!((idx.planes[1][0] - 0.2 / 0.8).abs() < 1e-15);
        assert!((idx.planes[2][0] - (-0.1 / 0.3)).abs() < 1e-15);
        assert!((idx.planes[3][0] - 0.1 / 0.5).abs() < 1e-15);
        assert_eq!(idx.degenerate, 0);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let idx = compute_indices(&bands_from([0.0; 7])).unwrap();
        assert_eq!(idx.degenerate, 5);
        assert!(idx.planes.iter().all(|p| p[0] == 0.0));
    }

    fn stack(size: usize) -> RasterStack {
        let n = size * size;
        let bands = (0..7).map(|b| (0..n).map(|i| 0.1 + 0.01 * ((i * 7 + b) % 13) as f64).collect()).collect();
        let elev = (0..n).map(|i| (i / size) as f64 * 3.0).collect();
        RasterStack::from_bands(size, bands, elev, vec![LandCover::Cropland; n], 30.0).unwrap()
    }

    #[test]
    fn patches() {
        let s = stack(8);
        let one = s.extract_patch(3, 5, 1).unwrap();
        for c in 0..14 {
            assert_eq!(one.at(c, 0, 0), s.planes[c][3 * 8 + 5] as f32);
        }
        // overlapping windows agree on the overlap
        let a = s.extract_patch(3, 3, 4).unwrap();
        let b = s.extract_patch(4, 4, 4).unwrap();
        for c in 0..14 {
            for r in 1..4 {
                for col in 1..4 {
                    assert_eq!(a.at(c, r, col), b.at(c, r - 1, col - 1));
                }
            }
        }
        assert_eq!(a.at(0, 2, 2), s.planes[0][3 * 8 + 3] as f32);
        assert!(s.extract_patch(0, 0, 4).is_err());
        assert!(s.extract_patch(6, 6, 4).is_ok());
        assert!(s.extract_patch(7, 7, 4).is_err());
        assert!(s.extract_patch(4, 4, 8).is_ok());
        assert!(stack(64).extract_patch(0, 0, 64).is_err());
    }

    #[test]
    fn slope_of_a_ramp() {
        let s = stack(5);
        // 3 m rise per 30 m pixel = 10 %
        for v in &s.planes[13] {
            assert!((v - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn landcover_rules() {
        use LandCover::*;
        assert!(!landcover_filter(&[Water; 9], &LandCover::IRRELEVANT));
        assert!(landcover_filter(&[Cropland; 9], &LandCover::IRRELEVANT));
        let mixed = [BuiltUp, BuiltUp, BuiltUp, Cropland, Cropland];
        assert!(!landcover_filter(&mixed, &LandCover::IRRELEVANT));
        let plural = [Water, Water, Cropland, Grassland, Forest];
        assert!(!landcover_filter(&plural, &LandCover::IRRELEVANT));
    }
}
