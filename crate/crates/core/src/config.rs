use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image planes in storage order: 7 surface-reflectance bands, 5 spectral
/// indices, then elevation and slope.
pub const IMAGE_CHANNELS: [&str; 14] = [
    "B1", "B2", "B3", "B4", "B5", "B6", "B7", "clay_minerals", "ferrous_minerals", "carbonate",
    "rock_outcrop", "ndvi", "elevation", "slope",
];

/// Monthly climate variables: 5 primary followed by 6 secondary.
pub const CLIMATE_VARS: [&str; 11] = [
    "tmmn", "tmmx", "vpd", "pr", "srad", "aet", "pdsi", "def", "pet", "vap", "soil",
];

pub const N_PRIMARY_CLIMATE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageEncoderKind {
    Vit,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeriesEncoderKind {
    Transformer,
    Lstm,
}

/// The four feature-group switches: Landsat bands plus indices, topography,
/// primary climate and secondary climate. Written as a 4-bit string such as
/// `1101`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureToggles {
    pub landsat: bool,
    pub topo: bool,
    pub prim_clim: bool,
    pub sec_clim: bool,
}

impl FeatureToggles {
    pub const ALL: FeatureToggles = FeatureToggles {
        landsat: true,
        topo: true,
        prim_clim: true,
        sec_clim: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.landsat && !self.topo {
            return Err(Error::Config(
                "the image branch needs at least one of L8+RS-indices or Topo".into(),
            ));
        }
        Ok(())
    }

    /// Indices into [`IMAGE_CHANNELS`] of the active planes.
    pub fn image_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if self.landsat {
            out.extend(0..12);
        }
        if self.topo {
            out.extend(12..14);
        }
        out
    }

    /// Indices into [`CLIMATE_VARS`] of the active variables.
    pub fn series_vars(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if self.prim_clim {
            out.extend(0..N_PRIMARY_CLIMATE);
        }
        if self.sec_clim {
            out.extend(N_PRIMARY_CLIMATE..CLIMATE_VARS.len());
        }
        out
    }

    pub fn has_series(&self) -> bool {
        self.prim_clim || self.sec_clim
    }
}

impl Default for FeatureToggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for FeatureToggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in [self.landsat, self.topo, self.prim_clim, self.sec_clim] {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for FeatureToggles {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Config(format!("toggle string `{s}` must be 4 binary digits"))),
            })
            .collect::<Result<_>>()?;
        if bits.len() != 4 {
            return Err(Error::Config(format!("toggle string `{s}` must be 4 binary digits")));
        }
        let t = FeatureToggles {
            landsat: bits[0],
            topo: bits[1],
            prim_clim: bits[2],
            sec_clim: bits[3],
        };
        t.validate()?;
        Ok(t)
    }
}

impl TryFrom<String> for FeatureToggles {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FeatureToggles> for String {
    fn from(t: FeatureToggles) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

/// Everything that determines the network's shape. One record drives every
/// ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_encoder: ImageEncoderKind,
    pub series_encoder: SeriesEncoderKind,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Side length of the square image patch in pixels.
    pub image_size: usize,
    /// Months per climate series.
    pub series_len: usize,
    pub temperature: f64,
    pub proj_dim: usize,
    /// Channel width of the first residual CNN stage.
    pub cnn_width: usize,
    pub toggles: FeatureToggles,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            image_encoder: ImageEncoderKind::Vit,
            series_encoder: SeriesEncoderKind::Transformer,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            patch_size: 8,
            mlp_ratio: 2,
            dropout: 0.0,
            image_size: 16,
            series_len: 72,
            temperature: 0.5,
            proj_dim: default_proj_dim(32),
            cnn_width: 8,
            toggles: FeatureToggles::ALL,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            embed_dim: 256,
            depth: 6,
            heads: 8,
            dropout: 0.1,
            image_size: 64,
            proj_dim: default_proj_dim(256),
            cnn_width: 32,
            ..Self::desk()
        }
    }

    pub fn with_encoders(mut self, image: ImageEncoderKind, series: SeriesEncoderKind) -> Self {
        self.image_encoder = image;
        self.series_encoder = series;
        self
    }

    pub fn with_toggles(mut self, toggles: FeatureToggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn image_channels(&self) -> usize {
        self.toggles.image_channels().len()
    }

    pub fn series_vars(&self) -> usize {
        self.toggles.series_vars().len()
    }

    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return fail("depth must be >= 1".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.image_encoder == ImageEncoderKind::Cnn && !self.image_size.is_multiple_of(4) {
            return fail("the CNN encoder needs an image size divisible by 4".into());
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)".into());
        }
        if self.series_len == 0 || self.mlp_ratio == 0 || self.proj_dim == 0 || self.cnn_width == 0 {
            return fail("dimensions must be positive".into());
        }
        Ok(())
    }

    /// Human-readable list of fields that differ from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serialises");
        let b = serde_json::to_value(other).expect("config serialises");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} != {}", b.get(k).cloned().unwrap_or_default()))
            .collect()
    }

    /// Short tag such as `vit-trans`.
    pub fn encoder_tag(&self) -> String {
        let img = match self.image_encoder {
            ImageEncoderKind::Vit => "vit",
            ImageEncoderKind::Cnn => "cnn",
        };
        let ser = match self.series_encoder {
            SeriesEncoderKind::Transformer => "trans",
            SeriesEncoderKind::Lstm => "lstm",
        };
        format!("{img}-{ser}")
    }
}

/// Parses `vit-trans`, `vit-lstm`, `cnn-trans` or `cnn-lstm`.
pub fn parse_encoder_tag(tag: &str) -> Result<(ImageEncoderKind, SeriesEncoderKind)> {
    let (img, ser) = tag
        .split_once('-')
        .ok_or_else(|| Error::Config(format!("unknown encoder config `{tag}`")))?;
    let img = match img {
        "vit" => ImageEncoderKind::Vit,
        "cnn" => ImageEncoderKind::Cnn,
        _ => return Err(Error::Config(format!("unknown image encoder `{img}`"))),
    };
    let ser = match ser {
        "trans" | "transformer" => SeriesEncoderKind::Transformer,
        "lstm" => SeriesEncoderKind::Lstm,
        _ => return Err(Error::Config(format!("unknown series encoder `{ser}`"))),
    };
    Ok((img, ser))
}

/// Projection width: half the embedding width, at least 8.
pub fn default_proj_dim(embed_dim: usize) -> usize {
    (embed_dim / 2).max(8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggles_parse_and_channel_counts() {
        let t: FeatureToggles = "1111".parse().unwrap();
        assert_eq!(t.image_channels().len(), 14);
        assert_eq!(t.series_vars().len(), 11);
        let t: FeatureToggles = "1011".parse().unwrap();
        assert_eq!(t.image_channels().len(), 12);
        let t: FeatureToggles = "1101".parse().unwrap();
        assert_eq!(t.series_vars(), (5..11).collect::<Vec<_>>());
        let t: FeatureToggles = "1110".parse().unwrap();
        assert_eq!(t.series_vars().len(), 5);
        let t: FeatureToggles = "1100".parse().unwrap();
        assert!(!t.has_series());
        assert_eq!(t.to_string(), "1100");
        assert!("0011".parse::<FeatureToggles>().is_err());
        assert!("111".parse::<FeatureToggles>().is_err());
        assert!("11a1".parse::<FeatureToggles>().is_err());
    }

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        assert_eq!(ModelConfig::desk().proj_dim, 16);
        assert_eq!(default_proj_dim(8), 8);
        let mut bad = ModelConfig::desk();
        bad.heads = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn diff_lists_fields() {
        let a = ModelConfig::desk();
        let mut b = a.clone();
        b.embed_dim = 64;
        b.toggles = "1100".parse().unwrap();
        let d = a.diff(&b);
        assert_eq!(d.len(), 2);
        assert!(d.iter().any(|s| s.starts_with("embed_dim")));
        assert!(d.iter().any(|s| s.starts_with("toggles")));
    }

    #[test]
    fn encoder_tags() {
        assert_eq!(
            parse_encoder_tag("cnn-trans").unwrap(),
            (ImageEncoderKind::Cnn, SeriesEncoderKind::Transformer)
        );
        assert!(parse_encoder_tag("resnet").is_err());
        assert_eq!(ModelConfig::desk().encoder_tag(), "vit-trans");
    }
}
