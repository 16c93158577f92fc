use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::error::{Error, Result};

/// Per-channel and per-variable z-score statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub image_mean: Vec<f64>,
    pub image_std: Vec<f64>,
    pub series_mean: Vec<f64>,
    pub series_std: Vec<f64>,
    /// Channels (`image:<c>` or `series:<v>`) with zero variance; they are
    /// centred but not scaled.
    pub constant: Vec<String>,
}

impl NormStats {
    pub fn fit(records: &[SampleRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Data("cannot fit normalisation on zero records".into()))?;
        let (c, hw) = (first.image.channels, first.image.size * first.image.size);
        let v = first.series.vars;
        // two passes: means first, then centred squares, for accuracy
        let mut isum = vec![0.0; c];
        let mut ssum = vec![0.0; v];
        for r in records {
            if r.image.channels != c || r.image.size * r.image.size != hw || r.series.vars != v {
                return Err(Error::Data(format!("record {} has a different layout", r.location_id)));
            }
            for (ch, plane) in r.image.values.chunks(hw).enumerate() {
                isum[ch] += plane.iter().map(|&x| x as f64).sum::<f64>();
            }
            for row in r.series.values.chunks(v) {
                for (j, &x) in row.iter().enumerate() {
                    ssum[j] += x as f64;
                }
            }
        }
        let ni = (records.len() * hw) as f64;
        let ns = (records.len() * first.series.len) as f64;
        let image_mean: Vec<f64> = isum.iter().map(|s| s / ni).collect();
        let series_mean: Vec<f64> = ssum.iter().map(|s| s / ns).collect();
        let mut isq = vec![0.0; c];
        let mut ssq = vec![0.0; v];
        for r in records {
            for (ch, plane) in r.image.values.chunks(hw).enumerate() {
                isq[ch] += plane.iter().map(|&x| (x as f64 - image_mean[ch]).powi(2)).sum::<f64>();
            }
            for row in r.series.values.chunks(v) {
                for (j, &x) in row.iter().enumerate() {
                    ssq[j] += (x as f64 - series_mean[j]).powi(2);
                }
            }
        }
        let mut constant = Vec::new();
        let image_std: Vec<f64> = isq.iter().map(|s| (s / ni).sqrt()).collect();
        let series_std: Vec<f64> = ssq.iter().map(|s| (s / ns).sqrt()).collect();
        for (i, s) in image_std.iter().enumerate() {
            if *s == 0.0 {
                constant.push(format!("image:{i}"));
            }
        }
        for (i, s) in series_std.iter().enumerate() {
            if *s == 0.0 {
                constant.push(format!("series:{i}"));
            }
        }
        Ok(NormStats {
            image_mean,
            image_std,
            series_mean,
            series_std,
            constant,
        })
    }

    fn scale(std: f64) -> f64 {
        if std > 0.0 {
            1.0 / std
        } else {
            1.0
        }
    }

    /// Normalised image values `[C, H, W]` for the channels in `channels`.
    pub fn image(&self, r: &SampleRecord, channels: &[usize], out: &mut Vec<f64>) {
        let hw = r.image.size * r.image.size;
        for &c in channels {
            let (m, s) = (self.image_mean[c], Self::scale(self.image_std[c]));
            out.extend(r.image.values[c * hw..(c + 1) * hw].iter().map(|&x| (x as f64 - m) * s));
        }
    }

    /// Normalised series values `[L, V]` for the variables in `vars`.
    pub fn series(&self, r: &SampleRecord, vars: &[usize], out: &mut Vec<f64>) {
        for row in r.series.values.chunks(r.series.vars) {
            for &v in vars {
                out.push((row[v] as f64 - self.series_mean[v]) * Self::scale(self.series_std[v]));
            }
        }
    }
}

/// One record after z-scoring, all channels and variables.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRecord {
    pub location_id: u32,
    pub image: Vec<f64>,
    pub series: Vec<f64>,
    pub label: Option<f64>,
}

/// Applies `stats`, or statistics fitted on `records` when none are given.
pub fn normalize(records: &[SampleRecord], stats: Option<&NormStats>) -> Result<(Vec<NormalizedRecord>, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(records)?,
    };
    let out = records
        .iter()
        .map(|r| {
            let channels: Vec<usize> = (0..r.image.channels).collect();
            let vars: Vec<usize> = (0..r.series.vars).collect();
            let (mut image, mut series) = (Vec::new(), Vec::new());
            stats.image(r, &channels, &mut image);
            stats.series(r, &vars, &mut series);
            NormalizedRecord {
                location_id: r.location_id,
                image,
                series,
                label: r.label.map(f64::from),
            }
        })
        .collect();
    Ok((out, stats))
}
