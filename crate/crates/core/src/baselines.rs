//! Constant and nearest-neighbour reference predictors.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Median,
}

impl FromStr for Statistic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Statistic::Mean),
            "median" => Ok(Statistic::Median),
            _ => Err(Error::Config(format!("unknown statistic {s:?}"))),
        }
    }
}

/// Predicts one fitted constant for every input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicPredictor {
    pub statistic: Statistic,
    pub value: f64,
}

impl BasicPredictor {
    pub fn fit(labels: &[f64], statistic: Statistic) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("cannot fit a baseline on zero labels".into()));
        }
        let value = match statistic {
            Statistic::Mean => labels.iter().sum::<f64>() / labels.len() as f64,
            Statistic::Median => {
                let mut s = labels.to_vec();
                s.sort_by(f64::total_cmp);
                let n = s.len();
                if n % 2 == 1 {
                    s[n / 2]
                } else {
                    0.5 * (s[n / 2 - 1] + s[n / 2])
                }
            }
        };
        Ok(BasicPredictor { statistic, value })
    }

    pub fn predict(&self, n: usize) -> Vec<f64> {
        vec![self.value; n]
    }
}

/// A training point for [`knn_regress`].
#[derive(Debug, Clone, PartialEq)]
pub struct KnnPoint {
    pub location_id: u32,
    pub features: Vec<f64>,
    pub label: f64,
}

/// Mean label of the `k` nearest points by Euclidean distance; equal
/// distances are ordered by location id.
pub fn knn_regress(query: &[f64], train: &[KnnPoint], k: usize) -> Result<f64> {
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("k = {k} with {} training points", train.len())));
    }
    let mut dist: Vec<(f64, u32, f64)> = train
        .iter()
        .map(|p| {
            if p.features.len() != query.len() {
                return Err(Error::shape("knn_regress", &[query.len()], &[p.features.len()]));
            }
            let d: f64 = p.features.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((d, p.location_id, p.label))
        })
        .collect::<Result<_>>()?;
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(dist[..k].iter().map(|d| d.2).sum::<f64>() / k as f64)
}
