//! Regression metrics: MAE, R², RMSE, RPIQ and Lin's concordance.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn check_pair(y: &[f64], yhat: &[f64], min_len: usize) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::shape("metric", &[y.len()], &[yhat.len()]));
    }
    if y.len() < min_len {
        return Err(Error::Domain(format!("metric needs at least {min_len} values, got {}", y.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 1)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 1)?;
    Ok((y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64).sqrt())
}

/// Coefficient of determination as a fraction. Undefined for constant `y`.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 2)?;
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|a| (a - m) * (a - m)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain("r2 undefined for constant observations".into()));
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Linear-interpolation percentile at rank `(n-1)p` of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// First and third quartiles, inclusive method.
pub fn quartiles(y: &[f64]) -> Result<(f64, f64)> {
    if y.len() < 4 {
        return Err(Error::Domain(format!("quartiles need at least 4 values, got {}", y.len())));
    }
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    Ok((percentile(&s, 0.25), percentile(&s, 0.75)))
}

/// Ratio of the interquartile distance to a given RMSE.
pub fn rpiq_from(q1: f64, q3: f64, rmse: f64) -> Result<f64> {
    if rmse <= 0.0 {
        return Err(Error::Domain("rpiq undefined for zero rmse".into()));
    }
    Ok((q3 - q1) / rmse)
}

pub fn rpiq(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let e = rmse(y, yhat)?;
    let (q1, q3) = quartiles(y)?;
    rpiq_from(q1, q3, e)
}

/// Population means, variances and covariance.
fn moments(y: &[f64], yhat: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (my, mp) = (mean(y), mean(yhat));
    let n = y.len() as f64;
    let vy = y.iter().map(|a| (a - my) * (a - my)).sum::<f64>() / n;
    let vp = yhat.iter().map(|a| (a - mp) * (a - mp)).sum::<f64>() / n;
    let cov = y.iter().zip(yhat).map(|(a, b)| (a - my) * (b - mp)).sum::<f64>() / n;
    (my, mp, vy, vp, cov)
}

/// Concordance correlation coefficient with population moments.
pub fn ccc(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 2)?;
    let (my, mp, vy, vp, cov) = moments(y, yhat);
    if vy == 0.0 || vp == 0.0 {
        return Err(Error::Domain("ccc undefined for a constant vector".into()));
    }
    let rho = cov / (vy.sqrt() * vp.sqrt());
    let c = 2.0 * rho * vy.sqrt() * vp.sqrt() / (vy + vp + (my - mp) * (my - mp));
    Ok(c.clamp(-1.0, 1.0))
}

/// Pearson correlation.
pub fn pearson(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 2)?;
    let (_, _, vy, vp, cov) = moments(y, yhat);
    if vy == 0.0 || vp == 0.0 {
        return Err(Error::Domain("correlation undefined for a constant vector".into()));
    }
    Ok(cov / (vy.sqrt() * vp.sqrt()))
}

/// All five metrics for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub r2_percent: f64,
    pub rmse: f64,
    pub rpiq: f64,
    pub ccc: f64,
    pub n: usize,
    pub split: String,
    pub seed: u64,
}

impl MetricsReport {
    /// Computes every metric. A constant prediction vector has no
    /// concordance and is reported as `ccc = 0`; a perfect fit has
    /// unbounded RPIQ and is reported as infinity.
    pub fn compute(y: &[f64], yhat: &[f64], split: &str, seed: u64) -> Result<Self> {
        check_pair(y, yhat, 4)?;
        if yhat.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predictions or labels".into()));
        }
        let e = rmse(y, yhat)?;
        let (q1, q3) = quartiles(y)?;
        let ccc = ccc(y, yhat).unwrap_or(0.0);
        Ok(MetricsReport {
            mae: mae(y, yhat)?,
            r2_percent: 100.0 * r2(y, yhat)?,
            rmse: e,
            rpiq: if e > 0.0 { (q3 - q1) / e } else { f64::INFINITY },
            ccc,
            n: y.len(),
            split: split.to_string(),
            seed,
        })
    }

    pub const CSV_HEADER: [&'static str; 8] = ["split", "seed", "n", "mae", "r2_percent", "rmse", "rpiq", "ccc"];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.split.clone(),
            self.seed.to_string(),
            self.n.to_string(),
            fmt_float(self.mae),
            fmt_float(self.r2_percent),
            fmt_float(self.rmse),
            fmt_float(self.rpiq),
            fmt_float(self.ccc),
        ]
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}
