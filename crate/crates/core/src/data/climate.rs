use crate::encoders::SeriesInput;
use crate::error::{Error, Result};

/// Monthly climate variables on a grid `factor` times coarser than the
/// image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClimateGrid {
    pub cells: usize,
    pub factor: usize,
    pub len: usize,
    pub vars: usize,
    /// `[cell][month][var]`, cells row-major.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl ClimateGrid {
    pub fn cell_of(&self, row: usize, col: usize) -> usize {
        (row / self.factor).min(self.cells - 1) * self.cells + (col / self.factor).min(self.cells - 1)
    }

    /// Series of the coarse cell enclosing image pixel `(row, col)`.
    pub fn series_at(&self, row: usize, col: usize) -> SeriesInput {
        let per_cell = self.len * self.vars;
        let start = self.cell_of(row, col) * per_cell;
        let values = self.values[start..start + per_cell]
            .iter()
            .zip(&self.missing[start..start + per_cell])
            .map(|(&v, &m)| if m { 0.0 } else { v as f32 })
            .collect();
        SeriesInput {
            len: self.len,
            vars: self.vars,
            values,
            missing: self.missing[start..start + per_cell].to_vec(),
        }
    }
}

/// Fills each missing cell with the mean of the `k` temporally nearest
/// observed values of the same variable (ties go to the earlier month).
pub fn knn_impute(series: &SeriesInput, k: usize) -> Result<SeriesInput> {
    if k == 0 {
        return Err(Error::Config("knn_impute needs k >= 1".into()));
    }
    let mut out = series.clone();
    if !series.has_missing() {
        return Ok(out);
    }
    for v in 0..series.vars {
        let observed: Vec<usize> = (0..series.len).filter(|&t| !series.is_missing(t, v)).collect();
        let gaps = series.len - observed.len();
        if gaps == 0 {
            continue;
        }
        if observed.len() < k {
            return Err(Error::Data(format!(
                "variable {v} has {} observed months, fewer than k = {k}",
                observed.len()
            )));
        }
        for t in 0..series.len {
            if !series.is_missing(t, v) {
                continue;
            }
            let mut near: Vec<(usize, usize)> = observed.iter().map(|&s| (s.abs_diff(t), s)).collect();
            near.sort_unstable();
            let sum: f64 = near[..k].iter().map(|&(_, s)| series.at(s, v) as f64).sum();
            let i = t * series.vars + v;
            out.values[i] = (sum / k as f64) as f32;
            out.missing[i] = false;
        }
    }
    Ok(out)
}
