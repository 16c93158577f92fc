use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest `|autodiff − central difference| / max(|central difference|, 1e-8)`
/// over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        step,
        None,
    )
}

/// Checks the gradient with respect to several inputs at once.
///
/// `coords` optionally restricts the check to the given `(input, flat index)`
/// pairs; large models are checked on a sample of their coordinates.
pub fn grad_check_many<F>(
    f: F,
    xs: &[Tensor],
    step: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Domain(format!("grad_check step {step} outside [1e-6, 1e-3]")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::shape("grad_check (f must be scalar)", tape.shape(out), &[1]))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let first = tape.value(out).item();
    tape.backward(out)?;
    let second = eval(xs)?;
    if first.map(f64::to_bits) != Some(second.to_bits()) {
        return Err(Error::Domain("grad_check: f is not deterministic".into()));
    }
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = xs
                .iter()
                .enumerate()
                .flat_map(|(t, x)| (0..x.len()).map(move |j| (t, j)))
                .collect();
            &all
        }
    };

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for &(t, j) in coords {
        let orig = xs[t].data()[j];
        probe[t].data_mut()[j] = orig + step;
        let plus = eval(&probe)?;
        probe[t].data_mut()[j] = orig - step;
        let minus = eval(&probe)?;
        probe[t].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let auto = grads[t].data()[j];
        let err = (auto - fd).abs() / fd.abs().max(1e-8);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("grad_check at input {t}, index {j}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
