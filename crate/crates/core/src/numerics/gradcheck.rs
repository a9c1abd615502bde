//! Central finite differences, used as the independent oracle for the tape's
//! gradient rules.

use super::{Bindings, ParamStore, Tape, Var};
use crate::error::Result;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Numerical partial derivatives of `f` for a subset of coordinates.
pub fn central_difference_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest element-wise `|a - n| / max(1, |a|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Worst parameter found by [`check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_error: f64,
    pub worst: String,
    pub probed: usize,
}

/// Compares tape gradients of every parameter in `store` against central
/// differences. `per_param` caps the coordinates probed per tensor; probes are
/// spread evenly over the tensor.
pub fn check_params(
    store: &ParamStore,
    mut loss: impl FnMut(&mut Tape, &Bindings) -> Result<Var>,
    per_param: Option<usize>,
    h: f64,
) -> Result<ParamCheck> {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = s.bind_frozen(&mut tape);
        let out = loss(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut probe = store.clone();
    let mut report = ParamCheck {
        max_error: 0.0,
        worst: String::new(),
        probed: 0,
    };
    for p in store.iter() {
        let n = p.tensor.numel();
        let k = per_param.map_or(n, |c| c.min(n));
        let coords: Vec<usize> = (0..k).map(|i| i * n / k).collect();
        let id = store.id(&p.name).expect("parameter present");
        let analytic = grads
            .get(vars.var(id))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for &c in &coords {
            let orig = p.tensor.data()[c];
            probe.get_mut(id).data_mut()[c] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[c] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = max_relative_error(&[analytic[c]], &[numeric]);
            if err > report.max_error || report.worst.is_empty() {
                report.max_error = err;
                report.worst = format!("{}[{c}]", p.name);
            }
            report.probed += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_derivative() {
        let g = central_difference(|x| x[0] * x[0] * x[0] + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!(max_relative_error(&[12.0, 2.0], &g) < 1e-8);
    }
}
