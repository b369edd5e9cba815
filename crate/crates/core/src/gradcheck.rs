//! Central-difference gradient estimates, used as an independent oracle for
//! [`crate::autograd::reverse_gradient`].

use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Estimates `∂f/∂θ` for every trainable coordinate of `params` as
/// `(f(θ+ε) − f(θ−ε)) / (θ+ε − (θ−ε))`, where the denominator is the
/// perturbation actually realized in `f32`.
pub fn finite_difference_gradient<F>(f: F, params: &ParamSet, eps: f32) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let mut out = BTreeMap::new();
    for name in names {
        let len = params.tensor(&name)?.len();
        let coords: Vec<usize> = (0..len).collect();
        let g = finite_difference_coords(&f, params, &name, &coords, eps)?;
        let shape = params.tensor(&name)?.shape().to_vec();
        out.insert(name, Tensor::new(shape, g)?);
    }
    Ok(out)
}

/// Central differences for selected flat coordinates of one parameter.
pub fn finite_difference_coords<F>(
    f: &F,
    params: &ParamSet,
    name: &str,
    coords: &[usize],
    eps: f32,
) -> Result<Vec<f32>>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    ensure!(eps > 0.0 && eps.is_finite(), Invalid, "eps must be positive, got {eps}");
    let base = params.tensor(name)?.clone();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        ensure!(i < base.len(), Invalid, "coordinate {i} out of range for `{name}`");
        let x = base.data()[i];
        let (hi, lo) = (x + eps, x - eps);
        let eval = |v: f32, probe: &mut ParamSet| -> Result<f64> {
            let mut t = base.clone();
            t.data_mut()[i] = v;
            probe.get_mut(name).expect("present").value = t;
            let y = f(probe)?;
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("objective at `{name}`[{i}] = {v}")));
            }
            Ok(y)
        };
        let fp = eval(hi, &mut probe)?;
        let fm = eval(lo, &mut probe)?;
        out.push(((fp - fm) / (hi as f64 - lo as f64)) as f32);
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f32, b: f32, floor: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
