//! Central finite-difference gradient oracle.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

/// `(f(x+h·e_i) − f(x−h·e_i)) / 2h` for every coordinate `i`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle {
                param: "x".into(),
                coord: i,
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Finite-difference gradient of `f` with respect to each named parameter
/// in `names` (all parameters when `names` is empty).
pub fn fd_gradient_oracle(
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    params: &ParamStore,
    names: &[&str],
    h: f64,
) -> Result<BTreeMap<String, Tensor>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let selected: Vec<String> = if names.is_empty() {
        params.names().map(str::to_string).collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };
    let mut probe = params.clone();
    let mut out = BTreeMap::new();
    for name in selected {
        let base = params.get(&name)?.clone();
        let mut grad = vec![0.0; base.len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = base.data()[i];
            let mut eval = |v: f64, probe: &mut ParamStore| -> Result<f64> {
                probe.get_mut(&name).expect("present").data_mut()[i] = v;
                let y = f(probe);
                match y {
                    Ok(y) if y.is_finite() => Ok(y),
                    _ => Err(Error::Oracle {
                        param: name.clone(),
                        coord: i,
                    }),
                }
            };
            let up = eval(orig + h, &mut probe)?;
            let down = eval(orig - h, &mut probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = orig;
            *g = (up - down) / (2.0 * h);
        }
        out.insert(name.clone(), Tensor::new(base.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let g = fd_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = fd_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn non_finite_probe_reports_coordinate() {
        let err = fd_gradient(|x| if x[1] > 0.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::Oracle { coord: 1, .. }));
    }
}
