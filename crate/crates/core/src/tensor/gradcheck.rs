use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error used for gradient checks.
pub const GRADCHECK_FLOOR: f64 = 1e-8;

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

/// `max |analytic − numeric| / (|numeric| + 1e-8)` over all coordinates.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    analytic.ensure_same_shape(numeric, "gradcheck")?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + GRADCHECK_FLOOR))
        .fold(0.0, f64::max))
}

/// Gradients with magnitude below this cannot be resolved to 1e-6 relative
/// accuracy by central differences at `h = 1e-5`: the f64 evaluation noise of
/// an O(1) loss is already ~1e-11 after division by `2h`.
pub const FD_RESOLUTION: f64 = 1e-4;

/// Agreement between analytic and numeric gradients of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    /// `max |a − n| / (|n| + 1e-8)` over all coordinates.
    pub rel: f64,
    /// `max |a − n| / max(|n| + 1e-8, FD_RESOLUTION)`: the same bound where central
    /// differences can resolve it, an absolute one below that.
    pub rel_floored: f64,
}

/// Compares backward-pass gradients of every parameter in `store` against
/// central differences of `loss`, in store order.
pub fn param_gradcheck<F>(store: &ParamStore, h: f64, mut loss: F) -> Result<Vec<GroupError>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut tape = Tape::new();
    let root = loss(&mut tape, &analytic)?;
    tape.backward(root, &mut analytic)?;
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut probe = store.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.set_value(id, x.clone())?;
                let mut tape = Tape::new();
                let root = loss(&mut tape, &probe)?;
                let v = tape.value(root);
                if !v.is_scalar() {
                    return Err(Error::Usage("gradcheck loss must be a scalar".into()));
                }
                Ok(v.data()[0])
            },
            store.value(id),
            h,
        )?;
        let a = analytic.grad(id);
        let rel_floored = a
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(x, n)| (x - n).abs() / (n.abs() + GRADCHECK_FLOOR).max(FD_RESOLUTION))
            .fold(0.0, f64::max);
        report.push(GroupError {
            name: store.name(id).to_string(),
            rel: max_relative_error(a, &numeric)?,
            rel_floored,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![0.3, -1.0, 8.0]);
        let g = finite_diff_grad(|_| Ok(3.25), &x, 1e-5).unwrap();
        assert_eq!(g, Tensor::zeros(&[3]));
    }

    #[test]
    fn linear_function_recovers_coefficients() {
        let c = Tensor::vector(vec![0.5, -2.0, 3.0]);
        let x = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let g = finite_diff_grad(|t| t.dot(&c), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&c).unwrap() < 1e-9);
    }

    #[test]
    fn relative_error_uses_floor() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        let n = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(max_relative_error(&a, &n).unwrap(), 0.0);
        let a = Tensor::vector(vec![1e-9]);
        let n = Tensor::vector(vec![0.0]);
        assert!((max_relative_error(&a, &n).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn param_gradcheck_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.5, -1.5, 2.0]));
        let report = param_gradcheck(&store, 1e-5, |tape, s| {
            let w = tape.param(s, s.find("w").unwrap());
            let sq = tape.mul(w, w)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].name, "w");
        assert!(report[0].rel < 1e-8, "{}", report[0].rel);
        assert!(report[0].rel_floored <= report[0].rel);
    }
}
