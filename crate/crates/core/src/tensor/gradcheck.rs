use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar-valued `f` at `at`.
pub fn finite_difference_gradient<T, F>(mut f: F, at: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite differences need eps > 0, got {eps}")));
    }
    let mut probe = at.clone();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.as_f64() + eps);
        let plus = f(&probe)?.item()?;
        probe.data_mut()[i] = T::of(orig.as_f64() - eps);
        let minus = f(&probe)?.item()?;
        probe.data_mut()[i] = orig;
        out.push(T::of((plus.as_f64() - minus.as_f64()) / (2.0 * eps)));
    }
    Tensor::new(at.shape().to_vec(), out)
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Worst relative error between tape gradients and central differences of
/// `build` with respect to every tensor in `inputs`. `build` receives the
/// inputs as differentiable leaves and returns a scalar loss.
///
/// An element whose `±eps` probes change the graph's branch pattern (a ReLU
/// flips, a max-pool winner moves) straddles a kink where the derivative is
/// undefined; it is skipped. Fails if every element is skipped.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite differences need eps > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let base_pattern = g.branch_pattern();
    let grads = g.backward(loss)?;
    let eval = |k: usize, probe: &Tensor<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let vars: Vec<Var> =
            inputs.iter().enumerate().map(|(j, t)| g.param(if j == k { probe.clone() } else { t.clone() })).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g.value(loss).item()?, g.branch_pattern() == base_pattern))
    };
    let mut worst = 0.0f64;
    let (mut checked, mut total) = (0usize, 0usize);
    for (k, (&v, x)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut probe = x.clone();
        for i in 0..x.len() {
            total += 1;
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let (plus, same_plus) = eval(k, &probe)?;
            probe.data_mut()[i] = orig - eps;
            let (minus, same_minus) = eval(k, &probe)?;
            probe.data_mut()[i] = orig;
            if !(same_plus && same_minus) {
                continue;
            }
            checked += 1;
            worst = worst.max(relative_error(analytic.data()[i], (plus - minus) / (2.0 * eps)));
        }
    }
    if checked == 0 && total > 0 {
        return Err(Error::invalid("gradient check: every element straddles a kink"));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0);
        let g = finite_difference_gradient(|t| Ok(Tensor::scalar(t.data().iter().sum())), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_difference_gradient(|t| Ok(Tensor::scalar(t.data()[0] * t.data()[0])), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::<f64>::ones(&[4]);
        let g = finite_difference_gradient(|_| Ok(Tensor::scalar(2.5)), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_rule_passes() {
        let a = Tensor::<f64>::from_fn(&[3], |i| i as f64 + 0.5);
        let b = Tensor::<f64>::from_fn(&[3], |i| 1.0 - i as f64);
        let worst = check_gradients(&[a, b], 1e-5, |g, v| {
            let m = g.mul(v[0], v[1])?;
            g.sum(m)
        })
        .unwrap();
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn elements_on_a_kink_are_skipped() {
        // relu(x) at exactly 0 has no derivative; the other elements are still checked.
        let x = Tensor::<f64>::new(vec![3], vec![0.0, 0.5, -0.5]).unwrap();
        let worst = check_gradients(&[x], 1e-5, |g, v| {
            let r = g.relu(v[0])?;
            g.sum(r)
        })
        .unwrap();
        assert!(worst < 1e-9, "{worst}");
        let at_kink = Tensor::<f64>::zeros(&[2]);
        assert!(check_gradients(&[at_kink], 1e-5, |g, v| {
            let r = g.relu(v[0])?;
            g.sum(r)
        })
        .is_err());
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::<f64>::ones(&[2]);
        let r = finite_difference_gradient(|t| Ok(t.clone()), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonScalarLoss(_))));
        assert!(finite_difference_gradient(|t| Ok(t.clone()), &x, 0.0).is_err());
    }
}
