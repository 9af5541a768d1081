//! Central-difference gradient verification.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs())
}

fn scalar_of(graph: &Graph, v: Var) -> Result<f64> {
    graph.value(v).item().ok_or_else(|| {
        Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            graph.value(v).shape()
        ))
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step must be > 0, got {eps}")));
    }
    Ok(())
}

/// Largest `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over the coordinates of
/// `x`, comparing backward gradients with central differences of step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let ad = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        scalar_of(&g, y)
    };
    let mut worst = 0.0f64;
    for (k, &ad_k) in ad.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(ad_k, fd));
    }
    Ok(worst)
}

/// Same check for every value of every parameter in `store`; `f` builds the
/// scalar objective from the store.
pub fn grad_check_params<F>(f: F, store: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let y = f(&mut g, &work)?;
    scalar_of(&g, y)?;
    g.backward_into(y, &mut work)?;
    let analytic = work.clone();

    let mut worst = 0.0f64;
    for id in store.ids() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            let mut probe = |delta: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[k] = orig + delta;
                let mut g = Graph::new();
                let y = f(&mut g, &work)?;
                scalar_of(&g, y)
            };
            let fd = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            work.value_mut(id).data_mut()[k] = orig;
            worst = worst.max(relative_error(analytic.grad(id)[k], fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn softmax_matmul_chain() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.91).cos());
        let w = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.53).sin());
        let c = Tensor::from_fn(&[3, 5], |i| i as f64 / 7.0);
        let err = grad_check(
            |g, x| {
                let w = g.constant(w.clone());
                let c = g.constant(c.clone());
                let h = g.matmul(x, w)?;
                let s = g.softmax(h)?;
                let p = g.mul(s, c)?;
                Ok(g.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_zero_step_and_vector_output() {
        let x = Tensor::zeros(&[2]);
        assert!(matches!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(grad_check(|_, x| Ok(x), &x, 1e-5), Err(Error::Contract(_))));
    }
}
