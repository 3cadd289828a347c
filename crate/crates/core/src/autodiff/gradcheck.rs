use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares backward-pass gradients with central differences.
///
/// `loss` builds a scalar loss on a fresh graph from parameter leaves (one per
/// entry of `params`, in order). Returns the largest relative error
/// `|a - n| / max(|a|, |n|)` over all coordinates, where a coordinate whose
/// analytic and numeric gradients are both below `1e-12` counts as exact.
pub fn gradient_check<F>(loss: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("step h must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor], what: &dyn Fn() -> String| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = loss(&mut g, &ids)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric { location: what() });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = loss(&mut g, &ids)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Numeric {
            location: "loss at unperturbed parameters".into(),
        });
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0_f64;
    let mut probe = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(&g, *id);
        for k in 0..params[pi].len() {
            let x0 = params[pi].data()[k];
            let loc = || format!("parameter {pi}, coordinate {k}");
            probe[pi].data_mut()[k] = x0 + h;
            let up = eval(&probe, &loc)?;
            probe[pi].data_mut()[k] = x0 - h;
            let down = eval(&probe, &loc)?;
            probe[pi].data_mut()[k] = x0;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-12 {
                continue;
            }
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let x = Tensor::matrix(1, 4, vec![0.3, -1.7, 2.5, 0.01]).unwrap();
        let err = gradient_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_is_exact() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let err = gradient_check(
            |g, _| Ok(g.leaf(Tensor::scalar(3.0))),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn reports_non_finite_probe() {
        // ln(x) at x = 1e-6 is fine, but x - h < 0 is not
        let x = Tensor::scalar(1e-6);
        let err = gradient_check(
            |g, p| {
                let l = g.log(p[0]);
                Ok(g.sum(l))
            },
            &[x],
            1e-5,
        );
        match err {
            Err(Error::Numeric { location }) => assert!(location.contains("coordinate 0")),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(gradient_check(|g, p| Ok(g.sum(p[0])), &[x], 0.0).is_err());
    }
}
