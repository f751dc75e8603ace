//! Central finite-difference oracle for gradient verification.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::ParamStore;

/// Standard scalarization for gradient checks: sum of squares, scaled small.
///
/// The scale keeps central-difference roundoff below the 1e-8 floor in the
/// relative-error denominator, so near-zero gradients are not swamped by
/// evaluation noise.
pub const GRADCHECK_LOSS_SCALE: f64 = 1e-6;

pub fn gradcheck_loss(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    let sq = g.mul(out, out)?;
    let sum = g.sum_all(sq)?;
    g.scale(sum, GRADCHECK_LOSS_SCALE)
}

/// Compares reverse-mode gradients of a scalar-valued function of the store's
/// tracked parameters against central finite differences.
///
/// `build` must construct the loss from staged parameters and be
/// deterministic; a repeated-evaluation mismatch is reported as a contract
/// error. Returns the maximum over all tracked scalars of
/// `|analytic - central| / max(1e-8, |central|)`.
pub fn finite_difference_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite difference step must be positive".into()));
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let id = build(store, &mut g)?;
        let data = g.data(id);
        if data.len() != 1 {
            return Err(Error::Contract(format!(
                "finite_difference_check requires a scalar function, got shape {:?}",
                g.shape(id)
            )));
        }
        Ok(data[0])
    };

    let v1 = eval(store)?;
    let v2 = eval(store)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Contract(
            "function is not deterministic: repeated evaluation mismatch".into(),
        ));
    }

    let mut g = Graph::new();
    let loss = build(store, &mut g)?;
    g.backward(loss)?;
    let analytic = g.param_grads();

    let mut max_rel = 0.0f64;
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = store.get(name)?.data[i];
            store.get_mut(name)?.data[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(name)?.data[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(name)?.data[i] = orig;
            let central = (plus - minus) / (2.0 * eps);
            let rel = (grad[i] - central).abs() / central.abs().max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_is_nearly_exact() {
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap())
            .unwrap();
        let err = finite_difference_check(&mut store, 1e-6, |s, g| {
            let x = g.param(s, "x")?;
            let sq = g.mul(x, x)?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(err < 1e-9, "quadratic error {err}");
    }

    #[test]
    fn zero_eps_is_contract_error() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let res = finite_difference_check(&mut store, 0.0, |s, g| {
            let x = g.param(s, "x")?;
            g.sum_all(x)
        });
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn randomized_small_ops_pass_gradcheck() {
        // Composite of matmul, bias, gelu, softmax, layer norm over random
        // small shapes and multiple seeds.
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.insert("w", Tensor::trunc_normal(vec![4, 6], 0.5, &mut rng)).unwrap();
            store.insert("b", Tensor::trunc_normal(vec![6], 0.5, &mut rng)).unwrap();
            store.insert("gain", Tensor::trunc_normal(vec![6], 0.5, &mut rng)).unwrap();
            store.insert("bias", Tensor::trunc_normal(vec![6], 0.5, &mut rng)).unwrap();
            let x = Tensor::trunc_normal(vec![3, 4], 1.0, &mut rng);
            let err = finite_difference_check(&mut store, 1e-6, |s, g| {
                let xs = g.leaf(&x);
                let w = g.param(s, "w")?;
                let b = g.param(s, "b")?;
                let gain = g.param(s, "gain")?;
                let bias = g.param(s, "bias")?;
                let h = g.matmul(xs, w)?;
                let h = g.add_bias(h, b)?;
                let h = g.gelu(h)?;
                let h = g.layer_norm(h, gain, bias, 1e-5)?;
                let h = g.softmax_last(h)?;
                let sq = g.mul(h, h)?;
                g.sum_all(sq)
            })
            .unwrap();
            assert!(err < 1e-5, "seed {seed} rel err {err}");
        }
    }

    #[test]
    fn cross_entropy_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert("logits", Tensor::trunc_normal(vec![4, 5], 1.0, &mut rng)).unwrap();
        let err = finite_difference_check(&mut store, 1e-6, |s, g| {
            let l = g.param(s, "logits")?;
            g.cross_entropy_masked(l, &[1, 2, 0, 4], &[true, false, true, true])
        })
        .unwrap();
        assert!(err < 1e-7, "cross entropy rel err {err}");
    }
}



