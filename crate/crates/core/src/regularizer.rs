//! Class-balancing regularizer on generated batches.
//!
//! `L_reg = sum_k p_k log(p_k) / N_k`, where `p` is the batch-mean softmax of
//! a frozen classifier and `N` the effective class distribution. `N` enters
//! the graph as a constant.

use crate::diffkernel::{Graph, NodeId, Tensor, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{Head, Mlp};
use crate::stats::ClassDistribution;

/// Batch-mean classifier softmax as a graph node.
#[derive(Clone, Debug)]
pub struct MeanSoftmax {
    pub node: NodeId,
    pub p_hat: Vec<f64>,
    pub batch_size: usize,
    /// Per-sample softmax rows (`[n, K]`), used for label counting.
    pub probs: NodeId,
}

/// Classifier softmax averaged over the generated batch. The classifier
/// enters with constant weights, so gradients flow only into `generated`.
pub fn mean_softmax(g: &mut Graph, classifier: &Mlp, generated: NodeId) -> Result<MeanSoftmax> {
    if classifier.head() != Head::Softmax {
        return Err(Error::param("classifier", "needs a softmax head"));
    }
    let batch_size = g.value(generated).rows();
    if batch_size == 0 {
        return Err(Error::Shape {
            op: "mean_softmax",
            detail: "empty generated batch".into(),
        });
    }
    let probs = classifier.forward(g, generated, false)?.output;
    let node = g.mean_rows(probs)?;
    Ok(MeanSoftmax {
        node,
        p_hat: g.value(node).data().to_vec(),
        batch_size,
        probs,
    })
}

fn inverse_weights(n: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = n.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::param("n", format!("effective class distribution must be > 0, got {bad}")));
    }
    Ok(n.iter().map(|v| 1.0 / v).collect())
}

/// Regularizer node over `p_hat` (a `[1, K]` node).
pub fn l_reg(g: &mut Graph, p_hat: NodeId, n: &ClassDistribution) -> Result<NodeId> {
    l_reg_weighted(g, p_hat, n.probs())
}

/// Same as [`l_reg`] with raw positive weights `n` (not necessarily
/// normalized).
pub fn l_reg_weighted(g: &mut Graph, p_hat: NodeId, n: &[f64]) -> Result<NodeId> {
    let k = g.value(p_hat).len();
    if n.len() != k {
        return Err(Error::Shape {
            op: "l_reg",
            detail: format!("p_hat has {k} classes, N has {}", n.len()),
        });
    }
    let inv = g.constant(Tensor::row(inverse_weights(n)?));
    let log_p = g.log(p_hat);
    let plogp = g.mul(p_hat, log_p)?;
    let weighted = g.mul(plogp, inv)?;
    Ok(g.sum(weighted))
}

/// Value of the regularizer without a graph.
pub fn l_reg_value(p_hat: &[f64], n: &[f64]) -> Result<f64> {
    if p_hat.len() != n.len() {
        return Err(Error::param("n", "length differs from p_hat"));
    }
    let inv = inverse_weights(n)?;
    Ok(p_hat
        .iter()
        .zip(inv)
        .map(|(&p, w)| p * p.max(LOG_FLOOR).ln() * w)
        .sum())
}

/// `(1 + log p_k) / N_k`, the gradient of the regularizer in `p_hat`.
pub fn l_reg_gradient(p_hat: &[f64], n: &[f64]) -> Result<Vec<f64>> {
    let inv = inverse_weights(n)?;
    Ok(p_hat
        .iter()
        .zip(inv)
        .map(|(&p, w)| (1.0 + p.max(LOG_FLOOR).ln()) * w)
        .collect())
}

/// `gan_term + (lambda / K) * reg_term`. With `lambda == 0` the GAN term is
/// returned as is.
pub fn combined_generator_loss(g: &mut Graph, gan_term: NodeId, reg_term: NodeId, lambda: f64, classes: usize) -> Result<NodeId> {
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", format!("must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(gan_term);
    }
    let scaled = g.scale(reg_term, lambda / classes as f64);
    g.add(gan_term, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_value() {
        let third = vec![1.0 / 3.0; 3];
        let v = l_reg_value(&third, &third).unwrap();
        assert_relative_eq!(v, 3.0 * (1.0f64 / 3.0).ln(), epsilon = 1e-14);
        assert_relative_eq!(v, -3.295836866004329, epsilon = 1e-12);
    }

    #[test]
    fn gradient_formula_matches_graph() {
        let n = [0.25, 0.75];
        let expected = l_reg_gradient(&[0.5, 0.5], &n).unwrap();
        assert_relative_eq!(expected[0], (1.0 + 0.5f64.ln()) / 0.25, epsilon = 1e-14);
        assert_relative_eq!(expected[0], 1.2274112777602189, epsilon = 1e-12);
        assert_relative_eq!(expected[1], 0.4091370925867396, epsilon = 1e-12);

        let mut g = Graph::new();
        let p = g.param(Tensor::row(vec![0.5, 0.5]));
        let r = l_reg_weighted(&mut g, p, &n).unwrap();
        g.backward(r).unwrap();
        assert_relative_eq!(g.grad(p).data()[0], expected[0], epsilon = 1e-14);
        assert_relative_eq!(g.grad(p).data()[1], expected[1], epsilon = 1e-14);
    }

    #[test]
    fn homogeneous_in_n() {
        let p = [0.2, 0.5, 0.3];
        let n = [0.1, 0.6, 0.3];
        let base = l_reg_value(&p, &n).unwrap();
        for c in [0.5, 2.0, 17.0] {
            let scaled: Vec<f64> = n.iter().map(|v| v * c).collect();
            assert_relative_eq!(l_reg_value(&p, &scaled).unwrap(), base / c, max_relative = 1e-14);
        }
    }

    #[test]
    fn rejects_nonpositive_n() {
        assert!(l_reg_value(&[0.5, 0.5], &[0.0, 1.0]).is_err());
        let mut g = Graph::new();
        let p = g.param(Tensor::row(vec![0.5, 0.5]));
        assert!(l_reg_weighted(&mut g, p, &[1.0, -1.0]).is_err());
        assert!(l_reg_weighted(&mut g, p, &[1.0]).is_err());
    }

    #[test]
    fn combined_loss_cases() {
        let mut g = Graph::new();
        let gan = g.param(Tensor::scalar(0.7));
        let reg = g.param(Tensor::scalar(-3.0));
        assert_eq!(combined_generator_loss(&mut g, gan, reg, 0.0, 10).unwrap(), gan);
        let c = combined_generator_loss(&mut g, gan, reg, 10.0, 10).unwrap();
        assert_relative_eq!(g.value(c).item(), 0.7 - 3.0, epsilon = 1e-15);
        assert!(combined_generator_loss(&mut g, gan, reg, -1.0, 10).is_err());
    }

    fn identity_softmax_classifier() -> Mlp {
        // Single linear layer with identity weights: softmax(x) per row.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Mlp::new(&[2, 2], Activation::Tanh, Head::Softmax, &mut rng).unwrap();
        c.set_flat_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        c.freeze();
        c
    }

    #[test]
    fn mean_softmax_averages_rows() {
        let c = identity_softmax_classifier();
        let mut g = Graph::new();
        // logits so extreme that the rows are (1,0) and (0,1)
        let x = g.param(Tensor::matrix(2, 2, vec![800.0, 0.0, 0.0, 800.0]));
        let m = mean_softmax(&mut g, &c, x).unwrap();
        assert_eq!(m.p_hat, vec![0.5, 0.5]);
        assert_eq!(m.batch_size, 2);
    }

    #[test]
    fn mean_softmax_single_and_repeated_rows() {
        let c = identity_softmax_classifier();
        let row = c.predict(&Tensor::row(vec![0.3, -1.2])).unwrap();
        let mut g = Graph::new();
        let one = g.constant(Tensor::row(vec![0.3, -1.2]));
        assert_eq!(mean_softmax(&mut g, &c, one).unwrap().p_hat, row.data());
        let rep = g.constant(Tensor::matrix(3, 2, [0.3, -1.2].repeat(3)));
        let m = mean_softmax(&mut g, &c, rep).unwrap();
        for (a, b) in m.p_hat.iter().zip(row.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn classifier_receives_no_gradient() {
        let c = identity_softmax_classifier();
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 2, vec![0.1, 0.4, -0.3, 0.2]));
        let m = mean_softmax(&mut g, &c, x).unwrap();
        let r = l_reg(&mut g, m.node, &ClassDistribution::from_weights(&[1.0, 3.0]).unwrap()).unwrap();
        g.backward(r).unwrap();
        assert!(g.grad(x).data().iter().any(|v| *v != 0.0));
        let frozen_leaves: Vec<NodeId> = (0..g.len())
            .map(NodeId::from_index)
            .filter(|&id| *g.op(id) == crate::diffkernel::Op::Leaf && !g.is_trainable(id))
            .collect();
        assert!(frozen_leaves.len() >= 2);
        for id in frozen_leaves {
            assert!(g.grad(id).data().iter().all(|v| *v == 0.0));
        }
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn simplex(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn permutation_equivariant(raw_p in prop::collection::vec(0.01f64..1.0, 2..12), raw_n in prop::collection::vec(0.01f64..1.0, 12), rot in 0usize..12) {
            let p = simplex(&raw_p);
            let n = simplex(&raw_n[..p.len()]);
            let r = rot % p.len();
            let mut pp = p.clone();
            let mut nn = n.clone();
            pp.rotate_left(r);
            nn.rotate_left(r);
            let a = l_reg_value(&p, &n).unwrap();
            let b = l_reg_value(&pp, &nn).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn uniform_n_is_scaled_entropy(raw_p in prop::collection::vec(0.01f64..1.0, 2..12)) {
            let p = simplex(&raw_p);
            let k = p.len() as f64;
            let n = vec![1.0 / k; p.len()];
            let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
            let v = l_reg_value(&p, &n).unwrap();
            prop_assert!((-v - k * entropy).abs() <= 1e-12 * (k * entropy).max(1.0));
        }
    }
}
