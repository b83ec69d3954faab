//! Small multilayer perceptrons, Adam and parameter EMA.

use rand::Rng;

use crate::diffkernel::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    LeakyRelu,
    Relu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::LeakyRelu => g.leaky_relu(x),
            Activation::Relu => g.relu(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Linear,
    Softmax,
}

/// Fully connected network: `sizes[0] -> sizes[1] -> ... -> sizes[L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    hidden: Activation,
    head: Head,
    trainable: bool,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: NodeId,
    /// `[w0, b0, w1, b1, ...]`, matching [`Mlp::params`].
    pub params: Vec<NodeId>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(sizes: &[usize], hidden: Activation, head: Head, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::param("sizes", format!("need >= 2 positive layer sizes, got {sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            weights.push(Tensor::matrix(fan_in, fan_out, w));
            biases.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
            hidden,
            head,
            trainable: true,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn hidden(&self) -> Activation {
        self.hidden
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Marks the network frozen: its forward passes use constant leaves.
    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::param(
                "flat",
                format!("expected {} parameters, got {}", self.num_params(), flat.len()),
            ));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Adds the parameters to `g` as leaves, ordered like [`params`](Self::params).
    /// They are trainable only when `trainable` is set and the network is not
    /// frozen.
    pub fn leaves(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        let as_param = trainable && self.trainable;
        self.params().into_iter().map(|t| g.leaf(t.clone(), as_param)).collect()
    }

    /// Pre-head output of the network on `x`, using parameter leaves from
    /// [`leaves`](Self::leaves).
    pub fn apply_logits(&self, g: &mut Graph, x: NodeId, leaves: &[NodeId]) -> Result<NodeId> {
        if leaves.len() != 2 * self.weights.len() {
            return Err(Error::Shape {
                op: "mlp",
                detail: format!("expected {} parameter leaves, got {}", 2 * self.weights.len(), leaves.len()),
            });
        }
        let mut h = x;
        let last = self.weights.len() - 1;
        for (i, pair) in leaves.chunks(2).enumerate() {
            let z = g.matmul(h, pair[0])?;
            h = g.add_bias(z, pair[1])?;
            if i < last {
                h = self.hidden.apply(g, h);
            }
        }
        Ok(h)
    }

    /// Full output (including the softmax head, if any).
    pub fn apply(&self, g: &mut Graph, x: NodeId, leaves: &[NodeId]) -> Result<NodeId> {
        let h = self.apply_logits(g, x, leaves)?;
        match self.head {
            Head::Softmax => g.softmax_rows(h),
            Head::Linear => Ok(h),
        }
    }

    pub fn forward_logits(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<Forward> {
        let params = self.leaves(g, trainable);
        let output = self.apply_logits(g, x, &params)?;
        Ok(Forward { output, params })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<Forward> {
        let params = self.leaves(g, trainable);
        let output = self.apply(g, x, &params)?;
        Ok(Forward { output, params })
    }

    /// Plain inference on a batch `[n, input_dim]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let out = self.forward(&mut g, xn, false)?.output;
        Ok(g.value(out).clone())
    }

    /// Argmax of the network output for every row of `x`.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict(x)?.argmax_rows())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &Mlp, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = model.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `grads` is ordered like [`Mlp::params`].
    pub fn step(&mut self, model: &mut Mlp, grads: &[&Tensor]) {
        debug_assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in model.params_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Shadow copy of a model's parameters, averaged after `start_step`.
///
/// Before the start step the shadow simply mirrors the model; at the start
/// step it takes a snapshot, and from then on
/// `shadow = decay * shadow + (1 - decay) * param`.
#[derive(Clone, Debug)]
pub struct Ema {
    decay: f64,
    start_step: usize,
    shadow: Mlp,
}

impl Ema {
    pub fn new(model: &Mlp, decay: f64, start_step: usize) -> Self {
        Ema {
            decay,
            start_step,
            shadow: model.clone(),
        }
    }

    pub fn update(&mut self, model: &Mlp, step: usize) {
        if step <= self.start_step {
            self.shadow = model.clone();
            return;
        }
        let d = self.decay;
        for (s, p) in self.shadow.params_mut().into_iter().zip(model.params()) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
    }

    pub fn model(&self) -> &Mlp {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Mlp::new(&[2, 4, 3], Activation::Tanh, Head::Softmax, &mut rng).unwrap()
    }

    #[test]
    fn softmax_head_rows_sum_to_one() {
        let out = net().predict(&Tensor::matrix(2, 2, vec![0.1, -0.3, 2.0, 1.0])).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        for r in 0..2 {
            assert!((out.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut a = net();
        let flat: Vec<f64> = (0..a.num_params()).map(|i| i as f64).collect();
        a.set_flat_params(&flat).unwrap();
        assert_eq!(a.flat_params(), flat);
        assert!(a.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn frozen_network_uses_constants() {
        let mut m = net();
        m.freeze();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.5, 0.5]));
        let f = m.forward(&mut g, x, true).unwrap();
        assert!(f.params.iter().all(|&p| !g.is_trainable(p)));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = net();
        let before = m.flat_params();
        let grads: Vec<Tensor> = m.params().iter().map(|t| Tensor::full(t.shape(), 2.0)).collect();
        let refs: Vec<&Tensor> = grads.iter().collect();
        let mut adam = Adam::new(&m, 0.01, 0.5, 0.999);
        adam.step(&mut m, &refs);
        for (a, b) in before.iter().zip(m.flat_params()) {
            assert!((a - b - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn ema_decay_one_freezes_at_start_snapshot() {
        let mut m = net();
        let mut ema = Ema::new(&m, 1.0, 5);
        let mut snapshot = None;
        for step in 1..=20 {
            let flat: Vec<f64> = m.flat_params().iter().map(|v| v + 0.1).collect();
            m.set_flat_params(&flat).unwrap();
            ema.update(&m, step);
            if step == 5 {
                snapshot = Some(m.flat_params());
            }
        }
        assert_eq!(ema.model().flat_params(), snapshot.unwrap());
    }

    #[test]
    fn ema_tracks_before_start() {
        let m = net();
        let mut ema = Ema::new(&m, 0.9, 10);
        ema.update(&m, 3);
        assert_eq!(ema.model(), &m);
    }
}
