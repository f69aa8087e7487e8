//! Single-hidden-layer rectifier networks with hand-derived gradients, the
//! momentum co-optimizer, and targeted reinitialization.
//!
//! Weights are stored input-major: the `hidden_dim` weights fed by input `j`
//! are contiguous at `weights[j * hidden_dim .. (j + 1) * hidden_dim]`. This
//! makes sparse binary inputs cheap to propagate and makes an input column a
//! contiguous slice for reinitialization.
//!
//! Momentum decay is lazy per input column. A column whose input was zero
//! gets a zero gradient, so its co-optimizer steps only decay the velocity
//! and drift the weights along it. Those steps are counted in
//! `DenseMomentum::pending` and applied in closed form the next time the
//! column receives a gradient; reads through [`DenseNet::forward_lazy_into`]
//! or [`DenseNet::materialized`] see the caught-up values.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use thiserror::Error;

/// Direction in which `co_opt` applies the velocity. The listed optimizer
/// writes `w + alpha * velocity`, but the gradients fed to it are gradients of
/// a loss, so descent needs the minus sign.
pub const UPDATE_SIGN: f64 = -1.0;

/// Reusable working memory. Carries no state, so it never affects equality
/// and is not serialized.
#[derive(Clone, Debug, Default)]
pub struct Scratch<T>(pub T);

impl<T> PartialEq for Scratch<T> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input index {index} out of range for input dimension {input_dim}")]
    InputOutOfRange { index: usize, input_dim: usize },
    #[error("snapshot shape mismatch: expected {expected}, found {found}")]
    SnapshotShape { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Momentum velocity with the same shape as the weights it follows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub velocity: Vec<f64>,
}

impl MomentumState {
    pub fn zeros(len: usize) -> Self {
        MomentumState { velocity: vec![0.0; len] }
    }

    pub fn reset(&mut self) {
        self.velocity.fill(0.0);
    }
}

/// One co-optimizer step: `v' = nu * v + (1 - nu) * grad`, then
/// `w' = w + UPDATE_SIGN * alpha * v'`.
pub fn co_opt(weights: &mut [f64], alpha: f64, grad: &[f64], state: &mut MomentumState, nu: f64) {
    assert_eq!(weights.len(), grad.len());
    assert_eq!(weights.len(), state.velocity.len());
    let step = UPDATE_SIGN * alpha;
    let fresh = 1.0 - nu;
    for ((w, v), &g) in weights.iter_mut().zip(state.velocity.iter_mut()).zip(grad) {
        *v = nu * *v + fresh * g;
        *w += step * *v;
    }
}

/// `co_opt` for a gradient that is a scaled vector, `grad = scale * dir`.
pub fn co_opt_scaled(
    weights: &mut [f64],
    alpha: f64,
    scale: f64,
    dir: &[f64],
    state: &mut MomentumState,
    nu: f64,
) {
    assert_eq!(weights.len(), dir.len());
    assert_eq!(weights.len(), state.velocity.len());
    let step = UPDATE_SIGN * alpha;
    let fresh = 1.0 - nu;
    for ((w, v), &d) in weights.iter_mut().zip(state.velocity.iter_mut()).zip(dir) {
        *v = nu * *v + fresh * (scale * d);
        *w += step * *v;
    }
}

/// Forward-pass values kept for the backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Activations {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    /// Same input-major layout as `DenseNet::weights`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    input_dim: usize,
    hidden_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Velocities for both parameter tensors of a [`DenseNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMomentum {
    pub weights: MomentumState,
    pub bias: MomentumState,
    /// Gradient-free steps not yet applied to each input column.
    pub pending: Vec<u32>,
    /// `(UPDATE_SIGN * alpha, nu)` of the latest step, for reading stale columns.
    pub rate: (f64, f64),
}

impl DenseMomentum {
    pub fn for_net(net: &DenseNet) -> Self {
        DenseMomentum {
            weights: MomentumState::zeros(net.weights.len()),
            bias: MomentumState::zeros(net.bias.len()),
            pending: vec![0; net.input_dim],
            rate: (0.0, 0.0),
        }
    }

    pub fn reset(&mut self) {
        self.weights.reset();
        self.bias.reset();
        self.pending.fill(0);
    }

    /// Weight offset coefficient for column `j`: after `k` gradient-free steps
    /// `v_k = nu^k v` and `w_k = w + coef * v` with
    /// `coef = step * (nu + nu^2 + ... + nu^k)`.
    fn idle(&self, j: usize) -> Option<(f64, f64)> {
        let k = self.pending[j];
        if k == 0 {
            return None;
        }
        let (step, nu) = self.rate;
        let decay = nu.powi(k.min(i32::MAX as u32) as i32);
        let sum = if nu == 1.0 { f64::from(k) } else { nu * (1.0 - decay) / (1.0 - nu) };
        Some((step * sum, decay))
    }
}

fn init_bound(input_dim: usize) -> f64 {
    1.0 / (input_dim as f64).sqrt()
}

/// `weights ~ U(-1/sqrt(input_dim), 1/sqrt(input_dim))`, zero bias, zero velocity.
pub fn init_dense<R: Rng + ?Sized>(
    input_dim: usize,
    hidden_dim: usize,
    rng: &mut R,
) -> (DenseNet, DenseMomentum) {
    assert!(input_dim >= 1 && hidden_dim >= 1, "network dimensions must be positive");
    let bound = init_bound(input_dim);
    let weights = (0..input_dim * hidden_dim).map(|_| rng.gen_range(-bound..=bound)).collect();
    let net = DenseNet { input_dim, hidden_dim, weights, bias: vec![0.0; hidden_dim] };
    let momentum = DenseMomentum::for_net(&net);
    (net, momentum)
}

impl DenseNet {
    /// Builds a network from explicit input-major weights.
    pub fn from_parts(input_dim: usize, hidden_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        assert!(input_dim >= 1 && hidden_dim >= 1, "network dimensions must be positive");
        assert_eq!(weights.len(), input_dim * hidden_dim, "weight count");
        assert_eq!(bias.len(), hidden_dim, "bias length");
        DenseNet { input_dim, hidden_dim, weights, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Weight from input `input` to hidden unit `unit`.
    pub fn weight(&self, unit: usize, input: usize) -> f64 {
        self.weights[input * self.hidden_dim + unit]
    }

    pub fn column(&self, input: usize) -> &[f64] {
        &self.weights[input * self.hidden_dim..(input + 1) * self.hidden_dim]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|w| w.is_finite())
    }

    /// `max(0, W x + b)`, filling `act`. Zero inputs are skipped.
    pub fn forward_into(&self, x: &[f64], act: &mut Activations) {
        assert_eq!(x.len(), self.input_dim, "input dimension");
        act.pre.clear();
        act.pre.extend_from_slice(&self.bias);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (p, &w) in act.pre.iter_mut().zip(self.column(j)) {
                    *p += w * xj;
                }
            }
        }
        act.hidden.clear();
        act.hidden.extend(act.pre.iter().map(|&p| p.max(0.0)));
    }

    pub fn forward_activations(&self, x: &[f64]) -> Activations {
        let mut act = Activations::default();
        self.forward_into(x, &mut act);
        act
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_activations(x).hidden
    }

    /// `forward_into` with the pending momentum steps of `momentum` applied
    /// to the columns read.
    pub fn forward_lazy_into(&self, x: &[f64], momentum: &DenseMomentum, act: &mut Activations) {
        assert_eq!(x.len(), self.input_dim, "input dimension");
        act.pre.clear();
        act.pre.extend_from_slice(&self.bias);
        let h = self.hidden_dim;
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let col = self.column(j);
            match momentum.idle(j) {
                None => {
                    for (p, &w) in act.pre.iter_mut().zip(col) {
                        *p += w * xj;
                    }
                }
                Some((coef, _)) => {
                    let vel = &momentum.weights.velocity[j * h..(j + 1) * h];
                    for ((p, &w), &v) in act.pre.iter_mut().zip(col).zip(vel) {
                        *p += (w + coef * v) * xj;
                    }
                }
            }
        }
        act.hidden.clear();
        act.hidden.extend(act.pre.iter().map(|&p| p.max(0.0)));
    }

    pub fn forward_lazy(&self, x: &[f64], momentum: &DenseMomentum) -> Vec<f64> {
        let mut act = Activations::default();
        self.forward_lazy_into(x, momentum, &mut act);
        act.hidden
    }

    /// Applies the pending steps of column `j`.
    fn catch_up(&mut self, momentum: &mut DenseMomentum, j: usize) {
        if let Some((coef, decay)) = momentum.idle(j) {
            let h = self.hidden_dim;
            let w = &mut self.weights[j * h..(j + 1) * h];
            let v = &mut momentum.weights.velocity[j * h..(j + 1) * h];
            for (w, v) in w.iter_mut().zip(v.iter_mut()) {
                *w += coef * *v;
                *v *= decay;
            }
            momentum.pending[j] = 0;
        }
    }

    /// Applies every pending step.
    pub fn materialize(&mut self, momentum: &mut DenseMomentum) {
        for j in 0..self.input_dim {
            self.catch_up(momentum, j);
        }
    }

    /// The network with every pending step applied.
    pub fn materialized(&self, momentum: &DenseMomentum) -> DenseNet {
        let (mut net, mut momentum) = (self.clone(), momentum.clone());
        net.materialize(&mut momentum);
        net
    }

    /// Gradient of `upstream . hidden` with respect to the pre-activations.
    /// The rectifier's subgradient at exactly zero is zero.
    pub fn pre_activation_grad(act: &Activations, upstream: &[f64]) -> Vec<f64> {
        act.pre
            .iter()
            .zip(upstream)
            .map(|(&p, &u)| if p > 0.0 { u } else { 0.0 })
            .collect()
    }

    /// Exact gradients of `upstream . forward(x)` with respect to weights,
    /// bias and input.
    pub fn backward(&self, x: &[f64], act: &Activations, upstream: &[f64]) -> DenseGrads {
        assert_eq!(upstream.len(), self.hidden_dim, "upstream dimension");
        let delta = Self::pre_activation_grad(act, upstream);
        let mut weights = vec![0.0; self.weights.len()];
        let mut input = vec![0.0; self.input_dim];
        for (j, &xj) in x.iter().enumerate() {
            let col = self.column(j);
            input[j] = col.iter().zip(&delta).map(|(w, d)| w * d).sum();
            if xj != 0.0 {
                for (g, &d) in weights[j * self.hidden_dim..(j + 1) * self.hidden_dim]
                    .iter_mut()
                    .zip(&delta)
                {
                    *g = d * xj;
                }
            }
        }
        DenseGrads { weights, bias: delta, input }
    }

    /// Backward pass fused with `co_opt` on weights and bias, for a given
    /// pre-activation gradient `delta`. Columns with a nonzero input are
    /// caught up and stepped; the others only count a pending step. With
    /// every input nonzero this is bit-identical to `backward` followed by
    /// `co_opt` on each tensor. `alpha` and `nu` must not change between
    /// calls while steps are pending.
    pub fn co_opt_step(
        &mut self,
        x: &[f64],
        delta: &[f64],
        momentum: &mut DenseMomentum,
        alpha: f64,
        nu: f64,
    ) {
        assert_eq!(x.len(), self.input_dim);
        assert_eq!(delta.len(), self.hidden_dim);
        let step = UPDATE_SIGN * alpha;
        let fresh = 1.0 - nu;
        let h = self.hidden_dim;
        momentum.rate = (step, nu);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                momentum.pending[j] = momentum.pending[j].saturating_add(1);
                continue;
            }
            self.catch_up(momentum, j);
            let w = &mut self.weights[j * h..(j + 1) * h];
            let v = &mut momentum.weights.velocity[j * h..(j + 1) * h];
            for ((w, v), &d) in w.iter_mut().zip(v.iter_mut()).zip(delta) {
                *v = nu * *v + fresh * (d * xj);
                *w += step * *v;
            }
        }
        co_opt(&mut self.bias, alpha, delta, &mut momentum.bias, nu);
    }

    /// Redraws the weights fed by input `pos` and zeroes their velocity.
    pub fn reinit_input_column<R: Rng + ?Sized>(
        &mut self,
        momentum: &mut DenseMomentum,
        pos: usize,
        rng: &mut R,
    ) -> Result<(), NetError> {
        if pos >= self.input_dim {
            return Err(NetError::InputOutOfRange { index: pos, input_dim: self.input_dim });
        }
        let bound = init_bound(self.input_dim);
        let h = self.hidden_dim;
        for w in &mut self.weights[pos * h..(pos + 1) * h] {
            *w = rng.gen_range(-bound..=bound);
        }
        momentum.weights.velocity[pos * h..(pos + 1) * h].fill(0.0);
        momentum.pending[pos] = 0;
        Ok(())
    }

    /// Snapshot layout, all little-endian: `u64 input_dim`, `u64 hidden_dim`,
    /// then `weights` as `f64` in row-major `hidden x input` order
    /// (`W[unit][input]`), then `bias` as `f64`.
    pub fn write_snapshot<W: Write>(&self, out: &mut W) -> io::Result<()> {
        out.write_all(&(self.input_dim as u64).to_le_bytes())?;
        out.write_all(&(self.hidden_dim as u64).to_le_bytes())?;
        for unit in 0..self.hidden_dim {
            for input in 0..self.input_dim {
                out.write_all(&self.weight(unit, input).to_le_bytes())?;
            }
        }
        for b in &self.bias {
            out.write_all(&b.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(input: &mut R) -> Result<Self, NetError> {
        let input_dim = read_u64(input)? as usize;
        let hidden_dim = read_u64(input)? as usize;
        if input_dim == 0 || hidden_dim == 0 {
            return Err(NetError::SnapshotShape {
                expected: "positive dimensions".into(),
                found: format!("{hidden_dim}x{input_dim}"),
            });
        }
        let mut weights = vec![0.0; input_dim * hidden_dim];
        for unit in 0..hidden_dim {
            for j in 0..input_dim {
                weights[j * hidden_dim + unit] = read_f64(input)?;
            }
        }
        let bias = (0..hidden_dim).map(|_| read_f64(input)).collect::<Result<_, _>>()?;
        Ok(DenseNet { input_dim, hidden_dim, weights, bias })
    }
}

/// A named, row-major weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { name: name.into(), shape, data }
    }
}

impl DenseNet {
    /// `[weight, bias]` with the weight as row-major `hidden x input`.
    pub fn tensors(&self, prefix: &str) -> [Tensor; 2] {
        let mut w = Vec::with_capacity(self.weights.len());
        for unit in 0..self.hidden_dim {
            w.extend((0..self.input_dim).map(|j| self.weight(unit, j)));
        }
        [
            Tensor::new(format!("{prefix}.weight"), vec![self.hidden_dim, self.input_dim], w),
            Tensor::new(format!("{prefix}.bias"), vec![self.hidden_dim], self.bias.clone()),
        ]
    }
}

pub const TENSOR_MAGIC: &[u8; 4] = b"NBLW";
pub const TENSOR_VERSION: u32 = 1;

/// Flat weight file, all little-endian: magic `NBLW`, `u32` version, `u64`
/// tensor count, then per tensor `u64` name length, UTF-8 name, `u64` rank,
/// `u64` dims, and the `f64` values in row-major order.
pub fn write_tensors<W: Write>(tensors: &[Tensor], out: &mut W) -> io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.name.len() as u64).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&(t.shape.len() as u64).to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<Tensor>, NetError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    let mut version = [0u8; 4];
    input.read_exact(&mut version)?;
    if &magic != TENSOR_MAGIC || u32::from_le_bytes(version) != TENSOR_VERSION {
        return Err(NetError::SnapshotShape {
            expected: format!("NBLW v{TENSOR_VERSION}"),
            found: format!("{:?} v{}", String::from_utf8_lossy(&magic), u32::from_le_bytes(version)),
        });
    }
    let count = read_u64(input)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u64(input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NetError::SnapshotShape {
            expected: "UTF-8 tensor name".into(),
            found: e.to_string(),
        })?;
        let rank = read_u64(input)? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| read_u64(input).map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| read_f64(input)).collect::<Result<_, _>>()?;
        tensors.push(Tensor { name, shape, data });
    }
    Ok(tensors)
}

fn read_u64<R: Read>(input: &mut R) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(input: &mut R) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::from_parts(3, 4, vec![0.0; 12], vec![0.0; 4]);
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]), vec![0.0; 4]);
    }

    #[test]
    fn identity_net_rectifies() {
        let net = DenseNet::from_parts(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]);
        assert_eq!(net.forward(&[1.0, -1.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn scalar_chain_rule() {
        let net = DenseNet::from_parts(1, 1, vec![2.0], vec![0.0]);
        let act = net.forward_activations(&[3.0]);
        let g = net.backward(&[3.0], &act, &[1.0]);
        assert_eq!(g.weights, vec![3.0]);
        assert_eq!(g.bias, vec![1.0]);
        assert_eq!(g.input, vec![2.0]);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let (net, _) = init_dense(4, 6, &mut rng(1));
        let x = [1.0, 0.0, -0.5, 2.0];
        let act = net.forward_activations(&x);
        let g = net.backward(&x, &act, &[0.0; 6]);
        assert!(g.weights.iter().chain(&g.bias).chain(&g.input).all(|&v| v == 0.0));
    }

    #[test]
    fn co_opt_plain_sgd_when_nu_zero() {
        let mut w = [1.0];
        let mut s = MomentumState::zeros(1);
        co_opt(&mut w, 0.1, &[2.0], &mut s, 0.0);
        assert_eq!(s.velocity, vec![2.0]);
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn co_opt_zero_grad_zero_velocity_is_identity() {
        let mut w = [0.3, -1.2];
        let mut s = MomentumState::zeros(2);
        co_opt(&mut w, 0.5, &[0.0, 0.0], &mut s, 0.9);
        assert_eq!(w, [0.3, -1.2]);
    }

    #[test]
    fn co_opt_velocity_decays() {
        let mut w = [1.0];
        let mut s = MomentumState { velocity: vec![1.0] };
        co_opt(&mut w, 0.1, &[0.0], &mut s, 0.99);
        assert_eq!(s.velocity, vec![0.99]);
        assert!((w[0] - (1.0 - 0.99 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn init_bounds_and_determinism() {
        let (a, ma) = init_dense(82, 16, &mut rng(4));
        let (b, _) = init_dense(82, 16, &mut rng(4));
        assert_eq!(a, b);
        let bound = 1.0 / 82f64.sqrt();
        assert!(a.weights().iter().all(|w| w.abs() <= bound));
        assert!(a.bias().iter().all(|&b| b == 0.0));
        assert!(ma.weights.velocity.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reinit_column_is_local() {
        let mut r = rng(5);
        let (mut net, mut mom) = init_dense(5, 7, &mut r);
        mom.weights.velocity.iter_mut().for_each(|v| *v = 0.5);
        let before = net.clone();
        let x = [0.3, 1.0, 0.0, -0.7, 1.0];
        let out_before = net.forward(&x);
        net.reinit_input_column(&mut mom, 2, &mut r).unwrap();
        assert_eq!(net.forward(&x), out_before);
        assert!(mom.weights.velocity[14..21].iter().all(|&v| v == 0.0));
        for j in [0, 1, 3, 4] {
            assert_eq!(net.column(j), before.column(j));
            assert!(mom.weights.velocity[j * 7..(j + 1) * 7].iter().all(|&v| v == 0.5));
        }
        assert_ne!(net.column(2), before.column(2));
        assert!(net.reinit_input_column(&mut mom, 5, &mut r).is_err());
    }

    #[test]
    fn fused_step_matches_backward_then_co_opt() {
        let mut r = rng(6);
        let (net, mut mom) = init_dense(6, 9, &mut r);
        mom.weights.velocity.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin());
        let upstream: Vec<f64> = (0..9).map(|k| (k as f64 * 0.37).cos()).collect();
        for x in [[1.0, 0.5, -2.0, 1.0, 3.0, 1.0], [1.0, 0.0, 0.0, 1.0, 0.0, 1.0]] {
            let act = net.forward_activations(&x);
            let mut a = net.clone();
            let mut ma = mom.clone();
            let g = a.backward(&x, &act, &upstream);
            co_opt(&mut a.weights, 0.01, &g.weights, &mut ma.weights, 0.9);
            co_opt(&mut a.bias, 0.01, &g.bias, &mut ma.bias, 0.9);

            let mut b = net.clone();
            let mut mb = mom.clone();
            let delta = DenseNet::pre_activation_grad(&act, &upstream);
            b.co_opt_step(&x, &delta, &mut mb, 0.01, 0.9);
            if x.iter().all(|&v| v != 0.0) {
                // No idle columns: bit-identical.
                assert_eq!(a, b);
                assert_eq!(ma.weights, mb.weights);
            } else {
                b.materialize(&mut mb);
                for (p, q) in a.weights.iter().zip(&b.weights) {
                    assert!((p - q).abs() <= 1e-16, "{p} vs {q}");
                }
                for (p, q) in ma.weights.velocity.iter().zip(&mb.weights.velocity) {
                    assert!((p - q).abs() <= 1e-15, "{p} vs {q}");
                }
                assert_eq!(a.bias, b.bias);
            }
        }
    }

    #[test]
    fn snapshot_round_trip_and_layout() {
        let net = DenseNet::from_parts(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]);
        let mut buf = Vec::new();
        net.write_snapshot(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 9 * 8);
        // Row-major hidden x input: W[0][0], W[0][1], W[1][0], ...
        let first: Vec<f64> = buf[16..16 + 6 * 8]
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(first, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = DenseNet::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
    }

    /// Central finite differences of `upstream . forward(x)`.
    fn numeric_grads(net: &DenseNet, x: &[f64], upstream: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let objective = |n: &DenseNet, x: &[f64]| -> f64 {
            n.forward(x).iter().zip(upstream).map(|(h, u)| h * u).sum()
        };
        let mut gw = vec![0.0; net.weights.len()];
        for i in 0..gw.len() {
            let mut p = net.clone();
            p.weights[i] += eps;
            let mut m = net.clone();
            m.weights[i] -= eps;
            gw[i] = (objective(&p, x) - objective(&m, x)) / (2.0 * eps);
        }
        let mut gb = vec![0.0; net.bias.len()];
        for i in 0..gb.len() {
            let mut p = net.clone();
            p.bias[i] += eps;
            let mut m = net.clone();
            m.bias[i] -= eps;
            gb[i] = (objective(&p, x) - objective(&m, x)) / (2.0 * eps);
        }
        let mut gx = vec![0.0; x.len()];
        for i in 0..gx.len() {
            let mut xp = x.to_vec();
            xp[i] += eps;
            let mut xm = x.to_vec();
            xm[i] -= eps;
            gx[i] = (objective(net, &xp) - objective(net, &xm)) / (2.0 * eps);
        }
        (gw, gb, gx)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(7);
        let mut checked = 0;
        while checked < 100 {
            let input_dim = r.gen_range(1..6);
            let hidden_dim = r.gen_range(1..6);
            let (mut net, _) = init_dense(input_dim, hidden_dim, &mut r);
            net.bias.iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
            let x: Vec<f64> = (0..input_dim).map(|_| r.gen_range(-2.0..2.0)).collect();
            let upstream: Vec<f64> = (0..hidden_dim).map(|_| r.gen_range(-1.0..1.0)).collect();
            let act = net.forward_activations(&x);
            // Stay away from rectifier kinks.
            if act.pre.iter().any(|p| p.abs() < 1e-3) {
                continue;
            }
            let g = net.backward(&x, &act, &upstream);
            let (gw, gb, gx) = numeric_grads(&net, &x, &upstream, 1e-5);
            assert!(rel_err(&g.weights, &gw) < 1e-6);
            assert!(rel_err(&g.bias, &gb) < 1e-6);
            assert!(rel_err(&g.input, &gx) < 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn lazy_decay_matches_eager_momentum() {
        let mut r = rng(11);
        let (input, hidden, alpha, nu) = (12, 5, 0.05, 0.9);
        let (mut lazy, mut lazy_m) = init_dense(input, hidden, &mut r);
        let (mut eager, mut eager_m) = (lazy.clone(), lazy_m.clone());
        for step in 0..400 {
            // Sparse binary inputs leave most columns idle for many steps.
            let x: Vec<f64> = (0..input).map(|_| if r.gen_bool(0.15) { 1.0 } else { 0.0 }).collect();
            let delta: Vec<f64> = (0..hidden).map(|_| r.gen_range(-1.0..1.0)).collect();
            let mut act = Activations::default();
            lazy.forward_lazy_into(&x, &lazy_m, &mut act);
            let expected = eager.forward(&x);
            for (a, b) in act.hidden.iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-12, "step {step}: {a} vs {b}");
            }
            assert_eq!(act.hidden, lazy.materialized(&lazy_m).forward(&x));
            lazy.co_opt_step(&x, &delta, &mut lazy_m, alpha, nu);
            let mut grad = vec![0.0; input * hidden];
            for (j, &xj) in x.iter().enumerate() {
                for u in 0..hidden {
                    grad[j * hidden + u] = delta[u] * xj;
                }
            }
            co_opt(&mut eager.weights, alpha, &grad, &mut eager_m.weights, nu);
            co_opt(&mut eager.bias, alpha, &delta, &mut eager_m.bias, nu);
        }
        assert!(lazy_m.pending.iter().any(|&k| k > 10));
        lazy.materialize(&mut lazy_m);
        assert!(lazy_m.pending.iter().all(|&k| k == 0));
        for (a, b) in lazy.weights.iter().zip(&eager.weights) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        for (a, b) in lazy_m.weights.velocity.iter().zip(&eager_m.weights.velocity) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        assert_eq!(lazy.bias, eager.bias);
    }

    #[test]
    fn tensor_file_round_trip() {
        let mut r = rng(9);
        let (net, _) = init_dense(3, 2, &mut r);
        let mut tensors: Vec<Tensor> = net.tensors("net").into();
        tensors.push(Tensor::new("v", vec![2], vec![0.5, -f64::MIN_POSITIVE]));
        let mut buf = Vec::new();
        write_tensors(&tensors, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"NBLW");
        assert_eq!(read_tensors(&mut buf.as_slice()).unwrap(), tensors);
        // Weight tensor is hidden x input.
        assert_eq!(tensors[0].shape, vec![2, 3]);
        assert_eq!(tensors[0].data[1], net.weight(0, 1));
        buf[0] = b'X';
        assert!(read_tensors(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn co_opt_with_zero_momentum_is_sgd(
            w in prop::collection::vec(-10.0f64..10.0, 1..20),
            alpha in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let mut r = rng(seed);
            let grad: Vec<f64> = w.iter().map(|_| r.gen_range(-5.0..5.0)).collect();
            let mut updated = w.clone();
            let mut state = MomentumState::zeros(w.len());
            co_opt(&mut updated, alpha, &grad, &mut state, 0.0);
            for i in 0..w.len() {
                prop_assert_eq!(updated[i], w[i] - alpha * grad[i]);
            }
        }
    }
}
