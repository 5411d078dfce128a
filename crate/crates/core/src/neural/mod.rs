//! Compact feed-forward surrogates of the controller.
//!
//! Two architectures share one parameter layout: a plain MLP (stack of ReLU
//! layers) and a residual network (affine lift, residual blocks of two ReLU
//! layers each, affine head). Both start with fixed input normalization
//! `(x − μ)/(√σ + ε)` whose statistics are frozen from the training data.
//! Training runs in f64 with exact reverse-mode gradients; deployment weights
//! are serialized at f32 (see [`save_weights`] for the byte layout).
//!
//! Everything here is piecewise affine in the input: compositions of affine
//! maps and `max{0,·}`. That matters downstream — the controller being
//! imitated is itself piecewise affine, so representation error, not model
//! class, is the limiting factor.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataPair, STATE_DIM};
use crate::{Error, Real, Result};

/// Magic bytes opening a serialized weights file.
pub const WEIGHTS_MAGIC: &[u8; 4] = b"NNW1";
/// Weights format version.
pub const WEIGHTS_VERSION: u32 = 1;
/// Fixed header length in bytes (magic through normalization epsilon).
pub const WEIGHTS_HEADER_LEN: usize = 40;

/// Columns per gradient slab. Each slab's contribution is summed in slab
/// order regardless of how many workers computed them, so gradients are
/// bitwise reproducible across thread counts.
const GRAD_CHUNK: usize = 128;

/// Architecture family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Mlp,
    ResNet,
}

/// Residual-block shortcut flavor.
///
/// `Affine` (the default) gives each block a trainable `S·y + b_s` bypass,
/// initialized to the identity; `Identity` is a plain `y` bypass. The affine
/// flavor is what the deployment size/operation accounting assumes: three
/// matrix products per block instead of two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortcutKind {
    Identity,
    Affine,
}

/// Architecture description. `n_blocks` counts residual blocks for
/// [`NetKind::ResNet`] and hidden ReLU layers for [`NetKind::Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub kind: NetKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_blocks: usize,
    pub width: usize,
    pub shortcut: ShortcutKind,
    /// Normalization denominator offset ε in `(x − μ)/(√σ + ε)`.
    pub epsilon: f64,
}

impl NetSpec {
    /// Residual network over the 8-dimensional controller state.
    pub fn resnet(n_blocks: usize, width: usize) -> Self {
        NetSpec {
            kind: NetKind::ResNet,
            input_dim: STATE_DIM,
            output_dim: 1,
            n_blocks,
            width,
            shortcut: ShortcutKind::Affine,
            epsilon: 1e-8,
        }
    }

    /// Plain MLP over the 8-dimensional controller state.
    pub fn mlp(n_layers: usize, width: usize) -> Self {
        NetSpec {
            kind: NetKind::Mlp,
            input_dim: STATE_DIM,
            output_dim: 1,
            n_blocks: n_layers,
            width,
            shortcut: ShortcutKind::Identity,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.input_dim == 0 {
            return Err(Error::InvalidParams(
                "network width and input dimension must be at least 1".into(),
            ));
        }
        if self.output_dim != 1 {
            return Err(Error::InvalidParams(
                "only scalar-output networks are supported".into(),
            ));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidParams(
                "normalization epsilon must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// (rows, cols) of every affine map in forward order. This is the single
    /// source of truth shared by initialization, flattening, the weights
    /// file, and the operation count.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        match self.kind {
            NetKind::Mlp => {
                let mut prev = self.input_dim;
                for _ in 0..self.n_blocks {
                    dims.push((self.width, prev));
                    prev = self.width;
                }
                dims.push((self.output_dim, prev));
            }
            NetKind::ResNet => {
                dims.push((self.width, self.input_dim));
                for _ in 0..self.n_blocks {
                    dims.push((self.width, self.width));
                    dims.push((self.width, self.width));
                    if self.shortcut == ShortcutKind::Affine {
                        dims.push((self.width, self.width));
                    }
                }
                dims.push((self.output_dim, self.width));
            }
        }
        dims
    }
}

/// One affine map `W·y + b`.
#[derive(Clone, Debug)]
pub struct Affine<T: Real> {
    pub w: DMatrix<T>,
    pub b: DVector<T>,
}

impl<T: Real> Affine<T> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Affine {
            w: DMatrix::zeros(rows, cols),
            b: DVector::zeros(rows),
        }
    }

    fn apply(&self, y: &DVector<T>) -> DVector<T> {
        &self.w * y + &self.b
    }
}

impl Affine<f64> {
    fn apply_cols(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * y;
        for mut c in z.column_iter_mut() {
            c += &self.b;
        }
        z
    }
}

/// One residual block: `y⁺ = shortcut(y) + relu(A₂·relu(A₁·y + b₁) + b₂)`.
/// `shortcut` is `None` for the identity bypass.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Real> {
    pub a1: Affine<T>,
    pub a2: Affine<T>,
    pub shortcut: Option<Affine<T>>,
}

/// Layer stack between normalization and the affine head.
#[derive(Clone, Debug)]
pub enum Body<T: Real> {
    Mlp(Vec<Affine<T>>),
    ResNet { lift: Affine<T>, blocks: Vec<ResBlock<T>> },
}

/// Input normalization `(x − μ)/(√σ + ε)`; σ holds per-coordinate variances.
#[derive(Clone, Debug)]
pub struct Normalization<T: Real> {
    pub mu: DVector<T>,
    pub sigma: DVector<T>,
    pub epsilon: T,
}

impl<T: Real> Normalization<T> {
    /// Pass-through normalization (μ=0, σ=1).
    pub fn identity(dim: usize, epsilon: T) -> Self {
        Normalization {
            mu: DVector::zeros(dim),
            sigma: DVector::from_element(dim, T::one()),
            epsilon,
        }
    }

    fn apply(&self, x: &[T]) -> DVector<T> {
        DVector::from_fn(self.mu.len(), |i, _| {
            (x[i] - self.mu[i]) / (self.sigma[i].sqrt() + self.epsilon)
        })
    }

    fn validate(&self) -> Result<()> {
        if self.mu.len() != self.sigma.len() {
            return Err(Error::Dimension(
                "normalization μ and σ lengths differ".into(),
            ));
        }
        if self.sigma.iter().any(|s| *s <= T::zero()) {
            return Err(Error::InvalidParams(
                "normalization variances must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Normalization<f64> {
    /// Mean and (sample) variance of the selected records, clamped away from
    /// zero so constant coordinates normalize to exactly zero instead of
    /// blowing up.
    fn from_records(data: &[DataPair], idx: &[u32], epsilon: f64) -> Self {
        let n = idx.len().max(1) as f64;
        let mut mu = DVector::zeros(STATE_DIM);
        for &i in idx {
            for (k, v) in data[i as usize].x.iter().enumerate() {
                mu[k] += v;
            }
        }
        mu /= n;
        let mut var = DVector::zeros(STATE_DIM);
        for &i in idx {
            for (k, v) in data[i as usize].x.iter().enumerate() {
                let d = v - mu[k];
                var[k] += d * d;
            }
        }
        let denom = if idx.len() > 1 { (idx.len() - 1) as f64 } else { 1.0 };
        var /= denom;
        for v in var.iter_mut() {
            *v = v.max(1e-12);
        }
        Normalization { mu, sigma: var, epsilon }
    }
}

/// Complete network: spec, frozen normalization, and all affine layers.
#[derive(Clone, Debug)]
pub struct NetParams<T: Real> {
    pub spec: NetSpec,
    pub norm: Normalization<T>,
    pub body: Body<T>,
    pub head: Affine<T>,
}

/// He-uniform initialization: `U(±√(6/fan_in))` on every ReLU-feeding map,
/// zero biases, identity-initialized affine shortcuts. Deterministic in the
/// seed (layers filled in forward order, row-major).
pub fn init(spec: &NetSpec, seed: u64) -> Result<NetParams<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |rows: usize, cols: usize| -> Affine<f64> {
        let bound = (6.0 / cols as f64).sqrt();
        let mut a = Affine::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                a.w[(i, j)] = rng.random_range(-bound..bound);
            }
        }
        a
    };
    let body = match spec.kind {
        NetKind::Mlp => {
            let mut prev = spec.input_dim;
            let mut hidden = Vec::with_capacity(spec.n_blocks);
            for _ in 0..spec.n_blocks {
                hidden.push(he(spec.width, prev));
                prev = spec.width;
            }
            Body::Mlp(hidden)
        }
        NetKind::ResNet => {
            let lift = he(spec.width, spec.input_dim);
            let mut blocks = Vec::with_capacity(spec.n_blocks);
            for _ in 0..spec.n_blocks {
                let a1 = he(spec.width, spec.width);
                let a2 = he(spec.width, spec.width);
                let shortcut = match spec.shortcut {
                    ShortcutKind::Identity => None,
                    ShortcutKind::Affine => {
                        let mut s = Affine::zeros(spec.width, spec.width);
                        s.w.fill_with_identity();
                        Some(s)
                    }
                };
                blocks.push(ResBlock { a1, a2, shortcut });
            }
            Body::ResNet { lift, blocks }
        }
    };
    let prev = match spec.kind {
        NetKind::Mlp if spec.n_blocks == 0 => spec.input_dim,
        _ => spec.width,
    };
    let head = he(spec.output_dim, prev);
    Ok(NetParams {
        spec: spec.clone(),
        norm: Normalization::identity(spec.input_dim, spec.epsilon),
        body,
        head,
    })
}

fn relu<T: Real>(v: DVector<T>) -> DVector<T> {
    v.map(|x| if x > T::zero() { x } else { T::zero() })
}

impl<T: Real> NetParams<T> {
    /// Affine maps in canonical forward order (the same order used by
    /// initialization, flattening, and the weights file).
    pub fn layers(&self) -> Vec<&Affine<T>> {
        let mut out = Vec::new();
        match &self.body {
            Body::Mlp(hidden) => out.extend(hidden.iter()),
            Body::ResNet { lift, blocks } => {
                out.push(lift);
                for b in blocks {
                    out.push(&b.a1);
                    out.push(&b.a2);
                    if let Some(s) = &b.shortcut {
                        out.push(s);
                    }
                }
            }
        }
        out.push(&self.head);
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Affine<T>> {
        let mut out = Vec::new();
        match &mut self.body {
            Body::Mlp(hidden) => out.extend(hidden.iter_mut()),
            Body::ResNet { lift, blocks } => {
                out.push(lift);
                for b in blocks {
                    out.push(&mut b.a1);
                    out.push(&mut b.a2);
                    if let Some(s) = &mut b.shortcut {
                        out.push(s);
                    }
                }
            }
        }
        out.push(&mut self.head);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.norm.validate()?;
        if self.norm.mu.len() != self.spec.input_dim {
            return Err(Error::Dimension(
                "normalization length does not match input dimension".into(),
            ));
        }
        let expect = self.spec.layer_dims();
        let got = self.layers();
        if expect.len() != got.len() {
            return Err(Error::Dimension(format!(
                "layer count {} does not match spec ({})",
                got.len(),
                expect.len()
            )));
        }
        for (k, ((r, c), a)) in expect.iter().zip(&got).enumerate() {
            if a.w.nrows() != *r || a.w.ncols() != *c || a.b.len() != *r {
                return Err(Error::Dimension(format!(
                    "layer {k}: expected {r}x{c}, found {}x{}",
                    a.w.nrows(),
                    a.w.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[T]) -> Result<T> {
        if x.len() != self.spec.input_dim {
            return Err(Error::Dimension(format!(
                "input length {} does not match network input dimension {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let mut y = self.norm.apply(x);
        match &self.body {
            Body::Mlp(hidden) => {
                for a in hidden {
                    y = relu(a.apply(&y));
                }
            }
            Body::ResNet { lift, blocks } => {
                y = lift.apply(&y);
                for blk in blocks {
                    let r2 = relu(blk.a2.apply(&relu(blk.a1.apply(&y))));
                    y = match &blk.shortcut {
                        Some(s) => s.apply(&y) + r2,
                        None => y + r2,
                    };
                }
            }
        }
        Ok(self.head.apply(&y)[0])
    }

    /// Sign pattern of every ReLU pre-activation; two inputs with equal
    /// patterns lie in the same affine region of the network.
    #[cfg(test)]
    pub(crate) fn activation_pattern(&self, x: &[T]) -> Vec<bool> {
        let mut pattern = Vec::new();
        let mut y = self.norm.apply(x);
        match &self.body {
            Body::Mlp(hidden) => {
                for a in hidden {
                    let z = a.apply(&y);
                    pattern.extend(z.iter().map(|v| *v > T::zero()));
                    y = relu(z);
                }
            }
            Body::ResNet { lift, blocks } => {
                y = lift.apply(&y);
                for blk in blocks {
                    let z1 = blk.a1.apply(&y);
                    pattern.extend(z1.iter().map(|v| *v > T::zero()));
                    let z2 = blk.a2.apply(&relu(z1));
                    pattern.extend(z2.iter().map(|v| *v > T::zero()));
                    let r2 = relu(z2);
                    y = match &blk.shortcut {
                        Some(s) => s.apply(&y) + r2,
                        None => y + r2,
                    };
                }
            }
        }
        pattern
    }

    /// Total scalar parameter count (weights + biases).
    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|a| a.w.len() + a.b.len())
            .sum()
    }

    /// All parameters as one vector, canonical layer order, each layer's
    /// weight matrix in column-major storage order followed by its bias.
    pub fn flatten(&self) -> DVector<T> {
        let mut v = Vec::with_capacity(self.param_count());
        for a in self.layers() {
            v.extend_from_slice(a.w.as_slice());
            v.extend_from_slice(a.b.as_slice());
        }
        DVector::from_vec(v)
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, theta: &DVector<T>) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "parameter vector length {} does not match network ({})",
                theta.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for a in self.layers_mut() {
            let nw = a.w.len();
            a.w.as_mut_slice().copy_from_slice(&theta.as_slice()[off..off + nw]);
            off += nw;
            let nb = a.b.len();
            a.b.as_mut_slice().copy_from_slice(&theta.as_slice()[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Deployment size and operation accounting.
    pub fn footprint(&self) -> Footprint {
        let count = self.param_count();
        // One layer resident at a time: its f32 weights and bias, plus the
        // input and output activation buffers it reads and writes.
        let peak = self
            .layers()
            .iter()
            .map(|a| 4 * (a.w.len() + a.b.len() + a.w.ncols() + a.w.nrows()))
            .max()
            .unwrap_or(0);
        Footprint {
            param_count: count,
            param_bytes: 4 * count,
            peak_ram_bytes: peak,
            matmul_count: self.layers().len(),
        }
    }
}

impl NetParams<f64> {
    /// Batched forward pass; one output per input record.
    pub fn forward_batch(&self, data: &[DataPair]) -> Vec<f64> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(4 * GRAD_CHUNK) {
            let y0 = self.normalize_cols(chunk);
            let y = self.body_cols(y0).0;
            let z = self.head.apply_cols(&y);
            out.extend(z.row(0).iter().copied());
        }
        out
    }

    /// Quantize to deployment precision.
    pub fn to_f32(&self) -> NetParams<f32> {
        NetParams {
            spec: self.spec.clone(),
            norm: Normalization {
                mu: self.norm.mu.map(|v| v as f32),
                sigma: self.norm.sigma.map(|v| v as f32),
                epsilon: self.norm.epsilon as f32,
            },
            body: match &self.body {
                Body::Mlp(h) => Body::Mlp(h.iter().map(affine_to_f32).collect()),
                Body::ResNet { lift, blocks } => Body::ResNet {
                    lift: affine_to_f32(lift),
                    blocks: blocks
                        .iter()
                        .map(|b| ResBlock {
                            a1: affine_to_f32(&b.a1),
                            a2: affine_to_f32(&b.a2),
                            shortcut: b.shortcut.as_ref().map(affine_to_f32),
                        })
                        .collect(),
                },
            },
            head: affine_to_f32(&self.head),
        }
    }

    fn normalize_cols(&self, data: &[DataPair]) -> DMatrix<f64> {
        let dim = self.spec.input_dim;
        DMatrix::from_fn(dim, data.len(), |i, j| {
            (data[j].x[i] - self.norm.mu[i]) / (self.norm.sigma[i].sqrt() + self.norm.epsilon)
        })
    }

    /// Batched body evaluation, returning the pre-head activations plus the
    /// intermediate values reverse mode needs.
    fn body_cols(&self, y0: DMatrix<f64>) -> (DMatrix<f64>, BodyTrace) {
        match &self.body {
            Body::Mlp(hidden) => {
                let mut ys = vec![y0];
                let mut zs = Vec::with_capacity(hidden.len());
                for a in hidden {
                    let z = a.apply_cols(ys.last().unwrap());
                    ys.push(z.map(|v| v.max(0.0)));
                    zs.push(z);
                }
                (ys.last().unwrap().clone(), BodyTrace::Mlp { ys, zs })
            }
            Body::ResNet { lift, blocks } => {
                let mut y = lift.apply_cols(&y0);
                let mut traces = Vec::with_capacity(blocks.len());
                for blk in blocks {
                    let z1 = blk.a1.apply_cols(&y);
                    let r1 = z1.map(|v| v.max(0.0));
                    let z2 = blk.a2.apply_cols(&r1);
                    let r2 = z2.map(|v| v.max(0.0));
                    let next = match &blk.shortcut {
                        Some(s) => s.apply_cols(&y) + &r2,
                        None => &y + &r2,
                    };
                    traces.push(BlockTrace { y_in: y, z1, r1, z2 });
                    y = next;
                }
                (y.clone(), BodyTrace::ResNet { y0, traces })
            }
        }
    }
}

fn affine_to_f32(a: &Affine<f64>) -> Affine<f32> {
    Affine {
        w: a.w.map(|v| v as f32),
        b: a.b.map(|v| v as f32),
    }
}

impl NetParams<f32> {
    /// Exact widening back to f64 (every f32 is representable).
    pub fn to_f64(&self) -> NetParams<f64> {
        NetParams {
            spec: self.spec.clone(),
            norm: Normalization {
                mu: self.norm.mu.map(f64::from),
                sigma: self.norm.sigma.map(f64::from),
                epsilon: f64::from(self.norm.epsilon),
            },
            body: match &self.body {
                Body::Mlp(h) => Body::Mlp(h.iter().map(affine_to_f64).collect()),
                Body::ResNet { lift, blocks } => Body::ResNet {
                    lift: affine_to_f64(lift),
                    blocks: blocks
                        .iter()
                        .map(|b| ResBlock {
                            a1: affine_to_f64(&b.a1),
                            a2: affine_to_f64(&b.a2),
                            shortcut: b.shortcut.as_ref().map(affine_to_f64),
                        })
                        .collect(),
                },
            },
            head: affine_to_f64(&self.head),
        }
    }
}

fn affine_to_f64(a: &Affine<f32>) -> Affine<f64> {
    Affine {
        w: a.w.map(f64::from),
        b: a.b.map(f64::from),
    }
}

struct BlockTrace {
    y_in: DMatrix<f64>,
    z1: DMatrix<f64>,
    r1: DMatrix<f64>,
    z2: DMatrix<f64>,
}

enum BodyTrace {
    Mlp {
        ys: Vec<DMatrix<f64>>,
        zs: Vec<DMatrix<f64>>,
    },
    ResNet {
        y0: DMatrix<f64>,
        traces: Vec<BlockTrace>,
    },
}

/// Deployment accounting at 4-byte weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub param_count: usize,
    pub param_bytes: usize,
    /// Largest single layer (weights + bias + its activation buffers), the
    /// working set of a one-layer-at-a-time embedded evaluator.
    pub peak_ram_bytes: usize,
    /// Number of affine maps in one forward pass.
    pub matmul_count: usize,
}

/// Mean-squared-error loss and its exact gradient over a batch, flattened in
/// canonical parameter order. ReLU's subgradient at exactly 0 is taken as 0.
pub fn gradient(params: &NetParams<f64>, batch: &[DataPair]) -> Result<(DVector<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = batch.len() as f64;
    let slabs: Vec<(DVector<f64>, f64)> = if batch.len() > GRAD_CHUNK {
        batch
            .par_chunks(GRAD_CHUNK)
            .map(|slab| slab_gradient(params, slab))
            .collect()
    } else {
        vec![slab_gradient(params, batch)]
    };
    let mut g = DVector::zeros(params.param_count());
    let mut sse = 0.0;
    for (sg, s) in &slabs {
        g += sg;
        sse += s;
    }
    g *= 2.0 / n;
    Ok((g, sse / n))
}

/// Unnormalized gradient contribution of one slab: ∑ residual·∂ũ/∂θ and the
/// slab's sum of squared residuals.
fn slab_gradient(params: &NetParams<f64>, slab: &[DataPair]) -> (DVector<f64>, f64) {
    let y0 = params.normalize_cols(slab);
    let (y_last, trace) = params.body_cols(y0);
    let out = params.head.apply_cols(&y_last);
    let mut g_out = out.clone();
    for (j, p) in slab.iter().enumerate() {
        g_out[(0, j)] -= p.u;
    }
    let sse = g_out.iter().map(|r| r * r).sum();

    let d_head_w = &g_out * y_last.transpose();
    let d_head_b = g_out.column_sum();
    let mut gy = params.head.w.transpose() * &g_out;

    let mut grads_rev: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
    match (&params.body, trace) {
        (Body::Mlp(hidden), BodyTrace::Mlp { ys, zs }) => {
            for (k, a) in hidden.iter().enumerate().rev() {
                let dz = gy.zip_map(&zs[k], |g, z| if z > 0.0 { g } else { 0.0 });
                grads_rev.push((&dz * ys[k].transpose(), dz.column_sum()));
                gy = a.w.transpose() * dz;
            }
        }
        (Body::ResNet { lift, blocks }, BodyTrace::ResNet { y0, traces, .. }) => {
            for (blk, t) in blocks.iter().zip(&traces).rev() {
                let dz2 = gy.zip_map(&t.z2, |g, z| if z > 0.0 { g } else { 0.0 });
                let d_a2 = (&dz2 * t.r1.transpose(), dz2.column_sum());
                let dr1 = blk.a2.w.transpose() * dz2;
                let dz1 = dr1.zip_map(&t.z1, |g, z| if z > 0.0 { g } else { 0.0 });
                let d_a1 = (&dz1 * t.y_in.transpose(), dz1.column_sum());
                let mut gy_next = blk.a1.w.transpose() * dz1;
                if let Some(s) = &blk.shortcut {
                    grads_rev.push((&gy * t.y_in.transpose(), gy.column_sum()));
                    gy_next += s.w.transpose() * &gy;
                } else {
                    gy_next += &gy;
                }
                grads_rev.push(d_a2);
                grads_rev.push(d_a1);
                gy = gy_next;
            }
            grads_rev.push((&gy * y0.transpose(), gy.column_sum()));
            let _ = lift;
        }
        _ => unreachable!("trace always matches the body that produced it"),
    }

    // grads_rev holds body layers in reverse canonical order; flatten forward.
    let mut flat = Vec::with_capacity(params.param_count());
    for (dw, db) in grads_rev.iter().rev() {
        flat.extend_from_slice(dw.as_slice());
        flat.extend_from_slice(db.as_slice());
    }
    flat.extend_from_slice(d_head_w.as_slice());
    flat.extend_from_slice(d_head_b.as_slice());
    (DVector::from_vec(flat), sse)
}

/// Optimizer and schedule knobs. The learning rate follows a cosine decay
/// from `lr` to 0 over the planned step budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Hard cap on gradient steps; the budget knob for paired comparisons.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 1024,
            lr: 1e-3,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.1,
            seed: 0,
            patience: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::InvalidParams(
                "batch size and epoch count must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParams("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParams("Adam moments must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidParams(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        if self.max_steps == Some(0) {
            return Err(Error::InvalidParams("step budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// What happened during a training run. `gradient_steps` is the ground truth
/// for budget-parity assertions between runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub gradient_steps: u64,
    pub epochs_run: usize,
    /// Mean of the minibatch losses seen in each epoch.
    pub train_mse: Vec<f64>,
    /// Post-epoch validation loss (training loss when no split).
    pub val_mse: Vec<f64>,
    pub best_val_mse: f64,
    pub best_epoch: usize,
}

/// Minibatch Adam with cosine learning-rate decay. Normalization statistics
/// are computed from the training split once and frozen; the best-validation
/// checkpoint is returned. Deterministic in `cfg.seed`.
pub fn train(
    spec: &NetSpec,
    data: &[DataPair],
    cfg: &TrainConfig,
) -> Result<(NetParams<f64>, TrainLog)> {
    spec.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if spec.input_dim != STATE_DIM {
        return Err(Error::Dimension(format!(
            "training data has {STATE_DIM}-dimensional states, spec wants {}",
            spec.input_dim
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<u32> = (0..data.len() as u32).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64 * cfg.val_fraction).round() as usize).min(data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    let val_set: Vec<DataPair> = val_idx.iter().map(|&i| data[i as usize]).collect();

    let mut params = init(spec, cfg.seed)?;
    params.norm = Normalization::from_records(data, &train_idx, spec.epsilon);

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch) as u64;
    let planned = cfg
        .max_steps
        .unwrap_or(u64::MAX)
        .min(cfg.epochs as u64 * steps_per_epoch)
        .max(1);

    let p = params.param_count();
    let mut theta = params.flatten();
    let mut m = DVector::<f64>::zeros(p);
    let mut v = DVector::<f64>::zeros(p);
    let mut step: u64 = 0;

    let mut log = TrainLog {
        gradient_steps: 0,
        epochs_run: 0,
        train_mse: Vec::new(),
        val_mse: Vec::new(),
        best_val_mse: f64::INFINITY,
        best_epoch: 0,
    };
    let mut best_theta = theta.clone();
    let mut since_best = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for ids in train_idx.chunks(cfg.batch) {
            if step >= planned {
                break 'epochs;
            }
            let batch: Vec<DataPair> = ids.iter().map(|&i| data[i as usize]).collect();
            let (g, loss) = gradient(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: step as usize,
                    what: "training loss".into(),
                });
            }
            epoch_loss += loss;
            epoch_batches += 1;

            let t = (step + 1) as f64;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / planned as f64).cos());
            let bc1 = 1.0 - cfg.beta1.powf(t);
            let bc2 = 1.0 - cfg.beta2.powf(t);
            for i in 0..p {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            }
            params.load_flat(&theta)?;
            step += 1;
        }
        if epoch_batches == 0 {
            break;
        }
        let train_loss = epoch_loss / epoch_batches as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mse(&params, &val_set)
        };
        log.train_mse.push(train_loss);
        log.val_mse.push(val_loss);
        log.epochs_run = epoch + 1;
        if val_loss < log.best_val_mse {
            log.best_val_mse = val_loss;
            log.best_epoch = epoch;
            best_theta.copy_from(&theta);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    log.gradient_steps = step;
    params.load_flat(&best_theta)?;
    Ok((params, log))
}

/// Mean squared error of the network over a dataset.
pub fn mse(params: &NetParams<f64>, data: &[DataPair]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let out = params.forward_batch(data);
    out.iter()
        .zip(data)
        .map(|(y, p)| (y - p.u) * (y - p.u))
        .sum::<f64>()
        / data.len() as f64
}

// ---------------------------------------------------------------------------
// Weights file ("NNW1")
//
// All integers are little-endian. Layout:
//   offset  size  field
//   0       4     magic "NNW1"
//   4       4     version (u32, = 1)
//   8       4     kind (u32: 0 MLP, 1 ResNet/affine shortcut, 2 ResNet/identity)
//   12      4     input_dim (u32)
//   16      4     output_dim (u32)
//   20      4     n_blocks (u32)
//   24      4     width (u32)
//   28      4     weight precision in bytes (u32, = 4)
//   32      8     normalization epsilon (f64)
//   40      8·d   normalization μ (f64 × input_dim)
//   ..      8·d   normalization σ (f64 × input_dim)
//   ..      4     layer count (u32)
//   ..      8·L   per-layer (rows u32, cols u32), forward order
//   ..            per-layer blobs: rows·cols f32 weights (row-major), rows f32 biases
// ---------------------------------------------------------------------------

fn encode_kind(spec: &NetSpec) -> u32 {
    match (spec.kind, spec.shortcut) {
        (NetKind::Mlp, _) => 0,
        (NetKind::ResNet, ShortcutKind::Affine) => 1,
        (NetKind::ResNet, ShortcutKind::Identity) => 2,
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn take_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn take_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn take_f32(r: &mut impl Read) -> std::io::Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// Serialize deployment weights. Normalization is stored at f64, layer
/// parameters at f32.
pub fn save_weights(params: &NetParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    put_u32(&mut w, WEIGHTS_VERSION)?;
    put_u32(&mut w, encode_kind(&params.spec))?;
    put_u32(&mut w, params.spec.input_dim as u32)?;
    put_u32(&mut w, params.spec.output_dim as u32)?;
    put_u32(&mut w, params.spec.n_blocks as u32)?;
    put_u32(&mut w, params.spec.width as u32)?;
    put_u32(&mut w, 4)?;
    put_f64(&mut w, f64::from(params.norm.epsilon))?;
    for v in params.norm.mu.iter() {
        put_f64(&mut w, f64::from(*v))?;
    }
    for v in params.norm.sigma.iter() {
        put_f64(&mut w, f64::from(*v))?;
    }
    let layers = params.layers();
    put_u32(&mut w, layers.len() as u32)?;
    for a in &layers {
        put_u32(&mut w, a.w.nrows() as u32)?;
        put_u32(&mut w, a.w.ncols() as u32)?;
    }
    for a in &layers {
        for i in 0..a.w.nrows() {
            for j in 0..a.w.ncols() {
                w.write_all(&a.w[(i, j)].to_le_bytes())?;
            }
        }
        for v in a.b.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Exact byte length of the weights file for a given spec.
pub fn weights_file_len(spec: &NetSpec) -> usize {
    let dims = spec.layer_dims();
    let params: usize = dims.iter().map(|(r, c)| r * c + r).sum();
    WEIGHTS_HEADER_LEN + 16 * spec.input_dim + 4 + 8 * dims.len() + 4 * params
}

/// Load deployment weights at their stored f32 precision.
pub fn load_weights(path: impl AsRef<Path>) -> Result<NetParams<f32>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format("bad weights magic".into()));
    }
    let version = take_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let kind_code = take_u32(&mut r)?;
    let (kind, shortcut) = match kind_code {
        0 => (NetKind::Mlp, ShortcutKind::Identity),
        1 => (NetKind::ResNet, ShortcutKind::Affine),
        2 => (NetKind::ResNet, ShortcutKind::Identity),
        k => return Err(Error::Format(format!("unknown architecture code {k}"))),
    };
    let input_dim = take_u32(&mut r)? as usize;
    let output_dim = take_u32(&mut r)? as usize;
    let n_blocks = take_u32(&mut r)? as usize;
    let width = take_u32(&mut r)? as usize;
    let precision = take_u32(&mut r)?;
    if precision != 4 {
        return Err(Error::Format(format!("unsupported weight precision {precision}")));
    }
    let epsilon = take_f64(&mut r)?;
    let spec = NetSpec {
        kind,
        input_dim,
        output_dim,
        n_blocks,
        width,
        shortcut,
        epsilon,
    };
    spec.validate()?;
    let mut mu = DVector::<f32>::zeros(input_dim);
    for i in 0..input_dim {
        mu[i] = take_f64(&mut r)? as f32;
    }
    let mut sigma = DVector::<f32>::zeros(input_dim);
    for i in 0..input_dim {
        sigma[i] = take_f64(&mut r)? as f32;
    }
    let expect = spec.layer_dims();
    let layer_count = take_u32(&mut r)? as usize;
    if layer_count != expect.len() {
        return Err(Error::Format(format!(
            "layer count {layer_count} does not match architecture ({})",
            expect.len()
        )));
    }
    let mut table = Vec::with_capacity(layer_count);
    for (k, (er, ec)) in expect.iter().enumerate() {
        let rows = take_u32(&mut r)? as usize;
        let cols = take_u32(&mut r)? as usize;
        if rows != *er || cols != *ec {
            return Err(Error::Format(format!(
                "layer {k}: file says {rows}x{cols}, architecture wants {er}x{ec}"
            )));
        }
        table.push((rows, cols));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for &(rows, cols) in &table {
        let mut a = Affine::<f32>::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                a.w[(i, j)] = take_f32(&mut r)?;
            }
        }
        for i in 0..rows {
            a.b[i] = take_f32(&mut r)?;
        }
        layers.push(a);
    }
    let head = layers.pop().expect("layer_dims is never empty");
    let body = match kind {
        NetKind::Mlp => Body::Mlp(layers),
        NetKind::ResNet => {
            let mut it = layers.into_iter();
            let lift = it.next().ok_or_else(|| Error::Format("missing lift layer".into()))?;
            let mut blocks = Vec::with_capacity(n_blocks);
            for _ in 0..n_blocks {
                let a1 = it.next().ok_or_else(|| Error::Format("truncated block".into()))?;
                let a2 = it.next().ok_or_else(|| Error::Format("truncated block".into()))?;
                let sc = match shortcut {
                    ShortcutKind::Affine => {
                        Some(it.next().ok_or_else(|| Error::Format("truncated block".into()))?)
                    }
                    ShortcutKind::Identity => None,
                };
                blocks.push(ResBlock { a1, a2, shortcut: sc });
            }
            Body::ResNet { lift, blocks }
        }
    };
    let params = NetParams {
        spec,
        norm: Normalization { mu, sigma, epsilon: epsilon as f32 },
        body,
        head,
    };
    params.validate()?;
    Ok(params)
}

/// Load deployment weights widened exactly to f64.
pub fn load_weights_f64(path: impl AsRef<Path>) -> Result<NetParams<f64>> {
    Ok(load_weights(path)?.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random_state(rng: &mut ChaCha8Rng) -> [f64; STATE_DIM] {
        let mut x = [0.0; STATE_DIM];
        for v in &mut x {
            *v = rng.random_range(-2.0..2.0);
        }
        x
    }

    fn random_batch(n: usize, seed: u64) -> Vec<DataPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| DataPair::new(random_state(&mut rng), rng.random_range(-20.0..20.0)).unwrap())
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let spec = NetSpec::resnet(3, 8);
        let a = init(&spec, 7).unwrap();
        let b = init(&spec, 7).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = init(&spec, 8).unwrap();
        assert_ne!(a.flatten(), c.flatten());
        a.validate().unwrap();

        let mut bad = spec.clone();
        bad.width = 0;
        assert!(init(&bad, 0).is_err());
    }

    #[test]
    fn init_he_bounds_and_zero_biases() {
        let spec = NetSpec::resnet(2, 16);
        let p = init(&spec, 1).unwrap();
        for (a, (rows, cols)) in p.layers().iter().zip(spec.layer_dims()) {
            assert_eq!((a.w.nrows(), a.w.ncols()), (rows, cols));
            assert!(a.b.iter().all(|v| *v == 0.0));
        }
        if let Body::ResNet { blocks, .. } = &p.body {
            let bound = (6.0f64 / 16.0).sqrt();
            for blk in blocks {
                assert!(blk.a1.w.iter().all(|v| v.abs() < bound));
                // shortcut starts as the exact identity
                let s = blk.shortcut.as_ref().unwrap();
                assert_eq!(s.w, DMatrix::identity(16, 16));
                assert!(s.b.iter().all(|v| *v == 0.0));
            }
        } else {
            panic!("expected residual body");
        }
    }

    #[test]
    fn forward_of_zeroed_net_is_zero() {
        let spec = NetSpec::resnet(2, 8);
        let mut p = init(&spec, 0).unwrap();
        let zeros = DVector::zeros(p.param_count());
        p.load_flat(&zeros).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(p.forward(&random_state(&mut rng)).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_body_blocks_pass_through() {
        // With block bodies zeroed and shortcuts at their identity
        // initialization, the network collapses to head(lift(norm(x))).
        for shortcut in [ShortcutKind::Affine, ShortcutKind::Identity] {
            let mut spec = NetSpec::resnet(4, 8);
            spec.shortcut = shortcut;
            let mut p = init(&spec, 3).unwrap();
            if let Body::ResNet { blocks, .. } = &mut p.body {
                for blk in blocks {
                    blk.a1.w.fill(0.0);
                    blk.a2.w.fill(0.0);
                }
            }
            let (lift, head) = match &p.body {
                Body::ResNet { lift, .. } => (lift.clone(), p.head.clone()),
                _ => unreachable!(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for _ in 0..10 {
                let x = random_state(&mut rng);
                let manual = head.apply(&lift.apply(&p.norm.apply(&x)))[0];
                let full = p.forward(&x).unwrap();
                assert!((full - manual).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_hand_computed_single_relu_layer() {
        // norm = identity with ε=0; hidden A=[[1,-2],[3,4]], b=(0.5,-0.5);
        // head W=[2,-1], b=0.25. x=(1,-1):
        //   z = (1+2+0.5, 3-4-0.5) = (3.5, -1.5) → relu = (3.5, 0)
        //   out = 2·3.5 - 0 + 0.25 = 7.25
        let spec = NetSpec {
            kind: NetKind::Mlp,
            input_dim: 2,
            output_dim: 1,
            n_blocks: 1,
            width: 2,
            shortcut: ShortcutKind::Identity,
            epsilon: 0.0,
        };
        let mut p = init(&spec, 0).unwrap();
        if let Body::Mlp(hidden) = &mut p.body {
            hidden[0].w = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 4.0]);
            hidden[0].b = DVector::from_vec(vec![0.5, -0.5]);
        }
        p.head.w = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        p.head.b = DVector::from_vec(vec![0.25]);
        assert_eq!(p.forward(&[1.0, -1.0]).unwrap(), 7.25);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let p = init(&NetSpec::resnet(1, 4), 0).unwrap();
        assert!(matches!(p.forward(&[0.0; 3]), Err(Error::Dimension(_))));
        let mut x = [0.0; STATE_DIM];
        x[2] = f64::NAN;
        assert!(matches!(p.forward(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn forward_batch_matches_single() {
        let p = init(&NetSpec::resnet(3, 8), 5).unwrap();
        let batch = random_batch(700, 6);
        let outs = p.forward_batch(&batch);
        for (o, pair) in outs.iter().zip(&batch) {
            let single = p.forward(&pair.x).unwrap();
            assert!((o - single).abs() <= 1e-12 * (1.0 + single.abs()));
        }
    }

    #[test]
    fn flatten_roundtrip_is_exact() {
        let p = init(&NetSpec::resnet(2, 6), 9).unwrap();
        let theta = p.flatten();
        let mut q = init(&NetSpec::resnet(2, 6), 10).unwrap();
        q.load_flat(&theta).unwrap();
        assert_eq!(q.flatten(), theta);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x = random_state(&mut rng);
            assert_eq!(p.forward(&x).unwrap(), q.forward(&x).unwrap());
        }
        let wrong = DVector::zeros(theta.len() + 1);
        assert!(q.load_flat(&wrong).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (spec, seed) in [
            (NetSpec::resnet(2, 6), 100u64),
            (NetSpec::mlp(3, 10), 101),
            (
                NetSpec {
                    shortcut: ShortcutKind::Identity,
                    ..NetSpec::resnet(2, 5)
                },
                102,
            ),
        ] {
            let p = init(&spec, seed).unwrap();
            let batch = random_batch(17, seed + 1);
            let (g, _) = gradient(&p, &batch).unwrap();
            let theta = p.flatten();
            let h = 1e-6;
            for _ in 0..50 {
                let i = rng.random_range(0..theta.len());
                let mut plus = p.clone();
                let mut tp = theta.clone();
                tp[i] += h;
                plus.load_flat(&tp).unwrap();
                let mut minus = p.clone();
                let mut tm = theta.clone();
                tm[i] -= h;
                minus.load_flat(&tm).unwrap();
                let fd = (mse(&plus, &batch) - mse(&minus, &batch)) / (2.0 * h);
                let scale = g[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (g[i] - fd).abs() <= 1e-4 * scale,
                    "coord {i}: analytic {} vs fd {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn gradient_zero_at_exact_fit() {
        // A fully zeroed net outputs 0 everywhere; targets of 0 put the loss
        // at its global minimum, so the gradient vanishes identically.
        let mut p = init(&NetSpec::resnet(2, 6), 13).unwrap();
        let zeros = DVector::zeros(p.param_count());
        p.load_flat(&zeros).unwrap();
        let batch: Vec<DataPair> = random_batch(9, 14)
            .into_iter()
            .map(|d| DataPair::new(d.x, 0.0).unwrap())
            .collect();
        let (g, loss) = gradient(&p, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_of_duplicated_batch_is_unchanged() {
        let p = init(&NetSpec::resnet(2, 6), 15).unwrap();
        let batch = random_batch(40, 16);
        let mut doubled = batch.clone();
        doubled.extend_from_slice(&batch);
        let (g1, l1) = gradient(&p, &batch).unwrap();
        let (g2, l2) = gradient(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() <= 1e-12 * (1.0 + l1.abs()));
        for i in 0..g1.len() {
            assert!((g1[i] - g2[i]).abs() <= 1e-12 * (1.0 + g1[i].abs()));
        }
    }

    #[test]
    fn gradient_is_thread_schedule_independent() {
        // Slab sums are reduced in slab order, so a batch spanning several
        // slabs gives bitwise-identical results on every run.
        let p = init(&NetSpec::resnet(2, 8), 17).unwrap();
        let batch = random_batch(5 * GRAD_CHUNK + 3, 18);
        let (g1, l1) = gradient(&p, &batch).unwrap();
        let (g2, l2) = gradient(&p, &batch).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for i in 0..g1.len() {
            assert_eq!(g1[i].to_bits(), g2[i].to_bits());
        }
    }

    #[test]
    fn forward_is_lipschitz_within_weight_norm_bound() {
        let p = init(&NetSpec::resnet(3, 10), 19).unwrap();
        // Product of layer Frobenius norms bounds the network's Lipschitz
        // constant (each ‖·‖_F dominates the spectral norm; ReLU is
        // 1-Lipschitz; an affine-shortcut block contributes ‖S‖ + ‖A₂‖·‖A₁‖).
        let (lift, blocks) = match &p.body {
            Body::ResNet { lift, blocks } => (lift, blocks),
            _ => unreachable!(),
        };
        let mut bound = lift.w.norm() * p.head.w.norm();
        for blk in blocks {
            let s = blk.shortcut.as_ref().map_or(1.0, |s| s.w.norm());
            bound *= s + blk.a2.w.norm() * blk.a1.w.norm();
        }
        let norm_gain = (0..STATE_DIM)
            .map(|i| 1.0 / (p.norm.sigma[i].sqrt() + p.norm.epsilon))
            .fold(0.0f64, f64::max);
        bound *= norm_gain;

        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..200 {
            let x = random_state(&mut rng);
            let mut y = x;
            let mut norm2 = 0.0;
            for v in &mut y {
                let d: f64 = rng.random_range(-1e-3..1e-3);
                *v += d;
                norm2 += d * d;
            }
            let df = (p.forward(&x).unwrap() - p.forward(&y).unwrap()).abs();
            assert!(df <= bound * norm2.sqrt() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn forward_is_affine_between_kinks() {
        // Three-point collinearity along random directions, skipping probes
        // whose endpoints straddle a ReLU boundary (different activation
        // patterns). Within one region the map is exactly affine.
        let p = init(&NetSpec::resnet(3, 10), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = 1e-4;
        let mut tested = 0;
        for _ in 0..200 {
            let x = random_state(&mut rng);
            let mut dir = [0.0f64; STATE_DIM];
            let mut n2 = 0.0f64;
            for d in &mut dir {
                *d = rng.sample(StandardNormal);
                n2 += *d * *d;
            }
            let n = n2.sqrt();
            let mut lo = x;
            let mut hi = x;
            for i in 0..STATE_DIM {
                lo[i] -= h * dir[i] / n;
                hi[i] += h * dir[i] / n;
            }
            if p.activation_pattern(&lo) != p.activation_pattern(&hi) {
                continue;
            }
            let (fl, f0, fh) = (
                p.forward(&lo).unwrap(),
                p.forward(&x).unwrap(),
                p.forward(&hi).unwrap(),
            );
            let residual = (fh - 2.0 * f0 + fl).abs();
            assert!(residual <= 1e-6 * f0.abs().max(1.0), "residual {residual}");
            tested += 1;
        }
        assert!(tested >= 50, "only {tested} probes landed inside a region");
    }

    #[test]
    fn footprint_of_deployment_resnet() {
        let spec = NetSpec::resnet(12, 16);
        let p = init(&spec, 0).unwrap();
        let f = p.footprint();
        // lift 16×8+16, 12 blocks × 3·(16×16+16), head 1×16+1
        assert_eq!(f.param_count, 144 + 12 * 3 * 272 + 17);
        assert_eq!(f.param_count, 9_953);
        assert_eq!(f.param_bytes, 39_812);
        assert_eq!(f.matmul_count, 38); // 3 per block + lift + head
        // largest layer: 16×16 weights + bias + 16-wide in/out buffers
        assert_eq!(f.peak_ram_bytes, 4 * (256 + 16 + 16 + 16));
        assert_eq!(f.peak_ram_bytes, 1_216);

        let identity = NetSpec {
            shortcut: ShortcutKind::Identity,
            ..spec.clone()
        };
        let p = init(&identity, 0).unwrap();
        assert_eq!(p.footprint().matmul_count, 26); // 2 per block + lift + head

        let empty = init(&NetSpec::resnet(0, 16), 0).unwrap();
        assert_eq!(empty.footprint().matmul_count, 2); // lift + head only
    }

    #[test]
    fn weights_file_roundtrip_and_length() {
        let spec = NetSpec::resnet(12, 16);
        let trained = init(&spec, 23).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.nnw");
        save_weights(&trained.to_f32(), &path).unwrap();

        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, weights_file_len(&spec));
        assert_eq!(len, 40_288);
        assert!((40_000..=44_000).contains(&len));

        // First save quantizes to f32; after that the cycle is exact.
        let l1 = load_weights(&path).unwrap();
        let path2 = dir.path().join("net2.nnw");
        save_weights(&l1, &path2).unwrap();
        let l2 = load_weights(&path2).unwrap();
        assert_eq!(l1.flatten(), l2.flatten());
        assert_eq!(l1.norm.mu, l2.norm.mu);

        // f32 → f64 widening is exact, and quantized forward outputs are
        // bitwise reproducible across load paths.
        let wide = l1.to_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let x = random_state(&mut rng);
            let x32: Vec<f32> = x.iter().map(|v| *v as f32).collect();
            let a = l1.forward(&x32).unwrap();
            let b = load_weights(&path2).unwrap().forward(&x32).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(f64::from(l1.to_f64().flatten()[0]), wide.flatten()[0]);
        }
    }

    #[test]
    fn weights_file_rejects_corruption() {
        let spec = NetSpec::mlp(2, 4);
        let p = init(&spec, 25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.nnw");
        save_weights(&p.to_f32(), &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad_magic.nnw");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_weights(&bad), Err(Error::Format(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9; // unknown architecture code
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_weights(&bad).is_err());

        let truncated = std::fs::read(&path).unwrap();
        std::fs::write(&bad, &truncated[..truncated.len() - 5]).unwrap();
        assert!(load_weights(&bad).is_err());
    }

    #[test]
    fn train_memorizes_small_dataset() {
        let data = random_batch(10, 26);
        let spec = NetSpec::resnet(4, 16);
        let cfg = TrainConfig {
            batch: 10,
            lr: 3e-3,
            epochs: 3000,
            val_fraction: 0.0,
            seed: 27,
            ..TrainConfig::default()
        };
        let (p, log) = train(&spec, &data, &cfg).unwrap();
        let final_mse = mse(&p, &data);
        assert!(final_mse <= 1e-6, "train mse {final_mse}");
        assert_eq!(log.gradient_steps, 3000);
    }

    #[test]
    fn train_fits_saturated_affine_target() {
        // One-dimensional piecewise-affine target of the same structural
        // family as the controller: u(t) = clamp(2t + 0.3, -0.5, 0.8).
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let sample = |t: f64| {
            let mut x = [0.0; STATE_DIM];
            x[0] = t;
            DataPair::new(x, (2.0 * t + 0.3).clamp(-0.5, 0.8)).unwrap()
        };
        let data: Vec<DataPair> = (0..4000).map(|_| sample(rng.random_range(-1.0..1.0))).collect();
        let spec = NetSpec::resnet(3, 16);
        let cfg = TrainConfig {
            batch: 256,
            lr: 3e-3,
            epochs: 400,
            max_steps: Some(4000),
            seed: 29,
            ..TrainConfig::default()
        };
        let (p, _) = train(&spec, &data, &cfg).unwrap();
        let test: Vec<DataPair> = (0..500).map(|i| sample(-1.0 + 2.0 * i as f64 / 499.0)).collect();
        let test_mse = mse(&p, &test);
        assert!(test_mse <= 1e-4, "test mse {test_mse}");
    }

    #[test]
    fn train_is_deterministic_and_respects_budget() {
        let data = random_batch(600, 30);
        let spec = NetSpec::resnet(2, 8);
        let cfg = TrainConfig {
            batch: 64,
            epochs: 50,
            max_steps: Some(120),
            seed: 31,
            ..TrainConfig::default()
        };
        let (p1, l1) = train(&spec, &data, &cfg).unwrap();
        let (p2, l2) = train(&spec, &data, &cfg).unwrap();
        assert_eq!(l1.gradient_steps, 120);
        assert_eq!(l2.gradient_steps, 120);
        let (t1, t2) = (p1.flatten(), p2.flatten());
        for i in 0..t1.len() {
            assert_eq!(t1[i].to_bits(), t2[i].to_bits());
        }
        assert_eq!(l1.train_mse, l2.train_mse);
        assert_eq!(l1.val_mse, l2.val_mse);
    }

    #[test]
    fn train_reports_divergence() {
        let data = random_batch(200, 32);
        let spec = NetSpec::resnet(2, 8);
        // Adam's unit-scale steps keep parameters near ±lr, so the weights
        // must be pushed far enough that a forward pass overflows f64.
        let cfg = TrainConfig {
            lr: 1e100,
            epochs: 20,
            seed: 33,
            ..TrainConfig::default()
        };
        match train(&spec, &data, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let spec = NetSpec::resnet(1, 4);
        assert!(matches!(
            train(&spec, &[], &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let data = random_batch(10, 34);
        let bad = TrainConfig {
            batch: 0,
            ..TrainConfig::default()
        };
        assert!(train(&spec, &data, &bad).is_err());
        let bad = TrainConfig {
            val_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(train(&spec, &data, &bad).is_err());
    }

    #[test]
    fn early_stopping_keeps_best_checkpoint() {
        let data = random_batch(400, 35);
        let spec = NetSpec::resnet(2, 8);
        let cfg = TrainConfig {
            batch: 64,
            epochs: 60,
            patience: 5,
            seed: 36,
            ..TrainConfig::default()
        };
        let (p, log) = train(&spec, &data, &cfg).unwrap();
        let val_at_best = log.val_mse[log.best_epoch];
        assert_eq!(val_at_best, log.best_val_mse);
        assert!(log.val_mse.iter().all(|v| *v >= log.best_val_mse));
        // The returned parameters reproduce the best validation loss.
        let n_val = (400.0f64 * cfg.val_fraction).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<u32> = (0..400).collect();
        order.shuffle(&mut rng);
        let val: Vec<DataPair> = order[..n_val].iter().map(|&i| data[i as usize]).collect();
        let recomputed = mse(&p, &val);
        assert!((recomputed - log.best_val_mse).abs() <= 1e-12 * (1.0 + recomputed.abs()));
    }
}
