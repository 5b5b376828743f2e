//! The compositional sequence model: token embedding -> GRU -> ReLU layer ->
//! three softmax heads, with from-scratch forward and backward passes.
//!
//! Training runs in `f32`; the same code instantiated at `f64` backs the
//! finite-difference gradient verification.

mod train;

pub use train::{train, CdestConfig, EpochLog};

use crate::corpus::{tokenize, ColorPoint, Vocabulary};
use crate::discretize::{joint_probability, BinnedDistribution, DiscretizerConfig};
use crate::error::{Error, Result};
use crate::evaluate::ColorModel;
use num_traits::Float;
use rand::Rng;
use std::fmt::Debug;
use std::iter::Sum;

/// Floating-point element type of the network.
pub trait Scalar: Float + Sum + Debug + Default + Copy + 'static {
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    /// Fan-based uniform init: U(-l, l) with l = sqrt(6 / (fan_in + fan_out)).
    fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| F::from_f64((rng.random::<f64>() * 2.0 - 1.0) * limit))
            .collect();
        Self { rows, cols, data }
    }

    fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// y = W x
    fn matvec(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .fold(F::zero(), |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }

    /// y = W^T x
    fn matvec_t(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![F::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o = *o + w * xi;
            }
        }
        out
    }

    /// W += y (outer) x
    fn add_outer(&mut self, y: &[F], x: &[F]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (i, &yi) in y.iter().enumerate() {
            for (w, &xj) in self.row_mut(i).iter_mut().zip(x) {
                *w = *w + yi * xj;
            }
        }
    }
}

/// Layer sizes of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub resolution: usize,
}

/// All trainable weights. The same structure doubles as the gradient
/// container.
#[derive(Debug, Clone, PartialEq)]
pub struct CdestParameters<F> {
    pub(crate) embedding: Mat<F>,
    pub(crate) update_in: Mat<F>,
    pub(crate) update_rec: Mat<F>,
    pub(crate) update_bias: Vec<F>,
    pub(crate) reset_in: Mat<F>,
    pub(crate) reset_rec: Mat<F>,
    pub(crate) reset_bias: Vec<F>,
    pub(crate) cand_in: Mat<F>,
    pub(crate) cand_rec: Mat<F>,
    pub(crate) cand_bias: Vec<F>,
    pub(crate) dense_w: Mat<F>,
    pub(crate) dense_b: Vec<F>,
    pub(crate) head_w: [Mat<F>; 3],
    pub(crate) head_b: [Vec<F>; 3],
}

impl<F: Scalar> CdestParameters<F> {
    /// Seed-controlled initialization: fan-based uniform matrices, zero biases.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let (v, e, h, n) = (dims.vocab, dims.embed, dims.hidden, dims.resolution);
        Self {
            embedding: Mat::glorot(v, e, rng),
            update_in: Mat::glorot(h, e, rng),
            update_rec: Mat::glorot(h, h, rng),
            update_bias: vec![F::zero(); h],
            reset_in: Mat::glorot(h, e, rng),
            reset_rec: Mat::glorot(h, h, rng),
            reset_bias: vec![F::zero(); h],
            cand_in: Mat::glorot(h, e, rng),
            cand_rec: Mat::glorot(h, h, rng),
            cand_bias: vec![F::zero(); h],
            dense_w: Mat::glorot(h, h, rng),
            dense_b: vec![F::zero(); h],
            head_w: [
                Mat::glorot(n, h, rng),
                Mat::glorot(n, h, rng),
                Mat::glorot(n, h, rng),
            ],
            head_b: [vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n]],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dims();
        let (v, e, h, n) = (d.vocab, d.embed, d.hidden, d.resolution);
        Self {
            embedding: Mat::zeros(v, e),
            update_in: Mat::zeros(h, e),
            update_rec: Mat::zeros(h, h),
            update_bias: vec![F::zero(); h],
            reset_in: Mat::zeros(h, e),
            reset_rec: Mat::zeros(h, h),
            reset_bias: vec![F::zero(); h],
            cand_in: Mat::zeros(h, e),
            cand_rec: Mat::zeros(h, h),
            cand_bias: vec![F::zero(); h],
            dense_w: Mat::zeros(h, h),
            dense_b: vec![F::zero(); h],
            head_w: [Mat::zeros(n, h), Mat::zeros(n, h), Mat::zeros(n, h)],
            head_b: [vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n]],
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embedding.rows,
            embed: self.embedding.cols,
            hidden: self.dense_w.rows,
            resolution: self.head_w[0].rows,
        }
    }

    /// Weight blocks in the fixed serialization/update order.
    pub fn blocks(&self) -> Vec<&[F]> {
        vec![
            &self.embedding.data,
            &self.update_in.data,
            &self.update_rec.data,
            &self.update_bias,
            &self.reset_in.data,
            &self.reset_rec.data,
            &self.reset_bias,
            &self.cand_in.data,
            &self.cand_rec.data,
            &self.cand_bias,
            &self.dense_w.data,
            &self.dense_b,
            &self.head_w[0].data,
            &self.head_b[0],
            &self.head_w[1].data,
            &self.head_b[1],
            &self.head_w[2].data,
            &self.head_b[2],
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [F]> {
        let [hw0, hw1, hw2] = &mut self.head_w;
        let [hb0, hb1, hb2] = &mut self.head_b;
        vec![
            &mut self.embedding.data,
            &mut self.update_in.data,
            &mut self.update_rec.data,
            &mut self.update_bias,
            &mut self.reset_in.data,
            &mut self.reset_rec.data,
            &mut self.reset_bias,
            &mut self.cand_in.data,
            &mut self.cand_rec.data,
            &mut self.cand_bias,
            &mut self.dense_w.data,
            &mut self.dense_b,
            &mut hw0.data,
            hb0,
            &mut hw1.data,
            hb1,
            &mut hw2.data,
            hb2,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Activations recorded by [`forward`], consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    dims: ModelDims,
    tokens: Vec<usize>,
    /// h_0 (zeros) through h_T.
    hiddens: Vec<Vec<F>>,
    updates: Vec<Vec<F>>,
    resets: Vec<Vec<F>>,
    cands: Vec<Vec<F>>,
    gru_mask: Vec<F>,
    dense_mask: Vec<F>,
    gru_dropped: Vec<F>,
    dense_pre: Vec<F>,
    act_dropped: Vec<F>,
    probs: [Vec<F>; 3],
    train: bool,
}

impl<F: Scalar> ForwardCache<F> {
    /// Head outputs (h, s, v), each a softmax over the bins.
    pub fn predictions(&self) -> &[Vec<F>; 3] {
        &self.probs
    }

    pub fn predictions_f64(&self) -> Result<[BinnedDistribution; 3]> {
        let convert = |p: &Vec<F>| {
            BinnedDistribution::new(p.iter().map(|x| x.into_f64()).collect())
        };
        Ok([
            convert(&self.probs[0])?,
            convert(&self.probs[1])?,
            convert(&self.probs[2])?,
        ])
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: F = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn dropout_mask<F: Scalar, R: Rng>(len: usize, drop_prob: f64, rng: &mut R) -> Vec<F> {
    if drop_prob == 0.0 {
        return vec![F::one(); len];
    }
    let keep = F::from_f64(1.0 - drop_prob);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < drop_prob {
                F::zero()
            } else {
                F::one() / keep
            }
        })
        .collect()
}

/// Runs the network over a token sequence. Zero initial state, no boundary
/// markers. In train mode, inverted dropout is applied to the GRU output and
/// the ReLU output (not the embeddings).
pub fn forward<F: Scalar, R: Rng>(
    params: &CdestParameters<F>,
    tokens: &[usize],
    mode: Mode,
    drop_prob: f64,
    rng: &mut R,
) -> Result<ForwardCache<F>> {
    let dims = params.dims();
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= dims.vocab) {
        return Err(Error::InvalidInput(format!(
            "token index {bad} out of range for vocabulary of {}",
            dims.vocab
        )));
    }
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::Config(format!("dropout probability {drop_prob} not in [0, 1)")));
    }
    let train = mode == Mode::Train;

    let mut hiddens = vec![vec![F::zero(); dims.hidden]];
    let mut updates = Vec::with_capacity(tokens.len());
    let mut resets = Vec::with_capacity(tokens.len());
    let mut cands = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let x = params.embedding.row(tok);
        let h_prev = hiddens.last().unwrap().clone();

        let mut z = params.update_in.matvec(x);
        for ((zi, ri), &bi) in z
            .iter_mut()
            .zip(params.update_rec.matvec(&h_prev))
            .zip(&params.update_bias)
        {
            *zi = sigmoid(*zi + ri + bi);
        }
        let mut r = params.reset_in.matvec(x);
        for ((ri, rr), &bi) in r
            .iter_mut()
            .zip(params.reset_rec.matvec(&h_prev))
            .zip(&params.reset_bias)
        {
            *ri = sigmoid(*ri + rr + bi);
        }
        let gated: Vec<F> = r.iter().zip(&h_prev).map(|(&ri, &hi)| ri * hi).collect();
        let mut c = params.cand_in.matvec(x);
        for ((ci, cr), &bi) in c
            .iter_mut()
            .zip(params.cand_rec.matvec(&gated))
            .zip(&params.cand_bias)
        {
            *ci = (*ci + cr + bi).tanh();
        }
        let h: Vec<F> = h_prev
            .iter()
            .zip(&z)
            .zip(&c)
            .map(|((&hp, &zi), &ci)| (F::one() - zi) * hp + zi * ci)
            .collect();

        hiddens.push(h);
        updates.push(z);
        resets.push(r);
        cands.push(c);
    }

    let effective_drop = if train { drop_prob } else { 0.0 };
    let gru_mask = dropout_mask(dims.hidden, effective_drop, rng);
    let dense_mask = dropout_mask(dims.hidden, effective_drop, rng);

    let gru_dropped: Vec<F> = hiddens
        .last()
        .unwrap()
        .iter()
        .zip(&gru_mask)
        .map(|(&h, &m)| h * m)
        .collect();
    let mut dense_pre = params.dense_w.matvec(&gru_dropped);
    for (p, &b) in dense_pre.iter_mut().zip(&params.dense_b) {
        *p = *p + b;
    }
    let act_dropped: Vec<F> = dense_pre
        .iter()
        .zip(&dense_mask)
        .map(|(&p, &m)| p.max(F::zero()) * m)
        .collect();

    let probs = std::array::from_fn(|c| {
        let mut logits = params.head_w[c].matvec(&act_dropped);
        for (l, &b) in logits.iter_mut().zip(&params.head_b[c]) {
            *l = *l + b;
        }
        softmax(&logits)
    });

    Ok(ForwardCache {
        dims,
        tokens: tokens.to_vec(),
        hiddens,
        updates,
        resets,
        cands,
        gru_mask,
        dense_mask,
        gru_dropped,
        dense_pre,
        act_dropped,
        probs,
        train,
    })
}

/// Summed cross-entropy of the three heads against soft targets, natural log.
pub fn loss(predicted: &[BinnedDistribution; 3], target: &[BinnedDistribution; 3]) -> Result<f64> {
    for (p, t) in predicted.iter().zip(target) {
        if p.resolution() != t.resolution() {
            return Err(Error::Config(format!(
                "resolution mismatch: predicted {} vs target {}",
                p.resolution(),
                t.resolution()
            )));
        }
    }
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(p, t)| {
            t.masses()
                .iter()
                .zip(p.masses())
                .filter(|(&ti, _)| ti > 0.0)
                .map(|(&ti, &pi)| -ti * pi.ln())
                .sum::<f64>()
        })
        .sum())
}

pub(crate) fn loss_internal<F: Scalar>(probs: &[Vec<F>; 3], target: &[Vec<F>; 3]) -> F {
    probs
        .iter()
        .zip(target)
        .map(|(p, t)| {
            t.iter()
                .zip(p)
                .filter(|(&ti, _)| ti > F::zero())
                .map(|(&ti, &pi)| -ti * pi.ln())
                .sum::<F>()
        })
        .sum()
}

/// Exact analytic gradients of the summed cross-entropy loss, accumulated
/// into `grads` (which must be dimension-congruent with `params`).
pub fn backward<F: Scalar>(
    params: &CdestParameters<F>,
    cache: &ForwardCache<F>,
    target: &[Vec<F>; 3],
    grads: &mut CdestParameters<F>,
) -> Result<()> {
    if !cache.train {
        return Err(Error::InvalidInput(
            "backward requires a cache from a train-mode forward pass".into(),
        ));
    }
    if cache.dims != params.dims() || grads.dims() != params.dims() {
        return Err(Error::Config("cache/gradient dimensions do not match parameters".into()));
    }
    for (t, p) in target.iter().zip(&cache.probs) {
        if t.len() != p.len() {
            return Err(Error::Config("target resolution does not match model output".into()));
        }
    }

    let hidden = cache.dims.hidden;
    let mut d_act_dropped = vec![F::zero(); hidden];
    for (c, target_c) in target.iter().enumerate() {
        // softmax + cross-entropy with a normalized soft target: dlogit = p - t
        let dlogits: Vec<F> = cache.probs[c]
            .iter()
            .zip(target_c)
            .map(|(&p, &t)| p - t)
            .collect();
        grads.head_w[c].add_outer(&dlogits, &cache.act_dropped);
        for (g, &d) in grads.head_b[c].iter_mut().zip(&dlogits) {
            *g = *g + d;
        }
        for (acc, d) in d_act_dropped
            .iter_mut()
            .zip(params.head_w[c].matvec_t(&dlogits))
        {
            *acc = *acc + d;
        }
    }

    // dropout on the ReLU output, then the ReLU itself
    let d_dense_pre: Vec<F> = d_act_dropped
        .iter()
        .zip(&cache.dense_mask)
        .zip(&cache.dense_pre)
        .map(|((&d, &m), &pre)| {
            if pre > F::zero() {
                d * m
            } else {
                F::zero()
            }
        })
        .collect();
    grads.dense_w.add_outer(&d_dense_pre, &cache.gru_dropped);
    for (g, &d) in grads.dense_b.iter_mut().zip(&d_dense_pre) {
        *g = *g + d;
    }
    let d_gru_dropped = params.dense_w.matvec_t(&d_dense_pre);
    let mut dh: Vec<F> = d_gru_dropped
        .iter()
        .zip(&cache.gru_mask)
        .map(|(&d, &m)| d * m)
        .collect();

    // backpropagation through time
    for t in (0..cache.tokens.len()).rev() {
        let h_prev = &cache.hiddens[t];
        let z = &cache.updates[t];
        let r = &cache.resets[t];
        let c = &cache.cands[t];
        let x = params.embedding.row(cache.tokens[t]);

        let mut dh_prev = vec![F::zero(); hidden];
        let mut da_c = vec![F::zero(); hidden];
        let mut da_z = vec![F::zero(); hidden];
        for i in 0..hidden {
            let dz = dh[i] * (c[i] - h_prev[i]);
            let dc = dh[i] * z[i];
            dh_prev[i] = dh[i] * (F::one() - z[i]);
            da_c[i] = dc * (F::one() - c[i] * c[i]);
            da_z[i] = dz * z[i] * (F::one() - z[i]);
        }

        grads.cand_in.add_outer(&da_c, x);
        let gated: Vec<F> = r.iter().zip(h_prev).map(|(&ri, &hi)| ri * hi).collect();
        grads.cand_rec.add_outer(&da_c, &gated);
        for (g, &d) in grads.cand_bias.iter_mut().zip(&da_c) {
            *g = *g + d;
        }
        let d_gated = params.cand_rec.matvec_t(&da_c);
        let mut da_r = vec![F::zero(); hidden];
        for i in 0..hidden {
            let dr = d_gated[i] * h_prev[i];
            dh_prev[i] = dh_prev[i] + d_gated[i] * r[i];
            da_r[i] = dr * r[i] * (F::one() - r[i]);
        }

        grads.update_in.add_outer(&da_z, x);
        grads.update_rec.add_outer(&da_z, h_prev);
        for (g, &d) in grads.update_bias.iter_mut().zip(&da_z) {
            *g = *g + d;
        }
        grads.reset_in.add_outer(&da_r, x);
        grads.reset_rec.add_outer(&da_r, h_prev);
        for (g, &d) in grads.reset_bias.iter_mut().zip(&da_r) {
            *g = *g + d;
        }

        for (acc, d) in dh_prev.iter_mut().zip(params.update_rec.matvec_t(&da_z)) {
            *acc = *acc + d;
        }
        for (acc, d) in dh_prev.iter_mut().zip(params.reset_rec.matvec_t(&da_r)) {
            *acc = *acc + d;
        }

        let mut dx = params.cand_in.matvec_t(&da_c);
        for (acc, d) in dx.iter_mut().zip(params.update_in.matvec_t(&da_z)) {
            *acc = *acc + d;
        }
        for (acc, d) in dx.iter_mut().zip(params.reset_in.matvec_t(&da_r)) {
            *acc = *acc + d;
        }
        for (g, &d) in grads.embedding.row_mut(cache.tokens[t]).iter_mut().zip(&dx) {
            *g = *g + d;
        }

        dh = dh_prev;
    }
    Ok(())
}

/// A trained model bundled with everything inference needs.
#[derive(Debug, Clone)]
pub struct CdestModel {
    pub params: CdestParameters<f32>,
    pub vocabulary: Vocabulary,
    pub discretizer: DiscretizerConfig,
}

/// Tokenizes a description and runs the network in inference mode.
pub fn predict(model: &CdestModel, description: &str) -> Result<[BinnedDistribution; 3]> {
    let tokens = tokenize(description)?;
    let indices = model.vocabulary.indices(&tokens)?;
    // rng is unused in infer mode; any source will do
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let cache = forward(&model.params, &indices, Mode::Infer, 0.0, &mut rng)?;
    cache.predictions_f64()
}

impl ColorModel for CdestModel {
    fn kind(&self) -> &str {
        "cdest"
    }

    fn resolution(&self) -> usize {
        self.params.dims().resolution
    }

    fn probability(&self, description: &str, point: &ColorPoint) -> Result<f64> {
        let dists = predict(self, description)?;
        joint_probability(&dists[0], &dists[1], &dists[2], point)
    }
}
