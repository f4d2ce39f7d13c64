//! Dual sequence encoders mapping melody features and sylphone features to
//! L2-normalized embedding sequences.
//!
//! Each encoder is a position-wise input projection plus learned positional
//! embeddings, followed by post-norm self-attention blocks (multi-head
//! attention, feed-forward, residuals, layer norm) and a final per-position
//! L2 normalization. Parameters live in one flat buffer; forward passes
//! record a cache and the backward pass is hand-written against it, anchored
//! by finite-difference checks rather than an autograd engine.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matrix::{add_bias_rows, mm, mm_nt, mm_tn, Matrix};
use crate::scalar::{real, Scalar};

/// Numerical floor inside layer norm.
const LN_EPS: f64 = 1e-5;

/// Length-L sequence of model_dim embedding rows, each L2-normalized.
pub type EmbeddingSequence<T> = Matrix<T>;

/// Which encoder of the dual pair to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Melody,
    Lyrics,
}

/// Architecture of one encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub feedforward_dim: usize,
    /// Capacity of the learned positional table.
    pub max_len: usize,
    /// Disabled only in equivariance tests.
    pub use_positional: bool,
}

impl EncoderConfig {
    /// Full-scale reference architecture (~3.5M parameters for the pair).
    pub fn reference(input_dim: usize) -> Self {
        Self {
            input_dim,
            model_dim: 256,
            layers: 2,
            heads: 4,
            feedforward_dim: 1024,
            max_len: 512,
            use_positional: true,
        }
    }

    /// Small architecture for experiments that must run in minutes.
    pub fn desk_scale(input_dim: usize) -> Self {
        Self {
            input_dim,
            model_dim: 64,
            layers: 1,
            heads: 2,
            feedforward_dim: 128,
            max_len: 256,
            use_positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.model_dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.feedforward_dim == 0
            || self.max_len == 0
        {
            return Err(CoreError::Config("encoder dims must all be >= 1".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Weight,
    Bias,
    Gain,
    Positional,
}

#[derive(Debug, Clone)]
struct TensorSpec {
    offset: usize,
    rows: usize,
    cols: usize,
    kind: ParamKind,
}

impl TensorSpec {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Tensor order inside one encoder's parameter region: input projection,
/// positional table, then per layer: attention (q, k, v, o), first layer
/// norm, feed-forward pair, second layer norm.
#[derive(Debug, Clone)]
struct EncoderLayout {
    tensors: Vec<TensorSpec>,
    len: usize,
}

const PER_LAYER: usize = 16;
const IDX_INPUT_W: usize = 0;
const IDX_INPUT_B: usize = 1;
const IDX_POS: usize = 2;
const IDX_WQ: usize = 0;
const IDX_BQ: usize = 1;
const IDX_WK: usize = 2;
const IDX_BK: usize = 3;
const IDX_WV: usize = 4;
const IDX_BV: usize = 5;
const IDX_WO: usize = 6;
const IDX_BO: usize = 7;
const IDX_LN1_G: usize = 8;
const IDX_LN1_B: usize = 9;
const IDX_FF1_W: usize = 10;
const IDX_FF1_B: usize = 11;
const IDX_FF2_W: usize = 12;
const IDX_FF2_B: usize = 13;
const IDX_LN2_G: usize = 14;
const IDX_LN2_B: usize = 15;

impl EncoderLayout {
    fn new(cfg: &EncoderConfig, base: usize) -> Self {
        let d = cfg.model_dim;
        let ff = cfg.feedforward_dim;
        let mut tensors = Vec::new();
        let mut offset = base;
        let push = |rows: usize, cols: usize, kind: ParamKind, offset: &mut usize| {
            let spec = TensorSpec {
                offset: *offset,
                rows,
                cols,
                kind,
            };
            *offset += spec.len();
            spec
        };
        tensors.push(push(cfg.input_dim, d, ParamKind::Weight, &mut offset));
        tensors.push(push(1, d, ParamKind::Bias, &mut offset));
        tensors.push(push(cfg.max_len, d, ParamKind::Positional, &mut offset));
        for _ in 0..cfg.layers {
            for _ in 0..4 {
                tensors.push(push(d, d, ParamKind::Weight, &mut offset));
                tensors.push(push(1, d, ParamKind::Bias, &mut offset));
            }
            tensors.push(push(1, d, ParamKind::Gain, &mut offset));
            tensors.push(push(1, d, ParamKind::Bias, &mut offset));
            tensors.push(push(d, ff, ParamKind::Weight, &mut offset));
            tensors.push(push(1, ff, ParamKind::Bias, &mut offset));
            tensors.push(push(ff, d, ParamKind::Weight, &mut offset));
            tensors.push(push(1, d, ParamKind::Bias, &mut offset));
            tensors.push(push(1, d, ParamKind::Gain, &mut offset));
            tensors.push(push(1, d, ParamKind::Bias, &mut offset));
        }
        let len = offset - base;
        Self { tensors, len }
    }

    fn top(&self, idx: usize) -> &TensorSpec {
        &self.tensors[idx]
    }

    fn layer(&self, l: usize, idx: usize) -> &TensorSpec {
        &self.tensors[3 + l * PER_LAYER + idx]
    }
}

/// All trainable weights of both encoders in one flat buffer (melody region
/// first, then lyrics).
#[derive(Debug, Clone)]
pub struct ParameterSet<T> {
    melody_cfg: EncoderConfig,
    lyrics_cfg: EncoderConfig,
    melody_layout: EncoderLayout,
    lyrics_layout: EncoderLayout,
    data: Vec<T>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn melody_config(&self) -> &EncoderConfig {
        &self.melody_cfg
    }

    pub fn lyrics_config(&self) -> &EncoderConfig {
        &self.lyrics_cfg
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&x| num_traits::NumCast::from(x).expect("finite parameter"))
            .collect()
    }

    /// Rebuild a parameter set from checkpointed values.
    pub fn from_f64_vec(
        melody_cfg: EncoderConfig,
        lyrics_cfg: EncoderConfig,
        values: &[f64],
    ) -> Result<Self> {
        let mut set = init_encoders(melody_cfg, lyrics_cfg, 0)?;
        if values.len() != set.data.len() {
            return Err(CoreError::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, configs need {}",
                values.len(),
                set.data.len()
            )));
        }
        for (slot, &v) in set.data.iter_mut().zip(values) {
            *slot = real(v);
        }
        Ok(set)
    }

    fn layout(&self, side: Side) -> &EncoderLayout {
        match side {
            Side::Melody => &self.melody_layout,
            Side::Lyrics => &self.lyrics_layout,
        }
    }

    fn config(&self, side: Side) -> &EncoderConfig {
        match side {
            Side::Melody => &self.melody_cfg,
            Side::Lyrics => &self.lyrics_cfg,
        }
    }

    fn tensor(&self, spec: &TensorSpec) -> &[T] {
        &self.data[spec.offset..spec.offset + spec.len()]
    }
}

/// Deterministically initialize both encoders from a seed: scaled-uniform
/// weights, zero biases, unit gains, small uniform positional rows.
pub fn init_encoders<T: Scalar>(
    melody_cfg: EncoderConfig,
    lyrics_cfg: EncoderConfig,
    seed: u64,
) -> Result<ParameterSet<T>> {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    melody_cfg.validate()?;
    lyrics_cfg.validate()?;
    if melody_cfg.model_dim != lyrics_cfg.model_dim {
        return Err(CoreError::Config(format!(
            "encoders must share model_dim: {} vs {}",
            melody_cfg.model_dim, lyrics_cfg.model_dim
        )));
    }

    let melody_layout = EncoderLayout::new(&melody_cfg, 0);
    let lyrics_layout = EncoderLayout::new(&lyrics_cfg, melody_layout.len);
    let total = melody_layout.len + lyrics_layout.len;
    let mut data = vec![T::zero(); total];

    let mut rng = StdRng::seed_from_u64(seed);
    for layout in [&melody_layout, &lyrics_layout] {
        for spec in &layout.tensors {
            let slot = &mut data[spec.offset..spec.offset + spec.len()];
            match spec.kind {
                ParamKind::Weight => {
                    let a = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                    for x in slot {
                        *x = real(rng.gen_range(-a..a));
                    }
                }
                ParamKind::Positional => {
                    for x in slot {
                        *x = real(rng.gen_range(-0.02..0.02));
                    }
                }
                ParamKind::Bias => {}
                ParamKind::Gain => {
                    for x in slot {
                        *x = T::one();
                    }
                }
            }
        }
    }

    Ok(ParameterSet {
        melody_cfg,
        lyrics_cfg,
        melody_layout,
        lyrics_layout,
        data,
    })
}

struct LnCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
    out: Matrix<T>,
}

struct LayerCache<T> {
    input: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    concat: Matrix<T>,
    ln1: LnCache<T>,
    ff_pre: Matrix<T>,
    ff_act: Matrix<T>,
    ln2: LnCache<T>,
}

/// Forward-pass intermediates retained for the backward pass.
pub struct EncoderCache<T> {
    side: Side,
    features: Matrix<T>,
    layers: Vec<LayerCache<T>>,
    row_norms: Vec<T>,
    output: Matrix<T>,
}

impl<T: Scalar> EncoderCache<T> {
    pub fn output(&self) -> &EmbeddingSequence<T> {
        &self.output
    }

    pub fn side(&self) -> Side {
        self.side
    }
}

fn layer_norm_forward<T: Scalar>(x: &Matrix<T>, gain: &[T], bias: &[T]) -> LnCache<T> {
    let (l, d) = (x.rows(), x.cols());
    let dn: T = real(d as f64);
    let eps: T = real(LN_EPS);
    let mut xhat = Matrix::zeros(l, d);
    let mut out = Matrix::zeros(l, d);
    let mut inv_std = Vec::with_capacity(l);
    for r in 0..l {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = (var + eps).sqrt().recip();
        inv_std.push(inv);
        for c in 0..d {
            let h = (x.at(r, c) - mean) * inv;
            *xhat.at_mut(r, c) = h;
            *out.at_mut(r, c) = gain[c] * h + bias[c];
        }
    }
    LnCache { xhat, inv_std, out }
}

/// Backward through layer norm; returns dx and accumulates dgain/dbias.
fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    gain: &[T],
    dy: &Matrix<T>,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Matrix<T> {
    let (l, d) = (dy.rows(), dy.cols());
    let dn: T = real(d as f64);
    let mut dx = Matrix::zeros(l, d);
    for r in 0..l {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            let g = dy.at(r, c);
            let xh = cache.xhat.at(r, c);
            dgain[c] += g * xh;
            dbias[c] += g;
            let dxh = g * gain[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= dn;
        mean_dxhat_xhat /= dn;
        let inv = cache.inv_std[r];
        for c in 0..d {
            let dxh = dy.at(r, c) * gain[c];
            *dx.at_mut(r, c) = inv * (dxh - mean_dxhat - cache.xhat.at(r, c) * mean_dxhat_xhat);
        }
    }
    dx
}

fn softmax_rows<T: Scalar>(scores: &mut Matrix<T>) {
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn head_slice<T: Scalar>(m: &Matrix<T>, head: usize, dh: usize) -> Matrix<T> {
    Matrix::from_fn(m.rows(), dh, |r, c| m.at(r, head * dh + c))
}

fn add_head_slice<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>, head: usize, dh: usize) {
    for r in 0..src.rows() {
        for c in 0..dh {
            *dst.at_mut(r, head * dh + c) += src.at(r, c);
        }
    }
}

fn linear<T: Scalar>(x: &Matrix<T>, w: &[T], b: &[T], out_dim: usize) -> Matrix<T> {
    let mut out = mm(x.data(), x.rows(), x.cols(), w, out_dim);
    add_bias_rows(&mut out, x.rows(), out_dim, b);
    Matrix::from_vec(x.rows(), out_dim, out)
}

/// Accumulate one column-sum into a bias-gradient slice.
fn add_colsum<T: Scalar>(gb: &mut [T], m: &Matrix<T>) {
    for r in 0..m.rows() {
        for (slot, &v) in gb.iter_mut().zip(m.row(r)) {
            *slot += v;
        }
    }
}

/// Run one encoder, recording the cache needed for [`encode_backward`].
pub fn encode_with_cache<T: Scalar>(
    params: &ParameterSet<T>,
    features: &Matrix<T>,
    side: Side,
) -> Result<EncoderCache<T>> {
    let cfg = params.config(side);
    let layout = params.layout(side);
    let l = features.rows();
    if l == 0 {
        return Err(CoreError::Shape("cannot encode an empty sequence".into()));
    }
    if features.cols() != cfg.input_dim {
        return Err(CoreError::Shape(format!(
            "feature width {} does not match encoder input_dim {}",
            features.cols(),
            cfg.input_dim
        )));
    }
    if l > cfg.max_len {
        return Err(CoreError::Shape(format!(
            "sequence length {l} exceeds positional capacity {}",
            cfg.max_len
        )));
    }
    let d = cfg.model_dim;
    let dh = d / cfg.heads;
    let scale: T = real(1.0 / (dh as f64).sqrt());

    let mut h = linear(
        features,
        params.tensor(layout.top(IDX_INPUT_W)),
        params.tensor(layout.top(IDX_INPUT_B)),
        d,
    );
    if cfg.use_positional {
        let pos = params.tensor(layout.top(IDX_POS));
        for r in 0..l {
            for c in 0..d {
                *h.at_mut(r, c) += pos[r * d + c];
            }
        }
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for li in 0..cfg.layers {
        let input = h.clone();
        let q = linear(
            &input,
            params.tensor(layout.layer(li, IDX_WQ)),
            params.tensor(layout.layer(li, IDX_BQ)),
            d,
        );
        let k = linear(
            &input,
            params.tensor(layout.layer(li, IDX_WK)),
            params.tensor(layout.layer(li, IDX_BK)),
            d,
        );
        let v = linear(
            &input,
            params.tensor(layout.layer(li, IDX_WV)),
            params.tensor(layout.layer(li, IDX_BV)),
            d,
        );

        let mut probs = Vec::with_capacity(cfg.heads);
        let mut concat = Matrix::zeros(l, d);
        for head in 0..cfg.heads {
            let qh = head_slice(&q, head, dh);
            let kh = head_slice(&k, head, dh);
            let vh = head_slice(&v, head, dh);
            let mut scores = Matrix::from_vec(l, l, mm_nt(qh.data(), l, dh, kh.data(), l));
            for s in scores.data_mut() {
                *s *= scale;
            }
            softmax_rows(&mut scores);
            let oh = Matrix::from_vec(l, dh, mm(scores.data(), l, l, vh.data(), dh));
            add_head_slice(&mut concat, &oh, head, dh);
            probs.push(scores);
        }

        let attn_out = linear(
            &concat,
            params.tensor(layout.layer(li, IDX_WO)),
            params.tensor(layout.layer(li, IDX_BO)),
            d,
        );
        let mut r1 = input.clone();
        for (dst, src) in r1.data_mut().iter_mut().zip(attn_out.data()) {
            *dst += *src;
        }
        let ln1 = layer_norm_forward(
            &r1,
            params.tensor(layout.layer(li, IDX_LN1_G)),
            params.tensor(layout.layer(li, IDX_LN1_B)),
        );

        let ff_pre = linear(
            &ln1.out,
            params.tensor(layout.layer(li, IDX_FF1_W)),
            params.tensor(layout.layer(li, IDX_FF1_B)),
            cfg.feedforward_dim,
        );
        let mut ff_act = ff_pre.clone();
        for x in ff_act.data_mut() {
            if *x < T::zero() {
                *x = T::zero();
            }
        }
        let ff_out = linear(
            &ff_act,
            params.tensor(layout.layer(li, IDX_FF2_W)),
            params.tensor(layout.layer(li, IDX_FF2_B)),
            d,
        );
        let mut r2 = ln1.out.clone();
        for (dst, src) in r2.data_mut().iter_mut().zip(ff_out.data()) {
            *dst += *src;
        }
        let ln2 = layer_norm_forward(
            &r2,
            params.tensor(layout.layer(li, IDX_LN2_G)),
            params.tensor(layout.layer(li, IDX_LN2_B)),
        );
        h = ln2.out.clone();

        layers.push(LayerCache {
            input,
            q,
            k,
            v,
            probs,
            concat,
            ln1,
            ff_pre,
            ff_act,
            ln2,
        });
    }

    let mut output = h;
    let mut row_norms = Vec::with_capacity(l);
    let floor: T = real(1e-12);
    for r in 0..l {
        let norm = output
            .row(r)
            .iter()
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
            .max(floor);
        row_norms.push(norm);
        for x in output.row_mut(r) {
            *x /= norm;
        }
    }

    Ok(EncoderCache {
        side,
        features: features.clone(),
        layers,
        row_norms,
        output,
    })
}

/// Encode a feature sequence into L2-normalized embeddings.
pub fn encode<T: Scalar>(
    params: &ParameterSet<T>,
    features: &Matrix<T>,
    side: Side,
) -> Result<EmbeddingSequence<T>> {
    Ok(encode_with_cache(params, features, side)?.output)
}

/// Accumulate parameter gradients for one recorded forward pass given the
/// upstream gradient on the embedding rows. `grads` must have the full
/// parameter-buffer length.
pub fn encode_backward<T: Scalar>(
    params: &ParameterSet<T>,
    cache: &EncoderCache<T>,
    d_embeddings: &Matrix<T>,
    grads: &mut [T],
) {
    assert_eq!(grads.len(), params.param_count(), "gradient buffer size");
    let side = cache.side;
    let cfg = params.config(side);
    let layout = params.layout(side);
    let l = cache.features.rows();
    let d = cfg.model_dim;
    let dh = d / cfg.heads;
    let scale: T = real(1.0 / (dh as f64).sqrt());

    // Backward through row-wise L2 normalization.
    let mut dcur = Matrix::zeros(l, d);
    for r in 0..l {
        let norm = cache.row_norms[r];
        let y = cache.output.row(r);
        let dy = d_embeddings.row(r);
        let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
        for c in 0..d {
            *dcur.at_mut(r, c) = (dy[c] - y[c] * dot) / norm;
        }
    }

    for li in (0..cfg.layers).rev() {
        let lc = &cache.layers[li];

        // Second layer norm.
        let mut dgain2 = vec![T::zero(); d];
        let mut dbias2 = vec![T::zero(); d];
        let dr2 = layer_norm_backward(
            &lc.ln2,
            params.tensor(layout.layer(li, IDX_LN2_G)),
            &dcur,
            &mut dgain2,
            &mut dbias2,
        );
        {
            let spec = layout.layer(li, IDX_LN2_G);
            for (slot, v) in grads[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(&dgain2)
            {
                *slot += *v;
            }
            let spec = layout.layer(li, IDX_LN2_B);
            for (slot, v) in grads[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(&dbias2)
            {
                *slot += *v;
            }
        }

        // Feed-forward branch of r2 = ln1.out + ff2(relu(ff1(ln1.out))).
        let ff = cfg.feedforward_dim;
        let w2 = params.tensor(layout.layer(li, IDX_FF2_W));
        let d_act = Matrix::from_vec(l, ff, mm_nt(dr2.data(), l, d, w2, ff));
        {
            let dw2 = mm_tn(lc.ff_act.data(), l, ff, dr2.data(), d);
            let spec = layout.layer(li, IDX_FF2_W);
            for (slot, v) in grads[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(&dw2)
            {
                *slot += *v;
            }
            let spec = layout.layer(li, IDX_FF2_B);
            add_colsum(&mut grads[spec.offset..spec.offset + spec.len()], &dr2);
        }
        let mut d_pre = d_act;
        for (g, &pre) in d_pre.data_mut().iter_mut().zip(lc.ff_pre.data()) {
            if pre <= T::zero() {
                *g = T::zero();
            }
        }
        let w1 = params.tensor(layout.layer(li, IDX_FF1_W));
        let mut dn1 = Matrix::from_vec(l, d, mm_nt(d_pre.data(), l, ff, w1, d));
        {
            let dw1 = mm_tn(lc.ln1.out.data(), l, d, d_pre.data(), ff);
            let spec = layout.layer(li, IDX_FF1_W);
            for (slot, v) in grads[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(&dw1)
            {
                *slot += *v;
            }
            let spec = layout.layer(li, IDX_FF1_B);
            add_colsum(&mut grads[spec.offset..spec.offset + spec.len()], &d_pre);
        }
        // Residual contribution into ln1 output.
        for (dst, src) in dn1.data_mut().iter_mut().zip(dr2.data()) {
            *dst += *src;
        }

        // First layer norm.
        let mut dgain1 = vec![T::zero(); d];
        let mut dbias1 = vec![T::zero(); d];
        let dr1 = layer_norm_backward(
            &lc.ln1,
            params.tensor(layout.layer(li, IDX_LN1_G)),
            &dn1,
            &mut dgain1,
            &mut dbias1,
        );
        {
            let spec = layout.layer(li, IDX_LN1_G);
            for (slot, v) in grads[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(&dgain1)
            {
                *slot += *v;
            }
            let spec = layout.layer(li, IDX_LN1_B);
            for (slot, v) in grads[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(&dbias1)
            {
                *slot += *v;
            }
        }

        // Attention output projection of r1 = input + wo(concat).
        let wo = params.tensor(layout.layer(li, IDX_WO));
        let d_concat = Matrix::from_vec(l, d, mm_nt(dr1.data(), l, d, wo, d));
        {
            let dwo = mm_tn(lc.concat.data(), l, d, dr1.data(), d);
            let spec = layout.layer(li, IDX_WO);
            for (slot, v) in grads[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(&dwo)
            {
                *slot += *v;
            }
            let spec = layout.layer(li, IDX_BO);
            add_colsum(&mut grads[spec.offset..spec.offset + spec.len()], &dr1);
        }

        // Attention heads.
        let mut dq = Matrix::zeros(l, d);
        let mut dk = Matrix::zeros(l, d);
        let mut dv = Matrix::zeros(l, d);
        for head in 0..cfg.heads {
            let p = &lc.probs[head];
            let doh = head_slice(&d_concat, head, dh);
            let vh = head_slice(&lc.v, head, dh);
            let qh = head_slice(&lc.q, head, dh);
            let kh = head_slice(&lc.k, head, dh);

            let dp = Matrix::from_vec(l, l, mm_nt(doh.data(), l, dh, vh.data(), l));
            let dvh = Matrix::from_vec(l, dh, mm_tn(p.data(), l, l, doh.data(), dh));

            let mut ds = Matrix::zeros(l, l);
            for r in 0..l {
                let dot: T = dp.row(r).iter().zip(p.row(r)).map(|(&a, &b)| a * b).sum();
                for c in 0..l {
                    *ds.at_mut(r, c) = p.at(r, c) * (dp.at(r, c) - dot);
                }
            }
            for x in ds.data_mut() {
                *x *= scale;
            }

            let dqh = Matrix::from_vec(l, dh, mm(ds.data(), l, l, kh.data(), dh));
            let dkh = Matrix::from_vec(l, dh, mm_tn(ds.data(), l, l, qh.data(), dh));
            add_head_slice(&mut dq, &dqh, head, dh);
            add_head_slice(&mut dk, &dkh, head, dh);
            add_head_slice(&mut dv, &dvh, head, dh);
        }

        // Projections back onto the block input (residual included).
        let mut d_input = dr1;
        for (widx, bidx, dmat) in [
            (IDX_WQ, IDX_BQ, &dq),
            (IDX_WK, IDX_BK, &dk),
            (IDX_WV, IDX_BV, &dv),
        ] {
            let w = params.tensor(layout.layer(li, widx));
            let dx = mm_nt(dmat.data(), l, d, w, d);
            for (dst, src) in d_input.data_mut().iter_mut().zip(&dx) {
                *dst += *src;
            }
            let dw = mm_tn(lc.input.data(), l, d, dmat.data(), d);
            let spec = layout.layer(li, widx);
            for (slot, v) in grads[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(&dw)
            {
                *slot += *v;
            }
            let spec = layout.layer(li, bidx);
            add_colsum(&mut grads[spec.offset..spec.offset + spec.len()], dmat);
        }

        dcur = d_input;
    }

    if cfg.use_positional {
        let spec = layout.top(IDX_POS);
        let gp = &mut grads[spec.offset..spec.offset + spec.len()];
        for r in 0..l {
            for c in 0..d {
                gp[r * d + c] += dcur.at(r, c);
            }
        }
    }

    {
        let dw = mm_tn(cache.features.data(), l, cfg.input_dim, dcur.data(), d);
        let spec = layout.top(IDX_INPUT_W);
        for (slot, v) in grads[spec.offset..spec.offset + spec.len()]
            .iter_mut()
            .zip(&dw)
        {
            *slot += *v;
        }
        let spec = layout.top(IDX_INPUT_B);
        add_colsum(&mut grads[spec.offset..spec.offset + spec.len()], &dcur);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            model_dim: 8,
            layers: 1,
            heads: 1,
            feedforward_dim: 16,
            max_len: 8,
            use_positional: true,
        }
    }

    fn random_features(rng: &mut StdRng, l: usize, dim: usize) -> Matrix<f64> {
        Matrix::from_fn(l, dim, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let p1 = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 5).unwrap();
        let p2 = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 5).unwrap();
        assert_eq!(p1.as_slice(), p2.as_slice());
        let p3 = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 6).unwrap();
        assert_ne!(p1.as_slice(), p3.as_slice());
    }

    #[test]
    fn reference_param_count_near_paper_total() {
        let p = init_encoders::<f64>(
            EncoderConfig::reference(177),
            EncoderConfig::reference(43),
            0,
        )
        .unwrap();
        let count = p.param_count() as f64;
        assert!(
            (count - 3.7e6).abs() / 3.7e6 < 0.10,
            "parameter count {count} outside 10% of 3.7M"
        );
    }

    #[test]
    fn mismatched_model_dim_rejected() {
        let mut lyr = tiny_cfg(3);
        lyr.model_dim = 16;
        assert!(init_encoders::<f64>(tiny_cfg(4), lyr, 0).is_err());
    }

    #[test]
    fn outputs_are_unit_norm_and_length_preserving() {
        let params = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 7).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let feats = random_features(&mut rng, 7, 4);
        let emb = encode(&params, &feats, Side::Melody).unwrap();
        assert_eq!(emb.rows(), 7);
        assert_eq!(emb.cols(), 8);
        for r in 0..emb.rows() {
            let norm: f64 = emb.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let params = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 7).unwrap();
        let feats = Matrix::<f64>::zeros(0, 4);
        assert!(encode(&params, &feats, Side::Melody).is_err());
    }

    #[test]
    fn wrong_width_rejected() {
        let params = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 7).unwrap();
        let feats = Matrix::<f64>::zeros(2, 5);
        assert!(encode(&params, &feats, Side::Melody).is_err());
    }

    #[test]
    fn permutation_equivariant_without_positional() {
        let mut cfg = tiny_cfg(4);
        cfg.use_positional = false;
        let params = init_encoders::<f64>(cfg, tiny_cfg(3), 9).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let feats = random_features(&mut rng, 5, 4);
        let emb = encode(&params, &feats, Side::Melody).unwrap();
        let swapped = Matrix::from_fn(5, 4, |r, c| {
            let rr = match r {
                1 => 3,
                3 => 1,
                other => other,
            };
            feats.at(rr, c)
        });
        let emb_swapped = encode(&params, &swapped, Side::Melody).unwrap();
        for c in 0..emb.cols() {
            assert!((emb.at(1, c) - emb_swapped.at(3, c)).abs() < 1e-12);
            assert!((emb.at(3, c) - emb_swapped.at(1, c)).abs() < 1e-12);
            assert!((emb.at(0, c) - emb_swapped.at(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 11).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let feats = random_features(&mut rng, 6, 4);
        let a = encode(&params, &feats, Side::Melody).unwrap();
        let b = encode(&params, &feats, Side::Melody).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let params = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 13).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        let feats = random_features(&mut rng, 4, 4);
        let cache = encode_with_cache(&params, &feats, Side::Melody).unwrap();
        let mut grads = vec![0.0; params.param_count()];
        encode_backward(&params, &cache, &Matrix::zeros(4, 8), &mut grads);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_deterministic() {
        let params = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 15).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let feats = random_features(&mut rng, 4, 4);
        let upstream = random_features(&mut rng, 4, 8);
        let run = || {
            let cache = encode_with_cache(&params, &feats, Side::Melody).unwrap();
            let mut grads = vec![0.0; params.param_count()];
            encode_backward(&params, &cache, &upstream, &mut grads);
            grads
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_matches_finite_differences_on_sum_loss() {
        // Loss = sum of embedding entries over both sides.
        let mut params = init_encoders::<f64>(tiny_cfg(4), tiny_cfg(3), 17).unwrap();
        let mut rng = StdRng::seed_from_u64(6);
        let mel = random_features(&mut rng, 5, 4);
        let lyr = random_features(&mut rng, 4, 3);

        let loss = |p: &ParameterSet<f64>| -> f64 {
            let a = encode(p, &mel, Side::Melody).unwrap();
            let b = encode(p, &lyr, Side::Lyrics).unwrap();
            a.iter().sum::<f64>() + b.iter().sum::<f64>()
        };

        let mut grads = vec![0.0; params.param_count()];
        let cache_m = encode_with_cache(&params, &mel, Side::Melody).unwrap();
        let ones_m = Matrix::from_fn(5, 8, |_, _| 1.0);
        encode_backward(&params, &cache_m, &ones_m, &mut grads);
        let cache_l = encode_with_cache(&params, &lyr, Side::Lyrics).unwrap();
        let ones_l = Matrix::from_fn(4, 8, |_, _| 1.0);
        encode_backward(&params, &cache_l, &ones_l, &mut grads);

        let step = 1e-4;
        let n = params.param_count();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = params.as_slice()[i];
            params.as_mut_slice()[i] = orig + step;
            let up = loss(&params);
            params.as_mut_slice()[i] = orig - step;
            let down = loss(&params);
            params.as_mut_slice()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(grads[i], fd));
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }
}
