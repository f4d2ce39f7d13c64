//! Contrastive alignment training: length-regularized soft-DTW costs,
//! batch-wise Z-score normalization, the symmetric InfoNCE-style loss over
//! alignment costs, shuffled negative sampling, and the optimization loop
//! (decoupled-weight-decay Adam, cosine schedule with linear warmup,
//! gradient clipping, best-validation checkpointing).

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{cost_matrix, sdtw_backward, sdtw_forward, SoftAlignment};
use crate::corpus::Segment;
use crate::encoder::{
    encode_backward, encode_with_cache, init_encoders, EncoderCache, EncoderConfig,
    ParameterSet, Side,
};
use crate::error::{CoreError, Result};
use crate::matrix::{mm, mm_tn, Matrix};
use crate::melody::{melody_feature_matrix, QuantizerStats};
use crate::phonetics::sylphone_feature_matrix;
use crate::scalar::{real, real_of_usize, Scalar};

/// Training hyperparameters. Defaults are the reference recipe; the
/// temperature and weight decay are tunable knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub gamma: f64,
    /// Length-regularization weight in `[0, 1]`.
    pub alpha: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Additive guard against division by zero in the length penalty.
    pub epsilon: f64,
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            gamma: 1.0,
            alpha: 0.5,
            tau: 0.1,
            epsilon: 1e-8,
            base_lr: 1e-5,
            epochs: 20,
            warmup_epochs: 2,
            grad_clip_norm: 1.0,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoreError::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.tau <= 0.0 {
            return Err(CoreError::Config("tau must be > 0".into()));
        }
        if self.gamma <= 0.0 {
            return Err(CoreError::Config("gamma must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Config("batch_size must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be >= 1".into()));
        }
        if self.base_lr <= 0.0 || self.grad_clip_norm <= 0.0 || self.epsilon <= 0.0 {
            return Err(CoreError::Config(
                "base_lr, grad_clip_norm, and epsilon must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Featurized melody-lyrics pair ready for the encoders.
#[derive(Debug, Clone)]
pub struct TrainItem<T> {
    pub id: String,
    pub melody: Matrix<T>,
    pub lyrics: Matrix<T>,
}

/// Build a training item from a segment and the frozen quantizer stats.
pub fn featurize_segment<T: Scalar>(seg: &Segment, stats: &QuantizerStats) -> TrainItem<T> {
    TrainItem {
        id: seg.segment_id.clone(),
        melody: melody_feature_matrix(&seg.notes, stats),
        lyrics: sylphone_feature_matrix(&seg.sylphones),
    }
}

/// Length-regularized alignment costs for one query against its candidate
/// set: `(1-α)·D + α·(len_diff / (max len_diff + ε))·Δ` with
/// `Δ = max D - min D` over the candidates.
pub fn regularized_cost<T: Scalar>(raw: &[T], len_diffs: &[T], alpha: T, epsilon: T) -> Vec<T> {
    assert_eq!(raw.len(), len_diffs.len(), "raw/len_diff length mismatch");
    if raw.is_empty() {
        return Vec::new();
    }
    let max_d = raw.iter().copied().fold(T::neg_infinity(), T::max);
    let min_d = raw.iter().copied().fold(T::infinity(), T::min);
    let delta = max_d - min_d;
    let max_diff = len_diffs.iter().copied().fold(T::neg_infinity(), T::max);
    let one = T::one();
    raw.iter()
        .zip(len_diffs)
        .map(|(&d, &ld)| (one - alpha) * d + alpha * (ld / (max_diff + epsilon)) * delta)
        .collect()
}

/// Subgradient of [`regularized_cost`] with respect to the raw costs. The
/// spread `Δ = D[argmax] - D[argmin]` routes gradient to the first max and
/// first min entries.
fn regularized_cost_backward<T: Scalar>(
    raw: &[T],
    len_diffs: &[T],
    alpha: T,
    epsilon: T,
    upstream: &[T],
) -> Vec<T> {
    let n = raw.len();
    let mut out = vec![T::zero(); n];
    if n == 0 {
        return out;
    }
    let mut argmax = 0;
    let mut argmin = 0;
    for k in 1..n {
        if raw[k] > raw[argmax] {
            argmax = k;
        }
        if raw[k] < raw[argmin] {
            argmin = k;
        }
    }
    let max_diff = len_diffs.iter().copied().fold(T::neg_infinity(), T::max);
    let one = T::one();
    let mut weighted_sum = T::zero();
    for ((&g, &ld), slot) in upstream.iter().zip(len_diffs).zip(out.iter_mut()) {
        *slot = (one - alpha) * g;
        weighted_sum += g * alpha * (ld / (max_diff + epsilon));
    }
    out[argmax] += weighted_sum;
    out[argmin] -= weighted_sum;
    out
}

/// Spreads at or below this fraction of the value magnitude are treated as
/// zero: deviations there are dominated by rounding noise, and normalizing
/// them amplifies that noise by 1/std.
const ZSCORE_DEGENERATE_REL: f64 = 1e-8;

fn zscore_stats<T: Scalar>(values: &[T]) -> (T, T, bool) {
    let nt: T = real_of_usize(values.len());
    let mean = values.iter().copied().sum::<T>() / nt;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
    let std = var.sqrt();
    let scale = values.iter().fold(T::one(), |acc, &v| acc.max(v.abs()));
    let degenerate = std <= real::<T>(ZSCORE_DEGENERATE_REL) * scale;
    (mean, std, degenerate)
}

/// Z-score one value slice: mean 0, population std 1. A degenerate slice
/// collapses to zeros.
fn zscore_slice<T: Scalar>(values: &[T]) -> Vec<T> {
    let (mean, std, degenerate) = zscore_stats(values);
    if degenerate {
        return vec![T::zero(); values.len()];
    }
    values.iter().map(|&v| (v - mean) / std).collect()
}

fn zscore_slice_backward<T: Scalar>(values: &[T], upstream: &[T]) -> Vec<T> {
    let n = values.len();
    // With two candidates the normalized values are locked at (+1, -1) by
    // ordering, so the derivative vanishes almost everywhere; degenerate
    // slices carry no gradient either.
    let (mean, std, degenerate) = zscore_stats(values);
    if degenerate || n <= 2 {
        return vec![T::zero(); n];
    }
    let nt: T = real_of_usize(n);
    let y: Vec<T> = values.iter().map(|&v| (v - mean) / std).collect();
    let g_mean = upstream.iter().copied().sum::<T>() / nt;
    let gy_mean = upstream.iter().zip(&y).map(|(&g, &yy)| g * yy).sum::<T>() / nt;
    upstream
        .iter()
        .zip(&y)
        .map(|(&g, &yy)| (g - g_mean - yy * gy_mean) / std)
        .collect()
}

/// Z-score normalize each row of a cost grid (mean 0, population std 1
/// along candidates).
pub fn zscore_rows<T: Scalar>(grid: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(grid.rows(), grid.cols());
    for r in 0..grid.rows() {
        let z = zscore_slice(grid.row(r));
        out.row_mut(r).copy_from_slice(&z);
    }
    out
}

/// Column-wise counterpart of [`zscore_rows`], used for the second loss term.
pub fn zscore_cols<T: Scalar>(grid: &Matrix<T>) -> Matrix<T> {
    let (b, c) = (grid.rows(), grid.cols());
    let mut out = Matrix::zeros(b, c);
    for j in 0..c {
        let col: Vec<T> = (0..b).map(|i| grid.at(i, j)).collect();
        let z = zscore_slice(&col);
        for i in 0..b {
            *out.at_mut(i, j) = z[i];
        }
    }
    out
}

fn log_softmax_at<T: Scalar>(logits: &[T], idx: usize) -> T {
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
    logits[idx] - lse
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-direction cross-entropy: mean over queries i of
/// `-log softmax_j(-grid[i][j]/τ)` at `j = i`.
fn rows_ce<T: Scalar>(grid: &Matrix<T>, tau: T) -> T {
    let b = grid.rows();
    let bt: T = real_of_usize(b);
    let mut total = T::zero();
    for i in 0..b {
        let logits: Vec<T> = grid.row(i).iter().map(|&v| -v / tau).collect();
        total += -log_softmax_at(&logits, i);
    }
    total / bt
}

fn cols_ce<T: Scalar>(grid: &Matrix<T>, tau: T) -> T {
    let b = grid.cols();
    let bt: T = real_of_usize(b);
    let mut total = T::zero();
    for j in 0..b {
        let logits: Vec<T> = (0..grid.rows()).map(|i| -grid.at(i, j) / tau).collect();
        total += -log_softmax_at(&logits, j);
    }
    total / bt
}

/// Gradient of [`rows_ce`] with respect to the grid entries.
fn rows_ce_backward<T: Scalar>(grid: &Matrix<T>, tau: T) -> Matrix<T> {
    let b = grid.rows();
    let bt: T = real_of_usize(b);
    let mut out = Matrix::zeros(b, grid.cols());
    for i in 0..b {
        let logits: Vec<T> = grid.row(i).iter().map(|&v| -v / tau).collect();
        let probs = softmax(&logits);
        for j in 0..grid.cols() {
            let delta = if i == j { T::one() } else { T::zero() };
            *out.at_mut(i, j) = (delta - probs[j]) / (tau * bt);
        }
    }
    out
}

fn cols_ce_backward<T: Scalar>(grid: &Matrix<T>, tau: T) -> Matrix<T> {
    let b = grid.cols();
    let bt: T = real_of_usize(b);
    let mut out = Matrix::zeros(grid.rows(), b);
    for j in 0..b {
        let logits: Vec<T> = (0..grid.rows()).map(|i| -grid.at(i, j) / tau).collect();
        let probs = softmax(&logits);
        for i in 0..grid.rows() {
            let delta = if i == j { T::one() } else { T::zero() };
            *out.at_mut(i, j) = (delta - probs[i]) / (tau * bt);
        }
    }
    out
}

/// Symmetric contrastive alignment loss over a normalized cost grid: the
/// melody-to-lyrics term over rows plus the lyrics-to-melody term over
/// columns.
pub fn cal_loss<T: Scalar>(normalized_grid: &Matrix<T>, tau: T) -> T {
    assert_eq!(
        normalized_grid.rows(),
        normalized_grid.cols(),
        "cal_loss needs a square grid"
    );
    rows_ce(normalized_grid, tau) + cols_ce(normalized_grid, tau)
}

/// Fresh per-item permutations used as in-batch negatives: shuffling a
/// candidate's sylphone (or note) order breaks the correspondence while
/// preserving its multiset and its length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchNegatives {
    pub lyrics_perms: Vec<Vec<usize>>,
    pub melody_perms: Vec<Vec<usize>>,
}

pub fn make_negatives<T: Scalar>(batch: &[TrainItem<T>], rng: &mut StdRng) -> BatchNegatives {
    assert!(batch.len() >= 2, "negative sampling needs a batch of >= 2");
    let mut perm_of = |len: usize| {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(rng);
        idx
    };
    let lyrics_perms = batch.iter().map(|it| perm_of(it.lyrics.rows())).collect();
    let melody_perms = batch.iter().map(|it| perm_of(it.melody.rows())).collect();
    BatchNegatives {
        lyrics_perms,
        melody_perms,
    }
}

fn permute_rows<T: Scalar>(m: &Matrix<T>, perm: &[usize]) -> Matrix<T> {
    assert_eq!(m.rows(), perm.len());
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m.at(perm[r], c))
}

struct PairEval<T> {
    value: T,
    alignment: Option<SoftAlignment<T>>,
}

/// Loss (and optionally parameter gradients) of one contrastive batch with
/// fixed negatives. The rows grid scores each melody against the original
/// paired lyrics (diagonal) and shuffled versions of the other lyrics; the
/// columns grid mirrors this with shuffled melodies.
pub fn batch_loss<T: Scalar>(
    params: &ParameterSet<T>,
    batch: &[TrainItem<T>],
    negatives: &BatchNegatives,
    cfg: &TrainConfig,
    compute_grads: bool,
) -> Result<(T, Option<Vec<T>>)> {
    let b = batch.len();
    assert!(b >= 1, "empty batch");
    assert_eq!(negatives.lyrics_perms.len(), b);
    assert_eq!(negatives.melody_perms.len(), b);
    let gamma: T = real(cfg.gamma);
    let tau: T = real(cfg.tau);
    let alpha: T = real(cfg.alpha);
    let epsilon: T = real(cfg.epsilon);

    let mel_orig: Vec<EncoderCache<T>> = batch
        .iter()
        .map(|it| encode_with_cache(params, &it.melody, Side::Melody))
        .collect::<Result<_>>()?;
    let lyr_orig: Vec<EncoderCache<T>> = batch
        .iter()
        .map(|it| encode_with_cache(params, &it.lyrics, Side::Lyrics))
        .collect::<Result<_>>()?;
    let mel_shuf: Vec<EncoderCache<T>> = batch
        .iter()
        .zip(&negatives.melody_perms)
        .map(|(it, perm)| encode_with_cache(params, &permute_rows(&it.melody, perm), Side::Melody))
        .collect::<Result<_>>()?;
    let lyr_shuf: Vec<EncoderCache<T>> = batch
        .iter()
        .zip(&negatives.lyrics_perms)
        .map(|(it, perm)| encode_with_cache(params, &permute_rows(&it.lyrics, perm), Side::Lyrics))
        .collect::<Result<_>>()?;

    let eval_pair = |x: &EncoderCache<T>, y: &EncoderCache<T>| -> Result<PairEval<T>> {
        let cost = cost_matrix(x.output(), y.output())?;
        let (value, table) = sdtw_forward(&cost, gamma)?;
        let alignment = compute_grads.then(|| sdtw_backward(&table, &cost));
        Ok(PairEval { value, alignment })
    };

    // Rows grid: melody query i against lyrics candidates j.
    let rows_pairs: Vec<PairEval<T>> = (0..b * b)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / b, idx % b);
            let y = if i == j { &lyr_orig[j] } else { &lyr_shuf[j] };
            eval_pair(&mel_orig[i], y)
        })
        .collect::<Result<_>>()?;
    // Columns grid: lyrics query j against melody candidates i.
    let cols_pairs: Vec<PairEval<T>> = (0..b * b)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / b, idx % b);
            let x = if i == j { &mel_orig[i] } else { &mel_shuf[i] };
            eval_pair(x, &lyr_orig[j])
        })
        .collect::<Result<_>>()?;

    let len_diff = |i: usize, j: usize| -> T {
        let n = batch[i].melody.rows() as i64;
        let m = batch[j].lyrics.rows() as i64;
        real((n - m).abs() as f64)
    };

    let raw_rows = Matrix::from_fn(b, b, |i, j| rows_pairs[i * b + j].value);
    let raw_cols = Matrix::from_fn(b, b, |i, j| cols_pairs[i * b + j].value);

    // Rows: regularize per query row, then Z-score per row.
    let mut reg_rows = Matrix::zeros(b, b);
    for i in 0..b {
        let diffs: Vec<T> = (0..b).map(|j| len_diff(i, j)).collect();
        let reg = regularized_cost(raw_rows.row(i), &diffs, alpha, epsilon);
        reg_rows.row_mut(i).copy_from_slice(&reg);
    }
    let z_rows = zscore_rows(&reg_rows);
    // Columns: regularize per query column, then Z-score per column.
    let mut reg_cols = Matrix::zeros(b, b);
    for j in 0..b {
        let col: Vec<T> = (0..b).map(|i| raw_cols.at(i, j)).collect();
        let diffs: Vec<T> = (0..b).map(|i| len_diff(i, j)).collect();
        let reg = regularized_cost(&col, &diffs, alpha, epsilon);
        for i in 0..b {
            *reg_cols.at_mut(i, j) = reg[i];
        }
    }
    let z_cols = zscore_cols(&reg_cols);

    let loss = rows_ce(&z_rows, tau) + cols_ce(&z_cols, tau);
    if !compute_grads {
        return Ok((loss, None));
    }

    // Loss -> normalized grids.
    let dz_rows = rows_ce_backward(&z_rows, tau);
    let dz_cols = cols_ce_backward(&z_cols, tau);

    // Normalized grids -> regularized grids -> raw SDTW grids.
    let mut draw_rows = Matrix::zeros(b, b);
    for i in 0..b {
        let dreg = zscore_slice_backward(reg_rows.row(i), dz_rows.row(i));
        let diffs: Vec<T> = (0..b).map(|j| len_diff(i, j)).collect();
        let draw = regularized_cost_backward(raw_rows.row(i), &diffs, alpha, epsilon, &dreg);
        draw_rows.row_mut(i).copy_from_slice(&draw);
    }
    let mut draw_cols = Matrix::zeros(b, b);
    for j in 0..b {
        let reg_col: Vec<T> = (0..b).map(|i| reg_cols.at(i, j)).collect();
        let dz_col: Vec<T> = (0..b).map(|i| dz_cols.at(i, j)).collect();
        let dreg = zscore_slice_backward(&reg_col, &dz_col);
        let raw_col: Vec<T> = (0..b).map(|i| raw_cols.at(i, j)).collect();
        let diffs: Vec<T> = (0..b).map(|i| len_diff(i, j)).collect();
        let draw = regularized_cost_backward(&raw_col, &diffs, alpha, epsilon, &dreg);
        for i in 0..b {
            *draw_cols.at_mut(i, j) = draw[i];
        }
    }

    // Raw SDTW values -> embedding gradients through cost matrices.
    let zero_like =
        |c: &EncoderCache<T>| Matrix::<T>::zeros(c.output().rows(), c.output().cols());
    let mut d_mel_orig: Vec<Matrix<T>> = mel_orig.iter().map(zero_like).collect();
    let mut d_lyr_orig: Vec<Matrix<T>> = lyr_orig.iter().map(zero_like).collect();
    let mut d_mel_shuf: Vec<Matrix<T>> = mel_shuf.iter().map(zero_like).collect();
    let mut d_lyr_shuf: Vec<Matrix<T>> = lyr_shuf.iter().map(zero_like).collect();

    let accumulate = |x: &EncoderCache<T>,
                      y: &EncoderCache<T>,
                      dx: &mut Matrix<T>,
                      dy: &mut Matrix<T>,
                      eval: &PairEval<T>,
                      upstream: T| {
        let e = eval.alignment.as_ref().expect("gradients requested");
        let (n, m) = (e.rows(), e.cols());
        let d = x.output().cols();
        // dC = upstream * E; dX = -dC·Y, dY = -dCᵀ·X.
        let mut dc = e.clone();
        for v in dc.data_mut() {
            *v *= upstream;
        }
        let dx_add = mm(dc.data(), n, m, y.output().data(), d);
        for (slot, v) in dx.data_mut().iter_mut().zip(&dx_add) {
            *slot -= *v;
        }
        let dy_add = mm_tn(dc.data(), n, m, x.output().data(), d);
        for (slot, v) in dy.data_mut().iter_mut().zip(&dy_add) {
            *slot -= *v;
        }
    };

    for i in 0..b {
        for j in 0..b {
            let g = draw_rows.at(i, j);
            let eval = &rows_pairs[i * b + j];
            if i == j {
                accumulate(
                    &mel_orig[i],
                    &lyr_orig[j],
                    &mut d_mel_orig[i],
                    &mut d_lyr_orig[j],
                    eval,
                    g,
                );
            } else {
                accumulate(
                    &mel_orig[i],
                    &lyr_shuf[j],
                    &mut d_mel_orig[i],
                    &mut d_lyr_shuf[j],
                    eval,
                    g,
                );
            }

            let g = draw_cols.at(i, j);
            let eval = &cols_pairs[i * b + j];
            if i == j {
                accumulate(
                    &mel_orig[i],
                    &lyr_orig[j],
                    &mut d_mel_orig[i],
                    &mut d_lyr_orig[j],
                    eval,
                    g,
                );
            } else {
                accumulate(
                    &mel_shuf[i],
                    &lyr_orig[j],
                    &mut d_mel_shuf[i],
                    &mut d_lyr_orig[j],
                    eval,
                    g,
                );
            }
        }
    }

    // Embedding gradients -> parameter gradients.
    let mut grads = vec![T::zero(); params.param_count()];
    for (cache, d_emb) in mel_orig.iter().zip(&d_mel_orig) {
        encode_backward(params, cache, d_emb, &mut grads);
    }
    for (cache, d_emb) in lyr_orig.iter().zip(&d_lyr_orig) {
        encode_backward(params, cache, d_emb, &mut grads);
    }
    for (cache, d_emb) in mel_shuf.iter().zip(&d_mel_shuf) {
        encode_backward(params, cache, d_emb, &mut grads);
    }
    for (cache, d_emb) in lyr_shuf.iter().zip(&d_lyr_shuf) {
        encode_backward(params, cache, d_emb, &mut grads);
    }

    Ok((loss, Some(grads)))
}

/// Learning rate at a 0-based global step: linear warmup to `base_lr` over
/// the warmup steps, then cosine decay to zero over the remainder.
pub fn learning_rate_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step + 1 - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Adam with decoupled weight decay over the flat parameter buffer.
pub struct AdamW<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: usize,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(param_count: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![T::zero(); param_count],
            v: vec![T::zero(); param_count],
            t: 0,
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
            weight_decay: real(weight_decay),
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] =
                params[i] - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [T], max_norm: T) -> T {
    let norm = grads.iter().map(|&g| g * g).sum::<T>().sqrt();
    if norm > max_norm && norm > T::zero() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Outcome of a training run: the best-validation parameters plus the log.
pub struct TrainOutcome<T> {
    pub params: ParameterSet<T>,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// SplitMix-style derivation of independent RNG substreams.
fn substream(seed: u64, tags: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        h = h.wrapping_add(t).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const TAG_SHUFFLE: u64 = 1;
const TAG_NEGATIVES: u64 = 2;
const TAG_VAL: u64 = 3;

/// Train fresh encoders; see [`train_from`].
pub fn train<T: Scalar>(
    train_items: &[TrainItem<T>],
    val_items: &[TrainItem<T>],
    melody_cfg: EncoderConfig,
    lyrics_cfg: EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let params = init_encoders(melody_cfg, lyrics_cfg, cfg.seed)?;
    train_from(params, train_items, val_items, cfg)
}

/// Run the optimization loop from the given initial parameters. Validation
/// loss is evaluated with fixed per-epoch negative-sampling substreams so
/// checkpoint selection is stable; the parameters with the lowest validation
/// loss are returned.
pub fn train_from<T: Scalar>(
    mut params: ParameterSet<T>,
    train_items: &[TrainItem<T>],
    val_items: &[TrainItem<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let b = cfg.batch_size;
    let steps_per_epoch = train_items.len() / b;
    if steps_per_epoch == 0 {
        return Err(CoreError::Config(format!(
            "batch size {b} exceeds training set size {}",
            train_items.len()
        )));
    }
    if val_items.len() < 2 {
        return Err(CoreError::Config(
            "validation set needs at least 2 items".into(),
        ));
    }
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let clip: T = real(cfg.grad_clip_norm);

    let mut opt = AdamW::<T>::new(params.param_count(), cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterSet<T>)> = None;
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        let mut shuffle_rng =
            StdRng::seed_from_u64(substream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut last_lr = cfg.base_lr;
        for step in 0..steps_per_epoch {
            let batch: Vec<TrainItem<T>> = order[step * b..(step + 1) * b]
                .iter()
                .map(|&idx| train_items[idx].clone())
                .collect();
            let mut neg_rng = StdRng::seed_from_u64(substream(
                cfg.seed,
                &[TAG_NEGATIVES, epoch as u64, step as u64],
            ));
            let negatives = make_negatives(&batch, &mut neg_rng);
            let (loss, grads) = batch_loss(&params, &batch, &negatives, cfg, true)?;
            let loss_f: f64 = num_traits::NumCast::from(loss).unwrap_or(f64::NAN);
            if !loss_f.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "training diverged at epoch {epoch} step {step}: loss {loss_f}"
                )));
            }
            let mut grads = grads.expect("gradients requested");
            clip_grad_norm(&mut grads, clip);
            let lr = learning_rate_at(global_step, total_steps, warmup_steps, cfg.base_lr);
            last_lr = lr;
            opt.step(params.as_mut_slice(), &grads, real(lr));
            epoch_loss += loss_f;
            global_step += 1;
        }
        let train_loss = epoch_loss / steps_per_epoch as f64;

        let val_loss = validation_loss(&params, val_items, cfg, epoch)?;
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: last_lr,
        });
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6}, val_loss {val_loss:.6}, lr {last_lr:.3e}"
        );
        if best.as_ref().is_none_or(|(bv, _, _)| val_loss < *bv) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }

    let (best_val_loss, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        logs,
        best_epoch,
        best_val_loss,
    })
}

/// Mean contrastive loss over the validation set in fixed batch order with
/// an epoch-keyed negative-sampling substream.
pub fn validation_loss<T: Scalar>(
    params: &ParameterSet<T>,
    val_items: &[TrainItem<T>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let b = cfg.batch_size;
    let mut rng = StdRng::seed_from_u64(substream(cfg.seed, &[TAG_VAL, epoch as u64]));
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in val_items.chunks(b) {
        if chunk.len() < 2 {
            continue;
        }
        let negatives = make_negatives(chunk, &mut rng);
        let (loss, _) = batch_loss(params, chunk, &negatives, cfg, false)?;
        let loss_f: f64 = num_traits::NumCast::from(loss).unwrap_or(f64::NAN);
        if !loss_f.is_finite() {
            return Err(CoreError::Numeric(format!(
                "validation loss non-finite at epoch {epoch}"
            )));
        }
        total += loss_f * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        return Err(CoreError::Config(
            "validation set produced no usable batches".into(),
        ));
    }
    Ok(total / count as f64)
}
