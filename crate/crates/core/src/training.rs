//! Multi-positive InfoNCE training of the evidence scorer.
//!
//! The loss for one (video, query) pair is
//! `L = lse(all scores) - lse(positive scores)`, which is
//! `-ln(sum_pos e^s / sum_all e^s)` evaluated without overflow.
//! Gradients are derived by hand through every stage of [`crate::scoring`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, DenseMatrix, Prng};
use crate::scoring::{
    forward, init_scorer, score_frames, FrameEmbedding, QueryEmbedding, ScorerConfig, ScorerParams,
};
use crate::selection::EvidenceSegment;

/// Marks frame `i` (timestamp `i / fps`) positive iff it lies in any closed segment.
pub fn label_frames(segments: &[EvidenceSegment], n_frames: usize, fps: f64) -> Result<Vec<bool>> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "fps must be positive, got {fps}"
        )));
    }
    for s in segments {
        s.validate()?;
    }
    Ok((0..n_frames)
        .map(|i| {
            let t = i as f64 / fps;
            segments.iter().any(|s| s.contains(t))
        })
        .collect())
}

/// Multi-positive InfoNCE. Needs at least one positive and one negative.
pub fn infonce_loss(scores: &[f64], mask: &[bool]) -> Result<f64> {
    if scores.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} scores for a mask of {}",
            scores.len(),
            mask.len()
        )));
    }
    let positives: Vec<f64> = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(s, _)| *s)
        .collect();
    if positives.is_empty() || positives.len() == scores.len() {
        return Err(Error::DegenerateLabels);
    }
    // lse over a superset is never below lse over the subset; clamp rounding.
    Ok((log_sum_exp(scores)? - log_sum_exp(&positives)?).max(0.0))
}

/// `dL/ds_i = softmax(s)_i - [i positive] softmax_pos(s)_i`.
fn infonce_score_grad(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let lse_all = log_sum_exp(scores)?;
    let pos: Vec<f64> = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(s, _)| *s)
        .collect();
    let lse_pos = log_sum_exp(&pos)?;
    Ok(scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| {
            let all = (s - lse_all).exp();
            if m {
                all - (s - lse_pos).exp()
            } else {
                all
            }
        })
        .collect())
}

/// One (video, query) pair with per-frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub frames: Vec<FrameEmbedding>,
    pub query: QueryEmbedding,
    pub positive_mask: Vec<bool>,
}

impl TrainingExample {
    pub fn new(
        frames: Vec<FrameEmbedding>,
        query: QueryEmbedding,
        positive_mask: Vec<bool>,
    ) -> Result<Self> {
        if frames.len() != positive_mask.len() {
            return Err(Error::Shape(format!(
                "{} frames but {} mask entries",
                frames.len(),
                positive_mask.len()
            )));
        }
        Ok(Self {
            frames,
            query,
            positive_mask,
        })
    }

    /// Has at least one positive and one negative frame.
    pub fn is_usable(&self) -> bool {
        self.positive_mask.iter().any(|&m| m) && self.positive_mask.iter().any(|&m| !m)
    }
}

/// Gradients for every scorer tensor, in canonical order
/// (see [`ScorerParams::tensor_names`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<DenseMatrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ScorerParams) -> Self {
        Self {
            tensors: params
                .tensors()
                .iter()
                .map(|t| DenseMatrix::zeros(t.value.rows(), t.value.cols()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, scale);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(DenseMatrix::squared_norm).sum()
    }

    /// Copies into the `grad` fields of `params`, replacing what was there.
    pub fn store_into(&self, params: &mut ScorerParams) {
        for (t, g) in params.tensors_mut().into_iter().zip(&self.tensors) {
            t.grad.values_mut().copy_from_slice(g.values());
        }
    }
}

// canonical tensor slots
const ATTN_QUERY: usize = 0;
const ATTN_KEY: usize = 1;
const ATTN_VALUE: usize = 2;
const GATE_HIDDEN: usize = 3;
const GATE_QUERY: usize = 4;
const GATE_BIAS: usize = 5;
const HEADS: usize = 6;

/// Loss and exact gradients of `infonce_loss(score_frames(..))` for one example.
pub fn backward(
    example: &TrainingExample,
    params: &ScorerParams,
    config: &ScorerConfig,
) -> Result<(f64, Gradients)> {
    if !example.is_usable() {
        return Err(Error::DegenerateLabels);
    }
    let trace = forward(&example.frames, &example.query, params, config)?;
    let scores = trace.scores();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scoring forward pass".into()));
    }
    let loss = infonce_loss(&scores, &example.positive_mask)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("infonce loss".into()));
    }
    let dscore = infonce_score_grad(&scores, &example.positive_mask)?;

    let d = params.dim();
    let n_heads = params.subspaces();
    let log_gamma_slot = HEADS + 2 * n_heads;
    let lambda_slot = log_gamma_slot + 1;
    let scale = 1.0 / (d as f64).sqrt();
    let lambda = trace.lambda;
    let q: &[f64] = &example.query;

    let mut grads = Gradients::zeros_like(params);
    for (i, (fr, &delta)) in trace.frames.iter().zip(&dscore).enumerate() {
        if delta == 0.0 {
            continue;
        }
        // blend
        let mean_s = fr.subspace.iter().sum::<f64>() / n_heads as f64;
        grads.tensors[lambda_slot].values_mut()[0] +=
            delta * lambda * (1.0 - lambda) * (fr.base_cosine.value - mean_s);
        let ds = delta * (1.0 - lambda) / n_heads as f64;

        // subspace heads
        let mut du = vec![0.0; d];
        for k in 0..n_heads {
            let s_k = fr.subspace[k];
            grads.tensors[log_gamma_slot].values_mut()[k] -= ds * s_k;
            let c = fr.head_cosines[k];
            if c.degenerate {
                continue;
            }
            let dc = ds / params.gamma(k);
            let p = &fr.head_frame_proj[k];
            let r = &trace.head_query_proj[k];
            let np2 = dot(p, p);
            let nr2 = dot(r, r);
            let inv = 1.0 / (np2.sqrt() * nr2.sqrt());
            let dp: Vec<f64> = p
                .iter()
                .zip(r)
                .map(|(pi, ri)| dc * (ri * inv - c.value * pi / np2))
                .collect();
            let dr: Vec<f64> = p
                .iter()
                .zip(r)
                .map(|(pi, ri)| dc * (pi * inv - c.value * ri / nr2))
                .collect();
            grads.tensors[HEADS + 2 * k].add_outer(&dp, &fr.gated, 1.0);
            grads.tensors[HEADS + 2 * k + 1].add_outer(&dr, q, 1.0);
            let back = params.head_frame[k].value.matvec_transposed(&dp);
            for (a, b) in du.iter_mut().zip(back) {
                *a += b;
            }
        }

        // gate: u = h * sigmoid(z)
        let h = &fr.context;
        let g = &fr.gate;
        let dz: Vec<f64> = (0..d).map(|c| du[c] * h[c] * g[c] * (1.0 - g[c])).collect();
        grads.tensors[GATE_HIDDEN].add_outer(&dz, h, 1.0);
        grads.tensors[GATE_QUERY].add_outer(&dz, q, 1.0);
        for (b, z) in grads.tensors[GATE_BIAS].values_mut().iter_mut().zip(&dz) {
            *b += z;
        }
        let mut dh: Vec<f64> = (0..d).map(|c| du[c] * g[c]).collect();
        for (a, b) in dh
            .iter_mut()
            .zip(params.gate_hidden.value.matvec_transposed(&dz))
        {
            *a += b;
        }

        // attention: h = v + sum_j alpha_j W_v v_j (the residual carries no params)
        let start = fr.window_start;
        let alpha = &fr.attention;
        let mut dalpha = Vec::with_capacity(alpha.len());
        for (a, j) in alpha.iter().zip(start..=i) {
            grads.tensors[ATTN_VALUE].add_outer(&dh, &example.frames[j], *a);
            dalpha.push(dot(&dh, &trace.attn_values[j]));
        }
        let weighted: f64 = alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
        let mut dquery = vec![0.0; d];
        for ((a, da), j) in alpha.iter().zip(&dalpha).zip(start..=i) {
            let de = a * (da - weighted) * scale;
            if de == 0.0 {
                continue;
            }
            grads.tensors[ATTN_KEY].add_outer(&trace.attn_queries[i], &example.frames[j], de);
            for (dq, k) in dquery.iter_mut().zip(&trace.attn_keys[j]) {
                *dq += de * k;
            }
        }
        grads.tensors[ATTN_QUERY].add_outer(&dquery, &example.frames[i], 1.0);
    }
    if grads
        .tensors
        .iter()
        .any(|t| t.values().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("backward pass".into()));
    }
    Ok((loss, grads))
}

/// Loss of one example under the given params, forward only.
pub fn example_loss(
    example: &TrainingExample,
    params: &ScorerParams,
    config: &ScorerConfig,
) -> Result<f64> {
    let scores = score_frames(&example.frames, &example.query, params, config)?;
    infonce_loss(&scores, &example.positive_mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 freezes the optimizer, which is useful for evaluation runs
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(
                "adam betas must lie in [0, 1)".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(
                "adam epsilon must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("clip norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Adam moments for every scorer tensor, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<DenseMatrix>,
    pub second: Vec<DenseMatrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ScorerParams) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .tensors()
            .iter()
            .map(|t| DenseMatrix::zeros(t.value.rows(), t.value.cols()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the `grad` fields of `params`, after
/// optional global-norm clipping.
pub fn adam_step(params: &mut ScorerParams, state: &mut OptimizerState, config: &TrainConfig) {
    let mut clip_scale = 1.0;
    if let Some(max_norm) = config.clip_norm {
        let norm: f64 = params
            .tensors()
            .iter()
            .map(|t| t.grad.squared_norm())
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            clip_scale = max_norm / norm;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for ((tensor, m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let values = tensor.value.values_mut();
        let grads = tensor.grad.values();
        for (((w, &g), m), v) in values
            .iter_mut()
            .zip(grads)
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            let g = g * clip_scale;
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean per-example loss of each epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
    pub usable: usize,
    pub skipped: usize,
    /// SHA-256 over the little-endian bits of every parameter, canonical order.
    pub params_checksum: String,
}

/// SHA-256 hex digest of the parameter values.
pub fn params_checksum(params: &ScorerParams) -> String {
    let mut hasher = Sha256::new();
    for v in params.flatten() {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Trains a freshly initialized scorer.
pub fn train(
    dataset: &[TrainingExample],
    scorer_config: &ScorerConfig,
    train_config: &TrainConfig,
) -> Result<(ScorerParams, TrainReport)> {
    let params = init_scorer(scorer_config)?;
    train_from(params, dataset, scorer_config, train_config)
}

/// Trains starting from `params`. Examples without both positives and negatives
/// are skipped and counted. Each epoch reshuffles with a generator seeded by
/// `train_config.seed`; per-example gradients are merged in batch order, so a
/// fixed seed reproduces the run bit for bit.
pub fn train_from(
    mut params: ScorerParams,
    dataset: &[TrainingExample],
    scorer_config: &ScorerConfig,
    train_config: &TrainConfig,
) -> Result<(ScorerParams, TrainReport)> {
    scorer_config.validate()?;
    train_config.validate()?;
    let usable: Vec<&TrainingExample> = dataset.iter().filter(|e| e.is_usable()).collect();
    let skipped = dataset.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::NoUsableExamples { skipped });
    }
    let mut rng = Prng::new(train_config.seed);
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut epoch_losses = Vec::with_capacity(train_config.epochs);
    for epoch in 0..train_config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(train_config.batch_size) {
            let mut acc = Gradients::zeros_like(&params);
            for &idx in batch {
                let (loss, grads) = backward(usable[idx], &params, scorer_config)?;
                total += loss;
                acc.add_assign(&grads, 1.0);
            }
            let inv = 1.0 / batch.len() as f64;
            for t in &mut acc.tensors {
                t.values_mut().iter_mut().for_each(|v| *v *= inv);
            }
            acc.store_into(&mut params);
            adam_step(&mut params, &mut state, train_config);
        }
        let mean = total / usable.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} mean loss")));
        }
        epoch_losses.push(mean);
    }
    params.zero_grad();
    let report = TrainReport {
        epoch_losses,
        usable: usable.len(),
        skipped,
        params_checksum: params_checksum(&params),
    };
    Ok((params, report))
}

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub n_parameters: usize,
}

/// Gradient magnitudes below this are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares flat analytic gradients against central differences of the loss with
/// respect to every parameter.
pub fn compare_with_finite_differences(
    example: &TrainingExample,
    params: &ScorerParams,
    config: &ScorerConfig,
    analytic: &[f64],
    eps: f64,
) -> Result<GradCheckReport> {
    let mut probe = params.clone();
    let x0 = params.flatten();
    if analytic.len() != x0.len() {
        return Err(Error::Shape(format!(
            "{} analytic entries for {} parameters",
            analytic.len(),
            x0.len()
        )));
    }
    let numeric = crate::numerics::finite_diff_grad(
        |x| {
            probe.assign_flat(x);
            example_loss(example, &probe, config).unwrap_or(f64::NAN)
        },
        &x0,
        eps,
    )?;
    let names = ScorerParams::tensor_names(params.subspaces());
    let sizes: Vec<usize> = params
        .tensors()
        .iter()
        .map(|t| t.value.values().len())
        .collect();
    let mut worst = (0.0, 0usize);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > worst.0 || (e.is_nan() && !worst.0.is_nan()) {
            worst = (e, i);
        }
    }
    let (mut tensor, mut offset) = (0, worst.1);
    while offset >= sizes[tensor] {
        offset -= sizes[tensor];
        tensor += 1;
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_tensor: names[tensor].clone(),
        worst_index: offset,
        analytic: analytic[worst.1],
        numeric: numeric[worst.1],
        n_parameters: x0.len(),
    })
}

/// Runs [`backward`] and checks it against central differences.
pub fn gradient_check(
    example: &TrainingExample,
    params: &ScorerParams,
    config: &ScorerConfig,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(example, params, config)?;
    compare_with_finite_differences(example, params, config, &grads.flatten(), eps)
}

/// Two-class frame source with a known log density ratio
/// `ln p(x | positive) - ln p(x | negative)`.
pub trait TwoClassGenerator {
    fn dim(&self) -> usize;
    fn query(&self) -> &QueryEmbedding;
    fn sample(&self, positive: bool, rng: &mut Prng) -> Vec<f64>;
    fn log_ratio(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    /// Spearman correlation between scores and the true log ratio; `None` when
    /// either side has no variance.
    pub spearman: Option<f64>,
    /// Probability that a positive outscores a negative (ties count half).
    pub auc: Option<f64>,
    pub samples: usize,
}

/// Scores held-out draws (half from each class, each scored as a one-frame
/// sequence) and correlates the scores with the generator's log ratio.
pub fn density_ratio_probe<G: TwoClassGenerator>(
    params: &ScorerParams,
    config: &ScorerConfig,
    generator: &G,
    samples: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let mut rng = Prng::new(seed);
    let mut scores = Vec::with_capacity(samples);
    let mut ratios = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let positive = i % 2 == 0;
        let x = generator.sample(positive, &mut rng);
        ratios.push(generator.log_ratio(&x));
        let frame = FrameEmbedding::new(x)?;
        let s = score_frames(
            std::slice::from_ref(&frame),
            generator.query(),
            params,
            config,
        )?;
        scores.push(s.0[0]);
        labels.push(positive);
    }
    Ok(ProbeReport {
        spearman: spearman(&scores, &ratios),
        auc: auc(&scores, &labels),
        samples,
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation; `None` for fewer than two points or a constant side.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Area under the ROC curve of `scores` for separating `labels`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::random_gradcheck_instance;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn seg(a: f64, b: f64) -> EvidenceSegment {
        EvidenceSegment::new(a, b).unwrap()
    }

    fn positives(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn labeling() {
        assert_eq!(
            positives(&label_frames(&[seg(2.0, 4.0)], 10, 1.0).unwrap()),
            vec![2, 3, 4]
        );
        assert!(label_frames(&[], 5, 1.0).unwrap().iter().all(|m| !m));
        let m = label_frames(&[seg(1.0, 3.0), seg(2.0, 5.0)], 8, 1.0).unwrap();
        assert_eq!(positives(&m), vec![1, 2, 3, 4, 5]);
        // fps 2: timestamps 0, 0.5, 1.0, ...
        let m = label_frames(&[seg(1.0, 1.5)], 6, 2.0).unwrap();
        assert_eq!(positives(&m), vec![2, 3]);
        assert!(label_frames(&[], 5, 0.0).is_err());
        assert!(EvidenceSegment::new(-1.0, 2.0).is_err());
        let bad = EvidenceSegment {
            start_sec: -1.0,
            end_sec: 2.0,
        };
        assert!(label_frames(&[bad], 5, 1.0).is_err());
    }

    #[test]
    fn infonce_values() {
        assert!((infonce_loss(&[0.0, 0.0], &[true, false]).unwrap() - LN_2).abs() < 1e-15);
        let l = infonce_loss(&[0.0, 0.0, -1000.0], &[true, true, false]).unwrap();
        assert!(l.abs() < 1e-300 || l < 1e-12);
        let l = infonce_loss(&[1.0, 0.5, -0.5], &[true, false, false]).unwrap();
        // ln(e^1 + e^0.5 + e^-0.5) - 1 from a 40-digit evaluation
        assert!((l - 0.604_130_605_336_728_3).abs() < 1e-15, "{l}");
        assert!(matches!(
            infonce_loss(&[1.0, 2.0], &[true, true]),
            Err(Error::DegenerateLabels)
        ));
        assert!(matches!(
            infonce_loss(&[1.0, 2.0], &[false, false]),
            Err(Error::DegenerateLabels)
        ));
        assert!(infonce_loss(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn infonce_equal_scores() {
        for (p, n) in [(1usize, 1usize), (2, 5), (7, 3)] {
            let mask: Vec<bool> = (0..p + n).map(|i| i < p).collect();
            let l = infonce_loss(&vec![0.37; p + n], &mask).unwrap();
            assert!((l - ((p + n) as f64 / p as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn score_grad_matches_finite_differences() {
        let scores = [0.3, -1.2, 0.8, 0.1, 2.0];
        let mask = [true, false, true, false, false];
        let g = infonce_score_grad(&scores, &mask).unwrap();
        let fd =
            crate::numerics::finite_diff_grad(|s| infonce_loss(s, &mask).unwrap(), &scores, 1e-6)
                .unwrap();
        for (a, b) in g.iter().zip(fd) {
            assert!((a - b).abs() < 1e-8);
        }
        // gradients of a shift-invariant function sum to zero
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences_tiny() {
        let (example, params, config) = random_gradcheck_instance(1, 4, 6, 2, 2).unwrap();
        let report = gradient_check(&example, &params, &config, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sign_flip_is_detected() {
        let (example, params, config) = random_gradcheck_instance(2, 4, 6, 2, 2).unwrap();
        let (_, mut grads) = backward(&example, &params, &config).unwrap();
        grads.tensors[GATE_HIDDEN]
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = -*v);
        let r = compare_with_finite_differences(&example, &params, &config, &grads.flatten(), 1e-5)
            .unwrap();
        assert!(r.max_relative_error > 1e-4);
        assert_eq!(r.worst_tensor, "gate.hidden");
    }

    #[test]
    fn indistinguishable_classes_are_stationary() {
        // identical frames: every score equal, loss is ln((P+N)/P) and the
        // head parameters see equal and opposite pulls that cancel
        let (example, params, config) = random_gradcheck_instance(3, 5, 6, 2, 1).unwrap();
        let v = example.frames[0].clone();
        let frames = vec![v; 5];
        let mask = vec![true, true, false, false, false];
        let ex = TrainingExample::new(frames, example.query.clone(), mask).unwrap();
        let (loss, grads) = backward(&ex, &params, &config).unwrap();
        assert!((loss - (5.0f64 / 2.0).ln()).abs() < 1e-12);
        for g in grads.flatten() {
            assert!(g.abs() < 1e-12, "{g}");
        }
    }

    #[test]
    fn symmetric_construction_gives_symmetric_lambda_gradient() {
        // Two frames, one positive and one negative, with the same embedding:
        // the loss does not depend on the score level, so d/d lambda vanishes.
        let (example, params, config) = random_gradcheck_instance(4, 2, 6, 2, 1).unwrap();
        let v = example.frames[0].clone();
        let ex = TrainingExample::new(vec![v.clone(), v], example.query.clone(), vec![true, false])
            .unwrap();
        let (loss, grads) = backward(&ex, &params, &config).unwrap();
        assert!((loss - LN_2).abs() < 1e-15);
        let lambda_grad = grads.tensors.last().unwrap().values()[0];
        assert!(lambda_grad.abs() < 1e-15);
    }

    #[test]
    fn gradients_accumulate_additively() {
        let (a, params, config) = random_gradcheck_instance(5, 4, 6, 2, 2).unwrap();
        let (b, _, _) = random_gradcheck_instance(6, 4, 6, 2, 2).unwrap();
        let (_, ga) = backward(&a, &params, &config).unwrap();
        let (_, gb) = backward(&b, &params, &config).unwrap();
        let mut acc = Gradients::zeros_like(&params);
        acc.add_assign(&ga, 1.0);
        acc.add_assign(&gb, 1.0);
        for ((x, y), z) in acc.flatten().iter().zip(ga.flatten()).zip(gb.flatten()) {
            assert_eq!(*x, y + z);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (_, mut params, _) = random_gradcheck_instance(7, 2, 4, 2, 1).unwrap();
        let before = params.flatten();
        let mut grads = vec![0.0; before.len()];
        grads[0] = 0.37;
        grads[1] = -2.5;
        let mut offset = 0;
        for t in params.tensors_mut() {
            let n = t.grad.values().len();
            t.grad
                .values_mut()
                .copy_from_slice(&grads[offset..offset + n]);
            offset += n;
        }
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &mut state, &cfg);
        let after = params.flatten();
        assert!((after[0] - before[0] + 0.01).abs() < 1e-9);
        assert!((after[1] - before[1] - 0.01).abs() < 1e-9);
        for i in 2..before.len() {
            assert_eq!(after[i], before[i]);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_clipping_bounds_the_update_direction() {
        let (_, mut params, _) = random_gradcheck_instance(8, 2, 4, 2, 1).unwrap();
        let mut clipped = params.clone();
        for p in [&mut params, &mut clipped] {
            p.attn_query.grad.fill(100.0);
        }
        let base = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let clip = TrainConfig {
            clip_norm: Some(1.0),
            ..base.clone()
        };
        let mut s1 = OptimizerState::new(&params);
        let mut s2 = OptimizerState::new(&clipped);
        adam_step(&mut params, &mut s1, &base);
        adam_step(&mut clipped, &mut s2, &clip);
        // Adam's first step is scale free, so clipping changes the moments but not the step
        for (a, b) in params.flatten().iter().zip(clipped.flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
        let g_norm = s2.first[0].squared_norm().sqrt() / (1.0 - base.beta1);
        assert!((g_norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn training_rejects_unusable_datasets() {
        let (ex, _, config) = random_gradcheck_instance(9, 3, 4, 2, 1).unwrap();
        let all_pos =
            TrainingExample::new(ex.frames.clone(), ex.query.clone(), vec![true; 3]).unwrap();
        let err = train(
            &[all_pos.clone(), all_pos],
            &config,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NoUsableExamples { skipped: 2 }));
    }

    #[test]
    fn frozen_optimizer_keeps_loss_constant() {
        let (ex, _, config) = random_gradcheck_instance(10, 6, 4, 2, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 4,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (_, report) = train(&[ex], &config, &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 4);
        assert!(report
            .epoch_losses
            .iter()
            .all(|&l| l == report.epoch_losses[0]));
    }

    #[test]
    fn spearman_and_auc_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(auc(&[0.9, 0.1, 0.5], &[true, false, false]), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auc(&[0.5], &[true]), None);
    }

    proptest! {
        #[test]
        fn infonce_nonnegative_and_shift_invariant(
            scores in prop::collection::vec(-20.0f64..20.0, 2..12),
            split in 1usize..11,
            c in -50.0f64..50.0,
        ) {
            let n = scores.len();
            let split = split.min(n - 1);
            let mask: Vec<bool> = (0..n).map(|i| i < split).collect();
            let l = infonce_loss(&scores, &mask).unwrap();
            prop_assert!(l >= 0.0);
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            prop_assert!((infonce_loss(&shifted, &mask).unwrap() - l).abs() <= 1e-9);
        }
    }
}
