//! Query-conditioned evidence scorer.
//!
//! Per frame `i` with embedding `v_i` and query embedding `q`:
//!
//! 1. causal window attention: `h_i = v_i + sum_j a_ij (W_v v_j)` over
//!    `j in [i - w + 1, i]`, with `a_i = softmax((W_q v_i) . (W_k v_j) / sqrt(d))`;
//! 2. query gating: `u_i = h_i * sigmoid(W_h h_i + W_g q + b)`;
//! 3. subspace heads: `s_ik = cos(P_k u_i, R_k q) / gamma_k` for `k = 1..K`,
//!    `P_k, R_k` of shape `d/K x d`;
//! 4. blend: `score_i = lambda cos(v_i, q) + (1 - lambda) mean_k s_ik`.
//!
//! `gamma_k = exp(log_gamma_k)` and `lambda = sigmoid(lambda_logit)` keep both in
//! range by construction.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cosine, dot, init_xavier, logit, sigmoid_scalar, Cosine, DenseMatrix, ParamTensor, Prng,
};

macro_rules! embedding_newtype {
    ($name:ident, $what:literal) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(concat!($what, " channel {}"), i)));
                }
                Ok(Self(values))
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }
    };
}

embedding_newtype!(FrameEmbedding, "frame embedding");
embedding_newtype!(QueryEmbedding, "query embedding");

/// One score per frame, in frame order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

impl Deref for ScoreVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub dim: usize,
    pub subspaces: usize,
    pub window: usize,
    pub lambda_init: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            subspaces: 8,
            window: 8,
            lambda_init: 0.5,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.subspaces == 0 || self.window == 0 {
            return Err(Error::InvalidArgument(
                "dim, subspaces and window must all be at least 1".into(),
            ));
        }
        if !self.dim.is_multiple_of(self.subspaces) {
            return Err(Error::InvalidArgument(format!(
                "subspaces ({}) must divide dim ({})",
                self.subspaces, self.dim
            )));
        }
        // lambda is a sigmoid, so the endpoints are unreachable
        if !(self.lambda_init > 0.0 && self.lambda_init < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda_init must lie in (0, 1), got {}",
                self.lambda_init
            )));
        }
        Ok(())
    }

    pub fn subspace_dim(&self) -> usize {
        self.dim / self.subspaces
    }
}

/// All learnable tensors of the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub attn_query: ParamTensor,
    pub attn_key: ParamTensor,
    pub attn_value: ParamTensor,
    pub gate_hidden: ParamTensor,
    pub gate_query: ParamTensor,
    /// `d x 1`
    pub gate_bias: ParamTensor,
    /// `K` frame-side head projections, each `d/K x d`.
    pub head_frame: Vec<ParamTensor>,
    /// `K` query-side head projections, each `d/K x d`.
    pub head_query: Vec<ParamTensor>,
    /// `K x 1`, `gamma_k = exp(log_gamma_k)`.
    pub log_gamma: ParamTensor,
    /// `1 x 1`, `lambda = sigmoid(lambda_logit)`.
    pub lambda_logit: ParamTensor,
}

impl ScorerParams {
    pub fn dim(&self) -> usize {
        self.attn_query.value.rows()
    }

    pub fn subspaces(&self) -> usize {
        self.head_frame.len()
    }

    pub fn gamma(&self, k: usize) -> f64 {
        self.log_gamma.value.values()[k].exp()
    }

    pub fn lambda(&self) -> f64 {
        sigmoid_scalar(self.lambda_logit.value.values()[0])
    }

    /// Canonical tensor names, in the order used by [`Self::tensors`] and the
    /// checkpoint format.
    pub fn tensor_names(subspaces: usize) -> Vec<String> {
        let mut names: Vec<String> = [
            "attn.query",
            "attn.key",
            "attn.value",
            "gate.hidden",
            "gate.query",
            "gate.bias",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for k in 0..subspaces {
            names.push(format!("head.{k}.frame"));
            names.push(format!("head.{k}.query"));
        }
        names.push("head.log_gamma".into());
        names.push("blend.lambda_logit".into());
        names
    }

    /// Expected shape of every tensor, in canonical order.
    pub fn expected_shapes(config: &ScorerConfig) -> Vec<(usize, usize)> {
        let d = config.dim;
        let dk = config.subspace_dim();
        let mut shapes = vec![(d, d), (d, d), (d, d), (d, d), (d, d), (d, 1)];
        for _ in 0..config.subspaces {
            shapes.push((dk, d));
            shapes.push((dk, d));
        }
        shapes.push((config.subspaces, 1));
        shapes.push((1, 1));
        shapes
    }

    pub fn tensors(&self) -> Vec<&ParamTensor> {
        let mut out = vec![
            &self.attn_query,
            &self.attn_key,
            &self.attn_value,
            &self.gate_hidden,
            &self.gate_query,
            &self.gate_bias,
        ];
        for (f, q) in self.head_frame.iter().zip(&self.head_query) {
            out.push(f);
            out.push(q);
        }
        out.push(&self.log_gamma);
        out.push(&self.lambda_logit);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = vec![
            &mut self.attn_query,
            &mut self.attn_key,
            &mut self.attn_value,
            &mut self.gate_hidden,
            &mut self.gate_query,
            &mut self.gate_bias,
        ];
        for (f, q) in self.head_frame.iter_mut().zip(self.head_query.iter_mut()) {
            out.push(f);
            out.push(q);
        }
        out.push(&mut self.log_gamma);
        out.push(&mut self.lambda_logit);
        out
    }

    /// Rebuilds params from canonical-order matrices.
    pub fn from_tensors(config: &ScorerConfig, mut values: Vec<DenseMatrix>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::expected_shapes(config);
        if values.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "{} tensors, expected {}",
                values.len(),
                shapes.len()
            )));
        }
        for (i, (m, s)) in values.iter().zip(&shapes).enumerate() {
            if m.shape() != *s {
                return Err(Error::Shape(format!(
                    "tensor {i} has shape {:?}, expected {s:?}",
                    m.shape()
                )));
            }
        }
        let lambda_logit = ParamTensor::new(values.pop().unwrap());
        let log_gamma = ParamTensor::new(values.pop().unwrap());
        let mut it = values.into_iter().map(ParamTensor::new);
        let mut next = || it.next().unwrap();
        let attn_query = next();
        let attn_key = next();
        let attn_value = next();
        let gate_hidden = next();
        let gate_query = next();
        let gate_bias = next();
        let mut head_frame = Vec::with_capacity(config.subspaces);
        let mut head_query = Vec::with_capacity(config.subspaces);
        for _ in 0..config.subspaces {
            head_frame.push(next());
            head_query.push(next());
        }
        Ok(Self {
            attn_query,
            attn_key,
            attn_value,
            gate_hidden,
            gate_query,
            gate_bias,
            head_frame,
            head_query,
            log_gamma,
            lambda_logit,
        })
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.value.values().len()).sum()
    }

    /// All parameter values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.value.values().iter().copied())
            .collect()
    }

    /// Inverse of [`Self::flatten`]. Panics on a length mismatch.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.value.values().len();
            t.value
                .values_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// All gradients concatenated in canonical order.
    pub fn flatten_grad(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.grad.values().iter().copied())
            .collect()
    }
}

/// Xavier-uniform matrices drawn in canonical order from `Prng::new(config.seed)`,
/// zero gate bias, `gamma = 1`, `lambda = lambda_init`.
pub fn init_scorer(config: &ScorerConfig) -> Result<ScorerParams> {
    config.validate()?;
    let d = config.dim;
    let dk = config.subspace_dim();
    let mut rng = Prng::new(config.seed);
    let square = |rng: &mut Prng| ParamTensor::new(init_xavier(d, d, rng));
    let attn_query = square(&mut rng);
    let attn_key = square(&mut rng);
    let attn_value = square(&mut rng);
    let gate_hidden = square(&mut rng);
    let gate_query = square(&mut rng);
    let mut head_frame = Vec::with_capacity(config.subspaces);
    let mut head_query = Vec::with_capacity(config.subspaces);
    for _ in 0..config.subspaces {
        head_frame.push(ParamTensor::new(init_xavier(dk, d, &mut rng)));
        head_query.push(ParamTensor::new(init_xavier(dk, d, &mut rng)));
    }
    let mut lambda = DenseMatrix::zeros(1, 1);
    lambda.set(0, 0, logit(config.lambda_init));
    Ok(ScorerParams {
        attn_query,
        attn_key,
        attn_value,
        gate_hidden,
        gate_query,
        gate_bias: ParamTensor::new(DenseMatrix::zeros(d, 1)),
        head_frame,
        head_query,
        log_gamma: ParamTensor::new(DenseMatrix::zeros(config.subspaces, 1)),
        lambda_logit: ParamTensor::new(lambda),
    })
}

/// Intermediate values of one frame's forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct FrameTrace {
    /// First frame of the causal window.
    pub window_start: usize,
    /// Softmax weights over `window_start..=i`.
    pub attention: Vec<f64>,
    pub context: Vec<f64>,
    pub gate: Vec<f64>,
    pub gated: Vec<f64>,
    /// `P_k u_i` per head.
    pub head_frame_proj: Vec<Vec<f64>>,
    pub head_cosines: Vec<Cosine>,
    /// `s_ik`, already divided by `gamma_k`.
    pub subspace: Vec<f64>,
    pub base_cosine: Cosine,
    pub score: f64,
}

/// Full forward pass with every intermediate needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub attn_queries: Vec<Vec<f64>>,
    pub attn_keys: Vec<Vec<f64>>,
    pub attn_values: Vec<Vec<f64>>,
    /// `R_k q` per head (shared by all frames).
    pub head_query_proj: Vec<Vec<f64>>,
    pub lambda: f64,
    pub frames: Vec<FrameTrace>,
}

impl ForwardTrace {
    pub fn scores(&self) -> ScoreVector {
        ScoreVector(self.frames.iter().map(|f| f.score).collect())
    }
}

fn check_dims(frames: &[FrameEmbedding], q: &QueryEmbedding, d: usize) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Empty("frame sequence"));
    }
    if let Some((index, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != d) {
        return Err(Error::FrameDimension {
            index,
            found: f.len(),
            expected: d,
        });
    }
    if q.len() != d {
        return Err(Error::Shape(format!(
            "query embedding has dimension {}, expected {d}",
            q.len()
        )));
    }
    Ok(())
}

struct Attention {
    queries: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    contexts: Vec<Vec<f64>>,
}

fn window_start(tau: usize, window: usize) -> usize {
    (tau + 1).saturating_sub(window)
}

fn attend(frames: &[FrameEmbedding], params: &ScorerParams, window: usize) -> Attention {
    let d = params.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let queries: Vec<Vec<f64>> = frames
        .iter()
        .map(|v| params.attn_query.value.matvec(v))
        .collect();
    let keys: Vec<Vec<f64>> = frames
        .iter()
        .map(|v| params.attn_key.value.matvec(v))
        .collect();
    let values: Vec<Vec<f64>> = frames
        .iter()
        .map(|v| params.attn_value.value.matvec(v))
        .collect();
    let mut weights = Vec::with_capacity(frames.len());
    let mut contexts = Vec::with_capacity(frames.len());
    for (tau, v) in frames.iter().enumerate() {
        let start = window_start(tau, window);
        let logits: Vec<f64> = (start..=tau)
            .map(|j| dot(&queries[tau], &keys[j]) * scale)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.into_iter().map(|e| e / total).collect();
        let mut h = v.to_vec();
        for (a, j) in alpha.iter().zip(start..=tau) {
            for (hc, vc) in h.iter_mut().zip(&values[j]) {
                *hc += a * vc;
            }
        }
        weights.push(alpha);
        contexts.push(h);
    }
    Attention {
        queries,
        keys,
        values,
        weights,
        contexts,
    }
}

/// Causal window attention with a residual connection. `h_tau` depends only on
/// frames `max(0, tau - w + 1) ..= tau`.
pub fn aggregate(
    frames: &[FrameEmbedding],
    params: &ScorerParams,
    window: usize,
) -> Result<Vec<Vec<f64>>> {
    if frames.is_empty() {
        return Err(Error::Empty("frame sequence"));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let d = params.dim();
    if let Some((index, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != d) {
        return Err(Error::FrameDimension {
            index,
            found: f.len(),
            expected: d,
        });
    }
    Ok(attend(frames, params, window).contexts)
}

fn gate_channels(h: &[f64], q: &[f64], params: &ScorerParams) -> Vec<f64> {
    let from_h = params.gate_hidden.value.matvec(h);
    let from_q = params.gate_query.value.matvec(q);
    from_h
        .iter()
        .zip(&from_q)
        .zip(params.gate_bias.value.values())
        .map(|((a, b), c)| sigmoid_scalar(a + b + c))
        .collect()
}

/// Query-guided gate: `h * sigmoid(W_h h + W_g q + b)`.
pub fn gate(h: &[f64], q: &QueryEmbedding, params: &ScorerParams) -> Vec<f64> {
    let g = gate_channels(h, q, params);
    h.iter().zip(&g).map(|(a, b)| a * b).collect()
}

/// Subspace head outputs for one gated vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceScores {
    pub scores: Vec<f64>,
    /// Heads where a projection had zero norm; their score is 0.
    pub degenerate: Vec<bool>,
}

fn query_projections(q: &[f64], params: &ScorerParams) -> Vec<Vec<f64>> {
    params
        .head_query
        .iter()
        .map(|w| w.value.matvec(q))
        .collect()
}

pub fn subspace_scores(u: &[f64], q: &QueryEmbedding, params: &ScorerParams) -> SubspaceScores {
    let rq = query_projections(q, params);
    let mut scores = Vec::with_capacity(params.subspaces());
    let mut degenerate = Vec::with_capacity(params.subspaces());
    for (k, (w, r)) in params.head_frame.iter().zip(&rq).enumerate() {
        let c = cosine(&w.value.matvec(u), r);
        scores.push(c.value / params.gamma(k));
        degenerate.push(c.degenerate);
    }
    SubspaceScores { scores, degenerate }
}

/// `lambda * base + (1 - lambda) * mean(subspace)`.
pub fn blend(base_cosine: f64, subspace: &[f64], lambda: f64) -> f64 {
    let mean = subspace.iter().sum::<f64>() / subspace.len() as f64;
    lambda * base_cosine + (1.0 - lambda) * mean
}

/// Final score of one frame given its raw embedding `v` and gated vector `u`.
pub fn evidence_score(v: &[f64], u: &[f64], q: &QueryEmbedding, params: &ScorerParams) -> f64 {
    let s = subspace_scores(u, q, params);
    blend(cosine(v, q).value, &s.scores, params.lambda())
}

/// Forward pass keeping intermediates.
pub fn forward(
    frames: &[FrameEmbedding],
    q: &QueryEmbedding,
    params: &ScorerParams,
    config: &ScorerConfig,
) -> Result<ForwardTrace> {
    check_dims(frames, q, params.dim())?;
    if config.dim != params.dim() || config.subspaces != params.subspaces() {
        return Err(Error::Shape(format!(
            "config (d={}, K={}) does not match params (d={}, K={})",
            config.dim,
            config.subspaces,
            params.dim(),
            params.subspaces()
        )));
    }
    if config.window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let attn = attend(frames, params, config.window);
    let head_query_proj = query_projections(q, params);
    let lambda = params.lambda();
    let inv_gamma: Vec<f64> = (0..params.subspaces())
        .map(|k| 1.0 / params.gamma(k))
        .collect();

    let mut traces = Vec::with_capacity(frames.len());
    for (i, (v, (h, alpha))) in frames
        .iter()
        .zip(attn.contexts.into_iter().zip(attn.weights))
        .enumerate()
    {
        let g = gate_channels(&h, q, params);
        let u: Vec<f64> = h.iter().zip(&g).map(|(a, b)| a * b).collect();
        let head_frame_proj: Vec<Vec<f64>> = params
            .head_frame
            .iter()
            .map(|w| w.value.matvec(&u))
            .collect();
        let head_cosines: Vec<Cosine> = head_frame_proj
            .iter()
            .zip(&head_query_proj)
            .map(|(p, r)| cosine(p, r))
            .collect();
        let subspace: Vec<f64> = head_cosines
            .iter()
            .zip(&inv_gamma)
            .map(|(c, ig)| c.value * ig)
            .collect();
        let base_cosine = cosine(v, q);
        let score = blend(base_cosine.value, &subspace, lambda);
        traces.push(FrameTrace {
            window_start: window_start(i, config.window),
            attention: alpha,
            context: h,
            gate: g,
            gated: u,
            head_frame_proj,
            head_cosines,
            subspace,
            base_cosine,
            score,
        });
    }
    Ok(ForwardTrace {
        attn_queries: attn.queries,
        attn_keys: attn.keys,
        attn_values: attn.values,
        head_query_proj,
        lambda,
        frames: traces,
    })
}

/// Scores every frame of one video against one query.
pub fn score_frames(
    frames: &[FrameEmbedding],
    q: &QueryEmbedding,
    params: &ScorerParams,
    config: &ScorerConfig,
) -> Result<ScoreVector> {
    Ok(forward(frames, q, params, config)?.scores())
}
