//! Synthetic corpora with planted evidence.
//!
//! Used by the test suites and the CLI demo commands; nothing here is needed to
//! score real embeddings.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{dot, norm, Prng};
use crate::scoring::{init_scorer, FrameEmbedding, QueryEmbedding, ScorerConfig, ScorerParams};
use crate::selection::EvidenceSegment;
use crate::training::{label_frames, TrainingExample, TwoClassGenerator};

fn random_unit(dim: usize, rng: &mut Prng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector with cosine `alignment` to `anchor`, the rest along `other`
/// (orthogonalized against `anchor`).
fn tilt(anchor: &[f64], other: &[f64], alignment: f64) -> Vec<f64> {
    let proj = dot(anchor, other);
    let mut ortho: Vec<f64> = other
        .iter()
        .zip(anchor)
        .map(|(o, a)| o - proj * a)
        .collect();
    let n = norm(&ortho);
    if n < 1e-12 {
        return anchor.to_vec();
    }
    ortho.iter_mut().for_each(|x| *x /= n);
    let side = (1.0 - alignment * alignment).max(0.0).sqrt();
    anchor
        .iter()
        .zip(&ortho)
        .map(|(a, o)| alignment * a + side * o)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedCorpusConfig {
    pub n_frames: usize,
    pub dim: usize,
    pub fps: f64,
    /// Inclusive range of evidence segment lengths, in frames.
    pub segment_frames: (usize, usize),
    /// Norm of the evidence direction added to frames inside the segment.
    pub signal: f64,
    /// Per-channel standard deviation of frame noise.
    pub noise: f64,
    /// Norm of a per-video scene offset shared by all its frames.
    pub scene: f64,
    /// Cosine between the query embedding and the evidence direction.
    pub alignment: f64,
    pub seed: u64,
}

impl Default for PlantedCorpusConfig {
    fn default() -> Self {
        Self {
            n_frames: 256,
            dim: 16,
            fps: 1.0,
            segment_frames: (8, 12),
            signal: 3.0,
            noise: 1.0,
            scene: 1.0,
            alignment: 0.4,
            seed: 0,
        }
    }
}

/// One synthetic video with its query and planted evidence segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedVideo {
    pub frames: Vec<FrameEmbedding>,
    pub query: QueryEmbedding,
    pub segments: Vec<EvidenceSegment>,
    pub fps: f64,
}

impl PlantedVideo {
    pub fn to_example(&self) -> Result<TrainingExample> {
        let mask = label_frames(&self.segments, self.frames.len(), self.fps)?;
        TrainingExample::new(self.frames.clone(), self.query.clone(), mask)
    }
}

/// Generator of planted videos. The evidence direction of a query is a fixed
/// corpus-wide rotation of it, so a scorer can learn the mapping while the raw
/// cosine only sees the `alignment` share.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    config: PlantedCorpusConfig,
    /// Row-major `dim x dim` map from query direction to off-query evidence part.
    mixing: Vec<f64>,
}

impl PlantedCorpus {
    pub fn new(config: PlantedCorpusConfig) -> Self {
        let mut rng = Prng::new(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let d = config.dim;
        let mixing = (0..d * d).map(|_| rng.normal()).collect();
        Self { config, mixing }
    }

    pub fn config(&self) -> &PlantedCorpusConfig {
        &self.config
    }

    /// Evidence direction for a unit query direction.
    pub fn evidence_direction(&self, query: &[f64]) -> Vec<f64> {
        let d = self.config.dim;
        let mixed: Vec<f64> = (0..d)
            .map(|r| dot(&self.mixing[r * d..(r + 1) * d], query))
            .collect();
        tilt(query, &mixed, self.config.alignment)
    }

    pub fn video(&self, rng: &mut Prng) -> PlantedVideo {
        let c = &self.config;
        let d = c.dim;
        let n = c.n_frames;
        let query = random_unit(d, rng);
        let evidence = self.evidence_direction(&query);
        let scene: Vec<f64> = random_unit(d, rng)
            .into_iter()
            .map(|x| x * c.scene)
            .collect();
        let (lo, hi) = c.segment_frames;
        let len = (lo + rng.below(hi - lo + 1)).clamp(1, n);
        let start = rng.below(n - len + 1);
        let frames = (0..n)
            .map(|i| {
                let inside = (start..start + len).contains(&i);
                let v: Vec<f64> = (0..d)
                    .map(|k| {
                        let mut x = scene[k] + c.noise * rng.normal();
                        if inside {
                            x += c.signal * evidence[k];
                        }
                        x
                    })
                    .collect();
                FrameEmbedding::new(v).expect("finite synthetic frame")
            })
            .collect();
        let segments = vec![EvidenceSegment {
            start_sec: start as f64 / c.fps,
            end_sec: (start + len - 1) as f64 / c.fps,
        }];
        PlantedVideo {
            frames,
            query: QueryEmbedding::new(query).expect("finite query"),
            segments,
            fps: c.fps,
        }
    }

    pub fn videos(&self, count: usize, rng: &mut Prng) -> Vec<PlantedVideo> {
        (0..count).map(|_| self.video(rng)).collect()
    }
}

/// Isotropic Gaussians `N(mu_+, s^2 I)` and `N(mu_-, s^2 I)` with
/// `mu_+ = separation * e`, `mu_- = 0`, where `e` is the evidence direction and the
/// query has cosine `alignment` with it.
#[derive(Debug, Clone)]
pub struct GaussianClasses {
    query: QueryEmbedding,
    positive_mean: Vec<f64>,
    negative_mean: Vec<f64>,
    sigma: f64,
}

impl GaussianClasses {
    pub fn new(dim: usize, separation: f64, sigma: f64, alignment: f64, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        let evidence = random_unit(dim, &mut rng);
        let other = random_unit(dim, &mut rng);
        let query = tilt(&evidence, &other, alignment);
        Self {
            query: QueryEmbedding::new(query).expect("finite query"),
            positive_mean: evidence.iter().map(|x| x * separation).collect(),
            negative_mean: vec![0.0; dim],
            sigma,
        }
    }

    /// Both classes share one distribution; the log ratio is identically zero.
    pub fn identical(dim: usize, sigma: f64, seed: u64) -> Self {
        let mut g = Self::new(dim, 0.0, sigma, 1.0, seed);
        g.positive_mean = g.negative_mean.clone();
        g
    }

    /// A training sequence: negatives everywhere except one contiguous run of
    /// `positives` frames at a random offset.
    pub fn example(&self, n: usize, positives: usize, rng: &mut Prng) -> TrainingExample {
        let positives = positives.clamp(1, n.saturating_sub(1).max(1));
        let start = rng.below(n - positives + 1);
        let mask: Vec<bool> = (0..n)
            .map(|i| (start..start + positives).contains(&i))
            .collect();
        let frames = mask
            .iter()
            .map(|&p| FrameEmbedding::new(self.sample(p, rng)).expect("finite sample"))
            .collect();
        TrainingExample::new(frames, self.query.clone(), mask).expect("mask matches frames")
    }
}

impl TwoClassGenerator for GaussianClasses {
    fn dim(&self) -> usize {
        self.query.len()
    }

    fn query(&self) -> &QueryEmbedding {
        &self.query
    }

    fn sample(&self, positive: bool, rng: &mut Prng) -> Vec<f64> {
        let mean = if positive {
            &self.positive_mean
        } else {
            &self.negative_mean
        };
        mean.iter().map(|m| m + self.sigma * rng.normal()).collect()
    }

    fn log_ratio(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = self
            .positive_mean
            .iter()
            .zip(&self.negative_mean)
            .map(|(p, n)| p - n)
            .collect();
        let half = (dot(&self.positive_mean, &self.positive_mean)
            - dot(&self.negative_mean, &self.negative_mean))
            / 2.0;
        (dot(x, &diff) - half) / (self.sigma * self.sigma)
    }
}

/// Random labelled example plus non-trivial params (random gate bias,
/// temperatures and blend weight) for gradient checks.
pub fn random_gradcheck_instance(
    seed: u64,
    n_frames: usize,
    dim: usize,
    subspaces: usize,
    window: usize,
) -> Result<(TrainingExample, ScorerParams, ScorerConfig)> {
    let mut rng = Prng::new(seed);
    let config = ScorerConfig {
        dim,
        subspaces,
        window,
        lambda_init: 0.5,
        seed: seed.wrapping_mul(31).wrapping_add(7),
    };
    let mut params = init_scorer(&config)?;
    for b in params.gate_bias.value.values_mut() {
        *b = rng.uniform(-0.5, 0.5);
    }
    for g in params.log_gamma.value.values_mut() {
        *g = rng.uniform(-0.7, 0.7);
    }
    params.lambda_logit.value.values_mut()[0] = rng.uniform(-1.5, 1.5);
    let frames: Vec<FrameEmbedding> = (0..n_frames)
        .map(|_| FrameEmbedding::new((0..dim).map(|_| rng.normal()).collect()))
        .collect::<Result<_>>()?;
    let query = QueryEmbedding::new((0..dim).map(|_| rng.normal()).collect())?;
    let n_pos = 1 + rng.below(n_frames.saturating_sub(1).max(1));
    let mut mask: Vec<bool> = (0..n_frames).map(|i| i < n_pos.min(n_frames - 1)).collect();
    rng.shuffle(&mut mask);
    if !mask.iter().any(|&m| m) {
        mask[0] = true;
    }
    let example = TrainingExample::new(frames, query, mask)?;
    Ok((example, params, config))
}
