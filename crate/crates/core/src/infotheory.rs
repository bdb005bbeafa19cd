//! Exact conditional mutual information on small discrete models.
//!
//! A [`DiscreteModel`] is the joint table `p(f_1, .., f_n, O)` for one fixed query
//! context. The evidence objective is `F(S) = I(S; O) = H(O) - H(O | S)`, computed by
//! marginalizing the table, in nats. The oracles here enumerate subsets exhaustively,
//! so every operation carries an explicit size guard.
//!
//! Submodularity of `F` is only guaranteed when frames are conditionally independent
//! given the answer (the `factorized` family). [`DiscreteModel::xor`] is the standard
//! counterexample outside that family.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Prng;

/// Largest model accepted by [`exhaustive_select`] and the other enumerators.
pub const MAX_FRAMES: usize = 14;
/// Largest model accepted by [`check_submodular`] (it visits `3^n * n` triples).
pub const MAX_SUBMODULAR_FRAMES: usize = 10;

const MASS_TOLERANCE: f64 = 1e-12;
const TIE_TOLERANCE: f64 = 1e-12;
/// Slack allowed before a diminishing-returns or monotonicity breach is reported.
pub const VIOLATION_TOLERANCE: f64 = 1e-9;

/// Joint distribution over `n` discrete frames and a discrete answer.
///
/// `joint` is row-major with frame 0 varying slowest and the answer fastest:
/// `index = ((x_0 * a_1 + x_1) * a_2 + ... + x_{n-1}) * |O| + o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteModel {
    frame_alphabet: Vec<usize>,
    answer_alphabet: usize,
    joint: Vec<f64>,
    factorized: bool,
}

/// Serialized form of a model fixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFixture {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub frame_alphabet: Vec<usize>,
    pub answer_alphabet: usize,
    #[serde(default)]
    pub factorized: bool,
    pub joint: Vec<f64>,
}

impl DiscreteModel {
    /// Validates and wraps a joint table. When `factorized` is set the table must
    /// equal `p(o) * prod_i p(x_i | o)` built from its own marginals.
    pub fn new(
        frame_alphabet: Vec<usize>,
        answer_alphabet: usize,
        joint: Vec<f64>,
        factorized: bool,
    ) -> Result<Self> {
        if frame_alphabet.len() > MAX_FRAMES {
            return Err(Error::Intractable {
                operation: "discrete model",
                n_frames: frame_alphabet.len(),
                limit: MAX_FRAMES,
            });
        }
        if answer_alphabet == 0 || frame_alphabet.contains(&0) {
            return Err(Error::InvalidModel("alphabets must be non-empty".into()));
        }
        let cells = frame_alphabet
            .iter()
            .try_fold(answer_alphabet, |acc, &a| acc.checked_mul(a))
            .ok_or_else(|| Error::InvalidModel("joint table too large".into()))?;
        if joint.len() != cells {
            return Err(Error::InvalidModel(format!(
                "joint table has {} entries, alphabets require {cells}",
                joint.len()
            )));
        }
        if let Some(i) = joint.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidModel(format!(
                "entry {i} is not a probability: {}",
                joint[i]
            )));
        }
        let total: f64 = joint.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidModel(format!("total mass {total} != 1")));
        }
        let model = Self {
            frame_alphabet,
            answer_alphabet,
            joint,
            factorized,
        };
        if factorized {
            let rebuilt = model.naive_bayes_reconstruction();
            let worst = rebuilt
                .iter()
                .zip(&model.joint)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if worst > MASS_TOLERANCE {
                return Err(Error::InvalidModel(format!(
                    "flagged factorized but deviates from the product of its conditionals by {worst:e}"
                )));
            }
        }
        Ok(model)
    }

    /// Naive-Bayes model from `prior[o]` and `conditionals[i][o][x] = p(x_i = x | o)`.
    pub fn from_factors(prior: &[f64], conditionals: &[Vec<Vec<f64>>]) -> Result<Self> {
        let answer_alphabet = prior.len();
        let mut frame_alphabet = Vec::with_capacity(conditionals.len());
        for (i, cond) in conditionals.iter().enumerate() {
            if cond.len() != answer_alphabet {
                return Err(Error::InvalidModel(format!(
                    "frame {i} has {} conditional rows for {answer_alphabet} answers",
                    cond.len()
                )));
            }
            let a = cond.first().map_or(0, Vec::len);
            if cond.iter().any(|row| row.len() != a) {
                return Err(Error::InvalidModel(format!("frame {i} has ragged rows")));
            }
            frame_alphabet.push(a);
        }
        let frames_cells: usize = frame_alphabet.iter().product();
        let mut joint = vec![0.0; frames_cells * answer_alphabet];
        let mut digits = vec![0usize; frame_alphabet.len()];
        for cell in 0..frames_cells {
            for (o, &po) in prior.iter().enumerate() {
                let p = digits
                    .iter()
                    .enumerate()
                    .fold(po, |acc, (i, &x)| acc * conditionals[i][o][x]);
                joint[cell * answer_alphabet + o] = p;
            }
            increment(&mut digits, &frame_alphabet);
        }
        Self::new(frame_alphabet, answer_alphabet, joint, true)
    }

    /// `O` uniform binary, frame 0 copies `O`, frame 1 is an independent fair coin.
    pub fn copy() -> Self {
        Self::from_factors(
            &[0.5, 0.5],
            &[
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            ],
        )
        .expect("copy model is valid")
    }

    /// Two independent fair-coin frames with `O = x_0 xor x_1`.
    pub fn xor() -> Self {
        let mut joint = vec![0.0; 8];
        for x0 in 0..2 {
            for x1 in 0..2 {
                joint[(x0 * 2 + x1) * 2 + (x0 ^ x1)] = 0.25;
            }
        }
        Self::new(vec![2, 2], 2, joint, false).expect("xor model is valid")
    }

    /// Random naive-Bayes model. Probability vectors come from normalized
    /// exponential draws, i.e. a flat Dirichlet.
    pub fn random_factorized(
        n_frames: usize,
        frame_alphabet: usize,
        answer_alphabet: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        if n_frames > MAX_FRAMES {
            return Err(Error::Intractable {
                operation: "discrete model",
                n_frames,
                limit: MAX_FRAMES,
            });
        }
        let prior = random_simplex(answer_alphabet, rng);
        let conditionals: Vec<Vec<Vec<f64>>> = (0..n_frames)
            .map(|_| {
                (0..answer_alphabet)
                    .map(|_| random_simplex(frame_alphabet, rng))
                    .collect()
            })
            .collect();
        let mut model = Self::from_factors(&prior, &conditionals)?;
        // Renormalize away the last ulp of drift from the products.
        let total: f64 = model.joint.iter().sum();
        model.joint.iter_mut().for_each(|p| *p /= total);
        Ok(model)
    }

    /// Random unstructured joint table (no conditional independence).
    pub fn random_general(
        n_frames: usize,
        frame_alphabet: usize,
        answer_alphabet: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        let cells = frame_alphabet.pow(n_frames as u32) * answer_alphabet;
        let joint = random_simplex(cells, rng);
        Self::new(
            vec![frame_alphabet; n_frames],
            answer_alphabet,
            joint,
            false,
        )
    }

    pub fn from_fixture(fixture: ModelFixture) -> Result<Self> {
        Self::new(
            fixture.frame_alphabet,
            fixture.answer_alphabet,
            fixture.joint,
            fixture.factorized,
        )
    }

    pub fn to_fixture(&self, name: Option<String>) -> ModelFixture {
        ModelFixture {
            name,
            frame_alphabet: self.frame_alphabet.clone(),
            answer_alphabet: self.answer_alphabet,
            factorized: self.factorized,
            joint: self.joint.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fixture: ModelFixture = serde_json::from_str(text)
            .map_err(|e| Error::InvalidModel(format!("fixture parse error: {e}")))?;
        Self::from_fixture(fixture)
    }

    pub fn to_json(&self, name: Option<String>) -> String {
        serde_json::to_string_pretty(&self.to_fixture(name)).expect("fixture serializes")
    }

    pub fn n_frames(&self) -> usize {
        self.frame_alphabet.len()
    }

    pub fn frame_alphabet(&self) -> &[usize] {
        &self.frame_alphabet
    }

    pub fn answer_alphabet(&self) -> usize {
        self.answer_alphabet
    }

    pub fn joint(&self) -> &[f64] {
        &self.joint
    }

    pub fn is_factorized(&self) -> bool {
        self.factorized
    }

    /// `p(o) * prod_i p(x_i | o)` from the table's own single-frame marginals.
    fn naive_bayes_reconstruction(&self) -> Vec<f64> {
        let no = self.answer_alphabet;
        let prior = self.marginal_with_answer(&[]);
        let conditionals: Vec<Vec<f64>> = (0..self.n_frames())
            .map(|i| {
                let mut t = self.marginal_with_answer(&[i]);
                for (k, p) in t.iter_mut().enumerate() {
                    let po = prior[k % no];
                    *p = if po > 0.0 { *p / po } else { 0.0 };
                }
                t
            })
            .collect();
        let mut out = Vec::with_capacity(self.joint.len());
        let mut digits = vec![0usize; self.n_frames()];
        let cells = self.joint.len() / no;
        for _ in 0..cells {
            for (o, &po) in prior.iter().enumerate() {
                let p = digits
                    .iter()
                    .enumerate()
                    .fold(po, |acc, (i, &x)| acc * conditionals[i][x * no + o]);
                out.push(p);
            }
            increment(&mut digits, &self.frame_alphabet);
        }
        out
    }

    /// Marginal table `p(x_S, o)`, flattened with the answer fastest.
    fn marginal_with_answer(&self, subset: &[usize]) -> Vec<f64> {
        let n = self.n_frames();
        let mut strides_in = vec![0usize; n];
        let mut s = 1;
        for i in (0..n).rev() {
            strides_in[i] = s;
            s *= self.frame_alphabet[i];
        }
        let size: usize = subset.iter().map(|&i| self.frame_alphabet[i]).product();
        let mut out = vec![0.0; size * self.answer_alphabet];
        let frame_cells = s;
        for cell in 0..frame_cells {
            let mut key = 0;
            for &i in subset {
                let x = (cell / strides_in[i]) % self.frame_alphabet[i];
                key = key * self.frame_alphabet[i] + x;
            }
            let src = &self.joint[cell * self.answer_alphabet..(cell + 1) * self.answer_alphabet];
            let dst = &mut out[key * self.answer_alphabet..(key + 1) * self.answer_alphabet];
            for (d, p) in dst.iter_mut().zip(src) {
                *d += p;
            }
        }
        out
    }

    /// Entropy of the answer, `H(O)`.
    pub fn answer_entropy(&self) -> f64 {
        entropy(&self.marginal_with_answer(&[])[..])
    }

    /// Joint entropy of the frames in `subset`, `H(X_S)`.
    pub fn subset_entropy(&self, subset: &[usize]) -> Result<f64> {
        let subset = self.normalize_subset(subset)?;
        let table = self.marginal_with_answer(&subset);
        let marg: Vec<f64> = table
            .chunks_exact(self.answer_alphabet)
            .map(|c| c.iter().sum())
            .collect();
        Ok(entropy(&marg))
    }

    fn normalize_subset(&self, subset: &[usize]) -> Result<Vec<usize>> {
        let n = self.n_frames();
        if let Some(&index) = subset.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index, n_frames: n });
        }
        let mut s = subset.to_vec();
        s.sort_unstable();
        s.dedup();
        Ok(s)
    }

    fn mi_unchecked(&self, subset: &[usize]) -> f64 {
        if subset.is_empty() {
            return 0.0;
        }
        let table = self.marginal_with_answer(subset);
        let h_joint = entropy(&table);
        let mut h_frames = 0.0;
        let mut p_answer = vec![0.0; self.answer_alphabet];
        for row in table.chunks_exact(self.answer_alphabet) {
            h_frames -= xlogx(row.iter().sum());
            for (a, p) in p_answer.iter_mut().zip(row) {
                *a += p;
            }
        }
        entropy(&p_answer) + h_frames - h_joint
    }

    /// `E[ln p(O | X_S)]`, evaluated directly from the conditional rather than
    /// through entropies.
    fn expected_log_likelihood(&self, subset: &[usize]) -> f64 {
        let table = self.marginal_with_answer(subset);
        let mut total = 0.0;
        for row in table.chunks_exact(self.answer_alphabet) {
            let ps: f64 = row.iter().sum();
            for &p in row {
                if p > 0.0 {
                    total += p * (p / ps).ln();
                }
            }
        }
        total
    }

    /// `F` for every subset, indexed by bitmask.
    fn all_subset_values(&self) -> Vec<f64> {
        let n = self.n_frames();
        (0u32..1 << n)
            .map(|mask| self.mi_unchecked(&mask_to_indices(mask)))
            .collect()
    }
}

fn increment(digits: &mut [usize], radix: &[usize]) {
    for i in (0..digits.len()).rev() {
        digits[i] += 1;
        if digits[i] < radix[i] {
            return;
        }
        digits[i] = 0;
    }
}

fn random_simplex(k: usize, rng: &mut Prng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| -(1.0 - rng.next_f64()).ln()).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

#[inline]
fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn entropy(ps: &[f64]) -> f64 {
    -ps.iter().copied().map(xlogx).sum::<f64>()
}

fn mask_to_indices(mask: u32) -> Vec<usize> {
    (0..32).filter(|i| mask & (1 << i) != 0).collect()
}

/// A subset of frame indices (sorted, distinct) with its objective value in nats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetScore {
    pub subset: Vec<usize>,
    pub value: f64,
}

/// Exact `F(S) = I(X_S; O)` in nats. `F(empty) = 0`.
pub fn conditional_mi(model: &DiscreteModel, subset: &[usize]) -> Result<f64> {
    let subset = model.normalize_subset(subset)?;
    Ok(model.mi_unchecked(&subset))
}

/// `sum_{f in S} F({f})`.
pub fn modular_upper_bound(model: &DiscreteModel, subset: &[usize]) -> Result<f64> {
    let subset = model.normalize_subset(subset)?;
    Ok(subset.iter().map(|&f| model.mi_unchecked(&[f])).sum())
}

/// Lexicographic enumeration of `k`-combinations of `0..n`.
struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (k <= n).then(|| (0..k).collect()),
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let cur = self.current.as_mut().unwrap();
        let k = cur.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            if cur[i] < self.n - k + i {
                cur[i] += 1;
                for j in i + 1..k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

fn guard(operation: &'static str, n_frames: usize, limit: usize) -> Result<()> {
    if n_frames > limit {
        return Err(Error::Intractable {
            operation,
            n_frames,
            limit,
        });
    }
    Ok(())
}

/// Global optimum of `F` over `|S| <= m`.
///
/// `F` is monotone, so the search runs over subsets of size exactly `min(m, n)`;
/// ties go to the lexicographically smallest subset.
pub fn exhaustive_select(model: &DiscreteModel, m: usize) -> Result<SubsetScore> {
    guard("exhaustive search", model.n_frames(), MAX_FRAMES)?;
    let k = m.min(model.n_frames());
    let mut best: Option<SubsetScore> = None;
    for subset in Combinations::new(model.n_frames(), k) {
        let value = model.mi_unchecked(&subset);
        if best
            .as_ref()
            .is_none_or(|b| value > b.value + TIE_TOLERANCE)
        {
            best = Some(SubsetScore { subset, value });
        }
    }
    Ok(best.expect("at least one combination"))
}

/// One greedy pick: the chosen frame and its marginal gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GreedyStep {
    pub frame: usize,
    pub gain: f64,
}

/// Greedy maximization with the sequence of marginal gains.
pub fn greedy_path(model: &DiscreteModel, m: usize) -> Result<Vec<GreedyStep>> {
    let n = model.n_frames();
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "budget {m} exceeds {n} frames"
        )));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    let mut current = 0.0;
    let mut steps = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(usize, f64, f64)> = None;
        for f in (0..n).filter(|f| !chosen.contains(f)) {
            let mut trial = chosen.clone();
            trial.push(f);
            trial.sort_unstable();
            let value = model.mi_unchecked(&trial);
            let gain = value - current;
            if best.is_none_or(|(_, g, _)| gain > g + TIE_TOLERANCE) {
                best = Some((f, gain, value));
            }
        }
        let (frame, gain, value) = best.expect("a frame remains");
        chosen.push(frame);
        current = value;
        steps.push(GreedyStep { frame, gain });
    }
    Ok(steps)
}

/// Greedy selection: repeatedly add the frame with the largest marginal gain,
/// lowest index on ties.
pub fn greedy_select(model: &DiscreteModel, m: usize) -> Result<SubsetScore> {
    let steps = greedy_path(model, m)?;
    let mut subset: Vec<usize> = steps.iter().map(|s| s.frame).collect();
    subset.sort_unstable();
    let value = model.mi_unchecked(&subset);
    Ok(SubsetScore { subset, value })
}

/// Selection by the modular relaxation: the `m` frames with the largest
/// singleton values (lowest index on ties).
pub fn modular_select(model: &DiscreteModel, m: usize) -> Result<SubsetScore> {
    let n = model.n_frames();
    let singles: Vec<f64> = (0..n).map(|f| model.mi_unchecked(&[f])).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        singles[b]
            .partial_cmp(&singles[a])
            .expect("finite")
            .then(a.cmp(&b))
    });
    let mut subset: Vec<usize> = order.into_iter().take(m.min(n)).collect();
    subset.sort_unstable();
    let value = model.mi_unchecked(&subset);
    Ok(SubsetScore { subset, value })
}

/// Outcome of comparing `argmax E[ln p(O|S)]` with `argmax F(S)` over `|S| <= m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoglikReport {
    pub loglik_argmax: SubsetScore,
    pub mi_argmax: SubsetScore,
    /// The two argmax sets are equal, or each set is also optimal for the
    /// other objective (a tie).
    pub coincide: bool,
}

/// Enumerates every subset with `|S| <= m` (sizes ascending, lexicographic within
/// a size) and compares the two maximizers.
pub fn verify_loglik_equivalence(model: &DiscreteModel, m: usize) -> Result<LoglikReport> {
    guard("log-likelihood enumeration", model.n_frames(), MAX_FRAMES)?;
    let n = model.n_frames();
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "budget {m} exceeds {n} frames"
        )));
    }
    let mut best_ll: Option<SubsetScore> = None;
    let mut best_mi: Option<SubsetScore> = None;
    for k in 0..=m {
        for subset in Combinations::new(n, k) {
            let ll = model.expected_log_likelihood(&subset);
            let mi = model.mi_unchecked(&subset);
            if best_ll
                .as_ref()
                .is_none_or(|b| ll > b.value + TIE_TOLERANCE)
            {
                best_ll = Some(SubsetScore {
                    subset: subset.clone(),
                    value: ll,
                });
            }
            if best_mi
                .as_ref()
                .is_none_or(|b| mi > b.value + TIE_TOLERANCE)
            {
                best_mi = Some(SubsetScore { subset, value: mi });
            }
        }
    }
    let loglik_argmax = best_ll.expect("empty subset always enumerated");
    let mi_argmax = best_mi.expect("empty subset always enumerated");
    let coincide = loglik_argmax.subset == mi_argmax.subset || {
        let mi_of_ll = model.mi_unchecked(&loglik_argmax.subset);
        let ll_of_mi = model.expected_log_likelihood(&mi_argmax.subset);
        mi_of_ll >= mi_argmax.value - VIOLATION_TOLERANCE
            && ll_of_mi >= loglik_argmax.value - VIOLATION_TOLERANCE
    };
    Ok(LoglikReport {
        loglik_argmax,
        mi_argmax,
        coincide,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// `F(A + f) - F(A) < F(B + f) - F(B)` for `A ⊆ B`, `f ∉ B`.
    Submodularity {
        a: Vec<usize>,
        b: Vec<usize>,
        frame: usize,
        gain_a: f64,
        gain_b: f64,
    },
    /// `F(A) > F(B)` for `A ⊆ B`.
    Monotonicity {
        a: Vec<usize>,
        b: Vec<usize>,
        value_a: f64,
        value_b: f64,
    },
}

impl Violation {
    pub fn is_submodularity(&self) -> bool {
        matches!(self, Violation::Submodularity { .. })
    }
}

/// Checks every `(A ⊆ B, f ∉ B)` triple for diminishing returns and every
/// `A ⊆ B` pair for monotonicity, with [`VIOLATION_TOLERANCE`] slack.
pub fn check_submodular(model: &DiscreteModel) -> Result<Vec<Violation>> {
    let n = model.n_frames();
    guard("submodularity check", n, MAX_SUBMODULAR_FRAMES)?;
    let values = model.all_subset_values();
    let full: u32 = (1 << n) - 1;
    let mut violations = Vec::new();
    for b in 0..=full {
        // every submask a of b, including b itself and the empty set
        let mut a = b;
        loop {
            if values[a as usize] > values[b as usize] + VIOLATION_TOLERANCE {
                violations.push(Violation::Monotonicity {
                    a: mask_to_indices(a),
                    b: mask_to_indices(b),
                    value_a: values[a as usize],
                    value_b: values[b as usize],
                });
            }
            if a != b {
                for f in (0..n).filter(|f| b & (1 << f) == 0) {
                    let gain_a = values[(a | 1 << f) as usize] - values[a as usize];
                    let gain_b = values[(b | 1 << f) as usize] - values[b as usize];
                    if gain_a < gain_b - VIOLATION_TOLERANCE {
                        violations.push(Violation::Submodularity {
                            a: mask_to_indices(a),
                            b: mask_to_indices(b),
                            frame: f,
                            gain_a,
                            gain_b,
                        });
                    }
                }
            }
            if a == 0 {
                break;
            }
            a = (a - 1) & b;
        }
    }
    Ok(violations)
}

/// `F(S)` for every subset of a small model, keyed by sorted index list.
pub fn subset_values(model: &DiscreteModel) -> Result<Vec<SubsetScore>> {
    guard("subset table", model.n_frames(), MAX_SUBMODULAR_FRAMES)?;
    Ok(model
        .all_subset_values()
        .into_iter()
        .enumerate()
        .map(|(mask, value)| SubsetScore {
            subset: mask_to_indices(mask as u32),
            value,
        })
        .collect())
}
