//! Budgeted frame selection over a score vector.
//!
//! The timeline is split into `B` contiguous bins and the `k_bin` best frames of
//! each bin are kept, for a budget of `m = B * k_bin`. `k_bin = 1` gives one frame
//! per bin; `B = 1` gives global top-m.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed time interval `[start_sec, end_sec]` annotated as sufficient evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSegment {
    pub start_sec: f64,
    pub end_sec: f64,
}

impl EvidenceSegment {
    pub fn new(start_sec: f64, end_sec: f64) -> Result<Self> {
        let s = Self { start_sec, end_sec };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_sec.is_finite() && self.end_sec.is_finite()) {
            return Err(Error::NonFinite("evidence segment".into()));
        }
        if self.start_sec < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative segment start {}",
                self.start_sec
            )));
        }
        if self.start_sec > self.end_sec {
            return Err(Error::InvalidArgument(format!(
                "segment start {} after end {}",
                self.start_sec, self.end_sec
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, t: f64) -> bool {
        self.start_sec <= t && t <= self.end_sec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub bins: usize,
    pub per_bin: usize,
}

impl SelectionConfig {
    pub fn new(bins: usize, per_bin: usize) -> Result<Self> {
        if bins == 0 || per_bin == 0 {
            return Err(Error::InvalidArgument(
                "bins and per-bin count must be at least 1".into(),
            ));
        }
        Ok(Self { bins, per_bin })
    }

    /// One frame from each of `m` bins.
    pub fn diverse(m: usize) -> Result<Self> {
        Self::new(m, 1)
    }

    /// A single bin holding the whole timeline.
    pub fn global(m: usize) -> Result<Self> {
        Self::new(1, m)
    }

    pub fn budget(&self) -> usize {
        self.bins * self.per_bin
    }
}

/// Selected frame indices, strictly increasing, with their scores when the
/// selection came from a score vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub scores: Option<Vec<f64>>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `B` contiguous ranges covering `0..n`; the first `n mod B` bins hold one extra frame.
pub fn bin_partition(n: usize, bins: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 || bins == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot partition {n} frames into {bins} bins"
        )));
    }
    if bins > n {
        return Err(Error::InvalidArgument(format!(
            "{bins} bins exceed {n} frames; a bin would be empty"
        )));
    }
    let base = n / bins;
    let extra = n % bins;
    let mut start = 0;
    Ok((0..bins)
        .map(|b| {
            let len = base + usize::from(b < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Top `k` indices of `scores[range]`, best first, lower index on ties.
fn top_k_in(scores: &[f64], range: Range<usize>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = range.collect();
    // partial_cmp, not total_cmp: -0.0 and 0.0 must tie
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Per-bin top-`k_bin` selection, reported in ascending frame order.
pub fn select(scores: &[f64], config: &SelectionConfig) -> Result<Selection> {
    if config.bins == 0 || config.per_bin == 0 {
        return Err(Error::InvalidArgument(
            "bins and per-bin count must be at least 1".into(),
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let bins = bin_partition(scores.len(), config.bins)?;
    let mut indices: Vec<usize> = bins
        .into_iter()
        .flat_map(|r| top_k_in(scores, r, config.per_bin))
        .collect();
    indices.sort_unstable();
    let picked = indices.iter().map(|&i| scores[i]).collect();
    Ok(Selection {
        indices,
        scores: Some(picked),
    })
}

/// `m` evenly spaced frames `floor(i * n / m)`, deduplicated; all frames when `m >= n`.
pub fn uniform_select(n: usize, m: usize) -> Selection {
    let mut indices: Vec<usize> = if m >= n {
        (0..n).collect()
    } else {
        (0..m).map(|i| i * n / m).collect()
    };
    indices.dedup();
    Selection {
        indices,
        scores: None,
    }
}

/// True iff some selected frame's timestamp `index / fps` lies in some segment.
pub fn coverage(selection: &Selection, segments: &[EvidenceSegment], fps: f64) -> bool {
    assert!(fps > 0.0, "fps must be positive");
    selection.indices.iter().any(|&i| {
        let t = i as f64 / fps;
        segments.iter().any(|s| s.contains(t))
    })
}

/// Fraction of (selection, annotation) pairs with [`coverage`].
pub fn coverage_rate<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a Selection, &'a [EvidenceSegment], f64)>,
{
    let mut total = 0usize;
    let mut covered = 0usize;
    for (sel, segs, fps) in pairs {
        if !(fps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fps must be positive, got {fps}"
            )));
        }
        total += 1;
        covered += usize::from(coverage(sel, segs, fps));
    }
    if total == 0 {
        return Err(Error::Empty("coverage dataset"));
    }
    Ok(covered as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Prng;
    use proptest::prelude::*;

    fn seg(a: f64, b: f64) -> EvidenceSegment {
        EvidenceSegment::new(a, b).unwrap()
    }

    #[test]
    fn partition_cases() {
        assert_eq!(bin_partition(10, 3).unwrap(), vec![0..4, 4..7, 7..10]);
        assert_eq!(
            bin_partition(8, 8).unwrap(),
            (0..8).map(|i| i..i + 1).collect::<Vec<_>>()
        );
        assert_eq!(bin_partition(7, 2).unwrap(), vec![0..4, 4..7]);
        assert!(bin_partition(3, 4).is_err());
        assert!(bin_partition(0, 1).is_err());
    }

    #[test]
    fn select_cases() {
        let s = select(&[3.0, 1.0, 2.0, 5.0], &SelectionConfig::new(2, 1).unwrap()).unwrap();
        assert_eq!(s.indices, vec![0, 3]);
        assert_eq!(s.scores, Some(vec![3.0, 5.0]));
        let s = select(&[0.9, 0.1, 0.5, 0.7], &SelectionConfig::global(2).unwrap()).unwrap();
        assert_eq!(s.indices, vec![0, 3]);
        let s = select(&[1.0; 4], &SelectionConfig::new(2, 1).unwrap()).unwrap();
        assert_eq!(s.indices, vec![0, 2]);
        // k_bin larger than the bin takes the whole bin
        let s = select(&[1.0, 2.0, 3.0], &SelectionConfig::new(1, 10).unwrap()).unwrap();
        assert_eq!(s.indices, vec![0, 1, 2]);
        assert!(select(&[1.0, 2.0], &SelectionConfig::new(3, 1).unwrap()).is_err());
        assert!(select(&[1.0, f64::NAN], &SelectionConfig::new(1, 1).unwrap()).is_err());
        assert!(SelectionConfig::new(0, 1).is_err());
    }

    #[test]
    fn uniform_cases() {
        assert_eq!(uniform_select(10, 5).indices, vec![0, 2, 4, 6, 8]);
        assert_eq!(uniform_select(4, 9).indices, vec![0, 1, 2, 3]);
        assert_eq!(uniform_select(7, 3).indices, vec![0, 2, 4]);
        assert_eq!(uniform_select(1024, 32).indices.len(), 32);
    }

    #[test]
    fn coverage_cases() {
        let sel = |v: Vec<usize>| Selection {
            indices: v,
            scores: None,
        };
        assert!(coverage(&sel(vec![5]), &[seg(4.0, 6.0)], 1.0));
        assert!(!coverage(&sel(vec![5]), &[], 1.0));
        assert!(!coverage(&sel(vec![0, 10]), &[seg(3.0, 7.0)], 1.0));
        // boundaries are inclusive
        assert!(coverage(&sel(vec![3]), &[seg(3.0, 7.0)], 1.0));
        assert!(coverage(&sel(vec![14]), &[seg(3.0, 7.0)], 2.0));
    }

    #[test]
    fn coverage_rate_cases() {
        let a = Selection {
            indices: vec![1],
            scores: None,
        };
        let segs = vec![seg(0.0, 2.0)];
        let none: Vec<EvidenceSegment> = vec![];
        let all = vec![(&a, segs.as_slice(), 1.0), (&a, segs.as_slice(), 1.0)];
        assert_eq!(coverage_rate(all).unwrap(), 1.0);
        let zero = vec![(&a, none.as_slice(), 1.0)];
        assert_eq!(coverage_rate(zero).unwrap(), 0.0);
        let half = vec![(&a, segs.as_slice(), 1.0), (&a, none.as_slice(), 1.0)];
        assert_eq!(coverage_rate(half).unwrap(), 0.5);
        assert!(coverage_rate(Vec::new()).is_err());
    }

    fn random_scores(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = Prng::new(seed);
        (0..n).map(|_| rng.normal()).collect()
    }

    proptest! {
        #[test]
        fn output_is_sorted_unique_in_bounds(seed in any::<u64>(), n in 1usize..60, b in 1usize..10, k in 1usize..6) {
            prop_assume!(b <= n);
            let scores = random_scores(seed, n);
            let s = select(&scores, &SelectionConfig::new(b, k).unwrap()).unwrap();
            prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.indices.iter().all(|&i| i < n));
            prop_assert!(s.len() <= (b * k).min(n));
        }

        #[test]
        fn ranking_invariant(seed in any::<u64>(), n in 2usize..40, b in 1usize..6, k in 1usize..4, c in -100.0f64..100.0, alpha in 0.01f64..100.0) {
            prop_assume!(b <= n);
            // integer-valued scores keep the affine maps exact
            let scores: Vec<f64> = random_scores(seed, n).iter().map(|s| (s * 8.0).round()).collect();
            let cfg = SelectionConfig::new(b, k).unwrap();
            let base = select(&scores, &cfg).unwrap().indices;
            let shifted: Vec<f64> = scores.iter().map(|s| s + c.round()).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * alpha.round().max(1.0)).collect();
            prop_assert_eq!(&select(&shifted, &cfg).unwrap().indices, &base);
            prop_assert_eq!(&select(&scaled, &cfg).unwrap().indices, &base);
        }

        #[test]
        fn decomposes_over_bins(seed in any::<u64>(), n in 1usize..50, b in 1usize..8, k in 1usize..4) {
            prop_assume!(b <= n);
            let scores = random_scores(seed, n);
            let whole = select(&scores, &SelectionConfig::new(b, k).unwrap()).unwrap().indices;
            let mut union = Vec::new();
            for r in bin_partition(n, b).unwrap() {
                let local = select(&scores[r.clone()], &SelectionConfig::global(k).unwrap()).unwrap();
                union.extend(local.indices.iter().map(|i| i + r.start));
            }
            union.sort_unstable();
            prop_assert_eq!(whole, union);
        }
    }
}
