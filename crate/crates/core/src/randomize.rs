//! Counterfeit generation, scoring, ranking with random tie-breaking, and
//! label assignment.
//!
//! Every row draws its counterfeits from its own stream
//! `seed / "labeling" / row` and breaks ties with `seed / "tie-break" / row`,
//! so a row's label does not depend on which other rows are processed.

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::model::{ConditionalSampler, LabeledSample, SourceDataset, Statistic};
use crate::rng::{streams, SeedTree};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RandomizeError {
    #[error("row {0}: statistic returned a non-finite value")]
    NonFiniteStatistic(usize),

    #[error("K·L must be at least 2 (got K={k}, L={l})")]
    TooFewCounterfeits { k: usize, l: usize },
}

/// Labels in `1..=L` and ranks in `1..=M+1`, one per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelAssignment {
    pub labels: Vec<usize>,
    pub ranks: Vec<usize>,
}

/// `count` draws from `P_T(X | Z = z)`.
pub fn counterfeits(
    z: &[f64],
    sampler: &dyn ConditionalSampler,
    count: usize,
    rng: &mut dyn RngCore,
) -> Vec<f64> {
    (0..count).map(|_| sampler.sample(z, rng)).collect()
}

/// Rank of `t0` among `t0` and the counterfeit scores under ascending order.
/// Within a block of equal values the position is uniform.
pub fn rank_with_ties(t0: f64, t_counterfeit: &[f64], rng: &mut dyn RngCore) -> usize {
    let mut less = 0;
    let mut ties = 0;
    for &t in t_counterfeit {
        if t < t0 {
            less += 1;
        } else if t == t0 {
            ties += 1;
        }
    }
    let offset = if ties == 0 { 0 } else { rng.random_range(0..=ties) };
    less + 1 + offset
}

/// Label of a rank when ranks are cut into `L` blocks of `K`.
pub fn label_of_rank(rank: usize, k: usize) -> usize {
    rank.div_ceil(k)
}

/// Rank of one row, using the streams addressed by `row`.
pub fn rank_row(
    sample: &LabeledSample,
    row: usize,
    sampler: &dyn ConditionalSampler,
    statistic: &dyn Statistic,
    m: usize,
    seed: u64,
) -> Result<usize, RandomizeError> {
    let root = SeedTree::new(seed);
    let mut draw_rng = root.child(streams::LABELING).index(row as u64).rng();
    let mut tie_rng = root.child(streams::TIE_BREAK).index(row as u64).rng();

    let score = |x: f64| statistic.score(x, sample.y, &sample.z, &sample.v);
    let t0 = score(sample.x);
    if !t0.is_finite() {
        return Err(RandomizeError::NonFiniteStatistic(row));
    }
    let mut scores = Vec::with_capacity(m);
    for _ in 0..m {
        let t = score(sampler.sample(&sample.z, &mut draw_rng));
        if !t.is_finite() {
            return Err(RandomizeError::NonFiniteStatistic(row));
        }
        scores.push(t);
    }
    Ok(rank_with_ties(t0, &scores, &mut tie_rng))
}

/// Labels the rows of `rows`, where each entry carries the stream index to use.
pub fn assign_labels_indexed<'a>(
    rows: impl IntoIterator<Item = (usize, &'a LabeledSample)>,
    sampler: &dyn ConditionalSampler,
    statistic: &dyn Statistic,
    k: usize,
    l: usize,
    seed: u64,
) -> Result<LabelAssignment, RandomizeError> {
    if k * l < 2 {
        return Err(RandomizeError::TooFewCounterfeits { k, l });
    }
    let m = k * l - 1;
    let mut out = LabelAssignment { labels: Vec::new(), ranks: Vec::new() };
    for (row, sample) in rows {
        let rank = rank_row(sample, row, sampler, statistic, m, seed)?;
        out.ranks.push(rank);
        out.labels.push(label_of_rank(rank, k));
    }
    Ok(out)
}

pub fn assign_labels(
    dataset: &SourceDataset,
    sampler: &dyn ConditionalSampler,
    statistic: &dyn Statistic,
    k: usize,
    l: usize,
    seed: u64,
) -> Result<LabelAssignment, RandomizeError> {
    assign_labels_indexed(dataset.samples().iter().enumerate(), sampler, statistic, k, l, seed)
}
