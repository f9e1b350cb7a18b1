//! Aggregation of experts that emit trajectory samples instead of mixtures.
//!
//! Each expert's loss is computed from its own samples, so the combined loss
//! `sum_i alpha_i l_i` stays linear in `alpha` and feeds the learners
//! unchanged. A mixture sample set is drawn by importance sampling: expert `i`
//! contributes `floor(M alpha_i)` draws, and the shortfall goes to the experts
//! with the largest fractional remainders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{AgentState, WeightVector};
use crate::losses::{check_k, LossEvaluation};
use crate::metrics::GroundTruthFuture;
use crate::scalar::Scalar;

/// `M >= 1` sampled trajectories sharing a horizon `K >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T> {
    samples: Vec<Vec<AgentState<T>>>,
}

impl<T: Scalar> SampleSet<T> {
    pub fn new(samples: Vec<Vec<AgentState<T>>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid("sample set", "at least one sample is required"));
        };
        let horizon = first.len();
        if horizon == 0 {
            return Err(Error::invalid("sample set", "horizon must be at least 1"));
        }
        if let Some(bad) = samples.iter().find(|s| s.len() != horizon) {
            return Err(Error::HorizonMismatch {
                expected: horizon,
                found: bad.len(),
            });
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Vec<AgentState<T>>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.samples[0].len()
    }

    fn first_step_sq_errors(&self, x_true: &AgentState<T>) -> Vec<T> {
        self.samples
            .iter()
            .map(|s| {
                let d = x_true.planar_distance(&s[0]);
                d * d
            })
            .collect()
    }
}

/// Mean squared first-step `(x, y)` error over all samples.
pub fn sample_loss_mse<T: Scalar>(samples: &SampleSet<T>, x_true: &AgentState<T>) -> T {
    let errs = samples.first_step_sq_errors(x_true);
    let total = errs.iter().fold(T::zero(), |acc, &e| acc + e);
    total / T::from_usize(errs.len()).unwrap()
}

/// Mean of the `k` smallest squared first-step `(x, y)` errors.
pub fn sample_loss_topk<T: Scalar>(
    samples: &SampleSet<T>,
    x_true: &AgentState<T>,
    k: usize,
) -> Result<T> {
    check_k(k, samples.len())?;
    let mut errs = samples.first_step_sq_errors(x_true);
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let total = errs[..k].iter().fold(T::zero(), |acc, &e| acc + e);
    Ok(total / T::from_usize(k).unwrap())
}

/// Per-expert sample loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleLossMode {
    Mse,
    Topk,
}

/// `sum_i alpha_i l_i` with gradient `l`.
pub fn aggregate_sample_loss<T: Scalar>(
    per_expert: &[SampleSet<T>],
    alpha: &WeightVector<T>,
    x_true: &AgentState<T>,
    mode: SampleLossMode,
    k: usize,
) -> Result<LossEvaluation<T>> {
    if per_expert.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            what: "alpha",
            expected: per_expert.len(),
            found: alpha.len(),
        });
    }
    let losses = per_expert
        .iter()
        .map(|s| match mode {
            SampleLossMode::Mse => Ok(sample_loss_mse(s, x_true)),
            SampleLossMode::Topk => sample_loss_topk(s, x_true, k),
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(LossEvaluation::linear(alpha, losses))
}

/// Draw counts per expert: `floor(M alpha_i)` plus one for each of the
/// experts with the largest fractional remainders until the total is `M`.
/// Equal remainders go to the lower index first.
pub fn allocate_counts<T: Scalar>(alpha: &WeightVector<T>, m_out: usize) -> Vec<usize> {
    let m = T::from_usize(m_out).unwrap();
    let mut counts = Vec::with_capacity(alpha.len());
    let mut remainders = Vec::with_capacity(alpha.len());
    for &a in alpha.as_slice() {
        let exact = m * a;
        let floor = exact.floor();
        counts.push(floor.to_usize().unwrap_or(0).min(m_out));
        remainders.push(exact - floor);
    }
    let assigned: usize = counts.iter().sum();
    if assigned >= m_out {
        return counts;
    }
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| {
        remainders[b]
            .partial_cmp(&remainders[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for slot in 0..(m_out - assigned) {
        counts[order[slot % order.len()]] += 1;
    }
    counts
}

/// Importance-sampled mixture of `m_out` trajectories, drawn with replacement
/// from a generator seeded with `seed`.
pub fn importance_sample_moe<T: Scalar>(
    per_expert: &[SampleSet<T>],
    alpha: &WeightVector<T>,
    m_out: usize,
    seed: u64,
) -> Result<SampleSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    importance_sample_moe_with_rng(per_expert, alpha, m_out, &mut rng)
}

/// As [`importance_sample_moe`] with a caller-owned generator. Output is
/// grouped by expert in index order.
pub fn importance_sample_moe_with_rng<T: Scalar, R: Rng + ?Sized>(
    per_expert: &[SampleSet<T>],
    alpha: &WeightVector<T>,
    m_out: usize,
    rng: &mut R,
) -> Result<SampleSet<T>> {
    if per_expert.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            what: "alpha",
            expected: per_expert.len(),
            found: alpha.len(),
        });
    }
    if m_out == 0 {
        return Err(Error::out_of_range("M_out", 0, "[1, inf)"));
    }
    let horizon = per_expert[0].horizon();
    let counts = allocate_counts(alpha, m_out);
    let mut out = Vec::with_capacity(m_out);
    for (i, (set, &count)) in per_expert.iter().zip(&counts).enumerate() {
        if count == 0 {
            continue;
        }
        if set.is_empty() {
            return Err(Error::invalid(
                "sample set",
                format!("expert {i} has no samples but is allocated {count}"),
            ));
        }
        if set.horizon() != horizon {
            return Err(Error::HorizonMismatch {
                expected: horizon,
                found: set.horizon(),
            });
        }
        for _ in 0..count {
            out.push(set.samples[rng.random_range(0..set.len())].clone());
        }
    }
    SampleSet::new(out)
}

/// Smallest mean planar displacement over the horizon among all samples.
pub fn sample_min_ade<T: Scalar>(samples: &SampleSet<T>, truth: &GroundTruthFuture<T>) -> Result<T> {
    if samples.horizon() != truth.horizon() {
        return Err(Error::HorizonMismatch {
            expected: samples.horizon(),
            found: truth.horizon(),
        });
    }
    let k = T::from_usize(truth.horizon()).unwrap();
    Ok(samples
        .samples
        .iter()
        .map(|s| {
            s.iter()
                .zip(truth.states())
                .fold(T::zero(), |acc, (a, b)| acc + b.planar_distance(a))
                / k
        })
        .fold(T::infinity(), T::min))
}

/// Smallest planar displacement at the final step among all samples.
pub fn sample_min_fde<T: Scalar>(samples: &SampleSet<T>, truth: &GroundTruthFuture<T>) -> Result<T> {
    if samples.horizon() != truth.horizon() {
        return Err(Error::HorizonMismatch {
            expected: samples.horizon(),
            found: truth.horizon(),
        });
    }
    let last = &truth.states()[truth.horizon() - 1];
    Ok(samples
        .samples
        .iter()
        .map(|s| last.planar_distance(&s[s.len() - 1]))
        .fold(T::infinity(), T::min))
}
