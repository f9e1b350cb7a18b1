//! Online losses over the expert weight vector.
//!
//! * [`probability_loss`]: negated mixture density at the revealed state. Linear
//!   in `alpha`, so its gradient entry `i` is expert `i`'s own loss.
//! * [`hard_min_frde`]: minimum first-step displacement among the `k`
//!   highest-weight components. Piecewise constant in `alpha`.
//! * [`soft_min_frde`]: the same quantity with the top-k selection relaxed by
//!   a softsort matrix and the `min` replaced by a log-sum-exp softmin, which
//!   gives a gradient everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{
    build_moe, check_predictions, gaussian_pdf_first_step, AgentState, ExpertPrediction,
    GaussianMode, ModeCountPolicy, WeightVector,
};
use crate::scalar::{self, Scalar};

/// Loss value and its gradient with respect to `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation<T> {
    pub value: T,
    pub gradient: Vec<T>,
    /// Per-expert losses, present when the loss is linear in `alpha`.
    pub per_expert_loss: Option<Vec<T>>,
}

impl<T: Scalar> LossEvaluation<T> {
    /// Builds the evaluation of a linear loss from per-expert losses.
    pub(crate) fn linear(alpha: &WeightVector<T>, per_expert: Vec<T>) -> Self {
        Self {
            value: scalar::dot(alpha.as_slice(), &per_expert),
            gradient: per_expert.clone(),
            per_expert_loss: Some(per_expert),
        }
    }
}

/// Parameters of the smoothed top-k displacement loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct SmoothingConfig<T> {
    /// Softmin temperature `beta`.
    pub softmin_beta: T,
    /// Softsort temperature `tau`.
    pub softsort_tau: T,
    /// Number of top-weight components considered.
    pub k: usize,
    /// Include the wrapped heading residual in the displacement norm.
    #[serde(default)]
    pub include_heading: bool,
}

impl<T: Scalar> Default for SmoothingConfig<T> {
    fn default() -> Self {
        Self {
            softmin_beta: T::lit(10.0),
            softsort_tau: T::lit(0.1),
            k: 10,
            include_heading: false,
        }
    }
}

impl<T: Scalar> SmoothingConfig<T> {
    pub fn validate(&self, component_count: usize) -> Result<()> {
        if !(self.softmin_beta.is_finite() && self.softmin_beta > T::zero()) {
            return Err(Error::out_of_range("softmin_beta", self.softmin_beta, "(0, inf)"));
        }
        if !(self.softsort_tau.is_finite() && self.softsort_tau > T::zero()) {
            return Err(Error::out_of_range("softsort_tau", self.softsort_tau, "(0, inf)"));
        }
        check_k(self.k, component_count)
    }
}

pub(crate) fn check_k(k: usize, count: usize) -> Result<()> {
    if k == 0 || k > count {
        return Err(Error::out_of_range("k", k, format!("[1, {count}]")));
    }
    Ok(())
}

/// Negated mixture density at the revealed state, with gradient
/// `-sum_j p[i][j] g(x | mode[i][j])`.
pub fn probability_loss<T: Scalar>(
    predictions: &[ExpertPrediction<T>],
    alpha: &WeightVector<T>,
    x_true: &AgentState<T>,
) -> Result<LossEvaluation<T>> {
    check_predictions(predictions, alpha, ModeCountPolicy::Uniform)?;
    let per_expert = predictions
        .iter()
        .map(|pred| {
            -pred.modes().iter().fold(T::zero(), |acc, m| {
                acc + m.weight() * gaussian_pdf_first_step(m, x_true)
            })
        })
        .collect();
    Ok(LossEvaluation::linear(alpha, per_expert))
}

/// Indices of the `k` largest weights, in descending weight order. Ties keep
/// the lower index first.
pub fn topk_indices<T: Scalar>(weights: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps component order among equal weights
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(k);
    order
}

/// First-step displacement between a mode's mean and the revealed state.
pub fn first_step_displacement<T: Scalar>(
    mode: &GaussianMode<T>,
    x_true: &AgentState<T>,
    include_heading: bool,
) -> T {
    if include_heading {
        x_true.pose_distance(mode.first_mean())
    } else {
        x_true.planar_distance(mode.first_mean())
    }
}

fn weights_and_displacements<T: Scalar>(
    predictions: &[ExpertPrediction<T>],
    alpha: &WeightVector<T>,
    x_true: &AgentState<T>,
    include_heading: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let moe = build_moe(predictions, alpha)?;
    Ok(moe
        .components()
        .iter()
        .map(|c| {
            (
                c.weight,
                first_step_displacement(c.mode, x_true, include_heading),
            )
        })
        .unzip())
}

/// Minimum first-step `(x, y)` displacement among the top-`k` components.
pub fn hard_min_frde<T: Scalar>(
    predictions: &[ExpertPrediction<T>],
    alpha: &WeightVector<T>,
    x_true: &AgentState<T>,
    k: usize,
) -> Result<T> {
    hard_min_frde_with(predictions, alpha, x_true, k, false)
}

pub fn hard_min_frde_with<T: Scalar>(
    predictions: &[ExpertPrediction<T>],
    alpha: &WeightVector<T>,
    x_true: &AgentState<T>,
    k: usize,
    include_heading: bool,
) -> Result<T> {
    let (w, d) = weights_and_displacements(predictions, alpha, x_true, include_heading)?;
    check_k(k, w.len())?;
    Ok(topk_indices(&w, k)
        .into_iter()
        .map(|c| d[c])
        .fold(T::infinity(), T::min))
}

/// Smoothed top-k minimum first-step displacement and its exact gradient.
///
/// With component weights `w` and displacements `d`, row `r` of the softsort
/// matrix is `softmax_c(-|s_r - w_c| / tau)` where `s` is `w` sorted in
/// descending order. The soft-selected errors `e = P d` are combined with
/// `softmin_beta(e) = -(1/beta) ln sum_r exp(-beta e_r)`.
pub fn soft_min_frde<T: Scalar>(
    predictions: &[ExpertPrediction<T>],
    alpha: &WeightVector<T>,
    x_true: &AgentState<T>,
    cfg: &SmoothingConfig<T>,
) -> Result<LossEvaluation<T>> {
    let (w, d) = weights_and_displacements(predictions, alpha, x_true, cfg.include_heading)?;
    cfg.validate(w.len())?;
    let beta = cfg.softmin_beta;
    let tau = cfg.softsort_tau;
    let n = w.len();
    let rows = topk_indices(&w, cfg.k);

    // softsort rows
    let mut p = vec![vec![T::zero(); n]; rows.len()];
    let mut e = vec![T::zero(); rows.len()];
    for (r, &sorted) in rows.iter().enumerate() {
        let s = w[sorted];
        let logits: Vec<T> = w.iter().map(|&wc| -(s - wc).abs() / tau).collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (c, &z) in logits.iter().enumerate() {
            p[r][c] = (z - max).exp();
            total = total + p[r][c];
        }
        for c in 0..n {
            p[r][c] = p[r][c] / total;
            e[r] = e[r] + p[r][c] * d[c];
        }
    }

    // softmin, shifted by the smallest error
    let e_min = e.iter().copied().fold(T::infinity(), T::min);
    let mut q: Vec<T> = e.iter().map(|&er| (-beta * (er - e_min)).exp()).collect();
    let q_total = scalar::sum(&q);
    let value = e_min - q_total.ln() / beta;
    for qr in &mut q {
        *qr = *qr / q_total;
    }

    // d value / d w
    let mut grad_w = vec![T::zero(); n];
    for (r, &sorted) in rows.iter().enumerate() {
        let s = w[sorted];
        for c in 0..n {
            let diff = s - w[c];
            if diff == T::zero() {
                continue;
            }
            let coef = q[r] * p[r][c] * (d[c] - e[r]) * diff.signum() / tau;
            grad_w[c] = grad_w[c] + coef;
            grad_w[sorted] = grad_w[sorted] - coef;
        }
    }

    // chain rule through w[(i, j)] = alpha[i] * p[i][j]
    let mut gradient = Vec::with_capacity(predictions.len());
    let mut c = 0;
    for pred in predictions {
        let mut g = T::zero();
        for mode in pred.modes() {
            g = g + mode.weight() * grad_w[c];
            c += 1;
        }
        gradient.push(g);
    }

    Ok(LossEvaluation {
        value,
        gradient,
        per_expert_loss: None,
    })
}

/// Trailing mean over at most `window` entries; the first `window - 1`
/// outputs average over what is available.
pub fn sliding_window_average<T: Scalar>(values: &[T], window: usize) -> Result<Vec<T>> {
    if window == 0 {
        return Err(Error::out_of_range("window", 0, "[1, inf)"));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut acc = T::zero();
    for (t, &v) in values.iter().enumerate() {
        acc = acc + v;
        if t >= window {
            acc = acc - values[t - window];
        }
        // refresh periodically so the running sum does not drift
        if t % 4096 == 4095 {
            let lo = (t + 1).saturating_sub(window);
            acc = scalar::sum(&values[lo..=t]);
        }
        let count = (t + 1).min(window);
        out.push(acc / T::from_usize(count).unwrap());
    }
    Ok(out)
}
