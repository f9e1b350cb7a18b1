//! Gaussian-mixture predictions and the mixture-of-experts built from them.
//!
//! Each expert reports `L` diagonal-covariance Gaussian modes over a horizon of
//! `K` states `(x, y, theta)`. Mixing `N` experts with a weight vector `alpha`
//! gives an `N x L` component mixture whose component `(i, j)` carries weight
//! `alpha[i] * p[i][j]`. Densities are only ever evaluated at the first
//! predicted step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// Wraps an angle into `(-pi, pi]`. Angles already in range are returned unchanged.
pub fn wrap_angle<T: Scalar>(theta: T) -> T {
    let pi = T::PI();
    if theta > -pi && theta <= pi {
        return theta;
    }
    let two_pi = pi + pi;
    let shifted = theta + pi;
    let mut r = shifted - two_pi * (shifted / two_pi).floor() - pi;
    if r <= -pi {
        r = r + two_pi;
    }
    if r > pi {
        r = r - two_pi;
    }
    r
}

/// Planar pose: position in meters, heading in radians normalized to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState<T> {
    x: T,
    y: T,
    theta: T,
}

impl<T: Scalar> AgentState<T> {
    pub fn new(x: T, y: T, theta: T) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && theta.is_finite()) {
            return Err(Error::NonFinite("agent state"));
        }
        Ok(Self {
            x,
            y,
            theta: wrap_angle(theta),
        })
    }

    pub fn from_array(v: [T; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }

    #[inline]
    pub fn x(&self) -> T {
        self.x
    }

    #[inline]
    pub fn y(&self) -> T {
        self.y
    }

    #[inline]
    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.x, self.y, self.theta]
    }

    /// Euclidean distance in the `(x, y)` plane.
    pub fn planar_distance(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Distance over `(x, y, wrapped heading residual)`.
    pub fn pose_distance(&self, other: &Self) -> T {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dt = wrap_angle(self.theta - other.theta);
        (dx * dx + dy * dy + dt * dt).sqrt()
    }

    /// `self - other` with the heading residual wrapped.
    pub fn residual(&self, other: &Self) -> [T; 3] {
        [
            self.x - other.x,
            self.y - other.y,
            wrap_angle(self.theta - other.theta),
        ]
    }
}

/// One Gaussian mode: a mean trajectory with per-step diagonal precision.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMode<T> {
    mean: Vec<AgentState<T>>,
    precision: Vec<[T; 3]>,
    weight: T,
}

impl<T: Scalar> GaussianMode<T> {
    pub fn new(mean: Vec<AgentState<T>>, precision: Vec<[T; 3]>, weight: T) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("gaussian mode", "horizon must be at least 1"));
        }
        if precision.len() != mean.len() {
            return Err(Error::DimensionMismatch {
                what: "mode precision",
                expected: mean.len(),
                found: precision.len(),
            });
        }
        if precision
            .iter()
            .flatten()
            .any(|h| !h.is_finite() || *h <= T::zero())
        {
            return Err(Error::invalid(
                "gaussian mode",
                "precision entries must be finite and strictly positive",
            ));
        }
        if !weight.is_finite() || weight < T::zero() || weight > T::one() {
            return Err(Error::out_of_range("mode weight", weight, "[0, 1]"));
        }
        Ok(Self {
            mean,
            precision,
            weight,
        })
    }

    pub fn horizon(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[AgentState<T>] {
        &self.mean
    }

    pub fn precision(&self) -> &[[T; 3]] {
        &self.precision
    }

    pub fn weight(&self) -> T {
        self.weight
    }

    pub fn first_mean(&self) -> &AgentState<T> {
        &self.mean[0]
    }
}

/// Density of a mode's first-step Gaussian at `x`.
///
/// The heading residual is wrapped before evaluation, so the result is
/// invariant under `theta -> theta + 2 pi`.
pub fn gaussian_pdf_first_step<T: Scalar>(mode: &GaussianMode<T>, x: &AgentState<T>) -> T {
    let r = x.residual(&mode.mean[0]);
    let h = &mode.precision[0];
    let two_pi = T::PI() + T::PI();
    let half = T::lit(0.5);
    let mut quad = T::zero();
    let mut norm = T::one();
    for d in 0..3 {
        quad = quad + h[d] * r[d] * r[d];
        norm = norm * (h[d] / two_pi).sqrt();
    }
    norm * (-half * quad).exp()
}

/// The `L`-mode mixture emitted by one expert at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPrediction<T> {
    modes: Vec<GaussianMode<T>>,
    expert_id: String,
    calibrated: bool,
}

impl<T: Scalar> ExpertPrediction<T> {
    pub fn new(modes: Vec<GaussianMode<T>>, expert_id: impl Into<String>) -> Result<Self> {
        let Some(first) = modes.first() else {
            return Err(Error::invalid("expert prediction", "at least one mode is required"));
        };
        let horizon = first.horizon();
        if let Some(bad) = modes.iter().find(|m| m.horizon() != horizon) {
            return Err(Error::HorizonMismatch {
                expected: horizon,
                found: bad.horizon(),
            });
        }
        let total = modes.iter().fold(T::zero(), |acc, m| acc + m.weight);
        let tol = T::lit(1e-9).max(T::simplex_tolerance());
        if (total - T::one()).abs() > tol {
            return Err(Error::invalid(
                "expert prediction",
                format!("mode weights sum to {total}, expected 1"),
            ));
        }
        Ok(Self {
            modes,
            expert_id: expert_id.into(),
            calibrated: true,
        })
    }

    /// Marks the prediction as carrying no meaningful covariance. Such experts
    /// still contribute means, but are excluded from likelihood metrics.
    pub fn uncalibrated(mut self) -> Self {
        self.calibrated = false;
        self
    }

    pub fn modes(&self) -> &[GaussianMode<T>] {
        &self.modes
    }

    pub fn expert_id(&self) -> &str {
        &self.expert_id
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    pub fn horizon(&self) -> usize {
        self.modes[0].horizon()
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }
}

/// A probability vector over experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>")]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct WeightVector<T> {
    alpha: Vec<T>,
}

impl<T: Scalar> WeightVector<T> {
    pub fn new(alpha: Vec<T>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("weight vector", "must have at least one entry"));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < T::zero()) {
            return Err(Error::invalid("weight vector", "entries must be finite and nonnegative"));
        }
        let total = scalar::sum(&alpha);
        if (total - T::one()).abs() > T::simplex_tolerance() {
            return Err(Error::invalid(
                "weight vector",
                format!("entries sum to {total}, expected 1"),
            ));
        }
        Ok(Self { alpha })
    }

    /// Normalizes nonnegative weights onto the simplex.
    pub fn from_unnormalized(weights: Vec<T>) -> Result<Self> {
        if weights.iter().any(|a| !a.is_finite() || *a < T::zero()) {
            return Err(Error::invalid("weight vector", "entries must be finite and nonnegative"));
        }
        let total = scalar::sum(&weights);
        if !(total > T::zero()) {
            return Err(Error::invalid("weight vector", "weights sum to zero"));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("weight vector", "must have at least one entry"));
        }
        let w = T::one() / T::from_usize(n).unwrap();
        Self::new(vec![w; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::out_of_range("one-hot index", index, format!("[0, {n})")));
        }
        let mut alpha = vec![T::zero(); n];
        alpha[index] = T::one();
        Self::new(alpha)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.alpha
    }

    pub fn get(&self, i: usize) -> T {
        self.alpha[i]
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &a) in self.alpha.iter().enumerate() {
            if a > self.alpha[best] {
                best = i;
            }
        }
        best
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for WeightVector<T> {
    type Error = Error;

    fn try_from(alpha: Vec<T>) -> Result<Self> {
        Self::new(alpha)
    }
}

impl<T> From<WeightVector<T>> for Vec<T> {
    fn from(w: WeightVector<T>) -> Self {
        w.alpha
    }
}

/// One weighted component of a mixture-of-experts.
#[derive(Debug, Clone, Copy)]
pub struct MoeComponent<'a, T> {
    pub weight: T,
    pub expert: usize,
    pub mode_index: usize,
    pub mode: &'a GaussianMode<T>,
}

/// The aggregated mixture. Components are ordered expert-major, mode-minor.
#[derive(Debug, Clone)]
pub struct MoeDistribution<'a, T> {
    components: Vec<MoeComponent<'a, T>>,
    horizon: usize,
}

/// Whether experts may report different numbers of modes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ModeCountPolicy {
    #[default]
    Uniform,
    AllowRagged,
}

/// Builds the mixture with weight `alpha[i] * p[i][j]` on component `(i, j)`.
/// Rejects experts with differing mode counts.
pub fn build_moe<'a, T: Scalar>(
    predictions: &'a [ExpertPrediction<T>],
    alpha: &WeightVector<T>,
) -> Result<MoeDistribution<'a, T>> {
    build_moe_with(predictions, alpha, ModeCountPolicy::Uniform)
}

pub fn build_moe_with<'a, T: Scalar>(
    predictions: &'a [ExpertPrediction<T>],
    alpha: &WeightVector<T>,
    policy: ModeCountPolicy,
) -> Result<MoeDistribution<'a, T>> {
    let horizon = check_predictions(predictions, alpha, policy)?;
    let mut components = Vec::with_capacity(predictions.len() * predictions[0].mode_count());
    for (i, pred) in predictions.iter().enumerate() {
        let a = alpha.get(i);
        for (j, mode) in pred.modes.iter().enumerate() {
            components.push(MoeComponent {
                weight: a * mode.weight,
                expert: i,
                mode_index: j,
                mode,
            });
        }
    }
    Ok(MoeDistribution {
        components,
        horizon,
    })
}

/// Shared validation: non-empty, `alpha` sized to `N`, common horizon, and
/// (unless ragged) common mode count. Returns the horizon.
pub(crate) fn check_predictions<T: Scalar>(
    predictions: &[ExpertPrediction<T>],
    alpha: &WeightVector<T>,
    policy: ModeCountPolicy,
) -> Result<usize> {
    let Some(first) = predictions.first() else {
        return Err(Error::invalid("predictions", "at least one expert is required"));
    };
    if alpha.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            what: "alpha",
            expected: predictions.len(),
            found: alpha.len(),
        });
    }
    let horizon = first.horizon();
    for pred in &predictions[1..] {
        if pred.horizon() != horizon {
            return Err(Error::HorizonMismatch {
                expected: horizon,
                found: pred.horizon(),
            });
        }
        if policy == ModeCountPolicy::Uniform && pred.mode_count() != first.mode_count() {
            return Err(Error::RaggedModes {
                first: first.mode_count(),
                other: pred.mode_count(),
            });
        }
    }
    Ok(horizon)
}

impl<'a, T: Scalar> MoeDistribution<'a, T> {
    pub fn components(&self) -> &[MoeComponent<'a, T>] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn weights(&self) -> Vec<T> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Restricts the mixture to experts with `keep[expert] == true` and
    /// renormalizes. Returns `None` when the kept mass is zero.
    pub fn restricted(&self, keep: &[bool]) -> Option<MoeDistribution<'a, T>> {
        let kept: Vec<_> = self
            .components
            .iter()
            .filter(|c| keep.get(c.expert).copied().unwrap_or(false))
            .copied()
            .collect();
        let mass = kept.iter().fold(T::zero(), |acc, c| acc + c.weight);
        if !(mass > T::zero()) {
            return None;
        }
        Some(MoeDistribution {
            components: kept
                .into_iter()
                .map(|c| MoeComponent {
                    weight: c.weight / mass,
                    ..c
                })
                .collect(),
            horizon: self.horizon,
        })
    }
}

/// Mixture density at `x`: the weighted sum of first-step component densities.
pub fn moe_pdf<T: Scalar>(moe: &MoeDistribution<'_, T>, x: &AgentState<T>) -> T {
    moe.components.iter().fold(T::zero(), |acc, c| {
        acc + c.weight * gaussian_pdf_first_step(c.mode, x)
    })
}
