//! Online learners over the probability simplex.
//!
//! Both learners see a raw linear gradient per step (the loss of each expert),
//! clip it into `[0, 1]^N` with a running magnitude bound `G`, and fold the
//! instantaneous regret `r = (alpha . c) 1 - c` into discounted accumulators
//! `R <- lambda R + r`, `V <- lambda^2 V + r * r`.
//!
//! SQUINT sets `alpha_i ∝ prior_i xi(R_i, V_i)`. Exponentiated gradient sets
//! `alpha_i ∝ prior_i exp(-S_i sqrt(ln N) / sqrt(t))` where `S` is the
//! discounted sum of clipped losses. Since `R_i = A - S_i` for a quantity `A`
//! shared by every expert, the EG weights are computed from `R` directly and
//! the checkpoint format is the same for both learners.

mod potential;

use serde::{Deserialize, Serialize};

pub use potential::{log_squint_potential, squint_potential, SMALL_VARIANCE};

use crate::error::{Error, Result};
use crate::gmm::WeightVector;
use crate::scalar::{self, Scalar};

/// Which update rule drives the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    #[default]
    Squint,
    Eg,
}

/// When SQUINT folds the newest regret into `R` and `V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOrder {
    /// Update `R`, `V` first, then compute `alpha` from the new values.
    #[default]
    PostUpdate,
    /// Compute `alpha` from the previous `R`, `V`, then update them.
    /// The newest observation only affects the following step.
    PrintedOrder,
}

/// Checkpointable learner state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct LearnerState<T> {
    pub prior: WeightVector<T>,
    pub alpha: WeightVector<T>,
    #[serde(rename = "R")]
    pub regret: Vec<T>,
    #[serde(rename = "V")]
    pub variance: Vec<T>,
    #[serde(rename = "G")]
    pub grad_bound: T,
    pub t: u64,
    pub discount: T,
}

impl<T: Scalar> LearnerState<T> {
    /// Fresh state with `alpha` equal to `prior`.
    pub fn new(prior: WeightVector<T>, discount: T) -> Result<Self> {
        let n = prior.len();
        let state = Self {
            alpha: prior.clone(),
            prior,
            regret: vec![T::zero(); n],
            variance: vec![T::zero(); n],
            grad_bound: T::zero(),
            t: 0,
            discount,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn uniform(n: usize, discount: T) -> Result<Self> {
        Self::new(WeightVector::uniform(n)?, discount)
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    /// Checks the invariants a deserialized checkpoint must satisfy.
    pub fn validate(&self) -> Result<()> {
        let n = self.prior.len();
        for (what, len) in [
            ("alpha", self.alpha.len()),
            ("R", self.regret.len()),
            ("V", self.variance.len()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    found: len,
                });
            }
        }
        if self.prior.as_slice().iter().any(|&p| p <= T::zero()) {
            return Err(Error::invalid("prior", "entries must be strictly positive"));
        }
        if self.regret.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("R"));
        }
        if self.variance.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::invalid("V", "entries must be finite and nonnegative"));
        }
        if !self.grad_bound.is_finite() || self.grad_bound < T::zero() {
            return Err(Error::invalid("G", "must be finite and nonnegative"));
        }
        if !(self.discount > T::zero() && self.discount <= T::one()) {
            return Err(Error::out_of_range("discount", self.discount, "(0, 1]"));
        }
        Ok(())
    }
}

/// Clips a raw gradient into `[0, 1]^N` and returns it with the updated bound.
pub fn clip_gradient<T: Scalar>(raw: &[T], state: &LearnerState<T>) -> Result<(Vec<T>, T)> {
    clip_with_bound(raw, state.grad_bound)
}

fn clip_with_bound<T: Scalar>(raw: &[T], bound: T) -> Result<(Vec<T>, T)> {
    if raw.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("raw gradient"));
    }
    let g = raw.iter().fold(bound, |m, v| m.max(v.abs()));
    let half = T::lit(0.5);
    if g == T::zero() {
        return Ok((vec![half; raw.len()], g));
    }
    let clipped = raw
        .iter()
        .map(|&v| ((v / g + T::one()) * half).max(T::zero()).min(T::one()))
        .collect();
    Ok((clipped, g))
}

/// Shared front half of both steps: clip, then form the new `R` and `V`.
struct Folded<T> {
    bound: T,
    regret: Vec<T>,
    variance: Vec<T>,
}

fn fold_regret<T: Scalar>(state: &LearnerState<T>, raw: &[T]) -> Result<Folded<T>> {
    if raw.len() != state.len() {
        return Err(Error::DimensionMismatch {
            what: "raw gradient",
            expected: state.len(),
            found: raw.len(),
        });
    }
    let (clipped, bound) = clip_gradient(raw, state)?;
    let mix = scalar::dot(state.alpha.as_slice(), &clipped);
    let lambda = state.discount;
    let mut regret = Vec::with_capacity(raw.len());
    let mut variance = Vec::with_capacity(raw.len());
    for ((&c, &r0), &v0) in clipped.iter().zip(&state.regret).zip(&state.variance) {
        let r = mix - c;
        regret.push(lambda * r0 + r);
        variance.push(lambda * lambda * v0 + r * r);
    }
    Ok(Folded {
        bound,
        regret,
        variance,
    })
}

/// `prior_i exp(log_weight_i - max)`, floored away from zero and normalized.
fn normalize_log_weights<T: Scalar>(
    prior: &WeightVector<T>,
    log_weights: &[T],
    step: u64,
) -> Result<WeightVector<T>> {
    if let Some(bad) = log_weights.iter().position(|l| l.is_nan()) {
        return Err(Error::Numerical {
            step,
            detail: format!("log-weight of expert {bad} is NaN"),
        });
    }
    let top = log_weights
        .iter()
        .fold(T::neg_infinity(), |m, &l| m.max(l));
    if !top.is_finite() {
        return Err(Error::Numerical {
            step,
            detail: format!("largest log-weight is {top}"),
        });
    }
    let floor = T::min_positive_value();
    let weights: Vec<T> = prior
        .as_slice()
        .iter()
        .zip(log_weights)
        .map(|(&p, &l)| (p * (l - top).exp()).max(floor))
        .collect();
    WeightVector::from_unnormalized(weights).map_err(|e| Error::Numerical {
        step,
        detail: e.to_string(),
    })
}

fn squint_alpha<T: Scalar>(
    prior: &WeightVector<T>,
    regret: &[T],
    variance: &[T],
    step: u64,
) -> Result<WeightVector<T>> {
    let mut log_xi = Vec::with_capacity(regret.len());
    for (&r, &v) in regret.iter().zip(variance) {
        log_xi.push(log_squint_potential(r, v).map_err(|e| Error::Numerical {
            step,
            detail: e.to_string(),
        })?);
    }
    normalize_log_weights(prior, &log_xi, step)
}

/// One SQUINT update with the default ordering.
pub fn squint_step<T: Scalar>(state: &LearnerState<T>, raw: &[T]) -> Result<LearnerState<T>> {
    squint_step_with(state, raw, UpdateOrder::PostUpdate)
}

/// One SQUINT update with an explicit ordering of the weight and accumulator updates.
pub fn squint_step_with<T: Scalar>(
    state: &LearnerState<T>,
    raw: &[T],
    order: UpdateOrder,
) -> Result<LearnerState<T>> {
    let folded = fold_regret(state, raw)?;
    let t = state.t + 1;
    let alpha = match order {
        UpdateOrder::PostUpdate => squint_alpha(&state.prior, &folded.regret, &folded.variance, t)?,
        UpdateOrder::PrintedOrder => {
            squint_alpha(&state.prior, &state.regret, &state.variance, t)?
        }
    };
    Ok(LearnerState {
        prior: state.prior.clone(),
        alpha,
        regret: folded.regret,
        variance: folded.variance,
        grad_bound: folded.bound,
        t,
        discount: state.discount,
    })
}

/// One exponentiated-gradient update.
pub fn eg_step<T: Scalar>(state: &LearnerState<T>, raw: &[T]) -> Result<LearnerState<T>> {
    if state.len() < 2 {
        return Err(Error::invalid("expert count", "exponentiated gradient needs N >= 2"));
    }
    let folded = fold_regret(state, raw)?;
    let t = state.t + 1;
    let rate = T::from_usize(state.len()).unwrap().ln().sqrt() / T::from_u64(t).unwrap().sqrt();
    let log_w: Vec<T> = folded.regret.iter().map(|&r| r * rate).collect();
    let alpha = normalize_log_weights(&state.prior, &log_w, t)?;
    Ok(LearnerState {
        prior: state.prior.clone(),
        alpha,
        regret: folded.regret,
        variance: folded.variance,
        grad_bound: folded.bound,
        t,
        discount: state.discount,
    })
}

/// Learner settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct LearnerConfig<T> {
    #[serde(default)]
    pub kind: LearnerKind,
    pub discount: T,
    #[serde(default)]
    pub order: UpdateOrder,
    /// Uniform when absent.
    #[serde(default)]
    pub prior: Option<Vec<T>>,
}

impl<T: Scalar> Default for LearnerConfig<T> {
    fn default() -> Self {
        Self {
            kind: LearnerKind::Squint,
            discount: T::one(),
            order: UpdateOrder::PostUpdate,
            prior: None,
        }
    }
}

/// A learner together with its state.
#[derive(Debug, Clone)]
pub struct Learner<T> {
    kind: LearnerKind,
    order: UpdateOrder,
    state: LearnerState<T>,
}

impl<T: Scalar> Learner<T> {
    pub fn new(config: &LearnerConfig<T>, n: usize) -> Result<Self> {
        let prior = match &config.prior {
            Some(p) if p.len() != n => {
                return Err(Error::DimensionMismatch {
                    what: "prior",
                    expected: n,
                    found: p.len(),
                })
            }
            Some(p) => WeightVector::new(p.clone())?,
            None => WeightVector::uniform(n)?,
        };
        if config.kind == LearnerKind::Eg && n < 2 {
            return Err(Error::invalid("expert count", "exponentiated gradient needs N >= 2"));
        }
        Ok(Self {
            kind: config.kind,
            order: config.order,
            state: LearnerState::new(prior, config.discount)?,
        })
    }

    /// Resumes from a checkpoint.
    pub fn from_state(kind: LearnerKind, order: UpdateOrder, state: LearnerState<T>) -> Result<Self> {
        state.validate()?;
        Ok(Self { kind, order, state })
    }

    pub fn kind(&self) -> LearnerKind {
        self.kind
    }

    pub fn state(&self) -> &LearnerState<T> {
        &self.state
    }

    pub fn alpha(&self) -> &WeightVector<T> {
        &self.state.alpha
    }

    /// Advances one step and returns the clipped gradient used.
    pub fn step(&mut self, raw: &[T]) -> Result<Vec<T>> {
        let (clipped, _) = clip_gradient(raw, &self.state)?;
        self.state = match self.kind {
            LearnerKind::Squint => squint_step_with(&self.state, raw, self.order)?,
            LearnerKind::Eg => eg_step(&self.state, raw)?,
        };
        Ok(clipped)
    }
}

/// Bookkeeping for one step against each one-hot comparator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord<T> {
    pub per_step_mixture_loss: T,
    pub per_step_expert_loss: Vec<T>,
    pub cumulative_regret_vs_each: Vec<T>,
}

/// Accumulates regret of the played weights against every single expert.
#[derive(Debug, Clone, Default)]
pub struct RegretTracker<T> {
    cumulative: Vec<T>,
}

impl<T: Scalar> RegretTracker<T> {
    pub fn new(n: usize) -> Self {
        Self {
            cumulative: vec![T::zero(); n],
        }
    }

    /// Records a step played with `alpha` against linear losses `loss`.
    pub fn record(&mut self, alpha: &[T], loss: &[T]) -> Result<RegretRecord<T>> {
        if alpha.len() != self.cumulative.len() || loss.len() != self.cumulative.len() {
            return Err(Error::DimensionMismatch {
                what: "regret record",
                expected: self.cumulative.len(),
                found: if alpha.len() != self.cumulative.len() {
                    alpha.len()
                } else {
                    loss.len()
                },
            });
        }
        let mix = scalar::dot(alpha, loss);
        for (c, &l) in self.cumulative.iter_mut().zip(loss) {
            *c = *c + (mix - l);
        }
        Ok(RegretRecord {
            per_step_mixture_loss: mix,
            per_step_expert_loss: loss.to_vec(),
            cumulative_regret_vs_each: self.cumulative.clone(),
        })
    }

    pub fn cumulative(&self) -> &[T] {
        &self.cumulative
    }
}

/// `sum_t (mixture loss - expert i loss)` over a record history.
pub fn cumulative_regret<T: Scalar>(history: &[RegretRecord<T>]) -> Result<Vec<T>> {
    let first = history
        .first()
        .ok_or_else(|| Error::invalid("regret history", "must be non-empty"))?;
    let mut total = vec![T::zero(); first.per_step_expert_loss.len()];
    for rec in history {
        for (acc, &l) in total.iter_mut().zip(&rec.per_step_expert_loss) {
            *acc = *acc + (rec.per_step_mixture_loss - l);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize) -> LearnerState<f64> {
        LearnerState::uniform(n, 1.0).unwrap()
    }

    #[test]
    fn clip_examples() {
        let mut s = state(3);
        s.grad_bound = 1.0;
        let (c, g) = clip_gradient(&[-2.0, 0.0, 2.0], &s).unwrap();
        assert_eq!(g, 2.0);
        assert_eq!(c, vec![0.0, 0.5, 1.0]);

        let (c, g) = clip_gradient(&[0.0, 0.0], &state(2)).unwrap();
        assert_eq!(g, 0.0);
        assert_eq!(c, vec![0.5, 0.5]);

        let mut s = state(2);
        s.grad_bound = 5.0;
        let (c, g) = clip_gradient(&[-0.3, 0.1], &s).unwrap();
        assert_eq!(g, 5.0);
        assert!((c[0] - 0.47).abs() < 1e-15 && (c[1] - 0.51).abs() < 1e-15);

        assert!(clip_gradient(&[f64::NAN, 0.0], &state(2)).is_err());
    }

    #[test]
    fn equal_losses_keep_prior() {
        let prior = WeightVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let mut s = LearnerState::new(prior.clone(), 1.0).unwrap();
        for t in 0..50 {
            let g = (t as f64 * 0.37).sin();
            s = squint_step(&s, &[g, g, g]).unwrap();
            for i in 0..3 {
                assert!((s.alpha.get(i) - prior.get(i)).abs() < 1e-15);
            }
        }
    }

    /// `xi` by composite Simpson on a fine grid, with the peak factored out.
    fn xi_by_quadrature(r: f64, v: f64) -> (f64, f64) {
        let f = |e: f64| e * r - e * e * v;
        let n = 4000;
        let h = 0.5 / n as f64;
        let peak = (0..=n).map(|k| f(k as f64 * h)).fold(f64::MIN, f64::max);
        let mut acc = 0.0;
        for k in 0..=n {
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * (f(k as f64 * h) - peak).exp();
        }
        (acc * h / 3.0, peak)
    }

    #[test]
    fn squint_two_experts_against_direct_recurrence() {
        let mut s = state(2);
        s.grad_bound = 1.0;
        let (mut r, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        let mut alpha = [0.5f64, 0.5];
        let mut hit = None;
        let mut prev = 0.5;
        for t in 1..=200 {
            s = squint_step(&s, &[-1.0, 1.0]).unwrap();
            // clipped gradient is (0, 1)
            let mix = alpha[1];
            let inst = [mix, mix - 1.0];
            for i in 0..2 {
                r[i] += inst[i];
                v[i] += inst[i] * inst[i];
            }
            let (x0, p0) = xi_by_quadrature(r[0], v[0]);
            let (x1, p1) = xi_by_quadrature(r[1], v[1]);
            let top = p0.max(p1);
            let w0 = x0 * (p0 - top).exp();
            let w1 = x1 * (p1 - top).exp();
            alpha = [w0 / (w0 + w1), w1 / (w0 + w1)];
            assert!((s.alpha.get(0) - alpha[0]).abs() < 1e-9, "t={t}");
            assert!(s.alpha.get(0) >= prev - 1e-15);
            prev = s.alpha.get(0);
            if hit.is_none() && prev > 0.99 {
                hit = Some(t);
            }
        }
        assert!(hit.is_some());
    }

    #[test]
    fn printed_order_lags_one_step() {
        let mut post = state(2);
        let mut printed = state(2);
        post = squint_step(&post, &[-1.0, 1.0]).unwrap();
        printed = squint_step_with(&printed, &[-1.0, 1.0], UpdateOrder::PrintedOrder).unwrap();
        assert!(post.alpha.get(0) > 0.5);
        assert_eq!(printed.alpha.as_slice(), &[0.5, 0.5]);
        assert_eq!(post.regret, printed.regret);
        let printed2 = squint_step_with(&printed, &[0.0, 0.0], UpdateOrder::PrintedOrder).unwrap();
        let recompute = squint_alpha(&post.prior, &post.regret, &post.variance, 1).unwrap();
        assert_eq!(printed2.alpha, recompute);
    }

    #[test]
    fn eg_closed_form_example() {
        let mut s = state(2);
        s.grad_bound = 1.0;
        for _ in 0..4 {
            s = eg_step(&s, &[-1.0, 1.0]).unwrap();
        }
        assert!((s.alpha.get(0) - 0.84092266368867052548).abs() < 1e-14);
    }

    #[test]
    fn eg_equal_losses_stay_uniform_and_best_leads() {
        let mut s = state(3);
        for _ in 0..10 {
            s = eg_step(&s, &[0.3, 0.3, 0.3]).unwrap();
        }
        for i in 0..3 {
            assert!((s.alpha.get(i) - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut s = state(3);
        for _ in 0..10 {
            s = eg_step(&s, &[0.5, 0.2, 0.5]).unwrap();
        }
        assert_eq!(s.alpha.argmax(), 1);
        assert!(s.alpha.get(1) > s.alpha.get(0));
    }

    #[test]
    fn eg_rejects_single_expert() {
        assert!(eg_step(&state(1), &[0.1]).is_err());
    }

    #[test]
    fn discount_shrinks_accumulators() {
        let mut s = LearnerState::uniform(2, 0.5).unwrap();
        s = squint_step(&s, &[-1.0, 1.0]).unwrap();
        s = squint_step(&s, &[-1.0, 1.0]).unwrap();
        // r1 = (0.5, -0.5), r2 = (1 - a, -a) with a = alpha_1 after step 1
        let a = squint_step(&state(2), &[-1.0, 1.0]).unwrap().alpha.get(1);
        let expected_r0 = 0.5 * 0.5 + a;
        let expected_v0 = 0.25 * 0.25 + a * a;
        assert!((s.regret[0] - expected_r0).abs() < 1e-15);
        assert!((s.variance[0] - expected_v0).abs() < 1e-15);
    }

    #[test]
    fn huge_regret_keeps_weights_positive() {
        let mut s = state(3);
        s.regret = vec![1e6, -1e6, 0.0];
        s.variance = vec![1e9, 1e9, 1.0];
        let s = squint_step(&s, &[0.0, 0.0, 0.0]).unwrap();
        assert!(s.alpha.as_slice().iter().all(|&a| a > 0.0));
        let total: f64 = s.alpha.as_slice().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regret_examples() {
        let mut tr = RegretTracker::new(2);
        let rec = tr.record(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert_eq!(rec.cumulative_regret_vs_each, vec![0.5, -0.5]);
        assert_eq!(cumulative_regret(&[rec]).unwrap(), vec![0.5, -0.5]);

        let mut tr = RegretTracker::new(3);
        let mut hist = Vec::new();
        for t in 0..20 {
            let g = [t as f64, 2.0 * t as f64, -1.0];
            hist.push(tr.record(&[0.0, 1.0, 0.0], &g).unwrap());
        }
        assert_eq!(cumulative_regret(&hist).unwrap()[1], 0.0);
        assert!(cumulative_regret::<f64>(&[]).is_err());
    }

    #[test]
    fn state_json_field_names() {
        let s = squint_step(&state(2), &[0.2, -0.4]).unwrap();
        let json = serde_json::to_value(&s).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["G", "R", "V", "alpha", "discount", "prior", "t"]);
        let back: LearnerState<f64> = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn learner_wrapper_returns_clipped() {
        let mut l = Learner::new(&LearnerConfig::default(), 2).unwrap();
        let c = l.step(&[-2.0, 2.0]).unwrap();
        assert_eq!(c, vec![0.0, 1.0]);
        assert_eq!(l.state().t, 1);
        let cfg = LearnerConfig::<f64> {
            prior: Some(vec![1.0]),
            ..Default::default()
        };
        assert!(Learner::new(&cfg, 2).is_err());
    }

    #[test]
    fn runs_in_f32() {
        let mut s = LearnerState::<f32>::uniform(3, 1.0).unwrap();
        for _ in 0..100 {
            s = squint_step(&s, &[0.1, 0.5, 0.9]).unwrap();
        }
        assert_eq!(s.alpha.argmax(), 0);
    }
}
