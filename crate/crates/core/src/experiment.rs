//! The online loop: experts predict, the mixture is scored, the truth is
//! revealed, the learner updates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{build_moe, ExpertPrediction, WeightVector};
use crate::learners::{Learner, LearnerConfig, LearnerKind, LearnerState, RegretTracker};
use crate::losses::{probability_loss, soft_min_frde, LossEvaluation, SmoothingConfig};
use crate::metrics::{min_ade_k, min_fde_k, nll, GroundTruthFuture, MetricName, MetricSeries};
use crate::sampling::{
    aggregate_sample_loss, importance_sample_moe_with_rng, sample_min_ade, sample_min_fde,
    SampleLossMode, SampleSet,
};
use crate::simulation::{Predictions, StepRecord};

/// Online loss driving the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Negated mixture density at the revealed state.
    #[default]
    Probability,
    /// Smoothed top-k first-step displacement.
    SoftMinFrde,
    /// Mean squared first-step error of each expert's samples.
    SampleMse,
    /// Mean of the `k` best squared first-step errors of each expert's samples.
    SampleTopk,
}

impl LossKind {
    fn needs_samples(self) -> bool {
        matches!(self, LossKind::SampleMse | LossKind::SampleTopk)
    }
}

fn default_k() -> usize {
    10
}

fn default_window() -> usize {
    500
}

fn default_sample_count() -> usize {
    100
}

/// Everything besides the stream that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub learner: LearnerConfig<f64>,
    #[serde(default)]
    pub loss: LossKind,
    /// Softmin/softsort parameters; `smoothing.k` is also the `k` of the sample top-k loss.
    #[serde(default)]
    pub smoothing: SmoothingConfig<f64>,
    /// `k` of minADE/minFDE.
    #[serde(default = "default_k")]
    pub metric_k: usize,
    /// Sliding window for smoothed metrics.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Length of the windows over which the hindsight-best expert is reported.
    #[serde(default = "default_window")]
    pub hindsight_window: usize,
    /// Plays this fixed weight vector instead of learning.
    #[serde(default)]
    pub frozen_alpha: Option<Vec<f64>>,
    /// Size of the importance-sampled mixture for sample-based metrics.
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
    /// Seed of the importance-sampling generator.
    #[serde(default)]
    pub sample_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            learner: LearnerConfig::default(),
            loss: LossKind::Probability,
            smoothing: SmoothingConfig::default(),
            metric_k: default_k(),
            window: default_window(),
            hindsight_window: default_window(),
            frozen_alpha: None,
            sample_count: default_sample_count(),
            sample_seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Checks the fields that do not depend on the stream.
    pub fn validate(&self) -> Result<()> {
        let d = self.learner.discount;
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::config("discount", format!("{d} is outside (0, 1]")));
        }
        let s = &self.smoothing;
        if !(s.softmin_beta.is_finite() && s.softmin_beta > 0.0) {
            return Err(Error::config("beta", format!("{} must be positive", s.softmin_beta)));
        }
        if !(s.softsort_tau.is_finite() && s.softsort_tau > 0.0) {
            return Err(Error::config("tau", format!("{} must be positive", s.softsort_tau)));
        }
        if s.k == 0 {
            return Err(Error::config("topk", "must be at least 1"));
        }
        if self.metric_k == 0 {
            return Err(Error::config("metric_k", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if self.hindsight_window == 0 {
            return Err(Error::config("hindsight_window", "must be at least 1"));
        }
        if self.sample_count == 0 {
            return Err(Error::config("sample_count", "must be at least 1"));
        }
        if let Some(a) = &self.frozen_alpha {
            WeightVector::new(a.clone()).map_err(|e| Error::config("frozen_alpha", e.to_string()))?;
        }
        if let Some(p) = &self.learner.prior {
            let w = WeightVector::new(p.clone()).map_err(|e| Error::config("prior", e.to_string()))?;
            if w.as_slice().iter().any(|&x| x <= 0.0) {
                return Err(Error::config("prior", "entries must be strictly positive"));
            }
        }
        Ok(())
    }
}

/// Best expert over one window of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HindsightWindow {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub best_expert: usize,
    pub cumulative_loss: Vec<f64>,
}

/// Everything logged by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub expert_ids: Vec<String>,
    /// `T + 1` rows: the initial weights and the weights after each update.
    pub alpha: Vec<Vec<f64>>,
    /// Loss of the played mixture at each step.
    pub moe_loss: Vec<f64>,
    /// Loss of each expert on its own at each step.
    pub expert_loss: Vec<Vec<f64>>,
    /// Cumulative regret against each expert on the raw linearized losses, after each step.
    pub regret: Vec<Vec<f64>>,
    /// As `regret`, on the clipped losses the learner sees.
    pub clipped_regret: Vec<Vec<f64>>,
    pub metrics: Vec<MetricSeries<f64>>,
    pub hindsight: Vec<HindsightWindow>,
    /// Steps whose NLL hit the density floor, by subject.
    pub nll_floored: BTreeMap<String, usize>,
    /// `None` when weights were frozen.
    pub final_state: Option<LearnerState<f64>>,
}

/// Subject name of the mixture in metric series.
pub const MOE_SUBJECT: &str = "moe";

impl ExperimentResult {
    pub fn steps(&self) -> usize {
        self.moe_loss.len()
    }

    pub fn metric(&self, name: MetricName, subject: &str) -> Option<&MetricSeries<f64>> {
        self.metrics
            .iter()
            .find(|m| m.name == name && m.subject == subject)
    }

    /// Expert with the smallest total loss over the whole run.
    pub fn hindsight_best(&self) -> Option<usize> {
        let n = self.expert_ids.len();
        if self.expert_loss.is_empty() {
            return None;
        }
        let mut totals = vec![0.0; n];
        for row in &self.expert_loss {
            for (t, l) in totals.iter_mut().zip(row) {
                *t += l;
            }
        }
        argmin(&totals)
    }

    /// Writes the result files into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: &Path, config: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = |prefix: &str| {
            self.expert_ids
                .iter()
                .map(|id| format!(",{prefix}{id}"))
                .collect::<String>()
        };

        let mut alpha = format!("step{}\n", header(""));
        for (t, row) in self.alpha.iter().enumerate() {
            push_row(&mut alpha, t, row);
        }
        write_file(&dir.join("alpha.csv"), &alpha)?;

        let mut regret = format!("step{}{}\n", header("regret_"), header("clipped_regret_"));
        for (t, (raw, clipped)) in self.regret.iter().zip(&self.clipped_regret).enumerate() {
            let row: Vec<f64> = raw.iter().chain(clipped).copied().collect();
            push_row(&mut regret, t, &row);
        }
        write_file(&dir.join("regret.csv"), &regret)?;

        let mut losses = format!("step,{MOE_SUBJECT}{}\n", header(""));
        for (t, (m, row)) in self.moe_loss.iter().zip(&self.expert_loss).enumerate() {
            let full: Vec<f64> = std::iter::once(*m).chain(row.iter().copied()).collect();
            push_row(&mut losses, t, &full);
        }
        write_file(&dir.join("losses.csv"), &losses)?;

        let mut hindsight = format!("start,end,best_expert{}\n", header("loss_"));
        for w in &self.hindsight {
            let _ = write!(hindsight, "{},{},{}", w.start, w.end, self.expert_ids[w.best_expert]);
            for l in &w.cumulative_loss {
                let _ = write!(hindsight, ",{l:?}");
            }
            hindsight.push('\n');
        }
        write_file(&dir.join("hindsight.csv"), &hindsight)?;

        for m in &self.metrics {
            m.save_csv(&dir.join(format!("{}.csv", m.file_stem())))?;
        }

        let summary = serde_json::json!({
            "steps": self.steps(),
            "experts": self.expert_ids,
            "final_alpha": self.alpha.last(),
            "cumulative_regret": self.regret.last(),
            "cumulative_clipped_regret": self.clipped_regret.last(),
            "hindsight_best": self.hindsight_best().map(|i| &self.expert_ids[i]),
            "nll_floored": self.nll_floored,
            "learner_state": self.final_state,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        write_json(&dir.join("config.json"), config)
    }
}

fn push_row(out: &mut String, step: usize, row: &[f64]) {
    let _ = write!(out, "{step}");
    for v in row {
        let _ = write!(out, ",{v:?}");
    }
    out.push('\n');
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    write_file(path, &(text + "\n"))
}

fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// First row of `alpha` whose entry `expert` reaches `threshold`.
pub fn steps_to_threshold(alpha: &[Vec<f64>], expert: usize, threshold: f64) -> Option<usize> {
    alpha.iter().position(|row| row[expert] >= threshold)
}

/// Per-subject raw metric values accumulated during a run.
#[derive(Default)]
struct MetricLog {
    ade: Vec<f64>,
    fde: Vec<f64>,
    nll: Vec<f64>,
    nll_valid: bool,
    floored: usize,
}

impl MetricLog {
    fn new() -> Self {
        Self {
            nll_valid: true,
            ..Self::default()
        }
    }
}

struct Driver {
    cfg: ExperimentConfig,
    n: usize,
    learner: Option<Learner<f64>>,
    frozen: Option<WeightVector<f64>>,
    frozen_bound: f64,
    raw_regret: RegretTracker<f64>,
    clipped_regret: RegretTracker<f64>,
    rng: ChaCha8Rng,
    moe: MetricLog,
    experts: Vec<MetricLog>,
    result: ExperimentResult,
}

impl Driver {
    fn new(cfg: &ExperimentConfig, first: &StepRecord) -> Result<Self> {
        let n = first.predictions.len();
        let (learner, frozen) = match &cfg.frozen_alpha {
            Some(a) => {
                if a.len() != n {
                    return Err(Error::config(
                        "frozen_alpha",
                        format!("has {} entries for {n} experts", a.len()),
                    ));
                }
                (None, Some(WeightVector::new(a.clone())?))
            }
            None => {
                if cfg.learner.kind == LearnerKind::Eg && n < 2 {
                    return Err(Error::config("learner", "eg requires at least 2 experts"));
                }
                if cfg.learner.prior.as_ref().is_some_and(|p| p.len() != n) {
                    return Err(Error::config("prior", format!("expected {n} entries")));
                }
                (Some(Learner::new(&cfg.learner, n)?), None)
            }
        };
        let expert_ids = match &first.predictions {
            Predictions::Gmm(p) => p.iter().map(|e| e.expert_id().to_string()).collect(),
            Predictions::Samples(_) => (0..n).map(crate::simulation::expert_id).collect(),
        };
        let mut driver = Self {
            cfg: cfg.clone(),
            n,
            learner,
            frozen,
            frozen_bound: 0.0,
            raw_regret: RegretTracker::new(n),
            clipped_regret: RegretTracker::new(n),
            rng: ChaCha8Rng::seed_from_u64(cfg.sample_seed),
            moe: MetricLog::new(),
            experts: (0..n).map(|_| MetricLog::new()).collect(),
            result: ExperimentResult {
                expert_ids,
                alpha: Vec::new(),
                moe_loss: Vec::new(),
                expert_loss: Vec::new(),
                regret: Vec::new(),
                clipped_regret: Vec::new(),
                metrics: Vec::new(),
                hindsight: Vec::new(),
                nll_floored: BTreeMap::new(),
                final_state: None,
            },
        };
        let a0 = driver.alpha().as_slice().to_vec();
        driver.result.alpha.push(a0);
        Ok(driver)
    }

    fn alpha(&self) -> WeightVector<f64> {
        match (&self.learner, &self.frozen) {
            (Some(l), _) => l.alpha().clone(),
            (None, Some(a)) => a.clone(),
            (None, None) => unreachable!("driver has a learner or frozen weights"),
        }
    }

    fn step(&mut self, rec: StepRecord) -> Result<()> {
        let t = rec.t;
        self.advance(rec).map_err(|e| match e {
            Error::NonFinite(what) => Error::Numerical {
                step: t,
                detail: format!("non-finite {what}"),
            },
            e => e,
        })
    }

    fn advance(&mut self, rec: StepRecord) -> Result<()> {
        if rec.predictions.len() != self.n {
            return Err(Error::DimensionMismatch {
                what: "experts per step",
                expected: self.n,
                found: rec.predictions.len(),
            });
        }
        let alpha = self.alpha();
        let (eval, expert_loss) = match &rec.predictions {
            Predictions::Gmm(preds) => {
                if self.cfg.loss.needs_samples() {
                    return Err(Error::config("loss", "sample losses need sample-emitting experts"));
                }
                self.gmm_metrics(preds, &alpha, &rec.future)?;
                self.gmm_loss(preds, &alpha, &rec)?
            }
            Predictions::Samples(sets) => {
                if !self.cfg.loss.needs_samples() {
                    return Err(Error::config("loss", "mixture losses need mixture-emitting experts"));
                }
                self.sample_metrics(sets, &alpha, &rec.future)?;
                self.sample_loss(sets, &alpha, &rec)?
            }
        };

        let raw = self.raw_regret.record(alpha.as_slice(), &eval.gradient)?;
        self.result.regret.push(raw.cumulative_regret_vs_each);
        let clipped = match &mut self.learner {
            Some(l) => l.step(&eval.gradient)?,
            None => {
                // frozen weights: clip against the running bound for reporting only
                let bound = eval.gradient.iter().fold(self.frozen_bound, |m, v| m.max(v.abs()));
                self.frozen_bound = bound;
                eval.gradient
                    .iter()
                    .map(|&g| if bound == 0.0 { 0.5 } else { (g / bound + 1.0) / 2.0 })
                    .collect()
            }
        };
        let cr = self.clipped_regret.record(alpha.as_slice(), &clipped)?;
        self.result.clipped_regret.push(cr.cumulative_regret_vs_each);
        self.result.moe_loss.push(eval.value);
        self.result.expert_loss.push(expert_loss);
        let next = self.alpha().as_slice().to_vec();
        self.result.alpha.push(next);
        Ok(())
    }

    fn gmm_loss(
        &self,
        preds: &[ExpertPrediction<f64>],
        alpha: &WeightVector<f64>,
        rec: &StepRecord,
    ) -> Result<(LossEvaluation<f64>, Vec<f64>)> {
        match self.cfg.loss {
            LossKind::Probability => {
                let ev = probability_loss(preds, alpha, &rec.truth)?;
                let per = ev.gradient.clone();
                Ok((ev, per))
            }
            LossKind::SoftMinFrde => {
                let total = preds.len() * preds[0].mode_count();
                let cfg = clamp_k(&self.cfg.smoothing, total);
                let ev = soft_min_frde(preds, alpha, &rec.truth, &cfg)?;
                let one = WeightVector::uniform(1)?;
                let per = preds
                    .iter()
                    .map(|p| {
                        let single = std::slice::from_ref(p);
                        let c = clamp_k(&self.cfg.smoothing, p.mode_count());
                        soft_min_frde(single, &one, &rec.truth, &c).map(|e| e.value)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((ev, per))
            }
            LossKind::SampleMse | LossKind::SampleTopk => unreachable!("checked by caller"),
        }
    }

    fn sample_loss(
        &self,
        sets: &[SampleSet<f64>],
        alpha: &WeightVector<f64>,
        rec: &StepRecord,
    ) -> Result<(LossEvaluation<f64>, Vec<f64>)> {
        let (mode, k) = match self.cfg.loss {
            LossKind::SampleMse => (SampleLossMode::Mse, 1),
            LossKind::SampleTopk => {
                let m = sets.iter().map(SampleSet::len).min().unwrap_or(1);
                (SampleLossMode::Topk, self.cfg.smoothing.k.min(m))
            }
            _ => unreachable!("checked by caller"),
        };
        let ev = aggregate_sample_loss(sets, alpha, &rec.truth, mode, k)?;
        let per = ev.gradient.clone();
        Ok((ev, per))
    }

    fn gmm_metrics(
        &mut self,
        preds: &[ExpertPrediction<f64>],
        alpha: &WeightVector<f64>,
        future: &GroundTruthFuture<f64>,
    ) -> Result<()> {
        let moe = build_moe(preds, alpha)?;
        // zero-weight components are never selected
        let support = moe.components().iter().filter(|c| c.weight > 0.0).count().max(1);
        let k = self.cfg.metric_k.min(support);
        self.moe.ade.push(min_ade_k(&moe, future, k)?);
        self.moe.fde.push(min_fde_k(&moe, future, k)?);
        let mask: Vec<bool> = preds.iter().map(ExpertPrediction::is_calibrated).collect();
        let truth = &future.states()[0];
        match moe.restricted(&mask) {
            Some(calibrated) => {
                let v = nll(&calibrated, truth);
                self.moe.floored += usize::from(v.floored);
                self.moe.nll.push(v.value);
            }
            None => self.moe.nll_valid = false,
        }

        let one = WeightVector::uniform(1)?;
        for (i, pred) in preds.iter().enumerate() {
            let single = build_moe(std::slice::from_ref(pred), &one)?;
            let k = self.cfg.metric_k.min(single.len());
            let log = &mut self.experts[i];
            log.ade.push(min_ade_k(&single, future, k)?);
            log.fde.push(min_fde_k(&single, future, k)?);
            if pred.is_calibrated() {
                let v = nll(&single, truth);
                log.floored += usize::from(v.floored);
                log.nll.push(v.value);
            } else {
                log.nll_valid = false;
            }
        }
        Ok(())
    }

    fn sample_metrics(
        &mut self,
        sets: &[SampleSet<f64>],
        alpha: &WeightVector<f64>,
        future: &GroundTruthFuture<f64>,
    ) -> Result<()> {
        let mixed = importance_sample_moe_with_rng(sets, alpha, self.cfg.sample_count, &mut self.rng)?;
        self.moe.ade.push(sample_min_ade(&mixed, future)?);
        self.moe.fde.push(sample_min_fde(&mixed, future)?);
        self.moe.nll_valid = false;
        for (i, set) in sets.iter().enumerate() {
            let log = &mut self.experts[i];
            log.ade.push(sample_min_ade(set, future)?);
            log.fde.push(sample_min_fde(set, future)?);
            log.nll_valid = false;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<ExperimentResult> {
        let window = self.cfg.window;
        let k = Some(self.cfg.metric_k);
        let subjects = std::iter::once((MOE_SUBJECT.to_string(), self.moe))
            .chain(self.result.expert_ids.clone().into_iter().zip(self.experts));
        for (subject, log) in subjects {
            let r = &mut self.result;
            r.metrics.push(MetricSeries::new(MetricName::MinAde, k, subject.clone(), log.ade, window)?);
            r.metrics.push(MetricSeries::new(MetricName::MinFde, k, subject.clone(), log.fde, window)?);
            if log.nll_valid {
                if log.floored > 0 {
                    log::warn!("{subject}: density floored on {} steps", log.floored);
                }
                r.nll_floored.insert(subject.clone(), log.floored);
                r.metrics.push(MetricSeries::new(MetricName::Nll, None, subject, log.nll, window)?);
            }
        }
        let hw = self.cfg.hindsight_window;
        let steps = self.result.expert_loss.len();
        let mut start = 0;
        while start < steps {
            let end = (start + hw).min(steps);
            let mut totals = vec![0.0; self.n];
            for row in &self.result.expert_loss[start..end] {
                for (t, l) in totals.iter_mut().zip(row) {
                    *t += l;
                }
            }
            self.result.hindsight.push(HindsightWindow {
                start,
                end,
                best_expert: argmin(&totals).unwrap_or(0),
                cumulative_loss: totals,
            });
            start = end;
        }
        self.result.final_state = self.learner.map(|l| l.state().clone());
        Ok(self.result)
    }
}

fn clamp_k(cfg: &SmoothingConfig<f64>, count: usize) -> SmoothingConfig<f64> {
    SmoothingConfig {
        k: cfg.k.min(count),
        ..*cfg
    }
}

/// Runs the online loop over `stream`.
///
/// Fails on the first stream error, or with [`Error::Numerical`] naming the
/// step if the learner produces a NaN.
pub fn run_experiment<I>(stream: I, cfg: &ExperimentConfig) -> Result<ExperimentResult>
where
    I: IntoIterator<Item = Result<StepRecord>>,
{
    cfg.validate()?;
    let mut driver: Option<Driver> = None;
    for rec in stream {
        let rec = rec?;
        let d = match &mut driver {
            Some(d) => d,
            None => driver.insert(Driver::new(cfg, &rec)?),
        };
        d.step(rec)?;
    }
    match driver {
        Some(d) => {
            log::debug!("finished {} steps with {} experts", d.result.expert_loss.len(), d.n);
            d.finish()
        }
        None => Err(Error::invalid("stream", "contains no steps")),
    }
}

/// Weight threshold used for steps-to-threshold comparisons.
pub const CONVERGENCE_THRESHOLD: f64 = 0.9;

/// Outcome of running SQUINT and EG on the same stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    /// Hindsight-best expert of the shared stream.
    pub best_expert: usize,
    pub threshold: f64,
    pub squint_steps: Option<usize>,
    pub eg_steps: Option<usize>,
    /// `eg_steps / squint_steps` when both crossed.
    pub ratio: Option<f64>,
}

/// Runs SQUINT and EG side by side on two copies of the same stream.
pub fn compare_learners<F, I>(make_stream: F, cfg: &ExperimentConfig) -> Result<(CompareReport, ExperimentResult, ExperimentResult)>
where
    F: Fn() -> Result<I> + Sync,
    I: IntoIterator<Item = Result<StepRecord>>,
{
    let arm = |kind: LearnerKind| {
        let mut c = cfg.clone();
        c.learner.kind = kind;
        c.frozen_alpha = None;
        run_experiment(make_stream()?, &c)
    };
    let (squint, eg) = std::thread::scope(|s| {
        let h = s.spawn(|| arm(LearnerKind::Eg));
        let squint = arm(LearnerKind::Squint);
        (squint, h.join().expect("eg arm panicked"))
    });
    let (squint, eg) = (squint?, eg?);
    let best = squint.hindsight_best().unwrap_or(0);
    let squint_steps = steps_to_threshold(&squint.alpha, best, CONVERGENCE_THRESHOLD);
    let eg_steps = steps_to_threshold(&eg.alpha, best, CONVERGENCE_THRESHOLD);
    let ratio = match (squint_steps, eg_steps) {
        (Some(s), Some(e)) => Some(e as f64 / s.max(1) as f64),
        _ => None,
    };
    Ok((
        CompareReport {
            best_expert: best,
            threshold: CONVERGENCE_THRESHOLD,
            squint_steps,
            eg_steps,
            ratio,
        },
        squint,
        eg,
    ))
}
