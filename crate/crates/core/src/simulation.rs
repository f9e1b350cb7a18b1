//! Synthetic expert streams.
//!
//! Every step draws a fresh ground-truth trajectory from a unicycle model and
//! asks each expert for a prediction. Expert `i` in regime `r` places one mode
//! on the truth corrupted by Gaussian noise whose scale is
//! `expert_quality[r][i]` times the base noise scales; the other modes are
//! decoys offset sideways by multiples of a lane width. Mode precisions match
//! the generating noise, so a well-matched expert is also well calibrated.
//!
//! Steps are independent given the regime. All randomness comes from one
//! ChaCha8 stream seeded by the scenario seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{wrap_angle, AgentState, ExpertPrediction, GaussianMode};
use crate::metrics::GroundTruthFuture;
use crate::sampling::SampleSet;

/// Parameters of the ground-truth unicycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthProcess {
    /// Mean speed in m/s.
    pub base_speed: f64,
    /// Standard deviation of the per-step speed.
    pub speed_std: f64,
    /// Turn rates are uniform in `[-max_turn_rate, max_turn_rate]` rad/s.
    pub max_turn_rate: f64,
    /// Standard deviation of the positional noise added at each future step.
    pub process_noise: f64,
    /// Seconds between future steps.
    pub dt: f64,
}

impl Default for TruthProcess {
    fn default() -> Self {
        Self {
            base_speed: 10.0,
            speed_std: 2.0,
            max_turn_rate: 0.3,
            process_noise: 0.1,
            dt: 0.5,
        }
    }
}

/// A stretch of the stream with fixed expert qualities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub start_step: usize,
    /// Noise multiplier per expert; smaller is better.
    pub expert_quality: Vec<f64>,
    #[serde(default)]
    pub truth_process: TruthProcess,
}

/// Base noise scales multiplied by an expert's quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseScales {
    /// Position standard deviation in meters.
    pub position: f64,
    /// Heading standard deviation in radians.
    pub heading: f64,
}

impl Default for NoiseScales {
    fn default() -> Self {
        Self {
            position: 10.0,
            heading: 2.0,
        }
    }
}

/// What each expert emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OutputKind {
    #[default]
    Gmm,
    /// `count` trajectories drawn from the expert's mixture.
    Samples { count: usize },
}

fn default_concentration() -> f64 {
    1.0
}

fn default_lane_offset() -> f64 {
    3.5
}

/// A full synthetic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_experts: usize,
    pub n_modes: usize,
    pub horizon: usize,
    pub total_steps: usize,
    pub regimes: Vec<RegimeSpec>,
    pub rng_seed: u64,
    #[serde(default)]
    pub noise: NoiseScales,
    /// Dirichlet concentration of the per-step mode weights.
    #[serde(default = "default_concentration")]
    pub mode_concentration: f64,
    /// Lateral spacing of decoy modes in meters.
    #[serde(default = "default_lane_offset")]
    pub lane_offset: f64,
    /// Experts that report means only.
    #[serde(default)]
    pub uncalibrated: Vec<usize>,
    #[serde(default)]
    pub output: OutputKind,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts < 2 {
            return Err(Error::config("n_experts", "must be at least 2"));
        }
        if self.n_modes < 1 {
            return Err(Error::config("n_modes", "must be at least 1"));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.total_steps < 1 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        let Some(first) = self.regimes.first() else {
            return Err(Error::config("regimes", "at least one regime is required"));
        };
        if first.start_step != 0 {
            return Err(Error::config("regimes", "the first regime must start at step 0"));
        }
        for (r, pair) in self.regimes.windows(2).enumerate() {
            if pair[1].start_step <= pair[0].start_step {
                return Err(Error::config(
                    "regimes",
                    format!("start_step of regime {} is not after regime {}", r + 1, r),
                ));
            }
        }
        for (r, regime) in self.regimes.iter().enumerate() {
            if regime.expert_quality.len() != self.n_experts {
                return Err(Error::config(
                    "expert_quality",
                    format!(
                        "regime {r} has {} entries, expected {}",
                        regime.expert_quality.len(),
                        self.n_experts
                    ),
                ));
            }
            if regime.expert_quality.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
                return Err(Error::config("expert_quality", format!("regime {r} has a non-positive entry")));
            }
            let tp = &regime.truth_process;
            let ok = tp.base_speed.is_finite()
                && tp.speed_std >= 0.0
                && tp.max_turn_rate >= 0.0
                && tp.process_noise >= 0.0
                && tp.dt > 0.0
                && tp.speed_std.is_finite()
                && tp.max_turn_rate.is_finite()
                && tp.process_noise.is_finite()
                && tp.dt.is_finite();
            if !ok {
                return Err(Error::config("truth_process", format!("regime {r} has invalid parameters")));
            }
        }
        if !(self.noise.position > 0.0 && self.noise.position.is_finite()) {
            return Err(Error::config("noise.position", "must be positive"));
        }
        if !(self.noise.heading > 0.0 && self.noise.heading.is_finite()) {
            return Err(Error::config("noise.heading", "must be positive"));
        }
        if !(self.mode_concentration > 0.0 && self.mode_concentration.is_finite()) {
            return Err(Error::config("mode_concentration", "must be positive"));
        }
        if !self.lane_offset.is_finite() {
            return Err(Error::config("lane_offset", "must be finite"));
        }
        if let Some(&bad) = self.uncalibrated.iter().find(|&&i| i >= self.n_experts) {
            return Err(Error::config("uncalibrated", format!("expert index {bad} out of range")));
        }
        if let OutputKind::Samples { count: 0 } = self.output {
            return Err(Error::config("output.count", "must be at least 1"));
        }
        Ok(())
    }

    /// Index of the regime active at `step`.
    pub fn regime_at(&self, step: usize) -> usize {
        self.regimes
            .iter()
            .rposition(|r| r.start_step <= step)
            .unwrap_or(0)
    }

    /// Default expert identifiers.
    pub fn expert_ids(&self) -> Vec<String> {
        (0..self.n_experts).map(expert_id).collect()
    }
}

/// Identifier of the `i`-th expert in generated and replayed streams.
pub fn expert_id(i: usize) -> String {
    format!("expert-{i}")
}

/// Per-step expert outputs. All experts in a step emit the same kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Gmm(Vec<ExpertPrediction<f64>>),
    Samples(Vec<SampleSet<f64>>),
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Gmm(p) => p.len(),
            Predictions::Samples(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> Option<usize> {
        match self {
            Predictions::Gmm(p) => p.first().map(|e| e.horizon()),
            Predictions::Samples(s) => s.first().map(|e| e.horizon()),
        }
    }
}

/// One step of a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    /// The state revealed after prediction; equal to the first future state.
    pub truth: AgentState<f64>,
    pub future: GroundTruthFuture<f64>,
    pub predictions: Predictions,
}

/// Deterministic stream of [`StepRecord`]s for a scenario.
pub struct ScenarioStream {
    spec: ScenarioSpec,
    rng: ChaCha8Rng,
    step: usize,
    position_noise: Normal<f64>,
    mode_weights: Gamma<f64>,
}

/// Validates `spec` and returns its stream.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<ScenarioStream> {
    spec.validate()?;
    Ok(ScenarioStream {
        rng: ChaCha8Rng::seed_from_u64(spec.rng_seed),
        step: 0,
        position_noise: Normal::new(0.0, 1.0).expect("unit normal"),
        mode_weights: Gamma::new(spec.mode_concentration, 1.0)
            .map_err(|e| Error::config("mode_concentration", e.to_string()))?,
        spec: spec.clone(),
    })
}

impl ScenarioStream {
    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    fn std_normal(&mut self) -> f64 {
        self.position_noise.sample(&mut self.rng)
    }

    fn truth_future(&mut self, tp: &TruthProcess) -> Vec<[f64; 3]> {
        let mut x = self.rng.random_range(-50.0..50.0);
        let mut y = self.rng.random_range(-50.0..50.0);
        let mut theta: f64 = self.rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = (tp.base_speed + tp.speed_std * self.std_normal()).max(0.0);
        let turn = if tp.max_turn_rate > 0.0 {
            self.rng.random_range(-tp.max_turn_rate..=tp.max_turn_rate)
        } else {
            0.0
        };
        let mut out = Vec::with_capacity(self.spec.horizon);
        for _ in 0..self.spec.horizon {
            theta = wrap_angle(theta + turn * tp.dt);
            x += speed * theta.cos() * tp.dt + tp.process_noise * self.std_normal();
            y += speed * theta.sin() * tp.dt + tp.process_noise * self.std_normal();
            out.push([x, y, theta]);
        }
        out
    }

    fn mode_weights(&mut self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.spec.n_modes)
            .map(|_| self.mode_weights.sample(&mut self.rng).max(f64::MIN_POSITIVE))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    /// Lateral offset multiplier of decoy `d` (1-based): +1, -1, +2, -2, ...
    fn decoy_shift(d: usize) -> f64 {
        let magnitude = d.div_ceil(2) as f64;
        if d % 2 == 1 {
            magnitude
        } else {
            -magnitude
        }
    }

    /// Mode means for one expert: one noisy copy of the truth and lateral decoys.
    fn expert_means(&mut self, future: &[[f64; 3]], sigma: [f64; 3]) -> (Vec<Vec<[f64; 3]>>, usize) {
        let l = self.spec.n_modes;
        let true_mode = self.rng.random_range(0..l);
        let mut means = Vec::with_capacity(l);
        let mut decoy = 0;
        for j in 0..l {
            let shift = if j == true_mode {
                0.0
            } else {
                decoy += 1;
                Self::decoy_shift(decoy) * self.spec.lane_offset
            };
            let mut traj = Vec::with_capacity(future.len());
            for f in future {
                let (s, c) = f[2].sin_cos();
                let x = f[0] - shift * s + sigma[0] * self.std_normal();
                let y = f[1] + shift * c + sigma[1] * self.std_normal();
                let th = wrap_angle(f[2] + sigma[2] * self.std_normal());
                traj.push([x, y, th]);
            }
            means.push(traj);
        }
        (means, true_mode)
    }

    fn next_record(&mut self) -> Result<StepRecord> {
        let t = self.step;
        let regime = self.spec.regimes[self.spec.regime_at(t)].clone();
        let future = self.truth_future(&regime.truth_process);
        let future_states = future
            .iter()
            .map(|&s| AgentState::from_array(s))
            .collect::<Result<Vec<_>>>()?;
        let predictions = match self.spec.output {
            OutputKind::Gmm => {
                let mut preds = Vec::with_capacity(self.spec.n_experts);
                for i in 0..self.spec.n_experts {
                    let sigma = self.expert_sigma(regime.expert_quality[i]);
                    let weights = self.mode_weights();
                    let (means, _) = self.expert_means(&future, sigma);
                    let calibrated = !self.spec.uncalibrated.contains(&i);
                    let prec = if calibrated {
                        [1.0 / (sigma[0] * sigma[0]), 1.0 / (sigma[1] * sigma[1]), 1.0 / (sigma[2] * sigma[2])]
                    } else {
                        [1.0; 3]
                    };
                    let modes = means
                        .into_iter()
                        .zip(weights)
                        .map(|(m, w)| {
                            let mean = m.into_iter().map(AgentState::from_array).collect::<Result<Vec<_>>>()?;
                            GaussianMode::new(mean, vec![prec; self.spec.horizon], w)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let pred = ExpertPrediction::new(modes, expert_id(i))?;
                    preds.push(if calibrated { pred } else { pred.uncalibrated() });
                }
                Predictions::Gmm(preds)
            }
            OutputKind::Samples { count } => {
                let mut sets = Vec::with_capacity(self.spec.n_experts);
                for i in 0..self.spec.n_experts {
                    let sigma = self.expert_sigma(regime.expert_quality[i]);
                    let weights = self.mode_weights();
                    let (means, _) = self.expert_means(&future, sigma);
                    let mut samples = Vec::with_capacity(count);
                    for _ in 0..count {
                        let j = pick(&weights, self.rng.random::<f64>());
                        let mut traj = Vec::with_capacity(self.spec.horizon);
                        for m in &means[j] {
                            let x = m[0] + sigma[0] * self.std_normal();
                            let y = m[1] + sigma[1] * self.std_normal();
                            let th = m[2] + sigma[2] * self.std_normal();
                            traj.push(AgentState::new(x, y, th)?);
                        }
                        samples.push(traj);
                    }
                    sets.push(SampleSet::new(samples)?);
                }
                Predictions::Samples(sets)
            }
        };
        Ok(StepRecord {
            t: t as u64,
            truth: future_states[0],
            future: GroundTruthFuture::new(future_states)?,
            predictions,
        })
    }

    fn expert_sigma(&self, quality: f64) -> [f64; 3] {
        let p = self.spec.noise.position * quality;
        [p, p, self.spec.noise.heading * quality]
    }
}

/// Index `j` with `sum_{i<j} w_i <= u < sum_{i<=j} w_i`, clamped to the last index.
fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return j;
        }
    }
    weights.len() - 1
}

impl Iterator for ScenarioStream {
    type Item = Result<StepRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.step >= self.spec.total_steps {
            return None;
        }
        let rec = self.next_record();
        self.step += 1;
        Some(rec)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.spec.total_steps - self.step;
        (left, Some(left))
    }
}
