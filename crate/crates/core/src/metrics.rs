//! Evaluation metrics over full prediction horizons.
//!
//! These never feed back into learning; they score a mixture against the
//! revealed future after the fact.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{moe_pdf, AgentState, ExpertPrediction, MoeDistribution};
use crate::losses::{check_k, sliding_window_average, topk_indices};
use crate::scalar::Scalar;

/// Densities below this are floored before taking the log.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// The revealed future `x_t(1..K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFuture<T> {
    states: Vec<AgentState<T>>,
}

impl<T: Scalar> GroundTruthFuture<T> {
    pub fn new(states: Vec<AgentState<T>>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("ground-truth future", "horizon must be at least 1"));
        }
        Ok(Self { states })
    }

    pub fn states(&self) -> &[AgentState<T>] {
        &self.states
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }
}

fn check_horizon<T: Scalar>(moe: &MoeDistribution<'_, T>, truth: &GroundTruthFuture<T>) -> Result<()> {
    if moe.horizon() != truth.horizon() {
        return Err(Error::HorizonMismatch {
            expected: moe.horizon(),
            found: truth.horizon(),
        });
    }
    Ok(())
}

/// Smallest mean planar displacement over the horizon among the top-`k` components.
pub fn min_ade_k<T: Scalar>(
    moe: &MoeDistribution<'_, T>,
    truth: &GroundTruthFuture<T>,
    k: usize,
) -> Result<T> {
    check_horizon(moe, truth)?;
    check_k(k, moe.len())?;
    let horizon = T::from_usize(truth.horizon()).unwrap();
    let best = topk_indices(&moe.weights(), k)
        .into_iter()
        .map(|c| {
            let mean = moe.components()[c].mode.mean();
            let total = mean
                .iter()
                .zip(truth.states())
                .fold(T::zero(), |acc, (m, x)| acc + x.planar_distance(m));
            total / horizon
        })
        .fold(T::infinity(), T::min);
    Ok(best)
}

/// Smallest planar displacement at the final step among the top-`k` components.
pub fn min_fde_k<T: Scalar>(
    moe: &MoeDistribution<'_, T>,
    truth: &GroundTruthFuture<T>,
    k: usize,
) -> Result<T> {
    check_horizon(moe, truth)?;
    check_k(k, moe.len())?;
    let last = truth.states().last().expect("non-empty future");
    let best = topk_indices(&moe.weights(), k)
        .into_iter()
        .map(|c| {
            let mean = moe.components()[c].mode.mean();
            last.planar_distance(&mean[mean.len() - 1])
        })
        .fold(T::infinity(), T::min);
    Ok(best)
}

/// Negative log-likelihood and whether the density was floored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nll<T> {
    pub value: T,
    pub floored: bool,
}

/// `-ln p(x_true)` under the mixture, with the density floored at [`DENSITY_FLOOR`].
pub fn nll<T: Scalar>(moe: &MoeDistribution<'_, T>, x_true: &AgentState<T>) -> Nll<T> {
    let density = moe_pdf(moe, x_true);
    let floor = T::lit(DENSITY_FLOOR).max(T::min_positive_value());
    if density < floor || density.is_nan() {
        Nll {
            value: -floor.ln(),
            floored: true,
        }
    } else {
        Nll {
            value: -density.ln(),
            floored: false,
        }
    }
}

/// Experts whose predictions carry a usable covariance. Uncalibrated experts
/// are excluded from NLL.
pub fn nll_mask<T: Scalar>(predictions: &[ExpertPrediction<T>]) -> Vec<bool> {
    predictions.iter().map(ExpertPrediction::is_calibrated).collect()
}

/// Metric identifiers as they appear in output files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "minADE")]
    MinAde,
    #[serde(rename = "minFDE")]
    MinFde,
    #[serde(rename = "NLL")]
    Nll,
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricName::MinAde => "minADE",
            MetricName::MinFde => "minFDE",
            MetricName::Nll => "NLL",
        })
    }
}

/// One metric's per-step values for one subject (the mixture or an expert)
/// and their sliding-window average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct MetricSeries<T> {
    pub name: MetricName,
    /// Top-k size for displacement metrics.
    pub k: Option<usize>,
    /// `"moe"` or an expert id.
    pub subject: String,
    pub window: usize,
    pub raw: Vec<T>,
    pub smoothed: Vec<T>,
}

impl<T: Scalar> MetricSeries<T> {
    pub fn new(
        name: MetricName,
        k: Option<usize>,
        subject: impl Into<String>,
        raw: Vec<T>,
        window: usize,
    ) -> Result<Self> {
        let smoothed = sliding_window_average(&raw, window)?;
        Ok(Self {
            name,
            k,
            subject: subject.into(),
            window,
            raw,
            smoothed,
        })
    }

    /// File stem such as `minADE10_moe` or `NLL_expert-0`.
    pub fn file_stem(&self) -> String {
        match self.k {
            Some(k) => format!("{}{}_{}", self.name, k, self.subject),
            None => format!("{}_{}", self.name, self.subject),
        }
    }

    /// Writes `step,raw,smoothed` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,raw,smoothed")?;
        for (t, (r, s)) in self.raw.iter().zip(&self.smoothed).enumerate() {
            writeln!(out, "{},{},{}", t, r, s)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_csv(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{build_moe, GaussianMode, WeightVector};

    fn st(x: f64, y: f64) -> AgentState<f64> {
        AgentState::new(x, y, 0.0).unwrap()
    }

    fn traj(points: &[(f64, f64)]) -> Vec<AgentState<f64>> {
        points.iter().map(|&(x, y)| st(x, y)).collect()
    }

    fn single(points: &[(f64, f64)], weight: f64) -> GaussianMode<f64> {
        GaussianMode::new(traj(points), vec![[1.0; 3]; points.len()], weight).unwrap()
    }

    #[test]
    fn exact_match_scores_zero() {
        let pts = [(0.0, 0.0), (1.0, 0.5), (2.0, 1.5)];
        let pred = [ExpertPrediction::new(vec![single(&pts, 1.0)], "a").unwrap()];
        let alpha = WeightVector::uniform(1).unwrap();
        let moe = build_moe(&pred, &alpha).unwrap();
        let truth = GroundTruthFuture::new(traj(&pts)).unwrap();
        assert_eq!(min_ade_k(&moe, &truth, 1).unwrap(), 0.0);
        assert_eq!(min_fde_k(&moe, &truth, 1).unwrap(), 0.0);
    }

    #[test]
    fn single_step_horizon_collapses() {
        let modes = vec![single(&[(3.0, 4.0)], 0.6), single(&[(1.0, 0.0)], 0.4)];
        let pred = [ExpertPrediction::new(modes, "a").unwrap()];
        let alpha = WeightVector::uniform(1).unwrap();
        let moe = build_moe(&pred, &alpha).unwrap();
        let truth = GroundTruthFuture::new(traj(&[(0.0, 0.0)])).unwrap();
        for k in 1..=2 {
            assert_eq!(min_ade_k(&moe, &truth, k).unwrap(), min_fde_k(&moe, &truth, k).unwrap());
        }
        assert_eq!(min_fde_k(&moe, &truth, 1).unwrap(), 5.0);
        assert_eq!(min_fde_k(&moe, &truth, 2).unwrap(), 1.0);
    }

    #[test]
    fn equidistant_final_means() {
        let modes = vec![
            single(&[(0.0, 0.0), (3.0, 0.0)], 0.5),
            single(&[(0.0, 0.0), (0.0, 3.0)], 0.3),
            single(&[(0.0, 0.0), (-3.0, 0.0)], 0.2),
        ];
        let pred = [ExpertPrediction::new(modes, "a").unwrap()];
        let alpha = WeightVector::uniform(1).unwrap();
        let moe = build_moe(&pred, &alpha).unwrap();
        let truth = GroundTruthFuture::new(traj(&[(0.0, 0.0), (0.0, 0.0)])).unwrap();
        for k in 1..=3 {
            assert_eq!(min_fde_k(&moe, &truth, k).unwrap(), 3.0);
        }
        assert!(min_fde_k(&moe, &truth, 4).is_err());
        let short = GroundTruthFuture::new(traj(&[(0.0, 0.0)])).unwrap();
        assert!(matches!(
            min_ade_k(&moe, &short, 1),
            Err(Error::HorizonMismatch { .. })
        ));
    }

    #[test]
    fn nll_of_unit_gaussian() {
        let pred = [ExpertPrediction::new(vec![single(&[(0.0, 0.0)], 1.0)], "a").unwrap()];
        let alpha = WeightVector::uniform(1).unwrap();
        let moe = build_moe(&pred, &alpha).unwrap();
        let n = nll(&moe, &st(0.0, 0.0));
        assert!((n.value - 2.7568155996140182253).abs() < 1e-14);
        assert!(!n.floored);

        let twin = [ExpertPrediction::new(
            vec![single(&[(0.0, 0.0)], 0.5), single(&[(0.0, 0.0)], 0.5)],
            "b",
        )
        .unwrap()];
        let moe2 = build_moe(&twin, &alpha).unwrap();
        assert!((nll(&moe2, &st(0.0, 0.0)).value - n.value).abs() < 1e-14);
    }

    #[test]
    fn nll_floors_far_truth() {
        let pred = [ExpertPrediction::new(vec![single(&[(0.0, 0.0)], 1.0)], "a").unwrap()];
        let alpha = WeightVector::uniform(1).unwrap();
        let moe = build_moe(&pred, &alpha).unwrap();
        let n = nll(&moe, &st(1e4, 0.0));
        assert!(n.floored);
        assert!((n.value - 690.7755278982137).abs() < 1e-9);
    }

    #[test]
    fn series_csv() {
        let s = MetricSeries::new(MetricName::MinAde, Some(10), "moe", vec![1.0, 3.0, 5.0], 2).unwrap();
        assert_eq!(s.file_stem(), "minADE10_moe");
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,raw,smoothed\n0,1,1\n1,3,2\n2,5,4\n");
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["name"], "minADE");
        let nll_series = MetricSeries::<f64>::new(MetricName::Nll, None, "e1", vec![], 5).unwrap();
        assert_eq!(nll_series.file_stem(), "NLL_e1");
    }
}
