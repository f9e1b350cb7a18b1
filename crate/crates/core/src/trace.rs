//! Line-delimited JSON trace files.
//!
//! One [`StepRecord`] per line:
//!
//! ```text
//! {"t": 0, "truth": [x, y, theta], "future": [[x, y, theta], ...],
//!  "experts": [{"gmm": {"modes": [{"p": 0.5, "mean": [[x, y, theta], ...],
//!                                   "prec": [[hx, hy, htheta], ...]}, ...]}},
//!              {"samples": [[[x, y, theta], ...], ...]}, ...]}
//! ```
//!
//! `prec` may be omitted, which marks the expert as having no usable
//! covariance. Every expert in a record must use the same kind. Blank lines
//! are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::gmm::{AgentState, ExpertPrediction, GaussianMode};
use crate::metrics::GroundTruthFuture;
use crate::sampling::SampleSet;
use crate::simulation::{expert_id, Predictions, StepRecord};

/// A trace line that could not be read or does not fit the stream.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: malformed JSON: {message}")]
    Syntax { line: usize, message: String },

    #[error("line {line}: field `{field}`: {reason}")]
    Field {
        line: usize,
        field: String,
        reason: String,
    },

    #[error("line {line}, step {step}: {reason}")]
    Inconsistent {
        line: usize,
        step: u64,
        reason: String,
    },

    #[error("line {line}: read failed: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    t: u64,
    truth: [f64; 3],
    future: Vec<[f64; 3]>,
    experts: Vec<RawExpert>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExpert {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gmm: Option<RawGmm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    samples: Option<Vec<Vec<[f64; 3]>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGmm {
    modes: Vec<RawMode>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMode {
    p: f64,
    mean: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prec: Option<Vec<[f64; 3]>>,
}

fn to_raw(rec: &StepRecord) -> RawRecord {
    let experts = match &rec.predictions {
        Predictions::Gmm(preds) => preds
            .iter()
            .map(|p| RawExpert {
                gmm: Some(RawGmm {
                    modes: p
                        .modes()
                        .iter()
                        .map(|m| RawMode {
                            p: m.weight(),
                            mean: m.mean().iter().map(AgentState::to_array).collect(),
                            prec: p.is_calibrated().then(|| m.precision().to_vec()),
                        })
                        .collect(),
                }),
                samples: None,
            })
            .collect(),
        Predictions::Samples(sets) => sets
            .iter()
            .map(|s| RawExpert {
                gmm: None,
                samples: Some(
                    s.samples()
                        .iter()
                        .map(|traj| traj.iter().map(AgentState::to_array).collect())
                        .collect(),
                ),
            })
            .collect(),
    };
    RawRecord {
        t: rec.t,
        truth: rec.truth.to_array(),
        future: rec.future.states().iter().map(AgentState::to_array).collect(),
        experts,
    }
}

/// Serializes one record as a single JSON line (without the newline).
pub fn record_to_line(rec: &StepRecord) -> String {
    serde_json::to_string(&to_raw(rec)).expect("trace records serialize")
}

/// Writes records one per line to `out`.
pub struct TraceWriter<W: Write> {
    out: W,
    written: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, written: 0 }
    }

    pub fn write(&mut self, rec: &StepRecord) -> std::io::Result<()> {
        self.out.write_all(record_to_line(rec).as_bytes())?;
        self.out.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Writes every record of `records` to `path`, stopping at the first error.
/// Returns the number of records written.
pub fn write_trace<I>(path: &Path, records: I) -> Result<usize>
where
    I: IntoIterator<Item = Result<StepRecord>>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = TraceWriter::new(BufWriter::new(file));
    for rec in records {
        writer.write(&rec?).map_err(|e| Error::io(path, e))?;
    }
    let n = writer.written();
    writer.finish().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

/// Opens `path` for streaming replay.
pub fn replay_trace(path: &Path) -> Result<TraceReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(TraceReader::new(BufReader::new(file)))
}

/// Shape shared by every record of a stream, fixed by the first record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceShape {
    pub experts: usize,
    pub horizon: usize,
    pub samples: bool,
}

/// Yields validated records in file order. Stops after the first error.
pub struct TraceReader<R: BufRead> {
    input: R,
    line: usize,
    shape: Option<TraceShape>,
    failed: bool,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            input,
            line: 0,
            shape: None,
            failed: false,
            buf: String::new(),
        }
    }

    /// Shape of the records read so far.
    pub fn shape(&self) -> Option<TraceShape> {
        self.shape
    }

    fn parse_line(&mut self) -> std::result::Result<StepRecord, TraceError> {
        let line = self.line;
        let text = self.buf.trim_end_matches(['\n', '\r']);
        let mut de = serde_json::Deserializer::from_str(text);
        let raw: RawRecord = match serde_path_to_error::deserialize(&mut de) {
            Ok(r) => r,
            Err(e) => {
                let path = e.path().to_string();
                let inner = e.into_inner();
                return Err(match inner.classify() {
                    serde_json::error::Category::Data => TraceError::Field {
                        line,
                        field: path,
                        reason: inner.to_string(),
                    },
                    _ => TraceError::Syntax {
                        line,
                        message: inner.to_string(),
                    },
                });
            }
        };
        de.end().map_err(|e| TraceError::Syntax {
            line,
            message: e.to_string(),
        })?;
        let rec = from_raw(raw, line)?;
        self.check_shape(&rec, line)?;
        Ok(rec)
    }

    fn check_shape(&mut self, rec: &StepRecord, line: usize) -> std::result::Result<(), TraceError> {
        let shape = TraceShape {
            experts: rec.predictions.len(),
            horizon: rec.future.horizon(),
            samples: matches!(rec.predictions, Predictions::Samples(_)),
        };
        let Some(expected) = self.shape else {
            self.shape = Some(shape);
            return Ok(());
        };
        let reason = if shape.horizon != expected.horizon {
            format!(
                "horizon K = {} differs from K = {} of earlier steps",
                shape.horizon, expected.horizon
            )
        } else if shape.experts != expected.experts {
            format!(
                "{} experts, earlier steps have {}",
                shape.experts, expected.experts
            )
        } else if shape.samples != expected.samples {
            "expert output kind differs from earlier steps".to_string()
        } else {
            return Ok(());
        };
        Err(TraceError::Inconsistent {
            line,
            step: rec.t,
            reason,
        })
    }
}

fn field_err(line: usize, field: impl Into<String>, reason: impl ToString) -> TraceError {
    TraceError::Field {
        line,
        field: field.into(),
        reason: reason.to_string(),
    }
}

fn states(
    raw: &[[f64; 3]],
    line: usize,
    field: impl Fn() -> String,
) -> std::result::Result<Vec<AgentState<f64>>, TraceError> {
    raw.iter()
        .map(|&s| AgentState::from_array(s).map_err(|e| field_err(line, field(), e)))
        .collect()
}

fn from_raw(raw: RawRecord, line: usize) -> std::result::Result<StepRecord, TraceError> {
    let step = raw.t;
    let truth = AgentState::from_array(raw.truth).map_err(|e| field_err(line, "truth", e))?;
    let horizon = raw.future.len();
    let future = GroundTruthFuture::new(states(&raw.future, line, || "future".into())?)
        .map_err(|e| field_err(line, "future", e))?;
    if raw.experts.is_empty() {
        return Err(field_err(line, "experts", "at least one expert is required"));
    }
    let horizon_err = |field: String, found: usize| TraceError::Inconsistent {
        line,
        step,
        reason: format!("`{field}` has {found} states, but the future has K = {horizon}"),
    };

    let mut gmm = Vec::new();
    let mut samples = Vec::new();
    for (i, expert) in raw.experts.into_iter().enumerate() {
        match (expert.gmm, expert.samples) {
            (Some(g), None) => {
                let mut modes = Vec::with_capacity(g.modes.len());
                let mut calibrated = None;
                for (j, m) in g.modes.into_iter().enumerate() {
                    let base = format!("experts[{i}].gmm.modes[{j}]");
                    if m.mean.len() != horizon {
                        return Err(horizon_err(format!("{base}.mean"), m.mean.len()));
                    }
                    let has_prec = m.prec.is_some();
                    if *calibrated.get_or_insert(has_prec) != has_prec {
                        return Err(field_err(
                            line,
                            format!("{base}.prec"),
                            "either every mode of an expert has `prec` or none does",
                        ));
                    }
                    let prec = match m.prec {
                        Some(p) if p.len() != horizon => {
                            return Err(horizon_err(format!("{base}.prec"), p.len()))
                        }
                        Some(p) => p,
                        None => vec![[1.0; 3]; horizon],
                    };
                    let mean = states(&m.mean, line, || format!("{base}.mean"))?;
                    modes.push(
                        GaussianMode::new(mean, prec, m.p).map_err(|e| field_err(line, base, e))?,
                    );
                }
                let pred = ExpertPrediction::new(modes, expert_id(i))
                    .map_err(|e| field_err(line, format!("experts[{i}].gmm.modes"), e))?;
                gmm.push(if calibrated == Some(false) {
                    pred.uncalibrated()
                } else {
                    pred
                });
            }
            (None, Some(s)) => {
                let mut trajs = Vec::with_capacity(s.len());
                for (j, traj) in s.iter().enumerate() {
                    let field = format!("experts[{i}].samples[{j}]");
                    if traj.len() != horizon {
                        return Err(horizon_err(field, traj.len()));
                    }
                    trajs.push(states(traj, line, || field.clone())?);
                }
                samples.push(
                    SampleSet::new(trajs).map_err(|e| field_err(line, format!("experts[{i}].samples"), e))?,
                );
            }
            _ => {
                return Err(field_err(
                    line,
                    format!("experts[{i}]"),
                    "exactly one of `gmm` or `samples` is required",
                ))
            }
        }
    }
    let predictions = match (gmm.is_empty(), samples.is_empty()) {
        (false, true) => {
            let l = gmm[0].mode_count();
            if let Some(i) = gmm.iter().position(|p| p.mode_count() != l) {
                return Err(field_err(
                    line,
                    format!("experts[{i}].gmm.modes"),
                    format!("{} modes, expert 0 has {l}", gmm[i].mode_count()),
                ));
            }
            Predictions::Gmm(gmm)
        }
        (true, false) => Predictions::Samples(samples),
        _ => {
            return Err(field_err(
                line,
                "experts",
                "all experts in a record must emit the same kind",
            ))
        }
    };
    Ok(StepRecord {
        t: step,
        truth,
        future,
        predictions,
    })
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<StepRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.buf.clear();
            self.line += 1;
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(source) => {
                    self.failed = true;
                    return Some(Err(TraceError::Io {
                        line: self.line,
                        source,
                    }
                    .into()));
                }
            }
            if self.buf.trim().is_empty() {
                continue;
            }
            let out = self.parse_line();
            if out.is_err() {
                self.failed = true;
            }
            return Some(out.map_err(Error::from));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{generate_scenario, NoiseScales, OutputKind, RegimeSpec, ScenarioSpec, TruthProcess};
    use std::io::Cursor;

    fn spec(output: OutputKind) -> ScenarioSpec {
        ScenarioSpec {
            n_experts: 2,
            n_modes: 2,
            horizon: 3,
            total_steps: 6,
            regimes: vec![RegimeSpec {
                start_step: 0,
                expert_quality: vec![0.5, 2.0],
                truth_process: TruthProcess::default(),
            }],
            rng_seed: 5,
            noise: NoiseScales::default(),
            mode_concentration: 1.0,
            lane_offset: 3.5,
            uncalibrated: vec![1],
            output,
        }
    }

    fn to_text(records: &[StepRecord]) -> String {
        let mut w = TraceWriter::new(Vec::new());
        for r in records {
            w.write(r).unwrap();
        }
        String::from_utf8(w.finish().unwrap()).unwrap()
    }

    fn read_all(text: &str) -> Vec<Result<StepRecord>> {
        TraceReader::new(Cursor::new(text.to_string())).collect()
    }

    #[test]
    fn round_trip_is_exact() {
        for output in [OutputKind::Gmm, OutputKind::Samples { count: 4 }] {
            let recs: Vec<_> = generate_scenario(&spec(output)).unwrap().map(Result::unwrap).collect();
            let back: Vec<_> = read_all(&to_text(&recs)).into_iter().map(Result::unwrap).collect();
            assert_eq!(recs, back);
        }
    }

    #[test]
    fn truncated_last_line() {
        let recs: Vec<_> = generate_scenario(&spec(OutputKind::Gmm)).unwrap().map(Result::unwrap).collect();
        let mut text = to_text(&recs);
        text.truncate(text.len() - 20);
        let out = read_all(&text);
        assert_eq!(out.len(), recs.len());
        assert!(out[..recs.len() - 1].iter().all(Result::is_ok));
        match out.last().unwrap() {
            Err(Error::Trace(TraceError::Syntax { line, .. })) => assert_eq!(*line, recs.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn horizon_change_names_step() {
        let text = concat!(
            r#"{"t":1,"truth":[0,0,0],"future":[[0,0,0],[1,0,0]],"experts":[{"samples":[[[0,0,0],[1,0,0]]]}]}"#,
            "\n",
            r#"{"t":2,"truth":[0,0,0],"future":[[0,0,0]],"experts":[{"samples":[[[0,0,0]]]}]}"#,
            "\n"
        );
        let out = read_all(text);
        assert!(out[0].is_ok());
        match &out[1] {
            Err(Error::Trace(TraceError::Inconsistent { line: 2, step: 2, .. })) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn field_errors_name_the_field() {
        let text = r#"{"t":0,"truth":[0,0,0],"future":[[0,0,0]],"experts":[{"gmm":{"modes":[{"p":"x","mean":[[0,0,0]]}]}}]}"#;
        match &read_all(text)[0] {
            Err(Error::Trace(TraceError::Field { line: 1, field, .. })) => {
                assert!(field.contains("experts[0].gmm.modes[0].p"), "{field}")
            }
            other => panic!("unexpected {other:?}"),
        }
        let missing = r#"{"t":0,"truth":[0,0,0],"experts":[]}"#;
        let err = read_all(missing).remove(0).unwrap_err().to_string();
        assert!(err.contains("future"), "{err}");
        let short_mean = r#"{"t":0,"truth":[0,0,0],"future":[[0,0,0],[1,1,0]],"experts":[{"gmm":{"modes":[{"p":1,"mean":[[0,0,0]]}]}}]}"#;
        let err = read_all(short_mean).remove(0).unwrap_err().to_string();
        assert!(err.contains("experts[0].gmm.modes[0].mean"), "{err}");
    }

    #[test]
    fn missing_prec_marks_uncalibrated() {
        let text = r#"{"t":0,"truth":[0,0,0],"future":[[0,0,0]],"experts":[{"gmm":{"modes":[{"p":1,"mean":[[0,0,0]]}]}},{"gmm":{"modes":[{"p":1,"mean":[[0,0,0]],"prec":[[2,2,2]]}]}}]}"#;
        let rec = read_all(text).remove(0).unwrap();
        let Predictions::Gmm(p) = rec.predictions else { panic!() };
        assert!(!p[0].is_calibrated());
        assert_eq!(p[0].modes()[0].precision()[0], [1.0; 3]);
        assert!(p[1].is_calibrated());
    }

    #[test]
    fn empty_input_yields_nothing() {
        assert!(read_all("").is_empty());
        assert!(read_all("\n\n").is_empty());
    }
}
