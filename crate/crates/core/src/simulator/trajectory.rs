use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Action, HiddenState, Observation, Outcome, PatientStatic};
use crate::cardio::CardioBaselines;
use crate::error::{Error, Result};

/// One logged hour: what was observed, what was done, and what followed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourRecord {
    pub hour: u32,
    pub obs: Observation,
    pub hidden: Option<HiddenState>,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub patient_id: u64,
    pub static_: PatientStatic,
    pub baseline: Option<CardioBaselines>,
    pub outcome: Outcome,
    pub records: Vec<HourRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Hours remaining including the current one; the terminal record has 1.
    pub fn hours_to_end(&self, t: usize) -> usize {
        self.records.len() - t
    }

    fn validate(&self) -> Result<()> {
        let n = self.records.len();
        if n == 0 {
            return Err(Error::Format(format!("patient {} has no records", self.patient_id)));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.hour as usize != i {
                return Err(Error::Format(format!("patient {}: expected hour {i}, found {}", self.patient_id, r.hour)));
            }
            if r.done != (i + 1 == n) {
                return Err(Error::Format(format!(
                    "patient {}: exactly the last record must be terminal",
                    self.patient_id
                )));
            }
            if r.action.vaso > 2 || r.action.fluid > 2 {
                return Err(Error::Format(format!("patient {}: action out of range", self.patient_id)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    patient_id: u64,
    hour: u32,
    #[serde(rename = "static")]
    static_: PatientStatic,
    obs: Observation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<HiddenState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    baseline: Option<BaselineBlock>,
    action: Action,
    reward: f64,
    done: bool,
    outcome: Outcome,
}

#[derive(Serialize, Deserialize)]
struct BaselineBlock {
    #[serde(rename = "R0")]
    r0: f64,
    #[serde(rename = "C0")]
    c0: f64,
    #[serde(rename = "SV0")]
    sv0: f64,
    #[serde(rename = "F0")]
    f0: f64,
}

/// Writes one JSON object per hour, patients in the given order.
pub fn write_jsonl<W: Write>(mut w: W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        for r in &t.records {
            let line = Line {
                patient_id: t.patient_id,
                hour: r.hour,
                static_: t.static_,
                obs: r.obs,
                hidden: r.hidden,
                baseline: t.baseline.map(|b| BaselineBlock { r0: b.r0, c0: b.c0, sv0: b.sv0, f0: b.f0 }),
                action: r.action,
                reward: r.reward,
                done: r.done,
                outcome: t.outcome,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads trajectories written by [`write_jsonl`]. Records of one patient must
/// be contiguous and in hour order; `hidden` and `baseline` may be absent.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out: Vec<Trajectory> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        let hour = HourRecord {
            hour: rec.hour,
            obs: rec.obs,
            hidden: rec.hidden,
            action: rec.action,
            reward: rec.reward,
            done: rec.done,
        };
        match out.last_mut() {
            Some(t) if t.patient_id == rec.patient_id && !t.records.last().is_some_and(|r| r.done) => {
                t.records.push(hour);
            }
            _ => {
                if out.iter().any(|t| t.patient_id == rec.patient_id) {
                    return Err(Error::Format(format!(
                        "line {}: records of patient {} are not contiguous",
                        lineno + 1,
                        rec.patient_id
                    )));
                }
                out.push(Trajectory {
                    patient_id: rec.patient_id,
                    static_: rec.static_,
                    baseline: rec.baseline.map(|b| CardioBaselines { r0: b.r0, c0: b.c0, sv0: b.sv0, f0: b.f0 }),
                    outcome: rec.outcome,
                    records: vec![hour],
                });
            }
        }
    }
    for t in &out {
        t.validate()?;
    }
    Ok(out)
}
