use std::io::Write;

use serde::{Deserialize, Serialize};

use super::engine::NfeReport;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Init,
    UpdateX,
    UpdateY,
    Classify,
    RefreshX,
    RefreshY,
}

/// One ledger-stamped event of a sampling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: usize,
    pub kind: TraceKind,
    pub t: Option<usize>,
    /// Fingerprint of the state produced by the event.
    pub state_hash: u64,
    /// Fingerprint of the cross-conditioning tensor the update consumed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_hash: Option<u64>,
    pub nfe: NfeReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub input_hash: u64,
    pub init_seed: u64,
    pub step_seed: u64,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(
        &mut self,
        kind: TraceKind,
        t: Option<usize>,
        state_hash: u64,
        cond_hash: Option<u64>,
        nfe: NfeReport,
    ) {
        let seq = self.events.len();
        self.events.push(TraceEvent {
            seq,
            kind,
            t,
            state_hash,
            cond_hash,
            nfe,
        });
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// JSON lines: a header object, then one object per event.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::json!({
            "input_hash": self.input_hash,
            "init_seed": self.init_seed,
            "step_seed": self.step_seed,
        });
        writeln!(w, "{header}")?;
        for e in &self.events {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut t = Trace::default();
        if let Some(h) = lines.next() {
            let v: serde_json::Value = serde_json::from_str(h)?;
            t.input_hash = v["input_hash"].as_u64().unwrap_or(0);
            t.init_seed = v["init_seed"].as_u64().unwrap_or(0);
            t.step_seed = v["step_seed"].as_u64().unwrap_or(0);
        }
        for l in lines {
            t.events.push(serde_json::from_str(l)?);
        }
        Ok(t)
    }
}
