use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{MsgId, ProcId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Send,
    Deliver,
    Drop,
    Timer,
    Note,
}

/// One trace record. `msg` links a send to its deliveries or drop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub time: Tick,
    pub kind: EventKind,
    pub src: ProcId,
    pub dst: ProcId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg: Option<MsgId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("event {seq}: out of (time, seq) order")]
    OutOfOrder { seq: u64 },
    #[error("event {seq}: {kind:?} of message {msg} without an earlier send")]
    Unsent {
        seq: u64,
        kind: EventKind,
        msg: MsgId,
    },
    #[error("event {seq}: message {msg} endpoints or digest differ from its send")]
    Mismatch { seq: u64, msg: MsgId },
    #[error("event {seq}: {kind:?} without a message id")]
    MissingMsg { seq: u64, kind: EventKind },
}

/// Totally ordered event log of one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn write_jsonl(&self, mut w: impl Write) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        self.write_jsonl(&mut out)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(out).expect("json is utf-8")
    }

    pub fn read_jsonl(r: impl BufRead) -> io::Result<Self> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            events.push(e);
        }
        Ok(Self { events })
    }

    pub fn notes(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::Note)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Transport sanity: events are ordered by `(time, seq)` and every
    /// deliver or drop matches an earlier send with the same endpoints and
    /// digest.
    pub fn check_transport(&self) -> Result<(), TraceError> {
        let mut sends: HashMap<MsgId, &TraceEvent> = HashMap::new();
        let mut prev: Option<(Tick, u64)> = None;
        for e in &self.events {
            if prev.is_some_and(|p| p >= (e.time, e.seq)) {
                return Err(TraceError::OutOfOrder { seq: e.seq });
            }
            prev = Some((e.time, e.seq));
            match e.kind {
                EventKind::Send => {
                    let msg = e.msg.ok_or(TraceError::MissingMsg {
                        seq: e.seq,
                        kind: e.kind,
                    })?;
                    sends.insert(msg, e);
                }
                EventKind::Deliver | EventKind::Drop => {
                    let msg = e.msg.ok_or(TraceError::MissingMsg {
                        seq: e.seq,
                        kind: e.kind,
                    })?;
                    let s = sends.get(&msg).ok_or(TraceError::Unsent {
                        seq: e.seq,
                        kind: e.kind,
                        msg,
                    })?;
                    if s.src != e.src || s.dst != e.dst || s.digest != e.digest {
                        return Err(TraceError::Mismatch { seq: e.seq, msg });
                    }
                }
                EventKind::Timer | EventKind::Note => {}
            }
        }
        Ok(())
    }
}
