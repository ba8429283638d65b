use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::world::FeatureSpace;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Narration,
    Dialogue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// A dialogue turn placed right after the frame it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub kind: Role,
    pub frame: usize,
    pub text: String,
}

/// How frame features are regenerated from per-frame states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub seed: u64,
    pub appearance_seed: u64,
    pub noise_std: f64,
    #[serde(default)]
    pub onset_cue: f64,
    pub dim: usize,
    pub num_activities: usize,
}

impl FeatureSpec {
    pub fn space(&self) -> FeatureSpace {
        FeatureSpace::new(self.num_activities, self.dim, self.noise_std, self.onset_cue, self.appearance_seed)
    }
}

/// A timeline of frames with interleaved turns. Every frame `0..num_frames`
/// is an implicit Frame event; turns at frame `t` follow that frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSample {
    pub version: u64,
    #[serde(default)]
    pub id: String,
    pub fps: f64,
    pub num_frames: usize,
    pub source: Source,
    /// Activity per frame, -1 for background.
    pub states: Vec<i64>,
    pub features: FeatureSpec,
    #[serde(rename = "events")]
    pub turns: Vec<Turn>,
}

/// One element of the expanded event order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event<'a> {
    Frame(usize),
    User(usize, &'a str),
    Assistant(usize, &'a str),
}

impl StreamSample {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSample(format!("{}: {m}", self.id)));
        if self.version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found: self.version, expected: SCHEMA_VERSION });
        }
        if self.states.len() != self.num_frames {
            return bad(format!("{} states for {} frames", self.states.len(), self.num_frames));
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        if self.turns.windows(2).any(|w| w[0].frame > w[1].frame) {
            return bad("turns are not sorted by frame".into());
        }
        if let Some(t) = self.turns.iter().find(|t| t.frame >= self.num_frames) {
            return bad(format!("turn at frame {} past the stream end", t.frame));
        }
        if let Some(t) = self.turns.iter().find(|t| t.text.split_whitespace().next().is_none()) {
            return bad(format!("empty turn text at frame {}", t.frame));
        }
        Ok(())
    }

    pub fn activity_states(&self) -> Vec<Option<usize>> {
        self.states.iter().map(|&s| usize::try_from(s).ok()).collect()
    }

    pub fn frame_features(&self) -> Result<Vec<Vec<f32>>> {
        self.features.space().render(&self.activity_states(), self.features.seed)
    }

    pub fn assistant_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.kind == Role::Assistant)
    }

    /// Frames and turns in temporal order.
    pub fn events(&self) -> Vec<Event<'_>> {
        let mut out = Vec::with_capacity(self.num_frames + self.turns.len());
        let mut turns = self.turns.iter().peekable();
        for f in 0..self.num_frames {
            out.push(Event::Frame(f));
            while let Some(t) = turns.next_if(|t| t.frame == f) {
                out.push(match t.kind {
                    Role::User => Event::User(f, &t.text),
                    Role::Assistant => Event::Assistant(f, &t.text),
                });
            }
        }
        out
    }
}

pub fn write_jsonl(samples: &[StreamSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<StreamSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other.context(path.display().to_string()),
    })
}

/// Parses one sample per non-blank line. Errors carry 1-based line numbers.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<StreamSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(SCHEMA_VERSION) => {}
            Some(found) => return Err(Error::SchemaVersion { found, expected: SCHEMA_VERSION }),
            None => return Err(Error::Parse { line: line_no, message: "missing or non-integer `version`".into() }),
        }
        let sample: StreamSample =
            serde_json::from_value(value).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        sample.validate().map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        out.push(sample);
    }
    Ok(out)
}
