use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::grammar::{PER_FRAME_PROMPT, SYSTEM_PROMPT};
use crate::data::{Event, StreamSample};
use crate::error::{Error, Result};
use crate::model::vocab::{ASSISTANT, EOS, FRAME, USER};
use crate::model::Vocabulary;

/// Training scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Language modelling on responses plus the silence label on frames.
    Streaming,
    /// Language modelling on responses only.
    Interleaved,
    /// Every silent frame becomes a dialogue turn answered with a bare EOS.
    PerFrame,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Streaming, Scheme::PerFrame, Scheme::Interleaved];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Streaming => "streaming",
            Scheme::Interleaved => "interleaved",
            Scheme::PerFrame => "per_frame",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "streaming" => Ok(Scheme::Streaming),
            "interleaved" => Ok(Scheme::Interleaved),
            "per_frame" | "per-frame" => Ok(Scheme::PerFrame),
            other => Err(Error::Config(format!("unknown scheme `{other}` (streaming, interleaved, per_frame)"))),
        }
    }
}

/// Tokens of the per-frame baseline turn that follows a silent frame:
/// an empty answer, then the prompt for the next frame.
pub fn per_frame_template(vocab: &Vocabulary) -> Result<Vec<u32>> {
    let mut t = vec![ASSISTANT, EOS, USER];
    t.extend(vocab.encode(PER_FRAME_PROMPT)?);
    Ok(t)
}

/// Number of tokens [`per_frame_template`] adds per silent frame.
pub const PER_FRAME_TEMPLATE_LEN: usize = 10;

/// Unexpanded sequence element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqItem {
    Token(u32),
    /// Index of a frame of the source sample; expands to `p` positions.
    Frame(usize),
}

/// A sample laid out in temporal order with per-position flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    pub scheme: Scheme,
    pub tokens_per_frame: usize,
    pub items: Vec<SeqItem>,
    /// Token id per expanded position; frame slots hold [`FRAME`].
    pub tokens: Vec<u32>,
    /// True on the last slot of every frame.
    pub frame_last: Vec<bool>,
    /// True where the position holds an assistant response token.
    pub response: Vec<bool>,
}

impl AssembledSequence {
    fn new(scheme: Scheme, tokens_per_frame: usize) -> Self {
        Self { scheme, tokens_per_frame, items: Vec::new(), tokens: Vec::new(), frame_last: Vec::new(), response: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push_token(&mut self, id: u32, response: bool) {
        self.items.push(SeqItem::Token(id));
        self.tokens.push(id);
        self.frame_last.push(false);
        self.response.push(response);
    }

    pub fn push_frame(&mut self, index: usize) {
        self.items.push(SeqItem::Frame(index));
        for s in 0..self.tokens_per_frame {
            self.tokens.push(FRAME);
            self.frame_last.push(s + 1 == self.tokens_per_frame);
            self.response.push(false);
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frame_last.iter().filter(|&&f| f).count()
    }
}

/// Lays out `sample` for `scheme`: system prompt, then each frame followed by
/// its user turn and assistant turn. Assistant turns are
/// `ASSISTANT words EOS`, all three parts flagged as response. The per-frame
/// scheme closes every frame without an assistant turn with the fixed
/// [`per_frame_template`].
pub fn assemble(
    sample: &StreamSample,
    vocab: &Vocabulary,
    tokens_per_frame: usize,
    scheme: Scheme,
    max_context: usize,
) -> Result<AssembledSequence> {
    if tokens_per_frame == 0 {
        return Err(Error::Config("tokens_per_frame must be positive".into()));
    }
    let mut seq = AssembledSequence::new(scheme, tokens_per_frame);
    for id in vocab.encode(SYSTEM_PROMPT)? {
        seq.push_token(id, false);
    }
    let template = if scheme == Scheme::PerFrame { per_frame_template(vocab)? } else { Vec::new() };
    let events = sample.events();
    for (i, e) in events.iter().enumerate() {
        match *e {
            Event::Frame(f) => seq.push_frame(f),
            Event::User(_, text) => {
                seq.push_token(USER, false);
                for id in vocab.encode(text)? {
                    seq.push_token(id, false);
                }
            }
            Event::Assistant(_, text) => {
                seq.push_token(ASSISTANT, true);
                for id in vocab.encode(text)? {
                    seq.push_token(id, true);
                }
                seq.push_token(EOS, true);
            }
        }
        let frame_done = matches!(events.get(i + 1), None | Some(Event::Frame(_)));
        if scheme == Scheme::PerFrame && frame_done && !matches!(e, Event::Assistant(..)) {
            for (k, &id) in template.iter().enumerate() {
                seq.push_token(id, k < 2);
            }
        }
    }
    if seq.len() > max_context {
        return Err(Error::ContextOverflow { needed: seq.len(), max: max_context });
    }
    Ok(seq)
}

/// Per-position loss indicators. `l[j]`: position `j` predicts a response
/// token. `f[j]`: position `j` is a frame's last slot and the next position
/// is not a response token, so it is supervised toward silence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    pub l: Vec<bool>,
    pub f: Vec<bool>,
}

impl LossMask {
    /// Positions carrying at least one loss term.
    pub fn active(&self) -> usize {
        self.l.iter().zip(&self.f).filter(|(l, f)| **l || **f).count()
    }
}

pub fn compute_masks(seq: &AssembledSequence) -> LossMask {
    let n = seq.len();
    let l: Vec<bool> = (0..n).map(|j| j + 1 < n && seq.response[j + 1]).collect();
    let f = match seq.scheme {
        Scheme::Streaming => (0..n).map(|j| seq.frame_last[j] && !l[j]).collect(),
        Scheme::Interleaved | Scheme::PerFrame => vec![false; n],
    };
    LossMask { l, f }
}

/// Next-token targets; the last position has none.
pub fn next_tokens(seq: &AssembledSequence) -> Vec<Option<u32>> {
    (0..seq.len()).map(|j| seq.tokens.get(j + 1).copied()).collect()
}
