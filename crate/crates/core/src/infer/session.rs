use std::collections::VecDeque;

use super::decide::{check_theta, decide_eos, greedy, softmax, Decision};
use crate::data::grammar::SYSTEM_PROMPT;
use crate::error::{Error, Result};
use crate::model::vocab::{ASSISTANT, EOS, USER};
use crate::model::{StreamItem, StreamModel, Vocabulary};
use crate::train::{per_frame_template, Scheme, SeqItem};

/// Result of feeding one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub decision: Decision,
    /// User tokens appended after the frame, `USER` marker included.
    pub query: Vec<u32>,
    /// Tokens the model produced (or, for the per-frame scheme, was forced
    /// through) after the frame and query.
    pub response: Vec<u32>,
    /// Positions appended to the cache by this step.
    pub positions: usize,
}

#[derive(Debug, Clone)]
struct PendingQuery {
    frame: usize,
    tokens: Vec<u32>,
}

/// Incremental decoding state over one stream. The cache only ever grows.
pub struct Session<'m, M: StreamModel> {
    model: &'m M,
    cache: M::Cache,
    scheme: Scheme,
    theta: f64,
    max_response_tokens: usize,
    stream_eos: u32,
    template: Vec<u32>,
    pending: VecDeque<PendingQuery>,
    realized: Vec<SeqItem>,
    last: Vec<f64>,
}

impl<M: StreamModel> Clone for Session<'_, M> {
    fn clone(&self) -> Self {
        Self {
            model: self.model,
            cache: self.cache.clone(),
            scheme: self.scheme,
            theta: self.theta,
            max_response_tokens: self.max_response_tokens,
            stream_eos: self.stream_eos,
            template: self.template.clone(),
            pending: self.pending.clone(),
            realized: self.realized.clone(),
            last: self.last.clone(),
        }
    }
}

impl<'m, M: StreamModel> Session<'m, M> {
    /// Opens a session and feeds the system prompt.
    pub fn new(model: &'m M, vocab: &Vocabulary, scheme: Scheme, theta: f64, max_response_tokens: usize) -> Result<Self> {
        check_theta(theta)?;
        if max_response_tokens == 0 {
            return Err(Error::Config("max_response_tokens must be positive".into()));
        }
        if model.vocab_size() != vocab.len() {
            return Err(Error::Config(format!(
                "model has {} output ids, vocabulary has {}",
                model.vocab_size(),
                vocab.len()
            )));
        }
        let mut s = Self {
            model,
            cache: model.new_cache(),
            scheme,
            theta,
            max_response_tokens,
            stream_eos: vocab.stream_eos(),
            template: if scheme == Scheme::PerFrame { per_frame_template(vocab)? } else { Vec::new() },
            pending: VecDeque::new(),
            realized: Vec::new(),
            last: Vec::new(),
        };
        s.push_tokens(&vocab.encode(SYSTEM_PROMPT)?)?;
        Ok(s)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn cache_len(&self) -> usize {
        self.model.cache_len(&self.cache)
    }

    /// Everything appended so far, frames by index.
    pub fn realized(&self) -> &[SeqItem] {
        &self.realized
    }

    /// Logits at the newest position.
    pub fn last_logits(&self) -> &[f64] {
        &self.last
    }

    /// Silence decision on the newest position against `eos`.
    pub fn decide(&self, eos: u32) -> Result<Decision> {
        decide_eos(&softmax(&self.last), eos, self.theta)
    }

    /// Id the silence decision is taken against for this scheme.
    pub fn silence_token(&self) -> u32 {
        match self.scheme {
            Scheme::PerFrame => EOS,
            Scheme::Streaming | Scheme::Interleaved => self.stream_eos,
        }
    }

    pub fn push_tokens(&mut self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let items: Vec<StreamItem<'_>> = tokens.iter().map(|&t| StreamItem::Token(t)).collect();
        self.feed(&items)?;
        self.realized.extend(tokens.iter().map(|&t| SeqItem::Token(t)));
        Ok(())
    }

    pub fn push_frame(&mut self, index: usize, features: &[f32]) -> Result<()> {
        self.feed(&[StreamItem::Frame(features)])?;
        self.realized.push(SeqItem::Frame(index));
        Ok(())
    }

    fn feed(&mut self, items: &[StreamItem<'_>]) -> Result<()> {
        let rows = self.model.step(&mut self.cache, items)?;
        let v = self.model.vocab_size();
        self.last = rows[rows.len() - v..].to_vec();
        Ok(())
    }

    /// Queues user tokens (without the `USER` marker) to be appended right
    /// after frame `frame`, or after the first later frame that is fed.
    pub fn inject_query_at_frame(&mut self, tokens: Vec<u32>, frame: usize) {
        let at = self.pending.iter().position(|q| q.frame > frame).unwrap_or(self.pending.len());
        self.pending.insert(at, PendingQuery { frame, tokens });
    }

    /// Queues `text` for the first frame boundary at or after `at_time`
    /// seconds, frame `i` arriving at `i / fps`.
    pub fn inject_query(&mut self, vocab: &Vocabulary, text: &str, at_time: f64, fps: f64) -> Result<()> {
        if !at_time.is_finite() || !(fps > 0.0) {
            return Err(Error::Config(format!("bad query time {at_time} at {fps} fps")));
        }
        let tokens = vocab.encode(text)?;
        self.inject_query_at_frame(tokens, frame_at_or_after(at_time, fps));
        Ok(())
    }

    pub fn pending_queries(&self) -> usize {
        self.pending.len()
    }

    /// Positions one step may need beyond the current cache.
    fn worst_case_growth(&self, query: usize) -> usize {
        let p = self.model.tokens_per_frame();
        let tail = match self.scheme {
            Scheme::PerFrame => 1 + self.max_response_tokens.max(self.template.len().saturating_sub(1)),
            Scheme::Streaming | Scheme::Interleaved => self.max_response_tokens,
        };
        p + query + tail
    }

    /// Feeds frame `index`, any query due at it, then decides and, when
    /// speaking, decodes greedily until `EOS` or the token budget.
    pub fn stream_step(&mut self, index: usize, features: &[f32]) -> Result<StepOutcome> {
        let mut query = Vec::new();
        while self.pending.front().is_some_and(|q| q.frame <= index) {
            let q = self.pending.pop_front().expect("checked");
            query.push(USER);
            query.extend(q.tokens);
        }
        let needed = self.cache_len() + self.worst_case_growth(query.len());
        if needed > self.model.max_context() {
            return Err(Error::ContextOverflow { needed, max: self.model.max_context() });
        }
        let start = self.cache_len();
        self.push_frame(index, features)?;
        self.push_tokens(&query)?;
        let mut response = Vec::new();
        if self.scheme == Scheme::PerFrame {
            self.push_tokens(&[ASSISTANT])?;
            response.push(ASSISTANT);
        }
        let decision = self.decide(self.silence_token())?;
        match decision {
            Decision::Silent if self.scheme == Scheme::PerFrame => {
                let rest = self.template[1..].to_vec();
                self.push_tokens(&rest)?;
                response.extend(rest);
            }
            Decision::Silent => {}
            Decision::Speak(first) => response.extend(self.generate(first)?),
        }
        Ok(StepOutcome { decision, query, response, positions: self.cache_len() - start })
    }

    /// Appends `first`, then greedy tokens until `EOS` or the budget.
    pub fn generate(&mut self, first: u32) -> Result<Vec<u32>> {
        let mut out = vec![first];
        self.push_tokens(&[first])?;
        while *out.last().expect("non-empty") != EOS && out.len() < self.max_response_tokens {
            let next = greedy(&self.last);
            self.push_tokens(&[next])?;
            out.push(next);
        }
        Ok(out)
    }
}

/// First frame index whose arrival time `i / fps` is at or after `t`.
pub fn frame_at_or_after(t: f64, fps: f64) -> usize {
    let x = t * fps;
    if x <= 0.0 {
        return 0;
    }
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}
