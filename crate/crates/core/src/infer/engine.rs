use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::decide::{check_theta, Decision};
use super::session::{Session, StepOutcome};
use crate::data::{Role, StreamSample};
use crate::error::{Error, Result};
use crate::model::{StreamModel, Vocabulary};
use crate::train::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipPolicy {
    /// A full queue discards its oldest frame to admit the new one.
    #[default]
    DropOldest,
    /// A full queue stalls the encoder until the decoder frees a slot.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Simulated,
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub theta: f64,
    pub max_response_tokens: usize,
    /// Input frame rate; the sample's own rate when unset.
    pub fps: Option<f64>,
    pub encode_ms_per_frame: f64,
    /// Charged for every position the decoder feeds through the model.
    pub decode_ms_per_token: f64,
    pub queue_capacity: usize,
    pub skip_policy: SkipPolicy,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            theta: 0.6,
            max_response_tokens: 16,
            fps: None,
            encode_ms_per_frame: 5.0,
            decode_ms_per_token: 30.0,
            queue_capacity: 8,
            skip_policy: SkipPolicy::DropOldest,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        check_theta(self.theta)?;
        if self.max_response_tokens == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("max_response_tokens and queue_capacity must be positive".into()));
        }
        for (name, v) in [("encode_ms_per_frame", self.encode_ms_per_frame), ("decode_ms_per_token", self.decode_ms_per_token)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if let Some(fps) = self.fps {
            if !(fps > 0.0 && fps.is_finite()) {
                return Err(Error::Config(format!("fps must be positive, got {fps}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameDecision {
    Silent,
    Spoke,
    /// Dropped from a full queue; never reached the model.
    Skipped,
}

/// One line of the transcript. Times are seconds from stream start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub arrival_time: f64,
    pub decision: FrameDecision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_text: Option<String>,
    /// Decoder picks the frame up.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_time: Option<f64>,
    /// Decoder is done with the frame and anything said after it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_start_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_end_time: Option<f64>,
    /// Cache size after the frame.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_tokens: Option<usize>,
}

impl FrameRecord {
    fn skipped(frame_index: usize, arrival_time: f64) -> Self {
        Self {
            frame_index,
            arrival_time,
            decision: FrameDecision::Skipped,
            query_text: None,
            response_text: None,
            start_time: None,
            end_time: None,
            response_start_time: None,
            response_end_time: None,
            cache_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub sample_id: String,
    pub scheme: Scheme,
    pub mode: ClockMode,
    pub theta: f64,
    pub input_fps: f64,
    pub frames: usize,
    pub processed: usize,
    pub spoken: usize,
    pub frames_skipped: usize,
    pub peak_queue_depth: usize,
    pub peak_cache_tokens: usize,
    pub processed_fps: f64,
    /// Time the decoder finished the last frame.
    pub finish_time: f64,
    /// Largest delay between a frame's arrival and the decoder finishing it.
    pub max_lag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTranscript {
    pub records: Vec<FrameRecord>,
    pub summary: StreamSummary,
}

impl StreamTranscript {
    pub fn decisions(&self) -> Vec<FrameDecision> {
        self.records.iter().map(|r| r.decision).collect()
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes `transcript.jsonl` and `summary.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tp = dir.join("transcript.jsonl");
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).map_err(|e| Error::io(&tp, e))?;
        std::fs::write(&tp, buf).map_err(|e| Error::io(&tp, e))?;
        let sp = dir.join("summary.json");
        let json = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        std::fs::write(&sp, json + "\n").map_err(|e| Error::io(&sp, e))
    }
}

/// Word text of a response, falling back to the special-token names so a
/// spoken record is never blank.
fn response_text(vocab: &Vocabulary, ids: &[u32]) -> String {
    let words = vocab.decode(ids);
    if !words.is_empty() {
        return words;
    }
    ids.iter().filter_map(|&id| vocab.token(id)).collect::<Vec<_>>().join(" ")
}

/// Decoder-side bookkeeping shared by both clocks.
struct Decoder<'a, 'm, M: StreamModel> {
    session: Session<'m, M>,
    vocab: &'a Vocabulary,
    features: &'a [Vec<f32>],
    seconds_per_position: f64,
}

impl<M: StreamModel> Decoder<'_, '_, M> {
    /// Runs frame `k` starting at `start`; returns its record and the time
    /// the decoder is free again.
    fn process(&mut self, k: usize, arrival: f64, start: f64) -> Result<(FrameRecord, f64)> {
        let StepOutcome { decision, query, response, positions } = self.session.stream_step(k, &self.features[k])?;
        let c = self.seconds_per_position;
        let end = start + c * positions as f64;
        let spoke = matches!(decision, Decision::Speak(_));
        let lead = positions - if spoke { response.len() } else { positions };
        let (response_text, rs, re) = if spoke {
            let before = start + c * lead as f64;
            (Some(response_text(self.vocab, &response)), Some(before), Some(end))
        } else {
            (None, None, None)
        };
        let record = FrameRecord {
            frame_index: k,
            arrival_time: arrival,
            decision: if spoke { FrameDecision::Spoke } else { FrameDecision::Silent },
            query_text: (!query.is_empty()).then(|| self.vocab.decode(&query)),
            response_text,
            start_time: Some(start),
            end_time: Some(end),
            response_start_time: rs,
            response_end_time: re,
            cache_tokens: Some(self.session.cache_len()),
        };
        Ok((record, end))
    }
}

fn open<'a, 'm, M: StreamModel>(
    model: &'m M,
    vocab: &'a Vocabulary,
    sample: &StreamSample,
    features: &'a [Vec<f32>],
    scheme: Scheme,
    cfg: &InferenceConfig,
) -> Result<(Decoder<'a, 'm, M>, f64)> {
    cfg.validate()?;
    let fps = cfg.fps.unwrap_or(sample.fps);
    if !(fps > 0.0) {
        return Err(Error::Config(format!("stream fps must be positive, got {fps}")));
    }
    let mut session = Session::new(model, vocab, scheme, cfg.theta, cfg.max_response_tokens)?;
    for t in sample.turns.iter().filter(|t| t.kind == Role::User) {
        if t.frame >= features.len() {
            return Err(Error::InvalidSample(format!("query at frame {} outside the stream", t.frame)));
        }
        session.inject_query_at_frame(vocab.encode(&t.text)?, t.frame);
    }
    let seconds_per_position = cfg.decode_ms_per_token / 1000.0;
    Ok((Decoder { session, vocab, features, seconds_per_position }, fps))
}

fn summarize<M: StreamModel>(
    sample: &StreamSample,
    dec: &Decoder<'_, '_, M>,
    records: Vec<FrameRecord>,
    mode: ClockMode,
    fps: f64,
    peak_queue_depth: usize,
    theta: f64,
) -> StreamTranscript {
    let n = records.len();
    let processed = records.iter().filter(|r| r.decision != FrameDecision::Skipped).count();
    let spoken = records.iter().filter(|r| r.decision == FrameDecision::Spoke).count();
    let finish_time = records.iter().filter_map(|r| r.end_time).fold(0.0, f64::max);
    let max_lag = records.iter().filter_map(|r| r.end_time.map(|e| e - r.arrival_time)).fold(0.0, f64::max);
    let span = (n as f64 / fps).max(finish_time);
    let summary = StreamSummary {
        sample_id: sample.id.clone(),
        scheme: dec.session.scheme(),
        mode,
        theta,
        input_fps: fps,
        frames: n,
        processed,
        spoken,
        frames_skipped: n - processed,
        peak_queue_depth,
        peak_cache_tokens: dec.session.cache_len(),
        processed_fps: if span > 0.0 { processed as f64 / span } else { 0.0 },
        finish_time,
        max_lag,
    };
    StreamTranscript { records, summary }
}

/// Replays `sample` through `model` on a discrete-event clock. Frame `i`
/// arrives at `i / fps`; the encoder takes `encode_ms_per_frame` per frame
/// and feeds a bounded FIFO; the decoder drains it, paying
/// `decode_ms_per_token` per position fed. User turns of the sample are
/// injected at their frames. Fully deterministic.
pub fn run_stream<M: StreamModel>(
    model: &M,
    vocab: &Vocabulary,
    sample: &StreamSample,
    scheme: Scheme,
    cfg: &InferenceConfig,
) -> Result<StreamTranscript> {
    let features = sample.frame_features()?;
    let (mut dec, fps) = open(model, vocab, sample, &features, scheme, cfg)?;
    let n = features.len();
    let arrival = |i: usize| i as f64 / fps;
    let enc = cfg.encode_ms_per_frame / 1000.0;
    let mut records: Vec<Option<FrameRecord>> = vec![None; n];
    let mut queue: VecDeque<(usize, f64)> = VecDeque::new();
    let mut stalled: Option<(usize, f64)> = None;
    let (mut next_enc, mut enc_free, mut dec_free, mut peak) = (0usize, 0.0f64, 0.0f64, 0usize);
    loop {
        let enc_evt = (stalled.is_none() && next_enc < n).then(|| arrival(next_enc).max(enc_free) + enc);
        let dec_evt = queue.front().map(|&(_, ready)| dec_free.max(ready));
        let decode_next = match (enc_evt, dec_evt) {
            (None, None) => break,
            (Some(te), Some(td)) => td <= te,
            (Some(_), None) => false,
            (None, Some(_)) => true,
        };
        if decode_next {
            let td = dec_evt.expect("decoder event");
            let (k, _) = queue.pop_front().expect("non-empty");
            let (record, free) = dec.process(k, arrival(k), td)?;
            records[k] = Some(record);
            dec_free = free;
            if let Some((k2, done)) = stalled.take() {
                let at = done.max(td);
                queue.push_back((k2, at));
                enc_free = at;
                peak = peak.max(queue.len());
            }
        } else {
            let te = enc_evt.expect("encoder event");
            let k = next_enc;
            next_enc += 1;
            enc_free = te;
            if queue.len() < cfg.queue_capacity {
                queue.push_back((k, te));
            } else {
                match cfg.skip_policy {
                    SkipPolicy::DropOldest => {
                        let (old, _) = queue.pop_front().expect("full queue");
                        records[old] = Some(FrameRecord::skipped(old, arrival(old)));
                        queue.push_back((k, te));
                    }
                    SkipPolicy::Block => stalled = Some((k, te)),
                }
            }
            peak = peak.max(queue.len());
        }
    }
    let records = records.into_iter().map(|r| r.expect("every frame resolved")).collect();
    Ok(summarize(sample, &dec, records, ClockMode::Simulated, fps, peak, cfg.theta))
}

struct Fifo {
    queue: VecDeque<(usize, f64)>,
    dropped: Vec<usize>,
    closed: bool,
    peak: usize,
}

/// Same contract as [`run_stream`] on real threads: an encoder thread paces
/// arrivals and encode cost on the wall clock, the calling thread decodes
/// and sleeps for the decode cost. `time_scale` multiplies every simulated
/// duration (0 runs as fast as possible). Recorded times are wall-clock
/// seconds divided by the scale when it is positive.
pub fn run_stream_concurrent<M: StreamModel>(
    model: &M,
    vocab: &Vocabulary,
    sample: &StreamSample,
    scheme: Scheme,
    cfg: &InferenceConfig,
    time_scale: f64,
) -> Result<StreamTranscript> {
    if !(time_scale >= 0.0 && time_scale.is_finite()) {
        return Err(Error::Config(format!("time scale must be non-negative, got {time_scale}")));
    }
    let features = sample.frame_features()?;
    let (mut dec, fps) = open(model, vocab, sample, &features, scheme, cfg)?;
    let n = features.len();
    let arrival = |i: usize| i as f64 / fps;
    let scaled = |s: f64| Duration::from_secs_f64(s * time_scale);
    let fifo = Mutex::new(Fifo { queue: VecDeque::new(), dropped: Vec::new(), closed: false, peak: 0 });
    let cv = Condvar::new();
    let t0 = Instant::now();
    let now = move || {
        let s = t0.elapsed().as_secs_f64();
        if time_scale > 0.0 {
            s / time_scale
        } else {
            s
        }
    };
    let mut done: Vec<Option<FrameRecord>> = vec![None; n];
    let outcome = std::thread::scope(|scope| -> Result<()> {
        scope.spawn(|| {
            for k in 0..n {
                let due = t0 + scaled(arrival(k));
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
                std::thread::sleep(scaled(cfg.encode_ms_per_frame / 1000.0));
                let mut f = fifo.lock().expect("queue lock");
                if f.closed {
                    return;
                }
                if f.queue.len() >= cfg.queue_capacity {
                    match cfg.skip_policy {
                        SkipPolicy::DropOldest => {
                            let (old, _) = f.queue.pop_front().expect("full queue");
                            f.dropped.push(old);
                        }
                        SkipPolicy::Block => {
                            while f.queue.len() >= cfg.queue_capacity && !f.closed {
                                f = cv.wait(f).expect("queue lock");
                            }
                            if f.closed {
                                return;
                            }
                        }
                    }
                }
                f.queue.push_back((k, now()));
                f.peak = f.peak.max(f.queue.len());
                cv.notify_all();
            }
            fifo.lock().expect("queue lock").closed = true;
            cv.notify_all();
        });
        let result = (|| -> Result<()> {
            loop {
                let next = {
                    let mut f = fifo.lock().expect("queue lock");
                    loop {
                        if let Some(item) = f.queue.pop_front() {
                            cv.notify_all();
                            break Some(item);
                        }
                        if f.closed {
                            break None;
                        }
                        f = cv.wait(f).expect("queue lock");
                    }
                };
                let Some((k, _)) = next else { return Ok(()) };
                let start = now();
                let (record, free) = dec.process(k, arrival(k), start)?;
                if let Some(wait) = scaled(free - start).checked_sub(scaled(now() - start)) {
                    std::thread::sleep(wait);
                }
                let end = now().max(free);
                done[k] = Some(FrameRecord { end_time: Some(end), response_end_time: record.response_end_time.map(|_| end), ..record });
            }
        })();
        if result.is_err() {
            fifo.lock().expect("queue lock").closed = true;
            cv.notify_all();
        }
        result
    });
    outcome?;
    let f = fifo.into_inner().expect("queue lock");
    for &k in &f.dropped {
        done[k] = Some(FrameRecord::skipped(k, arrival(k)));
    }
    let records = done.into_iter().map(|r| r.expect("every frame resolved")).collect();
    Ok(summarize(sample, &dec, records, ClockMode::Concurrent, fps, f.peak, cfg.theta))
}
