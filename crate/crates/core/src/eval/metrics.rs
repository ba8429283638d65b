use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Role, StreamSample};
use crate::error::{Error, Result};
use crate::infer::{argmax_excluding, check_theta, decide_eos, greedy, never_generated, softmax, Decision};
use crate::model::vocab::{ASSISTANT, EOS, USER};
use crate::model::{StreamItem, StreamModel, Vocabulary};
use crate::tensor::kernels::log_softmax_at;
use crate::train::{assemble, per_frame_template, AssembledSequence, Scheme, SeqItem};

/// Scores of one assistant turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    /// Gold frame of the turn.
    pub frame: usize,
    /// First frame the model chose to speak at, clamped to `window_end`.
    pub predicted_frame: usize,
    /// Next gold turn's frame, or the frame count.
    pub window_end: usize,
    pub lg_prefix: usize,
    pub lg_len: usize,
    pub fluency_prefix: usize,
    pub fluency_slots: usize,
}

impl TurnScore {
    pub fn lg_match(&self) -> f64 {
        self.lg_prefix as f64 / self.lg_len as f64
    }

    pub fn fluency(&self) -> f64 {
        self.fluency_prefix as f64 / self.fluency_slots as f64
    }

    pub fn frame_error(&self) -> usize {
        self.predicted_frame.abs_diff(self.frame)
    }
}

/// Metrics of one sample at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub fps: f64,
    pub theta: f64,
    /// Summed negative log-likelihood of response words and turn ends.
    pub nll: f64,
    pub lm_tokens: usize,
    pub turns: Vec<TurnScore>,
    /// Teacher-forced decision at every frame: true for silent.
    pub silent: Vec<bool>,
}

fn undefined(what: &str, id: &str) -> Error {
    Error::UndefinedMetric(format!("{what} of sample `{id}`: no assistant turns"))
}

impl SampleEval {
    pub fn lm_ppl(&self) -> Result<f64> {
        if self.lm_tokens == 0 {
            return Err(Error::UndefinedMetric(format!("perplexity of sample `{}`: no response tokens", self.id)));
        }
        Ok((self.nll / self.lm_tokens as f64).exp())
    }

    fn mean(&self, what: &str, f: impl Fn(&TurnScore) -> f64) -> Result<f64> {
        if self.turns.is_empty() {
            return Err(undefined(what, &self.id));
        }
        Ok(self.turns.iter().map(f).sum::<f64>() / self.turns.len() as f64)
    }

    pub fn lg_match(&self) -> Result<f64> {
        self.mean("LG-Match", TurnScore::lg_match)
    }

    /// Mean absolute timing error in seconds.
    pub fn time_diff(&self) -> Result<f64> {
        self.mean("TimeDiff", |t| t.frame_error() as f64 / self.fps)
    }

    pub fn fluency(&self) -> Result<f64> {
        self.mean("Fluency", TurnScore::fluency)
    }
}

/// Where decisions and gold responses sit in the teacher-forced layout.
struct Layout {
    /// Per frame, the position whose logits decide silence.
    decision: Vec<usize>,
    /// Per assistant turn: frame and the gold positions the model has to
    /// produce after deciding to speak.
    turns: Vec<(usize, Vec<usize>)>,
}

fn layout(seq: &AssembledSequence, turn_frames: &[usize]) -> Layout {
    let n = seq.len();
    let mut frame_last = Vec::new();
    for j in 0..n {
        if seq.frame_last[j] {
            frame_last.push(j);
        }
    }
    let p = seq.tokens_per_frame;
    let mut decision = Vec::with_capacity(frame_last.len());
    let mut turns = Vec::new();
    for (f, &fl) in frame_last.iter().enumerate() {
        let block_end = frame_last.get(f + 1).map_or(n, |&next| next + 1 - p);
        let first_response = (fl + 1..block_end).find(|&j| seq.response[j]);
        let d = match (seq.scheme, first_response) {
            (Scheme::PerFrame, Some(a)) => a,
            (_, Some(a)) => a - 1,
            (_, None) => block_end - 1,
        };
        decision.push(d);
        if turn_frames.contains(&f) {
            let start = first_response.expect("turn frames carry a response");
            let end = (start..block_end).find(|&j| !seq.response[j]).unwrap_or(block_end);
            let skip = usize::from(seq.scheme == Scheme::PerFrame);
            turns.push((f, (start + skip..end).collect()));
        }
    }
    Layout { decision, turns }
}

/// Runs the model through `seq` and returns logits for every position,
/// calling `at_cut(cache, rows)` after position `cut - 1` for each cut.
fn teacher_forced<M: StreamModel>(
    model: &M,
    seq: &AssembledSequence,
    features: &[Vec<f32>],
    cuts: &[usize],
    at_cut: &mut dyn FnMut(usize, &M::Cache, &[f64]) -> Result<()>,
) -> Result<Vec<f64>> {
    let p = seq.tokens_per_frame;
    let mut cache = model.new_cache();
    let mut rows = Vec::with_capacity(seq.len() * model.vocab_size());
    let mut pending: Vec<StreamItem<'_>> = Vec::new();
    let mut pos = 0;
    let mut cuts = cuts.iter().peekable();
    for item in &seq.items {
        let it = match *item {
            SeqItem::Token(t) => StreamItem::Token(t),
            SeqItem::Frame(f) => StreamItem::Frame(&features[f]),
        };
        pos += it.width(p);
        pending.push(it);
        if cuts.peek() == Some(&&pos) {
            rows.extend(model.step(&mut cache, &pending)?);
            pending.clear();
            while cuts.next_if(|&&c| c == pos).is_some() {}
            at_cut(pos, &cache, &rows)?;
        }
    }
    rows.extend(model.step(&mut cache, &pending)?);
    Ok(rows)
}

struct Scan<'a> {
    scheme: Scheme,
    silence: u32,
    template_tail: Vec<u32>,
    features: &'a [Vec<f32>],
    queries: BTreeMap<usize, Vec<u32>>,
}

impl Scan<'_> {
    /// From a cache that just stayed silent at some frame, keeps feeding
    /// frames `from..end` without responses. Returns the first frame the
    /// model speaks at, or `end`.
    fn first_speak<M: StreamModel>(&self, model: &M, cache: &M::Cache, from: usize, end: usize, theta: f64) -> Result<usize> {
        let mut cache = cache.clone();
        let v = model.vocab_size();
        for f in from..end {
            let mut items = Vec::new();
            if self.scheme == Scheme::PerFrame {
                items.extend(self.template_tail.iter().map(|&t| StreamItem::Token(t)));
            }
            items.push(StreamItem::Frame(&self.features[f]));
            if let Some(q) = self.queries.get(&f) {
                items.push(StreamItem::Token(USER));
                items.extend(q.iter().map(|&t| StreamItem::Token(t)));
            }
            if self.scheme == Scheme::PerFrame {
                items.push(StreamItem::Token(ASSISTANT));
            }
            let rows = model.step(&mut cache, &items)?;
            if let Decision::Speak(_) = decide_eos(&softmax(&rows[rows.len() - v..]), self.silence, theta)? {
                return Ok(f);
            }
        }
        Ok(end)
    }
}

/// Evaluates `sample` under `scheme`'s layout at every threshold in
/// `thetas`, sharing one teacher-forced pass.
pub fn evaluate_sample_thetas<M: StreamModel>(
    model: &M,
    vocab: &Vocabulary,
    sample: &StreamSample,
    scheme: Scheme,
    thetas: &[f64],
) -> Result<Vec<SampleEval>> {
    for &t in thetas {
        check_theta(t)?;
    }
    let turn_frames: Vec<usize> = sample.assistant_turns().map(|t| t.frame).collect();
    if turn_frames.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSample(format!("{}: assistant turns must sit on distinct, increasing frames", sample.id)));
    }
    let seq = assemble(sample, vocab, model.tokens_per_frame(), scheme, model.max_context())?;
    let features = sample.frame_features()?;
    let lay = layout(&seq, &turn_frames);
    let silence = match scheme {
        Scheme::PerFrame => EOS,
        Scheme::Streaming | Scheme::Interleaved => vocab.stream_eos(),
    };
    let mut queries = BTreeMap::new();
    for t in sample.turns.iter().filter(|t| t.kind == Role::User) {
        queries.entry(t.frame).or_insert_with(Vec::new).extend(vocab.encode(&t.text)?);
    }
    let template_tail = match scheme {
        Scheme::PerFrame => per_frame_template(vocab)?[1..].to_vec(),
        Scheme::Streaming | Scheme::Interleaved => Vec::new(),
    };
    let scan = Scan { scheme, silence, template_tail, features: &features, queries };
    let v = model.vocab_size();
    let n_frames = lay.decision.len();
    let window_end = |k: usize| lay.turns.get(k + 1).map_or(n_frames, |t| t.0);

    // first Speak at or after each turn's frame, per theta, for turns the
    // model let pass in silence
    let mut late: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let cuts: Vec<usize> = lay.turns.iter().map(|(f, _)| lay.decision[*f] + 1).collect();
    let rows = teacher_forced(model, &seq, &features, &cuts, &mut |pos, cache, rows| {
        for (k, (f, _)) in lay.turns.iter().enumerate() {
            if lay.decision[*f] + 1 != pos {
                continue;
            }
            let probs = softmax(&rows[(pos - 1) * v..pos * v]);
            for (ti, &theta) in thetas.iter().enumerate() {
                if decide_eos(&probs, silence, theta)? == Decision::Silent {
                    late.insert((k, ti), scan.first_speak(model, cache, f + 1, window_end(k), theta)?);
                }
            }
        }
        Ok(())
    })?;
    let row = |j: usize| &rows[j * v..(j + 1) * v];
    let probs: Vec<Vec<f64>> = lay.decision.iter().map(|&d| softmax(row(d))).collect();

    let (mut nll, mut lm_tokens) = (0.0, 0);
    let mut lg = Vec::with_capacity(lay.turns.len());
    for (f, gold) in &lay.turns {
        for &j in gold {
            if seq.tokens[j] != ASSISTANT {
                nll -= log_softmax_at(row(j - 1), seq.tokens[j] as usize);
                lm_tokens += 1;
            }
        }
        let first = argmax_excluding(&probs[*f], |id| id == silence || never_generated(id));
        let mut prefix = usize::from(first == seq.tokens[gold[0]]);
        if prefix == 1 {
            prefix += gold[1..].iter().take_while(|&&j| greedy(row(j - 1)) == seq.tokens[j]).count();
        }
        lg.push(prefix);
    }

    let mut out = Vec::with_capacity(thetas.len());
    for (ti, &theta) in thetas.iter().enumerate() {
        let silent = probs
            .iter()
            .map(|p| decide_eos(p, silence, theta).map(|d| d == Decision::Silent))
            .collect::<Result<Vec<bool>>>()?;
        let mut turns = Vec::with_capacity(lay.turns.len());
        for (k, (f, gold)) in lay.turns.iter().enumerate() {
            let start = if k == 0 { 0 } else { lay.turns[k - 1].0 + 1 };
            let end = window_end(k);
            let early = (start..*f).find(|&g| !silent[g]);
            let predicted = early.unwrap_or_else(|| if silent[*f] { late[&(k, ti)] } else { *f });
            let silent_ok = (start..*f).take_while(|&g| silent[g]).count();
            let mut fluency_prefix = silent_ok;
            if silent_ok == *f - start && !silent[*f] && lg[k] > 0 {
                fluency_prefix += lg[k];
            }
            turns.push(TurnScore {
                frame: *f,
                predicted_frame: predicted,
                window_end: end,
                lg_prefix: lg[k],
                lg_len: gold.len(),
                fluency_prefix,
                fluency_slots: (*f - start) + gold.len(),
            });
        }
        out.push(SampleEval { id: sample.id.clone(), fps: sample.fps, theta, nll, lm_tokens, turns, silent });
    }
    Ok(out)
}

pub fn evaluate_sample<M: StreamModel>(
    model: &M,
    vocab: &Vocabulary,
    sample: &StreamSample,
    scheme: Scheme,
    theta: f64,
) -> Result<SampleEval> {
    Ok(evaluate_sample_thetas(model, vocab, sample, scheme, &[theta])?.remove(0))
}

/// exp(mean NLL) over response words and turn ends at their gold positions.
pub fn lm_ppl<M: StreamModel>(model: &M, vocab: &Vocabulary, sample: &StreamSample, scheme: Scheme) -> Result<f64> {
    evaluate_sample(model, vocab, sample, scheme, 0.5)?.lm_ppl()
}

/// Mean over turns of the correct greedy prefix length over the gold length.
pub fn lg_match<M: StreamModel>(model: &M, vocab: &Vocabulary, sample: &StreamSample, scheme: Scheme) -> Result<f64> {
    evaluate_sample(model, vocab, sample, scheme, 0.5)?.lg_match()
}

/// Mean over turns of `|predicted - gold| / fps` seconds.
pub fn time_diff<M: StreamModel>(model: &M, vocab: &Vocabulary, sample: &StreamSample, scheme: Scheme, theta: f64) -> Result<f64> {
    evaluate_sample(model, vocab, sample, scheme, theta)?.time_diff()
}

/// Mean over turns of the correct slot prefix over the slot count.
pub fn fluency<M: StreamModel>(model: &M, vocab: &Vocabulary, sample: &StreamSample, scheme: Scheme, theta: f64) -> Result<f64> {
    evaluate_sample(model, vocab, sample, scheme, theta)?.fluency()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub fps: f64,
    pub skips: usize,
    pub peak_cache_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: Scheme,
    pub theta: f64,
    pub lm_ppl: f64,
    pub lg_match: f64,
    pub time_diff_seconds: f64,
    pub fluency: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<Throughput>,
    pub n_samples: usize,
    pub n_turns: usize,
    pub lm_tokens: usize,
}

impl MetricsReport {
    /// Pools per-sample results: perplexity over all scored tokens, the
    /// other metrics as means over all turns.
    pub fn aggregate(scheme: Scheme, theta: f64, evals: &[SampleEval]) -> Result<Self> {
        let lm_tokens: usize = evals.iter().map(|e| e.lm_tokens).sum();
        let n_turns: usize = evals.iter().map(|e| e.turns.len()).sum();
        if lm_tokens == 0 || n_turns == 0 {
            return Err(Error::UndefinedMetric("evaluation set has no assistant turns".into()));
        }
        let nll: f64 = evals.iter().map(|e| e.nll).sum();
        let turn_mean = |f: &dyn Fn(&SampleEval, &TurnScore) -> f64| {
            evals.iter().flat_map(|e| e.turns.iter().map(move |t| f(e, t))).sum::<f64>() / n_turns as f64
        };
        Ok(Self {
            scheme,
            theta,
            lm_ppl: (nll / lm_tokens as f64).exp(),
            lg_match: turn_mean(&|_, t| t.lg_match()),
            time_diff_seconds: turn_mean(&|e, t| t.frame_error() as f64 / e.fps),
            fluency: turn_mean(&|_, t| t.fluency()),
            throughput: None,
            n_samples: evals.len(),
            n_turns,
            lm_tokens,
        })
    }
}

/// Evaluates every sample at every threshold. Samples are spread over
/// worker threads; results keep sample order. Returns one report per
/// threshold and the per-sample evaluations, indexed `[theta][sample]`.
pub fn evaluate_thetas<M: StreamModel + Sync>(
    model: &M,
    vocab: &Vocabulary,
    samples: &[StreamSample],
    scheme: Scheme,
    thetas: &[f64],
) -> Result<(Vec<MetricsReport>, Vec<Vec<SampleEval>>)> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len()).max(1);
    let chunk = samples.len().div_ceil(workers).max(1);
    let per_sample: Vec<Vec<SampleEval>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|x| evaluate_sample_thetas(model, vocab, x, scheme, thetas).map_err(|e| e.context(format!("sample `{}`", x.id))))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let mut by_theta = vec![Vec::with_capacity(samples.len()); thetas.len()];
    for evals in per_sample {
        for (ti, e) in evals.into_iter().enumerate() {
            by_theta[ti].push(e);
        }
    }
    let reports = thetas
        .iter()
        .zip(&by_theta)
        .map(|(&t, evals)| MetricsReport::aggregate(scheme, t, evals))
        .collect::<Result<Vec<_>>>()?;
    Ok((reports, by_theta))
}

pub fn evaluate<M: StreamModel + Sync>(
    model: &M,
    vocab: &Vocabulary,
    samples: &[StreamSample],
    scheme: Scheme,
    theta: f64,
) -> Result<MetricsReport> {
    Ok(evaluate_thetas(model, vocab, samples, scheme, &[theta])?.0.remove(0))
}

/// Thresholds `from, from + step, ..` up to `to` inclusive (within 1e-9).
pub fn theta_range(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || to < from {
        return Err(Error::Config(format!("bad threshold sweep {from}:{to}:{step}")));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    let out: Vec<f64> = (0..=n).map(|i| ((from + i as f64 * step) * 1e9).round() / 1e9).collect();
    for &t in &out {
        check_theta(t)?;
    }
    Ok(out)
}
