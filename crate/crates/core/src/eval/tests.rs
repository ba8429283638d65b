use proptest::prelude::*;

use super::*;
use crate::data::{derive_seed, grammar, Event, FeatureSpec, Role, Source, StreamSample, Turn};
use crate::infer::{argmax_excluding, greedy, never_generated, softmax, Decision, Session};
use crate::model::vocab::{ASSISTANT, EOS, FRAME, STREAM_EOS, USER};
use crate::model::{peaked, ScriptedModel, StreamModel, Vocabulary};
use crate::train::{assemble, per_frame_template, Scheme};

fn sample(num_frames: usize, turns: Vec<Turn>) -> StreamSample {
    StreamSample {
        version: 1,
        id: "fx".into(),
        fps: 2.0,
        num_frames,
        source: Source::Dialogue,
        states: vec![-1; num_frames],
        features: FeatureSpec { seed: 1, appearance_seed: 2, noise_std: 0.2, onset_cue: 0.0, dim: 3, num_activities: 1 },
        turns,
    }
}

fn said(frame: usize, text: &str) -> Turn {
    Turn { kind: Role::Assistant, frame, text: text.into() }
}

fn asked(frame: usize, text: &str) -> Turn {
    Turn { kind: Role::User, frame, text: text.into() }
}

/// Sixteen ids: six specials and ten words.
fn small_vocab() -> Vocabulary {
    Vocabulary::new(["you", "are", "a", "helpful", "video", "assistant", "now", "cut", "stir", "done"])
}

/// Predicts the gold continuation of `seq` exactly, except that positions
/// listed in `wrong` predict `you` instead; frame-final positions not
/// followed by a response predict the silence id.
fn follower(v: &Vocabulary, s: &StreamSample, scheme: Scheme, wrong: Vec<usize>) -> ScriptedModel {
    let seq = assemble(s, v, 1, scheme, 10_000).unwrap();
    let n = v.len();
    let you = v.id("you").unwrap();
    let silence = if scheme == Scheme::PerFrame { EOS } else { STREAM_EOS };
    ScriptedModel::new(n, 1, 10_000, move |h| {
        let j = h.len() - 1;
        let sure = |id: u32| {
            let mut l = vec![-30.0; n];
            l[id as usize] = 0.0;
            l
        };
        if wrong.contains(&j) {
            return sure(you);
        }
        match seq.tokens.get(j + 1) {
            Some(&t) if seq.response[j + 1] && t != ASSISTANT || scheme != Scheme::PerFrame && t == ASSISTANT => sure(t),
            Some(&t) if scheme == Scheme::PerFrame && h[j] == ASSISTANT && t == EOS => sure(silence),
            Some(_) | None if h[j] == FRAME || scheme == Scheme::PerFrame => sure(silence),
            Some(&t) => sure(t),
            None => sure(silence),
        }
    })
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let v = small_vocab();
    let s = sample(4, vec![said(1, "now cut"), said(3, "done")]);
    let m = ScriptedModel::constant(16, 1, 1000, vec![0.0; 16]);
    for scheme in [Scheme::Streaming, Scheme::Interleaved] {
        assert!((lm_ppl(&m, &v, &s, scheme).unwrap() - 16.0).abs() < 1e-9);
    }
}

#[test]
fn perfect_model_scores_perfectly() {
    let v = grammar::vocabulary(false);
    let s = sample(8, vec![asked(0, "what comes next"), said(0, "now you"), said(3, "you are done"), said(7, "now you")]);
    for scheme in Scheme::ALL {
        let m = follower(&v, &s, scheme, vec![]);
        let e = evaluate_sample(&m, &v, &s, scheme, 0.5).unwrap();
        assert!((e.lm_ppl().unwrap() - 1.0).abs() < 1e-9, "{scheme}");
        assert_eq!(e.lg_match().unwrap(), 1.0, "{scheme}");
        assert_eq!(e.time_diff().unwrap(), 0.0, "{scheme}");
        assert_eq!(e.fluency().unwrap(), 1.0, "{scheme}");
    }
}

#[test]
fn three_token_perplexity_by_hand() {
    // gold response "now cut" then EOS: three scored tokens
    let v = small_vocab();
    let s = sample(2, vec![said(1, "now cut")]);
    let mut logits = vec![0.0; 16];
    logits[EOS as usize] = 1.0;
    logits[v.id("now").unwrap() as usize] = 2.0;
    logits[v.id("cut").unwrap() as usize] = -1.0;
    let m = ScriptedModel::constant(16, 1, 1000, logits);
    // log-sum-exp over 13 zeros, e, e^2 and e^-1
    let lse = (13.0 + 1f64.exp() + 2f64.exp() + (-1f64).exp()).ln();
    let expected = ((lse - 2.0 + lse + 1.0 + lse - 1.0) / 3.0).exp();
    assert!((lm_ppl(&m, &v, &s, Scheme::Streaming).unwrap() - expected).abs() < 1e-6);
}

#[test]
fn lg_match_definition_cases() {
    let v = grammar::vocabulary(false);
    // streaming gold: ASSISTANT now you are done EOS; predicted at positions
    let s = sample(3, vec![said(1, "now you are")]);
    let seq = assemble(&s, &v, 1, Scheme::Streaming, 1000).unwrap();
    let start = seq.tokens.iter().position(|&t| t == ASSISTANT).unwrap();
    let score = |wrong: Vec<usize>| lg_match(&follower(&v, &s, Scheme::Streaming, wrong), &v, &s, Scheme::Streaming).unwrap();
    assert_eq!(score(vec![]), 1.0);
    assert_eq!(score(vec![start - 1]), 0.0);
    // five gold tokens, the fourth is mispredicted
    assert!((score(vec![start + 2]) - 0.6).abs() < 1e-12);
}

#[test]
fn time_diff_two_frames_late() {
    let v = grammar::vocabulary(false);
    let s = sample(16, vec![said(10, "now you")]);
    let n = v.len();
    let m = ScriptedModel::new(n, 1, 1000, move |h| {
        let frames = ScriptedModel::frames_in(h, 1);
        if *h.last().unwrap() == FRAME && frames == 13 {
            peaked(n, ASSISTANT, 0.9)
        } else {
            peaked(n, STREAM_EOS, 0.9)
        }
    });
    let e = evaluate_sample(&m, &v, &s, Scheme::Streaming, 0.5).unwrap();
    assert_eq!(e.turns[0].predicted_frame, 12);
    assert!((e.time_diff().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn fluency_definition_cases() {
    let v = grammar::vocabulary(false);
    let s = sample(4, vec![said(2, "now")]);
    let seq = assemble(&s, &v, 1, Scheme::Streaming, 1000).unwrap();
    let start = seq.tokens.iter().position(|&t| t == ASSISTANT).unwrap();
    let score = |wrong: Vec<usize>| fluency(&follower(&v, &s, Scheme::Streaming, wrong), &v, &s, Scheme::Streaming, 0.5).unwrap();
    // slots: silent frames 0 and 1, then ASSISTANT, now, EOS
    assert_eq!(score(vec![]), 1.0);
    assert!((score(vec![start + 1]) - 0.8).abs() < 1e-12);
    // speaking at the first silent frame breaks the turn at slot one
    let first_frame = seq.frame_last.iter().position(|&f| f).unwrap();
    let m = follower(&v, &s, Scheme::Streaming, vec![first_frame]);
    let e = evaluate_sample(&m, &v, &s, Scheme::Streaming, 0.5).unwrap();
    assert_eq!(e.fluency().unwrap(), 0.0);
    assert_eq!(e.turns[0].predicted_frame, 0);
}

/// Independent replay of a sample's events through a [`Session`].
mod oracle {
    use super::*;

    pub struct Scores {
        pub nll: f64,
        pub lm_tokens: usize,
        /// Per turn: predicted frame, lg prefix, lg length, fluency prefix, slots.
        pub turns: Vec<(usize, usize, usize, usize, usize)>,
    }

    fn push_event<M: StreamModel>(s: &mut Session<'_, M>, v: &Vocabulary, e: &Event<'_>, feats: &[Vec<f32>]) {
        match *e {
            Event::Frame(f) => s.push_frame(f, &feats[f]).unwrap(),
            Event::User(_, text) => {
                s.push_tokens(&[USER]).unwrap();
                s.push_tokens(&v.encode(text).unwrap()).unwrap();
            }
            Event::Assistant(_, text) => {
                s.push_tokens(&[ASSISTANT]).unwrap();
                s.push_tokens(&v.encode(text).unwrap()).unwrap();
                s.push_tokens(&[EOS]).unwrap();
            }
        }
    }

    /// Gold context for frames `0..upto`.
    fn replay<'m, M: StreamModel>(
        m: &'m M,
        v: &Vocabulary,
        s: &StreamSample,
        scheme: Scheme,
        upto: usize,
        feats: &[Vec<f32>],
    ) -> Session<'m, M> {
        let mut sess = Session::new(m, v, scheme, 0.5, 64).unwrap();
        for f in 0..upto {
            open_frame(&mut sess, v, s, scheme, f, feats, false);
            let spoken = s.turns.iter().find(|t| t.kind == Role::Assistant && t.frame == f);
            match spoken {
                Some(t) => {
                    if scheme != Scheme::PerFrame {
                        sess.push_tokens(&[ASSISTANT]).unwrap();
                    }
                    sess.push_tokens(&v.encode(&t.text).unwrap()).unwrap();
                    sess.push_tokens(&[EOS]).unwrap();
                }
                None => close_silent(&mut sess, v, scheme),
            }
        }
        sess
    }

    /// Frame, its query, and the per-frame scheme's forced marker.
    fn open_frame<M: StreamModel>(
        sess: &mut Session<'_, M>,
        v: &Vocabulary,
        s: &StreamSample,
        scheme: Scheme,
        f: usize,
        feats: &[Vec<f32>],
        _scan: bool,
    ) {
        push_event(sess, v, &Event::Frame(f), feats);
        for t in s.turns.iter().filter(|t| t.kind == Role::User && t.frame == f) {
            push_event(sess, v, &Event::User(f, &t.text), feats);
        }
        if scheme == Scheme::PerFrame {
            sess.push_tokens(&[ASSISTANT]).unwrap();
        }
    }

    fn close_silent<M: StreamModel>(sess: &mut Session<'_, M>, v: &Vocabulary, scheme: Scheme) {
        if scheme == Scheme::PerFrame {
            sess.push_tokens(&per_frame_template(v).unwrap()[1..]).unwrap();
        }
    }

    fn silence(v: &Vocabulary, scheme: Scheme) -> u32 {
        if scheme == Scheme::PerFrame {
            EOS
        } else {
            v.stream_eos()
        }
    }

    fn gold_tokens(v: &Vocabulary, scheme: Scheme, text: &str) -> Vec<u32> {
        let mut g = if scheme == Scheme::PerFrame { vec![] } else { vec![ASSISTANT] };
        g.extend(v.encode(text).unwrap());
        g.push(EOS);
        g
    }

    pub fn score<M: StreamModel>(m: &M, v: &Vocabulary, s: &StreamSample, scheme: Scheme, theta: f64) -> Scores {
        let feats = s.frame_features().unwrap();
        let sil = silence(v, scheme);
        let turns: Vec<&Turn> = s.assistant_turns().collect();
        let mut out = Scores { nll: 0.0, lm_tokens: 0, turns: vec![] };
        for (k, t) in turns.iter().enumerate() {
            let start = if k == 0 { 0 } else { turns[k - 1].frame + 1 };
            let end = turns.get(k + 1).map_or(s.num_frames, |n| n.frame);
            let decide = |sess: &Session<'_, M>| crate::infer::decide_eos(&softmax(sess.last_logits()), sil, theta).unwrap();

            // scan
            let mut sess = replay(m, v, s, scheme, start, &feats);
            let mut predicted = end;
            for f in start..end {
                open_frame(&mut sess, v, s, scheme, f, &feats, true);
                if matches!(decide(&sess), Decision::Speak(_)) {
                    predicted = f;
                    break;
                }
                close_silent(&mut sess, v, scheme);
            }

            // fluency slots and greedy prefix
            let gold = gold_tokens(v, scheme, &t.text);
            let mut sess = replay(m, v, s, scheme, start, &feats);
            let mut silent_ok = 0;
            let mut broken = false;
            for f in start..t.frame {
                open_frame(&mut sess, v, s, scheme, f, &feats, false);
                if !broken && decide(&sess) == Decision::Silent {
                    silent_ok += 1;
                } else {
                    broken = true;
                }
                close_silent(&mut sess, v, scheme);
            }
            open_frame(&mut sess, v, s, scheme, t.frame, &feats, false);
            let speaks_at_frame = decide(&sess) != Decision::Silent;
            let first = argmax_excluding(&softmax(sess.last_logits()), |id| id == sil || never_generated(id));
            let mut lg = 0;
            let mut matching = first == gold[0];
            for (i, &g) in gold.iter().enumerate() {
                if i > 0 && matching {
                    matching = greedy(sess.last_logits()) == g;
                }
                if matching {
                    lg += 1;
                }
                if g != ASSISTANT {
                    let l = sess.last_logits();
                    let lse = l.iter().map(|x| x.exp()).sum::<f64>().ln();
                    out.nll += lse - l[g as usize];
                    out.lm_tokens += 1;
                }
                sess.push_tokens(&[g]).unwrap();
            }
            let fl = if broken || !speaks_at_frame { silent_ok } else { silent_ok + lg };
            out.turns.push((predicted, lg, gold.len(), fl, (t.frame - start) + gold.len()));
        }
        out
    }
}

fn hashed_model(v: &Vocabulary, p: usize, seed: u64, bias: f64) -> ScriptedModel {
    let n = v.len();
    let favored: Vec<u32> = vec![ASSISTANT, EOS, STREAM_EOS, v.id("you").unwrap(), v.id("now").unwrap(), v.id("are").unwrap()];
    ScriptedModel::new(n, p, 10_000, move |h| {
        let frames = ScriptedModel::frames_in(h, p) as u64;
        let key = derive_seed(derive_seed(seed, h.len() as u64 % 7), frames * 131 + *h.last().unwrap() as u64);
        let mut l = vec![-6.0; n];
        for &id in &favored {
            l[id as usize] = (derive_seed(key, id as u64) >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0;
        }
        l[STREAM_EOS as usize] += bias;
        l[EOS as usize] += bias / 2.0;
        l
    })
}

fn fixture_strategy() -> impl Strategy<Value = StreamSample> {
    (3usize..=10, prop::collection::vec((any::<bool>(), any::<bool>(), 0usize..4), 10)).prop_map(|(n, marks)| {
        let texts = ["now you", "you are done", "now", "you are now you"];
        let mut turns = Vec::new();
        for (f, &(ask, speak, ti)) in marks.iter().enumerate().take(n) {
            if ask && f % 3 == 0 {
                turns.push(asked(f, "what comes next"));
            }
            if speak || f == n - 1 && turns.iter().all(|t| t.kind == Role::User) {
                turns.push(said(f, texts[ti]));
            }
        }
        sample(n, turns)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_event_replay_oracle(
        s in fixture_strategy(),
        seed in any::<u64>(),
        bias in -1.0f64..3.0,
        p in 1usize..3,
        scheme_ix in 0usize..3,
        theta in prop::sample::select(vec![0.0, 0.3, 0.5, 0.6, 0.8, 1.0]),
    ) {
        let v = grammar::vocabulary(false);
        let scheme = Scheme::ALL[scheme_ix];
        let m = hashed_model(&v, p, seed, bias);
        let e = evaluate_sample(&m, &v, &s, scheme, theta).unwrap();
        let o = oracle::score(&m, &v, &s, scheme, theta);
        prop_assert_eq!(e.lm_tokens, o.lm_tokens);
        prop_assert!((e.nll - o.nll).abs() < 1e-6 * o.nll.max(1.0));
        prop_assert!((e.lm_ppl().unwrap() - (o.nll / o.lm_tokens as f64).exp()).abs() < 1e-6 * e.lm_ppl().unwrap());
        let got: Vec<_> = e.turns.iter().map(|t| (t.predicted_frame, t.lg_prefix, t.lg_len, t.fluency_prefix, t.fluency_slots)).collect();
        prop_assert_eq!(got, o.turns);
        for t in &e.turns {
            prop_assert!(t.lg_match() >= 0.0 && t.lg_match() <= 1.0);
            prop_assert!(t.fluency() >= 0.0 && t.fluency() <= 1.0);
            prop_assert!(t.predicted_frame <= t.window_end);
            prop_assert_eq!(t.fluency() == 1.0, t.frame_error() == 0 && t.lg_match() == 1.0);
        }
        prop_assert!(e.lm_ppl().unwrap() >= 1.0);
    }

    #[test]
    fn raising_theta_never_breaks_silence(s in fixture_strategy(), seed in any::<u64>(), bias in -1.0f64..3.0) {
        let v = grammar::vocabulary(false);
        let m = hashed_model(&v, 1, seed, bias);
        let thetas = [0.0, 0.5, 0.6, 0.7, 0.8, 1.0];
        let evals = evaluate_sample_thetas(&m, &v, &s, Scheme::Streaming, &thetas).unwrap();
        for w in evals.windows(2) {
            for (lo, hi) in w[0].silent.iter().zip(&w[1].silent) {
                prop_assert!(!hi || *lo);
            }
        }
    }
}

#[test]
fn always_silent_model_clamps_to_window_end() {
    let v = grammar::vocabulary(false);
    let s = sample(10, vec![asked(0, "what comes next"), said(0, "now"), said(4, "you are done"), said(7, "now you")]);
    let m = ScriptedModel::constant(v.len(), 1, 10_000, peaked(v.len(), STREAM_EOS, 0.99));
    let e = evaluate_sample(&m, &v, &s, Scheme::Streaming, 0.6).unwrap();
    // brute-force scan of the event list: each turn waits for the next
    // gold turn, the last one for the stream end
    let frames: Vec<usize> = s.assistant_turns().map(|t| t.frame).collect();
    let mut total = 0.0;
    for (k, &f) in frames.iter().enumerate() {
        let end = frames.get(k + 1).copied().unwrap_or(s.num_frames);
        total += (end - f) as f64 / s.fps;
    }
    assert!((e.time_diff().unwrap() - total / frames.len() as f64).abs() < 1e-12);
    let o = oracle::score(&m, &v, &s, Scheme::Streaming, 0.6);
    assert_eq!(e.turns.iter().map(|t| t.predicted_frame).collect::<Vec<_>>(), o.turns.iter().map(|t| t.0).collect::<Vec<_>>());
    // silent slots only: 0 of 3, 3 of 3 + 5, 2 of 2 + 4
    assert!((e.fluency().unwrap() - (0.0 + 3.0 / 8.0 + 2.0 / 6.0) / 3.0).abs() < 1e-12);
}

#[test]
fn missing_turns_are_undefined() {
    let v = grammar::vocabulary(false);
    let s = sample(4, vec![asked(1, "what comes next")]);
    let m = ScriptedModel::constant(v.len(), 1, 1000, vec![0.0; v.len()]);
    let e = evaluate_sample(&m, &v, &s, Scheme::Streaming, 0.6).unwrap();
    assert!(matches!(e.lm_ppl(), Err(crate::Error::UndefinedMetric(_))));
    assert!(matches!(e.time_diff(), Err(crate::Error::UndefinedMetric(_))));
    assert!(matches!(MetricsReport::aggregate(Scheme::Streaming, 0.6, &[e]), Err(crate::Error::UndefinedMetric(_))));
}

#[test]
fn sweep_ranges() {
    assert_eq!(theta_range(0.5, 0.8, 0.1).unwrap(), vec![0.5, 0.6, 0.7, 0.8]);
    assert!(theta_range(0.5, 1.5, 0.5).is_err());
    assert!(theta_range(0.5, 0.4, 0.1).is_err());
}

#[test]
fn ablation_table_renders_and_checks() {
    let v = grammar::vocabulary(false);
    let s = sample(6, vec![asked(0, "what comes next"), said(0, "now you"), said(4, "you are done")]);
    let models: Vec<(Scheme, ScriptedModel)> = Scheme::ALL.iter().map(|&sc| (sc, follower(&v, &s, sc, vec![]))).collect();
    let entries: Vec<AblationEntry<'_, ScriptedModel>> = models
        .iter()
        .map(|(sc, m)| AblationEntry {
            label: sc.name().into(),
            scheme: *sc,
            model: m,
            train_tokens: train_tokens(std::slice::from_ref(&s), &v, 1, *sc).unwrap(),
        })
        .collect();
    let cfg = crate::infer::InferenceConfig { decode_ms_per_token: 0.0, ..Default::default() };
    let table = run_ablation(&entries, &v, std::slice::from_ref(&s), &s, &cfg).unwrap();
    let csv = table.to_csv();
    assert!(csv.starts_with("Method,LM-PPL,LG-Match,TimeDiff,Fluency,#Training Token"));
    assert_eq!(csv.lines().count(), 4);
    assert!(table.to_markdown().contains("| streaming |"));
    let checks = table.ordering_checks();
    let tokens = checks.iter().find(|c| c.name == "train_tokens_equal").unwrap();
    assert!(tokens.passed);
    let dir = tempfile::tempdir().unwrap();
    table.write(dir.path()).unwrap();
    for f in ["metrics.json", "ablation.csv", "ablation.md"] {
        assert!(dir.path().join(f).exists());
    }
}
