use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{self, QueryTemplate, Tense, NARRATION_QUERY};
use super::sample::{Role, Source, StreamSample, Turn, SCHEMA_VERSION};
use super::world::AnnotatedVideo;
use crate::error::{Error, Result};

/// Queries drawn per video by [`synthesize_dialogue`].
pub const QUERIES_PER_VIDEO: usize = 3;
/// Upper bound on queries inserted into one sample.
pub const MAX_INSERTED_QUERIES: usize = 3;

/// A query with its response at every critical timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedQuery {
    pub tense: Tense,
    pub text: String,
    pub responses: Vec<(usize, String)>,
}

/// Response of a query of the given tense asked at frame `t`.
pub fn respond(video: &AnnotatedVideo, tense: Tense, t: usize) -> String {
    match tense {
        Tense::Past => grammar::past_response(video.last_finished(t).map(|s| s.activity_id)),
        Tense::Current => grammar::current_response(video.segment_at(t).map(|s| s.activity_id)),
        Tense::Future => grammar::future_response(video.next_after(t).map(|s| s.activity_id)),
    }
}

fn new_sample(video: &AnnotatedVideo, source: Source, turns: Vec<Turn>) -> StreamSample {
    StreamSample {
        version: SCHEMA_VERSION,
        id: String::new(),
        fps: video.fps,
        num_frames: video.num_frames,
        source,
        states: video.states().into_iter().map(|s| s.map_or(-1, |a| a as i64)).collect(),
        features: video.features.clone(),
        turns,
    }
}

/// Standing narration request at frame 0, then one utterance at each segment
/// start naming that segment.
pub fn make_narration_stream(video: &AnnotatedVideo) -> StreamSample {
    let mut turns = vec![Turn { kind: Role::User, frame: 0, text: NARRATION_QUERY.to_string() }];
    turns.extend(video.segments.iter().map(|s| Turn {
        kind: Role::Assistant,
        frame: s.start_frame,
        text: grammar::narration_text(s.activity_id),
    }));
    new_sample(video, Source::Narration, turns)
}

/// Draws [`QUERIES_PER_VIDEO`] distinct templates and answers each at every
/// critical timestamp of the video.
pub fn synthesize_dialogue(video: &AnnotatedVideo, templates: &[QueryTemplate], seed: u64) -> Result<Vec<SynthesizedQuery>> {
    if templates.is_empty() {
        return Err(Error::Config("no query templates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = QUERIES_PER_VIDEO.min(templates.len());
    let chosen: Vec<&QueryTemplate> = templates.choose_multiple(&mut rng, count).collect();
    let critical = video.critical_timestamps();
    chosen
        .into_iter()
        .map(|t| {
            let text = t.render(&video.task_name);
            if text.split_whitespace().next().is_none() || text.contains('{') {
                return Err(Error::Config(format!("template `{}` rendered badly", t.pattern)));
            }
            let responses = critical.iter().map(|&ts| (ts, respond(video, t.tense, ts))).collect();
            Ok(SynthesizedQuery { tense: t.tense, text, responses })
        })
        .collect()
}

/// Inserts `1..=max_queries` of the synthesized queries at random distinct
/// frames (see [`insert_queries_at`]).
pub fn insert_queries(
    video: &AnnotatedVideo,
    synthesized: &[SynthesizedQuery],
    max_queries: usize,
    seed: u64,
) -> Result<StreamSample> {
    if !(1..=MAX_INSERTED_QUERIES).contains(&max_queries) {
        return Err(Error::Config(format!("max_queries must be in 1..={MAX_INSERTED_QUERIES}, got {max_queries}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=max_queries.min(synthesized.len()).min(video.num_frames).max(1));
    let mut frames: Vec<usize> = (0..video.num_frames).collect();
    frames.shuffle(&mut rng);
    let mut at: Vec<usize> = frames[..k].to_vec();
    at.sort_unstable();
    insert_queries_at(video, &synthesized[..k], &at)
}

/// Inserts query `i` at frame `at[i]` (strictly increasing). A query keeps
/// its responses strictly after its own insertion frame and strictly before
/// the next insertion, and gains one response at the insertion frame itself.
pub fn insert_queries_at(video: &AnnotatedVideo, queries: &[SynthesizedQuery], at: &[usize]) -> Result<StreamSample> {
    if queries.len() != at.len() {
        return Err(Error::Config(format!("{} queries for {} insertion frames", queries.len(), at.len())));
    }
    if let Some(&t) = at.iter().find(|&&t| t >= video.num_frames) {
        return Err(Error::Config(format!("insertion frame {t} outside 0..{}", video.num_frames)));
    }
    if at.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("insertion frames must be strictly increasing".into()));
    }
    let mut turns = Vec::new();
    for (i, (q, &t_r)) in queries.iter().zip(at).enumerate() {
        let scope_end = at.get(i + 1).copied().unwrap_or(video.num_frames);
        turns.push(Turn { kind: Role::User, frame: t_r, text: q.text.clone() });
        turns.push(Turn { kind: Role::Assistant, frame: t_r, text: respond(video, q.tense, t_r) });
        turns.extend(
            q.responses
                .iter()
                .filter(|(ts, _)| t_r < *ts && *ts < scope_end)
                .map(|(ts, text)| Turn { kind: Role::Assistant, frame: *ts, text: text.clone() }),
        );
    }
    Ok(new_sample(video, Source::Dialogue, turns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grammar::{activity_phrase, default_templates};
    use crate::data::sample::FeatureSpec;
    use crate::data::world::Segment;

    /// Three segments: [0,10) a0, gap, [14,20) a1, [20,30) a2; 40 frames.
    pub(crate) fn hand_video() -> AnnotatedVideo {
        let seg = |a: usize, s: usize, e: usize| Segment {
            activity_id: a,
            name_phrase: activity_phrase(a),
            start_frame: s,
            end_frame: e,
        };
        AnnotatedVideo {
            fps: 2.0,
            num_frames: 40,
            segments: vec![seg(0, 0, 10), seg(1, 14, 20), seg(2, 20, 30)],
            task_name: "making tea".into(),
            features: FeatureSpec { seed: 1, appearance_seed: 2, noise_std: 0.0, onset_cue: 0.0, dim: 4, num_activities: 3 },
            frame_features: Vec::new(),
        }
    }

    fn query(tense: Tense) -> SynthesizedQuery {
        let v = hand_video();
        let responses = v.critical_timestamps().into_iter().map(|t| (t, respond(&v, tense, t))).collect();
        SynthesizedQuery { tense, text: "what comes next".into(), responses }
    }

    #[test]
    fn narration_has_one_turn_per_segment_start() {
        let v = hand_video();
        let s = make_narration_stream(&v);
        assert_eq!(s.turns.len(), 4);
        assert_eq!(s.turns[0].kind, Role::User);
        let frames: Vec<usize> = s.assistant_turns().map(|t| t.frame).collect();
        assert_eq!(frames, vec![0, 14, 20]);
        let empty = AnnotatedVideo { segments: vec![], ..v };
        assert_eq!(make_narration_stream(&empty).turns.len(), 1);
    }

    #[test]
    fn critical_timestamps_are_starts_and_ends() {
        assert_eq!(hand_video().critical_timestamps(), vec![0, 10, 14, 20, 30]);
    }

    #[test]
    fn response_rules_follow_the_timeline() {
        let v = hand_video();
        // past at 14: segment 0 ended at 10
        assert_eq!(respond(&v, Tense::Past, 14), format!("you just finished {}", activity_phrase(0)));
        assert_eq!(respond(&v, Tense::Past, 5), "you have not finished anything yet");
        // future at the start of segment k names k+1, and nothing after the last
        assert_eq!(respond(&v, Tense::Future, 14), format!("next you will {}", activity_phrase(2)));
        assert_eq!(respond(&v, Tense::Future, 20), "you will finish soon");
        assert_eq!(respond(&v, Tense::Current, 11), "you are taking a short break");
        assert_eq!(respond(&v, Tense::Current, 20), format!("right now you {}", activity_phrase(2)));
    }

    #[test]
    fn insertion_at_zero_keeps_everything() {
        let v = hand_video();
        let s = insert_queries_at(&v, &[query(Tense::Future)], &[0]).unwrap();
        let frames: Vec<usize> = s.assistant_turns().map(|t| t.frame).collect();
        assert_eq!(frames, vec![0, 10, 14, 20, 30]);
    }

    #[test]
    fn insertion_at_last_frame_gives_one_response() {
        let v = hand_video();
        let s = insert_queries_at(&v, &[query(Tense::Past)], &[39]).unwrap();
        assert_eq!(s.assistant_turns().count(), 1);
        assert_eq!(s.turns[1].frame, 39);
        assert!(insert_queries_at(&v, &[query(Tense::Past)], &[40]).is_err());
    }

    #[test]
    fn later_query_cuts_earlier_scope() {
        let v = hand_video();
        let s = insert_queries_at(&v, &[query(Tense::Past), query(Tense::Future)], &[3, 14]).unwrap();
        let users: Vec<usize> = s.turns.iter().enumerate().filter(|(_, t)| t.kind == Role::User).map(|(i, _)| i).collect();
        assert_eq!(users.len(), 2);
        assert!(s.turns[..users[1]].iter().all(|t| t.frame < 14));
        let frames: Vec<usize> = s.assistant_turns().map(|t| t.frame).collect();
        assert_eq!(frames, vec![3, 10, 14, 20, 30]);
    }

    #[test]
    fn synthesized_queries_answer_every_critical_timestamp() {
        let v = hand_video();
        let qs = synthesize_dialogue(&v, &default_templates(), 4).unwrap();
        assert_eq!(qs.len(), QUERIES_PER_VIDEO);
        for q in &qs {
            let ts: Vec<usize> = q.responses.iter().map(|r| r.0).collect();
            assert_eq!(ts, v.critical_timestamps());
        }
        assert!(synthesize_dialogue(&v, &[], 4).is_err());
    }
}
