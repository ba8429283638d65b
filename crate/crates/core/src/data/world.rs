use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sample::FeatureSpec;
use super::grammar::{activity_phrase, task_names, MAX_ACTIVITIES};
use crate::error::{Error, Result};

/// Parameters of the synthetic activity world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_frames: usize,
    pub fps: f64,
    pub num_activities: usize,
    /// Segment duration bounds in frames, inclusive.
    pub min_duration: usize,
    pub max_duration: usize,
    /// Chance of a background gap after each segment.
    pub gap_probability: f64,
    pub min_gap: usize,
    pub max_gap: usize,
    pub noise_std: f64,
    /// Scale of a shared transition pattern added to the first frame of
    /// every segment.
    pub onset_cue: f64,
    pub feature_dim: usize,
    /// Seeds the per-state appearance table shared by every video.
    pub appearance_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_frames: 600,
            fps: 2.0,
            num_activities: 32,
            min_duration: 10,
            max_duration: 40,
            gap_probability: 0.3,
            min_gap: 4,
            max_gap: 12,
            noise_std: 0.3,
            onset_cue: 1.0,
            feature_dim: 16,
            appearance_seed: 1234,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad(format!("segment durations need 0 < min ({}) <= max ({})", self.min_duration, self.max_duration));
        }
        if self.num_frames < self.min_duration + 1 {
            return bad(format!("{} frames cannot hold a segment of {} frames", self.num_frames, self.min_duration));
        }
        if self.min_gap > self.max_gap {
            return bad(format!("gap bounds min ({}) > max ({})", self.min_gap, self.max_gap));
        }
        if !(0.0..=1.0).contains(&self.gap_probability) {
            return bad(format!("gap_probability {} outside [0, 1]", self.gap_probability));
        }
        if self.num_activities == 0 || self.num_activities > MAX_ACTIVITIES {
            return bad(format!("num_activities must be in 1..={MAX_ACTIVITIES}"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || self.feature_dim == 0 {
            return bad("noise_std must be >= 0 and feature_dim positive".into());
        }
        if !(self.onset_cue >= 0.0 && self.onset_cue.is_finite()) {
            return bad(format!("onset_cue {} must be >= 0", self.onset_cue));
        }
        Ok(())
    }
}

/// One annotated activity. `end_frame` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub activity_id: usize,
    pub name_phrase: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Synthetic ground-truth timeline of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedVideo {
    pub fps: f64,
    pub num_frames: usize,
    pub segments: Vec<Segment>,
    pub task_name: String,
    pub features: FeatureSpec,
    pub frame_features: Vec<Vec<f32>>,
}

impl AnnotatedVideo {
    /// Activity per frame, `None` for background.
    pub fn states(&self) -> Vec<Option<usize>> {
        let mut s = vec![None; self.num_frames];
        for seg in &self.segments {
            s[seg.start_frame..seg.end_frame].iter_mut().for_each(|v| *v = Some(seg.activity_id));
        }
        s
    }

    /// Sorted union of all segment starts and ends.
    pub fn critical_timestamps(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.segments.iter().flat_map(|s| [s.start_frame, s.end_frame]).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// Segment covering frame `t`.
    pub fn segment_at(&self, t: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.start_frame <= t && t < s.end_frame)
    }

    /// Latest segment whose end is at or before `t`.
    pub fn last_finished(&self, t: usize) -> Option<&Segment> {
        self.segments.iter().rev().find(|s| s.end_frame <= t)
    }

    /// First segment starting strictly after `t`.
    pub fn next_after(&self, t: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.start_frame > t)
    }
}

/// Appearance table (one row per activity plus a background row), the
/// transition pattern and the noise level used to render frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    table: Vec<Vec<f32>>,
    cue: Vec<f32>,
    noise_std: f64,
}

impl FeatureSpace {
    pub fn new(num_activities: usize, dim: usize, noise_std: f64, onset_cue: f64, appearance_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(appearance_seed);
        let mut row = || -> Vec<f32> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let table = (0..=num_activities).map(|_| row()).collect();
        let cue = row().into_iter().map(|x| x * onset_cue as f32).collect();
        Self { table, cue, noise_std }
    }

    pub fn dim(&self) -> usize {
        self.table[0].len()
    }

    pub fn num_activities(&self) -> usize {
        self.table.len() - 1
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Features for a run of states: appearance of each state, the
    /// transition pattern where an activity begins, and independent Gaussian
    /// noise drawn in frame order from `feature_seed`.
    pub fn render(&self, states: &[Option<usize>], feature_seed: u64) -> Result<Vec<Vec<f32>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(feature_seed);
        let background = self.num_activities();
        states
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let onset = s.is_some() && (t == 0 || states[t - 1] != *s);
                let row = match s {
                    Some(a) if *a < background => &self.table[*a],
                    Some(a) => return Err(Error::InvalidSample(format!("state {a} outside {background} activities"))),
                    None => &self.table[background],
                };
                Ok(row
                    .iter()
                    .zip(&self.cue)
                    .map(|(&base, &cue)| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        let x = base + (self.noise_std * n) as f32;
                        if onset {
                            x + cue
                        } else {
                            x
                        }
                    })
                    .collect())
            })
            .collect()
    }
}

/// Samples a video. Segments start at frame 0, never overlap, use distinct
/// activities and are separated by optional background gaps; the last frame
/// is always left after the final segment so every end is an observable
/// frame.
pub fn gen_world(cfg: &WorldConfig, seed: u64) -> Result<AnnotatedVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut activities: Vec<usize> = (0..cfg.num_activities).collect();
    activities.shuffle(&mut rng);
    let task_name = task_names()[rng.random_range(0..task_names().len())].to_string();
    let limit = cfg.num_frames - 1;
    let mut segments = Vec::new();
    let mut t = 0;
    for activity_id in activities {
        let d = rng.random_range(cfg.min_duration..=cfg.max_duration);
        let end = (t + d).min(limit);
        if end < t + cfg.min_duration {
            break;
        }
        segments.push(Segment { activity_id, name_phrase: activity_phrase(activity_id), start_frame: t, end_frame: end });
        t = end;
        if rng.random_bool(cfg.gap_probability) {
            t += rng.random_range(cfg.min_gap..=cfg.max_gap);
        }
    }
    let features = FeatureSpec {
        seed: rng.random(),
        appearance_seed: cfg.appearance_seed,
        noise_std: cfg.noise_std,
        onset_cue: cfg.onset_cue,
        dim: cfg.feature_dim,
        num_activities: cfg.num_activities,
    };
    let mut video = AnnotatedVideo {
        fps: cfg.fps,
        num_frames: cfg.num_frames,
        segments,
        task_name,
        features,
        frame_features: Vec::new(),
    };
    video.frame_features = video.features.space().render(&video.states(), video.features.seed)?;
    Ok(video)
}
