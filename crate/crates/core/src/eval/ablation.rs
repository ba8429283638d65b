use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsReport, Throughput};
use crate::data::StreamSample;
use crate::error::{Error, Result};
use crate::infer::{run_stream, InferenceConfig};
use crate::model::{StreamModel, Vocabulary};
use crate::train::{assemble, Scheme};

/// Total assembled length of `samples` under `scheme`, frame slots included.
pub fn train_tokens(samples: &[StreamSample], vocab: &Vocabulary, tokens_per_frame: usize, scheme: Scheme) -> Result<usize> {
    samples.iter().try_fold(0, |acc, s| Ok(acc + assemble(s, vocab, tokens_per_frame, scheme, usize::MAX)?.len()))
}

/// One model to compare.
pub struct AblationEntry<'a, M> {
    pub label: String,
    /// Layout and decision rule used to evaluate it.
    pub scheme: Scheme,
    pub model: &'a M,
    pub train_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: MetricsReport,
    pub train_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub theta: f64,
    pub rows: Vec<AblationRow>,
}

/// Named pass/fail result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Evaluates every entry on `samples` and replays `stream` through each
/// for throughput.
pub fn run_ablation<M: StreamModel + Sync>(
    entries: &[AblationEntry<'_, M>],
    vocab: &Vocabulary,
    samples: &[StreamSample],
    stream: &StreamSample,
    infer: &InferenceConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let wrap = |err: Error| err.context(format!("ablation entry `{}`", e.label));
        let mut metrics = evaluate(e.model, vocab, samples, e.scheme, infer.theta).map_err(wrap)?;
        let t = run_stream(e.model, vocab, stream, e.scheme, infer).map_err(wrap)?;
        metrics.throughput = Some(Throughput {
            fps: t.summary.processed_fps,
            skips: t.summary.frames_skipped,
            peak_cache_tokens: t.summary.peak_cache_tokens,
        });
        rows.push(AblationRow { label: e.label.clone(), metrics, train_tokens: e.train_tokens });
    }
    Ok(AblationTable { theta: infer.theta, rows })
}

const COLUMNS: [&str; 9] =
    ["Method", "LM-PPL", "LG-Match", "TimeDiff", "Fluency", "#Training Token", "Peak Cache Tokens", "FPS", "Skips"];

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    fn cells(r: &AblationRow) -> Vec<String> {
        let m = &r.metrics;
        let tp = m.throughput.unwrap_or(Throughput { fps: 0.0, skips: 0, peak_cache_tokens: 0 });
        vec![
            r.label.clone(),
            format!("{:.4}", m.lm_ppl),
            format!("{:.4}", m.lg_match),
            format!("{:.4}", m.time_diff_seconds),
            format!("{:.4}", m.fluency),
            r.train_tokens.to_string(),
            tp.peak_cache_tokens.to_string(),
            format!("{:.3}", tp.fps),
            tp.skips.to_string(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",") + "\n";
        for r in &self.rows {
            out += &(Self::cells(r).join(",") + "\n");
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", Self::cells(r).join(" | "));
        }
        out
    }

    /// Writes `metrics.json`, `ablation.csv` and `ablation.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let files = [
            ("metrics.json", serde_json::to_string_pretty(self).expect("table serializes") + "\n"),
            ("ablation.csv", self.to_csv()),
            ("ablation.md", self.to_markdown()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Ordering checks between rows labelled by scheme name, plus
    /// `untrained` when present. Checks whose rows are missing are skipped.
    pub fn ordering_checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        let get = |s: Scheme| self.row(s.name()).map(|r| &r.metrics);
        let (s, p, i) = (get(Scheme::Streaming), get(Scheme::PerFrame), get(Scheme::Interleaved));
        let mut push = |name: &str, passed: bool, detail: String| out.push(Check { name: name.into(), passed, detail });
        if let (Some(s), Some(p), Some(i)) = (s, p, i) {
            push(
                "timediff_ordering",
                s.time_diff_seconds <= p.time_diff_seconds && p.time_diff_seconds < i.time_diff_seconds,
                format!("{:.4} <= {:.4} < {:.4}", s.time_diff_seconds, p.time_diff_seconds, i.time_diff_seconds),
            );
            push("fluency_ordering", s.fluency >= p.fluency, format!("{:.4} >= {:.4}", s.fluency, p.fluency));
            if let (Some(ts), Some(tp), Some(ti)) = (s.throughput, p.throughput, i.throughput) {
                push(
                    "peak_cache_ordering",
                    ts.peak_cache_tokens < tp.peak_cache_tokens && tp.peak_cache_tokens < ti.peak_cache_tokens,
                    format!("{} < {} < {}", ts.peak_cache_tokens, tp.peak_cache_tokens, ti.peak_cache_tokens),
                );
                push("streaming_no_skips", ts.skips == 0, format!("{} skips", ts.skips));
            }
        }
        let tokens = |s: Scheme| self.row(s.name()).map(|r| r.train_tokens);
        if let (Some(a), Some(b)) = (tokens(Scheme::Streaming), tokens(Scheme::Interleaved)) {
            push("train_tokens_equal", a == b, format!("{a} == {b}"));
        }
        if let (Some(u), Some(s)) = (self.row("untrained"), s) {
            push(
                "untrained_ppl_gap",
                u.metrics.lm_ppl > 5.0 * s.lm_ppl,
                format!("{:.3} > 5 x {:.3}", u.metrics.lm_ppl, s.lm_ppl),
            );
        }
        out
    }
}
