//! Real-time decoding over a frame stream: the per-frame silence decision,
//! an incremental session that owns the cache, and a stream runner that
//! decouples frame encoding from decoding through a bounded queue.

mod decide;
mod engine;
mod session;

pub use decide::{argmax_excluding, check_theta, decide_eos, greedy, never_generated, softmax, Decision};
pub use engine::{
    run_stream, run_stream_concurrent, ClockMode, FrameDecision, FrameRecord, InferenceConfig, SkipPolicy, StreamSummary,
    StreamTranscript,
};
pub use session::{frame_at_or_after, Session, StepOutcome};
