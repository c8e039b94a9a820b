//! Click/buy log parsing, trail construction and the synthetic generator.

mod io;
mod pipeline;
mod recsys;
mod synth;
mod types;

pub use io::{read_trails, read_trails_file, write_trails, write_trails_file, TrailRecord};
pub use pipeline::{
    build_vocab, cut_at_retargeting, downsample_negatives, prepare, split_train_test, to_user_trail, Labeled,
    PrepareConfig, PrepareSummary, PreparedData, RawTrail, Vocabulary, OOV_KEY,
};
pub use recsys::{
    click_key, format_timestamp, parse_recsys, parse_recsys_readers, parse_timestamp, RecsysLog, Session,
};
pub use synth::{
    expected_positive_rate, synth_dataset, synth_generate, write_recsys_surrogate, GroundTruth, SignalSpec,
    SignalTruth, SurrogateSpec, SynthData, SynthSpec,
};
pub use types::{RawEvent, SourceTag, UserTrail};
