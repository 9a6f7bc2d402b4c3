//! Lifting, sliding-window smoothing with variance-weighted fusion of overlapping
//! windows, and handoff to retargeting.

mod camera;
mod io;
mod stream;

pub use camera::{unproject_sequence, unproject_weak_perspective, WeakPerspectiveCamera};
pub use io::{binary_path, read_sequence, write_csv, write_sequence, SequenceHeader, SEQUENCE_DTYPE, SEQUENCE_LAYOUT};
pub use stream::{
    fuse_windows, fusion_weights, run_offline, run_streaming, run_threaded, single_threaded_requested, EmittedFrame,
    FrameEstimate, PipelineOptions, PipelineOutput, StreamConfig, StreamState, FUSION_EPS,
};
