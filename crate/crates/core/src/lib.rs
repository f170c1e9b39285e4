//! Ransomware detection over NVMe command streams.
//!
//! The pipeline turns raw read/write command traces into per-slice
//! detections: commands are annotated with byte-overlap and timing
//! attributes, streams are cut into slices, and each slice is scored
//! either per command (token classifier), per patch (fractional-volume
//! regressor), or per slice (tree baselines). A cost model accounts for
//! the parameter, multiplication, and throughput budget of deploying
//! the sequence models inside a storage controller.

pub mod baselines;
pub mod clt;
pub mod derived;
pub mod eval;
pub mod hwcost;
pub mod nn;
pub mod pipeline;
pub mod plt;
pub mod slicer;
pub mod synth;
pub mod trace;

pub use trace::{Command, Label, Opcode, Stream};
