//! Cuts an annotated stream into successive non-overlapping slices by
//! command count, byte volume, or time extent. Slices are the unit of
//! sampling and of slice-level prediction.

use thiserror::Error;

use crate::derived::{AnnotatedStream, DerivedCommand};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SliceMode {
    ByCommand,
    ByVolume,
    ByTime,
}

/// Slicing mode with its budget. A command that would push a volume slice
/// past the budget starts the next slice; commands are never split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlicePlan {
    ByCommand { commands: usize },
    ByVolume { bytes: u64 },
    ByTime { seconds: f64 },
}

pub const DEFAULT_SLICE_COMMANDS: usize = 16_500;
pub const DEFAULT_SLICE_BYTES: u64 = 512 * 1024 * 1024; // 0.5 GiB
pub const DEFAULT_SLICE_SECONDS: f64 = 10.0;

impl SlicePlan {
    pub fn mode(&self) -> SliceMode {
        match self {
            SlicePlan::ByCommand { .. } => SliceMode::ByCommand,
            SlicePlan::ByVolume { .. } => SliceMode::ByVolume,
            SlicePlan::ByTime { .. } => SliceMode::ByTime,
        }
    }
}

/// A contiguous window of an annotated stream.
#[derive(Debug, Clone)]
pub struct Slice<'a> {
    pub stream_id: &'a str,
    pub slice_index: usize,
    pub mode: SliceMode,
    pub commands: &'a [DerivedCommand],
    /// Start index of this slice within the stream.
    pub start: usize,
    /// True for a trailing slice that did not reach the full budget.
    pub partial: bool,
}

impl<'a> Slice<'a> {
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn volume(&self) -> u64 {
        self.commands.iter().map(|c| c.base.size).sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SliceError {
    #[error("slice budget must be positive")]
    ZeroBudget,
}

/// Partition a stream into slices. Concatenating the slices reproduces the
/// stream exactly; the trailing slice is kept and marked partial when it
/// falls short of the budget.
pub fn slice_stream<'a>(
    stream: &'a AnnotatedStream,
    plan: SlicePlan,
) -> Result<Vec<Slice<'a>>, SliceError> {
    let boundaries = match plan {
        SlicePlan::ByCommand { commands } => {
            if commands == 0 {
                return Err(SliceError::ZeroBudget);
            }
            by_command_boundaries(stream.commands.len(), commands)
        }
        SlicePlan::ByVolume { bytes } => {
            if bytes == 0 {
                return Err(SliceError::ZeroBudget);
            }
            by_volume_boundaries(&stream.commands, bytes)
        }
        SlicePlan::ByTime { seconds } => {
            if seconds <= 0.0 {
                return Err(SliceError::ZeroBudget);
            }
            by_time_boundaries(&stream.commands, seconds)
        }
    };

    let mode = plan.mode();
    let mut slices = Vec::with_capacity(boundaries.len());
    for (slice_index, &(start, end)) in boundaries.iter().enumerate() {
        let commands = &stream.commands[start..end];
        let partial = match plan {
            SlicePlan::ByCommand { commands: n } => commands.len() < n,
            SlicePlan::ByVolume { bytes } => {
                let is_last = slice_index == boundaries.len() - 1;
                is_last && commands.iter().map(|c| c.base.size).sum::<u64>() < bytes
            }
            SlicePlan::ByTime { seconds } => {
                let is_last = slice_index == boundaries.len() - 1;
                is_last
                    && commands.last().map_or(true, |l| {
                        l.base.timestamp - commands[0].base.timestamp < seconds
                    })
            }
        };
        slices.push(Slice {
            stream_id: &stream.stream_id,
            slice_index,
            mode,
            commands,
            start,
            partial,
        });
    }
    Ok(slices)
}

fn by_command_boundaries(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..len).step_by(n).map(|s| (s, (s + n).min(len))).collect()
}

fn by_volume_boundaries(commands: &[DerivedCommand], budget: u64) -> Vec<(usize, usize)> {
    let mut boundaries = Vec::new();
    let mut start = 0;
    let mut volume = 0u64;
    for (i, c) in commands.iter().enumerate() {
        let size = c.base.size;
        if i > start && volume + size > budget {
            boundaries.push((start, i));
            start = i;
            volume = 0;
        }
        volume += size;
    }
    if start < commands.len() {
        boundaries.push((start, commands.len()));
    }
    boundaries
}

fn by_time_boundaries(commands: &[DerivedCommand], window: f64) -> Vec<(usize, usize)> {
    let mut boundaries = Vec::new();
    if commands.is_empty() {
        return boundaries;
    }
    let origin = commands[0].base.timestamp;
    let mut start = 0;
    let mut window_end = origin + window;
    for (i, c) in commands.iter().enumerate() {
        while c.base.timestamp >= window_end {
            if i > start {
                boundaries.push((start, i));
                start = i;
            }
            window_end += window;
        }
    }
    boundaries.push((start, commands.len()));
    boundaries
}
