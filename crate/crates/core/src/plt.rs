//! Patch-level embedding: overlapping windows over a slice, each embedded
//! as a 181-long feature vector of histograms plus normalized totals, with
//! per-patch fractional ransomware-volume labels.
//!
//! Block layout (fixed; golden vectors depend on it):
//!   [0,36)    log-size histograms, unweighted: read, write, rest (12 each)
//!   [36,60)   log-overlap histograms, unweighted: war, rar (12 each)
//!   [60,130)  normalized-offset histograms, size-weighted:
//!             read, write, war, rar, rest (14 each)
//!   [130,158) normalized-lapse histograms, overlap-weighted: war, rar (14 each)
//!   [158,172) normalized-delta-t histogram, size-weighted, all commands (14)
//!   [172,181) 9 scalar totals, each clipped to [0,1]
//!
//! Offsets are standardized against the slice's size^2-weighted moments;
//! delta-t and lapse values divide by exponentially back-averaged delta-t
//! means carried across slices of one stream, making the features invariant
//! to uniform timestamp rescaling after one slice of warm-up.

use thiserror::Error;

use crate::derived::{DerivedCommand, OverlapPair};
use crate::slicer::{Slice, SliceMode};
use crate::trace::{Label, Opcode};

pub const LOG_BINS: usize = 12;
pub const NORM_BINS: usize = 14;
pub const SCALAR_FEATURES: usize = 9;
/// 3 size + 2 overlap + 5 offset + 2 lapse + 1 delta-t histograms + scalars.
pub const EMBED_DIM: usize =
    3 * LOG_BINS + 2 * LOG_BINS + 5 * NORM_BINS + 2 * NORM_BINS + NORM_BINS + SCALAR_FEATURES;
const _: () = assert!(EMBED_DIM == 181);

/// Diminishing factor of the cross-slice back-averages.
pub const BACK_AVERAGE_ALPHA: f64 = 0.8;
/// Designed patch width: commands per patch in by-command mode.
pub const DEFAULT_PATCH_COMMANDS: usize = 250;
pub const DEFAULT_PATCH_STRIDE: usize = 165;
/// Designed patch width: bytes per patch in by-volume mode (50 MB).
pub const DEFAULT_PATCH_BYTES: u64 = 50_000_000;
pub const PATCHES_PER_SLICE: usize = 100;

/// Fixed bin edges and weight scale. Weighted histogram masses are
/// expressed in units of `weight_unit` bytes so feature magnitudes stay
/// near unity; the mass identities hold in the same unit.
#[derive(Debug, Clone, Copy)]
pub struct BinConfig {
    /// Normalized-offset bins: uniform over [-offset_span, offset_span],
    /// outer bins catching the tails.
    pub offset_span: f64,
    /// Normalized time bins: log2-spaced over [2^time_lo, 2^time_hi].
    pub time_lo: f64,
    pub time_hi: f64,
    /// Byte unit for size- and overlap-weights.
    pub weight_unit: f64,
}

impl Default for BinConfig {
    fn default() -> Self {
        BinConfig {
            offset_span: 3.0,
            time_lo: -6.0,
            time_hi: 7.0,
            weight_unit: DEFAULT_PATCH_BYTES as f64,
        }
    }
}

/// Feature blocks that can be zeroed for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchFeatureMask {
    pub size: bool,
    pub ov: bool,
    pub offset: bool,
    pub lapse: bool,
    pub dt: bool,
    pub fractions: bool,
}

impl PatchFeatureMask {
    pub const ALL: PatchFeatureMask = PatchFeatureMask {
        size: true,
        ov: true,
        offset: true,
        lapse: true,
        dt: true,
        fractions: true,
    };

    pub fn without(mut self, field: &str) -> Option<PatchFeatureMask> {
        match field {
            "size" => self.size = false,
            "ov" => self.ov = false,
            "offset" => self.offset = false,
            "lapse" | "delta_t_lapse" => self.lapse = false,
            "dt" | "delta_t" => self.dt = false,
            "fractions" => self.fractions = false,
            _ => return None,
        }
        Some(self)
    }
}

impl Default for PatchFeatureMask {
    fn default() -> Self {
        PatchFeatureMask::ALL
    }
}

/// Window geometry for cutting a slice into its 100 patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchWindows {
    /// Fixed command count per window, fixed stride, clamped at slice end.
    ByCommand { window: usize, stride: usize },
    /// Fixed byte width; stride chosen so the 100 windows span the slice.
    ByVolume { width: u64 },
}

impl PatchWindows {
    pub fn default_for(mode: SliceMode) -> PatchWindows {
        match mode {
            SliceMode::ByVolume => PatchWindows::ByVolume {
                width: DEFAULT_PATCH_BYTES,
            },
            _ => PatchWindows::ByCommand {
                window: DEFAULT_PATCH_COMMANDS,
                stride: DEFAULT_PATCH_STRIDE,
            },
        }
    }

    /// Nominal patch width used as the scalar-feature normalizer.
    fn command_norm(&self) -> f64 {
        match self {
            PatchWindows::ByCommand { window, .. } => *window as f64,
            PatchWindows::ByVolume { .. } => DEFAULT_PATCH_COMMANDS as f64,
        }
    }

    fn volume_norm(&self) -> f64 {
        match self {
            PatchWindows::ByVolume { width } => *width as f64,
            PatchWindows::ByCommand { .. } => DEFAULT_PATCH_BYTES as f64,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("slice is empty")]
    EmptySlice,
    #[error("patch window must be positive")]
    ZeroWindow,
    #[error("command {0} is unlabeled; fractional labels need labeled data")]
    Unlabeled(usize),
}

/// One overlapping window of a slice. `start` is the index of the first
/// command within the slice.
#[derive(Debug, Clone)]
pub struct Patch<'a> {
    pub start: usize,
    pub commands: &'a [DerivedCommand],
    /// Set when the slice was smaller than one window and the single
    /// clamped patch was replicated.
    pub degenerate: bool,
}

/// Exponentially back-averaged delta-t means carried across the slices of
/// one stream: one weighted by size^2, one by (overlap volume)^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackAverageState {
    pub alpha: f64,
    pub slices_seen: usize,
    pub dt_size2: f64,
    pub dt_ov2: f64,
}

impl BackAverageState {
    pub fn new(alpha: f64) -> Self {
        BackAverageState {
            alpha,
            slices_seen: 0,
            dt_size2: 0.0,
            dt_ov2: 0.0,
        }
    }
}

impl Default for BackAverageState {
    fn default() -> Self {
        BackAverageState::new(BACK_AVERAGE_ALPHA)
    }
}

/// Weighted slice mean, falling back to the unweighted mean when every
/// weight is zero.
fn weighted_mean(values: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    let (mut sum, mut count) = (0.0, 0.0);
    for (v, w) in values {
        num += v * w;
        den += w;
        sum += v;
        count += 1.0;
    }
    if den > 0.0 {
        num / den
    } else if count > 0.0 {
        sum / count
    } else {
        0.0
    }
}

fn ov_weight(dc: &DerivedCommand) -> f64 {
    (dc.ov_war() + dc.ov_rar()) as f64
}

/// Fold one slice into the running back-averages: the first slice
/// initializes the state, later slices blend with factor alpha.
pub fn update_back_averages(state: &BackAverageState, slice: &Slice<'_>) -> BackAverageState {
    assert!(!slice.is_empty(), "back-average update needs a non-empty slice");
    let dt_size2 = weighted_mean(
        slice
            .commands
            .iter()
            .map(|c| (c.delta_t, (c.base.size as f64).powi(2))),
    );
    let dt_ov2 = weighted_mean(
        slice
            .commands
            .iter()
            .map(|c| (c.delta_t, ov_weight(c).powi(2))),
    );
    if state.slices_seen == 0 {
        BackAverageState {
            alpha: state.alpha,
            slices_seen: 1,
            dt_size2,
            dt_ov2,
        }
    } else {
        BackAverageState {
            alpha: state.alpha,
            slices_seen: state.slices_seen + 1,
            dt_size2: state.alpha * state.dt_size2 + (1.0 - state.alpha) * dt_size2,
            dt_ov2: state.alpha * state.dt_ov2 + (1.0 - state.alpha) * dt_ov2,
        }
    }
}

/// Per-command normalized attributes for one slice.
#[derive(Debug, Clone)]
pub struct NormalizedSlice {
    pub offset_bar: Vec<f64>,
    pub dt_bar: Vec<f64>,
    /// Normalized lapse per overlap pair, present iff the overlap is.
    pub lapse_bar: Vec<[Option<f64>; 4]>,
    /// Count of zero denominators replaced by 1.
    pub substitutions: usize,
}

/// Standardize offsets against the slice's size^2-weighted moments and
/// scale the time attributes by the back-averaged delta-t means. Zero
/// denominators are replaced by 1 and counted.
pub fn normalize_attributes(slice: &Slice<'_>, state: &BackAverageState) -> NormalizedSlice {
    assert!(state.slices_seen > 0, "back-average state not initialized");
    let mut substitutions = 0;
    let mut guard = |d: f64| {
        if d > 0.0 {
            d
        } else {
            substitutions += 1;
            1.0
        }
    };

    let offset_mean = weighted_mean(
        slice
            .commands
            .iter()
            .map(|c| (c.base.offset as f64, (c.base.size as f64).powi(2))),
    );
    let offset_raw_second = weighted_mean(
        slice
            .commands
            .iter()
            .map(|c| ((c.base.offset as f64).powi(2), (c.base.size as f64).powi(2))),
    );
    let offset_scale = guard(offset_raw_second.sqrt());
    let dt_scale = guard(state.dt_size2);
    let lapse_scale = guard(10.0 * state.dt_ov2);

    let mut offset_bar = Vec::with_capacity(slice.len());
    let mut dt_bar = Vec::with_capacity(slice.len());
    let mut lapse_bar = Vec::with_capacity(slice.len());
    for c in slice.commands {
        offset_bar.push((c.base.offset as f64 - offset_mean) / offset_scale);
        dt_bar.push(c.delta_t / dt_scale);
        lapse_bar.push(c.lapse.map(|l| l.map(|v| v / lapse_scale)));
    }
    NormalizedSlice {
        offset_bar,
        dt_bar,
        lapse_bar,
        substitutions,
    }
}

/// Cut a slice into its fixed number of overlapping patches. A slice
/// smaller than one window yields the single clamped patch replicated,
/// flagged degenerate.
pub fn make_patches<'a>(
    slice: &Slice<'a>,
    windows: PatchWindows,
) -> Result<Vec<Patch<'a>>, EmbedError> {
    if slice.is_empty() {
        return Err(EmbedError::EmptySlice);
    }
    let len = slice.len();
    let ranges: Vec<(usize, usize)> = match windows {
        PatchWindows::ByCommand { window, stride } => {
            if window == 0 {
                return Err(EmbedError::ZeroWindow);
            }
            if len <= window {
                vec![(0, len)]
            } else {
                (0..PATCHES_PER_SLICE)
                    .map(|j| {
                        let start = (j * stride).min(len - 1);
                        (start, (start + window).min(len))
                    })
                    .collect()
            }
        }
        PatchWindows::ByVolume { width } => {
            if width == 0 {
                return Err(EmbedError::ZeroWindow);
            }
            let sizes: Vec<u64> = slice.commands.iter().map(|c| c.base.size).collect();
            let total: u64 = sizes.iter().sum();
            if total <= width {
                vec![(0, len)]
            } else {
                // Cumulative start byte of each command within the slice.
                let mut cum = Vec::with_capacity(len + 1);
                let mut acc = 0u64;
                for &s in &sizes {
                    cum.push(acc);
                    acc += s;
                }
                cum.push(acc);
                let stride = (total - width) as f64 / (PATCHES_PER_SLICE - 1) as f64;
                (0..PATCHES_PER_SLICE)
                    .map(|j| {
                        let w_start = (j as f64 * stride) as u64;
                        let w_end = (w_start + width).min(total);
                        // Commands whose byte interval intersects the window:
                        // first with end > w_start, through last with start < w_end.
                        let first = cum.partition_point(|&c| c <= w_start) - 1;
                        let last = cum.partition_point(|&c| c < w_end);
                        (first, last.max(first + 1).min(len))
                    })
                    .collect()
            }
        }
    };

    let degenerate = ranges.len() == 1;
    let mut patches = Vec::with_capacity(PATCHES_PER_SLICE);
    for i in 0..PATCHES_PER_SLICE {
        let (start, end) = ranges[i.min(ranges.len() - 1)];
        patches.push(Patch {
            start,
            commands: &slice.commands[start..end],
            degenerate,
        });
    }
    Ok(patches)
}

/// The embedded patch: the 181 features plus its two fractional labels
/// (filled by `label_patch_fractions` when labels are available).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding {
    pub features: Vec<f64>,
    pub label_read_frac: f64,
    pub label_write_frac: f64,
}

fn log_size_bin(bytes: u64) -> usize {
    if bytes < 512 {
        0
    } else {
        ((bytes / 512).ilog2() as usize).min(LOG_BINS - 1)
    }
}

fn offset_bin(x: f64, cfg: &BinConfig) -> usize {
    let width = 2.0 * cfg.offset_span / NORM_BINS as f64;
    let idx = ((x + cfg.offset_span) / width).floor();
    (idx.max(0.0) as usize).min(NORM_BINS - 1)
}

fn time_bin(x: f64, cfg: &BinConfig) -> usize {
    if x <= 0.0 {
        return 0;
    }
    let idx = ((x.log2() - cfg.time_lo) * NORM_BINS as f64 / (cfg.time_hi - cfg.time_lo)).floor();
    (idx.max(0.0) as usize).min(NORM_BINS - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CommandClass {
    Read,
    Write,
    War,
    Rar,
    Rest,
}

fn classify(dc: &DerivedCommand) -> (CommandClass, CommandClass) {
    let rw = match dc.base.opcode {
        Opcode::Read => CommandClass::Read,
        Opcode::Write => CommandClass::Write,
    };
    let ov = if dc.is_war() {
        CommandClass::War
    } else if dc.is_rar() {
        CommandClass::Rar
    } else {
        CommandClass::Rest
    };
    (rw, ov)
}

/// Embed one patch. `normalized` must come from `normalize_attributes` on
/// the enclosing slice; `windows` supplies the scalar normalizers.
pub fn embed_patch(
    patch: &Patch<'_>,
    normalized: &NormalizedSlice,
    windows: PatchWindows,
    cfg: &BinConfig,
    mask: PatchFeatureMask,
) -> PatchEmbedding {
    let mut features = vec![0.0; EMBED_DIM];
    let mut idx = 0;

    // Unweighted log-size histograms: read, write, rest.
    {
        let (read_h, rest) = features[..].split_at_mut(LOG_BINS);
        let (write_h, rest_h) = rest.split_at_mut(LOG_BINS);
        if mask.size {
            for dc in patch.commands {
                let bin = log_size_bin(dc.base.size);
                let (rw, ov) = classify(dc);
                match rw {
                    CommandClass::Read => read_h[bin] += 1.0,
                    CommandClass::Write => write_h[bin] += 1.0,
                    _ => unreachable!(),
                }
                if ov == CommandClass::Rest {
                    rest_h[bin] += 1.0;
                }
            }
        }
    }
    idx += 3 * LOG_BINS;

    // Unweighted log-overlap histograms: war, rar.
    if mask.ov {
        for dc in patch.commands {
            if dc.is_war() {
                features[idx + log_size_bin(dc.ov_war())] += 1.0;
            }
            if dc.is_rar() {
                features[idx + LOG_BINS + log_size_bin(dc.ov_rar())] += 1.0;
            }
        }
    }
    idx += 2 * LOG_BINS;

    // Size-weighted normalized-offset histograms: read, write, war, rar, rest.
    if mask.offset {
        for (i, dc) in patch.commands.iter().enumerate() {
            let x = normalized.offset_bar[patch.start + i];
            let bin = offset_bin(x, cfg);
            let w = dc.base.size as f64 / cfg.weight_unit;
            let (rw, ov) = classify(dc);
            let rw_block = match rw {
                CommandClass::Read => 0,
                _ => 1,
            };
            features[idx + rw_block * NORM_BINS + bin] += w;
            let ov_block = match ov {
                CommandClass::War => 2,
                CommandClass::Rar => 3,
                _ => 4,
            };
            features[idx + ov_block * NORM_BINS + bin] += w;
        }
    }
    idx += 5 * NORM_BINS;

    // Overlap-weighted normalized-lapse histograms: war, rar.
    if mask.lapse {
        for (i, dc) in patch.commands.iter().enumerate() {
            let bars = &normalized.lapse_bar[patch.start + i];
            if let Some(l) = bars[OverlapPair::War.index()] {
                let w = dc.ov_war() as f64 / cfg.weight_unit;
                features[idx + time_bin(l, cfg)] += w;
            }
            if let Some(l) = bars[OverlapPair::Rar.index()] {
                let w = dc.ov_rar() as f64 / cfg.weight_unit;
                features[idx + NORM_BINS + time_bin(l, cfg)] += w;
            }
        }
    }
    idx += 2 * NORM_BINS;

    // Size-weighted normalized-delta-t histogram over all commands.
    if mask.dt {
        for (i, dc) in patch.commands.iter().enumerate() {
            let w = dc.base.size as f64 / cfg.weight_unit;
            features[idx + time_bin(normalized.dt_bar[patch.start + i], cfg)] += w;
        }
    }
    idx += NORM_BINS;

    // Scalar totals, clipped to [0, 1].
    if mask.fractions {
        let n = patch.commands.len() as f64;
        let volume: u64 = patch.commands.iter().map(|c| c.base.size).sum();
        let volume = volume as f64;
        let read_vol: u64 = patch
            .commands
            .iter()
            .filter(|c| c.base.opcode == Opcode::Read)
            .map(|c| c.base.size)
            .sum();
        let write_vol: u64 = patch
            .commands
            .iter()
            .filter(|c| c.base.opcode == Opcode::Write)
            .map(|c| c.base.size)
            .sum();
        let ov_war: u64 = patch.commands.iter().map(|c| c.ov_war()).sum();
        let ov_rar: u64 = patch.commands.iter().map(|c| c.ov_rar()).sum();
        let n_read = patch
            .commands
            .iter()
            .filter(|c| c.base.opcode == Opcode::Read)
            .count() as f64;
        let n_write = n - n_read;
        let n_war = patch.commands.iter().filter(|c| c.is_war()).count() as f64;
        let n_rar = patch.commands.iter().filter(|c| c.is_rar()).count() as f64;

        let scalars: [f64; SCALAR_FEATURES] = match windows {
            PatchWindows::ByVolume { .. } => {
                let v0 = windows.volume_norm();
                [
                    volume / v0,
                    read_vol as f64 / v0,
                    write_vol as f64 / v0,
                    ov_war as f64 / v0,
                    ov_rar as f64 / v0,
                    n_read / n,
                    n_write / n,
                    n_war / n,
                    n_rar / n,
                ]
            }
            PatchWindows::ByCommand { .. } => {
                let n0 = windows.command_norm();
                [
                    n / n0,
                    n_read / n0,
                    n_write / n0,
                    n_war / n0,
                    n_rar / n0,
                    read_vol as f64 / volume,
                    write_vol as f64 / volume,
                    ov_war as f64 / volume,
                    ov_rar as f64 / volume,
                ]
            }
        };
        for (k, s) in scalars.into_iter().enumerate() {
            features[idx + k] = s.clamp(0.0, 1.0);
        }
    }

    PatchEmbedding {
        features,
        label_read_frac: 0.0,
        label_write_frac: 0.0,
    }
}

/// Fraction of the patch's bytes read and written by ransomware, over the
/// patch's total IO volume (so the pair sums to at most 1).
pub fn label_patch_fractions(patch: &Patch<'_>) -> Result<(f64, f64), EmbedError> {
    let mut total = 0u64;
    let mut rw_read = 0u64;
    let mut rw_write = 0u64;
    for (i, dc) in patch.commands.iter().enumerate() {
        total += dc.base.size;
        match dc.base.label {
            Label::Unlabeled => return Err(EmbedError::Unlabeled(patch.start + i)),
            Label::Ransomware => match dc.base.opcode {
                Opcode::Read => rw_read += dc.base.size,
                Opcode::Write => rw_write += dc.base.size,
            },
            Label::Benign => {}
        }
    }
    if total == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((rw_read as f64 / total as f64, rw_write as f64 / total as f64))
}

/// Embed every patch in a slice, with labels when `labeled` is set.
pub fn embed_slice(
    slice: &Slice<'_>,
    state: &BackAverageState,
    windows: PatchWindows,
    cfg: &BinConfig,
    mask: PatchFeatureMask,
    labeled: bool,
) -> Result<Vec<PatchEmbedding>, EmbedError> {
    let normalized = normalize_attributes(slice, state);
    let patches = make_patches(slice, windows)?;
    patches
        .iter()
        .map(|patch| {
            let mut emb = embed_patch(patch, &normalized, windows, cfg, mask);
            if labeled {
                let (r, w) = label_patch_fractions(patch)?;
                emb.label_read_frac = r;
                emb.label_write_frac = w;
            }
            Ok(emb)
        })
        .collect()
}

/// Embedding dump: one patch per line, 181 comma-separated decimals plus
/// the two label columns.
pub fn write_embedding_dump(
    embeddings: &[PatchEmbedding],
    path: &std::path::Path,
) -> std::io::Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for emb in embeddings {
        let mut cols: Vec<String> = emb.features.iter().map(|v| format!("{v}")).collect();
        cols.push(format!("{}", emb.label_read_frac));
        cols.push(format!("{}", emb.label_write_frac));
        writeln!(w, "{}", cols.join(","))?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derived::annotate_stream;
    use crate::slicer::{slice_stream, SlicePlan};
    use crate::trace::{Command, Stream};

    fn stream_of(commands: Vec<Command>) -> crate::derived::AnnotatedStream {
        annotate_stream(&Stream {
            stream_id: "t".to_string(),
            disk_capacity: 1 << 40,
            commands,
            family: None,
        })
    }

    fn uniform_commands(n: usize, dt: f64, size: u64) -> Vec<Command> {
        (0..n)
            .map(|i| Command {
                timestamp: i as f64 * dt,
                opcode: if i % 2 == 0 { Opcode::Read } else { Opcode::Write },
                offset: (i as u64 * size * 2) % (1 << 33),
                size,
                label: Label::Benign,
            })
            .collect()
    }

    #[test]
    fn back_average_fixed_point() {
        let s = stream_of(uniform_commands(600, 0.5, 4096));
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 100 }).unwrap();
        let mut state = BackAverageState::default();
        for slice in &slices {
            state = update_back_averages(&state, slice);
        }
        // First command of the stream has delta_t 0, so slice 0's mean is
        // 0.495; the recursion converges geometrically toward 0.5.
        assert!((state.dt_size2 - 0.5).abs() < 0.005);
        let after_one = update_back_averages(&BackAverageState::default(), &slices[0]);
        assert!((state.dt_size2 - 0.5).abs() < (after_one.dt_size2 - 0.5).abs());
    }

    #[test]
    fn back_average_one_step_recursion() {
        // Two slices with distinct constant delta-t means m1 and m2.
        let mut commands = Vec::new();
        let mut ts = 0.0;
        for i in 0..200 {
            ts += if i < 100 { 0.2 } else { 0.6 };
            commands.push(Command {
                timestamp: ts,
                opcode: Opcode::Read,
                offset: 0,
                size: 4096,
                label: Label::Benign,
            });
        }
        let s = stream_of(commands);
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 100 }).unwrap();
        let state1 = update_back_averages(&BackAverageState::default(), &slices[0]);
        let state2 = update_back_averages(&state1, &slices[1]);
        // Slice 1 mean: first command dt=0.2 (not 0: predecessor exists only
        // from command 1 on; command 0 has dt 0), so compute directly.
        let m1: f64 = slices[0].commands.iter().map(|c| c.delta_t).sum::<f64>() / 100.0;
        let m2: f64 = slices[1].commands.iter().map(|c| c.delta_t).sum::<f64>() / 100.0;
        assert!((state1.dt_size2 - m1).abs() < 1e-12);
        assert!((state2.dt_size2 - (0.8 * m1 + 0.2 * m2)).abs() < 1e-12);
    }

    #[test]
    fn effective_memory_constant() {
        let memory = 1.0 / (1.0f64 / BACK_AVERAGE_ALPHA).ln();
        assert!((memory - 4.48).abs() < 0.01);
    }

    #[test]
    fn equal_offsets_standardize_to_zero() {
        let commands: Vec<Command> = (0..50)
            .map(|i| Command {
                timestamp: i as f64,
                opcode: Opcode::Read,
                offset: 1 << 30,
                size: 4096,
                label: Label::Benign,
            })
            .collect();
        let s = stream_of(commands);
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 50 }).unwrap();
        let state = update_back_averages(&BackAverageState::default(), &slices[0]);
        let norm = normalize_attributes(&slices[0], &state);
        assert!(norm.offset_bar.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dt_bar_is_one_at_the_running_mean() {
        let s = stream_of(uniform_commands(300, 0.5, 4096));
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 100 }).unwrap();
        let mut state = BackAverageState::default();
        for slice in &slices {
            state = update_back_averages(&state, slice);
        }
        let norm = normalize_attributes(&slices[2], &state);
        // delta_t equals the back-average everywhere in a constant stream,
        // up to the slice-0 first-command zero folded into the average.
        for &v in &norm.dt_bar {
            assert!((v - 1.0).abs() < 0.02, "dt_bar {v}");
        }
    }

    #[test]
    fn timestamp_rescale_leaves_time_features_invariant() {
        // Read-then-overwrite pairs so lapse attributes are exercised too.
        let base: Vec<Command> = (0..400)
            .map(|i| Command {
                timestamp: i as f64 * 0.01,
                opcode: if i % 2 == 0 { Opcode::Read } else { Opcode::Write },
                offset: (i as u64 / 2) * 16_384,
                size: 8192,
                label: Label::Benign,
            })
            .collect();
        let scaled: Vec<Command> = base
            .iter()
            .map(|c| Command {
                timestamp: c.timestamp * 37.0,
                ..c.clone()
            })
            .collect();
        let (s1, s2) = (stream_of(base), stream_of(scaled));
        let plan = SlicePlan::ByCommand { commands: 100 };
        let (sl1, sl2) = (
            slice_stream(&s1, plan).unwrap(),
            slice_stream(&s2, plan).unwrap(),
        );
        let mut st1 = BackAverageState::default();
        let mut st2 = BackAverageState::default();
        for i in 0..sl1.len() {
            st1 = update_back_averages(&st1, &sl1[i]);
            st2 = update_back_averages(&st2, &sl2[i]);
            if i == 0 {
                continue; // warm-up slice
            }
            let n1 = normalize_attributes(&sl1[i], &st1);
            let n2 = normalize_attributes(&sl2[i], &st2);
            for (a, b) in n1.dt_bar.iter().zip(&n2.dt_bar) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in n1.lapse_bar.iter().zip(&n2.lapse_bar) {
                for k in 0..4 {
                    match (a[k], b[k]) {
                        (None, None) => {}
                        (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
                        _ => panic!("lapse presence diverged"),
                    }
                }
            }
        }
    }

    fn nominal_slice_stream() -> crate::derived::AnnotatedStream {
        stream_of(uniform_commands(16_500, 0.001, 4096))
    }

    #[test]
    fn nominal_by_command_patching() {
        let s = nominal_slice_stream();
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 16_500 }).unwrap();
        let patches = make_patches(&slices[0], PatchWindows::default_for(SliceMode::ByCommand))
            .unwrap();
        assert_eq!(patches.len(), 100);
        assert!(patches.iter().all(|p| !p.degenerate));
        assert_eq!(patches[0].start, 0);
        assert_eq!(patches[0].commands.len(), 250);
        assert_eq!(patches[99].start, 165 * 99);
        // Last window clamps to the slice end.
        assert_eq!(patches[99].commands.len(), 16_500 - 165 * 99);
        // Every command is covered.
        assert_eq!(patches[99].start + patches[99].commands.len(), 16_500);
    }

    #[test]
    fn tiny_slice_replicates_degenerate_patch() {
        let s = stream_of(uniform_commands(250, 0.001, 4096));
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 16_500 }).unwrap();
        let patches = make_patches(&slices[0], PatchWindows::default_for(SliceMode::ByCommand))
            .unwrap();
        assert_eq!(patches.len(), 100);
        assert!(patches.iter().all(|p| p.degenerate));
        assert!(patches.iter().all(|p| p.start == 0 && p.commands.len() == 250));
    }

    #[test]
    fn by_volume_patching_spans_slice() {
        // 512 MiB of 256 KiB commands.
        let n = 2048;
        let s = stream_of(uniform_commands(n, 0.001, 262_144));
        let slices = slice_stream(
            &s,
            SlicePlan::ByVolume {
                bytes: 512 * 1024 * 1024,
            },
        )
        .unwrap();
        assert_eq!(slices[0].volume(), 512 * 1024 * 1024);
        let patches = make_patches(
            &slices[0],
            PatchWindows::ByVolume {
                width: DEFAULT_PATCH_BYTES,
            },
        )
        .unwrap();
        assert_eq!(patches.len(), 100);
        // Stride ~ (512MiB - 50MB)/99 ~ 4.9MB: each window ~ 50MB of commands.
        for p in &patches {
            let v: u64 = p.commands.iter().map(|c| c.base.size).sum();
            assert!(
                (v as i64 - DEFAULT_PATCH_BYTES as i64).unsigned_abs() <= 2 * 262_144,
                "window volume {v}"
            );
        }
        // Last window reaches the slice end.
        let last = &patches[99];
        assert_eq!(last.start + last.commands.len(), n);
    }

    #[test]
    fn embedding_has_fixed_length_and_masses() {
        let s = nominal_slice_stream();
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 16_500 }).unwrap();
        let state = update_back_averages(&BackAverageState::default(), &slices[0]);
        let cfg = BinConfig::default();
        let windows = PatchWindows::default_for(SliceMode::ByCommand);
        let norm = normalize_attributes(&slices[0], &state);
        let patches = make_patches(&slices[0], windows).unwrap();
        for patch in &patches {
            let emb = embed_patch(patch, &norm, windows, &cfg, PatchFeatureMask::ALL);
            assert_eq!(emb.features.len(), EMBED_DIM);
            assert!(emb.features.iter().all(|&v| v >= 0.0));

            let n_read = patch
                .commands
                .iter()
                .filter(|c| c.base.opcode == Opcode::Read)
                .count() as f64;
            let n_write = patch.commands.len() as f64 - n_read;
            let read_hist_mass: f64 = emb.features[0..LOG_BINS].iter().sum();
            let write_hist_mass: f64 = emb.features[LOG_BINS..2 * LOG_BINS].iter().sum();
            assert!((read_hist_mass - n_read).abs() < 1e-9);
            assert!((write_hist_mass - n_write).abs() < 1e-9);

            // Size-weighted offset histograms: read+write blocks sum to the
            // patch volume in weight units.
            let volume: f64 = patch.commands.iter().map(|c| c.base.size as f64).sum();
            let offset_mass: f64 = emb.features[60..60 + 2 * NORM_BINS].iter().sum();
            assert!((offset_mass - volume / cfg.weight_unit).abs() < 1e-9);

            let dt_mass: f64 = emb.features[158..172].iter().sum();
            assert!((dt_mass - volume / cfg.weight_unit).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_reads_one_hot_histogram() {
        let commands: Vec<Command> = (0..250)
            .map(|i| Command {
                timestamp: i as f64 * 0.01,
                opcode: Opcode::Read,
                offset: i as u64 * (1 << 22),
                size: 65_536,
                label: Label::Benign,
            })
            .collect();
        let s = stream_of(commands);
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 250 }).unwrap();
        let state = update_back_averages(&BackAverageState::default(), &slices[0]);
        let windows = PatchWindows::default_for(SliceMode::ByCommand);
        let norm = normalize_attributes(&slices[0], &state);
        let patches = make_patches(&slices[0], windows).unwrap();
        let emb = embed_patch(&patches[0], &norm, windows, &BinConfig::default(), PatchFeatureMask::ALL);

        let bin = log_size_bin(65_536);
        for (i, &v) in emb.features[0..LOG_BINS].iter().enumerate() {
            assert_eq!(v, if i == bin { 250.0 } else { 0.0 });
        }
        // No writes, no overlaps: write and overlap histograms all zero.
        assert!(emb.features[LOG_BINS..2 * LOG_BINS].iter().all(|&v| v == 0.0));
        assert!(emb.features[36..60].iter().all(|&v| v == 0.0));
        // Scalar block: 250 commands in a 250-wide window.
        assert_eq!(emb.features[172], 1.0);
        assert_eq!(emb.features[173], 1.0); // all reads
        assert_eq!(emb.features[174], 0.0); // no writes
    }

    #[test]
    fn label_fractions() {
        let mk = |op, label, size| Command {
            timestamp: 0.0,
            opcode: op,
            offset: 0,
            size,
            label,
        };
        let all_benign: Vec<Command> = (0..10)
            .map(|_| mk(Opcode::Read, Label::Benign, 1000))
            .collect();
        let s = stream_of(all_benign);
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 10 }).unwrap();
        let patches = make_patches(&slices[0], PatchWindows::ByCommand { window: 10, stride: 1 })
            .unwrap();
        assert_eq!(label_patch_fractions(&patches[0]).unwrap(), (0.0, 0.0));

        let half_half: Vec<Command> = (0..10)
            .map(|i| {
                mk(
                    if i % 2 == 0 { Opcode::Read } else { Opcode::Write },
                    Label::Ransomware,
                    1000,
                )
            })
            .collect();
        let s = stream_of(half_half);
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 10 }).unwrap();
        let patches = make_patches(&slices[0], PatchWindows::ByCommand { window: 10, stride: 1 })
            .unwrap();
        assert_eq!(label_patch_fractions(&patches[0]).unwrap(), (0.5, 0.5));

        // Mixed patch checked against direct byte accounting.
        let mixed = vec![
            mk(Opcode::Read, Label::Ransomware, 3000),
            mk(Opcode::Write, Label::Ransomware, 1000),
            mk(Opcode::Read, Label::Benign, 4000),
            mk(Opcode::Write, Label::Benign, 2000),
        ];
        let s = stream_of(mixed);
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 4 }).unwrap();
        let patches = make_patches(&slices[0], PatchWindows::ByCommand { window: 4, stride: 1 })
            .unwrap();
        let (r, w) = label_patch_fractions(&patches[0]).unwrap();
        assert_eq!(r, 3000.0 / 10_000.0);
        assert_eq!(w, 1000.0 / 10_000.0);

        let unlabeled = vec![mk(Opcode::Read, Label::Unlabeled, 512)];
        let s = stream_of(unlabeled);
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 1 }).unwrap();
        let patches = make_patches(&slices[0], PatchWindows::ByCommand { window: 1, stride: 1 })
            .unwrap();
        assert_eq!(
            label_patch_fractions(&patches[0]).unwrap_err(),
            EmbedError::Unlabeled(0)
        );
    }

    #[test]
    fn embedding_ignores_disk_capacity() {
        // The same commands on a bigger disk embed identically: the scalar
        // normalizers and offset standardization are capacity-free.
        let commands = uniform_commands(500, 0.01, 8192);
        let small = annotate_stream(&Stream {
            stream_id: "t".to_string(),
            disk_capacity: 1 << 34,
            commands: commands.clone(),
            family: None,
        });
        let big = annotate_stream(&Stream {
            stream_id: "t".to_string(),
            disk_capacity: 1 << 44,
            commands,
            family: None,
        });
        let plan = SlicePlan::ByCommand { commands: 250 };
        let windows = PatchWindows::ByCommand { window: 50, stride: 3 };
        let cfg = BinConfig::default();
        for (a, b) in slice_stream(&small, plan)
            .unwrap()
            .iter()
            .zip(slice_stream(&big, plan).unwrap().iter())
        {
            let sa = update_back_averages(&BackAverageState::default(), a);
            let sb = update_back_averages(&BackAverageState::default(), b);
            let ea = embed_slice(a, &sa, windows, &cfg, PatchFeatureMask::ALL, false).unwrap();
            let eb = embed_slice(b, &sb, windows, &cfg, PatchFeatureMask::ALL, false).unwrap();
            assert_eq!(ea, eb);
        }
    }

    #[test]
    fn ablated_blocks_are_zero() {
        let s = nominal_slice_stream();
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 16_500 }).unwrap();
        let state = update_back_averages(&BackAverageState::default(), &slices[0]);
        let windows = PatchWindows::default_for(SliceMode::ByCommand);
        let norm = normalize_attributes(&slices[0], &state);
        let patches = make_patches(&slices[0], windows).unwrap();
        let cfg = BinConfig::default();
        let full = embed_patch(&patches[3], &norm, windows, &cfg, PatchFeatureMask::ALL);
        let no_offset = embed_patch(
            &patches[3],
            &norm,
            windows,
            &cfg,
            PatchFeatureMask::ALL.without("offset").unwrap(),
        );
        assert!(no_offset.features[60..130].iter().all(|&v| v == 0.0));
        assert_eq!(&no_offset.features[..60], &full.features[..60]);
        assert_eq!(&no_offset.features[130..], &full.features[130..]);
    }
}
