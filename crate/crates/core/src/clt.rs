//! Command-level tokenization: each command is quantized into 18 attribute
//! bits and packed into a pair of 10-bit tokens (a 9-bit payload plus an
//! index bit separating the two halves of the 1024-entry vocabulary).
//!
//! Payload layout, first token:  `dt_bin[8:5] size_bin[4:1] opcode[0]`.
//! Payload layout, second token: `offset_msb[8:5] offset_lsb[4:3] war[2]
//! rar[1] raw[0]`. An alternative single-token mode packs all 18 bits into
//! one token with a 2^18 vocabulary for ablation experiments.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::derived::DerivedCommand;
use crate::slicer::Slice;

pub const VOCAB_SIZE: u32 = 1024;
pub const SINGLE_TOKEN_VOCAB_SIZE: u32 = 1 << 18;
pub const DEFAULT_FRAME_COMMANDS: usize = 250;

/// Minimum capacity for which the offset bit fields are well defined
/// (21 dropped bits + 2 low bits + 4 high bits with a 2 MiB floor).
pub const MIN_CAPACITY: u64 = 1 << 25;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizeError {
    #[error("disk capacity {0} is below the {MIN_CAPACITY}-byte minimum for offset quantization")]
    CapacityTooSmall(u64),
    #[error("frame size must be >= 1")]
    ZeroFrameSize,
}

/// Feature sub-spaces that can be dropped (forced to zero before packing)
/// for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMask {
    pub dt: bool,
    pub size: bool,
    pub opcode: bool,
    pub offset: bool,
    pub ov: bool,
    pub index: bool,
}

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask {
        dt: true,
        size: true,
        opcode: true,
        offset: true,
        ov: true,
        index: true,
    };

    pub fn without(mut self, field: &str) -> Option<FeatureMask> {
        match field {
            "dt" | "delta_t" => self.dt = false,
            "size" => self.size = false,
            "opcode" => self.opcode = false,
            "offset" => self.offset = false,
            "ov" => self.ov = false,
            "index" => self.index = false,
            _ => return None,
        }
        Some(self)
    }
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask::ALL
    }
}

/// Tokenizer settings fixed per stream: disk capacity anchors the offset
/// high bits, and the mask/mode select ablation variants.
#[derive(Debug, Clone, Copy)]
pub struct TokenizerConfig {
    pub capacity: u64,
    /// Bit width the offset high bits anchor to; defaults to
    /// ceil(log2(capacity)) so the field is capacity-invariant.
    pub offset_msb_width: u32,
    pub mask: FeatureMask,
    /// Pack all 18 bits into a single token (vocabulary 2^18).
    pub single_token: bool,
}

impl TokenizerConfig {
    pub fn new(capacity: u64) -> Result<Self, TokenizeError> {
        if capacity < MIN_CAPACITY {
            return Err(TokenizeError::CapacityTooSmall(capacity));
        }
        Ok(TokenizerConfig {
            capacity,
            offset_msb_width: capacity_width(capacity),
            mask: FeatureMask::ALL,
            single_token: false,
        })
    }

    pub fn with_mask(mut self, mask: FeatureMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_single_token(mut self, single: bool) -> Self {
        self.single_token = single;
        self
    }

    pub fn vocab_size(&self) -> u32 {
        if self.single_token {
            SINGLE_TOKEN_VOCAB_SIZE
        } else {
            VOCAB_SIZE
        }
    }

    /// Tokens emitted per command.
    pub fn tokens_per_command(&self) -> usize {
        if self.single_token {
            1
        } else {
            2
        }
    }
}

pub fn capacity_width(capacity: u64) -> u32 {
    let floor = 63 - capacity.leading_zeros();
    if capacity.is_power_of_two() {
        floor
    } else {
        floor + 1
    }
}

/// Capacity-independent tokenizer settings; the per-stream config derives
/// from these plus the stream's disk capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerSettings {
    pub mask: FeatureMask,
    pub single_token: bool,
    pub offset_msb_width: Option<u32>,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings {
            mask: FeatureMask::ALL,
            single_token: false,
            offset_msb_width: None,
        }
    }
}

impl TokenizerSettings {
    pub fn for_capacity(&self, capacity: u64) -> Result<TokenizerConfig, TokenizeError> {
        let mut config = TokenizerConfig::new(capacity)?
            .with_mask(self.mask)
            .with_single_token(self.single_token);
        if let Some(w) = self.offset_msb_width {
            config.offset_msb_width = w;
        }
        Ok(config)
    }

    pub fn tokens_per_command(&self) -> usize {
        if self.single_token {
            1
        } else {
            2
        }
    }
}

/// The 18 attribute bits of one command, before packing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizedCommand {
    pub dt_bin: u8,
    pub size_bin: u8,
    pub opcode_bit: u8,
    pub offset_msb: u8,
    pub offset_lsb: u8,
    pub war_bit: u8,
    pub rar_bit: u8,
    pub raw_bit: u8,
}

/// The two tokens encoding one command. With the index feature enabled,
/// `first < 512 <= second < 1024`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPair {
    pub first: u16,
    pub second: u16,
}

/// Quantize an inter-command gap in seconds to a 4-bit log bin:
/// `min(round(ln(dt * 1e5 + 1)), 15)`, rounding half away from zero.
pub fn quantize_delta_t(dt: f64) -> u8 {
    assert!(dt >= 0.0, "delta_t must be non-negative, got {dt}");
    let v = (dt * 1e5 + 1.0).ln().round();
    (v as u8).min(15)
}

/// Quantize a command size in bytes to a 4-bit log2 bin over 512-byte
/// units, with three common sizes pinned to the spare bins:
/// 512 KiB -> 13, 128 KiB -> 14, 16 KiB -> 15.
pub fn quantize_size(size: u64) -> u8 {
    match size {
        524_288 => 13,
        131_072 => 14,
        16_384 => 15,
        s if s < 512 => 0,
        s => ((s / 512).ilog2() as u8).min(12),
    }
}

/// Quantize a byte offset into (high 4 bits within `width`, 2 bits above
/// the dropped 2 MiB-resolution low 21 bits).
pub fn quantize_offset(offset: u64, width: u32) -> (u8, u8) {
    debug_assert!(width >= 25, "offset width {width} below minimum");
    let lsb = ((offset >> 21) & 0b11) as u8;
    let msb = ((offset >> (width - 4)) & 0b1111) as u8;
    (msb, lsb)
}

/// Quantize every tokenized attribute of one annotated command.
pub fn quantize_command(dc: &DerivedCommand, config: &TokenizerConfig) -> QuantizedCommand {
    let (offset_msb, offset_lsb) = quantize_offset(dc.base.offset, config.offset_msb_width);
    QuantizedCommand {
        dt_bin: quantize_delta_t(dc.delta_t),
        size_bin: quantize_size(dc.base.size),
        opcode_bit: match dc.base.opcode {
            crate::trace::Opcode::Read => 0,
            crate::trace::Opcode::Write => 1,
        },
        offset_msb,
        offset_lsb,
        war_bit: (dc.ov[0] > 0) as u8,
        rar_bit: (dc.ov[1] > 0) as u8,
        raw_bit: (dc.ov[2] > 0) as u8,
    }
}

fn apply_mask(q: QuantizedCommand, mask: FeatureMask) -> QuantizedCommand {
    QuantizedCommand {
        dt_bin: if mask.dt { q.dt_bin } else { 0 },
        size_bin: if mask.size { q.size_bin } else { 0 },
        opcode_bit: if mask.opcode { q.opcode_bit } else { 0 },
        offset_msb: if mask.offset { q.offset_msb } else { 0 },
        offset_lsb: if mask.offset { q.offset_lsb } else { 0 },
        war_bit: if mask.ov { q.war_bit } else { 0 },
        rar_bit: if mask.ov { q.rar_bit } else { 0 },
        raw_bit: if mask.ov { q.raw_bit } else { 0 },
    }
}

/// Pack the 18 bits into the token pair, applying the ablation mask first.
pub fn pack_tokens(q: QuantizedCommand, mask: FeatureMask) -> TokenPair {
    let q = apply_mask(q, mask);
    let index_bit = mask.index as u16;
    let first = ((q.dt_bin as u16) << 5) | ((q.size_bin as u16) << 1) | q.opcode_bit as u16;
    let second = ((q.offset_msb as u16) << 5)
        | ((q.offset_lsb as u16) << 3)
        | ((q.war_bit as u16) << 2)
        | ((q.rar_bit as u16) << 1)
        | q.raw_bit as u16;
    TokenPair {
        first,
        second: (index_bit << 9) | second,
    }
}

/// Recover the 18 attribute bits from a token pair. Inverse of
/// `pack_tokens` under the full mask.
pub fn unpack_tokens(pair: TokenPair) -> QuantizedCommand {
    let first = pair.first & 0x1ff;
    let second = pair.second & 0x1ff;
    QuantizedCommand {
        dt_bin: ((first >> 5) & 0b1111) as u8,
        size_bin: ((first >> 1) & 0b1111) as u8,
        opcode_bit: (first & 1) as u8,
        offset_msb: ((second >> 5) & 0b1111) as u8,
        offset_lsb: ((second >> 3) & 0b11) as u8,
        war_bit: ((second >> 2) & 1) as u8,
        rar_bit: ((second >> 1) & 1) as u8,
        raw_bit: (second & 1) as u8,
    }
}

/// Pack all 18 bits into one token (ablation of the two-token split).
pub fn pack_single_token(q: QuantizedCommand, mask: FeatureMask) -> u32 {
    let q = apply_mask(q, mask);
    ((q.dt_bin as u32) << 14)
        | ((q.size_bin as u32) << 10)
        | ((q.opcode_bit as u32) << 9)
        | ((q.offset_msb as u32) << 5)
        | ((q.offset_lsb as u32) << 3)
        | ((q.war_bit as u32) << 2)
        | ((q.rar_bit as u32) << 1)
        | q.raw_bit as u32
}

/// Tokenize one command per the configured mode.
pub fn tokenize_command(dc: &DerivedCommand, config: &TokenizerConfig) -> TokenPair {
    pack_tokens(quantize_command(dc, config), config.mask)
}

/// A frame of consecutive commands emitted as a flat token sequence,
/// first-token-then-second-token per command.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFrame {
    /// Index of the frame's first command within its slice.
    pub start: usize,
    pub commands: usize,
    pub tokens: Vec<u32>,
}

/// Split a slice into consecutive frames of `frame_size` commands (the last
/// frame may be short) and tokenize each.
pub fn tokenize_frame(
    slice: &Slice<'_>,
    frame_size: usize,
    config: &TokenizerConfig,
) -> Result<Vec<TokenFrame>, TokenizeError> {
    if frame_size == 0 {
        return Err(TokenizeError::ZeroFrameSize);
    }
    let mut frames = Vec::with_capacity(slice.len().div_ceil(frame_size));
    for (chunk_idx, chunk) in slice.commands.chunks(frame_size).enumerate() {
        let mut tokens = Vec::with_capacity(chunk.len() * config.tokens_per_command());
        for dc in chunk {
            let q = quantize_command(dc, config);
            if config.single_token {
                tokens.push(pack_single_token(q, config.mask));
            } else {
                let pair = pack_tokens(q, config.mask);
                tokens.push(pair.first as u32);
                tokens.push(pair.second as u32);
            }
        }
        frames.push(TokenFrame {
            start: chunk_idx * frame_size,
            commands: chunk.len(),
            tokens,
        });
    }
    Ok(frames)
}

/// Token dump: one frame per line, space-separated base-10 ids.
pub fn write_token_dump(frames: &[TokenFrame], path: &Path) -> std::io::Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for frame in frames {
        let line: Vec<String> = frame.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()
}
