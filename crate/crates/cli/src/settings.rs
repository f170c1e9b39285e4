//! Flag plumbing shared by the subcommands: slicing/tokenizing/embedding
//! settings, their `key=value` sidecar persisted next to trained models so
//! prediction replays the training-time pipeline, and trace-directory
//! loading.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use nvguard::clt::{FeatureMask, TokenizerConfig, TokenizerSettings, DEFAULT_FRAME_COMMANDS};
use nvguard::plt::{
    BinConfig, PatchFeatureMask, PatchWindows, DEFAULT_PATCH_BYTES, DEFAULT_PATCH_COMMANDS,
    DEFAULT_PATCH_STRIDE,
};
use nvguard::slicer::{SliceMode, SlicePlan, DEFAULT_SLICE_BYTES, DEFAULT_SLICE_COMMANDS,
    DEFAULT_SLICE_SECONDS};
use nvguard::trace::load_trace;
use nvguard::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SliceModeArg {
    Command,
    Volume,
    Time,
}

#[derive(Debug, Clone, Args)]
pub struct SliceArgs {
    /// How to cut streams into slices.
    #[arg(long, value_enum, default_value = "command")]
    pub slice_mode: SliceModeArg,
    /// Commands per slice in command mode.
    #[arg(long, default_value_t = DEFAULT_SLICE_COMMANDS)]
    pub slice_commands: usize,
    /// Bytes per slice in volume mode.
    #[arg(long, default_value_t = DEFAULT_SLICE_BYTES)]
    pub slice_bytes: u64,
    /// Seconds per slice in time mode.
    #[arg(long, default_value_t = DEFAULT_SLICE_SECONDS)]
    pub slice_seconds: f64,
}

impl SliceArgs {
    pub fn plan(&self) -> SlicePlan {
        match self.slice_mode {
            SliceModeArg::Command => SlicePlan::ByCommand {
                commands: self.slice_commands,
            },
            SliceModeArg::Volume => SlicePlan::ByVolume {
                bytes: self.slice_bytes,
            },
            SliceModeArg::Time => SlicePlan::ByTime {
                seconds: self.slice_seconds,
            },
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TokenArgs {
    /// Commands per classifier frame.
    #[arg(long, default_value_t = DEFAULT_FRAME_COMMANDS)]
    pub frame_commands: usize,
    /// Pack each command into a single 18-bit token instead of a pair.
    #[arg(long)]
    pub single_token: bool,
    /// Comma-separated command-token fields to drop
    /// (dt,size,opcode,offset,ov,index).
    #[arg(long, value_delimiter = ',')]
    pub drop: Vec<String>,
    /// Override the bit width the offset high bits anchor to.
    #[arg(long)]
    pub offset_msb_width: Option<u32>,
}

impl TokenArgs {
    fn mask(&self) -> Result<FeatureMask> {
        let mut mask = FeatureMask::ALL;
        for field in &self.drop {
            mask = mask
                .without(field)
                .with_context(|| format!("unknown command-token field `{field}`"))?;
        }
        Ok(mask)
    }

    pub fn settings(&self) -> Result<TokenizerSettings> {
        if let Some(w) = self.offset_msb_width {
            if w < 25 {
                bail!("--offset-msb-width must be at least 25");
            }
        }
        Ok(TokenizerSettings {
            mask: self.mask()?,
            single_token: self.single_token,
            offset_msb_width: self.offset_msb_width,
        })
    }

    pub fn tokenizer(&self, capacity: u64) -> Result<TokenizerConfig> {
        Ok(self.settings()?.for_capacity(capacity)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct PatchArgs {
    /// Commands per patch window (command-mode slicing).
    #[arg(long, default_value_t = DEFAULT_PATCH_COMMANDS)]
    pub patch_window: usize,
    /// Stride between patch windows in commands.
    #[arg(long, default_value_t = DEFAULT_PATCH_STRIDE)]
    pub patch_stride: usize,
    /// Bytes per patch window (volume-mode slicing).
    #[arg(long, default_value_t = DEFAULT_PATCH_BYTES)]
    pub patch_bytes: u64,
    /// Comma-separated patch feature blocks to drop
    /// (size,ov,offset,lapse,dt,fractions).
    #[arg(long, value_delimiter = ',')]
    pub drop_patch: Vec<String>,
}

impl PatchArgs {
    pub fn windows(&self, mode: SliceMode) -> PatchWindows {
        match mode {
            SliceMode::ByVolume => PatchWindows::ByVolume {
                width: self.patch_bytes,
            },
            _ => PatchWindows::ByCommand {
                window: self.patch_window,
                stride: self.patch_stride,
            },
        }
    }

    pub fn mask(&self) -> Result<PatchFeatureMask> {
        let mut mask = PatchFeatureMask::ALL;
        for field in &self.drop_patch {
            mask = mask
                .without(field)
                .with_context(|| format!("unknown patch feature block `{field}`"))?;
        }
        Ok(mask)
    }

    pub fn bins(&self) -> BinConfig {
        BinConfig::default()
    }
}

/// Pipeline settings persisted next to a trained model, so prediction
/// replays the exact training-time preprocessing.
#[derive(Debug, Clone)]
pub struct PipelineSidecar {
    pub slice: SliceArgs,
    pub token: TokenArgs,
    pub patch: PatchArgs,
}

pub fn sidecar_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_os_string();
    s.push(".pipeline");
    PathBuf::from(s)
}

impl PipelineSidecar {
    pub fn to_text(&self) -> String {
        let mode = match self.slice.slice_mode {
            SliceModeArg::Command => "command",
            SliceModeArg::Volume => "volume",
            SliceModeArg::Time => "time",
        };
        let mut out = String::new();
        out.push_str(&format!("slice_mode={mode}\n"));
        out.push_str(&format!("slice_commands={}\n", self.slice.slice_commands));
        out.push_str(&format!("slice_bytes={}\n", self.slice.slice_bytes));
        out.push_str(&format!("slice_seconds={}\n", self.slice.slice_seconds));
        out.push_str(&format!("frame_commands={}\n", self.token.frame_commands));
        out.push_str(&format!("single_token={}\n", self.token.single_token));
        out.push_str(&format!("drop={}\n", self.token.drop.join(",")));
        if let Some(w) = self.token.offset_msb_width {
            out.push_str(&format!("offset_msb_width={w}\n"));
        }
        out.push_str(&format!("patch_window={}\n", self.patch.patch_window));
        out.push_str(&format!("patch_stride={}\n", self.patch.patch_stride));
        out.push_str(&format!("patch_bytes={}\n", self.patch.patch_bytes));
        out.push_str(&format!("drop_patch={}\n", self.patch.drop_patch.join(",")));
        out
    }

    pub fn from_text(text: &str) -> Result<PipelineSidecar> {
        let mut sidecar = PipelineSidecar {
            slice: SliceArgs {
                slice_mode: SliceModeArg::Command,
                slice_commands: DEFAULT_SLICE_COMMANDS,
                slice_bytes: DEFAULT_SLICE_BYTES,
                slice_seconds: DEFAULT_SLICE_SECONDS,
            },
            token: TokenArgs {
                frame_commands: DEFAULT_FRAME_COMMANDS,
                single_token: false,
                drop: Vec::new(),
                offset_msb_width: None,
            },
            patch: PatchArgs {
                patch_window: DEFAULT_PATCH_COMMANDS,
                patch_stride: DEFAULT_PATCH_STRIDE,
                patch_bytes: DEFAULT_PATCH_BYTES,
                drop_patch: Vec::new(),
            },
        };
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("pipeline sidecar line {}: expected key=value", idx + 1);
            };
            let csv = |v: &str| -> Vec<String> {
                v.split(',')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            };
            match key {
                "slice_mode" => {
                    sidecar.slice.slice_mode = match value {
                        "command" => SliceModeArg::Command,
                        "volume" => SliceModeArg::Volume,
                        "time" => SliceModeArg::Time,
                        other => bail!("unknown slice mode `{other}`"),
                    }
                }
                "slice_commands" => sidecar.slice.slice_commands = value.parse()?,
                "slice_bytes" => sidecar.slice.slice_bytes = value.parse()?,
                "slice_seconds" => sidecar.slice.slice_seconds = value.parse()?,
                "frame_commands" => sidecar.token.frame_commands = value.parse()?,
                "single_token" => sidecar.token.single_token = value.parse()?,
                "drop" => sidecar.token.drop = csv(value),
                "offset_msb_width" => sidecar.token.offset_msb_width = Some(value.parse()?),
                "patch_window" => sidecar.patch.patch_window = value.parse()?,
                "patch_stride" => sidecar.patch.patch_stride = value.parse()?,
                "patch_bytes" => sidecar.patch.patch_bytes = value.parse()?,
                "drop_patch" => sidecar.patch.drop_patch = csv(value),
                other => bail!("unknown pipeline sidecar key `{other}`"),
            }
        }
        Ok(sidecar)
    }
}

/// Load one trace file, or every `*.csv` under a directory (sorted by
/// name so runs are reproducible).
pub fn load_traces(path: &Path) -> Result<Vec<Stream>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no .csv traces under {}", path.display());
        }
        files
            .iter()
            .map(|f| load_trace(f).with_context(|| format!("loading {}", f.display())))
            .collect()
    } else {
        Ok(vec![load_trace(path)
            .with_context(|| format!("loading {}", path.display()))?])
    }
}
