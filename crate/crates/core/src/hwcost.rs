//! Analytic calculator for model parameter counts, forward-pass
//! multiplication counts, and deployment estimates (latency, throughput,
//! IOPS, gate area, DRAM footprint) of the two sequence models.
//!
//! All arithmetic is exact integer accounting over the architecture: token
//! embedding table (or input projection), positional encoding, per-layer
//! query/key/value matrices, the two feed-forward matrices, the four
//! per-layer normalization vectors, and the output head.

use crate::nn::model::{HeadKind, TransformerConfig};

/// Half-precision multiplier area in gates.
pub const GATES_PER_MULTIPLIER: u64 = 2_000;
/// Bytes per parameter when weights are stored in half precision.
pub const BYTES_PER_PARAMETER: u64 = 2;

pub const DEFAULT_MULTIPLIERS: u64 = 256;
pub const DEFAULT_CLOCK_HZ: u64 = 300_000_000;

/// Exact parameter count of a configuration, itemized the same way the
/// instantiated model allocates tensors.
pub fn count_parameters(config: &TransformerConfig) -> u64 {
    let embed = config.embed_dim as u64;
    let ff = config.ff_dim as u64;
    let layers = config.layers as u64;
    let context = config.context_tokens as u64;

    let input = match config.head {
        HeadKind::CltHead => config.vocab_size as u64 * embed,
        HeadKind::PltHead => config.input_dim as u64 * embed,
    };
    let positional = context * embed;
    let per_layer = 3 * embed * embed + 2 * embed * ff + 4 * embed;
    let head = match config.head {
        // Scalar projection (weights + bias) plus the width-2 convolution.
        HeadKind::CltHead => (embed + 1) + 2,
        // Two-logit projection with bias.
        HeadKind::PltHead => 2 * embed + 2,
    };
    input + positional + layers * per_layer + head
}

/// Exact multiplication count of one forward pass over `input_length`
/// tokens: input projection (dense input only), per-layer Q/K/V products,
/// the two attention matrix products, the feed-forward products, and the
/// head projection.
pub fn count_multiplications(config: &TransformerConfig, input_length: usize) -> u64 {
    assert!(
        input_length <= config.context_tokens,
        "input length {input_length} exceeds context {}",
        config.context_tokens
    );
    let n = input_length as u64;
    let embed = config.embed_dim as u64;
    let ff = config.ff_dim as u64;
    let layers = config.layers as u64;

    let input = match config.head {
        HeadKind::CltHead => 0, // table lookup
        HeadKind::PltHead => n * config.input_dim as u64 * embed,
    };
    let qkv = 3 * n * embed * embed;
    let attention = 2 * n * n * embed;
    let feed_forward = 2 * n * embed * ff;
    let head = match config.head {
        HeadKind::CltHead => n * embed,
        HeadKind::PltHead => n * embed * 2,
    };
    input + layers * (qkv + attention + feed_forward) + head
}

/// Deployment estimate for a model running on a fixed multiplier array.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub parameters: u64,
    pub multiplications: u64,
    pub dram_bytes: u64,
    pub latency_seconds: f64,
    pub throughput_bytes_per_second: f64,
    pub iops: f64,
    pub gates: u64,
    pub multipliers: u64,
    pub clock_hz: u64,
    pub bytes_per_pass: u64,
    pub commands_per_pass: u64,
    /// Caveat attached to the report, when one applies.
    pub note: Option<&'static str>,
}

/// Derive latency/throughput/IOPS/gates/DRAM from the exact counts:
/// latency = multiplications / (multipliers * clock), throughput and IOPS
/// divide the per-pass traffic by it, gate area charges 2K gates per
/// half-precision multiplier, DRAM charges 2 bytes per parameter.
pub fn estimate_deployment(
    parameters: u64,
    multiplications: u64,
    multipliers: u64,
    clock_hz: u64,
    bytes_per_pass: u64,
    commands_per_pass: u64,
) -> CostReport {
    assert!(multipliers > 0 && clock_hz > 0, "deployment needs positive rates");
    let latency = multiplications as f64 / (multipliers as f64 * clock_hz as f64);
    CostReport {
        parameters,
        multiplications,
        dram_bytes: BYTES_PER_PARAMETER * parameters,
        latency_seconds: latency,
        throughput_bytes_per_second: bytes_per_pass as f64 / latency,
        iops: commands_per_pass as f64 / latency,
        gates: multipliers * GATES_PER_MULTIPLIER,
        multipliers,
        clock_hz,
        bytes_per_pass,
        commands_per_pass,
        note: None,
    }
}

/// Typical sequential workload assumed per command when quoting the
/// command-level model's throughput.
pub const SEQUENTIAL_BYTES_PER_COMMAND: u64 = 256 * 1024;

/// Cost report for a configuration at its full context length, with the
/// per-pass traffic the model is designed to cover.
pub fn model_cost(config: &TransformerConfig, multipliers: u64, clock_hz: u64) -> CostReport {
    let parameters = count_parameters(config);
    let multiplications = count_multiplications(config, config.context_tokens);
    let (bytes_per_pass, commands_per_pass) = match config.head {
        HeadKind::CltHead => {
            let commands = (config.context_tokens / 2) as u64;
            (commands * SEQUENTIAL_BYTES_PER_COMMAND, commands)
        }
        // One pass covers a full volume slice.
        HeadKind::PltHead => (
            crate::slicer::DEFAULT_SLICE_BYTES,
            crate::slicer::DEFAULT_SLICE_COMMANDS as u64,
        ),
    };
    let mut report = estimate_deployment(
        parameters,
        multiplications,
        multipliers,
        clock_hz,
        bytes_per_pass,
        commands_per_pass,
    );
    if config.head == HeadKind::PltHead {
        report.note = Some(
            "parameter count is the exact itemized sum; coarser 20M/40MB round-ups overstate it",
        );
    }
    report
}

impl CostReport {
    /// Aligned text rendering for the CLI.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.rows() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    fn rows(&self) -> Vec<(&'static str, String)> {
        let mut rows = vec![
            ("parameters", self.parameters.to_string()),
            ("multiplications_per_pass", self.multiplications.to_string()),
            ("dram_bytes", self.dram_bytes.to_string()),
            ("latency_seconds", format!("{:.6}", self.latency_seconds)),
            (
                "throughput_gb_per_second",
                format!("{:.2}", self.throughput_bytes_per_second / 1e9),
            ),
            ("iops", format!("{:.0}", self.iops)),
            ("gates", self.gates.to_string()),
            ("multipliers", self.multipliers.to_string()),
            ("clock_hz", self.clock_hz.to_string()),
            ("bytes_per_pass", self.bytes_per_pass.to_string()),
            ("commands_per_pass", self.commands_per_pass.to_string()),
        ];
        if let Some(note) = self.note {
            rows.push(("note", note.to_string()));
        }
        rows
    }
}
