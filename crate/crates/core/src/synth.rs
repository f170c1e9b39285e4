//! Deterministic synthetic workload generation: benign disk activity
//! mixes (sequential reads, random read/write, archive- and install-like
//! passes) and an encrypt-in-place intruder that reads file extents and
//! overwrites them, labeled at generation time. A fixed bench suite built
//! from these generators backs the end-to-end tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::trace::{Command, Label, Opcode, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub command_budget: usize,
    pub capacity: u64,
    pub file_count: usize,
    pub file_size_min: u64,
    pub file_size_max: u64,
    /// Benign mix weights; they need not sum to one.
    pub w_sequential_read: f64,
    pub w_random_rw: f64,
    pub w_archive: f64,
    pub w_install: f64,
    /// Edit-like saves: read a file, then rewrite the same extent. Produces
    /// benign write-after-read overlap, the aggregate ambiguity case.
    pub w_edit: f64,
    /// Mean inter-command gap for benign traffic, seconds.
    pub benign_gap: f64,
    /// Fraction of each extent read before it is overwritten.
    pub encrypt_read_fraction: f64,
    /// Files encrypted per burst.
    pub burst_files: usize,
    /// Benign fraction of the traffic during steady encryption: after each
    /// intruder command, benign commands follow geometrically with this
    /// continuation probability.
    pub interleave: f64,
    /// Encryption opens gently: over this many commands the benign
    /// fraction decays from `ramp_interleave` down to `interleave`.
    pub ramp_commands: usize,
    pub ramp_interleave: f64,
    /// Seconds into the stream when encryption starts.
    pub launch_time: f64,
    /// Mean inter-command gap during encryption, seconds.
    pub encrypt_gap: f64,
    /// Read/overwrite chunk size during encryption, bytes.
    pub encrypt_chunk: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            seed: 0,
            command_budget: 4000,
            capacity: 64 << 30,
            file_count: 120,
            file_size_min: 128 << 10,
            file_size_max: 4 << 20,
            w_sequential_read: 1.0,
            w_random_rw: 1.0,
            w_archive: 0.5,
            w_install: 0.5,
            w_edit: 0.7,
            benign_gap: 2e-4,
            encrypt_read_fraction: 1.0,
            burst_files: 4,
            interleave: 0.3,
            ramp_commands: 1500,
            ramp_interleave: 0.85,
            launch_time: 0.0,
            encrypt_gap: 5e-5,
            encrypt_chunk: 512 << 10,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("disk capacities differ: {0} vs {1}")]
    CapacityMismatch(u64, u64),
    #[error("spec line {line}: expected key=value, got `{got}`")]
    MalformedSpec { line: usize, got: String },
    #[error("spec key `{0}` has a bad value")]
    BadValue(String),
    #[error("unknown spec key `{0}`")]
    UnknownKey(String),
}

impl WorkloadSpec {
    /// Plain-text `key=value` rendering; every field round-trips.
    pub fn to_spec_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("command_budget", self.command_budget.to_string()),
            ("capacity", self.capacity.to_string()),
            ("file_count", self.file_count.to_string()),
            ("file_size_min", self.file_size_min.to_string()),
            ("file_size_max", self.file_size_max.to_string()),
            ("w_sequential_read", self.w_sequential_read.to_string()),
            ("w_random_rw", self.w_random_rw.to_string()),
            ("w_archive", self.w_archive.to_string()),
            ("w_install", self.w_install.to_string()),
            ("w_edit", self.w_edit.to_string()),
            ("benign_gap", self.benign_gap.to_string()),
            ("encrypt_read_fraction", self.encrypt_read_fraction.to_string()),
            ("burst_files", self.burst_files.to_string()),
            ("interleave", self.interleave.to_string()),
            ("ramp_commands", self.ramp_commands.to_string()),
            ("ramp_interleave", self.ramp_interleave.to_string()),
            ("launch_time", self.launch_time.to_string()),
            ("encrypt_gap", self.encrypt_gap.to_string()),
            ("encrypt_chunk", self.encrypt_chunk.to_string()),
        ]
    }

    pub fn from_spec_text(text: &str) -> Result<WorkloadSpec, SynthError> {
        let mut spec = WorkloadSpec::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(SynthError::MalformedSpec {
                    line: idx + 1,
                    got: line.to_string(),
                });
            };
            let bad = || SynthError::BadValue(key.to_string());
            match key {
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                "command_budget" => spec.command_budget = value.parse().map_err(|_| bad())?,
                "capacity" => spec.capacity = value.parse().map_err(|_| bad())?,
                "file_count" => spec.file_count = value.parse().map_err(|_| bad())?,
                "file_size_min" => spec.file_size_min = value.parse().map_err(|_| bad())?,
                "file_size_max" => spec.file_size_max = value.parse().map_err(|_| bad())?,
                "w_sequential_read" => spec.w_sequential_read = value.parse().map_err(|_| bad())?,
                "w_random_rw" => spec.w_random_rw = value.parse().map_err(|_| bad())?,
                "w_archive" => spec.w_archive = value.parse().map_err(|_| bad())?,
                "w_install" => spec.w_install = value.parse().map_err(|_| bad())?,
                "w_edit" => spec.w_edit = value.parse().map_err(|_| bad())?,
                "benign_gap" => spec.benign_gap = value.parse().map_err(|_| bad())?,
                "encrypt_read_fraction" => {
                    spec.encrypt_read_fraction = value.parse().map_err(|_| bad())?
                }
                "burst_files" => spec.burst_files = value.parse().map_err(|_| bad())?,
                "interleave" => spec.interleave = value.parse().map_err(|_| bad())?,
                "ramp_commands" => spec.ramp_commands = value.parse().map_err(|_| bad())?,
                "ramp_interleave" => spec.ramp_interleave = value.parse().map_err(|_| bad())?,
                "launch_time" => spec.launch_time = value.parse().map_err(|_| bad())?,
                "encrypt_gap" => spec.encrypt_gap = value.parse().map_err(|_| bad())?,
                "encrypt_chunk" => spec.encrypt_chunk = value.parse().map_err(|_| bad())?,
                other => return Err(SynthError::UnknownKey(other.to_string())),
            }
        }
        Ok(spec)
    }
}

/// Synthetic file layout: disjoint extents placed across the disk.
struct Extents {
    files: Vec<(u64, u64)>,
    scratch_cursor: u64,
    scratch_base: u64,
    capacity: u64,
}

fn make_extents(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Extents {
    // Files occupy the lower half; archive output lands in the upper half.
    let mut files = Vec::with_capacity(spec.file_count);
    let mut cursor = 1 << 20;
    let budget = spec.capacity / 2;
    for _ in 0..spec.file_count {
        let log_min = (spec.file_size_min as f64).log2();
        let log_max = (spec.file_size_max as f64).log2();
        let size = 512 * (2f64.powf(rng.gen_range(log_min..log_max)) as u64 / 512).max(1);
        if cursor + size >= budget {
            cursor = 1 << 20;
        }
        files.push((cursor, size));
        cursor += size + 512 * rng.gen_range(1..64);
    }
    Extents {
        files,
        scratch_cursor: spec.capacity / 2,
        scratch_base: spec.capacity / 2,
        capacity: spec.capacity,
    }
}

struct Generator<'a> {
    spec: &'a WorkloadSpec,
    rng: ChaCha8Rng,
    clock: f64,
    extents: Extents,
    commands: Vec<Command>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a WorkloadSpec, salt: u64) -> Generator<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt);
        let extents = make_extents(spec, &mut rng);
        Generator {
            spec,
            rng,
            clock: 0.0,
            extents,
            commands: Vec::with_capacity(spec.command_budget),
        }
    }

    fn full(&self) -> bool {
        self.commands.len() >= self.spec.command_budget
    }

    fn tick(&mut self, mean_gap: f64) {
        let u: f64 = self.rng.gen_range(0.0..1.0);
        self.clock += (-(1.0 - u).ln() * mean_gap).max(1e-7);
    }

    fn emit(&mut self, opcode: Opcode, offset: u64, size: u64, label: Label, mean_gap: f64) {
        if self.full() {
            return;
        }
        self.tick(mean_gap);
        let size = size.max(512);
        let offset = offset.min(self.extents.capacity - size);
        self.commands.push(Command {
            timestamp: self.clock,
            opcode,
            offset,
            size,
            label,
        });
    }

    fn benign_sequential_read(&mut self) {
        let (offset, size) = self.extents.files[self.rng.gen_range(0..self.extents.files.len())];
        let chunk = 128 << 10;
        let mut pos = offset;
        while pos < offset + size && !self.full() {
            let len = chunk.min(offset + size - pos);
            self.emit(Opcode::Read, pos, len, Label::Benign, self.spec.benign_gap);
            pos += len;
        }
    }

    fn benign_random_rw(&mut self) {
        let ops = self.rng.gen_range(6..24);
        for _ in 0..ops {
            if self.full() {
                return;
            }
            let (offset, size) = self.extents.files[self.rng.gen_range(0..self.extents.files.len())];
            let len = 4096u64 << self.rng.gen_range(0..4);
            let len = len.min(size);
            let pos = offset + 512 * self.rng.gen_range(0..=(size - len) / 512);
            let opcode = if self.rng.gen_bool(0.5) {
                Opcode::Read
            } else {
                Opcode::Write
            };
            self.emit(opcode, pos, len, Label::Benign, self.spec.benign_gap);
        }
    }

    fn benign_archive(&mut self) {
        // Read a file sequentially, then write its volume to scratch.
        let (offset, size) = self.extents.files[self.rng.gen_range(0..self.extents.files.len())];
        let chunk = 256 << 10;
        let mut pos = offset;
        while pos < offset + size && !self.full() {
            let len = chunk.min(offset + size - pos);
            self.emit(Opcode::Read, pos, len, Label::Benign, self.spec.benign_gap);
            pos += len;
        }
        let mut written = 0;
        while written < size && !self.full() {
            let len = chunk.min(size - written);
            if self.extents.scratch_cursor + len >= self.extents.capacity {
                self.extents.scratch_cursor = self.extents.scratch_base;
            }
            let cursor = self.extents.scratch_cursor;
            self.emit(Opcode::Write, cursor, len, Label::Benign, self.spec.benign_gap);
            self.extents.scratch_cursor += len;
            written += len;
        }
    }

    /// Read a file and save it back in place: benign traffic whose write
    /// ranges overlap the just-read extent.
    fn benign_edit(&mut self) {
        let (offset, size) = self.extents.files[self.rng.gen_range(0..self.extents.files.len())];
        let read_chunk = 128 << 10;
        let mut pos = offset;
        while pos < offset + size && !self.full() {
            let len = read_chunk.min(offset + size - pos);
            self.emit(Opcode::Read, pos, len, Label::Benign, self.spec.benign_gap);
            pos += len;
        }
        let write_chunk = 64 << 10;
        let mut pos = offset;
        while pos < offset + size && !self.full() {
            let len = write_chunk.min(offset + size - pos);
            self.emit(Opcode::Write, pos, len, Label::Benign, self.spec.benign_gap);
            pos += len;
        }
    }

    fn benign_install(&mut self) {
        // Overwrite one file sequentially with medium writes.
        let (offset, size) = self.extents.files[self.rng.gen_range(0..self.extents.files.len())];
        let chunk = 64 << 10;
        let mut pos = offset;
        while pos < offset + size && !self.full() {
            let len = chunk.min(offset + size - pos);
            self.emit(Opcode::Write, pos, len, Label::Benign, self.spec.benign_gap);
            pos += len;
        }
    }

    fn benign_pass(&mut self) {
        let weights = [
            self.spec.w_sequential_read,
            self.spec.w_random_rw,
            self.spec.w_archive,
            self.spec.w_install,
            self.spec.w_edit,
        ];
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            self.benign_sequential_read();
            return;
        }
        let mut draw = self.rng.gen_range(0.0..total);
        let mut which = 0;
        for (i, w) in weights.iter().enumerate() {
            if draw < *w {
                which = i;
                break;
            }
            draw -= w;
        }
        match which {
            0 => self.benign_sequential_read(),
            1 => self.benign_random_rw(),
            2 => self.benign_archive(),
            3 => self.benign_install(),
            _ => self.benign_edit(),
        }
    }

    /// One benign command (random read/write) used for interleaving.
    fn benign_single(&mut self) {
        let (offset, size) = self.extents.files[self.rng.gen_range(0..self.extents.files.len())];
        let len = (4096u64 << self.rng.gen_range(0..4)).min(size);
        let pos = offset + 512 * self.rng.gen_range(0..=(size - len) / 512);
        let opcode = if self.rng.gen_bool(0.5) {
            Opcode::Read
        } else {
            Opcode::Write
        };
        self.emit(opcode, pos, len, Label::Benign, self.spec.encrypt_gap);
    }

    /// Benign commands riding along with one intruder command: geometric
    /// with continuation probability `p`, so `p` is the benign share.
    fn interleave_benign(&mut self, p: f64) {
        let mut emitted = 0;
        while p > 0.0 && emitted < 12 && !self.full() && self.rng.gen_bool(p) {
            self.benign_single();
            emitted += 1;
        }
    }

    fn encrypt_file(&mut self, file: (u64, u64), interleave: f64, chunk: u64) {
        let (offset, size) = file;
        let chunk = chunk.max(512);
        let read_len = ((size as f64 * self.spec.encrypt_read_fraction) as u64 / 512 * 512)
            .clamp(512, size);
        let mut pos = offset;
        while pos < offset + read_len && !self.full() {
            let len = chunk.min(offset + read_len - pos);
            self.emit(Opcode::Read, pos, len, Label::Ransomware, self.spec.encrypt_gap);
            self.interleave_benign(interleave);
            pos += len;
        }
        let mut pos = offset;
        while pos < offset + size && !self.full() {
            let len = chunk.min(offset + size - pos);
            self.emit(Opcode::Write, pos, len, Label::Ransomware, self.spec.encrypt_gap);
            self.interleave_benign(interleave);
            pos += len;
        }
    }

    fn into_stream(self, stream_id: String, family: Option<String>) -> Stream {
        Stream {
            stream_id,
            disk_capacity: self.spec.capacity,
            commands: self.commands,
            family,
        }
    }
}

/// Purely benign stream from the configured behavior mix. Deterministic
/// given the spec seed; timestamps strictly increase.
pub fn generate_benign(spec: &WorkloadSpec, stream_id: &str) -> Stream {
    let mut generator = Generator::new(spec, 0xBE91);
    while !generator.full() {
        generator.benign_pass();
    }
    generator.into_stream(stream_id.to_string(), None)
}

/// Stream with encrypt-in-place activity: benign background until the
/// launch time, then bursts that read file extents and overwrite them,
/// interleaved with benign commands per the interleave fraction. Every
/// command is labeled at generation time.
pub fn generate_ransomware(spec: &WorkloadSpec, stream_id: &str, family: &str) -> Stream {
    let mut generator = Generator::new(spec, 0x4A11);
    while generator.clock < spec.launch_time && !generator.full() {
        generator.benign_pass();
    }
    let mut order: Vec<usize> = (0..generator.extents.files.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut generator.rng);
    let mut next = 0;
    let phase_start = generator.commands.len();
    while !generator.full() {
        for _ in 0..spec.burst_files {
            let emitted = generator.commands.len() - phase_start;
            let progress = if spec.ramp_commands == 0 {
                1.0
            } else {
                (emitted as f64 / spec.ramp_commands as f64).min(1.0)
            };
            let interleave =
                spec.ramp_interleave + (spec.interleave - spec.ramp_interleave) * progress;
            // The opening moves use save-sized transfers that blend into
            // ordinary edit traffic; the full encryption stride only
            // appears once the ramp completes.
            let chunk = if progress < 1.0 {
                spec.encrypt_chunk.min(64 << 10)
            } else {
                spec.encrypt_chunk
            };
            let file = generator.extents.files[order[next % order.len()]];
            next += 1;
            generator.encrypt_file(file, interleave, chunk);
            if generator.full() {
                break;
            }
        }
        // A short benign lull between bursts, unless running uninterleaved.
        if spec.interleave > 0.0 && !generator.full() {
            generator.benign_random_rw();
        }
    }
    generator.into_stream(stream_id.to_string(), Some(family.to_string()))
}

/// Timestamp-ordered merge with the intruder stream shifted by the launch
/// offset; labels preserved, ties keep the benign command first.
pub fn mix_streams(
    benign: &Stream,
    ransomware: &Stream,
    launch_time: f64,
) -> Result<Stream, SynthError> {
    if benign.disk_capacity != ransomware.disk_capacity {
        return Err(SynthError::CapacityMismatch(
            benign.disk_capacity,
            ransomware.disk_capacity,
        ));
    }
    let shifted = ransomware.commands.iter().map(|c| Command {
        timestamp: c.timestamp + launch_time,
        ..c.clone()
    });
    let mut merged = Vec::with_capacity(benign.commands.len() + ransomware.commands.len());
    let mut b = benign.commands.iter().cloned().peekable();
    let mut r = shifted.peekable();
    loop {
        match (b.peek(), r.peek()) {
            (Some(bc), Some(rc)) => {
                if bc.timestamp <= rc.timestamp {
                    merged.push(b.next().unwrap());
                } else {
                    merged.push(r.next().unwrap());
                }
            }
            (Some(_), None) => merged.push(b.next().unwrap()),
            (None, Some(_)) => merged.push(r.next().unwrap()),
            (None, None) => break,
        }
    }
    Ok(Stream {
        stream_id: format!("{}+{}", benign.stream_id, ransomware.stream_id),
        disk_capacity: benign.disk_capacity,
        commands: merged,
        family: ransomware.family.clone(),
    })
}

/// Total bytes written by ransomware-labeled commands.
pub fn ransomware_write_bytes(stream: &Stream) -> u64 {
    stream
        .commands
        .iter()
        .filter(|c| c.label == Label::Ransomware && c.opcode == Opcode::Write)
        .map(|c| c.size)
        .sum()
}

/// The fixed bench suite: a reproducible set of benign and infected
/// streams with ransomware families that differ in chunk size, read
/// fraction, burstiness, and pacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub benign_streams: usize,
    pub ransomware_streams: usize,
    pub commands_per_stream: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            benign_streams: 36,
            ransomware_streams: 30,
            commands_per_stream: 3200,
            seed: 20_240_601,
        }
    }
}

pub const BENCH_FAMILIES: usize = 6;

/// Family parameterizations: distinct encryption signatures per family.
fn family_spec(family: usize, base: &WorkloadSpec) -> WorkloadSpec {
    let mut spec = base.clone();
    spec.encrypt_chunk = match family % 3 {
        0 => 512 << 10,
        1 => 256 << 10,
        _ => 128 << 10,
    };
    spec.encrypt_read_fraction = [1.0, 0.95, 0.9, 1.0, 0.85, 0.92][family % BENCH_FAMILIES];
    spec.burst_files = [4, 8, 2, 6, 3, 5][family % BENCH_FAMILIES];
    spec.encrypt_gap = [5e-5, 8e-5, 3e-5, 6e-5, 1e-4, 4e-5][family % BENCH_FAMILIES];
    spec.ramp_commands = [1500, 1000, 1800, 1200, 2000, 1400][family % BENCH_FAMILIES];
    spec.ramp_interleave = [0.85, 0.8, 0.9, 0.85, 0.88, 0.82][family % BENCH_FAMILIES];
    spec
}

/// Generate the whole suite. Benign mixes rotate across four presets;
/// infected streams rotate families, launch times, and interleave
/// fractions (including near-0.5 mixes for the hard mixed slices).
pub fn generate_bench_suite(config: &BenchConfig) -> Vec<Stream> {
    let mut streams = Vec::new();
    for b in 0..config.benign_streams {
        let mut spec = WorkloadSpec {
            seed: config.seed ^ (b as u64).wrapping_mul(0x517C_C1B7_2722_0A95),
            command_budget: config.commands_per_stream,
            ..Default::default()
        };
        // Rotate mix presets so benign traffic is varied.
        match b % 4 {
            0 => {
                spec.w_sequential_read = 2.0;
                spec.w_archive = 0.2;
            }
            1 => {
                spec.w_random_rw = 2.5;
                spec.w_install = 1.0;
            }
            2 => {
                spec.w_archive = 2.0;
                spec.w_sequential_read = 0.5;
            }
            _ => {
                spec.w_edit = 1.5;
            }
        }
        streams.push(generate_benign(&spec, &format!("benign{b:03}")));
    }
    for r in 0..config.ransomware_streams {
        let family = r % BENCH_FAMILIES;
        // Launch as a fraction of the expected benign duration, so late
        // launches still leave most of the budget to the intruder.
        let duration = config.commands_per_stream as f64 * WorkloadSpec::default().benign_gap;
        let base = WorkloadSpec {
            seed: config.seed ^ 0xFEED ^ (r as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
            command_budget: config.commands_per_stream,
            launch_time: [0.0, 0.15, 0.3, 0.45, 0.6][r % 5] * duration,
            interleave: [0.2, 0.45, 0.5, 0.3, 0.55][(r / 5) % 5],
            ..Default::default()
        };
        let spec = family_spec(family, &base);
        streams.push(generate_ransomware(
            &spec,
            &format!("rw{r:03}"),
            &format!("family{family}"),
        ));
    }
    streams
}

/// Per-family stream counts, for sanity checks and reports.
pub fn family_histogram(streams: &[Stream]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for s in streams {
        if let Some(f) = &s.family {
            *h.entry(f.clone()).or_insert(0) += 1;
        }
    }
    h
}
