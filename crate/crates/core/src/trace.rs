//! Command/stream data model and the on-disk trace format.
//!
//! A trace is a UTF-8 CSV with header `timestamp,opcode,offset,size,label`,
//! one command per line. `timestamp` is decimal seconds, `opcode` is `R` or
//! `W`, `offset` and `size` are base-10 byte counts, `label` is `0` (benign),
//! `1` (ransomware), or empty (unlabeled). Disk capacity and an optional
//! family tag live in a sidecar `<trace>.meta` file with `key=value` lines.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Read,
    Write,
}

impl Opcode {
    pub fn letter(self) -> char {
        match self {
            Opcode::Read => 'R',
            Opcode::Write => 'W',
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Ground-truth origin of a command. `Unlabeled` is deliberately distinct
/// from `Benign`: evaluation refuses to score unlabeled data instead of
/// silently treating it as benign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Benign,
    Ransomware,
    Unlabeled,
}

/// One NVMe command: when it was issued, what it does, and which byte
/// range `[offset, offset + size)` it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub timestamp: f64,
    pub opcode: Opcode,
    pub offset: u64,
    pub size: u64,
    pub label: Label,
}

impl Command {
    pub fn end(&self) -> u64 {
        self.offset + self.size
    }

    /// Byte overlap between this command's range and `[offset, offset+size)`.
    pub fn overlap(&self, offset: u64, size: u64) -> u64 {
        let lo = self.offset.max(offset);
        let hi = self.end().min(offset + size);
        hi.saturating_sub(lo)
    }
}

/// An ordered sequence of commands sent to one disk, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub stream_id: String,
    pub disk_capacity: u64,
    pub commands: Vec<Command>,
    /// Ransomware family tag, used for group-held-out splits.
    pub family: Option<String>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected header `timestamp,opcode,offset,size,label`, got `{got}`")]
    BadHeader { line: usize, got: String },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: unknown opcode letter `{got}` (expected R or W)")]
    UnknownOpcode { line: usize, got: String },
    #[error("line {line}: timestamp {ts} decreases below preceding {prev}")]
    TimestampRegression { line: usize, ts: f64, prev: f64 },
    #[error("line {line}: offset {offset} + size {size} exceeds disk capacity {capacity}")]
    BeyondCapacity {
        line: usize,
        offset: u64,
        size: u64,
        capacity: u64,
    },
    #[error("line {line}: size must be >= 1")]
    ZeroSize { line: usize },
    #[error("{path}: missing `capacity_bytes` in metadata")]
    MissingCapacity { path: String },
    #[error("{path} line {line}: malformed metadata line `{got}` (expected key=value)")]
    MalformedMeta {
        path: String,
        line: usize,
        got: String,
    },
}

pub const TRACE_HEADER: &str = "timestamp,opcode,offset,size,label";

fn io_err(path: &Path, source: std::io::Error) -> TraceError {
    TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parse a trace CSV into a `Stream`, validating as it reads. Command order
/// in the file is preserved; equal timestamps are allowed and keep file
/// order. Line numbers in errors are 1-based and count the header.
pub fn parse_trace(path: &Path, capacity: u64) -> Result<Stream, TraceError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);

    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| io_err(path, e))?;
    let header = header.trim_end();
    if header != TRACE_HEADER {
        return Err(TraceError::BadHeader {
            line: 1,
            got: header.to_string(),
        });
    }

    let stream_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".to_string());

    let mut commands = Vec::new();
    let mut prev_ts = f64::NEG_INFINITY;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let command = parse_row(&line, line_no)?;
        if command.timestamp < prev_ts {
            return Err(TraceError::TimestampRegression {
                line: line_no,
                ts: command.timestamp,
                prev: prev_ts,
            });
        }
        if command.size == 0 {
            return Err(TraceError::ZeroSize { line: line_no });
        }
        if command.offset.checked_add(command.size).is_none()
            || command.offset + command.size > capacity
        {
            return Err(TraceError::BeyondCapacity {
                line: line_no,
                offset: command.offset,
                size: command.size,
                capacity,
            });
        }
        prev_ts = command.timestamp;
        commands.push(command);
    }

    Ok(Stream {
        stream_id,
        disk_capacity: capacity,
        commands,
        family: None,
    })
}

fn parse_row(line: &str, line_no: usize) -> Result<Command, TraceError> {
    let mut fields = line.split(',');
    let mut next = |name: &str| {
        fields.next().ok_or_else(|| TraceError::MalformedRow {
            line: line_no,
            reason: format!("missing field `{name}`"),
        })
    };

    let ts_raw = next("timestamp")?;
    let timestamp: f64 = ts_raw.parse().map_err(|_| TraceError::MalformedRow {
        line: line_no,
        reason: format!("bad timestamp `{ts_raw}`"),
    })?;
    if !timestamp.is_finite() || timestamp < 0.0 {
        return Err(TraceError::MalformedRow {
            line: line_no,
            reason: format!("timestamp `{ts_raw}` must be a non-negative real"),
        });
    }

    let op_raw = next("opcode")?;
    let opcode = match op_raw {
        "R" => Opcode::Read,
        "W" => Opcode::Write,
        other => {
            return Err(TraceError::UnknownOpcode {
                line: line_no,
                got: other.to_string(),
            })
        }
    };

    let off_raw = next("offset")?;
    let offset: u64 = off_raw.parse().map_err(|_| TraceError::MalformedRow {
        line: line_no,
        reason: format!("bad offset `{off_raw}`"),
    })?;

    let size_raw = next("size")?;
    let size: u64 = size_raw.parse().map_err(|_| TraceError::MalformedRow {
        line: line_no,
        reason: format!("bad size `{size_raw}`"),
    })?;

    let label_raw = next("label")?;
    let label = match label_raw {
        "" => Label::Unlabeled,
        "0" => Label::Benign,
        "1" => Label::Ransomware,
        other => {
            return Err(TraceError::MalformedRow {
                line: line_no,
                reason: format!("bad label `{other}` (expected 0, 1, or empty)"),
            })
        }
    };

    if fields.next().is_some() {
        return Err(TraceError::MalformedRow {
            line: line_no,
            reason: "too many fields".to_string(),
        });
    }

    Ok(Command {
        timestamp,
        opcode,
        offset,
        size,
        label,
    })
}

/// Write a stream as trace CSV plus its `.meta` sidecar. Round-trips with
/// `parse_trace` field for field.
pub fn serialize_trace(stream: &Stream, path: &Path) -> Result<(), TraceError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{TRACE_HEADER}").map_err(|e| io_err(path, e))?;
    for c in &stream.commands {
        let label = match c.label {
            Label::Benign => "0",
            Label::Ransomware => "1",
            Label::Unlabeled => "",
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            format_timestamp(c.timestamp),
            c.opcode.letter(),
            c.offset,
            c.size,
            label
        )
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;

    write_meta(stream, &meta_path(path))
}

/// Timestamps are printed with enough digits to round-trip f64 exactly.
fn format_timestamp(ts: f64) -> String {
    let short = format!("{ts}");
    if short.parse::<f64>() == Ok(ts) {
        short
    } else {
        format!("{ts:.17}")
    }
}

pub fn meta_path(trace_path: &Path) -> std::path::PathBuf {
    let mut s = trace_path.as_os_str().to_os_string();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

pub fn write_meta(stream: &Stream, path: &Path) -> Result<(), TraceError> {
    let mut out = format!("capacity_bytes={}\n", stream.disk_capacity);
    if let Some(family) = &stream.family {
        out.push_str(&format!("family={family}\n"));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Sidecar metadata: disk capacity (required) and family tag (optional).
pub fn read_meta(path: &Path) -> Result<(u64, Option<String>), TraceError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut capacity = None;
    let mut family = None;
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(TraceError::MalformedMeta {
                path: path.display().to_string(),
                line: idx + 1,
                got: line.to_string(),
            });
        };
        match key {
            "capacity_bytes" => {
                capacity = Some(value.parse().map_err(|_| TraceError::MalformedMeta {
                    path: path.display().to_string(),
                    line: idx + 1,
                    got: line.to_string(),
                })?)
            }
            "family" => family = Some(value.to_string()),
            _ => {}
        }
    }
    let capacity = capacity.ok_or_else(|| TraceError::MissingCapacity {
        path: path.display().to_string(),
    })?;
    Ok((capacity, family))
}

/// Parse a trace using its `.meta` sidecar for capacity and family.
pub fn load_trace(path: &Path) -> Result<Stream, TraceError> {
    let (capacity, family) = read_meta(&meta_path(path))?;
    let mut stream = parse_trace(path, capacity)?;
    stream.family = family;
    Ok(stream)
}

/// One invariant violation found by `validate_stream`. Violations are data,
/// not errors: an invalid stream still parses and can be inspected.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub command_index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.command_index {
            Some(i) => write!(f, "command {}: {}", i, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Check every stream invariant, returning an empty list iff they all hold.
pub fn validate_stream(stream: &Stream) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut prev_ts = f64::NEG_INFINITY;
    for (i, c) in stream.commands.iter().enumerate() {
        if c.size == 0 {
            violations.push(Violation {
                command_index: Some(i),
                message: "size must be >= 1".to_string(),
            });
        }
        if c.offset.checked_add(c.size).is_none()
            || c.offset.saturating_add(c.size) > stream.disk_capacity
        {
            violations.push(Violation {
                command_index: Some(i),
                message: format!(
                    "range [{}, {}) exceeds disk capacity {}",
                    c.offset,
                    c.offset.saturating_add(c.size),
                    stream.disk_capacity
                ),
            });
        }
        if !c.timestamp.is_finite() || c.timestamp < 0.0 {
            violations.push(Violation {
                command_index: Some(i),
                message: format!("timestamp {} must be a non-negative real", c.timestamp),
            });
        }
        if c.timestamp < prev_ts {
            violations.push(Violation {
                command_index: Some(i),
                message: format!("timestamp {} decreases below {}", c.timestamp, prev_ts),
            });
        }
        prev_ts = c.timestamp;
    }
    violations
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), contents).unwrap();
        f
    }

    #[test]
    fn empty_file_parses_to_empty_stream() {
        let f = write_temp("timestamp,opcode,offset,size,label\n");
        let s = parse_trace(f.path(), 1 << 30).unwrap();
        assert_eq!(s.commands.len(), 0);
    }

    #[test]
    fn single_row_identity() {
        let f = write_temp("timestamp,opcode,offset,size,label\n0.0,R,0,512,0\n");
        let s = parse_trace(f.path(), 1 << 30).unwrap();
        assert_eq!(s.commands.len(), 1);
        let c = &s.commands[0];
        assert_eq!(c.opcode, Opcode::Read);
        assert_eq!(c.offset, 0);
        assert_eq!(c.size, 512);
        assert_eq!(c.label, Label::Benign);
        assert_eq!(c.timestamp, 0.0);
    }

    #[test]
    fn timestamp_regression_names_the_row() {
        let f = write_temp(
            "timestamp,opcode,offset,size,label\n0.0,R,0,512,0\n1.0,W,512,512,0\n0.5,R,0,512,0\n",
        );
        let err = parse_trace(f.path(), 1 << 30).unwrap_err();
        match err {
            TraceError::TimestampRegression { line, .. } => assert_eq!(line, 4),
            other => panic!("expected timestamp regression, got {other}"),
        }
    }

    #[test]
    fn unknown_opcode_rejected() {
        let f = write_temp("timestamp,opcode,offset,size,label\n0.0,X,0,512,0\n");
        assert!(matches!(
            parse_trace(f.path(), 1 << 30),
            Err(TraceError::UnknownOpcode { line: 2, .. })
        ));
    }

    #[test]
    fn over_capacity_rejected() {
        let f = write_temp("timestamp,opcode,offset,size,label\n0.0,R,1024,512,0\n");
        assert!(matches!(
            parse_trace(f.path(), 1024),
            Err(TraceError::BeyondCapacity { line: 2, .. })
        ));
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let f = write_temp(
            "timestamp,opcode,offset,size,label\n1.0,R,0,512,0\n1.0,W,4096,512,1\n",
        );
        let s = parse_trace(f.path(), 1 << 30).unwrap();
        assert_eq!(s.commands[0].opcode, Opcode::Read);
        assert_eq!(s.commands[1].opcode, Opcode::Write);
    }

    #[test]
    fn empty_stream_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let s = Stream {
            stream_id: "t".to_string(),
            disk_capacity: 1 << 30,
            commands: vec![],
            family: None,
        };
        serialize_trace(&s, &path).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unlabeled_round_trips_through_empty_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let s = Stream {
            stream_id: "t".to_string(),
            disk_capacity: 1 << 30,
            commands: vec![Command {
                timestamp: 0.25,
                opcode: Opcode::Write,
                offset: 0,
                size: 4096,
                label: Label::Unlabeled,
            }],
            family: Some("demo".to_string()),
        };
        serialize_trace(&s, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(','));
        let back = load_trace(&path).unwrap();
        assert_eq!(back.commands[0].label, Label::Unlabeled);
        assert_eq!(back.family.as_deref(), Some("demo"));
    }

    #[test]
    fn validate_flags_zero_size_and_capacity() {
        let s = Stream {
            stream_id: "t".to_string(),
            disk_capacity: 4096,
            commands: vec![
                Command {
                    timestamp: 0.0,
                    opcode: Opcode::Read,
                    offset: 0,
                    size: 0,
                    label: Label::Benign,
                },
                Command {
                    timestamp: 1.0,
                    opcode: Opcode::Write,
                    offset: 4000,
                    size: 512,
                    label: Label::Benign,
                },
            ],
            family: None,
        };
        let v = validate_stream(&s);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].command_index, Some(0));
        assert_eq!(v[1].command_index, Some(1));
    }

    #[test]
    fn valid_stream_has_no_violations() {
        let s = Stream {
            stream_id: "t".to_string(),
            disk_capacity: 1 << 20,
            commands: vec![Command {
                timestamp: 0.0,
                opcode: Opcode::Read,
                offset: 0,
                size: 512,
                label: Label::Benign,
            }],
            family: None,
        };
        assert!(validate_stream(&s).is_empty());
    }

    pub(crate) fn arb_stream(max_len: usize) -> impl Strategy<Value = Stream> {
        let capacity = 1u64 << 30;
        let cmd = (
            0.0f64..1000.0,
            prop::bool::ANY,
            0u64..(capacity - (1 << 21)),
            1u64..(1 << 21),
            0u8..3,
        );
        prop::collection::vec(cmd, 0..max_len).prop_map(move |rows| {
            let mut ts = 0.0;
            let commands = rows
                .into_iter()
                .map(|(dt, is_write, offset, size, label)| {
                    ts += dt;
                    Command {
                        timestamp: ts,
                        opcode: if is_write { Opcode::Write } else { Opcode::Read },
                        offset,
                        size,
                        label: match label {
                            0 => Label::Benign,
                            1 => Label::Ransomware,
                            _ => Label::Unlabeled,
                        },
                    }
                })
                .collect();
            Stream {
                stream_id: "prop".to_string(),
                disk_capacity: capacity,
                commands,
                family: None,
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn parse_serialize_round_trip(s in arb_stream(40)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("prop.csv");
            serialize_trace(&s, &path).unwrap();
            let back = parse_trace(&path, s.disk_capacity).unwrap();
            prop_assert_eq!(back.commands, s.commands);
        }
    }
}
