//! Per-command derived attributes: byte overlaps against the latest earlier
//! command of each opcode pair, the time lapse to that command, and the
//! inter-command time difference.
//!
//! For a command `c` and a pair `(opcode(c), p)`, the annotation finds the
//! latest earlier command `c'` with `opcode(c') = p` whose byte range
//! intersects `c`'s, and records the intersection volume and
//! `timestamp(c) - timestamp(c')`. Ties in timestamp resolve to the larger
//! stream index. The fast path keeps one ordered interval map per opcode
//! storing, for every byte, the index of the last command of that opcode
//! that touched it; correctness is pinned by `last_access_oracle`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Bound::{Excluded, Included, Unbounded};
use std::path::Path;

use crate::trace::{Command, Opcode, Stream, TraceError};

/// Opcode pair `(current, earlier)` for overlap tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OverlapPair {
    /// Write after read `(W, R)`, the overwrite signature.
    War,
    /// Read after read `(R, R)`.
    Rar,
    /// Read after write `(R, W)`.
    Raw,
    /// Write after write `(W, W)`.
    Waw,
}

pub const OVERLAP_PAIRS: [OverlapPair; 4] = [
    OverlapPair::War,
    OverlapPair::Rar,
    OverlapPair::Raw,
    OverlapPair::Waw,
];

impl OverlapPair {
    pub fn index(self) -> usize {
        match self {
            OverlapPair::War => 0,
            OverlapPair::Rar => 1,
            OverlapPair::Raw => 2,
            OverlapPair::Waw => 3,
        }
    }

    /// Opcode the current command must carry for this pair to apply.
    pub fn current(self) -> Opcode {
        match self {
            OverlapPair::War | OverlapPair::Waw => Opcode::Write,
            OverlapPair::Rar | OverlapPair::Raw => Opcode::Read,
        }
    }

    /// Opcode of the earlier command searched for.
    pub fn earlier(self) -> Opcode {
        match self {
            OverlapPair::War | OverlapPair::Rar => Opcode::Read,
            OverlapPair::Raw | OverlapPair::Waw => Opcode::Write,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OverlapPair::War => "war",
            OverlapPair::Rar => "rar",
            OverlapPair::Raw => "raw",
            OverlapPair::Waw => "waw",
        }
    }
}

/// A command plus its derived attributes. `ov`/`lapse` are indexed by
/// `OverlapPair::index()`; a lapse is present iff the overlap is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedCommand {
    pub base: Command,
    /// Time since the preceding command in the stream; 0 for the first.
    pub delta_t: f64,
    pub ov: [u64; 4],
    pub lapse: [Option<f64>; 4],
}

impl DerivedCommand {
    pub fn ov_war(&self) -> u64 {
        self.ov[OverlapPair::War.index()]
    }

    pub fn ov_rar(&self) -> u64 {
        self.ov[OverlapPair::Rar.index()]
    }

    /// Write whose range intersects an earlier read.
    pub fn is_war(&self) -> bool {
        self.ov_war() > 0
    }

    /// Read whose range intersects an earlier read.
    pub fn is_rar(&self) -> bool {
        self.ov_rar() > 0
    }

    /// Neither an overwrite nor a re-read.
    pub fn is_rest(&self) -> bool {
        !self.is_war() && !self.is_rar()
    }
}

/// A stream with every command annotated, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedStream {
    pub stream_id: String,
    pub disk_capacity: u64,
    pub family: Option<String>,
    pub commands: Vec<DerivedCommand>,
}

#[derive(Debug, Clone, Copy)]
struct Touch {
    end: u64,
    cmd: u32,
}

/// Ordered interval map from byte ranges to the index of the last command
/// that touched them. Intervals are disjoint; inserts split or replace
/// whatever they cover.
#[derive(Debug, Default)]
struct LastTouchMap {
    map: BTreeMap<u64, Touch>,
}

impl LastTouchMap {
    /// Largest command index among intervals intersecting `[start, end)`.
    fn latest_overlapping(&self, start: u64, end: u64) -> Option<u32> {
        let mut best = None;
        if let Some((_, t)) = self.map.range((Unbounded, Included(start))).next_back() {
            if t.end > start {
                best = Some(t.cmd);
            }
        }
        for (_, t) in self.map.range((Excluded(start), Excluded(end))) {
            best = Some(best.map_or(t.cmd, |b: u32| b.max(t.cmd)));
        }
        best
    }

    fn insert(&mut self, start: u64, end: u64, cmd: u32) {
        let mut displaced = Vec::new();
        if let Some((&k, &t)) = self.map.range((Unbounded, Included(start))).next_back() {
            if t.end > start {
                displaced.push((k, t));
            }
        }
        for (&k, &t) in self.map.range((Excluded(start), Excluded(end))) {
            displaced.push((k, t));
        }
        for (k, t) in displaced {
            self.map.remove(&k);
            if k < start {
                self.map.insert(k, Touch { end: start, cmd: t.cmd });
            }
            if t.end > end {
                self.map.insert(end, Touch { end: t.end, cmd: t.cmd });
            }
        }
        self.map.insert(start, Touch { end, cmd });
    }
}

/// Annotate every command of a stream with overlaps, lapses, and delta-t.
/// Output order equals input order. The stream must satisfy
/// `validate_stream`; overlap state never resets within a stream.
pub fn annotate_stream(stream: &Stream) -> AnnotatedStream {
    let mut read_map = LastTouchMap::default();
    let mut write_map = LastTouchMap::default();
    let mut commands = Vec::with_capacity(stream.commands.len());
    let mut prev_ts = None;

    for (i, c) in stream.commands.iter().enumerate() {
        let start = c.offset;
        let end = c.end();
        let mut ov = [0u64; 4];
        let mut lapse = [None; 4];
        for pair in OVERLAP_PAIRS {
            if pair.current() != c.opcode {
                continue;
            }
            let map = match pair.earlier() {
                Opcode::Read => &read_map,
                Opcode::Write => &write_map,
            };
            if let Some(idx) = map.latest_overlapping(start, end) {
                let earlier = &stream.commands[idx as usize];
                let overlap = earlier.overlap(start, c.size);
                debug_assert!(overlap > 0);
                ov[pair.index()] = overlap;
                lapse[pair.index()] = Some(c.timestamp - earlier.timestamp);
            }
        }
        let delta_t = match prev_ts {
            Some(prev) => c.timestamp - prev,
            None => 0.0,
        };
        prev_ts = Some(c.timestamp);

        match c.opcode {
            Opcode::Read => read_map.insert(start, end, i as u32),
            Opcode::Write => write_map.insert(start, end, i as u32),
        }

        commands.push(DerivedCommand {
            base: c.clone(),
            delta_t,
            ov,
            lapse,
        });
    }

    AnnotatedStream {
        stream_id: stream.stream_id.clone(),
        disk_capacity: stream.disk_capacity,
        family: stream.family.clone(),
        commands,
    }
}

/// Reference oracle: brute-force backward scan for the latest earlier
/// command of the matching opcode that intersects command `index`.
/// Independent of the interval-map path; used to pin its correctness.
pub fn last_access_oracle(
    stream: &Stream,
    index: usize,
    pair: OverlapPair,
) -> (u64, Option<f64>) {
    let c = &stream.commands[index];
    if pair.current() != c.opcode {
        return (0, None);
    }
    for j in (0..index).rev() {
        let earlier = &stream.commands[j];
        if earlier.opcode != pair.earlier() {
            continue;
        }
        let overlap = earlier.overlap(c.offset, c.size);
        if overlap > 0 {
            return (overlap, Some(c.timestamp - earlier.timestamp));
        }
    }
    (0, None)
}

pub const ANNOTATED_HEADER: &str = "timestamp,opcode,offset,size,label,delta_t,\
ov_war,ov_rar,ov_raw,ov_waw,lapse_war,lapse_rar,lapse_raw,lapse_waw";

/// Export base plus derived columns; absent lapses become empty fields.
pub fn write_annotated_csv(annotated: &AnnotatedStream, path: &Path) -> Result<(), TraceError> {
    let file = fs::File::create(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    let io = |e| TraceError::Io {
        path: path.display().to_string(),
        source: e,
    };
    writeln!(w, "{ANNOTATED_HEADER}").map_err(io)?;
    for dc in &annotated.commands {
        let c = &dc.base;
        let label = match c.label {
            crate::trace::Label::Benign => "0",
            crate::trace::Label::Ransomware => "1",
            crate::trace::Label::Unlabeled => "",
        };
        let lapses: Vec<String> = dc
            .lapse
            .iter()
            .map(|l| l.map(|v| format!("{v}")).unwrap_or_default())
            .collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.timestamp,
            c.opcode.letter(),
            c.offset,
            c.size,
            label,
            dc.delta_t,
            dc.ov[0],
            dc.ov[1],
            dc.ov[2],
            dc.ov[3],
            lapses.join(",")
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Label;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cmd(ts: f64, opcode: Opcode, offset: u64, size: u64) -> Command {
        Command {
            timestamp: ts,
            opcode,
            offset,
            size,
            label: Label::Benign,
        }
    }

    fn stream(commands: Vec<Command>) -> Stream {
        Stream {
            stream_id: "t".to_string(),
            disk_capacity: 1 << 40,
            commands,
            family: None,
        }
    }

    #[test]
    fn single_command_has_no_overlaps() {
        let s = stream(vec![cmd(0.0, Opcode::Write, 0, 4096)]);
        let a = annotate_stream(&s);
        assert_eq!(a.commands[0].ov, [0; 4]);
        assert_eq!(a.commands[0].lapse, [None; 4]);
        assert_eq!(a.commands[0].delta_t, 0.0);
        assert_eq!(last_access_oracle(&s, 0, OverlapPair::War), (0, None));
    }

    #[test]
    fn full_overwrite_is_war() {
        let s = stream(vec![
            cmd(1.0, Opcode::Read, 0, 4096),
            cmd(3.5, Opcode::Write, 0, 4096),
        ]);
        let a = annotate_stream(&s);
        let w = &a.commands[1];
        assert_eq!(w.ov_war(), 4096);
        assert_eq!(w.lapse[OverlapPair::War.index()], Some(2.5));
        assert_eq!(w.delta_t, 2.5);
        assert_eq!(
            last_access_oracle(&s, 1, OverlapPair::War),
            (4096, Some(2.5))
        );
    }

    #[test]
    fn partial_overlap_counts_intersection_only() {
        let s = stream(vec![
            cmd(0.0, Opcode::Read, 0, 4096),
            cmd(1.0, Opcode::Write, 2048, 6144),
        ]);
        let a = annotate_stream(&s);
        assert_eq!(a.commands[1].ov_war(), 2048);
        assert_eq!(last_access_oracle(&s, 1, OverlapPair::War).0, 2048);
    }

    #[test]
    fn latest_match_wins_over_larger_overlap() {
        // An older read covers the whole range; a newer read only grazes it.
        // The newer one is the reference command.
        let s = stream(vec![
            cmd(0.0, Opcode::Read, 0, 8192),
            cmd(1.0, Opcode::Read, 7680, 512),
            cmd(2.0, Opcode::Write, 0, 8192),
        ]);
        let a = annotate_stream(&s);
        assert_eq!(a.commands[2].ov_war(), 512);
        assert_eq!(a.commands[2].lapse[OverlapPair::War.index()], Some(1.0));
        assert_eq!(
            last_access_oracle(&s, 2, OverlapPair::War),
            (512, Some(1.0))
        );
    }

    #[test]
    fn interior_overwrite_splits_tracked_interval() {
        // Write splits a read interval; later write still sees the read's
        // remnants on both sides.
        let s = stream(vec![
            cmd(0.0, Opcode::Read, 0, 12288),
            cmd(1.0, Opcode::Write, 4096, 4096),
            cmd(2.0, Opcode::Write, 0, 12288),
        ]);
        let a = annotate_stream(&s);
        // Latest intersecting read is still command 0, full intersection.
        assert_eq!(a.commands[2].ov_war(), 12288);
        assert_eq!(a.commands[2].ov[OverlapPair::Waw.index()], 4096);
        for pair in OVERLAP_PAIRS {
            let (ov, lapse) = last_access_oracle(&s, 2, pair);
            assert_eq!(ov, a.commands[2].ov[pair.index()]);
            assert_eq!(lapse, a.commands[2].lapse[pair.index()]);
        }
    }

    fn random_stream(seed: u64, len: usize, capacity: u64) -> Stream {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ts = 0.0;
        let commands = (0..len)
            .map(|_| {
                ts += rng.gen_range(0.0..0.01);
                let size = 512 * rng.gen_range(1..=64);
                let offset = 512 * rng.gen_range(0..(capacity - size) / 512);
                cmd(
                    ts,
                    if rng.gen_bool(0.5) {
                        Opcode::Write
                    } else {
                        Opcode::Read
                    },
                    offset,
                    size,
                )
            })
            .collect();
        stream(commands)
    }

    #[test]
    fn oracle_equivalence_on_random_streams() {
        for seed in 0..8 {
            let s = random_stream(seed, 600, 1 << 22);
            let a = annotate_stream(&s);
            for i in 0..s.commands.len() {
                for pair in OVERLAP_PAIRS {
                    let (ov, lapse) = last_access_oracle(&s, i, pair);
                    assert_eq!(a.commands[i].ov[pair.index()], ov, "cmd {i} {pair:?}");
                    assert_eq!(a.commands[i].lapse[pair.index()], lapse);
                }
            }
        }
    }

    #[test]
    fn overlap_bounded_by_both_sizes() {
        let s = random_stream(99, 500, 1 << 20);
        let a = annotate_stream(&s);
        for (i, dc) in a.commands.iter().enumerate() {
            for pair in OVERLAP_PAIRS {
                let ov = dc.ov[pair.index()];
                assert!(ov <= dc.base.size);
                assert_eq!(dc.lapse[pair.index()].is_some(), ov > 0, "cmd {i}");
            }
        }
    }

    #[test]
    fn determinism() {
        let s = random_stream(7, 300, 1 << 20);
        assert_eq!(annotate_stream(&s), annotate_stream(&s));
    }

    proptest! {
        #[test]
        fn prop_oracle_equivalence(s in crate::trace::tests::arb_stream(60)) {
            let a = annotate_stream(&s);
            for i in 0..s.commands.len() {
                for pair in OVERLAP_PAIRS {
                    let (ov, lapse) = last_access_oracle(&s, i, pair);
                    prop_assert_eq!(a.commands[i].ov[pair.index()], ov);
                    prop_assert_eq!(a.commands[i].lapse[pair.index()], lapse);
                }
            }
        }
    }
}
