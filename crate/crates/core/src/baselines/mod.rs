//! Tabular baselines: a random forest over 23 per-slice features, and a
//! two-stage model (decision-tree filter, then gradient-boosted trees over
//! a fuller statistics set) in the style of recent storage-level detectors.

pub mod forest;
pub mod gbt;
pub mod tree;

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::slicer::Slice;
use crate::trace::Opcode;
pub use forest::{ForestConfig, RandomForest};
pub use gbt::{GbtConfig, GradientBoost};
pub use tree::{DecisionTree, SplitCriterion, TreeConfig, TreeNode};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("slice is empty")]
    EmptySlice,
    #[error("training data contains a single class")]
    SingleClass,
    #[error("feature row of length {got} where the model expects {want}")]
    FeatureMismatch { got: usize, want: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Malformed(String),
}

/// f_R, f_WAR, CV_WAR, then two 10-bin histograms.
pub const RF_FEATURE_COUNT: usize = 23;
pub const RF_HIST_BINS: usize = 10;

/// Log2-spaced bins over [512 B, 2 MiB], outer bins catching tails.
fn rf_hist_bin(bytes: u64) -> usize {
    if bytes < 512 {
        return 0;
    }
    let idx = (((bytes as f64).log2() - 9.0) * RF_HIST_BINS as f64 / 12.0).floor();
    (idx.max(0.0) as usize).min(RF_HIST_BINS - 1)
}

/// The 23 per-slice features of the forest baseline: fractional read
/// volume, fractional overwrite volume, coefficient of variation of the
/// overwrite overlaps, and normalized histograms of read sizes and of
/// positive overwrite overlaps.
pub fn rf_extract_features(slice: &Slice<'_>) -> Result<Vec<f64>, BaselineError> {
    if slice.is_empty() {
        return Err(BaselineError::EmptySlice);
    }
    let total: u64 = slice.commands.iter().map(|c| c.base.size).sum();
    let total = total as f64;

    let read_bytes: u64 = slice
        .commands
        .iter()
        .filter(|c| c.base.opcode == Opcode::Read)
        .map(|c| c.base.size)
        .sum();
    let war_bytes: u64 = slice.commands.iter().map(|c| c.ov_war()).sum();

    let n = slice.len() as f64;
    let mean_war = war_bytes as f64 / n;
    let var_war = slice
        .commands
        .iter()
        .map(|c| (c.ov_war() as f64 - mean_war).powi(2))
        .sum::<f64>()
        / n;
    let cv_war = if mean_war > 0.0 {
        var_war.sqrt() / mean_war
    } else {
        0.0
    };

    let mut features = vec![0.0; RF_FEATURE_COUNT];
    features[0] = read_bytes as f64 / total;
    features[1] = war_bytes as f64 / total;
    features[2] = cv_war;

    let mut reads = 0.0;
    let mut wars = 0.0;
    for c in slice.commands {
        if c.base.opcode == Opcode::Read {
            features[3 + rf_hist_bin(c.base.size)] += 1.0;
            reads += 1.0;
        }
        if c.ov_war() > 0 {
            features[13 + rf_hist_bin(c.ov_war())] += 1.0;
            wars += 1.0;
        }
    }
    if reads > 0.0 {
        for f in &mut features[3..13] {
            *f /= reads;
        }
    }
    if wars > 0.0 {
        for f in &mut features[13..23] {
            *f /= wars;
        }
    }
    Ok(features)
}

/// Command categories the two-stage model aggregates over.
const DEFTPUNK_TYPES: usize = 4; // read, write, overwrite, multi-read
pub const DEFTPUNK_STAGE1_FEATURES: usize = DEFTPUNK_TYPES * 2;
pub const DEFTPUNK_STAGE2_FEATURES: usize = DEFTPUNK_TYPES * 10;

/// Per-type slice statistics. Stage 1 carries only the cheap scale-free
/// fractions (count and byte share per type); stage 2 extends each type
/// with rates, size and offset moments, and the raw totals.
pub fn deftpunk_features(slice: &Slice<'_>) -> Result<(Vec<f64>, Vec<f64>), BaselineError> {
    if slice.is_empty() {
        return Err(BaselineError::EmptySlice);
    }
    let total_n = slice.len() as f64;
    let total_bytes: u64 = slice.commands.iter().map(|c| c.base.size).sum();
    let total_bytes = total_bytes as f64;
    let duration = (slice.commands.last().unwrap().base.timestamp
        - slice.commands[0].base.timestamp)
        .max(1e-9);

    let mut stage1 = Vec::with_capacity(DEFTPUNK_STAGE1_FEATURES);
    let mut stage2 = Vec::with_capacity(DEFTPUNK_STAGE2_FEATURES);
    for t in 0..DEFTPUNK_TYPES {
        let select = |c: &crate::derived::DerivedCommand| match t {
            0 => c.base.opcode == Opcode::Read,
            1 => c.base.opcode == Opcode::Write,
            2 => c.is_war(),
            _ => c.is_rar(),
        };
        let mut count = 0.0;
        let mut bytes = 0.0;
        let mut size_sq = 0.0;
        let mut off_sum = 0.0;
        let mut off_sq = 0.0;
        for c in slice.commands.iter().filter(|c| select(c)) {
            count += 1.0;
            bytes += c.base.size as f64;
            size_sq += (c.base.size as f64).powi(2);
            off_sum += c.base.offset as f64;
            off_sq += (c.base.offset as f64).powi(2);
        }
        let fractions = [count / total_n, bytes / total_bytes];
        stage1.extend_from_slice(&fractions);
        stage2.extend_from_slice(&fractions);
        let (size_mean, size_std, off_mean, off_std) = if count > 0.0 {
            let sm = bytes / count;
            let om = off_sum / count;
            (
                sm,
                (size_sq / count - sm * sm).max(0.0).sqrt(),
                om,
                (off_sq / count - om * om).max(0.0).sqrt(),
            )
        } else {
            (0.0, 0.0, 0.0, 0.0)
        };
        stage2.extend_from_slice(&[
            count / duration,
            bytes / duration,
            size_mean,
            size_std,
            off_mean,
            off_std,
            count,
            bytes,
        ]);
    }
    Ok((stage1, stage2))
}

#[derive(Debug, Clone, Copy)]
pub struct DeftPunkConfig {
    pub filter_depth: usize,
    pub boost: GbtConfig,
}

impl Default for DeftPunkConfig {
    fn default() -> Self {
        DeftPunkConfig {
            filter_depth: 6,
            boost: GbtConfig {
                rounds: 100,
                max_depth: 6,
                shrinkage: 0.1,
                seed: 0,
            },
        }
    }
}

/// Two-stage detector: a shallow decision tree filters on the cheap
/// features, and only suspicious samples reach the boosted ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct DeftPunk {
    pub filter: DecisionTree,
    pub booster: GradientBoost,
}

pub const DEFTPUNK_FILTER_THRESHOLD: f64 = 0.5;

impl DeftPunk {
    pub fn fit(
        stage1: &[f64],
        stage2: &[f64],
        y: &[f64],
        config: &DeftPunkConfig,
    ) -> Result<DeftPunk, BaselineError> {
        let n = y.len();
        assert_eq!(stage1.len(), n * DEFTPUNK_STAGE1_FEATURES);
        assert_eq!(stage2.len(), n * DEFTPUNK_STAGE2_FEATURES);
        let positives = y.iter().filter(|&&v| v > 0.5).count();
        if positives == 0 || positives == n {
            return Err(BaselineError::SingleClass);
        }

        let rows: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.boost.seed);
        let filter = DecisionTree::fit(
            stage1,
            y,
            DEFTPUNK_STAGE1_FEATURES,
            &rows,
            &TreeConfig::gini(config.filter_depth),
            &mut rng,
        );

        let suspicious: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| {
                filter.predict(&stage1[i * DEFTPUNK_STAGE1_FEATURES..(i + 1) * DEFTPUNK_STAGE1_FEATURES])
                    >= DEFTPUNK_FILTER_THRESHOLD
            })
            .collect();

        let booster = {
            let pos = suspicious.iter().filter(|&&i| y[i] > 0.5).count();
            // The filter can separate a small training set perfectly; a
            // single-class pass-through would leave the booster nothing to
            // learn from, so it falls back to the full set.
            let train_rows: Vec<usize> =
                if suspicious.is_empty() || pos == 0 || pos == suspicious.len() {
                    rows.clone()
                } else {
                    suspicious
                };
            let mut xs = Vec::with_capacity(train_rows.len() * DEFTPUNK_STAGE2_FEATURES);
            let mut ys = Vec::with_capacity(train_rows.len());
            for &i in &train_rows {
                xs.extend_from_slice(
                    &stage2[i * DEFTPUNK_STAGE2_FEATURES..(i + 1) * DEFTPUNK_STAGE2_FEATURES],
                );
                ys.push(y[i]);
            }
            GradientBoost::fit(&xs, &ys, DEFTPUNK_STAGE2_FEATURES, &config.boost)
        };

        Ok(DeftPunk { filter, booster })
    }

    /// 0 exactly when the filter rejects; otherwise the boosted score.
    pub fn predict(&self, stage1_row: &[f64], stage2_row: &[f64]) -> f64 {
        if self.filter.predict(stage1_row) < DEFTPUNK_FILTER_THRESHOLD {
            0.0
        } else {
            self.booster.predict(stage2_row)
        }
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"NVTM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TabularModel {
    Forest(RandomForest),
    DeftPunk(DeftPunk),
}

fn write_tree<W: Write>(w: &mut W, tree: &DecisionTree) -> std::io::Result<()> {
    w.write_all(&(tree.nodes.len() as u32).to_le_bytes())?;
    for node in &tree.nodes {
        w.write_all(&node.feature.to_le_bytes())?;
        w.write_all(&node.threshold.to_le_bytes())?;
        w.write_all(&node.left.to_le_bytes())?;
        w.write_all(&node.right.to_le_bytes())?;
        w.write_all(&node.value.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_i32<R: Read>(r: &mut R) -> std::io::Result<i32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_tree<R: Read>(r: &mut R) -> std::io::Result<DecisionTree> {
    let count = read_u32(r)? as usize;
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        nodes.push(TreeNode {
            feature: read_i32(r)?,
            threshold: read_f64(r)?,
            left: read_i32(r)?,
            right: read_i32(r)?,
            value: read_f64(r)?,
        });
    }
    Ok(DecisionTree { nodes })
}

pub fn save_model(model: &TabularModel, path: &Path) -> Result<(), BaselineError> {
    let io = |e| BaselineError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        match model {
            TabularModel::Forest(f) => {
                w.write_all(&[0u8])?;
                w.write_all(&(f.features as u32).to_le_bytes())?;
                w.write_all(&(f.trees.len() as u32).to_le_bytes())?;
                for tree in &f.trees {
                    write_tree(&mut w, tree)?;
                }
            }
            TabularModel::DeftPunk(d) => {
                w.write_all(&[1u8])?;
                write_tree(&mut w, &d.filter)?;
                w.write_all(&d.booster.base.to_le_bytes())?;
                w.write_all(&d.booster.shrinkage.to_le_bytes())?;
                w.write_all(&(d.booster.features as u32).to_le_bytes())?;
                w.write_all(&(d.booster.trees.len() as u32).to_le_bytes())?;
                for tree in &d.booster.trees {
                    write_tree(&mut w, tree)?;
                }
            }
        }
        w.flush()
    })()
    .map_err(io)
}

pub fn load_model(path: &Path) -> Result<TabularModel, BaselineError> {
    let io = |e| BaselineError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MODEL_MAGIC {
        return Err(BaselineError::Malformed("bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != MODEL_VERSION {
        return Err(BaselineError::Malformed(format!("version {version}")));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).map_err(io)?;
    match kind[0] {
        0 => {
            let features = read_u32(&mut r).map_err(io)? as usize;
            let count = read_u32(&mut r).map_err(io)? as usize;
            let mut trees = Vec::with_capacity(count);
            for _ in 0..count {
                trees.push(read_tree(&mut r).map_err(io)?);
            }
            Ok(TabularModel::Forest(RandomForest { trees, features }))
        }
        1 => {
            let filter = read_tree(&mut r).map_err(io)?;
            let base = read_f64(&mut r).map_err(io)?;
            let shrinkage = read_f64(&mut r).map_err(io)?;
            let features = read_u32(&mut r).map_err(io)? as usize;
            let count = read_u32(&mut r).map_err(io)? as usize;
            let mut trees = Vec::with_capacity(count);
            for _ in 0..count {
                trees.push(read_tree(&mut r).map_err(io)?);
            }
            Ok(TabularModel::DeftPunk(DeftPunk {
                filter,
                booster: GradientBoost {
                    base,
                    shrinkage,
                    trees,
                    features,
                },
            }))
        }
        other => Err(BaselineError::Malformed(format!("unknown kind {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derived::annotate_stream;
    use crate::slicer::{slice_stream, SlicePlan};
    use crate::trace::{Command, Label, Stream};

    fn annotated(commands: Vec<Command>) -> crate::derived::AnnotatedStream {
        annotate_stream(&Stream {
            stream_id: "t".to_string(),
            disk_capacity: 1 << 40,
            commands,
            family: None,
        })
    }

    #[test]
    fn all_read_slice_has_unit_read_fraction() {
        let commands: Vec<Command> = (0..20)
            .map(|i| Command {
                timestamp: i as f64,
                opcode: Opcode::Read,
                offset: i as u64 * (1 << 22),
                size: 4096,
                label: Label::Benign,
            })
            .collect();
        let s = annotated(commands);
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 20 }).unwrap();
        let f = rf_extract_features(&slices[0]).unwrap();
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], 0.0);
        assert!(f[13..23].iter().all(|&v| v == 0.0));
        // Read histogram normalized to 1.
        assert!((f[3..13].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encrypt_like_slice_has_half_fractions() {
        // Read every extent, then overwrite it: read and overwrite volumes
        // are each half the traffic.
        let mut commands = Vec::new();
        for i in 0..50u64 {
            commands.push(Command {
                timestamp: i as f64 * 2.0,
                opcode: Opcode::Read,
                offset: i * 131_072,
                size: 131_072,
                label: Label::Ransomware,
            });
            commands.push(Command {
                timestamp: i as f64 * 2.0 + 1.0,
                opcode: Opcode::Write,
                offset: i * 131_072,
                size: 131_072,
                label: Label::Ransomware,
            });
        }
        let s = annotated(commands);
        let slices = slice_stream(&s, SlicePlan::ByCommand { commands: 100 }).unwrap();
        let f = rf_extract_features(&slices[0]).unwrap();
        assert!((f[0] - 0.5).abs() < 1e-12, "f_R {}", f[0]);
        assert!((f[1] - 0.5).abs() < 1e-12, "f_WAR {}", f[1]);
    }

    #[test]
    fn empty_slice_rejected() {
        let s = annotated(vec![]);
        let slice = Slice {
            stream_id: &s.stream_id,
            slice_index: 0,
            mode: crate::slicer::SliceMode::ByCommand,
            commands: &s.commands,
            start: 0,
            partial: true,
        };
        assert!(matches!(
            rf_extract_features(&slice),
            Err(BaselineError::EmptySlice)
        ));
    }

    fn synthetic_rows(n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        // Stage-1 features are fully informative: positives carry a high
        // overwrite byte fraction (feature 5 = type-2 byte share).
        let mut stage1 = Vec::new();
        let mut stage2 = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let pos = i % 2 == 0;
            let mut s1 = vec![0.1; DEFTPUNK_STAGE1_FEATURES];
            s1[5] = if pos { 0.8 } else { 0.05 } + (i as f64) * 1e-4;
            let mut s2 = vec![0.2; DEFTPUNK_STAGE2_FEATURES];
            s2[5] = s1[5];
            s2[20] = if pos { 0.6 } else { 0.3 };
            stage1.extend_from_slice(&s1);
            stage2.extend_from_slice(&s2);
            y.push(pos as u8 as f64);
        }
        (stage1, stage2, y)
    }

    #[test]
    fn filter_passes_all_positives_and_rejects_to_zero() {
        let (stage1, stage2, y) = synthetic_rows(40);
        let model = DeftPunk::fit(&stage1, &stage2, &y, &DeftPunkConfig::default()).unwrap();
        for i in 0..40 {
            let s1 = &stage1[i * DEFTPUNK_STAGE1_FEATURES..(i + 1) * DEFTPUNK_STAGE1_FEATURES];
            let s2 = &stage2[i * DEFTPUNK_STAGE2_FEATURES..(i + 1) * DEFTPUNK_STAGE2_FEATURES];
            let p = model.predict(s1, s2);
            if y[i] > 0.5 {
                assert!(p > 0.5, "positive row {i} scored {p}");
            } else {
                assert_eq!(p, 0.0, "negative row {i} must be filtered to exactly 0");
            }
        }
    }

    #[test]
    fn single_class_rejected() {
        let (stage1, stage2, _) = synthetic_rows(10);
        let y = vec![1.0; 10];
        assert!(matches!(
            DeftPunk::fit(&stage1, &stage2, &y, &DeftPunkConfig::default()),
            Err(BaselineError::SingleClass)
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let (stage1, stage2, y) = synthetic_rows(30);
        let deft = DeftPunk::fit(&stage1, &stage2, &y, &DeftPunkConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deft.model");
        save_model(&TabularModel::DeftPunk(deft.clone()), &path).unwrap();
        let TabularModel::DeftPunk(back) = load_model(&path).unwrap() else {
            panic!("expected the two-stage model back");
        };
        assert_eq!(back, deft);

        let mut x = Vec::new();
        let mut yy = Vec::new();
        for i in 0..30 {
            x.push((i % 2) as f64 + (i as f64) * 1e-3);
            yy.push((i % 2) as f64);
        }
        let rf = RandomForest::fit(&x, &yy, 1, &ForestConfig::default());
        let path = dir.path().join("rf.model");
        save_model(&TabularModel::Forest(rf.clone()), &path).unwrap();
        let TabularModel::Forest(back) = load_model(&path).unwrap() else {
            panic!("expected the forest back");
        };
        assert_eq!(back, rf);
    }
}
