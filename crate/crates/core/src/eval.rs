//! Metrics, threshold calibration, and the repeated cross-validation
//! protocol over slice-level predictions.
//!
//! A slice is predicted positive iff its probability strictly exceeds the
//! threshold. Thresholds are calibrated on validation traffic to a false
//! alarm budget of one alarm per fixed volume of benign traffic, then
//! scored on held-out test streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SliceTruth {
    Ransomware,
    Benign,
}

/// One model score for one slice, with the byte totals the volume metrics
/// need.
#[derive(Debug, Clone, Serialize)]
pub struct SlicePrediction {
    pub stream_id: String,
    pub slice_index: usize,
    pub probability: f64,
    pub truth: SliceTruth,
    /// Bytes moved by benign commands in this slice.
    pub benign_bytes: u64,
    /// Bytes written by ransomware commands in this slice.
    pub ransomware_write_bytes: u64,
    pub partial: bool,
}

impl SlicePrediction {
    pub fn positive(&self, threshold: f64) -> bool {
        self.probability > threshold
    }
}

/// All slice predictions of one stream, in slice order.
#[derive(Debug, Clone, Serialize)]
pub struct StreamPredictions {
    pub stream_id: String,
    pub slices: Vec<SlicePrediction>,
}

impl StreamPredictions {
    pub fn is_ransomware(&self) -> bool {
        self.slices
            .iter()
            .any(|s| s.truth == SliceTruth::Ransomware)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no predictions")]
    Empty,
    #[error("stream contains no ransomware slices")]
    BenignStream,
    #[error("validation set contains no benign slices")]
    NoBenignTraffic,
    #[error("need at least {need} streams to split, got {got}")]
    TooFewStreams { need: usize, got: usize },
    #[error("ransomware stream {0} is missing a family tag")]
    MissingFamily(String),
    #[error("quantile needs at least one sample")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// Missed detection rate in percent; absent without positive slices.
    pub mdr: Option<f64>,
    /// False alarm rate in percent; absent without benign slices.
    pub far: Option<f64>,
    pub f1: Option<f64>,
}

/// Slice-level confusion counts and rates at a threshold.
pub fn confusion_metrics(predictions: &[SlicePrediction], threshold: f64) -> ConfusionMetrics {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for p in predictions {
        match (p.truth, p.positive(threshold)) {
            (SliceTruth::Ransomware, true) => tp += 1,
            (SliceTruth::Ransomware, false) => fn_ += 1,
            (SliceTruth::Benign, true) => fp += 1,
            (SliceTruth::Benign, false) => tn += 1,
        }
    }
    let mdr = (tp + fn_ > 0).then(|| 100.0 * fn_ as f64 / (tp + fn_) as f64);
    let far = (fp + tn > 0).then(|| 100.0 * fp as f64 / (fp + tn) as f64);
    let f1 = (tp + fn_ > 0).then(|| {
        if tp == 0 {
            0.0
        } else {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / (tp + fn_) as f64;
            100.0 * 2.0 * precision * recall / (precision + recall)
        }
    });
    ConfusionMetrics {
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        mdr,
        far,
        f1,
    }
}

pub const BYTES_PER_MEGABYTE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MbdSample {
    /// Ransomware write volume, in megabytes, from stream start through
    /// the end of the first positively predicted slice; the full volume
    /// when the stream is never detected.
    pub megabytes: f64,
    pub missed: bool,
}

/// Megabytes-to-detection for one ransomware stream. Detection is only
/// assertable at slice completion, so the detecting slice's own write
/// volume counts.
pub fn compute_mbd(stream: &StreamPredictions, threshold: f64) -> Result<MbdSample, EvalError> {
    if !stream.is_ransomware() {
        return Err(EvalError::BenignStream);
    }
    let mut cumulative = 0u64;
    for slice in &stream.slices {
        cumulative += slice.ransomware_write_bytes;
        if slice.positive(threshold) {
            return Ok(MbdSample {
                megabytes: cumulative as f64 / BYTES_PER_MEGABYTE,
                missed: false,
            });
        }
    }
    Ok(MbdSample {
        megabytes: cumulative as f64 / BYTES_PER_MEGABYTE,
        missed: true,
    })
}

/// Linear-interpolation quantile of the empirical distribution.
pub fn mbd_quantile(samples: &[f64], q: f64) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Traffic-volume error rates in percent: the share of ransomware write
/// volume in missed ransomware slices, and the share of benign-slice
/// volume in falsely flagged benign slices.
pub fn volume_metrics(
    predictions: &[SlicePrediction],
    threshold: f64,
) -> (Option<f64>, Option<f64>) {
    let mut rw_total = 0u64;
    let mut rw_missed = 0u64;
    let mut benign_total = 0u64;
    let mut benign_flagged = 0u64;
    for p in predictions {
        match p.truth {
            SliceTruth::Ransomware => {
                rw_total += p.ransomware_write_bytes;
                if !p.positive(threshold) {
                    rw_missed += p.ransomware_write_bytes;
                }
            }
            SliceTruth::Benign => {
                benign_total += p.benign_bytes;
                if p.positive(threshold) {
                    benign_flagged += p.benign_bytes;
                }
            }
        }
    }
    let p_miss = (rw_total > 0).then(|| 100.0 * rw_missed as f64 / rw_total as f64);
    let p_err = (benign_total > 0).then(|| 100.0 * benign_flagged as f64 / benign_total as f64);
    (p_miss, p_err)
}

pub const BYTES_PER_GIGABYTE: f64 = 1e9;
/// Calibration work point: one false alarm allowed per this much benign
/// traffic.
pub const DEFAULT_GB_PER_FALSE_ALARM: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub threshold: f64,
    pub false_alarm_limit: usize,
    pub false_alarms: usize,
    /// Set when no threshold meets the budget and 1.0 was returned.
    pub saturated: bool,
}

/// Smallest threshold whose false alarms on validation stay within the
/// volume budget. Partial slices are excluded unless `include_partial`.
pub fn calibrate_threshold(
    validation: &[SlicePrediction],
    gb_per_false_alarm: f64,
    include_partial: bool,
) -> Result<Calibration, EvalError> {
    let usable: Vec<&SlicePrediction> = validation
        .iter()
        .filter(|p| include_partial || !p.partial)
        .collect();
    let benign: Vec<&&SlicePrediction> = usable
        .iter()
        .filter(|p| p.truth == SliceTruth::Benign)
        .collect();
    if benign.is_empty() {
        return Err(EvalError::NoBenignTraffic);
    }
    let benign_gb: f64 = benign.iter().map(|p| p.benign_bytes as f64).sum::<f64>()
        / BYTES_PER_GIGABYTE;
    let limit = (benign_gb / gb_per_false_alarm).floor() as usize;

    let mut candidates: Vec<f64> = usable.iter().map(|p| p.probability).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    for &threshold in &candidates {
        let alarms = benign.iter().filter(|p| p.positive(threshold)).count();
        if alarms <= limit {
            return Ok(Calibration {
                threshold,
                false_alarm_limit: limit,
                false_alarms: alarms,
                saturated: false,
            });
        }
    }
    Ok(Calibration {
        threshold: 1.0,
        false_alarm_limit: limit,
        false_alarms: benign.iter().filter(|p| p.positive(1.0)).count(),
        saturated: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricValue {
    pub mean: f64,
    /// One-sigma spread across repeats; for the rate metrics the mean
    /// Wilson half-width is folded in quadrature.
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct MetricsReport {
    pub repeats: usize,
    pub mdr: Option<MetricValue>,
    pub far: Option<MetricValue>,
    pub f1: Option<MetricValue>,
    pub p_miss: Option<MetricValue>,
    pub p_err: Option<MetricValue>,
    pub mbd3: Option<MetricValue>,
    /// Pooled megabytes-to-detection samples across repeats.
    pub mbd_samples: Vec<f64>,
    /// Stream-repeats whose full ransomware volume entered the samples
    /// because no slice was detected.
    pub missed_streams: usize,
    pub thresholds: Vec<f64>,
}

fn mean_sigma(values: &[f64]) -> MetricValue {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MetricValue {
        mean,
        sigma: var.sqrt(),
    }
}

/// Wilson score interval half-width at one sigma (z = 1) for a rate given
/// in percent.
pub fn wilson_half_width_percent(rate_percent: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = rate_percent / 100.0;
    let z = 1.0;
    let nf = n as f64;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / (1.0 + z * z / nf);
    100.0 * half
}

fn fold_rate(values: &[(f64, usize)]) -> Option<MetricValue> {
    if values.is_empty() {
        return None;
    }
    let rates: Vec<f64> = values.iter().map(|&(r, _)| r).collect();
    let mut value = mean_sigma(&rates);
    let mean_wilson = values
        .iter()
        .map(|&(r, n)| wilson_half_width_percent(r, n))
        .sum::<f64>()
        / values.len() as f64;
    value.sigma = (value.sigma * value.sigma + mean_wilson * mean_wilson).sqrt();
    Some(value)
}

#[derive(Debug, Clone, Copy)]
pub struct CrossValidateConfig {
    pub repeats: usize,
    /// Validation share of the eval streams; test takes the rest.
    pub validation_fraction: f64,
    pub gb_per_false_alarm: f64,
    pub mbd_quantile: f64,
    pub include_partial_in_calibration: bool,
    pub seed: u64,
}

impl Default for CrossValidateConfig {
    fn default() -> Self {
        CrossValidateConfig {
            repeats: 50,
            validation_fraction: 1.0 / 3.0,
            gb_per_false_alarm: DEFAULT_GB_PER_FALSE_ALARM,
            mbd_quantile: 0.75,
            include_partial_in_calibration: false,
            seed: 0,
        }
    }
}

/// Repeated random validation/test splitting at stream level (stratified
/// by stream truth so both sides keep benign traffic), calibration on the
/// validation side, scoring on the test side. Repeats run in parallel on
/// seeds derived from the master seed; serial and parallel runs agree.
pub fn cross_validate(
    streams: &[StreamPredictions],
    config: &CrossValidateConfig,
) -> Result<MetricsReport, EvalError> {
    if streams.is_empty() {
        return Err(EvalError::Empty);
    }
    let benign_ids: Vec<usize> = (0..streams.len())
        .filter(|&i| !streams[i].is_ransomware())
        .collect();
    let rw_ids: Vec<usize> = (0..streams.len())
        .filter(|&i| streams[i].is_ransomware())
        .collect();
    if benign_ids.len() < 2 || rw_ids.len() < 2 {
        return Err(EvalError::TooFewStreams {
            need: 2,
            got: benign_ids.len().min(rw_ids.len()),
        });
    }

    struct RepeatOutcome {
        mdr: Option<(f64, usize)>,
        far: Option<(f64, usize)>,
        f1: Option<f64>,
        p_miss: Option<f64>,
        p_err: Option<f64>,
        mbd3: Option<f64>,
        mbd: Vec<MbdSample>,
        threshold: f64,
    }

    let outcomes: Result<Vec<RepeatOutcome>, EvalError> = (0..config.repeats)
        .into_par_iter()
        .map(|repeat| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ (repeat as u64).wrapping_mul(0xA076_1D64_78BD_642F),
            );
            let split = |ids: &[usize], rng: &mut ChaCha8Rng| -> (Vec<usize>, Vec<usize>) {
                let mut shuffled = ids.to_vec();
                shuffled.shuffle(rng);
                let v = ((shuffled.len() as f64 * config.validation_fraction).round() as usize)
                    .clamp(1, shuffled.len() - 1);
                (shuffled[..v].to_vec(), shuffled[v..].to_vec())
            };
            let (val_b, test_b) = split(&benign_ids, &mut rng);
            let (val_r, test_r) = split(&rw_ids, &mut rng);

            let collect = |ids: &[usize]| -> Vec<SlicePrediction> {
                ids.iter()
                    .flat_map(|&i| streams[i].slices.iter().cloned())
                    .collect()
            };
            let validation: Vec<SlicePrediction> =
                collect(&val_b).into_iter().chain(collect(&val_r)).collect();
            let calibration = calibrate_threshold(
                &validation,
                config.gb_per_false_alarm,
                config.include_partial_in_calibration,
            )?;
            let threshold = calibration.threshold;

            let test_slices: Vec<SlicePrediction> =
                collect(&test_b).into_iter().chain(collect(&test_r)).collect();
            let confusion = confusion_metrics(&test_slices, threshold);
            let (p_miss, p_err) = volume_metrics(&test_slices, threshold);

            let mut mbd = Vec::new();
            for &i in &test_r {
                mbd.push(compute_mbd(&streams[i], threshold)?);
            }
            let mbd_values: Vec<f64> = mbd.iter().map(|m| m.megabytes).collect();
            let mbd3 = mbd_quantile(&mbd_values, config.mbd_quantile).ok();

            let positives = confusion.true_positives + confusion.false_negatives;
            let benign_slices = confusion.false_positives + confusion.true_negatives;
            Ok(RepeatOutcome {
                mdr: confusion.mdr.map(|m| (m, positives)),
                far: confusion.far.map(|f| (f, benign_slices)),
                f1: confusion.f1,
                p_miss,
                p_err,
                mbd3,
                mbd,
                threshold,
            })
        })
        .collect();
    let outcomes = outcomes?;

    let gather = |f: &dyn Fn(&RepeatOutcome) -> Option<f64>| -> Vec<f64> {
        outcomes.iter().filter_map(f).collect()
    };
    let simple = |values: Vec<f64>| (!values.is_empty()).then(|| mean_sigma(&values));

    let mut mbd_samples = Vec::new();
    let mut missed_streams = 0;
    for o in &outcomes {
        for m in &o.mbd {
            mbd_samples.push(m.megabytes);
            missed_streams += m.missed as usize;
        }
    }

    Ok(MetricsReport {
        repeats: config.repeats,
        mdr: fold_rate(&outcomes.iter().filter_map(|o| o.mdr).collect::<Vec<_>>()),
        far: fold_rate(&outcomes.iter().filter_map(|o| o.far).collect::<Vec<_>>()),
        f1: simple(gather(&|o| o.f1)),
        p_miss: simple(gather(&|o| o.p_miss)),
        p_err: simple(gather(&|o| o.p_err)),
        mbd3: simple(gather(&|o| o.mbd3)),
        mbd_samples,
        missed_streams,
        thresholds: outcomes.iter().map(|o| o.threshold).collect(),
    })
}

/// Mean prediction correctness at each in-frame position, over frames of
/// (per-command probability, per-command label) pairs. Short frames
/// contribute to their leading positions only.
pub fn positional_accuracy(frames: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let max_len = frames.iter().map(|(p, _)| p.len()).max().unwrap_or(0);
    let mut correct = vec![0.0; max_len];
    let mut count = vec![0.0; max_len];
    for (probs, labels) in frames {
        assert_eq!(probs.len(), labels.len());
        for (i, (&p, &y)) in probs.iter().zip(labels).enumerate() {
            let predicted = p > 0.5;
            let actual = y > 0.5;
            if predicted == actual {
                correct[i] += 1.0;
            }
            count[i] += 1.0;
        }
    }
    correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| if n > 0.0 { c / n } else { f64::NAN })
        .collect()
}

/// Stream metadata for group-held-out splitting.
#[derive(Debug, Clone)]
pub struct StreamMeta {
    pub stream_id: String,
    pub family: Option<String>,
    pub is_ransomware: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupFold {
    pub train: Vec<String>,
    pub id_test: Vec<String>,
    pub ood_test: Vec<String>,
    /// Families held out of training in this fold.
    pub ood_families: Vec<String>,
}

/// Family-disjoint rotation: ransomware families split into `folds`
/// groups; each fold holds one group out entirely, splits the rest evenly
/// into train and in-distribution test, and shares one fixed benign split
/// across all folds.
pub fn group_split(
    streams: &[StreamMeta],
    folds: usize,
    seed: u64,
) -> Result<Vec<GroupFold>, EvalError> {
    assert!(folds >= 2, "group rotation needs at least two folds");
    let mut families: Vec<String> = Vec::new();
    for s in streams {
        if s.is_ransomware {
            let family = s
                .family
                .clone()
                .ok_or_else(|| EvalError::MissingFamily(s.stream_id.clone()))?;
            if !families.contains(&family) {
                families.push(family);
            }
        }
    }
    if families.len() < folds {
        return Err(EvalError::TooFewStreams {
            need: folds,
            got: families.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    families.shuffle(&mut rng);
    let groups: Vec<Vec<String>> = (0..folds)
        .map(|g| {
            families
                .iter()
                .enumerate()
                .filter(|(i, _)| i % folds == g)
                .map(|(_, f)| f.clone())
                .collect()
        })
        .collect();

    // One fixed benign split shared by every fold.
    let mut benign: Vec<&StreamMeta> = streams.iter().filter(|s| !s.is_ransomware).collect();
    benign.shuffle(&mut rng);
    let half = benign.len() / 2;
    let benign_train: Vec<String> = benign[..half].iter().map(|s| s.stream_id.clone()).collect();
    let benign_test: Vec<String> = benign[half..].iter().map(|s| s.stream_id.clone()).collect();

    let mut result = Vec::with_capacity(folds);
    for (g, group) in groups.iter().enumerate() {
        let mut ood_test: Vec<String> = Vec::new();
        let mut in_dist: Vec<&StreamMeta> = Vec::new();
        for s in streams.iter().filter(|s| s.is_ransomware) {
            let family = s.family.as_ref().unwrap();
            if group.contains(family) {
                ood_test.push(s.stream_id.clone());
            } else {
                in_dist.push(s);
            }
        }
        let mut fold_rng = ChaCha8Rng::seed_from_u64(seed ^ (g as u64 + 1).wrapping_mul(0x9E37));
        in_dist.shuffle(&mut fold_rng);
        let half = in_dist.len() / 2;
        let mut train: Vec<String> = in_dist[..half].iter().map(|s| s.stream_id.clone()).collect();
        let mut id_test: Vec<String> =
            in_dist[half..].iter().map(|s| s.stream_id.clone()).collect();
        train.extend(benign_train.iter().cloned());
        id_test.extend(benign_test.iter().cloned());
        ood_test.extend(benign_test.iter().cloned());
        result.push(GroupFold {
            train,
            id_test,
            ood_test,
            ood_families: group.clone(),
        });
    }
    Ok(result)
}

/// Report CSV: one metric per row as name,value,sigma.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("metric,value,sigma\n");
    let mut row = |name: &str, v: &Option<MetricValue>| {
        if let Some(v) = v {
            out.push_str(&format!("{name},{:.6},{:.6}\n", v.mean, v.sigma));
        } else {
            out.push_str(&format!("{name},,\n"));
        }
    };
    row("mdr_percent", &report.mdr);
    row("far_percent", &report.far);
    row("f1_percent", &report.f1);
    row("p_miss_percent", &report.p_miss);
    row("p_err_percent", &report.p_err);
    row("mbd3_megabytes", &report.mbd3);
    out.push_str(&format!("repeats,{},\n", report.repeats));
    out.push_str(&format!("missed_streams,{},\n", report.missed_streams));
    out
}

/// Empirical CDF of the pooled megabytes-to-detection samples.
pub fn mbd_cdf_csv(samples: &[f64]) -> String {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = String::from("mbd_mb,cdf\n");
    let n = sorted.len() as f64;
    for (i, v) in sorted.iter().enumerate() {
        out.push_str(&format!("{v:.6},{:.6}\n", (i + 1) as f64 / n));
    }
    out
}

pub fn report_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}
