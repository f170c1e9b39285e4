//! Glue between the stages: turns raw streams into training samples for
//! each model kind and into slice-level predictions for the evaluation
//! harness. Scoring walks a stream's slices in order (the patch embedder
//! carries running state across slices); distinct streams are independent
//! and are scored in parallel by callers.

use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{
    deftpunk_features, rf_extract_features, BaselineError, DeftPunk, RandomForest,
};
use crate::clt::{tokenize_frame, TokenizeError, TokenizerSettings};
use crate::derived::annotate_stream;
use crate::eval::{SlicePrediction, SliceTruth, StreamPredictions};
use crate::nn::model::{clt_predict_frame, plt_predict_patches, pool_clt, pool_plt, Model};
use crate::nn::{ModelError, TrainSample};
use crate::plt::{
    embed_slice, update_back_averages, BackAverageState, BinConfig, EmbedError, PatchFeatureMask,
    PatchWindows,
};
use crate::slicer::{slice_stream, Slice, SliceError, SlicePlan};
use crate::trace::{Label, Opcode, Stream};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("stream {stream} command {index} is unlabeled; training and scoring need labels")]
    Unlabeled { stream: String, index: usize },
}

/// Slice ground truth and byte totals for the volume metrics.
fn slice_truth(slice: &Slice<'_>, stream_id: &str) -> Result<(SliceTruth, u64, u64), PipelineError> {
    let mut benign_bytes = 0u64;
    let mut rw_write_bytes = 0u64;
    let mut any_rw = false;
    for (i, dc) in slice.commands.iter().enumerate() {
        match dc.base.label {
            Label::Benign => benign_bytes += dc.base.size,
            Label::Ransomware => {
                any_rw = true;
                if dc.base.opcode == Opcode::Write {
                    rw_write_bytes += dc.base.size;
                }
            }
            Label::Unlabeled => {
                return Err(PipelineError::Unlabeled {
                    stream: stream_id.to_string(),
                    index: slice.start + i,
                })
            }
        }
    }
    let truth = if any_rw {
        SliceTruth::Ransomware
    } else {
        SliceTruth::Benign
    };
    Ok((truth, benign_bytes, rw_write_bytes))
}

/// How a trained model scores one slice.
pub enum Scorer<'a> {
    Clt {
        model: &'a Model,
        tokenizer: TokenizerSettings,
        frame_commands: usize,
    },
    Plt {
        model: &'a Model,
        windows: PatchWindows,
        bins: BinConfig,
        mask: PatchFeatureMask,
    },
    Forest(&'a RandomForest),
    DeftPunk(&'a DeftPunk),
}

impl Scorer<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Clt { .. } => "clt",
            Scorer::Plt { .. } => "plt",
            Scorer::Forest(_) => "rf",
            Scorer::DeftPunk(_) => "deftpunk",
        }
    }
}

/// Score every slice of one stream, producing the per-slice probabilities
/// plus truth and byte bookkeeping for the harness.
pub fn predict_stream(
    stream: &Stream,
    plan: SlicePlan,
    scorer: &Scorer<'_>,
) -> Result<StreamPredictions, PipelineError> {
    let annotated = annotate_stream(stream);
    let slices = slice_stream(&annotated, plan)?;
    let mut state = BackAverageState::default();
    let mut predictions = Vec::with_capacity(slices.len());
    for slice in &slices {
        let probability = match scorer {
            Scorer::Clt {
                model,
                tokenizer,
                frame_commands,
            } => {
                let config = tokenizer.for_capacity(stream.disk_capacity)?;
                let frames = tokenize_frame(slice, *frame_commands, &config)?;
                let mut per_command = Vec::with_capacity(slice.len());
                for frame in &frames {
                    per_command.extend(clt_predict_frame(model, &frame.tokens)?);
                }
                pool_clt(&per_command)
            }
            Scorer::Plt {
                model,
                windows,
                bins,
                mask,
            } => {
                state = update_back_averages(&state, slice);
                let embeddings = embed_slice(slice, &state, *windows, bins, *mask, false)?;
                let features: Vec<f64> = embeddings
                    .iter()
                    .flat_map(|e| e.features.iter().copied())
                    .collect();
                pool_plt(&plt_predict_patches(model, &features)?)
            }
            Scorer::Forest(forest) => forest.predict(&rf_extract_features(slice)?),
            Scorer::DeftPunk(model) => {
                let (stage1, stage2) = deftpunk_features(slice)?;
                model.predict(&stage1, &stage2)
            }
        };
        let (truth, benign_bytes, rw_write_bytes) = slice_truth(slice, &stream.stream_id)?;
        predictions.push(SlicePrediction {
            stream_id: stream.stream_id.clone(),
            slice_index: slice.slice_index,
            probability,
            truth,
            benign_bytes,
            ransomware_write_bytes: rw_write_bytes,
            partial: slice.partial,
        });
    }
    Ok(StreamPredictions {
        stream_id: stream.stream_id.clone(),
        slices: predictions,
    })
}

/// Score many streams in parallel.
pub fn predict_streams(
    streams: &[Stream],
    plan: SlicePlan,
    scorer: &Scorer<'_>,
) -> Result<Vec<StreamPredictions>, PipelineError> {
    streams
        .par_iter()
        .map(|s| predict_stream(s, plan, scorer))
        .collect()
}

/// One training sample per token frame, with per-command binary labels.
pub fn clt_train_samples(
    streams: &[Stream],
    plan: SlicePlan,
    tokenizer: &TokenizerSettings,
    frame_commands: usize,
) -> Result<Vec<TrainSample>, PipelineError> {
    let per_stream: Result<Vec<Vec<TrainSample>>, PipelineError> = streams
        .par_iter()
        .map(|stream| {
            let config = tokenizer.for_capacity(stream.disk_capacity)?;
            let annotated = annotate_stream(stream);
            let slices = slice_stream(&annotated, plan)?;
            let mut samples = Vec::new();
            for slice in &slices {
                let frames = tokenize_frame(slice, frame_commands, &config)?;
                for frame in &frames {
                    let mut labels = Vec::with_capacity(frame.commands);
                    for (i, dc) in slice.commands[frame.start..frame.start + frame.commands]
                        .iter()
                        .enumerate()
                    {
                        labels.push(match dc.base.label {
                            Label::Ransomware => 1.0,
                            Label::Benign => 0.0,
                            Label::Unlabeled => {
                                return Err(PipelineError::Unlabeled {
                                    stream: stream.stream_id.clone(),
                                    index: slice.start + frame.start + i,
                                })
                            }
                        });
                    }
                    samples.push(TrainSample::Clt {
                        tokens: frame.tokens.clone(),
                        labels,
                    });
                }
            }
            Ok(samples)
        })
        .collect();
    Ok(per_stream?.into_iter().flatten().collect())
}

/// One training sample per slice: the flattened patch features plus the
/// per-patch fractional targets.
pub fn plt_train_samples(
    streams: &[Stream],
    plan: SlicePlan,
    windows: PatchWindows,
    bins: &BinConfig,
    mask: PatchFeatureMask,
) -> Result<Vec<TrainSample>, PipelineError> {
    let per_stream: Result<Vec<Vec<TrainSample>>, PipelineError> = streams
        .par_iter()
        .map(|stream| {
            let annotated = annotate_stream(stream);
            let slices = slice_stream(&annotated, plan)?;
            let mut state = BackAverageState::default();
            let mut samples = Vec::new();
            for slice in &slices {
                state = update_back_averages(&state, slice);
                let embeddings = embed_slice(slice, &state, windows, bins, mask, true)?;
                let mut features = Vec::with_capacity(embeddings.len() * crate::plt::EMBED_DIM);
                let mut targets = Vec::with_capacity(embeddings.len());
                for e in &embeddings {
                    features.extend_from_slice(&e.features);
                    targets.push([e.label_read_frac, e.label_write_frac]);
                }
                samples.push(TrainSample::Plt { features, targets });
            }
            Ok(samples)
        })
        .collect();
    Ok(per_stream?.into_iter().flatten().collect())
}

/// Per-slice tabular training matrices: forest features, two-stage
/// features, and the slice labels.
pub struct TabularData {
    pub rf_x: Vec<f64>,
    pub stage1_x: Vec<f64>,
    pub stage2_x: Vec<f64>,
    pub y: Vec<f64>,
    pub slices: usize,
}

pub fn tabular_train_data(streams: &[Stream], plan: SlicePlan) -> Result<TabularData, PipelineError> {
    let mut data = TabularData {
        rf_x: Vec::new(),
        stage1_x: Vec::new(),
        stage2_x: Vec::new(),
        y: Vec::new(),
        slices: 0,
    };
    for stream in streams {
        let annotated = annotate_stream(stream);
        let slices = slice_stream(&annotated, plan)?;
        for slice in &slices {
            let rf = rf_extract_features(slice)?;
            let (s1, s2) = deftpunk_features(slice)?;
            let (truth, _, _) = slice_truth(slice, &stream.stream_id)?;
            data.rf_x.extend_from_slice(&rf);
            data.stage1_x.extend_from_slice(&s1);
            data.stage2_x.extend_from_slice(&s2);
            data.y.push((truth == SliceTruth::Ransomware) as u8 as f64);
            data.slices += 1;
        }
    }
    Ok(data)
}

/// Per-frame (probabilities, labels) pairs for the positional-accuracy
/// analysis and the per-command accuracy checks.
pub fn clt_frame_outcomes(
    streams: &[Stream],
    plan: SlicePlan,
    tokenizer: &TokenizerSettings,
    frame_commands: usize,
    model: &Model,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, PipelineError> {
    let per_stream: Result<Vec<Vec<(Vec<f64>, Vec<f64>)>>, PipelineError> = streams
        .par_iter()
        .map(|stream| {
            let config = tokenizer.for_capacity(stream.disk_capacity)?;
            let annotated = annotate_stream(stream);
            let slices = slice_stream(&annotated, plan)?;
            let mut out = Vec::new();
            for slice in &slices {
                for frame in tokenize_frame(slice, frame_commands, &config)? {
                    let probs = clt_predict_frame(model, &frame.tokens)?;
                    let mut labels = Vec::with_capacity(frame.commands);
                    for (i, dc) in slice.commands[frame.start..frame.start + frame.commands]
                        .iter()
                        .enumerate()
                    {
                        labels.push(match dc.base.label {
                            Label::Ransomware => 1.0,
                            Label::Benign => 0.0,
                            Label::Unlabeled => {
                                return Err(PipelineError::Unlabeled {
                                    stream: stream.stream_id.clone(),
                                    index: slice.start + frame.start + i,
                                })
                            }
                        });
                    }
                    out.push((probs, labels));
                }
            }
            Ok(out)
        })
        .collect();
    Ok(per_stream?.into_iter().flatten().collect())
}

/// Mean absolute error of the patch regressor's fraction pairs on held-out
/// streams.
pub fn plt_patch_mae(
    streams: &[Stream],
    plan: SlicePlan,
    windows: PatchWindows,
    bins: &BinConfig,
    mask: PatchFeatureMask,
    model: &Model,
) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for stream in streams {
        let annotated = annotate_stream(stream);
        let slices = slice_stream(&annotated, plan)?;
        let mut state = BackAverageState::default();
        for slice in &slices {
            state = update_back_averages(&state, slice);
            let embeddings = embed_slice(slice, &state, windows, bins, mask, true)?;
            let features: Vec<f64> = embeddings
                .iter()
                .flat_map(|e| e.features.iter().copied())
                .collect();
            let predictions = plt_predict_patches(model, &features)?;
            for (p, e) in predictions.iter().zip(&embeddings) {
                total += (p[0] - e.label_read_frac).abs() + (p[1] - e.label_write_frac).abs();
                count += 2;
            }
        }
    }
    Ok(total / count as f64)
}
