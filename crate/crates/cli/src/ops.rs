//! Subcommand implementations. Everything here is a pure function of
//! (inputs, flags, seed): repeated invocations reproduce outputs byte for
//! byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use nvguard::baselines::{
    load_model, save_model, DeftPunk, DeftPunkConfig, ForestConfig, RandomForest, TabularModel,
    RF_FEATURE_COUNT,
};
use nvguard::clt::{tokenize_frame, write_token_dump};
use nvguard::derived::{annotate_stream, write_annotated_csv};
use nvguard::eval::{
    cross_validate, group_split, mbd_cdf_csv, report_csv, report_json, CrossValidateConfig,
    MetricsReport, SlicePrediction, SliceTruth, StreamMeta, StreamPredictions,
};
use nvguard::nn::checkpoint;
use nvguard::nn::model::{HeadKind, Model, TransformerConfig};
use nvguard::nn::train::{train, TrainConfig};
use nvguard::pipeline::{
    clt_train_samples, plt_train_samples, predict_streams, tabular_train_data, Scorer,
};
use nvguard::plt::{embed_slice, update_back_averages, write_embedding_dump, BackAverageState};
use nvguard::slicer::slice_stream;
use nvguard::synth::{
    generate_bench_suite, generate_benign, generate_ransomware, BenchConfig, WorkloadSpec,
};
use nvguard::trace::{read_meta, serialize_trace, validate_stream, Label};
use nvguard::Stream;

use crate::settings::{load_traces, sidecar_path, PipelineSidecar, TokenArgs};
use crate::{
    AblateCmd, AnnotateCmd, EmbedCmd, EvalCmd, HwcostCmd, ModelKind, PredictCmd, PresetArg,
    SliceCmd, SynthCmd, TokenizeCmd, TrainCmd,
};

pub fn run_synth(cmd: &SynthCmd, seed: u64) -> Result<()> {
    if cmd.suite {
        let out = &cmd.out;
        let config = BenchConfig {
            benign_streams: cmd.benign,
            ransomware_streams: cmd.ransomware,
            commands_per_stream: cmd.commands,
            seed: if cmd.default_seed { BenchConfig::default().seed } else { seed },
        };
        let streams = generate_bench_suite(&config);
        let train_dir = out.join("train");
        let eval_dir = out.join("eval");
        fs::create_dir_all(&train_dir)?;
        fs::create_dir_all(&eval_dir)?;
        // Stratified alternation: even indices of each kind train, odd eval.
        let mut benign_seen = 0usize;
        let mut rw_seen = 0usize;
        for stream in &streams {
            let counter = if stream.family.is_some() {
                rw_seen += 1;
                rw_seen - 1
            } else {
                benign_seen += 1;
                benign_seen - 1
            };
            let dir = if counter % 2 == 0 { &train_dir } else { &eval_dir };
            serialize_trace(stream, &dir.join(format!("{}.csv", stream.stream_id)))?;
        }
        println!(
            "suite: {} streams ({} benign, {} infected) under {}",
            streams.len(),
            cmd.benign,
            cmd.ransomware,
            out.display()
        );
        return Ok(());
    }

    let spec = match &cmd.spec {
        Some(path) => WorkloadSpec::from_spec_text(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => WorkloadSpec {
            seed,
            ..Default::default()
        },
    };
    let stem = cmd
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".to_string());
    let stream = if cmd.ransomware_kind {
        generate_ransomware(&spec, &stem, cmd.family.as_deref().unwrap_or("family0"))
    } else {
        generate_benign(&spec, &stem)
    };
    serialize_trace(&stream, &cmd.out)?;
    println!(
        "wrote {} commands to {}",
        stream.commands.len(),
        cmd.out.display()
    );
    Ok(())
}

pub fn run_annotate(cmd: &AnnotateCmd) -> Result<()> {
    let streams = load_traces(&cmd.input)?;
    if streams.len() != 1 {
        bail!("annotate expects a single trace file");
    }
    let violations = validate_stream(&streams[0]);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        bail!("{} invariant violations in {}", violations.len(), cmd.input.display());
    }
    let annotated = annotate_stream(&streams[0]);
    write_annotated_csv(&annotated, &cmd.out)?;
    println!("annotated {} commands into {}", annotated.commands.len(), cmd.out.display());
    Ok(())
}

pub fn run_slice(cmd: &SliceCmd) -> Result<()> {
    let streams = load_traces(&cmd.input)?;
    let plan = cmd.slice.plan();
    let mut out = String::from(
        "stream_id,slice_index,start,commands,bytes,seconds,partial,ransomware_commands\n",
    );
    for stream in &streams {
        let annotated = annotate_stream(stream);
        let slices = slice_stream(&annotated, plan)?;
        for slice in &slices {
            let seconds = slice
                .commands
                .last()
                .map(|l| l.base.timestamp - slice.commands[0].base.timestamp)
                .unwrap_or(0.0);
            let rw = slice
                .commands
                .iter()
                .filter(|c| c.base.label == Label::Ransomware)
                .count();
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{},{}\n",
                stream.stream_id,
                slice.slice_index,
                slice.start,
                slice.len(),
                slice.volume(),
                seconds,
                slice.partial as u8,
                rw
            ));
        }
    }
    match &cmd.out {
        Some(path) => fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

pub fn run_tokenize(cmd: &TokenizeCmd) -> Result<()> {
    let streams = load_traces(&cmd.input)?;
    if streams.len() != 1 {
        bail!("tokenize expects a single trace file");
    }
    let stream = &streams[0];
    let config = cmd.token.tokenizer(stream.disk_capacity)?;
    let annotated = annotate_stream(stream);
    let slices = slice_stream(&annotated, cmd.slice.plan())?;
    let mut frames = Vec::new();
    for slice in &slices {
        frames.extend(tokenize_frame(slice, cmd.token.frame_commands, &config)?);
    }
    write_token_dump(&frames, &cmd.out)?;
    println!("wrote {} frames to {}", frames.len(), cmd.out.display());
    Ok(())
}

pub fn run_embed(cmd: &EmbedCmd) -> Result<()> {
    let streams = load_traces(&cmd.input)?;
    if streams.len() != 1 {
        bail!("embed expects a single trace file");
    }
    let stream = &streams[0];
    let plan = cmd.slice.plan();
    let windows = cmd.patch.windows(plan.mode());
    let bins = cmd.patch.bins();
    let mask = cmd.patch.mask()?;
    let labeled = !cmd.unlabeled
        && stream.commands.iter().all(|c| c.label != Label::Unlabeled);
    let annotated = annotate_stream(stream);
    let slices = slice_stream(&annotated, plan)?;
    let mut state = BackAverageState::default();
    let mut embeddings = Vec::new();
    for slice in &slices {
        state = update_back_averages(&state, slice);
        embeddings.extend(embed_slice(slice, &state, windows, &bins, mask, labeled)?);
    }
    write_embedding_dump(&embeddings, &cmd.out)?;
    println!(
        "wrote {} patch embeddings to {} (labels: {})",
        embeddings.len(),
        cmd.out.display(),
        if labeled { "yes" } else { "no" }
    );
    Ok(())
}

fn transformer_config(cmd: &TrainCmd, kind: HeadKind) -> TransformerConfig {
    let tokens_per_command = if cmd.token.single_token { 1 } else { 2 };
    let mut config = match (kind, cmd.preset) {
        (HeadKind::CltHead, PresetArg::Desk) => {
            TransformerConfig::clt_desk(cmd.token.frame_commands)
        }
        (HeadKind::CltHead, PresetArg::Full) => TransformerConfig::clt_full(),
        (HeadKind::PltHead, PresetArg::Desk) => TransformerConfig::plt_desk(),
        (HeadKind::PltHead, PresetArg::Full) => TransformerConfig::plt_full(),
    };
    if kind == HeadKind::CltHead {
        config.context_tokens = tokens_per_command * cmd.token.frame_commands;
        config.pair_tokens = !cmd.token.single_token;
        if cmd.token.single_token {
            config.vocab_size = nvguard::clt::SINGLE_TOKEN_VOCAB_SIZE as usize;
        }
    }
    if let Some(d) = cmd.dropout {
        config.dropout = d;
    }
    config
}

pub fn run_train(cmd: &TrainCmd, seed: u64) -> Result<()> {
    let streams = load_traces(&cmd.data)?;
    let plan = cmd.slice.plan();
    let sidecar = PipelineSidecar {
        slice: cmd.slice.clone(),
        token: cmd.token.clone(),
        patch: cmd.patch.clone(),
    };

    match cmd.model {
        ModelKind::Clt | ModelKind::Plt => {
            let kind = if cmd.model == ModelKind::Clt {
                HeadKind::CltHead
            } else {
                HeadKind::PltHead
            };
            let config = transformer_config(cmd, kind);
            let samples = if kind == HeadKind::CltHead {
                let settings = cmd.token.settings()?;
                clt_train_samples(&streams, plan, &settings, cmd.token.frame_commands)?
            } else {
                plt_train_samples(
                    &streams,
                    plan,
                    cmd.patch.windows(plan.mode()),
                    &cmd.patch.bins(),
                    cmd.patch.mask()?,
                )?
            };
            let mut train_config = if kind == HeadKind::CltHead {
                TrainConfig::clt_default(cmd.epochs, seed)
            } else {
                TrainConfig::plt_default(cmd.epochs, seed)
            };
            if let Some(b) = cmd.batch {
                train_config.batch_size = b;
            }
            if let Some(lr) = cmd.lr {
                train_config.learning_rate = lr;
            }
            let mut model = Model::new(config, seed)?;
            eprintln!(
                "training {:?}: {} samples, {} parameters, {} epochs",
                cmd.model,
                samples.len(),
                model.parameter_count(),
                cmd.epochs
            );
            let (report, adam) = train(&mut model, &samples, &train_config)?;
            for (epoch, loss) in report.epoch_losses.iter().enumerate() {
                eprintln!("epoch {epoch:>4}  loss {loss:.6}");
            }
            checkpoint::save(&model, Some(&adam), cmd.epochs as u64, seed, &cmd.out)?;
        }
        ModelKind::Rf | ModelKind::Deftpunk => {
            let data = tabular_train_data(&streams, plan)?;
            eprintln!(
                "training {:?}: {} slices, {} positives",
                cmd.model,
                data.slices,
                data.y.iter().filter(|&&v| v > 0.5).count()
            );
            let model = if cmd.model == ModelKind::Rf {
                TabularModel::Forest(RandomForest::fit(
                    &data.rf_x,
                    &data.y,
                    RF_FEATURE_COUNT,
                    &ForestConfig {
                        seed,
                        ..Default::default()
                    },
                ))
            } else {
                let config = DeftPunkConfig {
                    boost: nvguard::baselines::GbtConfig {
                        seed,
                        ..DeftPunkConfig::default().boost
                    },
                    ..Default::default()
                };
                TabularModel::DeftPunk(DeftPunk::fit(&data.stage1_x, &data.stage2_x, &data.y, &config)?)
            };
            save_model(&model, &cmd.out)?;
        }
    }
    fs::write(sidecar_path(&cmd.out), sidecar.to_text())?;
    println!("model written to {}", cmd.out.display());
    Ok(())
}

/// The trained artifacts a prediction run can load.
pub enum LoadedModel {
    Sequence(Box<Model>),
    Tabular(TabularModel),
}

pub fn load_any_model(path: &Path) -> Result<LoadedModel> {
    let mut magic = [0u8; 4];
    use std::io::Read;
    fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_exact(&mut magic)?;
    match &magic {
        checkpoint::MAGIC => Ok(LoadedModel::Sequence(Box::new(
            checkpoint::load(path)?.model,
        ))),
        nvguard::baselines::MODEL_MAGIC => Ok(LoadedModel::Tabular(load_model(path)?)),
        other => bail!("{} is not a model file (magic {other:?})", path.display()),
    }
}

fn scorer_for<'a>(
    model: &'a LoadedModel,
    sidecar: &PipelineSidecar,
) -> Result<(Scorer<'a>, nvguard::slicer::SlicePlan)> {
    let plan = sidecar.slice.plan();
    let scorer = match model {
        LoadedModel::Sequence(model) => match model.config.head {
            HeadKind::CltHead => {
                let frame = model.config.context_tokens
                    / if model.config.pair_tokens { 2 } else { 1 };
                Scorer::Clt {
                    model,
                    tokenizer: sidecar.token.settings()?,
                    frame_commands: frame,
                }
            }
            HeadKind::PltHead => Scorer::Plt {
                model,
                windows: sidecar.patch.windows(plan.mode()),
                bins: sidecar.patch.bins(),
                mask: sidecar.patch.mask()?,
            },
        },
        LoadedModel::Tabular(TabularModel::Forest(f)) => Scorer::Forest(f),
        LoadedModel::Tabular(TabularModel::DeftPunk(d)) => Scorer::DeftPunk(d),
    };
    Ok((scorer, plan))
}

pub fn predictions_csv(predictions: &[StreamPredictions]) -> String {
    let mut out = String::from(
        "stream_id,slice_index,probability,truth,benign_bytes,ransomware_write_bytes,partial\n",
    );
    for stream in predictions {
        for s in &stream.slices {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.stream_id,
                s.slice_index,
                s.probability,
                (s.truth == SliceTruth::Ransomware) as u8,
                s.benign_bytes,
                s.ransomware_write_bytes,
                s.partial as u8
            ));
        }
    }
    out
}

pub fn parse_predictions_csv(text: &str) -> Result<Vec<StreamPredictions>> {
    let mut streams: Vec<StreamPredictions> = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            bail!("predictions line {}: expected 7 columns", idx + 1);
        }
        let pred = SlicePrediction {
            stream_id: cols[0].to_string(),
            slice_index: cols[1].parse()?,
            probability: cols[2].parse()?,
            truth: if cols[3] == "1" {
                SliceTruth::Ransomware
            } else {
                SliceTruth::Benign
            },
            benign_bytes: cols[4].parse()?,
            ransomware_write_bytes: cols[5].parse()?,
            partial: cols[6] == "1",
        };
        match streams.last_mut() {
            Some(last) if last.stream_id == pred.stream_id => last.slices.push(pred),
            _ => streams.push(StreamPredictions {
                stream_id: pred.stream_id.clone(),
                slices: vec![pred],
            }),
        }
    }
    Ok(streams)
}

pub fn run_predict(cmd: &PredictCmd) -> Result<()> {
    let model = load_any_model(&cmd.model)?;
    let sidecar = match fs::read_to_string(sidecar_path(&cmd.model)) {
        Ok(text) => PipelineSidecar::from_text(&text)?,
        Err(_) => PipelineSidecar {
            slice: cmd.slice.clone(),
            token: cmd.token.clone(),
            patch: cmd.patch.clone(),
        },
    };
    let streams = load_traces(&cmd.input)?;
    let (scorer, plan) = scorer_for(&model, &sidecar)?;
    let predictions = predict_streams(&streams, plan, &scorer)?;
    let csv = predictions_csv(&predictions);
    match &cmd.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "scored {} slices across {} streams",
        predictions.iter().map(|p| p.slices.len()).sum::<usize>(),
        predictions.len()
    );
    Ok(())
}

pub fn run_eval(cmd: &EvalCmd, seed: u64) -> Result<()> {
    if let Some(folds) = cmd.group_folds {
        let meta_dir = cmd
            .meta_dir
            .as_ref()
            .context("--group-folds needs --meta-dir for family tags")?;
        let mut metas = Vec::new();
        let mut files: Vec<PathBuf> = fs::read_dir(meta_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "meta"))
            .collect();
        files.sort();
        for f in &files {
            let (_, family) = read_meta(&f)?;
            let stream_id = f
                .file_stem()
                .map(|s| {
                    let s = s.to_string_lossy();
                    s.trim_end_matches(".csv").to_string()
                })
                .unwrap_or_default();
            metas.push(StreamMeta {
                stream_id,
                is_ransomware: family.is_some(),
                family,
            });
        }
        let folds = group_split(&metas, folds, seed)?;
        let mut out = String::from("fold,role,stream_id\n");
        for (i, fold) in folds.iter().enumerate() {
            for id in &fold.train {
                out.push_str(&format!("{i},train,{id}\n"));
            }
            for id in &fold.id_test {
                out.push_str(&format!("{i},id_test,{id}\n"));
            }
            for id in &fold.ood_test {
                out.push_str(&format!("{i},ood_test,{id}\n"));
            }
        }
        match &cmd.folds_out {
            Some(path) => fs::write(path, out)?,
            None => print!("{out}"),
        }
        return Ok(());
    }

    let pred_path = cmd.pred.as_ref().context("--pred FILE is required")?;
    let streams = parse_predictions_csv(&fs::read_to_string(pred_path)?)?;
    let config = CrossValidateConfig {
        repeats: cmd.repeats,
        gb_per_false_alarm: cmd.gb_per_alarm,
        mbd_quantile: cmd.quantile,
        include_partial_in_calibration: cmd.include_partial,
        seed,
        ..Default::default()
    };
    let report = cross_validate(&streams, &config)?;
    emit_report(&report, cmd.format, cmd.report.as_deref())?;
    if let Some(path) = &cmd.mbd_cdf {
        fs::write(path, mbd_cdf_csv(&report.mbd_samples))?;
    }
    Ok(())
}

pub fn emit_report(
    report: &MetricsReport,
    format: crate::FormatArg,
    path: Option<&Path>,
) -> Result<()> {
    let text = match format {
        crate::FormatArg::Csv => report_csv(report),
        crate::FormatArg::Json => report_json(report),
    };
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn run_hwcost(cmd: &HwcostCmd) -> Result<()> {
    let config = match cmd.model {
        ModelKind::Clt => TransformerConfig::clt_full(),
        ModelKind::Plt => TransformerConfig::plt_full(),
        other => bail!("hwcost applies to the sequence models, got {other:?}"),
    };
    let report = nvguard::hwcost::model_cost(&config, cmd.multipliers, cmd.clock);
    match cmd.format {
        crate::HwFormatArg::Text => print!("{}", report.render_text()),
        crate::HwFormatArg::Csv => print!("{}", report.render_csv()),
    }
    Ok(())
}

/// Train, predict, and cross-validate one pipeline variant; returns the
/// metrics row for the sweep table.
fn ablate_variant(
    cmd: &AblateCmd,
    seed: u64,
    label: &str,
    token: &TokenArgs,
    drop_patch: &[String],
    train_streams: &[Stream],
    eval_streams: &[Stream],
) -> Result<(String, MetricsReport)> {
    let plan = cmd.slice.plan();
    let mut patch = cmd.patch.clone();
    patch.drop_patch = drop_patch.to_vec();

    let report = match cmd.model {
        ModelKind::Clt => {
            let settings = token.settings()?;
            let samples = clt_train_samples(train_streams, plan, &settings, token.frame_commands)?;
            let mut config = TransformerConfig::clt_desk(token.frame_commands);
            config.pair_tokens = !token.single_token;
            if token.single_token {
                config.vocab_size = nvguard::clt::SINGLE_TOKEN_VOCAB_SIZE as usize;
                config.context_tokens = token.frame_commands;
            }
            let mut model = Model::new(config, seed)?;
            train(
                &mut model,
                &samples,
                &TrainConfig::clt_default(cmd.epochs, seed),
            )?;
            let scorer = Scorer::Clt {
                model: &model,
                tokenizer: settings,
                frame_commands: token.frame_commands,
            };
            let predictions = predict_streams(eval_streams, plan, &scorer)?;
            cross_validate(
                &predictions,
                &CrossValidateConfig {
                    repeats: cmd.repeats,
                    seed,
                    ..Default::default()
                },
            )?
        }
        ModelKind::Plt => {
            let windows = patch.windows(plan.mode());
            let mask = patch.mask()?;
            let bins = patch.bins();
            let samples = plt_train_samples(train_streams, plan, windows, &bins, mask)?;
            let mut model = Model::new(TransformerConfig::plt_desk(), seed)?;
            train(
                &mut model,
                &samples,
                &TrainConfig::plt_default(cmd.epochs, seed),
            )?;
            let scorer = Scorer::Plt {
                model: &model,
                windows,
                bins,
                mask,
            };
            let predictions = predict_streams(eval_streams, plan, &scorer)?;
            cross_validate(
                &predictions,
                &CrossValidateConfig {
                    repeats: cmd.repeats,
                    seed,
                    ..Default::default()
                },
            )?
        }
        other => bail!("ablate applies to the sequence models, got {other:?}"),
    };
    Ok((label.to_string(), report))
}

pub fn run_ablate(cmd: &AblateCmd, seed: u64) -> Result<()> {
    let train_streams = load_traces(&cmd.data)?;
    let eval_streams = load_traces(&cmd.eval_data)?;

    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    if !cmd.contexts.is_empty() {
        // Context sweep: frame size in commands.
        for &context in &cmd.contexts {
            let mut token = cmd.token.clone();
            token.frame_commands = context;
            rows.push(ablate_variant(
                cmd,
                seed,
                &format!("context{context}"),
                &token,
                &cmd.patch.drop_patch,
                &train_streams,
                &eval_streams,
            )?);
        }
    } else {
        let variants: Vec<String> = if cmd.drops.is_empty() {
            match cmd.model {
                ModelKind::Clt => ["none", "dt", "size", "opcode", "offset", "ov", "index"],
                _ => ["none", "size", "ov", "offset", "lapse", "dt", "fractions"],
            }
            .iter()
            .map(|s| s.to_string())
            .collect()
        } else {
            cmd.drops.clone()
        };
        for variant in &variants {
            let (token_drop, patch_drop): (Vec<String>, Vec<String>) = if variant == "none" {
                (Vec::new(), Vec::new())
            } else if cmd.model == ModelKind::Clt {
                (vec![variant.clone()], Vec::new())
            } else {
                (Vec::new(), vec![variant.clone()])
            };
            let mut token = cmd.token.clone();
            token.drop = token_drop;
            rows.push(ablate_variant(
                cmd,
                seed,
                &format!("drop_{variant}"),
                &token,
                &patch_drop,
                &train_streams,
                &eval_streams,
            )?);
        }
    }

    let mut out =
        String::from("variant,mdr_percent,far_percent,f1_percent,p_miss_percent,mbd3_megabytes\n");
    for (label, report) in &rows {
        let cell = |v: &Option<nvguard::eval::MetricValue>| {
            v.map(|m| format!("{:.4}", m.mean)).unwrap_or_default()
        };
        out.push_str(&format!(
            "{label},{},{},{},{},{}\n",
            cell(&report.mdr),
            cell(&report.far),
            cell(&report.f1),
            cell(&report.p_miss),
            cell(&report.mbd3),
        ));
    }
    match &cmd.out {
        Some(path) => fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}
