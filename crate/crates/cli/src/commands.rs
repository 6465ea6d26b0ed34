//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use longenc_core::bench::{
    generate_workload, measure, write_matrix_csv, write_measurements_csv, ThroughputResult,
};
use longenc_core::encoder::{EncoderModel, ModelConfig};
use longenc_core::finetune::{
    entity_f1, finetune, read_classification_jsonl, read_ner_jsonl, weighted_f1_multi,
    weighted_f1_single, Split, TaskDataset, TaskKind,
};
use longenc_core::pretrain::{
    inspect_checkpoint, read_jsonl, write_loss_log, Checkpoint, CheckpointPoint, CorpusSet,
    LossRow, Trainer,
};
use longenc_core::tokenizer::Vocab;

use crate::config::{load_config, BenchModel, RunConfig, TaskSection};
use crate::manifest::Manifest;
use crate::CliError;

/// Environment variable that re-roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "LONGENC_OUTPUT_ROOT";

fn resolve_output_dir(config: &RunConfig) -> PathBuf {
    let dir = PathBuf::from(&config.output_dir);
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

fn with_manifest(
    output_dir: &Path,
    command: &str,
    config_echo: Value,
    inputs: &[PathBuf],
    body: impl FnOnce() -> Result<(), CliError>,
) -> Result<(), CliError> {
    let manifest = Manifest::start(output_dir, command, config_echo, inputs)?;
    match body() {
        Ok(()) => {
            manifest.finish("ok");
            Ok(())
        }
        Err(e) => {
            manifest.finish(&format!("failed: {e}"));
            Err(e)
        }
    }
}

fn load_vocab(path: &str) -> Result<Vocab, CliError> {
    Vocab::load(Path::new(path))
        .map_err(|e| CliError::Data(format!("cannot load vocabulary {path}: {e}")))
}

fn corpus_inputs(config: &RunConfig, config_path: &Path) -> Vec<PathBuf> {
    let mut inputs = vec![config_path.to_path_buf()];
    inputs.extend(config.tokenizer.corpus_files.iter().map(PathBuf::from));
    inputs
}

pub fn vocab_train(config_path: &Path, sets: &[String]) -> Result<(), CliError> {
    let (config, echo) = load_config(config_path, sets)?;
    let output_dir = resolve_output_dir(&config);
    with_manifest(&output_dir, "vocab-train", echo, &corpus_inputs(&config, config_path), || {
        let mut texts = Vec::new();
        for file in &config.tokenizer.corpus_files {
            let records = read_jsonl(Path::new(file))?;
            texts.extend(records.into_iter().map(|r| r.text));
        }
        let vocab = Vocab::train(texts.iter(), config.tokenizer.target_size)?;
        let vocab_path = Path::new(&config.tokenizer.vocab_file);
        if let Some(parent) = vocab_path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
            }
        }
        vocab.save(vocab_path)?;
        println!(
            "trained vocabulary: {} entries (target {}) -> {}",
            vocab.size(),
            config.tokenizer.target_size,
            vocab_path.display()
        );
        Ok(())
    })
}

pub fn pretrain(
    config_path: &Path,
    sets: &[String],
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let (config, echo) = load_config(config_path, sets)?;
    let output_dir = resolve_output_dir(&config);
    let mut inputs = corpus_inputs(&config, config_path);
    inputs.push(PathBuf::from(&config.tokenizer.vocab_file));
    if let Some(r) = resume {
        inputs.push(r.to_path_buf());
    }
    with_manifest(&output_dir, "pretrain", echo, &inputs, || {
        if config.phases.is_empty() {
            return Err(CliError::Config("no phases configured".into()));
        }
        let vocab = load_vocab(&config.tokenizer.vocab_file)?;
        let model_config = config.model.resolve(vocab.size())?;
        let mut records = Vec::new();
        for file in &config.tokenizer.corpus_files {
            records.extend(read_jsonl(Path::new(file))?);
        }
        let corpora = CorpusSet::from_records(
            &records,
            &vocab,
            model_config.max_seq_len,
            config.tokenizer.val_fraction,
            config.global_seed,
        );

        let mut trainer = match resume {
            Some(path) => {
                let ckpt = Checkpoint::<f32>::load(path)?;
                ckpt.ensure_config(&model_config)?;
                Trainer::from_checkpoint(ckpt)?
            }
            None => Trainer::<f32>::new(model_config.clone(), config.global_seed)?,
        };

        let ckpt_dir = output_dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", ckpt_dir.display())))?;
        let mut rows: Vec<LossRow> = Vec::new();
        let start_phase = trainer.phase_index().max(1);
        for (i, phase) in config.phases.iter().enumerate() {
            let phase_number = (i + 1) as u32;
            if phase_number < start_phase {
                continue;
            }
            trainer.run_phase(
                phase,
                phase_number,
                &corpora,
                &vocab,
                |row| rows.push(row.clone()),
                |ckpt, point| {
                    let name = match point {
                        CheckpointPoint::PhaseStart => format!("phase{phase_number}-start.ckpt"),
                        CheckpointPoint::Interval => {
                            format!("phase{phase_number}-step{}.ckpt", ckpt.step_in_phase)
                        }
                        CheckpointPoint::PhaseEnd => format!("phase{phase_number}-final.ckpt"),
                    };
                    ckpt.save(&ckpt_dir.join(name))
                },
            )?;
            println!(
                "phase {phase_number} ({}) complete at global step {}",
                phase.name,
                trainer.global_step()
            );
        }
        let log_path = output_dir.join("loss_log.csv");
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &rows).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(&log_path, buf)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", log_path.display())))?;
        println!(
            "wrote {} loss rows -> {}",
            rows.len(),
            log_path.display()
        );
        Ok(())
    })
}

pub fn finetune_cmd(
    config_path: &Path,
    sets: &[String],
    task_name: &str,
    checkpoint: &Path,
) -> Result<(), CliError> {
    let (config, echo) = load_config(config_path, sets)?;
    let output_dir = resolve_output_dir(&config);
    let task = config
        .tasks
        .iter()
        .find(|t| t.spec.name == task_name)
        .ok_or_else(|| CliError::Config(format!("no task named {task_name:?} in config")))?;
    let mut inputs = vec![
        config_path.to_path_buf(),
        checkpoint.to_path_buf(),
        PathBuf::from(&config.tokenizer.vocab_file),
    ];
    for p in [&task.dataset.train, &task.dataset.val, &task.dataset.test] {
        inputs.push(PathBuf::from(p));
    }
    with_manifest(&output_dir, "finetune", echo, &inputs, || {
        let vocab = load_vocab(&config.tokenizer.vocab_file)?;
        let ckpt = Checkpoint::<f32>::load(checkpoint)?;
        let model = EncoderModel::from_parts(ckpt.config, ckpt.params, None)?;
        let data = load_task_dataset(task)?;
        let report = finetune(&model, &task.spec, &data, &vocab, &config.model.preset)?;
        let report_path = output_dir.join(format!("report-{task_name}.csv"));
        let mut buf = Vec::new();
        report
            .write_csv(&mut buf)
            .map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(&report_path, buf)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", report_path.display())))?;
        for (seed, value) in &report.per_seed {
            println!("seed {seed}: {} = {value:.4}", report.metric);
        }
        println!(
            "task {task_name}: chosen lr {}, median {} = {:.4} -> {}",
            report.chosen_lr,
            report.metric,
            report.median,
            report_path.display()
        );
        Ok(())
    })
}

fn load_task_dataset(task: &TaskSection) -> Result<TaskDataset, CliError> {
    let paths = [&task.dataset.train, &task.dataset.val, &task.dataset.test];
    match task.spec.kind {
        TaskKind::TokenBio => {
            let mut splits = paths
                .iter()
                .map(|p| read_ner_jsonl(Path::new(p)))
                .collect::<Result<Vec<_>, _>>()?;
            let test = splits.pop().unwrap();
            let val = splits.pop().unwrap();
            let train = splits.pop().unwrap();
            Ok(TaskDataset::Ner(Split { train, val, test }))
        }
        _ => {
            let mut splits = paths
                .iter()
                .map(|p| read_classification_jsonl(Path::new(p)))
                .collect::<Result<Vec<_>, _>>()?;
            let test = splits.pop().unwrap();
            let val = splits.pop().unwrap();
            let train = splits.pop().unwrap();
            Ok(TaskDataset::Classification(Split { train, val, test }))
        }
    }
}

pub fn eval_cmd(kind: &str, gold: &Path, pred: &Path) -> Result<(), CliError> {
    match kind {
        "entity" => {
            let gold_recs = read_ner_jsonl(gold)?;
            let pred_recs = read_ner_jsonl(pred)?;
            let truth: Vec<Vec<String>> = gold_recs.into_iter().map(|r| r.tags).collect();
            let predicted: Vec<Vec<String>> = pred_recs.into_iter().map(|r| r.tags).collect();
            let scores = entity_f1(&truth, &predicted)?;
            println!(
                "entity_f1 precision={:.6} recall={:.6} f1={:.6}",
                scores.precision, scores.recall, scores.f1
            );
        }
        "single" => {
            let gold_recs = read_classification_jsonl(gold)?;
            let pred_recs = read_classification_jsonl(pred)?;
            let truth = labels_single(&gold_recs, gold)?;
            let predicted = labels_single(&pred_recs, pred)?;
            let value = weighted_f1_single(&truth, &predicted)?;
            println!("weighted_f1 {value:.6}");
        }
        "multi" => {
            let gold_recs = read_classification_jsonl(gold)?;
            let pred_recs = read_classification_jsonl(pred)?;
            let truth = labels_multi(&gold_recs, gold)?;
            let predicted = labels_multi(&pred_recs, pred)?;
            let value = weighted_f1_multi(&truth, &predicted)?;
            println!("weighted_f1 {value:.6}");
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown eval kind {other:?} (expected entity, single, or multi)"
            )))
        }
    }
    Ok(())
}

fn labels_single(
    records: &[longenc_core::finetune::ClassificationRecord],
    path: &Path,
) -> Result<Vec<usize>, CliError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.label.ok_or_else(|| {
                CliError::Data(format!("{} line {}: missing label", path.display(), i + 1))
            })
        })
        .collect()
}

fn labels_multi(
    records: &[longenc_core::finetune::ClassificationRecord],
    path: &Path,
) -> Result<Vec<Vec<bool>>, CliError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.labels
                .as_ref()
                .map(|ls| ls.iter().map(|&b| b != 0).collect())
                .ok_or_else(|| {
                    CliError::Data(format!("{} line {}: missing labels", path.display(), i + 1))
                })
        })
        .collect()
}

fn resolve_bench_model(
    entry: &BenchModel,
    vocab_size: usize,
) -> Result<EncoderModel<f32>, CliError> {
    match (&entry.checkpoint, &entry.preset) {
        (Some(path), _) => {
            let ckpt = Checkpoint::<f32>::load(Path::new(path))?;
            Ok(EncoderModel::from_parts(ckpt.config, ckpt.params, None)?)
        }
        (None, Some(preset)) => {
            let mut config = ModelConfig::preset(preset, vocab_size).ok_or_else(|| {
                CliError::Config(format!("bench model {}: unknown preset {preset:?}", entry.name))
            })?;
            if let Some(v) = entry.max_seq_len {
                config.max_seq_len = v;
            }
            if let Some(v) = entry.global_period {
                config.global_period = v;
            }
            if let Some(v) = entry.window {
                config.window = v;
            }
            config.validate().map_err(|e| CliError::Config(e.to_string()))?;
            Ok(EncoderModel::new(config, entry.seed.unwrap_or(0))?)
        }
        (None, None) => Err(CliError::Config(format!(
            "bench model {}: needs either a checkpoint or a preset",
            entry.name
        ))),
    }
}

pub fn bench_cmd(config_path: &Path, sets: &[String]) -> Result<(), CliError> {
    let (config, echo) = load_config(config_path, sets)?;
    let output_dir = resolve_output_dir(&config);
    let mut inputs = vec![
        config_path.to_path_buf(),
        PathBuf::from(&config.tokenizer.vocab_file),
    ];
    if let Some(bench) = &config.bench {
        for m in &bench.models {
            if let Some(ckpt) = &m.checkpoint {
                inputs.push(PathBuf::from(ckpt));
            }
        }
    }
    with_manifest(&output_dir, "bench", echo, &inputs, || {
        let bench = config
            .bench
            .as_ref()
            .ok_or_else(|| CliError::Config("no bench section in config".into()))?;
        let vocab = load_vocab(&config.tokenizer.vocab_file)?;
        let pad = vocab.specials().pad;

        let mut workload_docs = Vec::new();
        for spec in &bench.workloads {
            workload_docs.push(generate_workload(spec, &vocab)?);
        }

        let mut entries: Vec<(String, ThroughputResult)> = Vec::new();
        let workload_ids: Vec<String> = bench.workloads.iter().map(|w| w.id.clone()).collect();
        type MatrixRows = Vec<(String, Vec<Option<f64>>)>;
        let mut matrices: Vec<(longenc_core::bench::ExecutionMode, MatrixRows)> =
            bench.modes.iter().map(|&m| (m, Vec::new())).collect();

        for entry in &bench.models {
            let model = resolve_bench_model(entry, vocab.size())?;
            for (mode, matrix) in matrices.iter_mut() {
                let mut cells = Vec::with_capacity(bench.workloads.len());
                for (spec, docs) in bench.workloads.iter().zip(&workload_docs) {
                    if spec.max_len > model.config().max_seq_len {
                        cells.push(None); // unsupported context: dash in the matrix
                        continue;
                    }
                    let result = measure(
                        &model,
                        spec,
                        docs,
                        *mode,
                        bench.runs,
                        bench.batch_capacity_tokens,
                        pad,
                    )?;
                    println!(
                        "{} | {} | {}: {:.3} kTok/s over {} runs",
                        entry.name,
                        spec.id,
                        mode.label(),
                        result.kilo_tokens_per_second,
                        result.runs
                    );
                    cells.push(Some(result.kilo_tokens_per_second));
                    entries.push((entry.name.clone(), result));
                }
                matrix.push((entry.name.clone(), cells));
            }
        }

        let long_path = output_dir.join("measurements.csv");
        let mut buf = Vec::new();
        write_measurements_csv(&mut buf, &entries).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(&long_path, buf)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", long_path.display())))?;
        for (mode, rows) in &matrices {
            let path = output_dir.join(format!("matrix-{}.csv", mode.label()));
            let mut buf = Vec::new();
            write_matrix_csv(&mut buf, &workload_ids, rows)
                .map_err(|e| CliError::Data(e.to_string()))?;
            fs::write(&path, buf)
                .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        }
        println!("wrote {} measurements -> {}", entries.len(), long_path.display());
        Ok(())
    })
}

pub fn schedule_dump(
    config_path: &Path,
    sets: &[String],
    phase: usize,
    total_steps: usize,
) -> Result<(), CliError> {
    let (config, echo) = load_config(config_path, sets)?;
    let output_dir = resolve_output_dir(&config);
    with_manifest(
        &output_dir,
        "schedule-dump",
        echo,
        &[config_path.to_path_buf()],
        || {
            if phase == 0 || phase > config.phases.len() {
                return Err(CliError::Config(format!(
                    "phase {phase} out of range (config has {} phases)",
                    config.phases.len()
                )));
            }
            let spec = &config.phases[phase - 1];
            let scheduler = spec.scheduler(total_steps)?;
            let path = output_dir.join(format!("schedule-phase{phase}.csv"));
            let mut out = String::from("step,lr\n");
            for step in 0..=scheduler.total_steps() {
                let lr = scheduler.lr_at(step)?;
                out.push_str(&format!("{step},{lr}\n"));
            }
            fs::write(&path, out)
                .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
            println!(
                "dumped {} steps of phase {phase} ({}) -> {}",
                total_steps,
                spec.name,
                path.display()
            );
            Ok(())
        },
    )
}

pub fn checkpoint_inspect(path: &Path) -> Result<(), CliError> {
    let header = inspect_checkpoint(path)?;
    println!("format_version: {}", header.version);
    println!("phase: {}", header.phase_index);
    println!("step_in_phase: {}", header.step_in_phase);
    println!("global_step: {}", header.global_step);
    let c = &header.config;
    println!(
        "model: {} layers, d_model {}, {} heads, d_ff {}, vocab {}",
        c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size
    );
    println!(
        "context: {} tokens, window {}, global every {} layers",
        c.max_seq_len, c.window, c.global_period
    );
    Ok(())
}
