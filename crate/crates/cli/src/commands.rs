//! One function per subcommand. Each claims its run directory with a
//! manifest before doing any work.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kgs4::bandpower::{band_power, BandDefinition, LOG_EPS};
use kgs4::corpus::{load_recording, make_split, write_recording, TARGET_FS};
use kgs4::network::ModelConfig;
use kgs4::nn::mix_seed;
use kgs4::preprocess::preprocess_pipeline;
use kgs4::report::{
    accuracy_table, collect_results, fraction_table, plot_accuracy_vs_fraction, write_results_csv, write_summary_csv,
};
use kgs4::training::finetune::Backbone;
use kgs4::training::synthetic::{alpha_beta_task, synthetic_corpus};
use kgs4::training::{
    finetune, pretrain, sweep, Checkpoint, Mode, PretrainPaths, SweepAxis, SweepInputs, SweepRow, TrainConfig,
};
use kgs4::Error;

use crate::config::Loaded;
use crate::data::{channel_labels, concat_recording, erf_files, fit_channels, load_chunks, load_task, trial_annotations};
use crate::manifest::RunManifest;
use crate::UsageError;

/// Label of runs fine-tuned from random initialization.
pub const SCRATCH_LABEL: &str = "fully-trainable";

pub struct RunContext {
    pub loaded: Loaded,
    pub out_root: PathBuf,
    pub seed: u64,
    pub args: Vec<String>,
}

impl RunContext {
    fn train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.loaded.config.train.clone() }
    }

    fn experiment_id(&self, fallback: String) -> Result<String> {
        let id = self.loaded.config.experiment_id.clone().unwrap_or(fallback);
        let valid = !id.is_empty()
            && id != "."
            && id != ".."
            && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !valid {
            return Err(UsageError(format!("experiment id {id:?} must be a plain name of [A-Za-z0-9._-]")).into());
        }
        Ok(id)
    }

    /// Runs `work` inside the run directory `<out>/<id>`, bracketed by the
    /// manifest.
    fn run(&self, command: &str, id: String, work: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let dir = self.out_root.join(&id);
        let mut manifest = RunManifest::new(
            &id,
            command,
            self.args.clone(),
            self.loaded.path.clone(),
            self.loaded.sha256.clone(),
            self.seed,
            dir.clone(),
        );
        manifest.claim()?;
        let result = work(&dir);
        let status = match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("failed: {e:#}"),
        };
        manifest.finish(&status)?;
        result
    }
}

fn load_checkpoint(path: Option<&Path>) -> Result<Option<Checkpoint>> {
    match path {
        None => Ok(None),
        Some(p) if !p.is_file() => Err(UsageError(format!("checkpoint {} does not exist", p.display())).into()),
        Some(p) => Ok(Some(Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?)),
    }
}

/// Fine-tuning mode implied by the presence of a checkpoint.
fn finetune_mode(checkpoint: Option<&Checkpoint>, cfg: &TrainConfig) -> Result<Mode> {
    match (checkpoint, cfg.mode) {
        (Some(_), Mode::Scratch) => Err(UsageError("train.mode = \"scratch\" cannot load a checkpoint".into()).into()),
        (Some(_), _) => Ok(Mode::Finetune),
        (None, Mode::Scratch) => Ok(Mode::Scratch),
        (None, _) => Err(UsageError("missing --checkpoint (set train.mode = \"scratch\" to train from random initialization)".into()).into()),
    }
}

fn backbone_label(checkpoint: Option<&Checkpoint>) -> String {
    checkpoint.map_or_else(|| SCRATCH_LABEL.to_string(), |c| c.label.clone())
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn preprocess(ctx: &RunContext, input: &Path) -> Result<()> {
    let files = erf_files(input)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no input: no .erf files in {}", input.display())).into());
    }
    let cfg = &ctx.loaded.config;
    ctx.run("preprocess", ctx.experiment_id("preprocess".into())?, |dir| {
        let mut failed = Vec::new();
        for path in &files {
            let result = (|| -> Result<String> {
                let rec = load_recording(path)?;
                let kept = if cfg.channels.is_empty() { rec.clone() } else { fit_channels(&rec, &cfg.channels)? };
                let out = preprocess_pipeline(&kept, &cfg.preprocess)?;
                write_recording(&out, dir.join(file_name(path)))?;
                Ok(format!(
                    "{}: {} of {} channels kept, {:.1} s at {} Hz",
                    file_name(path),
                    out.n_channels(),
                    rec.n_channels(),
                    out.duration_s(),
                    out.fs
                ))
            })();
            match result {
                Ok(line) => println!("{line}"),
                Err(e) => {
                    eprintln!("{}: {e:#}", file_name(path));
                    failed.push(file_name(path));
                }
            }
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!("{} of {} files failed: {}", failed.len(), files.len(), failed.join(", "))).into())
        }
    })
}

pub fn synth(ctx: &RunContext) -> Result<()> {
    let model = &ctx.loaded.model;
    let s = &ctx.loaded.config.synth;
    let classes = &ctx.loaded.config.task.classes;
    if classes.len() < 2 {
        return Err(UsageError("task.classes needs two labels for the synthetic task".into()).into());
    }
    let labels = channel_labels(model.in_channels)?;
    ctx.run("synth", ctx.experiment_id("synth".into())?, |dir| {
        let corpus = synthetic_corpus(s.n_chunks, s.corpus_subjects, model.in_channels, model.chunk_len, ctx.seed)?;
        let mut by_subject: BTreeMap<&str, Vec<_>> = BTreeMap::new();
        for (subject, chunk) in &corpus {
            by_subject.entry(subject).or_default().push(chunk);
        }
        fs::create_dir_all(dir.join("corpus"))?;
        for (subject, chunks) in &by_subject {
            let rec = concat_recording(subject, labels.clone(), chunks)?;
            write_recording(&rec, dir.join("corpus").join(format!("{subject}.erf")))?;
        }
        let task = alpha_beta_task(
            s.task_subjects,
            s.trials_per_class,
            model.in_channels,
            model.chunk_len,
            s.shuffle_labels,
            mix_seed(&[ctx.seed, 1]),
        )?;
        fs::create_dir_all(dir.join("task"))?;
        for subject in task.subjects() {
            let trials: Vec<_> = task.trials.iter().filter(|t| t.subject == subject).collect();
            let names: Vec<String> = trials.iter().map(|t| classes[t.label].clone()).collect();
            let data: Vec<_> = trials.iter().map(|t| &t.data).collect();
            let rec = concat_recording(&subject, labels.clone(), &data)?
                .with_annotations(trial_annotations(&names, model.chunk_len));
            write_recording(&rec, dir.join("task").join(format!("{subject}.erf")))?;
        }
        println!(
            "corpus: {} chunks from {} subjects in {}",
            corpus.len(),
            by_subject.len(),
            dir.join("corpus").display()
        );
        println!("task: {} trials from {} subjects in {}", task.trials.len(), task.subjects().len(), dir.join("task").display());
        Ok(())
    })
}

pub fn bandpower(ctx: &RunContext, input: &Path) -> Result<()> {
    let model = &ctx.loaded.model;
    let files = erf_files(input)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no input: no .erf files in {}", input.display())).into());
    }
    let bands = BandDefinition::default();
    let labels = channel_labels(model.in_channels)?;
    ctx.run("bandpower", ctx.experiment_id("bandpower".into())?, |dir| {
        let mut w = csv::Writer::from_path(dir.join("bandpower.csv"))?;
        w.write_record(["file", "subject", "chunk", "channel", "band", "window", "log_power"])?;
        let mut n_chunks = 0;
        for path in &files {
            let rec = load_recording(path)?;
            let rec = fit_channels(&rec, &labels)?;
            for (i, c) in kgs4::corpus::chunk(&rec, model.chunk_len, true)?.iter().enumerate() {
                let grid =
                    band_power(c.mapv(f64::from).view(), &bands, TARGET_FS, model.chunk_len / model.n_windows(), LOG_EPS)?;
                for ((ch, b, win), v) in grid.indexed_iter() {
                    w.write_record([
                        file_name(path),
                        rec.subject_id.clone(),
                        i.to_string(),
                        labels[ch].clone(),
                        bands.bands[b].name.clone(),
                        win.to_string(),
                        v.to_string(),
                    ])?;
                }
                n_chunks += 1;
            }
        }
        w.flush()?;
        println!("{n_chunks} chunks from {} files -> {}", files.len(), dir.join("bandpower.csv").display());
        Ok(())
    })
}

pub fn pretrain_cmd(ctx: &RunContext, corpus: &Path) -> Result<()> {
    let model = &ctx.loaded.model;
    let cfg = TrainConfig { mode: Mode::Pretrain, ..ctx.train() };
    let label = cfg.objective.label();
    ctx.run("pretrain", ctx.experiment_id(label.into())?, |dir| {
        let chunks = load_chunks(corpus, model)?;
        let paths = PretrainPaths {
            cache_dir: Some(dir.join("cache")),
            log_csv: Some(dir.join("log.csv")),
            checkpoint_dir: Some(dir.join("checkpoints")),
        };
        let out = pretrain(&chunks, model, &cfg, &paths)?;
        if let Some(last) = out.log.last() {
            println!(
                "{label}: {} iterations on {} chunks, cosine loss {:.4}, knowledge loss {:.4}",
                last.iteration,
                chunks.len(),
                last.cos_sim_loss,
                last.knowledge_loss
            );
        }
        println!("checkpoint: {}", dir.join("checkpoints").join(format!("{label}.ckpt")).display());
        Ok(())
    })
}

fn fold_rows(label: &str, axis: SweepAxis, fraction: f64, seed: u64, folds: &[kgs4::training::FoldResult]) -> Vec<SweepRow> {
    folds
        .iter()
        .map(|f| SweepRow {
            experiment_id: label.into(),
            axis: axis.name().into(),
            fraction,
            fold: f.fold,
            accuracy: f.accuracy,
            lr: f.lr,
            seed,
        })
        .collect()
}

pub fn finetune_cmd(ctx: &RunContext, task: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let mut cfg = ctx.train();
    cfg.mode = finetune_mode(ck.as_ref(), &cfg)?;
    let model: ModelConfig = ck.as_ref().map_or_else(|| ctx.loaded.model.clone(), |c| c.model.config.clone());
    let label = backbone_label(ck.as_ref());
    let id = ctx.experiment_id(format!("finetune-{label}-{}", cfg.freeze_policy))?;
    ctx.run("finetune", id, |dir| {
        let data = load_task(task, &model, &ctx.loaded.config.task)?;
        let split = make_split(&data.subjects(), ctx.loaded.config.task.split, cfg.seed)?;
        let backbone = match &ck {
            Some(c) => Backbone::Pretrained(c),
            None => Backbone::Scratch(&model),
        };
        let folds = finetune(backbone, &data, &split, &cfg)?;
        let rows = fold_rows(&label, SweepAxis::FinetuneFraction, cfg.finetune_fraction, cfg.seed, &folds);
        write_results_csv(&dir.join("results.csv"), &rows)?;
        fs::write(dir.join("folds.json"), serde_json::to_string_pretty(&folds)? + "\n")?;
        for f in &folds {
            println!("fold {}: accuracy {:.4} on {} trials (lr {}, {} epochs)", f.fold, f.accuracy, f.n_eval, f.lr, f.epochs);
        }
        let mean = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
        println!("{label} {}: mean accuracy {mean:.4} over {} folds", cfg.freeze_policy, folds.len());
        Ok(())
    })
}

pub struct SweepArgs<'a> {
    pub axis: SweepAxis,
    pub values: &'a [f64],
    pub task: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub corpus: Option<&'a Path>,
}

pub fn sweep_cmd(ctx: &RunContext, args: SweepArgs) -> Result<()> {
    let base = ctx.train();
    let (ck, label, finetune_cfg) = match args.axis {
        SweepAxis::FinetuneFraction => {
            let ck = load_checkpoint(args.checkpoint)?;
            let mode = finetune_mode(ck.as_ref(), &base)?;
            let label = backbone_label(ck.as_ref());
            (ck, label, TrainConfig { mode, ..base.clone() })
        }
        SweepAxis::PretrainFraction => {
            if args.corpus.is_none() {
                return Err(UsageError("a pretrain_fraction sweep needs --corpus".into()).into());
            }
            if args.checkpoint.is_some() {
                return Err(UsageError("a pretrain_fraction sweep trains its own checkpoints; drop --checkpoint".into()).into());
            }
            let mode = if base.mode == Mode::Scratch { Mode::Scratch } else { Mode::Finetune };
            (None, base.objective.label().to_string(), TrainConfig { mode, ..base.clone() })
        }
    };
    let model: ModelConfig = ck.as_ref().map_or_else(|| ctx.loaded.model.clone(), |c| c.model.config.clone());
    let pretrain_cfg = TrainConfig { mode: Mode::Pretrain, ..base.clone() };
    let id = ctx.experiment_id(format!("sweep-{}-{label}", args.axis))?;
    ctx.run("sweep", id, |dir| {
        let chunks = match args.corpus {
            Some(c) if args.axis == SweepAxis::PretrainFraction => load_chunks(c, &model)?,
            _ => Vec::new(),
        };
        let data = load_task(args.task, &model, &ctx.loaded.config.task)?;
        let split = make_split(&data.subjects(), ctx.loaded.config.task.split, base.seed)?;
        let inputs = SweepInputs {
            experiment_id: label.clone(),
            corpus: &chunks,
            model_config: &model,
            checkpoint: ck.as_ref(),
            task: &data,
            split: &split,
            pretrain: &pretrain_cfg,
            finetune: &finetune_cfg,
        };
        let out = sweep(args.axis, args.values, &inputs)?;
        write_results_csv(&dir.join("results.csv"), &out.rows)?;
        write_summary_csv(&dir.join("summary.csv"), &out.summary)?;
        let plot = dir.join(format!("{}.svg", args.axis));
        plot_accuracy_vs_fraction(&out.rows, args.axis.name(), &plot)?;
        if !out.checkpoints.is_empty() {
            fs::create_dir_all(dir.join("checkpoints"))?;
        }
        for (v, c) in &out.checkpoints {
            c.save(&dir.join("checkpoints").join(format!("{label}-{}-{v}.ckpt", args.axis)))?;
        }
        for s in &out.summary {
            println!("{} = {}: accuracy {:.4} ± {:.4} over {} folds", s.axis, s.fraction, s.mean, s.std, s.n_folds);
        }
        println!("plot: {}", plot.display());
        Ok(())
    })
}

pub fn report(ctx: &RunContext, results: &Path) -> Result<()> {
    let mut dirs = vec![results.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = fs::read_dir(results)
        .with_context(|| format!("reading directory {}", results.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    dirs.extend(subdirs);
    let rows: Vec<SweepRow> = dirs.iter().filter_map(|d| collect_results(d).ok()).flatten().collect();
    if rows.is_empty() {
        return Err(Error::Data(format!("no results found in {}", results.display())).into());
    }
    ctx.run("report", ctx.experiment_id("report".into())?, |dir| {
        let mut md = String::from("# Results\n\n## Accuracy with all fine-tuning data\n\n");
        md += &accuracy_table(&rows);
        let mut axes: Vec<&str> = rows.iter().map(|r| r.axis.as_str()).collect();
        axes.sort_unstable();
        axes.dedup();
        for axis in axes {
            md += &format!("\n## Accuracy by {axis}\n\n");
            md += &fraction_table(&rows, axis);
            plot_accuracy_vs_fraction(&rows, axis, &dir.join(format!("{axis}.svg")))?;
        }
        fs::write(dir.join("report.md"), &md)?;
        print!("{md}");
        Ok(())
    })
}
