//! Command implementations behind the `nasu` binary.
//!
//! Pipeline: `synth` generates the layered dataset, `preprocess` applies
//! morphology and crop/flip augmentation, `search` runs the alternating
//! optimization and emits genotypes, `derive` re-extracts genotypes from a
//! checkpoint, `retrain` trains the discrete network from scratch, `eval`
//! scores a trained checkpoint, and `report` assembles comparison tables.
//! Every command writes the resolved configuration and a `run.meta` into
//! its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::augment::augment;
use crate::data::morph::morphology;
use crate::data::synth::generate_synthetic;
use crate::data::{assign_splits, load_dataset, save_dataset, ImageSample, Split};
use crate::error::{Error, Result};
use crate::report::{build_report, unix_now, EvalReport, RunMeta};
use crate::scalar::{Precision, Scalar};
use crate::search::{carve_val_split, evaluate_forward, EpochRecord, SearchEngine};
use crate::search_space::Genotype;
use crate::supernet::Supernet;
use crate::train::Trainer;

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved"), cfg.resolved_text())?;
    Ok(())
}

fn dataset_label(cfg: &RunConfig) -> String {
    cfg.data_dir
        .as_ref()
        .and_then(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "synthetic".into())
}

fn write_history(out: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(EpochRecord::CSV_HEADER);
    text.push('\n');
    for rec in history {
        text.push_str(&rec.to_csv_row());
        text.push('\n');
    }
    fs::write(out.join("history.csv"), text)?;
    Ok(())
}

fn load_split_samples(cfg: &RunConfig) -> Result<(Vec<ImageSample>, Vec<ImageSample>, Vec<ImageSample>)> {
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::config("this command requires data.dir in the configuration"))?;
    let (_, tagged) = load_dataset(dir)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (sample, split) in tagged {
        match split {
            Split::Train => train.push(sample),
            Split::Val => val.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok((train, val, test))
}

fn input_dims(samples: &[ImageSample]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or_else(|| Error::data("dataset has no training samples"))?;
    Ok((first.h, first.w))
}

/// Generate the synthetic dataset and split it at the source level.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    let start = unix_now();
    let synth = cfg.synth_config();
    let samples = generate_synthetic(&synth)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let assignment = assign_splits(&ids, &[cfg.split_train, cfg.split_test], cfg.seed)?;
    let tagged: Vec<(ImageSample, Split)> = samples
        .into_iter()
        .map(|s| {
            let split = assignment[&s.id];
            (s, split)
        })
        .collect();
    let meta = vec![
        ("generator".into(), format!("nasu {}", env!("CARGO_PKG_VERSION"))),
        ("seed".into(), cfg.seed.to_string()),
        ("synth.count".into(), cfg.synth_count.to_string()),
        ("synth.height".into(), cfg.synth_height.to_string()),
        ("synth.width".into(), cfg.synth_width.to_string()),
        ("synth.classes".into(), cfg.synth_classes.to_string()),
        ("synth.noise".into(), cfg.synth_noise.to_string()),
        ("split.train".into(), cfg.split_train.to_string()),
        ("split.test".into(), cfg.split_test.to_string()),
    ];
    save_dataset(out, &tagged, cfg.synth_classes, meta)?;
    let train = tagged.iter().filter(|(_, s)| *s == Split::Train).count();
    let test = tagged.len() - train;
    RunMeta { command: "synth".into(), dataset: dataset_label(cfg), start_unix: start, end_unix: unix_now() }
        .write(out)?;
    Ok(format!("generated {} samples ({train} train, {test} test) in {}", tagged.len(), out.display()))
}

/// Apply morphology and optional crop/flip augmentation to a dataset.
pub fn cmd_preprocess(cfg: &RunConfig, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    let start = unix_now();
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::config("preprocess requires data.dir in the configuration"))?;
    let (manifest, tagged) = load_dataset(dir)?;

    let mut processed: Vec<(ImageSample, Split)> = Vec::new();
    for (mut sample, split) in tagged {
        if let Some(op) = cfg.morph {
            sample.image = morphology(&sample.image, sample.h, sample.w, op, cfg.morph_kernel)?;
        }
        if cfg.augment_enabled {
            for crop in augment(&sample, &cfg.augment_config())? {
                processed.push((crop, split));
            }
        } else {
            processed.push((sample, split));
        }
    }

    let mut meta = vec![
        ("generator".into(), format!("nasu {}", env!("CARGO_PKG_VERSION"))),
        ("source".into(), dir.display().to_string()),
        (
            "preprocess.morph".into(),
            cfg.morph.map(|m| m.name().to_string()).unwrap_or_else(|| "none".into()),
        ),
        ("preprocess.morph_kernel".into(), cfg.morph_kernel.to_string()),
        ("augment.enabled".into(), cfg.augment_enabled.to_string()),
    ];
    for (k, v) in &manifest.meta {
        if k.starts_with("synth.") || k == "seed" {
            meta.push((k.clone(), v.clone()));
        }
    }
    let count = processed.len();
    save_dataset(out, &processed, cfg.net_classes, meta)?;
    RunMeta { command: "preprocess".into(), dataset: dataset_label(cfg), start_unix: start, end_unix: unix_now() }
        .write(out)?;
    Ok(format!("preprocessed {count} samples into {}", out.display()))
}

/// Run the architecture search, emitting genotypes, history, checkpoints.
pub fn cmd_search(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<String> {
    match cfg.precision {
        Precision::F32 => search_typed::<f32>(cfg, out, resume),
        Precision::F64 => search_typed::<f64>(cfg, out, resume),
    }
}

fn search_typed<S: Scalar>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<String> {
    prepare_out(cfg, out)?;
    let start = unix_now();
    let (train_all, val_explicit, _) = load_split_samples(cfg)?;
    let (train, val) = if val_explicit.is_empty() {
        carve_val_split(train_all, cfg.search_val_fraction, cfg.seed)?
    } else {
        (train_all, val_explicit)
    };
    let (h, w) = input_dims(&train)?;
    let net_config = cfg.network_config(h, w);
    let search_config = cfg.search_config();

    let mut engine: SearchEngine<S> = match resume {
        Some(path) => checkpoint::load_search(path, net_config, search_config)?,
        None => SearchEngine::new(Supernet::build(net_config, cfg.seed)?, search_config)?,
    };
    let resumed_from = engine.epochs_done();

    let every = cfg.search_checkpoint_every.max(1);
    let (gd, gu) = engine.run(&train, &val, |eng, rec| {
        println!(
            "search epoch {}/{}: loss {:.4} miou {:.4} dsc {:.4} lr {:.5}",
            rec.epoch + 1,
            eng.config.epochs,
            rec.train_loss,
            rec.miou,
            rec.dsc,
            rec.lr
        );
        write_history(out, &eng.history)?;
        if (rec.epoch + 1) % every == 0 {
            checkpoint::save_search(&out.join(format!("checkpoint_{:04}.nasu", rec.epoch + 1)), eng)?;
        }
        Ok(())
    })?;

    checkpoint::save_search(&out.join("checkpoint_final.nasu"), &engine)?;
    fs::write(out.join("genotype_down.txt"), gd.to_text())?;
    fs::write(out.join("genotype_up.txt"), gu.to_text())?;
    write_history(out, &engine.history)?;
    RunMeta { command: "search".into(), dataset: dataset_label(cfg), start_unix: start, end_unix: unix_now() }
        .write(out)?;
    let ran = engine.epochs_done() - resumed_from;
    Ok(format!(
        "searched {ran} epochs ({} total); genotypes in {}",
        engine.epochs_done(),
        out.display()
    ))
}

/// Re-derive genotypes from a search checkpoint.
pub fn cmd_derive(cfg: &RunConfig, out: &Path) -> Result<String> {
    match cfg.precision {
        Precision::F32 => derive_typed::<f32>(cfg, out),
        Precision::F64 => derive_typed::<f64>(cfg, out),
    }
}

fn derive_typed<S: Scalar>(cfg: &RunConfig, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    let start = unix_now();
    let ckpt = cfg
        .derive_checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("derive requires derive.checkpoint in the configuration"))?;
    let (train, _, _) = load_split_samples(cfg)?;
    let (h, w) = input_dims(&train)?;
    let (gd, gu) = checkpoint::derive_from_search::<S>(ckpt, cfg.network_config(h, w), cfg.search_config())?;
    fs::write(out.join("genotype_down.txt"), gd.to_text())?;
    fs::write(out.join("genotype_up.txt"), gu.to_text())?;
    RunMeta { command: "derive".into(), dataset: dataset_label(cfg), start_unix: start, end_unix: unix_now() }
        .write(out)?;
    Ok(format!("derived genotypes into {}", out.display()))
}

fn load_genotype(path: &Path) -> Result<Genotype> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Genotype::parse(&text, &path.display().to_string())
}

/// Retrain the derived architecture from scratch and evaluate it.
pub fn cmd_retrain(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<String> {
    match cfg.precision {
        Precision::F32 => retrain_typed::<f32>(cfg, out, resume),
        Precision::F64 => retrain_typed::<f64>(cfg, out, resume),
    }
}

fn retrain_typed<S: Scalar>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<String> {
    prepare_out(cfg, out)?;
    let start = unix_now();
    let (train, _, test) = load_split_samples(cfg)?;
    if test.is_empty() {
        return Err(Error::data("retrain requires a test split for evaluation"));
    }
    let (h, w) = input_dims(&train)?;
    let net_config = cfg.network_config(h, w);
    let train_config = cfg.train_config();

    let mut trainer: Trainer<S> = match resume {
        Some(path) => checkpoint::load_retrain(path, net_config, train_config)?,
        None => {
            let gd = load_genotype(
                cfg.genotype_down
                    .as_ref()
                    .ok_or_else(|| Error::config("retrain requires genotype.down in the configuration"))?,
            )?;
            let gu = load_genotype(
                cfg.genotype_up
                    .as_ref()
                    .ok_or_else(|| Error::config("retrain requires genotype.up in the configuration"))?,
            )?;
            Trainer::new(gd, gu, net_config, train_config)?
        }
    };

    trainer.run(&train, &test, |tr, rec| {
        println!(
            "retrain epoch {}/{}: loss {:.4} miou {:.4} dsc {:.4}",
            rec.epoch + 1,
            tr.config.epochs,
            rec.train_loss,
            rec.miou,
            rec.dsc
        );
        write_history(out, &tr.history)?;
        Ok(())
    })?;

    checkpoint::save_retrain(&out.join("checkpoint_final.nasu"), &trainer)?;
    let (metrics, cm) = evaluate_forward::<S, _>(&test, trainer.config.batch_size, net_config.num_classes, |tape, x| {
        trainer.net.forward(tape, x, false).map(|p| p.logits)
    })?;
    EvalReport::new(metrics.clone(), &cm).write(out)?;
    write_history(out, &trainer.history)?;
    RunMeta { command: "retrain".into(), dataset: dataset_label(cfg), start_unix: start, end_unix: unix_now() }
        .write(out)?;
    Ok(format!(
        "retrained {} epochs; test miou {:.4} dsc {:.4}; outputs in {}",
        trainer.epochs_done(),
        metrics.miou,
        metrics.dsc,
        out.display()
    ))
}

/// Evaluate a retrained checkpoint on the test split.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<String> {
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, out),
        Precision::F64 => eval_typed::<f64>(cfg, out),
    }
}

fn eval_typed<S: Scalar>(cfg: &RunConfig, out: &Path) -> Result<String> {
    prepare_out(cfg, out)?;
    let start = unix_now();
    let ckpt = cfg
        .eval_checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("eval requires eval.checkpoint in the configuration"))?;
    let (train, _, test) = load_split_samples(cfg)?;
    if test.is_empty() {
        return Err(Error::data("eval requires a test split"));
    }
    let (h, w) = input_dims(if train.is_empty() { &test } else { &train })?;
    let net_config = cfg.network_config(h, w);
    let trainer: Trainer<S> = checkpoint::load_retrain(ckpt, net_config, cfg.train_config())?;

    let (metrics, cm) = evaluate_forward::<S, _>(&test, cfg.retrain_batch_size, net_config.num_classes, |tape, x| {
        trainer.net.forward(tape, x, false).map(|p| p.logits)
    })?;
    EvalReport::new(metrics.clone(), &cm).write(out)?;
    RunMeta { command: "eval".into(), dataset: dataset_label(cfg), start_unix: start, end_unix: unix_now() }
        .write(out)?;
    Ok(format!(
        "evaluated {} samples: pixel_acc {:.4} miou {:.4} dsc {:.4}",
        metrics.num_pixels, metrics.pixel_accuracy, metrics.miou, metrics.dsc
    ))
}

/// Assemble the comparison report over completed run directories.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<String> {
    fs::create_dir_all(out)?;
    let report = build_report(run_dirs)?;
    fs::write(out.join("report.txt"), &report.text)?;
    fs::write(out.join("report.csv"), &report.csv)?;
    Ok(report.text)
}
