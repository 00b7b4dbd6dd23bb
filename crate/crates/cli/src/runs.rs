//! Subcommand runners.

use std::path::{Path, PathBuf};
use std::time::Instant;

use glance_core::data::{
    build_sprites_alignment_task, build_sprites_leak_task, factor_bounds, load_idx_where, mask_supervision,
    rescale_factors, FactorSet, LabeledDataset, FACTOR_SCHEMA,
};
use glance_core::metrics::{accuracy, dci, leakage_score, LogisticProbe};
use glance_core::model::{Batch, ConceptBottleneck, GlanceNetModel, Hyperparameters, ModelSpec};
use glance_core::nn::checkpoint;
use glance_core::osr::{calibrate, osr_check, predict_with_rejection, rejection_rate, OsrDecision};
use glance_core::rng::{derive, permutation};
use glance_core::train::{train, TrainHistory, TrainOptions};
use glance_core::Tensor;

use crate::config::{DatasetKind, ExperimentConfig, Kind};
use crate::error::{CliError, Result};
use crate::report::{write_file, LatentDump, LeakageRow, RunReport};

/// Environment variable naming the data root.
pub const DATA_ENV: &str = "GLANCE_DATA_DIR";

const MNIST_TRAIN: (&str, &str) = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
const MNIST_TEST: (&str, &str) = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
const SPRITE_CONCEPTS: [&str; 5] = ["shape_square", "shape_ellipse", "shape_triangle", "size", "rotation"];

/// Runs the configured command and writes its files under `out_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = match cfg.experiment {
        Kind::Train => run_train(cfg)?,
        Kind::Dci => run_dci(cfg)?,
        Kind::LeakageMnist => run_leakage_mnist(cfg)?,
        Kind::LeakageSprites => run_leakage_sprites(cfg)?,
        Kind::AlignmentSprites => run_alignment_sprites(cfg)?,
        Kind::Traverse => run_traverse(cfg)?,
        Kind::CalibrateOsr => run_calibrate_osr(cfg)?,
    };
    report.elapsed = start.elapsed();
    report.write(&cfg.out_dir)?;
    Ok(report)
}

/// Runs seeds `seed, seed+1, …` in worker threads, each into `out_dir/seed-<s>`,
/// and writes `repeat.csv` with every scalar in ascending seed order.
pub fn run_repeat(cfg: &ExperimentConfig, repeat: usize) -> Result<Vec<RunReport>> {
    if repeat <= 1 {
        return Ok(vec![run(cfg)?]);
    }
    let configs: Vec<ExperimentConfig> = (0..repeat as u64)
        .map(|i| ExperimentConfig {
            seed: cfg.seed + i,
            out_dir: cfg.out_dir.join(format!("seed-{}", cfg.seed + i)),
            ..cfg.clone()
        })
        .collect();
    let reports: Vec<RunReport> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Result<_>>()
    })?;
    let mut out = String::from("seed,key,value\n");
    for r in &reports {
        for (k, v) in &r.values {
            out.push_str(&format!("{},{k},{v}\n", r.config.seed));
        }
        for l in &r.leakage {
            out.push_str(&format!("{},leakage.{},{}\n", r.config.seed, l.variant, l.leakage));
            out.push_str(&format!("{},rejection_rate.{},{}\n", r.config.seed, l.variant, l.rejection_rate));
        }
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join("repeat.csv"), &out)?;
    Ok(reports)
}

fn hyper(cfg: &ExperimentConfig, epochs: usize) -> Hyperparameters {
    Hyperparameters {
        beta: cfg.beta,
        gamma: cfg.gamma,
        lambda: cfg.lambda,
        recon_weight: cfg.recon_weight,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs,
        supervision_fraction: cfg.supervision_fraction,
    }
}

fn options(cfg: &ExperimentConfig) -> TrainOptions {
    TrainOptions {
        decay: cfg.decay,
        warmup_epochs: cfg.warmup_epochs,
        patience: (cfg.patience > 0).then_some(cfg.patience),
        restore_best: cfg.restore_best,
        ..TrainOptions::default()
    }
}

/// Trains unless `epochs` is zero.
fn fit<M: glance_core::train::Trainable>(
    model: &mut M,
    data: &Batch,
    val: &Batch,
    cfg: &ExperimentConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainHistory> {
    if epochs == 0 {
        return Ok(TrainHistory::default());
    }
    Ok(train(model, data, Some(val), &hyper(cfg, epochs), &options(cfg), seed)?)
}

fn push_history(report: &mut RunReport, prefix: &str, h: &TrainHistory) {
    if let (Some(first), Some(last)) = (h.train_losses.first(), h.train_losses.last()) {
        report.push(format!("{prefix}.train_loss.first_epoch"), *first);
        report.push(format!("{prefix}.train_loss.last_epoch"), *last);
    }
    if let Some(best) = h.val_losses.iter().copied().min_by(f64::total_cmp) {
        report.push(format!("{prefix}.val_loss.best"), best);
    }
    report.push(format!("{prefix}.epochs_run"), h.train_losses.len() as f64);
    report.push(format!("{prefix}.steps"), h.steps as f64);
}

/// Data root: config, then the environment (folded in by the caller), then
/// `data/mnist` under the working directory or the source tree.
pub fn data_root(cfg: &ExperimentConfig) -> PathBuf {
    if let Some(d) = &cfg.data_dir {
        return d.clone();
    }
    let local = PathBuf::from("data/mnist");
    if local.is_dir() {
        return local;
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Which MNIST partition to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistPart {
    Train,
    Test,
}

/// Digits of `part` whose label passes `keep`. A data root holding only one
/// partition serves both.
pub fn load_mnist(cfg: &ExperimentConfig, part: MnistPart, keep: impl Fn(usize) -> bool) -> Result<LabeledDataset> {
    let root = data_root(cfg);
    let pair = |(i, l): (&str, &str)| {
        let (i, l) = (root.join(i), root.join(l));
        (i.is_file() && l.is_file()).then_some((i, l))
    };
    let (first, second) = match part {
        MnistPart::Train => (MNIST_TRAIN, MNIST_TEST),
        MnistPart::Test => (MNIST_TEST, MNIST_TRAIN),
    };
    match pair(first).or_else(|| pair(second)) {
        Some((images, labels)) => Ok(load_idx_where(&images, &labels, keep)?),
        None => Err(CliError::config("data_dir", format!("no MNIST IDX image/label pair under {}", root.display()))),
    }
}

fn is_closed_digit(y: usize) -> bool {
    matches!(y, 4 | 5)
}

/// Closed 4/5 digits from the training partition: `g = (𝟙[4], 𝟙[5])`,
/// condition 0 for a 4 and 1 for a 5, no labels.
fn mnist_closed(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let mut ds = load_mnist(cfg, MnistPart::Train, is_closed_digit)?;
    let n = ds.len();
    let mut g = Tensor::zeros(&[n, 2]);
    for (i, &d) in ds.conditions.iter().enumerate() {
        g.data_mut()[i * 2 + usize::from(d == 5)] = 1.0;
    }
    ds.name = "mnist-closed45".into();
    ds.conditions = ds.conditions.iter().map(|&d| usize::from(d == 5)).collect();
    ds.labels = vec![None; n];
    ds.factors = Some(FactorSet { schema: vec!["is_4".into(), "is_5".into()], values: g, mask: vec![true; n] });
    Ok(ds)
}

/// Parity task: 4/5 digits from the training partition; the probe is fit on
/// the other training digits (at most `probe_rows`) and scored on the other
/// test digits. With a single partition on disk the open digits are split by
/// `probe_fraction` instead.
fn mnist_task(cfg: &ExperimentConfig) -> Result<(LabeledDataset, OpenSplit)> {
    let closed = mnist_closed(cfg)?;
    let has_train = data_root(cfg).join(MNIST_TRAIN.0).is_file();
    let has_test = data_root(cfg).join(MNIST_TEST.0).is_file();
    let parity = |mut ds: LabeledDataset| -> Result<LabeledDataset> {
        ds.labels = ds.conditions.iter().map(|&d| Some(d % 2)).collect();
        Ok(ds)
    };
    let open = if has_train && has_test {
        let cap = if cfg.probe_rows == 0 { usize::MAX } else { cfg.probe_rows };
        let taken = std::cell::Cell::new(0usize);
        let fit = load_mnist(cfg, MnistPart::Train, |y| {
            let keep = !is_closed_digit(y) && taken.get() < cap;
            taken.set(taken.get() + usize::from(keep));
            keep
        })?;
        let eval = load_mnist(cfg, MnistPart::Test, |y| !is_closed_digit(y))?;
        OpenSplit { fit: parity(fit)?, eval: parity(eval)? }
    } else {
        let all = load_mnist(cfg, MnistPart::Test, |y| !is_closed_digit(y))?;
        let (fit, eval) = split2(&all, cfg.probe_fraction, cfg.seed, "probe-split")?;
        OpenSplit { fit: parity(fit)?, eval: parity(eval)? }
    };
    Ok((closed, open))
}

/// Seeded two-way split: the first `round(fraction·m)` shuffled rows, then the rest.
fn split2(ds: &LabeledDataset, fraction: f64, seed: u64, stream: &str) -> Result<(LabeledDataset, LabeledDataset)> {
    let m = ds.len();
    let n0 = (fraction * m as f64).round() as usize;
    if n0 == 0 || n0 >= m {
        return Err(CliError::Data(format!("splitting {m} rows at {fraction} leaves a side empty")));
    }
    let order = permutation(m, &mut derive(seed, stream));
    Ok((ds.subset(&order[..n0])?, ds.subset(&order[n0..])?))
}

fn cap(ds: LabeledDataset, n: usize) -> Result<LabeledDataset> {
    if ds.len() <= n {
        return Ok(ds);
    }
    let rows: Vec<usize> = (0..n).collect();
    Ok(ds.subset(&rows)?)
}

/// Training data prepared for `train` and `calibrate-osr`.
struct Prepared {
    train: LabeledDataset,
    val: LabeledDataset,
    concepts: Vec<&'static str>,
    num_classes: Option<usize>,
    num_conditions: usize,
}

impl Prepared {
    fn batch(&self, ds: &LabeledDataset) -> Result<Batch> {
        Ok(ds.to_batch(Some(&self.concepts))?)
    }

    fn spec(&self, cfg: &ExperimentConfig) -> ModelSpec {
        ModelSpec {
            input_dim: self.train.images.cols(),
            latent_dim: cfg.latent_dim,
            hidden: cfg.hidden.clone(),
            interpretable: cfg.interpretable.clone(),
            num_classes: self.num_classes,
            num_conditions: self.num_conditions,
        }
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (pool, concepts, num_classes, num_conditions): (LabeledDataset, Vec<&'static str>, _, _) = match cfg.dataset {
        DatasetKind::Mnist45 => (mnist_closed(cfg)?, vec!["is_4", "is_5"], None, 2),
        DatasetKind::SpritesLeak => {
            let task = build_sprites_leak_task(cfg.n, cfg.seed, cfg.resolution)?;
            (task.train, SPRITE_CONCEPTS.to_vec(), None, 3)
        }
        DatasetKind::SpritesAlignment => {
            let task = build_sprites_alignment_task(cfg.n, cfg.seed, cfg.resolution)?;
            (task.dataset, FACTOR_SCHEMA.to_vec(), Some(2), 2)
        }
    };
    if concepts.len() != cfg.interpretable.len() {
        return Err(CliError::config(
            "interpretable",
            format!("{} concepts need as many interpretable latents", concepts.len()),
        ));
    }
    let (train, val) = split2(&pool, 0.9, cfg.seed, "train-split")?;
    let train = cap(train, cfg.n)?;
    let train = mask_supervision(&train, cfg.supervision_fraction, cfg.seed)?;
    Ok(Prepared { train, val, concepts, num_classes, num_conditions })
}

/// Mean Bernoulli reconstruction loss with the encoder mean.
fn reconstruction_loss(model: &GlanceNetModel, images: &Tensor) -> Result<f64> {
    let h = Hyperparameters { beta: 0.0, gamma: 0.0, lambda: 0.0, recon_weight: 1.0, ..Hyperparameters::default() };
    let mut total = 0.0;
    let rows: Vec<usize> = (0..images.rows()).collect();
    for chunk in rows.chunks(512) {
        let batch = Batch::unlabeled(images.select_rows(chunk)?);
        let zeros = Tensor::zeros(&[chunk.len(), model.latent_dim()]);
        total += model.total_loss(&batch, &h, &zeros)? * chunk.len() as f64;
    }
    Ok(total / images.rows() as f64)
}

fn pass_rate(decisions: &[OsrDecision]) -> f64 {
    1.0 - rejection_rate(decisions)
}

fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("model.glnc")
}

fn save_model(cfg: &ExperimentConfig, model: &GlanceNetModel) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    let named = model.to_named_tensors();
    let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
    Ok(checkpoint::save(&checkpoint_path(cfg), &refs)?)
}

fn load_model(cfg: &ExperimentConfig) -> Result<GlanceNetModel> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| CliError::config("checkpoint", "required"))?;
    Ok(GlanceNetModel::from_named_tensors(&checkpoint::load(path)?)?)
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<RunReport> {
    let data = prepare(cfg)?;
    let mut model = GlanceNetModel::new(&data.spec(cfg), &mut derive(cfg.seed, "init"))?;
    let train_batch = data.batch(&data.train)?;
    let val_batch = data.batch(&data.val)?;
    let mut report = RunReport::new(cfg);
    report.push("data.train_rows", data.train.len() as f64);
    report.push("data.val_rows", data.val.len() as f64);
    report.push("loss.reconstruction.initial", reconstruction_loss(&model, &data.train.images)?);
    let history = fit(&mut model, &train_batch, &val_batch, cfg, cfg.epochs, cfg.seed)?;
    report.push("loss.reconstruction.final", reconstruction_loss(&model, &data.train.images)?);
    push_history(&mut report, "glancenet", &history);
    if model.num_classes().is_some() {
        let labels = data.val.required_labels()?;
        report.push("accuracy.val", accuracy(&model.predict(&data.val.images)?, &labels)?);
    }
    let thresholds = calibrate(&model, &data.train.images, &data.train.conditions, cfg.quantile)?;
    report.push("osr.pass_rate.train", pass_rate(&osr_check(&model, &thresholds, &data.train.images)?));
    report.push("osr.pass_rate.val", pass_rate(&osr_check(&model, &thresholds, &data.val.images)?));
    report.thresholds = Some(thresholds);
    report.latents = Some(LatentDump {
        z: model.encode_mean(&data.train.images)?,
        conditions: data.train.conditions.clone(),
        labels: data.train.labels.clone(),
    });
    save_model(cfg, &model)?;
    Ok(report)
}

pub fn run_calibrate_osr(cfg: &ExperimentConfig) -> Result<RunReport> {
    let model = load_model(cfg)?;
    let data = prepare(cfg)?;
    if data.train.images.cols() != model.input_dim() {
        return Err(CliError::Data(format!(
            "checkpoint expects {} inputs, dataset has {}",
            model.input_dim(),
            data.train.images.cols()
        )));
    }
    let thresholds = calibrate(&model, &data.train.images, &data.train.conditions, cfg.quantile)?;
    let mut report = RunReport::new(cfg);
    report.push("osr.pass_rate.train", pass_rate(&osr_check(&model, &thresholds, &data.train.images)?));
    report.push("osr.pass_rate.val", pass_rate(&osr_check(&model, &thresholds, &data.val.images)?));
    report.thresholds = Some(thresholds);
    Ok(report)
}

pub fn run_traverse(cfg: &ExperimentConfig) -> Result<RunReport> {
    let model = load_model(cfg)?;
    if cfg.traverse_condition >= model.num_conditions() {
        return Err(CliError::config("traverse_condition", "exceeds the model's prior components"));
    }
    if cfg.traverse_dim >= model.latent_dim() {
        return Err(CliError::config("traverse_dim", "exceeds the latent dimension"));
    }
    let steps = cfg.traverse_steps;
    let values: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                cfg.traverse_min
            } else {
                cfg.traverse_min + (cfg.traverse_max - cfg.traverse_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let base = model.prior_means().row(cfg.traverse_condition).to_vec();
    let frames = model.traverse(&base, cfg.traverse_dim, &values)?;
    let d = model.input_dim();
    let mut csv = String::from("step,value");
    for p in 0..d {
        csv.push_str(&format!(",p{p}"));
    }
    csv.push('\n');
    for (i, (v, f)) in values.iter().zip(&frames).enumerate() {
        csv.push_str(&format!("{i},{v}"));
        for p in f.data() {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    write_file(&cfg.out_dir.join("traverse.csv"), &csv)?;
    let side = (d as f64).sqrt().round() as usize;
    if side * side == d {
        let path = cfg.out_dir.join("traverse.pgm");
        std::fs::write(&path, pgm_strip(&frames, side)).map_err(|e| CliError::io(&path, e))?;
    }
    let mut report = RunReport::new(cfg);
    report.push("traverse.frames", frames.len() as f64);
    Ok(report)
}

/// Binary PGM with the frames side by side.
fn pgm_strip(frames: &[Tensor], side: usize) -> Vec<u8> {
    let width = side * frames.len();
    let mut out = format!("P5\n{width} {side}\n255\n").into_bytes();
    for y in 0..side {
        for f in frames {
            for x in 0..side {
                out.push((f.data()[y * side + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Numeric CSV with a header; `id`, `label`, `condition` and `mask` columns
/// are skipped.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::Data(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::trim)
        .collect();
    let keep: Vec<usize> =
        (0..header.len()).filter(|&i| !matches!(header[i], "id" | "label" | "condition" | "mask")).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (no, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(CliError::Data(format!(
                "{}: row {} has {} cells, header has {}",
                path.display(),
                no + 1,
                cells.len(),
                header.len()
            )));
        }
        for &i in &keep {
            values.push(cells[i].parse::<f64>().map_err(|_| {
                CliError::Data(format!("{}: row {} column {}: {:?}", path.display(), no + 1, header[i], cells[i]))
            })?);
        }
        rows += 1;
    }
    let names = keep.iter().map(|&i| header[i].to_string()).collect();
    Ok((names, Tensor::matrix(rows, keep.len(), values)?))
}

pub fn run_dci(cfg: &ExperimentConfig) -> Result<RunReport> {
    let latents = cfg.latents.as_ref().ok_or_else(|| CliError::config("latents", "required"))?;
    let factors = cfg.factors.as_ref().ok_or_else(|| CliError::config("factors", "required"))?;
    let (z_names, z) = read_numeric_csv(latents)?;
    let (g_names, g) = read_numeric_csv(factors)?;
    if z.rows() != g.rows() {
        return Err(CliError::Data(format!("{} latent rows but {} factor rows", z.rows(), g.rows())));
    }
    let mut d = dci(&z, &g, cfg.l1_penalty)?;
    d.importance.latent_names = z_names;
    d.importance.factor_names = g_names;
    let mut report = RunReport::new(cfg);
    report.push("data.rows", z.rows() as f64);
    report.dci = Some(d);
    Ok(report)
}

/// Fits a probe on `fit` features and predicts the `eval` rows.
fn probe(fit: &Tensor, y_fit: &[usize], eval: &Tensor) -> Result<Vec<usize>> {
    Ok(LogisticProbe::fit(fit, y_fit)?.predict(eval)?)
}

/// Open-set data for the probe: a fitting part and an evaluation part.
struct OpenSplit {
    fit: LabeledDataset,
    eval: LabeledDataset,
}

/// Shared second stage of the leakage protocols: probe the frozen
/// representations on the open data and apply the rejection rule.
fn leakage_stage(
    report: &mut RunReport,
    cfg: &ExperimentConfig,
    cbnm: &ConceptBottleneck,
    model: &GlanceNetModel,
    closed_train: &LabeledDataset,
    open: &OpenSplit,
) -> Result<()> {
    let y_fit = open.fit.required_labels()?;
    let y_eval = open.eval.required_labels()?;
    let j = model.split().interpretable();

    let pred = probe(&cbnm.concepts(&open.fit.images)?, &y_fit, &cbnm.concepts(&open.eval.images)?)?;
    let acc_cbnm = accuracy(&pred, &y_eval)?;

    let mu_eval = model.encode_mean(&open.eval.images)?;
    let mu_fit_j = model.encode_mean(&open.fit.images)?.select_cols(j)?;
    let pred = probe(&mu_fit_j, &y_fit, &mu_eval.select_cols(j)?)?;
    let acc_vae = accuracy(&pred, &y_eval)?;

    let thresholds = calibrate(model, &closed_train.images, &closed_train.conditions, cfg.quantile)?;
    let closed_pass = pass_rate(&osr_check(model, &thresholds, &closed_train.images)?);
    let decisions = osr_check(model, &thresholds, &open.eval.images)?;
    let num_labels = y_fit.iter().chain(&y_eval).max().map_or(1, |m| m + 1);
    let guarded = predict_with_rejection(&decisions, &pred, num_labels, &mut derive(cfg.seed, "rejection"))?;
    let acc_osr = accuracy(&guarded, &y_eval)?;
    let rejected = rejection_rate(&decisions);
    let share = |f: fn(&OsrDecision) -> bool| decisions.iter().filter(|d| f(d)).count() as f64 / decisions.len() as f64;

    report.push("probe.fit_rows", open.fit.len() as f64);
    report.push("probe.eval_rows", open.eval.len() as f64);
    report.push("accuracy.cbnm", acc_cbnm);
    report.push("accuracy.cg-vae", acc_vae);
    report.push("accuracy.glancenet", acc_osr);
    report.push("osr.pass_rate.closed_train", closed_pass);
    report.push("osr.reconstruction_pass_rate.open", share(|d| d.passed_reconstruction));
    report.push("osr.localization_pass_rate.open", share(|d| d.passed_localization));
    report.leakage = vec![
        LeakageRow { variant: "cbnm".into(), leakage: leakage_score(acc_cbnm), rejection_rate: 0.0 },
        LeakageRow { variant: "cg-vae".into(), leakage: leakage_score(acc_vae), rejection_rate: 0.0 },
        LeakageRow { variant: "glancenet".into(), leakage: leakage_score(acc_osr), rejection_rate: rejected },
    ];
    report.thresholds = Some(thresholds);
    report.latents =
        Some(LatentDump { z: mu_eval, conditions: open.eval.conditions.clone(), labels: open.eval.labels.clone() });
    Ok(())
}

/// First stage shared by both leakage protocols: the concept-bottleneck
/// baseline and the unconditioned-head GlanceNet on the same closed data.
fn leakage_models(
    report: &mut RunReport,
    cfg: &ExperimentConfig,
    closed: &LabeledDataset,
    concepts: &[&str],
    num_conditions: usize,
) -> Result<(ConceptBottleneck, GlanceNetModel, LabeledDataset)> {
    if concepts.len() != cfg.interpretable.len() {
        return Err(CliError::config(
            "interpretable",
            format!("{} concepts need as many interpretable latents", concepts.len()),
        ));
    }
    let (train_ds, val_ds) = split2(closed, 0.9, cfg.seed, "train-split")?;
    let train_ds = cap(train_ds, cfg.n)?;
    let train_ds = mask_supervision(&train_ds, cfg.supervision_fraction, cfg.seed)?;
    let train_batch = train_ds.to_batch(Some(concepts))?;
    let val_batch = val_ds.to_batch(Some(concepts))?;
    report.push("data.closed_train_rows", train_ds.len() as f64);
    report.push("data.closed_val_rows", val_ds.len() as f64);

    let d = closed.images.cols();
    let mut cbnm = ConceptBottleneck::new(d, &cfg.hidden, concepts.len(), &mut derive(cfg.seed, "cbnm-init"))?;
    let h = fit(&mut cbnm, &train_batch, &val_batch, cfg, cfg.baseline_epochs, cfg.seed ^ 0x5eed)?;
    push_history(report, "cbnm", &h);

    let spec = ModelSpec {
        input_dim: d,
        latent_dim: cfg.latent_dim,
        hidden: cfg.hidden.clone(),
        interpretable: cfg.interpretable.clone(),
        num_classes: None,
        num_conditions,
    };
    let mut model = GlanceNetModel::new(&spec, &mut derive(cfg.seed, "init"))?;
    report.push("loss.reconstruction.initial", reconstruction_loss(&model, &train_ds.images)?);
    let h = fit(&mut model, &train_batch, &val_batch, cfg, cfg.epochs, cfg.seed)?;
    report.push("loss.reconstruction.final", reconstruction_loss(&model, &train_ds.images)?);
    push_history(report, "glancenet", &h);
    Ok((cbnm, model, train_ds))
}

pub fn run_leakage_mnist(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (closed, open) = mnist_task(cfg)?;
    let mut report = RunReport::new(cfg);
    let (cbnm, model, train_ds) = leakage_models(&mut report, cfg, &closed, &["is_4", "is_5"], 2)?;
    leakage_stage(&mut report, cfg, &cbnm, &model, &train_ds, &open)?;
    save_model(cfg, &model)?;
    Ok(report)
}

pub fn run_leakage_sprites(cfg: &ExperimentConfig) -> Result<RunReport> {
    let task = build_sprites_leak_task(cfg.n, cfg.seed, cfg.resolution)?;
    let mut report = RunReport::new(cfg);
    let (cbnm, model, train_ds) = leakage_models(&mut report, cfg, &task.train, &SPRITE_CONCEPTS, 3)?;
    let (fit, eval) = split2(&task.test, cfg.probe_fraction, cfg.seed, "probe-split")?;
    leakage_stage(&mut report, cfg, &cbnm, &model, &train_ds, &OpenSplit { fit, eval })?;
    save_model(cfg, &model)?;
    Ok(report)
}

pub fn run_alignment_sprites(cfg: &ExperimentConfig) -> Result<RunReport> {
    if cfg.interpretable.len() != FACTOR_SCHEMA.len() {
        return Err(CliError::config("interpretable", "alignment needs one interpretable latent per factor"));
    }
    let task = build_sprites_alignment_task(cfg.n, cfg.seed, cfg.resolution)?;
    let (train_ds, rest) = split2(&task.dataset, 0.8, cfg.seed, "train-split")?;
    let (val_ds, test_ds) = split2(&rest, 0.5, cfg.seed, "val-split")?;
    let bounds = factor_bounds(&train_ds)?;
    let train_ds = mask_supervision(&rescale_factors(&train_ds, &bounds)?, cfg.supervision_fraction, cfg.seed)?;
    let val_ds = mask_supervision(&rescale_factors(&val_ds, &bounds)?, cfg.supervision_fraction, cfg.seed ^ 1)?;
    let test_ds = rescale_factors(&test_ds, &bounds)?;

    let spec = ModelSpec {
        input_dim: train_ds.images.cols(),
        latent_dim: cfg.latent_dim,
        hidden: cfg.hidden.clone(),
        interpretable: cfg.interpretable.clone(),
        num_classes: Some(2),
        num_conditions: 2,
    };
    let mut model = GlanceNetModel::new(&spec, &mut derive(cfg.seed, "init"))?;
    let mut report = RunReport::new(cfg);
    report.push("data.train_rows", train_ds.len() as f64);
    report.push(
        "data.annotated_rows",
        train_ds.factors.as_ref().map_or(0, |f| f.mask.iter().filter(|m| **m).count()) as f64,
    );
    report.push("data.test_rows", test_ds.len() as f64);
    let train_batch = train_ds.to_batch(Some(&FACTOR_SCHEMA))?;
    let val_batch = val_ds.to_batch(Some(&FACTOR_SCHEMA))?;
    report.push("loss.reconstruction.initial", reconstruction_loss(&model, &train_ds.images)?);
    let h = fit(&mut model, &train_batch, &val_batch, cfg, cfg.epochs, cfg.seed)?;
    report.push("loss.reconstruction.final", reconstruction_loss(&model, &train_ds.images)?);
    push_history(&mut report, "glancenet", &h);

    let labels = test_ds.required_labels()?;
    report.push("accuracy.test", accuracy(&model.predict(&test_ds.images)?, &labels)?);
    let mu = model.encode_mean(&test_ds.images)?;
    let mu_j = mu.select_cols(model.split().interpretable())?;
    let g = test_ds.factor_columns(&FACTOR_SCHEMA)?;
    let mut d = dci(&mu_j, &g, cfg.l1_penalty)?;
    d.importance.latent_names = model.split().interpretable().iter().map(|j| format!("z{j}")).collect();
    d.importance.factor_names = FACTOR_SCHEMA.iter().map(|s| s.to_string()).collect();
    report.dci = Some(d);
    let thresholds = calibrate(&model, &train_ds.images, &train_ds.conditions, cfg.quantile)?;
    report.push("osr.pass_rate.train", pass_rate(&osr_check(&model, &thresholds, &train_ds.images)?));
    report.thresholds = Some(thresholds);
    report.latents = Some(LatentDump { z: mu, conditions: test_ds.conditions.clone(), labels: test_ds.labels.clone() });
    save_model(cfg, &model)?;
    Ok(report)
}
