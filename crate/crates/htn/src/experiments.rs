//! The experiment drivers behind the `htn` subcommands.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use htn_core::checkpoint::{self, CheckpointError};
use htn_core::data::{DataError, LabeledImageSet, PADDED_SIDE};
use htn_core::layers::{LayerError, LayerSummary, ModelSpec, TtnLayer};
use htn_core::metrics::{compression_ratio, metrics_csv, Loss, MetricKind, RunMetrics};
use htn_core::model::Model;
use htn_core::optim::{OptimError, Optimizer};
use htn_core::tensor::Tensor;
use htn_core::train::{evaluate, train_epoch, Dataset, EvalStats, ImageDataset, ImageTask, TrainConfig, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{autoencoder_spec, bottleneck_len, format_layers, regression_spec};
use crate::config::{ConfigError, ExperimentConfig, Family, OptimizerKind};
use crate::output::{side_by_side, write_pgm, RunDir};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("model: {0}")]
    Spec(#[from] LayerError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("output directory {0} is locked by another run")]
    Busy(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl RunError {
    /// 2 for configuration problems, 3 for numerical aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Spec(_) => 2,
            RunError::Train(TrainError::NonFiniteLoss { .. })
            | RunError::Train(TrainError::Optim(OptimError::NonFinite { .. })) => 3,
            _ => 1,
        }
    }
}

fn acquire(out: &Path) -> Result<RunDir, RunError> {
    RunDir::acquire(out).map_err(|e| match e.kind() {
        io::ErrorKind::AlreadyExists => RunError::Busy(out.to_path_buf()),
        _ => RunError::Io(e),
    })
}

/// Runs `f` on a pool of `threads` workers, or on the default pool for 0.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, RunError> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| RunError::Threads(e.to_string()))?;
    Ok(pool.install(f))
}

/// Shuffle seed for `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

pub fn load_split(cfg: &ExperimentConfig) -> Result<(LabeledImageSet, LabeledImageSet), RunError> {
    let dir = &cfg.data.dir;
    let mut train = LabeledImageSet::load(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let mut test = LabeledImageSet::load(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    if cfg.data.train_limit > 0 {
        train = train.truncated(cfg.data.train_limit);
    }
    if cfg.data.test_limit > 0 {
        test = test.truncated(cfg.data.test_limit);
    }
    Ok((train, test))
}

fn optimizer(cfg: &ExperimentConfig, model: &Model) -> Optimizer {
    match cfg.train.optimizer {
        OptimizerKind::Adam => Optimizer::adam(model, cfg.train.lr),
        OptimizerKind::Sgd => Optimizer::Sgd { lr: cfg.train.lr },
    }
}

/// A trained model with its per-epoch record.
#[derive(Debug)]
pub struct Fitted {
    pub model: Model,
    pub optimizer: Optimizer,
    /// Row 0 evaluates the initial model; its loss column is the test loss.
    pub metrics: Vec<RunMetrics>,
    pub test: Vec<EvalStats>,
    /// Training-set evaluation after each epoch, when requested.
    pub train: Vec<EvalStats>,
    pub seconds: Vec<f64>,
}

impl Fitted {
    pub fn final_test(&self) -> &EvalStats {
        self.test.last().expect("initial evaluation")
    }
}

fn pick(metric: MetricKind, stats: &EvalStats) -> f64 {
    match metric {
        MetricKind::Accuracy => stats.accuracy.unwrap_or(f64::NAN),
        MetricKind::Psnr => stats.mean_psnr.unwrap_or(f64::NAN),
        MetricKind::Mse => stats.mean_mse.unwrap_or(stats.mean_loss),
    }
}

struct FitJob<'a> {
    label: &'a str,
    spec: ModelSpec,
    loss: Loss,
    metric: MetricKind,
    train: &'a dyn Dataset,
    test: &'a dyn Dataset,
    track_train: bool,
}

fn fit(cfg: &ExperimentConfig, job: FitJob<'_>) -> Result<Fitted, RunError> {
    let mut model = Model::new(job.spec, cfg.seed);
    let mut opt = optimizer(cfg, &model);
    let param_count = model.param_count();
    let train_cfg = TrainConfig { batch_size: cfg.train.batch_size, clip_norm: cfg.train.clip_norm };
    let initial = evaluate(&model, job.test, job.loss)?;
    let row = |epoch, loss, stats: &EvalStats, seconds: f64| RunMetrics {
        epoch,
        loss,
        metric: job.metric,
        metric_value: pick(job.metric, stats),
        seconds: if cfg.output.wall_clock { seconds } else { 0.0 },
        param_count,
    };
    let mut fitted = Fitted {
        metrics: vec![row(0, initial.mean_loss, &initial, 0.0)],
        test: vec![initial],
        train: Vec::new(),
        seconds: vec![0.0],
        model: model.clone(),
        optimizer: opt.clone(),
    };
    for epoch in 1..=cfg.train.epochs {
        let start = Instant::now();
        let stats = train_epoch(&mut model, job.train, job.loss, &mut opt, &train_cfg, epoch_seed(cfg.seed, epoch))?;
        let test = evaluate(&model, job.test, job.loss)?;
        if job.track_train {
            fitted.train.push(evaluate(&model, job.train, job.loss)?);
        }
        let seconds = start.elapsed().as_secs_f64();
        println!(
            "[{}] epoch {epoch}/{} loss {:.6} {} {:.6} ({seconds:.1}s)",
            job.label,
            cfg.train.epochs,
            stats.mean_loss,
            job.metric.name(),
            pick(job.metric, &test)
        );
        fitted.metrics.push(row(epoch, stats.mean_loss, &test, seconds));
        fitted.test.push(test);
        fitted.seconds.push(seconds);
    }
    fitted.model = model;
    fitted.optimizer = opt;
    Ok(fitted)
}

fn timing_csv(seconds: &[f64]) -> String {
    let mut out = String::from("epoch,seconds\n");
    for (epoch, s) in seconds.iter().enumerate() {
        let _ = writeln!(out, "{epoch},{s:.3}");
    }
    out
}

fn save_run(run: &RunDir, prefix: &str, cfg: &ExperimentConfig, fitted: &Fitted) -> Result<(), RunError> {
    run.write(&format!("{prefix}metrics.csv"), &metrics_csv(&fitted.metrics))?;
    run.write(&format!("{prefix}timing.csv"), &timing_csv(&fitted.seconds))?;
    if cfg.output.checkpoint {
        checkpoint::save(run.file(&format!("{prefix}model.ckpt")), &fitted.model, Some(&fitted.optimizer))?;
    }
    Ok(())
}

/// Plain-text per-layer parameter table.
pub fn param_table(spec: &ModelSpec) -> (Vec<LayerSummary>, String) {
    let rows = spec.summary();
    let mut text = format!("{:<5} {:<12} {:<16} {:<16} {:>12}\n", "layer", "kind", "input", "output", "params");
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<5} {:<12} {:<16} {:<16} {:>12}",
            r.index,
            r.kind,
            format!("{:?}", r.input),
            format!("{:?}", r.output),
            r.params
        );
    }
    let total: usize = rows.iter().map(|r| r.params).sum();
    let _ = writeln!(text, "{:<5} {:<12} {:<16} {:<16} {:>12}", "", "total", "", "", total);
    (rows, text)
}

#[derive(Debug)]
pub struct ClassifyReport {
    pub fitted: Fitted,
    pub param_count: usize,
    pub test_accuracy: f64,
}

fn require_padded_input(cfg: &ExperimentConfig) -> Result<(), RunError> {
    if (cfg.model.height, cfg.model.width) != (PADDED_SIDE, PADDED_SIDE) {
        return Err(ConfigError::Invalid(format!(
            "image tasks use {PADDED_SIDE}x{PADDED_SIDE} inputs, config has {}x{}",
            cfg.model.height, cfg.model.width
        ))
        .into());
    }
    Ok(())
}

/// Product-state classifier trained with cross entropy; test accuracy per epoch.
pub fn run_classify(cfg: &ExperimentConfig, out: &Path) -> Result<ClassifyReport, RunError> {
    require_padded_input(cfg)?;
    let spec = ModelSpec::new(cfg.model.input_spec(), cfg.model.layers.clone())?;
    if spec.output_shape() != [10] {
        return Err(ConfigError::Invalid(format!("classifier must output 10 logits, got {:?}", spec.output_shape())).into());
    }
    let run = acquire(out)?;
    let (train, test) = load_split(cfg)?;
    let (_, table) = param_table(&spec);
    println!("model: {}\n{table}parameters: {}", format_layers(spec.layers()), spec.param_count());
    let input = spec.input().clone();
    let train_set = ImageDataset { set: &train, input: input.clone(), task: ImageTask::Classify };
    let test_set = ImageDataset { set: &test, input, task: ImageTask::Classify };
    with_threads(cfg.threads, || {
        let fitted = fit(
            cfg,
            FitJob {
                label: "classify",
                spec: spec.clone(),
                loss: Loss::SoftmaxCrossEntropy,
                metric: MetricKind::Accuracy,
                train: &train_set,
                test: &test_set,
                track_train: false,
            },
        )?;
        save_run(&run, "", cfg, &fitted)?;
        let test_accuracy = fitted.final_test().accuracy.unwrap_or(f64::NAN);
        let mut report = format!(
            "task classify\ntrain samples {}\ntest samples {}\nepochs {}\n{table}test accuracy {test_accuracy:.4}\n",
            train.len(),
            test.len(),
            cfg.train.epochs
        );
        let _ = writeln!(report, "data digests {}", train.provenance.join(" "));
        run.write("report.txt", &report)?;
        println!("test accuracy {test_accuracy:.4}");
        Ok(ClassifyReport { param_count: fitted.model.param_count(), fitted, test_accuracy })
    })?
}

#[derive(Debug)]
pub struct AutoencodeReport {
    pub fitted: Fitted,
    pub psnr: f64,
    pub mse: f64,
    pub compression_ratio: f64,
}

/// Tree-network encoder with a deconvolution or dense decoder, trained on MSE.
pub fn run_autoencode(cfg: &ExperimentConfig, out: &Path) -> Result<AutoencodeReport, RunError> {
    require_padded_input(cfg)?;
    let spec = autoencoder_spec(&cfg.autoencode, cfg.model.d)?;
    let cr = compression_ratio(PADDED_SIDE * PADDED_SIDE, bottleneck_len(&cfg.autoencode))
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let run = acquire(out)?;
    let (train, test) = load_split(cfg)?;
    let (_, table) = param_table(&spec);
    println!("model: {}\n{table}compression ratio {cr}", format_layers(spec.layers()));
    let input = spec.input().clone();
    let train_set = ImageDataset { set: &train, input: input.clone(), task: ImageTask::Reconstruct };
    let test_set = ImageDataset { set: &test, input, task: ImageTask::Reconstruct };
    with_threads(cfg.threads, || {
        let fitted = fit(
            cfg,
            FitJob {
                label: "autoencode",
                spec: spec.clone(),
                loss: Loss::MeanSquaredError,
                metric: MetricKind::Psnr,
                train: &train_set,
                test: &test_set,
                track_train: false,
            },
        )?;
        save_run(&run, "", cfg, &fitted)?;
        let last = fitted.final_test();
        let (psnr, mse) = (last.mean_psnr.unwrap_or(f64::NAN), last.mean_mse.unwrap_or(f64::NAN));
        let samples = run.file("samples");
        std::fs::create_dir_all(&samples)?;
        for i in 0..cfg.output.samples.min(test.len()) {
            let (x, _) = test_set.sample(i)?;
            let original = test.images.image(i);
            let recon = fitted.model.forward(&x).map_err(TrainError::from)?;
            let pair = side_by_side(&[&original, recon.data()], PADDED_SIDE, PADDED_SIDE);
            write_pgm(&samples.join(format!("sample_{i:03}.pgm")), 2 * PADDED_SIDE, PADDED_SIDE, &pair)?;
        }
        let report = format!(
            "task autoencode\nbottleneck {b}x{b}\ndecoder {:?}\n{table}compression ratio {cr}\ntest mse {mse:.6}\ntest psnr {psnr:.3} dB\n",
            cfg.autoencode.decoder,
            b = cfg.autoencode.bottleneck
        );
        run.write("report.txt", &report)?;
        println!("test psnr {psnr:.3} dB, mse {mse:.6}, compression ratio {cr}");
        Ok(AutoencodeReport { fitted, psnr, mse, compression_ratio: cr })
    })?
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub family: Family,
    pub size: usize,
    pub params: usize,
    /// Lowest training-set MSE seen after any epoch.
    pub best_train_mse: f64,
    pub final_test_mse: f64,
    /// First epoch at which the training MSE was at or below each floor.
    pub reached: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressReport {
    pub floors: Vec<f64>,
    pub rows: Vec<SweepRow>,
    /// MSE of predicting the mean training label everywhere.
    pub baseline_mse: f64,
}

impl RegressReport {
    /// Parameter count of the smallest `family` member that reached floor `k`.
    pub fn smallest(&self, family: Family, k: usize) -> Option<usize> {
        self.rows.iter().filter(|r| r.family == family && r.reached[k].is_some()).map(|r| r.params).min()
    }

    pub fn table(&self) -> String {
        let mut text = String::new();
        let _ = writeln!(text, "constant-predictor baseline mse {:.4}", self.baseline_mse);
        let _ = write!(text, "{:<6} {:>6} {:>10} {:>14} {:>14}", "family", "size", "params", "best train mse", "test mse");
        for f in &self.floors {
            let _ = write!(text, " {:>10}", format!("ep<={f:e}"));
        }
        text.push('\n');
        for r in &self.rows {
            let _ = write!(
                text,
                "{:<6} {:>6} {:>10} {:>14.6} {:>14.6}",
                r.family.name(),
                r.size,
                r.params,
                r.best_train_mse,
                r.final_test_mse
            );
            for e in &r.reached {
                let _ = write!(text, " {:>10}", e.map_or("-".to_string(), |e| e.to_string()));
            }
            text.push('\n');
        }
        text.push_str("\nsmallest parameter count reaching each floor\n");
        let _ = write!(text, "{:<6}", "family");
        for f in &self.floors {
            let _ = write!(text, " {:>12}", format!("{f:e}"));
        }
        text.push('\n');
        let mut families: Vec<Family> = self.rows.iter().map(|r| r.family).collect();
        families.dedup();
        for family in families {
            let _ = write!(text, "{:<6}", family.name());
            for k in 0..self.floors.len() {
                let cell = self.smallest(family, k).map_or("none".to_string(), |p| p.to_string());
                let _ = write!(text, " {cell:>12}");
            }
            text.push('\n');
        }
        text
    }
}

/// Scalar regression onto the digit value, swept over model sizes per family.
pub fn run_regress(cfg: &ExperimentConfig, out: &Path) -> Result<RegressReport, RunError> {
    require_padded_input(cfg)?;
    let mut specs = Vec::new();
    for &family in &cfg.regress.families {
        for &size in &cfg.regress.sizes[&family] {
            specs.push((family, size, regression_spec(family, size, cfg.model.d, cfg.regress.htn_bond)?));
        }
    }
    let run = acquire(out)?;
    let (train, test) = load_split(cfg)?;
    let mean = train.labels.iter().map(|&l| f64::from(l)).sum::<f64>() / train.len() as f64;
    let baseline_mse = train.labels.iter().map(|&l| (f64::from(l) - mean).powi(2)).sum::<f64>() / train.len() as f64;
    with_threads(cfg.threads, || {
        let mut rows = Vec::new();
        for (family, size, spec) in specs {
            let label = format!("{}_{size}", family.name());
            let input = spec.input().clone();
            let train_set = ImageDataset { set: &train, input: input.clone(), task: ImageTask::Classify };
            let test_set = ImageDataset { set: &test, input, task: ImageTask::Classify };
            let params = spec.param_count();
            let fitted = fit(
                cfg,
                FitJob {
                    label: &label,
                    spec,
                    loss: Loss::MeanSquaredError,
                    metric: MetricKind::Mse,
                    train: &train_set,
                    test: &test_set,
                    track_train: true,
                },
            )?;
            save_run(&run, &format!("{label}_"), cfg, &fitted)?;
            let train_mse: Vec<f64> = fitted.train.iter().map(|s| s.mean_loss).collect();
            let reached = cfg
                .regress
                .floors
                .iter()
                .map(|&f| train_mse.iter().position(|&m| m <= f).map(|e| e + 1))
                .collect();
            rows.push(SweepRow {
                family,
                size,
                params,
                best_train_mse: train_mse.iter().cloned().fold(f64::INFINITY, f64::min),
                final_test_mse: fitted.final_test().mean_loss,
                reached,
            });
        }
        let report = RegressReport { floors: cfg.regress.floors.clone(), rows, baseline_mse };
        let text = report.table();
        run.write("report.txt", &text)?;
        println!("{text}");
        Ok(report)
    })?
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub threads: usize,
    pub median_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Largest thread count beats one thread at the largest bond dimension.
    pub speedup: bool,
    /// Median time grows with bond dimension for every thread count.
    pub monotone: bool,
}

impl BenchReport {
    pub fn median(&self, size: usize, threads: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.size == size && r.threads == threads).map(|r| r.median_seconds)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("size,threads,median_seconds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.9}", r.size, r.threads, r.median_seconds);
        }
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times one tree-layer contraction over a `grid`×`grid` state for each bond
/// dimension and thread count.
pub fn run_bench_contract(cfg: &ExperimentConfig, out: &Path) -> Result<BenchReport, RunError> {
    let run = acquire(out)?;
    let b = &cfg.bench;
    let mut rows = Vec::new();
    for &size in &b.sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ size as u64);
        let g = b.grid;
        let weights = Tensor::from_fn(&[g / 2, g / 2, size, size, size, size, size], |_| rng.gen_range(-1.0..1.0));
        let state = Tensor::from_fn(&[g, g, size], |_| rng.gen_range(-1.0..1.0));
        let layer = TtnLayer::new(g, g, size, size, weights)?;
        for &threads in &b.threads {
            let times = with_threads(threads, || {
                let _ = layer.forward(&state);
                (0..b.reps)
                    .map(|_| {
                        let start = Instant::now();
                        std::hint::black_box(layer.forward(&state).expect("shapes fixed above"));
                        start.elapsed().as_secs_f64()
                    })
                    .collect::<Vec<f64>>()
            })?;
            let m = median(times);
            println!("size {size} threads {threads} median {m:.6}s");
            rows.push(BenchRow { size, threads, median_seconds: m });
        }
    }
    let largest = *b.sizes.iter().max().expect("non-empty");
    let most = *b.threads.iter().max().expect("non-empty");
    let mut report = BenchReport { rows, speedup: false, monotone: true };
    report.speedup = match (report.median(largest, 1), report.median(largest, most)) {
        (Some(one), Some(many)) if most > 1 => many < one,
        _ => false,
    };
    let mut sizes = b.sizes.clone();
    sizes.sort_unstable();
    for &t in &b.threads {
        let series: Vec<f64> = sizes.iter().filter_map(|&s| report.median(s, t)).collect();
        report.monotone &= series.windows(2).all(|w| w[0] < w[1]);
    }
    run.write("bench.csv", &report.csv())?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let summary = format!(
        "available cores {cores}\nmulti-thread faster at largest size: {}\nmonotone in bond dimension: {}\n",
        report.speedup, report.monotone
    );
    run.write("report.txt", &(report.csv() + "\n" + &summary))?;
    print!("{summary}");
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub rows: Vec<LayerSummary>,
    pub total: usize,
    pub text: String,
}

/// Per-layer parameter table of the configured model; touches no data.
pub fn run_count_params(cfg: &ExperimentConfig) -> Result<ParamReport, RunError> {
    let spec = ModelSpec::new(cfg.model.input_spec(), cfg.model.layers.clone())?;
    let (rows, text) = param_table(&spec);
    let total = spec.param_count();
    debug_assert_eq!(total, rows.iter().map(|r| r.params).sum::<usize>());
    print!("{text}");
    Ok(ParamReport { rows, total, text })
}
