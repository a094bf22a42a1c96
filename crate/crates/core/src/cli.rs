//! `pcure` command-line front end.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 3 when a
//! validation check or oracle fails.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cure::{construct, pcure_certify, pcure_infer, DefenseConfig, Manifest, PoolMode, SplitClassifier};
use crate::error::{Error, Result};
use crate::eval::{
    bench_throughput, bench_undefended, emit_report, evaluate, gen_synthetic_dataset, load_dataset, report_csv,
    report_json, save_dataset, train_head, LabeledDataset, ReportFormat, SynthParams, Timing, TrainConfig,
};
use crate::masks::{build_mask_set, k_union_mask_set, DEFAULT_UNION_CAP};
use crate::models::{build_bagnet_toy, build_vit_srf, load_weights_for, save_weights, VitConfig};
use crate::oracles::{attack_probe, exhaustive_cover_check};
use crate::rf::{compose_rf, ImageThreat};
use crate::secure::{Case, SecureKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{s}` is not N or NxM"));
    match s.split_once(['x', 'X']) {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => parse(s).map(|v| (v, v)),
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "pcure", version, about = "Certified patch defense by split receptive fields")]
pub struct Cli {
    /// Seed for every random choice in the pipeline.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (PCURE_WORKERS takes precedence; default all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Build a model and defense manifest, optionally writing a synthetic dataset.
    Build(BuildArgs),
    /// Train the linear head on frozen features.
    Train(TrainArgs),
    /// Run secure inference and print a verdict summary.
    Infer(EvalArgs),
    /// Certify a dataset and write an evaluation report.
    Certify(CertifyArgs),
    /// Measure throughput, optionally sweeping the split index.
    Bench(BenchArgs),
    /// Print a mask set and check its coverage.
    Genmask(GenmaskArgs),
    /// Print receptive-field geometry and corrupted extents per split.
    Rfmap(RfmapArgs),
    /// Attack certified samples and report any verdict change.
    Probe(ProbeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vit,
    Bagnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SecureArg {
    Dm,
    Mr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolArg {
    Exclude,
    Fill,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Dataset directory written by `build --data-out`.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate a synthetic dataset with this seed instead of reading one.
    #[arg(long)]
    pub synthetic: Option<u64>,
    /// Samples for synthetic data.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// Noise level for synthetic data.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildArgs {
    #[arg(long, value_enum, default_value_t = Arch::Vit)]
    pub arch: Arch,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 48)]
    pub image: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Token side in pixels (ViT).
    #[arg(long, default_value_t = 8)]
    pub token: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Receptive field of the BagNet template.
    #[arg(long, default_value_t = 9)]
    pub rf: usize,
    /// Channel width of the BagNet template.
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Split index; defaults to the backbone depth.
    #[arg(long)]
    pub k: Option<usize>,
    /// Attention sub-group in tokens for the prefix (ViT).
    #[arg(long, value_parser = parse_pair, default_value = "6x1")]
    pub group: (usize, usize),
    /// Patch side in pixels, `N` or `HxW`.
    #[arg(long, value_parser = parse_pair, default_value = "8")]
    pub patch: (usize, usize),
    /// Number of simultaneous patches.
    #[arg(long, default_value_t = 1)]
    pub patches: usize,
    /// Mask stride on the masked grid, `N` or `HxW`.
    #[arg(long, value_parser = parse_pair)]
    pub stride: Option<(usize, usize)>,
    #[arg(long, value_enum, default_value_t = SecureArg::Dm)]
    pub secure: SecureArg,
    #[arg(long, value_enum, default_value_t = PoolArg::Exclude)]
    pub pool: PoolArg,
    #[arg(long)]
    pub fill: Option<f32>,
    #[arg(long, default_value = "manifest.json")]
    pub manifest_out: PathBuf,
    #[arg(long, default_value = "weights.pcw")]
    pub weights_out: PathBuf,
    /// Also write a synthetic dataset here.
    #[arg(long)]
    pub data_out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mask_rate: f64,
    /// Where to write trained weights; defaults to overwriting `--weights`.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Write per-sample verdicts as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Patch to certify against; must not exceed the manifest's.
    #[arg(long, value_parser = parse_pair)]
    pub patch: Option<(usize, usize)>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Split indices to sweep; each gets a freshly trained head.
    #[arg(long, value_delimiter = ',')]
    pub k_sweep: Option<Vec<usize>>,
    /// Training data for heads in a sweep.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Synthetic training seed for heads in a sweep.
    #[arg(long)]
    pub train_synthetic: Option<u64>,
    #[arg(long, default_value_t = 500)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Skip certification and only time inference.
    #[arg(long)]
    pub no_certify: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenmaskArgs {
    #[arg(long, value_parser = parse_pair)]
    pub grid: (usize, usize),
    /// Patch extent on the grid.
    #[arg(long, value_parser = parse_pair)]
    pub patch: (usize, usize),
    #[arg(long, value_parser = parse_pair, default_value = "1")]
    pub stride: (usize, usize),
    #[arg(long, default_value_t = 1)]
    pub patches: usize,
    /// Run the dense coverage check and fail with exit 3 if it does not hold.
    #[arg(long)]
    pub verify: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RfmapArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Probe at most this many certified samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Probe at most this many region tuples per sample.
    #[arg(long)]
    pub regions: Option<usize>,
    /// Also probe samples that did not certify.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A check that ran to completion but did not hold.
struct ValidationFailure(String);

enum Failure {
    Lib(Error),
    Validation(ValidationFailure),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Checksum { .. }
        | Error::WeightBlock { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Format(_)
        | Error::Json(_)
        | Error::Diverged { .. } => EXIT_VALIDATION,
        _ => EXIT_CONFIG,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let workers = std::env::var("PCURE_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .or(cli.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {workers} workers: {e}");
            return EXIT_CONFIG;
        }
    };
    match pool.install(|| dispatch(&cli, workers)) {
        Ok(()) => EXIT_OK,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(Failure::Validation(ValidationFailure(msg))) => {
            eprintln!("validation failed: {msg}");
            EXIT_VALIDATION
        }
    }
}

fn dispatch(cli: &Cli, workers: usize) -> std::result::Result<(), Failure> {
    let echo = serde_json::to_value(cli).map_err(Error::from)?;
    let timing = |wall_ms: u64, throughput: Option<f64>| Timing {
        wall_ms,
        throughput,
        workers,
        run: echo.clone(),
    };
    match &cli.command {
        Command::Build(a) => build(a, cli.seed)?,
        Command::Train(a) => train(a, cli.seed)?,
        Command::Infer(a) => infer(a)?,
        Command::Certify(a) => certify(a, &timing)?,
        Command::Bench(a) => bench(a, cli.seed, &timing)?,
        Command::Genmask(a) => genmask(a)?,
        Command::Rfmap(a) => rfmap(a)?,
        Command::Probe(a) => probe(a, cli.seed)?,
    }
    Ok(())
}

fn load_data(d: &DataArgs, n_classes: usize, dims: (usize, usize, usize)) -> Result<LabeledDataset> {
    let data = match (&d.data, d.synthetic) {
        (Some(dir), _) => load_dataset(dir)?,
        (None, Some(seed)) => gen_synthetic_dataset(
            seed,
            &SynthParams {
                n_samples: d.samples,
                n_classes,
                dims,
                noise: d.noise,
            },
        )?,
        (None, None) => return Err(Error::config("give a dataset with --data DIR or --synthetic SEED")),
    };
    if data.n_classes != n_classes {
        return Err(Error::config(format!("dataset has {} classes, model has {n_classes}", data.n_classes)));
    }
    if data.dims().is_some_and(|d| d != dims) {
        return Err(Error::config(format!("dataset images are {:?}, model expects {dims:?}", data.dims())));
    }
    Ok(data)
}

fn load_model(m: &ModelArgs) -> Result<(Manifest, SplitClassifier)> {
    let manifest = Manifest::load(&m.manifest)?;
    let store = load_weights_for(&m.weights, &manifest.model)?;
    let sc = construct(&manifest.model, &store, &manifest.defense, &manifest.threat)?;
    Ok((manifest, sc))
}

fn build(a: &BuildArgs, seed: u64) -> Result<()> {
    let dims = (a.image, a.image, 3);
    let (spec, store, group) = match a.arch {
        Arch::Vit => {
            let cfg = VitConfig {
                image: dims,
                patch: a.token,
                depth: a.depth,
                d: a.dim,
                heads: a.heads,
                hidden: a.hidden,
                group: (a.image / a.token.max(1), a.image / a.token.max(1)),
                n_classes: a.classes,
            };
            let (spec, store) = build_vit_srf(&cfg, seed)?;
            (spec, store, Some(a.group))
        }
        Arch::Bagnet => {
            let (spec, store) = build_bagnet_toy(dims, a.rf, a.classes, a.width, seed)?;
            (spec, store, None)
        }
    };
    let defense = DefenseConfig {
        k: a.k.unwrap_or(spec.depth()),
        group,
        kind: match a.secure {
            SecureArg::Dm => SecureKind::DoubleMasking,
            SecureArg::Mr => SecureKind::MinorityReports,
        },
        stride: a.stride,
        fill: a.fill,
        pool: match a.pool {
            PoolArg::Exclude => PoolMode::ExcludeMasked,
            PoolArg::Fill => PoolMode::FillAndAverage,
        },
        union_cap: DEFAULT_UNION_CAP,
    };
    let threat = ImageThreat {
        p_h: a.patch.0,
        p_w: a.patch.1,
        anchors: Default::default(),
        k: a.patches,
    };
    // fail now rather than at first use
    let sc = construct(&spec, &store, &defense, &threat)?;
    Manifest::new(seed, spec.clone(), defense, threat).save(&a.manifest_out)?;
    save_weights(&a.weights_out, &store, &spec)?;
    println!(
        "built {} (k={}, {} masks on a {}x{} grid)",
        spec.name,
        sc.k,
        sc.mask_set().len(),
        sc.mask_set().grid.0,
        sc.mask_set().grid.1
    );
    if let Some(dir) = &a.data_out {
        let data = gen_synthetic_dataset(
            seed,
            &SynthParams {
                n_samples: a.samples,
                n_classes: a.classes,
                dims,
                noise: a.noise,
            },
        )?;
        save_dataset(dir, &data)?;
        println!("wrote {} samples to {}", data.len(), dir.display());
    }
    Ok(())
}

fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let (manifest, mut sc) = load_model(&a.model)?;
    let data = load_data(&a.data, manifest.model.n_classes, manifest.model.input)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        mask_rate: a.mask_rate,
        seed,
        ..TrainConfig::default()
    };
    let delta = train_head(&sc, &data, &cfg)?;
    delta.apply(&mut sc.store)?;
    let out = a.weights_out.as_deref().unwrap_or(&a.model.weights);
    save_weights(out, &sc.store, &manifest.model)?;
    println!(
        "trained head for {} epochs: loss {:.4} -> {:.4}; wrote {}",
        delta.losses.len(),
        delta.losses.first().copied().unwrap_or(f64::NAN),
        delta.losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Verdict {
    id: usize,
    truth: usize,
    label: Option<usize>,
    case: Case,
    calls: usize,
}

fn infer(a: &EvalArgs) -> Result<()> {
    let (manifest, sc) = load_model(&a.model)?;
    let data = load_data(&a.data, manifest.model.n_classes, manifest.model.input)?;
    use rayon::prelude::*;
    let verdicts: Vec<Verdict> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(id, (x, y))| {
            let v = pcure_infer(x, &sc)?;
            Ok(Verdict {
                id,
                truth: *y,
                label: v.label,
                case: v.case,
                calls: v.calls,
            })
        })
        .collect::<Result<_>>()?;
    let correct = verdicts.iter().filter(|v| v.label == Some(v.truth)).count();
    let count = |c: Case| verdicts.iter().filter(|v| v.case == c).count();
    println!(
        "accuracy {:.4} over {} samples; agreed {} disagreer {} majority {} alert {}",
        correct as f64 / verdicts.len().max(1) as f64,
        verdicts.len(),
        count(Case::Agreed),
        count(Case::Disagreer),
        count(Case::Majority),
        count(Case::Alert)
    );
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&verdicts)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn certify(a: &CertifyArgs, timing: &dyn Fn(u64, Option<f64>) -> Timing) -> Result<()> {
    let (manifest, sc) = load_model(&a.model)?;
    let data = load_data(&a.data, manifest.model.n_classes, manifest.model.input)?;
    let mut threat = manifest.threat.clone();
    if let Some((h, w)) = a.patch {
        threat.p_h = h;
        threat.p_w = w;
    }
    let t = Instant::now();
    let report = evaluate(&sc, &data, &threat)?;
    let t = timing(t.elapsed().as_millis() as u64, None);
    emit_report(&report, &t, ReportFormat::Json, &a.out)?;
    if let Some(csv) = &a.csv {
        emit_report(&report, &t, ReportFormat::Csv, csv)?;
    }
    println!(
        "clean {:.4} certified {:.4} over {} samples; wrote {}",
        report.clean_accuracy,
        report.certified_accuracy,
        report.n_samples,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepEntry {
    k: usize,
    report: Option<serde_json::Value>,
    throughput: f64,
    undefended_throughput: f64,
    calls_per_batch: usize,
    flop_proxy: u64,
}

fn bench(a: &BenchArgs, seed: u64, timing: &dyn Fn(u64, Option<f64>) -> Timing) -> Result<()> {
    let (manifest, base) = load_model(&a.model)?;
    let data = load_data(&a.data, manifest.model.n_classes, manifest.model.input)?;
    let ks = a.k_sweep.clone().unwrap_or_else(|| vec![manifest.defense.k]);
    let train_set = match (&a.train_data, a.train_synthetic) {
        (Some(dir), _) => Some(load_dataset(dir)?),
        (None, Some(s)) => Some(gen_synthetic_dataset(
            s,
            &SynthParams {
                n_samples: a.train_samples,
                n_classes: manifest.model.n_classes,
                dims: manifest.model.input,
                noise: a.data.noise,
            },
        )?),
        (None, None) => None,
    };
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for &k in &ks {
        let mut sc = if k == manifest.defense.k {
            base.clone()
        } else {
            let cfg = DefenseConfig {
                k,
                ..manifest.defense.clone()
            };
            construct(&manifest.model, &base.store, &cfg, &manifest.threat)?
        };
        match &train_set {
            Some(train) => {
                let cfg = TrainConfig {
                    epochs: a.epochs,
                    lr: a.lr,
                    seed,
                    ..TrainConfig::default()
                };
                train_head(&sc, train, &cfg)?.apply(&mut sc.store)?;
            }
            None if k != manifest.defense.k => {
                return Err(Error::config(format!(
                    "k={k} differs from the manifest's k={}; give --train-data or --train-synthetic",
                    manifest.defense.k
                )));
            }
            None => {}
        }
        let defended = bench_throughput(&sc, &data, a.batch, a.warmup, a.repeats)?;
        let plain = bench_undefended(&sc, &data, a.batch, a.warmup, a.repeats)?;
        let report = if a.no_certify {
            None
        } else {
            let t = Instant::now();
            let r = evaluate(&sc, &data, &manifest.threat)?;
            let t = timing(t.elapsed().as_millis() as u64, Some(defended.images_per_sec));
            rows.push((r.clone(), t.clone()));
            Some(serde_json::from_str(&report_json(&r, &t)?)?)
        };
        println!(
            "k={k}: {:.1} img/s defended, {:.1} img/s undefended (ratio {:.3}), flop proxy {}",
            defended.images_per_sec,
            plain.images_per_sec,
            defended.images_per_sec / plain.images_per_sec,
            sc.flop_proxy()
        );
        entries.push(SweepEntry {
            k,
            report,
            throughput: defended.images_per_sec,
            undefended_throughput: plain.images_per_sec,
            calls_per_batch: defended.calls,
            flop_proxy: sc.flop_proxy(),
        });
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, report_csv(&rows)).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&entries)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn genmask(a: &GenmaskArgs) -> std::result::Result<(), Failure> {
    let base = build_mask_set(a.grid, a.patch, a.stride)?;
    let set = k_union_mask_set(&base, a.patches, DEFAULT_UNION_CAP)?;
    let text = serde_json::to_string_pretty(&set).map_err(Error::from)?;
    match &a.out {
        Some(p) => std::fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => println!("{text}"),
    }
    eprintln!("{} masks of {}x{}", set.len(), set.params.mask_size.0, set.params.mask_size.1);
    if a.verify && !exhaustive_cover_check(&set, a.patch, a.patches) {
        return Err(Failure::Validation(ValidationFailure(format!(
            "mask set does not cover every placement of {} {}x{} patch(es)",
            a.patches, a.patch.0, a.patch.1
        ))));
    }
    Ok(())
}

fn rfmap(a: &RfmapArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let spec = &manifest.model;
    let layers = spec.layers();
    let (ph, pw) = (manifest.threat.p_h, manifest.threat.p_w);
    println!("model {} ({} blocks), patch {ph}x{pw}", spec.name, spec.depth());
    println!("k  grid    r_h  s_h  tile_h  r_w  s_w  tile_w  corrupted");
    for k in 0..=spec.depth() {
        let cut = spec.split_point(k)?;
        let prefix = match manifest.defense.group {
            Some(g) => crate::models::to_srf(&layers[..cut], g)?,
            None => layers[..cut].to_vec(),
        };
        let geom = compose_rf(&prefix);
        let mut dims = spec.input;
        for l in &prefix {
            dims = l.output_dims(dims)?;
        }
        let (ch, cw) = geom.corrupted(ph, pw);
        println!(
            "{k:<2} {:>2}x{:<4} {:>4} {:>4} {:>7} {:>4} {:>4} {:>7}  {}x{}",
            dims.0,
            dims.1,
            geom.h.r,
            geom.h.s,
            geom.h.tile,
            geom.w.r,
            geom.w.s,
            geom.w.tile,
            ch.min(dims.0),
            cw.min(dims.1)
        );
    }
    let k = manifest.defense.k;
    let cut = spec.split_point(k)?;
    let prefix = match manifest.defense.group {
        Some(g) => crate::models::to_srf(&layers[..cut], g)?,
        None => layers[..cut].to_vec(),
    };
    let geom = compose_rf(&prefix);
    let mut dims = spec.input;
    for l in &prefix {
        dims = l.output_dims(dims)?;
    }
    println!("corrupted features per patch side at k={k}:");
    for p in [1, 2, 4, 8, 16, 32].into_iter().filter(|&p| p <= spec.input.0.min(spec.input.1)) {
        let (h, w) = geom.corrupted(p, p);
        println!("  p={p:<3} -> {}x{}", h.min(dims.0), w.min(dims.1));
    }
    Ok(())
}

#[derive(Serialize)]
struct ProbeEntry {
    id: usize,
    truth: usize,
    certified: bool,
    result: crate::oracles::ProbeResult,
}

fn probe(a: &ProbeArgs, seed: u64) -> std::result::Result<(), Failure> {
    let (manifest, sc) = load_model(&a.model)?;
    let data = load_data(&a.data, manifest.model.n_classes, manifest.model.input)?;
    let donors: Vec<_> = data.samples.iter().take(8).map(|(x, _)| x.clone()).collect();
    let mut entries = Vec::new();
    for (id, (x, y)) in data.samples.iter().enumerate() {
        if a.limit.is_some_and(|l| entries.len() >= l) {
            break;
        }
        let rec = pcure_certify(id, x, *y, &sc, &manifest.threat)?;
        if !rec.certified && !a.all {
            continue;
        }
        let result = attack_probe(&sc, x, *y, &manifest.threat, &donors, a.trials, seed ^ id as u64, a.regions)?;
        entries.push(ProbeEntry {
            id,
            truth: *y,
            certified: rec.certified,
            result,
        });
    }
    let broken: Vec<usize> = entries
        .iter()
        .filter(|e| e.certified && e.result.counterexample.is_some())
        .map(|e| e.id)
        .collect();
    let flipped = entries.iter().filter(|e| e.result.counterexample.is_some()).count();
    println!(
        "probed {} samples x {} trials per region: {} verdict changes, {} on certified samples",
        entries.len(),
        a.trials,
        flipped,
        broken.len()
    );
    if let Some(p) = &a.out {
        let text = serde_json::to_string_pretty(&entries).map_err(Error::from)?;
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    if !broken.is_empty() {
        return Err(Failure::Validation(ValidationFailure(format!(
            "certified samples {broken:?} changed verdict under attack"
        ))));
    }
    Ok(())
}
