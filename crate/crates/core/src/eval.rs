//! Synthetic datasets, linear-head training under random feature masks,
//! accuracy and certification evaluation, throughput measurement and report
//! emission.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cure::{pcure_certify, pcure_infer, CertRecord, PoolMode, SplitClassifier};
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::models::{Stack, WeightStore};
use crate::rf::ImageThreat;
use crate::secure::apply_mask;
use crate::tensor::{spatial_mean, LayerSpec, Tensor3};
use crate::util::{argmax, fnv1a64, Fnv1a};

/// Largest class count the synthetic generator supports.
pub const MAX_CLASSES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Seed(u64),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<(Tensor3, usize)>,
    pub n_classes: usize,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|(x, _)| x.dims())
    }

    pub fn validate(&self) -> Result<()> {
        let Some(dims) = self.dims() else {
            return Ok(());
        };
        for (i, (x, y)) in self.samples.iter().enumerate() {
            if x.dims() != dims {
                return Err(Error::Format(format!("sample {i} has dims {:?}, expected {dims:?}", x.dims())));
            }
            if *y >= self.n_classes {
                return Err(Error::Format(format!("sample {i} has label {y} outside 0..{}", self.n_classes)));
            }
        }
        Ok(())
    }

    /// FNV-1a over labels and pixel bits.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv1a::default();
        h.update(&(self.n_classes as u64).to_le_bytes());
        for (x, y) in &self.samples {
            h.update(&(*y as u64).to_le_bytes());
            for v in x.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_samples: usize,
    pub n_classes: usize,
    pub dims: (usize, usize, usize),
    /// Scales pixel noise, brightness jitter and signal-fraction jitter.
    pub noise: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_samples: 500,
            n_classes: 8,
            dims: (48, 48, 3),
            noise: 1.0,
        }
    }
}

fn class_color(c: usize, channels: usize) -> Vec<f32> {
    let corner = c % 8;
    (0..channels).map(|ch| if (corner >> (ch % 3)) & 1 == 1 { 0.85 } else { 0.15 }).collect()
}

/// Images whose class is carried by a colour and stripe texture spread over
/// at least 60% of the pixels; the remaining pixels are random distractors.
pub fn gen_synthetic_dataset(seed: u64, params: &SynthParams) -> Result<LabeledDataset> {
    let SynthParams {
        n_samples,
        n_classes,
        dims: (h, w, ch),
        noise,
    } = *params;
    if n_classes == 0 || n_classes > MAX_CLASSES {
        return Err(Error::config(format!("n_classes must be in 1..={MAX_CLASSES}, got {n_classes}")));
    }
    if h == 0 || w == 0 || ch == 0 {
        return Err(Error::config("image dims must be non-zero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0f32, 0.05 * noise.max(0.0) + f32::MIN_POSITIVE).expect("finite sigma");
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let y = i % n_classes;
        let color = class_color(y, ch);
        let vertical = (y / 8) % 2 == 1;
        let period = 3.0 + (y % 4) as f32;
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let signal_frac = 0.75 + noise * rng.gen_range(-0.1..0.1f32);
        let brightness = 1.0 + noise * rng.gen_range(-0.15..0.15f32);
        let mut data = Vec::with_capacity(h * w * ch);
        for r in 0..h {
            for c in 0..w {
                let t = if vertical { c } else { r } as f32;
                let stripe = 0.5 + 0.5 * (std::f32::consts::TAU * t / period + phase).sin();
                let signal = rng.gen::<f32>() < signal_frac;
                for k in 0..ch {
                    let base = if signal {
                        color[k] * (0.7 + 0.3 * stripe)
                    } else {
                        rng.gen::<f32>()
                    };
                    let v = base * brightness + pixel_noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        samples.push((Tensor3::new(h, w, ch, data)?, y));
    }
    samples.shuffle(&mut rng);
    Ok(LabeledDataset {
        samples,
        n_classes,
        provenance: Provenance::Seed(seed),
    })
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    schema_version: u32,
    dims: (usize, usize, usize),
    n_classes: usize,
    seed: Option<u64>,
    labels: Vec<usize>,
    files: Vec<String>,
}

/// Writes one raw little-endian f32 file per sample plus `index.json`.
pub fn save_dataset(dir: &Path, data: &LabeledDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(data.len());
    for (i, (x, _)) in data.samples.iter().enumerate() {
        let name = format!("{i:06}.f32");
        let bytes: Vec<u8> = x.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    let index = DatasetIndex {
        schema_version: DATASET_VERSION,
        dims: data.dims().unwrap_or((0, 0, 0)),
        n_classes: data.n_classes,
        seed: match data.provenance {
            Provenance::Seed(s) => Some(s),
            Provenance::Path(_) => None,
        },
        labels: data.samples.iter().map(|(_, y)| *y).collect(),
        files,
    };
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let path = dir.join("index.json");
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_slice(&text)?;
    if index.schema_version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "dataset index",
            found: index.schema_version,
            supported: DATASET_VERSION,
        });
    }
    if index.labels.len() != index.files.len() {
        return Err(Error::Format("index has different numbers of labels and files".into()));
    }
    let (h, w, c) = index.dims;
    let mut samples = Vec::with_capacity(index.files.len());
    for (name, &y) in index.files.iter().zip(&index.labels) {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != h * w * c * 4 {
            return Err(Error::Format(format!("{}: {} bytes, expected {}", p.display(), bytes.len(), h * w * c * 4)));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        samples.push((Tensor3::new(h, w, c, values)?, y));
    }
    let data = LabeledDataset {
        samples,
        n_classes: index.n_classes,
        provenance: Provenance::Path(dir.to_path_buf()),
    };
    data.validate()?;
    Ok(data)
}

/// Head training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Probability that a sample is seen through a random mask in an epoch.
    pub mask_rate: f64,
    pub seed: u64,
    /// Masked variants precomputed per sample (all masks when the set is smaller).
    pub variants: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr: 2.0,
            mask_rate: 0.5,
            seed: 0,
            variants: 16,
        }
    }
}

/// New head parameters and the per-epoch training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDelta {
    pub layer: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub losses: Vec<f64>,
}

impl HeadDelta {
    pub fn apply(&self, store: &mut WeightStore) -> Result<()> {
        *store.get_mut(self.layer, "weight")? = self.weight.clone();
        *store.get_mut(self.layer, "bias")? = self.bias.clone();
        Ok(())
    }
}

/// Mean cross-entropy of a linear softmax classifier; `w` is `[d][n]`.
pub fn head_loss(z: &[Vec<f32>], y: &[usize], w: &[f64], b: &[f64]) -> f64 {
    head_loss_grad(z, y, w, b).0
}

/// Loss and its gradients with respect to `w` and `b`.
pub fn head_loss_grad(z: &[Vec<f32>], y: &[usize], w: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = b.len();
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; n];
    let mut loss = 0.0;
    let mut logits = vec![0.0f64; n];
    for (zi, &yi) in z.iter().zip(y) {
        logits.copy_from_slice(b);
        for (k, &v) in zi.iter().enumerate() {
            let row = &w[k * n..(k + 1) * n];
            for (l, &wv) in logits.iter_mut().zip(row) {
                *l += v as f64 * wv;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += max + sum.ln() - logits[yi];
        for (c, l) in logits.iter().enumerate() {
            let p = (l - max).exp() / sum - if c == yi { 1.0 } else { 0.0 };
            gb[c] += p;
            for (k, &v) in zi.iter().enumerate() {
                gw[k * n + c] += v as f64 * p;
            }
        }
    }
    let m = z.len().max(1) as f64;
    gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g /= m);
    (loss / m, gw, gb)
}

fn head_of(sc: &SplitClassifier) -> Result<(usize, usize, usize)> {
    match sc.lrf.layers.last() {
        Some(&(idx, LayerSpec::PooledLinearHead { d, n_classes })) => Ok((idx, d, n_classes)),
        _ => Err(Error::config("the suffix does not end in a pooled linear head")),
    }
}

/// Pooled features that the head sees for `f` under `mask`.
pub fn pooled_features(sc: &SplitClassifier, f: &Tensor3, mask: &Mask) -> Result<Vec<f32>> {
    let body = Stack {
        layers: sc.lrf.layers[..sc.lrf.layers.len() - 1].to_vec(),
    };
    if body.is_empty() && sc.config.pool == PoolMode::ExcludeMasked {
        let skip = (!mask.regions().is_empty()).then(|| mask.bitmap((f.h(), f.w())));
        return Ok(spatial_mean(f, skip.as_deref()));
    }
    let masked = apply_mask(f, mask, sc.secure.fill)?;
    Ok(spatial_mean(&body.forward(&masked, &sc.store, None)?, None))
}

/// Multinomial logistic regression on the frozen pooled features, seeing each
/// sample through a random mask with probability `mask_rate` per epoch.
pub fn train_head(sc: &SplitClassifier, data: &LabeledDataset, cfg: &TrainConfig) -> Result<HeadDelta> {
    let (layer, d, n) = head_of(sc)?;
    if data.n_classes != n {
        return Err(Error::config(format!("dataset has {} classes, head has {n}", data.n_classes)));
    }
    let masks = &sc.mask_set().masks;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let variant_ids: Vec<Vec<usize>> = data
        .samples
        .iter()
        .map(|_| {
            let mut ids: Vec<usize> = (0..masks.len()).collect();
            if ids.len() > cfg.variants {
                ids.shuffle(&mut rng);
                ids.truncate(cfg.variants);
            }
            ids
        })
        .collect();
    // [clean, masked variants...] per sample
    let feats: Vec<Vec<Vec<f32>>> = data
        .samples
        .par_iter()
        .zip(&variant_ids)
        .map(|((x, _), ids)| {
            let f = sc.features(x)?;
            let mut out = vec![pooled_features(sc, &f, &Mask::empty())?];
            for &i in ids {
                out.push(pooled_features(sc, &f, &masks[i])?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = data.samples.iter().map(|(_, y)| *y).collect();

    let mut w: Vec<f64> = sc.store.get(layer, "weight")?.iter().map(|&v| v as f64).collect();
    let mut b: Vec<f64> = sc.store.get(layer, "bias")?.iter().map(|&v| v as f64).collect();
    debug_assert_eq!(w.len(), d * n);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut batch: Vec<Vec<f32>> = Vec::with_capacity(feats.len());
    for epoch in 0..cfg.epochs {
        batch.clear();
        for variants in &feats {
            let pick = if variants.len() > 1 && rng.gen_bool(cfg.mask_rate.clamp(0.0, 1.0)) {
                rng.gen_range(1..variants.len())
            } else {
                0
            };
            batch.push(variants[pick].clone());
        }
        let (loss, gw, gb) = head_loss_grad(&batch, &labels, &w, &b);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        losses.push(loss);
        for (p, g) in w.iter_mut().zip(&gw).chain(b.iter_mut().zip(&gb)) {
            *p -= cfg.lr * g;
        }
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
    }
    Ok(HeadDelta {
        layer,
        weight: w.iter().map(|&v| v as f32).collect(),
        bias: b.iter().map(|&v| v as f32).collect(),
        losses,
    })
}

pub const REPORT_VERSION: u32 = 1;

/// Deterministic part of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub k: usize,
    pub depth: usize,
    pub group: Option<(usize, usize)>,
    pub patch: (usize, usize),
    pub stride: (usize, usize),
    pub masks: usize,
    pub flop_proxy: u64,
    pub n_samples: usize,
    pub clean_accuracy: f64,
    pub certified_accuracy: f64,
    /// Echo of the run configuration.
    pub config: serde_json::Value,
    pub records: Vec<CertRecord>,
}

/// Run-dependent side of a report, kept out of the hashed section: wall
/// clock, throughput, worker count and the verbatim run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub wall_ms: u64,
    pub throughput: Option<f64>,
    pub workers: usize,
    pub run: serde_json::Value,
}

/// Clean and certified accuracy over `data`.
pub fn evaluate(sc: &SplitClassifier, data: &LabeledDataset, threat: &ImageThreat) -> Result<EvalReport> {
    let records: Vec<CertRecord> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| pcure_certify(i, x, *y, sc, threat))
        .collect::<Result<_>>()?;
    let n = records.len().max(1) as f64;
    let clean = records.iter().filter(|r| r.predicted == Some(r.truth)).count();
    let cert = records.iter().filter(|r| r.certified).count();
    assert!(cert <= clean, "certified samples are always correctly predicted");
    let m = sc.mask_set();
    Ok(EvalReport {
        name: sc.spec.name.clone(),
        k: sc.k,
        depth: sc.depth,
        group: sc.config.group,
        patch: (threat.p_h, threat.p_w),
        stride: m.params.stride,
        masks: m.len(),
        flop_proxy: sc.flop_proxy(),
        n_samples: records.len(),
        clean_accuracy: clean as f64 / n,
        certified_accuracy: cert as f64 / n,
        config: serde_json::json!({
            "defense": sc.config,
            "threat": threat,
            "dataset_hash": format!("{:016x}", data.hash()),
            "weights_hash": format!("{:016x}", sc.store.hash()),
        }),
        records,
    })
}

/// Median throughput over repeated timed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub images_per_sec: f64,
    pub runs: Vec<f64>,
    pub batch: usize,
    /// Classifier calls per timed run.
    pub calls: usize,
}

/// Times `run` on `batch` images (cycling through `data`) after `warmup`
/// untimed batches; `run` returns the classifier calls it made.
pub fn bench_with<F>(data: &LabeledDataset, batch: usize, warmup: usize, repeats: usize, mut run: F) -> Result<BenchResult>
where
    F: FnMut(&Tensor3) -> Result<usize>,
{
    if repeats < 3 {
        return Err(Error::config("throughput needs at least 3 repeats"));
    }
    if data.is_empty() || batch == 0 {
        return Err(Error::config("throughput needs a non-empty dataset and batch"));
    }
    let mut one_batch = |calls: &mut usize| -> Result<()> {
        for i in 0..batch {
            // copy in as a loader would
            let x = data.samples[i % data.len()].0.clone();
            *calls += run(&x)?;
        }
        Ok(())
    };
    for _ in 0..warmup {
        one_batch(&mut 0)?;
    }
    let mut runs = Vec::with_capacity(repeats);
    let mut calls = 0;
    for _ in 0..repeats {
        calls = 0;
        let t = Instant::now();
        one_batch(&mut calls)?;
        runs.push(batch as f64 / t.elapsed().as_secs_f64().max(1e-9));
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchResult {
        images_per_sec: sorted[sorted.len() / 2],
        runs,
        batch,
        calls,
    })
}

/// Throughput of secure inference.
pub fn bench_throughput(sc: &SplitClassifier, data: &LabeledDataset, batch: usize, warmup: usize, repeats: usize) -> Result<BenchResult> {
    bench_with(data, batch, warmup, repeats, |x| Ok(pcure_infer(x, sc)?.calls))
}

/// Throughput of the same network run once, without any defense.
pub fn bench_undefended(sc: &SplitClassifier, data: &LabeledDataset, batch: usize, warmup: usize, repeats: usize) -> Result<BenchResult> {
    bench_with(data, batch, warmup, repeats, |x| {
        argmax(&sc.undefended_scores(x)?);
        Ok(1)
    })
}

/// Report file: version, deterministic section with its hash, timings.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub hash: String,
    pub report: EvalReport,
    pub timing: Timing,
}

pub fn report_hash(report: &EvalReport) -> u64 {
    fnv1a64(&serde_json::to_vec(report).expect("report serialises"))
}

pub fn report_json(report: &EvalReport, timing: &Timing) -> Result<String> {
    let file = ReportFile {
        schema_version: REPORT_VERSION,
        hash: format!("{:016x}", report_hash(report)),
        report: report.clone(),
        timing: timing.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn read_report(text: &str) -> Result<ReportFile> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != REPORT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "report",
            found,
            supported: REPORT_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

pub const CSV_HEADER: &str = "name,k,group,patch,stride,clean_acc,cert_acc,throughput";

fn pair(p: (usize, usize)) -> String {
    format!("{}x{}", p.0, p.1)
}

pub fn csv_row(report: &EvalReport, timing: &Timing) -> String {
    format!(
        "{},{},{},{},{},{:.4},{:.4},{}",
        report.name.replace(',', ";"),
        report.k,
        report.group.map(pair).unwrap_or_else(|| "native".into()),
        pair(report.patch),
        pair(report.stride),
        report.clean_accuracy,
        report.certified_accuracy,
        timing.throughput.map(|t| format!("{t:.1}")).unwrap_or_default(),
    )
}

pub fn report_csv(rows: &[(EvalReport, Timing)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (r, t) in rows {
        out.push_str(&csv_row(r, t));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes one report as JSON or as a single-row CSV.
pub fn emit_report(report: &EvalReport, timing: &Timing, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report_json(report, timing)?,
        ReportFormat::Csv => report_csv(&[(report.clone(), timing.clone())]),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
