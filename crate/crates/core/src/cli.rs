//! Command-line front end: `train`, `evaluate`, `predict`, `bench`, `selftest`.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 input or data error,
//! 3 checkpoint/config mismatch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint;
use crate::dataio::{
    self, DatasetKind, DatasetManifest, FileSource, SampleSource, Split, Subset, Taxonomy,
};
use crate::error::{Error, Result};
use crate::flops::{self, BenchSpec, BENCH_HEADER};
use crate::metrics::{self, ConfusionMatrix, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::optim::{self, FitConfig, LambConfig};
use crate::selftest::{self, SelftestOptions};
use crate::tensor::{self, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

/// Default output directory when `--out` is not given.
pub const OUT_ENV: &str = "LATENT_BOTTLENECK_OUT";
pub const DEFAULT_OUT: &str = "runs";

/// Every key accepted in a config file or `--override`.
///
/// Defaults are the 224-pixel / patch-14 configuration with batch 32, 100
/// epochs, learning rate 1e-3 and weight decay 1e-4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub projection_dim: usize,
    pub latent_len: usize,
    pub num_heads: usize,
    pub latent_layers: usize,
    pub repeats: usize,
    pub share_weights: bool,
    pub dropout: f64,
    pub causal_latent: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub trust_clamp_lo: f64,
    pub trust_clamp_hi: f64,
    pub augment: bool,
    pub keep_best: bool,
    pub val_fraction: f64,
    /// Write wall-clock seconds into the curves file (0 when false).
    pub curve_timing: bool,

    pub dataset_kind: DatasetKind,
    pub data_root: Option<PathBuf>,
    pub taxonomy_file: Option<PathBuf>,
    /// Defaults to 0.2, or 0.1 for herlev.
    pub test_fraction: Option<f64>,
    /// Generate this many blob images per class under `<out>/synthetic_data`
    /// instead of reading `data_root`.
    pub synthetic_per_class: Option<usize>,
    pub synthetic_classes: usize,

    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::sipakmed();
        let l = LambConfig::default();
        let f = FitConfig::default();
        RunConfig {
            image_size: m.image_size,
            patch_size: m.patch_size,
            channels: m.channels,
            projection_dim: m.projection_dim,
            latent_len: m.latent_len,
            num_heads: m.num_heads,
            latent_layers: m.latent_layers,
            repeats: m.repeats,
            share_weights: m.share_weights,
            dropout: m.dropout,
            causal_latent: m.causal_latent,
            epochs: f.epochs,
            batch_size: f.batch_size,
            learning_rate: l.learning_rate,
            weight_decay: l.weight_decay,
            beta1: l.beta1,
            beta2: l.beta2,
            epsilon: l.epsilon,
            trust_clamp_lo: l.clamp_lo,
            trust_clamp_hi: l.clamp_hi,
            augment: f.augment,
            keep_best: f.keep_best,
            val_fraction: 0.1,
            curve_timing: true,
            dataset_kind: DatasetKind::Sipakmed,
            data_root: None,
            taxonomy_file: None,
            test_fraction: None,
            synthetic_per_class: None,
            synthetic_classes: 2,
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            projection_dim: self.projection_dim,
            latent_len: self.latent_len,
            num_heads: self.num_heads,
            latent_layers: self.latent_layers,
            repeats: self.repeats,
            share_weights: self.share_weights,
            dropout: self.dropout,
            num_classes,
            causal_latent: self.causal_latent,
            seed: self.seed,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lamb: LambConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
                clamp_lo: self.trust_clamp_lo,
                clamp_hi: self.trust_clamp_hi,
            },
            seed: self.seed,
            augment: self.augment,
            keep_best: self.keep_best,
            stop_at_train_acc: None,
        }
    }

    pub fn test_fraction(&self) -> f64 {
        self.test_fraction
            .unwrap_or_else(|| self.dataset_kind.default_test_fraction())
    }

    /// FNV-1a digest of the canonical JSON form, ignoring `out_dir`.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(&RunConfig {
            out_dir: None,
            ..self.clone()
        })
        .expect("config serialises");
        format!("{:016x}", checkpoint::digest(&json))
    }
}

/// Parses `key = json-value` lines. `#` starts a comment line; bare words
/// that are not valid JSON are taken as strings.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got {line:?}",
                n + 1
            ))
        })?;
        out.push((k.trim().to_string(), parse_value(v.trim())));
    }
    Ok(out)
}

fn parse_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// Defaults, then `file` assignments, then `overrides`. Unknown keys are errors.
pub fn resolve_config(
    file: &[(String, Value)],
    overrides: &[(String, Value)],
) -> Result<RunConfig> {
    let Value::Object(mut map) = serde_json::to_value(RunConfig::default())? else {
        unreachable!("struct serialises to an object")
    };
    for (k, v) in file.iter().chain(overrides) {
        if !map.contains_key(k) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        map.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))
}

/// Source of class predictions for [`evaluate_predictor`]. Lets tests
/// substitute a fixed classifier for the model.
pub trait Predictor {
    fn class_names(&self) -> &[String];
    fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>>;
}

pub struct ModelPredictor {
    pub model: Model<f32>,
    pub class_names: Vec<String>,
}

impl Predictor for ModelPredictor {
    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(optim::argmax_rows(&self.model.logits(images)?))
    }
}

/// Confusion matrix and report of `predictor` over every sample of `source`.
pub fn evaluate_predictor(
    predictor: &dyn Predictor,
    source: &dyn SampleSource,
    batch_size: usize,
    config_digest: Option<String>,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    let mut cm = ConfusionMatrix::zeros(predictor.class_names().to_vec());
    let all: Vec<usize> = (0..source.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (images, labels) = dataio::assemble_batch(source, chunk, None)?;
        for (t, p) in labels.into_iter().zip(predictor.predict(&images)?) {
            cm.add(t, p)?;
        }
    }
    let positive = positive_class(&cm.class_names);
    let report = MetricsReport::from_confusion(&cm, positive, config_digest)?;
    Ok((cm, report))
}

/// "Abnormal" is the positive class when present.
fn positive_class(names: &[String]) -> Option<usize> {
    names
        .iter()
        .position(|n| n.eq_ignore_ascii_case("abnormal"))
}

#[derive(Debug, Parser)]
#[command(
    name = "latent-bottleneck",
    version,
    about = "Latent-bottleneck cross-attention image classifier",
    after_help = "Environment:\n  LATENT_BOTTLENECK_OUT  default output directory for train and evaluate (otherwise ./runs)\n\nExit codes: 0 ok, 1 self-test failure, 2 input/data error, 3 checkpoint/config mismatch"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset and write checkpoint, curves and test metrics.
    Train {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [env: LATENT_BOTTLENECK_OUT, default: runs].
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key=value`, applied after the config file. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kind: DatasetKind,
        /// `fine,coarse` lines (custom datasets; defaults to the checkpoint's taxonomy).
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        test_fraction: Option<f64>,
        /// Split seed (defaults to the one stored in the checkpoint).
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate every sample instead of the test split.
        #[arg(long)]
        all: bool,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Print class probabilities for images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Analytic flops and measured cross-attention time as M grows.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1296")]
        m: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        l: usize,
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// Gradient checks, attention invariants, optimizer and metric oracles.
    Selftest {
        /// Scale the backward pass of one op to demonstrate detection.
        #[arg(long, hide = true)]
        perturb_grad: Option<String>,
    },
}

impl clap::builder::ValueParserFactory for DatasetKind {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| {
            s.parse::<DatasetKind>().map_err(|e| e.to_string())
        })
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ConfigMismatch(_) => EXIT_MISMATCH,
        _ => EXIT_INPUT,
    }
}

fn out_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out: dir,
            overrides,
        } => cmd_train(config.as_deref(), seed, dir, &overrides, out, err),
        Command::Evaluate {
            checkpoint,
            data,
            kind,
            taxonomy,
            test_fraction,
            seed,
            all,
            out: dir,
        } => {
            let args = EvalArgs {
                checkpoint,
                data,
                kind,
                taxonomy,
                test_fraction,
                seed,
                all,
                out: out_dir(dir),
            };
            cmd_evaluate(&args, out)
        }
        Command::Predict { checkpoint, images } => cmd_predict(&checkpoint, &images, out, err),
        Command::Bench {
            m,
            n,
            l,
            d,
            heads,
            runs,
        } => cmd_bench(
            &BenchSpec {
                m_values: m,
                n,
                l,
                d,
                heads,
                repeats: 2,
                runs,
            },
            out,
        ),
        Command::Selftest { perturb_grad } => cmd_selftest(&SelftestOptions { perturb_grad }, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn cmd_train(
    config: Option<&Path>,
    seed: Option<u64>,
    out_arg: Option<PathBuf>,
    overrides: &[String],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let file = match config {
        Some(p) => parse_assignments(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Vec::new(),
    };
    let mut over = Vec::new();
    for o in overrides {
        over.extend(parse_assignments(o)?);
    }
    if let Some(s) = seed {
        over.push(("seed".into(), Value::from(s)));
    }
    let mut cfg = resolve_config(&file, &over)?;
    let dir = out_arg
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| out_dir(None));
    cfg.out_dir = Some(dir.clone());
    create_dir(&dir)?;

    let (root, kind, taxonomy) = match cfg.synthetic_per_class {
        Some(per_class) => {
            let root = dir.join("synthetic_data");
            dataio::write_synthetic_dataset(
                &root,
                per_class,
                cfg.synthetic_classes,
                cfg.image_size,
                cfg.seed,
            )?;
            let tax = Taxonomy::parse(
                &std::fs::read_to_string(root.join("taxonomy.txt"))
                    .map_err(|e| Error::io(&root, e))?,
            )?;
            (root, DatasetKind::Custom, Some(tax))
        }
        None => {
            let root = cfg
                .data_root
                .clone()
                .ok_or_else(|| Error::Config("data_root is not set".into()))?;
            let tax = match &cfg.taxonomy_file {
                Some(p) => Some(Taxonomy::parse(
                    &std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                )?),
                None => None,
            };
            (root, cfg.dataset_kind, tax)
        }
    };
    let manifest = dataio::load_manifest(&root, kind, taxonomy)?;
    for w in &manifest.warnings {
        writeln!(err, "warning: {w}").map_err(io_out)?;
    }
    let manifest = dataio::split(&manifest, cfg.test_fraction(), cfg.seed)?;
    write_file(&dir.join("manifest.json"), &manifest.to_json()?)?;

    let class_names = manifest.taxonomy.coarse.clone();
    let model_cfg = cfg.model_config(class_names.len());
    let mut model = Model::<f32>::new(model_cfg)?;
    let train_all = FileSource::from_manifest(&manifest, Some(Split::Train), cfg.image_size);
    let (train_idx, val_idx) = if cfg.val_fraction > 0.0 {
        dataio::stratified_indices(&train_all.labels, cfg.val_fraction, cfg.seed)?
    } else {
        ((0..train_all.len()).collect(), Vec::new())
    };
    let train = Subset {
        inner: &train_all,
        indices: train_idx,
    };
    let val = Subset {
        inner: &train_all,
        indices: val_idx,
    };
    let val_ref: Option<&dyn SampleSource> = if val.is_empty() { None } else { Some(&val) };

    let fit_cfg = cfg.fit_config();
    let outcome = optim::fit_with(&mut model, &train, val_ref, &fit_cfg, |r| {
        let _ = writeln!(err, "epoch {:>3}  {}", r.epoch, r.csv(true));
    })?;
    optim::write_curves(&dir.join("curves.csv"), &outcome.history, cfg.curve_timing)?;

    let extra = checkpoint_extra(&cfg, kind, &root, &manifest);
    checkpoint::save(&dir.join("model.ckpt"), &model, &class_names, extra.clone())?;
    if let Some((_, best)) = &outcome.best {
        let best_model = Model::from_parts(model.config.clone(), best.clone())?;
        checkpoint::save(&dir.join("best.ckpt"), &best_model, &class_names, extra)?;
    }

    let test = FileSource::from_manifest(&manifest, Some(Split::Test), cfg.image_size);
    let predictor = ModelPredictor { model, class_names };
    let (_, report) = evaluate_predictor(&predictor, &test, cfg.batch_size, Some(cfg.digest()))?;
    metrics::emit_report(&report, &dir.join("metrics.json"))?;
    write_file(&dir.join("metrics.csv"), &report.to_csv())?;
    write_file(
        &dir.join("config.json"),
        &serde_json::to_string_pretty(&cfg)?,
    )?;

    let last = outcome.history.last();
    writeln!(
        out,
        "trained {} epochs on {} images: train acc {:.4}, test acc {:.4} ({} images); wrote {}",
        outcome.history.len(),
        train.len(),
        last.map_or(0.0, |r| r.train_acc),
        report.accuracy,
        report.total,
        dir.display()
    )
    .map_err(io_out)?;
    Ok(EXIT_OK)
}

fn checkpoint_extra(
    cfg: &RunConfig,
    kind: DatasetKind,
    root: &Path,
    m: &DatasetManifest,
) -> BTreeMap<String, Value> {
    let mut extra = BTreeMap::new();
    extra.insert("dataset_kind".into(), Value::from(kind.name()));
    extra.insert("data_root".into(), Value::from(root.display().to_string()));
    extra.insert("test_fraction".into(), Value::from(cfg.test_fraction()));
    extra.insert("split_seed".into(), Value::from(cfg.seed));
    extra.insert(
        "taxonomy".into(),
        serde_json::to_value(&m.taxonomy).unwrap_or(Value::Null),
    );
    extra.insert("config_digest".into(), Value::from(cfg.digest()));
    extra
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub kind: DatasetKind,
    pub taxonomy: Option<PathBuf>,
    pub test_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub all: bool,
    pub out: PathBuf,
}

pub fn cmd_evaluate(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let extra = &ck.meta.extra;
    let same_kind = extra.get("dataset_kind").and_then(Value::as_str) == Some(a.kind.name());
    let taxonomy = match &a.taxonomy {
        Some(p) => Some(Taxonomy::parse(
            &std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        )?),
        None if a.kind == DatasetKind::Custom => extra
            .get("taxonomy")
            .and_then(|t| serde_json::from_value::<Taxonomy>(t.clone()).ok()),
        None => None,
    };
    let manifest = dataio::load_manifest(&a.data, a.kind, taxonomy)?;
    let classes = &manifest.taxonomy.coarse;
    if classes.len() != ck.meta.config.num_classes {
        let d = ck.meta.config.projection_dim;
        return Err(Error::ConfigMismatch(vec![format!(
            "head.weight: checkpoint has [{d}, {}] ({} classes), dataset needs [{d}, {}] ({})",
            ck.meta.config.num_classes,
            ck.meta.class_names.join("/"),
            classes.len(),
            classes.join("/")
        )]));
    }
    let stored = |k: &str| if same_kind { extra.get(k) } else { None };
    let fraction = a
        .test_fraction
        .or_else(|| stored("test_fraction").and_then(Value::as_f64))
        .unwrap_or_else(|| a.kind.default_test_fraction());
    let seed = a
        .seed
        .or_else(|| stored("split_seed").and_then(Value::as_u64))
        .unwrap_or(0);
    let source = if a.all {
        FileSource::from_manifest(&manifest, None, ck.meta.config.image_size)
    } else {
        let split = dataio::split(&manifest, fraction, seed)?;
        FileSource::from_manifest(&split, Some(Split::Test), ck.meta.config.image_size)
    };
    if source.is_empty() {
        return Err(Error::arg(format!(
            "no images to evaluate under {}",
            a.data.display()
        )));
    }
    let digest = extra
        .get("config_digest")
        .and_then(Value::as_str)
        .map(str::to_string);
    let predictor = ModelPredictor {
        model: ck.model,
        class_names: ck.meta.class_names.clone(),
    };
    let (cm, report) = evaluate_predictor(&predictor, &source, 32, digest)?;
    create_dir(&a.out)?;
    metrics::emit_report(&report, &a.out.join("metrics.json"))?;
    write_file(&a.out.join("metrics.csv"), &report.to_csv())?;
    write!(out, "{}", render_summary(&cm, &report)).map_err(io_out)?;
    Ok(EXIT_OK)
}

/// Confusion matrix (rows = true, columns = predicted) and headline numbers.
pub fn render_summary(cm: &ConfusionMatrix, r: &MetricsReport) -> String {
    let mut s = String::from("confusion matrix (rows true, columns predicted)\n");
    for (name, row) in cm.class_names.iter().zip(&cm.counts) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
        s.push_str(&format!("  {name:<12}{}\n", cells.join("")));
    }
    s.push_str(&format!(
        "accuracy {:.4} ({}/{})\n",
        r.accuracy, r.correct, r.total
    ));
    if let Some(k) = r.cohen_kappa {
        s.push_str(&format!("kappa    {k:.4}\n"));
    }
    for c in &r.per_class {
        s.push_str(&format!(
            "  {:<12} precision {:.4} recall {:.4} f1 {:.4}\n",
            c.class, c.precision, c.recall, c.f1
        ));
    }
    if let Some(sc) = &r.screening {
        s.push_str(&format!(
            "  positive {}: sensitivity {:.4} specificity {:.4} PPV {:.4} NPV {:.4}\n",
            sc.positive_class,
            sc.sensitivity,
            sc.specificity,
            sc.positive_predictive_value,
            sc.negative_predictive_value
        ));
    }
    s
}

/// Softmax probabilities of one image, or the reason it could not be read.
pub fn predict_image(model: &Model<f32>, path: &Path) -> Result<Vec<f32>> {
    let img = dataio::resize(&dataio::load_image(path)?, model.config.image_size)?;
    let batch = Tensor::stack(&[img])?;
    let probs = tensor::softmax(&model.logits(&batch)?, 1)?;
    Ok(probs.into_data())
}

pub fn cmd_predict(
    checkpoint: &Path,
    images: &[PathBuf],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let ck = checkpoint::load(checkpoint)?;
    let mut ok = 0;
    for path in images {
        match predict_image(&ck.model, path) {
            Ok(p) => {
                let best = optim::argmax_rows(&Tensor::new(vec![1, p.len()], p.clone())?)[0];
                let probs: Vec<String> = ck
                    .meta
                    .class_names
                    .iter()
                    .zip(&p)
                    .map(|(n, v)| format!("{n}={v:.6}"))
                    .collect();
                writeln!(
                    out,
                    "{}\t{}\t{}",
                    path.display(),
                    ck.meta.class_names[best],
                    probs.join(" ")
                )
                .map_err(io_out)?;
                ok += 1;
            }
            Err(e @ (Error::Io { .. } | Error::Decode { .. })) => {
                writeln!(err, "error: {e}").map_err(io_out)?
            }
            Err(e) => writeln!(err, "error: {}: {e}", path.display()).map_err(io_out)?,
        }
    }
    Ok(if ok == 0 { EXIT_INPUT } else { EXIT_OK })
}

pub fn cmd_bench(spec: &BenchSpec, out: &mut dyn Write) -> Result<i32> {
    let rows = flops::bench(spec)?;
    writeln!(out, "{BENCH_HEADER}").map_err(io_out)?;
    for r in rows {
        writeln!(out, "{}", r.csv()).map_err(io_out)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_selftest(opts: &SelftestOptions, out: &mut dyn Write) -> Result<i32> {
    let results = selftest::run(opts)?;
    write!(out, "{}", selftest::render(&results)).map_err(io_out)?;
    Ok(if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_precedence_three_layers() {
        let file =
            parse_assignments("# demo\nepochs = 7\nbatch_size = 16\ndataset_kind = \"herlev\"\n")
                .unwrap();
        let over = parse_assignments("batch_size=8").unwrap();
        let cfg = resolve_config(&file, &over).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.dataset_kind, DatasetKind::Herlev);
        assert_eq!(cfg.test_fraction(), 0.1);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(
            resolve_config(&parse_assignments("epoch = 3").unwrap(), &[]),
            Err(Error::Config(_))
        ));
        assert!(resolve_config(&parse_assignments("epochs = \"many\"").unwrap(), &[]).is_err());
        assert!(parse_assignments("just words").is_err());
        let cfg = resolve_config(&parse_assignments("data_root = /tmp/x").unwrap(), &[]).unwrap();
        assert_eq!(cfg.data_root, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(
            (c.batch_size, c.epochs, c.learning_rate, c.weight_decay),
            (32, 100, 1e-3, 1e-4)
        );
        assert_eq!(c.model_config(3), ModelConfig::sipakmed());
    }
}
