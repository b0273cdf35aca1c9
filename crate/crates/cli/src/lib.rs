//! Command-line pipeline around the core library: dataset loading specs,
//! per-stage subcommands, the end-to-end `run` orchestration, JSON config
//! files with flag precedence, and exit-code mapping.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ndarray::s;

use pvadv_core::attacks::{AdversarialSet, AttackConfig, AttackKind, run_attack};
use pvadv_core::classifier::{ArchSpec, CnnClassifier, TrainConfig};
use pvadv_core::data::{self, Dataset};
use pvadv_core::detector::{DetectorModel, train_detector};
use pvadv_core::error::{Error, Result};
use pvadv_core::eval::{self, MetricsRow};
use pvadv_core::rng::derive_seed;
use pvadv_core::vulnmap::{
    self, MaskVariant, VulnNet, VulnTrainConfig, budget_from_beta, compose_adversarial,
    masks_for_set, vuln_map,
};

type F = f32;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArg { .. } => 2,
        Error::Io { .. } | Error::Format { .. } | Error::ShapeMismatch { .. } => 3,
        _ => 4,
    }
}

/// Dataset specs:
///   synthetic:N:H:W:K       blob classes
///   digits:N                28x28 synthetic digits, 10 classes
///   mnist:IMAGES:LABELS     IDX pair
///   cifar10:BIN[,BIN...]    CIFAR-10 binary batches
pub fn load_dataset(spec: &str, seed: u64) -> Result<Dataset<F>> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "synthetic" => {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 4 {
                return Err(Error::invalid("dataset", format!("want synthetic:N:H:W:K, got `{spec}`")));
            }
            let p = |i: usize| -> Result<usize> {
                parts[i]
                    .parse()
                    .map_err(|_| Error::invalid("dataset", format!("bad number `{}` in `{spec}`", parts[i])))
            };
            data::synthetic_dataset(seed, p(0)?, p(1)?, p(2)?, p(3)?)
        }
        "digits" => {
            let n: usize = rest
                .parse()
                .map_err(|_| Error::invalid("dataset", format!("want digits:N, got `{spec}`")))?;
            data::synthetic_digits(seed, n)
        }
        "mnist" => {
            let (images, labels) = rest
                .split_once(':')
                .ok_or_else(|| Error::invalid("dataset", format!("want mnist:IMAGES:LABELS, got `{spec}`")))?;
            data::load_mnist_idx(Path::new(images), Path::new(labels))
        }
        "cifar10" => {
            if rest.is_empty() {
                return Err(Error::invalid("dataset", format!("want cifar10:BIN[,BIN...], got `{spec}`")));
            }
            let paths: Vec<PathBuf> = rest.split(',').map(PathBuf::from).collect();
            let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
            data::load_cifar10_bin(&refs)
        }
        other => Err(Error::invalid("dataset", format!("unknown dataset kind `{other}`"))),
    }
}

fn load_limited(spec: &str, limit: Option<usize>, seed: u64) -> Result<Dataset<F>> {
    let ds = load_dataset(spec, seed)?;
    Ok(match limit {
        Some(n) if n < ds.len() => ds.take(n),
        _ => ds,
    })
}

#[derive(Parser, Debug)]
#[command(name = "pvadv", about = "Per-pixel vulnerability maps for sparse adversarial attacks")]
pub struct Cli {
    /// JSON config file with flat keys matching flag names; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the CNN classifier and write a checkpoint.
    TrainClassifier(TrainClassifierArgs),
    /// Run a source attack over a dataset and write the adversarial set.
    Attack(AttackArgs),
    /// Train the vulnerability network against a frozen classifier.
    TrainVulnmap(TrainVulnmapArgs),
    /// Compose masked adversarials from a trained vulnerability network.
    GenAdv(GenAdvArgs),
    /// Train the 3-feature logistic-regression detector.
    TrainDetector(TrainDetectorArgs),
    /// Compute metrics for an adversarial set and write the CSV report.
    Evaluate(EvaluateArgs),
    /// Export per-image probability maps as PGM plus a CSV of raw values.
    ExportMaps(ExportMapsArgs),
    /// Full pipeline: classifier, source attack, vulnerability map,
    /// detector, evaluation; all artifacts under one output directory.
    Run(RunArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Architecture: cnn (two 5x5 conv blocks + fc1024) or tiny.
    #[arg(long, default_value = "cnn")]
    pub arch: String,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub attack: String,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub no_random_init: bool,
    /// JSMA pixel budget; defaults to round(beta * H * W) with beta 0.3.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainVulnmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value = "pgd")]
    pub source: String,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct GenAdvArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vuln: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value = "pgd")]
    pub source: String,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value = "sampled")]
    pub variant: String,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainDetectorArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Adversarial set whose originals serve as the natural half.
    #[arg(long)]
    pub advset: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub advset: PathBuf,
    #[arg(long)]
    pub detector: PathBuf,
    /// Row labels for the report.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value = "-")]
    pub variant: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ExportMapsArgs {
    #[arg(long)]
    pub vuln: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub outdir: PathBuf,
}

#[derive(Args, Debug, Clone, serde::Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value = "tiny")]
    pub arch: String,
    #[arg(long, default_value = "pgd")]
    pub source: String,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value = "sampled")]
    pub variant: String,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Measure attack wall-clock; leaves the timing column empty when off
    /// so reports are byte-reproducible.
    #[arg(long)]
    pub timing: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Excluded from provenance so identical runs into different
    /// directories produce identical artifacts.
    #[arg(long)]
    #[serde(skip)]
    pub outdir: PathBuf,
}

fn default_epsilon(data: &str) -> f64 {
    // 0.3 for MNIST-like single-channel data, 0.03 for CIFAR-10
    if data.starts_with("cifar10") { 0.03 } else { 0.3 }
}

fn parse_arch(name: &str, c: usize, h: usize, w: usize, k: usize) -> Result<ArchSpec> {
    match name {
        "cnn" => ArchSpec::cnn(c, h, w, k),
        "tiny" => ArchSpec::tiny(c, h, w, k),
        other => Err(Error::invalid("arch", format!("unknown architecture `{other}`"))),
    }
}

fn validate_beta(beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid("beta", format!("beta {beta} outside (0, 1)")));
    }
    Ok(beta)
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidArg { op, msg } => Error::InvalidArg { op, msg: format!("[{name}] {msg}") },
        Error::Numeric(msg) => Error::Numeric(format!("[{name}] {msg}")),
        other => other,
    })
}

pub fn cmd_train_classifier(a: &TrainClassifierArgs) -> Result<()> {
    let ds = load_limited(&a.data, a.limit, derive_seed(a.seed, "data"))?;
    let (c, h, w) = ds.image_dims();
    let arch = parse_arch(&a.arch, c, h, w, ds.num_classes)?;
    let mut model = CnnClassifier::<F>::init(arch, derive_seed(a.seed, "classifier-init"))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: derive_seed(a.seed, "classifier-train"),
    };
    stage("train-classifier", model.train(&ds, &cfg))?;
    let acc = model.accuracy(&ds, 200)?;
    model.save(&a.out)?;
    println!("trained classifier: {} images, train accuracy {acc:.4}, saved {}", ds.len(), a.out.display());
    Ok(())
}

fn attack_config(epsilon: f64, steps: Option<usize>, step_size: Option<f64>, random_init: bool, seed: u64) -> AttackConfig {
    let mut cfg = AttackConfig::new(epsilon, seed);
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.step_size = step_size;
    cfg.random_init = random_init;
    cfg
}

pub fn cmd_attack(a: &AttackArgs) -> Result<()> {
    let kind = AttackKind::from_str(&a.attack)?;
    let model = CnnClassifier::<F>::load(&a.model)?;
    let ds = load_limited(&a.data, a.limit, derive_seed(a.seed, "data"))?;
    let (_, h, w) = ds.image_dims();
    let eps = a.epsilon.unwrap_or_else(|| default_epsilon(&a.data));
    let cfg = attack_config(eps, a.steps, a.step_size, !a.no_random_init, derive_seed(a.seed, "attack"));
    let budget = match a.budget {
        Some(b) => b,
        None => budget_from_beta(0.3, h, w)?,
    };
    let set = stage("attack", run_attack(kind, &model, &ds, budget, &cfg))?;
    set.save(&a.out)?;
    println!("attack {kind}: {} images, linf {:.4}, saved {}", set.len(), set.linf(), a.out.display());
    Ok(())
}

pub fn cmd_train_vulnmap(a: &TrainVulnmapArgs) -> Result<()> {
    let source = AttackKind::from_str(&a.source)?;
    let model = CnnClassifier::<F>::load(&a.model)?;
    let ds = load_limited(&a.data, a.limit, derive_seed(a.seed, "data"))?;
    let (c, h, w) = ds.image_dims();
    let beta = validate_beta(a.beta.unwrap_or(0.3))?;
    let tau = a.tau.unwrap_or(0.5);
    let eps = a.epsilon.unwrap_or_else(|| default_epsilon(&a.data));
    let m = budget_from_beta(beta, h, w)?;
    let mut net = VulnNet::<F>::init(c, h, w, derive_seed(a.seed, "vulnnet-init"))?;
    let cfg = VulnTrainConfig {
        batch_size: a.batch_size,
        lr: a.lr,
        max_iters: a.max_iters,
        patience: a.patience,
        seed: derive_seed(a.seed, "vulnmap-train"),
    };
    let src_cfg = AttackConfig::new(eps, 0);
    let trace = stage(
        "train-vulnmap",
        pvadv_core::vulnmap::train_vulnmap(&mut net, &model, source, &src_cfg, &ds, m, tau, &cfg),
    )?;
    let mut meta = BTreeMap::new();
    meta.insert("source_attack".to_string(), source.name().to_string());
    meta.insert("beta".to_string(), beta.to_string());
    meta.insert("tau".to_string(), tau.to_string());
    meta.insert("m".to_string(), m.to_string());
    meta.insert("epsilon".to_string(), eps.to_string());
    net.save(&a.out, &meta)?;
    println!(
        "trained vulnerability net: {} iterations, loss {:.4} -> {:.4}, M={m}, saved {}",
        trace.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_gen_adv(a: &GenAdvArgs) -> Result<()> {
    let source = AttackKind::from_str(&a.source)?;
    let variant = MaskVariant::from_str(&a.variant)?;
    let model = CnnClassifier::<F>::load(&a.model)?;
    let (net, meta) = VulnNet::<F>::load(&a.vuln)?;
    let ds = load_limited(&a.data, a.limit, derive_seed(a.seed, "data"))?;
    let (_, h, w) = ds.image_dims();
    let beta = validate_beta(
        a.beta
            .or_else(|| meta.get("beta").and_then(|b| b.parse().ok()))
            .unwrap_or(0.3),
    )?;
    let eps = a.epsilon.unwrap_or_else(|| default_epsilon(&a.data));
    let m = budget_from_beta(beta, h, w)?;
    let set = stage(
        "gen-adv",
        gen_masked_adversarials(&model, &net, &ds, source, eps, m, variant, a.seed),
    )?;
    set.save(&a.out)?;
    println!(
        "masked adversarials ({variant}, beta {beta}, M={m}): {} images, saved {}",
        set.len(),
        a.out.display()
    );
    Ok(())
}

/// Source attack then masked composition; the returned set is labeled
/// `pvadv_<source>` so reports distinguish it from the raw attack.
#[allow(clippy::too_many_arguments)]
pub fn gen_masked_adversarials(
    model: &CnnClassifier<F>,
    net: &VulnNet<F>,
    ds: &Dataset<F>,
    source: AttackKind,
    epsilon: f64,
    m: usize,
    variant: MaskVariant,
    seed: u64,
) -> Result<AdversarialSet<F>> {
    let src_cfg = AttackConfig::new(epsilon, derive_seed(seed, "gen-adv-source"));
    let src = run_attack(source, model, ds, m, &src_cfg)?;
    let masks = masks_for_set(net, &ds.images, m, variant, derive_seed(seed, "gen-adv-mask"))?;
    let adversarials = compose_adversarial(&ds.images, &src.adversarials, &masks)?;
    Ok(AdversarialSet {
        originals: ds.images.clone(),
        adversarials,
        labels: ds.labels.clone(),
        attack: format!("pvadv_{}", source.name()),
        config_json: serde_json::to_string(&serde_json::json!({
            "source": source.name(),
            "epsilon": epsilon,
            "m": m,
            "variant": variant.name(),
            "seed": seed,
        }))
        .expect("config json"),
    })
}

pub fn cmd_train_detector(a: &TrainDetectorArgs) -> Result<()> {
    let model = CnnClassifier::<F>::load(&a.model)?;
    let set = AdversarialSet::<F>::load(&a.advset)?;
    let naturals = Dataset {
        images: set.originals.clone(),
        labels: set.labels.clone(),
        num_classes: model.num_classes,
    };
    let det = stage(
        "train-detector",
        train_detector(&model, &naturals, &set.adversarials, derive_seed(a.seed, "detector")),
    )?;
    det.save(&a.out)?;
    println!("trained detector on {} pairs, saved {}", set.len(), a.out.display());
    Ok(())
}

fn metrics_for_set(
    model: &CnnClassifier<F>,
    det: &DetectorModel,
    set: &AdversarialSet<F>,
    beta: Option<f64>,
    variant: &str,
    seconds_per_100: Option<f64>,
) -> Result<MetricsRow> {
    let naturals = Dataset {
        images: set.originals.clone(),
        labels: set.labels.clone(),
        num_classes: model.num_classes,
    };
    let acc = eval::adv_acc(model, set)?;
    let (auc, prot) = eval::evaluate_protected(det, model, &naturals, &set.adversarials, &set.labels)?;
    let l2 = eval::l2_per_perturbed_pixel(&set.originals, &set.adversarials)?;
    Ok(MetricsRow {
        attack: set.attack.clone(),
        beta,
        variant: variant.to_string(),
        adv_acc: acc,
        det_auc: auc,
        protected_adv_acc: prot,
        l2_per_pixel: l2,
        seconds_per_100,
    })
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = CnnClassifier::<F>::load(&a.model)?;
    let set = AdversarialSet::<F>::load(&a.advset)?;
    let det = DetectorModel::load(&a.detector)?;
    let row = stage("evaluate", metrics_for_set(&model, &det, &set, a.beta, &a.variant, None))?;
    eval::write_report(&a.out, &[row])?;
    let sidecar = a.out.with_extension("json");
    let mut inputs = BTreeMap::new();
    inputs.insert("model".to_string(), a.model.as_path());
    inputs.insert("advset".to_string(), a.advset.as_path());
    inputs.insert("detector".to_string(), a.detector.as_path());
    let mut cfg = BTreeMap::new();
    cfg.insert("variant".to_string(), a.variant.clone());
    if let Some(b) = a.beta {
        cfg.insert("beta".to_string(), b.to_string());
    }
    eval::write_provenance(&sidecar, &inputs, &cfg)?;
    println!("report written to {}", a.out.display());
    Ok(())
}

pub fn cmd_export_maps(a: &ExportMapsArgs) -> Result<()> {
    let (net, _) = VulnNet::<F>::load(&a.vuln)?;
    let ds = load_limited(&a.data, Some(a.limit), derive_seed(a.seed, "data"))?;
    std::fs::create_dir_all(&a.outdir)
        .map_err(|e| Error::io(&a.outdir.display().to_string(), e))?;
    for i in 0..ds.len() {
        let img = ds.images.slice(s![i..i + 1, .., .., ..]).to_owned();
        let map = vuln_map(&net, &img)?;
        vulnmap::write_map_pgm(&a.outdir.join(format!("map_{i:04}.pgm")), &map.probs)?;
        vulnmap::write_map_csv(&a.outdir.join(format!("map_{i:04}.csv")), &map.probs)?;
    }
    println!("exported {} maps to {}", ds.len(), a.outdir.display());
    Ok(())
}

pub fn cmd_run(a: &RunArgs) -> Result<()> {
    let source = AttackKind::from_str(&a.source)?;
    let variant = MaskVariant::from_str(&a.variant)?;
    let beta = validate_beta(a.beta.unwrap_or(0.3))?;
    let tau = a.tau.unwrap_or(0.5);
    let eps = a.epsilon.unwrap_or_else(|| default_epsilon(&a.data));
    std::fs::create_dir_all(&a.outdir)
        .map_err(|e| Error::io(&a.outdir.display().to_string(), e))?;

    let ds = load_limited(&a.data, a.limit, derive_seed(a.seed, "data"))?;
    let (c, h, w) = ds.image_dims();
    let m = budget_from_beta(beta, h, w)?;
    let (train_ds, test_ds) = data::split_half(&ds, derive_seed(a.seed, "train-test"))?;
    let (det_half, eval_half) = data::split_half(&test_ds, derive_seed(a.seed, "test-halves"))?;

    // 1: classifier
    let arch = parse_arch(&a.arch, c, h, w, ds.num_classes)?;
    let mut model = CnnClassifier::<F>::init(arch, derive_seed(a.seed, "classifier-init"))?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: 1e-3,
        seed: derive_seed(a.seed, "classifier-train"),
    };
    stage("train-classifier", model.train(&train_ds, &tc))?;
    let model_path = a.outdir.join("model.ckpt");
    model.save(&model_path)?;

    // 2: source attack on the detector half, detector training
    let src_cfg = AttackConfig::new(eps, derive_seed(a.seed, "attack-det"));
    let det_set = stage("attack", run_attack(source, &model, &det_half, m, &src_cfg))?;
    let det_set_path = a.outdir.join("advset_source.ckpt");
    det_set.save(&det_set_path)?;
    let det = stage(
        "train-detector",
        train_detector(&model, &det_half, &det_set.adversarials, derive_seed(a.seed, "detector")),
    )?;
    let det_path = a.outdir.join("detector.ckpt");
    det.save(&det_path)?;

    // 3: vulnerability network on the training half
    let mut net = VulnNet::<F>::init(c, h, w, derive_seed(a.seed, "vulnnet-init"))?;
    let vcfg = VulnTrainConfig {
        batch_size: a.batch_size,
        lr: 1e-4,
        max_iters: a.max_iters,
        patience: a.patience,
        seed: derive_seed(a.seed, "vulnmap-train"),
    };
    let vsrc_cfg = AttackConfig::new(eps, 0);
    stage(
        "train-vulnmap",
        vulnmap::train_vulnmap(&mut net, &model, source, &vsrc_cfg, &train_ds, m, tau, &vcfg),
    )?;
    let vuln_path = a.outdir.join("vuln.ckpt");
    let mut vmeta = BTreeMap::new();
    vmeta.insert("source_attack".to_string(), source.name().to_string());
    vmeta.insert("beta".to_string(), beta.to_string());
    vmeta.insert("tau".to_string(), tau.to_string());
    vmeta.insert("m".to_string(), m.to_string());
    net.save(&vuln_path, &vmeta)?;

    // 4: evaluation on the held-out half: raw source attack and the
    // masked variant
    let eval_cfg = AttackConfig::new(eps, derive_seed(a.seed, "attack-eval"));
    let timed = |f: &mut dyn FnMut() -> Result<AdversarialSet<F>>| -> Result<(AdversarialSet<F>, Option<f64>)> {
        if a.timing {
            let start = std::time::Instant::now();
            let set = f()?;
            let secs = start.elapsed().as_secs_f64() * 100.0 / set.len().max(1) as f64;
            Ok((set, Some(secs)))
        } else {
            Ok((f()?, None))
        }
    };
    let (raw_set, raw_secs) =
        timed(&mut || stage("attack", run_attack(source, &model, &eval_half, m, &eval_cfg)))?;
    let (masked_set, masked_secs) = timed(&mut || {
        stage(
            "gen-adv",
            gen_masked_adversarials(&model, &net, &eval_half, source, eps, m, variant, derive_seed(a.seed, "gen-adv")),
        )
    })?;
    let masked_path = a.outdir.join("advset_masked.ckpt");
    masked_set.save(&masked_path)?;

    let rows = vec![
        stage("evaluate", metrics_for_set(&model, &det, &raw_set, None, "-", raw_secs))?,
        stage("evaluate", metrics_for_set(&model, &det, &masked_set, Some(beta), variant.name(), masked_secs))?,
    ];
    let report_path = a.outdir.join("report.csv");
    eval::write_report(&report_path, &rows)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("model".to_string(), model_path.as_path());
    inputs.insert("vuln".to_string(), vuln_path.as_path());
    inputs.insert("detector".to_string(), det_path.as_path());
    inputs.insert("advset_masked".to_string(), masked_path.as_path());
    let mut cfg = BTreeMap::new();
    cfg.insert("args".to_string(), serde_json::to_string(a).expect("args json"));
    cfg.insert("m".to_string(), m.to_string());
    eval::write_provenance(&a.outdir.join("report.json"), &inputs, &cfg)?;
    println!("pipeline complete; report at {}", report_path.display());
    Ok(())
}

/// Overlay config-file values onto argv before clap parsing: for any flat
/// key in the JSON object whose `--key` flag is absent from argv, append
/// `--key value`. Explicit flags therefore always win.
pub fn merge_config_into_args(mut argv: Vec<String>) -> Result<Vec<String>> {
    let pos = argv.iter().position(|a| a == "--config");
    let Some(pos) = pos else { return Ok(argv) };
    let path = argv
        .get(pos + 1)
        .cloned()
        .ok_or_else(|| Error::invalid("config", "--config requires a path"))?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let parsed: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("config parse: {e}")))?;
    let obj = parsed
        .as_object()
        .ok_or_else(|| Error::format(&path, "config must be a JSON object"))?;
    for (key, value) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        if argv.iter().any(|a| a == &flag) {
            continue;
        }
        match value {
            serde_json::Value::Bool(true) => argv.push(flag),
            serde_json::Value::Bool(false) => {}
            serde_json::Value::String(s) => {
                argv.push(flag);
                argv.push(s.clone());
            }
            other => {
                argv.push(flag);
                argv.push(other.to_string());
            }
        }
    }
    Ok(argv)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainClassifier(a) => cmd_train_classifier(a),
        Command::Attack(a) => cmd_attack(a),
        Command::TrainVulnmap(a) => cmd_train_vulnmap(a),
        Command::GenAdv(a) => cmd_gen_adv(a),
        Command::TrainDetector(a) => cmd_train_detector(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ExportMaps(a) => cmd_export_maps(a),
        Command::Run(a) => cmd_run(a),
    }
}
