//! Perturbation-based source attacks: FGSM, PGD with random init, and a
//! greedy single-pixel JSMA. Every attack returns images inside the
//! L-infinity epsilon ball and the valid pixel range.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use ndarray::{Array4, s};
use rand::Rng;

use crate::checkpoint;
use crate::classifier::{CnnClassifier, argmax_rows};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::index_rng;
use crate::scalar::Scalar;

const GRAD_BATCH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Jsma,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Jsma => "jsma",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "jsma" => Ok(AttackKind::Jsma),
            other => Err(Error::invalid("attack", format!("unknown attack `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// PGD per-step magnitude; defaults to epsilon/10 when unset.
    pub step_size: Option<f64>,
    pub random_init: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f64, seed: u64) -> AttackConfig {
        AttackConfig { epsilon, steps: 20, step_size: None, random_init: true, seed }
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("AttackConfig", format!("epsilon {} must be > 0", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("AttackConfig", "steps must be >= 1"));
        }
        if !(self.step_size() > 0.0) {
            return Err(Error::invalid("AttackConfig", format!("step_size {} must be > 0", self.step_size())));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct AdversarialSet<T: Scalar> {
    pub originals: Array4<T>,
    pub adversarials: Array4<T>,
    pub labels: Vec<usize>,
    pub attack: String,
    pub config_json: String,
}

impl<T: Scalar> AdversarialSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// max per-image L-infinity distance from the originals.
    pub fn linf(&self) -> f64 {
        self.originals
            .iter()
            .zip(self.adversarials.iter())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = IndexMap::new();
        tensors.insert("originals".to_string(), self.originals.clone().into_dyn());
        tensors.insert("adversarials".to_string(), self.adversarials.clone().into_dyn());
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "advset".to_string());
        meta.insert("attack".to_string(), self.attack.clone());
        meta.insert("config".to_string(), self.config_json.clone());
        meta.insert("labels".to_string(), serde_json::to_string(&self.labels).expect("labels json"));
        checkpoint::save(path, &tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<AdversarialSet<T>> {
        let p = path.display().to_string();
        let (mut tensors, meta) = checkpoint::load::<T>(path)?;
        if meta.get("kind").map(String::as_str) != Some("advset") {
            return Err(Error::format(&p, "checkpoint is not an adversarial set"));
        }
        let take4 = |tensors: &mut IndexMap<String, ndarray::ArrayD<T>>, name: &str| -> Result<Array4<T>> {
            tensors
                .shift_remove(name)
                .ok_or_else(|| Error::format(&p, format!("missing tensor `{name}`")))?
                .into_dimensionality::<ndarray::Ix4>()
                .map_err(|e| Error::format(&p, format!("tensor `{name}`: {e}")))
        };
        let originals = take4(&mut tensors, "originals")?;
        let adversarials = take4(&mut tensors, "adversarials")?;
        let labels: Vec<usize> = serde_json::from_str(
            meta.get("labels").ok_or_else(|| Error::format(&p, "missing labels"))?,
        )
        .map_err(|e| Error::format(&p, format!("labels parse: {e}")))?;
        if labels.len() != originals.dim().0 || originals.dim() != adversarials.dim() {
            return Err(Error::format(&p, "inconsistent adversarial set shapes"));
        }
        Ok(AdversarialSet {
            originals,
            adversarials,
            labels,
            attack: meta.get("attack").cloned().unwrap_or_default(),
            config_json: meta.get("config").cloned().unwrap_or_default(),
        })
    }
}

fn clamp01<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| {
        if v < T::zero() {
            T::zero()
        } else if v > T::one() {
            T::one()
        } else {
            v
        }
    });
}

fn clamp_ball<T: Scalar>(x: &mut Array4<T>, center: &Array4<T>, eps: T) {
    ndarray::Zip::from(x).and(center).for_each(|v, &c| {
        let lo = c - eps;
        let hi = c + eps;
        if *v < lo {
            *v = lo;
        } else if *v > hi {
            *v = hi;
        }
    });
}

fn make_set<T: Scalar>(
    attack: AttackKind,
    originals: Array4<T>,
    adversarials: Array4<T>,
    labels: Vec<usize>,
    cfg: &AttackConfig,
) -> AdversarialSet<T> {
    AdversarialSet {
        originals,
        adversarials,
        labels,
        attack: attack.name().to_string(),
        config_json: serde_json::to_string(cfg).expect("config json"),
    }
}

/// Single signed-gradient step of size epsilon.
pub fn fgsm<T: Scalar>(
    model: &CnnClassifier<T>,
    ds: &Dataset<T>,
    cfg: &AttackConfig,
) -> Result<AdversarialSet<T>> {
    cfg.validate()?;
    let eps = T::of_f64(cfg.epsilon);
    let mut adv = ds.images.clone();
    let n = ds.len();
    let mut i = 0;
    while i < n {
        let j = (i + GRAD_BATCH).min(n);
        let batch = ds.images.slice(s![i..j, .., .., ..]).to_owned();
        let (_, grad) = model.loss_and_input_grad(&batch, &ds.labels[i..j])?;
        let step = grad.mapv(|g| {
            if g > T::zero() {
                eps
            } else if g < T::zero() {
                -eps
            } else {
                T::zero()
            }
        });
        let mut out = batch + step;
        clamp01(&mut out);
        adv.slice_mut(s![i..j, .., .., ..]).assign(&out);
        i = j;
    }
    Ok(make_set(AttackKind::Fgsm, ds.images.clone(), adv, ds.labels.clone(), cfg))
}

/// Iterated signed-gradient steps projected onto the epsilon ball, with
/// optional uniform random start. The init noise for image i comes from a
/// stream keyed by (seed, i), so results do not depend on batching.
pub fn pgd<T: Scalar>(
    model: &CnnClassifier<T>,
    ds: &Dataset<T>,
    cfg: &AttackConfig,
) -> Result<AdversarialSet<T>> {
    cfg.validate()?;
    let eps = T::of_f64(cfg.epsilon);
    let alpha = T::of_f64(cfg.step_size());
    let n = ds.len();
    let mut adv = ds.images.clone();
    let mut i = 0;
    while i < n {
        let j = (i + GRAD_BATCH).min(n);
        let orig = ds.images.slice(s![i..j, .., .., ..]).to_owned();
        let mut x = orig.clone();
        if cfg.random_init {
            for (bi, mut img) in x.outer_iter_mut().enumerate() {
                let mut rng = index_rng(cfg.seed, (i + bi) as u64, 0);
                img.mapv_inplace(|v| v + T::of_f64(rng.gen_range(-cfg.epsilon..cfg.epsilon)));
            }
            clamp_ball(&mut x, &orig, eps);
            clamp01(&mut x);
        }
        for _ in 0..cfg.steps {
            let (_, grad) = model.loss_and_input_grad(&x, &ds.labels[i..j])?;
            ndarray::Zip::from(&mut x).and(&grad).for_each(|v, &g| {
                if g > T::zero() {
                    *v = *v + alpha;
                } else if g < T::zero() {
                    *v = *v - alpha;
                }
            });
            clamp_ball(&mut x, &orig, eps);
            clamp01(&mut x);
        }
        clamp_ball(&mut x, &orig, eps);
        adv.slice_mut(s![i..j, .., .., ..]).assign(&x);
        i = j;
    }
    Ok(make_set(AttackKind::Pgd, ds.images.clone(), adv, ds.labels.clone(), cfg))
}

/// Greedy positive-saliency JSMA toward a random target class. Each step
/// moves the highest-saliency untouched coordinate to the ball boundary
/// (shared across channels); stops on success or after budget_m pixels.
pub fn jsma<T: Scalar>(
    model: &CnnClassifier<T>,
    ds: &Dataset<T>,
    budget_m: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialSet<T>> {
    cfg.validate()?;
    let (c, h, w) = ds.image_dims();
    if budget_m > h * w {
        return Err(Error::invalid("jsma", format!("budget {budget_m} exceeds {h}x{w} pixels")));
    }
    let eps = T::of_f64(cfg.epsilon);
    let k = model.num_classes;
    let mut adv = ds.images.clone();
    for i in 0..ds.len() {
        if budget_m == 0 {
            break;
        }
        let label = ds.labels[i];
        let mut rng = index_rng(cfg.seed, i as u64, 1);
        let target = {
            let mut t = rng.gen_range(0..k);
            while t == label {
                t = rng.gen_range(0..k);
            }
            t
        };
        let orig = ds.images.slice(s![i..i + 1, .., .., ..]).to_owned();
        let mut x = orig.clone();
        let mut touched = vec![false; h * w];
        for _ in 0..budget_m {
            let preds = argmax_rows(&model.predict_logits(&x)?);
            if preds[0] == target {
                break;
            }
            let gt = model.logit_input_grad(&x, target)?;
            let gsum = model.logit_sum_input_grad(&x)?;
            // saliency per coordinate: target grad minus other-class grads,
            // positive part, summed over channels
            let mut best: Option<(usize, f64)> = None;
            for y in 0..h {
                for xx in 0..w {
                    let coord = y * w + xx;
                    if touched[coord] {
                        continue;
                    }
                    let mut sal = 0.0;
                    for ch in 0..c {
                        let a = gt[[0, ch, y, xx]].as_f64();
                        let other = gsum[[0, ch, y, xx]].as_f64() - a;
                        sal += (a - other).max(0.0);
                    }
                    if sal > 0.0 && best.map_or(true, |(_, bs)| sal > bs) {
                        best = Some((coord, sal));
                    }
                }
            }
            let Some((coord, _)) = best else { break };
            touched[coord] = true;
            let (y, xx) = (coord / w, coord % w);
            for ch in 0..c {
                let o = orig[[0, ch, y, xx]];
                let dir = gt[[0, ch, y, xx]];
                let v = if dir >= T::zero() { o + eps } else { o - eps };
                x[[0, ch, y, xx]] = v.max(T::zero()).min(T::one());
            }
        }
        adv.slice_mut(s![i..i + 1, .., .., ..]).assign(&x);
    }
    Ok(make_set(AttackKind::Jsma, ds.images.clone(), adv, ds.labels.clone(), cfg))
}

/// Dispatch on the attack kind; `budget_m` only matters for JSMA.
pub fn run_attack<T: Scalar>(
    kind: AttackKind,
    model: &CnnClassifier<T>,
    ds: &Dataset<T>,
    budget_m: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialSet<T>> {
    match kind {
        AttackKind::Fgsm => fgsm(model, ds, cfg),
        AttackKind::Pgd => pgd(model, ds, cfg),
        AttackKind::Jsma => jsma(model, ds, budget_m, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ArchSpec, TrainConfig};
    use crate::data::synthetic_dataset;

    fn trained_model(ds: &Dataset<f32>) -> CnnClassifier<f32> {
        let arch = ArchSpec::tiny(1, 8, 8, 3).unwrap();
        let mut m = CnnClassifier::init(arch, 11).unwrap();
        m.train(ds, &TrainConfig { epochs: 6, batch_size: 30, lr: 3e-3, seed: 1 }).unwrap();
        m
    }

    fn check_invariants(set: &AdversarialSet<f32>, eps: f64) {
        assert!(set.linf() <= eps + 1e-6, "linf {} > eps {eps}", set.linf());
        assert!(set.adversarials.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fgsm_structure_and_strength() {
        let ds = synthetic_dataset::<f32>(20, 90, 8, 8, 3).unwrap();
        let model = trained_model(&ds);
        let clean = model.accuracy(&ds, 90).unwrap();
        let cfg = AttackConfig::new(0.3, 42);
        let set = fgsm(&model, &ds, &cfg).unwrap();
        check_invariants(&set, 0.3);
        // pre-clip steps are exactly 0 or eps in magnitude; post-clip the
        // only other possibility is a boundary-trimmed value
        let adv_ds = Dataset { images: set.adversarials.clone(), labels: ds.labels.clone(), num_classes: 3 };
        let adv_acc = model.accuracy(&adv_ds, 90).unwrap();
        assert!(adv_acc < clean, "fgsm did not hurt accuracy: {adv_acc} vs {clean}");
        // original inputs untouched
        assert_eq!(ds.images, set.originals);
    }

    #[test]
    fn pgd_one_step_no_init_equals_fgsm() {
        let ds = synthetic_dataset::<f32>(21, 30, 8, 8, 3).unwrap();
        let model = trained_model(&ds);
        let cfg = AttackConfig {
            epsilon: 0.25,
            steps: 1,
            step_size: Some(0.25),
            random_init: false,
            seed: 3,
        };
        let a = pgd(&model, &ds, &cfg).unwrap();
        let b = fgsm(&model, &ds, &cfg).unwrap();
        assert_eq!(a.adversarials, b.adversarials);
    }

    #[test]
    fn pgd_invariants_and_determinism() {
        let ds = synthetic_dataset::<f32>(22, 40, 8, 8, 3).unwrap();
        let model = trained_model(&ds);
        let cfg = AttackConfig::new(0.2, 7);
        let a = pgd(&model, &ds, &cfg).unwrap();
        check_invariants(&a, 0.2);
        let b = pgd(&model, &ds, &cfg).unwrap();
        assert_eq!(a.adversarials, b.adversarials);
        // different seed moves the random init
        let c = pgd(&model, &ds, &AttackConfig::new(0.2, 8)).unwrap();
        assert_ne!(a.adversarials, c.adversarials);
    }

    #[test]
    fn pgd_random_init_within_ball_for_many_configs() {
        let ds = synthetic_dataset::<f32>(23, 12, 8, 8, 3).unwrap();
        let model = trained_model(&ds);
        for seed in 0..25 {
            let eps = 0.05 + 0.01 * seed as f64;
            let mut cfg = AttackConfig::new(eps, seed);
            cfg.steps = 3;
            let set = pgd(&model, &ds, &cfg).unwrap();
            check_invariants(&set, eps);
        }
    }

    #[test]
    fn jsma_budget_and_determinism() {
        let ds = synthetic_dataset::<f32>(24, 15, 8, 8, 3).unwrap();
        let model = trained_model(&ds);
        let cfg = AttackConfig::new(0.4, 5);
        let budget = 10;
        let set = jsma(&model, &ds, budget, &cfg).unwrap();
        check_invariants(&set, 0.4);
        for i in 0..ds.len() {
            let mut changed = std::collections::HashSet::new();
            for y in 0..8 {
                for x in 0..8 {
                    if set.originals[[i, 0, y, x]] != set.adversarials[[i, 0, y, x]] {
                        changed.insert((y, x));
                    }
                }
            }
            assert!(changed.len() <= budget, "image {i} changed {} pixels", changed.len());
        }
        let again = jsma(&model, &ds, budget, &cfg).unwrap();
        assert_eq!(set.adversarials, again.adversarials);

        // zero budget returns the originals
        let zero = jsma(&model, &ds, 0, &cfg).unwrap();
        assert_eq!(zero.adversarials, ds.images);
    }

    #[test]
    fn advset_round_trip() {
        let ds = synthetic_dataset::<f32>(25, 9, 8, 8, 3).unwrap();
        let model = trained_model(&ds);
        let cfg = AttackConfig::new(0.3, 2);
        let set = fgsm(&model, &ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adv.ckpt");
        set.save(&path).unwrap();
        let loaded = AdversarialSet::<f32>::load(&path).unwrap();
        assert_eq!(set.adversarials, loaded.adversarials);
        assert_eq!(set.originals, loaded.originals);
        assert_eq!(set.labels, loaded.labels);
        assert_eq!(set.attack, "fgsm");
        assert_eq!(set.config_json, loaded.config_json);
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = AttackConfig { epsilon: 0.0, steps: 20, step_size: None, random_init: true, seed: 0 };
        assert!(cfg.validate().is_err());
        let cfg = AttackConfig { epsilon: 0.1, steps: 0, step_size: None, random_init: true, seed: 0 };
        assert!(cfg.validate().is_err());
        let cfg = AttackConfig { epsilon: 0.1, steps: 5, step_size: Some(0.0), random_init: true, seed: 0 };
        assert!(cfg.validate().is_err());
    }
}
