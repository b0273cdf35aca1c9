//! Adversarial-example detector: confidence, kernel-density, and
//! non-maximal-entropy features over classifier outputs, a logistic
//! regression on the standardized features, and the threshold-0.5
//! protector wrapper.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn, s};
use rand::Rng;

use crate::checkpoint;
use crate::classifier::CnnClassifier;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::scalar::Scalar;
use crate::tensor::softmax_value;

pub const BANK_CAP: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector {
    pub confidence: f64,
    pub k_density: f64,
    pub non_me: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; 3] {
        [self.confidence, self.k_density, self.non_me]
    }
}

/// Per-class logit vectors from clean data, with a median-heuristic KDE
/// bandwidth per class.
#[derive(Clone)]
pub struct ReferenceBank {
    /// bank[c] is (n_c, K) logits.
    pub banks: Vec<Array2<f64>>,
    pub sigmas: Vec<f64>,
}

impl ReferenceBank {
    /// Group clean-image logits by true label, subsample each class to at
    /// most `BANK_CAP`, and set sigma_c to the median pairwise distance.
    pub fn build<T: Scalar>(model: &CnnClassifier<T>, ds: &Dataset<T>, seed: u64) -> Result<ReferenceBank> {
        let k = model.num_classes;
        let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
        let mut i = 0;
        while i < ds.len() {
            let j = (i + 200).min(ds.len());
            let imgs = ds.images.slice(s![i..j, .., .., ..]).to_owned();
            let logits = model.predict_logits(&imgs)?;
            for (r, &label) in ds.labels[i..j].iter().enumerate() {
                per_class[label].push(logits.row(r).iter().map(|v| v.as_f64()).collect());
            }
            i = j;
        }
        let mut banks = Vec::with_capacity(k);
        let mut sigmas = Vec::with_capacity(k);
        for (c, mut rows) in per_class.into_iter().enumerate() {
            if rows.len() > BANK_CAP {
                let mut rng = stage_rng(seed, &format!("bank-{c}"));
                for i in (1..rows.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    rows.swap(i, j);
                }
                rows.truncate(BANK_CAP);
            }
            let n = rows.len();
            let mut flat = Vec::with_capacity(n * k);
            for r in &rows {
                flat.extend_from_slice(r);
            }
            let bank = Array2::from_shape_vec((n, k), flat).expect("bank shape");
            sigmas.push(median_pairwise_distance(&bank).unwrap_or(1.0));
            banks.push(bank);
        }
        Ok(ReferenceBank { banks, sigmas })
    }
}

fn median_pairwise_distance(bank: &Array2<f64>) -> Option<f64> {
    let n = bank.dim().0;
    if n < 2 {
        return None;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = bank
                .row(i)
                .iter()
                .zip(bank.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dists.push(d);
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists[dists.len() / 2];
    (m > 0.0).then_some(m)
}

/// Features from one softmax row and one logit row. Softmax entries are
/// clamped at 1e-12 before the max is dropped, so a hard one-hot yields
/// equal residuals and non_me = ln(K-1).
pub fn features_from_outputs(probs: &[f64], logits: &[f64], bank: &ReferenceBank) -> Result<FeatureVector> {
    let k = probs.len();
    if k < 2 {
        return Err(Error::invalid("features_from_outputs", "need at least 2 classes"));
    }
    let clamped: Vec<f64> = probs.iter().map(|&p| p.max(1e-12)).collect();
    let mut arg = 0;
    for (i, &p) in clamped.iter().enumerate() {
        if p > clamped[arg] {
            arg = i;
        }
    }
    let confidence = probs[arg];

    let rest_sum: f64 = clamped.iter().enumerate().filter(|(i, _)| *i != arg).map(|(_, &p)| p).sum();
    let non_me: f64 = clamped
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, &p)| {
            let q = p / rest_sum;
            -q * q.ln()
        })
        .sum();

    let class_bank = &bank.banks[arg];
    let n = class_bank.dim().0;
    if n == 0 {
        return Err(Error::invalid(
            "features_from_outputs",
            format!("reference bank for class {arg} is empty"),
        ));
    }
    let sigma = bank.sigmas[arg];
    let mut acc = 0.0;
    for row in class_bank.rows() {
        let d2: f64 = row.iter().zip(logits.iter()).map(|(a, &b)| (a - b) * (a - b)).sum();
        acc += (-d2 / (2.0 * sigma * sigma)).exp();
    }
    let k_density = acc / n as f64;
    Ok(FeatureVector { confidence, k_density, non_me })
}

/// Features for a batch of images.
pub fn compute_features<T: Scalar>(
    model: &CnnClassifier<T>,
    bank: &ReferenceBank,
    images: &Array4<T>,
) -> Result<Vec<FeatureVector>> {
    let mut out = Vec::with_capacity(images.dim().0);
    let n = images.dim().0;
    let mut i = 0;
    while i < n {
        let j = (i + 200).min(n);
        let chunk = images.slice(s![i..j, .., .., ..]).to_owned();
        let logits = model.predict_logits(&chunk)?;
        let probs = softmax_value(&logits.clone().into_dyn());
        for r in 0..(j - i) {
            let lrow: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
            let prow: Vec<f64> = probs
                .index_axis(ndarray::Axis(0), r)
                .iter()
                .map(|v| v.as_f64())
                .collect();
            out.push(features_from_outputs(&prow, &lrow, bank)?);
        }
        i = j;
    }
    Ok(out)
}

#[derive(Clone)]
pub struct DetectorModel {
    pub weights: [f64; 3],
    pub bias: f64,
    pub feat_mean: [f64; 3],
    pub feat_std: [f64; 3],
    pub bank: ReferenceBank,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on the binary cross-entropy; stops when the
/// loss change drops below 1e-7 or after 5000 steps.
pub fn fit_logistic(features: &[[f64; 3]], labels: &[u8]) -> Result<([f64; 3], f64)> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(Error::invalid("fit_logistic", "empty or mismatched training data"));
    }
    if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
        return Err(Error::invalid("fit_logistic", "training data contains a single class"));
    }
    let mut w = [0.0f64; 3];
    let mut b = 0.0f64;
    let lr = 0.5;
    let mut prev = f64::INFINITY;
    for _ in 0..5000 {
        let mut gw = [0.0f64; 3];
        let mut gb = 0.0;
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let z = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b;
            let p = sigmoid(z);
            let y = y as f64;
            loss -= y * p.max(1e-15).ln() + (1.0 - y) * (1.0 - p).max(1e-15).ln();
            let d = p - y;
            for j in 0..3 {
                gw[j] += d * x[j];
            }
            gb += d;
        }
        loss /= n as f64;
        for j in 0..3 {
            w[j] -= lr * gw[j] / n as f64;
        }
        b -= lr * gb / n as f64;
        if (prev - loss).abs() < 1e-7 {
            break;
        }
        prev = loss;
    }
    Ok((w, b))
}

/// Train on natural images (label 0) and their adversarial counterparts
/// (label 1). The reference bank comes from the natural half.
pub fn train_detector<T: Scalar>(
    model: &CnnClassifier<T>,
    naturals: &Dataset<T>,
    adversarials: &Array4<T>,
    seed: u64,
) -> Result<DetectorModel> {
    if naturals.is_empty() || adversarials.dim().0 == 0 {
        return Err(Error::invalid("train_detector", "empty natural or adversarial set"));
    }
    let bank = ReferenceBank::build(model, naturals, seed)?;
    let mut feats = compute_features(model, &bank, &naturals.images)?;
    let n_nat = feats.len();
    feats.extend(compute_features(model, &bank, adversarials)?);
    let labels: Vec<u8> = (0..feats.len()).map(|i| (i >= n_nat) as u8).collect();

    let raw: Vec<[f64; 3]> = feats.iter().map(|f| f.as_array()).collect();
    let mut mean = [0.0f64; 3];
    let mut std = [0.0f64; 3];
    for x in &raw {
        for j in 0..3 {
            mean[j] += x[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= raw.len() as f64;
    }
    for x in &raw {
        for j in 0..3 {
            std[j] += (x[j] - mean[j]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / raw.len() as f64).sqrt().max(1e-9);
    }
    let scaled: Vec<[f64; 3]> = raw
        .iter()
        .map(|x| [(x[0] - mean[0]) / std[0], (x[1] - mean[1]) / std[1], (x[2] - mean[2]) / std[2]])
        .collect();
    let (weights, bias) = fit_logistic(&scaled, &labels)?;
    Ok(DetectorModel { weights, bias, feat_mean: mean, feat_std: std, bank })
}

impl DetectorModel {
    pub fn score_features(&self, f: &FeatureVector) -> f64 {
        let x = f.as_array();
        let mut z = self.bias;
        for j in 0..3 {
            z += self.weights[j] * (x[j] - self.feat_mean[j]) / self.feat_std[j];
        }
        sigmoid(z)
    }

    /// Probability-adversarial per image.
    pub fn detect<T: Scalar>(&self, model: &CnnClassifier<T>, images: &Array4<T>) -> Result<Vec<f64>> {
        Ok(compute_features(model, &self.bank, images)?
            .iter()
            .map(|f| self.score_features(f))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        tensors.insert(
            "linear".to_string(),
            ArrayD::from_shape_vec(
                IxDyn(&[4]),
                vec![self.weights[0], self.weights[1], self.weights[2], self.bias],
            )
            .unwrap(),
        );
        tensors.insert("feat_mean".to_string(), Array1::from(self.feat_mean.to_vec()).into_dyn());
        tensors.insert("feat_std".to_string(), Array1::from(self.feat_std.to_vec()).into_dyn());
        tensors.insert("sigmas".to_string(), Array1::from(self.bank.sigmas.clone()).into_dyn());
        for (c, b) in self.bank.banks.iter().enumerate() {
            tensors.insert(format!("bank.{c}"), b.clone().into_dyn());
        }
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "detector".to_string());
        meta.insert("num_classes".to_string(), self.bank.banks.len().to_string());
        checkpoint::save(path, &tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<DetectorModel> {
        let p = path.display().to_string();
        let (tensors, meta) = checkpoint::load::<f64>(path)?;
        if meta.get("kind").map(String::as_str) != Some("detector") {
            return Err(Error::format(&p, "checkpoint is not a detector"));
        }
        let k: usize = meta
            .get("num_classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&p, "missing num_classes"))?;
        let vec_of = |name: &str| -> Result<Vec<f64>> {
            Ok(tensors
                .get(name)
                .ok_or_else(|| Error::format(&p, format!("missing tensor `{name}`")))?
                .iter()
                .cloned()
                .collect())
        };
        let lin = vec_of("linear")?;
        if lin.len() != 4 {
            return Err(Error::format(&p, "linear tensor must have 4 entries"));
        }
        let to3 = |v: Vec<f64>, name: &str| -> Result<[f64; 3]> {
            v.try_into().map_err(|_| Error::format(&p, format!("{name} must have 3 entries")))
        };
        let mut banks = Vec::with_capacity(k);
        for c in 0..k {
            banks.push(
                tensors
                    .get(&format!("bank.{c}"))
                    .ok_or_else(|| Error::format(&p, format!("missing tensor `bank.{c}`")))?
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| Error::format(&p, format!("bank.{c}: {e}")))?,
            );
        }
        Ok(DetectorModel {
            weights: [lin[0], lin[1], lin[2]],
            bias: lin[3],
            feat_mean: to3(vec_of("feat_mean")?, "feat_mean")?,
            feat_std: to3(vec_of("feat_std")?, "feat_std")?,
            bank: ReferenceBank { banks, sigmas: vec_of("sigmas")? },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    /// Adversarial and rejected by the detector.
    A,
    /// Accepted and correctly classified.
    B,
    Fail,
}

/// Threshold-0.5 protector: reject when detect >= 0.5; A if a rejected
/// image was adversarial, B if an accepted image is classified correctly.
pub fn protected_classify<T: Scalar>(
    detector: &DetectorModel,
    model: &CnnClassifier<T>,
    images: &Array4<T>,
    true_labels: &[usize],
    is_adversarial: &[bool],
) -> Result<Vec<Outcome>> {
    let scores = detector.detect(model, images)?;
    let preds = model.predict_labels(images)?;
    Ok(scores
        .iter()
        .zip(preds.iter())
        .zip(true_labels.iter().zip(is_adversarial))
        .map(|((&s, &p), (&y, &adv))| {
            if s >= 0.5 {
                if adv { Outcome::A } else { Outcome::Fail }
            } else if p == y {
                Outcome::B
            } else {
                Outcome::Fail
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{AttackConfig, pgd};
    use crate::rng::stage_rng;
    use crate::classifier::{ArchSpec, CnnClassifier, TrainConfig};
    use crate::data::synthetic_dataset;

    fn unit_bank(k: usize) -> ReferenceBank {
        ReferenceBank {
            banks: (0..k).map(|_| Array2::zeros((1, k))).collect(),
            sigmas: vec![1.0; k],
        }
    }

    #[test]
    fn feature_reference_values() {
        let bank = unit_bank(10);
        let uniform = vec![0.1; 10];
        let zeros = vec![0.0; 10];
        let f = features_from_outputs(&uniform, &zeros, &bank).unwrap();
        assert!((f.confidence - 0.1).abs() < 1e-12);
        assert!((f.non_me - 9f64.ln()).abs() < 1e-9, "non_me {}", f.non_me);
        // logits equal the single bank member: kernel at distance 0
        assert!((f.k_density - 1.0).abs() < 1e-12);

        // hard one-hot: residuals clamp-smooth to equal values
        let mut onehot = vec![0.0; 10];
        onehot[3] = 1.0;
        let f = features_from_outputs(&onehot, &zeros, &bank).unwrap();
        assert!((f.confidence - 1.0).abs() < 1e-12);
        assert!((f.non_me - 9f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn feature_ranges() {
        let bank = unit_bank(5);
        let mut rng = stage_rng(1, "feat");
        for _ in 0..200 {
            let mut p: Vec<f64> = (0..5).map(|_| rng.gen_range(0.001..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let l: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let f = features_from_outputs(&p, &l, &bank).unwrap();
            assert!(f.confidence >= 0.2 - 1e-9 && f.confidence <= 1.0);
            assert!(f.non_me >= -1e-12 && f.non_me <= 4f64.ln() + 1e-9);
            assert!(f.k_density >= 0.0);
        }
    }

    #[test]
    fn logistic_fits_separable_data() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let x = if i < 20 { -1.0 - (i as f64) * 0.05 } else { 1.0 + (i as f64) * 0.05 };
            feats.push([x, 0.0, 0.0]);
            labels.push((i >= 20) as u8);
        }
        let (w, b) = fit_logistic(&feats, &labels).unwrap();
        let correct = feats
            .iter()
            .zip(&labels)
            .filter(|(x, &y)| ((sigmoid(w[0] * x[0] + b) >= 0.5) as u8) == y)
            .count();
        assert_eq!(correct, 40);

        // single-class input is rejected
        assert!(fit_logistic(&feats, &vec![0u8; 40]).is_err());
    }

    #[test]
    fn zero_weight_detector_outputs_half() {
        let det = DetectorModel {
            weights: [0.0; 3],
            bias: 0.0,
            feat_mean: [0.0; 3],
            feat_std: [1.0; 3],
            bank: unit_bank(3),
        };
        let f = FeatureVector { confidence: 0.7, k_density: 0.2, non_me: 0.5 };
        assert_eq!(det.score_features(&f), 0.5);
    }

    #[test]
    fn weight_sign_flip_reverses_marginal_effect() {
        let mut det = DetectorModel {
            weights: [1.0, 0.0, 0.0],
            bias: 0.0,
            feat_mean: [0.0; 3],
            feat_std: [1.0; 3],
            bank: unit_bank(3),
        };
        let lo = FeatureVector { confidence: 0.2, k_density: 0.0, non_me: 0.0 };
        let hi = FeatureVector { confidence: 0.9, k_density: 0.0, non_me: 0.0 };
        assert!(det.score_features(&hi) > det.score_features(&lo));
        det.weights[0] = -1.0;
        assert!(det.score_features(&hi) < det.score_features(&lo));
    }

    fn trained_setup() -> (CnnClassifier<f32>, Dataset<f32>, DetectorModel, Array4<f32>) {
        let ds = synthetic_dataset::<f32>(40, 90, 8, 8, 3).unwrap();
        let arch = ArchSpec::tiny(1, 8, 8, 3).unwrap();
        let mut model = CnnClassifier::init(arch, 16).unwrap();
        model.train(&ds, &TrainConfig { epochs: 8, batch_size: 30, lr: 3e-3, seed: 6 }).unwrap();
        let adv = pgd(&model, &ds, &AttackConfig::new(0.3, 7)).unwrap();
        let det = train_detector(&model, &ds, &adv.adversarials, 8).unwrap();
        (model, ds, det, adv.adversarials)
    }

    #[test]
    fn detector_separates_adversarials_on_training_data() {
        let (model, ds, det, adv) = trained_setup();
        let nat_scores = det.detect(&model, &ds.images).unwrap();
        let adv_scores = det.detect(&model, &adv).unwrap();
        assert!(nat_scores.iter().chain(&adv_scores).all(|s| (0.0..=1.0).contains(s)));
        let nat_mean: f64 = nat_scores.iter().sum::<f64>() / nat_scores.len() as f64;
        let adv_mean: f64 = adv_scores.iter().sum::<f64>() / adv_scores.len() as f64;
        assert!(adv_mean > nat_mean, "adv {adv_mean} vs nat {nat_mean}");
    }

    #[test]
    fn detector_training_is_deterministic() {
        let (_, ds, det, adv) = {
            let t = trained_setup();
            (t.0.clone(), t.1, t.2, t.3)
        };
        let ds2 = ds.clone();
        let arch = ArchSpec::tiny(1, 8, 8, 3).unwrap();
        let mut model2 = CnnClassifier::<f32>::init(arch, 16).unwrap();
        model2.train(&ds2, &TrainConfig { epochs: 8, batch_size: 30, lr: 3e-3, seed: 6 }).unwrap();
        let det2 = train_detector(&model2, &ds2, &adv, 8).unwrap();
        assert_eq!(det.weights, det2.weights);
        assert_eq!(det.bias, det2.bias);
    }

    #[test]
    fn protector_outcomes() {
        let (model, ds, det, adv) = trained_setup();
        let nat = ds.images.slice(s![0..10, .., .., ..]).to_owned();
        let advs = adv.slice(s![0..10, .., .., ..]).to_owned();
        let labels = &ds.labels[0..10];
        let flags_nat = vec![false; 10];
        let flags_adv = vec![true; 10];
        let out_nat = protected_classify(&det, &model, &nat, labels, &flags_nat).unwrap();
        let out_adv = protected_classify(&det, &model, &advs, labels, &flags_adv).unwrap();
        // naturals can never be scored A; adversarials rejected are A
        assert!(out_nat.iter().all(|o| *o != Outcome::A));
        let scores = det.detect(&model, &advs).unwrap();
        for (o, s) in out_adv.iter().zip(&scores) {
            if *s >= 0.5 {
                assert_eq!(*o, Outcome::A);
            }
        }
    }

    #[test]
    fn detector_round_trip() {
        let (model, ds, det, _) = trained_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        det.save(&path).unwrap();
        let loaded = DetectorModel::load(&path).unwrap();
        assert_eq!(det.weights, loaded.weights);
        assert_eq!(det.bias, loaded.bias);
        assert_eq!(det.feat_mean, loaded.feat_mean);
        let a = det.detect(&model, &ds.images).unwrap();
        let b = loaded.detect(&model, &ds.images).unwrap();
        assert_eq!(a, b);
    }
}
