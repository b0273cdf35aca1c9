//! Metrics and reporting: adversarial accuracy, rank-statistic ROC AUC,
//! protected accuracy from protector outcomes, per-perturbed-pixel L2,
//! wall-clock timing, and the CSV report with its JSON provenance sidecar.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Array4;
use sha2::{Digest, Sha256};

use crate::attacks::AdversarialSet;
use crate::classifier::CnnClassifier;
use crate::data::Dataset;
use crate::detector::{DetectorModel, Outcome, protected_classify};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const REPORT_HEADER: &str =
    "attack,beta,variant,adv_acc,det_auc,protected_adv_acc,l2_per_pixel,seconds_per_100";

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub attack: String,
    pub beta: Option<f64>,
    pub variant: String,
    pub adv_acc: f64,
    pub det_auc: f64,
    pub protected_adv_acc: f64,
    pub l2_per_pixel: f64,
    /// Left empty in the CSV when not measured, so reports stay
    /// byte-reproducible unless timing is requested.
    pub seconds_per_100: Option<f64>,
}

/// Fraction of adversarials still classified as their true label.
pub fn adv_acc<T: Scalar>(model: &CnnClassifier<T>, set: &AdversarialSet<T>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("adv_acc", "empty adversarial set"));
    }
    let ds = Dataset {
        images: set.adversarials.clone(),
        labels: set.labels.clone(),
        num_classes: model.num_classes,
    };
    model.accuracy(&ds, 200)
}

/// Mann-Whitney AUC via average ranks; ties get midranks, so the result
/// equals P(score_pos > score_neg) + 0.5 P(tie) exactly.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("roc_auc", "empty or mismatched inputs"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_auc", "both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie group spanning ranks i+1..=j+1 gets the
        // midrank of the group
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// (#A + #B) / N.
pub fn protected_adv_acc(outcomes: &[Outcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    let good = outcomes.iter().filter(|o| matches!(o, Outcome::A | Outcome::B)).count();
    good as f64 / outcomes.len() as f64
}

/// Mean over images of L2 distance divided by the number of coordinates
/// (i, j) where any channel changed; 0 for an unchanged image.
pub fn l2_per_perturbed_pixel<T: Scalar>(x: &Array4<T>, x_adv: &Array4<T>) -> Result<f64> {
    if x.dim() != x_adv.dim() {
        return Err(Error::ShapeMismatch {
            op: "l2_per_perturbed_pixel",
            lhs: x.shape().to_vec(),
            rhs: x_adv.shape().to_vec(),
        });
    }
    let (n, c, h, w) = x.dim();
    let mut total = 0.0;
    for i in 0..n {
        let mut sq = 0.0f64;
        let mut changed = 0usize;
        for y in 0..h {
            for xx in 0..w {
                let mut any = false;
                for ch in 0..c {
                    let d = x_adv[[i, ch, y, xx]].as_f64() - x[[i, ch, y, xx]].as_f64();
                    if d != 0.0 {
                        any = true;
                    }
                    sq += d * d;
                }
                if any {
                    changed += 1;
                }
            }
        }
        if changed > 0 {
            total += sq.sqrt() / changed as f64;
        }
    }
    Ok(total / n as f64)
}

/// Wall-clock seconds of one call.
pub fn timing_harness<F: FnOnce() -> Result<()>>(f: F) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64())
}

/// Detector AUC and protected accuracy on a natural/adversarial mix. The
/// mix is the naturals followed by their adversarial counterparts, so
/// N = naturals + adversarials.
pub fn evaluate_protected<T: Scalar>(
    detector: &DetectorModel,
    model: &CnnClassifier<T>,
    naturals: &Dataset<T>,
    adversarials: &Array4<T>,
    adv_labels: &[usize],
) -> Result<(f64, f64)> {
    let nat_scores = detector.detect(model, &naturals.images)?;
    let adv_scores = detector.detect(model, adversarials)?;
    let mut scores = nat_scores.clone();
    scores.extend(adv_scores.iter());
    let mut flags = vec![false; nat_scores.len()];
    flags.extend(std::iter::repeat(true).take(adv_scores.len()));
    let auc = roc_auc(&scores, &flags)?;

    let nat_out = protected_classify(
        detector,
        model,
        &naturals.images,
        &naturals.labels,
        &vec![false; naturals.len()],
    )?;
    let adv_out = protected_classify(
        detector,
        model,
        adversarials,
        adv_labels,
        &vec![true; adv_labels.len()],
    )?;
    let mut all = nat_out;
    all.extend(adv_out);
    Ok((auc, protected_adv_acc(&all)))
}

fn csv_num(v: f64) -> String {
    format!("{v:.6}")
}

/// Fixed-header CSV; rows in the given order.
pub fn write_report(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let p = path.display().to_string();
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let beta = r.beta.map(|b| format!("{b}")).unwrap_or_default();
        let secs = r.seconds_per_100.map(csv_num).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.attack,
            beta,
            r.variant,
            csv_num(r.adv_acc),
            csv_num(r.det_auc),
            csv_num(r.protected_adv_acc),
            csv_num(r.l2_per_pixel),
            secs
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(&p, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&p, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// JSON sidecar naming the inputs by content hash plus free-form config
/// strings. Deterministic: keys are sorted, no timestamps.
pub fn write_provenance(
    path: &Path,
    input_files: &BTreeMap<String, &Path>,
    config: &BTreeMap<String, String>,
) -> Result<()> {
    let p = path.display().to_string();
    let mut inputs = BTreeMap::new();
    for (name, f) in input_files {
        inputs.insert(name.clone(), sha256_file(f)?);
    }
    #[derive(serde::Serialize)]
    struct Provenance<'a> {
        inputs: BTreeMap<String, String>,
        config: &'a BTreeMap<String, String>,
    }
    let body = serde_json::to_string_pretty(&Provenance { inputs, config }).expect("provenance json");
    std::fs::write(path, body).map_err(|e| Error::io(&p, e))
}
