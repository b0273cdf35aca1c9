//! Vulnerability-map learning: the conv encoder-decoder scoring network,
//! categorical hard masks and their Concrete relaxation, masked
//! adversarial composition, the mutual-information training loss, and the
//! sampled/topk/random/reverse mask selectors.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn, s};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{AttackConfig, AttackKind, run_attack};
use crate::checkpoint;
use crate::classifier::CnnClassifier;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stage_rng};
use crate::scalar::Scalar;
use crate::tensor::{AdamState, Tape, Var, concrete_sample, softmax_value};

/// Pixel budget M = round(beta * H * W), rounding half up, floored at 1.
pub fn budget_from_beta(beta: f64, h: usize, w: usize) -> Result<usize> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid("budget_from_beta", format!("beta {beta} outside (0, 1]")));
    }
    Ok(((beta * (h * w) as f64) + 0.5).floor().max(1.0) as usize)
}

/// Conv encoder to a 128-d latent, deconv decoder back to one raw score
/// per pixel. Input height and width must be divisible by 4 (two stride-2
/// stages each way).
#[derive(Clone)]
pub struct VulnNet<T: Scalar> {
    pub params: IndexMap<String, ArrayD<T>>,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
}

pub const LATENT_DIM: usize = 128;

impl<T: Scalar> VulnNet<T> {
    pub fn init(in_ch: usize, h: usize, w: usize, seed: u64) -> Result<VulnNet<T>> {
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::invalid("VulnNet", format!("input {h}x{w} must be divisible by 4")));
        }
        let mut rng = stage_rng(seed, "vulnnet-init");
        let mut params = IndexMap::new();
        let flat = 32 * (h / 4) * (w / 4);
        let conv = |params: &mut IndexMap<String, ArrayD<T>>,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        shape: &[usize],
                        fan_in: usize,
                        bias_shape: &[usize]| {
            let lim = (6.0 / fan_in as f64).sqrt();
            let w = ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of_f64(rng.gen_range(-lim..lim)));
            params.insert(format!("{name}.w"), w);
            params.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(bias_shape)));
        };
        conv(&mut params, &mut rng, "enc.conv1", &[16, in_ch, 3, 3], in_ch * 9, &[16, 1, 1]);
        conv(&mut params, &mut rng, "enc.conv2", &[32, 16, 3, 3], 16 * 9, &[32, 1, 1]);
        conv(&mut params, &mut rng, "enc.fc", &[flat, LATENT_DIM], flat, &[LATENT_DIM]);
        conv(&mut params, &mut rng, "dec.fc", &[LATENT_DIM, flat], LATENT_DIM, &[flat]);
        // transposed convs share the conv weight layout (in, out, k, k)
        conv(&mut params, &mut rng, "dec.deconv1", &[32, 16, 4, 4], 32 * 16, &[16, 1, 1]);
        conv(&mut params, &mut rng, "dec.deconv2", &[16, 1, 4, 4], 16 * 16, &[1, 1, 1]);
        Ok(VulnNet { params, in_ch, h, w })
    }

    /// Raw scores Theta as a (N, H*W) node.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        param_vars: Option<&IndexMap<String, Var>>,
    ) -> Result<Var> {
        let get = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
            if let Some(vars) = param_vars {
                vars.get(name)
                    .copied()
                    .ok_or_else(|| Error::invalid("VulnNet::forward_graph", format!("missing {name}")))
            } else {
                Ok(tape.constant(self.params[name].clone()))
            }
        };
        let sh = tape.shape(x).to_vec();
        if sh.len() != 4 || sh[1] != self.in_ch || sh[2] != self.h || sh[3] != self.w {
            return Err(Error::invalid(
                "VulnNet::forward_graph",
                format!("input {sh:?} does not match ({}, {}, {})", self.in_ch, self.h, self.w),
            ));
        }
        let n = sh[0];
        let (qh, qw) = (self.h / 4, self.w / 4);
        let flat = 32 * qh * qw;

        let affine = |tape: &mut Tape<T>, name: &str, h: Var, conv: Option<(usize, usize, bool)>| -> Result<Var> {
            let w = get(tape, &format!("{name}.w"))?;
            let b = get(tape, &format!("{name}.b"))?;
            let y = match conv {
                Some((stride, pad, false)) => tape.conv2d(h, w, stride, pad)?,
                Some((stride, pad, true)) => tape.conv_transpose2d(h, w, stride, pad)?,
                None => tape.matmul(h, w)?,
            };
            let bb = tape.broadcast_to(b, &tape.shape(y).to_vec())?;
            tape.add(y, bb)
        };

        let h1 = affine(tape, "enc.conv1", x, Some((2, 1, false)))?;
        let h1 = tape.relu(h1);
        let h2 = affine(tape, "enc.conv2", h1, Some((2, 1, false)))?;
        let h2 = tape.relu(h2);
        let hf = tape.reshape(h2, &[n, flat])?;
        let z = affine(tape, "enc.fc", hf, None)?;
        let z = tape.relu(z);
        let d = affine(tape, "dec.fc", z, None)?;
        let d = tape.relu(d);
        let d = tape.reshape(d, &[n, 32, qh, qw])?;
        let d1 = affine(tape, "dec.deconv1", d, Some((2, 1, true)))?;
        let d1 = tape.relu(d1);
        let d2 = affine(tape, "dec.deconv2", d1, Some((2, 1, true)))?;
        tape.reshape(d2, &[n, self.h * self.w])
    }

    /// Raw scores for a batch, outside any tape.
    pub fn theta_raw(&self, images: &Array4<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone().into_dyn());
        let t = self.forward_graph(&mut tape, x, None)?;
        Ok(tape
            .value(t)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("theta is 2-D"))
    }

    pub fn save(&self, path: &Path, extra_meta: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra_meta.clone();
        meta.insert("kind".to_string(), "vulnmap".to_string());
        meta.insert("in_ch".to_string(), self.in_ch.to_string());
        meta.insert("h".to_string(), self.h.to_string());
        meta.insert("w".to_string(), self.w.to_string());
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<(VulnNet<T>, BTreeMap<String, String>)> {
        let p = path.display().to_string();
        let (params, meta) = checkpoint::load::<T>(path)?;
        if meta.get("kind").map(String::as_str) != Some("vulnmap") {
            return Err(Error::format(&p, "checkpoint is not a vulnerability network"));
        }
        let dim = |key: &str| -> Result<usize> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(&p, format!("missing dim `{key}`")))
        };
        let net = VulnNet { params, in_ch: dim("in_ch")?, h: dim("h")?, w: dim("w")? };
        Ok((net, meta))
    }
}

/// Raw scores plus their softmax over all H*W positions.
#[derive(Clone, Debug)]
pub struct VulnMap<T: Scalar> {
    pub theta_raw: Array2<T>,
    pub probs: Array2<T>,
}

pub fn vuln_map<T: Scalar>(net: &VulnNet<T>, image: &Array4<T>) -> Result<VulnMap<T>> {
    if image.dim().0 != 1 {
        return Err(Error::invalid("vuln_map", "expects a single image"));
    }
    let theta = net.theta_raw(image)?;
    let probs = softmax_value(&theta.clone().into_dyn());
    let to_hw = |a: ArrayD<T>| {
        a.into_shape_with_order(IxDyn(&[net.h, net.w]))
            .expect("hw shape")
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    };
    Ok(VulnMap { theta_raw: to_hw(theta.into_dyn()), probs: to_hw(probs) })
}

/// Union (elementwise max) of `m` one-hot categorical draws.
pub fn sample_hard_mask<T: Scalar>(probs: &Array2<T>, m: usize, rng: &mut ChaCha8Rng) -> Result<Array2<T>> {
    let (h, w) = probs.dim();
    if m == 0 || m > h * w {
        return Err(Error::invalid("sample_hard_mask", format!("M={m} outside [1, {}]", h * w)));
    }
    let flat: Vec<f64> = probs.iter().map(|p| p.as_f64()).collect();
    let mut cum = Vec::with_capacity(flat.len());
    let mut acc = 0.0;
    for &p in &flat {
        acc += p;
        cum.push(acc);
    }
    let total = acc;
    let mut mask = Array2::<T>::zeros((h, w));
    for _ in 0..m {
        let u: f64 = rng.gen::<f64>() * total;
        let idx = cum.partition_point(|&c| c <= u).min(flat.len() - 1);
        mask[[idx / w, idx % w]] = T::one();
    }
    Ok(mask)
}

/// Elementwise max of `m` Concrete draws, computed outside the tape. The
/// same (seed, draw) streams drive the differentiable tape op.
pub fn sample_relaxed_mask<T: Scalar>(
    map: &VulnMap<T>,
    m: usize,
    tau: f64,
    seed: u64,
) -> Result<Array2<T>> {
    let (h, w) = map.theta_raw.dim();
    if m == 0 || m > h * w {
        return Err(Error::invalid("sample_relaxed_mask", format!("M={m} outside [1, {}]", h * w)));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("sample_relaxed_mask", format!("tau {tau} must be > 0")));
    }
    let logits: Vec<T> = map.theta_raw.iter().cloned().collect();
    let mut out = vec![0f64; h * w];
    let mut acc = vec![0f64; h * w];
    for draw in 0..m {
        concrete_sample(&logits, tau, seed, 0, draw as u64, &mut out);
        for (a, &v) in acc.iter_mut().zip(&out) {
            if draw == 0 || v > *a {
                *a = v;
            }
        }
    }
    Ok(Array2::from_shape_vec((h, w), acc.into_iter().map(T::of_f64).collect()).expect("hw shape"))
}

/// X + Z (*) (X_s - X), one mask value per coordinate, broadcast over
/// channels.
pub fn compose_adversarial<T: Scalar>(
    x: &Array4<T>,
    x_s: &Array4<T>,
    masks: &Array3<T>,
) -> Result<Array4<T>> {
    let (n, c, h, w) = x.dim();
    if x_s.dim() != x.dim() {
        return Err(Error::ShapeMismatch {
            op: "compose_adversarial",
            lhs: x.shape().to_vec(),
            rhs: x_s.shape().to_vec(),
        });
    }
    if masks.dim() != (n, h, w) {
        return Err(Error::ShapeMismatch {
            op: "compose_adversarial",
            lhs: x.shape().to_vec(),
            rhs: masks.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let z = masks[[i, y, xx]];
                    out[[i, ch, y, xx]] = x[[i, ch, y, xx]] + z * (x_s[[i, ch, y, xx]] - x[[i, ch, y, xx]]);
                }
            }
        }
    }
    Ok(out)
}

/// Cross-entropy of the adversarial label distribution against the (fixed)
/// source distribution, averaged over images. Minimized exactly when the
/// two distributions agree.
pub fn mi_loss<T: Scalar>(probs_source: &Array2<T>, probs_adv: &Array2<T>) -> Result<f64> {
    if probs_source.dim() != probs_adv.dim() {
        return Err(Error::ShapeMismatch {
            op: "mi_loss",
            lhs: probs_source.shape().to_vec(),
            rhs: probs_adv.shape().to_vec(),
        });
    }
    let n = probs_source.dim().0 as f64;
    let mut total = 0.0;
    for (ps, pa) in probs_source.iter().zip(probs_adv.iter()) {
        total -= ps.as_f64() * pa.as_f64().max(1e-12).ln();
    }
    Ok(total / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskVariant {
    Sampled,
    Topk,
    Random,
    Reverse,
}

impl MaskVariant {
    pub fn name(self) -> &'static str {
        match self {
            MaskVariant::Sampled => "sampled",
            MaskVariant::Topk => "topk",
            MaskVariant::Random => "random",
            MaskVariant::Reverse => "reverse",
        }
    }
}

impl std::fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(MaskVariant::Sampled),
            "topk" => Ok(MaskVariant::Topk),
            "random" => Ok(MaskVariant::Random),
            "reverse" => Ok(MaskVariant::Reverse),
            other => Err(Error::invalid("variant", format!("unknown mask variant `{other}`"))),
        }
    }
}

/// Hard mask for one image under the requested selection rule. topk and
/// reverse pick exactly M coordinates; ties break by index for
/// reproducibility.
pub fn select_mask_variant<T: Scalar>(
    map: &VulnMap<T>,
    m: usize,
    variant: MaskVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<T>> {
    let (h, w) = map.probs.dim();
    if m == 0 || m > h * w {
        return Err(Error::invalid("select_mask_variant", format!("M={m} outside [1, {}]", h * w)));
    }
    match variant {
        MaskVariant::Sampled => sample_hard_mask(&map.probs, m, rng),
        MaskVariant::Random => {
            let mut idx: Vec<usize> = (0..h * w).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            let mut mask = Array2::<T>::zeros((h, w));
            for &i in &idx[..m] {
                mask[[i / w, i % w]] = T::one();
            }
            Ok(mask)
        }
        MaskVariant::Topk | MaskVariant::Reverse => {
            let mut idx: Vec<usize> = (0..h * w).collect();
            let flat: Vec<f64> = map.probs.iter().map(|p| p.as_f64()).collect();
            idx.sort_by(|&a, &b| {
                flat[b].partial_cmp(&flat[a]).unwrap().then(a.cmp(&b))
            });
            if variant == MaskVariant::Reverse {
                idx.reverse();
            }
            let mut mask = Array2::<T>::zeros((h, w));
            for &i in &idx[..m] {
                mask[[i / w, i % w]] = T::one();
            }
            Ok(mask)
        }
    }
}

#[derive(Clone, Debug)]
pub struct VulnTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for VulnTrainConfig {
    fn default() -> Self {
        VulnTrainConfig { batch_size: 100, lr: 1e-4, max_iters: 500, patience: 10, seed: 0 }
    }
}

/// One mutual-information training run over minibatches: fresh source
/// adversarials per batch, M Concrete draws through the relaxation, Adam
/// on the scoring network only. Stops when the loss has not improved for
/// `patience` consecutive iterations or at `max_iters`. A non-finite loss
/// aborts before the update, leaving the last good parameters in place.
#[allow(clippy::too_many_arguments)]
pub fn train_vulnmap<T: Scalar>(
    net: &mut VulnNet<T>,
    model: &CnnClassifier<T>,
    source: AttackKind,
    source_cfg: &AttackConfig,
    ds: &Dataset<T>,
    m: usize,
    tau: f64,
    cfg: &VulnTrainConfig,
) -> Result<Vec<f64>> {
    let (c, h, w) = ds.image_dims();
    if (c, h, w) != (net.in_ch, net.h, net.w) {
        return Err(Error::invalid(
            "train_vulnmap",
            format!("dataset ({c},{h},{w}) does not match net ({},{},{})", net.in_ch, net.h, net.w),
        ));
    }
    if m == 0 || m > h * w {
        return Err(Error::invalid("train_vulnmap", format!("M={m} outside [1, {}]", h * w)));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("train_vulnmap", format!("tau {tau} must be > 0")));
    }
    let n_batches = ds.len().div_ceil(cfg.batch_size.max(1));
    let mut adam = AdamState::new(cfg.lr);
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut streak = 0usize;
    'outer: for iter in 0..cfg.max_iters {
        let (epoch, batch) = (iter / n_batches, iter % n_batches);
        let lo = batch * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(ds.len());
        let batch_ds = ds.subset(&(lo..hi).collect::<Vec<_>>());
        let bn = batch_ds.len();

        // fresh source adversarials for this batch
        let mut src_cfg = source_cfg.clone();
        src_cfg.seed = derive_seed(cfg.seed, &format!("source-{epoch}-{batch}"));
        let src = run_attack(source, model, &batch_ds, m, &src_cfg)?;
        let probs_src = softmax_value(&model.predict_logits(&src.adversarials)?.into_dyn());

        let mut tape = Tape::new();
        let x = tape.constant(batch_ds.images.clone().into_dyn());
        let xs = tape.constant(src.adversarials.clone().into_dyn());
        let mut param_vars = IndexMap::new();
        for (name, arr) in &net.params {
            param_vars.insert(name.clone(), tape.leaf(arr.clone(), true));
        }
        let theta = net.forward_graph(&mut tape, x, Some(&param_vars))?;
        // theta used directly as Concrete logits: identical to log-softmax
        // up to a per-row shift, which the Concrete softmax cancels
        let draw_seed = derive_seed(cfg.seed, &format!("draws-{epoch}-{batch}"));
        let z = tape.concrete_max(theta, tau, m, draw_seed)?;
        let z4 = tape.reshape(z, &[bn, 1, h, w])?;
        let zb = tape.broadcast_to(z4, &[bn, c, h, w])?;
        let delta = tape.sub(xs, x)?;
        let masked = tape.mul(zb, delta)?;
        let xadv = tape.add(x, masked)?;
        let logits = model.forward_graph(&mut tape, xadv, None)?;
        let padv = tape.softmax_last(logits);
        let safe = tape.clip(padv, T::of_f64(1e-12), T::one());
        let lp = tape.log(safe);
        let ps = tape.constant(probs_src.clone());
        let weighted = tape.mul(ps, lp)?;
        let total = tape.sum_all(weighted);
        let loss = tape.mul_scalar(total, T::of_f64(-1.0 / bn as f64));
        let loss_val = tape.scalar(loss).as_f64();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "vulnerability training diverged at iteration {iter}: loss {loss_val}; last good parameters kept"
            )));
        }
        trace.push(loss_val);
        tape.backward(loss)?;
        let mut grads = IndexMap::new();
        for (name, var) in &param_vars {
            grads.insert(
                name.clone(),
                tape.grad(*var).ok_or_else(|| Error::MissingGrad(name.clone()))?.clone(),
            );
        }
        adam.step(&mut net.params, &grads)?;

        if loss_val < best {
            best = loss_val;
            streak = 0;
        } else {
            streak += 1;
            if streak >= cfg.patience {
                break 'outer;
            }
        }
    }
    Ok(trace)
}

/// Per-image min-max scaled 8-bit binary PGM of the probability map.
pub fn write_map_pgm<T: Scalar>(path: &Path, probs: &Array2<T>) -> Result<()> {
    let p = path.display().to_string();
    let (h, w) = probs.dim();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in probs.iter() {
        lo = lo.min(v.as_f64());
        hi = hi.max(v.as_f64());
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    write!(f, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(&p, e))?;
    let bytes: Vec<u8> = probs
        .iter()
        .map(|&v| (((v.as_f64() - lo) / range) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes).map_err(|e| Error::io(&p, e))
}

/// Raw probabilities as CSV rows (one row per image row).
pub fn write_map_csv<T: Scalar>(path: &Path, probs: &Array2<T>) -> Result<()> {
    let p = path.display().to_string();
    let mut out = String::new();
    for row in probs.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(&p, e))
}

/// Hard masks for a whole set under one variant, with per-image RNG
/// streams so results do not depend on evaluation order.
pub fn masks_for_set<T: Scalar>(
    net: &VulnNet<T>,
    images: &Array4<T>,
    m: usize,
    variant: MaskVariant,
    seed: u64,
) -> Result<Array3<T>> {
    let (n, _, h, w) = images.dim();
    let mut masks = Array3::<T>::zeros((n, h, w));
    for i in 0..n {
        let img = images.slice(s![i..i + 1, .., .., ..]).to_owned();
        let map = vuln_map(net, &img)?;
        let mut rng = crate::rng::index_rng(seed, i as u64, 2);
        let mask = select_mask_variant(&map, m, variant, &mut rng)?;
        masks.slice_mut(s![i, .., ..]).assign(&mask);
    }
    Ok(masks)
}
