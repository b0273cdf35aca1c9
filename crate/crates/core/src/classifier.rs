//! CNN classifier: serializable architecture, seeded He-uniform init,
//! cross-entropy training with Adam, and input-gradient queries used by the
//! attack implementations.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array2, Array4, ArrayD, IxDyn, s};
use rand::Rng;

use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::scalar::Scalar;
use crate::tensor::{AdamState, Tape, Var, softmax_value};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
pub enum Layer {
    Conv { out: usize, in_ch: usize, k: usize, stride: usize, pad: usize },
    Relu,
    MaxPool2,
    Flatten,
    Dense { out: usize, in_dim: usize },
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct ArchSpec {
    pub layers: Vec<Layer>,
}

impl ArchSpec {
    /// conv5x5(32) -> pool -> conv5x5(64) -> pool -> fc1024 -> fc(k).
    /// Valid for inputs where both pooling stages divide evenly, which
    /// covers 28x28 and 32x32.
    pub fn cnn(in_ch: usize, h: usize, w: usize, k: usize) -> Result<ArchSpec> {
        let (h1, w1) = (h.checked_sub(4), w.checked_sub(4));
        let (h1, w1) = match (h1, w1) {
            (Some(a), Some(b)) if a % 2 == 0 && b % 2 == 0 && a > 0 && b > 0 => (a / 2, b / 2),
            _ => return Err(Error::invalid("ArchSpec::cnn", format!("input {h}x{w} unsupported"))),
        };
        let (h2, w2) = (h1.checked_sub(4), w1.checked_sub(4));
        let (h2, w2) = match (h2, w2) {
            (Some(a), Some(b)) if a % 2 == 0 && b % 2 == 0 && a > 0 && b > 0 => (a / 2, b / 2),
            _ => return Err(Error::invalid("ArchSpec::cnn", format!("input {h}x{w} unsupported"))),
        };
        let flat = 64 * h2 * w2;
        Ok(ArchSpec {
            layers: vec![
                Layer::Conv { out: 32, in_ch, k: 5, stride: 1, pad: 0 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv { out: 64, in_ch: 32, k: 5, stride: 1, pad: 0 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Dense { out: 1024, in_dim: flat },
                Layer::Relu,
                Layer::Dense { out: k, in_dim: 1024 },
            ],
        })
    }

    /// One small conv block plus a linear head; for fast tests.
    pub fn tiny(in_ch: usize, h: usize, w: usize, k: usize) -> Result<ArchSpec> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("ArchSpec::tiny", format!("input {h}x{w} must be even")));
        }
        let flat = 8 * (h / 2) * (w / 2);
        Ok(ArchSpec {
            layers: vec![
                Layer::Conv { out: 8, in_ch, k: 3, stride: 1, pad: 1 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Dense { out: k, in_dim: flat },
            ],
        })
    }

    pub fn num_classes(&self) -> Result<usize> {
        match self.layers.last() {
            Some(Layer::Dense { out, .. }) => Ok(*out),
            _ => Err(Error::invalid("ArchSpec", "last layer must be Dense")),
        }
    }
}

#[derive(Clone)]
pub struct CnnClassifier<T: Scalar> {
    pub arch: ArchSpec,
    pub params: IndexMap<String, ArrayD<T>>,
    pub num_classes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 3, batch_size: 100, lr: 1e-3, seed: 0 }
    }
}

impl<T: Scalar> CnnClassifier<T> {
    /// He-uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases at zero.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<CnnClassifier<T>> {
        let num_classes = arch.num_classes()?;
        let mut rng = stage_rng(seed, "classifier-init");
        let mut params = IndexMap::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            match layer {
                Layer::Conv { out, in_ch, k, .. } => {
                    let fan_in = in_ch * k * k;
                    let lim = (6.0 / fan_in as f64).sqrt();
                    let w = ArrayD::from_shape_simple_fn(IxDyn(&[*out, *in_ch, *k, *k]), || {
                        T::of_f64(rng.gen_range(-lim..lim))
                    });
                    params.insert(format!("layer{i}.w"), w);
                    params.insert(format!("layer{i}.b"), ArrayD::zeros(IxDyn(&[*out, 1, 1])));
                }
                Layer::Dense { out, in_dim } => {
                    let lim = (6.0 / *in_dim as f64).sqrt();
                    let w = ArrayD::from_shape_simple_fn(IxDyn(&[*in_dim, *out]), || {
                        T::of_f64(rng.gen_range(-lim..lim))
                    });
                    params.insert(format!("layer{i}.w"), w);
                    params.insert(format!("layer{i}.b"), ArrayD::zeros(IxDyn(&[*out])));
                }
                _ => {}
            }
        }
        Ok(CnnClassifier { arch, params, num_classes })
    }

    /// Build the forward graph from an existing input node. Parameters are
    /// taken from `param_vars` when given (training) or inserted as
    /// constants (inference and attack graphs).
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
                    .ok_or_else(|| Error::invalid("forward_graph", format!("missing param {name}")))
            } else {
                let arr = self
                    .params
                    .get(name)
                    .ok_or_else(|| Error::invalid("forward_graph", format!("missing param {name}")))?;
                Ok(tape.constant(arr.clone()))
            }
        };
        let mut h = x;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv { stride, pad, .. } => {
                    let w = get(tape, &format!("layer{i}.w"))?;
                    let b = get(tape, &format!("layer{i}.b"))?;
                    let y = tape.conv2d(h, w, *stride, *pad)?;
                    let bb = tape.broadcast_to(b, &tape.shape(y).to_vec())?;
                    tape.add(y, bb)?
                }
                Layer::Relu => tape.relu(h),
                Layer::MaxPool2 => tape.maxpool2(h)?,
                Layer::Flatten => {
                    let sh = tape.shape(h).to_vec();
                    let n = sh[0];
                    let flat: usize = sh[1..].iter().product();
                    tape.reshape(h, &[n, flat])?
                }
                Layer::Dense { .. } => {
                    let w = get(tape, &format!("layer{i}.w"))?;
                    let b = get(tape, &format!("layer{i}.b"))?;
                    let y = tape.matmul(h, w)?;
                    let bb = tape.broadcast_to(b, &tape.shape(y).to_vec())?;
                    tape.add(y, bb)?
                }
            };
        }
        Ok(h)
    }

    pub fn predict_logits(&self, images: &Array4<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone().into_dyn());
        let logits = self.forward_graph(&mut tape, x, None)?;
        Ok(tape
            .value(logits)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("logits are 2-D"))
    }

    pub fn predict_probs(&self, images: &Array4<T>) -> Result<Array2<T>> {
        let logits = self.predict_logits(images)?;
        Ok(softmax_value(&logits.into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .expect("probs are 2-D"))
    }

    pub fn predict_labels(&self, images: &Array4<T>) -> Result<Vec<usize>> {
        let logits = self.predict_logits(images)?;
        Ok(argmax_rows(&logits))
    }

    pub fn accuracy(&self, ds: &Dataset<T>, batch: usize) -> Result<f64> {
        let mut correct = 0usize;
        let mut i = 0;
        while i < ds.len() {
            let j = (i + batch).min(ds.len());
            let imgs = ds.images.slice(s![i..j, .., .., ..]).to_owned();
            let preds = self.predict_labels(&imgs)?;
            correct += preds
                .iter()
                .zip(&ds.labels[i..j])
                .filter(|(p, l)| p == l)
                .count();
            i = j;
        }
        Ok(correct as f64 / ds.len() as f64)
    }

    /// Summed cross-entropy over a batch, as a graph node.
    fn ce_loss_graph(&self, tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
        let sh = tape.shape(logits).to_vec();
        let (n, k) = (sh[0], sh[1]);
        let mut onehot = ArrayD::<T>::zeros(IxDyn(&[n, k]));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = T::one();
        }
        let probs = tape.softmax_last(logits);
        let safe = tape.clip(probs, T::of_f64(1e-12), T::one());
        let lp = tape.log(safe);
        let oh = tape.constant(onehot);
        let picked = tape.mul(lp, oh)?;
        let total = tape.sum_all(picked);
        Ok(tape.mul_scalar(total, T::of_f64(-1.0)))
    }

    /// Minibatch SGD with Adam; shuffles each epoch from the seed. Aborts
    /// with a structured error when the loss leaves the finite range.
    pub fn train(&mut self, ds: &Dataset<T>, cfg: &TrainConfig) -> Result<Vec<f64>> {
        if ds.num_classes != self.num_classes {
            return Err(Error::invalid(
                "train",
                format!("dataset has {} classes, model has {}", ds.num_classes, self.num_classes),
            ));
        }
        let mut adam = AdamState::new(cfg.lr);
        let mut losses = Vec::new();
        for epoch in 0..cfg.epochs {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            let mut rng = stage_rng(cfg.seed, &format!("classifier-epoch-{epoch}"));
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            let mut epoch_loss = 0.0;
            for chunk in idx.chunks(cfg.batch_size.max(1)) {
                let batch = ds.subset(chunk);
                let mut tape = Tape::new();
                let x = tape.constant(batch.images.into_dyn());
                let mut param_vars = IndexMap::new();
                for (name, arr) in &self.params {
                    param_vars.insert(name.clone(), tape.leaf(arr.clone(), true));
                }
                let logits = self.forward_graph(&mut tape, x, Some(&param_vars))?;
                let total = self.ce_loss_graph(&mut tape, logits, &batch.labels)?;
                let loss = tape.mul_scalar(total, T::of_f64(1.0 / chunk.len() as f64));
                let loss_val = tape.scalar(loss).as_f64();
                if !loss_val.is_finite() {
                    return Err(Error::Numeric(format!(
                        "classifier training diverged at epoch {epoch}: loss {loss_val}"
                    )));
                }
                epoch_loss += loss_val * chunk.len() as f64;
                tape.backward(loss)?;
                let mut grads = IndexMap::new();
                for (name, var) in &param_vars {
                    let g = tape
                        .grad(*var)
                        .ok_or_else(|| Error::MissingGrad(name.clone()))?
                        .clone();
                    grads.insert(name.clone(), g);
                }
                adam.step(&mut self.params, &grads)?;
            }
            losses.push(epoch_loss / ds.len() as f64);
        }
        Ok(losses)
    }

    /// Per-image cross-entropy losses and the input gradient of their sum.
    /// The gradient rows are exactly the per-image loss gradients.
    pub fn loss_and_input_grad(
        &self,
        images: &Array4<T>,
        labels: &[usize],
    ) -> Result<(Vec<T>, Array4<T>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone().into_dyn(), true);
        let logits = self.forward_graph(&mut tape, x, None)?;
        let probs = softmax_value(tape.value(logits));
        let losses: Vec<T> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| T::of_f64(-(probs[[i, l]].as_f64().max(1e-12)).ln()))
            .collect();
        let total = self.ce_loss_graph(&mut tape, logits, labels)?;
        tape.backward(total)?;
        let grad = tape
            .grad(x)
            .ok_or_else(|| Error::MissingGrad("input".into()))?
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("input grad is 4-D");
        Ok((losses, grad))
    }

    /// Gradient of one logit of a single image with respect to the input.
    pub fn logit_input_grad(&self, image: &Array4<T>, class: usize) -> Result<Array4<T>> {
        if image.dim().0 != 1 {
            return Err(Error::invalid("logit_input_grad", "expects a single image"));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone().into_dyn(), true);
        let logits = self.forward_graph(&mut tape, x, None)?;
        let k = tape.shape(logits)[1];
        if class >= k {
            return Err(Error::invalid("logit_input_grad", format!("class {class} >= {k}")));
        }
        let mut pick = ArrayD::<T>::zeros(IxDyn(&[1, k]));
        pick[[0, class]] = T::one();
        let sel = tape.constant(pick);
        let prod = tape.mul(logits, sel)?;
        let loss = tape.sum_all(prod);
        tape.backward(loss)?;
        Ok(tape
            .grad(x)
            .ok_or_else(|| Error::MissingGrad("input".into()))?
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("input grad is 4-D"))
    }

    /// Gradient of the sum of all logits of a single image.
    pub fn logit_sum_input_grad(&self, image: &Array4<T>) -> Result<Array4<T>> {
        if image.dim().0 != 1 {
            return Err(Error::invalid("logit_sum_input_grad", "expects a single image"));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone().into_dyn(), true);
        let logits = self.forward_graph(&mut tape, x, None)?;
        let loss = tape.sum_all(logits);
        tape.backward(loss)?;
        Ok(tape
            .grad(x)
            .ok_or_else(|| Error::MissingGrad("input".into()))?
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("input grad is 4-D"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "classifier".to_string());
        meta.insert("arch".to_string(), serde_json::to_string(&self.arch).expect("arch json"));
        meta.insert("num_classes".to_string(), self.num_classes.to_string());
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<CnnClassifier<T>> {
        let p = path.display().to_string();
        let (params, meta) = checkpoint::load::<T>(path)?;
        if meta.get("kind").map(String::as_str) != Some("classifier") {
            return Err(Error::format(&p, "checkpoint is not a classifier"));
        }
        let arch_json = meta
            .get("arch")
            .ok_or_else(|| Error::format(&p, "missing arch metadata"))?;
        let arch: ArchSpec = serde_json::from_str(arch_json)
            .map_err(|e| Error::format(&p, format!("arch parse: {e}")))?;
        let num_classes = arch.num_classes()?;
        Ok(CnnClassifier { arch, params, num_classes })
    }
}

pub fn argmax_rows<T: Scalar>(m: &Array2<T>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
