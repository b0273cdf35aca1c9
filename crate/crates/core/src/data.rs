//! Dataset loading (MNIST IDX, CIFAR-10 binary), synthetic generators for
//! desk-scale runs, and deterministic splits. Channel layout is (N, C, H, W)
//! repo-wide; pixels are normalized to [0, 1].

use std::fs;
use std::path::Path;

use ndarray::{Array4, s};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::scalar::Scalar;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Clone, Debug)]
pub struct Dataset<T: Scalar> {
    pub images: Array4<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of a single image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dim();
        (d.1, d.2, d.3)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        let (c, h, w) = self.image_dims();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images.slice_mut(s![row, .., .., ..]).assign(&self.images.slice(s![i, .., .., ..]));
            labels.push(self.labels[i]);
        }
        Dataset { images, labels, num_classes: self.num_classes }
    }

    pub fn take(&self, n: usize) -> Dataset<T> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    fn validate(&self, path: &str) -> Result<()> {
        if self.labels.len() != self.images.dim().0 {
            return Err(Error::format(
                path,
                format!("{} labels vs {} images", self.labels.len(), self.images.dim().0),
            ));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::format(path, format!("label {l} out of range")));
        }
        Ok(())
    }
}

fn read_u32_be(buf: &[u8], off: usize, path: &str) -> Result<u32> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Load canonical MNIST IDX image/label files.
pub fn load_mnist_idx<T: Scalar>(image_path: &Path, label_path: &Path) -> Result<Dataset<T>> {
    let ip = image_path.display().to_string();
    let lp = label_path.display().to_string();
    let ibuf = fs::read(image_path).map_err(|e| Error::io(&ip, e))?;
    let lbuf = fs::read(label_path).map_err(|e| Error::io(&lp, e))?;

    if read_u32_be(&ibuf, 0, &ip)? != IDX_IMAGES_MAGIC {
        return Err(Error::format(&ip, "bad IDX image magic (want 0x00000803)"));
    }
    let n = read_u32_be(&ibuf, 4, &ip)? as usize;
    let h = read_u32_be(&ibuf, 8, &ip)? as usize;
    let w = read_u32_be(&ibuf, 12, &ip)? as usize;
    let pixels = &ibuf[16..];
    if pixels.len() != n * h * w {
        return Err(Error::format(
            &ip,
            format!("truncated payload: want {} pixel bytes, got {}", n * h * w, pixels.len()),
        ));
    }

    if read_u32_be(&lbuf, 0, &lp)? != IDX_LABELS_MAGIC {
        return Err(Error::format(&lp, "bad IDX label magic (want 0x00000801)"));
    }
    let ln = read_u32_be(&lbuf, 4, &lp)? as usize;
    let lbytes = &lbuf[8..];
    if lbytes.len() != ln {
        return Err(Error::format(&lp, format!("truncated payload: want {ln} labels, got {}", lbytes.len())));
    }
    if ln != n {
        return Err(Error::format(&ip, format!("{n} images but {ln} labels")));
    }

    let scale = T::of_f64(1.0 / 255.0);
    let data: Vec<T> = pixels.iter().map(|&b| T::of_f64(b as f64) * scale).collect();
    let images = Array4::from_shape_vec((n, 1, h, w), data).expect("idx shape");
    let labels: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let ds = Dataset { images, labels, num_classes: 10 };
    ds.validate(&lp)?;
    Ok(ds)
}

/// Write a single-channel dataset as a canonical IDX pair.
pub fn save_mnist_idx<T: Scalar>(ds: &Dataset<T>, image_path: &Path, label_path: &Path) -> Result<()> {
    let (c, h, w) = ds.image_dims();
    if c != 1 {
        return Err(Error::invalid("save_mnist_idx", format!("want 1 channel, got {c}")));
    }
    let ip = image_path.display().to_string();
    let mut ibuf = Vec::with_capacity(16 + ds.len() * h * w);
    ibuf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ibuf.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    ibuf.extend_from_slice(&(h as u32).to_be_bytes());
    ibuf.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in ds.images.iter() {
        ibuf.push((v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(image_path, ibuf).map_err(|e| Error::io(&ip, e))?;

    let lp = label_path.display().to_string();
    let mut lbuf = Vec::with_capacity(8 + ds.len());
    lbuf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbuf.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(label_path, lbuf).map_err(|e| Error::io(&lp, e))
}

/// Load CIFAR-10 binary batches: each record is 1 label byte + 3072 pixel
/// bytes (R, G, B planes of a 32x32 image).
pub fn load_cifar10_bin<T: Scalar>(paths: &[&Path]) -> Result<Dataset<T>> {
    let mut all = Vec::new();
    let mut labels = Vec::new();
    let scale = T::of_f64(1.0 / 255.0);
    for path in paths {
        let p = path.display().to_string();
        let buf = fs::read(path).map_err(|e| Error::io(&p, e))?;
        if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                &p,
                format!("file length {} is not a multiple of {CIFAR_RECORD}", buf.len()),
            ));
        }
        for rec in buf.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::format(&p, format!("label byte {label} out of range")));
            }
            labels.push(label);
            all.extend(rec[1..].iter().map(|&b| T::of_f64(b as f64) * scale));
        }
    }
    let n = labels.len();
    let images = Array4::from_shape_vec((n, 3, 32, 32), all).expect("cifar shape");
    Ok(Dataset { images, labels, num_classes: 10 })
}

/// Write a 3-channel 32x32 dataset as a CIFAR-10 binary batch.
pub fn save_cifar10_bin<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let (c, h, w) = ds.image_dims();
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::invalid("save_cifar10_bin", format!("want (3,32,32), got ({c},{h},{w})")));
    }
    let mut buf = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        buf.push(ds.labels[i] as u8);
        for &v in ds.images.slice(s![i, .., .., ..]).iter() {
            buf.push((v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(&p, e))
}

/// Linearly separable blob-pattern classes: class k lights a fixed square
/// region; the rest is low-amplitude noise. Balanced by round-robin labels.
pub fn synthetic_dataset<T: Scalar>(
    seed: u64,
    n: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Result<Dataset<T>> {
    if k == 0 || n < k {
        return Err(Error::invalid("synthetic_dataset", format!("need n >= k > 0, got n={n} k={k}")));
    }
    if h < 4 || w < 4 {
        return Err(Error::invalid("synthetic_dataset", format!("image {h}x{w} too small")));
    }
    let grid = (k as f64).sqrt().ceil() as usize;
    let cell_h = h / grid.max(1);
    let cell_w = w / grid.max(1);
    let blob_h = (cell_h / 2).max(2);
    let blob_w = (cell_w / 2).max(2);

    let mut rng = stage_rng(seed, "synthetic");
    let mut images = Array4::zeros((n, 1, h, w));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        labels.push(label);
        let (gy, gx) = (label / grid, label % grid);
        let (y0, x0) = (gy * cell_h, gx * cell_w);
        let amp = T::of_f64(rng.gen_range(0.7..1.0));
        for y in 0..h {
            for x in 0..w {
                let noise = T::of_f64(rng.gen_range(0.0..0.15));
                let in_blob = y >= y0 && y < y0 + blob_h && x >= x0 && x < x0 + blob_w;
                images[[i, 0, y, x]] = if in_blob { amp } else { noise };
            }
        }
    }
    Ok(Dataset { images, labels, num_classes: k })
}

const DIGIT_GLYPHS: [[&str; 7]; 10] = [
    ["11111", "10001", "10001", "10001", "10001", "10001", "11111"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["11111", "00001", "00001", "11111", "10000", "10000", "11111"],
    ["11111", "00001", "00001", "01111", "00001", "00001", "11111"],
    ["10001", "10001", "10001", "11111", "00001", "00001", "00001"],
    ["11111", "10000", "10000", "11111", "00001", "00001", "11111"],
    ["11111", "10000", "10000", "11111", "10001", "10001", "11111"],
    ["11111", "00001", "00010", "00100", "00100", "00100", "00100"],
    ["11111", "10001", "10001", "11111", "10001", "10001", "11111"],
    ["11111", "10001", "10001", "11111", "00001", "00001", "11111"],
];

/// MNIST-shaped synthetic digits: 28x28 greyscale glyphs with random
/// placement, stroke jitter, and background noise. Harder than the blob
/// generator; a small CNN needs real training to clear 97% on it.
pub fn synthetic_digits<T: Scalar>(seed: u64, n: usize) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::invalid("synthetic_digits", "n must be positive"));
    }
    const SCALE: usize = 3;
    let (h, w) = (28usize, 28usize);
    let (gh, gw) = (7 * SCALE, 5 * SCALE);
    let mut rng = stage_rng(seed, "digits");
    let mut images = Array4::zeros((n, 1, h, w));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        labels.push(label);
        let oy = rng.gen_range(0..=(h - gh));
        let ox = rng.gen_range(0..=(w - gw));
        let amp: f64 = rng.gen_range(0.55..1.0);
        for y in 0..h {
            for x in 0..w {
                let mut v: f64 = rng.gen_range(0.0..0.20);
                if y >= oy && y < oy + gh && x >= ox && x < ox + gw {
                    let ry = (y - oy) / SCALE;
                    let rx = (x - ox) / SCALE;
                    if DIGIT_GLYPHS[label][ry].as_bytes()[rx] == b'1' {
                        v = amp * rng.gen_range(0.75..1.0);
                    }
                }
                images[[i, 0, y, x]] = T::of_f64(v);
            }
        }
    }
    Ok(Dataset { images, labels, num_classes: 10 })
}

/// Deterministic shuffled half split; the first half gets the extra
/// element when N is odd (it is the detector-training half).
pub fn split_half<T: Scalar>(ds: &Dataset<T>, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::invalid("split_half", format!("need at least 2 images, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stage_rng(seed, "split-half");
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let first_len = n.div_ceil(2);
    Ok((ds.subset(&idx[..first_len]), ds.subset(&idx[first_len..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("im.idx"), dir.path().join("lb.idx"));
        let ds = synthetic_digits::<f32>(9, 20).unwrap();
        save_mnist_idx(&ds, &ip, &lp).unwrap();
        let loaded = load_mnist_idx::<f32>(&ip, &lp).unwrap();
        let (ip2, lp2) = (dir.path().join("im2.idx"), dir.path().join("lb2.idx"));
        save_mnist_idx(&loaded, &ip2, &lp2).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
        assert_eq!(fs::read(&lp).unwrap(), fs::read(&lp2).unwrap());
        assert_eq!(ds.labels, loaded.labels);
    }

    #[test]
    fn idx_normalizes_extreme_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("im.idx"), dir.path().join("lb.idx"));
        let mut ibuf = Vec::new();
        ibuf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        ibuf.extend_from_slice(&2u32.to_be_bytes());
        ibuf.extend_from_slice(&1u32.to_be_bytes());
        ibuf.extend_from_slice(&1u32.to_be_bytes());
        ibuf.extend_from_slice(&[0u8, 255u8]);
        fs::write(&ip, &ibuf).unwrap();
        let mut lbuf = Vec::new();
        lbuf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbuf.extend_from_slice(&2u32.to_be_bytes());
        lbuf.extend_from_slice(&[3u8, 7u8]);
        fs::write(&lp, &lbuf).unwrap();
        let ds = load_mnist_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!(ds.images[[0, 0, 0, 0]], 0.0);
        assert_eq!(ds.images[[1, 0, 0, 0]], 1.0);
        assert_eq!(ds.labels, vec![3, 7]);

        // truncating the pixel payload by one byte must fail
        ibuf.pop();
        fs::write(&ip, &ibuf).unwrap();
        let err = load_mnist_idx::<f64>(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn cifar_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(255u8).take(3072));
        fs::write(&p, &rec).unwrap();
        let ds = load_cifar10_bin::<f32>(&[&p]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 7);
        assert!(ds.images.iter().all(|&v| v == 1.0));

        // length not divisible by the record size
        rec.pop();
        fs::write(&p, &rec).unwrap();
        assert!(load_cifar10_bin::<f32>(&[&p]).is_err());
    }

    #[test]
    fn cifar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut rng = stage_rng(5, "cifar-test");
        let mut bytes = Vec::new();
        for _ in 0..4 {
            bytes.push(rng.gen_range(0..10u8));
            bytes.extend((0..3072).map(|_| rng.gen::<u8>()));
        }
        fs::write(&p, &bytes).unwrap();
        let ds = load_cifar10_bin::<f32>(&[&p]).unwrap();
        let p2 = dir.path().join("batch2.bin");
        save_cifar10_bin(&ds, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_dataset::<f32>(1, 200, 16, 16, 4).unwrap();
        let b = synthetic_dataset::<f32>(1, 200, 16, 16, 4).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        for class in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 50);
        }
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    }

    #[test]
    fn split_half_covers_all_indices() {
        let ds = synthetic_dataset::<f32>(2, 11, 8, 8, 2).unwrap();
        let (a, b) = split_half(&ds, 3).unwrap();
        assert_eq!((a.len(), b.len()), (6, 5));
        let (a2, b2) = split_half(&ds, 3).unwrap();
        assert_eq!(a.images, a2.images);
        assert_eq!(b.labels, b2.labels);

        // label multiset is preserved
        let mut all: Vec<usize> = a.labels.iter().chain(&b.labels).cloned().collect();
        all.sort_unstable();
        let mut orig = ds.labels.clone();
        orig.sort_unstable();
        assert_eq!(all, orig);
        // and the halves are genuinely disjoint samples: pixel sums differ
        let sa: f32 = a.images.sum();
        let sb: f32 = b.images.sum();
        assert_ne!(sa, sb);
    }

    #[test]
    fn linear_probe_separates_blobs() {
        // independent oracle: one-vs-rest least-squares probe on raw pixels
        let ds = synthetic_dataset::<f64>(7, 120, 12, 12, 4).unwrap();
        let n = ds.len();
        let d = 144;
        // mean pixel per class as a prototype classifier (linear in pixels)
        let mut protos = vec![vec![0.0f64; d]; 4];
        let mut counts = [0usize; 4];
        for i in 0..n {
            let l = ds.labels[i];
            counts[l] += 1;
            for (j, &v) in ds.images.slice(s![i, 0, .., ..]).iter().enumerate() {
                protos[l][j] += v;
            }
        }
        for (c, p) in protos.iter_mut().enumerate() {
            for v in p.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        let mut correct = 0;
        for i in 0..n {
            let img: Vec<f64> = ds.images.slice(s![i, 0, .., ..]).iter().cloned().collect();
            let best = (0..4)
                .max_by(|&a, &b| {
                    let sa: f64 = protos[a].iter().zip(&img).map(|(p, x)| p * x).sum();
                    let sb: f64 = protos[b].iter().zip(&img).map(|(p, x)| p * x).sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .unwrap();
            if best == ds.labels[i] {
                correct += 1;
            }
        }
        assert!(correct as f64 / n as f64 >= 0.95, "probe accuracy {correct}/{n}");
    }
}
