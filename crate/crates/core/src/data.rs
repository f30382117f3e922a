//! Datasets, file formats, synthetic data, and federated partitioning.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::ActivationTensor;
use crate::rng::RandomStream;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images stored sample-major (`N × C × H × W`), pixels as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], num_classes: usize, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let [channels, height, width] = shape;
        ensure(images.len() == labels.len() * channels * height * width, || {
            format!(
                "{} pixel values for {} samples of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )
        })?;
        ensure(labels.iter().all(|&l| l < num_classes), || {
            format!("label outside 0..{num_classes}")
        })?;
        Ok(Dataset {
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers samples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (ActivationTensor, Vec<usize>) {
        let hw = self.height * self.width;
        let b = indices.len();
        let mut x = ActivationTensor::zeros(b, self.channels, self.height, self.width);
        for (bi, &i) in indices.iter().enumerate() {
            let s = self.sample(i);
            for c in 0..self.channels {
                x.data[(c * b + bi) * hw..][..hw].copy_from_slice(&s[c * hw..][..hw]);
            }
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.sample(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Per-channel mean and standard deviation over all samples.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let hw = self.height * self.width;
        let n = (self.len() * hw) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for i in 0..self.len() {
            let s = self.sample(i);
            for c in 0..self.channels {
                for &v in &s[c * hw..][..hw] {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let mut std = vec![0.0; self.channels];
        for c in 0..self.channels {
            mean[c] /= n;
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
        }
        (mean, std)
    }

    /// `x ← (x − mean_c) / std_c`; channels with zero spread are only centered.
    pub fn standardize(&mut self, mean: &[f64], std: &[f64]) {
        let hw = self.height * self.width;
        let n = self.sample_len();
        for s in self.images.chunks_exact_mut(n) {
            for c in 0..self.channels {
                let scale = if std[c] > 0.0 { 1.0 / std[c] } else { 1.0 };
                for v in &mut s[c * hw..][..hw] {
                    *v = (*v - mean[c]) * scale;
                }
            }
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: format!("file ends before the {what}"),
        })
}

/// Reads an IDX image file (`0x00000803`, `N × rows × cols` bytes) and its
/// label file (`0x00000801`). Pixels are scaled to `[0, 1]`; the class count
/// is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img = read_file(images_path.as_ref())?;
    let lab = read_file(labels_path.as_ref())?;
    let magic = be_u32(&img, 0, "image magic")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        });
    }
    let n = be_u32(&img, 4, "image count")? as usize;
    let rows = be_u32(&img, 8, "row count")? as usize;
    let cols = be_u32(&img, 12, "column count")? as usize;
    let need = 16 + n * rows * cols;
    if img.len() < need {
        return Err(Error::Format {
            offset: img.len() as u64,
            message: format!("image data truncated: {need} bytes expected"),
        });
    }
    let magic = be_u32(&lab, 0, "label magic")?;
    if magic != IDX_LABELS {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        });
    }
    let nl = be_u32(&lab, 4, "label count")? as usize;
    if nl != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{nl} labels for {n} images"),
        });
    }
    if lab.len() < 8 + n {
        return Err(Error::Format {
            offset: lab.len() as u64,
            message: format!("label data truncated: {} bytes expected", 8 + n),
        });
    }
    let images = img[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new([1, rows, cols], num_classes, images, labels)
}

/// Writes single-channel data as an IDX pair, quantizing pixels
/// (clamped to `[0, 1]`) to bytes.
pub fn write_idx(data: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    ensure(data.channels == 1, || "IDX images are single-channel".to_string())?;
    ensure(data.num_classes <= 256, || "IDX labels are single bytes".to_string())?;
    let mut img = Vec::with_capacity(16 + data.images.len());
    for v in [IDX_IMAGES, data.len() as u32, data.height as u32, data.width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.images.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS, data.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(data.labels.iter().map(|&l| l as u8));
    let p = images_path.as_ref();
    fs::write(p, img).map_err(|e| Error::io(p, e))?;
    let p = labels_path.as_ref();
    fs::write(p, lab).map_err(|e| Error::io(p, e))
}

/// Reads CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record).
pub fn load_cifar_bin(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = read_file(p.as_ref())?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                message: format!("trailing partial record in {}", p.as_ref().display()),
            });
        }
        for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::Format {
                    offset: (k * CIFAR_RECORD) as u64,
                    message: format!("label {} out of range", rec[0]),
                });
            }
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Dataset::new([3, 32, 32], 10, images, labels)
}

/// Class-conditional Gaussian images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples: usize,
    pub shape: [usize; 3],
    /// Amplitude of the class template relative to unit pixel noise.
    pub separation: f64,
    /// Maximum per-sample translation of the template, in pixels.
    pub max_shift: usize,
    /// Standard deviation of the pixel noise.
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(num_classes: usize, samples: usize, shape: [usize; 3], separation: f64) -> Self {
        SynthSpec {
            num_classes,
            samples,
            shape,
            separation,
            max_shift: 0,
            noise: 1.0,
        }
    }
}

/// Each class gets a template made of a few random Gaussian bumps of random
/// sign; a sample is `0.5 + 0.1·(separation·shifted template + noise·ε)`,
/// clamped to `[0, 1]`. Labels cycle through the classes so class counts are
/// balanced.
pub fn synth_blobs(spec: &SynthSpec, stream: &mut RandomStream) -> Result<Dataset> {
    let [c, h, w] = spec.shape;
    ensure(spec.num_classes >= 1 && c * h * w >= 1, || {
        "empty synthetic geometry".to_string()
    })?;
    let bumps = 4;
    let mut templates = vec![vec![0.0; c * h * w]; spec.num_classes];
    for t in templates.iter_mut() {
        for _ in 0..bumps {
            let ch = stream.index(c);
            let cy = stream.uniform() * h as f64;
            let cx = stream.uniform() * w as f64;
            let width = 0.8 + stream.uniform() * (h.min(w) as f64 / 6.0);
            let sign = if stream.uniform() < 0.5 { -1.0 } else { 1.0 };
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    t[(ch * h + y) * w + x] += sign * (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
        let norm = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        if norm > 0.0 {
            t.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut images = Vec::with_capacity(spec.samples * c * h * w);
    let mut labels = Vec::with_capacity(spec.samples);
    let span = 2 * spec.max_shift + 1;
    for i in 0..spec.samples {
        let label = i % spec.num_classes;
        let dy = stream.index(span) as isize - spec.max_shift as isize;
        let dx = stream.index(span) as isize - spec.max_shift as isize;
        let t = &templates[label];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize - dy;
                    let sx = x as isize - dx;
                    let base = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        t[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                    let v = 0.5 + 0.1 * (spec.separation * base + spec.noise * stream.normal());
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(spec.shape, spec.num_classes, images, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    pub alpha: f64,
    pub samples_per_client: usize,
}

/// Splits sample indices into `num_clients` disjoint, equal-sized shards.
///
/// Dirichlet mode draws a class mix `q ~ Dir(α)` per client and then draws
/// each sample's class from `q` restricted to classes with samples left.
pub fn partition(
    data: &Dataset,
    cfg: &PartitionConfig,
    num_clients: usize,
    stream: &mut RandomStream,
) -> Result<Vec<Vec<usize>>> {
    let need = cfg.samples_per_client * num_clients;
    ensure(cfg.samples_per_client >= 1 && num_clients >= 1, || {
        "partition needs at least one client and one sample per client".to_string()
    })?;
    ensure(need <= data.len(), || {
        format!(
            "{num_clients} clients x {} samples exceeds the {} available",
            cfg.samples_per_client,
            data.len()
        )
    })?;
    match cfg.mode {
        PartitionMode::Iid => {
            let mut all: Vec<usize> = (0..data.len()).collect();
            stream.shuffle(&mut all);
            Ok(all[..need].chunks(cfg.samples_per_client).map(|c| c.to_vec()).collect())
        }
        PartitionMode::Dirichlet => {
            ensure(cfg.alpha > 0.0 && cfg.alpha.is_finite(), || {
                format!("Dirichlet alpha must be positive, got {}", cfg.alpha)
            })?;
            let k = data.num_classes;
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, &l) in data.labels.iter().enumerate() {
                pools[l].push(i);
            }
            for p in &mut pools {
                stream.shuffle(p);
            }
            let gamma = Gamma::new(cfg.alpha, 1.0).map_err(|e| Error::contract(e.to_string()))?;
            let mut shards = Vec::with_capacity(num_clients);
            for _ in 0..num_clients {
                let mut q: Vec<f64> = (0..k).map(|_| gamma.sample(stream)).collect();
                let total: f64 = q.iter().sum();
                if total > 0.0 {
                    q.iter_mut().for_each(|v| *v /= total);
                } else {
                    q.iter_mut().for_each(|v| *v = 1.0 / k as f64);
                }
                let mut shard = Vec::with_capacity(cfg.samples_per_client);
                for _ in 0..cfg.samples_per_client {
                    let mass: f64 = (0..k).filter(|&c| !pools[c].is_empty()).map(|c| q[c]).sum();
                    if mass <= 0.0 {
                        let class = (0..k)
                            .max_by(|&a, &b| q[a].total_cmp(&q[b]))
                            .expect("at least one class");
                        return Err(Error::Partition { class });
                    }
                    let target = stream.uniform() * mass;
                    let mut acc = 0.0;
                    let mut pick = None;
                    for c in 0..k {
                        if pools[c].is_empty() || q[c] <= 0.0 {
                            continue;
                        }
                        acc += q[c];
                        pick = Some(c);
                        if target < acc {
                            break;
                        }
                    }
                    let c = pick.expect("positive mass");
                    shard.push(pools[c].pop().expect("non-empty pool"));
                }
                shards.push(shard);
            }
            Ok(shards)
        }
    }
}

/// One JSON line per client: `{"client": i, "indices": [...]}`.
pub fn write_shard_manifest(path: impl AsRef<Path>, shards: &[Vec<usize>]) -> Result<()> {
    let p = path.as_ref();
    let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
    for (client, indices) in shards.iter().enumerate() {
        let line = serde_json::json!({ "client": client, "indices": indices });
        writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Random horizontal flip and random crop from a `pad`-pixel zero-padded
/// image, per sample.
pub fn augment(x: &mut ActivationTensor, pad: usize, stream: &mut RandomStream) {
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let mut buf = vec![0.0; hw];
    for b in 0..x.batch {
        let flip = stream.uniform() < 0.5;
        let dy = stream.index(2 * pad + 1) as isize - pad as isize;
        let dx = stream.index(2 * pad + 1) as isize - pad as isize;
        for c in 0..x.channels {
            let plane = &mut x.data[(c * x.batch + b) * hw..][..hw];
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = xx as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    buf[y * w + xx] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        plane[sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
            plane.copy_from_slice(&buf);
        }
    }
}
