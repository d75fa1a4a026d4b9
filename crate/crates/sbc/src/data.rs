//! Dataset ingestion and synthesis: MNIST IDX parsing, the block-sparse
//! regression oracle, a synthetic textured-image classification set, and
//! seeded batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SbcError};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, c, h, w]` for image sets, `[n, d]` for flat ones.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather `indices` into one batch tensor shaped `[batch, ..input_shape]`.
    pub fn batch(&self, indices: &[usize], input_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = input_shape.iter().product();
        let stride: usize = self.images.shape[1..].iter().product();
        if per != stride {
            return Err(SbcError::Shape(format!(
                "dataset sample size {} vs requested input shape {:?}",
                stride, input_shape
            )));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(input_shape);
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(SbcError::Index(format!("sample {} >= {}", i, self.len())));
            }
            data.extend_from_slice(&self.images.data[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor { shape, data }, labels))
    }
}

fn read_be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > buf.len() {
        return Err(SbcError::Format {
            msg: format!("file truncated reading u32 ({} bytes total)", buf.len()),
            offset: offset as u64,
        });
    }
    Ok(u32::from_be_bytes([buf[offset], buf[offset + 1], buf[offset + 2], buf[offset + 3]]))
}

/// Parse big-endian IDX image + label files; pixels scaled by 1/255.
pub fn load_mnist_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let img = fs::read(image_path)?;
    let lab = fs::read(label_path)?;

    let magic = read_be_u32(&img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(SbcError::Format {
            msg: format!("image magic 0x{:08x}, expected 0x{:08x}", magic, IDX_IMAGES_MAGIC),
            offset: 0,
        });
    }
    let n = read_be_u32(&img, 4)? as usize;
    let h = read_be_u32(&img, 8)? as usize;
    let w = read_be_u32(&img, 12)? as usize;
    let want = 16 + n * h * w;
    if img.len() != want {
        return Err(SbcError::Format {
            msg: format!("image payload {} bytes, header declares {}", img.len() - 16.min(img.len()), n * h * w),
            offset: img.len().min(want) as u64,
        });
    }

    let lmagic = read_be_u32(&lab, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(SbcError::Format {
            msg: format!("label magic 0x{:08x}, expected 0x{:08x}", lmagic, IDX_LABELS_MAGIC),
            offset: 0,
        });
    }
    let ln = read_be_u32(&lab, 4)? as usize;
    if lab.len() != 8 + ln {
        return Err(SbcError::Format {
            msg: format!("label payload {} bytes, header declares {}", lab.len() - 8.min(lab.len()), ln),
            offset: lab.len().min(8 + ln) as u64,
        });
    }
    if ln != n {
        return Err(SbcError::Format {
            msg: format!("{} labels for {} images", ln, n),
            offset: 4,
        });
    }

    let data: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    Ok(Dataset {
        images: Tensor {
            shape: vec![n, 1, h, w],
            data,
        },
        labels,
        split: image_path.to_string_lossy().into_owned(),
    })
}

#[derive(Clone, Debug)]
pub struct BlockSparseProblem {
    /// `[n_samples, n_features]` Gaussian design.
    pub x: Tensor,
    pub w_true: Vec<f64>,
    pub y: Vec<f64>,
    pub noise: f64,
    /// Non-overlapping active block indices (block b covers [bB, bB+B)).
    pub active_blocks: Vec<usize>,
    pub block_size: usize,
}

/// Gaussian design, weights supported on `k_active` random non-overlapping
/// contiguous blocks, observations y = Xw + noise.
pub fn synth_blocksparse(
    n_features: usize,
    block_size: usize,
    k_active: usize,
    n_samples: usize,
    noise: f64,
    seed: u64,
) -> Result<BlockSparseProblem> {
    if block_size == 0 || n_features == 0 || n_samples == 0 {
        return Err(SbcError::Domain("sizes must be positive".into()));
    }
    let n_blocks = n_features / block_size;
    if k_active > n_blocks {
        return Err(SbcError::Domain(format!(
            "{} active blocks of size {} exceed {} features",
            k_active, block_size, n_features
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..n_blocks).collect();
    ids.shuffle(&mut rng);
    let mut active: Vec<usize> = ids[..k_active].to_vec();
    active.sort_unstable();

    let mut w_true = vec![0.0; n_features];
    for &b in &active {
        for i in b * block_size..(b + 1) * block_size {
            let v: f64 = StandardNormal.sample(&mut rng);
            w_true[i] = v;
        }
    }
    let xd: Vec<f64> = (0..n_samples * n_features)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let y: Vec<f64> = (0..n_samples)
        .map(|s| {
            let row = &xd[s * n_features..(s + 1) * n_features];
            let clean: f64 = row.iter().zip(&w_true).map(|(&a, &b)| a * b).sum();
            let e: f64 = StandardNormal.sample(&mut rng);
            clean + noise * e
        })
        .collect();
    Ok(BlockSparseProblem {
        x: Tensor {
            shape: vec![n_samples, n_features],
            data: xd,
        },
        w_true,
        y,
        noise,
        active_blocks: active,
        block_size,
    })
}

/// Balanced class-conditional textured images in [0,1]: each class has its
/// own sinusoidal texture orientation and a bright marker patch, plus noise.
pub fn synth_classification(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || size < 8 {
        return Err(SbcError::Domain(format!(
            "need >= 2 classes and size >= 8, got {} / {}",
            classes, size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let patch = 4usize;
    for i in 0..n {
        let c = i % classes;
        let fx = 1.0 + (c % 3) as f64;
        let fy = 1.0 + ((c / 3) % 3) as f64;
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        // marker patch location cycles through a grid of anchor points
        let slots = (size - patch) / patch;
        let px = (c % slots.max(1)) * patch;
        let py = ((c / slots.max(1)) % slots.max(1)) * patch;
        for y in 0..size {
            for x in 0..size {
                let t = (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / size as f64
                    + phase)
                    .sin();
                let mut v = 0.45 + 0.18 * t;
                if x >= px && x < px + patch && y >= py && y < py + patch {
                    v += 0.35;
                }
                let e: f64 = StandardNormal.sample(&mut rng);
                v += 0.08 * e;
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    Ok(Dataset {
        images: Tensor {
            shape: vec![n, 1, size, size],
            data,
        },
        labels,
        split: format!("synth-{}c", classes),
    })
}

/// Index batches for one epoch: seeded shuffle, final short batch included.
pub fn batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(SbcError::Domain("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}
