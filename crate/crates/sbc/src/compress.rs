//! Pruning, bit-width assignment, compression accounting, the SBCM
//! compressed-model format, and sparse posterior-mean inference.
//!
//! SBCM layout (little-endian, all bit-packed sections byte-aligned):
//! magic "SBCM", version u16, arch tag u8, class count u16, layer count u16;
//! per layer: kind u8 (0 dense, 1 conv), rows u32, width u32, kept u32,
//! bits u8, conv extras (c_in u32, kh u8, kw u8, stride u8), weight quant
//! scale f32 + offset f32, bias quant scale f32 + offset f32, per-row kept
//! counts packed at ceil(log2(width+1)) bits, column indices packed at
//! ceil(log2 width) bits, weight values packed at `bits` bits, biases packed
//! at `bits` bits; trailing CRC32 over everything after the magic.
//! Column indices are bit-packed rather than stored as raw u32 so the file
//! length tracks the compression-ratio denominator.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SbcError};
use crate::model::{Arch, Layer, Model};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SBCM";
const FORMAT_VERSION: u16 = 2;
const LOG_ALPHA_GUARD: f64 = 1e-100;

#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct PruneThresholds {
    /// Groups with score below this are dropped.
    pub group_tau: f64,
    /// Weights with ln(sigma^2/mu^2) above this are dropped.
    pub weight_log_alpha_tau: f64,
}

impl Default for PruneThresholds {
    fn default() -> Self {
        PruneThresholds {
            group_tau: 0.0,
            weight_log_alpha_tau: 3.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PruneMasks {
    /// Per layer, per input group (unit / feature map).
    pub group_keep: Vec<Vec<bool>>,
    /// Per layer, per flattened weight.
    pub weight_keep: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    /// Same shapes as the input, pruned entries zeroed.
    pub model: Model,
    pub masks: PruneMasks,
    /// Surviving input units per layer (Table-II style architecture).
    pub arch_units: Vec<usize>,
}

fn log_alpha(mu: f64, logvar: f64) -> f64 {
    logvar - (mu * mu + LOG_ALPHA_GUARD).ln()
}

/// Output-unit index of flattened weight `i`, when the layer's outputs align
/// with the next layer's input groups.
fn out_index(layer: &Layer, i: usize) -> usize {
    match layer {
        Layer::Dense(d) => i % d.out_dim,
        Layer::Conv(c) => i / (c.c_in * c.kh * c.kw),
    }
}

/// True when dropping input group g of `next` must remove output unit g of
/// `prev` (dense-dense and conv-conv interfaces; the conv-to-dense flatten
/// does not align).
fn interface_aligned(prev: &Layer, next: &Layer) -> bool {
    match (prev, next) {
        (Layer::Dense(p), Layer::Dense(n)) => p.out_dim == n.in_dim,
        (Layer::Conv(p), Layer::Conv(n)) => p.c_out == n.c_in,
        _ => false,
    }
}

/// Drop groups below `group_tau` (removing the unit consistently on both
/// sides of aligned interfaces), then drop noise-dominated weights inside
/// surviving groups. Idempotent for fixed thresholds.
pub fn prune(model: &Model, th: &PruneThresholds) -> Result<PruneOutcome> {
    let n_layers = model.layers.len();
    let mut group_keep: Vec<Vec<bool>> = Vec::with_capacity(n_layers);
    for layer in &model.layers {
        let scores = layer.group_scores();
        group_keep.push(scores.iter().map(|&s| !(s < th.group_tau)).collect());
    }

    let mut weight_keep: Vec<Vec<bool>> = Vec::with_capacity(n_layers);
    for (l, layer) in model.layers.iter().enumerate() {
        let groups = layer.groups();
        let (w_mu, w_lv) = match layer {
            Layer::Dense(d) => (&d.w_mu, &d.w_logvar),
            Layer::Conv(c) => (&c.w_mu, &c.w_logvar),
        };
        let keep: Vec<bool> = (0..w_mu.numel())
            .map(|i| {
                group_keep[l][groups[i]]
                    && log_alpha(w_mu.data[i], w_lv.data[i]) <= th.weight_log_alpha_tau
            })
            .collect();
        weight_keep.push(keep);
    }

    // upstream side of each aligned interface
    for l in 1..n_layers {
        if !interface_aligned(&model.layers[l - 1], &model.layers[l]) {
            continue;
        }
        let dropped: Vec<bool> = group_keep[l].iter().map(|&k| !k).collect();
        let prev = &model.layers[l - 1];
        for i in 0..weight_keep[l - 1].len() {
            if dropped[out_index(prev, i)] {
                weight_keep[l - 1][i] = false;
            }
        }
    }

    let survivors: Vec<usize> = weight_keep
        .iter()
        .map(|k| k.iter().filter(|&&b| b).count())
        .collect();
    if survivors.iter().any(|&s| s == 0) {
        return Err(SbcError::Contract(format!(
            "pruning empties a layer; survivors per layer: {:?}",
            survivors
        )));
    }

    let mut pruned = model.clone();
    for (l, layer) in pruned.layers.iter_mut().enumerate() {
        let (w_mu, bias_mu) = match layer {
            Layer::Dense(d) => (&mut d.w_mu, &mut d.bias_mu),
            Layer::Conv(c) => (&mut c.w_mu, &mut c.bias_mu),
        };
        for (i, &keep) in weight_keep[l].iter().enumerate() {
            if !keep {
                w_mu.data[i] = 0.0;
            }
        }
        // zero biases of units dropped by the next layer's group mask
        if l + 1 < n_layers && interface_aligned(&model.layers[l], &model.layers[l + 1]) {
            for (o, &k) in group_keep[l + 1].iter().enumerate() {
                if !k {
                    bias_mu.data[o] = 0.0;
                }
            }
        }
    }

    let arch_units = group_keep.iter().map(|g| g.iter().filter(|&&b| b).count()).collect();
    Ok(PruneOutcome {
        model: pruned,
        masks: PruneMasks {
            group_keep,
            weight_keep,
        },
        arch_units,
    })
}

/// Per-layer quantization bit width: the surviving means' range measured in
/// units of the smallest surviving posterior sigma, log2, plus one, clamped
/// to [1, 32].
pub fn assign_bits(model: &Model, masks: &PruneMasks) -> Result<Vec<u8>> {
    let mut bits = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let (w_mu, w_lv) = match layer {
            Layer::Dense(d) => (&d.w_mu, &d.w_logvar),
            Layer::Conv(c) => (&c.w_mu, &c.w_logvar),
        };
        let keep = &masks.weight_keep[l];
        if keep.len() != w_mu.numel() {
            return Err(SbcError::Contract(format!(
                "mask length {} for layer of {} weights",
                keep.len(),
                w_mu.numel()
            )));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut min_sigma = f64::INFINITY;
        let mut any = false;
        for i in 0..keep.len() {
            if !keep[i] {
                continue;
            }
            any = true;
            lo = lo.min(w_mu.data[i]);
            hi = hi.max(w_mu.data[i]);
            min_sigma = min_sigma.min((0.5 * w_lv.data[i]).exp());
        }
        if !any {
            return Err(SbcError::Contract(format!("layer {} has no survivors", l)));
        }
        let range = hi - lo;
        let b = if range == 0.0 || min_sigma == 0.0 {
            1
        } else {
            ((range / min_sigma).log2().ceil() + 1.0).clamp(1.0, 32.0) as u8
        };
        bits.push(b);
    }
    Ok(bits)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CLayerKind {
    Dense,
    Conv {
        c_in: u32,
        kh: u8,
        kw: u8,
        stride: u8,
    },
}

/// One sparse quantized layer: CSR over output units; `width` is the dense
/// column count (dense: in_dim, conv: c_in*kh*kw flattened taps).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedLayer {
    pub kind: CLayerKind,
    pub rows: u32,
    pub width: u32,
    pub bits: u8,
    pub w_scale: f32,
    pub w_offset: f32,
    pub b_scale: f32,
    pub b_offset: f32,
    pub row_ptr: Vec<u32>,
    pub cols: Vec<u32>,
    pub qvals: Vec<u32>,
    pub qbias: Vec<u32>,
}

impl CompressedLayer {
    pub fn kept(&self) -> usize {
        self.cols.len()
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.w_offset as f64 + self.qvals[k] as f64 * self.w_scale as f64
    }

    pub fn bias(&self, row: usize) -> f64 {
        self.b_offset as f64 + self.qbias[row] as f64 * self.b_scale as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedModel {
    pub arch: Arch,
    pub layers: Vec<CompressedLayer>,
}

fn quantize(values: &[f64], bits: u8) -> (f32, f32, Vec<u32>) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if values.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    let levels = (1u64 << bits) - 1;
    let range = hi - lo;
    let scale = if range == 0.0 || levels == 0 {
        1.0
    } else {
        range / levels as f64
    };
    let q = values
        .iter()
        .map(|&v| (((v - lo) / scale).round().max(0.0) as u64).min(levels) as u32)
        .collect();
    (scale as f32, lo as f32, q)
}

/// Build the sparse quantized model from a pruned model. The per-group scale
/// posterior mean E[z] is folded into the stored effective weights, matching
/// the posterior-mean forward pass.
pub fn compress_model(model: &Model, masks: &PruneMasks, bits: &[u8]) -> Result<CompressedModel> {
    if bits.len() != model.layers.len() {
        return Err(SbcError::Contract(format!(
            "{} bit widths for {} layers",
            bits.len(),
            model.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let keep = &masks.weight_keep[l];
        let groups = layer.groups();
        let (w_mu, scale_mu, scale_lv, bias_mu, kind, rows, width) = match layer {
            Layer::Dense(d) => (
                &d.w_mu,
                &d.scale_mu,
                &d.scale_logvar,
                &d.bias_mu,
                CLayerKind::Dense,
                d.out_dim,
                d.in_dim,
            ),
            Layer::Conv(c) => (
                &c.w_mu,
                &c.scale_mu,
                &c.scale_logvar,
                &c.bias_mu,
                CLayerKind::Conv {
                    c_in: c.c_in as u32,
                    kh: c.kh as u8,
                    kw: c.kw as u8,
                    stride: c.stride as u8,
                },
                c.c_out,
                c.c_in * c.kh * c.kw,
            ),
        };
        let ez: Vec<f64> = scale_mu
            .data
            .iter()
            .zip(&scale_lv.data)
            .map(|(&m, &lv)| (m + 0.5 * lv.exp()).exp())
            .collect();

        // gather CSR entries row-major over output units
        let mut row_ptr = vec![0u32; rows + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in 0..rows {
            for col in 0..width {
                let i = match kind {
                    CLayerKind::Dense => col * rows + row,
                    CLayerKind::Conv { .. } => row * width + col,
                };
                if keep[i] {
                    cols.push(col as u32);
                    vals.push(ez[groups[i]] * w_mu.data[i]);
                }
            }
            row_ptr[row + 1] = cols.len() as u32;
        }
        let (w_scale, w_offset, qvals) = quantize(&vals, bits[l]);
        let (b_scale, b_offset, qbias) = quantize(&bias_mu.data, bits[l]);
        layers.push(CompressedLayer {
            kind,
            rows: rows as u32,
            width: width as u32,
            bits: bits[l],
            w_scale,
            w_offset,
            b_scale,
            b_offset,
            row_ptr,
            cols,
            qvals,
            qbias,
        });
    }
    Ok(CompressedModel {
        arch: model.arch,
        layers,
    })
}

// ---------------------------------------------------------------------------
// Bit packing and CRC
// ---------------------------------------------------------------------------

fn bits_for(width: u64) -> u8 {
    // smallest b with 2^b > width-1, i.e. enough to store any value < width
    let mut b = 1u8;
    while (1u64 << b) < width {
        b += 1;
    }
    b
}

fn pack_bits(values: &[u32], bits: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity((values.len() * bits as usize + 7) / 8);
    let mut acc: u64 = 0;
    let mut used: u32 = 0;
    for &v in values {
        acc |= (v as u64) << used;
        used += bits as u32;
        while used >= 8 {
            out.push((acc & 0xff) as u8);
            acc >>= 8;
            used -= 8;
        }
    }
    if used > 0 {
        out.push((acc & 0xff) as u8);
    }
    out
}

fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Option<Vec<u32>> {
    if bytes.len() < (count * bits as usize + 7) / 8 {
        return None;
    }
    let mask: u64 = if bits == 32 { u32::MAX as u64 } else { (1u64 << bits) - 1 };
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut used: u32 = 0;
    let mut pos = 0usize;
    for _ in 0..count {
        while used < bits as u32 {
            acc |= (bytes[pos] as u64) << used;
            pos += 1;
            used += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        used -= bits as u32;
    }
    Some(out)
}

fn crc32(data: &[u8]) -> u32 {
    let mut crc: u32 = 0xffff_ffff;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let m = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xedb8_8320 & m);
        }
    }
    !crc
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn arch_tag(arch: &Arch) -> (u8, u16) {
    match arch {
        Arch::Lenet300 => (0, 10),
        Arch::Lenet5 => (1, 10),
        Arch::SynthConv { classes } => (2, *classes as u16),
    }
}

fn arch_from_tag(tag: u8, classes: u16) -> Result<Arch> {
    match tag {
        0 => Ok(Arch::Lenet300),
        1 => Ok(Arch::Lenet5),
        2 => Ok(Arch::SynthConv {
            classes: classes as usize,
        }),
        _ => Err(SbcError::Format {
            msg: format!("unknown architecture tag {}", tag),
            offset: 6,
        }),
    }
}

pub fn to_bytes(cm: &CompressedModel) -> Vec<u8> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let (tag, classes) = arch_tag(&cm.arch);
    payload.push(tag);
    payload.extend_from_slice(&classes.to_le_bytes());
    payload.extend_from_slice(&(cm.layers.len() as u16).to_le_bytes());
    for layer in &cm.layers {
        match layer.kind {
            CLayerKind::Dense => payload.push(0u8),
            CLayerKind::Conv { .. } => payload.push(1u8),
        }
        payload.extend_from_slice(&layer.rows.to_le_bytes());
        payload.extend_from_slice(&layer.width.to_le_bytes());
        payload.extend_from_slice(&(layer.kept() as u32).to_le_bytes());
        payload.push(layer.bits);
        if let CLayerKind::Conv { c_in, kh, kw, stride } = layer.kind {
            payload.extend_from_slice(&c_in.to_le_bytes());
            payload.push(kh);
            payload.push(kw);
            payload.push(stride);
        }
        payload.extend_from_slice(&layer.w_scale.to_le_bytes());
        payload.extend_from_slice(&layer.w_offset.to_le_bytes());
        payload.extend_from_slice(&layer.b_scale.to_le_bytes());
        payload.extend_from_slice(&layer.b_offset.to_le_bytes());
        let counts: Vec<u32> = (0..layer.rows as usize)
            .map(|r| layer.row_ptr[r + 1] - layer.row_ptr[r])
            .collect();
        payload.extend_from_slice(&pack_bits(&counts, bits_for(layer.width as u64 + 1)));
        payload.extend_from_slice(&pack_bits(&layer.cols, bits_for(layer.width as u64)));
        payload.extend_from_slice(&pack_bits(&layer.qvals, layer.bits));
        payload.extend_from_slice(&pack_bits(&layer.qbias, layer.bits));
    }
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(MAGIC);
    let crc = crc32(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn need(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SbcError::Format {
                msg: format!("truncated reading {} ({} bytes needed)", what, n),
                offset: self.pos as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.need(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let s = self.need(2, what)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.need(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let s = self.need(4, what)?;
        Ok(f32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn packed(&mut self, count: usize, bits: u8, what: &str) -> Result<Vec<u32>> {
        let n = (count * bits as usize + 7) / 8;
        let s = self.need(n, what)?;
        unpack_bits(s, bits, count).ok_or_else(|| SbcError::Format {
            msg: format!("short packed section for {}", what),
            offset: self.pos as u64,
        })
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<CompressedModel> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(SbcError::Format {
            msg: "bad magic, not an SBCM file".into(),
            offset: 0,
        });
    }
    if buf.len() < 8 {
        return Err(SbcError::Format {
            msg: "file too short for checksum".into(),
            offset: buf.len() as u64,
        });
    }
    let payload = &buf[4..buf.len() - 4];
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32(payload);
    if stored != actual {
        return Err(SbcError::Format {
            msg: format!("checksum mismatch: stored {:08x}, computed {:08x}", stored, actual),
            offset: (buf.len() - 4) as u64,
        });
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(SbcError::Format {
            msg: format!("unsupported format version {}", version),
            offset: 0,
        });
    }
    let tag = r.u8("arch tag")?;
    let classes = r.u16("class count")?;
    let arch = arch_from_tag(tag, classes)?;
    let n_layers = r.u16("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let kind_tag = r.u8("layer kind")?;
        let rows = r.u32("rows")?;
        let width = r.u32("width")?;
        let kept = r.u32("kept count")? as usize;
        let bits = r.u8("bit width")?;
        if bits == 0 || bits > 32 {
            return Err(SbcError::Format {
                msg: format!("layer {}: bit width {} out of range", l, bits),
                offset: r.pos as u64,
            });
        }
        let kind = match kind_tag {
            0 => CLayerKind::Dense,
            1 => {
                let c_in = r.u32("conv c_in")?;
                let kh = r.u8("conv kh")?;
                let kw = r.u8("conv kw")?;
                let stride = r.u8("conv stride")?;
                CLayerKind::Conv { c_in, kh, kw, stride }
            }
            _ => {
                return Err(SbcError::Format {
                    msg: format!("layer {}: unknown kind {}", l, kind_tag),
                    offset: r.pos as u64,
                })
            }
        };
        let w_scale = r.f32("weight scale")?;
        let w_offset = r.f32("weight offset")?;
        let b_scale = r.f32("bias scale")?;
        let b_offset = r.f32("bias offset")?;
        let counts = r.packed(rows as usize, bits_for(width as u64 + 1), "row counts")?;
        let mut row_ptr = vec![0u32; rows as usize + 1];
        for (i, &c) in counts.iter().enumerate() {
            row_ptr[i + 1] = row_ptr[i] + c;
        }
        if row_ptr[rows as usize] as usize != kept {
            return Err(SbcError::Format {
                msg: format!(
                    "layer {}: row counts sum to {}, header says {}",
                    l, row_ptr[rows as usize], kept
                ),
                offset: r.pos as u64,
            });
        }
        let cols = r.packed(kept, bits_for(width as u64), "column indices")?;
        if cols.iter().any(|&c| c >= width) {
            return Err(SbcError::Format {
                msg: format!("layer {}: column index out of range", l),
                offset: r.pos as u64,
            });
        }
        for row in 0..rows as usize {
            let s = &cols[row_ptr[row] as usize..row_ptr[row + 1] as usize];
            if s.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SbcError::Format {
                    msg: format!("layer {}: columns not strictly increasing in row {}", l, row),
                    offset: r.pos as u64,
                });
            }
        }
        let qvals = r.packed(kept, bits, "weight values")?;
        let qbias = r.packed(rows as usize, bits, "biases")?;
        layers.push(CompressedLayer {
            kind,
            rows,
            width,
            bits,
            w_scale,
            w_offset,
            b_scale,
            b_offset,
            row_ptr,
            cols,
            qvals,
            qbias,
        });
    }
    if r.pos != payload.len() {
        return Err(SbcError::Format {
            msg: format!("{} trailing bytes after last layer", payload.len() - r.pos),
            offset: (4 + r.pos) as u64,
        });
    }
    Ok(CompressedModel { arch, layers })
}

pub fn export_compressed(cm: &CompressedModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(cm))?;
    Ok(())
}

pub fn import_compressed(path: &Path) -> Result<CompressedModel> {
    from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Sparse inference
// ---------------------------------------------------------------------------

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn max_pool2_vec(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[(ch * h + oy * 2 + dy) * w + ox * 2 + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

fn sparse_dense_apply(layer: &CompressedLayer, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.width as usize {
        return Err(SbcError::Shape(format!(
            "sparse dense layer expects {} inputs, got {}",
            layer.width,
            x.len()
        )));
    }
    let mut y = Vec::with_capacity(layer.rows as usize);
    for row in 0..layer.rows as usize {
        let mut acc = layer.bias(row);
        for k in layer.row_ptr[row] as usize..layer.row_ptr[row + 1] as usize {
            acc += layer.weight(k) * x[layer.cols[k] as usize];
        }
        y.push(acc);
    }
    Ok(y)
}

/// Sparse valid-padding conv over one sample; `x` is `[c_in, h, w]` flat.
fn sparse_conv_apply(
    layer: &CompressedLayer,
    x: &[f64],
    h: usize,
    w: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    let (c_in, kh, kw, stride) = match layer.kind {
        CLayerKind::Conv { c_in, kh, kw, stride } => {
            (c_in as usize, kh as usize, kw as usize, stride as usize)
        }
        CLayerKind::Dense => {
            return Err(SbcError::Contract("conv apply on dense layer".into()))
        }
    };
    if x.len() != c_in * h * w {
        return Err(SbcError::Shape(format!(
            "sparse conv expects {}x{}x{} input, got {} values",
            c_in,
            h,
            w,
            x.len()
        )));
    }
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = vec![0.0; layer.rows as usize * oh * ow];
    for row in 0..layer.rows as usize {
        let plane = &mut out[row * oh * ow..(row + 1) * oh * ow];
        let b = layer.bias(row);
        plane.iter_mut().for_each(|v| *v = b);
        for k in layer.row_ptr[row] as usize..layer.row_ptr[row + 1] as usize {
            let col = layer.cols[k] as usize;
            let ci = col / (kh * kw);
            let ky = (col / kw) % kh;
            let kx = col % kw;
            let wv = layer.weight(k);
            for oy in 0..oh {
                let xi_row = (ci * h + oy * stride + ky) * w + kx;
                for ox in 0..ow {
                    plane[oy * ow + ox] += wv * x[xi_row + ox * stride];
                }
            }
        }
    }
    Ok((out, oh, ow))
}

/// Posterior-mean inference over the sparse storage; `x` shaped
/// `[batch, ...]` matching the architecture input.
pub fn sparse_forward(cm: &CompressedModel, x: &Tensor) -> Result<Tensor> {
    let batch = *x.shape.first().ok_or_else(|| SbcError::Shape("empty input".into()))?;
    let per: usize = x.shape[1..].iter().product();
    let classes = cm.arch.n_classes();
    let want: usize = cm.arch.input_shape().iter().product();
    if per != want {
        return Err(SbcError::Shape(format!(
            "input sample size {} does not match architecture ({})",
            per, want
        )));
    }
    let mut out = Vec::with_capacity(batch * classes);
    for s in 0..batch {
        let sample = &x.data[s * per..(s + 1) * per];
        let logits = match cm.arch {
            Arch::Lenet300 => {
                let mut h = sample.to_vec();
                for (i, layer) in cm.layers.iter().enumerate() {
                    h = sparse_dense_apply(layer, &h)?;
                    if i + 1 < cm.layers.len() {
                        relu_inplace(&mut h);
                    }
                }
                h
            }
            Arch::Lenet5 => {
                let (mut h, mut hh, mut ww) = sparse_conv_apply(&cm.layers[0], sample, 28, 28)?;
                relu_inplace(&mut h);
                h = max_pool2_vec(&h, cm.layers[0].rows as usize, hh, ww);
                hh = 12;
                ww = 12;
                let (mut h2, h3, w3) = sparse_conv_apply(&cm.layers[1], &h, hh, ww)?;
                relu_inplace(&mut h2);
                let pooled = max_pool2_vec(&h2, cm.layers[1].rows as usize, h3, w3);
                let mut v = sparse_dense_apply(&cm.layers[2], &pooled)?;
                relu_inplace(&mut v);
                sparse_dense_apply(&cm.layers[3], &v)?
            }
            Arch::SynthConv { .. } => {
                let mut h = sample.to_vec();
                let (mut hh, mut ww) = (32usize, 32usize);
                for layer in &cm.layers[..3] {
                    let (nh, oh, ow) = sparse_conv_apply(layer, &h, hh, ww)?;
                    h = nh;
                    relu_inplace(&mut h);
                    hh = oh;
                    ww = ow;
                }
                h = max_pool2_vec(&h, cm.layers[2].rows as usize, hh, ww);
                let mut v = sparse_dense_apply(&cm.layers[3], &h)?;
                relu_inplace(&mut v);
                sparse_dense_apply(&cm.layers[4], &v)?
            }
        };
        out.extend_from_slice(&logits);
    }
    Tensor::new(vec![batch, classes], out)
}

/// Dense reference forward over the same dequantized weights, for timing
/// comparisons and equivalence checks.
pub fn dense_forward_dequantized(cm: &CompressedModel, x: &Tensor) -> Result<Tensor> {
    let dense = densify(cm);
    let batch = x.shape[0];
    let per: usize = x.shape[1..].iter().product();
    let classes = cm.arch.n_classes();
    let mut out = Vec::with_capacity(batch * classes);
    for s in 0..batch {
        let sample = &x.data[s * per..(s + 1) * per];
        let logits = match cm.arch {
            Arch::Lenet300 => {
                let mut h = sample.to_vec();
                for (i, (layer, w)) in cm.layers.iter().zip(&dense).enumerate() {
                    h = dense_apply(layer, w, &h);
                    if i + 1 < cm.layers.len() {
                        relu_inplace(&mut h);
                    }
                }
                h
            }
            Arch::Lenet5 => {
                let mut h = dense_conv_apply(&cm.layers[0], &dense[0], sample, 28, 28);
                relu_inplace(&mut h);
                h = max_pool2_vec(&h, cm.layers[0].rows as usize, 24, 24);
                let mut h2 = dense_conv_apply(&cm.layers[1], &dense[1], &h, 12, 12);
                relu_inplace(&mut h2);
                let pooled = max_pool2_vec(&h2, cm.layers[1].rows as usize, 8, 8);
                let mut v = dense_apply(&cm.layers[2], &dense[2], &pooled);
                relu_inplace(&mut v);
                dense_apply(&cm.layers[3], &dense[3], &v)
            }
            Arch::SynthConv { .. } => {
                let mut h = sample.to_vec();
                let (mut hh, mut ww) = (32usize, 32usize);
                for (layer, w) in cm.layers[..3].iter().zip(&dense) {
                    h = dense_conv_apply(layer, w, &h, hh, ww);
                    relu_inplace(&mut h);
                    hh -= 2;
                    ww -= 2;
                }
                h = max_pool2_vec(&h, cm.layers[2].rows as usize, hh, ww);
                let mut v = dense_apply(&cm.layers[3], &dense[3], &h);
                relu_inplace(&mut v);
                dense_apply(&cm.layers[4], &dense[4], &v)
            }
        };
        out.extend_from_slice(&logits);
    }
    Tensor::new(vec![batch, classes], out)
}

/// Materialize dequantized dense weight matrices `[rows, width]` per layer.
pub fn densify(cm: &CompressedModel) -> Vec<Vec<f64>> {
    cm.layers
        .iter()
        .map(|layer| {
            let mut w = vec![0.0; layer.rows as usize * layer.width as usize];
            for row in 0..layer.rows as usize {
                for k in layer.row_ptr[row] as usize..layer.row_ptr[row + 1] as usize {
                    w[row * layer.width as usize + layer.cols[k] as usize] = layer.weight(k);
                }
            }
            w
        })
        .collect()
}

fn dense_apply(layer: &CompressedLayer, w: &[f64], x: &[f64]) -> Vec<f64> {
    let width = layer.width as usize;
    (0..layer.rows as usize)
        .map(|row| {
            let mut acc = layer.bias(row);
            let wr = &w[row * width..(row + 1) * width];
            for i in 0..width {
                acc += wr[i] * x[i];
            }
            acc
        })
        .collect()
}

fn dense_conv_apply(layer: &CompressedLayer, w: &[f64], x: &[f64], h: usize, wdt: usize) -> Vec<f64> {
    let (c_in, kh, kw, stride) = match layer.kind {
        CLayerKind::Conv { c_in, kh, kw, stride } => {
            (c_in as usize, kh as usize, kw as usize, stride as usize)
        }
        CLayerKind::Dense => unreachable!("dense_conv_apply on dense layer"),
    };
    let oh = (h - kh) / stride + 1;
    let ow = (wdt - kw) / stride + 1;
    let width = layer.width as usize;
    let mut out = vec![0.0; layer.rows as usize * oh * ow];
    for row in 0..layer.rows as usize {
        let kern = &w[row * width..(row + 1) * width];
        let b = layer.bias(row);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += kern[(ci * kh + ky) * kw + kx]
                                * x[(ci * h + oy * stride + ky) * wdt + ox * stride + kx];
                        }
                    }
                }
                out[(row * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct CompressionReport {
    /// Surviving input units per layer.
    pub arch_units: Vec<usize>,
    /// Percentage of dense weights surviving.
    pub wr: f64,
    pub cr: f64,
    pub bits: Vec<u8>,
    pub avg_bits: f64,
    pub error_before: Option<f64>,
    pub error_after: Option<f64>,
}

impl CompressionReport {
    pub fn to_csv(&self) -> String {
        let arch = self
            .arch_units
            .iter()
            .map(|u| u.to_string())
            .collect::<Vec<_>>()
            .join("-");
        let bits = self
            .bits
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join("-");
        let fmt = |o: Option<f64>| o.map(|v| format!("{:.4}", v)).unwrap_or_default();
        format!(
            "arch_units,wr_percent,cr,bits,avg_bits,error_before,error_after\n{},{:.4},{:.4},{},{:.4},{},{}\n",
            arch,
            self.wr,
            self.cr,
            bits,
            self.avg_bits,
            fmt(self.error_before),
            fmt(self.error_after)
        )
    }
}

/// WR and CR recomputed from raw counts. CR numerator is the 32-bit dense
/// model; the denominator counts quantized value bits plus, when
/// `include_index_overhead`, ceil(log2 width) bits per kept weight.
pub fn compression_metrics(
    model: &Model,
    cm: &CompressedModel,
    arch_units: &[usize],
    include_index_overhead: bool,
) -> Result<CompressionReport> {
    if model.layers.len() != cm.layers.len() {
        return Err(SbcError::Contract(format!(
            "dense model has {} layers, compressed has {}",
            model.layers.len(),
            cm.layers.len()
        )));
    }
    let total: usize = model.n_weights();
    let kept: usize = cm.layers.iter().map(|l| l.kept()).sum();
    let wr = 100.0 * kept as f64 / total as f64;
    let mut denom_bits: f64 = 0.0;
    let mut bits = Vec::new();
    let mut bit_weight_sum = 0.0;
    for layer in &cm.layers {
        let k = layer.kept() as f64;
        denom_bits += k * layer.bits as f64;
        if include_index_overhead {
            denom_bits += k * bits_for(layer.width as u64) as f64;
        }
        bits.push(layer.bits);
        bit_weight_sum += k * layer.bits as f64;
    }
    let cr = (total as f64 * 32.0) / denom_bits;
    Ok(CompressionReport {
        arch_units: arch_units.to_vec(),
        wr,
        cr,
        bits,
        avg_bits: bit_weight_sum / kept as f64,
        error_before: None,
        error_after: None,
    })
}

/// Group-threshold sweep: (kept weight fraction, test error%) per threshold.
/// Stops early if a threshold would empty a layer.
pub fn sweep_curve(
    model: &Model,
    grid: &[f64],
    weight_log_alpha_tau: f64,
    test: &Dataset,
) -> Result<Vec<(f64, f64)>> {
    if grid.is_empty() {
        return Err(SbcError::Config("sweep grid is empty".into()));
    }
    let total = model.n_weights() as f64;
    let mut curve = Vec::with_capacity(grid.len());
    for &tau in grid {
        let th = PruneThresholds {
            group_tau: tau,
            weight_log_alpha_tau,
        };
        let outcome = match prune(model, &th) {
            Ok(o) => o,
            Err(SbcError::Contract(_)) => break,
            Err(e) => return Err(e),
        };
        let kept: usize = outcome
            .masks
            .weight_keep
            .iter()
            .map(|k| k.iter().filter(|&&b| b).count())
            .sum();
        let err = crate::train::evaluate(&outcome.model, test)?;
        curve.push((kept as f64 / total, err));
    }
    Ok(curve)
}
