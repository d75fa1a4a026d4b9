//! Overlapping equal-size block partition of a layer's weight vector and the
//! two block regularizers: group-lasso over block coefficients and an
//! energy-entropy penalty that pushes the grouped-weight distribution to be
//! skewed (mass concentrated in few blocks).
//!
//! The exact block partition is never learned; fixed-size blocks at a fixed
//! stride realize arbitrarily-located overlapping clusters, with the final
//! block clipped at the layer boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SbcError};
use crate::tensor::{Graph, NodeId};

pub const DEFAULT_BLOCK_SIZE: usize = 16;
pub const DEFAULT_BLOCK_STRIDE: usize = 8;

/// Equal-size blocks at offsets 0, S, 2S, ... covering `[0, n)`; the last
/// block is clipped at `n`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockLayout {
    pub n: usize,
    pub block_size: usize,
    pub stride: usize,
    /// half-open index ranges
    pub blocks: Vec<(usize, usize)>,
}

pub fn make_layout(n: usize, block_size: usize, stride: usize) -> Result<BlockLayout> {
    if n == 0 || block_size == 0 || stride == 0 || stride > block_size || block_size > n {
        return Err(SbcError::Domain(format!(
            "invalid block layout: n {} block_size {} stride {}",
            n, block_size, stride
        )));
    }
    let mut blocks = Vec::new();
    let mut offset = 0;
    loop {
        if offset + block_size >= n {
            blocks.push((n - block_size, n));
            break;
        }
        blocks.push((offset, offset + block_size));
        offset += stride;
    }
    Ok(BlockLayout {
        n,
        block_size,
        stride,
        blocks,
    })
}

impl BlockLayout {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// How many blocks cover index `i`.
    pub fn cover_count(&self, i: usize) -> usize {
        self.blocks.iter().filter(|&&(s, e)| i >= s && i < e).count()
    }
}

/// Per-block energies e_b = ||w restricted to b||^2 and, when total energy is
/// positive, the normalized simplex p over blocks.
#[derive(Clone, Debug)]
pub struct BlockEnergies {
    pub e: Vec<f64>,
    /// None flags the all-zero (energy-zero) case.
    pub p: Option<Vec<f64>>,
}

pub fn block_energies(layout: &BlockLayout, w_mu: &[f64]) -> Result<BlockEnergies> {
    if w_mu.len() != layout.n {
        return Err(SbcError::Shape(format!(
            "{} weights for layout over {}",
            w_mu.len(),
            layout.n
        )));
    }
    let e: Vec<f64> = layout
        .blocks
        .iter()
        .map(|&(s, t)| w_mu[s..t].iter().map(|&v| v * v).sum())
        .collect();
    let total: f64 = e.iter().sum();
    let p = if total > 0.0 {
        Some(e.iter().map(|&x| x / total).collect())
    } else {
        None
    };
    Ok(BlockEnergies { e, p })
}

/// Group-lasso over block coefficients: sum_b sqrt(e_b). Subgradient 0 at
/// e_b = 0.
pub fn cluster_sparsity_penalty(layout: &BlockLayout, w_mu: &[f64]) -> Result<f64> {
    Ok(block_energies(layout, w_mu)?.e.iter().map(|&x| x.sqrt()).sum())
}

/// Shannon entropy of the normalized block-energy distribution; 0 when the
/// energy sits in a single block, ln(#blocks) at uniform spread. Defined as 0
/// for the flagged zero-energy case.
pub fn skew_penalty(energies: &BlockEnergies) -> f64 {
    match &energies.p {
        None => 0.0,
        Some(p) => p
            .iter()
            .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
            .sum(),
    }
}

// ---------------------------------------------------------------------------
// Graph builders used inside the training objective
// ---------------------------------------------------------------------------

pub fn block_energy_nodes(g: &mut Graph, w: NodeId, layout: &BlockLayout) -> Result<NodeId> {
    g.block_sumsq(w, &layout.blocks)
}

pub fn cluster_penalty_node(g: &mut Graph, w: NodeId, layout: &BlockLayout) -> Result<NodeId> {
    let e = block_energy_nodes(g, w, layout)?;
    let roots = g.sqrt(e);
    Ok(g.sum_all(roots))
}

/// Entropy of normalized block energies as a graph node. The zero-total
/// branch is not representable in-graph; callers skip the penalty when a
/// layer is entirely zero.
pub fn skew_penalty_node(g: &mut Graph, w: NodeId, layout: &BlockLayout) -> Result<NodeId> {
    let e = block_energy_nodes(g, w, layout)?;
    let total = g.sum_all(e);
    let p = g.div_by_scalar(e, total)?;
    Ok(g.neg_sum_xlnx(p))
}
