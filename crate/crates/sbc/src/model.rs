//! Model assembly: the two benchmark architectures plus the synthetic conv
//! net, with shared mixture hyperparameters (Dirichlet alpha through a
//! softplus, global scale through ln tau) and checkpoint serialization.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{make_layout, BlockLayout, DEFAULT_BLOCK_SIZE, DEFAULT_BLOCK_STRIDE};
use crate::error::{Result, SbcError};
use crate::layers::{
    layer_kl_nodes, BayesConv, BayesDense, ForwardMode, LayerKl, LayerNodes, MixtureNodes,
};
use crate::priors::{dirichlet_elogpi_nodes, PriorMixtureSpec};
use crate::tensor::{Graph, NodeId, Tensor};

/// Inverse softplus of 1: alpha_raw init so softplus(raw) = 1 (uniform
/// Dirichlet).
pub const ALPHA_RAW_UNIFORM: f64 = 0.5413248546129181;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// 784-300-100-10 dense net.
    Lenet300,
    /// LeNet-5-Caffe: conv 20@5x5, pool, conv 50@5x5, pool, 800-500-10.
    Lenet5,
    /// Synthetic conv net at 32x32: three 16@3x3 convs, pool, dense 32, classes.
    SynthConv { classes: usize },
}

impl Arch {
    pub fn parse(s: &str, classes: usize) -> Result<Arch> {
        match s {
            "lenet300" => Ok(Arch::Lenet300),
            "lenet5" => Ok(Arch::Lenet5),
            "synthconv" => Ok(Arch::SynthConv { classes }),
            _ => Err(SbcError::Config(format!(
                "unknown architecture {:?} (lenet300, lenet5, synthconv)",
                s
            ))),
        }
    }

    /// Expected input shape excluding the batch axis.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Arch::Lenet300 => vec![784],
            Arch::Lenet5 => vec![1, 28, 28],
            Arch::SynthConv { .. } => vec![1, 32, 32],
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Arch::SynthConv { classes } => *classes,
            _ => 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    Dense(BayesDense),
    Conv(BayesConv),
}

impl Layer {
    pub fn nodes(&self, g: &mut Graph) -> LayerNodes {
        match self {
            Layer::Dense(l) => l.nodes(g),
            Layer::Conv(l) => l.nodes(g),
        }
    }

    pub fn groups(&self) -> Vec<usize> {
        match self {
            Layer::Dense(l) => l.groups(),
            Layer::Conv(l) => l.groups(),
        }
    }

    pub fn n_groups(&self) -> usize {
        match self {
            Layer::Dense(l) => l.n_groups(),
            Layer::Conv(l) => l.n_groups(),
        }
    }

    pub fn group_scores(&self) -> Vec<f64> {
        match self {
            Layer::Dense(l) => l.group_scores(),
            Layer::Conv(l) => l.group_scores(),
        }
    }

    pub fn w_mu(&self) -> &Tensor {
        match self {
            Layer::Dense(l) => &l.w_mu,
            Layer::Conv(l) => &l.w_mu,
        }
    }

    pub fn block_layout(&self) -> Option<&BlockLayout> {
        match self {
            Layer::Dense(l) => l.block_layout.as_ref(),
            Layer::Conv(l) => l.block_layout.as_ref(),
        }
    }

    pub fn n_weights(&self) -> usize {
        self.w_mu().numel()
    }

    fn set_scale_center(&mut self, c: f64) {
        match self {
            Layer::Dense(l) => l.set_scale_center(c),
            Layer::Conv(l) => l.set_scale_center(c),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Layer::Dense(l) => l.validate(),
            Layer::Conv(l) => l.validate(),
        }
    }
}

/// Leaf ids for one model's full parameter set.
pub struct ModelNodes {
    pub layers: Vec<LayerNodes>,
    pub alpha_raw: NodeId,
    pub log_tau: NodeId,
    /// softplus(alpha_raw), kept for reporting.
    pub alpha: NodeId,
    pub elogpi: NodeId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub arch: Arch,
    pub layers: Vec<Layer>,
    pub mixture: PriorMixtureSpec,
    /// Dirichlet concentrations are learned through softplus(alpha_raw).
    pub alpha_raw: Tensor,
    /// ln of the horseshoe global scale tau.
    pub log_tau: Tensor,
}

impl Model {
    pub fn init(arch: Arch, mixture: PriorMixtureSpec, use_blocks: bool, seed: u64) -> Result<Model> {
        mixture.validate()?;
        let layers = match arch {
            Arch::Lenet300 => vec![
                Layer::Dense(BayesDense::init(784, 300, None, seed)?),
                Layer::Dense(BayesDense::init(300, 100, None, seed.wrapping_add(1))?),
                Layer::Dense(BayesDense::init(100, 10, None, seed.wrapping_add(2))?),
            ],
            Arch::Lenet5 => vec![
                Layer::Conv(BayesConv::init(1, 20, 5, 5, 1, None, seed)?),
                Layer::Conv(BayesConv::init(20, 50, 5, 5, 1, None, seed.wrapping_add(1))?),
                Layer::Dense(BayesDense::init(800, 500, None, seed.wrapping_add(2))?),
                Layer::Dense(BayesDense::init(500, 10, None, seed.wrapping_add(3))?),
            ],
            Arch::SynthConv { classes } => {
                if classes < 2 {
                    return Err(SbcError::Config("synthconv needs >= 2 classes".into()));
                }
                vec![
                    Layer::Conv(BayesConv::init(1, 16, 3, 3, 1, None, seed)?),
                    Layer::Conv(BayesConv::init(16, 16, 3, 3, 1, None, seed.wrapping_add(1))?),
                    Layer::Conv(BayesConv::init(16, 16, 3, 3, 1, None, seed.wrapping_add(2))?),
                    Layer::Dense(BayesDense::init(16 * 13 * 13, 32, None, seed.wrapping_add(3))?),
                    Layer::Dense(BayesDense::init(32, classes, None, seed.wrapping_add(4))?),
                ]
            }
        };
        let k = mixture.components.len();
        let mut model = Model {
            arch,
            layers,
            mixture: mixture.clone(),
            alpha_raw: Tensor::full(&[k], ALPHA_RAW_UNIFORM),
            log_tau: Tensor::scalar(mixture.global_sigma.ln()),
        };
        if use_blocks {
            model.attach_block_layouts()?;
        }
        Ok(model)
    }

    /// Attach the default overlapping block layout to every layer that does
    /// not carry one (warm-started models may predate the layouts).
    pub fn attach_block_layouts(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if layer.block_layout().is_some() {
                continue;
            }
            let n = layer.n_weights();
            let b = DEFAULT_BLOCK_SIZE.min(n);
            let s = DEFAULT_BLOCK_STRIDE.min(b);
            let layout = make_layout(n, b, s)?;
            match layer {
                Layer::Dense(l) => l.block_layout = Some(layout),
                Layer::Conv(l) => l.block_layout = Some(layout),
            }
        }
        Ok(())
    }

    /// Re-center every layer's scale posteriors.
    pub fn set_scale_center(&mut self, c: f64) {
        for l in &mut self.layers {
            l.set_scale_center(c);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        if self.alpha_raw.numel() != self.mixture.components.len() {
            return Err(SbcError::Contract(format!(
                "{} alpha_raw entries for {} components",
                self.alpha_raw.numel(),
                self.mixture.components.len()
            )));
        }
        for l in &self.layers {
            l.validate()?;
        }
        Ok(())
    }

    pub fn nodes(&self, g: &mut Graph) -> Result<ModelNodes> {
        let layers = self.layers.iter().map(|l| l.nodes(g)).collect();
        let alpha_raw = g.leaf(self.alpha_raw.clone());
        let log_tau = g.leaf(self.log_tau.clone());
        let alpha = g.softplus(alpha_raw);
        let elogpi = dirichlet_elogpi_nodes(g, alpha)?;
        Ok(ModelNodes {
            layers,
            alpha_raw,
            log_tau,
            alpha,
            elogpi,
        })
    }

    /// Logits for a batch. `x` must be `[batch, 784]` (lenet300) or
    /// `[batch, c, h, w]` for the conv nets.
    pub fn forward(
        &self,
        g: &mut Graph,
        nodes: &ModelNodes,
        x: NodeId,
        mode: ForwardMode,
        seed: u64,
    ) -> Result<NodeId> {
        let per_layer_seed = |i: usize| seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(i as u64);
        match self.arch {
            Arch::Lenet300 => {
                let mut h = x;
                for (i, (layer, ln)) in self.layers.iter().zip(&nodes.layers).enumerate() {
                    let d = match layer {
                        Layer::Dense(d) => d,
                        Layer::Conv(_) => unreachable!("lenet300 is all dense"),
                    };
                    h = d.forward(g, ln, h, mode, per_layer_seed(i))?;
                    if i + 1 < self.layers.len() {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
            Arch::Lenet5 => {
                let batch = g.value(x).shape[0];
                let conv = |g: &mut Graph, l: &Layer, ln: &LayerNodes, h, i: usize| match l {
                    Layer::Conv(c) => c.forward(g, ln, h, mode, per_layer_seed(i)),
                    Layer::Dense(_) => unreachable!(),
                };
                let mut h = conv(g, &self.layers[0], &nodes.layers[0], x, 0)?;
                h = g.relu(h);
                h = g.max_pool2(h)?;
                h = conv(g, &self.layers[1], &nodes.layers[1], h, 1)?;
                h = g.relu(h);
                h = g.max_pool2(h)?;
                h = g.reshape(h, vec![batch, 800])?;
                for i in 2..4 {
                    let d = match &self.layers[i] {
                        Layer::Dense(d) => d,
                        Layer::Conv(_) => unreachable!(),
                    };
                    h = d.forward(g, &nodes.layers[i], h, mode, per_layer_seed(i))?;
                    if i == 2 {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
            Arch::SynthConv { .. } => {
                let batch = g.value(x).shape[0];
                let mut h = x;
                for i in 0..3 {
                    let c = match &self.layers[i] {
                        Layer::Conv(c) => c,
                        Layer::Dense(_) => unreachable!(),
                    };
                    h = c.forward(g, &nodes.layers[i], h, mode, per_layer_seed(i))?;
                    h = g.relu(h);
                }
                h = g.max_pool2(h)?;
                h = g.reshape(h, vec![batch, 16 * 13 * 13])?;
                let d3 = match &self.layers[3] {
                    Layer::Dense(d) => d,
                    Layer::Conv(_) => unreachable!(),
                };
                h = d3.forward(g, &nodes.layers[3], h, mode, per_layer_seed(3))?;
                h = g.relu(h);
                let d4 = match &self.layers[4] {
                    Layer::Dense(d) => d,
                    Layer::Conv(_) => unreachable!(),
                };
                d4.forward(g, &nodes.layers[4], h, mode, per_layer_seed(4))
            }
        }
    }

    /// Total KL across layers plus per-layer detached responsibilities.
    pub fn kl(&self, g: &mut Graph, nodes: &ModelNodes) -> Result<(NodeId, Vec<LayerKl>)> {
        let mn = MixtureNodes {
            elogpi: nodes.elogpi,
            log_tau: nodes.log_tau,
        };
        let mut total: Option<NodeId> = None;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, ln) in self.layers.iter().zip(&nodes.layers) {
            let kl = layer_kl_nodes(g, &self.mixture, &mn, ln, &layer.groups(), layer.n_groups())?;
            total = Some(match total {
                None => kl.node,
                Some(t) => g.add(t, kl.node)?,
            });
            per_layer.push(kl);
        }
        let total = total.ok_or_else(|| SbcError::Contract("model has no layers".into()))?;
        Ok((total, per_layer))
    }

    /// Summed block penalties (cluster, skew) over layers carrying a layout.
    pub fn block_penalties(&self, g: &mut Graph, nodes: &ModelNodes) -> Result<(NodeId, NodeId)> {
        let mut cluster: Option<NodeId> = None;
        let mut skew: Option<NodeId> = None;
        for (layer, ln) in self.layers.iter().zip(&nodes.layers) {
            if let Some(layout) = layer.block_layout() {
                let flat = g.reshape(ln.w_mu, vec![layer.n_weights()])?;
                let c = crate::blocks::cluster_penalty_node(g, flat, layout)?;
                let s = crate::blocks::skew_penalty_node(g, flat, layout)?;
                cluster = Some(match cluster {
                    None => c,
                    Some(t) => g.add(t, c)?,
                });
                skew = Some(match skew {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
        }
        let zero = |g: &mut Graph| g.leaf(Tensor::scalar(0.0));
        Ok((
            cluster.unwrap_or_else(|| zero(g)),
            skew.unwrap_or_else(|| zero(g)),
        ))
    }

    /// Parameter tensors in a fixed traversal order (layers then hypers),
    /// mirrored by `param_nodes`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => out.extend([
                    &d.w_mu,
                    &d.w_logvar,
                    &d.bias_mu,
                    &d.bias_logvar,
                    &d.scale_mu,
                    &d.scale_logvar,
                ]),
                Layer::Conv(c) => out.extend([
                    &c.w_mu,
                    &c.w_logvar,
                    &c.bias_mu,
                    &c.bias_logvar,
                    &c.scale_mu,
                    &c.scale_logvar,
                ]),
            }
        }
        out.push(&self.alpha_raw);
        out.push(&self.log_tau);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => out.extend([
                    &mut d.w_mu,
                    &mut d.w_logvar,
                    &mut d.bias_mu,
                    &mut d.bias_logvar,
                    &mut d.scale_mu,
                    &mut d.scale_logvar,
                ]),
                Layer::Conv(c) => out.extend([
                    &mut c.w_mu,
                    &mut c.w_logvar,
                    &mut c.bias_mu,
                    &mut c.bias_logvar,
                    &mut c.scale_mu,
                    &mut c.scale_logvar,
                ]),
            }
        }
        out.push(&mut self.alpha_raw);
        out.push(&mut self.log_tau);
        out
    }

    /// Node ids in the same order as `params`.
    pub fn param_nodes(nodes: &ModelNodes) -> Vec<NodeId> {
        let mut out = Vec::new();
        for ln in &nodes.layers {
            out.extend([
                ln.w_mu,
                ln.w_logvar,
                ln.bias_mu,
                ln.bias_logvar,
                ln.scale_mu,
                ln.scale_logvar,
            ]);
        }
        out.push(nodes.alpha_raw);
        out.push(nodes.log_tau);
        out
    }

    pub fn n_weights(&self) -> usize {
        self.layers.iter().map(|l| l.n_weights()).sum()
    }

    /// Sync the reportable mixture fields from the learned raw parameters.
    pub fn sync_mixture(&mut self) {
        self.mixture.alpha = self
            .alpha_raw
            .data
            .iter()
            .map(|&r| crate::tensor::softplus(r))
            .collect();
        self.mixture.global_sigma = self.log_tau.item().exp();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| SbcError::Contract(format!("checkpoint encode: {}", e)))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let json = fs::read_to_string(path)?;
        let m: Model = serde_json::from_str(&json).map_err(|e| SbcError::Format {
            msg: format!("checkpoint decode: {}", e),
            offset: 0,
        })?;
        m.validate()?;
        Ok(m)
    }
}
