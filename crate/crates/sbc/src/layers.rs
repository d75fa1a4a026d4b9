//! Variational dense and conv layers: Gaussian weight posteriors, a shared
//! log-normal scale posterior per group (input unit / input feature map), and
//! the local-reparameterization forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::BlockLayout;
use crate::error::{Result, SbcError};
use crate::priors::{
    dirichlet_elogpi_nodes, horseshoe_scale_nodes, kl_jeffreys_nodes, kl_laplace_nodes,
    kl_weight_given_scale_nodes, mixture_responsibilities, PriorKind, PriorMixtureSpec,
};
use crate::tensor::{Graph, NodeId, Tensor};

/// ln(1e-8): weights and biases start almost deterministic.
pub const INIT_LOG_VAR: f64 = -18.420680743952367;

/// Default center of the scale posteriors, ln of the component init scale.
pub const DEFAULT_SCALE_CENTER: f64 = -7.0;

/// Guard in the group-score uncertainty ratio.
pub const SCORE_EPS: f64 = 1e-12;

/// Floor under the pre-activation variance before the square root.
const VAR_FLOOR: f64 = 1e-300;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardMode {
    Stochastic,
    PosteriorMean,
}

/// Variational dense layer. Weights are `[in, out]` row-major; group g owns
/// row g (all outgoing weights of input unit g) and one scale posterior.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BayesDense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w_mu: Tensor,
    pub w_logvar: Tensor,
    pub bias_mu: Tensor,
    pub bias_logvar: Tensor,
    pub scale_mu: Tensor,
    pub scale_logvar: Tensor,
    pub block_layout: Option<BlockLayout>,
}

/// Variational conv layer. Kernels are `[c_out, c_in, kh, kw]`; group g owns
/// every kernel slice reading input feature map g.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BayesConv {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub w_mu: Tensor,
    pub w_logvar: Tensor,
    pub bias_mu: Tensor,
    pub bias_logvar: Tensor,
    pub scale_mu: Tensor,
    pub scale_logvar: Tensor,
    pub block_layout: Option<BlockLayout>,
}

/// Leaf ids for one layer's variational parameters inside a graph.
#[derive(Copy, Clone, Debug)]
pub struct LayerNodes {
    pub w_mu: NodeId,
    pub w_logvar: NodeId,
    pub bias_mu: NodeId,
    pub bias_logvar: NodeId,
    pub scale_mu: NodeId,
    pub scale_logvar: NodeId,
}

/// Shared mixture nodes (one set per model, referenced by every layer's KL).
#[derive(Copy, Clone, Debug)]
pub struct MixtureNodes {
    /// E[ln pi_k] per component, differentiable through alpha.
    pub elogpi: NodeId,
    /// Learnable ln tau for the horseshoe's global scale.
    pub log_tau: NodeId,
}

/// KL node plus the detached per-group responsibilities `[group][component]`.
#[derive(Clone, Debug)]
pub struct LayerKl {
    pub node: NodeId,
    pub responsibilities: Vec<Vec<f64>>,
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

fn check_warm(shape: &[usize], warm: &Tensor) -> Result<()> {
    if warm.shape != shape {
        return Err(SbcError::Shape(format!(
            "warm start shape {:?}, layer expects {:?}",
            warm.shape, shape
        )));
    }
    Ok(())
}

impl BayesDense {
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        warm_start: Option<&Tensor>,
        seed: u64,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(SbcError::Shape("dense layer with zero dimension".into()));
        }
        let shape = [in_dim, out_dim];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_mu = match warm_start {
            Some(w) => {
                check_warm(&shape, w)?;
                w.clone()
            }
            None => he_tensor(&shape, in_dim, &mut rng),
        };
        Ok(BayesDense {
            in_dim,
            out_dim,
            w_mu,
            w_logvar: Tensor::full(&shape, INIT_LOG_VAR),
            bias_mu: Tensor::zeros(&[out_dim]),
            bias_logvar: Tensor::full(&[out_dim], INIT_LOG_VAR),
            scale_mu: Tensor::full(&[in_dim], DEFAULT_SCALE_CENTER),
            scale_logvar: Tensor::full(&[in_dim], INIT_LOG_VAR),
            block_layout: None,
        })
    }

    /// Re-center all scale posteriors (ln z means).
    pub fn set_scale_center(&mut self, c: f64) {
        self.scale_mu.data.iter_mut().for_each(|v| *v = c);
    }

    pub fn validate(&self) -> Result<()> {
        validate_layer(
            &[
                (&self.w_mu, &[self.in_dim, self.out_dim][..]),
                (&self.w_logvar, &[self.in_dim, self.out_dim]),
                (&self.bias_mu, &[self.out_dim]),
                (&self.bias_logvar, &[self.out_dim]),
                (&self.scale_mu, &[self.in_dim]),
                (&self.scale_logvar, &[self.in_dim]),
            ],
            &[&self.w_logvar, &self.bias_logvar, &self.scale_logvar],
        )
    }

    pub fn nodes(&self, g: &mut Graph) -> LayerNodes {
        insert_nodes(
            g,
            &self.w_mu,
            &self.w_logvar,
            &self.bias_mu,
            &self.bias_logvar,
            &self.scale_mu,
            &self.scale_logvar,
        )
    }

    /// Group index of each flattened weight: row-major, so element `i` belongs
    /// to input unit `i / out_dim`.
    pub fn groups(&self) -> Vec<usize> {
        (0..self.in_dim * self.out_dim)
            .map(|i| i / self.out_dim)
            .collect()
    }

    pub fn n_groups(&self) -> usize {
        self.in_dim
    }

    /// `x: [batch, in]` -> `[batch, out]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        n: &LayerNodes,
        x: NodeId,
        mode: ForwardMode,
        seed: u64,
    ) -> Result<NodeId> {
        let sx = g.value(x).shape.clone();
        if sx.len() != 2 || sx[1] != self.in_dim {
            return Err(SbcError::Shape(format!(
                "dense forward expects [batch, {}], got {:?}",
                self.in_dim, sx
            )));
        }
        let (ez, ez2, varz) = scale_moments(g, n)?;
        let xz = g.mul_bcast_last(x, ez)?;
        let m = g.matmul(xz, n.w_mu)?;
        let m = g.add_bcast_last(m, n.bias_mu)?;
        match mode {
            ForwardMode::PosteriorMean => Ok(m),
            ForwardMode::Stochastic => {
                let x2 = g.square(x);
                let sigw2 = g.exp(n.w_logvar);
                let wmu2 = g.square(n.w_mu);
                // E[z^2] and Var[z] attach to the contraction axis, so they
                // move onto x^2 before the matmul.
                let xa = g.mul_bcast_last(x2, ez2)?;
                let v1 = g.matmul(xa, sigw2)?;
                let xb = g.mul_bcast_last(x2, varz)?;
                let v2 = g.matmul(xb, wmu2)?;
                let v = g.add(v1, v2)?;
                let bvar = g.exp(n.bias_logvar);
                let v = g.add_bcast_last(v, bvar)?;
                let v = g.add_scalar(v, VAR_FLOOR);
                let std = g.sqrt(v);
                let shape = g.value(m).shape.clone();
                let xi = g.leaf(noise_tensor(&shape, seed));
                let noise = g.mul(std, xi)?;
                g.add(m, noise)
            }
        }
    }

    pub fn kl(&self, mixture: &PriorMixtureSpec) -> Result<(f64, Vec<Vec<f64>>)> {
        standalone_kl(mixture, |g| self.nodes(g), &self.groups(), self.n_groups())
    }

    pub fn group_scores(&self) -> Vec<f64> {
        group_scores(
            &self.scale_mu.data,
            &self.w_mu.data,
            &self.w_logvar.data,
            &self.groups(),
            self.n_groups(),
        )
    }
}

impl BayesConv {
    pub fn init(
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        warm_start: Option<&Tensor>,
        seed: u64,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kh == 0 || kw == 0 {
            return Err(SbcError::Shape("conv layer with zero dimension".into()));
        }
        if stride == 0 {
            return Err(SbcError::Domain("conv stride must be >= 1".into()));
        }
        let shape = [c_out, c_in, kh, kw];
        let fan_in = c_in * kh * kw;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_mu = match warm_start {
            Some(w) => {
                check_warm(&shape, w)?;
                w.clone()
            }
            None => he_tensor(&shape, fan_in, &mut rng),
        };
        Ok(BayesConv {
            c_in,
            c_out,
            kh,
            kw,
            stride,
            w_mu,
            w_logvar: Tensor::full(&shape, INIT_LOG_VAR),
            bias_mu: Tensor::zeros(&[c_out]),
            bias_logvar: Tensor::full(&[c_out], INIT_LOG_VAR),
            scale_mu: Tensor::full(&[c_in], DEFAULT_SCALE_CENTER),
            scale_logvar: Tensor::full(&[c_in], INIT_LOG_VAR),
            block_layout: None,
        })
    }

    pub fn set_scale_center(&mut self, c: f64) {
        self.scale_mu.data.iter_mut().for_each(|v| *v = c);
    }

    pub fn validate(&self) -> Result<()> {
        validate_layer(
            &[
                (&self.w_mu, &[self.c_out, self.c_in, self.kh, self.kw][..]),
                (&self.w_logvar, &[self.c_out, self.c_in, self.kh, self.kw]),
                (&self.bias_mu, &[self.c_out]),
                (&self.bias_logvar, &[self.c_out]),
                (&self.scale_mu, &[self.c_in]),
                (&self.scale_logvar, &[self.c_in]),
            ],
            &[&self.w_logvar, &self.bias_logvar, &self.scale_logvar],
        )
    }

    pub fn nodes(&self, g: &mut Graph) -> LayerNodes {
        insert_nodes(
            g,
            &self.w_mu,
            &self.w_logvar,
            &self.bias_mu,
            &self.bias_logvar,
            &self.scale_mu,
            &self.scale_logvar,
        )
    }

    /// Kernel layout is `[c_out, c_in, kh, kw]`, so flattened element `i`
    /// reads input feature map `(i / (kh kw)) mod c_in`.
    pub fn groups(&self) -> Vec<usize> {
        let tap = self.kh * self.kw;
        (0..self.c_out * self.c_in * tap)
            .map(|i| (i / tap) % self.c_in)
            .collect()
    }

    pub fn n_groups(&self) -> usize {
        self.c_in
    }

    /// `x: [batch, c_in, h, w]` -> `[batch, c_out, oh, ow]` (valid padding).
    pub fn forward(
        &self,
        g: &mut Graph,
        n: &LayerNodes,
        x: NodeId,
        mode: ForwardMode,
        seed: u64,
    ) -> Result<NodeId> {
        let sx = g.value(x).shape.clone();
        if sx.len() != 4 || sx[1] != self.c_in {
            return Err(SbcError::Shape(format!(
                "conv forward expects [batch, {}, h, w], got {:?}",
                self.c_in, sx
            )));
        }
        let (ez, ez2, varz) = scale_moments(g, n)?;
        let xz = g.mul_bcast_chan(x, ez)?;
        let m = g.conv2d(xz, n.w_mu, self.stride)?;
        let m = g.add_bcast_chan(m, n.bias_mu)?;
        match mode {
            ForwardMode::PosteriorMean => Ok(m),
            ForwardMode::Stochastic => {
                let x2 = g.square(x);
                let sigw2 = g.exp(n.w_logvar);
                let wmu2 = g.square(n.w_mu);
                let xa = g.mul_bcast_chan(x2, ez2)?;
                let v1 = g.conv2d(xa, sigw2, self.stride)?;
                let xb = g.mul_bcast_chan(x2, varz)?;
                let v2 = g.conv2d(xb, wmu2, self.stride)?;
                let v = g.add(v1, v2)?;
                let bvar = g.exp(n.bias_logvar);
                let v = g.add_bcast_chan(v, bvar)?;
                let v = g.add_scalar(v, VAR_FLOOR);
                let std = g.sqrt(v);
                let shape = g.value(m).shape.clone();
                let xi = g.leaf(noise_tensor(&shape, seed));
                let noise = g.mul(std, xi)?;
                g.add(m, noise)
            }
        }
    }

    pub fn kl(&self, mixture: &PriorMixtureSpec) -> Result<(f64, Vec<Vec<f64>>)> {
        standalone_kl(mixture, |g| self.nodes(g), &self.groups(), self.n_groups())
    }

    pub fn group_scores(&self) -> Vec<f64> {
        group_scores(
            &self.scale_mu.data,
            &self.w_mu.data,
            &self.w_logvar.data,
            &self.groups(),
            self.n_groups(),
        )
    }
}

fn validate_layer(shapes: &[(&Tensor, &[usize])], logvars: &[&Tensor]) -> Result<()> {
    for (t, want) in shapes {
        if t.shape != *want {
            return Err(SbcError::Shape(format!(
                "parameter shape {:?}, expected {:?}",
                t.shape, want
            )));
        }
    }
    for t in logvars {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(SbcError::Domain("non-finite log-variance".into()));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn insert_nodes(
    g: &mut Graph,
    w_mu: &Tensor,
    w_logvar: &Tensor,
    bias_mu: &Tensor,
    bias_logvar: &Tensor,
    scale_mu: &Tensor,
    scale_logvar: &Tensor,
) -> LayerNodes {
    LayerNodes {
        w_mu: g.leaf(w_mu.clone()),
        w_logvar: g.leaf(w_logvar.clone()),
        bias_mu: g.leaf(bias_mu.clone()),
        bias_logvar: g.leaf(bias_logvar.clone()),
        scale_mu: g.leaf(scale_mu.clone()),
        scale_logvar: g.leaf(scale_logvar.clone()),
    }
}

/// E[z], E[z^2], Var[z] per group for log-normal z (posterior over ln z).
fn scale_moments(g: &mut Graph, n: &LayerNodes) -> Result<(NodeId, NodeId, NodeId)> {
    let v = g.exp(n.scale_logvar);
    let half_v = g.scale(v, 0.5);
    let a = g.add(n.scale_mu, half_v)?;
    let ez = g.exp(a);
    let two_mu = g.scale(n.scale_mu, 2.0);
    let two_v = g.scale(v, 2.0);
    let b = g.add(two_mu, two_v)?;
    let ez2 = g.exp(b);
    let ez_sq = g.square(ez);
    let varz = g.sub(ez2, ez_sq)?;
    Ok((ez, ez2, varz))
}

fn noise_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Evaluate a layer's KL in a throwaway graph, with alpha / ln tau leaves
/// taken from the mixture spec's current values.
fn standalone_kl(
    mixture: &PriorMixtureSpec,
    insert: impl FnOnce(&mut Graph) -> LayerNodes,
    groups: &[usize],
    n_groups: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    mixture.validate()?;
    let mut g = Graph::new();
    let alpha = g.leaf(Tensor::new(vec![mixture.alpha.len()], mixture.alpha.clone())?);
    let elogpi = dirichlet_elogpi_nodes(&mut g, alpha)?;
    let log_tau = g.leaf(Tensor::scalar(mixture.global_sigma.ln()));
    let mn = MixtureNodes { elogpi, log_tau };
    let nodes = insert(&mut g);
    let kl = layer_kl_nodes(&mut g, mixture, &mn, &nodes, groups, n_groups)?;
    Ok((g.value(kl.node).item(), kl.responsibilities))
}

/// KL of one layer against the mixture prior, as a graph node.
///
/// Per group: per-component KLs summed over the group's weights, combined by
/// the convexity bound with detached responsibilities; the horseshoe's scale
/// auxiliary KL and the bias KL (standard-normal prior) are added outside the
/// mixture.
pub fn layer_kl_nodes(
    g: &mut Graph,
    mixture: &PriorMixtureSpec,
    mn: &MixtureNodes,
    nodes: &LayerNodes,
    groups: &[usize],
    n_groups: usize,
) -> Result<LayerKl> {
    mixture.validate()?;
    let k = mixture.components.len();
    let mut per_comp: Vec<NodeId> = Vec::with_capacity(k);
    let mut aux: Option<NodeId> = None;
    for comp in &mixture.components {
        let kl_g = match comp.kind {
            PriorKind::Laplace => {
                let e = kl_laplace_nodes(g, nodes.w_mu, nodes.w_logvar, comp.scale_hyper)?;
                g.sum_groups(e, groups, n_groups)?
            }
            PriorKind::NormalJeffreys => {
                let e = kl_jeffreys_nodes(g, nodes.w_mu, nodes.w_logvar)?;
                g.sum_groups(e, groups, n_groups)?
            }
            PriorKind::Horseshoe => {
                let (kl_aux, e_ln_z2, e_inv_z2) =
                    horseshoe_scale_nodes(g, nodes.scale_mu, nodes.scale_logvar, mn.log_tau)?;
                aux = Some(kl_aux);
                let w_shape = g.value(nodes.w_mu).shape.clone();
                let el = g.expand_groups(e_ln_z2, groups)?;
                let el = g.reshape(el, w_shape.clone())?;
                let ei = g.expand_groups(e_inv_z2, groups)?;
                let ei = g.reshape(ei, w_shape)?;
                let e = kl_weight_given_scale_nodes(g, nodes.w_mu, nodes.w_logvar, el, ei)?;
                g.sum_groups(e, groups, n_groups)?
            }
        };
        per_comp.push(kl_g);
    }

    let elogpi_vals = g.value(mn.elogpi).data.clone();
    if elogpi_vals.len() != k {
        return Err(SbcError::Contract(format!(
            "{} E[ln pi] values for {} components",
            elogpi_vals.len(),
            k
        )));
    }
    let kl_vals: Vec<Vec<f64>> = per_comp.iter().map(|&n| g.value(n).data.clone()).collect();
    let mut responsibilities = Vec::with_capacity(n_groups);
    for grp in 0..n_groups {
        let kls: Vec<f64> = (0..k).map(|c| kl_vals[c][grp]).collect();
        responsibilities.push(mixture_responsibilities(&kls, &elogpi_vals));
    }

    // bound = sum_gk r_gk (KL_gk - E[ln pi_k] + ln r_gk), with r detached
    let mut total: Option<NodeId> = None;
    let mut entropy_const = 0.0;
    for c in 0..k {
        let r_col: Vec<f64> = responsibilities.iter().map(|r| r[c]).collect();
        let r_sum: f64 = r_col.iter().sum();
        entropy_const += r_col
            .iter()
            .map(|&r| if r > 0.0 { r * r.ln() } else { 0.0 })
            .sum::<f64>();
        let r_leaf = g.leaf(Tensor::new(vec![n_groups], r_col)?);
        let weighted = g.mul(per_comp[c], r_leaf)?;
        let s = g.sum_all(weighted);
        let lp = g.index(mn.elogpi, c)?;
        let lp_term = g.scale(lp, -r_sum);
        let s = g.add(s, lp_term)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let mut total = total.expect("mixture has at least one component");
    let ent = g.leaf(Tensor::scalar(entropy_const));
    total = g.add(total, ent)?;

    if let Some(kl_aux) = aux {
        let s = g.sum_all(kl_aux);
        total = g.add(total, s)?;
    }

    // biases: KL(N(mu, sigma^2) || N(0,1)) = (mu^2 + sigma^2 - logvar - 1)/2
    let bmu2 = g.square(nodes.bias_mu);
    let bvar = g.exp(nodes.bias_logvar);
    let s = g.add(bmu2, bvar)?;
    let s = g.sub(s, nodes.bias_logvar)?;
    let s = g.add_scalar(s, -1.0);
    let s = g.scale(s, 0.5);
    let s = g.sum_all(s);
    total = g.add(total, s)?;

    Ok(LayerKl {
        node: total,
        responsibilities,
    })
}

/// Per-group keep statistic: E[ln z_g] minus half the worst log
/// uncertainty-to-signal ratio in the group. Larger means more alive.
/// Exactly-zero means are treated as already pruned: they are skipped, and a
/// group with no nonzero mean scores -inf.
pub fn group_scores(
    scale_mu: &[f64],
    w_mu: &[f64],
    w_logvar: &[f64],
    groups: &[usize],
    n_groups: usize,
) -> Vec<f64> {
    let mut worst = vec![f64::NEG_INFINITY; n_groups];
    let mut alive = vec![false; n_groups];
    for (i, &grp) in groups.iter().enumerate() {
        let mu2 = w_mu[i] * w_mu[i];
        if mu2 == 0.0 {
            continue;
        }
        alive[grp] = true;
        let l = (w_logvar[i].exp() / mu2 + SCORE_EPS).ln();
        if l > worst[grp] {
            worst[grp] = l;
        }
    }
    (0..n_groups)
        .map(|grp| {
            if alive[grp] {
                scale_mu[grp] - 0.5 * worst[grp]
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}
