//! Scale-mixture-of-normals shrinkage priors, their KL terms against Gaussian
//! variational posteriors, and the learnable Dirichlet mixture combining them.
//!
//! Three components are trainable: horseshoe (half-Cauchy scales, handled via
//! a Gamma/Inverse-Gamma auxiliary decomposition with log-normal variational
//! posteriors), Laplace (closed-form KL), and normal-Jeffreys (log-uniform,
//! smooth sigmoid-polynomial approximation of the log-alpha regularizer).
//!
//! KL builders come in two forms: graph builders over tensors of variational
//! parameters (the path training differentiates through) and scalar
//! conveniences that run a one-element graph, so tests exercise the real
//! implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SbcError};
use crate::tensor::{Graph, NodeId, Tensor};

/// Constants of the smooth approximation to the normal-Jeffreys KL, from the
/// sparse variational dropout literature.
pub const JEFFREYS_K1: f64 = 0.63576;
pub const JEFFREYS_K2: f64 = 1.87320;
pub const JEFFREYS_K3: f64 = 1.48695;

/// Guard added to mu^2 when forming log alpha; keeps mu = 0 on the
/// "fully uncertain, zero regularizer" branch.
const LOG_ALPHA_GUARD: f64 = 1e-100;

/// Default component scale, below e^-6 to pressure weights toward zero.
pub const DEFAULT_COMPONENT_SCALE: f64 = 9.118819655545162e-4; // e^-7

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorKind {
    Horseshoe,
    Laplace,
    NormalJeffreys,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorComponent {
    pub kind: PriorKind,
    /// tau for the horseshoe, b for Laplace; unused for normal-Jeffreys.
    pub scale_hyper: f64,
}

impl PriorComponent {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PriorKind::NormalJeffreys => Ok(()),
            _ if self.scale_hyper > 0.0 => Ok(()),
            _ => Err(SbcError::Domain(format!(
                "{:?} scale hyperparameter must be positive, got {}",
                self.kind, self.scale_hyper
            ))),
        }
    }
}

/// The mixture prior: ordered components, Dirichlet concentration per
/// component, and the horseshoe's learnable global scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorMixtureSpec {
    pub components: Vec<PriorComponent>,
    pub alpha: Vec<f64>,
    pub global_sigma: f64,
}

impl PriorMixtureSpec {
    /// The three-component default: horseshoe, Laplace, normal-Jeffreys with
    /// scales e^-7 and a uniform Dirichlet.
    pub fn default_three() -> Self {
        PriorMixtureSpec {
            components: vec![
                PriorComponent {
                    kind: PriorKind::Horseshoe,
                    scale_hyper: DEFAULT_COMPONENT_SCALE,
                },
                PriorComponent {
                    kind: PriorKind::Laplace,
                    scale_hyper: DEFAULT_COMPONENT_SCALE,
                },
                PriorComponent {
                    kind: PriorKind::NormalJeffreys,
                    scale_hyper: 0.0,
                },
            ],
            alpha: vec![1.0, 1.0, 1.0],
            global_sigma: DEFAULT_COMPONENT_SCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(SbcError::Domain("mixture needs at least one component".into()));
        }
        if self.alpha.len() != self.components.len() {
            return Err(SbcError::Domain(format!(
                "{} alpha values for {} components",
                self.alpha.len(),
                self.components.len()
            )));
        }
        for (i, c) in self.components.iter().enumerate() {
            c.validate()?;
            for d in &self.components[i + 1..] {
                if d.kind == c.kind {
                    return Err(SbcError::Domain(format!(
                        "duplicate component kind {:?}",
                        c.kind
                    )));
                }
            }
        }
        if self.alpha.iter().any(|&a| a <= 0.0) {
            return Err(SbcError::Domain("Dirichlet alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Variational Gaussian over one weight.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: f64,
    pub log_var: f64,
}

// ---------------------------------------------------------------------------
// Graph builders (elementwise over tensors of variational parameters)
// ---------------------------------------------------------------------------

/// Elementwise KL( N(mu, sigma^2) || Laplace(0, b) ).
pub fn kl_laplace_nodes(g: &mut Graph, mu: NodeId, log_var: NodeId, b: f64) -> Result<NodeId> {
    if b <= 0.0 {
        return Err(SbcError::Domain(format!("Laplace scale must be positive, got {}", b)));
    }
    let sigma = {
        let h = g.scale(log_var, 0.5);
        g.exp(h)
    };
    let mu2 = g.square(mu);
    let sig2 = g.exp(log_var);
    // E|w| = sigma sqrt(2/pi) exp(-mu^2 / 2 sigma^2) + mu erf(mu / (sigma sqrt 2))
    let ratio = g.div(mu2, sig2)?;
    let expterm = {
        let h = g.scale(ratio, -0.5);
        g.exp(h)
    };
    let t1 = {
        let h = g.mul(sigma, expterm)?;
        g.scale(h, (2.0 / std::f64::consts::PI).sqrt())
    };
    let erfarg = {
        let denom = g.scale(sigma, std::f64::consts::SQRT_2);
        g.div(mu, denom)?
    };
    let t2 = {
        let e = g.erf(erfarg);
        g.mul(mu, e)?
    };
    let e_abs = g.add(t1, t2)?;
    // -1/2 log var + E|w|/b + ln(2b) - 1/2 ln(2 pi) - 1/2
    let c = (2.0 * b).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5;
    let t3 = g.scale(e_abs, 1.0 / b);
    let t4 = g.scale(log_var, -0.5);
    let s = g.add(t3, t4)?;
    Ok(g.add_scalar(s, c))
}

/// Elementwise normal-Jeffreys regularizer as a function of
/// log alpha = log_var - ln(mu^2). Zero in the alpha -> infinity limit,
/// monotone decreasing in alpha.
pub fn kl_jeffreys_nodes(g: &mut Graph, mu: NodeId, log_var: NodeId) -> Result<NodeId> {
    let mu2 = g.square(mu);
    let guarded = g.add_scalar(mu2, LOG_ALPHA_GUARD);
    let ln_mu2 = g.ln(guarded);
    let log_alpha = g.sub(log_var, ln_mu2)?;
    kl_jeffreys_from_log_alpha(g, log_alpha)
}

pub fn kl_jeffreys_from_log_alpha(g: &mut Graph, log_alpha: NodeId) -> Result<NodeId> {
    // k1 (1 - sigmoid(k2 + k3 la)) + 1/2 softplus(-la)
    let s = {
        let h = g.scale(log_alpha, JEFFREYS_K3);
        let h = g.add_scalar(h, JEFFREYS_K2);
        g.sigmoid(h)
    };
    let t1 = {
        let h = g.neg(s);
        let h = g.add_scalar(h, 1.0);
        g.scale(h, JEFFREYS_K1)
    };
    let t2 = {
        let h = g.neg(log_alpha);
        let h = g.softplus(h);
        g.scale(h, 0.5)
    };
    g.add(t1, t2)
}

/// KL of the auxiliary log-normal(m, v) against Gamma(1/2, rate 1/2):
/// -m/2 - ln(v)/2 - 1/2 + exp(m + v/2)/2, elementwise.
fn kl_lognormal_half_gamma(g: &mut Graph, m: NodeId, v: NodeId) -> Result<NodeId> {
    let t1 = g.scale(m, -0.5);
    let t2 = {
        let h = g.ln(v);
        g.scale(h, -0.5)
    };
    let t3 = {
        let h = g.scale(v, 0.5);
        let h = g.add(m, h)?;
        let h = g.exp(h);
        g.scale(h, 0.5)
    };
    let s = g.add(t1, t2)?;
    let s = g.add(s, t3)?;
    Ok(g.add_scalar(s, -0.5))
}

/// Horseshoe KL pieces for a vector of group scales with log-normal
/// posteriors over ln z. Returns (per-group auxiliary KL, per-group
/// E[ln z^2] node, per-group E[1/z^2] node).
///
/// The half-Cauchy C+(0, tau) is decomposed as z^2 = tau^2 a / b with
/// a, b ~ Gamma(1/2, 1/2); the log-normal posterior over z splits evenly
/// into log-normal posteriors over a and b.
pub fn horseshoe_scale_nodes(
    g: &mut Graph,
    scale_mu: NodeId,
    scale_log_var: NodeId,
    log_tau: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let n = g.value(scale_mu).numel();
    let log_tau_vec = g.broadcast_scalar(log_tau, n)?;
    // ln z^2 ~ N(2 scale_mu, 4 exp(scale_log_var))
    let m = g.scale(scale_mu, 2.0);
    let v = {
        let h = g.exp(scale_log_var);
        g.scale(h, 4.0)
    };
    // split: ln a ~ N(ma, va), ln b ~ N(-ma, va), ma = scale_mu - log_tau
    let ma = g.sub(scale_mu, log_tau_vec)?;
    let va = g.scale(v, 0.5);
    let mb = g.neg(ma);
    let kl_a = kl_lognormal_half_gamma(g, ma, va)?;
    let kl_b = kl_lognormal_half_gamma(g, mb, va)?;
    let kl_aux = g.add(kl_a, kl_b)?;
    // E[1/z^2] = exp(-m + v/2)
    let e_inv_z2 = {
        let h = g.scale(v, 0.5);
        let nm = g.neg(m);
        let h = g.add(nm, h)?;
        g.exp(h)
    };
    Ok((kl_aux, m, e_inv_z2))
}

/// Elementwise KL of weight posteriors against N(0, z^2) with the scale
/// uncertainty folded in: -log_var/2 - 1/2 + E[ln z^2]/2
/// + E[1/z^2] (mu^2 + sigma^2) / 2. `e_ln_z2` and `e_inv_z2` must already be
/// expanded to the weight shape.
pub fn kl_weight_given_scale_nodes(
    g: &mut Graph,
    mu: NodeId,
    log_var: NodeId,
    e_ln_z2: NodeId,
    e_inv_z2: NodeId,
) -> Result<NodeId> {
    let t1 = g.scale(log_var, -0.5);
    let t2 = g.scale(e_ln_z2, 0.5);
    let second_moment = {
        let m2 = g.square(mu);
        let s2 = g.exp(log_var);
        g.add(m2, s2)?
    };
    let t3 = {
        let h = g.mul(e_inv_z2, second_moment)?;
        g.scale(h, 0.5)
    };
    let s = g.add(t1, t2)?;
    let s = g.add(s, t3)?;
    Ok(g.add_scalar(s, -0.5))
}

/// E[ln pi_k] = psi(alpha_k) - psi(sum alpha) as a graph node over `alpha`.
pub fn dirichlet_elogpi_nodes(g: &mut Graph, alpha: NodeId) -> Result<NodeId> {
    let n = g.value(alpha).numel();
    if g.value(alpha).data.iter().any(|&a| a <= 0.0) {
        return Err(SbcError::Domain("Dirichlet alpha must be positive".into()));
    }
    let s = g.sum_all(alpha);
    let psi_s = g.digamma(s);
    let psi_s_vec = g.broadcast_scalar(psi_s, n)?;
    let psi_a = g.digamma(alpha);
    g.sub(psi_a, psi_s_vec)
}

// ---------------------------------------------------------------------------
// Scalar conveniences (run the graph builders on one-element tensors)
// ---------------------------------------------------------------------------

fn scalar_eval(
    build: impl FnOnce(&mut Graph, NodeId, NodeId) -> Result<NodeId>,
    mu: f64,
    log_var: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let m = g.leaf(Tensor::scalar(mu));
    let lv = g.leaf(Tensor::scalar(log_var));
    let out = build(&mut g, m, lv)?;
    Ok(g.value(out).item())
}

/// KL( N(mu, sigma^2) || Laplace(0, b) ).
pub fn kl_laplace(q: GaussianPosterior, b: f64) -> Result<f64> {
    scalar_eval(|g, m, lv| kl_laplace_nodes(g, m, lv, b), q.mu, q.log_var)
}

/// Normal-Jeffreys log-alpha regularizer.
pub fn kl_jeffreys(q: GaussianPosterior) -> f64 {
    scalar_eval(kl_jeffreys_nodes, q.mu, q.log_var).expect("jeffreys kl is total")
}

/// Total horseshoe KL for a single weight with its own scale posterior.
/// `q_scale` is the log-normal posterior over ln z; `tau` the global scale.
pub fn kl_horseshoe(q_weight: GaussianPosterior, q_scale: GaussianPosterior, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(SbcError::Domain(format!("tau must be positive, got {}", tau)));
    }
    if !q_weight.log_var.is_finite() || !q_scale.log_var.is_finite() {
        return Err(SbcError::Domain("variational log-variances must be finite".into()));
    }
    let mut g = Graph::new();
    let w_mu = g.leaf(Tensor::scalar(q_weight.mu));
    let w_lv = g.leaf(Tensor::scalar(q_weight.log_var));
    let s_mu = g.leaf(Tensor::scalar(q_scale.mu));
    let s_lv = g.leaf(Tensor::scalar(q_scale.log_var));
    let log_tau = g.leaf(Tensor::scalar(tau.ln()));
    let (kl_aux, e_ln_z2, e_inv_z2) = horseshoe_scale_nodes(&mut g, s_mu, s_lv, log_tau)?;
    let kl_w = kl_weight_given_scale_nodes(&mut g, w_mu, w_lv, e_ln_z2, e_inv_z2)?;
    let total = g.add(kl_aux, kl_w)?;
    Ok(g.value(total).item())
}

/// E[ln pi_k] under Dirichlet(alpha).
pub fn dirichlet_elogpi(alpha: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(vec![alpha.len()], alpha.to_vec())?);
    let out = dirichlet_elogpi_nodes(&mut g, a)?;
    Ok(g.value(out).data.clone())
}

/// Responsibilities r_k minimizing the convexity upper bound on the KL
/// against the mixture: r_k proportional to exp(E[ln pi_k] - KL_k).
pub fn mixture_responsibilities(per_component_kls: &[f64], e_log_pi: &[f64]) -> Vec<f64> {
    debug_assert_eq!(per_component_kls.len(), e_log_pi.len());
    let logits: Vec<f64> = per_component_kls
        .iter()
        .zip(e_log_pi)
        .map(|(&kl, &lp)| lp - kl)
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// The convexity upper bound sum_k r_k (KL_k - E[ln pi_k] + ln r_k), with
/// the 0 ln 0 = 0 convention.
pub fn mixture_kl_bound(per_component_kls: &[f64], r: &[f64], e_log_pi: &[f64]) -> Result<f64> {
    if r.len() != per_component_kls.len() || r.len() != e_log_pi.len() {
        return Err(SbcError::Contract("mixture bound input lengths differ".into()));
    }
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || r.iter().any(|&x| x < 0.0) {
        return Err(SbcError::Contract(format!(
            "responsibilities off the simplex (sum {})",
            sum
        )));
    }
    Ok(r.iter()
        .zip(per_component_kls)
        .zip(e_log_pi)
        .map(|((&rk, &kl), &lp)| {
            if rk > 0.0 {
                rk * (kl - lp + rk.ln())
            } else {
                0.0
            }
        })
        .sum())
}

// ---------------------------------------------------------------------------
// Density profiles (Table-I-style near-zero / tail comparisons)
// ---------------------------------------------------------------------------

/// Marginal log-density of one component at `w`. The horseshoe marginal has
/// no closed form and is integrated numerically over its scale; the
/// normal-Jeffreys profile is the unnormalized log-uniform marginal -ln|w|.
pub fn prior_logpdf(component: &PriorComponent, w: f64) -> f64 {
    match component.kind {
        PriorKind::Laplace => {
            let b = component.scale_hyper;
            -(2.0 * b).ln() - w.abs() / b
        }
        PriorKind::NormalJeffreys => -w.abs().max(1e-300).ln(),
        PriorKind::Horseshoe => horseshoe_marginal_logpdf(w, component.scale_hyper),
    }
}

/// p(w) = int_0^inf N(w; 0, z^2) HC(z; tau) dz via composite Simpson in ln z.
fn horseshoe_marginal_logpdf(w: f64, tau: f64) -> f64 {
    let f = |u: f64| -> f64 {
        let z = u.exp();
        let normal = (-0.5 * (w / z) * (w / z)).exp() / (z * (2.0 * std::f64::consts::PI).sqrt());
        let hc = 2.0 / (std::f64::consts::PI * tau * (1.0 + (z / tau) * (z / tau)));
        normal * hc * z // du jacobian
    };
    // integrate u = ln z over a range wide enough for both the spike near
    // zero and the tau-scaled tail
    let lo = tau.ln().min(w.abs().max(1e-12).ln()) - 30.0;
    let hi = tau.ln().max(w.abs().max(1e-12).ln()) + 20.0;
    let n = 4000; // even
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let c = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += c * f(lo + i as f64 * h);
    }
    (acc * h / 3.0).max(1e-300).ln()
}

/// Kinds profiled for the Table-I-style density CSV: the three trainable
/// components plus spike-free references handled by the same marginal.
pub fn profile_grid() -> Vec<f64> {
    // symmetric log-spaced grid covering [1e-6, 10]
    let mut pos = Vec::new();
    let n = 120;
    for i in 0..=n {
        let e = -6.0 + 7.0 * i as f64 / n as f64;
        pos.push(10f64.powf(e));
    }
    let mut grid: Vec<f64> = pos.iter().rev().map(|&x| -x).collect();
    grid.extend(pos);
    grid
}
