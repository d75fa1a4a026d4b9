//! Objective assembly, Adam/SGD optimization, the training loop with
//! optional epoch-level pruning, and posterior-mean evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compress::{prune, PruneMasks, PruneThresholds};
use crate::data::{batches, Dataset};
use crate::error::{Result, SbcError};
use crate::layers::ForwardMode;
use crate::model::{Layer, Model, ModelNodes};
use crate::priors::PriorMixtureSpec;
use crate::tensor::{Graph, NodeId, Tensor};

const GRAD_CLIP_NORM: f64 = 10.0;
const EVAL_BATCH: usize = 256;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn parse(s: &str) -> Result<Optimizer> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(SbcError::Config(format!(
                "unknown optimizer '{}', expected sgd or adam",
                s
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: crate::model::Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Dataset size N scaling the KL contribution.
    pub kl_scale_n: usize,
    /// Multiplier on the scaled KL term; 0 trains a plain deterministic net.
    pub kl_weight: f64,
    pub lambda_cluster: f64,
    pub lambda_skew: f64,
    pub seed: u64,
    pub prune_epoch: Option<usize>,
    pub thresholds: PruneThresholds,
    pub use_blocks: bool,
    /// Initial center of the group-scale posteriors.
    pub scale_center: f64,
}

impl TrainConfig {
    pub fn new(arch: crate::model::Arch) -> TrainConfig {
        TrainConfig {
            arch,
            epochs: 20,
            batch_size: 128,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            kl_scale_n: 1,
            kl_weight: 1.0,
            lambda_cluster: 0.0,
            lambda_skew: 0.0,
            seed: 0,
            prune_epoch: None,
            thresholds: PruneThresholds::default(),
            use_blocks: false,
            scale_center: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(SbcError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SbcError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.kl_scale_n < 1 {
            return Err(SbcError::Config("kl_scale_N must be >= 1".into()));
        }
        if self.kl_weight < 0.0 || self.lambda_cluster < 0.0 || self.lambda_skew < 0.0 {
            return Err(SbcError::Config("term weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, Serialize)]
pub struct ObjectiveParts {
    pub total: f64,
    pub nll: f64,
    /// Already scaled by kl_weight / N.
    pub kl: f64,
    pub cluster: f64,
    pub skew: f64,
}

/// Build the training graph for one batch and return the loss node together
/// with the component values. `total = nll + kl + cluster + skew` exactly.
pub fn objective(
    model: &Model,
    g: &mut Graph,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    mode: ForwardMode,
    seed: u64,
) -> Result<(ModelNodes, NodeId, ObjectiveParts)> {
    if labels.is_empty() {
        return Err(SbcError::Contract("empty batch".into()));
    }
    let nodes = model.nodes(g)?;
    let x_node = g.leaf(x.clone());
    let logits = model.forward(g, &nodes, x_node, mode, seed)?;
    let nll = g.softmax_xent(logits, labels)?;
    let mut total = nll;
    let kl_val;
    if cfg.kl_weight > 0.0 {
        let (kl, _) = model.kl(g, &nodes)?;
        let scaled = g.scale(kl, cfg.kl_weight / cfg.kl_scale_n as f64);
        total = g.add(total, scaled)?;
        kl_val = g.value(scaled).item();
    } else {
        kl_val = 0.0;
    }
    let (mut cluster_val, mut skew_val) = (0.0, 0.0);
    if cfg.lambda_cluster > 0.0 || cfg.lambda_skew > 0.0 {
        let (c, s) = model.block_penalties(g, &nodes)?;
        let c = g.scale(c, cfg.lambda_cluster);
        let s = g.scale(s, cfg.lambda_skew);
        total = g.add(total, c)?;
        total = g.add(total, s)?;
        cluster_val = g.value(c).item();
        skew_val = g.value(s).item();
    }
    let parts = ObjectiveParts {
        total: g.value(total).item(),
        nll: g.value(nll).item(),
        kl: kl_val,
        cluster: cluster_val,
        skew: skew_val,
    };
    Ok((nodes, total, parts))
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> AdamState {
        Self::new_raw(model.params().iter().map(|p| p.numel()).collect())
    }

    /// State for an arbitrary parameter list given by tensor sizes.
    pub fn new_raw(sizes: Vec<usize>) -> AdamState {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

fn check_finite(grads: &[Vec<f64>]) -> Result<()> {
    for (p, grad) in grads.iter().enumerate() {
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(SbcError::Diverged(format!(
                "non-finite gradient at parameter {} index {}",
                p, i
            )));
        }
    }
    Ok(())
}

/// Standard bias-corrected Adam, beta1 0.9, beta2 0.999, eps 1e-8.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(SbcError::Contract(format!(
            "{} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    check_finite(grads)?;
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.t += 1;
    let c1 = 1.0 - B1.powi(state.t as i32);
    let c2 = 1.0 - B2.powi(state.t as i32);
    for (p, param) in params.iter_mut().enumerate() {
        if param.numel() != grads[p].len() {
            return Err(SbcError::Contract(format!(
                "parameter {}: {} values vs {} gradient entries",
                p,
                param.numel(),
                grads[p].len()
            )));
        }
        for i in 0..grads[p].len() {
            let gv = grads[p][i];
            state.m[p][i] = B1 * state.m[p][i] + (1.0 - B1) * gv;
            state.v[p][i] = B2 * state.v[p][i] + (1.0 - B2) * gv * gv;
            let mhat = state.m[p][i] / c1;
            let vhat = state.v[p][i] / c2;
            param.data[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(SbcError::Contract(format!(
            "{} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    check_finite(grads)?;
    for (p, param) in params.iter_mut().enumerate() {
        for i in 0..grads[p].len() {
            param.data[i] -= lr * grads[p][i];
        }
    }
    Ok(())
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let ss: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = ss.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub cluster: f64,
    pub skew: f64,
    pub test_error: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,nll,kl,cluster,skew,test_error,seconds\n");
        for r in &self.records {
            let te = r
                .test_error
                .map(|v| format!("{:.6}", v))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:.8},{:.8},{:.8},{:.8},{:.8},{},{:.3}\n",
                r.epoch, r.loss, r.nll, r.kl, r.cluster, r.skew, te, r.seconds
            ));
        }
        out
    }
}

fn apply_weight_masks(model: &mut Model, masks: &PruneMasks) {
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let w_mu = match layer {
            Layer::Dense(d) => &mut d.w_mu,
            Layer::Conv(c) => &mut c.w_mu,
        };
        for (i, &keep) in masks.weight_keep[l].iter().enumerate() {
            if !keep {
                w_mu.data[i] = 0.0;
            }
        }
    }
}

/// Run the configured number of epochs over seeded shuffled batches with
/// stochastic forwards. When `prune_epoch` is set, pruning runs after that
/// many epochs and the survivors are fine-tuned with the mask held fixed.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    warm_start: Option<Model>,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(SbcError::Contract("training set is empty".into()));
    }
    let mut model = match warm_start {
        Some(mut m) => {
            if cfg.use_blocks {
                m.attach_block_layouts()?;
            }
            m
        }
        None => {
            let mut m = Model::init(
                cfg.arch,
                PriorMixtureSpec::default_three(),
                cfg.use_blocks,
                cfg.seed,
            )?;
            m.set_scale_center(cfg.scale_center);
            m
        }
    };
    let mode = if cfg.kl_weight > 0.0 {
        ForwardMode::Stochastic
    } else {
        ForwardMode::PosteriorMean
    };
    let input_shape = cfg.arch.input_shape();
    let mut adam = AdamState::new(&model);
    let mut masks: Option<PruneMasks> = None;
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let epoch_seed = cfg
            .seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(epoch as u64);
        let batch_plan = batches(train_set.len(), cfg.batch_size, epoch_seed)?;
        let mut sums = [0.0f64; 5];
        for (b, idx) in batch_plan.iter().enumerate() {
            let (x, labels) = train_set.batch(idx, &input_shape)?;
            let mut g = Graph::new();
            let noise_seed = epoch_seed.wrapping_add((b as u64).wrapping_mul(0x51_7c_c1_b7));
            let (nodes, total, parts) =
                objective(&model, &mut g, &x, &labels, cfg, mode, noise_seed)?;
            if !parts.total.is_finite() {
                return Err(SbcError::Diverged(format!(
                    "loss {} at epoch {} batch {}",
                    parts.total, epoch, b
                )));
            }
            g.backward(total)?;
            let mut grads: Vec<Vec<f64>> = Model::param_nodes(&nodes)
                .into_iter()
                .map(|n| g.grad(n).to_vec())
                .collect();
            clip_global_norm(&mut grads, GRAD_CLIP_NORM);
            {
                let mut params = model.params_mut();
                match cfg.optimizer {
                    Optimizer::Adam => adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?,
                    Optimizer::Sgd => sgd_step(&mut params, &grads, cfg.learning_rate)?,
                }
            }
            if let Some(m) = &masks {
                apply_weight_masks(&mut model, m);
            }
            sums[0] += parts.total;
            sums[1] += parts.nll;
            sums[2] += parts.kl;
            sums[3] += parts.cluster;
            sums[4] += parts.skew;
        }

        if cfg.prune_epoch == Some(epoch + 1) {
            let outcome = prune(&model, &cfg.thresholds)?;
            model = outcome.model;
            masks = Some(outcome.masks);
        }

        let nb = batch_plan.len() as f64;
        let test_error = match test_set {
            Some(ds) => Some(evaluate(&model, ds)?),
            None => None,
        };
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            loss: sums[0] / nb,
            nll: sums[1] / nb,
            kl: sums[2] / nb,
            cluster: sums[3] / nb,
            skew: sums[4] / nb,
            test_error,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    model.sync_mixture();
    Ok((model, history))
}

/// Posterior-mean test error in percent.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(SbcError::Contract("evaluation set is empty".into()));
    }
    let input_shape = model.arch.input_shape();
    let classes = model.arch.n_classes();
    let mut wrong = 0usize;
    let mut pos = 0usize;
    while pos < ds.len() {
        let end = (pos + EVAL_BATCH).min(ds.len());
        let idx: Vec<usize> = (pos..end).collect();
        let (x, labels) = ds.batch(&idx, &input_shape)?;
        let mut g = Graph::new();
        let nodes = model.nodes(&mut g)?;
        let x_node = g.leaf(x);
        let logits = model.forward(&mut g, &nodes, x_node, ForwardMode::PosteriorMean, 0)?;
        let lv = g.value(logits);
        for (s, &label) in labels.iter().enumerate() {
            let row = &lv.data[s * classes..(s + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("nonempty row");
            if pred != label {
                wrong += 1;
            }
        }
        pos = end;
    }
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn flat_dataset(n: usize) -> Dataset {
        let data: Vec<f64> = (0..n * 784).map(|i| (i as f64 * 0.37).sin() * 0.5).collect();
        Dataset {
            images: Tensor::new(vec![n, 784], data).unwrap(),
            labels: (0..n).map(|i| i % 10).collect(),
            split: "train".into(),
        }
    }

    fn base_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new(Arch::Lenet300);
        cfg.epochs = 1;
        cfg.batch_size = 8;
        cfg.kl_scale_n = 16;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn config_validation() {
        let mut cfg = base_cfg();
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(SbcError::Config(_))));
        let mut cfg = base_cfg();
        cfg.learning_rate = 0.0;
        assert!(matches!(cfg.validate(), Err(SbcError::Config(_))));
        let mut cfg = base_cfg();
        cfg.kl_scale_n = 0;
        assert!(matches!(cfg.validate(), Err(SbcError::Config(_))));
        let mut cfg = base_cfg();
        cfg.kl_weight = -1.0;
        assert!(matches!(cfg.validate(), Err(SbcError::Config(_))));
        assert!(base_cfg().validate().is_ok());
        assert!(Optimizer::parse("adam").is_ok());
        assert!(Optimizer::parse("sgd").is_ok());
        assert!(Optimizer::parse("lbfgs").is_err());
    }

    #[test]
    fn objective_components_sum_to_total() {
        let mut model = Model::init(
            Arch::Lenet300,
            PriorMixtureSpec::default_three(),
            true,
            5,
        )
        .unwrap();
        model.set_scale_center(0.0);
        let ds = flat_dataset(8);
        let (x, labels) = ds.batch(&[0, 1, 2, 3, 4, 5, 6, 7], &[784]).unwrap();
        let mut cfg = base_cfg();
        cfg.lambda_cluster = 1e-4;
        cfg.lambda_skew = 1e-4;
        let mut g = Graph::new();
        let (_, total, parts) =
            objective(&model, &mut g, &x, &labels, &cfg, ForwardMode::Stochastic, 42).unwrap();
        let sum = parts.nll + parts.kl + parts.cluster + parts.skew;
        assert!(
            (sum - parts.total).abs() <= 1e-12 * parts.total.abs().max(1.0),
            "{} vs {}",
            sum,
            parts.total
        );
        assert!(parts.kl > 0.0 && parts.cluster > 0.0 && parts.skew > 0.0);
        assert_eq!(parts.total, g.value(total).item());
    }

    #[test]
    fn doubling_n_halves_kl_contribution() {
        let mut model =
            Model::init(Arch::Lenet300, PriorMixtureSpec::default_three(), false, 5).unwrap();
        model.set_scale_center(0.0);
        let ds = flat_dataset(4);
        let (x, labels) = ds.batch(&[0, 1, 2, 3], &[784]).unwrap();
        let mut cfg = base_cfg();
        cfg.kl_scale_n = 1000;
        let mut g = Graph::new();
        let (_, _, p1) =
            objective(&model, &mut g, &x, &labels, &cfg, ForwardMode::Stochastic, 9).unwrap();
        cfg.kl_scale_n = 2000;
        let mut g = Graph::new();
        let (_, _, p2) =
            objective(&model, &mut g, &x, &labels, &cfg, ForwardMode::Stochastic, 9).unwrap();
        assert!((p2.kl - 0.5 * p1.kl).abs() <= 1e-12 * p1.kl.abs());
        assert_eq!(p1.nll, p2.nll);
    }

    #[test]
    fn disabled_priors_give_plain_cross_entropy() {
        let mut model =
            Model::init(Arch::Lenet300, PriorMixtureSpec::default_three(), false, 5).unwrap();
        model.set_scale_center(0.0);
        let ds = flat_dataset(4);
        let (x, labels) = ds.batch(&[0, 1, 2, 3], &[784]).unwrap();
        let mut cfg = base_cfg();
        cfg.kl_weight = 0.0;
        let mut g = Graph::new();
        let (_, _, p) =
            objective(&model, &mut g, &x, &labels, &cfg, ForwardMode::PosteriorMean, 0).unwrap();
        assert_eq!(p.kl, 0.0);
        assert_eq!(p.cluster, 0.0);
        assert_eq!(p.skew, 0.0);
        assert_eq!(p.total, p.nll);
    }

    fn quad_param(v: Vec<f64>) -> Model {
        let mut m = Model::init(Arch::Lenet300, PriorMixtureSpec::default_three(), false, 0)
            .unwrap();
        m.alpha_raw = Tensor::new(vec![v.len()], v).unwrap();
        m
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut model =
            Model::init(Arch::Lenet300, PriorMixtureSpec::default_three(), false, 5).unwrap();
        let before: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        let mut st = AdamState::new(&model);
        {
            let mut params = model.params_mut();
            adam_step(&mut params, &grads, &mut st, 0.1).unwrap();
        }
        for (a, b) in model.params().iter().zip(&before) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn adam_first_step_is_near_lr() {
        let mut t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let grads = vec![vec![0.3, -2.0, 1e-3]];
        let mut st = AdamState {
            m: vec![vec![0.0; 3]],
            v: vec![vec![0.0; 3]],
            t: 0,
        };
        let before = t.data.clone();
        adam_step(&mut [&mut t], &grads, &mut st, 0.01).unwrap();
        for i in 0..3 {
            let step = (t.data[i] - before[i]).abs();
            assert!((step - 0.01).abs() < 1e-6, "coord {}: step {}", i, step);
            assert_eq!((t.data[i] - before[i]).signum(), -grads[0][i].signum());
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(x) = 0.5 sum (x - c)^2, minimizer x = c
        let c = [1.5, -0.25, 4.0, 0.0];
        let mut x = Tensor::new(vec![4], vec![-3.0, 2.0, 0.5, 10.0]).unwrap();
        let mut st = AdamState {
            m: vec![vec![0.0; 4]],
            v: vec![vec![0.0; 4]],
            t: 0,
        };
        for _ in 0..1000 {
            let grads = vec![x.data.iter().zip(&c).map(|(&xi, &ci)| xi - ci).collect()];
            adam_step(&mut [&mut x], &grads, &mut st, 0.05).unwrap();
        }
        for i in 0..4 {
            assert!((x.data[i] - c[i]).abs() < 1e-4, "coord {}: {}", i, x.data[i]);
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let grads = vec![vec![1.0, f64::NAN]];
        let mut st = AdamState {
            m: vec![vec![0.0; 2]],
            v: vec![vec![0.0; 2]],
            t: 0,
        };
        assert!(matches!(
            adam_step(&mut [&mut t], &grads, &mut st, 0.01),
            Err(SbcError::Diverged(_))
        ));
        assert!(matches!(
            sgd_step(&mut [&mut t], &vec![vec![f64::INFINITY, 0.0]], 0.01),
            Err(SbcError::Diverged(_))
        ));
        let _ = quad_param(vec![0.0]);
    }

    #[test]
    fn clip_rescales_to_global_norm() {
        let mut grads = vec![vec![30.0, 0.0], vec![0.0, 40.0]];
        clip_global_norm(&mut grads, 10.0);
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 10.0).abs() < 1e-12);
        assert!((grads[0][0] / grads[1][1] - 0.75).abs() < 1e-12);

        let mut small = vec![vec![1.0, -2.0]];
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small[0], vec![1.0, -2.0]);
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let mut cfg = base_cfg();
        cfg.epochs = 0;
        let ds = flat_dataset(8);
        let (model, history) = train(&cfg, &ds, None, None).unwrap();
        assert!(history.records.is_empty());
        let fresh = {
            let mut m = Model::init(
                cfg.arch,
                PriorMixtureSpec::default_three(),
                false,
                cfg.seed,
            )
            .unwrap();
            m.set_scale_center(cfg.scale_center);
            m.sync_mixture();
            m
        };
        assert_eq!(model.layers[0].w_mu(), fresh.layers[0].w_mu());
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let ds = flat_dataset(16);
        let cfg = base_cfg();
        let (m1, h1) = train(&cfg, &ds, Some(&ds), None).unwrap();
        let (m2, h2) = train(&cfg, &ds, Some(&ds), None).unwrap();
        assert_eq!(h1.records.len(), 1);
        for (a, b) in h1.records.iter().zip(&h2.records) {
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.nll, b.nll);
            assert_eq!(a.kl, b.kl);
            assert_eq!(a.test_error, b.test_error);
        }
        for (a, b) in m1.params().iter().zip(m2.params().iter()) {
            assert_eq!(*a, *b);
        }
        assert!(h1.to_csv().lines().count() == 2);
    }

    fn constant_class_model(class: usize) -> Model {
        let mut m =
            Model::init(Arch::Lenet300, PriorMixtureSpec::default_three(), false, 5).unwrap();
        m.set_scale_center(0.0);
        for layer in &mut m.layers {
            if let Layer::Dense(d) = layer {
                d.w_mu.data.iter_mut().for_each(|v| *v = 0.0);
                d.bias_mu.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        if let Layer::Dense(d) = &mut m.layers[2] {
            d.bias_mu.data[class] = 5.0;
        }
        m
    }

    #[test]
    fn constant_predictor_on_balanced_data_scores_90() {
        let model = constant_class_model(4);
        let mut ds = flat_dataset(20);
        ds.labels = (0..20).map(|i| i % 10).collect();
        let err = evaluate(&model, &ds).unwrap();
        assert_eq!(err, 90.0);
    }

    #[test]
    fn evaluate_matches_hand_counted_confusion() {
        // predictor always says 3; 6 of the 20 labels are 3
        let model = constant_class_model(3);
        let mut ds = flat_dataset(20);
        ds.labels = vec![3, 0, 1, 3, 2, 9, 3, 3, 5, 6, 7, 3, 8, 4, 2, 3, 1, 0, 5, 9];
        let err = evaluate(&model, &ds).unwrap();
        assert_eq!(err, 100.0 * 14.0 / 20.0);
    }

    #[test]
    fn evaluation_is_seed_independent() {
        let ds = flat_dataset(12);
        let model =
            Model::init(Arch::Lenet300, PriorMixtureSpec::default_three(), false, 5).unwrap();
        assert_eq!(evaluate(&model, &ds).unwrap(), evaluate(&model, &ds).unwrap());
    }

    #[test]
    fn nan_weight_aborts_training() {
        let mut warm =
            Model::init(Arch::Lenet300, PriorMixtureSpec::default_three(), false, 5).unwrap();
        if let Layer::Dense(d) = &mut warm.layers[0] {
            d.w_mu.data[0] = f64::NAN;
        }
        let cfg = base_cfg();
        let ds = flat_dataset(8);
        assert!(matches!(
            train(&cfg, &ds, None, Some(warm)),
            Err(SbcError::Diverged(_))
        ));
    }

    #[test]
    fn kl_shrinks_with_weight_magnitudes() {
        let mut a = Model::init(Arch::Lenet300, PriorMixtureSpec::default_three(), false, 5)
            .unwrap();
        a.set_scale_center(0.0);
        let mut b = a.clone();
        for layer in &mut b.layers {
            if let Layer::Dense(d) = layer {
                d.w_mu.data.iter_mut().for_each(|v| *v *= 0.5);
            }
        }
        let kl_of = |m: &Model| {
            let mut g = Graph::new();
            let nodes = m.nodes(&mut g).unwrap();
            let (kl, _) = m.kl(&mut g, &nodes).unwrap();
            g.value(kl).item()
        };
        assert!(kl_of(&b) < kl_of(&a));
    }

    #[test]
    fn disabled_priors_reproduce_plain_training() {
        let ds = flat_dataset(16);
        let mut cfg = base_cfg();
        cfg.kl_weight = 0.0;
        cfg.optimizer = Optimizer::Sgd;
        cfg.learning_rate = 0.05;
        let (trained, _) = train(&cfg, &ds, None, None).unwrap();

        // independent loop over the same graph primitives
        let mut model = Model::init(
            cfg.arch,
            PriorMixtureSpec::default_three(),
            false,
            cfg.seed,
        )
        .unwrap();
        model.set_scale_center(cfg.scale_center);
        let epoch_seed = cfg.seed.wrapping_mul(6364136223846793005);
        for idx in batches(ds.len(), cfg.batch_size, epoch_seed).unwrap() {
            let (x, labels) = ds.batch(&idx, &[784]).unwrap();
            let mut g = Graph::new();
            let mut leaves = Vec::new();
            let mut h = g.leaf(x);
            for (li, layer) in model.layers.iter().enumerate() {
                let d = match layer {
                    Layer::Dense(d) => d,
                    Layer::Conv(_) => unreachable!(),
                };
                let w = g.leaf(d.w_mu.clone());
                let b = g.leaf(d.bias_mu.clone());
                let smu = g.leaf(d.scale_mu.clone());
                let slv = g.leaf(d.scale_logvar.clone());
                leaves.push((w, b, smu, slv));
                let v = g.exp(slv);
                let half = g.scale(v, 0.5);
                let arg = g.add(smu, half).unwrap();
                let ez = g.exp(arg);
                h = g.mul_bcast_last(h, ez).unwrap();
                h = g.matmul(h, w).unwrap();
                h = g.add_bcast_last(h, b).unwrap();
                if li < 2 {
                    h = g.relu(h);
                }
            }
            let loss = g.softmax_xent(h, &labels).unwrap();
            g.backward(loss).unwrap();
            let mut grads: Vec<Vec<f64>> = Vec::new();
            for &(w, b, smu, slv) in &leaves {
                grads.push(g.grad(w).to_vec());
                grads.push(g.grad(b).to_vec());
                grads.push(g.grad(smu).to_vec());
                grads.push(g.grad(slv).to_vec());
            }
            clip_global_norm(&mut grads, GRAD_CLIP_NORM);
            for (li, layer) in model.layers.iter_mut().enumerate() {
                let d = match layer {
                    Layer::Dense(d) => d,
                    Layer::Conv(_) => unreachable!(),
                };
                let gs = &grads[li * 4..li * 4 + 4];
                for (t, gv) in [
                    (&mut d.w_mu, &gs[0]),
                    (&mut d.bias_mu, &gs[1]),
                    (&mut d.scale_mu, &gs[2]),
                    (&mut d.scale_logvar, &gs[3]),
                ] {
                    for i in 0..gv.len() {
                        t.data[i] -= cfg.learning_rate * gv[i];
                    }
                }
            }
        }

        for (lt, lh) in trained.layers.iter().zip(&model.layers) {
            let (dt, dh) = match (lt, lh) {
                (Layer::Dense(a), Layer::Dense(b)) => (a, b),
                _ => unreachable!(),
            };
            assert_eq!(dt.w_mu, dh.w_mu);
            assert_eq!(dt.bias_mu, dh.bias_mu);
            assert_eq!(dt.scale_mu, dh.scale_mu);
            assert_eq!(dt.scale_logvar, dh.scale_logvar);
            // untouched by the gradient-free terms
            assert!((0..dt.w_logvar.numel())
                .all(|i| dt.w_logvar.data[i] == dh.w_logvar.data[i]));
        }
    }
}
