//! Command-line entry point: train, compress, eval, sweep and priors
//! subcommands over flat key=value configs with flag overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use sbc::compress::{
    assign_bits, compress_model, compression_metrics, dense_forward_dequantized,
    export_compressed, import_compressed, prune, sweep_curve, PruneThresholds,
};
use sbc::data::{load_mnist_idx, synth_classification, Dataset};
use sbc::error::SbcError;
use sbc::model::{Arch, Model};
use sbc::priors::{prior_logpdf, profile_grid, PriorMixtureSpec};
use sbc::train::{evaluate, train, Optimizer, TrainConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_EMPTY_LAYER: u8 = 4;

#[derive(Parser)]
#[command(
    name = "sbc",
    about = "Structured Bayesian compression of small neural networks",
    version
)]
struct Cli {
    /// Suppress progress diagnostics; stdout carries data only.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.json plus history.csv.
    Train {
        /// Flat key=value config file; flags below override its entries.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Architecture: lenet300, lenet5 or synthconv.
        #[arg(long)]
        arch: Option<String>,
        /// Dataset directory with MNIST IDX files (defaults to $SBC_DATA_DIR).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// sgd or adam.
        #[arg(long)]
        optimizer: Option<String>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// KL scale N; 0 means the training-set size.
        #[arg(long)]
        kl_scale_n: Option<usize>,
        #[arg(long)]
        kl_weight: Option<f64>,
        #[arg(long)]
        lambda_cluster: Option<f64>,
        #[arg(long)]
        lambda_skew: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Prune after this many epochs and fine-tune the survivors.
        #[arg(long)]
        prune_epoch: Option<usize>,
        #[arg(long)]
        group_tau: Option<f64>,
        #[arg(long)]
        weight_tau: Option<f64>,
        #[arg(long)]
        use_blocks: Option<bool>,
        #[arg(long)]
        scale_center: Option<f64>,
        /// Checkpoint to continue from.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        /// Class count for the synthconv architecture.
        #[arg(long)]
        classes: Option<usize>,
        /// Sample count for the synthetic dataset.
        #[arg(long)]
        synth_n: Option<usize>,
    },
    /// Prune, quantize and export model.sbcm plus report.csv / report.json.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        group_tau: Option<f64>,
        #[arg(long)]
        weight_tau: Option<f64>,
        /// Count per-weight index bits in the compression ratio.
        #[arg(long, default_value_t = true)]
        include_index: bool,
        /// Dataset directory for before/after error columns.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        synth_n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report test error; compressed models also get dense-vs-sparse timing.
    Eval {
        /// checkpoint.json or model.sbcm, chosen by extension.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        synth_n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep group thresholds and write curve.csv.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated group-score thresholds.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        weight_tau: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        synth_n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the prior density-profile CSV.
    Priors {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match &e {
                SbcError::Diverged(_) => EXIT_DIVERGED,
                SbcError::Contract(msg) if msg.contains("survivors") => EXIT_EMPTY_LAYER,
                _ => EXIT_CONFIG,
            };
            ExitCode::from(code)
        }
    }
}

/// Known config-file keys, kept in sync with the train flags.
const CONFIG_KEYS: &[&str] = &[
    "arch",
    "data",
    "out",
    "epochs",
    "batch_size",
    "optimizer",
    "learning_rate",
    "kl_scale_n",
    "kl_weight",
    "lambda_cluster",
    "lambda_skew",
    "seed",
    "prune_epoch",
    "group_tau",
    "weight_tau",
    "use_blocks",
    "scale_center",
    "warm_start",
    "classes",
    "synth_n",
];

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, SbcError> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            SbcError::Config(format!(
                "{}:{}: expected key=value, got {:?}",
                path.display(),
                lineno + 1,
                line
            ))
        })?;
        let k = k.trim();
        if !CONFIG_KEYS.contains(&k) {
            return Err(SbcError::Config(format!(
                "{}:{}: unknown key {:?}",
                path.display(),
                lineno + 1,
                k
            )));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_key<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, SbcError> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.parse::<T>().map(Some).map_err(|_| {
            SbcError::Config(format!("config key {} has unparseable value {:?}", key, v))
        }),
    }
}

fn data_dir(flag: &Option<PathBuf>) -> Result<PathBuf, SbcError> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    if let Ok(p) = std::env::var("SBC_DATA_DIR") {
        return Ok(PathBuf::from(p));
    }
    Err(SbcError::Config(
        "no dataset directory: pass --data or set SBC_DATA_DIR".into(),
    ))
}

fn load_splits(
    arch: Arch,
    data: &Option<PathBuf>,
    classes: usize,
    synth_n: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), SbcError> {
    match arch {
        Arch::SynthConv { .. } => {
            let train = synth_classification(synth_n, classes, 32, seed)?;
            let test = synth_classification(synth_n / 4, classes, 32, seed.wrapping_add(1))?;
            Ok((train, test))
        }
        _ => {
            let dir = data_dir(data)?;
            let train = load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_mnist_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok((train, test))
        }
    }
}

fn reshape_for(arch: Arch, ds: Dataset) -> Result<Dataset, SbcError> {
    let n = ds.len();
    let shape: Vec<usize> = std::iter::once(n).chain(arch.input_shape()).collect();
    Ok(Dataset {
        images: sbc::Tensor::new(shape, ds.images.data)?,
        labels: ds.labels,
        split: ds.split,
    })
}

fn ensure_out(out: &Option<PathBuf>) -> Result<PathBuf, SbcError> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<(), SbcError> {
    let quiet = cli.quiet;
    let log = |msg: &str| {
        if !quiet {
            eprintln!("{}", msg);
        }
    };
    match cli.command {
        Command::Train {
            config,
            arch,
            data,
            out,
            epochs,
            batch_size,
            optimizer,
            learning_rate,
            kl_scale_n,
            kl_weight,
            lambda_cluster,
            lambda_skew,
            seed,
            prune_epoch,
            group_tau,
            weight_tau,
            use_blocks,
            scale_center,
            warm_start,
            classes,
            synth_n,
        } => {
            let file = match &config {
                Some(p) => parse_config_file(p)?,
                None => BTreeMap::new(),
            };
            let arch_str = arch
                .or(file.get("arch").cloned())
                .ok_or_else(|| SbcError::Config("missing --arch (or arch= in config)".into()))?;
            let classes = classes
                .or(parse_key(&file, "classes")?)
                .unwrap_or(4);
            let synth_n = synth_n.or(parse_key(&file, "synth_n")?).unwrap_or(2048);
            let arch = Arch::parse(&arch_str, classes)?;
            let mut cfg = TrainConfig::new(arch);
            if let Some(v) = parse_key(&file, "epochs")? {
                cfg.epochs = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = parse_key(&file, "batch_size")? {
                cfg.batch_size = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            let opt_str: Option<String> = optimizer.or(file.get("optimizer").cloned());
            if let Some(s) = opt_str {
                cfg.optimizer = Optimizer::parse(&s)?;
            }
            if let Some(v) = parse_key(&file, "learning_rate")? {
                cfg.learning_rate = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            let mut n_override: Option<usize> = parse_key(&file, "kl_scale_n")?;
            if kl_scale_n.is_some() {
                n_override = kl_scale_n;
            }
            if let Some(v) = parse_key(&file, "kl_weight")? {
                cfg.kl_weight = v;
            }
            if let Some(v) = kl_weight {
                cfg.kl_weight = v;
            }
            if let Some(v) = parse_key(&file, "lambda_cluster")? {
                cfg.lambda_cluster = v;
            }
            if let Some(v) = lambda_cluster {
                cfg.lambda_cluster = v;
            }
            if let Some(v) = parse_key(&file, "lambda_skew")? {
                cfg.lambda_skew = v;
            }
            if let Some(v) = lambda_skew {
                cfg.lambda_skew = v;
            }
            if let Some(v) = parse_key(&file, "seed")? {
                cfg.seed = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let mut pe: Option<usize> = parse_key(&file, "prune_epoch")?;
            if prune_epoch.is_some() {
                pe = prune_epoch;
            }
            cfg.prune_epoch = pe;
            if let Some(v) = parse_key(&file, "group_tau")? {
                cfg.thresholds.group_tau = v;
            }
            if let Some(v) = group_tau {
                cfg.thresholds.group_tau = v;
            }
            if let Some(v) = parse_key(&file, "weight_tau")? {
                cfg.thresholds.weight_log_alpha_tau = v;
            }
            if let Some(v) = weight_tau {
                cfg.thresholds.weight_log_alpha_tau = v;
            }
            if let Some(v) = parse_key(&file, "use_blocks")? {
                cfg.use_blocks = v;
            }
            if let Some(v) = use_blocks {
                cfg.use_blocks = v;
            }
            if let Some(v) = parse_key(&file, "scale_center")? {
                cfg.scale_center = v;
            }
            if let Some(v) = scale_center {
                cfg.scale_center = v;
            }
            let warm_path: Option<PathBuf> = warm_start
                .or(file.get("warm_start").map(PathBuf::from));
            let data = data.or(file.get("data").map(PathBuf::from));
            let out = out.or(file.get("out").map(PathBuf::from));

            let (train_set, test_set) = load_splits(arch, &data, classes, synth_n, cfg.seed)?;
            let train_set = reshape_for(arch, train_set)?;
            let test_set = reshape_for(arch, test_set)?;
            cfg.kl_scale_n = match n_override {
                Some(0) | None => train_set.len(),
                Some(n) => n,
            };
            cfg.validate()?;

            let warm = match &warm_path {
                Some(p) => Some(Model::load(p)?),
                None => None,
            };
            let out_dir = ensure_out(&out)?;
            write_resolved_config(&out_dir, &cfg, &data, classes, synth_n)?;
            log(&format!(
                "training {:?}: {} epochs, batch {}, N={}, seed {}",
                arch_str, cfg.epochs, cfg.batch_size, cfg.kl_scale_n, cfg.seed
            ));
            let started = Instant::now();
            let (model, history) = train(&cfg, &train_set, Some(&test_set), warm)?;
            model.save(&out_dir.join("checkpoint.json"))?;
            fs::write(out_dir.join("history.csv"), history.to_csv())?;
            let err = history
                .records
                .last()
                .and_then(|r| r.test_error)
                .map(|e| format!("{:.2}", e))
                .unwrap_or_else(|| "n/a".into());
            log(&format!(
                "done in {:.1}s, final test error {}%",
                started.elapsed().as_secs_f64(),
                err
            ));
            println!("test_error_percent={}", err);
            Ok(())
        }
        Command::Compress {
            checkpoint,
            out,
            group_tau,
            weight_tau,
            include_index,
            data,
            classes,
            synth_n,
            seed,
        } => {
            let model = Model::load(&checkpoint)?;
            let mut th = PruneThresholds::default();
            if let Some(v) = group_tau {
                th.group_tau = v;
            }
            if let Some(v) = weight_tau {
                th.weight_log_alpha_tau = v;
            }
            let out_dir = ensure_out(&out)?;
            let outcome = prune(&model, &th)?;
            let bits = assign_bits(&outcome.model, &outcome.masks)?;
            let cm = compress_model(&outcome.model, &outcome.masks, &bits)?;
            export_compressed(&cm, &out_dir.join("model.sbcm"))?;
            let mut report =
                compression_metrics(&model, &cm, &outcome.arch_units, include_index)?;
            if data.is_some() || matches!(model.arch, Arch::SynthConv { .. }) {
                let (_, test_set) = load_splits(
                    model.arch,
                    &data,
                    classes.unwrap_or(model.arch.n_classes()),
                    synth_n.unwrap_or(2048),
                    seed.unwrap_or(0),
                )?;
                let test_set = reshape_for(model.arch, test_set)?;
                report.error_before = Some(evaluate(&model, &test_set)?);
                report.error_after = Some(evaluate(&outcome.model, &test_set)?);
            }
            fs::write(out_dir.join("report.csv"), report.to_csv())?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| SbcError::Contract(format!("report encode: {}", e)))?;
            fs::write(out_dir.join("report.json"), json)?;
            log(&format!(
                "arch {:?}, WR {:.2}%, CR {:.1}, bits {:?}",
                report.arch_units, report.wr, report.cr, report.bits
            ));
            println!("wr_percent={:.4}", report.wr);
            println!("cr={:.4}", report.cr);
            Ok(())
        }
        Command::Eval {
            model,
            data,
            classes,
            synth_n,
            seed,
        } => {
            let is_sbcm = model.extension().map(|e| e == "sbcm").unwrap_or(false);
            if is_sbcm {
                let cm = import_compressed(&model)?;
                let (_, test_set) = load_splits(
                    cm.arch,
                    &data,
                    classes.unwrap_or(cm.arch.n_classes()),
                    synth_n.unwrap_or(2048),
                    seed.unwrap_or(0),
                )?;
                let test_set = reshape_for(cm.arch, test_set)?;
                let n = test_set.len();
                let idx: Vec<usize> = (0..n).collect();
                let (x, labels) = test_set.batch(&idx, &cm.arch.input_shape())?;

                let t0 = Instant::now();
                let sparse = sbc::compress::sparse_forward(&cm, &x)?;
                let sparse_s = t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                let dense = dense_forward_dequantized(&cm, &x)?;
                let dense_s = t1.elapsed().as_secs_f64();

                let k = cm.arch.n_classes();
                let count_err = |logits: &sbc::Tensor| {
                    let mut wrong = 0usize;
                    for (s, &label) in labels.iter().enumerate() {
                        let row = &logits.data[s * k..(s + 1) * k];
                        let pred = row
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                            .map(|(i, _)| i)
                            .expect("nonempty");
                        if pred != label {
                            wrong += 1;
                        }
                    }
                    100.0 * wrong as f64 / labels.len() as f64
                };
                let err = count_err(&sparse);
                log(&format!(
                    "sparse {:.4}s, dense {:.4}s, speedup {:.2}x",
                    sparse_s,
                    dense_s,
                    dense_s / sparse_s
                ));
                println!("test_error_percent={:.4}", err);
                println!("sparse_seconds={:.6}", sparse_s);
                println!("dense_seconds={:.6}", dense_s);
                println!("speedup={:.4}", dense_s / sparse_s);
                let _ = count_err(&dense);
            } else {
                let m = Model::load(&model)?;
                let (_, test_set) = load_splits(
                    m.arch,
                    &data,
                    classes.unwrap_or(m.arch.n_classes()),
                    synth_n.unwrap_or(2048),
                    seed.unwrap_or(0),
                )?;
                let test_set = reshape_for(m.arch, test_set)?;
                let err = evaluate(&m, &test_set)?;
                println!("test_error_percent={:.4}", err);
            }
            Ok(())
        }
        Command::Sweep {
            checkpoint,
            grid,
            weight_tau,
            out,
            data,
            classes,
            synth_n,
            seed,
        } => {
            let model = Model::load(&checkpoint)?;
            let taus: Vec<f64> = grid
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| {
                        SbcError::Config(format!("bad grid entry {:?}", s))
                    })
                })
                .collect::<Result<_, _>>()?;
            if taus.is_empty() {
                return Err(SbcError::Config("sweep grid is empty".into()));
            }
            let (_, test_set) = load_splits(
                model.arch,
                &data,
                classes.unwrap_or(model.arch.n_classes()),
                synth_n.unwrap_or(2048),
                seed.unwrap_or(0),
            )?;
            let test_set = reshape_for(model.arch, test_set)?;
            let wt = weight_tau.unwrap_or(PruneThresholds::default().weight_log_alpha_tau);
            let curve = sweep_curve(&model, &taus, wt, &test_set)?;
            let mut csv = String::from("group_tau,kept_fraction,test_error_percent\n");
            for (i, (frac, err)) in curve.iter().enumerate() {
                csv.push_str(&format!("{},{:.6},{:.4}\n", taus[i], frac, err));
            }
            let out_dir = ensure_out(&out)?;
            fs::write(out_dir.join("curve.csv"), &csv)?;
            log(&format!("{} of {} grid points evaluated", curve.len(), taus.len()));
            Ok(())
        }
        Command::Priors { out } => {
            let spec = PriorMixtureSpec::default_three();
            let grid = profile_grid();
            let mut csv = String::from("w,horseshoe_logpdf,laplace_logpdf,normal_jeffreys_logpdf\n");
            for &w in &grid {
                let cols: Vec<String> = spec
                    .components
                    .iter()
                    .map(|c| format!("{:.8}", prior_logpdf(c, w)))
                    .collect();
                csv.push_str(&format!("{:.10e},{}\n", w, cols.join(",")));
            }
            let out_dir = ensure_out(&out)?;
            fs::write(out_dir.join("priors.csv"), &csv)?;
            log(&format!("{} grid points written", grid.len()));
            Ok(())
        }
    }
}

fn write_resolved_config(
    out_dir: &Path,
    cfg: &TrainConfig,
    data: &Option<PathBuf>,
    classes: usize,
    synth_n: usize,
) -> Result<(), SbcError> {
    let arch = match cfg.arch {
        Arch::Lenet300 => "lenet300",
        Arch::Lenet5 => "lenet5",
        Arch::SynthConv { .. } => "synthconv",
    };
    let opt = match cfg.optimizer {
        Optimizer::Adam => "adam",
        Optimizer::Sgd => "sgd",
    };
    let mut text = String::new();
    text.push_str(&format!("arch={}\n", arch));
    if let Some(d) = data {
        text.push_str(&format!("data={}\n", d.display()));
    }
    text.push_str(&format!("epochs={}\n", cfg.epochs));
    text.push_str(&format!("batch_size={}\n", cfg.batch_size));
    text.push_str(&format!("optimizer={}\n", opt));
    text.push_str(&format!("learning_rate={}\n", cfg.learning_rate));
    text.push_str(&format!("kl_scale_n={}\n", cfg.kl_scale_n));
    text.push_str(&format!("kl_weight={}\n", cfg.kl_weight));
    text.push_str(&format!("lambda_cluster={}\n", cfg.lambda_cluster));
    text.push_str(&format!("lambda_skew={}\n", cfg.lambda_skew));
    text.push_str(&format!("seed={}\n", cfg.seed));
    if let Some(pe) = cfg.prune_epoch {
        text.push_str(&format!("prune_epoch={}\n", pe));
    }
    text.push_str(&format!("group_tau={}\n", cfg.thresholds.group_tau));
    text.push_str(&format!(
        "weight_tau={}\n",
        cfg.thresholds.weight_log_alpha_tau
    ));
    text.push_str(&format!("use_blocks={}\n", cfg.use_blocks));
    text.push_str(&format!("scale_center={}\n", cfg.scale_center));
    if matches!(cfg.arch, Arch::SynthConv { .. }) {
        text.push_str(&format!("classes={}\n", classes));
        text.push_str(&format!("synth_n={}\n", synth_n));
    }
    fs::write(out_dir.join("config.txt"), text)?;
    Ok(())
}
