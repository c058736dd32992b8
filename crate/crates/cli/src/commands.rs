use std::io::Write;
use std::path::{Path, PathBuf};

use cbnet::bench::{
    compare, load_model, load_test_set, run_experiment, sweep_loaded, test_hardness, write_reports_csv,
    BenchmarkReport, ExperimentConfig, LoadedModel, ModelVariant,
};
use cbnet::converter::{
    convert, fine_tune_lightweight, label_hardness, train::train_autoencoder_with, AutoencoderConfig,
};
use cbnet::data::{resolve_data_root, HardnessLabels, ImageSet, Split};
use cbnet::early_exit::train::{split_indices, train_joint_with};
use cbnet::early_exit::{classifier_accuracy, exit_profile, exit_statistics, tune_threshold, TrainConfig};
use cbnet::models::{
    build_branchy_lenet, build_converting_autoencoder, build_lenet, build_lightweight, checkpoint_id, load_checkpoint,
    save_checkpoint, AutoencoderProfile, Network,
};
use cbnet::nn::OptimizerConfig;
use cbnet::parallel::default_threads;
use cbnet::{Error, Result, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::{ClassifierKind, Cli, Command, Global, SplitArg, TuneSplit};

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Config file (if any) with global flags applied on top.
fn experiment(g: &Global, model: Option<ModelVariant>) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => {
            let dataset = g.dataset.ok_or_else(|| Error::Config("--dataset or --config is required".into()))?;
            ExperimentConfig::new(dataset, model.unwrap_or(ModelVariant::Cbnet))
        }
    };
    if let Some(d) = g.dataset {
        cfg.dataset = d;
    }
    if let Some(m) = model {
        cfg.model = m;
    }
    if g.data_root.is_some() {
        cfg.data_root = g.data_root.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(a) = &g.artifacts {
        cfg.artifacts = a.clone();
    }
    if g.threshold.is_some() {
        cfg.threshold = g.threshold;
    }
    if let Some(p) = &g.power_preset {
        cfg.power_preset = Some(p.clone());
        cfg.power_params = None;
        cfg.power_trace = None;
    }
    if g.power_trace.is_some() {
        cfg.power_trace = g.power_trace.clone();
    }
    if let Some(r) = g.repeats {
        cfg.repeats = r;
    }
    if g.epochs.is_some() {
        cfg.epochs = g.epochs;
    }
    if g.batch_size.is_some() {
        cfg.batch_size = g.batch_size;
    }
    if g.out.is_some() {
        cfg.output = g.out.clone();
    }
    // Fail on a missing data root before any work.
    cfg.data_root = Some(resolve_data_root(cfg.data_root.as_deref())?);
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<ImageSet> {
    ImageSet::load(cfg.data_root.as_deref().expect("resolved data root"), cfg.dataset, split)
}

fn first_n(set: ImageSet, limit: Option<usize>) -> ImageSet {
    match limit {
        Some(n) if n < set.len() => set.select(&(0..n).collect::<Vec<_>>()),
        _ => set,
    }
}

fn default_validation(n: usize) -> usize {
    if n >= 50_000 {
        5000
    } else {
        n / 10
    }
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Writes to `out` when given, and always prints to stdout.
fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        write_json(value, path)?;
    }
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(Error::Io { path: PathBuf::from("<stdout>"), source: e })
        }
        _ => Ok(()),
    }
}

fn load(path: &Path) -> Result<Network> {
    if !path.is_file() {
        return Err(Error::Config(format!("missing checkpoint {}", path.display())));
    }
    load_checkpoint(path)
}

fn threads(g: &Global) -> usize {
    g.threads.unwrap_or_else(default_threads).max(1)
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::TrainClassifier { kind, limit, validation, patience, lr } => {
            let cfg = experiment(g, None)?;
            let train = first_n(load_split(&cfg, Split::Train)?, limit);
            let mut net = match kind {
                ClassifierKind::Lenet => build_lenet(cfg.seed)?,
                ClassifierKind::Branchynet => build_branchy_lenet(cfg.seed)?,
            };
            net.meta.dataset = Some(cfg.dataset);
            let mut tc = TrainConfig {
                exit_weights: vec![1.0; net.exit_count()],
                seed: cfg.seed,
                validation: validation.unwrap_or_else(|| default_validation(train.len())),
                ..TrainConfig::default()
            };
            if let Some(e) = cfg.epochs {
                tc.epochs = e;
            }
            if let Some(b) = cfg.batch_size {
                tc.batch_size = b;
            }
            if patience.is_some() {
                tc.patience = patience;
            }
            if let Some(lr) = lr {
                tc.optimizer = match tc.optimizer {
                    OptimizerConfig::Sgd { momentum, .. } => OptimizerConfig::Sgd { lr, momentum },
                    OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr, beta1, beta2, eps },
                };
            }
            let report = train_joint_with(&mut net, &train, &tc, |e| {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  val_acc {}  {:.1}s",
                    e.epoch,
                    e.loss,
                    e.val_accuracy.map(|a| format!("{:.4}", a)).unwrap_or_else(|| "-".into()),
                    e.seconds
                );
            })?;
            let paths = cfg.paths();
            let out = g.out.clone().unwrap_or_else(|| match kind {
                ClassifierKind::Lenet => paths.lenet(),
                ClassifierKind::Branchynet => paths.branchy(),
            });
            save_checkpoint(&net, &out)?;
            write_json(&json!({ "config": tc, "report": report }), &out.with_extension("train.json"))?;
            let test = load_split(&cfg, Split::Test)?;
            let accuracy: Vec<f64> = (1..=net.exit_count())
                .map(|e| classifier_accuracy(&net, &test, e, threads(g)))
                .collect::<Result<_>>()?;
            emit(
                &json!({
                    "checkpoint": out,
                    "checkpoint_id": checkpoint_id(&net)?,
                    "best_epoch": report.best_epoch,
                    "epochs_run": report.epochs.len(),
                    "test_accuracy_per_exit": accuracy,
                }),
                None,
            )
        }

        Command::LabelHardness { split, checkpoint } => {
            let cfg = experiment(g, Some(ModelVariant::Branchynet))?;
            let paths = cfg.paths();
            let branchy = load(&checkpoint.unwrap_or_else(|| paths.branchy()))?;
            let set = load_split(&cfg, split.into())?;
            let labels = label_hardness(&branchy, &set, &cfg.policy()?, threads(g))?;
            let out = g.out.clone().unwrap_or_else(|| paths.hardness(split.into()));
            labels.save(&out)?;
            emit(
                &json!({
                    "labels": out,
                    "images": labels.len(),
                    "easy": labels.easy_count(),
                    "easy_fraction": labels.easy_fraction(),
                    "threshold": labels.threshold,
                }),
                None,
            )
        }

        Command::TrainAutoencoder { profile, output_activation, labels, limit, validation, patience } => {
            let cfg = experiment(g, Some(ModelVariant::Cbnet))?;
            let paths = cfg.paths();
            let labels_path = labels.unwrap_or_else(|| paths.hardness(Split::Train));
            if !labels_path.is_file() {
                return Err(Error::Config(format!(
                    "missing hardness labels {} (run label-hardness first)",
                    labels_path.display()
                )));
            }
            let all_labels = HardnessLabels::load(&labels_path)?;
            let train = load_split(&cfg, Split::Train)?;
            if all_labels.len() != train.len() {
                return Err(Error::Config(format!(
                    "{} hardness labels for {} training images",
                    all_labels.len(),
                    train.len()
                )));
            }
            let keep: Vec<usize> = (0..limit.unwrap_or(train.len()).min(train.len())).collect();
            let (train, hardness) = (train.select(&keep), all_labels.select(&keep));
            let profile = match profile {
                Some(name) => AutoencoderProfile::by_name(&name)?,
                None => AutoencoderProfile::for_dataset(cfg.dataset),
            };
            let mut ae = build_converting_autoencoder(&profile, output_activation.into(), cfg.seed)?;
            let mut ac = AutoencoderConfig {
                seed: cfg.seed,
                validation: validation.unwrap_or_else(|| default_validation(train.len())),
                ..AutoencoderConfig::default()
            };
            if let Some(e) = cfg.epochs {
                ac.epochs = e;
            }
            if let Some(b) = cfg.batch_size {
                ac.batch_size = b;
            }
            if patience.is_some() {
                ac.patience = patience;
            }
            let report = train_autoencoder_with(&mut ae, &train, &hardness, &ac, |e| {
                eprintln!(
                    "epoch {:>3}  loss {:.6}  val_mse {}  {:.1}s",
                    e.epoch,
                    e.loss.total,
                    e.val_mse.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
                    e.seconds
                );
            })?;
            let out = g.out.clone().unwrap_or_else(|| paths.autoencoder());
            save_checkpoint(&ae, &out)?;
            write_json(
                &json!({ "config": ac, "epochs": report.epochs, "best_epoch": report.best_epoch }),
                &out.with_extension("train.json"),
            )?;
            emit(
                &json!({
                    "checkpoint": out,
                    "checkpoint_id": checkpoint_id(&ae)?,
                    "best_epoch": report.best_epoch,
                    "epochs_run": report.epochs.len(),
                    "final_loss": report.epochs.last().map(|e| e.loss.total),
                }),
                None,
            )
        }

        Command::ExtractLightweight { checkpoint, fine_tune_epochs } => {
            let cfg = experiment(g, Some(ModelVariant::Cbnet))?;
            let paths = cfg.paths();
            let branchy = load(&checkpoint.unwrap_or_else(|| paths.branchy()))?;
            let mut light = build_lightweight(&branchy)?;
            if fine_tune_epochs > 0 {
                let ae = load(&paths.autoencoder())?;
                let train = load_split(&cfg, Split::Train)?;
                let tc = TrainConfig {
                    epochs: fine_tune_epochs,
                    seed: cfg.seed,
                    batch_size: cfg.batch_size.unwrap_or(128),
                    optimizer: OptimizerConfig::Sgd { lr: 0.001, momentum: 0.9 },
                    ..TrainConfig::default()
                };
                fine_tune_lightweight(&mut light, &ae, &train, &tc, |e| {
                    eprintln!("fine-tune epoch {:>3}  loss {:.5}", e.epoch, e.loss);
                })?;
            }
            let out = g.out.clone().unwrap_or_else(|| paths.lightweight());
            save_checkpoint(&light, &out)?;
            emit(
                &json!({ "checkpoint": out, "checkpoint_id": checkpoint_id(&light)?, "fine_tuned": light.meta.fine_tuned }),
                None,
            )
        }

        Command::Eval { model, split } => {
            let cfg = experiment(g, Some(model))?;
            let set = load_split(&cfg, split.into())?;
            let loaded = load_model(&cfg)?;
            let t = threads(g);
            let value = match &loaded {
                LoadedModel::Lenet(net) => json!({
                    "model": "lenet",
                    "accuracy": classifier_accuracy(net, &set, net.final_exit(), t)?,
                }),
                LoadedModel::Branchynet(net, policy) => json!({
                    "model": "branchynet",
                    "threshold": policy.threshold(1),
                    "final_exit_accuracy": classifier_accuracy(net, &set, net.final_exit(), t)?,
                    "early_exit_accuracy": classifier_accuracy(net, &set, 1, t)?,
                    "gated": exit_statistics(net, &set, policy, t)?,
                }),
                LoadedModel::Cbnet(p) => {
                    let mut converted = set.clone();
                    let all: Vec<usize> = (0..set.len()).collect();
                    let mut data = Vec::with_capacity(set.images.len());
                    for chunk in all.chunks(1000) {
                        data.extend_from_slice(convert(&p.autoencoder, &set.batch(chunk))?.data());
                    }
                    converted.images = Tensor::new(set.images.shape().to_vec(), data)?;
                    json!({
                        "model": "cbnet",
                        "accuracy": classifier_accuracy(&p.classifier, &converted, 1, t)?,
                        "lightweight_accuracy_raw": classifier_accuracy(&p.classifier, &set, 1, t)?,
                        "macs_per_image": p.macs()?,
                    })
                }
            };
            emit(&value, g.out.as_deref())
        }

        Command::Bench { model, baseline, csv, subset_ratio } => {
            let mut cfg = experiment(g, model)?;
            if let Some(r) = subset_ratio {
                cfg.subset_ratio = r;
                cfg.validate()?;
            }
            let mut report = run_experiment(&cfg)?;
            if let Some(path) = baseline {
                let text =
                    std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let base = BenchmarkReport::from_json(&text)?;
                compare(&[base.clone(), report.clone()], 0)?;
                report.set_baseline(&base);
            }
            if let Some(path) = csv {
                write_csv(std::slice::from_ref(&report), &path)?;
            }
            emit(&report, cfg.output.as_deref())
        }

        Command::Sweep { models, ratios, csv } => {
            let cfg = experiment(g, None)?;
            let test = load_test_set(&cfg)?;
            let labels = test_hardness(&cfg, &test)?;
            let mut reports = Vec::new();
            for m in models {
                let cfg = ExperimentConfig { model: m, ..cfg.clone() };
                let model = load_model(&cfg)?;
                for r in sweep_loaded(&cfg, &model, &test, &labels, &ratios)? {
                    eprintln!(
                        "{:<10} ratio {:<5} images {:>5}  total {:.3}s  acc {:.2}%",
                        m.name(),
                        r.config.subset_ratio,
                        r.images,
                        r.total_time_s,
                        r.accuracy_pct
                    );
                    reports.push(r);
                }
            }
            if let Some(path) = csv {
                write_csv(&reports, &path)?;
            }
            emit(&reports, cfg.output.as_deref())
        }

        Command::TuneThreshold { budget, points, split } => {
            let cfg = experiment(g, Some(ModelVariant::Branchynet))?;
            let paths = cfg.paths();
            let branchy = load(&paths.branchy())?;
            let set = match split {
                TuneSplit::Train => load_split(&cfg, Split::Train)?,
                TuneSplit::Test => load_split(&cfg, Split::Test)?,
                TuneSplit::Validation => {
                    let train = load_split(&cfg, Split::Train)?;
                    let (_, val) = split_indices(train.len(), default_validation(train.len()), cfg.seed);
                    train.select(&val)
                }
            };
            let profile = exit_profile(&branchy, &set, threads(g))?;
            let mut result = tune_threshold(&profile, budget, points)?;
            result.policy.dataset = Some(cfg.dataset);
            let out = g.out.clone().unwrap_or_else(|| paths.policy());
            write_json(&result.policy, &out)?;
            emit(&result, None)
        }

        Command::Compare { reports, baseline } => {
            let loaded = reports
                .iter()
                .map(|p| {
                    let text =
                        std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    // Sweep output is an array of reports.
                    match serde_json::from_str::<Vec<BenchmarkReport>>(&text) {
                        Ok(v) => Ok(v),
                        Err(_) => Ok(vec![BenchmarkReport::from_json(&text)?]),
                    }
                })
                .collect::<Result<Vec<_>>>()?
                .concat();
            emit(&compare(&loaded, baseline)?, g.out.as_deref())
        }
    }
}

fn write_csv(reports: &[BenchmarkReport], path: &PathBuf) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    write_reports_csv(reports, file)
}
