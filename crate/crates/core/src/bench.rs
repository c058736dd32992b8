//! Experiment orchestration: timed sequential inference for each model
//! variant, energy accounting, comparisons and dataset-size sweeps.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::converter::{cbnet_infer, label_hardness, CbnetPipeline};
use crate::data::{resolve_data_root, stratified_subset, DatasetId, HardnessLabels, ImageSet, Split};
use crate::early_exit::{infer_with_exit, ExitPolicy};
use crate::energy::{
    ingest_power_trace, EnergyReport, PowerModelParams, PowerTraceSummary, Sampler, DEFAULT_SAMPLE_INTERVAL,
};
use crate::error::{Error, Result};
use crate::models::{checkpoint_id, load_checkpoint, Network};
use crate::parallel::default_threads;
use crate::tensor::{argmax, Tensor};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Lenet,
    Branchynet,
    Cbnet,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::Lenet, ModelVariant::Branchynet, ModelVariant::Cbnet];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Lenet => "lenet",
            ModelVariant::Branchynet => "branchynet",
            ModelVariant::Cbnet => "cbnet",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet" => Ok(ModelVariant::Lenet),
            "branchynet" | "branchy" => Ok(ModelVariant::Branchynet),
            "cbnet" => Ok(ModelVariant::Cbnet),
            other => Err(Error::Config(format!("unknown model `{other}` (expected lenet, branchynet or cbnet)"))),
        }
    }
}

/// Conventional checkpoint locations under an artifacts directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: &Path, dataset: DatasetId) -> Self {
        ArtifactPaths { dir: root.join(dataset.name()) }
    }

    pub fn lenet(&self) -> PathBuf {
        self.dir.join("lenet.cbnt")
    }

    pub fn branchy(&self) -> PathBuf {
        self.dir.join("branchy.cbnt")
    }

    pub fn autoencoder(&self) -> PathBuf {
        self.dir.join("autoencoder.cbnt")
    }

    pub fn lightweight(&self) -> PathBuf {
        self.dir.join("lightweight.cbnt")
    }

    pub fn hardness(&self, split: Split) -> PathBuf {
        self.dir.join(match split {
            Split::Train => "hardness-train.json",
            Split::Test => "hardness-test.json",
        })
    }

    pub fn policy(&self) -> PathBuf {
        self.dir.join("policy.json")
    }
}

fn default_ratio() -> f64 {
    1.0
}
fn default_warmup() -> usize {
    crate::converter::pipeline::WARMUP
}
fn default_repeats() -> usize {
    3
}
fn default_interval_ms() -> u64 {
    DEFAULT_SAMPLE_INTERVAL.as_millis() as u64
}
fn default_artifacts() -> PathBuf {
    PathBuf::from("artifacts")
}

/// One benchmark run; also the JSON config-file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    pub model: ModelVariant,
    /// Early-exit entropy threshold; the dataset default when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Named power preset (`gci` or `pi4`).
    #[serde(default)]
    pub power_preset: Option<String>,
    /// Explicit power-model constants; overrides the preset.
    #[serde(default)]
    pub power_params: Option<PowerModelParams>,
    /// Externally measured `timestamp_s,power_w` trace; overrides the model.
    #[serde(default)]
    pub power_trace: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_ratio")]
    pub subset_ratio: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    #[serde(default = "default_artifacts")]
    pub artifacts: PathBuf,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_interval_ms")]
    pub sample_interval_ms: u64,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetId, model: ModelVariant) -> Self {
        ExperimentConfig {
            dataset,
            model,
            threshold: None,
            power_preset: None,
            power_params: None,
            power_trace: None,
            seed: 0,
            epochs: None,
            batch_size: None,
            subset_ratio: 1.0,
            output: None,
            data_root: None,
            artifacts: default_artifacts(),
            warmup: default_warmup(),
            repeats: default_repeats(),
            sample_interval_ms: default_interval_ms(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.subset_ratio > 0.0 && self.subset_ratio <= 1.0) {
            return Err(Error::Config(format!("subset ratio {} outside (0, 1]", self.subset_ratio)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if let Some(t) = self.threshold {
            ExitPolicy::new(t).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.sample_interval_ms < 10 {
            return Err(Error::Config("sample interval must be >= 10 ms".into()));
        }
        self.power_source()?;
        Ok(())
    }

    pub fn policy(&self) -> Result<ExitPolicy> {
        Ok(match self.threshold {
            Some(t) => ExitPolicy { dataset: Some(self.dataset), ..ExitPolicy::new(t)? },
            None => ExitPolicy::for_dataset(self.dataset),
        })
    }

    pub fn power_source(&self) -> Result<PowerSpec> {
        if let Some(trace) = &self.power_trace {
            return Ok(PowerSpec::Trace(trace.clone()));
        }
        let params = match (&self.power_params, &self.power_preset) {
            (Some(p), _) => p.clone(),
            (None, Some(name)) => PowerModelParams::preset(name)?,
            (None, None) => PowerModelParams::pi4(),
        };
        params.validate()?;
        Ok(PowerSpec::Model(params))
    }

    pub fn paths(&self) -> ArtifactPaths {
        ArtifactPaths::new(&self.artifacts, self.dataset)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PowerSpec {
    Model(PowerModelParams),
    Trace(PathBuf),
}

/// Hostname and CPU model, used to refuse cross-machine comparisons.
pub fn machine_id() -> String {
    let host = std::fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .ok()
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "unknown-host".into());
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{host} / {cpu}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatMeasurement {
    pub total_time_s: f64,
    pub latency_ms: f64,
    pub energy: EnergyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbnetTiming {
    pub autoencoder_ms: f64,
    pub classifier_ms: f64,
    /// Mean per-image share of the autoencoder in the pipeline's latency.
    pub autoencoder_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub started_at_unix_s: f64,
    pub machine_id: String,
    pub config: ExperimentConfig,
    pub model_id: String,
    pub dataset: DatasetId,
    pub model: ModelVariant,
    pub images: usize,
    pub accuracy_pct: f64,
    /// Mean over repeats of total wall time / images.
    pub latency_ms: f64,
    pub latency_ms_stddev: f64,
    /// Mean over repeats of the whole-set inference time.
    pub total_time_s: f64,
    pub average_power_w: f64,
    /// Mean over repeats of the energy of one pass over the set.
    pub energy_j: f64,
    pub energy_j_stddev: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_fractions: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<CbnetTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_savings_pct: Option<f64>,
    pub repeats: Vec<RepeatMeasurement>,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: BenchmarkReport = serde_json::from_str(s)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("report schema {} (expected {SCHEMA_VERSION})", r.schema_version)));
        }
        Ok(r)
    }

    /// Records savings `(1 − E/E_base)·100` against `baseline`.
    pub fn set_baseline(&mut self, baseline: &BenchmarkReport) {
        self.baseline = Some(baseline.model.name().to_string());
        self.energy_savings_pct = Some(savings_pct(baseline.energy_j, self.energy_j));
    }
}

pub const CSV_HEADER: [&str; 14] = [
    "dataset",
    "model",
    "images",
    "accuracy_pct",
    "latency_ms",
    "latency_ms_stddev",
    "total_time_s",
    "average_power_w",
    "energy_j",
    "energy_j_stddev",
    "early_exit_fraction",
    "autoencoder_ms",
    "classifier_ms",
    "energy_savings_pct",
];

/// Flattens reports to CSV with [`CSV_HEADER`] columns.
pub fn write_reports_csv(reports: &[BenchmarkReport], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        w.write_record([
            r.dataset.name().to_string(),
            r.model.name().to_string(),
            r.images.to_string(),
            r.accuracy_pct.to_string(),
            r.latency_ms.to_string(),
            r.latency_ms_stddev.to_string(),
            r.total_time_s.to_string(),
            r.average_power_w.to_string(),
            r.energy_j.to_string(),
            r.energy_j_stddev.to_string(),
            opt(r.exit_fractions.as_ref().map(|f| 1.0 - f.last().copied().unwrap_or(0.0))),
            opt(r.timing.as_ref().map(|t| t.autoencoder_ms)),
            opt(r.timing.as_ref().map(|t| t.classifier_ms)),
            opt(r.energy_savings_pct),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Format(format!("csv: {e}")))
}

pub fn savings_pct(baseline_energy: f64, energy: f64) -> f64 {
    (1.0 - energy / baseline_energy) * 100.0
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Trained networks for one variant.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Lenet(Network),
    Branchynet(Network, ExitPolicy),
    Cbnet(CbnetPipeline),
}

impl LoadedModel {
    pub fn variant(&self) -> ModelVariant {
        match self {
            LoadedModel::Lenet(_) => ModelVariant::Lenet,
            LoadedModel::Branchynet(..) => ModelVariant::Branchynet,
            LoadedModel::Cbnet(_) => ModelVariant::Cbnet,
        }
    }

    pub fn id(&self) -> Result<String> {
        Ok(match self {
            LoadedModel::Lenet(n) | LoadedModel::Branchynet(n, _) => checkpoint_id(n)?,
            LoadedModel::Cbnet(p) => format!("{}+{}", checkpoint_id(&p.autoencoder)?, checkpoint_id(&p.classifier)?),
        })
    }

    /// Predicted class of one image; `stages` receives CBNet stage times.
    fn predict(&self, img: &Tensor, exits: &mut [usize], stages: &mut (Duration, Duration, f64)) -> Result<usize> {
        match self {
            LoadedModel::Lenet(net) => Ok(argmax(net.forward(img)?.data())),
            LoadedModel::Branchynet(net, policy) => {
                let o = infer_with_exit(net, img, policy)?;
                exits[o.exit - 1] += 1;
                Ok(o.class)
            }
            LoadedModel::Cbnet(p) => {
                let o = cbnet_infer(p, img)?;
                stages.0 += o.t_autoencoder;
                stages.1 += o.t_classifier;
                let both = (o.t_autoencoder + o.t_classifier).as_secs_f64();
                if both > 0.0 {
                    stages.2 += o.t_autoencoder.as_secs_f64() / both;
                }
                Ok(o.class)
            }
        }
    }
}

fn load_network(path: &Path) -> Result<Network> {
    if !path.is_file() {
        return Err(Error::Config(format!("missing checkpoint {}", path.display())));
    }
    load_checkpoint(path)
}

/// Loads the checkpoints `cfg.model` needs from the artifacts directory.
pub fn load_model(cfg: &ExperimentConfig) -> Result<LoadedModel> {
    let paths = cfg.paths();
    Ok(match cfg.model {
        ModelVariant::Lenet => LoadedModel::Lenet(load_network(&paths.lenet())?),
        ModelVariant::Branchynet => LoadedModel::Branchynet(load_network(&paths.branchy())?, cfg.policy()?),
        ModelVariant::Cbnet => LoadedModel::Cbnet(CbnetPipeline::new(
            load_network(&paths.autoencoder())?,
            load_network(&paths.lightweight())?,
        )?),
    })
}

pub fn load_test_set(cfg: &ExperimentConfig) -> Result<ImageSet> {
    let root = resolve_data_root(cfg.data_root.as_deref())?;
    ImageSet::load(&root, cfg.dataset, Split::Test)
}

/// Test-split hardness labels from the artifacts cache, or computed with
/// the branchy checkpoint (and cached) when absent.
pub fn test_hardness(cfg: &ExperimentConfig, test: &ImageSet) -> Result<HardnessLabels> {
    let paths = cfg.paths();
    let cached = paths.hardness(Split::Test);
    let policy = cfg.policy()?;
    if cached.is_file() {
        let labels = HardnessLabels::load(&cached)?;
        if labels.len() == test.len() && labels.threshold == policy.threshold(1) {
            return Ok(labels);
        }
    }
    let branchy = load_network(&paths.branchy())?;
    let labels = label_hardness(&branchy, test, &policy, default_threads())?;
    if paths.dir.is_dir() {
        labels.save(&cached)?;
    }
    Ok(labels)
}

/// Runs `model` over `set` sequentially after warm-up, `cfg.repeats` times,
/// sampling utilization during each timed pass.
pub fn run_loaded(cfg: &ExperimentConfig, model: &LoadedModel, set: &ImageSet) -> Result<BenchmarkReport> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyInput("benchmark over an empty set".into()));
    }
    let started_at_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let power = cfg.power_source()?;
    let external: Option<PowerTraceSummary> = match &power {
        PowerSpec::Trace(p) => Some(ingest_power_trace(p)?),
        PowerSpec::Model(_) => None,
    };
    let images: Vec<Tensor> = (0..set.len()).map(|i| set.image_tensor(i)).collect();
    let n_exits = match model {
        LoadedModel::Branchynet(net, _) => net.exit_count(),
        _ => 1,
    };

    let mut scratch_exits = vec![0; n_exits];
    let mut scratch_stages = (Duration::ZERO, Duration::ZERO, 0.0);
    for i in 0..cfg.warmup {
        model.predict(&images[i % images.len()], &mut scratch_exits, &mut scratch_stages)?;
    }

    let mut repeats = Vec::with_capacity(cfg.repeats);
    // Correct count, exit counts and stage times of the first repeat.
    type Tally = (usize, Vec<usize>, (Duration, Duration, f64));
    let mut first: Option<Tally> = None;
    for _ in 0..cfg.repeats {
        let mut exits = vec![0; n_exits];
        let mut stages = (Duration::ZERO, Duration::ZERO, 0.0);
        let mut correct = 0usize;
        let sampler = match power {
            PowerSpec::Model(_) => Some(Sampler::start(Duration::from_millis(cfg.sample_interval_ms))?),
            PowerSpec::Trace(_) => None,
        };
        let start = Instant::now();
        for (img, &label) in images.iter().zip(&set.labels) {
            correct += (model.predict(img, &mut exits, &mut stages)? == label as usize) as usize;
        }
        let total = start.elapsed().as_secs_f64();
        let energy = match (&power, sampler) {
            (PowerSpec::Model(params), Some(s)) => EnergyReport::modeled(&s.finish()?, params, total)?,
            _ => EnergyReport::external(external.as_ref().expect("trace summary"), total)?,
        };
        repeats.push(RepeatMeasurement { total_time_s: total, latency_ms: total * 1e3 / set.len() as f64, energy });
        if first.is_none() {
            first = Some((correct, exits, stages));
        }
    }
    let (correct, exits, stages) = first.expect("at least one repeat");
    let n = set.len() as f64;
    let lat: Vec<f64> = repeats.iter().map(|r| r.latency_ms).collect();
    let tot: Vec<f64> = repeats.iter().map(|r| r.total_time_s).collect();
    let en: Vec<f64> = repeats.iter().map(|r| r.energy.energy_j).collect();
    let pw: Vec<f64> = repeats.iter().map(|r| r.energy.average_power_w).collect();
    let (latency_ms, latency_ms_stddev) = mean_std(&lat);
    let (energy_j, energy_j_stddev) = mean_std(&en);

    Ok(BenchmarkReport {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at_unix_s,
        machine_id: machine_id(),
        config: cfg.clone(),
        model_id: model.id()?,
        dataset: set.dataset,
        model: model.variant(),
        images: set.len(),
        accuracy_pct: correct as f64 / n * 100.0,
        latency_ms,
        latency_ms_stddev,
        total_time_s: mean_std(&tot).0,
        average_power_w: mean_std(&pw).0,
        energy_j,
        energy_j_stddev,
        exit_fractions: matches!(model, LoadedModel::Branchynet(..))
            .then(|| exits.iter().map(|&c| c as f64 / n).collect()),
        timing: matches!(model, LoadedModel::Cbnet(_)).then(|| CbnetTiming {
            autoencoder_ms: stages.0.as_secs_f64() * 1e3 / n,
            classifier_ms: stages.1.as_secs_f64() * 1e3 / n,
            autoencoder_share: stages.2 / n,
        }),
        baseline: None,
        energy_savings_pct: None,
        repeats,
    })
}

/// Loads data and checkpoints, subsets the test split if requested, runs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let model = load_model(cfg)?;
    let test = load_test_set(cfg)?;
    if cfg.subset_ratio < 1.0 {
        let labels = test_hardness(cfg, &test)?;
        let sub = stratified_subset(&test, &labels, cfg.subset_ratio, cfg.seed)?;
        run_loaded(cfg, &model, &sub.set)
    } else {
        run_loaded(cfg, &model, &test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: ModelVariant,
    pub latency_ms: f64,
    pub speedup: f64,
    pub energy_j: f64,
    pub energy_savings_pct: f64,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: DatasetId,
    pub baseline: ModelVariant,
    pub rows: Vec<ComparisonRow>,
}

/// Speedups and savings of every report against `reports[baseline]`.
pub fn compare(reports: &[BenchmarkReport], baseline: usize) -> Result<Comparison> {
    let base = reports.get(baseline).ok_or_else(|| Error::Config("baseline index out of range".into()))?;
    for r in reports {
        if r.dataset != base.dataset {
            return Err(Error::Config(format!("cannot compare {} with {}", r.dataset, base.dataset)));
        }
        if r.machine_id != base.machine_id {
            return Err(Error::Config(format!(
                "reports come from different machines ({} vs {})",
                r.machine_id, base.machine_id
            )));
        }
    }
    Ok(Comparison {
        dataset: base.dataset,
        baseline: base.model,
        rows: reports
            .iter()
            .map(|r| ComparisonRow {
                model: r.model,
                latency_ms: r.latency_ms,
                speedup: base.latency_ms / r.latency_ms,
                energy_j: r.energy_j,
                energy_savings_pct: savings_pct(base.energy_j, r.energy_j),
                accuracy_pct: r.accuracy_pct,
            })
            .collect(),
    })
}

/// One run per ratio on stratified subsets of the test split.
pub fn sweep_dataset_size(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<Vec<BenchmarkReport>> {
    let model = load_model(cfg)?;
    let test = load_test_set(cfg)?;
    let labels = test_hardness(cfg, &test)?;
    sweep_loaded(cfg, &model, &test, &labels, ratios)
}

pub fn sweep_loaded(
    cfg: &ExperimentConfig,
    model: &LoadedModel,
    test: &ImageSet,
    labels: &HardnessLabels,
    ratios: &[f64],
) -> Result<Vec<BenchmarkReport>> {
    if ratios.is_empty() {
        return Err(Error::Config("no sweep ratios".into()));
    }
    if ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) || ratios.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("sweep ratios {ratios:?} must ascend within (0, 1]")));
    }
    ratios
        .iter()
        .map(|&ratio| {
            let sub = stratified_subset(test, labels, ratio, cfg.seed)?;
            let cfg = ExperimentConfig { subset_ratio: ratio, ..cfg.clone() };
            run_loaded(&cfg, model, &sub.set)
        })
        .collect()
}
