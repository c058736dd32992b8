//! Utilization-driven CPU power models, a process utilization sampler,
//! external power-trace ingestion and `E = P·Δt` accounting.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    /// Cloud instance: power scales with the allocated share of host cores.
    Gci,
    /// Single-board computer: whole-device model.
    Pi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerModelParams {
    pub device: DeviceKind,
    /// Allocated virtual CPUs.
    pub n: u32,
    /// Physical cores of the host.
    pub host_cores: u32,
    pub p_idle: f64,
    pub p_peak: f64,
    pub beta: f64,
}

impl PowerModelParams {
    pub fn gci() -> Self {
        PowerModelParams { device: DeviceKind::Gci, n: 2, host_cores: 18, p_idle: 40.0, p_peak: 180.0, beta: 0.75 }
    }

    pub fn pi4() -> Self {
        PowerModelParams { device: DeviceKind::Pi, n: 4, host_cores: 4, p_idle: 2.7, p_peak: 6.4, beta: 1.0 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "gci" => Ok(Self::gci()),
            "pi4" | "pi" => Ok(Self::pi4()),
            other => Err(Error::Config(format!("unknown power preset `{other}` (expected gci or pi4)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n > 0
            && self.n <= self.host_cores
            && self.p_idle >= 0.0
            && self.p_peak > self.p_idle
            && self.beta > 0.0
            && self.p_peak.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid power model parameters {self:?}")))
        }
    }

    /// Power at utilization `u` under this device's model.
    pub fn power(&self, u: f64) -> Result<f64> {
        match self.device {
            DeviceKind::Gci => gci_power(u, self),
            DeviceKind::Pi => pi_power(u, self),
        }
    }
}

fn check_utilization(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::Domain(format!("utilization {u} outside [0,1]")))
    }
}

/// `(n/N)·(P_idle + (P_peak − P_idle)·u^β)`.
pub fn gci_power(u: f64, p: &PowerModelParams) -> Result<f64> {
    check_utilization(u)?;
    Ok(p.n as f64 / p.host_cores as f64 * (p.p_idle + (p.p_peak - p.p_idle) * u.powf(p.beta)))
}

/// `P_idle + (P_peak − P_idle)·u^β`.
pub fn pi_power(u: f64, p: &PowerModelParams) -> Result<f64> {
    check_utilization(u)?;
    Ok(p.p_idle + (p.p_peak - p.p_idle) * u.powf(p.beta))
}

/// `E = P·Δt` in joules.
pub fn energy(average_power_w: f64, duration_s: f64) -> Result<f64> {
    if duration_s.is_nan() || duration_s < 0.0 {
        return Err(Error::Domain(format!("negative duration {duration_s} s")));
    }
    Ok(average_power_w * duration_s)
}

/// Timestamped utilization samples in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationTrace {
    /// `(seconds since sampling start, utilization)`.
    pub samples: Vec<(f64, f64)>,
    pub interval_s: f64,
}

impl UtilizationTrace {
    pub fn new(samples: Vec<(f64, f64)>, interval_s: f64) -> Result<Self> {
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Format("utilization timestamps must strictly increase".into()));
            }
        }
        for &(_, u) in &samples {
            check_utilization(u)?;
        }
        Ok(UtilizationTrace { samples, interval_s })
    }

    /// Samples at unit spacing from bare utilization values.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().enumerate().map(|(i, &u)| (i as f64, u)).collect(), 1.0)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_utilization(&self) -> Result<f64> {
        if self.samples.is_empty() {
            return Err(Error::EmptyTrace);
        }
        Ok(self.samples.iter().map(|s| s.1).sum::<f64>() / self.samples.len() as f64)
    }
}

/// Mean over samples of the per-sample modeled power.
pub fn average_power(trace: &UtilizationTrace, params: &PowerModelParams) -> Result<f64> {
    if trace.samples.is_empty() {
        return Err(Error::EmptyTrace);
    }
    // Mean shifted by the first sample: exact for constant traces.
    let first = params.power(trace.samples[0].1)?;
    let mut offset = 0.0;
    for &(_, u) in &trace.samples[1..] {
        offset += params.power(u)? - first;
    }
    Ok(first + offset / trace.samples.len() as f64)
}

/// Total user + system CPU time consumed by this process.
fn process_cpu_time() -> Result<Duration> {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage only writes into the provided struct.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc != 0 {
        return Err(Error::Platform(format!("getrusage failed: {}", std::io::Error::last_os_error())));
    }
    // SAFETY: rc == 0 means the struct was filled in.
    let usage = unsafe { usage.assume_init() };
    let tv = |t: libc::timeval| Duration::new(t.tv_sec as u64, (t.tv_usec as u32) * 1000);
    Ok(tv(usage.ru_utime) + tv(usage.ru_stime))
}

pub const MIN_SAMPLE_INTERVAL: Duration = Duration::from_millis(10);
pub const DEFAULT_SAMPLE_INTERVAL: Duration = Duration::from_millis(100);

/// Samples process CPU utilization (normalized by the cores available to
/// the process) every `interval` until `stop` is set. A final partial
/// interval is recorded when longer than 1 ms or when it is the only one.
pub fn sample_utilization(interval: Duration, stop: &AtomicBool) -> Result<UtilizationTrace> {
    if interval < MIN_SAMPLE_INTERVAL {
        return Err(Error::Config(format!("sampling interval {interval:?} is below 10 ms")));
    }
    let cores = crate::parallel::default_threads() as f64;
    let origin = Instant::now();
    let (mut last_wall, mut last_cpu) = (origin, process_cpu_time()?);
    let mut samples = Vec::new();
    let sample = |now: Instant, cpu: Duration, last_wall: Instant, last_cpu: Duration| {
        let wall = (now - last_wall).as_secs_f64().max(1e-9);
        let busy = cpu.saturating_sub(last_cpu).as_secs_f64();
        ((now - origin).as_secs_f64(), (busy / (wall * cores)).clamp(0.0, 1.0))
    };
    loop {
        let deadline = last_wall + interval;
        while Instant::now() < deadline {
            if stop.load(Ordering::Acquire) {
                let now = Instant::now();
                if samples.is_empty() || now - last_wall > Duration::from_millis(1) {
                    samples.push(sample(now, process_cpu_time()?, last_wall, last_cpu));
                }
                return UtilizationTrace::new(samples, interval.as_secs_f64());
            }
            std::thread::sleep(deadline.saturating_duration_since(Instant::now()).min(Duration::from_millis(5)));
        }
        let now = Instant::now();
        let cpu = process_cpu_time()?;
        samples.push(sample(now, cpu, last_wall, last_cpu));
        (last_wall, last_cpu) = (now, cpu);
    }
}

/// Background utilization sampler.
pub struct Sampler {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<Result<UtilizationTrace>>,
}

impl Sampler {
    pub fn start(interval: Duration) -> Result<Self> {
        process_cpu_time()?;
        if interval < MIN_SAMPLE_INTERVAL {
            return Err(Error::Config(format!("sampling interval {interval:?} is below 10 ms")));
        }
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || sample_utilization(interval, &flag));
        Ok(Sampler { stop, handle })
    }

    pub fn finish(self) -> Result<UtilizationTrace> {
        self.stop.store(true, Ordering::Release);
        self.handle.join().map_err(|_| Error::Platform("utilization sampler panicked".into()))?
    }
}

/// Averages of an externally measured power trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerTraceSummary {
    pub average_power_w: f64,
    pub duration_s: f64,
}

#[derive(Debug, Deserialize)]
struct PowerRow {
    timestamp_s: f64,
    power_w: f64,
}

/// Trapezoid time-weighted mean of a `timestamp_s,power_w` CSV.
pub fn parse_power_trace(reader: impl std::io::Read) -> Result<PowerTraceSummary> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Format(format!("power trace header: {e}")))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["timestamp_s", "power_w"] {
        return Err(Error::Format(format!("power trace header must be `timestamp_s,power_w`, got {headers:?}")));
    }
    let rows = rdr
        .deserialize::<PowerRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("power trace row: {e}")))?;
    if rows.len() < 2 {
        return Err(Error::Format(format!("power trace needs at least 2 rows, got {}", rows.len())));
    }
    let mut area = 0.0;
    for w in rows.windows(2) {
        let dt = w[1].timestamp_s - w[0].timestamp_s;
        if dt.is_nan() || dt <= 0.0 {
            return Err(Error::Format("power trace timestamps must strictly increase".into()));
        }
        area += 0.5 * (w[0].power_w + w[1].power_w) * dt;
    }
    let duration_s = rows[rows.len() - 1].timestamp_s - rows[0].timestamp_s;
    Ok(PowerTraceSummary { average_power_w: area / duration_s, duration_s })
}

pub fn ingest_power_trace(path: impl AsRef<Path>) -> Result<PowerTraceSummary> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_power_trace(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerSource {
    ModeledGci,
    ModeledPi,
    ExternalTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub average_power_w: f64,
    pub duration_s: f64,
    pub energy_j: f64,
    pub source: PowerSource,
    /// Mean utilization of the sampled trace, for modeled sources.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_utilization: Option<f64>,
    /// How power was averaged over the trace.
    pub averaging: String,
}

impl EnergyReport {
    pub fn modeled(trace: &UtilizationTrace, params: &PowerModelParams, duration_s: f64) -> Result<Self> {
        let average_power_w = average_power(trace, params)?;
        Ok(EnergyReport {
            average_power_w,
            duration_s,
            energy_j: energy(average_power_w, duration_s)?,
            source: match params.device {
                DeviceKind::Gci => PowerSource::ModeledGci,
                DeviceKind::Pi => PowerSource::ModeledPi,
            },
            mean_utilization: Some(trace.mean_utilization()?),
            averaging: "per-sample model mean".into(),
        })
    }

    /// Energy of a run lasting `duration_s` at the trace's average power.
    pub fn external(trace: &PowerTraceSummary, duration_s: f64) -> Result<Self> {
        Ok(EnergyReport {
            average_power_w: trace.average_power_w,
            duration_s,
            energy_j: energy(trace.average_power_w, duration_s)?,
            source: PowerSource::ExternalTrace,
            mean_utilization: None,
            averaging: "time-weighted trapezoid".into(),
        })
    }
}
