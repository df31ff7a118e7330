//! Deployment costing: activation liveness memory, forward timing, flops, and the
//! Base / FCN / SSD / Multitask / Naive report.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use trunkshare_tensor::{Graph, NodeRole, Tensor};

use crate::error::{CoreError, Result};
use crate::imageio::{RgbImage, PALETTE};
use crate::model::{Model, TaskMode};
use crate::params::{Binder, ParamStore};
use crate::rng;

pub const BYTES_PER_MB: f64 = 1e6;

/// Liveness of every activation (inputs and op outputs) under the graph's execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryModel {
    pub bytes_per_scalar: usize,
    /// `(first, last, bytes)` per activation: produced at schedule point `first`, freed
    /// after `last` (its final consumer, or the end of the schedule for outputs).
    pub intervals: Vec<(usize, usize, u64)>,
    pub schedule_len: usize,
}

impl MemoryModel {
    pub fn from_graph(graph: &Graph, bytes_per_scalar: usize) -> Self {
        let n = graph.len();
        let mut last_use = vec![None; n];
        let mut activation = vec![false; n];
        for node in graph.nodes() {
            activation[node.var.index()] = !matches!(node.role, NodeRole::Param);
            for input in node.inputs {
                last_use[input.index()] = Some(node.var.index());
            }
        }
        let intervals = graph
            .nodes()
            .filter(|node| activation[node.var.index()])
            .map(|node| {
                let i = node.var.index();
                let bytes = (node.shape.iter().product::<usize>() * bytes_per_scalar) as u64;
                (i, last_use[i].unwrap_or(n.saturating_sub(1)), bytes)
            })
            .collect();
        Self {
            bytes_per_scalar,
            intervals,
            schedule_len: n,
        }
    }

    pub fn live_bytes(&self, t: usize) -> u64 {
        self.intervals
            .iter()
            .filter(|(a, b, _)| *a <= t && t <= *b)
            .map(|(_, _, bytes)| bytes)
            .sum()
    }

    pub fn peak_bytes(&self) -> u64 {
        let mut delta = vec![0i128; self.schedule_len + 1];
        for &(a, b, bytes) in &self.intervals {
            delta[a] += bytes as i128;
            delta[b + 1] -= bytes as i128;
        }
        let mut live = 0i128;
        let mut peak = 0i128;
        for d in &delta[..self.schedule_len] {
            live += d;
            peak = peak.max(live);
        }
        peak as u64
    }
}

/// What part of a model a deployment runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Workload {
    SharedTrunk,
    Full,
}

/// Builds the single-image inference graph of `model` on `image` (`[1, 3, H, W]`).
pub fn inference_graph(model: &Model, params: &ParamStore, image: &Tensor, workload: Workload) -> Result<Graph> {
    let mut graph = Graph::inference();
    let mut binder = Binder::new(params);
    let x = graph.input(image.clone());
    match workload {
        Workload::SharedTrunk => {
            model.trunk_forward(&mut graph, &mut binder, x)?;
        }
        Workload::Full => {
            model.forward(&mut graph, &mut binder, x)?;
        }
    }
    Ok(graph)
}

pub fn peak_activation_bytes(
    model: &Model,
    params: &ParamStore,
    image: &Tensor,
    workload: Workload,
    bytes_per_scalar: usize,
) -> Result<u64> {
    let graph = inference_graph(model, params, image, workload)?;
    Ok(MemoryModel::from_graph(&graph, bytes_per_scalar).peak_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub p95_ms: f64,
}

fn check_timing(warmup: usize, iters: usize) -> Result<()> {
    if warmup < 5 || iters < 30 {
        return Err(CoreError::Config(format!(
            "timing needs warmup >= 5 and iters >= 30, got {warmup} / {iters}"
        )));
    }
    Ok(())
}

fn summarize(mut samples: Vec<f64>) -> Timing {
    let n = samples.len();
    samples.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let p95 = samples[((0.95 * n as f64).ceil() as usize).max(1) - 1];
    Timing {
        median_ms: median,
        p95_ms: p95,
    }
}

fn time_once(f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

/// Median and nearest-rank p95 wall time of `f` over `iters` runs after `warmup` runs.
pub fn time_forward(mut f: impl FnMut() -> Result<()>, warmup: usize, iters: usize) -> Result<Timing> {
    Ok(time_round_robin(&mut [&mut f], warmup, iters)?.remove(0))
}

/// Times several workloads in rounds: each round runs every workload once, one
/// after another. Load spikes on a shared machine then hit all of them alike
/// instead of whichever happened to be measured at the time.
pub fn time_round_robin(fs: &mut [&mut dyn FnMut() -> Result<()>], warmup: usize, iters: usize) -> Result<Vec<Timing>> {
    check_timing(warmup, iters)?;
    for _ in 0..warmup {
        for f in fs.iter_mut() {
            f()?;
        }
    }
    let mut samples = vec![Vec::with_capacity(iters); fs.len()];
    for _ in 0..iters {
        for (f, s) in fs.iter_mut().zip(&mut samples) {
            s.push(time_once(*f)?);
        }
    }
    Ok(samples.into_iter().map(summarize).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Deployment {
    Base,
    Fcn,
    Ssd,
    Multitask,
    Naive,
}

impl Deployment {
    pub const ALL: [Deployment; 5] = [Self::Base, Self::Fcn, Self::Ssd, Self::Multitask, Self::Naive];

    pub fn label(self) -> &'static str {
        match self {
            Self::Base => "Base",
            Self::Fcn => "FCN",
            Self::Ssd => "SSD",
            Self::Multitask => "Multitask",
            Self::Naive => "Naive",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Fcn => "fcn",
            Self::Ssd => "ssd",
            Self::Multitask => "multitask",
            Self::Naive => "naive",
        }
    }
}

/// One report column. `memory_bytes` is resident deployment memory (peak
/// activations plus weights); for Naive it follows the sequential interpretation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeploymentStats {
    pub median_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub flops: Option<u64>,
    pub peak_activation_bytes: Option<u64>,
    pub memory_bytes: Option<u64>,
    /// Naive only: both models resident and running at once.
    pub concurrent_memory_bytes: Option<u64>,
    pub size_bytes: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeployReport {
    entries: Vec<(Deployment, DeploymentStats)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratios {
    pub speedup: Option<f64>,
    pub memory: Option<f64>,
    pub memory_concurrent: Option<f64>,
    pub size: Option<f64>,
    pub flops: Option<f64>,
}

fn ratio(num: Option<f64>, den: Option<f64>) -> Option<f64> {
    match (num, den) {
        (Some(n), Some(d)) if d > 0.0 => Some(n / d),
        _ => None,
    }
}

impl DeployReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, which: Deployment, stats: DeploymentStats) {
        match self.entries.iter_mut().find(|(d, _)| *d == which) {
            Some(slot) => slot.1 = stats,
            None => self.entries.push((which, stats)),
        }
    }

    pub fn get(&self, which: Deployment) -> Option<&DeploymentStats> {
        self.entries.iter().find(|(d, _)| *d == which).map(|(_, s)| s)
    }

    fn require(&self, which: Deployment) -> Result<&DeploymentStats> {
        self.get(which)
            .ok_or_else(|| CoreError::Contract(format!("report lacks the {} deployment", which.label())))
    }

    /// Naive over Multitask for each resource.
    pub fn ratios(&self) -> Result<Ratios> {
        let naive = self.require(Deployment::Naive)?;
        let multi = self.require(Deployment::Multitask)?;
        let f = |v: Option<u64>| v.map(|x| x as f64);
        Ok(Ratios {
            speedup: ratio(naive.median_ms, multi.median_ms),
            memory: ratio(f(naive.memory_bytes), f(multi.memory_bytes)),
            memory_concurrent: ratio(f(naive.concurrent_memory_bytes), f(multi.memory_bytes)),
            size: ratio(f(naive.size_bytes), f(multi.size_bytes)),
            flops: ratio(f(naive.flops), f(multi.flops)),
        })
    }

    /// `(metric key, row label, per-deployment cells)` in display order.
    fn rows(&self) -> Result<Vec<(&'static str, &'static str, Vec<String>)>> {
        let stats: Vec<&DeploymentStats> = Deployment::ALL.iter().map(|&d| self.require(d)).collect::<Result<_>>()?;
        let mb = |v: Option<u64>| fmt3(v.map(|b| b as f64 / BYTES_PER_MB));
        let row = |f: &dyn Fn(&DeploymentStats) -> String| stats.iter().map(|s| f(s)).collect::<Vec<_>>();
        Ok(vec![
            ("inf_time_ms", "Inf. Time (ms)", row(&|s| fmt3(s.median_ms))),
            ("inf_time_p95_ms", "Inf. Time p95 (ms)", row(&|s| fmt3(s.p95_ms))),
            ("mflops", "MFLOPs", row(&|s| fmt3(s.flops.map(|f| f as f64 / 1e6)))),
            ("activations_mb", "Peak activations (MB)", row(&|s| mb(s.peak_activation_bytes))),
            ("memory_mb", "Memory (MB)", row(&|s| mb(s.memory_bytes))),
            (
                "memory_concurrent_mb",
                "Memory, concurrent (MB)",
                row(&|s| mb(s.concurrent_memory_bytes)),
            ),
            ("size_mb", "Size (MB)", row(&|s| mb(s.size_bytes))),
        ])
    }

    fn ratio_rows(&self) -> Result<Vec<(&'static str, &'static str, String)>> {
        let r = self.ratios()?;
        Ok(vec![
            ("ratio_speedup", "Speedup", fmt3(r.speedup)),
            ("ratio_memory", "Memory", fmt3(r.memory)),
            ("ratio_memory_concurrent", "Memory, concurrent naive", fmt3(r.memory_concurrent)),
            ("ratio_size", "Size", fmt3(r.size)),
            ("ratio_flops", "Flops", fmt3(r.flops)),
        ])
    }

    pub fn to_markdown(&self) -> Result<String> {
        let mut s = String::from("| Metric |");
        for d in Deployment::ALL {
            let _ = write!(s, " {} |", d.label());
        }
        s.push_str("\n|---|---:|---:|---:|---:|---:|\n");
        for (_, label, cells) in self.rows()? {
            let _ = writeln!(s, "| {label} | {} |", cells.join(" | "));
        }
        s.push_str("\n| Naive / Multitask | Ratio |\n|---|---:|\n");
        for (_, label, value) in self.ratio_rows()? {
            let _ = writeln!(s, "| {label} | {value} |");
        }
        Ok(s)
    }

    /// Long format: `metric,deployment,value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("metric,deployment,value\n");
        for (key, _, cells) in self.rows()? {
            for (d, cell) in Deployment::ALL.iter().zip(cells) {
                let _ = writeln!(s, "{key},{},{cell}", d.key());
            }
        }
        for (key, _, value) in self.ratio_rows()? {
            let _ = writeln!(s, "{key},naive/multitask,{value}");
        }
        Ok(s)
    }

    /// Grouped bar chart: time, memory and size, one bar per deployment, each group
    /// scaled to its own maximum. Missing values draw no bar.
    pub fn bar_chart(&self) -> Result<RgbImage> {
        let stats: Vec<DeploymentStats> = Deployment::ALL.iter().map(|&d| self.require(d).copied()).collect::<Result<_>>()?;
        let groups: [Vec<Option<f64>>; 3] = [
            stats.iter().map(|s| s.median_ms).collect(),
            stats.iter().map(|s| s.memory_bytes.map(|v| v as f64)).collect(),
            stats.iter().map(|s| s.size_bytes.map(|v| v as f64)).collect(),
        ];
        let (bar, gap, height) = (12, 24, 120);
        let width = gap + groups.len() * (Deployment::ALL.len() * bar + gap);
        let mut img = RgbImage::new(width, height + 10, [255, 255, 255]);
        for (g, values) in groups.iter().enumerate() {
            let max = values.iter().flatten().copied().fold(0.0, f64::max);
            let x0 = gap + g * (Deployment::ALL.len() * bar + gap);
            for (k, v) in values.iter().enumerate() {
                let Some(v) = v else { continue };
                let h = if max > 0.0 {
                    ((v / max) * height as f64).round() as usize
                } else {
                    0
                };
                let x = x0 + k * bar;
                img.fill_rect(x + 1, 5 + height - h, x + bar - 1, 5 + height, PALETTE[k + 1]);
            }
        }
        Ok(img)
    }
}

/// Three-decimal rendering used by every report cell; `n/a` when absent.
pub fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
    pub bytes_per_scalar: usize,
    /// When false, time cells are left empty so reports depend only on the models.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 5,
            iters: 30,
            bytes_per_scalar: 4,
            timing: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bytes_per_scalar == 0 {
            return Err(CoreError::Config("bytes_per_scalar must be positive".into()));
        }
        if self.timing && (self.warmup < 5 || self.iters < 30) {
            return Err(CoreError::Config("timing needs warmup >= 5 and iters >= 30".into()));
        }
        Ok(())
    }
}

/// A model and its weights.
pub struct Loaded<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
}

/// Benchmarks the three trained models. Base is the multitask model's shared trunk;
/// Naive runs the FCN then the SSD model on the same image.
pub fn run_bench(multi: Loaded<'_>, ssd: Loaded<'_>, fcn: Loaded<'_>, cfg: &BenchConfig, seed: u64) -> Result<DeployReport> {
    cfg.validate()?;
    for (l, mode) in [(&multi, TaskMode::Multi), (&ssd, TaskMode::Det), (&fcn, TaskMode::Seg)] {
        if l.model.mode() != mode {
            return Err(CoreError::Contract(format!(
                "expected a {} model, got {}",
                mode.as_str(),
                l.model.mode().as_str()
            )));
        }
        l.model.check_params(l.params)?;
    }
    let shape = |m: &Model| m.config().trunk.input_size;
    if shape(multi.model) != shape(ssd.model) || shape(multi.model) != shape(fcn.model) {
        return Err(CoreError::Contract("models disagree on input size".into()));
    }
    let (h, w) = shape(multi.model);
    let mut r = rng::rng(seed);
    let image = Tensor::from_fn(&[1, 3, h, w], |_| rand::RngExt::random::<f64>(&mut r));
    let bps = cfg.bytes_per_scalar;
    let measure = |l: &Loaded<'_>, workload: Workload| -> Result<(u64, u64)> {
        let graph = inference_graph(l.model, l.params, &image, workload)?;
        Ok((graph.total_flops(), MemoryModel::from_graph(&graph, bps).peak_bytes()))
    };
    let (base_f, base_p) = measure(&multi, Workload::SharedTrunk)?;
    let (fcn_f, fcn_p) = measure(&fcn, Workload::Full)?;
    let (ssd_f, ssd_p) = measure(&ssd, Workload::Full)?;
    let (multi_f, multi_p) = measure(&multi, Workload::Full)?;

    // Order: Base, FCN, SSD, Multitask, Naive (FCN then SSD on the same image).
    let timings: Vec<Option<Timing>> = if cfg.timing {
        let run = |l: &Loaded<'_>, w: Workload| inference_graph(l.model, l.params, &image, w).map(drop);
        let mut base = || run(&multi, Workload::SharedTrunk);
        let mut fcn_run = || run(&fcn, Workload::Full);
        let mut ssd_run = || run(&ssd, Workload::Full);
        let mut multi_run = || run(&multi, Workload::Full);
        let mut naive = || {
            run(&fcn, Workload::Full)?;
            run(&ssd, Workload::Full)
        };
        time_round_robin(
            &mut [&mut base, &mut fcn_run, &mut ssd_run, &mut multi_run, &mut naive],
            cfg.warmup,
            cfg.iters,
        )?
        .into_iter()
        .map(Some)
        .collect()
    } else {
        vec![None; 5]
    };
    let column = |timing: Option<Timing>, flops: u64, peak: u64, weights: u64| DeploymentStats {
        median_ms: timing.map(|t| t.median_ms),
        p95_ms: timing.map(|t| t.p95_ms),
        flops: Some(flops),
        peak_activation_bytes: Some(peak),
        memory_bytes: Some(peak + weights),
        concurrent_memory_bytes: None,
        size_bytes: Some(weights),
    };
    let fcn_weights = fcn.model.size_bytes(bps) as u64;
    let ssd_weights = ssd.model.size_bytes(bps) as u64;
    let mut report = DeployReport::new();
    report.set(
        Deployment::Base,
        column(timings[0], base_f, base_p, (multi.model.shared_param_count() * bps) as u64),
    );
    report.set(Deployment::Fcn, column(timings[1], fcn_f, fcn_p, fcn_weights));
    report.set(Deployment::Ssd, column(timings[2], ssd_f, ssd_p, ssd_weights));
    report.set(
        Deployment::Multitask,
        column(timings[3], multi_f, multi_p, multi.model.size_bytes(bps) as u64),
    );
    report.set(
        Deployment::Naive,
        DeploymentStats {
            median_ms: timings[4].map(|t| t.median_ms),
            p95_ms: timings[4].map(|t| t.p95_ms),
            flops: Some(fcn_f + ssd_f),
            peak_activation_bytes: Some(fcn_p.max(ssd_p)),
            memory_bytes: Some(fcn_p.max(ssd_p) + fcn_weights + ssd_weights),
            concurrent_memory_bytes: Some(fcn_p + fcn_weights + ssd_p + ssd_weights),
            size_bytes: Some(fcn_weights + ssd_weights),
        },
    );
    Ok(report)
}

/// `(flops_fcn + flops_ssd) / flops_multi` from per-image forward counts.
pub fn flops_ratio(multi: &Model, ssd: &Model, fcn: &Model) -> Result<f64> {
    let m = multi.cost()?.total();
    let d = ssd.cost()?.total();
    let s = fcn.cost()?.total();
    Ok((d + s) as f64 / m as f64)
}
