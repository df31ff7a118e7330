use std::path::PathBuf;

use trunkshare_core::bench::{
    flops_ratio, fmt3, peak_activation_bytes, run_bench, time_forward, BenchConfig, DeployReport, Deployment, DeploymentStats, Loaded,
    MemoryModel, Workload, BYTES_PER_MB,
};
use trunkshare_core::model::{Model, ModelConfig, TaskMode};
use trunkshare_core::trunk::TrunkConfig;
use trunkshare_core::CoreError;
use trunkshare_tensor::{Graph, Tensor};

#[test]
fn single_conv_peak_is_input_plus_output() {
    let mut g = Graph::inference();
    let x = g.input(Tensor::zeros(&[1, 2, 5, 5]));
    let w = g.param(Tensor::zeros(&[3, 2, 3, 3]));
    let b = g.param(Tensor::zeros(&[3]));
    g.conv2d(x, w, b, 1, 1).unwrap();
    let m = MemoryModel::from_graph(&g, 4);
    assert_eq!(m.peak_bytes(), (50 + 75) * 4);
}

#[test]
fn chain_peak_is_two_buffers() {
    for n in [1, 2, 5, 20] {
        let mut g = Graph::inference();
        let mut v = g.input(Tensor::zeros(&[1, 4, 6, 6]));
        for _ in 0..n {
            v = g.relu(v).unwrap();
        }
        let m = MemoryModel::from_graph(&g, 8);
        assert_eq!(m.peak_bytes(), 2 * 144 * 8, "n = {n}");
        let brute = (0..m.schedule_len).map(|t| m.live_bytes(t)).max().unwrap();
        assert_eq!(brute, m.peak_bytes());
    }
}

fn model_at(size: usize, mode: TaskMode) -> Model {
    let cfg = ModelConfig {
        trunk: TrunkConfig {
            input_size: (size, size),
            ..TrunkConfig::default()
        },
        ..ModelConfig::default()
    };
    Model::new(cfg, mode).unwrap()
}

#[test]
fn peak_grows_with_resolution() {
    let mut last = 0;
    for k in 1..=6 {
        let size = 16 * k;
        let model = model_at(size, TaskMode::Multi);
        let params = model.init_params(0).unwrap();
        let peak = peak_activation_bytes(&model, &params, &Tensor::zeros(&[1, 3, size, size]), Workload::Full, 4).unwrap();
        assert!(peak >= last, "{size}: {peak} < {last}");
        last = peak;
    }
}

#[test]
fn multitask_peak_below_sum_of_singles() {
    let image = Tensor::zeros(&[1, 3, 64, 64]);
    let peak = |mode| {
        let m = model_at(64, mode);
        peak_activation_bytes(&m, &m.init_params(0).unwrap(), &image, Workload::Full, 4).unwrap()
    };
    assert!(peak(TaskMode::Multi) < peak(TaskMode::Det) + peak(TaskMode::Seg));
}

fn reference_report() -> DeployReport {
    let mb = |v: u64| Some(v * BYTES_PER_MB as u64);
    let col = |ms: f64, mem: u64, size: u64| DeploymentStats {
        median_ms: Some(ms),
        memory_bytes: mb(mem),
        size_bytes: mb(size),
        ..DeploymentStats::default()
    };
    let mut r = DeployReport::new();
    r.set(Deployment::Base, col(19.0, 1203, 95));
    r.set(Deployment::Fcn, col(24.0, 1233, 95));
    r.set(Deployment::Ssd, col(27.0, 1525, 140));
    r.set(Deployment::Multitask, col(30.0, 1552, 140));
    r.set(Deployment::Naive, col(49.0, 2511, 235));
    r
}

#[test]
fn reference_cells_give_reference_ratios() {
    let r = reference_report().ratios().unwrap();
    assert_eq!(fmt3(r.speedup), "1.633");
    assert_eq!(fmt3(r.memory), "1.618");
    assert_eq!(fmt3(r.size), "1.679");
    let csv = reference_report().to_csv().unwrap();
    assert!(csv.contains("ratio_speedup,naive/multitask,1.633\n"));
    assert!(csv.contains("ratio_memory,naive/multitask,1.618\n"));
    assert!(csv.contains("ratio_size,naive/multitask,1.679\n"));
    let md = reference_report().to_markdown().unwrap();
    assert!(md.contains("| Inf. Time (ms) | 19.000 | 24.000 | 27.000 | 30.000 | 49.000 |"));
    assert!(md.contains("| Memory (MB) | 1203.000 | 1233.000 | 1525.000 | 1552.000 | 2511.000 |"));
    assert!(md.contains("| Size (MB) | 95.000 | 95.000 | 140.000 | 140.000 | 235.000 |"));
}

fn numbers(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '/' || c.is_ascii_alphabetic()))
        .filter(|t| t.contains('.') && t.chars().all(|c| c.is_ascii_digit() || c == '.'))
        .map(str::to_string)
        .collect()
}

#[test]
fn csv_and_markdown_carry_the_same_numbers() {
    let r = synthetic_report();
    let md = r.to_markdown().unwrap();
    let csv = r.to_csv().unwrap();
    let mut a = numbers(&md);
    let mut b = numbers(&csv);
    a.sort();
    b.sort();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(md.matches("n/a").count(), csv.matches("n/a").count());
}

fn synthetic_report() -> DeployReport {
    let mut r = DeployReport::new();
    for (k, d) in Deployment::ALL.into_iter().enumerate() {
        let k = k as u64 + 1;
        r.set(
            d,
            DeploymentStats {
                median_ms: Some(1.25 * k as f64),
                p95_ms: Some(1.5 * k as f64),
                flops: Some(3_000_000 * k + 12_345),
                peak_activation_bytes: Some(65_536 * k),
                memory_bytes: Some(700_000 * k),
                concurrent_memory_bytes: (d == Deployment::Naive).then_some(9_999_999),
                size_bytes: Some(250_000 * k + 7),
            },
        );
    }
    r
}

fn check_golden(name: &str, actual: &[u8]) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("TRUNKSHARE_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read(&path).unwrap();
    assert!(actual == expected, "{name} drifted from the frozen golden file");
}

#[test]
fn rendering_matches_golden_files() {
    let r = synthetic_report();
    check_golden("report.md", r.to_markdown().unwrap().as_bytes());
    check_golden("report.csv", r.to_csv().unwrap().as_bytes());
    check_golden("report.ppm", &r.bar_chart().unwrap().to_ppm());
}

#[test]
fn missing_deployment_is_a_contract_error() {
    let mut r = DeployReport::new();
    r.set(Deployment::Multitask, DeploymentStats::default());
    r.set(Deployment::Naive, DeploymentStats::default());
    assert!(r.ratios().is_ok());
    assert!(matches!(r.to_markdown(), Err(CoreError::Contract(_))));
    assert!(matches!(r.to_csv(), Err(CoreError::Contract(_))));
    assert!(matches!(DeployReport::new().ratios(), Err(CoreError::Contract(_))));
}

#[test]
fn flops_ratio_identity() {
    let multi = Model::new(ModelConfig::default(), TaskMode::Multi).unwrap();
    let ssd = Model::new(ModelConfig::default(), TaskMode::Det).unwrap();
    let fcn = Model::new(ModelConfig::default(), TaskMode::Seg).unwrap();
    let c = multi.cost().unwrap();
    let (t, d, s) = (c.shared_trunk, c.det_branch, c.seg_branch);
    let want = (2 * t + d + s) as f64 / (t + d + s) as f64;
    assert_eq!(flops_ratio(&multi, &ssd, &fcn).unwrap(), want);
    assert!(want > 1.0 && want < 2.0);
}

#[test]
fn flops_ratio_tends_to_two_when_the_trunk_dominates() {
    let ratio = |blocks: usize, width: usize| {
        let cfg = ModelConfig {
            trunk: TrunkConfig {
                stage_blocks: vec![blocks; 3],
                stage_channels: vec![width, 2 * width, 4 * width],
                ..TrunkConfig::default()
            },
            ..ModelConfig::default()
        };
        let m = |mode| Model::new(cfg.clone(), mode).unwrap();
        flops_ratio(&m(TaskMode::Multi), &m(TaskMode::Det), &m(TaskMode::Seg)).unwrap()
    };
    let seq: Vec<f64> = [(1, 16), (2, 32), (4, 64), (8, 128)].iter().map(|&(b, w)| ratio(b, w)).collect();
    assert!(seq.windows(2).all(|w| w[1] > w[0]), "{seq:?}");
    assert!(seq.iter().all(|&r| r < 2.0));
    assert!(2.0 - seq[3] < 0.01, "{seq:?}");
}

#[test]
fn trunk_is_the_whole_size_saving() {
    let bps = 4;
    let cfg = ModelConfig::default();
    let multi = Model::new(cfg.clone(), TaskMode::Multi).unwrap();
    let ssd = Model::new(cfg.clone(), TaskMode::Det).unwrap();
    let fcn = Model::new(cfg, TaskMode::Seg).unwrap();
    let naive = ssd.size_bytes(bps) + fcn.size_bytes(bps);
    assert_eq!(naive - multi.size_bytes(bps), multi.shared_param_count() * bps);

    let (pm, ps, pf) = (
        multi.init_params(0).unwrap(),
        ssd.init_params(0).unwrap(),
        fcn.init_params(0).unwrap(),
    );
    let cfg = BenchConfig {
        timing: false,
        ..BenchConfig::default()
    };
    let report = run_bench(
        Loaded {
            model: &multi,
            params: &pm,
        },
        Loaded { model: &ssd, params: &ps },
        Loaded { model: &fcn, params: &pf },
        &cfg,
        1,
    )
    .unwrap();
    let get = |d| *report.get(d).unwrap();
    let (n, m) = (get(Deployment::Naive), get(Deployment::Multitask));
    assert_eq!(
        n.size_bytes.unwrap() - m.size_bytes.unwrap(),
        (multi.shared_param_count() * bps) as u64
    );
    assert_eq!(
        n.flops.unwrap(),
        get(Deployment::Fcn).flops.unwrap() + get(Deployment::Ssd).flops.unwrap()
    );
    assert!(n.median_ms.is_none());
    let r = report.ratios().unwrap();
    assert!(r.memory.unwrap() > 1.0 && r.size.unwrap() > 1.0 && r.memory_concurrent.unwrap() > r.memory.unwrap());
    assert_eq!(r.flops.unwrap(), flops_ratio(&multi, &ssd, &fcn).unwrap());
}

#[test]
fn timing_preconditions() {
    assert!(matches!(time_forward(|| Ok(()), 4, 30), Err(CoreError::Config(_))));
    assert!(matches!(time_forward(|| Ok(()), 5, 29), Err(CoreError::Config(_))));
    let mut calls = 0;
    let t = time_forward(
        || {
            calls += 1;
            Ok(())
        },
        5,
        31,
    )
    .unwrap();
    assert_eq!(calls, 36);
    assert!(t.median_ms <= t.p95_ms);
}
