use trunkshare_core::config::RunConfig;
use trunkshare_core::data::{Dataset, TaskAvail};
use trunkshare_core::model::{LossWeights, Model, TaskMode};
use trunkshare_core::params::{Binder, Gradients, ParamStore};
use trunkshare_core::train::{metrics_csv, train, windowed_means, Sgd, TrainConfig, TrainOutputs, METRICS_HEADER};
use trunkshare_core::CoreError;
use trunkshare_tensor::{Graph, Tensor};

/// Gradients of `sum(p · x)` with respect to `p`, which are exactly `x`.
fn grads_equal_to(store: &ParamStore, x: &[f64]) -> Gradients {
    let mut graph = Graph::new();
    let mut binder = Binder::new(store);
    let p = binder.get(&mut graph, "p").unwrap();
    let c = graph.input(Tensor::new(vec![x.len()], x.to_vec()).unwrap());
    let prod = graph.mul(p, c).unwrap();
    let s = graph.sum(prod).unwrap();
    graph.backward(s).unwrap();
    binder.gradients(&graph)
}

fn store_with(values: &[f64]) -> ParamStore {
    let mut store = ParamStore::new();
    store
        .insert("p".into(), Tensor::new(vec![values.len()], values.to_vec()).unwrap())
        .unwrap();
    store
}

#[test]
fn sgd_examples() {
    let mut store = store_with(&[0.5, -1.25, 3.0]);
    let g = grads_equal_to(&store, &[0.5, -1.25, 3.0]);
    Sgd::new(1.0, 0.0).step(&mut store, &g).unwrap();
    assert_eq!(store.get("p").unwrap().data(), &[0.0, 0.0, 0.0]);

    let mut store = store_with(&[1.0, 2.0]);
    let mut sgd = Sgd::new(0.1, 0.9);
    let g = grads_equal_to(&store, &[1.0, -1.0]);
    sgd.step(&mut store, &g).unwrap();
    let after_one = store.get("p").unwrap().clone();
    let zero = grads_equal_to(&store, &[0.0, 0.0]);
    sgd.step(&mut store, &zero).unwrap();
    assert_eq!(sgd.velocity("p").unwrap(), &[0.9, -0.9]);
    let moved = store.get("p").unwrap();
    assert!((moved.data()[0] - (after_one.data()[0] - 0.1 * 0.9)).abs() < 1e-15);
}

#[test]
fn momentum_matches_scripted_recurrence() {
    let (lr, m) = (0.05, 0.9);
    let p0 = [0.3, -0.7, 1.1];
    let gs = [[0.2, -0.4, 1.0], [-0.6, 0.1, 0.25], [0.05, 0.9, -0.3]];
    let mut store = store_with(&p0);
    let mut sgd = Sgd::new(lr, m);
    for g in &gs {
        let grads = grads_equal_to(&store, g);
        sgd.step(&mut store, &grads).unwrap();
    }
    for i in 0..3 {
        let (mut p, mut v) = (p0[i], 0.0);
        for g in &gs {
            v = m * v + g[i];
            p -= lr * v;
        }
        assert!((store.get("p").unwrap().data()[i] - p).abs() < 1e-15);
    }
}

fn small_setup(steps: usize) -> (Model, Dataset, TrainConfig) {
    let run = RunConfig::default();
    let data = Dataset::generate(&run.scene, 120, 3, TaskAvail::Both, 0.1).unwrap();
    let model = Model::new(run.model, TaskMode::Multi).unwrap();
    let cfg = TrainConfig {
        steps,
        batch_size: 4,
        eval_every: 10,
        eval_samples: 6,
        ..TrainConfig::default()
    };
    (model, data, cfg)
}

#[test]
fn same_seed_gives_identical_logs_and_params() {
    let (model, data, cfg) = small_setup(20);
    let run = |seed| {
        let mut params = model.init_params(seed).unwrap();
        let out = train(&model, &mut params, &data, &cfg, seed, None).unwrap();
        (metrics_csv(&out.records), params)
    };
    let (log_a, pa) = run(4);
    let (log_b, pb) = run(4);
    assert_eq!(log_a, log_b);
    assert_eq!(pa, pb);
    assert!(log_a.starts_with(METRICS_HEADER));
    assert_ne!(run(5).1, pa);
}

#[test]
fn zero_det_weight_leaves_det_head_untouched() {
    let (model, data, mut cfg) = small_setup(15);
    cfg.loss_weights = LossWeights { det: 0.0, seg: 1.0 };
    let init = model.init_params(2).unwrap();
    let mut params = init.clone();
    train(&model, &mut params, &data, &cfg, 2, None).unwrap();
    let mut det_names = 0;
    for (name, value) in init.iter() {
        if name.starts_with("det.") {
            det_names += 1;
            assert_eq!(params.get(name).unwrap(), value, "{name}");
        }
    }
    assert!(det_names > 0);
    assert_ne!(params.get("seg.score.weight").unwrap(), init.get("seg.score.weight").unwrap());
}

#[test]
fn divergence_keeps_last_checkpoint() {
    let (model, data, mut cfg) = small_setup(40);
    cfg.lr = 1e6;
    cfg.momentum = 0.0;
    cfg.eval_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs::in_dir(dir.path());
    let mut params = model.init_params(0).unwrap();
    let err = train(&model, &mut params, &data, &cfg, 0, Some(&outputs)).unwrap_err();
    let CoreError::Divergence { step, .. } = err else {
        panic!("expected divergence, got {err}");
    };
    let saved = ParamStore::load(&outputs.checkpoint).unwrap();
    assert!(saved.iter().all(|(_, t)| t.is_finite()));
    let rows = std::fs::read_to_string(&outputs.metrics).unwrap().lines().count();
    assert_eq!(rows, step);
}

#[test]
fn loss_falls_over_the_first_thousand_steps() {
    let run = RunConfig::default();
    let data = Dataset::generate(&run.scene, run.data.count, 0, run.data.task, run.data.val_fraction).unwrap();
    let model = Model::new(run.model, TaskMode::Multi).unwrap();
    let cfg = TrainConfig {
        steps: 1000,
        eval_every: 0,
        eval_samples: 16,
        ..run.train
    };
    let mut params = model.init_params(0).unwrap();
    let out = train(&model, &mut params, &data, &cfg, 0, None).unwrap();
    let means = windowed_means(&out.records, 50);
    assert_eq!(means.len(), 20);
    assert!(means[19] < means[0], "{means:?}");
}
