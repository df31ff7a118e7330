use proptest::prelude::*;
use trunkshare_core::params::{Binder, ParamStore};
use trunkshare_core::trunk::{Trunk, TrunkConfig};
use trunkshare_tensor::{Graph, OpKind, Tensor};

/// Independent layer-by-layer count: every conv carries a weight and a bias.
fn count_params(cfg: &TrunkConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let mut total = conv(3, cfg.stem_channels, 3);
    let mut cin = cfg.stem_channels;
    for s in 0..3 {
        let ch = cfg.stage_channels[s];
        for b in 0..cfg.stage_blocks[s] {
            let block_in = if b == 0 { cin } else { ch };
            let strided = b == 0 && s > 0;
            total += conv(block_in, ch, 3) + conv(ch, ch, 3);
            if block_in != ch || strided {
                total += conv(block_in, ch, 1);
            }
        }
        cin = ch;
    }
    total
}

/// Static walk of the architecture: op kinds and flops of one single-image forward.
fn static_walk(cfg: &TrunkConfig) -> (usize, usize, usize, usize, u64) {
    let (mut convs, mut relus, mut pools, mut adds) = (0, 0, 0, 0);
    let mut flops = 0u64;
    let conv_flops = |cin: usize, cout: usize, k: usize, h: usize, w: usize| (2 * cout * cin * k * k * h * w + cout * h * w) as u64;
    let (h0, w0) = cfg.input_size;
    let (mut h, mut w) = ((h0 - 1) / 2 + 1, (w0 - 1) / 2 + 1);
    flops += conv_flops(3, cfg.stem_channels, 3, h, w);
    flops += (cfg.stem_channels * h * w) as u64;
    convs += 1;
    relus += 1;
    h /= 2;
    w /= 2;
    flops += (3 * cfg.stem_channels * h * w) as u64;
    pools += 1;
    let mut cin = cfg.stem_channels;
    for s in 0..3 {
        let ch = cfg.stage_channels[s];
        for b in 0..cfg.stage_blocks[s] {
            let block_in = if b == 0 { cin } else { ch };
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
            flops += conv_flops(block_in, ch, 3, ho, wo) + (ch * ho * wo) as u64;
            flops += conv_flops(ch, ch, 3, ho, wo);
            convs += 2;
            relus += 2;
            adds += 1;
            if block_in != ch || stride != 1 {
                flops += conv_flops(block_in, ch, 1, ho, wo);
                convs += 1;
            }
            flops += 2 * (ch * ho * wo) as u64;
            h = ho;
            w = wo;
        }
        cin = ch;
    }
    (convs, relus, pools, adds, flops)
}

fn run(trunk: &Trunk, params: &ParamStore, images: Tensor) -> (Graph, Vec<Tensor>) {
    let mut graph = Graph::inference();
    let mut binder = Binder::new(params);
    let x = graph.input(images);
    let pyr = trunk.forward(&mut graph, &mut binder, x).unwrap();
    let taps = pyr.levels.iter().map(|&v| graph.value(v).clone()).collect();
    (graph, taps)
}

fn random_image(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut s = seed;
    Tensor::from_fn(&[n, 3, h, w], |_| {
        s = trunkshare_core::rng::splitmix64(s);
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
}

#[test]
fn default_param_count_matches_layer_count() {
    let cfg = TrunkConfig::default();
    let trunk = Trunk::new(cfg.clone()).unwrap();
    assert_eq!(trunk.param_count(), count_params(&cfg));
    assert_eq!(trunk.param_count(), 174_048);
}

#[test]
fn same_seed_gives_identical_params_and_outputs() {
    let (trunk, a) = Trunk::build(TrunkConfig::default(), 5).unwrap();
    let (_, b) = Trunk::build(TrunkConfig::default(), 5).unwrap();
    assert_eq!(a, b);
    let img = random_image(1, 64, 64, 1);
    assert_eq!(run(&trunk, &a, img.clone()).1, run(&trunk, &b, img).1);
    let (_, c) = Trunk::build(TrunkConfig::default(), 6).unwrap();
    assert_ne!(a, c);
}

#[test]
fn tap_shapes_follow_strides() {
    let (trunk, params) = Trunk::build(TrunkConfig::default(), 0).unwrap();
    let (_, taps) = run(&trunk, &params, random_image(2, 64, 64, 3));
    assert_eq!(taps[0].shape(), &[2, 16, 16, 16]);
    assert_eq!(taps[1].shape(), &[2, 32, 8, 8]);
    assert_eq!(taps[2].shape(), &[2, 64, 4, 4]);
}

#[test]
fn zero_input_and_biases_give_zero_taps() {
    let (trunk, params) = Trunk::build(TrunkConfig::default(), 0).unwrap();
    assert!(params
        .iter()
        .filter(|(n, _)| n.ends_with(".bias"))
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    let (_, taps) = run(&trunk, &params, Tensor::zeros(&[1, 3, 64, 64]));
    for t in taps {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn op_counter_matches_static_walk() {
    let cfg = TrunkConfig::default();
    let (trunk, params) = Trunk::build(cfg.clone(), 0).unwrap();
    let (graph, _) = run(&trunk, &params, random_image(1, 64, 64, 2));
    let (convs, relus, pools, adds, flops) = static_walk(&cfg);
    let ops = graph.op_counter();
    assert_eq!(ops.get(OpKind::Conv2d) as usize, convs);
    assert_eq!(ops.get(OpKind::Relu) as usize, relus);
    assert_eq!(ops.get(OpKind::MaxPool) as usize, pools);
    assert_eq!(ops.get(OpKind::Add) as usize, adds);
    assert_eq!(ops.total() as usize, convs + relus + pools + adds);
    assert_eq!(graph.total_flops(), flops);
}

#[test]
fn smallest_conv_costs_three_flops() {
    let mut graph = Graph::inference();
    let x = graph.input(Tensor::full(&[1, 1, 1, 1], 2.0));
    let w = graph.param(Tensor::full(&[1, 1, 1, 1], 3.0));
    let b = graph.param(Tensor::zeros(&[1]));
    graph.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(graph.total_flops(), 3);
}

#[test]
fn doubling_resolution_quadruples_conv_flops() {
    let small = TrunkConfig {
        input_size: (32, 32),
        ..TrunkConfig::default()
    };
    let big = TrunkConfig {
        input_size: (64, 64),
        ..TrunkConfig::default()
    };
    let conv_flops = |cfg: &TrunkConfig| {
        let (trunk, params) = Trunk::build(cfg.clone(), 0).unwrap();
        let (graph, _) = run(&trunk, &params, random_image(1, cfg.input_size.0, cfg.input_size.1, 0));
        graph
            .nodes()
            .filter(|n| n.role == trunkshare_tensor::NodeRole::Op(OpKind::Conv2d))
            .map(|n| n.flops)
            .sum::<u64>()
    };
    assert_eq!(conv_flops(&big), 4 * conv_flops(&small));
    assert_eq!(Trunk::new(small).unwrap().param_count(), Trunk::new(big).unwrap().param_count());
}

#[test]
fn zero_second_conv_makes_plain_block_identity() {
    // stage1.block1 has no projection; its conv2 starts at zero.
    let cfg = TrunkConfig {
        stage_blocks: vec![2, 1, 1],
        ..TrunkConfig::default()
    };
    let (_, params) = Trunk::build(cfg.clone(), 9).unwrap();
    assert!(params
        .get("trunk.stage1.block1.conv2.weight")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    let first = Trunk::segment(cfg.clone(), "trunk", 0..=1).unwrap();
    let shorter = TrunkConfig {
        stage_blocks: vec![1, 1, 1],
        ..cfg
    };
    let one_block = Trunk::segment(shorter, "trunk", 0..=1).unwrap();
    let img = random_image(1, 64, 64, 4);
    let tap = |t: &Trunk| {
        let mut graph = Graph::inference();
        let mut binder = Binder::new(&params);
        let x = graph.input(img.clone());
        let taps = t.forward_stages(&mut graph, &mut binder, x).unwrap();
        graph.value(taps[0]).clone()
    };
    let with_identity = tap(&first);
    let without = tap(&one_block);
    assert!(with_identity.max_abs_diff(&without) < 1e-12);
}

fn config_strategy() -> impl Strategy<Value = TrunkConfig> {
    (
        1usize..6,
        prop::collection::vec(1usize..3, 3),
        prop::collection::vec(1usize..9, 3),
        1usize..4,
    )
        .prop_map(|(stem, blocks, channels, size)| TrunkConfig {
            stem_channels: stem,
            stage_blocks: blocks,
            stage_channels: channels,
            input_size: (16 * size, 16 * size),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn counts_agree_with_oracles_for_any_config(cfg in config_strategy()) {
        let (trunk, params) = Trunk::build(cfg.clone(), 1).unwrap();
        prop_assert_eq!(trunk.param_count(), count_params(&cfg));
        prop_assert_eq!(params.scalar_count(), count_params(&cfg));
        let (h, w) = cfg.input_size;
        let (graph, taps) = run(&trunk, &params, random_image(1, h, w, 7));
        let (convs, relus, pools, adds, flops) = static_walk(&cfg);
        prop_assert_eq!(graph.op_counter().total() as usize, convs + relus + pools + adds);
        prop_assert_eq!(graph.total_flops(), flops);
        for (t, s) in taps.iter().zip([4, 8, 16]) {
            prop_assert_eq!(&t.shape()[2..], &[h / s, w / s][..]);
        }
    }
}
