use proptest::prelude::*;
use rand::RngExt;
use trunkshare_core::det::{
    decode_box, decode_boxes, encode_box, generate_default_boxes, iou, match_anchors, multibox_loss, nms, Assignment, BBox, BoxSetSpec,
    CenterBox, DefaultBoxes, DetHead, DetHeadConfig, Detection, GtBox, Variances,
};
use trunkshare_core::params::{Binder, ParamStore};
use trunkshare_core::rng::{rng, Rng};
use trunkshare_tensor::{Graph, Tensor};

fn random_box(r: &mut Rng) -> BBox {
    let (x0, y0) = (r.random_range(0.0..0.8), r.random_range(0.0..0.8));
    BBox::new(x0, y0, x0 + r.random_range(0.05..0.4), y0 + r.random_range(0.05..0.4))
}

fn toy_anchors(levels: &[(usize, usize)], scales: &[f64], ars: &[f64]) -> DefaultBoxes {
    generate_default_boxes(&BoxSetSpec {
        scales: scales.to_vec(),
        aspect_ratios: ars.to_vec(),
        feature_shapes: levels.to_vec(),
    })
    .unwrap()
}

#[test]
fn iou_matches_rasterized_area() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 1.0, 3.0, 3.0);
    let step = 1e-3;
    let n = (3.0 / step) as usize;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..n {
        let y = (i as f64 + 0.5) * step;
        for j in 0..n {
            let x = (j as f64 + 0.5) * step;
            let ina = x < a.xmax && y < a.ymax;
            let inb = x > b.xmin && y > b.ymin;
            inter += (ina && inb) as u64;
            union += (ina || inb) as u64;
        }
    }
    assert!((iou(&a, &b) - inter as f64 / union as f64).abs() < 1e-3);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
    assert_eq!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 1.5)), 0.0);
}

#[test]
fn default_box_layout() {
    let one = toy_anchors(&[(1, 1)], &[0.5], &[1.0]);
    assert_eq!(
        one.boxes,
        vec![CenterBox {
            cx: 0.5,
            cy: 0.5,
            w: 0.5,
            h: 0.5
        }]
    );
    let grid = toy_anchors(&[(2, 2)], &[0.3], &[1.0]);
    let centers: Vec<(f64, f64)> = grid.boxes.iter().map(|b| (b.cx, b.cy)).collect();
    assert_eq!(centers, vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]);

    let levels = [(16, 16), (8, 8), (4, 4)];
    let toy = toy_anchors(&levels, &[0.1, 0.3, 0.6], &[1.0, 2.0]);
    let by_formula: usize = levels.iter().map(|(h, w)| h * w * 2).sum();
    let mut enumerated = 0;
    for (h, w) in levels {
        for _ in 0..h * w {
            enumerated += 2;
        }
    }
    assert_eq!(toy.len(), 672);
    assert_eq!(by_formula, 672);
    assert_eq!(enumerated, 672);
    let ar2 = toy.boxes[1];
    assert!((ar2.w - 0.1 * 2f64.sqrt()).abs() < 1e-15 && (ar2.h - 0.1 / 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn encoding_examples() {
    let var = Variances::default();
    let anchor = CenterBox {
        cx: 0.5,
        cy: 0.5,
        w: 0.2,
        h: 0.2,
    };
    assert!(encode_box(&anchor.to_corners(), &anchor, var)
        .unwrap()
        .iter()
        .all(|v| v.abs() < 1e-12));
    let gt = CenterBox {
        cx: 0.52,
        cy: 0.5,
        w: 0.4,
        h: 0.2,
    }
    .to_corners();
    let t = encode_box(&gt, &anchor, var).unwrap();
    let expected = [1.0, 0.0, 2f64.ln() / 0.2, 0.0];
    for k in 0..4 {
        assert!((t[k] - expected[k]).abs() < 1e-12, "{t:?}");
    }
    let back = decode_box(&t, &anchor, var);
    assert!((back.xmin - gt.xmin).abs() < 1e-12 && (back.xmax - gt.xmax).abs() < 1e-12);
    assert!(encode_box(&BBox::new(0.2, 0.2, 0.2, 0.5), &anchor, var).is_err());
}

/// O(A·G) reference matcher written directly from the matching rules.
fn reference_match(gt: &[GtBox], anchors: &DefaultBoxes, threshold: f64) -> Vec<Option<usize>> {
    let a_count = anchors.len();
    let overlap = |g: usize, a: usize| iou(&gt[g].bbox, &anchors.boxes[a].to_corners());
    let mut owner = vec![None; a_count];
    for a in 0..a_count {
        let mut best_g = None;
        let mut best_v = f64::NEG_INFINITY;
        for g in 0..gt.len() {
            if overlap(g, a) > best_v {
                best_v = overlap(g, a);
                best_g = Some(g);
            }
        }
        if best_v >= threshold {
            owner[a] = best_g;
        }
    }
    let mut taken = vec![false; a_count];
    for g in 0..gt.len() {
        let mut best_a = None;
        let mut best_v = f64::NEG_INFINITY;
        for a in 0..a_count {
            if !taken[a] && overlap(g, a) > best_v {
                best_v = overlap(g, a);
                best_a = Some(a);
            }
        }
        let a = best_a.unwrap();
        taken[a] = true;
        owner[a] = Some(g);
    }
    owner
}

#[test]
fn matching_agrees_with_brute_force() {
    let var = Variances::default();
    let anchors = toy_anchors(&[(6, 6), (3, 3), (2, 2)], &[0.15, 0.35, 0.6], &[1.0, 2.0, 0.5]);
    let mut r = rng(11);
    for _ in 0..120 {
        let n = r.random_range(1..4);
        let gt: Vec<GtBox> = (0..n)
            .map(|_| GtBox {
                class_id: r.random_range(1..4),
                bbox: random_box(&mut r),
            })
            .collect();
        let got = match_anchors(&gt, &anchors, 0.5, var).unwrap();
        let owner = reference_match(&gt, &anchors, 0.5);
        assert_eq!(got.matched_gt, owner);
        for a in 0..anchors.len() {
            let label = owner[a].map_or(0, |g| gt[g].class_id);
            assert_eq!(got.labels[a], label);
            assert_eq!(got.positive[a], label > 0);
            let target = match owner[a] {
                Some(g) => encode_box(&gt[g].bbox, &anchors.boxes[a], var).unwrap(),
                None => [0.0; 4],
            };
            assert_eq!(got.targets[a], target);
        }
    }
}

#[test]
fn matching_edge_cases() {
    let var = Variances::default();
    let anchors = toy_anchors(&[(4, 4)], &[0.25], &[1.0]);
    let empty = match_anchors(&[], &anchors, 0.5, var).unwrap();
    assert!(empty.positive.iter().all(|&p| !p));
    let exact = GtBox {
        class_id: 2,
        bbox: anchors.boxes[5].to_corners(),
    };
    let got = match_anchors(&[exact], &anchors, 0.5, var).unwrap();
    assert!(got.positive[5]);
    assert_eq!(got.labels[5], 2);
    assert!(got.targets[5].iter().all(|v| v.abs() < 1e-12));
    let background = GtBox { class_id: 0, ..exact };
    assert!(match_anchors(&[background], &anchors, 0.5, var).is_err());
}

/// Direct multibox value: CE over positives plus the top-K background-loss
/// negatives per image, smooth L1 over positives, both divided by max(P, 1).
fn reference_multibox(conf: &Tensor, loc: &Tensor, assigns: &[&Assignment], neg_ratio: f64) -> f64 {
    let classes = conf.shape()[1];
    let a_count = assigns[0].labels.len();
    let ce = |row: usize, label: usize| {
        let r = &conf.data()[row * classes..(row + 1) * classes];
        let m = r.iter().cloned().fold(f64::MIN, f64::max);
        m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - r[label]
    };
    let p_total: usize = assigns.iter().map(|a| a.positive.iter().filter(|&&p| p).count()).sum();
    let mut conf_sum = 0.0;
    let mut loc_sum = 0.0;
    for (img, a) in assigns.iter().enumerate() {
        let p = a.positive.iter().filter(|&&p| p).count();
        let mut neg: Vec<f64> = Vec::new();
        for i in 0..a_count {
            let row = img * a_count + i;
            if a.positive[i] {
                conf_sum += ce(row, a.labels[i]);
                for k in 0..4 {
                    let d = (loc.data()[row * 4 + k] - a.targets[i][k]).abs();
                    loc_sum += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
                }
            } else {
                neg.push(ce(row, 0));
            }
        }
        neg.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let k = if p_total == 0 {
            (neg_ratio.floor() as usize).max(1)
        } else {
            (neg_ratio * p as f64).floor() as usize
        };
        conf_sum += neg.iter().take(k).sum::<f64>();
    }
    (conf_sum + loc_sum) / p_total.max(1) as f64
}

fn random_assignment(r: &mut Rng, a_count: usize, classes: usize, positives: usize) -> Assignment {
    let mut labels = vec![0; a_count];
    let mut idx: Vec<usize> = (0..a_count).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), r);
    for &i in idx.iter().take(positives) {
        labels[i] = r.random_range(1..classes);
    }
    let targets = labels
        .iter()
        .map(|&l| {
            if l > 0 {
                [0; 4].map(|_| r.random_range(-2.0..2.0))
            } else {
                [0.0; 4]
            }
        })
        .collect();
    Assignment {
        positive: labels.iter().map(|&l| l > 0).collect(),
        matched_gt: labels.iter().map(|&l| (l > 0).then_some(0)).collect(),
        labels,
        targets,
    }
}

fn multibox_value(conf: &Tensor, loc: &Tensor, assigns: &[&Assignment], neg_ratio: f64) -> (f64, usize) {
    let mut g = Graph::new();
    let c = g.leaf(conf.clone());
    let l = g.leaf(loc.clone());
    let opts: Vec<Option<&Assignment>> = assigns.iter().map(|a| Some(*a)).collect();
    let out = multibox_loss(&mut g, c, l, &opts, neg_ratio).unwrap();
    (g.value(out.total).item().unwrap(), out.num_negatives)
}

#[test]
fn multibox_matches_enumeration_oracle() {
    let mut r = rng(3);
    for case in 0..150 {
        let images = 1 + case % 2;
        let a_count = 8;
        let classes = 4;
        let assigns: Vec<Assignment> = (0..images)
            .map(|_| {
                let p = r.random_range(0..3);
                random_assignment(&mut r, a_count, classes, p)
            })
            .collect();
        let refs: Vec<&Assignment> = assigns.iter().collect();
        let conf = Tensor::from_fn(&[images * a_count, classes], |_| r.random_range(-3.0..3.0));
        let loc = Tensor::from_fn(&[images * a_count, 4], |_| r.random_range(-3.0..3.0));
        let (got, _) = multibox_value(&conf, &loc, &refs, 3.0);
        let want = reference_multibox(&conf, &loc, &refs, 3.0);
        assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
    }
}

#[test]
fn multibox_examples() {
    let mut r = rng(4);
    let a = random_assignment(&mut r, 10, 3, 1);
    let conf = Tensor::from_fn(&[10, 3], |_| r.random_range(-1.0..1.0));
    let loc = Tensor::zeros(&[10, 4]);
    let (_, negatives) = multibox_value(&conf, &loc, &[&a], 3.0);
    assert_eq!(negatives, 3);

    let perfect_conf = Tensor::from_fn(&[10, 3], |i| if i % 3 == a.labels[i / 3] { 1000.0 } else { 0.0 });
    let perfect_loc = Tensor::new(vec![10, 4], a.targets.iter().flatten().copied().collect()).unwrap();
    let (loss, _) = multibox_value(&perfect_conf, &perfect_loc, &[&a], 3.0);
    assert!(loss < 1e-6);

    let none = random_assignment(&mut r, 10, 3, 0);
    let mut g = Graph::new();
    let c = g.leaf(conf.clone());
    let l = g.leaf(loc.clone());
    let out = multibox_loss(&mut g, c, l, &[Some(&none)], 3.0).unwrap();
    assert!(out.no_positives);
    assert_eq!(out.loc, 0.0);
    assert_eq!(out.num_negatives, 3);
}

/// Quadratic greedy NMS: every box suppresses all later same-class boxes it overlaps.
fn reference_nms(dets: &[Detection], thr: f64, top_k: usize) -> Vec<usize> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == c).collect();
        idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut suppressed = vec![false; idx.len()];
        let mut kept = 0;
        for i in 0..idx.len() {
            if suppressed[i] || kept == top_k {
                continue;
            }
            out.push(idx[i]);
            kept += 1;
            for j in i + 1..idx.len() {
                if iou(&dets[idx[i]].bbox, &dets[idx[j]].bbox) > thr {
                    suppressed[j] = true;
                }
            }
        }
    }
    out
}

fn random_dets(r: &mut Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            class_id: r.random_range(1..4),
            score: (r.random_range(0..20) as f64) / 20.0,
            bbox: random_box(r),
        })
        .collect()
}

#[test]
fn nms_agrees_with_quadratic_reference() {
    let mut r = rng(5);
    for case in 0..150 {
        let dets = random_dets(&mut r, 50);
        let top_k = if case % 3 == 0 { 4 } else { 200 };
        assert_eq!(nms(&dets, 0.45, top_k), reference_nms(&dets, 0.45, top_k), "case {case}");
    }
}

#[test]
fn nms_examples() {
    let b = BBox::new(0.1, 0.1, 0.4, 0.4);
    let one = [Detection {
        class_id: 1,
        score: 0.3,
        bbox: b,
    }];
    assert_eq!(nms(&one, 0.45, 200), vec![0]);
    let two = [
        Detection {
            class_id: 1,
            score: 0.8,
            bbox: b,
        },
        Detection {
            class_id: 1,
            score: 0.9,
            bbox: b,
        },
    ];
    assert_eq!(nms(&two, 0.45, 200), vec![1]);
}

fn head_setup(seed: u64) -> (DetHead, ParamStore, [Tensor; 3]) {
    let cfg = DetHeadConfig::default();
    let shapes = [(4, 4), (2, 2), (1, 1)];
    let channels = [3, 4, 5];
    let head = DetHead::new(cfg, channels, shapes).unwrap();
    let store = ParamStore::from_specs(&head.param_specs(), seed).unwrap();
    let mut r = rng(seed);
    let levels = [0, 1, 2].map(|l| Tensor::from_fn(&[2, channels[l], shapes[l].0, shapes[l].1], |_| r.random_range(-1.0..1.0)));
    (head, store, levels)
}

#[test]
fn head_rows_follow_anchor_order() {
    let (head, mut store, levels) = head_setup(8);
    for (name, t) in store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>() {
        if name.ends_with("bias") {
            let mut r = rng(name.len() as u64);
            *store.get_mut(&name).unwrap() = Tensor::from_fn(t.shape(), |_| r.random_range(-1.0..1.0));
        }
    }
    let mut g = Graph::inference();
    let mut binder = Binder::new(&store);
    let vars = levels.clone().map(|t| g.input(t));
    let (conf, loc) = head.forward(&mut g, &mut binder, &vars).unwrap();
    let anchors = head.default_boxes().unwrap();
    let a_count = anchors.len();
    assert_eq!(g.shape(conf), &[2 * a_count, 4]);
    assert_eq!(g.shape(loc), &[2 * a_count, 4]);

    // Per-level conv outputs computed independently, then indexed by (image, level, y, x, aspect).
    let ars = head.config().aspect_ratios.clone();
    let scales = head.config().scales.clone();
    let mut row = 0;
    for img in 0..2 {
        for (l, lvl) in levels.iter().enumerate() {
            let mut cg = Graph::inference();
            let x = cg.input(lvl.clone());
            let conv = |cg: &mut Graph, which: &str| {
                let w = cg.param(store.get(&format!("det.level{l}.{which}.weight")).unwrap().clone());
                let b = cg.param(store.get(&format!("det.level{l}.{which}.bias")).unwrap().clone());
                let y = cg.conv2d(x, w, b, 1, 1).unwrap();
                cg.value(y).clone()
            };
            let cmap = conv(&mut cg, "conf");
            let lmap = conv(&mut cg, "loc");
            let [_, _, h, w] = lvl.dims4().unwrap();
            for y in 0..h {
                for xx in 0..w {
                    for (a, ar) in ars.iter().enumerate() {
                        let anchor = anchors.boxes[row % a_count];
                        assert_eq!(anchor.cx, (xx as f64 + 0.5) / w as f64);
                        assert_eq!(anchor.cy, (y as f64 + 0.5) / h as f64);
                        assert_eq!(anchor.w, scales[l] * ar.sqrt());
                        for k in 0..4 {
                            let ch = a * 4 + k;
                            let at = |m: &Tensor| m.data()[((img * m.shape()[1] + ch) * h + y) * w + xx];
                            assert_eq!(g.value(conf).data()[row * 4 + k], at(&cmap));
                            assert_eq!(g.value(loc).data()[row * 4 + k], at(&lmap));
                        }
                        row += 1;
                    }
                }
            }
        }
    }
    assert_eq!(row, 2 * a_count);
}

#[test]
fn zero_head_predicts_anchors() {
    let (head, store, levels) = head_setup(2);
    let mut zero = ParamStore::new();
    for (n, t) in store.iter() {
        zero.insert(n.to_string(), Tensor::zeros(t.shape())).unwrap();
    }
    let mut g = Graph::inference();
    let mut binder = Binder::new(&zero);
    let vars = levels.map(|t| g.input(t));
    let (conf, loc) = head.forward(&mut g, &mut binder, &vars).unwrap();
    assert!(g.value(conf).data().iter().all(|&v| v == 0.0));
    let anchors = head.default_boxes().unwrap();
    let a = anchors.len();
    let decoded = decode_boxes(&g.value(loc).data()[..4 * a], &anchors, head.config().variances);
    for (d, b) in decoded.iter().zip(&anchors.boxes) {
        let want = b.to_corners().clipped();
        assert!((d.xmin - want.xmin).abs() < 1e-15 && (d.ymax - want.ymax).abs() < 1e-15);
    }
}

#[test]
fn head_rejects_wrong_channels() {
    let (head, store, levels) = head_setup(1);
    let mut g = Graph::inference();
    let mut binder = Binder::new(&store);
    let bad = g.input(Tensor::zeros(&[2, 7, 4, 4]));
    let ok1 = g.input(levels[1].clone());
    let ok2 = g.input(levels[2].clone());
    assert!(head.forward(&mut g, &mut binder, &[bad, ok1, ok2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn encode_decode_are_inverse(
        gx in 0.05f64..0.95, gy in 0.05f64..0.95, gw in 0.01f64..1.0, gh in 0.01f64..1.0,
        ax in 0.0f64..1.0, ay in 0.0f64..1.0, aw in 0.01f64..1.0, ah in 0.01f64..1.0,
    ) {
        let var = Variances::default();
        let gt = CenterBox { cx: gx, cy: gy, w: gw, h: gh }.to_corners();
        let anchor = CenterBox { cx: ax, cy: ay, w: aw, h: ah };
        let back = decode_box(&encode_box(&gt, &anchor, var).unwrap(), &anchor, var);
        for (u, v) in [(back.xmin, gt.xmin), (back.ymin, gt.ymin), (back.xmax, gt.xmax), (back.ymax, gt.ymax)] {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_keeps_a_non_overlapping_subset(seed in any::<u64>(), n in 0usize..40, thr in 0.1f64..0.9) {
        let mut r = rng(seed);
        let dets = random_dets(&mut r, n);
        let kept = nms(&dets, thr, 200);
        let mut seen = kept.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), kept.len());
        for (i, &a) in kept.iter().enumerate() {
            prop_assert!(a < n);
            for &b in &kept[i + 1..] {
                if dets[a].class_id == dets[b].class_id {
                    prop_assert!(iou(&dets[a].bbox, &dets[b].bbox) <= thr);
                }
            }
        }
    }

    #[test]
    fn every_gt_gets_a_positive(seed in any::<u64>(), thr in 0.0f64..1.0, n in 1usize..6) {
        let mut r = rng(seed);
        let anchors = toy_anchors(&[(4, 4), (2, 2)], &[0.2, 0.5], &[1.0, 2.0]);
        let gt: Vec<GtBox> = (0..n).map(|_| GtBox { class_id: r.random_range(1..4), bbox: random_box(&mut r) }).collect();
        let a = match_anchors(&gt, &anchors, thr, Variances::default()).unwrap();
        for g in 0..n {
            prop_assert!(a.matched_gt.iter().any(|&m| m == Some(g)));
        }
        for i in 0..anchors.len() {
            prop_assert_eq!(a.positive[i], a.labels[i] > 0);
        }
    }

    #[test]
    fn multibox_is_permutation_equivariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a_count = 12;
        let p = r.random_range(0..4);
        let a = random_assignment(&mut r, a_count, 4, p);
        let conf = Tensor::from_fn(&[a_count, 4], |_| r.random_range(-3.0..3.0));
        let loc = Tensor::from_fn(&[a_count, 4], |_| r.random_range(-3.0..3.0));
        let mut perm: Vec<usize> = (0..a_count).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let pick = |t: &Tensor, k: usize| Tensor::new(vec![a_count, k], perm.iter().flat_map(|&i| t.data()[i * k..(i + 1) * k].to_vec()).collect()).unwrap();
        let pa = Assignment {
            labels: perm.iter().map(|&i| a.labels[i]).collect(),
            targets: perm.iter().map(|&i| a.targets[i]).collect(),
            positive: perm.iter().map(|&i| a.positive[i]).collect(),
            matched_gt: perm.iter().map(|&i| a.matched_gt[i]).collect(),
        };
        let (x, _) = multibox_value(&conf, &loc, &[&a], 3.0);
        let (y, _) = multibox_value(&pick(&conf, 4), &pick(&loc, 4), &[&pa], 3.0);
        prop_assert!((x - y).abs() < 1e-12);
    }
}
