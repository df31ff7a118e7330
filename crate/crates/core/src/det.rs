//! SSD-style detection branch: default boxes over the pyramid, anchor matching,
//! offset encoding, multibox loss with hard-negative mining, decoding and NMS.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use trunkshare_tensor::{Graph, Tensor, TensorError, Var};

use crate::error::{CoreError, Result};
use crate::params::{Binder, Init, ParamSpec};
use crate::trunk::NUM_STAGES;

/// Corner-form box, normalized to the image unless stated otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_proper(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.xmin + self.xmax),
            cy: 0.5 * (self.ymin + self.ymax),
            w: self.width(),
            h: self.height(),
        }
    }

    pub fn clipped(&self) -> Self {
        Self {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn to_corners(&self) -> BBox {
        BBox {
            xmin: self.cx - 0.5 * self.w,
            ymin: self.cy - 0.5 * self.h,
            xmax: self.cx + 0.5 * self.w,
            ymax: self.cy + 0.5 * self.h,
        }
    }
}

/// Intersection over union; zero-area boxes overlap nothing.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    inter / (area_a + area_b - inter)
}

/// Ground-truth object: class id ≥ 1 (0 is background) and a normalized box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxSetSpec {
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub feature_shapes: Vec<(usize, usize)>,
}

impl BoxSetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != self.feature_shapes.len() || self.scales.is_empty() {
            return Err(CoreError::Config(format!(
                "{} anchor scales for {} feature levels",
                self.scales.len(),
                self.feature_shapes.len()
            )));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(CoreError::Config("anchor scales must lie in (0, 1]".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::Config("anchor scales must increase with stride".into()));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(CoreError::Config("need at least one positive aspect ratio".into()));
        }
        if self.feature_shapes.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(CoreError::Config("empty feature level".into()));
        }
        Ok(())
    }

    pub fn anchor_count(&self) -> usize {
        self.feature_shapes.iter().map(|(h, w)| h * w).sum::<usize>() * self.aspect_ratios.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefaultBoxes {
    pub boxes: Vec<CenterBox>,
}

impl DefaultBoxes {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `[A, 4]` tensor of `(cx, cy, w, h)` rows.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.boxes.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect();
        Tensor::new(vec![self.boxes.len(), 4], data).expect("non-empty anchor set")
    }
}

/// Anchors ordered level-major, then cell row-major, then aspect ratio.
pub fn generate_default_boxes(spec: &BoxSetSpec) -> Result<DefaultBoxes> {
    spec.validate()?;
    let mut boxes = Vec::with_capacity(spec.anchor_count());
    for (&scale, &(h, w)) in spec.scales.iter().zip(&spec.feature_shapes) {
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) / w as f64;
                let cy = (y as f64 + 0.5) / h as f64;
                for &ar in &spec.aspect_ratios {
                    boxes.push(CenterBox {
                        cx,
                        cy,
                        w: scale * ar.sqrt(),
                        h: scale / ar.sqrt(),
                    });
                }
            }
        }
    }
    Ok(DefaultBoxes { boxes })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variances {
    pub center: f64,
    pub size: f64,
}

impl Default for Variances {
    fn default() -> Self {
        Self { center: 0.1, size: 0.2 }
    }
}

pub fn encode_box(gt: &BBox, anchor: &CenterBox, var: Variances) -> Result<[f64; 4]> {
    if !gt.is_proper() {
        return Err(CoreError::InvalidAnnotation(format!("box {gt:?} has non-positive extent")));
    }
    let g = gt.to_center();
    Ok([
        (g.cx - anchor.cx) / (anchor.w * var.center),
        (g.cy - anchor.cy) / (anchor.h * var.center),
        (g.w / anchor.w).ln() / var.size,
        (g.h / anchor.h).ln() / var.size,
    ])
}

/// Exact inverse of [`encode_box`], without clipping.
pub fn decode_box(t: &[f64; 4], anchor: &CenterBox, var: Variances) -> BBox {
    CenterBox {
        cx: anchor.cx + t[0] * var.center * anchor.w,
        cy: anchor.cy + t[1] * var.center * anchor.h,
        w: anchor.w * (t[2] * var.size).exp(),
        h: anchor.h * (t[3] * var.size).exp(),
    }
    .to_corners()
}

/// Decodes `[A, 4]` offsets against the anchors, clipping to the unit square.
pub fn decode_boxes(offsets: &[f64], anchors: &DefaultBoxes, var: Variances) -> Vec<BBox> {
    offsets
        .chunks_exact(4)
        .zip(&anchors.boxes)
        .map(|(t, a)| decode_box(&[t[0], t[1], t[2], t[3]], a, var).clipped())
        .collect()
}

/// Anchor-to-ground-truth assignment for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Class per anchor; 0 = background.
    pub labels: Vec<usize>,
    /// Encoded offsets per anchor (zero for background anchors).
    pub targets: Vec<[f64; 4]>,
    pub positive: Vec<bool>,
    /// Index of the matched ground truth for positive anchors.
    pub matched_gt: Vec<Option<usize>>,
}

impl Assignment {
    pub fn num_positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// SSD matching. Every anchor whose best IoU (ties → lower gt index) reaches `threshold`
/// is positive for that gt; then each gt in order claims its best still-unclaimed anchor
/// (ties → lower anchor index), overriding threshold matches, so every gt keeps at
/// least one positive.
pub fn match_anchors(gt: &[GtBox], anchors: &DefaultBoxes, threshold: f64, var: Variances) -> Result<Assignment> {
    for g in gt {
        if g.class_id == 0 {
            return Err(CoreError::InvalidAnnotation(
                "ground-truth class 0 is reserved for background".into(),
            ));
        }
        if !g.bbox.is_proper() {
            return Err(CoreError::InvalidAnnotation(format!("box {:?} has non-positive extent", g.bbox)));
        }
    }
    let a_count = anchors.len();
    let corners: Vec<BBox> = anchors.boxes.iter().map(CenterBox::to_corners).collect();
    let overlaps: Vec<Vec<f64>> = gt.iter().map(|g| corners.iter().map(|a| iou(&g.bbox, a)).collect()).collect();

    let mut matched: Vec<Option<usize>> = vec![None; a_count];
    for (a, slot) in matched.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, row) in overlaps.iter().enumerate() {
            if best.is_none_or(|(_, v)| row[a] > v) {
                best = Some((g, row[a]));
            }
        }
        if let Some((g, v)) = best {
            if v >= threshold {
                *slot = Some(g);
            }
        }
    }
    let mut claimed = vec![false; a_count];
    for (g, row) in overlaps.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, &v) in row.iter().enumerate() {
            if !claimed[a] && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        if let Some((a, _)) = best {
            claimed[a] = true;
            matched[a] = Some(g);
        }
    }

    let mut labels = vec![0; a_count];
    let mut targets = vec![[0.0; 4]; a_count];
    for (a, m) in matched.iter().enumerate() {
        if let Some(g) = *m {
            labels[a] = gt[g].class_id;
            targets[a] = encode_box(&gt[g].bbox, &anchors.boxes[a], var)?;
        }
    }
    Ok(Assignment {
        positive: labels.iter().map(|&l| l > 0).collect(),
        labels,
        targets,
        matched_gt: matched,
    })
}

/// Multibox loss value and its parts.
#[derive(Clone, Copy, Debug)]
pub struct MultiboxLoss {
    pub total: Var,
    pub conf: f64,
    pub loc: f64,
    pub num_positives: usize,
    pub num_negatives: usize,
    /// True when no image had a positive anchor; then `loc` is 0 and the
    /// confidence term covers a fixed number of mined negatives per image.
    pub no_positives: bool,
}

/// Background loss (`-log softmax[0]`) of one confidence row.
pub fn background_loss(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - row[0]
}

/// Multibox loss over a batch whose rows are `images × A` anchors.
///
/// `assignments[i]` is `None` for images without detection annotations; their rows
/// do not contribute. For each annotated image the `floor(neg_ratio·P_i)` negatives
/// with the highest background loss are mined (ties → lower anchor index). The
/// confidence and localization terms are sums normalized by the batch positive count.
pub fn multibox_loss(graph: &mut Graph, conf: Var, loc: Var, assignments: &[Option<&Assignment>], neg_ratio: f64) -> Result<MultiboxLoss> {
    let [m, classes] = graph.value(conf).dims2()?;
    let [m_loc, four] = graph.value(loc).dims2()?;
    if m != m_loc || four != 4 || assignments.is_empty() || m % assignments.len() != 0 {
        return Err(TensorError::Dimension(format!(
            "multibox: conf [{m}, {classes}] and loc [{m_loc}, {four}] inconsistent with {} images",
            assignments.len()
        ))
        .into());
    }
    if !(neg_ratio >= 0.0) {
        return Err(CoreError::Config(format!("negative mining ratio {neg_ratio}")));
    }
    let a_count = m / assignments.len();
    if let Some(bad) = assignments.iter().flatten().find(|a| a.labels.len() != a_count) {
        return Err(TensorError::Dimension(format!(
            "multibox: assignment covers {} anchors, predictions have {a_count}",
            bad.labels.len()
        ))
        .into());
    }
    if assignments.iter().all(Option::is_none) {
        return Err(CoreError::Contract("multibox loss without any annotated image".into()));
    }
    let total_pos: usize = assignments.iter().flatten().map(|a| a.num_positives()).sum();
    let no_positives = total_pos == 0;

    let conf_values = graph.value(conf).data().to_vec();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut pos_rows = Vec::new();
    let mut loc_targets = Vec::new();
    let mut num_negatives = 0;
    for (img, assign) in assignments.iter().enumerate() {
        let Some(assign) = assign else { continue };
        let base = img * a_count;
        let p = assign.num_positives();
        let budget = if no_positives {
            (neg_ratio.floor() as usize).max(1)
        } else {
            (neg_ratio * p as f64).floor() as usize
        };
        let mut negatives: Vec<(usize, f64)> = (0..a_count)
            .filter(|&a| !assign.positive[a])
            .map(|a| {
                let r = base + a;
                (a, background_loss(&conf_values[r * classes..(r + 1) * classes]))
            })
            .collect();
        negatives.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(Ordering::Equal).then(x.0.cmp(&y.0)));
        negatives.truncate(budget);
        num_negatives += negatives.len();
        let mut chosen: Vec<usize> = negatives.into_iter().map(|(a, _)| a).collect();
        chosen.extend((0..a_count).filter(|&a| assign.positive[a]));
        chosen.sort_unstable();
        for a in chosen {
            rows.push(base + a);
            targets.push(assign.labels[a]);
            if assign.positive[a] {
                pos_rows.push(base + a);
                loc_targets.extend_from_slice(&assign.targets[a]);
            }
        }
    }
    let norm = total_pos.max(1) as f64;
    let conf_rows = graph.select_rows(conf, &rows)?;
    let conf_loss = graph.softmax_cross_entropy_with_norm(conf_rows, &targets, usize::MAX, Some(norm))?;
    let conf_value = graph.value(conf_loss).item()?;
    let (total, loc_value) = if pos_rows.is_empty() {
        (conf_loss, 0.0)
    } else {
        let loc_rows = graph.select_rows(loc, &pos_rows)?;
        let target = graph.input(Tensor::new(vec![pos_rows.len(), 4], loc_targets)?);
        let loc_loss = graph.smooth_l1_with_norm(loc_rows, target, norm)?;
        let loc_value = graph.value(loc_loss).item()?;
        (graph.add(conf_loss, loc_loss)?, loc_value)
    };
    Ok(MultiboxLoss {
        total,
        conf: conf_value,
        loc: loc_value,
        num_positives: total_pos,
        num_negatives,
        no_positives,
    })
}

/// One scored detection in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Per-class greedy NMS. Candidates are visited by descending score (ties → lower
/// index); a candidate is kept when its IoU with every kept box of its class is at
/// most `iou_threshold`, up to `top_k` per class. Returns kept indices grouped by
/// ascending class, descending score within a class.
pub fn nms(dets: &[Detection], iou_threshold: f64, top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[a]
            .class_id
            .cmp(&dets[b].class_id)
            .then(dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    let mut class_start = 0;
    for &i in &order {
        if kept.len() > class_start && dets[kept[class_start]].class_id != dets[i].class_id {
            class_start = kept.len();
        }
        let same_class = &kept[class_start..];
        if same_class.len() >= top_k {
            continue;
        }
        if same_class.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetHeadConfig {
    /// Object classes, excluding background.
    pub num_classes: usize,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub match_threshold: f64,
    pub neg_ratio: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub score_threshold: f64,
    pub variances: Variances,
    pub init_std: f64,
}

impl Default for DetHeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            scales: vec![0.15, 0.35, 0.6],
            aspect_ratios: vec![1.0, 2.0, 0.5],
            match_threshold: 0.5,
            neg_ratio: 3.0,
            nms_iou: 0.45,
            top_k: 200,
            score_threshold: 0.01,
            variances: Variances::default(),
            init_std: 0.01,
        }
    }
}

/// Per-level 3×3 class and offset convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct DetHead {
    cfg: DetHeadConfig,
    in_channels: [usize; NUM_STAGES],
    feature_shapes: [(usize, usize); NUM_STAGES],
    prefix: String,
}

impl DetHead {
    pub fn new(cfg: DetHeadConfig, in_channels: [usize; NUM_STAGES], feature_shapes: [(usize, usize); NUM_STAGES]) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(CoreError::Config("detection needs at least one class".into()));
        }
        let head = Self {
            cfg,
            in_channels,
            feature_shapes,
            prefix: "det".into(),
        };
        head.box_spec().validate()?;
        Ok(head)
    }

    pub fn config(&self) -> &DetHeadConfig {
        &self.cfg
    }

    pub fn box_spec(&self) -> BoxSetSpec {
        BoxSetSpec {
            scales: self.cfg.scales.clone(),
            aspect_ratios: self.cfg.aspect_ratios.clone(),
            feature_shapes: self.feature_shapes.to_vec(),
        }
    }

    pub fn default_boxes(&self) -> Result<DefaultBoxes> {
        generate_default_boxes(&self.box_spec())
    }

    pub fn anchor_count(&self) -> usize {
        self.box_spec().anchor_count()
    }

    fn ars(&self) -> usize {
        self.cfg.aspect_ratios.len()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let init = Init::Normal(self.cfg.init_std);
        let mut specs = Vec::new();
        for (l, &cin) in self.in_channels.iter().enumerate() {
            for (name, k) in [("conf", self.cfg.num_classes + 1), ("loc", 4)] {
                let base = format!("{}.level{l}.{name}", self.prefix);
                specs.push(ParamSpec::new(format!("{base}.weight"), vec![self.ars() * k, cin, 3, 3], init));
                specs.push(ParamSpec::new(format!("{base}.bias"), vec![self.ars() * k], Init::Zeros));
            }
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Returns `(conf_logits [N·A, C+1], loc_preds [N·A, 4])`, rows aligned with
    /// [`DetHead::default_boxes`] within each image.
    pub fn forward(&self, graph: &mut Graph, params: &mut Binder<'_>, levels: &[Var; NUM_STAGES]) -> Result<(Var, Var)> {
        let mut conf = Vec::with_capacity(NUM_STAGES);
        let mut loc = Vec::with_capacity(NUM_STAGES);
        for (l, &x) in levels.iter().enumerate() {
            let shape = graph.shape(x);
            if shape.len() != 4 || shape[1] != self.in_channels[l] || (shape[2], shape[3]) != self.feature_shapes[l] {
                return Err(TensorError::Dimension(format!(
                    "detection level {l}: expected {} channels at {:?}, got {shape:?}",
                    self.in_channels[l], self.feature_shapes[l]
                ))
                .into());
            }
            for (name, out) in [("conf", &mut conf), ("loc", &mut loc)] {
                let base = format!("{}.level{l}.{name}", self.prefix);
                let w = params.get(graph, &format!("{base}.weight"))?;
                let b = params.get(graph, &format!("{base}.bias"))?;
                out.push(graph.conv2d(x, w, b, 1, 1)?);
            }
        }
        let conf = graph.to_rows(&conf, self.ars())?;
        let loc = graph.to_rows(&loc, self.ars())?;
        Ok((conf, loc))
    }

    /// Scores, decodes and suppresses raw head outputs. `conf` and `loc` hold
    /// `images × A` rows; returns detections per image.
    pub fn postprocess(&self, conf: &Tensor, loc: &Tensor, anchors: &DefaultBoxes) -> Result<Vec<Vec<Detection>>> {
        let classes = self.cfg.num_classes + 1;
        let a_count = anchors.len();
        let [m, k] = conf.dims2()?;
        if k != classes || m % a_count != 0 || loc.shape() != [m, 4] {
            return Err(TensorError::Dimension(format!(
                "postprocess: conf {:?} / loc {:?} do not match {a_count} anchors",
                conf.shape(),
                loc.shape()
            ))
            .into());
        }
        let mut out = Vec::with_capacity(m / a_count);
        for img in 0..m / a_count {
            let rows = img * a_count..(img + 1) * a_count;
            let boxes = decode_boxes(&loc.data()[rows.start * 4..rows.end * 4], anchors, self.cfg.variances);
            let mut candidates = Vec::new();
            for (a, row) in conf.data()[rows.start * classes..rows.end * classes]
                .chunks_exact(classes)
                .enumerate()
            {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                let denom: f64 = exp.iter().sum();
                if !boxes[a].is_proper() {
                    continue;
                }
                for (c, &e) in exp.iter().enumerate().skip(1) {
                    let score = e / denom;
                    if score >= self.cfg.score_threshold {
                        candidates.push(Detection {
                            class_id: c,
                            score,
                            bbox: boxes[a],
                        });
                    }
                }
            }
            let kept = nms(&candidates, self.cfg.nms_iou, self.cfg.top_k);
            out.push(kept.into_iter().map(|i| candidates[i]).collect());
        }
        Ok(out)
    }
}

/// Detection dump: `image_id,class_id,score,xmin,ymin,xmax,ymax`, six decimals.
pub fn detections_to_csv(per_image: &[(usize, Vec<Detection>)]) -> String {
    let mut s = String::from("image_id,class_id,score,xmin,ymin,xmax,ymax\n");
    for (image_id, dets) in per_image {
        for d in dets {
            let b = d.bbox;
            let _ = writeln!(
                s,
                "{image_id},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                d.class_id, d.score, b.xmin, b.ymin, b.xmax, b.ymax
            );
        }
    }
    s
}

/// Parses a detection dump into `(image_id, detection)` rows in file order.
pub fn detections_from_csv(text: &str) -> Result<Vec<(usize, Detection)>> {
    let mut lines = text.lines();
    if lines.next() != Some("image_id,class_id,score,xmin,ymin,xmax,ymax") {
        return Err(CoreError::format("detections", "missing or wrong header"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || CoreError::format("detections", format!("line {}: {line:?}", n + 2));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad());
        out.push((
            f[0].trim().parse().map_err(|_| bad())?,
            Detection {
                class_id: f[1].trim().parse().map_err(|_| bad())?,
                score: num(2)?,
                bbox: BBox::new(num(3)?, num(4)?, num(5)?, num(6)?),
            },
        ));
    }
    Ok(out)
}
