//! Trunk plus task heads. The shared trunk runs once per forward pass and both
//! heads read the same taps; single-task models are the same assembly with one
//! head absent, so parameter names line up across all three modes.

use serde::{Deserialize, Serialize};
use trunkshare_tensor::{Graph, Tensor, TensorError, Var};

use crate::det::{self, Assignment, DefaultBoxes, DetHead, DetHeadConfig, Detection, GtBox};
use crate::error::{CoreError, Result};
use crate::params::{Binder, ParamSpec, ParamStore};
use crate::seg::{self, SegHead, SegHeadConfig, SegMask};
use crate::trunk::{Trunk, TrunkConfig, NUM_STAGES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Multi,
    Det,
    Seg,
}

impl TaskMode {
    pub fn has_det(self) -> bool {
        matches!(self, Self::Multi | Self::Det)
    }

    pub fn has_seg(self) -> bool {
        matches!(self, Self::Multi | Self::Seg)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Multi => "multi",
            Self::Det => "det",
            Self::Seg => "seg",
        }
    }
}

impl std::str::FromStr for TaskMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Self::Multi),
            "det" => Ok(Self::Det),
            "seg" => Ok(Self::Seg),
            other => Err(CoreError::Config(format!("unknown task mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub det: DetHeadConfig,
    pub seg: SegHeadConfig,
    /// Last trunk stage shared by both heads (1..=3). Stages after it are
    /// duplicated per head under `det.trunk` / `seg.trunk`.
    pub fork_after_stage: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkConfig::default(),
            det: DetHeadConfig::default(),
            seg: SegHeadConfig::default(),
            fork_after_stage: NUM_STAGES,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        if !(1..=NUM_STAGES).contains(&self.fork_after_stage) {
            return Err(CoreError::Config(format!(
                "fork_after_stage must be in 1..={NUM_STAGES}, got {}",
                self.fork_after_stage
            )));
        }
        if self.seg.num_classes != self.det.num_classes + 1 {
            return Err(CoreError::Config(format!(
                "segmentation classes ({}) must equal detection classes plus background ({})",
                self.seg.num_classes,
                self.det.num_classes + 1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub det: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { det: 1.0, seg: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.det >= 0.0 && self.seg >= 0.0 && self.det.is_finite() && self.seg.is_finite()) {
            return Err(CoreError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Head outputs of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointOutput {
    /// `(conf_logits [N·A, C+1], loc_preds [N·A, 4])`.
    pub det: Option<(Var, Var)>,
    /// `[N, C, H, W]` class logits.
    pub seg: Option<Var>,
}

/// Per-sample training targets; `None` marks an absent annotation.
#[derive(Clone, Copy, Debug)]
pub struct LossTargets<'a> {
    pub det: &'a [Option<&'a Assignment>],
    pub seg: &'a [Option<&'a SegMask>],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub det_conf: Option<f64>,
    pub det_loc: Option<f64>,
    pub seg: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub parts: LossParts,
}

/// Analytic per-image forward flops of each model component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostBreakdown {
    pub shared_trunk: u64,
    pub det_branch: u64,
    pub seg_branch: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.shared_trunk + self.det_branch + self.seg_branch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    mode: TaskMode,
    shared: Trunk,
    det_trunk: Option<Trunk>,
    seg_trunk: Option<Trunk>,
    det: Option<DetHead>,
    seg: Option<SegHead>,
    anchors: Option<DefaultBoxes>,
}

impl Model {
    pub fn new(cfg: ModelConfig, mode: TaskMode) -> Result<Self> {
        cfg.validate()?;
        let fork = cfg.fork_after_stage;
        let shared = Trunk::segment(cfg.trunk.clone(), "trunk", 0..=fork)?;
        let private = |prefix: &str| -> Result<Option<Trunk>> {
            if fork == NUM_STAGES {
                Ok(None)
            } else {
                Trunk::segment(cfg.trunk.clone(), prefix, fork + 1..=NUM_STAGES).map(Some)
            }
        };
        let ch = &cfg.trunk.stage_channels;
        let taps = cfg.trunk.tap_sizes();
        let (det_trunk, det, anchors) = if mode.has_det() {
            let head = DetHead::new(cfg.det.clone(), [ch[0], ch[1], ch[2]], taps)?;
            let anchors = head.default_boxes()?;
            (private("det.trunk")?, Some(head), Some(anchors))
        } else {
            (None, None, None)
        };
        let (seg_trunk, seg) = if mode.has_seg() {
            let head = SegHead::new(cfg.seg.clone(), ch[1], ch[2], cfg.trunk.input_size)?;
            (private("seg.trunk")?, Some(head))
        } else {
            (None, None)
        };
        Ok(Self {
            cfg,
            mode,
            shared,
            det_trunk,
            seg_trunk,
            det,
            seg,
            anchors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> TaskMode {
        self.mode
    }

    pub fn shared_trunk(&self) -> &Trunk {
        &self.shared
    }

    pub fn det_head(&self) -> Option<&DetHead> {
        self.det.as_ref()
    }

    pub fn seg_head(&self) -> Option<&SegHead> {
        self.seg.as_ref()
    }

    pub fn anchors(&self) -> Option<&DefaultBoxes> {
        self.anchors.as_ref()
    }

    pub fn shared_specs(&self) -> Vec<ParamSpec> {
        self.shared.param_specs()
    }

    /// Parameters private to the detection side (head plus any private trunk stages).
    pub fn det_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.det_trunk.as_ref().map(Trunk::param_specs).unwrap_or_default();
        specs.extend(self.det.as_ref().map(DetHead::param_specs).unwrap_or_default());
        specs
    }

    pub fn seg_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.seg_trunk.as_ref().map(Trunk::param_specs).unwrap_or_default();
        specs.extend(self.seg.as_ref().map(SegHead::param_specs).unwrap_or_default());
        specs
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.shared_specs();
        specs.extend(self.det_specs());
        specs.extend(self.seg_specs());
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    pub fn shared_param_count(&self) -> usize {
        self.shared_specs().iter().map(ParamSpec::numel).sum()
    }

    pub fn size_bytes(&self, bytes_per_scalar: usize) -> usize {
        self.param_count() * bytes_per_scalar
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        ParamStore::from_specs(&self.param_specs(), seed)
    }

    /// Checks that `params` holds exactly this model's parameters with matching shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        params.check_against(&self.param_specs())
    }

    /// Shared trunk taps produced before the fork.
    pub fn trunk_forward(&self, graph: &mut Graph, params: &mut Binder<'_>, images: Var) -> Result<Vec<Var>> {
        self.shared.check_input(graph, images)?;
        self.shared.forward_stages(graph, params, images)
    }

    fn branch_taps(
        &self,
        graph: &mut Graph,
        params: &mut Binder<'_>,
        private: Option<&Trunk>,
        shared: &[Var],
    ) -> Result<[Var; NUM_STAGES]> {
        let mut taps = shared.to_vec();
        if let Some(t) = private {
            let last = *taps.last().expect("shared trunk yields at least one tap");
            taps.extend(t.forward_stages(graph, params, last)?);
        }
        Ok([taps[0], taps[1], taps[2]])
    }

    /// Detection branch (private trunk stages plus head) on the shared taps.
    pub fn det_forward(&self, graph: &mut Graph, params: &mut Binder<'_>, shared: &[Var]) -> Result<(Var, Var)> {
        let head = self
            .det
            .as_ref()
            .ok_or_else(|| CoreError::Contract("model has no detection head".into()))?;
        let taps = self.branch_taps(graph, params, self.det_trunk.as_ref(), shared)?;
        head.forward(graph, params, &taps)
    }

    pub fn seg_forward(&self, graph: &mut Graph, params: &mut Binder<'_>, shared: &[Var]) -> Result<Var> {
        let head = self
            .seg
            .as_ref()
            .ok_or_else(|| CoreError::Contract("model has no segmentation head".into()))?;
        let taps = self.branch_taps(graph, params, self.seg_trunk.as_ref(), shared)?;
        head.forward(graph, params, taps[1], taps[2])
    }

    /// One shared trunk pass feeding every head the model has.
    pub fn forward(&self, graph: &mut Graph, params: &mut Binder<'_>, images: Var) -> Result<JointOutput> {
        let shared = self.trunk_forward(graph, params, images)?;
        let det = match self.det {
            Some(_) => Some(self.det_forward(graph, params, &shared)?),
            None => None,
        };
        let seg = match self.seg {
            Some(_) => Some(self.seg_forward(graph, params, &shared)?),
            None => None,
        };
        Ok(JointOutput { det, seg })
    }

    pub fn assign(&self, gt: &[GtBox]) -> Result<Assignment> {
        let (head, anchors) = match (&self.det, &self.anchors) {
            (Some(h), Some(a)) => (h, a),
            _ => return Err(CoreError::Contract("model has no detection head".into())),
        };
        let cfg = head.config();
        if let Some(g) = gt.iter().find(|g| g.class_id > cfg.num_classes) {
            return Err(CoreError::InvalidAnnotation(format!("detection class {} out of range", g.class_id)));
        }
        det::match_anchors(gt, anchors, cfg.match_threshold, cfg.variances)
    }

    /// `λ_det·L_det + λ_seg·L_seg`, each term present only when some sample carries
    /// that annotation and its weight is non-zero. A batch with annotations but no
    /// weighted term yields a constant zero loss.
    pub fn joint_loss(&self, graph: &mut Graph, out: &JointOutput, targets: LossTargets<'_>, weights: LossWeights) -> Result<JointLoss> {
        weights.validate()?;
        let has_det = targets.det.iter().any(Option::is_some);
        let has_seg = targets.seg.iter().any(Option::is_some);
        if !has_det && !has_seg {
            return Err(CoreError::Contract("batch carries no annotation".into()));
        }
        let mut parts = LossParts::default();
        let mut terms = Vec::new();
        if has_det {
            let ((conf, loc), head) = match (out.det, &self.det) {
                (Some(o), Some(h)) => (o, h),
                _ => return Err(CoreError::Contract("detection targets for a model without detection output".into())),
            };
            if weights.det > 0.0 {
                let l = det::multibox_loss(graph, conf, loc, targets.det, head.config().neg_ratio)?;
                parts.det_conf = Some(l.conf);
                parts.det_loc = Some(l.loc);
                terms.push(graph.scale(l.total, weights.det)?);
            }
        }
        if has_seg {
            let logits = match out.seg {
                Some(o) => o,
                None => {
                    return Err(CoreError::Contract(
                        "segmentation targets for a model without segmentation output".into(),
                    ))
                }
            };
            if weights.seg > 0.0 {
                let l = seg::seg_loss(graph, logits, targets.seg)?;
                parts.seg = Some(graph.value(l).item()?);
                terms.push(graph.scale(l, weights.seg)?);
            }
        }
        let total = match terms.as_slice() {
            [] => graph.input(Tensor::scalar(0.0)),
            [t] => *t,
            [a, b] => graph.add(*a, *b)?,
            _ => unreachable!("at most two loss terms"),
        };
        parts.total = graph.value(total).item()?;
        Ok(JointLoss { total, parts })
    }

    /// Inference on a batch: detections per image and predicted masks.
    pub fn predict(&self, params: &ParamStore, images: &Tensor) -> Result<(Option<Vec<Vec<Detection>>>, Option<Vec<SegMask>>)> {
        let mut graph = Graph::inference();
        let mut binder = Binder::new(params);
        let x = graph.input(images.clone());
        let out = self.forward(&mut graph, &mut binder, x)?;
        let dets = match (out.det, &self.det, &self.anchors) {
            (Some((conf, loc)), Some(head), Some(anchors)) => Some(head.postprocess(graph.value(conf), graph.value(loc), anchors)?),
            _ => None,
        };
        let masks = match out.seg {
            Some(logits) => Some(seg::predict_masks(graph.value(logits))?),
            None => None,
        };
        Ok((dets, masks))
    }

    /// Forward flops for one image, split into shared trunk and per-task branches.
    pub fn cost(&self) -> Result<CostBreakdown> {
        let (h, w) = self.cfg.trunk.input_size;
        let params = self.init_params(0)?;
        let mut graph = Graph::inference();
        let mut binder = Binder::new(&params);
        let x = graph.input(Tensor::zeros(&[1, 3, h, w]));
        let shared = self.trunk_forward(&mut graph, &mut binder, x)?;
        let t = graph.total_flops();
        if self.det.is_some() {
            self.det_forward(&mut graph, &mut binder, &shared)?;
        }
        let d = graph.total_flops();
        if self.seg.is_some() {
            self.seg_forward(&mut graph, &mut binder, &shared)?;
        }
        let s = graph.total_flops();
        Ok(CostBreakdown {
            shared_trunk: t,
            det_branch: d - t,
            seg_branch: s - d,
        })
    }
}

/// Stacks `[3, H, W]` images into one `[N, 3, H, W]` batch tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| CoreError::Contract("empty image batch".into()))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != first.as_slice() {
            return Err(TensorError::Dimension(format!("image {:?} in a batch of {first:?}", img.shape())).into());
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(first);
    Ok(Tensor::new(shape, data)?)
}
