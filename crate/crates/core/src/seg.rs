//! FCN-style segmentation branch: 1×1 class scores on the stride-16 tap, one skip
//! from the stride-8 tap, bilinear upsampling back to input resolution.

use serde::{Deserialize, Serialize};
use trunkshare_tensor::{Graph, Tensor, TensorError, Var};

use crate::error::{CoreError, Result};
use crate::params::{Binder, Init, ParamSpec};

pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class ids, row-major; `IGNORE_LABEL` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(CoreError::InvalidAnnotation(format!(
                "mask of {} labels for {height}x{width}",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Checks every label is a class in `[0, classes)` or the ignore label.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= classes) {
            Some(bad) => Err(CoreError::InvalidAnnotation(format!("mask label {bad} outside [0, {classes})"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegHeadConfig {
    /// Classes including background.
    pub num_classes: usize,
    pub init_std: f64,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            init_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    cfg: SegHeadConfig,
    c3_channels: usize,
    c4_channels: usize,
    input_size: (usize, usize),
}

impl SegHead {
    pub fn new(cfg: SegHeadConfig, c3_channels: usize, c4_channels: usize, input_size: (usize, usize)) -> Result<Self> {
        if cfg.num_classes < 2 || cfg.num_classes > IGNORE_LABEL as usize {
            return Err(CoreError::Config(format!(
                "segmentation needs 2..=255 classes, got {}",
                cfg.num_classes
            )));
        }
        Ok(Self {
            cfg,
            c3_channels,
            c4_channels,
            input_size,
        })
    }

    pub fn config(&self) -> &SegHeadConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.cfg.num_classes;
        let init = Init::Normal(self.cfg.init_std);
        vec![
            ParamSpec::new("seg.score.weight", vec![c, self.c4_channels, 1, 1], init),
            ParamSpec::new("seg.score.bias", vec![c], Init::Zeros),
            ParamSpec::new("seg.skip.weight", vec![c, self.c3_channels, 1, 1], init),
            ParamSpec::new("seg.skip.bias", vec![c], Init::Zeros),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Class logits `[N, C, H, W]` at input resolution.
    pub fn forward(&self, graph: &mut Graph, params: &mut Binder<'_>, c3: Var, c4: Var) -> Result<Var> {
        let (h, w) = self.input_size;
        let s3 = graph.shape(c3).to_vec();
        let s4 = graph.shape(c4).to_vec();
        let ok3 = s3.len() == 4 && s3[1] == self.c3_channels && s3[2] * 8 == h && s3[3] * 8 == w;
        let ok4 = s4.len() == 4 && s4[1] == self.c4_channels && s4[2] * 16 == h && s4[3] * 16 == w && s4[0] == s3[0];
        if !ok3 || !ok4 {
            return Err(TensorError::Dimension(format!("segmentation head: taps {s3:?} / {s4:?} do not fit a {h}x{w} input")).into());
        }
        let sw = params.get(graph, "seg.score.weight")?;
        let sb = params.get(graph, "seg.score.bias")?;
        let kw = params.get(graph, "seg.skip.weight")?;
        let kb = params.get(graph, "seg.skip.bias")?;
        let score = graph.conv2d(c4, sw, sb, 1, 0)?;
        let coarse = graph.upsample_bilinear(score, 2)?;
        let skip = graph.conv2d(c3, kw, kb, 1, 0)?;
        let fused = graph.add(coarse, skip)?;
        Ok(graph.upsample_bilinear(fused, 8)?)
    }
}

/// Mean cross-entropy over every labeled pixel of the batch. `masks[i]` is `None`
/// for images without segmentation annotation; all their pixels are ignored.
pub fn seg_loss(graph: &mut Graph, logits: Var, masks: &[Option<&SegMask>]) -> Result<Var> {
    let [n, c, h, w] = graph.value(logits).dims4()?;
    if masks.len() != n {
        return Err(TensorError::Dimension(format!("{} masks for a batch of {n}", masks.len())).into());
    }
    let mut targets = Vec::with_capacity(n * h * w);
    for mask in masks {
        match mask {
            Some(m) => {
                if (m.height, m.width) != (h, w) {
                    return Err(TensorError::Dimension(format!("mask {}x{} for logits {h}x{w}", m.height, m.width)).into());
                }
                m.check_classes(c)?;
                targets.extend(m.labels.iter().map(|&l| l as usize));
            }
            None => targets.extend(std::iter::repeat_n(IGNORE_LABEL as usize, h * w)),
        }
    }
    let rows = graph.to_rows(&[logits], 1)?;
    Ok(graph.softmax_cross_entropy(rows, &targets, IGNORE_LABEL as usize)?)
}

/// Per-pixel argmax over `[N, C, H, W]` logits; ties resolve to the lowest class.
pub fn predict_masks(logits: &Tensor) -> Result<Vec<SegMask>> {
    let [n, c, h, w] = logits.dims4()?;
    let data = logits.data();
    let plane = h * w;
    Ok((0..n)
        .map(|img| {
            let base = img * c * plane;
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if data[base + k * plane + p] > data[base + best * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            SegMask {
                height: h,
                width: w,
                labels,
            }
        })
        .collect())
}
