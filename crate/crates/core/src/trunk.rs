//! Residual trunk with taps at strides 4, 8 and 16.
//!
//! Layout: a stride-2 3×3 stem conv, relu and 2×2 max pool (stride 4), then three
//! stages of basic residual blocks. The first block of stages 2 and 3 halves the
//! resolution. Each stage output is a pyramid tap.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use trunkshare_tensor::{Graph, TensorError, Var};

use crate::error::{CoreError, Result};
use crate::params::{Binder, Init, ParamSpec, ParamStore};

pub const NUM_STAGES: usize = 3;
/// Init of the last conv in each residual branch. Without normalization layers a
/// zero branch keeps every block an identity map at the start of training.
const RESIDUAL_INIT: Init = Init::Zeros;

pub const TAP_STRIDES: [usize; NUM_STAGES] = [4, 8, 16];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrunkConfig {
    pub stem_channels: usize,
    pub stage_blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub input_size: (usize, usize),
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_blocks: vec![2, 2, 2],
            stage_channels: vec![16, 32, 64],
            input_size: (64, 64),
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.len() != NUM_STAGES || self.stage_channels.len() != NUM_STAGES {
            return Err(CoreError::Config(format!(
                "trunk needs exactly {NUM_STAGES} stages, got {} block counts and {} channel counts",
                self.stage_blocks.len(),
                self.stage_channels.len()
            )));
        }
        if self.stage_blocks.contains(&0) {
            return Err(CoreError::Config("every trunk stage needs at least one block".into()));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(CoreError::Config("channel counts must be positive".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(CoreError::Config(format!(
                "input size {h}x{w} must be positive and divisible by 16"
            )));
        }
        Ok(())
    }

    /// Spatial extent of each tap for the configured input.
    pub fn tap_sizes(&self) -> [(usize, usize); NUM_STAGES] {
        let (h, w) = self.input_size;
        TAP_STRIDES.map(|s| (h / s, w / s))
    }

    fn stage_input_channels(&self, stage: usize) -> usize {
        if stage == 1 {
            self.stem_channels
        } else {
            self.stage_channels[stage - 2]
        }
    }
}

/// Trunk taps. `levels[0]` is stride 4 (c2), `levels[1]` stride 8 (c3), `levels[2]` stride 16 (c4).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; NUM_STAGES],
}

impl FeaturePyramid {
    pub fn c2(&self) -> Var {
        self.levels[0]
    }

    pub fn c3(&self) -> Var {
        self.levels[1]
    }

    pub fn c4(&self) -> Var {
        self.levels[2]
    }
}

/// A contiguous run of trunk stages under a parameter prefix.
///
/// Stage 0 is the stem; stages 1..=3 produce the taps. The full trunk is
/// `0..=3` under the `trunk` prefix; a head-private continuation after a fork is
/// e.g. `3..=3` under `det.trunk`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    cfg: TrunkConfig,
    prefix: String,
    stages: RangeInclusive<usize>,
}

impl Trunk {
    pub fn new(cfg: TrunkConfig) -> Result<Self> {
        Self::segment(cfg, "trunk", 0..=NUM_STAGES)
    }

    pub fn segment(cfg: TrunkConfig, prefix: &str, stages: RangeInclusive<usize>) -> Result<Self> {
        cfg.validate()?;
        if stages.is_empty() || *stages.end() > NUM_STAGES {
            return Err(CoreError::Config(format!("invalid trunk stage range {stages:?}")));
        }
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            stages,
        })
    }

    /// Builds the full trunk and its He-initialized parameters.
    pub fn build(cfg: TrunkConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let trunk = Self::new(cfg)?;
        let store = ParamStore::from_specs(&trunk.param_specs(), seed)?;
        Ok((trunk, store))
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn stages(&self) -> RangeInclusive<usize> {
        self.stages.clone()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize, init: Init| {
            specs.push(ParamSpec::new(format!("{name}.weight"), vec![cout, cin, k, k], init));
            specs.push(ParamSpec::new(format!("{name}.bias"), vec![cout], Init::Zeros));
        };
        for stage in self.stages.clone() {
            if stage == 0 {
                conv(format!("{}.stem", self.prefix), self.cfg.stem_channels, 3, 3, Init::HeNormal);
                continue;
            }
            let ch = self.cfg.stage_channels[stage - 1];
            for b in 0..self.cfg.stage_blocks[stage - 1] {
                let block = BlockShape::of(&self.cfg, stage, b);
                let base = format!("{}.stage{stage}.block{b}", self.prefix);
                conv(format!("{base}.conv1"), ch, block.cin, 3, Init::HeNormal);
                conv(format!("{base}.conv2"), ch, ch, 3, RESIDUAL_INIT);
                if block.projected() {
                    conv(format!("{base}.proj"), ch, block.cin, 1, Init::HeNormal);
                }
            }
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Runs the configured stages. `input` is the image batch when the range starts at the
    /// stem, otherwise the output of the preceding stage. Returns one tap per tap stage run.
    pub fn forward_stages(&self, graph: &mut Graph, params: &mut Binder<'_>, input: Var) -> Result<Vec<Var>> {
        let mut x = input;
        let mut taps = Vec::new();
        for stage in self.stages.clone() {
            if stage == 0 {
                x = self.stem(graph, params, x)?;
                continue;
            }
            for b in 0..self.cfg.stage_blocks[stage - 1] {
                x = self.block(graph, params, x, stage, b)?;
            }
            taps.push(x);
        }
        Ok(taps)
    }

    /// Full-trunk forward pass from images to the three taps.
    pub fn forward(&self, graph: &mut Graph, params: &mut Binder<'_>, images: Var) -> Result<FeaturePyramid> {
        if self.stages != (0..=NUM_STAGES) {
            return Err(CoreError::Contract("forward() needs the full trunk".into()));
        }
        self.check_input(graph, images)?;
        let taps = self.forward_stages(graph, params, images)?;
        Ok(FeaturePyramid {
            levels: [taps[0], taps[1], taps[2]],
        })
    }

    pub fn check_input(&self, graph: &Graph, images: Var) -> Result<()> {
        let shape = graph.shape(images);
        let (h, w) = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(TensorError::Dimension(format!("trunk expects [N, 3, {h}, {w}] images, got {shape:?}")).into());
        }
        Ok(())
    }

    fn conv(&self, graph: &mut Graph, params: &mut Binder<'_>, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = params.get(graph, &format!("{name}.weight"))?;
        let b = params.get(graph, &format!("{name}.bias"))?;
        Ok(graph.conv2d(x, w, b, stride, pad)?)
    }

    fn stem(&self, graph: &mut Graph, params: &mut Binder<'_>, x: Var) -> Result<Var> {
        let y = self.conv(graph, params, x, &format!("{}.stem", self.prefix), 2, 1)?;
        let y = graph.relu(y)?;
        Ok(graph.maxpool2x2(y)?)
    }

    fn block(&self, graph: &mut Graph, params: &mut Binder<'_>, x: Var, stage: usize, b: usize) -> Result<Var> {
        let shape = BlockShape::of(&self.cfg, stage, b);
        let base = format!("{}.stage{stage}.block{b}", self.prefix);
        let y = self.conv(graph, params, x, &format!("{base}.conv1"), shape.stride, 1)?;
        let y = graph.relu(y)?;
        let y = self.conv(graph, params, y, &format!("{base}.conv2"), 1, 1)?;
        let shortcut = if shape.projected() {
            self.conv(graph, params, x, &format!("{base}.proj"), shape.stride, 0)?
        } else {
            x
        };
        let sum = graph.add(y, shortcut)?;
        Ok(graph.relu(sum)?)
    }
}

struct BlockShape {
    cin: usize,
    cout: usize,
    stride: usize,
}

impl BlockShape {
    fn of(cfg: &TrunkConfig, stage: usize, block: usize) -> Self {
        let cout = cfg.stage_channels[stage - 1];
        if block == 0 {
            Self {
                cin: cfg.stage_input_channels(stage),
                cout,
                stride: if stage == 1 { 1 } else { 2 },
            }
        } else {
            Self {
                cin: cout,
                cout,
                stride: 1,
            }
        }
    }

    fn projected(&self) -> bool {
        self.cin != self.cout || self.stride != 1
    }
}
