//! Synthetic shape scenes with joint box and mask annotations, the on-disk dataset
//! layout, the interleaving batch sampler and color distortion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trunkshare_tensor::Tensor;

use crate::det::{iou, BBox, GtBox};
use crate::error::{CoreError, Result};
use crate::imageio::{mask_from_pgm, mask_to_pgm, quantize, RgbImage};
use crate::model::stack_images;
use crate::rng::{self, Rng};
use crate::seg::SegMask;

/// Shape drawn for each class id.
pub const SHAPE_NAMES: [&str; 3] = ["rectangle", "ellipse", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Object classes (1..=3): rectangle, ellipse, triangle.
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range as a fraction of the image side.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
    /// Largest IoU a new object's placement box may have with an earlier one.
    pub max_overlap: f64,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_scale: 0.2,
            max_scale: 0.5,
            noise: 0.05,
            max_overlap: 0.2,
            max_retries: 100,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s == 0 || !s.is_multiple_of(16) {
            return Err(CoreError::Config(format!("image size {s} must be a positive multiple of 16")));
        }
        if !(1..=SHAPE_NAMES.len()).contains(&self.num_classes) {
            return Err(CoreError::Config(format!("scene classes must be 1..=3, got {}", self.num_classes)));
        }
        if self.min_objects > self.max_objects {
            return Err(CoreError::Config("min_objects exceeds max_objects".into()));
        }
        if !(self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return Err(CoreError::Config("object scale range must satisfy min <= max <= 1".into()));
        }
        if self.min_scale * (s as f64) < 8.0 {
            return Err(CoreError::Config(format!(
                "objects must be at least 8 px: min_scale {} on {s} px",
                self.min_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.max_overlap) {
            return Err(CoreError::Config("noise and max_overlap must lie in [0, 1]".into()));
        }
        if self.max_retries == 0 {
            return Err(CoreError::Config("max_retries must be positive".into()));
        }
        Ok(())
    }
}

/// An annotated object. `pixel_box` holds pixel-edge coordinates
/// `[xmin, ymin, xmax, ymax]` with exclusive maxima.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneObject {
    pub class_id: usize,
    pub instance: u16,
    pub pixel_box: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, every value a multiple of 1/255.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
    pub mask: SegMask,
    /// Instance id per pixel (0 = background), row-major.
    pub instances: Vec<u16>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<GtBox> {
        let s = self.mask.width() as f64;
        self.objects
            .iter()
            .map(|o| GtBox {
                class_id: o.class_id,
                bbox: pixel_to_unit(o.pixel_box, s),
            })
            .collect()
    }
}

fn pixel_to_unit(b: [usize; 4], size: f64) -> BBox {
    BBox::new(b[0] as f64 / size, b[1] as f64 / size, b[2] as f64 / size, b[3] as f64 / size)
}

fn covers(class_id: usize, u: f64, v: f64) -> bool {
    match class_id {
        1 => true,
        2 => (2.0 * u - 1.0).powi(2) + (2.0 * v - 1.0).powi(2) <= 1.0,
        _ => v >= (2.0 * u - 1.0).abs(),
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(r: &mut Rng) -> [f64; 3] {
    [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]
}

/// Draws one scene; deterministic in `(seed, spec)`.
pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut r = rng::rng(seed);
    let s = spec.image_size;
    let count = r.random_range(spec.min_objects..=spec.max_objects);
    let lo = (spec.min_scale * s as f64).round() as usize;
    let hi = (spec.max_scale * s as f64).round() as usize;

    let mut placed: Vec<(usize, [usize; 4])> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = r.random_range(1..=spec.num_classes);
        let mut found = None;
        for _ in 0..spec.max_retries {
            let w = r.random_range(lo..=hi);
            let h = r.random_range(lo..=hi);
            let x0 = r.random_range(0..=s - w);
            let y0 = r.random_range(0..=s - h);
            let b = [x0, y0, x0 + w, y0 + h];
            let fb = pixel_to_unit(b, 1.0);
            if placed.iter().all(|(_, p)| iou(&pixel_to_unit(*p, 1.0), &fb) <= spec.max_overlap) {
                found = Some(b);
                break;
            }
        }
        let b = found.ok_or_else(|| {
            CoreError::Generation(format!(
                "could not place object {} of {count} within {} attempts",
                placed.len() + 1,
                spec.max_retries
            ))
        })?;
        placed.push((class_id, b));
    }

    let background = random_color(&mut r);
    let mut colors = Vec::with_capacity(placed.len());
    for _ in &placed {
        let mut c = random_color(&mut r);
        for _ in 0..32 {
            if (luma(c) - luma(background)).abs() >= 0.25 {
                break;
            }
            c = random_color(&mut r);
        }
        colors.push(c);
    }

    let mut instances = vec![0u16; s * s];
    for (k, &(class_id, b)) in placed.iter().enumerate() {
        let (w, h) = ((b[2] - b[0]) as f64, (b[3] - b[1]) as f64);
        for y in b[1]..b[3] {
            for x in b[0]..b[2] {
                let u = (x - b[0]) as f64 + 0.5;
                let v = (y - b[1]) as f64 + 0.5;
                if covers(class_id, u / w, v / h) {
                    instances[y * s + x] = k as u16 + 1;
                }
            }
        }
    }

    let plane = s * s;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        let base = match instances[p] {
            0 => background,
            k => colors[k as usize - 1],
        };
        for c in 0..3 {
            let n = if spec.noise > 0.0 {
                r.random_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            data[c * plane + p] = quantize(base[c] + n) as f64 / 255.0;
        }
    }

    let mut labels = vec![0u8; plane];
    let mut extents: Vec<Option<[usize; 4]>> = vec![None; placed.len()];
    for y in 0..s {
        for x in 0..s {
            let k = instances[y * s + x];
            if k == 0 {
                continue;
            }
            labels[y * s + x] = placed[k as usize - 1].0 as u8;
            let e = extents[k as usize - 1].get_or_insert([x, y, x + 1, y + 1]);
            e[0] = e[0].min(x);
            e[1] = e[1].min(y);
            e[2] = e[2].max(x + 1);
            e[3] = e[3].max(y + 1);
        }
    }
    let objects = extents
        .iter()
        .enumerate()
        .filter_map(|(k, e)| {
            e.map(|pixel_box| SceneObject {
                class_id: placed[k].0,
                instance: k as u16 + 1,
                pixel_box,
            })
        })
        .collect();
    Ok(Scene {
        image: Tensor::new(vec![3, s, s], data)?,
        objects,
        mask: SegMask::new(s, s, labels)?,
        instances,
    })
}

/// Which annotations a generated dataset carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskAvail {
    Both,
    DetOnly,
    SegOnly,
}

impl TaskAvail {
    pub fn has_det(self) -> bool {
        self != Self::SegOnly
    }

    pub fn has_seg(self) -> bool {
        self != Self::DetOnly
    }
}

impl std::str::FromStr for TaskAvail {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "det-only" => Ok(Self::DetOnly),
            "seg-only" => Ok(Self::SegOnly),
            other => Err(CoreError::Config(format!("unknown task availability {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub image: Tensor,
    pub boxes: Option<Vec<GtBox>>,
    pub mask: Option<SegMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: Split,
    pub det: bool,
    pub seg: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub task: TaskAvail,
    pub scene: SceneSpec,
    pub samples: Vec<ManifestEntry>,
}

const MANIFEST_FORMAT: &str = "trunkshare-synth";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub task: TaskAvail,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Generates `count` scenes; the last `floor(count · val_fraction)` form the val split.
    /// Scenes are independent, so generation runs on the current rayon pool.
    pub fn generate(spec: &SceneSpec, count: usize, seed: u64, task: TaskAvail, val_fraction: f64) -> Result<Self> {
        spec.validate()?;
        if !(0.0..=1.0).contains(&val_fraction) {
            return Err(CoreError::Config(format!("val fraction {val_fraction} outside [0, 1]")));
        }
        let n_val = (count as f64 * val_fraction).floor() as usize;
        let samples = (0..count)
            .into_par_iter()
            .map(|id| {
                let scene = synth_scene(rng::derive_seed(seed, &[id as u64]), spec)?;
                Ok(Sample {
                    id,
                    split: if id >= count - n_val { Split::Val } else { Split::Train },
                    boxes: task.has_det().then(|| scene.gt_boxes()),
                    mask: task.has_seg().then_some(scene.mask),
                    image: scene.image,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            seed,
            task,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_det(&self) -> bool {
        self.samples.iter().any(|s| s.boxes.is_some())
    }

    pub fn has_seg(&self) -> bool {
        self.samples.iter().any(|s| s.mask.is_some())
    }

    /// Sample indices of a split carrying detection (resp. segmentation) annotations.
    pub fn det_indices(&self, split: Split) -> Vec<usize> {
        self.indices(split, |s| s.boxes.is_some())
    }

    pub fn seg_indices(&self, split: Split) -> Vec<usize> {
        self.indices(split, |s| s.mask.is_some())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.indices(split, |_| true)
    }

    fn indices(&self, split: Split, keep: impl Fn(&Sample) -> bool) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split && keep(s))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            seed: self.seed,
            task: self.task,
            scene: self.spec.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id,
                    split: s.split,
                    det: s.boxes.is_some(),
                    seg: s.mask.is_some(),
                })
                .collect(),
        }
    }

    /// Writes `images/`, `masks/`, `boxes/` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let size = self.spec.image_size as f64;
        fs::create_dir_all(dir.join("images"))?;
        if self.has_det() {
            fs::create_dir_all(dir.join("boxes"))?;
        }
        if self.has_seg() {
            fs::create_dir_all(dir.join("masks"))?;
        }
        for s in &self.samples {
            RgbImage::from_tensor(&s.image)?.save(&dir.join(format!("images/{:05}.ppm", s.id)))?;
            if let Some(mask) = &s.mask {
                fs::write(dir.join(format!("masks/{:05}.pgm", s.id)), mask_to_pgm(mask))?;
            }
            if let Some(boxes) = &s.boxes {
                fs::write(dir.join(format!("boxes/{:05}.csv", s.id)), boxes_to_csv(boxes, size))?;
            }
        }
        let json =
            serde_json::to_string_pretty(&self.manifest()).map_err(|e| CoreError::Contract(format!("manifest serialization: {e}")))?;
        fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CoreError::format(manifest_path.display(), e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
            return Err(CoreError::format(manifest_path.display(), "unknown dataset format or version"));
        }
        manifest.scene.validate()?;
        let size = manifest.scene.image_size;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let image = RgbImage::load(&dir.join(format!("images/{:05}.ppm", e.id)))?;
            if image.width != size || image.height != size {
                return Err(CoreError::format(
                    format!("images/{:05}.ppm", e.id),
                    format!("{}x{} image in a {size} px dataset", image.width, image.height),
                ));
            }
            let mask = if e.seg {
                let path = dir.join(format!("masks/{:05}.pgm", e.id));
                let m = mask_from_pgm(&fs::read(&path)?, &path.display().to_string())?;
                if (m.height(), m.width()) != (size, size) {
                    return Err(CoreError::format(path.display(), "mask size differs from the image"));
                }
                Some(m)
            } else {
                None
            };
            let boxes = if e.det {
                let path = dir.join(format!("boxes/{:05}.csv", e.id));
                Some(boxes_from_csv(
                    &fs::read_to_string(&path)?,
                    size as f64,
                    &path.display().to_string(),
                )?)
            } else {
                None
            };
            samples.push(Sample {
                id: e.id,
                split: e.split,
                image: image.to_tensor(),
                boxes,
                mask,
            });
        }
        Ok(Self {
            spec: manifest.scene,
            seed: manifest.seed,
            task: manifest.task,
            samples,
        })
    }
}

/// `class_id,xmin,ymin,xmax,ymax` in pixels.
pub fn boxes_to_csv(boxes: &[GtBox], image_size: f64) -> String {
    let mut s = String::from("class_id,xmin,ymin,xmax,ymax\n");
    for b in boxes {
        let px = |v: f64| (v * image_size).round() as i64;
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            b.class_id,
            px(b.bbox.xmin),
            px(b.bbox.ymin),
            px(b.bbox.xmax),
            px(b.bbox.ymax)
        );
    }
    s
}

pub fn boxes_from_csv(text: &str, image_size: f64, path: &str) -> Result<Vec<GtBox>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("class_id,xmin,ymin,xmax,ymax") {
        return Err(CoreError::format(path, "missing or wrong box header"));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CoreError::format(path, format!("bad box row {line:?}")))?;
        if f.len() != 5 || f[0] < 1.0 || f[0].fract() != 0.0 {
            return Err(CoreError::format(path, format!("bad box row {line:?}")));
        }
        let bbox = BBox::new(f[1] / image_size, f[2] / image_size, f[3] / image_size, f[4] / image_size);
        if !bbox.is_proper() {
            return Err(CoreError::InvalidAnnotation(format!("{path}: degenerate box {line:?}")));
        }
        out.push(GtBox {
            class_id: f[0] as usize,
            bbox,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Det,
    Seg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MixPolicy {
    /// Each batch holds `round(det_fraction · N)` detection samples, the rest segmentation.
    WithinBatch { det_fraction: f64 },
    /// Whole single-task batches following a pattern such as `"DS"` or `"DDS"`.
    Alternate { pattern: String },
}

impl Default for MixPolicy {
    fn default() -> Self {
        Self::WithinBatch { det_fraction: 0.5 }
    }
}

impl MixPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::WithinBatch { det_fraction } if !(0.0..=1.0).contains(det_fraction) => {
                Err(CoreError::Config(format!("det_fraction {det_fraction} outside [0, 1]")))
            }
            Self::Alternate { pattern } if pattern.is_empty() || pattern.chars().any(|c| c != 'D' && c != 'S') => Err(CoreError::Config(
                format!("alternation pattern {pattern:?} must be a non-empty string of D and S"),
            )),
            _ => Ok(()),
        }
    }

    fn uses(&self, task: Task, batch_size: usize) -> bool {
        match (self, task) {
            (Self::WithinBatch { det_fraction }, Task::Det) => split_counts(*det_fraction, batch_size).0 > 0,
            (Self::WithinBatch { det_fraction }, Task::Seg) => split_counts(*det_fraction, batch_size).1 > 0,
            (Self::Alternate { pattern }, Task::Det) => pattern.contains('D'),
            (Self::Alternate { pattern }, Task::Seg) => pattern.contains('S'),
        }
    }
}

fn split_counts(det_fraction: f64, n: usize) -> (usize, usize) {
    let d = (det_fraction * n as f64).round() as usize;
    (d.min(n), n - d.min(n))
}

/// Endless pass over a fixed item list, reshuffled at the start of every epoch.
#[derive(Clone, Debug)]
pub struct EpochCycler {
    items: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl EpochCycler {
    pub fn new(items: Vec<usize>, seed: u64) -> Self {
        Self {
            items,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next item; `None` only for an empty cycler.
    pub fn next_item(&mut self) -> Option<usize> {
        if self.items.is_empty() {
            return None;
        }
        if self.pos == self.order.len() {
            self.order = self.items.clone();
            self.order.shuffle(&mut rng::stream(self.seed, &[self.epoch]));
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.order[self.pos - 1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub sample: usize,
    pub task: Task,
}

/// Infinite iterator of mixed-task batches drawn from a detection and a segmentation stream.
#[derive(Clone, Debug)]
pub struct Interleaver {
    det: EpochCycler,
    seg: EpochCycler,
    batch_size: usize,
    mix: MixPolicy,
    emitted: usize,
}

impl Interleaver {
    pub fn new(det_items: Vec<usize>, seg_items: Vec<usize>, batch_size: usize, mix: MixPolicy, seed: u64) -> Result<Self> {
        mix.validate()?;
        if batch_size == 0 {
            return Err(CoreError::Config("batch size must be positive".into()));
        }
        for (task, items) in [(Task::Det, &det_items), (Task::Seg, &seg_items)] {
            if mix.uses(task, batch_size) && items.is_empty() {
                return Err(CoreError::Contract(format!("mix policy draws from an empty {task:?} stream")));
            }
        }
        Ok(Self {
            det: EpochCycler::new(det_items, rng::derive_seed(seed, &[0])),
            seg: EpochCycler::new(seg_items, rng::derive_seed(seed, &[1])),
            batch_size,
            mix,
            emitted: 0,
        })
    }

    fn draw(&mut self, task: Task, n: usize, out: &mut Vec<BatchItem>) {
        let cycler = match task {
            Task::Det => &mut self.det,
            Task::Seg => &mut self.seg,
        };
        for _ in 0..n {
            let sample = cycler.next_item().expect("non-empty stream checked at construction");
            out.push(BatchItem { sample, task });
        }
    }
}

impl Iterator for Interleaver {
    type Item = Vec<BatchItem>;

    fn next(&mut self) -> Option<Vec<BatchItem>> {
        let mut batch = Vec::with_capacity(self.batch_size);
        match self.mix.clone() {
            MixPolicy::WithinBatch { det_fraction } => {
                let (d, s) = split_counts(det_fraction, self.batch_size);
                self.draw(Task::Det, d, &mut batch);
                self.draw(Task::Seg, s, &mut batch);
            }
            MixPolicy::Alternate { pattern } => {
                let c = pattern.as_bytes()[self.emitted % pattern.len()];
                let task = if c == b'D' { Task::Det } else { Task::Seg };
                self.draw(task, self.batch_size, &mut batch);
            }
        }
        self.emitted += 1;
        Some(batch)
    }
}

/// Images plus per-sample annotations; `None` marks an absent annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub images: Tensor,
    pub det: Vec<Option<Vec<GtBox>>>,
    pub seg: Vec<Option<SegMask>>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.det.len()
    }

    pub fn is_empty(&self) -> bool {
        self.det.is_empty()
    }
}

/// Builds a batch where every sample carries only the annotation of the stream it
/// was drawn from. `augment` applies seeded color distortion per slot.
pub fn assemble_batch(dataset: &Dataset, items: &[BatchItem], augment: Option<(&ColorRanges, u64)>) -> Result<TaskBatch> {
    let mut images = Vec::with_capacity(items.len());
    let mut det = Vec::with_capacity(items.len());
    let mut seg = Vec::with_capacity(items.len());
    for (slot, item) in items.iter().enumerate() {
        let sample = dataset
            .samples
            .get(item.sample)
            .ok_or_else(|| CoreError::Contract(format!("sample index {} out of range", item.sample)))?;
        let missing = || CoreError::Contract(format!("sample {} lacks the {:?} annotation", sample.id, item.task));
        match item.task {
            Task::Det => {
                det.push(Some(sample.boxes.clone().ok_or_else(missing)?));
                seg.push(None);
            }
            Task::Seg => {
                det.push(None);
                seg.push(Some(sample.mask.clone().ok_or_else(missing)?));
            }
        }
        images.push(match augment {
            Some((ranges, seed)) => color_distort(&sample.image, rng::derive_seed(seed, &[slot as u64]), ranges)?,
            None => sample.image.clone(),
        });
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    Ok(TaskBatch {
        images: stack_images(&refs)?,
        det,
        seg,
    })
}

/// Batch of samples with every annotation they carry (evaluation use).
pub fn full_batch(dataset: &Dataset, indices: &[usize]) -> Result<TaskBatch> {
    let samples: Vec<&Sample> = indices
        .iter()
        .map(|&i| {
            dataset
                .samples
                .get(i)
                .ok_or_else(|| CoreError::Contract(format!("sample index {i} out of range")))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Ok(TaskBatch {
        images: stack_images(&refs)?,
        det: samples.iter().map(|s| s.boxes.clone()).collect(),
        seg: samples.iter().map(|s| s.mask.clone()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorRanges {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for ColorRanges {
    fn default() -> Self {
        Self {
            brightness: 0.12,
            contrast: 0.3,
            saturation: 0.3,
        }
    }
}

impl ColorRanges {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if ok(self.brightness) && ok(self.contrast) && ok(self.saturation) {
            Ok(())
        } else {
            Err(CoreError::Config(format!("color distortion ranges must lie in [0, 1]: {self:?}")))
        }
    }
}

/// Concrete distortion: additive brightness, contrast factor about the image mean,
/// saturation factor against luma.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorParams {
    pub fn sample(r: &mut Rng, ranges: &ColorRanges) -> Self {
        let mut around = |center: f64, delta: f64| {
            if delta > 0.0 {
                r.random_range(center - delta..=center + delta)
            } else {
                center
            }
        };
        Self {
            brightness: around(0.0, ranges.brightness),
            contrast: around(1.0, ranges.contrast),
            saturation: around(1.0, ranges.saturation),
        }
    }

    /// Applies the three steps in order, clamping to `[0, 1]` after each; neutral
    /// factors are skipped so the identity is exact.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CoreError::Contract(format!("expected a [3, H, W] image, got {shape:?}")));
        }
        let plane = shape[1] * shape[2];
        let mut d = image.data().to_vec();
        if self.brightness != 0.0 {
            d.iter_mut().for_each(|v| *v = (*v + self.brightness).clamp(0.0, 1.0));
        }
        if self.contrast != 1.0 {
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            d.iter_mut().for_each(|v| *v = (mean + self.contrast * (*v - mean)).clamp(0.0, 1.0));
        }
        if self.saturation != 1.0 {
            for p in 0..plane {
                let gray = luma([d[p], d[plane + p], d[2 * plane + p]]);
                for c in 0..3 {
                    let v = &mut d[c * plane + p];
                    *v = (gray + self.saturation * (*v - gray)).clamp(0.0, 1.0);
                }
            }
        }
        Ok(Tensor::new(shape.to_vec(), d)?)
    }
}

pub fn color_distort(image: &Tensor, seed: u64, ranges: &ColorRanges) -> Result<Tensor> {
    ColorParams::sample(&mut rng::rng(seed), ranges).apply(image)
}
