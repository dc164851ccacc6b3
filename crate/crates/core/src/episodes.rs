//! Procedural shapes dataset: twelve shape classes rendered with random
//! colours and textures, rotating base/novel splits, episodic sampling and
//! the fixed k-shot fine-tuning pool.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::hash::{Hash, Hasher};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::RoIBox;
use crate::error::{config_err, invalid, Result};
use crate::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 12;
pub const QUERY_SIZE: usize = 96;
pub const SUPPORT_SIZE: usize = 64;
/// Half-size range of rendered shapes, in pixels.
pub const HALF_RANGE: (u16, u16) = (8, 18);
/// Minimum visible fraction of an occluded shape.
pub const MIN_VISIBLE: f64 = 0.5;
pub const OCCLUSION_RATE: f64 = 0.3;
const PLACEMENT_RETRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Star,
    Bar,
    LShape,
    TShape,
    Crescent,
    Plus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_CLASSES] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::Star,
        ShapeKind::Bar,
        ShapeKind::LShape,
        ShapeKind::TShape,
        ShapeKind::Crescent,
        ShapeKind::Plus,
    ];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn from_class(id: usize) -> Option<ShapeKind> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Star => "star",
            ShapeKind::Bar => "bar",
            ShapeKind::LShape => "l-shape",
            ShapeKind::TShape => "t-shape",
            ShapeKind::Crescent => "crescent",
            ShapeKind::Plus => "plus",
        }
    }

    /// Membership test in coordinates normalised by the half-size.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Circle => r2 <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => (-0.9..=0.8).contains(&v) && u.abs() <= 0.95 * (v + 0.9) / 1.7,
            ShapeKind::Cross => {
                u.abs() <= 0.9 && v.abs() <= 0.9 && ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35)
            }
            ShapeKind::Ring => (0.3025..=1.0).contains(&r2),
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Star => {
                let r = libm::sqrt(r2);
                let theta = libm::atan2(v, u) + core::f64::consts::FRAC_PI_2;
                let lobe = 0.5 * (1.0 + libm::cos(5.0 * theta));
                r <= 0.4 + 0.6 * lobe * lobe
            }
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            ShapeKind::LShape => u.abs() <= 0.8 && v.abs() <= 0.8 && (u <= -0.3 || v >= 0.35),
            ShapeKind::TShape => {
                v >= -0.9 && ((v <= -0.4 && u.abs() <= 0.9) || (u.abs() <= 0.25 && v <= 0.9))
            }
            ShapeKind::Crescent => r2 <= 1.0 && (u - 0.45) * (u - 0.45) + v * v > 0.5625,
            ShapeKind::Plus => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
        }
    }
}

/// Per-class rendering specification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class_id: usize,
    pub kind: ShapeKind,
    /// Half-size range as a fraction of the query side.
    pub scale_range: (f64, f64),
    pub allow_occlusion: bool,
}

impl ShapeSpec {
    pub fn for_class(class_id: usize) -> Result<ShapeSpec> {
        let kind = ShapeKind::from_class(class_id).ok_or_else(|| invalid!("unknown class {}", class_id))?;
        Ok(ShapeSpec {
            class_id,
            kind,
            scale_range: (HALF_RANGE.0 as f64 / QUERY_SIZE as f64, HALF_RANGE.1 as f64 / QUERY_SIZE as f64),
            allow_occlusion: true,
        })
    }

    pub fn all() -> Vec<ShapeSpec> {
        (0..NUM_CLASSES).map(|c| ShapeSpec::for_class(c).expect("class in range")).collect()
    }
}

/// Appearance of one object instance, independent of where it is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub class_id: usize,
    pub half: u16,
    pub color: [u8; 3],
    pub texture_seed: u64,
}

impl ShapeInstance {
    pub fn random<R: Rng + ?Sized>(class_id: usize, rng: &mut R) -> ShapeInstance {
        ShapeInstance {
            class_id,
            half: rng.random_range(HALF_RANGE.0..=HALF_RANGE.1),
            color: [rng.random_range(130..=255), rng.random_range(130..=255), rng.random_range(130..=255)],
            texture_seed: rng.random(),
        }
    }

    pub fn kind(&self) -> ShapeKind {
        ShapeKind::from_class(self.class_id).expect("valid class id")
    }

    pub fn at(self, cx: u16, cy: u16) -> PlacedShape {
        PlacedShape { instance: self, cx, cy }
    }
}

/// An instance positioned by its center, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlacedShape {
    pub instance: ShapeInstance,
    pub cx: u16,
    pub cy: u16,
}

impl PlacedShape {
    fn inside(&self, px: usize, py: usize) -> bool {
        let h = self.instance.half as f64;
        let u = (px as f64 + 0.5 - self.cx as f64) / h;
        let v = (py as f64 + 0.5 - self.cy as f64) / h;
        u.abs() <= 1.0 && v.abs() <= 1.0 && self.instance.kind().contains(u, v)
    }

    /// Pixel indices covered by the shape (full, unoccluded footprint).
    pub fn footprint(&self, size: usize) -> Vec<usize> {
        let h = self.instance.half as i64;
        let lo = |c: u16| (c as i64 - h - 1).max(0) as usize;
        let hi = |c: u16| ((c as i64 + h + 1).min(size as i64 - 1)).max(0) as usize;
        let mut out = Vec::new();
        for y in lo(self.cy)..=hi(self.cy) {
            for x in lo(self.cx)..=hi(self.cx) {
                if self.inside(x, y) {
                    out.push(y * size + x);
                }
            }
        }
        out
    }

    fn fits(&self, size: usize) -> bool {
        let h = self.instance.half as usize;
        let (cx, cy) = (self.cx as usize, self.cy as usize);
        cx > h && cy > h && cx + h < size && cy + h < size
    }
}

/// A rendered image with one tight box per shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    /// `[3, size, size]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Amodal tight boxes, in draw order, with class labels.
    pub boxes: Vec<RoIBox>,
    pub visible_fraction: Vec<f64>,
}

fn tight_box(footprint: &[usize], size: usize) -> RoIBox {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for &i in footprint {
        let (x, y) = (i % size, i / size);
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x);
        y2 = y2.max(y);
    }
    RoIBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64)
}

/// Visible fraction of every shape when drawn in order (later on top).
pub fn visibility(shapes: &[PlacedShape], size: usize) -> Vec<f64> {
    let mut owner = vec![usize::MAX; size * size];
    let feet: Vec<Vec<usize>> = shapes.iter().map(|s| s.footprint(size)).collect();
    for (k, f) in feet.iter().enumerate() {
        for &i in f {
            owner[i] = k;
        }
    }
    feet.iter()
        .enumerate()
        .map(|(k, f)| {
            if f.is_empty() {
                0.0
            } else {
                f.iter().filter(|&&i| owner[i] == k).count() as f64 / f.len() as f64
            }
        })
        .collect()
}

/// Draws `shapes` in order over a noisy background.
///
/// Fails on an empty or oversized shape list, a shape leaving the canvas,
/// or a shape hidden beyond the occlusion budget.
pub fn render_image(shapes: &[PlacedShape], size: usize, seed: u64) -> Result<Rendered> {
    if shapes.is_empty() || shapes.len() > 5 {
        return Err(invalid!("render_image needs 1 to 5 shapes, got {}", shapes.len()));
    }
    if let Some(s) = shapes.iter().find(|s| !s.fits(size)) {
        return Err(invalid!("shape at ({}, {}) with half-size {} leaves the {}px canvas", s.cx, s.cy, s.instance.half, size));
    }
    if shapes.iter().any(|s| s.instance.class_id >= NUM_CLASSES || s.instance.half == 0) {
        return Err(invalid!("shape with unknown class or zero size"));
    }
    let visible = visibility(shapes, size);
    if let Some((k, v)) = visible.iter().enumerate().find(|(_, &v)| v < MIN_VISIBLE) {
        return Err(invalid!("shape {} is only {:.2} visible, below the occlusion budget", k, v));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    let base: [f32; 3] = [rng.random_range(0.0..0.35), rng.random_range(0.0..0.35), rng.random_range(0.0..0.35)];
    for (c, &b) in base.iter().enumerate() {
        for v in &mut data[c * plane..(c + 1) * plane] {
            *v = (b + rng.random_range(-0.08f32..0.08)).clamp(0.0, 1.0);
        }
    }
    let mut boxes = Vec::with_capacity(shapes.len());
    for s in shapes {
        let foot = s.footprint(size);
        let mut trng = ChaCha8Rng::seed_from_u64(s.instance.texture_seed);
        let freq: f64 = trng.random_range(0.3..1.2);
        let angle: f64 = trng.random_range(0.0..core::f64::consts::PI);
        let depth: f64 = trng.random_range(0.0..0.3);
        let (ca, sa) = (libm::cos(angle), libm::sin(angle));
        for &i in &foot {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            let t = 1.0 - depth * 0.5 * (1.0 + libm::sin(freq * (x * ca + y * sa)));
            for c in 0..3 {
                let v = s.instance.color[c] as f64 / 255.0 * t;
                data[c * plane + i] = (v as f32 + rng.random_range(-0.04f32..0.04)).clamp(0.0, 1.0);
            }
        }
        boxes.push(tight_box(&foot, size).with_class(s.instance.class_id));
    }
    Ok(Rendered { image: Tensor::new(&[3, size, size], data)?, boxes, visible_fraction: visible })
}

/// Model input: pixels shifted to be roughly zero-centred.
pub fn model_input<T: Scalar>(image: &Tensor<f32>) -> Tensor<T> {
    let data = image.data().iter().map(|&v| T::lit(v as f64 - 0.5)).collect();
    Tensor::new(image.shape(), data).expect("same shape")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub split_id: usize,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
}

impl SplitConfig {
    pub const NUM_SPLITS: usize = 3;

    /// Rotating splits: split `s` holds out the classes `c` with `c % 3 == s`.
    pub fn new(split_id: usize) -> Result<SplitConfig> {
        if split_id >= Self::NUM_SPLITS {
            return Err(config_err!("split must be in 0..{}, got {}", Self::NUM_SPLITS, split_id));
        }
        let (novel, base) = (0..NUM_CLASSES).partition(|c| c % Self::NUM_SPLITS == split_id);
        Ok(SplitConfig { split_id, base_classes: base, novel_classes: novel })
    }

    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.base_classes.iter().chain(&self.novel_classes).copied().collect();
        all.sort_unstable();
        all
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_classes.iter().any(|c| self.novel_classes.contains(c)) {
            return Err(config_err!("base and novel classes overlap"));
        }
        if self.all_classes() != (0..NUM_CLASSES).collect::<Vec<_>>() {
            return Err(config_err!("base and novel classes must cover all {} classes", NUM_CLASSES));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    MetaTrain,
    FineTune,
}

/// A support image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportPair {
    pub class_id: usize,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    /// Boxes of `class_id` in the support image.
    pub boxes: Vec<RoIBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub query: Tensor<f32>,
    /// Ground truth boxes, each carrying its class id.
    pub gt: Vec<RoIBox>,
    /// One pair per class of `classes`, same order.
    pub supports: Vec<SupportPair>,
    pub classes: Vec<usize>,
}

/// The fixed k-shot fine-tuning pool: `k` instances per class.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ShotBudget {
    pub k: usize,
    pub pool: BTreeMap<usize, Vec<ShapeInstance>>,
}

impl ShotBudget {
    pub fn len(&self) -> usize {
        self.pool.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn instances(&self, class_id: usize) -> &[ShapeInstance] {
        self.pool.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Stable 64-bit fingerprint of the pool contents.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::default();
        self.hash(&mut h);
        h.finish()
    }
}

#[derive(Clone, Copy)]
struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv1a {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Derives an independent stream seed from a tuple of identifiers.
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut h = Fnv1a::default();
    parts.hash(&mut h);
    h.finish()
}

const TAG_POOL: u64 = 0x706f_6f6c;
const TAG_TRAIN: u64 = 0x7472_6169;
const TAG_TEST: u64 = 0x7465_7374;

/// `k` fresh instances for every class of the split, reproducible from
/// `(dataset_seed, split, run_index)`.
pub fn build_shot_pool(dataset_seed: u64, split: &SplitConfig, k: usize, run_index: u64) -> Result<ShotBudget> {
    if k == 0 {
        return Err(config_err!("k must be at least 1"));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(stream_seed(&[TAG_POOL, dataset_seed, split.split_id as u64, run_index]));
    let mut pool = BTreeMap::new();
    for c in split.all_classes() {
        pool.insert(c, (0..k).map(|_| ShapeInstance::random(c, &mut rng)).collect());
    }
    Ok(ShotBudget { k, pool })
}

fn random_center<R: Rng + ?Sized>(half: u16, size: usize, rng: &mut R) -> (u16, u16) {
    let lo = half as usize + 1;
    let hi = size - half as usize - 1;
    (rng.random_range(lo..hi) as u16, rng.random_range(lo..hi) as u16)
}

fn disjoint(a: &PlacedShape, b: &PlacedShape, margin: i32) -> bool {
    let (ha, hb) = (a.instance.half as i32, b.instance.half as i32);
    (a.cx as i32 - b.cx as i32).abs() >= ha + hb + margin || (a.cy as i32 - b.cy as i32).abs() >= ha + hb + margin
}

/// Places instances on a canvas; with `occlude`, the second instance is
/// pushed onto the first while both stay at least half visible.
pub fn place<R: Rng + ?Sized>(instances: &[ShapeInstance], size: usize, occlude: bool, rng: &mut R) -> Result<Vec<PlacedShape>> {
    'retry: for _ in 0..PLACEMENT_RETRIES {
        let mut placed: Vec<PlacedShape> = Vec::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            if 2 * inst.half as usize + 2 >= size {
                return Err(invalid!("instance of half-size {} cannot fit a {}px canvas", inst.half, size));
            }
            let p = if occlude && i == 1 {
                let a = placed[0];
                let reach = (a.instance.half + inst.half) as i32 * 3 / 4;
                let dx = rng.random_range(-reach..=reach);
                let dy = rng.random_range(-reach..=reach);
                let cx = (a.cx as i32 + dx).clamp(0, u16::MAX as i32) as u16;
                let cy = (a.cy as i32 + dy).clamp(0, u16::MAX as i32) as u16;
                inst.at(cx, cy)
            } else {
                let (cx, cy) = random_center(inst.half, size, rng);
                inst.at(cx, cy)
            };
            if !p.fits(size) {
                continue 'retry;
            }
            let clash = placed
                .iter()
                .enumerate()
                .any(|(j, q)| !(occlude && i == 1 && j == 0) && !disjoint(&p, q, 2));
            if clash {
                continue 'retry;
            }
            placed.push(p);
        }
        if visibility(&placed, size).iter().all(|&v| v >= MIN_VISIBLE) {
            return Ok(placed);
        }
    }
    Err(invalid!("could not place {} shapes within {} retries", instances.len(), PLACEMENT_RETRIES))
}

/// Query image with 1 to 3 objects drawn from `instances`. When the
/// objects do not fit together, trailing ones are dropped.
fn render_query<R: Rng + ?Sized>(instances: &[ShapeInstance], rng: &mut R) -> Result<Rendered> {
    let occlude = instances.len() >= 2 && rng.random_bool(OCCLUSION_RATE);
    let mut n = instances.len();
    let placed = loop {
        match place(&instances[..n], QUERY_SIZE, occlude && n >= 2, rng) {
            Ok(p) => break p,
            Err(e) if n == 1 => return Err(e),
            Err(_) => n -= 1,
        }
    };
    render_image(&placed, QUERY_SIZE, rng.random())
}

/// Support image: the instance near the centre, optionally with one
/// distractor of another class that is masked out.
pub fn render_support<R: Rng + ?Sized>(
    instance: ShapeInstance,
    distractor: Option<ShapeInstance>,
    rng: &mut R,
) -> Result<SupportPair> {
    let c = (SUPPORT_SIZE / 2) as i32;
    let jitter = (SUPPORT_SIZE as i32 / 2 - instance.half as i32 - 2).clamp(0, 6);
    let cx = (c + rng.random_range(-jitter..=jitter)) as u16;
    let cy = (c + rng.random_range(-jitter..=jitter)) as u16;
    let mut shapes = vec![instance.at(cx, cy)];
    if let Some(d) = distractor {
        for _ in 0..PLACEMENT_RETRIES {
            if 2 * d.half as usize + 2 >= SUPPORT_SIZE {
                break;
            }
            let (dx, dy) = random_center(d.half, SUPPORT_SIZE, rng);
            let p = d.at(dx, dy);
            if disjoint(&p, &shapes[0], 1) {
                shapes.push(p);
                break;
            }
        }
    }
    let r = render_image(&shapes, SUPPORT_SIZE, rng.random())?;
    let boxes: Vec<RoIBox> = r.boxes.iter().filter(|b| b.class_id == Some(instance.class_id)).copied().collect();
    let mask = crate::detector::box_mask(&boxes, SUPPORT_SIZE);
    Ok(SupportPair { class_id: instance.class_id, image: r.image, mask, boxes })
}

/// Samples one training episode.
///
/// Meta-training draws query objects, supports and support distractors
/// from the base classes only. Fine-tuning covers base and novel classes
/// and draws every object from the fixed pool.
pub fn sample_episode<R: Rng + ?Sized>(
    rng: &mut R,
    split: &SplitConfig,
    phase: Phase,
    budget: Option<&ShotBudget>,
) -> Result<Episode> {
    match phase {
        Phase::MetaTrain => {
            let classes = split.base_classes.clone();
            if classes.is_empty() {
                return Err(config_err!("split has no base classes"));
            }
            let n = rng.random_range(1..=3);
            let objs: Vec<ShapeInstance> =
                (0..n).map(|_| ShapeInstance::random(*classes.choose(rng).expect("non-empty"), rng)).collect();
            let q = render_query(&objs, rng)?;
            let mut supports = Vec::with_capacity(classes.len());
            for &c in &classes {
                let inst = ShapeInstance::random(c, rng);
                let distractor = if classes.len() > 1 && rng.random_bool(0.3) {
                    let others: Vec<usize> = classes.iter().copied().filter(|&o| o != c).collect();
                    let mut d = ShapeInstance::random(*others.choose(rng).expect("non-empty"), rng);
                    d.half = d.half.min(10);
                    Some(d)
                } else {
                    None
                };
                supports.push(render_support(inst, distractor, rng)?);
            }
            Ok(Episode { query: q.image, gt: q.boxes, supports, classes })
        }
        Phase::FineTune => {
            let budget = budget.ok_or_else(|| config_err!("fine-tuning requires a shot budget"))?;
            let classes = split.all_classes();
            for &c in &classes {
                if budget.instances(c).is_empty() {
                    return Err(config_err!("shot budget has no instances for class {}", c));
                }
            }
            let n = rng.random_range(1..=3);
            let objs: Vec<ShapeInstance> = (0..n)
                .map(|_| *budget.instances(*classes.choose(rng).expect("non-empty")).choose(rng).expect("non-empty"))
                .collect();
            let q = render_query(&objs, rng)?;
            let mut supports = Vec::with_capacity(classes.len());
            for &c in &classes {
                let inst = *budget.instances(c).choose(rng).expect("checked above");
                supports.push(render_support(inst, None, rng)?);
            }
            Ok(Episode { query: q.image, gt: q.boxes, supports, classes })
        }
    }
}

/// Per-run episode sampler owning its RNG stream.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    pub split: SplitConfig,
    pub phase: Phase,
    pub budget: Option<ShotBudget>,
    rng: ChaCha8Rng,
}

impl EpisodeSampler {
    pub fn new(dataset_seed: u64, split: SplitConfig, phase: Phase, budget: Option<ShotBudget>, run_index: u64) -> Self {
        let tag = match phase {
            Phase::MetaTrain => 0,
            Phase::FineTune => 1,
        };
        let seed = stream_seed(&[TAG_TRAIN, dataset_seed, split.split_id as u64, run_index, tag]);
        EpisodeSampler { split, phase, budget, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_episode(&mut self) -> Result<Episode> {
        sample_episode(&mut self.rng, &self.split, self.phase, self.budget.as_ref())
    }
}

/// One evaluation image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct TestImage {
    pub image_id: usize,
    pub image: Tensor<f32>,
    pub gt: Vec<RoIBox>,
}

/// Fixed evaluation stream over all classes. The first twelve images
/// each lead with a different class so every class is present.
pub fn test_stream(dataset_seed: u64, split: &SplitConfig, n_images: usize) -> Result<Vec<TestImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[TAG_TEST, dataset_seed, split.split_id as u64]));
    let classes = split.all_classes();
    (0..n_images)
        .map(|i| {
            let n = rng.random_range(1..=3);
            let objs: Vec<ShapeInstance> = (0..n)
                .map(|j| {
                    let c = if j == 0 && i < classes.len() { classes[i] } else { *classes.choose(&mut rng).expect("non-empty") };
                    ShapeInstance::random(c, &mut rng)
                })
                .collect();
            let r = render_query(&objs, &mut rng)?;
            Ok(TestImage { image_id: i, image: r.image, gt: r.boxes })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(class_id: usize, half: u16) -> ShapeInstance {
        ShapeInstance { class_id, half, color: [200, 180, 160], texture_seed: 3 }
    }

    #[test]
    fn centered_circle_box() {
        let r = render_image(&[inst(0, 10).at(48, 48)], 96, 1).unwrap();
        assert_eq!(r.boxes.len(), 1);
        let b = r.boxes[0];
        assert_eq!((b.width(), b.height()), (20.0, 20.0));
        assert_eq!(b.center(), (48.0, 48.0));
        assert_eq!(b.class_id, Some(0));
    }

    #[test]
    fn render_errors_and_determinism() {
        assert!(render_image(&[], 96, 0).is_err());
        assert!(render_image(&[inst(0, 10).at(5, 48)], 96, 0).is_err());
        let shapes = [inst(3, 12).at(30, 30), inst(7, 9).at(70, 60)];
        assert_eq!(render_image(&shapes, 96, 9).unwrap(), render_image(&shapes, 96, 9).unwrap());
        // fully covered square
        let hidden = [inst(1, 8).at(48, 48), inst(1, 14).at(48, 48)];
        assert!(render_image(&hidden, 96, 0).is_err());
    }

    #[test]
    fn shapes_are_distinct() {
        let feet: Vec<Vec<usize>> = (0..NUM_CLASSES).map(|c| inst(c, 16).at(32, 32).footprint(64)).collect();
        for i in 0..NUM_CLASSES {
            assert!(feet[i].len() > 60, "class {} too thin", i);
            for j in 0..i {
                assert_ne!(feet[i], feet[j], "classes {} and {} render identically", i, j);
            }
        }
    }

    #[test]
    fn splits_partition_classes() {
        for s in 0..3 {
            let split = SplitConfig::new(s).unwrap();
            split.validate().unwrap();
            assert_eq!((split.base_classes.len(), split.novel_classes.len()), (8, 4));
        }
        assert!(SplitConfig::new(3).is_err());
    }

    #[test]
    fn meta_train_episode_shape() {
        let split = SplitConfig::new(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = sample_episode(&mut rng, &split, Phase::MetaTrain, None).unwrap();
        assert_eq!(ep.supports.len(), 8);
        assert_eq!(ep.classes, split.base_classes);
        for (s, &c) in ep.supports.iter().zip(&ep.classes) {
            assert_eq!(s.class_id, c);
            assert_eq!(s.image.shape(), &[3, 64, 64]);
            assert_eq!(s.mask.shape(), &[1, 64, 64]);
        }
        assert!(!ep.gt.is_empty() && ep.gt.len() <= 3);
    }

    #[test]
    fn fine_tune_needs_budget() {
        let split = SplitConfig::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(sample_episode(&mut rng, &split, Phase::FineTune, None).is_err());
        let mut pool = build_shot_pool(1, &split, 1, 0).unwrap();
        pool.pool.get_mut(&split.novel_classes[0]).unwrap().clear();
        assert!(sample_episode(&mut rng, &split, Phase::FineTune, Some(&pool)).is_err());
    }

    #[test]
    fn crowded_pools_still_sample() {
        let split = SplitConfig::new(0).unwrap();
        let mut pool = build_shot_pool(3, &split, 1, 0).unwrap();
        for v in pool.pool.values_mut() {
            v[0].half = HALF_RANGE.1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let ep = sample_episode(&mut rng, &split, Phase::FineTune, Some(&pool)).unwrap();
            assert!((1..=3).contains(&ep.gt.len()));
        }
    }

    #[test]
    fn pool_counts_and_determinism() {
        let split = SplitConfig::new(0).unwrap();
        let a = build_shot_pool(11, &split, 5, 0).unwrap();
        assert_eq!(a.len(), 60);
        assert_eq!(a, build_shot_pool(11, &split, 5, 0).unwrap());
        assert!(build_shot_pool(11, &split, 0, 0).is_err());
    }
}
