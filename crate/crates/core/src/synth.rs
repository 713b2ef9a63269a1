//! Deterministic synthetic stain pairs with shared ground-truth masks.
//!
//! Each scene has one geometry (blobs, elongated distractors, small dots,
//! a low-frequency tissue texture) rendered under two palettes. The rich
//! palette colors every structure; the poor palette paints the elongated
//! distractors with the background color, so nothing of them survives and
//! poor-to-rich translation has to invent them. Fine pixel noise is drawn
//! independently per profile.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StainProfile {
    Rich,
    Poor,
}

impl StainProfile {
    pub fn other(&self) -> StainProfile {
        match self {
            StainProfile::Rich => StainProfile::Poor,
            StainProfile::Poor => StainProfile::Rich,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StainProfile::Rich => "rich",
            StainProfile::Poor => "poor",
        }
    }
}

impl fmt::Display for StainProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub scene_id: u64,
    pub height: usize,
    pub width: usize,
    pub n_blobs: usize,
    pub blob_radius_range: (f64, f64),
    /// Elongated distractors per 100 pixels; small dots use the same rate.
    pub distractor_density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W x 3` in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major `H x W`, 1 on blobs.
    pub mask: Vec<u8>,
    pub domain: StainProfile,
    pub scene_id: u64,
}

impl LabeledPatch {
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.image.iter().map(|v| quantize(*v)).collect()
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy)]
struct Palette {
    background: [f32; 3],
    blob: [f32; 3],
    rim: [f32; 3],
    tubule: [f32; 3],
    nucleus: [f32; 3],
}

const RICH: Palette = Palette {
    background: [0.92, 0.78, 0.86],
    blob: [0.66, 0.32, 0.58],
    rim: [0.48, 0.18, 0.42],
    tubule: [0.74, 0.46, 0.66],
    nucleus: [0.36, 0.24, 0.52],
};

const POOR: Palette = Palette {
    background: [0.90, 0.88, 0.84],
    blob: [0.62, 0.44, 0.30],
    rim: [0.50, 0.34, 0.22],
    tubule: [0.90, 0.88, 0.84],
    nucleus: [0.45, 0.50, 0.70],
};

const PIXEL_NOISE: f64 = 0.03;
const TEXTURE_AMPLITUDE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Background,
    Blob,
    Rim,
    Tubule,
    Nucleus,
}

#[derive(Debug, Clone)]
struct Layout {
    regions: Vec<Region>,
    texture: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct Circle {
    x: f64,
    y: f64,
    r: f64,
}

fn place_blobs(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Circle>> {
    const LAYOUTS: usize = 50;
    let (rmin, rmax) = spec.blob_radius_range;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let fail = || Error::BlobPlacement {
        scene_id: spec.scene_id,
        seed: spec.seed,
        n_blobs: spec.n_blobs,
    };
    if rmin <= 0.0 || rmax < rmin || 2.0 * rmin + 3.0 > w.min(h) {
        return Err(fail());
    }
    for _ in 0..LAYOUTS {
        if let Some(blobs) = try_layout(spec, rng) {
            return Ok(blobs);
        }
    }
    Err(fail())
}

/// One greedy layout attempt; `None` when a blob finds no free spot.
fn try_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<Vec<Circle>> {
    const RETRIES: usize = 200;
    let (rmin, rmax) = spec.blob_radius_range;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut blobs: Vec<Circle> = Vec::with_capacity(spec.n_blobs);
    for _ in 0..spec.n_blobs {
        let mut placed = false;
        for _ in 0..RETRIES {
            let r = if rmax > rmin { rng.gen_range(rmin..=rmax) } else { rmin };
            // one pixel of margin on every side
            let lo = r + 1.0;
            let (hi_x, hi_y) = (w - 2.0 - r, h - 2.0 - r);
            if hi_x < lo || hi_y < lo {
                continue;
            }
            let c = Circle {
                x: rng.gen_range(lo..=hi_x),
                y: rng.gen_range(lo..=hi_y),
                r,
            };
            if blobs.iter().all(|b| ((b.x - c.x).powi(2) + (b.y - c.y).powi(2)).sqrt() > b.r + c.r + 2.0) {
                blobs.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(blobs)
}

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

fn layout(spec: &SceneSpec) -> Result<Layout> {
    let mut rng = stream(spec.seed, "layout");
    let blobs = place_blobs(spec, &mut rng)?;
    let (w, h) = (spec.width, spec.height);
    let mut regions = vec![Region::Background; w * h];

    let clear_of_blobs = |x: f64, y: f64, pad: f64| {
        blobs
            .iter()
            .all(|b| ((b.x - x).powi(2) + (b.y - y).powi(2)).sqrt() > b.r + pad)
    };

    let count = ((spec.distractor_density * (w * h) as f64) / 100.0).round() as usize;
    let mut tubules = Vec::with_capacity(count);
    for _ in 0..count * 4 {
        if tubules.len() == count {
            break;
        }
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let half = rng.gen_range(2.0..4.0);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        if clear_of_blobs(cx, cy, half + 2.5) {
            let (dx, dy) = (half * angle.cos(), half * angle.sin());
            tubules.push(((cx - dx, cy - dy), (cx + dx, cy + dy)));
        }
    }
    let mut nuclei = Vec::with_capacity(count);
    for _ in 0..count * 4 {
        if nuclei.len() == count {
            break;
        }
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        if clear_of_blobs(cx, cy, 2.5) {
            nuclei.push((cx, cy));
        }
    }

    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let idx = y * w + x;
            if let Some(b) = blobs
                .iter()
                .find(|b| ((b.x - px).powi(2) + (b.y - py).powi(2)).sqrt() <= b.r)
            {
                let d = ((b.x - px).powi(2) + (b.y - py).powi(2)).sqrt();
                regions[idx] = if d > b.r - 1.5 { Region::Rim } else { Region::Blob };
            } else if nuclei
                .iter()
                .any(|&(nx, ny)| (nx - px).powi(2) + (ny - py).powi(2) <= 1.2 * 1.2)
            {
                regions[idx] = Region::Nucleus;
            } else if tubules.iter().any(|&(a, b)| segment_distance(px, py, a, b) <= 1.0) {
                regions[idx] = Region::Tubule;
            }
        }
    }

    // Low-frequency tissue texture shared by both renderings.
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = rng.gen_range(0.04..0.2) * std::f64::consts::TAU;
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (freq * angle.cos(), freq * angle.sin(), phase)
        })
        .collect();
    let mut texture = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = waves
                .iter()
                .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).cos())
                .sum::<f64>()
                / waves.len() as f64;
            texture.push((v * TEXTURE_AMPLITUDE) as f32);
        }
    }
    Ok(Layout { regions, texture })
}

fn paint(spec: &SceneSpec, layout: &Layout, profile: StainProfile) -> LabeledPatch {
    let palette = match profile {
        StainProfile::Rich => RICH,
        StainProfile::Poor => POOR,
    };
    let mut noise = stream(spec.seed, &format!("pixels-{profile}"));
    let mut image = Vec::with_capacity(layout.regions.len() * 3);
    for (region, tex) in layout.regions.iter().zip(&layout.texture) {
        let base = match region {
            Region::Background => palette.background,
            Region::Blob => palette.blob,
            Region::Rim => palette.rim,
            Region::Tubule => palette.tubule,
            Region::Nucleus => palette.nucleus,
        };
        for c in base {
            let z: f64 = StandardNormal.sample(&mut noise);
            image.push((c + tex + (z * PIXEL_NOISE) as f32).clamp(0.0, 1.0));
        }
    }
    let mask = layout
        .regions
        .iter()
        .map(|r| u8::from(matches!(r, Region::Blob | Region::Rim)))
        .collect();
    LabeledPatch {
        height: spec.height,
        width: spec.width,
        image,
        mask,
        domain: profile,
        scene_id: spec.scene_id,
    }
}

/// Renders one scene under both palettes: `(rich, poor)`.
pub fn render_scene(spec: &SceneSpec) -> Result<(LabeledPatch, LabeledPatch)> {
    let layout = layout(spec)?;
    Ok((paint(spec, &layout, StainProfile::Rich), paint(spec, &layout, StainProfile::Poor)))
}

/// Pixel sums over elongated distractors and over plain background for one
/// rendering: `(distractor_sum, distractor_count, background_sum, background_count)`.
pub fn distractor_background_sums(spec: &SceneSpec, profile: StainProfile) -> Result<([f64; 3], usize, [f64; 3], usize)> {
    let layout = layout(spec)?;
    let patch = paint(spec, &layout, profile);
    let (mut ds, mut dn, mut bs, mut bn) = ([0.0; 3], 0, [0.0; 3], 0);
    for (i, region) in layout.regions.iter().enumerate() {
        let px = &patch.image[i * 3..i * 3 + 3];
        let (sum, n) = match region {
            Region::Tubule => (&mut ds, &mut dn),
            Region::Background => (&mut bs, &mut bn),
            _ => continue,
        };
        for c in 0..3 {
            sum[c] += f64::from(px[c]);
        }
        *n += 1;
    }
    Ok((ds, dn, bs, bn))
}

/// Distance between the mean distractor color and the mean background color,
/// pooled over all given scenes.
pub fn distractor_contrast(specs: &[SceneSpec], profile: StainProfile) -> Result<f64> {
    let (mut ds, mut dn, mut bs, mut bn) = ([0.0; 3], 0usize, [0.0; 3], 0usize);
    for spec in specs {
        let (a, an, b, bnn) = distractor_background_sums(spec, profile)?;
        for c in 0..3 {
            ds[c] += a[c];
            bs[c] += b[c];
        }
        dn += an;
        bn += bnn;
    }
    if dn == 0 || bn == 0 {
        return Err(Error::EmptySamples("distractor or background pixels"));
    }
    Ok((0..3)
        .map(|c| (ds[c] / dn as f64 - bs[c] / bn as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of blobs per scene.
    pub n_blobs: (usize, usize),
    pub blob_radius_range: (f64, f64),
    pub distractor_density: f64,
    pub base_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_blobs: (1, 3),
            blob_radius_range: (6.0, 10.0),
            distractor_density: 0.6,
            base_seed: 0,
            n_train: 512,
            n_val: 64,
            n_test: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_val < 1 || self.n_test < 1 {
            return Err(Error::Config("every split needs at least one scene".into()));
        }
        if self.n_blobs.0 > self.n_blobs.1 {
            return Err(Error::Config("n_blobs range is inverted".into()));
        }
        Ok(())
    }

    /// Half-open scene-id range of each split; ranges are consecutive and disjoint.
    pub fn split_ranges(&self) -> BTreeMap<Split, (u64, u64)> {
        let (a, b, c) = (self.n_train as u64, self.n_val as u64, self.n_test as u64);
        BTreeMap::from([
            (Split::Train, (0, a)),
            (Split::Val, (a, a + b)),
            (Split::Test, (a + b, a + b + c)),
        ])
    }

    pub fn scene(&self, scene_id: u64) -> SceneSpec {
        let seed = derive_seed(self.base_seed, &format!("scene-{scene_id}"));
        let mut rng = stream(seed, "count");
        SceneSpec {
            seed,
            scene_id,
            height: self.height,
            width: self.width,
            n_blobs: rng.gen_range(self.n_blobs.0..=self.n_blobs.1),
            blob_radius_range: self.blob_radius_range,
            distractor_density: self.distractor_density,
        }
    }
}

pub fn check_disjoint(ranges: &BTreeMap<Split, (u64, u64)>) -> Result<()> {
    let spans: Vec<_> = ranges.iter().collect();
    for (i, (sa, a)) in spans.iter().enumerate() {
        for (sb, b) in &spans[i + 1..] {
            if a.0 < b.1 && b.0 < a.1 {
                return Err(Error::Config(format!(
                    "scene ranges of {} {a:?} and {} {b:?} overlap",
                    sa.as_str(),
                    sb.as_str()
                )));
            }
        }
    }
    Ok(())
}

/// Images and masks of one split as tensors.
#[derive(Debug)]
pub struct SplitData {
    pub scene_ids: Vec<u64>,
    /// `(N, 3, H, W)` float in `[0, 1]`.
    pub rich: Tensor,
    pub poor: Tensor,
    /// `(N, H, W)` uint8 in `{0, 1}`.
    pub masks: Tensor,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.scene_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene_ids.is_empty()
    }

    pub fn images(&self, profile: StainProfile) -> &Tensor {
        match profile {
            StainProfile::Rich => &self.rich,
            StainProfile::Poor => &self.poor,
        }
    }
}

/// Unpaired translation-training streams from the train split.
#[derive(Debug)]
pub struct TranslationStreams {
    pub source_ids: Vec<u64>,
    pub target_ids: Vec<u64>,
    pub source: Tensor,
    pub target: Tensor,
}

#[derive(Debug)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub splits: BTreeMap<Split, SplitData>,
}

fn rgb_to_tensor(pixels: &[u8], n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_slice(pixels)
        .view([n as i64, h as i64, w as i64, 3])
        .permute([0, 3, 1, 2])
        .to_kind(Kind::Float)
        / 255.0
}

impl Dataset {
    /// Renders every split in memory, quantized exactly as the PNG files are.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let ranges = spec.split_ranges();
        check_disjoint(&ranges)?;
        let mut splits = BTreeMap::new();
        for (split, (start, end)) in ranges {
            let (mut rich, mut poor, mut masks, mut ids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for id in start..end {
                let (r, p) = render_scene(&spec.scene(id))?;
                rich.extend(r.to_rgb8());
                poor.extend(p.to_rgb8());
                masks.extend_from_slice(&r.mask);
                ids.push(id);
            }
            let n = ids.len();
            splits.insert(
                split,
                SplitData {
                    scene_ids: ids,
                    rich: rgb_to_tensor(&rich, n, spec.height, spec.width),
                    poor: rgb_to_tensor(&poor, n, spec.height, spec.width),
                    masks: Tensor::from_slice(&masks).view([n as i64, spec.height as i64, spec.width as i64]),
                },
            );
        }
        Ok(Self {
            height: spec.height,
            width: spec.width,
            splits,
        })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        &self.splits[&split]
    }

    /// Source images come from the first half of the train scenes, target
    /// images from the second half, so no scene contributes to both streams.
    pub fn translation_streams(&self, source: StainProfile) -> TranslationStreams {
        let train = self.split(Split::Train);
        let n = train.len() as i64;
        let half = (n / 2).max(1);
        let target = source.other();
        TranslationStreams {
            source_ids: train.scene_ids[..half as usize].to_vec(),
            target_ids: train.scene_ids[half as usize..].to_vec(),
            source: train.images(source).narrow(0, 0, half),
            target: train.images(target).narrow(0, half, n - half),
        }
    }

    /// Reads `<root>/<split>/{rich,poor,masks}/<scene_id>.png`. A manifest is not required,
    /// so externally exported patch directories with the same layout load too.
    pub fn load(root: &Path) -> Result<Self> {
        let mut splits = BTreeMap::new();
        let (mut height, mut width) = (0, 0);
        for split in Split::ALL {
            let mask_dir = root.join(split.as_str()).join("masks");
            let mut ids: Vec<u64> = std::fs::read_dir(&mask_dir)
                .map_err(|e| Error::artifact(&mask_dir, e.to_string()))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let p = e.path();
                    (p.extension()? == "png").then(|| p.file_stem()?.to_str()?.parse().ok())?
                })
                .collect();
            ids.sort_unstable();
            let (mut rich, mut poor, mut masks) = (Vec::new(), Vec::new(), Vec::new());
            for id in &ids {
                let name = scene_file(*id);
                for (profile, buf) in [(StainProfile::Rich, &mut rich), (StainProfile::Poor, &mut poor)] {
                    let path = root.join(split.as_str()).join(profile.as_str()).join(&name);
                    let img = image::open(&path)?.to_rgb8();
                    if height == 0 {
                        (height, width) = (img.height() as usize, img.width() as usize);
                    } else if (img.height() as usize, img.width() as usize) != (height, width) {
                        return Err(Error::artifact(&path, "patch size differs from the rest of the dataset"));
                    }
                    buf.extend_from_slice(img.as_raw());
                }
                let path = mask_dir.join(&name);
                let m = image::open(&path)?.to_luma8();
                masks.extend(m.as_raw().iter().map(|v| u8::from(*v > 127)));
            }
            let n = ids.len();
            if n == 0 {
                return Err(Error::artifact(&mask_dir, "split has no patches"));
            }
            splits.insert(
                split,
                SplitData {
                    scene_ids: ids,
                    rich: rgb_to_tensor(&rich, n, height, width),
                    poor: rgb_to_tensor(&poor, n, height, width),
                    masks: Tensor::from_slice(&masks).view([n as i64, height as i64, width as i64]),
                },
            );
        }
        Ok(Self { height, width, splits })
    }
}

pub fn scene_file(scene_id: u64) -> String {
    format!("{scene_id:06}.png")
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub splits: BTreeMap<Split, (u64, u64)>,
    /// Relative path to SHA-256 of the file contents.
    pub files: BTreeMap<String, String>,
}

impl DatasetManifest {
    /// One digest over every file checksum, for quick comparison.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (path, sum) in &self.files {
            h.update(path.as_bytes());
            h.update(sum.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildOutcome {
    Written,
    Unchanged,
}

fn encode_png(pixels: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(pixels, w as u32, h as u32, color)?;
    Ok(out)
}

fn verify_existing(root: &Path, spec: &DatasetSpec) -> Option<DatasetManifest> {
    let text = std::fs::read_to_string(root.join(MANIFEST_FILE)).ok()?;
    let manifest: DatasetManifest = serde_json::from_str(&text).ok()?;
    if manifest.version != MANIFEST_VERSION || &manifest.spec != spec {
        return None;
    }
    for (rel, sum) in &manifest.files {
        let bytes = std::fs::read(root.join(rel)).ok()?;
        if &hex::encode(Sha256::digest(&bytes)) != sum {
            return None;
        }
    }
    Some(manifest)
}

/// Writes the dataset directory and its checksum manifest. If `root` already
/// holds a dataset with the same spec and intact files, nothing is written.
pub fn build_dataset(root: &Path, spec: &DatasetSpec) -> Result<(DatasetManifest, BuildOutcome)> {
    spec.validate()?;
    let ranges = spec.split_ranges();
    check_disjoint(&ranges)?;
    if let Some(existing) = verify_existing(root, spec) {
        return Ok((existing, BuildOutcome::Unchanged));
    }
    let mut files = BTreeMap::new();
    for (split, (start, end)) in &ranges {
        for dir in ["rich", "poor", "masks"] {
            std::fs::create_dir_all(root.join(split.as_str()).join(dir))?;
        }
        for id in *start..*end {
            let (rich, poor) = render_scene(&spec.scene(id))?;
            let name = scene_file(id);
            let mask_px: Vec<u8> = rich.mask.iter().map(|m| m * 255).collect();
            let outputs: [(PathBuf, Vec<u8>); 3] = [
                (
                    PathBuf::from(split.as_str()).join("rich").join(&name),
                    encode_png(&rich.to_rgb8(), spec.width, spec.height, image::ExtendedColorType::Rgb8)?,
                ),
                (
                    PathBuf::from(split.as_str()).join("poor").join(&name),
                    encode_png(&poor.to_rgb8(), spec.width, spec.height, image::ExtendedColorType::Rgb8)?,
                ),
                (
                    PathBuf::from(split.as_str()).join("masks").join(&name),
                    encode_png(&mask_px, spec.width, spec.height, image::ExtendedColorType::L8)?,
                ),
            ];
            for (rel, bytes) in outputs {
                std::fs::write(root.join(&rel), &bytes)?;
                let key = rel.to_string_lossy().replace('\\', "/");
                files.insert(key, hex::encode(Sha256::digest(&bytes)));
            }
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        splits: ranges,
        files,
    };
    std::fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok((manifest, BuildOutcome::Written))
}
