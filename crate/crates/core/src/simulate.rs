//! Synthetic desk-scale scenes with analytic ray casting, ground truth, and
//! front-end noise injection (drops, over-/under-segmentation, boundary
//! jitter, feature and depth noise).

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::Associator;
use crate::error::{Error, Result};
use crate::evolution::{integrate_frame, Codebook};
use crate::frame_store::{
    meters_to_mm, DepthImage, FrameBundle, GroundTruthRefs, MaskObservation, PixelMask,
    SequenceManifest, SequenceWriter,
};
use crate::geometry::{dot, sub, CameraIntrinsics, Pose, Vec3};
use crate::query::BACKGROUND;
use crate::voxel_map::VoxelMap;

pub const SCENE_FILE: &str = "scene.json";
pub const GT_DIR: &str = "gt";
const GT_MAGIC: &[u8; 4] = b"VXGT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    Box { min: Vec3, max: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Shape {
    /// Nearest positive ray parameter `t` with `origin + t * dir` on the surface.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        match *self {
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let (mut ta, mut tb) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
            Shape::Sphere { center, radius } => {
                let oc = sub(origin, center);
                let a = dot(dir, dir);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                (t > 0.0).then_some(t)
            }
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Sphere { center, radius } => {
                let d = sub(p, center);
                dot(d, d) <= radius * radius
            }
        }
    }

    /// Axis-aligned bounds.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Shape::Box { min, max } => (min, max),
            Shape::Sphere { center: c, radius: r } => {
                ([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub instance: u32,
    pub class: u32,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub room_min: Vec3,
    pub room_max: Vec3,
    pub objects: Vec<SceneObject>,
    pub classes: Vec<ClassEntry>,
    pub intrinsics: CameraIntrinsics,
    pub trajectory: Vec<Pose>,
}

impl SyntheticScene {
    pub fn embedding_dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.embedding.len())
    }

    pub fn class_of(&self, instance: u32) -> Option<u32> {
        self.objects
            .iter()
            .find(|o| o.instance == instance)
            .map(|o| o.class)
    }

    pub fn class_embedding(&self, class: u32) -> Option<&[f64]> {
        self.classes
            .iter()
            .find(|c| c.id == class)
            .map(|c| c.embedding.as_slice())
    }

    /// `(class id, embedding)` pairs for semantic labeling.
    pub fn class_table(&self) -> Vec<(u32, Vec<f64>)> {
        self.classes
            .iter()
            .map(|c| (c.id, c.embedding.clone()))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema(path, "scene", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Inconsistent(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub objects: usize,
    pub frames: usize,
    pub embedding_dim: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Radius of the disc objects are placed in (meters).
    pub area_radius: f64,
    pub orbit_radius: f64,
    pub orbit_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects: 6,
            frames: 60,
            embedding_dim: 16,
            width: 320,
            height: 240,
            focal: 260.0,
            area_radius: 0.9,
            orbit_radius: 2.2,
            orbit_height: 1.3,
        }
    }
}

/// Builds a deterministic scene: non-overlapping boxes and spheres on the
/// floor, one orthonormal class embedding per object, and an orbiting
/// camera looking at the scene center.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    if cfg.objects == 0 {
        return Err(Error::Config("scene needs at least one object".into()));
    }
    if cfg.embedding_dim < cfg.objects {
        return Err(Error::Config(format!(
            "embedding dimension {} cannot hold {} orthogonal classes",
            cfg.embedding_dim, cfg.objects
        )));
    }
    if cfg.frames == 0 {
        return Err(Error::Config("scene needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut objects: Vec<SceneObject> = Vec::new();
    let mut footprints: Vec<([f64; 2], f64)> = Vec::new();
    const CLEARANCE: f64 = 0.08;
    for i in 0..cfg.objects {
        let mut placed = false;
        for _ in 0..2000 {
            let is_sphere = rng.random_bool(0.35);
            let (shape, center, radius) = if is_sphere {
                let r = rng.random_range(0.08..0.17);
                let c = random_in_disc(&mut rng, cfg.area_radius - r);
                (
                    Shape::Sphere {
                        center: [c[0], c[1], r],
                        radius: r,
                    },
                    c,
                    r,
                )
            } else {
                let hx: f64 = rng.random_range(0.07..0.2);
                let hy: f64 = rng.random_range(0.07..0.2);
                let h = rng.random_range(0.12..0.45);
                let r = (hx * hx + hy * hy).sqrt();
                let c = random_in_disc(&mut rng, cfg.area_radius - r);
                (
                    Shape::Box {
                        min: [c[0] - hx, c[1] - hy, 0.0],
                        max: [c[0] + hx, c[1] + hy, h],
                    },
                    c,
                    r,
                )
            };
            let clear = footprints.iter().all(|(o, orad)| {
                let d = ((o[0] - center[0]).powi(2) + (o[1] - center[1]).powi(2)).sqrt();
                d >= orad + radius + CLEARANCE
            });
            if clear {
                footprints.push((center, radius));
                objects.push(SceneObject {
                    instance: i as u32,
                    class: i as u32,
                    shape,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place object {i} of {} without overlap",
                cfg.objects
            )));
        }
    }

    let classes = orthonormal_basis(&mut rng, cfg.objects, cfg.embedding_dim)
        .into_iter()
        .enumerate()
        .map(|(i, embedding)| ClassEntry {
            id: i as u32,
            name: format!("class_{i}"),
            embedding,
        })
        .collect();

    let intrinsics = CameraIntrinsics::new(
        cfg.focal,
        cfg.focal,
        cfg.width as f64 / 2.0,
        cfg.height as f64 / 2.0,
        cfg.width,
        cfg.height,
    )?;
    let start = rng.random_range(0.0..TAU);
    let target = [0.0, 0.0, 0.15];
    let trajectory = (0..cfg.frames)
        .map(|k| {
            let phase = k as f64 / cfg.frames as f64;
            let angle = start + TAU * phase;
            let radius = cfg.orbit_radius * (1.0 + 0.08 * (2.0 * TAU * phase).sin());
            let eye = [
                radius * angle.cos(),
                radius * angle.sin(),
                cfg.orbit_height + 0.15 * (TAU * phase).cos(),
            ];
            Pose::look_at(eye, target, [0.0, 0.0, 1.0])
        })
        .collect::<Result<Vec<_>>>()?;

    let r = cfg.area_radius + 0.5;
    Ok(SyntheticScene {
        seed,
        room_min: [-r, -r, 0.0],
        room_max: [r, r, 1.0],
        objects,
        classes,
        intrinsics,
        trajectory,
    })
}

fn random_in_disc(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 2] {
    let radius = radius.max(0.0);
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..TAU);
    [r * a.cos(), r * a.sin()]
}

/// `n` random orthonormal vectors of dimension `dim` (Gram-Schmidt).
fn orthonormal_basis(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Per-pixel ground-truth instance ids (`BACKGROUND` where nothing is hit).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtRaster {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
}

impl GtRaster {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.labels.len());
        out.extend_from_slice(GT_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&1u32.to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = crate::frame_store::ByteReader::new(buf, path);
        r.magic(GT_MAGIC)?;
        let width = r.u32("width")?;
        let height = r.u32("height")?;
        if r.u32("version")? != 1 {
            return Err(Error::schema(path, "version", "unsupported"));
        }
        let labels = (0..width as usize * height as usize)
            .map(|_| r.u32("labels"))
            .collect::<Result<_>>()?;
        r.finish()?;
        Ok(Self {
            width,
            height,
            labels,
        })
    }
}

/// Ray-casts the scene from `pose`: millimeter depth, GT labels, and one
/// clean mask per 4-connected GT region carrying its class embedding.
pub fn render_gt_frame(scene: &SyntheticScene, pose: &Pose, frame_id: u64) -> (FrameBundle, GtRaster) {
    let intr = scene.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let n = intr.pixel_count();
    let rows: Vec<(Vec<u16>, Vec<u32>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut depth = vec![0u16; w as usize];
            let mut labels = vec![BACKGROUND; w as usize];
            for u in 0..w {
                let dir = pose.rotate(intr.ray(u, v));
                let mut best: Option<(f64, u32)> = None;
                for o in &scene.objects {
                    if let Some(t) = o.shape.intersect(pose.translation, dir) {
                        if best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, o.instance));
                        }
                    }
                }
                if let Some((t, id)) = best {
                    // The camera-frame ray has unit z, so t is the depth.
                    let mm = meters_to_mm(t);
                    if mm > 0 {
                        depth[u as usize] = mm;
                        labels[u as usize] = id;
                    }
                }
            }
            (depth, labels)
        })
        .collect();
    let mut depth = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (d, l) in rows {
        depth.extend(d);
        labels.extend(l);
    }

    let masks = connected_regions(&labels, w, h)
        .into_iter()
        .map(|(id, pixels)| {
            let class = scene.class_of(id).expect("rendered instance exists");
            MaskObservation {
                mask: PixelMask::from_pixels(pixels),
                feature: scene
                    .class_embedding(class)
                    .expect("class exists")
                    .iter()
                    .map(|&x| x as f32)
                    .collect(),
                caption: scene
                    .classes
                    .iter()
                    .find(|c| c.id == class)
                    .map(|c| c.name.clone()),
                detection_score: 1.0,
            }
        })
        .collect();
    let frame = FrameBundle {
        frame_id,
        depth: DepthImage::new(w, h, depth).expect("raster sized from intrinsics"),
        pose: *pose,
        intrinsics: intr,
        masks,
        allow_overlap: false,
    };
    (
        frame,
        GtRaster {
            width: w,
            height: h,
            labels,
        },
    )
}

/// 4-connected components of equal non-background labels, in raster-scan
/// order of their first pixel.
fn connected_regions(labels: &[u32], w: u32, h: u32) -> Vec<(u32, Vec<u32>)> {
    let mut seen = vec![false; labels.len()];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        let id = labels[start];
        if id == BACKGROUND || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start as u32);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (u, v) = (p % w, p / w);
            let mut visit = |q: u32| {
                if !seen[q as usize] && labels[q as usize] == id {
                    seen[q as usize] = true;
                    stack.push(q);
                }
            };
            if u > 0 {
                visit(p - 1);
            }
            if u + 1 < w {
                visit(p + 1);
            }
            if v > 0 {
                visit(p - w);
            }
            if v + 1 < h {
                visit(p + w);
            }
        }
        regions.push((id, pixels));
    }
    regions
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub p_split: f64,
    pub p_merge: f64,
    /// Maximum boundary erosion/dilation in pixels.
    pub boundary_jitter: u32,
    pub embedding_noise_sigma: f64,
    /// Meters.
    pub depth_noise_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p_drop: 0.0,
            p_split: 0.0,
            p_merge: 0.0,
            boundary_jitter: 0,
            embedding_noise_sigma: 0.0,
            depth_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_drop", self.p_drop),
            ("p_split", self.p_split),
            ("p_merge", self.p_merge),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.embedding_noise_sigma >= 0.0 && self.depth_noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.p_drop == 0.0
            && self.p_split == 0.0
            && self.p_merge == 0.0
            && self.boundary_jitter == 0
            && self.embedding_noise_sigma == 0.0
            && self.depth_noise_sigma == 0.0
    }
}

/// Pixel bounding box as (u0, v0, u1, v1), inclusive.
fn bbox(mask: &PixelMask, w: u32) -> (u32, u32, u32, u32) {
    let mut b = (u32::MAX, u32::MAX, 0, 0);
    for p in mask.pixels() {
        let (u, v) = (p % w, p / w);
        b.0 = b.0.min(u);
        b.1 = b.1.min(v);
        b.2 = b.2.max(u);
        b.3 = b.3.max(v);
    }
    b
}

fn boxes_near(a: (u32, u32, u32, u32), b: (u32, u32, u32, u32), margin: u32) -> bool {
    a.0 <= b.2 + margin && b.0 <= a.2 + margin && a.1 <= b.3 + margin && b.1 <= a.3 + margin
}

/// Splits a mask along its longer bounding-box axis at the median pixel
/// coordinate. Returns `None` for masks that cannot be split.
pub fn split_mask(mask: &PixelMask, w: u32) -> Option<(PixelMask, PixelMask)> {
    let (u0, v0, u1, v1) = bbox(mask, w);
    let horizontal = u1 - u0 >= v1 - v0;
    let coord = |p: u32| if horizontal { p % w } else { p / w };
    let mut coords: Vec<u32> = mask.pixels().map(coord).collect();
    if coords.len() < 2 {
        return None;
    }
    let mid = coords.len() / 2;
    let (_, &mut cut, _) = coords.select_nth_unstable(mid);
    let (lo, hi): (Vec<u32>, Vec<u32>) = mask.pixels().partition(|&p| coord(p) < cut);
    if lo.is_empty() || hi.is_empty() {
        return None;
    }
    Some((PixelMask::from_pixels(lo), PixelMask::from_pixels(hi)))
}

fn dilate(mask: &PixelMask, w: u32, h: u32) -> PixelMask {
    let mut px: Vec<u32> = Vec::with_capacity(mask.len() * 2);
    for p in mask.pixels() {
        let (u, v) = (p % w, p / w);
        px.push(p);
        if u > 0 {
            px.push(p - 1);
        }
        if u + 1 < w {
            px.push(p + 1);
        }
        if v > 0 {
            px.push(p - w);
        }
        if v + 1 < h {
            px.push(p + w);
        }
    }
    PixelMask::from_pixels(px)
}

fn erode(mask: &PixelMask, w: u32, h: u32) -> PixelMask {
    PixelMask::from_pixels(mask.pixels().filter(|&p| {
        let (u, v) = (p % w, p / w);
        u > 0
            && u + 1 < w
            && v > 0
            && v + 1 < h
            && mask.contains(p - 1)
            && mask.contains(p + 1)
            && mask.contains(p - w)
            && mask.contains(p + w)
    }))
}

/// Degrades a frame's observations. The RNG stream is derived from the
/// noise seed and the frame id, so results are reproducible per frame.
pub fn perturb(frame: &FrameBundle, cfg: &NoiseConfig) -> FrameBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ frame.frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let (w, h) = (frame.intrinsics.width, frame.intrinsics.height);
    let mut out = frame.clone();
    if cfg.is_clean() {
        return out;
    }

    // Missing detections.
    let mut masks: Vec<MaskObservation> = frame
        .masks
        .iter()
        .filter(|_| !(cfg.p_drop > 0.0 && rng.random_bool(cfg.p_drop)))
        .cloned()
        .collect();

    // Under-segmentation: fuse with the nearest neighbouring mask.
    if cfg.p_merge > 0.0 && masks.len() > 1 {
        let boxes: Vec<_> = masks.iter().map(|m| bbox(&m.mask, w)).collect();
        let mut consumed = vec![false; masks.len()];
        let mut merged = Vec::with_capacity(masks.len());
        for i in 0..masks.len() {
            if consumed[i] {
                continue;
            }
            consumed[i] = true;
            let mut m = masks[i].clone();
            if rng.random_bool(cfg.p_merge) {
                let center = |b: (u32, u32, u32, u32)| {
                    ((b.0 + b.2) as f64 / 2.0, (b.1 + b.3) as f64 / 2.0)
                };
                let ci = center(boxes[i]);
                let partner = (0..masks.len())
                    .filter(|&j| !consumed[j] && boxes_near(boxes[i], boxes[j], 8))
                    .min_by(|&a, &b| {
                        let (ca, cb) = (center(boxes[a]), center(boxes[b]));
                        let da = (ca.0 - ci.0).powi(2) + (ca.1 - ci.1).powi(2);
                        let db = (cb.0 - ci.0).powi(2) + (cb.1 - ci.1).powi(2);
                        da.total_cmp(&db).then(a.cmp(&b))
                    });
                if let Some(j) = partner {
                    consumed[j] = true;
                    m = merge_observations(&m, &masks[j]);
                }
            }
            merged.push(m);
        }
        masks = merged;
    }

    // Over-segmentation.
    if cfg.p_split > 0.0 {
        let mut split = Vec::with_capacity(masks.len() * 2);
        for m in masks {
            if rng.random_bool(cfg.p_split) {
                if let Some((a, b)) = split_mask(&m.mask, w) {
                    split.push(MaskObservation { mask: a, ..m.clone() });
                    split.push(MaskObservation { mask: b, ..m });
                    continue;
                }
            }
            split.push(m);
        }
        masks = split;
    }

    // Boundary jitter.
    if cfg.boundary_jitter > 0 {
        let j = cfg.boundary_jitter as i32;
        for m in &mut masks {
            let k = rng.random_range(-j..=j);
            let mut mask = m.mask.clone();
            for _ in 0..k.unsigned_abs() {
                mask = if k > 0 { dilate(&mask, w, h) } else { erode(&mask, w, h) };
            }
            if !mask.is_empty() {
                m.mask = mask;
            }
        }
    }

    if cfg.embedding_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.embedding_noise_sigma).unwrap();
        for m in &mut masks {
            for x in &mut m.feature {
                *x += normal.sample(&mut rng) as f32;
            }
            if m.feature.iter().all(|&x| x == 0.0) {
                m.feature[0] = f32::EPSILON;
            }
        }
    }

    if cfg.depth_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.depth_noise_sigma).unwrap();
        for d in out.depth.data_mut() {
            if *d != 0 {
                let m = *d as f64 * 1e-3 + normal.sample(&mut rng);
                *d = meters_to_mm(m).max(1);
            }
        }
    }

    let overlap = masks
        .iter()
        .enumerate()
        .any(|(i, a)| masks[i + 1..].iter().any(|b| a.mask.intersects(&b.mask)));
    out.allow_overlap = frame.allow_overlap || overlap;
    out.masks = masks;
    out
}

fn merge_observations(a: &MaskObservation, b: &MaskObservation) -> MaskObservation {
    let (na, nb) = (a.mask.len() as f32, b.mask.len() as f32);
    let feature = a
        .feature
        .iter()
        .zip(&b.feature)
        .map(|(x, y)| (na * x + nb * y) / (na + nb))
        .collect();
    let caption = match (&a.caption, &b.caption) {
        (Some(x), Some(y)) => Some(format!("{x} and {y}")),
        (x, y) => x.clone().or_else(|| y.clone()),
    };
    MaskObservation {
        mask: a.mask.union(&b.mask),
        feature,
        caption,
        detection_score: a.detection_score.max(b.detection_score),
    }
}

/// One simulated frame: clean observation, noisy observation, GT labels.
pub struct SimFrame {
    pub clean: FrameBundle,
    pub noisy: FrameBundle,
    pub gt: GtRaster,
}

/// Renders and perturbs the trajectory frame at `index`.
pub fn simulate_frame(scene: &SyntheticScene, noise: &NoiseConfig, index: usize) -> SimFrame {
    let (clean, gt) = render_gt_frame(scene, &scene.trajectory[index], index as u64);
    let noisy = perturb(&clean, noise);
    SimFrame { clean, noisy, gt }
}

/// Writes a full sequence directory with `gt/` rasters and `scene.json`.
pub fn write_simulation(
    dir: impl AsRef<Path>,
    scene: &SyntheticScene,
    noise: &NoiseConfig,
    resolution: f64,
) -> Result<SequenceManifest> {
    noise.validate()?;
    let dir = dir.as_ref();
    let mut writer = SequenceWriter::create(dir, resolution, scene.embedding_dim())?;
    let gt_dir = dir.join(GT_DIR);
    fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
    for i in 0..scene.trajectory.len() {
        let f = simulate_frame(scene, noise, i);
        writer.write_frame(&f.noisy)?;
        let p = gt_dir.join(format!("{i:06}.labels"));
        fs::write(&p, f.gt.to_bytes()).map_err(|e| Error::io(&p, e))?;
    }
    scene.save(dir.join(SCENE_FILE))?;
    writer.set_ground_truth(GroundTruthRefs {
        scene: SCENE_FILE.into(),
        labels: GT_DIR.into(),
    });
    writer.finish()
}

/// Renders, perturbs and integrates the whole trajectory. Frames are
/// rendered in parallel batches and integrated in order.
pub fn map_scene(
    scene: &SyntheticScene,
    noise: &NoiseConfig,
    associator: &Associator,
    resolution: f64,
) -> Result<(VoxelMap, Codebook)> {
    noise.validate()?;
    let mut map = VoxelMap::new(resolution)?;
    let mut codebook = Codebook::new(scene.embedding_dim());
    let n = scene.trajectory.len();
    let batch = rayon::current_num_threads().max(1) * 2;
    for start in (0..n).step_by(batch) {
        let frames: Vec<FrameBundle> = (start..(start + batch).min(n))
            .into_par_iter()
            .map(|i| simulate_frame(scene, noise, i).noisy)
            .collect();
        for f in &frames {
            integrate_frame(&mut map, &mut codebook, f, associator)?;
        }
    }
    Ok((map, codebook))
}

/// Number of trajectory frames in which each object covers at least
/// `min_pixels` pixels, indexed by instance.
pub fn visibility_audit(scene: &SyntheticScene, min_pixels: usize) -> Vec<usize> {
    let per_frame: Vec<Vec<usize>> = scene
        .trajectory
        .par_iter()
        .map(|pose| {
            let (_, gt) = render_gt_frame(scene, pose, 0);
            let mut counts = vec![0usize; scene.objects.len()];
            for &l in &gt.labels {
                if l != BACKGROUND {
                    counts[l as usize] += 1;
                }
            }
            counts
        })
        .collect();
    (0..scene.objects.len())
        .map(|i| per_frame.iter().filter(|c| c[i] >= min_pixels).count())
        .collect()
}
