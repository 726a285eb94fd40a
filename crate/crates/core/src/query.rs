//! Read-side services: rendered masks, retrieval, semantic labels, export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::association::cosine;
use crate::error::{Error, Result};
use crate::evolution::Codebook;
use crate::frame_store::{ByteReader, DepthImage};
use crate::geometry::{voxelize, CameraIntrinsics, Pose, VoxelKey};
use crate::voxel_map::{InstanceId, VoxelMap};

/// Label of pixels with invalid depth or an unobserved voxel.
pub const BACKGROUND: InstanceId = InstanceId::MAX;

const RENDER_MAGIC: &[u8; 4] = b"VXRM";
const VOXELS_MAGIC: &[u8; 4] = b"VXLV";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedMask {
    pub width: u32,
    pub height: u32,
    /// Row-major argmax instance per pixel, `BACKGROUND` where unknown.
    pub labels: Vec<InstanceId>,
    /// Row-major max-θ per pixel, 0 on background.
    pub confidence: Vec<f32>,
}

impl RenderedMask {
    pub fn label(&self, u: u32, v: u32) -> InstanceId {
        self.labels[(v * self.width + u) as usize]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.labels.len() * 8);
        out.extend_from_slice(RENDER_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for c in &self.confidence {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(buf, path);
        r.magic(RENDER_MAGIC)?;
        let width = r.u32("width")?;
        let height = r.u32("height")?;
        if r.u32("version")? != FORMAT_VERSION {
            return Err(Error::schema(path, "version", "unsupported"));
        }
        let n = width as usize * height as usize;
        let labels = (0..n).map(|_| r.u32("labels")).collect::<Result<_>>()?;
        let confidence = (0..n).map(|_| r.f32("confidence")).collect::<Result<_>>()?;
        r.finish()?;
        Ok(Self {
            width,
            height,
            labels,
            confidence,
        })
    }
}

/// Re-projects the map's argmax labels into a view by looking up the voxel
/// under each valid depth pixel.
pub fn render_mask(
    map: &VoxelMap,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    depth: &DepthImage,
) -> RenderedMask {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let n = w as usize * h as usize;
    let mut labels = vec![BACKGROUND; n];
    let mut confidence = vec![0.0f32; n];
    if (depth.width(), depth.height()) == (w, h) {
        for idx in 0..n {
            let Some(d) = depth.meters_at(idx) else {
                continue;
            };
            let ray = intrinsics.ray(idx as u32 % w, idx as u32 / w);
            let p = pose.transform_point([ray[0] * d, ray[1] * d, d]);
            if let Some(cell) = map.get(&voxelize(p, map.resolution())) {
                if let Some((id, c)) = cell.argmax() {
                    labels[idx] = id;
                    confidence[idx] = (c as f64 / cell.total() as f64) as f32;
                }
            }
        }
    }
    RenderedMask {
        width: w,
        height: h,
        labels,
        confidence,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub instance: InstanceId,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Top-`k` instances by raw cosine similarity, ties to the smaller id.
pub fn retrieve(codebook: &Codebook, query: &[f64], k: usize) -> Result<Vec<RetrievalHit>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if query.len() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: query.len(),
        });
    }
    if query.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroNorm);
    }
    let mut scored: Vec<(InstanceId, f64)> = codebook
        .records()
        .map(|r| {
            let s = match cosine(&r.embedding, query) {
                Ok(s) => s,
                Err(Error::ZeroNorm) => 0.0,
                Err(e) => return Err(e),
            };
            Ok((r.id, s))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (instance, score))| RetrievalHit {
            instance,
            score,
            rank: i + 1,
        })
        .collect())
}

/// Codebook restricted to instances that own at least one argmax voxel.
/// Records of instances that lost every voxel have no 3D mask to return.
pub fn live_codebook(map: &VoxelMap, codebook: &Codebook) -> Codebook {
    codebook.filtered(|r| map.extent(r.id) > 0)
}

/// Nearest class embedding (by cosine) for every instance.
pub fn semantic_labels(
    codebook: &Codebook,
    classes: &[(u32, Vec<f64>)],
) -> Result<BTreeMap<InstanceId, u32>> {
    if classes.is_empty() {
        return Err(Error::Config("class table is empty".into()));
    }
    for (_, e) in classes {
        if e.len() != codebook.dim() {
            return Err(Error::DimensionMismatch {
                expected: codebook.dim(),
                found: e.len(),
            });
        }
    }
    let mut sorted: Vec<&(u32, Vec<f64>)> = classes.iter().collect();
    sorted.sort_by_key(|(c, _)| *c);
    let mut out = BTreeMap::new();
    for rec in codebook.records() {
        let mut best: Option<(u32, f64)> = None;
        for (class, emb) in &sorted {
            let s = match cosine(&rec.embedding, emb) {
                Ok(s) => s,
                Err(Error::ZeroNorm) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((*class, s));
            }
        }
        out.insert(rec.id, best.expect("non-empty class table").0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    /// ASCII PLY of voxel centers colored by instance.
    Pointlist,
    /// Binary dump of per-voxel label, confidence and top-3 θ.
    LabeledVoxels,
}

pub const PLY_FILE: &str = "map.ply";
pub const VOXELS_FILE: &str = "voxels.bin";
pub const CODEBOOK_FILE: &str = "codebook.json";

/// Deterministic display color for an instance id.
pub fn instance_color(id: InstanceId) -> [u8; 3] {
    // splitmix64 finalizer
    let mut z = (id as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    [(z >> 16) as u8, (z >> 24) as u8, (z >> 32) as u8]
}

pub fn ply_string(map: &VoxelMap) -> String {
    let cells = map.sorted_cells();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cells.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property float {p}");
    }
    for p in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {p}");
    }
    s.push_str("property float confidence\nend_header\n");
    for (key, cell) in cells {
        let c = key.center(map.resolution());
        let (id, _) = cell.argmax().expect("stored cells are non-empty");
        let [r, g, b] = instance_color(id);
        let conf = cell.max_theta().unwrap_or(0.0) as f32;
        let _ = writeln!(
            s,
            "{} {} {} {r} {g} {b} {conf}",
            c[0] as f32, c[1] as f32, c[2] as f32
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVoxel {
    pub key: VoxelKey,
    pub label: InstanceId,
    pub confidence: f32,
    /// Up to three `(instance, θ)` entries, descending θ then ascending id.
    pub top: Vec<(InstanceId, f32)>,
}

pub fn labeled_voxels(map: &VoxelMap) -> Vec<LabeledVoxel> {
    map.sorted_cells()
        .into_iter()
        .map(|(key, cell)| {
            let total = cell.total() as f64;
            let mut entries: Vec<(InstanceId, u32)> = cell.counts().to_vec();
            entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let top = entries
                .iter()
                .take(3)
                .map(|&(id, c)| (id, (c as f64 / total) as f32))
                .collect::<Vec<_>>();
            LabeledVoxel {
                key,
                label: top[0].0,
                confidence: top[0].1,
                top,
            }
        })
        .collect()
}

pub fn encode_labeled_voxels(resolution: f64, voxels: &[LabeledVoxel]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + voxels.len() * 45);
    out.extend_from_slice(VOXELS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&resolution.to_le_bytes());
    out.extend_from_slice(&(voxels.len() as u64).to_le_bytes());
    for v in voxels {
        for c in [v.key.ix, v.key.iy, v.key.iz] {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&v.label.to_le_bytes());
        out.extend_from_slice(&v.confidence.to_le_bytes());
        out.push(v.top.len() as u8);
        for i in 0..3 {
            let (id, t) = v.top.get(i).copied().unwrap_or((BACKGROUND, 0.0));
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    out
}

pub fn decode_labeled_voxels(buf: &[u8], path: &Path) -> Result<(f64, Vec<LabeledVoxel>)> {
    let mut r = ByteReader::new(buf, path);
    r.magic(VOXELS_MAGIC)?;
    if r.u32("version")? != FORMAT_VERSION {
        return Err(Error::schema(path, "version", "unsupported"));
    }
    let resolution = r.f64("resolution")?;
    let n = r.u64("count")?;
    let mut out = Vec::new();
    for _ in 0..n {
        let key = VoxelKey::new(r.i32("key")?, r.i32("key")?, r.i32("key")?);
        let label = r.u32("label")?;
        let confidence = r.f32("confidence")?;
        let n_top = r.u8("top_count")? as usize;
        if n_top == 0 || n_top > 3 {
            return Err(Error::schema(path, "top_count", format!("{n_top} not in 1..=3")));
        }
        let mut top = Vec::with_capacity(n_top);
        for i in 0..3 {
            let id = r.u32("top")?;
            let t = r.f32("top")?;
            if i < n_top {
                top.push((id, t));
            }
        }
        out.push(LabeledVoxel {
            key,
            label,
            confidence,
            top,
        });
    }
    r.finish()?;
    Ok((resolution, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookEntryJson {
    pub id: InstanceId,
    pub weight: f64,
    pub embedding: Vec<f64>,
    pub caption: Option<String>,
    pub caption_weight: f64,
    pub extent: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookJson {
    pub version: u32,
    pub dim: usize,
    pub instances: Vec<CodebookEntryJson>,
}

pub fn codebook_json(map: &VoxelMap, codebook: &Codebook) -> CodebookJson {
    CodebookJson {
        version: FORMAT_VERSION,
        dim: codebook.dim(),
        instances: codebook
            .records()
            .map(|r| CodebookEntryJson {
                id: r.id,
                weight: r.weight,
                embedding: r.embedding.clone(),
                caption: r.caption.clone(),
                caption_weight: r.caption_weight,
                extent: map.extent(r.id),
            })
            .collect(),
    }
}

/// Writes the map in `format` plus `codebook.json` into `dir`.
pub fn export_map(
    map: &VoxelMap,
    codebook: &Codebook,
    dir: impl AsRef<Path>,
    format: ExportFormat,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        ExportFormat::Pointlist => {
            let p = dir.join(PLY_FILE);
            fs::write(&p, ply_string(map)).map_err(|e| Error::io(&p, e))?;
        }
        ExportFormat::LabeledVoxels => {
            let p = dir.join(VOXELS_FILE);
            let bytes = encode_labeled_voxels(map.resolution(), &labeled_voxels(map));
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
    }
    let p = dir.join(CODEBOOK_FILE);
    let text = serde_json::to_string_pretty(&codebook_json(map, codebook))
        .map_err(|e| Error::Inconsistent(e.to_string()))?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}
