//! Per-frame instance association.
//!
//! Each mask is projected to its voxel region and scored independently
//! against the map as it stood before the frame. The score for instance `γ`
//! fuses the mean voxel probability of `γ` over the region with the cosine
//! similarity between the mask feature and the codebook embedding of `γ`.

use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::Codebook;
use crate::frame_store::{FrameBundle, PixelMask};
use crate::geometry::{voxelize, VoxelKey};
use crate::voxel_map::{InstanceId, VoxelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateScope {
    /// Only instances holding mass inside the mask's voxel region.
    VoxelLocal,
    /// Every live instance in the map.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig {
    pub geo_weight: f64,
    pub fea_weight: f64,
    pub similarity_threshold: f64,
    pub observed_fraction_floor: f64,
    pub candidate_scope: CandidateScope,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            geo_weight: 0.5,
            fea_weight: 0.5,
            similarity_threshold: 0.4,
            observed_fraction_floor: 0.05,
            candidate_scope: CandidateScope::VoxelLocal,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.geo_weight >= 0.0 && self.fea_weight >= 0.0) {
            return bad("fusion weights must be non-negative".into());
        }
        if ((self.geo_weight + self.fea_weight) - 1.0).abs() > 1e-9 {
            return bad(format!(
                "fusion weights must sum to 1 (got {} + {})",
                self.geo_weight, self.fea_weight
            ));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold < 1.0) {
            return bad(format!(
                "similarity threshold {} outside (0, 1)",
                self.similarity_threshold
            ));
        }
        if !(0.0..1.0).contains(&self.observed_fraction_floor) {
            return bad(format!(
                "observed fraction floor {} outside [0, 1)",
                self.observed_fraction_floor
            ));
        }
        Ok(())
    }
}

/// Which association rule drives `integrate_frame`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Associator {
    Probabilistic(AssociationConfig),
    /// Hard voxel-IoU matching against argmax extents, no feature term.
    IouBaseline { iou_threshold: f64 },
}

impl Default for Associator {
    fn default() -> Self {
        Associator::Probabilistic(AssociationConfig::default())
    }
}

impl Associator {
    pub fn associate(
        &self,
        frame: &FrameBundle,
        map: &VoxelMap,
        codebook: &Codebook,
    ) -> Result<AssociationResult> {
        match self {
            Associator::Probabilistic(cfg) => associate_frame(frame, map, codebook, cfg),
            Associator::IouBaseline { iou_threshold } => {
                baseline_associate_iou(frame, map, *iou_threshold)
            }
        }
    }
}

/// Association outcome for one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAssociation {
    pub mask_index: usize,
    /// Assigned instance; for new instances, the id that will be minted.
    pub instance: InstanceId,
    pub is_new: bool,
    /// Fused association score `A` of the best candidate (0 when none).
    pub probability: f64,
    pub s_geo: f64,
    pub s_fea: f64,
    /// Best-scoring existing candidate, if any was scored.
    pub best_candidate: Option<InstanceId>,
    /// Visibility ratio against the pre-frame extent of `instance`.
    pub visibility: f64,
    pub voxels: Vec<VoxelKey>,
}

impl MaskAssociation {
    /// Credibility of the mask feature for the codebook update.
    pub fn credibility(&self) -> f64 {
        if self.is_new {
            1.0
        } else {
            self.probability * self.visibility
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssociationResult {
    pub frame_id: u64,
    /// Masks in processing order (descending detection score).
    pub masks: Vec<MaskAssociation>,
    /// Masks whose pixels all lacked valid depth.
    pub skipped: Vec<usize>,
}

impl AssociationResult {
    pub fn new_instances(&self) -> usize {
        self.masks.iter().filter(|m| m.is_new).count()
    }

    /// One JSON object per mask, in processing order.
    pub fn log_records(&self) -> Vec<AssociationLogRecord> {
        self.masks
            .iter()
            .map(|m| AssociationLogRecord {
                frame_id: self.frame_id,
                mask_index: m.mask_index,
                instance: m.instance,
                probability: m.probability,
                s_geo: m.s_geo,
                s_fea: m.s_fea,
                is_new: m.is_new,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationLogRecord {
    pub frame_id: u64,
    pub mask_index: usize,
    pub instance: InstanceId,
    pub probability: f64,
    pub s_geo: f64,
    pub s_fea: f64,
    pub is_new: bool,
}

/// Deduplicated voxels hit by the mask's pixels with valid depth.
pub fn project_mask(mask: &PixelMask, frame: &FrameBundle, resolution: f64) -> Vec<VoxelKey> {
    project_pixels(mask.pixels(), frame, resolution)
}

fn project_pixels(
    pixels: impl Iterator<Item = u32>,
    frame: &FrameBundle,
    resolution: f64,
) -> Vec<VoxelKey> {
    let intr = &frame.intrinsics;
    let pose = &frame.pose;
    let width = intr.width;
    let mut set: FxHashSet<VoxelKey> = FxHashSet::default();
    for p in pixels {
        let Some(d) = frame.depth.meters_at(p as usize) else {
            continue;
        };
        let ray = intr.ray(p % width, p / width);
        let world = pose.transform_point([ray[0] * d, ray[1] * d, d]);
        set.insert(voxelize(world, resolution));
    }
    set.into_iter().collect()
}

/// Voxel regions of every mask; shared pixels go to the last-listed mask
/// when the frame permits overlap.
pub fn project_frame_masks(frame: &FrameBundle, resolution: f64) -> Vec<Vec<VoxelKey>> {
    if frame.allow_overlap && frame.masks.len() > 1 {
        let mut owner = vec![u32::MAX; frame.intrinsics.pixel_count()];
        for (i, m) in frame.masks.iter().enumerate() {
            for p in m.mask.pixels() {
                owner[p as usize] = i as u32;
            }
        }
        frame
            .masks
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let own = m.mask.pixels().filter(|&p| owner[p as usize] == i as u32);
                project_pixels(own, frame, resolution)
            })
            .collect()
    } else {
        frame
            .masks
            .par_iter()
            .map(|m| project_mask(&m.mask, frame, resolution))
            .collect()
    }
}

/// Mean of `θ[γ]` over every voxel of the region; unobserved voxels count as 0.
pub fn geometric_similarity(voxels: &[VoxelKey], map: &VoxelMap, id: InstanceId) -> f64 {
    if voxels.is_empty() {
        return 0.0;
    }
    let sum: f64 = voxels
        .iter()
        .filter_map(|k| map.get(k))
        .map(|s| s.theta(id))
        .sum();
    sum / voxels.len() as f64
}

/// Cosine similarity clamped to `[0, 1]`.
pub fn feature_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine(a, b)?.clamp(0.0, 1.0))
}

/// Raw cosine similarity.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

/// `|V_m| / extent(γ)` clamped to 1; brand-new or zero-extent instances give 1.
pub fn visibility_ratio(region_len: usize, map: &VoxelMap, id: InstanceId) -> f64 {
    if !map.contains_instance(id) {
        return 1.0;
    }
    let extent = map.extent(id);
    if extent == 0 {
        return 1.0;
    }
    (region_len as f64 / extent as f64).min(1.0)
}

/// Mask indices sorted by descending detection score, stable on index.
fn processing_order(frame: &FrameBundle) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frame.masks.len()).collect();
    order.sort_by(|&a, &b| {
        frame.masks[b]
            .detection_score
            .total_cmp(&frame.masks[a].detection_score)
    });
    order
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    id: InstanceId,
    a: f64,
    s_geo: f64,
    s_fea: f64,
}

/// Outcome of scoring one mask against the pre-frame map.
#[derive(Debug)]
enum Decision {
    Skip,
    New {
        best: Option<Scored>,
        voxels: Vec<VoxelKey>,
    },
    Existing {
        best: Scored,
        voxels: Vec<VoxelKey>,
    },
}

/// Scores each mask against the map and codebook and decides its instance.
pub fn associate_frame(
    frame: &FrameBundle,
    map: &VoxelMap,
    codebook: &Codebook,
    cfg: &AssociationConfig,
) -> Result<AssociationResult> {
    cfg.validate()?;
    for m in &frame.masks {
        if m.feature.len() != codebook.dim() {
            return Err(Error::DimensionMismatch {
                expected: codebook.dim(),
                found: m.feature.len(),
            });
        }
    }
    let regions = project_frame_masks(frame, map.resolution());
    let decisions: Vec<Decision> = regions
        .into_par_iter()
        .zip(frame.masks.par_iter())
        .map(|(voxels, mask)| {
            let obs: Vec<f64> = mask.feature.iter().map(|&v| v as f64).collect();
            score_mask(voxels, &obs, map, codebook, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(commit(frame, map, decisions))
}

fn score_mask(
    voxels: Vec<VoxelKey>,
    obs: &[f64],
    map: &VoxelMap,
    codebook: &Codebook,
    cfg: &AssociationConfig,
) -> Result<Decision> {
    if voxels.is_empty() {
        return Ok(Decision::Skip);
    }
    let mut mass: FxHashMap<InstanceId, f64> = FxHashMap::default();
    let mut observed = 0usize;
    for key in &voxels {
        if let Some(cell) = map.get(key) {
            observed += 1;
            let total = cell.total() as f64;
            for &(id, c) in cell.counts() {
                *mass.entry(id).or_insert(0.0) += c as f64 / total;
            }
        }
    }
    if (observed as f64) < cfg.observed_fraction_floor * voxels.len() as f64 {
        return Ok(Decision::New { best: None, voxels });
    }

    let mut candidates: Vec<InstanceId> = match cfg.candidate_scope {
        CandidateScope::VoxelLocal => mass.keys().copied().collect(),
        CandidateScope::Global => map.instance_ids().collect(),
    };
    candidates.sort_unstable();

    let n = voxels.len() as f64;
    let mut best: Option<Scored> = None;
    for id in candidates {
        let s_geo = mass.get(&id).map_or(0.0, |m| m / n);
        let s_fea = match codebook.get(id) {
            Some(rec) => feature_similarity(&rec.embedding, obs)?,
            None => 0.0,
        };
        let a = cfg.geo_weight * s_geo + cfg.fea_weight * s_fea;
        if best.is_none_or(|b| a > b.a) {
            best = Some(Scored { id, a, s_geo, s_fea });
        }
    }
    Ok(match best {
        Some(b) if b.a >= cfg.similarity_threshold => Decision::Existing { best: b, voxels },
        best => Decision::New { best, voxels },
    })
}

/// Serial pass: mints provisional ids for new instances in processing order.
fn commit(frame: &FrameBundle, map: &VoxelMap, decisions: Vec<Decision>) -> AssociationResult {
    let mut decisions: Vec<Option<Decision>> = decisions.into_iter().map(Some).collect();
    let mut next_id = map.next_instance_id();
    let mut result = AssociationResult {
        frame_id: frame.frame_id,
        ..Default::default()
    };
    for i in processing_order(frame) {
        match decisions[i].take().expect("each mask decided once") {
            Decision::Skip => result.skipped.push(i),
            Decision::New { best, voxels } => {
                let id = next_id;
                next_id += 1;
                result.masks.push(MaskAssociation {
                    mask_index: i,
                    instance: id,
                    is_new: true,
                    probability: best.map_or(0.0, |b| b.a),
                    s_geo: best.map_or(0.0, |b| b.s_geo),
                    s_fea: best.map_or(0.0, |b| b.s_fea),
                    best_candidate: best.map(|b| b.id),
                    visibility: 1.0,
                    voxels,
                });
            }
            Decision::Existing { best, voxels } => {
                result.masks.push(MaskAssociation {
                    mask_index: i,
                    instance: best.id,
                    is_new: false,
                    probability: best.a,
                    s_geo: best.s_geo,
                    s_fea: best.s_fea,
                    best_candidate: Some(best.id),
                    visibility: visibility_ratio(voxels.len(), map, best.id),
                    voxels,
                });
            }
        }
    }
    result
}

/// Voxel-IoU association against each instance's argmax voxels.
pub fn baseline_associate_iou(
    frame: &FrameBundle,
    map: &VoxelMap,
    iou_threshold: f64,
) -> Result<AssociationResult> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::Config(format!("IoU threshold {iou_threshold} outside [0, 1]")));
    }
    let regions = project_frame_masks(frame, map.resolution());
    let decisions: Vec<Decision> = regions
        .into_par_iter()
        .map(|voxels| {
            if voxels.is_empty() {
                return Decision::Skip;
            }
            let mut overlap: FxHashMap<InstanceId, u64> = FxHashMap::default();
            for key in &voxels {
                if let Some((id, _)) = map.get(key).and_then(|c| c.argmax()) {
                    *overlap.entry(id).or_insert(0) += 1;
                }
            }
            let mut ids: Vec<_> = overlap.into_iter().collect();
            ids.sort_unstable();
            let mut best: Option<Scored> = None;
            for (id, inter) in ids {
                let union = voxels.len() as u64 + map.extent(id) - inter;
                let iou = inter as f64 / union as f64;
                if best.is_none_or(|b| iou > b.a) {
                    best = Some(Scored {
                        id,
                        a: iou,
                        s_geo: iou,
                        s_fea: 0.0,
                    });
                }
            }
            match best {
                Some(b) if b.a >= iou_threshold => Decision::Existing { best: b, voxels },
                best => Decision::New { best, voxels },
            }
        })
        .collect();
    Ok(commit(frame, map, decisions))
}
