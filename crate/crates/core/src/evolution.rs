//! Live map evolution: the counting update on voxels and the
//! credibility-weighted fusion of instance embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::association::{AssociationResult, Associator};
use crate::error::{Error, Result};
use crate::frame_store::FrameBundle;
use crate::voxel_map::{InstanceId, VoxelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookRecord {
    pub id: InstanceId,
    /// Weighted running mean of observed features (not renormalized).
    pub embedding: Vec<f64>,
    pub weight: f64,
    pub caption: Option<String>,
    /// Credibility of the observation that supplied `caption`.
    pub caption_weight: f64,
}

/// Instance id → fused embedding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Codebook {
    dim: usize,
    records: BTreeMap<InstanceId, CodebookRecord>,
}

impl Codebook {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: InstanceId) -> Option<&CodebookRecord> {
        self.records.get(&id)
    }

    pub fn contains(&self, id: InstanceId) -> bool {
        self.records.contains_key(&id)
    }

    /// Records in ascending id order.
    pub fn records(&self) -> impl Iterator<Item = &CodebookRecord> {
        self.records.values()
    }

    /// Copy holding only the records accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&CodebookRecord) -> bool) -> Codebook {
        Codebook {
            dim: self.dim,
            records: self
                .records
                .iter()
                .filter(|(_, r)| keep(r))
                .map(|(id, r)| (*id, r.clone()))
                .collect(),
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: len,
            });
        }
        Ok(())
    }

    /// Starts a record from its first observation with unit weight.
    pub fn insert_new(
        &mut self,
        id: InstanceId,
        embedding: Vec<f64>,
        caption: Option<String>,
    ) -> Result<()> {
        self.check_dim(embedding.len())?;
        if self.records.contains_key(&id) {
            return Err(Error::Inconsistent(format!("instance {id} already in codebook")));
        }
        self.records.insert(
            id,
            CodebookRecord {
                id,
                embedding,
                weight: 1.0,
                caption,
                caption_weight: 1.0,
            },
        );
        Ok(())
    }

    pub fn insert_record(&mut self, record: CodebookRecord) -> Result<()> {
        self.check_dim(record.embedding.len())?;
        if !(record.weight.is_finite() && record.weight > 0.0) {
            return Err(Error::Inconsistent(format!(
                "instance {} has non-positive weight",
                record.id
            )));
        }
        if self.records.insert(record.id, record).is_some() {
            return Err(Error::Inconsistent("duplicate codebook id".into()));
        }
        Ok(())
    }

    /// `f ← (W f + w f_obs) / (W + w)`, `W ← W + w`. A zero weight leaves
    /// the record untouched.
    pub fn fuse(
        &mut self,
        id: InstanceId,
        weight: f64,
        observation: &[f64],
        caption: Option<&str>,
    ) -> Result<()> {
        self.check_dim(observation.len())?;
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::Inconsistent(format!("fusion weight {weight}")));
        }
        let rec = self
            .records
            .get_mut(&id)
            .ok_or(Error::UnknownInstance(id))?;
        if weight == 0.0 {
            return Ok(());
        }
        let total = rec.weight + weight;
        for (f, o) in rec.embedding.iter_mut().zip(observation) {
            *f = (rec.weight * *f + weight * o) / total;
        }
        rec.weight = total;
        if let Some(c) = caption {
            if weight > rec.caption_weight || rec.caption.is_none() {
                rec.caption = Some(c.to_owned());
                rec.caption_weight = weight;
            }
        }
        Ok(())
    }

    /// Folds `src` into `dst` by weight and removes `src`.
    pub(crate) fn fuse_records(&mut self, src: InstanceId, dst: InstanceId) -> Result<()> {
        let s = self.records.remove(&src).ok_or(Error::UnknownInstance(src))?;
        let d = match self.records.get_mut(&dst) {
            Some(d) => d,
            None => {
                self.records.insert(src, s);
                return Err(Error::UnknownInstance(dst));
            }
        };
        let total = d.weight + s.weight;
        for (f, o) in d.embedding.iter_mut().zip(&s.embedding) {
            *f = (d.weight * *f + s.weight * o) / total;
        }
        d.weight = total;
        if s.caption.is_some() && (d.caption.is_none() || s.caption_weight > d.caption_weight) {
            d.caption = s.caption;
            d.caption_weight = s.caption_weight;
        }
        Ok(())
    }
}

/// Applies one count per (voxel, assigned instance) and mints the new ids
/// the association pass reserved.
pub fn update_voxels(map: &mut VoxelMap, result: &AssociationResult) -> Result<()> {
    for m in &result.masks {
        if m.is_new {
            let id = map.mint_instance();
            if id != m.instance {
                return Err(Error::Inconsistent(format!(
                    "association reserved id {} but map minted {id}",
                    m.instance
                )));
            }
        }
    }
    for m in &result.masks {
        for key in &m.voxels {
            map.increment(*key, m.instance)?;
        }
    }
    Ok(())
}

/// Fuses each mask's feature into its instance's record with credibility
/// `A · R` (1 for new instances).
pub fn update_codebook(
    codebook: &mut Codebook,
    result: &AssociationResult,
    frame: &FrameBundle,
) -> Result<()> {
    for m in &result.masks {
        let obs = &frame.masks[m.mask_index];
        let feature: Vec<f64> = obs.feature.iter().map(|&v| v as f64).collect();
        if m.is_new {
            codebook.insert_new(m.instance, feature, obs.caption.clone())?;
        } else {
            codebook.fuse(m.instance, m.credibility(), &feature, obs.caption.as_deref())?;
        }
    }
    Ok(())
}

/// Per-frame summary for the progress stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_id: u64,
    pub masks_total: usize,
    pub masks_processed: usize,
    pub masks_skipped: usize,
    pub new_instances: usize,
    pub associated: usize,
    /// Number of voxel increments applied this frame.
    pub voxel_updates: u64,
    pub total_count: u64,
    pub occupied_voxels: usize,
    pub instances: usize,
}

/// Associates, updates voxels, then updates the codebook. Frame validation
/// happens first, so a rejected frame leaves both structures untouched.
pub fn integrate_frame(
    map: &mut VoxelMap,
    codebook: &mut Codebook,
    frame: &FrameBundle,
    associator: &Associator,
) -> Result<(FrameReport, AssociationResult)> {
    frame.validate(Some(codebook.dim()))?;
    let result = associator.associate(frame, map, codebook)?;
    update_voxels(map, &result)?;
    update_codebook(codebook, &result, frame)?;
    let report = FrameReport {
        frame_id: frame.frame_id,
        masks_total: frame.masks.len(),
        masks_processed: result.masks.len(),
        masks_skipped: result.skipped.len(),
        new_instances: result.new_instances(),
        associated: result.masks.len() - result.new_instances(),
        voxel_updates: result.masks.iter().map(|m| m.voxels.len() as u64).sum(),
        total_count: map.total_count(),
        occupied_voxels: map.len(),
        instances: codebook.len(),
    };
    Ok((report, result))
}
