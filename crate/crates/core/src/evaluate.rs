//! Instance AP (AP / AP50 / AP25), semantic mIoU / mAcc and retrieval
//! recall@k over voxelized maps.
//!
//! AP follows the usual 3D instance benchmark convention: predictions are
//! ranked by confidence and greedily matched one-to-one to the unmatched
//! ground-truth instance of highest IoU; precision is interpolated at 101
//! recall points; AP averages the IoU thresholds 0.50:0.05:0.95.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::Codebook;
use crate::geometry::{back_project, voxelize, VoxelKey};
use crate::query::{live_codebook, retrieve, semantic_labels, BACKGROUND};
use crate::simulate::{render_gt_frame, SyntheticScene};
use crate::voxel_map::{InstanceId, KeyMap, VoxelMap};

pub type VoxelSet = FxHashSet<VoxelKey>;

/// Per-voxel ground-truth instance and class.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    pub resolution: f64,
    pub labels: KeyMap<(u32, u32)>,
}

impl GroundTruthMap {
    pub fn new(resolution: f64, labels: KeyMap<(u32, u32)>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyGroundTruth);
        }
        Ok(Self { resolution, labels })
    }

    /// Voxels whose center lies inside an object (solid occupancy).
    pub fn from_occupancy(scene: &SyntheticScene, resolution: f64) -> Result<Self> {
        let mut labels = KeyMap::default();
        for o in &scene.objects {
            let (lo, hi) = o.shape.bounds();
            let a = voxelize(lo, resolution);
            let b = voxelize(hi, resolution);
            for ix in a.ix..=b.ix {
                for iy in a.iy..=b.iy {
                    for iz in a.iz..=b.iz {
                        let key = VoxelKey::new(ix, iy, iz);
                        if o.shape.contains(key.center(resolution)) {
                            labels.insert(key, (o.instance, o.class));
                        }
                    }
                }
            }
        }
        Self::new(resolution, labels)
    }

    /// Voxels of the object surfaces visible along the scene trajectory,
    /// obtained by back-projecting clean ground-truth renders. Voxels hit by
    /// several objects take the majority label (ties to the smaller id).
    pub fn from_rendered_surfaces(scene: &SyntheticScene, resolution: f64) -> Result<Self> {
        let votes: Vec<FxHashMap<(VoxelKey, u32), u32>> = scene
            .trajectory
            .par_iter()
            .map(|pose| {
                let (frame, gt) = render_gt_frame(scene, pose, 0);
                let w = frame.intrinsics.width;
                let mut votes: FxHashMap<(VoxelKey, u32), u32> = FxHashMap::default();
                for (idx, &label) in gt.labels.iter().enumerate() {
                    if label == BACKGROUND {
                        continue;
                    }
                    let Some(d) = frame.depth.meters_at(idx) else {
                        continue;
                    };
                    let pixel = (idx as u32 % w, idx as u32 / w);
                    if let Ok(p) = back_project(pixel, d, &frame.intrinsics, pose) {
                        *votes.entry((voxelize(p, resolution), label)).or_insert(0) += 1;
                    }
                }
                votes
            })
            .collect();
        let mut tally: FxHashMap<VoxelKey, BTreeMap<u32, u64>> = FxHashMap::default();
        for frame_votes in votes {
            for ((key, label), n) in frame_votes {
                *tally.entry(key).or_default().entry(label).or_insert(0) += n as u64;
            }
        }
        let labels = tally
            .into_iter()
            .map(|(key, counts)| {
                let mut best = (0u32, 0u64);
                for (label, n) in counts {
                    if n > best.1 {
                        best = (label, n);
                    }
                }
                let class = scene.class_of(best.0).unwrap_or(best.0);
                (key, (best.0, class))
            })
            .collect();
        Self::new(resolution, labels)
    }

    pub fn instances(&self) -> BTreeMap<u32, VoxelSet> {
        let mut out: BTreeMap<u32, VoxelSet> = BTreeMap::new();
        for (key, (inst, _)) in &self.labels {
            out.entry(*inst).or_default().insert(*key);
        }
        out
    }

    pub fn class_of_instance(&self) -> BTreeMap<u32, u32> {
        self.labels.values().map(|&(i, c)| (i, c)).collect()
    }
}

pub fn voxel_iou(a: &VoxelSet, b: &VoxelSet) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|k| large.contains(k)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub id: InstanceId,
    pub voxels: VoxelSet,
    pub confidence: f64,
}

/// Argmax voxel sets of every instance with at least `min_voxels` voxels;
/// confidence is the mean max-θ over those voxels.
pub fn predicted_instances(map: &VoxelMap, min_voxels: usize) -> Vec<PredictedInstance> {
    let mut acc: BTreeMap<InstanceId, (VoxelSet, f64)> = BTreeMap::new();
    for (key, cell) in map.cells() {
        if let Some((id, c)) = cell.argmax() {
            let e = acc.entry(id).or_default();
            e.0.insert(*key);
            e.1 += c as f64 / cell.total() as f64;
        }
    }
    acc.into_iter()
        .filter(|(_, (v, _))| v.len() >= min_voxels.max(1))
        .map(|(id, (voxels, sum))| PredictedInstance {
            id,
            confidence: sum / voxels.len() as f64,
            voxels,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApScores {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
}

/// Intersections of each prediction with each GT instance it touches.
fn overlap_table(preds: &[PredictedInstance], gt: &GroundTruthMap) -> Vec<BTreeMap<u32, usize>> {
    preds
        .iter()
        .map(|p| {
            let mut m = BTreeMap::new();
            for k in &p.voxels {
                if let Some(&(inst, _)) = gt.labels.get(k) {
                    *m.entry(inst).or_insert(0) += 1;
                }
            }
            m
        })
        .collect()
}

/// 101-point interpolated average precision for one IoU threshold.
pub fn average_precision_at(
    preds: &[PredictedInstance],
    gt: &GroundTruthMap,
    threshold: f64,
) -> Result<f64> {
    let gt_sizes: BTreeMap<u32, usize> = gt.instances().into_iter().map(|(i, v)| (i, v.len())).collect();
    if gt_sizes.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let overlaps = overlap_table(preds, gt);
    Ok(ap_from_overlaps(preds, &overlaps, &gt_sizes, threshold))
}

fn ap_from_overlaps(
    preds: &[PredictedInstance],
    overlaps: &[BTreeMap<u32, usize>],
    gt_sizes: &BTreeMap<u32, usize>,
    threshold: f64,
) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(preds[a].id.cmp(&preds[b].id))
    });
    let mut matched: BTreeSet<u32> = BTreeSet::new();
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        let p_len = preds[i].voxels.len();
        let mut best: Option<(u32, f64)> = None;
        for (&g, &inter) in &overlaps[i] {
            if matched.contains(&g) {
                continue;
            }
            let iou = inter as f64 / (p_len + gt_sizes[&g] - inter) as f64;
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched.insert(g);
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / gt_sizes.len() as f64;
        points.push((recall, precision));
    }
    interpolated_ap(&points)
}

/// Mean over recall levels 0, 0.01, …, 1 of the best precision achieved at
/// recall ≥ level.
pub fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0f64; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        // Recall is non-decreasing along the ranking.
        let idx = points.partition_point(|&(rec, _)| rec < level - 1e-12);
        if idx < points.len() {
            sum += envelope[idx];
        }
    }
    sum / 101.0
}

pub fn instance_ap(preds: &[PredictedInstance], gt: &GroundTruthMap) -> Result<ApScores> {
    let gt_sizes: BTreeMap<u32, usize> = gt.instances().into_iter().map(|(i, v)| (i, v.len())).collect();
    if gt_sizes.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let overlaps = overlap_table(preds, gt);
    let at = |t: f64| ap_from_overlaps(preds, &overlaps, &gt_sizes, t);
    let ap = (0..10).map(|i| at(0.5 + 0.05 * i as f64)).sum::<f64>() / 10.0;
    Ok(ApScores {
        ap,
        ap50: at(0.5),
        ap25: at(0.25),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticScores {
    pub miou: f64,
    pub macc: f64,
}

/// Per-class IoU and accuracy over voxels labeled in prediction or GT,
/// averaged over the classes present in GT.
pub fn semantic_scores(pred: &KeyMap<u32>, gt: &GroundTruthMap) -> SemanticScores {
    let mut tp: BTreeMap<u32, u64> = BTreeMap::new();
    let mut fp: BTreeMap<u32, u64> = BTreeMap::new();
    let mut gt_count: BTreeMap<u32, u64> = BTreeMap::new();
    for (key, &(_, class)) in &gt.labels {
        *gt_count.entry(class).or_insert(0) += 1;
        match pred.get(key) {
            Some(&p) if p == class => *tp.entry(class).or_insert(0) += 1,
            Some(&p) => *fp.entry(p).or_insert(0) += 1,
            None => {}
        }
    }
    for (key, &p) in pred {
        if !gt.labels.contains_key(key) {
            *fp.entry(p).or_insert(0) += 1;
        }
    }
    if gt_count.is_empty() {
        return SemanticScores { miou: 0.0, macc: 0.0 };
    }
    let (mut iou, mut acc) = (0.0, 0.0);
    for (&c, &n) in &gt_count {
        let t = tp.get(&c).copied().unwrap_or(0) as f64;
        let f = fp.get(&c).copied().unwrap_or(0) as f64;
        iou += t / (n as f64 + f);
        acc += t / n as f64;
    }
    let k = gt_count.len() as f64;
    SemanticScores {
        miou: iou / k,
        macc: acc / k,
    }
}

/// Fraction of queries whose target instance is within the top-`k` hits,
/// for each `k` in `ks`.
pub fn retrieval_recall(
    codebook: &Codebook,
    queries: &[(Vec<f64>, InstanceId)],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::Config("no retrieval queries".into()));
    }
    let kmax = ks.iter().copied().max().unwrap_or(1).max(1);
    let mut hits = vec![0usize; ks.len()];
    for (q, target) in queries {
        if !codebook.contains(*target) {
            return Err(Error::UnknownInstance(*target));
        }
        let ranked = retrieve(codebook, q, kmax)?;
        if let Some(pos) = ranked.iter().position(|h| h.instance == *target) {
            for (slot, &k) in hits.iter_mut().zip(ks) {
                if pos < k {
                    *slot += 1;
                }
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / queries.len() as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallScores {
    pub kind: String,
    pub at1: f64,
    pub at2: f64,
    pub at3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDiagnostic {
    pub gt_instance: u32,
    pub class: u32,
    pub gt_voxels: usize,
    pub best_prediction: Option<InstanceId>,
    pub best_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub miou: f64,
    pub macc: f64,
    pub recall: Vec<RecallScores>,
    pub predicted_instances: usize,
    pub gt_instances: usize,
    pub instances: Vec<InstanceDiagnostic>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "3D instance segmentation");
        let _ = writeln!(s, "  {:>8} {:>8} {:>8}", "AP", "AP50", "AP25");
        let _ = writeln!(
            s,
            "  {:>8.2} {:>8.2} {:>8.2}",
            100.0 * self.ap,
            100.0 * self.ap50,
            100.0 * self.ap25
        );
        let _ = writeln!(s, "3D semantic segmentation");
        let _ = writeln!(s, "  {:>8} {:>8}", "mIoU", "mAcc");
        let _ = writeln!(s, "  {:>8.2} {:>8.2}", 100.0 * self.miou, 100.0 * self.macc);
        let _ = writeln!(s, "Retrieval recall");
        let _ = writeln!(s, "  {:<10} {:>8} {:>8} {:>8}", "query", "top-1", "top-2", "top-3");
        for r in &self.recall {
            let _ = writeln!(
                s,
                "  {:<10} {:>8.2} {:>8.2} {:>8.2}",
                r.kind,
                100.0 * r.at1,
                100.0 * r.at2,
                100.0 * r.at3
            );
        }
        let _ = writeln!(
            s,
            "instances: {} predicted / {} ground truth",
            self.predicted_instances, self.gt_instances
        );
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Predicted instances smaller than this are ignored.
    pub min_instance_voxels: usize,
    /// Embedding noise of the perturbed retrieval queries.
    pub query_noise_sigma: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            min_instance_voxels: 1,
            query_noise_sigma: 0.2,
            seed: 0,
        }
    }
}

/// Full evaluation of a map against a simulated scene.
pub fn evaluate_map(
    map: &VoxelMap,
    codebook: &Codebook,
    scene: &SyntheticScene,
    gt: &GroundTruthMap,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if (map.resolution() - gt.resolution).abs() > 1e-12 {
        return Err(Error::ResolutionMismatch {
            map: map.resolution(),
            gt: gt.resolution,
        });
    }
    let preds = predicted_instances(map, opts.min_instance_voxels);
    let ap = instance_ap(&preds, gt)?;

    let instance_class = if codebook.is_empty() {
        BTreeMap::new()
    } else {
        semantic_labels(codebook, &scene.class_table())?
    };
    let pred_classes: KeyMap<u32> = map
        .cells()
        .filter_map(|(k, c)| {
            let (id, _) = c.argmax()?;
            instance_class.get(&id).map(|&cls| (*k, cls))
        })
        .collect();
    let sem = semantic_scores(&pred_classes, gt);

    // Match each GT object to its best-overlapping prediction.
    let gt_instances = gt.instances();
    let gt_class = gt.class_of_instance();
    let mut diagnostics = Vec::new();
    for (&g, voxels) in &gt_instances {
        let mut best: Option<(InstanceId, f64)> = None;
        for p in &preds {
            let iou = voxel_iou(&p.voxels, voxels);
            if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((p.id, iou));
            }
        }
        diagnostics.push(InstanceDiagnostic {
            gt_instance: g,
            class: gt_class[&g],
            gt_voxels: voxels.len(),
            best_prediction: best.map(|b| b.0),
            best_iou: best.map_or(0.0, |b| b.1),
        });
    }

    // Retrieval ranks only instances present in the map.
    let live = live_codebook(map, codebook);
    let mut recall = Vec::new();
    let ks = [1, 2, 3];
    let targets: Vec<(u32, InstanceId)> = diagnostics
        .iter()
        .filter_map(|d| {
            d.best_prediction
                .filter(|id| live.contains(*id))
                .map(|id| (d.class, id))
        })
        .collect();
    let n_queries = diagnostics.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, opts.query_noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for kind in ["class", "noisy"] {
        let queries: Vec<(Vec<f64>, InstanceId)> = targets
            .iter()
            .map(|&(class, id)| {
                let mut q = scene.class_embedding(class).unwrap_or(&[]).to_vec();
                if kind == "noisy" {
                    for x in &mut q {
                        *x += normal.sample(&mut rng);
                    }
                }
                (q, id)
            })
            .collect();
        // GT objects without any prediction count as misses.
        let r = if queries.is_empty() {
            vec![0.0; 3]
        } else {
            let found = retrieval_recall(&live, &queries, &ks)?;
            found
                .into_iter()
                .map(|f| f * queries.len() as f64 / n_queries as f64)
                .collect()
        };
        recall.push(RecallScores {
            kind: kind.into(),
            at1: r[0],
            at2: r[1],
            at3: r[2],
        });
    }

    Ok(EvalReport {
        ap: ap.ap,
        ap50: ap.ap50,
        ap25: ap.ap25,
        miou: sem.miou,
        macc: sem.macc,
        recall,
        predicted_instances: preds.len(),
        gt_instances: gt_instances.len(),
        instances: diagnostics,
    })
}
