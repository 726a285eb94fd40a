//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use voxelox::association::{
    AssociationConfig, AssociationResult, Associator, CandidateScope,
};
use voxelox::evaluate::{
    evaluate_map, instance_ap, retrieval_recall, semantic_scores, voxel_iou, EvalOptions,
    GroundTruthMap, PredictedInstance, VoxelSet,
};
use voxelox::evolution::{integrate_frame, Codebook};
use voxelox::frame_store::{
    write_sequence, DepthImage, FrameBundle, MaskObservation, PixelMask, SequenceReader,
    FRAMES_DIR,
};
use voxelox::geometry::{CameraIntrinsics, Pose, VoxelKey};
use voxelox::query::codebook_json;
use voxelox::simulate::{
    generate_scene, map_scene, render_gt_frame, write_simulation, NoiseConfig, SceneConfig,
    SyntheticScene,
};
use voxelox::snapshot::encode_map;
use voxelox::voxel_map::{argmax_labels, InstanceId, KeyMap, VoxelMap};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("dirichlet-conjugacy", dirichlet_conjugacy),
        ("association-oracle", association_oracle),
        ("recovery", recovery),
        ("robustness-ordering", robustness_ordering),
        ("noise-free-fidelity", noise_free_fidelity),
        ("metric-oracles", metric_oracles),
        ("weighted-mean-associativity", weighted_mean_associativity),
        ("throughput", throughput),
        ("round-trip-determinism", round_trip_determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "{} {name}: {} [{secs:.2} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn dirichlet_conjugacy() -> Outcome {
    let start = Instant::now();
    let mut checks = 0u64;
    let mut bad = Vec::new();
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=3u32);
        let n = rng.random_range(0..=20);
        let mut map = VoxelMap::new(0.04).unwrap();
        for _ in 0..k {
            map.mint_instance();
        }
        let key = VoxelKey::new(
            rng.random_range(-50..50),
            rng.random_range(-50..50),
            rng.random_range(-50..50),
        );
        let mut hist = [0u64; 3];
        for _ in 0..n {
            let id = rng.random_range(0..k);
            map.increment(key, id).unwrap();
            hist[id as usize] += 1;
            let total: u64 = hist.iter().sum();
            let cell = map.get(&key).unwrap();
            for g in 0..k {
                let h = hist[g as usize];
                checks += 1;
                let exact = cell.count(g) as u64 == h
                    && cell.total() == total
                    && cell.theta(g) == h as f64 / total as f64;
                if !exact {
                    bad.push(seed);
                }
            }
            let max = *hist.iter().max().unwrap();
            let expected = hist.iter().position(|&h| h == max).unwrap() as u32;
            if cell.argmax().map(|a| a.0) != Some(expected) {
                bad.push(seed);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    bad.dedup();
    outcome(
        bad.is_empty() && secs < 5.0,
        format!(
            "1000 seeds, {checks} exact θ checks, {} mismatching seeds, {secs:.3} s (budget 5 s)",
            bad.len()
        ),
    )
}

// Brute-force association oracle.

struct ToyCase {
    map: VoxelMap,
    codebook: Codebook,
    frame: FrameBundle,
    cfg: AssociationConfig,
}

const TOY_RES: f64 = 0.1;
const TOY_W: u32 = 8;
const TOY_H: u32 = 8;

fn toy_case(seed: u64) -> ToyCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let k = rng.random_range(1..=4u32);
    let dim = 4;
    let mut map = VoxelMap::new(TOY_RES).unwrap();
    let mut codebook = Codebook::new(dim);
    for id in 0..k {
        map.mint_instance();
        let emb: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        codebook.insert_new(id, emb, None).unwrap();
    }
    let occupancy = rng.random_range(0.2..0.9);
    for ix in 0..5 {
        for iy in 0..5 {
            for iz in 0..5 {
                if !rng.random_bool(occupancy) {
                    continue;
                }
                let key = VoxelKey::new(ix, iy, iz);
                let mut any = false;
                for id in 0..k {
                    if rng.random_bool(0.5) {
                        map.add_count(key, id, rng.random_range(1..=5)).unwrap();
                        any = true;
                    }
                }
                if !any {
                    map.add_count(key, rng.random_range(0..k), 1).unwrap();
                }
            }
        }
    }

    let intrinsics = CameraIntrinsics::new(8.0, 8.0, 3.5, 3.5, TOY_W, TOY_H).unwrap();
    let pose = Pose::from_translation([0.25, 0.25, -0.5]);
    let depth: Vec<u16> = (0..TOY_W * TOY_H)
        .map(|_| {
            if rng.random_bool(0.05) {
                0
            } else {
                rng.random_range(500..1000)
            }
        })
        .collect();
    let n_masks = rng.random_range(1..=4usize);
    let mut pixels: Vec<Vec<u32>> = vec![Vec::new(); n_masks];
    for p in 0..TOY_W * TOY_H {
        let label = rng.random_range(0..=n_masks);
        if label < n_masks {
            pixels[label].push(p);
        }
    }
    let masks = pixels
        .into_iter()
        .filter(|p| !p.is_empty())
        .map(|p| MaskObservation {
            mask: PixelMask::from_pixels(p),
            feature: (0..dim).map(|_| normal.sample(&mut rng) as f32).collect(),
            caption: None,
            detection_score: [0.5f32, 0.7, 0.9][rng.random_range(0..3)],
        })
        .collect();
    let frame = FrameBundle {
        frame_id: seed,
        depth: DepthImage::new(TOY_W, TOY_H, depth).unwrap(),
        pose,
        intrinsics,
        masks,
        allow_overlap: false,
    };
    let geo = rng.random_range(0.0..1.0);
    let cfg = AssociationConfig {
        geo_weight: geo,
        fea_weight: 1.0 - geo,
        similarity_threshold: rng.random_range(0.1..0.9),
        observed_fraction_floor: rng.random_range(0.0..0.5),
        candidate_scope: if rng.random_bool(0.5) {
            CandidateScope::VoxelLocal
        } else {
            CandidateScope::Global
        },
    };
    ToyCase {
        map,
        codebook,
        frame,
        cfg,
    }
}

#[derive(Debug)]
struct OracleMask {
    index: usize,
    voxels: BTreeSet<VoxelKey>,
    instance: InstanceId,
    is_new: bool,
    best: Option<(InstanceId, f64, f64, f64)>,
    visibility: f64,
}

/// Direct evaluation of the fused score over every (mask, instance) pair.
fn oracle_associate(case: &ToyCase) -> (Vec<OracleMask>, Vec<usize>) {
    let f = &case.frame;
    let m = f.pose.to_matrix();
    let counts = |key: &VoxelKey| -> BTreeMap<InstanceId, u64> {
        case.map
            .get(key)
            .map(|c| c.counts().iter().map(|&(i, n)| (i, n as u64)).collect())
            .unwrap_or_default()
    };
    let mut extent: BTreeMap<InstanceId, u64> = BTreeMap::new();
    for (_, cell) in case.map.cells() {
        let mut best: Option<(InstanceId, u32)> = None;
        for &(i, n) in cell.counts() {
            if best.is_none() || n > best.unwrap().1 {
                best = Some((i, n));
            }
        }
        *extent.entry(best.unwrap().0).or_insert(0) += 1;
    }
    let all_ids: Vec<InstanceId> = (0..case.map.next_instance_id()).collect();

    let mut decided = Vec::new();
    let mut skipped = Vec::new();
    for (idx, obs) in f.masks.iter().enumerate() {
        let mut voxels = BTreeSet::new();
        for p in obs.mask.pixels() {
            let mm = f.depth.data()[p as usize];
            if mm == 0 {
                continue;
            }
            let d = mm as f64 * 1e-3;
            let (u, v) = ((p % TOY_W) as f64, (p / TOY_W) as f64);
            let c = [
                (u - f.intrinsics.cx) / f.intrinsics.fx * d,
                (v - f.intrinsics.cy) / f.intrinsics.fy * d,
                d,
            ];
            let w: Vec<f64> = (0..3)
                .map(|r| m[4 * r] * c[0] + m[4 * r + 1] * c[1] + m[4 * r + 2] * c[2] + m[4 * r + 3])
                .collect();
            voxels.insert(VoxelKey::new(
                (w[0] / TOY_RES).floor() as i32,
                (w[1] / TOY_RES).floor() as i32,
                (w[2] / TOY_RES).floor() as i32,
            ));
        }
        if voxels.is_empty() {
            skipped.push(idx);
            continue;
        }
        let observed = voxels.iter().filter(|k| case.map.get(k).is_some()).count();
        let feature: Vec<f64> = obs.feature.iter().map(|&x| x as f64).collect();
        let local: BTreeSet<InstanceId> = voxels.iter().flat_map(|k| counts(k).into_keys()).collect();
        let mut best: Option<(InstanceId, f64, f64, f64)> = None;
        if observed as f64 >= case.cfg.observed_fraction_floor * voxels.len() as f64 {
            for &id in &all_ids {
                let mut s_geo = 0.0;
                for k in &voxels {
                    let c = counts(k);
                    let total: u64 = c.values().sum();
                    if total > 0 {
                        s_geo += *c.get(&id).unwrap_or(&0) as f64 / total as f64;
                    }
                }
                s_geo /= voxels.len() as f64;
                let e = &case.codebook.get(id).unwrap().embedding;
                let dot: f64 = e.iter().zip(&feature).map(|(a, b)| a * b).sum();
                let na: f64 = e.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = feature.iter().map(|b| b * b).sum::<f64>().sqrt();
                let s_fea = (dot / (na * nb)).clamp(0.0, 1.0);
                let a = case.cfg.geo_weight * s_geo + case.cfg.fea_weight * s_fea;
                let eligible = match case.cfg.candidate_scope {
                    CandidateScope::Global => true,
                    CandidateScope::VoxelLocal => local.contains(&id),
                };
                if eligible && best.is_none_or(|b| a > b.1) {
                    best = Some((id, a, s_geo, s_fea));
                }
            }
        }
        decided.push((idx, voxels, best));
    }

    let mut order: Vec<usize> = (0..decided.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = f.masks[decided[a].0].detection_score;
        let sb = f.masks[decided[b].0].detection_score;
        sb.partial_cmp(&sa).unwrap().then(decided[a].0.cmp(&decided[b].0))
    });
    let mut next = case.map.next_instance_id();
    let mut out = Vec::new();
    for i in order {
        let (index, voxels, best) = decided[i].clone();
        let existing = best.filter(|b| b.1 >= case.cfg.similarity_threshold);
        let (instance, is_new, visibility) = match existing {
            Some(b) => {
                let e = *extent.get(&b.0).unwrap_or(&0);
                let r = if e == 0 {
                    1.0
                } else {
                    (voxels.len() as f64 / e as f64).min(1.0)
                };
                (b.0, false, r)
            }
            None => {
                next += 1;
                (next - 1, true, 1.0)
            }
        };
        out.push(OracleMask {
            index,
            voxels,
            instance,
            is_new,
            best,
            visibility,
        });
    }
    (out, skipped)
}

fn compare_association(
    result: &AssociationResult,
    oracle: &[OracleMask],
    skipped: &[usize],
    tol: f64,
) -> Result<f64, String> {
    if result.masks.len() != oracle.len() {
        return Err(format!("{} masks vs oracle {}", result.masks.len(), oracle.len()));
    }
    let mut got_skipped = result.skipped.clone();
    got_skipped.sort_unstable();
    if got_skipped != skipped {
        return Err("skipped masks differ".into());
    }
    let mut worst = 0.0f64;
    for (r, o) in result.masks.iter().zip(oracle) {
        if r.mask_index != o.index || r.instance != o.instance || r.is_new != o.is_new {
            return Err(format!(
                "mask {}: engine ({}, new={}) oracle ({}, new={})",
                o.index, r.instance, r.is_new, o.instance, o.is_new
            ));
        }
        let voxels: BTreeSet<VoxelKey> = r.voxels.iter().copied().collect();
        if voxels != o.voxels || voxels.len() != r.voxels.len() {
            return Err(format!("mask {} voxel region differs", o.index));
        }
        if r.best_candidate != o.best.map(|b| b.0) {
            return Err(format!("mask {} best candidate differs", o.index));
        }
        let (a, g, fe) = o.best.map_or((0.0, 0.0, 0.0), |b| (b.1, b.2, b.3));
        for (x, y) in [
            (r.probability, a),
            (r.s_geo, g),
            (r.s_fea, fe),
            (r.visibility, o.visibility),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    if worst > tol {
        return Err(format!("score error {worst:e}"));
    }
    Ok(worst)
}

fn association_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let (mut masks, mut existing, mut fresh) = (0, 0, 0);
    for seed in 0..200 {
        let case = toy_case(seed);
        let result = Associator::Probabilistic(case.cfg)
            .associate(&case.frame, &case.map, &case.codebook)
            .unwrap();
        let (oracle, skipped) = oracle_associate(&case);
        match compare_association(&result, &oracle, &skipped, 1e-12) {
            Ok(w) => worst = worst.max(w),
            Err(e) => return outcome(false, format!("toy map {seed}: {e}")),
        }
        masks += oracle.len();
        existing += oracle.iter().filter(|o| !o.is_new).count();
        fresh += oracle.iter().filter(|o| o.is_new).count();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        secs < 10.0,
        format!(
            "200 toy maps, {masks} masks ({existing} associated, {fresh} new) all decisions equal, \
             max score error {worst:.1e} (tol 1e-12), {secs:.3} s (budget 10 s)"
        ),
    )
}

/// Union of the two largest masks with the pixel-weighted mean feature.
fn merge_two_largest(frame: &FrameBundle) -> Option<FrameBundle> {
    if frame.masks.len() < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..frame.masks.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(frame.masks[i].mask.len()));
    let (a, b) = (&frame.masks[order[0]], &frame.masks[order[1]]);
    let (na, nb) = (a.mask.len() as f32, b.mask.len() as f32);
    let merged = MaskObservation {
        mask: a.mask.union(&b.mask),
        feature: a
            .feature
            .iter()
            .zip(&b.feature)
            .map(|(x, y)| (na * x + nb * y) / (na + nb))
            .collect(),
        caption: a.caption.clone(),
        detection_score: a.detection_score.max(b.detection_score),
    };
    let mut out = frame.clone();
    out.masks = frame
        .masks
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != order[0] && *i != order[1])
        .map(|(_, m)| m.clone())
        .collect();
    out.masks.push(merged);
    Some(out)
}

fn recovery() -> Outcome {
    let cfg = SceneConfig {
        objects: 6,
        frames: 36,
        ..Default::default()
    };
    let assoc = Associator::default();
    let (mut affected_total, mut mismatched, mut corrupted_seeds) = (0usize, 0usize, 0usize);
    let mut first_failure = None;
    for seed in 0..50u64 {
        let scene = generate_scene(seed, &cfg).unwrap();
        let clean: Vec<FrameBundle> = scene
            .trajectory
            .iter()
            .enumerate()
            .map(|(i, p)| render_gt_frame(&scene, p, i as u64).0)
            .collect();
        let Some((w, corrupted)) = (8..20).find_map(|w| merge_two_largest(&clean[w]).map(|c| (w, c)))
        else {
            continue;
        };
        corrupted_seeds += 1;

        let mut r0 = VoxelMap::new(0.04).unwrap();
        let mut c0 = Codebook::new(scene.embedding_dim());
        for f in &clean {
            integrate_frame(&mut r0, &mut c0, f, &assoc).unwrap();
        }

        let mut r1 = VoxelMap::new(0.04).unwrap();
        let mut c1 = Codebook::new(scene.embedding_dim());
        for f in &clean[..w] {
            integrate_frame(&mut r1, &mut c1, f, &assoc).unwrap();
        }
        let before = r1.next_instance_id();
        let (_, bad) = integrate_frame(&mut r1, &mut c1, &corrupted, &assoc).unwrap();
        let k_new = bad.new_instances() as u32;
        let merged = bad
            .masks
            .iter()
            .find(|m| m.mask_index == corrupted.masks.len() - 1)
            .unwrap();
        let mut seen: KeyMap<u32> = KeyMap::default();
        for f in &clean[w..] {
            let (_, res) = integrate_frame(&mut r1, &mut c1, f, &assoc).unwrap();
            for m in &res.masks {
                for k in &m.voxels {
                    *seen.entry(*k).or_insert(0) += 1;
                }
            }
        }
        let l0 = argmax_labels(&r0);
        let l1 = argmax_labels(&r1);
        let to_clean_id = |id: InstanceId| -> Option<InstanceId> {
            if id < before {
                Some(id)
            } else if id < before + k_new {
                None
            } else {
                Some(id - k_new)
            }
        };
        for k in &merged.voxels {
            if seen.get(k).copied().unwrap_or(0) < 2 {
                continue;
            }
            affected_total += 1;
            if to_clean_id(l1[k]) != Some(l0[k]) {
                mismatched += 1;
                first_failure.get_or_insert((seed, *k));
            }
        }
    }
    outcome(
        mismatched == 0 && affected_total > 0,
        format!(
            "{corrupted_seeds}/50 seeds corrupted, {affected_total} affected voxels with >= 2 later \
             observations, {} recovered ({mismatched} not){}",
            affected_total - mismatched,
            first_failure.map_or(String::new(), |(s, k)| format!(", first miss seed {s} {k:?}"))
        ),
    )
}

fn robustness_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        objects: 6 + (seed % 5) as usize,
        frames: 60 + 20 * ((seed / 5) % 4) as usize,
        ..Default::default()
    }
}

fn robustness_ordering() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let (mut sum_p, mut sum_b) = (0.0, 0.0);
    let mut rows = Vec::new();
    for seed in 0..20u64 {
        let scene = generate_scene(seed, &robustness_scene(seed)).unwrap();
        let gt = GroundTruthMap::from_rendered_surfaces(&scene, 0.04).unwrap();
        let noise = NoiseConfig {
            p_drop: 0.1,
            p_split: 0.15,
            p_merge: 0.15,
            boundary_jitter: 2,
            seed,
            ..Default::default()
        };
        let ap50 = |assoc: Associator| {
            let (map, cb) = map_scene(&scene, &noise, &assoc, 0.04).unwrap();
            evaluate_map(&map, &cb, &scene, &gt, &EvalOptions::default())
                .unwrap()
                .ap50
        };
        let p = ap50(Associator::default());
        let b = ap50(Associator::IouBaseline { iou_threshold: 0.5 });
        if p > b {
            wins += 1;
        }
        sum_p += p;
        sum_b += b;
        rows.push(format!("{p:.2}/{b:.2}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let (mp, mb) = (sum_p / 20.0, sum_b / 20.0);
    outcome(
        wins >= 16 && mp > mb && secs < 300.0,
        format!(
            "probabilistic AP50 strictly higher in {wins}/20 scenes (need 16), mean {mp:.3} vs {mb:.3}, \
             {secs:.1} s (budget 300 s); per scene {}",
            rows.join(" ")
        ),
    )
}

fn noise_free_fidelity() -> Outcome {
    let mut worst_ap25 = 1.0f64;
    let mut worst_r1 = 1.0f64;
    for seed in 0..5u64 {
        let cfg = SceneConfig {
            objects: 6 + seed as usize,
            ..Default::default()
        };
        let scene = generate_scene(1000 + seed, &cfg).unwrap();
        let gt = GroundTruthMap::from_rendered_surfaces(&scene, 0.04).unwrap();
        let (map, cb) = map_scene(&scene, &NoiseConfig::default(), &Associator::default(), 0.04).unwrap();
        let r = evaluate_map(&map, &cb, &scene, &gt, &EvalOptions::default()).unwrap();
        worst_ap25 = worst_ap25.min(r.ap25);
        let class_queries = r.recall.iter().find(|q| q.kind == "class").unwrap();
        worst_r1 = worst_r1.min(class_queries.at1);
    }
    outcome(
        worst_ap25 >= 0.9 && worst_r1 == 1.0,
        format!("5 zero-noise scenes, min AP25 {worst_ap25:.3} (need 0.9), min recall@1 {worst_r1:.3} (need 1.0)"),
    )
}

// Metric fixtures.

fn keys(range: impl IntoIterator<Item = i32>, row: i32) -> VoxelSet {
    range.into_iter().map(|i| VoxelKey::new(i, row, 0)).collect()
}

fn gt_from(instances: &[(u32, u32, VoxelSet)]) -> GroundTruthMap {
    let mut labels = KeyMap::default();
    for (inst, class, set) in instances {
        for k in set {
            labels.insert(*k, (*inst, *class));
        }
    }
    GroundTruthMap::new(0.04, labels).unwrap()
}

fn pred(id: InstanceId, voxels: VoxelSet, confidence: f64) -> PredictedInstance {
    PredictedInstance {
        id,
        voxels,
        confidence,
    }
}

/// Literal AP: greedy matching on an explicit IoU matrix, then the maximum
/// precision at recall ≥ r for each of the 101 recall levels.
fn oracle_ap(preds: &[PredictedInstance], gt: &[(u32, VoxelSet)], threshold: f64) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap());
    let iou = |p: &VoxelSet, g: &VoxelSet| {
        let inter = p.intersection(g).count() as f64;
        inter / (p.len() as f64 + g.len() as f64 - inter)
    };
    let mut used = vec![false; gt.len()];
    let mut curve = Vec::new();
    let mut tp = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, (_, g)) in gt.iter().enumerate() {
            let v = iou(&preds[i].voxels, g);
            if !used[j] && v >= threshold && best.is_none_or(|b| v > b.1) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1.0;
        }
        curve.push((tp / gt.len() as f64, tp / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= level - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}

fn check(failures: &mut Vec<String>, name: &str, got: f64, want: f64) {
    if (got - want).abs() > 1e-9 || got.is_nan() {
        failures.push(format!("{name}: {got} != {want}"));
    }
}

fn metric_oracles() -> Outcome {
    let mut failures = Vec::new();

    check(&mut failures, "iou identical", voxel_iou(&keys(0..10, 0), &keys(0..10, 0)), 1.0);
    check(&mut failures, "iou disjoint", voxel_iou(&keys(0..10, 0), &keys(10..20, 0)), 0.0);
    check(&mut failures, "iou half", voxel_iou(&keys(0..10, 0), &keys(5..15, 0)), 5.0 / 15.0);
    check(&mut failures, "iou empty", voxel_iou(&keys([], 0), &keys([], 0)), 0.0);

    let (a, b) = (keys(0..10, 0), keys(0..10, 1));
    let gt = gt_from(&[(0, 0, a.clone()), (1, 1, b.clone())]);
    let perfect = instance_ap(&[pred(0, a.clone(), 0.9), pred(1, b.clone(), 0.8)], &gt).unwrap();
    check(&mut failures, "ap identical", perfect.ap, 1.0);
    check(&mut failures, "ap50 identical", perfect.ap50, 1.0);
    check(&mut failures, "ap25 identical", perfect.ap25, 1.0);
    let none = instance_ap(&[], &gt).unwrap();
    check(&mut failures, "ap none", none.ap + none.ap50 + none.ap25, 0.0);
    // Second prediction covers half of B plus five stray voxels: IoU 1/3.
    let half: VoxelSet = keys(0..5, 1).into_iter().chain(keys(0..5, 2)).collect();
    let toy = [pred(0, a.clone(), 0.9), pred(1, half, 0.8)];
    let s = instance_ap(&toy, &gt).unwrap();
    let gt_list = [(0, a.clone()), (1, b.clone())];
    check(&mut failures, "toy ap50 hand", s.ap50, 51.0 / 101.0);
    check(&mut failures, "toy ap hand", s.ap, 51.0 / 101.0);
    check(&mut failures, "toy ap25 hand", s.ap25, 1.0);
    check(&mut failures, "toy ap50 oracle", s.ap50, oracle_ap(&toy, &gt_list, 0.5));
    check(&mut failures, "toy ap25 oracle", s.ap25, oracle_ap(&toy, &gt_list, 0.25));

    // Random small fixtures against the literal oracle plus the ordering
    // and rank-only invariants.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..300 {
        let n_gt = rng.random_range(1..=3u32);
        let mut gt_sets: Vec<(u32, VoxelSet)> = (0..n_gt).map(|i| (i, VoxelSet::default())).collect();
        for x in 0..6 {
            for y in 0..6 {
                let l = rng.random_range(0..=n_gt);
                if l < n_gt {
                    gt_sets[l as usize].1.insert(VoxelKey::new(x, y, 0));
                }
            }
        }
        gt_sets.retain(|(_, s)| !s.is_empty());
        if gt_sets.is_empty() {
            continue;
        }
        let gt = gt_from(&gt_sets.iter().map(|(i, s)| (*i, 0, s.clone())).collect::<Vec<_>>());
        let preds: Vec<PredictedInstance> = (0..rng.random_range(0..5u32))
            .map(|id| {
                let voxels: VoxelSet = (0..6)
                    .flat_map(|x| (0..7).map(move |y| VoxelKey::new(x, y, 0)))
                    .filter(|_| rng.random_bool(0.3))
                    .collect();
                pred(id, voxels, rng.random_range(0.0..1.0))
            })
            .filter(|p| !p.voxels.is_empty())
            .collect();
        let s = instance_ap(&preds, &gt).unwrap();
        let want_ap = (0..10)
            .map(|i| oracle_ap(&preds, &gt_sets, 0.5 + 0.05 * i as f64))
            .sum::<f64>()
            / 10.0;
        check(&mut failures, &format!("random {case} ap"), s.ap, want_ap);
        check(&mut failures, &format!("random {case} ap50"), s.ap50, oracle_ap(&preds, &gt_sets, 0.5));
        check(&mut failures, &format!("random {case} ap25"), s.ap25, oracle_ap(&preds, &gt_sets, 0.25));
        if !(s.ap25 >= s.ap50 && s.ap50 >= s.ap) {
            failures.push(format!("random {case}: AP ordering violated"));
        }
        let scaled: Vec<PredictedInstance> = preds
            .iter()
            .map(|p| pred(p.id, p.voxels.clone(), p.confidence * 0.37))
            .collect();
        if instance_ap(&scaled, &gt).unwrap() != s {
            failures.push(format!("random {case}: confidence rescaling changed AP"));
        }
    }

    // Semantic scores.
    let sem_gt = gt_from(&[(0, 0, keys(0..4, 0)), (1, 1, keys(0..4, 1))]);
    let perfect: KeyMap<u32> = sem_gt.labels.iter().map(|(k, &(_, c))| (*k, c)).collect();
    let s = semantic_scores(&perfect, &sem_gt);
    check(&mut failures, "semantic perfect miou", s.miou, 1.0);
    check(&mut failures, "semantic perfect macc", s.macc, 1.0);
    let single: KeyMap<u32> = sem_gt.labels.keys().map(|k| (*k, 0)).collect();
    check(&mut failures, "semantic single class macc", semantic_scores(&single, &sem_gt).macc, 0.5);
    for case in 0..100 {
        let mut labels = KeyMap::default();
        let mut pred_cls = KeyMap::default();
        for x in 0..8 {
            for y in 0..8 {
                let k = VoxelKey::new(x, y, 0);
                if rng.random_bool(0.8) {
                    labels.insert(k, (0, rng.random_range(0..3u32)));
                }
                if rng.random_bool(0.8) {
                    pred_cls.insert(k, rng.random_range(0..3u32));
                }
            }
        }
        if labels.is_empty() {
            continue;
        }
        let gt = GroundTruthMap::new(0.04, labels.clone()).unwrap();
        // Confusion matrix with index 3 = unlabeled.
        let mut cm = [[0u64; 4]; 4];
        let mut all: BTreeSet<VoxelKey> = labels.keys().copied().collect();
        all.extend(pred_cls.keys().copied());
        for k in &all {
            let g = labels.get(k).map_or(3, |l| l.1 as usize);
            let p = pred_cls.get(k).map_or(3, |&c| c as usize);
            cm[g][p] += 1;
        }
        let (mut iou, mut acc, mut n) = (0.0, 0.0, 0.0);
        for c in 0..3 {
            let row: u64 = cm[c].iter().sum();
            if row == 0 {
                continue;
            }
            let col: u64 = (0..4).map(|g| cm[g][c]).sum();
            iou += cm[c][c] as f64 / (row + col - cm[c][c]) as f64;
            acc += cm[c][c] as f64 / row as f64;
            n += 1.0;
        }
        let s = semantic_scores(&pred_cls, &gt);
        check(&mut failures, &format!("semantic grid {case} miou"), s.miou, iou / n);
        check(&mut failures, &format!("semantic grid {case} macc"), s.macc, acc / n);
    }

    // Retrieval recall.
    let mut cb = Codebook::new(16);
    for id in 0..8u32 {
        let mut e = vec![0.0; 16];
        e[id as usize] = 1.0;
        cb.insert_new(id, e, None).unwrap();
    }
    let own: Vec<(Vec<f64>, InstanceId)> =
        cb.records().map(|r| (r.embedding.clone(), r.id)).collect();
    check(&mut failures, "recall own embeddings", retrieval_recall(&cb, &own, &[1]).unwrap()[0], 1.0);
    let mut orth = vec![0.0; 16];
    orth[12] = 1.0;
    let r = retrieval_recall(&cb, &[(orth, 3)], &[1, 2, 3]).unwrap();
    check(&mut failures, "recall orthogonal query", r.iter().sum(), 0.0);
    let normal = Normal::new(0.0, 0.2).unwrap();
    let noisy: Vec<(Vec<f64>, InstanceId)> = (0..400)
        .map(|i| {
            let id = (i % 8) as u32;
            let q = cb.get(id).unwrap().embedding.iter().map(|x| x + normal.sample(&mut rng)).collect();
            (q, id)
        })
        .collect();
    let r = retrieval_recall(&cb, &noisy, &[1, 2, 3]).unwrap();
    if !(r[0] <= r[1] && r[1] <= r[2]) {
        failures.push(format!("recall not monotone in k: {r:?}"));
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "voxel_iou, instance_ap (hand toy + 300 random oracle fixtures), semantic_scores \
             (100 confusion-matrix grids), retrieval_recall all within 1e-9"
                .to_string()
        } else {
            format!("{} mismatches, first: {}", failures.len(), failures[0])
        },
    )
}

fn weighted_mean_associativity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(1..=8usize);
        let n = rng.random_range(1..=50usize);
        let f0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let updates: Vec<(f64, Vec<f64>)> = (0..n)
            .map(|_| {
                let w = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..1.0) };
                (w, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
            .collect();

        // Streamed: one record fed in order.
        let mut streamed = Codebook::new(dim);
        streamed.insert_new(0, f0.clone(), None).unwrap();
        for (w, f) in &updates {
            streamed.fuse(0, *w, f, None).unwrap();
        }
        // Batched: closed-form weighted mean.
        let total: f64 = 1.0 + updates.iter().map(|u| u.0).sum::<f64>();
        let batched: Vec<f64> = (0..dim)
            .map(|j| (f0[j] + updates.iter().map(|(w, f)| w * f[j]).sum::<f64>()) / total)
            .collect();
        // Regrouped: two partial records merged afterwards.
        let cut = rng.random_range(0..n);
        let mut map = VoxelMap::new(0.04).unwrap();
        map.mint_instance();
        map.mint_instance();
        let mut split = Codebook::new(dim);
        split.insert_new(0, f0.clone(), None).unwrap();
        let (first, rest) = updates.split_at(cut);
        for (w, f) in first {
            split.fuse(0, *w, f, None).unwrap();
        }
        let (w1, f1) = &rest[0];
        // Unit-weight seed of the second record, corrected below.
        split.insert_new(1, f1.clone(), None).unwrap();
        for (w, f) in &rest[1..] {
            split.fuse(1, *w, f, None).unwrap();
        }
        map.merge_instances(&mut split, 1, 0).unwrap();
        let regroup_total = total - w1 + 1.0;
        let regrouped_expect: Vec<f64> = (0..dim)
            .map(|j| (batched[j] * total - w1 * f1[j] + f1[j]) / regroup_total)
            .collect();

        let s = streamed.get(0).unwrap();
        let m = split.get(0).unwrap();
        worst = worst.max((s.weight - total).abs());
        worst = worst.max((m.weight - regroup_total).abs());
        for j in 0..dim {
            worst = worst.max((s.embedding[j] - batched[j]).abs());
            worst = worst.max((m.embedding[j] - regrouped_expect[j]).abs());
        }
    }
    outcome(
        worst <= 1e-9,
        format!("1000 sequences, streamed vs batched vs regrouped max deviation {worst:.2e} (tol 1e-9)"),
    )
}

fn throughput() -> Outcome {
    let res = 0.04;
    let mut map = VoxelMap::new(res).unwrap();
    let n_inst = 64u32;
    for _ in 0..n_inst {
        map.mint_instance();
    }
    let dim = 16;
    let mut cb = Codebook::new(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for id in 0..n_inst {
        cb.insert_new(id, (0..dim).map(|_| normal.sample(&mut rng)).collect(), None)
            .unwrap();
    }
    // A 100^3 block of voxels split into 4x4x4 instance cells.
    for ix in 0..100 {
        for iy in 0..100 {
            for iz in 0..100 {
                let id = (ix / 25 * 16 + iy / 25 * 4 + iz / 25) as u32;
                map.add_count(VoxelKey::new(ix, iy, iz), id, 1 + (ix + iy + iz) as u32 % 3)
                    .unwrap();
            }
        }
    }
    let occupied = map.len();

    let (w, h) = (640u32, 480u32);
    let intr = CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, w, h).unwrap();
    let pose = Pose::from_translation([2.0, 2.0, -1.5]);
    let features: Vec<Vec<f32>> = (0..20)
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng) as f32).collect())
        .collect();
    let make_frame = |i: u64| {
        let mut depth = vec![0u16; (w * h) as usize];
        let mut pixels: Vec<Vec<u32>> = vec![Vec::new(); 20];
        for v in 0..h {
            for u in 0..w {
                let (bu, bv) = (u / 128, v / 120);
                let mask = (bv * 5 + bu) as usize;
                let p = v * w + u;
                depth[p as usize] =
                    2000 + (mask as u32 * 61 + u % 128 + v % 120 + i as u32 * 7) as u16;
                pixels[mask].push(p);
            }
        }
        FrameBundle {
            frame_id: i,
            depth: DepthImage::new(w, h, depth).unwrap(),
            pose,
            intrinsics: intr,
            masks: pixels
                .into_iter()
                .zip(&features)
                .map(|(p, f)| MaskObservation {
                    mask: PixelMask::from_pixels(p),
                    feature: f.clone(),
                    caption: None,
                    detection_score: 0.5,
                })
                .collect(),
            allow_overlap: false,
        }
    };
    let frames: Vec<FrameBundle> = (0..21).map(make_frame).collect();
    let assoc = Associator::default();
    let mut times = Vec::new();
    for f in &frames {
        let t = Instant::now();
        integrate_frame(&mut map, &mut cb, f, &assoc).unwrap();
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p50 = times[times.len() / 2];
    let p95 = times[(times.len() as f64 * 0.95).ceil() as usize - 1];
    outcome(
        p50 <= 50.0,
        format!(
            "640x480, 20 masks, {occupied} occupied voxels, {} worker threads: p50 {p50:.1} ms \
             (budget 50 ms), p95 {p95:.1} ms",
            rayon::current_num_threads()
        ),
    )
}

fn snapshot_bytes(scene: &SyntheticScene, noise: &NoiseConfig, threads: usize) -> (Vec<u8>, String, String) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let (map, cb) = map_scene(scene, noise, &Associator::default(), 0.04).unwrap();
        let gt = GroundTruthMap::from_rendered_surfaces(scene, 0.04).unwrap();
        let report = evaluate_map(&map, &cb, scene, &gt, &EvalOptions::default()).unwrap();
        (
            encode_map(&map),
            serde_json::to_string(&codebook_json(&map, &cb)).unwrap(),
            serde_json::to_string(&report).unwrap(),
        )
    })
}

fn round_trip_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(
        11,
        &SceneConfig {
            frames: 20,
            ..Default::default()
        },
    )
    .unwrap();
    let noise = NoiseConfig {
        p_drop: 0.1,
        p_split: 0.15,
        p_merge: 0.15,
        boundary_jitter: 2,
        embedding_noise_sigma: 0.05,
        depth_noise_sigma: 0.005,
        seed: 5,
    };
    let a = dir.path().join("a");
    write_simulation(&a, &scene, &noise, 0.04).unwrap();
    let reader = SequenceReader::open(&a).unwrap();
    let frames: Vec<FrameBundle> = reader.frames().collect::<Result<_, _>>().unwrap();
    let expected: Vec<FrameBundle> = (0..scene.trajectory.len())
        .map(|i| voxelox::simulate::simulate_frame(&scene, &noise, i).noisy)
        .collect();
    if frames != expected {
        return outcome(false, "decoded frames differ from the written ones");
    }
    let b = dir.path().join("b");
    write_sequence(&frames, &b, 0.04, scene.embedding_dim()).unwrap();
    let files = |root: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(root.join(FRAMES_DIR))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect()
    };
    let (fa, fb) = (files(&a), files(&b));
    if fa != fb || fa.is_empty() {
        return outcome(false, "re-encoded frame files are not byte-identical");
    }

    let first = snapshot_bytes(&scene, &noise, 1);
    let second = snapshot_bytes(&scene, &noise, 1);
    let wide = snapshot_bytes(&scene, &noise, 4);
    let same = first == second && first == wide;
    outcome(
        same,
        format!(
            "{} frames ({} files) round-trip bit-exact; snapshot ({} B map, {} B codebook) and report \
             identical across repeated runs and 1 vs 4 worker threads: {same}",
            frames.len(),
            fa.len(),
            first.0.len(),
            first.1.len()
        ),
    )
}
