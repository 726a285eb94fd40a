//! Sparse voxel grid holding per-voxel Dirichlet instance counts.
//!
//! Each observed voxel stores integer counts `α[γ]` over the instances that
//! have been assigned to it. The probabilistic instance vector is the
//! posterior Dirichlet mean `θ[γ] = α[γ] / Σα`, defined only over instances
//! actually observed at the voxel (zero-initialized counts).

use std::hash::{Hash, Hasher};

use rustc_hash::FxHashMap;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::evolution::Codebook;
use crate::geometry::VoxelKey;

pub type InstanceId = u32;

/// Hash map keyed by voxel.
pub type KeyMap<V> = FxHashMap<VoxelKey, V>;

/// Dirichlet counts of a single voxel, sorted by instance id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoxelState {
    counts: SmallVec<[(InstanceId, u32); 2]>,
}

impl VoxelState {
    pub fn from_counts(mut counts: Vec<(InstanceId, u32)>) -> Self {
        counts.retain(|&(_, c)| c > 0);
        counts.sort_unstable_by_key(|&(id, _)| id);
        counts.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        Self {
            counts: counts.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    /// `(instance, count)` pairs in ascending instance order.
    pub fn counts(&self) -> &[(InstanceId, u32)] {
        &self.counts
    }

    pub fn count(&self, id: InstanceId) -> u32 {
        self.counts
            .binary_search_by_key(&id, |&(i, _)| i)
            .map(|pos| self.counts[pos].1)
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&(_, c)| c as u64).sum()
    }

    /// `θ[id]`, zero when the instance has never been observed here.
    pub fn theta(&self, id: InstanceId) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.count(id) as f64 / total as f64
    }

    /// Most-counted instance, ties broken by the smaller id.
    pub fn argmax(&self) -> Option<(InstanceId, u32)> {
        let mut best: Option<(InstanceId, u32)> = None;
        for &(id, c) in &self.counts {
            // Entries are id-sorted, so strict comparison keeps the smallest id on ties.
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((id, c));
            }
        }
        best
    }

    /// Largest entry of the instance vector.
    pub fn max_theta(&self) -> Option<f64> {
        self.argmax()
            .map(|(_, c)| c as f64 / self.total() as f64)
    }

    pub(crate) fn add(&mut self, id: InstanceId, amount: u32) {
        match self.counts.binary_search_by_key(&id, |&(i, _)| i) {
            Ok(pos) => self.counts[pos].1 += amount,
            Err(pos) => self.counts.insert(pos, (id, amount)),
        }
    }

    pub(crate) fn take(&mut self, id: InstanceId) -> u32 {
        match self.counts.binary_search_by_key(&id, |&(i, _)| i) {
            Ok(pos) => self.counts.remove(pos).1,
            Err(_) => 0,
        }
    }
}

/// Sparse probability vector `θ` in ascending instance order.
pub fn instance_vector(state: &VoxelState) -> Result<Vec<(InstanceId, f64)>> {
    let total = state.total();
    if total == 0 {
        return Err(Error::UnobservedVoxel);
    }
    let total = total as f64;
    Ok(state
        .counts
        .iter()
        .map(|&(id, c)| (id, c as f64 / total))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    resolution: f64,
    cells: KeyMap<VoxelState>,
    next_instance_id: InstanceId,
    /// Number of voxels whose argmax is each instance, indexed by id.
    extents: Vec<u64>,
    retired: Vec<bool>,
    total_count: u64,
}

impl VoxelMap {
    pub fn new(resolution: f64) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::Config(format!("resolution must be positive, got {resolution}")));
        }
        Ok(Self {
            resolution,
            cells: KeyMap::default(),
            next_instance_id: 0,
            extents: Vec::new(),
            retired: Vec::new(),
            total_count: 0,
        })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn next_instance_id(&self) -> InstanceId {
        self.next_instance_id
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Sum of every count in every voxel.
    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelState> {
        self.cells.get(key)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelState)> {
        self.cells.iter()
    }

    /// Cells sorted by key, for deterministic serialization.
    pub fn sorted_cells(&self) -> Vec<(VoxelKey, &VoxelState)> {
        let mut cells: Vec<_> = self.cells.iter().map(|(k, s)| (*k, s)).collect();
        cells.sort_unstable_by_key(|(k, _)| *k);
        cells
    }

    /// Live (minted and not retired) instance ids, ascending.
    pub fn instance_ids(&self) -> impl Iterator<Item = InstanceId> + '_ {
        (0..self.next_instance_id).filter(|&id| !self.retired[id as usize])
    }

    pub fn contains_instance(&self, id: InstanceId) -> bool {
        id < self.next_instance_id && !self.retired[id as usize]
    }

    /// Cached number of voxels whose argmax is `id`.
    pub fn extent(&self, id: InstanceId) -> u64 {
        self.extents.get(id as usize).copied().unwrap_or(0)
    }

    pub fn mint_instance(&mut self) -> InstanceId {
        let id = self.next_instance_id;
        self.next_instance_id += 1;
        self.extents.push(0);
        self.retired.push(false);
        id
    }

    pub fn increment(&mut self, key: VoxelKey, id: InstanceId) -> Result<()> {
        self.add_count(key, id, 1)
    }

    /// Adds `amount` observations of `id` at `key`.
    pub fn add_count(&mut self, key: VoxelKey, id: InstanceId, amount: u32) -> Result<()> {
        if !self.contains_instance(id) {
            return Err(Error::UnknownInstance(id));
        }
        if amount == 0 {
            return Ok(());
        }
        let cell = self.cells.entry(key).or_default();
        let before = cell.argmax().map(|(i, _)| i);
        cell.add(id, amount);
        let after = cell.argmax().map(|(i, _)| i);
        self.total_count += amount as u64;
        if before != after {
            if let Some(b) = before {
                self.extents[b as usize] -= 1;
            }
            if let Some(a) = after {
                self.extents[a as usize] += 1;
            }
        }
        Ok(())
    }

    /// Moves all count mass of `src` onto `dst`, fuses their codebook
    /// records by weight, and retires `src`.
    pub fn merge_instances(
        &mut self,
        codebook: &mut Codebook,
        src: InstanceId,
        dst: InstanceId,
    ) -> Result<()> {
        if src == dst {
            return Err(Error::IdenticalInstances(src));
        }
        for id in [src, dst] {
            if !self.contains_instance(id) {
                return Err(Error::UnknownInstance(id));
            }
        }
        codebook.fuse_records(src, dst)?;
        for cell in self.cells.values_mut() {
            let moved = cell.take(src);
            if moved > 0 {
                cell.add(dst, moved);
            }
        }
        self.retired[src as usize] = true;
        self.extents = self.recount_extents();
        Ok(())
    }

    /// Per-instance argmax-voxel counts recomputed from scratch.
    pub fn recount_extents(&self) -> Vec<u64> {
        let mut extents = vec![0u64; self.next_instance_id as usize];
        for cell in self.cells.values() {
            if let Some((id, _)) = cell.argmax() {
                extents[id as usize] += 1;
            }
        }
        extents
    }

    /// Checks the cached extents and bookkeeping against a full recount.
    pub fn audit(&self) -> std::result::Result<(), String> {
        let recount = self.recount_extents();
        if recount != self.extents {
            return Err("extent cache disagrees with recount".into());
        }
        let total: u64 = self.cells.values().map(VoxelState::total).sum();
        if total != self.total_count {
            return Err(format!("total count {} != recount {total}", self.total_count));
        }
        for (key, cell) in &self.cells {
            if cell.is_empty() {
                return Err(format!("empty cell at {key:?}"));
            }
            for &(id, _) in cell.counts() {
                if !self.contains_instance(id) {
                    return Err(format!("cell {key:?} references dead instance {id}"));
                }
            }
        }
        Ok(())
    }

    /// Deterministic digest of the full map state.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.resolution.to_bits().hash(&mut h);
        self.next_instance_id.hash(&mut h);
        self.retired.hash(&mut h);
        for (key, cell) in self.sorted_cells() {
            key.hash(&mut h);
            cell.counts().hash(&mut h);
        }
        h.finish()
    }

    /// Rebuilds a map from raw parts; used by snapshot loading.
    pub fn from_parts(
        resolution: f64,
        next_instance_id: InstanceId,
        retired: Vec<InstanceId>,
        cells: impl IntoIterator<Item = (VoxelKey, VoxelState)>,
    ) -> Result<Self> {
        let mut map = Self::new(resolution)?;
        for _ in 0..next_instance_id {
            map.mint_instance();
        }
        for id in retired {
            if id >= next_instance_id {
                return Err(Error::UnknownInstance(id));
            }
            map.retired[id as usize] = true;
        }
        for (key, state) in cells {
            if state.is_empty() {
                return Err(Error::Inconsistent(format!("empty cell at {key:?}")));
            }
            for &(id, _) in state.counts() {
                if !map.contains_instance(id) {
                    return Err(Error::UnknownInstance(id));
                }
            }
            map.total_count += state.total();
            if map.cells.insert(key, state).is_some() {
                return Err(Error::Inconsistent(format!("duplicate cell {key:?}")));
            }
        }
        map.extents = map.recount_extents();
        Ok(map)
    }

    pub fn retired_ids(&self) -> Vec<InstanceId> {
        (0..self.next_instance_id)
            .filter(|&id| self.retired[id as usize])
            .collect()
    }

    /// Voxels whose argmax is each live instance.
    pub fn instance_voxels(&self) -> FxHashMap<InstanceId, Vec<VoxelKey>> {
        let mut out: FxHashMap<InstanceId, Vec<VoxelKey>> = FxHashMap::default();
        for (key, cell) in &self.cells {
            if let Some((id, _)) = cell.argmax() {
                out.entry(id).or_default().push(*key);
            }
        }
        out
    }
}

/// Max-θ per observed voxel.
pub fn confidence(map: &VoxelMap) -> KeyMap<f64> {
    map.cells
        .iter()
        .filter_map(|(k, s)| s.max_theta().map(|c| (*k, c)))
        .collect()
}

/// Argmax instance per observed voxel (ties to the smallest id).
pub fn argmax_labels(map: &VoxelMap) -> KeyMap<InstanceId> {
    map.cells
        .iter()
        .filter_map(|(k, s)| s.argmax().map(|(id, _)| (*k, id)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(i: i32) -> VoxelKey {
        VoxelKey::new(i, 0, 0)
    }

    fn map_with(n: u32) -> VoxelMap {
        let mut m = VoxelMap::new(0.04).unwrap();
        for _ in 0..n {
            m.mint_instance();
        }
        m
    }

    #[test]
    fn instance_vector_arithmetic() {
        let s = VoxelState::from_counts(vec![(0, 3), (1, 1)]);
        assert_eq!(instance_vector(&s).unwrap(), vec![(0, 0.75), (1, 0.25)]);
        let s = VoxelState::from_counts(vec![(0, 1)]);
        assert_eq!(instance_vector(&s).unwrap(), vec![(0, 1.0)]);
        let s = VoxelState::from_counts(vec![(0, 2), (1, 2)]);
        assert_eq!(instance_vector(&s).unwrap(), vec![(0, 0.5), (1, 0.5)]);
        assert!(matches!(
            instance_vector(&VoxelState::default()),
            Err(Error::UnobservedVoxel)
        ));
    }

    #[test]
    fn increment_creates_cell_and_flips_argmax() {
        let mut m = map_with(2);
        m.increment(key(0), 0).unwrap();
        assert_eq!(m.get(&key(0)).unwrap().counts(), &[(0, 1)]);
        assert_eq!(confidence(&m)[&key(0)], 1.0);

        m.increment(key(0), 0).unwrap();
        m.increment(key(0), 1).unwrap();
        assert_eq!(argmax_labels(&m)[&key(0)], 0);
        assert_eq!(m.extent(0), 1);
        m.increment(key(0), 1).unwrap();
        m.increment(key(0), 1).unwrap();
        assert_eq!(m.get(&key(0)).unwrap().counts(), &[(0, 2), (1, 3)]);
        assert_eq!(argmax_labels(&m)[&key(0)], 1);
        assert_eq!((m.extent(0), m.extent(1)), (0, 1));
        m.audit().unwrap();
    }

    #[test]
    fn unknown_instance_rejected() {
        let mut m = map_with(1);
        assert!(matches!(m.increment(key(0), 1), Err(Error::UnknownInstance(1))));
        assert!(m.is_empty());
    }

    #[test]
    fn confidence_values() {
        let mut m = map_with(2);
        m.add_count(key(0), 0, 3).unwrap();
        m.add_count(key(0), 1, 1).unwrap();
        m.increment(key(1), 1).unwrap();
        let c = confidence(&m);
        assert_eq!(c[&key(0)], 0.75);
        assert_eq!(c[&key(1)], 1.0);
        assert!(confidence(&VoxelMap::new(0.04).unwrap()).is_empty());
    }

    #[test]
    fn argmax_tie_breaks_to_smallest_id() {
        let mut m = map_with(8);
        m.add_count(key(0), 7, 2).unwrap();
        m.add_count(key(0), 0, 2).unwrap();
        assert_eq!(argmax_labels(&m)[&key(0)], 0);
    }

    #[test]
    fn merge_moves_mass_and_keeps_totals() {
        let mut m = map_with(2);
        let mut cb = Codebook::new(2);
        cb.insert_new(0, vec![1.0, 0.0], None).unwrap();
        cb.insert_new(1, vec![0.0, 1.0], None).unwrap();
        m.add_count(key(0), 0, 2).unwrap();
        m.add_count(key(0), 1, 1).unwrap();
        m.add_count(key(1), 0, 1).unwrap();
        let before = m.total_count();
        m.merge_instances(&mut cb, 0, 1).unwrap();
        assert_eq!(m.get(&key(0)).unwrap().counts(), &[(1, 3)]);
        assert_eq!(m.total_count(), before);
        assert_eq!(m.extent(1), 2);
        assert!(!m.contains_instance(0));
        assert!(cb.get(0).is_none());
        m.audit().unwrap();
        assert!(matches!(
            m.merge_instances(&mut cb, 1, 1),
            Err(Error::IdenticalInstances(1))
        ));
        assert!(matches!(m.increment(key(0), 0), Err(Error::UnknownInstance(0))));
    }

    proptest! {
        #[test]
        fn theta_matches_histogram(seq in prop::collection::vec((0i32..4, 0u32..5), 1..200)) {
            let mut m = map_with(5);
            let mut hist: std::collections::BTreeMap<(i32, u32), u64> = Default::default();
            for &(k, id) in &seq {
                m.increment(key(k), id).unwrap();
                *hist.entry((k, id)).or_default() += 1;
            }
            prop_assert_eq!(m.total_count(), seq.len() as u64);
            for k in 0..4 {
                let n: u64 = hist.iter().filter(|((kk, _), _)| *kk == k).map(|(_, c)| c).sum();
                match m.get(&key(k)) {
                    None => prop_assert_eq!(n, 0),
                    Some(state) => {
                        let theta = instance_vector(state).unwrap();
                        let sum: f64 = theta.iter().map(|(_, t)| t).sum();
                        prop_assert!((sum - 1.0).abs() < 1e-12);
                        for (id, t) in theta {
                            let c = hist[&(k, id)];
                            prop_assert_eq!(t, c as f64 / n as f64);
                        }
                        // Brute-force argmax over the histogram.
                        let best = (0..5u32)
                            .map(|id| (hist.get(&(k, id)).copied().unwrap_or(0), std::cmp::Reverse(id)))
                            .max().unwrap().1.0;
                        prop_assert_eq!(argmax_labels(&m)[&key(k)], best);
                    }
                }
            }
            prop_assert!(m.audit().is_ok());
        }

        #[test]
        fn agreement_makes_confidence_monotone(seed in prop::collection::vec(0u32..3, 0..20), reps in 1usize..50) {
            let mut m = map_with(3);
            for &id in &seed {
                m.increment(key(0), id).unwrap();
            }
            let mut last = confidence(&m).get(&key(0)).copied().unwrap_or(0.0);
            let mut leading = argmax_labels(&m).get(&key(0)) == Some(&2);
            for _ in 0..reps {
                m.increment(key(0), 2).unwrap();
                let c = confidence(&m)[&key(0)];
                if leading {
                    prop_assert!(c >= last);
                }
                leading = argmax_labels(&m)[&key(0)] == 2;
                last = c;
            }
            for _ in 0..1000 {
                m.increment(key(0), 2).unwrap();
            }
            prop_assert!(confidence(&m)[&key(0)] > 0.95);
        }

        #[test]
        fn merge_extents_match_recount(seq in prop::collection::vec((0i32..6, 0u32..4), 1..100), src in 0u32..4, dst in 0u32..4) {
            prop_assume!(src != dst);
            let mut m = map_with(4);
            let mut cb = Codebook::new(1);
            for id in 0..4 {
                cb.insert_new(id, vec![1.0], None).unwrap();
            }
            for &(k, id) in &seq {
                m.increment(key(k), id).unwrap();
            }
            let sums: Vec<u64> = (0..6).map(|k| m.get(&key(k)).map_or(0, |s| s.total())).collect();
            m.merge_instances(&mut cb, src, dst).unwrap();
            prop_assert!(m.audit().is_ok());
            for k in 0..6 {
                prop_assert_eq!(m.get(&key(k)).map_or(0, |s| s.total()), sums[k as usize]);
                prop_assert_eq!(m.get(&key(k)).map_or(0, |s| s.count(src)), 0);
            }
        }
    }
}
