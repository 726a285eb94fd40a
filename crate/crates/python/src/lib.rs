//! Python bindings: mapping, simulation and evaluation.

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

use voxelox::evaluate::{evaluate_map, GroundTruthMap};
use voxelox::frame_store::{DepthImage, SequenceReader};
use voxelox::query::{export_map, live_codebook, ExportFormat};
use voxelox::simulate::{generate_scene, simulate_frame, write_simulation, SceneConfig};
use voxelox::{
    AssociationConfig, Associator, CandidateScope, Codebook, Error, FrameBundle, MaskObservation,
    PixelMask, RunConfig, VoxelKey, VoxelMap,
};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::UnknownInstance(_) => PyKeyError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for voxelox::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

#[pyclass(name = "Intrinsics", module = "voxelox", from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(voxelox::CameraIntrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        voxelox::CameraIntrinsics::new(fx, fy, cx, cy, width, height)
            .py()
            .map(Self)
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!(
            "Intrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})",
            c.fx, c.fy, c.cx, c.cy, c.width, c.height
        )
    }
}

/// World-from-camera rigid transform.
#[pyclass(name = "Pose", module = "voxelox", from_py_object)]
#[derive(Clone)]
struct PyPose(voxelox::Pose);

#[pymethods]
impl PyPose {
    /// Row-major 4x4 matrix with 16 entries.
    #[new]
    fn new(matrix: [f64; 16]) -> PyResult<Self> {
        voxelox::Pose::from_matrix(&matrix).py().map(Self)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(voxelox::Pose::identity())
    }

    #[staticmethod]
    fn from_translation(t: [f64; 3]) -> Self {
        Self(voxelox::Pose::from_translation(t))
    }

    #[staticmethod]
    fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> PyResult<Self> {
        voxelox::Pose::look_at(eye, target, up).py().map(Self)
    }

    fn matrix(&self) -> Vec<f64> {
        self.0.to_matrix().to_vec()
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(p)
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.0.translation
    }
}

/// One RGB-D observation with its masks and caption embeddings.
#[pyclass(name = "Frame", module = "voxelox", from_py_object)]
#[derive(Clone)]
struct PyFrame(FrameBundle);

#[pymethods]
impl PyFrame {
    /// `depth` is row-major meters, 0 for invalid pixels. Each mask is a list
    /// of row-major pixel indices.
    #[new]
    #[pyo3(signature = (frame_id, depth, pose, intrinsics, masks, features, captions=None, scores=None, allow_overlap=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        frame_id: u64,
        depth: Vec<f64>,
        pose: PyPose,
        intrinsics: PyIntrinsics,
        masks: Vec<Vec<u32>>,
        features: Vec<Vec<f32>>,
        captions: Option<Vec<Option<String>>>,
        scores: Option<Vec<f32>>,
        allow_overlap: bool,
    ) -> PyResult<Self> {
        let n = masks.len();
        if features.len() != n {
            return Err(PyValueError::new_err(format!("{n} masks but {} features", features.len())));
        }
        let captions = captions.unwrap_or_else(|| vec![None; n]);
        let scores = scores.unwrap_or_else(|| vec![1.0; n]);
        if captions.len() != n || scores.len() != n {
            return Err(PyValueError::new_err("captions and scores need one entry per mask"));
        }
        let intr = intrinsics.0;
        let depth = DepthImage::from_meters(intr.width, intr.height, &depth).py()?;
        let masks = masks
            .into_iter()
            .zip(features)
            .zip(captions)
            .zip(scores)
            .map(|(((m, feature), caption), detection_score)| MaskObservation {
                mask: PixelMask::from_pixels(m),
                feature,
                caption,
                detection_score,
            })
            .collect();
        Ok(Self(FrameBundle {
            frame_id,
            depth,
            pose: pose.0,
            intrinsics: intr,
            masks,
            allow_overlap,
        }))
    }

    #[getter]
    fn frame_id(&self) -> u64 {
        self.0.frame_id
    }

    #[getter]
    fn pose(&self) -> PyPose {
        PyPose(self.0.pose)
    }

    #[getter]
    fn intrinsics(&self) -> PyIntrinsics {
        PyIntrinsics(self.0.intrinsics)
    }

    #[getter]
    fn num_masks(&self) -> usize {
        self.0.masks.len()
    }

    /// Depth in meters, row-major.
    fn depth(&self) -> Vec<f64> {
        (0..self.0.depth.data().len())
            .map(|i| self.0.depth.meters_at(i).unwrap_or(0.0))
            .collect()
    }

    fn mask(&self, index: usize) -> PyResult<Vec<u32>> {
        self.0
            .masks
            .get(index)
            .map(|m| m.mask.pixels().collect())
            .ok_or_else(|| PyValueError::new_err(format!("no mask {index}")))
    }

    fn feature(&self, index: usize) -> PyResult<Vec<f32>> {
        self.0
            .masks
            .get(index)
            .map(|m| m.feature.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no mask {index}")))
    }

    fn validate(&self, embedding_dim: Option<usize>) -> PyResult<()> {
        self.0.validate(embedding_dim).py()
    }

    fn __repr__(&self) -> String {
        format!("Frame(id={}, masks={})", self.0.frame_id, self.0.masks.len())
    }
}

#[pyclass(name = "FrameReport", module = "voxelox", get_all)]
struct PyFrameReport {
    frame_id: u64,
    masks_total: usize,
    masks_processed: usize,
    masks_skipped: usize,
    new_instances: usize,
    associated: usize,
    voxel_updates: u64,
    total_count: u64,
    occupied_voxels: usize,
    instances: usize,
}

#[pymethods]
impl PyFrameReport {
    fn __repr__(&self) -> String {
        format!(
            "FrameReport(frame_id={}, masks={}, new={}, associated={})",
            self.frame_id, self.masks_total, self.new_instances, self.associated
        )
    }
}

#[pyclass(name = "Association", module = "voxelox", get_all)]
struct PyAssociation {
    mask_index: usize,
    instance: u32,
    is_new: bool,
    probability: f64,
    s_geo: f64,
    s_fea: f64,
    visibility: f64,
    credibility: f64,
    voxel_count: usize,
}

#[pymethods]
impl PyAssociation {
    fn __repr__(&self) -> String {
        format!(
            "Association(mask={}, instance={}, new={}, p={:.3})",
            self.mask_index, self.instance, self.is_new, self.probability
        )
    }
}

#[pyclass(name = "RenderedMask", module = "voxelox", get_all)]
struct PyRenderedMask {
    width: u32,
    height: u32,
    /// Row-major instance ids; `BACKGROUND` where nothing is known.
    labels: Vec<u32>,
    confidence: Vec<f32>,
}

/// Voxel map plus instance codebook, updated frame by frame.
#[pyclass(name = "Mapper", module = "voxelox")]
struct PyMapper {
    map: VoxelMap,
    codebook: Codebook,
    associator: Associator,
}

fn parse_scope(s: &str) -> PyResult<CandidateScope> {
    match s {
        "voxel-local" => Ok(CandidateScope::VoxelLocal),
        "global" => Ok(CandidateScope::Global),
        _ => Err(PyValueError::new_err(format!("unknown candidate scope {s:?}"))),
    }
}

#[pymethods]
impl PyMapper {
    #[new]
    #[pyo3(signature = (embedding_dim, resolution=0.04, backend="probabilistic", threshold=0.4, geo_weight=0.5, fea_weight=0.5, observed_fraction_floor=0.05, candidate_scope="voxel-local", iou_threshold=0.5))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        embedding_dim: usize,
        resolution: f64,
        backend: &str,
        threshold: f64,
        geo_weight: f64,
        fea_weight: f64,
        observed_fraction_floor: f64,
        candidate_scope: &str,
        iou_threshold: f64,
    ) -> PyResult<Self> {
        let associator = match backend {
            "probabilistic" => {
                let cfg = AssociationConfig {
                    geo_weight,
                    fea_weight,
                    similarity_threshold: threshold,
                    observed_fraction_floor,
                    candidate_scope: parse_scope(candidate_scope)?,
                };
                cfg.validate().py()?;
                Associator::Probabilistic(cfg)
            }
            "iou" => {
                if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
                    return Err(PyValueError::new_err("iou_threshold outside (0, 1]"));
                }
                Associator::IouBaseline { iou_threshold }
            }
            _ => return Err(PyValueError::new_err(format!("unknown backend {backend:?}"))),
        };
        Ok(Self {
            map: VoxelMap::new(resolution).py()?,
            codebook: Codebook::new(embedding_dim),
            associator,
        })
    }

    /// Builds an empty mapper from a TOML run configuration.
    #[staticmethod]
    fn from_config(path: &str, embedding_dim: usize) -> PyResult<Self> {
        let cfg = RunConfig::load(path).py()?;
        Ok(Self {
            map: VoxelMap::new(cfg.resolution).py()?,
            codebook: Codebook::new(embedding_dim),
            associator: cfg.associator(),
        })
    }

    /// Loads a snapshot directory with the default association settings.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let (map, codebook) = voxelox::load_snapshot(dir).py()?;
        Ok(Self {
            map,
            codebook,
            associator: Associator::default(),
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        voxelox::save_snapshot(dir, &self.map, &self.codebook).py()
    }

    #[getter]
    fn backend(&self) -> &'static str {
        match self.associator {
            Associator::Probabilistic(_) => "probabilistic",
            Associator::IouBaseline { .. } => "iou",
        }
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.map.resolution()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.codebook.dim()
    }

    #[getter]
    fn num_voxels(&self) -> usize {
        self.map.len()
    }

    #[getter]
    fn num_instances(&self) -> usize {
        self.codebook.len()
    }

    #[getter]
    fn total_count(&self) -> u64 {
        self.map.total_count()
    }

    /// Associates, updates the voxels and fuses the codebook. A rejected
    /// frame leaves the mapper unchanged.
    fn integrate(&mut self, frame: &PyFrame) -> PyResult<PyFrameReport> {
        let (r, _) =
            voxelox::integrate_frame(&mut self.map, &mut self.codebook, &frame.0, &self.associator)
                .py()?;
        Ok(PyFrameReport {
            frame_id: r.frame_id,
            masks_total: r.masks_total,
            masks_processed: r.masks_processed,
            masks_skipped: r.masks_skipped,
            new_instances: r.new_instances,
            associated: r.associated,
            voxel_updates: r.voxel_updates,
            total_count: r.total_count,
            occupied_voxels: r.occupied_voxels,
            instances: r.instances,
        })
    }

    /// Association decisions for `frame` without changing the map.
    fn associate(&self, frame: &PyFrame) -> PyResult<Vec<PyAssociation>> {
        frame.0.validate(Some(self.codebook.dim())).py()?;
        let r = self.associator.associate(&frame.0, &self.map, &self.codebook).py()?;
        Ok(r.masks
            .iter()
            .map(|m| PyAssociation {
                mask_index: m.mask_index,
                instance: m.instance,
                is_new: m.is_new,
                probability: m.probability,
                s_geo: m.s_geo,
                s_fea: m.s_fea,
                visibility: m.visibility,
                credibility: m.credibility(),
                voxel_count: m.voxels.len(),
            })
            .collect())
    }

    /// Instance ids with their counts in the voxel at `key`.
    fn voxel_counts(&self, key: (i32, i32, i32)) -> Vec<(u32, u32)> {
        self.map
            .get(&VoxelKey::new(key.0, key.1, key.2))
            .map(|s| s.counts().to_vec())
            .unwrap_or_default()
    }

    /// Posterior mean probability of `instance` at `key`.
    fn theta(&self, key: (i32, i32, i32), instance: u32) -> PyResult<f64> {
        self.map
            .get(&VoxelKey::new(key.0, key.1, key.2))
            .map(|s| s.theta(instance))
            .ok_or_else(|| PyKeyError::new_err(format!("voxel {key:?} unobserved")))
    }

    /// Voxel key containing a world point.
    fn voxel_of(&self, point: [f64; 3]) -> (i32, i32, i32) {
        let k = voxelox::voxelize(point, self.map.resolution());
        (k.ix, k.iy, k.iz)
    }

    /// Number of voxels whose argmax is `instance`.
    fn extent(&self, instance: u32) -> u64 {
        self.map.extent(instance)
    }

    /// Instances owning at least one voxel.
    fn live_instances(&self) -> Vec<u32> {
        self.map
            .instance_ids()
            .filter(|&i| self.map.extent(i) > 0)
            .collect()
    }

    fn instance_voxels(&self, instance: u32) -> Vec<(i32, i32, i32)> {
        let mut keys: Vec<_> = self
            .map
            .cells()
            .filter(|(_, s)| s.argmax().map(|a| a.0) == Some(instance))
            .map(|(k, _)| (k.ix, k.iy, k.iz))
            .collect();
        keys.sort();
        keys
    }

    fn embedding(&self, instance: u32) -> PyResult<Vec<f64>> {
        self.codebook
            .get(instance)
            .map(|r| r.embedding.clone())
            .ok_or(Error::UnknownInstance(instance))
            .py()
    }

    fn caption(&self, instance: u32) -> PyResult<Option<String>> {
        self.codebook
            .get(instance)
            .map(|r| r.caption.clone())
            .ok_or(Error::UnknownInstance(instance))
            .py()
    }

    /// Top-`k` `(instance, score)` pairs by cosine similarity.
    #[pyo3(signature = (query, k=5, live_only=true))]
    fn retrieve(&self, query: Vec<f64>, k: usize, live_only: bool) -> PyResult<Vec<(u32, f64)>> {
        let hits = if live_only {
            voxelox::retrieve(&live_codebook(&self.map, &self.codebook), &query, k)
        } else {
            voxelox::retrieve(&self.codebook, &query, k)
        }
        .py()?;
        Ok(hits.into_iter().map(|h| (h.instance, h.score)).collect())
    }

    /// Per-pixel instance ids seen from `pose`, using `depth` in meters.
    fn render(&self, intrinsics: &PyIntrinsics, pose: &PyPose, depth: Vec<f64>) -> PyResult<PyRenderedMask> {
        let i = intrinsics.0;
        let depth = DepthImage::from_meters(i.width, i.height, &depth).py()?;
        let r = voxelox::render_mask(&self.map, &i, &pose.0, &depth);
        Ok(PyRenderedMask {
            width: r.width,
            height: r.height,
            labels: r.labels,
            confidence: r.confidence,
        })
    }

    /// Writes `pointlist` (PLY + codebook) or `labeled-voxels` files into `dir`.
    #[pyo3(signature = (dir, format="pointlist"))]
    fn export(&self, dir: &str, format: &str) -> PyResult<()> {
        let format = match format {
            "pointlist" => ExportFormat::Pointlist,
            "labeled-voxels" => ExportFormat::LabeledVoxels,
            _ => return Err(PyValueError::new_err(format!("unknown format {format:?}"))),
        };
        export_map(&self.map, &self.codebook, dir, format).py()
    }

    /// Checks the cached extents against a full recount.
    fn audit(&self) -> PyResult<()> {
        self.map.audit().map_err(PyValueError::new_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mapper(backend={}, voxels={}, instances={})",
            self.backend(),
            self.map.len(),
            self.codebook.len()
        )
    }
}

#[pyclass(name = "Noise", module = "voxelox", from_py_object)]
#[derive(Clone)]
struct PyNoise(voxelox::NoiseConfig);

#[pymethods]
impl PyNoise {
    #[new]
    #[pyo3(signature = (p_drop=0.0, p_split=0.0, p_merge=0.0, boundary_jitter=0, embedding_noise_sigma=0.0, depth_noise_sigma=0.0, seed=0))]
    fn new(
        p_drop: f64,
        p_split: f64,
        p_merge: f64,
        boundary_jitter: u32,
        embedding_noise_sigma: f64,
        depth_noise_sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = voxelox::NoiseConfig {
            p_drop,
            p_split,
            p_merge,
            boundary_jitter,
            embedding_noise_sigma,
            depth_noise_sigma,
            seed,
        };
        cfg.validate().py()?;
        Ok(Self(cfg))
    }
}

/// Synthetic scene with objects, class embeddings and a camera orbit.
#[pyclass(name = "Scene", module = "voxelox")]
struct PyScene(voxelox::SyntheticScene);

#[pymethods]
impl PyScene {
    #[staticmethod]
    #[pyo3(signature = (seed, objects=6, frames=60, embedding_dim=16, width=320, height=240))]
    fn generate(
        seed: u64,
        objects: usize,
        frames: usize,
        embedding_dim: usize,
        width: u32,
        height: u32,
    ) -> PyResult<Self> {
        let cfg = SceneConfig {
            objects,
            frames,
            embedding_dim,
            width,
            height,
            ..Default::default()
        };
        generate_scene(seed, &cfg).py().map(Self)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        voxelox::SyntheticScene::load(path).py().map(Self)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).py()
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.0.trajectory.len()
    }

    #[getter]
    fn num_objects(&self) -> usize {
        self.0.objects.len()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.0.embedding_dim()
    }

    /// Class of each object, indexed by ground-truth instance.
    fn object_classes(&self) -> Vec<u32> {
        self.0.objects.iter().map(|o| o.class).collect()
    }

    fn class_embedding(&self, class: u32) -> PyResult<Vec<f64>> {
        self.0
            .class_embedding(class)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| PyKeyError::new_err(format!("no class {class}")))
    }

    /// Frame `index` of the trajectory, perturbed by `noise` when given.
    #[pyo3(signature = (index, noise=None))]
    fn frame(&self, index: usize, noise: Option<PyNoise>) -> PyResult<PyFrame> {
        if index >= self.0.trajectory.len() {
            return Err(PyValueError::new_err(format!("frame {index} out of range")));
        }
        let noise = noise.map(|n| n.0).unwrap_or_default();
        Ok(PyFrame(simulate_frame(&self.0, &noise, index).noisy))
    }

    /// Ground-truth instance id per pixel of frame `index`.
    fn ground_truth_labels(&self, index: usize) -> PyResult<Vec<u32>> {
        if index >= self.0.trajectory.len() {
            return Err(PyValueError::new_err(format!("frame {index} out of range")));
        }
        Ok(simulate_frame(&self.0, &Default::default(), index).gt.labels)
    }

    /// Writes a sequence directory with ground truth.
    #[pyo3(signature = (dir, noise=None, resolution=0.04))]
    fn write_sequence(&self, dir: &str, noise: Option<PyNoise>, resolution: f64) -> PyResult<()> {
        let noise = noise.map(|n| n.0).unwrap_or_default();
        write_simulation(dir, &self.0, &noise, resolution).py().map(|_| ())
    }
}

#[pyclass(name = "EvalReport", module = "voxelox")]
struct PyEvalReport(voxelox::EvalReport);

#[pymethods]
impl PyEvalReport {
    #[getter]
    fn ap(&self) -> f64 {
        self.0.ap
    }

    #[getter]
    fn ap50(&self) -> f64 {
        self.0.ap50
    }

    #[getter]
    fn ap25(&self) -> f64 {
        self.0.ap25
    }

    #[getter]
    fn miou(&self) -> f64 {
        self.0.miou
    }

    #[getter]
    fn macc(&self) -> f64 {
        self.0.macc
    }

    #[getter]
    fn predicted_instances(&self) -> usize {
        self.0.predicted_instances
    }

    #[getter]
    fn gt_instances(&self) -> usize {
        self.0.gt_instances
    }

    /// `(kind, recall@1, recall@2, recall@3)` per query kind.
    #[getter]
    fn recall(&self) -> Vec<(String, f64, f64, f64)> {
        self.0
            .recall
            .iter()
            .map(|r| (r.kind.clone(), r.at1, r.at2, r.at3))
            .collect()
    }

    fn table(&self) -> String {
        self.0.table()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("report serializes")
    }
}

/// Scores a mapper against the scene's rendered-surface ground truth.
#[pyfunction]
#[pyo3(signature = (mapper, scene, query_noise_sigma=0.2, seed=0))]
fn evaluate(mapper: &PyMapper, scene: &PyScene, query_noise_sigma: f64, seed: u64) -> PyResult<PyEvalReport> {
    let gt = GroundTruthMap::from_rendered_surfaces(&scene.0, mapper.map.resolution()).py()?;
    let opts = voxelox::evaluate::EvalOptions {
        query_noise_sigma,
        seed,
        ..Default::default()
    };
    evaluate_map(&mapper.map, &mapper.codebook, &scene.0, &gt, &opts)
        .py()
        .map(PyEvalReport)
}

/// All frames of a sequence directory, in order.
#[pyfunction]
fn read_sequence(dir: &str) -> PyResult<Vec<PyFrame>> {
    let reader = SequenceReader::open(dir).py()?;
    reader.frames().map(|f| f.py().map(PyFrame)).collect()
}

/// Default configuration as TOML text.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

#[pymodule]
#[pyo3(name = "voxelox")]
fn voxelox_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BACKGROUND", voxelox::query::BACKGROUND)?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyFrameReport>()?;
    m.add_class::<PyAssociation>()?;
    m.add_class::<PyRenderedMask>()?;
    m.add_class::<PyMapper>()?;
    m.add_class::<PyNoise>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(read_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
