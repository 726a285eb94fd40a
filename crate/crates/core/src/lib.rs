//! Incremental instance-level voxel mapping.
//!
//! Each occupied voxel keeps Dirichlet counts over the instance ids observed
//! in it; per-frame 2D masks are lifted to voxels, associated to existing
//! instances by fused geometric/feature similarity, and folded into the
//! counts and into a per-instance embedding codebook. The crate also ships a
//! ray-cast scene simulator and the evaluation harness used to test all of
//! the above.

pub mod association;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod evolution;
pub mod frame_store;
pub mod geometry;
pub mod query;
pub mod simulate;
pub mod snapshot;
pub mod voxel_map;

pub use association::{
    associate_frame, baseline_associate_iou, AssociationConfig, AssociationResult, Associator,
    CandidateScope, MaskAssociation,
};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use evaluate::{evaluate_map, EvalReport, GroundTruthMap};
pub use evolution::{integrate_frame, Codebook, CodebookRecord, FrameReport};
pub use frame_store::{
    DepthImage, FrameBundle, MaskObservation, PixelMask, SequenceReader, SequenceWriter,
};
pub use geometry::{back_project, voxelize, CameraIntrinsics, Pose, Vec3, VoxelKey};
pub use query::{render_mask, retrieve, RenderedMask, RetrievalHit};
pub use simulate::{generate_scene, perturb, NoiseConfig, SceneConfig, SyntheticScene};
pub use snapshot::{load_snapshot, save_snapshot};
pub use voxel_map::{InstanceId, VoxelMap, VoxelState};
