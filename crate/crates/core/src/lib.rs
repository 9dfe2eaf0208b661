//! Progressive spatio-temporal action detection.
//!
//! A clip starts from a fixed set of cuboid proposals. Each step optionally
//! extends the proposals in time, refines them with a per-step model, and
//! replaces them with the decoded boxes of the most likely action class.
//! Per-clip results are linked into video-level tubes and scored with
//! frame- and video-level average precision.

pub mod engine;
pub mod error;
pub mod geometry;
pub mod linking;
pub mod metrics;
pub mod model;
pub mod proposals;
pub mod simulator;
pub mod training;

pub use engine::{
    detect_clip, detect_video, ClipContext, ClipDetection, ClipResult, ExtensionMode, StepConfig,
    StepRecord,
};
pub use error::{Result, StepError};
pub use geometry::{box_iou, decode, encode, tubelet_overlap, BBox, FrameRange, ImageBounds, Offset, Tubelet};
pub use linking::{link_tubes, temporal_trim, ActionTube, LinkCandidate};
pub use metrics::{frame_map, video_map, ApReport, FrameDetection, FrameGroundTruth};
pub use model::{Checkpoint, Detection, LinearHead, LinearModel, OracleModel, RefinementModel};
pub use proposals::{generate_pyramid, replicate_to_cuboids, PyramidSpec};
pub use simulator::{generate_scene, Scene, SceneSpec};
pub use training::{joint_train_pass, LossBreakdown, TrainSettings};
