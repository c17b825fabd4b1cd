//! Synthetic environments, sensor models and datasets standing in for a
//! real robot.

pub mod dataset;
pub mod env;
pub mod sensors;

pub use dataset::{
    frame_rng, generate_dataset, line_trajectory, loop_trajectory, trajectory_preset, Dataset, DatasetMeta, PoseNoise, SensorFrame,
    StackFrame, TimedPose, SCENE_MARGIN,
};
pub use env::{Environment, Hit, Polygon, Segment, Surface};
pub use sensors::{
    irs_directions, sense_camera, sense_depth, sense_irs, sense_lidar, sense_uss, uss_fan, CameraConfig, DepthCameraConfig, Image, IrsConfig,
    IrsZone, LidarConfig, LidarReturn, Pinhole, PlanarPose, RigConfig, SensorPose, StackMount, UssConfig,
};
