//! JSON-lines export of scenes: one record per frame.

use serde::{Deserialize, Serialize};

use super::observe::ObservedScene;
use super::scene::Scene;
use crate::geometry::ANCHOR_DIM;
use crate::motion::MotionModelKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// row-major 3×3
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: usize,
    /// ground truth in this frame's ego coordinates
    pub gt: [f64; ANCHOR_DIM],
    pub observed: [f64; ANCHOR_DIM],
    pub regime: MotionModelKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub scene: usize,
    pub seed: u64,
    pub frame: usize,
    pub dt: f64,
    /// ego frame → world
    pub ego_pose: PoseRecord,
    pub objects: Vec<ObjectRecord>,
}

pub fn scene_records(index: usize, scene: &Scene, observed: &ObservedScene) -> Vec<FrameRecord> {
    (0..scene.frames())
        .map(|k| FrameRecord {
            scene: index,
            seed: scene.seed,
            frame: k,
            dt: scene.dt,
            ego_pose: PoseRecord {
                rotation: scene.poses[k].rotation_row_major(),
                translation: scene.poses[k].translation.into(),
            },
            objects: scene
                .tracks
                .iter()
                .enumerate()
                .map(|(i, tr)| ObjectRecord {
                    id: tr.id,
                    gt: scene.gt_in_frame(i, k).to_array(),
                    observed: observed.anchors[k][i].to_array(),
                    regime: tr.regimes[k],
                })
                .collect(),
        })
        .collect()
}
