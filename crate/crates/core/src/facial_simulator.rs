//! Bony plan → simulated face.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acmt::{AcmtModel, AcmtSample, Direction, MovementField};
use crate::bony_planner::{network_bone_indices, PlanningCase};
use crate::error::{invalid, Result};
use crate::geom::{idw_weights, nearest_k, BonyPlan, Mesh, PointSet, SegmentedBone, Vec3};
use crate::phantom::tissue_oracle;

/// Moves every bone point by its segment's transform. Cranium stays put.
pub fn apply_plan(bone: &SegmentedBone, plan: &BonyPlan) -> Result<PointSet> {
    plan.validate_for(bone)?;
    let mut coords = bone.points.coords.clone();
    let mut normals = bone.points.normals.clone();
    for (i, label) in bone.labels.iter().enumerate() {
        if !label.is_movable() {
            continue;
        }
        let t = plan
            .get(*label)
            .ok_or_else(|| invalid(format!("plan has no transform for segment {label}")))?;
        coords[i] = t.apply_point(&coords[i]);
        if let Some(n) = normals.as_mut() {
            n[i] = t.apply_vector(&n[i]);
        }
    }
    Ok(PointSet { coords, normals })
}

/// Number of sampled face points each mesh vertex interpolates from.
pub const INTERP_NEIGHBOURS: usize = 3;

/// Inverse-distance weighted 3-NN interpolation of `vectors` (given at
/// `samples`) onto `vertices`.
pub fn interpolate_movement(samples: &[Vec3], vectors: &[Vec3], vertices: &[Vec3]) -> Result<Vec<Vec3>> {
    if samples.len() != vectors.len() {
        return Err(invalid("sample and movement counts differ"));
    }
    if samples.is_empty() {
        return Err(invalid("no samples to interpolate from"));
    }
    Ok(vertices
        .par_iter()
        .map(|v| {
            let nn = nearest_k(samples, v, INTERP_NEIGHBOURS);
            idw_weights(&nn)
                .into_iter()
                .fold(Vec3::zeros(), |acc, (j, w)| acc + vectors[j] * w)
        })
        .collect())
}

/// A bone → face movement model.
pub trait FaceSimulator: Sync {
    /// Movement of each `case.pre_face` point for the moved bone.
    fn face_movement(&self, case: &PlanningCase, post_bone: &PointSet) -> Result<Vec<Vec3>>;

    /// Movement of every face-mesh vertex. Defaults to interpolating the
    /// sampled movement.
    fn mesh_movement(&self, case: &PlanningCase, _post_bone: &PointSet, sampled: &[Vec3]) -> Result<Vec<Vec3>> {
        interpolate_movement(&case.pre_face.coords, sampled, &case.face_mesh.vertices)
    }
}

impl FaceSimulator for AcmtModel {
    fn face_movement(&self, case: &PlanningCase, post_bone: &PointSet) -> Result<Vec<Vec3>> {
        if self.direction != Direction::BoneToFace {
            return Err(invalid("facial simulator needs a bone-to-face model"));
        }
        let idx = network_bone_indices(&case.pre_bone, self.config.cranium_context);
        let source = case.pre_bone.points.select(&idx);
        let driver: Vec<Vec3> = idx
            .iter()
            .map(|&i| post_bone.coords[i] - case.pre_bone.points.coords[i])
            .collect();
        let input = self.prepare(&source, &case.pre_face, &driver)?;
        self.predict(&input)
    }
}

/// The synthetic soft-tissue model used as a simulator. It is exact on
/// phantom cases, so plan selection can be tested without model error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueOracleSimulator {
    pub sigma: f64,
}

impl FaceSimulator for TissueOracleSimulator {
    fn face_movement(&self, case: &PlanningCase, post_bone: &PointSet) -> Result<Vec<Vec3>> {
        Ok(tissue_oracle(&case.pre_bone.points, post_bone, &case.pre_face, self.sigma)?.vectors)
    }

    fn mesh_movement(&self, case: &PlanningCase, post_bone: &PointSet, _sampled: &[Vec3]) -> Result<Vec<Vec3>> {
        let vertices = PointSet::new(case.face_mesh.vertices.clone())?;
        Ok(tissue_oracle(&case.pre_bone.points, post_bone, &vertices, self.sigma)?.vectors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    /// Pre-operative mesh with every vertex moved; triangles untouched.
    pub mesh: Mesh,
    /// Predicted movement of the sampled face points.
    pub movement: MovementField,
}

impl Simulation {
    /// The simulated positions of the sampled face points.
    pub fn sampled_face(&self) -> PointSet {
        self.movement.moved()
    }
}

pub fn simulate<S: FaceSimulator + ?Sized>(fs: &S, case: &PlanningCase, plan: &BonyPlan) -> Result<Simulation> {
    let post = apply_plan(&case.pre_bone, plan)?;
    simulate_from_bone(fs, case, &post)
}

pub fn simulate_from_bone<S: FaceSimulator + ?Sized>(fs: &S, case: &PlanningCase, post_bone: &PointSet) -> Result<Simulation> {
    case.face_mesh.validate()?;
    if post_bone.len() != case.pre_bone.len() {
        return Err(invalid("moved bone is not corresponded with the case bone"));
    }
    let sampled = fs.face_movement(case, post_bone)?;
    let vertex_moves = fs.mesh_movement(case, post_bone, &sampled)?;
    let mesh = Mesh {
        vertices: case
            .face_mesh
            .vertices
            .iter()
            .zip(&vertex_moves)
            .map(|(p, v)| p + v)
            .collect(),
        triangles: case.face_mesh.triangles.clone(),
    };
    Ok(Simulation {
        mesh,
        movement: MovementField::new(case.pre_face.clone(), sampled)?,
    })
}

/// Training pair for the bone → face network.
pub fn training_sample(case: &PlanningCase, post_bone: &PointSet, cranium_context: bool) -> Result<AcmtSample> {
    let idx = network_bone_indices(&case.pre_bone, cranium_context);
    Ok(AcmtSample {
        source_points: case.pre_bone.points.select(&idx),
        target_points: case.pre_face.clone(),
        source_movement: idx
            .iter()
            .map(|&i| post_bone.coords[i] - case.pre_bone.points.coords[i])
            .collect(),
        target_movement: case.desired_face_movement(),
    })
}
