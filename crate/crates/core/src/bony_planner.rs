//! Desired face → non-rigid bony movement → per-segment rigid plan.

use serde::{Deserialize, Serialize};

use crate::acmt::{AcmtModel, AcmtSample, Direction};
use crate::error::{invalid, Error, Result};
use crate::geom::{fit_rigid_coords, BonyPlan, Mesh, PointSet, SegmentedBone, Vec3};

/// Everything needed to plan one patient. Faces are corresponded point by
/// point; `face_mesh` is the full pre-operative face used for display and
/// interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningCase {
    pub pre_face: PointSet,
    pub pre_bone: SegmentedBone,
    pub desired_face: PointSet,
    pub face_mesh: Mesh,
    /// Post-operative bone corresponded with `pre_bone`, when it is known
    /// (synthetic cases). Never read by the learned models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_post_bone: Option<PointSet>,
}

impl PlanningCase {
    pub fn validate(&self) -> Result<()> {
        self.pre_face.validate()?;
        self.desired_face.validate()?;
        self.pre_bone.validate()?;
        self.face_mesh.validate()?;
        if self.desired_face.len() != self.pre_face.len() {
            return Err(invalid(format!(
                "desired face has {} points, pre-operative face {}",
                self.desired_face.len(),
                self.pre_face.len()
            )));
        }
        if let Some(post) = &self.reference_post_bone {
            post.validate()?;
            if post.len() != self.pre_bone.len() {
                return Err(invalid("reference post-operative bone is not corresponded with the bone"));
            }
        }
        Ok(())
    }

    pub fn desired_face_movement(&self) -> Vec<Vec3> {
        self.pre_face
            .coords
            .iter()
            .zip(&self.desired_face.coords)
            .map(|(a, b)| b - a)
            .collect()
    }
}

/// Indices of the bone points the networks see.
pub fn network_bone_indices(bone: &SegmentedBone, cranium_context: bool) -> Vec<usize> {
    if cranium_context {
        (0..bone.len()).collect()
    } else {
        bone.movable_indices()
    }
}

/// Anything that can estimate the non-rigidly moved bone for a case.
pub trait BonePredictor: Sync {
    fn predict_bone(&self, case: &PlanningCase) -> Result<PointSet>;
}

impl BonePredictor for AcmtModel {
    fn predict_bone(&self, case: &PlanningCase) -> Result<PointSet> {
        predict_nonrigid(self, case)
    }
}

/// Plans from the case's known post-operative bone. Commutes with any rigid
/// or mirror change of frame, which makes it a clean reference for testing
/// the search loop.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePlanner;

impl BonePredictor for OraclePlanner {
    fn predict_bone(&self, case: &PlanningCase) -> Result<PointSet> {
        case.reference_post_bone
            .clone()
            .ok_or_else(|| invalid("case carries no reference post-operative bone"))
    }
}

pub fn predict_nonrigid(bp_model: &AcmtModel, case: &PlanningCase) -> Result<PointSet> {
    if bp_model.direction != Direction::FaceToBone {
        return Err(invalid("bony planner needs a face-to-bone model"));
    }
    case.validate()?;
    let idx = network_bone_indices(&case.pre_bone, bp_model.config.cranium_context);
    let target = case.pre_bone.points.select(&idx);
    let input = bp_model.prepare(&case.pre_face, &target, &case.desired_face_movement())?;
    let moved = bp_model.predict(&input)?;
    let mut vectors = vec![Vec3::zeros(); case.pre_bone.len()];
    for (&i, v) in idx.iter().zip(moved) {
        vectors[i] = v;
    }
    case.pre_bone.points.displaced(&vectors)
}

/// Per-segment least-squares rigid fit from `pre` to the corresponded `pdt`.
pub fn regress_plan(pre: &SegmentedBone, pdt: &PointSet) -> Result<BonyPlan> {
    if pdt.len() != pre.len() {
        return Err(invalid(format!(
            "predicted bone has {} points, pre-operative bone {}",
            pdt.len(),
            pre.len()
        )));
    }
    let mut plan = BonyPlan::new();
    for seg in pre.movable_segments() {
        let idx = pre.indices_of(seg);
        let src: Vec<Vec3> = idx.iter().map(|&i| pre.points.coords[i]).collect();
        let dst: Vec<Vec3> = idx.iter().map(|&i| pdt.coords[i]).collect();
        let t = fit_rigid_coords(&src, &dst).map_err(|e| match e {
            Error::DegenerateGeometry(reason) => Error::DegenerateSegment { segment: seg, reason },
            other => other,
        })?;
        plan.insert(seg, t)?;
    }
    Ok(plan)
}

pub fn plan_case<P: BonePredictor + ?Sized>(predictor: &P, case: &PlanningCase) -> Result<BonyPlan> {
    let pdt = predictor.predict_bone(case)?;
    regress_plan(&case.pre_bone, &pdt)
}

/// Training pair for the face → bone network. `post_bone` is the
/// ground-truth post-operative bone.
pub fn training_sample(case: &PlanningCase, post_bone: &PointSet, cranium_context: bool) -> Result<AcmtSample> {
    let idx = network_bone_indices(&case.pre_bone, cranium_context);
    let target = case.pre_bone.points.select(&idx);
    let target_movement = idx
        .iter()
        .map(|&i| post_bone.coords[i] - case.pre_bone.points.coords[i])
        .collect();
    Ok(AcmtSample {
        source_points: case.pre_face.clone(),
        target_points: target,
        source_movement: case.desired_face_movement(),
        target_movement,
    })
}
