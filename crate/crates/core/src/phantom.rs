//! Synthetic jaw/face cases with a known plan.
//!
//! Frame: x lateral (patient left positive), y anterior, z superior, mm.
//! Bone segments and the cranium are patches of ellipsoids; the face is a
//! larger ellipsoid shell in front of them. A Gaussian-weighted average of
//! bone displacements stands in for soft-tissue mechanics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acmt::{AcmtSample, MovementField};
use crate::bony_planner::{self, PlanningCase};
use crate::error::{invalid, Error, Result};
use crate::facial_simulator::{self, apply_plan};
use crate::geom::{
    farthest_point_sample_coords, BonyPlan, Mesh, PointSet, RigidTransform, SegmentLabel, SegmentedBone, Vec3,
};
use crate::plan_search::{perturb_case, perturb_plan, random_perturbation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub points_per_segment: usize,
    pub cranium_points: usize,
    pub face_points: usize,
    /// The face mesh is a `face_grid × face_grid` vertex grid.
    pub face_grid: usize,
    pub sigma_mm: f64,
    pub max_rotation_deg: f64,
    /// Cap on the displacement of a segment's centroid.
    pub max_translation_mm: f64,
    /// Radius of the random part of each segment's centroid displacement.
    pub translation_spread_mm: f64,
    /// Multiplier on the typical advancement each segment receives.
    pub advancement_scale: f64,
    /// Relative per-case jitter of the ellipsoid radii.
    pub shape_jitter: f64,
    pub center_jitter_mm: f64,
    /// Extra flipped/translated copies per training case when augmenting.
    pub augment_copies: usize,
    pub augment_translation_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            points_per_segment: 1024,
            cranium_points: 1024,
            face_points: 4096,
            face_grid: 72,
            sigma_mm: 15.0,
            max_rotation_deg: 10.0,
            max_translation_mm: 8.0,
            translation_spread_mm: 3.0,
            advancement_scale: 1.0,
            shape_jitter: 0.08,
            center_jitter_mm: 2.0,
            augment_copies: 1,
            augment_translation_mm: 10.0,
        }
    }
}

impl PhantomSpec {
    /// Small clouds for quick experiments: 256 face points, 64 per segment.
    pub fn desk() -> Self {
        Self {
            points_per_segment: 64,
            cranium_points: 64,
            face_points: 256,
            face_grid: 24,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_mm > 0.0) {
            return Err(invalid("tissue kernel width must be positive"));
        }
        if self.points_per_segment < 4 || self.cranium_points < 1 {
            return Err(invalid("each movable segment needs at least 4 points"));
        }
        if self.face_grid < 2 || self.face_points < 1 || self.face_points > self.face_grid * self.face_grid {
            return Err(invalid("face points must fit on the face grid"));
        }
        let finite_nonneg = [
            self.max_rotation_deg,
            self.max_translation_mm,
            self.translation_spread_mm,
            self.advancement_scale,
            self.shape_jitter,
            self.center_jitter_mm,
            self.augment_translation_mm,
        ];
        if finite_nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("magnitudes must be finite and non-negative"));
        }
        if self.shape_jitter >= 0.5 || self.augment_translation_mm > crate::plan_search::MAX_PERTURBATION_MM {
            return Err(invalid("shape jitter or augmentation translation out of range"));
        }
        Ok(())
    }
}

/// Facial movement as the Gaussian-weighted mean of the bone displacements,
/// `w = exp(-|f - b|² / σ²)` against the pre-operative bone.
pub fn tissue_oracle(pre_bone: &PointSet, post_bone: &PointSet, face: &PointSet, sigma: f64) -> Result<MovementField> {
    if !(sigma > 0.0) {
        return Err(invalid("tissue kernel width must be positive"));
    }
    let disp = pre_bone.displacement_to(post_bone)?;
    let inv_s2 = 1.0 / (sigma * sigma);
    let vectors = face
        .coords
        .par_iter()
        .map(|f| {
            let mut acc = Vec3::zeros();
            let mut total = 0.0;
            for (b, d) in pre_bone.coords.iter().zip(&disp) {
                let w = (-(f - b).norm_squared() * inv_s2).exp();
                acc += d * w;
                total += w;
            }
            if total > 0.0 {
                acc / total
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    MovementField::new(face.clone(), vectors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Patch {
    center: [f64; 3],
    radii: [f64; 3],
    /// Azimuth range in degrees, measured from +x toward +y.
    azimuth: [f64; 2],
    elevation: [f64; 2],
}

impl Patch {
    fn point(&self, az: f64, el: f64) -> (Vec3, Vec3) {
        let (a, e) = (az.to_radians(), el.to_radians());
        let u = Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
        let r = Vec3::from(self.radii);
        let p = Vec3::from(self.center) + u.component_mul(&r);
        let n = u.component_div(&r).normalize();
        (p, n)
    }

    fn jittered(&self, spec: &PhantomSpec, rng: &mut impl Rng) -> Patch {
        let mut out = *self;
        for k in 0..3 {
            out.radii[k] *= 1.0 + spec.shape_jitter * rng.random_range(-1.0..=1.0);
            out.center[k] += spec.center_jitter_mm * rng.random_range(-1.0..=1.0);
        }
        out
    }

    fn sample(&self, k: usize, rng: &mut impl Rng) -> Result<PointSet> {
        let dense = (4 * k).max(32);
        let mut coords = Vec::with_capacity(dense);
        let mut normals = Vec::with_capacity(dense);
        for _ in 0..dense {
            let az = rng.random_range(self.azimuth[0]..=self.azimuth[1]);
            let el = rng.random_range(self.elevation[0]..=self.elevation[1]);
            let (p, n) = self.point(az, el);
            coords.push(p);
            normals.push(n);
        }
        let idx = farthest_point_sample_coords(&coords, k, 0)?;
        Ok(PointSet::with_normals(coords, normals)?.select(&idx))
    }
}

fn template_segments() -> [(SegmentLabel, Patch); 5] {
    let front = [20.0, 160.0];
    [
        (
            SegmentLabel::LeFort,
            Patch {
                center: [0.0, 22.0, 5.0],
                radii: [30.0, 15.0, 9.0],
                azimuth: front,
                elevation: [-60.0, 60.0],
            },
        ),
        (
            SegmentLabel::Distal,
            Patch {
                center: [0.0, 20.0, -35.0],
                radii: [30.0, 16.0, 12.0],
                azimuth: front,
                elevation: [-70.0, 60.0],
            },
        ),
        (
            SegmentLabel::RightProximal,
            Patch {
                center: [-42.0, -5.0, -15.0],
                radii: [8.0, 14.0, 24.0],
                azimuth: [0.0, 360.0],
                elevation: [-60.0, 60.0],
            },
        ),
        (
            SegmentLabel::LeftProximal,
            Patch {
                center: [42.0, -5.0, -15.0],
                radii: [8.0, 14.0, 24.0],
                azimuth: [0.0, 360.0],
                elevation: [-60.0, 60.0],
            },
        ),
        (
            SegmentLabel::Cranium,
            Patch {
                center: [0.0, -10.0, 45.0],
                radii: [65.0, 75.0, 55.0],
                azimuth: [0.0, 360.0],
                elevation: [0.0, 80.0],
            },
        ),
    ]
}

const FACE: Patch = Patch {
    center: [0.0, 0.0, 0.0],
    radii: [62.0, 52.0, 100.0],
    azimuth: [-20.0, 200.0],
    elevation: [-40.0, 25.0],
};

/// Typical centroid displacement per segment before the random part.
fn advancement(label: SegmentLabel) -> Vec3 {
    match label {
        SegmentLabel::LeFort => Vec3::new(0.0, 4.0, 1.0),
        SegmentLabel::Distal => Vec3::new(0.0, 4.5, -1.0),
        SegmentLabel::RightProximal | SegmentLabel::LeftProximal => Vec3::new(0.0, 1.5, 0.5),
        SegmentLabel::Cranium => Vec3::zeros(),
    }
}

fn unit_ball(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v;
        }
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = unit_ball(rng);
        let n = v.norm();
        if n > 1e-3 {
            return v / n;
        }
    }
}

fn face_mesh(patch: &Patch, grid: usize) -> (Mesh, Vec<Vec3>) {
    let mut vertices = Vec::with_capacity(grid * grid);
    let mut normals = Vec::with_capacity(grid * grid);
    let step = |range: [f64; 2], i: usize| range[0] + (range[1] - range[0]) * i as f64 / (grid - 1) as f64;
    for i in 0..grid {
        for j in 0..grid {
            let (p, n) = patch.point(step(patch.azimuth, j), step(patch.elevation, i));
            vertices.push(p);
            normals.push(n);
        }
    }
    let mut triangles = Vec::with_capacity(2 * (grid - 1) * (grid - 1));
    for i in 0..grid - 1 {
        for j in 0..grid - 1 {
            let a = i * grid + j;
            let (b, c, d) = (a + 1, a + grid, a + grid + 1);
            triangles.push([a, c, b]);
            triangles.push([b, c, d]);
        }
    }
    (Mesh { vertices, triangles }, normals)
}

/// A synthetic case with its ground truth.
/// Largest allowed disagreement between a case and its recomputation.
pub const CONSISTENCY_TOL_MM: f64 = 1e-9;

fn max_gap(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomCase {
    pub seed: u64,
    pub sigma_mm: f64,
    pub gt_plan: BonyPlan,
    pub case: PlanningCase,
}

impl PhantomCase {
    pub fn post_bone(&self) -> Result<PointSet> {
        apply_plan(&self.case.pre_bone, &self.gt_plan)
    }

    /// Recomputes the desired face and post-operative bone from the plan and
    /// checks them to within [`CONSISTENCY_TOL_MM`]. Cases built from the
    /// generator agree bit for bit; a flipped copy differs by round-off.
    pub fn check_consistency(&self) -> Result<()> {
        self.case.validate()?;
        let post = self.post_bone()?;
        let face = tissue_oracle(&self.case.pre_bone.points, &post, &self.case.pre_face, self.sigma_mm)?.moved();
        if max_gap(&face.coords, &self.case.desired_face.coords) > CONSISTENCY_TOL_MM {
            return Err(Error::Invariant("desired face differs from the tissue response to the plan".into()));
        }
        if let Some(reference) = &self.case.reference_post_bone {
            if max_gap(&reference.coords, &post.coords) > CONSISTENCY_TOL_MM {
                return Err(Error::Invariant("reference post-operative bone differs from the plan".into()));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.case.validate()?;
        self.gt_plan.validate_for(&self.case.pre_bone)?;
        if !(self.sigma_mm > 0.0) {
            return Err(invalid("tissue kernel width must be positive"));
        }
        Ok(())
    }

    /// The desired full face mesh under the tissue model.
    pub fn desired_mesh_vertices(&self) -> Result<Vec<Vec3>> {
        let post = self.post_bone()?;
        let vertices = PointSet::new(self.case.face_mesh.vertices.clone())?;
        Ok(tissue_oracle(&self.case.pre_bone.points, &post, &vertices, self.sigma_mm)?
            .moved()
            .coords)
    }
}

pub fn generate_case(spec: &PhantomSpec, seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut coords = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    for (label, patch) in template_segments() {
        let k = if label.is_movable() { spec.points_per_segment } else { spec.cranium_points };
        let pts = patch.jittered(spec, &mut rng).sample(k, &mut rng)?;
        labels.extend(std::iter::repeat_n(label, pts.len()));
        normals.extend(pts.normals.unwrap_or_default());
        coords.extend(pts.coords);
    }
    let pre_bone = SegmentedBone::new(PointSet::with_normals(coords, normals)?, labels)?;

    let (face_mesh, mesh_normals) = face_mesh(&FACE.jittered(spec, &mut rng), spec.face_grid);
    let idx = farthest_point_sample_coords(&face_mesh.vertices, spec.face_points, 0)?;
    let pre_face = PointSet::with_normals(face_mesh.vertices.clone(), mesh_normals)?.select(&idx);

    let mut gt_plan = BonyPlan::new();
    for seg in SegmentLabel::MOVABLE {
        let center = crate::geom::centroid(
            &pre_bone
                .indices_of(seg)
                .iter()
                .map(|&i| pre_bone.points.coords[i])
                .collect::<Vec<_>>(),
        );
        let axis = unit_vector(&mut rng);
        let angle = rng.random_range(0.0..=spec.max_rotation_deg).to_radians();
        let mut shift = advancement(seg) * spec.advancement_scale + unit_ball(&mut rng) * spec.translation_spread_mm;
        if shift.norm() > spec.max_translation_mm {
            shift *= spec.max_translation_mm / shift.norm();
        }
        gt_plan.insert(seg, RigidTransform::about_center(axis, angle, center, shift))?;
    }

    let post = apply_plan(&pre_bone, &gt_plan)?;
    let desired_face = tissue_oracle(&pre_bone.points, &post, &pre_face, spec.sigma_mm)?.moved();
    Ok(PhantomCase {
        seed,
        sigma_mm: spec.sigma_mm,
        gt_plan,
        case: PlanningCase {
            pre_face,
            pre_bone,
            desired_face,
            face_mesh,
            reference_post_bone: Some(post),
        },
    })
}

pub fn train_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(2 * i as u64)
}

pub fn test_seed(base: u64, j: usize) -> u64 {
    base.wrapping_add(2 * j as u64 + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomDataset {
    pub train: Vec<PhantomCase>,
    pub test: Vec<PhantomCase>,
}

/// A case moved to another frame by a random flip and translation; the plan
/// and reference bone follow so the pair stays consistent.
pub fn augmented_copy(case: &PhantomCase, copy: usize, max_translation: f64) -> Result<PhantomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0xa5a5_5a5a_0000_0000 ^ copy as u64);
    let p = random_perturbation(&mut rng, max_translation);
    Ok(PhantomCase {
        seed: case.seed,
        sigma_mm: case.sigma_mm,
        gt_plan: perturb_plan(&case.gt_plan, &p),
        case: perturb_case(&case.case, &p),
    })
}

/// Training cases from even seeds, test cases from odd seeds. With `augment`
/// each training case is followed by its augmented copies.
pub fn build_dataset(spec: &PhantomSpec, n_train: usize, n_test: usize, augment: bool, seed: u64) -> Result<PhantomDataset> {
    spec.validate()?;
    let base: Result<Vec<PhantomCase>> = (0..n_train)
        .into_par_iter()
        .map(|i| generate_case(spec, train_seed(seed, i)))
        .collect();
    let test: Result<Vec<PhantomCase>> = (0..n_test)
        .into_par_iter()
        .map(|j| generate_case(spec, test_seed(seed, j)))
        .collect();
    let mut train = Vec::new();
    for case in base? {
        let copies = if augment { spec.augment_copies } else { 0 };
        let extra: Result<Vec<PhantomCase>> = (0..copies)
            .map(|c| augmented_copy(&case, c, spec.augment_translation_mm))
            .collect();
        train.push(case);
        train.extend(extra?);
    }
    Ok(PhantomDataset { train, test: test? })
}

/// Face → bone training pairs.
pub fn bp_samples(cases: &[PhantomCase], cranium_context: bool) -> Result<Vec<AcmtSample>> {
    cases
        .par_iter()
        .map(|c| bony_planner::training_sample(&c.case, &c.post_bone()?, cranium_context))
        .collect()
}

/// Bone → face training pairs.
pub fn fs_samples(cases: &[PhantomCase], cranium_context: bool) -> Result<Vec<AcmtSample>> {
    cases
        .par_iter()
        .map(|c| facial_simulator::training_sample(&c.case, &c.post_bone()?, cranium_context))
        .collect()
}
