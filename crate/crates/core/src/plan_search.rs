//! Self-verified planning: plan several flipped/shifted copies of a case,
//! bring each plan back to the original frame, simulate it, and keep the one
//! whose simulated face lands closest to the desired face.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bony_planner::{plan_case, BonePredictor, PlanningCase};
use crate::error::{invalid, Result};
use crate::facial_simulator::{simulate, FaceSimulator};
use crate::geom::{nearest_k, BonyPlan, Mat3, Mesh, PointSet, RigidTransform, SegmentedBone, Vec3};

/// Largest shift along each axis, mm.
pub const MAX_PERTURBATION_MM: f64 = 10.0;

/// Optional mirror through the sagittal plane `x = 0`, then a translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub flip: bool,
    pub translation: Vec3,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Perturbation {
    pub fn identity() -> Self {
        Self {
            flip: false,
            translation: Vec3::zeros(),
        }
    }

    pub fn new(flip: bool, translation: Vec3) -> Result<Self> {
        let p = Self { flip, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .translation
            .iter()
            .any(|c| !c.is_finite() || c.abs() > MAX_PERTURBATION_MM)
        {
            return Err(invalid(format!(
                "perturbation translation must lie within ±{MAX_PERTURBATION_MM} mm per axis"
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.translation == Vec3::zeros()
    }

    fn mirror(&self, v: &Vec3) -> Vec3 {
        if self.flip {
            Vec3::new(-v.x, v.y, v.z)
        } else {
            *v
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.mirror(p) + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.mirror(v)
    }

    pub fn invert_point(&self, p: &Vec3) -> Vec3 {
        self.mirror(&(p - self.translation))
    }

    fn points(&self, ps: &PointSet) -> PointSet {
        PointSet {
            coords: ps.coords.iter().map(|p| self.apply_point(p)).collect(),
            normals: ps
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| self.apply_vector(v)).collect()),
        }
    }
}

pub fn random_perturbation(rng: &mut impl Rng, max_translation: f64) -> Perturbation {
    let flip = rng.random_bool(0.5);
    let m = max_translation.min(MAX_PERTURBATION_MM);
    let translation = Vec3::new(
        rng.random_range(-m..=m),
        rng.random_range(-m..=m),
        rng.random_range(-m..=m),
    );
    Perturbation { flip, translation }
}

/// `n` perturbations; the first is always the identity.
pub fn generate_perturbations(n: usize, seed: u64) -> Result<Vec<Perturbation>> {
    if n == 0 {
        return Err(invalid("need at least one candidate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Perturbation::identity()];
    out.extend((1..n).map(|_| random_perturbation(&mut rng, MAX_PERTURBATION_MM)));
    Ok(out)
}

/// Moves every surface of the case by `p`. A flip also swaps the right and
/// left proximal labels and the triangle winding.
pub fn perturb_case(case: &PlanningCase, p: &Perturbation) -> PlanningCase {
    let labels = if p.flip {
        case.pre_bone.labels.iter().map(|l| l.mirrored()).collect()
    } else {
        case.pre_bone.labels.clone()
    };
    let triangles = if p.flip {
        case.face_mesh.triangles.iter().map(|t| [t[0], t[2], t[1]]).collect()
    } else {
        case.face_mesh.triangles.clone()
    };
    PlanningCase {
        pre_face: p.points(&case.pre_face),
        pre_bone: SegmentedBone {
            points: p.points(&case.pre_bone.points),
            labels,
        },
        desired_face: p.points(&case.desired_face),
        face_mesh: Mesh {
            vertices: case.face_mesh.vertices.iter().map(|v| p.apply_point(v)).collect(),
            triangles,
        },
        reference_post_bone: case.reference_post_bone.as_ref().map(|b| p.points(b)),
    }
}

fn mirror_rotation(r: &Mat3) -> Mat3 {
    // F·R·F with F = diag(-1, 1, 1) negates row 0 and column 0, leaving
    // the corner in place.
    let mut m = *r;
    for k in 1..3 {
        m[(0, k)] = -m[(0, k)];
        m[(k, 0)] = -m[(k, 0)];
    }
    m
}

/// Expresses an original-frame plan in the perturbed frame: `M∘T∘M⁻¹`.
pub fn perturb_plan(plan: &BonyPlan, p: &Perturbation) -> BonyPlan {
    if p.is_identity() {
        return plan.clone();
    }
    let mut out = BonyPlan::new();
    for (seg, t) in plan.iter() {
        let rotation = if p.flip { mirror_rotation(&t.rotation) } else { t.rotation };
        // M T M⁻¹ y = F R F (y - t) + F T + t
        let translation = p.apply_vector(&t.translation) + p.translation - rotation * p.translation;
        let label = if p.flip { seg.mirrored() } else { seg };
        out.insert(label, RigidTransform { rotation, translation })
            .expect("movable segments stay movable under mirroring");
    }
    out
}

/// Brings a plan computed on the perturbed case back to the original frame:
/// `M⁻¹∘T∘M`, with the proximal labels swapped back after a flip.
pub fn relocalize(plan: &BonyPlan, p: &Perturbation) -> BonyPlan {
    if p.is_identity() {
        return plan.clone();
    }
    let mut out = BonyPlan::new();
    for (seg, t) in plan.iter() {
        let rotation = if p.flip { mirror_rotation(&t.rotation) } else { t.rotation };
        // M⁻¹ T M x = F R F x + F (R t + T - t)
        let translation = p.apply_vector(&(t.rotation * p.translation + t.translation - p.translation));
        let label = if p.flip { seg.mirrored() } else { seg };
        out.insert(label, RigidTransform { rotation, translation })
            .expect("movable segments stay movable under mirroring");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Mean distance between corresponded simulated and desired points.
    #[default]
    Corresponded,
    /// Mean of the two directed nearest-neighbour distances.
    Symmetric,
}

pub fn face_distance(simulated: &[Vec3], desired: &[Vec3], metric: SelectionMetric) -> Result<f64> {
    if simulated.is_empty() || desired.is_empty() {
        return Err(invalid("cannot score an empty face"));
    }
    match metric {
        SelectionMetric::Corresponded => {
            if simulated.len() != desired.len() {
                return Err(invalid("simulated and desired faces are not corresponded"));
            }
            let total: f64 = simulated.iter().zip(desired).map(|(a, b)| (a - b).norm()).sum();
            Ok(total / simulated.len() as f64)
        }
        SelectionMetric::Symmetric => {
            let directed = |from: &[Vec3], to: &[Vec3]| {
                from.par_iter().map(|p| nearest_k(to, p, 1)[0].1).sum::<f64>() / from.len() as f64
            };
            Ok(0.5 * (directed(simulated, desired) + directed(desired, simulated)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub perturbation: Perturbation,
    /// In the original frame.
    pub plan: BonyPlan,
}

impl Candidate {
    pub fn unperturbed(plan: BonyPlan) -> Self {
        Self {
            perturbation: Perturbation::identity(),
            plan,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub perturbation: Perturbation,
    pub plan: BonyPlan,
    /// Simulated positions of the sampled face points.
    pub simulated_face: Vec<Vec3>,
    pub score: f64,
    #[serde(default)]
    pub winner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub winner: usize,
    pub results: Vec<CandidateResult>,
}

impl Selection {
    pub fn plan(&self) -> &BonyPlan {
        &self.results[self.winner].plan
    }
}

/// Lowest score wins; ties go to the lowest index.
pub fn argmin_score(results: &[CandidateResult]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        match best {
            Some(b) if results[b].score <= r.score => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Simulates every candidate and picks the best-scoring one.
pub fn select_plan<S: FaceSimulator + ?Sized>(
    case: &PlanningCase,
    candidates: &[Candidate],
    simulator: &S,
    desired_face: &PointSet,
    metric: SelectionMetric,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(invalid("no candidate plans to select from"));
    }
    let results: Result<Vec<CandidateResult>> = candidates
        .par_iter()
        .map(|c| {
            let sim = simulate(simulator, case, &c.plan)?;
            let face = sim.sampled_face().coords;
            let score = face_distance(&face, &desired_face.coords, metric)?;
            Ok(CandidateResult {
                perturbation: c.perturbation,
                plan: c.plan.clone(),
                simulated_face: face,
                score,
                winner: false,
            })
        })
        .collect();
    let mut results = results?;
    if let Some(i) = results.iter().position(|r| !r.score.is_finite()) {
        return Err(crate::error::Error::Invariant(format!("candidate {i} has a non-finite score")));
    }
    let winner = argmin_score(&results).expect("non-empty");
    results[winner].winner = true;
    Ok(Selection { winner, results })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub candidates: usize,
    pub seed: u64,
    pub metric: SelectionMetric,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            candidates: 10,
            seed: 0,
            metric: SelectionMetric::Corresponded,
        }
    }
}

/// Candidate plans for every perturbation, each already relocalized.
pub fn candidate_plans<P: BonePredictor + ?Sized>(
    planner: &P,
    case: &PlanningCase,
    perturbations: &[Perturbation],
) -> Result<Vec<Candidate>> {
    perturbations
        .par_iter()
        .map(|p| {
            let moved = perturb_case(case, p);
            let plan = plan_case(planner, &moved)?;
            Ok(Candidate {
                perturbation: *p,
                plan: relocalize(&plan, p),
            })
        })
        .collect()
}

/// The full loop. The returned selection doubles as the audit log.
pub fn run<P, S>(planner: &P, simulator: &S, case: &PlanningCase, cfg: &SearchConfig) -> Result<Selection>
where
    P: BonePredictor + ?Sized,
    S: FaceSimulator + ?Sized,
{
    let perturbations = generate_perturbations(cfg.candidates, cfg.seed)?;
    let candidates = candidate_plans(planner, case, &perturbations)?;
    select_plan(case, &candidates, simulator, &case.desired_face, cfg.metric)
}
