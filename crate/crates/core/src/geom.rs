//! Point-set containers, rigid transform algebra, farthest-point subsampling
//! and the closed-form per-segment rigid fit.
//!
//! All coordinates are millimetres in the template-aligned frame:
//! `x` lateral (sagittal plane at `x = 0`), `y` anterior, `z` superior.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance for `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-10;
/// Tolerance on unit length of stored normals.
pub const NORMAL_TOL: f64 = 1e-6;
/// Relative singular-value floor used to declare a cross-covariance degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub coords: Vec<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<Vec<Vec3>>,
}

impl PointSet {
    pub fn new(coords: Vec<Vec3>) -> Result<Self> {
        let ps = Self {
            coords,
            normals: None,
        };
        ps.validate()?;
        Ok(ps)
    }

    pub fn with_normals(coords: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let ps = Self {
            coords,
            normals: Some(normals),
        };
        ps.validate()?;
        Ok(ps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(invalid("point set is empty"));
        }
        if let Some(i) = self.coords.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(invalid(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.coords.len() {
                return Err(invalid(format!(
                    "{} normals for {} points",
                    normals.len(),
                    self.coords.len()
                )));
            }
            if let Some(i) = normals
                .iter()
                .position(|n| !n.iter().all(|c| c.is_finite()) || (n.norm() - 1.0).abs() > NORMAL_TOL)
            {
                return Err(invalid(format!("normal {i} is not unit length")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.coords)
    }

    /// Sub-selection by index, keeping normals aligned.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        PointSet {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
        }
    }

    /// Adds a per-point displacement. Normals are dropped since a non-rigid
    /// displacement does not tell us how they change.
    pub fn displaced(&self, vectors: &[Vec3]) -> Result<PointSet> {
        if vectors.len() != self.len() {
            return Err(invalid(format!(
                "{} displacement vectors for {} points",
                vectors.len(),
                self.len()
            )));
        }
        Ok(PointSet {
            coords: self.coords.iter().zip(vectors).map(|(p, v)| p + v).collect(),
            normals: None,
        })
    }

    /// Per-point difference `other - self`.
    pub fn displacement_to(&self, other: &PointSet) -> Result<Vec<Vec3>> {
        if other.len() != self.len() {
            return Err(invalid(format!(
                "cannot difference point sets of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.coords.iter().zip(&other.coords).map(|(a, b)| b - a).collect())
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let sum = points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    sum / points.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentLabel {
    /// LeFort 1 (maxilla).
    #[serde(rename = "LF")]
    LeFort,
    /// Distal mandible.
    #[serde(rename = "DI")]
    Distal,
    #[serde(rename = "RP")]
    RightProximal,
    #[serde(rename = "LP")]
    LeftProximal,
    /// Fixed reference; never carries a transform.
    #[serde(rename = "CRANIUM")]
    Cranium,
}

impl SegmentLabel {
    pub const MOVABLE: [SegmentLabel; 4] = [
        SegmentLabel::LeFort,
        SegmentLabel::Distal,
        SegmentLabel::RightProximal,
        SegmentLabel::LeftProximal,
    ];

    pub fn is_movable(self) -> bool {
        self != SegmentLabel::Cranium
    }

    pub fn code(self) -> &'static str {
        match self {
            SegmentLabel::LeFort => "LF",
            SegmentLabel::Distal => "DI",
            SegmentLabel::RightProximal => "RP",
            SegmentLabel::LeftProximal => "LP",
            SegmentLabel::Cranium => "CRANIUM",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "LF" => Some(SegmentLabel::LeFort),
            "DI" => Some(SegmentLabel::Distal),
            "RP" => Some(SegmentLabel::RightProximal),
            "LP" => Some(SegmentLabel::LeftProximal),
            "CRANIUM" => Some(SegmentLabel::Cranium),
            _ => None,
        }
    }

    /// Label after a sagittal mirror: right and left proximal swap.
    pub fn mirrored(self) -> Self {
        match self {
            SegmentLabel::RightProximal => SegmentLabel::LeftProximal,
            SegmentLabel::LeftProximal => SegmentLabel::RightProximal,
            other => other,
        }
    }
}

impl fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedBone {
    pub points: PointSet,
    pub labels: Vec<SegmentLabel>,
}

impl SegmentedBone {
    pub fn new(points: PointSet, labels: Vec<SegmentLabel>) -> Result<Self> {
        let bone = Self { points, labels };
        bone.validate()?;
        Ok(bone)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices_of(&self, label: SegmentLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, label: SegmentLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Movable segments that have at least one point, in canonical order.
    pub fn movable_segments(&self) -> Vec<SegmentLabel> {
        SegmentLabel::MOVABLE
            .into_iter()
            .filter(|&s| self.labels.contains(&s))
            .collect()
    }

    pub fn movable_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_movable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.points.validate()?;
        if self.labels.len() != self.points.len() {
            return Err(invalid(format!(
                "{} labels for {} points",
                self.labels.len(),
                self.points.len()
            )));
        }
        for seg in self.movable_segments() {
            let pts: Vec<Vec3> = self.indices_of(seg).iter().map(|&i| self.points.coords[i]).collect();
            check_non_coplanar(&pts).map_err(|reason| Error::DegenerateSegment { segment: seg, reason })?;
        }
        Ok(())
    }
}

/// At least 4 points whose centred scatter has full rank.
pub fn check_non_coplanar(points: &[Vec3]) -> std::result::Result<(), String> {
    if points.len() < 4 {
        return Err(format!("{} points, need at least 4", points.len()));
    }
    let c = centroid(points);
    let scatter = points.iter().fold(Mat3::zeros(), |acc, p| {
        let d = p - c;
        acc + d * d.transpose()
    });
    let ev = scatter.symmetric_eigenvalues();
    let max = ev.max();
    let min = ev.min();
    if !(max > 0.0) || min <= 1e-9 * max {
        return Err("points are coplanar or collinear".to_string());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Homogeneous", into = "Homogeneous")]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Row-major 4×4 homogeneous matrix, the on-disk form of a [`RigidTransform`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Homogeneous(pub [[f64; 4]; 4]);

impl From<RigidTransform> for Homogeneous {
    fn from(t: RigidTransform) -> Self {
        t.to_homogeneous()
    }
}

impl TryFrom<Homogeneous> for RigidTransform {
    type Error = Error;

    fn try_from(h: Homogeneous) -> Result<Self> {
        RigidTransform::from_homogeneous(&h)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about `axis` through `center`, then translation.
    pub fn about_center(axis: Vec3, angle: f64, center: Vec3, translation: Vec3) -> Self {
        let rotation = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner();
        Self {
            rotation,
            translation: center - rotation * center + translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::Invariant("rigid transform has non-finite entries".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if ortho > ROTATION_TOL {
            return Err(Error::Invariant(format!("rotation is not orthonormal (|RᵀR - I| = {ortho:e})")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::Invariant(format!("rotation determinant is {det}, expected +1")));
        }
        Ok(())
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Homogeneous {
        let r = &self.rotation;
        let t = &self.translation;
        Homogeneous([
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }

    pub fn from_homogeneous(h: &Homogeneous) -> Result<Self> {
        let m = &h.0;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Invariant("homogeneous matrix bottom row must be [0, 0, 0, 1]".into()));
        }
        let rotation = Mat3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        Self::new(rotation, Vec3::new(m[0][3], m[1][3], m[2][3]))
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Per-segment rigid movements; never contains [`SegmentLabel::Cranium`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<SegmentLabel, RigidTransform>", into = "BTreeMap<SegmentLabel, RigidTransform>")]
pub struct BonyPlan {
    transforms: BTreeMap<SegmentLabel, RigidTransform>,
}

impl TryFrom<BTreeMap<SegmentLabel, RigidTransform>> for BonyPlan {
    type Error = Error;

    fn try_from(transforms: BTreeMap<SegmentLabel, RigidTransform>) -> Result<Self> {
        let plan = BonyPlan { transforms };
        plan.validate()?;
        Ok(plan)
    }
}

impl From<BonyPlan> for BTreeMap<SegmentLabel, RigidTransform> {
    fn from(plan: BonyPlan) -> Self {
        plan.transforms
    }
}

impl BonyPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Identity transform for each movable segment present in `bone`.
    pub fn identity_for(bone: &SegmentedBone) -> Self {
        let mut plan = Self::new();
        for seg in bone.movable_segments() {
            plan.transforms.insert(seg, RigidTransform::identity());
        }
        plan
    }

    pub fn insert(&mut self, segment: SegmentLabel, t: RigidTransform) -> Result<()> {
        if !segment.is_movable() {
            return Err(invalid("a bony plan cannot move the cranium"));
        }
        t.validate()?;
        self.transforms.insert(segment, t);
        Ok(())
    }

    pub fn get(&self, segment: SegmentLabel) -> Option<&RigidTransform> {
        self.transforms.get(&segment)
    }

    pub fn iter(&self) -> impl Iterator<Item = (SegmentLabel, &RigidTransform)> {
        self.transforms.iter().map(|(s, t)| (*s, t))
    }

    pub fn segments(&self) -> Vec<SegmentLabel> {
        self.transforms.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.transforms.contains_key(&SegmentLabel::Cranium) {
            return Err(Error::Invariant("bony plan contains a CRANIUM transform".into()));
        }
        for (seg, t) in &self.transforms {
            t.validate()
                .map_err(|e| Error::Invariant(format!("segment {seg}: {e}")))?;
        }
        Ok(())
    }

    /// Checks the plan covers exactly the movable segments of `bone`.
    pub fn validate_for(&self, bone: &SegmentedBone) -> Result<()> {
        self.validate()?;
        let expected = bone.movable_segments();
        if self.segments() != expected {
            return Err(invalid(format!(
                "plan covers {:?}, bone has movable segments {:?}",
                self.segments(),
                expected
            )));
        }
        Ok(())
    }

    /// Largest `(rotation Frobenius, translation)` difference to another plan
    /// over the union of segments. Missing segments count as infinite.
    pub fn max_difference(&self, other: &BonyPlan) -> (f64, f64) {
        let mut rot: f64 = 0.0;
        let mut trans: f64 = 0.0;
        let keys: std::collections::BTreeSet<_> =
            self.transforms.keys().chain(other.transforms.keys()).collect();
        for k in keys {
            match (self.transforms.get(k), other.transforms.get(k)) {
                (Some(a), Some(b)) => {
                    rot = rot.max((a.rotation - b.rotation).norm());
                    trans = trans.max((a.translation - b.translation).norm());
                }
                _ => return (f64::INFINITY, f64::INFINITY),
            }
        }
        (rot, trans)
    }
}

/// Triangle mesh; vertices in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(invalid("mesh has no vertices"));
        }
        if let Some(i) = self.vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(invalid(format!("mesh vertex {i} is not finite")));
        }
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().position(|tri| tri.iter().any(|&v| v >= n)) {
            return Err(invalid(format!("triangle {t} references a vertex out of range")));
        }
        Ok(())
    }
}

/// Deterministic farthest-point sampling.
///
/// Starts at `seed_index`; each further pick maximises the minimum distance to
/// the points already chosen, ties going to the lowest index.
pub fn farthest_point_sample(points: &PointSet, k: usize, seed_index: usize) -> Result<Vec<usize>> {
    farthest_point_sample_coords(&points.coords, k, seed_index)
}

pub fn farthest_point_sample_coords(coords: &[Vec3], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if n == 0 {
        return Err(invalid("cannot sample from an empty point set"));
    }
    if k == 0 || k > n {
        return Err(invalid(format!("sample count {k} outside 1..={n}")));
    }
    if seed_index >= n {
        return Err(invalid(format!("seed index {seed_index} out of range for {n} points")));
    }
    let mut selected = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(k);
    let mut current = seed_index;
    for _ in 0..k {
        out.push(current);
        selected[current] = true;
        let c = coords[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in coords.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if !selected[i] && min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(out)
}

/// Closed-form least-squares rigid alignment of index-corresponded sets.
///
/// Minimises `(1/N) Σ ‖R·srcᵢ + T − dstᵢ‖²` through the SVD of the centred
/// cross-covariance `H = U·S·Vᵀ`, with `R = V·diag(1, 1, det(V·Uᵀ))·Uᵀ` so the
/// result is always a proper rotation.
pub fn fit_rigid(src: &PointSet, dst: &PointSet) -> Result<RigidTransform> {
    fit_rigid_coords(&src.coords, &dst.coords)
}

pub fn fit_rigid_coords(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(invalid(format!(
            "rigid fit needs corresponded sets, got {} and {} points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(invalid(format!("rigid fit needs at least 3 points, got {}", src.len())));
    }
    let c_src = centroid(src);
    let c_dst = centroid(dst);
    let h = src.iter().zip(dst).fold(Mat3::zeros(), |acc, (s, d)| {
        acc + (s - c_src) * (d - c_dst).transpose()
    });
    if !h.iter().all(|v| v.is_finite()) {
        return Err(invalid("non-finite coordinates in rigid fit"));
    }

    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry("SVD did not converge".into())),
    };
    let mut sv = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    sv.sort_by(|a, b| b.total_cmp(a));
    let [s1, s2, s3] = sv;
    if !(s1 > 0.0) {
        return Err(Error::DegenerateGeometry("point sets have no spread".into()));
    }
    if s2 <= DEGENERACY_RATIO * s1 {
        return Err(Error::DegenerateGeometry("points are collinear; rotation is not determined".into()));
    }

    let v = v_t.transpose();
    let reflect = (v * u.transpose()).determinant() < 0.0;
    if reflect && (s2 - s3) <= DEGENERACY_RATIO * s1 {
        return Err(Error::DegenerateGeometry(
            "best proper rotation is not unique (reflective solution with repeated smallest singular values)".into(),
        ));
    }
    // The correction must hit the column paired with the smallest singular value.
    let mut d = Mat3::identity();
    if reflect {
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap_or(2);
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation = c_dst - rotation * c_src;
    let t = RigidTransform { rotation, translation };
    t.validate()
        .map_err(|e| Error::DegenerateGeometry(format!("fit produced an invalid rotation: {e}")))?;
    Ok(t)
}

pub fn apply_transform(t: &RigidTransform, points: &PointSet) -> PointSet {
    PointSet {
        coords: points.coords.iter().map(|p| t.apply_point(p)).collect(),
        normals: points
            .normals
            .as_ref()
            .map(|n| n.iter().map(|v| t.apply_vector(v)).collect()),
    }
}

/// Mean squared residual `(1/N) Σ ‖R·srcᵢ + T − dstᵢ‖²`, in mm².
pub fn alignment_error(t: &RigidTransform, src: &PointSet, dst: &PointSet) -> Result<f64> {
    alignment_error_coords(t, &src.coords, &dst.coords)
}

pub fn alignment_error_coords(t: &RigidTransform, src: &[Vec3], dst: &[Vec3]) -> Result<f64> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(invalid(format!(
            "alignment error needs equal non-empty sets, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let sum: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (t.apply_point(s) - d).norm_squared())
        .sum();
    Ok(sum / src.len() as f64)
}

/// Lexicographic order on coordinates; the canonical tie-break for every
/// neighbour search so results do not depend on point ordering.
pub fn lex_cmp(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// The `k` nearest points to `query` as `(index, distance)`, nearest first.
/// Equal distances are ordered by [`lex_cmp`], then index.
pub fn nearest_k(points: &[Vec3], query: &Vec3, k: usize) -> Vec<(usize, f64)> {
    let mut cand: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, (p - query).norm_squared()))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        a.1.total_cmp(&b.1)
            .then_with(|| lex_cmp(&points[a.0], &points[b.0]))
            .then(a.0.cmp(&b.0))
    };
    let k = k.min(cand.len());
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
}

/// Offset added to distances in inverse-distance weights.
pub const IDW_EPS: f64 = 1e-9;

/// Normalised inverse-distance weights `1/(d + ε)` for `(index, distance)` pairs.
pub fn idw_weights(neighbours: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let raw: Vec<f64> = neighbours.iter().map(|(_, d)| 1.0 / (d + IDW_EPS)).collect();
    let total: f64 = raw.iter().sum();
    neighbours
        .iter()
        .zip(raw)
        .map(|((i, _), w)| (*i, w / total))
        .collect()
}
