//! Accuracy metrics, the signed-rank test, the bone-only baseline and the
//! comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bony_planner::{plan_case, BonePredictor};
use crate::error::{invalid, Error, Result};
use crate::facial_simulator::{apply_plan, simulate_from_bone, FaceSimulator, TissueOracleSimulator};
use crate::geom::{nearest_k, PointSet, SegmentLabel, SegmentedBone, Vec3};
use crate::phantom::PhantomCase;
use crate::plan_search::{self, SearchConfig};
use crate::tensor_net::{
    self, Activation, EncDecCache, EncoderDecoderConfig, EncoderDecoderParams, InputFeatures, LayerStack,
    Parameters, PointHierarchy, StackCache, Tensor2, TrainConfig, Trainable,
};

/// Mean corresponded distances, per movable segment and pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMae {
    pub per_segment: BTreeMap<SegmentLabel, f64>,
    pub entire: f64,
}

/// Euclidean distance of every corresponded point pair.
pub fn point_distances(pred: &PointSet, gt: &PointSet) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "predicted bone has {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.coords.iter().zip(&gt.coords).map(|(a, b)| (a - b).norm()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Point `i` of the prediction against point `i` of the ground truth.
    #[default]
    Corresponded,
    /// Each predicted point against its nearest ground-truth point.
    Nearest,
}

pub fn point_distances_with(pred: &PointSet, gt: &PointSet, mode: DistanceMode) -> Result<Vec<f64>> {
    match mode {
        DistanceMode::Corresponded => point_distances(pred, gt),
        DistanceMode::Nearest => {
            if gt.is_empty() {
                return Err(invalid("ground truth has no points"));
            }
            Ok(pred.coords.par_iter().map(|p| nearest_k(&gt.coords, p, 1)[0].1).collect())
        }
    }
}

/// Sums run over sorted values, so the result does not depend on the
/// order of the points.
pub fn segment_mae_from_distances(distances: &[f64], labels: &[SegmentLabel]) -> Result<SegmentMae> {
    if distances.len() != labels.len() {
        return Err(invalid("distance and label counts differ"));
    }
    let mut groups: BTreeMap<SegmentLabel, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for (d, l) in distances.iter().zip(labels) {
        if l.is_movable() {
            groups.entry(*l).or_default().push(*d);
            all.push(*d);
        }
    }
    if all.is_empty() {
        return Err(invalid("bone has no movable points"));
    }
    let sorted_mean = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok(SegmentMae {
        per_segment: groups.into_iter().map(|(l, mut v)| (l, sorted_mean(&mut v))).collect(),
        entire: sorted_mean(&mut all),
    })
}

pub fn segment_mae(pred: &SegmentedBone, gt: &PointSet) -> Result<SegmentMae> {
    segment_mae_from_distances(&point_distances(&pred.points, gt)?, &pred.labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    /// Rank sum of positive differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    pub p_two_sided: f64,
    /// Alternative: `a` tends to be smaller than `b`.
    pub p_less: f64,
    /// Alternative: `a` tends to be larger than `b`.
    pub p_greater: f64,
    pub exact: bool,
}

/// Largest reduced sample size handled by the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(a, b, WILCOXON_EXACT_MAX_N)
}

/// Signed-rank test with mid-ranks for ties. Uses the exact null
/// distribution up to `exact_max_n` pairs and a tie- and
/// continuity-corrected normal approximation above.
pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], exact_max_n: usize) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(invalid("paired samples differ in length"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("paired samples must be finite"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::UndefinedTest("all paired differences are zero".into()));
    }
    let n = diffs.len();
    if n < 5 {
        return Err(invalid(format!("signed-rank test needs at least 5 non-zero differences, got {n}")));
    }
    let ranks = mid_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum::<f64>() + 0.0;
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_less, p_greater, exact) = if n <= exact_max_n {
        let dist = exact_null(&ranks);
        let w2 = (2.0 * w_plus).round() as usize;
        let le: f64 = dist[..=w2].iter().sum();
        let ge: f64 = dist[w2..].iter().sum();
        (le.min(1.0), ge.min(1.0), true)
    } else {
        let mean = total / 2.0;
        let tie_term: f64 = tie_sizes(&ranks).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term;
        let sd = var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let le = normal.cdf((w_plus - mean + 0.5) / sd);
        let ge = 1.0 - normal.cdf((w_plus - mean - 0.5) / sd);
        (le.min(1.0), ge.min(1.0), false)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_two_sided: (2.0 * p_less.min(p_greater)).min(1.0),
        p_less,
        p_greater,
        exact,
    })
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn tie_sizes(ranks: &[f64]) -> Vec<usize> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for r in ranks {
        *counts.entry((2.0 * r).round() as u64).or_default() += 1;
    }
    counts.into_values().filter(|&c| c > 1).collect()
}

/// Null distribution of the doubled positive rank sum: entry `k` is the
/// probability that `2·W+ = k` when every sign is a fair coin.
fn exact_null(ranks: &[f64]) -> Vec<f64> {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut dist = vec![0.0; max + 1];
    dist[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for k in (0..=reach).rev() {
            let p = dist[k];
            dist[k + r] += 0.5 * p;
            dist[k] = 0.5 * p;
        }
        reach += r;
    }
    dist
}

/// Bone-only displacement regressor: one point tower on coordinates and
/// normals, a per-point head to 3 channels. It never sees the face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub tower: EncoderDecoderParams,
    pub head: LayerStack,
    pub movement_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub tower: EncoderDecoderConfig,
    pub head_dims: Vec<usize>,
    pub movement_scale: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            tower: EncoderDecoderConfig {
                input: InputFeatures::XyzNormals,
                ..EncoderDecoderConfig::default()
            },
            head_dims: vec![64, 3],
            movement_scale: 0.2,
        }
    }
}

impl BaselineConfig {
    pub fn scaled(width_div: usize, point_div: usize) -> Self {
        let wd = width_div.max(1);
        Self {
            tower: EncoderDecoderConfig {
                input: InputFeatures::XyzNormals,
                ..EncoderDecoderConfig::scaled(width_div, point_div)
            },
            head_dims: vec![(64 / wd).max(1), 3],
            movement_scale: 0.2,
        }
    }
}

pub struct BaselineSample {
    hierarchy: PointHierarchy,
    input: Tensor2,
    target: Vec<Vec3>,
}

impl BaselineModel {
    pub fn new(config: &BaselineConfig, seed: u64, zero_head: bool) -> Result<Self> {
        if config.head_dims.last() != Some(&3) || !(config.movement_scale > 0.0) {
            return Err(invalid("baseline head must end in 3 channels with a positive movement scale"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tower = EncoderDecoderParams::glorot(config.tower.clone(), &mut rng);
        let mut head = LayerStack::glorot(tower.output_dim(), &config.head_dims, Activation::Identity, &mut rng);
        if zero_head {
            head.zero_last();
        }
        Ok(Self {
            tower,
            head,
            movement_scale: config.movement_scale,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.tower.validate()?;
        self.head.validate()?;
        if self.head.in_dim() != self.tower.output_dim() || self.head.out_dim() != 3 {
            return Err(invalid("baseline head does not match its tower"));
        }
        Ok(())
    }

    fn forward_cached(&self, h: &PointHierarchy, x: &Tensor2) -> Result<(Tensor2, EncDecCache, StackCache)> {
        let (feat, tc) = self.tower.forward_cached(h, x)?;
        let (out, hc) = self.head.forward_cached(&feat)?;
        Ok((out, tc, hc))
    }

    /// Predicted displacement of every bone point, mm.
    pub fn predict_displacement(&self, bone: &PointSet) -> Result<Vec<Vec3>> {
        let h = self.tower.hierarchy(bone)?;
        let x = self.tower.input_features(bone)?;
        let (out, _, _) = self.forward_cached(&h, &x)?;
        let inv = 1.0 / self.movement_scale;
        Ok((0..out.cols)
            .map(|j| Vec3::new(out.get(0, j), out.get(1, j), out.get(2, j)) * inv)
            .collect())
    }

    pub fn predict_bone(&self, bone: &PointSet) -> Result<PointSet> {
        bone.displaced(&self.predict_displacement(bone)?)
    }

    pub fn prepare(&self, bone: &PointSet, target: Vec<Vec3>) -> Result<BaselineSample> {
        if target.len() != bone.len() {
            return Err(invalid("ground-truth displacement does not match the bone"));
        }
        Ok(BaselineSample {
            hierarchy: self.tower.hierarchy(bone)?,
            input: self.tower.input_features(bone)?,
            target,
        })
    }
}

impl Parameters for BaselineModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.tower.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.tower.visit_mut(f);
        self.head.visit_mut(f);
    }
}

impl Trainable for BaselineModel {
    type Sample = BaselineSample;

    fn loss_and_grad(&self, s: &BaselineSample) -> Result<(f64, Vec<f64>)> {
        let (out, tc, hc) = self.forward_cached(&s.hierarchy, &s.input)?;
        let n = out.cols;
        let inv_ms = 1.0 / self.movement_scale;
        let denom = (3 * n) as f64;
        let mut loss = 0.0;
        let mut d_out = Tensor2::zeros(3, n);
        for j in 0..n {
            for r in 0..3 {
                let diff = out.get(r, j) * inv_ms - s.target[j][r];
                loss += diff * diff;
                d_out.set(r, j, 2.0 * diff * inv_ms / denom);
            }
        }
        let mut grads = self.zeroed();
        let d_feat = self.head.backward(&hc, &d_out, &mut grads.head);
        self.tower.backward(&s.hierarchy, &tc, &d_feat, &mut grads.tower);
        Ok((loss / denom, grads.flat()))
    }
}

/// Training pairs for the baseline: whole pre-operative bone → displacement.
pub fn baseline_samples(model: &BaselineModel, cases: &[PhantomCase]) -> Result<Vec<BaselineSample>> {
    cases
        .par_iter()
        .map(|c| {
            let post = c.post_bone()?;
            model.prepare(&c.case.pre_bone.points, c.case.pre_bone.points.displacement_to(&post)?)
        })
        .collect()
}

pub fn train_baseline(
    model: &mut BaselineModel,
    cases: &[PhantomCase],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let samples = baseline_samples(model, cases)?;
    tensor_net::train(model, &samples, cfg, on_epoch)
}

/// Predicted post-operative bone for each case.
pub fn baseline_defnet(model: &BaselineModel, cases: &[PhantomCase]) -> Result<Vec<PointSet>> {
    cases.par_iter().map(|c| model.predict_bone(&c.case.pre_bone.points)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub seed: u64,
    pub bone: SegmentMae,
    /// Mean distance between the tissue response to the prediction and the
    /// desired face, over the sampled face points.
    pub face: f64,
    pub point_distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub per_case: Vec<CaseMetrics>,
    pub per_segment: BTreeMap<SegmentLabel, MeanStd>,
    pub entire: MeanStd,
    pub face: MeanStd,
}

impl MethodReport {
    fn from_cases(name: &str, per_case: Vec<CaseMetrics>) -> Self {
        let per_segment = SegmentLabel::MOVABLE
            .iter()
            .map(|s| {
                let v: Vec<f64> = per_case.iter().filter_map(|c| c.bone.per_segment.get(s).copied()).collect();
                (*s, mean_std(&v))
            })
            .collect();
        let entire = mean_std(&per_case.iter().map(|c| c.bone.entire).collect::<Vec<_>>());
        let face = mean_std(&per_case.iter().map(|c| c.face).collect::<Vec<_>>());
        Self {
            name: name.to_string(),
            per_case,
            per_segment,
            entire,
            face,
        }
    }

    pub fn entire_values(&self) -> Vec<f64> {
        self.per_case.iter().map(|c| c.bone.entire).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Done(WilcoxonResult),
    Undefined(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub outcome: TestOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub methods: Vec<MethodReport>,
    pub comparisons: Vec<Comparison>,
    pub config: serde_json::Value,
}

pub const IDENTITY: &str = "Identity";
pub const BASELINE: &str = "Baseline";
pub const BP: &str = "BP";
pub const BP_FS: &str = "BP+FS";

/// What to evaluate. Any method left out is skipped.
pub struct Methods<'a> {
    pub baseline: Option<&'a BaselineModel>,
    pub bp: Option<&'a (dyn BonePredictor + 'a)>,
    pub fs: Option<&'a (dyn FaceSimulator + 'a)>,
    pub search: SearchConfig,
    pub include_identity: bool,
    /// Reduced sample sizes up to this use the exact signed-rank test.
    pub exact_max_n: usize,
    pub distance: DistanceMode,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b)
    }

    /// Plain-text table: one row per method, mean ± std in mm.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let header = ["Method", "LF", "DI", "RP", "LP", "Entire Bone", "Face"];
        let fmt = |m: &MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for m in &self.methods {
            let mut row = vec![m.name.clone()];
            for s in SegmentLabel::MOVABLE {
                row.push(m.per_segment.get(&s).map(fmt).unwrap_or_default());
            }
            row.push(fmt(&m.entire));
            row.push(fmt(&m.face));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
            }
        }
        let _ = writeln!(out, "\nMean absolute distance (mean ± std), mm; {} cases.", self.n_cases);
        for c in &self.comparisons {
            let _ = match &c.outcome {
                TestOutcome::Done(w) => writeln!(
                    out,
                    "{} vs {}: W = {}, p = {:.4}{}",
                    c.a,
                    c.b,
                    w.statistic,
                    w.p_two_sided,
                    if w.exact { " (exact)" } else { " (normal approx.)" }
                ),
                TestOutcome::Undefined(msg) => writeln!(out, "{} vs {}: {msg}", c.a, c.b),
            };
        }
        out
    }

    /// `method,case,point,segment,distance` rows for colour maps.
    pub fn distances_csv(&self, labels: &[Vec<SegmentLabel>]) -> String {
        let mut out = String::from("method,case_seed,point,segment,distance_mm\n");
        for m in &self.methods {
            for (k, c) in m.per_case.iter().enumerate() {
                for (i, d) in c.point_distances.iter().enumerate() {
                    let seg = labels.get(k).and_then(|l| l.get(i)).map(|l| l.code()).unwrap_or("");
                    let _ = writeln!(out, "{},{},{},{},{}", m.name, c.seed, i, seg, d);
                }
            }
        }
        out
    }
}

fn case_metrics(case: &PhantomCase, pred_bone: &PointSet, mode: DistanceMode) -> Result<CaseMetrics> {
    let gt = case.post_bone()?;
    let distances = point_distances_with(pred_bone, &gt, mode)?;
    let bone = segment_mae_from_distances(&distances, &case.case.pre_bone.labels)?;
    let oracle = TissueOracleSimulator { sigma: case.sigma_mm };
    let sim = simulate_from_bone(&oracle, &case.case, pred_bone)?;
    let face = plan_search::face_distance(
        &sim.sampled_face().coords,
        &case.case.desired_face.coords,
        plan_search::SelectionMetric::Corresponded,
    )?;
    Ok(CaseMetrics {
        seed: case.seed,
        bone,
        face,
        point_distances: distances,
    })
}

/// Runs every selected method on every case and compares them pairwise on
/// entire-bone error.
pub fn evaluate(methods: &Methods<'_>, cases: &[PhantomCase], config: serde_json::Value) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(invalid("no test cases"));
    }
    let per_case = |f: &(dyn Fn(&PhantomCase) -> Result<PointSet> + Sync)| -> Result<Vec<CaseMetrics>> {
        cases.par_iter().map(|c| case_metrics(c, &f(c)?, methods.distance)).collect()
    };
    let mut reports = Vec::new();
    if methods.include_identity {
        reports.push(MethodReport::from_cases(IDENTITY, per_case(&|c| Ok(c.case.pre_bone.points.clone()))?));
    }
    if let Some(b) = methods.baseline {
        reports.push(MethodReport::from_cases(
            BASELINE,
            per_case(&|c| b.predict_bone(&c.case.pre_bone.points))?,
        ));
    }
    if let Some(bp) = methods.bp {
        reports.push(MethodReport::from_cases(
            BP,
            per_case(&|c| apply_plan(&c.case.pre_bone, &plan_case(bp, &c.case)?))?,
        ));
        if let Some(fs) = methods.fs {
            reports.push(MethodReport::from_cases(
                BP_FS,
                per_case(&|c| {
                    let sel = plan_search::run(bp, fs, &c.case, &methods.search)?;
                    apply_plan(&c.case.pre_bone, sel.plan())
                })?,
            ));
        }
    }

    let mut comparisons = Vec::new();
    for (a, b) in [(BP, BASELINE), (BP_FS, BP), (BP_FS, BASELINE)] {
        let (Some(ra), Some(rb)) = (
            reports.iter().find(|m| m.name == a),
            reports.iter().find(|m| m.name == b),
        ) else {
            continue;
        };
        let outcome = match wilcoxon_signed_rank_with(&ra.entire_values(), &rb.entire_values(), methods.exact_max_n) {
            Ok(w) => TestOutcome::Done(w),
            Err(e @ (Error::UndefinedTest(_) | Error::InvalidArgument(_))) => TestOutcome::Undefined(e.to_string()),
            Err(e) => return Err(e),
        };
        comparisons.push(Comparison {
            a: a.to_string(),
            b: b.to_string(),
            outcome,
        });
    }
    Ok(EvalReport {
        n_cases: cases.len(),
        methods: reports,
        comparisons,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bony_planner::OraclePlanner;
    use crate::geom::RigidTransform;
    use crate::test_util::desk_case;
    use proptest::prelude::*;
    use rand::Rng;

    /// One-sided p-values by listing every sign assignment.
    fn brute_force(diffs: &[f64]) -> (f64, f64) {
        let ranks = mid_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let observed: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
        let n = diffs.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w <= observed + 1e-9 {
                le += 1;
            }
            if w >= observed - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (le as f64 / total, ge as f64 / total)
    }

    fn check_against_brute_force(diffs: &[f64]) {
        let zeros = vec![0.0; diffs.len()];
        let w = wilcoxon_signed_rank(diffs, &zeros).unwrap();
        let (le, ge) = brute_force(diffs);
        assert!(w.exact);
        assert!((w.p_less - le).abs() < 1e-12, "{diffs:?}");
        assert!((w.p_greater - ge).abs() < 1e-12, "{diffs:?}");
        assert!((w.p_two_sided - (2.0 * le.min(ge)).min(1.0)).abs() < 1e-12);
    }

    #[test]
    fn segment_mae_examples() {
        let pc = desk_case(1);
        let bone = &pc.case.pre_bone;
        let same = segment_mae(bone, &bone.points).unwrap();
        assert_eq!(same.entire, 0.0);
        assert!(same.per_segment.values().all(|&v| v == 0.0));

        let gt = PointSet::new(
            bone.points
                .coords
                .iter()
                .zip(&bone.labels)
                .map(|(p, l)| if *l == SegmentLabel::Distal { p + Vec3::new(1.0, 0.0, 0.0) } else { *p })
                .collect(),
        )
        .unwrap();
        let m = segment_mae(bone, &gt).unwrap();
        assert!((m.per_segment[&SegmentLabel::Distal] - 1.0).abs() < 1e-12);
        assert_eq!(m.per_segment[&SegmentLabel::LeFort], 0.0);
        assert!((m.entire - 0.25).abs() < 1e-12);
        assert!(!m.per_segment.contains_key(&SegmentLabel::Cranium));

        assert!(segment_mae(bone, &PointSet::new(gt.coords[..10].to_vec()).unwrap()).is_err());
    }

    #[test]
    fn segment_mae_matches_naive_loop() {
        let pc = desk_case(2);
        let post = pc.post_bone().unwrap();
        let pred = SegmentedBone::new(pc.case.pre_bone.points.clone(), pc.case.pre_bone.labels.clone()).unwrap();
        let m = segment_mae(&pred, &post).unwrap();
        for seg in SegmentLabel::MOVABLE {
            let mut sum = 0.0;
            let mut n = 0.0;
            for i in 0..pred.len() {
                if pred.labels[i] == seg {
                    let d = pred.points.coords[i] - post.coords[i];
                    sum += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
                    n += 1.0;
                }
            }
            assert!((m.per_segment[&seg] - sum / n).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_mae_is_permutation_invariant() {
        let pc = desk_case(3);
        let post = pc.post_bone().unwrap();
        let bone = &pc.case.pre_bone;
        let mut order: Vec<usize> = (0..bone.len()).collect();
        order.reverse();
        order.swap(3, 77);
        let pred = SegmentedBone::new(bone.points.select(&order), order.iter().map(|&i| bone.labels[i]).collect()).unwrap();
        let a = segment_mae(bone, &post).unwrap();
        let b = segment_mae(&pred, &post.select(&order)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nearest_distance_never_exceeds_corresponded() {
        let pc = desk_case(4);
        let post = pc.post_bone().unwrap();
        let c = point_distances_with(&pc.case.pre_bone.points, &post, DistanceMode::Corresponded).unwrap();
        let n = point_distances_with(&pc.case.pre_bone.points, &post, DistanceMode::Nearest).unwrap();
        assert!(c.iter().zip(&n).all(|(a, b)| b <= a));
        assert!(point_distances_with(&post, &post, DistanceMode::Nearest).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn wilcoxon_constant_shift() {
        let b: Vec<f64> = (0..8).map(|i| i as f64 * 0.7).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 0.5).collect();
        let w = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(w.w_plus, 0.0);
        assert_eq!(w.statistic, 0.0);
        assert!(w.exact);
        assert_eq!(w.p_two_sided, 0.0078125);
        assert_eq!(w.p_less, 1.0 / 256.0);
        assert_eq!(w.p_greater, 1.0);
    }

    #[test]
    fn wilcoxon_symmetric_differences() {
        let diffs = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0];
        let w = wilcoxon_signed_rank(&diffs, &[0.0; 8]).unwrap();
        assert_eq!(w.w_plus, w.w_minus);
        assert_eq!(w.p_two_sided, 1.0);
        check_against_brute_force(&diffs);
    }

    #[test]
    fn wilcoxon_errors() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::UndefinedTest(_))));
        assert!(matches!(wilcoxon_signed_rank(&a[..5], &a), Err(Error::InvalidArgument(_))));
        let b = [1.0, 2.0, 3.0, 4.5, 5.5, 6.5];
        assert!(matches!(wilcoxon_signed_rank(&a, &b), Err(Error::InvalidArgument(_))));
        assert!(wilcoxon_signed_rank(&[f64::NAN; 6], &a).is_err());
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration_exhaustively() {
        // every sign pattern on distinct magnitudes
        for n in 5..=10usize {
            for mask in 0u32..(1 << n) {
                let diffs: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { (i + 1) as f64 } else { -((i + 1) as f64) }).collect();
                check_against_brute_force(&diffs);
            }
        }
        // tied magnitudes
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 5..=10usize {
            for _ in 0..200 {
                let diffs: Vec<f64> = (0..n)
                    .map(|_| {
                        let m = rng.random_range(1..=3) as f64;
                        if rng.random_bool(0.5) { m } else { -m }
                    })
                    .collect();
                check_against_brute_force(&diffs);
            }
        }
    }

    #[test]
    fn wilcoxon_large_n_uses_normal_approximation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-0.2..0.6)).collect();
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!w.exact);
        let exact = wilcoxon_signed_rank_with(&a, &b, 30).unwrap();
        assert!(exact.exact);
        assert!((w.p_less - exact.p_less).abs() < 0.01);
        assert!(w.p_less < 0.05);
    }

    #[test]
    fn mid_ranks_share_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(tie_sizes(&[3.5, 1.0, 3.5, 2.0]), vec![2]);
    }

    #[test]
    fn zero_head_baseline_keeps_the_bone() {
        let pc = desk_case(5);
        let model = BaselineModel::new(&BaselineConfig::scaled(16, 16), 1, true).unwrap();
        model.validate().unwrap();
        let out = baseline_defnet(&model, std::slice::from_ref(&pc)).unwrap();
        assert_eq!(out[0].coords, pc.case.pre_bone.points.coords);
        let random = BaselineModel::new(&BaselineConfig::scaled(16, 16), 1, false).unwrap();
        assert_eq!(random.predict_bone(&pc.case.pre_bone.points).unwrap().len(), pc.case.pre_bone.len());
    }

    #[test]
    fn baseline_gradient_matches_finite_differences() {
        let mut config = BaselineConfig::scaled(16, 16);
        config.tower = crate::acmt::gradcheck_config().tower;
        config.tower.input = InputFeatures::XyzNormals;
        config.head_dims = vec![4, 3];
        let mut model = BaselineModel::new(&config, 2, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = model.flat().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
        model.set_flat(&p).unwrap();
        let pc = desk_case(6);
        let idx: Vec<usize> = (0..24).map(|i| i * 13).collect();
        let bone = pc.case.pre_bone.points.select(&idx);
        let target: Vec<Vec3> = (0..24).map(|_| Vec3::new(rng.random_range(-3.0..3.0), 1.0, 0.5)).collect();
        let sample = model.prepare(&bone, target).unwrap();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.set_flat(p).unwrap();
            m.loss_and_grad(&sample).unwrap()
        };
        assert!(tensor_net::finite_diff_check(f, &model.flat(), 1e-4) < 1e-4);
    }

    #[test]
    fn baseline_training_reduces_loss() {
        let cases: Vec<PhantomCase> = (0..4).map(desk_case).collect();
        let mut config = BaselineConfig::scaled(8, 16);
        config.tower.layers_per_block = 1;
        let mut model = BaselineModel::new(&config, 3, false).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let hist = train_baseline(&mut model, &cases, &cfg, |_, _| {}).unwrap();
        assert!(hist[29] < hist[0]);
    }

    #[test]
    fn mean_std_examples() {
        let m = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]).std, 0.0);
        assert!(mean_std(&[]).mean.is_nan());
    }

    fn oracle_methods(search: SearchConfig) -> Methods<'static> {
        Methods {
            baseline: None,
            bp: Some(&OraclePlanner),
            fs: None,
            search,
            include_identity: true,
            exact_max_n: WILCOXON_EXACT_MAX_N,
            distance: DistanceMode::Corresponded,
        }
    }

    #[test]
    fn report_is_recomputable() {
        let cases: Vec<PhantomCase> = (10..16).map(desk_case).collect();
        let baseline = BaselineModel::new(&BaselineConfig::scaled(16, 16), 4, false).unwrap();
        let sim = TissueOracleSimulator { sigma: cases[0].sigma_mm };
        let methods = Methods {
            baseline: Some(&baseline),
            fs: Some(&sim),
            ..oracle_methods(SearchConfig::default())
        };
        let report = evaluate(&methods, &cases, serde_json::json!({"k": 1})).unwrap();
        assert_eq!(report.n_cases, 6);
        assert_eq!(report.methods.len(), 4);
        for m in &report.methods {
            for (c, case) in m.per_case.iter().zip(&cases) {
                let pooled = segment_mae_from_distances(&c.point_distances, &case.case.pre_bone.labels).unwrap();
                assert_eq!(pooled.entire, c.bone.entire);
            }
            assert_eq!(m.entire, mean_std(&m.entire_values()));
            for seg in SegmentLabel::MOVABLE {
                let v: Vec<f64> = m.per_case.iter().map(|c| c.bone.per_segment[&seg]).collect();
                assert_eq!(m.per_segment[&seg], mean_std(&v));
            }
        }
        let bp = report.method(BP).unwrap();
        assert!(bp.entire.mean < 1e-9);
        assert!(bp.face.mean < 1e-9);
        assert!(report.method(IDENTITY).unwrap().entire.mean > 1.0);
        match &report.comparison(BP, BASELINE).unwrap().outcome {
            TestOutcome::Done(w) => assert!(w.p_less <= 1.0 / 64.0 + 1e-15),
            other => panic!("{other:?}"),
        }
        let csv = report.distances_csv(&cases.iter().map(|c| c.case.pre_bone.labels.clone()).collect::<Vec<_>>());
        assert_eq!(csv.lines().count(), 1 + 4 * 6 * cases[0].case.pre_bone.len());
        assert!(report.table().contains("| BP+FS"));
        assert_eq!(report, evaluate(&methods, &cases, serde_json::json!({"k": 1})).unwrap());
    }

    #[test]
    fn identical_methods_leave_the_test_undefined() {
        let cases: Vec<PhantomCase> = (20..25).map(desk_case).collect();
        let sim = TissueOracleSimulator { sigma: cases[0].sigma_mm };
        let methods = Methods {
            fs: Some(&sim),
            ..oracle_methods(SearchConfig {
                candidates: 1,
                ..SearchConfig::default()
            })
        };
        let report = evaluate(&methods, &cases, serde_json::Value::Null).unwrap();
        assert!(matches!(report.comparison(BP_FS, BP).unwrap().outcome, TestOutcome::Undefined(_)));
        assert!(report.table().contains("BP+FS vs BP: undefined"));
    }

    #[test]
    fn report_covers_a_plan_offset() {
        let mut pc = desk_case(30);
        let t = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 2.0));
        let plan = pc.gt_plan.clone();
        for (seg, g) in plan.iter() {
            pc.gt_plan.insert(seg, t.compose(g)).unwrap();
        }
        pc.case.reference_post_bone = Some(apply_plan(&pc.case.pre_bone, &plan).unwrap());
        let report = evaluate(&oracle_methods(SearchConfig::default()), &[pc], serde_json::Value::Null).unwrap();
        assert!((report.method(BP).unwrap().entire.mean - 2.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn p_values_are_probabilities(diffs in prop::collection::vec(prop_oneof![-5.0..-0.01f64, 0.01..5.0f64], 5..16)) {
            let w = wilcoxon_signed_rank(&diffs, &vec![0.0; diffs.len()]).unwrap();
            for p in [w.p_less, w.p_greater, w.p_two_sided] {
                prop_assert!((0.0..=1.0).contains(&p));
            }
            prop_assert!(w.p_less + w.p_greater >= 1.0 - 1e-12);
            let t = (diffs.len() * (diffs.len() + 1)) as f64 / 2.0;
            prop_assert!((w.w_plus + w.w_minus - t).abs() < 1e-9);
        }
    }
}
