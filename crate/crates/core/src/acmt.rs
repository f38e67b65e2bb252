//! Attentive-correspondence movement transfer.
//!
//! Two point towers embed a source cloud (whose movement is known) and a
//! target cloud (whose movement is wanted). Projected to a common width they
//! give a correlation matrix `R = targetᵀ·source / N_source`. The source
//! movement, encoded point-wise by `θ` together with the source coordinates,
//! is carried to every target point through `R` and decoded by `φ` into a
//! 3-vector per target point.
//!
//! The same architecture runs face → bone for planning and bone → face for
//! simulation; only the roles of the clouds change.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::{PointSet, Vec3};
use crate::tensor_net::{
    self, Activation, EncDecCache, EncoderDecoderConfig, EncoderDecoderParams, LayerCache, LayerParams, LayerStack,
    Parameters, PointHierarchy, StackCache, Tensor2, TrainConfig, Trainable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Desired facial movement → bony movement (the planner).
    FaceToBone,
    /// Bony movement → facial movement (the simulator).
    BoneToFace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcmtConfig {
    pub tower: EncoderDecoderConfig,
    /// Common width both towers are projected to.
    pub proj_dim: usize,
    /// Hidden and output widths of the movement encoder θ (input is 6).
    pub theta_dims: Vec<usize>,
    /// Widths of the decoder φ; the last must be 3.
    pub phi_dims: Vec<usize>,
    /// Network units per millimetre of movement.
    pub movement_scale: f64,
    /// Standardize each transferred channel over the target points before φ.
    pub standardize_transfer: bool,
    /// Feed cranium points to the bone tower as context.
    pub cranium_context: bool,
}

impl Default for AcmtConfig {
    fn default() -> Self {
        Self {
            tower: EncoderDecoderConfig::default(),
            proj_dim: 64,
            theta_dims: vec![64, 128],
            phi_dims: vec![64, 3],
            movement_scale: 0.2,
            standardize_transfer: false,
            cranium_context: true,
        }
    }
}

impl AcmtConfig {
    pub fn scaled(width_div: usize, point_div: usize) -> Self {
        let wd = width_div.max(1);
        let base = Self::default();
        Self {
            tower: EncoderDecoderConfig::scaled(width_div, point_div),
            proj_dim: (base.proj_dim / wd).max(1),
            theta_dims: base.theta_dims.iter().map(|d| (d / wd).max(1)).collect(),
            phi_dims: vec![(base.phi_dims[0] / wd).max(1), 3],
            ..base
        }
    }

    /// Single-layer θ and φ.
    pub fn single_layer_heads(mut self) -> Self {
        let width = self.tower.dims[7];
        self.theta_dims = vec![width];
        self.phi_dims = vec![3];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.proj_dim == 0 || self.theta_dims.is_empty() || self.phi_dims.is_empty() {
            return Err(invalid("projection, θ and φ widths must be non-empty"));
        }
        if self.phi_dims.last() != Some(&3) {
            return Err(invalid("φ must end in 3 output channels"));
        }
        if !(self.movement_scale > 0.0) || !(self.tower.coord_scale > 0.0) {
            return Err(invalid("coordinate and movement scales must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcmtModel {
    pub direction: Direction,
    pub config: AcmtConfig,
    pub source_tower: EncoderDecoderParams,
    pub target_tower: EncoderDecoderParams,
    pub source_head: LayerParams,
    pub target_head: LayerParams,
    pub theta: LayerStack,
    pub phi: LayerStack,
}

/// `N_target × N_source` normalized dot products of projected features.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(pub Tensor2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementField {
    pub base: PointSet,
    pub vectors: Vec<Vec3>,
}

impl MovementField {
    pub fn new(base: PointSet, vectors: Vec<Vec3>) -> Result<Self> {
        let f = Self { base, vectors };
        f.validate()?;
        Ok(f)
    }

    pub fn zeros(base: PointSet) -> Self {
        let n = base.len();
        Self {
            base,
            vectors: vec![Vec3::zeros(); n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.vectors.len() != self.base.len() {
            return Err(invalid(format!(
                "movement field has {} vectors for {} points",
                self.vectors.len(),
                self.base.len()
            )));
        }
        if self.vectors.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(invalid("movement field has non-finite vectors"));
        }
        Ok(())
    }

    /// The moved points `base + vectors`.
    pub fn moved(&self) -> PointSet {
        PointSet {
            coords: self.base.coords.iter().zip(&self.vectors).map(|(p, v)| p + v).collect(),
            normals: None,
        }
    }
}

pub fn correlation(target_feats: &Tensor2, source_feats: &Tensor2) -> Result<CorrelationMatrix> {
    if target_feats.rows != source_feats.rows {
        return Err(invalid(format!(
            "feature widths differ: target {} vs source {}",
            target_feats.rows, source_feats.rows
        )));
    }
    if source_feats.cols == 0 {
        return Err(invalid("source cloud is empty"));
    }
    let mut r = target_feats.matmul_tn(source_feats)?;
    r.scale(1.0 / source_feats.cols as f64);
    Ok(CorrelationMatrix(r))
}

/// Everything the network needs about one (source, target) pair that does not
/// depend on the parameters.
#[derive(Debug, Clone)]
pub struct AcmtInput {
    source_h: PointHierarchy,
    source_x: Tensor2,
    target_h: PointHierarchy,
    target_x: Tensor2,
    theta_in: Tensor2,
}

impl AcmtInput {
    pub fn n_source(&self) -> usize {
        self.theta_in.cols
    }

    pub fn n_target(&self) -> usize {
        self.target_x.cols
    }
}

#[derive(Debug, Clone)]
struct StdCache {
    normalized: Tensor2,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    source: EncDecCache,
    target: EncDecCache,
    source_head: LayerCache,
    target_head: LayerCache,
    theta: StackCache,
    a_source: Tensor2,
    a_target: Tensor2,
    theta_out: Tensor2,
    summary: Tensor2,
    standardize: Option<StdCache>,
    phi: StackCache,
}

const STD_EPS: f64 = 1e-5;

fn standardize_rows(x: &Tensor2) -> StdCache {
    let n = x.cols as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + STD_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    StdCache {
        normalized: out,
        inv_std,
    }
}

fn standardize_backward(cache: &StdCache, upstream: &Tensor2) -> Tensor2 {
    let n = upstream.cols as f64;
    let mut dx = upstream.clone();
    for r in 0..upstream.rows {
        let y = cache.normalized.row(r);
        let dy = upstream.row(r);
        let mean_dy = dy.iter().sum::<f64>() / n;
        let mean_dy_y = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
        let inv = cache.inv_std[r];
        for ((d, g), yy) in dx.row_mut(r).iter_mut().zip(dy).zip(y) {
            *d = inv * (g - mean_dy - yy * mean_dy_y);
        }
    }
    dx
}

impl AcmtModel {
    /// Seeded initialization. `zero_output` zeroes the last φ layer so the
    /// untrained model predicts no movement. The projection heads keep
    /// their random weights: with both at zero the correlation is zero and
    /// neither head would ever receive a gradient.
    pub fn new(direction: Direction, config: AcmtConfig, seed: u64, zero_output: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source_tower = EncoderDecoderParams::glorot(config.tower.clone(), &mut rng);
        let target_tower = EncoderDecoderParams::glorot(config.tower.clone(), &mut rng);
        let feat = source_tower.output_dim();
        let source_head = LayerParams::glorot(feat, config.proj_dim, Activation::Identity, &mut rng);
        let target_head = LayerParams::glorot(feat, config.proj_dim, Activation::Identity, &mut rng);
        let theta = LayerStack::glorot(6, &config.theta_dims, Activation::Identity, &mut rng);
        let mut phi = LayerStack::glorot(theta.out_dim(), &config.phi_dims, Activation::Identity, &mut rng);
        if zero_output {
            phi.zero_last();
        }
        Ok(Self {
            direction,
            config,
            source_tower,
            target_tower,
            source_head,
            target_head,
            theta,
            phi,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.source_tower.validate()?;
        self.target_tower.validate()?;
        self.source_head.validate()?;
        self.target_head.validate()?;
        self.theta.validate()?;
        self.phi.validate()?;
        if self.source_head.out_dim() != self.target_head.out_dim() {
            return Err(invalid("projection heads have different output widths"));
        }
        if self.source_head.in_dim() != self.source_tower.output_dim()
            || self.target_head.in_dim() != self.target_tower.output_dim()
        {
            return Err(invalid("projection head does not match its tower"));
        }
        if self.theta.in_dim() != 6 {
            return Err(invalid("θ must take 6 input channels"));
        }
        if self.phi.in_dim() != self.theta.out_dim() || self.phi.out_dim() != 3 {
            return Err(invalid("φ must map θ's width to 3 channels"));
        }
        Ok(())
    }

    fn theta_input(&self, source_points: &PointSet, source_movement: &[Vec3]) -> Result<Tensor2> {
        if source_movement.len() != source_points.len() {
            return Err(invalid(format!(
                "{} movement vectors for {} source points",
                source_movement.len(),
                source_points.len()
            )));
        }
        let cs = self.config.tower.coord_scale;
        let ms = self.config.movement_scale;
        Ok(Tensor2::from_fn(6, source_points.len(), |r, c| {
            if r < 3 {
                source_points.coords[c][r] * cs
            } else {
                source_movement[c][r - 3] * ms
            }
        }))
    }

    pub fn prepare(&self, source_points: &PointSet, target_points: &PointSet, source_movement: &[Vec3]) -> Result<AcmtInput> {
        Ok(AcmtInput {
            source_h: self.source_tower.hierarchy(source_points)?,
            source_x: self.source_tower.input_features(source_points)?,
            target_h: self.target_tower.hierarchy(target_points)?,
            target_x: self.target_tower.input_features(target_points)?,
            theta_in: self.theta_input(source_points, source_movement)?,
        })
    }

    /// Projected per-point features `(source, target)`, each `d × N`.
    pub fn projected_features(&self, input: &AcmtInput) -> Result<(Tensor2, Tensor2)> {
        let (fs, _) = self.source_tower.forward_cached(&input.source_h, &input.source_x)?;
        let (ft, _) = self.target_tower.forward_cached(&input.target_h, &input.target_x)?;
        Ok((self.source_head.forward(&fs)?, self.target_head.forward(&ft)?))
    }

    fn forward_cached(&self, input: &AcmtInput) -> Result<(Tensor2, ForwardCache)> {
        let (fs, source) = self.source_tower.forward_cached(&input.source_h, &input.source_x)?;
        let (ft, target) = self.target_tower.forward_cached(&input.target_h, &input.target_x)?;
        let (a_source, source_head) = self.source_head.forward_cached(&fs)?;
        let (a_target, target_head) = self.target_head.forward_cached(&ft)?;
        let (theta_out, theta) = self.theta.forward_cached(&input.theta_in)?;
        // Θ·Rᵀ = (Θ·A_sᵀ / N_s)·A_t, contracting over the source points first.
        let mut summary = theta_out.matmul_nt(&a_source)?;
        summary.scale(1.0 / input.n_source() as f64);
        let transferred = summary.matmul(&a_target)?;
        let (phi_in, standardize) = if self.config.standardize_transfer {
            let c = standardize_rows(&transferred);
            (c.normalized.clone(), Some(c))
        } else {
            (transferred, None)
        };
        let (out, phi) = self.phi.forward_cached(&phi_in)?;
        Ok((
            out,
            ForwardCache {
                source,
                target,
                source_head,
                target_head,
                theta,
                a_source,
                a_target,
                theta_out,
                summary,
                standardize,
                phi,
            },
        ))
    }

    fn backward_cached(&self, input: &AcmtInput, cache: &ForwardCache, d_out: &Tensor2) -> Result<AcmtModel> {
        let mut grads = self.zeroed();
        let mut d_transfer = self.phi.backward(&cache.phi, d_out, &mut grads.phi);
        if let Some(std) = &cache.standardize {
            d_transfer = standardize_backward(std, &d_transfer);
        }
        let n_s = input.n_source() as f64;
        let d_summary = d_transfer.matmul_nt(&cache.a_target)?;
        let d_a_target = cache.summary.matmul_tn(&d_transfer)?;
        let mut d_theta = d_summary.matmul(&cache.a_source)?;
        d_theta.scale(1.0 / n_s);
        let mut d_a_source = d_summary.matmul_tn(&cache.theta_out)?;
        d_a_source.scale(1.0 / n_s);

        self.theta.backward(&cache.theta, &d_theta, &mut grads.theta);
        let d_fs = self.source_head.backward(&cache.source_head, &d_a_source, &mut grads.source_head);
        let d_ft = self.target_head.backward(&cache.target_head, &d_a_target, &mut grads.target_head);
        self.source_tower
            .backward(&input.source_h, &cache.source, &d_fs, &mut grads.source_tower);
        self.target_tower
            .backward(&input.target_h, &cache.target, &d_ft, &mut grads.target_tower);
        Ok(grads)
    }

    /// Predicted target movement in millimetres for a prepared input.
    pub fn predict(&self, input: &AcmtInput) -> Result<Vec<Vec3>> {
        let (out, _) = self.forward_cached(input)?;
        Ok(self.to_vectors(&out))
    }

    fn to_vectors(&self, out: &Tensor2) -> Vec<Vec3> {
        let inv = 1.0 / self.config.movement_scale;
        (0..out.cols)
            .map(|j| Vec3::new(out.get(0, j), out.get(1, j), out.get(2, j)) * inv)
            .collect()
    }

    /// Mean squared error (mm²) of the predicted target movement and its
    /// flat parameter gradient.
    pub fn mse_and_grad(&self, input: &AcmtInput, target_movement: &[Vec3]) -> Result<(f64, AcmtModel)> {
        let n_t = input.n_target();
        if target_movement.len() != n_t {
            return Err(invalid(format!(
                "{} ground-truth vectors for {} target points",
                target_movement.len(),
                n_t
            )));
        }
        let (out, cache) = self.forward_cached(input)?;
        let inv_ms = 1.0 / self.config.movement_scale;
        let denom = (3 * n_t) as f64;
        let mut loss = 0.0;
        let mut d_out = Tensor2::zeros(3, n_t);
        for j in 0..n_t {
            for r in 0..3 {
                let diff = out.get(r, j) * inv_ms - target_movement[j][r];
                loss += diff * diff;
                d_out.set(r, j, 2.0 * diff * inv_ms / denom);
            }
        }
        let grads = self.backward_cached(input, &cache, &d_out)?;
        Ok((loss / denom, grads))
    }
}

impl Parameters for AcmtModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.source_tower.visit(f);
        self.target_tower.visit(f);
        self.source_head.visit(f);
        self.target_head.visit(f);
        self.theta.visit(f);
        self.phi.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.source_tower.visit_mut(f);
        self.target_tower.visit_mut(f);
        self.source_head.visit_mut(f);
        self.target_head.visit_mut(f);
        self.theta.visit_mut(f);
        self.phi.visit_mut(f);
    }
}

/// A recorded forward pass that can be differentiated.
pub struct AcmtGraph<'a> {
    model: &'a AcmtModel,
    input: AcmtInput,
    cache: Option<ForwardCache>,
}

impl<'a> AcmtGraph<'a> {
    pub fn new(model: &'a AcmtModel, input: AcmtInput) -> Self {
        Self {
            model,
            input,
            cache: None,
        }
    }

    pub fn forward(&mut self) -> Result<Vec<Vec3>> {
        let (out, cache) = self.model.forward_cached(&self.input)?;
        self.cache = Some(cache);
        Ok(self.model.to_vectors(&out))
    }

    /// Parameter gradients for an upstream gradient on the predicted
    /// movement (per target point, in mm).
    pub fn backward(&self, upstream: &[Vec3]) -> Result<AcmtModel> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if upstream.len() != self.input.n_target() {
            return Err(invalid("upstream gradient length differs from the target cloud"));
        }
        let inv_ms = 1.0 / self.model.config.movement_scale;
        let d_out = Tensor2::from_fn(3, upstream.len(), |r, c| upstream[c][r] * inv_ms);
        self.model.backward_cached(&self.input, cache, &d_out)
    }
}

/// Carries encoded source movement to the target points through an explicit
/// correlation matrix and decodes it with φ.
pub fn transfer_movement(
    model: &AcmtModel,
    source_points: &PointSet,
    source_movement: &MovementField,
    r: &CorrelationMatrix,
) -> Result<Vec<Vec3>> {
    if source_movement.base.len() != source_points.len() {
        return Err(invalid("movement field is not defined on the source points"));
    }
    if r.0.cols != source_points.len() {
        return Err(invalid(format!(
            "correlation has {} source columns for {} source points",
            r.0.cols,
            source_points.len()
        )));
    }
    let theta_in = model.theta_input(source_points, &source_movement.vectors)?;
    let theta_out = model.theta.forward(&theta_in)?;
    let mut transferred = theta_out.matmul_nt(&r.0)?;
    if model.config.standardize_transfer {
        transferred = standardize_rows(&transferred).normalized;
    }
    let out = model.phi.forward(&transferred)?;
    Ok(model.to_vectors(&out))
}

/// Full network pass: movement on `target_points` driven by the movement
/// known on `source_points`.
pub fn forward(
    model: &AcmtModel,
    source_points: &PointSet,
    target_points: &PointSet,
    source_movement: &MovementField,
) -> Result<MovementField> {
    if source_movement.base.len() != source_points.len() {
        return Err(invalid("movement field is not defined on the source points"));
    }
    let input = model.prepare(source_points, target_points, &source_movement.vectors)?;
    let vectors = model.predict(&input)?;
    MovementField::new(target_points.clone(), vectors)
}

/// One supervised pair for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcmtSample {
    pub source_points: PointSet,
    pub target_points: PointSet,
    pub source_movement: Vec<Vec3>,
    pub target_movement: Vec<Vec3>,
}

pub struct PreparedSample {
    pub input: AcmtInput,
    pub target_movement: Vec<Vec3>,
}

impl Trainable for AcmtModel {
    type Sample = PreparedSample;

    fn loss_and_grad(&self, sample: &PreparedSample) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = self.mse_and_grad(&sample.input, &sample.target_movement)?;
        Ok((loss, grads.flat()))
    }
}

impl AcmtModel {
    pub fn prepare_samples(&self, dataset: &[AcmtSample]) -> Result<Vec<PreparedSample>> {
        dataset
            .par_iter()
            .map(|s| {
                if s.target_movement.len() != s.target_points.len() {
                    return Err(invalid("ground-truth movement does not match the target cloud"));
                }
                Ok(PreparedSample {
                    input: self.prepare(&s.source_points, &s.target_points, &s.source_movement)?,
                    target_movement: s.target_movement.clone(),
                })
            })
            .collect()
    }

    pub fn mean_loss(&self, prepared: &[PreparedSample]) -> Result<f64> {
        if prepared.is_empty() {
            return Err(invalid("no samples"));
        }
        let losses: Result<Vec<f64>> = prepared.par_iter().map(|s| self.loss(s)).collect();
        Ok(losses?.iter().sum::<f64>() / prepared.len() as f64)
    }
}

/// Trains on `dataset` with mean-squared error on the target movement.
/// Returns the per-epoch mean training loss.
pub fn train(
    model: &mut AcmtModel,
    dataset: &[AcmtSample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let prepared = model.prepare_samples(dataset)?;
    tensor_net::train(model, &prepared, cfg, on_epoch)
}

/// A model small enough to difference every parameter in a few seconds,
/// with the same blocks as the full network.
pub fn gradcheck_config() -> AcmtConfig {
    AcmtConfig {
        tower: EncoderDecoderConfig {
            dims: [4, 6, 8, 8, 8, 6, 4, 4],
            point_counts: [12, 8, 4, 2, 4, 8, 12, 24],
            radii_mm: [15.0, 25.0, 40.0, 80.0],
            layers_per_block: 1,
            neighbor_cap: 4,
            ..EncoderDecoderConfig::default()
        },
        proj_dim: 4,
        theta_dims: vec![4, 6],
        phi_dims: vec![4, 3],
        ..AcmtConfig::default()
    }
}

/// Seed of the toy model checked by default. Max-pooling and ReLU are not
/// differentiable everywhere; for some seeds a kink lies within `±h` of a
/// parameter and the central difference straddles it.
pub const GRADCHECK_SEED: u64 = 1;

/// Maximum relative error between the analytic and finite-difference
/// gradient of the movement loss, for a random model on random clouds.
///
/// Every parameter is jittered by up to `0.05` so that no ReLU input sits
/// exactly on its kink, where the two one-sided derivatives differ.
pub fn toy_gradient_check(seed: u64, standardize_transfer: bool, h: f64) -> Result<f64> {
    let mut config = gradcheck_config();
    config.standardize_transfer = standardize_transfer;
    let mut model = AcmtModel::new(Direction::FaceToBone, config, seed, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let jittered: Vec<f64> = model.flat().iter().map(|p| p + rng.random_range(-0.05..0.05)).collect();
    model.set_flat(&jittered)?;
    let mut cloud = |n: usize, offset: f64| {
        let coords = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0) + offset,
                    rng.random_range(-30.0..30.0),
                )
            })
            .collect();
        PointSet::new(coords)
    };
    let source = cloud(24, 15.0)?;
    let target = cloud(20, 0.0)?;
    let mut moves = |n: usize| -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect()
    };
    let source_movement = moves(24);
    let gt = moves(20);
    let input = model.prepare(&source, &target, &source_movement)?;
    let f = |p: &[f64]| {
        let mut m = model.clone();
        m.set_flat(p).expect("parameter count is fixed");
        let (l, g) = m.mse_and_grad(&input, &gt).expect("input was prepared for this model");
        (l, g.flat())
    };
    Ok(tensor_net::finite_diff_check(f, &model.flat(), h))
}
