//! Hierarchical point encoder-decoder: four set-abstraction blocks (sample,
//! group, shared map, max-pool) and four feature-propagation blocks
//! (3-NN inverse-distance interpolation, skip concatenation, shared map).
//!
//! Sampling and grouping only look at coordinates, so they are computed once
//! per cloud into a [`PointHierarchy`] and reused across training steps.
//! Every neighbour search breaks ties on coordinates, never on input order,
//! which keeps the per-point output equivariant to point permutations.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Activation, LayerStack, Parameters, StackCache};
use super::tensor::Tensor2;
use crate::error::{invalid, Result};
use crate::geom::{idw_weights, lex_cmp, nearest_k, PointSet, Vec3};

/// Per-point features fed to the first block alongside local coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputFeatures {
    /// Local (centred) coordinates only; the tower is translation invariant.
    None,
    /// Absolute coordinates, scaled to network units.
    Xyz,
    Normals,
    XyzNormals,
}

impl InputFeatures {
    pub fn channels(self) -> usize {
        match self {
            InputFeatures::None => 0,
            InputFeatures::Xyz | InputFeatures::Normals => 3,
            InputFeatures::XyzNormals => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDecoderConfig {
    /// Output channels of the four encoder then four decoder blocks.
    pub dims: [usize; 8],
    /// Nominal point counts per block. The encoder counts drive sampling; the
    /// decoder counts follow from the encoder levels and the input size.
    pub point_counts: [usize; 8],
    /// Ball-query radius per encoder block, millimetres.
    pub radii_mm: [f64; 4],
    pub layers_per_block: usize,
    pub neighbor_cap: usize,
    pub input: InputFeatures,
    /// Network units per millimetre.
    pub coord_scale: f64,
}

pub const FULL_DIMS: [usize; 8] = [128, 256, 512, 1024, 512, 256, 128, 128];
pub const FULL_POINT_COUNTS: [usize; 8] = [1024, 512, 256, 64, 256, 512, 1024, 4096];
pub const FULL_RADII_MM: [f64; 4] = [10.0, 20.0, 40.0, 80.0];

impl Default for EncoderDecoderConfig {
    fn default() -> Self {
        Self {
            dims: FULL_DIMS,
            point_counts: FULL_POINT_COUNTS,
            radii_mm: FULL_RADII_MM,
            layers_per_block: 2,
            neighbor_cap: 16,
            input: InputFeatures::Xyz,
            coord_scale: 0.02,
        }
    }
}

impl EncoderDecoderConfig {
    /// Divides channel widths by `width_div` and point counts by `point_div`,
    /// widening the radii to follow the sparser sampling.
    pub fn scaled(width_div: usize, point_div: usize) -> Self {
        let base = Self::default();
        let wd = width_div.max(1);
        let pd = point_div.max(1);
        let radius_factor = ((pd as f64).sqrt() / 2.0).max(1.0);
        Self {
            dims: base.dims.map(|d| (d / wd).max(1)),
            point_counts: base.point_counts.map(|c| (c / pd).max(1)),
            radii_mm: base.radii_mm.map(|r| r * radius_factor),
            ..base
        }
    }

    pub fn output_dim(&self) -> usize {
        self.dims[7]
    }

    /// Smallest cloud the tower accepts.
    pub fn min_points(&self) -> usize {
        self.point_counts[3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAbstraction {
    pub npoint: usize,
    pub radius_mm: f64,
    pub mlp: LayerStack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePropagation {
    pub npoint: usize,
    pub mlp: LayerStack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDecoderParams {
    pub config: EncoderDecoderConfig,
    pub encoders: Vec<SetAbstraction>,
    pub decoders: Vec<FeaturePropagation>,
}

/// Sampling, grouping and interpolation indices for one cloud.
#[derive(Debug, Clone)]
pub struct PointHierarchy {
    /// Level 0 is the input cloud; level `l + 1` is sampled from level `l`.
    pub levels: Vec<Vec<Vec3>>,
    /// Per encoder: index of each centroid within its parent level.
    pub centroids: Vec<Vec<usize>>,
    /// Per encoder: neighbour indices (into the parent level) of each centroid.
    pub groups: Vec<Vec<Vec<usize>>>,
    /// Per decoder: for each fine point, `(coarse index, weight)` pairs.
    pub interp: Vec<Vec<Vec<(usize, f64)>>>,
}

#[derive(Debug, Clone)]
struct SaCache {
    mlp: StackCache,
    /// `argmax[ch * n_centroids + c]` is the winning pair column.
    argmax: Vec<usize>,
    pairs: usize,
}

#[derive(Debug, Clone)]
struct FpCache {
    mlp: StackCache,
    coarse_dim: usize,
}

#[derive(Debug, Clone)]
pub struct EncDecCache {
    sa: Vec<SaCache>,
    fp: Vec<FpCache>,
    level_dims: Vec<usize>,
}

/// Farthest-point sampling with an order-independent seed (the
/// lexicographically smallest point) and coordinate tie-breaks.
pub fn canonical_fps(coords: &[Vec3], k: usize) -> Vec<usize> {
    let n = coords.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let better = |i: usize, j: usize| lex_cmp(&coords[i], &coords[j]).then(i.cmp(&j)) == Ordering::Less;
    let mut seed = 0;
    for i in 1..n {
        if better(i, seed) {
            seed = i;
        }
    }
    let mut selected = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(k);
    let mut current = seed;
    for _ in 0..k {
        out.push(current);
        selected[current] = true;
        let c = coords[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = (coords[i] - c).norm_squared();
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if selected[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => match min_d2[i].total_cmp(&min_d2[b]) {
                    Ordering::Greater => Some(i),
                    Ordering::Equal if better(i, b) => Some(i),
                    _ => Some(b),
                },
            };
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    out
}

/// Up to `cap` nearest points within `radius` of `center`; falls back to the
/// single nearest point when the ball is empty.
pub fn ball_query(coords: &[Vec3], center: &Vec3, radius: f64, cap: usize) -> Vec<usize> {
    let near = nearest_k(coords, center, cap.max(1));
    let inside: Vec<usize> = near.iter().filter(|(_, d)| *d <= radius).map(|(i, _)| *i).collect();
    if inside.is_empty() {
        vec![near[0].0]
    } else {
        inside
    }
}

impl PointHierarchy {
    pub fn build(config: &EncoderDecoderConfig, coords: &[Vec3]) -> Result<Self> {
        let n = coords.len();
        if n < config.min_points() {
            return Err(invalid(format!(
                "cloud has {n} points but the coarsest level needs {}",
                config.min_points()
            )));
        }
        let mut levels = vec![coords.to_vec()];
        let mut centroids = Vec::with_capacity(4);
        let mut groups = Vec::with_capacity(4);
        for l in 0..4 {
            let parent = &levels[l];
            let idx = canonical_fps(parent, config.point_counts[l]);
            let g: Vec<Vec<usize>> = idx
                .iter()
                .map(|&c| ball_query(parent, &parent[c], config.radii_mm[l], config.neighbor_cap))
                .collect();
            let child: Vec<Vec3> = idx.iter().map(|&i| parent[i]).collect();
            centroids.push(idx);
            groups.push(g);
            levels.push(child);
        }
        let mut interp = Vec::with_capacity(4);
        for k in 0..4 {
            let coarse = &levels[4 - k];
            let fine = &levels[3 - k];
            let w: Vec<Vec<(usize, f64)>> = fine
                .iter()
                .map(|p| idw_weights(&nearest_k(coarse, p, 3)))
                .collect();
            interp.push(w);
        }
        Ok(Self {
            levels,
            centroids,
            groups,
            interp,
        })
    }
}

impl EncoderDecoderParams {
    pub fn glorot(config: EncoderDecoderConfig, rng: &mut impl Rng) -> Self {
        let d = config.dims;
        let c0 = config.input.channels();
        let layers = config.layers_per_block.max(1);
        let mut encoders = Vec::with_capacity(4);
        for l in 0..4 {
            let in_dim = if l == 0 { c0 } else { d[l - 1] } + 3;
            encoders.push(SetAbstraction {
                npoint: config.point_counts[l],
                radius_mm: config.radii_mm[l],
                mlp: LayerStack::glorot(in_dim, &vec![d[l]; layers], Activation::ReLU, rng),
            });
        }
        let skip_dims = [d[2], d[1], d[0], c0];
        let mut decoders = Vec::with_capacity(4);
        for k in 0..4 {
            let coarse = if k == 0 { d[3] } else { d[3 + k] };
            decoders.push(FeaturePropagation {
                npoint: config.point_counts[4 + k],
                mlp: LayerStack::glorot(coarse + skip_dims[k], &vec![d[4 + k]; layers], Activation::ReLU, rng),
            });
        }
        Self {
            config,
            encoders,
            decoders,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.decoders.last().map_or(0, |d| d.mlp.out_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.len() != 4 || self.decoders.len() != 4 {
            return Err(invalid("encoder-decoder needs four encoder and four decoder blocks"));
        }
        let c0 = self.config.input.channels();
        let mut level_dims = vec![c0];
        for (l, e) in self.encoders.iter().enumerate() {
            e.mlp.validate()?;
            if e.mlp.in_dim() != level_dims[l] + 3 {
                return Err(invalid(format!("encoder {l} input width mismatch")));
            }
            level_dims.push(e.mlp.out_dim());
        }
        let mut coarse = level_dims[4];
        for (k, dblock) in self.decoders.iter().enumerate() {
            dblock.mlp.validate()?;
            if dblock.mlp.in_dim() != coarse + level_dims[3 - k] {
                return Err(invalid(format!("decoder {k} input width mismatch")));
            }
            coarse = dblock.mlp.out_dim();
        }
        Ok(())
    }

    pub fn hierarchy(&self, points: &PointSet) -> Result<PointHierarchy> {
        PointHierarchy::build(&self.config, &points.coords)
    }

    /// Level-0 feature matrix for `points` according to the input mode.
    pub fn input_features(&self, points: &PointSet) -> Result<Tensor2> {
        let n = points.len();
        let s = self.config.coord_scale;
        let normals = || {
            points
                .normals
                .as_ref()
                .ok_or_else(|| invalid("this tower needs point normals"))
        };
        Ok(match self.config.input {
            InputFeatures::None => Tensor2::zeros(0, n),
            InputFeatures::Xyz => Tensor2::from_fn(3, n, |r, c| points.coords[c][r] * s),
            InputFeatures::Normals => {
                let nm = normals()?;
                Tensor2::from_fn(3, n, |r, c| nm[c][r])
            }
            InputFeatures::XyzNormals => {
                let nm = normals()?;
                Tensor2::from_fn(6, n, |r, c| if r < 3 { points.coords[c][r] * s } else { nm[c][r - 3] })
            }
        })
    }

    pub fn forward(&self, points: &PointSet) -> Result<Tensor2> {
        let h = self.hierarchy(points)?;
        let x = self.input_features(points)?;
        Ok(self.forward_cached(&h, &x)?.0)
    }

    pub fn forward_cached(&self, h: &PointHierarchy, input: &Tensor2) -> Result<(Tensor2, EncDecCache)> {
        if input.cols != h.levels[0].len() {
            return Err(invalid(format!(
                "input features cover {} points, hierarchy has {}",
                input.cols,
                h.levels[0].len()
            )));
        }
        if input.rows != self.config.input.channels() {
            return Err(invalid(format!(
                "tower expects {} input channels, got {}",
                self.config.input.channels(),
                input.rows
            )));
        }
        let scale = self.config.coord_scale;
        let mut level_feats = vec![input.clone()];
        let mut sa_caches = Vec::with_capacity(4);
        for (l, block) in self.encoders.iter().enumerate() {
            let parent = &h.levels[l];
            let feats = &level_feats[l];
            let pairs: usize = h.groups[l].iter().map(Vec::len).sum();
            let rows = 3 + feats.rows;
            let mut x = Tensor2::zeros(rows, pairs);
            let mut col = 0;
            for (ci, group) in h.groups[l].iter().enumerate() {
                let center = parent[h.centroids[l][ci]];
                for &nb in group {
                    let rel = (parent[nb] - center) * scale;
                    x.set(0, col, rel[0]);
                    x.set(1, col, rel[1]);
                    x.set(2, col, rel[2]);
                    for r in 0..feats.rows {
                        x.set(3 + r, col, feats.get(r, nb));
                    }
                    col += 1;
                }
            }
            let (hidden, mlp_cache) = block.mlp.forward_cached(&x)?;
            let m = h.groups[l].len();
            let out_dim = hidden.rows;
            let mut pooled = Tensor2::zeros(out_dim, m);
            let mut argmax = vec![0usize; out_dim * m];
            for ch in 0..out_dim {
                let row = hidden.row(ch);
                let mut start = 0;
                for (ci, group) in h.groups[l].iter().enumerate() {
                    let mut best = start;
                    for p in start + 1..start + group.len() {
                        if row[p] > row[best] {
                            best = p;
                        }
                    }
                    pooled.set(ch, ci, row[best]);
                    argmax[ch * m + ci] = best;
                    start += group.len();
                }
            }
            sa_caches.push(SaCache {
                mlp: mlp_cache,
                argmax,
                pairs,
            });
            level_feats.push(pooled);
        }

        let mut fp_caches = Vec::with_capacity(4);
        let mut coarse_feats = level_feats[4].clone();
        for (k, block) in self.decoders.iter().enumerate() {
            let skip = &level_feats[3 - k];
            let weights = &h.interp[k];
            let nf = weights.len();
            let mut interp = Tensor2::zeros(coarse_feats.rows, nf);
            for (i, w) in weights.iter().enumerate() {
                for &(j, wt) in w {
                    for r in 0..coarse_feats.rows {
                        interp.add_at(r, i, wt * coarse_feats.get(r, j));
                    }
                }
            }
            let x = Tensor2::vstack(&interp, skip)?;
            let (out, mlp_cache) = block.mlp.forward_cached(&x)?;
            fp_caches.push(FpCache {
                mlp: mlp_cache,
                coarse_dim: coarse_feats.rows,
            });
            coarse_feats = out;
        }
        let level_dims = level_feats.iter().map(|f| f.rows).collect();
        Ok((
            coarse_feats,
            EncDecCache {
                sa: sa_caches,
                fp: fp_caches,
                level_dims,
            },
        ))
    }

    /// Accumulates parameter gradients for an upstream gradient on the output
    /// features. Input features are data, so no gradient is returned for them.
    pub fn backward(&self, h: &PointHierarchy, cache: &EncDecCache, upstream: &Tensor2, grads: &mut EncoderDecoderParams) {
        let sizes: Vec<usize> = h.levels.iter().map(Vec::len).collect();
        let mut d_levels: Vec<Tensor2> = (0..5)
            .map(|l| Tensor2::zeros(cache.level_dims[l], sizes[l]))
            .collect();

        let mut g = upstream.clone();
        for k in (0..4).rev() {
            let block = &self.decoders[k];
            let fc = &cache.fp[k];
            let dx = block.mlp.backward(&fc.mlp, &g, &mut grads.decoders[k].mlp);
            let (d_interp, d_skip) = dx.split_rows(fc.coarse_dim);
            let fine_level = 3 - k;
            if fine_level > 0 {
                d_levels[fine_level].add_assign(&d_skip);
            }
            let coarse_n = sizes[4 - k];
            let mut d_coarse = Tensor2::zeros(fc.coarse_dim, coarse_n);
            for (i, w) in h.interp[k].iter().enumerate() {
                for &(j, wt) in w {
                    for r in 0..fc.coarse_dim {
                        d_coarse.add_at(r, j, wt * d_interp.get(r, i));
                    }
                }
            }
            if k == 0 {
                d_levels[4].add_assign(&d_coarse);
            } else {
                g = d_coarse;
            }
        }

        for l in (0..4).rev() {
            let block = &self.encoders[l];
            let sc = &cache.sa[l];
            let m = h.groups[l].len();
            let out_dim = cache.level_dims[l + 1];
            let d_out = &d_levels[l + 1];
            let mut d_hidden = Tensor2::zeros(out_dim, sc.pairs);
            for ch in 0..out_dim {
                for ci in 0..m {
                    d_hidden.add_at(ch, sc.argmax[ch * m + ci], d_out.get(ch, ci));
                }
            }
            let dx = block.mlp.backward(&sc.mlp, &d_hidden, &mut grads.encoders[l].mlp);
            if l == 0 {
                continue;
            }
            let feat_rows = cache.level_dims[l];
            let mut col = 0;
            let mut d_parent = Tensor2::zeros(feat_rows, sizes[l]);
            for group in &h.groups[l] {
                for &nb in group {
                    for r in 0..feat_rows {
                        d_parent.add_at(r, nb, dx.get(3 + r, col));
                    }
                    col += 1;
                }
            }
            d_levels[l].add_assign(&d_parent);
        }
    }
}

impl Parameters for EncoderDecoderParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.encoders.iter().for_each(|e| e.mlp.visit(f));
        self.decoders.iter().for_each(|d| d.mlp.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.encoders.iter_mut().for_each(|e| e.mlp.visit_mut(f));
        self.decoders.iter_mut().for_each(|d| d.mlp.visit_mut(f));
    }
}
