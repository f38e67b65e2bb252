use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{dot, Tensor2};
use crate::error::{invalid, Result};

/// Anything owning trainable scalars. Visiting order is fixed, which is what
/// makes the flat parameter/gradient vectors line up.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_params();
        if values.len() != n {
            return Err(invalid(format!("expected {n} parameters, got {}", values.len())));
        }
        let mut offset = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = 0.0));
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Identity,
}

/// Kernel-size-1 convolution: one linear map shared by every point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// out × in
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Tensor2,
    output: Tensor2,
}

impl LayerParams {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor2::zeros(output, input),
            bias: vec![0.0; output],
            activation,
        }
    }

    /// Uniform in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot(input: usize, output: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + output).max(1) as f64).sqrt();
        let mut layer = Self::zeros(input, output, activation);
        layer
            .weight
            .data
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..bound));
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn validate(&self) -> Result<()> {
        self.weight.validate()?;
        if self.bias.len() != self.weight.rows {
            return Err(invalid(format!(
                "bias length {} does not match {} outputs",
                self.bias.len(),
                self.weight.rows
            )));
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(invalid("bias contains non-finite values"));
        }
        Ok(())
    }

    fn check_input(&self, features: &Tensor2) -> Result<()> {
        if features.rows != self.in_dim() {
            return Err(invalid(format!(
                "layer expects {} input channels, got {}",
                self.in_dim(),
                features.rows
            )));
        }
        Ok(())
    }

    /// Column `j` of the output is `act(W · xⱼ + b)`.
    pub fn forward(&self, features: &Tensor2) -> Result<Tensor2> {
        self.check_input(features)?;
        let n = features.cols;
        let mut out = Tensor2::zeros(self.out_dim(), n);
        for o in 0..self.out_dim() {
            let out_row = &mut out.data[o * n..(o + 1) * n];
            out_row.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_dim() {
                let w = self.weight.get(o, i);
                if w == 0.0 {
                    continue;
                }
                for (v, x) in out_row.iter_mut().zip(features.row(i)) {
                    *v += w * x;
                }
            }
            if self.activation == Activation::ReLU {
                out_row.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(out)
    }

    pub fn forward_cached(&self, features: &Tensor2) -> Result<(Tensor2, LayerCache)> {
        let out = self.forward(features)?;
        Ok((
            out.clone(),
            LayerCache {
                input: features.clone(),
                output: out,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the layer input.
    pub fn backward(&self, cache: &LayerCache, upstream: &Tensor2, grads: &mut LayerParams) -> Tensor2 {
        let n = upstream.cols;
        let mut dz = upstream.clone();
        if self.activation == Activation::ReLU {
            for (d, y) in dz.data.iter_mut().zip(&cache.output.data) {
                if *y <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        for o in 0..self.out_dim() {
            let dz_row = &dz.data[o * n..(o + 1) * n];
            grads.bias[o] += dz_row.iter().sum::<f64>();
            for i in 0..self.in_dim() {
                grads.weight.data[o * self.in_dim() + i] += dot(dz_row, cache.input.row(i));
            }
        }
        let mut dx = Tensor2::zeros(self.in_dim(), n);
        for o in 0..self.out_dim() {
            let dz_row = &dz.data[o * n..(o + 1) * n];
            for i in 0..self.in_dim() {
                let w = self.weight.get(o, i);
                if w == 0.0 {
                    continue;
                }
                for (d, g) in dx.data[i * n..(i + 1) * n].iter_mut().zip(dz_row) {
                    *d += w * g;
                }
            }
        }
        dx
    }
}

impl Parameters for LayerParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.weight.data);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.weight.data);
        f(&mut self.bias);
    }
}

/// A sequence of shared maps applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    layers: Vec<LayerCache>,
}

impl LayerStack {
    /// Layers `input → dims[0] → … → dims[last]`; ReLU everywhere except the
    /// last layer, which uses `last_activation`.
    pub fn glorot(input: usize, dims: &[usize], last_activation: Activation, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = input;
        for (k, &d) in dims.iter().enumerate() {
            let act = if k + 1 == dims.len() {
                last_activation
            } else {
                Activation::ReLU
            };
            layers.push(LayerParams::glorot(prev, d, act, rng));
            prev = d;
        }
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("layer stack is empty"));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(invalid(format!(
                    "layer {k} outputs {} channels but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        self.layers.iter().try_for_each(LayerParams::validate)
    }

    pub fn forward(&self, features: &Tensor2) -> Result<Tensor2> {
        let mut x = features.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, features: &Tensor2) -> Result<(Tensor2, StackCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = features.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward_cached(&x)?;
            caches.push(c);
            x = y;
        }
        Ok((x, StackCache { layers: caches }))
    }

    pub fn backward(&self, cache: &StackCache, upstream: &Tensor2, grads: &mut LayerStack) -> Tensor2 {
        let mut g = upstream.clone();
        for ((layer, c), lg) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            g = layer.backward(c, &g, lg);
        }
        g
    }

    /// Zeroes the final layer so the stack outputs exactly zero.
    pub fn zero_last(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data.iter_mut().for_each(|v| *v = 0.0);
            last.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl Parameters for LayerStack {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}
