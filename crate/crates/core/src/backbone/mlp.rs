//! Dense ReLU network with a flat parameter buffer, hand-written backprop and
//! AdamW state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTPUT_DIM: usize = 3;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Number of hidden layers.
    pub depth: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.depth == 0 {
            return Err(Error::Config(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer, input first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.input_dim, self.hidden_width)];
        shapes.extend((1..self.depth).map(|_| (self.hidden_width, self.hidden_width)));
        shapes.push((self.hidden_width, OUTPUT_DIM));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    fn zeros(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// All network weights plus optimizer state. `Clone` is a deep copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: MlpConfig,
    pub seed: u64,
    values: Vec<f64>,
    adam: AdamState,
}

/// Gradient buffer laid out exactly like [`ModelParams`] values.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Gradients(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().for_each(|g| *g *= c);
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|g| *g == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    rows: usize,
    /// Input to each layer (row-major, `rows x fan_in`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Smallest |pre-activation| over all hidden units; used to steer clear of
    /// ReLU kinks in finite-difference checks.
    pub fn min_hidden_margin(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flat_map(|z| z.iter().map(|v| v.abs())).fold(f64::INFINITY, f64::min)
    }
}

impl ModelParams {
    /// He-uniform weights, zero biases.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(config.param_count());
        for (fan_in, fan_out) in config.layer_shapes() {
            let limit = (6.0 / fan_in as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        let n = values.len();
        Ok(ModelParams { config, seed, values, adam: AdamState::zeros(n) })
    }

    /// Builds parameters from an explicit value buffer with fresh optimizer state.
    pub fn from_values(config: MlpConfig, seed: u64, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(Error::Shape { expected: config.param_count(), actual: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter value".into()));
        }
        let n = values.len();
        Ok(ModelParams { config, seed, values, adam: AdamState::zeros(n) })
    }

    /// Full validation of a deserialized checkpoint.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.config.param_count();
        for len in [self.values.len(), self.adam.m.len(), self.adam.v.len()] {
            if len != n {
                return Err(Error::Shape { expected: n, actual: len });
            }
        }
        if !self.is_finite() {
            return Err(Error::Numeric("non-finite parameter value".into()));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Runs the network over `rows` input rows laid out row-major. Fills
    /// `cache` for a later [`ModelParams::backward`] when one is supplied.
    pub fn forward(&self, inputs: &[f64], rows: usize, mut cache: Option<&mut ForwardCache>) -> Result<Vec<f64>> {
        let shapes = self.config.layer_shapes();
        if inputs.len() != rows * self.config.input_dim {
            return Err(Error::Shape { expected: rows * self.config.input_dim, actual: inputs.len() });
        }
        if let Some(c) = cache.as_deref_mut() {
            c.rows = rows;
            c.inputs.clear();
            c.pre.clear();
        }
        let mut act = inputs.to_vec();
        let mut offset = 0;
        let last = shapes.len() - 1;
        for (layer, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.values[offset..offset + fan_in * fan_out];
            let b = &self.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut z = vec![0.0; rows * fan_out];
            for (x, zr) in act.chunks_exact(fan_in).zip(z.chunks_exact_mut(fan_out)) {
                for ((zo, wo), bo) in zr.iter_mut().zip(w.chunks_exact(fan_in)).zip(b) {
                    *zo = bo + dot(wo, x);
                }
            }
            let next = if layer == last { z.clone() } else { z.iter().map(|v| v.max(0.0)).collect() };
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(std::mem::take(&mut act));
                c.pre.push(z);
            }
            act = next;
        }
        if act.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(act)
    }

    /// Gradient of a scalar loss given its derivative with respect to every raw output.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Result<Gradients> {
        if cache.is_empty() {
            return Err(Error::State("backward called without a cached forward pass".into()));
        }
        let rows = cache.rows;
        if d_out.len() != rows * OUTPUT_DIM {
            return Err(Error::Shape { expected: rows * OUTPUT_DIM, actual: d_out.len() });
        }
        let shapes = self.config.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(i, o) in &shapes {
            offsets.push(off);
            off += i * o + o;
        }
        let mut grads = Gradients::zeros(self.values.len());
        let mut dz = d_out.to_vec();
        for layer in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[layer];
            let base = offsets[layer];
            let w = &self.values[base..base + fan_in * fan_out];
            let input = &cache.inputs[layer];
            {
                let (gw, gb) = grads.0[base..base + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (x, dzr) in input.chunks_exact(fan_in).zip(dz.chunks_exact(fan_out)) {
                    for ((gwo, gbo), &d) in gw.chunks_exact_mut(fan_in).zip(gb.iter_mut()).zip(dzr) {
                        if d != 0.0 {
                            *gbo += d;
                            gwo.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                        }
                    }
                }
            }
            if layer == 0 {
                break;
            }
            let prev_pre = &cache.pre[layer - 1];
            let mut d_in = vec![0.0; rows * fan_in];
            for ((dir, dzr), zr) in
                d_in.chunks_exact_mut(fan_in).zip(dz.chunks_exact(fan_out)).zip(prev_pre.chunks_exact(fan_in))
            {
                for (&d, wo) in dzr.iter().zip(w.chunks_exact(fan_in)) {
                    if d != 0.0 {
                        dir.iter_mut().zip(wo).for_each(|(a, wi)| *a += d * wi);
                    }
                }
                dir.iter_mut().zip(zr).for_each(|(a, z)| {
                    if *z <= 0.0 {
                        *a = 0.0;
                    }
                });
            }
            dz = d_in;
        }
        Ok(grads)
    }

    /// One AdamW step with decoupled weight decay.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != self.values.len() {
            return Err(Error::Shape { expected: self.values.len(), actual: grads.len() });
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let AdamState { m, v, .. } = &mut self.adam;
        for (((p, g), m), v) in self.values.iter_mut().zip(&grads.0).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * weight_decay * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }

    /// Plain gradient step `theta - lr * grad` on a copy; optimizer state is carried over untouched.
    pub fn sgd_stepped(&self, grads: &Gradients, lr: f64) -> Result<ModelParams> {
        if grads.len() != self.values.len() {
            return Err(Error::Shape { expected: self.values.len(), actual: grads.len() });
        }
        let mut next = self.clone();
        next.values.iter_mut().zip(&grads.0).for_each(|(p, g)| *p -= lr * g);
        if !next.is_finite() {
            return Err(Error::Numeric("non-finite parameters after inner step".into()));
        }
        Ok(next)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlpConfig {
        MlpConfig { input_dim: 4, hidden_width: 5, depth: 2 }
    }

    #[test]
    fn param_count_matches_layout() {
        let c = small();
        assert_eq!(c.param_count(), (4 * 5 + 5) + (5 * 5 + 5) + (5 * 3 + 3));
        assert_eq!(ModelParams::init(c, 1).unwrap().len(), c.param_count());
    }

    #[test]
    fn init_biases_are_zero_and_deterministic() {
        let a = ModelParams::init(small(), 9).unwrap();
        let b = ModelParams::init(small(), 9).unwrap();
        assert_eq!(a, b);
        assert!(a.values()[20..25].iter().all(|v| *v == 0.0));
        assert_ne!(a, ModelParams::init(small(), 10).unwrap());
    }

    #[test]
    fn clone_is_independent() {
        let a = ModelParams::init(small(), 1).unwrap();
        let mut b = a.clone();
        b.values_mut()[0] += 1.0;
        assert_ne!(a.values()[0], b.values()[0]);
    }

    #[test]
    fn backward_needs_forward() {
        let p = ModelParams::init(small(), 1).unwrap();
        let err = p.backward(&ForwardCache::default(), &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn forward_shape_error() {
        let p = ModelParams::init(small(), 1).unwrap();
        assert!(matches!(p.forward(&[0.0; 5], 1, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_output_gradient_gives_zero() {
        let p = ModelParams::init(small(), 3).unwrap();
        let mut cache = ForwardCache::default();
        p.forward(&[0.3, -0.2, 1.0, 0.5, 0.1, 0.1, 0.1, 0.1], 2, Some(&mut cache)).unwrap();
        assert!(p.backward(&cache, &[0.0; 6]).unwrap().is_zero());
    }

    #[test]
    fn gradient_is_linear_in_output_gradient() {
        let p = ModelParams::init(small(), 3).unwrap();
        let mut cache = ForwardCache::default();
        p.forward(&[0.3, -0.2, 1.0, 0.5], 1, Some(&mut cache)).unwrap();
        let a = p.backward(&cache, &[1.0, 0.0, -2.0]).unwrap();
        let b = p.backward(&cache, &[0.5, 3.0, 1.0]).unwrap();
        let mut sum = a.clone();
        sum.add_assign(&b);
        let both = p.backward(&cache, &[1.5, 3.0, -1.0]).unwrap();
        for (x, y) in sum.0.iter().zip(&both.0) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = ModelParams::init(small(), 1).unwrap();
        let before = p.values().to_vec();
        p.adam_step(&Gradients::zeros(p.len()), 1e-3, 0.0).unwrap();
        assert_eq!(p.values(), before.as_slice());
        assert_eq!(p.adam().step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // Bias-corrected moments equal g and g^2 after one step, so the update is
        // -lr * g / (|g| + eps).
        let mut p = ModelParams::init(small(), 1).unwrap();
        let before = p.values().to_vec();
        let g: Vec<f64> = (0..p.len()).map(|i| (i as f64 - 30.0) * 0.37).collect();
        let lr = 1e-3;
        p.adam_step(&Gradients(g.clone()), lr, 0.0).unwrap();
        for ((after, b), gi) in p.values().iter().zip(&before).zip(&g) {
            let expected = b - lr * gi / (gi.abs() + ADAM_EPS);
            assert!((after - expected).abs() < 1e-12, "{after} vs {expected}");
        }
    }

    #[test]
    fn decoupled_weight_decay_shrinks() {
        let mut p = ModelParams::init(small(), 1).unwrap();
        let before = p.values().to_vec();
        p.adam_step(&Gradients::zeros(p.len()), 1e-3, 1e-3).unwrap();
        for (a, b) in p.values().iter().zip(&before) {
            assert_eq!(*a, b - 1e-3 * 1e-3 * b);
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = ModelParams::init(small(), 1).unwrap();
        let mut g = Gradients::zeros(p.len());
        g.0[3] = f64::NAN;
        assert!(matches!(p.adam_step(&g, 1e-3, 0.0), Err(Error::Numeric(_))));
    }
}
