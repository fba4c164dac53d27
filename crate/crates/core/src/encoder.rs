//! Multi-layer perceptron encoder with explicit forward caching and manual
//! backpropagation. Hidden layers use a rectifier; the output layer is linear.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpEncoder {
    layers: Vec<Layer>,
}

/// Per-layer pre-activations and layer inputs for one batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input fed to layer `l`.
    inputs: Vec<Matrix>,
    /// `pre[l]` is `inputs[l]·Wᵀ + b` before the rectifier.
    pre: Vec<Matrix>,
}

impl ForwardCache {
    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpEncoder {
    /// Weights drawn from `N(0, 2/fan_in)`, biases zero.
    pub fn new(layer_dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "encoder needs at least two positive layer dims, got {layer_dims:?}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let values = (0..fan_in * fan_out).map(|_| rng.gaussian() * std).collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, values).expect("shape"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidShape("encoder has no layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::InvalidShape(format!("layer {l}: bias length does not match weight rows")));
            }
            if l > 0 && layers[l - 1].weight.rows() != layer.weight.cols() {
                return Err(Error::InvalidShape(format!("layer {l}: input dim does not match previous output")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: inputs.cols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine(&h, layer);
            let next = if l == last { z.clone() } else { relu(&z) };
            cache.inputs.push(h);
            cache.pre.push(z);
            h = next;
        }
        Ok((h, cache))
    }

    /// Forward without keeping a cache.
    pub fn encode(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs)?.0)
    }

    /// Exact gradients of the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_features: &Matrix) -> Result<(EncoderGrads, Matrix)> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers, encoder has {}",
                cache.pre.len(),
                self.layers.len()
            )));
        }
        for (l, (layer, pre)) in self.layers.iter().zip(&cache.pre).enumerate() {
            if pre.cols() != layer.weight.rows() || cache.inputs[l].cols() != layer.weight.cols() {
                return Err(Error::CacheMismatch(format!("layer {l} shapes differ")));
            }
        }
        let batch = cache.inputs[0].rows();
        if grad_features.shape() != (batch, self.output_dim()) {
            return Err(Error::CacheMismatch(format!(
                "gradient is {:?}, forward produced {:?}",
                grad_features.shape(),
                (batch, self.output_dim())
            )));
        }

        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = grad_features.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let (out_dim, in_dim) = layer.weight.shape();

            let mut gw = Matrix::zeros(out_dim, in_dim);
            let mut gb = vec![0.0; out_dim];
            for k in 0..batch {
                let d = delta.row(k);
                let x = input.row(k);
                for o in 0..out_dim {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    for (g, xi) in gw.row_mut(o).iter_mut().zip(x) {
                        *g += dv * xi;
                    }
                }
            }

            let mut grad_in = Matrix::zeros(batch, in_dim);
            for k in 0..batch {
                let d = delta.row(k);
                let gi = grad_in.row_mut(k);
                for o in 0..out_dim {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    for (g, w) in gi.iter_mut().zip(layer.weight.row(o)) {
                        *g += dv * w;
                    }
                }
            }
            if l > 0 {
                let pre = &cache.pre[l - 1];
                for (g, z) in grad_in.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            weights.push(gw);
            biases.push(gb);
            delta = grad_in;
        }
        weights.reverse();
        biases.reverse();
        Ok((EncoderGrads { weights, biases }, delta))
    }

    /// Mutable parameter slices in a fixed order, each flagged with whether
    /// weight decay applies (weights yes, biases no).
    pub fn parameters_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            out.push((layer.weight.as_mut_slice(), true));
            out.push((layer.bias.as_mut_slice(), false));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

impl EncoderGrads {
    /// Gradient slices in the order of [`MlpEncoder::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }
}

fn affine(h: &Matrix, layer: &Layer) -> Matrix {
    let (out_dim, _) = layer.weight.shape();
    let mut z = Matrix::zeros(h.rows(), out_dim);
    for k in 0..h.rows() {
        let x = h.row(k);
        let zr = z.row_mut(k);
        for o in 0..out_dim {
            zr[o] = crate::linalg::dot(layer.weight.row(o), x) + layer.bias[o];
        }
    }
    z
}

fn relu(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_inputs(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gaussian()).collect()).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = MlpEncoder::new(&[8, 16, 4], &mut Rng::new(1)).unwrap();
        let b = MlpEncoder::new(&[8, 16, 4], &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers()[0].weight.shape(), (16, 8));
        assert_eq!(a.layers()[1].weight.shape(), (4, 16));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_eq!(a.layer_dims(), vec![8, 16, 4]);
        assert!(MlpEncoder::new(&[8], &mut Rng::new(1)).is_err());
        assert!(MlpEncoder::new(&[8, 0, 3], &mut Rng::new(1)).is_err());
    }

    #[test]
    fn init_variance() {
        let enc = MlpEncoder::new(&[64, 1600], &mut Rng::new(2)).unwrap();
        let w = enc.layers()[0].weight.as_slice();
        assert!(w.len() >= 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 64.0;
        assert!((var - target).abs() / target < 0.1, "var {var}");
    }

    #[test]
    fn forward_examples() {
        let enc = MlpEncoder::new(&[3, 5, 2], &mut Rng::new(3)).unwrap();
        let (f, _) = enc.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
        let x = Matrix::from_rows(&[[0.3, -1.0, 2.0], [0.3, -1.0, 2.0]]).unwrap();
        let f = enc.encode(&x).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert!(enc.forward(&Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn forward_matches_per_neuron_evaluation() {
        let mut rng = Rng::new(4);
        let mut enc = MlpEncoder::new(&[4, 6, 5, 3], &mut rng).unwrap();
        for (p, _) in enc.parameters_mut() {
            p.iter_mut().for_each(|v| *v += 0.1 * rng.gaussian());
        }
        let x = random_inputs(3, 4, &mut rng);
        let f = enc.encode(&x).unwrap();
        for k in 0..3 {
            let mut h: Vec<f64> = x.row(k).to_vec();
            for (l, layer) in enc.layers().iter().enumerate() {
                let mut next = Vec::new();
                for o in 0..layer.weight.rows() {
                    let mut z = layer.bias[o];
                    for i in 0..h.len() {
                        z += layer.weight[(o, i)] * h[i];
                    }
                    next.push(if l + 1 < enc.layers().len() { z.max(0.0) } else { z });
                }
                h = next;
            }
            for (a, b) in f.row(k).iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = Rng::new(5);
        let enc = MlpEncoder::new(&[4, 6, 3], &mut rng).unwrap();
        let x = random_inputs(2, 4, &mut rng);
        let (_, cache) = enc.forward(&x).unwrap();
        let (g, gi) = enc.backward(&cache, &Matrix::zeros(2, 3)).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_closed_form() {
        let mut rng = Rng::new(6);
        let enc = MlpEncoder::new(&[3, 2], &mut rng).unwrap();
        let x = random_inputs(4, 3, &mut rng);
        let up = random_inputs(4, 2, &mut rng);
        let (_, cache) = enc.forward(&x).unwrap();
        let (g, _) = enc.backward(&cache, &up).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let expected: f64 = (0..4).map(|k| up[(k, o)] * x[(k, i)]).sum();
                assert!((g.weights[0][(o, i)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let mut enc = MlpEncoder::new(&[4, 7, 6, 3], &mut rng).unwrap();
        for (p, decays) in enc.parameters_mut() {
            if !decays {
                p.iter_mut().for_each(|v| *v = 0.1 * rng.gaussian());
            }
        }
        let x = random_inputs(3, 4, &mut rng);
        let up = random_inputs(3, 3, &mut rng);
        // scalar objective Σ up ⊙ f
        let objective = |e: &MlpEncoder, x: &Matrix| -> f64 {
            let f = e.encode(x).unwrap();
            f.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = enc.forward(&x).unwrap();
        let near_kink = cache
            .pre_activations()
            .iter()
            .take(2)
            .any(|m| m.as_slice().iter().any(|v| v.abs() < 1e-4));
        assert!(!near_kink, "pick another seed");
        let (g, gi) = enc.backward(&cache, &up).unwrap();
        let analytic: Vec<f64> = g.slices().concat();
        let h = 1e-6;
        let mut idx = 0;
        let n_slots = enc.parameters_mut().len();
        for slot in 0..n_slots {
            let len = enc.parameters_mut()[slot].0.len();
            for t in 0..len {
                let orig = enc.parameters_mut()[slot].0[t];
                enc.parameters_mut()[slot].0[t] = orig + h;
                let fp = objective(&enc, &x);
                enc.parameters_mut()[slot].0[t] = orig - h;
                let fm = objective(&enc, &x);
                enc.parameters_mut()[slot].0[t] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-6, "param {idx}: {a} vs {fd}");
                idx += 1;
            }
        }
        for k in 0..3 {
            for i in 0..4 {
                let mut xp = x.clone();
                xp[(k, i)] += h;
                let mut xm = x.clone();
                xm[(k, i)] -= h;
                let fd = (objective(&enc, &xp) - objective(&enc, &xm)) / (2.0 * h);
                assert!((gi[(k, i)] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cache_mismatch_detected() {
        let mut rng = Rng::new(8);
        let a = MlpEncoder::new(&[4, 6, 3], &mut rng).unwrap();
        let b = MlpEncoder::new(&[4, 5, 3], &mut rng).unwrap();
        let c = MlpEncoder::new(&[4, 3], &mut rng).unwrap();
        let (_, cache) = a.forward(&Matrix::zeros(2, 4)).unwrap();
        assert!(matches!(b.backward(&cache, &Matrix::zeros(2, 3)), Err(Error::CacheMismatch(_))));
        assert!(matches!(c.backward(&cache, &Matrix::zeros(2, 3)), Err(Error::CacheMismatch(_))));
        assert!(matches!(a.backward(&cache, &Matrix::zeros(3, 3)), Err(Error::CacheMismatch(_))));
    }
}
