use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{matmul, matmul_nt, matmul_tn, tanh_backward, tanh_forward, Tensor2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`.
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Dense {
    fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Tanh MLP `φ`. Every layer, including the last, is followed by tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    layers: Vec<Dense>,
}

/// Activations kept for the backward pass; `acts[0]` is the input.
pub struct ForwardCache {
    acts: Vec<Tensor2>,
}

impl ForwardCache {
    pub fn features(&self) -> &Tensor2 {
        self.acts.last().expect("at least the input")
    }
}

impl FeatureExtractor {
    /// Glorot-uniform weights, zero biases.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::arg(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
                Dense {
                    weight: Tensor2::new(fan_in, fan_out, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("extractor needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.cols() {
                return Err(Error::dim(format!("layer {i} with {} outputs", l.weight.cols()), format!("bias of {}", l.bias.len())));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::dim(
                    format!("layer {} output {}", i - 1, layers[i - 1].weight.cols()),
                    format!("layer {i} input {}", l.weight.rows()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(format!("{} parameters", self.param_count()), format!("{} values", flat.len())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.rows() * l.weight.cols();
            l.weight.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor2) -> Result<ForwardCache> {
        let mut acts = vec![x.clone()];
        for l in &self.layers {
            let mut pre = matmul(acts.last().unwrap(), &l.weight)?;
            for r in 0..pre.rows() {
                for (v, b) in pre.row_mut(r).iter_mut().zip(&l.bias) {
                    *v += b;
                }
            }
            acts.push(tanh_forward(&pre));
        }
        Ok(ForwardCache { acts })
    }

    pub fn features(&self, x: &Tensor2) -> Result<Tensor2> {
        Ok(self.forward(x)?.acts.pop().unwrap())
    }

    /// Single-sample convenience used by evaluation.
    pub fn features_one(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &self.layers {
            let mut next = l.bias.clone();
            for (i, &hi) in h.iter().enumerate() {
                for (o, &w) in next.iter_mut().zip(l.weight.row(i)) {
                    *o += hi * w;
                }
            }
            h = next.into_iter().map(f64::tanh).collect();
        }
        h
    }

    /// Flat parameter gradient given `dL/d features`.
    pub fn backward(&self, cache: &ForwardCache, dfeatures: &Tensor2) -> Result<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut upstream = dfeatures.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let dpre = tanh_backward(&cache.acts[i + 1], &upstream);
            let dw = matmul_tn(&cache.acts[i], &dpre)?;
            let mut db = vec![0.0; l.bias.len()];
            for r in 0..dpre.rows() {
                for (d, v) in db.iter_mut().zip(dpre.row(r)) {
                    *d += v;
                }
            }
            if i > 0 {
                upstream = matmul_nt(&dpre, &l.weight)?;
            }
            let mut g = dw.into_data();
            g.extend(db);
            grads.push(g);
        }
        grads.reverse();
        Ok(grads.concat())
    }
}
