//! Minimal neural-network layers for the silhouette+keypoint regressor.
//!
//! Everything is plain `f64` on flat slices, channel-major `[C][H][W]` for
//! images. Layers are stateless shape descriptors; weights live in a
//! [`ParamVector`](crate::diff::ParamVector) owned by the caller, which
//! keeps optimizer state, checkpointing, and gradient checks uniform.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::ParamVector;
use crate::error::{Error, Result};

/// Exponential linear unit, α = 1.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// dELU/dx expressed through the pre-activation.
pub fn elu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// 3×3 convolution, stride 2, zero padding 1: spatial dims go H → ceil(H/2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn out_size(size: usize) -> usize {
        (size + 1) / 2
    }

    pub fn n_weights(&self) -> usize {
        self.out_channels * self.in_channels * 9
    }

    pub fn n_bias(&self) -> usize {
        self.out_channels
    }

    fn check(&self, input_len: usize, h: usize, w: usize, weights: &[f64], bias: &[f64]) -> Result<()> {
        if input_len != self.in_channels * h * w {
            return Err(Error::parameter(format!(
                "conv input has {input_len} values, expected {} ({}×{h}×{w})",
                self.in_channels * h * w,
                self.in_channels
            )));
        }
        if weights.len() != self.n_weights() || bias.len() != self.n_bias() {
            return Err(Error::parameter(format!(
                "conv weight sizes {}/{} do not match the layer ({}/{})",
                weights.len(),
                bias.len(),
                self.n_weights(),
                self.n_bias()
            )));
        }
        Ok(())
    }

    /// Output is `[out_channels][ceil(h/2)][ceil(w/2)]`.
    pub fn forward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        weights: &[f64],
        bias: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(input.len(), h, w, weights, bias)?;
        let (oh, ow) = (Self::out_size(h), Self::out_size(w));
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for co in 0..self.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..self.in_channels {
                        let wbase = (co * self.in_channels + ci) * 9;
                        let ibase = ci * h * w;
                        for ky in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += weights[wbase + ky * 3 + kx]
                                    * input[ibase + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Ok(out)
    }

    /// Returns `(d_input, d_weights, d_bias)` for the cotangent `d_out`.
    pub fn backward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        weights: &[f64],
        d_out: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (oh, ow) = (Self::out_size(h), Self::out_size(w));
        self.check(input.len(), h, w, weights, &vec![0.0; self.out_channels])?;
        if d_out.len() != self.out_channels * oh * ow {
            return Err(Error::parameter(format!(
                "conv output cotangent has {} values, expected {}",
                d_out.len(),
                self.out_channels * oh * ow
            )));
        }
        let mut d_input = vec![0.0; input.len()];
        let mut d_weights = vec![0.0; self.n_weights()];
        let mut d_bias = vec![0.0; self.n_bias()];
        for co in 0..self.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = d_out[(co * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    d_bias[co] += g;
                    for ci in 0..self.in_channels {
                        let wbase = (co * self.in_channels + ci) * 9;
                        let ibase = ci * h * w;
                        for ky in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ii = ibase + iy as usize * w + ix as usize;
                                d_weights[wbase + ky * 3 + kx] += g * input[ii];
                                d_input[ii] += g * weights[wbase + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        Ok((d_input, d_weights, d_bias))
    }
}

/// Dense layer `y = W x + b`, weights row-major `[out][in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn n_weights(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn n_bias(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, input: &[f64], weights: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim || weights.len() != self.n_weights() || bias.len() != self.out_dim
        {
            return Err(Error::parameter(format!(
                "linear sizes disagree: input {}, weights {}, bias {} for a {}→{} layer",
                input.len(),
                weights.len(),
                bias.len(),
                self.in_dim,
                self.out_dim
            )));
        }
        let mut out = bias.to_vec();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &weights[o * self.in_dim..(o + 1) * self.in_dim];
            *out_v += row.iter().zip(input.iter()).map(|(w, x)| w * x).sum::<f64>();
        }
        Ok(out)
    }

    /// Returns `(d_input, d_weights, d_bias)`.
    pub fn backward(
        &self,
        input: &[f64],
        weights: &[f64],
        d_out: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if input.len() != self.in_dim || weights.len() != self.n_weights() || d_out.len() != self.out_dim
        {
            return Err(Error::parameter(
                "linear backward sizes disagree".to_string(),
            ));
        }
        let mut d_input = vec![0.0; self.in_dim];
        let mut d_weights = vec![0.0; self.n_weights()];
        for o in 0..self.out_dim {
            let g = d_out[o];
            if g == 0.0 {
                continue;
            }
            let base = o * self.in_dim;
            for i in 0..self.in_dim {
                d_weights[base + i] += g * input[i];
                d_input[i] += g * weights[base + i];
            }
        }
        Ok((d_input, d_weights, d_out.to_vec()))
    }
}

/// He-style initialization: N(0, 2/fan_in) weights.
pub fn he_weights(n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Strided conv → ELU stack with a global average pool at the end. The
/// feature vector length equals the last layer's channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub input_size: usize,
    layers: Vec<Conv2d>,
}

/// Per-layer intermediates needed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    layer_inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    sizes: Vec<(usize, usize)>, // input size of each layer
}

impl Encoder {
    pub fn new(in_channels: usize, channels: &[usize], input_size: usize) -> Result<Self> {
        if in_channels == 0 || channels.is_empty() || channels.contains(&0) {
            return Err(Error::parameter(
                "encoder needs at least one layer and positive channel counts".to_string(),
            ));
        }
        let mut size = input_size;
        for _ in channels {
            if size < 2 {
                return Err(Error::parameter(format!(
                    "input size {input_size} is too small for {} stride-2 layers",
                    channels.len()
                )));
            }
            size = Conv2d::out_size(size);
        }
        let mut layers = Vec::with_capacity(channels.len());
        let mut prev = in_channels;
        for &c in channels {
            layers.push(Conv2d {
                in_channels: prev,
                out_channels: c,
            });
            prev = c;
        }
        Ok(Encoder {
            in_channels,
            channels: channels.to_vec(),
            input_size,
            layers,
        })
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    /// `(segment name, length)` pairs in parameter order.
    pub fn param_layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("conv{i}_w"), layer.n_weights()));
            out.push((format!("conv{i}_b"), layer.n_bias()));
        }
        out
    }

    pub fn init_params(&self, params: &mut ParamVector, rng: &mut ChaCha8Rng) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            let fan_in = layer.in_channels * 9;
            params.push_segment(&format!("conv{i}_w"), &he_weights(layer.n_weights(), fan_in, rng))?;
            params.push_segment(&format!("conv{i}_b"), &vec![0.0; layer.n_bias()])?;
        }
        Ok(())
    }

    /// Runs the stack, returning the pooled feature vector and the cache.
    pub fn forward(&self, input: &[f64], params: &ParamVector) -> Result<(Vec<f64>, EncoderCache)> {
        let mut cache = EncoderCache {
            layer_inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            sizes: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        let mut size = self.input_size;
        for (i, layer) in self.layers.iter().enumerate() {
            let weights = params.segment(&format!("conv{i}_w"))?;
            let bias = params.segment(&format!("conv{i}_b"))?;
            let z = layer.forward(&x, size, size, weights, bias)?;
            cache.layer_inputs.push(x);
            cache.sizes.push((size, size));
            x = z.iter().map(|&v| elu(v)).collect();
            cache.pre_activations.push(z);
            size = Conv2d::out_size(size);
        }
        let area = (size * size) as f64;
        let phi = (0..self.feature_dim())
            .map(|c| x[c * size * size..(c + 1) * size * size].iter().sum::<f64>() / area)
            .collect();
        Ok((phi, cache))
    }

    /// Accumulates parameter gradients into `grads` (which must carry the
    /// encoder's segments) given the cotangent of the pooled features.
    pub fn backward(
        &self,
        params: &ParamVector,
        cache: &EncoderCache,
        d_phi: &[f64],
        grads: &mut ParamVector,
    ) -> Result<()> {
        if d_phi.len() != self.feature_dim() {
            return Err(Error::parameter(format!(
                "feature cotangent has {} values, expected {}",
                d_phi.len(),
                self.feature_dim()
            )));
        }
        let mut size = self.input_size;
        for _ in &self.layers {
            size = Conv2d::out_size(size);
        }
        let area = (size * size) as f64;
        // Un-pool: every pixel of channel c receives d_phi[c]/area.
        let mut d_act: Vec<f64> = Vec::with_capacity(self.feature_dim() * size * size);
        for &g in d_phi {
            d_act.extend(std::iter::repeat(g / area).take(size * size));
        }
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[i];
            let d_z: Vec<f64> = z
                .iter()
                .zip(d_act.iter())
                .map(|(&z, &g)| g * elu_derivative(z))
                .collect();
            let (h, w) = cache.sizes[i];
            let weights = params.segment(&format!("conv{i}_w"))?;
            let (d_in, d_w, d_b) =
                layer.backward(&cache.layer_inputs[i], h, w, weights, &d_z)?;
            for (acc, v) in grads.segment_mut(&format!("conv{i}_w"))?.iter_mut().zip(d_w) {
                *acc += v;
            }
            for (acc, v) in grads.segment_mut(&format!("conv{i}_b"))?.iter_mut().zip(d_b) {
                *acc += v;
            }
            d_act = d_in;
        }
        Ok(())
    }
}
