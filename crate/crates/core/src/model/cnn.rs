//! Small 3x3 convolutional feature extractor with explicit backpropagation.
//!
//! Every layer is `conv3x3 (stride 1, zero pad 1) -> ReLU -> optional 2x2 max
//! pool`. Convolutions run as im2col followed by a single matrix product.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub layers: Vec<ConvSpec>,
}

impl CnnConfig {
    /// 32x32 RGB in, 128 channels on an 8x8 grid out.
    pub fn desk_scale() -> Self {
        Self {
            input_size: (32, 32),
            in_channels: 3,
            layers: vec![
                ConvSpec { out_channels: 16, pool: true },
                ConvSpec { out_channels: 32, pool: true },
                ConvSpec { out_channels: 128, pool: false },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.in_channels == 0 {
            return Err(Error::Config("a CNN needs at least one layer and one input channel".into()));
        }
        let (mut h, mut w) = self.input_size;
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 {
                return Err(Error::Config(format!("layer {i} has no output channels")));
            }
            if l.pool {
                if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
                    return Err(Error::Config(format!("layer {i} pools an odd {h}x{w} grid")));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    /// `(channels, height, width)` of the extractor output.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = self.input_size;
        for l in &self.layers {
            if l.pool {
                h /= 2;
                w /= 2;
            }
        }
        (self.layers.last().map_or(0, |l| l.out_channels), h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `out x (in * 9)`, column index `ci * 9 + ky * 3 + kx`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub pool: bool,
}

impl ConvLayer {
    fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }
}

/// Per-layer activations kept for the backward pass.
pub(crate) struct LayerCache {
    cols: Array2<f32>,
    /// Post-ReLU activation before pooling.
    activated: Array3<f32>,
    pool_argmax: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGrad {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnn {
    config: CnnConfig,
    layers: Vec<ConvLayer>,
}

fn im2col(x: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f32>::zeros((c * 9, h * w));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    // x + kx - 1 must lie in [0, w)
                    let x_lo = if kx == 0 { 1 } else { 0 };
                    let x_hi = if kx == 2 { w - 1 } else { w };
                    for xx in x_lo..x_hi {
                        dst[row + y * w + xx] = src[(ci * h + sy) * w + xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f32>, (c, h, w): (usize, usize, usize)) -> Array3<f32> {
    let mut x = Array3::<f32>::zeros((c, h, w));
    let src = cols.as_slice().expect("standard layout");
    let dst = x.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x_lo = if kx == 0 { 1 } else { 0 };
                    let x_hi = if kx == 2 { w - 1 } else { w };
                    for xx in x_lo..x_hi {
                        dst[(ci * h + sy) * w + xx + kx - 1] += src[row + y * w + xx];
                    }
                }
            }
        }
    }
    x
}

fn max_pool(x: &Array3<f32>) -> (Array3<f32>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let src = x.as_slice().expect("standard layout");
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    let mut arg = vec![0usize; c * oh * ow];
    let dst = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = (ci * h + 2 * y) * w + 2 * xx;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = (ci * oh + y) * ow + xx;
                dst[o] = src[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

impl SmallCnn {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng>(config: CnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut in_ch = config.in_channels;
        for spec in &config.layers {
            let fan_in = in_ch * 9;
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
            let weight = Array2::from_shape_simple_fn((spec.out_channels, fan_in), || normal.sample(rng));
            layers.push(ConvLayer {
                weight,
                bias: Array1::zeros(spec.out_channels),
                pool: spec.pool,
            });
            in_ch = spec.out_channels;
        }
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: CnnConfig, layers: Vec<ConvLayer>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.layers.len() {
            return Err(Error::Checkpoint(format!(
                "{} layers for a {}-layer config",
                layers.len(),
                config.layers.len()
            )));
        }
        let mut in_ch = config.in_channels;
        for (i, (layer, spec)) in layers.iter().zip(&config.layers).enumerate() {
            if layer.weight.dim() != (spec.out_channels, in_ch * 9)
                || layer.bias.len() != spec.out_channels
                || layer.pool != spec.pool
            {
                return Err(Error::Checkpoint(format!("layer {i} does not match the config")));
            }
            in_ch = spec.out_channels;
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Array3<f32>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.config.in_channels || (h, w) != self.config.input_size {
            return Err(Error::Shape(format!(
                "CNN expects {}x{}x{}, got {c}x{h}x{w}",
                self.config.in_channels, self.config.input_size.0, self.config.input_size.1
            )));
        }
        Ok(())
    }

    fn layer_forward(layer: &ConvLayer, x: &Array3<f32>) -> (Array2<f32>, Array3<f32>) {
        let (_, h, w) = x.dim();
        let cols = im2col(x);
        let mut y = layer.weight.dot(&cols);
        for (mut row, &b) in y.outer_iter_mut().zip(layer.bias.iter()) {
            row.mapv_inplace(|v| (v + b).max(0.0));
        }
        let y = y
            .into_shape_with_order((layer.weight.nrows(), h, w))
            .expect("conv output shape");
        (cols, y)
    }

    /// Final-layer activations for one `C x H x W` input.
    pub fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        self.check_input(x)?;
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let (_, y) = Self::layer_forward(layer, &cur);
            cur = if layer.pool { max_pool(&y).0 } else { y };
        }
        Ok(cur)
    }

    pub(crate) fn forward_cached(&self, x: &Array3<f32>) -> Result<(Array3<f32>, Vec<LayerCache>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let (cols, y) = Self::layer_forward(layer, &cur);
            let (next, pool_argmax) = if layer.pool {
                let (p, arg) = max_pool(&y);
                (p, Some(arg))
            } else {
                (y.clone(), None)
            };
            caches.push(LayerCache {
                cols,
                activated: y,
                pool_argmax,
            });
            cur = next;
        }
        Ok((cur, caches))
    }

    pub(crate) fn zero_grads(&self) -> Vec<ConvGrad> {
        self.layers
            .iter()
            .map(|l| ConvGrad {
                weight: Array2::zeros(l.weight.dim()),
                bias: Array1::zeros(l.bias.len()),
            })
            .collect()
    }

    /// Accumulate parameter gradients given the gradient of the loss with
    /// respect to the final activations.
    pub(crate) fn backward(&self, caches: &[LayerCache], d_out: Array3<f32>, grads: &mut [ConvGrad]) {
        let mut d = d_out;
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (oc, h, w) = cache.activated.dim();
            let mut d_act = match &cache.pool_argmax {
                Some(arg) => {
                    let mut full = Array3::<f32>::zeros((oc, h, w));
                    let dst = full.as_slice_mut().expect("standard layout");
                    for (g, &idx) in d.iter().zip(arg) {
                        dst[idx] += g;
                    }
                    full
                }
                None => d,
            };
            ndarray::Zip::from(&mut d_act)
                .and(&cache.activated)
                .for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            let d_flat = d_act.into_shape_with_order((oc, h * w)).expect("flat grad");
            grads[i].weight += &d_flat.dot(&cache.cols.t());
            grads[i].bias += &d_flat.sum_axis(ndarray::Axis(1));
            if i == 0 {
                break;
            }
            let d_cols = layer.weight.t().dot(&d_flat);
            d = col2im(&d_cols, (layer.in_channels(), h, w));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 3x3 zero-padded convolution.
    fn conv_naive(layer: &ConvLayer, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let oc = layer.weight.nrows();
        Array3::from_shape_fn((oc, h, w), |(o, y, xx)| {
            let mut acc = layer.bias[o];
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            acc += layer.weight[[o, ci * 9 + ky * 3 + kx]] * x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc.max(0.0)
        })
    }

    fn tiny() -> (SmallCnn, Array3<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = CnnConfig {
            input_size: (6, 4),
            in_channels: 2,
            layers: vec![ConvSpec { out_channels: 3, pool: true }, ConvSpec { out_channels: 2, pool: false }],
        };
        let mut net = SmallCnn::new(cfg, &mut rng).unwrap();
        for l in net.layers_mut() {
            l.bias.mapv_inplace(|_| 0.05);
        }
        let x = Array3::from_shape_fn((2, 6, 4), |(c, y, xx)| ((c * 31 + y * 7 + xx * 3) % 11) as f32 / 11.0 - 0.3);
        (net, x)
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let (net, x) = tiny();
        let layer = &net.layers()[0];
        let (_, fast) = SmallCnn::layer_forward(layer, &x);
        let slow = conv_naive(layer, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn feature_shape_follows_pooling() {
        assert_eq!(CnnConfig::desk_scale().feature_shape(), (128, 8, 8));
        let (net, x) = tiny();
        assert_eq!(net.forward(&x).unwrap().dim(), (2, 3, 2));
        assert!(net.forward(&Array3::zeros((2, 4, 4))).is_err());
    }

    #[test]
    fn odd_pooling_rejected() {
        let cfg = CnnConfig {
            input_size: (5, 4),
            in_channels: 1,
            layers: vec![ConvSpec { out_channels: 1, pool: true }],
        };
        assert!(cfg.validate().is_err());
    }

    /// Loss = sum(output * probe); compare analytic and central-difference gradients.
    #[test]
    fn gradients_match_finite_differences() {
        let (net, x) = tiny();
        let (out, caches) = net.forward_cached(&x).unwrap();
        let probe = Array3::from_shape_fn(out.dim(), |(c, y, xx)| 0.5 + (c + 2 * y + xx) as f32 * 0.25);
        let mut grads = net.zero_grads();
        net.backward(&caches, probe.clone(), &mut grads);
        let loss = |n: &SmallCnn| -> f64 {
            let o = n.forward(&x).unwrap();
            o.iter().zip(probe.iter()).map(|(a, b)| f64::from(a * b)).sum()
        };
        let eps = 1e-3f32;
        for li in 0..2 {
            let (rows, cols) = net.layers()[li].weight.dim();
            for r in 0..rows {
                for c in (0..cols).step_by(5) {
                    let mut plus = net.clone();
                    plus.layers_mut()[li].weight[[r, c]] += eps;
                    let mut minus = net.clone();
                    minus.layers_mut()[li].weight[[r, c]] -= eps;
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * f64::from(eps));
                    let analytic = f64::from(grads[li].weight[[r, c]]);
                    assert!(
                        (numeric - analytic).abs() < 2e-2 * (1.0 + numeric.abs()),
                        "layer {li} w[{r},{c}]: numeric {numeric} analytic {analytic}"
                    );
                }
            }
            for r in 0..rows {
                let mut plus = net.clone();
                plus.layers_mut()[li].bias[r] += eps;
                let mut minus = net.clone();
                minus.layers_mut()[li].bias[r] -= eps;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * f64::from(eps));
                let analytic = f64::from(grads[li].bias[r]);
                assert!(
                    (numeric - analytic).abs() < 2e-2 * (1.0 + numeric.abs()),
                    "layer {li} b[{r}]: numeric {numeric} analytic {analytic}"
                );
            }
        }
    }
}
