//! Small conv/dense network with hand-written backpropagation.
//!
//! Activations are stored as `(batch, features)` matrices; convolutional
//! feature maps are flattened in height, width, channel order, so the flatten
//! before the first dense layer is free. Convolutions are valid, stride 1,
//! followed by ReLU and a 2×2 max-pool (floor). Hidden dense layers use ReLU
//! and inverted dropout; the network ends in a single logit.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DetectorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { kernel: usize, channels: usize },
    Dense { units: usize },
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    k: usize,
    out_c: usize,
    conv_h: usize,
    conv_w: usize,
    pool_h: usize,
    pool_w: usize,
    w_off: usize,
    b_off: usize,
}

impl ConvShape {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.in_c
    }
}

#[derive(Clone, Copy, Debug)]
struct DenseShape {
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
    hidden: bool,
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv(ConvShape),
    Dense(DenseShape),
}

impl Layer {
    fn fan_in_and_range(&self) -> (usize, std::ops::Range<usize>) {
        match *self {
            Layer::Conv(c) => (c.patch_len(), c.w_off..c.b_off + c.out_c),
            Layer::Dense(d) => (d.n_in, d.w_off..d.b_off + d.n_out),
        }
    }
}

enum LayerCache {
    Conv {
        cols: Array2<f64>,
        relu: Array2<f64>,
        argmax: Vec<usize>,
    },
    Dense {
        input: Array2<f64>,
        relu: Option<Array2<f64>>,
        mask: Option<Array2<f64>>,
    },
}

#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
    n_params: usize,
    input_side: usize,
}

impl Network {
    pub fn new(plan: &[LayerSpec], input_side: usize) -> Result<Self, DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidSpec(m));
        if input_side == 0 {
            return bad("input side must be positive".into());
        }
        let mut layers = Vec::with_capacity(plan.len() + 1);
        let (mut h, mut w, mut c) = (input_side, input_side, 1usize);
        let mut flat: Option<usize> = None;
        let mut off = 0;
        for (i, spec) in plan.iter().enumerate() {
            match *spec {
                LayerSpec::Conv { kernel, channels } => {
                    if flat.is_some() {
                        return bad(format!("layer {i}: convolution after a dense layer"));
                    }
                    if kernel == 0 || channels == 0 || kernel > h || kernel > w {
                        return bad(format!("layer {i}: kernel {kernel} does not fit {h}×{w}"));
                    }
                    let (conv_h, conv_w) = (h - kernel + 1, w - kernel + 1);
                    let (pool_h, pool_w) = (conv_h / 2, conv_w / 2);
                    if pool_h == 0 || pool_w == 0 {
                        return bad(format!("layer {i}: feature map vanishes after pooling"));
                    }
                    let shape = ConvShape {
                        in_h: h,
                        in_w: w,
                        in_c: c,
                        k: kernel,
                        out_c: channels,
                        conv_h,
                        conv_w,
                        pool_h,
                        pool_w,
                        w_off: off,
                        b_off: off + kernel * kernel * c * channels,
                    };
                    off = shape.b_off + channels;
                    layers.push(Layer::Conv(shape));
                    (h, w, c) = (pool_h, pool_w, channels);
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return bad(format!("layer {i}: dense layer with zero units"));
                    }
                    let n_in = flat.unwrap_or(h * w * c);
                    let shape = DenseShape {
                        n_in,
                        n_out: units,
                        w_off: off,
                        b_off: off + n_in * units,
                        hidden: true,
                    };
                    off = shape.b_off + units;
                    layers.push(Layer::Dense(shape));
                    flat = Some(units);
                }
            }
        }
        let n_in = flat.unwrap_or(h * w * c);
        layers.push(Layer::Dense(DenseShape {
            n_in,
            n_out: 1,
            w_off: off,
            b_off: off + n_in,
            hidden: false,
        }));
        off += n_in + 1;
        Ok(Self {
            layers,
            n_params: off,
            input_side,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_len(&self) -> usize {
        self.input_side * self.input_side
    }

    /// Fan-in scaled uniform initialization, `U(±1/√fan_in)`.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        for layer in &self.layers {
            let (fan_in, range) = layer.fan_in_and_range();
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p[range] {
                *v = rng.random_range(-a..a);
            }
        }
        p
    }

    /// Per-parameter fan-in bound, used to initialize variational means.
    pub fn init_bounds(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.n_params];
        for layer in &self.layers {
            let (fan_in, range) = layer.fan_in_and_range();
            b[range].fill(1.0 / (fan_in as f64).sqrt());
        }
        b
    }

    /// Output logits without dropout.
    pub fn logits(&self, params: &[f64], x: &Array2<f64>) -> Vec<f64> {
        self.forward(params, x, None).0
    }

    /// Mean binary cross-entropy (on logits) and its gradient.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        targets: &[f64],
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (f64, Vec<f64>) {
        let (z, caches) = self.forward(params, x, dropout);
        let b = z.len() as f64;
        let mut loss = 0.0;
        let mut dz = Array2::zeros((z.len(), 1));
        for (k, (&zi, &t)) in z.iter().zip(targets).enumerate() {
            loss += bce_with_logit(zi, t);
            dz[[k, 0]] = (sigmoid(zi) - t) / b;
        }
        let grad = self.backward(params, caches, dz);
        (loss / b, grad)
    }

    fn forward(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (Vec<f64>, Vec<LayerCache>) {
        debug_assert_eq!(params.len(), self.n_params);
        let batch = x.nrows();
        let mut a = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match *layer {
                Layer::Conv(c) => {
                    let cols = im2col(&a, &c);
                    let w = ArrayView2::from_shape((c.patch_len(), c.out_c), &params[c.w_off..c.b_off])
                        .expect("conv weight shape");
                    let bias = &params[c.b_off..c.b_off + c.out_c];
                    let mut relu = cols.dot(&w);
                    for mut row in relu.rows_mut() {
                        for (v, &bv) in row.iter_mut().zip(bias) {
                            *v = (*v + bv).max(0.0);
                        }
                    }
                    let (pooled, argmax) = max_pool(&relu, &c, batch);
                    caches.push(LayerCache::Conv { cols, relu, argmax });
                    a = pooled;
                }
                Layer::Dense(d) => {
                    let w = ArrayView2::from_shape((d.n_in, d.n_out), &params[d.w_off..d.b_off])
                        .expect("dense weight shape");
                    let bias = &params[d.b_off..d.b_off + d.n_out];
                    let mut z = a.dot(&w);
                    for mut row in z.rows_mut() {
                        for (v, &bv) in row.iter_mut().zip(bias) {
                            *v += bv;
                        }
                    }
                    if d.hidden {
                        z.mapv_inplace(|v| v.max(0.0));
                        let mask = match dropout.as_mut() {
                            Some((rate, rng)) if *rate > 0.0 => {
                                let keep = 1.0 - *rate;
                                let m = Array2::from_shape_fn(z.dim(), |_| {
                                    if rng.random_bool(keep) {
                                        1.0 / keep
                                    } else {
                                        0.0
                                    }
                                });
                                Some(m)
                            }
                            _ => None,
                        };
                        let out = match &mask {
                            Some(m) => &z * m,
                            None => z.clone(),
                        };
                        caches.push(LayerCache::Dense {
                            input: a,
                            relu: Some(z),
                            mask,
                        });
                        a = out;
                    } else {
                        caches.push(LayerCache::Dense {
                            input: a,
                            relu: None,
                            mask: None,
                        });
                        a = z;
                    }
                }
            }
        }
        (a.column(0).to_vec(), caches)
    }

    fn backward(&self, params: &[f64], caches: Vec<LayerCache>, mut delta: Array2<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.n_params];
        for (idx, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need_input_grad = idx > 0;
            match (*layer, cache) {
                (Layer::Dense(d), LayerCache::Dense { input, relu, mask }) => {
                    if let Some(r) = relu {
                        if let Some(m) = mask {
                            delta *= &m;
                        }
                        delta.zip_mut_with(&r, |g, &rv| {
                            if rv <= 0.0 {
                                *g = 0.0
                            }
                        });
                    }
                    let gw = input.t().dot(&delta);
                    grad[d.w_off..d.b_off]
                        .iter_mut()
                        .zip(gw.iter())
                        .for_each(|(g, v)| *g = *v);
                    let gb = delta.sum_axis(Axis(0));
                    grad[d.b_off..d.b_off + d.n_out].copy_from_slice(gb.as_slice().expect("contiguous"));
                    if need_input_grad {
                        let w = ArrayView2::from_shape((d.n_in, d.n_out), &params[d.w_off..d.b_off])
                            .expect("dense weight shape");
                        delta = delta.dot(&w.t());
                    }
                }
                (Layer::Conv(c), LayerCache::Conv { cols, relu, argmax }) => {
                    let mut dr = Array2::<f64>::zeros(relu.dim());
                    {
                        let dr_flat = dr.as_slice_mut().expect("contiguous");
                        let relu_flat = relu.as_slice().expect("contiguous");
                        for (&pos, &g) in argmax.iter().zip(delta.iter()) {
                            if relu_flat[pos] > 0.0 {
                                dr_flat[pos] += g;
                            }
                        }
                    }
                    let gw = cols.t().dot(&dr);
                    grad[c.w_off..c.b_off]
                        .iter_mut()
                        .zip(gw.iter())
                        .for_each(|(g, v)| *g = *v);
                    let gb = dr.sum_axis(Axis(0));
                    grad[c.b_off..c.b_off + c.out_c].copy_from_slice(gb.as_slice().expect("contiguous"));
                    if need_input_grad {
                        let w = ArrayView2::from_shape((c.patch_len(), c.out_c), &params[c.w_off..c.b_off])
                            .expect("conv weight shape");
                        let dcols = dr.dot(&w.t());
                        delta = col2im(&dcols, &c, delta.nrows());
                    }
                }
                _ => unreachable!("cache kind follows layer kind"),
            }
        }
        grad
    }
}

fn im2col(a: &Array2<f64>, c: &ConvShape) -> Array2<f64> {
    let batch = a.nrows();
    let plen = c.patch_len();
    let rows = batch * c.conv_h * c.conv_w;
    let mut cols = Array2::<f64>::zeros((rows, plen));
    let src = a.as_standard_layout();
    let src = src.as_slice().expect("contiguous");
    let in_len = c.in_h * c.in_w * c.in_c;
    let dst = cols.as_slice_mut().expect("contiguous");
    let span = c.k * c.in_c;
    for b in 0..batch {
        let base = b * in_len;
        for oy in 0..c.conv_h {
            for ox in 0..c.conv_w {
                let row = (b * c.conv_h + oy) * c.conv_w + ox;
                let out = &mut dst[row * plen..(row + 1) * plen];
                for ky in 0..c.k {
                    let start = base + ((oy + ky) * c.in_w + ox) * c.in_c;
                    out[ky * span..(ky + 1) * span].copy_from_slice(&src[start..start + span]);
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, c: &ConvShape, batch: usize) -> Array2<f64> {
    let in_len = c.in_h * c.in_w * c.in_c;
    let plen = c.patch_len();
    let span = c.k * c.in_c;
    let mut out = Array2::<f64>::zeros((batch, in_len));
    let dst = out.as_slice_mut().expect("contiguous");
    let src = dcols.as_slice().expect("contiguous");
    for b in 0..batch {
        let base = b * in_len;
        for oy in 0..c.conv_h {
            for ox in 0..c.conv_w {
                let row = (b * c.conv_h + oy) * c.conv_w + ox;
                let g = &src[row * plen..(row + 1) * plen];
                for ky in 0..c.k {
                    let start = base + ((oy + ky) * c.in_w + ox) * c.in_c;
                    for (d, s) in dst[start..start + span].iter_mut().zip(&g[ky * span..(ky + 1) * span]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// 2×2 max-pool; returns pooled maps and, per pooled value, the flat index of
/// the winning element in `relu`.
fn max_pool(relu: &Array2<f64>, c: &ConvShape, batch: usize) -> (Array2<f64>, Vec<usize>) {
    let src = relu.as_slice().expect("contiguous");
    let out_len = c.pool_h * c.pool_w * c.out_c;
    let mut pooled = Array2::<f64>::zeros((batch, out_len));
    let mut argmax = Vec::with_capacity(batch * out_len);
    let dst = pooled.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        for py in 0..c.pool_h {
            for px in 0..c.pool_w {
                for ch in 0..c.out_c {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let row = (b * c.conv_h + 2 * py + dy) * c.conv_w + 2 * px + dx;
                            let pos = row * c.out_c + ch;
                            if src[pos] > best_v {
                                best_v = src[pos];
                                best = pos;
                            }
                        }
                    }
                    dst[b * out_len + (py * c.pool_w + px) * c.out_c + ch] = best_v;
                    argmax.push(best);
                }
            }
        }
    }
    (pooled, argmax)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `−t·ln σ(z) − (1−t)·ln(1−σ(z))`.
pub fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn parameter_counts() {
        let ff = Network::new(&[LayerSpec::Dense { units: 400 }, LayerSpec::Dense { units: 100 }], 18).unwrap();
        assert_eq!(ff.n_params(), 324 * 400 + 400 + 400 * 100 + 100 + 101);
        let cnn = Network::new(
            &[
                LayerSpec::Conv { kernel: 4, channels: 12 },
                LayerSpec::Conv { kernel: 4, channels: 24 },
                LayerSpec::Dense { units: 200 },
                LayerSpec::Dense { units: 100 },
            ],
            18,
        )
        .unwrap();
        // 18 → conv 15 → pool 7 → conv 4 → pool 2: 2·2·24 = 96 features
        let expected = (16 * 12 + 12) + (16 * 12 * 24 + 24) + (96 * 200 + 200) + (200 * 100 + 100) + 101;
        assert_eq!(cnn.n_params(), expected);
    }

    #[test]
    fn rejects_bad_plans() {
        assert!(Network::new(&[LayerSpec::Dense { units: 3 }, LayerSpec::Conv { kernel: 2, channels: 1 }], 8).is_err());
        assert!(Network::new(&[LayerSpec::Conv { kernel: 9, channels: 1 }], 8).is_err());
        assert!(Network::new(&[LayerSpec::Conv { kernel: 8, channels: 1 }], 8).is_err());
    }

    #[test]
    fn stable_loss_matches_naive_formula() {
        for &(z, t) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-1.0, 1.0)] {
            let s: f64 = sigmoid(z);
            let naive = -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
            assert!((bce_with_logit(z, t) - naive).abs() < 1e-12);
        }
        assert!(bce_with_logit(800.0, 0.0).is_finite());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn dropout_is_inactive_without_rng() {
        let net = Network::new(&[LayerSpec::Dense { units: 5 }], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = net.init(&mut rng);
        let x = Array2::from_shape_fn((4, 9), |(i, j)| ((i * 9 + j) as f64 * 0.37).sin());
        assert_eq!(net.logits(&p, &x), net.logits(&p, &x));
    }
}
