//! Small batched neural-network toolkit with hand-written backward passes.
//!
//! Activations are row-major batches (`Array2`, one sample per row).
//! Convolutions keep feature maps channels-last, so a batch of `B` maps of
//! size `H×W×C` is an `(B·H·W, C)` matrix and im2col followed by a single
//! matrix product does the work.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Named parameter tensors in a fixed order. Gradient containers share the
/// concrete type of the parameters they belong to, so orders line up.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.2.to_vec())
            .collect()
    }

    fn set_flat(&mut self, v: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        assert_eq!(off, v.len(), "flat vector length mismatch");
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.2.iter().all(|v| v.is_finite()))
    }
}

fn prefixed<'a>(prefix: &str, inner: Vec<(String, Vec<usize>, &'a [f64])>) -> Vec<(String, Vec<usize>, &'a [f64])> {
    inner
        .into_iter()
        .map(|(n, s, d)| (format!("{prefix}.{n}"), s, d))
        .collect()
}

/// Concatenates the tensor lists of several sub-modules under prefixes.
pub fn join_tensors<'a>(parts: Vec<(&str, Vec<(String, Vec<usize>, &'a [f64])>)>) -> Vec<(String, Vec<usize>, &'a [f64])> {
    parts
        .into_iter()
        .flat_map(|(p, t)| prefixed(p, t))
        .collect()
}

fn slice(a: &[f64]) -> &[f64] {
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in, out)`; forward is `x·w + b`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-bound..bound)),
            b: Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..bound)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl ParamSet for Linear {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            ("w".into(), self.w.shape().to_vec(), slice(self.w.as_slice().unwrap())),
            ("b".into(), self.b.shape().to_vec(), slice(self.b.as_slice().unwrap())),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_slice_mut().unwrap(), self.b.as_slice_mut().unwrap()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * *is);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
        g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let n = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, dh), xh), is) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum = dh.sum();
            let dot = dh.dot(&xh);
            for ((o, d), x) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                *o = is / n * (n * d - sum - x * dot);
            }
        }
        dx
    }
}

impl ParamSet for LayerNorm {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            ("gamma".into(), self.gamma.shape().to_vec(), slice(self.gamma.as_slice().unwrap())),
            ("beta".into(), self.beta.shape().to_vec(), slice(self.beta.as_slice().unwrap())),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.gamma.as_slice_mut().unwrap(), self.beta.as_slice_mut().unwrap()]
    }
}

/// `SiLU(LayerNorm(x·w + b))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hidden {
    pub lin: Linear,
    pub ln: LayerNorm,
}

pub struct HiddenCache {
    x: Array2<f64>,
    ln: LayerNormCache,
    normed: Array2<f64>,
}

impl Hidden {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Hidden {
            lin: Linear::new(inputs, outputs, rng),
            ln: LayerNorm::new(outputs),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Hidden {
            lin: self.lin.zeros_like(),
            ln: self.ln.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, HiddenCache) {
        let pre = self.lin.forward(x);
        let (normed, ln) = self.ln.forward(&pre);
        let y = normed.mapv(silu);
        (
            y,
            HiddenCache {
                x: x.clone(),
                ln,
                normed,
            },
        )
    }

    pub fn backward(&self, cache: &HiddenCache, dy: &Array2<f64>, g: &mut Hidden) -> Array2<f64> {
        let dn = dy * &cache.normed.mapv(silu_grad);
        let dpre = self.ln.backward(&cache.ln, &dn, &mut g.ln);
        self.lin.backward(&cache.x, &dpre, &mut g.lin)
    }
}

impl ParamSet for Hidden {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        join_tensors(vec![("lin", self.lin.tensors()), ("ln", self.ln.tensors())])
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.lin.tensors_mut();
        v.extend(self.ln.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Hidden blocks followed by an affine head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Vec<Hidden>,
    pub head: Linear,
    pub out: OutputActivation,
}

pub struct MlpCache {
    hidden: Vec<HiddenCache>,
    head_in: Array2<f64>,
    y: Array2<f64>,
}

impl Mlp {
    /// `sizes` lists input, hidden widths and output width.
    pub fn new(sizes: &[usize], out: OutputActivation, rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2);
        let hidden = sizes
            .windows(2)
            .take(sizes.len() - 2)
            .map(|w| Hidden::new(w[0], w[1], rng))
            .collect();
        let head = Linear::new(sizes[sizes.len() - 2], sizes[sizes.len() - 1], rng);
        Mlp { hidden, head, out }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            hidden: self.hidden.iter().map(Hidden::zeros_like).collect(),
            head: self.head.zeros_like(),
            out: self.out,
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.head.inputs(), |h| h.lin.inputs())
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let (y, c) = layer.forward(&h);
            caches.push(c);
            h = y;
        }
        let mut y = self.head.forward(&h);
        if self.out == OutputActivation::Tanh {
            y.mapv_inplace(f64::tanh);
        }
        (
            y.clone(),
            MlpCache {
                hidden: caches,
                head_in: h,
                y,
            },
        )
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, g: &mut Mlp) -> Array2<f64> {
        let dpre = match self.out {
            OutputActivation::Identity => dy.clone(),
            OutputActivation::Tanh => dy * &cache.y.mapv(|t| 1.0 - t * t),
        };
        let mut d = self.head.backward(&cache.head_in, &dpre, &mut g.head);
        for ((layer, c), gl) in self
            .hidden
            .iter()
            .zip(&cache.hidden)
            .zip(g.hidden.iter_mut())
            .rev()
        {
            d = layer.backward(c, &d, gl);
        }
        d
    }
}

impl ParamSet for Mlp {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut parts: Vec<(String, Vec<(String, Vec<usize>, &[f64])>)> = self
            .hidden
            .iter()
            .enumerate()
            .map(|(i, h)| (format!("hidden{i}"), h.tensors()))
            .collect();
        parts.push(("head".into(), self.head.tensors()));
        parts
            .into_iter()
            .flat_map(|(p, t)| prefixed(&p, t))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self
            .hidden
            .iter_mut()
            .flat_map(|h| h.tensors_mut())
            .collect();
        v.extend(self.head.tensors_mut());
        v
    }
}

/// Geometry of a channels-last feature map batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// 2-D convolution with square kernels. Weights are `(out, in, k, k)`
/// flattened to `(out, in·k·k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    input: MapShape,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            w: Array2::from_shape_fn((out_channels, fan_in), |_| rng.random_range(-bound..bound)),
            b: Array1::from_shape_fn(out_channels, |_| rng.random_range(-bound..bound)),
            in_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            ..*self
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_shape(&self, s: MapShape) -> MapShape {
        let span = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        MapShape {
            batch: s.batch,
            height: span(s.height),
            width: span(s.width),
            channels: self.out_channels(),
        }
    }

    fn im2col(&self, x: &[f64], s: MapShape) -> Array2<f64> {
        let o = self.output_shape(s);
        let k = self.kernel;
        let cols_n = s.channels * k * k;
        let mut cols = Array2::zeros((o.batch * o.height * o.width, cols_n));
        let data = cols.as_slice_mut().unwrap();
        for b in 0..o.batch {
            for oy in 0..o.height {
                for ox in 0..o.width {
                    let row = ((b * o.height + oy) * o.width + ox) * cols_n;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= s.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= s.width as isize {
                                continue;
                            }
                            let src = ((b * s.height + iy as usize) * s.width + ix as usize) * s.channels;
                            for c in 0..s.channels {
                                data[row + c * k * k + ky * k + kx] = x[src + c];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, s: MapShape) -> Array2<f64> {
        let o = self.output_shape(s);
        let k = self.kernel;
        let cols_n = s.channels * k * k;
        let mut dx = Array2::zeros((s.batch * s.height * s.width, s.channels));
        let out = dx.as_slice_mut().unwrap();
        let src = dcols.as_slice().unwrap();
        for b in 0..o.batch {
            for oy in 0..o.height {
                for ox in 0..o.width {
                    let row = ((b * o.height + oy) * o.width + ox) * cols_n;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= s.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= s.width as isize {
                                continue;
                            }
                            let dst = ((b * s.height + iy as usize) * s.width + ix as usize) * s.channels;
                            for c in 0..s.channels {
                                out[dst + c] += src[row + c * k * k + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// `x` is `(B·H·W, C)`; returns pre-activations `(B·H'·W', out)`.
    pub fn forward(&self, x: &Array2<f64>, s: MapShape) -> (Array2<f64>, ConvCache) {
        assert_eq!(s.channels, self.in_channels, "channel mismatch");
        let x = x.as_standard_layout();
        let cols = self.im2col(x.as_slice().unwrap(), s);
        let y = cols.dot(&self.w.t()) + &self.b;
        (y, ConvCache { cols, input: s })
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array2<f64>,
        g: &mut Conv2d,
        need_input: bool,
    ) -> Option<Array2<f64>> {
        g.w += &dy.t().dot(&cache.cols);
        g.b += &dy.sum_axis(Axis(0));
        need_input.then(|| self.col2im(&dy.dot(&self.w), cache.input))
    }

    /// Weights as `[out][in][ky][kx]`.
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        let k = self.kernel;
        self.w[[o, i * k * k + ky * k + kx]]
    }
}

impl ParamSet for Conv2d {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let k = self.kernel;
        vec![
            (
                "w".into(),
                vec![self.out_channels(), self.in_channels, k, k],
                slice(self.w.as_slice().unwrap()),
            ),
            ("b".into(), self.b.shape().to_vec(), slice(self.b.as_slice().unwrap())),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_slice_mut().unwrap(), self.b.as_slice_mut().unwrap()]
    }
}

/// Replicates each input-channel block of a first layer `m` times and scales
/// every replica by `1/m`, so an input whose `m` channel blocks are identical
/// produces the original pre-activations.
pub fn channel_expand(layer: &Conv2d, m: usize) -> Conv2d {
    assert!(m >= 1, "expansion factor must be at least 1");
    let kk = layer.kernel * layer.kernel;
    let c = layer.in_channels;
    let out = layer.out_channels();
    let scale = 1.0 / m as f64;
    let mut w = Array2::zeros((out, m * c * kk));
    for o in 0..out {
        for r in 0..m {
            let src = layer.w.slice(s![o, ..]);
            w.slice_mut(s![o, r * c * kk..(r + 1) * c * kk])
                .assign(&src.mapv(|v| v * scale));
        }
    }
    Conv2d {
        w,
        b: layer.b.clone(),
        in_channels: m * c,
        ..*layer
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let gs = grads.tensors();
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![0.0; g.2.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(gs)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g.2[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let gs = grads.tensors();
        if self.velocity.is_empty() {
            self.velocity = gs.iter().map(|g| vec![0.0; g.2.len()]).collect();
        }
        for ((p, g), vel) in params
            .tensors_mut()
            .into_iter()
            .zip(gs)
            .zip(self.velocity.iter_mut())
        {
            for i in 0..p.len() {
                vel[i] = self.momentum * vel[i] + g.2[i];
                p[i] -= self.lr * vel[i];
            }
        }
    }
}

/// `target ← rho·target + (1−rho)·online`, elementwise.
pub fn ema_update<P: ParamSet>(online: &P, target: &mut P, rho: f64) {
    let src = online.tensors();
    for (t, o) in target.tensors_mut().into_iter().zip(src) {
        assert_eq!(t.len(), o.2.len(), "shape mismatch in {}", o.0);
        for (tv, ov) in t.iter_mut().zip(o.2) {
            *tv = rho * *tv + (1.0 - rho) * ov;
        }
    }
}

/// Central-difference gradient of `loss` with respect to every parameter.
pub fn finite_difference<P: ParamSet + Clone>(p: &P, h: f64, loss: impl Fn(&P) -> f64) -> Vec<f64> {
    let base = p.flat();
    let mut probe = p.clone();
    let mut grad = Vec::with_capacity(base.len());
    let mut v = base.clone();
    for i in 0..base.len() {
        v[i] = base[i] + h;
        probe.set_flat(&v);
        let up = loss(&probe);
        v[i] = base[i] - h;
        probe.set_flat(&v);
        let down = loss(&probe);
        v[i] = base[i];
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Largest `|a − n| / max(|a|, |n|, 1e-7)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-7))
        .fold(0.0, f64::max)
}
