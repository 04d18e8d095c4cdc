//! The two supported model kinds and their hand-written reverse-mode passes.
//!
//! Parameter layout is FEATURE span first, CLASSIFIER span (the final dense
//! layer) last. Dense weights are row-major `(out, in)`.
//!
//! `COMPACT_CONV` is a small temporal/spatial convolutional network:
//!
//! ```text
//! x [C, T]
//!   -> temporal conv, F filters of length k shared by all channels  u [F, C, T-k+1]
//!   -> depthwise spatial mixing, D outputs per filter (+ bias)      v [F*D, T-k+1]
//!   -> activation
//!   -> average pool, width p (non-overlapping, remainder dropped)   h [F*D, (T-k+1)/p]
//!   -> flatten -> dense head                                        logits [n_classes]
//! ```
//!
//! The implementation applies the spatial mix before the temporal filter,
//! which gives the same function with less arithmetic.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::SubjectDataset;
use crate::error::{Error, Result};
use crate::nn::param::{ParamVector, Span};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Architecture {
    /// Flattened input, dense hidden layers, dense head. With no hidden layers
    /// the FEATURE group is empty.
    Mlp { hidden: Vec<usize> },
    CompactConv { filters: usize, kernel_len: usize, depth: usize, pool: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub channels: usize,
    pub times: usize,
    pub n_classes: usize,
    pub activation: Activation,
    pub architecture: Architecture,
}

#[derive(Debug, Clone)]
struct ConvLayout {
    filters: usize,
    k: usize,
    depth: usize,
    pool: usize,
    tp: usize,
    npool: usize,
    feat: usize,
    w_t: usize,
    w_s: usize,
    b_s: usize,
    w_h: usize,
    b_h: usize,
    total: usize,
}

#[derive(Debug, Clone)]
struct DenseLayout {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
enum Layout {
    Mlp { layers: Vec<DenseLayout>, total: usize },
    Conv(ConvLayout),
}

impl ModelSpec {
    pub fn mlp(channels: usize, times: usize, hidden: Vec<usize>, n_classes: usize, activation: Activation) -> Self {
        ModelSpec { channels, times, n_classes, activation, architecture: Architecture::Mlp { hidden } }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn compact_conv(
        channels: usize,
        times: usize,
        n_classes: usize,
        filters: usize,
        kernel_len: usize,
        depth: usize,
        pool: usize,
        activation: Activation,
    ) -> Self {
        ModelSpec {
            channels,
            times,
            n_classes,
            activation,
            architecture: Architecture::CompactConv { filters, kernel_len, depth, pool },
        }
    }

    /// Default network for the synthetic families: 4 temporal filters of
    /// length 16, 2 spatial outputs each, pooling width 32.
    pub fn default_conv(channels: usize, times: usize, n_classes: usize) -> Self {
        Self::compact_conv(channels, times, n_classes, 4, 16, 2, 32, Activation::Elu)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(format!("model spec: {m}")));
        if self.channels == 0 || self.times == 0 || self.n_classes == 0 {
            return bad("channels, times and n_classes must be positive");
        }
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return bad("hidden layer sizes must be positive");
                }
            }
            Architecture::CompactConv { filters, kernel_len, depth, pool } => {
                if *filters == 0 || *kernel_len == 0 || *depth == 0 || *pool == 0 {
                    return bad("filters, kernel_len, depth and pool must be positive");
                }
                if *kernel_len > self.times {
                    return bad("kernel longer than the epoch");
                }
                if *pool > self.times - kernel_len + 1 {
                    return bad("pool width exceeds the convolution output length");
                }
            }
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                let mut layers = Vec::with_capacity(hidden.len() + 1);
                let mut offset = 0;
                let mut fan_in = self.channels * self.times;
                for &fan_out in hidden.iter().chain(std::iter::once(&self.n_classes)) {
                    let w = offset;
                    let b = w + fan_in * fan_out;
                    offset = b + fan_out;
                    layers.push(DenseLayout { fan_in, fan_out, w, b });
                    fan_in = fan_out;
                }
                Layout::Mlp { layers, total: offset }
            }
            &Architecture::CompactConv { filters, kernel_len, depth, pool } => {
                let tp = self.times - kernel_len + 1;
                let npool = tp / pool;
                let g = filters * depth;
                let feat = g * npool;
                let w_t = 0;
                let w_s = w_t + filters * kernel_len;
                let b_s = w_s + g * self.channels;
                let w_h = b_s + g;
                let b_h = w_h + self.n_classes * feat;
                let total = b_h + self.n_classes;
                Layout::Conv(ConvLayout {
                    filters,
                    k: kernel_len,
                    depth,
                    pool,
                    tp,
                    npool,
                    feat,
                    w_t,
                    w_s,
                    b_s,
                    w_h,
                    b_h,
                    total,
                })
            }
        }
    }

    pub fn n_params(&self) -> usize {
        match self.layout() {
            Layout::Mlp { total, .. } => total,
            Layout::Conv(l) => l.total,
        }
    }

    /// Returns the (FEATURE, CLASSIFIER) spans.
    pub fn group_spans(&self) -> (Span, Span) {
        let head_start = match self.layout() {
            Layout::Mlp { layers, .. } => layers.last().map(|l| l.w).unwrap_or(0),
            Layout::Conv(l) => l.w_h,
        };
        let n = self.n_params();
        (Span { start: 0, len: head_start }, Span { start: head_start, len: n - head_start })
    }

    pub fn zeros<T: Real>(&self) -> ParamVector<T> {
        let (f, c) = self.group_spans();
        ParamVector::new(vec![T::zero(); self.n_params()], f, c).expect("spec spans partition")
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector<T> {
        let mut p = self.zeros::<T>();
        let v = p.values_mut();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for x in &mut v[range] {
                *x = T::lit(dist.sample(rng));
            }
        };
        match self.layout() {
            Layout::Mlp { layers, .. } => {
                for l in layers {
                    fill(l.w..l.b, l.fan_in, l.fan_out);
                }
            }
            Layout::Conv(l) => {
                fill(l.w_t..l.w_s, l.k, l.k * l.filters);
                fill(l.w_s..l.b_s, self.channels, l.depth);
                fill(l.w_h..l.b_h, l.feat, self.n_classes);
            }
        }
        p
    }

    fn check_params<T: Real>(&self, params: &ParamVector<T>) -> Result<()> {
        let n = self.n_params();
        if params.len() != n {
            return Err(Error::ShapeMismatch(format!("model expects {n} parameters, got {}", params.len())));
        }
        let (f, _) = self.group_spans();
        if params.span(crate::nn::Group::Feature) != f {
            return Err(Error::ShapeMismatch("parameter groups do not match the model spec".into()));
        }
        Ok(())
    }

    fn check_batch<T: Real>(&self, batch: &Batch<T>) -> Result<()> {
        if batch.channels != self.channels || batch.times != self.times {
            return Err(Error::ShapeMismatch(format!(
                "batch epochs are {}x{}, model expects {}x{}",
                batch.channels, batch.times, self.channels, self.times
            )));
        }
        if batch.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }
}

/// A batch of epochs, row-major `[B, C, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    data: Vec<T>,
    len: usize,
    channels: usize,
    times: usize,
}

impl<T: Real> Batch<T> {
    pub fn new(data: Vec<T>, len: usize, channels: usize, times: usize) -> Result<Self> {
        if data.len() != len * channels * times {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot form a {len}x{channels}x{times} batch",
                data.len()
            )));
        }
        Ok(Batch { data, len, channels, times })
    }

    /// Gathers the given epochs of a dataset.
    pub fn from_dataset(ds: &SubjectDataset, indices: &[usize]) -> Self {
        let stride = ds.channels() * ds.times();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend(ds.epoch(i).iter().map(|&v| T::lit(f64::from(v))));
        }
        Batch { data, len: indices.len(), channels: ds.channels(), times: ds.times() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn times(&self) -> usize {
        self.times
    }

    /// Row-major `[B, C, T]` values.
    pub fn raw(&self) -> &[T] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let stride = self.channels * self.times;
        &self.data[i * stride..(i + 1) * stride]
    }

    /// The batch repeated `times` over, used for mean-invariance checks.
    pub fn repeated(&self, times: usize) -> Self {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Batch { data, len: self.len * times, channels: self.channels, times: self.times }
    }
}

/// Per-sample activations kept for the backward pass.
struct Cache<T> {
    acts: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    /// Spatially mixed input, `[F*D, T]`, for the convolutional model.
    u: Vec<T>,
    v: Vec<T>,
    a: Vec<T>,
    h: Vec<T>,
    logits: Vec<T>,
}

impl<T: Real> Cache<T> {
    fn new(spec: &ModelSpec, layout: &Layout) -> Self {
        let mut c = Cache {
            acts: Vec::new(),
            pre: Vec::new(),
            u: Vec::new(),
            v: Vec::new(),
            a: Vec::new(),
            h: Vec::new(),
            logits: vec![T::zero(); spec.n_classes],
        };
        match layout {
            Layout::Mlp { layers, .. } => {
                c.acts = layers.iter().map(|l| vec![T::zero(); l.fan_out]).collect();
                c.pre = layers.iter().map(|l| vec![T::zero(); l.fan_out]).collect();
            }
            Layout::Conv(l) => {
                let g = l.filters * l.depth;
                c.u = vec![T::zero(); g * spec.times];
                c.v = vec![T::zero(); g * l.tp];
                c.a = vec![T::zero(); g * l.tp];
                c.h = vec![T::zero(); l.feat];
            }
        }
        c
    }
}

#[inline]
fn dense<T: Real>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (o, out_o) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        *out_o = acc;
    }
}

fn forward_sample<T: Real>(spec: &ModelSpec, layout: &Layout, p: &[T], x: &[T], c: &mut Cache<T>) {
    match layout {
        Layout::Mlp { layers, .. } => {
            let last = layers.len() - 1;
            for (li, l) in layers.iter().enumerate() {
                let (prev, cur) = c.acts.split_at_mut(li);
                let input: &[T] = if li == 0 { x } else { &prev[li - 1] };
                let pre = &mut c.pre[li];
                dense(&p[l.w..l.b], &p[l.b..l.b + l.fan_out], input, pre);
                let act = &mut cur[0];
                if li == last {
                    act.copy_from_slice(pre);
                } else {
                    for (a, z) in act.iter_mut().zip(pre.iter()) {
                        *a = spec.activation.apply(*z);
                    }
                }
            }
            c.logits.copy_from_slice(&c.acts[last]);
        }
        Layout::Conv(l) => {
            // Both convolutions are linear, so the spatial mix is applied to
            // the raw channels first: y[g] = sum_c ws[g, c] x[c], then
            // v[g, t] = b[g] + sum_j wt[f, j] y[g, t + j] with f = g / depth.
            let chans = spec.channels;
            let times = spec.times;
            for g in 0..l.filters * l.depth {
                let ws = &p[l.w_s + g * chans..l.w_s + (g + 1) * chans];
                let y = &mut c.u[g * times..(g + 1) * times];
                y.fill(T::zero());
                for (ch, &wc) in ws.iter().enumerate() {
                    for (yt, xt) in y.iter_mut().zip(&x[ch * times..(ch + 1) * times]) {
                        *yt += wc * *xt;
                    }
                }
                let f = g / l.depth;
                let w = &p[l.w_t + f * l.k..l.w_t + (f + 1) * l.k];
                let bias = p[l.b_s + g];
                let v = &mut c.v[g * l.tp..(g + 1) * l.tp];
                for (t, vt) in v.iter_mut().enumerate() {
                    let mut acc = bias;
                    for (wj, yj) in w.iter().zip(&y[t..t + l.k]) {
                        acc += *wj * *yj;
                    }
                    *vt = acc;
                }
            }
            for (a, v) in c.a.iter_mut().zip(&c.v) {
                *a = spec.activation.apply(*v);
            }
            let inv = T::one() / T::lit(l.pool as f64);
            let g_total = l.filters * l.depth;
            for g in 0..g_total {
                for q in 0..l.npool {
                    let s: T = c.a[g * l.tp + q * l.pool..g * l.tp + (q + 1) * l.pool].iter().copied().sum();
                    c.h[g * l.npool + q] = s * inv;
                }
            }
            dense(&p[l.w_h..l.b_h], &p[l.b_h..l.b_h + spec.n_classes], &c.h, &mut c.logits);
        }
    }
}

fn backward_sample<T: Real>(
    spec: &ModelSpec,
    layout: &Layout,
    p: &[T],
    x: &[T],
    c: &Cache<T>,
    dlogits: &[T],
    grad: &mut [T],
) {
    match layout {
        Layout::Mlp { layers, .. } => {
            let mut delta: Vec<T> = dlogits.to_vec();
            for li in (0..layers.len()).rev() {
                let l = &layers[li];
                let input: &[T] = if li == 0 { x } else { &c.acts[li - 1] };
                for (o, d) in delta.iter().enumerate() {
                    if *d == T::zero() {
                        continue;
                    }
                    let row = &mut grad[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                    for (g, xi) in row.iter_mut().zip(input) {
                        *g += *d * *xi;
                    }
                    grad[l.b + o] += *d;
                }
                if li == 0 {
                    break;
                }
                let prev = &layers[li - 1];
                let mut next = vec![T::zero(); l.fan_in];
                for (o, d) in delta.iter().enumerate() {
                    let row = &p[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += *w * *d;
                    }
                }
                for (i, n) in next.iter_mut().enumerate() {
                    *n *= spec.activation.derivative(c.pre[li - 1][i], c.acts[li - 1][i]);
                }
                debug_assert_eq!(prev.fan_out, next.len());
                delta = next;
            }
        }
        Layout::Conv(l) => {
            let chans = spec.channels;
            let times = spec.times;
            let g_total = l.filters * l.depth;
            let mut dh = vec![T::zero(); l.feat];
            for (cls, d) in dlogits.iter().enumerate() {
                let row_g = &mut grad[l.w_h + cls * l.feat..l.w_h + (cls + 1) * l.feat];
                for (g, h) in row_g.iter_mut().zip(&c.h) {
                    *g += *d * *h;
                }
                grad[l.b_h + cls] += *d;
                let row = &p[l.w_h + cls * l.feat..l.w_h + (cls + 1) * l.feat];
                for (acc, w) in dh.iter_mut().zip(row) {
                    *acc += *w * *d;
                }
            }
            let inv = T::one() / T::lit(l.pool as f64);
            let mut dv = vec![T::zero(); g_total * l.tp];
            for g in 0..g_total {
                for q in 0..l.npool {
                    let val = dh[g * l.npool + q] * inv;
                    for t in q * l.pool..(q + 1) * l.pool {
                        let i = g * l.tp + t;
                        dv[i] = val * spec.activation.derivative(c.v[i], c.a[i]);
                    }
                }
            }
            let mut dy = vec![T::zero(); times];
            for g in 0..g_total {
                let f = g / l.depth;
                let dvg = &dv[g * l.tp..(g + 1) * l.tp];
                let y = &c.u[g * times..(g + 1) * times];
                let w = &p[l.w_t + f * l.k..l.w_t + (f + 1) * l.k];
                dy.fill(T::zero());
                for j in 0..l.k {
                    let mut acc = T::zero();
                    let wj = w[j];
                    for ((dvt, yt), dyt) in dvg.iter().zip(&y[j..j + l.tp]).zip(&mut dy[j..j + l.tp]) {
                        acc += *dvt * *yt;
                        *dyt += wj * *dvt;
                    }
                    grad[l.w_t + f * l.k + j] += acc;
                }
                for ch in 0..chans {
                    let mut acc = T::zero();
                    for (dyt, xt) in dy.iter().zip(&x[ch * times..(ch + 1) * times]) {
                        acc += *dyt * *xt;
                    }
                    grad[l.w_s + g * chans + ch] += acc;
                }
                grad[l.b_s + g] += dvg.iter().copied().sum::<T>();
            }
        }
    }
}

/// Numerically stable `log(sum(exp(z)))`.
pub fn log_sum_exp<T: Real>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| (v - lse).exp()).collect()
}

/// Logits for every epoch in the batch, one row per epoch.
pub fn forward<T: Real>(spec: &ModelSpec, params: &ParamVector<T>, batch: &Batch<T>) -> Result<Vec<Vec<T>>> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let layout = spec.layout();
    let mut cache = Cache::new(spec, &layout);
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        forward_sample(spec, &layout, params.values(), batch.sample(i), &mut cache);
        out.push(cache.logits.clone());
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grad<T: Real>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    batch: &Batch<T>,
    labels: &[usize],
) -> Result<(T, ParamVector<T>)> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    if labels.len() != batch.len() {
        return Err(Error::LengthMismatch { expected: batch.len(), got: labels.len() });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= spec.n_classes) {
        return Err(Error::LabelOutOfRange { label, n_classes: spec.n_classes });
    }
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let layout = spec.layout();
    let mut cache = Cache::new(spec, &layout);
    let mut grad = ParamVector::zeros_like(params);
    let mut loss = T::zero();
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut dlogits = vec![T::zero(); spec.n_classes];
    for (i, &y) in labels.iter().enumerate() {
        let x = batch.sample(i);
        forward_sample(spec, &layout, params.values(), x, &mut cache);
        let lse = log_sum_exp(&cache.logits);
        loss += lse - cache.logits[y];
        for (c, (d, z)) in dlogits.iter_mut().zip(&cache.logits).enumerate() {
            let prob = (*z - lse).exp();
            *d = (prob - if c == y { T::one() } else { T::zero() }) * scale;
        }
        backward_sample(spec, &layout, params.values(), x, &cache, &dlogits, grad.values_mut());
    }
    Ok((loss * scale, grad))
}

/// Argmax class per epoch; ties go to the lowest class id.
pub fn predict<T: Real>(spec: &ModelSpec, params: &ParamVector<T>, batch: &Batch<T>) -> Result<Vec<usize>> {
    Ok(forward(spec, params, batch)?.iter().map(|row| argmax(row)).collect())
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
