//! Neural-network building blocks on top of the autograd tape: linear and
//! normalization layers, multi-head attention, transformer blocks, AdamW and
//! the warmup/cosine learning-rate schedule.

use crate::tensor::{Arr, Gradients, Graph, Param, Tensor};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Standard-normal draw via Box-Muller, deterministic per RNG state.
pub fn randn_scalar(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| randn_scalar(rng) * std).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::from_elem(IxDyn(shape), 1.0)
}

/// Anything with named parameters; powers checkpointing and optimizers.
pub trait Module {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Uids of every parameter, for building trainable-subset grad modes.
    fn param_uids(&self) -> Vec<u64> {
        self.named_params().iter().map(|(_, p)| p.uid()).collect()
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        Linear {
            w: Param::new(randn(rng, &[d_in, d_out], std)),
            b: Param::new(zeros(&[d_out])),
        }
    }

    /// Applies to the last axis; accepts [N, d_in] or [B, T, d_in].
    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let shape = x.shape().to_vec();
        let d_in = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, d_in]);
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let y = flat.matmul(&w).add(&b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.w.value.shape()[1];
        y.reshape(&out_shape)
    }
}

impl Module for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(ones(&[dim])),
            beta: Param::new(zeros(&[dim])),
            eps: 1e-5,
        }
    }

    /// Normalizes the last axis.
    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let last = x.shape().len() - 1;
        let mean = x.mean_axis(last, true);
        let centered = x.sub(&mean);
        let var = centered.square().mean_axis(last, true);
        let norm = centered.div(&var.add_scalar(self.eps).sqrt());
        norm.mul(&g.param(&self.gamma)).add(&g.param(&self.beta))
    }
}

impl Module for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// Per-channel normalization of [B,C,H,W] over channel groups.
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        GroupNorm {
            gamma: Param::new(ones(&[channels])),
            beta: Param::new(zeros(&[channels])),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let grouped = x.reshape(&[b, self.groups, c / self.groups * h * w]);
        let mean = grouped.mean_axis(2, true);
        let centered = grouped.sub(&mean);
        let var = centered.square().mean_axis(2, true);
        let norm = centered
            .div(&var.add_scalar(self.eps).sqrt())
            .reshape(&[b, c, h, w]);
        let gamma = g.param(&self.gamma).reshape(&[1, c, 1, 1]);
        let beta = g.param(&self.beta).reshape(&[1, c, 1, 1]);
        norm.mul(&gamma).add(&beta)
    }
}

impl Module for GroupNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        Conv2d {
            w: Param::new(randn(rng, &[c_out, c_in, kernel, kernel], (1.0 / fan_in).sqrt())),
            b: Param::new(zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        x.conv2d(&g.param(&self.w), &g.param(&self.b), self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

/// Multi-head attention. Self-attention when `ctx` is the input itself;
/// cross-attention when keys/values come from a separate context sequence.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, ctx_dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide heads");
        MultiHeadAttention {
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, ctx_dim, dim),
            wv: Linear::new(rng, ctx_dim, dim),
            wo: Linear::new(rng, dim, dim),
            heads,
            dim,
        }
    }

    /// x: [B,T,dim], ctx: [B,S,ctx_dim] -> [B,T,dim].
    pub fn forward(&self, g: &Graph, x: &Tensor, ctx: &Tensor) -> Tensor {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let s = ctx.shape()[1];
        let h = self.heads;
        let dh = self.dim / h;
        let split = |y: &Tensor, len: usize| {
            y.reshape(&[b, len, h, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * h, len, dh])
        };
        let q = split(&self.wq.forward(g, x), t);
        let k = split(&self.wk.forward(g, ctx), s);
        let v = split(&self.wv.forward(g, ctx), s);
        let scores = q
            .bmm(&k.permute(&[0, 2, 1]))
            .scale(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax();
        let out = attn
            .bmm(&v)
            .reshape(&[b, h, t, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, t, self.dim]);
        self.wo.forward(g, &out)
    }
}

impl Module for MultiHeadAttention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.wq.collect(&join(prefix, "wq"), out);
        self.wk.collect(&join(prefix, "wk"), out);
        self.wv.collect(&join(prefix, "wv"), out);
        self.wo.collect(&join(prefix, "wo"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.wq.collect_mut(&join(prefix, "wq"), out);
        self.wk.collect_mut(&join(prefix, "wk"), out);
        self.wv.collect_mut(&join(prefix, "wv"), out);
        self.wo.collect_mut(&join(prefix, "wo"), out);
    }
}

pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(rng, dim, hidden),
            fc2: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        self.fc2.forward(g, &self.fc1.forward(g, x).gelu())
    }
}

impl Module for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.fc1.collect_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_mut(&join(prefix, "fc2"), out);
    }
}

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, dim, heads),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, dim * 4),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let normed = self.ln1.forward(g, x);
        let x = x.add(&self.attn.forward(g, &normed, &normed));
        x.add(&self.mlp.forward(g, &self.ln2.forward(g, &x)))
    }
}

impl Module for TransformerBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.ln1.collect_mut(&join(prefix, "ln1"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.ln2.collect_mut(&join(prefix, "ln2"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
    }
}

/// Fixed sinusoidal position table: [n, dim].
pub fn sinusoidal_positions(n: usize, dim: usize) -> Arr {
    let mut table = Arr::zeros(IxDyn(&[n, dim]));
    for pos in 0..n {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            table[[pos, 2 * i]] = (pos as f64 * freq).sin();
            table[[pos, 2 * i + 1]] = (pos as f64 * freq).cos();
        }
    }
    table
}

/// Sinusoidal embedding of diffusion timesteps: [batch, dim].
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Arr {
    let mut out = Arr::zeros(IxDyn(&[timesteps.len(), dim]));
    for (row, &t) in timesteps.iter().enumerate() {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[[row, 2 * i]] = (t as f64 * freq).sin();
            out[[row, 2 * i + 1]] = (t as f64 * freq).cos();
        }
    }
    out
}

/// Decoupled-weight-decay adaptive-moment optimizer.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: BTreeMap<u64, (Arr, Arr)>,
    step_count: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            moments: BTreeMap::new(),
            step_count: 0,
        }
    }

    /// Applies one update. Parameters without a gradient entry are skipped.
    pub fn step(&mut self, params: Vec<(String, &mut Param)>, grads: &mut Gradients, lr: f64) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (_, p) in params {
            let Some(grad) = grads.take(p) else { continue };
            let (m, v) = self
                .moments
                .entry(p.uid())
                .or_insert_with(|| (Arr::zeros(p.value.raw_dim()), Arr::zeros(p.value.raw_dim())));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
                });
        }
    }
}

/// Linear warmup to `max_lr` then cosine decay to zero.
pub fn warmup_cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, max_lr: f64) -> f64 {
    if total_steps == 0 {
        return max_lr;
    }
    if step < warmup_steps {
        return max_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps).max(1) as f64;
    0.5 * max_lr * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradMode;
    use rand::SeedableRng;

    #[test]
    fn linear_shapes_and_3d_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut rng, 8, 5);
        let g = Graph::inference();
        let x = g.constant(randn(&mut rng, &[2, 3, 8], 1.0));
        let y = lin.forward(&g, &x);
        assert_eq!(y.shape(), &[2, 3, 5]);
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ln = LayerNorm::new(16);
        let g = Graph::inference();
        let x = g.constant(randn(&mut rng, &[4, 16], 3.0));
        let y = ln.forward(&g, &x);
        for row in y.value().rows() {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_rows_are_probabilities() {
        // Checked indirectly: output of softmax sums to 1 per row.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::inference();
        let x = g.constant(randn(&mut rng, &[2, 4, 6], 1.0));
        let probs = x.softmax();
        for lane in probs.value().lanes(ndarray::Axis(2)) {
            let s: f64 = lane.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(lane.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn transformer_block_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = TransformerBlock::new(&mut rng, 8, 2);
        let x0 = randn(&mut rng, &[1, 3, 8], 1.0);
        let eval = |block: &TransformerBlock, x: &Arr| {
            let g = Graph::new(GradMode::All);
            let xt = g.constant(x.clone());
            block.forward(&g, &xt).square().sum_all().item()
        };
        // Gradcheck one weight matrix entry-wise against finite differences.
        let g = Graph::new(GradMode::All);
        let xt = g.constant(x0.clone());
        let loss = block.forward(&g, &xt).square().sum_all();
        let grads = g.backward(&loss);
        let analytic = grads.get(&block.attn.wq.w).unwrap().clone();
        let mut block = block;
        let eps = 1e-6;
        for idx in [0usize, 7, 33] {
            let orig = block.attn.wq.w.value.as_slice().unwrap()[idx];
            block.attn.wq.w.value.as_slice_mut().unwrap()[idx] = orig + eps;
            let plus = eval(&block, &x0);
            block.attn.wq.w.value.as_slice_mut().unwrap()[idx] = orig - eps;
            let minus = eval(&block, &x0);
            block.attn.wq.w.value.as_slice_mut().unwrap()[idx] = orig;
            let n = (plus - minus) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-4,
                "wq grad mismatch at {idx}: {a} vs {n}"
            );
        }
    }

    #[test]
    fn adamw_zero_grad_is_pure_decay() {
        let mut p = Param::new(ones(&[4]));
        let uid = p.uid();
        let mut opt = AdamW::new(0.1);
        let mut grads = {
            // Fabricate a zero gradient for the param.
            let g = Graph::new(GradMode::All);
            let t = g.param(&p);
            let loss = t.mul(&g.constant(zeros(&[4]))).sum_all();
            g.backward(&loss)
        };
        opt.step(vec![("p".into(), &mut p)], &mut grads, 0.01);
        let _ = uid;
        for &v in p.value.iter() {
            assert!((v - (1.0 - 0.01 * 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let max = 1e-3;
        assert!(warmup_cosine_lr(0, 100, 10, max) < max * 0.2);
        assert!((warmup_cosine_lr(9, 100, 10, max) - max).abs() < 1e-12);
        assert!(warmup_cosine_lr(99, 100, 10, max) < max * 0.01);
    }
}
