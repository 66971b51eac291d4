//! Class-conditional latent diffusion: a convolutional image autoencoder
//! defining the latent space, a small UNet denoiser with timestep and
//! cross-attention conditioning, the epsilon-prediction training objective,
//! and ancestral sampling with optional hidden-state taps.

use crate::error::{CndError, Result};
use crate::nn::{
    randn, Conv2d, GroupNorm, LayerNorm, Linear, Module, MultiHeadAttention,
    timestep_embedding, warmup_cosine_lr, AdamW,
};
use crate::synth_data::{batch_indices, Corpus};
use crate::tensor::{Arr, GradMode, Graph, Param, Tensor};
use ndarray::{Array1, Array2, Array3, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// Per-step variance constants of the forward diffusion process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(CndError::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CndError::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut beta = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let frac = if t_steps == 1 { 0.0 } else { t as f64 / (t_steps - 1) as f64 };
        beta.push(beta_start + frac * (beta_end - beta_start));
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { t_steps, beta, alpha, alpha_bar })
}

/// Closed-form forward process: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn forward_diffuse(z0: &Arr, t: usize, epsilon: &Arr, schedule: &NoiseSchedule) -> Result<Arr> {
    if t >= schedule.t_steps {
        return Err(CndError::Input(format!(
            "timestep {t} out of range 0..{}",
            schedule.t_steps
        )));
    }
    if z0.shape() != epsilon.shape() {
        return Err(CndError::Shape("z0 and epsilon must share a shape".into()));
    }
    let ab = schedule.alpha_bar[t];
    Ok(z0 * ab.sqrt() + epsilon * (1.0 - ab).sqrt())
}

// ---------------------------------------------------------------------------
// Image autoencoder defining the latent space
// ---------------------------------------------------------------------------

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_DOWNSAMPLE: usize = 4;

/// 4x-downsampling convolutional autoencoder: image [B,3,S,S] in [0,1] to
/// latent [B,4,S/4,S/4] and back (decoder output sigmoid-clamped to [0,1]).
/// `latent_scale` holds the training-set latent standard deviation so the
/// diffusion process can operate on roughly unit-variance codes.
pub struct ImageAutoencoder {
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    dec3: Conv2d,
    pub latent_scale: Param,
    pub image_size: usize,
}

impl ImageAutoencoder {
    pub fn new(image_size: usize, seed: u64) -> Result<Self> {
        if image_size % LATENT_DOWNSAMPLE != 0 || image_size < LATENT_DOWNSAMPLE {
            return Err(CndError::Config(format!(
                "image size {image_size} must be a positive multiple of {LATENT_DOWNSAMPLE}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ImageAutoencoder {
            enc1: Conv2d::new(&mut rng, 3, 16, 3, 2, 1),
            enc2: Conv2d::new(&mut rng, 16, 32, 3, 2, 1),
            enc3: Conv2d::new(&mut rng, 32, LATENT_CHANNELS, 3, 1, 1),
            dec1: Conv2d::new(&mut rng, LATENT_CHANNELS, 32, 3, 1, 1),
            dec2: Conv2d::new(&mut rng, 32, 16, 3, 1, 1),
            dec3: Conv2d::new(&mut rng, 16, 3, 3, 1, 1),
            latent_scale: Param::new(Arr::from_elem(IxDyn(&[1]), 1.0)),
            image_size,
        })
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / LATENT_DOWNSAMPLE
    }

    /// Raw (unscaled) latent codes.
    pub fn encode(&self, g: &Graph, x: &Tensor) -> Tensor {
        let h = self.enc1.forward(g, x).silu();
        let h = self.enc2.forward(g, &h).silu();
        self.enc3.forward(g, &h)
    }

    /// Raw latents back to an image in [0,1].
    pub fn decode(&self, g: &Graph, z: &Tensor) -> Tensor {
        let h = self.dec1.forward(g, z).silu();
        let h = h.upsample2x();
        let h = self.dec2.forward(g, &h).silu();
        let h = h.upsample2x();
        self.dec3.forward(g, &h).sigmoid()
    }

    fn check_image(&self, image: &Array3<f32>) -> Result<()> {
        let s = image.shape();
        if s != [self.image_size, self.image_size, 3] {
            return Err(CndError::Shape(format!(
                "expected {0}x{0}x3 image, got {s:?}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// One image to its diffusion-space (scale-normalized) latent [4,h,w].
    pub fn encode_image(&self, image: &Array3<f32>) -> Result<Arr> {
        self.check_image(image)?;
        let batch = images_to_nchw(std::slice::from_ref(image));
        let g = Graph::inference();
        let z = self.encode(&g, &g.constant(batch));
        let scale = self.latent_scale.value[[0]];
        let out = z.value().index_axis(Axis(0), 0).to_owned() / scale;
        Ok(out.into_dyn())
    }

    /// A diffusion-space latent [4,h,w] back to an image in [0,1].
    pub fn decode_latent(&self, z: &Arr) -> Result<Array3<f32>> {
        let side = self.latent_side();
        if z.shape() != [LATENT_CHANNELS, side, side] {
            return Err(CndError::Shape(format!(
                "expected {LATENT_CHANNELS}x{side}x{side} latent, got {:?}",
                z.shape()
            )));
        }
        let scale = self.latent_scale.value[[0]];
        let batch = (z * scale).insert_axis(Axis(0));
        let g = Graph::inference();
        let img = self.decode(&g, &g.constant(batch.into_dyn()));
        Ok(nchw_to_image(&img.value(), 0))
    }

    /// Batched diffusion-space encoding of corpus images.
    pub fn encode_images_scaled(&self, images: &[Array3<f32>]) -> Result<Arr> {
        for im in images {
            self.check_image(im)?;
        }
        let g = Graph::inference();
        let z = self.encode(&g, &g.constant(images_to_nchw(images)));
        let scale = self.latent_scale.value[[0]];
        Ok(z.value() / scale)
    }
}

impl Module for ImageAutoencoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        let j = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.enc1.collect(&j("enc1"), out);
        self.enc2.collect(&j("enc2"), out);
        self.enc3.collect(&j("enc3"), out);
        self.dec1.collect(&j("dec1"), out);
        self.dec2.collect(&j("dec2"), out);
        self.dec3.collect(&j("dec3"), out);
        out.push((j("latent_scale"), &self.latent_scale));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let j = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.enc1.collect_mut(&j("enc1"), out);
        self.enc2.collect_mut(&j("enc2"), out);
        self.enc3.collect_mut(&j("enc3"), out);
        self.dec1.collect_mut(&j("dec1"), out);
        self.dec2.collect_mut(&j("dec2"), out);
        self.dec3.collect_mut(&j("dec3"), out);
        out.push((j("latent_scale"), &mut self.latent_scale));
    }
}

/// HWC f32 images to an NCHW f64 batch.
pub fn images_to_nchw(images: &[Array3<f32>]) -> Arr {
    let (h, w) = (images[0].shape()[0], images[0].shape()[1]);
    let mut out = Arr::zeros(IxDyn(&[images.len(), 3, h, w]));
    for (b, im) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[b, c, y, x]] = im[[y, x, c]] as f64;
                }
            }
        }
    }
    out
}

/// One sample of an NCHW batch back to an HWC f32 image.
pub fn nchw_to_image(batch: &Arr, index: usize) -> Array3<f32> {
    let s = batch.shape();
    let (h, w) = (s[2], s[3]);
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| batch[[index, c, y, x]] as f32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        AutoencoderTrainConfig { epochs: 60, batch_size: 16, max_lr: 2e-3, weight_decay: 0.01 }
    }
}

/// Trains the autoencoder on corpus images with pixel MSE, then freezes the
/// training-set latent standard deviation into `latent_scale`.
pub fn train_autoencoder(
    corpus: &Corpus,
    cfg: &AutoencoderTrainConfig,
    seed: u64,
) -> Result<(ImageAutoencoder, Vec<f64>)> {
    if corpus.train.is_empty() {
        return Err(CndError::Config("corpus has no training samples".into()));
    }
    let images: Vec<Array3<f32>> = corpus.train.iter().map(|(_, im)| im.pixels.clone()).collect();
    let size = images[0].shape()[0];
    let mut ae = ImageAutoencoder::new(size, crate::contrastive::derive_seed(seed, 10, 0))?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let steps_per_epoch = batch_indices(images.len(), cfg.batch_size, 0, false).len();
    let total = cfg.epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = batch_indices(
            images.len(),
            cfg.batch_size,
            crate::contrastive::derive_seed(seed, 11, epoch as u64),
            false,
        );
        let mut sum = 0.0;
        for batch in &batches {
            let pick: Vec<Array3<f32>> = batch.iter().map(|&i| images[i].clone()).collect();
            let g = Graph::new(GradMode::All);
            let x = g.constant(images_to_nchw(&pick));
            let z = ae.encode(&g, &x);
            let recon = ae.decode(&g, &z);
            let loss = recon.sub(&x).square().mean_all();
            let v = loss.item();
            if !v.is_finite() {
                return Err(CndError::Diverged(format!("autoencoder loss {v} at step {step}")));
            }
            let mut grads = g.backward(&loss);
            let lr = warmup_cosine_lr(step, total, total / 20, cfg.max_lr);
            opt.step(ae.named_params_mut(), &mut grads, lr);
            sum += v;
            step += 1;
        }
        history.push(sum / batches.len() as f64);
    }
    // Freeze the latent scale from training-set statistics.
    let g = Graph::inference();
    let z = ae.encode(&g, &g.constant(images_to_nchw(&images)));
    let zv = z.value();
    let mean = zv.mean().unwrap();
    let var = zv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / zv.len() as f64;
    ae.latent_scale.value[[0]] = var.sqrt().max(1e-6);
    Ok((ae, history))
}

// ---------------------------------------------------------------------------
// Hidden-state taps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Encoder,
    Middle,
    Decoder,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Middle => "middle",
            Stage::Decoder => "decoder",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = CndError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Stage::Encoder),
            "middle" => Ok(Stage::Middle),
            "decoder" => Ok(Stage::Decoder),
            other => Err(CndError::Config(format!("unknown stage '{other}'"))),
        }
    }
}

/// Capture context for denoiser activations. Register (stage, layer) taps and
/// the timesteps of interest; forward passes append one spatially-averaged
/// row per sample at each registered key. Requires exclusive use per run.
#[derive(Debug, Default)]
pub struct TapRecorder {
    layout: BTreeMap<Stage, usize>,
    registered: BTreeSet<(Stage, usize)>,
    timesteps: BTreeSet<usize>,
    captured: BTreeMap<(Stage, usize, usize), Vec<Array1<f64>>>,
}

impl TapRecorder {
    pub fn new(layout: BTreeMap<Stage, usize>) -> Self {
        TapRecorder { layout, ..Default::default() }
    }

    pub fn register(&mut self, stage: Stage, layer: usize) -> Result<()> {
        let count = *self.layout.get(&stage).unwrap_or(&0);
        if layer >= count {
            return Err(CndError::Config(format!(
                "stage {} has {count} tappable layers, got index {layer}",
                stage.as_str()
            )));
        }
        self.registered.insert((stage, layer));
        Ok(())
    }

    pub fn watch_timestep(&mut self, t: usize) {
        self.timesteps.insert(t);
    }

    pub fn registered_keys(&self) -> Vec<(Stage, usize)> {
        self.registered.iter().cloned().collect()
    }

    fn wants(&self, stage: Stage, layer: usize, t: usize) -> bool {
        self.registered.contains(&(stage, layer)) && self.timesteps.contains(&t)
    }

    fn record(&mut self, stage: Stage, layer: usize, t: usize, rows: Array2<f64>) {
        let entry = self.captured.entry((stage, layer, t)).or_default();
        for row in rows.rows() {
            entry.push(row.to_owned());
        }
    }

    /// Drains captures into (stage, layer, timestep) -> samples x features.
    pub fn read_taps(&mut self) -> BTreeMap<(Stage, usize, usize), Array2<f64>> {
        let mut out = BTreeMap::new();
        for (key, rows) in std::mem::take(&mut self.captured) {
            let d = rows[0].len();
            let mut m = Array2::zeros((rows.len(), d));
            for (i, r) in rows.iter().enumerate() {
                m.row_mut(i).assign(r);
            }
            out.insert(key, m);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// UNet denoiser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Resolution levels (indices into channel_mults) that get cross-attention.
    pub attention_levels: Vec<usize>,
    pub num_res_blocks: usize,
    pub context_dim: usize,
    pub time_dim: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub latent_side: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            channel_mults: vec![1, 2],
            attention_levels: vec![0, 1],
            num_res_blocks: 1,
            context_dim: 64,
            time_dim: 64,
            num_heads: 4,
            num_classes: 10,
            latent_side: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(CndError::Config("channel_mults must be non-empty".into()));
        }
        if self.num_res_blocks == 0 {
            return Err(CndError::Config("num_res_blocks must be positive".into()));
        }
        if self.base_channels % 8 != 0 {
            return Err(CndError::Config("base_channels must be a multiple of 8".into()));
        }
        for &l in &self.attention_levels {
            if l >= self.channel_mults.len() {
                return Err(CndError::Config(format!("attention level {l} out of range")));
            }
            let ch = self.base_channels * self.channel_mults[l];
            if ch % self.num_heads != 0 {
                return Err(CndError::Config(format!(
                    "channels {ch} at level {l} must divide num_heads {}",
                    self.num_heads
                )));
            }
        }
        let levels = self.channel_mults.len();
        if self.latent_side % (1 << (levels - 1)) != 0 {
            return Err(CndError::Config(format!(
                "latent side {} cannot be halved {} times",
                self.latent_side,
                levels - 1
            )));
        }
        if self.num_classes == 0 || self.context_dim == 0 || self.time_dim == 0 {
            return Err(CndError::Config("classes, context_dim and time_dim must be positive".into()));
        }
        Ok(())
    }
}

fn gn_groups(channels: usize) -> usize {
    if channels % 8 == 0 { 8 } else { 1 }
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, time_dim: usize) -> Self {
        ResBlock {
            gn1: GroupNorm::new(c_in, gn_groups(c_in)),
            conv1: Conv2d::new(rng, c_in, c_out, 3, 1, 1),
            time_proj: Linear::new(rng, time_dim, c_out),
            gn2: GroupNorm::new(c_out, gn_groups(c_out)),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1),
            skip: if c_in == c_out { None } else { Some(Conv2d::new(rng, c_in, c_out, 1, 1, 0)) },
        }
    }

    fn forward(&self, g: &Graph, x: &Tensor, temb: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let h = self.conv1.forward(g, &self.gn1.forward(g, x).silu());
        let c_out = h.shape()[1];
        let tp = self.time_proj.forward(g, &temb.silu()).reshape(&[b, c_out, 1, 1]);
        let h = h.add(&tp);
        let h = self.conv2.forward(g, &self.gn2.forward(g, &h).silu());
        let res = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x.clone(),
        };
        h.add(&res)
    }
}

impl Module for ResBlock {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.gn1.collect(&format!("{prefix}.gn1"), out);
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.time_proj.collect(&format!("{prefix}.time_proj"), out);
        self.gn2.collect(&format!("{prefix}.gn2"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        if let Some(s) = &self.skip {
            s.collect(&format!("{prefix}.skip"), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.gn1.collect_mut(&format!("{prefix}.gn1"), out);
        self.conv1.collect_mut(&format!("{prefix}.conv1"), out);
        self.time_proj.collect_mut(&format!("{prefix}.time_proj"), out);
        self.gn2.collect_mut(&format!("{prefix}.gn2"), out);
        self.conv2.collect_mut(&format!("{prefix}.conv2"), out);
        if let Some(s) = &mut self.skip {
            s.collect_mut(&format!("{prefix}.skip"), out);
        }
    }
}

/// Cross-attention over flattened spatial positions with a residual link.
struct SpatialAttn {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl SpatialAttn {
    fn new(rng: &mut ChaCha8Rng, channels: usize, ctx_dim: usize, heads: usize) -> Self {
        SpatialAttn {
            ln: LayerNorm::new(channels),
            attn: MultiHeadAttention::new(rng, channels, ctx_dim, heads),
        }
    }

    fn forward(&self, g: &Graph, x: &Tensor, ctx: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = x.reshape(&[b, c, h * w]).permute(&[0, 2, 1]); // [B,HW,C]
        let y = self.attn.forward(g, &self.ln.forward(g, &tokens), ctx).add(&tokens);
        y.permute(&[0, 2, 1]).reshape(&[b, c, h, w])
    }
}

impl Module for SpatialAttn {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.ln.collect(&format!("{prefix}.ln"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.ln.collect_mut(&format!("{prefix}.ln"), out);
        self.attn.collect_mut(&format!("{prefix}.attn"), out);
    }
}

/// Epsilon-predicting UNet with timestep embedding, per-level cross-attention
/// and a frozen-copyable label-embedding table for class conditioning.
pub struct UNet {
    pub config: UNetConfig,
    conv_in: Conv2d,
    enc_res: Vec<ResBlock>,
    enc_attn: Vec<Option<SpatialAttn>>,
    downs: Vec<Conv2d>,
    mid_res1: ResBlock,
    mid_attn: SpatialAttn,
    mid_res2: ResBlock,
    dec_res: Vec<ResBlock>,
    dec_attn: Vec<Option<SpatialAttn>>,
    ups: Vec<Conv2d>,
    out_gn: GroupNorm,
    out_conv: Conv2d,
    time_fc1: Linear,
    time_fc2: Linear,
    pub label_embed: Param,
}

impl UNet {
    pub fn new(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = config.clone();
        let levels = cfg.channel_mults.len();
        let ch: Vec<usize> = cfg.channel_mults.iter().map(|m| cfg.base_channels * m).collect();
        let td = cfg.time_dim;
        let attn_at = |l: usize| cfg.attention_levels.contains(&l);

        let conv_in = Conv2d::new(&mut rng, LATENT_CHANNELS, ch[0], 3, 1, 1);
        let mut enc_res = Vec::new();
        let mut enc_attn = Vec::new();
        let mut downs = Vec::new();
        for l in 0..levels {
            for b in 0..cfg.num_res_blocks {
                let c_in = if b == 0 {
                    if l == 0 { ch[0] } else { ch[l - 1] }
                } else {
                    ch[l]
                };
                enc_res.push(ResBlock::new(&mut rng, c_in, ch[l], td));
                enc_attn.push(if attn_at(l) {
                    Some(SpatialAttn::new(&mut rng, ch[l], cfg.context_dim, cfg.num_heads))
                } else {
                    None
                });
            }
            if l < levels - 1 {
                downs.push(Conv2d::new(&mut rng, ch[l], ch[l], 3, 2, 1));
            }
        }
        let top = ch[levels - 1];
        let mid_res1 = ResBlock::new(&mut rng, top, top, td);
        let mid_attn = SpatialAttn::new(&mut rng, top, cfg.context_dim, cfg.num_heads);
        let mid_res2 = ResBlock::new(&mut rng, top, top, td);
        let mut dec_res = Vec::new();
        let mut dec_attn = Vec::new();
        let mut ups = Vec::new();
        for l in (0..levels).rev() {
            for b in 0..cfg.num_res_blocks {
                let c_in = if b == 0 { 2 * ch[l] } else { ch[l] };
                dec_res.push(ResBlock::new(&mut rng, c_in, ch[l], td));
                dec_attn.push(if attn_at(l) {
                    Some(SpatialAttn::new(&mut rng, ch[l], cfg.context_dim, cfg.num_heads))
                } else {
                    None
                });
            }
            if l > 0 {
                ups.push(Conv2d::new(&mut rng, ch[l], ch[l - 1], 3, 1, 1));
            }
        }
        let out_gn = GroupNorm::new(ch[0], gn_groups(ch[0]));
        // Zero-initialized output conv keeps early predictions small.
        let mut out_conv = Conv2d::new(&mut rng, ch[0], LATENT_CHANNELS, 3, 1, 1);
        out_conv.w.value.fill(0.0);
        let time_fc1 = Linear::new(&mut rng, td, td);
        let time_fc2 = Linear::new(&mut rng, td, td);
        let label_embed = Param::new(randn(&mut rng, &[cfg.num_classes, cfg.context_dim], 1.0));
        Ok(UNet {
            config: cfg,
            conv_in,
            enc_res,
            enc_attn,
            downs,
            mid_res1,
            mid_attn,
            mid_res2,
            dec_res,
            dec_attn,
            ups,
            out_gn,
            out_conv,
            time_fc1,
            time_fc2,
            label_embed,
        })
    }

    /// Tappable layer counts per stage.
    pub fn tap_layout(&self) -> BTreeMap<Stage, usize> {
        let mut m = BTreeMap::new();
        m.insert(Stage::Encoder, self.enc_res.len());
        m.insert(Stage::Middle, 1usize);
        m.insert(Stage::Decoder, self.dec_res.len());
        m
    }

    /// Class labels to a one-token context sequence [B,1,context_dim] on the
    /// tape (so diffusion pretraining learns the label embeddings).
    pub fn class_context(&self, g: &Graph, labels: &[usize]) -> Result<Tensor> {
        for &l in labels {
            if l >= self.config.num_classes {
                return Err(CndError::Input(format!("class label {l} out of range")));
            }
        }
        let table = g.param(&self.label_embed);
        Ok(table.index_select(labels).reshape(&[labels.len(), 1, self.config.context_dim]))
    }

    /// Denoiser forward pass. `time_add` (if given, [B,time_dim]) is added to
    /// the processed timestep embedding; `taps` captures activations when the
    /// recorder watches `tap_timestep`.
    pub fn forward(
        &self,
        g: &Graph,
        z_t: &Tensor,
        timesteps: &[usize],
        ctx: &Tensor,
        time_add: Option<&Tensor>,
        mut taps: Option<(&mut TapRecorder, usize)>,
    ) -> Result<Tensor> {
        let s = z_t.shape().to_vec();
        let side = self.config.latent_side;
        if s.len() != 4 || s[1] != LATENT_CHANNELS || s[2] != side || s[3] != side {
            return Err(CndError::Shape(format!(
                "expected latent [B,{LATENT_CHANNELS},{side},{side}], got {s:?}"
            )));
        }
        if timesteps.len() != s[0] {
            return Err(CndError::Shape("one timestep per batch element required".into()));
        }
        if ctx.shape()[0] != s[0] || ctx.shape()[2] != self.config.context_dim {
            return Err(CndError::Shape("context batch/width mismatch".into()));
        }
        let mut temb = self
            .time_fc2
            .forward(g, &self.time_fc1.forward(g, &g.constant(timestep_embedding(timesteps, self.config.time_dim))).silu());
        if let Some(extra) = time_add {
            if extra.shape() != [s[0], self.config.time_dim] {
                return Err(CndError::Shape("time_add must be [B,time_dim]".into()));
            }
            temb = temb.add(extra);
        }

        let capture = |taps: &mut Option<(&mut TapRecorder, usize)>, stage: Stage, layer: usize, x: &Tensor| {
            if let Some((rec, t)) = taps {
                if rec.wants(stage, layer, *t) {
                    let rows = x.spatial_mean().value().clone();
                    let rows2 = rows.into_dimensionality::<ndarray::Ix2>().unwrap();
                    rec.record(stage, layer, *t, rows2);
                }
            }
        };

        let levels = self.config.channel_mults.len();
        let nrb = self.config.num_res_blocks;
        let mut x = self.conv_in.forward(g, z_t);
        let mut skips = Vec::with_capacity(levels);
        let mut enc_idx = 0usize;
        for l in 0..levels {
            for _ in 0..nrb {
                x = self.enc_res[enc_idx].forward(g, &x, &temb);
                if let Some(attn) = &self.enc_attn[enc_idx] {
                    x = attn.forward(g, &x, ctx);
                }
                capture(&mut taps, Stage::Encoder, enc_idx, &x);
                enc_idx += 1;
            }
            skips.push(x.clone());
            if l < levels - 1 {
                x = self.downs[l].forward(g, &x);
            }
        }
        x = self.mid_res1.forward(g, &x, &temb);
        x = self.mid_attn.forward(g, &x, ctx);
        x = self.mid_res2.forward(g, &x, &temb);
        capture(&mut taps, Stage::Middle, 0, &x);
        let mut dec_idx = 0usize;
        let mut up_idx = 0usize;
        for l in (0..levels).rev() {
            for b in 0..nrb {
                if b == 0 {
                    x = Tensor::concat(&[x.clone(), skips[l].clone()], 1);
                }
                x = self.dec_res[dec_idx].forward(g, &x, &temb);
                if let Some(attn) = &self.dec_attn[dec_idx] {
                    x = attn.forward(g, &x, ctx);
                }
                capture(&mut taps, Stage::Decoder, dec_idx, &x);
                dec_idx += 1;
            }
            if l > 0 {
                x = self.ups[up_idx].forward(g, &x.upsample2x());
                up_idx += 1;
            }
        }
        Ok(self.out_conv.forward(g, &self.out_gn.forward(g, &x).silu()))
    }
}

impl Module for UNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        let j = |n: String| if prefix.is_empty() { n } else { format!("{prefix}.{n}") };
        self.conv_in.collect(&j("conv_in".into()), out);
        for (i, r) in self.enc_res.iter().enumerate() {
            r.collect(&j(format!("enc.{i}")), out);
        }
        for (i, a) in self.enc_attn.iter().enumerate() {
            if let Some(a) = a {
                a.collect(&j(format!("enc_attn.{i}")), out);
            }
        }
        for (i, d) in self.downs.iter().enumerate() {
            d.collect(&j(format!("down.{i}")), out);
        }
        self.mid_res1.collect(&j("mid1".into()), out);
        self.mid_attn.collect(&j("mid_attn".into()), out);
        self.mid_res2.collect(&j("mid2".into()), out);
        for (i, r) in self.dec_res.iter().enumerate() {
            r.collect(&j(format!("dec.{i}")), out);
        }
        for (i, a) in self.dec_attn.iter().enumerate() {
            if let Some(a) = a {
                a.collect(&j(format!("dec_attn.{i}")), out);
            }
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.collect(&j(format!("up.{i}")), out);
        }
        self.out_gn.collect(&j("out_gn".into()), out);
        self.out_conv.collect(&j("out_conv".into()), out);
        self.time_fc1.collect(&j("time_fc1".into()), out);
        self.time_fc2.collect(&j("time_fc2".into()), out);
        out.push((j("label_embed".into()), &self.label_embed));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let j = |n: String| if prefix.is_empty() { n } else { format!("{prefix}.{n}") };
        self.conv_in.collect_mut(&j("conv_in".into()), out);
        for (i, r) in self.enc_res.iter_mut().enumerate() {
            r.collect_mut(&j(format!("enc.{i}")), out);
        }
        for (i, a) in self.enc_attn.iter_mut().enumerate() {
            if let Some(a) = a {
                a.collect_mut(&j(format!("enc_attn.{i}")), out);
            }
        }
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.collect_mut(&j(format!("down.{i}")), out);
        }
        self.mid_res1.collect_mut(&j("mid1".into()), out);
        self.mid_attn.collect_mut(&j("mid_attn".into()), out);
        self.mid_res2.collect_mut(&j("mid2".into()), out);
        for (i, r) in self.dec_res.iter_mut().enumerate() {
            r.collect_mut(&j(format!("dec.{i}")), out);
        }
        for (i, a) in self.dec_attn.iter_mut().enumerate() {
            if let Some(a) = a {
                a.collect_mut(&j(format!("dec_attn.{i}")), out);
            }
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.collect_mut(&j(format!("up.{i}")), out);
        }
        self.out_gn.collect_mut(&j("out_gn".into()), out);
        self.out_conv.collect_mut(&j("out_conv".into()), out);
        self.time_fc1.collect_mut(&j("time_fc1".into()), out);
        self.time_fc2.collect_mut(&j("time_fc2".into()), out);
        out.push((j("label_embed".into()), &mut self.label_embed));
    }
}

// ---------------------------------------------------------------------------
// Training objective and sampling
// ---------------------------------------------------------------------------

/// Anything that predicts the added noise from (z_t, t, context).
pub trait Denoiser {
    fn predict(&self, g: &Graph, z_t: &Tensor, timesteps: &[usize], ctx: &Tensor) -> Result<Tensor>;
}

impl Denoiser for UNet {
    fn predict(&self, g: &Graph, z_t: &Tensor, timesteps: &[usize], ctx: &Tensor) -> Result<Tensor> {
        self.forward(g, z_t, timesteps, ctx, None, None)
    }
}

/// Epsilon-prediction objective on the tape: draws per-sample timesteps and
/// noise from `seed`, diffuses `z0`, and returns mean squared error between
/// the true and predicted noise. Deterministic per seed.
pub fn diffusion_loss_t(
    g: &Graph,
    denoiser: &dyn Denoiser,
    z0: &Arr,
    ctx: &Tensor,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let s = z0.shape().to_vec();
    if s.len() != 4 {
        return Err(CndError::Shape("z0 batch must be [B,C,H,W]".into()));
    }
    let b = s[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let timesteps: Vec<usize> = (0..b)
        .map(|_| (rand::Rng::random::<u64>(&mut rng) % schedule.t_steps as u64) as usize)
        .collect();
    let eps = randn(&mut rng, &s, 1.0);
    let mut z_t = Arr::zeros(IxDyn(&s));
    for i in 0..b {
        let zi = forward_diffuse(
            &z0.index_axis(Axis(0), i).to_owned().into_dyn(),
            timesteps[i],
            &eps.index_axis(Axis(0), i).to_owned().into_dyn(),
            schedule,
        )?;
        z_t.index_axis_mut(Axis(0), i).assign(&zi);
    }
    let pred = denoiser.predict(g, &g.constant(z_t), &timesteps, ctx)?;
    let loss = pred.sub(&g.constant(eps)).square().mean_all();
    if !loss.item().is_finite() {
        return Err(CndError::Diverged("non-finite diffusion loss".into()));
    }
    Ok(loss)
}

/// Plain-number version of the objective for oracles and reporting.
pub fn diffusion_loss(
    denoiser: &dyn Denoiser,
    z0: &Arr,
    ctx: &Arr,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let g = Graph::new(GradMode::None);
    let c = g.constant(ctx.clone());
    Ok(diffusion_loss_t(&g, denoiser, z0, &c, schedule, seed)?.item())
}

/// Ancestral sampling from pure noise down to z_0. Deterministic per seed.
/// `taps`, if given, captures activations at its watched timesteps.
pub fn sample_latents(
    unet: &UNet,
    schedule: &NoiseSchedule,
    ctx: &Arr,
    time_add: Option<&Arr>,
    seed: u64,
    mut taps: Option<&mut TapRecorder>,
) -> Result<Arr> {
    let b = ctx.shape()[0];
    let side = unet.config.latent_side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = randn(&mut rng, &[b, LATENT_CHANNELS, side, side], 1.0);
    for t in (0..schedule.t_steps).rev() {
        let g = Graph::inference();
        let ctx_t = g.constant(ctx.clone());
        let extra = time_add.map(|a| g.constant(a.clone()));
        let step_taps = taps.as_deref_mut().map(|r| (r, t));
        let eps = unet.forward(&g, &g.constant(z.clone()), &vec![t; b], &ctx_t, extra.as_ref(), step_taps)?;
        let eps = eps.value().clone();
        let (beta, alpha, ab) = (schedule.beta[t], schedule.alpha[t], schedule.alpha_bar[t]);
        let mean = (&z - &(&eps * (beta / (1.0 - ab).sqrt()))) / alpha.sqrt();
        if t > 0 {
            let ab_prev = schedule.alpha_bar[t - 1];
            let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
            let noise = randn(&mut rng, &[b, LATENT_CHANNELS, side, side], 1.0);
            z = mean + noise * sigma;
        } else {
            z = mean;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CndError::Diverged(format!("non-finite sample at timestep {t}")));
        }
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// Class-conditional training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 1500,
            batch_size: 16,
            max_lr: 1.5e-3,
            warmup_steps: 50,
            weight_decay: 0.01,
            t_steps: 250,
            // Standard DDPM endpoints scaled by 1000/250 so the forward
            // process still reaches near-pure noise in 250 steps.
            beta_start: 4e-4,
            beta_end: 0.08,
        }
    }
}

/// The latent diffusion stack: image autoencoder, UNet denoiser, schedule.
pub struct DiffusionModel {
    pub autoencoder: ImageAutoencoder,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
}

impl DiffusionModel {
    /// Samples images conditioned on a class label.
    pub fn sample_class(&self, class: usize, count: usize, seed: u64) -> Result<Vec<Array3<f32>>> {
        let g = Graph::inference();
        let ctx = self.unet.class_context(&g, &vec![class; count])?.value().clone();
        let latents = sample_latents(&self.unet, &self.schedule, &ctx, None, seed, None)?;
        (0..count)
            .map(|i| self.autoencoder.decode_latent(&latents.index_axis(Axis(0), i).to_owned().into_dyn()))
            .collect()
    }
}

/// Trains the UNet class-conditionally on autoencoder latents of the corpus.
pub fn train_unet(
    corpus: &Corpus,
    autoencoder: &ImageAutoencoder,
    unet_config: &UNetConfig,
    cfg: &DiffusionTrainConfig,
    seed: u64,
) -> Result<(UNet, NoiseSchedule, Vec<f64>)> {
    if corpus.train.is_empty() {
        return Err(CndError::Config("corpus has no training samples".into()));
    }
    if unet_config.num_classes != corpus.spec.num_classes {
        return Err(CndError::Config(format!(
            "unet classes {} != corpus classes {}",
            unet_config.num_classes, corpus.spec.num_classes
        )));
    }
    let schedule = make_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;
    let mut unet = UNet::new(unet_config, crate::contrastive::derive_seed(seed, 20, 0))?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let images: Vec<Array3<f32>> = corpus.train.iter().map(|(_, im)| im.pixels.clone()).collect();
    let labels: Vec<usize> = corpus.train.iter().map(|(s, _)| s.concept_label).collect();
    let latents = autoencoder.encode_images_scaled(&images)?;
    let n = images.len();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut step = 0usize;
    'outer: for epoch in 0.. {
        let batches = batch_indices(n, cfg.batch_size, crate::contrastive::derive_seed(seed, 21, epoch), false);
        for batch in &batches {
            if step >= cfg.steps {
                break 'outer;
            }
            let mut z0 = Arr::zeros(IxDyn(&[
                batch.len(),
                LATENT_CHANNELS,
                autoencoder.latent_side(),
                autoencoder.latent_side(),
            ]));
            let mut batch_labels = Vec::with_capacity(batch.len());
            for (row, &i) in batch.iter().enumerate() {
                z0.index_axis_mut(Axis(0), row).assign(&latents.index_axis(Axis(0), i));
                batch_labels.push(labels[i]);
            }
            let g = Graph::new(GradMode::All);
            let ctx = unet.class_context(&g, &batch_labels)?;
            let loss = diffusion_loss_t(
                &g,
                &unet,
                &z0,
                &ctx,
                &schedule,
                crate::contrastive::derive_seed(seed, 22, step as u64),
            )?;
            let v = loss.item();
            let mut grads = g.backward(&loss);
            let lr = warmup_cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.max_lr);
            opt.step(unet.named_params_mut(), &mut grads, lr);
            history.push(v);
            step += 1;
        }
    }
    Ok((unet, schedule, history))
}
