//! Concept-aware conditioning: a frozen bank of class embeddings queried by
//! the fMRI feature through stacked cross-attention, plus the projections
//! that feed the UNet (cross-attention context and an additive term for the
//! timestep embedding), and the fine-tuning loop that trains only this
//! condition module.

use crate::checkpoint::content_hash;
use crate::contrastive::derive_seed;
use crate::diffusion::{forward_diffuse, ImageAutoencoder, NoiseSchedule, UNet, LATENT_CHANNELS};
use crate::error::{CndError, Result};
use crate::fmri_encoder::FmriMae;
use crate::nn::{randn, AdamW, LayerNorm, Linear, Module};
use crate::synth_data::{batch_indices, Corpus};
use crate::tensor::{Arr, GradMode, Graph, Param, Tensor};
use ndarray::{Array1, Array2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

// ---------------------------------------------------------------------------
// Concept bank
// ---------------------------------------------------------------------------

/// Per-class embedding table copied from a pretrained class-conditional
/// diffusion model. Immutable once frozen.
#[derive(Debug, Clone)]
pub struct ConceptBank {
    embeddings: Array2<f64>,
    frozen: bool,
}

impl ConceptBank {
    pub fn new(embeddings: Array2<f64>) -> Self {
        ConceptBank { embeddings, frozen: false }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.embeddings
    }

    /// Rejected after freezing.
    pub fn set_row(&mut self, class: usize, row: &Array1<f64>) -> Result<()> {
        if self.frozen {
            return Err(CndError::State("concept bank is frozen".into()));
        }
        if class >= self.embeddings.nrows() || row.len() != self.embeddings.ncols() {
            return Err(CndError::Shape("bank row index or width mismatch".into()));
        }
        self.embeddings.row_mut(class).assign(row);
        Ok(())
    }

    /// FNV-1a hash over the raw embedding bytes, for freeze verification.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.embeddings.iter() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Copies (and freezes) the label-embedding table of a pretrained
/// class-conditional diffusion UNet.
pub fn build_concept_bank(num_classes: usize, d_c: usize, source: &UNet) -> Result<ConceptBank> {
    let table = &source.label_embed.value;
    if table.shape() != [num_classes, d_c] {
        return Err(CndError::Config(format!(
            "label embedding table is {:?}, expected [{num_classes}, {d_c}]",
            table.shape()
        )));
    }
    let rows = table
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| CndError::Shape(e.to_string()))?;
    let mut bank = ConceptBank::new(rows);
    bank.freeze();
    Ok(bank)
}

// ---------------------------------------------------------------------------
// Cross-attention stack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptAttentionConfig {
    /// Number of stacked cross-attention layers.
    pub depth: usize,
    /// Attention width; the scale divisor is sqrt(d / num_heads).
    pub d: usize,
    pub num_heads: usize,
}

impl Default for ConceptAttentionConfig {
    fn default() -> Self {
        ConceptAttentionConfig { depth: 4, d: 64, num_heads: 1 }
    }
}

impl ConceptAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(CndError::Config("attention depth must be at least 1".into()));
        }
        if self.d == 0 || self.num_heads == 0 || self.d % self.num_heads != 0 {
            return Err(CndError::Config("d must be a positive multiple of num_heads".into()));
        }
        Ok(())
    }
}

/// One cross-attention layer: softmax(Q K^T / sqrt(d_h)) V with Q from the
/// running feature and K, V projected from the bank. No output projection, so
/// a single-row bank returns exactly W_V Emb(c).
pub struct ConceptAttentionLayer {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub ln: LayerNorm,
    heads: usize,
}

impl ConceptAttentionLayer {
    fn new(rng: &mut ChaCha8Rng, d: usize, d_c: usize, heads: usize) -> Self {
        ConceptAttentionLayer {
            wq: Param::new(randn(rng, &[d, d], (1.0 / d as f64).sqrt())),
            wk: Param::new(randn(rng, &[d_c, d], (1.0 / d_c as f64).sqrt())),
            wv: Param::new(randn(rng, &[d_c, d], (1.0 / d_c as f64).sqrt())),
            ln: LayerNorm::new(d),
            heads,
        }
    }

    /// x: [B,d], bank_rows: [C,d_c] -> (attention output [B,d], weights
    /// [B*heads, 1, C]).
    pub fn attend(&self, g: &Graph, x: &Tensor, bank_rows: &Tensor) -> (Tensor, Tensor) {
        let (b, d) = (x.shape()[0], x.shape()[1]);
        let c = bank_rows.shape()[0];
        let h = self.heads;
        let dh = d / h;
        let q = x.matmul(&g.param(&self.wq)); // [B,d]
        let k = bank_rows.matmul(&g.param(&self.wk)); // [C,d]
        let v = bank_rows.matmul(&g.param(&self.wv)); // [C,d]
        // Split heads: queries [B*h,1,dh]; keys/values [C,h,dh] shared per batch.
        let qh = q.reshape(&[b, 1, h, dh]).permute(&[0, 2, 1, 3]).reshape(&[b * h, 1, dh]);
        let split_kv = |t: &Tensor| {
            t.reshape(&[1, c, h, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[h, c, dh])
        };
        let kh = split_kv(&k);
        let vh = split_kv(&v);
        // Tile keys/values across the batch.
        let head_idx: Vec<usize> = (0..b * h).map(|i| i % h).collect();
        let kh = kh.index_select(&head_idx); // [B*h,C,dh]
        let vh = vh.index_select(&head_idx);
        let scores = qh.bmm(&kh.permute(&[0, 2, 1])).scale(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax(); // [B*h,1,C]
        let out = attn
            .bmm(&vh) // [B*h,1,dh]
            .reshape(&[b, h, dh])
            .reshape(&[b, d]);
        (out, attn)
    }

    /// Full layer: attention, residual connection, feature-wise normalization.
    pub fn forward(&self, g: &Graph, x: &Tensor, bank_rows: &Tensor) -> (Tensor, Tensor) {
        let (a, w) = self.attend(g, x, bank_rows);
        (self.ln.forward(g, &x.add(&a)), w)
    }
}

impl Module for ConceptAttentionLayer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        self.ln.collect(&format!("{prefix}.ln"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}.wq"), &mut self.wq));
        out.push((format!("{prefix}.wk"), &mut self.wk));
        out.push((format!("{prefix}.wv"), &mut self.wv));
        self.ln.collect_mut(&format!("{prefix}.ln"), out);
    }
}

/// Context tokens for UNet cross-attention plus the additive timestep term.
pub struct ConditionOutput {
    /// [B, depth, context_dim]
    pub context: Tensor,
    /// [B, time_dim]
    pub time_add: Tensor,
}

/// The trainable condition module: input projection, the cross-attention
/// stack, and output projections to the UNet's context and timestep widths.
pub struct ConditionModule {
    pub config: ConceptAttentionConfig,
    in_proj: Linear,
    pub layers: Vec<ConceptAttentionLayer>,
    ctx_proj: Linear,
    time_proj: Linear,
}

impl ConditionModule {
    pub fn new(
        config: &ConceptAttentionConfig,
        fmri_dim: usize,
        d_c: usize,
        context_dim: usize,
        time_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_proj = Linear::new(&mut rng, fmri_dim, config.d);
        let layers = (0..config.depth)
            .map(|_| ConceptAttentionLayer::new(&mut rng, config.d, d_c, config.num_heads))
            .collect();
        let ctx_proj = Linear::new(&mut rng, config.d, context_dim);
        let time_proj = Linear::new(&mut rng, config.d, time_dim);
        Ok(ConditionModule { config: config.clone(), in_proj, layers, ctx_proj, time_proj })
    }

    fn bank_tensor(&self, g: &Graph, bank: &ConceptBank) -> Result<Tensor> {
        if !bank.is_frozen() {
            return Err(CndError::State("concept bank must be frozen before use".into()));
        }
        Ok(g.constant(bank.rows().clone().into_dyn()))
    }

    /// Stacked cross-attention: returns the per-layer conditioned features
    /// ([B,d] each) and the attention weights of every layer.
    pub fn concept_attend(
        &self,
        g: &Graph,
        fmri_feature: &Tensor,
        bank: &ConceptBank,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let rows = self.bank_tensor(g, bank)?;
        let mut x = self.in_proj.forward(g, fmri_feature);
        let mut tokens = Vec::with_capacity(self.layers.len());
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, w) = layer.forward(g, &x, &rows);
            x = next;
            tokens.push(x.clone());
            weights.push(w);
        }
        Ok((tokens, weights))
    }

    /// Full condition: context token sequence (one token per layer, projected
    /// to context_dim) and the additive timestep term from the final feature.
    pub fn make_condition(
        &self,
        g: &Graph,
        fmri_feature: &Tensor,
        bank: &ConceptBank,
    ) -> Result<ConditionOutput> {
        let (tokens, _) = self.concept_attend(g, fmri_feature, bank)?;
        let b = fmri_feature.shape()[0];
        let d = self.config.d;
        let stacked: Vec<Tensor> = tokens.iter().map(|t| t.reshape(&[b, 1, d])).collect();
        let seq = Tensor::concat(&stacked, 1); // [B, depth, d]
        let context = self.ctx_proj.forward(g, &seq);
        let time_add = self.time_proj.forward(g, tokens.last().unwrap());
        Ok(ConditionOutput { context, time_add })
    }
}

impl Module for ConditionModule {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        let j = |n: String| if prefix.is_empty() { n } else { format!("{prefix}.{n}") };
        self.in_proj.collect(&j("in_proj".into()), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&j(format!("layer.{i}")), out);
        }
        self.ctx_proj.collect(&j("ctx_proj".into()), out);
        self.time_proj.collect(&j("time_proj".into()), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let j = |n: String| if prefix.is_empty() { n } else { format!("{prefix}.{n}") };
        self.in_proj.collect_mut(&j("in_proj".into()), out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&j(format!("layer.{i}")), out);
        }
        self.ctx_proj.collect_mut(&j("ctx_proj".into()), out);
        self.time_proj.collect_mut(&j("time_proj".into()), out);
    }
}

// ---------------------------------------------------------------------------
// Phase-2 fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Config {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Also fine-tune the fMRI encoder (default off: encoder stays frozen).
    pub train_encoder: bool,
    pub attention: ConceptAttentionConfig,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            steps: 500,
            batch_size: 8,
            lr: 5.3e-5,
            weight_decay: 0.0,
            train_encoder: false,
            attention: ConceptAttentionConfig::default(),
        }
    }
}

pub struct Phase2Output {
    pub condition: ConditionModule,
    pub bank: ConceptBank,
    pub history: Vec<f64>,
}

/// Optimizes the diffusion objective with condition = make_condition(fMRI),
/// training only the condition module (and optionally the encoder). The UNet
/// and the concept bank stay frozen; callers can verify via checkpoint hashes.
pub fn finetune_phase2(
    corpus: &Corpus,
    encoder: &mut FmriMae,
    unet: &UNet,
    schedule: &NoiseSchedule,
    autoencoder: &ImageAutoencoder,
    cfg: &Phase2Config,
    seed: u64,
) -> Result<Phase2Output> {
    cfg.attention.validate()?;
    if corpus.train.is_empty() {
        return Err(CndError::Config("corpus has no training samples".into()));
    }
    let num_classes = corpus.spec.num_classes;
    let d_c = unet.config.context_dim;
    let bank = build_concept_bank(num_classes, d_c, unet)?;
    let fmri_dim = encoder.config.embed_dim;
    let mut condition = ConditionModule::new(
        &cfg.attention,
        fmri_dim,
        d_c,
        unet.config.context_dim,
        unet.config.time_dim,
        derive_seed(seed, 30, 0),
    )?;

    let images: Vec<_> = corpus.train.iter().map(|(_, im)| im.pixels.clone()).collect();
    let voxels: Vec<Array1<f64>> = corpus
        .train
        .iter()
        .map(|(s, _)| Array1::from_iter(s.voxels.iter().map(|&v| v as f64)))
        .collect();
    let latents = autoencoder.encode_images_scaled(&images)?;
    let side = autoencoder.latent_side();

    let mut trainable: HashSet<u64> = condition.param_uids().into_iter().collect();
    if cfg.train_encoder {
        trainable.extend(encoder.param_uids());
    }
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.steps);
    let n = voxels.len();
    let mut step = 0usize;
    'outer: for epoch in 0.. {
        let batches = batch_indices(n, cfg.batch_size, derive_seed(seed, 31, epoch), false);
        for batch in &batches {
            if step >= cfg.steps {
                break 'outer;
            }
            let mut z0 = Arr::zeros(IxDyn(&[batch.len(), LATENT_CHANNELS, side, side]));
            let mut vox = Vec::with_capacity(batch.len());
            for (row, &i) in batch.iter().enumerate() {
                z0.index_axis_mut(Axis(0), row).assign(&latents.index_axis(Axis(0), i));
                vox.push(voxels[i].clone());
            }
            let g = Graph::new(GradMode::Only(trainable.clone()));
            let feature = encoder.embed_for_condition(&g, &vox)?;
            let cond = condition.make_condition(&g, &feature, &bank)?;
            // Diffusion objective with the fMRI-derived double conditioning.
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 32, step as u64));
            let timesteps: Vec<usize> = (0..batch.len())
                .map(|_| (rand::Rng::random::<u64>(&mut rng) % schedule.t_steps as u64) as usize)
                .collect();
            let eps = randn(&mut rng, z0.shape(), 1.0);
            let mut z_t = Arr::zeros(IxDyn(z0.shape()));
            for i in 0..batch.len() {
                let zi = forward_diffuse(
                    &z0.index_axis(Axis(0), i).to_owned().into_dyn(),
                    timesteps[i],
                    &eps.index_axis(Axis(0), i).to_owned().into_dyn(),
                    schedule,
                )?;
                z_t.index_axis_mut(Axis(0), i).assign(&zi);
            }
            let pred = unet.forward(&g, &g.constant(z_t), &timesteps, &cond.context, Some(&cond.time_add), None)?;
            let loss = pred.sub(&g.constant(eps)).square().mean_all();
            let v = loss.item();
            if !v.is_finite() {
                return Err(CndError::Diverged(format!("non-finite phase-2 loss at step {step}")));
            }
            let mut grads = g.backward(&loss);
            let mut params = condition.named_params_mut();
            if cfg.train_encoder {
                params.extend(encoder.named_params_mut());
            }
            opt.step(params, &mut grads, cfg.lr);
            history.push(v);
            step += 1;
        }
    }
    Ok(Phase2Output { condition, bank, history })
}

/// Convenience wrapper: serialize a module to a temp file and hash its bytes.
pub fn module_hash(module: &dyn Module) -> Result<u64> {
    let dir = std::env::temp_dir().join(format!("cnd-hash-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("module.ckpt");
    crate::checkpoint::save_module(&path, module)?;
    let h = content_hash(&path)?;
    std::fs::remove_file(&path).ok();
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::UNetConfig;
    use crate::fmri_encoder::EncoderConfig;
    use crate::synth_data::{generate_corpus_with_patch, CorpusSpec};

    fn tiny_unet() -> UNet {
        let cfg = UNetConfig {
            base_channels: 16,
            channel_mults: vec![1],
            attention_levels: vec![0],
            num_res_blocks: 1,
            context_dim: 8,
            time_dim: 16,
            num_heads: 2,
            num_classes: 3,
            latent_side: 4,
        };
        UNet::new(&cfg, 1).unwrap()
    }

    #[test]
    fn bank_copies_and_freezes() {
        let unet = tiny_unet();
        let bank = build_concept_bank(3, 8, &unet).unwrap();
        assert!(bank.is_frozen());
        assert_eq!(bank.rows().shape(), &[3, 8]);
        for c in 0..3 {
            for j in 0..8 {
                assert_eq!(bank.rows()[[c, j]], unet.label_embed.value[[c, j]]);
            }
        }
        let mut b2 = bank.clone();
        assert!(b2.set_row(0, &Array1::zeros(8)).is_err());
        assert!(build_concept_bank(5, 8, &unet).is_err());
        let mut fresh = ConceptBank::new(Array2::zeros((2, 4)));
        fresh.set_row(1, &Array1::ones(4)).unwrap();
        fresh.freeze();
        assert!(fresh.set_row(1, &Array1::zeros(4)).is_err());
    }

    fn scalar_layer() -> ConceptAttentionLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = ConceptAttentionLayer::new(&mut rng, 1, 2, 1);
        layer.wq.value = Arr::from_shape_vec(IxDyn(&[1, 1]), vec![1.0]).unwrap();
        layer.wk.value = Arr::from_shape_vec(IxDyn(&[2, 1]), vec![1.0, 0.0]).unwrap();
        layer.wv.value = Arr::from_shape_vec(IxDyn(&[2, 1]), vec![2.0, 4.0]).unwrap();
        layer
    }

    #[test]
    fn scalar_attention_matches_hand_computation() {
        // q=1, keys (1,0), values (2,4): weights softmax(1,0) = (0.73106,
        // 0.26894), output 2.53788.
        let layer = scalar_layer();
        let g = Graph::new(GradMode::None);
        let x = g.constant(Arr::from_shape_vec(IxDyn(&[1, 1]), vec![1.0]).unwrap());
        let rows = g.constant(
            Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let (out, attn) = layer.attend(&g, &x, &rows);
        assert!((out.value()[[0, 0]] - 2.53788).abs() < 1e-5);
        assert!((attn.value()[[0, 0, 0]] - 0.73106).abs() < 1e-5);
        assert!((attn.value()[[0, 0, 1]] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn single_row_bank_ignores_the_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = ConceptAttentionLayer::new(&mut rng, 4, 6, 2);
        let g = Graph::new(GradMode::None);
        let rows = g.constant(randn(&mut rng, &[1, 6], 1.0));
        let q1 = g.constant(randn(&mut rng, &[1, 4], 1.0));
        let q2 = g.constant(randn(&mut rng, &[1, 4], 1.0));
        let (o1, _) = layer.attend(&g, &q1, &rows);
        let (o2, _) = layer.attend(&g, &q2, &rows);
        // softmax over one key is 1 regardless of the query.
        for (a, b) in o1.value().iter().zip(o2.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // And the output equals W_V applied to the bank row.
        let wv = g.param(&layer.wv);
        let expect = rows.matmul(&wv);
        for (a, b) in o1.value().iter().zip(expect.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_split_weights_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = ConceptAttentionLayer::new(&mut rng, 4, 6, 1);
        let g = Graph::new(GradMode::None);
        let row = randn(&mut rng, &[1, 6], 1.0);
        let mut rows = Arr::zeros(IxDyn(&[2, 6]));
        rows.index_axis_mut(Axis(0), 0).assign(&row.index_axis(Axis(0), 0));
        rows.index_axis_mut(Axis(0), 1).assign(&row.index_axis(Axis(0), 0));
        let q = g.constant(randn(&mut rng, &[1, 4], 1.0));
        let (_, attn) = layer.attend(&g, &q, &g.constant(rows));
        assert_eq!(attn.value()[[0, 0, 0]], attn.value()[[0, 0, 1]]);
        assert!((attn.value()[[0, 0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let cfg = ConceptAttentionConfig { depth: 3, d: 8, num_heads: 2 };
        let module = ConditionModule::new(&cfg, 12, 6, 8, 16, 5).unwrap();
        let mut bank = ConceptBank::new({
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            Array2::from_shape_fn((5, 6), |_| crate::nn::randn_scalar(&mut rng))
        });
        bank.freeze();
        let g = Graph::new(GradMode::None);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feat = g.constant(randn(&mut rng, &[3, 12], 1.0));
        let (_, weights) = module.concept_attend(&g, &feat, &bank).unwrap();
        assert_eq!(weights.len(), 3);
        for w in &weights {
            for row in w.value().rows() {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unfrozen_bank_is_rejected_and_depth_zero_invalid() {
        let cfg = ConceptAttentionConfig { depth: 1, d: 4, num_heads: 1 };
        let module = ConditionModule::new(&cfg, 4, 4, 4, 4, 0).unwrap();
        let bank = ConceptBank::new(Array2::zeros((2, 4)));
        let g = Graph::new(GradMode::None);
        let feat = g.constant(Arr::zeros(IxDyn(&[1, 4])));
        assert!(module.concept_attend(&g, &feat, &bank).is_err());
        let bad = ConceptAttentionConfig { depth: 0, d: 4, num_heads: 1 };
        assert!(ConditionModule::new(&bad, 4, 4, 4, 4, 0).is_err());
        let bad2 = ConceptAttentionConfig { depth: 1, d: 5, num_heads: 2 };
        assert!(ConditionModule::new(&bad2, 4, 4, 4, 4, 0).is_err());
    }

    #[test]
    fn condition_output_contracts() {
        let cfg = ConceptAttentionConfig { depth: 4, d: 8, num_heads: 2 };
        let module = ConditionModule::new(&cfg, 12, 6, 10, 16, 8).unwrap();
        let mut bank = ConceptBank::new({
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            Array2::from_shape_fn((4, 6), |_| crate::nn::randn_scalar(&mut rng))
        });
        bank.freeze();
        let g = Graph::new(GradMode::None);
        // Zero feature stays finite.
        let zero = g.constant(Arr::zeros(IxDyn(&[2, 12])));
        let out = module.make_condition(&g, &zero, &bank).unwrap();
        assert_eq!(out.context.shape(), &[2, 4, 10]);
        assert_eq!(out.time_add.shape(), &[2, 16]);
        assert!(out.context.value().iter().all(|v| v.is_finite()));
        assert!(out.time_add.value().iter().all(|v| v.is_finite()));
        // Different features give different contexts.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f1 = g.constant(randn(&mut rng, &[1, 12], 1.0));
        let f2 = g.constant(randn(&mut rng, &[1, 12], 1.0));
        let c1 = module.make_condition(&g, &f1, &bank).unwrap();
        let c2 = module.make_condition(&g, &f2, &bank).unwrap();
        assert_ne!(c1.context.value(), c2.context.value());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = ConceptAttentionLayer::new(&mut rng, 4, 3, 1);
        let x_arr = randn(&mut rng, &[2, 4], 1.0);
        let rows_arr = randn(&mut rng, &[3, 3], 1.0);
        let run = |l: &ConceptAttentionLayer| {
            let g = Graph::new(GradMode::All);
            let x = g.constant(x_arr.clone());
            let rows = g.constant(rows_arr.clone());
            let (out, _) = l.attend(&g, &x, &rows);
            let loss = out.square().mean_all();
            (g, loss)
        };
        let (g, loss) = run(&layer);
        let grads = g.backward(&loss);
        let eps = 1e-6;
        for (name, p) in [("wq", &layer.wq), ("wk", &layer.wk), ("wv", &layer.wv)] {
            let analytic = grads.get(p).unwrap().clone();
            for i in 0..p.value.len() {
                let perturb = |delta: f64| {
                    let mut l2 = ConceptAttentionLayer {
                        wq: layer.wq.clone(),
                        wk: layer.wk.clone(),
                        wv: layer.wv.clone(),
                        ln: LayerNorm::new(4),
                        heads: 1,
                    };
                    let target = match name {
                        "wq" => &mut l2.wq,
                        "wk" => &mut l2.wk,
                        _ => &mut l2.wv,
                    };
                    target.value.as_slice_mut().unwrap()[i] += delta;
                    let (_, loss) = run(&l2);
                    loss.item()
                };
                let numeric = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[i];
                assert!(
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-4,
                    "{name}[{i}]: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn phase2_trains_only_the_condition_module() {
        let spec = CorpusSpec {
            num_classes: 3,
            samples_per_class_train: 4,
            samples_per_class_test: 0,
            voxel_count: 32,
            image_size: 16,
            noise_std: 0.2,
            seed: 12,
            disjoint_test_classes: false,
        };
        let corpus = generate_corpus_with_patch(&spec, 8).unwrap();
        let enc_cfg = EncoderConfig {
            patch_size: 8,
            embed_dim: 16,
            encoder_layers: 2,
            decoder_layers: 1,
            num_heads: 2,
            mask_ratio: 0.5,
            sparsify_frac: 0.2,
            normalize_embeddings: true,
        };
        let mut encoder = FmriMae::new(&enc_cfg, 13).unwrap();
        let unet_cfg = UNetConfig {
            base_channels: 16,
            channel_mults: vec![1],
            attention_levels: vec![0],
            num_res_blocks: 1,
            context_dim: 8,
            time_dim: 16,
            num_heads: 2,
            num_classes: 3,
            latent_side: 4,
        };
        let unet = UNet::new(&unet_cfg, 14).unwrap();
        let schedule = crate::diffusion::make_schedule(16, 0.01, 0.2).unwrap();
        let ae = ImageAutoencoder::new(16, 15).unwrap();
        let cfg = Phase2Config {
            steps: 12,
            batch_size: 4,
            lr: 1e-3,
            attention: ConceptAttentionConfig { depth: 2, d: 8, num_heads: 2 },
            ..Default::default()
        };
        let unet_before = module_hash(&unet).unwrap();
        let enc_before = module_hash(&encoder).unwrap();
        let out = finetune_phase2(&corpus, &mut encoder, &unet, &schedule, &ae, &cfg, 16).unwrap();
        assert_eq!(module_hash(&unet).unwrap(), unet_before);
        assert_eq!(module_hash(&encoder).unwrap(), enc_before);
        assert_eq!(out.bank.hash(), build_concept_bank(3, 8, &unet).unwrap().hash());
        assert_eq!(out.history.len(), 12);
        assert!(out.history.iter().all(|v| v.is_finite()));
        // Determinism.
        let mut encoder2 = FmriMae::new(&enc_cfg, 13).unwrap();
        let out2 = finetune_phase2(&corpus, &mut encoder2, &unet, &schedule, &ae, &cfg, 16).unwrap();
        assert_eq!(out.history, out2.history);
        assert_eq!(module_hash(&out.condition).unwrap(), module_hash(&out2.condition).unwrap());
    }
}
