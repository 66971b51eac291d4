//! Masked transformer autoencoder over 1D voxel vectors: patchification,
//! seeded random masking and random-sparsification augmentation, an
//! asymmetric encoder/decoder, and the pooled embeddings used by both the
//! contrastive phase and diffusion conditioning.

use crate::error::{CndError, Result};
use crate::nn::{
    randn, sinusoidal_positions, zeros, LayerNorm, Linear, Module, TransformerBlock,
};
use crate::tensor::{Arr, Graph, Param, Tensor};
use ndarray::{Array1, Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_PATCH_SIZE: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub mask_ratio: f64,
    pub sparsify_frac: f64,
    /// L2-normalize pooled decoder outputs before contrastive dot products.
    #[serde(default = "default_true")]
    pub normalize_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            embed_dim: 128,
            encoder_layers: 6,
            decoder_layers: 2,
            num_heads: 4,
            mask_ratio: 0.75,
            sparsify_frac: 0.2,
            normalize_embeddings: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(CndError::Config("embed_dim must divide num_heads".into()));
        }
        if self.decoder_layers >= self.encoder_layers {
            return Err(CndError::Config(
                "decoder must be smaller than encoder (asymmetric design)".into(),
            ));
        }
        if self.decoder_layers == 0 {
            return Err(CndError::Config("decoder_layers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(CndError::Config("mask_ratio must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.sparsify_frac) {
            return Err(CndError::Config("sparsify_frac must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// A patchified voxel vector plus its boolean mask (true = masked).
#[derive(Debug, Clone)]
pub struct MaskedPatchView {
    pub patches: Array2<f64>,
    pub mask: Vec<bool>,
    pub mask_seed: u64,
}

impl MaskedPatchView {
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Splits `voxels` into consecutive patches; concatenation of the rows
/// reproduces the input exactly.
pub fn patchify(voxels: &Array1<f64>, patch_size: usize) -> Result<Array2<f64>> {
    if patch_size == 0 || voxels.len() % patch_size != 0 {
        return Err(CndError::Shape(format!(
            "voxel length {} is not a multiple of patch size {}",
            voxels.len(),
            patch_size
        )));
    }
    let p = voxels.len() / patch_size;
    Ok(Array2::from_shape_vec((p, patch_size), voxels.to_vec()).unwrap())
}

/// Masks exactly round(ratio * P) patches chosen uniformly without
/// replacement by `seed`.
pub fn random_mask(patches: &Array2<f64>, mask_ratio: f64, seed: u64) -> Result<MaskedPatchView> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(CndError::Config("mask_ratio must be in [0,1)".into()));
    }
    let p = patches.nrows();
    let k = (mask_ratio * p as f64).round() as usize;
    let mut order: Vec<usize> = (0..p).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..p).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut mask = vec![false; p];
    for &idx in order.iter().take(k) {
        mask[idx] = true;
    }
    Ok(MaskedPatchView {
        patches: patches.clone(),
        mask,
        mask_seed: seed,
    })
}

/// Sets exactly round(frac * V) seeded positions to zero.
pub fn random_sparsify(voxels: &Array1<f64>, frac: f64, seed: u64) -> Result<Array1<f64>> {
    if !(0.0..1.0).contains(&frac) {
        return Err(CndError::Config("sparsify fraction must be in [0,1)".into()));
    }
    let v = voxels.len();
    let k = (frac * v as f64).round() as usize;
    let mut order: Vec<usize> = (0..v).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..v).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut out = voxels.clone();
    for &idx in order.iter().take(k) {
        out[idx] = 0.0;
    }
    Ok(out)
}

/// Encoder outputs: full token sequence (summary token first) and the pooled
/// summary-token vector.
pub struct EncodedFmri {
    /// [B, visible+1, D]
    pub tokens: Tensor,
    /// [B, D]
    pub pooled: Tensor,
}

/// Asymmetric masked autoencoder for fMRI patch sequences.
pub struct FmriMae {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub summary_token: Param,
    pub mask_token: Param,
    pub enc_blocks: Vec<TransformerBlock>,
    pub enc_norm: LayerNorm,
    pub dec_blocks: Vec<TransformerBlock>,
    pub dec_norm: LayerNorm,
    pub proj: Linear,
}

impl FmriMae {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        Ok(FmriMae {
            config: config.clone(),
            patch_embed: Linear::new(&mut rng, config.patch_size, d),
            summary_token: Param::new(randn(&mut rng, &[1, d], 0.02)),
            mask_token: Param::new(randn(&mut rng, &[1, d], 0.02)),
            enc_blocks: (0..config.encoder_layers)
                .map(|_| TransformerBlock::new(&mut rng, d, config.num_heads))
                .collect(),
            enc_norm: LayerNorm::new(d),
            dec_blocks: (0..config.decoder_layers)
                .map(|_| TransformerBlock::new(&mut rng, d, config.num_heads))
                .collect(),
            dec_norm: LayerNorm::new(d),
            proj: Linear::new(&mut rng, d, d),
        })
    }

    /// Patch-embeds a batch of views and gathers visible rows only:
    /// [B, visible, D] with positional encodings applied.
    fn embed_visible(&self, g: &Graph, views: &[MaskedPatchView]) -> Result<Tensor> {
        let b = views.len();
        let p = views[0].mask.len();
        let visible = views[0].visible_indices().len();
        if visible == 0 {
            return Err(CndError::Config("all patches masked; nothing to encode".into()));
        }
        for v in views {
            if v.mask.len() != p || v.visible_indices().len() != visible {
                return Err(CndError::Shape("inconsistent view shapes in batch".into()));
            }
        }
        let d = self.config.embed_dim;
        let mut raw = Arr::zeros(IxDyn(&[b, p, self.config.patch_size]));
        for (i, v) in views.iter().enumerate() {
            raw.index_axis_mut(ndarray::Axis(0), i)
                .assign(&v.patches.view().into_dyn());
        }
        let x = g.constant(raw);
        let emb = self.patch_embed.forward(g, &x); // [B, P, D]
        let pos = g.constant(sinusoidal_positions(p, d));
        let emb = emb.add(&pos);
        let mut rows = Vec::with_capacity(b);
        for (i, v) in views.iter().enumerate() {
            let sample = emb.narrow(0, i, 1).reshape(&[p, d]);
            rows.push(sample.index_select(&v.visible_indices()).reshape(&[1, visible, d]));
        }
        Ok(Tensor::concat(&rows, 0))
    }

    fn prepend_summary(&self, g: &Graph, tokens: &Tensor) -> Tensor {
        let b = tokens.shape()[0];
        let d = self.config.embed_dim;
        let summary = g
            .param(&self.summary_token)
            .reshape(&[1, 1, d])
            .add(&g.constant(zeros(&[b, 1, d])));
        Tensor::concat(&[summary, tokens.clone()], 1)
    }

    /// Runs the encoder over visible patches only. Output token count is
    /// visible count + 1 (summary token first).
    pub fn encode_batch(&self, g: &Graph, views: &[MaskedPatchView]) -> Result<EncodedFmri> {
        let tokens = self.embed_visible(g, views)?;
        let mut x = self.prepend_summary(g, &tokens);
        for block in &self.enc_blocks {
            x = block.forward(g, &x);
        }
        let x = self.enc_norm.forward(g, &x);
        let b = x.shape()[0];
        let d = self.config.embed_dim;
        let pooled = x.narrow(1, 0, 1).reshape(&[b, d]);
        Ok(EncodedFmri { tokens: x, pooled })
    }

    pub fn encode(&self, g: &Graph, view: &MaskedPatchView) -> Result<EncodedFmri> {
        self.encode_batch(g, std::slice::from_ref(view))
    }

    /// Rebuilds the full-length sequence with learned mask tokens at masked
    /// positions, runs the decoder, pools the summary token, projects and
    /// (by default) L2-normalizes: the contrastive representation.
    pub fn decode_batch(
        &self,
        g: &Graph,
        encoded: &EncodedFmri,
        views: &[MaskedPatchView],
    ) -> Result<Tensor> {
        let b = views.len();
        let p = views[0].mask.len();
        let d = self.config.embed_dim;
        let visible = views[0].visible_indices().len();
        if encoded.tokens.shape() != [b, visible + 1, d] {
            return Err(CndError::Shape(format!(
                "encoded tokens {:?} inconsistent with mask (expect {:?})",
                encoded.tokens.shape(),
                [b, visible + 1, d]
            )));
        }
        let pos = g.constant(sinusoidal_positions(p, d));
        let mask_tok = g.param(&self.mask_token); // [1, D]
        let mut sequences = Vec::with_capacity(b);
        for (i, v) in views.iter().enumerate() {
            let vis = encoded.tokens.narrow(0, i, 1).reshape(&[visible + 1, d]);
            let summary = vis.narrow(0, 0, 1);
            let vis_tokens = vis.narrow(0, 1, visible);
            let masked = v.masked_count();
            // Row source: visible tokens first, then repeated mask tokens.
            let pool = if masked > 0 {
                let fills = mask_tok.index_select(&vec![0usize; masked]);
                Tensor::concat(&[vis_tokens, fills], 0)
            } else {
                vis_tokens
            };
            // Scatter rows back to their original patch positions.
            let mut src_of_pos = vec![0usize; p];
            let (mut vi, mut mi) = (0usize, visible);
            for (pos_idx, &is_masked) in v.mask.iter().enumerate() {
                if is_masked {
                    src_of_pos[pos_idx] = mi;
                    mi += 1;
                } else {
                    src_of_pos[pos_idx] = vi;
                    vi += 1;
                }
            }
            let seq = pool.index_select(&src_of_pos).add(&pos);
            sequences.push(Tensor::concat(&[summary, seq], 0).reshape(&[1, p + 1, d]));
        }
        let mut x = Tensor::concat(&sequences, 0);
        for block in &self.dec_blocks {
            x = block.forward(g, &x);
        }
        let x = self.dec_norm.forward(g, &x);
        let pooled = x.narrow(1, 0, 1).reshape(&[b, d]);
        let projected = self.proj.forward(g, &pooled);
        Ok(if self.config.normalize_embeddings {
            projected.l2_normalize(1e-12)
        } else {
            projected
        })
    }

    /// Full (unmasked) encode for Phase-2 conditioning: pooled vector per row
    /// of a [B, voxel_count] batch.
    pub fn embed_for_condition(&self, g: &Graph, voxels: &[Array1<f64>]) -> Result<Tensor> {
        let views: Vec<MaskedPatchView> = voxels
            .iter()
            .map(|v| {
                let patches = patchify(v, self.config.patch_size)?;
                let p = patches.nrows();
                Ok(MaskedPatchView {
                    patches,
                    mask: vec![false; p],
                    mask_seed: 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(self.encode_batch(g, &views)?.pooled)
    }
}

impl Module for FmriMae {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.patch_embed.collect(&p("patch_embed"), out);
        out.push((p("summary_token"), &self.summary_token));
        out.push((p("mask_token"), &self.mask_token));
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.collect(&p(&format!("enc.{i}")), out);
        }
        self.enc_norm.collect(&p("enc_norm"), out);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.collect(&p(&format!("dec.{i}")), out);
        }
        self.dec_norm.collect(&p("dec_norm"), out);
        self.proj.collect(&p("proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.patch_embed.collect_mut(&p("patch_embed"), out);
        out.push((p("summary_token"), &mut self.summary_token));
        out.push((p("mask_token"), &mut self.mask_token));
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.collect_mut(&p(&format!("enc.{i}")), out);
        }
        self.enc_norm.collect_mut(&p("enc_norm"), out);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.collect_mut(&p(&format!("dec.{i}")), out);
        }
        self.dec_norm.collect_mut(&p("dec_norm"), out);
        self.proj.collect_mut(&p("proj"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            patch_size: 4,
            embed_dim: 16,
            encoder_layers: 2,
            decoder_layers: 1,
            num_heads: 2,
            mask_ratio: 0.5,
            sparsify_frac: 0.2,
            normalize_embeddings: true,
        }
    }

    fn ramp(n: usize) -> Array1<f64> {
        Array1::from_iter((0..n).map(|i| i as f64 * 0.1))
    }

    #[test]
    fn patchify_divides_and_flattens_back() {
        let v = ramp(1024);
        let p = patchify(&v, 16).unwrap();
        assert_eq!(p.dim(), (64, 16));
        let flat: Vec<f64> = p.iter().cloned().collect();
        assert_eq!(flat, v.to_vec());
        assert!(patchify(&ramp(1000), 16).is_err());
    }

    #[test]
    fn mask_count_is_exact_across_ratio_grid() {
        let patches = patchify(&ramp(256), 4).unwrap(); // P = 64
        for &ratio in &[0.0, 0.25, 0.5, 0.75] {
            for seed in 0..50u64 {
                let view = random_mask(&patches, ratio, seed).unwrap();
                assert_eq!(view.masked_count(), (ratio * 64.0).round() as usize);
            }
        }
    }

    #[test]
    fn different_seeds_produce_different_masks() {
        let patches = patchify(&ramp(1024), 16).unwrap(); // P = 64
        let mut distinct = 0;
        let total = 1000;
        for seed in 0..total {
            let a = random_mask(&patches, 0.75, 2 * seed).unwrap();
            let b = random_mask(&patches, 0.75, 2 * seed + 1).unwrap();
            if a.mask != b.mask {
                distinct += 1;
            }
        }
        // Collision probability is 1/C(64,48); all pairs should differ.
        assert!(distinct >= total - 1, "only {distinct}/{total} mask pairs differed");
    }

    #[test]
    fn sparsify_zeroes_exact_count() {
        let v = Array1::from_elem(10, 1.0);
        let out = random_sparsify(&v, 0.2, 3).unwrap();
        assert_eq!(out.iter().filter(|&&x| x == 0.0).count(), 2);
        let v = Array1::from_elem(1024, 1.0);
        let out = random_sparsify(&v, 0.2, 3).unwrap();
        let changed = out.iter().zip(v.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 205); // round(0.2 * 1024)
        let id = random_sparsify(&v, 0.0, 3).unwrap();
        assert_eq!(id, v);
    }

    #[test]
    fn encode_output_shapes_and_determinism() {
        let cfg = tiny_config();
        let mae = FmriMae::new(&cfg, 0).unwrap();
        let patches = patchify(&ramp(64), 4).unwrap(); // P = 16
        let view = random_mask(&patches, 0.5, 1).unwrap();
        let g = Graph::inference();
        let enc = mae.encode(&g, &view).unwrap();
        assert_eq!(enc.tokens.shape(), &[1, 9, 16]); // 8 visible + summary
        let g2 = Graph::inference();
        let enc2 = mae.encode(&g2, &view).unwrap();
        assert_eq!(enc.tokens.value(), enc2.tokens.value());
    }

    #[test]
    fn encoder_is_bit_invariant_to_masked_patch_content() {
        let cfg = tiny_config();
        let mae = FmriMae::new(&cfg, 0).unwrap();
        let patches = patchify(&ramp(64), 4).unwrap();
        let view = random_mask(&patches, 0.5, 1).unwrap();
        let mut altered = view.clone();
        for (i, &masked) in view.mask.iter().enumerate() {
            if masked {
                altered.patches.row_mut(i).fill(999.0);
            }
        }
        let g = Graph::inference();
        let a = mae.encode(&g, &view).unwrap();
        let g2 = Graph::inference();
        let b = mae.encode(&g2, &altered).unwrap();
        assert_eq!(a.tokens.value(), b.tokens.value());
    }

    #[test]
    fn permuting_visible_patches_changes_encoding() {
        let cfg = tiny_config();
        let mae = FmriMae::new(&cfg, 0).unwrap();
        let patches = patchify(&ramp(64), 4).unwrap();
        let view = random_mask(&patches, 0.5, 1).unwrap();
        let vis = view.visible_indices();
        let mut swapped = view.clone();
        let row_a = swapped.patches.row(vis[0]).to_owned();
        let row_b = swapped.patches.row(vis[1]).to_owned();
        swapped.patches.row_mut(vis[0]).assign(&row_b);
        swapped.patches.row_mut(vis[1]).assign(&row_a);
        let g = Graph::inference();
        let a = mae.encode(&g, &view).unwrap();
        let g2 = Graph::inference();
        let b = mae.encode(&g2, &swapped).unwrap();
        assert_ne!(a.pooled.value(), b.pooled.value());
    }

    #[test]
    fn decode_is_unit_norm_and_mask_sensitive() {
        let cfg = tiny_config();
        let mae = FmriMae::new(&cfg, 0).unwrap();
        let patches = patchify(&ramp(64), 4).unwrap();
        let v1 = random_mask(&patches, 0.5, 1).unwrap();
        let v2 = random_mask(&patches, 0.5, 2).unwrap();
        assert_ne!(v1.mask, v2.mask);
        let g = Graph::inference();
        let e1 = mae.encode(&g, &v1).unwrap();
        let d1 = mae.decode_batch(&g, &e1, std::slice::from_ref(&v1)).unwrap();
        let norm: f64 = d1.value().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let e2 = mae.encode(&g, &v2).unwrap();
        let d2 = mae.decode_batch(&g, &e2, std::slice::from_ref(&v2)).unwrap();
        assert_ne!(d1.value(), d2.value());
    }

    #[test]
    fn embed_for_condition_shapes_and_degenerate_input() {
        let cfg = tiny_config();
        let mae = FmriMae::new(&cfg, 0).unwrap();
        let g = Graph::inference();
        let pooled = mae
            .embed_for_condition(&g, &[Array1::zeros(64), ramp(64)])
            .unwrap();
        assert_eq!(pooled.shape(), &[2, 16]);
        assert!(pooled.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn asymmetry_is_enforced() {
        let mut cfg = tiny_config();
        cfg.decoder_layers = 2;
        cfg.encoder_layers = 2;
        assert!(FmriMae::new(&cfg, 0).is_err());
    }
}
