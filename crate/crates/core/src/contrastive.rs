//! Double contrastive objective and the Phase-1 pretraining loop.
//!
//! Cross-contrastive: decoder outputs of two independent maskings of the same
//! sample form the positive pair; negatives are the other samples' first-view
//! outputs. Self-contrastive: a decoder output is contrasted with the
//! embedding of its unmasked original; negatives are other decoder outputs.

use crate::error::{CndError, Result};
use crate::fmri_encoder::{patchify, random_mask, random_sparsify, EncoderConfig, FmriMae};
use crate::nn::{warmup_cosine_lr, AdamW, Module};
use crate::synth_data::{batch_indices, Corpus};
use crate::tensor::{Arr, GradMode, Graph, Tensor};
use ndarray::{Array1, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Temperature of Eqs. 1/3/4.
    pub tau: f64,
    /// Cross-contrastive weight.
    pub alpha_c: f64,
    /// Self-contrastive weight.
    pub alpha_s: f64,
    /// Apply the self loss to both masked views instead of the first only.
    pub duplicate_self_contrast: bool,
    /// Also contrast dm2 anchors against dm2 negatives in the cross loss.
    pub symmetric_cross: bool,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            alpha_c: 0.5,
            alpha_s: 1.0,
            duplicate_self_contrast: false,
            symmetric_cross: false,
            epochs: 15,
            warmup_epochs: 2,
            max_lr: 2.5e-4,
            weight_decay: 0.05,
            batch_size: 32,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(CndError::Config("tau must be positive".into()));
        }
        if self.alpha_c < 0.0 || self.alpha_s < 0.0 {
            return Err(CndError::Config("loss weights must be non-negative".into()));
        }
        if self.alpha_c == 0.0 && self.alpha_s == 0.0 {
            return Err(CndError::Config("at least one loss weight must be non-zero".into()));
        }
        if self.batch_size == 0 {
            return Err(CndError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch loss summary; `total = alpha_c * cross + alpha_s * self`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub cross: f64,
    pub self_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn consistent(&self, alpha_c: f64, alpha_s: f64) -> bool {
        let expect = alpha_c * self.cross + alpha_s * self.self_loss;
        (self.total - expect).abs() <= 1e-6 * expect.abs().max(1.0)
    }
}

/// InfoNCE on the tape: -log(exp(a.p/tau) / (exp(a.p/tau) + sum exp(a.n/tau))).
/// An empty negative set gives exactly zero.
pub fn info_nce_t(anchor: &Tensor, positive: &Tensor, negatives: &[Tensor], tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(CndError::Config("tau must be positive".into()));
    }
    let d = anchor.shape().to_vec();
    if positive.shape() != d.as_slice() || negatives.iter().any(|n| n.shape() != d.as_slice()) {
        return Err(CndError::Shape("info_nce vectors must share one dimension".into()));
    }
    let g = anchor.graph().clone();
    if negatives.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let pos_logit = anchor.mul(positive).sum_all().scale(1.0 / tau).reshape(&[1]);
    let mut logits = vec![pos_logit.clone()];
    for neg in negatives {
        logits.push(anchor.mul(neg).sum_all().scale(1.0 / tau).reshape(&[1]));
    }
    let row = Tensor::concat(&logits, 0);
    let lse = row.logsumexp_lastaxis(false);
    Ok(lse.sub(&pos_logit.reshape(&[])))
}

/// Plain-number InfoNCE for oracles and spot checks.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    let g = Graph::new(GradMode::None);
    let to_t = |v: &[f64]| g.constant(Arr::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap());
    let a = to_t(anchor);
    let p = to_t(positive);
    let negs: Vec<Tensor> = negatives.iter().map(|v| to_t(v)).collect();
    Ok(info_nce_t(&a, &p, &negs, tau)?.item())
}

/// Shared batch InfoNCE: positives are rowwise dot(anchors, positives);
/// negatives for row i are dot(anchors_i, negatives_k) for k != i.
fn batch_nce(anchors: &Tensor, positives: &Tensor, negatives: &Tensor, tau: f64) -> Result<Tensor> {
    let shape = anchors.shape().to_vec();
    if shape.len() != 2 || positives.shape() != shape.as_slice() || negatives.shape() != shape.as_slice() {
        return Err(CndError::Shape("batch losses expect matching N x D matrices".into()));
    }
    let n = shape[0];
    if n < 1 {
        return Err(CndError::Config("batch must contain at least one sample".into()));
    }
    let g = anchors.graph().clone();
    if n == 1 {
        return Ok(g.scalar(0.0)); // no negatives
    }
    let pos = anchors.mul(positives).sum_axis(1, true).scale(1.0 / tau); // [N,1]
    let sims = anchors.matmul(&negatives.permute(&[1, 0])).scale(1.0 / tau); // [N,N]
    // Remove self-pairs from the negative set.
    let mut diag_mask = Arr::zeros(IxDyn(&[n, n]));
    for i in 0..n {
        diag_mask[[i, i]] = -1e30;
    }
    let masked = sims.add(&g.constant(diag_mask));
    let rows = Tensor::concat(&[pos.clone(), masked], 1); // [N, N+1]
    let lse = rows.logsumexp_lastaxis(true); // [N,1]
    Ok(lse.sub(&pos).mean_all())
}

/// Eq. 3: anchors dm1, positives dm2, negatives from the dm1 view.
pub fn cross_contrastive_loss_t(dm1: &Tensor, dm2: &Tensor, tau: f64) -> Result<Tensor> {
    batch_nce(dm1, dm2, dm1, tau)
}

/// Eq. 4: anchors are decoder outputs, positives the embeddings of the
/// unmasked originals, negatives the other decoder outputs.
pub fn self_contrastive_loss_t(dm: &Tensor, originals: &Tensor, tau: f64) -> Result<Tensor> {
    batch_nce(dm, originals, dm, tau)
}

pub fn cross_contrastive_loss(dm1: &ndarray::Array2<f64>, dm2: &ndarray::Array2<f64>, tau: f64) -> Result<f64> {
    let g = Graph::new(GradMode::None);
    let a = g.constant(dm1.clone().into_dyn());
    let b = g.constant(dm2.clone().into_dyn());
    Ok(cross_contrastive_loss_t(&a, &b, tau)?.item())
}

pub fn self_contrastive_loss(dm: &ndarray::Array2<f64>, originals: &ndarray::Array2<f64>, tau: f64) -> Result<f64> {
    let g = Graph::new(GradMode::None);
    let a = g.constant(dm.clone().into_dyn());
    let b = g.constant(originals.clone().into_dyn());
    Ok(self_contrastive_loss_t(&a, &b, tau)?.item())
}

/// Eq. 5 on the tape. With duplicate self-contrasting the self term is the
/// mean over both masked views; otherwise only the first view enters.
pub fn combined_loss_t(
    l_cross: &Tensor,
    l_self_1: &Tensor,
    l_self_2: Option<&Tensor>,
    cfg: &ContrastiveConfig,
) -> (Tensor, f64, f64) {
    let l_self = match (cfg.duplicate_self_contrast, l_self_2) {
        (true, Some(s2)) => l_self_1.add(s2).scale(0.5),
        _ => l_self_1.clone(),
    };
    let total = l_cross.scale(cfg.alpha_c).add(&l_self.scale(cfg.alpha_s));
    (total, l_cross.item(), l_self.item())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed derivation.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_mul(0x9E3779B97F4A7C15) ^ index))
}

pub struct PretrainOutput {
    pub model: FmriMae,
    pub history: Vec<LossReport>,
}

/// Phase-1 training: sparsify, mask twice, encode/decode both views plus the
/// unmasked original, optimize Eq. 5 with AdamW under warmup/cosine decay.
pub fn pretrain(
    corpus: &Corpus,
    encoder_config: &EncoderConfig,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    encoder_config.validate()?;
    if corpus.train.is_empty() {
        return Err(CndError::Config("corpus has no training samples".into()));
    }
    let mut model = FmriMae::new(encoder_config, derive_seed(seed, 0, 0))?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let voxels: Vec<Array1<f64>> = corpus
        .train
        .iter()
        .map(|(s, _)| Array1::from_iter(s.voxels.iter().map(|&v| v as f64)))
        .collect();
    let steps_per_epoch = batch_indices(voxels.len(), cfg.batch_size, 0, false).len();
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = batch_indices(voxels.len(), cfg.batch_size, derive_seed(seed, 1, epoch as u64), false);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut counted = 0usize;
        for batch in &batches {
            if batch.len() < 2 {
                step += 1;
                continue; // no negatives available
            }
            let mut views1 = Vec::with_capacity(batch.len());
            let mut views2 = Vec::with_capacity(batch.len());
            let mut views_full = Vec::with_capacity(batch.len());
            for (bi, &idx) in batch.iter().enumerate() {
                let s = derive_seed(seed, 2, (step * 100_000 + bi) as u64);
                let sparse = random_sparsify(&voxels[idx], encoder_config.sparsify_frac, s)?;
                let patches = patchify(&sparse, encoder_config.patch_size)?;
                views1.push(random_mask(&patches, encoder_config.mask_ratio, derive_seed(s, 3, 0))?);
                views2.push(random_mask(&patches, encoder_config.mask_ratio, derive_seed(s, 3, 1))?);
                let full = patchify(&voxels[idx], encoder_config.patch_size)?;
                let p = full.nrows();
                views_full.push(crate::fmri_encoder::MaskedPatchView {
                    patches: full,
                    mask: vec![false; p],
                    mask_seed: 0,
                });
            }
            let g = Graph::new(GradMode::All);
            let enc1 = model.encode_batch(&g, &views1)?;
            let dm1 = model.decode_batch(&g, &enc1, &views1)?;
            let enc2 = model.encode_batch(&g, &views2)?;
            let dm2 = model.decode_batch(&g, &enc2, &views2)?;
            let enc_full = model.encode_batch(&g, &views_full)?;
            let orig = model.decode_batch(&g, &enc_full, &views_full)?;

            let mut l_cross = cross_contrastive_loss_t(&dm1, &dm2, cfg.tau)?;
            if cfg.symmetric_cross {
                let reverse = cross_contrastive_loss_t(&dm2, &dm1, cfg.tau)?;
                l_cross = l_cross.add(&reverse).scale(0.5);
            }
            let l_self_1 = self_contrastive_loss_t(&dm1, &orig, cfg.tau)?;
            let l_self_2 = if cfg.duplicate_self_contrast {
                Some(self_contrastive_loss_t(&dm2, &orig, cfg.tau)?)
            } else {
                None
            };
            let (total, cross_v, self_v) = combined_loss_t(&l_cross, &l_self_1, l_self_2.as_ref(), cfg);
            let total_v = total.item();
            if !total_v.is_finite() {
                return Err(CndError::Diverged(format!(
                    "non-finite loss {total_v} at epoch {epoch}, step {step}"
                )));
            }
            let mut grads = g.backward(&total);
            let lr = warmup_cosine_lr(step, total_steps, warmup_steps, cfg.max_lr);
            opt.step(model.named_params_mut(), &mut grads, lr);
            sums.0 += cross_v;
            sums.1 += self_v;
            sums.2 += total_v;
            counted += 1;
            step += 1;
        }
        let denom = counted.max(1) as f64;
        history.push(LossReport {
            epoch,
            cross: sums.0 / denom,
            self_loss: sums.1 / denom,
            total: sums.2 / denom,
        });
    }
    Ok(PretrainOutput { model, history })
}
