//! Semantic evaluation: a small convolutional classifier over corpus images
//! and the N-trial, n-way top-1 protocol. Per trial, the candidate set is the
//! ground-truth image's predicted class plus n-1 distractor classes sampled
//! without replacement; the trial succeeds when the generated image's highest
//! probability inside the candidate set falls on the ground-truth class.

use crate::diffusion::images_to_nchw;
use crate::error::{CndError, Result};
use crate::nn::{warmup_cosine_lr, AdamW, Conv2d, Linear, Module};
use crate::synth_data::{batch_indices, Corpus};
use crate::tensor::{Arr, GradMode, Graph, Param, Tensor};
use ndarray::{Array2, Array3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Small convolutional classifier used as the semantic-correctness judge.
pub struct ToyClassifier {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
    pub num_classes: usize,
    pub image_size: usize,
}

impl ToyClassifier {
    pub fn new(image_size: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(CndError::Config("classifier needs at least 2 classes".into()));
        }
        if image_size % 4 != 0 {
            return Err(CndError::Config("image size must be a multiple of 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ToyClassifier {
            conv1: Conv2d::new(&mut rng, 3, 16, 3, 2, 1),
            conv2: Conv2d::new(&mut rng, 16, 32, 3, 2, 1),
            head: Linear::new(&mut rng, (image_size / 4) * (image_size / 4) * 32, num_classes),
            num_classes,
            image_size,
        })
    }

    fn logits(&self, g: &Graph, images: &Tensor) -> Tensor {
        let h = self.conv1.forward(g, images).silu();
        let h = self.conv2.forward(g, &h).silu();
        let s = h.shape().to_vec();
        self.head.forward(g, &h.reshape(&[s[0], s[1] * s[2] * s[3]]))
    }

    /// Class probability rows (each non-negative, summing to 1).
    pub fn predict_probs(&self, images: &[Array3<f32>]) -> Result<Array2<f64>> {
        for im in images {
            if im.shape() != [self.image_size, self.image_size, 3] {
                return Err(CndError::Shape(format!(
                    "expected {0}x{0}x3 image, got {1:?}",
                    self.image_size,
                    im.shape()
                )));
            }
        }
        let g = Graph::inference();
        let x = g.constant(images_to_nchw(images));
        let probs = self.logits(&g, &x).softmax();
        Ok(probs
            .value()
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| CndError::Shape(e.to_string()))?)
    }

    pub fn predict_class(&self, image: &Array3<f32>) -> Result<usize> {
        let probs = self.predict_probs(std::slice::from_ref(image))?;
        Ok(argmax(probs.row(0).as_slice().unwrap()))
    }
}

impl Module for ToyClassifier {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        let j = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.conv1.collect(&j("conv1"), out);
        self.conv2.collect(&j("conv2"), out);
        self.head.collect(&j("head"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        let j = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.conv1.collect_mut(&j("conv1"), out);
        self.conv2.collect_mut(&j("conv2"), out);
        self.head.collect_mut(&j("head"), out);
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig { epochs: 30, batch_size: 16, max_lr: 2e-3, weight_decay: 0.01 }
    }
}

/// Trains the classifier on the corpus train split with cross-entropy.
pub fn train_toy_classifier(
    corpus: &Corpus,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<ToyClassifier> {
    if corpus.spec.num_classes < 2 {
        return Err(CndError::Config("corpus must have at least 2 classes".into()));
    }
    if corpus.train.is_empty() {
        return Err(CndError::Config("corpus has no training samples".into()));
    }
    let images: Vec<Array3<f32>> = corpus.train.iter().map(|(_, im)| im.pixels.clone()).collect();
    let labels: Vec<usize> = corpus.train.iter().map(|(s, _)| s.concept_label).collect();
    let size = images[0].shape()[0];
    let mut clf = ToyClassifier::new(size, corpus.spec.num_classes, crate::contrastive::derive_seed(seed, 40, 0))?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let steps_per_epoch = batch_indices(images.len(), cfg.batch_size, 0, false).len();
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = batch_indices(
            images.len(),
            cfg.batch_size,
            crate::contrastive::derive_seed(seed, 41, epoch as u64),
            false,
        );
        for batch in &batches {
            let pick: Vec<Array3<f32>> = batch.iter().map(|&i| images[i].clone()).collect();
            let mut onehot = Arr::zeros(IxDyn(&[batch.len(), corpus.spec.num_classes]));
            for (row, &i) in batch.iter().enumerate() {
                onehot[[row, labels[i]]] = 1.0;
            }
            let g = Graph::new(GradMode::All);
            let logits = clf.logits(&g, &g.constant(images_to_nchw(&pick)));
            let lse = logits.logsumexp_lastaxis(true);
            let picked = logits.mul(&g.constant(onehot)).sum_axis(1, true);
            let loss = lse.sub(&picked).mean_all();
            let v = loss.item();
            if !v.is_finite() {
                return Err(CndError::Diverged(format!("classifier loss {v} at step {step}")));
            }
            let mut grads = g.backward(&loss);
            let lr = warmup_cosine_lr(step, total, total / 20, cfg.max_lr);
            opt.step(clf.named_params_mut(), &mut grads, lr);
            step += 1;
        }
    }
    Ok(clf)
}

/// Fraction of (image, label) pairs the classifier gets right.
pub fn classifier_accuracy(clf: &ToyClassifier, pairs: &[(Array3<f32>, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CndError::Input("no samples to score".into()));
    }
    let mut correct = 0usize;
    for (im, label) in pairs {
        if clf.predict_class(im)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Way count n (candidate-set size), at least 2.
    pub n: usize,
    /// Trial count N per image.
    pub trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n: 10, trials: 100, seed: 0 }
    }
}

/// Protocol core on probability rows: per trial, candidates = {y_g} plus n-1
/// distractors sampled without replacement; success when the generated row's
/// argmax inside the candidates is y_g. Returns successes / trials.
pub fn n_way_top1_from_probs(
    gen_probs: &[f64],
    gt_probs: &[f64],
    config: &EvalConfig,
) -> Result<f64> {
    let classes = gt_probs.len();
    if gen_probs.len() != classes {
        return Err(CndError::Shape("probability rows must have equal length".into()));
    }
    if config.n < 2 || config.n > classes {
        return Err(CndError::Config(format!(
            "way count {} must be in [2, {classes}]",
            config.n
        )));
    }
    if config.trials == 0 {
        return Err(CndError::Config("trial count must be positive".into()));
    }
    let y_g = argmax(gt_probs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let others: Vec<usize> = (0..classes).filter(|&c| c != y_g).collect();
    let mut successes = 0usize;
    for _ in 0..config.trials {
        // Partial Fisher-Yates draw of n-1 distractors.
        let mut pool = others.clone();
        for i in 0..(config.n - 1) {
            let j = i + (rand::Rng::random::<u64>(&mut rng) as usize) % (pool.len() - i);
            pool.swap(i, j);
        }
        let mut best = y_g;
        for &c in &pool[..config.n - 1] {
            if gen_probs[c] > gen_probs[best] {
                best = c;
            }
        }
        if best == y_g {
            successes += 1;
        }
    }
    Ok(successes as f64 / config.trials as f64)
}

/// Full protocol on images: classify both, then run the candidate-set trials.
pub fn n_way_top1(
    classifier: &ToyClassifier,
    generated: &Array3<f32>,
    ground_truth: &Array3<f32>,
    config: &EvalConfig,
) -> Result<f64> {
    let gen = classifier.predict_probs(std::slice::from_ref(generated))?;
    let gt = classifier.predict_probs(std::slice::from_ref(ground_truth))?;
    n_way_top1_from_probs(gen.row(0).as_slice().unwrap(), gt.row(0).as_slice().unwrap(), config)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: usize,
    pub n: usize,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WayAccuracy {
    pub n: usize,
    /// Mean rate with y_g = classifier prediction on the ground-truth image.
    pub mean_rate: f64,
    /// Mean rate with y_g = the dataset label (reported for comparison).
    pub mean_rate_label: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<WayAccuracy>,
    pub per_sample: Vec<SampleResult>,
}

impl EvalReport {
    /// CSV with one line per (sample, n).
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample_id,n,successes,trials,rate\n");
        for r in &self.per_sample {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.sample_id, r.n, r.successes, r.trials, r.rate
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("n,mean_rate,mean_rate_label\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.n, r.mean_rate, r.mean_rate_label));
        }
        out
    }
}

/// Runs the protocol for every test sample and each way count.
pub fn evaluate_suite(
    classifier: &ToyClassifier,
    generated: &[Array3<f32>],
    corpus: &Corpus,
    ways: &[usize],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if generated.len() != corpus.test.len() {
        return Err(CndError::Input(format!(
            "{} generated images for {} test samples",
            generated.len(),
            corpus.test.len()
        )));
    }
    if corpus.test.is_empty() {
        return Err(CndError::Input("corpus has no test samples".into()));
    }
    if ways.is_empty() {
        return Err(CndError::Config("ways list must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(ways.len());
    let mut per_sample = Vec::new();
    for &n in ways {
        let mut sum = 0.0;
        let mut sum_label = 0.0;
        for (i, ((sample, gt_image), gen)) in corpus.test.iter().zip(generated.iter()).enumerate() {
            let cfg = EvalConfig {
                n,
                trials: config.trials,
                seed: crate::contrastive::derive_seed(config.seed, n as u64, i as u64),
            };
            let gen_probs = classifier.predict_probs(std::slice::from_ref(gen))?;
            let gen_row = gen_probs.row(0);
            let gt_probs = classifier.predict_probs(std::slice::from_ref(&gt_image.pixels))?;
            let rate = n_way_top1_from_probs(
                gen_row.as_slice().unwrap(),
                gt_probs.row(0).as_slice().unwrap(),
                &cfg,
            )?;
            // Same trials with the dataset label standing in for y_g.
            let mut label_probs = vec![0.0; classifier.num_classes];
            label_probs[sample.concept_label] = 1.0;
            let rate_label =
                n_way_top1_from_probs(gen_row.as_slice().unwrap(), &label_probs, &cfg)?;
            sum += rate;
            sum_label += rate_label;
            per_sample.push(SampleResult {
                sample_id: i,
                n,
                successes: (rate * config.trials as f64).round() as usize,
                trials: config.trials,
                rate,
            });
        }
        rows.push(WayAccuracy {
            n,
            mean_rate: sum / corpus.test.len() as f64,
            mean_rate_label: sum_label / corpus.test.len() as f64,
        });
    }
    Ok(EvalReport { rows, per_sample })
}
