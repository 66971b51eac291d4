//! Pipeline stages behind the subcommands. Every stage reads its inputs from
//! explicit `io` paths or from the current run directory, writes artifacts
//! and metrics into the run directory, and records content hashes of every
//! checkpoint it touches.

use crate::config::RunConfig;
use anyhow::{anyhow, bail, Context, Result};
use cnd_core::analysis::{
    capture_features, export_weight_map, fit_regularized_regression, pca_reduce, weight_map,
    zscore_columns, RegressionResult,
};
use cnd_core::checkpoint::{content_hash, load_module, save_module};
use cnd_core::conditioning::{build_concept_bank, finetune_phase2, ConditionModule};
use cnd_core::contrastive::{derive_seed, pretrain};
use cnd_core::diffusion::{
    sample_latents, train_autoencoder, train_unet, ImageAutoencoder, NoiseSchedule, UNet,
};
use cnd_core::evaluation::{
    classifier_accuracy, evaluate_suite, train_toy_classifier, EvalConfig,
};
use cnd_core::fmri_encoder::FmriMae;
use cnd_core::nn::Module;
use cnd_core::synth_data::{generate_corpus_with_patch, load_corpus, save_corpus, Corpus};
use cnd_core::tensor::{Arr, Graph};
use ndarray::{Array1, Array3, Axis};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageCmd {
    GenData,
    Pretrain,
    TrainDiffusion,
    Finetune,
    Generate,
    Evaluate,
    Analyze,
    All,
}

impl StageCmd {
    pub fn name(self) -> &'static str {
        match self {
            StageCmd::GenData => "gen-data",
            StageCmd::Pretrain => "pretrain",
            StageCmd::TrainDiffusion => "train-diffusion",
            StageCmd::Finetune => "finetune",
            StageCmd::Generate => "generate",
            StageCmd::Evaluate => "evaluate",
            StageCmd::Analyze => "analyze",
            StageCmd::All => "all",
        }
    }
}

/// Runs one subcommand in `dir`: writes the resolved config up front, the
/// stage artifacts as it goes, and `hashes.json` at the end.
pub fn execute(cmd: StageCmd, cfg: RunConfig, dir: PathBuf) -> Result<()> {
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create run directory {}", dir.display()))?;
    let mut runner = Runner { cfg, dir, hashes: BTreeMap::new() };
    std::fs::write(
        runner.dir.join("config.toml"),
        toml::to_string_pretty(&runner.cfg).context("serializing resolved config")?,
    )?;
    let stages: Vec<StageCmd> = match cmd {
        StageCmd::All => vec![
            StageCmd::GenData,
            StageCmd::Pretrain,
            StageCmd::TrainDiffusion,
            StageCmd::Finetune,
            StageCmd::Generate,
            StageCmd::Evaluate,
            StageCmd::Analyze,
        ],
        other => vec![other],
    };
    for s in stages {
        println!("[cnd] stage {} ...", s.name());
        let t0 = std::time::Instant::now();
        runner.run_stage(s)?;
        println!("[cnd] stage {} done in {:.1}s", s.name(), t0.elapsed().as_secs_f64());
    }
    std::fs::write(
        runner.dir.join("hashes.json"),
        serde_json::to_vec_pretty(&runner.hashes)?,
    )?;
    println!("[cnd] run directory: {}", runner.dir.display());
    Ok(())
}

struct Runner {
    cfg: RunConfig,
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Runner {
    fn run_stage(&mut self, s: StageCmd) -> Result<()> {
        match s {
            StageCmd::GenData => self.gen_data(),
            StageCmd::Pretrain => self.pretrain_stage(),
            StageCmd::TrainDiffusion => self.train_diffusion(),
            StageCmd::Finetune => self.finetune(),
            StageCmd::Generate => self.generate(),
            StageCmd::Evaluate => self.evaluate(),
            StageCmd::Analyze => self.analyze(),
            StageCmd::All => unreachable!("expanded by execute"),
        }
    }

    // -- artifact plumbing --------------------------------------------------

    fn record_hash(&mut self, path: &Path) -> Result<()> {
        let h = content_hash(path).map_err(|e| anyhow!("hashing {}: {e}", path.display()))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.hashes.insert(name, format!("{h:016x}"));
        Ok(())
    }

    fn save(&mut self, name: &str, module: &dyn Module) -> Result<()> {
        let path = self.dir.join(name);
        save_module(&path, module).map_err(|e| anyhow!("saving {name}: {e}"))?;
        self.record_hash(&path)
    }

    fn load(&mut self, path: &Path, module: &mut dyn Module) -> Result<()> {
        load_module(path, module)
            .map_err(|e| anyhow!("loading {}: {e}", path.display()))?;
        self.record_hash(path)
    }

    fn input_path(&self, explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.dir.join(default_name))
    }

    fn load_corpus(&mut self) -> Result<Corpus> {
        let dir = self.input_path(&self.cfg.io.corpus_dir.clone(), "corpus");
        load_corpus(&dir).map_err(|e| anyhow!("loading corpus from {}: {e}", dir.display()))
    }

    fn load_encoder(&mut self) -> Result<FmriMae> {
        let mut enc = FmriMae::new(&self.cfg.encoder, 0)?;
        let path = self.input_path(&self.cfg.io.encoder_ckpt.clone(), "encoder.ckpt");
        self.load(&path, &mut enc)?;
        Ok(enc)
    }

    fn load_autoencoder(&mut self) -> Result<ImageAutoencoder> {
        let mut ae = ImageAutoencoder::new(self.cfg.corpus.image_size, 0)?;
        let path = self.input_path(&self.cfg.io.autoencoder_ckpt.clone(), "autoencoder.ckpt");
        self.load(&path, &mut ae)?;
        Ok(ae)
    }

    fn load_unet(&mut self) -> Result<UNet> {
        let mut unet = UNet::new(&self.cfg.effective_unet(), 0)?;
        let path = self.input_path(&self.cfg.io.unet_ckpt.clone(), "unet.ckpt");
        self.load(&path, &mut unet)?;
        Ok(unet)
    }

    fn load_schedule(&mut self) -> Result<NoiseSchedule> {
        let path = self.input_path(&self.cfg.io.schedule_json.clone(), "schedule.json");
        let bytes = std::fs::read(&path)
            .with_context(|| format!("reading schedule {}", path.display()))?;
        self.record_hash(&path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn load_condition(&mut self, encoder: &FmriMae, unet: &UNet) -> Result<ConditionModule> {
        let mut cond = ConditionModule::new(
            &self.cfg.phase2.attention,
            encoder.config.embed_dim,
            unet.config.context_dim,
            unet.config.context_dim,
            unet.config.time_dim,
            0,
        )?;
        let path = self.input_path(&self.cfg.io.condition_ckpt.clone(), "condition.ckpt");
        self.load(&path, &mut cond)?;
        Ok(cond)
    }

    fn write_history_csv(&self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        let mut text = String::from(header);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        std::fs::write(self.dir.join(name), text)?;
        Ok(())
    }

    // -- stages -------------------------------------------------------------

    fn gen_data(&mut self) -> Result<()> {
        let mut spec = self.cfg.corpus.clone();
        spec.seed = derive_seed(self.cfg.seed, 100, 0);
        let corpus = generate_corpus_with_patch(&spec, self.cfg.encoder.patch_size)?;
        save_corpus(&corpus, &self.dir.join("corpus"))?;
        Ok(())
    }

    fn pretrain_stage(&mut self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let out = pretrain(
            &corpus,
            &self.cfg.encoder,
            &self.cfg.contrastive,
            derive_seed(self.cfg.seed, 101, 0),
        )?;
        self.save("encoder.ckpt", &out.model)?;
        let rows: Vec<String> = out
            .history
            .iter()
            .map(|r| format!("{},{:.9},{:.9},{:.9}", r.epoch, r.cross, r.self_loss, r.total))
            .collect();
        self.write_history_csv("pretrain_history.csv", "epoch,cross,self,total", &rows)
    }

    fn train_diffusion(&mut self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let (ae, ae_hist) = train_autoencoder(
            &corpus,
            &self.cfg.autoencoder,
            derive_seed(self.cfg.seed, 102, 0),
        )?;
        self.save("autoencoder.ckpt", &ae)?;
        let (unet, schedule, unet_hist) = train_unet(
            &corpus,
            &ae,
            &self.cfg.effective_unet(),
            &self.cfg.diffusion,
            derive_seed(self.cfg.seed, 102, 1),
        )?;
        self.save("unet.ckpt", &unet)?;
        let sched_path = self.dir.join("schedule.json");
        std::fs::write(&sched_path, serde_json::to_vec_pretty(&schedule)?)?;
        self.record_hash(&sched_path)?;
        let rows: Vec<String> = ae_hist
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i},{l:.9}"))
            .collect();
        self.write_history_csv("autoencoder_history.csv", "epoch,mse", &rows)?;
        let rows: Vec<String> = unet_hist
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i},{l:.9}"))
            .collect();
        self.write_history_csv("diffusion_history.csv", "step,loss", &rows)
    }

    fn finetune(&mut self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let mut encoder = self.load_encoder()?;
        let ae = self.load_autoencoder()?;
        let unet = self.load_unet()?;
        let schedule = self.load_schedule()?;
        let out = finetune_phase2(
            &corpus,
            &mut encoder,
            &unet,
            &schedule,
            &ae,
            &self.cfg.phase2,
            derive_seed(self.cfg.seed, 103, 0),
        )?;
        self.save("condition.ckpt", &out.condition)?;
        if self.cfg.phase2.train_encoder {
            self.save("encoder_finetuned.ckpt", &encoder)?;
        }
        let rows: Vec<String> = out
            .history
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i},{l:.9}"))
            .collect();
        self.write_history_csv("phase2_history.csv", "step,loss", &rows)
    }

    /// Condition context and timestep addend for every test sample, one
    /// batch-of-1 pair per sample.
    fn test_conditions(
        &mut self,
        corpus: &Corpus,
        encoder: &FmriMae,
        unet: &UNet,
        condition: &ConditionModule,
    ) -> Result<Vec<(Arr, Arr)>> {
        let bank = build_concept_bank(corpus.spec.num_classes, unet.config.context_dim, unet)?;
        let voxels: Vec<Array1<f64>> = corpus
            .test
            .iter()
            .map(|(s, _)| Array1::from_iter(s.voxels.iter().map(|&v| v as f64)))
            .collect();
        let g = Graph::inference();
        let feats = encoder.embed_for_condition(&g, &voxels)?;
        let cond = condition.make_condition(&g, &feats, &bank)?;
        let ctx = cond.context.value().clone();
        let time_add = cond.time_add.value().clone();
        Ok((0..voxels.len())
            .map(|i| {
                (
                    ctx.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0)).into_dyn(),
                    time_add.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0)).into_dyn(),
                )
            })
            .collect())
    }

    fn generate(&mut self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let encoder = self.load_encoder()?;
        let ae = self.load_autoencoder()?;
        let unet = self.load_unet()?;
        let schedule = self.load_schedule()?;
        let condition = self.load_condition(&encoder, &unet)?;
        let conditions = self.test_conditions(&corpus, &encoder, &unet, &condition)?;

        let out_dir = self.dir.join("generated");
        std::fs::create_dir_all(&out_dir)?;
        let mut labels = String::from("sample_id,label\n");
        for (i, (ctx, time_add)) in conditions.iter().enumerate() {
            let latents = sample_latents(
                &unet,
                &schedule,
                ctx,
                Some(time_add),
                derive_seed(self.cfg.seed, 104, i as u64),
                None,
            )?;
            let image = ae.decode_latent(&latents.index_axis(Axis(0), 0).to_owned())?;
            save_png(&out_dir.join(format!("sample_{i:04}.png")), &image)?;
            labels.push_str(&format!("{i},{}\n", corpus.test[i].0.concept_label));
        }
        std::fs::write(out_dir.join("labels.csv"), labels)?;
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let clf = train_toy_classifier(
            &corpus,
            &self.cfg.classifier,
            derive_seed(self.cfg.seed, 105, 0),
        )?;
        self.save("classifier.ckpt", &clf)?;
        let train_pairs: Vec<(Array3<f32>, usize)> = corpus
            .train
            .iter()
            .map(|(s, im)| (im.pixels.clone(), s.concept_label))
            .collect();
        let train_acc = classifier_accuracy(&clf, &train_pairs)?;

        let gen_dir = self.input_path(&self.cfg.io.generated_dir.clone(), "generated");
        let generated = load_generated(&gen_dir, corpus.test.len())?;
        let report = evaluate_suite(
            &clf,
            &generated,
            &corpus,
            &self.cfg.eval.ways,
            &EvalConfig {
                n: 2,
                trials: self.cfg.eval.trials,
                seed: derive_seed(self.cfg.seed, 105, 1),
            },
        )?;
        std::fs::write(self.dir.join("metrics_summary.csv"), report.summary_csv())?;
        std::fs::write(self.dir.join("metrics_per_sample.csv"), report.per_sample_csv())?;
        let mut extras = BTreeMap::new();
        extras.insert("classifier_train_accuracy".to_string(), train_acc);
        std::fs::write(self.dir.join("metrics.json"), serde_json::to_vec_pretty(&extras)?)?;
        Ok(())
    }

    fn analyze(&mut self) -> Result<()> {
        let corpus = self.load_corpus()?;
        let encoder = self.load_encoder()?;
        let unet = self.load_unet()?;
        let schedule = self.load_schedule()?;
        let condition = self.load_condition(&encoder, &unet)?;
        let conditions: Vec<(Arr, Option<Arr>)> = self
            .test_conditions(&corpus, &encoder, &unet, &condition)?
            .into_iter()
            .map(|(c, t)| (c, Some(t)))
            .collect();

        let mut acfg = self.cfg.analysis.clone();
        acfg.seed = derive_seed(self.cfg.seed, 106, 0);
        let features = capture_features(&unet, &schedule, &conditions, &acfg)?;

        let n = corpus.test.len();
        let mut vox = ndarray::Array2::<f64>::zeros((n, corpus.spec.voxel_count));
        for (i, (s, _)) in corpus.test.iter().enumerate() {
            for (j, &v) in s.voxels.iter().enumerate() {
                vox[[i, j]] = v as f64;
            }
        }
        let vox = zscore_columns(&vox);

        let mut r2_summary = BTreeMap::new();
        let mut by_layer: BTreeMap<String, Vec<RegressionResult>> = BTreeMap::new();
        let mut all_results = Vec::new();
        for (idx, ((stage, layer, t), m)) in features.iter().enumerate() {
            let k = acfg.pca_components.min(m.ncols()).min(n - 1);
            let red = pca_reduce(m, k)?;
            let fit = fit_regularized_regression(
                &vox,
                &red.scores,
                acfg.lambda,
                acfg.penalty,
                derive_seed(self.cfg.seed, 107, idx as u64),
            )?;
            let key = format!("{}_{layer}_{t}", stage.as_str());
            let map = weight_map(&[&fit])?;
            let mut csv = String::from("voxel,score\n");
            for (vx, score) in map.iter().enumerate() {
                csv.push_str(&format!("{vx},{score:.9}\n"));
            }
            std::fs::write(self.dir.join(format!("weights_{key}.csv")), csv)?;
            let mean_r2 = fit.per_component_r2.iter().sum::<f64>()
                / fit.per_component_r2.len() as f64;
            r2_summary.insert(
                key.clone(),
                serde_json::json!({
                    "mean_r2": mean_r2,
                    "per_component_r2": fit.per_component_r2,
                    "condition_warning": fit.condition_warning,
                }),
            );
            by_layer
                .entry(format!("{}_{layer}", stage.as_str()))
                .or_default()
                .push(fit.clone());
            all_results.push(fit);
        }
        for (group, fits) in &by_layer {
            let refs: Vec<&RegressionResult> = fits.iter().collect();
            export_weight_map(
                &self.dir.join(format!("map_{group}.csv")),
                &self.dir.join(format!("map_{group}.png")),
                &refs,
            )?;
        }
        let refs: Vec<&RegressionResult> = all_results.iter().collect();
        export_weight_map(
            &self.dir.join("map_all.csv"),
            &self.dir.join("map_all.png"),
            &refs,
        )?;
        std::fs::write(
            self.dir.join("r2_summary.json"),
            serde_json::to_vec_pretty(&r2_summary)?,
        )?;
        Ok(())
    }
}

/// Writes an HWC float image in [0,1] as an 8-bit RGB PNG.
fn save_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Loads `sample_####.png` files back into HWC float images in [0,1].
fn load_generated(dir: &Path, count: usize) -> Result<Vec<Array3<f32>>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("sample_{i:04}.png"));
        if !path.exists() {
            bail!(
                "missing generated image {} (expected {count} samples)",
                path.display()
            );
        }
        let img = image::open(&path)
            .with_context(|| format!("reading {}", path.display()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut arr = Array3::<f32>::zeros((h as usize, w as usize, 3));
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x, y);
                for c in 0..3 {
                    arr[[y as usize, x as usize, c]] = p[c] as f32 / 255.0;
                }
            }
        }
        out.push(arr);
    }
    Ok(out)
}
