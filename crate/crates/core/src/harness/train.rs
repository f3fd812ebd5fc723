use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::{grad_norm, Sgd};
use super::schedule::lr_at;
use crate::autograd::Tape;
use crate::dataset::{augment, sample_pk_batch, ImageCache, Manifest, Split};
use crate::error::{Error, Result};
use crate::losses::objective;
use crate::model::Model;
use crate::nn::Mode;

/// Loss values of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub lr: f64,
    pub ce: f64,
    pub icg: Option<f64>,
    pub triplet: Option<f64>,
    pub total: f64,
    /// Global gradient norm before any clipping.
    pub grad_norm: f64,
}

/// Per-epoch means, one JSON line in the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub ce: f64,
    pub icg: Option<f64>,
    pub triplet: Option<f64>,
    pub total: f64,
    #[serde(default)]
    pub grad_norm: f64,
}

pub struct Trainer {
    cfg: TrainConfig,
    pub model: Model<f32>,
    pub sgd: Sgd<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
    manifest: Manifest,
    images: ImageCache,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, manifest: &Manifest) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model_config(manifest.num_identities()), cfg.seed)?;
        Self::assemble(
            cfg,
            manifest,
            model,
            Sgd::new(cfg.momentum, cfg.weight_decay).with_max_grad_norm(cfg.grad_clip()),
            ChaCha8Rng::seed_from_u64(cfg.seed),
            0,
        )
    }

    /// Continue from `ckpt` on the manifest it was trained on.
    pub fn resume(ckpt: &Checkpoint, manifest: &Manifest) -> Result<Self> {
        if manifest.original_ids != ckpt.original_ids {
            return Err(Error::InvalidInput(
                "manifest identities differ from the checkpoint's".into(),
            ));
        }
        let model = ckpt.build_model()?;
        let mut sgd = Sgd::new(ckpt.config.momentum, ckpt.config.weight_decay)
            .with_max_grad_norm(ckpt.config.grad_clip());
        sgd.velocity = ckpt.velocity.clone();
        Self::assemble(
            &ckpt.config,
            manifest,
            model,
            sgd,
            ckpt.rng.clone(),
            ckpt.epoch,
        )
    }

    fn assemble(
        cfg: &TrainConfig,
        manifest: &Manifest,
        model: Model<f32>,
        sgd: Sgd<f32>,
        rng: ChaCha8Rng,
        epoch: usize,
    ) -> Result<Self> {
        if manifest.split != Split::Train {
            return Err(Error::InvalidInput(
                "training needs a TRAIN manifest".into(),
            ));
        }
        let images = ImageCache::load(manifest, cfg.height, cfg.width)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            sgd,
            rng,
            epoch,
            manifest: manifest.clone(),
            images,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.cfg
            .iters_per_epoch
            .unwrap_or_else(|| {
                self.manifest
                    .len()
                    .div_ceil(self.cfg.sampler_config().batch_size())
            })
            .max(1)
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        Checkpoint::capture(
            &self.cfg,
            &mut self.model,
            &self.manifest.original_ids,
            self.epoch,
            &self.sgd.velocity,
            &self.rng,
        )
    }

    /// Draw one PK batch, augment it, and take one SGD step at `lr`.
    pub fn train_step(&mut self, lr: f64) -> Result<StepReport> {
        let batch = sample_pk_batch(&self.manifest, &self.cfg.sampler_config(), &mut self.rng)?;
        let (h, w) = (self.cfg.height, self.cfg.width);
        let aug = self.cfg.augment_config();
        let mut x = Array4::<f32>::zeros((batch.indices.len(), 3, h, w));
        for (row, (&i, &m)) in batch.indices.iter().zip(&batch.modalities).enumerate() {
            let img = augment(&self.images.images[i], m, &aug, (h, w), &mut self.rng);
            x.index_axis_mut(Axis(0), row).assign(&img.data());
        }
        let tape = Tape::new();
        let out =
            self.model
                .forward(&tape.constant(x.into_dyn()), &batch.modalities, Mode::Train)?;
        let emb = out.embeddings(&batch.identities, &batch.modalities)?;
        let terms = objective(&emb, &out.logits, &self.cfg.loss_config()).map_err(|e| match e {
            Error::NonFinite(_) => {
                let max_abs = |v: &crate::autograd::Var<f32>| {
                    v.value().iter().fold(0f32, |a, b| a.max(b.abs()))
                };
                Error::NonFinite(format!(
                    "loss at epoch {} (lr {lr}): max |pooled| {}, max |logit| {}, identities {:?}",
                    self.epoch,
                    max_abs(&out.pooled),
                    max_abs(&out.logits),
                    batch.identities
                ))
            }
            other => other,
        })?;
        let grads = terms.total.backward();
        let grad_norm = grad_norm(&mut self.model, &grads) as f64;
        self.sgd.step(&mut self.model, &grads, lr);
        let f = |v: &crate::autograd::Var<f32>| v.scalar() as f64;
        Ok(StepReport {
            lr,
            ce: f(&terms.ce),
            icg: terms.icg.as_ref().map(f),
            triplet: terms.triplet.as_ref().map(f),
            total: f(&terms.total),
            grad_norm,
        })
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let lr = lr_at(self.epoch, &self.cfg)?;
        let steps = self.iters_per_epoch();
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            reports.push(self.train_step(lr)?);
        }
        let n = steps as f64;
        let mean = |g: &dyn Fn(&StepReport) -> Option<f64>| -> Option<f64> {
            reports.iter().map(g).sum::<Option<f64>>().map(|s| s / n)
        };
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            steps,
            ce: mean(&|r| Some(r.ce)).unwrap(),
            icg: mean(&|r| r.icg),
            triplet: mean(&|r| r.triplet),
            total: mean(&|r| Some(r.total)).unwrap(),
            grad_norm: mean(&|r| Some(r.grad_norm)).unwrap(),
        };
        self.epoch += 1;
        Ok(log)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Run the full schedule. With `out_dir`, writes `train_log.jsonl`, periodic
/// `checkpoint_epoch{N}.safetensors` files and `final.safetensors`.
pub fn train(
    cfg: &TrainConfig,
    manifest: &Manifest,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, manifest)?;
    continue_training(&mut trainer, out_dir)
}

pub(crate) fn continue_training(
    trainer: &mut Trainer,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((
                BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?),
                p,
            ))
        }
        None => None,
    };
    let mut log = Vec::new();
    let every = trainer.config().checkpoint_every;
    while trainer.epoch() < trainer.config().epochs {
        let entry = trainer.run_epoch()?;
        if let Some((w, p)) = &mut log_file {
            writeln!(w, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&*p, e))?;
            w.flush().map_err(|e| Error::io(&*p, e))?;
        }
        log.push(entry);
        if let Some(dir) = out_dir {
            if every > 0
                && trainer.epoch() % every == 0
                && trainer.epoch() < trainer.config().epochs
            {
                trainer
                    .checkpoint()
                    .save(dir.join(format!("checkpoint_epoch{}.safetensors", trainer.epoch())))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        checkpoint.save(dir.join("final.safetensors"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}
