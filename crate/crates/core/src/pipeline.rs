//! Per-fold training and inference: optional clip-encoder pretraining,
//! feature extraction, then joint training of the segmentation and boundary
//! stacks.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tas_tensor::{AdamW, AdamWConfig, Checkpoint, ParamStore, Tape, Tensor};

use crate::ase::{Ase, Head};
use crate::config::{FeatureSource, RunConfig};
use crate::data::labels::boundary_targets;
use crate::data::{ClassMap, VideoRecord};
use crate::error::{contract, Result, TasError};
use crate::objectives::{median_frequency_weights, positive_weight, total_loss, LossReport};
use crate::prc::{calibrate, select_boundaries};
use crate::vfe::Vfe;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub phase: String,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vfe_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Argmax of the final segmentation stage.
    pub raw: Vec<usize>,
    /// `raw` after boundary calibration.
    pub calibrated: Vec<usize>,
    /// Final-stage boundary probabilities.
    pub boundary: Vec<f64>,
    /// Argmax of every stage, encoder first.
    pub stages: Vec<Vec<usize>>,
}

/// Parameters and architecture of one fold's models.
pub struct FoldModel {
    pub config: RunConfig,
    pub classes: ClassMap,
    pub input_dim: usize,
    pub store: ParamStore,
    pub vfe: Option<Vfe>,
    pub ase: Ase,
    pub prc: Ase,
}

fn subsample(t: &Tensor, rate: usize) -> Tensor {
    if rate == 1 {
        return t.clone();
    }
    let rows: Vec<Vec<f64>> = (0..t.rows()).step_by(rate).map(|i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

fn upsample<T: Copy>(v: &[T], rate: usize, len: usize) -> Vec<T> {
    (0..len).map(|i| v[(i / rate).min(v.len() - 1)]).collect()
}

impl FoldModel {
    /// Fresh models; initialisation depends only on the config seed.
    pub fn new(config: &RunConfig, classes: &ClassMap, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let vfe = match config.features {
            FeatureSource::Vfe => Some(Vfe::new(&mut store, classes, input_dim, &config.vfe, &mut rng)?),
            FeatureSource::Raw => None,
        };
        let seg_in = vfe.as_ref().map_or(input_dim, |v| v.config.width);
        let ase = Ase::new(&mut store, "ase", seg_in, classes.len(), Head::Softmax, &config.ase, &mut rng)?;
        let prc = Ase::new(&mut store, "prc", seg_in, 1, Head::Sigmoid, &config.prc, &mut rng)?;
        store.round_to_f32();
        Ok(Self {
            config: config.clone(),
            classes: classes.clone(),
            input_dim,
            store,
            vfe,
            ase,
            prc,
        })
    }

    pub fn from_checkpoint(config: &RunConfig, classes: &ClassMap, ckpt: &Checkpoint) -> Result<Self> {
        let input_dim = ckpt
            .meta("input_dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TasError::Config("checkpoint lacks input_dim".into()))?;
        let mut model = Self::new(config, classes, input_dim)?;
        ckpt.restore(&mut model.store)?;
        Ok(model)
    }

    pub fn checkpoint(&self, fold: usize, phase: &str, epoch: usize, opt: Option<&AdamW>) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store)
            .with_meta("seed", self.config.seed.to_string())
            .with_meta("config_hash", self.config.hash())
            .with_meta("fold", fold.to_string())
            .with_meta("phase", phase)
            .with_meta("epoch", epoch.to_string())
            .with_meta("input_dim", self.input_dim.to_string());
        if let Some(opt) = opt {
            ck.tensors.extend(opt.state(&self.store));
        }
        ck
    }

    /// Segmentation input features of one video.
    pub fn features(&self, video: &VideoRecord) -> Result<Tensor> {
        if video.feature_dim() != self.input_dim {
            return contract(
                "features",
                format!("{}: feature dim {}, model expects {}", video.id, video.feature_dim(), self.input_dim),
            );
        }
        match &self.vfe {
            Some(v) => v.extract_features(&self.store, &video.features),
            None => Ok(video.features.clone()),
        }
    }

    pub fn predict(&self, features: &Tensor) -> Result<Prediction> {
        let rate = self.config.train.sample_rate;
        let t = features.rows();
        let x = subsample(features, rate);
        let seg = self.ase.infer(&self.store, &x)?;
        let bnd = self.prc.infer(&self.store, &x)?;
        let stages: Vec<Vec<usize>> = seg.iter().map(|s| upsample(&s.argmax_rows(), rate, t)).collect();
        let last = bnd.last().expect("at least one stage");
        let probs: Vec<f64> = last.data().iter().map(|&v| tas_tensor::tape::sigmoid(v)).collect();
        let raw_low = seg.last().expect("at least one stage").argmax_rows();
        let calibrated_low = calibrate(&raw_low, &select_boundaries(&probs))?;
        Ok(Prediction {
            raw: stages.last().cloned().expect("at least one stage"),
            calibrated: upsample(&calibrated_low, rate, t),
            boundary: upsample(&probs, rate, t),
            stages,
        })
    }
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch{epoch:03}.ckpt")
}

/// Training data prepared for the segmentation phase.
struct Prepared {
    features: Vec<Tensor>,
    labels: Vec<Vec<usize>>,
    targets: Vec<Vec<f64>>,
}

pub struct FoldTrainer<'a> {
    pub config: &'a RunConfig,
    pub classes: &'a ClassMap,
    pub fold: usize,
    /// Directory for per-epoch checkpoints; `None` disables them.
    pub checkpoint_dir: Option<PathBuf>,
}

impl FoldTrainer<'_> {
    fn save(&self, ck: &Checkpoint, name: &str) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
            ck.save(dir.join(name))?;
        }
        Ok(())
    }

    /// Trains from scratch, or continues from `resume`.
    pub fn run(
        &self,
        videos: &[VideoRecord],
        resume: Option<&Checkpoint>,
        log: &mut dyn FnMut(&EpochRecord),
    ) -> Result<FoldModel> {
        if videos.is_empty() {
            return contract("train", "no training videos");
        }
        let cfg = self.config;
        let input_dim = videos[0].feature_dim();
        let mut model = match resume {
            Some(ck) => FoldModel::from_checkpoint(cfg, self.classes, ck)?,
            None => FoldModel::new(cfg, self.classes, input_dim)?,
        };
        let record = |phase: &str, epoch: usize| EpochRecord {
            fold: self.fold,
            phase: phase.to_string(),
            epoch,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            vfe_loss: None,
            loss: None,
        };

        let resumed_phase = resume.and_then(|c| c.meta("phase")).unwrap_or("");
        if let Some(vfe) = &model.vfe {
            if resume.is_none() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(1);
                let history = vfe.train(&mut model.store, videos, &mut rng)?;
                for (epoch, loss) in history.into_iter().enumerate() {
                    log(&EpochRecord {
                        vfe_loss: Some(loss),
                        ..record("vfe", epoch)
                    });
                }
                self.save(&model.checkpoint(self.fold, "vfe", cfg.vfe.epochs, None), "vfe.ckpt")?;
            }
            for id in model.store.ids().collect::<Vec<_>>() {
                if model.store.name(id).starts_with("vfe.") {
                    model.store.set_trainable(id, false);
                }
            }
        }

        let data = self.prepare(&model, videos)?;
        let weights = median_frequency_weights(data.labels.iter().map(|v| v.as_slice()), self.classes.len())?;
        let w_pos = positive_weight(data.targets.iter().map(|v| v.as_slice()))?;

        let mut opt = AdamW::new(
            &model.store,
            AdamWConfig {
                lr: cfg.train.learning_rate,
                weight_decay: cfg.train.weight_decay,
                ..Default::default()
            },
        );
        let mut start = 0;
        if resumed_phase == "segment" {
            let ck = resume.expect("phase implies checkpoint");
            opt.load_state(&model.store, |n| ck.tensor(n).cloned())?;
            start = ck
                .meta("epoch")
                .and_then(|e| e.parse::<usize>().ok())
                .ok_or_else(|| TasError::Config("checkpoint lacks epoch".into()))?
                + 1;
        }

        let mut order: Vec<usize> = (0..videos.len()).collect();
        let mut tape = Tape::new();
        for epoch in start..cfg.train.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1000 + epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);
            opt.config.lr = cfg.train.learning_rate_at(epoch);
            let mut reports = Vec::with_capacity(videos.len());
            for &i in &order {
                tape.clear();
                let x = tape.constant(data.features[i].clone());
                let seg = model.ase.forward(&mut tape, &model.store, x)?;
                let bnd = model.prc.forward(&mut tape, &model.store, x)?;
                let probs: Vec<_> = bnd.iter().map(|&b| tape.sigmoid(b)).collect();
                let (loss, report) = total_loss(
                    &mut tape,
                    &seg,
                    &probs,
                    &data.labels[i],
                    &data.targets[i],
                    &weights,
                    w_pos,
                    &data.features[i],
                    &cfg.loss,
                )?;
                if !report.total.is_finite() {
                    return Err(TasError::NonFinite(format!(
                        "fold {} epoch {epoch} video {}",
                        self.fold, videos[i].id
                    )));
                }
                tape.backward(loss)?;
                let grads = tape.param_grads(&model.store);
                opt.step(&mut model.store, &grads)?;
                reports.push(report);
            }
            let mean = LossReport::mean(&reports);
            log::info!("fold {} epoch {epoch}: loss {:.4}", self.fold, mean.total);
            log(&EpochRecord {
                loss: Some(mean),
                ..record("segment", epoch)
            });
            if self.checkpoint_dir.is_some() {
                let ck = model.checkpoint(self.fold, "segment", epoch, Some(&opt));
                self.save(&ck, &epoch_checkpoint_name(epoch))?;
            }
        }
        self.save(&model.checkpoint(self.fold, "final", cfg.train.epochs, None), "final.ckpt")?;
        Ok(model)
    }

    fn prepare(&self, model: &FoldModel, videos: &[VideoRecord]) -> Result<Prepared> {
        let rate = self.config.train.sample_rate;
        let mut out = Prepared {
            features: Vec::with_capacity(videos.len()),
            labels: Vec::with_capacity(videos.len()),
            targets: Vec::with_capacity(videos.len()),
        };
        for v in videos {
            let f = subsample(&model.features(v)?, rate);
            let labels: Vec<usize> = v.labels.iter().step_by(rate).copied().collect();
            out.targets.push(boundary_targets(&labels, self.config.loss.boundary_radius));
            out.labels.push(labels);
            out.features.push(f);
        }
        Ok(out)
    }
}
