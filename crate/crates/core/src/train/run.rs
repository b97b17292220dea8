//! Run configuration, datasets, and the train / evaluate / predict loops.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Backend;
use crate::error::{Error, Result};
use crate::io::{read_label, read_nifti, subject_from_path, EvalReport, LabelVolume, SubjectMetrics, Volume};
use crate::loss::{binarize_logits, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::partition::Partition;
use crate::preprocess::{augment, PreprocessConfig};
use crate::tensor::{Element, Tensor};

use super::optim::{AdamW, AdamWConfig};
use super::schedule::{cv_split, lr_at, EarlyStopping};
use super::step::{predict_logits, two_pass_step, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Directory with `images/` and `labels/` of preprocessed volumes.
    pub data_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    pub early_stop_patience: usize,
    pub clip_max_norm: f64,
    pub loss: LossConfig,
    /// Sub-cubes per volume: 1, 8, 27, ...
    pub cubes: usize,
    pub seed: u64,
    pub folds: usize,
    pub fold: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: None,
            epochs: 100,
            batch_size: 1,
            warmup_epochs: 5,
            optimizer: AdamWConfig::default(),
            early_stop_patience: 20,
            clip_max_norm: 1.0,
            loss: LossConfig::default(),
            cubes: 8,
            seed: 0,
            folds: 5,
            fold: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early-stopping patience must be at least 1".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("only batch size 1 is supported".into()));
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(Error::Config("clip max norm must be positive".into()));
        }
        self.loss.validate()
    }
}

/// The whole experiment: one JSON document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        self.preprocess.validate()?;
        self.train.validate()?;
        Partition::from_cube_count(self.preprocess.crop_extent, self.train.cubes)?;
        Ok(())
    }

    pub fn partition(&self, extents: [usize; 3]) -> Result<Partition> {
        Partition::from_cube_count(extents, self.train.cubes)
    }

    /// Short label used in reports: cube layout plus ablation switches.
    pub fn label(&self) -> String {
        let mut s = format!("cubes={}", self.train.cubes);
        if !self.model.depth_embedding {
            s.push_str(" no-depth-embedding");
        }
        if !self.model.decoder.multi_scale {
            s.push_str(" single-scale");
        }
        s
    }
}

/// Preprocessed image and label of one subject.
#[derive(Debug, Clone)]
pub struct Subject {
    pub image: Volume,
    pub label: LabelVolume,
}

impl Subject {
    pub fn id(&self) -> &str {
        &self.image.subject_id
    }

    pub fn sample<T: Element>(&self) -> Result<Sample<T>> {
        let [d, h, w] = self.image.extents();
        let shape = [1, 1, d, h, w];
        Sample::new(
            self.id(),
            Tensor::new(self.image.data.iter().map(|&v| T::lit(v as f64)).collect(), &shape)?,
            Tensor::new(self.label.data.iter().map(|&v| T::lit(v as f64)).collect(), &shape)?,
        )
    }
}

fn nifti_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = p.to_string_lossy();
            n.ends_with(".nii") || n.ends_with(".nii.gz")
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Pairs of `images/<id>.nii[.gz]` and `labels/<id>.nii[.gz]`, sorted by id.
pub fn dataset_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let labels = nifti_files(&dir.join("labels"))?;
    let mut pairs = Vec::new();
    for img in nifti_files(&dir.join("images"))? {
        let id = subject_from_path(&img);
        let label = labels
            .iter()
            .find(|l| subject_from_path(l) == id)
            .ok_or_else(|| Error::MissingSubject(format!("{id} (no label file)")))?;
        pairs.push((id, img, label.clone()));
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "no images found under {}",
            dir.join("images").display()
        )));
    }
    Ok(pairs)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Subject>> {
    dataset_pairs(dir)?
        .into_iter()
        .map(|(_, img, lbl)| {
            let image = read_nifti(&img)?;
            let label = read_label(&lbl)?;
            if image.extents() != label.extents() {
                return Err(Error::shape("dataset", &image.extents(), &label.extents()));
            }
            Ok(Subject { image, label })
        })
        .collect()
}

/// Training progress, emitted as it happens.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Split {
        train: Vec<String>,
        val: Vec<String>,
    },
    Step {
        epoch: usize,
        step: u64,
        subject: String,
        lr: f64,
        loss: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        train_loss: f64,
        val_dsc: f64,
        val_iou: f64,
        val_vol_error_pct: Option<f64>,
        best: bool,
    },
    EarlyStop {
        epoch: usize,
        best_epoch: usize,
        best_dsc: f64,
    },
    Warning {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: u64,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub checkpoint: PathBuf,
    pub parameter_count: usize,
}

/// Evaluate `subjects` with sub-cube inference, thresholding at 0.5.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    subjects: &[&Subject],
    partition_of: impl Fn([usize; 3]) -> Result<Partition>,
    configuration: &str,
) -> Result<(EvalReport, Vec<Vec<bool>>)> {
    let mut metrics = Vec::with_capacity(subjects.len());
    let mut masks = Vec::with_capacity(subjects.len());
    for s in subjects {
        let sample = s.sample::<T>()?;
        let logits = predict_logits(model, &sample.image, s.id(), &partition_of(sample.extents())?)?;
        let pred = binarize_logits(logits.data());
        metrics.push(SubjectMetrics::from_masks(s.id(), &pred, &s.label.mask())?);
        masks.push(pred);
    }
    Ok((EvalReport::new(configuration, metrics)?, masks))
}

/// Binary mask for one preprocessed image.
pub fn predict_mask<T: Element>(model: &Model<T>, image: &Volume, partition: &Partition) -> Result<LabelVolume> {
    let [d, h, w] = image.extents();
    let x = Tensor::new(image.data.iter().map(|&v| T::lit(v as f64)).collect(), &[1, 1, d, h, w])?;
    let logits = predict_logits(model, &x, &image.subject_id, partition)?;
    LabelVolume::from_mask(
        &image.subject_id,
        image.geometry.clone(),
        &binarize_logits(logits.data()),
    )
}

/// Train with cross-validation split, early stopping on validation Dice, and
/// the best checkpoint written to `out_dir/best.vxt`.
pub fn train<T: Element>(
    cfg: &RunConfig,
    subjects: &[Subject],
    out_dir: &Path,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if subjects.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let t = &cfg.train;
    let (train_idx, val_idx) = if subjects.len() >= t.folds {
        cv_split(subjects.len(), t.fold, t.folds, t.seed)?
    } else {
        log(&TrainEvent::Warning {
            message: format!(
                "{} subjects is fewer than {} folds; validating on the training set",
                subjects.len(),
                t.folds
            ),
        });
        ((0..subjects.len()).collect(), (0..subjects.len()).collect())
    };
    let mut train_set: Vec<&Subject> = train_idx.iter().map(|&i| &subjects[i]).collect();
    let val_set: Vec<&Subject> = val_idx.iter().map(|&i| &subjects[i]).collect();
    log(&TrainEvent::Split {
        train: train_set.iter().map(|s| s.id().to_string()).collect(),
        val: val_set.iter().map(|s| s.id().to_string()).collect(),
    });

    let augment_on = cfg.preprocess.augment && cfg.model.encoder.backend != Backend::Imported;
    if cfg.preprocess.augment && !augment_on {
        log(&TrainEvent::Warning {
            message: "augmentation disabled: precomputed encoder features cannot follow it".into(),
        });
    }

    let mut model = Model::<T>::new(&cfg.model)?;
    let mut optim = AdamW::new(t.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut stopper = EarlyStopping::new(t.early_stop_patience);
    let checkpoint = out_dir.join("best.vxt");
    let label = cfg.label();
    let mut epochs_run = 0;

    for epoch in 0..t.epochs {
        let lr = lr_at(epoch, t.optimizer.lr, t.warmup_epochs, t.epochs);
        train_set.shuffle(&mut rng);
        let mut total = 0.0;
        for s in &train_set {
            let s = if augment_on {
                let (image, label, _) = augment(&s.image, &s.label, &cfg.preprocess, &mut rng)?;
                Subject { image, label }
            } else {
                (*s).clone()
            };
            let sample = s.sample::<T>()?;
            let partition = cfg.partition(sample.extents())?;
            let out = two_pass_step(
                &mut model,
                &mut optim,
                &sample,
                &partition,
                &t.loss,
                lr,
                t.clip_max_norm,
            )?;
            total += out.loss;
            log(&TrainEvent::Step {
                epoch,
                step: optim.steps(),
                subject: s.id().to_string(),
                lr,
                loss: out.loss,
                grad_norm: out.grad_norm,
            });
        }
        let (report, _) = evaluate(&model, &val_set, |e| cfg.partition(e), &label)?;
        let best = stopper.observe(epoch, report.mean.dsc);
        if best {
            model.save(&checkpoint)?;
        }
        epochs_run = epoch + 1;
        log(&TrainEvent::Epoch {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_dsc: report.mean.dsc,
            val_iou: report.mean.iou,
            val_vol_error_pct: report.mean.vol_error_pct,
            best,
        });
        if stopper.should_stop() {
            log(&TrainEvent::EarlyStop {
                epoch,
                best_epoch: stopper.best_epoch,
                best_dsc: stopper.best.unwrap_or(0.0),
            });
            break;
        }
    }
    Ok(TrainSummary {
        epochs_run,
        steps: optim.steps(),
        best_epoch: stopper.best_epoch,
        best_val_dsc: stopper.best.unwrap_or(0.0),
        checkpoint,
        parameter_count: model.parameter_count(),
    })
}
