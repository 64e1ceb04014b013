//! K-fold training, best-epoch checkpointing, model selection and prediction.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{make_folds, make_stratified_folds, read_prompt_file_expect, Dataset, FoldSplit, FoldStrategy};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{evaluate, EvalReport, ScoredSample};
use crate::model::{ModelConfig, QualityModel};
use crate::numeric::{seeded_rng, AdamW, AdamWConfig, CosineSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub folds: usize,
    pub fold_strategy: FoldStrategy,
    pub seed: u64,
    pub loss: LossConfig,
    pub tau_out: f64,
    pub film_strength: f64,
    pub head_hidden: usize,
    pub fusion_hidden: usize,
    /// Free-form note stored with the run, e.g. why `lr` differs from the default.
    pub note: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            min_lr: 0.0,
            weight_decay: 1e-4,
            batch_size: 4,
            accum_steps: 2,
            epochs: 22,
            folds: 5,
            fold_strategy: FoldStrategy::Random,
            seed: 0,
            loss: LossConfig::default(),
            tau_out: 2.0,
            film_strength: 1.0,
            head_hidden: 64,
            fusion_hidden: 16,
            note: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be >= 0"));
        }
        if self.batch_size < 2 && self.loss.lambda_rank > 0.0 {
            return Err(Error::config("rank loss needs batch size >= 2"));
        }
        if self.batch_size == 0 || self.accum_steps == 0 || self.epochs == 0 {
            return Err(Error::config("batch, accum and epochs must be positive"));
        }
        self.loss.validate()?;
        CosineSchedule::new(self.lr, self.min_lr, 1)?;
        Ok(())
    }

    pub fn model_config(&self, channels: usize, prompt_dim: usize) -> ModelConfig {
        ModelConfig {
            head_hidden: self.head_hidden,
            fusion_hidden: self.fusion_hidden,
            tau_out: self.tau_out,
            film_strength: self.film_strength,
            ..ModelConfig::new(channels, prompt_dim)
        }
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    /// Seed for fold `k`'s initialization and shuffling.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold as u64 + 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub split: FoldSplit,
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
    /// Validation metrics of the best checkpoint.
    pub report: EvalReport,
    pub val_predictions: Vec<ScoredSample>,
}

impl FoldResult {
    pub fn best_epoch(&self) -> usize {
        self.best.meta.epoch
    }

    pub fn best_val_loss(&self) -> f64 {
        self.best.meta.val_loss.unwrap_or(f64::NAN)
    }

    pub fn best_val_mae(&self) -> f64 {
        self.best.meta.val_mae.unwrap_or(f64::NAN)
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    id: String,
    prediction: f64,
    target: f64,
}

/// `id,prediction,target`.
pub fn write_predictions(path: &Path, samples: &[ScoredSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(PredictionRow {
            id: s.id.clone(),
            prediction: s.prediction,
            target: s.target,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<PredictionRow>()
        .map(|row| {
            let row = row?;
            Ok(ScoredSample {
                id: row.id,
                target: row.target,
                prediction: row.prediction,
            })
        })
        .collect()
}

/// One micro-batch: forward, loss, backward with the loss scaled by `scale`.
/// Returns the unscaled loss.
pub fn accumulate_batch(
    model: &mut QualityModel<f32>,
    dataset: &Dataset,
    indices: &[usize],
    prompt: &[f32],
    loss: &LossConfig,
    scale: f64,
) -> Result<f64> {
    let tokens = dataset.batch(indices)?;
    let pred: Vec<f64> = model.forward(&tokens, prompt)?.into_iter().map(f64::from).collect();
    let target: Vec<f64> = indices.iter().map(|&i| dataset.mos(i)).collect();
    let out = total_loss(&pred, &target, loss)?;
    if !out.value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", out.value)));
    }
    let grad: Vec<f32> = out.grad.iter().map(|g| (g * scale) as f32).collect();
    model.backward(&grad)?;
    Ok(out.value)
}

/// Predictions for `indices`, in order, in chunks of `batch`.
pub fn predict_indices(
    model: &QualityModel<f32>,
    dataset: &Dataset,
    indices: &[usize],
    prompt: &[f32],
    batch: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let tokens = dataset.batch(chunk)?;
        out.extend(model.predict(&tokens, prompt)?.into_iter().map(f64::from));
    }
    Ok(out)
}

fn indices_for(dataset: &Dataset, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            dataset
                .index_of(id)
                .ok_or_else(|| Error::Data(format!("unknown sample id {id:?}")))
        })
        .collect()
}

fn scored(dataset: &Dataset, indices: &[usize], pred: &[f64]) -> Vec<ScoredSample> {
    indices
        .iter()
        .zip(pred)
        .map(|(&i, &p)| ScoredSample {
            id: dataset.id(i).to_string(),
            target: dataset.mos(i),
            prediction: p,
        })
        .collect()
}

/// Trains one fold and returns its history and best-by-validation-loss checkpoint.
pub fn train_fold(cfg: &TrainConfig, dataset: &Dataset, prompt: &[f32], split: &FoldSplit) -> Result<FoldResult> {
    cfg.validate()?;
    let train_idx = indices_for(dataset, &split.train_ids)?;
    let val_idx = indices_for(dataset, &split.val_ids)?;
    if val_idx.len() < 2 {
        return Err(Error::config("validation split needs at least 2 samples"));
    }
    let seed = cfg.fold_seed(split.fold_index);
    let model_cfg = cfg.model_config(dataset.shape.channels, prompt.len());
    let mut model = QualityModel::<f32>::new(model_cfg, seed)?;
    let mut opt = AdamW::with_params(cfg.optimizer(), &model.params());
    let mut rng = seeded_rng(seed ^ 0x5348_5546);

    // Micro-batches smaller than 2 carry no ranking pairs; fold them into the previous one.
    let mut micro = train_idx.len() / cfg.batch_size;
    if train_idx.len() % cfg.batch_size >= 2 || micro == 0 {
        micro += 1;
    }
    let steps_per_epoch = micro.div_ceil(cfg.accum_steps);
    let schedule = CosineSchedule::new(cfg.lr, cfg.min_lr, (steps_per_epoch * cfg.epochs) as u64)?;

    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut best_loss = f64::INFINITY;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = (0..micro)
            .map(|b| {
                let start = b * cfg.batch_size;
                let end = if b + 1 == micro { order.len() } else { start + cfg.batch_size };
                &order[start..end]
            })
            .collect();
        let mut loss_sum = 0.0;
        let mut lr = schedule.lr(opt.steps_taken());
        for group in batches.chunks(cfg.accum_steps) {
            for b in group {
                loss_sum += accumulate_batch(&mut model, dataset, b, prompt, &cfg.loss, 1.0 / group.len() as f64)?;
            }
            lr = schedule.lr(opt.steps_taken());
            opt.step(&mut model.params_mut(), lr)?;
        }
        let train_loss = loss_sum / micro as f64;

        let pred = predict_indices(&model, dataset, &val_idx, prompt, cfg.batch_size)?;
        let target: Vec<f64> = val_idx.iter().map(|&i| dataset.mos(i)).collect();
        let val_loss = total_loss(&pred, &target, &cfg.loss)?.value;
        let val_mae = crate::metrics::mae(&pred, &target)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        info!(
            "fold {} epoch {epoch}: train_loss={train_loss:.6} val_loss={val_loss:.6} val_mae={val_mae:.4} lr={lr:.3e}",
            split.fold_index
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_mae,
            lr,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best = Some(Checkpoint::from_model(
                &model,
                CheckpointMeta {
                    model: model.config.clone(),
                    fold: split.fold_index,
                    epoch,
                    val_loss: Some(val_loss),
                    val_mae: Some(val_mae),
                    seed,
                },
            ));
        }
    }

    let best = best.expect("at least one epoch");
    let best_model = best.to_model()?;
    let pred = predict_indices(&best_model, dataset, &val_idx, prompt, cfg.batch_size)?;
    let val_predictions = scored(dataset, &val_idx, &pred);
    let report = evaluate(&val_predictions)?;
    Ok(FoldResult {
        split: split.clone(),
        history,
        best,
        report,
        val_predictions,
    })
}

pub fn make_splits(cfg: &TrainConfig, dataset: &Dataset) -> Result<Vec<FoldSplit>> {
    let ids = dataset.manifest.ids();
    match cfg.fold_strategy {
        FoldStrategy::Random => make_folds(&ids, cfg.folds, cfg.seed),
        FoldStrategy::Stratified => {
            let mos: Vec<f64> = (0..dataset.len()).map(|i| dataset.mos(i)).collect();
            make_stratified_folds(&ids, &mos, cfg.folds, cfg.seed)
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    /// Index into `folds` of the selected model.
    pub selected: usize,
}

/// Lowest validation MAE wins; ties go to the lower fold index.
pub fn select_model(folds: &[FoldResult]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in folds.iter().enumerate() {
        let mae = f.best_val_mae();
        if best.is_none_or(|(_, m)| mae < m) {
            best = Some((i, mae));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::config("no folds to select from"))
}

pub fn cross_validate(cfg: &TrainConfig, dataset: &Dataset, prompt: &[f32]) -> Result<CrossValidation> {
    let splits = make_splits(cfg, dataset)?;
    let folds = splits
        .iter()
        .map(|s| train_fold(cfg, dataset, prompt, s))
        .collect::<Result<Vec<_>>>()?;
    let selected = select_model(&folds)?;
    Ok(CrossValidation { folds, selected })
}

/// Files written by [`run_training`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub selected_checkpoint: PathBuf,
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold}"))
}

/// Full run: cross-validation plus on-disk config, histories, checkpoints, predictions and summary.
pub fn run_training(
    cfg: &TrainConfig,
    manifest: &Path,
    prompt_path: &Path,
    out: &Path,
) -> Result<(CrossValidation, RunOutputs)> {
    cfg.validate()?;
    let dataset = Dataset::open(manifest)?;
    let prompt = read_prompt_file(prompt_path)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("run_config.json");
    fs::write(&config_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&config_path, e))?;

    let cv = cross_validate(cfg, &dataset, &prompt)?;
    let mut summary = String::from("fold,best_epoch,val_loss,plcc,srocc,krocc,overall,mae\n");
    for f in &cv.folds {
        let dir = fold_dir(out, f.split.fold_index);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_history(&dir.join("history.csv"), &f.history)?;
        f.best.save(&dir.join("best.fqck"))?;
        write_predictions(&dir.join("val_predictions.csv"), &f.val_predictions)?;
        let r = &f.report;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f.split.fold_index,
            f.best_epoch(),
            f.best_val_loss(),
            r.plcc,
            r.srocc,
            r.krocc,
            r.overall,
            r.mae
        ));
    }
    let summary_path = out.join("folds.csv");
    fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
    let selected_checkpoint = out.join("selected.fqck");
    cv.folds[cv.selected].best.save(&selected_checkpoint)?;
    Ok((
        cv,
        RunOutputs {
            dir: out.to_path_buf(),
            selected_checkpoint,
        },
    ))
}

fn read_prompt_file(path: &Path) -> Result<Vec<f32>> {
    let p = crate::data::read_prompt_file(path)?;
    if p.is_empty() {
        warn!("{}: empty prompt embedding", path.display());
        return Err(Error::Data("empty prompt embedding".into()));
    }
    Ok(p)
}

/// Scores every manifest sample with a checkpoint.
pub fn predict_dataset(checkpoint: &Checkpoint, dataset: &Dataset, prompt_path: &Path) -> Result<Vec<ScoredSample>> {
    let model = checkpoint.to_model()?;
    let prompt = read_prompt_file_expect(prompt_path, model.config.prompt_dim)?;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let pred = predict_indices(&model, dataset, &idx, &prompt, 32)?;
    Ok(scored(dataset, &idx, &pred))
}
