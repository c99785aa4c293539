//! Training loop: one video per step, AdamW with gradient clipping.

use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::data::VideoSample;
use crate::eval::EvalReport;
use crate::error::{Error, Result};
use crate::model::{dropout_for, prepare_video, PreparedFrame, Sttran};
use crate::numerics::params::mix_seed;
use crate::numerics::{clip_global_norm, AdamWConfig, Graph, OptimizerState};
use crate::vocab::Vocabulary;

pub fn adamw_config(cfg: &crate::config::ModelConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    }
}

/// Index of the video trained on at global step `step`. Each pass over the
/// data is a fresh permutation drawn from `(seed, pass)`, so a resumed run
/// sees the same order as an uninterrupted one.
pub fn video_for_step(n: usize, seed: u64, step: u64) -> usize {
    let pass = step / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7261_696e, pass])));
    order[(step % n as u64) as usize]
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub video: String,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunRecord {
    /// Effective configuration in `key = value` form.
    pub config: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    /// Steps whose video had no annotated pair or object to learn from.
    pub skipped: usize,
    pub checkpoints: Vec<PathBuf>,
    pub eval: Option<EvalReport>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean loss over the last `n` recorded steps.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let k = self.steps.len().min(n);
        (k > 0).then(|| self.steps[self.steps.len() - k..].iter().map(|s| s.loss).sum::<f64>() / k as f64)
    }
}

pub struct CheckpointPolicy<'a> {
    pub path: PathBuf,
    pub every: usize,
    pub vocab: &'a Vocabulary,
}

pub struct Trainer {
    pub model: Sttran,
    pub optimizer: OptimizerState,
}

impl Trainer {
    pub fn new(model: Sttran) -> Self {
        let optimizer = OptimizerState::new(adamw_config(model.config()), &model.store);
        Trainer { model, optimizer }
    }

    pub fn resume(model: Sttran, optimizer: Option<OptimizerState>) -> Self {
        match optimizer {
            Some(optimizer) => Trainer { model, optimizer },
            None => Trainer::new(model),
        }
    }

    /// One optimisation step on `video`. Returns `None` when the video
    /// contributes no loss; parameters are left untouched on divergence.
    pub fn step(&mut self, video: &VideoSample, prepared: &[PreparedFrame]) -> Result<Option<StepRecord>> {
        let step = self.optimizer.step;
        let cfg = self.model.config().clone();
        let (loss, grads, updates) = {
            let mut g = Graph::new(&self.model.store).with_dropout(dropout_for(&cfg, step));
            let Some(loss) = self.model.net.loss(&mut g, video, prepared)? else {
                return Ok(None);
            };
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss is {value} at step {step} on video `{}`",
                    video.id
                )));
            }
            let updates = g.take_buffer_updates();
            (value, g.backward(loss)?, updates)
        };
        let store = &mut self.model.store;
        store.zero_grad();
        store.accumulate(grads);
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.grad.as_ref().is_some_and(|g| g.data().iter().any(|v| !v.is_finite())))
        {
            return Err(Error::Diverged(format!(
                "non-finite gradient in `{}` at step {step} on video `{}` (loss {loss})",
                p.name, video.id
            )));
        }
        store.apply_buffer_updates(updates);
        let grad_norm = clip_global_norm(store, cfg.clip_norm);
        self.optimizer.step(store);
        Ok(Some(StepRecord {
            step,
            video: video.id.clone(),
            loss,
            grad_norm,
        }))
    }

    /// Trains until the optimizer has taken `total_steps` steps. Videos
    /// without loss are skipped without advancing the step counter, so
    /// datasets must contain at least one annotated video.
    pub fn run(
        &mut self,
        videos: &[VideoSample],
        total_steps: u64,
        checkpoints: Option<&CheckpointPolicy>,
    ) -> Result<RunRecord> {
        if videos.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cfg = self.model.config().clone();
        let prepared: Vec<Vec<PreparedFrame>> = videos.iter().map(|v| prepare_video(v, cfg.mode, &cfg)).collect();
        let start = Instant::now();
        let mut record = RunRecord {
            config: cfg.to_text(),
            seed: cfg.seed,
            ..RunRecord::default()
        };
        let mut cursor = self.optimizer.step;
        let mut idle = 0usize;
        while self.optimizer.step < total_steps {
            let vi = video_for_step(videos.len(), cfg.seed, cursor);
            cursor += 1;
            let outcome = self.step(&videos[vi], &prepared[vi]).map_err(|e| match e {
                Error::Diverged(msg) => {
                    let recent: Vec<String> = record.steps.iter().rev().take(5).rev().map(|s| format!("{:.4}", s.loss)).collect();
                    Error::Diverged(format!("{msg}; preceding losses [{}]", recent.join(", ")))
                }
                e => e,
            })?;
            match outcome {
                Some(r) => {
                    idle = 0;
                    debug!("step {} video {} loss {:.6} |g| {:.4}", r.step, r.video, r.loss, r.grad_norm);
                    if (r.step + 1) % 50 == 0 {
                        info!("step {} loss {:.5}", r.step + 1, record.tail_loss(50).unwrap_or(r.loss));
                    }
                    record.steps.push(r);
                    if let Some(p) = checkpoints {
                        if p.every > 0 && self.optimizer.step.is_multiple_of(p.every as u64) && self.optimizer.step < total_steps {
                            save_checkpoint(&p.path, &self.model, Some(&self.optimizer), p.vocab)?;
                            record.checkpoints.push(p.path.clone());
                        }
                    }
                }
                None => {
                    record.skipped += 1;
                    idle += 1;
                    if idle > videos.len() {
                        return Err(Error::Config("no training video has an annotated relation".into()));
                    }
                }
            }
        }
        if let Some(p) = checkpoints {
            save_checkpoint(&p.path, &self.model, Some(&self.optimizer), p.vocab)?;
            record.checkpoints.push(p.path.clone());
        }
        record.wall_clock_secs = start.elapsed().as_secs_f64();
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_pass_is_a_permutation() {
        for pass in 0..3u64 {
            let mut seen: Vec<usize> = (0..7).map(|k| video_for_step(7, 5, pass * 7 + k)).collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }
}
