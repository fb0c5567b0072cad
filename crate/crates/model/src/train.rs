//! Optimization loop: a coarse phase on truncated trajectories followed by a
//! fine phase on full ones, annealed KL, per-step loss rows, periodic
//! checkpoints, and an abort-on-divergence path that preserves the last good
//! checkpoint on disk.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resplat_autodiff::{Adam, AdamConfig, Tape};
use resplat_data::{tensorize, Lineage, LineageBatch};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ModelError;
use crate::loss::{total_loss, AnnealSchedule, LossParts, LossWeights};
use crate::vae::{noise_tensor, StreamVae};

/// All knobs of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Share of steps spent on half-length trajectories before switching to
    /// full ones.
    pub coarse_fraction: f64,
    /// Annealing increment per step.
    pub alpha: f64,
    /// Annealing cycle length; `None` defaults to a quarter of the run.
    pub ramp: Option<usize>,
    /// Wrap α·t by the cycle length before capping instead of cycling t.
    pub alt_beta_precedence: bool,
    pub weights: LossWeights,
    /// Keep the prior at identity and use the closed-form KL.
    pub flow_frozen: bool,
    /// Checkpoint cadence in steps; 0 disables periodic saves.
    pub checkpoint_every: usize,
    /// Where checkpoints and the loss table land; `None` keeps everything in
    /// memory. Runtime plumbing only: it never enters checkpoint metadata, so
    /// equal runs stay bit-identical regardless of where they write.
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Stream-specific defaults: the geometry stream spends most of its
    /// budget on full-resolution sequences, the appearance stream on the
    /// coarse prefix.
    pub fn for_stream(stream: crate::config::Stream, steps: usize, seed: u64) -> Self {
        let coarse_fraction = match stream {
            crate::config::Stream::Geometry => 0.2,
            crate::config::Stream::Appearance => 0.8,
        };
        TrainConfig {
            steps,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            coarse_fraction,
            alpha: 0.002,
            ramp: None,
            alt_beta_precedence: false,
            weights: LossWeights::default(),
            flow_frozen: true,
            checkpoint_every: 500,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.steps == 0 {
            return Err(ModelError::Config("training needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&self.coarse_fraction) {
            return Err(ModelError::Config(format!(
                "coarse_fraction {} must lie in [0, 1) so the fine phase is non-empty",
                self.coarse_fraction
            )));
        }
        if !(self.lr > 0.0) {
            return Err(ModelError::Config("learning rate must be positive".into()));
        }
        self.weights.validate()?;
        self.schedule().validate()
    }

    /// The annealing schedule this run uses.
    pub fn schedule(&self) -> AnnealSchedule {
        let ramp = self.ramp.unwrap_or_else(|| (self.steps / 4).max(1));
        AnnealSchedule { alpha: self.alpha, ramp, alt_precedence: self.alt_beta_precedence }
    }

    /// Number of leading steps spent on the coarse batch.
    pub fn coarse_steps(&self) -> usize {
        ((self.coarse_fraction * self.steps as f64).round() as usize).min(self.steps - 1)
    }
}

/// One optimizer step's loss readings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub parts: LossParts,
}

/// Outcome of a training run.
#[derive(Debug)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub final_loss: f64,
    /// Step at which the loss stopped being finite, if it did.
    pub diverged_at: Option<usize>,
    /// Path of the last checkpoint written, which on divergence is the last
    /// good one.
    pub checkpoint: Option<PathBuf>,
    pub csv_path: Option<PathBuf>,
    /// Step count covered by the checkpoint on disk.
    pub last_saved_step: Option<usize>,
}

/// Render loss rows as `step,kl,mse,chamfer,beta,total` CSV. Values use the
/// shortest round-trip float formatting.
pub fn loss_csv(rows: &[TrainRow]) -> String {
    let mut out = String::from("step,kl,mse,chamfer,beta,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.parts.kl, r.parts.mse, r.parts.chamfer, r.parts.beta, r.parts.total
        ));
    }
    out
}

/// Keep only each trajectory's first ⌈len/2⌉ states (its low-resolution
/// prefix).
pub fn truncate_half(lineages: &[Lineage]) -> Vec<Lineage> {
    lineages
        .iter()
        .map(|l| {
            let keep = l.len().div_ceil(2);
            let states = l.states[..keep].to_vec();
            let id = states.last().map(|(_, r)| r.id).unwrap_or(l.id);
            Lineage { id, parent: l.parent, birth_step: l.birth_step, states, dead: l.dead }
        })
        .collect()
}

fn batch_for(lineages: &[Lineage], importance: &[f64]) -> Result<LineageBatch, ModelError> {
    let longest = lineages.iter().map(Lineage::len).max().unwrap_or(0).max(2);
    Ok(tensorize(lineages, longest, importance)?)
}

/// Run the optimization loop over one stream's model.
pub fn train(
    model: &mut StreamVae,
    lineages: &[Lineage],
    importance: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    cfg.validate()?;
    if lineages.is_empty() {
        return Err(ModelError::Config("no trajectories to train on".into()));
    }
    if lineages.len() != importance.len() {
        return Err(ModelError::Config(format!(
            "{} trajectories but {} importance weights",
            lineages.len(),
            importance.len()
        )));
    }

    let fine = batch_for(lineages, importance)?;
    let coarse_steps = cfg.coarse_steps();
    let coarse = if coarse_steps > 0 {
        Some(batch_for(&truncate_half(lineages), importance)?)
    } else {
        None
    };

    let schedule = cfg.schedule();
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps },
        model.params.tensors(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows: Vec<TrainRow> = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;
    let mut checkpoint = None;
    let mut last_saved_step = None;

    let ckpt_path =
        cfg.out_dir.as_ref().map(|d| d.join(format!("{}.ckpt", model.stream.name())));
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for step in 0..cfg.steps {
        let batch = match &coarse {
            Some(c) if step < coarse_steps => c,
            _ => &fine,
        };
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let eps = noise_tensor(batch.batch(), model.cfg.latent_dim, &mut rng);
        let beta = schedule.beta(step);
        let result = total_loss(
            &mut tape,
            model,
            &bound,
            batch,
            &cfg.weights,
            beta,
            &eps,
            cfg.flow_frozen,
        );
        let (total, parts) = match result {
            Ok(ok) => ok,
            Err(ModelError::NonFinite(_)) => {
                diverged_at = Some(step);
                break;
            }
            Err(other) => return Err(other),
        };
        if !parts.total.is_finite() {
            diverged_at = Some(step);
            break;
        }
        tape.backward(total);
        let grads = bound.collect_grads(&tape);
        adam.step(model.params.tensors_mut(), &grads);
        rows.push(TrainRow { step, parts });

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            if let Some(path) = &ckpt_path {
                save_with_meta(model, path, cfg, done)?;
                checkpoint = Some(path.clone());
                last_saved_step = Some(done);
            }
        }
    }

    if diverged_at.is_none() {
        if let Some(path) = &ckpt_path {
            save_with_meta(model, path, cfg, cfg.steps)?;
            checkpoint = Some(path.clone());
            last_saved_step = Some(cfg.steps);
        }
    }

    let csv_path = match &cfg.out_dir {
        Some(dir) => {
            let p = dir.join(format!("{}_loss.csv", model.stream.name()));
            std::fs::write(&p, loss_csv(&rows))?;
            Some(p)
        }
        None => None,
    };

    let final_loss = rows.last().map(|r| r.parts.total).unwrap_or(f64::NAN);
    Ok(TrainReport { rows, final_loss, diverged_at, checkpoint, csv_path, last_saved_step })
}

fn save_with_meta(
    model: &StreamVae,
    path: &PathBuf,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(), ModelError> {
    let train = json!({ "config": cfg, "step": step });
    model.save(path, Some(train))
}
