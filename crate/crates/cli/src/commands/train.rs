//! `train`: fit one stream's sequence model on a trajectory archive.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use resplat_core::Snapshot;
use resplat_data::{laplacian_density_weights, load_lineages, median_nn_distance, Lineage};
use resplat_model::{train, ModelConfig, Stream, StreamVae, TrainConfig};

use super::NumericalFailure;
use crate::config::FileConfig;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Trajectory archive to fit
    #[arg(long)]
    pub lineages: PathBuf,
    /// Which stream to train: geo or app
    #[arg(long)]
    pub stream: String,
    /// Per-trajectory weighting: hessian or uniform
    #[arg(long, default_value = "uniform")]
    pub weights: String,
    /// Optimizer steps
    #[arg(long)]
    pub steps: usize,
    /// Output directory for the checkpoint and loss table
    #[arg(long)]
    pub out: PathBuf,
    /// Architecture size: full or tiny
    #[arg(long, default_value = "full")]
    pub model: String,
    /// Neighbors per density estimate for hessian weighting
    #[arg(long, default_value_t = 16)]
    pub k: usize,
}

pub fn parse_stream(text: &str) -> Result<Stream> {
    match text {
        "geo" | "geometry" => Ok(Stream::Geometry),
        "app" | "appearance" => Ok(Stream::Appearance),
        other => bail!("unknown stream {other:?} (expected geo or app)"),
    }
}

/// Curvature importance per trajectory: weight the snapshot of trajectory
/// tips and join back by id, defaulting absentees to 1.
fn hessian_importance(lineages: &[Lineage], k: usize) -> Result<Vec<f64>> {
    if lineages.len() <= k {
        bail!(
            "curvature weighting needs more than {k} trajectories, archive holds {}",
            lineages.len()
        );
    }
    let records = lineages
        .iter()
        .filter_map(|l| l.states.last().map(|(_, rec)| rec.clone()))
        .collect();
    let tips = Snapshot::new(0, "tips", records);
    let h = median_nn_distance(&tips).context("estimating the bandwidth")?;
    let field = laplacian_density_weights(&tips, k, h).context("weighting trajectories")?;
    if field.uniform_fallback {
        eprintln!("warning: degenerate tip geometry, weights fell back to uniform");
    }
    let lookup = field.lookup();
    Ok(lineages.iter().map(|l| lookup.get(&l.id).copied().unwrap_or(1.0)).collect())
}

pub fn run(args: &TrainArgs, seed: u64, file_cfg: &FileConfig) -> Result<()> {
    let stream = parse_stream(&args.stream)?;
    let lineages = load_lineages(&args.lineages)
        .with_context(|| format!("reading archive {}", args.lineages.display()))?;

    let importance = match args.weights.as_str() {
        "uniform" => vec![1.0; lineages.len()],
        "hessian" => hessian_importance(&lineages, args.k)?,
        other => bail!("unknown weighting {other:?} (expected hessian or uniform)"),
    };

    let model_cfg = match args.model.as_str() {
        "full" => ModelConfig::for_stream(stream),
        "tiny" => ModelConfig::tiny(),
        other => bail!("unknown model size {other:?} (expected full or tiny)"),
    };

    let mut cfg = TrainConfig::for_stream(stream, args.steps, seed);
    let t = &file_cfg.train;
    if let Some(lr) = t.lr {
        cfg.lr = lr;
    }
    if let Some(alpha) = t.alpha {
        cfg.alpha = alpha;
    }
    if let Some(ramp) = t.ramp {
        cfg.ramp = Some(ramp);
    }
    if let Some(frac) = t.coarse_fraction {
        cfg.coarse_fraction = frac;
    }
    if let Some(every) = t.checkpoint_every {
        cfg.checkpoint_every = every;
    }
    if let Some(frozen) = t.flow_frozen {
        cfg.flow_frozen = frozen;
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    cfg.out_dir = Some(args.out.clone());

    let mut model =
        StreamVae::new(stream, model_cfg, seed).context("initializing the model")?;
    println!(
        "training the {} stream: {} trajectories, {} parameters, {} steps",
        stream.name(),
        lineages.len(),
        model.params.param_count(),
        args.steps
    );

    let report = train(&mut model, &lineages, &importance, &cfg).context("training")?;
    if let Some(step) = report.diverged_at {
        let kept = match (&report.checkpoint, report.last_saved_step) {
            (Some(path), Some(saved)) => {
                format!("; kept the step-{saved} checkpoint at {}", path.display())
            }
            _ => String::new(),
        };
        return Err(NumericalFailure(format!(
            "loss stopped being finite at step {step}{kept}"
        ))
        .into());
    }

    let first = report.rows.first().map(|r| r.parts.total);
    match (first, report.checkpoint.as_ref()) {
        (Some(first), Some(ckpt)) => println!(
            "loss {first:.4} -> {:.4}; checkpoint {}",
            report.final_loss,
            ckpt.display()
        ),
        _ => println!("final loss {:.4}", report.final_loss),
    }
    Ok(())
}
