//! `extrapolate`: roll trained stream models forward to synthesize finer
//! resolution levels beyond the archive.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use resplat_core::write_ply;
use resplat_data::load_lineages;
use resplat_model::{extrapolate, ExtrapolationPlan, SelectionWeights, StreamVae};
use serde_json::json;

use super::read_weights_csv;
use crate::config::FileConfig;

#[derive(Args, Debug)]
pub struct ExtrapolateArgs {
    /// Trajectory archive to extend
    #[arg(long)]
    pub lineages: PathBuf,
    /// Geometry-stream checkpoint
    #[arg(long)]
    pub geo_ckpt: PathBuf,
    /// Appearance-stream checkpoint
    #[arg(long)]
    pub app_ckpt: PathBuf,
    /// How many levels to synthesize
    #[arg(long, default_value_t = 1)]
    pub plus: usize,
    /// Share of live trajectories refined per level
    #[arg(long, default_value_t = 1.0)]
    pub frac: f64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Refinement targeting: uniform or curvature
    #[arg(long, default_value = "uniform")]
    pub select: String,
    /// Target by precomputed id,weight CSV instead
    #[arg(long)]
    pub weights_csv: Option<PathBuf>,
    /// Neighbors per density estimate for curvature targeting
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Kernel bandwidth as a multiple of the median spacing (curvature)
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth_scale: f64,
    /// Probability both exist logits must reach for acceptance
    #[arg(long)]
    pub exist_threshold: Option<f64>,
    /// Opacity logit below which merged records become prune candidates
    #[arg(long)]
    pub opacity_floor: Option<f64>,
    /// Largest share of the merged scene pruning may remove per level
    #[arg(long)]
    pub max_prune: Option<f64>,
}

pub fn run(args: &ExtrapolateArgs, file_cfg: &FileConfig) -> Result<()> {
    let mut lineages = load_lineages(&args.lineages)
        .with_context(|| format!("reading archive {}", args.lineages.display()))?;
    let input_count = lineages.len();

    let geo = StreamVae::load(&args.geo_ckpt)
        .with_context(|| format!("loading {}", args.geo_ckpt.display()))?;
    let app = StreamVae::load(&args.app_ckpt)
        .with_context(|| format!("loading {}", args.app_ckpt.display()))?;

    let defaults = ExtrapolationPlan::default();
    let e = &file_cfg.extrapolate;
    let plan = ExtrapolationPlan {
        steps: args.plus,
        fraction: args.frac,
        exist_threshold: args
            .exist_threshold
            .or(e.exist_threshold)
            .unwrap_or(defaults.exist_threshold),
        opacity_floor: args.opacity_floor.or(e.opacity_floor).unwrap_or(defaults.opacity_floor),
        max_prune_fraction: args
            .max_prune
            .or(e.max_prune_fraction)
            .unwrap_or(defaults.max_prune_fraction),
    };

    let field = args.weights_csv.as_deref().map(read_weights_csv).transpose()?;
    let selection = match (&field, args.select.as_str()) {
        (Some(f), _) => SelectionWeights::Field(f),
        (None, "uniform") => SelectionWeights::Uniform,
        (None, "curvature") => {
            SelectionWeights::Curvature { k: args.k, bandwidth_scale: args.bandwidth_scale }
        }
        (None, other) => bail!("unknown targeting {other:?} (expected uniform or curvature)"),
    };

    let outcome = extrapolate(&mut lineages, &plan, &geo, &app, &selection)
        .context("rolling the models forward")?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut outputs = Vec::new();
    for (i, snap) in outcome.snapshots.iter().enumerate() {
        let path = args.out.join(format!("plus_{:02}.ply", i + 1));
        write_ply(&path, snap).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path.display().to_string());
    }
    for report in &outcome.reports {
        if report.no_accepted_warning {
            eprintln!(
                "warning: level {} accepted no predictions; the scene passed through unchanged",
                report.step_index
            );
        }
    }

    let report_json = json!({
        "input_count": input_count,
        "fraction": plan.fraction,
        "steps": outcome.reports,
        "outputs": outputs,
    });
    let report_path = args.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report_json)?)
        .with_context(|| format!("writing {}", report_path.display()))?;

    let last = outcome.reports.last().expect("at least one level");
    println!(
        "synthesized {} levels ({} -> {} records) in {:.1} ms total -> {}",
        outcome.snapshots.len(),
        input_count,
        last.output_count,
        outcome.reports.iter().map(|r| r.latency_ms).sum::<f64>(),
        args.out.display()
    );
    Ok(())
}
