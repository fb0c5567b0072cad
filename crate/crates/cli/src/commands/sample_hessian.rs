//! `sample-hessian`: compute per-record importance weights from local
//! density curvature or recorded densification counts.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use resplat_core::Snapshot;
use resplat_data::{
    densify_count_weights, laplacian_density_weights, load_lineages, median_nn_distance,
    select_topk, ImportanceField,
};

use super::{read_single_snapshot, write_weights_csv};

#[derive(Args, Debug)]
pub struct SampleHessianArgs {
    /// Input: a .ply snapshot (laplacian, uniform) or a trajectory archive
    /// (densify-count)
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Weighting method: laplacian, densify-count, or uniform
    #[arg(long, default_value = "laplacian")]
    pub method: String,
    /// Neighbors per density estimate (laplacian)
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Kernel bandwidth in scene units (laplacian); median spacing by default
    #[arg(long)]
    pub h: Option<f64>,
    /// Birth-counting radius in scene units (densify-count); median tip
    /// spacing by default
    #[arg(long)]
    pub radius: Option<f64>,
    /// Also report the ids of the heaviest share, e.g. 0.1 for the top tenth
    #[arg(long)]
    pub frac: Option<f64>,
    /// Output weights CSV
    #[arg(long)]
    pub out: PathBuf,
}

fn tips_snapshot(lineages: &[resplat_data::Lineage]) -> Snapshot {
    let records = lineages
        .iter()
        .filter_map(|l| l.states.last().map(|(_, rec)| rec.clone()))
        .collect();
    Snapshot::new(0, "tips", records)
}

pub fn run(args: &SampleHessianArgs) -> Result<()> {
    let field: ImportanceField = match args.method.as_str() {
        "laplacian" => {
            let snap = read_single_snapshot(&args.input)?;
            let h = match args.h {
                Some(h) => h,
                None => median_nn_distance(&snap).context("estimating the bandwidth")?,
            };
            let field =
                laplacian_density_weights(&snap, args.k, h).context("weighting records")?;
            println!("bandwidth {h:.6} over {} records", snap.len());
            field
        }
        "densify-count" => {
            let lineages = load_lineages(&args.input)
                .with_context(|| format!("reading archive {}", args.input.display()))?;
            let tips = tips_snapshot(&lineages);
            let radius = match args.radius {
                Some(r) => r,
                None => median_nn_distance(&tips).context("estimating the radius")?,
            };
            let field =
                densify_count_weights(&lineages, radius).context("weighting trajectories")?;
            println!("radius {radius:.6} over {} trajectories", lineages.len());
            field
        }
        "uniform" => {
            let snap = read_single_snapshot(&args.input)?;
            ImportanceField::uniform(snap.gaussians.iter().map(|g| g.id).collect())
        }
        other => bail!("unknown method {other:?} (expected laplacian, densify-count, or uniform)"),
    };

    if field.uniform_fallback {
        eprintln!("warning: degenerate input, weights fell back to uniform");
    }
    write_weights_csv(&args.out, &field)?;

    let mut line = format!(
        "wrote {} {} weights -> {}",
        field.len(),
        field.method,
        args.out.display()
    );
    if let Some(frac) = args.frac {
        let top = select_topk(&field, frac).context("selecting the heaviest share")?;
        line.push_str(&format!("; top {:.1}% = {} ids", 100.0 * frac, top.len()));
    }
    println!("{line}");
    Ok(())
}
