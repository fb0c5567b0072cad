//! `eval`: score method outputs against a ground-truth snapshot and emit a
//! comparison table.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use resplat_core::Snapshot;

use super::{read_single_snapshot, read_snapshot_series};
use crate::eval::{compare, write_bar_chart};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth .ply snapshot
    #[arg(long)]
    pub truth: PathBuf,
    /// Method output as name=dir or name=a.ply,b.ply; repeatable
    #[arg(long = "run", required = true)]
    pub runs: Vec<String>,
    /// Method name scored as the reference
    #[arg(long, default_value = "baseline")]
    pub baseline: String,
    /// Scene name for the table row
    #[arg(long, default_value = "scene")]
    pub scene: String,
    /// Write the table as CSV
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// Write the table as an SVG bar chart
    #[arg(long)]
    pub out_svg: Option<PathBuf>,
    /// Use the size-normalized score (per-direction means) instead of the
    /// training objective's sum form
    #[arg(long)]
    pub mean: bool,
}

fn load_run(spec: &str) -> Result<(String, Vec<Snapshot>)> {
    let (name, value) = spec
        .split_once('=')
        .with_context(|| format!("run {spec:?} must look like name=dir or name=a.ply,b.ply"))?;
    let as_dir = Path::new(value);
    let snapshots = if as_dir.is_dir() {
        read_snapshot_series(as_dir)?
    } else {
        value
            .split(',')
            .map(|p| read_single_snapshot(Path::new(p)))
            .collect::<Result<Vec<Snapshot>>>()?
    };
    Ok((name.to_string(), snapshots))
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let truth = read_single_snapshot(&args.truth)?;
    let runs = args.runs.iter().map(|s| load_run(s)).collect::<Result<Vec<_>>>()?;

    let start = std::time::Instant::now();
    let report = compare(&args.scene, &runs, &args.baseline, &truth, args.mean)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    print!("{}", report.render_text());
    println!(
        "scored {} columns against {} truth points in {elapsed_ms:.1} ms",
        report.columns.len(),
        truth.len()
    );

    if let Some(path) = &args.out_csv {
        std::fs::write(path, report.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
        println!("table -> {}", path.display());
    }
    if let Some(path) = &args.out_svg {
        write_bar_chart(path, &report)?;
        println!("chart -> {}", path.display());
    }
    Ok(())
}
