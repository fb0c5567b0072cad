//! `track`: link a snapshot series into per-record trajectories and save
//! them as a binary archive.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use resplat_data::{build_lineages, save_lineages, LineageTruth, TrackingMode};

use super::{read_snapshot_series, TRUTH_FILE};

#[derive(Args, Debug)]
pub struct TrackArgs {
    /// Directory holding the .ply snapshot series
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output archive path
    #[arg(long)]
    pub out: PathBuf,
    /// Linking mode: auto, truth, or match
    #[arg(long, default_value = "auto")]
    pub mode: String,
    /// Acceptance distance for match mode, in units of the median spacing
    #[arg(long)]
    pub theta: Option<f64>,
}

pub fn run(args: &TrackArgs) -> Result<()> {
    let snapshots = read_snapshot_series(&args.input)?;
    let truth_path = args.input.join(TRUTH_FILE);

    let load_truth = || -> Result<LineageTruth> {
        let text = std::fs::read_to_string(&truth_path)
            .with_context(|| format!("reading {}", truth_path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", truth_path.display()))
    };

    let truth = match args.mode.as_str() {
        "truth" => {
            if !truth_path.exists() {
                bail!(
                    "truth mode needs {} next to the snapshots; raw splat series \
                     carry no stable ids, use --mode match",
                    truth_path.display()
                );
            }
            Some(load_truth()?)
        }
        "auto" => {
            if truth_path.exists() {
                Some(load_truth()?)
            } else {
                None
            }
        }
        "match" => None,
        other => bail!("unknown mode {other:?} (expected auto, truth, or match)"),
    };

    let mode = match &truth {
        Some(t) => TrackingMode::Truth(t),
        None => TrackingMode::Matcher { theta: args.theta },
    };
    let mode_name = if truth.is_some() { "birth records" } else { "nearest-feature matching" };

    let lineages = build_lineages(&snapshots, mode).context("linking trajectories")?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    save_lineages(&args.out, &lineages).context("writing the archive")?;

    let dead = lineages.iter().filter(|l| l.dead).count();
    println!(
        "linked {} trajectories ({dead} ended early) via {mode_name} -> {}",
        lineages.len(),
        args.out.display()
    );
    Ok(())
}
