//! `report`: merge per-scene evaluation tables and summarize wins and the
//! median improvement.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use crate::eval::{write_bar_chart, EvalReport};

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Per-scene CSV tables to merge
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Write the merged table as CSV
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// Write the merged table as an SVG bar chart
    #[arg(long)]
    pub out_svg: Option<PathBuf>,
}

pub fn run(args: &ReportArgs) -> Result<()> {
    let reports = args
        .inputs
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            EvalReport::from_csv(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = EvalReport::merge(&reports)?;

    print!("{}", merged.render_text());
    println!(
        "{} of {} scenes improved on {}; median improvement {:.2}%",
        merged.wins(),
        merged.rows.len(),
        merged.baseline_method(),
        merged.median_improvement()
    );

    if let Some(path) = &args.out_csv {
        std::fs::write(path, merged.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
        println!("table -> {}", path.display());
    }
    if let Some(path) = &args.out_svg {
        write_bar_chart(path, &merged)?;
        println!("chart -> {}", path.display());
    }
    Ok(())
}
