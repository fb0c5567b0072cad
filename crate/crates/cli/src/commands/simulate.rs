//! `simulate`: generate a synthetic densification series with ground-truth
//! birth records.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use resplat_core::write_ply;
use resplat_data::{simulate, SimScene, SurfaceShape};

use super::{IDS_SIDECAR, TRUTH_FILE};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Surface family: sphere, box, or sphere-union
    #[arg(long, default_value = "sphere")]
    pub shape: String,
    /// Number of resolution levels (snapshots)
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    /// Records seeded at the coarsest level
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    /// Sphere radius (sphere shape only)
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Box half extents as "x,y,z" (box shape only)
    #[arg(long, default_value = "1.0,0.6,0.4")]
    pub half_extents: String,
    /// Output directory for the snapshot series
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_triple(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        bail!("expected three comma-separated numbers, got {text:?}");
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.trim().parse().with_context(|| format!("bad number {p:?} in {text:?}"))?;
    }
    Ok(out)
}

pub fn run(args: &SimulateArgs, seed: u64) -> Result<()> {
    let shape = match args.shape.as_str() {
        "sphere" => SurfaceShape::Sphere { radius: args.radius },
        "box" => SurfaceShape::Cuboid { half_extents: parse_triple(&args.half_extents)? },
        "sphere-union" => SurfaceShape::SphereUnion {
            spheres: vec![([-0.8, 0.0, 0.0], 0.6), ([0.8, 0.0, 0.0], 0.5)],
        },
        other => bail!("unknown shape {other:?} (expected sphere, box, or sphere-union)"),
    };
    let thresholds =
        (0..args.steps.saturating_sub(1)).map(|t| 0.5 / 2f64.powi(t as i32)).collect();
    let scene = SimScene {
        shape,
        seed,
        steps: args.steps,
        initial_count: args.count,
        thresholds,
        split_size: None,
    };

    let (snapshots, truth) = simulate(&scene).context("running the simulator")?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut ids: Vec<Vec<u32>> = Vec::with_capacity(snapshots.len());
    for snap in &snapshots {
        let path = args.out.join(format!("step_{:02}.ply", snap.step_index));
        write_ply(&path, snap).with_context(|| format!("writing {}", path.display()))?;
        ids.push(snap.gaussians.iter().map(|g| g.id).collect());
    }
    std::fs::write(args.out.join(IDS_SIDECAR), serde_json::to_string_pretty(&ids)?)
        .context("writing the id sidecar")?;
    std::fs::write(args.out.join(TRUTH_FILE), serde_json::to_string_pretty(&truth)?)
        .context("writing the birth records")?;
    std::fs::write(args.out.join("scene.json"), serde_json::to_string_pretty(&scene)?)
        .context("writing the scene description")?;

    let counts: Vec<usize> = snapshots.iter().map(|s| s.len()).collect();
    println!(
        "simulated {} levels ({counts:?} records) into {}",
        snapshots.len(),
        args.out.display()
    );
    Ok(())
}
