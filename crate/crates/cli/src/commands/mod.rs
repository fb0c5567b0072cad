//! Subcommand implementations plus the file-format helpers they share.

pub mod eval_cmd;
pub mod extrapolate;
pub mod gradcheck;
pub mod report;
pub mod sample_hessian;
pub mod simulate;
pub mod track;
pub mod train;

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use resplat_core::{read_ply, Snapshot};
use resplat_data::ImportanceField;

/// Name of the per-snapshot record-id sidecar written next to a simulated
/// snapshot series. Splat files renumber records on read, so stable ids
/// travel separately.
pub const IDS_SIDECAR: &str = "ids.json";

/// Name of the ground-truth birth-record file in a simulated series.
pub const TRUTH_FILE: &str = "lineage.json";

/// Marker for failures caused by non-finite numbers; the binary maps any
/// error chain containing one to its numerical-failure exit code.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// All `.ply` snapshots in a directory, ordered by file name. Step indices
/// are reassigned to list positions and labels to file stems; when an id
/// sidecar is present the original record ids are restored.
pub fn read_snapshot_series(dir: &Path) -> Result<Vec<Snapshot>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading snapshot directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .collect();
    if paths.is_empty() {
        bail!("no .ply snapshots in {}", dir.display());
    }
    paths.sort();

    let mut snapshots = Vec::with_capacity(paths.len());
    for (i, path) in paths.iter().enumerate() {
        let mut snap = read_ply(path).with_context(|| format!("reading {}", path.display()))?;
        snap.step_index = i;
        snap.label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        snapshots.push(snap);
    }

    let sidecar = dir.join(IDS_SIDECAR);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar)
            .with_context(|| format!("reading id sidecar {}", sidecar.display()))?;
        let ids: Vec<Vec<u32>> = serde_json::from_str(&text)
            .with_context(|| format!("parsing id sidecar {}", sidecar.display()))?;
        if ids.len() != snapshots.len() {
            bail!(
                "id sidecar covers {} snapshots but the directory holds {}",
                ids.len(),
                snapshots.len()
            );
        }
        for (snap, snap_ids) in snapshots.iter_mut().zip(&ids) {
            if snap_ids.len() != snap.len() {
                bail!(
                    "id sidecar lists {} records for step {} but the file holds {}",
                    snap_ids.len(),
                    snap.step_index,
                    snap.len()
                );
            }
            for (g, &id) in snap.gaussians.iter_mut().zip(snap_ids) {
                g.id = id;
            }
        }
    }
    Ok(snapshots)
}

/// Read one `.ply` snapshot, labeling it with the file stem.
pub fn read_single_snapshot(path: &Path) -> Result<Snapshot> {
    let mut snap = read_ply(path).with_context(|| format!("reading {}", path.display()))?;
    snap.label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(snap)
}

/// Write an importance field as `id,weight` CSV.
pub fn write_weights_csv(path: &Path, field: &ImportanceField) -> Result<()> {
    let mut out = String::from("id,weight\n");
    for (id, w) in field.ids.iter().zip(&field.weights) {
        let _ = writeln!(out, "{id},{w}");
    }
    std::fs::write(path, out).with_context(|| format!("writing weights {}", path.display()))?;
    Ok(())
}

/// Read an `id,weight` CSV back into an importance field.
pub fn read_weights_csv(path: &Path) -> Result<ImportanceField> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading weights {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty weights file")?;
    if header != "id,weight" {
        bail!("weights header must be id,weight, got {header:?}");
    }
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (id, w) = line
            .split_once(',')
            .with_context(|| format!("bad weights row {line:?}"))?;
        ids.push(id.parse::<u32>().with_context(|| format!("bad id in {line:?}"))?);
        weights.push(w.parse::<f64>().with_context(|| format!("bad weight in {line:?}"))?);
    }
    if ids.is_empty() {
        bail!("weights file {} has no rows", path.display());
    }
    Ok(ImportanceField { ids, weights, method: "csv".into(), uniform_fallback: false })
}
