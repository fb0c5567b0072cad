//! Per-Gaussian trajectories across snapshots, and their padded batch form.
//!
//! Trajectories come either from a recorded parent map or from a greedy
//! nearest-neighbor matcher over normalized features. Batches are left-padded
//! to a common length with the final visible slot zeroed as the prediction
//! target.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use resplat_autodiff::Tensor;
use resplat_core::{GaussianRecord, Snapshot, APPEARANCE_DIM, GEOMETRY_DIM, RECORD_DIM};

use crate::error::DataError;
use crate::sim::LineageTruth;

/// Relative weight of the log-scale feature group in the matcher metric.
const MATCH_SCALE_WEIGHT: f64 = 0.25;
/// Relative weight of the color feature group in the matcher metric.
const MATCH_COLOR_WEIGHT: f64 = 0.25;
/// Default acceptance threshold, as a fraction of the median nearest-neighbor
/// distance among the earlier snapshot's normalized features.
const MATCH_THETA_FRAC: f64 = 0.5;

const ARCHIVE_MAGIC: &[u8; 4] = b"GLIN";
const ARCHIVE_VERSION: u32 = 1;

/// One Gaussian's trajectory: a contiguous run of per-step states.
#[derive(Debug, Clone)]
pub struct Lineage {
    /// Identifier of the most recent state's record.
    pub id: u32,
    /// Id of the ancestor this trajectory branched from, if any.
    pub parent: Option<u32>,
    /// Step index at which the trajectory's own identity first appears.
    pub birth_step: usize,
    /// `(step_index, record)` pairs, sorted and contiguous in step.
    pub states: Vec<(usize, GaussianRecord)>,
    /// True when the trajectory ends before the final snapshot.
    pub dead: bool,
}

impl Lineage {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last_record(&self) -> &GaussianRecord {
        &self.states.last().expect("lineages hold at least one state").1
    }

    fn assert_contiguous(&self) {
        for pair in self.states.windows(2) {
            debug_assert_eq!(pair[1].0, pair[0].0 + 1, "lineage states must be contiguous");
        }
    }
}

/// How trajectories are associated across snapshots.
#[derive(Debug, Clone, Copy)]
pub enum TrackingMode<'a> {
    /// Follow a recorded parent map; births copy the parent's history.
    Truth(&'a LineageTruth),
    /// Greedy nearest-neighbor matching on normalized features. `theta` is
    /// the acceptance threshold in normalized feature distance; `None`
    /// derives it from the earlier snapshot's spacing.
    Matcher { theta: Option<f64> },
}

/// Build one trajectory per surviving identity across the snapshots.
pub fn build_lineages(
    snapshots: &[Snapshot],
    mode: TrackingMode,
) -> Result<Vec<Lineage>, DataError> {
    if snapshots.is_empty() {
        return Err(DataError::Config("no snapshots to track".into()));
    }
    for s in snapshots {
        if s.is_empty() {
            return Err(DataError::Format(format!("snapshot {} is empty", s.step_index)));
        }
    }
    let mut lineages = match mode {
        TrackingMode::Truth(truth) => lineages_from_truth(snapshots, truth)?,
        TrackingMode::Matcher { theta } => lineages_by_matching(snapshots, theta),
    };
    let final_step = snapshots.last().expect("non-empty").step_index;
    for lin in &mut lineages {
        lin.dead = lin.states.last().map(|(s, _)| *s) != Some(final_step);
        lin.assert_contiguous();
    }
    Ok(lineages)
}

fn lineages_from_truth(
    snapshots: &[Snapshot],
    truth: &LineageTruth,
) -> Result<Vec<Lineage>, DataError> {
    let mut lineages: Vec<Lineage> = Vec::new();
    // Latest lineage index per live Gaussian id.
    let mut active: HashMap<u32, usize> = HashMap::new();

    for (i, snap) in snapshots.iter().enumerate() {
        for g in &snap.gaussians {
            if let Some(&idx) = active.get(&g.id) {
                lineages[idx].states.push((snap.step_index, g.clone()));
                continue;
            }
            if i == 0 {
                lineages.push(Lineage {
                    id: g.id,
                    parent: None,
                    birth_step: snap.step_index,
                    states: vec![(snap.step_index, g.clone())],
                    dead: false,
                });
            } else {
                let event = truth.birth_of(g.id).ok_or_else(|| {
                    DataError::Format(format!(
                        "id {} appears at step {} without a recorded birth",
                        g.id, snap.step_index
                    ))
                })?;
                let parent_idx = *active.get(&event.parent).ok_or_else(|| {
                    DataError::Format(format!(
                        "birth of {} references unknown parent {}",
                        g.id, event.parent
                    ))
                })?;
                // The child inherits the parent's earlier history so every
                // trajectory spans the full sequence it descends from.
                let prefix: Vec<(usize, GaussianRecord)> = lineages[parent_idx]
                    .states
                    .iter()
                    .filter(|(s, _)| *s < snap.step_index)
                    .cloned()
                    .collect();
                let mut states = prefix;
                states.push((snap.step_index, g.clone()));
                lineages.push(Lineage {
                    id: g.id,
                    parent: Some(event.parent),
                    birth_step: snap.step_index,
                    states,
                    dead: false,
                });
            }
            active.insert(g.id, lineages.len() - 1);
        }
        // Ids absent from this snapshot stop being matchable parents.
        let present: std::collections::HashSet<u32> =
            snap.gaussians.iter().map(|g| g.id).collect();
        active.retain(|id, _| present.contains(id));
    }
    Ok(lineages)
}

/// Per-dimension standardized features with group weights applied:
/// position x1, log-scale and color down-weighted.
fn normalized_features(records: &[&GaussianRecord]) -> Vec<[f64; 9]> {
    let raw: Vec<[f64; 9]> = records
        .iter()
        .map(|g| {
            [
                g.position[0] as f64,
                g.position[1] as f64,
                g.position[2] as f64,
                g.log_scale[0] as f64,
                g.log_scale[1] as f64,
                g.log_scale[2] as f64,
                g.color[0] as f64,
                g.color[1] as f64,
                g.color[2] as f64,
            ]
        })
        .collect();
    let n = raw.len() as f64;
    let mut mean = [0.0f64; 9];
    for f in &raw {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = [0.0f64; 9];
    for f in &raw {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt().max(1e-12)).collect();
    let weights = [
        1.0,
        1.0,
        1.0,
        MATCH_SCALE_WEIGHT,
        MATCH_SCALE_WEIGHT,
        MATCH_SCALE_WEIGHT,
        MATCH_COLOR_WEIGHT,
        MATCH_COLOR_WEIGHT,
        MATCH_COLOR_WEIGHT,
    ];
    raw.iter()
        .map(|f| {
            let mut out = [0.0f64; 9];
            for i in 0..9 {
                out[i] = (f[i] - mean[i]) / std[i] * weights[i];
            }
            out
        })
        .collect()
}

fn feat_dist(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn lineages_by_matching(snapshots: &[Snapshot], theta: Option<f64>) -> Vec<Lineage> {
    let first = &snapshots[0];
    let mut lineages: Vec<Lineage> = first
        .gaussians
        .iter()
        .map(|g| Lineage {
            id: g.id,
            parent: None,
            birth_step: first.step_index,
            states: vec![(first.step_index, g.clone())],
            dead: false,
        })
        .collect();
    // Lineage index per trajectory live at the previous step.
    let mut live: Vec<usize> = (0..lineages.len()).collect();

    for snap in &snapshots[1..] {
        let old_records: Vec<GaussianRecord> =
            live.iter().map(|&idx| lineages[idx].last_record().clone()).collect();
        let new_records: Vec<&GaussianRecord> = snap.gaussians.iter().collect();
        let n_old = old_records.len();

        // Standardize over the union so both sides share one scale.
        let mut all: Vec<&GaussianRecord> = old_records.iter().collect();
        all.extend(new_records.iter().copied());
        let feats = normalized_features(&all);
        let (old_feats, new_feats) = feats.split_at(n_old);

        let theta = theta.unwrap_or_else(|| {
            median_nn_distance_feats(old_feats).map_or(f64::INFINITY, |m| MATCH_THETA_FRAC * m)
        });

        // Greedy: cheapest pairs first, ties broken by ids for determinism.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n_old * new_feats.len());
        for (i, of) in old_feats.iter().enumerate() {
            for (j, nf) in new_feats.iter().enumerate() {
                let d = feat_dist(of, nf);
                if d <= theta {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite distances")
                .then_with(|| old_records[a.1].id.cmp(&old_records[b.1].id))
                .then_with(|| new_records[a.2].id.cmp(&new_records[b.2].id))
        });

        let mut old_matched = vec![false; n_old];
        let mut new_matched = vec![usize::MAX; new_records.len()];
        for &(_, i, j) in &pairs {
            if !old_matched[i] && new_matched[j] == usize::MAX {
                old_matched[i] = true;
                new_matched[j] = i;
            }
        }

        let mut next_live = Vec::with_capacity(snap.len());
        for (j, g) in snap.gaussians.iter().enumerate() {
            if new_matched[j] != usize::MAX {
                let idx = live[new_matched[j]];
                lineages[idx].states.push((snap.step_index, g.clone()));
                lineages[idx].id = g.id;
                next_live.push(idx);
            } else {
                // Newly appeared: adopt the history of the nearest matched
                // predecessor, or start fresh when nothing matched.
                let ancestor = old_feats
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| old_matched[*i])
                    .map(|(i, of)| (feat_dist(of, &new_feats[j]), i))
                    .min_by(|a, b| {
                        a.0.partial_cmp(&b.0)
                            .expect("finite distances")
                            .then_with(|| old_records[a.1].id.cmp(&old_records[b.1].id))
                    });
                let (parent, prefix) = match ancestor {
                    Some((_, i)) => {
                        let anc = &lineages[live[i]];
                        let prefix: Vec<(usize, GaussianRecord)> = anc
                            .states
                            .iter()
                            .filter(|(s, _)| *s < snap.step_index)
                            .cloned()
                            .collect();
                        (Some(old_records[i].id), prefix)
                    }
                    None => (None, Vec::new()),
                };
                let mut states = prefix;
                states.push((snap.step_index, g.clone()));
                lineages.push(Lineage {
                    id: g.id,
                    parent,
                    birth_step: snap.step_index,
                    states,
                    dead: false,
                });
                next_live.push(lineages.len() - 1);
            }
        }
        live = next_live;
    }
    lineages
}

/// Median distance to the nearest other feature vector; `None` below 2 rows.
fn median_nn_distance_feats(feats: &[[f64; 9]]) -> Option<f64> {
    if feats.len() < 2 {
        return None;
    }
    let mut nn: Vec<f64> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            feats
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, g)| feat_dist(f, g))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Some(nn[nn.len() / 2])
}

/// Padded training batch over a set of trajectories.
#[derive(Debug, Clone)]
pub struct LineageBatch {
    /// `[B, T, 11]` position, rotation, log-scale, exist.
    pub geometry: Tensor,
    /// `[B, T, 50]` spherical harmonics, rgb, opacity, exist.
    pub appearance: Tensor,
    /// `[B * T]` row-major validity; padded slots are false.
    pub mask: Vec<bool>,
    /// Per-row index of the prediction slot (always `T - 1` after left
    /// padding). The input tensors hold zeros there.
    pub target_index: Vec<usize>,
    /// `[B, 11]` ground truth for the prediction slot.
    pub target_geometry: Tensor,
    /// `[B, 50]` ground truth for the prediction slot.
    pub target_appearance: Tensor,
    /// `[B * T]` step index per slot for positional encoding; padded slots 0.
    pub step_index: Vec<usize>,
    /// Per-row importance weight, normalized to mean 1.
    pub hessian_weight: Vec<f64>,
    /// Latest Gaussian id per row.
    pub ids: Vec<u32>,
    /// Trajectories dropped for having fewer than two states.
    pub skipped: usize,
}

impl LineageBatch {
    pub fn batch(&self) -> usize {
        self.target_index.len()
    }

    pub fn time(&self) -> usize {
        self.geometry.shape()[1]
    }
}

/// Pack trajectories into a left-padded batch of length `max_time`. `weights`
/// carries one importance value per input trajectory; weights of skipped
/// (single-state) trajectories are dropped before mean-1 normalization.
pub fn tensorize(
    lineages: &[Lineage],
    max_time: usize,
    weights: &[f64],
) -> Result<LineageBatch, DataError> {
    if weights.len() != lineages.len() {
        return Err(DataError::Config(format!(
            "{} weights for {} lineages",
            weights.len(),
            lineages.len()
        )));
    }
    let kept: Vec<(&Lineage, f64)> = lineages
        .iter()
        .zip(weights)
        .filter(|(l, _)| l.len() >= 2)
        .map(|(l, w)| (l, *w))
        .collect();
    let skipped = lineages.len() - kept.len();
    if kept.is_empty() {
        return Err(DataError::Config("no trajectories with at least two states".into()));
    }
    let longest = kept.iter().map(|(l, _)| l.len()).max().expect("non-empty");
    if max_time < longest {
        return Err(DataError::Config(format!(
            "max_time {max_time} is shorter than the longest trajectory ({longest})"
        )));
    }
    if kept.iter().any(|(_, w)| !w.is_finite() || *w <= 0.0) {
        return Err(DataError::Config("importance weights must be positive and finite".into()));
    }

    let b = kept.len();
    let t = max_time;
    let mut geometry = vec![0.0f64; b * t * GEOMETRY_DIM];
    let mut appearance = vec![0.0f64; b * t * APPEARANCE_DIM];
    let mut mask = vec![false; b * t];
    let mut step_index = vec![0usize; b * t];
    let mut target_geometry = vec![0.0f64; b * GEOMETRY_DIM];
    let mut target_appearance = vec![0.0f64; b * APPEARANCE_DIM];
    let mut target_index = Vec::with_capacity(b);
    let mut ids = Vec::with_capacity(b);

    for (row, (lin, _)) in kept.iter().enumerate() {
        let pad = t - lin.len();
        for (k, (step, rec)) in lin.states.iter().enumerate() {
            let slot = pad + k;
            mask[row * t + slot] = true;
            step_index[row * t + slot] = *step;
            let last = k + 1 == lin.len();
            if last {
                // The prediction slot: inputs stay zero, truth goes to the
                // target tensors.
                for (d, v) in rec.geometry_features().iter().enumerate() {
                    target_geometry[row * GEOMETRY_DIM + d] = *v as f64;
                }
                for (d, v) in rec.appearance_features().iter().enumerate() {
                    target_appearance[row * APPEARANCE_DIM + d] = *v as f64;
                }
                target_index.push(slot);
            } else {
                for (d, v) in rec.geometry_features().iter().enumerate() {
                    geometry[(row * t + slot) * GEOMETRY_DIM + d] = *v as f64;
                }
                for (d, v) in rec.appearance_features().iter().enumerate() {
                    appearance[(row * t + slot) * APPEARANCE_DIM + d] = *v as f64;
                }
            }
        }
        ids.push(lin.id);
    }

    let raw: Vec<f64> = kept.iter().map(|(_, w)| *w).collect();
    let hessian_weight = normalize_mean_one(&raw);

    Ok(LineageBatch {
        geometry: Tensor::new(vec![b, t, GEOMETRY_DIM], geometry),
        appearance: Tensor::new(vec![b, t, APPEARANCE_DIM], appearance),
        mask,
        target_index,
        target_geometry: Tensor::new(vec![b, GEOMETRY_DIM], target_geometry),
        target_appearance: Tensor::new(vec![b, APPEARANCE_DIM], target_appearance),
        step_index,
        hessian_weight,
        ids,
        skipped,
    })
}

/// Pack trajectories for next-state prediction: every recorded state is a
/// visible input and one extra masked query slot is appended with the step
/// index that follows each trajectory's last state. Target tensors are zero
/// (there is no ground truth yet).
pub fn tensorize_extend(lineages: &[Lineage], max_time: usize) -> Result<LineageBatch, DataError> {
    if lineages.is_empty() {
        return Err(DataError::Config("no trajectories to extend".into()));
    }
    let longest = lineages.iter().map(|l| l.len()).max().expect("non-empty");
    if max_time < longest + 1 {
        return Err(DataError::Config(format!(
            "max_time {max_time} cannot fit {longest} states plus a query slot"
        )));
    }
    let b = lineages.len();
    let t = max_time;
    let mut geometry = vec![0.0f64; b * t * GEOMETRY_DIM];
    let mut appearance = vec![0.0f64; b * t * APPEARANCE_DIM];
    let mut mask = vec![false; b * t];
    let mut step_index = vec![0usize; b * t];
    let mut target_index = Vec::with_capacity(b);
    let mut ids = Vec::with_capacity(b);

    for (row, lin) in lineages.iter().enumerate() {
        if lin.is_empty() {
            return Err(DataError::Config("cannot extend an empty trajectory".into()));
        }
        let pad = t - (lin.len() + 1);
        for (k, (step, rec)) in lin.states.iter().enumerate() {
            let slot = pad + k;
            mask[row * t + slot] = true;
            step_index[row * t + slot] = *step;
            for (d, v) in rec.geometry_features().iter().enumerate() {
                geometry[(row * t + slot) * GEOMETRY_DIM + d] = *v as f64;
            }
            for (d, v) in rec.appearance_features().iter().enumerate() {
                appearance[(row * t + slot) * APPEARANCE_DIM + d] = *v as f64;
            }
        }
        // The query slot: masked in (valid), zero features, next step index.
        mask[row * t + t - 1] = true;
        step_index[row * t + t - 1] = lin.states.last().expect("non-empty").0 + 1;
        target_index.push(t - 1);
        ids.push(lin.id);
    }

    Ok(LineageBatch {
        geometry: Tensor::new(vec![b, t, GEOMETRY_DIM], geometry),
        appearance: Tensor::new(vec![b, t, APPEARANCE_DIM], appearance),
        mask,
        target_index,
        target_geometry: Tensor::zeros(vec![b, GEOMETRY_DIM]),
        target_appearance: Tensor::zeros(vec![b, APPEARANCE_DIM]),
        step_index,
        hessian_weight: vec![1.0; b],
        ids,
        skipped: 0,
    })
}

/// Rescale positive weights to mean exactly 1. Identical inputs short-circuit
/// to exact ones so uniform weighting introduces no rounding at all.
pub fn normalize_mean_one(weights: &[f64]) -> Vec<f64> {
    if weights.iter().all(|w| w.to_bits() == weights[0].to_bits()) {
        return vec![1.0; weights.len()];
    }
    let sum: f64 = weights.iter().sum();
    let factor = weights.len() as f64 / sum;
    weights.iter().map(|w| w * factor).collect()
}

/// Write trajectories as a versioned binary archive plus a JSON id sidecar
/// at `<path>.ids.json`.
pub fn save_lineages(path: &Path, lineages: &[Lineage]) -> Result<(), DataError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(lineages.len() as u64).to_le_bytes());
    for lin in lineages {
        buf.extend_from_slice(&lin.id.to_le_bytes());
        match lin.parent {
            Some(p) => {
                buf.push(1);
                buf.extend_from_slice(&p.to_le_bytes());
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&(lin.birth_step as u64).to_le_bytes());
        buf.push(lin.dead as u8);
        buf.extend_from_slice(&(lin.states.len() as u64).to_le_bytes());
        for (step, rec) in &lin.states {
            buf.extend_from_slice(&(*step as u64).to_le_bytes());
            buf.extend_from_slice(&rec.id.to_le_bytes());
            for v in rec.to_flat() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;

    let ids: Vec<u32> = lineages.iter().map(|l| l.id).collect();
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".ids.json");
    let json = serde_json::to_string_pretty(&ids)
        .map_err(|e| DataError::Format(format!("id sidecar: {e}")))?;
    std::fs::write(sidecar, json)?;
    Ok(())
}

/// Read an archive written by [`save_lineages`].
pub fn load_lineages(path: &Path) -> Result<Vec<Lineage>, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    let magic = cur.take(4)?;
    if magic != ARCHIVE_MAGIC {
        return Err(DataError::Format("not a lineage archive".into()));
    }
    let version = cur.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(DataError::Format(format!("unsupported archive version {version}")));
    }
    let count = cur.u64()? as usize;
    let mut lineages = Vec::with_capacity(count);
    for _ in 0..count {
        let id = cur.u32()?;
        let parent = match cur.u8()? {
            0 => None,
            1 => Some(cur.u32()?),
            other => return Err(DataError::Format(format!("bad parent flag {other}"))),
        };
        let birth_step = cur.u64()? as usize;
        let dead = cur.u8()? != 0;
        let n_states = cur.u64()? as usize;
        let mut states = Vec::with_capacity(n_states);
        for _ in 0..n_states {
            let step = cur.u64()? as usize;
            let rec_id = cur.u32()?;
            let mut flat = [0.0f32; RECORD_DIM];
            for v in &mut flat {
                *v = cur.f32()?;
            }
            states.push((step, GaussianRecord::from_flat(rec_id, &flat)));
        }
        lineages.push(Lineage { id, parent, birth_step, states, dead });
    }
    if cur.at != bytes.len() {
        return Err(DataError::Format("trailing bytes after lineage archive".into()));
    }
    Ok(lineages)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DataError> {
        if self.at + n > self.bytes.len() {
            return Err(DataError::Format("truncated lineage archive".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, SimScene};

    fn toy_lineage(id: u32, steps: &[usize]) -> Lineage {
        let states = steps
            .iter()
            .map(|&s| {
                let mut rec = GaussianRecord::zeroed(id);
                rec.position = [s as f32, id as f32, 0.5];
                rec.opacity = 0.25 * (s as f32 + 1.0);
                rec.exist = 10.0;
                (s, rec)
            })
            .collect();
        Lineage { id, parent: None, birth_step: steps[0], states, dead: false }
    }

    #[test]
    fn truth_tracking_extends_survivors_and_branches_children() {
        let scene = SimScene::sphere(21, 4, 48);
        let (snapshots, truth) = simulate(&scene).expect("valid scene");
        let lineages =
            build_lineages(&snapshots, TrackingMode::Truth(&truth)).expect("tracking succeeds");

        let final_count = snapshots.last().unwrap().len();
        let live = lineages.iter().filter(|l| !l.dead).count();
        assert_eq!(live, final_count, "one live trajectory per final Gaussian");

        for lin in &lineages {
            for pair in lin.states.windows(2) {
                assert_eq!(pair[1].0, pair[0].0 + 1, "states must be step-contiguous");
            }
            if let Some(parent) = lin.parent {
                assert_ne!(parent, lin.states.last().unwrap().1.id);
                // Children born after step 0 carry their ancestor's history.
                assert_eq!(lin.states[0].0, 0, "branched trajectories keep the full prefix");
                assert!(lin.birth_step > 0);
            }
        }
    }

    #[test]
    fn truth_tracking_rejects_unrecorded_births() {
        let scene = SimScene::sphere(22, 3, 32);
        let (snapshots, _) = simulate(&scene).expect("valid scene");
        let empty = LineageTruth::default();
        let grew = snapshots.last().unwrap().len() > snapshots[0].len();
        if grew {
            assert!(build_lineages(&snapshots, TrackingMode::Truth(&empty)).is_err());
        }
    }

    #[test]
    fn empty_snapshot_is_rejected() {
        let snapshots = vec![Snapshot::new(0, "empty", vec![])];
        assert!(build_lineages(&snapshots, TrackingMode::Matcher { theta: None }).is_err());
        assert!(build_lineages(&[], TrackingMode::Matcher { theta: None }).is_err());
    }

    #[test]
    fn matcher_is_injective_per_step() {
        let scene = SimScene::sphere(23, 4, 64);
        let (snapshots, _) = simulate(&scene).expect("valid scene");
        let lineages = build_lineages(&snapshots, TrackingMode::Matcher { theta: None })
            .expect("matching succeeds");
        for snap in &snapshots {
            let mut claimed = std::collections::HashSet::new();
            for lin in &lineages {
                if let Some((_, rec)) = lin.states.iter().find(|(s, _)| *s == snap.step_index) {
                    // A snapshot record may seed several branched histories,
                    // but each trajectory may claim at most one record per
                    // step, and live trajectories claim distinct records.
                    let count = lin.states.iter().filter(|(s, _)| *s == snap.step_index).count();
                    assert_eq!(count, 1);
                    if !lin.dead && snap.step_index == snapshots.last().unwrap().step_index {
                        assert!(
                            claimed.insert(rec.id),
                            "two live trajectories end on record {}",
                            rec.id
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn tensorize_left_pads_and_zeros_the_target_slot() {
        let lin = toy_lineage(7, &[0, 1, 2]);
        let batch = tensorize(&[lin.clone()], 4, &[1.0]).expect("fits");
        assert_eq!(batch.batch(), 1);
        assert_eq!(batch.time(), 4);
        assert_eq!(batch.mask, vec![false, true, true, true]);
        assert_eq!(batch.target_index, vec![3]);
        assert_eq!(batch.step_index, vec![0, 0, 1, 2]);

        let g = batch.geometry.data();
        // Slot 0 is padding and slot 3 is the prediction slot: both all-zero.
        for d in 0..GEOMETRY_DIM {
            assert_eq!(g[d], 0.0, "padding must be zero");
            assert_eq!(g[3 * GEOMETRY_DIM + d], 0.0, "target slot input must be zero");
        }
        // Interior slots carry the state features.
        let want = lin.states[0].1.geometry_features();
        for d in 0..GEOMETRY_DIM {
            assert_eq!(g[GEOMETRY_DIM + d], want[d] as f64);
        }
        // The target tensors carry the final state.
        let want_t = lin.states[2].1.geometry_features();
        for d in 0..GEOMETRY_DIM {
            assert_eq!(batch.target_geometry.data()[d], want_t[d] as f64);
        }
    }

    #[test]
    fn tensorize_extend_appends_a_masked_query_slot() {
        let short = toy_lineage(3, &[0, 1]);
        let long = toy_lineage(9, &[0, 1, 2]);
        let batch = tensorize_extend(&[short.clone(), long], 4).expect("fits");
        assert_eq!(batch.batch(), 2);
        assert_eq!(batch.time(), 4);
        // Row 0: pad, state 0, state 1, query. Row 1: three states then query.
        assert_eq!(&batch.mask[..4], &[false, true, true, true]);
        assert_eq!(&batch.mask[4..], &[true, true, true, true]);
        assert_eq!(batch.target_index, vec![3, 3]);
        assert_eq!(&batch.step_index[..4], &[0, 0, 1, 2]);
        assert_eq!(&batch.step_index[4..], &[0, 1, 2, 3]);

        let g = batch.geometry.data();
        // The query slot input is zero even though it is mask-visible.
        for d in 0..GEOMETRY_DIM {
            assert_eq!(g[3 * GEOMETRY_DIM + d], 0.0);
            assert_eq!(g[(4 + 3) * GEOMETRY_DIM + d], 0.0);
        }
        // The last recorded state sits immediately before the query slot.
        let want = short.states[1].1.geometry_features();
        for d in 0..GEOMETRY_DIM {
            assert_eq!(g[2 * GEOMETRY_DIM + d], want[d] as f64);
        }
        // Targets are placeholders.
        assert!(batch.target_geometry.data().iter().all(|v| *v == 0.0));

        // A max_time without room for the query slot is rejected.
        let err = tensorize_extend(&[toy_lineage(1, &[0, 1, 2, 3])], 4);
        assert!(err.is_err(), "need len + 1 slots");
    }

    #[test]
    fn tensorize_skips_single_state_trajectories() {
        let a = toy_lineage(1, &[0]);
        let b = toy_lineage(2, &[0, 1]);
        let batch = tensorize(&[a, b], 2, &[5.0, 3.0]).expect("one survivor");
        assert_eq!(batch.skipped, 1);
        assert_eq!(batch.batch(), 1);
        assert_eq!(batch.ids, vec![2]);
        // One surviving weight normalizes to exactly 1.
        assert_eq!(batch.hessian_weight, vec![1.0]);
    }

    #[test]
    fn equal_weights_normalize_to_exactly_one() {
        let lins: Vec<Lineage> = (0..3).map(|i| toy_lineage(i, &[0, 1])).collect();
        let batch = tensorize(&lins, 2, &[0.7, 0.7, 0.7]).expect("fits");
        assert_eq!(batch.hessian_weight, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn weight_pair_normalizes_to_half_and_three_halves() {
        let lins: Vec<Lineage> = (0..2).map(|i| toy_lineage(i, &[0, 1])).collect();
        let batch = tensorize(&lins, 2, &[1.0, 3.0]).expect("fits");
        assert_eq!(batch.hessian_weight, vec![0.5, 1.5]);
    }

    #[test]
    fn tensorize_rejects_short_max_time_and_bad_weights() {
        let lin = toy_lineage(0, &[0, 1, 2]);
        assert!(tensorize(&[lin.clone()], 2, &[1.0]).is_err());
        assert!(tensorize(&[lin.clone()], 3, &[]).is_err());
        assert!(tensorize(&[lin], 3, &[-1.0]).is_err());
    }

    #[test]
    fn feature_views_reassemble_the_full_record() {
        let scene = SimScene::sphere(31, 3, 16);
        let (snapshots, truth) = simulate(&scene).expect("valid scene");
        let lineages =
            build_lineages(&snapshots, TrackingMode::Truth(&truth)).expect("tracking succeeds");
        let weights = vec![1.0; lineages.len()];
        let batch = tensorize(&lineages, 4, &weights).expect("fits");

        for (row, lin) in lineages.iter().filter(|l| l.len() >= 2).enumerate() {
            let rec = &lin.states.last().unwrap().1;
            let g = &batch.target_geometry.data()[row * GEOMETRY_DIM..(row + 1) * GEOMETRY_DIM];
            let a = &batch.target_appearance.data()
                [row * APPEARANCE_DIM..(row + 1) * APPEARANCE_DIM];
            // position, rotation, log-scale from the geometry view; sh, rgb,
            // opacity from the appearance view; exist appears in both.
            let mut flat = [0.0f32; RECORD_DIM];
            flat[..3].copy_from_slice(&to_f32(&g[..3]));
            flat[3..7].copy_from_slice(&to_f32(&g[3..7]));
            flat[7..10].copy_from_slice(&to_f32(&g[7..10]));
            flat[10] = a[48] as f32;
            flat[11..14].copy_from_slice(&to_f32(&a[45..48]));
            flat[14..59].copy_from_slice(&to_f32(&a[..45]));
            assert_eq!(g[10], a[49], "exist must agree across views");
            flat[59] = g[10] as f32;
            let rebuilt = GaussianRecord::from_flat(rec.id, &flat);
            assert_eq!(rebuilt.to_flat(), rec.to_flat());
        }
    }

    fn to_f32(xs: &[f64]) -> Vec<f32> {
        xs.iter().map(|v| *v as f32).collect()
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let scene = SimScene::sphere(41, 4, 32);
        let (snapshots, truth) = simulate(&scene).expect("valid scene");
        let lineages =
            build_lineages(&snapshots, TrackingMode::Truth(&truth)).expect("tracking succeeds");

        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("lineages.bin");
        save_lineages(&path, &lineages).expect("save succeeds");
        let loaded = load_lineages(&path).expect("load succeeds");

        assert_eq!(loaded.len(), lineages.len());
        for (a, b) in lineages.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.parent, b.parent);
            assert_eq!(a.birth_step, b.birth_step);
            assert_eq!(a.dead, b.dead);
            assert_eq!(a.states.len(), b.states.len());
            for ((sa, ra), (sb, rb)) in a.states.iter().zip(&b.states) {
                assert_eq!(sa, sb);
                assert_eq!(ra.id, rb.id);
                let bits_a: Vec<u32> = ra.to_flat().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = rb.to_flat().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b, "payload must round-trip bit-exactly");
            }
        }

        let sidecar = dir.path().join("lineages.bin.ids.json");
        let ids: Vec<u32> =
            serde_json::from_str(&std::fs::read_to_string(sidecar).expect("sidecar written"))
                .expect("valid json");
        assert_eq!(ids, lineages.iter().map(|l| l.id).collect::<Vec<_>>());
    }

    #[test]
    fn corrupted_archives_are_rejected() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE").expect("write");
        assert!(load_lineages(&path).is_err());

        let lin = toy_lineage(0, &[0, 1]);
        let good = dir.path().join("good.bin");
        save_lineages(&good, &[lin]).expect("save");
        let mut bytes = std::fs::read(&good).expect("read");
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&good, &bytes).expect("rewrite");
        assert!(load_lineages(&good).is_err());
    }
}
