//! Chamfer evaluation tables: per-scene comparisons of snapshot sequences
//! against a ground-truth point set, with CSV and SVG emission.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use resplat_core::{chamfer_distance, Snapshot, SpatialIndex};

/// Exist-logit threshold for a predicted record to count as live: logit 0 is
/// probability one half.
pub const LIVE_EXIST_MIN: f64 = 0.0;

/// Positions of the live records in a snapshot, as f64 points.
pub fn live_positions(snap: &Snapshot) -> Vec<[f64; 3]> {
    snap.gaussians
        .iter()
        .filter(|g| g.exist as f64 >= LIVE_EXIST_MIN)
        .map(|g| {
            [
                g.position[0] as f64,
                g.position[1] as f64,
                g.position[2] as f64,
            ]
        })
        .collect()
}

fn all_positions(snap: &Snapshot) -> Vec<[f64; 3]> {
    snap.gaussians
        .iter()
        .map(|g| {
            [
                g.position[0] as f64,
                g.position[1] as f64,
                g.position[2] as f64,
            ]
        })
        .collect()
}

/// Symmetric squared-nearest-neighbor distance between the live predictions
/// and the truth set. `mean` divides each direction by its set size instead
/// of summing, for cross-scene comparability; the sum form matches the
/// training objective's chamfer term exactly.
pub fn eval_chamfer(pred: &Snapshot, truth: &Snapshot, mean: bool) -> Result<f64> {
    let p = live_positions(pred);
    if p.is_empty() {
        bail!("prediction has no live records after the exist filter");
    }
    let q = all_positions(truth);
    if q.is_empty() {
        bail!("truth snapshot is empty");
    }
    if !mean {
        return Ok(chamfer_distance(&p, &q)?);
    }
    let q_index = SpatialIndex::build(&q)?;
    let p_index = SpatialIndex::build(&p)?;
    let into_q: f64 = p.iter().map(|&pt| q_index.nearest(pt).1).sum();
    let into_p: f64 = q.iter().map(|&pt| p_index.nearest(pt).1).sum();
    Ok(into_q / p.len() as f64 + into_p / q.len() as f64)
}

/// One scene's measurements across every table column.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub scene: String,
    pub values: Vec<f64>,
}

/// A method-by-step comparison table. Column names are `method/step`; the
/// method of column 0 is the baseline every improvement is measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub columns: Vec<String>,
    pub rows: Vec<EvalRow>,
}

/// Method half of a `method/step` column name.
pub fn method_of(column: &str) -> &str {
    column.split('/').next().unwrap_or(column)
}

impl EvalReport {
    /// Method name of column 0, the improvement reference.
    pub fn baseline_method(&self) -> &str {
        method_of(&self.columns[0])
    }

    /// Index of the lowest non-baseline cell in a row, or 0 when the table
    /// has only baseline columns.
    pub fn best_column(&self, row: &EvalRow) -> usize {
        let baseline = self.baseline_method().to_string();
        let mut best: Option<(usize, f64)> = None;
        for (i, col) in self.columns.iter().enumerate() {
            if method_of(col) == baseline {
                continue;
            }
            let v = row.values[i];
            if best.map_or(true, |(_, b)| v < b) {
                best = Some((i, v));
            }
        }
        best.map_or(0, |(i, _)| i)
    }

    /// Percentage improvement of the best non-baseline cell over the first
    /// baseline cell: `100 * (baseline - best) / baseline`. Zero when the
    /// table has no non-baseline columns or a zero baseline.
    pub fn improvement_raw(&self, row: &EvalRow) -> f64 {
        let best_col = self.best_column(row);
        if best_col == 0 {
            return 0.0;
        }
        let baseline = row.values[0];
        if baseline == 0.0 {
            return 0.0;
        }
        100.0 * (baseline - row.values[best_col]) / baseline
    }

    /// Improvement rounded to the nearest whole percent, as shown in tables.
    pub fn improvement_display(&self, row: &EvalRow) -> i64 {
        self.improvement_raw(row).round() as i64
    }

    /// Rows whose best non-baseline cell beats the baseline.
    pub fn wins(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| self.improvement_raw(r) > 0.0)
            .count()
    }

    /// Median of the raw improvement percentages, 0 for an empty table.
    pub fn median_improvement(&self) -> f64 {
        let mut raws: Vec<f64> = self.rows.iter().map(|r| self.improvement_raw(r)).collect();
        if raws.is_empty() {
            return 0.0;
        }
        raws.sort_by(|a, b| a.partial_cmp(b).expect("finite improvements"));
        let mid = raws.len() / 2;
        if raws.len() % 2 == 1 {
            raws[mid]
        } else {
            0.5 * (raws[mid - 1] + raws[mid])
        }
    }

    /// Serialize as CSV: `scene,<columns...>,improvement`, floats in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene");
        for col in &self.columns {
            out.push(',');
            out.push_str(col);
        }
        out.push_str(",improvement\n");
        for row in &self.rows {
            out.push_str(&row.scene);
            for v in &row.values {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", self.improvement_raw(row));
        }
        out
    }

    /// Parse a table emitted by [`EvalReport::to_csv`]. The improvement
    /// column is validated but recomputed, so a parsed table always agrees
    /// with its own values.
    pub fn from_csv(text: &str) -> Result<EvalReport> {
        let mut lines = text.lines();
        let header = lines.next().context("empty table")?;
        let mut cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"scene") || cols.last() != Some(&"improvement") {
            bail!("header must run scene,<columns...>,improvement, got {header:?}");
        }
        cols.remove(0);
        cols.pop();
        if cols.is_empty() {
            bail!("table has no value columns");
        }
        let columns: Vec<String> = cols.iter().map(|c| c.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() + 2 {
                bail!(
                    "row {:?} has {} cells, expected {}",
                    line,
                    cells.len(),
                    columns.len() + 2
                );
            }
            let values = cells[1..=columns.len()]
                .iter()
                .map(|c| {
                    c.parse::<f64>()
                        .with_context(|| format!("bad value {c:?} in row {:?}", cells[0]))
                })
                .collect::<Result<Vec<f64>>>()?;
            cells[columns.len() + 1]
                .parse::<f64>()
                .with_context(|| format!("bad improvement cell in row {:?}", cells[0]))?;
            rows.push(EvalRow {
                scene: cells[0].to_string(),
                values,
            });
        }
        Ok(EvalReport { columns, rows })
    }

    /// Merge per-scene tables that share a column layout; duplicate scene
    /// names are rejected.
    pub fn merge(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().context("nothing to merge")?;
        let mut merged = EvalReport {
            columns: first.columns.clone(),
            rows: Vec::new(),
        };
        for report in reports {
            if report.columns != merged.columns {
                bail!(
                    "column layouts differ: {:?} vs {:?}",
                    merged.columns,
                    report.columns
                );
            }
            for row in &report.rows {
                if merged.rows.iter().any(|r| r.scene == row.scene) {
                    bail!("scene {:?} appears more than once", row.scene);
                }
                merged.rows.push(row.clone());
            }
        }
        Ok(merged)
    }

    /// Fixed-width text rendering for terminals.
    pub fn render_text(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.len().max(9)).collect();
        let scene_w = self
            .rows
            .iter()
            .map(|r| r.scene.len())
            .chain(["scene".len()])
            .max()
            .unwrap_or(5);
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.values.iter().map(|v| format!("{v:.6}")).collect())
            .collect();
        for row in &cells {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = format!("{:<scene_w$}", "scene");
        for (col, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {col:>w$}");
        }
        out.push_str("  impr%\n");
        for (row, rendered) in self.rows.iter().zip(&cells) {
            let _ = write!(out, "{:<scene_w$}", row.scene);
            let best = self.best_column(row);
            for (i, (cell, w)) in rendered.iter().zip(&widths).enumerate() {
                let marker = if i == best && best != 0 { "*" } else { "" };
                let _ = write!(out, "  {:>w$}", format!("{cell}{marker}"));
            }
            let _ = writeln!(out, "  {:>5}", self.improvement_display(row));
        }
        out
    }
}

/// Score every method's snapshot sequence against one truth snapshot and
/// assemble the comparison table for a single scene. The baseline method is
/// placed first; other methods keep their given order. Column steps take a
/// snapshot's label when present, `+k` otherwise.
pub fn compare(
    scene: &str,
    runs: &[(String, Vec<Snapshot>)],
    baseline: &str,
    truth: &Snapshot,
    mean: bool,
) -> Result<EvalReport> {
    if runs.is_empty() {
        bail!("no methods to compare");
    }
    for (name, seq) in runs {
        if name.contains('/') || name.contains(',') {
            bail!("method name {name:?} may not contain '/' or ','");
        }
        if seq.is_empty() {
            bail!("method {name:?} has no snapshots");
        }
    }
    if !runs.iter().any(|(name, _)| name == baseline) {
        let known: Vec<&str> = runs.iter().map(|(n, _)| n.as_str()).collect();
        bail!("baseline {baseline:?} is not among the methods {known:?}");
    }
    if scene.contains(',') {
        bail!("scene name {scene:?} may not contain ','");
    }

    let ordered = runs
        .iter()
        .filter(|(n, _)| n == baseline)
        .chain(runs.iter().filter(|(n, _)| n != baseline));
    let mut columns = Vec::new();
    let mut values = Vec::new();
    for (name, seq) in ordered {
        for (i, snap) in seq.iter().enumerate() {
            let step = if snap.label.is_empty() {
                format!("+{}", i + 1)
            } else {
                snap.label.clone()
            };
            if step.contains(',') {
                bail!("step label {step:?} may not contain ','");
            }
            columns.push(format!("{name}/{step}"));
            values.push(
                eval_chamfer(snap, truth, mean)
                    .with_context(|| format!("scoring {name}/{step}"))?,
            );
        }
    }
    Ok(EvalReport {
        columns,
        rows: vec![EvalRow {
            scene: scene.to_string(),
            values,
        }],
    })
}

const BAR_COLORS: [&str; 8] = [
    "#4878cf", "#d65f5f", "#59a14f", "#b07aa1", "#e8a33d", "#5fb4c9", "#8c8c8c", "#bcbd22",
];

/// Write a grouped horizontal bar chart of the table, one group per scene,
/// bars normalized to each scene's largest value.
pub fn write_bar_chart(path: &Path, report: &EvalReport) -> Result<()> {
    let bar_h = 14;
    let group_pad = 22;
    let label_w = 150;
    let plot_w = 540;
    let legend_h = 24 + 14 * report.columns.len();
    let group_h = report.columns.len() * bar_h + group_pad;
    let height = legend_h + report.rows.len() * group_h + 20;
    let width = label_w + plot_w + 160;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    );
    for (i, col) in report.columns.iter().enumerate() {
        let y = 16 + 14 * i;
        let color = BAR_COLORS[i % BAR_COLORS.len()];
        let _ = write!(
            svg,
            "<rect x=\"10\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\
             <text x=\"26\" y=\"{}\">{col}</text>\n",
            y,
            y + 9
        );
    }
    for (r, row) in report.rows.iter().enumerate() {
        let top = legend_h + r * group_h;
        let row_max = row
            .values
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max)
            .max(f64::MIN_POSITIVE);
        let _ = write!(
            svg,
            "<text x=\"10\" y=\"{}\">{} ({}%)</text>\n",
            top + group_h / 2,
            row.scene,
            self_improvement(report, row)
        );
        for (i, v) in row.values.iter().enumerate() {
            let y = top + i * bar_h;
            let len = ((v / row_max) * plot_w as f64).max(1.0);
            let color = BAR_COLORS[i % BAR_COLORS.len()];
            let _ = write!(
                svg,
                "<rect x=\"{label_w}\" y=\"{y}\" width=\"{len:.1}\" height=\"{}\" fill=\"{color}\"/>\
                 <text x=\"{:.1}\" y=\"{}\">{v}</text>\n",
                bar_h - 3,
                label_w as f64 + len + 4.0,
                y + bar_h - 4
            );
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).with_context(|| format!("writing chart {}", path.display()))?;
    Ok(())
}

fn self_improvement(report: &EvalReport, row: &EvalRow) -> i64 {
    report.improvement_display(row)
}
