//! Report files: a CSV of rows, a JSON summary, and a plot as CSV plus SVG.
//! Plot files are computed from the report alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::experiments::{
    CoarseToFineReport, CoarseToFineRow, EvalReport, ManyClassReport, ManyClassRow, SweepReport,
    SweepRow,
};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 500;

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("plot rendering failed: {e}"))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|x| x.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Files of one report inside an output directory.
pub struct ReportFiles {
    pub rows: PathBuf,
    pub summary: PathBuf,
    pub plot_csv: PathBuf,
    pub plot_svg: PathBuf,
}

impl ReportFiles {
    pub fn new(dir: &Path, name: &str) -> Self {
        ReportFiles {
            rows: dir.join(format!("{name}.csv")),
            summary: dir.join(format!("{name}.json")),
            plot_csv: dir.join(format!("{name}_plot.csv")),
            plot_svg: dir.join(format!("{name}_plot.svg")),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------- sweep

/// One dot pair of the sweep plot: per-case mean Dice over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub count: usize,
    pub repeat: usize,
    pub case: String,
    pub baseline: f64,
    pub lcs: f64,
}

pub fn sweep_points(rows: &[SweepRow]) -> Vec<SweepPoint> {
    let mut acc: BTreeMap<(usize, usize, &str), [(f64, usize); 2]> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.count, r.repeat, r.case.as_str())).or_default();
        let k = usize::from(r.model == "lcs");
        e[k].0 += r.dice;
        e[k].1 += 1;
    }
    acc.into_iter()
        .map(|((count, repeat, case), [b, l])| SweepPoint {
            count,
            repeat,
            case: case.to_string(),
            baseline: b.0 / b.1.max(1) as f64,
            lcs: l.0 / l.1.max(1) as f64,
        })
        .collect()
}

fn render_sweep(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let counts: Vec<usize> = {
        let mut c: Vec<usize> = points.iter().map(|p| p.count).collect();
        c.dedup();
        c
    };
    let root = SVGBackend::new(path, (WIDTH, HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Per-case mean Dice by class count", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.5f64..counts.len() as f64 - 0.5, 0f64..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_labels(counts.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < counts.len() {
                counts[i as usize].to_string()
            } else {
                String::new()
            }
        })
        .x_desc("classes")
        .y_desc("Dice")
        .draw()
        .map_err(plot_err)?;
    let pos = |count: usize| counts.iter().position(|&c| c == count).unwrap() as f64;
    for p in points {
        let x = pos(p.count);
        chart
            .draw_series(LineSeries::new(
                [(x - 0.15, p.baseline), (x + 0.15, p.lcs)],
                BLACK.mix(0.3),
            ))
            .map_err(plot_err)?;
    }
    chart
        .draw_series(
            points
                .iter()
                .map(|p| Circle::new((pos(p.count) - 0.15, p.baseline), 3, BLUE.filled())),
        )
        .map_err(plot_err)?
        .label("baseline")
        .legend(|(x, y)| Circle::new((x, y), 3, BLUE.filled()));
    chart
        .draw_series(
            points
                .iter()
                .map(|p| Circle::new((pos(p.count) + 0.15, p.lcs), 3, RED.filled())),
        )
        .map_err(plot_err)?
        .label("lcs")
        .legend(|(x, y)| Circle::new((x, y), 3, RED.filled()));
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerLeft)
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

impl SweepReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let f = ReportFiles::new(dir, "sweep");
        write_csv(&f.rows, &self.rows)?;
        write_json(&f.summary, self)?;
        write_sweep_plot(&f, &self.rows)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = ReportFiles::new(dir, "sweep");
        let mut r: SweepReport = read_json(&f.summary)?;
        r.rows = read_csv(&f.rows)?;
        Ok(r)
    }
}

fn write_sweep_plot(f: &ReportFiles, rows: &[SweepRow]) -> Result<()> {
    let points = sweep_points(rows);
    write_csv(&f.plot_csv, &points)?;
    render_sweep(&f.plot_svg, &points)
}

// ----------------------------------------------------------- many-class

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarPoint {
    pub rank: usize,
    pub class: u32,
    pub name: String,
    pub baseline: f64,
    pub lcs: f64,
}

fn render_bars(
    path: &Path,
    title: &str,
    series: [&str; 2],
    bars: &[(String, f64, f64)],
) -> Result<()> {
    let n = bars.len().max(1);
    let root = SVGBackend::new(path, (WIDTH.max(40 * n as u32), HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.5f64..n as f64 - 0.5, 0f64..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < bars.len() {
                bars[i as usize].0.clone()
            } else {
                String::new()
            }
        })
        .y_desc("Dice")
        .draw()
        .map_err(plot_err)?;
    for (s, colour) in [BLUE, RED].into_iter().enumerate() {
        let rects = bars.iter().enumerate().map(|(i, b)| {
            let v = if s == 0 { b.1 } else { b.2 };
            let x0 = i as f64 - 0.4 + 0.4 * s as f64;
            Rectangle::new([(x0, 0.0), (x0 + 0.4, v)], colour.mix(0.7).filled())
        });
        chart
            .draw_series(rects)
            .map_err(plot_err)?
            .label(series[s])
            .legend(move |(x, y)| Rectangle::new([(x, y - 4), (x + 8, y + 4)], colour.filled()));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperLeft)
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

impl ManyClassReport {
    pub fn bar_points(&self) -> Vec<BarPoint> {
        self.bars
            .iter()
            .enumerate()
            .map(|(rank, b)| BarPoint {
                rank,
                class: b.class,
                name: b.name.clone(),
                baseline: b.baseline,
                lcs: b.lcs,
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let f = ReportFiles::new(dir, "manyclass");
        write_csv(&f.rows, &self.rows)?;
        write_json(&f.summary, self)?;
        write_json(&dir.join("memory.json"), &self.memory)?;
        self.write_plot(&f)
    }

    fn write_plot(&self, f: &ReportFiles) -> Result<()> {
        let points = self.bar_points();
        write_csv(&f.plot_csv, &points)?;
        let bars: Vec<(String, f64, f64)> = points
            .iter()
            .map(|p| (p.class.to_string(), p.baseline, p.lcs))
            .collect();
        render_bars(
            &f.plot_svg,
            "Per-class mean Dice, sorted by baseline",
            ["baseline", "lcs"],
            &bars,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = ReportFiles::new(dir, "manyclass");
        let mut r: ManyClassReport = read_json(&f.summary)?;
        r.rows = read_csv::<ManyClassRow>(&f.rows)?;
        Ok(r)
    }
}

// -------------------------------------------------------- coarse to fine

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChildPoint {
    pub parent: u32,
    pub child: u32,
    pub name: String,
    pub coarse: f64,
    pub naive: f64,
    pub fine: f64,
}

impl CoarseToFineReport {
    pub fn child_points(&self) -> Vec<ChildPoint> {
        self.children
            .iter()
            .map(|c| ChildPoint {
                parent: c.parent,
                child: c.child,
                name: c.name.clone(),
                coarse: c.coarse,
                naive: c.naive,
                fine: c.fine,
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let f = ReportFiles::new(dir, "coarse2fine");
        write_csv(&f.rows, &self.rows)?;
        write_json(&f.summary, self)?;
        self.write_plot(&f)
    }

    fn write_plot(&self, f: &ReportFiles) -> Result<()> {
        let points = self.child_points();
        write_csv(&f.plot_csv, &points)?;
        let bars: Vec<(String, f64, f64)> = points
            .iter()
            .map(|p| (p.child.to_string(), p.naive, p.fine))
            .collect();
        render_bars(
            &f.plot_svg,
            "Naive vs fine-grained Dice per child",
            ["naive", "fine"],
            &bars,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = ReportFiles::new(dir, "coarse2fine");
        let mut r: CoarseToFineReport = read_json(&f.summary)?;
        r.rows = read_csv::<CoarseToFineRow>(&f.rows)?;
        Ok(r)
    }
}

// ------------------------------------------------------------------ eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case: String,
    pub class: u32,
    pub dice: f64,
    pub dice_argmax: f64,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<EvalRow> {
        self.threshold_scores
            .records()
            .iter()
            .zip(self.argmax_scores.records())
            .map(|(t, a)| EvalRow {
                case: t.case.clone(),
                class: t.class,
                dice: t.dice,
                dice_argmax: a.dice,
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let f = ReportFiles::new(dir, "eval");
        write_csv(&f.rows, &self.rows())?;
        write_json(&f.summary, self)
    }
}

/// Report kinds found in a directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportKind {
    Sweep,
    ManyClass,
    CoarseToFine,
}

impl ReportKind {
    pub const ALL: [ReportKind; 3] = [
        ReportKind::Sweep,
        ReportKind::ManyClass,
        ReportKind::CoarseToFine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Sweep => "sweep",
            ReportKind::ManyClass => "manyclass",
            ReportKind::CoarseToFine => "coarse2fine",
        }
    }
}

/// Re-renders the plot files of every report in `dir` from its saved rows
/// and summary. Returns the kinds found.
pub fn rerender(dir: &Path) -> Result<Vec<ReportKind>> {
    let mut found = Vec::new();
    for kind in ReportKind::ALL {
        let f = ReportFiles::new(dir, kind.name());
        if !f.summary.exists() {
            continue;
        }
        match kind {
            ReportKind::Sweep => write_sweep_plot(&f, &SweepReport::load(dir)?.rows)?,
            ReportKind::ManyClass => ManyClassReport::load(dir)?.write_plot(&f)?,
            ReportKind::CoarseToFine => CoarseToFineReport::load(dir)?.write_plot(&f)?,
        }
        found.push(kind);
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(count: usize, case: &str, model: &str, dice: f64) -> SweepRow {
        SweepRow {
            count,
            repeat: 0,
            case: case.into(),
            class: 1,
            model: model.into(),
            dice,
            dice_argmax: dice,
        }
    }

    #[test]
    fn sweep_points_average_over_classes() {
        let mut rows = vec![row(2, "a", "baseline", 0.5), row(2, "a", "lcs", 0.7)];
        let mut r2 = row(2, "a", "lcs", 0.9);
        r2.class = 2;
        rows.push(r2);
        let p = sweep_points(&rows);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].baseline, 0.5);
        assert!((p[0].lcs - 0.8).abs() < 1e-12);
    }

    #[test]
    fn svg_rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let points = sweep_points(&[
            row(2, "a", "baseline", 0.5),
            row(2, "a", "lcs", 0.7),
            row(8, "a", "lcs", 0.7),
            row(8, "a", "baseline", 0.2),
        ]);
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        render_sweep(&a, &points).unwrap();
        render_sweep(&b, &points).unwrap();
        let text = fs::read_to_string(&a).unwrap();
        assert!(text.starts_with("<svg"));
        assert_eq!(text, fs::read_to_string(&b).unwrap());
    }

    #[test]
    fn every_bar_is_labelled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bars.svg");
        for n in [1, 3, 11, 24] {
            let bars: Vec<(String, f64, f64)> =
                (0..n).map(|i| (format!("c{i}"), 0.5, 0.6)).collect();
            render_bars(&path, "t", ["x", "y"], &bars).unwrap();
            let text = fs::read_to_string(&path).unwrap();
            for (name, _, _) in &bars {
                assert!(
                    text.contains(&format!("\n{name}\n</text>")),
                    "{name} of {n}"
                );
            }
        }
    }
}
