//! Seed aggregation of RL metrics and the success-rate plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use motionforge::rl::{MetricsRow, RewardBackend};

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub step: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// One (task, backend) pair aggregated over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub task: String,
    pub backend: RewardBackend,
    pub seeds: Vec<u64>,
    pub points: Vec<SeriesPoint>,
}

impl Series {
    pub fn final_point(&self) -> &SeriesPoint {
        self.points.last().expect("series has points")
    }

    pub fn best_mean(&self) -> f64 {
        self.points.iter().map(|p| p.mean).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn collect_csvs(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_csvs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Reads every RL `metrics.csv` under the given files or directories.
/// Files with another header (matcher metrics) are skipped.
pub fn load_rows(paths: &[PathBuf]) -> Result<Vec<MetricsRow>, String> {
    let mut files = Vec::new();
    for p in paths {
        collect_csvs(p, &mut files).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    let mut rows = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| format!("{}: {e}", f.display()))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MetricsRow::CSV_HEADER) {
            continue;
        }
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            rows.push(MetricsRow::from_csv(line).map_err(|e| format!("{}:{}: {e}", f.display(), i + 2))?);
        }
    }
    Ok(rows)
}

/// Groups rows by (task, backend) and, within each, by eval step across
/// seeds. Steps some seeds have not reached yet use the seeds that did.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<Series> {
    let mut groups: BTreeMap<(String, &str), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.task.clone(), r.backend.name())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rs| {
            let mut seeds: Vec<u64> = rs.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in &rs {
                by_step.entry(r.step).or_default().push(r.success_rate);
            }
            let points = by_step
                .into_iter()
                .map(|(step, v)| SeriesPoint {
                    step,
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                })
                .collect();
            Series {
                task: rs[0].task.clone(),
                backend: rs[0].backend,
                seeds,
                points,
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "task,backend,seeds,final_step,final_mean,final_min,final_max,best_mean";

pub fn summary_csv(series: &[Series]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in series {
        let f = s.final_point();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.task,
            s.backend,
            s.seeds.len(),
            f.step,
            f.mean,
            f.min,
            f.max,
            s.best_mean()
        );
    }
    out
}

fn color(b: RewardBackend) -> &'static str {
    match b {
        RewardBackend::ClipMotionState => "#1f77b4",
        RewardBackend::ClipMotionImage => "#9467bd",
        RewardBackend::Distance => "#ff7f0e",
        RewardBackend::Sparse => "#2ca02c",
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

/// Success rate against env steps for one task, one series per backend:
/// the seed mean as a line over a min..max band.
pub fn render_svg(task: &str, series: &[&Series]) -> String {
    let max_step = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.step))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |step: usize| LEFT + pw * step as f64 / max_step;
    let y = |v: f64| TOP + ph * (1.0 - v.clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{task}: success rate</text>"#,
        LEFT + pw / 2.0
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#dddddd"/><text x="{2:.2}" y="{3:.2}" text-anchor="end">{v:.2}</text>"##,
            y(v),
            LEFT + pw,
            LEFT - 6.0,
            y(v) + 4.0
        );
    }
    for i in 0..=4 {
        let step = (max_step * i as f64 / 4.0).round() as usize;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x(step),
            TOP + ph + 18.0,
            step
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">env steps</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    for (i, s) in series.iter().enumerate() {
        let c = color(s.backend);
        let mut band: Vec<String> = s.points.iter().map(|p| format!("{:.2},{:.2}", x(p.step), y(p.max))).collect();
        band.extend(s.points.iter().rev().map(|p| format!("{:.2},{:.2}", x(p.step), y(p.min))));
        let line: Vec<String> = s.points.iter().map(|p| format!("{:.2},{:.2}", x(p.step), y(p.mean))).collect();
        let _ = writeln!(
            svg,
            r#"<g class="series" data-backend="{}"><polygon points="{}" fill="{c}" fill-opacity="0.2" stroke="none"/><polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/></g>"#,
            s.backend,
            band.join(" "),
            line.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{c}" stroke-width="2"/><text class="legend" x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            s.backend
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `summary.csv` and one `success_<task>.svg` per task into `dir`.
pub fn write_report(series: &[Series], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = vec![dir.join("summary.csv")];
    fs::write(&written[0], summary_csv(series))?;
    let mut tasks: Vec<&str> = series.iter().map(|s| s.task.as_str()).collect();
    tasks.dedup();
    for task in tasks {
        let of_task: Vec<&Series> = series.iter().filter(|s| s.task == task).collect();
        let p = dir.join(format!("success_{task}.svg"));
        fs::write(&p, render_svg(task, &of_task))?;
        written.push(p);
    }
    Ok(written)
}
