//! Learning curves and summary tables from metrics files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{read_metrics, EpisodeRow, Metrics};

pub const SMOOTHING_WINDOW: usize = 9;
pub const RATE_WINDOW: usize = 100;

/// Trailing mean over at most `window` values ending at each index.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let tail = &xs[(i + 1).saturating_sub(w)..=i];
            tail.iter().sum::<f64>() / tail.len() as f64
        })
        .collect()
}

/// Pointwise mean and population standard deviation across equally long
/// curves, truncated to the shortest.
pub fn band(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let n = curves.len().max(1) as f64;
    (0..len)
        .map(|i| {
            let mean = curves.iter().map(|c| c[i]).sum::<f64>() / n;
            let var = curves.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .unzip()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Curve {
    Return,
    Speed,
    CollisionRate,
}

impl Curve {
    pub const ALL: [Curve; 3] = [Curve::Return, Curve::Speed, Curve::CollisionRate];

    pub fn name(self) -> &'static str {
        match self {
            Curve::Return => "return",
            Curve::Speed => "speed",
            Curve::CollisionRate => "collision_rate",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Curve::Return => "episode return",
            Curve::Speed => "mean speed (m/s)",
            Curve::CollisionRate => "collision rate (trailing 100 episodes)",
        }
    }

    /// Per-episode series of one seed after smoothing.
    pub fn series(self, rows: &[EpisodeRow]) -> Vec<f64> {
        match self {
            Curve::Return => smooth(&rows.iter().map(|r| r.ret).collect::<Vec<_>>(), SMOOTHING_WINDOW),
            Curve::Speed => smooth(&rows.iter().map(|r| r.mean_speed).collect::<Vec<_>>(), SMOOTHING_WINDOW),
            Curve::CollisionRate => smooth(&rows.iter().map(|r| r.collision as f64).collect::<Vec<_>>(), RATE_WINDOW),
        }
    }
}

/// Metrics of every seed of one run group.
#[derive(Clone, Debug)]
pub struct Group {
    pub name: String,
    pub seeds: Vec<(String, Vec<EpisodeRow>)>,
}

impl Group {
    pub fn curve(&self, c: Curve) -> (Vec<f64>, Vec<f64>) {
        band(&self.seeds.iter().map(|(_, rows)| c.series(rows)).collect::<Vec<_>>())
    }
}

/// Finds `metrics.csv` files below `root`. Files in a directory named
/// `seed_*` are grouped by the path of its parent; any other file forms its
/// own group.
pub fn collect(root: &Path) -> Result<Vec<Group>> {
    let mut files = Vec::new();
    find_metrics(root, &mut files)?;
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!("no metrics.csv under {}", root.display())));
    }
    files.sort();
    let mut groups: BTreeMap<String, Vec<(String, Vec<EpisodeRow>)>> = BTreeMap::new();
    for f in files {
        let dir = f.parent().unwrap_or(root);
        let dir_name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let (group_dir, seed) = if dir_name.starts_with("seed_") {
            (dir.parent().unwrap_or(root), dir_name)
        } else {
            (dir, "0".to_string())
        };
        let rel = group_dir.strip_prefix(root).unwrap_or(group_dir);
        let mut name = rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/");
        if name.is_empty() {
            name = root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        }
        groups.entry(name).or_default().push((seed, read_metrics(&f)?));
    }
    Ok(groups.into_iter().map(|(name, seeds)| Group { name, seeds }).collect())
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            find_metrics(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.csv") {
            out.push(path);
        }
    }
    Ok(())
}

/// One row of the summary tables: final-window aggregates, mean and
/// standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub seeds: usize,
    pub episodes: usize,
    pub collision_rate: f64,
    pub collision_rate_std: f64,
    pub mean_speed: f64,
    pub mean_speed_std: f64,
    pub mean_return: f64,
    pub mean_return_std: f64,
    pub arrival_rate: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let (m, s) = band(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>());
    (m[0], s[0])
}

pub fn summarize(g: &Group, window: usize) -> SummaryRow {
    let ms: Vec<Metrics> = g.seeds.iter().map(|(_, rows)| Metrics::final_window(rows, window)).collect();
    let pick = |f: fn(&Metrics) -> f64| mean_std(&ms.iter().map(f).collect::<Vec<_>>());
    let (c, cs) = pick(|m| m.collision_rate);
    let (v, vs) = pick(|m| m.mean_speed);
    let (r, rs) = pick(|m| m.mean_return);
    SummaryRow {
        method: g.name.clone(),
        seeds: g.seeds.len(),
        episodes: ms.iter().map(|m| m.episodes).min().unwrap_or(0),
        collision_rate: c,
        collision_rate_std: cs,
        mean_speed: v,
        mean_speed_std: vs,
        mean_return: r,
        mean_return_std: rs,
        arrival_rate: pick(|m| m.arrival_rate).0,
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot with shaded ±1 std bands, one series per group.
pub fn svg_plot(title: &str, y_label: &str, series: &[(String, Vec<f64>, Vec<f64>)]) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(2);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, m, s) in series {
        for (a, b) in m.iter().zip(s) {
            lo = lo.min(a - b);
            hi = hi.max(a + b);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(out, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, y(v) + 4.0, tick(v));
        let i = (n - 1) * k / 4;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x(i), top + ph + 18.0, i + 1);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">episode</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, (name, mean, std)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if mean.is_empty() {
            continue;
        }
        let mut poly = String::new();
        for (i, (m, s)) in mean.iter().zip(std).enumerate() {
            let _ = write!(poly, "{:.2},{:.2} ", x(i), y(m + s));
        }
        for (i, (m, s)) in mean.iter().zip(std).enumerate().rev() {
            let _ = write!(poly, "{:.2},{:.2} ", x(i), y(m - s));
        }
        let _ = writeln!(out, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, poly.trim_end());
        let line: Vec<String> = mean.iter().enumerate().map(|(i, &m)| format!("{:.2},{:.2}", x(i), y(m))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, line.join(" "));
        let ly = top + 10.0 + 18.0 * k as f64;
        let _ = writeln!(out, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, w - right + 12.0, w - right + 32.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, w - right + 38.0, ly + 4.0, escape(name));
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Files written by [`report`].
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    pub plots: Vec<PathBuf>,
    pub tables: Vec<PathBuf>,
}

/// Reads every metrics file below `input` and writes one SVG per curve plus
/// the collision-rate and performance tables into `output`.
pub fn report(input: &Path, output: &Path) -> Result<ReportFiles> {
    let groups = collect(input)?;
    fs::create_dir_all(output)?;
    let mut files = ReportFiles::default();
    for c in Curve::ALL {
        let series: Vec<(String, Vec<f64>, Vec<f64>)> = groups
            .iter()
            .map(|g| {
                let (m, s) = g.curve(c);
                (g.name.clone(), m, s)
            })
            .collect();
        let path = output.join(format!("{}.svg", c.name()));
        fs::write(&path, svg_plot(c.label(), c.label(), &series))?;
        files.plots.push(path);
    }

    let rows: Vec<SummaryRow> = groups.iter().map(|g| summarize(g, RATE_WINDOW)).collect();
    let path = output.join("collision_rates.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["method", "seeds", "collision_rate", "collision_rate_std"])?;
    for r in &rows {
        w.write_record([r.method.clone(), r.seeds.to_string(), fmt(r.collision_rate), fmt(r.collision_rate_std)])?;
    }
    w.flush()?;
    files.tables.push(path);

    let path = output.join("performance.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    files.tables.push(path);
    Ok(files)
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(rets: &[f64]) -> Vec<EpisodeRow> {
        rets.iter()
            .enumerate()
            .map(|(i, &r)| EpisodeRow {
                episode: i,
                steps: 10,
                ret: r,
                collision: (i % 4 == 0) as u8,
                mean_speed: 10.0 + r,
                epsilon: 0.1,
                loss: None,
                arrived: (i % 4 != 0) as u8,
            })
            .collect()
    }

    #[test]
    fn smoothing_keeps_constants() {
        assert_eq!(smooth(&[3.0; 20], 9), vec![3.0; 20]);
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        let xs: Vec<f64> = (0..12).map(f64::from).collect();
        let s = smooth(&xs, 3);
        assert_eq!(&s[..4], &[0.0, 0.5, 1.0, 2.0]);
        assert_eq!(s[11], 10.0);
    }

    #[test]
    fn single_seed_band_is_flat() {
        let (m, s) = band(&[vec![1.0, 2.0, 4.0]]);
        assert_eq!(m, vec![1.0, 2.0, 4.0]);
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn band_uses_population_std() {
        let (m, s) = band(&[vec![1.0, 0.0], vec![3.0, 0.0, 9.0]]);
        assert_eq!(m, vec![2.0, 0.0]);
        assert_eq!(s, vec![1.0, 0.0]);
    }

    #[test]
    fn report_writes_one_plot_per_curve() {
        let dir = tempfile::tempdir().unwrap();
        for (group, n) in [("full", 3), ("no_mpc", 1)] {
            for seed in 0..n {
                let path = dir.path().join("in").join(group).join(format!("seed_{seed}")).join("metrics.csv");
                crate::harness::write_metrics(&path, &rows(&[1.0, 2.0, seed as f64, 0.5])).unwrap();
            }
        }
        let files = report(&dir.path().join("in"), &dir.path().join("out")).unwrap();
        assert_eq!(files.plots.len(), 3);
        let svg = fs::read_to_string(&files.plots[0]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        let table = fs::read_to_string(dir.path().join("out/collision_rates.csv")).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(1).unwrap().starts_with("full,3,0.250000,0.000000"));
    }
}
