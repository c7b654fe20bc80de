//! Figure-shaped tables and SVG line charts built from aggregated metrics,
//! plus a plain-text dump of generated profiles.
//!
//! Nothing here computes a metric. Every value written is copied from a
//! `MetricsCell`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use thiserror::Error;

use crate::catalog::{load_catalog, MovieCatalog};
use crate::eval::{write_metrics_csv, MetricsCell, Method};
use crate::rng;
use crate::runner::{load_profiles, ExperimentConfig, ProfileRecord, RunError};
use crate::sampler::TaskKind;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no metrics to report")]
    EmptyMetrics,
    #[error("unknown figure {0:?}; expected one of 2, 3, 4, 5, 6")]
    UnknownFigure(String),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Run(#[from] RunError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum XAxis {
    HistorySize,
    ProfileLength,
    BackgroundSize,
}

impl XAxis {
    pub fn key(self) -> &'static str {
        match self {
            XAxis::HistorySize => "history_size",
            XAxis::ProfileLength => "profile_length",
            XAxis::BackgroundSize => "background_size",
        }
    }

    fn label(self) -> &'static str {
        match self {
            XAxis::HistorySize => "history size (rated movies)",
            XAxis::ProfileLength => "profile length (words)",
            XAxis::BackgroundSize => "background size (users)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Reliability,
    Rmse,
    Mae,
    Bias,
    ErrorRate,
}

impl Metric {
    pub fn key(self) -> &'static str {
        match self {
            Metric::Reliability => "reliability",
            Metric::Rmse => "rmse",
            Metric::Mae => "mae",
            Metric::Bias => "bias",
            Metric::ErrorRate => "error_rate",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Reliability => "reliability (fraction readable)",
            Metric::Rmse => "RMSE (stars)",
            Metric::Mae => "MAE (stars)",
            Metric::Bias => "bias (stars, predicted minus true)",
            Metric::ErrorRate => "error rate (fraction)",
        }
    }

    fn value(self, cell: &MetricsCell) -> Option<f64> {
        match self {
            Metric::Reliability => cell.reliability,
            Metric::Rmse => cell.rmse,
            Metric::Mae => cell.mae,
            Metric::Bias => cell.bias,
            Metric::ErrorRate => cell.error_rate,
        }
    }
}

/// Which cells a figure draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Every method over history sizes; NMF only without background users.
    Methods { skip_default: bool },
    /// LFM summary lengths at one history size.
    SummaryLengths,
    /// NMF over background sizes at one history size, LFM as flat reference lines.
    BackgroundSweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureSpec {
    pub id: u8,
    pub title: String,
    pub x: XAxis,
    /// One facet per (task, metric) pair that has data.
    pub metrics: Vec<Metric>,
    pub tasks: Vec<TaskKind>,
    pub selection: Selection,
}

/// History size used by the fixed-history figures when the run has it.
pub const FIXED_HISTORY: usize = 30;

pub fn figure(id: u8) -> Option<FigureSpec> {
    let all = TaskKind::ALL.to_vec();
    let errors = vec![Metric::Rmse, Metric::Mae, Metric::ErrorRate];
    let spec = match id {
        2 => FigureSpec {
            id,
            title: "Fraction of readable predictions vs history size".into(),
            x: XAxis::HistorySize,
            metrics: vec![Metric::Reliability],
            tasks: all,
            selection: Selection::Methods { skip_default: true },
        },
        3 => FigureSpec {
            id,
            title: "RMSE, MAE and error rate vs history size".into(),
            x: XAxis::HistorySize,
            metrics: errors,
            tasks: all,
            selection: Selection::Methods { skip_default: false },
        },
        4 => FigureSpec {
            id,
            title: "Bias of rating prediction vs history size".into(),
            x: XAxis::HistorySize,
            metrics: vec![Metric::Bias],
            tasks: vec![TaskKind::Rating],
            selection: Selection::Methods { skip_default: false },
        },
        5 => FigureSpec {
            id,
            title: "LFM summary length".into(),
            x: XAxis::ProfileLength,
            metrics: errors,
            tasks: all,
            selection: Selection::SummaryLengths,
        },
        6 => FigureSpec {
            id,
            title: "NMF background size".into(),
            x: XAxis::BackgroundSize,
            metrics: vec![Metric::Rmse, Metric::Mae, Metric::ErrorRate, Metric::Reliability],
            tasks: all,
            selection: Selection::BackgroundSweep,
        },
        _ => return None,
    };
    Some(spec)
}

pub fn all_figures() -> Vec<FigureSpec> {
    (2..=6).filter_map(figure).collect()
}

/// Parses `"2,3,6"`.
pub fn parse_figure_list(text: &str) -> Result<Vec<FigureSpec>, ReportError> {
    let mut ids = BTreeSet::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let id: u8 = part.parse().map_err(|_| ReportError::UnknownFigure(part.to_string()))?;
        figure(id).ok_or_else(|| ReportError::UnknownFigure(part.to_string()))?;
        ids.insert(id);
    }
    Ok(ids.into_iter().filter_map(figure).collect())
}

/// One plotted value.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub task: TaskKind,
    pub metric: Metric,
    pub series: String,
    pub x: usize,
    pub value: f64,
    pub n_total: usize,
}

type SeriesKey = (Method, Option<usize>, Option<usize>, String);

fn applies(metric: Metric, task: TaskKind) -> bool {
    match metric {
        Metric::Reliability => true,
        Metric::Rmse | Metric::Mae | Metric::Bias => task == TaskKind::Rating,
        Metric::ErrorRate => task.is_pairwise(),
    }
}

/// History size the fixed-history figures use: 30 if present, else the largest.
pub fn fixed_history(metrics: &[MetricsCell]) -> Option<usize> {
    let sizes: BTreeSet<usize> = metrics.iter().filter_map(|c| c.history_size).collect();
    if sizes.contains(&FIXED_HISTORY) {
        Some(FIXED_HISTORY)
    } else {
        sizes.last().copied()
    }
}

/// Points for `spec`, ordered by task, metric, series and x.
pub fn figure_points(spec: &FigureSpec, metrics: &[MetricsCell]) -> Vec<Point> {
    let fixed = fixed_history(metrics);
    // (cell, series name, x)
    let mut picked: Vec<(&MetricsCell, String, usize)> = Vec::new();
    for cell in metrics {
        let Some(method) = cell.method else { continue };
        match spec.selection {
            Selection::Methods { skip_default } => {
                if skip_default && method == Method::Default {
                    continue;
                }
                if method == Method::Nmf && cell.background_size.unwrap_or(0) != 0 {
                    continue;
                }
                if let Some(h) = cell.history_size {
                    picked.push((cell, cell.label.clone(), h));
                }
            }
            Selection::SummaryLengths => {
                if method == Method::Lfm && cell.history_size == fixed {
                    if let Some(len) = cell.profile_length {
                        picked.push((cell, "LFM".into(), len));
                    }
                }
            }
            Selection::BackgroundSweep => {
                if method == Method::Nmf && cell.history_size == fixed {
                    if let Some(bg) = cell.background_size {
                        picked.push((cell, "NMF".into(), bg));
                    }
                }
            }
        }
    }
    if spec.selection == Selection::BackgroundSweep {
        let xs: BTreeSet<usize> = picked.iter().map(|p| p.2).collect();
        for cell in metrics {
            if cell.method == Some(Method::Lfm) && cell.history_size == fixed {
                for &x in &xs {
                    picked.push((cell, cell.label.clone(), x));
                }
            }
        }
    }

    let mut points: Vec<(SeriesKey, Point)> = Vec::new();
    for (cell, name, x) in picked {
        let (Some(task), Some(method)) = (cell.task, cell.method) else { continue };
        if !spec.tasks.contains(&task) {
            continue;
        }
        // merged series (one "NMF" line over backgrounds) order by method only
        let key = if name == cell.label {
            (method, cell.profile_length, cell.background_size, name.clone())
        } else {
            (method, None, None, name.clone())
        };
        for &metric in &spec.metrics {
            if !applies(metric, task) {
                continue;
            }
            if let Some(value) = metric.value(cell) {
                points.push((key.clone(), Point { task, metric, series: name.clone(), x, value, n_total: cell.n_total }));
            }
        }
    }
    points.sort_by(|(ka, a), (kb, b)| {
        (a.task, a.metric).cmp(&(b.task, b.metric)).then_with(|| ka.cmp(kb)).then(a.x.cmp(&b.x))
    });
    points.into_iter().map(|(_, p)| p).collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), ReportError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes `metrics_all.csv` and one `figN.csv` per spec.
pub fn emit_tables(metrics: &[MetricsCell], specs: &[FigureSpec], out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if metrics.is_empty() {
        return Err(ReportError::EmptyMetrics);
    }
    create_dir(out_dir)?;
    let master = out_dir.join("metrics_all.csv");
    write_metrics_csv(&master, metrics).map_err(|e| io_err(&master, e))?;
    let mut files = vec![master];
    for spec in specs {
        let path = out_dir.join(format!("fig{}.csv", spec.id));
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        let x_key = spec.x.key();
        w.write_record(["figure", "task", "metric", "series", x_key, "value", "n_total"])
            .map_err(|e| io_err(&path, e))?;
        for p in figure_points(spec, metrics) {
            w.write_record([
                spec.id.to_string(),
                p.task.to_string(),
                p.metric.key().to_string(),
                p.series,
                p.x.to_string(),
                p.value.to_string(),
                p.n_total.to_string(),
            ])
            .map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        files.push(path);
    }
    Ok(files)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 46.0;

fn tick_label(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Renders one figure as a standalone SVG document.
pub fn render_svg(spec: &FigureSpec, metrics: &[MetricsCell]) -> String {
    let points = figure_points(spec, metrics);
    let mut facets: Vec<(TaskKind, Metric)> = Vec::new();
    for p in &points {
        if !facets.contains(&(p.task, p.metric)) {
            facets.push((p.task, p.metric));
        }
    }
    let mut series: Vec<String> = Vec::new();
    for p in &points {
        if !series.contains(&p.series) {
            series.push(p.series.clone());
        }
    }
    let cell_w = MARGIN_L + PANEL_W + MARGIN_R;
    let legend_h = 18.0 * series.len().max(1) as f64 + 16.0;
    let width = cell_w * facets.len().max(1) as f64;
    let height = MARGIN_T + PANEL_H + MARGIN_B + legend_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut title = format!("Figure {}: {}", spec.id, spec.title);
    if matches!(spec.selection, Selection::SummaryLengths | Selection::BackgroundSweep) {
        if let Some(h) = fixed_history(metrics) {
            let _ = write!(title, " (history size {h})");
        }
    }
    let _ = writeln!(s, r#"<text x="8" y="18" font-size="14" font-weight="bold">{}</text>"#, escape_xml(&title));
    if facets.is_empty() {
        let _ = writeln!(s, r#"<text x="8" y="{:.1}">no data</text>"#, MARGIN_T + 20.0);
    }

    for (fi, &(task, metric)) in facets.iter().enumerate() {
        let ox = fi as f64 * cell_w + MARGIN_L;
        let oy = MARGIN_T;
        let facet: Vec<&Point> = points.iter().filter(|p| p.task == task && p.metric == metric).collect();
        let xs: BTreeSet<usize> = facet.iter().map(|p| p.x).collect();
        let (x_lo, x_hi) = (*xs.first().unwrap_or(&0) as f64, *xs.last().unwrap_or(&0) as f64);
        let mut y_lo = facet.iter().map(|p| p.value).fold(0.0_f64, f64::min);
        let mut y_hi = facet.iter().map(|p| p.value).fold(0.0_f64, f64::max);
        if metric == Metric::Reliability || metric == Metric::ErrorRate {
            y_lo = 0.0;
            y_hi = y_hi.max(1.0);
        } else if y_hi - y_lo < 1e-9 {
            y_hi = y_lo + 1.0;
        } else {
            let pad = 0.08 * (y_hi - y_lo);
            y_hi += pad;
            if y_lo < 0.0 {
                y_lo -= pad;
            }
        }
        let px = |x: f64| {
            if x_hi > x_lo {
                ox + 12.0 + (x - x_lo) / (x_hi - x_lo) * (PANEL_W - 24.0)
            } else {
                ox + PANEL_W / 2.0
            }
        };
        let py = |y: f64| oy + PANEL_H - (y - y_lo) / (y_hi - y_lo) * PANEL_H;

        let _ = writeln!(s, r#"<g class="facet">"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-weight="bold">{}</text>"#,
            ox + PANEL_W / 2.0,
            oy - 8.0,
            escape_xml(&format!("{task}: {}", metric.key()))
        );
        let _ = writeln!(
            s,
            r##"<rect x="{ox:.1}" y="{oy:.1}" width="{PANEL_W:.1}" height="{PANEL_H:.1}" fill="none" stroke="#444"/>"##
        );
        for t in 0..=4 {
            let v = y_lo + (y_hi - y_lo) * t as f64 / 4.0;
            let y = py(v);
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
                ox,
                ox + PANEL_W,
                ox - 4.0,
                y + 4.0,
                tick_label(v)
            );
        }
        for &x in &xs {
            let x_px = px(x as f64);
            let _ = writeln!(
                s,
                r##"<line x1="{x_px:.1}" y1="{:.1}" x2="{x_px:.1}" y2="{:.1}" stroke="#444"/><text x="{x_px:.1}" y="{:.1}" text-anchor="middle">{x}</text>"##,
                oy + PANEL_H,
                oy + PANEL_H + 4.0,
                oy + PANEL_H + 16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 34.0,
            escape_xml(spec.x.label())
        );
        let (lx, ly) = (ox - 46.0, oy + PANEL_H / 2.0);
        let _ = writeln!(
            s,
            r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle" transform="rotate(-90 {lx:.1} {ly:.1})">{}</text>"#,
            escape_xml(metric.label())
        );
        for (si, name) in series.iter().enumerate() {
            let pts: Vec<&&Point> = facet.iter().filter(|p| &p.series == name).collect();
            if pts.is_empty() {
                continue;
            }
            let color = PALETTE[si % PALETTE.len()];
            let coords: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", px(p.x as f64), py(p.value))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                coords.join(" ")
            );
            for p in pts {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"><title>{}</title></circle>"#,
                    px(p.x as f64),
                    py(p.value),
                    escape_xml(&format!("{name} {}={} {}={:.4}", spec.x.key(), p.x, metric.key(), p.value))
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }

    let legend_y = MARGIN_T + PANEL_H + MARGIN_B + 8.0;
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (si, name) in series.iter().enumerate() {
        let y = legend_y + 18.0 * si as f64;
        let color = PALETTE[si % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="3"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            MARGIN_L,
            MARGIN_L + 24.0,
            MARGIN_L + 30.0,
            y + 4.0,
            escape_xml(name)
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

/// Writes one `figN.svg` per spec.
pub fn emit_charts(metrics: &[MetricsCell], specs: &[FigureSpec], out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if metrics.is_empty() {
        return Err(ReportError::EmptyMetrics);
    }
    create_dir(out_dir)?;
    let mut files = Vec::new();
    for spec in specs {
        let path = out_dir.join(format!("fig{}.svg", spec.id));
        write_file(&path, &render_svg(spec, metrics))?;
        files.push(path);
    }
    Ok(files)
}

/// Lowercased title variants to look for: the name without its year, and
/// for names like "Matrix, The" also "the matrix".
pub fn title_needles(name: &str) -> Vec<String> {
    let lower = name.trim().to_lowercase();
    let mut out = vec![lower.clone()];
    for article in ["the", "a", "an", "les", "la", "le", "il", "el", "das", "der", "die"] {
        let suffix = format!(", {article}");
        if let Some(stem) = lower.strip_suffix(&suffix) {
            out.push(format!("{article} {stem}"));
            out[0] = stem.to_string();
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

fn contains_phrase(hay: &str, needle: &str) -> bool {
    let mut start = 0;
    while let Some(pos) = hay[start..].find(needle) {
        let at = start + pos;
        let end = at + needle.len();
        let before = hay[..at].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before && after {
            return true;
        }
        start = at + hay[at..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// Catalog titles mentioned in `text`, case-insensitively and with years
/// ignored. Matches must sit on word boundaries.
pub fn mentioned_titles(text: &str, catalog: &MovieCatalog) -> Vec<String> {
    let hay = text.to_lowercase();
    let mut found = BTreeSet::new();
    for movie in catalog.movies.values() {
        if title_needles(&movie.title).iter().any(|n| contains_phrase(&hay, n)) {
            found.insert(movie.display.clone());
        }
    }
    found.into_iter().collect()
}

/// One profile line of the dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSummary {
    pub sample_id: String,
    pub history_size: usize,
    pub word_limit: usize,
    pub word_count: usize,
    pub within_limit: bool,
    pub titles: Vec<String>,
    pub text: String,
}

pub fn summarize_profile(rec: &ProfileRecord, catalog: &MovieCatalog) -> Option<ProfileSummary> {
    let p = rec.profile.as_ref()?;
    Some(ProfileSummary {
        sample_id: rec.sample_id.clone(),
        history_size: rec.history_size,
        word_limit: p.word_limit,
        word_count: p.actual_word_count,
        within_limit: p.actual_word_count <= p.word_limit,
        titles: mentioned_titles(&p.text, catalog),
        text: p.text.clone(),
    })
}

/// Up to `n` profiles per (history size, word limit), drawn with the run seed.
pub fn select_profiles(records: &[ProfileRecord], n: usize, seed: u64) -> BTreeMap<(usize, usize), Vec<&ProfileRecord>> {
    let mut groups: BTreeMap<(usize, usize), Vec<&ProfileRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.profile.is_some()) {
        groups.entry((r.history_size, r.word_limit)).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    if n == 0 {
        return out;
    }
    for ((h, limit), mut group) in groups {
        group.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let mut rng = rng::stream(seed, &[rng::tag("profile-dump"), h as u64, limit as u64]);
        let mut idx = sample(&mut rng, group.len(), n.min(group.len())).into_vec();
        idx.sort_unstable();
        out.insert((h, limit), idx.into_iter().map(|i| group[i]).collect());
    }
    out
}

pub fn render_profile_report(selected: &BTreeMap<(usize, usize), Vec<&ProfileRecord>>, catalog: &MovieCatalog) -> String {
    let mut s = String::new();
    for ((h, limit), recs) in selected {
        let summaries: Vec<ProfileSummary> = recs.iter().filter_map(|r| summarize_profile(r, catalog)).collect();
        let within = summaries.iter().filter(|p| p.within_limit).count();
        let titled = summaries.iter().filter(|p| !p.titles.is_empty()).count();
        let _ = writeln!(
            s,
            "== history size {h}, word limit {limit}: {} profiles, {within} within limit, {titled} mention titles",
            summaries.len()
        );
        for p in summaries {
            let _ = writeln!(
                s,
                "-- {} | words {}/{} | within limit: {} | titles: {}",
                p.sample_id,
                p.word_count,
                p.word_limit,
                if p.within_limit { "yes" } else { "no" },
                if p.titles.is_empty() { "none".to_string() } else { p.titles.join("; ") }
            );
            let _ = writeln!(s, "{}", p.text.trim());
        }
        s.push('\n');
    }
    s
}

pub fn load_run_config(run_dir: &Path) -> Result<ExperimentConfig, ReportError> {
    Ok(ExperimentConfig::from_toml_file(&run_dir.join("config.snapshot"))?)
}

/// Text dump of `n` sampled profiles per (history size, word limit).
pub fn dump_profiles(run_dir: &Path, n: usize) -> Result<String, ReportError> {
    if n == 0 {
        return Ok(String::new());
    }
    let config = load_run_config(run_dir)?;
    let (catalog, _) = load_catalog(&config.data.movies).map_err(RunError::from)?;
    let records = load_profiles(run_dir)?;
    Ok(render_profile_report(&select_profiles(&records, n, config.seed), &catalog))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::MovieId;
    use crate::prompting::ProfileText;

    fn cell(method: Method, task: TaskKind, h: usize, len: Option<usize>, bg: Option<usize>, v: f64) -> MetricsCell {
        MetricsCell {
            method: Some(method),
            label: crate::eval::method_label(method, len, bg),
            task: Some(task),
            history_size: Some(h),
            profile_length: len,
            background_size: bg,
            n_total: 10,
            n_readable: 9,
            n_generation_failed: 0,
            reliability: Some(0.9),
            rmse: (task == TaskKind::Rating).then_some(v),
            mae: (task == TaskKind::Rating).then_some(v / 2.0),
            bias: (task == TaskKind::Rating).then_some(-v / 4.0),
            error_rate: task.is_pairwise().then_some(v / 10.0),
        }
    }

    fn grid() -> Vec<MetricsCell> {
        let mut out = Vec::new();
        for task in TaskKind::ALL {
            for h in [10, 20, 30] {
                for len in [50, 100] {
                    out.push(cell(Method::Lfm, task, h, Some(len), None, 1.0 + len as f64 / 100.0));
                }
                out.push(cell(Method::Direct, task, h, None, None, 1.1));
                for bg in [0, 300] {
                    out.push(cell(Method::Nmf, task, h, None, Some(bg), 0.9 - bg as f64 / 1000.0));
                }
                out.push(cell(Method::Default, task, h, None, None, 1.4));
            }
        }
        out
    }

    #[test]
    fn empty_metrics_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_tables(&[], &all_figures(), dir.path()), Err(ReportError::EmptyMetrics)));
        assert!(matches!(emit_charts(&[], &all_figures(), dir.path()), Err(ReportError::EmptyMetrics)));
    }

    #[test]
    fn five_figure_tables_plus_master() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_tables(&grid(), &all_figures(), dir.path()).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
        assert_eq!(names, ["metrics_all.csv", "fig2.csv", "fig3.csv", "fig4.csv", "fig5.csv", "fig6.csv"]);
        let fig2 = std::fs::read_to_string(dir.path().join("fig2.csv")).unwrap();
        assert!(fig2.starts_with("figure,task,metric,series,history_size,value,n_total\n"));
        assert!(!fig2.contains("Default"));
        assert!(!fig2.contains("NMF bg300"));
        let fig6 = std::fs::read_to_string(dir.path().join("fig6.csv")).unwrap();
        assert!(fig6.contains("6,rating,rmse,NMF,300,0.6"), "{fig6}");
        assert!(fig6.contains("6,rating,rmse,LFM 50,300,1.5,10\n"));
        assert!(!fig6.contains(",20,"));
    }

    #[test]
    fn single_cell_gives_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = vec![cell(Method::Direct, TaskKind::Rating, 10, None, None, 1.25)];
        emit_tables(&metrics, &[figure(4).unwrap()], dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("fig4.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().nth(1).unwrap(), "4,rating,bias,Direct,10,-0.3125,10");
    }

    #[test]
    fn table_values_are_copied_from_cells() {
        let metrics = grid();
        for spec in all_figures() {
            for p in figure_points(&spec, &metrics) {
                assert!(metrics.iter().any(|c| c.task == Some(p.task) && p.metric.value(c) == Some(p.value)));
            }
        }
    }

    #[test]
    fn svg_is_deterministic_with_legend() {
        let metrics = grid();
        let spec = figure(3).unwrap();
        let a = render_svg(&spec, &metrics);
        assert_eq!(a, render_svg(&spec, &metrics));
        assert!(a.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert!(a.trim_end().ends_with("</svg>"));
        for name in ["LFM 50", "LFM 100", "Direct", "NMF bg0", "Default"] {
            assert!(a.contains(&format!(">{name}</text>")), "{name}");
        }
        assert_eq!(a.matches("<g class=\"facet\">").count(), 4);
    }

    #[test]
    fn single_series_has_one_legend_entry() {
        let metrics: Vec<MetricsCell> =
            [10, 20].iter().map(|&h| cell(Method::Direct, TaskKind::Choice, h, None, None, 2.0)).collect();
        let svg = render_svg(&figure(2).unwrap(), &metrics);
        let legend = &svg[svg.find("<g class=\"legend\">").unwrap()..];
        assert_eq!(legend.matches("<text").count(), 1);
    }

    #[test]
    fn svg_text_is_escaped() {
        assert_eq!(escape_xml(r#"a<b>&"c'"#), "a&lt;b&gt;&amp;&quot;c&apos;");
    }

    #[test]
    fn figure_list_parsing() {
        let ids: Vec<u8> = parse_figure_list("6, 2,2").unwrap().iter().map(|f| f.id).collect();
        assert_eq!(ids, [2, 6]);
        assert!(matches!(parse_figure_list("7"), Err(ReportError::UnknownFigure(_))));
    }

    fn catalog() -> MovieCatalog {
        let mut c = MovieCatalog::default();
        c.insert(MovieId(1), "Matrix, The (1999)");
        c.insert(MovieId(2), "Die Hard (1988)");
        c.insert(MovieId(3), "Up (2009)");
        c
    }

    #[test]
    fn title_mentions() {
        let c = catalog();
        assert_eq!(mentioned_titles("I loved The Matrix and its action.", &c), ["Matrix, The (1999)"]);
        assert_eq!(mentioned_titles("die hard (1988) was fun", &c), ["Die Hard (1988)"]);
        assert!(mentioned_titles("I keep up with sequels", &c).contains(&"Up (2009)".to_string()));
        assert!(mentioned_titles("an upbeat comedy", &c).is_empty());
    }

    fn profile(id: &str, h: usize, limit: usize, text: &str) -> ProfileRecord {
        let words = text.split_whitespace().count();
        ProfileRecord {
            sample_id: id.into(),
            user: crate::catalog::UserId(1),
            history_size: h,
            repeat: 0,
            word_limit: limit,
            profile: Some(ProfileText {
                text: text.into(),
                word_limit: limit,
                actual_word_count: words,
                source_sample: id.into(),
            }),
            call: None,
            error: None,
        }
    }

    #[test]
    fn profile_dump_flags() {
        let recs = vec![
            profile("s1", 10, 5, "Fan of The Matrix."),
            profile("s2", 10, 5, "Likes long slow dramas with lots of talking."),
            profile("s3", 20, 50, "Action."),
        ];
        let c = catalog();
        let s = summarize_profile(&recs[0], &c).unwrap();
        assert!(s.within_limit);
        assert_eq!(s.titles, ["Matrix, The (1999)"]);
        assert!(!summarize_profile(&recs[1], &c).unwrap().within_limit);

        let picked = select_profiles(&recs, 1, 7);
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[&(10, 5)].len(), 1);
        assert_eq!(picked, select_profiles(&recs, 1, 7));
        assert!(select_profiles(&recs, 0, 7).is_empty());
        let text = render_profile_report(&select_profiles(&recs, 5, 7), &c);
        assert!(text.contains("== history size 10, word limit 5: 2 profiles, 1 within limit, 1 mention titles"));
        assert!(text.contains("titles: Matrix, The (1999)"));
    }

    #[test]
    fn zero_profiles_is_empty_report() {
        assert_eq!(dump_profiles(Path::new("/nonexistent"), 0).unwrap(), "");
    }
}
