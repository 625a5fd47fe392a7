//! Static PNG line plots of the CSV artifacts a command leaves behind.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use advanchor_core::{LabError, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Register a system font once; plots lose their labels when none is found.
fn font_available() -> bool {
    static FOUND: OnceLock<bool> = OnceLock::new();
    *FOUND.get_or_init(|| {
        let env = std::env::var("ADVANCHOR_FONT").ok();
        for p in env.iter().map(String::as_str).chain(FONT_PATHS) {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn plot_err(e: impl std::fmt::Display) -> LabError {
    LabError::Serde(format!("plot: {e}"))
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series
        .iter()
        .flat_map(|s| &s.points)
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |a: f64, b: f64| {
        if (b - a).abs() < 1e-12 {
            (a - 0.5, b + 0.5)
        } else {
            (a, b + 0.05 * (b - a))
        }
    };
    (
        pad(x0, x1),
        pad(y0.min(0.0).max(y0 - 0.05 * (y1 - y0).abs()), y1),
    )
}

/// Line plot of several series with a legend.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let labels = font_available();
    let root = BitMapBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if labels {
        builder
            .caption(title, ("sans-serif", 20))
            .x_label_area_size(40)
            .y_label_area_size(56);
    }
    let mut chart = builder
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if labels {
        mesh.x_desc(x_label).y_desc(y_label);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        let drawn = chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if labels {
            drawn.label(s.name.clone()).legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        }
        if pts.len() <= 60 {
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
    }
    if labels {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// A CSV file read as named columns.
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| LabError::Serde(format!("{}: {e}", path.display())))?;
        let headers = r
            .headers()
            .map_err(|e| LabError::Serde(e.to_string()))?
            .iter()
            .map(String::from)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LabError::Serde(e.to_string()))?;
        Ok(Self { headers, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LabError::Serde(format!("missing column `{name}`")))
    }

    pub fn num(&self, row: &[String], name: &str) -> Result<f64> {
        row[self.col(name)?]
            .parse()
            .map_err(|_| LabError::Serde(format!("column `{name}` is not numeric")))
    }

    pub fn text<'a>(&self, row: &'a [String], name: &str) -> Result<&'a str> {
        Ok(&row[self.col(name)?])
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    /// Rows grouped by the value of `key`, in first-appearance order.
    pub fn groups(&self, key: &str) -> Result<Vec<(String, Vec<&Vec<String>>)>> {
        let k = self.col(key)?;
        let mut out: Vec<(String, Vec<&Vec<String>>)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(g, _)| *g == r[k]) {
                Some((_, v)) => v.push(r),
                None => out.push((r[k].clone(), vec![r])),
            }
        }
        Ok(out)
    }
}

fn xy(t: &Table, rows: &[&Vec<String>], x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
    rows.iter()
        .map(|r| Ok((t.num(r, x)?, t.num(r, y)?)))
        .collect()
}

/// Render every plot whose source CSV exists in `dir`; returns the files written.
pub fn plot_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let loss = dir.join("loss_trace.csv");
    if loss.exists() {
        let t = Table::read(&loss)?;
        let all: Vec<&Vec<String>> = t.rows().iter().collect();
        let series = ["l_op", "l_reg", "total"]
            .iter()
            .map(|c| {
                Ok(Series {
                    name: c.to_string(),
                    points: xy(&t, &all, "step", c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = dir.join("loss_trace.png");
        line_plot(&out, "Unlearning losses", "step", "loss", &series)?;
        written.push(out);
    }
    let anchor = dir.join("anchor_trace.csv");
    if anchor.exists() {
        let t = Table::read(&anchor)?;
        if !t.rows().is_empty() {
            let all: Vec<&Vec<String>> = t.rows().iter().collect();
            let series = vec![
                Series {
                    name: "cosine".into(),
                    points: xy(&t, &all, "visit", "value")?,
                },
                Series {
                    name: "|e_adv|".into(),
                    points: xy(&t, &all, "visit", "e_adv_norm")?,
                },
            ];
            let out = dir.join("anchor_trace.png");
            line_plot(
                &out,
                "Adversarial loss per evaluation",
                "visit",
                "value",
                &series,
            )?;
            written.push(out);
        }
    }
    let anchors = dir.join("anchors.csv");
    if anchors.exists() {
        let t = Table::read(&anchors)?;
        for (axis, x, title) in [
            ("o1", "similarity", "Preservation vs anchor similarity"),
            ("o2", "spec", "Preservation vs shared prefix"),
            ("o3", "spec", "Attribute-bag anchors"),
        ] {
            let rows: Vec<&Vec<String>> = t
                .rows()
                .iter()
                .filter(|r| t.text(r, "axis").ok() == Some(axis))
                .collect();
            let mut series = Vec::new();
            for metric in ["preserve_acc", "erase_acc"] {
                let mut pts = Vec::new();
                for (i, r) in rows.iter().enumerate() {
                    let xv = if x == "similarity" {
                        t.num(r, x)?
                    } else if axis == "o2" {
                        prefix_len(t.text(r, "spec")?).unwrap_or(i as f64)
                    } else {
                        (i % 2) as f64
                    };
                    pts.push((xv, t.num(r, metric)?));
                }
                pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
                series.push(Series {
                    name: metric.into(),
                    points: pts,
                });
            }
            let out = dir.join(format!("anchors_{axis}.png"));
            line_plot(&out, title, x, "ACC", &series)?;
            written.push(out);
        }
    }
    for name in ["strategies", "sweep_s"] {
        let p = dir.join(format!("{name}.csv"));
        if !p.exists() {
            continue;
        }
        let t = Table::read(&p)?;
        let mut series = Vec::new();
        for (variant, rows) in t.groups("variant")? {
            let x = if name == "sweep_s" { "S" } else { "" };
            for metric in ["erase_acc", "preserve_acc", "median_stop_iteration"] {
                let pts = rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        Ok((
                            if x.is_empty() { i as f64 } else { t.num(r, x)? },
                            t.num(r, metric)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                series.push(Series {
                    name: format!("{variant} {metric}"),
                    points: pts,
                });
            }
        }
        let out = dir.join(format!("{name}.png"));
        let x_label = if name == "sweep_s" {
            "S"
        } else {
            "strategy (alternating, sequential, cyclical)"
        };
        line_plot(&out, name, x_label, "value", &series)?;
        written.push(out);
    }
    Ok(written)
}

fn prefix_len(label: &str) -> Option<f64> {
    label.strip_prefix("long")?.split(':').next()?.parse().ok()
}
