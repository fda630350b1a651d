//! Output formats: CSV tables, minimal SVG line plots, and binary PGM
//! image dumps.

use std::io::Write;
use std::path::Path;

use flowalign::tensor::Tensor;
use flowalign::{Error, Result};

fn io_err(context: &str, e: std::io::Error) -> Error {
    Error::Config(format!("{context}: {e}"))
}

/// Comma-separated table with a header row; values use `.` decimals via
/// Rust's shortest-roundtrip float formatting.
pub fn emit_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Config(format!(
                "csv row width {} does not match header width {}",
                row.len(),
                header.len()
            )));
        }
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err("csv write", e))
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// One polyline per named series on shared axes, SVG 1.1.
pub fn emit_svg_lineplot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Config("svg plot has no series".into()));
    }
    for (name, points) in series {
        if points.is_empty() {
            return Err(Error::Config(format!("svg series '{name}' is empty")));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("svg series '{name}'"),
            });
        }
    }
    let (width, height, margin) = (640.0, 420.0, 60.0);
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| margin + (x - x_min) / (x_max - x_min) * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - (y - y_min) / (y_max - y_min) * (height - 2.0 * margin);

    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        width / 2.0
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        b = height - margin,
        r = width - margin
    ));
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        t = margin,
        b = height - margin
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{x_label}</text>\n",
        width / 2.0,
        height - margin / 3.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        16.0,
        height / 2.0,
        height / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{m}\" y=\"{}\" font-size=\"10\">{}</text>\n<text x=\"{m}\" y=\"{}\" font-size=\"10\">{}</text>\n",
        height - margin + 14.0,
        fmt_f64(x_min),
        margin - 6.0,
        fmt_f64(y_max),
        m = margin
    ));
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path_points: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path_points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            width - margin + 4.0,
            margin + 14.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| io_err("svg write", e))
}

/// Binary portable graymap (P5, maxval 255), row-major, one byte per
/// pixel: `round(255 * value)`.
pub fn dump_pgm(x: &Tensor, path: &Path) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape,
            len: x.len(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let data = x.to_vec();
    if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::PixelOutOfRange { value: bad });
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err("pgm create", e))?;
    write!(file, "P5\n{w} {h}\n255\n").map_err(|e| io_err("pgm header", e))?;
    let bytes: Vec<u8> = data.iter().map(|v| (255.0 * v).round() as u8).collect();
    file.write_all(&bytes).map_err(|e| io_err("pgm body", e))
}
