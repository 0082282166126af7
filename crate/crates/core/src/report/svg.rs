//! Deterministic SVG heatmaps.
//!
//! Colormap: linear RGB interpolation from white `#ffffff` at the matrix
//! minimum to navy `#08306b` at the maximum. Every channel decreases
//! monotonically, so darker always means larger. Masked-out cells are left
//! blank, with only the grid outline drawn.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const LOW: [f64; 3] = [255.0, 255.0, 255.0];
const HIGH: [f64; 3] = [8.0, 48.0, 107.0];
const CELL: usize = 24;
const FONT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Cells drawn when true; all cells when absent.
    pub mask: Option<Vec<bool>>,
}

impl Heatmap {
    /// Layers × heads matrix with `L{l}` and `H{h}` labels.
    pub fn heads(title: &str, values: &[f64], n_layers: usize, n_heads: usize, mask: Option<&[bool]>) -> Self {
        Self {
            title: title.to_string(),
            rows: n_layers,
            cols: n_heads,
            values: values.to_vec(),
            row_labels: (0..n_layers).map(|l| format!("L{l}")).collect(),
            col_labels: (0..n_heads).map(|h| format!("H{h}")).collect(),
            mask: mask.map(<[bool]>::to_vec),
        }
    }

    pub fn square(title: &str, values: &[f64], labels: &[String]) -> Self {
        Self {
            title: title.to_string(),
            rows: labels.len(),
            cols: labels.len(),
            values: values.to_vec(),
            row_labels: labels.to_vec(),
            col_labels: labels.to_vec(),
            mask: None,
        }
    }
}

/// RGB of `t ∈ [0, 1]`; values outside are clamped.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (LOW[c] + (HIGH[c] - LOW[c]) * t).round() as u8;
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_heatmap(h: &Heatmap) -> Result<String> {
    let n = h.rows * h.cols;
    if h.rows == 0 || h.cols == 0 {
        return Err(Error::Empty("heatmap cells".into()));
    }
    if h.values.len() != n || h.row_labels.len() != h.rows || h.col_labels.len() != h.cols {
        return Err(Error::Dimension(format!("heatmap {}×{} with {} values", h.rows, h.cols, h.values.len())));
    }
    if h.mask.as_ref().is_some_and(|m| m.len() != n) {
        return Err(Error::Dimension("mask does not match the heatmap".into()));
    }
    if h.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap values"));
    }
    let lo = h.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = h.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let label_w = |labels: &[String]| labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) * 6 + 8;
    let left = label_w(&h.row_labels);
    let top = 24 + label_w(&h.col_labels);
    let grid_w = h.cols * CELL;
    let grid_h = h.rows * CELL;
    let legend_y = top + grid_h + 12;
    let width = left + grid_w.max(160) + 16;
    let height = legend_y + 36;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="{FONT}">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="14" font-size="12">{}</text>"#, escape(&h.title));
    for (c, label) in h.col_labels.iter().enumerate() {
        let x = left + c * CELL + CELL / 2 + FONT / 3;
        let _ = writeln!(s, r#"<text transform="translate({x},{}) rotate(-90)">{}</text>"#, top - 4, escape(label));
    }
    for (r, label) in h.row_labels.iter().enumerate() {
        let y = top + r * CELL + CELL / 2 + FONT / 3;
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, left - 4, escape(label));
    }
    for r in 0..h.rows {
        for c in 0..h.cols {
            let i = r * h.cols + c;
            let (x, y) = (left + c * CELL, top + r * CELL);
            let shown = h.mask.as_ref().is_none_or(|m| m[i]);
            if shown {
                let t = if span > 0.0 { (h.values[i] - lo) / span } else { 0.0 };
                let [red, green, blue] = colormap(t);
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{red:02x}{green:02x}{blue:02x}" stroke="#cccccc"><title>{:.6}</title></rect>"##,
                    h.values[i]
                );
            } else {
                let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="none" stroke="#cccccc"/>"##);
            }
        }
    }
    let steps = 32;
    for k in 0..steps {
        let [red, green, blue] = colormap(k as f64 / (steps - 1) as f64);
        let _ = writeln!(s, r##"<rect x="{}" y="{legend_y}" width="5" height="10" fill="#{red:02x}{green:02x}{blue:02x}"/>"##, left + k * 5);
    }
    let _ = writeln!(s, r#"<text x="{left}" y="{}">{lo:.4}</text>"#, legend_y + 24);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.4}</text>"#, left + steps * 5, legend_y + 24);
    s.push_str("</svg>\n");
    Ok(s)
}
