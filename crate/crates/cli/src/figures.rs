// SPDX-License-Identifier: MIT OR Apache-2.0

//! Static SVG figures: series with change points, coefficient heatmaps,
//! per-segment density bars and Granger causal graphs.
//!
//! Output depends only on the inputs (and the seed of the force-directed
//! layout), so repeated runs are byte-identical.

use std::fmt::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use varseg_core::{DetectionResult, TimeSeries};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FigureKind {
    Cp,
    Param,
    Density,
    Granger,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Layout {
    Circle,
    Star,
    Nicely,
}

/// One rendered figure; `segment` is set for per-segment graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub segment: Option<usize>,
    pub svg: String,
}

#[derive(Clone, Debug)]
pub struct FigureOptions {
    pub threshold: f64,
    pub layout: Layout,
    pub cp_color: String,
    pub seed: u64,
}

impl Default for FigureOptions {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            layout: Layout::Circle,
            cp_color: "red".into(),
            seed: 1,
        }
    }
}

pub fn render_figures(
    result: &DetectionResult,
    data: Option<&TimeSeries>,
    kind: FigureKind,
    opts: &FigureOptions,
) -> Result<Vec<Figure>, String> {
    if !(opts.threshold >= 0.0) {
        return Err("threshold must be non-negative".into());
    }
    let single = |svg| vec![Figure { segment: None, svg }];
    Ok(match kind {
        FigureKind::Cp => {
            let data = data.ok_or("the cp figure needs the data")?;
            single(render_cp(data, &result.change_points, &opts.cp_color))
        }
        FigureKind::Param => single(render_param(result)),
        FigureKind::Density => single(render_density(&densities(result, opts.threshold))),
        FigureKind::Granger => (0..result.sparse_mats.len())
            .map(|j| {
                let edges = granger_edges(&result.transition(j), opts.threshold);
                let p = result.sparse_mats[j].nrows();
                Figure {
                    segment: Some(j),
                    svg: render_granger(p, &edges, opts.layout, opts.seed, j),
                }
            })
            .collect(),
    })
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
];

/// All series as lines, with a vertical line at each change point.
pub fn render_cp(data: &TimeSeries, cps: &[usize], color: &str) -> String {
    let (w, h, m) = (800.0, 400.0, 40.0);
    let vals = data.values();
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let t_len = data.len();
    let x = |t: usize| m + (w - 2.0 * m) * (t as f64 - 1.0) / (t_len.max(2) as f64 - 1.0);
    let y = |v: f64| h - m - (h - 2.0 * m) * (v - lo) / span;
    let mut s = header(w, h);
    for c in 0..data.dim() {
        let mut pts = String::new();
        for t in 1..=t_len {
            let _ = write!(pts, "{:.2},{:.2} ", x(t), y(vals[(t - 1, c)]));
        }
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"0.6\" points=\"{}\"/>",
            PALETTE[c % PALETTE.len()],
            pts.trim_end()
        );
    }
    for &cp in cps {
        let _ = writeln!(
            s,
            "<line class=\"cp\" x1=\"{0:.2}\" y1=\"{1:.2}\" x2=\"{0:.2}\" y2=\"{2:.2}\" stroke=\"{3}\" stroke-width=\"1.5\"/>",
            x(cp),
            m,
            h - m,
            color
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{:.0}\" height=\"{:.0}\" fill=\"none\" stroke=\"black\"/>",
        w - 2.0 * m,
        h - 2.0 * m
    );
    s.push_str("</svg>\n");
    s
}

/// Blue for negative, red for positive, white at zero.
fn diverging(v: f64, scale: f64) -> String {
    let a = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if a >= 0.0 {
        format!("#ff{0:02x}{0:02x}", fade(a))
    } else {
        format!("#{0:02x}{0:02x}ff", fade(a))
    }
}

/// Heatmaps of the per-segment transition estimates, side by side.
pub fn render_param(result: &DetectionResult) -> String {
    let mats: Vec<DMatrix<f64>> = (0..result.sparse_mats.len()).map(|j| result.transition(j)).collect();
    let scale = mats
        .iter()
        .flat_map(|m| m.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let cell = 12.0;
    let gap = 20.0;
    let rows = mats.iter().map(|m| m.nrows()).max().unwrap_or(1) as f64;
    let width: f64 = mats.iter().map(|m| m.ncols() as f64 * cell + gap).sum::<f64>() + gap;
    let mut s = header(width, rows * cell + 2.0 * gap);
    let mut left = gap;
    for (j, m) in mats.iter().enumerate() {
        let _ = writeln!(s, "<g class=\"segment\" id=\"segment{}\">", j + 1);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\"/>",
                    left + c as f64 * cell,
                    gap + r as f64 * cell,
                    diverging(m[(r, c)], scale)
                );
            }
        }
        let _ = writeln!(
            s,
            "<rect x=\"{left:.1}\" y=\"{gap:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>\n</g>",
            m.ncols() as f64 * cell,
            m.nrows() as f64 * cell
        );
        left += m.ncols() as f64 * cell + gap;
    }
    s.push_str("</svg>\n");
    s
}

/// Fraction of entries of each segment's transition estimate with magnitude
/// above `threshold`.
pub fn densities(result: &DetectionResult, threshold: f64) -> Vec<f64> {
    (0..result.sparse_mats.len())
        .map(|j| {
            let m = result.transition(j);
            m.iter().filter(|v| v.abs() > threshold).count() as f64 / m.len().max(1) as f64
        })
        .collect()
}

pub fn render_density(values: &[f64]) -> String {
    let (w, h, m) = (100.0 + 60.0 * values.len() as f64, 300.0, 40.0);
    let mut s = header(w, h);
    for (j, v) in values.iter().enumerate() {
        let bar_h = (h - 2.0 * m) * v.clamp(0.0, 1.0);
        let x = m + 10.0 + 60.0 * j as f64;
        let _ = writeln!(
            s,
            "<rect class=\"bar\" data-value=\"{v}\" x=\"{x:.1}\" y=\"{:.2}\" width=\"40\" height=\"{bar_h:.2}\" fill=\"#1f77b4\"/>",
            h - m - bar_h
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{:.3}</text>",
            x + 20.0,
            h - m - bar_h - 4.0,
            v
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"black\"/>",
        h - m,
        w - m
    );
    s.push_str("</svg>\n");
    s
}

/// Directed edges `i → j` (0-based) with `|Φ^(l)(j, i)| > threshold` for some
/// lag `l`, i.e. series `i` Granger-causes series `j`. Self effects are not
/// drawn.
pub fn granger_edges(transition: &DMatrix<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let p = transition.nrows();
    let q = transition.ncols() / p.max(1);
    let mut edges = Vec::new();
    for i in 0..p {
        for j in 0..p {
            if i != j && (0..q).any(|l| transition[(j, l * p + i)].abs() > threshold) {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Node positions in the unit square.
pub fn layout_positions(p: usize, edges: &[(usize, usize)], layout: Layout, seed: u64) -> Vec<(f64, f64)> {
    let ring = |k: usize, n: usize, r: f64| {
        let a = std::f64::consts::TAU * k as f64 / n.max(1) as f64 - std::f64::consts::FRAC_PI_2;
        (0.5 + r * a.cos(), 0.5 + r * a.sin())
    };
    match layout {
        Layout::Circle => (0..p).map(|k| ring(k, p, 0.4)).collect(),
        Layout::Star => {
            let mut degree = vec![0usize; p];
            for &(a, b) in edges {
                degree[a] += 1;
                degree[b] += 1;
            }
            // first node of maximal degree
            let hub = (0..p).rev().max_by_key(|&k| degree[k]).unwrap_or(0);
            let mut out = vec![(0.5, 0.5); p];
            let others: Vec<usize> = (0..p).filter(|&k| k != hub).collect();
            for (n, &k) in others.iter().enumerate() {
                out[k] = ring(n, others.len(), 0.4);
            }
            out
        }
        Layout::Nicely => force_directed(p, edges, seed),
    }
}

/// Fruchterman-Reingold layout from seeded random starting points.
fn force_directed(p: usize, edges: &[(usize, usize)], seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<(f64, f64)> = (0..p)
        .map(|_| (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)))
        .collect();
    if p < 2 {
        return vec![(0.5, 0.5); p];
    }
    let k = (1.0 / p as f64).sqrt();
    let iters = 200;
    for it in 0..iters {
        let temp = 0.1 * (1.0 - it as f64 / iters as f64);
        let mut disp = vec![(0.0, 0.0); p];
        for a in 0..p {
            for b in 0..p {
                if a == b {
                    continue;
                }
                let (dx, dy) = (pos[a].0 - pos[b].0, pos[a].1 - pos[b].1);
                let d = (dx * dx + dy * dy).sqrt().max(1e-6);
                let f = k * k / d;
                disp[a].0 += dx / d * f;
                disp[a].1 += dy / d * f;
            }
        }
        for &(a, b) in edges {
            let (dx, dy) = (pos[a].0 - pos[b].0, pos[a].1 - pos[b].1);
            let d = (dx * dx + dy * dy).sqrt().max(1e-6);
            let f = d * d / k;
            disp[a].0 -= dx / d * f;
            disp[a].1 -= dy / d * f;
            disp[b].0 += dx / d * f;
            disp[b].1 += dy / d * f;
        }
        for (q, d) in pos.iter_mut().zip(&disp) {
            let len = (d.0 * d.0 + d.1 * d.1).sqrt().max(1e-12);
            let step = len.min(temp);
            q.0 = (q.0 + d.0 / len * step).clamp(0.05, 0.95);
            q.1 = (q.1 + d.1 / len * step).clamp(0.05, 0.95);
        }
    }
    pos
}

pub fn render_granger(p: usize, edges: &[(usize, usize)], layout: Layout, seed: u64, segment: usize) -> String {
    let size = 400.0;
    let r = 10.0;
    let pos: Vec<(f64, f64)> = layout_positions(p, edges, layout, seed)
        .into_iter()
        .map(|(x, y)| (x * size, y * size))
        .collect();
    let mut s = header(size, size);
    s.push_str(
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"10\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto\">\
         <path d=\"M0,0 L10,5 L0,10 z\" fill=\"#555\"/></marker></defs>\n",
    );
    let _ = writeln!(
        s,
        "<text x=\"10\" y=\"18\" font-size=\"12\">Segment {}</text>",
        segment + 1
    );
    for &(a, b) in edges {
        let (x1, y1) = pos[a];
        let (x2, y2) = pos[b];
        let d = ((x2 - x1).powi(2) + (y2 - y1).powi(2)).sqrt().max(1e-9);
        let (ux, uy) = ((x2 - x1) / d, (y2 - y1) / d);
        let _ = writeln!(
            s,
            "<line class=\"edge\" data-from=\"{}\" data-to=\"{}\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#555\" marker-end=\"url(#arrow)\"/>",
            a + 1,
            b + 1,
            x1 + ux * r,
            y1 + uy * r,
            x2 - ux * r,
            y2 - uy * r
        );
    }
    for (k, (x, y)) in pos.iter().enumerate() {
        let _ = writeln!(
            s,
            "<circle class=\"node\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r}\" fill=\"#ffd27f\" stroke=\"black\"/>\n\
             <text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"9\" text-anchor=\"middle\">{}</text>",
            y + 3.0,
            k + 1
        );
    }
    s.push_str("</svg>\n");
    s
}
