//! Fixed-heading planar slices of value functions, rendered as SVG.
//!
//! The zero level set on the slice is traced with marching squares (linear
//! edge interpolation, ambiguous saddles resolved by the cell-center sign)
//! and assembled into polylines. Rendering is deliberately plain: axes in
//! state units, one path per contour.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::{Grid, TimeIndexedValueFunction, ValueFunction};

/// A rendered slice plus the structural facts tests and tooling check.
#[derive(Clone, Debug)]
pub struct SliceRender {
    pub svg: String,
    /// Assembled zero-level polylines in state units.
    pub contours: Vec<Vec<[f64; 2]>>,
    /// Heading the slice was taken at (wrapped onto the grid when periodic).
    pub theta: f64,
    /// Time of the frame actually rendered, for time-indexed inputs.
    pub frame_time: Option<f64>,
    /// Set when the requested time missed every stored frame and the nearest
    /// one was used instead.
    pub nearest_warning: bool,
}

impl SliceRender {
    /// Joint bounding box of all contours: [xmin, ymin, xmax, ymax].
    pub fn bbox(&self) -> Option<[f64; 4]> {
        let mut b: Option<[f64; 4]> = None;
        for c in &self.contours {
            for p in c {
                b = Some(match b {
                    None => [p[0], p[1], p[0], p[1]],
                    Some([x0, y0, x1, y1]) => {
                        [x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1])]
                    }
                });
            }
        }
        b
    }
}

fn require_slicable(grid: &Grid, theta: f64) -> Result<f64> {
    if grid.dim_count() != 3 {
        return Err(Error::argument(format!(
            "slicing expects a 3-dim pose grid, got {} dims",
            grid.dim_count()
        )));
    }
    let dim = grid.dim(2);
    if dim.periodic {
        let span = dim.max - dim.min;
        Ok(dim.min + (theta - dim.min).rem_euclid(span))
    } else if theta < dim.min - 1e-12 || theta > dim.max + 1e-12 {
        Err(Error::argument(format!(
            "heading {theta} outside the grid range [{}, {}]",
            dim.min, dim.max
        )))
    } else {
        Ok(theta)
    }
}

/// Sample the (x, y) plane of `vf` at a fixed heading. Values are exact at
/// the plane's nodes and linear in heading between the two nearest planes.
fn sample_plane(vf: &ValueFunction, theta: f64) -> Result<Vec<Vec<f64>>> {
    let g = vf.grid();
    let (nx, ny) = (g.dim(0).nodes, g.dim(1).nodes);
    let mut vals = vec![vec![0.0; ny]; nx];
    for (ix, col) in vals.iter_mut().enumerate() {
        let x = g.coord(0, ix);
        for (iy, v) in col.iter_mut().enumerate() {
            let y = g.coord(1, iy);
            *v = vf.interpolate(&[x, y, theta])?;
        }
    }
    Ok(vals)
}

/// Marching squares over node-sampled values: returns raw line segments of
/// the zero level set. `inside` is `value <= 0`.
fn trace_segments(g: &Grid, vals: &[Vec<f64>]) -> Vec<[[f64; 2]; 2]> {
    let (nx, ny) = (g.dim(0).nodes, g.dim(1).nodes);
    let mut segs = Vec::new();
    let cross = |a: f64, b: f64| a / (a - b);
    for ix in 0..nx - 1 {
        let (x0, x1) = (g.coord(0, ix), g.coord(0, ix + 1));
        for iy in 0..ny - 1 {
            let (y0, y1) = (g.coord(1, iy), g.coord(1, iy + 1));
            let v00 = vals[ix][iy];
            let v10 = vals[ix + 1][iy];
            let v11 = vals[ix + 1][iy + 1];
            let v01 = vals[ix][iy + 1];
            let mask = usize::from(v00 <= 0.0)
                | usize::from(v10 <= 0.0) << 1
                | usize::from(v11 <= 0.0) << 2
                | usize::from(v01 <= 0.0) << 3;
            if mask == 0 || mask == 15 {
                continue;
            }
            let bottom = || [x0 + cross(v00, v10) * (x1 - x0), y0];
            let right = || [x1, y0 + cross(v10, v11) * (y1 - y0)];
            let top = || [x0 + cross(v01, v11) * (x1 - x0), y1];
            let left = || [x0, y0 + cross(v00, v01) * (y1 - y0)];
            match mask {
                1 => segs.push([left(), bottom()]),
                2 => segs.push([bottom(), right()]),
                3 => segs.push([left(), right()]),
                4 => segs.push([right(), top()]),
                6 => segs.push([bottom(), top()]),
                7 => segs.push([left(), top()]),
                8 => segs.push([top(), left()]),
                9 => segs.push([bottom(), top()]),
                11 => segs.push([right(), top()]),
                12 => segs.push([left(), right()]),
                13 => segs.push([bottom(), right()]),
                14 => segs.push([left(), bottom()]),
                5 | 10 => {
                    let center_inside = 0.25 * (v00 + v10 + v11 + v01) <= 0.0;
                    let pair_a = (mask == 5) == center_inside;
                    if pair_a {
                        segs.push([left(), top()]);
                        segs.push([bottom(), right()]);
                    } else {
                        segs.push([left(), bottom()]);
                        segs.push([right(), top()]);
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    segs
}

type PointKey = (i64, i64);

fn key(p: [f64; 2], scale: f64) -> PointKey {
    ((p[0] * scale).round() as i64, (p[1] * scale).round() as i64)
}

/// Chain shared endpoints into polylines. Closed loops repeat their first
/// point at the end.
fn assemble(segs: &[[[f64; 2]; 2]], eps: f64) -> Vec<Vec<[f64; 2]>> {
    let scale = 1.0 / eps;
    // Nodes exactly on the level set emit zero-length segments; drop them
    // before chaining.
    let segs: Vec<[[f64; 2]; 2]> = segs
        .iter()
        .filter(|s| key(s[0], scale) != key(s[1], scale))
        .copied()
        .collect();
    let mut adj: BTreeMap<PointKey, Vec<usize>> = BTreeMap::new();
    for (i, s) in segs.iter().enumerate() {
        adj.entry(key(s[0], scale)).or_default().push(i);
        adj.entry(key(s[1], scale)).or_default().push(i);
    }
    let mut used = vec![false; segs.len()];
    let mut chains = Vec::new();
    for start in 0..segs.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let mut chain = vec![segs[start][0], segs[start][1]];
        // Extend forward from the tail, then backward from the head.
        for pass in 0..2 {
            loop {
                let end = *chain.last().unwrap();
                let next = adj
                    .get(&key(end, scale))
                    .and_then(|ids| ids.iter().find(|i| !used[**i]))
                    .copied();
                let Some(i) = next else { break };
                used[i] = true;
                let (a, b) = (segs[i][0], segs[i][1]);
                chain.push(if key(a, scale) == key(end, scale) {
                    b
                } else {
                    a
                });
            }
            if pass == 0 {
                chain.reverse();
            }
        }
        chains.push(chain);
    }
    chains
}

fn svg_document(g: &Grid, contours: &[Vec<[f64; 2]>], caption: &str) -> String {
    const W: f64 = 720.0;
    const M: f64 = 60.0;
    let (xmin, xmax) = (g.dim(0).min, g.dim(0).max);
    let (ymin, ymax) = (g.dim(1).min, g.dim(1).max);
    let sx = (W - 2.0 * M) / (xmax - xmin);
    let sy = (W - 2.0 * M) / (ymax - ymin);
    let px = |x: f64| M + (x - xmin) * sx;
    let py = |y: f64| W - M - (y - ymin) * sy;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{W}\" \
         viewBox=\"0 0 {W} {W}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    out.push_str(&format!(
        "  <rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"white\" \
         stroke=\"#333\" stroke-width=\"1\"/>\n",
        W - 2.0 * M,
        W - 2.0 * M
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{caption}</text>\n",
        W / 2.0,
        M - 20.0
    ));
    // Five ticks per axis, labeled in state units.
    for i in 0..5 {
        let f = i as f64 / 4.0;
        let xv = xmin + f * (xmax - xmin);
        let yv = ymin + f * (ymax - ymin);
        out.push_str(&format!(
            "  <line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#333\"/>\n  \
             <text x=\"{0}\" y=\"{3}\" text-anchor=\"middle\">{4:.2}</text>\n",
            px(xv),
            W - M,
            W - M + 6.0,
            W - M + 22.0,
            xv
        ));
        out.push_str(&format!(
            "  <line x1=\"{0}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"#333\"/>\n  \
             <text x=\"{3}\" y=\"{4}\" text-anchor=\"end\">{5:.2}</text>\n",
            M - 6.0,
            M,
            py(yv),
            M - 10.0,
            py(yv) + 4.0,
            yv
        ));
    }
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">x</text>\n",
        W / 2.0,
        W - M + 40.0
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 {} {})\">y</text>\n",
        M - 40.0,
        W / 2.0,
        M - 40.0,
        W / 2.0
    ));
    for c in contours {
        let mut d = String::new();
        for (i, p) in c.iter().enumerate() {
            d.push_str(if i == 0 { "M" } else { " L" });
            d.push_str(&format!("{:.2} {:.2}", px(p[0]), py(p[1])));
        }
        out.push_str(&format!(
            "  <path d=\"{d}\" fill=\"none\" stroke=\"#b3302e\" stroke-width=\"1.5\"/>\n"
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Slice a single frame at a fixed heading and render it.
pub fn slice_frame(vf: &ValueFunction, theta: f64, caption: &str) -> Result<SliceRender> {
    let g = vf.grid();
    let theta = require_slicable(g, theta)?;
    let vals = sample_plane(vf, theta)?;
    let eps = 1e-9 * (g.dx(0) + g.dx(1));
    let contours = assemble(&trace_segments(g, &vals), eps);
    let svg = svg_document(g, &contours, caption);
    Ok(SliceRender {
        svg,
        contours,
        theta,
        frame_time: None,
        nearest_warning: false,
    })
}

/// Slice the frame nearest to `time`; a miss beyond tolerance still renders
/// but flags the warning.
pub fn slice_time_indexed(
    tif: &TimeIndexedValueFunction,
    time: f64,
    theta: f64,
    caption: &str,
) -> Result<SliceRender> {
    let idx = tif.nearest_index(time);
    let actual = tif.times()[idx];
    let missed = (actual - time).abs() > 1e-9;
    let caption = if missed {
        format!("{caption} (requested t = {time}, nearest stored frame t = {actual})")
    } else {
        caption.to_string()
    };
    let mut render = slice_frame(&tif.frames()[idx], theta, &caption)?;
    render.frame_time = Some(actual);
    render.nearest_warning = missed;
    Ok(render)
}
