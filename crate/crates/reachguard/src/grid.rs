//! Rectangular grids and the value functions sampled on them.
//!
//! A set is represented implicitly as the sub-zero level set of a value
//! function: `x` belongs to the set iff `V(x) <= 0`. Under that encoding set
//! union is a pointwise `min` and intersection a pointwise `max`. Grids and
//! value functions are immutable once built; every operation returns a new
//! object.
//!
//! Storage is row-major in dimension declaration order, so the last dimension
//! varies fastest: for a 3-D grid, `flat = (i0 * n1 + i1) * n2 + i2`.

use std::sync::Arc;

use crate::error::{Error, Result};

/// One grid dimension. For periodic dimensions `max` is the excluded wrap
/// point: nodes cover `[min, max)` and spacing is `(max - min) / nodes`.
/// Non-periodic dimensions include both endpoints with spacing
/// `(max - min) / (nodes - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DimSpec {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
    pub periodic: bool,
}

/// Rectangular grid over `dim_count` dimensions.
#[derive(Debug, PartialEq)]
pub struct Grid {
    dims: Vec<DimSpec>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(dims: Vec<DimSpec>) -> Result<Arc<Grid>> {
        if dims.is_empty() {
            return Err(Error::argument("grid needs at least one dimension"));
        }
        for (k, d) in dims.iter().enumerate() {
            if !d.min.is_finite() || !d.max.is_finite() {
                return Err(Error::argument(format!("dim {k}: non-finite extent")));
            }
            if d.min >= d.max {
                return Err(Error::argument(format!(
                    "dim {k}: min {} must be below max {}",
                    d.min, d.max
                )));
            }
            if d.nodes < 3 {
                return Err(Error::argument(format!(
                    "dim {k}: {} nodes, need at least 3",
                    d.nodes
                )));
            }
        }
        let mut strides = vec![1usize; dims.len()];
        let mut len = 1usize;
        for k in (0..dims.len()).rev() {
            strides[k] = len;
            len = len
                .checked_mul(dims[k].nodes)
                .ok_or_else(|| Error::argument("grid size overflows usize"))?;
        }
        Ok(Arc::new(Grid { dims, strides, len }))
    }

    pub fn dim_count(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[DimSpec] {
        &self.dims
    }

    pub fn dim(&self, k: usize) -> &DimSpec {
        &self.dims[k]
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node spacing along dim `k`.
    pub fn dx(&self, k: usize) -> f64 {
        let d = &self.dims[k];
        let denom = if d.periodic { d.nodes } else { d.nodes - 1 };
        (d.max - d.min) / denom as f64
    }

    /// Coordinate of node `i` along dim `k`.
    pub fn coord(&self, k: usize, i: usize) -> f64 {
        self.dims[k].min + self.dx(k) * i as f64
    }

    /// Flat index of a multi-index. Debug-checked bounds.
    pub fn index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dims.len());
        let mut flat = 0;
        for (k, &i) in multi.iter().enumerate() {
            debug_assert!(i < self.dims[k].nodes);
            flat += i * self.strides[k];
        }
        flat
    }

    /// Multi-index of a flat index.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut multi = vec![0; self.dims.len()];
        for k in 0..self.dims.len() {
            multi[k] = flat / self.strides[k];
            flat %= self.strides[k];
        }
        multi
    }

    /// Coordinates of the node at a flat index.
    pub fn node_coords(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.coord(k, i))
            .collect()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// True when both handles refer to one grid, either physically or by value.
    pub fn same_as(self: &Arc<Self>, other: &Arc<Grid>) -> bool {
        Arc::ptr_eq(self, other) || **self == **other
    }
}

/// Scalar field sampled at every grid node. Finite everywhere.
#[derive(Clone, Debug)]
pub struct ValueFunction {
    grid: Arc<Grid>,
    data: Arc<Vec<f64>>,
}

impl ValueFunction {
    pub fn new(grid: Arc<Grid>, data: Vec<f64>) -> Result<ValueFunction> {
        if data.len() != grid.len() {
            return Err(Error::argument(format!(
                "data length {} does not match grid size {}",
                data.len(),
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::argument(format!("non-finite value at node {i}")));
        }
        Ok(ValueFunction {
            grid,
            data: Arc::new(data),
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Pointwise minimum; the union of the two encoded sets.
    pub fn set_union(&self, other: &ValueFunction) -> Result<ValueFunction> {
        self.zip_with(other, f64::min)
    }

    /// Pointwise maximum; the intersection of the two encoded sets.
    pub fn set_intersect(&self, other: &ValueFunction) -> Result<ValueFunction> {
        self.zip_with(other, f64::max)
    }

    fn zip_with(&self, other: &ValueFunction, f: fn(f64, f64) -> f64) -> Result<ValueFunction> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::GridMismatch(
                "set operation on value functions from different grids".into(),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        ValueFunction::new(self.grid.clone(), data)
    }

    /// Multilinear interpolation at `x`. Periodic dims wrap; leaving the
    /// domain of a non-periodic dim is an error.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        let cell = self.locate(x)?;
        Ok(self.blend_corners(&cell, |flat, _| self.data[flat]))
    }

    /// Gradient at `x`: nodal finite differences (central in the interior,
    /// one-sided at non-periodic boundaries, wrapped across periodic seams)
    /// interpolated multilinearly per component.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cell = self.locate(x)?;
        let d = self.grid.dim_count();
        let mut out = vec![0.0; d];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = self.blend_corners(&cell, |flat, multi| self.node_derivative(flat, multi, k));
        }
        Ok(out)
    }

    /// One finite-difference derivative at a node identified by flat and
    /// multi index.
    fn node_derivative(&self, flat: usize, multi: &[usize], k: usize) -> f64 {
        let n = self.grid.dim(k).nodes;
        let stride = self.grid.strides()[k];
        let dx = self.grid.dx(k);
        let i = multi[k];
        if self.grid.dim(k).periodic {
            let prev = flat - i * stride + ((i + n - 1) % n) * stride;
            let next = flat - i * stride + ((i + 1) % n) * stride;
            (self.data[next] - self.data[prev]) / (2.0 * dx)
        } else if i == 0 {
            (self.data[flat + stride] - self.data[flat]) / dx
        } else if i == n - 1 {
            (self.data[flat] - self.data[flat - stride]) / dx
        } else {
            (self.data[flat + stride] - self.data[flat - stride]) / (2.0 * dx)
        }
    }

    /// Resolve `x` to a cell: lower corner index, neighbor index, and
    /// fractional position per dim.
    fn locate(&self, x: &[f64]) -> Result<Vec<CellCoord>> {
        let g = &self.grid;
        if x.len() != g.dim_count() {
            return Err(Error::argument(format!(
                "query has {} coordinates, grid has {} dims",
                x.len(),
                g.dim_count()
            )));
        }
        let mut cell = Vec::with_capacity(x.len());
        for (k, &xi) in x.iter().enumerate() {
            let d = g.dim(k);
            let dx = g.dx(k);
            if !xi.is_finite() {
                return Err(Error::argument(format!("non-finite coordinate in dim {k}")));
            }
            if d.periodic {
                let span = d.max - d.min;
                let u = (xi - d.min).rem_euclid(span) / dx;
                let mut i0 = u.floor() as usize;
                if i0 >= d.nodes {
                    i0 = d.nodes - 1;
                }
                cell.push(CellCoord {
                    i0,
                    i1: (i0 + 1) % d.nodes,
                    frac: (u - i0 as f64).clamp(0.0, 1.0),
                });
            } else {
                let tol = 1e-12 * (d.max - d.min);
                if xi < d.min - tol || xi > d.max + tol {
                    return Err(Error::OutOfDomain {
                        dim: k,
                        value: xi,
                        min: d.min,
                        max: d.max,
                    });
                }
                let u = ((xi - d.min) / dx).clamp(0.0, (d.nodes - 1) as f64);
                let i0 = (u.floor() as usize).min(d.nodes - 2);
                cell.push(CellCoord {
                    i0,
                    i1: i0 + 1,
                    frac: (u - i0 as f64).clamp(0.0, 1.0),
                });
            }
        }
        Ok(cell)
    }

    /// Blend a per-corner quantity over the 2^d corners of a cell.
    fn blend_corners(&self, cell: &[CellCoord], f: impl Fn(usize, &[usize]) -> f64) -> f64 {
        let d = cell.len();
        let strides = self.grid.strides();
        let mut acc = 0.0;
        let mut multi = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut flat = 0;
            for (k, c) in cell.iter().enumerate() {
                let hi = corner >> k & 1 == 1;
                let i = if hi { c.i1 } else { c.i0 };
                weight *= if hi { c.frac } else { 1.0 - c.frac };
                multi[k] = i;
                flat += i * strides[k];
            }
            if weight != 0.0 {
                acc += weight * f(flat, &multi);
            }
        }
        acc
    }
}

struct CellCoord {
    i0: usize,
    i1: usize,
    frac: f64,
}

/// Signed distance to a disk of radius `radius` centered at `center`,
/// measured in the first two dimensions; remaining dimensions are ignored, so
/// the encoded set is a cylinder through them.
pub fn make_signed_distance_disk(
    grid: &Arc<Grid>,
    center: [f64; 2],
    radius: f64,
) -> Result<ValueFunction> {
    if grid.dim_count() < 2 {
        return Err(Error::argument("disk needs at least two dimensions"));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::argument(format!(
            "disk radius {radius} must be positive"
        )));
    }
    if center.iter().any(|c| !c.is_finite()) {
        return Err(Error::argument("disk center must be finite"));
    }
    let mut data = vec![0.0; grid.len()];
    let sx = grid.strides()[0];
    let sy = grid.strides()[1];
    let (n0, n1) = (grid.dim(0).nodes, grid.dim(1).nodes);
    let tail: usize = grid.len() / (n0 * n1);
    for i0 in 0..n0 {
        let px = grid.coord(0, i0) - center[0];
        for i1 in 0..n1 {
            let py = grid.coord(1, i1) - center[1];
            let v = (px * px + py * py).sqrt() - radius;
            let base = i0 * sx + i1 * sy;
            // Dims after the first two are contiguous because storage is
            // row-major with the last dim fastest.
            for t in 0..tail {
                data[base + t] = v;
            }
        }
    }
    ValueFunction::new(grid.clone(), data)
}

/// A value function per sample time, sharing one grid. Times are strictly
/// increasing.
#[derive(Clone, Debug)]
pub struct TimeIndexedValueFunction {
    times: Vec<f64>,
    frames: Vec<ValueFunction>,
}

impl TimeIndexedValueFunction {
    pub fn new(times: Vec<f64>, frames: Vec<ValueFunction>) -> Result<TimeIndexedValueFunction> {
        if times.is_empty() || times.len() != frames.len() {
            return Err(Error::argument(format!(
                "{} times against {} frames",
                times.len(),
                frames.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::argument("non-finite frame time"));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::argument("frame times must be strictly increasing"));
        }
        let g0 = frames[0].grid();
        if frames.iter().any(|f| !f.grid().same_as(g0)) {
            return Err(Error::GridMismatch("frames must share one grid".into()));
        }
        Ok(TimeIndexedValueFunction { times, frames })
    }

    /// Wrap a single static frame at time 0.
    pub fn from_static(vf: ValueFunction) -> TimeIndexedValueFunction {
        TimeIndexedValueFunction {
            times: vec![0.0],
            frames: vec![vf],
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn frames(&self) -> &[ValueFunction] {
        &self.frames
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.frames[0].grid()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Frame with the smallest time `>= t`; the last frame when `t` is past
    /// the end. This is the lookup backward solves use between target frames.
    pub fn frame_at_or_after(&self, t: f64) -> &ValueFunction {
        match self.times.iter().position(|&ft| ft >= t) {
            Some(i) => &self.frames[i],
            None => &self.frames[self.frames.len() - 1],
        }
    }

    /// Frame with the largest time `<= t`; the first frame when `t` precedes
    /// the start.
    pub fn frame_at_or_before(&self, t: f64) -> &ValueFunction {
        match self.times.iter().rposition(|&ft| ft <= t) {
            Some(i) => &self.frames[i],
            None => &self.frames[0],
        }
    }

    /// Index of the frame nearest to `t` (ties toward the earlier frame).
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &ft) in self.times.iter().enumerate() {
            let d = (ft - t).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}
