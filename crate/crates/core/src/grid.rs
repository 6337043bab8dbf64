//! Uniform tensor grids over state and control boxes, with multilinear or
//! nearest-node interpolation of tabulated values.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::system::{BoxSet, ControlSystem, BOX_TOL};

/// Distance under which a query coordinate is snapped onto a grid node.
pub const SNAP_TOL: f64 = 1e-6;

pub const DEFAULT_STATE_POINTS: usize = 2001;
pub const DEFAULT_CONTROL_POINTS: usize = 601;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Multilinear; any `+∞` corner with positive weight yields `+∞`.
    #[default]
    Multilinear,
    /// Snap every query to its nearest node.
    Nearest,
}

/// Uniform partition of `[lo, hi]` including both endpoints.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Axis {
    lo: f64,
    hi: f64,
    count: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::InvalidArgument(format!("axis [{lo}, {hi}] is empty")));
        }
        if count == 0 || (count == 1 && lo != hi) {
            return Err(Error::InvalidArgument(format!(
                "axis [{lo}, {hi}] needs at least 2 points, got {count}"
            )));
        }
        Ok(Self { lo, hi, count })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn step(&self) -> f64 {
        if self.count > 1 {
            (self.hi - self.lo) / (self.count - 1) as f64
        } else {
            0.0
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.node(i)).collect()
    }

    fn snap_tol(&self) -> f64 {
        SNAP_TOL.min(0.25 * self.step())
    }

    /// Nearest node index, `None` outside the axis range.
    pub fn nearest(&self, y: f64) -> Option<usize> {
        if !(y >= self.lo - BOX_TOL && y <= self.hi + BOX_TOL) {
            return None;
        }
        if self.count == 1 {
            return Some(0);
        }
        let t = ((y - self.lo) / self.step()).round();
        Some((t.max(0.0) as usize).min(self.count - 1))
    }

    /// Interpolation weights for `y`: one node when snapped, else two.
    fn locate(&self, y: f64, mode: Interpolation) -> Option<AxisWeights> {
        let j = self.nearest(y)?;
        if mode == Interpolation::Nearest
            || self.count == 1
            || (y - self.node(j)).abs() <= self.snap_tol()
        {
            return Some(AxisWeights::Node(j));
        }
        let y = y.clamp(self.lo, self.hi);
        let t = (y - self.lo) / self.step();
        let i = (t.floor().max(0.0) as usize).min(self.count - 2);
        let frac = ((y - self.node(i)) / (self.node(i + 1) - self.node(i))).clamp(0.0, 1.0);
        Some(AxisWeights::Cell(i, frac))
    }
}

#[derive(Clone, Copy, Debug)]
enum AxisWeights {
    Node(usize),
    Cell(usize, f64),
}

/// Row-major tensor lattice; the last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lattice {
    axes: Vec<Axis>,
    #[serde(skip)]
    strides: Vec<usize>,
    #[serde(skip)]
    len: usize,
}

impl Lattice {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("lattice needs at least one axis".into()));
        }
        let mut strides = vec![1; axes.len()];
        for d in (0..axes.len() - 1).rev() {
            strides[d] = strides[d + 1] * axes[d + 1].count;
        }
        let len = strides[0] * axes[0].count;
        Ok(Self { axes, strides, len })
    }

    pub fn over_box(bx: &BoxSet, counts: &[usize]) -> Result<Self> {
        if counts.len() != bx.dim() {
            return Err(Error::Dimension(format!(
                "{} point counts for a {}-dimensional box",
                counts.len(),
                bx.dim()
            )));
        }
        let axes = (0..bx.dim())
            .map(|d| {
                let (lo, hi) = (bx.lower()[d], bx.upper()[d]);
                let count = if lo == hi { 1 } else { counts[d] };
                Axis::new(lo, hi, count)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(axes)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn counts(&self) -> Vec<usize> {
        self.axes.iter().map(Axis::count).collect()
    }

    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        self.axes
            .iter()
            .zip(&self.strides)
            .map(|(axis, &stride)| {
                let i = idx / stride;
                idx %= stride;
                axis.node(i)
            })
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len).map(|i| self.point(i)).collect()
    }

    /// Flat index of the nearest node, `None` outside the lattice's box.
    pub fn nearest_index(&self, y: &[f64]) -> Option<usize> {
        if y.len() != self.dim() {
            return None;
        }
        let mut idx = 0;
        for (d, axis) in self.axes.iter().enumerate() {
            idx += axis.nearest(y[d])? * self.strides[d];
        }
        Some(idx)
    }

    /// Node index when `y` lies within the snap tolerance of a node.
    pub fn node_index(&self, y: &[f64]) -> Option<usize> {
        let idx = self.nearest_index(y)?;
        let p = self.point(idx);
        let close = p
            .iter()
            .zip(&self.axes)
            .zip(y)
            .all(|((node, axis), v)| axis.count == 1 || (node - v).abs() <= axis.snap_tol());
        close.then_some(idx)
    }

    /// Fills `out` with `(node, weight)` pairs for `y`. Returns `false` when
    /// `y` lies outside the lattice's box.
    pub fn stencil_into(&self, y: &[f64], mode: Interpolation, out: &mut Vec<(usize, f64)>) -> bool {
        out.clear();
        if y.len() != self.dim() {
            return false;
        }
        out.push((0, 1.0));
        for (d, axis) in self.axes.iter().enumerate() {
            let Some(w) = axis.locate(y[d], mode) else {
                out.clear();
                return false;
            };
            let stride = self.strides[d];
            match w {
                AxisWeights::Node(j) => {
                    for c in out.iter_mut() {
                        c.0 += j * stride;
                    }
                }
                AxisWeights::Cell(i, frac) => {
                    let n = out.len();
                    for k in 0..n {
                        let (idx, wt) = out[k];
                        out[k] = (idx + i * stride, wt * (1.0 - frac));
                        out.push((idx + (i + 1) * stride, wt * frac));
                    }
                }
            }
        }
        true
    }

    /// Interpolates `values` (one per node) at `y`; `+∞` outside the box or
    /// when any corner with positive weight is infinite.
    pub fn interpolate(&self, values: &[f64], y: &[f64], mode: Interpolation) -> f64 {
        let mut buf = Vec::with_capacity(1 << self.dim());
        if !self.stencil_into(y, mode, &mut buf) {
            return f64::INFINITY;
        }
        combine(values, &buf)
    }
}

/// Weighted sum with conservative `+∞` propagation.
#[inline]
pub(crate) fn combine(values: &[f64], stencil: &[(usize, f64)]) -> f64 {
    let mut acc = 0.0;
    for &(idx, w) in stencil {
        let v = values[idx];
        if w > 0.0 {
            if v == f64::INFINITY {
                return f64::INFINITY;
            }
            acc += w * v;
        }
    }
    acc
}

/// State and control grids for a system.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub state: Lattice,
    pub control: Lattice,
}

impl Grid {
    pub fn new(state: Lattice, control: Lattice) -> Self {
        Self { state, control }
    }

    /// Same point count on every state axis and on every control axis.
    pub fn uniform(system: &ControlSystem, state_points: usize, control_points: usize) -> Result<Self> {
        Ok(Self {
            state: Lattice::over_box(system.state_box(), &vec![state_points; system.state_dim()])?,
            control: Lattice::over_box(system.control_box(), &vec![control_points; system.control_dim()])?,
        })
    }

    /// 2001 state points and 601 control points per axis.
    pub fn default_for(system: &ControlSystem) -> Result<Self> {
        Self::uniform(system, DEFAULT_STATE_POINTS, DEFAULT_CONTROL_POINTS)
    }

    pub fn check_matches(&self, system: &ControlSystem) -> Result<()> {
        if self.state.dim() != system.state_dim() || self.control.dim() != system.control_dim() {
            return Err(Error::Dimension("grid does not match the system dimensions".into()));
        }
        Ok(())
    }
}
