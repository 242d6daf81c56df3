//! Solver for the homogenized model: bulk problems on `Ω± ` coupled across
//! `Σ` by one cell problem on `Z*` per interface node.
//!
//! All unknowns live in one vector, ordered as
//! `[bulk+ | bulk− | cell problems | v+ | v−]`. The traces `v±_j` carry no
//! mass; their rows state the per-side flux balance
//! `D+ ∂_n u+ = F+_j` and `−D− ∂_n u− = F−_j`.

use thiserror::Error;

use crate::geometry::{to_f64, CellGeometry, Region};
use crate::grid::{
    build_cell_grid, graded_nodes, BoundaryKind, EdgeKinds, GridError, RectGrid, BULK_GRADING,
};
use crate::kinetics::{InitialData, Kinetics, KineticsError, Side};
use crate::linsolve::{solve_spd, CsrMatrix, SolveError, SolverOptions, TripletBuilder};
use crate::microsim::{stability_bound, step_count, DiffusionSpec, MicroError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MacroError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
    #[error(transparent)]
    Micro(#[from] MicroError),
    #[error("interface layout error: {0}")]
    Layout(String),
    #[error("trace structure violated: {0}")]
    Trace(String),
}

/// Fixed values replacing the no-flux condition on `x_n = H` (`top`) and
/// `x_n = −H` (`bottom`).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DirichletOverride {
    pub top: Option<f64>,
    pub bottom: Option<f64>,
}

impl DirichletOverride {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_active(&self) -> bool {
        self.top.is_some() || self.bottom.is_some()
    }
}

/// Discretization parameters of the limit model.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroSettings {
    /// Number of interface nodes `J` (`Δ_Σ = 1/J`).
    pub nodes: usize,
    /// Cell grid refinement `m`.
    pub cell_refinement: usize,
    /// First bulk row height at `Σ`; defaults to `Δ_Σ`.
    pub first_spacing: Option<f64>,
    pub grading: f64,
    pub boundary: DirichletOverride,
    pub solver: SolverOptions,
}

impl MacroSettings {
    pub fn new(nodes: usize, cell_refinement: usize) -> Self {
        Self {
            nodes,
            cell_refinement,
            first_spacing: None,
            grading: BULK_GRADING,
            boundary: DirichletOverride::none(),
            solver: SolverOptions::default(),
        }
    }
}

/// Interface nodes and the grids of the limit model.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceLayout {
    pub nodes: usize,
    pub delta: f64,
    pub plus: RectGrid,
    pub minus: RectGrid,
    pub cell: RectGrid,
}

impl InterfaceLayout {
    pub fn node_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.delta
    }
}

pub fn build_layout(
    cell: &CellGeometry,
    height: f64,
    settings: &MacroSettings,
) -> Result<InterfaceLayout, MacroError> {
    let j = settings.nodes;
    if j == 0 {
        return Err(MacroError::Layout("at least one interface node required".into()));
    }
    let delta = 1.0 / j as f64;
    let first = settings.first_spacing.unwrap_or(delta);
    if !(first > 0.0) || !(settings.grading >= 1.0) || !(height > 0.0) {
        return Err(MacroError::Layout(format!(
            "bad bulk spacing (first {first}, grading {}, height {height})",
            settings.grading
        )));
    }
    let xs: Vec<f64> = (0..=j).map(|i| i as f64 / j as f64).collect();
    let up = graded_nodes(0.0, height, first, settings.grading);
    let down: Vec<f64> = up.iter().rev().map(|v| -v).collect();
    let ny = up.len() - 1;
    let plus = RectGrid::new(
        xs.clone(),
        up,
        vec![Region::BulkPlus; j * ny],
        EdgeKinds::marked_bottom_top(),
    )?;
    let minus = RectGrid::new(
        xs,
        down,
        vec![Region::BulkMinus; j * ny],
        EdgeKinds::marked_bottom_top(),
    )?;
    let cell = build_cell_grid(cell, settings.cell_refinement)?;
    Ok(InterfaceLayout {
        nodes: j,
        delta,
        plus,
        minus,
        cell,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
}

/// Assembled limit problem.
#[derive(Debug, Clone)]
pub struct MacroProblem {
    pub layout: InterfaceLayout,
    pub cell_geom: CellGeometry,
    pub height: f64,
    pub diff: DiffusionSpec,
    pub kin: Kinetics,
    pub settings: MacroSettings,
    pub stiffness: CsrMatrix,
    pub mass: Vec<f64>,
    /// Diagonal and right-side contributions of the Dirichlet override.
    dirichlet: Vec<(usize, f64, f64)>,
    offsets: [usize; 5],
    lateral: Vec<(usize, f64, (f64, f64))>,
    /// Per cell-grid cell: `D^M` for the cell.
    cell_diff: Vec<[f64; 2]>,
}

impl MacroProblem {
    pub fn new(
        cell_geom: CellGeometry,
        height: f64,
        diff: DiffusionSpec,
        kin: Kinetics,
        settings: MacroSettings,
    ) -> Result<Self, MacroError> {
        let order: Vec<usize> = (0..settings.nodes).collect();
        Self::with_order(cell_geom, height, diff, kin, settings, &order)
    }

    /// Same as [`MacroProblem::new`], assembling the interface nodes in the
    /// given order.
    pub fn with_order(
        cell_geom: CellGeometry,
        height: f64,
        diff: DiffusionSpec,
        kin: Kinetics,
        settings: MacroSettings,
        order: &[usize],
    ) -> Result<Self, MacroError> {
        diff.validate(&cell_geom)?;
        let layout = build_layout(&cell_geom, height, &settings)?;
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..layout.nodes).collect::<Vec<_>>() {
            return Err(MacroError::Layout(
                "node order is not a permutation of the interface nodes".into(),
            ));
        }
        let np = layout.plus.len();
        let nm = layout.minus.len();
        let nref = layout.cell.len();
        let jn = layout.nodes;
        let offsets = [0, np, np + nm, np + nm + jn * nref, np + nm + jn * nref + jn];
        let n = offsets[4] + jn;
        let delta = layout.delta;

        let cell_diff: Vec<[f64; 2]> = layout
            .cell
            .cells()
            .iter()
            .map(|c| diff.channel_at(&cell_geom, c.center.1))
            .collect();

        let mut t = TripletBuilder::new(n);
        // bulk blocks
        for (grid, d, off) in [
            (&layout.plus, diff.plus, offsets[0]),
            (&layout.minus, diff.minus, offsets[1]),
        ] {
            for f in grid.faces() {
                t.add_coupling(off + f.cells[0], off + f.cells[1], d * f.len / f.distance());
            }
        }
        // Dirichlet override rows
        let mut dirichlet = Vec::new();
        for (grid, d, off, kind, value) in [
            (&layout.plus, diff.plus, offsets[0], BoundaryKind::Upper, settings.boundary.top),
            (&layout.minus, diff.minus, offsets[1], BoundaryKind::Lower, settings.boundary.bottom),
        ] {
            if let Some(v) = value {
                for b in grid.boundary_faces().iter().filter(|b| b.kind == kind) {
                    let tr = d * b.len / b.half;
                    dirichlet.push((off + b.cell, tr, tr * v));
                }
            }
        }

        let cell_faces = layout.cell.faces();
        let cell_bfaces = layout.cell.boundary_faces();
        for &j in order {
            let base = offsets[2] + j * nref;
            for f in cell_faces {
                let ax = f.axis.index();
                let ka = cell_diff[f.cells[0]][ax];
                let kb = cell_diff[f.cells[1]][ax];
                let tr = delta * f.len / (f.half[0] / ka + f.half[1] / kb);
                t.add_coupling(base + f.cells[0], base + f.cells[1], tr);
            }
            let vp = offsets[3] + j;
            let vm = offsets[4] + j;
            for b in cell_bfaces {
                let trace = match b.kind {
                    BoundaryKind::Upper => vp,
                    BoundaryKind::Lower => vm,
                    _ => continue,
                };
                let tr = delta * cell_diff[b.cell][1] * b.len / b.half;
                t.add_coupling(trace, base + b.cell, tr);
            }
            // bulk cells adjacent to Σ in column j
            let top_of_minus = layout.minus.ny() - 1;
            let bp = layout.plus.active_index(j, 0).expect("bulk cell");
            let bm = layout.minus.active_index(j, top_of_minus).expect("bulk cell");
            let cp = layout.plus.cell(bp);
            let cm = layout.minus.cell(bm);
            t.add_coupling(vp, offsets[0] + bp, diff.plus * cp.size.0 / cp.half(crate::grid::Axis::Y));
            t.add_coupling(vm, offsets[1] + bm, diff.minus * cm.size.0 / cm.half(crate::grid::Axis::Y));
        }
        for i in 0..n {
            t.add(i, i, 0.0);
        }
        let stiffness = t.build(false)?;
        if stiffness.max_asymmetry() != 0.0 {
            return Err(SolveError::Asymmetric {
                row: 0,
                col: 0,
                diff: stiffness.max_asymmetry(),
            }
            .into());
        }

        let mut mass = vec![0.0; n];
        for (a, c) in layout.plus.cells().iter().enumerate() {
            mass[offsets[0] + a] = c.volume();
        }
        for (a, c) in layout.minus.cells().iter().enumerate() {
            mass[offsets[1] + a] = c.volume();
        }
        for j in 0..jn {
            for (r, c) in layout.cell.cells().iter().enumerate() {
                mass[offsets[2] + j * nref + r] = delta * c.volume();
            }
        }
        let lateral = cell_bfaces
            .iter()
            .filter(|b| b.kind == BoundaryKind::Lateral)
            .map(|b| (b.cell, b.len, b.center))
            .collect();

        Ok(Self {
            layout,
            cell_geom,
            height,
            diff,
            kin,
            settings,
            stiffness,
            mass,
            dirichlet,
            offsets,
            lateral,
            cell_diff,
        })
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.layout.nodes
    }

    pub fn plus_range(&self) -> std::ops::Range<usize> {
        self.offsets[0]..self.offsets[1]
    }

    pub fn minus_range(&self) -> std::ops::Range<usize> {
        self.offsets[1]..self.offsets[2]
    }

    pub fn cell_range(&self, j: usize) -> std::ops::Range<usize> {
        let nref = self.layout.cell.len();
        let s = self.offsets[2] + j * nref;
        s..s + nref
    }

    pub fn v_plus_index(&self, j: usize) -> usize {
        self.offsets[3] + j
    }

    pub fn v_minus_index(&self, j: usize) -> usize {
        self.offsets[4] + j
    }

    pub fn is_trace(&self, i: usize) -> bool {
        i >= self.offsets[3]
    }

    pub fn trace_range(&self) -> std::ops::Range<usize> {
        self.offsets[3]..self.len()
    }

    /// Total mass `Σ±∫u± + ∫_Σ∫_{Z*} u^M`.
    pub fn total_mass(&self, x: &[f64]) -> f64 {
        self.mass.iter().zip(x).map(|(m, v)| m * v).sum()
    }

    /// Explicit right side: `vol·f±` in the bulk, `Δ_Σ(vol·g − Σ_N len·h)`
    /// in the cell problems, zero on traces.
    pub fn rates(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, MacroError> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(KineticsError::Domain(format!("time {t}")).into());
        }
        let mut r = vec![0.0; self.len()];
        for (grid, spec, range) in [
            (&self.layout.plus, &self.kin.f_plus, self.plus_range()),
            (&self.layout.minus, &self.kin.f_minus, self.minus_range()),
        ] {
            if spec.is_zero() {
                continue;
            }
            for (c, i) in grid.cells().iter().zip(range) {
                r[i] = c.volume() * spec.rate(t, c.center, x[i]);
            }
        }
        let delta = self.layout.delta;
        for j in 0..self.nodes() {
            let range = self.cell_range(j);
            let base = range.start;
            if !self.kin.g.is_zero() {
                for (c, i) in self.layout.cell.cells().iter().zip(range) {
                    r[i] = delta * c.volume() * self.kin.g.rate(t, c.center, x[i]);
                }
            }
            if !self.kin.h.is_zero() {
                for &(c, len, y) in &self.lateral {
                    r[base + c] -= delta * len * self.kin.h.rate(t, y, x[base + c]);
                }
            }
        }
        if let Some(i) = r.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index: i }.into());
        }
        Ok(r)
    }

    /// Sets every trace to the value its (massless) row prescribes, written
    /// as a correction to one neighbour so uniform states stay exact.
    pub fn equilibrate_traces(&self, x: &mut [f64]) {
        for i in self.trace_range() {
            let mut reference = None;
            let mut weight = 0.0;
            let mut acc = 0.0;
            for (j, v) in self.stiffness.row(i) {
                if j == i || v == 0.0 {
                    continue;
                }
                let r = *reference.get_or_insert(x[j]);
                weight -= v;
                acc -= v * (x[j] - r);
            }
            if let Some(r) = reference {
                x[i] = r + acc / weight;
            }
        }
    }

    /// Initial state: `u_i±` at bulk centres, `u_i^M(x̄_j, y)` at cell
    /// centres, traces from their balance rows.
    pub fn initial_state(&self, init: &InitialData) -> MacroState {
        let mut x = vec![0.0; self.len()];
        for (c, i) in self.layout.plus.cells().iter().zip(self.plus_range()) {
            x[i] = init.bulk(Side::Plus, c.center);
        }
        for (c, i) in self.layout.minus.cells().iter().zip(self.minus_range()) {
            x[i] = init.bulk(Side::Minus, c.center);
        }
        for j in 0..self.nodes() {
            let xb = self.layout.node_center(j);
            for (c, i) in self.layout.cell.cells().iter().zip(self.cell_range(j)) {
                x[i] = init.channel(xb, c.center);
            }
        }
        self.equilibrate_traces(&mut x);
        MacroState { step: 0, t: 0.0, x }
    }

    pub fn stability_bound(&self) -> f64 {
        stability_bound(&self.kin, &self.cell_geom, self.height, self.settings.cell_refinement)
    }

    pub fn stepper(&self, dt: f64) -> Result<MacroStepper<'_>, MacroError> {
        let bound = self.stability_bound();
        if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
            return Err(MicroError::Stability { dt, bound }.into());
        }
        let mut diag: Vec<f64> = self.mass.iter().map(|m| m / dt).collect();
        for &(i, tr, _) in &self.dirichlet {
            diag[i] += tr;
        }
        let system = self.stiffness.add_diagonal(&diag)?;
        Ok(MacroStepper {
            problem: self,
            dt,
            system,
        })
    }

    /// Steady state with zero kinetics; needs a Dirichlet override.
    pub fn solve_steady(&self) -> Result<MacroState, MacroError> {
        if !self.settings.boundary.is_active() {
            return Err(MacroError::Layout(
                "steady problem is singular without a Dirichlet override".into(),
            ));
        }
        let mut diag = vec![0.0; self.len()];
        let mut rhs = vec![0.0; self.len()];
        for &(i, tr, b) in &self.dirichlet {
            diag[i] += tr;
            rhs[i] += b;
        }
        let system = self.stiffness.add_diagonal(&diag)?;
        let opts = SolverOptions {
            max_iter: Some(self.settings.solver.max_iter_for(self.len()).max(20 * self.len())),
            ..self.settings.solver
        };
        let sol = solve_spd(&system, &rhs, None, opts)?;
        Ok(MacroState {
            step: 0,
            t: f64::INFINITY,
            x: sol.x,
        })
    }

    /// `(F+_j, F−_j)`: boundary-flux sums of cell problem `j` over `S*±`
    /// (per unit length of `Σ`), positive into the cell.
    pub fn cell_flux(&self, state: &MacroState, j: usize) -> (f64, f64) {
        let base = self.cell_range(j).start;
        let (vp, vm) = (state.x[self.v_plus_index(j)], state.x[self.v_minus_index(j)]);
        let mut fp = 0.0;
        let mut fm = 0.0;
        for b in self.layout.cell.boundary_faces() {
            let u = state.x[base + b.cell];
            let k = self.cell_diff[b.cell][1] * b.len / b.half;
            match b.kind {
                BoundaryKind::Upper => fp += k * (vp - u),
                BoundaryKind::Lower => fm += k * (vm - u),
                _ => {}
            }
        }
        (fp, fm)
    }

    /// `(D+ ∂_n u+, −D− ∂_n u−)` at node `j` from the half-cell differences.
    pub fn bulk_flux(&self, state: &MacroState, j: usize) -> (f64, f64) {
        let l = &self.layout;
        let bp = l.plus.active_index(j, 0).expect("bulk cell");
        let bm = l.minus.active_index(j, l.minus.ny() - 1).expect("bulk cell");
        let hp = l.plus.cell(bp).half(crate::grid::Axis::Y);
        let hm = l.minus.cell(bm).half(crate::grid::Axis::Y);
        let up = state.x[self.offsets[0] + bp];
        let um = state.x[self.offsets[1] + bm];
        (
            self.diff.plus * (up - state.x[self.v_plus_index(j)]) / hp,
            self.diff.minus * (um - state.x[self.v_minus_index(j)]) / hm,
        )
    }

    /// Per-side balance residuals `|D+ ∂_n u+ − F+|`, `|−D− ∂_n u− − F−|`.
    pub fn balance_residual(&self, state: &MacroState, j: usize) -> (f64, f64) {
        let (fp, fm) = self.cell_flux(state, j);
        let (bp, bm) = self.bulk_flux(state, j);
        ((bp - fp).abs(), (bm - fm).abs())
    }

    /// Checks from the assembled matrix that every `S*+` (`S*−`) cell of
    /// node `j` couples to `v+_j` (`v−_j`) and to no other trace.
    pub fn check_trace_structure(&self) -> Result<(), MacroError> {
        let cell = &self.layout.cell;
        let top = cell.ny() - 1;
        for j in 0..self.nodes() {
            let base = self.cell_range(j).start;
            for (r, c) in cell.cells().iter().enumerate() {
                let row = base + r;
                let traces: Vec<usize> = self
                    .stiffness
                    .row(row)
                    .filter(|&(col, v)| self.is_trace(col) && v != 0.0)
                    .map(|(col, _)| col)
                    .collect();
                let mut expected = Vec::new();
                if c.j == 0 {
                    expected.push(self.v_minus_index(j));
                }
                if c.j == top {
                    expected.push(self.v_plus_index(j));
                }
                expected.sort_unstable();
                let mut traces = traces;
                traces.sort_unstable();
                if traces != expected {
                    return Err(MacroError::Trace(format!(
                        "cell {r} of node {j} couples to traces {traces:?}, expected {expected:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Solves on `[0, T]`, keeping every `stride`-th state and the last.
    pub fn run(
        &self,
        init: &InitialData,
        t_final: f64,
        dt: f64,
        stride: usize,
    ) -> Result<MacroTrajectory, MacroError> {
        let (n, dt) = step_count(t_final, dt)?;
        let stride = stride.max(1);
        let mut state = self.initial_state(init);
        let mut snapshots = vec![state.clone()];
        if n > 0 {
            let stepper = self.stepper(dt)?;
            for s in 1..=n {
                state = stepper.step(&state)?;
                if s % stride == 0 || s == n {
                    snapshots.push(state.clone());
                }
            }
        }
        Ok(MacroTrajectory { dt, snapshots })
    }

    /// Cell problem `j` values of a state.
    pub fn cell_values<'s>(&self, state: &'s MacroState, j: usize) -> &'s [f64] {
        &state.x[self.cell_range(j)]
    }

    pub fn plus_values<'s>(&self, state: &'s MacroState) -> &'s [f64] {
        &state.x[self.plus_range()]
    }

    pub fn minus_values<'s>(&self, state: &'s MacroState) -> &'s [f64] {
        &state.x[self.minus_range()]
    }

    /// `(|Z*|, |N|)` as floats.
    pub fn cell_measures(&self) -> (f64, f64) {
        (to_f64(self.cell_geom.area()), to_f64(self.cell_geom.lateral_length()))
    }
}

#[derive(Debug, Clone)]
pub struct MacroStepper<'a> {
    problem: &'a MacroProblem,
    dt: f64,
    system: CsrMatrix,
}

impl<'a> MacroStepper<'a> {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn system(&self) -> &CsrMatrix {
        &self.system
    }

    pub fn step(&self, state: &MacroState) -> Result<MacroState, MacroError> {
        let p = self.problem;
        let r = p.rates(state.t, &state.x)?;
        let mut rhs: Vec<f64> = p
            .mass
            .iter()
            .zip(state.x.iter().zip(&r))
            .map(|(m, (v, s))| m * v / self.dt + s)
            .collect();
        for &(i, _, val) in &p.dirichlet {
            rhs[i] += val;
        }
        let mut guess: Vec<f64> = p
            .mass
            .iter()
            .zip(state.x.iter().zip(&r))
            .map(|(m, (v, s))| if *m > 0.0 { v + self.dt * s / m } else { *v })
            .collect();
        p.equilibrate_traces(&mut guess);
        let sol = solve_spd(&self.system, &rhs, Some(&guess), p.settings.solver)?;
        let step = state.step + 1;
        Ok(MacroState {
            step,
            t: step as f64 * self.dt,
            x: sol.x,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroTrajectory {
    pub dt: f64,
    pub snapshots: Vec<MacroState>,
}

impl MacroTrajectory {
    pub fn last(&self) -> &MacroState {
        self.snapshots.last().expect("at least the initial state")
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }
}

/// Through-flux of the series network bulk+ / channel / bulk− for a
/// straight channel of width `w` and a unit potential drop.
pub fn series_flux(height: f64, d_plus: f64, d_minus: f64, d_channel_nn: f64, width: f64) -> f64 {
    let r = height / d_plus + 2.0 / (d_channel_nn * width) + height / d_minus;
    1.0 / r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_reference_cell, ChannelProfile, Segment, Q};
    use crate::kinetics::{KineticsSpec, RateLaw};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight() -> CellGeometry {
        build_reference_cell(&ChannelProfile::straight(Q::new(1, 2)).unwrap()).unwrap()
    }

    fn hourglass() -> CellGeometry {
        let q = Q::new;
        build_reference_cell(
            &ChannelProfile::new(vec![
                Segment::new(q(-1, 1), q(-1, 4), q(3, 4)),
                Segment::new(q(-1, 4), q(1, 4), q(1, 4)),
                Segment::new(q(1, 4), q(1, 1), q(3, 4)),
            ])
            .unwrap(),
        )
        .unwrap()
    }

    fn problem(cell: CellGeometry, nodes: usize, m: usize, kin: Kinetics) -> MacroProblem {
        let segs = cell.profile().segments().len();
        MacroProblem::new(
            cell,
            1.0,
            DiffusionSpec::uniform(1.0, 2.0, [0.5, 0.5], segs),
            kin,
            MacroSettings::new(nodes, m),
        )
        .unwrap()
    }

    fn random_state(p: &MacroProblem, seed: u64) -> MacroState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.equilibrate_traces(&mut x);
        MacroState { step: 0, t: 0.0, x }
    }

    #[test]
    fn symmetric_with_zero_row_sums() {
        let p = problem(hourglass(), 4, 8, Kinetics::zero());
        assert_eq!(p.stiffness.max_asymmetry(), 0.0);
        for i in 0..p.len() {
            let scale: f64 = p.stiffness.row(i).map(|(_, v)| v.abs()).sum();
            assert!(p.stiffness.row_sum(i).abs() <= 1e-14 * scale);
        }
        p.check_trace_structure().unwrap();
    }

    #[test]
    fn constants_preserved() {
        let p = problem(straight(), 4, 4, Kinetics::zero());
        let st = p.stepper(0.05).unwrap();
        let mut s = p.initial_state(&InitialData::constant(0.3));
        for _ in 0..5 {
            s = st.step(&s).unwrap();
        }
        assert!(s.x.iter().all(|&v| v == 0.3));
        for j in 0..4 {
            assert_eq!(p.cell_flux(&s, j), (0.0, 0.0));
        }
    }

    #[test]
    fn mass_identity_with_zero_kinetics() {
        let p = problem(hourglass(), 4, 8, Kinetics::zero());
        let st = p.stepper(1.0 / 64.0).unwrap();
        let mut s = random_state(&p, 4);
        let scale: f64 = p.mass.iter().sum();
        for _ in 0..20 {
            let next = st.step(&s).unwrap();
            let dm = p.total_mass(&next.x) - p.total_mass(&s.x);
            assert!(dm.abs() <= 1e-12 * scale, "{dm}");
            for j in 0..4 {
                let (rp, rm) = p.balance_residual(&next, j);
                assert!(rp < 1e-9 && rm < 1e-9, "{rp} {rm}");
            }
            s = next;
        }
    }

    #[test]
    fn outflow_strictly_decreases_mass() {
        let kin = Kinetics {
            h: KineticsSpec::new(RateLaw::Exchange {
                kappa: 0.5,
                external: 0.0,
            }),
            ..Kinetics::zero()
        };
        let p = problem(straight(), 4, 4, kin);
        let traj = p.run(&InitialData::constant(1.0), 0.25, 1.0 / 32.0, 1).unwrap();
        let masses: Vec<f64> = traj.snapshots.iter().map(|s| p.total_mass(&s.x)).collect();
        assert!(masses.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn node_order_does_not_matter() {
        let kin = Kinetics {
            g: KineticsSpec::new(RateLaw::LinearDecay { lambda: 0.5 }),
            ..Kinetics::zero()
        };
        let cell = straight();
        let diff = DiffusionSpec::uniform(1.0, 2.0, [0.5, 0.5], 1);
        let settings = MacroSettings::new(8, 4);
        let a = MacroProblem::new(cell.clone(), 1.0, diff.clone(), kin.clone(), settings.clone()).unwrap();
        let rev: Vec<usize> = (0..8).rev().collect();
        let b = MacroProblem::with_order(cell, 1.0, diff, kin, settings, &rev).unwrap();
        assert_eq!(a.stiffness, b.stiffness);
        let init = InitialData::constant(1.0);
        let ta = a.run(&init, 0.1, 0.025, 1).unwrap();
        let tb = b.run(&init, 0.1, 0.025, 1).unwrap();
        assert_eq!(ta, tb);
    }

    /// Dense Schur complement of `K` onto the trace pair of a single node.
    #[test]
    fn schur_complement_on_traces() {
        let cell = straight();
        let p = MacroProblem::new(
            cell,
            1.0,
            DiffusionSpec::uniform(1.0, 1.0, [1.0, 1.0], 1),
            Kinetics::zero(),
            MacroSettings::new(1, 4),
        )
        .unwrap();
        let k = p.stiffness.to_dense();
        let traces: Vec<usize> = p.trace_range().collect();
        let inner: Vec<usize> = (0..p.len()).filter(|i| !p.is_trace(*i)).collect();
        let n = inner.len();
        // solve K_II X = K_IT column by column (Gaussian elimination)
        let mut s = [[0.0; 2]; 2];
        for (a, &ta) in traces.iter().enumerate() {
            for (b, &tb) in traces.iter().enumerate() {
                s[a][b] = k[ta][tb];
            }
        }
        let mut cols = Vec::new();
        for &tb in &traces {
            let mut m: Vec<Vec<f64>> = inner.iter().map(|&i| inner.iter().map(|&j| k[i][j]).collect()).collect();
            let mut rhs: Vec<f64> = inner.iter().map(|&i| k[i][tb]).collect();
            for c in 0..n {
                for r in c + 1..n {
                    let f = m[r][c] / m[c][c];
                    for q in c..n {
                        m[r][q] -= f * m[c][q];
                    }
                    rhs[r] -= f * rhs[c];
                }
            }
            let mut x = vec![0.0; n];
            for r in (0..n).rev() {
                let acc: f64 = (r + 1..n).map(|q| m[r][q] * x[q]).sum();
                x[r] = (rhs[r] - acc) / m[r][r];
            }
            cols.push(x);
        }
        for (a, &ta) in traces.iter().enumerate() {
            for b in 0..2 {
                let corr: f64 = inner.iter().zip(&cols[b]).map(|(&i, x)| k[ta][i] * x).sum();
                s[a][b] -= corr;
            }
        }
        assert!((s[0][1] - s[1][0]).abs() < 1e-12);
        assert!(s[0][0] > 0.0 && s[1][1] > 0.0);
        assert!(s[0][1] < 0.0);
    }

    #[test]
    fn tiny_channel_diffusivity_decouples_bulks() {
        let cell = straight();
        let p = MacroProblem::new(
            cell,
            1.0,
            DiffusionSpec::uniform(1.0, 2.0, [1e-12, 1e-12], 1),
            Kinetics::zero(),
            MacroSettings::new(4, 4),
        )
        .unwrap();
        let s = random_state(&p, 2);
        let dt = 0.05;
        let st = p.stepper(dt).unwrap();
        let next = st.step(&s).unwrap();
        // independent Neumann problem on the bulk+ grid alone
        let g = &p.layout.plus;
        let mut t = TripletBuilder::new(g.len());
        for f in g.faces() {
            t.add_coupling(f.cells[0], f.cells[1], f.len / f.distance());
        }
        let k = t.build(false).unwrap();
        let diag: Vec<f64> = g.cells().iter().map(|c| c.volume() / dt).collect();
        let sys = k.add_diagonal(&diag).unwrap();
        let rhs: Vec<f64> = g
            .cells()
            .iter()
            .zip(&s.x[p.plus_range()])
            .map(|(c, v)| c.volume() * v / dt)
            .collect();
        let sol = solve_spd(&sys, &rhs, None, SolverOptions::default()).unwrap();
        for (a, b) in sol.x.iter().zip(&next.x[p.plus_range()]) {
            assert!((a - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn conduction_matches_series_network() {
        let cell = straight();
        let mut settings = MacroSettings::new(4, 4);
        settings.boundary = DirichletOverride {
            top: Some(1.0),
            bottom: Some(0.0),
        };
        let p = MacroProblem::new(
            cell,
            1.0,
            DiffusionSpec::uniform(1.0, 2.0, [0.5, 0.5], 1),
            Kinetics::zero(),
            settings,
        )
        .unwrap();
        let s = p.solve_steady().unwrap();
        let oracle = series_flux(1.0, 1.0, 2.0, 0.5, 0.5);
        for j in 0..4 {
            let (fp, fm) = p.cell_flux(&s, j);
            assert!((fp - oracle).abs() < 1e-9 * oracle, "{fp} {oracle}");
            assert!((fm + oracle).abs() < 1e-9 * oracle);
        }
    }

    #[test]
    fn unordered_nodes_rejected() {
        let r = MacroProblem::with_order(
            straight(),
            1.0,
            DiffusionSpec::uniform(1.0, 1.0, [1.0, 1.0], 1),
            Kinetics::zero(),
            MacroSettings::new(3, 4),
            &[0, 0, 2],
        );
        assert!(matches!(r, Err(MacroError::Layout(_))));
    }
}
