//! Discrete unfolding `T_ε`, averaging `U_ε`, and the two-scale error and
//! diagnostic norms comparing micro and macro runs.
//!
//! With the micro layer refinement equal to the cell grid refinement every
//! channel cell of column `k̄` is one cell of the reference grid, so `T_ε`
//! is an index permutation and all identities hold to rounding.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::geometry::Region;
use crate::grid::{face_gradients, BoundaryKind, Field, FaceGradients, GridError, MicroGrid, RectGrid};
use crate::macrosim::{MacroProblem, MacroTrajectory};
use crate::microsim::{MicroProblem, MicroTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwoScaleError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("refinement mismatch: {0}")]
    Refinement(String),
    #[error("incompatible snapshots: {0}")]
    Snapshots(String),
    #[error("shift leaves the domain: {0}")]
    Shift(String),
}

/// Values on `Σ × Z*`: one reference-cell field per interface column.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoScaleField {
    columns: usize,
    cell_len: usize,
    values: Vec<f64>,
    time: f64,
}

impl TwoScaleField {
    pub fn new(columns: usize, cell_len: usize, values: Vec<f64>, time: f64) -> Result<Self, TwoScaleError> {
        if values.len() != columns * cell_len {
            return Err(GridError::FieldLength {
                expected: columns * cell_len,
                got: values.len(),
            }
            .into());
        }
        Ok(Self {
            columns,
            cell_len,
            values,
            time,
        })
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn cell_len(&self) -> usize {
        self.cell_len
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.values[col * self.cell_len..(col + 1) * self.cell_len]
    }

    /// The same function on `columns` finer columns.
    pub fn refine(&self, columns: usize) -> Result<TwoScaleField, TwoScaleError> {
        if columns % self.columns != 0 {
            return Err(TwoScaleError::Refinement(format!(
                "{columns} columns do not refine {}",
                self.columns
            )));
        }
        let q = columns / self.columns;
        let mut values = Vec::with_capacity(columns * self.cell_len);
        for c in 0..columns {
            values.extend_from_slice(self.column(c / q));
        }
        TwoScaleField::new(columns, self.cell_len, values, self.time)
    }

    /// Width of one column in `x̄`.
    pub fn column_width(&self) -> f64 {
        1.0 / self.columns as f64
    }

    /// `(φ, ψ)_{L²(Σ×Z*)}`
    pub fn inner(&self, other: &TwoScaleField, cell: &RectGrid) -> Result<f64, TwoScaleError> {
        if self.columns != other.columns || self.cell_len != other.cell_len || cell.len() != self.cell_len {
            return Err(GridError::GridMismatch.into());
        }
        let w = self.column_width();
        let mut acc = 0.0;
        for col in 0..self.columns {
            for ((c, a), b) in cell.cells().iter().zip(self.column(col)).zip(other.column(col)) {
                acc += w * c.volume() * a * b;
            }
        }
        Ok(acc)
    }

    pub fn norm(&self, cell: &RectGrid) -> Result<f64, TwoScaleError> {
        Ok(self.inner(self, cell)?.sqrt())
    }
}

/// Values on `Σ × N`: one value per reference lateral face and column.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTwoScale {
    pub columns: usize,
    pub faces: usize,
    pub values: Vec<f64>,
}

impl BoundaryTwoScale {
    /// `‖·‖_{L²(Σ×N)}`
    pub fn norm(&self, grid: &MicroGrid) -> f64 {
        let refs = grid.cell_grid().boundary_faces();
        let w = 1.0 / self.columns as f64;
        let mut acc = 0.0;
        for col in 0..self.columns {
            for (rl, &rb) in grid.ref_lateral().iter().enumerate() {
                let v = self.values[col * self.faces + rl];
                acc += w * refs[rb].len * v * v;
            }
        }
        acc.sqrt()
    }
}

/// `T_ε v`: channel cell `(k̄, r)` of the micro grid becomes entry `r` of
/// column `k̄`.
pub fn unfold(grid: &MicroGrid, v: &Field) -> Result<TwoScaleField, TwoScaleError> {
    if !v.belongs_to(grid.grid()) {
        return Err(GridError::GridMismatch.into());
    }
    let nref = grid.cell_grid().len();
    let mut values = Vec::with_capacity(grid.columns() * nref);
    for col in 0..grid.columns() {
        for r in 0..nref {
            values.push(v.values()[grid.channel_cell(col, r)]);
        }
    }
    TwoScaleField::new(grid.columns(), nref, values, v.time())
}

/// Requires the reference grid of `grid` to be the cell grid `cell`.
pub fn check_aligned(grid: &MicroGrid, cell: &RectGrid) -> Result<(), TwoScaleError> {
    if grid.cell_grid().fingerprint() != cell.fingerprint() {
        return Err(TwoScaleError::Refinement(format!(
            "micro layer refinement {} does not match the cell grid ({}×{} cells)",
            grid.refinement(),
            cell.nx(),
            cell.ny()
        )));
    }
    Ok(())
}

/// Trace of a channel field on `N_ε`, indexed by micro boundary face
/// (zero on faces that are not lateral).
pub fn lateral_trace(grid: &MicroGrid, v: &Field) -> Result<Vec<f64>, TwoScaleError> {
    if !v.belongs_to(grid.grid()) {
        return Err(GridError::GridMismatch.into());
    }
    Ok(grid
        .grid()
        .boundary_faces()
        .iter()
        .map(|b| {
            if b.kind == BoundaryKind::Lateral {
                v.values()[b.cell]
            } else {
                0.0
            }
        })
        .collect())
}

/// `‖v‖_{L²(N_ε)}` of a trace indexed by micro boundary face.
pub fn lateral_norm(grid: &MicroGrid, trace: &[f64]) -> f64 {
    grid.grid()
        .boundary_faces()
        .iter()
        .zip(trace)
        .filter(|(b, _)| b.kind == BoundaryKind::Lateral)
        .map(|(b, v)| b.len * v * v)
        .sum::<f64>()
        .sqrt()
}

/// Boundary unfolding of a trace indexed by micro boundary face.
pub fn unfold_boundary(grid: &MicroGrid, trace: &[f64]) -> Result<BoundaryTwoScale, TwoScaleError> {
    if trace.len() != grid.grid().boundary_faces().len() {
        return Err(GridError::FieldLength {
            expected: grid.grid().boundary_faces().len(),
            got: trace.len(),
        }
        .into());
    }
    let faces = grid.ref_lateral().len();
    let mut values = Vec::with_capacity(grid.columns() * faces);
    for col in 0..grid.columns() {
        for rl in 0..faces {
            values.push(trace[grid.lateral_face(col, rl)]);
        }
    }
    Ok(BoundaryTwoScale {
        columns: grid.columns(),
        faces,
        values,
    })
}

/// Trace of a two-scale field on the reference lateral faces.
pub fn two_scale_lateral_trace(grid: &MicroGrid, phi: &TwoScaleField) -> BoundaryTwoScale {
    let refs = grid.cell_grid().boundary_faces();
    let faces = grid.ref_lateral().len();
    let mut values = Vec::with_capacity(phi.columns * faces);
    for col in 0..phi.columns {
        for &rb in grid.ref_lateral() {
            values.push(phi.column(col)[refs[rb].cell]);
        }
    }
    BoundaryTwoScale {
        columns: phi.columns,
        faces,
        values,
    }
}

/// `ε T_ε(∇v)` on the reference interior faces, per column.
pub fn unfold_gradient(grid: &MicroGrid, grads: &FaceGradients) -> Vec<f64> {
    let nf = grid.cell_grid().faces().len();
    let mut out = Vec::with_capacity(grid.columns() * nf);
    for col in 0..grid.columns() {
        for rf in 0..nf {
            out.push(grid.eps() * grads.values()[grid.channel_face(col, rf)]);
        }
    }
    out
}

/// `∇_y φ` as face differences on the reference grid, per column.
pub fn cell_gradient(cell: &RectGrid, phi: &TwoScaleField) -> Vec<f64> {
    let mut out = Vec::with_capacity(phi.columns * cell.faces().len());
    for col in 0..phi.columns {
        let v = phi.column(col);
        for f in cell.faces() {
            out.push((v[f.cells[1]] - v[f.cells[0]]) / f.distance());
        }
    }
    out
}

/// `U_ε φ`: the adjoint of `T_ε`. Columns finer than `ε` are averaged
/// over each `ε`-cell; bulk cells are zero.
pub fn average(grid: &MicroGrid, phi: &TwoScaleField) -> Result<Field, TwoScaleError> {
    let nref = grid.cell_grid().len();
    if phi.cell_len != nref {
        return Err(GridError::GridMismatch.into());
    }
    if phi.columns % grid.columns() != 0 {
        return Err(TwoScaleError::Refinement(format!(
            "{} two-scale columns do not refine {} ε-cells",
            phi.columns,
            grid.columns()
        )));
    }
    let q = phi.columns / grid.columns();
    let mut values = vec![0.0; grid.grid().len()];
    for col in 0..grid.columns() {
        for r in 0..nref {
            let s: f64 = (0..q).map(|i| phi.column(col * q + i)[r]).sum();
            values[grid.channel_cell(col, r)] = s / q as f64;
        }
    }
    Ok(Field::new(grid.grid(), values, phi.time)?)
}

/// `(1/ε)(v, w)_{Ω*_ε}` over channel cells.
pub fn channel_inner_scaled(grid: &MicroGrid, v: &Field, w: &Field) -> f64 {
    grid.grid()
        .cells()
        .iter()
        .zip(v.values().iter().zip(w.values()))
        .filter(|(c, _)| c.region == Region::Channel)
        .map(|(c, (a, b))| c.volume() * a * b)
        .sum::<f64>()
        / grid.eps()
}

/// `‖v‖_{L²(Ω*_ε)}`
pub fn channel_norm(grid: &MicroGrid, v: &Field) -> f64 {
    (grid.eps() * channel_inner_scaled(grid, v, v)).sqrt()
}

/// Relative residuals of the exact discrete identities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IdentityResiduals {
    /// `(T v, T w)_{Σ×Z*}` against `(1/ε)(v, w)_{Ω*_ε}`.
    pub inner_product: f64,
    /// `‖T v‖_{L²(Σ×N)}` against `‖v‖_{L²(N_ε)}`.
    pub boundary_norm: f64,
    /// `∇_y T v` against `ε T ∇v`.
    pub gradient: f64,
    /// `(T v, φ)` against `(1/ε)(v, U φ)`.
    pub adjoint: f64,
    /// `U T v` against `v` on channel cells.
    pub round_trip: f64,
    /// Trace of `T v` on `N` against `T` of the trace of `v`.
    pub trace_commutation: f64,
}

impl IdentityResiduals {
    pub fn max(&self) -> f64 {
        [
            self.inner_product,
            self.boundary_norm,
            self.gradient,
            self.adjoint,
            self.round_trip,
            self.trace_commutation,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn combine(&self, o: &IdentityResiduals) -> IdentityResiduals {
        IdentityResiduals {
            inner_product: self.inner_product.max(o.inner_product),
            boundary_norm: self.boundary_norm.max(o.boundary_norm),
            gradient: self.gradient.max(o.gradient),
            adjoint: self.adjoint.max(o.adjoint),
            round_trip: self.round_trip.max(o.round_trip),
            trace_commutation: self.trace_commutation.max(o.trace_commutation),
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Evaluates every identity for fields `v`, `w` on the micro grid and a
/// two-scale field `phi` on the same columns.
pub fn verify_identities(
    grid: &MicroGrid,
    v: &Field,
    w: &Field,
    phi: &TwoScaleField,
) -> Result<IdentityResiduals, TwoScaleError> {
    let cell = grid.cell_grid();
    let tv = unfold(grid, v)?;
    let tw = unfold(grid, w)?;
    let inner_product = rel(tv.inner(&tw, cell)?, channel_inner_scaled(grid, v, w));

    let trace = lateral_trace(grid, v)?;
    let tb = unfold_boundary(grid, &trace)?;
    let boundary_norm = rel(tb.norm(grid), lateral_norm(grid, &trace));
    let from_cells = two_scale_lateral_trace(grid, &tv);
    let trace_commutation = from_cells
        .values
        .iter()
        .zip(&tb.values)
        .map(|(a, b)| rel(*a, *b))
        .fold(0.0, f64::max);

    let grads = face_gradients(grid.grid(), v)?;
    let lhs = cell_gradient(cell, &tv);
    let rhs = unfold_gradient(grid, &grads);
    let gscale = rhs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gradient = if gscale == 0.0 {
        0.0
    } else {
        lhs.iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / gscale
    };

    let u_phi = average(grid, phi)?;
    let adjoint = rel(tv.refine(phi.columns)?.inner(phi, cell)?, channel_inner_scaled(grid, v, &u_phi));

    let back = average(grid, &tv)?;
    let vscale = v.values().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let round_trip = if vscale == 0.0 {
        0.0
    } else {
        grid.grid()
            .cells()
            .iter()
            .zip(v.values().iter().zip(back.values()))
            .filter(|(c, _)| c.region == Region::Channel)
            .map(|(_, (a, b))| (a - b).abs())
            .fold(0.0, f64::max)
            / vscale
    };

    Ok(IdentityResiduals {
        inner_product,
        boundary_norm,
        gradient,
        adjoint,
        round_trip,
        trace_commutation,
    })
}

/// Trapezoidal `(∫ e(t)² dt)^{1/2}`; a single snapshot returns `e(t₀)`.
pub fn time_l2(times: &[f64], squares: &[f64]) -> f64 {
    if times.len() == 1 {
        return squares[0].sqrt();
    }
    let mut acc = 0.0;
    for i in 1..times.len() {
        acc += 0.5 * (times[i] - times[i - 1]) * (squares[i] + squares[i - 1]);
    }
    acc.sqrt()
}

/// Overlay of a micro bulk region and a macro bulk grid: common
/// refinement rectangles with the micro cell (if of `region`) and the
/// macro cell covering them.
#[derive(Debug, Clone)]
pub struct Overlay {
    pieces: Vec<(f64, Option<usize>, usize)>,
}

fn merge_nodes(a: &[f64], b: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut all: Vec<f64> = a
        .iter()
        .chain(b)
        .copied()
        .filter(|&v| v >= lo - 1e-14 && v <= hi + 1e-14)
        .collect();
    all.push(lo);
    all.push(hi);
    all.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for v in all {
        let v = v.clamp(lo, hi);
        if out.last().is_none_or(|&l| v - l > 1e-13) {
            out.push(v);
        }
    }
    out
}

impl Overlay {
    pub fn new(micro: &RectGrid, region: Region, target: &RectGrid) -> Self {
        let (x0, x1) = (target.xs()[0], *target.xs().last().unwrap());
        let (y0, y1) = (target.ys()[0], *target.ys().last().unwrap());
        let xs = merge_nodes(micro.xs(), target.xs(), x0, x1);
        let ys = merge_nodes(micro.ys(), target.ys(), y0, y1);
        let mut pieces = Vec::new();
        for wy in ys.windows(2) {
            for wx in xs.windows(2) {
                let c = (0.5 * (wx[0] + wx[1]), 0.5 * (wy[0] + wy[1]));
                let area = (wx[1] - wx[0]) * (wy[1] - wy[0]);
                let m = micro
                    .locate(c)
                    .and_then(|(i, j)| micro.active_index(i, j))
                    .filter(|&a| micro.cell(a).region == region);
                let (i, j) = target.locate(c).expect("inside target grid");
                let t = target.active_index(i, j).expect("bulk grid has no void cells");
                pieces.push((area, m, t));
            }
        }
        Self { pieces }
    }

    /// `‖χ u_micro − u_macro‖²` over the target grid's domain.
    pub fn squared_difference(&self, micro: &[f64], target: &[f64]) -> f64 {
        self.pieces
            .iter()
            .map(|&(a, m, t)| {
                let d = m.map_or(0.0, |m| micro[m]) - target[t];
                a * d * d
            })
            .sum()
    }
}

/// One row of the two-scale report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRow {
    pub eps: f64,
    pub e_chan: f64,
    pub e_bulk_plus: f64,
    pub e_bulk_minus: f64,
    pub e_n: f64,
    pub apriori_norm: f64,
    pub shift_ratio: Option<f64>,
}

/// Squared channel, boundary and bulk errors at one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SnapshotErrors {
    pub chan: f64,
    pub lateral: f64,
    pub plus: f64,
    pub minus: f64,
}

/// Compares a micro and a macro run snapshot by snapshot.
pub struct ErrorEvaluator<'a> {
    micro: &'a MicroProblem,
    macro_: &'a MacroProblem,
    plus: Overlay,
    minus: Overlay,
    q: usize,
}

impl<'a> ErrorEvaluator<'a> {
    pub fn new(micro: &'a MicroProblem, macro_: &'a MacroProblem) -> Result<Self, TwoScaleError> {
        check_aligned(&micro.grid, &macro_.layout.cell)?;
        let cols = micro.grid.columns();
        let nodes = macro_.nodes();
        if nodes % cols != 0 {
            return Err(TwoScaleError::Refinement(format!(
                "{nodes} interface nodes are not a multiple of the {cols} ε-columns"
            )));
        }
        Ok(Self {
            micro,
            macro_,
            plus: Overlay::new(micro.grid.grid(), Region::BulkPlus, &macro_.layout.plus),
            minus: Overlay::new(micro.grid.grid(), Region::BulkMinus, &macro_.layout.minus),
            q: nodes / cols,
        })
    }

    /// Errors at one time; macro node `j` is compared with column `j / q`.
    pub fn at(&self, u: &Field, state: &crate::macrosim::MacroState) -> Result<SnapshotErrors, TwoScaleError> {
        let grid = &self.micro.grid;
        let mp = self.macro_;
        let tu = unfold(grid, u)?;
        let cell = grid.cell_grid();
        let refs = cell.boundary_faces();
        let delta = mp.layout.delta;
        let mut chan = 0.0;
        let mut lateral = 0.0;
        for j in 0..mp.nodes() {
            let col = tu.column(j / self.q);
            let m = mp.cell_values(state, j);
            for ((c, a), b) in cell.cells().iter().zip(col).zip(m) {
                chan += delta * c.volume() * (a - b) * (a - b);
            }
            for &rb in grid.ref_lateral() {
                let b = &refs[rb];
                let d = col[b.cell] - m[b.cell];
                lateral += delta * b.len * d * d;
            }
        }
        Ok(SnapshotErrors {
            chan,
            lateral,
            plus: self.plus.squared_difference(u.values(), mp.plus_values(state)),
            minus: self.minus.squared_difference(u.values(), mp.minus_values(state)),
        })
    }
}

fn check_times(a: &[f64], b: &[f64]) -> Result<(), TwoScaleError> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-12 * x.abs().max(1.0)) {
        return Err(TwoScaleError::Snapshots(format!(
            "micro has {} snapshots, macro {} (or times differ)",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `E_chan`, `E_bulk±`, `E_N` of a micro run against a macro run.
pub fn ts_error(
    micro: &MicroProblem,
    mtraj: &MicroTrajectory,
    macro_: &MacroProblem,
    ctraj: &MacroTrajectory,
) -> Result<ErrorRow, TwoScaleError> {
    let times = mtraj.times();
    check_times(&times, &ctraj.times())?;
    let ev = ErrorEvaluator::new(micro, macro_)?;
    let mut parts = Vec::with_capacity(times.len());
    for (s, c) in mtraj.snapshots.iter().zip(&ctraj.snapshots) {
        parts.push(ev.at(&s.u, c)?);
    }
    let pick = |f: fn(&SnapshotErrors) -> f64| -> Vec<f64> { parts.iter().map(f).collect() };
    Ok(ErrorRow {
        eps: micro.eps(),
        e_chan: time_l2(&times, &pick(|p| p.chan)),
        e_bulk_plus: time_l2(&times, &pick(|p| p.plus)),
        e_bulk_minus: time_l2(&times, &pick(|p| p.minus)),
        e_n: time_l2(&times, &pick(|p| p.lateral)),
        apriori_norm: apriori_norm(micro, mtraj)?,
        shift_ratio: None,
    })
}

/// Discrete `‖u_ε‖_{L²((0,T), H_ε)}`.
pub fn apriori_norm(micro: &MicroProblem, traj: &MicroTrajectory) -> Result<f64, TwoScaleError> {
    let mut sq = Vec::with_capacity(traj.snapshots.len());
    for s in &traj.snapshots {
        let grads = face_gradients(micro.grid.grid(), &s.u)?;
        sq.push(crate::grid::heps_parts(&micro.grid, &s.u, &grads)?.total());
    }
    Ok(time_l2(&traj.times(), &sq))
}

/// Both sides of the discrete shift estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Shift estimate for a horizontal shift by `l` columns with margin `h`.
///
/// LHS: `ε^{−1/2} max_t ‖δu‖_{L²(channels in Σ̂_2h)} + ε^{1/2} ‖∇δu‖_{L²}`;
/// RHS: `ε + ‖δu(0)‖_{L_ε(Ω̂_h)} + Σ± ‖δu±‖_{L²((0,T)×Ω±_h)}`.
pub fn shift_diagnostic(
    micro: &MicroProblem,
    traj: &MicroTrajectory,
    l: usize,
    h: f64,
) -> Result<ShiftReport, TwoScaleError> {
    let grid = &micro.grid;
    let g = grid.grid();
    let eps = grid.eps();
    let k = grid.refinement();
    let shift_len = eps * l as f64;
    let tol = 1e-12;
    if l == 0 || shift_len > h + tol || !(h > 0.0) {
        return Err(TwoScaleError::Shift(format!(
            "|εl| = {shift_len} must be positive and at most h = {h}"
        )));
    }
    let s = l * k;
    // ε-columns inside Σ_2h and Σ_h
    let columns_in = |margin: f64| -> Vec<bool> {
        (0..grid.columns())
            .map(|c| {
                let a = c as f64 * eps;
                a >= margin - tol && a + eps <= 1.0 - margin + tol
            })
            .collect()
    };
    let hat2 = columns_in(2.0 * h);
    let hat1 = columns_in(h);
    if !hat2.iter().any(|&b| b) {
        return Err(TwoScaleError::Shift(format!("Σ̂_2h is empty for h = {h}")));
    }
    let nx = g.nx();
    let partner: Vec<Option<usize>> = g
        .cells()
        .iter()
        .map(|c| {
            if c.i + s < nx {
                g.active_index(c.i + s, c.j)
            } else {
                None
            }
        })
        .collect();
    let delta = |u: &[f64]| -> Vec<f64> {
        u.iter()
            .zip(&partner)
            .map(|(v, p)| p.map_or(-v, |p| u[p] - v))
            .collect()
    };
    let in_sigma_h = |x: f64| x > h - tol && x < 1.0 - h + tol;
    let col_of = |i: usize| i / k;

    let times = traj.times();
    let mut chan_sup: f64 = 0.0;
    let mut grad_sq = Vec::with_capacity(times.len());
    let mut bulk_sq = [Vec::new(), Vec::new()];
    let mut initial = 0.0;
    for (n, snap) in traj.snapshots.iter().enumerate() {
        let du = delta(snap.u.values());
        let mut chan = 0.0;
        let mut bulk = [0.0, 0.0];
        let mut init = 0.0;
        for (a, c) in g.cells().iter().enumerate() {
            let v2 = du[a] * du[a] * c.volume();
            match c.region {
                Region::Channel => {
                    if hat2[col_of(c.i)] {
                        chan += v2;
                    }
                    if hat1[col_of(c.i)] {
                        init += v2 / eps;
                    }
                }
                Region::BulkPlus | Region::BulkMinus => {
                    let side = usize::from(c.region == Region::BulkMinus);
                    if in_sigma_h(c.center.0) {
                        bulk[side] += v2;
                    }
                    if hat1[col_of(c.i)] {
                        init += v2;
                    }
                }
                Region::Void => {}
            }
        }
        // channel gradient over faces inside the Σ̂_2h channels
        let mut grad = 0.0;
        for f in g.faces() {
            let (a, b) = (f.cells[0], f.cells[1]);
            let (ca, cb) = (g.cell(a), g.cell(b));
            if ca.region != Region::Channel || cb.region != Region::Channel {
                continue;
            }
            if !hat2[col_of(ca.i)] || !hat2[col_of(cb.i)] {
                continue;
            }
            let q = (du[b] - du[a]) / f.distance();
            for c in [a, b] {
                let count = g.axis_face_count(c)[f.axis.index()] as f64;
                grad += g.cell(c).volume() / count * q * q;
            }
        }
        chan_sup = chan_sup.max(chan);
        grad_sq.push(grad);
        bulk_sq[0].push(bulk[0]);
        bulk_sq[1].push(bulk[1]);
        if n == 0 {
            initial = init;
        }
    }
    let lhs = chan_sup.sqrt() / eps.sqrt() + eps.sqrt() * time_l2(&times, &grad_sq);
    let rhs = eps + initial.sqrt() + time_l2(&times, &bulk_sq[0]) + time_l2(&times, &bulk_sq[1]);
    Ok(ShiftReport {
        lhs,
        rhs,
        ratio: lhs / rhs,
    })
}

/// Trace-inequality constant `C(θ)` for the reference grid: the smallest
/// `C` with `‖φ‖²_N ≤ C² ‖φ‖²_{Z*} + θ² ‖∇φ‖²_{Z*}` for every discrete `φ`.
pub fn calibrate_trace_constant(cell: &RectGrid, theta: f64) -> f64 {
    let n = cell.len();
    let mut boundary = vec![0.0; n];
    for b in cell.boundary_faces() {
        if b.kind == BoundaryKind::Lateral {
            boundary[b.cell] += b.len;
        }
    }
    let mass: Vec<f64> = cell.cells().iter().map(|c| c.volume()).collect();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = boundary[i];
    }
    for f in cell.faces() {
        let mut w = 0.0;
        for &c in &f.cells {
            let count = cell.axis_face_count(c)[f.axis.index()] as f64;
            w += cell.cell(c).volume() / count;
        }
        let w = theta * theta * w / (f.distance() * f.distance());
        let (p, q) = (f.cells[0], f.cells[1]);
        a[(p, p)] -= w;
        a[(q, q)] -= w;
        a[(p, q)] += w;
        a[(q, p)] += w;
    }
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] /= (mass[i] * mass[j]).sqrt();
        }
    }
    let eig = SymmetricEigen::new(a);
    eig.eigenvalues.max().max(0.0).sqrt()
}

/// Per-column `(‖φ‖²_N, ‖φ‖²_{Z*}, ‖∇φ‖²_{Z*})` summed over columns.
fn column_parts(grid: &MicroGrid, v: &Field) -> Result<(f64, f64, f64), TwoScaleError> {
    let tv = unfold(grid, v)?;
    let cell = grid.cell_grid();
    let (mut nb, mut l2, mut gr) = (0.0, 0.0, 0.0);
    for col in 0..tv.columns() {
        let phi = tv.column(col);
        for b in cell.boundary_faces() {
            if b.kind == BoundaryKind::Lateral {
                nb += b.len * phi[b.cell] * phi[b.cell];
            }
        }
        for (c, x) in cell.cells().iter().zip(phi) {
            l2 += c.volume() * x * x;
        }
        for f in cell.faces() {
            let q = (phi[f.cells[1]] - phi[f.cells[0]]) / f.distance();
            for &c in &f.cells {
                let count = cell.axis_face_count(c)[f.axis.index()] as f64;
                gr += cell.cell(c).volume() / count * q * q;
            }
        }
    }
    Ok((nb, l2, gr))
}

/// `(‖v‖_{L²(N_ε)}, C ε^{−1/2}‖v‖_{L²(Ω*_ε)} + θ ε^{1/2}‖∇v‖_{L²(Ω*_ε)})`.
pub fn trace_inequality_diagnostic(
    grid: &MicroGrid,
    v: &Field,
    theta: f64,
    constant: f64,
) -> Result<(f64, f64), TwoScaleError> {
    let eps = grid.eps();
    let (nb, l2, gr) = column_parts(grid, v)?;
    // physical norms: ‖v‖²_N = ε nb, ‖v‖² = ε² l2, ‖∇v‖² = gr
    let lhs = (eps * nb).sqrt();
    let rhs = constant / eps.sqrt() * (eps * eps * l2).sqrt() + theta * eps.sqrt() * gr.sqrt();
    Ok((lhs, rhs))
}
