//! Finite-volume solver for the channel-resolved microscopic problem.
//!
//! Unknowns are cell averages on the aligned micro grid. Diffusion is
//! advanced by backward Euler with the `L_ε`-weighted mass (bulk weight 1,
//! channel weight `1/ε`); `f±`, `g` and the wall flux `h` are explicit.

use thiserror::Error;

use crate::geometry::{CellGeometry, MicroGeometry, Region};
use crate::grid::{
    build_micro_grid, face_gradients, heps_parts, BoundaryKind, Field, GridError, HepsParts,
    MicroGrid,
};
use crate::kinetics::{InitialData, Kinetics, KineticsError, Side};
use crate::linsolve::{solve_spd, CsrMatrix, SolveError, SolverOptions, TripletBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MicroError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
    #[error("coercivity violated: {0}")]
    Coercivity(String),
    #[error("time step {dt} exceeds the stability bound {bound}")]
    Stability { dt: f64, bound: f64 },
    #[error("invalid time interval: {0}")]
    Time(String),
}

/// Bulk diffusivities and the diagonal channel tensor, one per profile
/// segment.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    pub plus: f64,
    pub minus: f64,
    pub channel: Vec<[f64; 2]>,
}

impl DiffusionSpec {
    pub fn uniform(plus: f64, minus: f64, channel: [f64; 2], segments: usize) -> Self {
        Self {
            plus,
            minus,
            channel: vec![channel; segments],
        }
    }

    /// Smallest diagonal entry over all coefficients.
    pub fn coercivity(&self) -> f64 {
        self.channel
            .iter()
            .flat_map(|d| d.iter().copied())
            .fold(self.plus.min(self.minus), f64::min)
    }

    pub fn validate(&self, cell: &CellGeometry) -> Result<(), MicroError> {
        let n = cell.profile().segments().len();
        if self.channel.len() != n {
            return Err(MicroError::Coercivity(format!(
                "{} channel tensors for {n} profile segments",
                self.channel.len()
            )));
        }
        let all_finite = self.plus.is_finite()
            && self.minus.is_finite()
            && self.channel.iter().flatten().all(|v| v.is_finite());
        if !all_finite || !(self.coercivity() > 0.0) {
            return Err(MicroError::Coercivity(format!(
                "minimum diffusivity {} must be positive",
                self.coercivity()
            )));
        }
        Ok(())
    }

    /// `D^M` at microscopic height `y_n`.
    pub fn channel_at(&self, cell: &CellGeometry, yn: f64) -> [f64; 2] {
        self.channel[cell.profile().segment_index(yn)]
    }

    pub fn bulk(&self, side: Side) -> f64 {
        match side {
            Side::Plus => self.plus,
            Side::Minus => self.minus,
        }
    }
}

/// Stiffness matrix and lumped accumulation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroOperator {
    pub stiffness: CsrMatrix,
    pub mass: Vec<f64>,
}

/// Per-cell conductivity along `axis`: `D±` in the bulk, `ε D^M` in the
/// channels.
fn conductivity(
    grid: &MicroGrid,
    cell: &CellGeometry,
    diff: &DiffusionSpec,
    a: usize,
    axis: usize,
) -> f64 {
    let c = grid.grid().cell(a);
    match c.region {
        Region::BulkPlus => diff.plus,
        Region::BulkMinus => diff.minus,
        Region::Channel => grid.eps() * diff.channel_at(cell, c.center.1 / grid.eps())[axis],
        Region::Void => 0.0,
    }
}

/// Assembles the TPFA stiffness `K` and the `L_ε` mass weights.
///
/// Face transmissibility is `len / (h_a/κ_a + h_b/κ_b)` with half-spacings
/// `h` and conductivities `κ`; on `S*_ε±` this is the harmonic mean of `D±`
/// and `ε D^M_nn`. Outer and lateral walls carry no diffusive flux.
pub fn assemble_micro_operator(
    grid: &MicroGrid,
    cell: &CellGeometry,
    diff: &DiffusionSpec,
) -> Result<MicroOperator, MicroError> {
    diff.validate(cell)?;
    let g = grid.grid();
    let mut t = TripletBuilder::new(g.len());
    for f in g.faces() {
        let ax = f.axis.index();
        let ka = conductivity(grid, cell, diff, f.cells[0], ax);
        let kb = conductivity(grid, cell, diff, f.cells[1], ax);
        let trans = f.len / (f.half[0] / ka + f.half[1] / kb);
        t.add_coupling(f.cells[0], f.cells[1], trans);
    }
    // keep every row present even for isolated cells
    for a in 0..g.len() {
        t.add(a, a, 0.0);
    }
    let stiffness = t.build(false)?;
    let mass = g
        .cells()
        .iter()
        .map(|c| grid.weight(c.region) * c.volume())
        .collect();
    Ok(MicroOperator { stiffness, mass })
}

/// Largest admissible explicit step for the given kinetics.
pub fn stability_bound(kin: &Kinetics, cell: &CellGeometry, height: f64, k: usize) -> f64 {
    let (lf, lg, lh) = kin.lipschitz_constants(height);
    let ratio = crate::geometry::to_f64(cell.lateral_length()) / crate::geometry::to_f64(cell.area());
    let worst = lf.max(lg).max(lh * k as f64 * ratio);
    if worst > 0.0 {
        0.5 / worst
    } else {
        f64::INFINITY
    }
}

/// Number of steps and adjusted step so that `n Δt' = T` exactly.
pub fn step_count(t_final: f64, dt: f64) -> Result<(usize, f64), MicroError> {
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return Err(MicroError::Time(format!("final time {t_final} must be ≥ 0")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(MicroError::Time(format!("time step {dt} must be > 0")));
    }
    if t_final == 0.0 {
        return Ok((0, dt));
    }
    let n = (t_final / dt - 1e-9).ceil().max(1.0) as usize;
    Ok((n, t_final / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroState {
    pub step: usize,
    pub t: f64,
    pub u: Field,
}

/// Micro problem for one `ε`: geometry, grid, operator and kinetics.
#[derive(Debug, Clone)]
pub struct MicroProblem {
    pub geom: MicroGeometry,
    pub grid: MicroGrid,
    pub diff: DiffusionSpec,
    pub kin: Kinetics,
    pub solver: SolverOptions,
    pub op: MicroOperator,
    lateral: Vec<LateralFace>,
    local: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct LateralFace {
    cell: usize,
    len: f64,
    y: (f64, f64),
}

impl MicroProblem {
    pub fn new(
        geom: MicroGeometry,
        k: usize,
        diff: DiffusionSpec,
        kin: Kinetics,
        solver: SolverOptions,
    ) -> Result<Self, MicroError> {
        let grid = build_micro_grid(&geom, k)?;
        let op = assemble_micro_operator(&grid, geom.cell(), &diff)?;
        let bfaces = grid.grid().boundary_faces();
        let ref_faces = grid.cell_grid().boundary_faces();
        let mut lateral = Vec::with_capacity(grid.lateral_count());
        for col in 0..grid.columns() {
            for (rl, &rb) in grid.ref_lateral().iter().enumerate() {
                let b = &bfaces[grid.lateral_face(col, rl)];
                debug_assert_eq!(b.kind, BoundaryKind::Lateral);
                lateral.push(LateralFace {
                    cell: b.cell,
                    len: b.len,
                    y: ref_faces[rb].center,
                });
            }
        }
        let local = grid
            .channel_cell_coordinates()
            .into_iter()
            .map(|c| c.map_or((0.0, 0.0), |(_, y)| y))
            .collect();
        Ok(Self {
            geom,
            grid,
            diff,
            kin,
            solver,
            op,
            lateral,
            local,
        })
    }

    pub fn eps(&self) -> f64 {
        self.grid.eps()
    }

    /// Initial field: `u_i±` at bulk cell centres, `u_i^M(x̄, x/ε)` in the
    /// channels.
    pub fn initial_field(&self, init: &InitialData) -> Result<Field, MicroError> {
        let values = self
            .grid
            .grid()
            .cells()
            .iter()
            .zip(&self.local)
            .map(|(c, &y)| match c.region {
                Region::BulkPlus => init.bulk(Side::Plus, c.center),
                Region::BulkMinus => init.bulk(Side::Minus, c.center),
                _ => init.channel(c.center.0, y),
            })
            .collect();
        Ok(Field::new(self.grid.grid(), values, 0.0)?)
    }

    /// Explicit right side `R(t, u)` per cell: `vol·f±` in the bulk,
    /// `(vol/ε)·g − Σ_N len·h` in the channels.
    pub fn rates(&self, t: f64, u: &[f64]) -> Result<Vec<f64>, MicroError> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(KineticsError::Domain(format!("time {t}")).into());
        }
        let g = self.grid.grid();
        let eps = self.eps();
        let mut r: Vec<f64> = g
            .cells()
            .iter()
            .zip(u.iter().zip(&self.local))
            .map(|(c, (&v, &y))| match c.region {
                Region::BulkPlus => c.volume() * self.kin.f_plus.rate(t, c.center, v),
                Region::BulkMinus => c.volume() * self.kin.f_minus.rate(t, c.center, v),
                Region::Channel => c.volume() / eps * self.kin.g.rate(t, y, v),
                Region::Void => 0.0,
            })
            .collect();
        if !self.kin.h.is_zero() {
            for lf in &self.lateral {
                r[lf.cell] -= lf.len * self.kin.h.rate(t, lf.y, u[lf.cell]);
            }
        }
        if let Some(i) = r.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index: i }.into());
        }
        Ok(r)
    }

    /// Weighted mass `Σ_bulk u vol + (1/ε) Σ_chan u vol`.
    pub fn mass(&self, u: &[f64]) -> f64 {
        self.op.mass.iter().zip(u).map(|(m, v)| m * v).sum()
    }

    pub fn stability_bound(&self) -> f64 {
        stability_bound(
            &self.kin,
            self.geom.cell(),
            self.geom.height_f64(),
            self.grid.refinement(),
        )
    }

    pub fn stepper(&self, dt: f64) -> Result<MicroStepper<'_>, MicroError> {
        let bound = self.stability_bound();
        if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
            return Err(MicroError::Stability { dt, bound });
        }
        let diag: Vec<f64> = self.op.mass.iter().map(|m| m / dt).collect();
        let system = self.op.stiffness.add_diagonal(&diag)?;
        Ok(MicroStepper {
            problem: self,
            dt,
            system,
        })
    }

    /// `‖u‖²_{H_ε}` split into parts.
    pub fn heps(&self, u: &Field) -> Result<HepsParts, MicroError> {
        let grads = face_gradients(self.grid.grid(), u)?;
        Ok(heps_parts(&self.grid, u, &grads)?)
    }

    /// Solves on `[0, T]`, keeping every `stride`-th state and the last.
    pub fn run(
        &self,
        init: &InitialData,
        t_final: f64,
        dt: f64,
        stride: usize,
    ) -> Result<MicroTrajectory, MicroError> {
        let u0 = self.initial_field(init)?;
        self.run_from(u0, t_final, dt, stride)
    }

    pub fn run_from(
        &self,
        u0: Field,
        t_final: f64,
        dt: f64,
        stride: usize,
    ) -> Result<MicroTrajectory, MicroError> {
        let (n, dt) = step_count(t_final, dt)?;
        let stride = stride.max(1);
        let mut state = MicroState {
            step: 0,
            t: 0.0,
            u: u0,
        };
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
        Ok(MicroTrajectory { dt, snapshots })
    }
}

/// Backward-Euler system for a fixed step.
#[derive(Debug, Clone)]
pub struct MicroStepper<'a> {
    problem: &'a MicroProblem,
    dt: f64,
    system: CsrMatrix,
}

/// Weighted-mass bookkeeping for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassReport {
    pub before: f64,
    pub after: f64,
    /// `Δt · Σ R(t_n, u^n)`
    pub source: f64,
    /// `|ΔM − Δt ΣR(t_n, u^n)|`: the discrete identity.
    pub residual: f64,
    /// `|ΔM − Δt (ΣR(t_n,u^n) + ΣR(t_{n+1},u^{n+1}))/2|`: consistency
    /// against the time-continuous balance.
    pub consistency: f64,
}

impl<'a> MicroStepper<'a> {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn system(&self) -> &CsrMatrix {
        &self.system
    }

    pub fn step(&self, state: &MicroState) -> Result<MicroState, MicroError> {
        let p = self.problem;
        let u = state.u.values();
        let r = p.rates(state.t, u)?;
        let rhs: Vec<f64> = p
            .op
            .mass
            .iter()
            .zip(u.iter().zip(&r))
            .map(|(m, (v, s))| m * v / self.dt + s)
            .collect();
        // explicit predictor as initial guess; exact for uniform states
        let guess: Vec<f64> = p
            .op
            .mass
            .iter()
            .zip(u.iter().zip(&r))
            .map(|(m, (v, s))| v + self.dt * s / m)
            .collect();
        let sol = solve_spd(&self.system, &rhs, Some(&guess), p.solver)?;
        let step = state.step + 1;
        let t = step as f64 * self.dt;
        Ok(MicroState {
            step,
            t,
            u: Field::new(p.grid.grid(), sol.x, t)?,
        })
    }

    /// Mass balance of the step `before → after`.
    pub fn mass_report(&self, before: &MicroState, after: &MicroState) -> Result<MassReport, MicroError> {
        let p = self.problem;
        let m0 = p.mass(before.u.values());
        let m1 = p.mass(after.u.values());
        let s0: f64 = p.rates(before.t, before.u.values())?.iter().sum();
        let s1: f64 = p.rates(after.t, after.u.values())?.iter().sum();
        let dm = m1 - m0;
        Ok(MassReport {
            before: m0,
            after: m1,
            source: self.dt * s0,
            residual: (dm - self.dt * s0).abs(),
            consistency: (dm - 0.5 * self.dt * (s0 + s1)).abs(),
        })
    }
}

/// Snapshots of a micro run.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroTrajectory {
    pub dt: f64,
    pub snapshots: Vec<MicroState>,
}

impl MicroTrajectory {
    pub fn last(&self) -> &MicroState {
        self.snapshots.last().expect("at least the initial state")
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }
}
