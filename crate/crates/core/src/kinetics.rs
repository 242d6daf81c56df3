//! Reaction and boundary rates `f±(t,x,u)`, `g(t,y,u)`, `h(t,y,u)` and the
//! initial data.
//!
//! Every rate is `time(t) · factor(position) · law(u)`. The law fixes the
//! Lipschitz constant in `u`; spatial and temporal factors scale it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CellGeometry;
use crate::grid::{BoundaryKind, Field, GridError, MicroGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticsError {
    #[error("rate evaluated outside its domain: {0}")]
    Domain(String),
    #[error("invalid kinetics parameter: {0}")]
    Parameter(String),
    #[error("Lipschitz certificate failed: slope {slope:e} at u = {at} exceeds declared {declared:e}")]
    Lipschitz { slope: f64, at: f64, declared: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Dependence of a rate on the concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum RateLaw {
    Zero,
    /// `c`, independent of `u`.
    Constant { value: f64 },
    /// `−λ u`
    LinearDecay { lambda: f64 },
    /// `r u (1 − u/capacity)` on `[−bound, bound]`, continued linearly
    /// (tangent) outside.
    LogisticClamped { rate: f64, capacity: f64, bound: f64 },
    /// `κ (u − external)`, an outflow when positive.
    Exchange { kappa: f64, external: f64 },
    /// Piecewise-linear interpolation of `(u, rate)` nodes, constant outside.
    Tabulated { points: Vec<(f64, f64)> },
}

impl RateLaw {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            RateLaw::Zero => 0.0,
            RateLaw::Constant { value } => *value,
            RateLaw::LinearDecay { lambda } => -lambda * u,
            RateLaw::LogisticClamped {
                rate,
                capacity,
                bound,
            } => {
                let logistic = |v: f64| rate * v * (1.0 - v / capacity);
                let slope = |v: f64| rate * (1.0 - 2.0 * v / capacity);
                if u > *bound {
                    logistic(*bound) + slope(*bound) * (u - bound)
                } else if u < -bound {
                    logistic(-bound) + slope(-bound) * (u + bound)
                } else {
                    logistic(u)
                }
            }
            RateLaw::Exchange { kappa, external } => kappa * (u - external),
            RateLaw::Tabulated { points } => {
                let first = points[0];
                let last = points[points.len() - 1];
                if u <= first.0 {
                    return first.1;
                }
                if u >= last.0 {
                    return last.1;
                }
                let k = points.partition_point(|p| p.0 <= u);
                let (a, b) = (points[k - 1], points[k]);
                a.1 + (b.1 - a.1) * (u - a.0) / (b.0 - a.0)
            }
        }
    }

    /// Global Lipschitz constant in `u`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            RateLaw::Zero | RateLaw::Constant { .. } => 0.0,
            RateLaw::LinearDecay { lambda } => lambda.abs(),
            RateLaw::LogisticClamped {
                rate,
                capacity,
                bound,
            } => rate.abs() * (1.0 + 2.0 * bound / capacity.abs()),
            RateLaw::Exchange { kappa, .. } => kappa.abs(),
            RateLaw::Tabulated { points } => points
                .windows(2)
                .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
                .fold(0.0, f64::max),
        }
    }

    pub fn validate(&self) -> Result<(), KineticsError> {
        let bad = |m: &str| Err(KineticsError::Parameter(m.to_string()));
        match self {
            RateLaw::LogisticClamped {
                capacity, bound, ..
            } => {
                if !(*capacity > 0.0) {
                    return bad("logistic capacity must be positive");
                }
                if !(*bound > 0.0) {
                    return bad("logistic clamp bound must be positive");
                }
            }
            RateLaw::Tabulated { points } => {
                if points.len() < 2 {
                    return bad("tabulated law needs at least two points");
                }
                if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return bad("tabulated nodes must be strictly increasing");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Spatial factor. For `g` and `h` the position is the microscopic `y`
/// (so `Periodic` is `Y`-periodic in `ȳ`); for `f` it is the physical `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpatialFactor {
    #[default]
    Uniform,
    /// `offset + slope_bar · p̄ + slope_n · p_n`
    Affine {
        offset: f64,
        slope_bar: f64,
        slope_n: f64,
    },
    /// `mean + amplitude · cos(2π p̄)`
    Periodic { mean: f64, amplitude: f64 },
}

impl SpatialFactor {
    pub fn eval(&self, p: (f64, f64)) -> f64 {
        match self {
            SpatialFactor::Uniform => 1.0,
            SpatialFactor::Affine {
                offset,
                slope_bar,
                slope_n,
            } => offset + slope_bar * p.0 + slope_n * p.1,
            SpatialFactor::Periodic { mean, amplitude } => mean + amplitude * (2.0 * PI * p.0).cos(),
        }
    }

    /// Upper bound of `|factor|` over `[0,1] × [−reach, reach]`.
    pub fn max_abs(&self, reach: f64) -> f64 {
        match self {
            SpatialFactor::Uniform => 1.0,
            SpatialFactor::Affine {
                offset,
                slope_bar,
                slope_n,
            } => offset.abs() + slope_bar.abs() + slope_n.abs() * reach,
            SpatialFactor::Periodic { mean, amplitude } => mean.abs() + amplitude.abs(),
        }
    }
}

/// Continuous time modulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeProfile {
    #[default]
    Steady,
    /// `min(1, t/duration)`
    Ramp { duration: f64 },
}

impl TimeProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeProfile::Steady => 1.0,
            TimeProfile::Ramp { duration } => (t / duration).min(1.0),
        }
    }
}

/// One rate with its declared Lipschitz constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticsSpec {
    #[serde(flatten)]
    pub law: RateLaw,
    #[serde(default)]
    pub factor: SpatialFactor,
    #[serde(default)]
    pub time: TimeProfile,
    /// Declared constant; derived from the parameters when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

impl KineticsSpec {
    pub fn new(law: RateLaw) -> Self {
        Self {
            law,
            factor: SpatialFactor::Uniform,
            time: TimeProfile::Steady,
            lipschitz: None,
        }
    }

    pub fn zero() -> Self {
        Self::new(RateLaw::Zero)
    }

    pub fn with_factor(mut self, factor: SpatialFactor) -> Self {
        self.factor = factor;
        self
    }

    pub fn with_time(mut self, time: TimeProfile) -> Self {
        self.time = time;
        self
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.law, RateLaw::Zero)
    }

    /// Rate at `(t, p, u)` without domain checks.
    pub fn rate(&self, t: f64, p: (f64, f64), u: f64) -> f64 {
        self.time.eval(t) * self.factor.eval(p) * self.law.eval(u)
    }

    /// Declared Lipschitz constant in `u`, uniform over the position range
    /// `[0,1] × [−reach, reach]`.
    pub fn lipschitz(&self, reach: f64) -> f64 {
        self.lipschitz
            .unwrap_or_else(|| self.law.lipschitz() * self.factor.max_abs(reach))
    }

    /// Sampled Lipschitz check on `samples` points of `u ∈ [−bound, bound]`
    /// at the given positions and times.
    pub fn certify(
        &self,
        bound: f64,
        samples: usize,
        positions: &[(f64, f64)],
        times: &[f64],
        reach: f64,
    ) -> Result<(), KineticsError> {
        self.law.validate()?;
        let declared = self.lipschitz(reach);
        let h = 2.0 * bound / (samples - 1) as f64;
        for &t in times {
            for &p in positions {
                let mut prev = self.rate(t, p, -bound);
                for s in 1..samples {
                    let u = -bound + h * s as f64;
                    let cur = self.rate(t, p, u);
                    let slope = ((cur - prev) / h).abs();
                    if slope > declared * (1.0 + 1e-9) + 1e-12 {
                        return Err(KineticsError::Lipschitz {
                            slope,
                            at: u,
                            declared,
                        });
                    }
                    prev = cur;
                }
            }
        }
        Ok(())
    }
}

/// Which bulk domain a bulk rate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Plus,
    Minus,
}

/// The full set of rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kinetics {
    pub f_plus: KineticsSpec,
    pub f_minus: KineticsSpec,
    pub g: KineticsSpec,
    pub h: KineticsSpec,
}

fn check_time(t: f64) -> Result<(), KineticsError> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(KineticsError::Domain(format!("time {t} is not in [0, T]")))
    }
}

impl Kinetics {
    pub fn zero() -> Self {
        Self {
            f_plus: KineticsSpec::zero(),
            f_minus: KineticsSpec::zero(),
            g: KineticsSpec::zero(),
            h: KineticsSpec::zero(),
        }
    }

    pub fn f(&self, side: Side) -> &KineticsSpec {
        match side {
            Side::Plus => &self.f_plus,
            Side::Minus => &self.f_minus,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.f_plus.is_zero() && self.f_minus.is_zero() && self.g.is_zero() && self.h.is_zero()
    }

    /// `f±(t, x, u)` for `x` in the closure of `Ω = (0,1) × (−H, H)`.
    pub fn eval_f(
        &self,
        side: Side,
        t: f64,
        x: (f64, f64),
        u: f64,
        height: f64,
    ) -> Result<f64, KineticsError> {
        check_time(t)?;
        if !(0.0..=1.0).contains(&x.0) || !(-height..=height).contains(&x.1) {
            return Err(KineticsError::Domain(format!("x = {x:?} outside Ω")));
        }
        Ok(self.f(side).rate(t, x, u))
    }

    /// `g(t, y, u)` for `y ∈ closure(Z*)`.
    pub fn eval_g(
        &self,
        cell: &CellGeometry,
        t: f64,
        y: (f64, f64),
        u: f64,
    ) -> Result<f64, KineticsError> {
        check_time(t)?;
        if !cell.contains_closed(y) {
            return Err(KineticsError::Domain(format!("y = {y:?} outside Z*")));
        }
        Ok(self.g.rate(t, y, u))
    }

    /// `h(t, y, u)` for `y ∈ N`.
    pub fn eval_h(
        &self,
        cell: &CellGeometry,
        t: f64,
        y: (f64, f64),
        u: f64,
    ) -> Result<f64, KineticsError> {
        check_time(t)?;
        if !cell.on_lateral(y, 1e-12) {
            return Err(KineticsError::Domain(format!("y = {y:?} not on N")));
        }
        Ok(self.h.rate(t, y, u))
    }

    /// Lipschitz constants `(L_f, L_g, L_h)` with `L_f = max(L_f+, L_f−)`.
    pub fn lipschitz_constants(&self, height: f64) -> (f64, f64, f64) {
        (
            self.f_plus.lipschitz(height).max(self.f_minus.lipschitz(height)),
            self.g.lipschitz(1.0),
            self.h.lipschitz(1.0),
        )
    }

    /// Sampled certificate for all four rates (1000 samples on `[−M, M]`).
    pub fn certify(&self, bound: f64, height: f64) -> Result<(), KineticsError> {
        let cell_pts = [(0.5, 0.0), (0.25, -1.0), (0.75, 1.0), (0.1, 0.5)];
        let bulk_pts = [(0.5, 0.5 * height), (0.0, -height), (1.0, height)];
        let times = [0.0, 0.5, 1.0, 10.0];
        self.f_plus.certify(bound, 1000, &bulk_pts, &times, height)?;
        self.f_minus.certify(bound, 1000, &bulk_pts, &times, height)?;
        self.g.certify(bound, 1000, &cell_pts, &times, 1.0)?;
        self.h.certify(bound, 1000, &cell_pts, &times, 1.0)?;
        Ok(())
    }
}

/// `g` at every channel cell of the micro grid, evaluated at the cell's
/// microscopic coordinate `y = x/ε − (k̄, 0)`. Bulk entries are zero.
pub fn sample_micro_kinetics(
    kin: &Kinetics,
    grid: &MicroGrid,
    t: f64,
    u: &Field,
) -> Result<Field, KineticsError> {
    check_time(t)?;
    if !u.belongs_to(grid.grid()) {
        return Err(GridError::GridMismatch.into());
    }
    let coords = grid.channel_cell_coordinates();
    let values = u
        .values()
        .iter()
        .zip(&coords)
        .map(|(&v, c)| match c {
            Some((_, y)) => kin.g.rate(t, *y, v),
            None => 0.0,
        })
        .collect();
    Ok(Field::new(grid.grid(), values, t)?)
}

/// `h` on every `N_ε` face of the micro grid, ordered by micro boundary
/// face index, evaluated at the face midpoint's microscopic coordinate with
/// the adjacent channel-cell value.
pub fn sample_micro_boundary(
    kin: &Kinetics,
    grid: &MicroGrid,
    t: f64,
    u: &Field,
) -> Result<Vec<(usize, f64)>, KineticsError> {
    check_time(t)?;
    if !u.belongs_to(grid.grid()) {
        return Err(GridError::GridMismatch.into());
    }
    let cell_grid = grid.cell_grid();
    let mut out = Vec::with_capacity(grid.lateral_count());
    for col in 0..grid.columns() {
        for (rl, &rb) in grid.ref_lateral().iter().enumerate() {
            let f = grid.lateral_face(col, rl);
            let b = &grid.grid().boundary_faces()[f];
            debug_assert_eq!(b.kind, BoundaryKind::Lateral);
            let y = cell_grid.boundary_faces()[rb].center;
            out.push((f, kin.h.rate(t, y, u.values()[b.cell])));
        }
    }
    out.sort_by_key(|p| p.0);
    Ok(out)
}

/// Closed-form initial profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialProfile {
    Constant {
        value: f64,
    },
    /// `offset + slope_bar · x̄ + slope_n · s` where `s` is `x_n` (bulk) or
    /// `y_n` (channel).
    Affine {
        offset: f64,
        #[serde(default)]
        slope_bar: f64,
        #[serde(default)]
        slope_n: f64,
    },
    /// `offset + amplitude · cos(2π · wavenumber · x̄) + slope_n · s`
    Wave {
        offset: f64,
        amplitude: f64,
        wavenumber: f64,
        #[serde(default)]
        slope_n: f64,
    },
    /// Channel only: `offset + amplitude · cos(2π ȳ) + slope_n · y_n`.
    CellPeriodic {
        offset: f64,
        amplitude: f64,
        #[serde(default)]
        slope_n: f64,
    },
}

impl InitialProfile {
    fn eval(&self, xbar: f64, s: f64, ybar: f64) -> f64 {
        match self {
            InitialProfile::Constant { value } => *value,
            InitialProfile::Affine {
                offset,
                slope_bar,
                slope_n,
            } => offset + slope_bar * xbar + slope_n * s,
            InitialProfile::Wave {
                offset,
                amplitude,
                wavenumber,
                slope_n,
            } => offset + amplitude * (2.0 * PI * wavenumber * xbar).cos() + slope_n * s,
            InitialProfile::CellPeriodic {
                offset,
                amplitude,
                slope_n,
            } => offset + amplitude * (2.0 * PI * ybar).cos() + slope_n * s,
        }
    }

    pub fn is_cell_only(&self) -> bool {
        matches!(self, InitialProfile::CellPeriodic { .. })
    }
}

/// Initial data `(u_i+, u_i^M, u_i−)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialData {
    pub plus: InitialProfile,
    pub minus: InitialProfile,
    pub channel: InitialProfile,
}

impl InitialData {
    pub fn constant(c: f64) -> Self {
        let p = InitialProfile::Constant { value: c };
        Self {
            plus: p.clone(),
            minus: p.clone(),
            channel: p,
        }
    }

    /// `u_i±(x)`
    pub fn bulk(&self, side: Side, x: (f64, f64)) -> f64 {
        match side {
            Side::Plus => self.plus.eval(x.0, x.1, 0.0),
            Side::Minus => self.minus.eval(x.0, x.1, 0.0),
        }
    }

    /// `u_i^M(x̄, y)`
    pub fn channel(&self, xbar: f64, y: (f64, f64)) -> f64 {
        self.channel.eval(xbar, y.1, y.0)
    }

    pub fn validate(&self) -> Result<(), KineticsError> {
        if self.plus.is_cell_only() || self.minus.is_cell_only() {
            return Err(KineticsError::Parameter(
                "cell_periodic initial data is only defined in the channels".into(),
            ));
        }
        Ok(())
    }

    /// Sampled boundedness and continuity-in-`y` check of `u_i^M`.
    pub fn check_channel_continuity(&self, cell: &CellGeometry, n: usize) -> Result<f64, KineticsError> {
        let mut sup: f64 = 0.0;
        for a in 0..=n {
            let xbar = a as f64 / n as f64;
            for i in 0..=n {
                for j in 0..=2 * n {
                    let y = (i as f64 / n as f64, -1.0 + j as f64 / n as f64);
                    if !cell.contains_closed(y) {
                        continue;
                    }
                    let v = self.channel(xbar, y);
                    if !v.is_finite() {
                        return Err(KineticsError::Parameter(format!(
                            "u_i^M not finite at x̄ = {xbar}, y = {y:?}"
                        )));
                    }
                    let step: f64 = 1e-7;
                    let w = self.channel(xbar, (y.0, y.1 - step.copysign(y.1)));
                    if (w - v).abs() > 1e-3 {
                        return Err(KineticsError::Parameter(format!(
                            "u_i^M discontinuous in y at x̄ = {xbar}, y = {y:?}"
                        )));
                    }
                    sup = sup.max(v.abs());
                }
            }
        }
        Ok(sup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_micro_geometry, build_reference_cell, ChannelProfile, Q};
    use crate::grid::build_micro_grid;

    fn b1_kinetics() -> Kinetics {
        let logistic = RateLaw::LogisticClamped {
            rate: 1.0,
            capacity: 1.0,
            bound: 10.0,
        };
        Kinetics {
            f_plus: KineticsSpec::new(logistic.clone()),
            f_minus: KineticsSpec::new(logistic),
            g: KineticsSpec::new(RateLaw::LinearDecay { lambda: 0.5 }),
            h: KineticsSpec::new(RateLaw::Exchange {
                kappa: 0.5,
                external: 0.0,
            }),
        }
    }

    fn grid(eps: Q) -> MicroGrid {
        let cell =
            build_reference_cell(&ChannelProfile::straight(Q::new(1, 2)).unwrap()).unwrap();
        let g = build_micro_geometry(eps, Q::new(1, 1), cell).unwrap();
        build_micro_grid(&g, 4).unwrap()
    }

    #[test]
    fn definitions() {
        let cell =
            build_reference_cell(&ChannelProfile::straight(Q::new(1, 2)).unwrap()).unwrap();
        let zero = Kinetics::zero();
        assert_eq!(zero.eval_f(Side::Plus, 0.3, (0.5, 0.5), 7.0, 1.0).unwrap(), 0.0);
        assert_eq!(zero.eval_g(&cell, 0.3, (0.5, 0.0), -7.0).unwrap(), 0.0);
        let decay = KineticsSpec::new(RateLaw::LinearDecay { lambda: 1.0 });
        assert_eq!(decay.rate(0.0, (0.0, 0.0), 2.0), -2.0);
        let ex = KineticsSpec::new(RateLaw::Exchange {
            kappa: 0.5,
            external: 1.0,
        });
        assert_eq!(ex.rate(0.0, (0.0, 0.0), 3.0), 1.0);
        let k = Kinetics {
            h: ex,
            ..Kinetics::zero()
        };
        assert_eq!(k.eval_h(&cell, 0.0, (0.25, 0.3), 3.0).unwrap(), 1.0);
    }

    #[test]
    fn domain_errors() {
        let cell =
            build_reference_cell(&ChannelProfile::straight(Q::new(1, 2)).unwrap()).unwrap();
        let k = b1_kinetics();
        assert!(matches!(
            k.eval_g(&cell, 0.0, (0.1, 0.0), 1.0),
            Err(KineticsError::Domain(_))
        ));
        assert!(matches!(
            k.eval_h(&cell, 0.0, (0.5, 0.0), 1.0),
            Err(KineticsError::Domain(_))
        ));
        assert!(matches!(
            k.eval_f(Side::Minus, -1.0, (0.5, -0.5), 1.0, 1.0),
            Err(KineticsError::Domain(_))
        ));
        assert!(matches!(
            k.eval_f(Side::Minus, 0.0, (0.5, -1.5), 1.0, 1.0),
            Err(KineticsError::Domain(_))
        ));
    }

    #[test]
    fn logistic_clamp_is_continuous_and_lipschitz() {
        let law = RateLaw::LogisticClamped {
            rate: 1.0,
            capacity: 1.0,
            bound: 10.0,
        };
        assert_eq!(law.lipschitz(), 21.0);
        let below = law.eval(10.0 - 1e-9);
        let above = law.eval(10.0 + 1e-9);
        assert!((below - above).abs() < 1e-6);
        // slope outside the clamp equals the slope at the bound
        let s = (law.eval(12.0) - law.eval(11.0)) / 1.0;
        assert!((s + 19.0).abs() < 1e-12);
    }

    #[test]
    fn builtin_families_certify() {
        b1_kinetics().certify(10.0, 1.0).unwrap();
        let mut k = b1_kinetics();
        k.g = KineticsSpec::new(RateLaw::Tabulated {
            points: vec![(-1.0, 0.0), (0.0, 1.0), (2.0, -1.0)],
        })
        .with_factor(SpatialFactor::Periodic {
            mean: 1.0,
            amplitude: 0.5,
        })
        .with_time(TimeProfile::Ramp { duration: 0.2 });
        k.certify(10.0, 1.0).unwrap();
        k.h.lipschitz = Some(0.1);
        assert!(matches!(
            k.certify(10.0, 1.0),
            Err(KineticsError::Lipschitz { .. })
        ));
    }

    #[test]
    fn ramp_is_continuous() {
        let t = TimeProfile::Ramp { duration: 0.25 };
        let mut prev = t.eval(0.0);
        for i in 1..=10_000 {
            let cur = t.eval(i as f64 * 1e-4);
            assert!((cur - prev).abs() <= 1e-4 / 0.25 + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn uniform_g_matches_direct_evaluation() {
        let g = grid(Q::new(1, 4));
        let k = b1_kinetics();
        let u = Field::from_fn(g.grid(), 0.0, |c| c.center.0 + c.center.1);
        let rates = sample_micro_kinetics(&k, &g, 0.1, &u).unwrap();
        for (c, (r, v)) in g.grid().cells().iter().zip(rates.values().iter().zip(u.values())) {
            if c.region == crate::geometry::Region::Channel {
                assert_eq!(*r, -0.5 * v);
            } else {
                assert_eq!(*r, 0.0);
            }
        }
    }

    #[test]
    fn position_dependent_g_is_column_periodic() {
        let g = grid(Q::new(1, 8));
        let coords = g.channel_cell_coordinates();
        let u = Field::constant(g.grid(), 1.0, 0.0);
        for factor in [
            SpatialFactor::Affine {
                offset: 0.0,
                slope_bar: 0.0,
                slope_n: 1.0,
            },
            SpatialFactor::Affine {
                offset: 0.0,
                slope_bar: 1.0,
                slope_n: 0.0,
            },
        ] {
            let k = Kinetics {
                g: KineticsSpec::new(RateLaw::Constant { value: 1.0 }).with_factor(factor),
                ..Kinetics::zero()
            };
            let rates = sample_micro_kinetics(&k, &g, 0.0, &u).unwrap();
            let nref = g.cell_grid().len();
            for col in 1..g.columns() {
                for r in 0..nref {
                    assert_eq!(
                        rates.values()[g.channel_cell(col, r)],
                        rates.values()[g.channel_cell(0, r)]
                    );
                }
            }
            let (_, y) = coords[g.channel_cell(3, 0)].unwrap();
            assert!(y.0 > 0.0 && y.0 < 1.0);
        }
        // g = ȳ: the two cells of one row differ
        let k = Kinetics {
            g: KineticsSpec::new(RateLaw::Constant { value: 1.0 }).with_factor(
                SpatialFactor::Affine {
                    offset: 0.0,
                    slope_bar: 1.0,
                    slope_n: 0.0,
                },
            ),
            ..Kinetics::zero()
        };
        let rates = sample_micro_kinetics(&k, &g, 0.0, &u).unwrap();
        assert_ne!(
            rates.values()[g.channel_cell(2, 0)],
            rates.values()[g.channel_cell(2, 1)]
        );
    }

    #[test]
    fn shift_commutes_with_sampling() {
        let g = grid(Q::new(1, 8));
        let k = Kinetics {
            g: KineticsSpec::new(RateLaw::LinearDecay { lambda: 2.0 }).with_factor(
                SpatialFactor::Periodic {
                    mean: 1.0,
                    amplitude: 0.3,
                },
            ),
            ..Kinetics::zero()
        };
        let nref = g.cell_grid().len();
        let u = Field::from_fn(g.grid(), 0.0, |c| (7.0 * c.center.0).sin() + c.center.1);
        let mut shifted = u.clone();
        for col in 0..g.columns() - 1 {
            for r in 0..nref {
                shifted.values_mut()[g.channel_cell(col, r)] = u.values()[g.channel_cell(col + 1, r)];
            }
        }
        let a = sample_micro_kinetics(&k, &g, 0.0, &u).unwrap();
        let b = sample_micro_kinetics(&k, &g, 0.0, &shifted).unwrap();
        for col in 0..g.columns() - 1 {
            for r in 0..nref {
                assert_eq!(
                    b.values()[g.channel_cell(col, r)],
                    a.values()[g.channel_cell(col + 1, r)]
                );
            }
        }
    }

    #[test]
    fn initial_data_checks() {
        let cell =
            build_reference_cell(&ChannelProfile::straight(Q::new(1, 2)).unwrap()).unwrap();
        let init = InitialData {
            plus: InitialProfile::Constant { value: 1.0 },
            minus: InitialProfile::Constant { value: 0.0 },
            channel: InitialProfile::Affine {
                offset: 0.5,
                slope_bar: 0.0,
                slope_n: 0.5,
            },
        };
        init.validate().unwrap();
        assert_eq!(init.channel(0.3, (0.5, 1.0)), 1.0);
        assert_eq!(init.channel(0.3, (0.5, -1.0)), 0.0);
        assert!(init.check_channel_continuity(&cell, 8).unwrap() <= 1.0);
        let bad = InitialData {
            plus: InitialProfile::CellPeriodic {
                offset: 0.0,
                amplitude: 1.0,
                slope_n: 0.0,
            },
            ..init
        };
        assert!(bad.validate().is_err());
    }
}
