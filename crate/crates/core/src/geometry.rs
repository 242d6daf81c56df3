//! Reference channel cell and the ε-periodic microscopic domain (two space
//! dimensions).
//!
//! The reference cell is `Z = (0,1) × (−1,1)`. A channel `Z*` is a stack of
//! axis-aligned rectangles centred at `ȳ = 1/2`, one per profile segment.
//! Everything here is kept in exact rational arithmetic; conversion to `f64`
//! happens only when grids are built.

use num_integer::Integer;
use num_rational::Rational64;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

/// Exact rational number used for all geometric data.
pub type Q = Rational64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("channel profile has no segments")]
    EmptyProfile,
    #[error("channel touches lateral boundary: segment {index} has width {width} (must be < 1)")]
    TouchesLateralBoundary { index: usize, width: Q },
    #[error("segment {index} has non-positive width {width}")]
    NonPositiveWidth { index: usize, width: Q },
    #[error("segments do not partition [-1, 1]: {0}")]
    NotAPartition(String),
    #[error("ε⁻¹ must be a positive integer (got ε = {0})")]
    InverseScaleNotInteger(Q),
    #[error("ε = {eps} must be smaller than the bulk height H = {height}")]
    ScaleExceedsHeight { eps: Q, height: Q },
    #[error("value {0} cannot be represented as an exact rational")]
    NotRational(f64),
}

/// Converts a float to an exact rational if it is one with a modest
/// denominator (up to 2²⁰).
pub fn rational_from_f64(v: f64) -> Option<Q> {
    if !v.is_finite() {
        return None;
    }
    let q = Q::approximate_float(v)?;
    if *q.denom() > 1 << 20 {
        return None;
    }
    let back = q.to_f64()?;
    if (back - v).abs() <= 1e-12 * v.abs().max(1.0) {
        Some(q)
    } else {
        None
    }
}

pub fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

fn half() -> Q {
    Q::new(1, 2)
}

/// One layer of the channel: `y_n ∈ (lower, upper)` with width `width`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub lower: Q,
    pub upper: Q,
    pub width: Q,
}

impl Segment {
    pub fn new(lower: Q, upper: Q, width: Q) -> Self {
        Self {
            lower,
            upper,
            width,
        }
    }

    pub fn left_wall(&self) -> Q {
        half() - self.width / 2
    }

    pub fn right_wall(&self) -> Q {
        half() + self.width / 2
    }
}

/// Centred, piecewise-constant width profile of the reference channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProfile {
    segments: Vec<Segment>,
}

impl ChannelProfile {
    /// Validates the bottom-to-top segment list.
    pub fn new(segments: Vec<Segment>) -> Result<Self, GeometryError> {
        if segments.is_empty() {
            return Err(GeometryError::EmptyProfile);
        }
        let mut expected = -Q::one();
        for (index, s) in segments.iter().enumerate() {
            if s.lower != expected {
                return Err(GeometryError::NotAPartition(format!(
                    "segment {index} starts at {} but previous ended at {expected}",
                    s.lower
                )));
            }
            if s.upper <= s.lower {
                return Err(GeometryError::NotAPartition(format!(
                    "segment {index} is degenerate ({}, {})",
                    s.lower, s.upper
                )));
            }
            if s.width <= Q::zero() {
                return Err(GeometryError::NonPositiveWidth {
                    index,
                    width: s.width,
                });
            }
            if s.width >= Q::one() {
                return Err(GeometryError::TouchesLateralBoundary {
                    index,
                    width: s.width,
                });
            }
            expected = s.upper;
        }
        if expected != Q::one() {
            return Err(GeometryError::NotAPartition(format!(
                "last segment ends at {expected}, expected 1"
            )));
        }
        Ok(Self { segments })
    }

    /// Straight channel of constant width over `[-1, 1]`.
    pub fn straight(width: Q) -> Result<Self, GeometryError> {
        Self::new(vec![Segment::new(-Q::one(), Q::one(), width)])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Smallest integer `a` such that every breakpoint and wall position is
    /// a multiple of `1/a`.
    pub fn alignment(&self) -> i64 {
        self.segments.iter().fold(1i64, |acc, s| {
            [s.lower, s.upper, s.left_wall(), s.right_wall()]
                .iter()
                .fold(acc, |a, q| a.lcm(q.denom()))
        })
    }

    /// Index of the segment containing `y_n` (upper segment on a breakpoint).
    pub fn segment_index(&self, yn: f64) -> usize {
        self.segments
            .iter()
            .position(|s| yn < to_f64(s.upper))
            .unwrap_or(self.segments.len() - 1)
    }
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: Q,
    pub x1: Q,
    pub y0: Q,
    pub y1: Q,
}

impl Rect {
    pub fn area(&self) -> Q {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains_open(&self, p: (f64, f64)) -> bool {
        p.0 > to_f64(self.x0) && p.0 < to_f64(self.x1) && p.1 > to_f64(self.y0) && p.1 < to_f64(self.y1)
    }

    pub fn contains_closed(&self, p: (f64, f64)) -> bool {
        p.0 >= to_f64(self.x0)
            && p.0 <= to_f64(self.x1)
            && p.1 >= to_f64(self.y0)
            && p.1 <= to_f64(self.y1)
    }

    pub fn contains_exact(&self, p: (Q, Q)) -> bool {
        p.0 > self.x0 && p.0 < self.x1 && p.1 > self.y0 && p.1 < self.y1
    }
}

/// Axis-aligned boundary piece from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallSegment {
    pub start: (Q, Q),
    pub end: (Q, Q),
}

impl WallSegment {
    pub fn length(&self) -> Q {
        (self.end.0 - self.start.0).abs() + (self.end.1 - self.start.1).abs()
    }

    fn contains(&self, p: (f64, f64), tol: f64) -> bool {
        let (ax, ay) = (to_f64(self.start.0), to_f64(self.start.1));
        let (bx, by) = (to_f64(self.end.0), to_f64(self.end.1));
        let (lx, hx) = (ax.min(bx), ax.max(bx));
        let (ly, hy) = (ay.min(by), ay.max(by));
        p.0 >= lx - tol && p.0 <= hx + tol && p.1 >= ly - tol && p.1 <= hy + tol
    }
}

/// The reference channel `Z*` with its boundary pieces `S*±` and `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGeometry {
    profile: ChannelProfile,
    rects: Vec<Rect>,
    top: (Q, Q),
    bottom: (Q, Q),
    lateral: Vec<WallSegment>,
    area: Q,
    lateral_length: Q,
}

impl CellGeometry {
    pub fn profile(&self) -> &ChannelProfile {
        &self.profile
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    /// `S*+` as the `ȳ` interval at `y_n = 1`.
    pub fn top(&self) -> (Q, Q) {
        self.top
    }

    /// `S*−` as the `ȳ` interval at `y_n = −1`.
    pub fn bottom(&self) -> (Q, Q) {
        self.bottom
    }

    pub fn lateral(&self) -> &[WallSegment] {
        &self.lateral
    }

    /// `|Z*|`
    pub fn area(&self) -> Q {
        self.area
    }

    /// `|N|`
    pub fn lateral_length(&self) -> Q {
        self.lateral_length
    }

    pub fn top_length(&self) -> Q {
        self.top.1 - self.top.0
    }

    pub fn bottom_length(&self) -> Q {
        self.bottom.1 - self.bottom.0
    }

    /// Distance from `N` to the lateral boundary of `Z`.
    pub fn wall_clearance(&self) -> Q {
        self.rects
            .iter()
            .map(|r| r.x0)
            .min()
            .expect("non-empty channel")
    }

    /// Membership in the open set `Z*` (interior ledges between segments
    /// count as inside).
    pub fn contains(&self, y: (f64, f64)) -> bool {
        if self.rects.iter().any(|r| r.contains_open(y)) {
            return true;
        }
        // points on an internal breakpoint line shared by two rectangles
        self.rects.windows(2).any(|w| {
            let yb = to_f64(w[0].y1);
            let lo = to_f64(w[0].x0.max(w[1].x0));
            let hi = to_f64(w[0].x1.min(w[1].x1));
            y.1 == yb && y.0 > lo && y.0 < hi
        })
    }

    pub fn contains_closed(&self, y: (f64, f64)) -> bool {
        self.rects.iter().any(|r| r.contains_closed(y))
    }

    /// Whether `y` lies on the lateral boundary `N` (within `tol`).
    pub fn on_lateral(&self, y: (f64, f64), tol: f64) -> bool {
        self.lateral.iter().any(|w| w.contains(y, tol))
    }
}

/// Builds `Z*`, `S*±` and `N` from a validated profile.
pub fn build_reference_cell(profile: &ChannelProfile) -> Result<CellGeometry, GeometryError> {
    let profile = ChannelProfile::new(profile.segments().to_vec())?;
    let segs = profile.segments();
    let rects: Vec<Rect> = segs
        .iter()
        .map(|s| Rect {
            x0: s.left_wall(),
            x1: s.right_wall(),
            y0: s.lower,
            y1: s.upper,
        })
        .collect();

    let mut lateral = Vec::new();
    for s in segs {
        lateral.push(WallSegment {
            start: (s.left_wall(), s.lower),
            end: (s.left_wall(), s.upper),
        });
        lateral.push(WallSegment {
            start: (s.right_wall(), s.lower),
            end: (s.right_wall(), s.upper),
        });
    }
    for w in segs.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.width == b.width {
            continue;
        }
        let (wide, narrow) = if a.width > b.width { (a, b) } else { (b, a) };
        let yb = a.upper;
        lateral.push(WallSegment {
            start: (wide.left_wall(), yb),
            end: (narrow.left_wall(), yb),
        });
        lateral.push(WallSegment {
            start: (narrow.right_wall(), yb),
            end: (wide.right_wall(), yb),
        });
    }

    let area = rects.iter().fold(Q::zero(), |acc, r| acc + r.area());
    let lateral_length = lateral.iter().fold(Q::zero(), |acc, w| acc + w.length());
    let first = segs[0];
    let last = segs[segs.len() - 1];
    Ok(CellGeometry {
        top: (last.left_wall(), last.right_wall()),
        bottom: (first.left_wall(), first.right_wall()),
        profile,
        rects,
        lateral,
        area,
        lateral_length,
    })
}

/// Region of the microscopic domain a point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    BulkPlus,
    BulkMinus,
    Channel,
    Void,
}

impl Region {
    pub fn label(self) -> &'static str {
        match self {
            Region::BulkPlus => "bulk+",
            Region::BulkMinus => "bulk-",
            Region::Channel => "channel",
            Region::Void => "void",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "bulk+" => Some(Region::BulkPlus),
            "bulk-" => Some(Region::BulkMinus),
            "channel" => Some(Region::Channel),
            "void" => Some(Region::Void),
            _ => None,
        }
    }

    pub fn is_bulk(self) -> bool {
        matches!(self, Region::BulkPlus | Region::BulkMinus)
    }
}

/// The ε-scaled domain `Ω_ε ⊂ Ω = (0,1) × (−H, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroGeometry {
    eps: Q,
    height: Q,
    columns: usize,
    cell: CellGeometry,
}

/// Validates `ε⁻¹ ∈ ℕ` and `ε < H` and lays out `1/ε` channel columns.
pub fn build_micro_geometry(
    eps: Q,
    height: Q,
    cell: CellGeometry,
) -> Result<MicroGeometry, GeometryError> {
    if eps <= Q::zero() || !eps.recip().is_integer() {
        return Err(GeometryError::InverseScaleNotInteger(eps));
    }
    if eps >= height {
        return Err(GeometryError::ScaleExceedsHeight { eps, height });
    }
    let columns = eps.recip().to_integer() as usize;
    Ok(MicroGeometry {
        eps,
        height,
        columns,
        cell,
    })
}

impl MicroGeometry {
    pub fn eps(&self) -> Q {
        self.eps
    }

    pub fn eps_f64(&self) -> f64 {
        to_f64(self.eps)
    }

    pub fn height(&self) -> Q {
        self.height
    }

    pub fn height_f64(&self) -> f64 {
        to_f64(self.height)
    }

    /// `|I_ε|`
    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn cell(&self) -> &CellGeometry {
        &self.cell
    }

    /// `|Ω*_ε^M| = ε |Z*|`
    pub fn channel_area(&self) -> Q {
        self.channel_rects()
            .iter()
            .fold(Q::zero(), |acc, r| acc + r.area())
    }

    /// `|N_ε|`
    pub fn lateral_length(&self) -> Q {
        Q::from_integer(self.columns as i64) * self.eps * self.cell.lateral_length()
    }

    /// Physical rectangles `ε(Z* + (k̄, 0))` for all columns.
    pub fn channel_rects(&self) -> Vec<Rect> {
        let mut out = Vec::with_capacity(self.columns * self.cell.rects().len());
        for k in 0..self.columns {
            let shift = Q::from_integer(k as i64);
            for r in self.cell.rects() {
                out.push(Rect {
                    x0: self.eps * (r.x0 + shift),
                    x1: self.eps * (r.x1 + shift),
                    y0: self.eps * r.y0,
                    y1: self.eps * r.y1,
                });
            }
        }
        out
    }

    /// Splits `x` into its column index and microscopic coordinate
    /// `y = (x̄/ε − k̄, x_n/ε)`.
    pub fn to_local(&self, x: (f64, f64)) -> (usize, (f64, f64)) {
        let s = x.0 / self.eps_f64();
        let k = (s.floor().max(0.0) as usize).min(self.columns - 1);
        (k, (s - k as f64, x.1 / self.eps_f64()))
    }

    pub fn from_local(&self, k: usize, y: (f64, f64)) -> (f64, f64) {
        let e = self.eps_f64();
        (e * (k as f64 + y.0), e * y.1)
    }

    /// Region classifier; `None` outside `Ω`.
    pub fn classify(&self, x: (f64, f64)) -> Option<Region> {
        let h = self.height_f64();
        if !(x.0 > 0.0 && x.0 < 1.0 && x.1 > -h && x.1 < h) {
            return None;
        }
        let e = self.eps_f64();
        if x.1 > e {
            return Some(Region::BulkPlus);
        }
        if x.1 < -e {
            return Some(Region::BulkMinus);
        }
        let (_, y) = self.to_local(x);
        if self.cell.contains(y) {
            Some(Region::Channel)
        } else if x.1 == e && self.cell.contains_closed(y) {
            // on S*+: attribute to the channel side
            Some(Region::Channel)
        } else if x.1 == -e && self.cell.contains_closed(y) {
            Some(Region::Channel)
        } else if x.1 == e {
            Some(Region::BulkPlus)
        } else if x.1 == -e {
            Some(Region::BulkMinus)
        } else {
            Some(Region::Void)
        }
    }

    /// Whether `x` lies on the lateral channel boundary `N_ε`.
    pub fn on_lateral(&self, x: (f64, f64), tol: f64) -> bool {
        let (k, y) = self.to_local(x);
        if self.cell.on_lateral(y, tol / self.eps_f64()) {
            return true;
        }
        // right edge of a column coincides with the left edge of the next
        k > 0 && {
            let y_prev = (y.0 + 1.0, y.1);
            self.cell.on_lateral(y_prev, tol / self.eps_f64())
        }
    }
}
