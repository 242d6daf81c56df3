//! Cell-centred rectilinear grids, region-tagged cells and the ε-scaled
//! discrete inner products.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use num_traits::ToPrimitive;
use thiserror::Error;

use crate::geometry::{to_f64, CellGeometry, MicroGeometry, Region, Q};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid alignment error: {0}")]
    Misaligned(String),
    #[error("axis coordinates must be strictly increasing ({0})")]
    NotIncreasing(&'static str),
    #[error("expected {expected} region tags, got {got}")]
    TagCount { expected: usize, got: usize },
    #[error("field has {got} values but grid has {expected} active cells")]
    FieldLength { expected: usize, got: usize },
    #[error("field value {index} is not finite")]
    NonFinite { index: usize },
    #[error("fields or gradients belong to different grids")]
    GridMismatch,
    #[error("grid refinement must be positive")]
    ZeroRefinement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dir {
    West,
    East,
    South,
    North,
}

impl Dir {
    pub fn axis(self) -> Axis {
        match self {
            Dir::West | Dir::East => Axis::X,
            Dir::South | Dir::North => Axis::Y,
        }
    }
}

/// Interior faces between two active cells; `Transmission` marks a
/// bulk–channel face (part of `S*_ε±`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceKind {
    Interior,
    Transmission,
}

/// Boundary faces. `Lateral` is a channel wall (`N`); `Lower`/`Upper` are
/// the bottom/top edges of the grid when the builder marks them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryKind {
    Neumann,
    Lateral,
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub region: Region,
}

impl Cell {
    pub fn volume(&self) -> f64 {
        self.size.0 * self.size.1
    }

    pub fn half(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => 0.5 * self.size.0,
            Axis::Y => 0.5 * self.size.1,
        }
    }
}

/// Face between `cells[0]` (west/south) and `cells[1]` (east/north).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub cells: [usize; 2],
    pub axis: Axis,
    pub len: f64,
    pub half: [f64; 2],
    pub center: (f64, f64),
    pub kind: FaceKind,
}

impl Face {
    pub fn distance(&self) -> f64 {
        self.half[0] + self.half[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFace {
    pub cell: usize,
    pub dir: Dir,
    pub len: f64,
    pub half: f64,
    pub center: (f64, f64),
    pub kind: BoundaryKind,
}

/// Boundary kinds assigned to the four outer edges of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeKinds {
    pub west: BoundaryKind,
    pub east: BoundaryKind,
    pub south: BoundaryKind,
    pub north: BoundaryKind,
}

impl EdgeKinds {
    pub fn neumann() -> Self {
        Self {
            west: BoundaryKind::Neumann,
            east: BoundaryKind::Neumann,
            south: BoundaryKind::Neumann,
            north: BoundaryKind::Neumann,
        }
    }

    pub fn marked_bottom_top() -> Self {
        Self {
            south: BoundaryKind::Lower,
            north: BoundaryKind::Upper,
            ..Self::neumann()
        }
    }
}

const VOID: usize = usize::MAX;

/// Tensor-product grid with region tags. Void cells carry no unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct RectGrid {
    xs: Vec<f64>,
    ys: Vec<f64>,
    tags: Vec<Region>,
    active: Vec<usize>,
    cells: Vec<Cell>,
    faces: Vec<Face>,
    boundary: Vec<BoundaryFace>,
    axis_faces: Vec<[u8; 2]>,
    fingerprint: u64,
}

impl RectGrid {
    /// `tags` are row-major (`j * nx + i`) over the `(nx, ny)` tensor cells.
    pub fn new(
        xs: Vec<f64>,
        ys: Vec<f64>,
        tags: Vec<Region>,
        edges: EdgeKinds,
    ) -> Result<Self, GridError> {
        if xs.len() < 2 || xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GridError::NotIncreasing("x"));
        }
        if ys.len() < 2 || ys.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GridError::NotIncreasing("y"));
        }
        let (nx, ny) = (xs.len() - 1, ys.len() - 1);
        if tags.len() != nx * ny {
            return Err(GridError::TagCount {
                expected: nx * ny,
                got: tags.len(),
            });
        }

        let mut active = vec![VOID; nx * ny];
        let mut cells = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let region = tags[j * nx + i];
                if region == Region::Void {
                    continue;
                }
                active[j * nx + i] = cells.len();
                cells.push(Cell {
                    i,
                    j,
                    center: (0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])),
                    size: (xs[i + 1] - xs[i], ys[j + 1] - ys[j]),
                    region,
                });
            }
        }

        let mut faces = Vec::new();
        let mut boundary = Vec::new();
        let mut axis_faces = vec![[0u8; 2]; cells.len()];
        for (a, cell) in cells.iter().enumerate() {
            let (i, j) = (cell.i, cell.j);
            let neighbour = |di: isize, dj: isize| -> Option<usize> {
                let ii = i as isize + di;
                let jj = j as isize + dj;
                if ii < 0 || jj < 0 || ii >= nx as isize || jj >= ny as isize {
                    None
                } else {
                    Some(active[jj as usize * nx + ii as usize])
                }
            };
            for (dir, di, dj) in [
                (Dir::West, -1, 0),
                (Dir::East, 1, 0),
                (Dir::South, 0, -1),
                (Dir::North, 0, 1),
            ] {
                let axis = dir.axis();
                let (len, center) = match dir {
                    Dir::West => (cell.size.1, (xs[i], cell.center.1)),
                    Dir::East => (cell.size.1, (xs[i + 1], cell.center.1)),
                    Dir::South => (cell.size.0, (cell.center.0, ys[j])),
                    Dir::North => (cell.size.0, (cell.center.0, ys[j + 1])),
                };
                match neighbour(di, dj) {
                    Some(b) if b != VOID => {
                        axis_faces[a][axis.index()] += 1;
                        // each face is recorded once, from its west/south cell
                        if matches!(dir, Dir::East | Dir::North) {
                            let other = &cells[b];
                            let kind = if (cell.region == Region::Channel)
                                != (other.region == Region::Channel)
                            {
                                FaceKind::Transmission
                            } else {
                                FaceKind::Interior
                            };
                            faces.push(Face {
                                cells: [a, b],
                                axis,
                                len,
                                half: [cell.half(axis), other.half(axis)],
                                center,
                                kind,
                            });
                        }
                    }
                    Some(_) => {
                        let kind = if cell.region == Region::Channel {
                            BoundaryKind::Lateral
                        } else {
                            BoundaryKind::Neumann
                        };
                        boundary.push(BoundaryFace {
                            cell: a,
                            dir,
                            len,
                            half: cell.half(axis),
                            center,
                            kind,
                        });
                    }
                    None => {
                        let kind = match dir {
                            Dir::West => edges.west,
                            Dir::East => edges.east,
                            Dir::South => edges.south,
                            Dir::North => edges.north,
                        };
                        boundary.push(BoundaryFace {
                            cell: a,
                            dir,
                            len,
                            half: cell.half(axis),
                            center,
                            kind,
                        });
                    }
                }
            }
        }

        let mut hasher = DefaultHasher::new();
        xs.iter().for_each(|v| v.to_bits().hash(&mut hasher));
        ys.iter().for_each(|v| v.to_bits().hash(&mut hasher));
        tags.hash(&mut hasher);
        let fingerprint = hasher.finish();

        Ok(Self {
            xs,
            ys,
            tags,
            active,
            cells,
            faces,
            boundary,
            axis_faces,
            fingerprint,
        })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn nx(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn ny(&self) -> usize {
        self.ys.len() - 1
    }

    pub fn tag(&self, i: usize, j: usize) -> Region {
        self.tags[j * self.nx() + i]
    }

    /// Active index of tensor cell `(i, j)`, `None` for void cells.
    pub fn active_index(&self, i: usize, j: usize) -> Option<usize> {
        match self.active[j * self.nx() + i] {
            VOID => None,
            a => Some(a),
        }
    }

    /// Number of active (non-void) cells.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, a: usize) -> &Cell {
        &self.cells[a]
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary
    }

    /// Number of interior faces of cell `a` along each axis.
    pub fn axis_face_count(&self, a: usize) -> [u8; 2] {
        self.axis_faces[a]
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn region_volume(&self, region: Region) -> f64 {
        self.cells
            .iter()
            .filter(|c| c.region == region)
            .map(Cell::volume)
            .sum()
    }

    /// Cell containing `p`, searched by bisection on the axis arrays.
    pub fn locate(&self, p: (f64, f64)) -> Option<(usize, usize)> {
        let find = |nodes: &[f64], v: f64| -> Option<usize> {
            if v < nodes[0] || v > nodes[nodes.len() - 1] {
                return None;
            }
            let k = nodes.partition_point(|&n| n <= v);
            Some(k.saturating_sub(1).min(nodes.len() - 2))
        };
        Some((find(&self.xs, p.0)?, find(&self.ys, p.1)?))
    }
}

/// Discrete scalar carried on the active cells of one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    values: Vec<f64>,
    time: f64,
    grid: u64,
}

impl Field {
    pub fn new(grid: &RectGrid, values: Vec<f64>, time: f64) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::FieldLength {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self {
            values,
            time,
            grid: grid.fingerprint(),
        })
    }

    pub fn constant(grid: &RectGrid, value: f64, time: f64) -> Self {
        Self {
            values: vec![value; grid.len()],
            time,
            grid: grid.fingerprint(),
        }
    }

    pub fn from_fn(grid: &RectGrid, time: f64, f: impl Fn(&Cell) -> f64) -> Self {
        Self {
            values: grid.cells().iter().map(f).collect(),
            time,
            grid: grid.fingerprint(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    pub fn grid_fingerprint(&self) -> u64 {
        self.grid
    }

    pub fn belongs_to(&self, grid: &RectGrid) -> bool {
        self.grid == grid.fingerprint() && self.values.len() == grid.len()
    }
}

/// Node positions from `start` to `end`: the first cell has size `first`
/// (or less) and consecutive sizes grow by at most `ratio`.
pub fn graded_nodes(start: f64, end: f64, first: f64, ratio: f64) -> Vec<f64> {
    let length = end - start;
    if first >= length {
        return vec![start, end];
    }
    let mut n = 0usize;
    let (mut sum, mut size) = (0.0, first);
    while sum < length * (1.0 - 1e-12) {
        sum += size;
        size *= ratio;
        n += 1;
    }
    let growth = if n as f64 * first >= length * (1.0 - 1e-12) {
        1.0
    } else {
        // geometric sum first·(r^n − 1)/(r − 1) = length, solved for r
        let total = |r: f64| first * (r.powi(n as i32) - 1.0) / (r - 1.0);
        let (mut lo, mut hi) = (1.0 + 1e-15, ratio);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if total(mid) < length {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let mut nodes = Vec::with_capacity(n + 1);
    nodes.push(start);
    if growth == 1.0 {
        let h = length / n as f64;
        for i in 1..n {
            nodes.push(start + h * i as f64);
        }
    } else {
        let mut pos = start;
        let mut size = first;
        for _ in 1..n {
            pos += size;
            nodes.push(pos);
            size *= growth;
        }
    }
    nodes.push(end);
    nodes
}

/// Splits every interval of `nodes` into `parts` equal pieces.
pub fn subdivide(nodes: &[f64], parts: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((nodes.len() - 1) * parts + 1);
    for w in nodes.windows(2) {
        for p in 0..parts {
            out.push(w[0] + (w[1] - w[0]) * p as f64 / parts as f64);
        }
    }
    out.push(nodes[nodes.len() - 1]);
    out
}

fn check_aligned(value: Q, refinement: usize, what: &str) -> Result<(), GridError> {
    let scaled = value * Q::from_integer(refinement as i64);
    if scaled.is_integer() {
        Ok(())
    } else {
        Err(GridError::Misaligned(format!(
            "{what} at {value} is not a multiple of 1/{refinement}"
        )))
    }
}

/// Uniform grid of `Z = (0,1) × (−1,1)` with spacing `1/m`; cells inside
/// `Z*` are tagged `Channel`, the rest `Void`. The bottom/top edges are
/// marked `Lower` (`S*−`) and `Upper` (`S*+`).
pub fn build_cell_grid(cell: &CellGeometry, m: usize) -> Result<RectGrid, GridError> {
    if m == 0 {
        return Err(GridError::ZeroRefinement);
    }
    for s in cell.profile().segments() {
        check_aligned(s.left_wall(), m, "channel wall")?;
        check_aligned(s.right_wall(), m, "channel wall")?;
        check_aligned(s.lower, m, "segment breakpoint")?;
        check_aligned(s.upper, m, "segment breakpoint")?;
    }
    let mi = m as i64;
    let xs: Vec<f64> = (0..=mi).map(|i| to_f64(Q::new(i, mi))).collect();
    let ys: Vec<f64> = (0..=2 * mi).map(|j| to_f64(Q::new(j - mi, mi))).collect();
    let mut tags = Vec::with_capacity(2 * m * m);
    for j in 0..2 * mi {
        for i in 0..mi {
            let c = (Q::new(2 * i + 1, 2 * mi), Q::new(2 * (j - mi) + 1, 2 * mi));
            let inside = cell.rects().iter().any(|r| r.contains_exact(c));
            tags.push(if inside { Region::Channel } else { Region::Void });
        }
    }
    RectGrid::new(xs, ys, tags, EdgeKinds::marked_bottom_top())
}

/// Geometric grading ratio used for bulk grids.
pub const BULK_GRADING: f64 = 1.2;

/// Micro grid plus the index maps that align its channel cells with the
/// reference cell grid (one copy per column).
#[derive(Debug, Clone, PartialEq)]
pub struct MicroGrid {
    grid: RectGrid,
    cell_grid: RectGrid,
    refinement: usize,
    columns: usize,
    eps: f64,
    layer_row0: usize,
    channel_cells: Vec<usize>,
    channel_faces: Vec<usize>,
    ref_faces: Vec<usize>,
    lateral_faces: Vec<usize>,
    ref_lateral: Vec<usize>,
}

/// Builds the aligned micro grid: uniform spacing `ε/k` horizontally and in
/// the layer, bulk rows graded away from the layer and split `k` times.
pub fn build_micro_grid(geom: &MicroGeometry, k: usize) -> Result<MicroGrid, GridError> {
    let cell_grid = build_cell_grid(geom.cell(), k)?;
    let eps_q = geom.eps();
    let eps = geom.eps_f64();
    let height = geom.height_f64();
    let columns = geom.columns();
    let ki = k as i64;

    let nx = columns * k;
    let xs: Vec<f64> = (0..=nx as i64)
        .map(|i| to_f64(Q::new(i, nx as i64)))
        .collect();

    let plus = subdivide(&graded_nodes(eps, height, eps, BULK_GRADING), k);
    let mut ys: Vec<f64> = plus.iter().rev().map(|v| -v).collect();
    ys.pop();
    let layer_row0 = ys.len();
    for j in 0..=2 * ki {
        ys.push(to_f64(eps_q * Q::new(j - ki, ki)));
    }
    ys.extend_from_slice(&plus[1..]);
    let ny = ys.len() - 1;

    let mut tags = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let tag = if j < layer_row0 {
                Region::BulkMinus
            } else if j >= layer_row0 + 2 * k {
                Region::BulkPlus
            } else {
                cell_grid.tag(i % k, j - layer_row0)
            };
            tags.push(tag);
        }
    }
    let grid = RectGrid::new(xs, ys, tags, EdgeKinds::neumann())?;

    let nref = cell_grid.len();
    let mut channel_cells = vec![0; columns * nref];
    for (r, c) in cell_grid.cells().iter().enumerate() {
        for col in 0..columns {
            let a = grid
                .active_index(col * k + c.i, layer_row0 + c.j)
                .expect("channel cell is active");
            channel_cells[col * nref + r] = a;
        }
    }

    let face_lookup: HashMap<(usize, usize), usize> = grid
        .faces()
        .iter()
        .enumerate()
        .map(|(f, face)| ((face.cells[0], face.cells[1]), f))
        .collect();
    let ref_faces: Vec<usize> = (0..cell_grid.faces().len()).collect();
    let mut channel_faces = vec![0; columns * ref_faces.len()];
    for (rf, face) in cell_grid.faces().iter().enumerate() {
        for col in 0..columns {
            let a = channel_cells[col * nref + face.cells[0]];
            let b = channel_cells[col * nref + face.cells[1]];
            channel_faces[col * ref_faces.len() + rf] = face_lookup[&(a, b)];
        }
    }

    let bface_lookup: HashMap<(usize, Dir), usize> = grid
        .boundary_faces()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.kind == BoundaryKind::Lateral)
        .map(|(f, b)| ((b.cell, b.dir), f))
        .collect();
    let ref_lateral: Vec<usize> = cell_grid
        .boundary_faces()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.kind == BoundaryKind::Lateral)
        .map(|(f, _)| f)
        .collect();
    let mut lateral_faces = vec![0; columns * ref_lateral.len()];
    for (rl, &rb) in ref_lateral.iter().enumerate() {
        let b = cell_grid.boundary_faces()[rb];
        for col in 0..columns {
            let a = channel_cells[col * nref + b.cell];
            lateral_faces[col * ref_lateral.len() + rl] = *bface_lookup
                .get(&(a, b.dir))
                .ok_or_else(|| GridError::Misaligned("lateral face not matched".into()))?;
        }
    }
    if bface_lookup.len() != lateral_faces.len() {
        return Err(GridError::Misaligned(
            "micro lateral faces do not tile the unfolded lateral boundary".into(),
        ));
    }

    Ok(MicroGrid {
        grid,
        cell_grid,
        refinement: k,
        columns,
        eps,
        layer_row0,
        channel_cells,
        channel_faces,
        ref_faces,
        lateral_faces,
        ref_lateral,
    })
}

impl MicroGrid {
    pub fn grid(&self) -> &RectGrid {
        &self.grid
    }

    /// Reference cell grid the channel cells are aligned with.
    pub fn cell_grid(&self) -> &RectGrid {
        &self.cell_grid
    }

    pub fn refinement(&self) -> usize {
        self.refinement
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn layer_row0(&self) -> usize {
        self.layer_row0
    }

    /// `L_ε` weight of a region: 1 in the bulk, `1/ε` in the channels.
    pub fn weight(&self, region: Region) -> f64 {
        match region {
            Region::Channel => 1.0 / self.eps,
            Region::Void => 0.0,
            _ => 1.0,
        }
    }

    /// Weight of the gradient term in the `H_ε` inner product.
    pub fn gradient_weight(&self, region: Region) -> f64 {
        match region {
            Region::Channel => self.eps,
            Region::Void => 0.0,
            _ => 1.0,
        }
    }

    /// Active micro index of reference cell `r` in column `col`.
    pub fn channel_cell(&self, col: usize, r: usize) -> usize {
        self.channel_cells[col * self.cell_grid.len() + r]
    }

    /// Micro face index of reference interior face `rf` in column `col`.
    pub fn channel_face(&self, col: usize, rf: usize) -> usize {
        self.channel_faces[col * self.ref_faces.len() + rf]
    }

    /// Reference boundary-face indices forming `N`, in the order used by
    /// lateral traces.
    pub fn ref_lateral(&self) -> &[usize] {
        &self.ref_lateral
    }

    /// Micro boundary-face index of the `rl`-th lateral face in column `col`.
    pub fn lateral_face(&self, col: usize, rl: usize) -> usize {
        self.lateral_faces[col * self.ref_lateral.len() + rl]
    }

    pub fn lateral_count(&self) -> usize {
        self.lateral_faces.len()
    }

    /// Microscopic coordinate `y = x/ε − (k̄, 0)` of a channel cell, taken
    /// from the aligned reference cell.
    pub fn channel_cell_coordinates(&self) -> Vec<Option<(usize, (f64, f64))>> {
        let mut out = vec![None; self.grid.len()];
        for col in 0..self.columns {
            for (r, c) in self.cell_grid.cells().iter().enumerate() {
                out[self.channel_cell(col, r)] = Some((col, c.center));
            }
        }
        out
    }
}

/// `(u, v)_{L_ε} = Σ_bulk u v vol + (1/ε) Σ_channel u v vol`
pub fn inner_product_leps(grid: &MicroGrid, u: &Field, v: &Field) -> Result<f64, GridError> {
    let g = grid.grid();
    if !u.belongs_to(g) || !v.belongs_to(g) {
        return Err(GridError::GridMismatch);
    }
    Ok(g.cells()
        .iter()
        .zip(u.values().iter().zip(v.values()))
        .map(|(c, (a, b))| grid.weight(c.region) * a * b * c.volume())
        .sum())
}

pub fn norm_leps(grid: &MicroGrid, u: &Field) -> Result<f64, GridError> {
    Ok(inner_product_leps(grid, u, u)?.sqrt())
}

/// Difference quotients across every interior face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGradients {
    grid: u64,
    values: Vec<f64>,
}

impl FaceGradients {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn face_gradients(grid: &RectGrid, u: &Field) -> Result<FaceGradients, GridError> {
    if !u.belongs_to(grid) {
        return Err(GridError::GridMismatch);
    }
    let v = u.values();
    let values = grid
        .faces()
        .iter()
        .map(|f| (v[f.cells[1]] - v[f.cells[0]]) / f.distance())
        .collect();
    Ok(FaceGradients {
        grid: grid.fingerprint(),
        values,
    })
}

/// Squared `H_ε` norm split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HepsParts {
    pub l2: f64,
    pub grad_plus: f64,
    pub grad_minus: f64,
    pub grad_channel: f64,
}

impl HepsParts {
    pub fn total(&self) -> f64 {
        self.l2 + self.grad_plus + self.grad_minus + self.grad_channel
    }
}

/// Face-gradient quadrature: along each axis a cell's volume is shared
/// equally by its interior faces on that axis, and each face contributes
/// its squared difference quotient times the shares of its two cells.
pub fn heps_parts(
    grid: &MicroGrid,
    u: &Field,
    grads: &FaceGradients,
) -> Result<HepsParts, GridError> {
    let g = grid.grid();
    if grads.grid != g.fingerprint() || grads.values.len() != g.faces().len() {
        return Err(GridError::GridMismatch);
    }
    let mut parts = HepsParts {
        l2: inner_product_leps(grid, u, u)?,
        ..Default::default()
    };
    for (face, q) in g.faces().iter().zip(&grads.values) {
        for &a in &face.cells {
            let cell = g.cell(a);
            let count = g.axis_face_count(a)[face.axis.index()] as f64;
            let share = cell.volume() / count * q * q;
            match cell.region {
                Region::BulkPlus => parts.grad_plus += share,
                Region::BulkMinus => parts.grad_minus += share,
                Region::Channel => parts.grad_channel += grid.eps() * share,
                Region::Void => {}
            }
        }
    }
    Ok(parts)
}

pub fn norm_heps(grid: &MicroGrid, u: &Field, grads: &FaceGradients) -> Result<f64, GridError> {
    Ok(heps_parts(grid, u, grads)?.total().sqrt())
}

/// Volume-weighted restriction of a field on `fine` onto a nested `coarse`
/// grid. Every coarse active cell must be covered by fine active cells.
pub fn restrict_nested(fine: &RectGrid, u: &Field, coarse: &RectGrid) -> Result<Field, GridError> {
    if !u.belongs_to(fine) {
        return Err(GridError::GridMismatch);
    }
    let mut sums = vec![0.0; coarse.len()];
    let mut vols = vec![0.0; coarse.len()];
    for (c, v) in fine.cells().iter().zip(u.values()) {
        let (i, j) = coarse
            .locate(c.center)
            .ok_or_else(|| GridError::Misaligned("fine cell outside coarse grid".into()))?;
        if let Some(a) = coarse.active_index(i, j) {
            sums[a] += v * c.volume();
            vols[a] += c.volume();
        }
    }
    for (a, c) in coarse.cells().iter().enumerate() {
        if (vols[a] - c.volume()).abs() > 1e-9 * c.volume() {
            return Err(GridError::Misaligned(format!(
                "coarse cell {a} is not tiled by fine cells"
            )));
        }
    }
    let values = sums.iter().zip(&vols).map(|(s, v)| s / v).collect();
    Field::new(coarse, values, u.time())
}

/// Converts an exact quantity for reporting.
pub fn q_to_f64(q: Q) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        build_micro_geometry, build_reference_cell, ChannelProfile, Segment,
    };

    fn q(n: i64, d: i64) -> Q {
        Q::new(n, d)
    }

    fn straight_geom(eps: Q) -> MicroGeometry {
        let cell = build_reference_cell(&ChannelProfile::straight(q(1, 2)).unwrap()).unwrap();
        build_micro_geometry(eps, q(1, 1), cell).unwrap()
    }

    #[test]
    fn micro_grid_counts() {
        let g = build_micro_grid(&straight_geom(q(1, 2)), 4).unwrap();
        let grid = g.grid();
        let layer = &grid.ys()[g.layer_row0()..=g.layer_row0() + 8];
        for w in layer.windows(2) {
            assert!((w[1] - w[0] - 0.125).abs() < 1e-15);
        }
        // one column: 4 cells wide, 8 tall, channel occupies 2 of the 4
        let col0: Vec<Region> = (0..4).map(|i| grid.tag(i, g.layer_row0())).collect();
        assert_eq!(
            col0,
            vec![Region::Void, Region::Channel, Region::Channel, Region::Void]
        );
        assert_eq!(g.cell_grid().len(), 16);
        let chan = grid.region_volume(Region::Channel);
        assert!((chan - 0.5).abs() < 1e-14);
    }

    #[test]
    fn misaligned_refinement_rejected() {
        let profile = ChannelProfile::new(vec![
            Segment::new(q(-1, 1), q(-1, 4), q(3, 4)),
            Segment::new(q(-1, 4), q(1, 4), q(1, 4)),
            Segment::new(q(1, 4), q(1, 1), q(3, 4)),
        ])
        .unwrap();
        let cell = build_reference_cell(&profile).unwrap();
        let geom = build_micro_geometry(q(1, 4), q(1, 1), cell).unwrap();
        assert!(matches!(
            build_micro_grid(&geom, 2),
            Err(GridError::Misaligned(_))
        ));
        assert!(matches!(
            build_micro_grid(&geom, 4),
            Err(GridError::Misaligned(_))
        ));
        let g = build_micro_grid(&geom, 8).unwrap();
        let chan = g.grid().region_volume(Region::Channel);
        assert!((chan - 0.25 * 1.25).abs() < 1e-14);
    }

    #[test]
    fn graded_nodes_hit_endpoints() {
        let n = graded_nodes(0.0625, 1.0, 0.0625, 1.2);
        assert_eq!(n[0], 0.0625);
        assert_eq!(*n.last().unwrap(), 1.0);
        assert!((n[1] - n[0] - 0.0625).abs() < 1e-12);
        for w in n.windows(3) {
            let r = (w[2] - w[1]) / (w[1] - w[0]);
            assert!(r <= 1.2 + 1e-9 && r >= 1.0 - 1e-9, "ratio {r}");
        }
        let u = graded_nodes(0.25, 1.0, 0.25, 1.2);
        assert_eq!(u.len(), 4);
    }

    #[test]
    fn leps_of_constants() {
        let g = build_micro_grid(&straight_geom(q(1, 4)), 4).unwrap();
        let one = Field::constant(g.grid(), 1.0, 0.0);
        let zero = Field::constant(g.grid(), 0.0, 0.0);
        let ip = inner_product_leps(&g, &one, &one).unwrap();
        assert!((ip - 2.5).abs() < 1e-12, "{ip}");
        assert_eq!(inner_product_leps(&g, &one, &zero).unwrap(), 0.0);
    }

    #[test]
    fn heps_of_constant_and_linear() {
        let g = build_micro_grid(&straight_geom(q(1, 4)), 4).unwrap();
        let one = Field::constant(g.grid(), 3.0, 0.0);
        let grads = face_gradients(g.grid(), &one).unwrap();
        let n = norm_heps(&g, &one, &grads).unwrap();
        assert!((n - norm_leps(&g, &one).unwrap()).abs() < 1e-13);

        let lin = Field::from_fn(g.grid(), 0.0, |c| c.center.1);
        let grads = face_gradients(g.grid(), &lin).unwrap();
        let parts = heps_parts(&g, &lin, &grads).unwrap();
        assert!((parts.grad_plus - 0.75).abs() < 1e-12, "{}", parts.grad_plus);
    }

    #[test]
    fn field_checks() {
        let g = build_micro_grid(&straight_geom(q(1, 4)), 4).unwrap();
        assert!(matches!(
            Field::new(g.grid(), vec![0.0; 3], 0.0),
            Err(GridError::FieldLength { .. })
        ));
        let mut v = vec![0.0; g.grid().len()];
        v[5] = f64::NAN;
        assert!(matches!(
            Field::new(g.grid(), v, 0.0),
            Err(GridError::NonFinite { index: 5 })
        ));
        let other = build_micro_grid(&straight_geom(q(1, 2)), 4).unwrap();
        let u = Field::constant(other.grid(), 1.0, 0.0);
        let w = Field::constant(g.grid(), 1.0, 0.0);
        assert_eq!(
            inner_product_leps(&g, &u, &w),
            Err(GridError::GridMismatch)
        );
    }

    #[test]
    fn construction_is_deterministic() {
        let a = build_micro_grid(&straight_geom(q(1, 8)), 4).unwrap();
        let b = build_micro_grid(&straight_geom(q(1, 8)), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid().fingerprint(), b.grid().fingerprint());
    }

    #[test]
    fn lateral_faces_measure() {
        let g = build_micro_grid(&straight_geom(q(1, 4)), 4).unwrap();
        let total: f64 = g
            .grid()
            .boundary_faces()
            .iter()
            .filter(|b| b.kind == BoundaryKind::Lateral)
            .map(|b| b.len)
            .sum();
        assert!((total - 4.0).abs() < 1e-12);
        let s: f64 = g
            .grid()
            .faces()
            .iter()
            .filter(|f| f.kind == FaceKind::Transmission)
            .map(|f| f.len)
            .sum();
        // S*+ and S*−: 4 columns × 2 × ε/2
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn restriction_of_nested_grids() {
        let coarse = build_micro_grid(&straight_geom(q(1, 4)), 4).unwrap();
        let fine = build_micro_grid(&straight_geom(q(1, 4)), 8).unwrap();
        let u = Field::from_fn(fine.grid(), 0.0, |c| c.center.0 + 2.0 * c.center.1);
        let r = restrict_nested(fine.grid(), &u, coarse.grid()).unwrap();
        for (c, v) in coarse.grid().cells().iter().zip(r.values()) {
            assert!((v - (c.center.0 + 2.0 * c.center.1)).abs() < 1e-12);
        }
    }
}
