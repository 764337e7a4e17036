//! Grid-decomposed rigid object, its states, actions and trajectories.
//!
//! The object is a set of connected square cells of width `w`. Internally a
//! pose is a single SE(2) [`BodyState`]; the per-cell 3n vector
//! ([`CellStateVector`]) that losses and planners operate on is a derived
//! view, so cells can never drift apart.

use nalgebra::Vector2;

use crate::{Error, Result};

/// Mass floor realizing the half-open mass interval: masses live in
/// `[EPS_MASS, m_max]` instead of `(0, m_max]`.
pub const EPS_MASS: f64 = 1e-6;

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Shortest signed angular difference `a - b`, wrapped into `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// 2D rotation by `theta` applied to `v`.
pub fn rotate(theta: f64, v: Vector2<f64>) -> Vector2<f64> {
    let (s, c) = theta.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Counter-clockwise perpendicular, `rot90(v)`.
pub fn perp(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// 2D cross product `a x b` (z component).
pub fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// A contour cell together with its outward unit normals. A cell on a
/// straight edge has one normal; corner cells can have up to four
/// candidates, each pointing toward an outside-connected free 4-neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourCell {
    pub cell: usize,
    pub normals: Vec<Vector2<f64>>,
}

/// Rigid planar object decomposed into `n` 4-connected square cells.
///
/// `rest_offsets` are cell centers in the body frame, which is anchored at
/// the geometric centroid of the cell set (so they sum to zero and are
/// independent of any mass map).
#[derive(Debug, Clone, PartialEq)]
pub struct GridObject {
    cell_width: f64,
    cells: Vec<(i32, i32)>,
    rest_offsets: Vec<Vector2<f64>>,
    contour: Vec<ContourCell>,
}

/// Object footprint accepted by [`decompose_footprint`].
#[derive(Debug, Clone)]
pub enum Footprint {
    /// Rows of `#` (occupied) and `.`/space (free); one character per cell.
    /// Row 0 is the topmost row and maps to the largest y.
    Bitmap(Vec<String>),
    /// Closed polygon in meters; vertices in order, no self-intersection.
    Polygon(Vec<[f64; 2]>),
}

impl GridObject {
    /// Build directly from grid coordinates. Validates distinctness and
    /// 4-connectivity.
    pub fn from_cells(cell_width: f64, cells: Vec<(i32, i32)>) -> Result<Self> {
        if cell_width <= 0.0 || !cell_width.is_finite() {
            return Err(Error::InvalidConfig("cell_width must be positive".into()));
        }
        if cells.is_empty() {
            return Err(Error::EmptyObject);
        }
        let mut seen = std::collections::HashSet::new();
        for &(c, r) in &cells {
            if !seen.insert((c, r)) {
                return Err(Error::DuplicateCell(c, r));
            }
        }
        let components = count_components(&cells);
        if components != 1 {
            return Err(Error::Disconnected(components));
        }

        // Canonical placement: shift so the minimum coordinates are (0, 0).
        let min_c = cells.iter().map(|c| c.0).min().unwrap();
        let min_r = cells.iter().map(|c| c.1).min().unwrap();
        let cells: Vec<(i32, i32)> = cells.iter().map(|&(c, r)| (c - min_c, r - min_r)).collect();

        let w = cell_width;
        let centers: Vec<Vector2<f64>> = cells
            .iter()
            .map(|&(c, r)| Vector2::new((c as f64 + 0.5) * w, (r as f64 + 0.5) * w))
            .collect();
        let centroid = centers.iter().sum::<Vector2<f64>>() / centers.len() as f64;
        let rest_offsets: Vec<Vector2<f64>> = centers.iter().map(|p| p - centroid).collect();

        let contour = outer_contour(&cells);

        Ok(Self { cell_width, cells, rest_offsets, contour })
    }

    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_width(&self) -> f64 {
        self.cell_width
    }

    pub fn cells(&self) -> &[(i32, i32)] {
        &self.cells
    }

    /// Cell centers in the body frame (sum to zero).
    pub fn rest_offsets(&self) -> &[Vector2<f64>] {
        &self.rest_offsets
    }

    /// Cells on the outer boundary, each with its outward normal candidates.
    pub fn contour(&self) -> &[ContourCell] {
        &self.contour
    }

    /// Whether `cell` lies on the outer contour.
    pub fn is_contour(&self, cell: usize) -> bool {
        self.contour.iter().any(|c| c.cell == cell)
    }

    /// Largest body-frame cell center distance from the geometric centroid.
    pub fn circumradius(&self) -> f64 {
        self.rest_offsets
            .iter()
            .map(|o| o.norm())
            .fold(0.0, f64::max)
            + self.cell_width * std::f64::consts::FRAC_1_SQRT_2
    }

    /// World-frame cell centers under `body`'s pose.
    pub fn world_cells(&self, body: &BodyState) -> Vec<Vector2<f64>> {
        self.rest_offsets
            .iter()
            .map(|&o| body.position + rotate(body.rotation, o))
            .collect()
    }

    /// Occupancy bitmap of this object's own cells (for re-rasterization).
    pub fn to_bitmap(&self) -> Vec<String> {
        let cols = self.cells.iter().map(|c| c.0).max().unwrap() + 1;
        let rows = self.cells.iter().map(|c| c.1).max().unwrap() + 1;
        let mut grid = vec![vec!['.'; cols as usize]; rows as usize];
        for &(c, r) in &self.cells {
            grid[r as usize][c as usize] = '#';
        }
        // Bitmap rows are listed top-to-bottom; internal row index grows with y.
        grid.iter().rev().map(|row| row.iter().collect()).collect()
    }
}

fn count_components(cells: &[(i32, i32)]) -> usize {
    let set: std::collections::HashSet<(i32, i32)> = cells.iter().copied().collect();
    let mut seen = std::collections::HashSet::new();
    let mut components = 0;
    for &start in cells {
        if seen.contains(&start) {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen.insert(start);
        while let Some((c, r)) = stack.pop() {
            for next in [(c + 1, r), (c - 1, r), (c, r + 1), (c, r - 1)] {
                if set.contains(&next) && seen.insert(next) {
                    stack.push(next);
                }
            }
        }
    }
    components
}

/// Contour cells with normals pointing into the outside-connected free
/// region (free cells trapped in interior holes do not count: a fingertip
/// cannot reach them).
fn outer_contour(cells: &[(i32, i32)]) -> Vec<ContourCell> {
    let set: std::collections::HashSet<(i32, i32)> = cells.iter().copied().collect();
    let min_c = cells.iter().map(|c| c.0).min().unwrap() - 1;
    let max_c = cells.iter().map(|c| c.0).max().unwrap() + 1;
    let min_r = cells.iter().map(|c| c.1).min().unwrap() - 1;
    let max_r = cells.iter().map(|c| c.1).max().unwrap() + 1;

    // Flood-fill the free space from outside the bounding box.
    let mut outside = std::collections::HashSet::new();
    let mut stack = vec![(min_c, min_r)];
    outside.insert((min_c, min_r));
    while let Some((c, r)) = stack.pop() {
        for (nc, nr) in [(c + 1, r), (c - 1, r), (c, r + 1), (c, r - 1)] {
            if nc < min_c || nc > max_c || nr < min_r || nr > max_r {
                continue;
            }
            if set.contains(&(nc, nr)) {
                continue;
            }
            if outside.insert((nc, nr)) {
                stack.push((nc, nr));
            }
        }
    }

    let dirs = [(1, 0, Vector2::new(1.0, 0.0)), (-1, 0, Vector2::new(-1.0, 0.0)), (0, 1, Vector2::new(0.0, 1.0)), (0, -1, Vector2::new(0.0, -1.0))];
    let mut contour = Vec::new();
    for (i, &(c, r)) in cells.iter().enumerate() {
        let mut normals = Vec::new();
        for &(dc, dr, n) in &dirs {
            if outside.contains(&(c + dc, r + dr)) {
                normals.push(n);
            }
        }
        if !normals.is_empty() {
            contour.push(ContourCell { cell: i, normals });
        }
    }
    contour
}

/// Rasterize a footprint into a [`GridObject`].
///
/// A cell is included iff at least half of its area is covered by the
/// footprint; the result is reduced to its largest 4-connected component.
pub fn decompose_footprint(footprint: &Footprint, cell_width: f64) -> Result<GridObject> {
    if cell_width <= 0.0 || !cell_width.is_finite() {
        return Err(Error::InvalidConfig("cell_width must be positive".into()));
    }
    let cells: Vec<(i32, i32)> = match footprint {
        Footprint::Bitmap(rows) => {
            let mut cells = Vec::new();
            let height = rows.len() as i32;
            for (ri, row) in rows.iter().enumerate() {
                for (ci, ch) in row.chars().enumerate() {
                    if ch == '#' {
                        // Flip so the first listed row sits at the top.
                        cells.push((ci as i32, height - 1 - ri as i32));
                    }
                }
            }
            cells
        }
        Footprint::Polygon(vertices) => rasterize_polygon(vertices, cell_width)?,
    };
    if cells.is_empty() {
        return Err(Error::EmptyObject);
    }
    let largest = largest_component(&cells);
    GridObject::from_cells(cell_width, largest)
}

fn largest_component(cells: &[(i32, i32)]) -> Vec<(i32, i32)> {
    let set: std::collections::HashSet<(i32, i32)> = cells.iter().copied().collect();
    let mut seen = std::collections::HashSet::new();
    let mut best: Vec<(i32, i32)> = Vec::new();
    for &start in cells {
        if seen.contains(&start) {
            continue;
        }
        let mut comp = vec![start];
        let mut stack = vec![start];
        seen.insert(start);
        while let Some((c, r)) = stack.pop() {
            for next in [(c + 1, r), (c - 1, r), (c, r + 1), (c, r - 1)] {
                if set.contains(&next) && seen.insert(next) {
                    stack.push(next);
                    comp.push(next);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    // Deterministic cell order: row-major scan.
    best.sort_by_key(|&(c, r)| (r, c));
    best
}

/// Area-sample a polygon onto the cell grid (8x8 subsamples per cell,
/// inclusion at >= 50% coverage).
fn rasterize_polygon(vertices: &[[f64; 2]], w: f64) -> Result<Vec<(i32, i32)>> {
    if vertices.len() < 3 {
        return Err(Error::EmptyObject);
    }
    let min_x = vertices.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
    let max_x = vertices.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = vertices.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
    let max_y = vertices.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
    if !(min_x.is_finite() && max_x.is_finite() && min_y.is_finite() && max_y.is_finite()) {
        return Err(Error::NonFinite("polygon vertices"));
    }
    let c0 = (min_x / w).floor() as i32;
    let c1 = (max_x / w).ceil() as i32;
    let r0 = (min_y / w).floor() as i32;
    let r1 = (max_y / w).ceil() as i32;
    const SUB: usize = 8;
    let mut cells = Vec::new();
    for r in r0..r1 + 1 {
        for c in c0..c1 + 1 {
            let mut inside = 0usize;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let x = (c as f64 + (sx as f64 + 0.5) / SUB as f64) * w;
                    let y = (r as f64 + (sy as f64 + 0.5) / SUB as f64) * w;
                    if point_in_polygon(x, y, vertices) {
                        inside += 1;
                    }
                }
            }
            if inside * 2 >= SUB * SUB {
                cells.push((c, r));
            }
        }
    }
    Ok(cells)
}

fn point_in_polygon(x: f64, y: f64, vertices: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = vertices.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (vertices[i][0], vertices[i][1]);
        let (xj, yj) = (vertices[j][0], vertices[j][1]);
        if ((yi > y) != (yj > y)) && (x < (xj - xi) * (y - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Rigid pose plus generalized velocity of the body-frame origin
/// (the geometric centroid of the cell set).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    pub position: Vector2<f64>,
    pub rotation: f64,
    pub lin_velocity: Vector2<f64>,
    pub ang_velocity: f64,
}

impl BodyState {
    pub fn new(position: Vector2<f64>, rotation: f64, lin_velocity: Vector2<f64>, ang_velocity: f64) -> Result<Self> {
        if !(position.x.is_finite()
            && position.y.is_finite()
            && rotation.is_finite()
            && lin_velocity.x.is_finite()
            && lin_velocity.y.is_finite()
            && ang_velocity.is_finite())
        {
            return Err(Error::NonFinite("BodyState"));
        }
        Ok(Self { position, rotation: wrap_angle(rotation), lin_velocity, ang_velocity })
    }

    /// Pose with zero velocity.
    pub fn at_rest(position: Vector2<f64>, rotation: f64) -> Self {
        Self { position, rotation: wrap_angle(rotation), lin_velocity: Vector2::zeros(), ang_velocity: 0.0 }
    }

    /// Same pose, velocities zeroed.
    pub fn stopped(&self) -> Self {
        Self::at_rest(self.position, self.rotation)
    }
}

/// Flat `3n` state vector `[p1x, p1y, th1, ..., pnx, pny, thn]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStateVector(Vec<f64>);

impl CellStateVector {
    /// Validates length divisibility and rigid-body angle consistency.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() || entries.len() % 3 != 0 {
            return Err(Error::DimensionMismatch { expected: 3, got: entries.len().max(1) % 3 });
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("CellStateVector"));
        }
        let theta0 = entries[2];
        for i in (2..entries.len()).step_by(3) {
            if angle_diff(entries[i], theta0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "cell angles differ: {} vs {}",
                    entries[i], theta0
                )));
            }
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn n_cells(&self) -> usize {
        self.0.len() / 3
    }

    pub fn cell_position(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.0[3 * i], self.0[3 * i + 1])
    }

    pub fn cell_angle(&self, i: usize) -> f64 {
        self.0[3 * i + 2]
    }
}

/// Transform every cell center by the rigid pose.
pub fn expand_state(obj: &GridObject, body: &BodyState) -> CellStateVector {
    let mut entries = Vec::with_capacity(3 * obj.n());
    for &o in obj.rest_offsets() {
        let p = body.position + rotate(body.rotation, o);
        entries.push(p.x);
        entries.push(p.y);
        entries.push(body.rotation);
    }
    CellStateVector(entries)
}

/// Inverse of [`expand_state`]: recover the rigid pose from a cell vector.
/// Exact for vectors produced by `expand_state` (offsets sum to zero, so the
/// mean cell position is the body origin). Velocities are left at zero.
pub fn fit_body(obj: &GridObject, x: &CellStateVector) -> Result<BodyState> {
    if x.n_cells() != obj.n() {
        return Err(Error::DimensionMismatch { expected: obj.n(), got: x.n_cells() });
    }
    let mean = (0..obj.n()).map(|i| x.cell_position(i)).sum::<Vector2<f64>>() / obj.n() as f64;
    BodyState::new(mean, x.cell_angle(0), Vector2::zeros(), 0.0)
}

/// L2 norm of the per-entry difference of two cell vectors; angle entries
/// are compared with wrapped differences. This is the per-timestep summand
/// of the trajectory loss (ADD-style metric, meters and radians mixed).
pub fn add_loss(x_a: &CellStateVector, x_b: &CellStateVector) -> Result<f64> {
    if x_a.0.len() != x_b.0.len() {
        return Err(Error::DimensionMismatch { expected: x_a.0.len(), got: x_b.0.len() });
    }
    let mut sum = 0.0;
    for i in 0..x_a.0.len() {
        let d = if i % 3 == 2 {
            angle_diff(x_a.0[i], x_b.0[i])
        } else {
            x_a.0[i] - x_b.0[i]
        };
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// Mean distance between corresponding cell positions (angles ignored).
/// Used for waypoint tolerances and held-out prediction error.
pub fn mean_cell_distance(x_a: &CellStateVector, x_b: &CellStateVector) -> Result<f64> {
    if x_a.0.len() != x_b.0.len() {
        return Err(Error::DimensionMismatch { expected: x_a.0.len(), got: x_b.0.len() });
    }
    let n = x_a.n_cells();
    let mut sum = 0.0;
    for i in 0..n {
        sum += (x_a.cell_position(i) - x_b.cell_position(i)).norm();
    }
    Ok(sum / n as f64)
}

/// Per-cell mass and friction maps (the diagonals of the generalized mass
/// and friction matrices; per-cell inertia is derived as `m*w^2/6`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    pub mass: Vec<f64>,
    pub friction: Vec<f64>,
}

impl ParamMap {
    pub fn new(mass: Vec<f64>, friction: Vec<f64>) -> Result<Self> {
        if mass.len() != friction.len() {
            return Err(Error::DimensionMismatch { expected: mass.len(), got: friction.len() });
        }
        if mass.iter().chain(friction.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ParamMap"));
        }
        if mass.iter().any(|&m| m < EPS_MASS) {
            return Err(Error::InvalidConfig("mass below EPS_MASS".into()));
        }
        if friction.iter().any(|&f| f < 0.0) {
            return Err(Error::InvalidConfig("negative friction".into()));
        }
        Ok(Self { mass, friction })
    }

    /// Uniform maps: every cell gets the same mass and friction.
    pub fn uniform(n: usize, mass: f64, friction: f64) -> Self {
        Self { mass: vec![mass; n], friction: vec![friction; n] }
    }

    pub fn n(&self) -> usize {
        self.mass.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Per-cell mass x friction products.
    pub fn products(&self) -> Vec<f64> {
        self.mass.iter().zip(&self.friction).map(|(m, f)| m * f).collect()
    }

    /// Mass-weighted center of mass offset in the body frame.
    pub fn com_offset(&self, obj: &GridObject) -> Vector2<f64> {
        let total = self.total_mass();
        obj.rest_offsets()
            .iter()
            .zip(&self.mass)
            .map(|(&o, &m)| o * m)
            .sum::<Vector2<f64>>()
            / total
    }
}

/// A fingertip push: point force at a contour cell for a fixed duration.
/// The contact is frictionless point contact, so the applied torque slot of
/// the generalized force is always zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushAction {
    pub contact_cell: usize,
    pub force: Vector2<f64>,
    pub duration: f64,
}

impl PushAction {
    pub fn new(obj: &GridObject, contact_cell: usize, force: Vector2<f64>, duration: f64) -> Result<Self> {
        if !obj.is_contour(contact_cell) {
            return Err(Error::InvalidConfig(format!(
                "contact cell {contact_cell} is not on the contour"
            )));
        }
        if !(force.x.is_finite() && force.y.is_finite()) {
            return Err(Error::NonFinite("PushAction force"));
        }
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(Error::InvalidConfig("push duration must be positive".into()));
        }
        Ok(Self { contact_cell, force, duration })
    }

    /// Sparse 3n generalized-force embedding: zeros except `(f_x, f_y)` at
    /// the contact cell (applied torque is zero).
    pub fn generalized(&self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; 3 * n];
        v[3 * self.contact_cell] = self.force.x;
        v[3 * self.contact_cell + 1] = self.force.y;
        v
    }
}

/// One recorded step of a trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    /// Cell state at the start of the step.
    pub state: CellStateVector,
    /// Observed generalized velocity over the step, finite-differenced from
    /// the bracketing poses: `(x_{t+1} - x_t) / dt` (angles wrapped).
    pub velocity: Vec<f64>,
    /// Force applied during the step.
    pub action: PushAction,
}

/// A state-action sequence: `steps.len()` pushes plus the terminal state.
/// All pushes share the step duration `dt`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub terminal_state: CellStateVector,
    /// Terminal velocity (zero: the object is at rest after settling).
    pub terminal_velocity: Vec<f64>,
    pub dt: f64,
}

impl Trajectory {
    /// Assemble from poses and actions, finite-differencing the velocities.
    pub fn from_states(states: Vec<CellStateVector>, actions: Vec<PushAction>, dt: f64) -> Result<Self> {
        if states.len() != actions.len() + 1 {
            return Err(Error::DimensionMismatch { expected: actions.len() + 1, got: states.len() });
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig("trajectory dt must be positive".into()));
        }
        let dim = states[0].entries().len();
        if states.iter().any(|s| s.entries().len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: 0 });
        }
        for a in &actions {
            if (a.duration - dt).abs() > 1e-12 {
                return Err(Error::InvalidConfig("all pushes in a trajectory must share dt".into()));
            }
        }
        let mut steps = Vec::with_capacity(actions.len());
        for (t, action) in actions.iter().enumerate() {
            let velocity = fd_velocity(&states[t], &states[t + 1], dt);
            steps.push(TrajectoryStep { state: states[t].clone(), velocity, action: *action });
        }
        let terminal_state = states.last().unwrap().clone();
        let terminal_velocity = vec![0.0; dim];
        Ok(Self { steps, terminal_state, terminal_velocity, dt })
    }

    /// Number of pushes.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// All recorded states, in order, terminal included.
    pub fn states(&self) -> Vec<&CellStateVector> {
        self.steps.iter().map(|s| &s.state).chain(std::iter::once(&self.terminal_state)).collect()
    }

    /// Append one executed push and its settled outcome.
    pub fn push_step(&mut self, action: PushAction, next_state: CellStateVector) {
        let prev = self.terminal_state.clone();
        let velocity = fd_velocity(&prev, &next_state, self.dt);
        self.steps.push(TrajectoryStep { state: prev, velocity, action });
        self.terminal_state = next_state;
    }

    /// Empty trajectory anchored at an initial state.
    pub fn from_initial(state: CellStateVector, dt: f64) -> Self {
        let dim = state.entries().len();
        Self { steps: Vec::new(), terminal_state: state, terminal_velocity: vec![0.0; dim], dt }
    }
}

fn fd_velocity(a: &CellStateVector, b: &CellStateVector, dt: f64) -> Vec<f64> {
    let pa = a.entries();
    let pb = b.entries();
    (0..pa.len())
        .map(|i| {
            if i % 3 == 2 {
                angle_diff(pb[i], pa[i]) / dt
            } else {
                (pb[i] - pa[i]) / dt
            }
        })
        .collect()
}
