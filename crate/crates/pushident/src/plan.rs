//! Waypoint planning and robust push selection under model uncertainty.
//!
//! An RRT* in SE(2) produces waypoints from the current pose to a goal on
//! the table edge; every intermediate waypoint keeps the whole footprint on
//! the table, only the goal may overhang. The push controller tracks the
//! nearest waypoint: it computes the probability-weighted expected center
//! of mass, picks the contour cell most aligned with the axis from the
//! waypoint through that point, pushes opposite the surface normal, and
//! scores candidate pushes by the expected gap — the probability-weighted
//! distance between per-model predicted poses and the waypoint. Goal poses
//! are rejection-sampled on the table edge, requiring enough overhang to
//! expose a grasp and a model-ensemble failure probability below the
//! threshold.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{
    balance_check, breakaway_force, execute_push, GroundTruthWorld, PushWorld, Table, WorldConfig,
};
use crate::explore::{ExploreConfig, SelectionMode};
use crate::identify::{run_identification_session, IdentConfig, ModelEnsemble, SessionResult};
use crate::object::{
    add_loss, angle_diff, expand_state, mean_cell_distance, rotate, wrap_angle, BodyState,
    CellStateVector, GridObject, ParamMap, PushAction,
};
use crate::{Error, Result};

/// An intermediate SE(2) pose the push controller tracks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub position: Vector2<f64>,
    pub rotation: f64,
}

impl Waypoint {
    pub fn from_body(body: &BodyState) -> Self {
        Self { position: body.position, rotation: body.rotation }
    }

    pub fn to_body(self) -> BodyState {
        BodyState::at_rest(self.position, self.rotation)
    }
}

/// Goal sampling query for the table edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalQuery {
    /// Angular interval of the edge arc to sample (rad).
    pub arc: (f64, f64),
    /// Failure-probability threshold: a pose qualifies iff the summed
    /// probability of models predicting a fall is at most `eps`.
    pub eps: f64,
    /// Required protrusion beyond the edge (m), the graspability proxy.
    pub overhang: f64,
    /// Extra protrusion headroom above the minimum when sampling (m).
    pub overhang_slack: f64,
    /// Rejection-sampling budget.
    pub n_samples: usize,
}

impl GoalQuery {
    /// Full-edge query with the default 0.90 stability threshold and a
    /// two-cell-width overhang requirement.
    pub fn edge(obj: &GridObject) -> Self {
        Self {
            arc: (-std::f64::consts::PI, std::f64::consts::PI),
            eps: 0.10,
            overhang: 2.0 * obj.cell_width(),
            overhang_slack: 2.0 * obj.cell_width(),
            n_samples: 256,
        }
    }
}

/// Planner parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    /// RRT* steer step (m; angles weighted by the object circumradius).
    pub eta: f64,
    /// RRT* node budget.
    pub max_nodes: usize,
    /// Waypoint acceptance tolerance: mean cell distance (m).
    pub eps_wp: f64,
    /// Contact-cell perturbations per push selection.
    pub timeout: usize,
    /// Consecutive pushes without a new best expected gap before aborting.
    pub stall_limit: usize,
    /// Duration of planner pushes (s).
    pub push_duration: f64,
    /// Total pushes allowed per plan execution.
    pub action_budget: usize,
    /// Push magnitudes as fractions of the ensemble-expected breakaway.
    pub magnitude_ladder: Vec<f64>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            max_nodes: 5000,
            eps_wp: 0.01,
            timeout: 16,
            stall_limit: 10,
            push_duration: 0.25,
            action_budget: 40,
            magnitude_ladder: vec![1.02, 1.05, 1.15, 1.35, 1.7],
        }
    }
}

/// Outcome of one closed-loop plan execution.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub actions: Vec<PushAction>,
    pub expected_gaps: Vec<f64>,
    pub reached: bool,
    pub waypoints_consumed: usize,
}

// ---------------------------------------------------------------------------
// RRT* waypoints

#[derive(Clone, Copy)]
struct Node {
    pose: Waypoint,
    parent: usize,
    cost: f64,
}

fn se2_distance(a: &Waypoint, b: &Waypoint, angle_weight: f64) -> f64 {
    (a.position - b.position).norm() + angle_weight * angle_diff(a.rotation, b.rotation).abs()
}

fn interpolate(a: &Waypoint, b: &Waypoint, t: f64) -> Waypoint {
    Waypoint {
        position: a.position + (b.position - a.position) * t,
        rotation: wrap_angle(a.rotation + angle_diff(b.rotation, a.rotation) * t),
    }
}

/// Whole footprint on the table (cell centers inside by half a width).
fn footprint_on_table(obj: &GridObject, pose: &Waypoint, table: &Table) -> bool {
    let body = pose.to_body();
    obj.world_cells(&body).iter().all(|p| table.contains(*p, obj.cell_width() / 2.0))
}

/// Footprint intersects the table at all.
fn footprint_touches_table(obj: &GridObject, pose: &Waypoint, table: &Table) -> bool {
    let body = pose.to_body();
    obj.world_cells(&body).iter().any(|p| table.contains(*p, 0.0))
}

fn segment_feasible(
    obj: &GridObject,
    a: &Waypoint,
    b: &Waypoint,
    table: &Table,
    angle_weight: f64,
    eta: f64,
) -> bool {
    let d = se2_distance(a, b, angle_weight);
    let steps = (d / (eta * 0.5)).ceil().max(1.0) as usize;
    (1..=steps).all(|i| {
        let t = i as f64 / steps as f64;
        footprint_on_table(obj, &interpolate(a, b, t), table)
    })
}

/// Resample a pose path at roughly `eta` spacing (goal kept as the final
/// waypoint, start pose dropped).
fn resample_path(path: &[Waypoint], angle_weight: f64, eta: f64) -> Vec<Waypoint> {
    let mut out = Vec::new();
    for window in path.windows(2) {
        let (a, b) = (&window[0], &window[1]);
        let d = se2_distance(a, b, angle_weight);
        let steps = (d / eta).ceil().max(1.0) as usize;
        for i in 1..=steps {
            out.push(interpolate(a, b, i as f64 / steps as f64));
        }
    }
    if out.is_empty() {
        out.push(*path.last().unwrap());
    }
    out
}

/// Plan a waypoint sequence from `start` to `goal` with RRT* in SE(2).
/// Every waypoint except the final goal keeps the footprint fully on the
/// table; the last segment may overhang (that is the point of the goal).
pub fn rrt_star(
    obj: &GridObject,
    start: &Waypoint,
    goal: &Waypoint,
    table: &Table,
    cfg: &PlanConfig,
    rng_seed: u64,
) -> Result<Vec<Waypoint>> {
    let angle_weight = obj.circumradius();
    if !footprint_on_table(obj, start, table) {
        return Err(Error::InvalidConfig("start pose is not fully on the table".into()));
    }
    if !footprint_touches_table(obj, goal, table) {
        return Err(Error::PlanningFailed);
    }
    if se2_distance(start, goal, angle_weight) < 1e-12 {
        return Ok(vec![*goal]);
    }

    // The goal itself may overhang; plan on-table to a pullback pose from
    // which the goal is reachable by one final (possibly overhanging)
    // segment.
    let pullback = find_pullback(obj, goal, table, angle_weight, cfg.eta);

    // Empty tables make most segments feasible; try the direct connection
    // (what shortcutting would produce anyway) before growing a tree.
    let tree_path = if segment_feasible(obj, start, &pullback, table, angle_weight, cfg.eta) {
        vec![*start, pullback]
    } else {
        grow_tree(obj, start, &pullback, table, cfg, angle_weight, rng_seed)?
    };
    let mut path = shortcut(obj, &tree_path, table, angle_weight, cfg.eta);
    path.push(*goal);
    Ok(resample_path(&path, angle_weight, cfg.eta))
}

/// Nearest pose to `goal` along the ray back to the table center that puts
/// the footprint fully on the table (the goal unchanged if already on).
fn find_pullback(
    obj: &GridObject,
    goal: &Waypoint,
    table: &Table,
    _angle_weight: f64,
    eta: f64,
) -> Waypoint {
    if footprint_on_table(obj, goal, table) {
        return *goal;
    }
    let dir = if goal.position.norm() > 1e-9 {
        -goal.position.normalize()
    } else {
        Vector2::new(-1.0, 0.0)
    };
    let mut pose = *goal;
    for _ in 0..200 {
        pose.position += dir * (eta * 0.25);
        if footprint_on_table(obj, &pose, table) {
            return pose;
        }
    }
    *goal
}

fn grow_tree(
    obj: &GridObject,
    start: &Waypoint,
    target: &Waypoint,
    table: &Table,
    cfg: &PlanConfig,
    angle_weight: f64,
    rng_seed: u64,
) -> Result<Vec<Waypoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let radius = table.radius();
    let mut nodes = vec![Node { pose: *start, parent: 0, cost: 0.0 }];
    let mut best_goal: Option<(usize, f64)> = None;

    for it in 0..cfg.max_nodes {
        let sample = if rng.gen_bool(0.1) {
            *target
        } else {
            let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
            let phi = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            Waypoint {
                position: Vector2::new(r * phi.cos(), r * phi.sin()),
                rotation: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            }
        };
        let nearest = (0..nodes.len())
            .min_by(|&i, &j| {
                se2_distance(&nodes[i].pose, &sample, angle_weight)
                    .total_cmp(&se2_distance(&nodes[j].pose, &sample, angle_weight))
            })
            .unwrap();
        let d = se2_distance(&nodes[nearest].pose, &sample, angle_weight);
        let new_pose = if d <= cfg.eta {
            sample
        } else {
            interpolate(&nodes[nearest].pose, &sample, cfg.eta / d)
        };
        if !footprint_on_table(obj, &new_pose, table) {
            continue;
        }
        if !segment_feasible(obj, &nodes[nearest].pose, &new_pose, table, angle_weight, cfg.eta) {
            continue;
        }

        // RRT* rewiring neighborhood.
        let n = nodes.len() as f64;
        let rewire_r = (2.0 * radius * ((n.ln() + 1.0) / n).cbrt()).min(4.0 * cfg.eta);
        let neighbors: Vec<usize> = (0..nodes.len())
            .filter(|&i| se2_distance(&nodes[i].pose, &new_pose, angle_weight) <= rewire_r)
            .collect();

        // Best parent among the neighborhood.
        let mut parent = nearest;
        let mut cost =
            nodes[nearest].cost + se2_distance(&nodes[nearest].pose, &new_pose, angle_weight);
        for &i in &neighbors {
            let c = nodes[i].cost + se2_distance(&nodes[i].pose, &new_pose, angle_weight);
            if c < cost && segment_feasible(obj, &nodes[i].pose, &new_pose, table, angle_weight, cfg.eta)
            {
                parent = i;
                cost = c;
            }
        }
        let new_index = nodes.len();
        nodes.push(Node { pose: new_pose, parent, cost });

        // Rewire neighbors through the new node where cheaper.
        for &i in &neighbors {
            let through = cost + se2_distance(&new_pose, &nodes[i].pose, angle_weight);
            if through + 1e-12 < nodes[i].cost
                && segment_feasible(obj, &new_pose, &nodes[i].pose, table, angle_weight, cfg.eta)
            {
                nodes[i].parent = new_index;
                nodes[i].cost = through;
            }
        }

        let to_goal = se2_distance(&new_pose, target, angle_weight);
        if to_goal <= cfg.eta
            && segment_feasible(obj, &new_pose, target, table, angle_weight, cfg.eta)
        {
            let total = cost + to_goal;
            if best_goal.map_or(true, |(_, c)| total < c) {
                best_goal = Some((new_index, total));
            }
            // Keep refining for a while, then stop.
            if it > cfg.max_nodes / 4 {
                break;
            }
        }
    }

    let (mut idx, _) = best_goal.ok_or(Error::PlanningFailed)?;
    let mut rev = vec![*target];
    while idx != 0 {
        rev.push(nodes[idx].pose);
        idx = nodes[idx].parent;
    }
    rev.push(*start);
    rev.reverse();
    Ok(rev)
}

/// Greedy shortcutting: replace multi-node subchains by direct segments.
fn shortcut(
    obj: &GridObject,
    path: &[Waypoint],
    table: &Table,
    angle_weight: f64,
    eta: f64,
) -> Vec<Waypoint> {
    let mut out = vec![path[0]];
    let mut i = 0;
    while i + 1 < path.len() {
        let mut j = path.len() - 1;
        while j > i + 1 {
            if segment_feasible(obj, &path[i], &path[j], table, angle_weight, eta) {
                break;
            }
            j -= 1;
        }
        out.push(path[j]);
        i = j;
    }
    out
}

// ---------------------------------------------------------------------------
// Push selection

/// Probability-weighted expected center of mass of the ensemble at a pose.
pub fn expected_com(obj: &GridObject, state: &BodyState, ensemble: &ModelEnsemble) -> Vector2<f64> {
    let mut com = Vector2::zeros();
    for (model, &p) in ensemble.models.iter().zip(&ensemble.probabilities) {
        com += (state.position + rotate(state.rotation, model.com_offset(obj))) * p;
    }
    com
}

/// Ensemble-expected breakaway force.
fn expected_breakaway(ensemble: &ModelEnsemble) -> f64 {
    ensemble
        .models
        .iter()
        .zip(&ensemble.probabilities)
        .map(|(m, &p)| p * breakaway_force(m))
        .sum()
}

/// Expected gap of one candidate action: probability-weighted ADD distance
/// between per-model predicted settled poses and the target waypoint.
fn expected_gap(
    obj: &GridObject,
    state: &BodyState,
    action: &PushAction,
    target_cells: &CellStateVector,
    ensemble: &ModelEnsemble,
    cfg: &WorldConfig,
) -> Result<f64> {
    let mut gap = 0.0;
    for (model, &p) in ensemble.models.iter().zip(&ensemble.probabilities) {
        if p == 0.0 {
            continue;
        }
        let predicted = execute_push(obj, state, action, model, cfg)?;
        gap += p * add_loss(&expand_state(obj, &predicted), target_cells)?;
    }
    Ok(gap)
}

/// Pick the push that minimizes the expected gap to the target waypoint.
///
/// The contact search starts from the contour cell most aligned with the
/// axis from the waypoint through the expected center of mass, then
/// perturbs over the `timeout` nearest contour cells, each paired with a
/// ladder of force magnitudes; the minimum expected gap wins.
pub fn select_push(
    obj: &GridObject,
    state: &BodyState,
    target: &Waypoint,
    ensemble: &ModelEnsemble,
    plan_cfg: &PlanConfig,
    world_cfg: &WorldConfig,
) -> Result<(PushAction, f64)> {
    if ensemble.is_empty() {
        return Err(Error::InvalidConfig("empty ensemble".into()));
    }
    let com = expected_com(obj, state, ensemble);
    let to_target = target.position - com;
    let axis = if to_target.norm() > 1e-12 { -to_target.normalize() } else { Vector2::new(1.0, 0.0) };

    // Contour cells ranked by cosine alignment of (p_i - com) with the axis
    // away from the target.
    let cells = obj.world_cells(state);
    let mut ranked: Vec<(f64, usize)> = obj
        .contour()
        .iter()
        .map(|cc| {
            let rel = cells[cc.cell] - com;
            let align = if rel.norm() > 1e-12 { rel.normalize().dot(&axis) } else { -1.0 };
            (align, cc.cell)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let target_cells = expand_state(obj, &target.to_body());
    let brk = expected_breakaway(ensemble);
    let push_dir_hint = if to_target.norm() > 1e-12 { to_target.normalize() } else { axis };

    let mut best: Option<(PushAction, f64)> = None;
    for &(_, cell) in ranked.iter().take(plan_cfg.timeout.max(1)) {
        let cc = obj.contour().iter().find(|c| c.cell == cell).unwrap();
        // Push opposite the surface normal; among candidate normals take
        // the one whose negation best matches the direction to the target.
        let normal = cc
            .normals
            .iter()
            .copied()
            .max_by(|a, b| {
                let da = rotate(state.rotation, -*a).dot(&push_dir_hint);
                let db = rotate(state.rotation, -*b).dot(&push_dir_hint);
                da.total_cmp(&db)
            })
            .unwrap();
        let dir = rotate(state.rotation, -normal);
        for &frac in &plan_cfg.magnitude_ladder {
            let action = PushAction {
                contact_cell: cell,
                force: dir * (frac * brk),
                duration: plan_cfg.push_duration,
            };
            let gap = expected_gap(obj, state, &action, &target_cells, ensemble, world_cfg)?;
            if best.as_ref().map_or(true, |(_, g)| gap < *g) {
                best = Some((action, gap));
            }
        }
    }
    Ok(best.expect("ladder and contour are nonempty"))
}

// ---------------------------------------------------------------------------
// Closed-loop plan execution

/// Track RRT* waypoints with expected-gap pushes against an execution
/// world, replanning the contact from the observed pose after every push.
/// A waypoint is consumed (with everything before it) once the object is
/// within `eps_wp`; the run ends with `reached = true` when the final goal
/// is within `eps_wp`.
pub fn robust_plan<W: PushWorld>(
    world: &mut W,
    table: &Table,
    goal: &Waypoint,
    ensemble: &ModelEnsemble,
    plan_cfg: &PlanConfig,
    rng_seed: u64,
) -> Result<PlanResult> {
    let obj = world.object().clone();
    let world_cfg = *world.config();
    let start = Waypoint::from_body(&world.observe());
    let mut waypoints = rrt_star(&obj, &start, goal, table, plan_cfg, rng_seed)?;
    let goal_cells = expand_state(&obj, &goal.to_body());

    let mut actions = Vec::new();
    let mut gaps = Vec::new();
    let mut consumed = 0usize;
    let mut best_gap = f64::INFINITY;
    let mut stall = 0usize;
    let mut last_target: Option<Waypoint> = None;
    // Intermediate waypoints are pursuit targets, not contracts: accepting
    // them at half the spacing avoids fine-positioning at every waypoint.
    // Only the final goal is held to eps_wp.
    let wp_accept = plan_cfg.eps_wp.max(plan_cfg.eta * 0.5);

    loop {
        let state = world.observe();
        let state_cells = expand_state(&obj, &state);
        if mean_cell_distance(&state_cells, &goal_cells)? <= plan_cfg.eps_wp {
            return Ok(PlanResult { actions, expected_gaps: gaps, reached: true, waypoints_consumed: consumed });
        }
        if world.failed() {
            return Ok(PlanResult { actions, expected_gaps: gaps, reached: false, waypoints_consumed: consumed });
        }

        // Nearest remaining waypoint; consume it (and any skipped earlier
        // ones) when already within tolerance.
        let nearest = (0..waypoints.len())
            .min_by(|&i, &j| {
                let di = mean_cell_distance(
                    &state_cells,
                    &expand_state(&obj, &waypoints[i].to_body()),
                )
                .unwrap_or(f64::INFINITY);
                let dj = mean_cell_distance(
                    &state_cells,
                    &expand_state(&obj, &waypoints[j].to_body()),
                )
                .unwrap_or(f64::INFINITY);
                di.total_cmp(&dj)
            })
            .expect("waypoint list never empties before the goal check");
        let near_dist =
            mean_cell_distance(&state_cells, &expand_state(&obj, &waypoints[nearest].to_body()))?;
        if near_dist <= wp_accept && nearest + 1 < waypoints.len() {
            waypoints.drain(..=nearest);
            consumed += nearest + 1;
            continue;
        }
        let target = waypoints[nearest];
        if last_target != Some(target) {
            last_target = Some(target);
            best_gap = f64::INFINITY;
            stall = 0;
        }

        if actions.len() >= plan_cfg.action_budget {
            return Ok(PlanResult { actions, expected_gaps: gaps, reached: false, waypoints_consumed: consumed });
        }

        let (action, egap) = select_push(&obj, &state, &target, ensemble, plan_cfg, &world_cfg)?;
        world.apply_push(&action)?;
        actions.push(action);
        gaps.push(egap);

        if egap + 1e-12 < best_gap {
            best_gap = egap;
            stall = 0;
        } else {
            stall += 1;
            if stall >= plan_cfg.stall_limit {
                return Err(Error::ExecutionDiverged(plan_cfg.stall_limit));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Stable goal sampling

/// Probability that the object falls at `pose`: the exact sum of the
/// probabilities of ensemble models whose balance check fails.
pub fn failure_probability(
    obj: &GridObject,
    pose: &Waypoint,
    ensemble: &ModelEnsemble,
    table: &Table,
) -> f64 {
    let body = pose.to_body();
    ensemble
        .models
        .iter()
        .zip(&ensemble.probabilities)
        .filter(|(m, _)| !balance_check(obj, &body, m, table))
        .map(|(_, &p)| p)
        .sum()
}

/// Protrusion of the footprint beyond the table edge (m; negative when
/// fully on the table).
pub fn overhang(obj: &GridObject, pose: &Waypoint, table: &Table) -> f64 {
    let body = pose.to_body();
    obj.world_cells(&body)
        .iter()
        .map(|p| obj.cell_width() / 2.0 - table.depth(*p))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Rejection-sample an edge pose with at least the required overhang whose
/// ensemble failure probability is within the threshold; of the qualifying
/// samples the one with maximal overhang wins.
pub fn sample_stable_goal(
    obj: &GridObject,
    query: &GoalQuery,
    ensemble: &ModelEnsemble,
    table: &Table,
    rng_seed: u64,
) -> Result<Waypoint> {
    if !(query.eps >= 0.0 && query.eps <= 1.0) || !(query.overhang > 0.0) {
        return Err(Error::InvalidConfig("goal query out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let radius = table.radius();
    let mut best: Option<(Waypoint, f64)> = None;
    for _ in 0..query.n_samples {
        let phi = rng.gen_range(query.arc.0..=query.arc.1);
        let psi = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let dir = Vector2::new(phi.cos(), phi.sin());
        // Extent of the rotated footprint along the outward direction.
        let ext = obj
            .rest_offsets()
            .iter()
            .map(|&s| rotate(psi, s).dot(&dir))
            .fold(f64::NEG_INFINITY, f64::max)
            + obj.cell_width() / 2.0;
        let protrusion = rng.gen_range(query.overhang..=query.overhang + query.overhang_slack);
        let pose = Waypoint { position: dir * (radius - ext + protrusion), rotation: psi };
        let over = overhang(obj, &pose, table);
        if over < query.overhang {
            continue;
        }
        if failure_probability(obj, &pose, ensemble, table) > query.eps {
            continue;
        }
        if best.as_ref().map_or(true, |(_, o)| over > *o) {
            best = Some((pose, over));
        }
    }
    best.map(|(p, _)| p).ok_or(Error::NoStableGoal(query.n_samples))
}

// ---------------------------------------------------------------------------
// Pre-grasp pipeline

/// Model source for planning and goal selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// Uniform mass and friction at the bound midpoints, no identification.
    Uniform,
    /// One model sampled from the inferred ensemble.
    Deterministic,
    /// The full inferred ensemble.
    Probabilistic,
    /// The hidden ground-truth parameters (upper-bound baseline).
    Oracle,
}

impl std::str::FromStr for PipelineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "deterministic" => Ok(Self::Deterministic),
            "probabilistic" => Ok(Self::Probabilistic),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Deterministic => "deterministic",
            Self::Probabilistic => "probabilistic",
            Self::Oracle => "oracle",
        })
    }
}

/// Full pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    /// Exploration pushes for the identification session.
    pub pushes: usize,
    pub selection: SelectionMode,
    pub ident: IdentConfig,
    pub explore: ExploreConfig,
    pub plan: PlanConfig,
    /// Failure-probability threshold for goal selection.
    pub eps: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Probabilistic,
            pushes: 5,
            selection: SelectionMode::Random,
            ident: IdentConfig::default(),
            explore: ExploreConfig::default(),
            plan: PlanConfig::default(),
            eps: 0.10,
        }
    }
}

/// Wall-clock stage durations, reported through logs only (files stay
/// byte-deterministic).
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub identify_s: f64,
    pub goal_s: f64,
    pub plan_s: f64,
}

/// Outcome of one pipeline trial.
#[derive(Debug, Clone)]
pub struct TrialReport {
    pub mode: PipelineMode,
    pub seed: u64,
    pub success: bool,
    pub reached: bool,
    pub fell: bool,
    /// Planning pushes executed (exploration pushes are tracked separately).
    pub n_actions: usize,
    pub ident_pushes: usize,
    pub goal_pose: Option<Waypoint>,
    pub error: Option<String>,
    pub timings: StageTimings,
}

/// Derived seeds for the stochastic pipeline stages.
#[derive(Debug, Clone, Copy)]
pub struct PipelineSeeds {
    /// World noise stream.
    pub world: u64,
    /// Candidate sampling during exploration.
    pub explore: u64,
    /// Goal rejection sampling.
    pub goal: u64,
    /// RRT* sampling.
    pub plan: u64,
    /// Model draw of the deterministic mode.
    pub model_draw: u64,
}

impl PipelineSeeds {
    /// Spread one base seed over the stages (paired across modes except
    /// for the mode-specific model draw, which the caller varies).
    pub fn from_base(base: u64) -> Self {
        Self {
            world: base,
            explore: base.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1),
            goal: base.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(2),
            plan: base.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(3),
            model_draw: base.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(4),
        }
    }
}

/// Reduce an inferred ensemble to the model set the given mode plans with.
pub fn mode_ensemble(
    mode: PipelineMode,
    session: Option<&SessionResult>,
    hidden: &ParamMap,
    ident: &IdentConfig,
    draw_seed: u64,
) -> Result<ModelEnsemble> {
    match mode {
        PipelineMode::Oracle => Ok(ModelEnsemble::single(hidden.clone())),
        PipelineMode::Uniform => Ok(ModelEnsemble::single(ParamMap::uniform(
            hidden.n(),
            ident.m_max / 2.0,
            ident.mu_max / 2.0,
        ))),
        PipelineMode::Deterministic => {
            let session = session
                .ok_or_else(|| Error::InvalidConfig("deterministic mode needs a session".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
            let idx = session.ensemble.sample_index(&mut rng);
            Ok(ModelEnsemble::single(session.ensemble.models[idx].clone()))
        }
        PipelineMode::Probabilistic => {
            let session = session
                .ok_or_else(|| Error::InvalidConfig("probabilistic mode needs a session".into()))?;
            Ok(session.ensemble.clone())
        }
    }
}

/// Goal selection plus closed-loop execution against a prepared world.
/// Shared by the pipeline and the batch experiment runner.
pub fn run_goal_and_plan(
    world: &mut GroundTruthWorld,
    ensemble: &ModelEnsemble,
    cfg: &PipelineConfig,
    seeds: &PipelineSeeds,
    report: &mut TrialReport,
) {
    let obj = world.object().clone();
    let table = *world.table();
    let mut query = GoalQuery::edge(&obj);
    query.eps = cfg.eps;

    let t0 = std::time::Instant::now();
    let goal = match sample_stable_goal(&obj, &query, ensemble, &table, seeds.goal) {
        Ok(g) => g,
        Err(e) => {
            report.error = Some(e.to_string());
            return;
        }
    };
    report.timings.goal_s = t0.elapsed().as_secs_f64();
    report.goal_pose = Some(goal);

    let t0 = std::time::Instant::now();
    match robust_plan(world, &table, &goal, ensemble, &cfg.plan, seeds.plan) {
        Ok(result) => {
            report.n_actions = result.actions.len();
            report.reached = result.reached;
        }
        Err(e) => {
            report.error = Some(e.to_string());
        }
    }
    report.timings.plan_s = t0.elapsed().as_secs_f64();
    report.fell = world.fell();
    report.success = report.reached && !report.fell;
}

/// End-to-end pre-grasp trial: identification session (where the mode needs
/// one), stable goal selection, closed-loop pushing, and the final balance
/// verdict under the hidden model. Failures are recorded in the report, not
/// thrown, so batch runs keep going.
pub fn pregrasp_pipeline(
    obj: &GridObject,
    hidden: &ParamMap,
    table: &Table,
    world_cfg: &WorldConfig,
    initial: &BodyState,
    cfg: &PipelineConfig,
    seeds: &PipelineSeeds,
) -> TrialReport {
    let mut report = TrialReport {
        mode: cfg.mode,
        seed: seeds.world,
        success: false,
        reached: false,
        fell: false,
        n_actions: 0,
        ident_pushes: 0,
        goal_pose: None,
        error: None,
        timings: StageTimings::default(),
    };

    let mut world = match GroundTruthWorld::new(
        obj.clone(),
        hidden.clone(),
        *world_cfg,
        *table,
        *initial,
        seeds.world,
    ) {
        Ok(w) => w,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };

    let needs_session =
        matches!(cfg.mode, PipelineMode::Deterministic | PipelineMode::Probabilistic);
    let session = if needs_session {
        let t0 = std::time::Instant::now();
        let res = run_identification_session(
            &mut world,
            &cfg.ident,
            &cfg.explore,
            cfg.selection,
            cfg.pushes,
            seeds.explore,
        );
        report.timings.identify_s = t0.elapsed().as_secs_f64();
        match res {
            Ok(s) => {
                report.ident_pushes = s.actions.len();
                Some(s)
            }
            Err(e) => {
                report.error = Some(e.to_string());
                return report;
            }
        }
    } else {
        None
    };

    let ensemble =
        match mode_ensemble(cfg.mode, session.as_ref(), hidden, &cfg.ident, seeds.model_draw) {
            Ok(e) => e,
            Err(e) => {
                report.error = Some(e.to_string());
                return report;
            }
        };
    run_goal_and_plan(&mut world, &ensemble, cfg, seeds, &mut report);
    log::info!(
        "pipeline mode={} seed={} success={} actions={} timings: ident {:.2}s goal {:.2}s plan {:.2}s",
        report.mode,
        report.seed,
        report.success,
        report.n_actions,
        report.timings.identify_s,
        report.timings.goal_s,
        report.timings.plan_s,
    );
    report
}
