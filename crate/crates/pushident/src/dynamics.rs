//! Quasi-static velocity predictor and the hidden-parameter ground-truth
//! world.
//!
//! The object slides on a horizontal surface. Each cell contributes a
//! regularized Coulomb friction force `-mu_i * m_i * g * smooth_dir(v_i)`
//! acting at its center, with `smooth_dir(v) = v / sqrt(|v|^2 + eps_v^2)`.
//! One step integrates the rigid-body Newton-Euler equations about the
//! mass-weighted center of mass over `substeps` semi-implicit substeps;
//! friction enters the velocity update implicitly, as the minimizer of a
//! strongly convex incremental potential, which keeps the scheme stable
//! and dissipative at creep speeds where an explicit treatment oscillates.
//!
//! Below the breakaway force `sum_i mu_i * m_i * g` a resting object must
//! not creep: if every substep of a step starts below the regularization
//! speed while the applied force stays below breakaway, the output velocity
//! is clamped to exactly zero, so sub-breakaway pushes cannot accumulate
//! drift across steps (the bounded within-step creep is kept — discarding
//! it would make the step map discontinuous in the parameters). A zero
//! force on a resting body short-circuits to an exact fixed point.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::object::{
    cross2, expand_state, perp, rotate, wrap_angle, BodyState, CellStateVector, GridObject,
    ParamMap, PushAction, Trajectory,
};
use crate::{Error, Result};

/// Gravitational acceleration used throughout (m/s^2).
pub const GRAVITY: f64 = 9.8;

/// Zero-force steps appended after every push so the object comes to rest
/// before its pose is recorded. Fixed count: once the static clamp engages
/// the remaining steps are exact no-ops, and a fixed count keeps the step
/// map smooth in the parameters.
pub const SETTLE_STEPS: usize = 8;

/// Regularization of the Coulomb direction function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrictionModel {
    /// Speed scale of `smooth_dir` (m/s). Must be positive.
    pub regularization_speed: f64,
}

impl Default for FrictionModel {
    fn default() -> Self {
        Self { regularization_speed: 1e-4 }
    }
}

/// Integration and control-noise configuration of a world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    /// Base step duration (s): settle steps and default push durations.
    pub dt: f64,
    /// Substeps per push/step.
    pub substeps: usize,
    /// Relative force magnitude noise (1 sigma).
    pub force_noise_sigma: f64,
    /// Force direction noise in radians (1 sigma).
    pub angle_noise_sigma: f64,
    pub friction: FrictionModel,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            substeps: 10,
            force_noise_sigma: 0.0,
            angle_noise_sigma: 0.0,
            friction: FrictionModel::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.substeps == 0 {
            return Err(Error::InvalidConfig("dt must be > 0 and substeps >= 1".into()));
        }
        if self.force_noise_sigma < 0.0 || self.angle_noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise sigmas must be >= 0".into()));
        }
        if !(self.friction.regularization_speed > 0.0) {
            return Err(Error::InvalidConfig("regularization speed must be > 0".into()));
        }
        Ok(())
    }
}

/// Support surface. The disc is centered at the world origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Table {
    Disc { radius: f64 },
}

impl Table {
    /// Whether `p` lies on the table shrunk inward by `margin`.
    pub fn contains(&self, p: Vector2<f64>, margin: f64) -> bool {
        match self {
            Table::Disc { radius } => p.norm() <= radius - margin,
        }
    }

    /// Distance from `p` to the edge, positive inside.
    pub fn depth(&self, p: Vector2<f64>) -> f64 {
        match self {
            Table::Disc { radius } => radius - p.norm(),
        }
    }

    pub fn radius(&self) -> f64 {
        match self {
            Table::Disc { radius } => *radius,
        }
    }
}

/// Generalized planar velocity: linear velocity of the body origin plus
/// angular rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub linear: Vector2<f64>,
    pub angular: f64,
}

impl Twist {
    pub fn zero() -> Self {
        Self { linear: Vector2::zeros(), angular: 0.0 }
    }
}

/// Expand a body twist to the 3n per-cell velocity vector
/// `[v1x, v1y, w, ...]` at the given body rotation.
pub fn expand_velocity(obj: &GridObject, rotation: f64, twist: &Twist) -> Vec<f64> {
    let mut v = Vec::with_capacity(3 * obj.n());
    for &o in obj.rest_offsets() {
        let vi = twist.linear + perp(rotate(rotation, o)) * twist.angular;
        v.push(vi.x);
        v.push(vi.y);
        v.push(twist.angular);
    }
    v
}

/// Minimum force magnitude that can initiate sliding: `g * sum_i mu_i m_i`.
pub fn breakaway_force(params: &ParamMap) -> f64 {
    GRAVITY * params.products().iter().sum::<f64>()
}

/// Kinetic energy of the rigid body under the given mass map.
pub fn kinetic_energy(obj: &GridObject, body: &BodyState, params: &ParamMap) -> f64 {
    let props = Stepper::new(obj, params, 1e-4).expect("dims checked by caller");
    let rc_w = rotate(body.rotation, props.r_c);
    let v_com = body.lin_velocity + perp(rc_w) * body.ang_velocity;
    0.5 * props.m_total * v_com.norm_squared() + 0.5 * props.inertia * body.ang_velocity.powi(2)
}

/// COM-frame integration state.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ComState {
    /// World position of the center of mass.
    pub c: Vector2<f64>,
    /// Unwrapped body angle.
    pub phi: f64,
    /// (v_com_x, v_com_y, omega).
    pub u: Vector3<f64>,
}

/// Per-substep record consumed by the sensitivity propagation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SubstepRecord {
    /// Body angle at the start of the substep (arms evaluated here).
    pub phi_pre: f64,
    pub u_prev: Vector3<f64>,
    pub u_new: Vector3<f64>,
}

/// Friction wrench and its velocity Jacobian blocks, assembled at a given
/// velocity. All quantities are about the center of mass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FrictionAssembly {
    pub f_tot: Vector2<f64>,
    pub tau: f64,
    /// B = sum kappa_i D_i
    pub b: Matrix2<f64>,
    /// d = sum kappa_i D_i perp(a_i)
    pub d: Vector2<f64>,
    /// e = sum kappa_i perp(a_i)^T D_i perp(a_i)
    pub e: f64,
    /// sum kappa_i D_i a_i (angle derivative of the force part)
    pub kda: Vector2<f64>,
    /// sum kappa_i cross(a_i, D_i a_i)
    pub cross_a_da: f64,
    /// sum a_i . f_i
    pub a_dot_f: f64,
}

/// Precomputed rigid-body quantities for one (object, params) pair.
pub(crate) struct Stepper<'a> {
    pub obj: &'a GridObject,
    pub params: &'a ParamMap,
    pub eps_v: f64,
    pub m_total: f64,
    /// Body-frame COM offset.
    pub r_c: Vector2<f64>,
    /// Body-frame arms: rest offset minus COM offset.
    pub arms_body: Vec<Vector2<f64>>,
    /// Moment of inertia about the COM.
    pub inertia: f64,
    /// Per-cell mu_i * m_i * g.
    pub kappa: Vec<f64>,
    pub breakaway: f64,
    /// Largest |arm|, used in the static-clamp speed bound.
    pub arm_max: f64,
}

impl<'a> Stepper<'a> {
    pub fn new(obj: &'a GridObject, params: &'a ParamMap, eps_v: f64) -> Result<Self> {
        if params.n() != obj.n() {
            return Err(Error::DimensionMismatch { expected: obj.n(), got: params.n() });
        }
        let m_total: f64 = params.mass.iter().sum();
        let r_c = params.com_offset(obj);
        let arms_body: Vec<Vector2<f64>> = obj.rest_offsets().iter().map(|&s| s - r_c).collect();
        let w2_6 = obj.cell_width() * obj.cell_width() / 6.0;
        let inertia: f64 = params
            .mass
            .iter()
            .zip(&arms_body)
            .map(|(&m, a)| m * (w2_6 + a.norm_squared()))
            .sum();
        let kappa: Vec<f64> =
            params.mass.iter().zip(&params.friction).map(|(&m, &mu)| mu * m * GRAVITY).collect();
        let breakaway: f64 = kappa.iter().sum();
        let arm_max = arms_body.iter().map(|a| a.norm()).fold(0.0, f64::max);
        Ok(Self { obj, params, eps_v, m_total, r_c, arms_body, inertia, kappa, breakaway, arm_max })
    }

    pub fn enter(&self, body: &BodyState) -> ComState {
        let rc_w = rotate(body.rotation, self.r_c);
        let v_com = body.lin_velocity + perp(rc_w) * body.ang_velocity;
        ComState {
            c: body.position + rc_w,
            phi: body.rotation,
            u: Vector3::new(v_com.x, v_com.y, body.ang_velocity),
        }
    }

    pub fn exit(&self, st: &ComState) -> BodyState {
        let rc_w = rotate(st.phi, self.r_c);
        let v_o = st.u.xy() - perp(rc_w) * st.u.z;
        BodyState {
            position: st.c - rc_w,
            rotation: wrap_angle(st.phi),
            lin_velocity: v_o,
            ang_velocity: st.u.z,
        }
    }

    /// World-frame cell position for a COM-frame state.
    pub fn cell_world(&self, st: &ComState, i: usize) -> Vector2<f64> {
        st.c + rotate(st.phi, self.arms_body[i])
    }

    /// Cell velocity at velocity `u`, arms evaluated at angle `phi`.
    fn cell_velocity(&self, phi: f64, u: &Vector3<f64>, i: usize) -> Vector2<f64> {
        u.xy() + perp(rotate(phi, self.arms_body[i])) * u.z
    }

    /// Assemble friction wrench and Jacobian blocks at (phi, u).
    pub(crate) fn friction_assembly(&self, phi: f64, u: &Vector3<f64>) -> FrictionAssembly {
        let eps2 = self.eps_v * self.eps_v;
        let mut acc = FrictionAssembly {
            f_tot: Vector2::zeros(),
            tau: 0.0,
            b: Matrix2::zeros(),
            d: Vector2::zeros(),
            e: 0.0,
            kda: Vector2::zeros(),
            cross_a_da: 0.0,
            a_dot_f: 0.0,
        };
        let (s_phi, c_phi) = phi.sin_cos();
        for i in 0..self.kappa.len() {
            let ab = self.arms_body[i];
            let a = Vector2::new(c_phi * ab.x - s_phi * ab.y, s_phi * ab.x + c_phi * ab.y);
            let v = u.xy() + perp(a) * u.z;
            let s = (v.norm_squared() + eps2).sqrt();
            let sigma = v / s;
            let k = self.kappa[i];
            let f = -sigma * k;
            // D = (s^2 I - v v^T) / s^3
            let s3 = s * s * s;
            let dmat = Matrix2::new(
                (s * s - v.x * v.x) / s3,
                -v.x * v.y / s3,
                -v.x * v.y / s3,
                (s * s - v.y * v.y) / s3,
            );
            let pa = perp(a);
            let dpa = dmat * pa;
            acc.f_tot += f;
            acc.tau += cross2(a, f);
            acc.b += dmat * k;
            acc.d += dpa * k;
            acc.e += pa.dot(&dpa) * k;
            acc.kda += dmat * a * k;
            acc.cross_a_da += cross2(a, dmat * a) * k;
            acc.a_dot_f += a.dot(&f);
        }
        acc
    }

    /// Incremental potential whose minimizer is the implicit velocity
    /// update: `0.5 u^T A u - b^T u + h * sum_i kappa_i s(v_i(u))`.
    fn potential(&self, phi: f64, u: &Vector3<f64>, b_vec: &Vector3<f64>, h: f64) -> f64 {
        let eps2 = self.eps_v * self.eps_v;
        let quad = 0.5
            * (self.m_total * (u.x * u.x + u.y * u.y) + self.inertia * u.z * u.z)
            - b_vec.dot(u);
        let (s_phi, c_phi) = phi.sin_cos();
        let mut fric = 0.0;
        for i in 0..self.kappa.len() {
            let ab = self.arms_body[i];
            let a = Vector2::new(c_phi * ab.x - s_phi * ab.y, s_phi * ab.x + c_phi * ab.y);
            let v = u.xy() + perp(a) * u.z;
            fric += self.kappa[i] * (v.norm_squared() + eps2).sqrt();
        }
        quad + h * fric
    }

    /// Newton matrix at (phi, u): `A - h * J_friction`, symmetric positive
    /// definite.
    pub(crate) fn newton_matrix(&self, asm: &FrictionAssembly, h: f64) -> Matrix3<f64> {
        Matrix3::new(
            self.m_total + h * asm.b[(0, 0)],
            h * asm.b[(0, 1)],
            h * asm.d.x,
            h * asm.b[(1, 0)],
            self.m_total + h * asm.b[(1, 1)],
            h * asm.d.y,
            h * asm.d.x,
            h * asm.d.y,
            self.inertia + h * asm.e,
        )
    }

    /// Applied generalized force about the COM for a world force at the
    /// contact cell.
    pub(crate) fn applied_wrench(&self, phi: f64, force: Vector2<f64>, contact: usize) -> Vector3<f64> {
        let a_ct = rotate(phi, self.arms_body[contact]);
        Vector3::new(force.x, force.y, cross2(a_ct, force))
    }

    /// Implicit velocity update over one substep: solves
    /// `A (u' - u) = h * (P + F_friction(u'))` by minimizing the
    /// incremental potential with a damped Newton iteration.
    pub(crate) fn solve_substep(
        &self,
        phi: f64,
        u_prev: Vector3<f64>,
        force: Vector2<f64>,
        contact: usize,
        h: f64,
    ) -> Vector3<f64> {
        let p = self.applied_wrench(phi, force, contact);
        let a_u0 = Vector3::new(
            self.m_total * u_prev.x,
            self.m_total * u_prev.y,
            self.inertia * u_prev.z,
        );
        let b_vec = a_u0 + p * h;

        let tol = 1e-14 * (self.m_total * self.eps_v + h * (self.breakaway + force.norm()))
            + 1e-300;

        let mut u = u_prev;
        let mut pot = self.potential(phi, &u, &b_vec, h);
        for _ in 0..200 {
            let asm = self.friction_assembly(phi, &u);
            let grad = Vector3::new(
                self.m_total * u.x - b_vec.x - h * asm.f_tot.x,
                self.m_total * u.y - b_vec.y - h * asm.f_tot.y,
                self.inertia * u.z - b_vec.z - h * asm.tau,
            );
            if grad.norm() <= tol {
                break;
            }
            let k = self.newton_matrix(&asm, h);
            let dir = match k.cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => -k.lu().solve(&grad).unwrap_or(grad * -1e-6),
            };
            // Inside the quadratic basin the potential decrease falls below
            // f64 resolution, so a line search would stall the iteration at
            // ~1e-8 accuracy; plain Newton steps converge there.
            if dir.norm() <= 1e-4 * (self.eps_v + u.norm()) {
                if dir.norm() <= 1e-16 * (self.eps_v + u.norm()) {
                    break;
                }
                u += dir;
                continue;
            }
            let slope = grad.dot(&dir);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = u + dir * t;
                let cand_pot = self.potential(phi, &cand, &b_vec, h);
                if cand_pot <= pot + 1e-4 * t * slope {
                    u = cand;
                    pot = cand_pot;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // Potential comparison hit its numerical floor; trust the
                // Newton direction once and let the gradient test decide.
                u += dir;
                pot = self.potential(phi, &u, &b_vec, h);
            }
        }
        u
    }

    /// Integrate the force over `duration` with `substeps` substeps.
    /// Returns the final COM state, the substep records, and whether the
    /// static clamp applies (sub-breakaway force, creep speeds throughout).
    /// A zero force on an exactly resting body returns immediately with no
    /// records, preserving the input bit-for-bit.
    pub(crate) fn integrate(
        &self,
        body: &BodyState,
        force: Vector2<f64>,
        contact: usize,
        duration: f64,
        substeps: usize,
    ) -> (ComState, Vec<SubstepRecord>, bool) {
        if force.x == 0.0
            && force.y == 0.0
            && body.lin_velocity.x == 0.0
            && body.lin_velocity.y == 0.0
            && body.ang_velocity == 0.0
        {
            return (self.enter(body), Vec::new(), true);
        }
        let h = duration / substeps as f64;
        let mut st = self.enter(body);
        let mut records = Vec::with_capacity(substeps);
        let mut all_static = force.norm() < self.breakaway;
        for _ in 0..substeps {
            let speed = st.u.xy().norm() + st.u.z.abs() * self.arm_max;
            if speed >= self.eps_v {
                all_static = false;
            }
            let u_new = self.solve_substep(st.phi, st.u, force, contact, h);
            records.push(SubstepRecord { phi_pre: st.phi, u_prev: st.u, u_new });
            st.c += u_new.xy() * h;
            st.phi += u_new.z * h;
            st.u = u_new;
        }
        (st, records, all_static)
    }
}

fn check_inputs(obj: &GridObject, body: &BodyState, action: &PushAction, params: &ParamMap) -> Result<()> {
    if params.n() != obj.n() {
        return Err(Error::DimensionMismatch { expected: obj.n(), got: params.n() });
    }
    if action.contact_cell >= obj.n() {
        return Err(Error::InvalidConfig("contact cell out of range".into()));
    }
    let finite = body.position.x.is_finite()
        && body.position.y.is_finite()
        && body.rotation.is_finite()
        && body.lin_velocity.x.is_finite()
        && body.lin_velocity.y.is_finite()
        && body.ang_velocity.is_finite()
        && action.force.x.is_finite()
        && action.force.y.is_finite()
        && action.duration.is_finite();
    if !finite {
        return Err(Error::NonFinite("predict_velocity inputs"));
    }
    Ok(())
}

/// Generalized velocity after integrating the push over its duration.
///
/// In the static regime (force below breakaway, creep speeds at every
/// substep) the result is exactly zero.
pub fn predict_velocity(
    obj: &GridObject,
    body: &BodyState,
    action: &PushAction,
    params: &ParamMap,
    cfg: &WorldConfig,
) -> Result<Twist> {
    check_inputs(obj, body, action, params)?;
    let stepper = Stepper::new(obj, params, cfg.friction.regularization_speed)?;
    let (st, _, clamped) =
        stepper.integrate(body, action.force, action.contact_cell, action.duration, cfg.substeps);
    if clamped {
        return Ok(Twist::zero());
    }
    let out = stepper.exit(&st);
    Ok(Twist { linear: out.lin_velocity, angular: out.ang_velocity })
}

/// One integrated step: velocity update and pose update per substep.
/// The static clamp returns the input pose with zero velocity.
pub fn step(
    obj: &GridObject,
    body: &BodyState,
    action: &PushAction,
    params: &ParamMap,
    cfg: &WorldConfig,
) -> Result<BodyState> {
    check_inputs(obj, body, action, params)?;
    let stepper = Stepper::new(obj, params, cfg.friction.regularization_speed)?;
    let (st, records, clamped) =
        stepper.integrate(body, action.force, action.contact_cell, action.duration, cfg.substeps);
    if clamped {
        if records.is_empty() {
            return Ok(body.stopped());
        }
        return Ok(stepper.exit(&st).stopped());
    }
    Ok(stepper.exit(&st))
}

/// Execute one push of the quasi-static protocol: start from rest, apply
/// the force for its duration, then coast through [`SETTLE_STEPS`]
/// zero-force steps of `cfg.dt` so the object is (normally) at rest when
/// the pose is recorded.
pub fn execute_push(
    obj: &GridObject,
    body: &BodyState,
    action: &PushAction,
    params: &ParamMap,
    cfg: &WorldConfig,
) -> Result<BodyState> {
    let mut state = step(obj, &body.stopped(), action, params, cfg)?;
    let settle = PushAction { contact_cell: action.contact_cell, force: Vector2::zeros(), duration: cfg.dt };
    for _ in 0..SETTLE_STEPS {
        state = step(obj, &state, &settle, params, cfg)?;
    }
    Ok(state)
}

/// Apply control noise to a commanded push: magnitude scaled by
/// `1 + N(0, sigma_f)`, direction rotated by `N(0, sigma_theta)`.
pub fn apply_control_noise<R: rand::Rng>(action: &PushAction, cfg: &WorldConfig, rng: &mut R) -> PushAction {
    let mag = Normal::new(0.0, cfg.force_noise_sigma.max(1e-300)).unwrap().sample(rng);
    let ang = Normal::new(0.0, cfg.angle_noise_sigma.max(1e-300)).unwrap().sample(rng);
    let scale = if cfg.force_noise_sigma > 0.0 { 1.0 + mag } else { 1.0 };
    let theta = if cfg.angle_noise_sigma > 0.0 { ang } else { 0.0 };
    PushAction {
        contact_cell: action.contact_cell,
        force: rotate(theta, action.force) * scale,
        duration: action.duration,
    }
}

/// Roll out a sequence of commanded pushes under hidden parameters with
/// control noise, recording the settled pose after each push. Velocities in
/// the returned trajectory are finite-differenced from the recorded poses.
/// Deterministic for a fixed seed.
pub fn world_rollout(
    obj: &GridObject,
    body0: &BodyState,
    actions: &[PushAction],
    hidden: &ParamMap,
    cfg: &WorldConfig,
    rng_seed: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut body = body0.stopped();
    let mut states = vec![expand_state(obj, &body)];
    for action in actions {
        let executed = apply_control_noise(action, cfg, &mut rng);
        body = execute_push(obj, &body, &executed, hidden, cfg)?;
        states.push(expand_state(obj, &body));
    }
    let dt = actions.first().map(|a| a.duration).unwrap_or(cfg.dt);
    Trajectory::from_states(states, actions.to_vec(), dt)
}

/// True iff the mass-weighted center of mass lies on the table shrunk by a
/// one-cell-width margin.
pub fn balance_check(obj: &GridObject, body: &BodyState, params: &ParamMap, table: &Table) -> bool {
    let com = body.position + rotate(body.rotation, params.com_offset(obj));
    table.contains(com, obj.cell_width())
}

/// An execution environment the planner and identification session push
/// against: observe a settled pose, apply a push, repeat.
pub trait PushWorld {
    fn object(&self) -> &GridObject;
    fn config(&self) -> &WorldConfig;
    /// Current settled pose (zero velocity).
    fn observe(&self) -> BodyState;
    /// Execute a commanded push (noise applied inside) and return the new
    /// settled pose.
    fn apply_push(&mut self, action: &PushAction) -> Result<BodyState>;
    /// Whether the object is still inside the admissible workspace.
    fn in_workspace(&self) -> bool {
        true
    }
    /// Whether the world considers the trial unrecoverable (e.g. the object
    /// tipped off the support).
    fn failed(&self) -> bool {
        false
    }
}

/// The "reality" stand-in: executes pushes under hidden parameters with
/// control noise and tracks whether the object has fallen off the table.
/// The hidden parameters never leave this struct.
pub struct GroundTruthWorld {
    obj: GridObject,
    hidden: ParamMap,
    cfg: WorldConfig,
    table: Table,
    body: BodyState,
    rng: ChaCha8Rng,
    fell: bool,
}

impl GroundTruthWorld {
    pub fn new(
        obj: GridObject,
        hidden: ParamMap,
        cfg: WorldConfig,
        table: Table,
        initial: BodyState,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if hidden.n() != obj.n() {
            return Err(Error::DimensionMismatch { expected: obj.n(), got: hidden.n() });
        }
        Ok(Self {
            obj,
            hidden,
            cfg,
            table,
            body: initial.stopped(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            fell: false,
        })
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    /// Whether the object has been unbalanced at any point so far.
    pub fn fell(&self) -> bool {
        self.fell
    }

    /// Balance of the current pose under the hidden parameters.
    pub fn balanced(&self) -> bool {
        balance_check(&self.obj, &self.body, &self.hidden, &self.table)
    }

    /// Expanded cell state of the current pose.
    pub fn observe_cells(&self) -> CellStateVector {
        expand_state(&self.obj, &self.body)
    }
}

impl PushWorld for GroundTruthWorld {
    fn object(&self) -> &GridObject {
        &self.obj
    }

    fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    fn observe(&self) -> BodyState {
        self.body
    }

    fn apply_push(&mut self, action: &PushAction) -> Result<BodyState> {
        let executed = apply_control_noise(action, &self.cfg, &mut self.rng);
        self.body = execute_push(&self.obj, &self.body, &executed, &self.hidden, &self.cfg)?;
        if !self.balanced() {
            self.fell = true;
        }
        Ok(self.body)
    }

    /// The workspace is the table with the footprint fully on it.
    fn in_workspace(&self) -> bool {
        let margin = self.obj.cell_width() / 2.0;
        self.obj
            .world_cells(&self.body)
            .iter()
            .all(|p| self.table.contains(*p, margin))
    }

    fn failed(&self) -> bool {
        self.fell
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object::{add_loss, decompose_footprint, Footprint};
    use approx::assert_relative_eq;

    fn strip(cols: usize, w: f64) -> GridObject {
        decompose_footprint(&Footprint::Bitmap(vec!["#".repeat(cols)]), w).unwrap()
    }

    fn single_cell() -> GridObject {
        strip(1, 0.02)
    }

    fn uniform(obj: &GridObject, mass: f64, mu: f64) -> ParamMap {
        ParamMap::uniform(obj.n(), mass, mu)
    }

    #[test]
    fn zero_force_at_rest_is_a_fixed_point() {
        let obj = single_cell();
        let params = uniform(&obj, 1.0, 0.5);
        let cfg = WorldConfig::default();
        let body = BodyState::at_rest(Vector2::new(0.1, 0.2), 0.3);
        let action = PushAction::new(&obj, 0, Vector2::zeros(), cfg.dt).unwrap();
        let out = step(&obj, &body, &action, &params, &cfg).unwrap();
        assert_eq!(out.position, body.position);
        assert_eq!(out.rotation, body.rotation);
        assert_eq!(out.lin_velocity, Vector2::zeros());
        assert_eq!(out.ang_velocity, 0.0);
        let v = predict_velocity(&obj, &body, &action, &params, &cfg).unwrap();
        assert_eq!(v.linear, Vector2::zeros());
        assert_eq!(v.angular, 0.0);
    }

    #[test]
    fn centroid_push_on_uniform_cell_does_not_rotate() {
        let obj = single_cell();
        let params = uniform(&obj, 1.0, 0.5);
        let cfg = WorldConfig::default();
        let body = BodyState::at_rest(Vector2::zeros(), 0.0);
        // 100 N is far above the 4.9 N breakaway.
        let action = PushAction::new(&obj, 0, Vector2::new(100.0, 0.0), cfg.dt).unwrap();
        let v = predict_velocity(&obj, &body, &action, &params, &cfg).unwrap();
        assert!(v.linear.x > 0.0);
        assert_relative_eq!(v.linear.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(v.angular, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn friction_asymmetry_turns_toward_high_friction_cell() {
        // Two cells along +x, friction 0.1 on the left and 0.9 on the right.
        // Under a +y push through the centroid the initial friction torque is
        // tau = sum cross(a_i, -kappa_i * yhat), which the oracle below
        // evaluates directly; the predicted angular velocity must share its
        // sign (the heavy-friction side trails).
        let obj = strip(2, 0.02);
        let params = ParamMap::new(vec![1.0, 1.0], vec![0.1, 0.9]).unwrap();
        let cfg = WorldConfig::default();
        let body = BodyState::at_rest(Vector2::zeros(), 0.0);
        let action = PushAction::new(&obj, 0, Vector2::new(0.0, 50.0), cfg.dt).unwrap();
        // Push applied at the centroid would need a virtual cell; instead push
        // straight through by applying at cell 0 and adding the mirrored pull?
        // Simpler: evaluate the torque balance oracle at a uniform +y slide.
        let kappa: Vec<f64> = params
            .mass
            .iter()
            .zip(&params.friction)
            .map(|(m, mu)| m * mu * GRAVITY)
            .collect();
        let com = params.com_offset(&obj);
        let oracle_tau: f64 = obj
            .rest_offsets()
            .iter()
            .zip(&kappa)
            .map(|(&o, &k)| cross2(o - com, Vector2::new(0.0, -k)))
            .sum();
        assert!(oracle_tau < 0.0);
        // The applied push at cell 0 adds its own torque; cancel it by pushing
        // at the COM-centered cell pair: apply at both? PushAction is single
        // cell, so verify the sign with the contact torque subtracted.
        let stepper = Stepper::new(&obj, &params, cfg.friction.regularization_speed).unwrap();
        let st = stepper.enter(&body);
        let h = cfg.dt / cfg.substeps as f64;
        // contact exactly at the COM: emulate with zero-arm applied wrench by
        // solving the substep with the applied torque removed.
        let p_force = Vector2::new(0.0, 50.0);
        let u = {
            // one implicit substep from rest with force at COM
            let b_vec = Vector3::new(p_force.x * h, p_force.y * h, 0.0);
            let mut u = Vector3::zeros();
            for _ in 0..100 {
                let asm = stepper.friction_assembly(st.phi, &u);
                let grad = Vector3::new(
                    stepper.m_total * u.x - b_vec.x - h * asm.f_tot.x,
                    stepper.m_total * u.y - b_vec.y - h * asm.f_tot.y,
                    stepper.inertia * u.z - b_vec.z - h * asm.tau,
                );
                if grad.norm() < 1e-14 {
                    break;
                }
                let k = stepper.newton_matrix(&asm, h);
                u -= k.lu().solve(&grad).unwrap();
            }
            u
        };
        assert!(u.z < 0.0, "object should rotate toward the high-friction cell, got {}", u.z);
        let _ = action;
    }

    #[test]
    fn displacement_monotone_in_force_magnitude() {
        let obj = strip(3, 0.02);
        let params = uniform(&obj, 0.2, 0.4);
        let cfg = WorldConfig::default();
        let brk = breakaway_force(&params);
        let body = BodyState::at_rest(Vector2::zeros(), 0.0);
        let mut last = 0.0;
        for k in 1..=5 {
            let f = brk * (1.0 + 0.2 * k as f64);
            let action = PushAction::new(&obj, 1, Vector2::new(f, 0.0), 0.5).unwrap();
            let out = execute_push(&obj, &body, &action, &params, &cfg).unwrap();
            let d = (out.position - body.position).norm();
            assert!(d > last, "displacement {d} not greater than {last} at force {f}");
            last = d;
        }
    }

    #[test]
    fn step_halving_is_consistent() {
        // The semi-implicit position update has an O(1/substeps) relative
        // displacement bias on accelerating spans, so convergence is
        // checked in a well-resolved regime.
        let obj = strip(3, 0.02);
        let params = ParamMap::new(vec![0.2, 0.25, 0.15], vec![0.3, 0.5, 0.4]).unwrap();
        let cfg = WorldConfig { substeps: 1000, ..Default::default() };
        let brk = breakaway_force(&params);
        let body = BodyState::at_rest(Vector2::zeros(), 0.0);
        let full = PushAction::new(&obj, 0, Vector2::new(1.4 * brk, 0.3 * brk), 0.05).unwrap();
        let half = PushAction::new(&obj, 0, Vector2::new(1.4 * brk, 0.3 * brk), 0.025).unwrap();
        let one = step(&obj, &body, &full, &params, &cfg).unwrap();
        let two = {
            let mid = step(&obj, &body, &half, &params, &cfg).unwrap();
            step(&obj, &mid, &half, &params, &cfg).unwrap()
        };
        let xa = expand_state(&obj, &one);
        let xb = expand_state(&obj, &two);
        let err = add_loss(&xa, &xb).unwrap();
        let scale = add_loss(&xa, &expand_state(&obj, &body)).unwrap();
        assert!(scale > 0.0);
        assert!(err / scale < 1e-3, "step halving relative error {}", err / scale);
    }

    #[test]
    fn quasi_static_mass_friction_scaling_degeneracy() {
        // (c*M, mu/c) must produce the same velocities as (M, mu) for
        // breakaway-scale forces: in the quasi-static regime only the
        // products mu_i * m_i are observable.
        let obj = strip(3, 0.02);
        let base = ParamMap::new(vec![0.2, 0.25, 0.15], vec![0.3, 0.5, 0.4]).unwrap();
        let cfg = WorldConfig { dt: 0.01, substeps: 20, ..Default::default() };
        let brk = breakaway_force(&base);
        let body = BodyState::at_rest(Vector2::zeros(), 0.0);
        for beta in [0.5, 0.75, 0.8, 0.85] {
            let action = PushAction::new(&obj, 0, Vector2::new(beta * brk, 0.0), cfg.dt).unwrap();
            let v_ref = predict_velocity(&obj, &body, &action, &base, &cfg).unwrap();
            for c in [0.5, 2.0, 10.0] {
                let scaled = ParamMap::new(
                    base.mass.iter().map(|m| m * c).collect(),
                    base.friction.iter().map(|f| f / c).collect(),
                )
                .unwrap();
                let v = predict_velocity(&obj, &body, &action, &scaled, &cfg).unwrap();
                let num = ((v.linear - v_ref.linear).norm_squared()
                    + (v.angular - v_ref.angular).powi(2))
                .sqrt();
                let den = (v_ref.linear.norm_squared() + v_ref.angular.powi(2)).sqrt();
                if den > 0.0 {
                    assert!(num / den < 1e-2, "c={c} beta={beta}: rel err {}", num / den);
                } else {
                    assert!(num < 1e-12);
                }
            }
        }
    }

    #[test]
    fn friction_only_dissipates_energy_every_substep() {
        let obj = strip(4, 0.02);
        let params = ParamMap::new(vec![0.2, 0.3, 0.25, 0.15], vec![0.3, 0.6, 0.2, 0.5]).unwrap();
        // One substep per step so each step boundary is a substep boundary.
        let cfg = WorldConfig { substeps: 1, dt: 0.005, ..Default::default() };
        let mut body = BodyState::new(Vector2::zeros(), 0.0, Vector2::new(0.4, -0.2), 3.0).unwrap();
        let action = PushAction::new(&obj, 0, Vector2::zeros(), cfg.dt).unwrap();
        let mut ke = kinetic_energy(&obj, &body, &params);
        for _ in 0..200 {
            body = step(&obj, &body, &action, &params, &cfg).unwrap();
            let next = kinetic_energy(&obj, &body, &params);
            assert!(next <= ke + 1e-12, "kinetic energy increased: {next} > {ke}");
            ke = next;
        }
        assert!(ke < 1e-10, "object failed to dissipate: KE = {ke}");
    }

    #[test]
    fn no_nan_at_parameter_boundaries() {
        let obj = strip(2, 0.02);
        let cfg = WorldConfig::default();
        let body = BodyState::at_rest(Vector2::zeros(), 0.0);
        for params in [
            ParamMap::new(vec![0.2, 0.2], vec![0.0, 0.0]).unwrap(),
            ParamMap::new(vec![crate::object::EPS_MASS, 0.2], vec![0.4, 0.4]).unwrap(),
        ] {
            let action = PushAction::new(&obj, 0, Vector2::new(1.0, 0.5), cfg.dt).unwrap();
            let v = predict_velocity(&obj, &body, &action, &params, &cfg).unwrap();
            assert!(v.linear.x.is_finite() && v.linear.y.is_finite() && v.angular.is_finite());
        }
    }

    #[test]
    fn rollout_is_deterministic_and_replayable() {
        let obj = strip(3, 0.02);
        let hidden = ParamMap::new(vec![0.2, 0.25, 0.15], vec![0.3, 0.5, 0.4]).unwrap();
        let brk = breakaway_force(&hidden);
        let body = BodyState::at_rest(Vector2::zeros(), 0.1);
        let actions: Vec<PushAction> = vec![
            PushAction::new(&obj, 0, Vector2::new(1.3 * brk, 0.0), 0.5).unwrap(),
            PushAction::new(&obj, 2, Vector2::new(-1.2 * brk, 0.2 * brk), 0.5).unwrap(),
        ];

        let noisy_cfg = WorldConfig { force_noise_sigma: 0.05, angle_noise_sigma: 0.05, ..Default::default() };
        let t1 = world_rollout(&obj, &body, &actions, &hidden, &noisy_cfg, 7).unwrap();
        let t2 = world_rollout(&obj, &body, &actions, &hidden, &noisy_cfg, 7).unwrap();
        for (a, b) in t1.states().iter().zip(t2.states().iter()) {
            assert_eq!(a.entries(), b.entries());
        }

        // With noise off, replaying the actions through execute_push is
        // exactly the rollout.
        let cfg = WorldConfig::default();
        let traj = world_rollout(&obj, &body, &actions, &hidden, &cfg, 3).unwrap();
        let mut replay = body.stopped();
        let mut states = vec![expand_state(&obj, &replay)];
        for a in &actions {
            replay = execute_push(&obj, &replay, a, &hidden, &cfg).unwrap();
            states.push(expand_state(&obj, &replay));
        }
        for (a, b) in traj.states().iter().zip(states.iter()) {
            assert_eq!(a.entries(), b.entries());
        }
    }

    #[test]
    fn monte_carlo_noise_mean_matches_noiseless_displacement() {
        let obj = strip(2, 0.02);
        let hidden = ParamMap::new(vec![0.2, 0.2], vec![0.4, 0.4]).unwrap();
        let brk = breakaway_force(&hidden);
        let body = BodyState::at_rest(Vector2::zeros(), 0.0);
        let action = vec![PushAction::new(&obj, 0, Vector2::new(1.3 * brk, 0.0), 0.5).unwrap()];

        let clean_cfg = WorldConfig::default();
        let clean = world_rollout(&obj, &body, &action, &hidden, &clean_cfg, 0).unwrap();
        let d0 = clean.terminal_state.cell_position(0).x;

        let noisy_cfg = WorldConfig { force_noise_sigma: 0.05, ..Default::default() };
        let mut samples = Vec::new();
        for seed in 0..100u64 {
            let t = world_rollout(&obj, &body, &action, &hidden, &noisy_cfg, seed).unwrap();
            samples.push(t.terminal_state.cell_position(0).x);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let se = (var / samples.len() as f64).sqrt();
        assert!(
            (mean - d0).abs() <= 2.0 * se + 1e-9,
            "MC mean {mean} vs noiseless {d0}, 2se = {}",
            2.0 * se
        );
    }

    #[test]
    fn balance_examples() {
        let table = Table::Disc { radius: 0.5 };
        let obj = strip(2, 0.02);
        let params = uniform(&obj, 0.2, 0.4);
        // Fully on the table.
        let center = BodyState::at_rest(Vector2::zeros(), 0.0);
        assert!(balance_check(&obj, &center, &params, &table));
        // All mass in the overhanging half.
        let skewed = ParamMap::new(vec![crate::object::EPS_MASS, 1.0], vec![0.4, 0.4]).unwrap();
        let over = BodyState::at_rest(Vector2::new(0.5, 0.0), 0.0);
        assert!(!balance_check(&obj, &over, &skewed, &table));
    }

    #[test]
    fn balance_com_flip_at_49_51_percent_overhang() {
        // 120-cell strip, w = 0.01: the one-cell-width balance margin flips
        // the verdict between 49% and 51% overhang (COM position vs the edge
        // computed analytically along a table radius).
        let w = 0.01;
        let obj = strip(120, w);
        let params = uniform(&obj, 0.01, 0.4);
        let len = 120.0 * w;
        let r = 5.0;
        let table = Table::Disc { radius: r };
        let pose = |f: f64| BodyState::at_rest(Vector2::new(r + len * (f - 0.5), 0.0), 0.0);
        assert!(balance_check(&obj, &pose(0.49), &params, &table));
        assert!(!balance_check(&obj, &pose(0.51), &params, &table));
    }

    #[test]
    fn balance_monotone_in_overhang() {
        let table = Table::Disc { radius: 0.5 };
        let obj = strip(10, 0.02);
        let params = ParamMap::new(
            (1..=10).map(|i| 0.01 * i as f64).collect(),
            vec![0.4; 10],
        )
        .unwrap();
        let mut was_false = false;
        for k in 0..80 {
            let x = 0.30 + 0.005 * k as f64;
            let ok = balance_check(&obj, &BodyState::at_rest(Vector2::new(x, 0.0), 0.0), &params, &table);
            if was_false {
                assert!(!ok, "balance flipped false -> true while sliding off");
            }
            if !ok {
                was_false = true;
            }
        }
        assert!(was_false);
    }

    #[test]
    fn world_tracks_falls() {
        let obj = strip(2, 0.02);
        let hidden = uniform(&obj, 0.2, 0.4);
        let cfg = WorldConfig::default();
        let table = Table::Disc { radius: 0.1 };
        let brk = breakaway_force(&hidden);
        let start = BodyState::at_rest(Vector2::new(0.05, 0.0), 0.0);
        let mut world =
            GroundTruthWorld::new(obj.clone(), hidden, cfg, table, start, 0).unwrap();
        assert!(!world.fell());
        let shove = PushAction::new(&obj, 0, Vector2::new(8.0 * brk, 0.0), 1.0).unwrap();
        world.apply_push(&shove).unwrap();
        assert!(world.fell());
    }
}
