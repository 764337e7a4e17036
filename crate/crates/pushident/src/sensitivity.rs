//! Forward sensitivities of the push map with respect to every per-cell
//! mass and friction parameter.
//!
//! The implicit velocity update of a substep solves
//! `G(u') = A(u' - u) - h (P + F_fric(u')) = 0`, so by the implicit function
//! theorem the parameter derivative of the solution satisfies
//!
//! ```text
//! K du' = A du - dA (u' - u) + h (Psi_phi dphi + Psi_p)
//! ```
//!
//! where `K = A - h dF_fric/du'` is the (already factored) Newton matrix of
//! the primal solve, `Psi_phi` is the angle derivative of the total wrench
//! and `Psi_p` its explicit parameter derivative. Mass parameters enter
//! three ways: the cell's own friction magnitude, the mass matrix `A`, and
//! the center-of-mass offset, which shifts every moment arm by the same
//! `delta_j = -R rho_j` with `rho_j = (s_j - r_c) / m_total`.
//!
//! The propagation re-walks the exact substep records produced by the
//! primal integrator, so the primal result here is bit-identical to
//! [`crate::dynamics::execute_push`].

use nalgebra::{Vector2, Vector3};

use crate::dynamics::{Stepper, SubstepRecord, WorldConfig, SETTLE_STEPS};
use crate::object::{
    angle_diff, cross2, expand_state, perp, rotate, BodyState, CellStateVector, GridObject,
    ParamMap, PushAction,
};
use crate::Result;

/// Per-parameter derivatives of a body state. Index `p < n` is mass `p`,
/// index `p >= n` is friction `p - n`.
#[derive(Debug, Clone)]
pub(crate) struct BodySens {
    pub dpos: Vec<Vector2<f64>>,
    pub drot: Vec<f64>,
    pub dvel: Vec<Vector2<f64>>,
    pub dang: Vec<f64>,
}

impl BodySens {
    fn zeros(n_params: usize) -> Self {
        Self {
            dpos: vec![Vector2::zeros(); n_params],
            drot: vec![0.0; n_params],
            dvel: vec![Vector2::zeros(); n_params],
            dang: vec![0.0; n_params],
        }
    }
}

/// COM-frame sensitivities during integration.
struct ComSens {
    dc: Vec<Vector2<f64>>,
    dphi: Vec<f64>,
    du: Vec<Vector3<f64>>,
}

fn enter_sens(stepper: &Stepper, body: &BodyState, sens: &BodySens) -> ComSens {
    let n = stepper.obj.n();
    let np = 2 * n;
    let rc_w = rotate(body.rotation, stepper.r_c);
    let mut out = ComSens {
        dc: vec![Vector2::zeros(); np],
        dphi: vec![0.0; np],
        du: vec![Vector3::zeros(); np],
    };
    for p in 0..np {
        // d(R r_c)/dp: rotation via the input sens, plus the COM shift for
        // mass parameters.
        let mut drc = perp(rc_w) * sens.drot[p];
        if p < n {
            let rho = stepper.arms_body[p] / stepper.m_total;
            drc += rotate(body.rotation, rho);
        }
        out.dc[p] = sens.dpos[p] + drc;
        out.dphi[p] = sens.drot[p];
        let dv = sens.dvel[p] + perp(drc) * body.ang_velocity + perp(rc_w) * sens.dang[p];
        out.du[p] = Vector3::new(dv.x, dv.y, sens.dang[p]);
    }
    out
}

fn exit_sens(stepper: &Stepper, phi: f64, u: Vector3<f64>, sens: &ComSens) -> BodySens {
    let n = stepper.obj.n();
    let np = 2 * n;
    let rc_w = rotate(phi, stepper.r_c);
    let mut out = BodySens::zeros(np);
    for p in 0..np {
        let mut drc = perp(rc_w) * sens.dphi[p];
        if p < n {
            let rho = stepper.arms_body[p] / stepper.m_total;
            drc += rotate(phi, rho);
        }
        out.dpos[p] = sens.dc[p] - drc;
        out.drot[p] = sens.dphi[p];
        out.dvel[p] = sens.du[p].xy() - perp(rc_w) * sens.du[p].z - perp(drc) * u.z;
        out.dang[p] = sens.du[p].z;
    }
    out
}

/// Propagate sensitivities through one integrated step (the substep records
/// of a single `step` call). `clamped` mirrors the primal static clamp:
/// pose sensitivities flow through the integrated motion while the velocity
/// derivative dies; an empty record list is the exact zero-force fixed
/// point, which passes pose sensitivities through untouched.
fn propagate_step(
    stepper: &Stepper,
    body_in: &BodyState,
    sens_in: &BodySens,
    records: &[SubstepRecord],
    force: Vector2<f64>,
    contact: usize,
    h: f64,
    clamped: bool,
) -> BodySens {
    let n = stepper.obj.n();
    let np = 2 * n;
    if records.is_empty() {
        let mut out = sens_in.clone();
        for p in 0..np {
            out.dvel[p] = Vector2::zeros();
            out.dang[p] = 0.0;
        }
        return out;
    }

    let mut sens = enter_sens(stepper, body_in, sens_in);
    let g = crate::dynamics::GRAVITY;
    let mut phi_final = body_in.rotation;
    let mut u_final = Vector3::zeros();
    for rec in records {
        let phi = rec.phi_pre;
        let u_new = rec.u_new;
        let du_step = rec.u_new - rec.u_prev;
        let w_new = u_new.z;

        let asm = stepper.friction_assembly(phi, &u_new);
        let k = stepper.newton_matrix(&asm, h);
        let chol = k.cholesky().unwrap_or_else(|| {
            // K is SPD by construction; fall back through LU if roundoff
            // bites at extreme stiffness.
            nalgebra::Cholesky::new(k + nalgebra::Matrix3::identity() * 1e-30).unwrap()
        });
        let a_ct = rotate(phi, stepper.arms_body[contact]);

        // Angle derivative of the total wrench at the solution.
        let psi_phi = Vector3::new(
            asm.kda.x * w_new,
            asm.kda.y * w_new,
            -asm.a_dot_f + w_new * asm.cross_a_da - a_ct.dot(&force),
        );

        // Per-cell direction terms at the solution velocity.
        let (s_phi, c_phi) = phi.sin_cos();
        let eps2 = stepper.eps_v * stepper.eps_v;
        let mut arm_w = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        for j in 0..n {
            let ab = stepper.arms_body[j];
            let a = Vector2::new(c_phi * ab.x - s_phi * ab.y, s_phi * ab.x + c_phi * ab.y);
            let v = u_new.xy() + perp(a) * w_new;
            let s = (v.norm_squared() + eps2).sqrt();
            arm_w.push(a);
            sigma.push(v / s);
        }
        let applied_plus_fric = asm.f_tot + force;

        for p in 0..np {
            let du_p = sens.du[p];
            let mut rhs = Vector3::new(
                stepper.m_total * du_p.x,
                stepper.m_total * du_p.y,
                stepper.inertia * du_p.z,
            );
            rhs += psi_phi * (h * sens.dphi[p]);
            if p < n {
                // mass parameter j = p
                let j = p;
                let own_top = -sigma[j] * (stepper.params.friction[j] * g);
                let delta = -rotate(phi, stepper.arms_body[j] / stepper.m_total);
                let pd = perp(delta);
                let top = own_top - asm.b * pd * w_new;
                let tau = cross2(arm_w[j], own_top) + cross2(delta, applied_plus_fric)
                    - w_new * asm.d.dot(&pd);
                rhs += Vector3::new(top.x, top.y, tau) * h;
                // -dA (u' - u)
                let d_inertia = stepper.obj.cell_width().powi(2) / 6.0
                    + stepper.arms_body[j].norm_squared();
                rhs -= Vector3::new(du_step.x, du_step.y, d_inertia * du_step.z);
            } else {
                // friction parameter j = p - n
                let j = p - n;
                let top = -sigma[j] * (stepper.params.mass[j] * g);
                let tau = cross2(arm_w[j], top);
                rhs += Vector3::new(top.x, top.y, tau) * h;
            }
            let du_new = chol.solve(&rhs);
            sens.dc[p] += du_new.xy() * h;
            sens.dphi[p] += du_new.z * h;
            sens.du[p] = du_new;
        }
        phi_final = phi + w_new * h;
        u_final = u_new;
    }
    let mut out = exit_sens(stepper, phi_final, u_final, &sens);
    if clamped {
        for p in 0..np {
            out.dvel[p] = Vector2::zeros();
            out.dang[p] = 0.0;
        }
    }
    out
}

/// Predicted settled outcome of one push, with optional parameter
/// sensitivities of the final pose.
pub(crate) struct PushPrediction {
    pub body: BodyState,
    pub cells: CellStateVector,
    pub sens: Option<BodySens>,
}

/// Mirror of [`crate::dynamics::execute_push`] (force phase from rest, then
/// `SETTLE_STEPS` zero-force steps), optionally carrying sensitivities.
pub(crate) fn predict_push(
    obj: &GridObject,
    params: &ParamMap,
    cfg: &WorldConfig,
    start: &BodyState,
    action: &PushAction,
    with_sens: bool,
) -> Result<PushPrediction> {
    let stepper = Stepper::new(obj, params, cfg.friction.regularization_speed)?;
    let np = 2 * obj.n();

    let mut body = start.stopped();
    let mut sens = if with_sens { Some(BodySens::zeros(np)) } else { None };

    let phases: Vec<(Vector2<f64>, f64)> = std::iter::once((action.force, action.duration))
        .chain(std::iter::repeat((Vector2::zeros(), cfg.dt)).take(SETTLE_STEPS))
        .collect();
    for (force, duration) in phases {
        let (st, records, clamped) =
            stepper.integrate(&body, force, action.contact_cell, duration, cfg.substeps);
        let next = if clamped {
            if records.is_empty() {
                body.stopped()
            } else {
                stepper.exit(&st).stopped()
            }
        } else {
            stepper.exit(&st)
        };
        if let Some(s) = sens.as_mut() {
            let h = duration / cfg.substeps as f64;
            *s = propagate_step(&stepper, &body, s, &records, force, action.contact_cell, h, clamped);
        }
        body = next;
    }

    Ok(PushPrediction { cells: expand_state(obj, &body), body, sens })
}

/// Loss of one teacher-forced step (predicted settled pose vs the next
/// recorded pose, ADD metric) and, optionally, its gradient with respect to
/// all 2n parameters.
pub(crate) fn push_loss(
    obj: &GridObject,
    params: &ParamMap,
    cfg: &WorldConfig,
    start: &BodyState,
    action: &PushAction,
    target: &CellStateVector,
    with_grad: bool,
) -> Result<(f64, Option<(Vec<f64>, Vec<f64>)>)> {
    let n = obj.n();
    let pred = predict_push(obj, params, cfg, start, action, with_grad)?;

    let mut err = Vec::with_capacity(3 * n);
    let pe = pred.cells.entries();
    let te = target.entries();
    let mut sq = 0.0;
    for i in 0..3 * n {
        let d = if i % 3 == 2 { angle_diff(pe[i], te[i]) } else { pe[i] - te[i] };
        err.push(d);
        sq += d * d;
    }
    let loss = sq.sqrt();
    if !with_grad {
        return Ok((loss, None));
    }

    let sens = pred.sens.as_ref().unwrap();
    let mut mass_grad = vec![0.0; n];
    let mut fric_grad = vec![0.0; n];
    // The norm is not differentiable at zero; at roundoff-level losses the
    // error direction is noise, so the step contributes no gradient.
    if loss > 1e-12 {
        let rot = pred.body.rotation;
        for p in 0..2 * n {
            let dpos = sens.dpos[p];
            let drot = sens.drot[p];
            let mut acc = 0.0;
            for i in 0..n {
                let darm = perp(rotate(rot, obj.rest_offsets()[i])) * drot;
                let dcell = dpos + darm;
                acc += err[3 * i] * dcell.x + err[3 * i + 1] * dcell.y + err[3 * i + 2] * drot;
            }
            let gp = acc / loss;
            if p < n {
                mass_grad[p] = gp;
            } else {
                fric_grad[p - n] = gp;
            }
        }
    }
    Ok((loss, Some((mass_grad, fric_grad))))
}
