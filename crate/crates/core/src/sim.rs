//! Quasi-static robot and contact simulation.
//!
//! The end effector tracks a target under first-order PD dynamics with
//! velocity clamps. After every tick the pose is resolved against the contact
//! constraints of one socket: the peg tip rests on the board with a penalty
//! spring, an inserted peg is held by the hole walls and the hole bottom.
//! Poses are expressed in the board frame, so the whole kernel is
//! independent of where the board sits in the world.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::geometry::{contact_patch, wrap_angle, Pose6, Socket, TaskSpec, Vec2, CONTACT_EPS};
use crate::seed::SimRng;
use crate::sensors::WrenchReading;

/// Grasp slippage bounds (peg frame relative to the gripper).
pub const GRASP_MAX_SHIFT: f64 = 0.002;
pub const GRASP_MAX_ANGLE: f64 = 3.0 * std::f64::consts::PI / 180.0;

/// Depth below which the tip must stay out of the hole bottom.
const Z_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    /// End-effector pose in the board frame.
    pub eef_pose: Pose6,
    /// Peg frame relative to the end effector.
    pub grasp_offset: Pose6,
    pub in_contact: bool,
    pub sim_time: f64,
}

impl RobotState {
    pub fn at(eef_pose: Pose6, grasp_offset: Pose6) -> Self {
        RobotState {
            eef_pose,
            grasp_offset,
            in_contact: false,
            sim_time: 0.0,
        }
    }

    pub fn peg_pose(&self) -> Pose6 {
        self.eef_pose.compose(&self.grasp_offset)
    }

    pub fn grasp_within_bounds(&self) -> bool {
        let g = &self.grasp_offset;
        g.x.abs() <= GRASP_MAX_SHIFT + 1e-15
            && g.y.abs() <= GRASP_MAX_SHIFT + 1e-15
            && [g.theta_x, g.theta_y, g.theta_z]
                .iter()
                .all(|a| a.abs() <= GRASP_MAX_ANGLE + 1e-15)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub k_normal: f64,
    pub k_lateral: f64,
    pub pd_gain: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub dt: f64,
    pub command_duration: f64,
    pub slip_moment_threshold: f64,
    pub slip_step: Pose6,
    /// Drive limit of the arm along the approach axis.
    pub max_normal_force: f64,
    /// Largest force the arm exerts sideways against a wall.
    pub max_lateral_force: f64,
    /// Half-widths of the uniform grasp error drawn at the start of each approach.
    pub grasp_error: Pose6,
    pub force_noise_std: f64,
    pub moment_noise_std: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        SimConfig {
            k_normal: 5000.0,
            k_lateral: 2000.0,
            pd_gain: 8.0,
            v_max: 0.05,
            omega_max: 1.0,
            dt: 0.01,
            command_duration: 0.4,
            slip_moment_threshold: 0.5,
            slip_step: Pose6::new(1e-4, 1e-4, 0.0, 0.2 * deg, 0.2 * deg, 0.2 * deg),
            max_normal_force: 10.0,
            max_lateral_force: 100.0,
            grasp_error: Pose6::new(2e-4, 2e-4, 0.0, 0.5 * deg, 0.5 * deg, 0.5 * deg),
            force_noise_std: 0.02,
            moment_noise_std: 5e-4,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("k_normal", self.k_normal),
            ("k_lateral", self.k_lateral),
            ("pd_gain", self.pd_gain),
            ("v_max", self.v_max),
            ("omega_max", self.omega_max),
            ("dt", self.dt),
            ("command_duration", self.command_duration),
            ("max_normal_force", self.max_normal_force),
            ("max_lateral_force", self.max_lateral_force),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SimError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let ratio = self.command_duration / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(SimError::InvalidConfig(
                "command_duration must be a multiple of dt".into(),
            ));
        }
        if self.force_noise_std < 0.0 || self.moment_noise_std < 0.0 {
            return Err(SimError::InvalidConfig("noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn ticks_per_command(&self) -> usize {
        (self.command_duration / self.dt).round() as usize
    }

    /// Largest surface penetration the arm can produce.
    pub fn max_penetration(&self) -> f64 {
        self.max_normal_force / self.k_normal
    }
}

/// Peg configuration relative to a socket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PegPlacement {
    pub offset: Vec2,
    pub theta_z: f64,
    pub tip_z: f64,
    /// Angle between the peg axis and the socket normal.
    pub tilt: f64,
    /// Shift of the contact centroid toward the low edge, socket frame.
    pub tilt_shift: Vec2,
}

pub fn placement(socket: &Socket, state: &RobotState) -> PegPlacement {
    let rel = socket.offset.relative(&state.peg_pose());
    let axis = rel.rotation() * Vector3::z();
    let h = socket.task.peg_height;
    let tilt_shift = if axis.z > 1e-9 {
        Vec2::new(h * axis.x / axis.z, h * axis.y / axis.z)
    } else {
        Vec2::zeros()
    };
    PegPlacement {
        offset: Vec2::new(rel.x, rel.y),
        theta_z: rel.theta_z,
        tip_z: rel.z,
        tilt: axis.z.clamp(-1.0, 1.0).acos(),
        tilt_shift,
    }
}

/// Containment with the clearance reduced by `peg_height·|sin tilt|`.
pub fn contained_with_tilt(task: &TaskSpec, p: &PegPlacement) -> bool {
    let needed = task.peg_height * p.tilt.sin().abs() + CONTACT_EPS;
    task.boundary_margin(p.offset, p.theta_z)
        .is_some_and(|m| m > needed)
}

fn in_hole(socket: &Socket, state: &RobotState) -> bool {
    let p = placement(socket, state);
    p.tip_z < 0.0 && contained_with_tilt(&socket.task, &p)
}

/// Rotates a socket-frame vector into the end-effector frame.
fn socket_to_eef(socket: &Socket, state: &RobotState, v: Vector3<f64>) -> Vector3<f64> {
    let q = state.eef_pose.rotation().inverse() * socket.offset.rotation();
    q * v
}

/// Surface contact wrench in the end-effector frame. The normal force is a
/// penalty spring; the moment arm is the patch centroid relative to the peg
/// axis, shifted toward the low edge when the peg is tilted.
pub fn compute_wrench(socket: &Socket, state: &RobotState, penetration: f64, cfg: &SimConfig) -> WrenchReading {
    if !(penetration > 0.0) {
        return WrenchReading::ZERO;
    }
    let task = &socket.task;
    let p = placement(socket, state);
    if contained_with_tilt(task, &p) {
        return WrenchReading::ZERO;
    }
    let patch = contact_patch(task, p.offset, p.theta_z);
    let (s, c) = p.theta_z.sin_cos();
    let shift = Vec2::new(c * p.tilt_shift.x + s * p.tilt_shift.y, -s * p.tilt_shift.x + c * p.tilt_shift.y);
    let r_peg = patch.centroid + shift;
    let g = state.grasp_offset.rotation();
    let r = g * Vector3::new(r_peg.x, r_peg.y, 0.0);
    let f = socket_to_eef(socket, state, Vector3::new(0.0, 0.0, cfg.k_normal * penetration));
    WrenchReading::from_vectors(f, r.cross(&f))
}

fn pd_step(current: &Pose6, target: &Pose6, cfg: &SimConfig) -> Pose6 {
    let mut v = (target.position() - current.position()) * cfg.pd_gain;
    let speed = v.norm();
    if speed > cfg.v_max {
        v *= cfg.v_max / speed;
    }
    let mut w = Vector3::new(
        wrap_angle(target.theta_x - current.theta_x),
        wrap_angle(target.theta_y - current.theta_y),
        wrap_angle(target.theta_z - current.theta_z),
    ) * cfg.pd_gain;
    let rate = w.norm();
    if rate > cfg.omega_max {
        w *= cfg.omega_max / rate;
    }
    Pose6::new(
        current.x + v.x * cfg.dt,
        current.y + v.y * cfg.dt,
        current.z + v.z * cfg.dt,
        current.theta_x + w.x * cfg.dt,
        current.theta_y + w.y * cfg.dt,
        current.theta_z + w.z * cfg.dt,
    )
}

/// Moves the end effector along the socket normal by `dz` (socket frame).
fn lift(socket: &Socket, pose: &Pose6, dz: f64) -> Pose6 {
    let n = socket.offset.rotation() * Vector3::z() * dz;
    Pose6 {
        x: pose.x + n.x,
        y: pose.y + n.y,
        z: pose.z + n.z,
        ..*pose
    }
}

/// Advances one tick toward `target` and resolves contact with `socket`.
pub fn step_towards(
    state: &RobotState,
    target: &Pose6,
    socket: &Socket,
    cfg: &SimConfig,
) -> Result<(RobotState, WrenchReading), SimError> {
    let task = &socket.task;
    let was_in_hole = in_hole(socket, state);
    let mut next = RobotState {
        eef_pose: pd_step(&state.eef_pose, target, cfg),
        sim_time: state.sim_time + cfg.dt,
        ..*state
    };
    if !next.eef_pose.is_finite() {
        return Err(SimError::NonFiniteState);
    }
    let p = placement(socket, &next);
    let bottom = task.goal_pose.z;
    let wrench;
    if p.tip_z >= 0.0 {
        wrench = WrenchReading::ZERO;
    } else if contained_with_tilt(task, &p) || was_in_hole {
        let mut f_socket = Vector3::zeros();
        if !contained_with_tilt(task, &p) {
            // wall contact: lateral and rotational motion blocked
            let prev = state.eef_pose;
            let push_board = Vector3::new(target.x - prev.x, target.y - prev.y, 0.0);
            let push = socket.offset.rotation().inverse() * push_board;
            let mut f_lat = Vector2::new(push.x, push.y) * (-cfg.k_lateral);
            if f_lat.norm() > cfg.max_lateral_force {
                f_lat *= cfg.max_lateral_force / f_lat.norm();
            }
            let friction = (task.friction_mu * f_lat.norm()).min(cfg.max_normal_force);
            let descending = next.eef_pose.z < prev.z;
            let z = if descending && friction >= cfg.max_normal_force {
                prev.z // jammed
            } else {
                next.eef_pose.z
            };
            next.eef_pose = Pose6 { z, ..prev };
            f_socket.x = f_lat.x;
            f_socket.y = f_lat.y;
            if descending {
                f_socket.z = friction;
            }
        }
        let p = placement(socket, &next);
        if p.tip_z < bottom - Z_EPS {
            let pen = (bottom - p.tip_z).min(cfg.max_penetration());
            next.eef_pose = lift(socket, &next.eef_pose, (bottom - p.tip_z) - pen);
            f_socket.z += cfg.k_normal * pen;
        }
        wrench = if f_socket == Vector3::zeros() {
            WrenchReading::ZERO
        } else {
            WrenchReading::from_vectors(socket_to_eef(socket, &next, f_socket), Vector3::zeros())
        };
    } else {
        let pen = -p.tip_z;
        let pen_max = cfg.max_penetration();
        if pen > pen_max {
            next.eef_pose = lift(socket, &next.eef_pose, pen - pen_max);
        }
        wrench = compute_wrench(socket, &next, pen.min(pen_max), cfg);
    }
    next.in_contact = wrench != WrenchReading::ZERO;
    if !next.eef_pose.is_finite() || !wrench.is_finite() {
        return Err(SimError::NonFiniteState);
    }
    Ok((next, wrench))
}

/// Perturbs the grasp when the contact moment exceeds the slip threshold.
pub fn apply_slippage(state: &RobotState, wrench: &WrenchReading, cfg: &SimConfig, rng: &mut SimRng) -> RobotState {
    if wrench.moment_norm() <= cfg.slip_moment_threshold {
        return *state;
    }
    let s = &cfg.slip_step;
    let mut draw = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let g = state.grasp_offset;
    let lin = |v: f64| v.clamp(-GRASP_MAX_SHIFT, GRASP_MAX_SHIFT);
    let ang = |v: f64| v.clamp(-GRASP_MAX_ANGLE, GRASP_MAX_ANGLE);
    let grasp = Pose6::new(
        lin(g.x + draw(s.x)),
        lin(g.y + draw(s.y)),
        g.z,
        ang(g.theta_x + draw(s.theta_x)),
        ang(g.theta_y + draw(s.theta_y)),
        ang(g.theta_z + draw(s.theta_z)),
    );
    RobotState {
        grasp_offset: grasp,
        ..*state
    }
}

/// Draws a fresh grasp offset inside `cfg.grasp_error` (clamped to the slip bounds).
pub fn sample_grasp(cfg: &SimConfig, rng: &mut SimRng) -> Pose6 {
    let e = &cfg.grasp_error;
    let mut draw = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    Pose6::new(
        draw(e.x).clamp(-GRASP_MAX_SHIFT, GRASP_MAX_SHIFT),
        draw(e.y).clamp(-GRASP_MAX_SHIFT, GRASP_MAX_SHIFT),
        0.0,
        draw(e.theta_x).clamp(-GRASP_MAX_ANGLE, GRASP_MAX_ANGLE),
        draw(e.theta_y).clamp(-GRASP_MAX_ANGLE, GRASP_MAX_ANGLE),
        draw(e.theta_z).clamp(-GRASP_MAX_ANGLE, GRASP_MAX_ANGLE),
    )
}

/// Success predicate: peg below the surface and contained (tilt-reduced
/// clearance), end effector within 1 mm of the goal depth.
pub fn is_inserted(socket: &Socket, state: &RobotState) -> bool {
    let p = placement(socket, state);
    let eef = socket.offset.relative(&state.eef_pose);
    p.tip_z < 0.0 && contained_with_tilt(&socket.task, &p) && eef.z - socket.task.goal_pose.z < 1e-3
}

/// One simulator instance: owns its RNG and applies slippage and sensor
/// noise on top of the pure kernel.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub cfg: SimConfig,
    rng: SimRng,
}

/// Result of one tick.
#[derive(Debug, Clone, Copy)]
pub struct Tick {
    pub state: RobotState,
    pub true_wrench: WrenchReading,
    pub measured: WrenchReading,
}

impl Simulator {
    pub fn new(cfg: SimConfig, rng: SimRng) -> Self {
        Simulator { cfg, rng }
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub fn tick(&mut self, state: &RobotState, target: &Pose6, socket: &Socket) -> Result<Tick, SimError> {
        let (next, wrench) = step_towards(state, target, socket, &self.cfg)?;
        let next = apply_slippage(&next, &wrench, &self.cfg, &mut self.rng);
        let measured = crate::sensors::read_wrench(
            &wrench,
            (self.cfg.force_noise_std, self.cfg.moment_noise_std),
            &mut self.rng,
        );
        Ok(Tick {
            state: next,
            true_wrench: wrench,
            measured,
        })
    }
}
