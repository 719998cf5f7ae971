//! Closed-loop execution: base approach, residual corrections after the first
//! delicate collision, force compliance along the approach axis.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collector::sample_target;
use crate::error::{Error, SimError};
use crate::geometry::{BoardLayout, CorrectiveAction, Pose6};
use crate::regressor::{ModelParams, Predictor};
use crate::seed::{rng_for, SimRng};
use crate::sensors::{render_tilted, CameraModel, WrenchReading, CAPTURE_BAND};
use crate::sim::{is_inserted, placement, sample_grasp, RobotState, SimConfig, Simulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Trial timeout (s).
    pub t_f: f64,
    /// Contact force the compliance term regulates to (N).
    pub f_desired: f64,
    /// Compliance gain (m/N).
    pub compliance_c: f64,
    pub f_th: f64,
    pub m_th: f64,
    pub command_duration: f64,
    /// Start height above the target (m).
    pub approach_height: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            t_f: 10.0,
            f_desired: 5.0,
            compliance_c: 2e-4,
            f_th: 3.0,
            m_th: 0.3,
            command_duration: 0.4,
            approach_height: 0.02,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let vals = [
            self.t_f,
            self.compliance_c,
            self.f_th,
            self.m_th,
            self.command_duration,
            self.approach_height,
        ];
        if vals.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.f_desired >= 0.0) {
            return Err(SimError::InvalidConfig("policy values must be positive".into()));
        }
        Ok(())
    }

    /// Compliance step along the approach axis: negative (press down) while
    /// the contact force is below `f_desired`.
    pub fn compliance_dz(&self, f_z: f64) -> f64 {
        -self.compliance_c * (self.f_desired - f_z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Base,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub success: bool,
    /// Simulated seconds until success or timeout.
    pub duration: f64,
    /// Residual commands issued.
    pub n_commands: usize,
    pub residual_activated: bool,
    /// End-effector pose at the end, board frame.
    pub final_pose: Pose6,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub pose: Pose6,
    pub wrench: WrenchReading,
    pub mode: Mode,
}

/// One trial on socket `active`; `target` is the (erroneous) end-effector
/// target in the board frame. The grasp offset and sensor noise come from
/// `rng`.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    board: &BoardLayout,
    active: usize,
    target: &Pose6,
    policy: &mut Predictor,
    camera: &CameraModel,
    cfg: &PolicyConfig,
    sim_cfg: &SimConfig,
    rng: &mut SimRng,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<TrialResult, Error> {
    cfg.validate()?;
    sim_cfg.validate()?;
    let socket = &board.sockets[active];
    let grasp = sample_grasp(sim_cfg, rng);
    let mut sim = Simulator::new(sim_cfg.clone(), SimRng::seed_from_u64(rng.random()));
    let start = Pose6 {
        z: target.z + cfg.approach_height,
        ..*target
    };
    let mut state = RobotState::at(start, grasp);
    let mut measured = WrenchReading::ZERO;
    let mut mode = Mode::Base;
    let mut n_commands = 0;
    let ticks = ((cfg.command_duration / sim_cfg.dt).round() as usize).max(1);
    let result = |state: &RobotState, success, mode, n_commands| TrialResult {
        success,
        duration: state.sim_time,
        n_commands,
        residual_activated: mode == Mode::Residual,
        final_pose: state.eef_pose,
    };
    loop {
        let goal = match mode {
            Mode::Base => *target,
            Mode::Residual => {
                n_commands += 1;
                let tip = placement(socket, &state).tip_z;
                // the network only knows collisions with the surface around the
                // opening; wall contact inside the opening gets compliance only
                let delta = if measured.f[2] >= cfg.f_th && tip.abs() < CAPTURE_BAND {
                    let image = render_tilted(camera, board, active, &state)?;
                    policy.predict(&image, &measured)?
                } else {
                    CorrectiveAction::ZERO
                };
                delta.apply_to(&state.eef_pose, cfg.compliance_dz(measured.f[2]))
            }
        };
        for _ in 0..ticks {
            let tick = sim.tick(&state, &goal, socket)?;
            state = tick.state;
            measured = tick.measured;
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceRow {
                    t: state.sim_time,
                    pose: state.eef_pose,
                    wrench: measured,
                    mode,
                });
            }
            if is_inserted(socket, &state) {
                return Ok(result(&state, state.sim_time <= cfg.t_f, mode, n_commands));
            }
            if state.sim_time > cfg.t_f {
                return Ok(result(&state, false, mode, n_commands));
            }
            if mode == Mode::Base && measured.exceeds(cfg.f_th, cfg.m_th) {
                // latch: every later command is residual
                mode = Mode::Residual;
                break;
            }
        }
    }
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> std::io::Result<()> {
    let mut out = Vec::new();
    writeln!(out, "t,x,y,z,theta_x,theta_y,theta_z,fx,fy,fz,mx,my,mz,mode")?;
    for r in rows {
        let p = r.pose.to_array();
        let w = r.wrench.to_array();
        write!(out, "{:.4}", r.t)?;
        for v in p.iter().chain(&w) {
            write!(out, ",{v:.9}")?;
        }
        writeln!(out, ",{}", if r.mode == Mode::Base { "base" } else { "residual" })?;
    }
    std::fs::write(path, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub success_rate: f64,
    /// Mean over all trials; failures count with their timeout duration.
    pub mean_duration: f64,
    pub trials: Vec<TrialResult>,
}

/// `n_test` trials with targets drawn uniformly from the error box around the
/// goal. The box is laid out in world axes and mapped onto the board, so a
/// rotated board sees a rotated box. Trial `i` uses seed `mix(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    board: &BoardLayout,
    active: usize,
    params: &ModelParams,
    n_test: usize,
    error_box: (f64, f64),
    camera: &CameraModel,
    cfg: &PolicyConfig,
    sim_cfg: &SimConfig,
    seed: u64,
) -> Result<EvalSummary, Error> {
    if n_test == 0 {
        return Err(Error::Config("n_test must be at least 1".into()));
    }
    if active >= board.sockets.len() {
        return Err(Error::Config(format!("no socket {active}")));
    }
    let goal_world = board.goal_in_world(active);
    let trials: Vec<Result<TrialResult, Error>> = (0..n_test)
        .into_par_iter()
        .map_init(
            || Predictor::new(params.clone()),
            |policy, i| {
                let mut rng = rng_for(seed, i as u64);
                let world = sample_target(&goal_world, error_box.0, error_box.1, &mut rng);
                let target = board.board_pose.relative(&world);
                run_trial(board, active, &target, policy, camera, cfg, sim_cfg, &mut rng, None)
            },
        )
        .collect();
    let trials = trials.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = trials.len() as f64;
    Ok(EvalSummary {
        success_rate: trials.iter().filter(|t| t.success).count() as f64 / n,
        mean_duration: trials.iter().map(|t| t.duration).sum::<f64>() / n,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CrossSection, TaskMode, TaskSpec};
    use crate::regressor::{default_label_scale, Arch};

    fn board() -> BoardLayout {
        BoardLayout::single(
            TaskSpec::from_profile(
                "square_1mm",
                TaskMode::Insertion,
                CrossSection::square(0.012),
                0.001,
                0.005,
                [[0.8, 0.2, 0.2], [0.05, 0.05, 0.05], [0.7, 0.7, 0.6]],
                0.3,
                0.003,
            )
            .unwrap(),
        )
    }

    fn zero_policy() -> ModelParams {
        ModelParams::init(Arch::DEFAULT, default_label_scale(), [10.0, 1.0], 0, true)
    }

    #[test]
    fn compliance_sign() {
        let c = PolicyConfig::default();
        assert!(c.compliance_dz(0.0) < 0.0);
        assert!(c.compliance_dz(8.0) > 0.0);
        assert_eq!(c.compliance_dz(5.0), 0.0);
        assert!((c.compliance_dz(0.0) + 1e-3).abs() < 1e-15);
    }

    #[test]
    fn aligned_target_succeeds_without_residual() {
        let b = board();
        let sim = SimConfig { grasp_error: Pose6::IDENTITY, ..Default::default() };
        let mut p = Predictor::new(zero_policy());
        let mut rng = rng_for(1, 0);
        let mut trace = Vec::new();
        let r = run_trial(&b, 0, &b.goal_in_board(0), &mut p, &CameraModel::wrist(), &PolicyConfig::default(), &sim, &mut rng, Some(&mut trace))
            .unwrap();
        assert!(r.success && !r.residual_activated);
        assert!(r.duration <= 10.0);
        assert!(trace.iter().all(|t| t.mode == Mode::Base));
    }

    #[test]
    fn zero_policy_cannot_fix_offset() {
        let b = board();
        let mut p = Predictor::new(zero_policy());
        let mut rng = rng_for(2, 0);
        let target = b.goal_in_board(0).offset_by(&Pose6::from_translation(0.005, 0.0, 0.0));
        let cfg = PolicyConfig::default();
        let mut trace = Vec::new();
        let r = run_trial(&b, 0, &target, &mut p, &CameraModel::wrist(), &cfg, &SimConfig::default(), &mut rng, Some(&mut trace))
            .unwrap();
        assert!(!r.success && r.residual_activated);
        assert!(r.duration > cfg.t_f && r.duration <= cfg.t_f + cfg.command_duration);
        // mode latches
        let first = trace.iter().position(|t| t.mode == Mode::Residual).unwrap();
        assert!(trace[first..].iter().all(|t| t.mode == Mode::Residual));
        let dir = tempfile::tempdir().unwrap();
        write_trace_csv(&trace, &dir.path().join("t.csv")).unwrap();
    }

    #[test]
    fn zero_box_always_succeeds_and_is_deterministic() {
        let b = board();
        let p = zero_policy();
        let run = || {
            evaluate(&b, 0, &p, 6, (0.0, 0.0), &CameraModel::wrist(), &PolicyConfig::default(), &SimConfig::default(), 4)
                .unwrap()
        };
        let a = run();
        assert_eq!(a.success_rate, 1.0);
        assert_eq!(a, run());
    }
}
