//! JSON run configuration and the built-in task suite. All lengths are in
//! meters and all angles in radians.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::collector::CollectConfig;
use crate::error::{Error, GeometryError};
use crate::geometry::{BoardLayout, CrossSection, Pose6, Rgb, Socket, TaskMode, TaskSpec};
use crate::policy::PolicyConfig;
use crate::regressor::TrainConfig;
use crate::seed::mix;
use crate::sensors::CameraModel;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeDef {
    Square { side: f64 },
    Rectangle { width: f64, height: f64 },
    Circle { radius: f64, segments: usize },
    Triangle { side: f64 },
    Plug { width: f64, height: f64, bar: f64, stem: f64 },
    Polygon { vertices: Vec<[f64; 2]> },
}

impl ShapeDef {
    pub fn build(&self) -> Result<CrossSection, GeometryError> {
        let positive = |vals: &[f64]| {
            if vals.iter().all(|v| *v > 0.0 && v.is_finite()) {
                Ok(())
            } else {
                Err(GeometryError::Invalid("shape dimensions must be positive".into()))
            }
        };
        Ok(match *self {
            ShapeDef::Square { side } => {
                positive(&[side])?;
                CrossSection::square(side)
            }
            ShapeDef::Rectangle { width, height } => {
                positive(&[width, height])?;
                CrossSection::rectangle(width, height)
            }
            ShapeDef::Circle { radius, segments } => {
                positive(&[radius])?;
                if segments < 3 {
                    return Err(GeometryError::Invalid("circle needs at least 3 segments".into()));
                }
                CrossSection::circle(radius, segments)
            }
            ShapeDef::Triangle { side } => {
                positive(&[side])?;
                CrossSection::triangle(side)
            }
            ShapeDef::Plug { width, height, bar, stem } => {
                positive(&[width, height, bar, stem])?;
                if !(stem < width && bar < height) {
                    return Err(GeometryError::Invalid("plug stem and bar must be inside the outline".into()));
                }
                CrossSection::plug(width, height, bar, stem)
            }
            ShapeDef::Polygon { ref vertices } => {
                CrossSection::new(vertices.iter().map(|v| nalgebra::Vector2::new(v[0], v[1])).collect())?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub id: String,
    pub mode: TaskMode,
    /// The gripped peg for insertion, the fixed shaft for threading.
    pub shape: ShapeDef,
    pub clearance: f64,
    pub depth: f64,
    pub peg_color: Rgb,
    pub socket_color: Rgb,
    pub board_color: Rgb,
    pub friction_mu: f64,
    pub peg_height: f64,
}

impl TaskDef {
    pub fn build(&self) -> Result<TaskSpec, GeometryError> {
        TaskSpec::from_profile(
            self.id.clone(),
            self.mode,
            self.shape.build()?,
            self.clearance,
            self.depth,
            [self.peg_color, self.socket_color, self.board_color],
            self.friction_mu,
            self.peg_height,
        )
    }
}

const BOARD: Rgb = [0.7, 0.7, 0.6];
const SOCKET: Rgb = [0.05, 0.05, 0.05];

fn task(id: String, mode: TaskMode, shape: ShapeDef, clearance: f64, peg_color: Rgb) -> TaskDef {
    TaskDef {
        id,
        mode,
        shape,
        clearance,
        depth: 0.005,
        peg_color,
        socket_color: SOCKET,
        board_color: BOARD,
        friction_mu: 0.3,
        peg_height: 0.003,
    }
}

/// Four insertion profiles at 0.3 mm and 1 mm clearance, plus two threading
/// tasks.
pub fn builtin_tasks() -> Vec<TaskDef> {
    let shapes: [(&str, ShapeDef, Rgb); 4] = [
        ("square", ShapeDef::Square { side: 0.012 }, [0.8, 0.2, 0.2]),
        ("circle", ShapeDef::Circle { radius: 0.006, segments: 32 }, [0.2, 0.3, 0.8]),
        ("triangle", ShapeDef::Triangle { side: 0.014 }, [0.2, 0.7, 0.3]),
        (
            "plug",
            ShapeDef::Plug { width: 0.014, height: 0.012, bar: 0.004, stem: 0.006 },
            [0.9, 0.6, 0.1],
        ),
    ];
    let mut out = Vec::new();
    for (name, shape, color) in shapes {
        for (suffix, c) in [("1mm", 0.001), ("0.3mm", 0.0003)] {
            out.push(task(format!("{name}_{suffix}"), TaskMode::Insertion, shape.clone(), c, color));
        }
    }
    out.push(task(
        "thread_square_1mm".into(),
        TaskMode::Threading,
        ShapeDef::Square { side: 0.01 },
        0.001,
        [0.6, 0.3, 0.7],
    ));
    out.push(task(
        "thread_circle_1mm".into(),
        TaskMode::Threading,
        ShapeDef::Circle { radius: 0.005, segments: 32 },
        0.001,
        [0.3, 0.7, 0.7],
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub trials: usize,
    /// Error box half-widths (m, rad).
    pub b0: f64,
    pub c0: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 200,
            b0: 0.01,
            c0: 10f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveConfig {
    pub sizes: Vec<usize>,
    pub trials: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            sizes: vec![10, 15, 20, 25, 30, 50, 100, 200],
            trials: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneralizeConfig {
    pub trials: usize,
    /// Board placements tested against the trained one.
    pub board_poses: Vec<Pose6>,
    pub recolor: Rgb,
    /// Peg stretch along its own x and y for the shape condition.
    pub shape_scale: [f64; 2],
}

impl Default for GeneralizeConfig {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        GeneralizeConfig {
            trials: 50,
            board_poses: vec![
                Pose6::planar(0.2, 0.15, 30.0 * deg),
                Pose6::planar(-0.2, 0.15, 120.0 * deg),
                Pose6::planar(-0.2, -0.15, -150.0 * deg),
                Pose6::planar(0.2, -0.15, -45.0 * deg),
            ],
            recolor: [0.2, 0.7, 0.3],
            shape_scale: [0.95, 1.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub source: String,
    pub target: String,
    pub ks: Vec<usize>,
    pub scratch_sizes: Vec<usize>,
    pub trials: usize,
    /// Optimizer steps for fine-tuning; 0 uses the training default.
    pub finetune_steps: usize,
    /// Fine-tune on the source data plus the new samples, the new samples
    /// repeated until they make up about half of it.
    pub rehearsal: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            source: "square_1mm".into(),
            target: "plug_1mm".into(),
            ks: vec![0, 5, 10, 15, 20],
            scratch_sizes: vec![5, 10, 15, 20, 25, 30, 40, 50],
            trials: 50,
            finetune_steps: 2000,
            rehearsal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocketDef {
    pub task: String,
    pub offset: Pose6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    pub sockets: Vec<SocketDef>,
    /// Where the board is expected; the reference view is taken here.
    pub nominal_pose: Pose6,
    /// Half-widths of the random board displacement (m, rad).
    pub offset_xy: f64,
    pub offset_theta: f64,
    /// Fixed displacement used instead of a random one.
    pub fixed_offset: Option<Pose6>,
    /// Camera height above the board for localization.
    pub camera_height: f64,
    pub max_iters: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            sockets: vec![
                SocketDef { task: "square_1mm".into(), offset: Pose6::planar(-0.04, 0.0, 0.0) },
                SocketDef { task: "circle_1mm".into(), offset: Pose6::planar(0.0, 0.02, 0.0) },
                SocketDef { task: "plug_1mm".into(), offset: Pose6::planar(0.04, 0.0, 0.0) },
            ],
            nominal_pose: Pose6::IDENTITY,
            offset_xy: 0.01,
            offset_theta: 5f64.to_radians(),
            fixed_offset: None,
            camera_height: 0.1,
            max_iters: 10,
        }
    }
}

/// Everything a benchmark command needs. `seed` is mixed into every
/// per-module seed, so changing it alone reruns the whole pipeline with
/// fresh randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seed: u64,
    /// Task used by collect, train, eval, curve and generalize.
    pub task: String,
    pub tasks: Vec<TaskDef>,
    pub board_pose: Pose6,
    pub camera: CameraModel,
    pub localization_camera: CameraModel,
    pub sim: SimConfig,
    pub collect: CollectConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    pub curve: CurveConfig,
    pub generalize: GeneralizeConfig,
    pub transfer: TransferConfig,
    pub assembly: AssemblyConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 0,
            task: "square_1mm".into(),
            tasks: builtin_tasks(),
            board_pose: Pose6::IDENTITY,
            camera: CameraModel::wrist(),
            localization_camera: CameraModel::localization(),
            sim: SimConfig::default(),
            collect: CollectConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
            curve: CurveConfig::default(),
            generalize: GeneralizeConfig::default(),
            transfer: TransferConfig::default(),
            assembly: AssemblyConfig::default(),
        }
    }
}

fn as_config<E: Into<Error>>(r: Result<(), E>) -> Result<(), Error> {
    r.map_err(|e| Error::Config(e.into().to_string()))
}

// stream ids for seed derivation
pub(crate) const STREAM_COLLECT: u64 = 1;
pub(crate) const STREAM_TRAIN: u64 = 2;
pub(crate) const STREAM_AUGMENT: u64 = 3;
pub(crate) const STREAM_SIM: u64 = 4;
pub(crate) const STREAM_EVAL: u64 = 5;
pub(crate) const STREAM_BOARD: u64 = 6;

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let cfg: BenchConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let mut ids = std::collections::HashSet::new();
        for t in &self.tasks {
            if !ids.insert(t.id.as_str()) {
                return Err(Error::Config(format!("duplicate task id {}", t.id)));
            }
            t.build()?;
        }
        self.task_spec(&self.task)?;
        as_config(self.camera.validate())?;
        as_config(self.localization_camera.validate())?;
        as_config(self.sim.validate())?;
        as_config(self.collect.validate())?;
        as_config(self.augment.validate())?;
        as_config(self.train.validate())?;
        as_config(self.policy.validate())?;
        if !(self.eval.b0 >= 0.0 && self.eval.c0 >= 0.0) {
            return Err(Error::Config("eval box must be non-negative".into()));
        }
        for s in &self.assembly.sockets {
            self.task_spec(&s.task)?;
        }
        self.task_spec(&self.transfer.source)?;
        self.task_spec(&self.transfer.target)?;
        if self.generalize.shape_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("shape_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn task_spec(&self, id: &str) -> Result<TaskSpec, Error> {
        let def = self
            .tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Config(format!("unknown task {id}")))?;
        Ok(def.build()?)
    }

    /// Single-socket board for `id` at `board_pose`.
    pub fn board(&self, id: &str) -> Result<BoardLayout, Error> {
        Ok(BoardLayout::single(self.task_spec(id)?).with_pose(self.board_pose))
    }

    pub fn assembly_board(&self, board_pose: Pose6) -> Result<BoardLayout, Error> {
        let sockets = self
            .assembly
            .sockets
            .iter()
            .map(|s| {
                Ok(Socket {
                    task: self.task_spec(&s.task)?,
                    offset: s.offset,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(BoardLayout::new(board_pose, sockets)?)
    }

    pub(crate) fn stream(&self, stream: u64, module_seed: u64) -> u64 {
        mix(mix(self.seed, stream), module_seed)
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            rng_seed: self.stream(STREAM_COLLECT, self.collect.rng_seed),
            ..self.collect.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rng_seed: self.stream(STREAM_TRAIN, self.train.rng_seed),
            ..self.train.clone()
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            rng_seed: self.stream(STREAM_AUGMENT, self.augment.rng_seed),
            ..self.augment.clone()
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            rng_seed: self.stream(STREAM_SIM, self.sim.rng_seed),
            ..self.sim.clone()
        }
    }

    pub fn eval_seed(&self) -> u64 {
        self.stream(STREAM_EVAL, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_suite_builds() {
        let tasks = builtin_tasks();
        assert_eq!(tasks.len(), 10);
        assert_eq!(tasks.iter().filter(|t| t.mode == TaskMode::Threading).count(), 2);
        for t in &tasks {
            let spec = t.build().unwrap();
            assert!((spec.clearance - t.clearance).abs() < 1e-6, "{}", t.id);
        }
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = BenchConfig::default();
        let back = BenchConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial = BenchConfig::from_json(r#"{"seed": 7, "collect": {"n_p": 3}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.collect.n_p, 3);
        assert_eq!(partial.collect.b0, 0.01);
        assert_eq!(partial.tasks.len(), 10);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(BenchConfig::from_json("{"), Err(Error::Config(_))));
        assert!(matches!(BenchConfig::from_json(r#"{"task": "nope"}"#), Err(Error::Config(_))));
        let e = BenchConfig::from_json(r#"{"sim": {"dt": -1.0}}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn seeds_depend_on_the_top_level_seed() {
        let a = BenchConfig::default();
        let b = BenchConfig { seed: 1, ..a.clone() };
        assert_ne!(a.collect_config().rng_seed, b.collect_config().rng_seed);
        assert_ne!(a.train_config().rng_seed, a.collect_config().rng_seed);
    }

    #[test]
    fn assembly_board_has_three_sockets() {
        let b = BenchConfig::default().assembly_board(Pose6::IDENTITY).unwrap();
        assert_eq!(b.sockets.len(), 3);
    }
}
