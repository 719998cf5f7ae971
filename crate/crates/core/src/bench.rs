//! Experiment drivers behind the command-line tool. Each driver returns an
//! [`ExperimentReport`]; conditions that compare policies share the same
//! evaluation seed, so their trials see identical targets and grasps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::augment::AugmentConfig;
use crate::collector::{collect_backward, CollectConfig, Dataset};
use crate::config::{BenchConfig, STREAM_BOARD};
use crate::error::Error;
use crate::geometry::{BoardLayout, Pose6};
use crate::localizer::{localize, register_reference, Localization, RANGE_THETA, RANGE_XY};
use crate::policy::{evaluate, run_trial, EvalSummary};
use crate::regressor::{train, train_from, ModelParams, Predictor, TrainConfig};
use crate::seed::{mix, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub condition: String,
    pub task_id: String,
    /// Training samples behind the policy; `None` for loaded parameters.
    pub n_samples: Option<usize>,
    pub success_rate: f64,
    pub mean_duration: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub rows: Vec<Row>,
    pub config: serde_json::Value,
}

pub const REPORT_HEADER: &str = "experiment,condition,task_id,n_samples,success_rate,mean_duration,seed";

impl ExperimentReport {
    pub fn row(&self, condition: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let n = r.n_samples.map(|n| n.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{}",
                self.experiment, r.condition, r.task_id, n, r.success_rate, r.mean_duration, r.seed
            );
        }
        s
    }

    /// Writes the CSV to `out` and the config snapshot next to it.
    pub fn write(&self, out: &Path) -> Result<(), Error> {
        std::fs::write(out, self.to_csv())?;
        write_snapshot(out, &self.config)
    }
}

/// `<out>.config.json`
pub fn snapshot_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn write_snapshot(out: &Path, snapshot: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(snapshot).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(snapshot_path(out), text + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizeRow {
    pub index: usize,
    pub offset: Pose6,
    /// Largest hole position error (m) and heading error (rad); `None` when
    /// localization failed.
    pub error_xy: Option<f64>,
    pub error_theta: Option<f64>,
    pub iterations: usize,
    pub correlation: f64,
}

pub const LOCALIZE_HEADER: &str = "index,offset_x,offset_y,offset_theta,error_xy,error_theta,iterations,correlation,status";

pub fn localize_csv(rows: &[LocalizeRow]) -> String {
    let mut s = String::from(LOCALIZE_HEADER);
    s.push('\n');
    for r in rows {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.9}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:.9},{},{},{},{:.6},{}",
            r.index,
            r.offset.x,
            r.offset.y,
            r.offset.theta_z,
            opt(r.error_xy),
            opt(r.error_theta),
            r.iterations,
            r.correlation,
            if r.error_xy.is_some() { "ok" } else { "failed" }
        );
    }
    s
}

/// Largest position and heading error over matched holes.
pub fn hole_errors(truth: &[(String, Pose6)], found: &Localization) -> (f64, f64) {
    truth.iter().zip(&found.hole_poses).fold((0.0f64, 0.0f64), |(ex, et), ((_, a), (_, b))| {
        let d = a.relative(b);
        (ex.max(d.x.hypot(d.y)), et.max(d.theta_z.abs()))
    })
}

/// `old` followed by `new` repeated until it is about as large as `old`.
pub fn rehearsal_mix(old: &Dataset, new: &Dataset) -> Result<Dataset, Error> {
    let mut out = old.clone();
    let reps = old.len().div_ceil(new.len().max(1)).max(1);
    for _ in 0..reps {
        out.extend(new)?;
    }
    Ok(out)
}

pub struct Bench {
    pub cfg: BenchConfig,
}

impl Bench {
    pub fn new(cfg: BenchConfig) -> Result<Self, Error> {
        cfg.validate()?;
        Ok(Bench { cfg })
    }

    fn snapshot(&self, experiment: &str) -> serde_json::Value {
        serde_json::json!({ "command": experiment, "config": self.cfg })
    }

    fn report(&self, experiment: &str, rows: Vec<Row>) -> ExperimentReport {
        ExperimentReport {
            experiment: experiment.into(),
            rows,
            config: self.snapshot(experiment),
        }
    }

    /// Backward collection on a single-socket board for `task_id`.
    pub fn collect(&self, task_id: &str) -> Result<Dataset, Error> {
        self.collect_with(task_id, &self.cfg.collect_config())
    }

    fn collect_with(&self, task_id: &str, cc: &CollectConfig) -> Result<Dataset, Error> {
        let board = self.cfg.board(task_id)?;
        Ok(collect_backward(&board, 0, &self.cfg.camera, cc, &self.cfg.sim_config())?)
    }

    /// Collects in rounds until at least `n` samples exist and returns the
    /// first `n`. The first round is the plain `collect`.
    pub fn collect_at_least(&self, task_id: &str, n: usize) -> Result<Dataset, Error> {
        let base = self.cfg.collect_config();
        let mut data = self.collect_with(task_id, &CollectConfig { n_p: base.n_p.max(n), ..base.clone() })?;
        for round in 1..=8u64 {
            if data.len() >= n {
                break;
            }
            let missing = n - data.len();
            let cc = CollectConfig {
                n_p: missing + missing / 4 + 4,
                rng_seed: mix(base.rng_seed, round),
                ..base.clone()
            };
            data.extend(&self.collect_with(task_id, &cc)?)?;
        }
        if data.len() < n {
            return Err(Error::Config(format!("could not collect {n} samples on {task_id}")));
        }
        Ok(data.prefix(n))
    }

    pub fn train(&self, data: &Dataset, augmented: bool) -> Result<ModelParams, Error> {
        let aug = if augmented { self.cfg.augment_config() } else { AugmentConfig::disabled() };
        Ok(train(data, &aug, &self.cfg.train_config())?.0)
    }

    /// Like [`Bench::train`] but also returns the per-step loss.
    pub fn train_with_curve(&self, data: &Dataset) -> Result<(ModelParams, Vec<f64>), Error> {
        Ok(train(data, &self.cfg.augment_config(), &self.cfg.train_config())?)
    }

    pub fn finetune(&self, init: ModelParams, data: &Dataset, salt: u64) -> Result<ModelParams, Error> {
        let base = self.cfg.train_config();
        let steps = match self.cfg.transfer.finetune_steps {
            0 => base.steps,
            s => s,
        };
        let tc = TrainConfig {
            steps,
            rng_seed: mix(base.rng_seed, salt),
            ..base
        };
        Ok(train_from(init, data, &self.cfg.augment_config(), &tc)?.0)
    }

    pub fn evaluate(&self, board: &BoardLayout, params: &ModelParams, trials: usize) -> Result<EvalSummary, Error> {
        evaluate(
            board,
            0,
            params,
            trials,
            (self.cfg.eval.b0, self.cfg.eval.c0),
            &self.cfg.camera,
            &self.cfg.policy,
            &self.cfg.sim_config(),
            self.cfg.eval_seed(),
        )
    }

    fn eval_row(
        &self,
        condition: &str,
        board: &BoardLayout,
        params: &ModelParams,
        n_samples: Option<usize>,
        trials: usize,
    ) -> Result<Row, Error> {
        let s = self.evaluate(board, params, trials)?;
        Ok(Row {
            condition: condition.into(),
            task_id: board.sockets[0].task.task_id.clone(),
            n_samples,
            success_rate: s.success_rate,
            mean_duration: s.mean_duration,
            seed: self.cfg.eval_seed(),
        })
    }

    /// Headline evaluation on the configured task.
    pub fn eval(&self, params: &ModelParams, n_samples: Option<usize>) -> Result<ExperimentReport, Error> {
        let board = self.cfg.board(&self.cfg.task)?;
        let row = self.eval_row("headline", &board, params, n_samples, self.cfg.eval.trials)?;
        Ok(self.report("eval", vec![row]))
    }

    /// One policy per dataset prefix size.
    pub fn curve(&self, data: Option<Dataset>) -> Result<ExperimentReport, Error> {
        let sizes = &self.cfg.curve.sizes;
        let max = sizes.iter().copied().max().unwrap_or(0);
        let data = match data {
            Some(d) if d.len() >= max => d,
            Some(d) => {
                return Err(Error::Config(format!("dataset has {} samples, curve needs {max}", d.len())));
            }
            None => self.collect_at_least(&self.cfg.task, max)?,
        };
        let board = self.cfg.board(&self.cfg.task)?;
        let mut rows = Vec::new();
        for &n in sizes {
            let params = self.train(&data.prefix(n), true)?;
            rows.push(self.eval_row(&format!("n{n}"), &board, &params, Some(n), self.cfg.curve.trials)?);
        }
        Ok(self.report("curve", rows))
    }

    /// Location, color and shape conditions. `params` is the augmented policy
    /// when already trained; the non-augmented one is always trained here.
    pub fn generalize(&self, params: Option<ModelParams>) -> Result<ExperimentReport, Error> {
        let g = &self.cfg.generalize;
        let data = self.collect(&self.cfg.task)?;
        let n = Some(data.len());
        let (aug, n_aug) = match params {
            Some(p) => (p, None),
            None => (self.train(&data, true)?, n),
        };
        let plain = self.train(&data, false)?;
        let board = self.cfg.board(&self.cfg.task)?;
        let task = &board.sockets[0].task;
        let mut rows = vec![
            self.eval_row("trained_pose", &board, &aug, n_aug, g.trials)?,
            self.eval_row("trained_pose_noaug", &board, &plain, n, g.trials)?,
        ];
        for (i, pose) in g.board_poses.iter().enumerate() {
            rows.push(self.eval_row(&format!("pose{}", i + 1), &board.with_pose(*pose), &aug, n_aug, g.trials)?);
        }
        let recolored = BoardLayout::single(task.with_peg_color(g.recolor)).with_pose(board.board_pose);
        rows.push(self.eval_row("recolor_aug", &recolored, &aug, n_aug, g.trials)?);
        rows.push(self.eval_row("recolor_noaug", &recolored, &plain, n, g.trials)?);
        let peg = task.peg.scaled(g.shape_scale[0], g.shape_scale[1])?;
        let reshaped = BoardLayout::single(task.with_peg(peg)?).with_pose(board.board_pose);
        rows.push(self.eval_row("shape", &reshaped, &aug, n_aug, g.trials)?);
        Ok(self.report("generalize", rows))
    }

    /// Fine-tuning a source-task policy versus training from scratch on the
    /// target task.
    pub fn transfer(&self, source: Option<ModelParams>) -> Result<ExperimentReport, Error> {
        let t = &self.cfg.transfer;
        let source_data = self.collect(&t.source)?;
        let source = match source {
            Some(p) => p,
            None => self.train(&source_data, true)?,
        };
        let need = t.ks.iter().chain(&t.scratch_sizes).copied().max().unwrap_or(0);
        let pool = if need > 0 {
            self.collect_at_least(&t.target, need)?
        } else {
            Dataset::new(self.cfg.camera.height, self.cfg.camera.width, self.cfg.camera.channels)
        };
        let board = self.cfg.board(&t.target)?;
        let mut rows = Vec::new();
        for &k in &t.ks {
            let p = if k == 0 {
                source.clone()
            } else {
                let new = pool.prefix(k);
                let data = if t.rehearsal { rehearsal_mix(&source_data, &new)? } else { new };
                self.finetune(source.clone(), &data, k as u64)?
            };
            rows.push(self.eval_row(&format!("finetune_k{k}"), &board, &p, Some(k), t.trials)?);
        }
        for &n in &t.scratch_sizes {
            if n == 0 {
                continue;
            }
            let p = self.train(&pool.prefix(n), true)?;
            rows.push(self.eval_row(&format!("scratch_n{n}"), &board, &p, Some(n), t.trials)?);
        }
        Ok(self.report("transfer", rows))
    }

    /// One policy trained on every task of the assembly board.
    pub fn train_multitask(&self) -> Result<(ModelParams, usize), Error> {
        let mut ids: Vec<&str> = Vec::new();
        for s in &self.cfg.assembly.sockets {
            if !ids.contains(&s.task.as_str()) {
                ids.push(&s.task);
            }
        }
        let c = &self.cfg.camera;
        let mut data = Dataset::new(c.height, c.width, c.channels);
        for id in ids {
            data.extend(&self.collect(id)?)?;
        }
        Ok((self.train(&data, true)?, data.len()))
    }

    /// Board displacement for the assembly run.
    pub fn board_offset(&self) -> Pose6 {
        let a = &self.cfg.assembly;
        a.fixed_offset.unwrap_or_else(|| {
            let mut rng = rng_for(self.cfg.stream(STREAM_BOARD, 0), 0);
            let mut u = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
            let (x, y, t) = (u(a.offset_xy), u(a.offset_xy), u(a.offset_theta));
            Pose6::planar(x, y, t)
        })
    }

    fn camera_pose(&self) -> Pose6 {
        let a = &self.cfg.assembly;
        a.nominal_pose.compose(&Pose6::from_translation(0.0, 0.0, a.camera_height))
    }

    /// Places the board, localizes it, then inserts every plug in order with
    /// one shared policy. Inserted plugs stay in their holes. The last row
    /// (`total`) carries the inserted fraction and the summed duration.
    pub fn assembly(&self, params: Option<ModelParams>) -> Result<ExperimentReport, Error> {
        let a = &self.cfg.assembly;
        if a.sockets.is_empty() {
            return Ok(self.report("assembly", Vec::new()));
        }
        let (params, n) = match params {
            Some(p) => (p, None),
            None => {
                let (p, n) = self.train_multitask()?;
                (p, Some(n))
            }
        };
        let nominal = self.cfg.assembly_board(a.nominal_pose)?;
        let reference = register_reference(&nominal, &self.cfg.localization_camera, &self.camera_pose())?;
        let mut board = nominal.with_pose(a.nominal_pose.compose(&self.board_offset()));
        let found = localize(&reference, &board, &self.cfg.localization_camera, &reference.eef, a.max_iters);
        let seed = self.cfg.eval_seed();
        let mut rows = Vec::new();
        let mut predictor = Predictor::new(params);
        let sim = self.cfg.sim_config();
        for i in 0..board.sockets.len() {
            let task_id = board.sockets[i].task.task_id.clone();
            let (ok, duration) = match &found {
                Ok(loc) => {
                    let hole = loc.hole_poses[i].1;
                    let target = board.board_pose.relative(&hole.compose(&board.sockets[i].task.goal_pose));
                    let mut rng = rng_for(seed, i as u64);
                    let r = run_trial(
                        &board,
                        i,
                        &target,
                        &mut predictor,
                        &self.cfg.camera,
                        &self.cfg.policy,
                        &sim,
                        &mut rng,
                        None,
                    )?;
                    (r.success, r.duration)
                }
                Err(_) => (false, 0.0),
            };
            if ok {
                board.occupied[i] = true;
            }
            rows.push(Row {
                condition: format!("socket{}", i + 1),
                task_id,
                n_samples: n,
                success_rate: if ok { 1.0 } else { 0.0 },
                mean_duration: duration,
                seed,
            });
        }
        let inserted = rows.iter().filter(|r| r.success_rate == 1.0).count();
        let total = rows.iter().map(|r| r.mean_duration).sum();
        rows.push(Row {
            condition: "total".into(),
            task_id: "all".into(),
            n_samples: n,
            success_rate: inserted as f64 / board.sockets.len() as f64,
            mean_duration: total,
            seed,
        });
        Ok(self.report("assembly", rows))
    }

    /// Localizes the assembly board after `n` random displacements drawn
    /// from the full search range.
    pub fn localize_demo(&self, n: usize) -> Result<Vec<LocalizeRow>, Error> {
        let a = &self.cfg.assembly;
        let nominal = self.cfg.assembly_board(a.nominal_pose)?;
        let camera = &self.cfg.localization_camera;
        let reference = register_reference(&nominal, camera, &self.camera_pose())?;
        let mut rng = rng_for(self.cfg.stream(STREAM_BOARD, 1), 0);
        let mut rows = Vec::with_capacity(n);
        for index in 0..n {
            let offset = Pose6::planar(
                rng.random_range(-RANGE_XY..=RANGE_XY),
                rng.random_range(-RANGE_XY..=RANGE_XY),
                rng.random_range(-RANGE_THETA..=RANGE_THETA),
            );
            let board = nominal.with_pose(a.nominal_pose.compose(&offset));
            let truth = crate::localizer::hole_poses(&board);
            rows.push(match localize(&reference, &board, camera, &reference.eef, a.max_iters) {
                Ok(loc) => {
                    let (ex, et) = hole_errors(&truth, &loc);
                    LocalizeRow {
                        index,
                        offset,
                        error_xy: Some(ex),
                        error_theta: Some(et),
                        iterations: loc.iterations,
                        correlation: loc.correlation,
                    }
                }
                Err(crate::error::LocalizeError::LocalizationFailed { best, iterations }) => LocalizeRow {
                    index,
                    offset,
                    error_xy: None,
                    error_theta: None,
                    iterations,
                    correlation: best,
                },
                Err(e) => return Err(e.into()),
            });
        }
        Ok(rows)
    }

    pub fn localize_snapshot(&self) -> serde_json::Value {
        self.snapshot("localize-demo")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::{default_label_scale, Arch};

    fn small() -> BenchConfig {
        let mut cfg = BenchConfig::default();
        cfg.collect.n_p = 4;
        cfg.train.steps = 2;
        cfg.train.batch_size = 2;
        cfg.eval.trials = 3;
        cfg
    }

    #[test]
    fn csv_has_fixed_header_and_one_line_per_row() {
        let r = ExperimentReport {
            experiment: "x".into(),
            rows: vec![Row {
                condition: "a".into(),
                task_id: "t".into(),
                n_samples: None,
                success_rate: 0.5,
                mean_duration: 1.25,
                seed: 9,
            }],
            config: serde_json::Value::Null,
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, [REPORT_HEADER, "x,a,t,,0.500000,1.250000,9"]);
    }

    #[test]
    fn snapshot_path_appends_suffix() {
        assert_eq!(snapshot_path(Path::new("out/c.csv")), PathBuf::from("out/c.csv.config.json"));
    }

    #[test]
    fn empty_assembly_board_gives_no_rows() {
        let mut cfg = small();
        cfg.assembly.sockets.clear();
        let r = Bench::new(cfg).unwrap().assembly(None).unwrap();
        assert!(r.rows.is_empty());
    }

    #[test]
    fn eval_with_zero_policy_is_deterministic() {
        let b = Bench::new(small()).unwrap();
        let p = ModelParams::init(Arch::DEFAULT, default_label_scale(), [10.0, 1.0], 0, true);
        let a = b.eval(&p, None).unwrap();
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a.to_csv(), b.eval(&p, None).unwrap().to_csv());
    }

    #[test]
    fn collect_at_least_tops_up() {
        let b = Bench::new(small()).unwrap();
        let d = b.collect_at_least("square_1mm", 6).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.prefix(2).samples, b.collect("square_1mm").unwrap().prefix(2).samples);
    }

    #[test]
    fn board_offset_respects_limits() {
        let b = Bench::new(small()).unwrap();
        let o = b.board_offset();
        assert!(o.x.abs() <= 0.01 && o.y.abs() <= 0.01 && o.theta_z.abs() <= 5f64.to_radians());
    }
}
