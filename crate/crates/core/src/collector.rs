//! Backward data collection: start from the solved state, perturb the target
//! inside a box around it, descend and record the first delicate collision.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CollectError, FormatError};
use crate::geometry::{BoardLayout, CorrectiveAction, Pose6};
use crate::seed::{rng_for, SimRng};
use crate::sensors::{render_tilted, CameraModel, ImageTensor, WrenchReading, CAPTURE_BAND};
use crate::sim::{is_inserted, placement, sample_grasp, RobotState, SimConfig, Simulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    /// Number of collection trials.
    pub n_p: usize,
    /// Half-width of the position box (m).
    pub b0: f64,
    /// Half-width of the angle box (rad).
    pub c0: f64,
    /// Approach height above the target (m).
    pub z_max: f64,
    pub f_th: f64,
    pub m_th: f64,
    pub rng_seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            n_p: 100,
            b0: 0.01,
            c0: 10f64.to_radians(),
            z_max: 0.05,
            f_th: 3.0,
            m_th: 0.3,
            rng_seed: 0,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<(), CollectError> {
        let checks = [
            ("b0", self.b0),
            ("c0", self.c0),
            ("z_max", self.z_max),
            ("f_th", self.f_th),
            ("m_th", self.m_th),
        ];
        for (name, v) in checks {
            // the degenerate box is allowed, thresholds and height are not
            let ok = if name == "b0" || name == "c0" { v >= 0.0 } else { v > 0.0 };
            if !ok || !v.is_finite() {
                return Err(CollectError::InvalidConfig(format!("{name} out of range")));
            }
        }
        Ok(())
    }
}

fn jitter(rng: &mut SimRng, center: f64, half: f64) -> f64 {
    if half > 0.0 {
        center + rng.random_range(-half..=half)
    } else {
        center
    }
}

/// Random target around `(r0, θ0)`: x and y uniform in `r0 ± b0`, z passed
/// through, every angle uniform in `θ0 ± c0`.
pub fn rdg(r0: [f64; 3], theta0: [f64; 3], b0: f64, c0: f64, rng: &mut SimRng) -> ([f64; 3], [f64; 3]) {
    let r = [jitter(rng, r0[0], b0), jitter(rng, r0[1], b0), r0[2]];
    let t = [
        jitter(rng, theta0[0], c0),
        jitter(rng, theta0[1], c0),
        jitter(rng, theta0[2], c0),
    ];
    (r, t)
}

/// Target pose drawn from the box around `goal`.
pub fn sample_target(goal: &Pose6, b0: f64, c0: f64, rng: &mut SimRng) -> Pose6 {
    let (r, t) = rdg(
        [goal.x, goal.y, goal.z],
        [goal.theta_x, goal.theta_y, goal.theta_z],
        b0,
        c0,
        rng,
    );
    Pose6::new(r[0], r[1], r[2], t[0], t[1], t[2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub wrench: WrenchReading,
    pub label: CorrectiveAction,
    pub task_id: String,
    /// Collection trial that produced the sample. Not stored on disk; reading
    /// a file numbers records in file order.
    pub trial_index: u32,
    /// End-effector pose at capture, board frame.
    pub contact_pose: Pose6,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Dataset {
            height,
            width,
            channels,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Distinct task ids in first-appearance order.
    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for s in &self.samples {
            if !ids.contains(&s.task_id) {
                ids.push(s.task_id.clone());
            }
        }
        ids
    }

    /// First `n` samples.
    pub fn prefix(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples[..n.min(self.len())].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset::new(self.height, self.width, self.channels)
    }

    /// Appends the samples of `other`; dimensions must agree.
    pub fn extend(&mut self, other: &Dataset) -> Result<(), FormatError> {
        if other.dims() != self.dims() {
            return Err(FormatError::Format(format!(
                "cannot merge {:?} with {:?}",
                other.dims(),
                self.dims()
            )));
        }
        self.samples.extend(other.samples.iter().cloned());
        Ok(())
    }

    /// The dataset as it reads back from disk: scalars rounded to f32 and
    /// records numbered in order.
    pub fn quantized(&self) -> Dataset {
        let q = |v: f64| v as f32 as f64;
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| Sample {
                image: s.image.clone(),
                wrench: WrenchReading::from_array(s.wrench.to_array().map(q)),
                label: CorrectiveAction::from_array(s.label.to_array().map(q)),
                task_id: s.task_id.clone(),
                trial_index: i as u32,
                contact_pose: Pose6 {
                    x: q(s.contact_pose.x),
                    y: q(s.contact_pose.y),
                    z: q(s.contact_pose.z),
                    theta_x: q(s.contact_pose.theta_x),
                    theta_y: q(s.contact_pose.theta_y),
                    theta_z: q(s.contact_pose.theta_z),
                },
            })
            .collect();
        Dataset {
            samples,
            ..self.clone_header()
        }
    }
}

/// Backward collection on socket `active` of `board`. Trials run in parallel
/// with per-trial seeds and are merged in trial order.
pub fn collect_backward(
    board: &BoardLayout,
    active: usize,
    camera: &CameraModel,
    cfg: &CollectConfig,
    sim: &SimConfig,
) -> Result<Dataset, CollectError> {
    cfg.validate()?;
    sim.validate()?;
    camera.validate()?;
    let socket = board
        .sockets
        .get(active)
        .ok_or_else(|| CollectError::InvalidConfig(format!("no socket {active}")))?;
    let goal = board.goal_in_board(active);
    if !is_inserted(socket, &RobotState::at(goal, Pose6::IDENTITY)) {
        return Err(CollectError::GoalUnreachable(socket.task.task_id.clone()));
    }
    let results: Vec<Result<Option<Sample>, CollectError>> = (0..cfg.n_p)
        .into_par_iter()
        .map(|i| collect_one(board, active, camera, cfg, sim, &goal, i))
        .collect();
    let mut data = Dataset::new(camera.height, camera.width, camera.channels);
    for r in results {
        if let Some(s) = r? {
            data.samples.push(s);
        }
    }
    Ok(data)
}

fn collect_one(
    board: &BoardLayout,
    active: usize,
    camera: &CameraModel,
    cfg: &CollectConfig,
    sim_cfg: &SimConfig,
    goal: &Pose6,
    index: usize,
) -> Result<Option<Sample>, CollectError> {
    let socket = &board.sockets[active];
    let mut rng = rng_for(cfg.rng_seed, index as u64);
    let target = sample_target(goal, cfg.b0, cfg.c0, &mut rng);
    let grasp = sample_grasp(sim_cfg, &mut rng);
    let mut sim = Simulator::new(sim_cfg.clone(), rng);
    let start = Pose6 {
        z: target.z + cfg.z_max,
        ..target
    };
    let mut state = RobotState::at(start, grasp);
    // enough time to cover the approach at v_max, plus settling
    let limit = (cfg.z_max + 0.02) / sim_cfg.v_max + 2.0;
    while state.sim_time < limit {
        let tick = sim.tick(&state, &target, socket)?;
        state = tick.state;
        if tick.measured.exceeds(cfg.f_th, cfg.m_th) {
            let tip = placement(socket, &state).tip_z;
            if tip.abs() >= CAPTURE_BAND {
                // threshold crossed away from the surface (inside the hole)
                return Ok(None);
            }
            let image = render_tilted(camera, board, active, &state)?;
            return Ok(Some(Sample {
                image,
                wrench: tick.measured,
                label: CorrectiveAction::between(&state.eef_pose, goal),
                task_id: socket.task.task_id.clone(),
                trial_index: index as u32,
                contact_pose: state.eef_pose,
            }));
        }
        if is_inserted(socket, &state) && (state.eef_pose.z - target.z).abs() < 1e-5 {
            break;
        }
    }
    Ok(None)
}

const MAGIC: &[u8; 4] = b"INBN";
const VERSION: u16 = 1;

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn encode_image(out: &mut Vec<u8>, img: &ImageTensor) {
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>, FormatError> {
    let dim = |v: usize, name: &str| {
        u16::try_from(v).map_err(|_| FormatError::Format(format!("{name} {v} exceeds u16")))
    };
    let (h, w, c) = (dim(d.height, "height")?, dim(d.width, "width")?, dim(d.channels, "channels")?);
    let per_image = d.height * d.width * d.channels;
    let mut out = Vec::with_capacity(24 + d.len() * (per_image * 4 + 100));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&(d.len() as u64).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for (i, s) in d.samples.iter().enumerate() {
        if s.image.dims() != d.dims() || s.image.data.len() != per_image {
            return Err(FormatError::Format(format!(
                "record {i}: image {:?} does not match header {:?}",
                s.image.dims(),
                d.dims()
            )));
        }
        encode_image(&mut out, &s.image);
        put_f32s(&mut out, s.wrench.to_array());
        put_f32s(&mut out, s.label.to_array());
        put_f32s(&mut out, s.contact_pose.to_array());
        let id = s.task_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| FormatError::Format("task id too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
    }
    Ok(out)
}

/// Little-endian reader over a byte slice; running out is `TruncatedFile`.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::TruncatedFile)?;
        let s = self.buf.get(self.pos..end).ok_or(FormatError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s<const N: usize>(&mut self) -> Result<[f64; N], FormatError> {
        let mut a = [0.0; N];
        for v in &mut a {
            *v = self.f32()? as f64;
        }
        Ok(a)
    }

    pub(crate) fn string(&mut self) -> Result<String, FormatError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Format("task id is not UTF-8".into()))
    }

    pub(crate) fn image(&mut self, h: usize, w: usize, c: usize) -> Result<ImageTensor, FormatError> {
        let raw = self.take(h * w * c * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(ImageTensor {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != MAGIC {
        return Err(FormatError::Format("bad magic, not a dataset file".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FormatError::Format(format!("unsupported dataset version {version}")));
    }
    let (h, w, c) = (cur.u16()? as usize, cur.u16()? as usize, cur.u16()? as usize);
    let count = cur.u64()?;
    cur.take(4)?;
    if h == 0 || w == 0 || c == 0 {
        return Err(FormatError::Format(format!("bad image dimensions {h}×{w}×{c}")));
    }
    // each record is at least one image long; reject impossible counts early
    let min_record = (h * w * c * 4 + 70) as u64;
    if count > bytes.len() as u64 / min_record + 1 {
        return Err(FormatError::TruncatedFile);
    }
    let mut data = Dataset::new(h, w, c);
    for i in 0..count as usize {
        let image = cur.image(h, w, c)?;
        let wrench = WrenchReading::from_array(cur.f32s::<6>()?);
        let label = CorrectiveAction::from_array(cur.f32s::<5>()?);
        let contact_pose = Pose6::from_array(cur.f32s::<6>()?);
        let task_id = cur.string()?;
        data.samples.push(Sample {
            image,
            wrench,
            label,
            task_id,
            trial_index: i as u32,
            contact_pose,
        });
    }
    if !cur.is_done() {
        return Err(FormatError::Format("trailing bytes after last record".into()));
    }
    Ok(data)
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<(), FormatError> {
    let bytes = encode_dataset(d)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, FormatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CrossSection, TaskMode, TaskSpec};
    use rand::SeedableRng;

    fn task() -> TaskSpec {
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
        .unwrap()
    }

    #[test]
    fn degenerate_box_returns_center() {
        let mut rng = SimRng::seed_from_u64(0);
        let (r, t) = rdg([0.1, 0.2, -0.3], [0.01, 0.02, 0.03], 0.0, 0.0, &mut rng);
        assert_eq!(r, [0.1, 0.2, -0.3]);
        assert_eq!(t, [0.01, 0.02, 0.03]);
    }

    #[test]
    fn rdg_stays_in_box_and_repeats() {
        let mut rng = SimRng::seed_from_u64(5);
        let mut again = SimRng::seed_from_u64(5);
        for _ in 0..10_000 {
            let (r, t) = rdg([0.0, 0.0, -0.005], [0.0; 3], 0.01, 0.1, &mut rng);
            assert!(r[0].abs() < 0.01 + 1e-15 && r[1].abs() < 0.01 + 1e-15);
            assert_eq!(r[2], -0.005);
            assert!(t.iter().all(|a| a.abs() <= 0.1));
            assert_eq!((r, t), rdg([0.0, 0.0, -0.005], [0.0; 3], 0.01, 0.1, &mut again));
        }
    }

    #[test]
    fn aligned_collection_is_empty() {
        let board = BoardLayout::single(task());
        let cfg = CollectConfig { n_p: 10, b0: 0.0, c0: 0.0, ..Default::default() };
        let sim = SimConfig { grasp_error: Pose6::IDENTITY, ..Default::default() };
        let d = collect_backward(&board, 0, &CameraModel::wrist(), &cfg, &sim).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn unreachable_goal_is_rejected() {
        let mut t = task();
        t.goal_pose = Pose6::from_translation(0.0, 0.0, 0.01);
        let board = BoardLayout::single(t);
        let err = collect_backward(&board, 0, &CameraModel::wrist(), &CollectConfig::default(), &SimConfig::default());
        assert!(matches!(err, Err(CollectError::GoalUnreachable(_))));
    }

    #[test]
    fn samples_satisfy_capture_and_label_contracts() {
        let board = BoardLayout::single(task());
        let cfg = CollectConfig { n_p: 30, rng_seed: 9, ..Default::default() };
        let d = collect_backward(&board, 0, &CameraModel::wrist(), &cfg, &SimConfig::default()).unwrap();
        assert!(d.len() >= 20);
        let goal = board.goal_in_board(0);
        for s in &d.samples {
            assert!(s.wrench.exceeds(cfg.f_th, cfg.m_th));
            let back = s.label.apply_to(&s.contact_pose, 0.0);
            for (a, b) in [
                (back.x, goal.x),
                (back.y, goal.y),
                (back.theta_x, goal.theta_x),
                (back.theta_y, goal.theta_y),
                (back.theta_z, goal.theta_z),
            ] {
                assert!((a - b).abs() < 1e-9);
            }
            assert!(s.image.is_valid());
        }
    }

    fn tiny(n: usize) -> Dataset {
        let mut d = Dataset::new(2, 3, 3);
        for i in 0..n {
            let mut image = ImageTensor::zeros(2, 3, 3);
            image.data.iter_mut().enumerate().for_each(|(k, v)| *v = (k + i) as f32 / 20.0);
            d.samples.push(Sample {
                image,
                wrench: WrenchReading::from_array([0.1, -2.0, 3.5, 0.01, 0.0, -0.2]),
                label: CorrectiveAction::from_array([0.001, -0.002, 0.01, 0.02, -0.03]),
                task_id: format!("task{i}"),
                trial_index: i as u32,
                contact_pose: Pose6::new(0.003, 0.001, -0.0004, 0.01, 0.02, 0.03),
            });
        }
        d
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for n in [0, 3] {
            let d = tiny(n).quantized();
            let p = dir.path().join(format!("d{n}.bin"));
            write_dataset(&d, &p).unwrap();
            let back = read_dataset(&p).unwrap();
            assert_eq!(back, d);
            assert_eq!(encode_dataset(&back).unwrap(), std::fs::read(&p).unwrap());
        }
        let bytes = encode_dataset(&tiny(0)).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"INBN");
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = encode_dataset(&tiny(2)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(FormatError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(FormatError::Format(_))));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(FormatError::TruncatedFile)));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(FormatError::TruncatedFile)));
        let mut d = tiny(1);
        d.samples[0].image = ImageTensor::zeros(3, 3, 3);
        assert!(matches!(encode_dataset(&d), Err(FormatError::Format(_))));
    }
}
