//! Synthetic sensing: the tilted wrist camera and the wrench sensor.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SensorError;
use crate::geometry::{point_in_ring, BoardLayout, CrossSection, Pose6, TaskMode, Vec2};
use crate::seed::SimRng;
use crate::sim::{placement, RobotState};

/// Force `f` (N) and moment `m` (N·m) in the end-effector frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WrenchReading {
    pub f: [f64; 3],
    pub m: [f64; 3],
}

impl WrenchReading {
    pub const ZERO: WrenchReading = WrenchReading {
        f: [0.0; 3],
        m: [0.0; 3],
    };

    pub fn from_vectors(f: Vector3<f64>, m: Vector3<f64>) -> Self {
        WrenchReading {
            f: [f.x, f.y, f.z],
            m: [m.x, m.y, m.z],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.f[0], self.f[1], self.f[2], self.m[0], self.m[1], self.m[2]]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        WrenchReading {
            f: [a[0], a[1], a[2]],
            m: [a[3], a[4], a[5]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Largest force component magnitude.
    pub fn max_force(&self) -> f64 {
        self.f.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Largest moment component magnitude.
    pub fn max_moment(&self) -> f64 {
        self.m.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn moment_norm(&self) -> f64 {
        self.m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Threshold test used for contact detection: max-norm of F against
    /// `f_th` or max-norm of M against `m_th`.
    pub fn exceeds(&self, f_th: f64, m_th: f64) -> bool {
        self.max_force() >= f_th || self.max_moment() >= m_th
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        WrenchReading::from_array(self.to_array().map(|v| v * alpha))
    }
}

/// Adds zero-mean Gaussian noise (`noise_std` = (force, moment)).
pub fn read_wrench(true_wrench: &WrenchReading, noise_std: (f64, f64), rng: &mut SimRng) -> WrenchReading {
    let (sf, sm) = noise_std;
    let mut out = *true_wrench;
    if sf > 0.0 {
        let n = Normal::new(0.0, sf).expect("finite std");
        for v in &mut out.f {
            *v += n.sample(rng);
        }
    }
    if sm > 0.0 {
        let n = Normal::new(0.0, sm).expect("finite std");
        for v in &mut out.m {
            *v += n.sample(rng);
        }
    }
    out
}

/// Row-major `H×W×C` raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Self {
        let mut img = ImageTensor::zeros(height, width, 3);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == self.height * self.width * self.channels
            && self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Luminance plane (0.299, 0.587, 0.114); single-channel images are copied.
    pub fn luminance(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(self.channels)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Binary PPM (P6), 8-bit, values `round(v·255)`.
    pub fn write_ppm(&self, path: &Path) -> std::io::Result<()> {
        let mut out = Vec::with_capacity(self.height * self.width * 3 + 20);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        for px in self.data.chunks_exact(self.channels) {
            for c in 0..3 {
                let v = px[c.min(self.channels - 1)];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        std::fs::write(path, out)
    }
}

/// Orthographic camera attached to the end effector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    /// Tilt of the optical axis from the gripper axis; the board appears
    /// foreshortened by `cos(tilt)` along the image vertical.
    pub tilt: f64,
    /// Point the camera looks at, relative to the end effector.
    pub focus_offset: Pose6,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Meters per pixel along the image horizontal.
    pub scale: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel::wrist()
    }
}

impl CameraModel {
    /// 45° wrist camera, 64×64×3 at 0.5 mm/pixel.
    pub fn wrist() -> Self {
        CameraModel {
            tilt: std::f64::consts::FRAC_PI_4,
            focus_offset: Pose6::IDENTITY,
            height: 64,
            width: 64,
            channels: 3,
            scale: 5e-4,
        }
    }

    /// Horizontal localization camera: 128×128 at 1 mm/pixel, no tilt.
    pub fn localization() -> Self {
        CameraModel {
            tilt: 0.0,
            focus_offset: Pose6::IDENTITY,
            height: 128,
            width: 128,
            channels: 3,
            scale: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if !(self.scale > 0.0) {
            return Err(SensorError::InvalidCamera("scale must be positive".into()));
        }
        if self.channels != 3 || self.height == 0 || self.width == 0 {
            return Err(SensorError::InvalidCamera("resolution must be H×W×3".into()));
        }
        if !(self.tilt.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(SensorError::InvalidCamera("tilt must be below 90°".into()));
        }
        Ok(())
    }

    /// Pixel-center offsets in the camera's heading frame: (x per column,
    /// y per row).
    fn pixel_offsets(&self) -> (Vec<f64>, Vec<f64>) {
        let v_scale = self.scale / self.tilt.cos();
        let cols = (0..self.width)
            .map(|j| (j as f64 + 0.5 - self.width as f64 / 2.0) * self.scale)
            .collect();
        let rows = (0..self.height)
            .map(|i| (self.height as f64 / 2.0 - i as f64 - 0.5) * v_scale)
            .collect();
        (cols, rows)
    }

    /// Board area covered by one pixel.
    pub fn pixel_area(&self) -> f64 {
        self.scale * self.scale / self.tilt.cos()
    }
}

/// Height band around the surface in which images may be captured.
pub const CAPTURE_BAND: f64 = 2e-3;

const HOOP_RING_WIDTH: f64 = 4e-3;

/// A planar region drawn in one color, in board coordinates.
struct Layer {
    frame: Pose6,
    inside: Vec<Vec2>,
    hole: Option<Vec<Vec2>>,
    color: [f32; 3],
    bbox: (Vec2, Vec2),
}

impl Layer {
    fn new(frame: Pose6, inside: &CrossSection, hole: Option<&CrossSection>, color: [f32; 3]) -> Self {
        let r = inside.radius();
        Layer {
            frame,
            inside: inside.vertices().to_vec(),
            hole: hole.map(|h| h.vertices().to_vec()),
            color,
            bbox: (
                Vec2::new(frame.x - r, frame.y - r),
                Vec2::new(frame.x + r, frame.y + r),
            ),
        }
    }

    fn covers(&self, b: Vec2) -> bool {
        if b.x < self.bbox.0.x || b.x > self.bbox.1.x || b.y < self.bbox.0.y || b.y > self.bbox.1.y {
            return false;
        }
        let local = self.frame.parent_to_heading(Vec2::new(b.x - self.frame.x, b.y - self.frame.y));
        point_in_ring(local, &self.inside) && !self.hole.as_ref().is_some_and(|h| point_in_ring(local, h))
    }
}

fn hoop(opening: &CrossSection) -> CrossSection {
    opening.inflated(HOOP_RING_WIDTH).expect("hoop ring")
}

fn board_layers(board: &BoardLayout) -> Vec<Layer> {
    let mut layers = Vec::new();
    for (k, s) in board.sockets.iter().enumerate() {
        let t = &s.task;
        layers.push(Layer::new(s.offset, &t.hole, None, t.socket_color));
        if board.occupied.get(k).copied().unwrap_or(false) {
            let frame = board.goal_in_board(k);
            match t.mode {
                TaskMode::Insertion => layers.push(Layer::new(frame, &t.peg, None, t.peg_color)),
                TaskMode::Threading => {
                    layers.push(Layer::new(frame, &hoop(&t.peg), Some(&t.peg), t.peg_color))
                }
            }
        }
    }
    layers
}

fn rasterize(camera: &CameraModel, eye: &Pose6, background: [f32; 3], layers: &[Layer]) -> ImageTensor {
    let (cols, rows) = camera.pixel_offsets();
    let mut img = ImageTensor::filled(camera.height, camera.width, background);
    let focus = Vec2::new(camera.focus_offset.x, camera.focus_offset.y);
    for (i, &v) in rows.iter().enumerate() {
        for (j, &u) in cols.iter().enumerate() {
            let d = eye.heading_to_parent(focus + Vec2::new(u, v));
            let b = Vec2::new(eye.x + d.x, eye.y + d.y);
            if let Some(layer) = layers.iter().rev().find(|l| l.covers(b)) {
                let k = img.index(i, j, 0);
                img.data[k..k + 3].copy_from_slice(&layer.color);
            }
        }
    }
    img
}

/// Renders the contact plane seen by the tilted wrist camera while the peg of
/// socket `active` touches the surface: board, holes, plugs already left in
/// their holes, and the gripped peg (with its grasp offset).
pub fn render_tilted(
    camera: &CameraModel,
    board: &BoardLayout,
    active: usize,
    state: &RobotState,
) -> Result<ImageTensor, SensorError> {
    camera.validate()?;
    let socket = &board.sockets[active];
    let tip = placement(socket, state).tip_z - socket.task.surface_z();
    if !(tip.abs() < CAPTURE_BAND) {
        return Err(SensorError::OutOfPlane(tip));
    }
    let task = &socket.task;
    let mut layers = board_layers(board);
    let peg = state.peg_pose();
    match task.mode {
        TaskMode::Insertion => layers.push(Layer::new(peg, &task.peg, None, task.peg_color)),
        TaskMode::Threading => {
            layers.push(Layer::new(peg, &hoop(&task.peg), Some(&task.peg), task.peg_color))
        }
    }
    Ok(rasterize(camera, &state.eef_pose, task.board_color, &layers))
}

/// Renders the board from a camera held at `eef` (board frame), without the
/// gripped part. Used by the localizer.
pub fn render_board(camera: &CameraModel, board: &BoardLayout, eef: &Pose6, background: [f32; 3]) -> ImageTensor {
    rasterize(camera, eef, background, &board_layers(board))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CrossSection, Socket, TaskSpec};
    use rand::SeedableRng;

    const COLORS: [[f32; 3]; 3] = [[0.8, 0.2, 0.2], [0.05, 0.05, 0.05], [0.7, 0.7, 0.6]];

    fn task() -> TaskSpec {
        TaskSpec::from_profile(
            "sq",
            TaskMode::Insertion,
            CrossSection::square(0.012),
            0.001,
            0.005,
            COLORS,
            0.3,
            0.003,
        )
        .unwrap()
    }

    fn contact_state(x: f64, y: f64, tz: f64) -> RobotState {
        RobotState::at(Pose6::new(x, y, -0.0008, 0.0, 0.0, tz), Pose6::IDENTITY)
    }

    #[test]
    fn noise_free_read_is_identity() {
        let mut rng = SimRng::seed_from_u64(0);
        let w = WrenchReading { f: [1.0, -2.0, 3.0], m: [0.1, 0.2, -0.3] };
        assert_eq!(read_wrench(&w, (0.0, 0.0), &mut rng), w);
        assert_eq!(read_wrench(&WrenchReading::ZERO, (0.0, 0.0), &mut rng), WrenchReading::ZERO);
    }

    #[test]
    fn noise_is_unbiased() {
        let mut rng = SimRng::seed_from_u64(1);
        let w = WrenchReading { f: [1.0, -2.0, 3.0], m: [0.1, 0.2, -0.3] };
        let (sf, sm) = (0.5, 0.05);
        let n = 100_000;
        let mut sum = [0.0; 6];
        for _ in 0..n {
            let r = read_wrench(&w, (sf, sm), &mut rng).to_array();
            for (acc, v) in sum.iter_mut().zip(r) {
                *acc += v;
            }
        }
        for (k, (total, truth)) in sum.iter().zip(w.to_array()).enumerate() {
            let sigma = if k < 3 { sf } else { sm };
            let mean = total / n as f64;
            assert!((mean - truth).abs() < 3.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn capture_requires_contact() {
        let board = BoardLayout::single(task());
        let cam = CameraModel::wrist();
        let high = RobotState::at(Pose6::from_translation(0.0, 0.0, 0.01), Pose6::IDENTITY);
        assert!(matches!(
            render_tilted(&cam, &board, 0, &high),
            Err(SensorError::OutOfPlane(_))
        ));
        assert!(render_tilted(&cam, &board, 0, &contact_state(0.002, 0.0, 0.0)).is_ok());
    }

    #[test]
    fn uniform_scene_is_constant() {
        let t = task();
        let t = TaskSpec { peg_color: t.board_color, ..t };
        let board = BoardLayout {
            board_pose: Pose6::IDENTITY,
            sockets: vec![Socket { task: t.clone(), offset: Pose6::from_translation(1.0, 1.0, 0.0) }],
            occupied: vec![false],
        };
        // the hole is far out of view; query the camera near the origin
        let st = RobotState::at(Pose6::from_translation(1.0, 1.0, -0.0005), Pose6::IDENTITY);
        let far_board = BoardLayout { sockets: board.sockets.clone(), ..board };
        let mut b2 = far_board.clone();
        b2.sockets[0].offset = Pose6::from_translation(1.2, 1.2, 0.0);
        b2.sockets[0].task = t;
        let img = rasterize(
            &CameraModel::wrist(),
            &st.eef_pose,
            b2.sockets[0].task.board_color,
            &[],
        );
        assert!(img.data.chunks_exact(3).all(|p| p == b2.sockets[0].task.board_color));
    }

    #[test]
    fn mirror_offsets_give_mirror_images() {
        let board = BoardLayout::single(task());
        let cam = CameraModel::wrist();
        for x in [0.0015, 0.003, 0.0071] {
            let a = render_tilted(&cam, &board, 0, &contact_state(x, 0.0, 0.0)).unwrap();
            let b = render_tilted(&cam, &board, 0, &contact_state(-x, 0.0, 0.0)).unwrap();
            for i in 0..a.height {
                for j in 0..a.width {
                    for c in 0..3 {
                        assert_eq!(a.get(i, j, c), b.get(i, a.width - 1 - j, c));
                    }
                }
            }
            assert_ne!(a, b);
        }
    }

    #[test]
    fn board_world_pose_does_not_change_renders() {
        let base = BoardLayout::single(task());
        let cam = CameraModel::wrist();
        let st = contact_state(0.003, -0.002, 0.1);
        let img = render_tilted(&cam, &base, 0, &st).unwrap();
        for k in 0..8 {
            let moved = base.with_pose(Pose6::new(0.1 * k as f64, -0.05, 0.02, 0.0, 0.0, 0.7 * k as f64));
            assert_eq!(render_tilted(&cam, &moved, 0, &st).unwrap(), img);
        }
    }

    #[test]
    fn rasterized_area_matches_polygon() {
        let t = task();
        let board = BoardLayout::single(t.clone());
        let cam = CameraModel::wrist();
        // peg far from the hole so both are fully visible and disjoint
        let st = RobotState::at(Pose6::from_translation(0.0, 0.0, -0.0005), Pose6::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let _ = st;
        let eye = Pose6::from_translation(0.0011, -0.0013, 0.0);
        let img = rasterize(&cam, &eye, t.board_color, &board_layers(&board));
        let dark = img.data.chunks_exact(3).filter(|p| *p == t.socket_color).count();
        let area = dark as f64 * cam.pixel_area();
        let exact = t.hole.area();
        assert!((area - exact).abs() / exact < 0.02, "{area} vs {exact}");
    }

    #[test]
    fn occupied_sockets_show_plugs() {
        let mut board = BoardLayout::single(task());
        let cam = CameraModel::localization();
        let empty = render_board(&cam, &board, &Pose6::IDENTITY, [0.7, 0.7, 0.6]);
        board.occupied[0] = true;
        let full = render_board(&cam, &board, &Pose6::IDENTITY, [0.7, 0.7, 0.6]);
        assert_ne!(empty, full);
        let red = full.data.chunks_exact(3).filter(|p| *p == [0.8, 0.2, 0.2]).count();
        assert!(red > 100);
    }

    #[test]
    fn ppm_dump_has_header_and_payload() {
        let img = ImageTensor::filled(4, 5, [1.0, 0.0, 0.5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        img.write_ppm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 4 * 5 * 3);
        assert_eq!(&bytes[11..14], &[255, 0, 128]);
    }
}
