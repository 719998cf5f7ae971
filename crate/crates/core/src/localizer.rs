//! Rough board localization by closed-loop image alignment against a stored
//! reference view.
//!
//! Each iteration renders the current view, predicts how it would look after
//! every candidate planar motion of the camera (a warp of the current image),
//! scores the predictions against the reference with normalized
//! cross-correlation and moves by the best one.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::collector::{encode_image, Cursor};
use crate::error::{FormatError, LocalizeError};
use crate::geometry::{BoardLayout, Pose6};
use crate::sensors::{render_board, CameraModel, ImageTensor};

/// Correlation at which two views count as matching.
pub const MATCH_NCC: f64 = 0.995;
/// Search range of the planar offset.
pub const RANGE_XY: f64 = 0.02;
pub const RANGE_THETA: f64 = 15.0 * std::f64::consts::PI / 180.0;
const COARSE_XY: f64 = 0.002;
const COARSE_THETA: f64 = 2.0 * std::f64::consts::PI / 180.0;
pub const FINE_XY: f64 = 0.0005;
pub const FINE_THETA: f64 = 0.5 * std::f64::consts::PI / 180.0;
/// Blur applied before correlation (pixels).
const BLUR_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRecord {
    pub image: ImageTensor,
    /// Camera pose (world) at registration.
    pub eef: Pose6,
    /// Per hole: task id and the hole frame relative to `eef`.
    pub hole_deltas: Vec<(String, Pose6)>,
}

/// Socket frames of `board` in the world.
pub fn hole_poses(board: &BoardLayout) -> Vec<(String, Pose6)> {
    board
        .sockets
        .iter()
        .map(|s| (s.task.task_id.clone(), board.board_pose.compose(&s.offset)))
        .collect()
}

fn background(board: &BoardLayout) -> [f32; 3] {
    board.sockets.first().map(|s| s.task.board_color).unwrap_or([0.5; 3])
}

/// Renders the board as seen from a camera at `eef_world`.
pub fn view(board: &BoardLayout, camera: &CameraModel, eef_world: &Pose6) -> ImageTensor {
    render_board(camera, board, &board.board_pose.relative(eef_world), background(board))
}

pub fn register_reference(
    board: &BoardLayout,
    camera: &CameraModel,
    eef: &Pose6,
) -> Result<ReferenceRecord, LocalizeError> {
    if board.sockets.is_empty() {
        return Err(LocalizeError::EmptyReference);
    }
    Ok(ReferenceRecord {
        image: view(board, camera, eef),
        eef: *eef,
        hole_deltas: hole_poses(board)
            .into_iter()
            .map(|(id, hole)| (id, eef.relative(&hole)))
            .collect(),
    })
}

/// Luminance blurred with a separable Gaussian.
#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f32>,
}

fn gaussian_taps(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / s) as f32).collect()
}

fn prepare(img: &ImageTensor) -> Plane {
    let (h, w) = (img.height, img.width);
    let lum = img.luminance();
    let taps = gaussian_taps(BLUR_SIGMA);
    let r = (taps.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * lum[i * w + clamp(j as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut v = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            v[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[clamp(i as isize + k as isize - r, h) * w + j])
                .sum();
        }
    }
    Plane { h, w, v }
}

impl Plane {
    fn bilinear(&self, y: f64, x: f64) -> Option<f32> {
        if !(y >= 0.0 && x >= 0.0 && y <= (self.h - 1) as f64 && x <= (self.w - 1) as f64) {
            return None;
        }
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let at = |a: usize, b: usize| self.v[a * self.w + b];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }
}

fn ncc_pairs(pairs: impl Iterator<Item = (f32, f32)>) -> f64 {
    let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b) in pairs {
        let (a, b) = (a as f64, b as f64);
        n += 1.0;
        sa += a;
        sb += b;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    if n < 1.0 {
        return 0.0;
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-12 || vb <= 1e-12 {
        return 0.0;
    }
    (sab - sa * sb / n) / (va * vb).sqrt()
}

/// Normalized cross-correlation of two images after blurring.
pub fn ncc(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (pa, pb) = (prepare(a), prepare(b));
    ncc_pairs(pa.v.iter().copied().zip(pb.v.iter().copied()))
}

/// Correlation between `reference` and the view predicted after moving the
/// camera by `(dx, dy, dθ)` in its own frame, using pixels that stay in view.
/// `stride` subsamples the pixel grid.
fn warped_score(cur: &Plane, reference: &Plane, scale: f64, m: (f64, f64, f64), stride: usize) -> f64 {
    let (s, c) = m.2.sin_cos();
    let (h, w) = (cur.h as f64, cur.w as f64);
    let pairs = (0..cur.h).step_by(stride).flat_map(move |i| {
        (0..cur.w).step_by(stride).filter_map(move |j| {
            let qx = (j as f64 + 0.5 - w / 2.0) * scale;
            let qy = (h / 2.0 - i as f64 - 0.5) * scale;
            let px = c * qx - s * qy + m.0;
            let py = s * qx + c * qy + m.1;
            let jj = px / scale + w / 2.0 - 0.5;
            let ii = h / 2.0 - 0.5 - py / scale;
            cur.bilinear(ii, jj).map(|v| (v, reference.v[i * cur.w + j]))
        })
    });
    ncc_pairs(pairs)
}

fn grid(center: f64, half: f64, step: f64) -> Vec<f64> {
    let n = (half / step).round() as i64;
    (-n..=n).map(|k| center + k as f64 * step).collect()
}

/// Best candidate; ties go to the lexicographically smallest motion.
fn search(cur: &Plane, reference: &Plane, scale: f64, xs: &[f64], ys: &[f64], ts: &[f64], stride: usize) -> ((f64, f64, f64), f64) {
    let cands: Vec<(f64, f64, f64)> = xs
        .iter()
        .flat_map(|&x| ys.iter().flat_map(move |&y| ts.iter().map(move |&t| (x, y, t))))
        .collect();
    cands
        .par_iter()
        .map(|&m| (m, warped_score(cur, reference, scale, m, stride)))
        .reduce(
            || ((f64::INFINITY, f64::INFINITY, f64::INFINITY), f64::NEG_INFINITY),
            |a, b| {
                if b.1 > a.1 || (b.1 == a.1 && (b.0 .0, b.0 .1, b.0 .2) < (a.0 .0, a.0 .1, a.0 .2)) {
                    b
                } else {
                    a
                }
            },
        )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    /// Recovered hole frames (world).
    pub hole_poses: Vec<(String, Pose6)>,
    pub iterations: usize,
    /// Final camera pose.
    pub eef: Pose6,
    pub correlation: f64,
}

/// Moves the camera from `start_eef` until its view matches the reference,
/// then reads the hole poses off the stored deltas.
pub fn localize(
    reference: &ReferenceRecord,
    board: &BoardLayout,
    camera: &CameraModel,
    start_eef: &Pose6,
    max_iters: usize,
) -> Result<Localization, LocalizeError> {
    if reference.hole_deltas.is_empty() {
        return Err(LocalizeError::EmptyReference);
    }
    let ref_plane = prepare(&reference.image);
    let mut total = (0.0f64, 0.0f64, 0.0f64);
    let mut eef = *start_eef;
    let mut best = f64::NEG_INFINITY;
    let coarse_xy = grid(0.0, RANGE_XY, COARSE_XY);
    let coarse_t = grid(0.0, RANGE_THETA + COARSE_THETA, COARSE_THETA);
    for it in 1..=max_iters {
        let cur = prepare(&view(board, camera, &eef));
        let c0 = ncc_pairs(cur.v.iter().copied().zip(ref_plane.v.iter().copied()));
        best = best.max(c0);
        if c0 >= MATCH_NCC {
            return Ok(Localization {
                hole_poses: reference
                    .hole_deltas
                    .iter()
                    .map(|(id, d)| (id.clone(), eef.compose(d)))
                    .collect(),
                iterations: it,
                eef,
                correlation: c0,
            });
        }
        let (m, _) = search(&cur, &ref_plane, camera.scale, &coarse_xy, &coarse_xy, &coarse_t, 2);
        let (m, _) = search(
            &cur,
            &ref_plane,
            camera.scale,
            &grid(m.0, COARSE_XY, FINE_XY),
            &grid(m.1, COARSE_XY, FINE_XY),
            &grid(m.2, COARSE_THETA, FINE_THETA),
            1,
        );
        // accumulate in the start frame and keep it inside the search range
        let moved = Pose6::planar(total.0, total.1, total.2).compose(&Pose6::planar(m.0, m.1, m.2));
        let lim = RANGE_XY + FINE_XY;
        total = (
            moved.x.clamp(-lim, lim),
            moved.y.clamp(-lim, lim),
            moved.theta_z.clamp(-RANGE_THETA - FINE_THETA, RANGE_THETA + FINE_THETA),
        );
        eef = start_eef.compose(&Pose6::planar(total.0, total.1, total.2));
    }
    Err(LocalizeError::LocalizationFailed {
        best,
        iterations: max_iters,
    })
}

const MAGIC: &[u8; 4] = b"INBR";
const VERSION: u16 = 1;

pub fn encode_reference(r: &ReferenceRecord) -> Result<Vec<u8>, FormatError> {
    let dim = |v: usize| u16::try_from(v).map_err(|_| FormatError::Format(format!("dimension {v} exceeds u16")));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [r.image.height, r.image.width, r.image.channels] {
        out.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    encode_image(&mut out, &r.image);
    let put_pose = |out: &mut Vec<u8>, p: &Pose6| {
        for v in p.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put_pose(&mut out, &r.eef);
    out.extend_from_slice(&(r.hole_deltas.len() as u32).to_le_bytes());
    for (id, d) in &r.hole_deltas {
        let len = u16::try_from(id.len()).map_err(|_| FormatError::Format("task id too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        put_pose(&mut out, d);
    }
    Ok(out)
}

pub fn decode_reference(bytes: &[u8]) -> Result<ReferenceRecord, FormatError> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != MAGIC {
        return Err(FormatError::Format("bad magic, not a reference file".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FormatError::Format(format!("unsupported reference version {version}")));
    }
    let (h, w, c) = (cur.u16()? as usize, cur.u16()? as usize, cur.u16()? as usize);
    let image = cur.image(h, w, c)?;
    let pose = |cur: &mut Cursor| -> Result<Pose6, FormatError> {
        let mut a = [0.0; 6];
        for v in &mut a {
            *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        }
        Ok(Pose6::from_array(a))
    };
    let eef = pose(&mut cur)?;
    let n = cur.u32()? as usize;
    let mut hole_deltas = Vec::new();
    for _ in 0..n {
        let id = cur.string()?;
        hole_deltas.push((id, pose(&mut cur)?));
    }
    if !cur.is_done() {
        return Err(FormatError::Format("trailing bytes after reference".into()));
    }
    Ok(ReferenceRecord {
        image,
        eef,
        hole_deltas,
    })
}

pub fn write_reference(r: &ReferenceRecord, path: &Path) -> Result<(), FormatError> {
    std::fs::File::create(path)?.write_all(&encode_reference(r)?)?;
    Ok(())
}

pub fn read_reference(path: &Path) -> Result<ReferenceRecord, FormatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_reference(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CrossSection, Socket, TaskMode, TaskSpec};

    fn board() -> BoardLayout {
        let colors = [[0.8, 0.2, 0.2], [0.05, 0.05, 0.05], [0.7, 0.7, 0.6]];
        let mk = |id: &str, profile| {
            TaskSpec::from_profile(id, TaskMode::Insertion, profile, 0.001, 0.005, colors, 0.3, 0.003).unwrap()
        };
        BoardLayout::new(
            Pose6::IDENTITY,
            vec![
                Socket { task: mk("sq", CrossSection::square(0.012)), offset: Pose6::planar(-0.03, 0.015, 0.0) },
                Socket { task: mk("tri", CrossSection::triangle(0.014)), offset: Pose6::planar(0.025, 0.02, 0.3) },
                Socket { task: mk("circ", CrossSection::circle(0.006, 24)), offset: Pose6::planar(0.0, -0.03, 0.0) },
            ],
        )
        .unwrap()
    }

    fn eef() -> Pose6 {
        Pose6::from_translation(0.0, 0.0, 0.3)
    }

    #[test]
    fn deltas_reproduce_hole_poses() {
        let b = board();
        let r = register_reference(&b, &CameraModel::localization(), &eef()).unwrap();
        for ((id, d), (id2, hole)) in r.hole_deltas.iter().zip(hole_poses(&b)) {
            assert_eq!(id, &id2);
            let p = r.eef.compose(d);
            for (a, e) in p.to_array().iter().zip(hole.to_array()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        assert_eq!(r, register_reference(&b, &CameraModel::localization(), &eef()).unwrap());
        assert!(matches!(
            register_reference(&BoardLayout::empty(Pose6::IDENTITY), &CameraModel::localization(), &eef()),
            Err(LocalizeError::EmptyReference)
        ));
    }

    #[test]
    fn record_round_trip() {
        let r = register_reference(&board(), &CameraModel::localization(), &eef()).unwrap();
        let bytes = encode_reference(&r).unwrap();
        assert_eq!(decode_reference(&bytes).unwrap(), r);
        assert!(matches!(decode_reference(&bytes[..bytes.len() - 2]), Err(FormatError::TruncatedFile)));
    }

    #[test]
    fn zero_offset_converges_immediately() {
        let b = board();
        let cam = CameraModel::localization();
        let r = register_reference(&b, &cam, &eef()).unwrap();
        let l = localize(&r, &b, &cam, &eef(), 5).unwrap();
        assert_eq!(l.iterations, 1);
        assert_eq!(l.hole_poses.len(), 3);
        for ((_, a), (_, e)) in l.hole_poses.iter().zip(hole_poses(&b)) {
            assert!((a.x - e.x).abs() < 1e-12 && (a.y - e.y).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_a_known_offset() {
        let b = board();
        let cam = CameraModel::localization();
        let r = register_reference(&b, &cam, &eef()).unwrap();
        let moved = b.with_pose(Pose6::planar(0.005, -0.003, 5f64.to_radians()));
        let l = localize(&r, &moved, &cam, &eef(), 10).unwrap();
        for ((_, a), (_, e)) in l.hole_poses.iter().zip(hole_poses(&moved)) {
            let d = ((a.x - e.x).powi(2) + (a.y - e.y).powi(2)).sqrt();
            assert!(d <= 1e-3, "position error {d}");
            assert!((a.theta_z - e.theta_z).abs() <= 1f64.to_radians());
        }
    }

    #[test]
    fn far_offset_fails() {
        let b = board();
        let cam = CameraModel::localization();
        let r = register_reference(&b, &cam, &eef()).unwrap();
        let moved = b.with_pose(Pose6::planar(0.05, 0.0, 0.0));
        assert!(matches!(
            localize(&r, &moved, &cam, &eef(), 6),
            Err(LocalizeError::LocalizationFailed { .. })
        ));
    }
}
