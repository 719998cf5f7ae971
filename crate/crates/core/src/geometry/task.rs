use serde::{Deserialize, Serialize};

use super::polygon::{
    intersection_moments, min_boundary_distance, point_in_ring, transform_triangles, CrossSection,
    Vec2,
};
use super::pose::Pose6;
use crate::error::GeometryError;

/// Boundary gap below which two profiles count as touching.
pub const CONTACT_EPS: f64 = 1e-9;

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// A gripped peg goes into a fixed hole.
    Insertion,
    /// A gripped hoop goes over a fixed shaft.
    Threading,
}

/// One insertion or threading task.
///
/// `peg` is always the gripped profile and `hole` the fixed one. In threading
/// mode `peg` is the opening of the hoop and `hole` is the shaft, so the
/// containment roles swap. Both profiles live in their own frames: `peg` in the
/// peg frame (the gripper plus grasp offset), `hole` in the socket frame, whose
/// origin is on the board surface with +z pointing away from the board.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub mode: TaskMode,
    pub peg: CrossSection,
    pub hole: CrossSection,
    /// Per-side gap between the profiles at perfect alignment.
    pub clearance: f64,
    /// Inserted end-effector pose in the socket frame.
    pub goal_pose: Pose6,
    pub peg_color: Rgb,
    pub socket_color: Rgb,
    pub board_color: Rgb,
    pub friction_mu: f64,
    /// Lever arm used by the tilt model.
    pub peg_height: f64,
}

/// Part of the inner profile resting on top of the outer one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPatch {
    pub area: f64,
    /// Relative to the peg axis, in the peg frame.
    pub centroid: Vec2,
}

impl TaskSpec {
    /// Builds a task from its two profiles. The clearance is measured from the
    /// geometry.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task_id: impl Into<String>,
        mode: TaskMode,
        peg: CrossSection,
        hole: CrossSection,
        goal_pose: Pose6,
        colors: [Rgb; 3],
        friction_mu: f64,
        peg_height: f64,
    ) -> Result<Self, GeometryError> {
        let task_id = task_id.into();
        if !(friction_mu >= 0.0) || !(peg_height >= 0.0) || !goal_pose.is_finite() {
            return Err(GeometryError::Invalid(format!(
                "task {task_id}: friction, peg height and goal must be finite and non-negative"
            )));
        }
        let mut task = TaskSpec {
            task_id,
            mode,
            peg,
            hole,
            clearance: 0.0,
            goal_pose,
            peg_color: colors[0],
            socket_color: colors[1],
            board_color: colors[2],
            friction_mu,
            peg_height,
        };
        match task.boundary_margin(Vec2::zeros(), 0.0) {
            Some(m) if m > CONTACT_EPS => task.clearance = m,
            _ => return Err(GeometryError::NotContained(task.task_id.clone())),
        }
        Ok(task)
    }

    /// Derives the partner profile by inflating `profile` by `clearance`:
    /// the hole for insertion, the hoop opening for threading.
    #[allow(clippy::too_many_arguments)]
    pub fn from_profile(
        task_id: impl Into<String>,
        mode: TaskMode,
        profile: CrossSection,
        clearance: f64,
        depth: f64,
        colors: [Rgb; 3],
        friction_mu: f64,
        peg_height: f64,
    ) -> Result<Self, GeometryError> {
        if !(clearance > 0.0) {
            return Err(GeometryError::Invalid("clearance must be positive".into()));
        }
        if !(depth > 0.0) {
            return Err(GeometryError::Invalid("insertion depth must be positive".into()));
        }
        let partner = profile.inflated(clearance)?;
        let (peg, hole) = match mode {
            TaskMode::Insertion => (profile, partner),
            TaskMode::Threading => (partner, profile),
        };
        TaskSpec::new(
            task_id,
            mode,
            peg,
            hole,
            Pose6::from_translation(0.0, 0.0, -depth),
            colors,
            friction_mu,
            peg_height,
        )
    }

    /// Same task with a different gripped profile; clearance is re-measured.
    pub fn with_peg(&self, peg: CrossSection) -> Result<Self, GeometryError> {
        TaskSpec::new(
            self.task_id.clone(),
            self.mode,
            peg,
            self.hole.clone(),
            self.goal_pose,
            [self.peg_color, self.socket_color, self.board_color],
            self.friction_mu,
            self.peg_height,
        )
    }

    pub fn with_peg_color(&self, color: Rgb) -> Self {
        TaskSpec {
            peg_color: color,
            ..self.clone()
        }
    }

    /// Surface height of the fixed part (the board top, or the shaft top).
    pub fn surface_z(&self) -> f64 {
        0.0
    }

    /// Inner and outer rings with the peg placed at `offset`, rotated by
    /// `theta_z`, in the socket frame.
    fn placed_rings(&self, offset: Vec2, theta_z: f64) -> (Vec<Vec2>, Vec<Vec2>) {
        let moving = self.peg.transformed(theta_z, offset);
        let fixed = self.hole.vertices().to_vec();
        match self.mode {
            TaskMode::Insertion => (moving, fixed),
            TaskMode::Threading => (fixed, moving),
        }
    }

    /// `Some(gap)` when the inner profile lies inside the outer one, with
    /// `gap` the smallest boundary distance; `None` when it does not.
    pub fn boundary_margin(&self, offset: Vec2, theta_z: f64) -> Option<f64> {
        let (inner, outer) = self.placed_rings(offset, theta_z);
        if !inner.iter().all(|&p| point_in_ring(p, &outer)) {
            return None;
        }
        let gap = min_boundary_distance(&inner, &outer);
        if gap > 0.0 {
            Some(gap)
        } else {
            None
        }
    }
}

/// True iff the peg at `lateral_offset`/`theta_z` lies strictly inside the
/// hole (or, threading, the shaft strictly inside the hoop opening).
/// Boundary contact does not count.
pub fn contains_with_clearance(task: &TaskSpec, lateral_offset: Vec2, theta_z: f64) -> bool {
    task.boundary_margin(lateral_offset, theta_z)
        .is_some_and(|m| m > CONTACT_EPS)
}

/// The region of the inner profile not over the outer one: the peg tip
/// resting on the board (insertion) or the shaft top under the hoop
/// (threading).
pub fn contact_patch(task: &TaskSpec, lateral_offset: Vec2, theta_z: f64) -> ContactPatch {
    if contains_with_clearance(task, lateral_offset, theta_z) {
        return ContactPatch {
            area: 0.0,
            centroid: Vec2::zeros(),
        };
    }
    let moving = transform_triangles(task.peg.triangles(), theta_z, lateral_offset);
    let fixed = task.hole.triangles();
    let (inner_tris, outer_tris, inner_m) = match task.mode {
        TaskMode::Insertion => {
            let m = super::polygon::ring_moments(&task.peg.transformed(theta_z, lateral_offset));
            (moving.clone(), fixed.to_vec(), m)
        }
        TaskMode::Threading => (fixed.to_vec(), moving.clone(), task.hole.moments()),
    };
    let overlap = intersection_moments(&inner_tris, &outer_tris);
    let area = (inner_m.area - overlap.area).max(0.0);
    let rel_area = area / inner_m.area;
    if rel_area < 1e-12 {
        return ContactPatch {
            area: 0.0,
            centroid: Vec2::zeros(),
        };
    }
    let c_socket = Vec2::new(
        (inner_m.sx - overlap.sx) / area,
        (inner_m.sy - overlap.sy) / area,
    );
    let d = c_socket - lateral_offset;
    let (s, c) = theta_z.sin_cos();
    ContactPatch {
        area,
        centroid: Vec2::new(c * d.x + s * d.y, -s * d.x + c * d.y),
    }
}

/// A socket on a board: its task and its pose relative to the board center.
#[derive(Debug, Clone, PartialEq)]
pub struct Socket {
    pub task: TaskSpec,
    pub offset: Pose6,
}

/// Rigid board carrying one or more sockets. Robot poses in the simulator
/// are expressed in the board frame; `board_pose` places the board in the
/// world.
#[derive(Debug, Clone, PartialEq)]
pub struct BoardLayout {
    pub board_pose: Pose6,
    pub sockets: Vec<Socket>,
    /// Plug left in the hole, per socket.
    pub occupied: Vec<bool>,
}

impl BoardLayout {
    pub fn new(board_pose: Pose6, sockets: Vec<Socket>) -> Result<Self, GeometryError> {
        for i in 0..sockets.len() {
            for j in (i + 1)..sockets.len() {
                let (a, b) = (&sockets[i], &sockets[j]);
                let ra = a.task.hole.radius().max(a.task.peg.radius());
                let rb = b.task.hole.radius().max(b.task.peg.radius());
                let d = ((a.offset.x - b.offset.x).powi(2) + (a.offset.y - b.offset.y).powi(2)).sqrt();
                if d <= ra + rb {
                    return Err(GeometryError::OverlappingSockets(i, j));
                }
            }
        }
        let n = sockets.len();
        Ok(BoardLayout {
            board_pose,
            sockets,
            occupied: vec![false; n],
        })
    }

    /// Board with a single socket at the board center.
    pub fn single(task: TaskSpec) -> Self {
        BoardLayout {
            board_pose: Pose6::IDENTITY,
            sockets: vec![Socket {
                task,
                offset: Pose6::IDENTITY,
            }],
            occupied: vec![false],
        }
    }

    pub fn empty(board_pose: Pose6) -> Self {
        BoardLayout {
            board_pose,
            sockets: Vec::new(),
            occupied: Vec::new(),
        }
    }

    pub fn with_pose(&self, board_pose: Pose6) -> Self {
        BoardLayout {
            board_pose,
            ..self.clone()
        }
    }

    /// Goal pose of socket `i` in the board frame.
    pub fn goal_in_board(&self, i: usize) -> Pose6 {
        let s = &self.sockets[i];
        s.offset.compose(&s.task.goal_pose)
    }

    /// Goal pose of socket `i` in the world frame.
    pub fn goal_in_world(&self, i: usize) -> Pose6 {
        self.board_pose.compose(&self.goal_in_board(i))
    }

    pub fn socket_index(&self, task_id: &str) -> Option<usize> {
        self.sockets.iter().position(|s| s.task.task_id == task_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const COLORS: [Rgb; 3] = [[0.8, 0.2, 0.2], [0.05, 0.05, 0.05], [0.7, 0.7, 0.6]];

    fn square_task(side: f64, clearance: f64) -> TaskSpec {
        TaskSpec::from_profile(
            "sq",
            TaskMode::Insertion,
            CrossSection::square(side),
            clearance,
            0.005,
            COLORS,
            0.3,
            0.003,
        )
        .unwrap()
    }

    /// Monte-Carlo estimate of the patch (peg points outside the hole).
    fn mc_patch(task: &TaskSpec, offset: Vec2, theta: f64, n: usize, seed: u64) -> (f64, Vec2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let peg = task.peg.transformed(theta, offset);
        let hole = task.hole.vertices();
        let r = task.peg.radius();
        let (mut hits, mut sum) = (0usize, Vec2::zeros());
        for _ in 0..n {
            let p = offset + Vec2::new(rng.random_range(-r..r), rng.random_range(-r..r));
            if point_in_ring(p, &peg) && !point_in_ring(p, hole) {
                hits += 1;
                sum += p - offset;
            }
        }
        let area = hits as f64 / n as f64 * (2.0 * r) * (2.0 * r);
        let c = if hits > 0 { sum / hits as f64 } else { Vec2::zeros() };
        let (s, co) = theta.sin_cos();
        (area, Vec2::new(co * c.x + s * c.y, -s * c.x + co * c.y))
    }

    #[test]
    fn clearance_is_measured() {
        let t = square_task(0.02, 0.001);
        assert!((t.clearance - 0.001).abs() < 1e-12);
    }

    #[test]
    fn square_containment_examples() {
        let t = square_task(0.02, 0.001);
        assert!(contains_with_clearance(&t, Vec2::zeros(), 0.0));
        assert!(!contains_with_clearance(&t, Vec2::new(0.0015, 0.0), 0.0));
        assert!(!contains_with_clearance(&t, Vec2::zeros(), std::f64::consts::FRAC_PI_4));
        assert!(contains_with_clearance(&t, Vec2::new(0.0009, -0.0009), 0.0));
    }

    /// Analytic oracle for a centered square peg in a square hole: the rotated
    /// square's half-extent along x/y is h(|cos θ| + |sin θ|).
    #[test]
    fn rotation_matches_analytic_extent() {
        let t = square_task(0.02, 0.001);
        for k in 0..90 {
            let theta = (k as f64).to_radians();
            let extent = 0.01 * (theta.cos().abs() + theta.sin().abs());
            let expected = extent < 0.011 - CONTACT_EPS;
            if (extent - 0.011).abs() > 1e-7 {
                assert_eq!(contains_with_clearance(&t, Vec2::zeros(), theta), expected, "{k}°");
            }
        }
    }

    #[test]
    fn boundary_contact_is_not_contained() {
        let t = square_task(0.02, 0.001);
        let gap = t.clearance;
        assert!(!contains_with_clearance(&t, Vec2::new(gap, 0.0), 0.0));
        assert!(contains_with_clearance(&t, Vec2::new(gap - 1e-6, 0.0), 0.0));
    }

    #[test]
    fn patch_examples() {
        let t = square_task(0.02, 0.001);
        let p = contact_patch(&t, Vec2::zeros(), 0.0);
        assert_eq!(p.area, 0.0);
        let far = contact_patch(&t, Vec2::new(0.03, 0.0), 0.0);
        assert!((far.area - t.peg.area()).abs() < 1e-15);
        assert!(far.centroid.norm() < 1e-12);
    }

    #[test]
    fn patch_centroid_matches_monte_carlo() {
        let t = square_task(0.02, 0.001);
        let off = Vec2::new(0.002, 0.0);
        let p = contact_patch(&t, off, 0.0);
        let (mc_area, mc_c) = mc_patch(&t, off, 0.0, 1_000_000, 7);
        // exact strip: x in [0.011, 0.012] of the hole frame
        assert!((p.area - 0.001 * 0.02).abs() < 1e-12);
        assert!(p.centroid.x > 0.0);
        assert!(p.centroid.y.abs() < 1e-12);
        assert!((p.centroid.x - mc_c.x).abs() < 1e-4);
        assert!((p.centroid.y - mc_c.y).abs() < 1e-4);
        assert!((p.area - mc_area).abs() / p.area < 0.1);
    }

    #[test]
    fn nonconvex_patch_matches_monte_carlo() {
        let t = TaskSpec::from_profile(
            "plug",
            TaskMode::Insertion,
            CrossSection::plug(0.024, 0.018, 0.008, 0.010),
            0.001,
            0.005,
            COLORS,
            0.3,
            0.003,
        )
        .unwrap();
        let off = Vec2::new(0.003, -0.002);
        let theta = 0.12;
        let p = contact_patch(&t, off, theta);
        let (mc_area, mc_c) = mc_patch(&t, off, theta, 1_000_000, 8);
        assert!((p.area - mc_area).abs() / p.area < 0.03, "{} vs {}", p.area, mc_area);
        assert!((p.centroid - mc_c).norm() < 1e-4);
    }

    #[test]
    fn threading_swaps_roles() {
        let t = TaskSpec::from_profile(
            "thread",
            TaskMode::Threading,
            CrossSection::square(0.01),
            0.001,
            0.01,
            COLORS,
            0.3,
            0.003,
        )
        .unwrap();
        assert!(t.peg.area() > t.hole.area());
        assert!(contains_with_clearance(&t, Vec2::zeros(), 0.0));
        assert!(!contains_with_clearance(&t, Vec2::new(0.002, 0.0), 0.0));
        let far = contact_patch(&t, Vec2::new(0.05, 0.0), 0.0);
        assert!((far.area - t.hole.area()).abs() < 1e-15);
        // shaft sticks out on the -x side of the hoop opening
        let p = contact_patch(&t, Vec2::new(0.003, 0.0), 0.0);
        assert!(p.area > 0.0 && p.centroid.x < 0.0 && p.centroid.y.abs() < 1e-12);
    }

    #[test]
    fn misaligned_construction_fails() {
        let peg = CrossSection::square(0.03);
        let hole = CrossSection::square(0.02);
        assert!(TaskSpec::new(
            "bad",
            TaskMode::Insertion,
            peg,
            hole,
            Pose6::IDENTITY,
            COLORS,
            0.3,
            0.0
        )
        .is_err());
    }

    #[test]
    fn overlapping_sockets_rejected() {
        let t = square_task(0.02, 0.001);
        let s = |x: f64| Socket {
            task: t.clone(),
            offset: Pose6::from_translation(x, 0.0, 0.0),
        };
        assert!(BoardLayout::new(Pose6::IDENTITY, vec![s(0.0), s(0.01)]).is_err());
        assert!(BoardLayout::new(Pose6::IDENTITY, vec![s(0.0), s(0.05)]).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn patch_zero_iff_contained(x in -0.004f64..0.004, y in -0.004f64..0.004, th in -0.3f64..0.3) {
                let t = square_task(0.012, 0.001);
                let off = Vec2::new(x, y);
                let contained = contains_with_clearance(&t, off, th);
                let margin_near_zero = t.boundary_margin(off, th).is_some_and(|m| m < 1e-7);
                prop_assume!(!margin_near_zero);
                let p = contact_patch(&t, off, th);
                prop_assert_eq!(p.area == 0.0, contained);
            }

            #[test]
            fn x_offset_symmetry(x in 0.0012f64..0.01) {
                let t = square_task(0.012, 0.001);
                let p = contact_patch(&t, Vec2::new(x, 0.0), 0.0);
                prop_assert!(p.centroid.y.abs() < 1e-12);
                prop_assert!(p.centroid.x > 0.0);
            }

            #[test]
            fn larger_clearance_keeps_containment(x in -0.003f64..0.003, y in -0.003f64..0.003, th in -0.2f64..0.2, extra in 0.0f64..0.002) {
                let a = square_task(0.012, 0.001);
                let b = square_task(0.012, 0.001 + extra);
                if contains_with_clearance(&a, Vec2::new(x, y), th) {
                    prop_assert!(contains_with_clearance(&b, Vec2::new(x, y), th));
                }
            }
        }
    }
}
