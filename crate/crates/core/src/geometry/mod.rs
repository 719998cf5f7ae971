//! Poses, frames, planar cross-sections and task/board descriptions.

mod polygon;
mod pose;
mod task;

pub use polygon::{
    intersection_moments, min_boundary_distance, point_in_ring, ring_moments, transform_ring,
    transform_triangles, triangulate, CrossSection, Moments, ShapeKind, Vec2,
};
pub use pose::{transform_to_eef, transform_to_world, wrap_angle, CorrectiveAction, Pose6};
pub use task::{
    contact_patch, contains_with_clearance, BoardLayout, ContactPatch, Rgb, Socket, TaskMode,
    TaskSpec, CONTACT_EPS,
};
