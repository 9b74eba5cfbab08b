//! Perspective depth camera: a 32x32 grid of ray distances.

use super::{DepthImage, DEPTH_HEIGHT, DEPTH_WIDTH};
use crate::arena::{ArenaSpec, Pose};
use crate::math::Vec3;

/// Render the depth image seen from `pose`, looking along the pose heading
/// with the given symmetric field of view.
///
/// Pixel grid: column 16 / row 16 ray is exactly on-axis, columns run left
/// (+y at yaw 0) to right, rows run top (+z) to bottom, and the outermost
/// left/top rays sit exactly at the half-FOV tangent. Distances are
/// euclidean along the ray, capped at `max_range`. Other agents are never
/// part of the geometry, so they never appear in anyone's image.
pub fn render_depth(arena: &ArenaSpec, pose: &Pose, fov: f64, max_range: f64) -> DepthImage {
    let tan_half = (fov / 2.0).tan();
    let (sin_yaw, cos_yaw) = pose.yaw.sin_cos();
    let half_w = DEPTH_WIDTH as f64 / 2.0;
    let half_h = DEPTH_HEIGHT as f64 / 2.0;

    let mut depths = Vec::with_capacity(DEPTH_WIDTH * DEPTH_HEIGHT);
    for r in 0..DEPTH_HEIGHT {
        let v = (half_h - r as f64) / half_h; // +1 top .. just past -1 bottom
        let dz = v * tan_half;
        for c in 0..DEPTH_WIDTH {
            let u = (c as f64 - half_w) / half_w; // -1 left .. just short of +1 right
            let dy_cam = -u * tan_half;
            let dir = Vec3::new(
                cos_yaw - sin_yaw * dy_cam,
                sin_yaw + cos_yaw * dy_cam,
                dz,
            )
            .normalized();
            depths.push(arena.raycast(pose.position, dir, max_range) as f32);
        }
    }
    DepthImage::from_depths(depths).expect("render produces exactly one image")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::load_arena;

    fn open_box(x_max: f64) -> ArenaSpec {
        load_arena(&format!(
            "arena v1\nbounds 0 0 0 {x_max} 10 4\nspawn 1 4 2 6 2 0\ngoal {x_max}\n"
        ))
        .unwrap()
    }

    #[test]
    fn center_pixel_hits_wall_exactly() {
        let arena = open_box(11.0);
        let pose = Pose::new(Vec3::new(1.0, 5.0, 2.0), 0.0).unwrap();
        let img = render_depth(&arena, &pose, std::f64::consts::FRAC_PI_2, 100.0);
        let center = img.at(16, 16) as f64;
        assert!((center - 10.0).abs() <= 1e-6, "center = {center}");
    }

    #[test]
    fn max_range_caps_every_pixel() {
        let arena = open_box(200.0);
        let pose = Pose::new(Vec3::new(100.0, 5.0, 2.0), 0.0).unwrap();
        // max_range far below any wall in the viewing direction, but the
        // floor/ceiling are 2 m away; only the central rows saturate.
        let img = render_depth(&arena, &pose, std::f64::consts::FRAC_PI_2, 1.5);
        for c in 0..DEPTH_WIDTH {
            assert_eq!(img.at(16, c), 1.5);
        }
        for v in img.depths() {
            assert!(*v >= 0.0 && *v <= 1.5);
        }
    }

    #[test]
    fn depths_within_range_bounds() {
        let arena = load_arena(
            "arena v1\nbounds 0 0 0 40 10 4\nspawn 1 4 2 6 2 0\ngoal 38\nbox 8 2 0 10 8 4\n",
        )
        .unwrap();
        let pose = Pose::new(Vec3::new(2.0, 5.0, 2.0), 0.0).unwrap();
        let img = render_depth(&arena, &pose, std::f64::consts::FRAC_PI_2, 20.0);
        for v in img.depths() {
            assert!(*v >= 0.0 && *v <= 20.0);
        }
        // the pillar ahead must be visible closer than the back wall
        assert!(img.at(16, 16) < 20.0);
        assert!((img.at(16, 16) - 6.0).abs() < 1e-5);
    }

    #[test]
    fn yaw_rotates_view() {
        let arena = open_box(40.0);
        // facing +y (left wall at y=10 is 5 m away)
        let pose = Pose::new(Vec3::new(20.0, 5.0, 2.0), std::f64::consts::FRAC_PI_2).unwrap();
        let img = render_depth(&arena, &pose, std::f64::consts::FRAC_PI_2, 100.0);
        assert!((img.at(16, 16) - 5.0).abs() <= 1e-6);
    }
}
