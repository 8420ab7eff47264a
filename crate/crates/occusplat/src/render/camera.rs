use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geom::Pose;

/// Pinhole camera: intrinsics `(fx, fy, cx, cy)` with zero skew plus a
/// world-to-camera rigid transform. Camera frame is x-right, y-down,
/// z-forward; pixel coordinates are continuous with texel centers at
/// integer + 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Pose,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive: fx={}, fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far, got near={}, far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("zero image dimensions".into()));
        }
        Ok(())
    }

    /// World-frame position of the optical center.
    pub fn center(&self) -> Vector3<f64> {
        self.world_to_camera.inverse().translation
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera.transform_point(p_world)
    }

    /// Perspective projection of a camera-frame point (requires `z != 0`).
    pub fn project(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Project a world point; `None` if behind the camera or outside the image.
    pub fn project_world_checked(&self, p_world: &Vector3<f64>) -> Option<Vector2<f64>> {
        let p_cam = self.to_camera(p_world);
        if p_cam.z <= 0.0 {
            return None;
        }
        let px = self.project(&p_cam);
        if px.x < 0.0 || px.y < 0.0 || px.x >= self.width as f64 || px.y >= self.height as f64 {
            return None;
        }
        Some(px)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Quat;
    use approx::assert_relative_eq;

    fn test_camera() -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            world_to_camera: Pose::identity(),
            near: 0.1,
            far: 100.0,
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = test_camera();
        let px = cam.project(&Vector3::new(0.0, 0.0, 3.0));
        assert_relative_eq!(px, Vector2::new(50.0, 50.0), epsilon = 1e-12);
    }

    #[test]
    fn known_intrinsics_hand_computation() {
        // K = [[100,0,50],[0,100,50],[0,0,1]], camera-frame point (1,0,2).
        let cam = test_camera();
        let px = cam.project(&Vector3::new(1.0, 0.0, 2.0));
        assert_relative_eq!(px, Vector2::new(100.0, 50.0), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_rejected() {
        let cam = test_camera();
        assert!(cam.project_world_checked(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn validation_catches_bad_params() {
        let mut cam = test_camera();
        cam.fx = -1.0;
        assert!(cam.validate().is_err());
        let mut cam = test_camera();
        cam.near = 5.0;
        cam.far = 1.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn center_accounts_for_pose() {
        let pose = Pose::new(Quat::identity(), Vector3::new(0.0, 0.0, -2.0));
        let cam = Camera {
            world_to_camera: pose,
            ..test_camera()
        };
        // w2c translation -2 along z means the camera sits at world z = +2.
        assert_relative_eq!(cam.center(), Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
    }
}
