//! Evaluation harness: PSNR metrics, a brute-force reference renderer used
//! as an oracle for the tiled rasterizer, and a synthetic driving-scene
//! generator for end-to-end pipeline checks.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{logit, FourierShCoefficients, Pose, Quat, RotationConvention, ShCoefficients, SH_C0};
use crate::image_buf::Image;
use crate::occupancy::OccupancyGrid;
use crate::render::{render_assembled, Camera, RenderOptions};
use crate::scene::{assemble, AssembledScene, SceneModel, StreetGaussians, VehicleModel};

/// PSNR in dB over all pixel channels; identical images report 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let n = a.data.len() as f64;
    let mse = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(100.0);
    }
    Ok((-10.0 * mse.log10()).min(100.0))
}

/// PSNR restricted to masked pixels (one mask bit per pixel). An empty mask
/// or identical masked content reports the 100 dB ceiling.
pub fn psnr_dym(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    a.same_dims(b)?;
    if mask.len() != a.width * a.height {
        return Err(Error::InvalidArgument(format!(
            "mask length {} does not match {}x{} image",
            mask.len(),
            a.width,
            a.height
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pi, m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..3 {
            let d = a.data[pi * 3 + c] - b.data[pi * 3 + c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Ok(100.0);
    }
    let mse = sum / count as f64;
    if mse <= 0.0 {
        return Ok(100.0);
    }
    Ok((-10.0 * mse.log10()).min(100.0))
}

// ---------------------------------------------------------------------------
// Reference renderer
// ---------------------------------------------------------------------------

/// Brute-force renderer: every Gaussian is evaluated at every pixel in a
/// single globally depth-sorted pass -- no tiles, no bounding radius, no
/// early termination. Projection and compositing are written out from the
/// formulas with nalgebra doing the linear algebra, independent of the
/// production rasterizer's code path.
pub fn reference_render(scene: &AssembledScene, cam: &Camera, opts: &RenderOptions) -> Result<Image> {
    cam.validate()?;
    struct RefSplat {
        mu2: Vector2<f64>,
        conic: Matrix2<f64>,
        color: Vector3<f64>,
        opacity: f64,
        depth: f64,
    }
    let w_homog = cam.world_to_camera.to_homogeneous();
    let r_cw = quat_rotmat_ref(&cam.world_to_camera.rotation);
    let mut splats: Vec<RefSplat> = Vec::new();
    for g in scene.gaussians.iter() {
        let ph = w_homog * nalgebra::Vector4::new(g.position.x, g.position.y, g.position.z, 1.0);
        let p = Vector3::new(ph.x, ph.y, ph.z);
        if p.z < cam.near || p.z > cam.far {
            continue;
        }
        // Sigma = R S S^T R^T via an explicitly assembled rotation matrix.
        let rot = quat_rotmat_ref(&g.rotation);
        let s = Matrix3::from_diagonal(&g.scale);
        let cov3 = rot * s * s.transpose() * rot.transpose();
        let cam_cov = r_cw * cov3 * r_cw.transpose();
        let j = nalgebra::Matrix2x3::new(
            cam.fx / p.z,
            0.0,
            -cam.fx * p.x / (p.z * p.z),
            0.0,
            cam.fy / p.z,
            -cam.fy * p.y / (p.z * p.z),
        );
        let cov2 = j * cam_cov * j.transpose() + Matrix2::identity() * opts.lowpass_floor;
        let conic = match cov2.try_inverse() {
            Some(c) => c,
            None => continue,
        };
        let mu2 = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
        let dir = {
            let center = cam.world_to_camera.inverse().translation;
            let v = g.position - center;
            let n = v.norm();
            if n < 1e-12 {
                Vector3::new(0.0, 0.0, 1.0)
            } else {
                v / n
            }
        };
        let color =
            (crate::geom::eval_sh(&g.sh, &dir) + Vector3::new(0.5, 0.5, 0.5)).map(|c| c.max(0.0));
        splats.push(RefSplat {
            mu2,
            conic,
            color,
            opacity: g.opacity,
            depth: p.z,
        });
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.partial_cmp(&splats[b].depth).unwrap().then(a.cmp(&b)));
    let bg = Vector3::new(opts.background[0], opts.background[1], opts.background[2]);
    let mut img = Image::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut color = Vector3::zeros();
            for &si in &order {
                let s = &splats[si];
                let d = px - s.mu2;
                let power = -0.5 * d.dot(&(s.conic * d));
                if power > 0.0 {
                    continue;
                }
                let alpha = (s.opacity * power.exp()).min(opts.alpha_cap);
                if alpha < opts.alpha_skip {
                    continue;
                }
                color += s.color * alpha * t;
                t *= 1.0 - alpha;
            }
            img.set(x, y, color + bg * t);
        }
    }
    Ok(img)
}

/// Rotation matrix from a quaternion assembled elementwise (kept separate
/// from the production implementation on purpose).
fn quat_rotmat_ref(q: &Quat) -> Matrix3<f64> {
    let n = (q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    let (w, x, y, z) = (q.w / n, q.x / n, q.y / n, q.z / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Semantic class layout used by the synthetic generator.
pub const CLASS_ROAD: u32 = 0;
pub const CLASS_BUILDING: u32 = 1;
pub const CLASS_VEHICLE: u32 = 2;
pub const CLASS_OTHER: u32 = 3;
pub const SYNTH_NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Road length along x, meters.
    pub road_length: f64,
    /// Half-width of the road along y, meters.
    pub road_half_width: f64,
    /// Spacing of the street Gaussian lattice, meters.
    pub lattice_step: f64,
    /// Occupancy cell size, meters.
    pub cell_size: f64,
    /// Camera forward motion per frame, meters.
    pub camera_step: f64,
    /// Vehicle forward motion per frame, meters.
    pub vehicle_step: f64,
    /// Uniform noise radius applied to the vehicle pose track handed to the
    /// reconstruction (ground truth stays exact), meters.
    pub vehicle_pose_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            frames: 17,
            width: 128,
            height: 128,
            road_length: 30.0,
            road_half_width: 5.0,
            lattice_step: 0.75,
            cell_size: 0.5,
            camera_step: 0.5,
            vehicle_step: 0.8,
            vehicle_pose_noise: 0.0,
        }
    }
}

/// Ground truth plus observation data for one synthetic driving scene.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Ground-truth model the images were rendered from.
    pub model: SceneModel,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub grids: Vec<OccupancyGrid>,
    /// Per-frame vehicle coverage masks (pixel-major).
    pub vehicle_masks: Vec<Vec<bool>>,
    /// Ground-truth world-frame vehicle centroid per frame.
    pub gt_trajectory: Vec<(usize, Vector3<f64>)>,
    /// The ground-truth vehicle pose track with `vehicle_pose_noise` applied,
    /// as a reconstruction would receive it.
    pub noisy_vehicle_track: Vec<Option<Pose>>,
    pub render_opts: RenderOptions,
}

/// Camera pose at frame `t`: driving forward along +x at eye height, world
/// z-up mapped to the x-right / y-down / z-forward camera frame.
fn synth_camera(cfg: &SynthConfig, t: usize) -> Camera {
    let center = Vector3::new(t as f64 * cfg.camera_step, 0.0, 1.6);
    let r_wc = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let q = rotmat_to_quat(&r_wc);
    let translation = -(r_wc * center);
    Camera {
        fx: 0.9 * cfg.width as f64,
        fy: 0.9 * cfg.width as f64,
        cx: cfg.width as f64 / 2.0,
        cy: cfg.height as f64 / 2.0,
        width: cfg.width,
        height: cfg.height,
        world_to_camera: Pose::new(q, translation),
        // Keep the near plane well ahead of the ground splats directly under
        // the camera: the EWA linearization smears splats that are almost at
        // the optical center across the whole image, walling off the scene.
        near: 2.5,
        far: 120.0,
    }
}

/// Quaternion from a proper rotation matrix (Shepperd's method).
pub fn rotmat_to_quat(r: &Matrix3<f64>) -> Quat {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Quat::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Quat::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q.normalized()
}

fn vehicle_center(cfg: &SynthConfig, t: usize) -> Vector3<f64> {
    // The lateral/vertical placement keeps the box symmetric about grid cell
    // centers, so the cell-centroid pose estimate is unbiased along the axes
    // the vehicle never moves on.
    Vector3::new(5.0 + t as f64 * cfg.vehicle_step, 1.75, 0.75)
}

const VEHICLE_HALF: [f64; 3] = [1.0, 0.6, 0.6];

/// Build the full synthetic scene: ground-truth Gaussians, per-frame
/// cameras, rendered images, semantic occupancy grids, vehicle masks, and
/// the (optionally noised) vehicle pose track.
pub fn make_synthetic(cfg: &SynthConfig) -> Result<SyntheticScene> {
    if cfg.frames < 2 {
        return Err(Error::InvalidArgument("synthetic scene needs at least 2 frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    // Ground plane with a smoothly varying texture.
    let nx = (cfg.road_length / cfg.lattice_step) as usize + 1;
    let ny = (2.0 * cfg.road_half_width / cfg.lattice_step) as usize + 1;
    for ix in 0..nx {
        for iy in 0..ny {
            let x = ix as f64 * cfg.lattice_step;
            let y = -cfg.road_half_width + iy as f64 * cfg.lattice_step;
            positions.push(Vector3::new(x, y, 0.0));
            let shade = 0.34 + 0.28 * ((x * 2.7).sin() * (y * 3.1).cos()) + rng.gen_range(-0.06..0.06);
            colors.push(Vector3::new(
                shade,
                shade * (0.75 + 0.25 * (x * 2.1).cos()),
                shade + 0.05,
            ));
            labels.push(CLASS_ROAD);
        }
    }
    // Two building walls flanking the road.
    for side in [-1.0, 1.0] {
        for ix in 0..nx {
            for iz in 0..4 {
                let x = ix as f64 * cfg.lattice_step;
                let z = 0.6 + iz as f64 * 0.75;
                positions.push(Vector3::new(x, side * (cfg.road_half_width + 0.4), z));
                let shade = 0.5 + 0.3 * ((x * 2.3 + z * 1.9).sin()) + rng.gen_range(-0.05..0.05);
                colors.push(Vector3::new(shade, shade * 0.85, shade * 0.7));
                labels.push(CLASS_BUILDING);
            }
        }
    }
    let n = positions.len();
    let iso = cfg.lattice_step * 0.55;
    let street = StreetGaussians {
        positions,
        rotations: vec![Quat::identity(); n],
        log_scales: vec![Vector3::new(iso.ln(), iso.ln(), iso.ln()); n],
        opacity_logits: vec![logit(0.92); n],
        sh: colors
            .iter()
            .map(|c| {
                let mut sh = ShCoefficients::zeros(0);
                sh.coeffs[0] = (c - Vector3::new(0.5, 0.5, 0.5)) / SH_C0;
                sh
            })
            .collect(),
        semantic_logits: labels
            .iter()
            .map(|&l| {
                let mut v = vec![0.0; SYNTH_NUM_CLASSES];
                v[l as usize] = 4.0;
                v
            })
            .collect(),
        num_classes: SYNTH_NUM_CLASSES,
    };
    // Box vehicle sampled on a dense volume lattice with small splats, so
    // its rendered silhouette tracks the nominal box instead of smearing far
    // past it: the apparent extent is the only cue anchoring the absolute
    // depth of a rigid object with a per-frame pose track.
    let mut vpos = Vec::new();
    let mut vcol = Vec::new();
    for ix in 0..9 {
        for iy in 0..5 {
            for iz in 0..5 {
                let p = Vector3::new(
                    -VEHICLE_HALF[0] + ix as f64 * (2.0 * VEHICLE_HALF[0] / 8.0),
                    -VEHICLE_HALF[1] + iy as f64 * (2.0 * VEHICLE_HALF[1] / 4.0),
                    -VEHICLE_HALF[2] + iz as f64 * (2.0 * VEHICLE_HALF[2] / 4.0),
                );
                vpos.push(p);
                vcol.push(Vector3::new(
                    0.8 + rng.gen_range(-0.05..0.05),
                    0.12 + 0.1 * (iz as f64 / 4.0),
                    0.1,
                ));
            }
        }
    }
    let nv = vpos.len();
    let base_poses: Vec<Option<Pose>> = (0..cfg.frames)
        .map(|t| Some(Pose::new(Quat::identity(), vehicle_center(cfg, t))))
        .collect();
    let viso = 0.13f64;
    let vehicle = VehicleModel {
        object_id: 0,
        positions: vpos,
        rotations: vec![Quat::identity(); nv],
        log_scales: vec![Vector3::new(viso.ln(), viso.ln(), viso.ln()); nv],
        opacity_logits: vec![logit(0.9); nv],
        fourier_sh: vcol
            .iter()
            .map(|c| {
                let mut f = FourierShCoefficients::zeros(0, 1);
                f.coeffs[0] = (c - Vector3::new(0.5, 0.5, 0.5)) / SH_C0;
                f
            })
            .collect(),
        semantic_logit: 4.0,
        base_poses: base_poses.clone(),
        delta_rot: vec![Vector3::zeros(); cfg.frames],
        delta_trans: vec![Vector3::zeros(); cfg.frames],
        frozen: false,
    };
    let model = SceneModel {
        street,
        vehicles: vec![vehicle],
        frame_count: cfg.frames,
        num_classes: SYNTH_NUM_CLASSES,
        vehicle_class: CLASS_VEHICLE,
        rotation_convention: RotationConvention::Composed,
    };
    let render_opts = RenderOptions {
        background: [0.35, 0.55, 0.75],
        ..Default::default()
    };
    let cameras: Vec<Camera> = (0..cfg.frames).map(|t| synth_camera(cfg, t)).collect();
    let mut images = Vec::with_capacity(cfg.frames);
    let mut vehicle_masks = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let scene = assemble(&model.street, &model.vehicles, t, cfg.frames, model.rotation_convention);
        images.push(render_assembled(&scene, &cameras[t], &render_opts)?.rgb);
        // Vehicle coverage: composite the vehicle alone, mask where it has
        // meaningful opacity.
        let empty_street = StreetGaussians {
            positions: vec![],
            rotations: vec![],
            log_scales: vec![],
            opacity_logits: vec![],
            sh: vec![],
            semantic_logits: vec![],
            num_classes: SYNTH_NUM_CLASSES,
        };
        let vscene = assemble(&empty_street, &model.vehicles, t, cfg.frames, model.rotation_convention);
        let vout = render_assembled(&vscene, &cameras[t], &render_opts)?;
        vehicle_masks.push(vout.transmittance.iter().map(|&t| t < 0.5).collect());
    }
    let grids = (0..cfg.frames).map(|t| synth_grid(cfg, t)).collect();
    let gt_trajectory = (0..cfg.frames)
        .map(|t| (t, model.vehicles[0].world_centroid(t).unwrap()))
        .collect();
    let noisy_vehicle_track = base_poses
        .into_iter()
        .map(|p| {
            p.map(|mut pose| {
                pose.translation += Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ) * cfg.vehicle_pose_noise;
                pose
            })
        })
        .collect();
    Ok(SyntheticScene {
        model,
        cameras,
        images,
        grids,
        vehicle_masks,
        gt_trajectory,
        noisy_vehicle_track,
        render_opts,
    })
}

/// World-fixed semantic occupancy grid describing the synthetic layout at
/// frame `t`.
fn synth_grid(cfg: &SynthConfig, t: usize) -> OccupancyGrid {
    let origin = Vector3::new(-1.0, -cfg.road_half_width - 1.5, -0.5);
    let extent = Vector3::new(
        cfg.road_length + 3.0,
        2.0 * (cfg.road_half_width + 1.5),
        4.0,
    );
    let dims = (
        (extent.x / cfg.cell_size).ceil() as usize,
        (extent.y / cfg.cell_size).ceil() as usize,
        (extent.z / cfg.cell_size).ceil() as usize,
    );
    let mut grid = OccupancyGrid::empty(dims, origin, cfg.cell_size, SYNTH_NUM_CLASSES, t);
    let vc = vehicle_center(cfg, t);
    for k in 0..dims.2 {
        for j in 0..dims.1 {
            for i in 0..dims.0 {
                let c = grid.cell_center(i, j, k);
                let mut class = None;
                if (c.x - vc.x).abs() <= VEHICLE_HALF[0]
                    && (c.y - vc.y).abs() <= VEHICLE_HALF[1]
                    && (c.z - vc.z).abs() <= VEHICLE_HALF[2]
                {
                    class = Some(CLASS_VEHICLE);
                } else if c.z.abs() <= cfg.cell_size * 0.5
                    && (0.0..=cfg.road_length).contains(&c.x)
                    && c.y.abs() <= cfg.road_half_width
                {
                    class = Some(CLASS_ROAD);
                } else if (c.y.abs() - (cfg.road_half_width + 0.4)).abs() <= cfg.cell_size * 0.5
                    && (0.0..=cfg.road_length).contains(&c.x)
                    && (0.2..=3.2).contains(&c.z)
                {
                    class = Some(CLASS_BUILDING);
                }
                if let Some(cl) = class {
                    let idx = grid.idx(i, j, k);
                    grid.occupancy[idx] = 0.95;
                    let off = idx * SYNTH_NUM_CLASSES;
                    for cc in 0..SYNTH_NUM_CLASSES {
                        grid.class_probs[off + cc] = if cc == cl as usize {
                            0.91
                        } else {
                            0.03
                        };
                    }
                }
            }
        }
    }
    grid
}

/// Mean world-frame distance between a reconstructed vehicle trajectory and
/// ground truth over the frames both cover.
pub fn trajectory_error(
    reconstructed: &[(usize, Vector3<f64>)],
    ground_truth: &[(usize, Vector3<f64>)],
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (f, c) in reconstructed {
        if let Some((_, g)) = ground_truth.iter().find(|(gf, _)| gf == f) {
            sum += (c - g).norm();
            count += 1;
        }
    }
    if count == 0 {
        return f64::NAN;
    }
    sum / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psnr_identical_hits_ceiling() {
        let img = Image::filled(8, 8, Vector3::new(0.3, 0.4, 0.5));
        assert_relative_eq!(psnr(&img, &img).unwrap(), 100.0);
    }

    #[test]
    fn psnr_uniform_offset_pair() {
        // Uniform images 0.1 apart: MSE = 0.01, PSNR = 20 dB exactly.
        let a = Image::filled(8, 8, Vector3::new(0.4, 0.4, 0.4));
        let b = Image::filled(8, 8, Vector3::new(0.5, 0.5, 0.5));
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn psnr_dym_masks_pixels() {
        let mut a = Image::filled(4, 4, Vector3::new(0.5, 0.5, 0.5));
        let b = Image::filled(4, 4, Vector3::new(0.5, 0.5, 0.5));
        // Corrupt an unmasked pixel: masked PSNR stays at the ceiling.
        a.set(0, 0, Vector3::new(0.0, 0.0, 0.0));
        let mut mask = vec![false; 16];
        mask[5] = true;
        assert_relative_eq!(psnr_dym(&a, &b, &mask).unwrap(), 100.0);
        // Empty mask also reports the ceiling.
        assert_relative_eq!(psnr_dym(&a, &b, &vec![false; 16]).unwrap(), 100.0);
        // Masking the corrupted pixel drops it.
        mask[0] = true;
        assert!(psnr_dym(&a, &b, &mask).unwrap() < 10.0);
    }

    #[test]
    fn rotmat_quat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..50 {
            let q = Quat::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalized();
            let r = crate::geom::quat_to_rotmat(&q);
            let q2 = rotmat_to_quat(&r);
            let r2 = crate::geom::quat_to_rotmat(&q2);
            assert_relative_eq!(r, r2, epsilon = 1e-9);
        }
    }

    #[test]
    fn tiled_renderer_matches_reference_on_synthetic_frame() {
        let cfg = SynthConfig {
            frames: 3,
            width: 64,
            height: 64,
            road_length: 12.0,
            ..Default::default()
        };
        let synth = make_synthetic(&cfg).unwrap();
        let scene = assemble(
            &synth.model.street,
            &synth.model.vehicles,
            1,
            cfg.frames,
            synth.model.rotation_convention,
        );
        let tiled = render_assembled(&scene, &synth.cameras[1], &synth.render_opts).unwrap();
        let oracle = reference_render(&scene, &synth.cameras[1], &synth.render_opts).unwrap();
        let max_diff = tiled
            .rgb
            .data
            .iter()
            .zip(oracle.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "max diff {}", max_diff);
    }

    #[test]
    fn synthetic_scene_shape() {
        let cfg = SynthConfig {
            frames: 4,
            width: 48,
            height: 48,
            road_length: 10.0,
            ..Default::default()
        };
        let synth = make_synthetic(&cfg).unwrap();
        assert_eq!(synth.cameras.len(), 4);
        assert_eq!(synth.images.len(), 4);
        assert_eq!(synth.grids.len(), 4);
        assert_eq!(synth.gt_trajectory.len(), 4);
        // The vehicle moves vehicle_step per frame in x.
        let d = synth.gt_trajectory[1].1 - synth.gt_trajectory[0].1;
        assert_relative_eq!(d.x, cfg.vehicle_step, epsilon = 1e-9);
        // Grids see the vehicle where the trajectory says it is.
        for t in 0..4 {
            let grid = &synth.grids[t];
            let vc = synth.gt_trajectory[t].1;
            let (i, j, k) = grid.cell_at(&vc).unwrap();
            let idx = grid.idx(i, j, k);
            assert!(grid.occupancy[idx] > 0.5);
            let probs = &grid.class_probs[idx * SYNTH_NUM_CLASSES..(idx + 1) * SYNTH_NUM_CLASSES];
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax as u32, CLASS_VEHICLE);
        }
        // Vehicle masks are non-empty and smaller than the full image.
        for m in &synth.vehicle_masks {
            let c = m.iter().filter(|&&b| b).count();
            assert!(c > 0 && c < m.len());
        }
        // Noise is honored.
        let cfg2 = SynthConfig {
            vehicle_pose_noise: 0.5,
            ..cfg
        };
        let synth2 = make_synthetic(&cfg2).unwrap();
        let noisy = synth2.noisy_vehicle_track[1].unwrap();
        let clean = synth2.model.vehicles[0].base_poses[1].unwrap();
        let d = (noisy.translation - clean.translation).norm();
        assert!(d > 0.0 && d <= 0.5 * 3.0f64.sqrt() + 1e-9);
    }

    #[test]
    fn trajectory_error_zero_for_identity() {
        let t: Vec<(usize, Vector3<f64>)> = (0..5).map(|f| (f, Vector3::new(f as f64, 0.0, 0.0))).collect();
        assert_relative_eq!(trajectory_error(&t, &t), 0.0);
        let shifted: Vec<_> = t.iter().map(|(f, c)| (*f, c + Vector3::new(0.2, 0.0, 0.0))).collect();
        assert_relative_eq!(trajectory_error(&shifted, &t), 0.2, epsilon = 1e-12);
    }
}
