//! Tiled forward rasterizer for world-frame Gaussians: EWA projection to
//! screen-space ellipses, 16x16 tile binning, front-to-back alpha
//! compositing per pixel.

mod backward;
mod camera;

pub use backward::{render_with_grads, SceneGrads, StreetGrads, VehicleGrads};
pub use camera::Camera;

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::geom::{build_covariance, eval_sh, quat_to_rotmat};
use crate::image_buf::Image;
use crate::scene::{semantic_output, AssembledScene};

/// Rasterizer knobs. Defaults follow the usual splatting conventions; the
/// termination threshold is conservative so the tiled result stays within
/// strict tolerance of an untruncated per-pixel sum.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub background: [f64; 3],
    pub tile_size: usize,
    /// Per-splat alpha ceiling.
    pub alpha_cap: f64,
    /// Contributions below this alpha are skipped.
    pub alpha_skip: f64,
    /// Stop compositing once transmittance falls below this.
    pub term_transmittance: f64,
    /// Screen-space low-pass filter added to the projected covariance, px^2.
    pub lowpass_floor: f64,
    /// Tile-binning radius in units of the largest screen-space sigma. Sized
    /// so anything outside the bound falls below `alpha_skip`.
    pub bound_sigma: f64,
    /// Composite per-pixel class distributions as `(num_classes, vehicle_class)`.
    pub semantic: Option<(usize, u32)>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: [0.0, 0.0, 0.0],
            tile_size: 16,
            alpha_cap: 0.99,
            alpha_skip: 1.0 / 255.0,
            term_transmittance: 1e-7,
            lowpass_floor: 0.3,
            bound_sigma: 3.5,
            semantic: None,
        }
    }
}

/// A Gaussian after projection to the image plane.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    /// Index into the assembled scene.
    pub index: usize,
    pub mu2: Vector2<f64>,
    pub depth: f64,
    pub p_cam: Vector3<f64>,
    pub cov2: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Activated RGB (clamped non-negative).
    pub color: Vector3<f64>,
    /// Pre-clamp RGB, kept for the backward clamp mask.
    pub color_raw: Vector3<f64>,
    pub opacity: f64,
    /// Binning radius in pixels.
    pub radius: f64,
}

/// EWA projection of one world-frame Gaussian. `None` when depth-culled or
/// numerically degenerate.
pub fn project_gaussian(
    g: &crate::scene::AssembledGaussian,
    index: usize,
    cam: &Camera,
    opts: &RenderOptions,
) -> Option<ProjectedSplat> {
    let p_cam = cam.to_camera(&g.position);
    if !(p_cam.z >= cam.near && p_cam.z <= cam.far) {
        return None;
    }
    let cov3 = build_covariance(&g.scale, &g.rotation).ok()?;
    let w = quat_to_rotmat(&cam.world_to_camera.rotation);
    let m = w * cov3 * w.transpose();
    let j = jacobian(cam, &p_cam);
    let mut cov2 = j * m * j.transpose();
    cov2[(0, 0)] += opts.lowpass_floor;
    cov2[(1, 1)] += opts.lowpass_floor;
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let half = ((0.5 * (cov2[(0, 0)] - cov2[(1, 1)])).powi(2) + cov2[(0, 1)] * cov2[(1, 0)]).max(0.0);
    let lambda_max = mid + half.sqrt();
    let radius = opts.bound_sigma * lambda_max.sqrt();
    let mu2 = cam.project(&p_cam);
    let dir = view_direction(&g.position, &cam.center());
    let color_raw = eval_sh(&g.sh, &dir) + Vector3::new(0.5, 0.5, 0.5);
    let color = color_raw.map(|c| c.max(0.0));
    Some(ProjectedSplat {
        index,
        mu2,
        depth: p_cam.z,
        p_cam,
        cov2,
        conic,
        color,
        color_raw,
        opacity: g.opacity,
        radius,
    })
}

pub(crate) fn jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let z2 = p.z * p.z;
    Matrix2x3::new(
        cam.fx / p.z,
        0.0,
        -cam.fx * p.x / z2,
        0.0,
        cam.fy / p.z,
        -cam.fy * p.y / z2,
    )
}

pub(crate) fn view_direction(p_world: &Vector3<f64>, center: &Vector3<f64>) -> Vector3<f64> {
    let v = p_world - center;
    let n = v.norm();
    if n < 1e-12 {
        Vector3::new(0.0, 0.0, 1.0)
    } else {
        v / n
    }
}

pub(crate) fn project_all(
    scene: &AssembledScene,
    cam: &Camera,
    opts: &RenderOptions,
) -> Vec<ProjectedSplat> {
    scene
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| project_gaussian(g, i, cam, opts))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Per-tile splat index lists, each depth-sorted front to back (ties broken
/// by splat index so the order is deterministic).
pub struct TileGrid {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: usize,
    pub bins: Vec<Vec<u32>>,
}

pub fn bin_tiles(splats: &[ProjectedSplat], width: usize, height: usize, tile_size: usize) -> TileGrid {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    let ts = tile_size as f64;
    for (si, s) in splats.iter().enumerate() {
        let x0 = (((s.mu2.x - s.radius) / ts).floor() as i64).max(0);
        let x1 = (((s.mu2.x + s.radius) / ts).floor() as i64).min(tiles_x as i64 - 1);
        let y0 = (((s.mu2.y - s.radius) / ts).floor() as i64).max(0);
        let y1 = (((s.mu2.y + s.radius) / ts).floor() as i64).min(tiles_y as i64 - 1);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty as usize * tiles_x + tx as usize].push(si as u32);
            }
        }
    }
    for bin in bins.iter_mut() {
        bin.sort_by(|&a, &b| {
            let (da, db) = (splats[a as usize].depth, splats[b as usize].depth);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
    }
    TileGrid {
        tiles_x,
        tiles_y,
        tile_size,
        bins,
    }
}

/// One compositing step recorded for the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    /// Index into the tile's depth-sorted bin list.
    pub local: u32,
    pub alpha: f64,
    pub capped: bool,
}

pub(crate) struct PixelOut {
    pub color: Vector3<f64>,
    pub depth: f64,
    pub transmittance: f64,
}

/// Front-to-back compositing at one pixel center. `semantic` holds per-splat
/// class distributions flattened splat-major; `sem_out` receives the
/// composited distribution (no background mass). `contribs`, when present,
/// records every accepted step for the backward pass.
pub(crate) fn composite_pixel(
    px: f64,
    py: f64,
    order: &[u32],
    splats: &[ProjectedSplat],
    opts: &RenderOptions,
    semantic: Option<(&[f64], usize)>,
    mut sem_out: Option<&mut [f64]>,
    mut contribs: Option<&mut Vec<Contribution>>,
) -> PixelOut {
    let mut t = 1.0;
    let mut color = Vector3::zeros();
    let mut depth = 0.0;
    if let Some(c) = contribs.as_deref_mut() {
        c.clear();
    }
    for (local, &si) in order.iter().enumerate() {
        let s = &splats[si as usize];
        let d = Vector2::new(px - s.mu2.x, py - s.mu2.y);
        let power = -0.5 * (d.transpose() * s.conic * d)[(0, 0)];
        if power > 0.0 {
            continue;
        }
        let raw = s.opacity * power.exp();
        let capped = raw > opts.alpha_cap;
        let alpha = if capped { opts.alpha_cap } else { raw };
        if alpha < opts.alpha_skip {
            continue;
        }
        let weight = alpha * t;
        color += s.color * weight;
        depth += s.depth * weight;
        if let (Some((dists, nc)), Some(out)) = (semantic, sem_out.as_deref_mut()) {
            let base = si as usize * nc;
            for c in 0..nc {
                out[c] += dists[base + c] * weight;
            }
        }
        if let Some(c) = contribs.as_deref_mut() {
            c.push(Contribution {
                local: local as u32,
                alpha,
                capped,
            });
        }
        t *= 1.0 - alpha;
        if t < opts.term_transmittance {
            break;
        }
    }
    let bg = Vector3::new(opts.background[0], opts.background[1], opts.background[2]);
    color += bg * t;
    PixelOut {
        color,
        depth,
        transmittance: t,
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: Image,
    /// Alpha-weighted depth per pixel, row-major.
    pub depth: Vec<f64>,
    /// Residual transmittance per pixel, row-major.
    pub transmittance: Vec<f64>,
    /// Composited class distributions, row-major `num_classes` per pixel.
    pub semantic: Option<Vec<f64>>,
    pub num_classes: usize,
}

/// Rasterize an assembled scene. Tiles run in parallel; each owns a disjoint
/// pixel block, so the output is independent of the thread count.
pub fn render_assembled(scene: &AssembledScene, cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    cam.validate()?;
    let splats = project_all(scene, cam, opts);
    let grid = bin_tiles(&splats, cam.width, cam.height, opts.tile_size);
    let sem_dists: Option<(Vec<f64>, usize)> = opts.semantic.map(|(nc, vc)| {
        let per_gaussian = semantic_output(scene, nc, vc);
        let mut flat = vec![0.0; splats.len() * nc];
        for (si, s) in splats.iter().enumerate() {
            flat[si * nc..(si + 1) * nc].copy_from_slice(&per_gaussian[s.index]);
        }
        (flat, nc)
    });
    let nc = sem_dists.as_ref().map(|(_, n)| *n).unwrap_or(0);

    struct TileOut {
        color: Vec<Vector3<f64>>,
        depth: Vec<f64>,
        trans: Vec<f64>,
        sem: Vec<f64>,
    }
    let tile_results: Vec<TileOut> = (0..grid.bins.len())
        .into_par_iter()
        .map(|ti| {
            let ts = grid.tile_size;
            let tx = ti % grid.tiles_x;
            let ty = ti / grid.tiles_x;
            let x_lo = tx * ts;
            let y_lo = ty * ts;
            let w = ts.min(cam.width - x_lo);
            let h = ts.min(cam.height - y_lo);
            let mut out = TileOut {
                color: Vec::with_capacity(w * h),
                depth: Vec::with_capacity(w * h),
                trans: Vec::with_capacity(w * h),
                sem: vec![0.0; w * h * nc],
            };
            for dy in 0..h {
                for dx in 0..w {
                    let px = (x_lo + dx) as f64 + 0.5;
                    let py = (y_lo + dy) as f64 + 0.5;
                    let sem_slice = sem_dists
                        .as_ref()
                        .map(|_| &mut out.sem[(dy * w + dx) * nc..(dy * w + dx + 1) * nc]);
                    let p = composite_pixel(
                        px,
                        py,
                        &grid.bins[ti],
                        &splats,
                        opts,
                        sem_dists.as_ref().map(|(f, n)| (f.as_slice(), *n)),
                        sem_slice,
                        None,
                    );
                    out.color.push(p.color);
                    out.depth.push(p.depth);
                    out.trans.push(p.transmittance);
                }
            }
            out
        })
        .collect();

    let mut rgb = Image::new(cam.width, cam.height);
    let mut depth = vec![0.0; cam.width * cam.height];
    let mut trans = vec![0.0; cam.width * cam.height];
    let mut sem = sem_dists.as_ref().map(|_| vec![0.0; cam.width * cam.height * nc]);
    for (ti, tile) in tile_results.into_iter().enumerate() {
        let ts = grid.tile_size;
        let tx = ti % grid.tiles_x;
        let ty = ti / grid.tiles_x;
        let x_lo = tx * ts;
        let y_lo = ty * ts;
        let w = ts.min(cam.width - x_lo);
        let h = ts.min(cam.height - y_lo);
        for dy in 0..h {
            for dx in 0..w {
                let (x, y) = (x_lo + dx, y_lo + dy);
                rgb.set(x, y, tile.color[dy * w + dx]);
                depth[y * cam.width + x] = tile.depth[dy * w + dx];
                trans[y * cam.width + x] = tile.trans[dy * w + dx];
                if let Some(sem) = sem.as_deref_mut() {
                    let dst = (y * cam.width + x) * nc;
                    let src = (dy * w + dx) * nc;
                    sem[dst..dst + nc].copy_from_slice(&tile.sem[src..src + nc]);
                }
            }
        }
    }
    Ok(RenderOutput {
        rgb,
        depth,
        transmittance: trans,
        semantic: sem,
        num_classes: nc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{
        FourierShCoefficients, Pose, Quat, RotationConvention, ShCoefficients, SH_C0,
    };
    use crate::scene::{AssembledGaussian, SceneModel, SemanticParams, StreetGaussians, VehicleModel};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn axis_camera() -> Camera {
        // Principal point at the center of pixel (50, 50).
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 50.5,
            cy: 50.5,
            width: 101,
            height: 101,
            world_to_camera: Pose::identity(),
            near: 0.1,
            far: 100.0,
        }
    }

    fn solid_gaussian(z: f64, color: Vector3<f64>, opacity: f64) -> AssembledGaussian {
        let mut sh = ShCoefficients::zeros(0);
        sh.coeffs[0] = (color - Vector3::new(0.5, 0.5, 0.5)) / SH_C0;
        AssembledGaussian {
            position: Vector3::new(0.0, 0.0, z),
            rotation: Quat::identity(),
            scale: Vector3::new(0.3, 0.3, 0.3),
            opacity,
            sh,
            semantic: SemanticParams::VehicleLogit(0.0),
        }
    }

    fn scene_of(gaussians: Vec<AssembledGaussian>) -> AssembledScene {
        let provenance = (0..gaussians.len()).map(crate::scene::Provenance::Street).collect();
        AssembledScene {
            gaussians,
            provenance,
            frame: 0,
            frame_count: 1,
        }
    }

    #[test]
    fn single_splat_closed_form() {
        // a = alpha*c + (1-alpha)*bg at the splat center.
        let cam = axis_camera();
        let c1 = Vector3::new(0.8, 0.3, 0.1);
        let alpha = 0.6;
        let scene = scene_of(vec![solid_gaussian(4.0, c1, alpha)]);
        let opts = RenderOptions {
            background: [0.1, 0.2, 0.3],
            ..Default::default()
        };
        let out = render_assembled(&scene, &cam, &opts).unwrap();
        let bg = Vector3::new(0.1, 0.2, 0.3);
        let expect = c1 * alpha + bg * (1.0 - alpha);
        let got = out.rgb.get(50, 50);
        assert_relative_eq!(got, expect, epsilon = 1e-12);
        // depth is alpha-weighted, transmittance is what remains.
        assert_relative_eq!(out.depth[50 * 101 + 50], alpha * 4.0, epsilon = 1e-12);
        assert_relative_eq!(out.transmittance[50 * 101 + 50], 1.0 - alpha, epsilon = 1e-12);
    }

    #[test]
    fn two_splat_closed_form() {
        let cam = axis_camera();
        let (c1, c2) = (Vector3::new(0.9, 0.1, 0.2), Vector3::new(0.2, 0.7, 0.4));
        let (a1, a2) = (0.45, 0.7);
        let scene = scene_of(vec![solid_gaussian(6.0, c2, a2), solid_gaussian(4.0, c1, a1)]);
        let opts = RenderOptions {
            background: [0.05, 0.05, 0.05],
            ..Default::default()
        };
        let out = render_assembled(&scene, &cam, &opts).unwrap();
        let bg = Vector3::new(0.05, 0.05, 0.05);
        let expect = c1 * a1 + c2 * (1.0 - a1) * a2 + bg * (1.0 - a1) * (1.0 - a2);
        assert_relative_eq!(out.rgb.get(50, 50), expect, epsilon = 1e-12);
    }

    #[test]
    fn opacity_cap_applies() {
        let cam = axis_camera();
        let c1 = Vector3::new(1.0, 1.0, 1.0);
        let scene = scene_of(vec![solid_gaussian(4.0, c1, 0.9999)]);
        let out = render_assembled(&scene, &cam, &RenderOptions::default()).unwrap();
        assert_relative_eq!(out.rgb.get(50, 50).x, 0.99, epsilon = 1e-12);
    }

    #[test]
    fn tiny_alpha_skipped() {
        let cam = axis_camera();
        let scene = scene_of(vec![solid_gaussian(4.0, Vector3::new(1.0, 1.0, 1.0), 0.003)]);
        let opts = RenderOptions {
            background: [0.25, 0.25, 0.25],
            ..Default::default()
        };
        let out = render_assembled(&scene, &cam, &opts).unwrap();
        assert_relative_eq!(out.rgb.get(50, 50), Vector3::new(0.25, 0.25, 0.25), epsilon = 1e-12);
    }

    #[test]
    fn termination_stops_compositing() {
        let cam = axis_camera();
        let (c1, c2) = (Vector3::new(0.9, 0.0, 0.0), Vector3::new(0.0, 0.9, 0.0));
        let scene = scene_of(vec![solid_gaussian(4.0, c1, 0.9), solid_gaussian(5.0, c2, 0.9)]);
        let opts = RenderOptions {
            background: [1.0, 1.0, 1.0],
            term_transmittance: 0.5,
            ..Default::default()
        };
        let out = render_assembled(&scene, &cam, &opts).unwrap();
        // After the first splat T = 0.1 < 0.5, so the second never composites.
        let expect = c1 * 0.9 + Vector3::new(1.0, 1.0, 1.0) * 0.1;
        assert_relative_eq!(out.rgb.get(50, 50), expect, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_and_far_culled() {
        let cam = axis_camera();
        let scene = scene_of(vec![
            solid_gaussian(-2.0, Vector3::new(1.0, 0.0, 0.0), 0.9),
            solid_gaussian(500.0, Vector3::new(1.0, 0.0, 0.0), 0.9),
        ]);
        let opts = RenderOptions::default();
        assert!(project_all(&scene, &cam, &opts).is_empty());
    }

    fn random_scene(rng: &mut impl Rng, n: usize) -> AssembledScene {
        let gaussians = (0..n)
            .map(|_| {
                let mut sh = ShCoefficients::zeros(1);
                sh.coeffs[0] = Vector3::new(
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                );
                for c in 1..4 {
                    sh.coeffs[c] = Vector3::new(
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.1..0.1),
                    );
                }
                AssembledGaussian {
                    position: Vector3::new(
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(3.0..7.0),
                    ),
                    rotation: Quat::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                    .normalized(),
                    scale: Vector3::new(
                        rng.gen_range(0.05..0.4),
                        rng.gen_range(0.05..0.4),
                        rng.gen_range(0.05..0.4),
                    ),
                    opacity: rng.gen_range(0.2..0.85),
                    sh,
                    semantic: SemanticParams::VehicleLogit(0.0),
                }
            })
            .collect();
        scene_of(gaussians)
    }

    #[test]
    fn tiled_matches_global_per_pixel_sum() {
        // Brute force: every splat at every pixel, globally depth-sorted,
        // no tiles / bounding / termination.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cam = Camera {
            fx: 60.0,
            fy: 60.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            world_to_camera: Pose::identity(),
            near: 0.1,
            far: 100.0,
        };
        for trial in 0..3 {
            let scene = random_scene(&mut rng, 30 + trial * 10);
            let opts = RenderOptions {
                background: [0.3, 0.1, 0.2],
                ..Default::default()
            };
            let out = render_assembled(&scene, &cam, &opts).unwrap();
            let splats = project_all(&scene, &cam, &opts);
            let mut order: Vec<u32> = (0..splats.len() as u32).collect();
            order.sort_by(|&a, &b| {
                splats[a as usize]
                    .depth
                    .partial_cmp(&splats[b as usize].depth)
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let ref_opts = RenderOptions {
                term_transmittance: 0.0,
                ..opts.clone()
            };
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let p = composite_pixel(
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        &order,
                        &splats,
                        &ref_opts,
                        None,
                        None,
                        None,
                    );
                    let diff = (out.rgb.get(x, y) - p.color).abs().max();
                    assert!(diff < 1e-6, "pixel ({}, {}) diff {}", x, y, diff);
                }
            }
        }
    }

    #[test]
    fn semantic_compositing_sums_to_coverage() {
        let cam = axis_camera();
        let scene = scene_of(vec![solid_gaussian(4.0, Vector3::new(0.5, 0.5, 0.5), 0.7)]);
        let opts = RenderOptions {
            semantic: Some((3, 2)),
            ..Default::default()
        };
        let out = render_assembled(&scene, &cam, &opts).unwrap();
        let sem = out.semantic.unwrap();
        let px = (50 * 101 + 50) * 3;
        let total: f64 = sem[px..px + 3].iter().sum();
        // Class mass sums to 1 - transmittance at each pixel.
        assert_relative_eq!(total, 1.0 - out.transmittance[50 * 101 + 50], epsilon = 1e-9);
    }

    // ---------------------------------------------------------------
    // Finite-difference gradient checks
    // ---------------------------------------------------------------

    fn fd_model(rng: &mut impl Rng) -> SceneModel {
        let n = 10;
        let street = StreetGaussians {
            positions: (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.2..1.2),
                        rng.gen_range(-1.2..1.2),
                        rng.gen_range(3.0..6.0),
                    )
                })
                .collect(),
            rotations: (0..n)
                .map(|_| {
                    Quat::new(
                        rng.gen_range(0.5..1.0),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
            log_scales: (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-2.3..-1.2),
                        rng.gen_range(-2.3..-1.2),
                        rng.gen_range(-2.3..-1.2),
                    )
                })
                .collect(),
            opacity_logits: (0..n).map(|_| rng.gen_range(-1.0..1.2)).collect(),
            sh: (0..n)
                .map(|_| {
                    let mut sh = ShCoefficients::zeros(1);
                    sh.coeffs[0] = Vector3::new(
                        rng.gen_range(0.3..1.0),
                        rng.gen_range(0.3..1.0),
                        rng.gen_range(0.3..1.0),
                    );
                    for c in 1..4 {
                        sh.coeffs[c] = Vector3::new(
                            rng.gen_range(-0.08..0.08),
                            rng.gen_range(-0.08..0.08),
                            rng.gen_range(-0.08..0.08),
                        );
                    }
                    sh
                })
                .collect(),
            semantic_logits: vec![vec![0.0; 3]; n],
            num_classes: 3,
        };
        let nv = 4;
        let vehicle = VehicleModel {
            object_id: 0,
            positions: (0..nv)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-0.4..0.4),
                    )
                })
                .collect(),
            rotations: (0..nv)
                .map(|_| {
                    Quat::new(
                        rng.gen_range(0.5..1.0),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
            log_scales: (0..nv)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-2.0..-1.2),
                        rng.gen_range(-2.0..-1.2),
                        rng.gen_range(-2.0..-1.2),
                    )
                })
                .collect(),
            opacity_logits: (0..nv).map(|_| rng.gen_range(-0.5..1.0)).collect(),
            fourier_sh: (0..nv)
                .map(|_| {
                    let mut f = FourierShCoefficients::zeros(1, 3);
                    for c in f.coeffs.iter_mut() {
                        *c = Vector3::new(
                            rng.gen_range(-0.1..0.1),
                            rng.gen_range(-0.1..0.1),
                            rng.gen_range(-0.1..0.1),
                        );
                    }
                    f.coeffs[0] = Vector3::new(
                        rng.gen_range(0.3..0.9),
                        rng.gen_range(0.3..0.9),
                        rng.gen_range(0.3..0.9),
                    );
                    f
                })
                .collect(),
            semantic_logit: 4.0,
            base_poses: (0..3)
                .map(|t| {
                    Some(Pose::new(
                        Quat::from_axis_angle(&Vector3::new(0.0, 0.1 * t as f64, 0.05)),
                        Vector3::new(-0.3 + 0.3 * t as f64, 0.2, 4.5),
                    ))
                })
                .collect(),
            delta_rot: (0..3)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.04..0.04),
                        rng.gen_range(-0.04..0.04),
                        rng.gen_range(-0.04..0.04),
                    )
                })
                .collect(),
            delta_trans: (0..3)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                    )
                })
                .collect(),
            frozen: false,
        };
        SceneModel {
            street,
            vehicles: vec![vehicle],
            frame_count: 3,
            num_classes: 3,
            vehicle_class: 2,
            rotation_convention: RotationConvention::Composed,
        }
    }

    fn fd_opts() -> RenderOptions {
        // Smooth everywhere: no termination cutoff and a negligible skip
        // threshold so finite differences see a differentiable function.
        RenderOptions {
            background: [0.15, 0.1, 0.2],
            alpha_skip: 1e-12,
            term_transmittance: 0.0,
            bound_sigma: 7.0,
            ..Default::default()
        }
    }

    fn fd_cam() -> Camera {
        Camera {
            fx: 40.0,
            fy: 40.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
            world_to_camera: Pose::new(
                Quat::from_axis_angle(&Vector3::new(0.02, -0.03, 0.01)),
                Vector3::new(0.05, -0.02, 0.1),
            ),
            near: 0.1,
            far: 100.0,
        }
    }

    fn weighted_loss(model: &SceneModel, frame: usize, cam: &Camera, opts: &RenderOptions, w: &Image) -> f64 {
        let scene = crate::scene::assemble(
            &model.street,
            &model.vehicles,
            frame,
            model.frame_count,
            model.rotation_convention,
        );
        let out = render_assembled(&scene, cam, opts).unwrap();
        out.rgb.data.iter().zip(w.data.iter()).map(|(c, w)| c * w).sum()
    }

    fn fd_check(
        model: &SceneModel,
        cam: &Camera,
        opts: &RenderOptions,
        w: &Image,
        analytic: f64,
        set: &mut dyn FnMut(&mut SceneModel, f64),
        label: &str,
    ) {
        let h = 1e-5;
        let mut mp = model.clone();
        set(&mut mp, h);
        let lp = weighted_loss(&mp, 1, cam, opts, w);
        let mut mm = model.clone();
        set(&mut mm, -h);
        let lm = weighted_loss(&mm, 1, cam, opts, w);
        let fd = (lp - lm) / (2.0 * h);
        let tol = 1e-4 * analytic.abs().max(fd.abs()).max(0.1);
        assert!(
            (analytic - fd).abs() <= tol,
            "{}: analytic {} vs fd {}",
            label,
            analytic,
            fd
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = fd_model(&mut rng);
        let cam = fd_cam();
        let opts = fd_opts();
        let mut w = Image::new(32, 32);
        for v in w.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (_, grads) = render_with_grads(&model, 1, &cam, &opts, &w).unwrap();

        for i in [0usize, 3, 7] {
            for d in 0..3 {
                fd_check(&model, &cam, &opts, &w, grads.street.positions[i][d], &mut |m, h| {
                    m.street.positions[i][d] += h
                }, &format!("street position[{}][{}]", i, d));
                fd_check(&model, &cam, &opts, &w, grads.street.log_scales[i][d], &mut |m, h| {
                    m.street.log_scales[i][d] += h
                }, &format!("street log_scale[{}][{}]", i, d));
            }
            for k in 0..4 {
                fd_check(&model, &cam, &opts, &w, grads.street.rotations[i][k], &mut |m, h| {
                    let mut a = m.street.rotations[i].as_array();
                    a[k] += h;
                    m.street.rotations[i] = Quat::from_array(a);
                }, &format!("street rotation[{}][{}]", i, k));
            }
            fd_check(&model, &cam, &opts, &w, grads.street.opacity_logits[i], &mut |m, h| {
                m.street.opacity_logits[i] += h
            }, &format!("street opacity[{}]", i));
            for b in 0..4 {
                fd_check(&model, &cam, &opts, &w, grads.street.sh[i][b].y, &mut |m, h| {
                    m.street.sh[i].coeffs[b].y += h
                }, &format!("street sh[{}][{}]", i, b));
            }
        }

        for gi in 0..2 {
            for d in 0..3 {
                fd_check(&model, &cam, &opts, &w, grads.vehicles[0].positions[gi][d], &mut |m, h| {
                    m.vehicles[0].positions[gi][d] += h
                }, &format!("vehicle position[{}][{}]", gi, d));
                fd_check(&model, &cam, &opts, &w, grads.vehicles[0].log_scales[gi][d], &mut |m, h| {
                    m.vehicles[0].log_scales[gi][d] += h
                }, &format!("vehicle log_scale[{}][{}]", gi, d));
            }
            for k in 0..4 {
                fd_check(&model, &cam, &opts, &w, grads.vehicles[0].rotations[gi][k], &mut |m, h| {
                    let mut a = m.vehicles[0].rotations[gi].as_array();
                    a[k] += h;
                    m.vehicles[0].rotations[gi] = Quat::from_array(a);
                }, &format!("vehicle rotation[{}][{}]", gi, k));
            }
            fd_check(&model, &cam, &opts, &w, grads.vehicles[0].opacity_logits[gi], &mut |m, h| {
                m.vehicles[0].opacity_logits[gi] += h
            }, &format!("vehicle opacity[{}]", gi));
            for b in [0usize, 1, 5] {
                fd_check(&model, &cam, &opts, &w, grads.vehicles[0].fourier[gi][b].x, &mut |m, h| {
                    m.vehicles[0].fourier_sh[gi].coeffs[b].x += h
                }, &format!("vehicle fourier[{}][{}]", gi, b));
            }
        }
        for d in 0..3 {
            fd_check(&model, &cam, &opts, &w, grads.vehicles[0].delta_rot[d], &mut |m, h| {
                m.vehicles[0].delta_rot[1][d] += h
            }, &format!("delta_rot[{}]", d));
            fd_check(&model, &cam, &opts, &w, grads.vehicles[0].delta_trans[d], &mut |m, h| {
                m.vehicles[0].delta_trans[1][d] += h
            }, &format!("delta_trans[{}]", d));
        }
    }

    #[test]
    fn gradients_match_fd_literal_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut model = fd_model(&mut rng);
        model.rotation_convention = RotationConvention::Literal;
        let cam = fd_cam();
        let opts = fd_opts();
        let mut w = Image::new(32, 32);
        for v in w.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (_, grads) = render_with_grads(&model, 1, &cam, &opts, &w).unwrap();
        for d in 0..3 {
            fd_check(&model, &cam, &opts, &w, grads.vehicles[0].delta_rot[d], &mut |m, h| {
                m.vehicles[0].delta_rot[1][d] += h
            }, &format!("literal delta_rot[{}]", d));
        }
        for k in 0..4 {
            fd_check(&model, &cam, &opts, &w, grads.vehicles[0].rotations[0][k], &mut |m, h| {
                let mut a = m.vehicles[0].rotations[0].as_array();
                a[k] += h;
                m.vehicles[0].rotations[0] = Quat::from_array(a);
            }, &format!("literal vehicle rotation[{}]", k));
        }
    }

    #[test]
    fn forward_output_matches_grad_path_forward() {
        // render_with_grads embeds its own forward pass; it must agree with
        // render_assembled exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = fd_model(&mut rng);
        let cam = fd_cam();
        let opts = RenderOptions::default();
        let d_rgb = Image::new(32, 32);
        let (out_b, _) = render_with_grads(&model, 1, &cam, &opts, &d_rgb).unwrap();
        let scene = crate::scene::assemble(
            &model.street,
            &model.vehicles,
            1,
            model.frame_count,
            model.rotation_convention,
        );
        let out_f = render_assembled(&scene, &cam, &opts).unwrap();
        assert_eq!(out_b.rgb.data, out_f.rgb.data);
        assert_eq!(out_b.depth, out_f.depth);
        assert_eq!(out_b.transmittance, out_f.transmittance);
    }
}
