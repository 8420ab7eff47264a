//! Analytic backward pass for the tiled rasterizer.
//!
//! The chain runs in two stages. Per tile, a recorded forward pass is
//! replayed in reverse to accumulate screen-space gradients per splat
//! (color, 2D mean, conic, opacity). A second per-splat stage then pulls
//! those through projection, the 3D covariance, spherical harmonics and --
//! for vehicle Gaussians -- the pose chain down to every raw parameter.
//!
//! Tile results are reduced in ascending tile order and splat gradients are
//! scattered in ascending splat order, so gradients are independent of the
//! rayon thread count.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::geom::{
    axis_angle_to_quat_vjp, build_covariance_vjp, quat_mul_vjp, quat_normalize_vjp,
    quat_rotate_vjp, quat_to_rotmat, sh_basis_with_grad, Quat, RotationConvention,
};
use crate::image_buf::Image;
use crate::scene::{assemble, AssembledScene, Provenance, SceneModel};

use super::{
    bin_tiles, composite_pixel, jacobian, project_all, view_direction, Camera, Contribution,
    ProjectedSplat, RenderOptions, RenderOutput,
};

/// Gradients for the street model, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct StreetGrads {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<Vec<Vector3<f64>>>,
}

/// Gradients for one vehicle at the rendered frame.
#[derive(Debug, Clone)]
pub struct VehicleGrads {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub fourier: Vec<Vec<Vector3<f64>>>,
    /// Axis-angle pose-correction gradient for the rendered frame.
    pub delta_rot: Vector3<f64>,
    pub delta_trans: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct SceneGrads {
    pub street: StreetGrads,
    pub vehicles: Vec<VehicleGrads>,
    pub frame: usize,
}

impl SceneGrads {
    pub fn zeros(model: &SceneModel, frame: usize) -> Self {
        let n = model.street.len();
        SceneGrads {
            street: StreetGrads {
                positions: vec![Vector3::zeros(); n],
                rotations: vec![[0.0; 4]; n],
                log_scales: vec![Vector3::zeros(); n],
                opacity_logits: vec![0.0; n],
                sh: model
                    .street
                    .sh
                    .iter()
                    .map(|s| vec![Vector3::zeros(); s.coeffs.len()])
                    .collect(),
            },
            vehicles: model
                .vehicles
                .iter()
                .map(|v| VehicleGrads {
                    positions: vec![Vector3::zeros(); v.len()],
                    rotations: vec![[0.0; 4]; v.len()],
                    log_scales: vec![Vector3::zeros(); v.len()],
                    opacity_logits: vec![0.0; v.len()],
                    fourier: v
                        .fourier_sh
                        .iter()
                        .map(|f| vec![Vector3::zeros(); f.coeffs.len()])
                        .collect(),
                    delta_rot: Vector3::zeros(),
                    delta_trans: Vector3::zeros(),
                })
                .collect(),
            frame,
        }
    }
}

/// Screen-space gradient accumulator for one splat.
#[derive(Debug, Clone, Copy)]
struct Accum2D {
    d_color: Vector3<f64>,
    d_mu2: Vector2<f64>,
    d_conic: Matrix2<f64>,
    d_opacity: f64,
}

impl Default for Accum2D {
    fn default() -> Self {
        Accum2D {
            d_color: Vector3::zeros(),
            d_mu2: Vector2::zeros(),
            d_conic: Matrix2::zeros(),
            d_opacity: 0.0,
        }
    }
}

impl Accum2D {
    fn add(&mut self, o: &Accum2D) {
        self.d_color += o.d_color;
        self.d_mu2 += o.d_mu2;
        self.d_conic += o.d_conic;
        self.d_opacity += o.d_opacity;
    }

    fn is_zero(&self) -> bool {
        self.d_opacity == 0.0
            && self.d_color == Vector3::zeros()
            && self.d_mu2 == Vector2::zeros()
            && self.d_conic == Matrix2::zeros()
    }
}

/// Render at `frame` and backpropagate `d_rgb` (the loss gradient w.r.t. the
/// output image) down to every raw model parameter.
pub fn render_with_grads(
    model: &SceneModel,
    frame: usize,
    cam: &Camera,
    opts: &RenderOptions,
    d_rgb: &Image,
) -> Result<(RenderOutput, SceneGrads)> {
    cam.validate()?;
    let scene = assemble(
        &model.street,
        &model.vehicles,
        frame,
        model.frame_count,
        model.rotation_convention,
    );
    let splats = project_all(&scene, cam, opts);
    let grid = bin_tiles(&splats, cam.width, cam.height, opts.tile_size);
    let bg = Vector3::new(opts.background[0], opts.background[1], opts.background[2]);

    struct TileOut {
        color: Vec<Vector3<f64>>,
        depth: Vec<f64>,
        trans: Vec<f64>,
        accum: Vec<Accum2D>,
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
            let order = &grid.bins[ti];
            let mut out = TileOut {
                color: Vec::with_capacity(w * h),
                depth: Vec::with_capacity(w * h),
                trans: Vec::with_capacity(w * h),
                accum: vec![Accum2D::default(); order.len()],
            };
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut t_before: Vec<f64> = Vec::new();
            for dy in 0..h {
                for dx in 0..w {
                    let (x, y) = (x_lo + dx, y_lo + dy);
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    let p = composite_pixel(px, py, order, &splats, opts, None, None, Some(&mut contribs));
                    out.color.push(p.color);
                    out.depth.push(p.depth);
                    out.trans.push(p.transmittance);
                    let g = d_rgb.get(x, y);
                    if g == Vector3::zeros() || contribs.is_empty() {
                        continue;
                    }
                    // Transmittance in front of each contribution.
                    t_before.clear();
                    let mut t = 1.0;
                    for c in &contribs {
                        t_before.push(t);
                        t *= 1.0 - c.alpha;
                    }
                    let t_final = t;
                    // Reverse sweep: suffix sum of downstream color mass.
                    let mut suffix = Vector3::zeros();
                    for (i, c) in contribs.iter().enumerate().rev() {
                        let s = &splats[order[c.local as usize] as usize];
                        let ti_front = t_before[i];
                        let weight = c.alpha * ti_front;
                        let acc = &mut out.accum[c.local as usize];
                        acc.d_color += g * weight;
                        let d_alpha = g.dot(&(s.color * ti_front - (suffix + bg * t_final) / (1.0 - c.alpha)));
                        suffix += s.color * weight;
                        if c.capped {
                            continue;
                        }
                        acc.d_opacity += d_alpha * c.alpha / s.opacity;
                        let d = Vector2::new(px - s.mu2.x, py - s.mu2.y);
                        let d_power = d_alpha * c.alpha;
                        acc.d_conic += d * d.transpose() * (-0.5 * d_power);
                        acc.d_mu2 += s.conic * d * d_power;
                    }
                }
            }
            out
        })
        .collect();

    // Fixed-order reduction across tiles.
    let mut accum = vec![Accum2D::default(); splats.len()];
    let mut rgb = Image::new(cam.width, cam.height);
    let mut depth = vec![0.0; cam.width * cam.height];
    let mut trans = vec![0.0; cam.width * cam.height];
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
            }
        }
        for (local, a) in tile.accum.iter().enumerate() {
            if !a.is_zero() {
                accum[grid.bins[ti][local] as usize].add(a);
            }
        }
    }

    // Per-splat pull-back to raw parameters, computed in parallel and
    // scattered sequentially in splat order.
    let param_grads: Vec<Option<ParamGrad>> = splats
        .par_iter()
        .zip(accum.par_iter())
        .map(|(s, a)| {
            if a.is_zero() {
                None
            } else {
                Some(splat_chain(model, &scene, s, a, cam))
            }
        })
        .collect();

    let mut grads = SceneGrads::zeros(model, frame);
    for pg in param_grads.into_iter().flatten() {
        match pg {
            ParamGrad::Street {
                i,
                pos,
                rot,
                log_scale,
                opacity,
                sh,
            } => {
                grads.street.positions[i] += pos;
                for k in 0..4 {
                    grads.street.rotations[i][k] += rot[k];
                }
                grads.street.log_scales[i] += log_scale;
                grads.street.opacity_logits[i] += opacity;
                for (dst, src) in grads.street.sh[i].iter_mut().zip(sh.iter()) {
                    *dst += src;
                }
            }
            ParamGrad::Vehicle {
                v,
                gi,
                pos,
                rot,
                log_scale,
                opacity,
                fourier,
                d_rot,
                d_trans,
            } => {
                let g = &mut grads.vehicles[v];
                g.positions[gi] += pos;
                for k in 0..4 {
                    g.rotations[gi][k] += rot[k];
                }
                g.log_scales[gi] += log_scale;
                g.opacity_logits[gi] += opacity;
                for (dst, src) in g.fourier[gi].iter_mut().zip(fourier.iter()) {
                    *dst += src;
                }
                g.delta_rot += d_rot;
                g.delta_trans += d_trans;
            }
        }
    }

    let out = RenderOutput {
        rgb,
        depth,
        transmittance: trans,
        semantic: None,
        num_classes: 0,
    };
    Ok((out, grads))
}

enum ParamGrad {
    Street {
        i: usize,
        pos: Vector3<f64>,
        rot: [f64; 4],
        log_scale: Vector3<f64>,
        opacity: f64,
        sh: Vec<Vector3<f64>>,
    },
    Vehicle {
        v: usize,
        gi: usize,
        pos: Vector3<f64>,
        rot: [f64; 4],
        log_scale: Vector3<f64>,
        opacity: f64,
        fourier: Vec<Vector3<f64>>,
        d_rot: Vector3<f64>,
        d_trans: Vector3<f64>,
    },
}

fn add4(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

/// Pull screen-space gradients of one splat back to its raw parameters.
fn splat_chain(
    model: &SceneModel,
    scene: &AssembledScene,
    s: &ProjectedSplat,
    a: &Accum2D,
    cam: &Camera,
) -> ParamGrad {
    let g = &scene.gaussians[s.index];
    let prov = scene.provenance[s.index];

    // Opacity: sigmoid activation.
    let d_opacity_logit = a.d_opacity * g.opacity * (1.0 - g.opacity);

    // Conic -> projected covariance: d(A^-1) pulled back as -C G C.
    let d_cov2 = -s.conic * a.d_conic * s.conic;

    // cov2 = J M J^T + floor*I with M = W Sigma_w W^T.
    let w = quat_to_rotmat(&cam.world_to_camera.rotation);
    let cov3 = {
        // Rebuild Sigma_w from the activated parameters (always valid here).
        crate::geom::build_covariance(&g.scale, &g.rotation).expect("projected splat has valid covariance")
    };
    let m = w * cov3 * w.transpose();
    let j = jacobian(cam, &s.p_cam);
    let d_m = j.transpose() * d_cov2 * j;
    let d_j = (d_cov2 + d_cov2.transpose()) * j * m;
    let d_cov3 = w.transpose() * d_m * w;

    // Camera-space mean: both the projection and J depend on it.
    let mut d_pcam = j.transpose() * a.d_mu2;
    let z2 = s.p_cam.z * s.p_cam.z;
    let z3 = z2 * s.p_cam.z;
    d_pcam.x += d_j[(0, 2)] * (-cam.fx / z2);
    d_pcam.y += d_j[(1, 2)] * (-cam.fy / z2);
    d_pcam.z += d_j[(0, 0)] * (-cam.fx / z2)
        + d_j[(1, 1)] * (-cam.fy / z2)
        + d_j[(0, 2)] * (2.0 * cam.fx * s.p_cam.x / z3)
        + d_j[(1, 2)] * (2.0 * cam.fy * s.p_cam.y / z3);
    let mut d_mu_w = w.transpose() * d_pcam;

    // Color: clamp mask, SH coefficients, and the view-direction path.
    let mut d_color = a.d_color;
    for ch in 0..3 {
        if s.color_raw[ch] < 0.0 {
            d_color[ch] = 0.0;
        }
    }
    let center = cam.center();
    let dir = view_direction(&g.position, &center);
    let (basis, basis_grad) = sh_basis_with_grad(g.sh.degree, &dir);
    let d_sh: Vec<Vector3<f64>> = basis.iter().map(|b| d_color * *b).collect();
    let mut d_dir = Vector3::zeros();
    for (bg, coeff) in basis_grad.iter().zip(g.sh.coeffs.iter()) {
        d_dir += bg * coeff.dot(&d_color);
    }
    let v = g.position - center;
    let n = v.norm();
    if n >= 1e-12 {
        d_mu_w += (d_dir - dir * dir.dot(&d_dir)) / n;
    }

    // 3D covariance -> activated scale + unit world rotation.
    let (d_scale_act, d_q_world) = build_covariance_vjp(&g.scale, &g.rotation, &d_cov3);
    let d_log_scale = Vector3::new(
        d_scale_act.x * g.scale.x,
        d_scale_act.y * g.scale.y,
        d_scale_act.z * g.scale.z,
    );

    match prov {
        Provenance::Street(i) => {
            let d_rot = quat_normalize_vjp(&model.street.rotations[i], d_q_world);
            ParamGrad::Street {
                i,
                pos: d_mu_w,
                rot: d_rot,
                log_scale: d_log_scale,
                opacity: d_opacity_logit,
                sh: d_sh,
            }
        }
        Provenance::Vehicle { vehicle, index } => {
            let vm = &model.vehicles[vehicle];
            let pose = vm
                .pose_at(scene.frame)
                .expect("rendered vehicle splat has a pose");
            let base = vm.base_poses[scene.frame].expect("pose_at implies base pose");
            let delta_q = Quat::from_axis_angle(&vm.delta_rot[scene.frame]);
            let q_p = pose.rotation;
            let q_o_unit = vm.rotations[index].normalized();

            // mu_w = R_p mu_o + T_p.
            let (d_qp_mu, d_mu_o) = quat_rotate_vjp(&q_p, &vm.positions[index], &d_mu_w);
            let d_delta_trans = d_mu_w;

            // World rotation per convention.
            let (d_qp_rot, d_qo_unit) = match model.rotation_convention {
                RotationConvention::Composed => {
                    // q_w = q_p * q_o
                    let (d_qp, d_qo) = quat_mul_vjp(&q_p, &q_o_unit, d_q_world);
                    (d_qp, d_qo)
                }
                RotationConvention::Literal => {
                    // q_w = q_o * conj(q_p)
                    let (d_qo, d_qpc) = quat_mul_vjp(&q_o_unit, &q_p.conjugate(), d_q_world);
                    ([d_qpc[0], -d_qpc[1], -d_qpc[2], -d_qpc[3]], d_qo)
                }
            };
            let d_rot = quat_normalize_vjp(&vm.rotations[index], d_qo_unit);

            // q_p = q_base * exp(delta_rot)
            let d_qp = add4(d_qp_mu, d_qp_rot);
            let (_, d_dq) = quat_mul_vjp(&base.rotation, &delta_q, d_qp);
            let d_delta_rot = axis_angle_to_quat_vjp(&vm.delta_rot[scene.frame], d_dq);

            // Fourier-time SH: d coeff[b*k + j] = d_sh[b] * basis_j(t).
            let f = &vm.fourier_sh[index];
            let tbasis = crate::geom::fourier_basis(f.k, crate::scene::t_norm(scene.frame, scene.frame_count));
            let mut d_fourier = vec![Vector3::zeros(); f.coeffs.len()];
            for b in 0..f.num_sh() {
                for (jt, tb) in tbasis.iter().enumerate() {
                    d_fourier[b * f.k + jt] = d_sh[b] * *tb;
                }
            }

            ParamGrad::Vehicle {
                v: vehicle,
                gi: index,
                pos: d_mu_o,
                rot: d_rot,
                log_scale: d_log_scale,
                opacity: d_opacity_logit,
                fourier: d_fourier,
                d_rot: d_delta_rot,
                d_trans: d_delta_trans,
            }
        }
    }
}
