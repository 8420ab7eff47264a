//! Optimization: the photometric loss (L1 + D-SSIM) with analytic image
//! gradients, Adam over the structured scene parameters, periodic
//! densification/pruning of the street Gaussians, and the training loop.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{sigmoid, Pose};
use crate::image_buf::Image;
use crate::render::{render_assembled, render_with_grads, Camera, RenderOptions, SceneGrads};
use crate::scene::{assemble, SceneModel};

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-mode separable correlation of one channel plane with the window.
fn conv_valid(src: &[f64], w: usize, h: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, wi) in win.iter().enumerate() {
                s += src[y * w + x + i] * wi;
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, wi) in win.iter().enumerate() {
                s += tmp[(y + i) * ow + x] * wi;
            }
            out[y * ow + x] = s;
        }
    }
    out
}

fn channel_plane(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM between two same-sized images over valid 11x11 windows
/// (Gaussian-weighted, sigma 1.5), averaged across the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM plus its analytic gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.same_dims(b)?;
    if a.width < SSIM_WIN || a.height < SSIM_WIN {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than the {0}x{0} SSIM window",
            a.width, a.height
        )));
    }
    let win = ssim_window();
    let (w, h) = (a.width, a.height);
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let count = (ow * oh * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    for ch in 0..3 {
        let x = channel_plane(a, ch);
        let y = channel_plane(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(u, v)| u * v).collect();
        let mu_x = conv_valid(&x, w, h, &win);
        let mu_y = conv_valid(&y, w, h, &win);
        let mu_xx = conv_valid(&xx, w, h, &win);
        let mu_yy = conv_valid(&yy, w, h, &win);
        let mu_xy = conv_valid(&xy, w, h, &win);
        // Per-window partials for the gradient scatter.
        let mut p2 = want_grad.then(|| vec![0.0; ow * oh]);
        let mut p3 = want_grad.then(|| vec![0.0; ow * oh]);
        let mut q1 = want_grad.then(|| vec![0.0; ow * oh]);
        for i in 0..ow * oh {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = mu_xx[i] - mx * mx;
            let sy = mu_yy[i] - my * my;
            let sxy = mu_xy[i] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = sx + sy + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if let (Some(p2), Some(p3), Some(q1)) = (p2.as_mut(), p3.as_mut(), q1.as_mut()) {
                // s as a function of (mu_x, sigma_x^2, sigma_xy).
                let d_mu = (2.0 * my * b1 - 2.0 * mx * a1) / (b1 * b1) * (a2 / b2);
                let d_sx = -(a1 / b1) * a2 / (b2 * b2);
                let d_sxy = (a1 / b1) * 2.0 / b2;
                p2[i] = d_sx;
                p3[i] = d_sxy;
                q1[i] = d_mu - 2.0 * d_sx * mx - d_sxy * my;
            }
        }
        if let (Some(p2), Some(p3), Some(q1), Some(grad)) =
            (p2.as_ref(), p3.as_ref(), q1.as_ref(), grad.as_mut())
        {
            // Scatter: d s / d x_px = w_o * (Q1 + 2 P2 x_px + P3 y_px).
            for wy in 0..oh {
                for wx in 0..ow {
                    let i = wy * ow + wx;
                    if q1[i] == 0.0 && p2[i] == 0.0 && p3[i] == 0.0 {
                        continue;
                    }
                    for oy in 0..SSIM_WIN {
                        for ox in 0..SSIM_WIN {
                            let wgt = win[ox] * win[oy];
                            let px = wx + ox;
                            let py = wy + oy;
                            let pi = py * w + px;
                            let xv = x[pi];
                            let yv = y[pi];
                            grad.data[pi * 3 + ch] +=
                                wgt * (q1[i] + 2.0 * p2[i] * xv + p3[i] * yv) / count;
                        }
                    }
                }
            }
        }
    }
    Ok((total / count, grad))
}

// ---------------------------------------------------------------------------
// Photometric loss
// ---------------------------------------------------------------------------

/// Mean absolute difference over all pixel channels.
pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Structural dissimilarity `(1 - SSIM) / 2`, in `[0, 1]`.
pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// `L = (1 - lambda) L1 + lambda D-SSIM`.
pub fn loss(a: &Image, b: &Image, lambda: f64) -> Result<f64> {
    Ok((1.0 - lambda) * l1(a, b)? + lambda * dssim(a, b)?)
}

/// Loss plus its gradient with respect to the rendered image `a`.
pub fn loss_with_grad(a: &Image, b: &Image, lambda: f64) -> Result<(f64, Image)> {
    a.same_dims(b)?;
    let n = a.data.len() as f64;
    let l1_val = l1(a, b)?;
    let (ssim_val, ssim_grad) = ssim_with_grad(a, b)?;
    let total = (1.0 - lambda) * l1_val + lambda * (1.0 - ssim_val) / 2.0;
    let mut grad = Image::new(a.width, a.height);
    for i in 0..a.data.len() {
        let sign = (a.data[i] - b.data[i]).signum() * f64::from(a.data[i] != b.data[i]);
        grad.data[i] = (1.0 - lambda) * sign / n - lambda * 0.5 * ssim_grad.data[i];
    }
    Ok((total, grad))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone)]
struct VehicleMoments {
    pos: Moments,
    rot: Moments,
    scale: Moments,
    opacity: Moments,
    fourier: Moments,
    delta_rot: Moments,
    delta_trans: Moments,
}

/// Adam first/second moments shaped like the scene parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    t: u64,
    street_pos: Moments,
    street_rot: Moments,
    street_scale: Moments,
    street_opacity: Moments,
    street_sh: Moments,
    vehicles: Vec<VehicleMoments>,
}

impl OptimizerState {
    pub fn new(model: &SceneModel) -> Self {
        let n = model.street.len();
        let sh_len: usize = model.street.sh.iter().map(|s| s.coeffs.len() * 3).sum();
        OptimizerState {
            t: 0,
            street_pos: Moments::new(n * 3),
            street_rot: Moments::new(n * 4),
            street_scale: Moments::new(n * 3),
            street_opacity: Moments::new(n),
            street_sh: Moments::new(sh_len),
            vehicles: model
                .vehicles
                .iter()
                .map(|v| VehicleMoments {
                    pos: Moments::new(v.len() * 3),
                    rot: Moments::new(v.len() * 4),
                    scale: Moments::new(v.len() * 3),
                    opacity: Moments::new(v.len()),
                    fourier: Moments::new(v.fourier_sh.iter().map(|f| f.coeffs.len() * 3).sum()),
                    delta_rot: Moments::new(v.delta_rot.len() * 3),
                    delta_trans: Moments::new(v.delta_trans.len() * 3),
                })
                .collect(),
        }
    }
}

/// Learning rates per parameter group.
#[derive(Debug, Clone, Copy)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub vehicle_opacity: f64,
    pub sh: f64,
    pub delta_rot: f64,
    pub delta_trans: f64,
}

#[inline]
fn adam_scalar(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, cfg: &AdamParams) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let mhat = *m / cfg.bc1;
    let vhat = *v / cfg.bc2;
    *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
}

struct AdamParams {
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

/// One Adam step over every parameter group. Pose-delta gradients only exist
/// for `grads.frame`; frozen vehicles keep their deltas fixed.
pub fn adam_step(
    model: &mut SceneModel,
    grads: &SceneGrads,
    state: &mut OptimizerState,
    lrs: &LearningRates,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let ap = AdamParams {
        beta1,
        beta2,
        eps,
        bc1: 1.0 - beta1.powi(t),
        bc2: 1.0 - beta2.powi(t),
    };
    let st = &mut model.street;
    for i in 0..st.len() {
        for d in 0..3 {
            adam_scalar(
                &mut st.positions[i][d],
                grads.street.positions[i][d],
                &mut state.street_pos.m[i * 3 + d],
                &mut state.street_pos.v[i * 3 + d],
                lrs.position,
                &ap,
            );
            adam_scalar(
                &mut st.log_scales[i][d],
                grads.street.log_scales[i][d],
                &mut state.street_scale.m[i * 3 + d],
                &mut state.street_scale.v[i * 3 + d],
                lrs.scale,
                &ap,
            );
        }
        let mut q = st.rotations[i].as_array();
        for k in 0..4 {
            adam_scalar(
                &mut q[k],
                grads.street.rotations[i][k],
                &mut state.street_rot.m[i * 4 + k],
                &mut state.street_rot.v[i * 4 + k],
                lrs.rotation,
                &ap,
            );
        }
        st.rotations[i] = crate::geom::Quat::from_array(q);
        adam_scalar(
            &mut st.opacity_logits[i],
            grads.street.opacity_logits[i],
            &mut state.street_opacity.m[i],
            &mut state.street_opacity.v[i],
            lrs.opacity,
            &ap,
        );
    }
    let mut off = 0;
    for i in 0..st.len() {
        for (c, g) in st.sh[i].coeffs.iter_mut().zip(grads.street.sh[i].iter()) {
            for d in 0..3 {
                adam_scalar(
                    &mut c[d],
                    g[d],
                    &mut state.street_sh.m[off],
                    &mut state.street_sh.v[off],
                    lrs.sh,
                    &ap,
                );
                off += 1;
            }
        }
    }
    for (vi, vm) in model.vehicles.iter_mut().enumerate() {
        let vg = &grads.vehicles[vi];
        let vs = &mut state.vehicles[vi];
        for i in 0..vm.len() {
            for d in 0..3 {
                adam_scalar(
                    &mut vm.positions[i][d],
                    vg.positions[i][d],
                    &mut vs.pos.m[i * 3 + d],
                    &mut vs.pos.v[i * 3 + d],
                    lrs.position,
                    &ap,
                );
                adam_scalar(
                    &mut vm.log_scales[i][d],
                    vg.log_scales[i][d],
                    &mut vs.scale.m[i * 3 + d],
                    &mut vs.scale.v[i * 3 + d],
                    lrs.scale,
                    &ap,
                );
            }
            let mut q = vm.rotations[i].as_array();
            for k in 0..4 {
                adam_scalar(
                    &mut q[k],
                    vg.rotations[i][k],
                    &mut vs.rot.m[i * 4 + k],
                    &mut vs.rot.v[i * 4 + k],
                    lrs.rotation,
                    &ap,
                );
            }
            vm.rotations[i] = crate::geom::Quat::from_array(q);
            adam_scalar(
                &mut vm.opacity_logits[i],
                vg.opacity_logits[i],
                &mut vs.opacity.m[i],
                &mut vs.opacity.v[i],
                lrs.vehicle_opacity,
                &ap,
            );
        }
        let mut off = 0;
        for i in 0..vm.len() {
            for (c, g) in vm.fourier_sh[i].coeffs.iter_mut().zip(vg.fourier[i].iter()) {
                for d in 0..3 {
                    adam_scalar(
                        &mut c[d],
                        g[d],
                        &mut vs.fourier.m[off],
                        &mut vs.fourier.v[off],
                        lrs.sh,
                        &ap,
                    );
                    off += 1;
                }
            }
        }
        if !vm.frozen {
            let f = grads.frame;
            for d in 0..3 {
                adam_scalar(
                    &mut vm.delta_rot[f][d],
                    vg.delta_rot[d],
                    &mut vs.delta_rot.m[f * 3 + d],
                    &mut vs.delta_rot.v[f * 3 + d],
                    lrs.delta_rot,
                    &ap,
                );
                adam_scalar(
                    &mut vm.delta_trans[f][d],
                    vg.delta_trans[d],
                    &mut vs.delta_trans.m[f * 3 + d],
                    &mut vs.delta_trans.v[f * 3 + d],
                    lrs.delta_trans,
                    &ap,
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Densification and pruning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clone/split street Gaussians whose average positional gradient exceeds the
/// threshold, then prune nearly transparent ones. Adam moments for survivors
/// are carried over; new entries start at zero.
#[allow(clippy::too_many_arguments)]
pub fn densify_and_prune(
    model: &mut SceneModel,
    state: &mut OptimizerState,
    grad_accum: &[f64],
    grad_count: &[u32],
    threshold: f64,
    scene_extent: f64,
    percent_dense: f64,
    split_factor: f64,
    prune_opacity: f64,
    max_gaussians: usize,
    rng: &mut ChaCha8Rng,
) -> DensifyReport {
    let st = &mut model.street;
    let n = st.len();
    let mut report = DensifyReport::default();
    // old index -> kept? plus a list of (parent, jitter) additions.
    let mut keep = vec![true; n];
    let mut additions: Vec<(usize, Option<Vector3<f64>>)> = Vec::new();
    let can_grow = n < max_gaussians;
    for i in 0..n {
        let opacity = sigmoid(st.opacity_logits[i]);
        if opacity < prune_opacity {
            keep[i] = false;
            report.pruned += 1;
            continue;
        }
        if !can_grow || grad_count[i] == 0 {
            continue;
        }
        let avg = grad_accum[i] / grad_count[i] as f64;
        if avg <= threshold {
            continue;
        }
        let scale_max = st.log_scales[i].map(f64::exp).max();
        if scale_max <= percent_dense * scene_extent {
            // Clone in place; the copies separate under later gradients.
            additions.push((i, None));
            report.cloned += 1;
        } else {
            // Split: two samples drawn from the Gaussian, shrunken scales.
            keep[i] = false;
            for _ in 0..2 {
                let sample = sample_gaussian_offset(st, i, rng);
                additions.push((i, Some(sample)));
            }
            report.split += 1;
        }
    }
    let ln_split = split_factor.ln();
    let mut positions = Vec::new();
    let mut rotations = Vec::new();
    let mut log_scales = Vec::new();
    let mut opacity_logits = Vec::new();
    let mut sh = Vec::new();
    let mut semantic_logits = Vec::new();
    let mut pos_m = Vec::new();
    let mut pos_v = Vec::new();
    let mut rot_m = Vec::new();
    let mut rot_v = Vec::new();
    let mut scale_m = Vec::new();
    let mut scale_v = Vec::new();
    let mut op_m = Vec::new();
    let mut op_v = Vec::new();
    let mut sh_m = Vec::new();
    let mut sh_v = Vec::new();
    let sh_offsets: Vec<usize> = {
        let mut offs = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for s in st.sh.iter() {
            offs.push(acc);
            acc += s.coeffs.len() * 3;
        }
        offs.push(acc);
        offs
    };
    for i in 0..n {
        if !keep[i] {
            continue;
        }
        positions.push(st.positions[i]);
        rotations.push(st.rotations[i]);
        log_scales.push(st.log_scales[i]);
        opacity_logits.push(st.opacity_logits[i]);
        sh.push(st.sh[i].clone());
        semantic_logits.push(st.semantic_logits[i].clone());
        pos_m.extend_from_slice(&state.street_pos.m[i * 3..i * 3 + 3]);
        pos_v.extend_from_slice(&state.street_pos.v[i * 3..i * 3 + 3]);
        rot_m.extend_from_slice(&state.street_rot.m[i * 4..i * 4 + 4]);
        rot_v.extend_from_slice(&state.street_rot.v[i * 4..i * 4 + 4]);
        scale_m.extend_from_slice(&state.street_scale.m[i * 3..i * 3 + 3]);
        scale_v.extend_from_slice(&state.street_scale.v[i * 3..i * 3 + 3]);
        op_m.push(state.street_opacity.m[i]);
        op_v.push(state.street_opacity.v[i]);
        sh_m.extend_from_slice(&state.street_sh.m[sh_offsets[i]..sh_offsets[i + 1]]);
        sh_v.extend_from_slice(&state.street_sh.v[sh_offsets[i]..sh_offsets[i + 1]]);
    }
    for (parent, jitter) in additions {
        let mut pos = st.positions[parent];
        let mut ls = st.log_scales[parent];
        if let Some(offset) = jitter {
            pos += offset;
            ls -= Vector3::new(ln_split, ln_split, ln_split);
        }
        positions.push(pos);
        rotations.push(st.rotations[parent]);
        log_scales.push(ls);
        opacity_logits.push(st.opacity_logits[parent]);
        sh.push(st.sh[parent].clone());
        semantic_logits.push(st.semantic_logits[parent].clone());
        pos_m.extend_from_slice(&[0.0; 3]);
        pos_v.extend_from_slice(&[0.0; 3]);
        rot_m.extend_from_slice(&[0.0; 4]);
        rot_v.extend_from_slice(&[0.0; 4]);
        scale_m.extend_from_slice(&[0.0; 3]);
        scale_v.extend_from_slice(&[0.0; 3]);
        op_m.push(0.0);
        op_v.push(0.0);
        let len = sh_offsets[parent + 1] - sh_offsets[parent];
        sh_m.extend(std::iter::repeat(0.0).take(len));
        sh_v.extend(std::iter::repeat(0.0).take(len));
    }
    st.positions = positions;
    st.rotations = rotations;
    st.log_scales = log_scales;
    st.opacity_logits = opacity_logits;
    st.sh = sh;
    st.semantic_logits = semantic_logits;
    state.street_pos = Moments { m: pos_m, v: pos_v };
    state.street_rot = Moments { m: rot_m, v: rot_v };
    state.street_scale = Moments { m: scale_m, v: scale_v };
    state.street_opacity = Moments { m: op_m, v: op_v };
    state.street_sh = Moments { m: sh_m, v: sh_v };
    report
}

fn sample_gaussian_offset(
    st: &crate::scene::StreetGaussians,
    i: usize,
    rng: &mut ChaCha8Rng,
) -> Vector3<f64> {
    // Box-Muller standard normals scaled by the Gaussian axes.
    let mut normal = || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let local = Vector3::new(
        normal() * st.log_scales[i].x.exp(),
        normal() * st.log_scales[i].y.exp(),
        normal() * st.log_scales[i].z.exp(),
    );
    st.rotations[i].normalized().rotate(&local)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One observation: which frame it is, where the camera was, what it saw.
#[derive(Debug, Clone)]
pub struct FrameSample {
    pub frame: usize,
    pub camera: Camera,
    pub image: Image,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub lambda_dssim: f64,
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    /// Vehicle Gaussians model solid objects whose opacity encodes existence
    /// confidence, not translucency; letting it float gives the optimizer a
    /// fade channel that resolves appearance misfit by dimming one side of
    /// the cloud and dragging the pose after it. Frozen by default.
    pub lr_vehicle_opacity: f64,
    pub lr_sh: f64,
    pub lr_delta_rot: f64,
    pub lr_delta_trans: f64,
    /// Per-iteration step of the constant-velocity prior on vehicle pose
    /// tracks; 0 disables it.
    pub trajectory_smoothness: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub densify_interval: usize,
    pub densify_warmup: usize,
    pub densify_until: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    pub split_scale_factor: f64,
    pub percent_dense: f64,
    pub max_gaussians: usize,
    /// Every n-th frame index goes to the holdout set.
    pub holdout_every: usize,
    pub metrics_interval: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 7000,
            seed: 0,
            lambda_dssim: 0.2,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_vehicle_opacity: 0.0,
            lr_sh: 2.5e-3,
            lr_delta_rot: 1e-3,
            lr_delta_trans: 5e-3,
            trajectory_smoothness: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-15,
            densify_interval: 100,
            densify_warmup: 500,
            densify_until: 15000,
            densify_grad_threshold: 2e-4,
            prune_opacity: 0.005,
            split_scale_factor: 1.6,
            percent_dense: 0.01,
            max_gaussians: 500_000,
            holdout_every: 8,
            metrics_interval: 100,
            checkpoint_interval: 1000,
        }
    }
}

/// One metrics CSV row.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub psnr_holdout: f64,
    pub gaussian_count: usize,
    pub wall_ms: u64,
}

/// Callback events emitted during training.
pub enum TrainEvent<'a> {
    Metrics(&'a MetricsRow),
    Checkpoint { iteration: usize },
}

pub fn is_holdout(frame: usize, holdout_every: usize) -> bool {
    holdout_every > 0 && frame % holdout_every == 0
}

/// Replace the vehicle poses of untrained (holdout) frames with linear
/// interpolations of the *corrected* poses (base composed with the trained
/// delta) from the two nearest trained frames, extrapolating at the sequence
/// ends. Holdout frames never receive gradients, so their stored base poses
/// carry whatever initialization error conversion left behind; interpolating
/// the corrected trajectory through them is the only estimate that does not
/// leak holdout supervision.
pub fn interpolate_holdout_deltas(model: &SceneModel, holdout_every: usize) -> SceneModel {
    let mut out = model.clone();
    for v in out.vehicles.iter_mut() {
        let frames = v.base_poses.len();
        let trained: Vec<usize> = (0..frames)
            .filter(|&f| v.base_poses[f].is_some() && !is_holdout(f, holdout_every))
            .collect();
        if trained.is_empty() {
            continue;
        }
        let corrected_t =
            |v: &crate::scene::VehicleModel, f: usize| v.base_poses[f].unwrap().translation + v.delta_trans[f];
        for f in 0..frames {
            if v.base_poses[f].is_none() || !is_holdout(f, holdout_every) {
                continue;
            }
            let lower = trained.iter().rev().find(|&&t| t < f).copied();
            let upper = trained.iter().find(|&&t| t > f).copied();
            // Interior holdouts interpolate between the bracketing trained
            // frames. Holdouts past either end extrapolate a least-squares
            // line through the nearest trained frames (up to four): a
            // two-point extrapolation would amplify whatever residual error
            // the single nearest frame happens to carry.
            let fit_line = |samples: &[(f64, Vector3<f64>)], x: f64| -> Vector3<f64> {
                let n = samples.len() as f64;
                let tm = samples.iter().map(|(t, _)| t).sum::<f64>() / n;
                let ym = samples.iter().map(|(_, y)| *y).sum::<Vector3<f64>>() / n;
                let denom: f64 = samples.iter().map(|(t, _)| (t - tm) * (t - tm)).sum();
                if denom < 1e-12 {
                    return ym;
                }
                let slope = samples
                    .iter()
                    .map(|(t, y)| (y - ym) * (t - tm))
                    .sum::<Vector3<f64>>()
                    / denom;
                ym + slope * (x - tm)
            };
            let (dr, target_t) = match (lower, upper) {
                (Some(a), Some(b)) => {
                    let w = (f as f64 - a as f64) / (b as f64 - a as f64);
                    (
                        v.delta_rot[a] * (1.0 - w) + v.delta_rot[b] * w,
                        corrected_t(v, a) * (1.0 - w) + corrected_t(v, b) * w,
                    )
                }
                (Some(_), None) | (None, Some(_)) => {
                    let nearest: Vec<usize> = if upper.is_none() {
                        trained.iter().rev().take(4).copied().collect()
                    } else {
                        trained.iter().take(4).copied().collect()
                    };
                    let tp: Vec<(f64, Vector3<f64>)> =
                        nearest.iter().map(|&t| (t as f64, corrected_t(v, t))).collect();
                    let rp: Vec<(f64, Vector3<f64>)> =
                        nearest.iter().map(|&t| (t as f64, v.delta_rot[t])).collect();
                    (fit_line(&rp, f as f64), fit_line(&tp, f as f64))
                }
                (None, None) => unreachable!(),
            };
            v.delta_rot[f] = dr;
            v.delta_trans[f] = target_t - v.base_poses[f].unwrap().translation;
        }
    }
    out
}

fn scene_extent(model: &SceneModel) -> f64 {
    if model.street.is_empty() {
        return 1.0;
    }
    let mut lo = model.street.positions[0];
    let mut hi = model.street.positions[0];
    for p in &model.street.positions {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    ((hi - lo).norm() / 2.0).max(1e-6)
}

fn position_lr(cfg: &TrainConfig, it: usize) -> f64 {
    let progress = if cfg.iterations <= 1 {
        1.0
    } else {
        (it - 1) as f64 / (cfg.iterations - 1) as f64
    };
    cfg.lr_position_init * (cfg.lr_position_final / cfg.lr_position_init).powf(progress)
}

fn holdout_psnr(
    model: &SceneModel,
    data: &[FrameSample],
    cfg: &TrainConfig,
    opts: &RenderOptions,
) -> Result<f64> {
    let eval_model = interpolate_holdout_deltas(model, cfg.holdout_every);
    let mut total = 0.0;
    let mut count = 0;
    for s in data.iter().filter(|s| is_holdout(s.frame, cfg.holdout_every)) {
        let scene = assemble(
            &eval_model.street,
            &eval_model.vehicles,
            s.frame,
            eval_model.frame_count,
            eval_model.rotation_convention,
        );
        let out = render_assembled(&scene, &s.camera, opts)?;
        total += crate::harness::psnr(&out.rgb, &s.image)?;
        count += 1;
    }
    if count == 0 {
        return Ok(f64::NAN);
    }
    Ok(total / count as f64)
}

/// Optimize the model against the training split. Emits metrics rows and
/// checkpoint events through `on_event`; aborts with an error (leaving the
/// model at its last finite state) if the loss goes non-finite.
pub fn train(
    model: &mut SceneModel,
    data: &[FrameSample],
    cfg: &TrainConfig,
    opts: &RenderOptions,
    mut on_event: impl FnMut(TrainEvent, &SceneModel) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    let train_idx: Vec<usize> = (0..data.len())
        .filter(|&i| !is_holdout(data[i].frame, cfg.holdout_every))
        .collect();
    if train_idx.is_empty() {
        return Err(Error::EmptyInput("training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(model);
    let extent = scene_extent(model);
    let mut grad_accum = vec![0.0; model.street.len()];
    let mut grad_count = vec![0u32; model.street.len()];
    let mut rows = Vec::new();
    let start = std::time::Instant::now();
    for it in 1..=cfg.iterations {
        let sample = &data[train_idx[rng.gen_range(0..train_idx.len())]];
        let scene = assemble(
            &model.street,
            &model.vehicles,
            sample.frame,
            model.frame_count,
            model.rotation_convention,
        );
        let rendered = render_assembled(&scene, &sample.camera, opts)?;
        let (loss_val, d_rgb) = loss_with_grad(&rendered.rgb, &sample.image, cfg.lambda_dssim)?;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {}", it)));
        }
        let (_, grads) = render_with_grads(model, sample.frame, &sample.camera, opts, &d_rgb)?;
        // Pose deltas share the position decay schedule: once a pose has
        // converged its gradients are dominated by noise along weakly
        // observable directions (depth), and a constant-rate Adam would keep
        // random-walking there on a flat loss. The decay is floored so the
        // depth direction, whose gradients are small but systematic, keeps
        // converging for the whole run instead of freezing early.
        let decay = (position_lr(cfg, it) / cfg.lr_position_init).max(0.05);
        let lrs = LearningRates {
            position: position_lr(cfg, it),
            rotation: cfg.lr_rotation,
            scale: cfg.lr_scale,
            opacity: cfg.lr_opacity,
            vehicle_opacity: cfg.lr_vehicle_opacity,
            sh: cfg.lr_sh,
            delta_rot: cfg.lr_delta_rot * decay,
            delta_trans: cfg.lr_delta_trans * decay,
        };
        adam_step(model, &grads, &mut opt, &lrs, cfg.beta1, cfg.beta2, cfg.adam_eps);
        if cfg.trajectory_smoothness > 0.0 {
            smooth_pose_deltas(model, cfg.trajectory_smoothness, cfg.holdout_every);
        }
        for i in 0..model.street.len() {
            let n = grads.street.positions[i].norm();
            if n > 0.0 {
                grad_accum[i] += n;
                grad_count[i] += 1;
            }
        }
        if cfg.densify_interval > 0
            && it >= cfg.densify_warmup
            && it <= cfg.densify_until
            && it % cfg.densify_interval == 0
        {
            densify_and_prune(
                model,
                &mut opt,
                &grad_accum,
                &grad_count,
                cfg.densify_grad_threshold,
                extent,
                cfg.percent_dense,
                cfg.split_scale_factor,
                cfg.prune_opacity,
                cfg.max_gaussians,
                &mut rng,
            );
            grad_accum = vec![0.0; model.street.len()];
            grad_count = vec![0u32; model.street.len()];
        }
        if it % cfg.metrics_interval == 0 || it == cfg.iterations {
            let row = MetricsRow {
                iteration: it,
                loss: loss_val,
                l1: l1(&rendered.rgb, &sample.image)?,
                dssim: dssim(&rendered.rgb, &sample.image)?,
                psnr_holdout: holdout_psnr(model, data, cfg, opts)?,
                gaussian_count: model.total_gaussians(),
                wall_ms: start.elapsed().as_millis() as u64,
            };
            on_event(TrainEvent::Metrics(&row), model)?;
            rows.push(row);
        }
        if cfg.checkpoint_interval > 0 && (it % cfg.checkpoint_interval == 0 || it == cfg.iterations)
        {
            on_event(TrainEvent::Checkpoint { iteration: it }, model)?;
        }
    }
    Ok(rows)
}

/// Constant-velocity prior on the corrected pose tracks: every trained frame
/// with trained neighbors on both sides is pulled a step of size `eta`
/// toward the linear interpolation of its nearest trained neighbors'
/// corrected poses. A constant-velocity trajectory is a fixed point, so
/// smooth motion is untouched; per-frame excursions along weakly observable
/// directions (depth) are damped toward the track their neighbors agree on.
fn smooth_pose_deltas(model: &mut SceneModel, eta: f64, holdout_every: usize) {
    for v in model.vehicles.iter_mut() {
        if v.frozen {
            continue;
        }
        let frames = v.base_poses.len();
        let trained: Vec<usize> = (0..frames)
            .filter(|&f| v.base_poses[f].is_some() && !is_holdout(f, holdout_every))
            .collect();
        if trained.len() < 3 {
            continue;
        }
        let corrected: Vec<Vector3<f64>> = trained
            .iter()
            .map(|&f| v.base_poses[f].unwrap().translation + v.delta_trans[f])
            .collect();
        let rot: Vec<Vector3<f64>> = trained.iter().map(|&f| v.delta_rot[f]).collect();
        for i in 1..trained.len() - 1 {
            let f = trained[i];
            let (a, b) = (trained[i - 1], trained[i + 1]);
            let w = (f - a) as f64 / (b - a) as f64;
            let target_t = corrected[i - 1] * (1.0 - w) + corrected[i + 1] * w;
            let target_r = rot[i - 1] * (1.0 - w) + rot[i + 1] * w;
            v.delta_trans[f] += (target_t - corrected[i]) * eta;
            v.delta_rot[f] += (target_r - rot[i]) * eta;
        }
    }
}

/// World-frame per-frame vehicle centroids, one entry per observed frame.
pub fn vehicle_trajectory(model: &SceneModel, vehicle: usize) -> Vec<(usize, Vector3<f64>)> {
    let v = &model.vehicles[vehicle];
    (0..v.base_poses.len())
        .filter_map(|f| v.world_centroid(f).map(|c| (f, c)))
        .collect()
}

/// Convenience: corrected pose track of a vehicle.
pub fn vehicle_poses(model: &SceneModel, vehicle: usize) -> Vec<(usize, Pose)> {
    let v = &model.vehicles[vehicle];
    (0..v.base_poses.len())
        .filter_map(|f| v.pose_at(f).map(|p| (f, p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rand_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let img = rand_image(&mut rng, 16, 16);
        assert_relative_eq!(ssim(&img, &img).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(dssim(&img, &img).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(loss(&img, &img, 0.2).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_uniform_pair_closed_form() {
        // Constant images: variances vanish, SSIM reduces to the luminance
        // and contrast terms evaluated at the means.
        let a = Image::filled(16, 16, Vector3::new(0.1, 0.1, 0.1));
        let b = Image::filled(16, 16, Vector3::new(0.9, 0.9, 0.9));
        let expect = (2.0 * 0.1 * 0.9 + SSIM_C1) / (0.1f64.powi(2) + 0.9f64.powi(2) + SSIM_C1);
        assert_relative_eq!(ssim(&a, &b).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn dssim_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..5 {
            let a = rand_image(&mut rng, 13, 17);
            let b = rand_image(&mut rng, 13, 17);
            let d = dssim(&a, &b).unwrap();
            assert!((0.0..=1.0).contains(&d), "dssim {}", d);
        }
    }

    #[test]
    fn ssim_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let a = rand_image(&mut rng, 14, 13);
        let b = rand_image(&mut rng, 14, 13);
        let (_, grad) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for &pi in &[0usize, 40, 100, 251, a.data.len() - 1] {
            let mut ap = a.clone();
            ap.data[pi] += h;
            let mut am = a.clone();
            am.data[pi] -= h;
            let fd = (ssim(&ap, &b).unwrap() - ssim(&am, &b).unwrap()) / (2.0 * h);
            assert_relative_eq!(grad.data[pi], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let a = rand_image(&mut rng, 13, 13);
        let b = rand_image(&mut rng, 13, 13);
        let (_, grad) = loss_with_grad(&a, &b, 0.2).unwrap();
        let h = 1e-6;
        for &pi in &[3usize, 77, 200, a.data.len() - 2] {
            let mut ap = a.clone();
            ap.data[pi] += h;
            let mut am = a.clone();
            am.data[pi] -= h;
            let fd = (loss(&ap, &b, 0.2).unwrap() - loss(&am, &b, 0.2).unwrap()) / (2.0 * h);
            assert_relative_eq!(grad.data[pi], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn ssim_symmetric_in_its_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let a = rand_image(&mut rng, 15, 12);
        let b = rand_image(&mut rng, 15, 12);
        assert_relative_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::new(8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn adam_matches_reference_updates() {
        // Scalar Adam against an independently coded reference recursion.
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-15, 0.1);
        let mut p = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        let grads = [0.5, -0.2, 0.8, 0.0, 0.3];
        let mut p_ref = 1.0;
        let (mut m_ref, mut v_ref) = (0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let ap = AdamParams {
                beta1: b1,
                beta2: b2,
                eps,
                bc1: 1.0 - b1.powi(t as i32 + 1),
                bc2: 1.0 - b2.powi(t as i32 + 1),
            };
            adam_scalar(&mut p, *g, &mut m, &mut v, lr, &ap);
            // Reference: textbook form.
            m_ref = b1 * m_ref + (1.0 - b1) * g;
            v_ref = b2 * v_ref + (1.0 - b2) * g * g;
            let mh = m_ref / (1.0 - b1.powi(t as i32 + 1));
            let vh = v_ref / (1.0 - b2.powi(t as i32 + 1));
            p_ref -= lr * mh / (vh.sqrt() + eps);
            assert_relative_eq!(p, p_ref, epsilon = 1e-15);
        }
    }

    #[test]
    fn interpolation_fills_holdout_deltas() {
        use crate::geom::{Pose, Quat};
        use crate::scene::{init_vehicle, InitConfig};
        let points = vec![(Vector3::new(0.5, 0.0, 0.0), None), (Vector3::new(-0.5, 0.0, 0.0), None)];
        let base: Vec<Option<Pose>> =
            (0..10).map(|f| Some(Pose::new(Quat::identity(), Vector3::new(f as f64, 0.0, 0.0)))).collect();
        let mut vm = init_vehicle(0, &points, base, &InitConfig::default()).unwrap();
        for f in 0..10 {
            vm.delta_trans[f] = Vector3::new(f as f64 * 0.1, 0.0, 0.0);
        }
        // Pretend frame 8 was never trained (holdout_every = 8; frame 0 too).
        vm.delta_trans[8] = Vector3::zeros();
        vm.delta_trans[0] = Vector3::zeros();
        let model = SceneModel {
            street: crate::scene::StreetGaussians {
                positions: vec![],
                rotations: vec![],
                log_scales: vec![],
                opacity_logits: vec![],
                sh: vec![],
                semantic_logits: vec![],
                num_classes: 3,
            },
            vehicles: vec![vm],
            frame_count: 10,
            num_classes: 3,
            vehicle_class: 2,
            rotation_convention: crate::geom::RotationConvention::Composed,
        };
        let out = interpolate_holdout_deltas(&model, 8);
        // Frame 8 sits between trained 7 and 9: the corrected translations
        // are 7.7 and 9.9, whose midpoint 8.8 means a delta of 0.8.
        assert_relative_eq!(out.vehicles[0].delta_trans[8].x, 0.8, epsilon = 1e-12);
        // Frame 0 has no trained frame below: the least-squares line through
        // the nearest trained corrected frames (1.1·f) extrapolates to 0.0.
        assert_relative_eq!(out.vehicles[0].delta_trans[0].x, 0.0, epsilon = 1e-12);
        // Trained frames untouched.
        assert_relative_eq!(out.vehicles[0].delta_trans[5].x, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn is_holdout_every_eighth() {
        assert!(is_holdout(0, 8));
        assert!(is_holdout(8, 8));
        assert!(!is_holdout(1, 8));
        assert!(!is_holdout(15, 8));
        assert!(!is_holdout(3, 0));
    }
}
