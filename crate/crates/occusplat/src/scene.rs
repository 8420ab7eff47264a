//! The two optimizable models -- static street Gaussians and per-vehicle
//! dynamic Gaussians -- plus their assembly into a single world-frame set at a
//! given timestamp.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{
    apply_pose_delta, fourier_sh_at_time, logit, sigmoid, transform_to_world, FourierShCoefficients,
    Pose, Quat, RotationConvention, ShCoefficients, SH_C0,
};
use crate::occupancy::SemanticPointCloud;

/// Initialization constants, 3DGS-convention defaults.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub street_sh_degree: usize,
    pub vehicle_sh_degree: usize,
    /// Fourier term count per SH coefficient (DC + harmonics).
    pub fourier_k: usize,
    pub opacity_init: f64,
    /// Vehicles come from confirmed occupancy evidence, so they start far
    /// more opaque than the street; a translucent start lets the optimizer
    /// fade a misposed vehicle out instead of correcting its pose.
    pub vehicle_opacity_init: f64,
    /// Logit boost on the observed class.
    pub semantic_boost: f64,
    /// Fallback isotropic scale when a cloud has a single point, meters.
    pub fallback_scale: f64,
    /// Vehicle initial scale as a fraction of the mean neighbor distance.
    /// Deliberately under-filled: an oversized cloud admits a degenerate
    /// photometric optimum that fades its boundary shell and shifts the pose
    /// instead of shrinking, biasing the recovered trajectory; gaps in an
    /// undersized cloud pull scale growth from both silhouette edges
    /// symmetrically.
    pub vehicle_scale_knn: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            street_sh_degree: 3,
            vehicle_sh_degree: 1,
            fourier_k: 5,
            opacity_init: 0.1,
            vehicle_opacity_init: 0.9,
            semantic_boost: 4.0,
            fallback_scale: 0.1,
            vehicle_scale_knn: 0.5,
        }
    }
}

// ---------------------------------------------------------------------------
// Street model
// ---------------------------------------------------------------------------

/// Static street Gaussians, struct-of-arrays. Rotations are stored raw and
/// normalized on every use; scales live in log-space; opacity as a logit.
#[derive(Debug, Clone)]
pub struct StreetGaussians {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<ShCoefficients>,
    /// Per-Gaussian class logits, `num_classes` each.
    pub semantic_logits: Vec<Vec<f64>>,
    pub num_classes: usize,
}

impl StreetGaussians {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n
            || self.semantic_logits.len() != n
        {
            return Err(Error::InvalidArgument("street model arrays disagree on length".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Vehicle model
// ---------------------------------------------------------------------------

/// Per-vehicle Gaussians in the vehicle frame plus a per-frame pose track
/// with learnable corrections (ΔR as axis-angle, ΔT as a translation).
#[derive(Debug, Clone)]
pub struct VehicleModel {
    pub object_id: usize,
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub fourier_sh: Vec<FourierShCoefficients>,
    /// One-dimensional vehicle-vs-background logit.
    pub semantic_logit: f64,
    /// Base pose per frame; `None` where the vehicle was not observed.
    pub base_poses: Vec<Option<Pose>>,
    pub delta_rot: Vec<Vector3<f64>>,
    pub delta_trans: Vec<Vector3<f64>>,
    /// Single-frame observations are kept but their deltas stay frozen.
    pub frozen: bool,
}

impl VehicleModel {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Corrected pose at a frame, or `None` if the vehicle is absent there.
    pub fn pose_at(&self, frame: usize) -> Option<Pose> {
        let base = self.base_poses.get(frame).copied().flatten()?;
        let dq = Quat::from_axis_angle(&self.delta_rot[frame]);
        Some(apply_pose_delta(&base, &dq, &self.delta_trans[frame]))
    }

    /// World-frame centroid of the vehicle Gaussians at a frame.
    pub fn world_centroid(&self, frame: usize) -> Option<Vector3<f64>> {
        let pose = self.pose_at(frame)?;
        if self.positions.is_empty() {
            return None;
        }
        let mut sum = Vector3::zeros();
        for p in &self.positions {
            sum += pose.transform_point(p);
        }
        Some(sum / self.positions.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Scene container
// ---------------------------------------------------------------------------

/// Everything the optimizer owns.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub street: StreetGaussians,
    pub vehicles: Vec<VehicleModel>,
    pub frame_count: usize,
    pub num_classes: usize,
    /// Class id receiving the vehicle sigmoid mass in semantic output.
    pub vehicle_class: u32,
    pub rotation_convention: RotationConvention,
}

impl SceneModel {
    pub fn total_gaussians(&self) -> usize {
        self.street.len() + self.vehicles.iter().map(|v| v.len()).sum::<usize>()
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Mean distance to the 3 nearest neighbors per point, via a hash grid.
pub fn mean_knn_distance(points: &[Vector3<f64>], fallback: f64) -> Vec<f64> {
    let n = points.len();
    if n <= 1 {
        return vec![fallback; n];
    }
    if n <= 512 {
        return brute_knn(points);
    }
    // Bin into a lattice sized so cells hold a handful of points each.
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).norm().max(1e-9);
    let h = (extent / (n as f64).cbrt()).max(1e-6);
    let key = |p: &Vector3<f64>| {
        (
            ((p.x - lo.x) / h) as i64,
            ((p.y - lo.y) / h) as i64,
            ((p.z - lo.z) / h) as i64,
        )
    };
    let mut cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(key(p)).or_default().push(i);
    }
    let k = 3.min(n - 1);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (cx, cy, cz) = key(p);
            let mut best: Vec<f64> = Vec::new();
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            if let Some(ids) = cells.get(&(cx + dx, cy + dy, cz + dz)) {
                                for &j in ids {
                                    if j != i {
                                        best.push((points[j] - p).norm());
                                    }
                                }
                            }
                        }
                    }
                }
                best.sort_by(|a, b| a.partial_cmp(b).unwrap());
                best.truncate(16);
                // Stop once the ring boundary is beyond the current k-th
                // nearest candidate: no closer point can appear further out.
                if best.len() >= k && (ring as f64 - 1.0) * h > best[k - 1] {
                    break;
                }
                ring += 1;
                if ring > 1_000 {
                    break;
                }
            }
            best.truncate(k);
            best.iter().sum::<f64>() / k as f64
        })
        .collect()
}

fn brute_knn(points: &[Vector3<f64>]) -> Vec<f64> {
    let n = points.len();
    let k = 3.min(n - 1);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (q - p).norm())
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d.truncate(k);
            d.iter().sum::<f64>() / k as f64
        })
        .collect()
}

fn sh_dc_from_color(color: Option<Vector3<f64>>) -> Vector3<f64> {
    // Inverse of the `sh + 0.5` activation; uncolored points default to gray.
    let c = color.unwrap_or_else(|| Vector3::new(0.5, 0.5, 0.5));
    (c - Vector3::new(0.5, 0.5, 0.5)) / SH_C0
}

/// One Gaussian per prior point: position from the point, DC color from the
/// (inverse-activated) point color, isotropic scale from the 3-NN mean
/// distance, opacity 0.1, one-hot-boosted class logits.
pub fn init_street(
    cloud: &SemanticPointCloud,
    num_classes: usize,
    cfg: &InitConfig,
) -> Result<StreetGaussians> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("street point cloud".into()));
    }
    let positions: Vec<Vector3<f64>> = cloud.points.iter().map(|p| p.position).collect();
    let knn = mean_knn_distance(&positions, cfg.fallback_scale);
    let n = positions.len();
    let mut model = StreetGaussians {
        positions,
        rotations: vec![Quat::identity(); n],
        log_scales: Vec::with_capacity(n),
        opacity_logits: vec![logit(cfg.opacity_init); n],
        sh: Vec::with_capacity(n),
        semantic_logits: Vec::with_capacity(n),
        num_classes,
    };
    for (point, nn) in cloud.points.iter().zip(knn.iter()) {
        let s = nn.max(1e-4).ln();
        model.log_scales.push(Vector3::new(s, s, s));
        let mut sh = ShCoefficients::zeros(cfg.street_sh_degree);
        sh.coeffs[0] = sh_dc_from_color(point.color);
        model.sh.push(sh);
        let mut logits = vec![0.0; num_classes];
        if let Some(label) = point.label {
            if (label as usize) < num_classes {
                logits[label as usize] = cfg.semantic_boost;
            }
        }
        model.semantic_logits.push(logits);
    }
    Ok(model)
}

/// Build a vehicle model from centroid-centered, colorized vehicle-frame
/// points plus a per-frame base pose track. Deltas start at zero; Fourier
/// appearance starts as its DC term.
pub fn init_vehicle(
    object_id: usize,
    points: &[(Vector3<f64>, Option<Vector3<f64>>)],
    base_poses: Vec<Option<Pose>>,
    cfg: &InitConfig,
) -> Result<VehicleModel> {
    if points.is_empty() {
        return Err(Error::EmptyInput(format!("vehicle {} point set", object_id)));
    }
    let frame_count = base_poses.len();
    let observed = base_poses.iter().filter(|p| p.is_some()).count();
    if observed == 0 {
        return Err(Error::InvalidArgument(format!(
            "vehicle {} has no observed frames",
            object_id
        )));
    }
    let positions: Vec<Vector3<f64>> = points.iter().map(|(p, _)| *p).collect();
    let knn = mean_knn_distance(&positions, cfg.fallback_scale);
    let n = positions.len();
    let mut model = VehicleModel {
        object_id,
        positions,
        rotations: vec![Quat::identity(); n],
        log_scales: Vec::with_capacity(n),
        opacity_logits: vec![logit(cfg.vehicle_opacity_init); n],
        fourier_sh: Vec::with_capacity(n),
        semantic_logit: cfg.semantic_boost,
        base_poses,
        delta_rot: vec![Vector3::zeros(); frame_count],
        delta_trans: vec![Vector3::zeros(); frame_count],
        frozen: observed < 2,
    };
    for ((_, color), nn) in points.iter().zip(knn.iter()) {
        let s = (nn * cfg.vehicle_scale_knn).max(1e-4).ln();
        model.log_scales.push(Vector3::new(s, s, s));
        let mut f = FourierShCoefficients::zeros(cfg.vehicle_sh_degree, cfg.fourier_k);
        f.coeffs[0] = sh_dc_from_color(*color);
        model.fourier_sh.push(f);
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Which model a world-frame Gaussian came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Street(usize),
    Vehicle { vehicle: usize, index: usize },
}

/// Per-Gaussian semantic parameters carried through assembly.
#[derive(Debug, Clone)]
pub enum SemanticParams {
    StreetLogits(Vec<f64>),
    VehicleLogit(f64),
}

/// A world-frame Gaussian with activated parameters.
#[derive(Debug, Clone)]
pub struct AssembledGaussian {
    pub position: Vector3<f64>,
    /// Unit rotation.
    pub rotation: Quat,
    /// Activated (positive) scales.
    pub scale: Vector3<f64>,
    /// Activated opacity in (0, 1).
    pub opacity: f64,
    /// View-independent SH coefficients (vehicles: evaluated at the frame time).
    pub sh: ShCoefficients,
    pub semantic: SemanticParams,
}

#[derive(Debug, Clone)]
pub struct AssembledScene {
    pub gaussians: Vec<AssembledGaussian>,
    pub provenance: Vec<Provenance>,
    pub frame: usize,
    pub frame_count: usize,
}

pub fn t_norm(frame: usize, frame_count: usize) -> f64 {
    frame as f64 / frame_count.max(1) as f64
}

/// Flatten street + vehicles into one world-frame Gaussian set at frame `t`.
/// Vehicles without a pose at `t` are skipped.
pub fn assemble(
    street: &StreetGaussians,
    vehicles: &[VehicleModel],
    t: usize,
    frame_count: usize,
    convention: RotationConvention,
) -> AssembledScene {
    let mut gaussians = Vec::with_capacity(street.len());
    let mut provenance = Vec::with_capacity(street.len());
    for i in 0..street.len() {
        gaussians.push(AssembledGaussian {
            position: street.positions[i],
            rotation: street.rotations[i].normalized(),
            scale: street.log_scales[i].map(f64::exp),
            opacity: sigmoid(street.opacity_logits[i]),
            sh: street.sh[i].clone(),
            semantic: SemanticParams::StreetLogits(street.semantic_logits[i].clone()),
        });
        provenance.push(Provenance::Street(i));
    }
    let tn = t_norm(t, frame_count);
    for (vi, vehicle) in vehicles.iter().enumerate() {
        let Some(pose) = vehicle.pose_at(t) else {
            continue;
        };
        for gi in 0..vehicle.len() {
            let (mu_w, q_w) = transform_to_world(
                &pose,
                &vehicle.positions[gi],
                &vehicle.rotations[gi].normalized(),
                convention,
            );
            gaussians.push(AssembledGaussian {
                position: mu_w,
                rotation: q_w,
                scale: vehicle.log_scales[gi].map(f64::exp),
                opacity: sigmoid(vehicle.opacity_logits[gi]),
                sh: fourier_sh_at_time(&vehicle.fourier_sh[gi], tn),
                semantic: SemanticParams::VehicleLogit(vehicle.semantic_logit),
            });
            provenance.push(Provenance::Vehicle { vehicle: vi, index: gi });
        }
    }
    AssembledScene {
        gaussians,
        provenance,
        frame: t,
        frame_count,
    }
}

/// Per-Gaussian class distribution: softmax over street logits; the vehicle
/// sigmoid mass goes to `vehicle_class`, the remainder spread uniformly over
/// the other classes.
pub fn semantic_output(scene: &AssembledScene, num_classes: usize, vehicle_class: u32) -> Vec<Vec<f64>> {
    scene
        .gaussians
        .iter()
        .map(|g| match &g.semantic {
            SemanticParams::StreetLogits(logits) => {
                let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                exps.iter().map(|e| e / sum).collect()
            }
            SemanticParams::VehicleLogit(logit) => {
                let s = sigmoid(*logit);
                let rest = if num_classes > 1 {
                    (1.0 - s) / (num_classes - 1) as f64
                } else {
                    0.0
                };
                (0..num_classes)
                    .map(|c| if c as u32 == vehicle_class { s } else { rest })
                    .collect()
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scene construction from occupancy priors
// ---------------------------------------------------------------------------

/// Build an optimizable scene from per-frame semantic occupancy grids plus
/// posed camera frames: threshold and label the grids, track vehicle-class
/// components over time, split static from dynamic content, and initialize
/// street and vehicle Gaussians from the resulting colorized point clouds.
///
/// All grids must share one world-fixed lattice. `cameras`/`images` are
/// indexed by frame; grids carry their own `frame_index`.
#[allow(clippy::too_many_arguments)]
pub fn scene_from_occupancy(
    grids: &[crate::occupancy::OccupancyGrid],
    cameras: &[crate::render::Camera],
    images: &[crate::image_buf::Image],
    sfm: Option<&SemanticPointCloud>,
    occ_cfg: &crate::occupancy::OccupancyConfig,
    init_cfg: &InitConfig,
    num_classes: usize,
    vehicle_class: u32,
    convention: RotationConvention,
) -> Result<SceneModel> {
    use crate::occupancy::{
        associate_tracks, classify_dynamic, colorize_points, colorize_points_zbuffered,
        extract_objects, grid_to_static_cloud, merge_with_sfm, semantic_argmax,
        threshold_occupancy, upsample_object, PointSource, SemanticPoint,
    };
    if grids.is_empty() {
        return Err(Error::EmptyInput("occupancy grids".into()));
    }
    if cameras.len() != images.len() {
        return Err(Error::InvalidArgument(format!(
            "{} cameras vs {} images",
            cameras.len(),
            images.len()
        )));
    }
    let frame_count = cameras.len();
    let lattice = (grids[0].dims, grids[0].origin, grids[0].cell_size);
    for g in grids {
        g.validate()?;
        if (g.dims, g.origin, g.cell_size) != lattice {
            return Err(Error::InvalidArgument(
                "occupancy grids do not share a world-fixed lattice".into(),
            ));
        }
        if g.frame_index >= frame_count {
            return Err(Error::InvalidArgument(format!(
                "grid frame index {} outside {} camera frames",
                g.frame_index, frame_count
            )));
        }
    }
    let vehicle_classes = [vehicle_class];
    let views: Vec<(&crate::render::Camera, &crate::image_buf::Image)> =
        cameras.iter().zip(images.iter()).collect();

    // Per-frame thresholding, labeling and vehicle component extraction.
    let mut per_frame = Vec::with_capacity(grids.len());
    let mut comp_frames = Vec::with_capacity(grids.len());
    for g in grids {
        let occ = threshold_occupancy(g, occ_cfg.tau);
        let labels = semantic_argmax(g);
        let comps = extract_objects(g, &occ, &labels, &vehicle_classes);
        comp_frames.push((g.frame_index, comps));
        per_frame.push((g, occ, labels));
    }
    let mut tracks = associate_tracks(&comp_frames, occ_cfg.match_radius);
    for t in tracks.iter_mut() {
        t.dynamic = classify_dynamic(t, occ_cfg.mu_th);
    }

    // Static cloud: non-vehicle cells from every frame plus cells of static
    // vehicle tracks, deduplicated on the shared lattice.
    let mut static_points: Vec<SemanticPoint> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push_unique = |p: SemanticPoint, seen: &mut std::collections::HashSet<(i64, i64, i64)>| {
        let q = 2.0 / lattice.2;
        let key = (
            (p.position.x * q).round() as i64,
            (p.position.y * q).round() as i64,
            (p.position.z * q).round() as i64,
        );
        if seen.insert(key) {
            static_points.push(p);
        }
    };
    for (g, occ, labels) in &per_frame {
        for p in grid_to_static_cloud(g, occ, labels, &vehicle_classes).points {
            push_unique(p, &mut seen);
        }
    }
    for t in tracks.iter().filter(|t| !t.dynamic) {
        for f in &t.frames {
            let g = per_frame
                .iter()
                .find(|(g, _, _)| g.frame_index == f.frame)
                .map(|(g, _, _)| *g)
                .expect("track frame has a grid");
            for &(i, j, k) in &f.cells {
                push_unique(
                    SemanticPoint {
                        position: g.cell_center(i, j, k),
                        color: None,
                        label: Some(vehicle_class),
                        source: PointSource::Occupancy,
                    },
                    &mut seen,
                );
            }
        }
    }
    let positions: Vec<Vector3<f64>> = static_points.iter().map(|p| p.position).collect();
    let colors = colorize_points(&positions, &views);
    for (p, c) in static_points.iter_mut().zip(colors) {
        p.color = c;
    }
    let mut cloud = SemanticPointCloud { points: static_points };
    if let Some(sfm) = sfm {
        cloud = merge_with_sfm(cloud, sfm.clone());
    }
    let street = init_street(&cloud, num_classes, init_cfg)?;

    // Dynamic tracks become vehicle models: densified points from the first
    // observation, centered on its centroid, with an identity-rotation pose
    // track through the per-frame centroids.
    let mut vehicles = Vec::new();
    for t in tracks.iter().filter(|t| t.dynamic) {
        let first = &t.frames[0];
        let g = per_frame
            .iter()
            .find(|(g, _, _)| g.frame_index == first.frame)
            .map(|(g, _, _)| *g)
            .expect("track frame has a grid");
        let world_points = upsample_object(&first.cells, g, occ_cfg.upsample_voxel);
        // Occlusion-aware colorization: only the camera-facing shell samples
        // the image. Letting interior and far-side points pick up whatever
        // road or background pixel they project onto biases the photometric
        // pose optimum; hidden points take the mean observed color instead.
        let (cam, img) = views[first.frame];
        let mut colors =
            colorize_points_zbuffered(&world_points, cam, img, 1.5 * occ_cfg.upsample_voxel);
        let seen: Vec<Vector3<f64>> = colors.iter().filter_map(|c| *c).collect();
        if !seen.is_empty() {
            let mean = seen.iter().sum::<Vector3<f64>>() / seen.len() as f64;
            for c in colors.iter_mut() {
                c.get_or_insert(mean);
            }
        }
        let centroid = world_points.iter().sum::<Vector3<f64>>() / world_points.len() as f64;
        let points: Vec<(Vector3<f64>, Option<Vector3<f64>>)> = world_points
            .iter()
            .zip(colors)
            .map(|(p, c)| (p - centroid, c))
            .collect();
        let mut base_poses = vec![None; frame_count];
        for f in &t.frames {
            base_poses[f.frame] = Some(Pose::new(Quat::identity(), f.centroid));
        }
        // Anchor the vehicle frame at the densified first-frame centroid
        // rather than the coarse-cell centroid.
        base_poses[first.frame] = Some(Pose::new(Quat::identity(), centroid));
        vehicles.push(init_vehicle(t.object_id, &points, base_poses, init_cfg)?);
    }
    Ok(SceneModel {
        street,
        vehicles,
        frame_count,
        num_classes,
        vehicle_class,
        rotation_convention: convention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{build_covariance, quat_to_rotmat};
    use crate::occupancy::{PointSource, SemanticPoint};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud_from(points: Vec<(Vector3<f64>, Option<Vector3<f64>>, Option<u32>)>) -> SemanticPointCloud {
        SemanticPointCloud {
            points: points
                .into_iter()
                .map(|(position, color, label)| SemanticPoint {
                    position,
                    color,
                    label,
                    source: PointSource::Occupancy,
                })
                .collect(),
        }
    }

    #[test]
    fn gray_point_gets_zero_dc() {
        let cloud = cloud_from(vec![
            (Vector3::zeros(), Some(Vector3::new(0.5, 0.5, 0.5)), Some(0)),
            (Vector3::new(1.0, 0.0, 0.0), None, Some(0)),
        ]);
        let m = init_street(&cloud, 3, &InitConfig::default()).unwrap();
        assert_relative_eq!(m.sh[0].coeffs[0], Vector3::zeros(), epsilon = 1e-12);
        assert_relative_eq!(m.sh[1].coeffs[0], Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn init_street_counts_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let cloud = cloud_from(
            (0..1000)
                .map(|_| {
                    (
                        Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
                        Some(Vector3::new(rng.gen(), rng.gen(), rng.gen())),
                        Some(rng.gen_range(0..3)),
                    )
                })
                .collect(),
        );
        let m = init_street(&cloud, 3, &InitConfig::default()).unwrap();
        assert_eq!(m.len(), 1000);
        m.validate().unwrap();
        for i in 0..m.len() {
            let alpha = sigmoid(m.opacity_logits[i]);
            assert!(alpha > 0.0 && alpha < 1.0);
            for a in 0..3 {
                assert!(m.log_scales[i][a].exp() > 0.0);
            }
        }
    }

    #[test]
    fn two_points_one_meter_apart_get_unit_scale() {
        let cloud = cloud_from(vec![
            (Vector3::zeros(), None, Some(0)),
            (Vector3::new(1.0, 0.0, 0.0), None, Some(0)),
        ]);
        let m = init_street(&cloud, 2, &InitConfig::default()).unwrap();
        for i in 0..2 {
            assert_relative_eq!(m.log_scales[i].x.exp(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(init_street(&SemanticPointCloud::default(), 2, &InitConfig::default()).is_err());
    }

    #[test]
    fn knn_hash_grid_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pts: Vec<Vector3<f64>> = (0..800)
            .map(|_| Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let brute = brute_knn(&pts);
        let fast = mean_knn_distance(&pts, 0.1);
        for (b, f) in brute.iter().zip(fast.iter()) {
            assert_relative_eq!(b, f, epsilon = 1e-9);
        }
    }

    fn small_vehicle(frames: usize) -> VehicleModel {
        let points: Vec<(Vector3<f64>, Option<Vector3<f64>>)> = vec![
            (Vector3::new(-0.5, 0.0, 0.0), Some(Vector3::new(1.0, 0.0, 0.0))),
            (Vector3::new(0.5, 0.0, 0.0), Some(Vector3::new(0.0, 1.0, 0.0))),
            (Vector3::new(0.0, 0.5, 0.0), None),
            (Vector3::new(0.0, -0.5, 0.0), None),
        ];
        let base: Vec<Option<Pose>> = (0..frames)
            .map(|f| Some(Pose::new(Quat::identity(), Vector3::new(f as f64, 0.0, 0.0))))
            .collect();
        init_vehicle(7, &points, base, &InitConfig::default()).unwrap()
    }

    #[test]
    fn vehicle_init_basics() {
        let v = small_vehicle(3);
        assert_eq!(v.object_id, 7);
        assert_eq!(v.len(), 4);
        assert!(!v.frozen);
        // Centroid-centered input -> zero vehicle-frame centroid.
        let mean: Vector3<f64> = v.positions.iter().sum::<Vector3<f64>>() / 4.0;
        assert_relative_eq!(mean, Vector3::zeros(), epsilon = 1e-9);
        // DC-only Fourier init: appearance constant over time.
        for t in [0.0, 0.37, 0.8] {
            let z = fourier_sh_at_time(&v.fourier_sh[0], t);
            assert_relative_eq!(z.coeffs[0], v.fourier_sh[0].coeffs[0], epsilon = 1e-12);
        }
        // Single-frame vehicles freeze.
        assert!(small_vehicle(1).frozen);
    }

    #[test]
    fn vehicle_empty_points_error() {
        assert!(init_vehicle(0, &[], vec![Some(Pose::identity())], &InitConfig::default()).is_err());
    }

    fn street_of(points: &[Vector3<f64>]) -> StreetGaussians {
        let cloud = cloud_from(points.iter().map(|p| (*p, None, Some(0))).collect());
        init_street(&cloud, 3, &InitConfig::default()).unwrap()
    }

    #[test]
    fn assemble_street_only() {
        let street = street_of(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        let scene = assemble(&street, &[], 0, 10, RotationConvention::Composed);
        assert_eq!(scene.gaussians.len(), 2);
        assert_eq!(scene.provenance, vec![Provenance::Street(0), Provenance::Street(1)]);
    }

    #[test]
    fn assemble_identity_pose_embeds_vehicle() {
        let street = street_of(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        let mut v = small_vehicle(3);
        v.base_poses = vec![Some(Pose::identity()); 3];
        let scene = assemble(&street, &[v.clone()], 1, 3, RotationConvention::Composed);
        assert_eq!(scene.gaussians.len(), 2 + 4);
        for gi in 0..4 {
            assert_relative_eq!(scene.gaussians[2 + gi].position, v.positions[gi], epsilon = 1e-12);
        }
    }

    #[test]
    fn assemble_translation_shifts_vehicle_only() {
        let street = street_of(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        let mut v = small_vehicle(2);
        v.base_poses = vec![Some(Pose::new(Quat::identity(), Vector3::new(5.0, 0.0, 0.0))); 2];
        let scene = assemble(&street, &[v.clone()], 0, 2, RotationConvention::Composed);
        for gi in 0..4 {
            let g = &scene.gaussians[2 + gi];
            assert_relative_eq!(g.position, v.positions[gi] + Vector3::new(5.0, 0.0, 0.0), epsilon = 1e-12);
            // Identity rotation: world covariance equals vehicle covariance.
            let cov_v = build_covariance(&v.log_scales[gi].map(f64::exp), &v.rotations[gi]).unwrap();
            let cov_w = build_covariance(&g.scale, &g.rotation).unwrap();
            assert_relative_eq!(cov_v, cov_w, epsilon = 1e-12);
        }
    }

    #[test]
    fn assemble_skips_absent_vehicles() {
        let street = street_of(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        let mut v = small_vehicle(3);
        v.base_poses[1] = None;
        let scene = assemble(&street, &[v], 1, 3, RotationConvention::Composed);
        assert_eq!(scene.gaussians.len(), 2);
    }

    #[test]
    fn assemble_is_rigid_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let street = street_of(&[Vector3::new(0.3, 1.0, -0.2), Vector3::new(1.0, 0.0, 0.7)]);
        let v = small_vehicle(2);
        let g = Pose::new(
            Quat::from_axis_angle(&Vector3::new(rng.gen_range(-1.0..1.0), rng.gen(), rng.gen())),
            Vector3::new(rng.gen_range(-3.0..3.0), rng.gen(), rng.gen()),
        );
        let plain = assemble(&street, &[v.clone()], 0, 2, RotationConvention::Composed);
        let mut street_g = street.clone();
        for p in street_g.positions.iter_mut() {
            *p = g.transform_point(p);
        }
        for q in street_g.rotations.iter_mut() {
            *q = g.rotation.mul(&q.normalized());
        }
        let mut v_g = v.clone();
        for bp in v_g.base_poses.iter_mut().flatten() {
            *bp = g.compose(bp);
        }
        let moved = assemble(&street_g, &[v_g], 0, 2, RotationConvention::Composed);
        for (a, b) in plain.gaussians.iter().zip(moved.gaussians.iter()) {
            assert_relative_eq!(g.transform_point(&a.position), b.position, epsilon = 1e-9);
        }
    }

    #[test]
    fn vehicle_world_covariance_preserves_spectrum() {
        let mut v = small_vehicle(2);
        v.base_poses = vec![
            Some(Pose::new(
                Quat::from_axis_angle(&Vector3::new(0.3, -0.2, 0.9)),
                Vector3::new(2.0, 1.0, 0.0),
            ));
            2
        ];
        v.log_scales[0] = Vector3::new(0.1f64.ln(), 0.4f64.ln(), 0.2f64.ln());
        let street = street_of(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        let scene = assemble(&street, &[v.clone()], 0, 2, RotationConvention::Composed);
        let g = &scene.gaussians[2];
        let cov_v = build_covariance(&v.log_scales[0].map(f64::exp), &v.rotations[0]).unwrap();
        let cov_w = build_covariance(&g.scale, &g.rotation).unwrap();
        let mut ev: Vec<f64> = cov_v.symmetric_eigenvalues().iter().cloned().collect();
        let mut ew: Vec<f64> = cov_w.symmetric_eigenvalues().iter().cloned().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ew.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in ev.iter().zip(ew.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn provenance_partitions_index_range() {
        let street = street_of(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        let scene = assemble(&street, &[small_vehicle(2)], 0, 2, RotationConvention::Composed);
        assert_eq!(scene.provenance.len(), scene.gaussians.len());
        let mut seen = std::collections::HashSet::new();
        for p in &scene.provenance {
            assert!(seen.insert(format!("{:?}", p)));
        }
    }

    #[test]
    fn literal_rotation_convention_matches_paper_formula() {
        let pose = Pose::new(Quat::from_axis_angle(&Vector3::new(0.0, 0.0, 0.7)), Vector3::zeros());
        let q_o = Quat::from_axis_angle(&Vector3::new(0.4, 0.0, 0.0));
        let (_, q_w) = transform_to_world(&pose, &Vector3::zeros(), &q_o, RotationConvention::Literal);
        let oracle = quat_to_rotmat(&q_o) * quat_to_rotmat(&pose.rotation).transpose();
        assert_relative_eq!(quat_to_rotmat(&q_w), oracle, epsilon = 1e-12);
    }

    #[test]
    fn convert_builds_scene_from_synthetic_grids() {
        let cfg = crate::harness::SynthConfig {
            frames: 5,
            width: 64,
            height: 64,
            road_length: 12.0,
            ..Default::default()
        };
        let synth = crate::harness::make_synthetic(&cfg).unwrap();
        let occ_cfg = crate::occupancy::OccupancyConfig {
            upsample_voxel: 0.25,
            ..Default::default()
        };
        let model = scene_from_occupancy(
            &synth.grids,
            &synth.cameras,
            &synth.images,
            None,
            &occ_cfg,
            &InitConfig::default(),
            crate::harness::SYNTH_NUM_CLASSES,
            crate::harness::CLASS_VEHICLE,
            RotationConvention::Composed,
        )
        .unwrap();
        // One dynamic vehicle, moving 0.8 m/frame >= mu_th.
        assert_eq!(model.vehicles.len(), 1);
        assert!(!model.vehicles[0].frozen);
        assert!(model.street.len() > 100);
        // Base-pose centroids stay close to the true trajectory (cell
        // quantization bounds the error by about a cell diagonal).
        for (f, gt) in &synth.gt_trajectory {
            let pose = model.vehicles[0].base_poses[*f].expect("vehicle observed every frame");
            assert!(
                (pose.translation - gt).norm() < cfg.cell_size * 1.8,
                "frame {} centroid off by {}",
                f,
                (pose.translation - gt).norm()
            );
        }
        // Street points were colorized from the views.
        let colored = model
            .street
            .sh
            .iter()
            .filter(|s| s.coeffs[0].norm() > 1e-9)
            .count();
        // Only a fraction of the lattice is ever inside the short camera
        // sweep's frustum; just require a meaningful colorized subset.
        assert!(colored > 50, "only {} colorized points", colored);
    }

    #[test]
    fn semantic_output_softmax_and_sigmoid() {
        let mut street = street_of(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        street.semantic_logits[0] = vec![4.0, 0.0, 0.0];
        let mut v = small_vehicle(2);
        v.semantic_logit = 0.0;
        let scene = assemble(&street, &[v], 0, 2, RotationConvention::Composed);
        let dist = semantic_output(&scene, 3, 2);
        // softmax(4,0,0) = e^4/(e^4+2) on the first class.
        let e4 = 4.0f64.exp();
        assert_relative_eq!(dist[0][0], e4 / (e4 + 2.0), epsilon = 1e-12);
        assert_relative_eq!(dist[0][1], 1.0 / (e4 + 2.0), epsilon = 1e-12);
        // vehicle logit 0 -> 0.5 on the vehicle class.
        assert_relative_eq!(dist[2][2], 0.5, epsilon = 1e-12);
        // distributions sum to 1.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut street2 = street_of(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]);
        for l in street2.semantic_logits.iter_mut() {
            *l = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        }
        let scene2 = assemble(&street2, &[], 0, 2, RotationConvention::Composed);
        for d in semantic_output(&scene2, 3, 2) {
            assert_relative_eq!(d.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
        }
    }
}
