//! Semantic occupancy-grid processing: thresholding, per-cell semantics,
//! object extraction and tracking, densification and colorization of the
//! point-cloud priors that seed the Gaussian models.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::image_buf::Image;
use crate::render::Camera;

/// Defaults for every tunable the grid pipeline exposes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OccupancyConfig {
    /// Occupancy probability threshold τ (boundary inclusive).
    pub tau: f64,
    /// Per-frame-pair displacement threshold classifying a track as dynamic, meters.
    pub mu_th: f64,
    /// Greedy nearest-centroid association radius, meters.
    pub match_radius: f64,
    /// Target voxel size for dynamic-object upsampling, meters.
    pub upsample_voxel: f64,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        OccupancyConfig {
            tau: 0.5,
            mu_th: 0.5,
            match_radius: 2.0,
            upsample_voxel: 0.05,
        }
    }
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Dense `H×W×D` voxel lattice with per-cell occupancy and class probabilities.
///
/// Linear cell order is `i + H*(j + W*k)` (i fastest), matching the on-disk
/// layout; cell `(i, j, k)` maps to world axes (x, y, z).
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    /// Cell counts along (i, j, k).
    pub dims: (usize, usize, usize),
    pub origin: Vector3<f64>,
    pub cell_size: f64,
    pub num_classes: usize,
    pub frame_index: usize,
    pub occupancy: Vec<f32>,
    /// `num_classes` contiguous probabilities per cell, same cell order.
    pub class_probs: Vec<f32>,
}

impl OccupancyGrid {
    pub fn empty(
        dims: (usize, usize, usize),
        origin: Vector3<f64>,
        cell_size: f64,
        num_classes: usize,
        frame_index: usize,
    ) -> Self {
        let n = dims.0 * dims.1 * dims.2;
        OccupancyGrid {
            dims,
            origin,
            cell_size,
            num_classes,
            frame_index,
            occupancy: vec![0.0; n],
            class_probs: vec![1.0 / num_classes as f32; n * num_classes],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn cell_of(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.dims.0;
        let j = (idx / self.dims.0) % self.dims.1;
        let k = idx / (self.dims.0 * self.dims.1);
        (i, j, k)
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (i as f64 + 0.5) * self.cell_size,
                (j as f64 + 0.5) * self.cell_size,
                (k as f64 + 0.5) * self.cell_size,
            )
    }

    /// World-frame cell index of a position, if inside the lattice.
    pub fn cell_at(&self, p: &Vector3<f64>) -> Option<(usize, usize, usize)> {
        let rel = (p - self.origin) / self.cell_size;
        if rel.x < 0.0 || rel.y < 0.0 || rel.z < 0.0 {
            return None;
        }
        let (i, j, k) = (rel.x as usize, rel.y as usize, rel.z as usize);
        if i < self.dims.0 && j < self.dims.1 && k < self.dims.2 {
            Some((i, j, k))
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_cells();
        if self.occupancy.len() != n || self.class_probs.len() != n * self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "grid array lengths inconsistent with dims {:?}",
                self.dims
            )));
        }
        for (c, &p) in self.occupancy.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "occupancy probability {} out of [0,1] at cell {}",
                    p, c
                )));
            }
        }
        for cell in 0..n {
            let probs = &self.class_probs[cell * self.num_classes..(cell + 1) * self.num_classes];
            let sum: f32 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!(
                    "class probabilities at cell {} sum to {}",
                    cell, sum
                )));
            }
            if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidArgument(format!(
                    "class probability out of [0,1] at cell {}",
                    cell
                )));
            }
        }
        Ok(())
    }
}

/// Binary occupancy: cell occupied iff `p >= tau`.
pub fn threshold_occupancy(grid: &OccupancyGrid, tau: f64) -> Vec<bool> {
    grid.occupancy.iter().map(|&p| f64::from(p) >= tau).collect()
}

/// Per-cell argmax over class probabilities; ties break to the lowest index.
pub fn semantic_argmax(grid: &OccupancyGrid) -> Vec<u32> {
    let n = grid.num_cells();
    let mut labels = Vec::with_capacity(n);
    for cell in 0..n {
        let probs = &grid.class_probs[cell * grid.num_classes..(cell + 1) * grid.num_classes];
        let mut best = 0usize;
        for (c, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = c;
            }
        }
        labels.push(best as u32);
    }
    labels
}

// ---------------------------------------------------------------------------
// Object extraction and tracking
// ---------------------------------------------------------------------------

/// One connected component of vehicle-labeled occupied cells in a single frame.
#[derive(Debug, Clone)]
pub struct ObjectComponent {
    pub cells: Vec<(usize, usize, usize)>,
    pub centroid: Vector3<f64>,
}

/// 26-connected components over occupied cells carrying a vehicle class label.
pub fn extract_objects(
    grid: &OccupancyGrid,
    occupied: &[bool],
    labels: &[u32],
    vehicle_classes: &[u32],
) -> Vec<ObjectComponent> {
    let n = grid.num_cells();
    let is_vehicle = |idx: usize| occupied[idx] && vehicle_classes.contains(&labels[idx]);
    let mut visited = vec![false; n];
    let mut components = Vec::new();
    let (h, w, d) = grid.dims;
    for seed in 0..n {
        if visited[seed] || !is_vehicle(seed) {
            continue;
        }
        let mut stack = vec![seed];
        visited[seed] = true;
        let mut cells = Vec::new();
        while let Some(idx) = stack.pop() {
            let (i, j, k) = grid.cell_of(idx);
            cells.push((i, j, k));
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    for dk in -1i64..=1 {
                        if di == 0 && dj == 0 && dk == 0 {
                            continue;
                        }
                        let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                        if ni < 0 || nj < 0 || nk < 0 {
                            continue;
                        }
                        let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                        if ni >= h || nj >= w || nk >= d {
                            continue;
                        }
                        let nidx = grid.idx(ni, nj, nk);
                        if !visited[nidx] && is_vehicle(nidx) {
                            visited[nidx] = true;
                            stack.push(nidx);
                        }
                    }
                }
            }
        }
        cells.sort_unstable();
        let mut centroid = Vector3::zeros();
        for &(i, j, k) in &cells {
            centroid += grid.cell_center(i, j, k);
        }
        centroid /= cells.len() as f64;
        components.push(ObjectComponent { cells, centroid });
    }
    components
}

/// One observation of a tracked object.
#[derive(Debug, Clone)]
pub struct TrackFrame {
    pub frame: usize,
    pub centroid: Vector3<f64>,
    pub cells: Vec<(usize, usize, usize)>,
}

/// A per-object track across frames.
#[derive(Debug, Clone)]
pub struct ObjectTrack {
    pub object_id: usize,
    pub frames: Vec<TrackFrame>,
    pub dynamic: bool,
}

impl ObjectTrack {
    pub fn centroid_at(&self, frame: usize) -> Option<Vector3<f64>> {
        self.frames.iter().find(|f| f.frame == frame).map(|f| f.centroid)
    }
}

/// Greedy nearest-centroid association across consecutive frames.
///
/// Components in frame `t` may extend tracks last observed in frame `t-1`
/// within `match_radius`; everything unmatched opens a new track. The
/// `dynamic` flag is left `false`; run [`classify_dynamic`] afterwards.
pub fn associate_tracks(
    frames: &[(usize, Vec<ObjectComponent>)],
    match_radius: f64,
) -> Vec<ObjectTrack> {
    let mut tracks: Vec<ObjectTrack> = Vec::new();
    for (frame_index, components) in frames {
        // Candidate tracks: last observed in the immediately preceding frame.
        let candidates: Vec<usize> = tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.frames.last().map(|f| f.frame + 1) == Some(*frame_index))
            .map(|(i, _)| i)
            .collect();
        // All admissible pairs sorted by distance, greedy one-to-one.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for &ti in &candidates {
            let last = tracks[ti].frames.last().unwrap().centroid;
            for (ci, comp) in components.iter().enumerate() {
                let dist = (comp.centroid - last).norm();
                if dist <= match_radius {
                    pairs.push((dist, ti, ci));
                }
            }
        }
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut track_taken = vec![false; tracks.len()];
        let mut comp_taken = vec![false; components.len()];
        for (_, ti, ci) in pairs {
            if track_taken[ti] || comp_taken[ci] {
                continue;
            }
            track_taken[ti] = true;
            comp_taken[ci] = true;
            tracks[ti].frames.push(TrackFrame {
                frame: *frame_index,
                centroid: components[ci].centroid,
                cells: components[ci].cells.clone(),
            });
        }
        for (ci, comp) in components.iter().enumerate() {
            if !comp_taken[ci] {
                tracks.push(ObjectTrack {
                    object_id: tracks.len(),
                    frames: vec![TrackFrame {
                        frame: *frame_index,
                        centroid: comp.centroid,
                        cells: comp.cells.clone(),
                    }],
                    dynamic: false,
                });
            }
        }
    }
    tracks
}

/// Dynamic iff any consecutive-frame centroid displacement is `>= mu_th`.
pub fn classify_dynamic(track: &ObjectTrack, mu_th: f64) -> bool {
    if track.frames.len() < 2 {
        eprintln!(
            "warning: track {} observed in a single frame, classified static",
            track.object_id
        );
        return false;
    }
    track.frames.windows(2).any(|w| {
        w[1].frame == w[0].frame + 1 && (w[1].centroid - w[0].centroid).norm() >= mu_th
    })
}

// ---------------------------------------------------------------------------
// Densification and colorization
// ---------------------------------------------------------------------------

/// Subdivide each occupied cell into `⌈cell/target⌉³` sub-cell centers.
pub fn upsample_object(
    cells: &[(usize, usize, usize)],
    grid: &OccupancyGrid,
    target_voxel: f64,
) -> Vec<Vector3<f64>> {
    if target_voxel >= grid.cell_size {
        eprintln!(
            "warning: upsample target {} >= cell size {}, keeping cell centers",
            target_voxel, grid.cell_size
        );
        return cells
            .iter()
            .map(|&(i, j, k)| grid.cell_center(i, j, k))
            .collect();
    }
    let s = (grid.cell_size / target_voxel).ceil() as usize;
    let sub = grid.cell_size / s as f64;
    let mut points = Vec::with_capacity(cells.len() * s * s * s);
    for &(i, j, k) in cells {
        let corner = grid.origin
            + Vector3::new(
                i as f64 * grid.cell_size,
                j as f64 * grid.cell_size,
                k as f64 * grid.cell_size,
            );
        for a in 0..s {
            for b in 0..s {
                for c in 0..s {
                    points.push(
                        corner
                            + Vector3::new(
                                (a as f64 + 0.5) * sub,
                                (b as f64 + 0.5) * sub,
                                (c as f64 + 0.5) * sub,
                            ),
                    );
                }
            }
        }
    }
    points
}

/// Occlusion-aware colorization of a single object's point cloud against one
/// view: only points on the camera-facing shell sample the image. A per-pixel
/// z-buffer over the cloud itself keeps the nearest point; points more than
/// `depth_tol` behind that surface stay `None`, since the pixel they project
/// to shows whatever lies in front of them, not their own surface.
pub fn colorize_points_zbuffered(
    points: &[Vector3<f64>],
    camera: &Camera,
    image: &Image,
    depth_tol: f64,
) -> Vec<Option<Vector3<f64>>> {
    let mut zbuf: std::collections::HashMap<(i64, i64), f64> = std::collections::HashMap::new();
    let projected: Vec<Option<(Vector2<f64>, f64)>> = points
        .iter()
        .map(|p| {
            let px = camera.project_world_checked(p)?;
            let depth = camera.to_camera(p).z;
            let key = (px.x as i64, px.y as i64);
            zbuf.entry(key)
                .and_modify(|d| *d = d.min(depth))
                .or_insert(depth);
            Some((px, depth))
        })
        .collect();
    projected
        .into_iter()
        .map(|proj| {
            let (px, depth) = proj?;
            let front = zbuf[&(px.x as i64, px.y as i64)];
            if depth > front + depth_tol {
                return None;
            }
            image.sample_bilinear(px.x, px.y)
        })
        .collect()
}

/// Assign colors by projecting into each camera in order; the first valid
/// projection wins. Points never seen stay `None`.
pub fn colorize_points(
    points: &[Vector3<f64>],
    views: &[(&Camera, &Image)],
) -> Vec<Option<Vector3<f64>>> {
    points
        .iter()
        .map(|p| {
            for (cam, img) in views {
                if let Some(px) = cam.project_world_checked(p) {
                    if let Some(c) = img.sample_bilinear(px.x, px.y) {
                        return Some(c);
                    }
                }
            }
            None
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Point clouds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSource {
    Occupancy,
    Sfm,
}

#[derive(Debug, Clone)]
pub struct SemanticPoint {
    pub position: Vector3<f64>,
    /// RGB in [0,1]; `None` means never observed by a camera.
    pub color: Option<Vector3<f64>>,
    /// Semantic class id; `None` for unlabeled (SfM) points.
    pub label: Option<u32>,
    pub source: PointSource,
}

#[derive(Debug, Clone, Default)]
pub struct SemanticPointCloud {
    pub points: Vec<SemanticPoint>,
}

impl SemanticPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One point per occupied non-vehicle cell, at the cell center.
pub fn grid_to_static_cloud(
    grid: &OccupancyGrid,
    occupied: &[bool],
    labels: &[u32],
    vehicle_classes: &[u32],
) -> SemanticPointCloud {
    let mut cloud = SemanticPointCloud::default();
    for idx in 0..grid.num_cells() {
        if !occupied[idx] || vehicle_classes.contains(&labels[idx]) {
            continue;
        }
        let (i, j, k) = grid.cell_of(idx);
        cloud.points.push(SemanticPoint {
            position: grid.cell_center(i, j, k),
            color: None,
            label: Some(labels[idx]),
            source: PointSource::Occupancy,
        });
    }
    cloud
}

/// Concatenate an SfM cloud onto a static cloud. Source tags are preserved,
/// SfM points stay unlabeled, duplicates are retained. Both clouds must
/// already share the world frame; this is the caller's responsibility.
pub fn merge_with_sfm(mut cloud: SemanticPointCloud, sfm: SemanticPointCloud) -> SemanticPointCloud {
    cloud.points.extend(sfm.points.into_iter().map(|mut p| {
        p.source = PointSource::Sfm;
        p.label = None;
        p
    }));
    cloud
}
