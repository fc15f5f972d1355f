//! Synthetic multi-camera scene simulator and dataset store.
//!
//! Pedestrians are vertical cylinders rendered as filled convex quads into
//! every view, with painter's-algorithm occlusion and a controllable
//! photometric style per domain. Generation is fully determined by
//! `(seed, configs)`: each frame draws from its own derived stream.

use crate::geometry::{project_world_to_image, BevGrid, CameraCalibration, GeometryError};
use crate::rng::{derive_rng, Purpose};
use crate::tensor::Tensor;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("grid does not cover the scene area")]
    GridTooSmall,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt dataset file {file}: {reason}")]
    CorruptDataset { file: PathBuf, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

/// Walkable area and pedestrian shape parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub area_w: f64,
    pub area_h: f64,
    pub ped_count_min: usize,
    pub ped_count_max: usize,
    #[serde(default = "default_ped_radius")]
    pub ped_radius: f64,
    #[serde(default = "default_ped_height")]
    pub ped_height: f64,
    #[serde(default = "default_min_separation")]
    pub min_separation: f64,
}

fn default_ped_radius() -> f64 {
    0.3
}
fn default_ped_height() -> f64 {
    1.8
}
fn default_min_separation() -> f64 {
    0.5
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let radius_ok = self.ped_radius > 0.0 && self.ped_radius < self.min_separation;
        if !radius_ok {
            return Err(DataError::InvalidConfig(format!(
                "need 0 < ped_radius < min_separation, got {} vs {}",
                self.ped_radius, self.min_separation
            )));
        }
        if self.ped_count_max < self.ped_count_min {
            return Err(DataError::InvalidConfig(
                "ped_count_max < ped_count_min".to_string(),
            ));
        }
        Ok(())
    }
}

/// Photometric appearance of one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainStyle {
    pub bg_mean: f64,
    pub bg_noise_std: f64,
    pub ped_intensity_min: f64,
    pub ped_intensity_max: f64,
    pub gain: f64,
    pub bias: f64,
    pub texture_seed: u64,
}

impl DomainStyle {
    /// Per-channel multiplicative jitter in [0.9, 1.1], fixed by
    /// `texture_seed`. Channels carry the same rendered image times these
    /// factors, giving each domain a distinct color balance.
    pub fn channel_jitter(&self) -> [f64; 3] {
        let mut rng = derive_rng(self.texture_seed, Purpose::StyleJitter as u64);
        [
            rng.random_range(0.9..1.1),
            rng.random_range(0.9..1.1),
            rng.random_range(0.9..1.1),
        ]
    }
}

/// The camera rig of one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigConfig {
    pub cameras: Vec<CameraCalibration>,
    pub image_w: usize,
    pub image_h: usize,
}

impl RigConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.cameras.is_empty() {
            return Err(DataError::InvalidConfig("rig has no cameras".to_string()));
        }
        for (k, cam) in self.cameras.iter().enumerate() {
            if cam.image_w != self.image_w || cam.image_h != self.image_h {
                return Err(DataError::InvalidConfig(format!(
                    "camera {k} resolution {}x{} != rig {}x{}",
                    cam.image_w, cam.image_h, self.image_w, self.image_h
                )));
            }
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }
}

/// One multi-view sample: N view images plus optional ground-truth cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    /// One `(3, image_h, image_w)` tensor per view, values in [0, 1].
    pub views: Vec<Tensor>,
    pub gt_positions: Option<Vec<(usize, usize)>>,
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Fills the convex quad with the given corner points (pixel coordinates,
/// pixel centers at integers) on a single-channel image. Inclusion is a
/// half-plane test against every edge, so an independent point-in-polygon
/// oracle reproduces the exact pixel set.
pub fn fill_convex_quad(img: &mut [f32], w: usize, h: usize, corners: &[(f64, f64); 4], value: f32) {
    let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let x0 = min_x.ceil().max(0.0) as i64;
    let x1 = max_x.floor().min(w as f64 - 1.0) as i64;
    let y0 = min_y.ceil().max(0.0) as i64;
    let y1 = max_y.floor().min(h as f64 - 1.0) as i64;
    if x0 > x1 || y0 > y1 {
        return;
    }
    // Signed area fixes the winding so either corner order works.
    let area: f64 = (0..4)
        .map(|k| {
            let a = corners[k];
            let b = corners[(k + 1) % 4];
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    let orient = if area >= 0.0 { 1.0 } else { -1.0 };
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64, y as f64);
            let inside = (0..4).all(|k| {
                let a = corners[k];
                let b = corners[(k + 1) % 4];
                let cross = (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                cross * orient >= 0.0
            });
            if inside {
                img[y as usize * w + x as usize] = value;
            }
        }
    }
}

/// Projects the silhouette quad of a cylinder at ground point `(x, y)` into
/// one view: foot and head centers with horizontal half-widths taken from
/// projecting `(x +/- radius)` at both heights. `None` when any of the six
/// probe points falls behind the camera.
pub fn cylinder_quad(
    cam: &CameraCalibration,
    x: f64,
    y: f64,
    radius: f64,
    height: f64,
) -> Option<[(f64, f64); 4]> {
    let foot = project_world_to_image(cam, [x, y, 0.0]).ok()?;
    let head = project_world_to_image(cam, [x, y, height]).ok()?;
    let foot_l = project_world_to_image(cam, [x - radius, y, 0.0]).ok()?;
    let foot_r = project_world_to_image(cam, [x + radius, y, 0.0]).ok()?;
    let head_l = project_world_to_image(cam, [x - radius, y, height]).ok()?;
    let head_r = project_world_to_image(cam, [x + radius, y, height]).ok()?;
    let hw_foot = (foot_r.0 - foot_l.0).abs() / 2.0;
    let hw_head = (head_r.0 - head_l.0).abs() / 2.0;
    Some([
        (foot.0 - hw_foot, foot.1),
        (foot.0 + hw_foot, foot.1),
        (head.0 + hw_head, head.1),
        (head.0 - hw_head, head.1),
    ])
}

/// Projected corners of an axis-aligned vertical world rectangle over
/// ground point `(x, y)`: span `x +/- w/2`, heights `z_base` to
/// `z_base + h`. Used by the 3D occlusion augmentation. `None` when a
/// corner is behind the camera.
pub fn upright_rect_quad(
    cam: &CameraCalibration,
    x: f64,
    y: f64,
    rect_w: f64,
    rect_h: f64,
    z_base: f64,
) -> Option<[(f64, f64); 4]> {
    let bl = project_world_to_image(cam, [x - rect_w / 2.0, y, z_base]).ok()?;
    let br = project_world_to_image(cam, [x + rect_w / 2.0, y, z_base]).ok()?;
    let tr = project_world_to_image(cam, [x + rect_w / 2.0, y, z_base + rect_h]).ok()?;
    let tl = project_world_to_image(cam, [x - rect_w / 2.0, y, z_base + rect_h]).ok()?;
    Some([bl, br, tr, tl])
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on half-open uniforms; u1 in (0, 1] avoids ln(0).
    let u1: f64 = 1.0 - rng.random_range(0.0..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const MAX_PLACEMENT_RETRIES: usize = 1000;

/// Draws one frame: rejection-sampled pedestrian positions, per-view
/// rendering with painter's-algorithm occlusion, photometric style, and
/// floor-quantized ground-truth cells.
///
/// Stream order (fixed for determinism): pedestrian count, positions,
/// per-pedestrian intensities, then per-view background noise.
pub fn sample_frame(
    rng: &mut ChaCha8Rng,
    scene: &SceneConfig,
    rig: &RigConfig,
    style: &DomainStyle,
    grid: &BevGrid,
) -> Result<FrameRecord, DataError> {
    scene.validate()?;
    rig.validate()?;
    let covers = grid.origin_x <= 0.0
        && grid.origin_y <= 0.0
        && grid.origin_x + grid.h_g as f64 * grid.cell_size >= scene.area_w
        && grid.origin_y + grid.w_g as f64 * grid.cell_size >= scene.area_h;
    if !covers {
        return Err(DataError::GridTooSmall);
    }

    let count = rng.random_range(scene.ped_count_min..=scene.ped_count_max);
    let mut positions: Vec<(f64, f64)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let x = rng.random_range(0.0..scene.area_w);
            let y = rng.random_range(0.0..scene.area_h);
            let ok = positions
                .iter()
                .all(|&(px, py)| ((px - x).powi(2) + (py - y).powi(2)).sqrt() >= scene.min_separation);
            if ok {
                positions.push((x, y));
                placed = true;
                break;
            }
        }
        if !placed {
            // Scene too crowded; degrade the count rather than loop forever.
            break;
        }
    }

    let intensities: Vec<f64> = (0..positions.len())
        .map(|_| rng.random_range(style.ped_intensity_min..=style.ped_intensity_max))
        .collect();

    let jitter = style.channel_jitter();
    let (w, h) = (rig.image_w, rig.image_h);
    let mut views = Vec::with_capacity(rig.n_views());
    for cam in &rig.cameras {
        let mut lum = vec![0.0f32; w * h];
        for px in lum.iter_mut() {
            *px = (style.bg_mean + style.bg_noise_std * standard_normal(rng)) as f32;
        }

        // Far to near by camera depth of the foot point; nearer overdraws.
        let mut order: Vec<usize> = (0..positions.len()).collect();
        let depth = |k: usize| cam.world_to_camera([positions[k].0, positions[k].1, 0.0])[2];
        order.sort_by(|&a, &b| depth(b).partial_cmp(&depth(a)).unwrap().then(a.cmp(&b)));
        for k in order {
            let (x, y) = positions[k];
            if let Some(quad) = cylinder_quad(cam, x, y, scene.ped_radius, scene.ped_height) {
                fill_convex_quad(&mut lum, w, h, &quad, intensities[k] as f32);
            }
        }

        let mut img = Tensor::zeros(&[3, h, w]);
        for (c, &jc) in jitter.iter().enumerate() {
            for (p, &l) in lum.iter().enumerate() {
                let v = (jc * (style.gain * l as f64 + style.bias)).clamp(0.0, 1.0);
                img.data_mut()[c * w * h + p] = v as f32;
            }
        }
        views.push(img);
    }

    let gt_positions = positions
        .iter()
        .map(|&(x, y)| {
            grid.world_to_cell(x, y)
                .expect("grid coverage was checked; pedestrian must quantize inside")
        })
        .collect();

    Ok(FrameRecord {
        frame_id: 0,
        views,
        gt_positions: Some(gt_positions),
    })
}

// ---------------------------------------------------------------------------
// Dataset store
// ---------------------------------------------------------------------------

pub const VIEW_MAGIC: &[u8; 4] = b"MVF1";

/// Writes one view tensor: magic "MVF1", u32 LE C, H, W, then C*H*W f32 LE.
pub fn write_view_file(path: &Path, view: &Tensor) -> Result<(), DataError> {
    let shape = view.shape();
    assert_eq!(shape.len(), 3, "view tensors are rank 3");
    let mut buf = Vec::with_capacity(16 + view.len() * 4);
    buf.extend_from_slice(VIEW_MAGIC);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in view.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_view_file(path: &Path) -> Result<Tensor, DataError> {
    let corrupt = |reason: &str| DataError::CorruptDataset {
        file: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(|_| corrupt("truncated header"))?;
    if &header[0..4] != VIEW_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let dim = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| corrupt("dimension overflow"))?;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw).map_err(io_err(path))?;
    if raw.len() != n * 4 {
        return Err(corrupt("payload length mismatch"));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&[c, h, w], data))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelLine {
    frame: u64,
    cells: Vec<[usize; 2]>,
}

/// Dataset layout and split bookkeeping; serialized as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_frames: usize,
    pub n_views: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// First 90% of frame ids.
    pub train_frames: Vec<u64>,
    /// Last 10% of frame ids.
    pub test_frames: Vec<u64>,
    pub rig_file: String,
    pub grid_file: String,
    pub labels_file: String,
}

fn view_file_name(frame_id: u64, view: usize) -> String {
    format!("frame_{frame_id:06}_view_{view:02}.mvf")
}

/// Renders and stores `n_frames` frames plus calibration, grid and manifest
/// files. Frame `k` draws from the stream `(seed, k)`, so regeneration with
/// the same seed is file-identical.
pub fn generate_dataset(
    scene: &SceneConfig,
    rig: &RigConfig,
    style: &DomainStyle,
    grid: &BevGrid,
    seed: u64,
    n_frames: usize,
    out_dir: &Path,
) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let rig_path = out_dir.join("rig.json");
    let json = serde_json::to_string_pretty(rig).expect("rig serializes");
    fs::write(&rig_path, json).map_err(io_err(&rig_path))?;

    let grid_path = out_dir.join("grid.json");
    let json = serde_json::to_string_pretty(grid).expect("grid serializes");
    fs::write(&grid_path, json).map_err(io_err(&grid_path))?;

    let labels_path = out_dir.join("labels.jsonl");
    let mut labels = String::new();
    for frame_id in 0..n_frames as u64 {
        let mut rng = derive_rng(seed, (Purpose::FrameGen as u64) << 32 | frame_id);
        let mut frame = sample_frame(&mut rng, scene, rig, style, grid)?;
        frame.frame_id = frame_id;
        for (v, view) in frame.views.iter().enumerate() {
            let path = out_dir.join(view_file_name(frame_id, v));
            write_view_file(&path, view)?;
        }
        let line = LabelLine {
            frame: frame_id,
            cells: frame
                .gt_positions
                .as_ref()
                .expect("generated frames are labeled")
                .iter()
                .map(|&(i, j)| [i, j])
                .collect(),
        };
        labels.push_str(&serde_json::to_string(&line).expect("label serializes"));
        labels.push('\n');
    }
    fs::write(&labels_path, labels).map_err(io_err(&labels_path))?;

    let train_count = n_frames * 9 / 10;
    let manifest = DatasetManifest {
        seed,
        n_frames,
        n_views: rig.n_views(),
        image_h: rig.image_h,
        image_w: rig.image_w,
        train_frames: (0..train_count as u64).collect(),
        test_frames: (train_count as u64..n_frames as u64).collect(),
        rig_file: "rig.json".to_string(),
        grid_file: "grid.json".to_string(),
        labels_file: "labels.jsonl".to_string(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// A dataset loaded into memory, frames ordered by id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub rig: RigConfig,
    pub grid: BevGrid,
    pub frames: Vec<FrameRecord>,
}

impl Dataset {
    pub fn train_frames(&self) -> Vec<&FrameRecord> {
        self.manifest
            .train_frames
            .iter()
            .map(|&id| &self.frames[id as usize])
            .collect()
    }

    pub fn test_frames(&self) -> Vec<&FrameRecord> {
        self.manifest
            .test_frames
            .iter()
            .map(|&id| &self.frames[id as usize])
            .collect()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::CorruptDataset {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads a dataset directory. Labels attach only when the labels file is
/// present; frames come back in frame-id order.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let rig: RigConfig = read_json(&dir.join(&manifest.rig_file))?;
    rig.validate().map_err(|e| DataError::CorruptDataset {
        file: dir.join(&manifest.rig_file),
        reason: e.to_string(),
    })?;
    let grid: BevGrid = read_json(&dir.join(&manifest.grid_file))?;

    let labels_path = dir.join(&manifest.labels_file);
    let labels: Option<Vec<LabelLine>> = if labels_path.exists() {
        let text = fs::read_to_string(&labels_path).map_err(io_err(&labels_path))?;
        let mut lines = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LabelLine =
                serde_json::from_str(line).map_err(|e| DataError::CorruptDataset {
                    file: labels_path.clone(),
                    reason: format!("line {}: {}", k + 1, e),
                })?;
            lines.push(parsed);
        }
        Some(lines)
    } else {
        None
    };

    let mut frames = Vec::with_capacity(manifest.n_frames);
    for frame_id in 0..manifest.n_frames as u64 {
        let mut views = Vec::with_capacity(manifest.n_views);
        for v in 0..manifest.n_views {
            let path = dir.join(view_file_name(frame_id, v));
            let view = read_view_file(&path)?;
            if view.shape() != [3, manifest.image_h, manifest.image_w] {
                return Err(DataError::CorruptDataset {
                    file: path,
                    reason: format!(
                        "view shape {:?} != (3, {}, {})",
                        view.shape(),
                        manifest.image_h,
                        manifest.image_w
                    ),
                });
            }
            views.push(view);
        }
        let gt_positions = labels.as_ref().map(|lines| {
            lines
                .iter()
                .find(|l| l.frame == frame_id)
                .map(|l| l.cells.iter().map(|c| (c[0], c[1])).collect())
                .unwrap_or_default()
        });
        frames.push(FrameRecord {
            frame_id,
            views,
            gt_positions,
        });
    }

    Ok(Dataset {
        manifest,
        rig,
        grid,
        frames,
    })
}

/// Writes a stripped copy of a dataset (no labels file), for use as an
/// unlabeled target domain.
pub fn strip_labels(dir: &Path) -> Result<(), DataError> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let labels = dir.join(&manifest.labels_file);
    if labels.exists() {
        fs::remove_file(&labels).map_err(io_err(&labels))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGrid;

    fn test_scene() -> SceneConfig {
        SceneConfig {
            area_w: 4.0,
            area_h: 4.0,
            ped_count_min: 1,
            ped_count_max: 3,
            ped_radius: 0.3,
            ped_height: 1.8,
            min_separation: 0.5,
        }
    }

    fn test_style() -> DomainStyle {
        DomainStyle {
            bg_mean: 0.8,
            bg_noise_std: 0.02,
            ped_intensity_min: 0.1,
            ped_intensity_max: 0.3,
            gain: 1.0,
            bias: 0.0,
            texture_seed: 1,
        }
    }

    fn test_rig(n: usize) -> RigConfig {
        let (w, h) = (64, 48);
        let corners = [
            (-0.6, -0.6),
            (4.6, -0.6),
            (4.6, 4.6),
            (-0.6, 4.6),
        ];
        let cameras = corners
            .iter()
            .take(n)
            .map(|&(x, y)| {
                CameraCalibration::look_at(
                    52.0,
                    52.0,
                    w as f64 / 2.0,
                    h as f64 / 2.0,
                    w,
                    h,
                    [x, y, 2.6],
                    [2.0, 2.0, 0.8],
                )
                .unwrap()
            })
            .collect();
        RigConfig {
            cameras,
            image_w: w,
            image_h: h,
        }
    }

    fn test_grid() -> BevGrid {
        BevGrid::new(-0.2, -0.2, 0.1, 44, 44).unwrap()
    }

    #[test]
    fn empty_count_range_gives_background_only() {
        let mut scene = test_scene();
        scene.ped_count_min = 0;
        scene.ped_count_max = 0;
        let mut rng = derive_rng(1, 0);
        let frame = sample_frame(&mut rng, &scene, &test_rig(2), &test_style(), &test_grid()).unwrap();
        assert_eq!(frame.gt_positions.as_deref(), Some(&[][..]));
        // Background-only image: everything near bg_mean, no dark pixels.
        for view in &frame.views {
            assert!(view.data().iter().all(|&v| v > 0.5));
        }
    }

    #[test]
    fn single_pedestrian_quantizes_to_floor_cell() {
        let mut scene = test_scene();
        scene.ped_count_min = 1;
        scene.ped_count_max = 1;
        let grid = test_grid();
        let mut rng = derive_rng(3, 7);
        let frame = sample_frame(&mut rng, &scene, &test_rig(1), &test_style(), &grid).unwrap();
        let cells = frame.gt_positions.unwrap();
        assert_eq!(cells.len(), 1);
        // Re-derive the position from the rng stream to confirm the cell.
        let mut rng2 = derive_rng(3, 7);
        let _count: usize = rng2.random_range(1..=1);
        let x: f64 = rng2.random_range(0.0..scene.area_w);
        let y: f64 = rng2.random_range(0.0..scene.area_h);
        let expect = (
            ((x - grid.origin_x) / grid.cell_size).floor() as usize,
            ((y - grid.origin_y) / grid.cell_size).floor() as usize,
        );
        assert_eq!(cells[0], expect);
    }

    #[test]
    fn fixed_seed_reproduces_frame_exactly() {
        let scene = test_scene();
        let rig = test_rig(3);
        let style = test_style();
        let grid = test_grid();
        let a = sample_frame(&mut derive_rng(9, 4), &scene, &rig, &style, &grid).unwrap();
        let b = sample_frame(&mut derive_rng(9, 4), &scene, &rig, &style, &grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_too_small_detected() {
        let grid = BevGrid::new(0.0, 0.0, 0.1, 10, 10).unwrap();
        let mut rng = derive_rng(0, 0);
        let err = sample_frame(&mut rng, &test_scene(), &test_rig(1), &test_style(), &grid);
        assert!(matches!(err, Err(DataError::GridTooSmall)));
    }

    #[test]
    fn pairwise_separation_respected() {
        let mut scene = test_scene();
        scene.ped_count_min = 5;
        scene.ped_count_max = 8;
        let grid = test_grid();
        for s in 0..20u64 {
            let mut rng = derive_rng(100, s);
            let frame = sample_frame(&mut rng, &scene, &test_rig(1), &test_style(), &grid).unwrap();
            let cells = frame.gt_positions.unwrap();
            for a in 0..cells.len() {
                for b in a + 1..cells.len() {
                    let d = (((cells[a].0 as f64 - cells[b].0 as f64).powi(2)
                        + (cells[a].1 as f64 - cells[b].1 as f64).powi(2))
                    .sqrt())
                        * grid.cell_size;
                    assert!(
                        d >= scene.min_separation - grid.cell_size,
                        "cells too close: {d}"
                    );
                }
            }
        }
    }

    #[test]
    fn dataset_roundtrip_and_split() {
        let dir = std::env::temp_dir().join(format!("mvbev_ds_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let manifest = generate_dataset(
            &test_scene(),
            &test_rig(2),
            &test_style(),
            &test_grid(),
            17,
            10,
            &dir,
        )
        .unwrap();
        assert_eq!(manifest.train_frames.len(), 9);
        assert_eq!(manifest.test_frames.len(), 1);

        let ds = load_dataset(&dir).unwrap();
        assert_eq!(ds.frames.len(), 10);
        for (k, frame) in ds.frames.iter().enumerate() {
            assert_eq!(frame.frame_id, k as u64);
            assert!(frame.gt_positions.is_some());
        }

        // Regeneration is file-identical.
        let dir2 = std::env::temp_dir().join(format!("mvbev_ds2_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir2);
        generate_dataset(
            &test_scene(),
            &test_rig(2),
            &test_style(),
            &test_grid(),
            17,
            10,
            &dir2,
        )
        .unwrap();
        for entry in fs::read_dir(&dir).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(dir.join(&name)).unwrap();
            let b = fs::read(dir2.join(&name)).unwrap();
            assert_eq!(a, b, "file {name:?} differs between regenerations");
        }

        // Stripping labels loads frames with gt absent.
        strip_labels(&dir2).unwrap();
        let unlabeled = load_dataset(&dir2).unwrap();
        assert!(unlabeled.frames.iter().all(|f| f.gt_positions.is_none()));
        // Pixels identical to the labeled copy.
        assert_eq!(unlabeled.frames[0].views, ds.frames[0].views);

        let _ = fs::remove_dir_all(&dir);
        let _ = fs::remove_dir_all(&dir2);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = std::env::temp_dir().join(format!("mvbev_empty_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let manifest = generate_dataset(
            &test_scene(),
            &test_rig(1),
            &test_style(),
            &test_grid(),
            0,
            0,
            &dir,
        )
        .unwrap();
        assert!(manifest.train_frames.is_empty() && manifest.test_frames.is_empty());
        let ds = load_dataset(&dir).unwrap();
        assert!(ds.frames.is_empty());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn corrupt_view_file_names_the_file() {
        let dir = std::env::temp_dir().join(format!("mvbev_corrupt_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        generate_dataset(
            &test_scene(),
            &test_rig(1),
            &test_style(),
            &test_grid(),
            5,
            2,
            &dir,
        )
        .unwrap();
        let victim = dir.join(view_file_name(0, 0));
        fs::write(&victim, b"not a view file").unwrap();
        match load_dataset(&dir) {
            Err(DataError::CorruptDataset { file, .. }) => assert_eq!(file, victim),
            other => panic!("expected CorruptDataset, got {other:?}"),
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn label_consistency_with_projection_tables() {
        // Whenever a gt cell is in view per the projection table, the
        // pedestrian's actual foot projection lands inside that image.
        use crate::geometry::build_projection_table;
        let scene = test_scene();
        let rig = test_rig(4);
        let style = test_style();
        let grid = test_grid();
        let tables: Vec<_> = rig
            .cameras
            .iter()
            .map(|cam| build_projection_table(cam, &grid, 12, 16, 0.25).unwrap())
            .collect();
        for s in 0..10u64 {
            let mut rng = derive_rng(55, s);
            // Positions are re-derived from cells at cell centers, so use the
            // rendered frame's gt cells directly.
            let frame = sample_frame(&mut rng, &scene, &rig, &style, &grid).unwrap();
            for &(i, j) in frame.gt_positions.as_ref().unwrap() {
                let center = grid.cell_center(i, j);
                for (v, table) in tables.iter().enumerate() {
                    if table.entry(i, j).is_some() {
                        let cam = &rig.cameras[v];
                        let (u, w) = project_world_to_image(cam, center).unwrap();
                        assert!(u >= 0.0 && u < cam.image_w as f64);
                        assert!(w >= 0.0 && w < cam.image_h as f64);
                    }
                }
            }
        }
    }
}
