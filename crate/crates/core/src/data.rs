//! Dataset ingestion and splitting.
//!
//! Layout on disk:
//!   root/frames/%06d.png     RGB frames
//!   root/uv/%06d.png         optional UV-coordinate images
//!   root/tracking.json       per-frame conditioning records
//!   root/mesh.obj            tracked canonical head mesh
//!   root/landmarks.json      optional per-frame landmark sets

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use stylesplat_grad::Tensor;

use crate::camera::{CameraRecord, RigidPose};
use crate::deformer::FrameConditioning;
use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::objectives::{BoxKind, RegionBox};

pub fn load_png_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[c * h * w + y as usize * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn save_png_rgb(t: &Tensor, path: &Path) -> Result<()> {
    assert_eq!(t.shape().len(), 3);
    assert_eq!(t.shape()[0], 3, "save_png_rgb expects (3,h,w)");
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb(std::array::from_fn(|c| {
                (t.data()[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            }));
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

/// One tracking record as stored in tracking.json.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrackingRecord {
    pub frame: usize,
    pub expression: Vec<f64>,
    pub pose: RigidPose,
    pub camera: CameraRecord,
    pub boxes: BoxesRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoxesRecord {
    pub eyes: [f64; 4],
    pub mouth: [f64; 4],
}

#[derive(Clone, Debug)]
pub struct FrameEntry {
    pub image_path: PathBuf,
    pub uv_path: Option<PathBuf>,
    pub record: TrackingRecord,
}

/// Frames plus tracking plus the canonical mesh, with a deterministic
/// contiguous-tail train/test split.
#[derive(Clone, Debug)]
pub struct AvatarDataset {
    pub root: PathBuf,
    pub frames: Vec<FrameEntry>,
    pub mesh: TriangleMesh,
    pub landmarks: Option<Vec<Vec<[f64; 2]>>>,
    pub train_fraction: f64,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

impl AvatarDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let c = &self.frames[0].record.camera;
        (c.width, c.height)
    }

    pub fn expression_dim(&self) -> usize {
        self.frames[0].record.expression.len()
    }

    /// Conditioning for one frame; the UV image is loaded only on request.
    pub fn conditioning(&self, i: usize, with_uv: bool) -> Result<FrameConditioning> {
        let e = &self.frames[i];
        let camera = e.record.camera.to_camera()?;
        let uv = match (&e.uv_path, with_uv) {
            (Some(p), true) => Some(load_png_rgb(p)?),
            _ => None,
        };
        let cond = FrameConditioning {
            expression: e.record.expression.clone(),
            pose: e.record.pose,
            camera,
            frame_id: e.record.frame,
            uv,
            eyes_box: to_region(BoxKind::Eyes, e.record.boxes.eyes),
            mouth_box: to_region(BoxKind::Mouth, e.record.boxes.mouth),
        };
        cond.validate()?;
        Ok(cond)
    }

    pub fn load_image(&self, i: usize) -> Result<Tensor> {
        load_png_rgb(&self.frames[i].image_path)
    }

    /// Contiguous-tail split: the final (1 - fraction) of frames are held
    /// out, mirroring a video benchmark protocol. Deterministic regardless
    /// of the seed (adjacent frames leak, so nothing is shuffled).
    pub fn split(&self, fraction: f64, _seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let n_train = ((n as f64) * fraction).round().clamp(0.0, n as f64) as usize;
        ((0..n_train).collect(), (n_train..n).collect())
    }

    pub fn train_test(&self) -> (Vec<usize>, Vec<usize>) {
        self.split(self.train_fraction, 0)
    }

    /// Re-serialize to a new directory (frames and uvs are copied).
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("frames"))?;
        let has_uv = self.frames.iter().any(|f| f.uv_path.is_some());
        if has_uv {
            std::fs::create_dir_all(dir.join("uv"))?;
        }
        for (i, f) in self.frames.iter().enumerate() {
            std::fs::copy(&f.image_path, dir.join(format!("frames/{i:06}.png")))?;
            if let Some(uv) = &f.uv_path {
                std::fs::copy(uv, dir.join(format!("uv/{i:06}.png")))?;
            }
        }
        let records: Vec<&TrackingRecord> = self.frames.iter().map(|f| &f.record).collect();
        std::fs::write(dir.join("tracking.json"), serde_json::to_string_pretty(&records)?)?;
        self.mesh.save_obj(&dir.join("mesh.obj"))?;
        if let Some(lm) = &self.landmarks {
            std::fs::write(dir.join("landmarks.json"), serde_json::to_string(lm)?)?;
        }
        Ok(())
    }
}

fn to_region(kind: BoxKind, b: [f64; 4]) -> RegionBox {
    RegionBox { kind, x0: b[0], y0: b[1], x1: b[2], y1: b[3] }
}

/// Validate and load a dataset directory.
pub fn ingest(root: &Path) -> Result<AvatarDataset> {
    let tracking_path = root.join("tracking.json");
    if !tracking_path.exists() {
        return Err(Error::MissingTracking(tracking_path));
    }
    let records: Vec<TrackingRecord> =
        serde_json::from_str(&std::fs::read_to_string(&tracking_path)?)?;

    let frames_dir = root.join("frames");
    let mut frame_count = 0;
    while frames_dir.join(format!("{frame_count:06}.png")).exists() {
        frame_count += 1;
    }
    if frame_count == 0 {
        return Err(Error::Dataset(format!("no frames found under {}", frames_dir.display())));
    }
    if records.len() != frame_count {
        return Err(Error::FrameCountMismatch { frames: frame_count, records: records.len() });
    }

    let expr_dim = records[0].expression.len();
    let mut frames = Vec::with_capacity(frame_count);
    for (i, record) in records.into_iter().enumerate() {
        if record.frame != i {
            return Err(Error::Dataset(format!(
                "tracking record {i} has frame id {} (ids must be contiguous)",
                record.frame
            )));
        }
        if record.expression.len() != expr_dim {
            return Err(Error::Dataset(format!("frame {i}: expression dim varies")));
        }
        let camera = record.camera.to_camera()?;
        record.pose.validate()?;
        for (kind, b) in [("eyes", record.boxes.eyes), ("mouth", record.boxes.mouth)] {
            let rb = to_region(BoxKind::Eyes, b);
            if rb.validate(camera.width, camera.height).is_err() {
                return Err(Error::BadBox {
                    frame: i,
                    kind: kind.into(),
                    coords: b,
                    width: camera.width,
                    height: camera.height,
                });
            }
        }
        let image_path = frames_dir.join(format!("{i:06}.png"));
        let uv_path = root.join(format!("uv/{i:06}.png"));
        frames.push(FrameEntry {
            image_path,
            uv_path: uv_path.exists().then_some(uv_path),
            record,
        });
    }

    let mesh = TriangleMesh::load_obj(&root.join("mesh.obj"))?;
    let landmarks_path = root.join("landmarks.json");
    let landmarks = if landmarks_path.exists() {
        let lm: Vec<Vec<[f64; 2]>> =
            serde_json::from_str(&std::fs::read_to_string(&landmarks_path)?)?;
        if lm.len() != frame_count {
            return Err(Error::Dataset(format!(
                "landmarks.json has {} entries for {frame_count} frames",
                lm.len()
            )));
        }
        Some(lm)
    } else {
        None
    };

    Ok(AvatarDataset {
        root: root.to_path_buf(),
        frames,
        mesh,
        landmarks,
        train_fraction: DEFAULT_TRAIN_FRACTION,
    })
}
