//! Procedural synthetic avatar clips: a textured ellipsoid head with two
//! eye disks and a mouth bar whose opening is an analytic function of
//! expression coefficient 0. Head pose orbits a few degrees per frame; the
//! ground-truth deformation, landmarks, boxes, and UV maps are all closed
//! form, which makes every pipeline stage verifiable without real data.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use stylesplat_grad::Tensor;

use crate::camera::{Camera, CameraRecord, RigidPose};
use crate::data::{ingest, save_png_rgb, AvatarDataset, BoxesRecord, TrackingRecord};
use crate::error::Result;
use crate::math::{quat_from_axis_angle, quat_mul};
use crate::mesh::TriangleMesh;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub frames: usize,
    pub resolution: usize,
    pub expression_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { frames: 20, resolution: 64, expression_dim: 4, seed: 7 }
    }
}

/// Ellipsoid semi-axes of the head, world units.
pub const AXES: [f64; 3] = [0.95, 1.2, 1.0];
pub const CAMERA_DISTANCE: f64 = 3.4;

const EYE_CENTERS: [[f64; 2]; 2] = [[0.40, 0.62], [0.60, 0.62]];
const EYE_RADIUS: f64 = 0.05;
const MOUTH_V: f64 = 0.34;
const MOUTH_HALF_WIDTH: f64 = 0.11;
const EYE_COLOR: [f64; 3] = [0.08, 0.07, 0.10];
const MOUTH_COLOR: [f64; 3] = [0.45, 0.12, 0.14];
const BACKGROUND: [f64; 3] = [0.92, 0.92, 0.95];

/// Half-height of the mouth bar in surface-v units; the scripted opening.
pub fn mouth_half_open(e0: f64) -> f64 {
    0.02 + 0.05 * e0
}

pub fn default_camera(resolution: usize) -> Camera {
    let mut m = Matrix4::identity();
    m[(0, 0)] = -1.0;
    m[(1, 1)] = -1.0;
    m[(2, 3)] = CAMERA_DISTANCE;
    let f = 0.8 * resolution as f64;
    Camera {
        fx: f,
        fy: f,
        cx: resolution as f64 / 2.0,
        cy: resolution as f64 / 2.0,
        width: resolution,
        height: resolution,
        world_to_camera: m,
    }
}

/// Scripted conditioning of frame t: coefficient 0 drives the mouth, the
/// others wiggle without rendering consequence; the head yaws up to 20
/// degrees with a smaller pitch component.
pub fn scripted_conditioning(spec: &SynthSpec, t: usize) -> (Vec<f64>, RigidPose) {
    let phase = t as f64 / spec.frames as f64;
    let mut expression = vec![0.0; spec.expression_dim];
    expression[0] = 0.5 - 0.5 * (TAU * phase).cos();
    for (k, e) in expression.iter_mut().enumerate().skip(1) {
        *e = 0.3 * (TAU * phase + k as f64 * 1.3).sin();
    }
    let yaw = 20f64.to_radians() * (TAU * phase).sin();
    let pitch = 8f64.to_radians() * (2.0 * TAU * phase + 0.9).sin();
    let quat = quat_mul(
        quat_from_axis_angle([0.0, 1.0, 0.0], yaw),
        quat_from_axis_angle([1.0, 0.0, 0.0], pitch),
    );
    let trans = [0.05 * (TAU * phase + 0.7).sin(), 0.03 * (TAU * phase).cos(), 0.0];
    (expression, RigidPose { quat, trans })
}

/// Deterministic low-frequency texture noise from the seed.
struct TextureNoise {
    grid: Vec<f64>,
    n: usize,
}

impl TextureNoise {
    fn new(seed: u64) -> Self {
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e97_u64);
        let grid = (0..n * n * 3).map(|_| rng.gen::<f64>() * 0.16 - 0.08).collect();
        Self { grid, n }
    }

    fn sample(&self, u: f64, v: f64, c: usize) -> f64 {
        let x = (u.rem_euclid(1.0)) * self.n as f64;
        let y = (v.rem_euclid(1.0)) * self.n as f64;
        let (i0, j0) = (y.floor() as usize % self.n, x.floor() as usize % self.n);
        let (i1, j1) = ((i0 + 1) % self.n, (j0 + 1) % self.n);
        let (fy, fx) = (y.fract(), x.fract());
        let at = |i: usize, j: usize| self.grid[(i * self.n + j) * 3 + c];
        at(i0, j0) * (1.0 - fy) * (1.0 - fx)
            + at(i0, j1) * (1.0 - fy) * fx
            + at(i1, j0) * fy * (1.0 - fx)
            + at(i1, j1) * fy * fx
    }
}

/// Surface coordinates of a canonical point: u wraps around the vertical
/// axis with the face front (-z) at u = 0.5; v follows elevation.
pub fn surface_uv(canonical: Vector3<f64>) -> (f64, f64) {
    let n = Vector3::new(canonical.x / AXES[0], canonical.y / AXES[1], canonical.z / AXES[2]);
    let u = 0.5 + n.x.atan2(-n.z) / TAU;
    let v = 0.5 + (n.y.clamp(-1.0, 1.0)).asin() / PI;
    (u, v)
}

/// Canonical surface point of given surface coordinates.
pub fn surface_point(u: f64, v: f64) -> Vector3<f64> {
    let phi = (u - 0.5) * TAU;
    let psi = (v - 0.5) * PI;
    Vector3::new(
        AXES[0] * phi.sin() * psi.cos(),
        AXES[1] * psi.sin(),
        AXES[2] * -(phi.cos() * psi.cos()),
    )
}

fn surface_color(u: f64, v: f64, e0: f64, noise: &TextureNoise) -> [f64; 3] {
    for ec in EYE_CENTERS {
        let d2 = (u - ec[0]).powi(2) + (v - ec[1]).powi(2);
        if d2 < EYE_RADIUS * EYE_RADIUS {
            return EYE_COLOR;
        }
    }
    if (u - 0.5).abs() < MOUTH_HALF_WIDTH && (v - MOUTH_V).abs() < mouth_half_open(e0) {
        return MOUTH_COLOR;
    }
    let base = [0.84, 0.68, 0.58];
    let pattern = 0.07 * (14.0 * TAU * u).sin() * (10.0 * TAU * v).sin();
    std::array::from_fn(|c| (base[c] + pattern + noise.sample(u, v, c)).clamp(0.0, 1.0))
}

/// Nearest positive ray-ellipsoid intersection in canonical space.
fn intersect(origin: Vector3<f64>, dir: Vector3<f64>, pose: &RigidPose) -> Option<Vector3<f64>> {
    let r = pose.rotation();
    let tr = Vector3::from(pose.trans);
    let oc = r.transpose() * (origin - tr);
    let dc = r.transpose() * dir;
    let os = Vector3::new(oc.x / AXES[0], oc.y / AXES[1], oc.z / AXES[2]);
    let ds = Vector3::new(dc.x / AXES[0], dc.y / AXES[1], dc.z / AXES[2]);
    let a = ds.dot(&ds);
    let b = 2.0 * os.dot(&ds);
    let c = os.dot(&os) - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    let t = if t0 > 1e-6 { t0 } else { t1 };
    if t <= 1e-6 {
        return None;
    }
    Some(oc + dc * t)
}

/// One rendered frame with its analytic annotations.
pub struct SynthFrame {
    pub rgb: Tensor,
    pub uv: Tensor,
    pub landmarks: Vec<[f64; 2]>,
    pub eyes_box: [f64; 4],
    pub mouth_box: [f64; 4],
}

/// Render the head analytically for one conditioning.
pub fn render_frame(spec: &SynthSpec, e0: f64, pose: &RigidPose) -> SynthFrame {
    let camera = default_camera(spec.resolution);
    let noise = TextureNoise::new(spec.seed);
    let res = spec.resolution;
    let mut rgb = Tensor::zeros(&[3, res, res]);
    let mut uv = Tensor::zeros(&[3, res, res]);
    let origin = camera.center();
    let rot_t = camera.rotation().transpose();
    for i in 0..res {
        for j in 0..res {
            let dir_cam = Vector3::new(
                (j as f64 + 0.5 - camera.cx) / camera.fx,
                (i as f64 + 0.5 - camera.cy) / camera.fy,
                1.0,
            );
            let dir = rot_t * dir_cam;
            let (color, uvm) = match intersect(origin, dir, pose) {
                Some(canonical) => {
                    let (u, v) = surface_uv(canonical);
                    (surface_color(u, v, e0, &noise), [u, v, 1.0])
                }
                None => (BACKGROUND, [0.0, 0.0, 0.0]),
            };
            for c in 0..3 {
                rgb.data_mut()[c * res * res + i * res + j] = color[c];
                uv.data_mut()[c * res * res + i * res + j] = uvm[c].clamp(0.0, 1.0);
            }
        }
    }

    let project = |p: Vector3<f64>| -> [f64; 2] {
        let pc = camera.to_camera_space(pose.apply(p));
        [camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy]
    };
    let half = mouth_half_open(e0);
    let landmark_uvs: [[f64; 2]; 6] = [
        EYE_CENTERS[0],
        EYE_CENTERS[1],
        [0.5 - MOUTH_HALF_WIDTH, MOUTH_V],
        [0.5 + MOUTH_HALF_WIDTH, MOUTH_V],
        [0.5, MOUTH_V + half],
        [0.5, MOUTH_V - half],
    ];
    let landmarks: Vec<[f64; 2]> =
        landmark_uvs.iter().map(|&[u, v]| project(surface_point(u, v))).collect();

    let pad = 3.0;
    let bbox = |uvs: &[[f64; 2]]| -> [f64; 4] {
        let pts: Vec<[f64; 2]> = uvs.iter().map(|&[u, v]| project(surface_point(u, v))).collect();
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in pts {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        [
            (x0 - pad).max(0.0),
            (y0 - pad).max(0.0),
            (x1 + pad).min(res as f64),
            (y1 + pad).min(res as f64),
        ]
    };
    // eye box from points around both disks
    let mut eye_ring = Vec::new();
    for ec in EYE_CENTERS {
        for k in 0..8 {
            let a = k as f64 / 8.0 * TAU;
            eye_ring.push([ec[0] + EYE_RADIUS * a.cos(), ec[1] + EYE_RADIUS * a.sin()]);
        }
    }
    let eyes_box = bbox(&eye_ring);
    // the mouth box uses the maximum opening so it bounds the bar at any e0
    let hmax = mouth_half_open(1.0);
    let mouth_box = bbox(&[
        [0.5 - MOUTH_HALF_WIDTH, MOUTH_V - hmax],
        [0.5 - MOUTH_HALF_WIDTH, MOUTH_V + hmax],
        [0.5 + MOUTH_HALF_WIDTH, MOUTH_V - hmax],
        [0.5 + MOUTH_HALF_WIDTH, MOUTH_V + hmax],
        [0.5, MOUTH_V - hmax],
        [0.5, MOUTH_V + hmax],
    ]);
    SynthFrame { rgb, uv, landmarks, eyes_box, mouth_box }
}

/// Lat-long triangulation of the head surface.
pub fn head_mesh(stacks: usize, slices: usize) -> TriangleMesh {
    let mut vertices = Vec::new();
    vertices.push([0.0, -AXES[1], 0.0]); // south pole
    for i in 1..stacks {
        let v = i as f64 / stacks as f64;
        for j in 0..slices {
            let u = j as f64 / slices as f64;
            let p = surface_point(u, v);
            vertices.push([p.x, p.y, p.z]);
        }
    }
    vertices.push([0.0, AXES[1], 0.0]); // north pole
    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + (j % slices);
    let north = vertices.len() - 1;
    let mut faces = Vec::new();
    for j in 0..slices {
        faces.push([0, ring(1, j + 1), ring(1, j)]);
        faces.push([north, ring(stacks - 1, j), ring(stacks - 1, j + 1)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    TriangleMesh { vertices, faces, uvs: None }
}

/// Generate a full dataset directory and ingest it back.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<AvatarDataset> {
    assert!(spec.frames >= 2, "need at least two frames");
    std::fs::create_dir_all(out_dir.join("frames"))?;
    std::fs::create_dir_all(out_dir.join("uv"))?;
    let camera = default_camera(spec.resolution);
    let mut records = Vec::new();
    let mut landmarks = Vec::new();
    for t in 0..spec.frames {
        let (expression, pose) = scripted_conditioning(spec, t);
        let frame = render_frame(spec, expression[0], &pose);
        save_png_rgb(&frame.rgb, &out_dir.join(format!("frames/{t:06}.png")))?;
        save_png_rgb(&frame.uv, &out_dir.join(format!("uv/{t:06}.png")))?;
        records.push(TrackingRecord {
            frame: t,
            expression,
            pose,
            camera: CameraRecord::from_camera(&camera),
            boxes: BoxesRecord { eyes: frame.eyes_box, mouth: frame.mouth_box },
        });
        landmarks.push(frame.landmarks);
    }
    std::fs::write(out_dir.join("tracking.json"), serde_json::to_string_pretty(&records)?)?;
    std::fs::write(out_dir.join("landmarks.json"), serde_json::to_string(&landmarks)?)?;
    head_mesh(24, 32).save_obj(&out_dir.join("mesh.obj"))?;
    ingest(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_mouth(rgb: &Tensor, i: usize, j: usize) -> bool {
        let res = rgb.shape()[1];
        (0..3).all(|c| rgb.data()[c * res * res + i * res + j] == MOUTH_COLOR[c])
    }

    fn is_eye(rgb: &Tensor, i: usize, j: usize) -> bool {
        let res = rgb.shape()[1];
        (0..3).all(|c| rgb.data()[c * res * res + i * res + j] == EYE_COLOR[c])
    }

    /// Closed-form mouth rows at the center column for the frontal pose,
    /// from the 2-D ray/ellipse slice (independent of the renderer's
    /// general 3-D path).
    fn mouth_rows_closed_form(spec: &SynthSpec, e0: f64) -> Vec<usize> {
        let cam = default_camera(spec.resolution);
        let half = mouth_half_open(e0);
        let mut rows = Vec::new();
        for i in 0..spec.resolution {
            let beta = -(i as f64 + 0.5 - cam.cy) / cam.fy; // world y slope
            // ray (0, beta t, -d + t); ellipse (y/ay)^2 + (z/az)^2 = 1
            let (ay, az) = (AXES[1], AXES[2]);
            let a = (beta / ay).powi(2) + (1.0 / az).powi(2);
            let b = 2.0 * (-CAMERA_DISTANCE) / (az * az);
            let c = (CAMERA_DISTANCE / az).powi(2) - 1.0;
            let disc = b * b - 4.0 * a * c;
            if disc <= 0.0 {
                continue;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t <= 0.0 {
                continue;
            }
            let y = beta * t;
            let v = 0.5 + (y / ay).clamp(-1.0, 1.0).asin() / PI;
            if (v - MOUTH_V).abs() < half {
                rows.push(i);
            }
        }
        rows
    }

    #[test]
    fn mouth_opening_matches_closed_form_exactly() {
        let spec = SynthSpec { frames: 2, resolution: 64, expression_dim: 4, seed: 5 };
        let pose = RigidPose::identity();
        for e0 in [0.0, 1.0] {
            let frame = render_frame(&spec, e0, &pose);
            let j = 32; // center column
            let rendered: Vec<usize> =
                (0..64).filter(|&i| is_mouth(&frame.rgb, i, j)).collect();
            let predicted = mouth_rows_closed_form(&spec, e0);
            assert_eq!(rendered, predicted, "e0={e0}");
        }
        // the scripted opening strictly widens the bar
        let r0 = mouth_rows_closed_form(&spec, 0.0).len();
        let r1 = mouth_rows_closed_form(&spec, 1.0).len();
        assert!(r1 > r0, "opening did not grow: {r0} vs {r1}");
    }

    #[test]
    fn boxes_contain_their_features() {
        let spec = SynthSpec::default();
        for t in [0, 5, 9, 14] {
            let (expression, pose) = scripted_conditioning(&spec, t);
            let frame = render_frame(&spec, expression[0], &pose);
            let [ex0, ey0, ex1, ey1] = frame.eyes_box;
            let [mx0, my0, mx1, my1] = frame.mouth_box;
            for i in 0..spec.resolution {
                for j in 0..spec.resolution {
                    let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                    if is_eye(&frame.rgb, i, j) {
                        assert!(
                            x >= ex0 && x <= ex1 && y >= ey0 && y <= ey1,
                            "frame {t}: eye pixel ({i},{j}) outside eyes box"
                        );
                    }
                    if is_mouth(&frame.rgb, i, j) {
                        assert!(
                            x >= mx0 && x <= mx1 && y >= my0 && y <= my1,
                            "frame {t}: mouth pixel ({i},{j}) outside mouth box"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_generation() {
        let spec = SynthSpec { frames: 3, resolution: 32, expression_dim: 4, seed: 11 };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_generate(&spec, d1.path()).unwrap();
        synth_generate(&spec, d2.path()).unwrap();
        for t in 0..3 {
            let a = std::fs::read(d1.path().join(format!("frames/{t:06}.png"))).unwrap();
            let b = std::fs::read(d2.path().join(format!("frames/{t:06}.png"))).unwrap();
            assert_eq!(a, b, "frame {t} differs between runs");
        }
        let a = std::fs::read(d1.path().join("tracking.json")).unwrap();
        let b = std::fs::read(d2.path().join("tracking.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mesh_is_valid_and_covers_the_surface() {
        let mesh = head_mesh(16, 24);
        mesh.validate().unwrap();
        assert!(mesh.total_area() > 0.0);
        // every vertex satisfies the ellipsoid equation
        for v in &mesh.vertices {
            let r = (v[0] / AXES[0]).powi(2) + (v[1] / AXES[1]).powi(2) + (v[2] / AXES[2]).powi(2);
            assert!((r - 1.0).abs() < 1e-9);
        }
    }
}
