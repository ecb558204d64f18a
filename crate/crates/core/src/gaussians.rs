//! Canonical Gaussian cloud: construction from a tracked mesh surface,
//! parameter validity, and covariance assembly.
//!
//! Scales are stored as logs and opacities as logits so positivity and range
//! are structural. Feature channels 0..3 are the base color view.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stylesplat_grad::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::math::{logit, quat_normalize, quat_to_matrix};
use crate::mesh::TriangleMesh;

/// Number of feature channels carried by every Gaussian.
pub const FEATURE_CHANNELS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    /// (n,3) world-space canonical centers.
    pub positions: Tensor,
    /// (n,4) unit quaternions (w,x,y,z).
    pub rotations: Tensor,
    /// (n,3) log scales; world scale = exp(log_scale).
    pub log_scales: Tensor,
    /// (n,) opacity logits; opacity = sigmoid(logit).
    pub opacity_logits: Tensor,
    /// (n,32) features; channels 0..3 are base color.
    pub features: Tensor,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Dataset("cloud must hold at least one Gaussian".into()));
        }
        let checks = [
            ("positions", self.positions.shape(), vec![n, 3]),
            ("rotations", self.rotations.shape(), vec![n, 4]),
            ("log_scales", self.log_scales.shape(), vec![n, 3]),
            ("opacity_logits", self.opacity_logits.shape(), vec![n]),
            ("features", self.features.shape(), vec![n, FEATURE_CHANNELS]),
        ];
        for (name, got, want) in checks {
            if got != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: format!("cloud.{name}"),
                    lhs: got.to_vec(),
                    rhs: want,
                });
            }
        }
        Ok(())
    }

    /// Area-proportional surface sampling with barycentric coordinates.
    /// Zero-area faces are skipped; a mesh with no area is an error.
    pub fn init_from_mesh(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Self> {
        assert!(n >= 1, "need at least one Gaussian");
        mesh.validate()?;
        let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| mesh.face_area(f)).collect();
        let mut cumulative = Vec::with_capacity(areas.len());
        let mut total = 0.0;
        for &a in &areas {
            total += a;
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Err(Error::AllFacesDegenerate);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::with_capacity(n * 3);
        for _ in 0..n {
            let target = rng.gen::<f64>() * total;
            let fi = match cumulative.binary_search_by(|c| c.partial_cmp(&target).unwrap()) {
                Ok(i) => i + 1,
                Err(i) => i,
            }
            .min(cumulative.len() - 1);
            let [ia, ib, ic] = mesh.faces[fi];
            let a = Vector3::from(mesh.vertices[ia]);
            let b = Vector3::from(mesh.vertices[ib]);
            let c = Vector3::from(mesh.vertices[ic]);
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let p = a + (b - a) * u + (c - a) * v;
            positions.extend_from_slice(&[p.x, p.y, p.z]);
        }

        let nn = mean_nearest_neighbor_distance(&positions, n);
        let log_scale = (nn * 0.5).max(1e-9).ln();

        let mut rotations = vec![0.0; n * 4];
        for i in 0..n {
            rotations[i * 4] = 1.0;
        }
        let mut features = vec![0.0; n * FEATURE_CHANNELS];
        for i in 0..n {
            for c in 0..3 {
                features[i * FEATURE_CHANNELS + c] = 0.5;
            }
        }
        Ok(Self {
            positions: Tensor::new(vec![n, 3], positions),
            rotations: Tensor::new(vec![n, 4], rotations),
            log_scales: Tensor::full(&[n, 3], log_scale),
            opacity_logits: Tensor::full(&[n], logit(0.5)),
            features: Tensor::new(vec![n, FEATURE_CHANNELS], features),
        })
    }

    /// Normalize every quaternion in place; zero quaternions become identity.
    pub fn normalize_rotations(&mut self) {
        let n = self.len();
        for i in 0..n {
            let row = &mut self.rotations.data_mut()[i * 4..(i + 1) * 4];
            let q = quat_normalize([row[0], row[1], row[2], row[3]]);
            row.copy_from_slice(&q);
        }
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let r = &self.rotations.data()[i * 4..(i + 1) * 4];
        [r[0], r[1], r[2], r[3]]
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        let p = &self.positions.data()[i * 3..(i + 1) * 3];
        Vector3::new(p[0], p[1], p[2])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        let s = &self.log_scales.data()[i * 3..(i + 1) * 3];
        Vector3::new(s[0].exp(), s[1].exp(), s[2].exp())
    }

    pub fn opacity(&self, i: usize) -> f64 {
        crate::math::sigmoid(self.opacity_logits.data()[i])
    }

    /// 3-D covariance R diag(s^2) R^T of one Gaussian.
    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        let r = quat_to_matrix(quat_normalize(self.rotation(i)));
        let s = self.scale(i);
        let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        r * d * r.transpose()
    }

    /// Axis-aligned bounding box of the centers.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for row in self.positions.data().chunks_exact(3) {
            for k in 0..3 {
                min[k] = min[k].min(row[k]);
                max[k] = max[k].max(row[k]);
            }
        }
        (min, max)
    }

    pub const PARAM_NAMES: [&'static str; 5] =
        ["cloud.positions", "cloud.rotations", "cloud.log_scales", "cloud.opacity_logits", "cloud.features"];

    pub fn write_params(&self, store: &mut ParamStore) {
        store.set("cloud.positions", self.positions.clone());
        store.set("cloud.rotations", self.rotations.clone());
        store.set("cloud.log_scales", self.log_scales.clone());
        store.set("cloud.opacity_logits", self.opacity_logits.clone());
        store.set("cloud.features", self.features.clone());
    }

    pub fn from_params(store: &ParamStore) -> Self {
        Self {
            positions: store.get("cloud.positions").clone(),
            rotations: store.get("cloud.rotations").clone(),
            log_scales: store.get("cloud.log_scales").clone(),
            opacity_logits: store.get("cloud.opacity_logits").clone(),
            features: store.get("cloud.features").clone(),
        }
    }
}

fn mean_nearest_neighbor_distance(positions: &[f64], n: usize) -> f64 {
    if n < 2 {
        return 0.1;
    }
    // O(n^2) over a capped subsample keeps init cheap for large clouds
    let cap = 2048.min(n);
    let stride = n / cap;
    let idx: Vec<usize> = (0..cap).map(|i| i * stride).collect();
    let mut total = 0.0;
    for &i in &idx {
        let pi = &positions[i * 3..i * 3 + 3];
        let mut best = f64::INFINITY;
        for &j in &idx {
            if i == j {
                continue;
            }
            let pj = &positions[j * 3..j * 3 + 3];
            let d2 = (pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2) + (pi[2] - pj[2]).powi(2);
            best = best.min(d2);
        }
        total += best.sqrt();
    }
    total / idx.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_right_triangle() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
            uvs: None,
        }
    }

    #[test]
    fn samples_lie_on_the_face() {
        let mesh = unit_right_triangle();
        let cloud = GaussianCloud::init_from_mesh(&mesh, 1000, 7).unwrap();
        for row in cloud.positions.data().chunks_exact(3) {
            // plane z = 0 and inside the barycentric simplex
            assert!(row[2].abs() < 1e-6);
            assert!(row[0] >= -1e-9 && row[1] >= -1e-9 && row[0] + row[1] <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn area_proportional_sampling() {
        // two triangles with area ratio 3:1; oracle recomputes areas by
        // cross product and bounds the count with a 3-sigma binomial interval
        let mesh = TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [0.0, 2.0, 0.0],
                [10.0, 0.0, 0.0],
                [11.0, 0.0, 0.0],
                [10.0, 2.0, 0.0],
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
            uvs: None,
        };
        let a0: f64 = {
            let e1 = Vector3::new(3.0, 0.0, 0.0);
            let e2 = Vector3::new(0.0, 2.0, 0.0);
            0.5 * e1.cross(&e2).norm()
        };
        let a1: f64 = {
            let e1 = Vector3::new(1.0, 0.0, 0.0);
            let e2 = Vector3::new(0.0, 2.0, 0.0);
            0.5 * e1.cross(&e2).norm()
        };
        assert!((a0 / a1 - 3.0).abs() < 1e-12);
        let p = a0 / (a0 + a1);
        let n = 20000;
        let cloud = GaussianCloud::init_from_mesh(&mesh, n, 42).unwrap();
        let on_big = cloud
            .positions
            .data()
            .chunks_exact(3)
            .filter(|row| row[0] <= 3.0 + 1e-9)
            .count();
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (on_big as f64 - mean).abs() <= 3.0 * sigma,
            "count {on_big} outside 3-sigma of {mean}"
        );
    }

    #[test]
    fn zero_area_faces_are_skipped() {
        let mesh = TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [5.0, 5.0, 5.0],
                [6.0, 6.0, 6.0],
                [7.0, 7.0, 7.0],
            ],
            // second face is collinear (zero area)
            faces: vec![[0, 1, 2], [3, 4, 5]],
            uvs: None,
        };
        let cloud = GaussianCloud::init_from_mesh(&mesh, 100, 3).unwrap();
        for row in cloud.positions.data().chunks_exact(3) {
            assert!(row[2].abs() < 1e-9, "sample {row:?} not on the unit face");
        }
    }

    #[test]
    fn degenerate_mesh_is_an_error() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]],
            faces: vec![[0, 1, 2]],
            uvs: None,
        };
        match GaussianCloud::init_from_mesh(&mesh, 10, 0) {
            Err(Error::AllFacesDegenerate) => {}
            other => panic!("expected AllFacesDegenerate, got {other:?}"),
        }
    }

    #[test]
    fn init_defaults() {
        let cloud = GaussianCloud::init_from_mesh(&unit_right_triangle(), 50, 1).unwrap();
        cloud.validate().unwrap();
        for i in 0..cloud.len() {
            assert_eq!(cloud.rotation(i), [1.0, 0.0, 0.0, 0.0]);
            assert!((cloud.opacity(i) - 0.5).abs() < 1e-12);
        }
        let f = cloud.features.data();
        assert_eq!(f[0], 0.5);
        assert_eq!(f[3], 0.0);
    }

    #[test]
    fn normalize_rotation_cases() {
        let mut cloud = GaussianCloud::init_from_mesh(&unit_right_triangle(), 3, 1).unwrap();
        cloud.rotations.data_mut()[0..4].copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
        cloud.rotations.data_mut()[4..8].copy_from_slice(&[0.0, 0.0, 0.0, 0.0]);
        cloud.rotations.data_mut()[8..12].copy_from_slice(&[0.3, -0.4, 0.5, 0.7]);
        cloud.normalize_rotations();
        assert_eq!(cloud.rotation(0), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(cloud.rotation(1), [1.0, 0.0, 0.0, 0.0]);
        let n = crate::math::quat_norm(cloud.rotation(2));
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn covariance_axis_aligned() {
        let mut cloud = GaussianCloud::init_from_mesh(&unit_right_triangle(), 1, 1).unwrap();
        cloud.log_scales.data_mut().copy_from_slice(&[0.0, 0.0, 0.0]);
        let c = cloud.covariance(0);
        assert!((c - Matrix3::identity()).norm() < 1e-12);
        cloud.log_scales.data_mut().copy_from_slice(&[2.0f64.ln(), 0.0, 0.0]);
        let c = cloud.covariance(0);
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((c - expected).norm() < 1e-12);
    }

    #[test]
    fn covariance_matches_independent_quaternion_conversion() {
        // independent conversion via nalgebra's UnitQuaternion
        let mut cloud = GaussianCloud::init_from_mesh(&unit_right_triangle(), 4, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..cloud.len() {
            for k in 0..4 {
                cloud.rotations.data_mut()[i * 4 + k] = rng.gen::<f64>() * 2.0 - 1.0;
            }
            for k in 0..3 {
                cloud.log_scales.data_mut()[i * 3 + k] = rng.gen::<f64>() - 0.5;
            }
        }
        cloud.normalize_rotations();
        for i in 0..cloud.len() {
            let q = cloud.rotation(i);
            let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            ));
            let r = uq.to_rotation_matrix().into_inner();
            let s = cloud.scale(i);
            let expected =
                r * Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z))
                    * r.transpose();
            assert!((cloud.covariance(i) - expected).norm() < 1e-10);
        }
    }

    #[test]
    fn covariance_is_psd() {
        let mut cloud = GaussianCloud::init_from_mesh(&unit_right_triangle(), 8, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in cloud.rotations.data_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        cloud.normalize_rotations();
        for i in 0..cloud.len() {
            let eig = cloud.covariance(i).symmetric_eigenvalues();
            for k in 0..3 {
                assert!(eig[k] >= -1e-9, "eigenvalue {}", eig[k]);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mesh = unit_right_triangle();
        let a = GaussianCloud::init_from_mesh(&mesh, 64, 123).unwrap();
        let b = GaussianCloud::init_from_mesh(&mesh, 64, 123).unwrap();
        assert_eq!(a, b);
    }
}
