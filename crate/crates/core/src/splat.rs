//! Differentiable multi-channel Gaussian splatting.
//!
//! Gaussians are projected with the perspective EWA approximation,
//! depth-sorted (ties broken by index, a total order), binned into 16x16
//! tiles, and composited front-to-back per pixel. The whole render enters
//! the tape as one custom op whose backward is written by hand and verified
//! against finite differences and a per-pixel scalar oracle.
//!
//! A pixel receives a contribution when its center lies inside the
//! Gaussian's 3-sigma box and the opacity-weighted density is at least
//! 1/255; accumulation stops once transmittance drops below 1e-4. The naive
//! reference render applies the same rules, so tiled and reference output
//! are bit-identical.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use stylesplat_grad::{Graph, NodeId, Tensor};

use crate::camera::Camera;
use crate::deformer::CloudNodes;
use crate::error::{Error, Result};
use crate::gaussians::{GaussianCloud, FEATURE_CHANNELS};
use crate::math::{quat_norm, quat_normalize, quat_to_matrix, sigmoid};

pub const TILE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
pub const COV2D_REGULARIZATION: f64 = 0.3;
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_STOP: f64 = 1e-4;

/// Rendered multi-channel image: feature channels then one alpha channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    /// (FEATURE_CHANNELS + 1, h, w); last channel is accumulated opacity.
    pub data: Tensor,
}

impl FeatureImage {
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn feature(&self, ch: usize, i: usize, j: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.data.data()[ch * h * w + i * w + j]
    }

    pub fn alpha(&self, i: usize, j: usize) -> f64 {
        self.feature(FEATURE_CHANNELS, i, j)
    }

    /// Copy of the first three channels.
    pub fn rgb(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        Tensor::new(vec![3, h, w], self.data.data()[..3 * h * w].to_vec())
    }

    /// Copy of the feature channels (without alpha).
    pub fn features(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        Tensor::new(
            vec![FEATURE_CHANNELS, h, w],
            self.data.data()[..FEATURE_CHANNELS * h * w].to_vec(),
        )
    }

    /// Copy of the alpha channel.
    pub fn alpha_map(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        Tensor::new(vec![h, w], self.data.data()[FEATURE_CHANNELS * h * w..].to_vec())
    }
}

/// Slice the feature channels / rgb / alpha out of a rendered graph node.
pub fn rgb_node(g: &mut Graph, render: NodeId) -> NodeId {
    g.slice_axis0(render, 0, 3)
}

pub fn features_node(g: &mut Graph, render: NodeId) -> NodeId {
    g.slice_axis0(render, 0, FEATURE_CHANNELS)
}

pub fn alpha_node(g: &mut Graph, render: NodeId) -> NodeId {
    g.slice_axis0(render, FEATURE_CHANNELS, 1)
}

/// Perspective EWA projection of one Gaussian given its 3-D covariance.
/// Returns pixel-space mean, regularized 2-D covariance, and depth.
pub fn project_gaussian(
    camera: &Camera,
    mu: Vector3<f64>,
    cov3d: &Matrix3<f64>,
) -> Result<(Vector2<f64>, Matrix2<f64>, f64)> {
    let t = camera.to_camera_space(mu);
    if t.z <= NEAR_PLANE {
        return Err(Error::BehindCamera);
    }
    let mean = Vector2::new(
        camera.fx * t.x / t.z + camera.cx,
        camera.fy * t.y / t.z + camera.cy,
    );
    let j = ewa_jacobian(camera, &t);
    let w = camera.rotation();
    let v = w * cov3d * w.transpose();
    let cov2d = j * v * j.transpose() + Matrix2::identity() * COV2D_REGULARIZATION;
    Ok((mean, cov2d, t.z))
}

fn ewa_jacobian(camera: &Camera, t: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z = t.z;
    nalgebra::Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * t.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * t.y / (z * z),
    )
}

struct Projected {
    visible: bool,
    t: Vector3<f64>,
    mean: Vector2<f64>,
    /// packed symmetric 2-D covariance (a, b, c) including regularization
    cov: [f64; 3],
    /// packed inverse covariance
    conic: [f64; 3],
    radius: f64,
    opacity: f64,
    // cached factors for the backward pass
    qn: [f64; 4],
    qnorm: f64,
    s: [f64; 3],
    rmat: Matrix3<f64>,
    vmat: Matrix3<f64>,
}

impl Projected {
    fn hidden() -> Self {
        Self {
            visible: false,
            t: Vector3::zeros(),
            mean: Vector2::zeros(),
            cov: [0.0; 3],
            conic: [0.0; 3],
            radius: 0.0,
            opacity: 0.0,
            qn: [1.0, 0.0, 0.0, 0.0],
            qnorm: 1.0,
            s: [0.0; 3],
            rmat: Matrix3::identity(),
            vmat: Matrix3::zeros(),
        }
    }
}

struct SplatInputs<'a> {
    positions: &'a Tensor,
    rotations: &'a Tensor,
    log_scales: &'a Tensor,
    opacity_logits: &'a Tensor,
    features: &'a Tensor,
}

impl<'a> SplatInputs<'a> {
    fn n(&self) -> usize {
        self.positions.shape()[0]
    }

    fn check(&self) {
        let n = self.n();
        assert_eq!(self.positions.shape(), &[n, 3], "positions shape");
        assert_eq!(self.rotations.shape(), &[n, 4], "rotations shape");
        assert_eq!(self.log_scales.shape(), &[n, 3], "log_scales shape");
        assert_eq!(self.opacity_logits.shape(), &[n], "opacity shape");
        assert_eq!(self.features.shape(), &[n, FEATURE_CHANNELS], "features shape");
    }
}

fn project_all(inp: &SplatInputs, camera: &Camera) -> Vec<Projected> {
    let n = inp.n();
    let w = camera.rotation();
    let tr = camera.translation();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = inp.positions.data();
        let mu = Vector3::new(p[i * 3], p[i * 3 + 1], p[i * 3 + 2]);
        let t = w * mu + tr;
        if t.z <= NEAR_PLANE {
            out.push(Projected::hidden());
            continue;
        }
        let r = inp.rotations.data();
        let q = [r[i * 4], r[i * 4 + 1], r[i * 4 + 2], r[i * 4 + 3]];
        let qnorm = quat_norm(q);
        let qn = quat_normalize(q);
        let rmat = quat_to_matrix(qn);
        let ls = inp.log_scales.data();
        let s = [ls[i * 3].exp(), ls[i * 3 + 1].exp(), ls[i * 3 + 2].exp()];
        let m = rmat * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
        let sigma = m * m.transpose();
        let vmat = w * sigma * w.transpose();
        let j = ewa_jacobian(camera, &t);
        let c2 = j * vmat * j.transpose();
        let a = c2[(0, 0)] + COV2D_REGULARIZATION;
        let b = c2[(0, 1)];
        let c = c2[(1, 1)] + COV2D_REGULARIZATION;
        let det = a * c - b * b;
        if det <= 0.0 {
            out.push(Projected::hidden());
            continue;
        }
        let conic = [c / det, -b / det, a / det];
        let mid = 0.5 * (a + c);
        let lambda_max = mid + ((mid - c) * (mid - a) + b * b).abs().sqrt();
        let radius = 3.0 * lambda_max.sqrt();
        let mean = Vector2::new(
            camera.fx * t.x / t.z + camera.cx,
            camera.fy * t.y / t.z + camera.cy,
        );
        out.push(Projected {
            visible: true,
            t,
            mean,
            cov: [a, b, c],
            conic,
            radius,
            opacity: sigmoid(inp.opacity_logits.data()[i]),
            qn,
            qnorm,
            s,
            rmat,
            vmat,
        });
    }
    out
}

/// Visible indices sorted by (depth ascending, index ascending).
fn sorted_order(projs: &[Projected]) -> Vec<u32> {
    let mut order: Vec<u32> =
        (0..projs.len() as u32).filter(|&i| projs[i as usize].visible).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (projs[a as usize].t.z, projs[b as usize].t.z);
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    order
}

fn pixel_center(j: usize) -> f64 {
    j as f64 + 0.5
}

fn in_aabb(p: &Projected, px: f64, py: f64) -> bool {
    (px - p.mean.x).abs() <= p.radius && (py - p.mean.y).abs() <= p.radius
}

/// Opacity-weighted density at a pixel center, with the skip rule applied.
/// Returns None when the contribution is ignored.
fn contribution(p: &Projected, px: f64, py: f64) -> Option<f64> {
    if !in_aabb(p, px, py) {
        return None;
    }
    let dx = px - p.mean.x;
    let dy = py - p.mean.y;
    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    if q < 0.0 {
        return None;
    }
    let c = p.opacity * (-0.5 * q).exp();
    if c < ALPHA_SKIP {
        None
    } else {
        Some(c)
    }
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    lists: Vec<Vec<u32>>,
}

fn build_tiles(projs: &[Projected], order: &[u32], width: usize, height: usize) -> TileGrid {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &idx in order {
        let p = &projs[idx as usize];
        let x0 = ((p.mean.x - p.radius - 1.0).floor().max(0.0)) as usize / TILE;
        let y0 = ((p.mean.y - p.radius - 1.0).floor().max(0.0)) as usize / TILE;
        let x1f = (p.mean.x + p.radius + 1.0).ceil();
        let y1f = (p.mean.y + p.radius + 1.0).ceil();
        if x1f < 0.0 || y1f < 0.0 {
            continue;
        }
        let x1 = ((x1f as usize).min(width.saturating_sub(1))) / TILE;
        let y1 = ((y1f as usize).min(height.saturating_sub(1))) / TILE;
        if p.mean.x - p.radius > width as f64 || p.mean.y - p.radius > height as f64 {
            continue;
        }
        for ty in y0..=y1.min(tiles_y - 1) {
            for tx in x0..=x1.min(tiles_x - 1) {
                lists[ty * tiles_x + tx].push(idx);
            }
        }
    }
    TileGrid { tiles_x, tiles_y, lists }
}

fn composite_pixel(
    projs: &[Projected],
    candidates: &[u32],
    px: f64,
    py: f64,
    out_pixel: &mut dyn FnMut(usize, f64),
) -> f64 {
    let mut transmittance = 1.0;
    for &idx in candidates {
        let p = &projs[idx as usize];
        let Some(c) = contribution(p, px, py) else { continue };
        let weight = c * transmittance;
        out_pixel(idx as usize, weight);
        transmittance *= 1.0 - c;
        if transmittance < TRANSMITTANCE_STOP {
            break;
        }
    }
    transmittance
}

fn forward(inp: &SplatInputs, camera: &Camera) -> (Tensor, Vec<Projected>, Vec<u32>, TileGrid) {
    inp.check();
    let (h, w) = (camera.height, camera.width);
    let projs = project_all(inp, camera);
    let order = sorted_order(&projs);
    let tiles = build_tiles(&projs, &order, w, h);
    let mut out = Tensor::zeros(&[FEATURE_CHANNELS + 1, h, w]);
    let feats = inp.features.data();
    for ty in 0..tiles.tiles_y {
        for tx in 0..tiles.tiles_x {
            let list = &tiles.lists[ty * tiles.tiles_x + tx];
            for i in ty * TILE..((ty + 1) * TILE).min(h) {
                for j in tx * TILE..((tx + 1) * TILE).min(w) {
                    let (px, py) = (pixel_center(j), pixel_center(i));
                    let data = out.data_mut();
                    let t_fin = composite_pixel(
                        &projs,
                        list,
                        px,
                        py,
                        &mut |idx, weight| {
                            for ch in 0..FEATURE_CHANNELS {
                                data[ch * h * w + i * w + j] +=
                                    feats[idx * FEATURE_CHANNELS + ch] * weight;
                            }
                        },
                    );
                    data[FEATURE_CHANNELS * h * w + i * w + j] = 1.0 - t_fin;
                }
            }
        }
    }
    (out, projs, order, tiles)
}

/// Naive reference: every pixel iterates the full sorted list with the same
/// inclusion and stop rules. Matches the tiled render bit-for-bit.
pub fn rasterize_reference(
    positions: &Tensor,
    rotations: &Tensor,
    log_scales: &Tensor,
    opacity_logits: &Tensor,
    features: &Tensor,
    camera: &Camera,
) -> FeatureImage {
    let inp = SplatInputs { positions, rotations, log_scales, opacity_logits, features };
    inp.check();
    let (h, w) = (camera.height, camera.width);
    let projs = project_all(&inp, camera);
    let order = sorted_order(&projs);
    let feats = features.data();
    let mut out = Tensor::zeros(&[FEATURE_CHANNELS + 1, h, w]);
    for i in 0..h {
        for j in 0..w {
            let (px, py) = (pixel_center(j), pixel_center(i));
            let data = out.data_mut();
            let t_fin =
                composite_pixel(&projs, &order, px, py, &mut |idx, weight| {
                    for ch in 0..FEATURE_CHANNELS {
                        data[ch * h * w + i * w + j] += feats[idx * FEATURE_CHANNELS + ch] * weight;
                    }
                });
            data[FEATURE_CHANNELS * h * w + i * w + j] = 1.0 - t_fin;
        }
    }
    FeatureImage { data: out }
}

/// Per-pixel compositing weights (gaussian index, alpha_i * g_i * T_i),
/// exposed for oracle tests and the weight-sum invariant.
pub fn compositing_weights(
    cloud: &GaussianCloud,
    camera: &Camera,
    i: usize,
    j: usize,
) -> Vec<(usize, f64)> {
    let inp = SplatInputs {
        positions: &cloud.positions,
        rotations: &cloud.rotations,
        log_scales: &cloud.log_scales,
        opacity_logits: &cloud.opacity_logits,
        features: &cloud.features,
    };
    let projs = project_all(&inp, camera);
    let order = sorted_order(&projs);
    let mut out = Vec::new();
    composite_pixel(
        &projs,
        &order,
        pixel_center(j),
        pixel_center(i),
        &mut |idx, weight| out.push((idx, weight)),
    );
    out
}

/// Forward-only convenience render of a concrete cloud.
pub fn rasterize_cloud(cloud: &GaussianCloud, camera: &Camera) -> FeatureImage {
    let inp = SplatInputs {
        positions: &cloud.positions,
        rotations: &cloud.rotations,
        log_scales: &cloud.log_scales,
        opacity_logits: &cloud.opacity_logits,
        features: &cloud.features,
    };
    let (out, _, _, _) = forward(&inp, camera);
    FeatureImage { data: out }
}

/// Rasterize bound cloud nodes into a (FEATURE_CHANNELS+1, h, w) node with a
/// hand-written backward to every cloud tensor.
pub fn rasterize_node(g: &mut Graph, cloud: &CloudNodes, camera: &Camera) -> NodeId {
    let inp = SplatInputs {
        positions: g.value(cloud.positions),
        rotations: g.value(cloud.rotations),
        log_scales: g.value(cloud.log_scales),
        opacity_logits: g.value(cloud.opacity_logits),
        features: g.value(cloud.features),
    };
    let (out, projs, order, tiles) = forward(&inp, camera);
    let parents =
        [cloud.positions, cloud.rotations, cloud.log_scales, cloud.opacity_logits, cloud.features];
    let cam = camera.clone();
    let cloud = *cloud;
    g.custom(&parents, out, move |graph, grad| {
        let inp = SplatInputs {
            positions: graph.value(cloud.positions),
            rotations: graph.value(cloud.rotations),
            log_scales: graph.value(cloud.log_scales),
            opacity_logits: graph.value(cloud.opacity_logits),
            features: graph.value(cloud.features),
        };
        let grads = backward(&inp, &cam, &projs, &order, &tiles, grad);
        vec![
            (cloud.positions, grads.0),
            (cloud.rotations, grads.1),
            (cloud.log_scales, grads.2),
            (cloud.opacity_logits, grads.3),
            (cloud.features, grads.4),
        ]
    })
}

fn backward(
    inp: &SplatInputs,
    camera: &Camera,
    projs: &[Projected],
    _order: &[u32],
    tiles: &TileGrid,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let n = inp.n();
    let (h, w) = (camera.height, camera.width);
    assert_eq!(grad.shape(), &[FEATURE_CHANNELS + 1, h, w], "render grad shape");
    let feats = inp.features.data();
    let gd = grad.data();

    // per-gaussian accumulators in screen space
    let mut g_mean = vec![[0.0f64; 2]; n];
    let mut g_cov_full = vec![[0.0f64; 4]; n]; // row-major 2x2 on the inverse
    let mut g_opacity_logit = vec![0.0f64; n];
    let mut g_feat = Tensor::zeros(&[n, FEATURE_CHANNELS]);

    // replay compositing per pixel, then walk the contribution list backwards
    let mut contribs: Vec<(usize, f64, f64)> = Vec::new(); // (idx, c, t_before)
    for ty in 0..tiles.tiles_y {
        for tx in 0..tiles.tiles_x {
            let list = &tiles.lists[ty * tiles.tiles_x + tx];
            for i in ty * TILE..((ty + 1) * TILE).min(h) {
                for j in tx * TILE..((tx + 1) * TILE).min(w) {
                    let (px, py) = (pixel_center(j), pixel_center(i));
                    contribs.clear();
                    let mut transmittance = 1.0;
                    for &idx in list {
                        let p = &projs[idx as usize];
                        let Some(c) = contribution(p, px, py) else { continue };
                        contribs.push((idx as usize, c, transmittance));
                        transmittance *= 1.0 - c;
                        if transmittance < TRANSMITTANCE_STOP {
                            break;
                        }
                    }
                    if contribs.is_empty() {
                        continue;
                    }
                    let t_fin = transmittance;
                    let g_alpha = gd[FEATURE_CHANNELS * h * w + i * w + j];
                    let pix_grad = |ch: usize| gd[ch * h * w + i * w + j];

                    // suffix sum over channels of w_j * f_j for j > i
                    let mut suffix = [0.0f64; FEATURE_CHANNELS];
                    for &(idx, c, t_before) in contribs.iter().rev() {
                        let weight = c * t_before;
                        let mut dot = 0.0;
                        let mut g_suffix_dot = 0.0;
                        for ch in 0..FEATURE_CHANNELS {
                            let gch = pix_grad(ch);
                            let f = feats[idx * FEATURE_CHANNELS + ch];
                            dot += gch * f;
                            g_suffix_dot += gch * suffix[ch];
                            g_feat.data_mut()[idx * FEATURE_CHANNELS + ch] += gch * weight;
                        }
                        let one_minus = 1.0 - c;
                        let dl_dc = t_before * dot - g_suffix_dot / one_minus
                            + g_alpha * t_fin / one_minus;

                        let p = &projs[idx];
                        // c = opacity * g
                        let gdens = (-0.5
                            * quad_form(&p.conic, px - p.mean.x, py - p.mean.y))
                        .exp();
                        let dl_dopacity = dl_dc * gdens;
                        g_opacity_logit[idx] +=
                            dl_dopacity * p.opacity * (1.0 - p.opacity);
                        let dl_dg = dl_dc * p.opacity;
                        let dl_dq = -0.5 * gdens * dl_dg;
                        let dx = px - p.mean.x;
                        let dy = py - p.mean.y;
                        let (a, b, cc) = (p.conic[0], p.conic[1], p.conic[2]);
                        g_mean[idx][0] += dl_dq * (-(2.0 * a * dx + 2.0 * b * dy));
                        g_mean[idx][1] += dl_dq * (-(2.0 * b * dx + 2.0 * cc * dy));
                        g_cov_full[idx][0] += dl_dq * dx * dx;
                        g_cov_full[idx][1] += dl_dq * dx * dy;
                        g_cov_full[idx][2] += dl_dq * dx * dy;
                        g_cov_full[idx][3] += dl_dq * dy * dy;

                        for ch in 0..FEATURE_CHANNELS {
                            suffix[ch] += weight * feats[idx * FEATURE_CHANNELS + ch];
                        }
                    }
                }
            }
        }
    }

    // chain screen-space gradients through the projection per gaussian
    let mut g_pos = Tensor::zeros(&[n, 3]);
    let mut g_rot = Tensor::zeros(&[n, 4]);
    let mut g_logs = Tensor::zeros(&[n, 3]);
    let wmat = camera.rotation();
    for idx in 0..n {
        let p = &projs[idx];
        if !p.visible {
            continue;
        }
        let (fx, fy) = (camera.fx, camera.fy);
        let (x, y, z) = (p.t.x, p.t.y, p.t.z);

        // inverse-covariance gradient -> covariance gradient: -A G A
        let a_inv = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
        let g_a = Matrix2::new(
            g_cov_full[idx][0],
            g_cov_full[idx][1],
            g_cov_full[idx][2],
            g_cov_full[idx][3],
        );
        let g_c2 = -(a_inv * g_a * a_inv);

        let j = ewa_jacobian(camera, &p.t);
        let g_v = j.transpose() * g_c2 * j;
        let g_j = 2.0 * g_c2 * j * p.vmat;
        let g_sigma = wmat.transpose() * g_v * wmat;

        let mut g_t = Vector3::zeros();
        g_t.x += g_j[(0, 2)] * (-fx / (z * z));
        g_t.y += g_j[(1, 2)] * (-fy / (z * z));
        g_t.z += g_j[(0, 0)] * (-fx / (z * z))
            + g_j[(0, 2)] * (2.0 * fx * x / (z * z * z))
            + g_j[(1, 1)] * (-fy / (z * z))
            + g_j[(1, 2)] * (2.0 * fy * y / (z * z * z));

        let (gu, gv) = (g_mean[idx][0], g_mean[idx][1]);
        g_t.x += gu * fx / z;
        g_t.z += gu * (-fx * x / (z * z));
        g_t.y += gv * fy / z;
        g_t.z += gv * (-fy * y / (z * z));

        let g_mu = wmat.transpose() * g_t;
        for k in 0..3 {
            g_pos.data_mut()[idx * 3 + k] = g_mu[k];
        }

        // sigma = M M^T with M = R diag(s)
        let m = p.rmat * Matrix3::from_diagonal(&Vector3::new(p.s[0], p.s[1], p.s[2]));
        let g_m = (g_sigma + g_sigma.transpose()) * m;
        let mut g_r = Matrix3::zeros();
        for r in 0..3 {
            for k in 0..3 {
                g_r[(r, k)] = g_m[(r, k)] * p.s[k];
            }
        }
        for k in 0..3 {
            let mut gs = 0.0;
            for r in 0..3 {
                gs += p.rmat[(r, k)] * g_m[(r, k)];
            }
            g_logs.data_mut()[idx * 3 + k] = gs * p.s[k];
        }

        // rotation matrix -> unit quaternion -> raw quaternion
        let [qw, qx, qy, qz] = p.qn;
        let dw = [
            [0.0, -2.0 * qz, 2.0 * qy],
            [2.0 * qz, 0.0, -2.0 * qx],
            [-2.0 * qy, 2.0 * qx, 0.0],
        ];
        let dxp = [
            [0.0, 2.0 * qy, 2.0 * qz],
            [2.0 * qy, -4.0 * qx, -2.0 * qw],
            [2.0 * qz, 2.0 * qw, -4.0 * qx],
        ];
        let dyp = [
            [-4.0 * qy, 2.0 * qx, 2.0 * qw],
            [2.0 * qx, 0.0, 2.0 * qz],
            [-2.0 * qw, 2.0 * qz, -4.0 * qy],
        ];
        let dzp = [
            [-4.0 * qz, -2.0 * qw, 2.0 * qx],
            [2.0 * qw, -4.0 * qz, 2.0 * qy],
            [2.0 * qx, 2.0 * qy, 0.0],
        ];
        let mut g_qn = [0.0f64; 4];
        for (ci, dmat) in [dw, dxp, dyp, dzp].iter().enumerate() {
            let mut acc = 0.0;
            for r in 0..3 {
                for k in 0..3 {
                    acc += g_r[(r, k)] * dmat[r][k];
                }
            }
            g_qn[ci] = acc;
        }
        // through normalization q / |q|
        let dot = g_qn[0] * qw + g_qn[1] * qx + g_qn[2] * qy + g_qn[3] * qz;
        let qn_arr = [qw, qx, qy, qz];
        for k in 0..4 {
            g_rot.data_mut()[idx * 4 + k] = (g_qn[k] - qn_arr[k] * dot) / p.qnorm;
        }
    }

    (
        g_pos,
        g_rot,
        g_logs,
        Tensor::new(vec![n], g_opacity_logit),
        g_feat,
    )
}

fn quad_form(conic: &[f64; 3], dx: f64, dy: f64) -> f64 {
    conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
}

/// Dump named tensors as a raw little-endian f32 container.
pub fn dump_raw(path: &std::path::Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let entries: Vec<(String, &Tensor, stylesplat_grad::DType)> = tensors
        .iter()
        .map(|(n, t)| (n.to_string(), *t, stylesplat_grad::DType::F32))
        .collect();
    stylesplat_grad::write_container(path, "{}", &entries)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use stylesplat_grad::gradcheck::finite_diff_check;
    use stylesplat_grad::ModelGraph;
    use stylesplat_grad::ParamStore;

    fn test_camera(res: usize, f: f64, dist: f64) -> Camera {
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        m[(1, 1)] = -1.0;
        m[(2, 3)] = dist;
        Camera {
            fx: f,
            fy: f,
            cx: res as f64 / 2.0,
            cy: res as f64 / 2.0,
            width: res,
            height: res,
            world_to_camera: m,
        }
    }

    /// n gaussians with large footprints covering the whole image, so the
    /// inclusion thresholds never introduce discontinuities.
    fn smooth_cloud(n: usize, seed: u64, opacity_max: f64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Tensor::zeros(&[n, 3]);
        for i in 0..n {
            positions.data_mut()[i * 3] = rng.gen::<f64>() * 0.6 - 0.3;
            positions.data_mut()[i * 3 + 1] = rng.gen::<f64>() * 0.6 - 0.3;
            positions.data_mut()[i * 3 + 2] = rng.gen::<f64>() * 1.2 - 0.6;
        }
        let mut rotations = Tensor::zeros(&[n, 4]);
        for i in 0..n {
            let q = quat_normalize([
                rng.gen::<f64>() + 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ]);
            rotations.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(&q);
        }
        let log_scales = Tensor::from_fn(&[n, 3], |_| (0.35 + rng.gen::<f64>() * 0.3f64).ln());
        let opacity_logits =
            Tensor::from_fn(&[n], |_| logit(0.2 + rng.gen::<f64>() * (opacity_max - 0.2)));
        let features = Tensor::from_fn(&[n, FEATURE_CHANNELS], |_| rng.gen::<f64>());
        GaussianCloud { positions, rotations, log_scales, opacity_logits, features }
    }

    fn cloud_store(cloud: &GaussianCloud) -> ParamStore {
        let mut store = ParamStore::new();
        cloud.write_params(&mut store);
        store
    }

    #[test]
    fn project_axis_point_hits_principal_point() {
        let cam = test_camera(64, 80.0, 3.0);
        let (mean, _, depth) =
            project_gaussian(&cam, Vector3::zeros(), &Matrix3::identity()).unwrap();
        assert!((mean.x - 32.0).abs() < 1e-12);
        assert!((mean.y - 32.0).abs() < 1e-12);
        assert!((depth - 3.0).abs() < 1e-12);
    }

    #[test]
    fn project_isotropic_closed_form() {
        let cam = test_camera(64, 80.0, 2.5);
        let sigma = 0.07f64;
        let cov3d = Matrix3::identity() * sigma * sigma;
        let (_, cov2d, depth) = project_gaussian(&cam, Vector3::zeros(), &cov3d).unwrap();
        let expected = (cam.fx * sigma / depth).powi(2) + COV2D_REGULARIZATION;
        assert!((cov2d[(0, 0)] - expected).abs() < 1e-6, "{} vs {}", cov2d[(0, 0)], expected);
        assert!((cov2d[(1, 1)] - expected).abs() < 1e-6);
        assert!(cov2d[(0, 1)].abs() < 1e-9);
    }

    #[test]
    fn project_behind_camera_is_error() {
        let cam = test_camera(64, 80.0, 3.0);
        // depth <= near plane
        let p = Vector3::new(0.0, 0.0, -2.995);
        assert!(matches!(
            project_gaussian(&cam, p, &Matrix3::identity()),
            Err(Error::BehindCamera)
        ));
    }

    #[test]
    fn single_center_splat_value() {
        let cam = test_camera(8, 60.0, 3.0);
        let mut cloud = smooth_cloud(1, 1, 0.5);
        cloud.positions.data_mut().copy_from_slice(&[0.0, 0.0, 0.0]);
        cloud.rotations.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        cloud.log_scales.data_mut().copy_from_slice(&[2.0f64.ln(); 3]);
        cloud.opacity_logits.data_mut()[0] = logit(0.999);
        let img = rasterize_cloud(&cloud, &cam);
        // pixel nearest the projected center
        for ch in 0..4 {
            let f = cloud.features.data()[ch];
            let got = img.feature(ch, 4, 4);
            assert!(
                (got - f * 0.999).abs() < 1e-3,
                "channel {ch}: {got} vs {}",
                f * 0.999
            );
        }
        assert!((img.alpha(4, 4) - 0.999).abs() < 1e-3);
    }

    #[test]
    fn two_gaussian_pixel_matches_hand_formula() {
        let cam = test_camera(8, 60.0, 3.0);
        let mut cloud = smooth_cloud(2, 5, 0.8);
        cloud.positions.data_mut().copy_from_slice(&[0.02, -0.01, -0.5, -0.03, 0.02, 0.5]);
        let img = rasterize_cloud(&cloud, &cam);
        let (i, j) = (4usize, 3usize);
        let (px, py) = (pixel_center(j), pixel_center(i));
        // independent two-term compositing from the public projection op
        let mut terms = Vec::new();
        for gi in 0..2 {
            let (mean, cov, depth) =
                project_gaussian(&cam, cloud.position(gi), &cloud.covariance(gi)).unwrap();
            let inv = cov.try_inverse().unwrap();
            let d = Vector2::new(px - mean.x, py - mean.y);
            let q = (d.transpose() * inv * d)[(0, 0)];
            let dens = (-0.5 * q).exp();
            terms.push((depth, cloud.opacity(gi) * dens, gi));
        }
        terms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (c1, g1) = (terms[0].1, terms[0].2);
        let (c2, g2) = (terms[1].1, terms[1].2);
        for ch in 0..FEATURE_CHANNELS {
            let f1 = cloud.features.data()[g1 * FEATURE_CHANNELS + ch];
            let f2 = cloud.features.data()[g2 * FEATURE_CHANNELS + ch];
            let expected = f1 * c1 + f2 * c2 * (1.0 - c1);
            assert!(
                (img.feature(ch, i, j) - expected).abs() < 1e-8,
                "ch {ch}: {} vs {expected}",
                img.feature(ch, i, j)
            );
        }
    }

    #[test]
    fn behind_camera_cloud_renders_empty() {
        let cam = test_camera(8, 60.0, 3.0);
        let mut cloud = smooth_cloud(3, 8, 0.9);
        for i in 0..3 {
            cloud.positions.data_mut()[i * 3 + 2] = -10.0; // behind the near plane
        }
        let img = rasterize_cloud(&cloud, &cam);
        assert!(img.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiled_matches_reference_bitwise() {
        let cam = test_camera(40, 55.0, 3.0);
        let cloud = smooth_cloud(24, 11, 0.95);
        let tiled = rasterize_cloud(&cloud, &cam);
        let reference = rasterize_reference(
            &cloud.positions,
            &cloud.rotations,
            &cloud.log_scales,
            &cloud.opacity_logits,
            &cloud.features,
            &cam,
        );
        assert_eq!(tiled.data, reference.data, "tiled and naive renders must be bit-identical");
    }

    #[test]
    fn compositing_weights_bounded() {
        let cam = test_camera(16, 60.0, 3.0);
        for seed in 0..5 {
            let cloud = smooth_cloud(6, 100 + seed, 0.97);
            for i in 0..16 {
                for j in 0..16 {
                    let ws = compositing_weights(&cloud, &cam, i, j);
                    let mut sum = 0.0;
                    for (_, w) in ws {
                        assert!(w >= 0.0);
                        sum += w;
                    }
                    assert!(sum <= 1.0 + 1e-6, "pixel ({i},{j}) weight sum {sum}");
                }
            }
        }
    }

    #[test]
    fn feature_gradient_is_weight() {
        // d(pixel feature)/d f_i == alpha_i g_i T_i exactly
        let cam = test_camera(8, 60.0, 3.0);
        let cloud = smooth_cloud(2, 21, 0.8);
        let store = cloud_store(&cloud);
        let mut mg = ModelGraph::new(&store, |n| n == "cloud.features");
        let nodes = CloudNodes::bind(&mut mg);
        let render = rasterize_node(&mut mg.g, &nodes, &cam);
        let (i, j) = (4usize, 4usize);
        let ch = 7usize;
        let pix = mg.g.slice_axis0(render, ch, 1);
        let pix_t = mg.g.value(pix).clone();
        let mut mask = Tensor::zeros(pix_t.shape());
        mask.data_mut()[i * 8 + j] = 1.0;
        let mask = mg.g.constant(mask);
        let prod = mg.g.mul(pix, mask);
        let scalar = mg.g.sum_all(prod);
        let grads = mg.g.backward(scalar);
        let gf = grads.get(nodes.features).unwrap();
        let weights = compositing_weights(&cloud, &cam, i, j);
        for gi in 0..2 {
            let expected = weights
                .iter()
                .find(|(idx, _)| *idx == gi)
                .map(|(_, w)| *w)
                .unwrap_or(0.0);
            let got = gf.data()[gi * FEATURE_CHANNELS + ch];
            assert!((got - expected).abs() < 1e-8, "gaussian {gi}: {got} vs {expected}");
        }
    }

    #[test]
    fn zero_opacity_gets_zero_feature_gradient() {
        let cam = test_camera(8, 60.0, 3.0);
        let mut cloud = smooth_cloud(3, 33, 0.8);
        cloud.opacity_logits.data_mut()[1] = -100.0; // effectively transparent
        let store = cloud_store(&cloud);
        let mut mg = ModelGraph::new(&store, |n| n == "cloud.features");
        let nodes = CloudNodes::bind(&mut mg);
        let render = rasterize_node(&mut mg.g, &nodes, &cam);
        let s = mg.g.sum_all(render);
        let grads = mg.g.backward(s);
        let gf = grads.get(nodes.features).unwrap();
        for ch in 0..FEATURE_CHANNELS {
            assert_eq!(gf.data()[FEATURE_CHANNELS + ch], 0.0);
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let cam = test_camera(8, 60.0, 3.0);
        let cloud = smooth_cloud(4, 55, 0.8);
        let inputs = [
            cloud.positions.clone(),
            cloud.rotations.clone(),
            cloud.log_scales.clone(),
            cloud.opacity_logits.clone(),
            cloud.features.clone(),
        ];
        // weighted sum of all channels so every input influences the scalar
        let weight =
            Tensor::from_fn(&[FEATURE_CHANNELS + 1, 8, 8], |k| ((k * 37 % 11) as f64 - 5.0) * 0.13);
        let err = finite_diff_check(
            &|g, ids| {
                let nodes = CloudNodes {
                    positions: ids[0],
                    rotations: ids[1],
                    log_scales: ids[2],
                    opacity_logits: ids[3],
                    features: ids[4],
                };
                let render = rasterize_node(g, &nodes, &cam);
                let wn = g.constant(weight.clone());
                let p = g.mul(render, wn);
                g.sum_all(p)
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-3, "rasterizer gradient err {err}");
    }

    #[test]
    fn render_invariant_under_joint_rigid_transform() {
        let cam = test_camera(24, 60.0, 3.0);
        let cloud = smooth_cloud(8, 77, 0.9);
        let base = rasterize_cloud(&cloud, &cam);

        // rotate + translate both the cloud and the camera
        let q = quat_normalize([0.8, 0.3, -0.2, 0.4]);
        let r = quat_to_matrix(q);
        let t = Vector3::new(0.4, -0.2, 0.6);
        let mut moved = cloud.clone();
        for i in 0..cloud.len() {
            let p = cloud.position(i);
            let p2 = r * p + t;
            moved.positions.data_mut()[i * 3..(i + 1) * 3].copy_from_slice(&[p2.x, p2.y, p2.z]);
            let qi = cloud.rotation(i);
            let composed = crate::math::quat_mul(q, qi);
            moved.rotations.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(&composed);
        }
        // new world_to_camera = old ∘ inverse(rigid)
        let mut rigid = Matrix4::identity();
        rigid.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rigid.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let cam2 = Camera {
            world_to_camera: cam.world_to_camera * rigid.try_inverse().unwrap(),
            ..cam.clone()
        };
        cam2.validate().unwrap();
        let moved_img = rasterize_cloud(&moved, &cam2);
        let max_diff = base
            .data
            .data()
            .iter()
            .zip(moved_img.data.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max_diff < 1e-5, "rigid invariance violated: {max_diff}");
    }

    #[test]
    fn depth_ties_break_by_index() {
        let cam = test_camera(8, 60.0, 3.0);
        let mut cloud = smooth_cloud(2, 3, 0.8);
        // identical positions: compositing order must be index order
        let pos = [0.0, 0.0, 0.0];
        cloud.positions.data_mut()[0..3].copy_from_slice(&pos);
        cloud.positions.data_mut()[3..6].copy_from_slice(&pos);
        cloud.rotations.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let ws = compositing_weights(&cloud, &cam, 4, 4);
        assert_eq!(ws[0].0, 0);
        assert_eq!(ws[1].0, 1);
        assert!(ws[0].1 > ws[1].1, "front gaussian must keep more weight");
    }
}
