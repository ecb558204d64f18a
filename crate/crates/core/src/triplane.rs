//! Temporal-aware triplane: a latent-conditioned convolutional generator
//! produces three axis-aligned feature planes; per-Gaussian features are
//! bilinear lookups of the projected position, concatenated XY‖XZ‖YZ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stylesplat_grad::{Graph, ModelGraph, NodeId, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;

/// Axis-aligned scene bounds used to normalize positions into [0,1]^3.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.min[k] < self.max[k]) {
                return Err(Error::InvalidConfig(format!(
                    "bounds min {:?} not strictly below max {:?}",
                    self.min, self.max
                )));
            }
        }
        Ok(())
    }

    /// Bounding box of the canonical cloud dilated by 10% per side.
    pub fn from_cloud(cloud: &GaussianCloud) -> Self {
        let (mut min, mut max) = cloud.bounding_box();
        for k in 0..3 {
            let extent = (max[k] - min[k]).max(1e-3);
            min[k] -= 0.1 * extent;
            max[k] += 0.1 * extent;
        }
        Self { min, max }
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }
}

/// Project a world position onto the three planes as clamped [0,1]^2
/// coordinates, ordered XY, XZ, YZ.
pub fn project_point(p: [f64; 3], bounds: &Bounds) -> [[f64; 2]; 3] {
    let e = bounds.extent();
    let n: Vec<f64> =
        (0..3).map(|k| ((p[k] - bounds.min[k]) / e[k]).clamp(0.0, 1.0)).collect();
    [[n[0], n[1]], [n[0], n[2]], [n[1], n[2]]]
}

/// Graph version of [`project_point`] for (m,3) positions; clamped
/// coordinates receive zero gradient in the clamped component.
pub fn project_node(g: &mut Graph, positions: NodeId, bounds: &Bounds) -> [NodeId; 3] {
    let e = bounds.extent();
    let neg_min = g.constant(Tensor::new(vec![3], bounds.min.iter().map(|v| -v).collect()));
    let inv = Tensor::new(
        vec![3, 3],
        vec![1.0 / e[0], 0.0, 0.0, 0.0, 1.0 / e[1], 0.0, 0.0, 0.0, 1.0 / e[2]],
    );
    let inv = g.constant(inv);
    let shifted = g.add_bias_rows(positions, neg_min);
    let scaled = g.matmul(shifted, inv);
    let n = g.clamp01(scaled);
    let x = g.slice_cols(n, 0, 1);
    let z = g.slice_cols(n, 2, 1);
    let xy = g.slice_cols(n, 0, 2);
    let xz = g.concat_cols(&[x, z]);
    let yz = g.slice_cols(n, 1, 2);
    [xy, xz, yz]
}

/// Bilinear plane lookups concatenated across the three planes.
pub fn query(g: &mut Graph, planes: [NodeId; 3], coords: [NodeId; 3]) -> NodeId {
    let fxy = g.grid_sample(planes[0], coords[0]);
    let fxz = g.grid_sample(planes[1], coords[1]);
    let fyz = g.grid_sample(planes[2], coords[2]);
    g.concat_cols(&[fxy, fxz, fyz])
}

/// Concrete (non-graph) triplane snapshot.
#[derive(Clone, Debug)]
pub struct TriplaneSet {
    /// Three (plane_channels, r, r) tensors ordered XY, XZ, YZ.
    pub planes: [Tensor; 3],
    pub bounds: Bounds,
}

impl TriplaneSet {
    pub fn resolution(&self) -> usize {
        self.planes[0].shape()[1]
    }

    pub fn plane_channels(&self) -> usize {
        self.planes[0].shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let r = self.resolution();
        let c = self.plane_channels();
        if r < 2 || c < 1 {
            return Err(Error::InvalidConfig(format!("triplane {c} channels at {r}x{r}")));
        }
        for p in &self.planes {
            if p.shape() != [c, r, r] {
                return Err(Error::ShapeMismatch {
                    context: "triplane planes".into(),
                    lhs: p.shape().to_vec(),
                    rhs: vec![c, r, r],
                });
            }
        }
        Ok(())
    }
}

/// Learned per-frame latents plus their running mean (used for frames
/// outside the training set).
#[derive(Clone, Debug)]
pub struct TemporalLatents;

impl TemporalLatents {
    pub const PARAM: &'static str = "latents.table";

    pub fn init_params(store: &mut ParamStore, frames: usize, dim: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&[frames, dim], |_| normal(&mut rng) * 0.01);
        store.insert(Self::PARAM, t);
    }

    /// Latent node for a training frame, or the table mean for frames
    /// beyond the table (unseen at training time).
    pub fn latent_node(mg: &mut ModelGraph, frame: Option<usize>) -> NodeId {
        let table = mg.param(Self::PARAM);
        let rows = mg.g.value(table).shape()[0];
        let dim = mg.g.value(table).shape()[1];
        match frame {
            Some(f) if f < rows => {
                let row = mg.g.slice_axis0(table, f, 1);
                mg.g.reshape(row, &[dim])
            }
            _ => {
                let ones = mg.g.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
                let avg = mg.g.matmul(ones, table);
                mg.g.reshape(avg, &[dim])
            }
        }
    }

    pub fn mean_latent(store: &ParamStore) -> Tensor {
        let t = store.get(Self::PARAM);
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; dim];
        for r in 0..rows {
            for d in 0..dim {
                out[d] += t.data()[r * dim + d];
            }
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        Tensor::new(vec![dim], out)
    }
}

/// Configuration of the plane generator.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TriplaneConfig {
    /// Plane resolution; must be 4 * 2^k.
    pub resolution: usize,
    /// Channels per plane.
    pub plane_channels: usize,
    /// Temporal latent dimension.
    pub latent_dim: usize,
    /// Channel widths from the 4x4 constant up to full resolution
    /// (len = log2(resolution/4) + 1).
    pub widths: Vec<usize>,
    /// Hidden width of the latent-to-modulation MLP.
    pub mlp_hidden: usize,
}

impl Default for TriplaneConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            plane_channels: 32,
            latent_dim: 32,
            widths: vec![128, 96, 64, 48, 32, 32],
            mlp_hidden: 64,
        }
    }
}

impl TriplaneConfig {
    pub fn levels(&self) -> usize {
        (self.resolution / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || (self.resolution / 4).count_ones() != 1 || self.resolution % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "triplane resolution {} must be 4*2^k",
                self.resolution
            )));
        }
        if self.widths.len() != self.levels() + 1 {
            return Err(Error::InvalidConfig(format!(
                "triplane widths {:?} must have {} entries for resolution {}",
                self.widths,
                self.levels() + 1,
                self.resolution
            )));
        }
        if self.plane_channels < 1 || self.latent_dim < 1 {
            return Err(Error::InvalidConfig("triplane channel/latent dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Latent-modulated convolutional upsampling chain producing the three
/// feature planes as one (3*plane_channels, r, r) stack.
#[derive(Clone, Debug)]
pub struct PlaneGenerator {
    pub cfg: TriplaneConfig,
}

impl PlaneGenerator {
    pub fn new(cfg: TriplaneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.cfg;
        store.insert(
            "triplane.const",
            Tensor::from_fn(&[c.widths[0], 4, 4], |_| normal(&mut rng) * 0.5),
        );
        store.insert(
            "triplane.map.w1",
            he_init(&mut rng, &[c.latent_dim, c.mlp_hidden], c.latent_dim),
        );
        store.insert("triplane.map.b1", Tensor::zeros(&[c.mlp_hidden]));
        for i in 0..c.levels() {
            let (cin, cout) = (c.widths[i], c.widths[i + 1]);
            store.insert(
                format!("triplane.up{i}.conv.weight"),
                he_init(&mut rng, &[cout, cin, 3, 3], cin * 9),
            );
            store.insert(format!("triplane.up{i}.conv.bias"), Tensor::zeros(&[cout]));
            store.insert(
                format!("triplane.up{i}.mod.weight"),
                Tensor::from_fn(&[c.mlp_hidden, cin], |_| {
                    normal(&mut rng) * (0.2 / (c.mlp_hidden as f64).sqrt())
                }),
            );
        }
        let last = *c.widths.last().unwrap();
        store.insert(
            "triplane.out.weight",
            he_init(&mut rng, &[3 * c.plane_channels, last, 1, 1], last),
        );
        store.insert("triplane.out.bias", Tensor::zeros(&[3 * c.plane_channels]));
    }

    /// Build the generator forward pass; returns the three plane nodes.
    /// Errors if the latent holds non-finite values.
    pub fn generate(&self, mg: &mut ModelGraph, z: NodeId) -> Result<[NodeId; 3]> {
        if !mg.g.value(z).is_finite() {
            return Err(Error::NonFiniteLatent);
        }
        let c = self.cfg.clone();
        assert_eq!(mg.g.value(z).shape(), &[c.latent_dim], "latent dim");

        let w1 = mg.param("triplane.map.w1");
        let b1 = mg.param("triplane.map.b1");
        let z_row = mg.g.reshape(z, &[1, c.latent_dim]);
        let h = mg.g.matmul(z_row, w1);
        let h = mg.g.add_bias_rows(h, b1);
        let h = mg.g.leaky_relu(h, 0.2);

        let mut x = mg.param("triplane.const");
        for i in 0..c.levels() {
            let cin = c.widths[i];
            x = mg.g.upsample2x(x);
            let wm = mg.param(&format!("triplane.up{i}.mod.weight"));
            let style = mg.g.matmul(h, wm);
            let style = mg.g.add_scalar(style, 1.0);
            let style = mg.g.reshape(style, &[cin]);
            x = mg.g.mul_channels(x, style);
            let w = mg.param(&format!("triplane.up{i}.conv.weight"));
            let b = mg.param(&format!("triplane.up{i}.conv.bias"));
            x = mg.g.conv2d(x, w, 1, 1);
            x = mg.g.add_bias_chw(x, b);
            x = mg.g.leaky_relu(x, 0.2);
        }
        let w = mg.param("triplane.out.weight");
        let b = mg.param("triplane.out.bias");
        let x = mg.g.conv2d(x, w, 1, 0);
        let x = mg.g.add_bias_chw(x, b);

        let fp = c.plane_channels;
        Ok([
            mg.g.slice_axis0(x, 0, fp),
            mg.g.slice_axis0(x, fp, fp),
            mg.g.slice_axis0(x, 2 * fp, fp),
        ])
    }

    /// Run the generator outside any training graph.
    pub fn generate_eval(&self, store: &ParamStore, z: &Tensor, bounds: Bounds) -> Result<TriplaneSet> {
        let mut mg = ModelGraph::frozen(store);
        let zn = mg.g.constant(z.clone());
        let planes = self.generate(&mut mg, zn)?;
        Ok(TriplaneSet {
            planes: [
                mg.g.value(planes[0]).clone(),
                mg.g.value(planes[1]).clone(),
                mg.g.value(planes[2]).clone(),
            ],
            bounds,
        })
    }
}

pub(crate) fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| normal(rng) * std)
}

/// Standard normal via Box-Muller, driven by the deterministic stream.
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use stylesplat_grad::gradcheck::finite_diff_check;

    fn small_cfg() -> TriplaneConfig {
        TriplaneConfig {
            resolution: 16,
            plane_channels: 4,
            latent_dim: 6,
            widths: vec![12, 10, 8],
            mlp_hidden: 8,
        }
    }

    fn bounds01() -> Bounds {
        Bounds { min: [0.0; 3], max: [1.0; 3] }
    }

    #[test]
    fn generation_is_deterministic() {
        let gen = PlaneGenerator::new(small_cfg()).unwrap();
        let mut store = ParamStore::new();
        gen.init_params(&mut store, 3);
        let z = Tensor::from_fn(&[6], |i| (i as f64 * 0.3).sin());
        let a = gen.generate_eval(&store, &z, bounds01()).unwrap();
        let b = gen.generate_eval(&store, &z, bounds01()).unwrap();
        for k in 0..3 {
            assert_eq!(a.planes[k], b.planes[k]);
        }
    }

    #[test]
    fn distinct_latents_yield_distinct_planes() {
        let gen = PlaneGenerator::new(small_cfg()).unwrap();
        let mut store = ParamStore::new();
        gen.init_params(&mut store, 3);
        let z0 = Tensor::zeros(&[6]);
        let z1 = Tensor::full(&[6], 0.7);
        let a = gen.generate_eval(&store, &z0, bounds01()).unwrap();
        let b = gen.generate_eval(&store, &z1, bounds01()).unwrap();
        let diff: f64 = a.planes[0]
            .data()
            .iter()
            .zip(b.planes[0].data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-9, "generator is degenerate in the latent");
    }

    #[test]
    fn non_finite_latent_is_rejected() {
        let gen = PlaneGenerator::new(small_cfg()).unwrap();
        let mut store = ParamStore::new();
        gen.init_params(&mut store, 3);
        let z = Tensor::new(vec![6], vec![0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0]);
        match gen.generate_eval(&store, &z, bounds01()) {
            Err(Error::NonFiniteLatent) => {}
            other => panic!("expected NonFiniteLatent, got {other:?}"),
        }
    }

    #[test]
    fn plane_sum_gradient_wrt_latent_matches_fd() {
        let gen = PlaneGenerator::new(small_cfg()).unwrap();
        let mut store = ParamStore::new();
        gen.init_params(&mut store, 5);
        let z = Tensor::from_fn(&[6], |i| 0.2 * (i as f64 + 1.0).sin());
        let err = finite_diff_check(
            &|g, ids| {
                let mut mg = ModelGraph::frozen(&store);
                mg.swap_graph(g);
                let planes = gen.generate(&mut mg, ids[0]).unwrap();
                mg.swap_graph(g);
                let s0 = g.sum_all(planes[0]);
                let s1 = g.sum_all(planes[1]);
                let s2 = g.sum_all(planes[2]);
                let s = g.add(s0, s1);
                g.add(s, s2)
            },
            &[z],
            1e-5,
        );
        assert!(err < 1e-4, "latent gradient err {err}");
    }

    #[test]
    fn project_corners_center_clamp() {
        let b = Bounds { min: [-1.0, -2.0, 0.0], max: [1.0, 2.0, 4.0] };
        let at_min = project_point([-1.0, -2.0, 0.0], &b);
        for plane in at_min {
            assert_eq!(plane, [0.0, 0.0]);
        }
        let center = project_point([0.0, 0.0, 2.0], &b);
        for plane in center {
            assert_eq!(plane, [0.5, 0.5]);
        }
        let outside = project_point([5.0, 0.0, 2.0], &b);
        assert_eq!(outside[0][0], 1.0);
        assert_eq!(outside[1][0], 1.0);
    }

    fn test_planes(g: &mut Graph, fp: usize, r: usize) -> [NodeId; 3] {
        let mk = |seed: usize| {
            Tensor::from_fn(&[fp, r, r], |i| ((i * 31 + seed * 17) % 23) as f64 * 0.1 - 1.0)
        };
        [
            g.constant(mk(1)),
            g.constant(mk(2)),
            g.constant(mk(3)),
        ]
    }

    #[test]
    fn query_at_grid_node_is_exact() {
        let mut g = Graph::new();
        let r = 9;
        let fp = 3;
        let planes = test_planes(&mut g, fp, r);
        // position lands exactly on node (2,5) of each plane
        let (i, j) = (2.0 / (r - 1) as f64, 5.0 / (r - 1) as f64);
        let coords = g.constant(Tensor::new(vec![1, 2], vec![i, j]));
        let out = query(&mut g, planes, [coords, coords, coords]);
        let v = g.value(out);
        for (pi, plane) in planes.iter().enumerate() {
            let pv = g.value(*plane);
            for c in 0..fp {
                let expected = pv.data()[c * r * r + 2 * r + 5];
                assert!((v.data()[pi * fp + c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_at_cell_center_is_corner_mean() {
        let mut g = Graph::new();
        let r = 5;
        let fp = 2;
        let planes = test_planes(&mut g, fp, r);
        let (i, j) = (1.5 / (r - 1) as f64, 2.5 / (r - 1) as f64);
        let coords = g.constant(Tensor::new(vec![1, 2], vec![i, j]));
        let out = query(&mut g, planes, [coords, coords, coords]);
        let v = g.value(out);
        let pv = g.value(planes[0]);
        for c in 0..fp {
            let m = (pv.data()[c * 25 + 1 * 5 + 2]
                + pv.data()[c * 25 + 1 * 5 + 3]
                + pv.data()[c * 25 + 2 * 5 + 2]
                + pv.data()[c * 25 + 2 * 5 + 3])
                / 4.0;
            assert!((v.data()[c] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn query_matches_scalar_bilinear_oracle() {
        // independent straight-line bilinear formula
        let r = 7;
        let fp = 2;
        let mut g = Graph::new();
        let planes = test_planes(&mut g, fp, r);
        let pts = [[0.13, 0.77], [0.5, 0.31], [0.98, 0.02], [0.66, 0.66]];
        let coords_t = Tensor::new(vec![4, 2], pts.iter().flatten().cloned().collect());
        let coords = g.constant(coords_t.clone());
        let out = query(&mut g, planes, [coords, coords, coords]);
        let v = g.value(out);
        for (q, pt) in pts.iter().enumerate() {
            for (pi, plane) in planes.iter().enumerate() {
                let pv = g.value(*plane);
                let y = pt[0] * (r - 1) as f64;
                let x = pt[1] * (r - 1) as f64;
                let (i0, j0) = (y.floor() as usize, x.floor() as usize);
                let (i1, j1) = ((i0 + 1).min(r - 1), (j0 + 1).min(r - 1));
                let (u, w) = (y - i0 as f64, x - j0 as f64);
                for c in 0..fp {
                    let at = |ii: usize, jj: usize| pv.data()[c * r * r + ii * r + jj];
                    let expected = at(i0, j0) * (1.0 - u) * (1.0 - w)
                        + at(i1, j0) * u * (1.0 - w)
                        + at(i0, j1) * (1.0 - u) * w
                        + at(i1, j1) * u * w;
                    let got = v.data()[q * 3 * fp + pi * fp + c];
                    assert!((got - expected).abs() < 1e-10, "q={q} plane={pi} c={c}");
                }
            }
        }
    }

    #[test]
    fn query_is_linear_in_planes() {
        let r = 6;
        let fp = 2;
        let coords_t = Tensor::new(vec![3, 2], vec![0.2, 0.9, 0.55, 0.1, 0.4, 0.4]);
        let p1 = Tensor::from_fn(&[fp, r, r], |i| (i as f64 * 0.17).sin());
        let p2 = Tensor::from_fn(&[fp, r, r], |i| (i as f64 * 0.07).cos());
        let (a, b) = (0.7, -1.3);
        let sample = |p: &Tensor| {
            let mut g = Graph::new();
            let pn = g.constant(p.clone());
            let cn = g.constant(coords_t.clone());
            let out = query(&mut g, [pn, pn, pn], [cn, cn, cn]);
            g.value(out).clone()
        };
        let combo = p1.zip_map(&p2, |x, y| a * x + b * y);
        let lhs = sample(&combo);
        let s1 = sample(&p1);
        let s2 = sample(&p2);
        for k in 0..lhs.numel() {
            let rhs = a * s1.data()[k] + b * s2.data()[k];
            assert!((lhs.data()[k] - rhs).abs() < 1e-8);
        }
    }

    #[test]
    fn position_gradient_matches_fd_and_clamps_to_zero() {
        let b = Bounds { min: [0.0; 3], max: [2.0; 3] };
        let r = 8;
        let fp = 2;
        let plane_t = Tensor::from_fn(&[fp, r, r], |i| ((i * 13) % 17) as f64 * 0.1);
        // interior positions away from cell boundaries
        let pos = Tensor::new(vec![2, 3], vec![0.53, 1.21, 0.77, 1.61, 0.39, 1.13]);
        let err = finite_diff_check(
            &|g, ids| {
                let planes = [
                    g.constant(plane_t.clone()),
                    g.constant(plane_t.clone()),
                    g.constant(plane_t.clone()),
                ];
                let coords = project_node(g, ids[0], &b);
                let f = query(g, planes, coords);
                let sq = g.square(f);
                g.sum_all(sq)
            },
            &[pos],
            1e-6,
        );
        assert!(err < 1e-4, "position gradient err {err}");

        // clamped coordinate -> zero gradient in that component
        let mut g = Graph::new();
        let planes = [
            g.constant(plane_t.clone()),
            g.constant(plane_t.clone()),
            g.constant(plane_t.clone()),
        ];
        let pos_out = g.leaf(Tensor::new(vec![1, 3], vec![5.0, 1.0, 1.0]));
        let coords = project_node(&mut g, pos_out, &b);
        let f = query(&mut g, planes, coords);
        let s = g.sum_all(f);
        let grads = g.backward(s);
        let gp = grads.get(pos_out).unwrap();
        assert_eq!(gp.data()[0], 0.0, "clamped x must have zero gradient");
    }
}
