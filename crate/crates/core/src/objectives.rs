//! Training losses: pixel reconstruction, landmark-region crops, perceptual
//! feature distance, and the UV-conditioned adversarial pair, plus the
//! conditional discriminator itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use stylesplat_grad::{Graph, ModelGraph, NodeId, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::triplane::{he_init, normal};

/// Weights applied when combining loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub lpips: f64,
    pub lmk: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rgb: 1.0, lpips: 0.1, lmk: 0.5, adv: 0.01 }
    }
}

/// Named scalar losses for one step; `total` is the weighted sum of the
/// enabled generator-side terms.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: usize,
    pub rgb: f64,
    pub lpips: f64,
    pub lmk: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.rgb, self.lpips, self.lmk, self.adv_g, self.adv_d, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxKind {
    Eyes,
    Mouth,
}

/// Pixel-space landmark region (x0,y0,x1,y1), end-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub kind: BoxKind,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RegionBox {
    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let ok = self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= width as f64
            && self.y1 <= height as f64
            && self.x1 > self.x0
            && self.y1 > self.y0;
        if ok {
            Ok(())
        } else {
            Err(Error::DegenerateBox)
        }
    }
}

/// Mean absolute difference between two (c,h,w) images.
pub fn loss_l1(g: &mut Graph, pred: NodeId, gt: NodeId) -> NodeId {
    assert_eq!(g.value(pred).shape(), g.value(gt).shape(), "loss_l1 shapes");
    let d = g.sub(pred, gt);
    let a = g.abs(d);
    g.mean_all(a)
}

/// Shape-checked variant returning a domain error.
pub fn loss_rgb(g: &mut Graph, pred_rgb: NodeId, gt_rgb: NodeId) -> Result<NodeId> {
    let (lp, lg) = (g.value(pred_rgb).shape().to_vec(), g.value(gt_rgb).shape().to_vec());
    if lp != lg {
        return Err(Error::ShapeMismatch { context: "loss_rgb".into(), lhs: lp, rhs: lg });
    }
    Ok(loss_l1(g, pred_rgb, gt_rgb))
}

/// Side length of the RoI-align crops.
pub const ROI_SIZE: usize = 32;

/// Bilinear RoI-align of a (c,h,w) image to a ROI_SIZE^2 crop. Sampling
/// points sit at cell centers of the box.
pub fn roi_align(g: &mut Graph, img: NodeId, b: &RegionBox) -> Result<NodeId> {
    let shape = g.value(img).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    b.validate(w, h)?;
    let n = ROI_SIZE;
    let mut coords = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        let y = b.y0 + (i as f64 + 0.5) * (b.y1 - b.y0) / n as f64;
        for j in 0..n {
            let x = b.x0 + (j as f64 + 0.5) * (b.x1 - b.x0) / n as f64;
            // pixel centers at integer coordinates; normalize to [0,1]
            coords.push((y - 0.5).clamp(0.0, (h - 1) as f64) / (h - 1) as f64);
            coords.push((x - 0.5).clamp(0.0, (w - 1) as f64) / (w - 1) as f64);
        }
    }
    let coords = g.constant(Tensor::new(vec![n * n, 2], coords));
    let flat = g.grid_sample(img, coords); // (n*n, c)
    Ok(g.reshape(flat, &[n, n, c]))
}

/// Mean absolute difference of RoI-aligned crops, averaged over boxes.
pub fn loss_landmark(
    g: &mut Graph,
    pred: NodeId,
    gt: NodeId,
    boxes: &[RegionBox],
) -> Result<NodeId> {
    assert!(!boxes.is_empty(), "loss_landmark needs at least one box");
    let mut acc: Option<NodeId> = None;
    for b in boxes {
        let cp = roi_align(g, pred, b)?;
        let cg = roi_align(g, gt, b)?;
        let l = loss_l1(g, cp, cg);
        acc = Some(match acc {
            Some(a) => g.add(a, l),
            None => l,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / boxes.len() as f64))
}

/// Pluggable deep-feature extractor for the perceptual distance. Production
/// plugs pretrained weights through the same tensor container the
/// checkpoints use; tests use a fixed-seed random stack.
pub trait FeatureExtractor {
    /// Multi-scale features of a (3,h,w) image in [0,1].
    fn features(&self, g: &mut Graph, img: NodeId) -> Vec<NodeId>;
    fn name(&self) -> &str;
}

/// Frozen conv stack: 3x3 conv + leaky relu at three scales with stride-2
/// downsampling between them.
pub struct ConvFeatureExtractor {
    weights: Vec<Tensor>,
    label: String,
}

impl ConvFeatureExtractor {
    pub const CHANNELS: [usize; 3] = [8, 16, 24];

    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut cin = 3;
        for &cout in Self::CHANNELS.iter() {
            weights.push(he_init(&mut rng, &[cout, cin, 3, 3], cin * 9));
            cin = cout;
        }
        Self { weights, label: format!("conv-seeded-{seed}") }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = stylesplat_grad::read_container(path)?;
        let mut weights = Vec::new();
        for i in 0..Self::CHANNELS.len() {
            let name = format!("extractor.conv{i}.weight");
            let t = c.tensors.get(&name).ok_or_else(|| Error::SchemaMismatch(name.clone()))?;
            weights.push(t.clone());
        }
        Ok(Self { weights, label: format!("conv-file-{}", path.display()) })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let entries: Vec<(String, &Tensor, stylesplat_grad::DType)> = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("extractor.conv{i}.weight"), t, stylesplat_grad::DType::F64))
            .collect();
        stylesplat_grad::write_container(path, "{}", &entries)?;
        Ok(())
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn features(&self, g: &mut Graph, img: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut x = img;
        for (i, w) in self.weights.iter().enumerate() {
            let wn = g.constant(w.clone());
            let stride = if i == 0 { 1 } else { 2 };
            x = g.conv2d(x, wn, stride, 1);
            x = g.leaky_relu(x, 0.2);
            out.push(x);
        }
        out
    }

    fn name(&self) -> &str {
        &self.label
    }
}

/// Perceptual distance: per-layer unit-normalized features across channels,
/// squared difference, spatial mean, averaged over layers.
pub fn loss_perceptual(
    g: &mut Graph,
    extractor: &dyn FeatureExtractor,
    a: NodeId,
    b: NodeId,
) -> NodeId {
    let fa = extractor.features(g, a);
    let fb = extractor.features(g, b);
    let mut acc: Option<NodeId> = None;
    let layers = fa.len();
    for (na, nb) in fa.into_iter().zip(fb) {
        let ua = channel_unit_normalize(g, na);
        let ub = channel_unit_normalize(g, nb);
        let d = g.sub(ua, ub);
        let sq = g.square(d);
        let l = g.mean_all(sq);
        acc = Some(match acc {
            Some(prev) => g.add(prev, l),
            None => l,
        });
    }
    g.scale(acc.expect("extractor produced no layers"), 1.0 / layers as f64)
}

fn channel_unit_normalize(g: &mut Graph, x: NodeId) -> NodeId {
    let sq = g.square(x);
    let s = g.sum_channels(sq);
    let r = g.rsqrt_eps(s, 1e-10);
    g.mul_hw(x, r)
}

/// Conditional discriminator over channel-concatenated (image, uv) pairs.
/// Strided conv stack ending in a single logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub input_res: usize,
    pub widths: Vec<usize>,
}

impl Discriminator {
    pub fn new(input_res: usize) -> Self {
        Self { input_res, widths: vec![16, 32, 48, 64] }
    }

    fn final_res(&self) -> usize {
        self.input_res >> self.widths.len()
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 6;
        for (i, &cout) in self.widths.iter().enumerate() {
            store.insert(format!("disc.conv{i}.weight"), he_init(&mut rng, &[cout, cin, 3, 3], cin * 9));
            store.insert(format!("disc.conv{i}.bias"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let flat = cin * self.final_res() * self.final_res();
        store.insert("disc.out.weight", Tensor::from_fn(&[flat, 1], |_| normal(&mut rng) * (1.0 / flat as f64).sqrt()));
        store.insert("disc.out.bias", Tensor::zeros(&[1]));
    }

    /// Logit of the (image, uv) pair; concatenation order is fixed.
    pub fn logit(&self, mg: &mut ModelGraph, img: NodeId, uv: NodeId) -> NodeId {
        assert_eq!(mg.g.value(img).shape(), mg.g.value(uv).shape(), "discriminator pair shapes");
        let mut x = mg.g.concat_axis0(&[img, uv]);
        for i in 0..self.widths.len() {
            let w = mg.param(&format!("disc.conv{i}.weight"));
            let b = mg.param(&format!("disc.conv{i}.bias"));
            x = mg.g.conv2d(x, w, 2, 1);
            x = mg.g.add_bias_chw(x, b);
            x = mg.g.leaky_relu(x, 0.2);
        }
        let shape = mg.g.value(x).shape().to_vec();
        let flat: usize = shape.iter().product();
        let row = mg.g.reshape(x, &[1, flat]);
        let w = mg.param("disc.out.weight");
        let b = mg.param("disc.out.bias");
        let y = mg.g.matmul(row, w);
        let y = mg.g.add_bias_rows(y, b);
        mg.g.reshape(y, &[1])
    }
}

/// One sampled augmentation, applied identically to the real and generated
/// pipelines within a step. All pieces are differentiable.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    pub dx: i64,
    pub dy: i64,
    pub brightness: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self { flip: false, dx: 0, dy: 0, brightness: 1.0 }
    }

    pub fn sample(rng: &mut ChaCha8Rng, p: f64, max_shift: i64) -> Self {
        let mut a = Self::identity();
        if rng.gen::<f64>() < p {
            a.flip = rng.gen::<bool>();
        }
        if rng.gen::<f64>() < p {
            a.dx = rng.gen_range(-max_shift..=max_shift);
            a.dy = rng.gen_range(-max_shift..=max_shift);
        }
        if rng.gen::<f64>() < p {
            a.brightness = 1.0 + 0.2 * (rng.gen::<f64>() * 2.0 - 1.0);
        } else {
            a.brightness = 1.0;
        }
        a
    }

    pub fn apply(&self, g: &mut Graph, img: NodeId) -> NodeId {
        let mut x = img;
        if self.flip {
            x = g.flip_w(x);
        }
        if self.dx != 0 || self.dy != 0 {
            x = g.shift2d(x, self.dy, self.dx);
        }
        if self.brightness != 1.0 {
            x = g.scale(x, self.brightness);
        }
        x
    }
}

/// Non-saturating generator-side adversarial loss: softplus(-D(fake, uv)).
pub fn loss_cgan_generator(
    disc: &Discriminator,
    mg: &mut ModelGraph,
    fake: NodeId,
    uv: NodeId,
    aug: &Augmentation,
) -> NodeId {
    let fa = aug.apply(&mut mg.g, fake);
    let ua = aug.apply(&mut mg.g, uv);
    let logit = disc.logit(mg, fa, ua);
    let neg = mg.g.neg(logit);
    let sp = mg.g.softplus(neg);
    mg.g.mean_all(sp)
}

/// Discriminator-side loss, averaged over the real and fake branches:
/// (softplus(-D(real,uv)) + softplus(D(fake,uv))) / 2.
pub fn loss_cgan_discriminator(
    disc: &Discriminator,
    mg: &mut ModelGraph,
    real: NodeId,
    fake: NodeId,
    uv: NodeId,
    aug: &Augmentation,
) -> NodeId {
    let ra = aug.apply(&mut mg.g, real);
    let fa = aug.apply(&mut mg.g, fake);
    let ua = aug.apply(&mut mg.g, uv);
    let lr = disc.logit(mg, ra, ua);
    let lf = disc.logit(mg, fa, ua);
    let nr = mg.g.neg(lr);
    let sr = mg.g.softplus(nr);
    let sf = mg.g.softplus(lf);
    let sum = mg.g.add(sr, sf);
    let m = mg.g.mean_all(sum);
    mg.g.scale(m, 0.5)
}
