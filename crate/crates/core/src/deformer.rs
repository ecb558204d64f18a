//! Attention-based deformation: per-frame parameters become key/value
//! tokens, per-Gaussian triplane features attend to them, and an MLP with
//! zero-initialized heads predicts offsets to position, rotation, log-scale,
//! and features. The head pose is applied as a rigid transform afterwards.

use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stylesplat_grad::{Graph, ModelGraph, NodeId, ParamStore, Tensor};

use crate::camera::{Camera, RigidPose};
use crate::error::{Error, Result};
use crate::gaussians::FEATURE_CHANNELS;
use crate::math::{quat_left_matrix, quat_normalize};
use crate::objectives::RegionBox;
use crate::triplane::he_init;

/// Everything that drives one frame: tracked expression, head pose, camera,
/// the temporal-latent index, an optional UV-coordinate image, and the
/// landmark region boxes.
#[derive(Clone, Debug)]
pub struct FrameConditioning {
    pub expression: Vec<f64>,
    pub pose: RigidPose,
    pub camera: Camera,
    pub frame_id: usize,
    pub uv: Option<Tensor>,
    pub eyes_box: RegionBox,
    pub mouth_box: RegionBox,
}

impl FrameConditioning {
    pub fn validate(&self) -> Result<()> {
        if !self.expression.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("expression coefficients not finite".into()));
        }
        self.pose.validate()?;
        self.camera.validate()?;
        self.eyes_box.validate(self.camera.width, self.camera.height)?;
        self.mouth_box.validate(self.camera.width, self.camera.height)?;
        if let Some(uv) = &self.uv {
            if uv.shape() != [3, self.camera.height, self.camera.width] {
                return Err(Error::ShapeMismatch {
                    context: "conditioning uv".into(),
                    lhs: uv.shape().to_vec(),
                    rhs: vec![3, self.camera.height, self.camera.width],
                });
            }
        }
        Ok(())
    }

    pub fn boxes(&self) -> [RegionBox; 2] {
        [self.eyes_box, self.mouth_box]
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeformerConfig {
    /// Attention model width.
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Expression coefficient count (one token each, plus one pose token).
    pub expr_dim: usize,
    /// Incoming triplane feature width (3 * plane channels).
    pub feature_dim: usize,
}

impl Default for DeformerConfig {
    fn default() -> Self {
        Self { model_dim: 128, heads: 4, ffn_hidden: 256, expr_dim: 16, feature_dim: 96 }
    }
}

impl DeformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} must divide into {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn token_count(&self) -> usize {
        self.expr_dim + 1
    }
}

/// Predicted per-Gaussian offsets.
#[derive(Clone, Copy, Debug)]
pub struct DeformationOutput {
    /// (m,3)
    pub dpos: NodeId,
    /// (m,4)
    pub drot: NodeId,
    /// (m,3) log-scale offsets
    pub dscale: NodeId,
    /// (m,32) feature offsets
    pub dfeat: NodeId,
}

/// Cross-attention conditioning and deformation heads.
#[derive(Clone, Debug)]
pub struct Deformer {
    pub cfg: DeformerConfig,
}

impl Deformer {
    pub fn new(cfg: DeformerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.cfg.model_dim;
        let e = self.cfg.expr_dim;
        let f = self.cfg.feature_dim;
        let h = self.cfg.ffn_hidden;
        store.insert("deformer.lift.weight", he_init(&mut rng, &[f, d], f));
        store.insert("deformer.lift.bias", Tensor::zeros(&[d]));
        store.insert(
            "deformer.tokens.expr",
            Tensor::from_fn(&[e, d], |_| crate::triplane::normal(&mut rng) * 0.2),
        );
        store.insert(
            "deformer.tokens.pose.weight",
            Tensor::from_fn(&[7, d], |_| crate::triplane::normal(&mut rng) * 0.2),
        );
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("deformer.attn.{name}"), he_init(&mut rng, &[d, d], d));
        }
        store.insert("deformer.attn.bo", Tensor::zeros(&[d]));
        store.insert("deformer.ffn.w1", he_init(&mut rng, &[d, h], d));
        store.insert("deformer.ffn.b1", Tensor::zeros(&[h]));
        store.insert("deformer.ffn.w2", he_init(&mut rng, &[h, d], h));
        store.insert("deformer.ffn.b2", Tensor::zeros(&[d]));
        store.insert("deformer.head.hidden.weight", he_init(&mut rng, &[d, d], d));
        store.insert("deformer.head.hidden.bias", Tensor::zeros(&[d]));
        // zero-initialized heads: the initial deformation is exactly identity
        for (name, dim) in [("pos", 3), ("rot", 4), ("scale", 3), ("feat", FEATURE_CHANNELS)] {
            store.insert(format!("deformer.head.{name}.weight"), Tensor::zeros(&[d, dim]));
            store.insert(format!("deformer.head.{name}.bias"), Tensor::zeros(&[dim]));
        }
    }

    /// Project queried triplane features into the attention width.
    pub fn lift_features(&self, mg: &mut ModelGraph, feats: NodeId) -> NodeId {
        let w = mg.param("deformer.lift.weight");
        let b = mg.param("deformer.lift.bias");
        let x = mg.g.matmul(feats, w);
        mg.g.add_bias_rows(x, b)
    }

    /// One token per expression coefficient (learned embedding scaled by the
    /// coefficient) plus one pose token from a linear map of (quat, trans).
    pub fn condition_tokens(&self, mg: &mut ModelGraph, cond: &FrameConditioning) -> NodeId {
        assert_eq!(cond.expression.len(), self.cfg.expr_dim, "expression dim");
        let embed = mg.param("deformer.tokens.expr");
        let coeff = mg.g.constant(Tensor::new(vec![self.cfg.expr_dim], cond.expression.clone()));
        let expr_tokens = mg.g.mul_rows(embed, coeff);
        let mut pose7 = Vec::with_capacity(7);
        pose7.extend_from_slice(&cond.pose.quat);
        pose7.extend_from_slice(&cond.pose.trans);
        let pose_row = mg.g.constant(Tensor::new(vec![1, 7], pose7));
        let wp = mg.param("deformer.tokens.pose.weight");
        let pose_token = mg.g.matmul(pose_row, wp);
        mg.g.concat_axis0(&[expr_tokens, pose_token])
    }

    /// Multi-head cross-attention with an identity skip. Also returns the
    /// per-head attention weight nodes (m,k) for inspection.
    pub fn cross_attend(
        &self,
        mg: &mut ModelGraph,
        f: NodeId,
        tokens: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let d = self.cfg.model_dim;
        let dh = self.cfg.head_dim();
        assert_eq!(mg.g.value(f).shape()[1], d, "query width");
        assert_eq!(mg.g.value(tokens).shape()[1], d, "token width");
        let wq = mg.param("deformer.attn.wq");
        let wk = mg.param("deformer.attn.wk");
        let wv = mg.param("deformer.attn.wv");
        let q = mg.g.matmul(f, wq);
        let k = mg.g.matmul(tokens, wk);
        let v = mg.g.matmul(tokens, wv);
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for hidx in 0..self.cfg.heads {
            let qh = mg.g.slice_cols(q, hidx * dh, dh);
            let kh = mg.g.slice_cols(k, hidx * dh, dh);
            let vh = mg.g.slice_cols(v, hidx * dh, dh);
            let scores = mg.g.matmul_nt(qh, kh);
            let scaled = mg.g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = mg.g.softmax_rows(scaled);
            weights.push(attn);
            heads.push(mg.g.matmul(attn, vh));
        }
        let merged = mg.g.concat_cols(&heads);
        let wo = mg.param("deformer.attn.wo");
        let bo = mg.param("deformer.attn.bo");
        let out = mg.g.matmul(merged, wo);
        let out = mg.g.add_bias_rows(out, bo);
        (mg.g.add(out, f), weights)
    }

    /// Two-layer MLP with an identity skip.
    pub fn feed_forward(&self, mg: &mut ModelGraph, f_prime: NodeId) -> NodeId {
        let w1 = mg.param("deformer.ffn.w1");
        let b1 = mg.param("deformer.ffn.b1");
        let w2 = mg.param("deformer.ffn.w2");
        let b2 = mg.param("deformer.ffn.b2");
        let h = mg.g.matmul(f_prime, w1);
        let h = mg.g.add_bias_rows(h, b1);
        let h = mg.g.leaky_relu(h, 0.2);
        let o = mg.g.matmul(h, w2);
        let o = mg.g.add_bias_rows(o, b2);
        mg.g.add(o, f_prime)
    }

    /// Shared hidden layer feeding four zero-initialized output heads.
    pub fn deform_head(&self, mg: &mut ModelGraph, z: NodeId) -> DeformationOutput {
        let wh = mg.param("deformer.head.hidden.weight");
        let bh = mg.param("deformer.head.hidden.bias");
        let h = mg.g.matmul(z, wh);
        let h = mg.g.add_bias_rows(h, bh);
        let h = mg.g.leaky_relu(h, 0.2);
        let mut head = |name: &str| {
            let w = mg.param(&format!("deformer.head.{name}.weight"));
            let b = mg.param(&format!("deformer.head.{name}.bias"));
            let y = mg.g.matmul(h, w);
            mg.g.add_bias_rows(y, b)
        };
        DeformationOutput {
            dpos: head("pos"),
            drot: head("rot"),
            dscale: head("scale"),
            dfeat: head("feat"),
        }
    }

    /// Full conditioning chain from lifted-width features to offsets.
    pub fn deform(&self, mg: &mut ModelGraph, feats: NodeId, cond: &FrameConditioning) -> DeformationOutput {
        let f = self.lift_features(mg, feats);
        let tokens = self.condition_tokens(mg, cond);
        let (f_prime, _) = self.cross_attend(mg, f, tokens);
        let z = self.feed_forward(mg, f_prime);
        self.deform_head(mg, z)
    }
}

/// Cloud tensors bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct CloudNodes {
    pub positions: NodeId,
    pub rotations: NodeId,
    pub log_scales: NodeId,
    pub opacity_logits: NodeId,
    pub features: NodeId,
}

impl CloudNodes {
    pub fn bind(mg: &mut ModelGraph) -> Self {
        Self {
            positions: mg.param("cloud.positions"),
            rotations: mg.param("cloud.rotations"),
            log_scales: mg.param("cloud.log_scales"),
            opacity_logits: mg.param("cloud.opacity_logits"),
            features: mg.param("cloud.features"),
        }
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.positions).shape()[0]
    }
}

/// Apply offsets then the rigid head pose:
/// positions become R_pose (mu + dmu) + t_pose, rotations are re-normalized
/// after the additive update and left-composed with the pose rotation,
/// log-scales and features add their offsets, opacity stays fixed.
pub fn apply_deformation(
    g: &mut Graph,
    cloud: &CloudNodes,
    deform: Option<&DeformationOutput>,
    pose: &RigidPose,
) -> Result<CloudNodes> {
    let n = g.value(cloud.positions).shape()[0];
    if let Some(d) = deform {
        for (node, cols, what) in [
            (d.dpos, 3, "dpos"),
            (d.drot, 4, "drot"),
            (d.dscale, 3, "dscale"),
            (d.dfeat, FEATURE_CHANNELS, "dfeat"),
        ] {
            let got = g.value(node).shape().to_vec();
            if got != [n, cols] {
                return Err(Error::ShapeMismatch {
                    context: format!("apply_deformation {what}"),
                    lhs: got,
                    rhs: vec![n, cols],
                });
            }
        }
    }

    let positions = match deform {
        Some(d) => g.add(cloud.positions, d.dpos),
        None => cloud.positions,
    };
    let rotations = match deform {
        Some(d) => g.add(cloud.rotations, d.drot),
        None => cloud.rotations,
    };
    let rotations = g.normalize_rows4(rotations);
    let log_scales = match deform {
        Some(d) => g.add(cloud.log_scales, d.dscale),
        None => cloud.log_scales,
    };
    let features = match deform {
        Some(d) => g.add(cloud.features, d.dfeat),
        None => cloud.features,
    };

    let (positions, rotations) = if pose.is_identity() {
        (positions, rotations)
    } else {
        let q = quat_normalize(pose.quat);
        let r = crate::math::quat_to_matrix(q);
        // row-vector transform: p' = p R^T + t; nalgebra slices are
        // column-major, so r.as_slice() read row-major is already R^T
        let rt = g.constant(Tensor::new(vec![3, 3], r.as_slice().to_vec()));
        let t = g.constant(Tensor::new(vec![3], pose.trans.to_vec()));
        let p = g.matmul(positions, rt);
        let p = g.add_bias_rows(p, t);
        // left-compose: q' = L(q_pose) q, as row vectors q L(q_pose)^T
        let l: Matrix4<f64> = quat_left_matrix(q);
        let lt = g.constant(Tensor::new(vec![4, 4], l.as_slice().to_vec()));
        let r2 = g.matmul(rotations, lt);
        (p, r2)
    };

    Ok(CloudNodes {
        positions,
        rotations,
        log_scales,
        opacity_logits: cloud.opacity_logits,
        features,
    })
}
