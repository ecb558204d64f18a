//! Block-structured style-based generator with volumetric feature
//! injection, the convolutional prior encoder, and pivotal-tuning
//! inversion.
//!
//! Each block runs at 4*2^(b-1) resolution and exposes four tap points:
//! R1 adds to the style code before the affine layers, R2 to the
//! post-affine styles, R3 to the conv feature maps, R4 to the per-block
//! RGB contribution. All injection projections are zero-initialized, so an
//! enabled injection is exactly invisible until trained.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use stylesplat_grad::{Adam, DType, ModelGraph, NodeId, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::objectives::{loss_perceptual, FeatureExtractor};
use crate::triplane::{he_init, normal};

/// Style code in the generator's intermediate latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode(pub Tensor);

impl StyleCode {
    pub fn validate(&self) -> Result<()> {
        if !self.0.is_finite() {
            return Err(Error::InvalidConfig("style code not finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    R1,
    R2,
    R3,
    R4,
    #[serde(rename = "R3+R4")]
    R3R4,
}

impl Region {
    pub const ALL: [Region; 5] = [Region::R1, Region::R2, Region::R3, Region::R4, Region::R3R4];

    pub fn label(&self) -> &'static str {
        match self {
            Region::R1 => "R1",
            Region::R2 => "R2",
            Region::R3 => "R3",
            Region::R4 => "R4",
            Region::R3R4 => "R3+R4",
        }
    }

    fn uses_r1(&self) -> bool {
        matches!(self, Region::R1)
    }

    fn uses_r2(&self) -> bool {
        matches!(self, Region::R2)
    }

    fn uses_r3(&self) -> bool {
        matches!(self, Region::R3 | Region::R3R4)
    }

    fn uses_r4(&self) -> bool {
        matches!(self, Region::R4 | Region::R3R4)
    }
}

/// Which region and blocks receive volumetric features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub region: Region,
    pub active_blocks: BTreeSet<usize>,
    pub enabled: bool,
}

impl InjectionConfig {
    pub fn disabled() -> Self {
        Self { region: Region::R3, active_blocks: BTreeSet::new(), enabled: false }
    }

    /// Production default: conv-feature injection into every block.
    pub fn default_r3(blocks: usize) -> Self {
        Self { region: Region::R3, active_blocks: (1..=blocks).collect(), enabled: true }
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.enabled && self.active_blocks.is_empty() {
            return Err(Error::InvalidConfig("enabled injection needs active blocks".into()));
        }
        if let Some(&b) = self.active_blocks.iter().find(|&&b| b == 0 || b > blocks) {
            return Err(Error::InvalidConfig(format!("injection block {b} out of 1..={blocks}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Block count; block b renders at 4 * 2^(b-1).
    pub blocks: usize,
    /// Output channel width per block.
    pub widths: Vec<usize>,
    /// Style code dimension.
    pub w_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { blocks: 5, widths: vec![256, 256, 128, 128, 64], w_dim: 512 }
    }
}

impl GeneratorConfig {
    pub fn block_resolution(&self, b: usize) -> usize {
        4 << (b - 1)
    }

    pub fn output_resolution(&self) -> usize {
        self.block_resolution(self.blocks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 || self.widths.len() != self.blocks {
            return Err(Error::InvalidConfig(format!(
                "generator widths {:?} must list one width per block ({})",
                self.widths, self.blocks
            )));
        }
        Ok(())
    }

    /// Input channel width of conv `k` in block `b`.
    fn conv_in(&self, b: usize, k: usize) -> usize {
        if k == 0 {
            if b == 1 {
                self.widths[0]
            } else {
                self.widths[b - 2]
            }
        } else {
            self.widths[b - 1]
        }
    }

    fn convs_in_block(&self, b: usize) -> usize {
        if b == 1 {
            1
        } else {
            2
        }
    }

    /// Every generator tensor with its shape, in name order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("generator.const".to_string(), vec![self.widths[0], 4, 4])];
        for b in 1..=self.blocks {
            let cout = self.widths[b - 1];
            for k in 0..self.convs_in_block(b) {
                let cin = self.conv_in(b, k);
                out.push((format!("generator.b{b}.conv{k}.weight"), vec![cout, cin, 3, 3]));
                out.push((format!("generator.b{b}.conv{k}.bias"), vec![cout]));
                out.push((format!("generator.b{b}.conv{k}.affine.weight"), vec![self.w_dim, cin]));
                out.push((format!("generator.b{b}.conv{k}.affine.bias"), vec![cin]));
            }
            out.push((format!("generator.b{b}.trgb.weight"), vec![3, cout, 1, 1]));
            out.push((format!("generator.b{b}.trgb.bias"), vec![3]));
            out.push((format!("generator.b{b}.trgb.affine.weight"), vec![self.w_dim, cout]));
            out.push((format!("generator.b{b}.trgb.affine.bias"), vec![cout]));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Per-block tap values captured during synthesis, for locality tests.
pub struct SynthTrace {
    /// Post-conv (post-R3) feature node of each block.
    pub block_features: Vec<NodeId>,
    /// Per-block RGB contribution node (post-R4, before accumulation).
    pub block_rgb: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct StyleGenerator {
    pub cfg: GeneratorConfig,
}

impl StyleGenerator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape) in self.cfg.param_specs() {
            let t = if name.ends_with("affine.bias") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name == "generator.const" {
                Tensor::from_fn(&shape, |_| normal(&mut rng))
            } else if name.contains("affine.weight") {
                Tensor::from_fn(&shape, |_| normal(&mut rng) * (0.2 / (shape[0] as f64).sqrt()))
            } else {
                let fan_in: usize = shape[1..].iter().product();
                he_init(&mut rng, &shape, fan_in)
            };
            store.insert(name, t);
        }
    }

    /// Zero-initialized injection projections for every region and block.
    pub fn init_injection_params(&self, store: &mut ParamStore) {
        for b in 1..=self.cfg.blocks {
            let ch = self.cfg.widths[b - 1];
            store.insert(format!("inject.r3.b{b}.weight"), Tensor::zeros(&[ch, ch, 1, 1]));
            store.insert(format!("inject.r4.b{b}.weight"), Tensor::zeros(&[3, ch, 1, 1]));
            store.insert(format!("inject.r1.b{b}.weight"), Tensor::zeros(&[ch, self.cfg.w_dim]));
            for k in 0..self.cfg.convs_in_block(b) {
                let cin = self.cfg.conv_in(b, k);
                store.insert(format!("inject.r2.b{b}.conv{k}.weight"), Tensor::zeros(&[ch, cin]));
            }
        }
    }

    /// Modulated 3x3 conv with demodulation (style scales input channels,
    /// outputs are renormalized by the modulated weight norm).
    fn modulated_conv(
        &self,
        mg: &mut ModelGraph,
        x: NodeId,
        style: NodeId,
        weight: NodeId,
        bias: NodeId,
        demodulate: bool,
        pad: usize,
    ) -> NodeId {
        let xm = mg.g.mul_channels(x, style);
        let mut y = mg.g.conv2d(xm, weight, 1, pad);
        if demodulate {
            let wshape = mg.g.value(weight).shape().to_vec();
            let w2 = mg.g.square(weight);
            let w2 = mg.g.sum_trailing(w2, 2); // (cout, cin)
            let s2 = mg.g.square(style);
            let s2col = mg.g.reshape(s2, &[wshape[1], 1]);
            let norm = mg.g.matmul(w2, s2col); // (cout, 1)
            let norm = mg.g.reshape(norm, &[wshape[0]]);
            let d = mg.g.rsqrt_eps(norm, 1e-8);
            y = mg.g.mul_channels(y, d);
        }
        mg.g.add_bias_chw(y, bias)
    }

    fn affine_style(&self, mg: &mut ModelGraph, w_row: NodeId, prefix: &str, cin: usize) -> NodeId {
        let aw = mg.param(&format!("{prefix}.affine.weight"));
        let ab = mg.param(&format!("{prefix}.affine.bias"));
        let s = mg.g.matmul(w_row, aw);
        let s = mg.g.reshape(s, &[cin]);
        mg.g.add(s, ab)
    }

    /// Spatial mean per channel, used by the R1/R2 vector taps.
    fn pooled(&self, mg: &mut ModelGraph, pyr: NodeId) -> NodeId {
        let shape = mg.g.value(pyr).shape().to_vec();
        let hw = (shape[1] * shape[2]) as f64;
        let s = mg.g.sum_trailing(pyr, 1);
        mg.g.scale(s, 1.0 / hw)
    }

    /// Standard synthesis plus optional volumetric injection. With the
    /// injection absent, disabled, or zero-initialized, the output equals
    /// the base generator's exactly.
    pub fn synthesize(
        &self,
        mg: &mut ModelGraph,
        w: NodeId,
        pyramid: Option<&BTreeMap<usize, NodeId>>,
        inj: &InjectionConfig,
    ) -> Result<(NodeId, SynthTrace)> {
        inj.validate(self.cfg.blocks)?;
        assert_eq!(mg.g.value(w).shape(), &[self.cfg.w_dim], "style code dim");
        let w_row = mg.g.reshape(w, &[1, self.cfg.w_dim]);

        let mut trace = SynthTrace { block_features: Vec::new(), block_rgb: Vec::new() };
        let mut x = mg.param("generator.const");
        let mut rgb: Option<NodeId> = None;

        for b in 1..=self.cfg.blocks {
            let res = self.cfg.block_resolution(b);
            let active = inj.enabled && inj.active_blocks.contains(&b) && pyramid.is_some();
            let entry = if active {
                let pyr = pyramid.unwrap();
                let &node = pyr.get(&b).ok_or_else(|| {
                    Error::InvalidConfig(format!("pyramid is missing an entry for block {b}"))
                })?;
                let shape = mg.g.value(node).shape().to_vec();
                if shape != [self.cfg.widths[b - 1], res, res] {
                    return Err(Error::ResolutionMismatch { block: b, got: shape[1], want: res });
                }
                Some(node)
            } else {
                None
            };

            // R1: additive offset on the style code for this block
            let w_b = match entry {
                Some(node) if inj.region.uses_r1() => {
                    let pooled = self.pooled(mg, node);
                    let proj = mg.param(&format!("inject.r1.b{b}.weight"));
                    let row = mg.g.reshape(pooled, &[1, self.cfg.widths[b - 1]]);
                    let off = mg.g.matmul(row, proj);
                    mg.g.add(w_row, off)
                }
                _ => w_row,
            };

            if b > 1 {
                x = mg.g.upsample2x(x);
            }
            for k in 0..self.cfg.convs_in_block(b) {
                let cin = self.cfg.conv_in(b, k);
                let prefix = format!("generator.b{b}.conv{k}");
                let mut style = self.affine_style(mg, w_b, &prefix, cin);
                if let Some(node) = entry {
                    if inj.region.uses_r2() {
                        let pooled = self.pooled(mg, node);
                        let proj = mg.param(&format!("inject.r2.b{b}.conv{k}.weight"));
                        let row = mg.g.reshape(pooled, &[1, self.cfg.widths[b - 1]]);
                        let off = mg.g.matmul(row, proj);
                        let off = mg.g.reshape(off, &[cin]);
                        style = mg.g.add(style, off);
                    }
                }
                let weight = mg.param(&format!("{prefix}.weight"));
                let bias = mg.param(&format!("{prefix}.bias"));
                x = self.modulated_conv(mg, x, style, weight, bias, true, 1);
                x = mg.g.leaky_relu(x, 0.2);
            }

            // R3: add projected prior to the conv feature tensor
            if let Some(node) = entry {
                if inj.region.uses_r3() {
                    let proj = mg.param(&format!("inject.r3.b{b}.weight"));
                    let add = mg.g.conv2d(node, proj, 1, 0);
                    x = mg.g.add(x, add);
                }
            }
            trace.block_features.push(x);

            // tRGB: modulated 1x1 without demodulation
            let cout = self.cfg.widths[b - 1];
            let style = self.affine_style(mg, w_b, &format!("generator.b{b}.trgb"), cout);
            let tw = mg.param(&format!("generator.b{b}.trgb.weight"));
            let tb = mg.param(&format!("generator.b{b}.trgb.bias"));
            let mut y = self.modulated_conv(mg, x, style, tw, tb, false, 0);
            if let Some(node) = entry {
                if inj.region.uses_r4() {
                    let proj = mg.param(&format!("inject.r4.b{b}.weight"));
                    let add = mg.g.conv2d(node, proj, 1, 0);
                    y = mg.g.add(y, add);
                }
            }
            trace.block_rgb.push(y);

            rgb = Some(match rgb {
                None => y,
                Some(prev) => {
                    let up = mg.g.upsample2x(prev);
                    mg.g.add(up, y)
                }
            });
        }
        Ok((rgb.unwrap(), trace))
    }

    /// Forward synthesis outside any training graph.
    pub fn synthesize_eval(
        &self,
        store: &ParamStore,
        w: &StyleCode,
        inj: &InjectionConfig,
    ) -> Result<Tensor> {
        w.validate()?;
        let mut mg = ModelGraph::frozen(store);
        let wn = mg.g.constant(w.0.clone());
        let (img, _) = self.synthesize(&mut mg, wn, None, inj)?;
        Ok(mg.g.value(img).clone())
    }

    pub fn save_weights(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for (name, _) in self.cfg.param_specs() {
            let t = store
                .try_get(&name)
                .ok_or_else(|| Error::SchemaMismatch(name.clone()))?;
            entries.push((name, t, DType::F64));
        }
        let meta = serde_json::to_string(&self.cfg)?;
        stylesplat_grad::write_container(path, &meta, &entries)?;
        Ok(())
    }

    /// Load weights from a manifest file; every tensor named by the config
    /// must be present with the right shape.
    pub fn load_weights(path: &Path) -> Result<(StyleGenerator, ParamStore)> {
        let container = stylesplat_grad::read_container(path)?;
        let cfg: GeneratorConfig = serde_json::from_str(&container.meta_json)?;
        let gen = StyleGenerator::new(cfg)?;
        let mut store = ParamStore::new();
        for (name, shape) in gen.cfg.param_specs() {
            let t = container
                .tensors
                .get(&name)
                .ok_or_else(|| Error::SchemaMismatch(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: name.clone(),
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            store.insert(name, t.clone());
        }
        Ok((gen, store))
    }
}

/// Bias-free strided conv pyramid encoding a splatted feature image down to
/// every active block's resolution and width.
#[derive(Clone, Debug)]
pub struct PriorEncoder {
    pub input_resolution: usize,
    pub input_channels: usize,
    pub gen_cfg: GeneratorConfig,
}

impl PriorEncoder {
    pub fn new(input_resolution: usize, input_channels: usize, gen_cfg: GeneratorConfig) -> Result<Self> {
        if input_resolution < gen_cfg.output_resolution() {
            return Err(Error::InvalidConfig(format!(
                "render resolution {input_resolution} below generator output {}",
                gen_cfg.output_resolution()
            )));
        }
        if !input_resolution.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "render resolution {input_resolution} must be a power of two"
            )));
        }
        Ok(Self { input_resolution, input_channels, gen_cfg })
    }

    fn stages(&self) -> usize {
        (self.input_resolution / 4).trailing_zeros() as usize + 1
    }

    fn trunk_width(&self, stage: usize) -> usize {
        (8 << stage).min(32)
    }

    fn stage_resolution(&self, stage: usize) -> usize {
        self.input_resolution >> stage
    }

    fn stage_for_block(&self, b: usize) -> usize {
        let res = self.gen_cfg.block_resolution(b);
        (self.input_resolution / res).trailing_zeros() as usize
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.insert(
            "encoder.in.weight",
            he_init(&mut rng, &[self.trunk_width(0), self.input_channels, 1, 1], self.input_channels),
        );
        for s in 1..self.stages() {
            let (cin, cout) = (self.trunk_width(s - 1), self.trunk_width(s));
            store.insert(
                format!("encoder.down{s}.weight"),
                he_init(&mut rng, &[cout, cin, 3, 3], cin * 9),
            );
        }
        for b in 1..=self.gen_cfg.blocks {
            let s = self.stage_for_block(b);
            let cin = self.trunk_width(s);
            let cout = self.gen_cfg.widths[b - 1];
            store.insert(
                format!("encoder.adapt.b{b}.weight"),
                he_init(&mut rng, &[cout, cin, 1, 1], cin),
            );
        }
    }

    /// Build the pyramid for the given active blocks. The encoder carries
    /// no biases anywhere, so a zero render yields a zero pyramid.
    pub fn encode(
        &self,
        mg: &mut ModelGraph,
        render: NodeId,
        active_blocks: &BTreeSet<usize>,
    ) -> Result<BTreeMap<usize, NodeId>> {
        let shape = mg.g.value(render).shape().to_vec();
        if shape != [self.input_channels, self.input_resolution, self.input_resolution] {
            return Err(Error::ShapeMismatch {
                context: "encoder input".into(),
                lhs: shape,
                rhs: vec![self.input_channels, self.input_resolution, self.input_resolution],
            });
        }
        let win = mg.param("encoder.in.weight");
        let mut x = mg.g.conv2d(render, win, 1, 0);
        x = mg.g.leaky_relu(x, 0.2);
        let mut trunk = vec![x];
        for s in 1..self.stages() {
            let w = mg.param(&format!("encoder.down{s}.weight"));
            let mut y = mg.g.conv2d(trunk[s - 1], w, 2, 1);
            y = mg.g.leaky_relu(y, 0.2);
            trunk.push(y);
        }
        let mut out = BTreeMap::new();
        for &b in active_blocks {
            if b == 0 || b > self.gen_cfg.blocks {
                return Err(Error::InvalidConfig(format!("encoder block {b} out of range")));
            }
            let s = self.stage_for_block(b);
            let w = mg.param(&format!("encoder.adapt.b{b}.weight"));
            let y = mg.g.conv2d(trunk[s], w, 1, 0);
            out.insert(b, y);
        }
        Ok(out)
    }
}

/// Loss trace entry of a pivotal-tuning run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PtiStep {
    pub phase: u8,
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
}

pub struct PtiOptions {
    pub steps_pivot: usize,
    pub steps_tune: usize,
    pub lr_pivot: f64,
    pub lr_tune: f64,
    pub perceptual_weight: f64,
}

impl Default for PtiOptions {
    fn default() -> Self {
        Self { steps_pivot: 500, steps_tune: 300, lr_pivot: 2e-2, lr_tune: 1e-3, perceptual_weight: 0.1 }
    }
}

pub struct PtiResult {
    pub w: StyleCode,
    pub trace: Vec<PtiStep>,
}

/// Two-phase inversion: optimize one shared style code against every
/// target with the generator frozen, then freeze the code and fine-tune the
/// generator weights on the same objective.
pub fn pti_invert(
    gen: &StyleGenerator,
    store: &mut ParamStore,
    targets: &[Tensor],
    extractor: &dyn FeatureExtractor,
    opts: &PtiOptions,
) -> Result<PtiResult> {
    if targets.is_empty() || targets.len() > 16 {
        return Err(Error::InvalidConfig(format!(
            "inversion needs 1..=16 target images, got {}",
            targets.len()
        )));
    }
    let res = gen.cfg.output_resolution();
    for t in targets {
        if t.shape() != [3, res, res] {
            return Err(Error::ShapeMismatch {
                context: "pti target".into(),
                lhs: t.shape().to_vec(),
                rhs: vec![3, res, res],
            });
        }
    }
    if !store.contains("pivot.w") {
        store.insert("pivot.w", Tensor::zeros(&[gen.cfg.w_dim]));
    }

    let mut trace = Vec::new();
    for (phase, steps, lr, prefix) in
        [(1u8, opts.steps_pivot, opts.lr_pivot, "pivot."), (2u8, opts.steps_tune, opts.lr_tune, "generator.")]
    {
        let mut adam = Adam::new(lr);
        for step in 0..steps {
            let (grads, loss, mse) = {
                let mut mg = ModelGraph::new(store, |n| n.starts_with(prefix));
                let w = mg.param("pivot.w");
                let (img, _) = gen.synthesize(&mut mg, w, None, &InjectionConfig::disabled())?;
                let mut mse_total: Option<NodeId> = None;
                let mut perp_total: Option<NodeId> = None;
                for t in targets {
                    let tn = mg.g.constant(t.clone());
                    let d = mg.g.sub(img, tn);
                    let sq = mg.g.square(d);
                    let mse = mg.g.mean_all(sq);
                    mse_total = Some(match mse_total {
                        Some(a) => mg.g.add(a, mse),
                        None => mse,
                    });
                    if opts.perceptual_weight > 0.0 {
                        let p = loss_perceptual(&mut mg.g, extractor, img, tn);
                        perp_total = Some(match perp_total {
                            Some(a) => mg.g.add(a, p),
                            None => p,
                        });
                    }
                }
                let k = 1.0 / targets.len() as f64;
                let mse_node = mg.g.scale(mse_total.unwrap(), k);
                let loss_node = match perp_total {
                    Some(p) => {
                        let ps = mg.g.scale(p, k * opts.perceptual_weight);
                        mg.g.add(mse_node, ps)
                    }
                    None => mse_node,
                };
                let loss = mg.g.value(loss_node).item();
                let mse = mg.g.value(mse_node).item();
                let grads = mg.g.backward(loss_node);
                (mg.param_grads(&grads), loss, mse)
            };
            adam.step(store, &grads);
            trace.push(PtiStep { phase, step, loss, mse });
        }
    }
    Ok(PtiResult { w: StyleCode(store.get("pivot.w").clone()), trace })
}
