//! Shared-encoder, dual-branch segmentation network.
//!
//! The encoder is five double-3x3-conv blocks with 2x2 max pooling between
//! them. Each branch (teeth, plaque) owns an entry block on the bottleneck, four
//! upsample + skip-concat + conv-block stages, a mask head, an optional boundary
//! head and an optional per-pixel projection head fed by the entry block.
//! With semantic decomposition disabled the network collapses to a plain UNet
//! with one decoder and a 3-class head.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView3, ArrayView4, ArrayViewD, IxDyn};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Scalar};
use crate::weights::{derive_rng, Weights};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub use_skip_connections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            encoder_channels: vec![64, 128, 256, 512, 1024],
            embedding_dim: 64,
            use_skip_connections: true,
        }
    }
}

/// Hidden widths of the per-pixel fully connected layers of a projection head.
pub const PROJ_HIDDEN: [usize; 2] = [128, 64];
/// Foreground/background logits per branch.
pub const BRANCH_CLASSES: usize = 2;
/// Background/teeth/plaque logits of the joint (baseline) decoder.
pub const JOINT_CLASSES: usize = 3;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != 5 {
            return Err(Error::Config(format!(
                "encoder_channels needs 5 widths, got {}",
                self.encoder_channels.len()
            )));
        }
        if self.encoder_channels.windows(2).any(|p| p[0] >= p[1]) || self.encoder_channels[0] == 0 {
            return Err(Error::Config("encoder_channels must be strictly increasing".into()));
        }
        if self.bottleneck_channels() < 8 {
            return Err(Error::Config(
                "bottleneck width must be at least 8 for the projection reductions".into(),
            ));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 16",
                self.input_size
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_channels[4]
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size / 16
    }
}

/// Network components toggled by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    /// Semantic decomposition into per-category branches.
    SD,
    /// Contrastive constraint between branch embeddings.
    CCM,
    /// Boundary-supervised structural constraint.
    SCM,
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SD" => Ok(Component::SD),
            "CCM" => Ok(Component::CCM),
            "SCM" => Ok(Component::SCM),
            _ => Err(Error::Config(format!("unknown component `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ablation(pub BTreeSet<Component>);

impl Ablation {
    pub fn full() -> Self {
        Self([Component::SD, Component::CCM, Component::SCM].into_iter().collect())
    }

    pub fn baseline() -> Self {
        Self(BTreeSet::new())
    }

    pub fn of(components: &[Component]) -> Self {
        Self(components.iter().copied().collect())
    }

    pub fn has(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.has(Component::SD) && (self.has(Component::CCM) || self.has(Component::SCM)) {
            return Err(Error::Config(
                "CCM and SCM act on the decomposed branches and require SD".into(),
            ));
        }
        Ok(())
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("{}");
        }
        let names: Vec<String> = self.0.iter().map(|c| format!("{c:?}")).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Teeth,
    Plaque,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Teeth, Branch::Plaque];

    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Teeth => "teeth",
            Branch::Plaque => "plaque",
        }
    }
}

/// Where a feature map was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Encoder(usize),
    BranchEntry(Branch),
    Decoder(Branch, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Array3<T>,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Zero for biases.
    pub fan_in: usize,
}

/// Model config plus enabled components: everything that fixes the parameter table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub config: ModelConfig,
    pub components: Ablation,
}

impl Architecture {
    pub fn new(config: ModelConfig, components: Ablation) -> Result<Self> {
        config.validate()?;
        components.validate()?;
        Ok(Self { config, components })
    }

    /// Full network: decomposition plus both constraints.
    pub fn sdnet(config: ModelConfig) -> Result<Self> {
        Self::new(config, Ablation::full())
    }

    pub fn decomposed(&self) -> bool {
        self.components.has(Component::SD)
    }

    pub fn has_projection(&self) -> bool {
        self.components.has(Component::CCM)
    }

    pub fn has_boundary(&self) -> bool {
        self.components.has(Component::SCM)
    }

    fn decoder_prefixes(&self) -> Vec<&'static str> {
        if self.decomposed() {
            vec![Branch::Teeth.prefix(), Branch::Plaque.prefix()]
        } else {
            vec![JOINT_PREFIX]
        }
    }

    /// Every parameter tensor, in construction order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let ch = &self.config.encoder_channels;
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>, name: String, cin: usize, cout: usize, k: usize| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, k, k],
                fan_in: cin * k * k,
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                fan_in: 0,
            });
        };
        let mut cin = 3;
        for (i, &c) in ch.iter().enumerate() {
            conv(&mut specs, format!("encoder.block{}.conv1", i + 1), cin, c, 3);
            conv(&mut specs, format!("encoder.block{}.conv2", i + 1), c, c, 3);
            cin = c;
        }
        let bottleneck = ch[4];
        for prefix in self.decoder_prefixes() {
            if self.decomposed() {
                conv(&mut specs, format!("{prefix}.entry.conv1"), bottleneck, bottleneck, 3);
                conv(&mut specs, format!("{prefix}.entry.conv2"), bottleneck, bottleneck, 3);
            }
            let mut below = bottleneck;
            for stage in 0..4 {
                let skip = ch[3 - stage];
                let input = below + if self.config.use_skip_connections { skip } else { 0 };
                conv(&mut specs, format!("{prefix}.up{}.conv1", stage + 1), input, skip, 3);
                conv(&mut specs, format!("{prefix}.up{}.conv2", stage + 1), skip, skip, 3);
                below = skip;
            }
            let classes = if self.decomposed() { BRANCH_CLASSES } else { JOINT_CLASSES };
            conv(&mut specs, format!("{prefix}.mask_head"), ch[0], classes, 1);
            if self.decomposed() && self.has_boundary() {
                conv(&mut specs, format!("{prefix}.boundary_head"), ch[0], 1, 1);
            }
            if self.decomposed() && self.has_projection() {
                let (r1, r2) = (bottleneck / 4, bottleneck / 8);
                conv(&mut specs, format!("{prefix}.proj.reduce1"), bottleneck, r1, 1);
                conv(&mut specs, format!("{prefix}.proj.reduce2"), r1, r2, 1);
                let dims = [r2, PROJ_HIDDEN[0], PROJ_HIDDEN[1], self.config.embedding_dim];
                for (j, pair) in dims.windows(2).enumerate() {
                    specs.push(ParamSpec {
                        name: format!("{prefix}.proj.fc{}.weight", j + 1),
                        shape: vec![pair[1], pair[0]],
                        fan_in: pair[0],
                    });
                    specs.push(ParamSpec {
                        name: format!("{prefix}.proj.fc{}.bias", j + 1),
                        shape: vec![pair[1]],
                        fan_in: 0,
                    });
                }
            }
        }
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

const JOINT_PREFIX: &str = "decoder";

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases. Each tensor draws
/// from its own stream keyed by `(seed, name)`.
pub fn init_weights<T: Scalar>(arch: &Architecture, seed: u64) -> Weights<T> {
    let mut w = Weights::new();
    for spec in arch.param_specs() {
        let n: usize = spec.shape.iter().product();
        let values: Vec<T> = if spec.fan_in == 0 {
            vec![T::zero(); n]
        } else {
            let std = (2.0 / spec.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = derive_rng(seed, &format!("init/{}", spec.name));
            (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
        };
        w.insert(
            spec.name,
            ndarray::ArrayD::from_shape_vec(IxDyn(&spec.shape), values).expect("spec shape"),
        );
    }
    w
}

/// Check that `weights` holds every tensor `arch` needs with the right shape.
pub fn check_weights<T: Scalar>(arch: &Architecture, weights: &Weights<T>) -> Result<()> {
    for spec in arch.param_specs() {
        let t = weights.get(&spec.name)?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::Shape(format!(
                "{} has shape {:?}, expected {:?}",
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
    }
    Ok(())
}

/// Outputs of one category branch. Auxiliary heads are absent when their
/// component is disabled or when running inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs<T> {
    /// `[2, H, W]` background/foreground logits.
    pub mask_logits: Array3<T>,
    /// `[1, H, W]` boundary logits.
    pub boundary_logits: Option<Array3<T>>,
    /// `[w*h, d]` pixel embeddings before normalization.
    pub embeddings: Option<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult<T> {
    pub teeth: BranchOutputs<T>,
    pub plaque: BranchOutputs<T>,
}

impl<T> ForwardResult<T> {
    pub fn branch(&self, b: Branch) -> &BranchOutputs<T> {
        match b {
            Branch::Teeth => &self.teeth,
            Branch::Plaque => &self.plaque,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkOutput<T> {
    Decomposed(ForwardResult<T>),
    /// `[3, H, W]` logits of the baseline decoder.
    Joint(Array3<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Evaluate every head the architecture defines.
    All,
    /// Mask heads only; boundary and projection weights are never read.
    MasksOnly,
}

struct BlockTrace<T> {
    input: Array3<T>,
    mid: Array3<T>,
    out: Array3<T>,
}

fn conv_layer<T: Scalar>(w: &Weights<T>, name: &str, x: ArrayView3<T>) -> Result<Array3<T>> {
    let wt = w.get4(&format!("{name}.weight"))?;
    if wt.dim().1 != x.dim().0 {
        return Err(Error::Shape(format!(
            "{name} expects {} input channels, got {}",
            wt.dim().1,
            x.dim().0
        )));
    }
    Ok(ops::conv2d(x, wt, w.get1(&format!("{name}.bias"))?))
}

fn conv_layer_backward<T: Scalar>(
    w: &Weights<T>,
    name: &str,
    input: ArrayView3<T>,
    grad_out: ArrayView3<T>,
    grads: &mut Weights<T>,
    need_input: bool,
) -> Result<Option<Array3<T>>> {
    let wt = w.get4(&format!("{name}.weight"))?;
    let g = ops::conv2d_backward(input, wt, grad_out, need_input);
    grads.accumulate(&format!("{name}.weight"), g.weight.into_dyn().view());
    grads.accumulate(&format!("{name}.bias"), g.bias.into_dyn().view());
    Ok(g.input)
}

fn dense_weight<'a, T: Scalar>(w: &'a Weights<T>, name: &str) -> Result<ArrayView4<'a, T>> {
    let w2 = w.get2(&format!("{name}.weight"))?;
    let (o, i) = w2.dim();
    w2.into_shape_with_order((o, i, 1, 1))
        .map_err(|e| Error::Shape(format!("{name}: {e}")))
}

/// Per-pixel fully connected layer on a `[C, h, w]` map.
fn dense_layer<T: Scalar>(w: &Weights<T>, name: &str, x: ArrayView3<T>) -> Result<Array3<T>> {
    Ok(ops::conv2d(x, dense_weight(w, name)?, w.get1(&format!("{name}.bias"))?))
}

fn dense_layer_backward<T: Scalar>(
    w: &Weights<T>,
    name: &str,
    input: ArrayView3<T>,
    grad_out: ArrayView3<T>,
    grads: &mut Weights<T>,
) -> Result<Array3<T>> {
    let wt = dense_weight(w, name)?;
    let (o, i, _, _) = wt.dim();
    let g = ops::conv2d_backward(input, wt, grad_out, true);
    let gw = ops::standard(g.weight).into_shape_with_order((o, i)).expect("dense grad");
    grads.accumulate(&format!("{name}.weight"), gw.into_dyn().view());
    grads.accumulate(&format!("{name}.bias"), g.bias.into_dyn().view());
    Ok(g.input.expect("requested"))
}

fn block_forward<T: Scalar>(w: &Weights<T>, prefix: &str, input: Array3<T>) -> Result<BlockTrace<T>> {
    let mut mid = conv_layer(w, &format!("{prefix}.conv1"), input.view())?;
    ops::relu_inplace(&mut mid);
    let mut out = conv_layer(w, &format!("{prefix}.conv2"), mid.view())?;
    ops::relu_inplace(&mut out);
    Ok(BlockTrace { input, mid, out })
}

fn block_backward<T: Scalar>(
    w: &Weights<T>,
    prefix: &str,
    trace: &BlockTrace<T>,
    grad_out: Array3<T>,
    grads: &mut Weights<T>,
    need_input: bool,
) -> Result<Option<Array3<T>>> {
    let g = ops::relu_backward(trace.out.view(), grad_out);
    let g_mid = conv_layer_backward(w, &format!("{prefix}.conv2"), trace.mid.view(), g.view(), grads, true)?
        .expect("requested");
    let g_mid = ops::relu_backward(trace.mid.view(), g_mid);
    conv_layer_backward(w, &format!("{prefix}.conv1"), trace.input.view(), g_mid.view(), grads, need_input)
}

struct EncoderTrace<T> {
    blocks: Vec<BlockTrace<T>>,
}

impl<T: Scalar> EncoderTrace<T> {
    fn bottleneck(&self) -> &Array3<T> {
        &self.blocks[4].out
    }

    fn skip(&self, k: usize) -> &Array3<T> {
        &self.blocks[k].out
    }
}

fn encoder_forward<T: Scalar>(arch: &Architecture, w: &Weights<T>, image: ArrayView3<T>) -> Result<EncoderTrace<T>> {
    let (c, h, wd) = image.dim();
    let size = arch.config.input_size;
    if c != 3 || h != size || wd != size {
        return Err(Error::Shape(format!(
            "expected a 3x{size}x{size} image, got {c}x{h}x{wd}"
        )));
    }
    let mut blocks: Vec<BlockTrace<T>> = Vec::with_capacity(5);
    let mut x = image.to_owned();
    for i in 0..5 {
        let trace = block_forward(w, &format!("encoder.block{}", i + 1), x)?;
        x = if i < 4 {
            ops::max_pool2(trace.out.view())
        } else {
            Array3::zeros((0, 0, 0))
        };
        blocks.push(trace);
    }
    Ok(EncoderTrace { blocks })
}

fn encoder_backward<T: Scalar>(
    trace: &EncoderTrace<T>,
    w: &Weights<T>,
    grad_bottleneck: Array3<T>,
    mut grad_skips: Vec<Option<Array3<T>>>,
    grads: &mut Weights<T>,
) -> Result<()> {
    let mut g = grad_bottleneck;
    for k in (0..5).rev() {
        let g_in = block_backward(w, &format!("encoder.block{}", k + 1), &trace.blocks[k], g, grads, k > 0)?;
        if k == 0 {
            break;
        }
        let g_in = g_in.expect("requested");
        let mut g_prev = ops::max_pool2_backward(trace.blocks[k - 1].out.view(), g_in.view());
        if let Some(gs) = grad_skips[k - 1].take() {
            g_prev += &gs;
        }
        g = g_prev;
    }
    Ok(())
}

/// Shared-encoder pass: bottleneck `F` plus the four pre-pool skip features.
pub fn encode<T: Scalar>(
    arch: &Architecture,
    w: &Weights<T>,
    image: ArrayView3<T>,
) -> Result<(FeatureMap<T>, Vec<FeatureMap<T>>)> {
    let trace = encoder_forward(arch, w, image)?;
    let mut blocks = trace.blocks;
    let bottleneck = FeatureMap {
        values: blocks.pop().expect("five blocks").out,
        stage: Stage::Encoder(4),
    };
    let skips = blocks
        .into_iter()
        .enumerate()
        .map(|(k, b)| FeatureMap {
            values: b.out,
            stage: Stage::Encoder(k),
        })
        .collect();
    Ok((bottleneck, skips))
}

struct ProjTrace<T> {
    /// Inputs to reduce1, reduce2, fc1, fc2, fc3.
    inputs: Vec<Array3<T>>,
}

const PROJ_LAYERS: [&str; 5] = ["reduce1", "reduce2", "fc1", "fc2", "fc3"];

fn proj_forward<T: Scalar>(w: &Weights<T>, prefix: &str, f_branch: &Array3<T>) -> Result<(Array2<T>, ProjTrace<T>)> {
    let (_, h, wd) = f_branch.dim();
    let mut inputs = Vec::with_capacity(5);
    let mut x = f_branch.clone();
    for (i, layer) in PROJ_LAYERS.iter().enumerate() {
        let name = format!("{prefix}.proj.{layer}");
        let mut y = if i < 2 {
            conv_layer(w, &name, x.view())?
        } else {
            dense_layer(w, &name, x.view())?
        };
        if i < 4 {
            ops::relu_inplace(&mut y);
        }
        inputs.push(std::mem::replace(&mut x, y));
    }
    let d = x.dim().0;
    let emb = ops::standard(x)
        .into_shape_with_order((d, h * wd))
        .expect("contiguous")
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    Ok((emb, ProjTrace { inputs }))
}

fn proj_backward<T: Scalar>(
    w: &Weights<T>,
    prefix: &str,
    trace: &ProjTrace<T>,
    grad_emb: &Array2<T>,
    grads: &mut Weights<T>,
) -> Result<Array3<T>> {
    let (_, h, wd) = trace.inputs[0].dim();
    let d = grad_emb.dim().1;
    let mut g = grad_emb
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((d, h, wd))
        .expect("contiguous");
    for i in (0..5).rev() {
        let name = format!("{prefix}.proj.{}", PROJ_LAYERS[i]);
        if i < 4 {
            // output of layer i is the input of layer i + 1
            g = ops::relu_backward(trace.inputs[i + 1].view(), g);
        }
        g = if i < 2 {
            conv_layer_backward(w, &name, trace.inputs[i].view(), g.view(), grads, true)?.expect("requested")
        } else {
            dense_layer_backward(w, &name, trace.inputs[i].view(), g.view(), grads)?
        };
    }
    Ok(g)
}

/// Projection head on a branch-entry feature map: two 1x1 channel reductions
/// then three per-pixel fully connected layers, ReLU between, linear output.
pub fn project_embeddings<T: Scalar>(w: &Weights<T>, branch: Branch, f_branch: &FeatureMap<T>) -> Result<Array2<T>> {
    proj_forward(w, branch.prefix(), &f_branch.values).map(|(e, _)| e)
}

struct DecoderTrace<T> {
    entry: Option<BlockTrace<T>>,
    proj: Option<ProjTrace<T>>,
    stages: Vec<(usize, BlockTrace<T>)>,
}

impl<T> DecoderTrace<T> {
    fn final_features(&self) -> &Array3<T> {
        &self.stages.last().expect("four stages").1.out
    }
}

struct DecoderOut<T> {
    mask_logits: Array3<T>,
    boundary_logits: Option<Array3<T>>,
    embeddings: Option<Array2<T>>,
}

fn decoder_forward<T: Scalar>(
    arch: &Architecture,
    w: &Weights<T>,
    prefix: &str,
    enc: &EncoderTrace<T>,
    heads: HeadMode,
) -> Result<(DecoderOut<T>, DecoderTrace<T>)> {
    let all = heads == HeadMode::All;
    let (entry, mut x) = if arch.decomposed() {
        let t = block_forward(w, &format!("{prefix}.entry"), enc.bottleneck().clone())?;
        let out = t.out.clone();
        (Some(t), out)
    } else {
        (None, enc.bottleneck().clone())
    };
    let (embeddings, proj) = if all && arch.decomposed() && arch.has_projection() {
        let (e, t) = proj_forward(w, prefix, &x)?;
        (Some(e), Some(t))
    } else {
        (None, None)
    };
    let mut stages = Vec::with_capacity(4);
    for stage in 0..4 {
        let up = ops::upsample_bilinear2(x.view());
        let up_ch = up.dim().0;
        let input = if arch.config.use_skip_connections {
            ops::concat_channels(up.view(), enc.skip(3 - stage).view())
        } else {
            up
        };
        let t = block_forward(w, &format!("{prefix}.up{}", stage + 1), input)?;
        x = t.out.clone();
        stages.push((up_ch, t));
    }
    let mask_logits = conv_layer(w, &format!("{prefix}.mask_head"), x.view())?;
    let boundary_logits = if all && arch.decomposed() && arch.has_boundary() {
        Some(conv_layer(w, &format!("{prefix}.boundary_head"), x.view())?)
    } else {
        None
    };
    Ok((
        DecoderOut {
            mask_logits,
            boundary_logits,
            embeddings,
        },
        DecoderTrace { entry, proj, stages },
    ))
}

/// Upstream gradients for one decoder's outputs.
#[derive(Debug, Clone)]
pub struct DecoderGrads<T> {
    pub mask_logits: Array3<T>,
    pub boundary_logits: Option<Array3<T>>,
    pub embeddings: Option<Array2<T>>,
    /// Keep the projection head's gradient out of the branch-entry features.
    pub detach_embeddings: bool,
}

fn decoder_backward<T: Scalar>(
    arch: &Architecture,
    w: &Weights<T>,
    prefix: &str,
    trace: &DecoderTrace<T>,
    og: &DecoderGrads<T>,
    grad_skips: &mut [Option<Array3<T>>],
    grads: &mut Weights<T>,
) -> Result<Array3<T>> {
    let feats = trace.final_features();
    let mut g = conv_layer_backward(w, &format!("{prefix}.mask_head"), feats.view(), og.mask_logits.view(), grads, true)?
        .expect("requested");
    if let Some(gb) = &og.boundary_logits {
        let gi = conv_layer_backward(w, &format!("{prefix}.boundary_head"), feats.view(), gb.view(), grads, true)?
            .expect("requested");
        g += &gi;
    }
    for stage in (0..4).rev() {
        let (up_ch, t) = &trace.stages[stage];
        let g_in = block_backward(w, &format!("{prefix}.up{}", stage + 1), t, g, grads, true)?.expect("requested");
        let g_up = if arch.config.use_skip_connections {
            let gs = g_in.slice(s![*up_ch.., .., ..]).to_owned();
            let slot = &mut grad_skips[3 - stage];
            match slot {
                Some(acc) => *acc += &gs,
                None => *slot = Some(gs),
            }
            g_in.slice(s![..*up_ch, .., ..]).to_owned()
        } else {
            g_in
        };
        g = ops::upsample_bilinear2_backward(g_up.view());
    }
    if let (Some(ge), Some(pt)) = (&og.embeddings, &trace.proj) {
        let gp = proj_backward(w, prefix, pt, ge, grads)?;
        if !og.detach_embeddings {
            g += &gp;
        }
    }
    match &trace.entry {
        Some(et) => Ok(block_backward(w, &format!("{prefix}.entry"), et, g, grads, true)?.expect("requested")),
        None => Ok(g),
    }
}

/// Intermediate activations of one forward pass, consumed by [`backward`].
pub struct Trace<T> {
    encoder: EncoderTrace<T>,
    decoders: Vec<DecoderTrace<T>>,
}

fn run<T: Scalar>(
    arch: &Architecture,
    w: &Weights<T>,
    image: ArrayView3<T>,
    heads: HeadMode,
) -> Result<(NetworkOutput<T>, Trace<T>)> {
    let enc = encoder_forward(arch, w, image)?;
    let mut outs = Vec::new();
    let mut traces = Vec::new();
    for prefix in arch.decoder_prefixes() {
        let (o, t) = decoder_forward(arch, w, prefix, &enc, heads)?;
        outs.push(o);
        traces.push(t);
    }
    let output = if arch.decomposed() {
        let plaque = outs.pop().expect("plaque");
        let teeth = outs.pop().expect("teeth");
        let conv = |o: DecoderOut<T>| BranchOutputs {
            mask_logits: o.mask_logits,
            boundary_logits: o.boundary_logits,
            embeddings: o.embeddings,
        };
        NetworkOutput::Decomposed(ForwardResult {
            teeth: conv(teeth),
            plaque: conv(plaque),
        })
    } else {
        NetworkOutput::Joint(outs.pop().expect("joint").mask_logits)
    };
    Ok((output, Trace { encoder: enc, decoders: traces }))
}

/// Forward pass evaluating every head the architecture defines.
pub fn forward<T: Scalar>(arch: &Architecture, w: &Weights<T>, image: ArrayView3<T>) -> Result<NetworkOutput<T>> {
    run(arch, w, image, HeadMode::All).map(|(o, _)| o)
}

/// Forward pass with the given head selection.
pub fn forward_with<T: Scalar>(
    arch: &Architecture,
    w: &Weights<T>,
    image: ArrayView3<T>,
    heads: HeadMode,
) -> Result<NetworkOutput<T>> {
    run(arch, w, image, heads).map(|(o, _)| o)
}

/// Forward pass that keeps the activations needed for [`backward`].
pub fn forward_train<T: Scalar>(
    arch: &Architecture,
    w: &Weights<T>,
    image: ArrayView3<T>,
) -> Result<(NetworkOutput<T>, Trace<T>)> {
    run(arch, w, image, HeadMode::All)
}

/// Per-sample forward over a `[N, 3, H, W]` batch. Samples are independent, so
/// the result equals calling [`forward`] on each image.
pub fn forward_batch<T: Scalar>(
    arch: &Architecture,
    w: &Weights<T>,
    images: ndarray::ArrayView4<T>,
    heads: HeadMode,
) -> Result<Vec<NetworkOutput<T>>> {
    let n = images.dim().0;
    (0..n)
        .into_par_iter()
        .map(|i| forward_with(arch, w, images.index_axis(ndarray::Axis(0), i), heads))
        .collect()
}

/// Gradients of some scalar objective with respect to the network outputs.
#[derive(Debug, Clone)]
pub enum OutputGrads<T> {
    Decomposed {
        teeth: DecoderGrads<T>,
        plaque: DecoderGrads<T>,
    },
    Joint(Array3<T>),
}

/// Backpropagate output gradients to every parameter. Parameters outside the
/// active path get zero gradients, so the result has the same keys as `w`.
pub fn backward<T: Scalar>(
    arch: &Architecture,
    w: &Weights<T>,
    trace: &Trace<T>,
    grads_out: &OutputGrads<T>,
) -> Result<Weights<T>> {
    let mut grads = Weights::new();
    let mut grad_skips: Vec<Option<Array3<T>>> = vec![None, None, None, None];
    let mut grad_f: Option<Array3<T>> = None;
    let mut add_f = |g: Array3<T>| match &mut grad_f {
        Some(acc) => *acc += &g,
        None => grad_f = Some(g),
    };
    match grads_out {
        OutputGrads::Decomposed { teeth, plaque } => {
            if !arch.decomposed() {
                return Err(Error::Invalid("decomposed gradients for a joint network".into()));
            }
            for (i, (b, og)) in [(Branch::Teeth, teeth), (Branch::Plaque, plaque)].into_iter().enumerate() {
                let g = decoder_backward(arch, w, b.prefix(), &trace.decoders[i], og, &mut grad_skips, &mut grads)?;
                add_f(g);
            }
        }
        OutputGrads::Joint(g) => {
            if arch.decomposed() {
                return Err(Error::Invalid("joint gradients for a decomposed network".into()));
            }
            let og = DecoderGrads {
                mask_logits: g.clone(),
                boundary_logits: None,
                embeddings: None,
                detach_embeddings: false,
            };
            let gf = decoder_backward(arch, w, JOINT_PREFIX, &trace.decoders[0], &og, &mut grad_skips, &mut grads)?;
            add_f(gf);
        }
    }
    let gf = grad_f.expect("at least one decoder");
    encoder_backward(&trace.encoder, w, gf, grad_skips, &mut grads)?;
    let mut full = w.zeros_like();
    for (name, g) in grads.iter() {
        full.accumulate(name, g.view());
    }
    Ok(full)
}

/// Whether a parameter belongs to a head that inference never evaluates.
pub fn is_auxiliary_param(name: &str) -> bool {
    name.contains(".proj.") || name.contains(".boundary_head.")
}

/// View helper: `[C, H, W]` slice of a dynamic tensor.
pub fn as_chw<T: Scalar>(t: ArrayViewD<'_, T>) -> Result<ArrayView3<'_, T>> {
    t.into_dimensionality().map_err(|e| Error::Shape(e.to_string()))
}
