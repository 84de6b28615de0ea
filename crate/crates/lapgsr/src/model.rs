//! The fusion network: three residual translation branches over pyramid
//! levels, a patch discriminator for adversarial training, parameter/FLOP
//! accounting, and the checkpoint format.
//!
//! Architecture overview (C = image channels, quarter -> full resolution):
//!
//! * LTB (low branch) reads the thermal residual slot L1, passes it through
//!   a narrow stem with instance normalization, residual blocks at width
//!   `width_ltb`, and a projection back to C channels; the result gates L1
//!   multiplicatively. No output nonlinearity.
//! * MTB (middle branch) reads concat(up2(LTB out), L2) and emits a tanh
//!   band correction at half resolution.
//! * HTB (high branch) reads concat(up2(MTB out), L3), adds the L3 skip,
//!   and applies tanh.
//!
//! Collapsing the three translated levels (see the pyramid module) yields
//! the super-resolved image. Every convolution is 3x3/stride-1/same-padding;
//! parameters live in a flat, stably named registry so checkpoints and the
//! optimizer address them by name.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pyramid;
use crate::tensor::{kaiming_init, AdamState, Pad, Rng, Scale, Shape, Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Negative-side slope for every leaky ReLU in the network.
pub const LEAKY_SLOPE: f32 = 0.2;
/// Instance-normalization variance floor.
pub const IN_EPS: f32 = 1e-5;
/// Fixed super-resolution factor.
pub const SCALE: usize = 4;

fn default_blocks_ltb() -> usize {
    2
}
fn default_blocks_mtb() -> usize {
    3
}
fn default_blocks_htb() -> usize {
    3
}
fn default_width_wide() -> usize {
    64
}
fn default_width_htb() -> usize {
    12
}
fn default_channels() -> usize {
    1
}
fn default_scale() -> usize {
    SCALE
}

/// Shape of the generator: residual-block counts and channel widths per
/// branch. `(2, 3, 3)` at widths `(64, 64, 12)` on single-channel data is
/// the reference configuration.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_blocks_ltb")]
    pub blocks_ltb: usize,
    #[serde(default = "default_blocks_mtb")]
    pub blocks_mtb: usize,
    #[serde(default = "default_blocks_htb")]
    pub blocks_htb: usize,
    #[serde(default = "default_width_wide")]
    pub width_ltb: usize,
    #[serde(default = "default_width_wide")]
    pub width_mtb: usize,
    #[serde(default = "default_width_htb")]
    pub width_htb: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_scale")]
    pub scale: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            blocks_ltb: default_blocks_ltb(),
            blocks_mtb: default_blocks_mtb(),
            blocks_htb: default_blocks_htb(),
            width_ltb: default_width_wide(),
            width_mtb: default_width_wide(),
            width_htb: default_width_htb(),
            channels: default_channels(),
            scale: default_scale(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |why: String| Err(Error::Config { why });
        if self.blocks_ltb < 1 || self.blocks_mtb < 1 || self.blocks_htb < 1 {
            return fail(format!(
                "block counts must be at least 1, got ({}, {}, {})",
                self.blocks_ltb, self.blocks_mtb, self.blocks_htb
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        let wmin = self.width_ltb.min(self.width_mtb).min(self.width_htb);
        if wmin < self.channels {
            return fail(format!(
                "branch widths ({}, {}, {}) must be at least the channel count {}",
                self.width_ltb, self.width_mtb, self.width_htb, self.channels
            ));
        }
        if self.scale != SCALE {
            return fail(format!("scale is fixed at {SCALE}, got {}", self.scale));
        }
        Ok(())
    }

    /// Width of the LTB entry convolution: half the branch width. The stem
    /// then widens to `width_ltb` before the residual blocks.
    pub fn stem_width(&self) -> usize {
        (self.width_ltb / 2).max(1)
    }

    /// Short identity string for logs and reports.
    pub fn fingerprint(&self) -> String {
        format!(
            "blocks({},{},{})-widths({},{},{})-c{}-x{}",
            self.blocks_ltb,
            self.blocks_mtb,
            self.blocks_htb,
            self.width_ltb,
            self.width_mtb,
            self.width_htb,
            self.channels,
            self.scale
        )
    }
}

/// Resolution a convolution runs at, relative to the high-resolution output.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum BranchRes {
    Quarter,
    Half,
    Full,
}

impl BranchRes {
    fn divisor(self) -> usize {
        match self {
            BranchRes::Quarter => 4,
            BranchRes::Half => 2,
            BranchRes::Full => 1,
        }
    }
}

/// One convolution slot in a network plan.
struct ConvSpec {
    name: String,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: Pad,
    res: BranchRes,
}

impl ConvSpec {
    fn params(&self) -> usize {
        self.out_c * (self.in_c * self.k * self.k) + self.out_c
    }
}

/// Canonical generator layer order. Forward evaluation, initialization,
/// checkpoints, and optimizer slots all follow this single enumeration.
fn generator_plan(cfg: &GeneratorConfig) -> Vec<ConvSpec> {
    use BranchRes::*;
    let c = cfg.channels;
    let (wl, wm, wh) = (cfg.width_ltb, cfg.width_mtb, cfg.width_htb);
    let mut plan: Vec<ConvSpec> = Vec::new();
    let mut conv = |name: String, in_c: usize, out_c: usize, res: BranchRes| {
        plan.push(ConvSpec {
            name,
            in_c,
            out_c,
            k: 3,
            stride: 1,
            pad: Pad::same(1),
            res,
        });
    };
    conv("ltb.stem0".into(), c, cfg.stem_width(), Quarter);
    conv("ltb.stem1".into(), cfg.stem_width(), wl, Quarter);
    for i in 0..cfg.blocks_ltb {
        conv(format!("ltb.block{i}.conv0"), wl, wl, Quarter);
        conv(format!("ltb.block{i}.conv1"), wl, wl, Quarter);
    }
    conv("ltb.out".into(), wl, c, Quarter);
    conv("mtb.in".into(), 2 * c, wm, Half);
    for i in 0..cfg.blocks_mtb {
        conv(format!("mtb.block{i}.conv0"), wm, wm, Half);
        conv(format!("mtb.block{i}.conv1"), wm, wm, Half);
    }
    conv("mtb.out".into(), wm, c, Half);
    conv("htb.in".into(), 2 * c, wh, Full);
    for i in 0..cfg.blocks_htb {
        conv(format!("htb.block{i}.conv0"), wh, wh, Full);
        conv(format!("htb.block{i}.conv1"), wh, wh, Full);
    }
    conv("htb.out".into(), wh, c, Full);
    plan
}

/// Patch discriminator layer order: three stride-2 stages then a stride-1
/// head. The head pads asymmetrically so its even kernel preserves extents.
fn discriminator_plan(channels: usize) -> Vec<ConvSpec> {
    let stage = |name: &str, in_c: usize, out_c: usize, stride: usize, pad: Pad| ConvSpec {
        name: name.into(),
        in_c,
        out_c,
        k: 4,
        stride,
        pad,
        res: BranchRes::Full,
    };
    vec![
        stage("in", channels, 32, 2, Pad::same(1)),
        stage("mid0", 32, 64, 2, Pad::same(1)),
        stage("mid1", 64, 128, 2, Pad::same(1)),
        stage(
            "out",
            128,
            1,
            1,
            Pad {
                top: 1,
                bottom: 2,
                left: 1,
                right: 2,
            },
        ),
    ]
}

/// Exact number of generator weights and biases for a configuration. The
/// training-time discriminator is not included.
pub fn count_params(cfg: &GeneratorConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(generator_plan(cfg).iter().map(ConvSpec::params).sum())
}

/// Forward GFLOPs for one image at the given high-resolution extents.
/// Convention: convolutions only, one multiply-accumulate = 2 ops, each
/// branch at its native resolution (quarter, half, full).
pub fn estimate_flops(cfg: &GeneratorConfig, hr_w: usize, hr_h: usize) -> Result<f64> {
    cfg.validate()?;
    if hr_w == 0 || hr_h == 0 || hr_w % 4 != 0 || hr_h % 4 != 0 {
        return Err(Error::Config {
            why: format!("extents {hr_w}x{hr_h} must be positive and divisible by 4"),
        });
    }
    let total: f64 = generator_plan(cfg)
        .iter()
        .map(|s| {
            let d = s.res.divisor();
            let area = (hr_w / d) as f64 * (hr_h / d) as f64;
            2.0 * (s.k * s.k * s.in_c * s.out_c) as f64 * area
        })
        .sum();
    Ok(total / 1e9)
}

/// A named convolution's parameters plus its geometry.
pub(crate) struct ConvParam {
    pub name: String,
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: Pad,
}

/// Tape handles for one bound convolution.
#[derive(Clone, Copy)]
pub struct BoundConv {
    w: TensorId,
    b: TensorId,
    stride: usize,
    pad: Pad,
}

impl BoundConv {
    /// Tape id of the weight tensor (gradient lookup after backward).
    pub fn weight_id(&self) -> TensorId {
        self.w
    }

    /// Tape id of the bias tensor.
    pub fn bias_id(&self) -> TensorId {
        self.b
    }
}

fn init_convs(plan: &[ConvSpec], rng: &mut Rng) -> Result<Vec<ConvParam>> {
    plan.iter()
        .map(|s| {
            let shape = Shape::new(s.out_c, s.in_c, s.k, s.k);
            let fan_in = s.in_c * s.k * s.k;
            Ok(ConvParam {
                name: s.name.clone(),
                w: kaiming_init(shape, fan_in, LEAKY_SLOPE, rng)?,
                b: Tensor::zeros(Shape::new(1, s.out_c, 1, 1)),
                stride: s.stride,
                pad: s.pad,
            })
        })
        .collect()
}

fn bind_convs(convs: &[ConvParam], tape: &mut Tape, trainable: bool) -> Vec<BoundConv> {
    convs
        .iter()
        .map(|c| BoundConv {
            w: tape.leaf(c.w.clone(), trainable),
            b: tape.leaf(c.b.clone(), trainable),
            stride: c.stride,
            pad: c.pad,
        })
        .collect()
}

/// Interleaved parameter buffer sizes (w0, b0, w1, b1, ...) for optimizer
/// state construction.
fn conv_sizes(convs: &[ConvParam]) -> Vec<usize> {
    convs
        .iter()
        .flat_map(|c| [c.w.data.len(), c.b.data.len()])
        .collect()
}

/// One Adam step over every bound convolution, consuming gradients left on
/// the tape by `backward`.
fn adam_step_convs(
    convs: &mut [ConvParam],
    tape: &Tape,
    bound: &[BoundConv],
    adam: &mut AdamState,
    lr: f32,
) -> Result<()> {
    adam.begin_step();
    for (i, (cp, bc)) in convs.iter_mut().zip(bound).enumerate() {
        let gw = tape.grad(bc.w).ok_or_else(|| Error::Invalid {
            op: "adam_step",
            why: format!("no gradient for {}.w", cp.name),
        })?;
        adam.update(2 * i, &mut cp.w.data, gw, lr);
        let gb = tape.grad(bc.b).ok_or_else(|| Error::Invalid {
            op: "adam_step",
            why: format!("no gradient for {}.b", cp.name),
        })?;
        adam.update(2 * i + 1, &mut cp.b.data, gb, lr);
    }
    Ok(())
}

fn check_finite(tape: &Tape, id: TensorId, site: &str) -> Result<()> {
    if tape.tensor(id).is_all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { site: site.into() })
    }
}

/// Node handles for one generator forward pass: the clamped prediction `y`,
/// its unclamped form, and the three translated pyramid levels.
pub struct GenOutputs {
    pub y: TensorId,
    pub y_raw: TensorId,
    pub i_l: TensorId,
    pub i_m: TensorId,
    pub i_h: TensorId,
}

pub struct Generator {
    cfg: GeneratorConfig,
    convs: Vec<ConvParam>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let convs = init_convs(&generator_plan(&cfg), rng)?;
        Ok(Generator { cfg, convs })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.w.data.len() + c.b.data.len()).sum()
    }

    /// Optimizer state sized for this generator.
    pub fn adam_state(&self) -> AdamState {
        AdamState::new(&conv_sizes(&self.convs))
    }

    /// Stable (name, tensor) enumeration: `<conv>.w` then `<conv>.b` in plan
    /// order.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.convs.iter().flat_map(|c| {
            [
                (format!("{}.w", c.name), &c.w),
                (format!("{}.b", c.name), &c.b),
            ]
        })
    }

    /// Insert every parameter into a tape; `trainable` controls whether the
    /// subsequent backward pass accumulates gradients for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundConv> {
        bind_convs(&self.convs, tape, trainable)
    }

    pub fn adam_step(
        &mut self,
        tape: &Tape,
        bound: &[BoundConv],
        adam: &mut AdamState,
        lr: f32,
    ) -> Result<()> {
        adam_step_convs(&mut self.convs, tape, bound, adam, lr)
    }

    fn conv(
        &self,
        tape: &mut Tape,
        bound: &[BoundConv],
        cur: &mut usize,
        x: TensorId,
    ) -> Result<TensorId> {
        let bc = bound[*cur];
        *cur += 1;
        tape.conv2d_padded(x, bc.w, bc.b, bc.stride, bc.pad)
    }

    fn res_block(
        &self,
        tape: &mut Tape,
        bound: &[BoundConv],
        cur: &mut usize,
        x: TensorId,
    ) -> Result<TensorId> {
        let mut t = self.conv(tape, bound, cur, x)?;
        t = tape.leaky_relu(t, LEAKY_SLOPE);
        t = self.conv(tape, bound, cur, t)?;
        tape.add(t, x)
    }

    /// Run the three branches over pyramid-level nodes already on the tape
    /// and collapse in-graph. `high`/`mid`/`low` extents must chain by
    /// factors of 2 and carry the configured channel count.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[BoundConv],
        high: TensorId,
        mid: TensorId,
        low: TensorId,
    ) -> Result<GenOutputs> {
        let (sh, sm, sl) = (tape.shape(high), tape.shape(mid), tape.shape(low));
        let c = self.cfg.channels;
        if sh.c != c || sm.c != c || sl.c != c || sh.b != sl.b || sm.b != sl.b {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                a: sh,
                b: sl,
            });
        }
        if sh.h != 4 * sl.h || sh.w != 4 * sl.w || sm.h != 2 * sl.h || sm.w != 2 * sl.w {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                a: sh,
                b: sl,
            });
        }
        for (id, site) in [(high, "input level 3"), (mid, "input level 2"), (low, "input level 1")] {
            check_finite(tape, id, site)?;
        }
        debug_assert_eq!(bound.len(), self.convs.len());
        let mut cur = 0usize;

        // Low branch: stem, residual blocks, projection, multiplicative gate.
        let mut x = self.conv(tape, bound, &mut cur, low)?;
        x = tape.instance_norm(x, IN_EPS);
        x = tape.leaky_relu(x, LEAKY_SLOPE);
        x = self.conv(tape, bound, &mut cur, x)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE);
        for _ in 0..self.cfg.blocks_ltb {
            x = self.res_block(tape, bound, &mut cur, x)?;
        }
        x = self.conv(tape, bound, &mut cur, x)?;
        let i_l = tape.mul(x, low)?;
        check_finite(tape, i_l, "ltb output")?;

        // Middle branch over concat(up2(low result), mid band).
        let up_l = tape.bicubic_resize(i_l, Scale::Up2)?;
        let mut x = tape.concat_channels(up_l, mid)?;
        x = self.conv(tape, bound, &mut cur, x)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE);
        for _ in 0..self.cfg.blocks_mtb {
            x = self.res_block(tape, bound, &mut cur, x)?;
        }
        x = self.conv(tape, bound, &mut cur, x)?;
        let i_m = tape.tanh(x);
        check_finite(tape, i_m, "mtb output")?;

        // High branch over concat(up2(mid result), high band), additive skip.
        let up_m = tape.bicubic_resize(i_m, Scale::Up2)?;
        let mut x = tape.concat_channels(up_m, high)?;
        x = self.conv(tape, bound, &mut cur, x)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE);
        for _ in 0..self.cfg.blocks_htb {
            x = self.res_block(tape, bound, &mut cur, x)?;
        }
        x = self.conv(tape, bound, &mut cur, x)?;
        x = tape.add(x, high)?;
        let i_h = tape.tanh(x);
        check_finite(tape, i_h, "htb output")?;
        debug_assert_eq!(cur, bound.len());

        // Collapse: y = i_h + up2(i_m + up2(i_l)); up2(i_l) is reused from
        // the middle-branch entry.
        let sum_m = tape.add(i_m, up_l)?;
        let up_sum = tape.bicubic_resize(sum_m, Scale::Up2)?;
        let y_raw = tape.add(i_h, up_sum)?;
        check_finite(tape, y_raw, "collapse")?;
        let y = tape.clamp01(y_raw);
        Ok(GenOutputs {
            y,
            y_raw,
            i_l,
            i_m,
            i_h,
        })
    }

    /// Untracked end-to-end prediction from a guide/thermal pair: build the
    /// modified pyramid, run the branches, return the clamped image.
    pub fn infer(&self, guide: &Tensor, thermal_lr: &Tensor) -> Result<Tensor> {
        let p = pyramid::build_modified(guide, thermal_lr)?;
        let mut tape = Tape::new();
        let high = tape.constant(p.high);
        let mid = tape.constant(p.mid);
        let low = tape.constant(p.low);
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, high, mid, low)?;
        Ok(tape.detach(out.y))
    }

    /// Serialize every parameter into a checkpoint under the `gen.` prefix.
    pub fn export_into(&self, ck: &mut Checkpoint) {
        for (name, t) in self.named_params() {
            ck.push(format!("gen.{name}"), t.clone());
        }
    }

    /// Rebuild from a checkpoint, validating every tensor's shape against
    /// the plan implied by the stored configuration.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.config;
        cfg.validate()?;
        let convs = convs_from_checkpoint(&generator_plan(&cfg), ck, "gen")?;
        Ok(Generator { cfg, convs })
    }
}

pub struct Discriminator {
    channels: usize,
    convs: Vec<ConvParam>,
}

impl Discriminator {
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config {
                why: format!("channels must be 1 or 3, got {channels}"),
            });
        }
        let convs = init_convs(&discriminator_plan(channels), rng)?;
        Ok(Discriminator { channels, convs })
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.w.data.len() + c.b.data.len()).sum()
    }

    pub fn adam_state(&self) -> AdamState {
        AdamState::new(&conv_sizes(&self.convs))
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.convs.iter().flat_map(|c| {
            [
                (format!("{}.w", c.name), &c.w),
                (format!("{}.b", c.name), &c.b),
            ]
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundConv> {
        bind_convs(&self.convs, tape, trainable)
    }

    pub fn adam_step(
        &mut self,
        tape: &Tape,
        bound: &[BoundConv],
        adam: &mut AdamState,
        lr: f32,
    ) -> Result<()> {
        adam_step_convs(&mut self.convs, tape, bound, adam, lr)
    }

    /// Score map for a full-resolution thermal-shaped input: three stride-2
    /// stages then a stride-1 head, instance norm on the middle stages, no
    /// output nonlinearity.
    pub fn forward(&self, tape: &mut Tape, bound: &[BoundConv], x: TensorId) -> Result<TensorId> {
        let s = tape.shape(x);
        if s.c != self.channels {
            return Err(Error::BadShape {
                op: "discriminator_forward",
                shape: s,
                why: format!("expected {} channels", self.channels),
            });
        }
        if s.h < 16 || s.w < 16 {
            return Err(Error::BadShape {
                op: "discriminator_forward",
                shape: s,
                why: "input extents must be at least 16".into(),
            });
        }
        let mut cur = 0usize;
        let conv = |tape: &mut Tape, cur: &mut usize, x: TensorId| -> Result<TensorId> {
            let bc = bound[*cur];
            *cur += 1;
            tape.conv2d_padded(x, bc.w, bc.b, bc.stride, bc.pad)
        };
        let mut t = conv(tape, &mut cur, x)?;
        t = tape.leaky_relu(t, LEAKY_SLOPE);
        t = conv(tape, &mut cur, t)?;
        t = tape.instance_norm(t, IN_EPS);
        t = tape.leaky_relu(t, LEAKY_SLOPE);
        t = conv(tape, &mut cur, t)?;
        t = tape.instance_norm(t, IN_EPS);
        t = tape.leaky_relu(t, LEAKY_SLOPE);
        t = conv(tape, &mut cur, t)?;
        check_finite(tape, t, "discriminator scores")?;
        Ok(t)
    }

    pub fn export_into(&self, ck: &mut Checkpoint) {
        for (name, t) in self.named_params() {
            ck.push(format!("disc.{name}"), t.clone());
        }
    }

    /// Rebuild from a checkpoint; absent `disc.*` entries are an error (use
    /// `has_discriminator` to probe first).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let channels = ck.config.channels;
        let convs = convs_from_checkpoint(&discriminator_plan(channels), ck, "disc")?;
        Ok(Discriminator { channels, convs })
    }
}

fn convs_from_checkpoint(plan: &[ConvSpec], ck: &Checkpoint, prefix: &str) -> Result<Vec<ConvParam>> {
    plan.iter()
        .map(|s| {
            let take = |suffix: &str, want: Shape| -> Result<Tensor> {
                let key = format!("{prefix}.{}.{suffix}", s.name);
                let t = ck.tensor(&key).ok_or_else(|| Error::Checkpoint {
                    path: ck.origin.clone(),
                    why: format!("missing tensor {key}"),
                })?;
                if t.shape != want {
                    return Err(Error::Checkpoint {
                        path: ck.origin.clone(),
                        why: format!("{key}: shape {} does not match config ({want})", t.shape),
                    });
                }
                Ok(t.clone())
            };
            Ok(ConvParam {
                name: s.name.clone(),
                w: take("w", Shape::new(s.out_c, s.in_c, s.k, s.k))?,
                b: take("b", Shape::new(1, s.out_c, 1, 1))?,
                stride: s.stride,
                pad: s.pad,
            })
        })
        .collect()
}

/// Training counters carried inside a checkpoint so a run can resume
/// exactly where it stopped.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub adam_g_steps: u64,
    pub adam_d_steps: u64,
    pub best_val_psnr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 4],
    /// Byte offset into the blob.
    offset: u64,
    /// Byte length.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    config: GeneratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<TrainMeta>,
    tensors: Vec<ManifestEntry>,
}

const CHECKPOINT_FORMAT: &str = "lapgsr-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// A set of named tensors plus the generator configuration, stored as a JSON
/// manifest (names, shapes, byte ranges) and a little-endian f32 blob next
/// to it. Load paths address the manifest file.
pub struct Checkpoint {
    pub config: GeneratorConfig,
    pub meta: Option<TrainMeta>,
    entries: Vec<(String, Tensor)>,
    origin: PathBuf,
}

impl Checkpoint {
    pub fn new(config: GeneratorConfig) -> Self {
        Checkpoint {
            config,
            meta: None,
            entries: Vec::new(),
            origin: PathBuf::new(),
        }
    }

    pub fn push(&mut self, name: String, t: Tensor) {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate checkpoint tensor {name}"
        );
        self.entries.push((name, t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Write `<path>` (JSON manifest) and the blob beside it with a `.bin`
    /// extension.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = manifest_path.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .ok_or_else(|| Error::Checkpoint {
                path: manifest_path.into(),
                why: "path has no file name".into(),
            })?
            .to_string_lossy()
            .into_owned();
        let mut blob: Vec<u8> = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let offset = blob.len() as u64;
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: [t.shape.b, t.shape.c, t.shape.h, t.shape.w],
                offset,
                len: (t.data.len() * 4) as u64,
            });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            blob: blob_name,
            config: self.config,
            meta: self.meta.clone(),
            tensors,
        };
        let mut f = fs::File::create(manifest_path).map_err(Error::io(manifest_path))?;
        serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| Error::Json {
            path: manifest_path.into(),
            source: e,
        })?;
        f.write_all(b"\n").map_err(Error::io(manifest_path))?;
        fs::write(&blob_path, &blob).map_err(Error::io(&blob_path))?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let bytes = fs::read(manifest_path).map_err(Error::io(manifest_path))?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: manifest_path.into(),
            source: e,
        })?;
        let fail = |why: String| Error::Checkpoint {
            path: manifest_path.into(),
            why,
        };
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(fail(format!("unknown format {:?}", manifest.format)));
        }
        if manifest.version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported version {}", manifest.version)));
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(Error::io(&blob_path))?;
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        let mut expected_end = 0u64;
        for e in &manifest.tensors {
            let shape = Shape::new(e.shape[0], e.shape[1], e.shape[2], e.shape[3]);
            if e.len as usize != shape.numel() * 4 {
                return Err(fail(format!(
                    "{}: byte length {} does not match shape {shape}",
                    e.name, e.len
                )));
            }
            if e.offset != expected_end {
                return Err(fail(format!("{}: non-contiguous blob offset", e.name)));
            }
            expected_end = e.offset + e.len;
            let range = blob
                .get(e.offset as usize..(e.offset + e.len) as usize)
                .ok_or_else(|| fail(format!("{}: blob range out of bounds", e.name)))?;
            let data: Vec<f32> = range
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((
                e.name.clone(),
                Tensor::new(shape, data).expect("length checked above"),
            ));
        }
        if expected_end != blob.len() as u64 {
            return Err(fail(format!(
                "blob has {} bytes, manifest accounts for {expected_end}",
                blob.len()
            )));
        }
        Ok(Checkpoint {
            config: manifest.config,
            meta: manifest.meta,
            entries,
            origin: manifest_path.into(),
        })
    }

    pub fn has_discriminator(&self) -> bool {
        self.names().any(|n| n.starts_with("disc."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(bl: usize, bm: usize, bh: usize) -> GeneratorConfig {
        GeneratorConfig {
            blocks_ltb: bl,
            blocks_mtb: bm,
            blocks_htb: bh,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        // Width-64 residual block: 2*(9*64^2 + 64); width-12: 2*(9*12^2 + 12).
        let base = count_params(&cfg(2, 3, 3)).unwrap();
        assert_eq!(count_params(&cfg(2, 4, 3)).unwrap() - base, 73_856);
        assert_eq!(count_params(&cfg(3, 3, 3)).unwrap() - base, 73_856);
        assert_eq!(count_params(&cfg(2, 3, 4)).unwrap() - base, 2_616);
        assert_eq!(base, 398_651);
    }

    #[test]
    fn param_count_matches_instantiated_model() {
        for c in [cfg(2, 3, 3), cfg(1, 1, 1), cfg(3, 5, 7)] {
            let mut rng = Rng::new(1);
            let g = Generator::new(c, &mut rng).unwrap();
            assert_eq!(g.param_count(), count_params(&c).unwrap());
        }
    }

    #[test]
    fn param_count_monotone_in_block_counts() {
        let base = count_params(&cfg(2, 3, 3)).unwrap();
        assert!(count_params(&cfg(3, 3, 3)).unwrap() > base);
        assert!(count_params(&cfg(2, 4, 3)).unwrap() > base);
        assert!(count_params(&cfg(2, 3, 4)).unwrap() > base);
    }

    #[test]
    fn flops_per_block_deltas() {
        let base = estimate_flops(&cfg(2, 3, 3), 320, 240).unwrap();
        let mtb = estimate_flops(&cfg(2, 4, 3), 320, 240).unwrap() - base;
        let htb = estimate_flops(&cfg(2, 3, 4), 320, 240).unwrap() - base;
        assert!((mtb - 2.831).abs() < 0.01, "mtb block delta {mtb}");
        assert!((htb - 0.398).abs() < 0.005, "htb block delta {htb}");
        assert!(estimate_flops(&cfg(2, 3, 3), 322, 240).is_err());
    }

    #[test]
    fn forward_shape_contract() {
        let mut rng = Rng::new(7);
        let g = Generator::new(cfg(1, 1, 1), &mut rng).unwrap();
        let guide_shape = Shape::new(1, 1, 32, 48);
        let guide = Tensor::new(
            guide_shape,
            (0..guide_shape.numel()).map(|i| (i % 97) as f32 / 96.0).collect(),
        )
        .unwrap();
        let thermal = Tensor::filled(Shape::new(1, 1, 8, 12), 0.4);
        let y = g.infer(&guide, &thermal).unwrap();
        assert_eq!(y.shape, guide_shape);
        assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_thermal_annihilates_low_branch() {
        let mut rng = Rng::new(9);
        let g = Generator::new(cfg(1, 1, 1), &mut rng).unwrap();
        let guide = Tensor::filled(Shape::new(1, 1, 32, 32), 0.5);
        let thermal = Tensor::zeros(Shape::new(1, 1, 8, 8));
        let p = crate::pyramid::build_modified(&guide, &thermal).unwrap();
        let mut tape = Tape::new();
        let high = tape.constant(p.high);
        let mid = tape.constant(p.mid);
        let low = tape.constant(p.low);
        let bound = g.bind(&mut tape, false);
        let out = g.forward(&mut tape, &bound, high, mid, low).unwrap();
        assert!(tape.data(out.i_l).iter().all(|&v| v == 0.0));
        // tanh outputs stay in [-1, 1].
        assert!(tape.data(out.i_m).iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(tape.data(out.i_h).iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn discriminator_score_map_extents() {
        let mut rng = Rng::new(3);
        let d = Discriminator::new(1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(Shape::new(1, 1, 120, 160), 0.5));
        let bound = d.bind(&mut tape, false);
        let s = d.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(s), Shape::new(1, 1, 15, 20));
        let tiny = tape.constant(Tensor::zeros(Shape::new(1, 1, 12, 40)));
        assert!(d.forward(&mut tape, &bound, tiny).is_err());
    }

    #[test]
    fn discriminator_input_gradient_is_finite() {
        let mut rng = Rng::new(4);
        let d = Discriminator::new(1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..32 * 32).map(|_| rng.uniform() as f32).collect();
        let x = tape.leaf(Tensor::new(Shape::new(1, 1, 32, 32), data).unwrap(), true);
        let bound = d.bind(&mut tape, false);
        let s = d.forward(&mut tape, &bound, x).unwrap();
        let loss = tape.mean_all(s);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(21);
        let g = Generator::new(cfg(1, 2, 1), &mut rng).unwrap();
        let d = Discriminator::new(1, &mut rng).unwrap();
        let mut ck = Checkpoint::new(*g.config());
        g.export_into(&mut ck);
        d.export_into(&mut ck);
        ck.meta = Some(TrainMeta {
            epoch: 3,
            global_step: 42,
            adam_g_steps: 42,
            adam_d_steps: 42,
            best_val_psnr: Some(31.5),
        });
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(loaded.has_discriminator());
        assert_eq!(loaded.meta.as_ref().unwrap().epoch, 3);
        let g2 = Generator::from_checkpoint(&loaded).unwrap();
        for ((n1, t1), (n2, t2)) in g.named_params().zip(g2.named_params()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data, t2.data, "{n1}");
        }
        let d2 = Discriminator::from_checkpoint(&loaded).unwrap();
        assert_eq!(d.param_count(), d2.param_count());
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(22);
        let g = Generator::new(cfg(1, 1, 1), &mut rng).unwrap();
        let mut ck = Checkpoint::new(GeneratorConfig {
            blocks_ltb: 2, // claims more blocks than the stored tensors
            ..*g.config()
        });
        g.export_into(&mut ck);
        let path = dir.path().join("bad.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(Generator::from_checkpoint(&loaded).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 1, 1).validate().is_err());
        assert!(GeneratorConfig {
            channels: 2,
            ..GeneratorConfig::default()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig {
            scale: 2,
            ..GeneratorConfig::default()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig::default().validate().is_ok());
        let j = r#"{"blocks_ltb": 3}"#;
        let c: GeneratorConfig = serde_json::from_str(j).unwrap();
        assert_eq!(c.blocks_ltb, 3);
        assert_eq!(c.blocks_mtb, 3);
        assert_eq!(c.width_htb, 12);
        assert!(serde_json::from_str::<GeneratorConfig>(r#"{"blocks": 3}"#).is_err());
    }
}
