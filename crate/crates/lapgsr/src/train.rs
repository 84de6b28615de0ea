//! Adversarial training: loss definitions, augmentation, patch sampling,
//! and the alternating generator/discriminator loop.
//!
//! Per batch the discriminator takes one Adam step on real HR patches vs
//! detached generator outputs, then the generator takes one step on the
//! weighted objective lambda * mse + adversarial, evaluated against the
//! just-updated (frozen) discriminator.
//!
//! Determinism: every random decision derives from the run seed. Epoch e
//! uses an independent stream forked as `seed ^ epoch-tag(e)`, consumed in
//! a fixed order (shuffle, then per sample: flips, shift, patch offsets),
//! so resuming from an epoch-boundary checkpoint replays the exact run.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, SamplePair};
use crate::metrics;
use crate::model::{
    Checkpoint, Discriminator, Generator, GeneratorConfig, TrainMeta,
};
use crate::pyramid;
use crate::tensor::{AdamState, Rng, Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Stream tags for deriving independent RNG sequences from the run seed.
const TAG_INIT_G: u64 = 0x696e_6974_2d67;
const TAG_INIT_D: u64 = 0x696e_6974_2d64;
const TAG_EPOCH: u64 = 0x65706f_6368 << 20;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanVariant {
    Lsgan,
    Vanilla,
    Wgan,
    Hinge,
}

impl std::str::FromStr for GanVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsgan" => Ok(GanVariant::Lsgan),
            "vanilla" => Ok(GanVariant::Vanilla),
            "wgan" => Ok(GanVariant::Wgan),
            "hinge" => Ok(GanVariant::Hinge),
            other => Err(Error::Config {
                why: format!("unknown gan variant {other:?} (lsgan|vanilla|wgan|hinge)"),
            }),
        }
    }
}

impl std::fmt::Display for GanVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GanVariant::Lsgan => "lsgan",
            GanVariant::Vanilla => "vanilla",
            GanVariant::Wgan => "wgan",
            GanVariant::Hinge => "hinge",
        })
    }
}

fn default_lambda() -> f32 {
    4500.0
}
fn default_lr() -> f32 {
    1e-4
}
fn default_batch() -> usize {
    12
}
fn default_epochs() -> usize {
    30
}
fn default_patch() -> [usize; 2] {
    [40, 30]
}
fn default_flip_prob() -> f64 {
    0.5
}
fn default_gan_variant() -> GanVariant {
    GanVariant::Lsgan
}
fn default_checkpoint_every() -> usize {
    10
}

/// Run configuration. JSON files mirror these field names ("λ" is accepted
/// as an alias for `lambda`); `lr_patch` is `[width, height]` in
/// low-resolution pixels.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda", alias = "λ")]
    pub lambda: f32,
    #[serde(default = "default_lr")]
    pub lr_g: f32,
    #[serde(default = "default_lr")]
    pub lr_d: f32,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_patch")]
    pub lr_patch: [usize; 2],
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    #[serde(default)]
    pub shift_limit: f64,
    #[serde(default = "default_gan_variant")]
    pub gan_variant: GanVariant,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub generator: GeneratorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |why: String| Err(Error::Config { why });
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob must be in [0,1], got {}", self.flip_prob));
        }
        if !(0.0..0.5).contains(&self.shift_limit) {
            return fail(format!("shift_limit must be in [0, 0.5), got {}", self.shift_limit));
        }
        if self.batch < 1 || self.epochs < 1 {
            return fail(format!(
                "batch ({}) and epochs ({}) must be at least 1",
                self.batch, self.epochs
            ));
        }
        if self.lr_patch[0] < 1 || self.lr_patch[1] < 1 {
            return fail(format!(
                "lr_patch {:?} must have positive extents",
                self.lr_patch
            ));
        }
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return fail(format!(
                "learning rates must be positive, got lr_g {} lr_d {}",
                self.lr_g, self.lr_d
            ));
        }
        if self.checkpoint_every < 1 {
            return fail("checkpoint_every must be at least 1".into());
        }
        self.generator.validate()
    }
}

/// Scalar loss values from one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub l_mse: f32,
    pub l_g_adv: f32,
    pub l_d: f32,
    pub l_total: f32,
}

// ---- losses ----------------------------------------------------------------

/// Generator adversarial loss over fake scores. lsgan: 0.5*mean((d-1)^2);
/// vanilla: non-saturating mean softplus(-d); wgan/hinge: -mean(d).
pub fn gan_g_loss(tape: &mut Tape, d_fake: TensorId, variant: GanVariant) -> Result<TensorId> {
    match variant {
        GanVariant::Lsgan => {
            let shifted = tape.affine(d_fake, 1.0, -1.0);
            let sq = tape.mul(shifted, shifted)?;
            let m = tape.mean_all(sq);
            Ok(tape.affine(m, 0.5, 0.0))
        }
        GanVariant::Vanilla => {
            let neg = tape.affine(d_fake, -1.0, 0.0);
            let sp = tape.softplus(neg);
            Ok(tape.mean_all(sp))
        }
        GanVariant::Wgan | GanVariant::Hinge => {
            let m = tape.mean_all(d_fake);
            Ok(tape.affine(m, -1.0, 0.0))
        }
    }
}

/// Discriminator loss over real and fake scores. lsgan:
/// 0.5*mean((d_real-1)^2) + 0.5*mean(d_fake^2); vanilla: softplus pair;
/// wgan: mean(d_fake) - mean(d_real); hinge: mean(relu(1-d_real)) +
/// mean(relu(1+d_fake)).
pub fn gan_d_loss(
    tape: &mut Tape,
    d_real: TensorId,
    d_fake: TensorId,
    variant: GanVariant,
) -> Result<TensorId> {
    match variant {
        GanVariant::Lsgan => {
            let r = tape.affine(d_real, 1.0, -1.0);
            let r2 = tape.mul(r, r)?;
            let mr = tape.mean_all(r2);
            let f2 = tape.mul(d_fake, d_fake)?;
            let mf = tape.mean_all(f2);
            let sum = tape.add(mr, mf)?;
            Ok(tape.affine(sum, 0.5, 0.0))
        }
        GanVariant::Vanilla => {
            let nr = tape.affine(d_real, -1.0, 0.0);
            let sr = tape.softplus(nr);
            let mr = tape.mean_all(sr);
            let sf = tape.softplus(d_fake);
            let mf = tape.mean_all(sf);
            tape.add(mr, mf)
        }
        GanVariant::Wgan => {
            let mf = tape.mean_all(d_fake);
            let mr = tape.mean_all(d_real);
            let nmr = tape.affine(mr, -1.0, 0.0);
            tape.add(mf, nmr)
        }
        GanVariant::Hinge => {
            let hr = tape.affine(d_real, -1.0, 1.0);
            let rr = tape.relu(hr);
            let mr = tape.mean_all(rr);
            let hf = tape.affine(d_fake, 1.0, 1.0);
            let rf = tape.relu(hf);
            let mf = tape.mean_all(rf);
            tape.add(mr, mf)
        }
    }
}

/// lambda * l_mse + l_g_adv.
pub fn combined_loss(
    tape: &mut Tape,
    l_mse: TensorId,
    l_g_adv: TensorId,
    lambda: f32,
) -> Result<TensorId> {
    let weighted = tape.affine(l_mse, lambda, 0.0);
    tape.add(weighted, l_g_adv)
}

// ---- augmentation and patching ----------------------------------------------

/// Flip the triple with one shared decision per axis: horizontal then
/// vertical, each drawn with probability `p`.
pub fn augment_flip(
    guide: &Tensor,
    thermal_lr: &Tensor,
    thermal_hr: &Tensor,
    p: f64,
    rng: &mut Rng,
) -> (Tensor, Tensor, Tensor) {
    let flip_h = rng.coin(p);
    let flip_v = rng.coin(p);
    let apply = |t: &Tensor| {
        let mut t = t.clone();
        if flip_h {
            t = t.flipped_h();
        }
        if flip_v {
            t = t.flipped_v();
        }
        t
    };
    (apply(guide), apply(thermal_lr), apply(thermal_hr))
}

/// Translate by whole pixels with replicate padding; positive dx moves
/// content right, positive dy moves it down.
fn shifted_replicate(t: &Tensor, dx: i64, dy: i64) -> Tensor {
    if dx == 0 && dy == 0 {
        return t.clone();
    }
    let s = t.shape;
    let mut data = vec![0.0f32; t.data.len()];
    for b in 0..s.b {
        for c in 0..s.c {
            for y in 0..s.h {
                let sy = (y as i64 - dy).clamp(0, s.h as i64 - 1) as usize;
                for x in 0..s.w {
                    let sx = (x as i64 - dx).clamp(0, s.w as i64 - 1) as usize;
                    data[s.index(b, c, y, x)] = t.data[s.index(b, c, sy, sx)];
                }
            }
        }
    }
    Tensor::new(s, data).expect("same extents")
}

/// Misalignment augmentation: translate the guide only, leaving both thermal
/// frames untouched. dx ~ U(-limit*W, limit*W) and dy ~ U(-limit*H,
/// limit*H), rounded to integer pixels, replicate-padded. 0 disables.
pub fn augment_shift(guide: &Tensor, shift_limit: f64, rng: &mut Rng) -> Tensor {
    if shift_limit <= 0.0 {
        return guide.clone();
    }
    let bx = shift_limit * guide.shape.w as f64;
    let by = shift_limit * guide.shape.h as f64;
    let dx = rng.uniform_in(-bx, bx).round() as i64;
    let dy = rng.uniform_in(-by, by).round() as i64;
    shifted_replicate(guide, dx, dy)
}

/// Crop an aligned patch triple: the low-resolution window is `patch_w x
/// patch_h` at a uniform offset, the guide/HR windows are the exactly
/// corresponding 4x regions.
pub fn sample_patches(
    guide: &Tensor,
    thermal_lr: &Tensor,
    thermal_hr: &Tensor,
    patch_w: usize,
    patch_h: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor, Tensor)> {
    let ls = thermal_lr.shape;
    if ls.w < patch_w || ls.h < patch_h {
        return Err(Error::BadShape {
            op: "sample_patches",
            shape: ls,
            why: format!("smaller than the {patch_w}x{patch_h} patch"),
        });
    }
    let y0 = rng.below(ls.h - patch_h + 1);
    let x0 = rng.below(ls.w - patch_w + 1);
    let lr = thermal_lr.crop(y0, x0, patch_h, patch_w)?;
    let g = guide.crop(4 * y0, 4 * x0, 4 * patch_h, 4 * patch_w)?;
    let hr = thermal_hr.crop(4 * y0, 4 * x0, 4 * patch_h, 4 * patch_w)?;
    Ok((g, lr, hr))
}

// ---- the optimization step ---------------------------------------------------

/// Everything the loop mutates: networks plus their optimizer states.
pub struct TrainState {
    pub gen: Generator,
    pub disc: Discriminator,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
}

impl TrainState {
    /// Fresh state with seed-derived initialization.
    pub fn init(cfg: &TrainConfig) -> Result<TrainState> {
        let base = Rng::new(cfg.seed);
        let gen = Generator::new(cfg.generator, &mut base.fork(TAG_INIT_G))?;
        let disc = Discriminator::new(cfg.generator.channels, &mut base.fork(TAG_INIT_D))?;
        let adam_g = gen.adam_state();
        let adam_d = disc.adam_state();
        Ok(TrainState {
            gen,
            disc,
            adam_g,
            adam_d,
        })
    }
}

/// One stacked batch of aligned patches.
pub struct Batch {
    pub guide: Tensor,
    pub thermal_lr: Tensor,
    pub thermal_hr: Tensor,
}

fn finite_scalar(tape: &Tape, id: TensorId, site: &str) -> Result<f32> {
    let v = tape.scalar_value(id);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { site: site.into() })
    }
}

/// One discriminator step (real vs detached fakes) followed by one generator
/// step (lambda * mse + adversarial against the updated, frozen
/// discriminator).
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<LossTerms> {
    // Generator graph; its output is reused for both phases.
    let pyr = pyramid::build_modified(&batch.guide, &batch.thermal_lr)?;
    let mut tape_g = Tape::new();
    let high = tape_g.constant(pyr.high);
    let mid = tape_g.constant(pyr.mid);
    let low = tape_g.constant(pyr.low);
    let bound_g = state.gen.bind(&mut tape_g, true);
    let out = state.gen.forward(&mut tape_g, &bound_g, high, mid, low)?;
    let fake = tape_g.detach(out.y);

    // Discriminator phase on its own tape.
    let mut tape_d = Tape::new();
    let real_id = tape_d.constant(batch.thermal_hr.clone());
    let fake_id = tape_d.constant(fake);
    let bound_d = state.disc.bind(&mut tape_d, true);
    let d_real = state.disc.forward(&mut tape_d, &bound_d, real_id)?;
    let d_fake = state.disc.forward(&mut tape_d, &bound_d, fake_id)?;
    let l_d = gan_d_loss(&mut tape_d, d_real, d_fake, cfg.gan_variant)?;
    let l_d_val = finite_scalar(&tape_d, l_d, "discriminator loss")?;
    tape_d.backward(l_d)?;
    state
        .disc
        .adam_step(&tape_d, &bound_d, &mut state.adam_d, cfg.lr_d)?;

    // Generator phase: the updated discriminator joins the generator tape
    // with frozen parameters.
    let bound_d_frozen = state.disc.bind(&mut tape_g, false);
    let d_fake_live = state.disc.forward(&mut tape_g, &bound_d_frozen, out.y)?;
    let l_g_adv = gan_g_loss(&mut tape_g, d_fake_live, cfg.gan_variant)?;
    let target = tape_g.constant(batch.thermal_hr.clone());
    let l_mse = tape_g.mse(out.y_raw, target)?;
    let l_total = combined_loss(&mut tape_g, l_mse, l_g_adv, cfg.lambda)?;
    let terms = LossTerms {
        l_mse: finite_scalar(&tape_g, l_mse, "mse loss")?,
        l_g_adv: finite_scalar(&tape_g, l_g_adv, "generator adversarial loss")?,
        l_d: l_d_val,
        l_total: finite_scalar(&tape_g, l_total, "total generator loss")?,
    };
    tape_g.backward(l_total)?;
    state
        .gen
        .adam_step(&tape_g, &bound_g, &mut state.adam_g, cfg.lr_g)?;
    Ok(terms)
}

// ---- checkpoint plumbing ------------------------------------------------------

fn export_adam(ck: &mut Checkpoint, prefix: &str, adam: &AdamState, names: &[(String, crate::Shape)]) {
    for (slot, (name, shape)) in names.iter().enumerate() {
        let (m, v) = adam.moments(slot);
        ck.push(
            format!("{prefix}.m.{name}"),
            Tensor::new(*shape, m.to_vec()).expect("moment length matches"),
        );
        ck.push(
            format!("{prefix}.v.{name}"),
            Tensor::new(*shape, v.to_vec()).expect("moment length matches"),
        );
    }
}

fn restore_adam(
    ck: &Checkpoint,
    prefix: &str,
    adam: &mut AdamState,
    names: &[(String, crate::Shape)],
    steps: u64,
) -> Result<()> {
    for (slot, (name, _)) in names.iter().enumerate() {
        let m = ck.tensor(&format!("{prefix}.m.{name}")).ok_or_else(|| Error::Checkpoint {
            path: PathBuf::new(),
            why: format!("missing optimizer tensor {prefix}.m.{name}"),
        })?;
        let v = ck.tensor(&format!("{prefix}.v.{name}")).ok_or_else(|| Error::Checkpoint {
            path: PathBuf::new(),
            why: format!("missing optimizer tensor {prefix}.v.{name}"),
        })?;
        adam.restore(slot, &m.data, &v.data);
    }
    adam.set_step_count(steps);
    Ok(())
}

/// Write a full training checkpoint: generator, discriminator, optimizer
/// moments, and loop counters.
pub fn save_train_checkpoint(
    path: &Path,
    state: &TrainState,
    meta: TrainMeta,
) -> Result<()> {
    let mut ck = Checkpoint::new(*state.gen.config());
    state.gen.export_into(&mut ck);
    state.disc.export_into(&mut ck);
    let g_names: Vec<(String, crate::Shape)> =
        state.gen.named_params().map(|(n, t)| (n, t.shape)).collect();
    let d_names: Vec<(String, crate::Shape)> =
        state.disc.named_params().map(|(n, t)| (n, t.shape)).collect();
    export_adam(&mut ck, "adam_g", &state.adam_g, &g_names);
    export_adam(&mut ck, "adam_d", &state.adam_d, &d_names);
    ck.meta = Some(meta);
    ck.save(path)
}

/// Rebuild the full training state from a checkpoint written by
/// `save_train_checkpoint`.
pub fn load_train_checkpoint(path: &Path) -> Result<(TrainState, TrainMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta = ck.meta.clone().unwrap_or_default();
    let gen = Generator::from_checkpoint(&ck)?;
    let disc = Discriminator::from_checkpoint(&ck)?;
    let mut adam_g = gen.adam_state();
    let mut adam_d = disc.adam_state();
    let g_names: Vec<(String, crate::Shape)> = gen.named_params().map(|(n, t)| (n, t.shape)).collect();
    let d_names: Vec<(String, crate::Shape)> = disc.named_params().map(|(n, t)| (n, t.shape)).collect();
    restore_adam(&ck, "adam_g", &mut adam_g, &g_names, meta.adam_g_steps)?;
    restore_adam(&ck, "adam_d", &mut adam_d, &d_names, meta.adam_d_steps)?;
    Ok((
        TrainState {
            gen,
            disc,
            adam_g,
            adam_d,
        },
        meta,
    ))
}

// ---- the loop -----------------------------------------------------------------

/// Paths and summary values produced by a training run.
pub struct TrainOutcome {
    pub log_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_psnr: Option<f64>,
    pub epochs_run: usize,
}

/// Patches drawn per sample per epoch: enough uniform draws to cover the
/// image area once.
fn patches_per_sample(s: &SamplePair, patch_w: usize, patch_h: usize) -> usize {
    let area = s.thermal_lr.shape.plane();
    (area / (patch_w * patch_h)).max(1)
}

const LOG_HEADER: &str = "epoch,step,l_mse,l_g_adv,l_d,l_total,val_psnr,val_ssim";

/// Train on `data.train`, validating on `data.val` each epoch. Writes
/// `metrics.csv`, cadence checkpoints (`ckpt_epoch_N.json`), `last.json`
/// every epoch, and `best.json` whenever validation PSNR improves. `resume`
/// restarts from an epoch-boundary checkpoint and replays the remaining
/// epochs exactly as an uninterrupted run would.
pub fn train_loop(
    data: &DatasetSplit,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset {
            why: "training split is empty".into(),
        });
    }
    let [patch_w, patch_h] = cfg.lr_patch;
    for s in &data.train {
        if s.thermal_lr.shape.w < patch_w || s.thermal_lr.shape.h < patch_h {
            return Err(Error::Dataset {
                why: format!(
                    "sample {}: thermal_lr {} is smaller than the {patch_w}x{patch_h} patch",
                    s.id, s.thermal_lr.shape
                ),
            });
        }
    }
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let log_path = out_dir.join("metrics.csv");

    let (mut state, mut meta) = match resume {
        Some(path) => {
            let (state, meta) = load_train_checkpoint(path)?;
            if *state.gen.config() != cfg.generator {
                return Err(Error::Config {
                    why: format!(
                        "checkpoint generator {} does not match config {}",
                        state.gen.config().fingerprint(),
                        cfg.generator.fingerprint()
                    ),
                });
            }
            (state, meta)
        }
        None => (TrainState::init(cfg)?, TrainMeta::default()),
    };
    if meta.epoch >= cfg.epochs {
        return Err(Error::Config {
            why: format!(
                "checkpoint already covers {} epochs, config asks for {}",
                meta.epoch, cfg.epochs
            ),
        });
    }
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    if meta.epoch == 0 {
        writeln!(log, "{LOG_HEADER}").map_err(Error::io(&log_path))?;
    }

    let base = Rng::new(cfg.seed);
    let mut best_path = None;
    if meta.best_val_psnr.is_some() {
        // A resumed run keeps its recorded best; the file already exists.
        best_path = Some(out_dir.join("best.json"));
    }
    let last_path = out_dir.join("last.json");

    for epoch in meta.epoch..cfg.epochs {
        let mut rng = base.fork(TAG_EPOCH ^ epoch as u64);
        // Seeded Fisher-Yates shuffle of the sample order.
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }

        let mut sums = [0.0f64; 4];
        let mut steps_this_epoch = 0u64;
        let mut pending: Vec<(Tensor, Tensor, Tensor)> = Vec::with_capacity(cfg.batch);
        let flush =
            |pending: &mut Vec<(Tensor, Tensor, Tensor)>, state: &mut TrainState| -> Result<LossTerms> {
                let guides: Vec<&Tensor> = pending.iter().map(|(g, _, _)| g).collect();
                let lrs: Vec<&Tensor> = pending.iter().map(|(_, l, _)| l).collect();
                let hrs: Vec<&Tensor> = pending.iter().map(|(_, _, h)| h).collect();
                let batch = Batch {
                    guide: Tensor::stack(&guides)?,
                    thermal_lr: Tensor::stack(&lrs)?,
                    thermal_hr: Tensor::stack(&hrs)?,
                };
                pending.clear();
                train_step(state, &batch, cfg)
            };
        for &idx in &order {
            let sample = &data.train[idx];
            let (mut guide, lr, hr) =
                augment_flip(&sample.guide, &sample.thermal_lr, &sample.thermal_hr, cfg.flip_prob, &mut rng);
            guide = augment_shift(&guide, cfg.shift_limit, &mut rng);
            for _ in 0..patches_per_sample(sample, patch_w, patch_h) {
                pending.push(sample_patches(&guide, &lr, &hr, patch_w, patch_h, &mut rng)?);
                if pending.len() == cfg.batch {
                    let terms = flush(&mut pending, &mut state)?;
                    sums[0] += f64::from(terms.l_mse);
                    sums[1] += f64::from(terms.l_g_adv);
                    sums[2] += f64::from(terms.l_d);
                    sums[3] += f64::from(terms.l_total);
                    steps_this_epoch += 1;
                }
            }
        }
        if !pending.is_empty() {
            let terms = flush(&mut pending, &mut state)?;
            sums[0] += f64::from(terms.l_mse);
            sums[1] += f64::from(terms.l_g_adv);
            sums[2] += f64::from(terms.l_d);
            sums[3] += f64::from(terms.l_total);
            steps_this_epoch += 1;
        }
        meta.global_step += steps_this_epoch;
        meta.adam_g_steps = state.adam_g.step_count();
        meta.adam_d_steps = state.adam_d.step_count();
        meta.epoch = epoch + 1;
        let denom = steps_this_epoch.max(1) as f64;

        // Full-image validation.
        let (val_psnr, val_ssim) = if data.val.is_empty() {
            (None, None)
        } else {
            let report = metrics::evaluate(
                &data.val,
                |s| state.gen.infer(&s.guide, &s.thermal_lr),
                &cfg.generator.fingerprint(),
            )?;
            (report.mean_psnr, Some(report.mean_ssim))
        };
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            log,
            "{},{},{},{},{},{},{},{}",
            meta.epoch,
            meta.global_step,
            sums[0] / denom,
            sums[1] / denom,
            sums[2] / denom,
            sums[3] / denom,
            fmt_opt(val_psnr),
            fmt_opt(val_ssim),
        )
        .map_err(Error::io(&log_path))?;
        log.flush().map_err(Error::io(&log_path))?;

        if let Some(v) = val_psnr {
            if meta.best_val_psnr.is_none_or(|b| v > b) {
                meta.best_val_psnr = Some(v);
                let p = out_dir.join("best.json");
                save_train_checkpoint(&p, &state, meta.clone())?;
                best_path = Some(p);
            }
        }
        if meta.epoch % cfg.checkpoint_every == 0 && meta.epoch < cfg.epochs {
            save_train_checkpoint(
                &out_dir.join(format!("ckpt_epoch_{}.json", meta.epoch)),
                &state,
                meta.clone(),
            )?;
        }
        save_train_checkpoint(&last_path, &state, meta.clone())?;
    }
    Ok(TrainOutcome {
        log_path,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        best_val_psnr: meta.best_val_psnr,
        epochs_run: cfg.epochs,
    })
}
