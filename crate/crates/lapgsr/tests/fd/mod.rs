//! Central finite-difference verification of every differentiable tape
//! operation, plus end-to-end spot checks through the full generator.
//! Shared between the gradient test target and the acceptance battery.
//!
//! Protocol: for a fixed random linear functional L(out) = Σ wᵢ·outᵢ, the
//! reverse-mode gradient of each input element is compared against
//! (L(x+h·e) − L(x−h·e)) / 2h with the functional accumulated in f64. Inputs
//! for kinked ops (relu family, clamp) are sampled away from their kinks so
//! the derivative is classical at every probe point.

#![allow(dead_code)]

use lapgsr::tensor::{Pad, Rng, Scale, Tape, TensorId};
use lapgsr::{Shape, Tensor};

const LEAKY_SLOPE: f32 = 0.2;
const IN_EPS: f32 = 1e-5;

/// Per-element tolerance for single-op checks and for the end-to-end pass.
pub const OP_REL_TOL: f64 = 1e-3;
pub const E2E_REL_TOL: f64 = 1e-2;

/// Builds one op instance on a tape over leaf inputs; returns the output id.
type Build = dyn Fn(&mut Tape, &[TensorId]) -> TensorId;

struct Case {
    /// Leaf tensors; every one is checked.
    inputs: Vec<Tensor>,
}

fn values(shape: Shape, lo: f32, hi: f32, rng: &mut Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| lo + (hi - lo) * rng.uniform() as f32)
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform in ±[lo, hi]: magnitudes bounded away from zero, both signs.
fn values_off_zero(shape: Shape, lo: f32, hi: f32, rng: &mut Rng) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let m = lo + (hi - lo) * rng.uniform() as f32;
            if rng.coin(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// L(out) with f64 accumulation over a forward-only rebuild.
fn functional(tape: &Tape, out: TensorId, weights: &[f64]) -> f64 {
    tape.detach(out)
        .data
        .iter()
        .zip(weights)
        .map(|(&v, &w)| f64::from(v) * w)
        .sum()
}

/// Step sizes: ops linear (or piecewise linear away from their kinks) in each
/// input have zero truncation error, so a large step drowns the f32 forward
/// noise; smooth nonlinear ops need a small step for truncation but tolerate
/// it because their curvature is mild at the probe points.
#[derive(Clone, Copy)]
enum Fd {
    /// Two-point central difference at the given step.
    Central(f32),
    /// Five-point O(h^4) stencil: larger step, immune to f32 forward noise;
    /// only for ops smooth on the whole real line.
    Stencil5(f32),
}

const H_LINEAR: Fd = Fd::Central(0.25);
const H_PIECEWISE: Fd = Fd::Central(0.05);
const H_SMOOTH: Fd = Fd::Stencil5(0.05);

/// Checks every element of every input; panics past tolerance, returns the
/// worst relative error seen.
fn run_case(name: &str, case: &Case, build: &Build, fd: Fd, rng: &mut Rng) -> f64 {
    // Reverse-mode pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = build(&mut tape, &ids);
    let out_shape = tape.shape(out);
    let weights: Vec<f64> = (0..out_shape.numel())
        .map(|_| rng.uniform_in(0.25, 1.0))
        .collect();
    let w_tensor = Tensor::new(
        out_shape,
        weights.iter().map(|&w| w as f32).collect(),
    )
    .unwrap();
    let w_id = tape.constant(w_tensor);
    let weighted = tape.mul(out, w_id).unwrap();
    let loss = tape.sum_all(weighted);
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let grad = tape
            .grad(ids[i])
            .unwrap_or_else(|| panic!("{name}: input {i} has no gradient"))
            .to_vec();
        // Elements whose gradient is far below the tensor's own scale are
        // numerically zero; comparing them tests float noise, not calculus.
        let scale = grad.iter().fold(0.0f32, |m, &g| m.max(g.abs()));
        let floor = f64::from(scale) * 1e-3 + 1e-12;
        for e in 0..input.data.len() {
            let probe = |delta: f32| {
                let mut tp = Tape::new();
                let pids: Vec<TensorId> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == i {
                            t.data[e] += delta;
                        }
                        tp.constant(t)
                    })
                    .collect();
                let pout = build(&mut tp, &pids);
                functional(&tp, pout, &weights)
            };
            let fd = match fd {
                Fd::Central(h) => (probe(h) - probe(-h)) / (2.0 * f64::from(h)),
                Fd::Stencil5(h) => {
                    (probe(-2.0 * h) - 8.0 * probe(-h) + 8.0 * probe(h) - probe(2.0 * h))
                        / (12.0 * f64::from(h))
                }
            };
            let ad = f64::from(grad[e]);
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
            assert!(
                rel < OP_REL_TOL,
                "{name}: input {i} element {e}: reverse {ad:.6e} vs fd {fd:.6e} (rel {rel:.2e})"
            );
        }
    }
    worst
}

/// The three standard probe shapes: vary batch, channels, and extents.
fn main_shapes() -> [Shape; 3] {
    [
        Shape::new(1, 1, 4, 5),
        Shape::new(2, 3, 3, 4),
        Shape::new(1, 2, 6, 3),
    ]
}

/// (cases checked, worst relative error); panics on any violation.
pub fn unary_battery() -> (usize, f64) {
    let mut rng = Rng::new(101);
    let mut cases = 0usize;
    let mut worst = 0.0f64;
    let mut track = |w: f64| {
        cases += 1;
        worst = worst.max(w);
    };
    for shape in main_shapes() {
        let plain = values(shape, -1.2, 1.2, &mut rng);
        let off_zero = values_off_zero(shape, 0.08, 1.2, &mut rng);
        // Clamp probes: clear of 0 and 1 by much more than the step.
        let clamp_in = {
            let data = (0..shape.numel())
                .map(|_| {
                    let r = rng.uniform() as f32;
                    if r < 0.4 {
                        0.1 + 0.8 * r // interior
                    } else if r < 0.7 {
                        1.1 + r // above
                    } else {
                        -0.1 - r // below
                    }
                })
                .collect();
            Tensor::new(shape, data).unwrap()
        };
        track(run_case(
            &format!("leaky_relu {shape}"),
            &Case { inputs: vec![off_zero.clone()] },
            &|t, ids| t.leaky_relu(ids[0], LEAKY_SLOPE),
            H_PIECEWISE,
            &mut rng,
        ));
        track(run_case(
            &format!("relu {shape}"),
            &Case { inputs: vec![off_zero.clone()] },
            &|t, ids| t.relu(ids[0]),
            H_PIECEWISE,
            &mut rng,
        ));
        track(run_case(
            &format!("tanh {shape}"),
            &Case { inputs: vec![plain.clone()] },
            &|t, ids| t.tanh(ids[0]),
            H_SMOOTH,
            &mut rng,
        ));
        track(run_case(
            &format!("softplus {shape}"),
            &Case { inputs: vec![plain.clone()] },
            &|t, ids| t.softplus(ids[0]),
            H_SMOOTH,
            &mut rng,
        ));
        track(run_case(
            &format!("affine {shape}"),
            &Case { inputs: vec![plain.clone()] },
            &|t, ids| t.affine(ids[0], -1.7, 0.4),
            H_LINEAR,
            &mut rng,
        ));
        track(run_case(
            &format!("clamp01 {shape}"),
            &Case { inputs: vec![clamp_in] },
            &|t, ids| t.clamp01(ids[0]),
            H_PIECEWISE,
            &mut rng,
        ));
        track(run_case(
            &format!("instance_norm {shape}"),
            &Case { inputs: vec![values(shape, -2.0, 2.0, &mut rng)] },
            &|t, ids| t.instance_norm(ids[0], IN_EPS),
            H_SMOOTH,
            &mut rng,
        ));
        track(run_case(
            &format!("mean_all {shape}"),
            &Case { inputs: vec![plain.clone()] },
            &|t, ids| t.mean_all(ids[0]),
            H_LINEAR,
            &mut rng,
        ));
        track(run_case(
            &format!("sum_all {shape}"),
            &Case { inputs: vec![plain] },
            &|t, ids| t.sum_all(ids[0]),
            H_LINEAR,
            &mut rng,
        ));
    }
    (cases, worst)
}

pub fn binary_battery() -> (usize, f64) {
    let mut rng = Rng::new(202);
    let mut cases = 0usize;
    let mut worst = 0.0f64;
    let mut track = |w: f64| {
        cases += 1;
        worst = worst.max(w);
    };
    for shape in main_shapes() {
        let a = values(shape, -1.0, 1.0, &mut rng);
        let b = values(shape, -1.0, 1.0, &mut rng);
        track(run_case(
            &format!("add {shape}"),
            &Case { inputs: vec![a.clone(), b.clone()] },
            &|t, ids| t.add(ids[0], ids[1]).unwrap(),
            H_LINEAR,
            &mut rng,
        ));
        track(run_case(
            &format!("mul {shape}"),
            &Case { inputs: vec![a.clone(), b.clone()] },
            &|t, ids| t.mul(ids[0], ids[1]).unwrap(),
            H_LINEAR,
            &mut rng,
        ));
        track(run_case(
            &format!("mse {shape}"),
            &Case { inputs: vec![a.clone(), b.clone()] },
            &|t, ids| t.mse(ids[0], ids[1]).unwrap(),
            H_LINEAR,
            &mut rng,
        ));
        track(run_case(
            &format!("concat_channels {shape}"),
            &Case { inputs: vec![a, b] },
            &|t, ids| t.concat_channels(ids[0], ids[1]).unwrap(),
            H_LINEAR,
            &mut rng,
        ));
    }
    (cases, worst)
}

pub fn resize_battery() -> (usize, f64) {
    let mut rng = Rng::new(303);
    let mut cases = 0usize;
    let mut worst = 0.0f64;
    for shape in [Shape::new(1, 1, 4, 6), Shape::new(2, 2, 6, 4), Shape::new(1, 3, 8, 8)] {
        let x = values(shape, -1.0, 1.0, &mut rng);
        for (label, scale) in [("up2", Scale::Up2), ("down2", Scale::Down2)] {
            let w = run_case(
                &format!("bicubic {label} {shape}"),
                &Case { inputs: vec![x.clone()] },
                &move |t, ids| t.bicubic_resize(ids[0], scale).unwrap(),
                H_LINEAR,
                &mut rng,
            );
            cases += 1;
            worst = worst.max(w);
        }
    }
    (cases, worst)
}

pub fn conv_battery() -> (usize, f64) {
    let mut rng = Rng::new(404);
    let mut cases = 0usize;
    let mut worst = 0.0f64;
    // (input shape, out_c, k, stride, pad)
    let geoms: [(Shape, usize, usize, usize, Pad); 4] = [
        (Shape::new(1, 1, 5, 6), 2, 3, 1, Pad::same(1)),
        (Shape::new(2, 3, 6, 5), 2, 3, 1, Pad::same(1)),
        (Shape::new(1, 2, 8, 8), 3, 4, 2, Pad::same(1)),
        // The discriminator-head geometry: even kernel, asymmetric pad.
        (
            Shape::new(1, 2, 6, 6),
            1,
            4,
            1,
            Pad { top: 1, bottom: 2, left: 1, right: 2 },
        ),
    ];
    for (xs, out_c, k, stride, pad) in geoms {
        let x = values(xs, -1.0, 1.0, &mut rng);
        let w = values(Shape::new(out_c, xs.c, k, k), -0.5, 0.5, &mut rng);
        let b = values(Shape::new(1, out_c, 1, 1), -0.3, 0.3, &mut rng);
        let wr = run_case(
            &format!("conv2d {xs} k{k} s{stride}"),
            &Case { inputs: vec![x, w, b] },
            &move |t, ids| t.conv2d_padded(ids[0], ids[1], ids[2], stride, pad).unwrap(),
            H_LINEAR,
            &mut rng,
        );
        cases += 1;
        worst = worst.max(wr);
    }
    (cases, worst)
}

/// End-to-end: reverse-mode parameter gradients of an MSE loss through the
/// whole generator versus central differences on rebuilt models. Returns
/// (parameter tensors checked, worst relative error); panics past tolerance.
pub fn generator_end_to_end() -> (usize, f64) {
    use lapgsr::model::{Checkpoint, Generator, GeneratorConfig};
    use lapgsr::pyramid;

    let cfg = GeneratorConfig {
        blocks_ltb: 1,
        blocks_mtb: 1,
        blocks_htb: 1,
        width_ltb: 4,
        width_mtb: 4,
        width_htb: 2,
        ..GeneratorConfig::default()
    };
    let mut rng = Rng::new(505);
    let gen = Generator::new(cfg, &mut rng).unwrap();
    let guide = values(Shape::new(1, 1, 16, 24), 0.0, 1.0, &mut rng);
    let thermal = values(Shape::new(1, 1, 4, 6), 0.0, 1.0, &mut rng);
    let target = values(Shape::new(1, 1, 16, 24), 0.0, 1.0, &mut rng);
    let pyr = pyramid::build_modified(&guide, &thermal).unwrap();

    // Rebuild the generator with one parameter element offset by delta.
    let perturbed = |slot: usize, e: usize, delta: f32| -> Generator {
        let mut ck = Checkpoint::new(cfg);
        for (i, (name, tensor)) in gen.named_params().enumerate() {
            let mut t = tensor.clone();
            if i == slot {
                t.data[e] += delta;
            }
            ck.push(format!("gen.{name}"), t);
        }
        Generator::from_checkpoint(&ck).unwrap()
    };
    let loss_of = |g: &Generator| -> f64 {
        let mut tape = Tape::new();
        let high = tape.constant(pyr.high.clone());
        let mid = tape.constant(pyr.mid.clone());
        let low = tape.constant(pyr.low.clone());
        let bound = g.bind(&mut tape, false);
        let out = g.forward(&mut tape, &bound, high, mid, low).unwrap();
        let tgt = tape.constant(target.clone());
        let l = tape.mse(out.y_raw, tgt).unwrap();
        f64::from(tape.scalar_value(l))
    };

    // Reverse-mode gradients for every parameter.
    let mut tape = Tape::new();
    let high = tape.constant(pyr.high.clone());
    let mid = tape.constant(pyr.mid.clone());
    let low = tape.constant(pyr.low.clone());
    let bound = gen.bind(&mut tape, true);
    let out = gen.forward(&mut tape, &bound, high, mid, low).unwrap();
    let tgt = tape.constant(target.clone());
    let loss = tape.mse(out.y_raw, tgt).unwrap();
    tape.backward(loss).unwrap();

    let names: Vec<String> = gen.named_params().map(|(n, _)| n).collect();
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let h = 2e-3f32;
    for (slot, name) in names.iter().enumerate() {
        let id = if slot % 2 == 0 {
            bound[slot / 2].weight_id()
        } else {
            bound[slot / 2].bias_id()
        };
        let grad = tape.grad(id).expect("trainable parameter gradient");
        // Probe the element of largest gradient magnitude in each tensor;
        // skip all-zero gradients (nothing to compare against).
        let Some((e, &g_ad)) = grad
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        else {
            continue;
        };
        if g_ad.abs() < 1e-6 {
            // The whole tensor's gradient is numerically zero (e.g. a bias
            // feeding an instance norm, which is invariant to it).
            continue;
        }
        let fd = (loss_of(&perturbed(slot, e, h)) - loss_of(&perturbed(slot, e, -h)))
            / (2.0 * f64::from(h));
        let ad = f64::from(g_ad);
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
        worst = worst.max(rel);
        assert!(
            rel < E2E_REL_TOL,
            "{name}[{e}]: reverse {ad:.6e} vs fd {fd:.6e} (rel {rel:.2e})"
        );
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} parameters had usable gradients");
    (checked, worst)
}
