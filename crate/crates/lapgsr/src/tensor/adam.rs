//! Adam optimizer state, kept outside the tape so graphs stay per-step.

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First/second moment buffers for an ordered set of parameter tensors.
/// The step counter is shared: call `begin_step` once per optimizer step,
/// then `update` once per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    t: u64,
    slots: Vec<Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            t: 0,
            slots: sizes
                .iter()
                .map(|&n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn moments(&self, slot: usize) -> (&[f32], &[f32]) {
        (&self.slots[slot].m, &self.slots[slot].v)
    }

    /// Restore raw moment buffers (checkpoint load). Lengths must match the
    /// construction sizes.
    pub fn restore(&mut self, slot: usize, m: &[f32], v: &[f32]) {
        assert_eq!(self.slots[slot].m.len(), m.len(), "adam m length");
        assert_eq!(self.slots[slot].v.len(), v.len(), "adam v length");
        self.slots[slot].m.copy_from_slice(m);
        self.slots[slot].v.copy_from_slice(v);
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// In-place Adam update of one parameter tensor from its gradient.
    /// Bias correction uses the shared step counter; `begin_step` must have
    /// been called at least once.
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32], lr: f32) {
        debug_assert!(self.t >= 1, "begin_step before update");
        let s = &mut self.slots[slot];
        assert_eq!(param.len(), grad.len(), "param/grad length");
        assert_eq!(param.len(), s.m.len(), "param/state length");
        let bc1 = 1.0 - (f64::from(ADAM_BETA1)).powi(self.t as i32);
        let bc2 = 1.0 - (f64::from(ADAM_BETA2)).powi(self.t as i32);
        let bc1 = bc1 as f32;
        let bc2 = bc2 as f32;
        for i in 0..param.len() {
            let g = grad[i];
            s.m[i] = ADAM_BETA1 * s.m[i] + (1.0 - ADAM_BETA1) * g;
            s.v[i] = ADAM_BETA2 * s.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = s.m[i] / bc1;
            let v_hat = s.v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}
