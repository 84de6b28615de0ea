//! Fan-in weight initialization corrected for the leaky-ReLU slope used
//! throughout the network: variance = 2 / ((1 + slope^2) * fan_in).

use super::{Rng, Shape, Tensor};
use crate::{Error, Result};

pub fn kaiming_init(shape: Shape, fan_in: usize, slope: f32, rng: &mut Rng) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::Invalid {
            op: "kaiming_init",
            why: "fan_in must be positive".into(),
        });
    }
    let gain2 = 2.0 / (1.0 + f64::from(slope) * f64::from(slope));
    let std = (gain2 / fan_in as f64).sqrt();
    let data = (0..shape.numel()).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::new(shape, data)
}
