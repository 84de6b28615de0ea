//! NCHW f32 tensors and the reverse-mode tape.
//!
//! `Tensor` is a plain value: shape plus a contiguous buffer (batch-major,
//! then channel, row, column). Differentiable computation goes through
//! [`Tape`], which owns every intermediate tensor and replays the recorded
//! operations in reverse for gradients. All arithmetic is f32.

mod adam;
mod conv;
mod init;
mod resample;
mod rng;
mod tape;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use conv::Pad;
pub use init::kaiming_init;
pub use resample::{resize, Scale};
pub use rng::Rng;
pub use tape::{Tape, TensorId};

use std::fmt;
use std::io::{self, BufRead, Write};

use crate::{Error, Result};

/// Extents of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { b, c, h, w }
    }

    pub fn numel(self) -> usize {
        self.b * self.c * self.h * self.w
    }

    /// Elements in one spatial plane.
    pub fn plane(self) -> usize {
        self.h * self.w
    }

    pub fn index(self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.b, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Invalid {
                op: "tensor",
                why: format!("buffer length {} does not match shape {shape}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, v: f32) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::filled(Shape::new(1, 1, 1, 1), v)
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.shape.index(b, c, y, x);
        self.data[i] = v;
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                a: self.shape,
                b: other.shape,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape, data)
    }

    pub fn clamped01(&self) -> Tensor {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor {
            shape: self.shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Mirror along the x axis.
    pub fn flipped_h(&self) -> Tensor {
        let s = self.shape;
        let mut out = vec![0.0; s.numel()];
        for bc in 0..s.b * s.c {
            let base = bc * s.plane();
            for y in 0..s.h {
                let row = base + y * s.w;
                for x in 0..s.w {
                    out[row + x] = self.data[row + (s.w - 1 - x)];
                }
            }
        }
        Tensor::new(s, out).expect("same extents")
    }

    /// Mirror along the y axis.
    pub fn flipped_v(&self) -> Tensor {
        let s = self.shape;
        let mut out = vec![0.0; s.numel()];
        for bc in 0..s.b * s.c {
            let base = bc * s.plane();
            for y in 0..s.h {
                let src = base + (s.h - 1 - y) * s.w;
                let dst = base + y * s.w;
                out[dst..dst + s.w].copy_from_slice(&self.data[src..src + s.w]);
            }
        }
        Tensor::new(s, out).expect("same extents")
    }

    /// Spatial crop of `ph` rows by `pw` columns starting at (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Tensor> {
        let s = self.shape;
        if y0 + ph > s.h || x0 + pw > s.w || ph == 0 || pw == 0 {
            return Err(Error::BadShape {
                op: "crop",
                shape: s,
                why: format!("window {pw}x{ph} at ({x0},{y0}) out of bounds"),
            });
        }
        let out_shape = Shape::new(s.b, s.c, ph, pw);
        let mut out = Vec::with_capacity(out_shape.numel());
        for bc in 0..s.b * s.c {
            let base = bc * s.plane();
            for y in y0..y0 + ph {
                let row = base + y * s.w + x0;
                out.extend_from_slice(&self.data[row..row + pw]);
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Concatenate along the batch axis; all items must share (c, h, w).
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Invalid {
            op: "stack",
            why: "empty input".into(),
        })?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut batches = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    a: s,
                    b: t.shape,
                });
            }
            data.extend_from_slice(&t.data);
            batches += t.shape.b;
        }
        Tensor::new(Shape::new(batches, s.c, s.h, s.w), data)
    }

    /// Binary dump: one text header line `SHAPE b c h w`, then the buffer as
    /// little-endian f32.
    pub fn write_dump(&self, w: &mut dyn Write) -> io::Result<()> {
        let s = self.shape;
        writeln!(w, "SHAPE {} {} {} {}", s.b, s.c, s.h, s.w)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(r: &mut dyn BufRead) -> io::Result<Tensor> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let bad = || io::Error::new(io::ErrorKind::InvalidData, "malformed tensor dump header");
        let mut it = header.split_whitespace();
        if it.next() != Some("SHAPE") {
            return Err(bad());
        }
        let mut dim = || -> io::Result<usize> { it.next().ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let shape = Shape::new(dim()?, dim()?, dim()?, dim()?);
        let mut bytes = vec![0u8; shape.numel() * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
    }
}
