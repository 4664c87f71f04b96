//! Dense rank-4 feature maps and convolution geometry.

use std::fmt;

use crate::error::{Error, Result};

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape {
        n: 1,
        c: 1,
        h: 1,
        w: 1,
    };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidShape(format!("zero-sized dimension in {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major `f64` activations. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: Shape,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.numel() > 0, "zero-sized shape {shape}");
        FeatureMap {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        FeatureMap { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        FeatureMap {
            shape: Shape::SCALAR,
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Contiguous `h * w` plane of one `(sample, channel)`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Samples `n0..n0+len` as a new map.
    pub fn batch_slice(&self, n0: usize, len: usize) -> FeatureMap {
        let per = self.shape.c * self.shape.plane();
        FeatureMap {
            shape: Shape { n: len, ..self.shape },
            data: self.data[n0 * per..(n0 + len) * per].to_vec(),
        }
    }

    /// Stacks maps of identical per-sample shape along the batch axis.
    pub fn stack(maps: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero maps".into()))?;
        let mut n = 0;
        let mut data = Vec::new();
        for m in maps {
            if (Shape { n: first.shape.n, ..m.shape }) != first.shape {
                return Err(Error::shape("stack", first.shape, m.shape));
            }
            n += m.shape.n;
            data.extend_from_slice(&m.data);
        }
        Ok(FeatureMap {
            shape: Shape { n, ..first.shape },
            data,
        })
    }
}

/// Geometry of a 2-D convolution. Kernels are 1 or 3, strides 1 or 2,
/// padding 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Pointwise 1x1 convolution.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, 0, 1).expect("valid 1x1 spec")
    }

    /// 3x3, padding 1, with the given stride.
    pub fn k3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self::new(in_channels, out_channels, 3, stride, 1, 1).expect("valid 3x3 spec")
    }

    /// Depthwise 3x3, stride 1, padding 1.
    pub fn depthwise(channels: usize) -> Self {
        Self::new(channels, channels, 3, 1, 1, channels).expect("valid depthwise spec")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidShape(msg));
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return bad(format!("conv channels/groups must be positive: {self:?}"));
        }
        if !matches!(self.kernel, 1 | 3) {
            return bad(format!("kernel {} not in {{1, 3}}", self.kernel));
        }
        if !matches!(self.stride, 1 | 2) {
            return bad(format!("stride {} not in {{1, 2}}", self.stride));
        }
        if self.padding > 1 {
            return bad(format!("padding {} not in {{0, 1}}", self.padding));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "channels {} -> {} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Weight layout `(out, in / groups, k, k)`.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_per_group(), self.kernel, self.kernel)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    /// `floor((len + 2 * padding - kernel) / stride) + 1`, or `None` when the
    /// kernel does not fit.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::InvalidShape(format!(
                "conv expects {} input channels, input is {input}",
                self.in_channels
            )));
        }
        match (self.out_len(input.h), self.out_len(input.w)) {
            (Some(h), Some(w)) => Ok(Shape::new(input.n, self.out_channels, h, w)),
            _ => Err(Error::InvalidShape(format!(
                "kernel {} does not fit input {input}",
                self.kernel
            ))),
        }
    }
}
