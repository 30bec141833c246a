//! Separable resampling kernels.
//!
//! Every resize is expressed as a pair of sparse per-axis weight tables so the
//! same operator can be applied forward or transposed (back-projection needs
//! the adjoint of the bicubic reduction).

use crate::error::{Error, Result};
use crate::image::ImagePlane;

/// Cubic convolution parameter.
pub const BICUBIC_A: f64 = -0.5;

pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

fn triangle_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.0 - x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    Nearest,
    Bilinear,
    Bicubic,
}

impl Filter {
    fn support(self) -> f64 {
        match self {
            Filter::Nearest => 0.5,
            Filter::Bilinear => 1.0,
            Filter::Bicubic => 2.0,
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Filter::Nearest => unreachable!("nearest handled separately"),
            Filter::Bilinear => triangle_kernel(x),
            Filter::Bicubic => cubic_kernel(x),
        }
    }
}

/// Sparse weights mapping an input axis onto an output axis.
#[derive(Debug, Clone)]
pub struct AxisWeights {
    in_len: usize,
    out_len: usize,
    /// `starts[o]..starts[o + 1]` indexes `taps` for output sample `o`.
    starts: Vec<usize>,
    taps: Vec<(usize, f64)>,
}

impl AxisWeights {
    pub fn new(in_len: usize, out_len: usize, filter: Filter) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut starts = Vec::with_capacity(out_len + 1);
        let mut taps = Vec::new();
        starts.push(0);
        for o in 0..out_len {
            if filter == Filter::Nearest {
                let src = (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1);
                taps.push((src, 1.0));
                starts.push(taps.len());
                continue;
            }
            // Reductions stretch the kernel so it also acts as the anti-alias filter.
            let stretch = scale.max(1.0);
            let center = (o as f64 + 0.5) * scale - 0.5;
            let radius = filter.support() * stretch;
            let lo = (center - radius).ceil() as i64;
            let hi = (center + radius).floor() as i64;
            let first = taps.len();
            let mut total = 0.0;
            for j in lo..=hi {
                let w = filter.eval((j as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as i64 - 1) as usize;
                total += w;
                match taps[first..].iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            if total != 1.0 {
                for t in &mut taps[first..] {
                    t.1 /= total;
                }
            }
            starts.push(taps.len());
        }
        Self {
            in_len,
            out_len,
            starts,
            taps,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn taps(&self, o: usize) -> &[(usize, f64)] {
        &self.taps[self.starts[o]..self.starts[o + 1]]
    }
}

/// A separable linear resampling operator on row-major planes.
#[derive(Debug, Clone)]
pub struct Resampler {
    cols: AxisWeights,
    rows: AxisWeights,
}

impl Resampler {
    pub fn new(in_w: usize, in_h: usize, out_w: usize, out_h: usize, filter: Filter) -> Self {
        Self {
            cols: AxisWeights::new(in_w, out_w, filter),
            rows: AxisWeights::new(in_h, out_h, filter),
        }
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.cols.in_len, self.rows.in_len)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.cols.out_len, self.rows.out_len)
    }

    /// Forward application without clamping.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let (in_w, in_h) = self.in_dims();
        let (out_w, out_h) = self.out_dims();
        debug_assert_eq!(input.len(), in_w * in_h);
        let mut horiz = vec![0.0; out_w * in_h];
        for r in 0..in_h {
            let src = &input[r * in_w..(r + 1) * in_w];
            let dst = &mut horiz[r * out_w..(r + 1) * out_w];
            for (o, d) in dst.iter_mut().enumerate() {
                *d = self.cols.taps(o).iter().map(|&(j, w)| w * src[j]).sum();
            }
        }
        let mut out = vec![0.0; out_w * out_h];
        for o in 0..out_h {
            let dst = &mut out[o * out_w..(o + 1) * out_w];
            for &(j, w) in self.rows.taps(o) {
                let src = &horiz[j * out_w..(j + 1) * out_w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Transposed operator: maps an output-shaped array back to input shape.
    pub fn apply_adjoint(&self, output: &[f64]) -> Vec<f64> {
        let (in_w, in_h) = self.in_dims();
        let (out_w, out_h) = self.out_dims();
        debug_assert_eq!(output.len(), out_w * out_h);
        let mut horiz = vec![0.0; out_w * in_h];
        for o in 0..out_h {
            let src = &output[o * out_w..(o + 1) * out_w];
            for &(j, w) in self.rows.taps(o) {
                let dst = &mut horiz[j * out_w..(j + 1) * out_w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let mut out = vec![0.0; in_w * in_h];
        for r in 0..in_h {
            let src = &horiz[r * out_w..(r + 1) * out_w];
            let dst = &mut out[r * in_w..(r + 1) * in_w];
            for (o, s) in src.iter().enumerate() {
                for &(j, w) in self.cols.taps(o) {
                    dst[j] += w * s;
                }
            }
        }
        out
    }
}

pub fn resize(plane: &ImagePlane, out_w: usize, out_h: usize, filter: Filter) -> Result<ImagePlane> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidParameter(format!(
            "target size {out_w}x{out_h} must be at least 1x1"
        )));
    }
    if out_w == plane.width() && out_h == plane.height() {
        return Ok(plane.clone());
    }
    let op = Resampler::new(plane.width(), plane.height(), out_w, out_h, filter);
    Ok(ImagePlane::new(out_w, out_h, op.apply(plane.data()))?.clamped())
}

/// Separable bicubic convolution (a = -0.5) with clamped edges; output clamped to [0, 255].
pub fn resize_bicubic(plane: &ImagePlane, out_w: usize, out_h: usize) -> Result<ImagePlane> {
    resize(plane, out_w, out_h, Filter::Bicubic)
}

fn check_divisible(plane: &ImagePlane, ratio: usize) -> Result<()> {
    if ratio < 2 {
        return Err(Error::InvalidParameter(format!("ratio must be >= 2, got {ratio}")));
    }
    if !plane.width().is_multiple_of(ratio) || !plane.height().is_multiple_of(ratio) {
        return Err(Error::NotDivisible {
            width: plane.width(),
            height: plane.height(),
            ratio,
        });
    }
    Ok(())
}

/// Linear bicubic reduction by an integer ratio, unclamped.
pub fn reduction_operator(width: usize, height: usize, ratio: usize) -> Resampler {
    Resampler::new(width, height, width / ratio, height / ratio, Filter::Bicubic)
}

pub fn downsample(plane: &ImagePlane, ratio: usize) -> Result<ImagePlane> {
    check_divisible(plane, ratio)?;
    resize_bicubic(plane, plane.width() / ratio, plane.height() / ratio)
}

/// Integer-ratio upscaling with any of the three interpolation kernels.
pub fn upscale(plane: &ImagePlane, ratio: usize, filter: Filter) -> Result<ImagePlane> {
    if ratio < 1 {
        return Err(Error::InvalidParameter("ratio must be positive".into()));
    }
    resize(plane, plane.width() * ratio, plane.height() * ratio, filter)
}
