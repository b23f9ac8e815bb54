//! Volumetric convolution kernels.
//!
//! Both directions lower to GEMM through an unfolded "column" buffer of shape
//! `[C·k³, D'·H'·W']` whose rows are ordered channel-major, kernel-offset
//! minor. The reduction order is therefore fixed for a given geometry and
//! results are bit-reproducible.

use super::{direct, Real, Tensor};
use crate::error::{Error, Result};

/// Cubic kernel geometry shared by a convolution and its transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, geom: ConvGeometry) -> Result<usize> {
    geom.validate()?;
    let padded = input + 2 * geom.padding;
    if padded < geom.kernel {
        return Err(Error::shape(format!(
            "extent {input} with padding {} is smaller than kernel {}",
            geom.padding, geom.kernel
        )));
    }
    Ok((padded - geom.kernel) / geom.stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_extent(
    input: usize,
    geom: ConvGeometry,
    output_padding: usize,
) -> Result<usize> {
    geom.validate()?;
    if output_padding >= geom.stride {
        return Err(Error::invalid(format!(
            "output_padding {output_padding} must be smaller than stride {}",
            geom.stride
        )));
    }
    let out = (input as isize - 1) * geom.stride as isize - 2 * geom.padding as isize
        + geom.kernel as isize
        + output_padding as isize;
    if input == 0 || out <= 0 {
        return Err(Error::shape(format!(
            "transposed convolution of extent {input} yields non-positive extent {out}"
        )));
    }
    Ok(out as usize)
}

/// Spatial layout of one unfold: `input` is the dense side, `output` the
/// strided side.
#[derive(Clone, Copy, Debug)]
struct Unfold {
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: ConvGeometry,
}

impl Unfold {
    fn rows(&self) -> usize {
        self.channels * self.geom.kernel.pow(3)
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Range of output positions `o` along an axis for which
    /// `o·stride + offset − padding` lands inside `[0, extent)`.
    fn valid_range(&self, offset: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.geom.stride as isize;
        let shift = offset as isize - self.geom.padding as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        // largest o with o*s + shift <= extent-1, exclusive bound
        let hi = if (extent as isize - 1 - shift) < 0 {
            0
        } else {
            (extent as isize - 1 - shift) / s + 1
        };
        let lo = lo.clamp(0, out as isize) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Gathers `src` (`[C, D, H, W]`) into `cols` (`[C·k³, D'·H'·W']`).
    fn im2col<T: Real>(&self, src: &[T], cols: &mut [T]) {
        let k = self.geom.kernel;
        let s = self.geom.stride;
        let p = self.geom.padding;
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let ncols = self.cols();
        cols.fill(T::zero());
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &src[c * d * h * w..(c + 1) * d * h * w];
            for kd in 0..k {
                let (zd0, zd1) = self.valid_range(kd, d, od);
                for kh in 0..k {
                    let (zh0, zh1) = self.valid_range(kh, h, oh);
                    for kw in 0..k {
                        let (zw0, zw1) = self.valid_range(kw, w, ow);
                        let dst = &mut cols[row * ncols..(row + 1) * ncols];
                        for z in zd0..zd1 {
                            let iz = z * s + kd - p;
                            for y in zh0..zh1 {
                                let iy = y * s + kh - p;
                                let src_row = &plane[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                let dst_row = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                if s == 1 {
                                    let ix0 = zw0 + kw - p;
                                    dst_row[zw0..zw1]
                                        .copy_from_slice(&src_row[ix0..ix0 + (zw1 - zw0)]);
                                } else {
                                    for x in zw0..zw1 {
                                        dst_row[x] = src_row[x * s + kw - p];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto `dst` (`[C, D, H, W]`).
    fn col2im<T: Real>(&self, cols: &[T], dst: &mut [T]) {
        let k = self.geom.kernel;
        let s = self.geom.stride;
        let p = self.geom.padding;
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let ncols = self.cols();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut dst[c * d * h * w..(c + 1) * d * h * w];
            for kd in 0..k {
                let (zd0, zd1) = self.valid_range(kd, d, od);
                for kh in 0..k {
                    let (zh0, zh1) = self.valid_range(kh, h, oh);
                    for kw in 0..k {
                        let (zw0, zw1) = self.valid_range(kw, w, ow);
                        let src = &cols[row * ncols..(row + 1) * ncols];
                        for z in zd0..zd1 {
                            let iz = z * s + kd - p;
                            for y in zh0..zh1 {
                                let iy = y * s + kh - p;
                                let dst_row = &mut plane[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                let src_row = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                for x in zw0..zw1 {
                                    dst_row[x * s + kw - p] += src_row[x];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn cubic_kernel(weight: &[usize]) -> Result<usize> {
    match weight {
        [_, _, a, b, c] if a == b && b == c => Ok(*a),
        _ => Err(Error::shape(format!(
            "convolution weight must be [*, *, k, k, k], got {weight:?}"
        ))),
    }
}

fn check_bias<T: Real>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {channels} output channels",
            bias.shape()
        )));
    }
    Ok(())
}

/// Validated shapes of a forward convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvPlan {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: ConvGeometry,
}

impl ConvPlan {
    pub(crate) fn conv<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, cin, d, h, w] = input.dims5()?;
        let k = cubic_kernel(weight.shape())?;
        let (cout, wcin) = (weight.shape()[0], weight.shape()[1]);
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv3d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        check_bias(bias, cout)?;
        let geom = ConvGeometry::new(k, stride, padding);
        let output = [
            conv_out_extent(d, geom)?,
            conv_out_extent(h, geom)?,
            conv_out_extent(w, geom)?,
        ];
        Ok(ConvPlan {
            batch: n,
            cin,
            cout,
            input: [d, h, w],
            output,
            geom,
        })
    }

    /// Plan for a transposed convolution, expressed as the forward
    /// convolution it is the adjoint of: `input` here is the transposed
    /// op's output and vice versa.
    pub(crate) fn transpose<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let [n, cin, d, h, w] = input.dims5()?;
        let k = cubic_kernel(weight.shape())?;
        let (wcin, cout) = (weight.shape()[0], weight.shape()[1]);
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv3d_transpose: input has {cin} channels, weight expects {wcin}"
            )));
        }
        check_bias(bias, cout)?;
        let geom = ConvGeometry::new(k, stride, padding);
        let out = [
            conv_transpose_out_extent(d, geom, output_padding)?,
            conv_transpose_out_extent(h, geom, output_padding)?,
            conv_transpose_out_extent(w, geom, output_padding)?,
        ];
        Ok(ConvPlan {
            batch: n,
            cin: cout,
            cout: cin,
            input: out,
            output: [d, h, w],
            geom,
        })
    }

    fn unfold(&self) -> Unfold {
        Unfold {
            channels: self.cin,
            input: self.input,
            output: self.output,
            geom: self.geom,
        }
    }

    fn dense_len(&self) -> usize {
        self.input.iter().product()
    }

    pub(crate) fn dense_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.input;
        vec![self.batch, self.cin, d, h, w]
    }

    pub(crate) fn strided_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.output;
        vec![self.batch, self.cout, d, h, w]
    }

    pub(crate) fn parts(&self) -> (usize, usize, usize, [usize; 3], [usize; 3], ConvGeometry) {
        (
            self.batch,
            self.cin,
            self.cout,
            self.input,
            self.output,
            self.geom,
        )
    }
}

/// `y = W ⊛ x + b`, weight `[Cout, Cin, k, k, k]`.
pub(crate) fn conv_forward<T: Real>(plan: &ConvPlan, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    if plan.geom.stride == 1 {
        direct::forward(plan, x, weight, bias)
    } else {
        unfold_forward(plan, x, weight, bias)
    }
}

/// Input gradient of [`conv_forward`]; also the forward pass of the
/// transposed convolution (without bias).
pub(crate) fn conv_input_grad<T: Real>(plan: &ConvPlan, dy: &[T], weight: &[T]) -> Vec<T> {
    if plan.geom.stride == 1 {
        direct::input_grad(plan, dy, weight)
    } else {
        unfold_input_grad(plan, dy, weight)
    }
}

/// Weight gradient of [`conv_forward`], accumulated into `dw`.
pub(crate) fn conv_weight_grad<T: Real>(plan: &ConvPlan, x: &[T], dy: &[T], dw: &mut [T]) {
    if plan.geom.stride == 1 {
        direct::weight_grad(plan, x, dy, dw)
    } else {
        unfold_weight_grad(plan, x, dy, dw)
    }
}

pub(crate) fn unfold_forward<T: Real>(
    plan: &ConvPlan,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let unfold = plan.unfold();
    let (rows, ncols) = (unfold.rows(), unfold.cols());
    let (xin, yout) = (plan.cin * plan.dense_len(), plan.cout * ncols);
    let mut cols = vec![T::zero(); rows * ncols];
    let mut y = vec![T::zero(); plan.batch * yout];
    for n in 0..plan.batch {
        unfold.im2col(&x[n * xin..(n + 1) * xin], &mut cols);
        let yn = &mut y[n * yout..(n + 1) * yout];
        for (co, chunk) in yn.chunks_exact_mut(ncols).enumerate() {
            chunk.fill(bias[co]);
        }
        T::gemm(
            plan.cout,
            rows,
            ncols,
            T::one(),
            weight,
            rows as isize,
            1,
            &cols,
            ncols as isize,
            1,
            T::one(),
            yn,
            ncols as isize,
            1,
        );
    }
    y
}

pub(crate) fn unfold_input_grad<T: Real>(plan: &ConvPlan, dy: &[T], weight: &[T]) -> Vec<T> {
    let unfold = plan.unfold();
    let (rows, ncols) = (unfold.rows(), unfold.cols());
    let (xin, yout) = (plan.cin * plan.dense_len(), plan.cout * ncols);
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dx = vec![T::zero(); plan.batch * xin];
    for n in 0..plan.batch {
        T::gemm(
            rows,
            plan.cout,
            ncols,
            T::one(),
            weight,
            1,
            rows as isize,
            &dy[n * yout..(n + 1) * yout],
            ncols as isize,
            1,
            T::zero(),
            &mut cols,
            ncols as isize,
            1,
        );
        unfold.col2im(&cols, &mut dx[n * xin..(n + 1) * xin]);
    }
    dx
}

pub(crate) fn unfold_weight_grad<T: Real>(plan: &ConvPlan, x: &[T], dy: &[T], dw: &mut [T]) {
    let unfold = plan.unfold();
    let (rows, ncols) = (unfold.rows(), unfold.cols());
    let (xin, yout) = (plan.cin * plan.dense_len(), plan.cout * ncols);
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..plan.batch {
        unfold.im2col(&x[n * xin..(n + 1) * xin], &mut cols);
        T::gemm(
            plan.cout,
            ncols,
            rows,
            T::one(),
            &dy[n * yout..(n + 1) * yout],
            ncols as isize,
            1,
            &cols,
            1,
            ncols as isize,
            T::one(),
            dw,
            rows as isize,
            1,
        );
    }
}

/// Per-channel sum over batch and space of a `[N, C, S]` buffer.
pub(crate) fn channel_sums<T: Real>(batch: usize, channels: usize, g: &[T]) -> Vec<T> {
    let per = g.len() / (batch * channels).max(1);
    let mut out = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let base = (n * channels + c) * per;
            *acc += g[base..base + per].iter().copied().sum::<T>();
        }
    }
    out
}

pub(crate) fn add_channel_bias<T: Real>(y: &mut [T], batch: usize, bias: &[T]) {
    let channels = bias.len();
    let per = y.len() / (batch * channels).max(1);
    for n in 0..batch {
        for (c, &b) in bias.iter().enumerate() {
            let base = (n * channels + c) * per;
            for v in &mut y[base..base + per] {
                *v += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_formulas() {
        let g = ConvGeometry::new(3, 2, 1);
        assert_eq!(conv_out_extent(32, g).unwrap(), 16);
        assert_eq!(conv_out_extent(1, g).unwrap(), 1);
        assert_eq!(conv_transpose_out_extent(16, g, 1).unwrap(), 32);
        assert!(conv_transpose_out_extent(16, g, 2).is_err());
        assert!(conv_out_extent(1, ConvGeometry::new(3, 1, 0)).is_err());
        assert!(conv_out_extent(8, ConvGeometry::new(3, 0, 1)).is_err());
        assert!(conv_out_extent(8, ConvGeometry::new(2, 1, 1)).is_err());
    }

    #[test]
    fn unfold_valid_range_matches_brute_force() {
        for &(k, s, p, extent) in &[
            (3, 1, 1, 5),
            (3, 2, 1, 8),
            (3, 2, 0, 7),
            (1, 2, 0, 4),
            (3, 1, 0, 3),
        ] {
            let geom = ConvGeometry::new(k, s, p);
            let out = conv_out_extent(extent, geom).unwrap();
            let u = Unfold {
                channels: 1,
                input: [extent; 3],
                output: [out; 3],
                geom,
            };
            for off in 0..k {
                let (lo, hi) = u.valid_range(off, extent, out);
                for o in 0..out {
                    let i = (o * s + off) as isize - p as isize;
                    let inside = i >= 0 && (i as usize) < extent;
                    assert_eq!(inside, o >= lo && o < hi, "k{k} s{s} p{p} off{off} o{o}");
                }
            }
        }
    }
}
