//! Stride-1 convolution without a full unfold.
//!
//! Volumes are embedded in a zero-padded frame. In that frame every kernel
//! tap is a constant flat offset, so the forward pass and the input gradient
//! become sums of shifted rows, computed by a register-blocked kernel.
//! Positions whose row or column runs past the output extent are computed and
//! then discarded. Reductions run tap-major and channel-minor.
//!
//! The kernel uses separate multiply and add (no fused contraction), so the
//! vectorized and scalar builds produce identical bits.

use super::conv::ConvPlan;
use super::Real;

/// Slack appended to frame buffers so that full-width column blocks never
/// read or write out of bounds.
const SLACK: usize = 32;

fn round_up(n: usize) -> usize {
    n.div_ceil(SLACK) * SLACK
}

struct Frame {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    k: usize,
    p: usize,
    /// Padded extents.
    dims: [usize; 3],
}

impl Frame {
    fn of(plan: &ConvPlan) -> Self {
        let (batch, cin, cout, input, output, geom) = plan.parts();
        debug_assert_eq!(geom.stride, 1);
        let p = geom.padding;
        Frame {
            batch,
            cin,
            cout,
            input,
            output,
            k: geom.kernel,
            p,
            dims: input.map(|e| e + 2 * p),
        }
    }

    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }

    fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    /// Flat span covering every output position in frame coordinates.
    fn span(&self) -> usize {
        let [od, oh, ow] = self.output;
        let [_, fh, fw] = self.dims;
        (od - 1) * fh * fw + (oh - 1) * fw + ow
    }

    fn dense_in(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    fn dense_out(&self) -> usize {
        self.cout * self.output.iter().product::<usize>()
    }

    fn offsets(&self) -> Vec<usize> {
        let k = self.k;
        let [_, fh, fw] = self.dims;
        (0..self.k3())
            .map(|t| {
                let (kd, kh, kw) = (t / (k * k), (t / k) % k, t % k);
                kd * fh * fw + kh * fw + kw
            })
            .collect()
    }

    /// Copies `[C, D, H, W]` into the frame interior; channel `c` starts at
    /// `c * stride`.
    fn pad<T: Real>(&self, src: &[T], dst: &mut [T], stride: usize) {
        self.interior(self.cin, stride, |s, t, w| dst[t..t + w].copy_from_slice(&src[s..s + w]));
    }

    fn crop<T: Real>(&self, src: &[T], dst: &mut [T], stride: usize) {
        self.interior(self.cin, stride, |s, t, w| dst[s..s + w].copy_from_slice(&src[t..t + w]));
    }

    fn interior(&self, channels: usize, stride: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.input;
        let [_, fh, fw] = self.dims;
        let p = self.p;
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    f(((c * d + z) * h + y) * w, c * stride + ((z + p) * fh + y + p) * fw + p, w);
                }
            }
        }
    }

    /// Visits output rows: dense offset, offset in span layout, row length.
    fn span_rows(&self, stride: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [od, oh, ow] = self.output;
        let [_, fh, fw] = self.dims;
        for c in 0..self.cout {
            for z in 0..od {
                for y in 0..oh {
                    f(((c * od + z) * oh + y) * ow, c * stride + z * fh * fw + y * fw, ow);
                }
            }
        }
    }
}

/// Operands of one shifted-row sum:
/// `out[o, j] = init[o] + Σ_tap Σ_i wt[tap, i, o] · inp[i, j + offsets[tap]]`.
struct Shifted<'a, T> {
    inp: &'a [T],
    istride: usize,
    ichan: usize,
    offsets: &'a [usize],
    wt: &'a [T],
    ochan: usize,
    init: &'a [T],
    ostride: usize,
    /// Column count; a multiple of [`SLACK`].
    cols: usize,
}

#[inline(always)]
fn block<T: Real, const CB: usize, const W: usize>(s: &Shifted<T>, o0: usize, out: &mut [T]) {
    for j in (0..s.cols).step_by(W) {
        let mut acc = [[T::zero(); W]; CB];
        for (c, a) in acc.iter_mut().enumerate() {
            *a = [s.init[o0 + c]; W];
        }
        for (tap, &off) in s.offsets.iter().enumerate() {
            for i in 0..s.ichan {
                let base = i * s.istride + j + off;
                let xs: &[T; W] = s.inp[base..base + W].try_into().unwrap();
                let wrow = &s.wt[(tap * s.ichan + i) * s.ochan + o0..][..CB];
                for c in 0..CB {
                    let w = wrow[c];
                    for l in 0..W {
                        acc[c][l] += w * xs[l];
                    }
                }
            }
        }
        for (c, a) in acc.iter().enumerate() {
            let base = (o0 + c) * s.ostride + j;
            out[base..base + W].copy_from_slice(a);
        }
    }
}

#[inline(always)]
fn shifted_impl<T: Real>(s: &Shifted<T>, out: &mut [T]) {
    let mut o0 = 0;
    while o0 < s.ochan {
        match s.ochan - o0 {
            r if r >= 4 => {
                block::<T, 4, 8>(s, o0, out);
                o0 += 4;
            }
            r if r >= 2 => {
                block::<T, 2, 32>(s, o0, out);
                o0 += 2;
            }
            _ => {
                block::<T, 1, 32>(s, o0, out);
                o0 += 1;
            }
        }
    }
}

fn shifted<T: Real>(s: &Shifted<T>, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        unsafe fn wide<T: Real>(s: &Shifted<T>, out: &mut [T]) {
            shifted_impl(s, out)
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just checked.
            return unsafe { wide(s, out) };
        }
    }
    shifted_impl(s, out)
}

pub(crate) fn forward<T: Real>(plan: &ConvPlan, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let f = Frame::of(plan);
    let (vol, k3) = (f.volume(), f.k3());
    let cols = round_up(f.span());
    let (xin, yout) = (f.dense_in(), f.dense_out());
    // [tap][ci][co]
    let mut wt = vec![T::zero(); weight.len()];
    for co in 0..f.cout {
        for ci in 0..f.cin {
            for t in 0..k3 {
                wt[(t * f.cin + ci) * f.cout + co] = weight[(co * f.cin + ci) * k3 + t];
            }
        }
    }
    let offsets = f.offsets();
    let mut xpad = vec![T::zero(); f.cin * vol + SLACK];
    let mut ys = vec![T::zero(); f.cout * cols];
    let mut y = vec![T::zero(); f.batch * yout];
    for n in 0..f.batch {
        f.pad(&x[n * xin..(n + 1) * xin], &mut xpad, vol);
        let s = Shifted {
            inp: &xpad,
            istride: vol,
            ichan: f.cin,
            offsets: &offsets,
            wt: &wt,
            ochan: f.cout,
            init: bias,
            ostride: cols,
            cols,
        };
        shifted(&s, &mut ys);
        let yn = &mut y[n * yout..(n + 1) * yout];
        f.span_rows(cols, |d, sp, w| yn[d..d + w].copy_from_slice(&ys[sp..sp + w]));
    }
    y
}

pub(crate) fn input_grad<T: Real>(plan: &ConvPlan, dy: &[T], weight: &[T]) -> Vec<T> {
    let f = Frame::of(plan);
    let k3 = f.k3();
    let cols = round_up(f.volume());
    let (xin, yout) = (f.dense_in(), f.dense_out());
    // The gradient rows sit `lead` zeros into each channel so that every
    // shifted read index stays non-negative.
    let fwd = f.offsets();
    let lead = fwd.iter().copied().max().unwrap_or(0);
    let offsets: Vec<usize> = fwd.iter().map(|&o| lead - o).collect();
    let gstride = lead + cols;
    // [tap][co][ci]
    let mut wt = vec![T::zero(); weight.len()];
    for co in 0..f.cout {
        for ci in 0..f.cin {
            for t in 0..k3 {
                wt[(t * f.cout + co) * f.cin + ci] = weight[(co * f.cin + ci) * k3 + t];
            }
        }
    }
    let zero = vec![T::zero(); f.cin];
    let mut gs = vec![T::zero(); f.cout * gstride + SLACK];
    let mut dxpad = vec![T::zero(); f.cin * cols];
    let mut dx = vec![T::zero(); f.batch * xin];
    for n in 0..f.batch {
        let dn = &dy[n * yout..(n + 1) * yout];
        f.span_rows(gstride, |d, sp, w| {
            gs[lead + sp..lead + sp + w].copy_from_slice(&dn[d..d + w])
        });
        let s = Shifted {
            inp: &gs,
            istride: gstride,
            ichan: f.cout,
            offsets: &offsets,
            wt: &wt,
            ochan: f.cin,
            init: &zero,
            ostride: cols,
            cols,
        };
        shifted(&s, &mut dxpad);
        f.crop(&dxpad, &mut dx[n * xin..(n + 1) * xin], cols);
    }
    dx
}

/// Columns unfolded per GEMM in the weight gradient.
const TILE: usize = 512;

pub(crate) fn weight_grad<T: Real>(plan: &ConvPlan, x: &[T], dy: &[T], dw: &mut [T]) {
    let f = Frame::of(plan);
    let (vol, len, k3) = (f.volume(), f.span(), f.k3());
    let (xin, yout) = (f.dense_in(), f.dense_out());
    let offsets = f.offsets();
    let rows = f.cin * k3;
    let mut xpad = vec![T::zero(); f.cin * vol];
    let mut gs = vec![T::zero(); f.cout * len];
    let mut unfolded = vec![T::zero(); rows * TILE];
    for n in 0..f.batch {
        f.pad(&x[n * xin..(n + 1) * xin], &mut xpad, vol);
        let dn = &dy[n * yout..(n + 1) * yout];
        f.span_rows(len, |d, sp, w| gs[sp..sp + w].copy_from_slice(&dn[d..d + w]));
        for j0 in (0..len).step_by(TILE) {
            let t = TILE.min(len - j0);
            for ci in 0..f.cin {
                for (tap, &off) in offsets.iter().enumerate() {
                    let src = ci * vol + j0 + off;
                    let r = (ci * k3 + tap) * TILE;
                    unfolded[r..r + t].copy_from_slice(&xpad[src..src + t]);
                }
            }
            T::gemm(
                f.cout,
                t,
                rows,
                T::one(),
                &gs[j0..],
                len as isize,
                1,
                &unfolded,
                1,
                TILE as isize,
                T::one(),
                dw,
                rows as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::conv;
    use super::*;
    use crate::tensor::{Rng, Tensor};

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn agrees_with_unfold_route() {
        let mut rng = Rng::new(21);
        for &(cin, cout, k, p, e) in &[
            (2, 3, 3, 1, 5),
            (1, 2, 3, 0, 6),
            (3, 1, 1, 0, 4),
            (2, 2, 3, 2, 3),
            (1, 1, 5, 1, 5),
            (3, 9, 3, 1, 4),
            (9, 5, 3, 1, 3),
        ] {
            let x = Tensor::<f64>::uniform(vec![2, cin, e, e + 1, e + 2], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(vec![cout, cin, k, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(vec![cout], -1.0, 1.0, &mut rng);
            let plan = ConvPlan::conv(&x, &w, &b, 1, p).unwrap();
            let y1 = forward(&plan, x.data(), w.data(), b.data());
            let y2 = conv::unfold_forward(&plan, x.data(), w.data(), b.data());
            assert!(max_diff(&y1, &y2) < 1e-12, "forward");

            let dy = Tensor::<f64>::uniform(plan.strided_shape(), -1.0, 1.0, &mut rng);
            let g1 = input_grad(&plan, dy.data(), w.data());
            let g2 = conv::unfold_input_grad(&plan, dy.data(), w.data());
            assert!(max_diff(&g1, &g2) < 1e-12, "input grad");

            let mut w1 = vec![0.0; w.len()];
            let mut w2 = vec![0.0; w.len()];
            weight_grad(&plan, x.data(), dy.data(), &mut w1);
            conv::unfold_weight_grad(&plan, x.data(), dy.data(), &mut w2);
            assert!(max_diff(&w1, &w2) < 1e-11, "weight grad");
        }
    }

    /// The vectorized build must not change results.
    #[test]
    fn dispatch_is_bit_exact() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::uniform(vec![1, 3, 6, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(vec![5, 3, 3, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(vec![5], -1.0, 1.0, &mut rng);
        let plan = ConvPlan::conv(&x, &w, &b, 1, 1).unwrap();
        let f = Frame::of(&plan);
        let a = forward(&plan, x.data(), w.data(), b.data());
        // Scalar replay through the same kernel without the dispatch.
        let cols = round_up(f.span());
        let k3 = 27;
        let mut wt = vec![0.0; w.len()];
        for co in 0..5 {
            for ci in 0..3 {
                for t in 0..k3 {
                    wt[(t * 3 + ci) * 5 + co] = w.data()[(co * 3 + ci) * k3 + t];
                }
            }
        }
        let mut xpad = vec![0.0; 3 * f.volume() + SLACK];
        f.pad(x.data(), &mut xpad, f.volume());
        let offsets = f.offsets();
        let s = Shifted {
            inp: &xpad,
            istride: f.volume(),
            ichan: 3,
            offsets: &offsets,
            wt: &wt,
            ochan: 5,
            init: b.data(),
            ostride: cols,
            cols,
        };
        let mut ys = vec![0.0; 5 * cols];
        shifted_impl(&s, &mut ys);
        let mut b2 = vec![0.0; a.len()];
        f.span_rows(cols, |d, sp, w| b2[d..d + w].copy_from_slice(&ys[sp..sp + w]));
        assert_eq!(a, b2);
    }
}
