//! Brute-force reference implementations shared by the test targets.
#![allow(dead_code)]

use lowdose::tensor::Rng;
use lowdose::Tensor;

/// Direct nested-loop convolution over the zero-padded input.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let &[n, cin, d, h, wd] = x.shape() else { panic!() };
    let &[cout, _, k, _, _] = w.shape() else { panic!() };
    let out = |e: usize| (e + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out(d), out(h), out(wd));
    let xi = |b: usize, c: usize, z: usize, y: usize, x: usize| (((b * cin + c) * d + z) * h + y) * wd + x;
    let wi = |o: usize, c: usize, i: usize, j: usize, l: usize| (((o * cin + c) * k + i) * k + j) * k + l;
    let mut y = Vec::with_capacity(n * cout * od * oh * ow);
    for bn in 0..n {
        for o in 0..cout {
            for z in 0..od {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = b.data()[o];
                        for ci in 0..cin {
                            for i in 0..k {
                                for j in 0..k {
                                    for l in 0..k {
                                        let (pz, py, px) = (z * stride + i, r * stride + j, c * stride + l);
                                        if pz < pad || py < pad || px < pad {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (pz - pad, py - pad, px - pad);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        acc += x.data()[xi(bn, ci, iz, iy, ix)] * w.data()[wi(o, ci, i, j, l)];
                                    }
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
        }
    }
    (vec![n, cout, od, oh, ow], y)
}

/// Peak signal-to-noise ratio with the ground-truth maximum as peak.
pub fn psnr(pred: &[f64], gt: &[f64]) -> f64 {
    let max = gt.iter().cloned().fold(f64::MIN, f64::max);
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / gt.len() as f64;
    10.0 * (max * max / mse).log10()
}

/// RMSE as a percentage of the ground-truth range.
pub fn nrmse(pred: &[f64], gt: &[f64]) -> f64 {
    let max = gt.iter().cloned().fold(f64::MIN, f64::max);
    let min = gt.iter().cloned().fold(f64::MAX, f64::min);
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / gt.len() as f64;
    100.0 * mse.sqrt() / (max - min)
}

/// SSIM averaged over every valid cubic window of width `n`, each window
/// weighted by a full 3D Gaussian; `e` is the cube extent.
pub fn ssim(pred: &[f64], gt: &[f64], e: usize, n: usize, sigma: f64, k1: f64, k2: f64) -> f64 {
    let c = (n / 2) as f64;
    let mut w = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
                w[(i * n + j) * n + k] = (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let gmax = gt.iter().cloned().fold(f64::MIN, f64::max);
    let gmin = gt.iter().cloned().fold(f64::MAX, f64::min);
    let l = gmax - gmin;
    let (c1, c2) = ((k1 * l).powi(2), (k2 * l).powi(2));
    let m = e - n + 1;
    let mut sum = 0.0;
    for z in 0..m {
        for y in 0..m {
            for x in 0..m {
                let idx = |i: usize, j: usize, k: usize| ((z + i) * e + y + j) * e + x + k;
                let (mut ux, mut uy) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            let wt = w[(i * n + j) * n + k];
                            ux += wt * pred[idx(i, j, k)];
                            uy += wt * gt[idx(i, j, k)];
                        }
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            let wt = w[(i * n + j) * n + k];
                            let dx = pred[idx(i, j, k)] - ux;
                            let dy = gt[idx(i, j, k)] - uy;
                            vx += wt * dx * dx;
                            vy += wt * dy * dy;
                            cxy += wt * dx * dy;
                        }
                    }
                }
                sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
        }
    }
    sum / (m * m * m) as f64
}

pub struct Geometry {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dims: [usize; 3],
}

/// The reference geometry first, then seeded random ones with kernels 1,
/// 3 and 5, strides 1 to 3 and non-cubic extents.
pub fn random_geometries(count: usize) -> Vec<Geometry> {
    let mut rng = Rng::new(2024);
    let mut out = vec![Geometry {
        n: 1,
        cin: 2,
        cout: 4,
        k: 3,
        stride: 2,
        pad: 1,
        dims: [8, 8, 8],
    }];
    while out.len() < count {
        let k = [1, 3, 5][rng.below(3)];
        let pad = rng.below(k / 2 + 2);
        let mut dims = [0; 3];
        for d in &mut dims {
            *d = 1 + rng.below(8);
        }
        if dims.iter().any(|&d| d + 2 * pad < k) {
            continue;
        }
        out.push(Geometry {
            n: 1 + rng.below(2),
            cin: 1 + rng.below(3),
            cout: 1 + rng.below(3),
            k,
            stride: 1 + rng.below(3),
            pad,
            dims,
        });
    }
    out
}
