//! Image-quality metrics and dataset-level evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};

use crate::dosesim::{denormalize, normalize, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Label used for the unprocessed low-dose rows.
pub const LOW_DOSE: &str = "Low-Dose";

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if gt.is_empty() {
        return Err(Error::invalid("empty volume"));
    }
    Ok(())
}

fn mse(pred: &Tensor, gt: &Tensor) -> f64 {
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum();
    sum / gt.len() as f64
}

fn range(gt: &Tensor) -> f64 {
    gt.max_value() as f64 - gt.min_value() as f64
}

/// Peak signal-to-noise ratio in dB, with the peak taken as the maximum of
/// `gt`. Identical volumes give `+inf`.
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let peak = gt.max_value() as f64;
    if !(peak > 0.0) {
        return Err(Error::invalid("ground truth has no positive voxel"));
    }
    let e = mse(pred, gt);
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Root-mean-square error as a percentage of the ground-truth range.
pub fn nrmse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let r = range(gt);
    if !(r > 0.0) {
        return Err(Error::invalid("ground truth is constant; NRMSE is undefined"));
    }
    Ok(100.0 * mse(pred, gt).sqrt() / r)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `[d, h, w]` volume.
fn filter_valid(v: &[f64], dims: [usize; 3], k: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let n = k.len();
    let mut cur = v.to_vec();
    let mut dims = dims;
    for axis in 0..3 {
        let mut out_dims = dims;
        out_dims[axis] = dims[axis] + 1 - n;
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let [od, oh, ow] = out_dims;
        let mut out = vec![0.0; od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let base = (z * dims[1] + y) * dims[2] + x;
                    out[(z * oh + y) * ow + x] = k.iter().enumerate().map(|(j, &kj)| kj * cur[base + j * stride]).sum();
                }
            }
        }
        cur = out;
        dims = out_dims;
    }
    (cur, dims)
}

fn volume_dims(t: &Tensor) -> Result<[usize; 3]> {
    let s = t.shape();
    if s.len() < 3 || s[..s.len() - 3].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!("expected a single volume, got shape {s:?}")));
    }
    Ok([s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]])
}

/// Mean structural similarity over every valid 7³ Gaussian window.
/// `dynamic_range` defaults to the range of `gt`.
pub fn ssim3d(pred: &Tensor, gt: &Tensor, dynamic_range: Option<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let dims = volume_dims(gt)?;
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::invalid(format!(
            "volume {dims:?} is smaller than the {SSIM_WINDOW}^3 SSIM window"
        )));
    }
    let l = dynamic_range.unwrap_or_else(|| range(gt));
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::invalid("SSIM dynamic range must be positive"));
    }
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, _) = filter_valid(&x, dims, &k);
    let (my, _) = filter_valid(&y, dims, &k);
    let (mxx, _) = filter_valid(&prod(&x, &x), dims, &k);
    let (myy, _) = filter_valid(&prod(&y, &y), dims, &k);
    let (mxy, _) = filter_valid(&prod(&x, &y), dims, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) if s == "inf" => Ok(f64::INFINITY),
        Num::S(s) => Err(serde::de::Error::custom(format!("bad PSNR value {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
}

pub fn score(pred: &Tensor, gt: &Tensor) -> Result<Scores> {
    Ok(Scores {
        psnr: psnr(pred, gt)?,
        ssim: ssim3d(pred, gt, None)?,
        nrmse: nrmse(pred, gt)?,
    })
}

/// Mean scores for one method at one dose level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub drf: u32,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub method: String,
    pub drf: u32,
    pub volume: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub per_volume: Vec<VolumeScore>,
}

impl MetricsReport {
    /// Rebuilds the mean rows from the per-volume scores, ordered by DRF
    /// and then by first appearance of each method.
    fn aggregate(per_volume: Vec<VolumeScore>) -> Self {
        let mut keys: Vec<(u32, String)> = Vec::new();
        for v in &per_volume {
            if !keys.iter().any(|(d, m)| *d == v.drf && *m == v.method) {
                keys.push((v.drf, v.method.clone()));
            }
        }
        keys.sort_by_key(|(d, _)| *d);
        let rows = keys
            .into_iter()
            .map(|(drf, method)| {
                let sel: Vec<&Scores> = per_volume
                    .iter()
                    .filter(|v| v.drf == drf && v.method == method)
                    .map(|v| &v.scores)
                    .collect();
                let n = sel.len() as f64;
                let mean = |f: fn(&Scores) -> f64| sel.iter().map(|s| f(s)).sum::<f64>() / n;
                MetricsRow {
                    method,
                    drf,
                    scores: Scores {
                        psnr: mean(|s| s.psnr),
                        ssim: mean(|s| s.ssim),
                        nrmse: mean(|s| s.nrmse),
                    },
                }
            })
            .collect();
        MetricsReport { rows, per_volume }
    }

    pub fn row(&self, method: &str, drf: u32) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method && r.drf == drf)
    }

    /// Combines reports; rows already present (same method and DRF) are
    /// kept from the earlier report.
    pub fn merge(reports: &[MetricsReport]) -> Self {
        let mut all: Vec<VolumeScore> = Vec::new();
        for r in reports {
            for v in &r.per_volume {
                let dup = all
                    .iter()
                    .any(|a| a.method == v.method && a.drf == v.drf && a.volume == v.volume);
                if !dup {
                    all.push(v.clone());
                }
            }
        }
        Self::aggregate(all)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<5} {:<width$} {:>9} {:>7} {:>8}", "DRF", "method", "PSNR", "SSIM", "NRMSE%");
        for r in &self.rows {
            let p = if r.scores.psnr.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.3}", r.scores.psnr)
            };
            let _ = writeln!(
                s,
                "{:<5} {:<width$} {:>9} {:>7.4} {:>8.3}",
                r.drf, r.method, p, r.scores.ssim, r.scores.nrmse
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores a predictor on a dataset split. For each volume and DRF the raw
/// low-dose scan is compared with the standard-dose scan, and so is the
/// predictor output; `predict` maps a normalized low-dose volume to a
/// normalized estimate, and scoring happens in denormalized units.
pub fn evaluate(
    dataset: &Dataset,
    split: Split,
    drfs: &[u32],
    method: &str,
    mut predict: impl FnMut(&Tensor, u32) -> Result<Tensor>,
) -> Result<MetricsReport> {
    score_split(dataset, split, drfs, Some((method, &mut predict)))
}

/// Only the low-dose rows; needs no model.
pub fn evaluate_low_dose(dataset: &Dataset, split: Split, drfs: &[u32]) -> Result<MetricsReport> {
    score_split(dataset, split, drfs, None)
}

type Predictor<'a> = (&'a str, &'a mut dyn FnMut(&Tensor, u32) -> Result<Tensor>);

fn score_split(dataset: &Dataset, split: Split, drfs: &[u32], mut method: Option<Predictor>) -> Result<MetricsReport> {
    let volumes = dataset.manifest.split(split);
    if volumes.is_empty() {
        return Err(Error::invalid(format!("split {split:?} is empty")));
    }
    if drfs.is_empty() {
        return Err(Error::invalid("no DRF selected for evaluation"));
    }
    let max = dataset.manifest.max_intensity;
    let mut per_volume = Vec::new();
    for &drf in drfs {
        for &v in &volumes {
            let gt = &dataset.standard[v];
            let low = dataset.low_dose(v, drf)?;
            let id = dataset.manifest.volumes[v].id;
            per_volume.push(VolumeScore {
                method: LOW_DOSE.to_string(),
                drf,
                volume: id,
                scores: score(low, gt)?,
            });
            let Some((name, predict)) = method.as_mut() else {
                continue;
            };
            let out = predict(&normalize(low, max)?, drf)?;
            if out.shape() != gt.shape() {
                return Err(Error::Incompatible(format!(
                    "model output {:?} does not match dataset volumes {:?}",
                    out.shape(),
                    gt.shape()
                )));
            }
            per_volume.push(VolumeScore {
                method: name.to_string(),
                drf,
                volume: id,
                scores: score(&denormalize(&out, max)?, gt)?,
            });
        }
    }
    Ok(MetricsReport::aggregate(per_volume))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn seeded(seed: u64, e: usize) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let gt: Tensor = Tensor::uniform(vec![1, 1, e, e, e], 0.0, 2.0, &mut rng);
        let noise: Tensor = Tensor::normal(vec![1, 1, e, e, e], 0.1, &mut rng);
        let pred = Tensor::from_fn(vec![1, 1, e, e, e], |i| gt.data()[i] + noise.data()[i]);
        (pred, gt)
    }

    #[test]
    fn psnr_examples() {
        let gt = Tensor::from_fn(vec![1, 1, 2, 2, 2], |i| if i == 0 { 1.0 } else { 0.0 });
        assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
        let pred = gt.map(|v| v + 0.1);
        assert!((psnr(&pred, &gt).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&pred, &Tensor::zeros(vec![1, 1, 2, 2, 1])).is_err());
    }

    #[test]
    fn psnr_and_nrmse_match_two_pass_oracle() {
        let (pred, gt) = seeded(3, 8);
        let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
        let g: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
        let mut max = f64::MIN;
        let mut min = f64::MAX;
        for &v in &g {
            max = max.max(v);
            min = min.min(v);
        }
        let mut sse = 0.0;
        for i in 0..g.len() {
            sse += (p[i] - g[i]) * (p[i] - g[i]);
        }
        let m = sse / g.len() as f64;
        assert!((psnr(&pred, &gt).unwrap() - 10.0 * (max * max / m).log10()).abs() < 1e-9);
        assert!((nrmse(&pred, &gt).unwrap() - 100.0 * m.sqrt() / (max - min)).abs() < 1e-9);
    }

    #[test]
    fn nrmse_examples() {
        let gt = Tensor::from_fn(vec![1, 1, 2, 2, 2], |i| i as f32 / 7.0);
        assert_eq!(nrmse(&gt, &gt).unwrap(), 0.0);
        let pred = gt.map(|v| v + 0.01);
        assert!((nrmse(&pred, &gt).unwrap() - 1.0).abs() < 1e-5);
        assert!(nrmse(&gt, &Tensor::ones(vec![1, 1, 2, 2, 2])).is_err());
    }

    #[test]
    fn ssim_of_identical_volumes_is_one() {
        let (_, gt) = seeded(1, 10);
        assert!((ssim3d(&gt, &gt, None).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_constant_volumes_closed_form() {
        let (a, b, l) = (0.3, 0.7, 1.0);
        let x = Tensor::full(vec![1, 1, 8, 8, 8], a as f32);
        let y = Tensor::full(vec![1, 1, 8, 8, 8], b as f32);
        let c1 = (SSIM_K1 * l).powi(2);
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim3d(&x, &y, Some(l)).unwrap();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        // Constant ground truth has no range to default to.
        assert!(ssim3d(&x, &y, None).is_err());
    }

    /// Direct per-window evaluation with a full 3D kernel.
    fn naive_ssim(pred: &Tensor, gt: &Tensor) -> f64 {
        let e = gt.shape()[4];
        let n = SSIM_WINDOW;
        let c = (n / 2) as f64;
        let mut w = vec![0.0; n * n * n];
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
                    w[(i * n + j) * n + k] = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                    total += w[(i * n + j) * n + k];
                }
            }
        }
        w.iter_mut().for_each(|v| *v /= total);
        let g: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
        let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
        let gmax = g.iter().cloned().fold(f64::MIN, f64::max);
        let gmin = g.iter().cloned().fold(f64::MAX, f64::min);
        let l = gmax - gmin;
        let (c1, c2) = ((SSIM_K1 * l).powi(2), (SSIM_K2 * l).powi(2));
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
                                ux += wt * p[idx(i, j, k)];
                                uy += wt * g[idx(i, j, k)];
                            }
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..n {
                        for j in 0..n {
                            for k in 0..n {
                                let wt = w[(i * n + j) * n + k];
                                let dx = p[idx(i, j, k)] - ux;
                                let dy = g[idx(i, j, k)] - uy;
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

    #[test]
    fn ssim_matches_naive_window_oracle() {
        let (pred, gt) = seeded(11, 16);
        let got = ssim3d(&pred, &gt, None).unwrap();
        let want = naive_ssim(&pred, &gt);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(got < 1.0 && got > -1.0);
    }

    #[test]
    fn ssim_rejects_small_volumes() {
        let t = Tensor::ones(vec![1, 1, 6, 8, 8]);
        assert!(ssim3d(&t, &t, Some(1.0)).is_err());
    }

    #[test]
    fn offset_moves_psnr_not_structure() {
        let (pred, gt) = seeded(5, 10);
        let shifted = pred.map(|v| v + 0.2);
        assert!(psnr(&shifted, &gt).unwrap() < psnr(&pred, &gt).unwrap());
        assert!(nrmse(&shifted, &gt).unwrap() > nrmse(&pred, &gt).unwrap());
    }

    #[test]
    fn report_serializes_infinite_psnr() {
        let report = MetricsReport::aggregate(vec![VolumeScore {
            method: "m".into(),
            drf: 4,
            volume: 0,
            scores: Scores {
                psnr: f64::INFINITY,
                ssim: 1.0,
                nrmse: 0.0,
            },
        }]);
        let json = report.to_json();
        assert!(json.contains("\"inf\""));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.to_table().contains("inf"));
    }
}
