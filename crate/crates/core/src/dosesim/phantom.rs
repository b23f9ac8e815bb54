use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Body outline. Geometry is in fractions of the extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub uptake: f64,
    /// Per-volume relative jitter of the semi-axes, drawn from `±jitter`.
    pub jitter: f64,
}

/// Organs: one ellipsoid per uptake multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    pub uptakes: Vec<f64>,
    /// Semi-axis range as a fraction of the extent.
    pub size: [f64; 2],
}

/// Lesion spheres; radii in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    pub count: [usize; 2],
    pub radius: [f64; 2],
    pub uptake: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub extent: usize,
    pub body: BodySpec,
    pub organs: OrganSpec,
    pub lesions: LesionSpec,
    /// Gaussian smoothing width in voxels; 0 disables smoothing.
    pub smoothing: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: 32,
            body: BodySpec {
                center: [0.5, 0.5, 0.5],
                semi_axes: [0.44, 0.36, 0.30],
                uptake: 1.0,
                jitter: 0.08,
            },
            organs: OrganSpec {
                uptakes: vec![2.5, 4.0, 1.6],
                size: [0.07, 0.15],
            },
            lesions: LesionSpec {
                count: [1, 3],
                radius: [1.5, 3.0],
                uptake: 6.0,
            },
            smoothing: 0.7,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 || !self.extent.is_multiple_of(32) {
            return Err(Error::config(format!(
                "phantom extent must be a positive multiple of 32, got {}",
                self.extent
            )));
        }
        let b = &self.body;
        if b.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("degenerate body ellipsoid: zero semi-axis"));
        }
        if b.center.iter().zip(&b.semi_axes).any(|(&c, &a)| c - a < 0.0 || c + a > 1.0) {
            return Err(Error::invalid("body ellipsoid leaves the volume"));
        }
        if !(b.jitter >= 0.0 && b.jitter < 0.5) {
            return Err(Error::invalid("body jitter must lie in [0, 0.5)"));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(b.uptake) || !self.organs.uptakes.iter().all(|&u| positive(u)) || !positive(self.lesions.uptake) {
            return Err(Error::invalid("uptakes must be positive"));
        }
        let [s0, s1] = self.organs.size;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::invalid("degenerate organ size range"));
        }
        let [c0, c1] = self.lesions.count;
        let [r0, r1] = self.lesions.radius;
        if c0 > c1 || !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::invalid("empty lesion count or radius range"));
        }
        // Lesion centers sit within 0.6 of the body's normalized radius, so
        // the largest lesion must fit in the remaining 0.4 of the shortest
        // (jittered) semi-axis.
        let shortest = b.semi_axes.iter().copied().fold(f64::INFINITY, f64::min) * (1.0 - b.jitter);
        if c1 > 0 && r1 > 0.4 * shortest * self.extent as f64 {
            return Err(Error::invalid("lesions may extend outside the body"));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::invalid("smoothing width must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A generated phantom with the masks it was built from.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Tensor,
    pub body_mask: Vec<bool>,
    pub lesion_mask: Vec<bool>,
    /// Lesion centers (voxel coordinates, z/y/x) and radii.
    pub lesions: Vec<([f64; 3], f64)>,
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Point inside the unit ball scaled to at most `radius`, by rejection.
fn in_ball(rng: &mut Rng, radius: f64) -> [f64; 3] {
    loop {
        let u = [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return u.map(|v| v * radius);
        }
    }
}

/// Standard-dose phantom: body, organs, lesions, then Gaussian smoothing.
pub fn generate_phantom(spec: &PhantomSpec, rng: &mut Rng) -> Result<Tensor> {
    Ok(generate_phantom_detailed(spec, rng)?.volume)
}

pub fn generate_phantom_detailed(spec: &PhantomSpec, rng: &mut Rng) -> Result<Phantom> {
    spec.validate()?;
    let e = spec.extent;
    let ef = e as f64;
    let b = &spec.body;
    let body = Ellipsoid {
        center: b.center.map(|c| c * ef),
        axes: b.semi_axes.map(|a| a * ef * (1.0 + rng.uniform_in(-b.jitter, b.jitter))),
    };
    let inside_body = |u: [f64; 3]| -> [f64; 3] { [0, 1, 2].map(|i| body.center[i] + u[i] * body.axes[i]) };
    let organs: Vec<(Ellipsoid, f64)> = spec
        .organs
        .uptakes
        .iter()
        .map(|&m| {
            let center = inside_body(in_ball(rng, 0.5));
            let [s0, s1] = spec.organs.size;
            let axes = [0; 3].map(|_| rng.uniform_in(s0, s1) * ef);
            (Ellipsoid { center, axes }, m)
        })
        .collect();
    let [c0, c1] = spec.lesions.count;
    let count = rng.range_inclusive(c0, c1);
    let lesions: Vec<([f64; 3], f64)> = (0..count)
        .map(|_| {
            let center = inside_body(in_ball(rng, 0.6));
            let [r0, r1] = spec.lesions.radius;
            (center, rng.uniform_in(r0, r1))
        })
        .collect();

    let n = e * e * e;
    let mut data = vec![0f32; n];
    let mut body_mask = vec![false; n];
    let mut lesion_mask = vec![false; n];
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                if !body.contains(p) {
                    continue;
                }
                let i = (z * e + y) * e + x;
                body_mask[i] = true;
                let mut v = b.uptake;
                for (o, m) in &organs {
                    if o.contains(p) {
                        v = b.uptake * m;
                    }
                }
                let in_lesion = lesions
                    .iter()
                    .any(|(c, r)| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>() <= r * r);
                if in_lesion {
                    v = b.uptake * spec.lesions.uptake;
                    lesion_mask[i] = true;
                }
                data[i] = v as f32;
            }
        }
    }
    if spec.smoothing > 0.0 {
        gaussian_smooth(&mut data, e, spec.smoothing);
    }
    Ok(Phantom {
        volume: Tensor::new(vec![1, 1, e, e, e], data)?,
        body_mask,
        lesion_mask,
        lesions,
    })
}

/// Separable Gaussian blur of a cubic volume with zero boundary.
fn gaussian_smooth(data: &mut [f32], e: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let strides = [e * e, e, 1];
    let mut tmp = vec![0f32; data.len()];
    for &stride in &strides {
        for (i, out) in tmp.iter_mut().enumerate() {
            let pos = ((i / stride) % e) as isize;
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                let q = pos + j as isize - radius;
                if q >= 0 && q < e as isize {
                    let idx = (i as isize + (q - pos) * stride as isize) as usize;
                    acc += k * data[idx] as f64;
                }
            }
            *out = acc as f32;
        }
        data.copy_from_slice(&tmp);
    }
}
