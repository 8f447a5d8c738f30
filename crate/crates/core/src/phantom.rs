//! Seeded analytic phantoms: nested deformed ellipsoidal shells with
//! class-separable intensity bands, a smooth low-frequency bias field, and
//! truncated Gaussian noise.
//!
//! The phantom is a continuous field over the unit cube; a voxel at grid
//! index `(ix, iy, iz)` samples the field at `(ix/nx, iy/ny, iz/nz)`.
//! Because the field depends only on the seed, sampling the same seed at
//! half the resolution (doubled voxel size) reproduces the full-resolution
//! values at shared sample points exactly.
//!
//! Anatomical realism is not a goal: the phantoms only need multi-scale
//! structure, smooth boundaries, and separable intensities so interpolation
//! quality is measurable.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::volgeom::Volume;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

/// Seeded description of one synthetic volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: (usize, usize, usize),
    /// Number of classes including background; `shells` - 1 nested surfaces.
    pub shells: usize,
    /// Per-class intensity bands, pairwise disjoint with gaps of at least
    /// 0.05; class intensity is the band center.
    pub bands: Vec<(f32, f32)>,
    /// Angular modulation amplitude of the shell surfaces.
    pub deform_amp: f64,
    /// Peak amplitude of the smooth additive intensity bias.
    pub bias_amp: f64,
    /// Standard deviation of the additive noise (truncated at 3 sigma).
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: (64, 64, 64),
            shells: 3,
            bands: vec![(0.00, 0.10), (0.35, 0.55), (0.70, 0.90)],
            deform_amp: 0.15,
            bias_amp: 0.04,
            noise_sigma: 0.01,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed_and_dims(seed: u64, dims: (usize, usize, usize)) -> Self {
        Self {
            seed,
            dims,
            ..Self::default()
        }
    }

    pub fn band_center(&self, class: u8) -> f32 {
        let (lo, hi) = self.bands[class as usize];
        (lo + hi) / 2.0
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(PhantomError::InvalidSpec("empty dims".into()));
        }
        if self.shells < 2 || self.bands.len() != self.shells {
            return Err(PhantomError::InvalidSpec(format!(
                "need one band per class: {} shells, {} bands",
                self.shells,
                self.bands.len()
            )));
        }
        let mut min_gap = f32::INFINITY;
        for (i, &(lo, hi)) in self.bands.iter().enumerate() {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                return Err(PhantomError::InvalidSpec(format!(
                    "band {i} [{lo}, {hi}] is not a sub-interval of [0, 1]"
                )));
            }
            if i > 0 {
                let gap = lo - self.bands[i - 1].1;
                min_gap = min_gap.min(gap);
                if gap < 0.05 {
                    return Err(PhantomError::InvalidSpec(format!(
                        "bands {} and {i} overlap or leave a gap below 0.05",
                        i - 1
                    )));
                }
            }
        }
        if self.noise_sigma < 0.0 || self.noise_sigma as f32 >= min_gap / 2.0 {
            return Err(PhantomError::InvalidSpec(format!(
                "noise sigma {} must be below half the minimum band gap {}",
                self.noise_sigma,
                min_gap / 2.0
            )));
        }
        if !(0.0..1.0).contains(&self.deform_amp) || self.bias_amp < 0.0 {
            return Err(PhantomError::InvalidSpec(
                "deformation amplitude must be in [0, 1), bias amplitude non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-voxel class labels matching a generated [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: (usize, usize, usize),
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: (usize, usize, usize), labels: Vec<u8>) -> Result<Self, PhantomError> {
        if labels.len() != dims.0 * dims.1 * dims.2 {
            return Err(PhantomError::InvalidSpec(format!(
                "label count {} does not match dims {:?}",
                labels.len(),
                dims
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[x + self.dims.0 * (y + self.dims.1 * z)]
    }

    /// The axial plane `z == index` in `(x, y)` order, matching slice
    /// extraction on volumes.
    pub fn axial_plane(&self, index: usize) -> Vec<u8> {
        let (nx, ny, _) = self.dims;
        let mut out = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            for y in 0..ny {
                out.push(self.at(x, y, index));
            }
        }
        out
    }

    /// Keeps only the first `nz` axial planes.
    pub fn crop_axial(&self, nz: usize) -> LabelVolume {
        assert!(nz >= 1 && nz <= self.dims.2);
        let (nx, ny, _) = self.dims;
        LabelVolume {
            dims: (nx, ny, nz),
            labels: self.labels[..nx * ny * nz].to_vec(),
        }
    }
}

struct Field {
    center: [f64; 3],
    inv_axes: [f64; 3],
    radii: Vec<f64>,
    deform: [f64; 6],
    deform_amp: f64,
    bias_freq: [[f64; 3]; 3],
    bias_phase: [f64; 3],
    bias_weight: [f64; 3],
    bias_amp: f64,
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn symmetric(rng: &mut ChaCha8Rng) -> f64 {
    unit(rng) * 2.0 - 1.0
}

impl Field {
    fn from_spec(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let center = [
            0.5 + symmetric(rng) * 0.04,
            0.5 + symmetric(rng) * 0.04,
            0.5 + symmetric(rng) * 0.04,
        ];
        let inv_axes = [
            1.0 / (1.0 + symmetric(rng) * 0.15),
            1.0 / (1.0 + symmetric(rng) * 0.15),
            1.0 / (1.0 + symmetric(rng) * 0.15),
        ];
        let surfaces = spec.shells - 1;
        let mut radii = Vec::with_capacity(surfaces);
        let mut r = 0.42 * (1.0 + symmetric(rng) * 0.06);
        for _ in 0..surfaces {
            radii.push(r);
            r *= 0.62 * (1.0 + symmetric(rng) * 0.08);
        }
        let deform = [
            symmetric(rng),
            symmetric(rng),
            symmetric(rng),
            symmetric(rng),
            symmetric(rng),
            symmetric(rng),
        ];
        let mut bias_freq = [[0.0; 3]; 3];
        let mut bias_phase = [0.0; 3];
        let mut bias_weight = [0.0; 3];
        for m in 0..3 {
            for d in 0..3 {
                bias_freq[m][d] = 1.0 + (rng.next_u32() % 2) as f64;
            }
            bias_phase[m] = unit(rng) * std::f64::consts::TAU;
            bias_weight[m] = symmetric(rng);
        }
        Self {
            center,
            inv_axes,
            radii,
            deform,
            deform_amp: spec.deform_amp,
            bias_freq,
            bias_phase,
            bias_weight,
            bias_amp: spec.bias_amp,
        }
    }

    /// Class at a point of the unit cube: the number of nested surfaces
    /// containing it.
    fn class_at(&self, u: [f64; 3]) -> u8 {
        let v = [
            (u[0] - self.center[0]) * self.inv_axes[0],
            (u[1] - self.center[1]) * self.inv_axes[1],
            (u[2] - self.center[2]) * self.inv_axes[2],
        ];
        let rho = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if rho < 1e-12 {
            return self.radii.len() as u8;
        }
        let d = [v[0] / rho, v[1] / rho, v[2] / rho];
        let c = &self.deform;
        let g = (c[0] * d[0]
            + c[1] * d[1]
            + c[2] * d[2]
            + c[3] * d[0] * d[1]
            + c[4] * d[1] * d[2]
            + c[5] * d[2] * d[0])
            / 4.5;
        let factor = 1.0 + self.deform_amp * g;
        let mut class = 0u8;
        for &r in &self.radii {
            if rho < r * factor {
                class += 1;
            }
        }
        class
    }

    fn bias_at(&self, u: [f64; 3]) -> f64 {
        let norm: f64 = self
            .bias_weight
            .iter()
            .map(|w| w.abs())
            .sum::<f64>()
            .max(1e-9);
        let mut b = 0.0;
        for m in 0..3 {
            let phase = std::f64::consts::TAU
                * (self.bias_freq[m][0] * u[0]
                    + self.bias_freq[m][1] * u[1]
                    + self.bias_freq[m][2] * u[2])
                + self.bias_phase[m];
            b += self.bias_weight[m] * phase.cos();
        }
        self.bias_amp * b / norm
    }
}

fn truncated_noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = unit(rng);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 3.0 {
            return z * sigma;
        }
    }
}

/// Generates the volume and its ground-truth labels; fully determined by
/// the spec.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, LabelVolume), PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let field = Field::from_spec(spec, &mut rng);
    let (nx, ny, nz) = spec.dims;
    let mut values = Vec::with_capacity(nx * ny * nz);
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let u = [
                    ix as f64 / nx as f64,
                    iy as f64 / ny as f64,
                    iz as f64 / nz as f64,
                ];
                let class = field.class_at(u);
                let mut v = spec.band_center(class) as f64 + field.bias_at(u);
                if spec.noise_sigma > 0.0 {
                    v += truncated_noise(&mut rng, spec.noise_sigma);
                }
                values.push(v.clamp(0.0, 1.0) as f32);
                labels.push(class);
            }
        }
    }
    let vol = Volume::new(spec.dims, values).expect("clamped values");
    let lab = LabelVolume::new(spec.dims, labels)?;
    Ok((vol, lab))
}

/// Classifies every voxel by its intensity: a value inside a band takes that
/// band's class, anything else the nearest band center, ties going to the
/// lower class index. Inverts `generate` exactly when noise and bias are
/// zero.
pub fn segment_by_bands(vol: &Volume, spec: &PhantomSpec) -> LabelVolume {
    let centers: Vec<f32> = (0..spec.shells)
        .map(|c| spec.band_center(c as u8))
        .collect();
    let labels = vol
        .data()
        .iter()
        .map(|&value| {
            for (c, &(lo, hi)) in spec.bands.iter().enumerate() {
                if (lo..=hi).contains(&value) {
                    return c as u8;
                }
            }
            let mut best = 0u8;
            let mut best_dist = f32::INFINITY;
            for (c, &center) in centers.iter().enumerate() {
                let dist = (value - center).abs();
                if dist < best_dist {
                    best_dist = dist;
                    best = c as u8;
                }
            }
            best
        })
        .collect();
    LabelVolume::new(vol.dims(), labels).expect("dims match by construction")
}

/// Index ranges of the fixed train/validation/test convention:
/// `floor(2n/3)` training volumes, `ceil(remainder/4)` validation, the rest
/// test. For n = 24 this gives 16/2/6.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_ranges(n: usize) -> SplitRanges {
    let train = 2 * n / 3;
    let rem = n - train;
    let val = rem.div_ceil(4);
    SplitRanges {
        train: 0..train,
        val: train..train + val,
        test: train + val..n,
    }
}

/// Generates `n` phantoms with seeds `base_seed .. base_seed + n`, all with
/// default appearance parameters at the given dims. Split membership follows
/// [`split_ranges`] over the returned order.
pub fn make_dataset(
    n: usize,
    base_seed: u64,
    dims: (usize, usize, usize),
) -> Result<Vec<(Volume, LabelVolume)>, PhantomError> {
    (0..n)
        .map(|i| generate(&PhantomSpec::with_seed_and_dims(base_seed + i as u64, dims)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::with_seed_and_dims(42, (24, 24, 24));
        let (v1, l1) = generate(&spec).unwrap();
        let (v2, l2) = generate(&spec).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn clean_phantom_hits_band_centers_exactly() {
        let spec = PhantomSpec {
            seed: 3,
            dims: (16, 16, 16),
            bias_amp: 0.0,
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let (vol, labels) = generate(&spec).unwrap();
        for (v, &c) in vol.data().iter().zip(labels.labels()) {
            assert_eq!(*v, spec.band_center(c));
        }
    }

    #[test]
    fn inner_class_fraction_is_reasonable_across_seeds() {
        for seed in 0..20 {
            let spec = PhantomSpec::with_seed_and_dims(seed, (32, 32, 32));
            let (_, labels) = generate(&spec).unwrap();
            let total = labels.labels().len() as f64;
            let class2 = labels.labels().iter().filter(|&&c| c == 2).count() as f64;
            let frac = class2 / total;
            assert!(
                (0.02..0.40).contains(&frac),
                "seed {seed}: class-2 fraction {frac}"
            );
        }
    }

    #[test]
    fn segmentation_inverts_clean_generation() {
        let spec = PhantomSpec {
            seed: 9,
            dims: (20, 20, 20),
            bias_amp: 0.0,
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let (vol, labels) = generate(&spec).unwrap();
        let seg = segment_by_bands(&vol, &spec);
        assert_eq!(seg, labels);
    }

    #[test]
    fn equidistant_value_takes_lower_class() {
        // Exactly representable centers 0.125 and 0.625; 0.375 is bitwise
        // equidistant to both and inside neither band.
        let spec = PhantomSpec {
            shells: 2,
            bands: vec![(0.0, 0.25), (0.5, 0.75)],
            ..PhantomSpec::default()
        };
        spec.validate().unwrap();
        let vol = Volume::constant((2, 2, 2), 0.375);
        let seg = segment_by_bands(&vol, &spec);
        assert!(seg.labels().iter().all(|&c| c == 0));
    }

    #[test]
    fn noisy_phantom_segmentation_agrees_with_ground_truth() {
        let spec = PhantomSpec::with_seed_and_dims(17, (32, 32, 32));
        let (vol, labels) = generate(&spec).unwrap();
        let seg = segment_by_bands(&vol, &spec);
        let agree = seg
            .labels()
            .iter()
            .zip(labels.labels())
            .filter(|(a, b)| a == b)
            .count() as f64;
        let frac = agree / labels.labels().len() as f64;
        assert!(frac > 0.95, "agreement {frac}");
    }

    #[test]
    fn half_resolution_samples_the_same_field() {
        let base = PhantomSpec {
            seed: 5,
            dims: (64, 64, 64),
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let coarse = PhantomSpec {
            dims: (32, 32, 32),
            ..base.clone()
        };
        let (v64, l64) = generate(&base).unwrap();
        let (v32, l32) = generate(&coarse).unwrap();
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let a = v64.at(2 * x, 2 * y, 2 * z);
                    let b = v32.at(x, y, z);
                    assert!((a - b).abs() < 1e-6, "({x},{y},{z}): {a} vs {b}");
                    assert_eq!(l64.at(2 * x, 2 * y, 2 * z), l32.at(x, y, z));
                }
            }
        }
    }

    #[test]
    fn dataset_volumes_are_distinct() {
        let set = make_dataset(3, 100, (16, 16, 16)).unwrap();
        assert_eq!(set.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                let a = set[i].0.data();
                let b = set[j].0.data();
                let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
                assert!(
                    diff as f64 > 0.01 * a.len() as f64,
                    "phantoms {i} and {j} differ in only {diff} voxels"
                );
            }
        }
    }

    #[test]
    fn split_convention_is_fixed() {
        let s = split_ranges(24);
        assert_eq!(s.train, 0..16);
        assert_eq!(s.val, 16..18);
        assert_eq!(s.test, 18..24);
        let s = split_ranges(3);
        assert_eq!(s.train.len(), 2);
        assert_eq!(s.val.len(), 1);
        assert_eq!(s.test.len(), 0);
        // the three ranges partition 0..n
        for n in 1..40 {
            let s = split_ranges(n);
            assert_eq!(s.train.end, s.val.start);
            assert_eq!(s.val.end, s.test.start);
            assert_eq!(s.test.end, n);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let spec = PhantomSpec {
            noise_sigma: 0.2, // half the minimum gap is 0.075
            ..PhantomSpec::default()
        };
        assert!(matches!(generate(&spec), Err(PhantomError::InvalidSpec(_))));
        let spec = PhantomSpec {
            bands: vec![(0.0, 0.2), (0.22, 0.4), (0.7, 0.9)],
            ..PhantomSpec::default()
        };
        assert!(generate(&spec).is_err());
        let spec = PhantomSpec {
            bands: vec![(0.0, 0.1), (0.35, 0.55)],
            ..PhantomSpec::default()
        };
        assert!(generate(&spec).is_err());
    }
}
