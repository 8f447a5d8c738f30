//! Volume data model and axis geometry.
//!
//! A [`Volume`] is a dense scalar field over a 3D grid with named anatomical
//! axes: `x` is sagittal, `y` is coronal, `z` is axial. Values are normalized
//! intensities in `[0, 1]` and are stored x-fastest (`idx = x + nx*(y + ny*z)`),
//! the layout every other module and the on-disk format share.
//!
//! All operations here are pure: they never mutate their inputs.

use serde::{Deserialize, Serialize};

/// Anatomical viewing axes. Sagittal slices fix `x`, coronal fix `y`,
/// axial fix `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Sagittal,
    Coronal,
    Axial,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
            Axis::Axial => "axial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VolumeError {
    #[error("data length {got} does not match dims product {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("intensity {value} at linear index {index} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("volume extents must be positive, got {0}x{1}x{2}")]
    EmptyExtent(usize, usize, usize),
    #[error("axial extent {nz} is not compatible with sparsity factor {k}")]
    NonDivisibleExtent { nz: usize, k: usize },
    #[error("sparsity factor must be at least 2, got {0}")]
    BadSparsity(usize),
    #[error("index {index} out of range for {axis} extent {extent}")]
    IndexOutOfRange {
        axis: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("slab width must be odd and positive, got {0}")]
    EvenSlabWidth(usize),
    #[error("slices have inconsistent axes or dimensions")]
    InconsistentDims,
    #[error("slice index {0} is missing or duplicated")]
    MissingIndex(usize),
    #[error("axial interpolation needs at least 2 slices, got {0}")]
    TooFewSlices(usize),
}

/// Dense 3D scalar field with intensities in `[0, 1]`, stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    data: Vec<f32>,
}

impl Volume {
    /// Builds a volume, validating length and the `[0, 1]` intensity range.
    pub fn new(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self, VolumeError> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolumeError::EmptyExtent(nx, ny, nz));
        }
        let want = nx * ny * nz;
        if data.len() != want {
            return Err(VolumeError::LengthMismatch {
                got: data.len(),
                want,
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(VolumeError::OutOfRange { index, value });
            }
        }
        Ok(Self { dims, data })
    }

    /// Constructor for values already known to be in range; only the length
    /// is checked in release builds.
    pub(crate) fn from_raw(dims: (usize, usize, usize), data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.0 * dims.1 * dims.2);
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { dims, data }
    }

    /// Samples a function of grid coordinates; values are clamped to `[0, 1]`.
    pub fn from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let (nx, ny, nz) = dims;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z).clamp(0.0, 1.0));
                }
            }
        }
        Self { dims, data }
    }

    pub fn constant(dims: (usize, usize, usize), value: f32) -> Self {
        Self::from_fn(dims, |_, _, _| value)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn nx(&self) -> usize {
        self.dims.0
    }

    pub fn ny(&self) -> usize {
        self.dims.1
    }

    pub fn nz(&self) -> usize {
        self.dims.2
    }

    pub fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::Sagittal => self.dims.0,
            Axis::Coronal => self.dims.1,
            Axis::Axial => self.dims.2,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        let (nx, ny, _) = self.dims;
        self.data[x + nx * (y + ny * z)]
    }

    /// Overwrites the plane `axis == index` with the given slice values.
    pub fn set_plane(&mut self, axis: Axis, index: usize, values: &[f32]) {
        let (nx, ny, nz) = self.dims;
        match axis {
            Axis::Sagittal => {
                assert_eq!(values.len(), ny * nz);
                for z in 0..nz {
                    for y in 0..ny {
                        self.data[index + nx * (y + ny * z)] = values[y * nz + z];
                    }
                }
            }
            Axis::Coronal => {
                assert_eq!(values.len(), nx * nz);
                for z in 0..nz {
                    for x in 0..nx {
                        self.data[x + nx * (index + ny * z)] = values[x * nz + z];
                    }
                }
            }
            Axis::Axial => {
                assert_eq!(values.len(), nx * ny);
                for y in 0..ny {
                    for x in 0..nx {
                        self.data[x + nx * (y + ny * index)] = values[x * ny + y];
                    }
                }
            }
        }
    }

    /// Writes a slice back at its own axis and index.
    pub fn set_slice(&mut self, slice: &SliceRef) {
        self.set_plane(slice.axis, slice.index, slice.values());
    }

    /// Keeps only the first `nz` axial planes.
    pub fn crop_axial(&self, nz: usize) -> Result<Volume, VolumeError> {
        if nz == 0 || nz > self.nz() {
            return Err(VolumeError::IndexOutOfRange {
                axis: "axial",
                index: nz,
                extent: self.nz(),
            });
        }
        let (nx, ny, _) = self.dims;
        Ok(Volume::from_raw(
            (nx, ny, nz),
            self.data[..nx * ny * nz].to_vec(),
        ))
    }
}

/// One extracted 2D slice. In-slice coordinates follow the paper's order:
/// sagittal slices are indexed `(y, z)`, coronal `(x, z)`, axial `(x, y)` —
/// the first coordinate is the row, the second the column.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRef {
    pub axis: Axis,
    pub index: usize,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl SliceRef {
    pub fn new(
        axis: Axis,
        index: usize,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        if data.len() != rows * cols {
            return Err(VolumeError::LengthMismatch {
                got: data.len(),
                want: rows * cols,
            });
        }
        Ok(Self {
            axis,
            index,
            rows,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }
}

/// A stack of `s` consecutive parallel slices centered on one index, with
/// replicate-clamped borders.
#[derive(Clone, Debug, PartialEq)]
pub struct Slab {
    pub axis: Axis,
    pub center_index: usize,
    pub s: usize,
    pub slices: Vec<SliceRef>,
}

/// Keeps every k-th axial plane: `result(x, y, z) = vol(x, y, k*z)`.
///
/// The axial extent must satisfy `nz % k == 0` (a raw isotropic volume) or
/// `nz % k == 1` (a reconstruction whose last plane is observed); both leave
/// every sampled index in range.
pub fn downsample_axial(vol: &Volume, k: usize) -> Result<Volume, VolumeError> {
    if k < 2 {
        return Err(VolumeError::BadSparsity(k));
    }
    let (nx, ny, nz) = vol.dims();
    if nz % k != 0 && nz % k != 1 {
        return Err(VolumeError::NonDivisibleExtent { nz, k });
    }
    let nz_down = (nz - 1) / k + 1;
    let mut data = Vec::with_capacity(nx * ny * nz_down);
    for z in 0..nz_down {
        let src = &vol.data()[nx * ny * (k * z)..nx * ny * (k * z + 1)];
        data.extend_from_slice(src);
    }
    Ok(Volume::from_raw((nx, ny, nz_down), data))
}

/// Extracts the 2D plane at `axis == index`.
pub fn extract_slice(vol: &Volume, axis: Axis, index: usize) -> Result<SliceRef, VolumeError> {
    let extent = vol.extent(axis);
    if index >= extent {
        return Err(VolumeError::IndexOutOfRange {
            axis: axis.name(),
            index,
            extent,
        });
    }
    let (nx, ny, nz) = vol.dims();
    let (rows, cols) = match axis {
        Axis::Sagittal => (ny, nz),
        Axis::Coronal => (nx, nz),
        Axis::Axial => (nx, ny),
    };
    let mut data = Vec::with_capacity(rows * cols);
    match axis {
        Axis::Sagittal => {
            for y in 0..ny {
                for z in 0..nz {
                    data.push(vol.at(index, y, z));
                }
            }
        }
        Axis::Coronal => {
            for x in 0..nx {
                for z in 0..nz {
                    data.push(vol.at(x, index, z));
                }
            }
        }
        Axis::Axial => {
            for x in 0..nx {
                for y in 0..ny {
                    data.push(vol.at(x, y, index));
                }
            }
        }
    }
    SliceRef::new(axis, index, rows, cols, data)
}

/// Extracts a slab of `s` slices centered on `center_index`. Offsets that
/// fall outside the volume replicate the border slice.
pub fn extract_slab(
    vol: &Volume,
    axis: Axis,
    center_index: usize,
    s: usize,
) -> Result<Slab, VolumeError> {
    if s == 0 || s % 2 == 0 {
        return Err(VolumeError::EvenSlabWidth(s));
    }
    let extent = vol.extent(axis);
    if center_index >= extent {
        return Err(VolumeError::IndexOutOfRange {
            axis: axis.name(),
            index: center_index,
            extent,
        });
    }
    let half = (s as isize - 1) / 2;
    let mut slices = Vec::with_capacity(s);
    for l in -half..=half {
        let idx = (center_index as isize + l).clamp(0, extent as isize - 1) as usize;
        slices.push(extract_slice(vol, axis, idx)?);
    }
    Ok(Slab {
        axis,
        center_index,
        s,
        slices,
    })
}

/// Rebuilds a volume from a full set of parallel slices. The slices must
/// share axis and dimensions and carry each index `0..n` exactly once.
pub fn assemble_from_slices(slices: &[SliceRef], axis: Axis) -> Result<Volume, VolumeError> {
    if slices.is_empty() {
        return Err(VolumeError::InconsistentDims);
    }
    let (rows, cols) = (slices[0].rows(), slices[0].cols());
    for s in slices {
        if s.axis != axis || s.rows() != rows || s.cols() != cols {
            return Err(VolumeError::InconsistentDims);
        }
    }
    let n = slices.len();
    let mut seen = vec![false; n];
    for s in slices {
        if s.index >= n || seen[s.index] {
            return Err(VolumeError::MissingIndex(s.index));
        }
        seen[s.index] = true;
    }
    let dims = match axis {
        Axis::Sagittal => (n, rows, cols),
        Axis::Coronal => (rows, n, cols),
        Axis::Axial => (rows, cols, n),
    };
    let mut vol = Volume::from_raw(dims, vec![0.0; dims.0 * dims.1 * dims.2]);
    for s in slices {
        vol.set_plane(axis, s.index, s.values());
    }
    Ok(vol)
}

/// Linear interpolation along the axial axis: the classical baseline.
///
/// Observed planes are copied bit-exact at `z = j*k`; the plane at offset
/// `j` between observed planes `A` and `B` is `((k-j)*A + j*B) / k`. The
/// output has `(nz_down - 1) * k + 1` planes so both ends are observed.
pub fn linear_interp_axial(vol_down: &Volume, k: usize) -> Result<Volume, VolumeError> {
    let (nx, ny, nz_down) = vol_down.dims();
    if nz_down < 2 {
        return Err(VolumeError::TooFewSlices(nz_down));
    }
    let nz = (nz_down - 1) * k + 1;
    let plane = nx * ny;
    let mut data = vec![0.0f32; plane * nz];
    for zd in 0..nz_down {
        let src = &vol_down.data()[plane * zd..plane * (zd + 1)];
        data[plane * (zd * k)..plane * (zd * k + 1)].copy_from_slice(src);
    }
    for zd in 0..nz_down - 1 {
        let a = &vol_down.data()[plane * zd..plane * (zd + 1)];
        let b = &vol_down.data()[plane * (zd + 1)..plane * (zd + 2)];
        for j in 1..k {
            let z = zd * k + j;
            let wa = (k - j) as f32;
            let wb = j as f32;
            let dst = &mut data[plane * z..plane * (z + 1)];
            for i in 0..plane {
                dst[i] = (wa * a[i] + wb * b[i]) / k as f32;
            }
        }
    }
    Ok(Volume::from_raw((nx, ny, nz), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn rand_volume(dims: (usize, usize, usize), seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        let data = (0..n)
            .map(|_| (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32)
            .collect();
        Volume::new(dims, data).unwrap()
    }

    #[test]
    fn new_rejects_bad_length_and_range() {
        assert!(matches!(
            Volume::new((2, 2, 2), vec![0.0; 7]),
            Err(VolumeError::LengthMismatch { got: 7, want: 8 })
        ));
        let mut data = vec![0.5; 8];
        data[3] = 1.5;
        assert!(matches!(
            Volume::new((2, 2, 2), data),
            Err(VolumeError::OutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn downsample_keeps_every_kth_plane() {
        let vol = Volume::from_fn((3, 3, 8), |_, _, z| z as f32 / 7.0);
        let down = downsample_axial(&vol, 4).unwrap();
        assert_eq!(down.dims(), (3, 3, 2));
        assert_eq!(down.at(1, 1, 0), 0.0);
        assert_eq!(down.at(1, 1, 1), 4.0 / 7.0);
    }

    #[test]
    fn downsample_rejects_bad_sparsity() {
        let vol = Volume::constant((2, 2, 4), 0.1);
        assert_eq!(
            downsample_axial(&vol, 1).unwrap_err(),
            VolumeError::BadSparsity(1)
        );
    }

    #[test]
    fn downsample_rejects_incompatible_extent() {
        let vol = Volume::constant((2, 2, 7), 0.1);
        assert!(matches!(
            downsample_axial(&vol, 4),
            Err(VolumeError::NonDivisibleExtent { nz: 7, k: 4 })
        ));
        // nz % k == 1 is the reconstruction extent and must be accepted.
        let vol = Volume::constant((2, 2, 9), 0.1);
        assert_eq!(downsample_axial(&vol, 4).unwrap().nz(), 3);
    }

    #[test]
    fn downsample_matches_naive_loop() {
        let vol = rand_volume((8, 8, 8), 11);
        let down = downsample_axial(&vol, 2).unwrap();
        for z in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(down.at(x, y, z), vol.at(x, y, 2 * z));
                }
            }
        }
        assert_eq!(down.at(3, 5, 1), vol.at(3, 5, 2));
    }

    #[test]
    fn extract_constant_axial_plane() {
        let vol = Volume::from_fn((4, 5, 3), |_, _, z| if z == 0 { 0.25 } else { 0.75 });
        let s = extract_slice(&vol, Axis::Axial, 0).unwrap();
        assert_eq!((s.rows(), s.cols()), (4, 5));
        assert!(s.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn extract_sagittal_shape_contract() {
        let vol = rand_volume((4, 5, 6), 3);
        let s = extract_slice(&vol, Axis::Sagittal, 3).unwrap();
        assert_eq!((s.rows(), s.cols()), (5, 6));
        assert_eq!(s.at(2, 4), vol.at(3, 2, 4));
    }

    #[test]
    fn extract_rejects_out_of_range() {
        let vol = Volume::constant((2, 2, 2), 0.0);
        assert!(matches!(
            extract_slice(&vol, Axis::Coronal, 2),
            Err(VolumeError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn extract_then_insert_is_identity() {
        for axis in [Axis::Sagittal, Axis::Coronal, Axis::Axial] {
            let vol = rand_volume((5, 4, 6), 7);
            let mut copy = vol.clone();
            let idx = vol.extent(axis) / 2;
            let s = extract_slice(&vol, axis, idx).unwrap();
            copy.set_slice(&s);
            assert_eq!(copy, vol);
        }
    }

    #[test]
    fn slab_clamps_at_lower_border() {
        let vol = rand_volume((6, 4, 4), 9);
        let slab = extract_slab(&vol, Axis::Sagittal, 0, 3).unwrap();
        let indices: Vec<usize> = slab.slices.iter().map(|s| s.index).collect();
        assert_eq!(indices, vec![0, 0, 1]);
    }

    #[test]
    fn slab_interior_is_contiguous() {
        let vol = rand_volume((6, 4, 4), 10);
        let slab = extract_slab(&vol, Axis::Coronal, 2, 3).unwrap();
        let indices: Vec<usize> = slab.slices.iter().map(|s| s.index).collect();
        assert_eq!(indices, vec![1, 2, 3]);
    }

    #[test]
    fn slab_clamps_at_upper_border() {
        let vol = rand_volume((4, 4, 8), 12);
        let e = 8;
        let slab = extract_slab(&vol, Axis::Axial, e - 1, 5).unwrap();
        let indices: Vec<usize> = slab.slices.iter().map(|s| s.index).collect();
        assert_eq!(indices, vec![e - 3, e - 2, e - 1, e - 1, e - 1]);
        for (slice, &want) in slab.slices.iter().zip(indices.iter()) {
            assert_eq!(slice.values(), extract_slice(&vol, Axis::Axial, want).unwrap().values());
        }
    }

    #[test]
    fn slab_rejects_even_width() {
        let vol = Volume::constant((3, 3, 3), 0.5);
        assert_eq!(
            extract_slab(&vol, Axis::Axial, 1, 4).unwrap_err(),
            VolumeError::EvenSlabWidth(4)
        );
    }

    #[test]
    fn assemble_inverts_extract_on_all_axes() {
        for axis in [Axis::Sagittal, Axis::Coronal, Axis::Axial] {
            let vol = rand_volume((4, 5, 6), 21);
            let slices: Vec<SliceRef> = (0..vol.extent(axis))
                .map(|i| extract_slice(&vol, axis, i).unwrap())
                .collect();
            let back = assemble_from_slices(&slices, axis).unwrap();
            assert_eq!(back, vol);
        }
    }

    #[test]
    fn assemble_rejects_duplicate_index() {
        let vol = rand_volume((3, 3, 3), 4);
        let mut slices: Vec<SliceRef> = (0..3)
            .map(|i| extract_slice(&vol, Axis::Axial, i).unwrap())
            .collect();
        slices[2].index = 0;
        assert_eq!(
            assemble_from_slices(&slices, Axis::Axial).unwrap_err(),
            VolumeError::MissingIndex(0)
        );
    }

    #[test]
    fn assemble_constant_planes_is_linear_in_z() {
        let slices: Vec<SliceRef> = (0..4)
            .map(|i| {
                SliceRef::new(Axis::Axial, i, 3, 3, vec![0.25 * i as f32; 9]).unwrap()
            })
            .collect();
        let vol = assemble_from_slices(&slices, Axis::Axial).unwrap();
        assert_eq!(vol.dims(), (3, 3, 4));
        for z in 0..4 {
            assert_eq!(vol.at(1, 2, z), 0.25 * z as f32);
        }
    }

    #[test]
    fn linear_interp_ramp_endpoints() {
        let down = Volume::from_fn((2, 2, 2), |_, _, z| z as f32);
        let up = linear_interp_axial(&down, 4).unwrap();
        assert_eq!(up.nz(), 5);
        assert_eq!(up.at(0, 0, 0), 0.0);
        assert_eq!(up.at(0, 0, 1), 0.25);
        assert_eq!(up.at(0, 0, 2), 0.5);
        assert_eq!(up.at(0, 0, 3), 0.75);
        assert_eq!(up.at(0, 0, 4), 1.0);
    }

    #[test]
    fn linear_interp_reconstructs_linear_volumes() {
        for k in [2usize, 3, 8] {
            let nz = 3 * k + 1;
            let vol = Volume::from_fn((3, 3, nz), |x, _, z| {
                (z as f32 / (nz - 1) as f32) * 0.8 + x as f32 * 0.01
            });
            let down = downsample_axial(&vol, k).unwrap();
            let up = linear_interp_axial(&down, k).unwrap();
            assert_eq!(up.dims(), vol.dims());
            for (a, b) in up.data().iter().zip(vol.data().iter()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_interp_matches_convex_combination() {
        let down = rand_volume((4, 4, 3), 33);
        let k = 8;
        let up = linear_interp_axial(&down, k).unwrap();
        let j = 3;
        for y in 0..4 {
            for x in 0..4 {
                let a = down.at(x, y, 1);
                let b = down.at(x, y, 2);
                let want = ((k - j) as f32 * a + j as f32 * b) / k as f32;
                assert_eq!(up.at(x, y, k + j), want);
            }
        }
    }

    #[test]
    fn linear_interp_rejects_single_slice() {
        let down = Volume::constant((2, 2, 1), 0.3);
        assert_eq!(
            linear_interp_axial(&down, 4).unwrap_err(),
            VolumeError::TooFewSlices(1)
        );
    }

    #[test]
    fn downsample_of_interp_restores_input_bit_exact() {
        let down = rand_volume((5, 4, 4), 44);
        for k in [2usize, 4, 7] {
            let up = linear_interp_axial(&down, k).unwrap();
            let back = downsample_axial(&up, k).unwrap();
            assert_eq!(back, down);
        }
    }

    #[test]
    fn operations_do_not_mutate_inputs() {
        let vol = rand_volume((4, 4, 4), 55);
        let snapshot = vol.clone();
        let _ = downsample_axial(&vol, 2).unwrap();
        let _ = extract_slice(&vol, Axis::Coronal, 1).unwrap();
        let _ = extract_slab(&vol, Axis::Axial, 3, 3).unwrap();
        let _ = linear_interp_axial(&vol, 3).unwrap();
        assert_eq!(vol, snapshot);
    }
}
