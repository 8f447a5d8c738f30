//! im2col/col2im kernels behind the convolution ops.
//!
//! Forward lowers each convolution to one GEMM over an unrolled patch
//! matrix; backward reuses the same lowering for the weight gradient and
//! scatters a GEMM result back through col2im for the input gradient.

use super::tape::PadMode;
use super::tensor::Element;

pub(crate) fn out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[inline]
fn clamp_idx(i: isize, extent: usize) -> usize {
    i.clamp(0, extent as isize - 1) as usize
}

/// Copies one kernel-tap row of the input into `seg` (length `w_out`),
/// walking the fast axis. `off` is the input coordinate of `ox = 0`.
#[inline]
fn gather_row<T: Element>(
    seg: &mut [T],
    row: Option<&[T]>,
    w: usize,
    off: isize,
    stride: usize,
    mode: PadMode,
) {
    let w_out = seg.len();
    match (row, mode) {
        (None, PadMode::Zero) => seg.fill(T::ZERO),
        (None, PadMode::Replicate) => unreachable!("replicate rows always resolve"),
        (Some(row), PadMode::Zero) => {
            if stride == 1 {
                let left = (-off).clamp(0, w_out as isize) as usize;
                let right = (w as isize - off).clamp(0, w_out as isize) as usize;
                seg[..left].fill(T::ZERO);
                if right > left {
                    let src0 = (left as isize + off) as usize;
                    seg[left..right].copy_from_slice(&row[src0..src0 + (right - left)]);
                }
                seg[right.max(left)..].fill(T::ZERO);
            } else {
                for (ox, o) in seg.iter_mut().enumerate() {
                    let ix = (ox * stride) as isize + off;
                    *o = if ix >= 0 && (ix as usize) < w {
                        row[ix as usize]
                    } else {
                        T::ZERO
                    };
                }
            }
        }
        (Some(row), PadMode::Replicate) => {
            if stride == 1 {
                let left = (-off).clamp(0, w_out as isize) as usize;
                let right = (w as isize - off).clamp(0, w_out as isize) as usize;
                seg[..left].fill(row[0]);
                if right > left {
                    let src0 = (left as isize + off) as usize;
                    seg[left..right].copy_from_slice(&row[src0..src0 + (right - left)]);
                }
                for o in seg[right.max(left)..].iter_mut() {
                    *o = row[w - 1];
                }
            } else {
                for (ox, o) in seg.iter_mut().enumerate() {
                    let ix = (ox * stride) as isize + off;
                    *o = row[clamp_idx(ix, w)];
                }
            }
        }
    }
}

/// Accumulates one kernel-tap row of column gradients back into the input
/// gradient row; the mirror of [`gather_row`].
#[inline]
fn scatter_row<T: Element>(
    seg: &[T],
    row: Option<&mut [T]>,
    w: usize,
    off: isize,
    stride: usize,
    mode: PadMode,
) {
    let row = match (row, mode) {
        (None, PadMode::Zero) => return,
        (None, PadMode::Replicate) => unreachable!("replicate rows always resolve"),
        (Some(r), _) => r,
    };
    for (ox, &g) in seg.iter().enumerate() {
        let ix = (ox * stride) as isize + off;
        match mode {
            PadMode::Zero => {
                if ix >= 0 && (ix as usize) < w {
                    row[ix as usize] += g;
                }
            }
            PadMode::Replicate => row[clamp_idx(ix, w)] += g,
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Geom2d {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub mode: PadMode,
}

impl Geom2d {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col_2d<T: Element>(x: &[T], g: &Geom2d, cols: &mut [T]) {
    let n = g.out_spatial();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let chan = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * n..(r + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let row = match g.mode {
                        PadMode::Zero => {
                            if iy < 0 || iy as usize >= g.h {
                                None
                            } else {
                                Some(&chan[iy as usize * g.w..(iy as usize + 1) * g.w])
                            }
                        }
                        PadMode::Replicate => {
                            let iyc = clamp_idx(iy, g.h);
                            Some(&chan[iyc * g.w..(iyc + 1) * g.w])
                        }
                    };
                    gather_row(
                        &mut dst[oy * g.w_out..(oy + 1) * g.w_out],
                        row,
                        g.w,
                        kj as isize - pad,
                        g.stride,
                        g.mode,
                    );
                }
            }
        }
    }
}

fn col2im_2d<T: Element>(dcols: &[T], g: &Geom2d, dx: &mut [T]) {
    let n = g.out_spatial();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let chan = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &dcols[r * n..(r + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let row = match g.mode {
                        PadMode::Zero => {
                            if iy < 0 || iy as usize >= g.h {
                                None
                            } else {
                                Some(&mut chan[iy as usize * g.w..(iy as usize + 1) * g.w])
                            }
                        }
                        PadMode::Replicate => {
                            let iyc = clamp_idx(iy, g.h);
                            Some(&mut chan[iyc * g.w..(iyc + 1) * g.w])
                        }
                    };
                    scatter_row(
                        &src[oy * g.w_out..(oy + 1) * g.w_out],
                        row,
                        g.w,
                        kj as isize - pad,
                        g.stride,
                        g.mode,
                    );
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], b: &[T], g: &Geom2d) -> Vec<T> {
    let kk = g.patch_len();
    let n = g.out_spatial();
    let mut cols = vec![T::ZERO; kk * n];
    im2col_2d(x, g, &mut cols);
    let mut out = Vec::with_capacity(g.c_out * n);
    for o in 0..g.c_out {
        out.extend(core::iter::repeat(b[o]).take(n));
    }
    unsafe {
        T::gemm(
            g.c_out,
            kk,
            n,
            T::ONE,
            w.as_ptr(),
            kk as isize,
            1,
            cols.as_ptr(),
            n as isize,
            1,
            T::ONE,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Accumulates conv2d gradients. `dx`, `dw`, `db` buffers receive `+=`
/// contributions; pass `None` for inputs that do not need gradients.
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &Geom2d,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kk = g.patch_len();
    let n = g.out_spatial();
    if let Some(db) = db {
        for o in 0..g.c_out {
            let mut acc = T::ZERO;
            for &v in &gout[o * n..(o + 1) * n] {
                acc += v;
            }
            db[o] += acc;
        }
    }
    if let Some(dw) = dw {
        let mut cols = vec![T::ZERO; kk * n];
        im2col_2d(x, g, &mut cols);
        unsafe {
            T::gemm(
                g.c_out,
                n,
                kk,
                T::ONE,
                gout.as_ptr(),
                n as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                T::ONE,
                dw.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::ZERO; kk * n];
        unsafe {
            T::gemm(
                kk,
                g.c_out,
                n,
                T::ONE,
                w.as_ptr(),
                1,
                kk as isize,
                gout.as_ptr(),
                n as isize,
                1,
                T::ZERO,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        col2im_2d(&dcols, g, dx);
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Geom3d {
    pub c_in: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub d_out: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub mode: PadMode,
}

impl Geom3d {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kd * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.d_out * self.h_out * self.w_out
    }
}

fn im2col_3d<T: Element>(x: &[T], g: &Geom3d, cols: &mut [T]) {
    let n = g.out_spatial();
    let pad = g.pad as isize;
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        let chan = &x[c * g.d * plane..(c + 1) * g.d * plane];
        for kd in 0..g.kd {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = ((c * g.kd + kd) * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[r * n..(r + 1) * n];
                    for od in 0..g.d_out {
                        let iz = (od * g.stride + kd) as isize - pad;
                        let (zero_plane, izc) = match g.mode {
                            PadMode::Zero => (iz < 0 || iz as usize >= g.d, clamp_idx(iz, g.d)),
                            PadMode::Replicate => (false, clamp_idx(iz, g.d)),
                        };
                        for oy in 0..g.h_out {
                            let iy = (oy * g.stride + ki) as isize - pad;
                            let seg_start = (od * g.h_out + oy) * g.w_out;
                            let seg = &mut dst[seg_start..seg_start + g.w_out];
                            let row = if zero_plane {
                                None
                            } else {
                                match g.mode {
                                    PadMode::Zero => {
                                        if iy < 0 || iy as usize >= g.h {
                                            None
                                        } else {
                                            let base = izc * plane + iy as usize * g.w;
                                            Some(&chan[base..base + g.w])
                                        }
                                    }
                                    PadMode::Replicate => {
                                        let base = izc * plane + clamp_idx(iy, g.h) * g.w;
                                        Some(&chan[base..base + g.w])
                                    }
                                }
                            };
                            gather_row(seg, row, g.w, kj as isize - pad, g.stride, g.mode);
                        }
                    }
                }
            }
        }
    }
}

fn col2im_3d<T: Element>(dcols: &[T], g: &Geom3d, dx: &mut [T]) {
    let n = g.out_spatial();
    let pad = g.pad as isize;
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        let chan = &mut dx[c * g.d * plane..(c + 1) * g.d * plane];
        for kd in 0..g.kd {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let r = ((c * g.kd + kd) * g.kh + ki) * g.kw + kj;
                    let src = &dcols[r * n..(r + 1) * n];
                    for od in 0..g.d_out {
                        let iz = (od * g.stride + kd) as isize - pad;
                        let skip_plane = match g.mode {
                            PadMode::Zero => iz < 0 || iz as usize >= g.d,
                            PadMode::Replicate => false,
                        };
                        if skip_plane {
                            continue;
                        }
                        let izc = clamp_idx(iz, g.d);
                        for oy in 0..g.h_out {
                            let iy = (oy * g.stride + ki) as isize - pad;
                            let seg_start = (od * g.h_out + oy) * g.w_out;
                            let seg = &src[seg_start..seg_start + g.w_out];
                            let row = match g.mode {
                                PadMode::Zero => {
                                    if iy < 0 || iy as usize >= g.h {
                                        None
                                    } else {
                                        let base = izc * plane + iy as usize * g.w;
                                        Some(&mut chan[base..base + g.w])
                                    }
                                }
                                PadMode::Replicate => {
                                    let base = izc * plane + clamp_idx(iy, g.h) * g.w;
                                    Some(&mut chan[base..base + g.w])
                                }
                            };
                            scatter_row(seg, row, g.w, kj as isize - pad, g.stride, g.mode);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Element>(x: &[T], w: &[T], b: &[T], g: &Geom3d) -> Vec<T> {
    let kk = g.patch_len();
    let n = g.out_spatial();
    let mut cols = vec![T::ZERO; kk * n];
    im2col_3d(x, g, &mut cols);
    let mut out = Vec::with_capacity(g.c_out * n);
    for o in 0..g.c_out {
        out.extend(core::iter::repeat(b[o]).take(n));
    }
    unsafe {
        T::gemm(
            g.c_out,
            kk,
            n,
            T::ONE,
            w.as_ptr(),
            kk as isize,
            1,
            cols.as_ptr(),
            n as isize,
            1,
            T::ONE,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

pub(crate) fn conv3d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &Geom3d,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kk = g.patch_len();
    let n = g.out_spatial();
    if let Some(db) = db {
        for o in 0..g.c_out {
            let mut acc = T::ZERO;
            for &v in &gout[o * n..(o + 1) * n] {
                acc += v;
            }
            db[o] += acc;
        }
    }
    if let Some(dw) = dw {
        let mut cols = vec![T::ZERO; kk * n];
        im2col_3d(x, g, &mut cols);
        unsafe {
            T::gemm(
                g.c_out,
                n,
                kk,
                T::ONE,
                gout.as_ptr(),
                n as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                T::ONE,
                dw.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::ZERO; kk * n];
        unsafe {
            T::gemm(
                kk,
                g.c_out,
                n,
                T::ONE,
                w.as_ptr(),
                1,
                kk as isize,
                gout.as_ptr(),
                n as isize,
                1,
                T::ZERO,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        col2im_3d(&dcols, g, dx);
    }
}
