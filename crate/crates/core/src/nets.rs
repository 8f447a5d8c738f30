//! Residual dense networks for every reconstruction stage.
//!
//! All five network kinds share one topology: a shallow feature pair of
//! 3x3 convolutions, `num_rdbs` residual dense blocks (densely connected
//! conv+ReLU layers, a 1x1 local fusion, and a local residual), global
//! feature fusion (concat of block outputs, 1x1 then 3x3 conv) with a
//! global residual back to the first shallow feature, and a tail that is
//! either a single-axis sub-pixel upsampler (super-resolving kinds) or one
//! output convolution (same-size kinds). The refinement network additionally
//! adds its input to the tail so it starts as an exact identity: its tail
//! weights are zero-initialized.
//!
//! Convolutions replicate border samples, the same rule slab extraction
//! uses at volume borders.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::ndiff::{
    init_params, Element, NdiffError, PadMode, ParamInit, ParamSpec, ParamStore, Tape, Tensor,
    Value,
};
use crate::volgeom::{Axis, Slab, SliceRef};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("network input mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
}

/// Which stage a network implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    /// Marginal super-resolution of sagittal/coronal slices along z.
    Msr,
    /// Two-view fusion of the sagittal- and coronal-derived axial slices.
    Fusion,
    /// Joint refinement of a slab of k+1 axial slices.
    Refine,
    /// Direct interpolation of the k-1 missing slices from two observed ones.
    Baseline2d,
    /// Volumetric mapping from the anisotropic to the isotropic volume.
    Baseline3d,
}

impl NetKind {
    pub fn name(self) -> &'static str {
        match self {
            NetKind::Msr => "msr",
            NetKind::Fusion => "fusion",
            NetKind::Refine => "refine",
            NetKind::Baseline2d => "baseline2d",
            NetKind::Baseline3d => "baseline3d",
        }
    }
}

/// Residual dense block shape: `g0` carried features, `g` growth per layer,
/// `c` conv layers per block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RdbConfig {
    pub g0: usize,
    pub g: usize,
    pub c: usize,
}

impl RdbConfig {
    /// Default training capacity.
    pub const fn standard() -> Self {
        Self { g0: 32, g: 16, c: 4 }
    }

    /// Desk-scale profile used by the quantitative test suites.
    pub const fn tiny() -> Self {
        Self { g0: 8, g: 8, c: 2 }
    }
}

/// Complete architecture description; checkpoints serialize this so
/// inference can rebuild the topology from file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub num_rdbs: usize,
    pub rdb: RdbConfig,
    /// Upsampling factor along the sparse axis; 1 for same-size networks.
    pub upsample_k: usize,
}

impl NetworkSpec {
    pub fn msr(s: usize, k: usize, rdb: RdbConfig) -> Self {
        Self {
            kind: NetKind::Msr,
            in_channels: s,
            out_channels: 1,
            num_rdbs: 2,
            rdb,
            upsample_k: k,
        }
    }

    pub fn fusion(rdb: RdbConfig) -> Self {
        Self {
            kind: NetKind::Fusion,
            in_channels: 2,
            out_channels: 1,
            num_rdbs: 2,
            rdb,
            upsample_k: 1,
        }
    }

    pub fn refine(k: usize, rdb: RdbConfig) -> Self {
        Self {
            kind: NetKind::Refine,
            in_channels: k + 1,
            out_channels: k + 1,
            num_rdbs: 2,
            rdb,
            upsample_k: 1,
        }
    }

    pub fn baseline2d(k: usize, rdb: RdbConfig) -> Self {
        Self {
            kind: NetKind::Baseline2d,
            in_channels: 2,
            out_channels: k.saturating_sub(1),
            num_rdbs: 2,
            rdb,
            upsample_k: 1,
        }
    }

    pub fn baseline3d(k: usize, rdb: RdbConfig) -> Self {
        Self {
            kind: NetKind::Baseline3d,
            in_channels: 1,
            out_channels: 1,
            num_rdbs: 1,
            rdb,
            upsample_k: k,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let err = |msg: String| Err(NetError::InvalidSpec(msg));
        if self.rdb.g0 == 0 || self.rdb.g == 0 || self.rdb.c == 0 {
            return err(format!("rdb config must be positive: {:?}", self.rdb));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.num_rdbs == 0 {
            return err("channel and block counts must be positive".into());
        }
        match self.kind {
            NetKind::Msr => {
                if self.out_channels != 1 || self.num_rdbs != 2 || self.upsample_k < 2 {
                    return err("msr needs out=1, two RDBs, upsample_k >= 2".into());
                }
                if self.in_channels % 2 == 0 {
                    return err("msr slab width must be odd".into());
                }
            }
            NetKind::Fusion => {
                if self.in_channels != 2
                    || self.out_channels != 1
                    || self.num_rdbs != 2
                    || self.upsample_k != 1
                {
                    return err("fusion needs in=2, out=1, two RDBs, no upsampling".into());
                }
            }
            NetKind::Refine => {
                if self.in_channels != self.out_channels
                    || self.in_channels < 3
                    || self.num_rdbs != 2
                    || self.upsample_k != 1
                {
                    return err("refine needs in=out=k+1 (k >= 2), two RDBs, no upsampling".into());
                }
            }
            NetKind::Baseline2d => {
                if self.in_channels != 2 || self.num_rdbs != 2 || self.upsample_k != 1 {
                    return err("baseline2d needs in=2, two RDBs, no upsampling".into());
                }
            }
            NetKind::Baseline3d => {
                if self.in_channels != 1
                    || self.out_channels != 1
                    || self.num_rdbs != 1
                    || self.upsample_k < 2
                {
                    return err("baseline3d needs in=out=1, one RDB, upsample_k >= 2".into());
                }
            }
        }
        Ok(())
    }

    fn spatial_rank(&self) -> usize {
        match self.kind {
            NetKind::Baseline3d => 3,
            _ => 2,
        }
    }

    fn tail_channels(&self) -> usize {
        match self.kind {
            NetKind::Msr | NetKind::Baseline3d => self.out_channels * self.upsample_k,
            _ => self.out_channels,
        }
    }
}

/// A validated topology; owns no parameters. Pair with a [`ParamStore`]
/// produced by [`build`] or loaded from a checkpoint.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
}

/// Tape handles for one bound parameter set.
pub struct BoundParams {
    map: BTreeMap<String, Value>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Value, NetError> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| NetError::ShapeMismatch(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.map.iter()
    }
}

/// Inserts every parameter of `store` into the tape; with `trainable` the
/// leaves collect gradients.
pub fn bind_params<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    trainable: bool,
) -> BoundParams {
    let mut map = BTreeMap::new();
    for (name, param) in store.iter() {
        map.insert(name.clone(), tape.leaf(param.value.clone(), trainable));
    }
    BoundParams { map }
}

/// Validates the spec and initializes its parameters from `seed`.
pub fn build<T: Element>(
    spec: NetworkSpec,
    seed: u64,
) -> Result<(Network, ParamStore<T>), NetError> {
    let net = Network::new(spec)?;
    let store = init_params(&net.param_layout(), seed);
    Ok((net, store))
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self, NetError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Parameter names, shapes, and initializers in topology order.
    pub fn param_layout(&self) -> Vec<ParamSpec> {
        let s = &self.spec;
        let rank = s.spatial_rank();
        let k3: Vec<usize> = vec![3; rank];
        let k1: Vec<usize> = vec![1; rank];
        let mut layout = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, kernel: &[usize], zero: bool| {
            let mut shape = vec![c_out, c_in];
            shape.extend_from_slice(kernel);
            let fan_in = c_in * kernel.iter().product::<usize>();
            let init = if zero {
                ParamInit::Zero
            } else {
                ParamInit::FanInNormal { fan_in }
            };
            layout.push(ParamSpec::new(format!("{name}.weight"), shape, init));
            layout.push(ParamSpec::new(
                format!("{name}.bias"),
                vec![c_out],
                ParamInit::Zero,
            ));
        };
        let (g0, g, c) = (s.rdb.g0, s.rdb.g, s.rdb.c);
        conv("sfe1".into(), g0, s.in_channels, &k3, false);
        conv("sfe2".into(), g0, g0, &k3, false);
        for b in 0..s.num_rdbs {
            for l in 0..c {
                conv(format!("rdb{b}.conv{l}"), g, g0 + l * g, &k3, false);
            }
            conv(format!("rdb{b}.lff"), g0, g0 + c * g, &k1, false);
        }
        conv("gff1".into(), g0, s.num_rdbs * g0, &k1, false);
        conv("gff2".into(), g0, g0, &k3, false);
        // Refinement starts as an exact identity: zero correction head.
        conv(
            "tail".into(),
            s.tail_channels(),
            g0,
            &k3,
            s.kind == NetKind::Refine,
        );
        layout
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    fn apply_conv<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        name: &str,
        x: Value,
    ) -> Result<Value, NetError> {
        let w = params.get(&format!("{name}.weight"))?;
        let b = params.get(&format!("{name}.bias"))?;
        let kernel = *tape.value(w).shape().last().expect("conv weight rank");
        let pad = (kernel - 1) / 2;
        let out = match self.spec.kind {
            NetKind::Baseline3d => tape.conv3d(x, w, b, 1, pad, PadMode::Replicate)?,
            _ => tape.conv2d(x, w, b, 1, pad, PadMode::Replicate)?,
        };
        Ok(out)
    }

    /// Runs the network on one input tensor already on the tape. The input
    /// must be `[in_channels, H, W]` (or `[in_channels, D, H, W]` for the
    /// 3D baseline); super-resolving kinds upsample their sparse axis
    /// (the last axis in 2D, the depth axis in 3D) by `upsample_k`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        input: Value,
    ) -> Result<Value, NetError> {
        let s = &self.spec;
        let in_shape = tape.value(input).shape().to_vec();
        if in_shape.len() != s.spatial_rank() + 1 || in_shape[0] != s.in_channels {
            return Err(NetError::ShapeMismatch(format!(
                "{} expects {} channels and rank {}, got {:?}",
                s.kind.name(),
                s.in_channels,
                s.spatial_rank() + 1,
                in_shape
            )));
        }
        let f_m1 = self.apply_conv(tape, params, "sfe1", input)?;
        let f0 = self.apply_conv(tape, params, "sfe2", f_m1)?;
        let mut feats = f0;
        let mut rdb_outs = Vec::with_capacity(s.num_rdbs);
        for b in 0..s.num_rdbs {
            let block_in = feats;
            let mut local = vec![block_in];
            for l in 0..s.rdb.c {
                let cat = if local.len() == 1 {
                    local[0]
                } else {
                    tape.concat_channels(&local)?
                };
                let y = self.apply_conv(tape, params, &format!("rdb{b}.conv{l}"), cat)?;
                local.push(tape.relu(y));
            }
            let cat = tape.concat_channels(&local)?;
            let fused = self.apply_conv(tape, params, &format!("rdb{b}.lff"), cat)?;
            feats = tape.add(block_in, fused)?;
            rdb_outs.push(feats);
        }
        let gcat = if rdb_outs.len() == 1 {
            rdb_outs[0]
        } else {
            tape.concat_channels(&rdb_outs)?
        };
        let g1 = self.apply_conv(tape, params, "gff1", gcat)?;
        let g2 = self.apply_conv(tape, params, "gff2", g1)?;
        let global = tape.add(f_m1, g2)?;
        let tail = self.apply_conv(tape, params, "tail", global)?;
        let out = match s.kind {
            NetKind::Msr => tape.subpixel_upsample_axis(tail, s.upsample_k, 2)?,
            NetKind::Baseline3d => tape.subpixel_upsample_axis(tail, s.upsample_k, 1)?,
            NetKind::Fusion | NetKind::Baseline2d => tail,
            NetKind::Refine => tape.add(input, tail)?,
        };
        Ok(out)
    }
}

// ---- single-sample inference wrappers (f32) --------------------------------

pub(crate) fn stack_planes(planes: &[&[f32]], rows: usize, cols: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(planes.len() * rows * cols);
    for p in planes {
        debug_assert_eq!(p.len(), rows * cols);
        data.extend_from_slice(p);
    }
    Tensor::new(vec![planes.len(), rows, cols], data).expect("stacked planes")
}

fn run_single(
    net: &Network,
    store: &ParamStore<f32>,
    input: Tensor<f32>,
) -> Result<Tensor<f32>, NetError> {
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, store, false);
    let x = tape.leaf(input, false);
    let y = net.forward(&mut tape, &params, x)?;
    Ok(tape.value(y).clone())
}

/// Super-resolves the center slice of a slab along its second in-slice axis.
/// Input slices are `(A, B/k)`; the output slice is `(A, B)`.
pub fn msr_forward(
    net: &Network,
    store: &ParamStore<f32>,
    slab: &Slab,
) -> Result<SliceRef, NetError> {
    let spec = net.spec();
    if spec.kind != NetKind::Msr {
        return Err(NetError::ShapeMismatch(format!(
            "msr_forward on a {} network",
            spec.kind.name()
        )));
    }
    if slab.s != spec.in_channels {
        return Err(NetError::ShapeMismatch(format!(
            "slab width {} but network expects {}",
            slab.s, spec.in_channels
        )));
    }
    let rows = slab.slices[0].rows();
    let cols = slab.slices[0].cols();
    let planes: Vec<&[f32]> = slab.slices.iter().map(|s| s.values()).collect();
    let out = run_single(net, store, stack_planes(&planes, rows, cols))?;
    let out_cols = cols * spec.upsample_k;
    Ok(
        SliceRef::new(slab.axis, slab.center_index, rows, out_cols, out.into_data())
            .expect("msr output plane"),
    )
}

/// Fuses the sagittal- and coronal-derived estimates of one axial slice.
pub fn fusion_forward(
    net: &Network,
    store: &ParamStore<f32>,
    sag: &SliceRef,
    cor: &SliceRef,
) -> Result<SliceRef, NetError> {
    if net.spec().kind != NetKind::Fusion {
        return Err(NetError::ShapeMismatch(format!(
            "fusion_forward on a {} network",
            net.spec().kind.name()
        )));
    }
    if sag.axis != Axis::Axial
        || cor.axis != Axis::Axial
        || sag.rows() != cor.rows()
        || sag.cols() != cor.cols()
    {
        return Err(NetError::ShapeMismatch(
            "fusion inputs must be axial slices of equal dims".into(),
        ));
    }
    let out = run_single(
        net,
        store,
        stack_planes(&[sag.values(), cor.values()], sag.rows(), sag.cols()),
    )?;
    Ok(
        SliceRef::new(Axis::Axial, sag.index, sag.rows(), sag.cols(), out.into_data())
            .expect("fusion output plane"),
    )
}

/// Refines a slab of k+1 consecutive axial slices jointly; output slices
/// keep their input indices.
pub fn refine_forward(
    net: &Network,
    store: &ParamStore<f32>,
    slices: &[SliceRef],
) -> Result<Vec<SliceRef>, NetError> {
    let spec = net.spec();
    if spec.kind != NetKind::Refine {
        return Err(NetError::ShapeMismatch(format!(
            "refine_forward on a {} network",
            spec.kind.name()
        )));
    }
    if slices.len() != spec.in_channels {
        return Err(NetError::ShapeMismatch(format!(
            "refine expects {} slices, got {}",
            spec.in_channels,
            slices.len()
        )));
    }
    let rows = slices[0].rows();
    let cols = slices[0].cols();
    if slices
        .iter()
        .any(|s| s.axis != Axis::Axial || s.rows() != rows || s.cols() != cols)
    {
        return Err(NetError::ShapeMismatch(
            "refine inputs must be axial slices of equal dims".into(),
        ));
    }
    let planes: Vec<&[f32]> = slices.iter().map(|s| s.values()).collect();
    let out = run_single(net, store, stack_planes(&planes, rows, cols))?;
    let data = out.into_data();
    let plane = rows * cols;
    Ok(slices
        .iter()
        .enumerate()
        .map(|(i, src)| {
            SliceRef::new(
                Axis::Axial,
                src.index,
                rows,
                cols,
                data[i * plane..(i + 1) * plane].to_vec(),
            )
            .expect("refine output plane")
        })
        .collect())
}

/// Estimates the k-1 missing axial slices between two adjacent observed
/// ones. Output indices assume `lower` sits at fine-grid index
/// `lower.index * k`.
pub fn baseline2d_forward(
    net: &Network,
    store: &ParamStore<f32>,
    lower: &SliceRef,
    upper: &SliceRef,
) -> Result<Vec<SliceRef>, NetError> {
    let spec = net.spec();
    if spec.kind != NetKind::Baseline2d {
        return Err(NetError::ShapeMismatch(format!(
            "baseline2d_forward on a {} network",
            spec.kind.name()
        )));
    }
    if lower.axis != Axis::Axial
        || upper.axis != Axis::Axial
        || lower.rows() != upper.rows()
        || lower.cols() != upper.cols()
    {
        return Err(NetError::ShapeMismatch(
            "baseline2d inputs must be axial slices of equal dims".into(),
        ));
    }
    let rows = lower.rows();
    let cols = lower.cols();
    let out = run_single(
        net,
        store,
        stack_planes(&[lower.values(), upper.values()], rows, cols),
    )?;
    let data = out.into_data();
    let plane = rows * cols;
    let k = spec.out_channels + 1;
    Ok((0..spec.out_channels)
        .map(|j| {
            SliceRef::new(
                Axis::Axial,
                lower.index * k + j + 1,
                rows,
                cols,
                data[j * plane..(j + 1) * plane].to_vec(),
            )
            .expect("baseline2d output plane")
        })
        .collect())
}

/// Maps an anisotropic 3D patch `[1, D, H, W]` to `[1, D*k, H, W]`.
pub fn baseline3d_forward(
    net: &Network,
    store: &ParamStore<f32>,
    patch: &Tensor<f32>,
) -> Result<Tensor<f32>, NetError> {
    let spec = net.spec();
    if spec.kind != NetKind::Baseline3d {
        return Err(NetError::ShapeMismatch(format!(
            "baseline3d_forward on a {} network",
            spec.kind.name()
        )));
    }
    if patch.shape().len() != 4 || patch.shape()[0] != 1 || patch.shape()[1] < 2 {
        return Err(NetError::ShapeMismatch(format!(
            "baseline3d expects [1, D>=2, H, W], got {:?}",
            patch.shape()
        )));
    }
    run_single(net, store, patch.clone())
}
