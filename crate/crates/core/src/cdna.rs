//! Compositing primitives of the CDNA prediction head.
//!
//! CDNA predicts a frame by applying a small bank of normalized convolution
//! kernels to the previous frame ("advection"), then blending the transformed
//! images — optionally together with the untransformed current frame — using
//! per-pixel softmax masks. Both stages are convex combinations: advection
//! kernels are spatial softmaxes that sum to 1, and masks partition unity
//! across sources, so no composited pixel can leave the range its sources
//! span.
//!
//! Only the compositing math lives here, as pure single-image functions plus
//! a tape-composed variant for gradient flow. The surrounding recurrent
//! network the original design embeds these in is out of scope; the
//! primitives exist for diagnostics such as dropping the current-image
//! channel.

use crate::autodiff::{advect_forward, softmax_last_axis, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Conventional kernel-bank dimensions; the sources this design follows do
/// not pin them, so they stay configurable.
pub const DEFAULT_KERNELS: usize = 10;
pub const DEFAULT_KERNEL_SIZE: usize = 5;

/// A bank of `m` advection kernel logits, `[m,k,k]`; [`KernelSet::normalized`]
/// turns each slice into a convex kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet<T: Scalar = f32> {
    raw: Tensor<T>,
}

impl<T: Scalar> KernelSet<T> {
    pub fn new(raw: Tensor<T>) -> Result<Self> {
        if raw.rank() != 3 || raw.shape()[1] != raw.shape()[2] {
            return Err(Error::InvalidConfig(format!(
                "kernel set must be [m,k,k], got {:?}",
                raw.shape()
            )));
        }
        Ok(KernelSet { raw })
    }

    /// Number of kernels.
    pub fn m(&self) -> usize {
        self.raw.shape()[0]
    }

    /// Kernel side length.
    pub fn k(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn raw(&self) -> &Tensor<T> {
        &self.raw
    }

    /// The normalized bank: per-kernel spatial softmax.
    pub fn normalized(&self) -> Tensor<T> {
        normalize_kernels(&self.raw).expect("shape validated at construction")
    }
}

impl<T: Scalar> Default for KernelSet<T> {
    /// Ten 5×5 kernels with uniform logits (each normalizes to a box filter).
    fn default() -> Self {
        KernelSet {
            raw: Tensor::zeros(&[DEFAULT_KERNELS, DEFAULT_KERNEL_SIZE, DEFAULT_KERNEL_SIZE]),
        }
    }
}

/// Per-pixel blending mask logits, `[H,W,C]` with one channel per source.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet<T: Scalar = f32> {
    logits: Tensor<T>,
}

impl<T: Scalar> MaskSet<T> {
    pub fn new(logits: Tensor<T>) -> Result<Self> {
        if logits.rank() != 3 {
            return Err(Error::InvalidConfig(format!(
                "mask set must be [H,W,C], got {:?}",
                logits.shape()
            )));
        }
        Ok(MaskSet { logits })
    }

    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn channels(&self) -> usize {
        self.logits.shape()[2]
    }

    /// Softmax over channels: per pixel, the weights sum to 1.
    pub fn weights(&self) -> Tensor<T> {
        softmax_last_axis(&self.logits, self.channels())
    }
}

/// Per-kernel spatial softmax of a `[m,k,k]` logit bank: each `k×k` slice
/// becomes nonnegative and sums to 1.
pub fn normalize_kernels<T: Scalar>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    if raw.rank() != 3 || raw.shape()[1] != raw.shape()[2] {
        return Err(Error::InvalidConfig(format!(
            "normalize_kernels expects [m,k,k], got {:?}",
            raw.shape()
        )));
    }
    let (k1, k2) = (raw.shape()[1], raw.shape()[2]);
    Ok(softmax_last_axis(raw, k1 * k2))
}

/// Correlates `prev` (`[H,W,1]`) with each normalized kernel of a `[m,k,k]`
/// bank at "same" extent, replicating edges: channel `j` of the `[H,W,m]`
/// result is `prev` transformed by kernel `j`. `k` must be odd so the kernel
/// has a center tap.
pub fn advect<T: Scalar>(prev: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    if prev.rank() != 3 || prev.shape()[2] != 1 {
        return Err(Error::InvalidConfig(format!(
            "advect expects [H,W,1] frame, got {:?}",
            prev.shape()
        )));
    }
    if kernels.rank() != 3 || kernels.shape()[1] != kernels.shape()[2] {
        return Err(Error::shapes("advect", prev.shape(), kernels.shape()));
    }
    if kernels.shape()[1] % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "advect kernels must have odd size, got {}",
            kernels.shape()[1]
        )));
    }
    let (h, w) = (prev.shape()[0], prev.shape()[1]);
    let m = kernels.shape()[0];
    let batched = prev.reshape(&[1, h, w, 1])?;
    advect_forward(&batched, kernels).reshape(&[h, w, m])
}

/// Blends the `m` transformed channels — plus optionally the current frame —
/// with per-pixel softmax weights: `out = Σ_c softmax(mask_logits)_c · src_c`.
/// `mask_logits` must carry exactly one channel per source.
pub fn composite<T: Scalar>(
    transformed: &Tensor<T>,
    current: Option<&Tensor<T>>,
    mask_logits: &Tensor<T>,
) -> Result<Tensor<T>> {
    if transformed.rank() != 3 {
        return Err(Error::InvalidConfig(format!(
            "composite expects [H,W,m] transformed stack, got {:?}",
            transformed.shape()
        )));
    }
    let (h, w, m) = (
        transformed.shape()[0],
        transformed.shape()[1],
        transformed.shape()[2],
    );
    if let Some(cur) = current {
        if cur.shape() != [h, w, 1] {
            return Err(Error::shapes("composite current", &[h, w, 1], cur.shape()));
        }
    }
    let n_src = m + current.is_some() as usize;
    if mask_logits.shape() != [h, w, n_src] {
        return Err(Error::shapes(
            "composite masks",
            &[h, w, n_src],
            mask_logits.shape(),
        ));
    }
    let weights = softmax_last_axis(mask_logits, n_src);
    let mut out = Tensor::zeros(&[h, w, 1]);
    for px in 0..h * w {
        let wpx = &weights.data()[px * n_src..(px + 1) * n_src];
        let tpx = &transformed.data()[px * m..(px + 1) * m];
        let mut acc = T::ZERO;
        for j in 0..m {
            acc += wpx[j] * tpx[j];
        }
        if let Some(cur) = current {
            acc += wpx[m] * cur.data()[px];
        }
        out.data_mut()[px] = acc;
    }
    Ok(out)
}

/// Tape-composed [`composite`] over batched nodes, for gradient flow:
/// `transformed` is `[B,H,W,m]`, `current` optionally `[B,H,W,1]`, and
/// `mask_logits` `[B,H,W,m(+1)]`. Returns the blended `[B,H,W,1]` node.
pub fn composite_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    transformed: NodeId,
    current: Option<NodeId>,
    mask_logits: NodeId,
) -> Result<NodeId> {
    let m = tape.value(transformed).shape()[3];
    let n_src = m + current.is_some() as usize;
    let mask_shape = tape.value(mask_logits).shape().to_vec();
    if mask_shape[3] != n_src {
        let mut want = mask_shape.clone();
        want[3] = n_src;
        return Err(Error::shapes("composite masks", &want, &mask_shape));
    }
    let sources = match current {
        Some(cur) => tape.concat_channels(transformed, cur)?,
        None => transformed,
    };
    let weights = tape.softmax_channels(mask_logits);
    let weighted = tape.mul_elem(weights, sources)?;
    tape.sum_channels(weighted)
}
