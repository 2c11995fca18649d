//! Dense row-major `f64` tensors and the forward kernels used by the model
//! graph.
//!
//! Every tensor that flows through a model has layout `[channels, spatial...]`.
//! The spatial rank is generic; 1-D, 2-D and 3-D inputs share one code path.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                len
            )));
        }
        Ok(Self { shape, data })
    }

    /// Zero tensor of the given shape.
    ///
    /// Panics if `shape` is empty or contains a zero.
    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    /// Number of elements per channel.
    pub fn spatial_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        ravel(&self.shape, index)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    /// Contiguous data of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Copy of channels `start..start + count`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        if count == 0 || start + count > self.channels() {
            return Err(Error::shape(format!(
                "channel slice {}..{} out of range for {} channels",
                start,
                start + count,
                self.channels()
            )));
        }
        let n = self.spatial_len();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor::new(shape, self.data[start * n..(start + count) * n].to_vec())
    }

    /// New channel `k` is old channel `perm[k]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Tensor> {
        crate::graph::check_permutation(perm, self.channels())?;
        let mut data = Vec::with_capacity(self.len());
        for &c in perm {
            data.extend_from_slice(self.channel(c));
        }
        Tensor::new(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape {:?} does not match {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!(
            "tensor dimensions must be positive, got {:?}",
            shape
        )));
    }
    Ok(())
}

pub(crate) fn ravel(shape: &[usize], index: &[usize]) -> Result<usize> {
    if index.len() != shape.len() {
        return Err(Error::shape(format!(
            "index {:?} has rank {}, tensor has rank {}",
            index,
            index.len(),
            shape.len()
        )));
    }
    let mut flat = 0;
    for (&i, &d) in index.iter().zip(shape) {
        if i >= d {
            return Err(Error::shape(format!(
                "index {:?} out of bounds for shape {:?}",
                index, shape
            )));
        }
        flat = flat * d + i;
    }
    Ok(flat)
}

pub(crate) fn unravel(shape: &[usize], mut flat: usize, out: &mut [usize]) {
    for (o, &d) in out.iter_mut().zip(shape).rev() {
        *o = flat % d;
        flat /= d;
    }
}

/// Sliding-window geometry shared by convolution and pooling.
#[derive(Debug, Clone)]
pub(crate) struct WindowGeometry {
    in_spatial: Vec<usize>,
    window: Vec<usize>,
    out_spatial: Vec<usize>,
    stride: Vec<usize>,
    padding: Vec<usize>,
}

impl WindowGeometry {
    pub(crate) fn new(
        in_spatial: &[usize],
        window: &[usize],
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Self> {
        let rank = in_spatial.len();
        if window.len() != rank || stride.len() != rank || padding.len() != rank {
            return Err(Error::shape(format!(
                "spatial rank {} but window {:?}, stride {:?}, padding {:?}",
                rank, window, stride, padding
            )));
        }
        if stride.contains(&0) || window.contains(&0) {
            return Err(Error::shape("window and stride entries must be positive"));
        }
        let mut out_spatial = Vec::with_capacity(rank);
        for d in 0..rank {
            let padded = in_spatial[d] + 2 * padding[d];
            if padded < window[d] {
                return Err(Error::shape(format!(
                    "window {:?} larger than padded input {:?}",
                    window, in_spatial
                )));
            }
            out_spatial.push((padded - window[d]) / stride[d] + 1);
        }
        Ok(Self {
            in_spatial: in_spatial.to_vec(),
            window: window.to_vec(),
            out_spatial,
            stride: stride.to_vec(),
            padding: padding.to_vec(),
        })
    }

    pub(crate) fn out_spatial(&self) -> &[usize] {
        &self.out_spatial
    }

    pub(crate) fn out_len(&self) -> usize {
        self.out_spatial.iter().product()
    }

    pub(crate) fn in_len(&self) -> usize {
        self.in_spatial.iter().product()
    }

    pub(crate) fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    /// Fills `taps` with `(window_offset, input_position)` pairs for output
    /// position `out`, in ascending window order. Taps landing in padding are
    /// omitted.
    pub(crate) fn taps(
        &self,
        out: usize,
        scratch: &mut TapScratch,
        taps: &mut Vec<(usize, usize)>,
    ) {
        taps.clear();
        let rank = self.in_spatial.len();
        scratch.resize(rank);
        unravel(&self.out_spatial, out, &mut scratch.out);
        'window: for k in 0..self.window_len() {
            unravel(&self.window, k, &mut scratch.win);
            let mut flat = 0usize;
            for d in 0..rank {
                let pos = (scratch.out[d] * self.stride[d] + scratch.win[d]) as isize
                    - self.padding[d] as isize;
                if pos < 0 || pos as usize >= self.in_spatial[d] {
                    continue 'window;
                }
                flat = flat * self.in_spatial[d] + pos as usize;
            }
            taps.push((k, flat));
        }
    }
}

#[derive(Debug, Default)]
pub(crate) struct TapScratch {
    out: Vec<usize>,
    win: Vec<usize>,
}

impl TapScratch {
    fn resize(&mut self, rank: usize) {
        self.out.resize(rank, 0);
        self.win.resize(rank, 0);
    }
}

/// Cross-correlation with zero padding.
///
/// `input` is `[C_in, S...]`, `kernel` is `[C_out, C_in, K...]`, `bias` is
/// `[C_out]`. Output spatial extent per axis is `(S + 2 pad - K) / stride + 1`.
pub fn conv_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: &[usize],
    padding: &[usize],
) -> Result<Tensor> {
    let geom = conv_geometry(input.shape(), kernel, bias, stride, padding)?;
    let c_in = input.channels();
    let c_out = kernel.channels();
    let in_len = geom.in_len();
    let win_len = geom.window_len();
    let out_len = geom.out_len();
    let x = input.data();
    let w = kernel.data();

    let mut out_shape = vec![c_out];
    out_shape.extend_from_slice(geom.out_spatial());
    let mut out = Tensor::zeros(&out_shape);

    let mut scratch = TapScratch::default();
    let mut taps = Vec::with_capacity(win_len);
    for pos in 0..out_len {
        geom.taps(pos, &mut scratch, &mut taps);
        for co in 0..c_out {
            let mut acc = bias.data()[co];
            let wo = co * c_in * win_len;
            for &(k, ip) in &taps {
                for ci in 0..c_in {
                    acc += x[ci * in_len + ip] * w[wo + ci * win_len + k];
                }
            }
            out.data[co * out_len + pos] = acc;
        }
    }
    Ok(out)
}

pub(crate) fn conv_geometry(
    input_shape: &[usize],
    kernel: &Tensor,
    bias: &Tensor,
    stride: &[usize],
    padding: &[usize],
) -> Result<WindowGeometry> {
    let spatial_rank = input_shape.len() - 1;
    if kernel.rank() != spatial_rank + 2 {
        return Err(Error::shape(format!(
            "kernel shape {:?} does not match input shape {:?}",
            kernel.shape(),
            input_shape
        )));
    }
    if kernel.shape()[1] != input_shape[0] {
        return Err(Error::shape(format!(
            "kernel expects {} input channels, input has {}",
            kernel.shape()[1],
            input_shape[0]
        )));
    }
    if bias.shape() != [kernel.shape()[0]] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            kernel.shape()[0]
        )));
    }
    WindowGeometry::new(&input_shape[1..], &kernel.shape()[2..], stride, padding)
}

/// Flat input indices of the winning element for each pooled output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxIndices {
    pub indices: Vec<usize>,
    pub input_shape: Vec<usize>,
}

/// Per-channel max pooling without padding. Ties go to the lowest flat index.
pub fn maxpool_forward(
    input: &Tensor,
    window: &[usize],
    stride: &[usize],
) -> Result<(Tensor, ArgmaxIndices)> {
    if input.rank() < 2 {
        return Err(Error::shape("max pooling needs a spatial axis"));
    }
    let zero_pad = vec![0; window.len()];
    let geom = WindowGeometry::new(input.spatial_shape(), window, stride, &zero_pad)?;
    let channels = input.channels();
    let in_len = geom.in_len();
    let out_len = geom.out_len();

    let mut out_shape = vec![channels];
    out_shape.extend_from_slice(geom.out_spatial());
    let mut out = Tensor::zeros(&out_shape);
    let mut indices = vec![0usize; channels * out_len];

    let mut scratch = TapScratch::default();
    let mut taps = Vec::new();
    for pos in 0..out_len {
        geom.taps(pos, &mut scratch, &mut taps);
        for c in 0..channels {
            let base = c * in_len;
            let mut best = base + taps[0].1;
            for &(_, ip) in &taps[1..] {
                if input.data[base + ip] > input.data[best] {
                    best = base + ip;
                }
            }
            out.data[c * out_len + pos] = input.data[best];
            indices[c * out_len + pos] = best;
        }
    }
    Ok((
        out,
        ArgmaxIndices {
            indices,
            input_shape: input.shape().to_vec(),
        },
    ))
}

/// Nearest-neighbour upsampling: each element becomes a `factor`-sized block.
pub fn upsample_forward(input: &Tensor, factor: &[usize]) -> Result<Tensor> {
    let out_shape = upsample_shape(input.shape(), factor)?;
    let mut out = Tensor::zeros(&out_shape);
    let in_spatial = input.spatial_shape();
    let rank = in_spatial.len();
    let mut coord = vec![0usize; out_shape.len()];
    for o in 0..out.len() {
        unravel(&out_shape, o, &mut coord);
        let mut src = coord[0];
        for d in 0..rank {
            src = src * in_spatial[d] + coord[d + 1] / factor[d];
        }
        out.data[o] = input.data[src];
    }
    Ok(out)
}

pub(crate) fn upsample_shape(input_shape: &[usize], factor: &[usize]) -> Result<Vec<usize>> {
    if factor.len() + 1 != input_shape.len() {
        return Err(Error::shape(format!(
            "upsample factor {:?} does not match spatial shape {:?}",
            factor,
            &input_shape[1..]
        )));
    }
    if factor.contains(&0) {
        return Err(Error::shape("upsample factors must be positive"));
    }
    let mut shape = input_shape.to_vec();
    for (s, f) in shape[1..].iter_mut().zip(factor) {
        *s *= f;
    }
    Ok(shape)
}

/// Stacks `a` and `b` along the channel axis, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    concat_all(&[a, b])
}

/// Channel concatenation of any number of parts. A single part is returned
/// unchanged.
pub fn concat_all(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("nothing to concatenate"))?;
    let spatial = first.spatial_shape();
    for p in &parts[1..] {
        if p.spatial_shape() != spatial {
            return Err(Error::shape(format!(
                "cannot concatenate spatial shapes {:?} and {:?}",
                spatial,
                p.spatial_shape()
            )));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}
