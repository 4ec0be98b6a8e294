//! Building blocks of the network: composite convolution, ReLU, single-axis
//! max pooling, fully connected maps and the two-way softmax.
//!
//! Spatial arrays are stored `[s_0][s_1]..[s_{d-1}][channel]` with the channel
//! index fastest, every spatial side equal to `M`.

use crate::error::{Error, Result};
use crate::sh::num_coeffs;

/// A d-dimensional (d ≤ 3) spatial grid of P-channel coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialArray {
    pub dims: usize,
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SpatialArray {
    pub fn new(dims: usize, side: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if dims > 3 {
            return Err(Error::Shape(format!("at most 3 spatial dimensions, got {dims}")));
        }
        let want = side.pow(dims as u32) * channels;
        if data.len() != want {
            return Err(Error::Shape(format!("expected {want} values, got {}", data.len())));
        }
        Ok(Self {
            dims,
            side,
            channels,
            data,
        })
    }

    pub fn zeros(dims: usize, side: usize, channels: usize) -> Self {
        Self {
            dims,
            side,
            channels,
            data: vec![0.0; side.pow(dims as u32) * channels],
        }
    }

    pub fn voxels(&self) -> usize {
        self.side.pow(self.dims as u32)
    }
}

/// Per-band filter bank `w_{n,l}^k` for one composite convolution.
///
/// Weight layout: band ascending, then output order `l`, input order `k`,
/// then the `J^d` spatial taps in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFilterBank {
    pub dims: usize,
    pub filter_size: usize,
    pub n_max: usize,
    pub weights: Vec<f64>,
}

impl CompositeFilterBank {
    pub fn weight_len(dims: usize, filter_size: usize, n_max: usize) -> usize {
        band_weight_count(n_max) * filter_size.pow(dims as u32)
    }

    pub fn zeros(dims: usize, filter_size: usize, n_max: usize) -> Self {
        Self {
            dims,
            filter_size,
            n_max,
            weights: vec![0.0; Self::weight_len(dims, filter_size, n_max)],
        }
    }

    /// Filter taps of `w_{n,l}^k`.
    pub fn filter(&self, n: usize, l: i64, k: i64) -> &[f64] {
        let r = self.filter_range(n, l, k);
        &self.weights[r]
    }

    pub fn filter_mut(&mut self, n: usize, l: i64, k: i64) -> &mut [f64] {
        let r = self.filter_range(n, l, k);
        &mut self.weights[r]
    }

    fn filter_range(&self, n: usize, l: i64, k: i64) -> std::ops::Range<usize> {
        let taps = self.filter_size.pow(self.dims as u32);
        let before: usize = (0..n).step_by(2).map(|m| (2 * m + 1) * (2 * m + 1)).sum();
        let width = 2 * n + 1;
        let idx = before + (l + n as i64) as usize * width + (k + n as i64) as usize;
        idx * taps..(idx + 1) * taps
    }
}

/// Number of `(l, k)` filter pairs across all bands: `Σ_n (2n+1)²`.
pub fn band_weight_count(n_max: usize) -> usize {
    (0..=n_max).step_by(2).map(|n| (2 * n + 1) * (2 * n + 1)).sum()
}

/// Bias vector `b_{n,l}`, one entry per SH channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector(pub Vec<f64>);

#[derive(Debug, Clone, Copy)]
struct Band {
    width: usize,
    channel_offset: usize,
    weight_offset: usize,
}

/// Precomputed index plan of one composite convolution shape.
///
/// Zero padding, "same" output size, true convolution
/// `out(x) = Σ_t w(t) · in(x + c − t)` with `c = J / 2`.
///
/// Each band is evaluated as one matrix product: the input band is unfolded
/// into a `voxels × (width·taps)` patch matrix whose column order `(k, t)`
/// matches the bank layout, so the bank is read in place through strides.
#[derive(Debug, Clone)]
pub struct ConvPlan {
    dims: usize,
    side: usize,
    channels: usize,
    taps: usize,
    voxels: usize,
    /// Input voxel feeding `(output voxel, tap)`, or `OUTSIDE`.
    gather: Vec<u32>,
    bands: Vec<Band>,
}

const OUTSIDE: u32 = u32::MAX;

impl ConvPlan {
    pub fn new(dims: usize, side: usize, filter_size: usize, n_max: usize) -> Result<Self> {
        if filter_size % 2 == 0 {
            return Err(Error::Config(format!("filter size must be odd, got {filter_size}")));
        }
        let channels = num_coeffs(n_max)?;
        let taps = filter_size.pow(dims as u32);
        let voxels = side.pow(dims as u32);
        let c = (filter_size / 2) as i64;
        let unravel = |mut idx: usize, base: usize| -> [i64; 3] {
            let mut out = [0i64; 3];
            for d in (0..dims).rev() {
                out[d] = (idx % base) as i64;
                idx /= base;
            }
            out
        };
        let mut gather = vec![OUTSIDE; voxels * taps];
        for o in 0..voxels {
            let oc = unravel(o, side);
            for t in 0..taps {
                let tc = unravel(t, filter_size);
                let mut i = 0usize;
                let inside = (0..dims).all(|d| {
                    let x = oc[d] + c - tc[d];
                    i = i * side + x.max(0) as usize;
                    (0..side as i64).contains(&x)
                });
                if inside {
                    gather[o * taps + t] = i as u32;
                }
            }
        }
        let mut bands = Vec::new();
        let (mut co, mut wo) = (0, 0);
        for n in (0..=n_max).step_by(2) {
            let width = 2 * n + 1;
            bands.push(Band {
                width,
                channel_offset: co,
                weight_offset: wo,
            });
            co += width;
            wo += width * width * taps;
        }
        Ok(Self {
            dims,
            side,
            channels,
            taps,
            voxels,
            gather,
            bands,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.bands
            .iter()
            .map(|b| b.width * b.width * self.taps)
            .sum()
    }

    pub fn array_len(&self) -> usize {
        self.side.pow(self.dims as u32) * self.channels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn scratch(&self) -> Vec<f64> {
        let w = self.bands.last().map_or(0, |b| b.width);
        vec![0.0; self.voxels * w * self.taps]
    }

    /// Unfolds one input band into `patches[o][k·taps + t]`.
    fn unfold(&self, input: &[f64], band: &Band, patches: &mut [f64]) {
        let (p, w, taps) = (self.channels, band.width, self.taps);
        let cols = w * taps;
        for o in 0..self.voxels {
            let row = &mut patches[o * cols..(o + 1) * cols];
            for t in 0..taps {
                let i = self.gather[o * taps + t];
                if i == OUTSIDE {
                    for k in 0..w {
                        row[k * taps + t] = 0.0;
                    }
                } else {
                    let src = &input[i as usize * p + band.channel_offset..][..w];
                    for (k, v) in src.iter().enumerate() {
                        row[k * taps + t] = *v;
                    }
                }
            }
        }
    }

    fn check(&self, input: &[f64], weights: &[f64], bias: &[f64], out: &[f64]) {
        assert_eq!(input.len(), self.array_len());
        assert_eq!(out.len(), self.array_len());
        assert_eq!(weights.len(), self.weight_len());
        assert_eq!(bias.len(), self.channels);
    }

    /// `out = input ∗ w + b`; `out` is overwritten.
    pub fn forward(&self, input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
        self.check(input, weights, bias, out);
        let p = self.channels;
        for chunk in out.chunks_exact_mut(p) {
            chunk.copy_from_slice(bias);
        }
        let mut patches = self.scratch();
        for band in &self.bands {
            let cols = band.width * self.taps;
            self.unfold(input, band, &mut patches);
            // SAFETY: all three operands are in bounds: `patches` holds
            // voxels·cols values, the band's weights are width·cols values
            // from `weight_offset` (checked total length), and the output
            // block spans voxels rows of stride p starting at the band's
            // channel offset with `width` columns.
            unsafe {
                matrixmultiply::dgemm(
                    self.voxels,
                    cols,
                    band.width,
                    1.0,
                    patches.as_ptr(),
                    cols as isize,
                    1,
                    weights.as_ptr().add(band.weight_offset),
                    1,
                    cols as isize,
                    1.0,
                    out.as_mut_ptr().add(band.channel_offset),
                    p as isize,
                    1,
                );
            }
        }
    }

    /// Accumulates weight and bias gradients and, when requested, the input
    /// gradient.
    pub fn backward(
        &self,
        input: &[f64],
        weights: &[f64],
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        mut grad_in: Option<&mut [f64]>,
    ) {
        self.check(input, weights, grad_b, grad_out);
        assert_eq!(grad_w.len(), weights.len());
        if let Some(gi) = grad_in.as_deref() {
            assert_eq!(gi.len(), input.len());
        }
        let (p, taps) = (self.channels, self.taps);
        for chunk in grad_out.chunks_exact(p) {
            for (gb, g) in grad_b.iter_mut().zip(chunk) {
                *gb += g;
            }
        }
        let mut patches = self.scratch();
        for band in &self.bands {
            let w = band.width;
            let cols = w * taps;
            self.unfold(input, band, &mut patches);
            // SAFETY: same extents as in `forward`; the gradient block of
            // the bank mirrors the weight block.
            unsafe {
                // grad_W(cols × w) += patchesᵀ · grad_out_band
                matrixmultiply::dgemm(
                    cols,
                    self.voxels,
                    w,
                    1.0,
                    patches.as_ptr(),
                    1,
                    cols as isize,
                    grad_out.as_ptr().add(band.channel_offset),
                    p as isize,
                    1,
                    1.0,
                    grad_w.as_mut_ptr().add(band.weight_offset),
                    1,
                    cols as isize,
                );
            }
            let Some(gi) = grad_in.as_deref_mut() else { continue };
            // Patch gradients overwrite the unfolded input, then fold back.
            // SAFETY: as above; `patches` is written with beta = 0.
            unsafe {
                matrixmultiply::dgemm(
                    self.voxels,
                    w,
                    cols,
                    1.0,
                    grad_out.as_ptr().add(band.channel_offset),
                    p as isize,
                    1,
                    weights.as_ptr().add(band.weight_offset),
                    cols as isize,
                    1,
                    0.0,
                    patches.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            for o in 0..self.voxels {
                let row = &patches[o * cols..(o + 1) * cols];
                for t in 0..taps {
                    let i = self.gather[o * taps + t];
                    if i == OUTSIDE {
                        continue;
                    }
                    let dst = &mut gi[i as usize * p + band.channel_offset..][..w];
                    for (k, d) in dst.iter_mut().enumerate() {
                        *d += row[k * taps + t];
                    }
                }
            }
        }
    }
}

/// Composite spatial-spherical convolution of a coefficient array.
pub fn composite_conv(
    input: &SpatialArray,
    bank: &CompositeFilterBank,
    bias: &BiasVector,
) -> Result<SpatialArray> {
    let p = num_coeffs(bank.n_max)?;
    if input.channels != p {
        return Err(Error::Shape(format!(
            "bank expects {p} channels (n_max = {}), input has {}",
            bank.n_max, input.channels
        )));
    }
    if input.dims != bank.dims {
        return Err(Error::Shape(format!(
            "bank is {}-D, input is {}-D",
            bank.dims, input.dims
        )));
    }
    if bias.0.len() != p {
        return Err(Error::Shape(format!("bias has {} entries, expected {p}", bias.0.len())));
    }
    let plan = ConvPlan::new(input.dims, input.side, bank.filter_size, bank.n_max)?;
    if bank.weights.len() != plan.weight_len() {
        return Err(Error::Shape(format!(
            "bank has {} weights, expected {}",
            bank.weights.len(),
            plan.weight_len()
        )));
    }
    let mut out = SpatialArray::zeros(input.dims, input.side, p);
    plan.forward(&input.data, &bank.weights, &bias.0, &mut out.data);
    Ok(out)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub(crate) fn relu_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Max along one spatial axis; returns the reduced array and, for every
/// output element, the flat input index it came from (lowest index on ties).
pub fn pool_axis(input: &SpatialArray, axis: usize) -> Result<(SpatialArray, Vec<u32>)> {
    if input.dims == 0 || axis >= input.dims {
        return Err(Error::Shape(format!(
            "cannot pool axis {axis} of a {}-D array",
            input.dims
        )));
    }
    let mut out = SpatialArray::zeros(input.dims - 1, input.side, input.channels);
    let mut arg = vec![0u32; out.data.len()];
    pool_into(
        &input.data,
        input.dims,
        input.side,
        input.channels,
        axis,
        &mut out.data,
        &mut arg,
    );
    Ok((out, arg))
}

pub(crate) fn pool_into(
    input: &[f64],
    dims: usize,
    side: usize,
    channels: usize,
    axis: usize,
    out: &mut [f64],
    arg: &mut [u32],
) {
    // Strides in units of voxels.
    let stride = side.pow((dims - 1 - axis) as u32);
    let outer = side.pow(axis as u32);
    let mut ov = 0;
    for a in 0..outer {
        for b in 0..stride {
            let first = a * side * stride + b;
            for ch in 0..channels {
                let mut best_idx = first * channels + ch;
                let mut best = input[best_idx];
                for s in 1..side {
                    let idx = (first + s * stride) * channels + ch;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out[ov * channels + ch] = best;
                arg[ov * channels + ch] = best_idx as u32;
            }
            ov += 1;
        }
    }
}

/// Routes gradients of a pooled array back to the recorded argmax positions.
pub fn pool_backward(grad_out: &[f64], arg: &[u32], grad_in: &mut [f64]) {
    for (g, &i) in grad_out.iter().zip(arg) {
        grad_in[i as usize] += g;
    }
}

/// 3-D pooling along `axis` ∈ {0, 1, 2} (x, y, z).
pub fn pool3(input: &SpatialArray, axis: usize) -> Result<(SpatialArray, Vec<u32>)> {
    expect_dims(input, 3)?;
    pool_axis(input, axis)
}

/// 2-D pooling along `axis` ∈ {0, 1}.
pub fn pool2(input: &SpatialArray, axis: usize) -> Result<(SpatialArray, Vec<u32>)> {
    expect_dims(input, 2)?;
    pool_axis(input, axis)
}

/// Collapses the last spatial dimension into a length-P vector.
pub fn pool1(input: &SpatialArray) -> Result<(Vec<f64>, Vec<u32>)> {
    expect_dims(input, 1)?;
    let (out, arg) = pool_axis(input, 0)?;
    Ok((out.data, arg))
}

fn expect_dims(a: &SpatialArray, dims: usize) -> Result<()> {
    if a.dims != dims {
        return Err(Error::Shape(format!("expected a {dims}-D array, got {}-D", a.dims)));
    }
    Ok(())
}

/// `W·v + b` with `W` row-major `b.len() × v.len()`.
pub fn fcl(v: &[f64], w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if w.len() != v.len() * b.len() {
        return Err(Error::Shape(format!(
            "weight matrix has {} entries, expected {}×{}",
            w.len(),
            b.len(),
            v.len()
        )));
    }
    let mut out = b.to_vec();
    fcl_into(v, w, &mut out);
    Ok(out)
}

/// `out += W·v`.
pub(crate) fn fcl_into(v: &[f64], w: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(v.len())) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates `∂W += g vᵀ`, `∂b += g` and returns `Wᵀ g`.
pub(crate) fn fcl_backward(v: &[f64], w: &[f64], g: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let mut gv = vec![0.0; v.len()];
    for (r, &gr) in g.iter().enumerate() {
        gb[r] += gr;
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * v.len()..(r + 1) * v.len()];
        let grow = &mut gw[r * v.len()..(r + 1) * v.len()];
        for c in 0..v.len() {
            grow[c] += gr * v[c];
            gv[c] += gr * row[c];
        }
    }
    gv
}

/// `e^α / (e^α + e^β)`, evaluated without overflow.
pub fn softmax2(alpha: f64, beta: f64) -> f64 {
    let m = alpha.max(beta);
    let ea = (alpha - m).exp();
    let eb = (beta - m).exp();
    ea / (ea + eb)
}
