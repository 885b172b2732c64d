//! Channel-major 3D activations and the layer primitives of the surrogate.

use crate::error::{Error, Result};

/// Per-thread cache of large `f32` buffers. Layer outputs are short-lived and
/// repeat in size from one forward pass to the next; recycling them avoids
/// faulting in fresh pages for every layer.
mod pool {
    use std::cell::RefCell;

    const MIN_LEN: usize = 1 << 14;
    const MAX_BYTES: usize = 128 << 20;

    thread_local! {
        static POOL: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
    }

    pub(super) fn zeroed(len: usize) -> Vec<f32> {
        if len >= MIN_LEN {
            let hit = POOL
                .try_with(|p| {
                    let mut p = p.borrow_mut();
                    let i = (0..p.len()).filter(|&i| p[i].capacity() >= len).min_by_key(|&i| p[i].capacity())?;
                    Some(p.swap_remove(i))
                })
                .ok()
                .flatten();
            if let Some(mut v) = hit {
                v.clear();
                v.resize(len, 0.0);
                return v;
            }
        }
        vec![0.0; len]
    }

    pub(super) fn recycle(v: Vec<f32>) {
        if v.capacity() < MIN_LEN {
            return;
        }
        let _ = POOL.try_with(|p| {
            let mut p = p.borrow_mut();
            let held: usize = p.iter().map(|b| b.capacity() * 4).sum();
            if held + v.capacity() * 4 <= MAX_BYTES {
                p.push(v);
            }
        });
    }
}

/// Activation volume laid out `[ch][z][y][x]` (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    channels: usize,
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Activation {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        if data.len() != n || channels == 0 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDims(format!(
                "activation {channels}x{dims:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: pool::zeroed(channels * dims.iter().product::<usize>()),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(mut self) -> Vec<f32> {
        std::mem::take(&mut self.data)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[c * self.voxels() + x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            *v = v.max(0.0);
        }
    }

    pub fn add_inplace(&mut self, other: &Activation) -> Result<()> {
        if self.channels != other.channels || self.dims != other.dims {
            return Err(Error::InvalidDims(format!(
                "cannot add {}x{:?} and {}x{:?}",
                self.channels, self.dims, other.channels, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Stacks `other`'s channels after `self`'s.
    pub fn concat(&self, other: &Activation) -> Result<Activation> {
        if self.dims != other.dims {
            return Err(Error::InvalidDims(format!(
                "cannot concatenate spatial dims {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        let mut data = pool::zeroed(self.data.len() + other.data.len());
        data[..self.data.len()].copy_from_slice(&self.data);
        data[self.data.len()..].copy_from_slice(&other.data);
        Activation::new(self.channels + other.channels, self.dims, data)
    }
}

impl Drop for Activation {
    fn drop(&mut self) {
        pool::recycle(std::mem::take(&mut self.data));
    }
}

/// Output channels computed together; one SIMD register wide on AVX2.
const LANES: usize = 8;
/// Output voxels along x computed together, each with its own accumulator.
const TILE: usize = 8;

/// Geometry shared by every output row of one convolution.
struct ConvPlan<'a> {
    cin: usize,
    stride: usize,
    /// Padded input `[z][y][x][c]` with a one-voxel zero border (more along x
    /// so the last tile never reads out of bounds).
    padded: &'a [f32],
    py: usize,
    px: usize,
    /// Weights `[block][tap][c][lane]`, zero beyond `out_ch`.
    weights: &'a [f32],
    bias: &'a [f32],
    blocks: usize,
    /// Output x extent rounded up to whole tiles.
    ox_tiles: usize,
    oy: usize,
}

/// Computes one output z-plane into `dst`, laid out `[y][x][block][lane]`.
#[inline(always)]
fn conv_plane_impl(p: &ConvPlan, z: usize, dst: &mut [f32]) {
    let (cin, s) = (p.cin, p.stride);
    let row_len = p.px * cin;
    for y in 0..p.oy {
        for b in 0..p.blocks {
            let wb = &p.weights[b * 27 * cin * LANES..(b + 1) * 27 * cin * LANES];
            let bias: &[f32; LANES] = p.bias[b * LANES..(b + 1) * LANES].try_into().unwrap();
            for t in 0..p.ox_tiles {
                let x0 = t * TILE;
                let mut acc = [*bias; TILE];
                for kz in 0..3 {
                    for ky in 0..3 {
                        let r = (z * s + kz) * p.py + y * s + ky;
                        let row = &p.padded[r * row_len..(r + 1) * row_len];
                        for kx in 0..3 {
                            let wt = &wb[((kz * 3 + ky) * 3 + kx) * cin * LANES..][..cin * LANES];
                            let span = &row[(x0 * s + kx) * cin..][..((TILE - 1) * s + 1) * cin];
                            for c in 0..cin {
                                let w: &[f32; LANES] = wt[c * LANES..(c + 1) * LANES].try_into().unwrap();
                                for (j, a) in acc.iter_mut().enumerate() {
                                    let v = span[j * s * cin + c];
                                    for l in 0..LANES {
                                        a[l] += v * w[l];
                                    }
                                }
                            }
                        }
                    }
                }
                for (j, a) in acc.iter().enumerate() {
                    let at = ((y * p.ox_tiles * TILE + x0 + j) * p.blocks + b) * LANES;
                    dst[at..at + LANES].copy_from_slice(a);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn conv_plane_avx2(p: &ConvPlan, z: usize, dst: &mut [f32]) {
    use std::arch::x86_64::*;
    const _: () = assert!(LANES == 8 && TILE == 8);

    let (cin, s) = (p.cin, p.stride);
    let row_len = p.px * cin;
    let step = s * cin;
    for y in 0..p.oy {
        for b in 0..p.blocks {
            let wb = p.weights[b * 27 * cin * LANES..(b + 1) * 27 * cin * LANES].as_ptr();
            let bias = _mm256_loadu_ps(p.bias[b * LANES..].as_ptr());
            for t in 0..p.ox_tiles {
                let x0 = t * TILE;
                let mut acc = [bias; TILE];
                for kz in 0..3 {
                    for ky in 0..3 {
                        let r = (z * s + kz) * p.py + y * s + ky;
                        let row = &p.padded[r * row_len..(r + 1) * row_len];
                        for kx in 0..3 {
                            let span = &row[(x0 * s + kx) * cin..][..((TILE - 1) * s + 1) * cin];
                            // SAFETY: the largest offset read is (TILE-1)*step + cin-1 < span.len(),
                            // and the weight reads stay within this tap's cin*LANES slice of `wb`.
                            let sp = span.as_ptr();
                            let wt = wb.add(((kz * 3 + ky) * 3 + kx) * cin * LANES);
                            for c in 0..cin {
                                let w = _mm256_loadu_ps(wt.add(c * LANES));
                                let a = sp.add(c);
                                acc[0] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a), w, acc[0]);
                                acc[1] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a.add(step)), w, acc[1]);
                                acc[2] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a.add(2 * step)), w, acc[2]);
                                acc[3] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a.add(3 * step)), w, acc[3]);
                                acc[4] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a.add(4 * step)), w, acc[4]);
                                acc[5] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a.add(5 * step)), w, acc[5]);
                                acc[6] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a.add(6 * step)), w, acc[6]);
                                acc[7] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a.add(7 * step)), w, acc[7]);
                            }
                        }
                    }
                }
                for (j, a) in acc.iter().enumerate() {
                    let at = ((y * p.ox_tiles * TILE + x0 + j) * p.blocks + b) * LANES;
                    _mm256_storeu_ps(dst[at..at + LANES].as_mut_ptr(), *a);
                }
            }
        }
    }
}

fn conv_plane(p: &ConvPlan, z: usize, dst: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { conv_plane_avx2(p, z, dst) };
    }
    conv_plane_impl(p, z, dst)
}

/// 3×3×3 cross-correlation with zero padding 1.
///
/// `kernel` is `[out_ch][in_ch][kz][ky][kx]`; output spatial dims are
/// `ceil(in / stride)`.
pub fn conv3d(input: &Activation, kernel: &[f32], bias: &[f32], out_ch: usize, stride: usize) -> Result<Activation> {
    check_conv(input, kernel, bias, out_ch, stride)?;
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx512f") {
        return Ok(rows::conv3d_rows(input, kernel, bias, out_ch, stride));
    }
    Ok(conv3d_blocked(input, kernel, bias, out_ch, stride))
}

fn check_conv(input: &Activation, kernel: &[f32], bias: &[f32], out_ch: usize, stride: usize) -> Result<()> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidParam(format!("stride must be 1 or 2, got {stride}")));
    }
    let cin = input.channels;
    if out_ch == 0 || bias.len() != out_ch || kernel.len() % (out_ch * 27) != 0 {
        return Err(Error::InvalidDims(format!(
            "kernel of {} values / bias of {} do not fit {out_ch} output channels",
            kernel.len(),
            bias.len()
        )));
    }
    let kernel_cin = kernel.len() / (out_ch * 27);
    if kernel_cin != cin {
        return Err(Error::ChannelMismatch {
            expected: kernel_cin,
            actual: cin,
        });
    }
    Ok(())
}

/// Channel-blocked direct convolution; any stride, any CPU.
fn conv3d_blocked(input: &Activation, kernel: &[f32], bias: &[f32], out_ch: usize, stride: usize) -> Activation {
    let cin = input.channels;
    let [nx, ny, nz] = input.dims;
    let od = input.dims.map(|d| d.div_ceil(stride));
    let [ox, oy, oz] = od;
    let ox_tiles = ox.div_ceil(TILE);
    let blocks = out_ch.div_ceil(LANES);

    let (pz, py) = (nz + 2, ny + 2);
    let px = (nx + 2).max((ox_tiles * TILE - 1) * stride + 3);
    let mut padded = pool::zeroed(pz * py * px * cin);
    let in_vox = nx * ny * nz;
    for z in 0..nz {
        for y in 0..ny {
            let drow = ((z + 1) * py + y + 1) * px;
            for c in 0..cin {
                let src = &input.data[c * in_vox + (z * ny + y) * nx..][..nx];
                for (x, v) in src.iter().enumerate() {
                    padded[(drow + x + 1) * cin + c] = *v;
                }
            }
        }
    }

    let mut weights = vec![0.0f32; blocks * 27 * cin * LANES];
    let mut bias_p = vec![0.0f32; blocks * LANES];
    for o in 0..out_ch {
        bias_p[o] = bias[o];
        for c in 0..cin {
            for t in 0..27 {
                weights[(((o / LANES) * 27 + t) * cin + c) * LANES + o % LANES] = kernel[(o * cin + c) * 27 + t];
            }
        }
    }

    let plan = ConvPlan {
        cin,
        stride,
        padded: &padded,
        py,
        px,
        weights: &weights,
        bias: &bias_p,
        blocks,
        ox_tiles,
        oy,
    };
    let plane_len = oy * ox_tiles * TILE * blocks * LANES;
    let mut blocked = pool::zeroed(oz * plane_len);
    for (z, dst) in blocked.chunks_exact_mut(plane_len).enumerate() {
        conv_plane(&plan, z, dst);
    }

    let n_out = ox * oy * oz;
    let mut out = pool::zeroed(out_ch * n_out);
    for (o, dst) in out.chunks_exact_mut(n_out).enumerate() {
        let (b, l) = (o / LANES, o % LANES);
        for z in 0..oz {
            for y in 0..oy {
                let src_row = (z * oy + y) * ox_tiles * TILE;
                for x in 0..ox {
                    dst[(z * oy + y) * ox + x] = blocked[((src_row + x) * blocks + b) * LANES + l];
                }
            }
        }
    }
    Activation {
        channels: out_ch,
        dims: od,
        data: out,
    }
}

/// Convolution vectorized along x with AVX-512. Each tile keeps up to eight
/// output channels times two 16-wide x vectors (or one channel times two
/// rows) in registers and writes the channel-major output directly. Stride 2
/// loads 32 consecutive inputs and keeps the even lanes.
#[cfg(target_arch = "x86_64")]
mod rows {
    use std::arch::x86_64::*;

    use super::{pool, Activation};

    const W: usize = 16;

    struct Rows<'a> {
        cin: usize,
        out_ch: usize,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
        /// `[c][z+2][y+2][px]`, data at x offset 1.
        padded: &'a [f32],
        px: usize,
        /// `[tap][c][o]`
        weights: &'a [f32],
        bias: &'a [f32],
    }

    pub(super) fn conv3d_rows(input: &Activation, kernel: &[f32], bias: &[f32], out_ch: usize, stride: usize) -> Activation {
        let cin = input.channels;
        let [nx, ny, nz] = input.dims;
        let od = input.dims.map(|d| d.div_ceil(stride));
        // widest read: stride * (last x-vector end) + 2 taps
        let px = stride * od[0].div_ceil(W) * W + 2;
        let (py, pz) = (ny + 2, nz + 2);
        let in_vox = nx * ny * nz;
        let mut padded = pool::zeroed(cin * pz * py * px);
        for c in 0..cin {
            for z in 0..nz {
                for y in 0..ny {
                    let src = &input.data[c * in_vox + (z * ny + y) * nx..][..nx];
                    let at = ((c * pz + z + 1) * py + y + 1) * px + 1;
                    padded[at..at + nx].copy_from_slice(src);
                }
            }
        }
        let mut weights = vec![0.0f32; 27 * cin * out_ch];
        for o in 0..out_ch {
            for c in 0..cin {
                for t in 0..27 {
                    weights[(t * cin + c) * out_ch + o] = kernel[(o * cin + c) * 27 + t];
                }
            }
        }
        let r = Rows {
            cin,
            out_ch,
            in_dims: input.dims,
            out_dims: od,
            padded: &padded,
            px,
            weights: &weights,
            bias,
        };
        let mut out = pool::zeroed(out_ch * od.iter().product::<usize>());
        // SAFETY: only reached when avx512f was detected at runtime.
        unsafe {
            if stride == 1 {
                run::<1>(&r, &mut out)
            } else {
                run::<2>(&r, &mut out)
            }
        };
        pool::recycle(padded);
        Activation {
            channels: out_ch,
            dims: od,
            data: out,
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn run<const S: usize>(r: &Rows, out: &mut [f32]) {
        let [ox, oy, oz] = r.out_dims;
        let mut o0 = 0;
        while o0 < r.out_ch {
            let ob = (r.out_ch - o0).min(8);
            for z in 0..oz {
                let mut x0 = 0;
                while x0 < ox {
                    let wide = ox - x0 > W;
                    if ob == 8 {
                        for y in 0..oy {
                            match wide {
                                true => tile::<8, 2, 1, S>(r, out, o0, z, y, x0),
                                false => tile::<8, 1, 1, S>(r, out, o0, z, y, x0),
                            }
                        }
                    } else {
                        for o in o0..o0 + ob {
                            let mut y = 0;
                            while y + 2 <= oy {
                                match wide {
                                    true => tile::<1, 2, 2, S>(r, out, o, z, y, x0),
                                    false => tile::<1, 1, 2, S>(r, out, o, z, y, x0),
                                }
                                y += 2;
                            }
                            for y in y..oy {
                                match wide {
                                    true => tile::<1, 2, 1, S>(r, out, o, z, y, x0),
                                    false => tile::<1, 1, 1, S>(r, out, o, z, y, x0),
                                }
                            }
                        }
                    }
                    x0 += if wide { 2 * W } else { W };
                }
            }
            o0 += ob;
        }
    }

    /// Output channels `o0..o0+OB`, rows `y0..y0+YR` of plane `z`, x from `x0`
    /// over `XV` vectors.
    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn tile<const OB: usize, const XV: usize, const YR: usize, const S: usize>(
        r: &Rows,
        out: &mut [f32],
        o0: usize,
        z: usize,
        y0: usize,
        x0: usize,
    ) {
        let [_, ny, nz] = r.in_dims;
        let [ox, oy, oz] = r.out_dims;
        let (py, pz, px, cin) = (ny + 2, nz + 2, r.px, r.cin);
        let mut acc = [[[_mm512_setzero_ps(); XV]; YR]; OB];
        for (o, a) in acc.iter_mut().enumerate() {
            *a = [[_mm512_set1_ps(r.bias[o0 + o]); XV]; YR];
        }
        let even = _mm512_setr_epi32(0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 26, 28, 30);
        let padded = r.padded.as_ptr();
        let weights = r.weights.as_ptr();
        for c in 0..cin {
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let t = (kz * 3 + ky) * 3 + kx;
                        // SAFETY: rows (y0+YR-1)*S+ky <= py-1 and planes z*S+kz <= pz-1 by the
                        // ceil-div output dims; along x the last read is
                        // S*(x0 + XV*W) + 1 <= S*ceil(ox/W)*W + 1 < px. Weight index < 27*cin*out_ch.
                        let mut v = [[_mm512_setzero_ps(); XV]; YR];
                        for (yr, vy) in v.iter_mut().enumerate() {
                            let row = ((c * pz + z * S + kz) * py + (y0 + yr) * S + ky) * px + x0 * S + kx;
                            for (k, vk) in vy.iter_mut().enumerate() {
                                let p = padded.add(row + k * W * S);
                                *vk = if S == 1 {
                                    _mm512_loadu_ps(p)
                                } else {
                                    _mm512_permutex2var_ps(_mm512_loadu_ps(p), even, _mm512_loadu_ps(p.add(W)))
                                };
                            }
                        }
                        let wt = weights.add((t * cin + c) * r.out_ch + o0);
                        for (o, a) in acc.iter_mut().enumerate() {
                            let w = _mm512_set1_ps(*wt.add(o));
                            for yr in 0..YR {
                                for k in 0..XV {
                                    a[yr][k] = _mm512_fmadd_ps(v[yr][k], w, a[yr][k]);
                                }
                            }
                        }
                    }
                }
            }
        }
        let vox = ox * oy * oz;
        for (o, a) in acc.iter().enumerate() {
            for (yr, ay) in a.iter().enumerate() {
                let base = (o0 + o) * vox + (z * oy + y0 + yr) * ox + x0;
                for (k, ak) in ay.iter().enumerate() {
                    let start = k * W;
                    if x0 + start >= ox {
                        break;
                    }
                    let n = (ox - x0 - start).min(W);
                    let dst = &mut out[base + start..base + start + n];
                    let mask: __mmask16 = if n == W { !0 } else { (1u16 << n) - 1 };
                    _mm512_mask_storeu_ps(dst.as_mut_ptr(), mask, *ak);
                }
            }
        }
    }
}

/// Nearest-neighbor upsampling: every voxel becomes a `factor³` block.
pub fn upsample_nn(input: &Activation, factor: usize) -> Activation {
    let [nx, ny, nz] = input.dims;
    let od = [nx * factor, ny * factor, nz * factor];
    let out_vox = od.iter().product::<usize>();
    let mut data = pool::zeroed(input.channels * out_vox);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = &mut data[c * out_vox..(c + 1) * out_vox];
        for (z, plane) in dst.chunks_exact_mut(od[0] * od[1]).enumerate() {
            for (y, row) in plane.chunks_exact_mut(od[0]).enumerate() {
                let srow = &src[nx * (y / factor + ny * (z / factor))..][..nx];
                for (block, v) in row.chunks_exact_mut(factor).zip(srow) {
                    block.fill(*v);
                }
            }
        }
    }
    Activation {
        channels: input.channels,
        dims: od,
        data,
    }
}
