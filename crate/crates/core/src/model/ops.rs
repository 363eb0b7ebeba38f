//! Volumetric tensor kernels with hand-written backward passes.
//!
//! Every kernel works on a single sample laid out as `(C, D, H, W)` in C order.
//! Convolutions lower to im2col plus a single-threaded GEMM; the remaining
//! reductions use a fixed lane order. Results are bit-reproducible for a given
//! build and machine.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub type Dims = [usize; 3];

/// Floating point type the network can run in. Training uses `f32`; the
/// gradient checks run the same code in `f64`.
pub trait Scalar: Float + Sum + Default + Debug + Send + Sync + 'static {
    /// `C += A * B` for strided row/column views, with shapes `(m, k, n)`.
    fn gemm(shape: (usize, usize, usize), a: Strided<Self>, b: Strided<Self>, c: StridedMut<Self>);
}

/// Matrix view: slice, row stride, column stride.
pub type Strided<'a, T> = (&'a [T], isize, isize);
pub type StridedMut<'a, T> = (&'a mut [T], isize, isize);

fn check_view(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
        assert!(
            rs >= 0 && cs >= 0 && (last as usize) < len,
            "gemm view out of bounds"
        );
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                (m, k, n): (usize, usize, usize),
                (a, rsa, csa): Strided<$t>,
                (b, rsb, csb): Strided<$t>,
                (c, rsc, csc): StridedMut<$t>,
            ) {
                check_view(a.len(), m, k, rsa, csa);
                check_view(b.len(), k, n, rsb, csb);
                check_view(c.len(), m, n, rsc, csc);
                // SAFETY: the three views were bounds-checked above and `c`
                // is uniquely borrowed.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        1.0,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Puts the current thread's SSE unit in flush-to-zero and
/// denormals-are-zero mode until dropped. Saturated sigmoids otherwise feed
/// subnormal gradients through the backward pass, which runs several times
/// slower.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let saved = read_mxcsr();
            write_mxcsr(saved | 0x8040);
            FlushDenormals { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        FlushDenormals {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        write_mxcsr(self.saved);
    }
}

#[cfg(target_arch = "x86_64")]
fn read_mxcsr() -> u32 {
    let mut v = 0u32;
    // SAFETY: stmxcsr only stores the control register into `v`.
    unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut v, options(nostack)) };
    v
}

#[cfg(target_arch = "x86_64")]
fn write_mxcsr(v: u32) {
    // SAFETY: only the FTZ/DAZ bits differ from a value read back from the
    // register, so no exception is unmasked.
    unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &v, options(nostack)) };
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        FeatureMap {
            channels,
            dims,
            data: vec![T::zero(); channels * voxel_count(dims)],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * voxel_count(dims), "feature map size");
        FeatureMap {
            channels,
            dims,
            data,
        }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat(a: &Self, b: &Self) -> Self {
        assert_eq!(a.dims, b.dims, "concat dims");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        FeatureMap {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        }
    }

    /// Inverse of [`FeatureMap::concat`].
    pub fn split(mut self, first: usize) -> (Self, Self) {
        let n = self.voxels();
        let tail = self.data.split_off(first * n);
        let rest = self.channels - first;
        (
            FeatureMap::from_vec(first, self.dims, self.data),
            FeatureMap::from_vec(rest, self.dims, tail),
        )
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("cast"))
                .collect(),
        }
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }
}

const LANES: usize = 16;

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..LANES {
            lanes[j] = lanes[j] + x[j] * y[j];
        }
    }
    let mut s = T::zero();
    for l in lanes {
        s = s + l;
    }
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

pub fn sum<T: Scalar>(a: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let ra = ca.remainder();
    for x in ca {
        for j in 0..LANES {
            lanes[j] = lanes[j] + x[j];
        }
    }
    let mut s = T::zero();
    for l in lanes {
        s = s + l;
    }
    for x in ra {
        s = s + *x;
    }
    s
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * *xv;
    }
}

// ---------------------------------------------------------------------------
// 3x3x3 convolution, stride 1, zero "same" padding.
// Weight layout: [cout][cin][27], taps ordered (kz, ky, kx).
// ---------------------------------------------------------------------------

const TAPS: usize = 27;

/// Geometry of a grid padded by one voxel on each side.
struct Padded {
    dims: Dims,
    wp: usize,
    plane: usize,
    len: usize,
    offsets: [usize; TAPS],
}

impl Padded {
    fn new(dims: Dims) -> Self {
        let wp = dims[2] + 2;
        let plane = (dims[1] + 2) * wp;
        let len = (dims[0] + 2) * plane;
        let mut offsets = [0; TAPS];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    offsets[kz * 9 + ky * 3 + kx] = kz * plane + ky * wp + kx;
                }
            }
        }
        Padded {
            dims,
            wp,
            plane,
            len,
            offsets,
        }
    }

    fn row_base(&self, z: usize, y: usize) -> usize {
        z * self.plane + y * self.wp
    }

    fn pad<T: Scalar>(&self, x: &[T], channels: usize) -> Vec<T> {
        let [d, h, w] = self.dims;
        let n = d * h * w;
        let mut out = vec![T::zero(); channels * self.len];
        for c in 0..channels {
            let src = &x[c * n..(c + 1) * n];
            let dst = &mut out[c * self.len..(c + 1) * self.len];
            for z in 0..d {
                for y in 0..h {
                    let o = self.row_base(z + 1, y + 1) + 1;
                    dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
                }
            }
        }
        out
    }
}

/// Voxels per im2col chunk; whole rows are always kept together.
const CHUNK_VOXELS: usize = 4096;

/// Consecutive output rows `[r0, r1)` (row = `z * h + y`) per chunk.
fn row_chunks(dims: Dims) -> impl Iterator<Item = (usize, usize)> {
    let rows = dims[0] * dims[1];
    let step = (CHUNK_VOXELS / dims[2]).max(1);
    (0..rows)
        .step_by(step)
        .map(move |r0| (r0, (r0 + step).min(rows)))
}

/// Fills `col` as a `[cin * 27][nv]` matrix of shifted input rows.
fn im2col<T: Scalar>(xp: &[T], cin: usize, geo: &Padded, r0: usize, r1: usize, col: &mut [T]) {
    let [_, h, w] = geo.dims;
    let nv = (r1 - r0) * w;
    for ci in 0..cin {
        let xc = &xp[ci * geo.len..(ci + 1) * geo.len];
        for k in 0..TAPS {
            let dst = &mut col[(ci * TAPS + k) * nv..][..nv];
            for r in r0..r1 {
                let src = geo.row_base(r / h, r % h) + geo.offsets[k];
                dst[(r - r0) * w..][..w].copy_from_slice(&xc[src..src + w]);
            }
        }
    }
}

fn conv3_padded<T: Scalar>(
    xp: &[T],
    cin: usize,
    geo: &Padded,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
) -> Vec<T> {
    let n = voxel_count(geo.dims);
    let w = geo.dims[2];
    let kdim = cin * TAPS;
    let mut out = vec![T::zero(); cout * n];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let mut col = Vec::new();
    for (r0, r1) in row_chunks(geo.dims) {
        let nv = (r1 - r0) * w;
        col.resize(kdim * nv, T::zero());
        im2col(xp, cin, geo, r0, r1, &mut col);
        // out[:, chunk] += W (cout x kdim) * col (kdim x nv)
        T::gemm(
            (cout, kdim, nv),
            (weight, kdim as isize, 1),
            (&col, nv as isize, 1),
            (&mut out[r0 * w..], n as isize, 1),
        );
    }
    out
}

pub fn conv3_forward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> FeatureMap<T> {
    let cin = x.channels;
    assert_eq!(weight.len(), cout * cin * TAPS, "conv3 weight size");
    assert_eq!(bias.len(), cout, "conv3 bias size");
    let geo = Padded::new(x.dims);
    let xp = geo.pad(&x.data, cin);
    let data = conv3_padded(&xp, cin, &geo, weight, Some(bias), cout);
    FeatureMap::from_vec(cout, x.dims, data)
}

/// Backward pass of [`conv3_forward`]. Weight and bias gradients are
/// accumulated into `gweight`/`gbias`; the input gradient is returned.
pub fn conv3_backward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    gout: &FeatureMap<T>,
    gweight: &mut [T],
    gbias: &mut [T],
) -> FeatureMap<T> {
    conv3_backward_params(x, gout, gweight, gbias);
    conv3_backward_input(weight, gout, x.channels)
}

/// Weight and bias half of [`conv3_backward`].
pub fn conv3_backward_params<T: Scalar>(
    x: &FeatureMap<T>,
    gout: &FeatureMap<T>,
    gweight: &mut [T],
    gbias: &mut [T],
) {
    let cin = x.channels;
    let cout = gout.channels;
    assert_eq!(x.dims, gout.dims, "conv3 backward dims");
    let geo = Padded::new(x.dims);
    let n = x.voxels();

    for co in 0..cout {
        gbias[co] = gbias[co] + sum(&gout.data[co * n..(co + 1) * n]);
    }

    let xp = geo.pad(&x.data, cin);
    let w = x.dims[2];
    let kdim = cin * TAPS;
    let mut col = Vec::new();
    for (r0, r1) in row_chunks(x.dims) {
        let nv = (r1 - r0) * w;
        col.resize(kdim * nv, T::zero());
        im2col(&xp, cin, &geo, r0, r1, &mut col);
        // gW (cout x kdim) += G[:, chunk] (cout x nv) * col^T (nv x kdim)
        T::gemm(
            (cout, nv, kdim),
            (&gout.data[r0 * w..], n as isize, 1),
            (&col, 1, nv as isize),
            (gweight, kdim as isize, 1),
        );
    }
}

/// Input half of [`conv3_backward`]: a correlation of the padded output
/// gradient with the spatially flipped, channel-transposed kernel.
pub fn conv3_backward_input<T: Scalar>(
    weight: &[T],
    gout: &FeatureMap<T>,
    cin: usize,
) -> FeatureMap<T> {
    let cout = gout.channels;
    let geo = Padded::new(gout.dims);
    let mut flipped = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..TAPS {
                flipped[(ci * cout + co) * TAPS + (TAPS - 1 - k)] =
                    weight[(co * cin + ci) * TAPS + k];
            }
        }
    }
    let gp = geo.pad(&gout.data, cout);
    let data = conv3_padded(&gp, cout, &geo, &flipped, None, cin);
    FeatureMap::from_vec(cin, gout.dims, data)
}

// ---------------------------------------------------------------------------
// 2x2x2 max pooling, stride 2.
// ---------------------------------------------------------------------------

pub fn maxpool2_forward<T: Scalar>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<u8>) {
    let [d, h, w] = x.dims;
    assert!(
        d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
        "maxpool needs even dims"
    );
    let od = [d / 2, h / 2, w / 2];
    let on = voxel_count(od);
    let mut out = FeatureMap::zeros(x.channels, od);
    let mut arg = vec![0u8; x.channels * on];
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best = T::neg_infinity();
                    let mut best_t = 0u8;
                    for t in 0..8u8 {
                        let (a, b, e) =
                            ((t >> 2) as usize, ((t >> 1) & 1) as usize, (t & 1) as usize);
                        let v = src[((2 * z + a) * h + 2 * y + b) * w + 2 * xx + e];
                        if v > best {
                            best = v;
                            best_t = t;
                        }
                    }
                    let o = c * on + (z * od[1] + y) * od[2] + xx;
                    out.data[o] = best;
                    arg[o] = best_t;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(
    input_dims: Dims,
    gout: &FeatureMap<T>,
    arg: &[u8],
) -> FeatureMap<T> {
    let [_, h, w] = input_dims;
    let od = gout.dims;
    let on = gout.voxels();
    let mut gx = FeatureMap::zeros(gout.channels, input_dims);
    for c in 0..gout.channels {
        let dst = gx.channel_mut(c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let o = c * on + (z * od[1] + y) * od[2] + xx;
                    let t = arg[o];
                    let (a, b, e) = ((t >> 2) as usize, ((t >> 1) & 1) as usize, (t & 1) as usize);
                    dst[((2 * z + a) * h + 2 * y + b) * w + 2 * xx + e] = gout.data[o];
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// 2x2x2 transposed convolution ("up-convolution"), stride 2.
// Weight layout: [cin][cout][8], taps ordered (a, b, c) over (z, y, x).
// ---------------------------------------------------------------------------

fn tap_positions(in_dims: Dims, t: usize) -> impl Iterator<Item = usize> {
    let [d, h, w] = in_dims;
    let (a, b, c) = (t >> 2, (t >> 1) & 1, t & 1);
    let (oh, ow) = (2 * h, 2 * w);
    (0..d).flat_map(move |z| {
        (0..h)
            .flat_map(move |y| (0..w).map(move |x| ((2 * z + a) * oh + 2 * y + b) * ow + 2 * x + c))
    })
}

pub fn upconv2_forward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> FeatureMap<T> {
    let cin = x.channels;
    assert_eq!(weight.len(), cin * cout * 8, "upconv weight size");
    let [d, h, w] = x.dims;
    let od = [2 * d, 2 * h, 2 * w];
    let n = x.voxels();
    let mut out = FeatureMap::zeros(cout, od);
    let mut tmp = vec![T::zero(); n];
    for co in 0..cout {
        for t in 0..8 {
            tmp.fill(bias[co]);
            for ci in 0..cin {
                axpy(&mut tmp, weight[(ci * cout + co) * 8 + t], x.channel(ci));
            }
            let dst = out.channel_mut(co);
            for (v, p) in tmp.iter().zip(tap_positions(x.dims, t)) {
                dst[p] = *v;
            }
        }
    }
    out
}

pub fn upconv2_backward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    gout: &FeatureMap<T>,
    gweight: &mut [T],
    gbias: &mut [T],
) -> FeatureMap<T> {
    let cin = x.channels;
    let cout = gout.channels;
    let n = x.voxels();
    let mut gx = FeatureMap::zeros(cin, x.dims);
    let mut gathered = vec![T::zero(); n];
    for co in 0..cout {
        let src = gout.channel(co);
        gbias[co] = gbias[co] + sum(src);
        for t in 0..8 {
            for (g, p) in gathered.iter_mut().zip(tap_positions(x.dims, t)) {
                *g = src[p];
            }
            for ci in 0..cin {
                let wi = (ci * cout + co) * 8 + t;
                gweight[wi] = gweight[wi] + dot(x.channel(ci), &gathered);
                axpy(gx.channel_mut(ci), weight[wi], &gathered);
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// 1x1x1 convolution (output head). Weight layout: [cout][cin].
// ---------------------------------------------------------------------------

pub fn conv1_forward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> FeatureMap<T> {
    let cin = x.channels;
    assert_eq!(weight.len(), cout * cin, "conv1 weight size");
    let mut out = FeatureMap::zeros(cout, x.dims);
    for co in 0..cout {
        let dst = out.channel_mut(co);
        dst.fill(bias[co]);
        for ci in 0..cin {
            axpy(dst, weight[co * cin + ci], x.channel(ci));
        }
    }
    out
}

pub fn conv1_backward<T: Scalar>(
    x: &FeatureMap<T>,
    weight: &[T],
    gout: &FeatureMap<T>,
    gweight: &mut [T],
    gbias: &mut [T],
) -> FeatureMap<T> {
    let cin = x.channels;
    let cout = gout.channels;
    let mut gx = FeatureMap::zeros(cin, x.dims);
    for co in 0..cout {
        let g = gout.channel(co);
        gbias[co] = gbias[co] + sum(g);
        for ci in 0..cin {
            let wi = co * cin + ci;
            gweight[wi] = gweight[wi] + dot(g, x.channel(ci));
            axpy(gx.channel_mut(ci), weight[wi], g);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Pointwise.
// ---------------------------------------------------------------------------

pub fn relu_inplace<T: Scalar>(x: &mut FeatureMap<T>) {
    for v in x.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the rectified output was not positive.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut FeatureMap<T>, output: &FeatureMap<T>) {
    for (g, o) in grad.data.iter_mut().zip(&output.data) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub fn sigmoid_inplace<T: Scalar>(x: &mut FeatureMap<T>) {
    for v in x.data.iter_mut() {
        *v = sigmoid(*v);
    }
}
