//! Scalar-generic numeric kernels for the hand-rolled transformer.
//!
//! Weights are `[out][in]` row-major so the forward pass is a contiguous
//! dot product per output row. Training runs in `f32`; gradient checks run
//! the identical code in `f64`.

use num_traits::Float;

/// Element type the model is generic over.
pub trait Real: Float + std::fmt::Debug + std::fmt::Display + Default + Copy + Send + Sync + 'static {
    /// Byte width in checkpoint files.
    const BYTES: usize;
    /// Dtype tag stored in checkpoint headers.
    const DTYPE_TAG: u8;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;
    const DTYPE_TAG: u8 = 4;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    const DTYPE_TAG: u8 = 8;

    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dot product with eight independent accumulators (keeps the FP pipeline
/// busy; fixed summation order for determinism).
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for j in 0..8 {
            acc[j] = acc[j] + a[i + j] * b[i + j];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let half = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (half[0] + half[2]) + (half[1] + half[3]) + tail
}

/// y += alpha * x
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// out[o] = dot(w[o], x) for row-major w of shape [out][in].
pub fn linear<T: Real>(w: &[T], x: &[T], out: &mut [T]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), out.len() * n_in);
    for (o, y) in out.iter_mut().enumerate() {
        *y = dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

/// out[o] = dot(w[o], x) + b[o]
pub fn linear_bias<T: Real>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    linear(w, x, out);
    for (y, &bi) in out.iter_mut().zip(b) {
        *y = *y + bi;
    }
}

/// Backward of `linear`: dx += wᵀ dy and gw[o] += dy[o] · x.
pub fn linear_backward<T: Real>(w: &[T], x: &[T], dy: &[T], dx: &mut [T], gw: &mut [T]) {
    let n_in = x.len();
    for (o, &dyo) in dy.iter().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        axpy(dyo, row, dx);
        axpy(dyo, x, &mut gw[o * n_in..(o + 1) * n_in]);
    }
}

/// In-place stable softmax.
pub fn softmax_in_place<T: Real>(xs: &mut [T]) {
    let max = xs.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in xs.iter_mut() {
        *x = *x * inv;
    }
}

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

/// d gelu / dx at x.
pub fn gelu_prime<T: Real>(x: T) -> T {
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Normalization cache for one span of positions: x̂ (pre-gain) and 1/σ.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub const LN_EPS: f64 = 1e-5;

/// LayerNorm over the last dim: y = g ⊙ (x − μ)/σ + b. Writes y to `out`
/// and appends x̂ and 1/σ to the cache.
pub fn layernorm<T: Real>(x: &[T], gain: &[T], bias: &[T], out: &mut [T], cache: &mut NormCache<T>) {
    let d = gain.len();
    debug_assert_eq!(x.len(), d);
    let inv_d = T::one() / T::of(d as f64);
    let mut mean = T::zero();
    for &v in x {
        mean = mean + v;
    }
    mean = mean * inv_d;
    let mut var = T::zero();
    for &v in x {
        let c = v - mean;
        var = var + c * c;
    }
    var = var * inv_d;
    let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
    for i in 0..d {
        let xh = (x[i] - mean) * rstd;
        cache.xhat.push(xh);
        out[i] = gain[i] * xh + bias[i];
    }
    cache.rstd.push(rstd);
}

/// Backward of [`layernorm`] for one position.
///
/// `xhat`/`rstd` are the cached values for this position; accumulates into
/// `dgain`, `dbias`, and `dx`.
pub fn layernorm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: T,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let d = gain.len();
    let inv_d = T::one() / T::of(d as f64);
    let mut sum_dxhat = T::zero();
    let mut sum_dxhat_xhat = T::zero();
    for i in 0..d {
        let dxh = dy[i] * gain[i];
        sum_dxhat = sum_dxhat + dxh;
        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[i];
        dgain[i] = dgain[i] + dy[i] * xhat[i];
        dbias[i] = dbias[i] + dy[i];
    }
    let mean_dxhat = sum_dxhat * inv_d;
    let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
    for i in 0..d {
        let dxh = dy[i] * gain[i];
        dx[i] = dx[i] + rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

/// Per-position rotary angle tables: `cos[p][i]`, `sin[p][i]` for pair `i`
/// of a head of width `head_dim` (`head_dim / 2` pairs per position).
#[derive(Debug, Clone)]
pub struct RotaryTables<T> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
    pub half: usize,
}

impl<T: Real> RotaryTables<T> {
    pub fn new(max_len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for p in 0..max_len {
            for i in 0..half {
                let freq = base.powf(-((2 * i) as f64) / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        RotaryTables { cos, sin, half }
    }

    /// Rotate pairs (2i, 2i+1) of one head vector in place, position `p`.
    pub fn apply(&self, p: usize, v: &mut [T]) {
        let row = p * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[row + i], self.sin[row + i]);
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c - b * s;
            v[2 * i + 1] = a * s + b * c;
        }
    }

    /// Inverse rotation (the transpose), used on gradients.
    pub fn apply_inverse(&self, p: usize, v: &mut [T]) {
        let row = p * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[row + i], self.sin[row + i]);
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c + b * s;
            v[2 * i + 1] = -(a * s) + b * c;
        }
    }
}

/// Sinusoidal position table: `pe[p][2i] = sin(p·ω_i)`, `pe[p][2i+1] =
/// cos(p·ω_i)` with `ω_i = base^(−2i/dim)`.
pub fn sinusoidal_table<T: Real>(max_len: usize, dim: usize, base: f64) -> Vec<T> {
    let mut table = vec![T::zero(); max_len * dim];
    for p in 0..max_len {
        for i in 0..dim / 2 {
            let omega = base.powf(-((2 * i) as f64) / dim as f64);
            let angle = p as f64 * omega;
            table[p * dim + 2 * i] = T::of(angle.sin());
            if 2 * i + 1 < dim {
                table[p * dim + 2 * i + 1] = T::of(angle.cos());
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64) * 0.25 - 3.0).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn linear_and_backward_match_naive() {
        // w: 3x2, x: 2
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = vec![0.5, -1.0];
        let mut y = vec![0.0; 3];
        linear(&w, &x, &mut y);
        assert_eq!(y, vec![1.0 * 0.5 - 2.0, 3.0 * 0.5 - 4.0, 5.0 * 0.5 - 6.0]);
        let dy = vec![1.0, -1.0, 2.0];
        let mut dx = vec![0.0; 2];
        let mut gw = vec![0.0; 6];
        linear_backward(&w, &x, &dy, &mut dx, &mut gw);
        // dx = wᵀ dy
        assert_eq!(dx, vec![1.0 - 3.0 + 10.0, 2.0 - 4.0 + 12.0]);
        // gw[o] = dy[o] * x
        assert_eq!(gw, vec![0.5, -1.0, -0.5, 1.0, 1.0, -2.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_orders() {
        let mut xs = vec![1.0f64, 3.0, 2.0];
        softmax_in_place(&mut xs);
        let sum: f64 = xs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(xs[1] > xs[2] && xs[2] > xs[0]);
    }

    #[test]
    fn softmax_ignores_neg_infinity() {
        let mut xs = vec![0.0f64, f64::NEG_INFINITY, 0.0];
        softmax_in_place(&mut xs);
        assert_eq!(xs[1], 0.0);
        assert!((xs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gelu_prime_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - num).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layernorm_normalizes_and_backward_matches_fd() {
        let x = vec![0.3f64, -1.2, 2.0, 0.7];
        let gain = vec![1.1, 0.9, 1.0, 1.3];
        let bias = vec![0.1, -0.2, 0.0, 0.4];
        let mut out = vec![0.0; 4];
        let mut cache = NormCache { xhat: Vec::new(), rstd: Vec::new() };
        layernorm(&x, &gain, &bias, &mut out, &mut cache);
        let mean: f64 = cache.xhat.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);

        // scalar objective: sum of out .* r
        let r = vec![0.7, -0.3, 0.5, 1.1];
        let f = |x: &[f64]| -> f64 {
            let mut out = vec![0.0; 4];
            let mut cache = NormCache { xhat: Vec::new(), rstd: Vec::new() };
            layernorm(x, &gain, &bias, &mut out, &mut cache);
            out.iter().zip(&r).map(|(o, ri)| o * ri).sum()
        };
        let mut dgain = vec![0.0; 4];
        let mut dbias = vec![0.0; 4];
        let mut dx = vec![0.0; 4];
        layernorm_backward(&r, &cache.xhat, cache.rstd[0], &gain, &mut dgain, &mut dbias, &mut dx);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((dx[i] - num).abs() < 1e-6, "i={i} analytic={} numeric={num}", dx[i]);
        }
    }

    #[test]
    fn rotary_is_norm_preserving_and_invertible() {
        let tables = RotaryTables::<f64>::new(16, 8, 10000.0);
        let v0 = vec![0.3, -1.0, 0.5, 2.0, -0.7, 0.2, 1.5, -0.4];
        for p in [0usize, 1, 7, 15] {
            let mut v = v0.clone();
            tables.apply(p, &mut v);
            let n0: f64 = v0.iter().map(|x| x * x).sum();
            let n1: f64 = v.iter().map(|x| x * x).sum();
            assert!((n0 - n1).abs() < 1e-12);
            tables.apply_inverse(p, &mut v);
            for (a, b) in v.iter().zip(&v0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // position 0 is the identity
        let mut v = v0.clone();
        tables.apply(0, &mut v);
        assert_eq!(v, v0);
    }

    #[test]
    fn rotary_preserves_relative_angle() {
        // q·k after rotation depends only on the position difference
        let tables = RotaryTables::<f64>::new(32, 2, 10000.0);
        let q0 = vec![1.0, 0.5];
        let k0 = vec![-0.3, 0.8];
        let pairs = [(3usize, 1usize), (10, 8), (20, 18)];
        let mut dots = Vec::new();
        for (pq, pk) in pairs {
            let mut q = q0.clone();
            let mut k = k0.clone();
            tables.apply(pq, &mut q);
            tables.apply(pk, &mut k);
            dots.push(dot(&q, &k));
        }
        assert!((dots[0] - dots[1]).abs() < 1e-12);
        assert!((dots[1] - dots[2]).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_rows_are_bounded_and_distinct() {
        let table = sinusoidal_table::<f64>(8, 6, 10000.0);
        assert!(table.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(table[0..6], table[6..12]);
    }
}
