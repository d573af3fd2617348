//! Orthonormal 2-D DCT-II / DCT-III and the frequency grid of the heat filter.
//!
//! Two interchangeable evaluation paths:
//! * `Matmul`: `Y = B_m · X · B_nᵀ` with dense orthonormal bases, `O(s³)` per
//!   `s×s` plane (i.e. `O(N^1.5)` in the token count `N = s²`).
//! * `Fft`: Makhoul's reordering onto a radix-2 complex FFT. Only available
//!   for power-of-two extents; other sizes silently use `Matmul`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Flops charged per radix-2 butterfly: one complex multiply (6) and two
/// complex adds (4).
pub const FFT_BUTTERFLY_FLOPS: u64 = 10;
/// Flops charged per element for the post-twiddle (real part of a complex
/// product plus the orthonormal scale).
pub const FFT_POST_FLOPS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformPath {
    Matmul,
    Fft,
}

/// Which angular frequency is attached to DCT index `u` of an `m`-point axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencyGrid {
    /// `ω_u = 2·sin(πu / 2m)`. `-ω_u²` is the exact eigenvalue of the
    /// 5-point Laplacian with mirror (Neumann) boundaries for the DCT-II
    /// basis vector `u`, so the spectral filter reproduces the lattice heat
    /// equation exactly in space.
    Lattice,
    /// `ω_u = πu / m`, the continuum wavenumber of the same cosine.
    Continuous,
}

impl FrequencyGrid {
    pub fn omega(self, u: usize, m: usize) -> f64 {
        match self {
            FrequencyGrid::Lattice => 2.0 * (PI * u as f64 / (2.0 * m as f64)).sin(),
            FrequencyGrid::Continuous => PI * u as f64 / m as f64,
        }
    }
}

/// Precomputed transform machinery for a fixed `(m, n)` plane.
#[derive(Debug, Clone)]
pub struct SpectralPlan {
    m: usize,
    n: usize,
    basis_row: Tensor,
    basis_col: Tensor,
    omega_x: Vec<f64>,
    omega_y: Vec<f64>,
    path: TransformPath,
    grid: FrequencyGrid,
}

/// Orthonormal DCT-II matrix: `B[u][x] = α_u cos(π(2x+1)u / 2N)`.
pub fn dct_basis(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for u in 0..n {
        let alpha = if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for x in 0..n {
            data[u * n + x] = alpha * (PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    Tensor::new(&[n, n], data).expect("square basis")
}

impl SpectralPlan {
    pub fn new(m: usize, n: usize, path: TransformPath) -> Result<Self> {
        Self::with_grid(m, n, path, FrequencyGrid::Lattice)
    }

    pub fn with_grid(m: usize, n: usize, path: TransformPath, grid: FrequencyGrid) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Contract(format!("empty spectral plan {m}x{n}")));
        }
        Ok(Self {
            m,
            n,
            basis_row: dct_basis(m),
            basis_col: dct_basis(n),
            omega_x: (0..m).map(|u| grid.omega(u, m)).collect(),
            omega_y: (0..n).map(|v| grid.omega(v, n)).collect(),
            path,
            grid,
        })
    }

    /// Shared, matmul-path plan with the lattice grid.
    pub fn shared(m: usize, n: usize) -> Result<Arc<Self>> {
        Ok(Arc::new(Self::new(m, n, TransformPath::Matmul)?))
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn basis_row(&self) -> &Tensor {
        &self.basis_row
    }

    pub fn basis_col(&self) -> &Tensor {
        &self.basis_col
    }

    pub fn omega_x(&self) -> &[f64] {
        &self.omega_x
    }

    pub fn omega_y(&self) -> &[f64] {
        &self.omega_y
    }

    pub fn grid(&self) -> FrequencyGrid {
        self.grid
    }

    pub fn requested_path(&self) -> TransformPath {
        self.path
    }

    /// The path actually used: `Fft` degrades to `Matmul` unless both
    /// extents are powers of two.
    pub fn path(&self) -> TransformPath {
        match self.path {
            TransformPath::Fft if self.m.is_power_of_two() && self.n.is_power_of_two() => {
                TransformPath::Fft
            }
            _ => TransformPath::Matmul,
        }
    }

    /// `ω_x[u]² + ω_y[v]²` as an `[m, n]` tensor.
    pub fn omega_sq(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.m * self.n);
        for wx in &self.omega_x {
            for wy in &self.omega_y {
                data.push(wx * wx + wy * wy);
            }
        }
        Tensor::new(&[self.m, self.n], data).expect("grid shape")
    }

    /// Validates `[C, m, n]` (or `[m, n]`) and returns `C`.
    pub fn check_shape(&self, shape: &[usize]) -> Result<usize> {
        match shape {
            [c, m, n] if *m == self.m && *n == self.n => Ok(*c),
            [m, n] if *m == self.m && *n == self.n => Ok(1),
            _ => Err(Error::shape(
                "spectral",
                format!("shape {shape:?} does not match plan {}x{}", self.m, self.n),
            )),
        }
    }

    pub fn dct2(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check_shape(x.shape())?;
        Tensor::with_dtype(x.shape(), self.forward_raw(x.data(), c), x.dtype())
    }

    pub fn idct2(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check_shape(x.shape())?;
        Tensor::with_dtype(x.shape(), self.inverse_raw(x.data(), c), x.dtype())
    }

    /// Forward transform of `channels` consecutive `m×n` planes.
    pub(crate) fn forward_raw(&self, data: &[f64], channels: usize) -> Vec<f64> {
        self.transform(data, channels, Direction::Forward)
    }

    pub(crate) fn inverse_raw(&self, data: &[f64], channels: usize) -> Vec<f64> {
        self.transform(data, channels, Direction::Inverse)
    }

    fn transform(&self, data: &[f64], channels: usize, dir: Direction) -> Vec<f64> {
        let (m, n) = (self.m, self.n);
        let plane = m * n;
        let mut out = vec![0.0; channels * plane];
        match self.path() {
            TransformPath::Matmul => {
                let (bm, bn) = (self.basis_row.data(), self.basis_col.data());
                let mut tmp = vec![0.0; plane];
                for c in 0..channels {
                    let src = &data[c * plane..(c + 1) * plane];
                    let dst = &mut out[c * plane..(c + 1) * plane];
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    match dir {
                        Direction::Forward => {
                            // Y = Bm · (X · Bnᵀ)
                            matmul_nt_into(src, bn, &mut tmp, m, n, n);
                            matmul_into(bm, &tmp, dst, m, m, n);
                        }
                        Direction::Inverse => {
                            // X = Bmᵀ · (Y · Bn)
                            matmul_into(src, bn, &mut tmp, m, n, n);
                            matmul_tn_into(bm, &tmp, dst, m, m, n);
                        }
                    }
                }
            }
            TransformPath::Fft => {
                let mut counter = 0u64;
                for c in 0..channels {
                    let src = &data[c * plane..(c + 1) * plane];
                    let dst = &mut out[c * plane..(c + 1) * plane];
                    fft_plane(src, dst, m, n, dir, &mut counter);
                }
            }
        }
        out
    }

    /// Number of butterflies the FFT path executes for `channels` planes,
    /// measured by running an instrumented transform on zeros.
    pub fn count_fft_butterflies(&self, channels: usize) -> u64 {
        let (m, n) = (self.m, self.n);
        let src = vec![0.0; m * n];
        let mut dst = vec![0.0; m * n];
        let mut counter = 0;
        for _ in 0..channels {
            fft_plane(&src, &mut dst, m, n, Direction::Forward, &mut counter);
        }
        counter
    }
}

/// Flop count of one forward (or inverse) 2-D transform over `channels`
/// planes, counting a fused multiply-add as two flops.
pub fn flops_dct2(plan: &SpectralPlan, channels: usize) -> u64 {
    let (m, n, c) = (plan.rows() as u64, plan.cols() as u64, channels as u64);
    match plan.path() {
        TransformPath::Matmul => c * (m * n * m + m * n * n) * 2,
        TransformPath::Fft => c * (m * fft_1d_flops(n) + n * fft_1d_flops(m)),
    }
}

fn fft_1d_flops(len: u64) -> u64 {
    let log = len.trailing_zeros() as u64;
    FFT_BUTTERFLY_FLOPS * (len / 2) * log + FFT_POST_FLOPS * len
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, Default)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    fn mul(self, o: Complex) -> Complex {
        Complex {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }

    fn cis(theta: f64) -> Complex {
        Complex {
            re: theta.cos(),
            im: theta.sin(),
        }
    }
}

/// In-place iterative radix-2 FFT (`sign = -1` forward, `+1` inverse,
/// unnormalised).
fn fft_in_place(buf: &mut [Complex], sign: f64, counter: &mut u64) {
    let n = buf.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = Complex::cis(sign * 2.0 * PI / len as f64);
        for start in (0..n).step_by(len) {
            let mut w = Complex { re: 1.0, im: 0.0 };
            for k in 0..len / 2 {
                let a = buf[start + k];
                let b = buf[start + k + len / 2].mul(w);
                buf[start + k] = Complex {
                    re: a.re + b.re,
                    im: a.im + b.im,
                };
                buf[start + k + len / 2] = Complex {
                    re: a.re - b.re,
                    im: a.im - b.im,
                };
                w = w.mul(step);
                *counter += 1;
            }
        }
        len <<= 1;
    }
}

fn alpha(k: usize, n: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// Orthonormal DCT-II of `x` via one `n`-point FFT.
fn dct_1d(x: &[f64], out: &mut [f64], buf: &mut [Complex], counter: &mut u64) {
    let n = x.len();
    if n == 1 {
        out[0] = x[0];
        return;
    }
    for k in 0..n / 2 {
        buf[k] = Complex {
            re: x[2 * k],
            im: 0.0,
        };
        buf[n - 1 - k] = Complex {
            re: x[2 * k + 1],
            im: 0.0,
        };
    }
    fft_in_place(buf, -1.0, counter);
    for k in 0..n {
        let tw = Complex::cis(-PI * k as f64 / (2 * n) as f64);
        out[k] = alpha(k, n) * buf[k].mul(tw).re;
    }
}

/// Orthonormal DCT-III (inverse of [`dct_1d`]).
fn idct_1d(y: &[f64], out: &mut [f64], buf: &mut [Complex], counter: &mut u64) {
    let n = y.len();
    if n == 1 {
        out[0] = y[0];
        return;
    }
    let c = |k: usize| if k == n { 0.0 } else { y[k] / alpha(k, n) };
    for k in 0..n {
        let w = Complex {
            re: c(k),
            im: -c(n - k),
        };
        buf[k] = Complex::cis(PI * k as f64 / (2 * n) as f64).mul(w);
    }
    fft_in_place(buf, 1.0, counter);
    let inv = 1.0 / n as f64;
    for k in 0..n / 2 {
        out[2 * k] = buf[k].re * inv;
        out[2 * k + 1] = buf[n - 1 - k].re * inv;
    }
}

fn fft_plane(src: &[f64], dst: &mut [f64], m: usize, n: usize, dir: Direction, counter: &mut u64) {
    let one_d = match dir {
        Direction::Forward => dct_1d,
        Direction::Inverse => idct_1d,
    };
    let mut buf = vec![Complex::default(); m.max(n)];
    let mut line = vec![0.0; m.max(n)];
    let mut tmp = vec![0.0; m * n];
    // Rows (length n).
    for r in 0..m {
        one_d(
            &src[r * n..(r + 1) * n],
            &mut tmp[r * n..(r + 1) * n],
            &mut buf[..n],
            counter,
        );
    }
    // Columns (length m).
    let mut col = vec![0.0; m];
    for cidx in 0..n {
        for r in 0..m {
            col[r] = tmp[r * n + cidx];
        }
        one_d(&col, &mut line[..m], &mut buf[..m], counter);
        for r in 0..m {
            dst[r * n + cidx] = line[r];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256pp;

    #[test]
    fn basis_is_orthonormal() {
        for n in [1, 2, 5, 8, 33] {
            let b = dct_basis(n);
            let d = b.data();
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = (0..n).map(|k| d[k * n + i] * d[k * n + j]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12, "n={n} ({i},{j}) {dot}");
                }
            }
        }
    }

    #[test]
    fn omega_grid_properties() {
        for grid in [FrequencyGrid::Lattice, FrequencyGrid::Continuous] {
            let p = SpectralPlan::with_grid(7, 9, TransformPath::Matmul, grid).unwrap();
            for w in [p.omega_x(), p.omega_y()] {
                assert_eq!(w[0], 0.0);
                assert!(w.windows(2).all(|p| p[1] > p[0]));
            }
        }
    }

    #[test]
    fn constant_image_has_only_dc() {
        let (m, n) = (6, 10);
        let p = SpectralPlan::new(m, n, TransformPath::Matmul).unwrap();
        let y = p.dct2(&Tensor::ones(&[1, m, n])).unwrap();
        assert!((y.data()[0] - ((m * n) as f64).sqrt()).abs() < 1e-12);
        assert!(y.data()[1..].iter().all(|v| v.abs() < 1e-12));

        let mut delta = Tensor::zeros(&[1, m, n]);
        delta.data_mut()[0] = ((m * n) as f64).sqrt();
        let back = p.idct2(&delta).unwrap();
        assert!(back.max_abs_diff(&Tensor::ones(&[1, m, n])) < 1e-12);
        assert_eq!(
            p.idct2(&Tensor::zeros(&[2, m, n])).unwrap(),
            Tensor::zeros(&[2, m, n])
        );
    }

    #[test]
    fn fft_path_matches_matmul_path() {
        let mut rng = Xoshiro256pp::seed_from(99);
        let x = Tensor::uniform(&[2, 64, 64], -1.0, 1.0, &mut rng);
        let mm = SpectralPlan::new(64, 64, TransformPath::Matmul).unwrap();
        let ff = SpectralPlan::new(64, 64, TransformPath::Fft).unwrap();
        assert_eq!(ff.path(), TransformPath::Fft);
        let a = mm.dct2(&x).unwrap();
        let b = ff.dct2(&x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
        let ai = mm.idct2(&a).unwrap();
        let bi = ff.idct2(&a).unwrap();
        assert!(ai.max_abs_diff(&bi) < 1e-9);
        assert!(bi.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn fft_path_non_square_and_fallback() {
        let mut rng = Xoshiro256pp::seed_from(1);
        let x = Tensor::uniform(&[1, 8, 32], -1.0, 1.0, &mut rng);
        let mm = SpectralPlan::new(8, 32, TransformPath::Matmul).unwrap();
        let ff = SpectralPlan::new(8, 32, TransformPath::Fft).unwrap();
        assert!(mm.dct2(&x).unwrap().max_abs_diff(&ff.dct2(&x).unwrap()) < 1e-10);
        let odd = SpectralPlan::new(33, 32, TransformPath::Fft).unwrap();
        assert_eq!(odd.path(), TransformPath::Matmul);
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let p = SpectralPlan::new(4, 4, TransformPath::Matmul).unwrap();
        assert!(p.dct2(&Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn matmul_flops_are_cubic() {
        let p16 = SpectralPlan::new(16, 16, TransformPath::Matmul).unwrap();
        assert_eq!(flops_dct2(&p16, 1), 16384);
        let p32 = SpectralPlan::new(32, 32, TransformPath::Matmul).unwrap();
        assert_eq!(flops_dct2(&p32, 3), 8 * flops_dct2(&p16, 3));
        assert_eq!(flops_dct2(&p16, 5), 4 * 5 * 16u64.pow(3));
    }

    #[test]
    fn fft_butterfly_count_matches_model() {
        for (m, n, c) in [(8, 8, 1), (16, 32, 3), (64, 64, 2)] {
            let p = SpectralPlan::new(m, n, TransformPath::Fft).unwrap();
            let counted = p.count_fft_butterflies(c);
            let (mu, nu) = (m as u64, n as u64);
            let model = c as u64
                * (mu * (nu / 2) * nu.trailing_zeros() as u64
                    + nu * (mu / 2) * mu.trailing_zeros() as u64);
            assert_eq!(counted, model);
            // Butterfly flops are exactly 5·C·mn·log2(mn); the remainder is
            // the linear post-twiddle term.
            let log = (mu * nu).trailing_zeros() as u64;
            assert_eq!(FFT_BUTTERFLY_FLOPS * counted, 5 * c as u64 * mu * nu * log);
            assert_eq!(
                flops_dct2(&p, c),
                FFT_BUTTERFLY_FLOPS * counted + c as u64 * FFT_POST_FLOPS * 2 * mu * nu
            );
        }
    }
}
