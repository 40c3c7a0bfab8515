//! Iterative radix-2 fast Fourier transform over power-of-two lengths,
//! plus the circular convolution and correlation built on it.

use crate::error::{Error, Result};
use num_complex::Complex64;

/// Smallest power of two that is >= n (n >= 1).
pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

fn check_pow2(op: &'static str, n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::contract(
            op,
            format!("length must be a nonzero power of two, got {n}"),
        ));
    }
    Ok(())
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
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
    // Butterfly passes.
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[i + k];
                let v = buf[i + k + len / 2] * w;
                buf[i + k] = u + v;
                buf[i + k + len / 2] = u - v;
                w *= wlen;
            }
            i += len;
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for x in buf.iter_mut() {
            *x *= scale;
        }
    }
}

/// Forward transform in place. Length must be a power of two.
pub fn fft(buf: &mut [Complex64]) -> Result<()> {
    check_pow2("fft", buf.len())?;
    fft_in_place(buf, false);
    Ok(())
}

/// Inverse transform in place (includes the 1/n scale).
pub fn ifft(buf: &mut [Complex64]) -> Result<()> {
    check_pow2("ifft", buf.len())?;
    fft_in_place(buf, true);
    Ok(())
}

fn to_complex(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Circular convolution: out[k] = sum_i a[i] * b[(k - i) mod n].
/// Returns the real part; the imaginary residue of the transform pair is
/// discarded (it stays far below 1e-9 for finite inputs at these sizes).
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "circular_convolve",
            format!("length mismatch: {} vs {}", a.len(), b.len()),
        ));
    }
    check_pow2("circular_convolve", a.len())?;
    let mut fa = to_complex(a);
    let mut fb = to_complex(b);
    fft_in_place(&mut fa, false);
    fft_in_place(&mut fb, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= *y;
    }
    fft_in_place(&mut fa, true);
    Ok(fa.iter().map(|c| c.re).collect())
}

/// Circular correlation: out[i] = sum_k a[k] * b[(k - i) mod n].
/// This is the adjoint of circular convolution in either argument.
pub fn circular_correlate(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "circular_correlate",
            format!("length mismatch: {} vs {}", a.len(), b.len()),
        ));
    }
    check_pow2("circular_correlate", a.len())?;
    let mut fa = to_complex(a);
    let mut fb = to_complex(b);
    fft_in_place(&mut fa, false);
    fft_in_place(&mut fb, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y.conj();
    }
    fft_in_place(&mut fa, true);
    Ok(fa.iter().map(|c| c.re).collect())
}
