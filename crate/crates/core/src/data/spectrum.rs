//! Discrete Fourier measurements of images, used to audit the generator.
//! Radial frequencies are fractions of Nyquist, so the corner of the
//! spectrum sits at √2.

use std::f64::consts::PI;

use crate::tensor::Tensor;

/// Radial bands `[lo, hi)`: low, mid-low, mid-high, high.
pub const BANDS: [(f64, f64); 4] = [(0.0, 0.15), (0.15, 0.35), (0.35, 0.65), (0.65, f64::INFINITY)];

fn dft_1d(input: &[(f64, f64)], out: &mut [(f64, f64)], twiddle: &[(f64, f64)]) {
    let n = input.len();
    for (k, o) in out.iter_mut().enumerate() {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, &(a, b)) in input.iter().enumerate() {
            let (c, s) = twiddle[(k * j) % n];
            re += a * c - b * s;
            im += a * s + b * c;
        }
        *o = (re, im);
    }
}

/// Power `|F(ky, kx)|²` of each channel with its mean removed, averaged
/// over channels, row-major `[H, W]`. Expects a square `[C, N, N]` image.
pub fn power_spectrum(img: &Tensor<f32>) -> Vec<f64> {
    let s = img.shape();
    let (channels, n) = (s[0], s[1]);
    assert_eq!(s[1], s[2], "power_spectrum expects square images");
    let twiddle: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let a = -2.0 * PI * k as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let mut power = vec![0.0; n * n];
    let mut rows = vec![(0.0, 0.0); n * n];
    let mut buf = vec![(0.0, 0.0); n];
    let mut col = vec![(0.0, 0.0); n];
    for c in 0..channels {
        let plane = &img.data()[c * n * n..(c + 1) * n * n];
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / (n * n) as f64;
        for y in 0..n {
            let line: Vec<(f64, f64)> = plane[y * n..(y + 1) * n].iter().map(|&v| (v as f64 - mean, 0.0)).collect();
            dft_1d(&line, &mut buf, &twiddle);
            rows[y * n..(y + 1) * n].copy_from_slice(&buf);
        }
        for x in 0..n {
            let column: Vec<(f64, f64)> = (0..n).map(|y| rows[y * n + x]).collect();
            dft_1d(&column, &mut col, &twiddle);
            for (y, &(re, im)) in col.iter().enumerate() {
                power[y * n + x] += (re * re + im * im) / channels as f64;
            }
        }
    }
    power
}

/// Radial frequency of DFT bin `(ky, kx)` as a fraction of Nyquist.
pub fn radial_frequency(ky: usize, kx: usize, n: usize) -> f64 {
    let fold = |k: usize| if k > n / 2 { n - k } else { k } as f64;
    (fold(ky).powi(2) + fold(kx).powi(2)).sqrt() / (n as f64 / 2.0)
}

/// Total power in each of [`BANDS`].
pub fn band_energies(img: &Tensor<f32>) -> [f64; 4] {
    let n = img.shape()[1];
    let p = power_spectrum(img);
    let mut out = [0.0; 4];
    for ky in 0..n {
        for kx in 0..n {
            let r = radial_frequency(ky, kx, n);
            let b = BANDS.iter().position(|&(lo, hi)| r >= lo && r < hi).unwrap();
            out[b] += p[ky * n + kx];
        }
    }
    out
}

/// Power above 0.65 Nyquist.
pub fn high_band_energy(img: &Tensor<f32>) -> f64 {
    band_energies(img)[3]
}

/// Power-weighted mean radial frequency.
pub fn spectral_centroid(img: &Tensor<f32>) -> f64 {
    let n = img.shape()[1];
    let p = power_spectrum(img);
    let mut num = 0.0;
    let mut den = 0.0;
    for ky in 0..n {
        for kx in 0..n {
            num += radial_frequency(ky, kx, n) * p[ky * n + kx];
            den += p[ky * n + kx];
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let n = 16;
        let img = Tensor::from_fn([1, n, n], |i| {
            let x = (i % n) as f64;
            (2.0 * PI * 3.0 * x / n as f64).cos() as f32
        });
        let p = power_spectrum(&img);
        let total: f64 = p.iter().sum();
        let tone = p[3] + p[n - 3];
        assert!(tone / total > 0.999);
        assert!((radial_frequency(0, 3, n) - 3.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_is_high_band() {
        let n = 8;
        let img = Tensor::from_fn([1, n, n], |i| if (i % n + i / n) % 2 == 0 { 1.0 } else { 0.0 });
        let e = band_energies(&img);
        assert!(e[3] > 0.0);
        assert!(e[..3].iter().all(|&v| v < 1e-9));
    }

    #[test]
    fn parseval_holds() {
        let n = 8;
        let img = Tensor::from_fn([2, n, n], |i| ((i * 37) % 11) as f32 / 11.0);
        let p = power_spectrum(&img);
        let mut energy = 0.0;
        for c in 0..2 {
            let plane = &img.data()[c * n * n..(c + 1) * n * n];
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / (n * n) as f64;
            energy += plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 2.0;
        }
        let total: f64 = p.iter().sum::<f64>() / (n * n) as f64;
        assert!((total - energy).abs() < 1e-9 * energy.max(1.0));
    }
}
