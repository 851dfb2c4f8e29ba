use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetSpec, Label, ManipulationFamily, Quality, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoids summed per real field.
const N_COMPONENTS: usize = 6;
/// Pixel noise added to every generated field.
const NOISE_STD: f64 = 0.02;
/// Quantization levels of the low-quality tier.
pub const QUANT_LEVELS: u32 = 32;
const BLUR_SIGMA: f64 = 1.0;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// Seed of real image `index` in `domain` under `base_seed`.
pub fn sample_seed(base_seed: u64, domain_id: u32, index: u64) -> u64 {
    mix(mix(base_seed, domain_id as u64), index)
}

/// Radial band, as a fraction of Nyquist, of the real fields of a domain.
fn domain_band(domain_id: u32) -> (f64, f64) {
    let shift = 0.06 * domain_id as f64;
    (0.06 + shift, 0.15 + shift)
}

/// Integer frequency vectors (cycles per image) whose radius, as a
/// fraction of Nyquist, lies in `[lo, hi)`. Integer frequencies keep the
/// fields periodic, so their spectra have no leakage.
fn band_frequencies(size: usize, lo: f64, hi: f64) -> Vec<(i64, i64)> {
    let nyq = size as f64 / 2.0;
    let kmax = (hi * nyq).ceil() as i64;
    let mut out = Vec::new();
    for kx in 0..=kmax {
        for ky in -kmax..=kmax {
            if kx == 0 && ky <= 0 {
                continue;
            }
            let r = ((kx * kx + ky * ky) as f64).sqrt() / nyq;
            if r >= lo && r < hi {
                out.push((kx, ky));
            }
        }
    }
    if out.is_empty() {
        out.push((1, 0));
        out.push((0, 1));
    }
    out
}

/// Sum of random sinusoids from `band`, shared across channels with
/// per-channel weights, affinely mapped to `[center − contrast/2,
/// center + contrast/2]`, plus pixel noise.
fn smooth_field(rng: &mut ChaCha8Rng, size: usize, channels: usize, band: (f64, f64), contrast: f64, center: f64) -> Vec<f64> {
    let freqs = band_frequencies(size, band.0, band.1);
    let comps: Vec<((i64, i64), f64, f64, Vec<f64>)> = (0..N_COMPONENTS)
        .map(|_| {
            let f = freqs[rng.gen_range(0..freqs.len())];
            let amp = rng.gen_range(0.3..1.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let weights = (0..channels).map(|_| rng.gen_range(0.7..1.0)).collect();
            (f, amp, phase, weights)
        })
        .collect();
    let n = size as f64;
    let mut field = vec![0.0; channels * size * size];
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let v: f64 = comps
                    .iter()
                    .map(|&((kx, ky), amp, phase, ref w)| {
                        w[c] * amp * (2.0 * PI * (kx as f64 * x as f64 + ky as f64 * y as f64) / n + phase).sin()
                    })
                    .sum();
                field[(c * size + y) * size + x] = v;
            }
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    for v in &mut field {
        *v = center + contrast * ((*v - lo) / span - 0.5) + noise.sample(rng);
    }
    field
}

fn to_image(values: Vec<f64>, channels: usize, size: usize) -> Tensor<f32> {
    let data = values.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::new([channels, size, size], data).expect("sized by construction")
}

/// Real image `index` of `spec`'s domain (always high quality; use
/// [`degrade_quality`] for the low tier).
pub fn generate_real(spec: &DatasetSpec, index: u64) -> Sample {
    let seed = sample_seed(spec.base_seed, spec.domain_id, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.domain_id as f64;
    let contrast = (0.8 - 0.08 * d).max(0.4);
    let center = (0.5 + 0.03 * d).min(0.6);
    let field = smooth_field(
        &mut rng,
        spec.image_size,
        spec.channels,
        domain_band(spec.domain_id),
        contrast,
        center,
    );
    Sample {
        image: to_image(field, spec.channels, spec.image_size),
        label: Label::Real,
        family: None,
        quality: Quality::Hq,
        domain_id: spec.domain_id,
        seed,
    }
}

fn geometry(img: &Tensor<f32>) -> (usize, usize) {
    let s = img.shape();
    (s[0], s[1])
}

fn bilinear(plane: &[f64], size: usize, x: f64, y: f64) -> f64 {
    let max = (size - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| plane[yy * size + xx];
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
}

/// Forges a real sample with one manipulation family.
pub fn apply_manipulation(sample: &Sample, family: ManipulationFamily) -> Result<Sample> {
    if !sample.is_real() {
        return Err(Error::Contract("manipulations apply only to real samples".into()));
    }
    let (channels, size) = geometry(&sample.image);
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(sample.seed, 0xF0F0 + family.ordinal() as u64));
    let src: Vec<f64> = sample.image.data().iter().map(|&v| v as f64).collect();
    let plane = size * size;
    let mut out = src.clone();

    match family {
        ManipulationFamily::Blend => {
            let donor = smooth_field(&mut rng, size, channels, (0.25, 0.45), 0.7, 0.5);
            let cx = rng.gen_range(0.3 * s..0.7 * s);
            let cy = rng.gen_range(0.3 * s..0.7 * s);
            let rx = rng.gen_range(0.2 * s..0.35 * s);
            let ry = rng.gen_range(0.2 * s..0.35 * s);
            let edge = 1.0;
            for y in 0..size {
                for x in 0..size {
                    let rho = (((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2)).sqrt();
                    let m = 1.0 / (1.0 + (-(1.0 - rho) * rx.min(ry) / edge).exp());
                    for c in 0..channels {
                        let i = c * plane + y * size + x;
                        out[i] = m * donor[i] + (1.0 - m) * src[i];
                    }
                }
            }
        }
        ManipulationFamily::Warp => {
            let cx = rng.gen_range(0.3 * s..0.7 * s);
            let cy = rng.gen_range(0.3 * s..0.7 * s);
            let radius = rng.gen_range(0.25 * s..0.4 * s);
            let amp = rng.gen_range(2.5..4.0);
            let wavelength = rng.gen_range(3.5..5.0);
            let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
            for y in 0..size {
                for x in 0..size {
                    let rho = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() / radius;
                    if rho >= 1.0 {
                        continue;
                    }
                    let w = 0.5 * (1.0 + (PI * rho).cos());
                    let dx = amp * w * (2.0 * PI * y as f64 / wavelength + p1).sin();
                    let dy = amp * w * (2.0 * PI * x as f64 / wavelength + p2).sin();
                    for c in 0..channels {
                        out[c * plane + y * size + x] =
                            bilinear(&src[c * plane..(c + 1) * plane], size, x as f64 + dx, y as f64 + dy);
                    }
                }
            }
        }
        ManipulationFamily::Checker => {
            let w = rng.gen_range((0.4 * s) as usize..=(0.7 * s) as usize).max(1);
            let h = rng.gen_range((0.4 * s) as usize..=(0.7 * s) as usize).max(1);
            let x0 = rng.gen_range(0..=size - w);
            let y0 = rng.gen_range(0..=size - h);
            let amp = rng.gen_range(0.08..0.16) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            for c in 0..channels {
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        let sign = if (x / 2 + y / 2) % 2 == 0 { 1.0 } else { -1.0 };
                        out[c * plane + y * size + x] += sign * amp;
                    }
                }
            }
        }
        ManipulationFamily::Texture => {
            let nyq = s / 2.0;
            let rho = rng.gen_range(0.35..0.6) * nyq / s;
            let theta = rng.gen_range(0.0..PI);
            let (fx, fy) = (rho * theta.cos(), rho * theta.sin());
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.05..0.09);
            for c in 0..channels {
                for y in 0..size {
                    for x in 0..size {
                        out[c * plane + y * size + x] +=
                            amp * (2.0 * PI * (fx * x as f64 + fy * y as f64) + phase).sin();
                    }
                }
            }
        }
    }

    Ok(Sample {
        image: to_image(out, channels, size),
        label: Label::Fake,
        family: Some(family),
        quality: sample.quality,
        domain_id: sample.domain_id,
        seed: sample.seed,
    })
}

/// 3×3 Gaussian blur (σ = 1, edge-replicated) followed by uniform
/// quantization to [`QUANT_LEVELS`] levels.
pub fn degrade_image(img: &Tensor<f32>) -> Tensor<f32> {
    let (channels, size) = geometry(img);
    let k1: Vec<f64> = (-1..=1).map(|i: i32| (-(i * i) as f64 / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp()).collect();
    let norm: f64 = k1.iter().sum::<f64>().powi(2);
    let step = (QUANT_LEVELS - 1) as f64;
    let data = img.data();
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (j, ky) in k1.iter().enumerate() {
                    let yy = (y as i64 + j as i64 - 1).clamp(0, size as i64 - 1) as usize;
                    for (i, kx) in k1.iter().enumerate() {
                        let xx = (x as i64 + i as i64 - 1).clamp(0, size as i64 - 1) as usize;
                        acc += ky * kx * data[(c * size + yy) * size + xx] as f64;
                    }
                }
                let v = (acc / norm).clamp(0.0, 1.0);
                out.push(((v * step).round() / step) as f32);
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

/// Moves a high-quality sample to the low-quality tier.
pub fn degrade_quality(sample: &Sample) -> Result<Sample> {
    if sample.quality != Quality::Hq {
        return Err(Error::Contract("degrade_quality expects a high-quality sample".into()));
    }
    Ok(Sample {
        image: degrade_image(&sample.image),
        quality: Quality::Lq,
        ..sample.clone()
    })
}
