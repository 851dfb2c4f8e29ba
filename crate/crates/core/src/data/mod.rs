//! Synthetic stand-in for a face-forgery corpus.
//!
//! Real images are smooth random fields; four manipulation families each
//! leave a different artifact; a low-quality tier blurs and quantizes;
//! domains shift the frequency band of the real fields. Everything is a
//! pure function of the seeds.

mod io;
pub mod spectrum;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{read_dataset, write_dataset, INDEX_FILE, SAMPLES_FILE};
pub use split::{generate_pool, leave_one_out_protocols, make_split, select_families, test_offset, Protocol, Split};
pub use synth::{apply_manipulation, degrade_image, degrade_quality, generate_real, sample_seed, QUANT_LEVELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ManipulationFamily {
    /// Soft-edged elliptical paste of a foreign field.
    Blend,
    /// Local sinusoidal coordinate displacement.
    Warp,
    /// Additive Nyquist-rate checkerboard in a rectangle.
    Checker,
    /// Global low-amplitude mid-frequency grating.
    Texture,
}

impl ManipulationFamily {
    pub const ALL: [ManipulationFamily; 4] = [
        ManipulationFamily::Blend,
        ManipulationFamily::Warp,
        ManipulationFamily::Checker,
        ManipulationFamily::Texture,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ManipulationFamily::Blend => "blend",
            ManipulationFamily::Warp => "warp",
            ManipulationFamily::Checker => "checker",
            ManipulationFamily::Texture => "texture",
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ManipulationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ManipulationFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown manipulation family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Quality {
    #[default]
    Hq,
    Lq,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Hq => "hq",
            Quality::Lq => "lq",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hq" => Ok(Quality::Hq),
            "lq" => Ok(Quality::Lq),
            other => Err(Error::Config(format!("unknown quality tier {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Fake = 0,
    Real = 1,
}

impl Label {
    pub fn value(self) -> f64 {
        self as u8 as f64
    }
}

/// One synthetic image, `[C, H, W]` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: Label,
    pub family: Option<ManipulationFamily>,
    pub quality: Quality,
    pub domain_id: u32,
    /// Seed of the source real image.
    pub seed: u64,
}

impl Sample {
    pub fn is_real(&self) -> bool {
        self.label == Label::Real
    }
}

/// Geometry, counts, and seeds for generated splits.
///
/// Each split holds `n_real` real images plus `n_fake_per_family` fakes
/// for every family it includes.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_real: usize,
    pub n_fake_per_family: usize,
    pub quality: Quality,
    pub domain_id: u32,
    pub base_seed: u64,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_real: 200,
            n_fake_per_family: 200,
            quality: Quality::Hq,
            domain_id: 0,
            base_seed: 0,
            image_size: 32,
            channels: 3,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_real == 0 || self.n_fake_per_family == 0 {
            return Err(Error::Config("n_real and n_fake_per_family must be positive".into()));
        }
        if self.image_size < 4 || self.channels == 0 {
            return Err(Error::Config("image_size must be >= 4 and channels >= 1".into()));
        }
        Ok(())
    }
}
