use std::collections::BTreeSet;
use std::fmt;

use super::synth::{apply_manipulation, degrade_quality, generate_real};
use super::{DatasetSpec, ManipulationFamily, Quality, Sample};
use crate::error::{Error, Result};

/// Index offset of every test-split source image.
const TEST_OFFSET: u64 = 1 << 40;

fn fake_source_offset(family: ManipulationFamily) -> u64 {
    (family.ordinal() as u64 + 1) << 32
}

/// Which families and domain feed each side of an experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub train_families: Vec<ManipulationFamily>,
    pub test_families: Vec<ManipulationFamily>,
    pub quality: Quality,
    pub train_domain: u32,
    pub test_domain: u32,
}

impl Protocol {
    /// Train on every family except `held_out`, test on `held_out`.
    pub fn leave_one_out(held_out: ManipulationFamily, quality: Quality) -> Self {
        Self {
            train_families: ManipulationFamily::ALL.into_iter().filter(|&f| f != held_out).collect(),
            test_families: vec![held_out],
            quality,
            train_domain: 0,
            test_domain: 0,
        }
    }

    /// Same families on both sides, test drawn from a shifted domain.
    pub fn cross_domain(family: ManipulationFamily, quality: Quality, test_domain: u32) -> Self {
        Self {
            train_families: vec![family],
            test_families: vec![family],
            quality,
            train_domain: 0,
            test_domain,
        }
    }

    /// Families must be non-empty and duplicate-free on each side. Within
    /// one domain the two sides must not share a family; across domains
    /// they may, since the domain itself is what is held out.
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<_> = self.train_families.iter().collect();
        let test: BTreeSet<_> = self.test_families.iter().collect();
        if train.is_empty() || test.is_empty() {
            return Err(Error::Protocol("train and test family sets must be non-empty".into()));
        }
        if train.len() != self.train_families.len() || test.len() != self.test_families.len() {
            return Err(Error::Protocol("duplicate family in protocol".into()));
        }
        if self.train_domain == self.test_domain {
            let shared: Vec<String> = train.intersection(&test).map(|f| f.to_string()).collect();
            if !shared.is_empty() {
                return Err(Error::Protocol(format!(
                    "families {} appear on both sides of a same-domain protocol",
                    shared.join(",")
                )));
            }
        }
        Ok(())
    }

    /// Setting name such as `warp+checker+texture->blend`.
    pub fn label(&self) -> String {
        let join = |fs: &[ManipulationFamily]| fs.iter().map(|f| f.as_str()).collect::<Vec<_>>().join("+");
        let mut s = format!("{}->{}", join(&self.train_families), join(&self.test_families));
        if self.train_domain != self.test_domain {
            s.push_str(&format!("@domain{}", self.test_domain));
        }
        s
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The four leave-one-out settings, held-out family in canonical order.
pub fn leave_one_out_protocols(quality: Quality) -> Vec<Protocol> {
    ManipulationFamily::ALL
        .into_iter()
        .map(|f| Protocol::leave_one_out(f, quality))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// `n_real` reals followed by `n_fake_per_family` fakes of each family,
/// all from `domain` at `quality`. `offset` separates the source index
/// ranges of the two splits.
pub fn generate_pool(
    spec: &DatasetSpec,
    families: &[ManipulationFamily],
    quality: Quality,
    domain: u32,
    offset: u64,
) -> Result<Vec<Sample>> {
    spec.validate()?;
    let spec = DatasetSpec {
        domain_id: domain,
        ..spec.clone()
    };
    let finish = |s: Sample| match quality {
        Quality::Hq => Ok(s),
        Quality::Lq => degrade_quality(&s),
    };
    let mut out = Vec::with_capacity(spec.n_real + spec.n_fake_per_family * families.len());
    for i in 0..spec.n_real as u64 {
        out.push(finish(generate_real(&spec, offset + i))?);
    }
    for &family in families {
        for i in 0..spec.n_fake_per_family as u64 {
            let source = generate_real(&spec, offset + fake_source_offset(family) + i);
            out.push(finish(apply_manipulation(&source, family)?)?);
        }
    }
    Ok(out)
}

pub fn make_split(spec: &DatasetSpec, protocol: &Protocol) -> Result<Split> {
    protocol.validate()?;
    Ok(Split {
        train: generate_pool(spec, &protocol.train_families, protocol.quality, protocol.train_domain, 0)?,
        test: generate_pool(
            spec,
            &protocol.test_families,
            protocol.quality,
            protocol.test_domain,
            TEST_OFFSET,
        )?,
    })
}

/// Reals plus fakes of `families`, in pool order.
pub fn select_families(pool: &[Sample], families: &[ManipulationFamily]) -> Vec<Sample> {
    pool.iter()
        .filter(|s| s.family.is_none_or(|f| families.contains(&f)))
        .cloned()
        .collect()
}

/// Split index of a pool generated for the test side.
pub fn test_offset() -> u64 {
    TEST_OFFSET
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            n_real: 6,
            n_fake_per_family: 4,
            image_size: 16,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn four_settings_cover_each_family_once() {
        let ps = leave_one_out_protocols(Quality::Hq);
        assert_eq!(ps.len(), 4);
        for (p, f) in ps.iter().zip(ManipulationFamily::ALL) {
            assert_eq!(p.test_families, vec![f]);
            assert_eq!(p.train_families.len(), 3);
            assert!(!p.train_families.contains(&f));
            p.validate().unwrap();
        }
        assert_eq!(ps[0].label(), "warp+checker+texture->blend");
    }

    #[test]
    fn overlap_rejected_within_domain_only() {
        let mut p = Protocol::leave_one_out(ManipulationFamily::Warp, Quality::Hq);
        p.test_families.push(ManipulationFamily::Blend);
        assert!(matches!(make_split(&small(), &p), Err(Error::Protocol(_))));
        let cross = Protocol::cross_domain(ManipulationFamily::Blend, Quality::Lq, 2);
        cross.validate().unwrap();
        assert_eq!(cross.label(), "blend->blend@domain2");
    }

    #[test]
    fn split_counts_and_partition() {
        let p = Protocol::leave_one_out(ManipulationFamily::Checker, Quality::Lq);
        let split = make_split(&small(), &p).unwrap();
        assert_eq!(split.train.len(), 6 + 3 * 4);
        assert_eq!(split.test.len(), 6 + 4);
        assert!(split.test.iter().all(|s| s.family.is_none_or(|f| f == ManipulationFamily::Checker)));
        assert!(split.train.iter().all(|s| s.family != Some(ManipulationFamily::Checker)));
        assert!(split.train.iter().chain(&split.test).all(|s| s.quality == Quality::Lq));
        let train_seeds: BTreeSet<u64> = split.train.iter().map(|s| s.seed).collect();
        assert!(split.test.iter().all(|s| !train_seeds.contains(&s.seed)));
    }

    #[test]
    fn select_keeps_reals() {
        let pool = generate_pool(&small(), &ManipulationFamily::ALL, Quality::Hq, 0, 0).unwrap();
        let picked = select_families(&pool, &[ManipulationFamily::Warp]);
        assert_eq!(picked.len(), 6 + 4);
    }
}
