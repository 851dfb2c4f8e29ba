//! On-disk dataset: a directory holding `samples.bin` (`u32` count, then
//! one `TNSR` blob per sample) and the plain-text sidecar `samples.idx`
//! with one `index,label,family,quality,domain,seed` row per sample.
//! `index` is the blob position, so sidecar rows may appear in any order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Label, ManipulationFamily, Quality, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Cursor, Tensor};

pub const SAMPLES_FILE: &str = "samples.bin";
pub const INDEX_FILE: &str = "samples.idx";
const HEADER: &str = "index,label,family,quality,domain,seed";

pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let count = u32::try_from(samples.len()).map_err(|_| Error::Contract("too many samples".into()))?;
    let mut blob = count.to_le_bytes().to_vec();
    let mut index = String::from(HEADER);
    index.push('\n');
    for (i, s) in samples.iter().enumerate() {
        blob.extend_from_slice(&s.image.to_tnsr());
        let family = s.family.map_or("none", |f| f.as_str());
        let _ = writeln!(
            index,
            "{i},{},{family},{},{},{}",
            s.label as u8, s.quality, s.domain_id, s.seed
        );
    }
    let bin = dir.join(SAMPLES_FILE);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let idx = dir.join(INDEX_FILE);
    fs::write(&idx, index).map_err(|e| Error::io(&idx, e))
}

struct Row {
    index: usize,
    label: Label,
    family: Option<ManipulationFamily>,
    quality: Quality,
    domain_id: u32,
    seed: u64,
}

fn parse_row(line: &str, lineno: usize) -> Result<Row> {
    let bad = |what: &str| Error::Integrity(format!("{INDEX_FILE} line {lineno}: {what}"));
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 6 {
        return Err(bad(&format!("expected 6 columns, found {}", cols.len())));
    }
    let index = cols[0].parse().map_err(|_| bad("bad index"))?;
    let label = match cols[1] {
        "1" => Label::Real,
        "0" => Label::Fake,
        other => return Err(bad(&format!("bad label {other:?}"))),
    };
    let family = match cols[2] {
        "none" => None,
        name => Some(name.parse().map_err(|_| bad(&format!("unknown family {name:?}")))?),
    };
    if (label == Label::Fake) != family.is_some() {
        return Err(bad("fake rows need a family and real rows must not have one"));
    }
    Ok(Row {
        index,
        label,
        family,
        quality: cols[3].parse().map_err(|_| bad("bad quality"))?,
        domain_id: cols[4].parse().map_err(|_| bad("bad domain"))?,
        seed: cols[5].parse().map_err(|_| bad("bad seed"))?,
    })
}

/// Samples in blob order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let idx = dir.join(INDEX_FILE);
    if !idx.is_file() {
        return Err(Error::Integrity(format!("missing sidecar index {}", idx.display())));
    }
    let text = fs::read_to_string(&idx).map_err(|e| Error::io(&idx, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(Error::Integrity(format!("{INDEX_FILE}: missing header {HEADER:?}"))),
    }
    let rows = lines.map(|(n, l)| parse_row(l.trim(), n + 1)).collect::<Result<Vec<_>>>()?;

    let bin = dir.join(SAMPLES_FILE);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut cur = Cursor::new(&bytes, 0);
    let count = cur.u32("sample count")? as usize;
    if count != rows.len() {
        return Err(Error::Integrity(format!(
            "{SAMPLES_FILE} holds {count} blobs but {INDEX_FILE} lists {} rows",
            rows.len()
        )));
    }
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let (t, used) = Tensor::<f32>::from_tnsr(cur.rest(), cur.abs_pos())?;
        cur.advance(used);
        if t.ndim() != 3 {
            return Err(Error::Integrity(format!("image blob with shape {:?}", t.shape())));
        }
        images.push(Some(t));
    }
    if cur.remaining() != 0 {
        return Err(cur.error_here("trailing bytes after last blob"));
    }

    let mut out: Vec<Option<Sample>> = vec![None; count];
    for row in rows {
        let image = images
            .get_mut(row.index)
            .ok_or_else(|| Error::Integrity(format!("index {} out of range", row.index)))?
            .take()
            .ok_or_else(|| Error::Integrity(format!("index {} listed twice", row.index)))?;
        out[row.index] = Some(Sample {
            image,
            label: row.label,
            family: row.family,
            quality: row.quality,
            domain_id: row.domain_id,
            seed: row.seed,
        });
    }
    Ok(out.into_iter().map(|s| s.expect("every index filled")).collect())
}
