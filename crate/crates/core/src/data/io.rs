//! Dataset file: `KWSD`, u32 version, u32 record count, then per record
//! u32 id, u8 kind (1 = positive), u32 frames, u32 dim, f32 features
//! row-major, u32 keyword end (0xFFFFFFFF when absent), u8 label flag and
//! one u16 label per frame when the flag is set. All little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Annotation, Utterance};
use crate::binio::{put_len, put_u32, Reader};
use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;

pub const DATASET_MAGIC: &[u8; 4] = b"KWSD";
pub const DATASET_VERSION: u32 = 1;
const NO_KEYWORD: u32 = u32::MAX;

pub fn write_dataset_to(w: &mut impl Write, data: &[Utterance]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    put_u32(w, DATASET_VERSION)?;
    put_len(w, data.len(), "record count")?;
    for u in data {
        put_u32(w, u.id)?;
        w.write_all(&[u8::from(u.annotation.is_positive())])?;
        put_len(w, u.num_frames(), "frame count")?;
        put_len(w, u.features.dim(), "dim")?;
        for v in u.features.values() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        match u.annotation.keyword_end() {
            Some(e) => put_len(w, e, "keyword end")?,
            None => put_u32(w, NO_KEYWORD)?,
        }
        match u.annotation.labels() {
            Some(labels) => {
                if labels.len() != u.num_frames() {
                    return Err(Error::data(format!("utterance {}: label count mismatch", u.id)));
                }
                w.write_all(&[1])?;
                for l in labels {
                    w.write_all(&l.to_le_bytes())?;
                }
            }
            None => w.write_all(&[0])?,
        }
    }
    Ok(())
}

pub fn read_dataset_from(r: impl Read) -> Result<Vec<Utterance>> {
    let mut r = Reader::new(r);
    if r.bytes(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "bad dataset magic"));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported dataset version {version}")));
    }
    let count = r.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let record_at = r.offset();
        let id = r.u32("id")?;
        let kind = r.u8("kind")?;
        if kind > 1 {
            return Err(Error::format(record_at + 4, format!("unknown record kind {kind}")));
        }
        let frames = r.u32("frame count")? as usize;
        let dim = r.u32("dim")? as usize;
        let n = frames
            .checked_mul(dim)
            .ok_or_else(|| Error::format(r.offset(), "feature block too large"))?;
        let raw = r.bytes(n * 4, "features")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let end_at = r.offset();
        let end = r.u32("keyword end")?;
        let labels = match r.u8("label flag")? {
            0 => None,
            1 => {
                let raw = r.bytes(frames * 2, "labels")?;
                Some(
                    raw.chunks_exact(2)
                        .map(|c| u16::from_le_bytes([c[0], c[1]]))
                        .collect::<Vec<u16>>(),
                )
            }
            f => return r.fail(format!("bad label flag {f}")),
        };
        let annotation = match (kind, end) {
            (1, NO_KEYWORD) => return Err(Error::format(end_at, "positive record without keyword end")),
            (1, e) => Annotation::Positive {
                keyword_end: e as usize,
                keyword_start: labels.as_ref().and_then(|l| l.iter().position(|&x| x != 0)),
                labels,
            },
            (_, NO_KEYWORD) => Annotation::Negative { labels },
            (_, _) => return Err(Error::format(end_at, "negative record with keyword end")),
        };
        let u = Utterance {
            id,
            features: FeatureSequence::new(frames, dim, values)?,
            annotation,
        };
        u.validate(None)
            .map_err(|e| Error::format(record_at, e.to_string()))?;
        out.push(u);
    }
    r.expect_end()?;
    Ok(out)
}

pub fn write_dataset(path: &Path, data: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Utterance>> {
    read_dataset_from(BufReader::new(File::open(path)?))
}
