//! OODF embedding files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "OODF"            4 bytes magic
//! version           u8 (= 1)
//! N                 u32 sample count
//! D                 u32 feature dimension
//! features          N*D f32, row-major
//! labels            N i32
//! ood flags         N u8: 0 = in-distribution, 1 = OOD, 0xFF = not applicable
//! ```
//!
//! A CSV form with header `label,flag,f0,...,f{D-1}` is accepted on input.
//! The flag column holds `0`, `1`, or an empty cell / `255` for "not applicable".

use std::fs;
use std::path::Path;

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const OODF_MAGIC: &[u8; 4] = b"OODF";
pub const OODF_VERSION: u8 = 1;
const FLAG_NA: u8 = 0xFF;

pub fn encode_oodf(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let n = set.len();
    let d = set.dim();
    let n32 = u32::try_from(n).map_err(|_| Error::invalid("too many samples for OODF"))?;
    let d32 = u32::try_from(d).map_err(|_| Error::invalid("dimension too large for OODF"))?;
    let mut out = Vec::with_capacity(13 + n * d * 4 + n * 5);
    out.extend_from_slice(OODF_MAGIC);
    out.push(OODF_VERSION);
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for (i, &v) in set.features().as_slice().iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::invalid(format!("feature {i} ({v}) overflows f32")));
        }
        out.extend_from_slice(&narrowed.to_le_bytes());
    }
    for &y in set.labels() {
        out.extend_from_slice(&y.to_le_bytes());
    }
    match set.ood_flags() {
        Some(flags) => out.extend(flags.iter().map(|&f| u8::from(f))),
        None => out.extend(std::iter::repeat(FLAG_NA).take(n)),
    }
    Ok(out)
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) source: &'a str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::format(
                self.source,
                self.pos as u64,
                format!("truncated while reading {what}: need {len} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_oodf(bytes: &[u8], source: &str) -> Result<EmbeddingSet> {
    let mut cur = Cursor { bytes, pos: 0, source };
    if cur.take(4, "magic")? != OODF_MAGIC {
        return Err(Error::format(source, 0, "bad magic (expected \"OODF\")"));
    }
    let version = cur.take(1, "version")?[0];
    if version != OODF_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "OODF",
            found: version,
            expected: OODF_VERSION,
        });
    }
    let n = cur.u32("sample count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let feat_len = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::format(source, cur.pos as u64, "header sizes overflow"))?;
    let feat_offset = cur.pos;
    let raw = cur.take(feat_len, "features")?;
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                source,
                (feat_offset + 4 * i) as u64,
                "non-finite feature value",
            ));
        }
        data.push(f64::from(v));
    }
    let labels: Vec<i32> = cur
        .take(n * 4, "labels")?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let flag_offset = cur.pos;
    let raw_flags = cur.take(n, "ood flags")?;
    if cur.pos != bytes.len() {
        return Err(Error::format(
            source,
            cur.pos as u64,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    let set = EmbeddingSet::new(Matrix::from_vec(n, d, data)?, labels)?;
    decode_flags(set, raw_flags, source, flag_offset as u64)
}

fn decode_flags(set: EmbeddingSet, raw: &[u8], source: &str, offset: u64) -> Result<EmbeddingSet> {
    if raw.iter().all(|&f| f == FLAG_NA) {
        return Ok(set);
    }
    let mut flags = Vec::with_capacity(raw.len());
    for (i, &f) in raw.iter().enumerate() {
        match f {
            0 => flags.push(false),
            1 => flags.push(true),
            other => {
                return Err(Error::format(
                    source,
                    offset + i as u64,
                    format!("ood flag {other:#04x} is not 0 or 1 (0xFF only allowed for every sample)"),
                ))
            }
        }
    }
    set.with_ood_flags(flags)
}

pub fn write_oodf(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_oodf(set)?)?;
    Ok(())
}

pub fn read_oodf(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_oodf(&bytes, &path.display().to_string())
}

pub fn decode_csv(text: &str, source: &str) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() < 3 || &header[0] != "label" || &header[1] != "flag" {
        return Err(Error::format(source, 0, "header must be label,flag,f0,...,fD-1"));
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::format(source, 0, format!("header column {} should be f{j}", j + 2)));
        }
    }
    let d = header.len() - 2;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut raw_flags = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.byte());
        let bad = |msg: String| Error::format(source, line, format!("row {row_idx}: {msg}"));
        if record.len() != d + 2 {
            return Err(bad(format!("{} fields, expected {}", record.len(), d + 2)));
        }
        labels.push(record[0].trim().parse::<i32>().map_err(|e| bad(format!("label: {e}")))?);
        raw_flags.push(match record[1].trim() {
            "" | "255" => FLAG_NA,
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("flag {other:?}"))),
        });
        for j in 0..d {
            let v: f64 = record[j + 2]
                .trim()
                .parse()
                .map_err(|e| bad(format!("f{j}: {e}")))?;
            if !v.is_finite() {
                return Err(bad(format!("f{j} is not finite")));
            }
            data.push(v);
        }
    }
    let n = labels.len();
    let set = EmbeddingSet::new(Matrix::from_vec(n, d, data)?, labels)?;
    decode_flags(set, &raw_flags, source, 0)
}

/// Reads an embedding set, detecting OODF by its magic and falling back to CSV.
pub fn read_embedding_set(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    if bytes.starts_with(OODF_MAGIC) {
        decode_oodf(&bytes, &name)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::format(&name, e.valid_up_to() as u64, "neither OODF nor UTF-8 CSV"))?;
        decode_csv(text, &name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set() -> EmbeddingSet {
        let m = Matrix::from_vec(3, 2, vec![1.0, -2.5, 0.125, 4.0, 1e-3, 7.0]).unwrap();
        EmbeddingSet::new(m, vec![5, -1, 5]).unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode_oodf(&sample_set()).unwrap();
        assert_eq!(&bytes[..4], b"OODF");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 13 + 3 * 2 * 4 + 3 * 4 + 3);
        assert!(bytes[bytes.len() - 3..].iter().all(|&b| b == 0xFF));
    }

    #[test]
    fn flags_round_trip() {
        let set = sample_set().with_ood_flags(vec![false, true, false]).unwrap();
        let back = decode_oodf(&encode_oodf(&set).unwrap(), "mem").unwrap();
        assert_eq!(back.ood_flags(), Some(&[false, true, false][..]));
    }

    #[test]
    fn truncated_and_versioned_files_fail_cleanly() {
        let bytes = encode_oodf(&sample_set()).unwrap();
        for cut in [0, 3, 4, 8, 20, bytes.len() - 1] {
            assert!(matches!(
                decode_oodf(&bytes[..cut], "mem"),
                Err(Error::Format { .. })
            ));
        }
        let mut v0 = bytes.clone();
        v0[4] = 0;
        assert!(matches!(
            decode_oodf(&v0, "mem"),
            Err(Error::UnsupportedVersion { found: 0, .. })
        ));
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(decode_oodf(&bad_magic, "mem"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn csv_input() {
        let text = "label,flag,f0,f1\n3,1,0.5,1.5\n4,0,-1,2\n";
        let set = decode_csv(text, "mem").unwrap();
        assert_eq!(set.labels(), &[3, 4]);
        assert_eq!(set.ood_flags(), Some(&[true, false][..]));
        assert_eq!(set.sample(1), &[-1.0, 2.0]);
        let na = decode_csv("label,flag,f0\n1,,2\n", "mem").unwrap();
        assert!(na.ood_flags().is_none());
        assert!(decode_csv("label,f0\n1,2\n", "mem").is_err());
        assert!(decode_csv("label,flag,f0\n1,0,abc\n", "mem").is_err());
    }

    proptest! {
        #[test]
        fn oodf_round_trip_at_f32(
            rows in 0usize..12,
            dim in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = crate::numeric::Rng::new(seed);
            let data: Vec<f64> = (0..rows * dim).map(|_| rng.normal() * 100.0).collect();
            let labels: Vec<i32> = (0..rows).map(|_| rng.below(1000) as i32 - 500).collect();
            let set = EmbeddingSet::new(Matrix::from_vec(rows, dim, data.clone()).unwrap(), labels.clone()).unwrap();
            let back = decode_oodf(&encode_oodf(&set).unwrap(), "mem").unwrap();
            prop_assert_eq!(back.labels(), &labels[..]);
            for (a, b) in back.features().as_slice().iter().zip(&data) {
                prop_assert_eq!(*a, f64::from(*b as f32));
            }
        }
    }
}
