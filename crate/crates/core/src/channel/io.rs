//! `LWMC` dataset file.
//!
//! ```text
//! "LWMC" | version u16 = 1 | count u32 | antennas u16 | subcarriers u16 | label_flags u8
//! per channel: real plane f32[A·S] | imag plane f32[A·S] | [los u8] | [beam u16]
//! ```
//!
//! Little-endian throughout. `label_flags` bit 0 marks LoS labels, bit 1 beam
//! labels; a flag is set only when every channel carries that label.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::ChannelMatrix;

pub const MAGIC: &[u8; 4] = b"LWMC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 1;
const FLAG_LOS: u8 = 1;
const FLAG_BEAM: u8 = 2;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("{0} trailing bytes after last channel")]
    TrailingBytes(usize),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode_dataset(channels: &[ChannelMatrix]) -> Result<Vec<u8>, FormatError> {
    let (a, s) = channels.first().map_or((0, 0), |c| (c.antennas(), c.subcarriers()));
    if let Some(c) = channels.iter().find(|c| c.antennas() != a || c.subcarriers() != s) {
        return Err(FormatError::Inconsistent(format!(
            "channel of {}x{} in a {a}x{s} dataset",
            c.antennas(),
            c.subcarriers()
        )));
    }
    let count = u32::try_from(channels.len())
        .map_err(|_| FormatError::DimensionOverflow(format!("{} channels", channels.len())))?;
    let a16 = u16::try_from(a).map_err(|_| FormatError::DimensionOverflow(format!("{a} antennas")))?;
    let s16 = u16::try_from(s).map_err(|_| FormatError::DimensionOverflow(format!("{s} subcarriers")))?;

    let mut flags = 0u8;
    if !channels.is_empty() && channels.iter().all(|c| c.los.is_some()) {
        flags |= FLAG_LOS;
    }
    if !channels.is_empty() && channels.iter().all(|c| c.beam.is_some()) {
        flags |= FLAG_BEAM;
    }

    let mut out = Vec::with_capacity(HEADER_LEN + channels.len() * (8 * a * s + 3));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&a16.to_le_bytes());
    out.extend_from_slice(&s16.to_le_bytes());
    out.push(flags);
    for c in channels {
        for plane in [c.real(), c.imag()] {
            for &v in plane {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        if flags & FLAG_LOS != 0 {
            out.push(u8::from(c.los.unwrap()));
        }
        if flags & FLAG_BEAM != 0 {
            let beam = c.beam.unwrap();
            let b = u16::try_from(beam).map_err(|_| FormatError::DimensionOverflow(format!("beam index {beam}")))?;
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(FormatError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.buf.len(),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<ChannelMatrix>, FormatError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let a = r.u16()? as usize;
    let s = r.u16()? as usize;
    let flags = r.u8()?;
    if flags & !(FLAG_LOS | FLAG_BEAM) != 0 {
        return Err(FormatError::Inconsistent(format!("unknown label flags {flags:#04x}")));
    }
    if count > 0 && (a == 0 || s == 0) {
        return Err(FormatError::Inconsistent(format!("{count} channels of {a}x{s}")));
    }

    let label_bytes = usize::from(flags & FLAG_LOS != 0) + 2 * usize::from(flags & FLAG_BEAM != 0);
    let per_channel = a
        .checked_mul(s)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(label_bytes))
        .ok_or_else(|| FormatError::DimensionOverflow(format!("{a}x{s} channel")))?;
    let body = per_channel
        .checked_mul(count)
        .ok_or_else(|| FormatError::DimensionOverflow(format!("{count} channels of {per_channel} bytes")))?;
    let needed = HEADER_LEN
        .checked_add(body)
        .ok_or_else(|| FormatError::DimensionOverflow("file size".into()))?;
    if buf.len() < needed {
        return Err(FormatError::Truncated {
            needed,
            available: buf.len(),
        });
    }
    if buf.len() > needed {
        return Err(FormatError::TrailingBytes(buf.len() - needed));
    }

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut planes = [Vec::with_capacity(a * s), Vec::with_capacity(a * s)];
        for plane in planes.iter_mut() {
            for chunk in r.take(4 * a * s)?.chunks_exact(4) {
                plane.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        let [real, imag] = planes;
        let mut ch = ChannelMatrix::new(a, s, real, imag).expect("dimensions checked");
        if flags & FLAG_LOS != 0 {
            ch.los = Some(r.u8()? != 0);
        }
        if flags & FLAG_BEAM != 0 {
            ch.beam = Some(r.u16()? as usize);
        }
        out.push(ch);
    }
    Ok(out)
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_dataset(path: impl AsRef<Path>, channels: &[ChannelMatrix]) -> Result<(), FormatError> {
    let bytes = encode_dataset(channels)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ChannelMatrix>, FormatError> {
    decode_dataset(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, ScenarioConfig};

    fn sample(n: usize) -> Vec<ChannelMatrix> {
        let mut v = generate_dataset(&ScenarioConfig::default(), 4, 3, n);
        for (i, c) in v.iter_mut().enumerate() {
            c.beam = Some(i % 7);
        }
        v
    }

    fn as_f32(v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| x as f32 as f64).collect()
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let chans = sample(100);
        let back = decode_dataset(&encode_dataset(&chans).unwrap()).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in chans.iter().zip(&back) {
            assert_eq!(as_f32(a.real()), b.real());
            assert_eq!(as_f32(a.imag()), b.imag());
            assert_eq!(a.los, b.los);
            assert_eq!(a.beam, b.beam);
        }
        let again = encode_dataset(&back).unwrap();
        assert_eq!(again, encode_dataset(&chans).unwrap());
    }

    #[test]
    fn empty_dataset_is_valid() {
        let bytes = encode_dataset(&[]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_dataset(&sample(2)).unwrap();
        assert_eq!(&bytes[..4], b"LWMC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 4);
        assert_eq!(u16::from_le_bytes([bytes[12], bytes[13]]), 3);
        assert_eq!(bytes[14], 3);
        assert_eq!(bytes.len(), HEADER_LEN + 2 * (8 * 12 + 3));
    }

    #[test]
    fn corruptions_map_to_distinct_errors() {
        let good = encode_dataset(&sample(3)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(FormatError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_dataset(&bad), Err(FormatError::UnsupportedVersion(2))));

        assert!(matches!(
            decode_dataset(&good[..good.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(decode_dataset(&good[..7]), Err(FormatError::Truncated { .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_dataset(&bad), Err(FormatError::TrailingBytes(1))));
    }

    #[test]
    fn oversize_dimensions_are_rejected() {
        let big = ChannelMatrix::zeros(70_000, 1);
        assert!(matches!(encode_dataset(&[big]), Err(FormatError::DimensionOverflow(_))));

        let mut header = Vec::new();
        header.extend_from_slice(b"LWMC");
        header.extend_from_slice(&1u16.to_le_bytes());
        header.extend_from_slice(&u32::MAX.to_le_bytes());
        header.extend_from_slice(&u16::MAX.to_le_bytes());
        header.extend_from_slice(&u16::MAX.to_le_bytes());
        header.push(3);
        let err = decode_dataset(&header).unwrap_err();
        assert!(
            matches!(err, FormatError::DimensionOverflow(_) | FormatError::Truncated { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn mixed_shapes_are_rejected() {
        let v = vec![ChannelMatrix::zeros(2, 2), ChannelMatrix::zeros(2, 3)];
        assert!(matches!(encode_dataset(&v), Err(FormatError::Inconsistent(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.lwmc");
        let chans = sample(5);
        write_dataset(&p, &chans).unwrap();
        assert_eq!(read_dataset(&p).unwrap().len(), 5);
    }
}
