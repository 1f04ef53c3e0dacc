//! `CAPSDS01` materialized dataset files.
//!
//! Little-endian header `magic[8] count:u32 side:u16 labels_per_record:u8
//! has_components:u8`, then per record its labels (`u8` each), its pixels
//! (`f32`, row-major) and, when flagged, two component planes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::record::{ImageRecord, RecordSource};
use crate::error::{Error, Result};

pub const CAPSDS_MAGIC: &[u8; 8] = b"CAPSDS01";

pub fn write_capsds(w: &mut impl Write, src: &dyn RecordSource) -> Result<()> {
    let io = |e: std::io::Error| Error::Data(format!("writing dataset: {e}"));
    let count = u32::try_from(src.len()).map_err(|_| Error::Data("too many records for CAPSDS v1".into()))?;
    let side = u16::try_from(src.side()).map_err(|_| Error::Data("image side too large for CAPSDS v1".into()))?;
    w.write_all(CAPSDS_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(count).map_err(io)?;
    w.write_u16::<LittleEndian>(side).map_err(io)?;
    w.write_u8(src.labels_per_record() as u8).map_err(io)?;
    w.write_u8(src.has_components() as u8).map_err(io)?;
    for i in 0..src.len() {
        let r = src.get(i);
        w.write_all(&r.labels).map_err(io)?;
        let planes = std::iter::once(&r.pixels).chain(r.components.iter().flatten());
        for plane in planes {
            for &p in plane {
                w.write_f32::<LittleEndian>(p).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_capsds(r: &mut impl Read) -> Result<Vec<ImageRecord>> {
    let trunc = |e: std::io::Error| Error::Data(format!("truncated or unreadable dataset: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CAPSDS_MAGIC {
        return Err(Error::Data(format!("bad dataset magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let side = r.read_u16::<LittleEndian>().map_err(trunc)? as usize;
    let lpr = r.read_u8().map_err(trunc)? as usize;
    let has_components = match r.read_u8().map_err(trunc)? {
        0 => false,
        1 => true,
        v => return Err(Error::Data(format!("bad has_components flag {v}"))),
    };
    let px = side * side;
    let plane = |r: &mut dyn Read| -> Result<Vec<f32>> {
        let mut v = vec![0.0f32; px];
        r.read_f32_into::<LittleEndian>(&mut v).map_err(trunc)?;
        Ok(v)
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut labels = vec![0u8; lpr];
        r.read_exact(&mut labels).map_err(trunc)?;
        let pixels = plane(r)?;
        let components = if has_components { Some([plane(r)?, plane(r)?]) } else { None };
        out.push(ImageRecord { side, pixels, labels, components });
    }
    Ok(out)
}

/// Writes the file and returns the SHA-256 of its contents (hex).
pub fn save_capsds(path: &Path, src: &dyn RecordSource) -> Result<String> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_capsds(&mut w, src)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    drop(w);
    file_sha256(path)
}

pub fn load_capsds(path: &Path) -> Result<Vec<ImageRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_capsds(&mut BufReader::new(f))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InMemory;

    fn records(components: bool) -> InMemory {
        let recs = (0..4)
            .map(|i| ImageRecord {
                side: 3,
                pixels: (0..9).map(|p| (p * i) as f32 / 36.0).collect(),
                labels: if components { vec![i as u8, 9 - i as u8] } else { vec![i as u8] },
                components: components.then(|| [vec![0.25; 9], vec![0.5; 9]]),
            })
            .collect();
        InMemory::new(recs).unwrap()
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_capsds(&mut buf, &records(false)).unwrap();
        assert_eq!(&buf[..8], b"CAPSDS01");
        assert_eq!(&buf[8..16], &[4, 0, 0, 0, 3, 0, 1, 0]);
        assert_eq!(buf.len(), 16 + 4 * (1 + 9 * 4));
        assert_eq!(buf[16], 0);
        assert_eq!(&buf[17..21], &0.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip() {
        for comp in [false, true] {
            let src = records(comp);
            let mut buf = Vec::new();
            write_capsds(&mut buf, &src).unwrap();
            assert_eq!(read_capsds(&mut buf.as_slice()).unwrap(), src.records());
        }
    }

    #[test]
    fn corruption_detected() {
        let mut buf = Vec::new();
        write_capsds(&mut buf, &records(true)).unwrap();
        assert!(read_capsds(&mut &buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(matches!(read_capsds(&mut buf.as_slice()), Err(Error::Data(_))));
    }
}
