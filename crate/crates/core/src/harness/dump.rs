//! Binary feature-map dumps: `AFDC` magic, then little-endian u32 version,
//! height, width, channels, then row-major f64 values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const DUMP_MAGIC: &[u8; 4] = b"AFDC";
pub const DUMP_VERSION: u32 = 1;

pub fn encode_features(f: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * f.data().len());
    out.extend_from_slice(DUMP_MAGIC);
    for v in [DUMP_VERSION, f.height() as u32, f.width() as u32, f.channels() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in f.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], origin: &str) -> Result<FeatureMap> {
    let bad = |reason: String| Error::Format {
        path: origin.into(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..4] != DUMP_MAGIC {
        return Err(bad("missing AFDC header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != DUMP_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    let payload = &bytes[20..];
    if payload.len() != 8 * n {
        return Err(bad(format!("expected {} payload bytes, found {}", 8 * n, payload.len())));
    }
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FeatureMap::new(h, w, c, data).map_err(|e| bad(e.to_string()))
}

pub fn write_features(path: &Path, f: &FeatureMap) -> Result<()> {
    std::fs::write(path, encode_features(f))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path)?;
    decode_features(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_and_layout() {
        let f = FeatureMap::random_normal(3, 5, 2, 1.0, &mut Rng::new(1));
        let bytes = encode_features(&f);
        assert_eq!(&bytes[..4], b"AFDC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &5u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 8 * 30);
        assert_eq!(&bytes[20..28], &f.get(0, 0, 0).to_le_bytes());
        assert_eq!(decode_features(&bytes, "mem").unwrap(), f);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let f = FeatureMap::zeros(2, 2, 2);
        let mut bytes = encode_features(&f);
        assert!(decode_features(&bytes[..bytes.len() - 1], "mem").is_err());
        bytes[0] = b'X';
        assert!(decode_features(&bytes, "mem").is_err());
        let mut v2 = encode_features(&f);
        v2[4] = 2;
        assert!(decode_features(&v2, "mem").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.afdc");
        let f = FeatureMap::random_normal(4, 4, 3, 2.0, &mut Rng::new(9));
        write_features(&p, &f).unwrap();
        assert_eq!(read_features(&p).unwrap(), f);
    }
}
