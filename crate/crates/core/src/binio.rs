//! Little-endian binary primitives shared by the dataset cache and model
//! checkpoint formats, plus the FNV-1a fingerprint used to detect mixups.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))?;
    Ok(buf)
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r, what)?))
}

pub(crate) fn read_bytes(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))?;
    Ok(buf)
}

/// Sizes read from files are attacker- and corruption-facing: bound them
/// before allocating.
pub(crate) fn checked_len(len: u64, cap: u64, what: &str) -> Result<usize> {
    if len > cap {
        return Err(Error::Checkpoint(format!("implausible {what} length {len} (cap {cap})")));
    }
    Ok(len as usize)
}

/// 64-bit FNV-1a hash. Stable across platforms and builds; used to
/// fingerprint configs and artifacts, not for security.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_values() {
        let mut buf = Vec::new();
        write_u32(&mut buf, 0xdead_beef).unwrap();
        write_u64(&mut buf, u64::MAX - 3).unwrap();
        write_f64(&mut buf, -0.125).unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_u32(&mut r, "a").unwrap(), 0xdead_beef);
        assert_eq!(read_u64(&mut r, "b").unwrap(), u64::MAX - 3);
        assert_eq!(read_f64(&mut r, "c").unwrap(), -0.125);
        assert!(read_u32(&mut r, "past end").is_err());
    }

    #[test]
    fn fnv_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn checked_len_rejects_implausible_sizes() {
        assert!(checked_len(10, 100, "x").is_ok());
        assert!(checked_len(101, 100, "x").is_err());
    }
}
