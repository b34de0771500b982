//! DGRID001: binary cache for dense descriptor grids.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 8    | magic `DGRID001`               |
//! | 8      | 4    | width (u32)                    |
//! | 12     | 4    | height (u32)                   |
//! | 16     | 2    | descriptor_dim (u16, = 128)    |
//! | 18     | 2    | patch_size (u16, pixels)       |
//! | 20     | 4    | FNV-1a-32 of bytes 0..20 + payload |
//! | 24     | -    | width*height*128 f32 payload, row-major |

use std::fs;
use std::path::Path;

use crate::sift::{DescriptorGrid, DESCRIPTOR_LEN};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DGRID001";
pub const HEADER_LEN: usize = 24;

const FNV_OFFSET: u32 = 0x811c_9dc5;
const FNV_PRIME: u32 = 0x0100_0193;

fn fnv1a(state: u32, bytes: &[u8]) -> u32 {
    bytes.iter().fold(state, |h, &b| (h ^ b as u32).wrapping_mul(FNV_PRIME))
}

fn checksum(prefix: &[u8], payload: &[u8]) -> u32 {
    fnv1a(fnv1a(FNV_OFFSET, prefix), payload)
}

/// Serializes a grid; `patch_size` must be a whole number of pixels.
pub fn encode_grid(grid: &DescriptorGrid, patch_size: f64) -> Result<Vec<u8>> {
    if !(patch_size >= 1.0 && patch_size <= u16::MAX as f64 && patch_size.fract() == 0.0) {
        return Err(Error::Config(format!("patch size {patch_size} is not storable as a whole pixel count")));
    }
    let (w, h) = (u32::try_from(grid.width()), u32::try_from(grid.height()));
    let (Ok(w), Ok(h)) = (w, h) else {
        return Err(Error::Config("grid dimensions exceed u32".into()));
    };
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&(DESCRIPTOR_LEN as u16).to_le_bytes());
    out.extend_from_slice(&(patch_size as u16).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for v in grid.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let sum = checksum(&out[..20], &out[HEADER_LEN..]);
    out[20..24].copy_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode_grid(path: &Path, bytes: &[u8]) -> Result<(DescriptorGrid, f64)> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            return Err(bad_magic(path, &bytes[..8]));
        }
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(bad_magic(path, &bytes[..8]));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let (w, h, dim, patch, stored) = (u32_at(8), u32_at(12), u16_at(16), u16_at(18), u32_at(20));
    if dim as usize != DESCRIPTOR_LEN {
        return Err(Error::Dimension {
            path: path.to_path_buf(),
            expected: DESCRIPTOR_LEN as u32,
            found: dim as u32,
        });
    }
    let expected = w as u64 * h as u64 * DESCRIPTOR_LEN as u64 * 4;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if expected != found {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let computed = checksum(&bytes[..20], &bytes[HEADER_LEN..]);
    if computed != stored {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: stored,
            found: computed,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((DescriptorGrid::new(w as usize, h as usize, data)?, patch as f64))
}

fn bad_magic(path: &Path, found: &[u8]) -> Error {
    Error::BadMagic {
        path: path.to_path_buf(),
        expected: String::from_utf8_lossy(MAGIC).into_owned(),
        found: String::from_utf8_lossy(found).into_owned(),
    }
}

pub fn write_grid(grid: &DescriptorGrid, patch_size: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_grid(grid, patch_size)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns the grid and its patch size.
pub fn read_grid(path: impl AsRef<Path>) -> Result<(DescriptorGrid, f64)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::ImageBuffer;
    use crate::sift::compute_dense_grid;
    use proptest::prelude::*;

    fn sample_grid(w: usize, h: usize) -> DescriptorGrid {
        let img = ImageBuffer::from_fn(w, h, |i, j| 0.5 + 0.3 * ((i * 7 + j * 3) as f64 * 0.9).sin()).unwrap();
        compute_dense_grid(&img, 15.0).unwrap()
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a(FNV_OFFSET, b""), 0x811c_9dc5);
        assert_eq!(fnv1a(FNV_OFFSET, b"a"), 0xe40c_292c);
        assert_eq!(fnv1a(FNV_OFFSET, b"foobar"), 0xbf9c_f968);
    }

    #[test]
    fn four_by_four_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.dgrid");
        write_grid(&sample_grid(4, 4), 15.0, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 8216);
    }

    #[test]
    fn roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.dgrid");
        let grid = sample_grid(6, 5);
        write_grid(&grid, 15.0, &path).unwrap();
        let (back, patch) = read_grid(&path).unwrap();
        assert_eq!(patch, 15.0);
        assert_eq!((back.width(), back.height()), (6, 5));
        for (a, b) in back.data().iter().zip(grid.data()) {
            assert_eq!(*a, *b as f32 as f64);
            assert!((a - b).abs() <= 1.2e-7 * b.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn header_fields_are_little_endian() {
        let bytes = encode_grid(&sample_grid(3, 2), 15.0).unwrap();
        assert_eq!(&bytes[..8], b"DGRID001");
        assert_eq!(&bytes[8..20], &[3, 0, 0, 0, 2, 0, 0, 0, 128, 0, 15, 0]);
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let path = Path::new("mem");
        let bytes = encode_grid(&sample_grid(2, 2), 15.0).unwrap();
        for i in 0..bytes.len() {
            for flip in [0x01u8, 0x80] {
                let mut b = bytes.clone();
                b[i] ^= flip;
                assert!(decode_grid(path, &b).is_err(), "byte {i} flip {flip:#x} undetected");
            }
        }
        let mut b = bytes.clone();
        b[HEADER_LEN + 5] ^= 0x10;
        assert!(matches!(decode_grid(path, &b), Err(Error::Checksum { .. })));
    }

    #[test]
    fn distinct_error_kinds() {
        let path = Path::new("mem");
        let bytes = encode_grid(&sample_grid(2, 2), 15.0).unwrap();
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_grid(path, &magic), Err(Error::BadMagic { .. })));
        let mut dim = bytes.clone();
        dim[16] = 64;
        assert!(matches!(
            decode_grid(path, &dim),
            Err(Error::Dimension { expected: 128, found: 64, .. })
        ));
        for cut in [0, 10, HEADER_LEN, bytes.len() - 1] {
            assert!(matches!(decode_grid(path, &bytes[..cut]), Err(Error::PayloadLength { .. })));
        }
    }

    #[test]
    fn constant_image_payload_is_zero_and_deterministic() {
        let img = ImageBuffer::constant(5, 4, 0.3).unwrap();
        let grid = compute_dense_grid(&img, 15.0).unwrap();
        let a = encode_grid(&grid, 15.0).unwrap();
        assert!(a[HEADER_LEN..].iter().all(|&b| b == 0));
        assert_eq!(a, encode_grid(&compute_dense_grid(&img, 15.0).unwrap(), 15.0).unwrap());
    }

    #[test]
    fn fractional_patch_size_rejected() {
        assert!(matches!(encode_grid(&sample_grid(2, 2), 7.5), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_payload_roundtrips(w in 1usize..4, h in 1usize..4, seed in any::<u64>()) {
            let data: Vec<f64> = (0..w * h * DESCRIPTOR_LEN)
                .map(|k| ((seed.wrapping_add(k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40) as f64) / (1u64 << 24) as f64)
                .collect();
            let grid = DescriptorGrid::new(w, h, data.clone()).unwrap();
            let bytes = encode_grid(&grid, 9.0).unwrap();
            let (back, patch) = decode_grid(Path::new("mem"), &bytes).unwrap();
            prop_assert_eq!(patch, 9.0);
            for (a, b) in back.data().iter().zip(&data) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
