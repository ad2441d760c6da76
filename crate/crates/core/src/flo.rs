//! Middlebury `.flo` optical flow files.
//!
//! Layout (all little-endian): the float tag `202021.25` (bytes `PIEH`),
//! `i32` width, `i32` height, then `width * height` interleaved `f32`
//! pairs `(u, v)` in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::field::{GridDims, MotionField, Vec2};

pub const FLO_MAGIC: f32 = 202021.25;
const FLO_TAG: &[u8; 4] = b"PIEH";

// Refuse headers that would make us allocate absurd buffers.
const MAX_SIDE: i32 = 1 << 15;

pub fn decode_flo<R: Read>(mut r: R) -> Result<MotionField> {
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)?;
    if &tag != FLO_TAG {
        return Err(Error::format(format!("bad .flo magic {tag:?}")));
    }
    let w = r.read_i32::<LittleEndian>()?;
    let h = r.read_i32::<LittleEndian>()?;
    if w <= 0 || h <= 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(Error::format(format!("bad .flo dimensions {w}x{h}")));
    }
    let dims = GridDims::new(w as usize, h as usize)?;
    let mut payload = vec![0f32; 2 * dims.len()];
    r.read_f32_into::<LittleEndian>(&mut payload)?;
    let vectors = payload
        .chunks_exact(2)
        .map(|c| Vec2::new(c[0] as f64, c[1] as f64))
        .collect();
    MotionField::from_vec(dims, vectors)
}

pub fn encode_flo<W: Write>(field: &MotionField, mut w: W) -> Result<()> {
    let dims = field.dims();
    if dims.width == 0 || dims.height == 0 {
        return Err(Error::validation("cannot write an empty field"));
    }
    if dims.width > MAX_SIDE as usize || dims.height > MAX_SIDE as usize {
        return Err(Error::validation("field too large for the .flo format"));
    }
    w.write_all(FLO_TAG)?;
    w.write_i32::<LittleEndian>(dims.width as i32)?;
    w.write_i32::<LittleEndian>(dims.height as i32)?;
    for v in field.vectors() {
        w.write_f32::<LittleEndian>(v.x as f32)?;
        w.write_f32::<LittleEndian>(v.y as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<MotionField> {
    decode_flo(BufReader::new(File::open(path)?))
}

pub fn write_flo(field: &MotionField, path: impl AsRef<Path>) -> Result<()> {
    encode_flo(field, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_written_2x1() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        b.extend_from_slice(&2i32.to_le_bytes());
        b.extend_from_slice(&1i32.to_le_bytes());
        for v in [1f32, 0.0, 0.0, 1.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn magic_float_is_pieh() {
        assert_eq!(&FLO_MAGIC.to_le_bytes(), FLO_TAG);
    }

    #[test]
    fn decodes_hand_written_file() {
        let f = decode_flo(&hand_written_2x1()[..]).unwrap();
        assert_eq!(f.dims(), GridDims::new(2, 1).unwrap());
        assert_eq!(f.vectors(), &[Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)]);
    }

    #[test]
    fn altered_magic_is_format_error() {
        let mut b = hand_written_2x1();
        b[0] ^= 0xff;
        assert!(matches!(decode_flo(&b[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let b = hand_written_2x1();
        assert!(matches!(decode_flo(&b[..b.len() - 3]), Err(Error::Io(_))));
    }

    #[test]
    fn non_finite_payload_is_validation_error() {
        let mut b = hand_written_2x1();
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_flo(&b[..]), Err(Error::Validation(_))));
    }

    #[test]
    fn one_pixel_file_is_header_plus_one_pair() {
        let f = MotionField::zeros(GridDims::new(1, 1).unwrap());
        let mut out = Vec::new();
        encode_flo(&f, &mut out).unwrap();
        // tag + width + height + one (u, v) pair
        assert_eq!(out.len(), 4 + 4 + 4 + 8);
    }

    #[test]
    fn reencode_is_byte_identical() {
        let b = hand_written_2x1();
        let mut out = Vec::new();
        encode_flo(&decode_flo(&b[..]).unwrap(), &mut out).unwrap();
        assert_eq!(out, b);
    }
}
