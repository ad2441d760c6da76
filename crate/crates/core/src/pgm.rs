//! Binary 16-bit PGM (`P5`, maxval 65535, big-endian samples) label maps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::field::GridDims;

pub fn encode_pgm16<W: Write>(dims: GridDims, labels: &[u32], mut w: W) -> Result<()> {
    if labels.len() != dims.len() {
        return Err(Error::validation("label count does not match dims"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > u16::MAX as u32) {
        return Err(Error::validation(format!(
            "label {bad} does not fit in 16 bits"
        )));
    }
    write!(w, "P5\n{} {}\n65535\n", dims.width, dims.height)?;
    for &l in labels {
        w.write_u16::<BigEndian>(l as u16)?;
    }
    w.flush()?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        let c = b[0] as char;
        if c == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

pub fn decode_pgm16<R: Read>(r: R) -> Result<(GridDims, Vec<u32>)> {
    let mut r = BufReader::new(r);
    if header_token(&mut r)? != "P5" {
        return Err(Error::format("not a binary PGM"));
    }
    let mut num = || -> Result<usize> {
        header_token(&mut r)?
            .parse()
            .map_err(|_| Error::format("bad PGM header number"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 65535 {
        return Err(Error::format(format!("expected 16-bit PGM, maxval {max}")));
    }
    let dims = GridDims::new(w, h)?;
    let mut labels = vec![0u16; dims.len()];
    r.read_u16_into::<BigEndian>(&mut labels)?;
    Ok((dims, labels.into_iter().map(u32::from).collect()))
}

pub fn write_pgm16(path: impl AsRef<Path>, dims: GridDims, labels: &[u32]) -> Result<()> {
    encode_pgm16(dims, labels, BufWriter::new(File::create(path)?))
}

pub fn read_pgm16(path: impl AsRef<Path>) -> Result<(GridDims, Vec<u32>)> {
    decode_pgm16(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dims = GridDims::new(3, 2).unwrap();
        let labels = vec![0, 1, 2, 65535, 7, 0];
        let mut buf = Vec::new();
        encode_pgm16(dims, &labels, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(buf.len(), 13 + 12);
        assert_eq!(decode_pgm16(&buf[..]).unwrap(), (dims, labels));
    }

    #[test]
    fn comments_and_errors() {
        let mut buf = b"P5\n# made by hand\n1 1\n65535\n".to_vec();
        buf.extend([0, 9]);
        assert_eq!(decode_pgm16(&buf[..]).unwrap().1, vec![9]);
        assert!(decode_pgm16(&b"P2\n1 1\n65535\n"[..]).is_err());
        assert!(decode_pgm16(&b"P5\n1 1\n255\n\0"[..]).is_err());
        let dims = GridDims::new(1, 1).unwrap();
        assert!(encode_pgm16(dims, &[70000], Vec::new()).is_err());
    }
}
