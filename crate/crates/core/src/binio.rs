//! Little-endian primitives shared by the feature and bank file formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    read_exact(r, &mut found, "magic")?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub(crate) fn read_version<R: Read>(r: &mut R, expected: u16) -> Result<()> {
    let found = read_u16(r, "version")?;
    if found != expected {
        return Err(Error::UnsupportedVersion { expected, found });
    }
    Ok(())
}

macro_rules! le_reader {
    ($name:ident, $ty:ty) => {
        pub(crate) fn $name<R: Read>(r: &mut R, what: &'static str) -> Result<$ty> {
            let mut buf = [0u8; std::mem::size_of::<$ty>()];
            read_exact(r, &mut buf, what)?;
            Ok(<$ty>::from_le_bytes(buf))
        }
    };
}

le_reader!(read_u8, u8);
le_reader!(read_u16, u16);
le_reader!(read_u32, u32);
le_reader!(read_u64, u64);

/// Reads `count` f32 values; the whole block is pulled in one read.
pub(crate) fn read_f32s<R: Read>(r: &mut R, count: usize, what: &'static str) -> Result<Vec<f32>> {
    let nbytes = count
        .checked_mul(4)
        .ok_or_else(|| Error::Malformed(format!("{what}: element count overflows")))?;
    let mut bytes = Vec::new();
    r.take(nbytes as u64).read_to_end(&mut bytes)?;
    if bytes.len() != nbytes {
        return Err(Error::Truncated(what));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_bytes<R: Read>(r: &mut R, count: usize, what: &'static str) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    r.take(count as u64).read_to_end(&mut bytes)?;
    if bytes.len() != count {
        return Err(Error::Truncated(what));
    }
    Ok(bytes)
}

/// Fails unless the reader is exhausted.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Malformed("trailing bytes after last record".into())),
    }
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub(crate) fn to_u32(value: usize, what: &'static str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::InvalidParameter(format!("{what} = {value} exceeds u32")))
}
