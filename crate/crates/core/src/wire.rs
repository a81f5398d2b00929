//! Little-endian helpers shared by the binary file formats.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)
}

pub(crate) fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(eof)?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(Error::Format(format!("unsupported version {v}, expected {version}")));
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(eof)
}

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    r.read_u8().map_err(eof)
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> io::Result<()> {
    for &v in values {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> Result<()> {
    r.read_f64_into::<LittleEndian>(out).map_err(eof)
}

pub(crate) fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Format(format!("{what} = {value} does not fit in u32")))
}

/// Maps a short read onto a format error; other I/O errors pass through.
pub(crate) fn eof(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}
