//! Flat binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      [u8; 4]
//! version    u32
//! header     u32 × n   (n fixed per magic; zero for parameter files)
//! repeated until EOF:
//!   name_len u32
//!   name     [u8; name_len]  (UTF-8)
//!   rows     u64
//!   cols     u64
//!   payload  f64 × rows·cols
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::{NumError, Result, Tensor2};

pub const CONTAINER_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor2)>;

pub fn write_container<W: Write>(
    mut w: W,
    magic: [u8; 4],
    header: &[u32],
    tensors: &[(&str, &Tensor2)],
) -> Result<()> {
    w.write_all(&magic)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    for h in header {
        w.write_all(&h.to_le_bytes())?;
    }
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_container_file(
    path: impl AsRef<Path>,
    magic: [u8; 4],
    header: &[u32],
    tensors: &[(&str, &Tensor2)],
) -> Result<()> {
    let f = File::create(path)?;
    write_container(BufWriter::new(f), magic, header, tensors)
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => NumError::Format(format!("truncated while reading {what}")),
        _ => NumError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads the start of the next record; `None` at a clean end of stream.
fn read_record_start<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut b[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(NumError::Format("truncated record header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

const MAX_NAME: u32 = 4096;
const MAX_ELEMS: u64 = 1 << 32;

pub fn read_container<R: Read>(
    mut r: R,
    magic: [u8; 4],
    header_len: usize,
) -> Result<(Vec<u32>, NamedTensors)> {
    let mut m = [0u8; 4];
    read_exact_or_format(&mut r, &mut m, "magic")?;
    if m != magic {
        return Err(NumError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CONTAINER_VERSION {
        return Err(NumError::Format(format!("unsupported container version {version}")));
    }
    let header = (0..header_len).map(|_| read_u32(&mut r, "header")).collect::<Result<Vec<_>>>()?;
    let mut tensors = Vec::new();
    while let Some(name_len) = read_record_start(&mut r)? {
        if name_len > MAX_NAME {
            return Err(NumError::Format(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        read_exact_or_format(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| NumError::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u64(&mut r, "rows")?;
        let cols = read_u64(&mut r, "cols")?;
        let n = rows.checked_mul(cols).filter(|&n| n <= MAX_ELEMS).ok_or_else(|| {
            NumError::Format(format!("implausible tensor shape {rows}x{cols} for {name}"))
        })?;
        let mut data = Vec::with_capacity(n as usize);
        let mut b = [0u8; 8];
        for _ in 0..n {
            read_exact_or_format(&mut r, &mut b, "payload")?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push((name, Tensor2::new(rows as usize, cols as usize, data)?));
    }
    Ok((header, tensors))
}

pub fn read_container_file(
    path: impl AsRef<Path>,
    magic: [u8; 4],
    header_len: usize,
) -> Result<(Vec<u32>, NamedTensors)> {
    let f = File::open(path)?;
    read_container(BufReader::new(f), magic, header_len)
}
