//! Binary tensor archive.
//!
//! Layout: magic `LCNT`, little-endian `u32` version, then records until end of
//! file: `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCNT";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Checkpoint(format!("truncated while reading {what}")),
        _ => TensorError::Io(e),
    })
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact_or(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(TensorError::Version { found: version, expected: VERSION });
    }
    let mut out = Vec::new();
    loop {
        // A clean end of file is only allowed at a record boundary.
        let mut first = [0u8; 1];
        if r.read(&mut first)? == 0 {
            break;
        }
        word[0] = first[0];
        read_exact_or(&mut r, &mut word[1..], "name length")?;
        let name_len = u32::from_le_bytes(word) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        read_exact_or(&mut r, &mut word, "rank")?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut dim = [0u8; 8];
        for _ in 0..rank {
            read_exact_or(&mut r, &mut dim, "dims")?;
            shape.push(u64::from_le_bytes(dim) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact_or(&mut r, &mut payload, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_store(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = store
        .iter()
        .map(|(_, name, t)| (name.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid")))
        .collect();
    let file = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(file), &tensors)
}

/// Loads values into an existing store whose names and shapes must match.
pub fn load_store(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let tensors = read_tensors(std::io::BufReader::new(file))?;
    store.load_values(tensors)
}
