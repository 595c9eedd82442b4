//! Checkpoint container: named tensors in one binary file.
//!
//! Layout, all integers little endian:
//!   magic "NTC1"
//!   u32 entry count
//!   per entry, in ascending name order:
//!     u32 name length, name bytes (UTF-8)
//!     u8 dtype tag (1 = f64)
//!     u8 rank, then rank x u32 dims
//!     dims product x f64 values
//!
//! Sorted names make writes deterministic: the same parameters produce the
//! same bytes. Sections (backbone vs. prompt bank vs. classifier) are name
//! prefixes like "backbone/".

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Parameter;

const MAGIC: &[u8; 4] = b"NTC1";
const DTYPE_F64: u8 = 1;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn write_checkpoint(path: &Path, entries: &BTreeMap<String, Parameter>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, p) in entries {
        let expect: usize = p.shape.iter().product();
        if expect != p.data.len() {
            return Err(CheckpointError::Malformed(format!(
                "`{name}`: shape {:?} holds {expect} values, data has {}",
                p.shape,
                p.data.len()
            )));
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64, p.shape.len() as u8])?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Parameter>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(CheckpointError::Malformed(format!("name length {name_len} is absurd")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
        let mut tag = [0u8; 2];
        r.read_exact(&mut tag)?;
        if tag[0] != DTYPE_F64 {
            return Err(CheckpointError::Malformed(format!(
                "`{name}`: unknown dtype tag {}",
                tag[0]
            )));
        }
        let rank = tag[1] as usize;
        if rank == 0 || rank > 2 {
            return Err(CheckpointError::Malformed(format!("`{name}`: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        if out.insert(name.clone(), Parameter { shape, data }).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate entry `{name}`")));
        }
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = std::env::temp_dir().join("evplan-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.ntc");

        let mut rng = SeededRng::new(2);
        let mut entries = BTreeMap::new();
        entries.insert("backbone/wte".to_string(), Parameter::randn(&[7, 3], 0.5, &mut rng));
        entries.insert("backbone/lnf.g".to_string(), Parameter::ones(&[3]));
        entries.insert("prompt/atomic/u".to_string(), Parameter::randn(&[5, 4], 0.1, &mut rng));

        write_checkpoint(&path, &entries).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), entries.len());
        for (name, p) in &entries {
            let q = &back[name];
            assert_eq!(q.shape, p.shape, "{name}");
            let bits_match = q.data.iter().zip(p.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(bits_match, "{name}: values drifted");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn writes_are_byte_deterministic() {
        let dir = std::env::temp_dir().join("evplan-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("det1.ntc");
        let p2 = dir.join("det2.ntc");

        let mut rng = SeededRng::new(3);
        let mut entries = BTreeMap::new();
        entries.insert("z".to_string(), Parameter::randn(&[4], 1.0, &mut rng));
        entries.insert("a".to_string(), Parameter::randn(&[2, 2], 1.0, &mut rng));

        write_checkpoint(&p1, &entries).unwrap();
        write_checkpoint(&p2, &entries).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_file(&p1).ok();
        std::fs::remove_file(&p2).ok();
    }

    #[test]
    fn bad_magic_and_truncation_are_reported() {
        let dir = std::env::temp_dir().join("evplan-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();

        let bad = dir.join("bad.ntc");
        std::fs::write(&bad, b"nope").unwrap();
        assert!(matches!(read_checkpoint(&bad), Err(CheckpointError::BadMagic)));

        let trunc = dir.join("trunc.ntc");
        let mut entries = BTreeMap::new();
        entries.insert("w".to_string(), Parameter::ones(&[16]));
        write_checkpoint(&trunc, &entries).unwrap();
        let bytes = std::fs::read(&trunc).unwrap();
        std::fs::write(&trunc, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(read_checkpoint(&trunc), Err(CheckpointError::Io(_))));

        std::fs::remove_file(&bad).ok();
        std::fs::remove_file(&trunc).ok();
    }
}
