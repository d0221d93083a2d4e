//! Model parameter files: magic `AIRM`, a little-endian `u32` format
//! version, then named f64 arrays.
//!
//! Layout after the 8-byte header, repeated `count` times:
//! `name_len: u32 | name: utf8 | rank: u32 | dims: u32 × rank | data: f64 × numel`,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use air_core::objective::ModelPair;
use air_core::Tensor;

use crate::CliError;

const MAGIC: &[u8; 4] = b"AIRM";
const VERSION: u32 = 1;

pub fn save_model(path: &Path, model: &ModelPair) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let names = model.param_names();
    let params = model.params();
    w.write_all(&(names.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in names.iter().zip(&params) {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes()).map_err(io)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, CliError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(u32::from_le_bytes(b))
}

/// Load parameters into a freshly built model; names and shapes must match
/// the architecture exactly.  A version mismatch is a config error.
pub fn load_model_into(path: &Path, model: &mut ModelPair) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(CliError::Config(format!("{}: not a model file (bad magic)", path.display())));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(CliError::Config(format!(
            "{}: format version {version} unsupported (expected {VERSION})",
            path.display()
        )));
    }
    let count = read_u32(&mut r, path)? as usize;
    let names = model.param_names();
    if count != names.len() {
        return Err(CliError::Config(format!(
            "{}: {count} arrays but the architecture expects {}",
            path.display(),
            names.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for expect_name in &names {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CliError::Config(format!("{}: invalid array name", path.display())))?;
        if &name != expect_name {
            return Err(CliError::Config(format!(
                "{}: array `{name}` does not match expected `{expect_name}`",
                path.display()
            )));
        }
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        for v in &mut data {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            *v = f64::from_le_bytes(b);
        }
        loaded.push(Tensor::new(shape, data));
    }
    {
        let params = model.params();
        for ((t, expect), name) in loaded.iter().zip(&params).zip(&names) {
            if t.shape() != expect.shape() {
                return Err(CliError::Config(format!(
                    "{}: array `{name}` shape {:?} does not match architecture shape {:?}",
                    path.display(),
                    t.shape(),
                    expect.shape()
                )));
            }
        }
    }
    model.set_params(&loaded);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use air_core::nn::{parse_arch, Decoder, Encoder};

    fn model(seed: u64) -> ModelPair {
        let enc = Encoder::build(6, &parse_arch("d4-z2").unwrap(), None, seed).unwrap();
        let dec = Decoder::build(2, &parse_arch("d4-x6").unwrap(), seed + 1).unwrap();
        ModelPair::new(enc, dec).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("air_model_{}.airm", std::process::id()));
        let m = model(3);
        save_model(&path, &m).unwrap();
        let mut fresh = model(99);
        load_model_into(&path, &mut fresh).unwrap();
        for (a, b) in m.params().iter().zip(fresh.params().iter()) {
            assert_eq!(a, b);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn version_mismatch_is_config_error() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("air_model_bad_{}.airm", std::process::id()));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"AIRM");
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let mut m = model(1);
        match load_model_into(&path, &mut m) {
            Err(CliError::Config(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
        std::fs::remove_file(&path).ok();
    }
}
