//! Flat binary tensor files: raw little-endian `f64` values, no header.
//! Shapes live in a JSON index written next to them.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub fn encode(values: &[f64], out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + values.len() * 8, 0);
    LittleEndian::write_f64_into(values, &mut out[start..]);
}

pub fn decode(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::format(format!("{} bytes is not a whole number of f64 values", bytes.len())));
    }
    let mut values = vec![0.0; bytes.len() / 8];
    LittleEndian::read_f64_into(bytes, &mut values);
    Ok(values)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    encode(t.data(), &mut bytes);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let values = decode(&bytes)?;
    if values.len() != numel(shape) {
        return Err(Error::format(format!(
            "{} holds {} values, expected shape {shape:?}",
            path.display(),
            values.len()
        )));
    }
    Tensor::new(shape.to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let p = dir.path().join("t.f64");
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p, &[2, 2]).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert!(read_tensor(&p, &[3]).is_err());
    }
}
