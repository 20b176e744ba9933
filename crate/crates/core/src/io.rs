//! Binary volume and checkpoint serialization.
//!
//! `VOL5` layout (little-endian throughout):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VOL5"
//! 4       1     version (currently 1)
//! 5       20    dims: 5 x u32 (n, c, z, y, x)
//! 25      8*N   payload: N = n*c*z*y*x f64 values, row-major, x fastest
//! ```
//!
//! Checkpoints use a `CKPT` header followed by optimizer scalars and a
//! name-sorted table of parameter tensors, each stored as an embedded VOL5
//! record. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::volume::Volume5;

const VOL5_MAGIC: &[u8; 4] = b"VOL5";
const VOL5_VERSION: u8 = 1;
const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u8 = 1;

/// Writes a volume in VOL5 format.
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume5) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    write_volume_to(&mut w, vol)?;
    w.flush()?;
    Ok(())
}

/// Reads a VOL5 file, validating magic, version, dims and payload length.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume5> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);
    let vol = read_volume_from(&mut r)?;
    // Trailing bytes mean the header lied about the payload size.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("trailing bytes after VOL5 payload"));
    }
    Ok(vol)
}

pub fn write_volume_to(w: &mut impl Write, vol: &Volume5) -> Result<()> {
    w.write_all(VOL5_MAGIC)?;
    w.write_all(&[VOL5_VERSION])?;
    for d in vol.shape() {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::format(format!("dimension {d} exceeds u32 range")))?;
        w.write_all(&d32.to_le_bytes())?;
    }
    for v in vol.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_volume_from(r: &mut impl Read) -> Result<Volume5> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != VOL5_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected \"VOL5\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut version = [0u8; 1];
    read_exact_or(r, &mut version, "version")?;
    if version[0] != VOL5_VERSION {
        return Err(Error::format(format!(
            "unsupported VOL5 version {}",
            version[0]
        )));
    }
    let mut shape = [0usize; 5];
    for slot in &mut shape {
        let mut b = [0u8; 4];
        read_exact_or(r, &mut b, "dims")?;
        *slot = u32::from_le_bytes(b) as usize;
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::format(format!("zero dimension in header {shape:?}")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("header dims overflow"))?;
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        read_exact_or(r, &mut buf, "payload")?;
        data.push(f64::from_le_bytes(buf));
    }
    Volume5::from_vec(shape, data).map_err(|e| Error::format(format!("invalid payload: {e}")))
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated {what}")))
}

/// Writes parameters and optimizer state to a `CKPT` file.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    params: &ParamStore,
    opt: &AdamW,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&[CKPT_VERSION])?;
    w.write_all(&opt.step_count().to_le_bytes())?;
    w.write_all(&opt.current_lr().to_le_bytes())?;
    let count = u32::try_from(params.len())
        .map_err(|_| Error::format("too many parameters for checkpoint"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, entry) in params.iter() {
        write_name(&mut w, name)?;
        write_volume_to(&mut w, &entry.value)?;
        let (m, v) = opt.moments(name)?;
        write_volume_to(&mut w, m)?;
        write_volume_to(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a fresh parameter store and optimizer.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, AdamW)> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let mut version = [0u8; 1];
    read_exact_or(&mut r, &mut version, "version")?;
    if version[0] != CKPT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {}",
            version[0]
        )));
    }
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b8, "step count")?;
    let step_count = u64::from_le_bytes(b8);
    read_exact_or(&mut r, &mut b8, "learning rate")?;
    let lr = f64::from_le_bytes(b8);
    let mut b4 = [0u8; 4];
    read_exact_or(&mut r, &mut b4, "parameter count")?;
    let count = u32::from_le_bytes(b4);

    let mut params = ParamStore::new();
    let mut moments = Vec::new();
    for _ in 0..count {
        let name = read_name(&mut r)?;
        let value = read_volume_from(&mut r)?;
        let m = read_volume_from(&mut r)?;
        let v = read_volume_from(&mut r)?;
        params.insert(name.clone(), value)?;
        moments.push((name, m, v));
    }
    let opt = AdamW::from_state(lr, step_count, moments)?;
    Ok((params, opt))
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    let len = u32::try_from(bytes.len())
        .map_err(|_| Error::format("parameter name too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let mut b4 = [0u8; 4];
    read_exact_or(r, &mut b4, "name length")?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut bytes = vec![0u8; len];
    read_exact_or(r, &mut bytes, "name")?;
    String::from_utf8(bytes).map_err(|_| Error::format("parameter name is not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_volume(shape: [usize; 5], seed: u64) -> Volume5 {
        let mut rng = Rng::new(seed);
        let numel: usize = shape.iter().product();
        Volume5::from_vec(shape, (0..numel).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol5");
        let vol = random_volume([1, 1, 4, 4, 4], 3);
        write_volume(&path, &vol).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(vol, back);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.vol5");
        std::fs::write(&path, b"JUNKxxxxxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.vol5");
        let vol = random_volume([1, 1, 1, 2, 5], 9); // header says 10 elements
        let mut bytes = Vec::new();
        write_volume_to(&mut bytes, &vol).unwrap();
        bytes.truncate(bytes.len() - 8); // drop the last element
        std::fs::write(&path, &bytes).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn trailing_garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.vol5");
        let vol = random_volume([1, 1, 1, 1, 3], 4);
        let mut bytes = Vec::new();
        write_volume_to(&mut bytes, &vol).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_volume(&path).is_err());
    }
}
