//! DST1 tensor files and parameter bundles.
//!
//! Layout of a DST1 file, little-endian, no padding:
//!
//! | bytes   | content                                   |
//! |---------|-------------------------------------------|
//! | 0..4    | ASCII `DST1`                              |
//! | 4       | dtype tag, `0x01` = f32, `0x02` = f64     |
//! | 5..21   | extents B, C, H, W as `u32`               |
//! | 21..    | B·C·H·W reals in row-major order          |
//!
//! A parameter bundle is a directory holding one DST1 file per tensor and a
//! `manifest.txt` with `name=relative-path` lines in the module's fixed order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{Dims, Parameterized, Tensor4};

pub const MAGIC: &[u8; 4] = b"DST1";
pub const HEADER_LEN: usize = 21;
pub const MANIFEST: &str = "manifest.txt";

/// Serializes a tensor in its native precision.
pub fn encode_tensor<T: Scalar>(x: &Tensor4<T>) -> Vec<u8> {
    encode_tensor_as(x, T::DTYPE)
}

/// Serializes a tensor with an explicit payload precision.
pub fn encode_tensor_as<T: Scalar>(x: &Tensor4<T>, dtype: Dtype) -> Vec<u8> {
    let d = x.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + d.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(dtype.tag());
    for e in [d.b, d.c, d.h, d.w] {
        let e = u32::try_from(e).expect("extent exceeds u32");
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in x.data() {
        match dtype {
            Dtype::F32 => (v.to_f64_lossy() as f32).write_le(&mut out),
            Dtype::F64 => v.to_f64_lossy().write_le(&mut out),
        }
    }
    out
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor4<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let dtype = Dtype::from_tag(bytes[4])
        .ok_or_else(|| Error::format(4, format!("unknown dtype tag 0x{:02x}", bytes[4])))?;
    let mut ext = [0usize; 4];
    for (i, e) in ext.iter_mut().enumerate() {
        let at = 5 + 4 * i;
        let raw = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if raw == 0 {
            return Err(Error::format(at, "zero extent"));
        }
        *e = raw as usize;
    }
    let count = ext
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(dtype.size()).map(|bytes| (n, bytes)));
    let (count, payload) = count.ok_or_else(|| Error::format(5, "extent overflow"))?;
    let available = bytes.len() - HEADER_LEN;
    if available < payload {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: expected {payload} bytes, found {available}"),
        ));
    }
    if available > payload {
        return Err(Error::format(HEADER_LEN + payload, "trailing bytes after payload"));
    }
    let body = &bytes[HEADER_LEN..];
    let data: Vec<T> = match dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| T::c(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| T::c(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    };
    debug_assert_eq!(data.len(), count);
    Tensor4::new(Dims::new(ext[0], ext[1], ext[2], ext[3]), data)
}

pub fn save_tensor<T: Scalar>(x: &Tensor4<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tensor(x))?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor4<T>> {
    decode_tensor(&fs::read(path)?)
}

/// Writes every parameter of `params` into `dir` plus the manifest.
pub fn save_bundle<T: Scalar, P: Parameterized<T>>(params: &P, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, t) in params.named() {
        let file = format!("{name}.dst");
        save_tensor(t, dir.join(&file))?;
        manifest.push_str(&format!("{name}={file}\n"));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Parses a manifest into `(name, relative-path)` pairs.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.is_empty() {
            let (name, path) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::format(offset, format!("manifest line without '=': {trimmed}")))?;
            if name.is_empty() || path.is_empty() {
                return Err(Error::format(offset, format!("empty manifest field: {trimmed}")));
            }
            out.push((name.to_string(), path.to_string()));
        }
        offset += line.len();
    }
    Ok(out)
}

/// Reads a bundle into an existing parameter set. Names, order and shapes must
/// match exactly.
pub fn load_bundle<T: Scalar, P: Parameterized<T>>(params: &mut P, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let entries = parse_manifest(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut slots = params.named_mut();
    if entries.len() != slots.len() {
        return Err(Error::Config(format!(
            "bundle lists {} tensors, model expects {}",
            entries.len(),
            slots.len()
        )));
    }
    for ((name, file), (expected, slot)) in entries.iter().zip(slots.iter_mut()) {
        if name != expected {
            return Err(Error::Config(format!("bundle entry '{name}' where '{expected}' was expected")));
        }
        let t: Tensor4<T> = load_tensor(dir.join(file))?;
        if t.dims() != slot.dims() {
            return Err(Error::shape("load_bundle", slot.dims(), t.dims()));
        }
        **slot = t;
    }
    Ok(())
}
