//! Binary checkpoint format.
//!
//! ```text
//! b"MOGE" | version: u32 LE | manifest length: u64 LE | manifest (UTF-8) | tensor data
//! ```
//!
//! The manifest is line oriented. `meta <key> <value>` lines carry the
//! router and architecture settings; `tensor <name> <shape> <offset>` lines
//! list every tensor with its shape (`400x784`, `64`) and byte offset into
//! the data section. Tensor data is little-endian `f64`, in manifest order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, ModelDims, ModelParams};
use crate::router::{RouterConfig, RoutingMode};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOGE";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &ModelParams, router: &RouterConfig) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, router)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, RouterConfig)> {
    let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut BufReader::new(f))
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &ModelParams, router: &RouterConfig) -> Result<()> {
    let d = model.dims;
    let mut manifest = String::new();
    for (k, v) in [
        ("experts", router.n_experts.to_string()),
        ("k", router.k.to_string()),
        ("mode", router.mode.to_string()),
        ("input", d.input.to_string()),
        ("hidden", d.hidden.to_string()),
        ("output", d.output.to_string()),
        ("classes", d.classes.to_string()),
        ("activation", model.activation.name().to_string()),
    ] {
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let tensors = model.tensors();
    let mut offset = 0u64;
    for t in &tensors {
        let shape: Vec<String> = t.shape.iter().map(|s| s.to_string()).collect();
        manifest.push_str(&format!("tensor {} {} {}\n", t.name, shape.join("x"), offset));
        offset += 8 * t.data.len() as u64;
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    let mut buf = Vec::with_capacity(1 << 16);
    for t in &tensors {
        for chunk in t.data.chunks(8192) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelParams, RouterConfig)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:02x?}, expected \"MOGE\"")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(bad(format!("implausible manifest length {len}")));
    }
    let mut manifest = vec![0u8; len as usize];
    r.read_exact(&mut manifest).map_err(|_| bad("truncated manifest"))?;
    let manifest = String::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;

    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    for line in manifest.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["meta", k, v] => {
                meta.insert(k.to_string(), v.to_string());
            }
            ["tensor", name, shape, offset] => {
                let dims = shape
                    .split('x')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape {shape:?} for {name}")))?;
                let offset: u64 = offset.parse().map_err(|_| bad(format!("bad offset for {name}")))?;
                entries.push((name.to_string(), dims, offset));
            }
            [] => {}
            _ => return Err(bad(format!("unreadable manifest line {line:?}"))),
        }
    }
    let get = |k: &str| -> Result<usize> {
        meta.get(k)
            .ok_or_else(|| bad(format!("manifest lacks meta {k}")))?
            .parse()
            .map_err(|_| bad(format!("meta {k} is not a count")))
    };
    let dims = ModelDims {
        input: get("input")?,
        hidden: get("hidden")?,
        output: get("output")?,
        classes: get("classes")?,
    };
    let n = get("experts")?;
    let mode: RoutingMode = meta
        .get("mode")
        .ok_or_else(|| bad("manifest lacks meta mode"))?
        .parse()
        .map_err(|e: Error| bad(e.to_string()))?;
    let router = RouterConfig::new(n, get("k")?, mode).map_err(|e| bad(e.to_string()))?;
    let activation = Activation::from_name(meta.get("activation").map_or("relu", String::as_str))
        .map_err(|e| bad(e.to_string()))?;

    let mut model = ModelParams::zeros(dims, n, activation);
    let expected: Vec<(String, Vec<usize>)> = model.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if expected.len() != entries.len() {
        return Err(bad(format!("expected {} tensors, manifest lists {}", expected.len(), entries.len())));
    }
    let mut offset = 0u64;
    for ((want_name, want_shape), (name, shape, off)) in expected.iter().zip(&entries) {
        if want_name != name || want_shape != shape || *off != offset {
            return Err(bad(format!("manifest entry {name} {shape:?} @{off} does not match model layout")));
        }
        offset += 8 * shape.iter().product::<usize>() as u64;
    }
    let mut buf = vec![0u8; 8 * 8192];
    for t in model.tensors_mut() {
        for chunk in t.data.chunks_mut(8192) {
            let bytes = &mut buf[..8 * chunk.len()];
            r.read_exact(bytes).map_err(|_| bad(format!("truncated tensor data in {}", t.name)))?;
            for (v, b) in chunk.iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
        }
    }
    Ok((model, router))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ModelParams, RouterConfig) {
        let dims = ModelDims {
            input: 6,
            hidden: 3,
            output: 6,
            classes: 2,
        };
        (
            ModelParams::init_with_std(dims, 4, Activation::Tanh, 0.3, 5).unwrap(),
            RouterConfig::new(4, 2, RoutingMode::TopkFirst).unwrap(),
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, r) = toy();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m, &r).unwrap();
        assert_eq!(&bytes[..4], b"MOGE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let (m2, r2) = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(r, r2);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &m2, &r2).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn manifest_lists_offsets() {
        let (m, r) = toy();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m, &r).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        assert!(manifest.contains("tensor gate.weight 4x6 0\n"));
        assert!(manifest.contains("tensor gate.bias 4 192\n"));
        assert!(manifest.contains("meta mode topk_first\n"));
        assert_eq!(bytes.len(), 16 + len + 8 * m.parameter_count());
    }

    #[test]
    fn rejects_corruption() {
        let (m, r) = toy();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m, &r).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        let err = read_checkpoint(&mut wrong.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref s) if s.contains("magic")));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(read_checkpoint(&mut &short[..]), Err(Error::Checkpoint(_))));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(read_checkpoint(&mut ver.as_slice()), Err(Error::Checkpoint(_))));
    }
}
