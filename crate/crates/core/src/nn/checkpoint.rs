//! Flat little-endian checkpoint container.
//!
//! ```text
//! magic    8 bytes  "DTLCKPT\0"
//! version  u32
//! input    3 × u32  (C, H, W)
//! width    u32
//! classes  u32
//! groups   u32, then per group: name (u32 len + utf-8), trainable u8, lr f64
//! entries  u32, then per entry: name, kind u8 (0 param, 1 buffer),
//!          rank u32, dims u32 × rank, values f64 × product(dims)
//! ```
//!
//! Encoding is a pure function of the model state, so identical states give
//! identical bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::layers::StateKind;
use crate::nn::model::{build_micro_resnet, Model};

pub const MAGIC: &[u8; 8] = b"DTLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    for d in model.input_shape() {
        w.u32(d);
    }
    w.u32(model.width());
    w.u32(model.num_classes());
    w.u32(model.groups().len());
    for g in model.groups() {
        w.str(&g.name);
        w.0.push(u8::from(g.trainable));
        w.0.extend_from_slice(&g.learning_rate.to_le_bytes());
    }
    let state = model.named_state();
    w.u32(state.len());
    for (name, kind, shape, data) in state {
        w.str(&name);
        w.0.push(match kind {
            StateKind::Param => 0,
            StateKind::Buffer => 1,
        });
        w.u32(shape.len());
        shape.iter().for_each(|&d| w.u32(d));
        for v in data {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-utf8 name".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let input = [r.u32()?, r.u32()?, r.u32()?];
    let width = r.u32()?;
    let classes = r.u32()?;
    let mut model = build_micro_resnet(input, classes, width, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let ngroups = r.u32()?;
    let mut meta = Vec::with_capacity(ngroups);
    for _ in 0..ngroups {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        meta.push((name, trainable, r.f64()?));
    }
    let nentries = r.u32()?;
    let mut entries = Vec::with_capacity(nentries);
    for _ in 0..nentries {
        let name = r.str()?;
        let _kind = r.u8()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        entries.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut it = entries.into_iter();
    model.visit_state_mut(&mut |name, dst, shape| match it.next() {
        Some((n, s, data)) if n == name && s == shape => {
            dst.copy_from_slice(&data);
            Ok(())
        }
        Some((n, s, _)) => Err(Error::Checkpoint(format!("entry `{n}` {s:?} where `{name}` {shape:?} expected"))),
        None => Err(Error::Checkpoint(format!("missing entry `{name}`"))),
    })?;
    if let Some((n, _, _)) = it.next() {
        return Err(Error::Checkpoint(format!("unexpected entry `{n}`")));
    }
    model.set_meta(&meta)?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
