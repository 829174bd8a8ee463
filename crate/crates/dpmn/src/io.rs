//! Binary PPM images and the parameter checkpoint format.
//!
//! Checkpoint layout, little-endian throughout:
//!
//! ```text
//! "DPMN" | version u32 | count u32 | count x tensor
//! tensor = name_len u16 | name utf-8 | rank u8 | dims u32 x rank | f32 x numel
//! ```

use std::fs;
use std::path::Path;

use anyhow::Context;
use dpmn_core::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DPMN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("not a binary PPM: {0}")]
    Ppm(String),
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("tensor name is not utf-8")]
    Name,
    #[error("tensor name of {0} bytes is too long")]
    NameTooLong(usize),
    #[error("checkpoint has no tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {got:?}, expected {want:?}")]
    Shape { name: String, got: Vec<usize>, want: Vec<usize> },
}

/// 8-bit RGB image as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn from_bytes(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width * 3, "rgb buffer size");
        Self { height, width, data }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        dpmn_core::synth::dequantize(&self.data, &[self.height, self.width, 3])
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        assert!(s.len() == 3 && s[2] == 3, "expected an RGB tensor, got {s:?}");
        Self::from_bytes(s[0], s[1], dpmn_core::synth::quantize(t))
    }
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8, FormatError> {
    let bad = |m: &str| FormatError::Ppm(m.to_string());
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P6") {
        return Err(bad("missing P6 signature"));
    }
    pos += 2;
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator before raster"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != width * height * 3 {
        return Err(bad(&format!("raster has {} bytes, expected {}", raster.len(), width * height * 3)));
    }
    Ok(Rgb8::from_bytes(height, width, raster.to_vec()))
}

pub fn write_ppm(path: &Path, img: &Rgb8) -> anyhow::Result<()> {
    fs::write(path, encode_ppm(img)).with_context(|| format!("writing {}", path.display()))
}

pub fn read_ppm(path: &Path) -> anyhow::Result<Rgb8> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_ppm(&bytes).with_context(|| format!("decoding {}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| FormatError::NameTooLong(name.len()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(FormatError::Truncated(self.pos))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::Magic(magic));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| FormatError::Name)?.to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let values = r
            .take(n.checked_mul(4).ok_or(FormatError::Truncated(r.pos))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

/// Parameters whose name starts with `prefix`, in store order.
pub fn store_tensors<T: Real>(store: &ParamStore<T>, prefix: &str) -> Vec<NamedTensor> {
    store
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            values: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect()
}

/// Overwrites every store parameter starting with `prefix` from `tensors`.
/// Each must be present with a matching shape.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, tensors: &[NamedTensor], prefix: &str) -> Result<usize, FormatError> {
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with(prefix)).collect();
    for &id in &ids {
        let p = store.get_mut(id);
        let t = tensors
            .iter()
            .find(|t| t.name == p.name)
            .ok_or_else(|| FormatError::Missing(p.name.clone()))?;
        if t.shape != p.value.shape() {
            return Err(FormatError::Shape {
                name: p.name.clone(),
                got: t.shape.clone(),
                want: p.value.shape().to_vec(),
            });
        }
        for (dst, &v) in p.value.data_mut().iter_mut().zip(&t.values) {
            *dst = T::from_f64(v as f64);
        }
    }
    Ok(ids.len())
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>, prefix: &str) -> anyhow::Result<()> {
    let bytes = encode_checkpoint(&store_tensors(store, prefix))?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_checkpoint(path: &Path) -> anyhow::Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode_checkpoint(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Manifest path next to a checkpoint: `x.ckpt` -> `x.ckpt.manifest`.
pub fn manifest_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".manifest");
    s.into()
}
