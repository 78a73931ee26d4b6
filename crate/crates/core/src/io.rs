//! On-disk formats.
//!
//! Tensor file (`.dtt`): magic `DTT1`, one rank byte, `rank` little-endian
//! `u32` extents, then the values as little-endian `f32` in row-major order.
//!
//! Model file: magic `DTPM`, a little-endian `u32` byte length and that many
//! bytes of configuration JSON, a `u32` parameter count, then per parameter
//! a `u32` name length, the UTF-8 name and an embedded tensor record.
//!
//! Descriptor database: `<base>.dtt` holding `[n, N]` descriptors and
//! `<base>.json` holding the `n` ids as a JSON string array.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Tensor, MAX_RANK};

pub const TENSOR_MAGIC: &[u8; 4] = b"DTT1";
pub const MODEL_MAGIC: &[u8; 4] = b"DTPM";

/// Cursor over a byte buffer that reports offsets in its errors.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::Format(format!(
                "truncated {what} at offset {}: need {n} bytes, {remaining} remain",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format(format!(
                "bad magic at offset {at}: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.magic(TENSOR_MAGIC)?;
        let at = self.pos;
        let rank = self.take(1, "rank")?[0] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!(
                "rank {rank} at offset {at} is outside 1..={MAX_RANK}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("extent")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|c| c.checked_mul(4).map(|_| c))
            .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
        let payload = self.take(count * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes at offset {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn push_tensor(out: &mut Vec<u8>, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    push_tensor(&mut out, t.shape(), t.data());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    in_file(path, decode_tensor(&read_bytes(path)?))
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_tensor(t))
}

/// Binary PPM (`P6`, maxval 255) as a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        if fields.len() == 1 && fields[0] != "P6" {
            return Err(Error::Format(format!(
                "unsupported image format {:?}; only binary PPM (P6) is read",
                fields[0]
            )));
        }
    }
    // Exactly one whitespace byte separates the header from the pixels.
    if pos >= bytes.len() {
        return Err(Error::Format("PPM header is missing pixel data".into()));
    }
    pos += 1;
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("invalid PPM {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} is not 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM has a zero extent".into()));
    }
    let plane = width * height;
    let pixels = &bytes[pos..];
    if pixels.len() < 3 * plane {
        return Err(Error::Format(format!(
            "short PPM pixel data: expected {} bytes, found {}",
            3 * plane,
            pixels.len()
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in pixels[..3 * plane].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Quantizes a `[3, H, W]` tensor (clamped to `[0, 1]`) to binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = image.dims("image")?;
    if c != 3 {
        return Err(Error::shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            let v = image.data()[ch * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_image_ppm(path: &Path) -> Result<Tensor> {
    in_file(path, decode_ppm(&read_bytes(path)?))
}

pub fn write_image_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_bytes(path, &encode_ppm(image)?)
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let config = model.config.to_json();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let mut params = Vec::new();
    let mut count = 0u32;
    model.clone().visit_params(&mut |name, shape, values| {
        params.extend_from_slice(&(name.len() as u32).to_le_bytes());
        params.extend_from_slice(name.as_bytes());
        push_tensor(&mut params, shape, values);
        count += 1;
    });
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&params);
    out
}

/// Rebuilds a model from its file image. Every parameter the configuration
/// implies must be present exactly once with the expected shape.
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let len = r.u32("config length")? as usize;
    let config = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| Error::Format("model config is not UTF-8".into()))?;
    let config = ModelConfig::from_json(config)?;
    let count = r.u32("parameter count")?;
    let mut stored: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let t = r.tensor()?;
        if stored.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("parameter {name} appears twice")));
        }
    }
    r.finish()?;

    let mut model = Model::random(&config)?;
    let mut problem = None;
    model.visit_params(&mut |name, shape, values| {
        if problem.is_some() {
            return;
        }
        match stored.remove(name) {
            Some(t) if t.shape() == shape => values.copy_from_slice(t.data()),
            Some(t) => {
                problem = Some(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ))
            }
            None => problem = Some(format!("parameter {name} is missing")),
        }
    });
    if let Some(msg) = problem {
        return Err(Error::Format(msg));
    }
    if let Some(name) = stored.keys().min() {
        return Err(Error::Format(format!("unexpected parameter {name}")));
    }
    Ok(model)
}

pub fn read_model_file(path: &Path) -> Result<Model> {
    in_file(path, decode_model(&read_bytes(path)?))
}

pub fn write_model_file(path: &Path, model: &Model) -> Result<()> {
    write_bytes(path, &encode_model(model))
}

/// `(<base>.dtt, <base>.json)` for a database basename.
pub fn database_paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut dtt = base.as_os_str().to_owned();
    dtt.push(".dtt");
    let mut json = base.as_os_str().to_owned();
    json.push(".json");
    (dtt.into(), json.into())
}

pub fn write_database(base: &Path, descriptors: &Tensor, ids: &[String]) -> Result<()> {
    let [n, _] = descriptors.dims("descriptor database")?;
    if n != ids.len() {
        return Err(Error::shape(format!(
            "{n} descriptors but {} ids",
            ids.len()
        )));
    }
    let (dtt, json) = database_paths(base);
    write_tensor_file(&dtt, descriptors)?;
    write_bytes(&json, (serde_json::to_string_pretty(ids)? + "\n").as_bytes())
}

pub fn read_database(base: &Path) -> Result<(Tensor, Vec<String>)> {
    let (dtt, json) = database_paths(base);
    let descriptors = read_tensor_file(&dtt)?;
    let ids: Vec<String> = serde_json::from_slice(&read_bytes(&json)?)?;
    let [n, _] = descriptors.dims("descriptor database")?;
    if n != ids.len() {
        return Err(Error::Format(format!(
            "{} holds {n} descriptors but {} lists {} ids",
            dtt.display(),
            json.display(),
            ids.len()
        )));
    }
    Ok((descriptors, ids))
}
