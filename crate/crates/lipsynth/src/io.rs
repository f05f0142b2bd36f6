//! On-disk formats: raw tensor files, checkpoint archives, WAV audio.
//!
//! Tensor file layout (little-endian throughout):
//!   magic "LTSR" | u16 version=1 | u8 dtype (1=f32, 2=f64) | u8 ndim
//!   | ndim x u64 dims | row-major payload
//!
//! Checkpoint archive layout:
//!   magic "LGCK" | u16 version=1 | u64 manifest_len | manifest JSON
//!   | concatenated f64 tensor payloads
//! The manifest records named tensor entries (shape + byte offset into the
//! payload), an arbitrary JSON config blob, and the SHA-256 of the payload.

use crate::{Error, Result};
use lipsynth_grad::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 4] = b"LTSR";
const CKPT_MAGIC: &[u8; 4] = b"LGCK";

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32,
    F64,
}

fn write_header(w: &mut impl Write, dtype: Dtype, shape: &[usize]) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&[match dtype {
        Dtype::F32 => 1u8,
        Dtype::F64 => 2u8,
    }])?;
    if shape.len() > u8::MAX as usize {
        return Err(Error::format("tensor rank too large"));
    }
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, dtype, t.shape())?;
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(format!("{}: not a tensor file", path.display())));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    if u16::from_le_bytes(buf2) != 1 {
        return Err(Error::format("unsupported tensor version"));
    }
    let mut buf1 = [0u8; 1];
    r.read_exact(&mut buf1)?;
    let dtype = match buf1[0] {
        1 => Dtype::F32,
        2 => Dtype::F64,
        d => return Err(Error::format(format!("unknown dtype tag {d}"))),
    };
    r.read_exact(&mut buf1)?;
    let ndim = buf1[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut buf8 = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut buf8)?;
        shape.push(u64::from_le_bytes(buf8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            let mut buf4 = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf4)?;
                data.push(f32::from_le_bytes(buf4) as f64);
            }
        }
        Dtype::F64 => {
            for _ in 0..n {
                r.read_exact(&mut buf8)?;
                data.push(f64::from_le_bytes(buf8));
            }
        }
    }
    Ok(Tensor::new(&shape, data))
}

#[derive(Serialize, Deserialize, Clone, Debug)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize, Debug)]
struct Manifest {
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// A named-tensor archive with an embedded JSON config. Used for model
/// checkpoints and optimizer state.
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Checkpoint { kind: kind.to_string(), config, tensors: BTreeMap::new() }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: (payload.len() as u64) - offset,
            });
        }
        let manifest = Manifest {
            version: 1,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: entries,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let mjson = serde_json::to_vec(&manifest).map_err(|e| Error::format(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&(mjson.len() as u64).to_le_bytes())?;
        w.write_all(&mjson)?;
        w.write_all(&payload)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::format(format!("{}: not a checkpoint", path.display())));
        }
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        if u16::from_le_bytes(buf2) != 1 {
            return Err(Error::format("unsupported checkpoint version"));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let mlen = u64::from_le_bytes(buf8) as usize;
        let mut mjson = vec![0u8; mlen];
        r.read_exact(&mut mjson)?;
        let manifest: Manifest =
            serde_json::from_slice(&mjson).map_err(|e| Error::format(e.to_string()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if hex(&Sha256::digest(&payload)) != manifest.payload_sha256 {
            return Err(Error::format(format!("{}: payload hash mismatch", path.display())));
        }
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let start = e.offset as usize;
            let end = start + e.len as usize;
            if end > payload.len() || e.len % 8 != 0 {
                return Err(Error::format("corrupt tensor entry"));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.len() != e.shape.iter().product::<usize>() {
                return Err(Error::format(format!("{}: shape/payload mismatch", e.name)));
            }
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, data));
        }
        Ok(Checkpoint { kind: manifest.kind, config: manifest.config, tensors })
    }
}

/// SHA-256 of a file, hex-encoded. Perceptual checkpoints are referenced by
/// path plus this hash.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut f, &mut hasher)?;
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a mono waveform from a WAV file (stereo is averaged, integer
/// formats are scaled to [-1, 1]). Returns (samples, sample_rate).
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let mut reader =
        hound::WavReader::open(path.as_ref()).map_err(|e| Error::format(e.to_string()))?;
    let spec = reader.spec();
    let chans = spec.channels as usize;
    let mut mono = Vec::new();
    match spec.sample_format {
        hound::SampleFormat::Float => {
            let mut frame = Vec::with_capacity(chans);
            for s in reader.samples::<f32>() {
                frame.push(s.map_err(|e| Error::format(e.to_string()))? as f64);
                if frame.len() == chans {
                    mono.push(frame.iter().sum::<f64>() / chans as f64);
                    frame.clear();
                }
            }
        }
        hound::SampleFormat::Int => {
            let scale = ((1u64 << (spec.bits_per_sample - 1)) as f64).recip();
            let mut frame = Vec::with_capacity(chans);
            for s in reader.samples::<i32>() {
                frame.push(s.map_err(|e| Error::format(e.to_string()))? as f64 * scale);
                if frame.len() == chans {
                    mono.push(frame.iter().sum::<f64>() / chans as f64);
                    frame.clear();
                }
            }
        }
    }
    if mono.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite samples in WAV"));
    }
    Ok((mono, spec.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer =
        hound::WavWriter::create(path.as_ref(), spec).map_err(|e| Error::format(e.to_string()))?;
    for &s in samples {
        writer.write_sample(s as f32).map_err(|e| Error::format(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::format(e.to_string()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let s = std::fs::read_to_string(path.as_ref())?;
    serde_json::from_str(&s).map_err(|e| {
        Error::format(format!("{}: {e}", path.as_ref().display()))
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// [3, H, W] frame in [0, 1] -> 8-bit RGB PNG.
pub fn write_png(path: impl AsRef<Path>, frame: &Tensor) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("write_png expects a [3, H, W] frame"));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = frame.data();
    let mut bytes = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(to_u8(d[c * plane + i]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| Error::format(e.to_string()))
}

/// RGB image file -> [3, H, W] tensor in [0, 1].
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref())
        .map_err(|e| Error::format(format!("{}: {e}", path.as_ref().display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

/// [T, 3, H, W] video in [0, 1] -> looping GIF at the given frame rate.
pub fn write_gif(path: impl AsRef<Path>, frames: &Tensor, fps: f64) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 || fps <= 0.0 {
        return Err(Error::invalid("write_gif expects [T, 3, H, W] frames and fps > 0"));
    }
    let (t, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let file = File::create(path.as_ref())?;
    let mut enc = GifEncoder::new(BufWriter::new(file));
    enc.set_repeat(Repeat::Infinite).map_err(|e| Error::format(e.to_string()))?;
    let delay = image::Delay::from_numer_denom_ms((1000.0 / fps).round() as u32, 1);
    for k in 0..t {
        let base = k * 3 * plane;
        let mut bytes = Vec::with_capacity(plane * 4);
        for i in 0..plane {
            for c in 0..3 {
                bytes.push(to_u8(frames.data()[base + c * plane + i]));
            }
            bytes.push(255);
        }
        let buf = image::RgbaImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer length matches dimensions");
        let frame = image::Frame::from_parts(buf, 0, 0, delay);
        enc.encode_frame(frame).map_err(|e| Error::format(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_f64() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tensor");
        let t = Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 1e-12, -7.5, 42.0]);
        write_tensor(&p, &t, Dtype::F64).unwrap();
        let r = read_tensor(&p).unwrap();
        assert_eq!(r.shape(), t.shape());
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn tensor_roundtrip_f32_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tensor");
        let t = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]);
        write_tensor(&p, &t, Dtype::F32).unwrap();
        let r = read_tensor(&p).unwrap();
        for (a, b) in r.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn tensor_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tensor");
        std::fs::write(&p, b"not a tensor").unwrap();
        assert!(read_tensor(&p).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut ck = Checkpoint::new("generator", serde_json::json!({"trunk": 32}));
        ck.tensors.insert("a.w".into(), Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        ck.tensors.insert("b.b".into(), Tensor::new(&[3], vec![-1.0, 0.0, 1.0]));
        ck.save(&p).unwrap();
        let r = Checkpoint::load(&p).unwrap();
        assert_eq!(r.kind, "generator");
        assert_eq!(r.config["trunk"], 32);
        assert_eq!(r.tensors["a.w"].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.tensors["b.b"].shape(), &[3]);

        // flip one payload byte -> load must fail the hash check
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }

    #[test]
    fn png_roundtrip_and_gif_emit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        // values on the 1/255 grid survive the u8 roundtrip exactly
        let frame = Tensor::from_fn(&[3, 4, 5], |i| ((i * 7) % 256) as f64 / 255.0);
        write_png(&p, &frame).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.shape(), frame.shape());
        for (a, b) in back.data().iter().zip(frame.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(write_png(dir.path().join("bad.png"), &Tensor::zeros(&[1, 4, 5])).is_err());

        let video = Tensor::from_fn(&[3, 3, 4, 5], |i| (i % 9) as f64 / 8.0);
        let g = dir.path().join("v.gif");
        write_gif(&g, &video, 25.0).unwrap();
        let bytes = std::fs::read(&g).unwrap();
        assert_eq!(&bytes[..3], b"GIF");
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f64> =
            (0..128).map(|i| (i as f64 * 0.1).sin() * 0.5).collect();
        write_wav(&p, &samples, 51200).unwrap();
        let (r, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 51200);
        assert_eq!(r.len(), samples.len());
        for (a, b) in r.iter().zip(&samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
