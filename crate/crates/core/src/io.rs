//! File formats: `.bft` tensors, PGM masks and heatmaps, PPM previews, and
//! the JSON inputs of the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attnctl::Matrix;
use crate::blobgeom::{BlobParams, BlobSpec, Mask};
use crate::denoiser::{embed_description, DenoiserSpec};
use crate::error::{Error, Result};
use crate::eval::EvalCase;
use crate::pipeline::{extract_blobs, Provenance, Scene};
use crate::seed;
use crate::Latent;

const BFT_MAGIC: &[u8; 4] = b"BFT1";
pub const BFT_MAX_RANK: usize = 4;

/// Row-major `f32` tensor as stored in a `.bft` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > BFT_MAX_RANK {
            return Err(Error::InvalidParameter(format!(
                "rank {} exceeds {BFT_MAX_RANK}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidParameter("dimension exceeds u32".into()));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_latent(x: &Latent) -> Self {
        let (h, w, c) = x.dim();
        Tensor {
            dims: vec![h, w, c],
            data: x.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_matrix(x: &Matrix) -> Self {
        let (h, w) = x.dim();
        Tensor {
            dims: vec![h, w],
            data: x.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_latent(&self) -> Result<Latent> {
        let &[h, w, c] = self.dims.as_slice() else {
            return Err(Error::ShapeMismatch(format!(
                "expected a rank-3 latent, got dims {:?}",
                self.dims
            )));
        };
        Ok(Latent::from_shape_vec(
            (h, w, c),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("length checked on construction"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(BFT_MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a `.bft` byte buffer; the error message names the defect.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 5 || &bytes[..4] != BFT_MAGIC {
            return Err("missing BFT1 magic".into());
        }
        let rank = bytes[4] as usize;
        if rank > BFT_MAX_RANK {
            return Err(format!("rank {rank} exceeds {BFT_MAX_RANK}"));
        }
        let header = 5 + 4 * rank;
        if bytes.len() < header {
            return Err("truncated header".into());
        }
        let dims: Vec<usize> = bytes[5..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("dimension product overflows")?;
        let payload = &bytes[header..];
        if Some(payload.len()) != n.checked_mul(4) {
            return Err(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                payload.len(),
                n.saturating_mul(4)
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { dims, data })
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_bft(path: &Path) -> Result<Tensor> {
    Tensor::decode(&read_bytes(path)?).map_err(|m| format_error(path, m))
}

pub fn write_bft(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &t.encode())
}

pub fn read_latent(path: &Path) -> Result<Latent> {
    read_bft(path)?
        .to_latent()
        .map_err(|e| format_error(path, e.to_string()))
}

/// Binary PGM (P5) with the given 8-bit pixels.
fn encode_p5(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let pixels: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_p5(mask.width(), mask.height(), &pixels)
}

/// Parses a P5 graymap; nonzero pixels are `true`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Mask, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        token()?
            .parse::<usize>()
            .map_err(|_| format!("bad {what}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("bad maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    if bytes.len() < start + need {
        return Err(format!(
            "raster is {} bytes, need {need}",
            bytes.len().saturating_sub(start)
        ));
    }
    let raster = &bytes[start..start + need];
    let bits = raster.chunks_exact(bpp).map(|p| p.iter().any(|&b| b != 0)).collect();
    Mask::from_bits(height, width, bits).map_err(|e| e.to_string())
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&read_bytes(path)?).map_err(|m| format_error(path, m))
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write_bytes(path, &encode_pgm(mask))
}

fn rescale(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> u8 {
    let (lo, hi) = values
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    move |v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }
}

/// Heatmap as an 8-bit graymap, linearly rescaled to `[0, 255]`.
pub fn write_heatmap(path: &Path, map: &Matrix) -> Result<()> {
    let (h, w) = map.dim();
    let f = rescale(map.iter().copied());
    let pixels: Vec<u8> = map.iter().map(|&v| f(v)).collect();
    write_bytes(path, &encode_p5(w, h, &pixels))
}

/// RGB preview from the first three channels, each rescaled on its own.
/// Latents with fewer channels repeat the last one.
pub fn encode_preview(x: &Latent) -> Vec<u8> {
    let (h, w, c) = x.dim();
    let chans: Vec<usize> = (0..3).map(|i| i.min(c - 1)).collect();
    let scales: Vec<_> = chans
        .iter()
        .map(|&k| rescale(x.slice(ndarray::s![.., .., k]).iter().copied().collect::<Vec<_>>().into_iter()))
        .collect();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for col in 0..w {
            for (i, &k) in chans.iter().enumerate() {
                out.push(scales[i](x[[r, col, k]]));
            }
        }
    }
    out
}

pub fn write_preview(path: &Path, x: &Latent) -> Result<()> {
    write_bytes(path, &encode_preview(x))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(path.display().to_string(), e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_jsonl<T: Serialize>(path: &Path, lines: &[T]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// One blob entry of a scene file: explicit parameters, or a PGM instance
/// mask to fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<BlobParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub blobs: Vec<BlobEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<PathBuf>,
    pub provenance: Provenance,
}

/// Loads a scene, resolving paths against the scene file's directory.
/// Generated scenes without a latent start from noise seeded by `seed_value`.
pub fn load_scene(path: &Path, spec: &DenoiserSpec, seed_value: u64) -> Result<Scene> {
    let file: SceneFile = read_json(path)?;
    let latent = match &file.latent {
        Some(p) => read_latent(&resolve(path, p))?,
        None if file.provenance == Provenance::Generated => {
            let mut rng = seed::rng(seed_value, "init", 0);
            seed::normal_latent(spec.latent_shape, &mut rng)
        }
        None => return Err(Error::validation("latent", "real scenes need a latent file")),
    };
    if latent.dim() != spec.latent_shape {
        return Err(Error::validation(
            "latent",
            format!("shape {:?} does not match the model's {:?}", latent.dim(), spec.latent_shape),
        ));
    }
    let mut blobs = Vec::with_capacity(file.blobs.len());
    for (i, entry) in file.blobs.iter().enumerate() {
        if entry.description.is_empty() {
            return Err(Error::validation(format!("blobs[{i}].description"), "empty description"));
        }
        let spec_i = match (&entry.params, &entry.mask) {
            (Some(p), None) => BlobSpec {
                params: p
                    .validate()
                    .map(|_| p.canonical())
                    .map_err(|e| Error::validation(format!("blobs[{i}].params"), e.to_string()))?,
                description: entry.description.clone(),
                embedding: embed_description(&entry.description, spec.text_width, spec.seed)?,
            },
            (None, Some(m)) => {
                let mask = read_pgm(&resolve(path, m))?;
                if mask.dims() != (latent.dim().0, latent.dim().1) {
                    return Err(Error::validation(
                        format!("blobs[{i}].mask"),
                        format!("mask {:?} does not match the latent grid", mask.dims()),
                    ));
                }
                extract_blobs(&[mask], std::slice::from_ref(&entry.description), spec.text_width, spec.seed)
                    .map_err(|e| match e {
                        Error::DegenerateMask(m) => {
                            Error::DegenerateMask(m.replacen("mask 0", &format!("blobs[{i}].mask"), 1))
                        }
                        other => other,
                    })?
                    .remove(0)
            }
            _ => {
                return Err(Error::validation(
                    format!("blobs[{i}]"),
                    "needs exactly one of params and mask",
                ))
            }
        };
        blobs.push(spec_i);
    }
    let scene = Scene {
        blobs,
        latent,
        provenance: file.provenance,
    };
    scene.validate()?;
    Ok(scene)
}

/// One line of an evaluation case file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEntry {
    pub source: PathBuf,
    pub edited: PathBuf,
    pub b_s: BlobParams,
    pub b_d: BlobParams,
}

/// Reads a JSON-lines case file; blank lines are ignored.
pub fn load_cases(path: &Path) -> Result<Vec<EvalCase>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cases = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CaseEntry = serde_json::from_str(line)
            .map_err(|e| Error::validation(format!("line {}", n + 1), e.to_string()))?;
        cases.push(EvalCase {
            source: read_latent(&resolve(path, &entry.source))?,
            edited: read_latent(&resolve(path, &entry.edited))?,
            b_s: entry.b_s,
            b_d: entry.b_d,
        });
    }
    Ok(cases)
}
