//! Binary PGM images, `VOL1` volumes and `PGMM1` model files.
//!
//! `VOL1` layout: the magic `VOL1`, the extents `nx ny nz` and a dtype code
//! (`0` f32, `1` f64, `2` u8, `3` u16) as little-endian `u32`, then the
//! samples, little-endian, `x` fastest.
//!
//! `PGMM1` layout: the line `PGMM1`, one header line of `key=value` pairs
//! (`kind K n d sigma q tau dims`), then little-endian `f64`: the weights,
//! and per component `U` (row-major, `n x d`), `b`, `mu`, `Sigma`
//! (row-major). Plain GMM files omit `U` and `b`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gmm::GmmParams;
use crate::image::Image;
use crate::linalg::{Matrix, SpdMatrix, StiefelPoint, Vector};
use crate::patches::PatchGeometry;
use crate::pcagmm::{PcaComponent, PcaGmmModel};
use crate::superres::Mixture;

const VOL_MAGIC: &[u8; 4] = b"VOL1";
const MODEL_MAGIC: &[u8; 6] = b"PGMM1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeDtype {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    U16 = 3,
}

impl VolumeDtype {
    fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => Self::F32,
            1 => Self::F64,
            2 => Self::U8,
            3 => Self::U16,
            _ => return Err(Error::CorruptHeader(format!("unknown dtype code {code}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
            Self::U16 => 2,
        }
    }
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads a `.pgm` image or a `.vol` volume.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    match extension(path).as_str() {
        "pgm" => decode_pgm(&bytes),
        "vol" => decode_volume(&bytes),
        other => Err(Error::UnsupportedFormat(format!("unknown image extension {other:?}"))),
    }
}

/// Writes 2-D images as 16-bit PGM and 3-D images as f64 volumes.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let bytes = match (extension(path).as_str(), image.ndim()) {
        ("pgm", 2) => encode_pgm(image, 16),
        ("vol", 3) => encode_volume(image, VolumeDtype::F64),
        (ext, n) => {
            return Err(Error::UnsupportedFormat(format!("cannot write a {n}-D image as {ext:?}")))
        }
    };
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses a binary (P5) PGM. Samples are scaled by the maximum value;
/// 16-bit samples are big-endian as in the Netpbm definition.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::CorruptHeader("PGM header ends early".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::UnsupportedFormat(format!("expected binary PGM (P5), got {magic:?}")));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| Error::CorruptHeader(format!("bad PGM {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::CorruptHeader(format!("bad PGM header {width}x{height}, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the samples
    let start = pos + 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let len = width * height;
    if bytes.len() < start + len * bps {
        return Err(Error::CorruptHeader("PGM payload is truncated".into()));
    }
    let payload = &bytes[start..start + len * bps];
    let scale = 1.0 / maxval as f64;
    let data = if bps == 1 {
        payload.iter().map(|&v| v as f64 * scale).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    };
    Image::new(vec![height, width], data)
}

/// Clips to `[0, 1]` and quantizes to 8 or 16 bits.
pub fn encode_pgm(image: &Image, bits: u32) -> Vec<u8> {
    assert!(image.ndim() == 2 && (bits == 8 || bits == 16));
    let maxval: u32 = (1 << bits) - 1;
    let (h, w) = (image.dims()[0], image.dims()[1]);
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u16;
        if bits == 8 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 20 || &bytes[..4] != VOL_MAGIC {
        return Err(Error::UnsupportedFormat("missing VOL1 magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (nx, ny, nz) = (word(0), word(1), word(2));
    let dtype = VolumeDtype::from_code(word(3) as u32)?;
    let len = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| Error::CorruptHeader("volume extents overflow".into()))?;
    let payload = &bytes[20..];
    if payload.len() != len * dtype.size() {
        return Err(Error::CorruptHeader(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            len * dtype.size()
        )));
    }
    let data: Vec<f64> = match dtype {
        VolumeDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        VolumeDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        VolumeDtype::U8 => payload.iter().map(|&v| v as f64 / 255.0).collect(),
        VolumeDtype::U16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
    };
    Image::new(vec![nz, ny, nx], data)
}

/// Integer dtypes clip to `[0, 1]` before quantization; float dtypes store
/// the samples as they are.
pub fn encode_volume(image: &Image, dtype: VolumeDtype) -> Vec<u8> {
    assert_eq!(image.ndim(), 3);
    let d = image.dims();
    let mut out = Vec::with_capacity(20 + image.len() * dtype.size());
    out.extend_from_slice(VOL_MAGIC);
    for v in [d[2], d[1], d[0], dtype as usize] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in image.data() {
        match dtype {
            VolumeDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            VolumeDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            VolumeDtype::U8 => out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8),
            VolumeDtype::U16 => {
                out.extend_from_slice(&((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_le_bytes())
            }
        }
    }
    out
}

/// A trained mixture together with the patch geometry it was trained on.
#[derive(Clone, Debug)]
pub struct ModelFile {
    pub model: Mixture,
    pub geometry: Option<PatchGeometry>,
}

impl ModelFile {
    /// The `key=value` header line, without the trailing newline.
    pub fn header(&self) -> String {
        let (kind, n, d, sigma) = match &self.model {
            Mixture::Gmm(g) => ("gmm", g.dim(), g.dim(), 0.0),
            Mixture::PcaGmm(m) => ("pcagmm", m.n(), m.d(), m.sigma),
        };
        let (q, tau, dims) = self.geometry.map_or((0, 0, 0), |g| (g.q, g.tau, g.dims));
        format!(
            "kind={kind} K={} n={n} d={d} sigma={sigma:?} q={q} tau={tau} dims={dims}",
            self.model.n_components()
        )
    }
}

pub fn encode_model(file: &ModelFile) -> Vec<u8> {
    let mut out = MODEL_MAGIC.to_vec();
    out.extend_from_slice(file.header().as_bytes());
    out.push(b'\n');
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    let row_major = |m: &Matrix, put: &mut dyn FnMut(f64)| {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                put(m[(i, j)]);
            }
        }
    };
    match &file.model {
        Mixture::Gmm(g) => {
            g.alpha.iter().for_each(|&a| put(a));
            for (mu, s) in g.mu.iter().zip(&g.sigma) {
                mu.iter().for_each(|&v| put(v));
                row_major(s.matrix(), &mut put);
            }
        }
        Mixture::PcaGmm(m) => {
            m.alpha.iter().for_each(|&a| put(a));
            for c in &m.components {
                row_major(c.u.matrix(), &mut put);
                c.b.iter().for_each(|&v| put(v));
                c.mu.iter().for_each(|&v| put(v));
                row_major(c.cov.matrix(), &mut put);
            }
        }
    }
    out
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Io(_) | Error::CorruptHeader(_) | Error::VersionMismatch(_) => e,
        other => Error::CorruptHeader(other.to_string()),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < MODEL_MAGIC.len() {
        return Err(Error::CorruptHeader("file too short".into()));
    }
    if &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..MODEL_MAGIC.len()]).trim_end().to_string();
        return Err(Error::VersionMismatch(format!("expected PGMM1, found {found:?}")));
    }
    let rest = &bytes[MODEL_MAGIC.len()..];
    let eol = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptHeader("unterminated header".into()))?;
    let header = std::str::from_utf8(&rest[..eol]).map_err(|_| Error::CorruptHeader("header is not UTF-8".into()))?;
    let field = |key: &str| -> Result<&str> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .ok_or_else(|| Error::CorruptHeader(format!("header lacks {key}")))
    };
    let int = |key: &str| -> Result<usize> {
        field(key)?.parse().map_err(|_| Error::CorruptHeader(format!("bad {key}")))
    };
    let kind = field("kind")?;
    let (k, n, d) = (int("K")?, int("n")?, int("d")?);
    let sigma: f64 = field("sigma")?.parse().map_err(|_| Error::CorruptHeader("bad sigma".into()))?;
    let (q, tau, dims) = (int("q")?, int("tau")?, int("dims")?);
    if k == 0 || n == 0 || d == 0 || d > n {
        return Err(Error::CorruptHeader(format!("bad sizes K={k} n={n} d={d}")));
    }

    let payload = &rest[eol + 1..];
    let per_component = match kind {
        "gmm" => n + n * n,
        "pcagmm" => n * d + n + d + d * d,
        other => return Err(Error::CorruptHeader(format!("unknown kind {other:?}"))),
    };
    let expected = k
        .checked_mul(per_component + 1)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::CorruptHeader("sizes overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::CorruptHeader(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |len: usize| -> Vec<f64> { values.by_ref().take(len).collect() };
    let alpha = take(k);
    let model = if kind == "gmm" {
        let mut mu = Vec::with_capacity(k);
        let mut sigma_k = Vec::with_capacity(k);
        for _ in 0..k {
            mu.push(Vector::from_vec(take(n)));
            sigma_k.push(SpdMatrix::new(Matrix::from_row_slice(n, n, &take(n * n))).map_err(corrupt)?);
        }
        Mixture::Gmm(GmmParams::new(alpha, mu, sigma_k).map_err(corrupt)?)
    } else {
        let mut comps = Vec::with_capacity(k);
        for _ in 0..k {
            let u = StiefelPoint::new(Matrix::from_row_slice(n, d, &take(n * d))).map_err(corrupt)?;
            let b = Vector::from_vec(take(n));
            let mu = Vector::from_vec(take(d));
            let cov = SpdMatrix::new(Matrix::from_row_slice(d, d, &take(d * d))).map_err(corrupt)?;
            comps.push(PcaComponent { u, b, mu, cov });
        }
        Mixture::PcaGmm(PcaGmmModel::new(sigma, alpha, comps).map_err(corrupt)?)
    };
    let geometry = if q == 0 && tau == 0 && dims == 0 {
        None
    } else {
        Some(PatchGeometry::new(tau, q, dims).map_err(corrupt)?)
    };
    Ok(ModelFile { model, geometry })
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_model(file))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    decode_model(&fs::read(path)?)
}
