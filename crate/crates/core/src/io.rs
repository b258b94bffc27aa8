//! On-disk formats: network checkpoints (`KSNET`), dense matrices (`KSMAT`)
//! with JSON sidecars, 16-bit PGM magnitude images, and atomic writes.
//!
//! Binary containers are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::ExtendedColorType;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Model, Network, NetworkConfig};
use crate::spectral::SpectrumSnapshot;

pub const KSNET_MAGIC: &[u8; 6] = b"KSNET\0";
pub const KSMAT_MAGIC: &[u8; 6] = b"KSMAT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Suffix of files still being written.
pub const PARTIAL_SUFFIX: &str = ".partial";

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(PARTIAL_SUFFIX);
    path.with_file_name(name)
}

/// Writes `bytes` to `path.partial`, syncs, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = partial_path(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Sequential little-endian reader over a byte buffer.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated at byte {}", self.pos))),
        }
    }

    fn magic(&mut self, magic: &[u8; 6]) -> Result<()> {
        if self.take(6)? != magic {
            return Err(self.fail("bad magic"));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if v > remaining {
            return Err(self.fail(format!("{what} {v} exceeds file size")));
        }
        Ok(v as usize)
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.fail(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_network(net: &Network) -> Vec<u8> {
    let theta = net.params();
    let mut out = Vec::with_capacity(64 + 8 * theta.len());
    out.extend_from_slice(KSNET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for v in theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let dims = net.config().layer_dims();
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for (fan_in, fan_out) in dims {
        out.extend_from_slice(&(fan_in as u32).to_le_bytes());
        out.extend_from_slice(&(fan_out as u32).to_le_bytes());
    }
    let act = net.activation();
    out.push(act.code());
    out.push(net.config().shortcuts as u8);
    out.extend_from_slice(&act.slope().to_le_bytes());
    out
}

/// Parses a `KSNET` checkpoint. The seed is not stored and comes back as 0.
pub fn decode_network(bytes: &[u8], path: &Path) -> Result<Network> {
    let mut r = Reader::new(bytes, path);
    r.magic(KSNET_MAGIC)?;
    r.version()?;
    let p = r.len("parameter count")?;
    if p.checked_mul(8).is_none_or(|b| b > bytes.len()) {
        return Err(r.fail("parameter count exceeds file size"));
    }
    let mut theta = Vec::with_capacity(p);
    for _ in 0..p {
        theta.push(r.f64()?);
    }
    let layers = r.u32()? as usize;
    let mut dims = Vec::with_capacity(layers.min(1024));
    for _ in 0..layers {
        dims.push((r.u32()? as usize, r.u32()? as usize));
    }
    let code = r.u8()?;
    let shortcuts = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(r.fail(format!("bad shortcut flag {other}"))),
    };
    let slope = r.f64()?;
    r.finish()?;

    let activation = Activation::from_code(code, slope).ok_or_else(|| r.fail(format!("unknown activation code {code}")))?;
    let Some(&(input_dim, _)) = dims.first() else {
        return Err(r.fail("no layers"));
    };
    if dims.last().map(|d| d.1) != Some(1) {
        return Err(r.fail("output layer must have one unit"));
    }
    if dims.windows(2).any(|w| w[0].1 != w[1].0) {
        return Err(r.fail("layer shapes do not chain"));
    }
    let hidden_widths = dims[..dims.len() - 1].iter().map(|d| d.1).collect();
    let config = NetworkConfig::new(input_dim, hidden_widths, activation).with_shortcuts(shortcuts);
    Network::from_params(&config, theta).map_err(|e| r.fail(e.to_string()))
}

pub fn write_network(path: &Path, net: &Network) -> Result<()> {
    atomic_write(path, &encode_network(net))
}

pub fn read_network(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_network(&bytes, path)
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(26 + 8 * m.len());
    out.extend_from_slice(KSMAT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for row in m.row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    let mut r = Reader::new(bytes, path);
    r.magic(KSMAT_MAGIC)?;
    r.version()?;
    let rows = r.u64()?;
    let cols = r.u64()?;
    let count = rows.checked_mul(cols).and_then(|c| c.checked_mul(8));
    if count != Some((bytes.len() - r.pos) as u64) {
        return Err(r.fail(format!("{rows}x{cols} matrix does not match payload size")));
    }
    let mut data = Vec::with_capacity((rows * cols) as usize);
    for _ in 0..rows * cols {
        data.push(r.f64()?);
    }
    Ok(DMatrix::from_row_slice(rows as usize, cols as usize, &data))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    atomic_write(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

/// JSON sidecar of a spectrum file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSidecar {
    pub t: u64,
    #[serde(rename = "N")]
    pub n: usize,
    pub eigenvalues: Vec<f64>,
}

/// `path.json` next to `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

/// Eigenvectors as a `KSMAT` at `path` plus eigenvalues in `path.json`.
pub fn write_spectrum(path: &Path, spec: &SpectrumSnapshot) -> Result<()> {
    write_matrix(path, &spec.eigenvectors)?;
    write_json(
        &sidecar_path(path),
        &SpectrumSidecar {
            t: spec.t,
            n: spec.n(),
            eigenvalues: spec.eigenvalues.iter().copied().collect(),
        },
    )
}

pub fn read_spectrum(path: &Path) -> Result<SpectrumSnapshot> {
    let vectors = read_matrix(path)?;
    let side_path = sidecar_path(path);
    let side: SpectrumSidecar = read_json(&side_path)?;
    if side.n != side.eigenvalues.len() || vectors.nrows() != side.n {
        return Err(Error::Format {
            path: side_path,
            reason: format!(
                "N={} but {} eigenvalues and {} rows",
                side.n,
                side.eigenvalues.len(),
                vectors.nrows()
            ),
        });
    }
    SpectrumSnapshot::from_parts(side.t, DVector::from_vec(side.eigenvalues), vectors)
}

/// JSON sidecar of a PGM image: maps sample values back to magnitudes via
/// `value = min + sample / maxval * (max - min)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub rows: usize,
    pub cols: usize,
    pub maxval: u16,
    pub min: f64,
    pub max: f64,
}

/// 16-bit binary PGM of `m` (row 0 at the top), min-max scaled.
pub fn write_pgm(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    if m.is_empty() {
        return Err(Error::dim("cannot write an empty image"));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: "image values".into(),
            step: None,
        });
    }
    let min = m.min();
    let max = m.max();
    let span = max - min;
    let mut samples = Vec::with_capacity(m.len());
    for row in m.row_iter() {
        for &v in row.iter() {
            let s = if span > 0.0 { (v - min) / span * 65535.0 } else { 0.0 };
            samples.push(s.round() as u16);
        }
    }
    let mut bytes = Vec::new();
    PnmEncoder::new(&mut bytes)
        .with_header(
            GraymapHeader {
                encoding: SampleEncoding::Binary,
                height: m.nrows() as u32,
                width: m.ncols() as u32,
                maxwhite: u16::MAX as u32,
            }
            .into(),
        )
        .encode(&samples[..], m.ncols() as u32, m.nrows() as u32, ExtendedColorType::L16)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    atomic_write(path, &bytes)?;
    write_json(
        &sidecar_path(path),
        &PgmSidecar {
            rows: m.nrows(),
            cols: m.ncols(),
            maxval: u16::MAX,
            min,
            max,
        },
    )
}

/// Reads a grayscale image (PNG or PNM) as intensities in `[0, 1]`.
pub fn read_grayscale(path: &Path) -> Result<DMatrix<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    Ok(DMatrix::from_fn(h as usize, w as usize, |r, c| {
        luma.get_pixel(c as u32, r as u32).0[0] as f64 / 65535.0
    }))
}
