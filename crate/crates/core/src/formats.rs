//! Binary file formats and the PLY writer.
//!
//! All headers are a four-byte magic followed by little-endian `u32` fields.
//!
//! * `SFDM` distance map: version, H, W, then `H·W` `f32` values row-major;
//!   0 marks an invalid pixel.
//! * `SFMF` mesh features: version, mr, channels, then `F·C` `f32` values.
//! * `SFCK` checkpoint: version, count, then per parameter the name length,
//!   UTF-8 name, rank, dims and `f64` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::mesh::face_count;
use crate::projection::PointCloud;
use crate::tensor::{Parameters, Tensor};

pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != magic {
            return Err(Error::Format(format!("not a {what} file")));
        }
        let mut r = Self { bytes, pos: 4, what };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("{what} version {version} unsupported")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated {} file", self.what)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.overflow())?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn overflow(&self) -> Error {
        Error::Format(format!("{} size overflows", self.what))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in {} file",
                self.bytes.len() - self.pos,
                self.what
            )));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4], fields: &[u32]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

fn as_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

/// Equirectangular distance map stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!("{} values for a {height}x{width} map", data.len()));
        }
        Ok(Self { height, width, data })
    }

    /// Rounds `[H, W]` (or `[H, W, 1]`) values to `f32`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w] | [h, w, 1] => Self::new(h, w, t.data().iter().map(|&x| x as f32).collect()),
            ref s => shape_err(format!("expected an [H, W] map, got {s:?}")),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [self.height, self.width],
            self.data.iter().map(|&x| f64::from(x)).collect(),
        )
        .expect("validated size")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = header(
            b"SFDM",
            &[as_u32(self.height, "height")?, as_u32(self.width, "width")?],
        );
        out.extend(self.data.iter().flat_map(|x| x.to_le_bytes()));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, b"SFDM", "SFDM")?;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        let n = h.checked_mul(w).ok_or_else(|| r.overflow())?;
        let data = r.f32s(n)?;
        r.finish()?;
        Self::new(h, w, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }
}

/// Per-face values of one mesh level stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshFeatureFile {
    pub mr: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl MeshFeatureFile {
    pub fn new(mr: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if mr > 15 || data.len() != face_count(mr) * channels {
            return shape_err(format!(
                "{} values for mr {mr} with {channels} channels",
                data.len()
            ));
        }
        Ok(Self { mr, channels, data })
    }

    pub fn from_tensor(mr: usize, t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [_, c] => Self::new(mr, c, t.data().iter().map(|&x| x as f32).collect()),
            ref s => shape_err(format!("expected [F, C] face values, got {s:?}")),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [face_count(self.mr), self.channels],
            self.data.iter().map(|&x| f64::from(x)).collect(),
        )
        .expect("validated size")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = header(
            b"SFMF",
            &[as_u32(self.mr, "mr")?, as_u32(self.channels, "channels")?],
        );
        out.extend(self.data.iter().flat_map(|x| x.to_le_bytes()));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, b"SFMF", "SFMF")?;
        let (mr, c) = (r.u32()? as usize, r.u32()? as usize);
        if mr > 15 {
            return Err(Error::Format(format!("mr {mr} out of range")));
        }
        let n = face_count(mr).checked_mul(c).ok_or_else(|| r.overflow())?;
        let data = r.f32s(n)?;
        r.finish()?;
        Self::new(mr, c, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }
}

pub fn checkpoint_to_bytes(params: &Parameters) -> Result<Vec<u8>> {
    let mut out = header(b"SFCK", &[as_u32(params.len(), "parameter count")?]);
    for (name, t) in params.iter() {
        out.extend_from_slice(&as_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&as_u32(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&as_u32(d, "dimension")?.to_le_bytes());
        }
        out.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Parameters> {
    let mut r = Reader::new(bytes, b"SFCK", "SFCK")?;
    let count = r.u32()?;
    let mut params = Parameters::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.overflow())?;
        let data = r.f64s(n)?;
        params.insert(name, Tensor::new(shape, data)?);
    }
    r.finish()?;
    Ok(params)
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &Parameters) -> Result<()> {
    Ok(fs::write(path, checkpoint_to_bytes(params)?)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Parameters> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// ASCII PLY with `float x y z` and, when colours exist, `uchar red green blue`.
pub fn write_ply(out: &mut impl Write, cloud: &PointCloud) -> Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", cloud.points.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property float {axis}")?;
    }
    if cloud.colors.is_some() {
        for ch in ["red", "green", "blue"] {
            writeln!(out, "property uchar {ch}")?;
        }
    }
    writeln!(out, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        write!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
        if let Some(colors) = &cloud.colors {
            let [r, g, b] = colors[i];
            write!(out, " {r} {g} {b}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_ply(&mut out, cloud)?;
    out.flush()?;
    Ok(())
}

/// Parsed vertices of an ASCII PLY written by [`write_ply`].
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let bad = |m: &str| Error::Format(format!("PLY: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut count = None;
    let mut properties = 0usize;
    for line in lines.by_ref() {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("element") => {
                if words.next() == Some("vertex") {
                    count = words.next().and_then(|n| n.parse::<usize>().ok());
                }
            }
            Some("property") => properties += 1,
            Some("end_header") => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let colored = match properties {
        3 => false,
        6 => true,
        n => return Err(bad(&format!("{n} vertex properties"))),
    };
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::new();
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated body"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != properties {
            return Err(bad(&format!("vertex line {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("number {s:?}")));
        points.push([num(fields[0])?, num(fields[1])?, num(fields[2])?]);
        if colored {
            let byte = |s: &str| s.parse::<u8>().map_err(|_| bad(&format!("colour {s:?}")));
            colors.push([byte(fields[3])?, byte(fields[4])?, byte(fields[5])?]);
        }
    }
    Ok(PointCloud {
        points,
        colors: colored.then_some(colors),
    })
}
