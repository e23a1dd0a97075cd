//! 3D/4D volumes: single-file NIfTI-1 (`.nii`, uncompressed) and a raw
//! format made of a small text header plus a little-endian float32 payload.
//!
//! Voxels are stored x-fastest, frames outermost, as in NIfTI.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lattice::MaskedLattice;

const HEADER_SIZE: usize = 348;
const NIFTI_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Int16,
    Float32,
    Float64,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            DataType::Int16 => 4,
            DataType::Float32 => 16,
            DataType::Float64 => 64,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            4 => Ok(DataType::Int16),
            16 => Ok(DataType::Float32),
            64 => Ok(DataType::Float64),
            c => Err(Error::Format(format!(
                "datatype: code {c} is not supported (int16 = 4, float32 = 16, float64 = 64)"
            ))),
        }
    }

    fn bytes(self) -> usize {
        match self {
            DataType::Int16 => 2,
            DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// mm.
    pub voxel_size: [f64; 3],
    /// Position of the first voxel, mm.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    /// Type on disk; in memory every volume is f64.
    pub dtype: DataType,
    /// 1 for a 3D volume.
    pub frames: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(geometry: Geometry, frames: usize, data: Vec<f64>) -> Result<Self> {
        let want = geometry.cells() * frames;
        if data.len() != want || frames == 0 {
            return Err(Error::Dimension(format!(
                "volume payload has {} values, dims {:?} × {frames} frames need {want}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Volume {
            geometry,
            dtype: DataType::Float32,
            frames,
            data,
        })
    }

    /// Writes rows of per-voxel values (one row per frame) into a zero volume.
    pub fn from_masked(geometry: Geometry, lattice: &MaskedLattice, rows: &[Vec<f64>]) -> Result<Self> {
        if lattice.dims() != geometry.dims {
            return Err(Error::Dimension(format!(
                "lattice dims {:?} differ from volume dims {:?}",
                lattice.dims(),
                geometry.dims
            )));
        }
        let cells = geometry.cells();
        let mut data = vec![0.0; cells * rows.len()];
        for (f, row) in rows.iter().enumerate() {
            if row.len() != lattice.n_voxels() {
                return Err(Error::Dimension(format!(
                    "frame {f} has {} values for {} voxels",
                    row.len(),
                    lattice.n_voxels()
                )));
            }
            for (v, x) in row.iter().enumerate() {
                data[f * cells + lattice.grid_index(lattice.coord(v))] = *x;
            }
        }
        Volume::new(geometry, rows.len(), data)
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let c = self.geometry.cells();
        &self.data[f * c..(f + 1) * c]
    }

    /// Non-zero, finite voxels of frame 0.
    pub fn to_mask(&self) -> Vec<bool> {
        self.frame(0).iter().map(|&x| x != 0.0 && x.is_finite()).collect()
    }

    pub fn lattice(&self) -> Result<MaskedLattice> {
        MaskedLattice::new(self.geometry.dims, self.geometry.voxel_size, &self.to_mask())
    }

    /// T × N matrix of the in-mask time series.
    pub fn masked_series(&self, lattice: &MaskedLattice) -> Result<DMatrix<f64>> {
        if lattice.dims() != self.geometry.dims {
            return Err(Error::Dimension(format!(
                "mask dims {:?} differ from data dims {:?}",
                lattice.dims(),
                self.geometry.dims
            )));
        }
        let cells = self.geometry.cells();
        Ok(DMatrix::from_fn(self.frames, lattice.n_voxels(), |t, v| {
            self.data[t * cells + lattice.grid_index(lattice.coord(v))]
        }))
    }
}

fn fmt_err(field: &str, reason: impl std::fmt::Display) -> Error {
    Error::Format(format!("{field}: {reason}"))
}

fn is_raw(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "vol")
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    if is_raw(path) {
        return read_raw(path);
    }
    let bytes = fs::read(path)?;
    parse_nifti(&bytes)
}

/// Writes float32. `.vol` selects the raw format, anything else NIfTI-1.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    if is_raw(path) {
        return write_raw(path, vol);
    }
    fs::write(path, nifti_bytes(vol))?;
    Ok(())
}

pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(fmt_err("compression", "gzip-compressed files are not supported"));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(fmt_err("sizeof_hdr", format!("file has only {} bytes", bytes.len())));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_header::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_header::<BigEndian>(bytes)
    } else {
        Err(fmt_err("sizeof_hdr", "expected 348; not a NIfTI-1 file"))
    }
}

fn parse_header<B: ByteOrder>(bytes: &[u8]) -> Result<Volume> {
    if &bytes[344..348] != b"n+1\0" {
        return Err(fmt_err(
            "magic",
            format!("expected \"n+1\", found {:?}", String::from_utf8_lossy(&bytes[344..347])),
        ));
    }
    let dim: Vec<i16> = (0..8).map(|i| B::read_i16(&bytes[40 + 2 * i..])).collect();
    let ndim = dim[0];
    if !(3..=4).contains(&ndim) {
        return Err(fmt_err("dim", format!("{ndim} dimensions; only 3D and 4D volumes are supported")));
    }
    if dim[1..=ndim as usize].iter().any(|&d| d < 1) {
        return Err(fmt_err("dim", format!("non-positive extent in {:?}", &dim[1..=ndim as usize])));
    }
    let dtype = DataType::from_code(B::read_i16(&bytes[70..]))?;
    let bitpix = B::read_i16(&bytes[72..]);
    if bitpix as usize != 8 * dtype.bytes() {
        return Err(fmt_err("bitpix", format!("{bitpix} does not match datatype {dtype:?}")));
    }
    let pixdim: Vec<f32> = (0..8).map(|i| B::read_f32(&bytes[76 + 4 * i..])).collect();
    let vox_offset = B::read_f32(&bytes[108..]);
    let slope = B::read_f32(&bytes[112..]) as f64;
    let inter = B::read_f32(&bytes[116..]) as f64;
    let origin = [268, 272, 276].map(|o| B::read_f32(&bytes[o..]) as f64);

    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let frames = if ndim == 4 { dim[4] as usize } else { 1 };
    let voxel_size = [1, 2, 3].map(|i| {
        let p = pixdim[i].abs() as f64;
        if p > 0.0 {
            p
        } else {
            1.0
        }
    });
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(fmt_err("vox_offset", format!("{vox_offset} is not a valid data offset")));
    }
    let start = vox_offset as usize;
    let count = dims.iter().product::<usize>() * frames;
    let end = start + count * dtype.bytes();
    if bytes.len() < end {
        return Err(fmt_err("dim", format!("payload needs {end} bytes, file has {}", bytes.len())));
    }
    let mut rdr = Cursor::new(&bytes[start..end]);
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(match dtype {
            DataType::Int16 => rdr.read_i16::<B>()? as f64,
            DataType::Float32 => rdr.read_f32::<B>()? as f64,
            DataType::Float64 => rdr.read_f64::<B>()?,
        });
    }
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        for x in data.iter_mut() {
            *x = slope * *x + inter;
        }
    }
    Ok(Volume {
        geometry: Geometry {
            dims,
            voxel_size,
            origin,
        },
        dtype,
        frames,
        data,
    })
}

pub fn nifti_bytes(vol: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_OFFSET];
    let g = &vol.geometry;
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    let ndim: i16 = if vol.frames > 1 { 4 } else { 3 };
    let dim = [ndim, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, vol.frames as i16, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], DataType::Float32.code());
    LittleEndian::write_i16(&mut h[72..], 32);
    let pixdim = [1.0, g.voxel_size[0], g.voxel_size[1], g.voxel_size[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p as f32);
    }
    LittleEndian::write_f32(&mut h[108..], NIFTI_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    // mm and seconds
    h[123] = 2 | 8;
    // qform: identity rotation, offset at the origin
    LittleEndian::write_i16(&mut h[252..], 1);
    for (i, o) in g.origin.iter().enumerate() {
        LittleEndian::write_f32(&mut h[268 + 4 * i..], *o as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(vol.data.len() * 4);
    for x in &vol.data {
        h.write_f32::<LittleEndian>(*x as f32).unwrap();
    }
    h
}

fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("f32")
}

/// Header lines `key value...`; the payload sits next to it as `<stem>.f32`.
fn write_raw(path: &Path, vol: &Volume) -> Result<()> {
    let g = &vol.geometry;
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let header = format!(
        "dims {} {} {}\nframes {}\nvoxel_size {}\norigin {}\ndtype float32\n",
        g.dims[0],
        g.dims[1],
        g.dims[2],
        vol.frames,
        join(&g.voxel_size),
        join(&g.origin)
    );
    fs::write(path, header)?;
    let mut buf = Vec::with_capacity(vol.data.len() * 4);
    for x in &vol.data {
        buf.write_f32::<LittleEndian>(*x as f32)?;
    }
    fs::write(payload_path(path), buf)?;
    Ok(())
}

fn read_raw(path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(path)?;
    let mut dims = None;
    let mut frames = 1usize;
    let mut voxel_size = [1.0; 3];
    let mut origin = [0.0; 3];
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default();
        let vals: Vec<&str> = it.collect();
        let nums = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = vals
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| fmt_err(key, e))?;
            if v.len() != n {
                return Err(fmt_err(key, format!("expected {n} values, found {}", v.len())));
            }
            Ok(v)
        };
        match key {
            "dims" => {
                let v = nums(3)?;
                if v.iter().any(|&d| d < 1.0 || d.fract() != 0.0) {
                    return Err(fmt_err("dims", "extents must be positive integers"));
                }
                dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
            }
            "frames" => {
                let v = nums(1)?[0];
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(fmt_err("frames", "must be a positive integer"));
                }
                frames = v as usize;
            }
            "voxel_size" => voxel_size.copy_from_slice(&nums(3)?),
            "origin" => origin.copy_from_slice(&nums(3)?),
            "dtype" if vals == ["float32"] => {}
            "dtype" => return Err(fmt_err("dtype", format!("{vals:?} is not supported; only float32"))),
            k => return Err(fmt_err(k, "unknown header key")),
        }
    }
    let dims = dims.ok_or_else(|| fmt_err("dims", "missing"))?;
    let geometry = Geometry {
        dims,
        voxel_size,
        origin,
    };
    let bytes = fs::read(payload_path(path))?;
    let count = geometry.cells() * frames;
    if bytes.len() != count * 4 {
        return Err(fmt_err(
            "payload",
            format!("{} bytes, header needs {}", bytes.len(), count * 4),
        ));
    }
    let mut data = vec![0f32; count];
    LittleEndian::read_f32_into(&bytes, &mut data);
    Volume::new(geometry, frames, data.into_iter().map(f64::from).collect())
}
