//! `.usrf` container: an 8-byte magic, a little-endian u64 manifest length,
//! a JSON manifest, then raw little-endian f32 arrays in manifest order.
//!
//! Geometry, scheme, TGC curve, waveform samples and any other structured
//! values live in the manifest as JSON numbers, which round-trip `f64`
//! exactly. Bulk arrays are stored as f32.

use infer_core::acquisition::{ModelParams, RFDataCube, ScattererField, TransducerGeometry, TransmitScheme};
use infer_core::beamform::{Image, PixelGrid};
use infer_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"USRF0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the end of the manifest.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    endianness: String,
    kind: String,
    arrays: Vec<ArrayEntry>,
    attrs: Map<String, Value>,
}

/// In-memory contents of a container file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub attrs: Map<String, Value>,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), ..Default::default() }
    }

    pub fn set<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.attrs.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.attrs.get(key).ok_or_else(|| Error::Format(format!("missing '{key}' in manifest")))?;
        Ok(T::deserialize(v)?)
    }

    pub fn get_opt<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.attrs.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => Ok(Some(T::deserialize(v)?)),
        }
    }

    pub fn push_array(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!("array '{name}' has {} values for shape {shape:?}", data.len())));
        }
        self.arrays.push((name.to_string(), shape, data));
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.arrays
            .iter()
            .find(|a| a.0 == name)
            .map(|a| (a.1.as_slice(), a.2.as_slice()))
            .ok_or_else(|| Error::Format(format!("missing array '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, shape, data)| {
                let bytes = 4 * data.len() as u64;
                let e = ArrayEntry { name: name.clone(), dtype: "f32".into(), shape: shape.clone(), offset, bytes };
                offset += bytes;
                e
            })
            .collect();
        let manifest = Manifest {
            format: "usrf".into(),
            version: 1,
            endianness: "little".into(),
            kind: self.kind.clone(),
            arrays,
            attrs: self.attrs.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &self.arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a usrf container".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.format != "usrf" || manifest.endianness != "little" {
            return Err(Error::Format(format!("unsupported format {} / {}", manifest.format, manifest.endianness)));
        }
        let data = &bytes[16 + len..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("unsupported dtype '{}'", e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            if e.bytes != 4 * count as u64 {
                return Err(Error::Format(format!("array '{}' size does not match its shape", e.name)));
            }
            let raw = data
                .get(e.offset as usize..(e.offset + e.bytes) as usize)
                .ok_or_else(|| Error::Format(format!("array '{}' extends past the end of the file", e.name)))?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((e.name, e.shape, values));
        }
        Ok(Self { kind: manifest.kind, attrs: manifest.attrs, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind == kind {
            Ok(self)
        } else {
            Err(Error::Format(format!("expected a '{kind}' container, found '{}'", self.kind)))
        }
    }
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Rounds every sample to f32, which is what the container stores.
pub fn quantize(cube: &mut RFDataCube) {
    for v in cube.samples.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// An acquisition on disk, with optional ground truth from the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct RfFile {
    pub geometry: TransducerGeometry,
    pub scheme: TransmitScheme,
    pub data: RFDataCube,
    pub truth_field: Option<ScattererField>,
    pub truth_params: Option<ModelParams>,
}

impl RfFile {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("rf");
        c.set("geometry", &self.geometry)?;
        c.set("scheme", &self.scheme)?;
        c.set("tgc_curve", &self.data.tgc_curve)?;
        if let Some(f) = &self.truth_field {
            c.set("truth_field", f)?;
        }
        if let Some(p) = &self.truth_params {
            c.set("truth_params", p)?;
        }
        c.push_array("rf", vec![self.data.n_tx, self.data.n_ft, self.data.n_ch], to_f32(&self.data.samples))?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (shape, samples) = c.array("rf")?;
        if shape.len() != 3 {
            return Err(Error::Format("rf array must be three-dimensional".into()));
        }
        let data = RFDataCube { n_tx: shape[0], n_ft: shape[1], n_ch: shape[2], samples: to_f64(samples), tgc_curve: c.get("tgc_curve")? };
        Ok(Self {
            geometry: c.get("geometry")?,
            scheme: c.get("scheme")?,
            data,
            truth_field: c.get_opt("truth_field")?,
            truth_params: c.get_opt("truth_params")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?.expect_kind("rf")?)
    }
}

/// Linear-magnitude image with its grid.
pub fn write_image(path: &Path, image: &Image, source: &str) -> Result<()> {
    let mut c = Container::new("image");
    c.set("grid", &image.grid)?;
    c.set("source", &source)?;
    c.push_array("image", vec![image.grid.nz, image.grid.nx], to_f32(&image.data))?;
    c.write(path)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let c = Container::read(path)?.expect_kind("image")?;
    let grid: PixelGrid = c.get("grid")?;
    let (shape, data) = c.array("image")?;
    if shape != [grid.nz, grid.nx] {
        return Err(Error::Format("image array does not match its grid".into()));
    }
    Ok(Image { grid, data: to_f64(data) })
}

/// Any serializable value stored entirely in the manifest.
pub fn write_value<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    let mut c = Container::new(kind);
    c.set("value", value)?;
    c.write(path)
}

pub fn read_value<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    Container::read(path)?.expect_kind(kind)?.get("value")
}
