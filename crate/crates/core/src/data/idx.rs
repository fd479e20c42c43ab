//! IDX container (the MNIST distribution format).
//!
//! Header: two zero bytes, a type byte (`0x08` = unsigned byte), a dimension
//! count, then one big-endian `u32` extent per dimension. Images use magic
//! `0x00000803`, labels `0x00000801`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{one_hot, Dataset};
use crate::error::{MpbmError, Result};
use crate::numerics::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const UBYTE: u8 = 0x08;

fn bad(detail: impl Into<String>) -> MpbmError {
    MpbmError::Format {
        format: "IDX",
        detail: detail.into(),
    }
}

/// Unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        ((UBYTE as u32) << 8) | self.dims.len() as u32
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(bad(format!("file too short for a header ({} bytes)", bytes.len())));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(bad(format!("bad magic {:02x?}", &bytes[..4])));
        }
        if bytes[2] != UBYTE {
            return Err(bad(format!("unsupported element type 0x{:02x}", bytes[2])));
        }
        let ndim = bytes[3] as usize;
        let header = 4 + 4 * ndim;
        if ndim == 0 || bytes.len() < header {
            return Err(bad("truncated dimension header"));
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != n {
            return Err(bad(format!(
                "payload has {} bytes, header promises {n}",
                payload.len()
            )));
        }
        Ok(IdxArray {
            dims,
            data: payload.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MpbmError::io(path, e))?;
        Self::parse(&bytes).map_err(|e| match e {
            MpbmError::Format { format, detail } => MpbmError::Format {
                format,
                detail: format!("{}: {detail}", path.display()),
            },
            e => e,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MpbmError::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdxLoadOptions {
    /// Keep only the first `limit` examples.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Output `[C, H, W]`; grayscale is resized bilinearly and replicated
    /// across channels. `None` keeps `[1, H, W]`.
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default = "ten")]
    pub num_classes: usize,
}

fn ten() -> usize {
    10
}

impl Default for IdxLoadOptions {
    fn default() -> Self {
        IdxLoadOptions {
            limit: None,
            input_shape: None,
            num_classes: 10,
        }
    }
}

pub fn load_idx(images: &Path, labels: &Path, opts: &IdxLoadOptions) -> Result<Dataset> {
    let img = IdxArray::read(images)?;
    let lab = IdxArray::read(labels)?;
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    dataset_from_idx(&img, &lab, opts, &name)
}

pub fn dataset_from_idx(img: &IdxArray, lab: &IdxArray, opts: &IdxLoadOptions, name: &str) -> Result<Dataset> {
    if img.magic() != IMAGES_MAGIC {
        return Err(bad(format!("image file magic 0x{:08x}, expected 0x{IMAGES_MAGIC:08x}", img.magic())));
    }
    if lab.magic() != LABELS_MAGIC {
        return Err(bad(format!("label file magic 0x{:08x}, expected 0x{LABELS_MAGIC:08x}", lab.magic())));
    }
    let (count, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != count {
        return Err(bad(format!("{count} images but {} labels", lab.dims[0])));
    }
    if count == 0 {
        return Err(bad("no examples"));
    }
    let n = opts.limit.map_or(count, |l| l.min(count));
    let classes: Vec<usize> = lab.data[..n].iter().map(|&b| b as usize).collect();

    let (c_out, h_out, w_out) = match opts.input_shape.as_deref() {
        None => (1, h, w),
        Some(&[c, ho, wo]) if c > 0 && ho > 0 && wo > 0 => (c, ho, wo),
        Some(s) => return Err(MpbmError::config("input_shape", format!("expected [C, H, W], got {s:?}"))),
    };
    let mut x = Vec::with_capacity(n * c_out * h_out * w_out);
    let plane = h * w;
    for i in 0..n {
        let src: Vec<f64> = img.data[i * plane..(i + 1) * plane]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        let resized = if (h_out, w_out) == (h, w) {
            src
        } else {
            resize_bilinear(&src, h, w, h_out, w_out)
        };
        for _ in 0..c_out {
            x.extend_from_slice(&resized);
        }
    }
    Dataset::new(
        name,
        "source",
        Tensor::new(vec![n, c_out, h_out, w_out], x)?,
        one_hot(&classes, opts.num_classes)?,
    )
}

/// Grayscale dataset (`[1, H, W]` inputs) back to IDX arrays.
pub fn dataset_to_idx(d: &Dataset) -> Result<(IdxArray, IdxArray)> {
    let &[1, h, w] = d.input_shape() else {
        return Err(MpbmError::shape("dataset_to_idx", format!("{:?}", d.input_shape())));
    };
    let data = d.inputs().data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let labels = d.classes().into_iter().map(|c| c as u8).collect();
    Ok((
        IdxArray {
            dims: vec![d.len(), h, w],
            data,
        },
        IdxArray {
            dims: vec![d.len()],
            data: labels,
        },
    ))
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let sy = h as f64 / ho as f64;
    let sx = w as f64 / wo as f64;
    let mut out = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..wo {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
        }
    }
    out
}
