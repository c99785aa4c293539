//! `STTD` binary detection features.
//!
//! All integers are little-endian `u32`/`i32`, all floats little-endian
//! `f32`.
//!
//! ```text
//! "STTD" version D_v C_u S C n_frames
//! per frame:  id_len id_bytes frame_index width height n_objects
//!   per object: x1 y1 x2 y2 score dist[C] gt_index(i32, -1 = none) visual[D_v]
//!   n_pairs
//!   per pair:   subject object union[C_u*S*S]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::features::{BoundingBox, DetectedObject, FrameDetections, PairFeatures};

pub const MAGIC: &[u8; 4] = b"STTD";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureDims {
    pub visual_dim: usize,
    pub union_channels: usize,
    pub union_size: usize,
    pub num_classes: usize,
}

impl FeatureDims {
    pub fn of(cfg: &ModelConfig) -> Self {
        FeatureDims {
            visual_dim: cfg.visual_dim,
            union_channels: cfg.union_channels,
            union_size: cfg.union_size,
            num_classes: cfg.num_object_classes,
        }
    }

    pub fn union_len(&self) -> usize {
        self.union_channels * self.union_size * self.union_size
    }
}

/// One frame of features keyed by video id and frame number.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrame {
    pub video: String,
    pub index: usize,
    pub detections: FrameDetections,
}

fn eof(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Eof(format!("feature file ends inside {what}"))
    } else {
        Error::Io(e)
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

pub fn write_features<W: Write>(mut w: W, dims: FeatureDims, frames: &[FeatureFrame]) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        u32_of(dims.visual_dim, "visual_dim")?,
        u32_of(dims.union_channels, "union_channels")?,
        u32_of(dims.union_size, "union_size")?,
        u32_of(dims.num_classes, "num_classes")?,
        u32_of(frames.len(), "frame count")?,
    ] {
        w.write_u32::<LE>(v)?;
    }
    let f32s = |w: &mut W, xs: &[f64]| -> Result<()> {
        for &x in xs {
            w.write_f32::<LE>(x as f32)?;
        }
        Ok(())
    };
    for f in frames {
        let d = &f.detections;
        w.write_u32::<LE>(u32_of(f.video.len(), "video id length")?)?;
        w.write_all(f.video.as_bytes())?;
        w.write_u32::<LE>(u32_of(f.index, "frame index")?)?;
        f32s(&mut w, &[d.width, d.height])?;
        w.write_u32::<LE>(u32_of(d.objects.len(), "object count")?)?;
        for o in &d.objects {
            if o.visual.len() != dims.visual_dim || o.class_distribution.len() != dims.num_classes {
                return Err(Error::Format(format!(
                    "object with {} visual / {} class entries does not match header dims",
                    o.visual.len(),
                    o.class_distribution.len()
                )));
            }
            let b = o.bbox;
            f32s(&mut w, &[b.x1, b.y1, b.x2, b.y2, o.score])?;
            f32s(&mut w, &o.class_distribution)?;
            let gt = match o.gt_index {
                Some(i) => i32::try_from(i).map_err(|_| Error::Format("gt index exceeds i32".into()))?,
                None => -1,
            };
            w.write_i32::<LE>(gt)?;
            f32s(&mut w, &o.visual)?;
        }
        w.write_u32::<LE>(u32_of(d.pairs.len(), "pair count")?)?;
        for p in &d.pairs {
            if p.union_map.len() != dims.union_len() {
                return Err(Error::Format(format!(
                    "union map of {} values, header says {}",
                    p.union_map.len(),
                    dims.union_len()
                )));
            }
            w.write_u32::<LE>(u32_of(p.subject, "pair subject")?)?;
            w.write_u32::<LE>(u32_of(p.object, "pair object")?)?;
            f32s(&mut w, &p.union_map)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file, checking its header against `expected` when given.
pub fn read_features<R: Read>(mut r: R, expected: Option<FeatureDims>) -> Result<(FeatureDims, Vec<FeatureFrame>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| eof(e, "the header"))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected STTD")));
    }
    let mut hdr = [0u32; 6];
    for h in hdr.iter_mut() {
        *h = r.read_u32::<LE>().map_err(|e| eof(e, "the header"))?;
    }
    if hdr[0] != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {}", hdr[0])));
    }
    let dims = FeatureDims {
        visual_dim: hdr[1] as usize,
        union_channels: hdr[2] as usize,
        union_size: hdr[3] as usize,
        num_classes: hdr[4] as usize,
    };
    if let Some(exp) = expected {
        if exp != dims {
            return Err(Error::Format(format!("feature dims {dims:?} do not match config {exp:?}")));
        }
    }
    let n_frames = hdr[5] as usize;
    let mut frames = Vec::with_capacity(n_frames.min(1 << 16));
    for fi in 0..n_frames {
        let what = format!("frame {fi}");
        let rd_u32 = |r: &mut R| r.read_u32::<LE>().map_err(|e| eof(e, &what));
        let id_len = rd_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|e| eof(e, &what))?;
        let video = String::from_utf8(id).map_err(|_| Error::Format(format!("{what}: video id is not UTF-8")))?;
        let index = rd_u32(&mut r)? as usize;
        let floats = |r: &mut R, n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0f32; n];
            r.read_f32_into::<LE>(&mut buf).map_err(|e| eof(e, &what))?;
            Ok(buf.into_iter().map(f64::from).collect())
        };
        let size = floats(&mut r, 2)?;
        let n_obj = rd_u32(&mut r)? as usize;
        let mut objects = Vec::with_capacity(n_obj.min(1 << 12));
        for _ in 0..n_obj {
            let b = floats(&mut r, 5)?;
            let class_distribution = floats(&mut r, dims.num_classes)?;
            let gt = r.read_i32::<LE>().map_err(|e| eof(e, &what))?;
            let visual = floats(&mut r, dims.visual_dim)?;
            objects.push(DetectedObject {
                visual,
                bbox: BoundingBox {
                    x1: b[0],
                    y1: b[1],
                    x2: b[2],
                    y2: b[3],
                },
                class_distribution,
                score: b[4],
                gt_index: usize::try_from(gt).ok(),
            });
        }
        let n_pairs = rd_u32(&mut r)? as usize;
        let mut pairs = Vec::with_capacity(n_pairs.min(1 << 12));
        for _ in 0..n_pairs {
            let subject = rd_u32(&mut r)? as usize;
            let object = rd_u32(&mut r)? as usize;
            if subject >= n_obj || object >= n_obj || subject == object {
                return Err(Error::Format(format!("frame {fi}: pair ({subject},{object}) out of range")));
            }
            pairs.push(PairFeatures {
                subject,
                object,
                union_map: floats(&mut r, dims.union_len())?,
            });
        }
        frames.push(FeatureFrame {
            video,
            index,
            detections: FrameDetections {
                width: size[0],
                height: size[1],
                objects,
                pairs,
            },
        });
    }
    Ok((dims, frames))
}

pub fn save_features(path: &Path, dims: FeatureDims, frames: &[FeatureFrame]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_features(std::io::BufWriter::new(f), dims, frames)
}

pub fn load_features(path: &Path, expected: Option<FeatureDims>) -> Result<(FeatureDims, Vec<FeatureFrame>)> {
    let f = std::fs::File::open(path).map_err(Error::file(path))?;
    read_features(std::io::BufReader::new(f), expected)
}
