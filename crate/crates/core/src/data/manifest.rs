//! Dataset manifest: a flat `key = value` file.
//!
//! ```text
//! vocabulary = vocab.txt
//! train.annotations = train.jsonl
//! train.features = train.sttd
//! test.annotations = test.jsonl
//! test.features = test.sttd
//! visual_dim = 64
//! union_channels = 8
//! union_size = 3
//! num_object_classes = 6
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::featio::{load_features, FeatureDims};
use super::{load_annotations, VideoSample};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub vocabulary: PathBuf,
    pub train_annotations: PathBuf,
    pub train_features: PathBuf,
    pub test_annotations: PathBuf,
    pub test_features: PathBuf,
    pub dims: FeatureDims,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut kv = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            kv.insert(k.trim().to_string(), (v.trim().to_string(), i + 1));
        }
        let get = |k: &str| -> Result<&(String, usize)> {
            kv.get(k)
                .ok_or_else(|| Error::Config(format!("manifest {} lacks `{k}`", path.display())))
        };
        let file = |k: &str| -> Result<PathBuf> { Ok(root.join(&get(k)?.0)) };
        let dim = |k: &str| -> Result<usize> {
            let (v, line) = get(k)?;
            v.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("`{k}` must be an integer"),
            })
        };
        Ok(Manifest {
            vocabulary: file("vocabulary")?,
            train_annotations: file("train.annotations")?,
            train_features: file("train.features")?,
            test_annotations: file("test.annotations")?,
            test_features: file("test.features")?,
            dims: FeatureDims {
                visual_dim: dim("visual_dim")?,
                union_channels: dim("union_channels")?,
                union_size: dim("union_size")?,
                num_classes: dim("num_object_classes")?,
            },
            root,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Manifest::parse(&text, path)
    }

    /// Manifest text with file names relative to the manifest directory.
    pub fn to_text(&self) -> String {
        let rel = |p: &Path| p.strip_prefix(&self.root).unwrap_or(p).display().to_string();
        let mut out = String::new();
        let _ = writeln!(out, "vocabulary = {}", rel(&self.vocabulary));
        let _ = writeln!(out, "train.annotations = {}", rel(&self.train_annotations));
        let _ = writeln!(out, "train.features = {}", rel(&self.train_features));
        let _ = writeln!(out, "test.annotations = {}", rel(&self.test_annotations));
        let _ = writeln!(out, "test.features = {}", rel(&self.test_features));
        let _ = writeln!(out, "visual_dim = {}", self.dims.visual_dim);
        let _ = writeln!(out, "union_channels = {}", self.dims.union_channels);
        let _ = writeln!(out, "union_size = {}", self.dims.union_size);
        let _ = writeln!(out, "num_object_classes = {}", self.dims.num_classes);
        out
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.vocabulary)
    }

    pub fn paths(&self, split: Split) -> (&Path, &Path) {
        match split {
            Split::Train => (&self.train_annotations, &self.train_features),
            Split::Test => (&self.test_annotations, &self.test_features),
        }
    }

    /// Loads one split, joining annotations with features by video id and
    /// frame number.
    pub fn load_split(&self, split: Split, vocab: &Vocabulary) -> Result<Vec<VideoSample>> {
        if vocab.num_objects() != self.dims.num_classes {
            return Err(Error::Vocabulary(format!(
                "vocabulary has {} object classes, manifest says {}",
                vocab.num_objects(),
                self.dims.num_classes
            )));
        }
        let (ann, feat) = self.paths(split);
        let mut videos = load_annotations(ann, vocab)?;
        let (_, frames) = load_features(feat, Some(self.dims))?;
        join_features(&mut videos, frames)?;
        Ok(videos)
    }
}

/// Rejects a model configuration whose feature or vocabulary sizes differ
/// from the dataset's.
pub fn check_compatible(cfg: &ModelConfig, dims: FeatureDims, vocab: &Vocabulary) -> Result<()> {
    let want = FeatureDims::of(cfg);
    if want != dims {
        return Err(Error::Config(format!(
            "model expects features {want:?}, dataset provides {dims:?}"
        )));
    }
    if vocab.sizes() != cfg.predicate_sizes || vocab.num_objects() != cfg.num_object_classes {
        return Err(Error::Vocabulary(format!(
            "model expects {} object classes and predicate sizes {:?}, vocabulary has {} and {:?}",
            cfg.num_object_classes,
            cfg.predicate_sizes,
            vocab.num_objects(),
            vocab.sizes()
        )));
    }
    Ok(())
}

pub fn join_features(videos: &mut [VideoSample], frames: Vec<super::featio::FeatureFrame>) -> Result<()> {
    let mut by_key: HashMap<(String, usize), _> = HashMap::with_capacity(frames.len());
    for f in frames {
        let key = (f.video.clone(), f.index);
        if by_key.insert(key, f.detections).is_some() {
            return Err(Error::Format(format!("duplicate features for {} frame {}", f.video, f.index)));
        }
    }
    for v in videos.iter_mut() {
        for fr in v.frames.iter_mut() {
            let d = by_key.remove(&(v.id.clone(), fr.index)).ok_or_else(|| {
                Error::Format(format!("no features for video {} frame {}", v.id, fr.index))
            })?;
            if d.width != fr.detections.width || d.height != fr.detections.height {
                log::warn!(
                    "video {} frame {}: feature frame size {}x{} differs from annotation {}x{}",
                    v.id,
                    fr.index,
                    d.width,
                    d.height,
                    fr.detections.width,
                    fr.detections.height
                );
            }
            fr.detections.objects = d.objects;
            fr.detections.pairs = d.pairs;
        }
    }
    if !by_key.is_empty() {
        log::warn!("{} feature frames have no annotation and were ignored", by_key.len());
    }
    Ok(())
}
