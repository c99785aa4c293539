//! Line-delimited JSON annotations, one frame per line:
//!
//! ```text
//! {"video":"v0","frame":0,"width":480,"height":270,
//!  "objects":[{"class":"person","box":[10,20,200,260]}, ...],
//!  "relations":[{"subject":0,"object":1,"attention":["looking_at"],
//!                "spatial":["in_front_of"],"contact":["holding"]}]}
//! ```
//!
//! Class and predicate names refer to the vocabulary. Consecutive lines with
//! the same `video` form one video and must have increasing `frame` numbers.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FrameRecord, GroundTruthGraph, ObjectAnnotation, RelationAnnotation, VideoSample};
use crate::error::{Error, Result};
use crate::features::{BoundingBox, FrameDetections};
use crate::vocab::{PredicateType, Vocabulary};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    video: String,
    frame: usize,
    width: f64,
    height: f64,
    objects: Vec<ObjectLine>,
    #[serde(default)]
    relations: Vec<RelationLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectLine {
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationLine {
    subject: usize,
    object: usize,
    #[serde(default)]
    attention: Vec<String>,
    #[serde(default)]
    spatial: Vec<String>,
    #[serde(default)]
    contact: Vec<String>,
}

fn lookup(names: &[String], name: &str, what: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Vocabulary(format!("unknown {what} `{name}`")))
}

/// Structural problems come back as `Error::Format`, unknown names as
/// `Error::Vocabulary`.
fn frame_from_line(line: FrameLine, vocab: &Vocabulary) -> Result<(String, FrameRecord)> {
    let mut gt = GroundTruthGraph::default();
    for o in &line.objects {
        let class = lookup(&vocab.objects, &o.class, "object class")?;
        let [x1, y1, x2, y2] = o.bbox;
        let bbox = BoundingBox::new(x1, y1, x2, y2).map_err(|e| Error::Format(e.to_string()))?;
        gt.objects.push(ObjectAnnotation { class, bbox });
    }
    for r in &line.relations {
        if r.subject >= gt.objects.len() || r.object >= gt.objects.len() || r.subject == r.object {
            return Err(Error::Format(format!(
                "relation ({}, {}) references invalid objects",
                r.subject, r.object
            )));
        }
        let mut predicates: [Vec<usize>; 3] = Default::default();
        for (t, names) in [&r.attention, &r.spatial, &r.contact].into_iter().enumerate() {
            let kind = PredicateType::ALL[t];
            for n in names {
                let id = lookup(&vocab.predicates[t], n, kind.name())?;
                if !predicates[t].contains(&id) {
                    predicates[t].push(id);
                }
            }
            predicates[t].sort_unstable();
        }
        gt.relations.push(RelationAnnotation {
            subject: r.subject,
            object: r.object,
            predicates,
        });
    }
    let detections = FrameDetections {
        width: line.width,
        height: line.height,
        ..Default::default()
    };
    Ok((
        line.video,
        FrameRecord {
            index: line.frame,
            gt,
            detections,
        },
    ))
}

/// Reads videos without detection features.
pub fn load_annotations(path: &Path, vocab: &Vocabulary) -> Result<Vec<VideoSample>> {
    let file = std::fs::File::open(path).map_err(Error::file(path))?;
    let mut videos: Vec<VideoSample> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let parsed: FrameLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if !(parsed.width > 0.0 && parsed.height > 0.0) {
            return Err(err("frame width and height must be positive".into()));
        }
        let (video, frame) = match frame_from_line(parsed, vocab) {
            Ok(v) => v,
            Err(Error::Vocabulary(msg)) => {
                return Err(Error::Vocabulary(format!("{}:{}: {msg}", path.display(), i + 1)))
            }
            Err(e) => return Err(err(e.to_string())),
        };
        match videos.last_mut() {
            Some(v) if v.id == video => {
                if v.frames.last().is_some_and(|f| f.index >= frame.index) {
                    return Err(err(format!("frame {} out of order in video {video}", frame.index)));
                }
                v.frames.push(frame);
            }
            _ => {
                if videos.iter().any(|v| v.id == video) {
                    return Err(err(format!("video {video} is split across the file")));
                }
                videos.push(VideoSample {
                    id: video,
                    frames: vec![frame],
                });
            }
        }
    }
    Ok(videos)
}

pub fn annotations_to_string(videos: &[VideoSample], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for v in videos {
        for f in &v.frames {
            let line = FrameLine {
                video: v.id.clone(),
                frame: f.index,
                width: f.detections.width,
                height: f.detections.height,
                objects: f
                    .gt
                    .objects
                    .iter()
                    .map(|o| ObjectLine {
                        class: vocab.objects[o.class].clone(),
                        bbox: [o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2],
                    })
                    .collect(),
                relations: f
                    .gt
                    .relations
                    .iter()
                    .map(|r| {
                        let names = |t: usize| r.predicates[t].iter().map(|&p| vocab.predicates[t][p].clone()).collect();
                        RelationLine {
                            subject: r.subject,
                            object: r.object,
                            attention: names(0),
                            spatial: names(1),
                            contact: names(2),
                        }
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn save_annotations(path: &Path, videos: &[VideoSample], vocab: &Vocabulary) -> Result<()> {
    let text = annotations_to_string(videos, vocab)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}
