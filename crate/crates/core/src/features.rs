//! Relationship representations built from detection features.
//!
//! Each subject–object pair becomes the concatenation of
//! `[W_s v_sub, W_o v_obj, W_u flatten(u + f_box(b_sub, b_obj)), s_sub, s_obj]`,
//! where `u` is the pooled union-box feature map and `f_box` renders the two
//! boxes as binary masks and convolves them to the union map's shape.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PairPolicy};
use crate::error::{Error, Result};
use crate::numerics::{ConvGeom, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        if !(x1 < x2 && y1 < y2) || [x1, y1, x2, y2].iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn short_edge(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn clamp(&self, width: f64, height: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// `(x1, y1, x2, y2)` divided by the frame size.
    pub fn normalized(&self, width: f64, height: f64) -> [f64; 4] {
        let c = self.clamp(width, height);
        [c.x1 / width, c.y1 / height, c.x2 / width, c.y2 / height]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectedObject {
    pub visual: Vec<f64>,
    pub bbox: BoundingBox,
    pub class_distribution: Vec<f64>,
    pub score: f64,
    /// Index of the annotated object this detection corresponds to, if any.
    pub gt_index: Option<usize>,
}

impl DetectedObject {
    pub fn argmax_class(&self) -> usize {
        argmax(&self.class_distribution)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures {
    pub subject: usize,
    pub object: usize,
    pub union_map: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FrameDetections {
    pub width: f64,
    pub height: f64,
    pub objects: Vec<DetectedObject>,
    pub pairs: Vec<PairFeatures>,
}

impl FrameDetections {
    /// Keeps the objects flagged in `keep`, dropping pairs that reference a
    /// removed object and renumbering the rest.
    pub fn retain(&self, keep: &[bool]) -> FrameDetections {
        let mut new_index = vec![None; self.objects.len()];
        let mut objects = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            if keep.get(i).copied().unwrap_or(false) {
                new_index[i] = Some(objects.len());
                objects.push(o.clone());
            }
        }
        let pairs = self
            .pairs
            .iter()
            .filter_map(|p| {
                Some(PairFeatures {
                    subject: new_index[p.subject]?,
                    object: new_index[p.object]?,
                    union_map: p.union_map.clone(),
                })
            })
            .collect();
        FrameDetections {
            width: self.width,
            height: self.height,
            objects,
            pairs,
        }
    }

    pub fn union_map(&self, subject: usize, object: usize) -> Option<&[f64]> {
        self.pairs
            .iter()
            .find(|p| p.subject == subject && p.object == object)
            .map(|p| p.union_map.as_slice())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Renders subject and object boxes as two `grid x grid` binary masks. A cell
/// is set when its center lies inside the box. A box that covers no cell
/// center sets the single cell containing its own center.
pub fn spatial_masks(
    sub: &BoundingBox,
    obj: &BoundingBox,
    width: f64,
    height: f64,
    grid: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; 2 * grid * grid];
    for (k, b) in [sub, obj].into_iter().enumerate() {
        let b = b.clamp(width, height);
        let mask = &mut out[k * grid * grid..(k + 1) * grid * grid];
        let cw = width / grid as f64;
        let ch = height / grid as f64;
        let mut any = false;
        for r in 0..grid {
            let cy = (r as f64 + 0.5) * ch;
            if cy < b.y1 || cy > b.y2 {
                continue;
            }
            for c in 0..grid {
                let cx = (c as f64 + 0.5) * cw;
                if cx >= b.x1 && cx <= b.x2 {
                    mask[r * grid + c] = 1.0;
                    any = true;
                }
            }
        }
        if !any {
            log::warn!("box {b:?} covers no mask cell; marking the nearest cell");
            let cx = ((b.x1 + b.x2) / 2.0 / cw).floor().clamp(0.0, grid as f64 - 1.0) as usize;
            let cy = ((b.y1 + b.y2) / 2.0 / ch).floor().clamp(0.0, grid as f64 - 1.0) as usize;
            mask[cy * grid + cx] = 1.0;
        }
    }
    out
}

/// Strides for the two f_box convolutions (kernel 7 pad 3, then kernel 3 pad
/// 1) mapping `grid` to `target`; prefers the most balanced pair.
pub fn fbox_geometry(grid: usize, target: usize, hidden: usize, out_channels: usize) -> Result<(ConvGeom, ConvGeom)> {
    let out = |n: usize, k: usize, p: usize, s: usize| (n + 2 * p).checked_sub(k).map(|v| v / s + 1);
    let mut best: Option<(usize, usize, usize)> = None;
    for s1 in 1..=grid {
        let Some(mid) = out(grid, 7, 3, s1) else { continue };
        for s2 in 1..=mid.max(1) {
            if out(mid, 3, 1, s2) == Some(target) {
                let cost = s1.abs_diff(s2);
                if best.is_none_or(|(_, _, c)| cost < c) {
                    best = Some((s1, s2, cost));
                }
            }
        }
    }
    let (s1, s2, _) = best.ok_or_else(|| {
        Error::Config(format!("no f_box stride pair maps {grid}x{grid} to {target}x{target}"))
    })?;
    let first = ConvGeom {
        in_channels: 2,
        out_channels: hidden,
        height: grid,
        width: grid,
        kernel: 7,
        stride: s1,
        padding: 3,
    };
    let mid = first.out_height();
    let second = ConvGeom {
        in_channels: hidden,
        out_channels,
        height: mid,
        width: mid,
        kernel: 3,
        stride: s2,
        padding: 1,
    };
    Ok((first, second))
}

#[derive(Clone, Debug)]
pub struct FBoxParams {
    pub geom1: ConvGeom,
    pub geom2: ConvGeom,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FBoxParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let (geom1, geom2) = fbox_geometry(
            cfg.mask_size,
            cfg.union_size,
            cfg.fbox_hidden,
            cfg.union_channels,
        )?;
        let k1 = 2 * 49;
        let k2 = cfg.fbox_hidden * 9;
        Ok(FBoxParams {
            geom1,
            geom2,
            w1: store.xavier("fbox.conv1.w", &[cfg.fbox_hidden, k1], k1, cfg.fbox_hidden * 49)?,
            b1: store.zeros("fbox.conv1.b", &[cfg.fbox_hidden])?,
            w2: store.xavier(
                "fbox.conv2.w",
                &[cfg.union_channels, k2],
                k2,
                cfg.union_channels * 9,
            )?,
            b2: store.zeros("fbox.conv2.b", &[cfg.union_channels])?,
        })
    }

    /// `[P, 2*g*g]` masks to `[P, C_u*S*S]` location features.
    pub fn forward(&self, g: &mut Graph, masks: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.conv2d(masks, w1, b1, self.geom1)?;
        let h = g.relu(h);
        g.conv2d(h, w2, b2, self.geom2)
    }
}

#[derive(Clone, Debug)]
pub struct RepresentationParams {
    pub w_subject: ParamId,
    pub b_subject: ParamId,
    pub w_object: ParamId,
    pub b_object: ParamId,
    pub w_union: ParamId,
    pub b_union: ParamId,
    pub semantic: ParamId,
    pub fbox: FBoxParams,
}

impl RepresentationParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.compress_dim;
        Ok(RepresentationParams {
            w_subject: store.weight("rep.subject.w", cfg.visual_dim, c)?,
            b_subject: store.zeros("rep.subject.b", &[c])?,
            w_object: store.weight("rep.object.w", cfg.visual_dim, c)?,
            b_object: store.zeros("rep.object.b", &[c])?,
            w_union: store.weight("rep.union.w", cfg.union_len(), c)?,
            b_union: store.zeros("rep.union.b", &[c])?,
            semantic: store.normal(
                "rep.semantic",
                &[cfg.num_object_classes, cfg.semantic_dim],
                1.0,
            )?,
            fbox: FBoxParams::new(store, cfg)?,
        })
    }
}

/// One batch of pairs to encode. Rows of `visual` are objects; `pairs` index
/// into them.
pub struct PairBatch<'a> {
    pub visual: Var,
    pub pairs: &'a [(usize, usize)],
    /// `[P, C_u*S*S]` union feature maps.
    pub union_maps: Var,
    /// `[P, 2*g*g]` rendered box masks.
    pub masks: Var,
    /// Object class used for the semantic embedding, per object row.
    pub labels: &'a [usize],
}

/// Builds `[P, d_model]` relationship representations.
pub fn assemble_batch(g: &mut Graph, params: &RepresentationParams, batch: &PairBatch) -> Result<Var> {
    let n_obj = g.rows(batch.visual);
    if batch.labels.len() != n_obj {
        return Err(Error::Contract(format!(
            "{} labels for {n_obj} objects",
            batch.labels.len()
        )));
    }
    for &(s, o) in batch.pairs {
        if s >= n_obj || o >= n_obj {
            return Err(Error::Contract(format!("pair ({s},{o}) out of range for {n_obj} objects")));
        }
    }
    let sub_idx: Vec<usize> = batch.pairs.iter().map(|p| p.0).collect();
    let obj_idx: Vec<usize> = batch.pairs.iter().map(|p| p.1).collect();

    let vs = g.gather_rows(batch.visual, &sub_idx)?;
    let vo = g.gather_rows(batch.visual, &obj_idx)?;
    let (ws, bs) = (g.param(params.w_subject), g.param(params.b_subject));
    let (wo, bo) = (g.param(params.w_object), g.param(params.b_object));
    let (wu, bu) = (g.param(params.w_union), g.param(params.b_union));
    let sub = g.linear(vs, ws, Some(bs))?;
    let obj = g.linear(vo, wo, Some(bo))?;

    let loc = params.fbox.forward(g, batch.masks)?;
    let spatial = g.add(batch.union_maps, loc)?;
    let uni = g.linear(spatial, wu, Some(bu))?;

    let table = g.param(params.semantic);
    let sub_cls: Vec<usize> = sub_idx.iter().map(|&i| batch.labels[i]).collect();
    let obj_cls: Vec<usize> = obj_idx.iter().map(|&i| batch.labels[i]).collect();
    let ss = g.gather_rows(table, &sub_cls)?;
    let so = g.gather_rows(table, &obj_cls)?;
    g.concat_cols(&[sub, obj, uni, ss, so])
}

/// Representation of a single pair; `labels` are the subject and object
/// classes used for the semantic rows.
#[allow(clippy::too_many_arguments)]
pub fn assemble_representation(
    store: &ParamStore,
    params: &RepresentationParams,
    cfg: &ModelConfig,
    subject: &DetectedObject,
    object: &DetectedObject,
    pair: &PairFeatures,
    labels: (usize, usize),
    frame_size: (f64, f64),
) -> Result<Vec<f64>> {
    if subject.visual.len() != cfg.visual_dim || object.visual.len() != cfg.visual_dim {
        return Err(Error::shape("assemble_representation", &[subject.visual.len()], &[cfg.visual_dim]));
    }
    if pair.union_map.len() != cfg.union_len() {
        return Err(Error::shape("assemble_representation", &[pair.union_map.len()], &[cfg.union_len()]));
    }
    for l in [labels.0, labels.1] {
        if l >= cfg.num_object_classes {
            return Err(Error::Contract(format!("object class {l} out of range")));
        }
    }
    let mut g = Graph::new(store);
    let mut visual = subject.visual.clone();
    visual.extend_from_slice(&object.visual);
    let visual = g.matrix(2, cfg.visual_dim, visual)?;
    let union_maps = g.matrix(1, cfg.union_len(), pair.union_map.clone())?;
    let m = spatial_masks(&subject.bbox, &object.bbox, frame_size.0, frame_size.1, cfg.mask_size);
    let masks = g.matrix(1, m.len(), m)?;
    let batch = PairBatch {
        visual,
        pairs: &[(0, 1)],
        union_maps,
        masks,
        labels: &[labels.0, labels.1],
    };
    let rep = assemble_batch(&mut g, params, &batch)?;
    Ok(g.data(rep).to_vec())
}

/// Candidate subject–object index pairs for a frame given per-object labels.
pub fn candidate_pairs(labels: &[usize], person_class: usize, policy: PairPolicy) -> Vec<(usize, usize)> {
    match policy {
        PairPolicy::PersonCentric => {
            let mut out = Vec::new();
            for (p, &lp) in labels.iter().enumerate() {
                if lp != person_class {
                    continue;
                }
                for (o, &lo) in labels.iter().enumerate() {
                    if o != p && lo != person_class {
                        out.push((p, o));
                    }
                }
            }
            out
        }
        PairPolicy::Full => {
            let n = labels.len();
            (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .collect()
        }
    }
}

/// Stacks per-object visual vectors into a `[N, D_v]` tensor.
pub fn stack_rows(rows: &[&[f64]], width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(Error::shape("stack_rows", &[r.len()], &[width]));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), width], data)
}
