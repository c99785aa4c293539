//! Spatial encoder, frame encodings and the sliding-window temporal decoder.
//!
//! All attention is block-diagonal: rows are partitioned into contiguous
//! groups (one per frame in the encoder, one per window in the decoder) and
//! a row only attends to rows of its own group.

use std::ops::Range;

use crate::config::{FrameEncodingKind, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// `softmax(Q K^T / sqrt(d_k)) V` on plain tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if k.rows() == 0 {
        return Err(Error::Contract("attention over zero keys".into()));
    }
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = vec![0.0; q.rows() * v.cols()];
    let mut w = vec![0.0; k.rows()];
    for i in 0..q.rows() {
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        crate::numerics::graph::softmax_in_place(&mut w);
        let o = &mut out[i * v.cols()..(i + 1) * v.cols()];
        for (j, &wj) in w.iter().enumerate() {
            for (oc, &vc) in o.iter_mut().zip(v.row(j)) {
                *oc += wj * vc;
            }
        }
    }
    Tensor::new(vec![q.rows(), v.cols()], out)
}

/// Taped scaled dot-product attention for one group and head.
pub fn attention_var(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    if g.rows(k) == 0 {
        return Err(Error::Contract("attention over zero keys".into()));
    }
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (g.cols(q) as f64).sqrt());
    let w = g.softmax_rows(logits)?;
    g.matmul(w, v)
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, ffn: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
        }
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(AttentionParams {
            n_heads: heads,
            w_q: store.weight(&n("attn.q"), d, d)?,
            w_k: store.weight(&n("attn.k"), d, d)?,
            w_v: store.weight(&n("attn.v"), d, d)?,
            w_o: store.weight(&n("attn.o.w"), d, d)?,
            b_o: store.zeros(&n("attn.o.b"), &[d])?,
            ff1_w: store.weight(&n("ffn1.w"), d, ffn)?,
            ff1_b: store.zeros(&n("ffn1.b"), &[ffn])?,
            ff2_w: store.weight(&n("ffn2.w"), ffn, d)?,
            ff2_b: store.zeros(&n("ffn2.b"), &[d])?,
            ln1_g: store.ones(&n("ln1.g"), &[d])?,
            ln1_b: store.zeros(&n("ln1.b"), &[d])?,
            ln2_g: store.ones(&n("ln2.g"), &[d])?,
            ln2_b: store.zeros(&n("ln2.b"), &[d])?,
        })
    }
}

fn check_groups(groups: &[Range<usize>], rows: usize) -> Result<()> {
    let mut next = 0;
    for r in groups {
        if r.start != next || r.end < r.start {
            return Err(Error::Contract(format!("attention groups must tile rows in order, got {r:?}")));
        }
        next = r.end;
    }
    if next != rows {
        return Err(Error::Contract(format!("attention groups cover {next} of {rows} rows")));
    }
    Ok(())
}

/// `Concat(head_1..head_h) W_O + b_O`, attending within each group.
pub fn multi_head(
    g: &mut Graph,
    p: &AttentionParams,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    groups: &[Range<usize>],
) -> Result<Var> {
    let rows = g.rows(q_in);
    check_groups(groups, rows)?;
    let (wq, wk, wv) = (g.param(p.w_q), g.param(p.w_k), g.param(p.w_v));
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(k_in, wk)?;
    let v = g.matmul(v_in, wv)?;
    let d = g.cols(q);
    let dh = d / p.n_heads;
    let split = |g: &mut Graph, x: Var| -> Result<Vec<Var>> {
        (0..p.n_heads).map(|h| g.slice_cols(x, h * dh, dh)).collect()
    };
    let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);

    let mut blocks = Vec::with_capacity(groups.len());
    for r in groups.iter().filter(|r| !r.is_empty()) {
        let idx: Vec<usize> = r.clone().collect();
        let whole = r.start == 0 && r.end == rows;
        let mut heads = Vec::with_capacity(p.n_heads);
        for h in 0..p.n_heads {
            let (qs, ks, vs) = if whole {
                (qh[h], kh[h], vh[h])
            } else {
                (
                    g.gather_rows(qh[h], &idx)?,
                    g.gather_rows(kh[h], &idx)?,
                    g.gather_rows(vh[h], &idx)?,
                )
            };
            heads.push(attention_var(g, qs, ks, vs)?);
        }
        blocks.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
    }
    let cat = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks)? };
    let (wo, bo) = (g.param(p.w_o), g.param(p.b_o));
    g.linear(cat, wo, Some(bo))
}

/// `y1 = LN(res + drop(MHA(q, k, v)))`, `y = LN(y1 + drop(FFN(y1)))`.
pub fn att_layer(
    g: &mut Graph,
    p: &AttentionParams,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    residual: Var,
    groups: &[Range<usize>],
) -> Result<Var> {
    let a = multi_head(g, p, q_in, k_in, v_in, groups)?;
    let a = g.dropout(a);
    let y1 = g.add(residual, a)?;
    let (g1, b1) = (g.param(p.ln1_g), g.param(p.ln1_b));
    let y1 = g.layer_norm(y1, g1, b1)?;
    let (w1, bb1, w2, bb2) = (g.param(p.ff1_w), g.param(p.ff1_b), g.param(p.ff2_w), g.param(p.ff2_b));
    let h = g.linear(y1, w1, Some(bb1))?;
    let h = g.relu(h);
    let f = g.linear(h, w2, Some(bb2))?;
    let f = g.dropout(f);
    let y = g.add(y1, f)?;
    let (g2, b2) = (g.param(p.ln2_g), g.param(p.ln2_b));
    g.layer_norm(y, g2, b2)
}

/// Self-attention stack over the pairs of each frame; `frames` are the row
/// ranges of each frame in `x`.
pub fn spatial_encoder(
    g: &mut Graph,
    layers: &[AttentionParams],
    x: Var,
    frames: &[Range<usize>],
) -> Result<Var> {
    if g.rows(x) == 0 {
        return Ok(x);
    }
    let mut h = x;
    for p in layers {
        h = att_layer(g, p, h, h, h, h, frames)?;
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub enum FrameEncoding {
    Learned(ParamId),
    Sinusoidal(Tensor),
    None,
}

/// Standard sin/cos table; slot `j` (1-based) uses position `j - 1`.
pub fn sinusoidal_table(slots: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; slots * d];
    for pos in 0..slots {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![slots, d], data).expect("consistent table shape")
}

pub fn build_frame_encoding(
    store: &mut ParamStore,
    kind: FrameEncodingKind,
    window: usize,
    d: usize,
    std: f64,
) -> Result<FrameEncoding> {
    Ok(match kind {
        FrameEncodingKind::Learned => FrameEncoding::Learned(store.normal("frame_encoding", &[window, d], std)?),
        FrameEncodingKind::Sinusoidal => FrameEncoding::Sinusoidal(sinusoidal_table(window, d)),
        FrameEncodingKind::None => FrameEncoding::None,
    })
}

impl FrameEncoding {
    /// `[n, d]` rows of slot encodings for the given 0-based slots, or `None`
    /// when encodings are disabled.
    pub fn rows(&self, g: &mut Graph, slots: &[usize]) -> Result<Option<Var>> {
        match self {
            FrameEncoding::Learned(id) => {
                let table = g.param(*id);
                Ok(Some(g.gather_rows(table, slots)?))
            }
            FrameEncoding::Sinusoidal(t) => {
                let table = g.input(t.clone());
                Ok(Some(g.gather_rows(table, slots)?))
            }
            FrameEncoding::None => Ok(None),
        }
    }

    pub fn vectors(&self, store: &ParamStore, window: usize, d: usize) -> Tensor {
        match self {
            FrameEncoding::Learned(id) => store.value(*id).clone(),
            FrameEncoding::Sinusoidal(t) => t.clone(),
            FrameEncoding::None => Tensor::zeros(&[window, d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub index: usize,
    /// 0-based frame indices; slot `j` holds `frames[j]`.
    pub frames: Vec<usize>,
}

/// Windows of `eta` consecutive frames. With `t < eta` there is one window of
/// all frames. With `stride > 1` a last window is added if needed so every
/// frame is covered.
pub fn make_windows(t: usize, eta: usize, stride: usize) -> Vec<Window> {
    if t == 0 {
        return Vec::new();
    }
    if t <= eta {
        return vec![Window {
            index: 0,
            frames: (0..t).collect(),
        }];
    }
    let stride = stride.max(1);
    let mut starts: Vec<usize> = (0..=t - eta).step_by(stride).collect();
    if *starts.last().unwrap() != t - eta {
        starts.push(t - eta);
    }
    starts
        .into_iter()
        .enumerate()
        .map(|(index, s)| Window {
            index,
            frames: (s..s + eta).collect(),
        })
        .collect()
}

/// Earliest window containing each frame, as `(window, slot)`.
pub fn select_final(windows: &[Window], t: usize) -> Vec<(usize, usize)> {
    (0..t)
        .map(|f| {
            windows
                .iter()
                .find_map(|w| w.frames.iter().position(|&x| x == f).map(|s| (w.index, s)))
                .expect("windows cover every frame")
        })
        .collect()
}

/// Temporal decoder over sliding windows. `frames` are the row ranges of each
/// frame in `x`; the result has the same rows, each taken from the earliest
/// window containing its frame.
#[allow(clippy::too_many_arguments)]
pub fn temporal_decoder(
    g: &mut Graph,
    layers: &[AttentionParams],
    encoding: &FrameEncoding,
    x: Var,
    frames: &[Range<usize>],
    window: usize,
    stride: usize,
    reencode_every_layer: bool,
) -> Result<Var> {
    let rows = g.rows(x);
    if rows == 0 || layers.is_empty() {
        return Ok(x);
    }
    let windows = make_windows(frames.len(), window, stride);
    let mut gather = Vec::new();
    let mut slots = Vec::new();
    let mut groups = Vec::new();
    // row of each (window, frame) block start in the stacked windows
    let mut block_start = vec![vec![usize::MAX; frames.len()]; windows.len()];
    for w in &windows {
        let start = gather.len();
        for (slot, &f) in w.frames.iter().enumerate() {
            block_start[w.index][f] = gather.len();
            for r in frames[f].clone() {
                gather.push(r);
                slots.push(slot);
            }
        }
        if gather.len() > start {
            groups.push(start..gather.len());
        }
    }
    let mut z = g.gather_rows(x, &gather)?;
    let e = encoding.rows(g, &slots)?;
    for (l, p) in layers.iter().enumerate() {
        let qk = match e {
            Some(e) if l == 0 || reencode_every_layer => g.add(z, e)?,
            _ => z,
        };
        z = att_layer(g, p, qk, qk, z, z, &groups)?;
    }
    let pick = select_final(&windows, frames.len());
    let mut out_idx = Vec::with_capacity(rows);
    for (f, &(w, _)) in pick.iter().enumerate() {
        let base = block_start[w][f];
        out_idx.extend((0..frames[f].len()).map(|i| base + i));
    }
    g.gather_rows(z, &out_idx)
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    pub encoder: Vec<AttentionParams>,
    pub decoder: Vec<AttentionParams>,
    pub encoding: FrameEncoding,
    pub window: usize,
    pub stride: usize,
    pub reencode_every_layer: bool,
}

impl TransformerParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let enc_layers = if cfg.use_encoder { cfg.enc_layers } else { 0 };
        let dec_layers = if cfg.use_decoder { cfg.dec_layers } else { 0 };
        let encoder = (0..enc_layers)
            .map(|i| AttentionParams::new(store, &format!("encoder.{i}"), d, cfg.n_heads, cfg.ffn_dim))
            .collect::<Result<_>>()?;
        let decoder = (0..dec_layers)
            .map(|i| AttentionParams::new(store, &format!("decoder.{i}"), d, cfg.n_heads, cfg.ffn_dim))
            .collect::<Result<_>>()?;
        let encoding = if dec_layers > 0 {
            build_frame_encoding(store, cfg.frame_encoding, cfg.window, d, cfg.frame_encoding_std)?
        } else {
            FrameEncoding::None
        };
        Ok(TransformerParams {
            encoder,
            decoder,
            encoding,
            window: cfg.window,
            stride: cfg.stride,
            reencode_every_layer: cfg.reencode_every_layer,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, frames: &[Range<usize>]) -> Result<Var> {
        let h = spatial_encoder(g, &self.encoder, x, frames)?;
        temporal_decoder(
            g,
            &self.decoder,
            &self.encoding,
            h,
            frames,
            self.window,
            self.stride,
            self.reencode_every_layer,
        )
    }
}

/// Row ranges for frames holding `counts[t]` entries each, stacked in order.
pub fn frame_ranges(counts: &[usize]) -> Vec<Range<usize>> {
    let mut start = 0;
    counts
        .iter()
        .map(|&c| {
            let r = start..start + c;
            start += c;
            r
        })
        .collect()
}
