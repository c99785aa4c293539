//! Model and run configuration.
//!
//! Text format: one `key = value` per line, `#` comments. A `preset = paper`
//! or `preset = desk` line selects the base values; every other key overrides
//! the preset regardless of where it appears in the file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    PredCls,
    SgCls,
    SgDet,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::PredCls, Mode::SgCls, Mode::SgDet];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PredCls => "predcls",
            Mode::SgCls => "sgcls",
            Mode::SgDet => "sgdet",
        }
    }

    /// Object labels come from the annotation rather than the classifier.
    pub fn labels_given(self) -> bool {
        self == Mode::PredCls
    }

    /// Boxes come from the annotation rather than the detector.
    pub fn boxes_given(self) -> bool {
        self != Mode::SgDet
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(Mode::PredCls),
            "sgcls" => Ok(Mode::SgCls),
            "sgdet" => Ok(Mode::SgDet),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameEncodingKind {
    Learned,
    Sinusoidal,
    None,
}

impl FrameEncodingKind {
    pub fn name(self) -> &'static str {
        match self {
            FrameEncodingKind::Learned => "learned",
            FrameEncodingKind::Sinusoidal => "sinusoidal",
            FrameEncodingKind::None => "none",
        }
    }
}

impl FromStr for FrameEncodingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(FrameEncodingKind::Learned),
            "sinusoidal" => Ok(FrameEncodingKind::Sinusoidal),
            "none" => Ok(FrameEncodingKind::None),
            _ => Err(Error::Config(format!("unknown frame encoding `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairPolicy {
    /// Every person paired with every non-person object.
    PersonCentric,
    /// All ordered pairs of distinct objects.
    Full,
}

impl FromStr for PairPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "person" | "person_centric" => Ok(PairPolicy::PersonCentric),
            "full" => Ok(PairPolicy::Full),
            _ => Err(Error::Config(format!("unknown pair policy `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    // relationship representation
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub union_channels: usize,
    pub union_size: usize,
    pub compress_dim: usize,
    pub mask_size: usize,
    pub fbox_hidden: usize,
    pub num_object_classes: usize,
    pub predicate_sizes: [usize; 3],
    // transformer
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub window: usize,
    pub stride: usize,
    pub frame_encoding: FrameEncodingKind,
    pub reencode_every_layer: bool,
    pub use_encoder: bool,
    pub use_decoder: bool,
    pub frame_encoding_std: f64,
    // object classifier
    pub pos_hidden: usize,
    pub pos_dim: usize,
    pub obj_hidden: usize,
    pub bn_momentum: f64,
    // optimization
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub precision: Precision,
    // task
    pub mode: Mode,
    pub pair_policy: PairPolicy,
    pub semi_threshold: f64,
    pub recall_ks: Vec<usize>,
    pub min_box_edge: f64,
    pub nms_iou: f64,
    pub log_level: String,
}

impl ModelConfig {
    /// Hyperparameters of the published model (Action Genome scale).
    pub fn paper() -> Self {
        ModelConfig {
            preset: Preset::Paper,
            visual_dim: 2048,
            semantic_dim: 200,
            union_channels: 256,
            union_size: 7,
            compress_dim: 512,
            mask_size: 27,
            fbox_hidden: 128,
            num_object_classes: 36,
            predicate_sizes: [3, 6, 17],
            d_model: 1936,
            n_heads: 8,
            enc_layers: 1,
            dec_layers: 3,
            ffn_dim: 2048,
            dropout: 0.1,
            window: 2,
            stride: 1,
            frame_encoding: FrameEncodingKind::Learned,
            reencode_every_layer: true,
            use_encoder: true,
            use_decoder: true,
            frame_encoding_std: 0.02,
            pos_hidden: 32,
            pos_dim: 128,
            obj_hidden: 1024,
            bn_momentum: 0.1,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 5.0,
            steps: 0,
            checkpoint_every: 100,
            seed: 0,
            precision: Precision::F32,
            mode: Mode::PredCls,
            pair_policy: PairPolicy::PersonCentric,
            semi_threshold: 0.9,
            recall_ks: vec![10, 20, 50],
            min_box_edge: 16.0,
            nms_iou: 0.4,
            log_level: "info".into(),
        }
    }

    /// CPU-scale dimensions for the synthetic benchmark.
    pub fn desk() -> Self {
        ModelConfig {
            preset: Preset::Desk,
            visual_dim: 64,
            semantic_dim: 16,
            union_channels: 8,
            union_size: 3,
            compress_dim: 32,
            fbox_hidden: 4,
            num_object_classes: 6,
            predicate_sizes: [2, 3, 4],
            d_model: 128,
            n_heads: 4,
            ffn_dim: 256,
            pos_hidden: 16,
            pos_dim: 16,
            obj_hidden: 32,
            lr: 3e-4,
            steps: 1000,
            ..ModelConfig::paper()
        }
    }

    pub fn union_len(&self) -> usize {
        self.union_channels * self.union_size * self.union_size
    }

    /// Width of the concatenated relationship representation.
    pub fn representation_dim(&self) -> usize {
        3 * self.compress_dim + 2 * self.semantic_dim
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model != self.representation_dim() {
            return err(format!(
                "d_model {} != 3*compress_dim + 2*semantic_dim = {}",
                self.d_model,
                self.representation_dim()
            ));
        }
        if self.window == 0 || self.stride == 0 {
            return err("window and stride must be >= 1".into());
        }
        if !(self.semi_threshold > 0.0 && self.semi_threshold < 1.0) {
            return err(format!("semi_threshold {} not in (0,1)", self.semi_threshold));
        }
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return err("recall_ks must be non-empty and >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} not in [0,1)", self.dropout));
        }
        if self.predicate_sizes.contains(&0) || self.num_object_classes < 2 {
            return err("vocabulary sizes must be positive".into());
        }
        if self.mask_size < self.union_size {
            return err("mask_size must be >= union_size".into());
        }
        if [
            self.visual_dim,
            self.semantic_dim,
            self.union_channels,
            self.union_size,
            self.compress_dim,
            self.fbox_hidden,
            self.ffn_dim,
            self.pos_hidden,
            self.pos_dim,
            self.obj_hidden,
        ]
        .contains(&0)
        {
            return err("all dimensions must be positive".into());
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return err("lr and clip_norm must be positive, weight_decay non-negative".into());
        }
        Ok(())
    }

    /// Sets one key. Unknown keys and malformed values are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
            }
        }
        match key {
            "preset" => {}
            "visual_dim" => self.visual_dim = num(key, value)?,
            "semantic_dim" => self.semantic_dim = num(key, value)?,
            "union_channels" => self.union_channels = num(key, value)?,
            "union_size" => self.union_size = num(key, value)?,
            "compress_dim" => self.compress_dim = num(key, value)?,
            "mask_size" => self.mask_size = num(key, value)?,
            "fbox_hidden" => self.fbox_hidden = num(key, value)?,
            "num_object_classes" => self.num_object_classes = num(key, value)?,
            "attention_classes" => self.predicate_sizes[0] = num(key, value)?,
            "spatial_classes" => self.predicate_sizes[1] = num(key, value)?,
            "contact_classes" => self.predicate_sizes[2] = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "enc_layers" => self.enc_layers = num(key, value)?,
            "dec_layers" => self.dec_layers = num(key, value)?,
            "ffn_dim" => self.ffn_dim = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "frame_encoding" => self.frame_encoding = value.parse()?,
            "reencode_every_layer" => self.reencode_every_layer = flag(key, value)?,
            "use_encoder" => self.use_encoder = flag(key, value)?,
            "use_decoder" => self.use_decoder = flag(key, value)?,
            "frame_encoding_std" => self.frame_encoding_std = num(key, value)?,
            "pos_hidden" => self.pos_hidden = num(key, value)?,
            "pos_dim" => self.pos_dim = num(key, value)?,
            "obj_hidden" => self.obj_hidden = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => {
                self.precision = Precision::parse(value)
                    .ok_or_else(|| Error::Config(format!("bad precision `{value}`")))?
            }
            "mode" => self.mode = value.parse()?,
            "pair_policy" => self.pair_policy = value.parse()?,
            "semi_threshold" => self.semi_threshold = num(key, value)?,
            "recall_ks" => {
                self.recall_ks = value
                    .split(',')
                    .map(|k| num::<usize>(key, k.trim()))
                    .collect::<Result<_>>()?
            }
            "min_box_edge" => self.min_box_edge = num(key, value)?,
            "nms_iou" => self.nms_iou = num(key, value)?,
            "log_level" => self.log_level = value.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a config file body. `overrides` are applied last.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut preset = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "preset" {
                preset = Some(v.clone());
            }
            pairs.push((k, v));
        }
        for (k, v) in overrides {
            if k == "preset" {
                preset = Some(v.clone());
            }
        }
        let mut cfg = match preset.as_deref() {
            None | Some("desk") => ModelConfig::desk(),
            Some("paper") => ModelConfig::paper(),
            Some(other) => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        for (k, v) in pairs.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        ModelConfig::parse(&text, overrides)
    }

    /// Full effective configuration, one key per line, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let preset = match self.preset {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        };
        let ks: Vec<String> = self.recall_ks.iter().map(|k| k.to_string()).collect();
        let entries: Vec<(&str, String)> = vec![
            ("preset", preset.into()),
            ("visual_dim", self.visual_dim.to_string()),
            ("semantic_dim", self.semantic_dim.to_string()),
            ("union_channels", self.union_channels.to_string()),
            ("union_size", self.union_size.to_string()),
            ("compress_dim", self.compress_dim.to_string()),
            ("mask_size", self.mask_size.to_string()),
            ("fbox_hidden", self.fbox_hidden.to_string()),
            ("num_object_classes", self.num_object_classes.to_string()),
            ("attention_classes", self.predicate_sizes[0].to_string()),
            ("spatial_classes", self.predicate_sizes[1].to_string()),
            ("contact_classes", self.predicate_sizes[2].to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("window", self.window.to_string()),
            ("stride", self.stride.to_string()),
            ("frame_encoding", self.frame_encoding.name().into()),
            ("reencode_every_layer", self.reencode_every_layer.to_string()),
            ("use_encoder", self.use_encoder.to_string()),
            ("use_decoder", self.use_decoder.to_string()),
            ("frame_encoding_std", self.frame_encoding_std.to_string()),
            ("pos_hidden", self.pos_hidden.to_string()),
            ("pos_dim", self.pos_dim.to_string()),
            ("obj_hidden", self.obj_hidden.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("steps", self.steps.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.name().into()),
            ("mode", self.mode.name().into()),
            (
                "pair_policy",
                match self.pair_policy {
                    PairPolicy::PersonCentric => "person".into(),
                    PairPolicy::Full => "full".into(),
                },
            ),
            ("semi_threshold", self.semi_threshold.to_string()),
            ("recall_ks", ks.join(",")),
            ("min_box_edge", self.min_box_edge.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("log_level", self.log_level.clone()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
