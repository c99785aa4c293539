//! Predicate heads, the object classifier and the training objective.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::graph::{sigmoid, softmax_in_place};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::vocab::PredicateType;

#[derive(Clone, Debug)]
pub struct PredicateHeads {
    pub weights: [ParamId; 3],
    pub biases: [ParamId; 3],
    pub sizes: [usize; 3],
}

impl PredicateHeads {
    pub fn new(store: &mut ParamStore, d: usize, sizes: [usize; 3]) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for t in PredicateType::ALL {
            let n = sizes[t.index()];
            weights.push(store.weight(&format!("head.{}.w", t.name()), d, n)?);
            biases.push(store.zeros(&format!("head.{}.b", t.name()), &[n])?);
        }
        Ok(PredicateHeads {
            weights: weights.try_into().expect("three heads"),
            biases: biases.try_into().expect("three heads"),
            sizes,
        })
    }

    /// Raw logits per type, each `[P, |type|]`.
    pub fn forward(&self, g: &mut Graph, rep: Var) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        for t in 0..3 {
            let (w, b) = (g.param(self.weights[t]), g.param(self.biases[t]));
            out.push(g.linear(rep, w, Some(b))?);
        }
        Ok(out.try_into().expect("three heads"))
    }
}

/// Per-type confidences for ranking: softmax over the attention logits,
/// sigmoid for spatial and contact.
pub fn predicate_confidences(logits: &[Vec<f64>; 3]) -> [Vec<f64>; 3] {
    let mut att = logits[0].clone();
    softmax_in_place(&mut att);
    [
        att,
        logits[1].iter().map(|&x| sigmoid(x)).collect(),
        logits[2].iter().map(|&x| sigmoid(x)).collect(),
    ]
}

/// Sigmoid of every logit, the confidence used by the margin loss and by
/// thresholding.
pub fn sigmoid_confidences(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| sigmoid(x)).collect()
}

/// Annotated predicate ids of one pair, per type.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairTargets {
    pub positives: [Vec<usize>; 3],
}

impl PairTargets {
    /// Complement of the positives within each type's vocabulary.
    pub fn negatives(&self, sizes: [usize; 3]) -> [Vec<usize>; 3] {
        std::array::from_fn(|t| (0..sizes[t]).filter(|i| !self.positives[t].contains(i)).collect())
    }
}

/// `sum_{p in pos} sum_{q in neg} max(0, 1 - s_p + s_q)` on plain scores.
pub fn margin_loss(scores: &[f64], positives: &[usize], negatives: &[usize]) -> f64 {
    let mut loss = 0.0;
    for &p in positives {
        for &q in negatives {
            loss += (1.0 - scores[p] + scores[q]).max(0.0);
        }
    }
    loss
}

#[derive(Clone, Debug)]
pub struct ObjectClassifier {
    pub num_classes: usize,
    pub w_e: ParamId,
    pub pos1_w: ParamId,
    pub pos1_b: ParamId,
    pub pos2_w: ParamId,
    pub pos2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub bn_g: ParamId,
    pub bn_b: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub bn_momentum: f64,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl ObjectClassifier {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.num_object_classes;
        let concat = cfg.visual_dim + cfg.semantic_dim + cfg.pos_dim;
        Ok(ObjectClassifier {
            num_classes: c,
            w_e: store.weight("objcls.embed", c, cfg.semantic_dim)?,
            pos1_w: store.weight("objcls.pos1.w", 4, cfg.pos_hidden)?,
            pos1_b: store.zeros("objcls.pos1.b", &[cfg.pos_hidden])?,
            pos2_w: store.weight("objcls.pos2.w", cfg.pos_hidden, cfg.pos_dim)?,
            pos2_b: store.zeros("objcls.pos2.b", &[cfg.pos_dim])?,
            fc1_w: store.weight("objcls.fc1.w", concat, cfg.obj_hidden)?,
            fc1_b: store.zeros("objcls.fc1.b", &[cfg.obj_hidden])?,
            bn_g: store.ones("objcls.bn.g", &[cfg.obj_hidden])?,
            bn_b: store.zeros("objcls.bn.b", &[cfg.obj_hidden])?,
            bn_mean: store.buffer("objcls.bn.running_mean", crate::numerics::Tensor::zeros(&[cfg.obj_hidden]))?,
            bn_var: store.buffer("objcls.bn.running_var", crate::numerics::Tensor::full(&[cfg.obj_hidden], 1.0))?,
            bn_momentum: cfg.bn_momentum,
            fc2_w: store.weight("objcls.fc2.w", cfg.obj_hidden, c + 1)?,
            fc2_b: store.zeros("objcls.fc2.b", &[c + 1])?,
        })
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }

    /// `[N, C+1]` logits from visual features `[N, D_v]`, detector
    /// distributions `[N, C]` and normalized boxes `[N, 4]`.
    pub fn forward(&self, g: &mut Graph, visual: Var, dist: Var, boxes: Var, train: bool) -> Result<Var> {
        let we = g.param(self.w_e);
        let sem = g.matmul(dist, we)?;
        let (w, b) = (g.param(self.pos1_w), g.param(self.pos1_b));
        let pos = g.linear(boxes, w, Some(b))?;
        let pos = g.relu(pos);
        let (w, b) = (g.param(self.pos2_w), g.param(self.pos2_b));
        let pos = g.linear(pos, w, Some(b))?;
        let x = g.concat_cols(&[visual, sem, pos])?;
        let (w, b) = (g.param(self.fc1_w), g.param(self.fc1_b));
        let h = g.linear(x, w, Some(b))?;
        let (bg, bb) = (g.param(self.bn_g), g.param(self.bn_b));
        let h = g.batch_norm(h, bg, bb, self.bn_mean, self.bn_var, self.bn_momentum, train)?;
        let h = g.relu(h);
        let (w, b) = (g.param(self.fc2_w), g.param(self.fc2_b));
        g.linear(h, w, Some(b))
    }
}

/// Predicate term of the objective: per-type margin loss on sigmoid
/// confidences, summed over types and averaged over pairs. `rows` selects the
/// annotated pairs inside the logits.
pub fn predicate_loss(
    g: &mut Graph,
    logits: &[Var; 3],
    rows: &[usize],
    targets: &[PairTargets],
    sizes: [usize; 3],
) -> Result<Option<Var>> {
    if rows.len() != targets.len() {
        return Err(Error::Contract(format!("{} rows for {} targets", rows.len(), targets.len())));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for t in 0..3 {
        let sel = g.gather_rows(logits[t], rows)?;
        let conf = g.sigmoid(sel);
        let pos: Vec<Vec<usize>> = targets.iter().map(|p| p.positives[t].clone()).collect();
        let neg: Vec<Vec<usize>> = targets.iter().map(|p| p.negatives(sizes)[t].clone()).collect();
        let l = g.multilabel_margin(conf, &pos, &neg)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.expect("three types");
    Ok(Some(g.scale(total, 1.0 / rows.len() as f64)))
}

/// `L_p + L_o` with either term omitted when it has no samples.
pub fn total_loss(g: &mut Graph, predicate: Option<Var>, object: Option<Var>) -> Result<Var> {
    match (predicate, object) {
        (Some(p), Some(o)) => g.add(p, o),
        (Some(p), None) => Ok(p),
        (None, Some(o)) => Ok(o),
        (None, None) => Err(Error::Contract("loss with neither pairs nor objects".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Precision, Tensor};

    #[test]
    fn margin_examples() {
        assert_eq!(margin_loss(&[1.0, 0.0, 0.0], &[0], &[1, 2]), 0.0);
        assert!((margin_loss(&[0.5, 0.2, 0.1], &[0], &[1, 2]) - 1.3).abs() < 1e-12);
        assert_eq!(margin_loss(&[0.3, 0.2], &[0, 1], &[]), 0.0);
    }

    #[test]
    fn negatives_are_complement() {
        let t = PairTargets {
            positives: [vec![1], vec![0, 2], vec![]],
        };
        assert_eq!(t.negatives([2, 3, 2]), [vec![0], vec![1], vec![0, 1]]);
    }

    #[test]
    fn zero_heads_give_half_confidence() {
        let mut store = ParamStore::new(0, Precision::F64);
        let heads = PredicateHeads::new(&mut store, 4, [3, 6, 17]).unwrap();
        for t in 0..3 {
            store.get_mut(heads.weights[t]).value.data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(&[2, 4], 0.7));
        let logits = heads.forward(&mut g, x).unwrap();
        let lens: Vec<usize> = logits.iter().map(|&l| g.cols(l)).collect();
        assert_eq!(lens, vec![3, 6, 17]);
        for l in logits {
            assert!(sigmoid_confidences(g.data(l)).iter().all(|&c| c == 0.5));
        }
    }

    #[test]
    fn paper_object_classifier_dims() {
        let cfg = ModelConfig::paper();
        let mut store = ParamStore::new(0, Precision::F32);
        let oc = ObjectClassifier::new(&mut store, &cfg).unwrap();
        assert_eq!(store.value(oc.fc1_w).shape(), &[2376, 1024]);
        assert_eq!(store.value(oc.fc2_w).shape(), &[1024, 37]);
    }

    #[test]
    fn object_classifier_outputs_distribution() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new(5, Precision::F64);
        let oc = ObjectClassifier::new(&mut store, &cfg).unwrap();
        let mut g = Graph::new(&store);
        let v = g.input(Tensor::full(&[3, cfg.visual_dim], 0.2));
        let d = g.input(Tensor::full(&[3, cfg.num_object_classes], 1.0 / 6.0));
        let b = g.matrix(3, 4, vec![0.1, 0.1, 0.5, 0.5, 0.0, 0.0, 1.0, 1.0, 0.2, 0.3, 0.4, 0.9]).unwrap();
        let logits = oc.forward(&mut g, v, d, b, false).unwrap();
        let p = g.softmax_rows(logits).unwrap();
        for r in 0..3 {
            let s: f64 = g.data(p)[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
