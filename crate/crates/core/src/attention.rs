//! Cross-attention label transfer.
//!
//! Target features `x: [C, N]` and prompt features `p: [C, M]` give raw
//! scores `s = xᵀp`. Each target row becomes a distribution over prompt
//! locations, `beta = softmax(s / tau)`, and the class weights of target
//! location `i` are the `beta`-weighted mix of the prompt's one-hot labels,
//! `o_i = Σ_j beta_ij q_j`. The prediction is the per-location argmax.
//!
//! The graph-level functions (`*_var`) are what training differentiates
//! through; the value-level wrappers run the same code on a throwaway graph.

use crate::error::{Error, Result};
use crate::image::{ClassMap, IGNORE};
use crate::tensor::{Graph, Tensor, Var};

/// Per-class feature grid `[C, H, W]` produced by one network branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    values: Tensor,
}

impl FeatureGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(
                "feature_grid",
                format!("expected [C, H, W], got {:?}", values.shape()),
            ));
        }
        Ok(FeatureGrid { values })
    }

    /// Rebuilds a grid from its `[C, N]` view.
    pub fn from_flat(flat: Tensor, height: usize, width: usize) -> Result<Self> {
        let c = flat.shape().first().copied().unwrap_or(0);
        Self::new(flat.reshape([c, height, width])?)
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// `[C, N]` view with `N = H * W`.
    pub fn flatten(&self) -> Tensor {
        let (c, n) = (self.channels(), self.height() * self.width());
        self.values.clone().reshape([c, n]).expect("same element count")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    tau: f64,
}

impl AttentionConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive and finite, got {tau}")));
        }
        Ok(AttentionConfig { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Row-stochastic attention `beta: [N, M]` together with the raw scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub scores: Tensor,
    pub beta: Tensor,
}

/// One-hot prompt labels `q: [C, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotLabel {
    q: Tensor,
}

impl OneHotLabel {
    pub fn tensor(&self) -> &Tensor {
        &self.q
    }

    pub fn classes(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn locations(&self) -> usize {
        self.q.shape()[1]
    }
}

/// Per-location class weights `o: [C, N]` for an `H x W` target.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbGrid {
    o: Tensor,
    height: usize,
    width: usize,
}

impl ClassProbGrid {
    pub fn new(o: Tensor, height: usize, width: usize) -> Result<Self> {
        if o.rank() != 2 || o.shape()[1] != height * width {
            return Err(Error::shape(
                "class_prob_grid",
                format!("{:?} is not [C, {}]", o.shape(), height * width),
            ));
        }
        Ok(ClassProbGrid { o, height, width })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.o
    }

    pub fn classes(&self) -> usize {
        self.o.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[C, H, W]` view.
    pub fn to_grid(&self) -> Tensor {
        let c = self.classes();
        self.o
            .clone()
            .reshape([c, self.height, self.width])
            .expect("same element count")
    }
}

/// `beta = row_softmax(xᵀp / tau)` on the graph. Returns `(scores, beta)`.
pub fn attention_map_var(g: &mut Graph, x: Var, p: Var, cfg: &AttentionConfig) -> Result<(Var, Var)> {
    let (xs, ps) = (g.shape(x), g.shape(p));
    if xs.len() != 2 || ps.len() != 2 || xs[0] != ps[0] {
        return Err(Error::shape(
            "attention_map",
            format!("target {xs:?} and prompt {ps:?} must be [C, N] and [C, M] with equal C"),
        ));
    }
    let xt = g.transpose(x)?;
    let scores = g.matmul(xt, p)?;
    let scaled = g.scale(scores, 1.0 / cfg.tau())?;
    let beta = g.softmax(scaled, 1)?;
    Ok((scores, beta))
}

/// `o = q betaᵀ`, i.e. `o_i = Σ_j beta_ij q_j`, on the graph.
pub fn label_transfer_var(g: &mut Graph, beta: Var, q: Var) -> Result<Var> {
    let (bs, qs) = (g.shape(beta), g.shape(q));
    if bs.len() != 2 || qs.len() != 2 || bs[1] != qs[1] {
        return Err(Error::shape(
            "label_transfer",
            format!("beta {bs:?} and q {qs:?} must be [N, M] and [C, M]"),
        ));
    }
    let bt = g.transpose(beta)?;
    g.matmul(q, bt)
}

/// `label_transfer_var` of `attention_map_var` as one graph node; the
/// `N x M` attention matrix is never stored.
pub fn attention_transfer_var(g: &mut Graph, x: Var, p: Var, q: Var, cfg: &AttentionConfig) -> Result<Var> {
    g.attention(x, p, q, 1.0 / cfg.tau())
}

pub fn attention_map(x: &FeatureGrid, p: &FeatureGrid, cfg: &AttentionConfig) -> Result<AttentionMap> {
    let mut g = Graph::new();
    let xv = g.input(x.flatten())?;
    let pv = g.input(p.flatten())?;
    let (s, b) = attention_map_var(&mut g, xv, pv, cfg)?;
    Ok(AttentionMap {
        scores: g.value(s).clone(),
        beta: g.value(b).clone(),
    })
}

pub fn label_transfer(
    beta: &AttentionMap,
    q: &OneHotLabel,
    height: usize,
    width: usize,
) -> Result<ClassProbGrid> {
    let mut g = Graph::new();
    let b = g.input(beta.beta.clone())?;
    let qv = g.input(q.q.clone())?;
    let o = label_transfer_var(&mut g, b, qv)?;
    ClassProbGrid::new(g.value(o).clone(), height, width)
}

/// Per-location argmax of a `[C, N]` tensor; ties go to the lowest class.
pub fn argmax_classes(o: &Tensor) -> Result<Vec<u8>> {
    if o.rank() < 2 {
        return Err(Error::shape("predict", format!("{:?} has no class axis", o.shape())));
    }
    let c = o.shape()[0];
    if c == 0 || c > IGNORE as usize {
        return Err(Error::shape("predict", format!("unsupported class count {c}")));
    }
    let n = o.numel() / c;
    let d = o.data();
    Ok((0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + i] > d[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

pub fn predict(o: &ClassProbGrid) -> ClassMap {
    let labels = argmax_classes(&o.o).expect("class prob grid is well formed");
    ClassMap::new(o.height, o.width, labels).expect("matching size")
}

/// One-hot encodes a fully annotated class map into `[C, M]`.
pub fn onehot(labels: &ClassMap, num_classes: usize) -> Result<OneHotLabel> {
    if labels.has_ignore() {
        return Err(Error::Data(
            "one-hot labels need a fully annotated region; crop to the annotation first".into(),
        ));
    }
    labels.validate(num_classes)?;
    let m = labels.len();
    let mut q = Tensor::zeros([num_classes, m]);
    for (j, &l) in labels.labels().iter().enumerate() {
        q.data_mut()[l as usize * m + j] = 1.0;
    }
    Ok(OneHotLabel { q })
}
