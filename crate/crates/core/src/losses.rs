//! Cross-entropy objectives.
//!
//! Every loss has the form `-(1/C) Σ_c Σ_i y_i^c log softmax(z_i)^c` with a
//! class softmax over whatever `z` is supplied, and no division by the pixel
//! count. For the attention head `z` is the transferred class weights `o`,
//! which already lie on the simplex; the extra softmax is applied anyway.

use crate::attention::{self, ClassProbGrid, FeatureGrid};
use crate::error::{Error, Result};
use crate::image::{ClassMap, IGNORE};
use crate::tensor::{Graph, Tensor, Var};

/// What to do with [`IGNORE`] pixels in a target map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ignore {
    Reject,
    Skip,
}

/// One-hot `[C, N]` target with all-zero columns at skipped pixels.
fn target_tensor(labels: &ClassMap, num_classes: usize, ignore: Ignore, op: &'static str) -> Result<Tensor> {
    if ignore == Ignore::Reject && labels.has_ignore() {
        return Err(Error::Data(format!("{op}: target contains unannotated (IGNORE) pixels")));
    }
    labels.validate(num_classes)?;
    let n = labels.len();
    let mut t = Tensor::zeros([num_classes, n]);
    for (i, &l) in labels.labels().iter().enumerate() {
        if l != IGNORE {
            t.data_mut()[l as usize * n + i] = 1.0;
        }
    }
    Ok(t)
}

/// `-(1/C) Σ y log softmax_c(z)` for `z: [C, N]` against an `N`-pixel map.
pub fn cross_entropy_var(g: &mut Graph, z: Var, labels: &ClassMap, ignore: Ignore) -> Result<Var> {
    const OP: &str = "cross_entropy";
    let s = g.shape(z).to_vec();
    if s.len() != 2 || s[1] != labels.len() {
        return Err(Error::shape(
            OP,
            format!("scores {s:?} vs {}x{} labels", labels.height(), labels.width()),
        ));
    }
    let c = s[0];
    let y = g.input(target_tensor(labels, c, ignore, OP)?)?;
    let ls = g.log_softmax(z, 0)?;
    let picked = g.mul(ls, y)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / c as f64)
}

/// One-shot objective on transferred class weights `o: [C, N]`; `y` must be
/// fully annotated.
pub fn one_shot_loss_var(g: &mut Graph, o: Var, y: &ClassMap) -> Result<Var> {
    cross_entropy_var(g, o, y, Ignore::Reject)
}

pub fn pseudo_mask_of(o: &Tensor, height: usize, width: usize) -> Result<ClassMap> {
    ClassMap::new(height, width, attention::argmax_classes(o)?)
}

/// Argmax mask of `o`. Integer-valued, hence outside any gradient path.
pub fn pseudo_mask(o: &ClassProbGrid) -> ClassMap {
    attention::predict(o)
}

/// Graph handles for the combined pseudo-label + prompt objective.
#[derive(Clone, Copy, Debug)]
pub struct PartialLossVars {
    pub total: Var,
    pub pseudo: Var,
    pub prompt: Option<Var>,
}

/// `Loss = Loss_pseudo + Loss_prompt`.
///
/// `o: [C, N]` are the transferred weights for the target, `m` the pseudo
/// mask, `prompt_logits: [C, M]` the raw prompt-branch output and `q_labels`
/// the prompt annotation. With `include_prompt` unset only the pseudo term
/// is formed.
pub fn partial_loss_var(
    g: &mut Graph,
    o: Var,
    m: &ClassMap,
    prompt_logits: Var,
    q_labels: &ClassMap,
    include_prompt: bool,
) -> Result<PartialLossVars> {
    if m.has_ignore() {
        return Err(Error::Data("pseudo mask must cover every pixel".into()));
    }
    let pseudo = cross_entropy_var(g, o, m, Ignore::Reject)?;
    if !include_prompt {
        return Ok(PartialLossVars {
            total: pseudo,
            pseudo,
            prompt: None,
        });
    }
    let prompt = cross_entropy_var(g, prompt_logits, q_labels, Ignore::Reject)?;
    let total = g.add(pseudo, prompt)?;
    Ok(PartialLossVars {
        total,
        pseudo,
        prompt: Some(prompt),
    })
}

/// Loss value with its named components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub pseudo: f64,
    pub prompt: f64,
}

pub fn one_shot_loss(o: &ClassProbGrid, y: &ClassMap) -> Result<f64> {
    if !(y.height() == o.height() && y.width() == o.width()) {
        return Err(Error::shape(
            "one_shot_loss",
            format!("{}x{} vs {}x{}", o.height(), o.width(), y.height(), y.width()),
        ));
    }
    let mut g = Graph::new();
    let ov = g.input(o.tensor().clone())?;
    let l = one_shot_loss_var(&mut g, ov, y)?;
    g.value(l).item()
}

pub fn partial_loss(
    o: &ClassProbGrid,
    m: &ClassMap,
    prompt_logits: &FeatureGrid,
    q_labels: &ClassMap,
    include_prompt: bool,
) -> Result<LossValue> {
    let mut g = Graph::new();
    let ov = g.input(o.tensor().clone())?;
    let pv = g.input(prompt_logits.flatten())?;
    let vars = partial_loss_var(&mut g, ov, m, pv, q_labels, include_prompt)?;
    Ok(LossValue {
        total: g.value(vars.total).item()?,
        pseudo: g.value(vars.pseudo).item()?,
        prompt: match vars.prompt {
            Some(p) => g.value(p).item()?,
            None => 0.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(c: usize, n: usize, data: Vec<f64>) -> ClassProbGrid {
        ClassProbGrid::new(Tensor::new([c, n], data).unwrap(), 1, n).unwrap()
    }

    #[test]
    fn uniform_single_pixel_is_half_ln2() {
        for a in [0.0, 0.3, 1.0] {
            for class in [0u8, 1] {
                let l = one_shot_loss(&grid(2, 1, vec![a, a]), &ClassMap::filled(1, 1, class)).unwrap();
                assert!((l - 0.5 * 2f64.ln()).abs() < 1e-12, "{l}");
            }
        }
    }

    #[test]
    fn saturated_correct_prediction_is_tiny() {
        let l = one_shot_loss(&grid(2, 1, vec![0.0, 20.0]), &ClassMap::filled(1, 1, 1)).unwrap();
        assert!(l < 1e-8, "{l}");
    }

    #[test]
    fn ignore_and_shape_errors() {
        let o = grid(2, 2, vec![0.5; 4]);
        assert!(one_shot_loss(&o, &ClassMap::new(1, 2, vec![0, IGNORE]).unwrap()).is_err());
        assert!(one_shot_loss(&o, &ClassMap::filled(1, 3, 0)).is_err());
    }

    #[test]
    fn pseudo_mask_prefers_larger_weight() {
        let m = pseudo_mask(&grid(2, 2, vec![0.9, 0.5, 0.1, 0.5]));
        assert_eq!(m.labels(), &[0, 0]);
    }

    #[test]
    fn consistent_predictions_have_near_zero_loss() {
        let m = ClassMap::new(1, 2, vec![0, 1]).unwrap();
        let o = grid(2, 2, vec![20.0, 0.0, 0.0, 20.0]);
        let q = ClassMap::new(1, 2, vec![1, 0]).unwrap();
        let p = FeatureGrid::new(Tensor::new([2, 1, 2], vec![0.0, 20.0, 20.0, 0.0]).unwrap()).unwrap();
        let l = partial_loss(&o, &m, &p, &q, true).unwrap();
        assert!(l.total < 1e-6, "{l:?}");
        assert_eq!(l.total, l.pseudo + l.prompt);
    }

    #[test]
    fn pseudo_only_matches_one_shot_form() {
        let o = grid(2, 3, vec![0.2, 0.7, 0.5, 0.8, 0.3, 0.5]);
        let m = pseudo_mask(&o);
        let p = FeatureGrid::new(Tensor::zeros([2, 1, 1])).unwrap();
        let q = ClassMap::filled(1, 1, 0);
        let l = partial_loss(&o, &m, &p, &q, false).unwrap();
        assert_eq!(l.prompt, 0.0);
        assert_eq!(l.total, one_shot_loss(&o, &m).unwrap());
    }

    #[test]
    fn mask_with_ignore_rejected() {
        let o = grid(2, 1, vec![0.5, 0.5]);
        let p = FeatureGrid::new(Tensor::zeros([2, 1, 1])).unwrap();
        let q = ClassMap::filled(1, 1, 0);
        assert!(partial_loss(&o, &ClassMap::filled(1, 1, IGNORE), &p, &q, true).is_err());
    }
}
