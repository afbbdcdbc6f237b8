use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{flat_element, image_batch, mean_of, optimize, RunManifest, StepLoss, TrainConfig, TrainOutcome};
use super::{infer_one_shot, train_supervised};
use crate::attention::{self, attention_transfer_var};
use crate::dataio::{self, extract_prompt, mask_partial, transform, PromptPair, Sample};
use crate::error::{Error, Result};
use crate::image::{ClassMap, Rect, IGNORE};
use crate::losses::{cross_entropy_var, pseudo_mask_of, Ignore};
use crate::rng;
use crate::segnet::{NetVars, Network};
use crate::tensor::Graph;

/// Partially labelled training image with its own annotated rectangle as
/// prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialSample {
    pub sample: Sample,
    pub prompt: PromptPair,
}

/// Hides every label of `full` outside the square at `origin` and crops
/// that square as the prompt.
pub fn make_partial(full: &Sample, origin: Option<(usize, usize)>, size: usize) -> Result<PartialSample> {
    let prompt = extract_prompt(full, origin, size)?;
    let sample = mask_partial(full, prompt.rect())?;
    Ok(PartialSample { sample, prompt })
}

fn check_partial(p: &PartialSample, num_classes: usize) -> Result<()> {
    let s = &p.sample;
    s.label.validate(num_classes)?;
    p.prompt.label.validate(num_classes)?;
    if s.label.annotated_count() == 0 {
        return Err(Error::Data(format!("{} has no annotated rectangle", s.id)));
    }
    let r = p.prompt.rect();
    r.check_inside(s.height(), s.width())?;
    if p.prompt.label.has_ignore() || s.label.crop(r.row, r.col, r.height, r.width)? != p.prompt.label {
        return Err(Error::Data(format!(
            "prompt of {} does not match its annotated rectangle",
            s.id
        )));
    }
    Ok(())
}

/// Augmented target plus a map that is [`IGNORE`] exactly where the
/// transform sampled outside the frame.
fn augmented_target(s: &Sample, cfg: &TrainConfig, idx: u64) -> (Sample, ClassMap) {
    if !cfg.augment {
        return (s.clone(), ClassMap::filled(s.height(), s.width(), 0));
    }
    let mut r = rng::stream(cfg.seed, "augment.stage1", idx);
    let flip = r.gen_bool(0.5);
    let theta = r.gen_range(-90.0..=90.0);
    let frame = Sample {
        image: s.image.clone(),
        label: ClassMap::filled(s.height(), s.width(), 0),
        id: String::new(),
    };
    (transform(s, flip, theta), transform(&frame, flip, theta).label)
}

/// Stage-1 pseudo mask: argmax of `o`, optionally overridden by known
/// labels, with out-of-frame pixels excluded.
fn stage1_mask(o: &crate::tensor::Tensor, target: &Sample, frame: &ClassMap, use_gt: bool) -> Result<ClassMap> {
    let mut m = pseudo_mask_of(o, target.height(), target.width())?;
    for ((v, &known), &f) in m.labels_mut().iter_mut().zip(target.label.labels()).zip(frame.labels()) {
        if f == IGNORE {
            *v = IGNORE;
        } else if use_gt && known != IGNORE {
            *v = known;
        }
    }
    Ok(m)
}

fn stage1_objective(
    g: &mut Graph,
    net: &Network,
    vars: &NetVars,
    batch: &[(Sample, ClassMap, &PromptPair)],
    cfg: &TrainConfig,
) -> Result<StepLoss> {
    let att = cfg.attention()?;
    let c = net.config().num_classes;
    let images: Vec<_> = batch.iter().map(|(s, _, _)| &s.image).collect();
    let x = g.input(image_batch(&images)?)?;
    let feats = net.forward(g, vars, x)?;
    let mut pseudo_terms = Vec::with_capacity(batch.len());
    let mut prompt_terms = Vec::with_capacity(batch.len());
    for (b, (target, frame, prompt)) in batch.iter().enumerate() {
        let pin = g.input(image_batch(&[&prompt.image])?)?;
        let pf = net.forward(g, vars, pin)?;
        let p = flat_element(g, pf, 0)?;
        let q = g.input(attention::onehot(&prompt.label, c)?.tensor().clone())?;
        let xb = flat_element(g, feats, b)?;
        let o = attention_transfer_var(g, xb, p, q, &att)?;
        let m = stage1_mask(g.value(o), target, frame, cfg.pseudo_gt_in_rect)?;
        pseudo_terms.push(cross_entropy_var(g, o, &m, Ignore::Skip)?);
        if cfg.prompt_loss {
            prompt_terms.push(cross_entropy_var(g, p, &prompt.label, Ignore::Reject)?);
        }
    }
    let pseudo = mean_of(g, &pseudo_terms)?;
    if prompt_terms.is_empty() {
        return Ok(StepLoss {
            total: pseudo,
            pseudo: Some(pseudo),
            prompt: None,
        });
    }
    let prompt = mean_of(g, &prompt_terms)?;
    Ok(StepLoss {
        total: g.add(pseudo, prompt)?,
        pseudo: Some(pseudo),
        prompt: Some(prompt),
    })
}

/// Stage 1: each element attends to its own prompt; the argmax of the
/// transferred weights is recomputed every forward pass and used as target,
/// plus (optionally) supervision of the prompt branch.
pub fn train_stage1(partials: &[PartialSample], cfg: &TrainConfig, init: Option<Network>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if partials.is_empty() {
        return Err(Error::Data("stage 1 needs at least one partial sample".into()));
    }
    for p in partials {
        check_partial(p, cfg.net.num_classes)?;
    }
    let mut net = match init {
        Some(n) => n,
        None => cfg.fresh_network()?,
    };
    let b = cfg.batch_size;
    let steps = partials.len().div_ceil(b);
    let mut order: Vec<usize> = Vec::new();
    let log = optimize(&mut net, cfg, steps, |g, net, vars, epoch, step| {
        if step == 0 {
            order = (0..partials.len()).collect();
            order.shuffle(&mut rng::stream(cfg.seed, "order.stage1", epoch as u64));
        }
        let batch: Vec<_> = order[step * b..((step + 1) * b).min(partials.len())]
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let idx = ((epoch * steps + step) * b + k) as u64;
                let (t, f) = augmented_target(&partials[i].sample, cfg, idx);
                (t, f, &partials[i].prompt)
            })
            .collect();
        stage1_objective(g, net, vars, &batch, cfg)
    })?;
    Ok(TrainOutcome { network: net, log })
}

/// Full label maps predicted for every partial sample from its own prompt.
/// With `paste_gt` the annotated rectangle is copied over the prediction.
pub fn generate_pseudo_labels(
    net: &Network,
    partials: &[PartialSample],
    tau: f64,
    paste_gt: bool,
) -> Result<Vec<Sample>> {
    crate::par::map(partials, |p| {
        let mut label = infer_one_shot(net, &p.sample.image, &p.prompt, tau)?;
        if paste_gt {
            let Rect { row, col, height, width } = p.prompt.rect();
            for y in 0..height {
                for x in 0..width {
                    label.set(row + y, col + x, p.prompt.label.get(y, x));
                }
            }
        }
        Sample::new(p.sample.image.clone(), label, p.sample.id.clone())
    })
    .into_iter()
    .collect()
}

pub fn save_pseudo_dataset(pseudo: &[Sample], dir: &Path) -> Result<()> {
    dataio::save_dataset(pseudo, dir)
}

/// Stage 2: a fresh network trained on the pseudo labels alone.
pub fn train_stage2(pseudo: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if let Some(s) = pseudo.iter().find(|s| s.label.has_ignore()) {
        return Err(Error::Data(format!("pseudo label {} has unannotated pixels", s.id)));
    }
    train_supervised(pseudo, cfg, None)
}

/// Fraction of pixels on which `pred` and `truth` agree.
pub fn pixel_agreement(pred: &[Sample], truth: &[Sample]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!("{} vs {} samples", pred.len(), truth.len())));
    }
    let (mut same, mut total) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if !p.label.same_shape(&t.label) {
            return Err(Error::shape("pixel_agreement", format!("{} vs {}", p.id, t.id)));
        }
        same += p.label.labels().iter().zip(t.label.labels()).filter(|(a, b)| a == b).count();
        total += p.label.len();
    }
    if total == 0 {
        return Err(Error::Data("no pixels to compare".into()));
    }
    Ok(same as f64 / total as f64)
}

/// Everything produced by the two-stage procedure.
#[derive(Clone, Debug)]
pub struct PartialOutcome {
    pub stage1: TrainOutcome,
    pub pseudo: Vec<Sample>,
    pub stage2: TrainOutcome,
}

pub fn run_partial(partials: &[PartialSample], cfg: &TrainConfig, init: Option<Network>) -> Result<PartialOutcome> {
    let stage1 = train_stage1(partials, cfg, init)?;
    let pseudo = generate_pseudo_labels(&stage1.network, partials, cfg.tau, cfg.paste_gt)?;
    let stage2 = train_stage2(&pseudo, cfg)?;
    Ok(PartialOutcome { stage1, pseudo, stage2 })
}

/// Records where each sample's prompt was cut from.
pub fn record_prompts(m: &mut RunManifest, partials: &[PartialSample]) {
    for p in partials {
        let (h, w) = p.prompt.size();
        m.set(
            format!("prompt.{}", p.sample.id),
            format!("{},{} {}x{}", p.prompt.origin.0, p.prompt.origin.1, h, w),
        );
    }
}
