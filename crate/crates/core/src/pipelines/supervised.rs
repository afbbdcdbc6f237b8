use rand::seq::SliceRandom;

use super::oneshot::replicate;
use super::{flat_element, image_batch, mean_of, optimize, StepLoss, TrainConfig, TrainOutcome};
use crate::attention;
use crate::dataio::{augment, Sample};
use crate::error::{Error, Result};
use crate::image::{ClassMap, GrayImage};
use crate::losses::{cross_entropy_var, Ignore};
use crate::rng;
use crate::segnet::{NetVars, Network};
use crate::tensor::{Graph, Var};

fn supervised_objective(g: &mut Graph, net: &Network, vars: &NetVars, batch: &[Sample]) -> Result<Var> {
    let images: Vec<&GrayImage> = batch.iter().map(|s| &s.image).collect();
    let x = g.input(image_batch(&images)?)?;
    let out = net.forward(g, vars, x)?;
    let terms = batch
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let z = flat_element(g, out, b)?;
            cross_entropy_var(g, z, &s.label, Ignore::Skip)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(g, &terms)
}

/// Per-pixel cross entropy on the raw network output. A single sample is
/// trained like the one-shot model (replicated, augmented batches); larger
/// sets are reshuffled every epoch and split into `batch_size` chunks.
pub fn train_supervised(samples: &[Sample], cfg: &TrainConfig, init: Option<Network>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("supervised training needs at least one sample".into()));
    }
    for s in samples {
        s.label.validate(cfg.net.num_classes)?;
        if s.label.annotated_count() == 0 {
            return Err(Error::Data(format!("{} carries no labels", s.id)));
        }
    }
    let mut net = match init {
        Some(n) => n,
        None => cfg.fresh_network()?,
    };
    let b = cfg.batch_size;
    let steps = if samples.len() == 1 {
        cfg.oneshot_steps
    } else {
        samples.len().div_ceil(b)
    };
    let mut order: Vec<usize> = Vec::new();
    let log = optimize(&mut net, cfg, steps, |g, net, vars, epoch, step| {
        let batch = if samples.len() == 1 {
            replicate(&samples[0], cfg, "augment.supervised", epoch, step)
        } else {
            if step == 0 {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng::stream(cfg.seed, "order.supervised", epoch as u64));
            }
            order[step * b..((step + 1) * b).min(samples.len())]
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    if cfg.augment {
                        let idx = ((epoch * steps + step) * b + k) as u64;
                        augment(&samples[i], &mut rng::stream(cfg.seed, "augment.supervised", idx))
                    } else {
                        samples[i].clone()
                    }
                })
                .collect()
        };
        Ok(StepLoss {
            total: supervised_objective(g, net, vars, &batch)?,
            pseudo: None,
            prompt: None,
        })
    })?;
    Ok(TrainOutcome { network: net, log })
}

/// Supervised training over the pooled source datasets.
pub fn pretrain(datasets: &[Vec<Sample>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let pooled: Vec<Sample> = datasets.iter().flatten().cloned().collect();
    if pooled.is_empty() {
        return Err(Error::Data("pre-training needs a non-empty dataset".into()));
    }
    train_supervised(&pooled, cfg, None)
}

/// Argmax of the raw network output.
pub fn infer_plain(net: &Network, image: &GrayImage) -> Result<ClassMap> {
    let out = net.infer(&image_batch(&[image])?)?;
    let (c, n) = (out.shape()[1], image.height() * image.width());
    let flat = out.reshape([c, n])?;
    ClassMap::new(image.height(), image.width(), attention::argmax_classes(&flat)?)
}
