use super::{flat_element, image_batch, mean_of, optimize, StepLoss, TrainConfig, TrainOutcome};
use crate::attention::{self, attention_transfer_var, AttentionConfig, ClassProbGrid};
use crate::dataio::{augment, PromptPair, Sample};
use crate::error::{Error, Result};
use crate::image::{ClassMap, GrayImage};
use crate::losses::{cross_entropy_var, Ignore};
use crate::rng;
use crate::segnet::{NetVars, Network};
use crate::tensor::{Graph, Tensor, Var};

/// Transferred class weights `[C, N]` for every element of `targets`.
fn transfer_batch(
    g: &mut Graph,
    net: &Network,
    vars: &NetVars,
    targets: &[&GrayImage],
    prompt: &PromptPair,
    att: &AttentionConfig,
) -> Result<Vec<Var>> {
    let x = g.input(image_batch(targets)?)?;
    let feats = net.forward(g, vars, x)?;
    let pin = g.input(image_batch(&[&prompt.image])?)?;
    let pf = net.forward(g, vars, pin)?;
    let p = flat_element(g, pf, 0)?;
    let q = attention::onehot(&prompt.label, net.config().num_classes)?;
    let q = g.input(q.tensor().clone())?;
    (0..targets.len())
        .map(|b| {
            let xb = flat_element(g, feats, b)?;
            attention_transfer_var(g, xb, p, q, att)
        })
        .collect()
}

fn one_shot_objective(
    g: &mut Graph,
    net: &Network,
    vars: &NetVars,
    targets: &[Sample],
    prompt: &PromptPair,
    att: &AttentionConfig,
) -> Result<Var> {
    let images: Vec<&GrayImage> = targets.iter().map(|s| &s.image).collect();
    let os = transfer_batch(g, net, vars, &images, prompt, att)?;
    let terms = os
        .into_iter()
        .zip(targets)
        .map(|(o, t)| cross_entropy_var(g, o, &t.label, Ignore::Skip))
        .collect::<Result<Vec<_>>>()?;
    mean_of(g, &terms)
}

/// Augmented copies of `sample` forming one step's batch.
pub(crate) fn replicate(sample: &Sample, cfg: &TrainConfig, label: &str, epoch: usize, step: usize) -> Vec<Sample> {
    (0..cfg.batch_size)
        .map(|k| {
            if cfg.augment {
                let idx = ((epoch * cfg.oneshot_steps + step) * cfg.batch_size + k) as u64;
                augment(sample, &mut rng::stream(cfg.seed, label, idx))
            } else {
                sample.clone()
            }
        })
        .collect()
}

/// Trains the prompt-attention model from one labelled image. Each step
/// uses `batch_size` independently augmented copies of `train`; the prompt
/// is left untouched and contributes no loss term of its own.
pub fn train_one_shot(
    train: &Sample,
    prompt: &PromptPair,
    cfg: &TrainConfig,
    init: Option<Network>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if prompt.source_id == train.id {
        return Err(Error::Data(format!(
            "prompt must come from an image other than the training image {}",
            train.id
        )));
    }
    if train.label.has_ignore() {
        return Err(Error::Data(format!("{} is not fully labelled", train.id)));
    }
    train.label.validate(cfg.net.num_classes)?;
    prompt.label.validate(cfg.net.num_classes)?;
    let mut net = match init {
        Some(n) => n,
        None => cfg.fresh_network()?,
    };
    let att = cfg.attention()?;
    let log = optimize(&mut net, cfg, cfg.oneshot_steps, |g, net, vars, epoch, step| {
        let batch = replicate(train, cfg, "augment.oneshot", epoch, step);
        let total = one_shot_objective(g, net, vars, &batch, prompt, &att)?;
        Ok(StepLoss {
            total,
            pseudo: None,
            prompt: None,
        })
    })?;
    Ok(TrainOutcome { network: net, log })
}

/// Parameter gradients of the one-shot objective on an un-augmented batch.
pub fn one_shot_gradients(net: &Network, targets: &[Sample], prompt: &PromptPair, tau: f64) -> Result<Vec<Tensor>> {
    let att = AttentionConfig::new(tau)?;
    let mut g = Graph::new();
    let vars = net.register(&mut g)?;
    let loss = one_shot_objective(&mut g, net, &vars, targets, prompt, &att)?;
    let grads = g.backward(loss)?;
    Ok(vars
        .vars()
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect())
}

/// Class weights transferred from `prompt` onto `image`.
pub fn one_shot_probs(net: &Network, image: &GrayImage, prompt: &PromptPair, tau: f64) -> Result<ClassProbGrid> {
    let att = AttentionConfig::new(tau)?;
    let mut g = Graph::new();
    let vars = net.register_frozen(&mut g)?;
    let o = transfer_batch(&mut g, net, &vars, &[image], prompt, &att)?[0];
    ClassProbGrid::new(g.value(o).clone(), image.height(), image.width())
}

pub fn infer_one_shot(net: &Network, image: &GrayImage, prompt: &PromptPair, tau: f64) -> Result<ClassMap> {
    Ok(attention::predict(&one_shot_probs(net, image, prompt, tau)?))
}
