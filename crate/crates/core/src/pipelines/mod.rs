//! End-to-end learning strategies: supervised (pre-)training, one-shot
//! prompt-attention training and inference, and the two-stage
//! partially-supervised procedure.

mod manifest;
mod oneshot;
mod partial;
mod supervised;

pub use manifest::{loss_csv, EpochLog, RunManifest};
pub use oneshot::{infer_one_shot, one_shot_gradients, one_shot_probs, train_one_shot};
pub use partial::{
    generate_pseudo_labels, make_partial, pixel_agreement, run_partial, save_pseudo_dataset, train_stage1,
    train_stage2, record_prompts, PartialOutcome, PartialSample,
};
pub use supervised::{infer_plain, pretrain, train_supervised};

use std::path::{Path, PathBuf};

use crate::attention::AttentionConfig;
use crate::dataio::{PromptPair, Sample};
use crate::error::{Error, Result};
use crate::image::{ClassMap, GrayImage};
use crate::metrics::{self, DscReport};
use crate::segnet::{NetConfig, NetVars, Network};
use crate::tensor::{Adam, Graph, LrSchedule, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Architecture; its `seed` is replaced by [`TrainConfig::seed`].
    pub net: NetConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub tau: f64,
    pub prompt_size: usize,
    /// Top-left corner of the prompt rectangle; centred when `None`.
    pub prompt_origin: Option<(usize, usize)>,
    pub seed: u64,
    /// Optimizer steps per epoch when training from a single image.
    pub oneshot_steps: usize,
    pub augment: bool,
    /// Add the prompt-branch term to the stage-1 objective.
    pub prompt_loss: bool,
    /// Replace the pseudo mask by the known labels inside the annotated
    /// rectangle during stage 1.
    pub pseudo_gt_in_rect: bool,
    /// Overwrite generated pseudo labels with the known rectangle.
    pub paste_gt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            batch_size: 4,
            epochs: 200,
            base_lr: 1e-3,
            tau: 2.0,
            prompt_size: 16,
            prompt_origin: None,
            seed: 0,
            oneshot_steps: 8,
            augment: true,
            prompt_loss: true,
            pseudo_gt_in_rect: false,
            paste_gt: true,
        }
    }
}

impl TrainConfig {
    /// Desk-scale run: 20 epochs with decays at 18 and 19.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let s = self.schedule();
        if s.milestones.iter().any(|&(at, _)| at == 0 || at >= self.epochs)
            || s.milestones.windows(2).any(|w| w[0].0 >= w[1].0)
        {
            return Err(Error::Config(format!(
                "epochs={} leaves no room for both learning-rate decays (need at least 20)",
                self.epochs
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        AttentionConfig::new(self.tau)?;
        if self.prompt_size == 0 {
            return Err(Error::Config("prompt_size must be positive".into()));
        }
        if self.oneshot_steps == 0 {
            return Err(Error::Config("oneshot_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::for_total_epochs(self.base_lr, self.epochs)
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.tau)
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            seed: self.seed,
            ..self.net.clone()
        }
    }

    pub fn fresh_network(&self) -> Result<Network> {
        Network::build(self.net_config())
    }

    pub fn record(&self, m: &mut RunManifest) {
        m.set("seed", self.seed);
        m.set("epochs", self.epochs);
        m.set("batch_size", self.batch_size);
        m.set("lr", format!("{:e}", self.base_lr));
        m.set("tau", format!("{:e}", self.tau));
        m.set("prompt_size", self.prompt_size);
        if let Some((r, c)) = self.prompt_origin {
            m.set("prompt_origin", format!("{r},{c}"));
        }
        m.set("oneshot_steps", self.oneshot_steps);
        m.set("augment", self.augment);
        m.set("prompt_loss", self.prompt_loss);
        m.set("pseudo_gt_in_rect", self.pseudo_gt_in_rect);
        m.set("paste_gt", self.paste_gt);
        m.set("in_channels", self.net.in_channels);
        m.set("num_classes", self.net.num_classes);
        m.set("depth", self.net.depth);
        m.set("base_width", self.net.base_width);
    }
}

/// Trained network with its per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |e| e.loss)
    }
}

/// Stacks single-channel images into `[B, 1, H, W]`.
pub fn image_batch(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.height() != h || im.width() != w {
            return Err(Error::shape(
                "image_batch",
                format!("{h}x{w} vs {}x{}", im.height(), im.width()),
            ));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new([images.len(), 1, h, w], data)
}

/// `[C, H*W]` view of batch element `b` of a `[B, C, H, W]` node.
pub(crate) fn flat_element(g: &mut Graph, batch: Var, b: usize) -> Result<Var> {
    let s = g.shape(batch).to_vec();
    let e = g.index(batch, b)?;
    g.reshape(e, &[s[1], s[2] * s[3]])
}

pub(crate) fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let st = g.stack(terms)?;
    let total = g.sum_all(st)?;
    g.scale(total, 1.0 / terms.len() as f64)
}

/// Loss handles produced by one step's closure.
pub(crate) struct StepLoss {
    pub total: Var,
    pub pseudo: Option<Var>,
    pub prompt: Option<Var>,
}

/// Shared Adam loop. `step_loss(graph, net, vars, epoch, step)` builds the
/// batch objective on a fresh graph.
pub(crate) fn optimize<F>(
    net: &mut Network,
    cfg: &TrainConfig,
    steps_per_epoch: usize,
    mut step_loss: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&mut Graph, &Network, &NetVars, usize, usize) -> Result<StepLoss>,
{
    let schedule = cfg.schedule();
    let mut adam = Adam::new(net.params().iter().map(|p| &p.value), schedule.clone());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut total, mut pseudo, mut prompt) = (0.0, 0.0, 0.0);
        let mut split = false;
        for step in 0..steps_per_epoch {
            let mut g = Graph::new();
            let vars = net.register(&mut g)?;
            let loss = step_loss(&mut g, net, &vars, epoch, step)?;
            total += g.value(loss.total).item()?;
            if let Some(p) = loss.pseudo {
                pseudo += g.value(p).item()?;
                split = true;
            }
            if let Some(p) = loss.prompt {
                prompt += g.value(p).item()?;
            }
            let grads = g.backward(loss.total)?;
            let grads: Vec<Tensor> = vars
                .vars()
                .iter()
                .zip(net.params())
                .map(|(&v, p)| {
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
                })
                .collect();
            adam.step(net.params_mut().iter_mut().map(|p| &mut p.value), &grads, epoch)?;
        }
        let n = steps_per_epoch as f64;
        let (pseudo, prompt) = (pseudo / n, prompt / n);
        log.push(EpochLog {
            epoch: epoch + 1,
            loss: if split { pseudo + prompt } else { total / n },
            loss_pseudo: pseudo,
            loss_prompt: prompt,
            lr: schedule.lr(epoch),
        });
    }
    Ok(log)
}

/// How a model is applied at test time.
#[derive(Clone, Copy, Debug)]
pub enum EvalMode<'a> {
    Plain,
    Prompted { prompt: &'a PromptPair, tau: f64 },
}

pub fn predict_with(net: &Network, image: &GrayImage, mode: EvalMode<'_>) -> Result<ClassMap> {
    match mode {
        EvalMode::Plain => infer_plain(net, image),
        EvalMode::Prompted { prompt, tau } => infer_one_shot(net, image, prompt, tau),
    }
}

/// Predictions for `samples` in order; images are processed in parallel
/// when the `parallel` feature is on.
pub fn predict_all(net: &Network, samples: &[Sample], mode: EvalMode<'_>) -> Result<Vec<ClassMap>> {
    crate::par::map(samples, |s| predict_with(net, &s.image, mode))
        .into_iter()
        .collect()
}

/// Pooled Dice over a test set.
pub fn evaluate(net: &Network, test: &[Sample], mode: EvalMode<'_>) -> Result<DscReport> {
    if test.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty test set".into()));
    }
    let preds = predict_all(net, test, mode)?;
    let gts: Vec<ClassMap> = test.iter().map(|s| s.label.clone()).collect();
    metrics::fold_report(&preds, &gts, net.config().num_classes)
}

/// Writes `weights.pseg` (+ `.cfg`), `loss.csv` and `manifest.txt` into
/// `dir`; returns the weight path. The manifest names files relative to
/// `dir`.
pub fn save_outcome(dir: &Path, outcome: &TrainOutcome, manifest: &mut RunManifest) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let weights = dir.join("weights.pseg");
    outcome.network.save(&weights)?;
    let csv = dir.join("loss.csv");
    std::fs::write(&csv, loss_csv(&outcome.log)).map_err(|e| Error::io(&csv, e))?;
    manifest.set("run.loss_log", "loss.csv");
    manifest.set("run.weights", "weights.pseg");
    manifest.set("run.final_loss", format!("{:e}", outcome.final_loss()));
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(weights)
}
