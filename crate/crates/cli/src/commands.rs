//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};

use promptseg::dataio::{
    dataset_hash, extract_prompt, generate_synthetic, load_dataset, save_dataset, select, split_folds,
    write_fold_manifest, write_label, Family, FoldSplit, PromptPair, Sample, SynthConfig,
};
use promptseg::metrics::{aggregate, class_name, report_csv, DscReport};
use promptseg::pipelines::{
    evaluate, make_partial, pixel_agreement, predict_all, pretrain, record_prompts, run_partial,
    save_outcome, save_pseudo_dataset, train_one_shot, EvalMode, RunManifest, TrainConfig,
};
use promptseg::segnet::Network;

use crate::config::{parse_config, RunConfig};
use crate::{Cli, Command, DataFlags, TrainFlags};

const SEED_ENV: &str = "PROMPTSEG_SEED";

pub fn run(cli: &Cli) -> Result<()> {
    init_threads(cli.common.jobs)?;
    let (cfg, expected_hash) = resolve(cli)?;
    let ctx = Ctx {
        name: cli.command.name(),
        cfg,
        expected_hash,
    };
    match &cli.command {
        Command::Synth { out, .. } => synth(&ctx, out),
        Command::Pretrain { out, .. } => pretrain_cmd(&ctx, out),
        Command::TrainOneshot { out, .. } => train_oneshot_cmd(&ctx, out),
        Command::Infer { out, .. } => infer_cmd(&ctx, out),
        Command::TrainPartial { out, .. } => train_partial_cmd(&ctx, out),
        Command::Eval { out, .. } => eval_cmd(&ctx, out),
        Command::SweepTau { out, .. } => sweep_tau_cmd(&ctx, out),
    }
}

#[cfg(feature = "parallel")]
fn init_threads(jobs: usize) -> Result<()> {
    ensure!(jobs >= 1, "--jobs must be at least 1");
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .context("cannot start worker pool")
}

#[cfg(not(feature = "parallel"))]
fn init_threads(jobs: usize) -> Result<()> {
    ensure!(jobs >= 1, "--jobs must be at least 1");
    Ok(())
}

struct Ctx {
    name: &'static str,
    cfg: RunConfig,
    expected_hash: Option<String>,
}

/// Settings in increasing precedence: config file, replayed manifest,
/// `--set`, dedicated flags, `--seed`. `PROMPTSEG_SEED` only fills a seed
/// that is still unset.
fn resolve(cli: &Cli) -> Result<(RunConfig, Option<String>)> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.common.config {
        cfg = parse_config(path).with_context(|| format!("config {}", path.display()))?;
    }
    let mut expected_hash = None;
    if let Some(path) = &cli.common.manifest {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let m = RunManifest::parse(&text).map_err(|e| anyhow!("manifest {}: {e}", path.display()))?;
        match m.get("command") {
            Some(c) if c == cli.command.name() => {}
            Some(c) => bail!("manifest {} records `{c}`, not `{}`", path.display(), cli.command.name()),
            None => bail!("manifest {} has no command entry", path.display()),
        }
        cfg.merge_text(&text, true)
            .with_context(|| format!("manifest {}", path.display()))?;
        expected_hash = m.get("data.hash").map(str::to_string);
    }
    for kv in &cli.common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v).context("--set")?;
    }
    apply_flags(&mut cfg, &cli.command)?;
    if let Some(seed) = cli.common.seed {
        cfg.set("seed", &seed.to_string())?;
    } else if cfg.get("seed").is_none() {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.set("seed", &v).with_context(|| SEED_ENV.to_string())?;
        }
    }
    if cfg.get("seed").is_none() {
        cfg.set("seed", "0")?;
    }
    Ok((cfg, expected_hash))
}

fn put(cfg: &mut RunConfig, key: &str, value: Option<impl ToString>) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string()).with_context(|| format!("--{}", key.replace('_', "-")))?;
    }
    Ok(())
}

fn put_path(cfg: &mut RunConfig, key: &str, value: &Option<PathBuf>) -> Result<()> {
    put(cfg, key, value.as_ref().map(|p| p.display()))
}

fn put_train(cfg: &mut RunConfig, t: &TrainFlags) -> Result<()> {
    put(cfg, "epochs", t.epochs)?;
    put(cfg, "tau", t.tau)?;
    put(cfg, "prompt_size", t.prompt_size)?;
    put(cfg, "prompt_origin", t.prompt_origin.as_ref())?;
    put_path(cfg, "init_weights", &t.init_weights)
}

fn put_data(cfg: &mut RunConfig, d: &DataFlags) -> Result<()> {
    put_path(cfg, "data", &d.data)?;
    put(cfg, "fold", d.fold)
}

fn apply_flags(cfg: &mut RunConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth { count, size, family, .. } => {
            put(cfg, "count", *count)?;
            put(cfg, "size", *size)?;
            put(cfg, "family", family.map(|f| f.key()))
        }
        Command::Pretrain { data, train, .. } => {
            put(cfg, "data", data.as_ref())?;
            put_train(cfg, train)
        }
        Command::TrainOneshot { data, train, train_id, prompt_id, .. } => {
            put_data(cfg, data)?;
            put_train(cfg, train)?;
            put(cfg, "train_id", train_id.as_ref())?;
            put(cfg, "prompt_id", prompt_id.as_ref())
        }
        Command::Infer { weights, data, mode, prompt, tau, .. }
        | Command::Eval { weights, data, mode, prompt, tau, .. } => {
            put_path(cfg, "weights", weights)?;
            put_data(cfg, data)?;
            put(cfg, "mode", mode.map(|m| m.key()))?;
            put_path(cfg, "prompt", prompt)?;
            put(cfg, "tau", *tau)
        }
        Command::TrainPartial { data, train, .. } => {
            put_data(cfg, data)?;
            put_train(cfg, train)
        }
        Command::SweepTau { data, train, taus, .. } => {
            put_data(cfg, data)?;
            put_train(cfg, train)?;
            put(cfg, "taus", taus.as_ref())
        }
    }
}

impl Ctx {
    fn train_config(&self) -> Result<TrainConfig> {
        let tc = self.cfg.train_config();
        tc.validate()?;
        Ok(tc)
    }

    fn manifest(&self, tc: Option<&TrainConfig>) -> RunManifest {
        let mut m = RunManifest::new();
        m.set("command", self.name);
        if let Some(tc) = tc {
            tc.record(&mut m);
        }
        self.cfg.record(&mut m);
        m
    }

    /// Loads the comma-separated directories under `data` and checks them
    /// against a replayed manifest.
    fn load_data(&self, num_classes: usize, m: &mut RunManifest) -> Result<Vec<Sample>> {
        let dirs = self.cfg.data_dirs("data");
        ensure!(!dirs.is_empty(), "no dataset given (--data or `data=` in the config)");
        let mut samples = Vec::new();
        for dir in &dirs {
            let mut s = load_dataset(dir, num_classes).with_context(|| format!("dataset {}", dir.display()))?;
            ensure!(!s.is_empty(), "dataset {} contains no images", dir.display());
            samples.append(&mut s);
        }
        let hash = dataset_hash(&samples);
        if let Some(want) = &self.expected_hash {
            ensure!(
                *want == hash,
                "dataset differs from the replayed run (hash {hash}, manifest {want})"
            );
        }
        m.set("data.hash", &hash);
        m.set("data.count", samples.len());
        Ok(samples)
    }

    fn split_seed(&self) -> u64 {
        self.cfg.num("split_seed", self.cfg.seed())
    }

    fn folds(&self, samples: &[Sample]) -> Result<Vec<FoldSplit>> {
        Ok(split_folds(&promptseg::dataio::ids(samples), self.split_seed())?)
    }

    fn fold(&self, samples: &[Sample]) -> Result<(usize, FoldSplit)> {
        let k = self.cfg.num("fold", 0) as usize;
        let f = self.folds(samples)?.swap_remove(k);
        Ok((k, f))
    }

    fn init_network(&self) -> Result<Option<Network>> {
        self.cfg
            .path("init_weights")
            .map(|p| Network::load(&p).with_context(|| format!("initial weights {}", p.display())))
            .transpose()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn synth(ctx: &Ctx, out: &Path) -> Result<()> {
    let family: Family = ctx.cfg.get("family").unwrap_or("a").parse().map_err(|e: String| anyhow!(e))?;
    let size = ctx.cfg.num("size", 64) as usize;
    let count = ctx.cfg.num("count", 12) as usize;
    let seed = ctx.cfg.seed();
    let samples = generate_synthetic(&SynthConfig::new(family, size, seed), count)?;
    create_dir(out)?;
    save_dataset(&samples, out)?;
    let stored = load_dataset(out, 2)?;
    let mut m = ctx.manifest(None);
    m.set("run.hash", dataset_hash(&stored));
    if count >= promptseg::dataio::FOLDS {
        let folds = split_folds(&promptseg::dataio::ids(&stored), ctx.split_seed())?;
        write_fold_manifest(&out.join("folds.txt"), &folds)?;
        m.set("run.folds", "folds.txt");
    }
    m.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn pretrain_cmd(ctx: &Ctx, out: &Path) -> Result<()> {
    let tc = ctx.train_config()?;
    let mut m = ctx.manifest(Some(&tc));
    let samples = ctx.load_data(tc.net.num_classes, &mut m)?;
    let outcome = pretrain(&[samples], &tc)?;
    save_outcome(out, &outcome, &mut m)?;
    Ok(())
}

/// Training image and prompt of a one-shot run on fold `f`.
fn one_shot_pair<'a>(
    ctx: &Ctx,
    samples: &'a [Sample],
    f: &FoldSplit,
    tc: &TrainConfig,
    m: &mut RunManifest,
) -> Result<(&'a Sample, PromptPair)> {
    ensure!(f.train.len() >= 2, "fold {} has fewer than two training images", f.fold_index);
    let train_id = ctx.cfg.get("train_id").unwrap_or(&f.train[0]).to_string();
    let prompt_id = ctx.cfg.get("prompt_id").unwrap_or(&f.train[1]).to_string();
    let train = select(samples, std::slice::from_ref(&train_id))?[0];
    let source = select(samples, std::slice::from_ref(&prompt_id))?[0];
    let prompt = extract_prompt(source, tc.prompt_origin, tc.prompt_size)?;
    m.set("run.train_id", &train_id);
    m.set("run.prompt_id", &prompt_id);
    m.set("run.prompt_origin", format!("{},{}", prompt.origin.0, prompt.origin.1));
    Ok((train, prompt))
}

fn test_set(samples: &[Sample], f: &FoldSplit) -> Result<Vec<Sample>> {
    Ok(select(samples, &f.test)?.into_iter().cloned().collect())
}

fn save_prompt(dir: &Path, prompt: &PromptPair) -> Result<()> {
    let s = Sample::new(prompt.image.clone(), prompt.label.clone(), "prompt")?;
    save_dataset(&[s], dir)?;
    Ok(())
}

fn load_prompt(dir: &Path, num_classes: usize) -> Result<PromptPair> {
    let s = load_dataset(dir, num_classes)
        .with_context(|| format!("prompt {}", dir.display()))?
        .into_iter()
        .next()
        .ok_or_else(|| anyhow!("prompt directory {} is empty", dir.display()))?;
    Ok(PromptPair {
        image: s.image,
        label: s.label,
        origin: (0, 0),
        source_id: s.id,
    })
}

fn fold_csv(rep: DscReport, fold: usize) -> Result<String> {
    Ok(report_csv(&aggregate(&[rep])?, &[fold]))
}

fn train_oneshot_cmd(ctx: &Ctx, out: &Path) -> Result<()> {
    let tc = ctx.train_config()?;
    let mut m = ctx.manifest(Some(&tc));
    let samples = ctx.load_data(tc.net.num_classes, &mut m)?;
    let (k, f) = ctx.fold(&samples)?;
    let (train, prompt) = one_shot_pair(ctx, &samples, &f, &tc, &mut m)?;
    let outcome = train_one_shot(train, &prompt, &tc, ctx.init_network()?)?;
    let rep = evaluate(&outcome.network, &test_set(&samples, &f)?, EvalMode::Prompted { prompt: &prompt, tau: tc.tau })?;
    create_dir(out)?;
    save_prompt(&out.join("prompt"), &prompt)?;
    write(&out.join("metrics.csv"), &fold_csv(rep.clone(), k)?)?;
    m.set("run.prompt", "prompt");
    m.set("run.metrics", "metrics.csv");
    m.set("run.average", format!("{:.4}", rep.average * 100.0));
    save_outcome(out, &outcome, &mut m)?;
    Ok(())
}

/// τ recorded beside a weight file, if any.
fn sibling_tau(weights: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(weights.parent()?.join("manifest.txt")).ok()?;
    RunManifest::parse(&text).ok()?.get("tau")?.parse().ok()
}

struct Model {
    net: Network,
    prompt: Option<PromptPair>,
    tau: f64,
}

impl Model {
    fn mode(&self) -> EvalMode<'_> {
        match &self.prompt {
            Some(p) => EvalMode::Prompted { prompt: p, tau: self.tau },
            None => EvalMode::Plain,
        }
    }
}

fn load_model(ctx: &Ctx, m: &mut RunManifest) -> Result<Model> {
    let weights = ctx.cfg.require_path("weights")?;
    let net = Network::load(&weights).with_context(|| format!("weights {}", weights.display()))?;
    let prompt_dir = ctx
        .cfg
        .path("prompt")
        .unwrap_or_else(|| weights.parent().unwrap_or(Path::new(".")).join("prompt"));
    let prompted = match ctx.cfg.get("mode").unwrap_or("auto") {
        "plain" => false,
        "prompted" => true,
        _ => prompt_dir.is_dir(),
    };
    let prompt = if prompted {
        Some(load_prompt(&prompt_dir, net.config().num_classes)?)
    } else {
        None
    };
    let tau = match ctx.cfg.get("tau") {
        Some(v) => v.parse()?,
        None => sibling_tau(&weights).unwrap_or(TrainConfig::default().tau),
    };
    promptseg::attention::AttentionConfig::new(tau)?;
    m.set("run.mode", if prompted { "prompted" } else { "plain" });
    m.set("run.tau", format!("{tau:e}"));
    Ok(Model { net, prompt, tau })
}

/// Samples of the chosen fold's test set, or all samples without `fold`.
fn eval_samples(ctx: &Ctx, samples: Vec<Sample>) -> Result<(usize, Vec<Sample>)> {
    if ctx.cfg.get("fold").is_none() {
        return Ok((0, samples));
    }
    let (k, f) = ctx.fold(&samples)?;
    Ok((k, test_set(&samples, &f)?))
}

fn infer_cmd(ctx: &Ctx, out: &Path) -> Result<()> {
    let mut m = ctx.manifest(None);
    let model = load_model(ctx, &mut m)?;
    let samples = ctx.load_data(model.net.config().num_classes, &mut m)?;
    let (_, samples) = eval_samples(ctx, samples)?;
    let preds = predict_all(&model.net, &samples, model.mode())?;
    create_dir(out)?;
    for (s, p) in samples.iter().zip(&preds) {
        write_label(&out.join(format!("{}.mask.pgm", s.id)), p)?;
    }
    m.set("run.masks", samples.len());
    m.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn eval_cmd(ctx: &Ctx, out: &Path) -> Result<()> {
    let mut m = ctx.manifest(None);
    let model = load_model(ctx, &mut m)?;
    let samples = ctx.load_data(model.net.config().num_classes, &mut m)?;
    let (k, samples) = eval_samples(ctx, samples)?;
    let rep = evaluate(&model.net, &samples, model.mode())?;
    create_dir(out)?;
    write(&out.join("metrics.csv"), &fold_csv(rep.clone(), k)?)?;
    m.set("run.metrics", "metrics.csv");
    m.set("run.average", format!("{:.4}", rep.average * 100.0));
    m.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn train_partial_cmd(ctx: &Ctx, out: &Path) -> Result<()> {
    let tc = ctx.train_config()?;
    let mut m = ctx.manifest(Some(&tc));
    let samples = ctx.load_data(tc.net.num_classes, &mut m)?;
    let (k, f) = ctx.fold(&samples)?;
    let full: Vec<Sample> = select(&samples, &f.train)?.into_iter().cloned().collect();
    let partials = full
        .iter()
        .map(|s| make_partial(s, tc.prompt_origin, tc.prompt_size))
        .collect::<promptseg::Result<Vec<_>>>()?;
    record_prompts(&mut m, &partials);
    let outcome = run_partial(&partials, &tc, ctx.init_network()?)?;
    let agreement = pixel_agreement(&outcome.pseudo, &full)?;
    let rep = evaluate(&outcome.stage2.network, &test_set(&samples, &f)?, EvalMode::Plain)?;

    create_dir(out)?;
    let mut m1 = m.clone();
    m1.set("run.stage", 1);
    save_outcome(&out.join("stage1"), &outcome.stage1, &mut m1)?;
    save_pseudo_dataset(&outcome.pseudo, &out.join("pseudo"))?;
    let mut m2 = m.clone();
    m2.set("run.stage", 2);
    save_outcome(&out.join("stage2"), &outcome.stage2, &mut m2)?;
    write(&out.join("metrics.csv"), &fold_csv(rep.clone(), k)?)?;
    m.set("run.stage1", "stage1/weights.pseg");
    m.set("run.pseudo", "pseudo");
    m.set("run.stage2", "stage2/weights.pseg");
    m.set("run.metrics", "metrics.csv");
    m.set("run.pseudo_agreement", format!("{agreement:.6}"));
    m.set("run.average", format!("{:.4}", rep.average * 100.0));
    m.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn sweep_tau_cmd(ctx: &Ctx, out: &Path) -> Result<()> {
    let base = ctx.train_config()?;
    let mut m = ctx.manifest(Some(&base));
    let samples = ctx.load_data(base.net.num_classes, &mut m)?;
    let folds = ctx.folds(&samples)?;
    let chosen: Vec<&FoldSplit> = match ctx.cfg.get("fold") {
        Some(k) => vec![&folds[k.parse::<usize>()?]],
        None => folds.iter().collect(),
    };
    let init = ctx.init_network()?;
    let taus = ctx.cfg.taus();
    let num_classes = base.net.num_classes;
    let mut per_fold = String::from("tau,class,fold,value\n");
    let mut summary = String::from("tau,class,mean,std\n");
    for &tau in &taus {
        let tc = TrainConfig { tau, ..base.clone() };
        tc.validate()?;
        let mut reports = Vec::with_capacity(chosen.len());
        for f in &chosen {
            let mut scratch = RunManifest::new();
            let (train, prompt) = one_shot_pair(ctx, &samples, f, &tc, &mut scratch)?;
            let outcome = train_one_shot(train, &prompt, &tc, init.clone())?;
            let rep = evaluate(&outcome.network, &test_set(&samples, f)?, EvalMode::Prompted { prompt: &prompt, tau })?;
            let _ = writeln!(per_fold, "{tau},average,{},{:.2}", f.fold_index, rep.average * 100.0);
            for (c, v) in rep.per_class.iter().enumerate() {
                let _ = writeln!(per_fold, "{tau},{},{},{:.2}", class_name(c, num_classes), f.fold_index, v * 100.0);
            }
            reports.push(rep);
        }
        let s = aggregate(&reports)?;
        let _ = writeln!(summary, "{tau},average,{:.2},{:.2}", s.average.mean * 100.0, s.average.std * 100.0);
        for (c, ms) in s.per_class.iter().enumerate() {
            let _ = writeln!(summary, "{tau},{},{:.2},{:.2}", class_name(c, num_classes), ms.mean * 100.0, ms.std * 100.0);
        }
    }
    create_dir(out)?;
    write(&out.join("sweep.csv"), &format!("{per_fold}{summary}"))?;
    m.set("run.metrics", "sweep.csv");
    m.write(&out.join("manifest.txt"))?;
    Ok(())
}
