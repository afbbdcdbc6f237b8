//! Encoder-decoder segmentation network (U-Net layout).
//!
//! Each level runs two 3x3 convolutions with ReLU; the encoder halves the
//! resolution with 2x2 max pooling, the decoder doubles it with nearest
//! upsampling and concatenates the matching encoder output. A final 1x1
//! convolution emits one channel per class. There is no normalisation layer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{weights, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            num_classes: 2,
            depth: 2,
            base_width: 8,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("depth must be in 1..=8, got {}", self.depth)));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be at least 1".into()));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "depth={}", self.depth);
        let _ = writeln!(s, "base_width={}", self.base_width);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut cfg = NetConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", no + 1))?;
            let bad = |_| format!("line {}: bad value for {k}", no + 1);
            match k.trim() {
                "in_channels" => cfg.in_channels = v.trim().parse().map_err(bad)?,
                "num_classes" => cfg.num_classes = v.trim().parse().map_err(bad)?,
                "depth" => cfg.depth = v.trim().parse().map_err(bad)?,
                "base_width" => cfg.base_width = v.trim().parse().map_err(bad)?,
                "seed" => cfg.seed = v.trim().parse().map_err(bad)?,
                other => return Err(format!("line {}: unknown key {other}", no + 1)),
            }
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvSpec {
    name: String,
    c_in: usize,
    c_out: usize,
    kernel: usize,
}

fn layer_specs(cfg: &NetConfig) -> Vec<ConvSpec> {
    let width = |l: usize| cfg.base_width << l;
    let mut specs = Vec::new();
    let mut push = |name: String, c_in, c_out, kernel| {
        specs.push(ConvSpec {
            name,
            c_in,
            c_out,
            kernel,
        })
    };
    let mut prev = cfg.in_channels;
    for l in 0..cfg.depth {
        push(format!("enc{l}.conv1"), prev, width(l), 3);
        push(format!("enc{l}.conv2"), width(l), width(l), 3);
        prev = width(l);
    }
    let d = cfg.depth;
    push("mid.conv1".into(), prev, width(d), 3);
    push("mid.conv2".into(), width(d), width(d), 3);
    for l in (0..d).rev() {
        push(format!("dec{l}.conv1"), width(l + 1) + width(l), width(l), 3);
        push(format!("dec{l}.conv2"), width(l), width(l), 3);
    }
    push("head".into(), width(0), cfg.num_classes, 1);
    specs
}

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Network weights; one parameter set serves every branch that calls
/// [`Network::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetConfig,
    params: Vec<Param>,
}

/// Graph handles for a network's parameters, in [`Network::params`] order.
#[derive(Clone, Debug)]
pub struct NetVars(Vec<Var>);

impl NetVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl From<Vec<Var>> for NetVars {
    fn from(vars: Vec<Var>) -> Self {
        NetVars(vars)
    }
}

/// Path of the key=value config written next to a weight file.
pub fn config_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

impl Network {
    /// Builds a network with He fan-in initialised weights and zero biases.
    pub fn build(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (i, spec) in layer_specs(&config).into_iter().enumerate() {
            let fan_in = spec.c_in * spec.kernel * spec.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let mut r = rng::stream(config.seed, "init", i as u64);
            let w = Tensor::from_fn([spec.c_out, spec.c_in, spec.kernel, spec.kernel], |_| {
                normal.sample(&mut r)
            });
            params.push(Param {
                name: format!("{}.weight", spec.name),
                value: w,
            });
            params.push(Param {
                name: format!("{}.bias", spec.name),
                value: Tensor::zeros([spec.c_out]),
            });
        }
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Records the parameters on `g` as trainable leaves.
    pub fn register(&self, g: &mut Graph) -> Result<NetVars> {
        self.params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect::<Result<Vec<_>>>()
            .map(NetVars)
    }

    /// Records the parameters on `g` as constants.
    pub fn register_frozen(&self, g: &mut Graph) -> Result<NetVars> {
        self.params
            .iter()
            .map(|p| g.input(p.value.clone()))
            .collect::<Result<Vec<_>>>()
            .map(NetVars)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape(
                "segnet.forward",
                format!(
                    "expected [B, {}, H, W], got {shape:?}",
                    self.config.in_channels
                ),
            ));
        }
        let m = self.config.size_multiple();
        if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::shape(
                "segnet.forward",
                format!(
                    "spatial dims {}x{} must be non-zero multiples of {m}; pad the image to the next multiple",
                    shape[2], shape[3]
                ),
            ));
        }
        Ok(())
    }

    /// Maps `x: [B, in_channels, H, W]` to per-class logits `[B, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, vars: &NetVars, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let v = vars.vars();
        if v.len() != self.params.len() {
            return Err(Error::Graph("parameter handles do not match network".into()));
        }
        let mut layer = 0;
        let mut conv = |g: &mut Graph, input: Var, relu: bool| -> Result<Var> {
            let y = g.conv2d(input, v[2 * layer], v[2 * layer + 1])?;
            layer += 1;
            if relu {
                g.relu(y)
            } else {
                Ok(y)
            }
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for _ in 0..self.config.depth {
            h = conv(g, h, true)?;
            h = conv(g, h, true)?;
            skips.push(h);
            h = g.maxpool2(h)?;
        }
        h = conv(g, h, true)?;
        h = conv(g, h, true)?;
        while let Some(skip) = skips.pop() {
            let up = g.upsample2(h)?;
            h = g.concat(&[up, skip], 1)?;
            h = conv(g, h, true)?;
            h = conv(g, h, true)?;
        }
        conv(g, h, false)
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register_frozen(&mut g)?;
        let x = g.input(batch.clone())?;
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }

    /// Writes the weight file and a `<path>.cfg` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> =
            self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        weights::save(path, &entries)?;
        let cfg = config_path(path);
        std::fs::write(&cfg, self.config.to_text()).map_err(|e| Error::io(cfg, e))
    }

    /// Reads the weight file using the sidecar config.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg = NetConfig::from_text(&text).map_err(|m| Error::format(&cfg_path, m))?;
        Self::load_with_config(path, cfg)
    }

    /// Reads a weight file and checks its table against `config`.
    pub fn load_with_config(path: &Path, config: NetConfig) -> Result<Self> {
        let template = Network::build(config)?;
        let loaded = weights::load(path)?;
        if loaded.len() != template.params.len() {
            return Err(Error::format(
                path,
                format!(
                    "shape table has {} tensors, config expects {}",
                    loaded.len(),
                    template.params.len()
                ),
            ));
        }
        let mut net = template;
        for (p, (name, t)) in net.params.iter_mut().zip(loaded) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::format(
                    path,
                    format!(
                        "shape table mismatch: file has {name} {:?}, config expects {} {:?}",
                        t.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
            p.value = t;
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_configs_name_constraint() {
        let bad = NetConfig {
            num_classes: 1,
            ..NetConfig::default()
        };
        assert!(Network::build(bad).unwrap_err().to_string().contains("num_classes"));
        let bad = NetConfig {
            depth: 0,
            ..NetConfig::default()
        };
        assert!(Network::build(bad).unwrap_err().to_string().contains("depth"));
    }

    #[test]
    fn indivisible_input_suggests_padding() {
        let net = Network::build(NetConfig::default()).unwrap();
        let err = net.infer(&Tensor::zeros([1, 1, 30, 32])).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = NetConfig {
            seed: 42,
            base_width: 4,
            ..NetConfig::default()
        };
        assert_eq!(NetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(NetConfig::from_text("widht=3").is_err());
    }

    #[test]
    fn layer_names_are_unique() {
        let specs = layer_specs(&NetConfig::default());
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
    }
}
