//! Flat `key=value` run configuration shared by config files, manifests and
//! command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use promptseg::pipelines::{RunManifest, TrainConfig};
use promptseg::segnet::NetConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Count,
    Positive,
    Unsigned,
    Bool,
    Origin,
    PositiveList,
    Text,
    Choice(&'static [&'static str]),
}

const KEYS: &[(&str, Kind)] = &[
    ("seed", Kind::Unsigned),
    ("epochs", Kind::Count),
    ("batch_size", Kind::Count),
    ("lr", Kind::Positive),
    ("tau", Kind::Positive),
    ("prompt_size", Kind::Count),
    ("prompt_origin", Kind::Origin),
    ("oneshot_steps", Kind::Count),
    ("augment", Kind::Bool),
    ("prompt_loss", Kind::Bool),
    ("pseudo_gt_in_rect", Kind::Bool),
    ("paste_gt", Kind::Bool),
    ("in_channels", Kind::Count),
    ("num_classes", Kind::Count),
    ("depth", Kind::Count),
    ("base_width", Kind::Count),
    ("split_seed", Kind::Unsigned),
    ("fold", Kind::Choice(&["0", "1", "2"])),
    ("data", Kind::Text),
    ("train_id", Kind::Text),
    ("prompt_id", Kind::Text),
    ("init_weights", Kind::Text),
    ("weights", Kind::Text),
    ("prompt", Kind::Text),
    ("mode", Kind::Choice(&["auto", "plain", "prompted"])),
    ("taus", Kind::PositiveList),
    ("count", Kind::Count),
    ("size", Kind::Count),
    ("family", Kind::Choice(&["a", "b"])),
];

#[derive(Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _)| *k == key).map(|&(_, kind)| kind)
}

fn check(key: &str, value: &str) -> Result<(), String> {
    let kind = kind_of(key).ok_or_else(|| format!("unknown key `{key}`"))?;
    let bad = |what: &str| Err(format!("`{key}` expects {what}, got `{value}`"));
    match kind {
        Kind::Count => match value.parse::<usize>() {
            Ok(v) if v > 0 => Ok(()),
            _ => bad("a positive integer"),
        },
        Kind::Unsigned => value.parse::<u64>().map(|_| ()).or_else(|_| bad("a non-negative integer")),
        Kind::Positive => match value.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(()),
            _ => bad("a positive number"),
        },
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => bad("true or false"),
        },
        Kind::Origin => match parse_origin(value) {
            Some(_) => Ok(()),
            None => bad("`row,col` or `center`"),
        },
        Kind::PositiveList => {
            let ok = !value.is_empty()
                && value
                    .split(',')
                    .all(|t| t.trim().parse::<f64>().is_ok_and(|v| v > 0.0 && v.is_finite()));
            if ok {
                Ok(())
            } else {
                bad("a comma-separated list of positive numbers")
            }
        }
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                bad(&format!("one of {}", options.join(", ")))
            }
        }
        Kind::Text => {
            if value.is_empty() {
                bad("a non-empty value")
            } else {
                Ok(())
            }
        }
    }
}

fn parse_origin(v: &str) -> Option<Option<(usize, usize)>> {
    if v == "center" {
        return Some(None);
    }
    let (r, c) = v.split_once(',')?;
    Some(Some((r.trim().parse().ok()?, c.trim().parse().ok()?)))
}

/// Validated key/value pairs; later `set` calls override earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        check(key, value).map_err(|msg| ConfigError { line: None, msg })?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Merges `key=value` lines; `#` starts a comment. Keys outside the
    /// configuration table are rejected unless `skip_foreign` is set, in
    /// which case they are ignored (used for manifests, whose provenance
    /// entries are not settings).
    pub fn merge_text(&mut self, text: &str, skip_foreign: bool) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError { line: Some(i + 1), msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let k = k.trim();
            if skip_foreign && kind_of(k).is_none() {
                continue;
            }
            check(k, v.trim()).map_err(err)?;
            self.values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn num(&self, key: &str, default: u64) -> u64 {
        self.parsed(key).unwrap_or(default)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        self.path(key).ok_or_else(|| ConfigError {
            line: None,
            msg: format!("`{key}` is required (flag --{} or config key)", key.replace('_', "-")),
        })
    }

    pub fn seed(&self) -> u64 {
        self.num("seed", 0)
    }

    pub fn taus(&self) -> Vec<f64> {
        self.get("taus")
            .unwrap_or("0.01,0.1,1.0,2.0")
            .split(',')
            .map(|t| t.trim().parse().expect("validated on insert"))
            .collect()
    }

    pub fn data_dirs(&self, key: &str) -> Vec<PathBuf> {
        self.get(key)
            .map(|v| v.split(',').map(|s| PathBuf::from(s.trim())).collect())
            .unwrap_or_default()
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let bool_of = |k: &str, dflt: bool| self.get(k).map_or(dflt, |v| v == "true");
        let net = NetConfig {
            in_channels: self.parsed("in_channels").unwrap_or(d.net.in_channels),
            num_classes: self.parsed("num_classes").unwrap_or(d.net.num_classes),
            depth: self.parsed("depth").unwrap_or(d.net.depth),
            base_width: self.parsed("base_width").unwrap_or(d.net.base_width),
            seed: 0,
        };
        TrainConfig {
            net,
            batch_size: self.parsed("batch_size").unwrap_or(d.batch_size),
            epochs: self.parsed("epochs").unwrap_or(d.epochs),
            base_lr: self.parsed("lr").unwrap_or(d.base_lr),
            tau: self.parsed("tau").unwrap_or(d.tau),
            prompt_size: self.parsed("prompt_size").unwrap_or(d.prompt_size),
            prompt_origin: self.get("prompt_origin").and_then(parse_origin).unwrap_or(d.prompt_origin),
            seed: self.seed(),
            oneshot_steps: self.parsed("oneshot_steps").unwrap_or(d.oneshot_steps),
            augment: bool_of("augment", d.augment),
            prompt_loss: bool_of("prompt_loss", d.prompt_loss),
            pseudo_gt_in_rect: bool_of("pseudo_gt_in_rect", d.pseudo_gt_in_rect),
            paste_gt: bool_of("paste_gt", d.paste_gt),
        }
    }

    /// Adds every setting `m` does not hold yet, so canonical values
    /// recorded earlier win.
    pub fn record(&self, m: &mut RunManifest) {
        for (k, v) in self.entries() {
            if m.get(k).is_none() {
                m.set(k, v);
            }
        }
    }
}

/// Reads a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: None,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut cfg = RunConfig::default();
    cfg.merge_text(&text, false)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut c = RunConfig::default();
        c.merge_text(text, false)?;
        Ok(c)
    }

    #[test]
    fn typed_values_and_defaults() {
        let c = parse("# comment\ntau=2.0\n\nepochs = 20  # inline\nprompt_origin=3,4\n").unwrap();
        let t = c.train_config();
        assert_eq!(t.tau, 2.0);
        assert_eq!(t.batch_size, 4);
        assert_eq!(t.epochs, 20);
        assert_eq!(t.prompt_origin, Some((3, 4)));
        assert_eq!(parse("prompt_origin=center").unwrap().train_config().prompt_origin, None);
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse("tau=2\ntau=-1\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.msg.contains("tau"), "{e}");
        let e = parse("epochs=10\nfrobnicate=1\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.msg.contains("unknown key"), "{e}");
        assert_eq!(parse("batch_size=0").unwrap_err().line, Some(1));
        assert_eq!(parse("augment=yes").unwrap_err().line, Some(1));
        assert_eq!(parse("no equals sign").unwrap_err().line, Some(1));
        assert!(parse("taus=0.1,0,2").is_err());
        assert!(parse("fold=3").is_err());
        assert!(parse("mode=fast").is_err());
    }

    #[test]
    fn manifests_skip_provenance_keys() {
        let mut c = RunConfig::default();
        c.merge_text("command=eval\ndata.hash=abc\ntau=1.5\n", true).unwrap();
        assert_eq!(c.get("tau"), Some("1.5"));
        assert_eq!(c.get("command"), None);
    }

    #[test]
    fn later_values_override() {
        let mut c = parse("seed=3").unwrap();
        c.set("seed", "9").unwrap();
        assert_eq!(c.seed(), 9);
        assert!(c.set("seed", "-2").is_err());
    }
}
