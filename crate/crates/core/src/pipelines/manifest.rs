//! Run manifests (`key=value` text) and per-epoch loss logs (CSV).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered `key=value` record of a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces `key`.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut m = RunManifest::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", no + 1))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Mean losses of one epoch and the learning rate it ran at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub loss_pseudo: f64,
    pub loss_prompt: f64,
    pub lr: f64,
}

pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,loss_pseudo,loss_prompt,lr\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e}",
            e.epoch, e.loss, e.loss_pseudo, e.loss_prompt, e.lr
        );
    }
    s
}
