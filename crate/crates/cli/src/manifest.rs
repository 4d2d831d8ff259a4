//! Run manifests: everything needed to repeat a run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use synthpanel::pipeline::streams;
use synthpanel::seed::derive_seed;
use synthpanel::ModelSpec;

use crate::settings::{Resolved, Source};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Every setting after merging; feed back with `--config` to replay.
    pub config: Value,
    pub sources: BTreeMap<String, Source>,
    pub seeds: BTreeMap<String, u64>,
    pub model: Option<BTreeMap<String, String>>,
    /// sha256 of every input file, keyed by setting name.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(String, f64)>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl RunManifest {
    pub fn new(command: &str, resolved: &Resolved) -> Result<Self> {
        let s = &resolved.settings;
        let mut inputs = BTreeMap::new();
        for (key, path) in [
            ("outcomes", &s.outcomes),
            ("treated", &s.treated),
            ("covariates", &s.covariates),
            ("control", &s.control),
            ("exclude_file", &s.exclude_file),
            ("grid", &s.grid),
        ] {
            if let Some(p) = path {
                if p.exists() {
                    inputs.insert(key.to_string(), sha256_file(p)?);
                }
            }
        }
        let seeds = [
            ("master", s.seed),
            ("ann", derive_seed(s.seed, streams::ANN)),
            ("subsample", derive_seed(s.seed, streams::SUBSAMPLE)),
            ("split", derive_seed(s.seed, streams::SPLIT)),
            ("placebo", derive_seed(s.seed, streams::PLACEBO)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(s)?,
            sources: resolved.sources.clone(),
            seeds,
            model: None,
            inputs,
            outputs: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn set_model(&mut self, spec: &ModelSpec) {
        self.model = Some(spec.to_kv().into_iter().collect());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
