use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use persona_probe::activations::remote::{RemoteBackend, ENV_BACKEND_URL};
use persona_probe::oracle::{ToyBackend, ToyConfig};
use persona_probe::ActivationBackend;

use crate::failure::{CliResult, Failure};

pub const ENV_DATA_DIR: &str = "PERSONA_PROBE_DATA_DIR";

/// Relative paths are taken from `PERSONA_PROBE_DATA_DIR` when it is set.
pub fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(ENV_DATA_DIR) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// Resolves an input path and checks that it exists.
pub fn input(path: &Path) -> CliResult<PathBuf> {
    let p = resolve(path);
    if !p.exists() {
        return Err(Failure::usage("PATH_NOT_FOUND", format!("{} does not exist", p.display())));
    }
    Ok(p)
}

/// Resolves an output path and creates its parent directory.
pub fn output(path: &Path) -> CliResult<PathBuf> {
    let p = resolve(path);
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Deterministic in-process toy model.
    Toy,
    /// Hidden-state server speaking the `/v1/info` + `/v1/trace` protocol.
    Remote,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "toy")]
    pub backend: BackendKind,
    #[arg(long, env = ENV_BACKEND_URL)]
    pub backend_url: Option<String>,
    /// Toy model config (JSON); the --toy-* flags override its fields.
    #[arg(long)]
    pub toy_config: Option<PathBuf>,
    #[arg(long)]
    pub toy_d: Option<usize>,
    #[arg(long)]
    pub toy_layers: Option<usize>,
    #[arg(long)]
    pub toy_sigma: Option<f64>,
    #[arg(long)]
    pub toy_seed: Option<u64>,
    #[arg(long)]
    pub persona_gain: Option<f64>,
}

pub struct Loaded {
    pub backend: Arc<dyn ActivationBackend>,
    pub is_toy: bool,
}

impl BackendArgs {
    pub fn toy_config(&self) -> CliResult<ToyConfig> {
        let mut cfg = match &self.toy_config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(input(p)?)?)?,
            None => ToyConfig::default(),
        };
        if let Some(v) = self.toy_d {
            cfg.d = v;
        }
        if let Some(v) = self.toy_layers {
            cfg.layers = v;
        }
        if let Some(v) = self.toy_sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.toy_seed {
            cfg.seed = v;
        }
        if let Some(v) = self.persona_gain {
            cfg.persona_gain = v;
        }
        Ok(cfg)
    }

    pub fn load(&self) -> CliResult<Loaded> {
        match self.backend {
            BackendKind::Toy => Ok(Loaded {
                backend: Arc::new(ToyBackend::new(self.toy_config()?)?),
                is_toy: true,
            }),
            BackendKind::Remote => {
                let url = self
                    .backend_url
                    .as_deref()
                    .ok_or_else(|| Failure::usage("MISSING_BACKEND_URL", format!("--backend remote needs --backend-url or {ENV_BACKEND_URL}")))?;
                Ok(Loaded {
                    backend: Arc::new(RemoteBackend::connect(url)?),
                    is_toy: false,
                })
            }
        }
    }
}
