//! TOML pipeline configuration: which backend to talk to and how to run the
//! estimation loop. API keys are never stored here, only the name of the
//! environment variable that holds one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimationConfig, SelectionMode};
use crate::llm::{Backend, HttpChatBackend, HttpChatConfig, KnnOracle, LinearOracle, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    HttpChat(HttpChatConfig),
    Scripted {
        #[serde(default)]
        responses: Vec<String>,
    },
    LinearOracle {
        weights: BTreeMap<String, f64>,
        #[serde(default)]
        bias: f64,
    },
    KnnOracle {
        #[serde(default = "default_knn_k")]
        k: usize,
        #[serde(default)]
        default_answer: f64,
    },
}

fn default_knn_k() -> usize {
    KnnOracle::default().k
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn Backend>> {
        Ok(match self {
            BackendConfig::HttpChat(c) => {
                if c.max_in_flight == 0 {
                    return Err(Error::Config("max_in_flight must be at least 1".into()));
                }
                Box::new(HttpChatBackend::new(c.clone()))
            }
            BackendConfig::Scripted { responses } => Box::new(ScriptedBackend::new(responses.clone())),
            BackendConfig::LinearOracle { weights, bias } => Box::new(LinearOracle {
                weights: weights.clone(),
                bias: *bias,
            }),
            BackendConfig::KnnOracle { k, default_answer } => {
                if *k == 0 {
                    return Err(Error::Config("knn_oracle k must be at least 1".into()));
                }
                Box::new(KnnOracle {
                    k: *k,
                    default_answer: *default_answer,
                })
            }
        })
    }
}

/// Overrides on top of the shot-count defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSettings {
    pub n_coarse: Option<usize>,
    pub n_fine: Option<usize>,
    pub init_queries: Option<usize>,
    pub selection_mode: Option<SelectionMode>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
    pub parse_retries: Option<usize>,
    pub max_prompt_chars: Option<usize>,
}

impl EstimationSettings {
    pub fn apply(&self, mut c: EstimationConfig) -> EstimationConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(n_coarse, n_fine, init_queries, selection_mode, temperature, top_p, max_tokens, parse_retries);
        if self.max_prompt_chars.is_some() {
            c.max_prompt_chars = self.max_prompt_chars;
        }
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSettings {
    pub iterations: Option<usize>,
    pub threshold: Option<usize>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    #[serde(default)]
    pub estimation: EstimationSettings,
    #[serde(default)]
    pub selection: SelectionSettings,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
