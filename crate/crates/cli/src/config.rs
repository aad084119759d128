//! Run configuration: one JSON document, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use metadan_core::decode::{DecodeCaps, PredictionPolicy, Strategy};
use metadan_core::synthdoc::SplitCounts;
use metadan_core::train::{TrainConfig, Variant};
use metadan_core::{ModelConfig, SynthConfig, Vocab};
use serde::{Deserialize, Serialize};

use crate::Exit;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub splits: SplitCounts,
    /// `num_classes` and `heads` are filled in from the vocabulary and the
    /// training config.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeSettings,
    pub paths: Paths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Static,
    Dynamic,
}

/// Decoding choices; unset fields follow the checkpoint's training setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSettings {
    pub variant: Option<Variant>,
    pub w: Option<usize>,
    pub m: Option<usize>,
    pub policy: Option<PolicyKind>,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub max_tokens: usize,
    pub max_iterations: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        let caps = DecodeCaps::default();
        Self {
            variant: None,
            w: None,
            m: None,
            policy: None,
            k: None,
            tau: None,
            max_tokens: caps.max_tokens,
            max_iterations: caps.max_iterations,
        }
    }
}

pub const DEFAULT_TAU: f64 = 0.9;

impl DecodeSettings {
    pub fn caps(&self) -> DecodeCaps {
        DecodeCaps {
            max_tokens: self.max_tokens,
            max_iterations: self.max_iterations,
        }
    }

    /// Concrete strategy for a checkpoint trained with `trained` and
    /// `model_heads` projection heads.
    pub fn resolve(
        &self,
        trained: &TrainConfig,
        model_heads: usize,
        vocab: &Vocab,
    ) -> Result<Strategy, Exit> {
        let variant = self.variant.unwrap_or(trained.variant);
        let same = variant == trained.variant;
        let w = self.w.unwrap_or(if same { trained.window } else { 1 });
        let m = self.m.unwrap_or(model_heads);
        let policy = match self.policy.unwrap_or(if self.tau.is_some() {
            PolicyKind::Dynamic
        } else {
            PolicyKind::Static
        }) {
            PolicyKind::Static => PredictionPolicy::Static {
                k: self.k.unwrap_or(m),
            },
            PolicyKind::Dynamic => PredictionPolicy::Dynamic {
                tau: self.tau.unwrap_or(DEFAULT_TAU),
            },
        };
        let single = |what: &str, v: usize| -> Result<(), Exit> {
            if v == 1 {
                Ok(())
            } else {
                Err(Exit::config(format!(
                    "variant {variant} uses {what} = 1, got {v}"
                )))
            }
        };
        let strategy = match variant {
            Variant::Dan => {
                single("w", self.w.unwrap_or(1))?;
                single("m", self.m.unwrap_or(1))?;
                Strategy::Dan
            }
            Variant::Wdan => {
                single("m", self.m.unwrap_or(1))?;
                Strategy::Wdan { w }
            }
            Variant::Mtdan => {
                single("w", self.w.unwrap_or(1))?;
                if m == model_heads {
                    Strategy::Mtdan { policy }
                } else {
                    Strategy::Meta { w: 1, m, policy }
                }
            }
            Variant::Meta => Strategy::Meta { w, m, policy },
            Variant::Fasterdan => {
                let newline = vocab.id_of('\n').ok_or_else(|| {
                    Exit::mismatch("two-stage decoding needs a newline in the vocabulary".into())
                })?;
                Strategy::Fasterdan { newline }
            }
        };
        if let Strategy::Meta { m, .. } = strategy {
            if m > model_heads {
                return Err(Exit::config(format!(
                    "decoding with {m} heads, the checkpoint has {model_heads}"
                )));
            }
        }
        Ok(strategy)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let raw =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }
}

/// Parses a strategy description such as `meta,w=5,m=5,k=5`, `mtdan,tau=0.9`
/// or `dan` into decode settings.
pub fn parse_strategy(desc: &str) -> anyhow::Result<DecodeSettings> {
    let mut parts = desc.split(',');
    let variant: Variant = parts.next().unwrap_or_default().trim().parse()?;
    let mut s = DecodeSettings {
        variant: Some(variant),
        ..Default::default()
    };
    for kv in parts {
        let (key, value) = kv
            .split_once('=')
            .with_context(|| format!("expected key=value, got {kv:?}"))?;
        let value = value.trim();
        match key.trim() {
            "w" => s.w = Some(value.parse()?),
            "m" => s.m = Some(value.parse()?),
            "k" => {
                s.k = Some(value.parse()?);
                s.policy = Some(PolicyKind::Static);
            }
            "tau" => {
                s.tau = Some(value.parse()?);
                s.policy = Some(PolicyKind::Dynamic);
            }
            other => bail!("unknown strategy key {other:?}"),
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained(variant: Variant, window: usize, heads: usize) -> TrainConfig {
        TrainConfig {
            variant,
            window,
            heads,
            ..Default::default()
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(&["ab\n".to_string()]).unwrap()
    }

    #[test]
    fn parses_strategies() {
        let s = parse_strategy("meta,w=5,m=5,k=5").unwrap();
        assert_eq!(
            (s.variant, s.w, s.m, s.k, s.policy),
            (
                Some(Variant::Meta),
                Some(5),
                Some(5),
                Some(5),
                Some(PolicyKind::Static)
            )
        );
        let s = parse_strategy("mtdan, tau=0.9").unwrap();
        assert_eq!((s.tau, s.policy), (Some(0.9), Some(PolicyKind::Dynamic)));
        assert!(parse_strategy("meta,q=1").is_err());
        assert!(parse_strategy("fast").is_err());
        assert!(parse_strategy("meta,w").is_err());
    }

    #[test]
    fn resolves_defaults_from_training() {
        let v = vocab();
        let s = DecodeSettings::default()
            .resolve(&trained(Variant::Meta, 2, 2), 2, &v)
            .unwrap();
        assert_eq!(
            s,
            Strategy::Meta {
                w: 2,
                m: 2,
                policy: PredictionPolicy::Static { k: 2 }
            }
        );
        let s = parse_strategy("mtdan,m=2")
            .unwrap()
            .resolve(&trained(Variant::Mtdan, 1, 4), 4, &v)
            .unwrap();
        assert_eq!(
            s,
            Strategy::Meta {
                w: 1,
                m: 2,
                policy: PredictionPolicy::Static { k: 2 }
            }
        );
        let s = parse_strategy("dan")
            .unwrap()
            .resolve(&trained(Variant::Meta, 3, 3), 3, &v)
            .unwrap();
        assert_eq!(s, Strategy::Dan);
        let s = parse_strategy("fasterdan")
            .unwrap()
            .resolve(&trained(Variant::Dan, 1, 1), 1, &v)
            .unwrap();
        assert_eq!(
            s,
            Strategy::Fasterdan {
                newline: v.id_of('\n').unwrap()
            }
        );
    }

    #[test]
    fn rejects_impossible_combinations() {
        let v = vocab();
        let dan = trained(Variant::Dan, 1, 1);
        assert_eq!(
            parse_strategy("dan,w=3")
                .unwrap()
                .resolve(&dan, 1, &v)
                .unwrap_err()
                .code,
            2
        );
        assert_eq!(
            parse_strategy("meta,w=2,m=3")
                .unwrap()
                .resolve(&dan, 2, &v)
                .unwrap_err()
                .code,
            2
        );
        let no_newline = Vocab::build(&["ab".to_string()]).unwrap();
        assert_eq!(
            parse_strategy("fasterdan")
                .unwrap()
                .resolve(&dan, 1, &no_newline)
                .unwrap_err()
                .code,
            4
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"decode": {"window": 3}}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"decode": {"w": 3}}"#).unwrap();
        assert_eq!(cfg.decode.w, Some(3));
        assert_eq!(cfg.decode.max_tokens, 5000);
    }
}
