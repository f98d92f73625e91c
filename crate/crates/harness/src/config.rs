//! Experiment configuration.
//!
//! Settings come from three layers, later ones winning: built-in defaults,
//! an optional flat TOML file, and command-line flags. File keys and flags
//! share names (`d_head` in the file, `--d-head` or `--d_head` on the
//! command line). There are no environment-variable overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use delta_attn::{ConstructionStrategy, HybridConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Ceiling on `heads · rows · d_head`, keeping runaway configs from
/// exhausting memory.
pub const MAX_ELEMENTS: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KeyProcess {
    IidGaussian,
    RandomWalk,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    PrefillOnly,
    EndToEnd,
}

impl fmt::Display for KeyProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyProcess::IidGaussian => "iid-gaussian",
            KeyProcess::RandomWalk => "random-walk",
            KeyProcess::File => "file",
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::PrefillOnly => "prefill-only",
            Scenario::EndToEnd => "end-to-end",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Prompt length.
    pub n: usize,
    pub d_head: usize,
    pub heads: usize,
    /// Generated tokens after the prompt (end-to-end only).
    pub decode_steps: usize,
    pub theta: f32,
    pub gamma: f64,
    pub w_max: usize,
    pub w_d: usize,
    pub strategy: ConstructionStrategy,
    pub key_process: KeyProcess,
    /// Per-step standard deviation of the random-walk key process.
    pub sigma: f32,
    /// Key tensor for `key_process = "file"`.
    pub key_file: Option<PathBuf>,
    pub scenario: Scenario,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let h = HybridConfig::default();
        Self {
            seed: 0,
            n: 128,
            d_head: 32,
            heads: 4,
            decode_steps: 32,
            theta: h.theta,
            gamma: h.gamma,
            w_max: h.w_max,
            w_d: h.w_d,
            strategy: h.strategy,
            key_process: KeyProcess::RandomWalk,
            sigma: 0.05,
            key_file: None,
            scenario: Scenario::PrefillOnly,
        }
    }
}

/// One layer of optional settings. Used both as the TOML schema and as
/// the flag set of every subcommand.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, alias = "d_head")]
    pub d_head: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, alias = "decode_steps")]
    pub decode_steps: Option<usize>,
    #[arg(long)]
    pub theta: Option<f32>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, alias = "w_max")]
    pub w_max: Option<usize>,
    #[arg(long, alias = "w_d")]
    pub w_d: Option<usize>,
    #[arg(long)]
    pub strategy: Option<ConstructionStrategy>,
    #[arg(long, alias = "key_process", value_enum)]
    pub key_process: Option<KeyProcess>,
    #[arg(long)]
    pub sigma: Option<f32>,
    #[arg(long, alias = "key_file")]
    pub key_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scenario: Option<Scenario>,
}

/// Parses the text of a config file.
pub fn parse_config_text(text: &str) -> Result<ConfigOverrides> {
    toml::from_str(text).map_err(|e| HarnessError::Config(e.message().to_string()))
}

pub fn load_config_file(path: &Path) -> Result<ConfigOverrides> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_config_text(&text).map_err(|e| match e {
        HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &ConfigOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { self.$f = v; } )* };
        }
        take!(
            seed,
            n,
            d_head,
            heads,
            decode_steps,
            theta,
            gamma,
            w_max,
            w_d,
            strategy,
            key_process,
            sigma,
            scenario
        );
        if let Some(p) = &o.key_file {
            self.key_file = Some(p.clone());
        }
    }

    /// Defaults, then the optional file, then flags.
    pub fn resolve(file: Option<&Path>, flags: &ConfigOverrides) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let mut layer = load_config_file(path)?;
            // A relative key file in a config file is relative to that file.
            if let (Some(k), Some(dir)) = (&layer.key_file, path.parent()) {
                if k.is_relative() {
                    layer.key_file = Some(dir.join(k));
                }
            }
            cfg.apply(&layer);
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hybrid(&self) -> HybridConfig {
        HybridConfig {
            theta: self.theta,
            gamma: self.gamma,
            w_max: self.w_max,
            w_d: self.w_d,
            strategy: self.strategy,
        }
    }

    /// Rows generated per head: the prompt plus any decode tokens.
    pub fn total_rows(&self) -> usize {
        match self.scenario {
            Scenario::PrefillOnly => self.n,
            Scenario::EndToEnd => self.n + self.decode_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        for (name, v) in [
            ("n", self.n),
            ("d_head", self.d_head),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.scenario == Scenario::EndToEnd && self.decode_steps == 0 {
            return bad("decode_steps must be >= 1 for end-to-end runs".into());
        }
        self.hybrid().validate()?;
        if self.scenario == Scenario::EndToEnd && self.strategy != ConstructionStrategy::TopDownKey
        {
            return bad(format!(
                "strategy `{}` is prefill-only; end-to-end runs need top-down-key",
                self.strategy
            ));
        }
        match self.key_process {
            KeyProcess::RandomWalk if !(self.sigma >= 0.0 && self.sigma.is_finite()) => {
                return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
            }
            KeyProcess::File if self.key_file.is_none() => {
                return bad("key_process = \"file\" needs key_file".into());
            }
            _ => {}
        }
        let elements = self
            .heads
            .checked_mul(self.total_rows())
            .and_then(|x| x.checked_mul(self.d_head));
        match elements {
            Some(e) if e <= MAX_ELEMENTS => Ok(()),
            _ => bad(format!(
                "heads x rows x d_head exceeds the limit of {MAX_ELEMENTS} elements"
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn file_then_flags() {
        let file = parse_config_text(
            "seed = 7\nn = 16\ntheta = 0.2\nstrategy = \"bottom-up-query\"\nkey_process = \"iid-gaussian\"\n",
        )
        .unwrap();
        let flags = ConfigOverrides {
            theta: Some(0.3),
            ..Default::default()
        };
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&file);
        cfg.apply(&flags);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.n, 16);
        assert_eq!(cfg.theta, 0.3);
        assert_eq!(cfg.strategy, ConstructionStrategy::BottomUpQuery);
        assert_eq!(cfg.key_process, KeyProcess::IidGaussian);
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        assert!(matches!(
            parse_config_text("thetta = 0.1"),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            parse_config_text("n = \"many\""),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            parse_config_text("strategy = \"sideways\""),
            Err(HarnessError::Config(_))
        ));
        assert!(parse_config_text("[section]\nn = 1").is_err());
    }

    #[test]
    fn invalid_values() {
        let base = ExperimentConfig::default();
        for bad in [
            ExperimentConfig {
                n: 0,
                ..base.clone()
            },
            ExperimentConfig {
                gamma: 1.0,
                ..base.clone()
            },
            ExperimentConfig {
                sigma: -0.1,
                ..base.clone()
            },
            ExperimentConfig {
                w_d: 0,
                ..base.clone()
            },
            ExperimentConfig {
                key_process: KeyProcess::File,
                ..base.clone()
            },
            ExperimentConfig {
                scenario: Scenario::EndToEnd,
                strategy: ConstructionStrategy::TopDownQuery,
                ..base.clone()
            },
            ExperimentConfig {
                d_head: 1 << 30,
                ..base.clone()
            },
        ] {
            let e = bad.validate().unwrap_err();
            assert_eq!(e.exit_code(), crate::error::EXIT_CONFIG, "{e}");
        }
    }
}
