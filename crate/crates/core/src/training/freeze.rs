use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FOURIER_B;
use crate::params::{Component, ParameterStore};
use crate::scalar::Scalar;

/// The two transfer strategies: train only the mask decoder, or everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    DecoderOnly,
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::DecoderOnly, Strategy::Full];

    pub fn policy(self) -> FreezePolicy {
        match self {
            Strategy::DecoderOnly => FreezePolicy::decoder_only(),
            Strategy::Full => FreezePolicy::full(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::DecoderOnly => "decoder-only",
            Strategy::Full => "full",
        }
    }

    /// Column heading used in comparison tables.
    pub fn column(self) -> &'static str {
        match self {
            Strategy::DecoderOnly => "Finetune Dec",
            Strategy::Full => "Finetune Enc-Dec",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder-only" | "decoder_only" => Ok(Strategy::DecoderOnly),
            "full" => Ok(Strategy::Full),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?} (expected decoder-only or full)"
            ))),
        }
    }
}

/// Set of components excluded from optimisation. The mask decoder is always
/// trained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePolicy {
    frozen: BTreeSet<Component>,
}

impl FreezePolicy {
    pub fn new(frozen: impl IntoIterator<Item = Component>) -> Result<Self> {
        let frozen: BTreeSet<Component> = frozen.into_iter().collect();
        if frozen.contains(&Component::MaskDecoder) {
            return Err(Error::Config("the mask decoder cannot be frozen".into()));
        }
        Ok(Self { frozen })
    }

    pub fn decoder_only() -> Self {
        Self {
            frozen: [Component::ImageEncoder, Component::PromptEncoder].into(),
        }
    }

    pub fn full() -> Self {
        Self {
            frozen: BTreeSet::new(),
        }
    }

    pub fn frozen(&self) -> &BTreeSet<Component> {
        &self.frozen
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.frozen.contains(&c)
    }
}

/// Names that receive gradients under `policy`. The Fourier matrix and
/// other constants are never trainable.
pub fn apply_freeze_policy<T: Scalar>(params: &ParameterStore<T>, policy: &FreezePolicy) -> BTreeSet<String> {
    params
        .trainable_names()
        .filter(|n| *n != FOURIER_B)
        .filter(|n| params.component(n).is_some_and(|c| !policy.is_frozen(c)))
        .map(str::to_string)
        .collect()
}
