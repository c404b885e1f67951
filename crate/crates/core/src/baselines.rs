//! The comparison models. They share every parameter shape with PMP except
//! the relevance-side encoder and processor, and run through the same
//! rollout driver.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::model::ModelKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    /// Every state takes its candidate latent each step.
    Overwrite,
    /// Only states whose persistency mask fires take their candidate.
    SelectiveOverwrite,
    /// No memory; each query is read off the correct snapshot.
    Oracle,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::Overwrite,
        BaselineKind::SelectiveOverwrite,
        BaselineKind::Oracle,
    ];

    pub fn model_kind(self) -> ModelKind {
        match self {
            BaselineKind::Overwrite => ModelKind::Overwrite,
            BaselineKind::SelectiveOverwrite => ModelKind::Selective,
            BaselineKind::Oracle => ModelKind::Oracle,
        }
    }

    /// Whether the state count stays at the number of tree positions.
    pub fn fixed_size(self) -> bool {
        !matches!(self, BaselineKind::Oracle)
    }
}

impl From<BaselineKind> for ModelKind {
    fn from(k: BaselineKind) -> Self {
        k.model_kind()
    }
}

impl TryFrom<ModelKind> for BaselineKind {
    type Error = Error;
    fn try_from(k: ModelKind) -> Result<Self> {
        match k {
            ModelKind::Overwrite => Ok(BaselineKind::Overwrite),
            ModelKind::Selective => Ok(BaselineKind::SelectiveOverwrite),
            ModelKind::Oracle => Ok(BaselineKind::Oracle),
            ModelKind::Pmp => Err(invalid!("pmp is not a baseline")),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.model_kind().fmt(f)
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.parse::<ModelKind>()?.try_into()
    }
}
