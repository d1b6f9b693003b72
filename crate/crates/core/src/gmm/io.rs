use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Gmm, GmmError};
use crate::features::Fingerprint;

pub const GMM_FORMAT: &str = "VPGMM1";

/// On-disk form of a [`Gmm`]. Floats are written in shortest round-trip
/// notation, so a save/load cycle is lossless.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmDocument {
    pub format: String,
    pub fingerprint: Fingerprint,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl From<&Gmm> for GmmDocument {
    fn from(g: &Gmm) -> Self {
        let rows = |flat: &[f64]| flat.chunks_exact(g.dim()).map(<[f64]>::to_vec).collect();
        Self {
            format: GMM_FORMAT.to_string(),
            fingerprint: g.fingerprint().clone(),
            weights: g.weights().to_vec(),
            means: rows(g.means_flat()),
            variances: rows(g.variances_flat()),
        }
    }
}

impl TryFrom<GmmDocument> for Gmm {
    type Error = GmmError;

    fn try_from(doc: GmmDocument) -> Result<Self, GmmError> {
        if doc.format != GMM_FORMAT {
            return Err(GmmError::Format(format!(
                "expected format {GMM_FORMAT}, found {}",
                doc.format
            )));
        }
        let dim = doc.means.first().map_or(0, Vec::len);
        if doc.means.len() != doc.weights.len()
            || doc.variances.len() != doc.weights.len()
            || doc.means.iter().chain(&doc.variances).any(|r| r.len() != dim)
        {
            return Err(GmmError::Format("ragged parameter arrays".into()));
        }
        Gmm::from_parts(doc.weights, doc.means.concat(), doc.variances.concat(), dim, doc.fingerprint)
    }
}

impl Gmm {
    pub fn to_json(&self) -> Result<String, GmmError> {
        Ok(serde_json::to_string_pretty(&GmmDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self, GmmError> {
        serde_json::from_str::<GmmDocument>(text)?.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GmmError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GmmError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
