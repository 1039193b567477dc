//! Binary model container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every array listed in the header as little-endian `f64`.
//! Floating-point data lives only in the arrays, so a round trip is bit-exact.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{write_atomically, Standardizer};
use crate::elbo::Likelihood;
use crate::error::{QsgpError, Result};
use crate::features::{BasisExpansion, BasisKind, Hyperparameters};
use crate::optimizer::{RvmState, TrainConfig};
use crate::state::VariationalState;

pub const MAGIC: &[u8; 8] = b"QSGPMODL";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to predict with, inspect or resume a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub likelihood: Likelihood,
    pub kind: BasisKind,
    pub seed: u64,
    /// Hyperparameters at the end of training.
    pub hyper: Hyperparameters,
    /// Hyperparameters the control variate was built with.
    pub initial_hyper: Hyperparameters,
    /// Basis centers (`m × d`) for the inducing and dictionary kinds.
    pub centers: Option<DMatrix<f64>>,
    /// Per-basis precisions of the dictionary kind.
    pub precisions: Vec<f64>,
    pub state: VariationalState,
    pub rvm: Option<RvmState>,
    pub standardizer: Standardizer,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    likelihood: Likelihood,
    kind: BasisKind,
    m: usize,
    d: usize,
    chevron_k: usize,
    seed: u64,
    prune_threshold: Option<f64>,
    config: TrainConfig,
    arrays: Vec<(String, usize)>,
}

fn format_err(msg: impl Into<String>) -> QsgpError {
    QsgpError::Format(msg.into())
}

impl ModelArtifact {
    pub fn new(
        likelihood: Likelihood,
        expansion: &BasisExpansion,
        initial_hyper: Hyperparameters,
        state: VariationalState,
        rvm: Option<RvmState>,
        standardizer: Standardizer,
        config: TrainConfig,
    ) -> Result<Self> {
        if expansion.kind() == BasisKind::ExplicitDictionary && expansion.centers().is_none() {
            return Err(QsgpError::Unsupported(
                "matrix-backed dictionaries cannot be persisted".into(),
            ));
        }
        if state.m() != expansion.m() {
            return Err(QsgpError::InvalidArgument("state and expansion disagree on the basis count".into()));
        }
        if standardizer.d() != expansion.hyper().dim() {
            return Err(QsgpError::InvalidArgument("standardizer and expansion disagree on the input dimension".into()));
        }
        Ok(Self {
            likelihood,
            kind: expansion.kind(),
            seed: expansion.seed(),
            hyper: expansion.hyper().clone(),
            initial_hyper,
            centers: expansion.centers().cloned(),
            precisions: expansion.precisions().to_vec(),
            state,
            rvm,
            standardizer,
            config,
        })
    }

    pub fn m(&self) -> usize {
        self.state.m()
    }

    pub fn d(&self) -> usize {
        self.hyper.dim()
    }

    /// Rebuilds the basis expansion with the final hyperparameters.
    pub fn expansion(&self) -> Result<BasisExpansion> {
        let centers = || {
            self.centers
                .clone()
                .ok_or_else(|| QsgpError::InvalidState("centers are missing".into()))
        };
        match self.kind {
            BasisKind::RffSeArd => BasisExpansion::rff(self.m(), self.seed, self.hyper.clone()),
            BasisKind::InducingPoint => BasisExpansion::inducing(centers()?, self.hyper.clone()),
            BasisKind::ExplicitDictionary => {
                BasisExpansion::dictionary_from_kernel(centers()?, self.hyper.clone(), self.precisions.clone())
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = self.m();
        let d = self.d();
        let mut arrays: Vec<(&str, Vec<f64>)> = vec![
            ("hyper", self.hyper.to_vec()),
            ("initial_hyper", self.initial_hyper.to_vec()),
            ("mu", self.state.mu().to_vec()),
            ("dense_cols", self.state.dense_columns().concat()),
            ("log_diag", self.state.log_diagonal().to_vec()),
            ("x_mean", self.standardizer.x_mean.clone()),
            ("x_scale", self.standardizer.x_scale.clone()),
            ("y_affine", vec![self.standardizer.y_mean, self.standardizer.y_scale]),
            ("precisions", self.precisions.clone()),
        ];
        if let Some(c) = &self.centers {
            // row-major so each center is contiguous
            arrays.push(("centers", c.transpose().as_slice().to_vec()));
        }
        if let Some(r) = &self.rvm {
            arrays.push(("log_s", r.log_s.clone()));
        }
        let header = Header {
            likelihood: self.likelihood,
            kind: self.kind,
            m,
            d,
            chevron_k: self.state.chevron_width(),
            seed: self.seed,
            prune_threshold: self.rvm.as_ref().map(|r| r.prune_threshold),
            config: self.config.clone(),
            arrays: arrays.iter().map(|(n, v)| (n.to_string(), v.len())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let payload: usize = arrays.iter().map(|(_, v)| v.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &arrays {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |len: usize| -> Result<&[u8]> {
            if cur.len() < len {
                return Err(format_err("unexpected end of model file"));
            }
            let (head, tail) = cur.split_at(len);
            cur = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(format_err("not a model file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| format_err("header too large"))?;
        let header: Header = serde_json::from_slice(take(hlen)?).map_err(|e| format_err(e.to_string()))?;
        let mut arrays = std::collections::HashMap::new();
        for (name, len) in &header.arrays {
            let raw = take(len.checked_mul(8).ok_or_else(|| format_err("array too large"))?)?;
            let v: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(name.as_str(), v);
        }
        if !cur.is_empty() {
            return Err(format_err("trailing bytes after the last array"));
        }
        let centers_raw = arrays.remove("centers");
        let log_s_raw = arrays.remove("log_s");
        let mut get = |name: &str| arrays.remove(name).ok_or_else(|| format_err(format!("missing array '{name}'")));

        let (m, d, k) = (header.m, header.d, header.chevron_k);
        if k > m {
            return Err(format_err("chevron width exceeds the basis count"));
        }
        let hyper = Hyperparameters::from_slice(&get("hyper")?)?;
        let initial_hyper = Hyperparameters::from_slice(&get("initial_hyper")?)?;
        if hyper.dim() != d || initial_hyper.dim() != d {
            return Err(format_err("hyperparameter dimension mismatch"));
        }
        let flat = get("dense_cols")?;
        let expected: usize = (0..k).map(|r| m - r).sum();
        if flat.len() != expected {
            return Err(format_err("dense column block has the wrong size"));
        }
        let mut dense = Vec::with_capacity(k);
        let mut off = 0;
        for r in 0..k {
            dense.push(flat[off..off + m - r].to_vec());
            off += m - r;
        }
        let state = VariationalState::from_parts(get("mu")?, dense, get("log_diag")?)?;
        if state.m() != m {
            return Err(format_err("state size does not match the header"));
        }
        let y_affine = get("y_affine")?;
        if y_affine.len() != 2 {
            return Err(format_err("target transform must have two entries"));
        }
        let standardizer = Standardizer {
            x_mean: get("x_mean")?,
            x_scale: get("x_scale")?,
            y_mean: y_affine[0],
            y_scale: y_affine[1],
        };
        if standardizer.x_mean.len() != d || standardizer.x_scale.len() != d {
            return Err(format_err("input transform has the wrong dimension"));
        }
        let finite = |v: f64| v.is_finite();
        if !standardizer.x_mean.iter().copied().all(finite)
            || !standardizer.x_scale.iter().chain([&standardizer.y_scale]).all(|&v| finite(v) && v > 0.0)
            || !finite(standardizer.y_mean)
        {
            return Err(format_err("standardization parameters must be finite with positive scales"));
        }
        let centers = match centers_raw {
            Some(v) if v.len() == m * d => Some(DMatrix::from_row_slice(m, d, &v)),
            Some(_) => return Err(format_err("centers have the wrong size")),
            None => None,
        };
        let rvm = match (log_s_raw, header.prune_threshold) {
            (Some(log_s), Some(prune_threshold)) if log_s.len() == m => Some(RvmState {
                log_s,
                prune_threshold,
            }),
            (None, None) => None,
            _ => return Err(format_err("inconsistent precision block")),
        };
        let out = Self {
            likelihood: header.likelihood,
            kind: header.kind,
            seed: header.seed,
            hyper,
            initial_hyper,
            centers,
            precisions: get("precisions")?,
            state,
            rvm,
            standardizer,
            config: header.config,
        };
        out.expansion()?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomically(path.as_ref(), |w| Ok(w.write_all(&bytes)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
