//! Policy checkpoint serialization.
//!
//! Checkpoints are JSON documents with a fixed layout: a header describing
//! the policy kind and dimensions, then the parameter arrays in declaration
//! order. `f64` values round-trip exactly through JSON (shortest-round-trip
//! encoding), so a reloaded policy scores sequences bit-identically.

use super::{MlpDims, MlpPolicy, Policy, PolicyKind, TabularPolicy, TokenSpace};
use crate::error::{Error, Result};
use crate::grad::{Activation, DenseNet, Layer, ParamBlock, Parameter};
use serde::{Deserialize, Serialize};

/// Serialized form of one parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamData {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ParamData {
    fn from_param(p: &Parameter) -> Self {
        Self {
            name: p.name.clone(),
            rows: p.rows,
            cols: p.cols,
            values: p.values.clone(),
        }
    }

    fn into_param(self) -> Result<Parameter> {
        if self.values.len() != self.rows * self.cols {
            return Err(Error::Contract(format!(
                "parameter {}: {} values for shape {}x{}",
                self.name,
                self.values.len(),
                self.rows,
                self.cols
            )));
        }
        let grad = vec![0.0; self.values.len()];
        Ok(Parameter {
            name: self.name,
            rows: self.rows,
            cols: self.cols,
            values: self.values,
            grad,
        })
    }
}

/// On-disk policy representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub kind: PolicyKind,
    pub space: TokenSpace,
    /// MLP-only: prompt/token-embedding/hidden widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    /// MLP-only: head activations, one per layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_activations: Option<Vec<Activation>>,
    pub params: Vec<ParamData>,
}

pub const CHECKPOINT_FORMAT: &str = "flowlab-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Capture a policy as a checkpoint document.
pub fn save_policy(policy: &Policy) -> PolicyCheckpoint {
    let (prompt_dim, token_embed_dim, hidden_dim, head_activations) = match policy {
        Policy::Tabular(_) => (None, None, None, None),
        Policy::Mlp(p) => (
            Some(p.dims.prompt_dim),
            Some(p.dims.token_embed_dim),
            Some(p.dims.hidden_dim),
            Some(p.head.layers.iter().map(|l| l.activation).collect()),
        ),
    };
    PolicyCheckpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        kind: policy.kind(),
        space: *policy.space(),
        prompt_dim,
        token_embed_dim,
        hidden_dim,
        head_activations,
        params: policy
            .params()
            .iter()
            .map(|p| ParamData::from_param(p))
            .collect(),
    }
}

/// Rebuild a policy from a checkpoint document, validating shapes.
pub fn load_policy(ckpt: PolicyCheckpoint) -> Result<Policy> {
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Contract(format!(
            "unknown checkpoint format {:?}",
            ckpt.format
        )));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Contract(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    let mut params = ckpt.params.into_iter();
    match ckpt.kind {
        PolicyKind::Tabular => {
            let logits = params
                .next()
                .ok_or_else(|| Error::Contract("tabular checkpoint missing logits".into()))?
                .into_param()?;
            let expect = (ckpt.space.prefix_count(), ckpt.space.vocab_size);
            if (logits.rows, logits.cols) != expect {
                return Err(Error::Contract(format!(
                    "logit table is {}x{}, space needs {}x{}",
                    logits.rows, logits.cols, expect.0, expect.1
                )));
            }
            Ok(Policy::Tabular(TabularPolicy {
                space: ckpt.space,
                logits,
            }))
        }
        PolicyKind::Mlp => {
            let dims = MlpDims {
                prompt_dim: ckpt
                    .prompt_dim
                    .ok_or_else(|| Error::Contract("mlp checkpoint missing prompt_dim".into()))?,
                token_embed_dim: ckpt.token_embed_dim.ok_or_else(|| {
                    Error::Contract("mlp checkpoint missing token_embed_dim".into())
                })?,
                hidden_dim: ckpt
                    .hidden_dim
                    .ok_or_else(|| Error::Contract("mlp checkpoint missing hidden_dim".into()))?,
            };
            let activations = ckpt
                .head_activations
                .ok_or_else(|| Error::Contract("mlp checkpoint missing activations".into()))?;
            let token_embed = params
                .next()
                .ok_or_else(|| Error::Contract("mlp checkpoint missing token embeddings".into()))?
                .into_param()?;
            let pos_embed = params
                .next()
                .ok_or_else(|| {
                    Error::Contract("mlp checkpoint missing position embeddings".into())
                })?
                .into_param()?;
            let rest: Vec<Parameter> = params.map(|p| p.into_param()).collect::<Result<_>>()?;
            if rest.len() != 2 * activations.len() {
                return Err(Error::Contract(format!(
                    "head has {} parameters for {} layers",
                    rest.len(),
                    activations.len()
                )));
            }
            let mut layers = Vec::with_capacity(activations.len());
            let mut it = rest.into_iter();
            for &activation in &activations {
                let weight = it.next().unwrap();
                let bias = it.next().unwrap();
                if bias.rows != weight.rows {
                    return Err(Error::Contract(format!(
                        "layer bias {} does not match weight rows {}",
                        bias.rows, weight.rows
                    )));
                }
                layers.push(Layer {
                    weight,
                    bias,
                    activation,
                });
            }
            Ok(Policy::Mlp(MlpPolicy {
                space: ckpt.space,
                dims,
                token_embed,
                pos_embed,
                head: DenseNet { layers },
            }))
        }
    }
}
