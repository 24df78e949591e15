//! Experiment configuration: a JSON document with `env`, `policy`, `train`,
//! `eval`, and optional `sweep` sections.
//!
//! Parsing is strict: unknown keys are hard errors (with a nearest-key
//! suggestion) and type mismatches report the offending path. Every field
//! has a default, so the minimal useful config is
//! `{"train": {"algorithm": "flowrl"}, "env": {"family": "modal_seq"}}`.
//! The resolved spec — all defaults applied — is what runs echo to their
//! artifact directory, and re-parsing that echo yields the same spec.

use crate::envs::{Environment, HypergridConfig, ModalConfig};
use crate::error::{Error, Result};
use crate::objectives::{ActorCritic, Critic, FlowModel, PartitionNet, RewardNormMode};
use crate::policy::{MlpDims, Policy, PolicyKind};
use crate::rng;
use crate::trainer::{Algorithm, EvalSettings, Learner, OptimizerKind, TrainConfig, CHANNEL_INIT};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::Path;

/// Fully resolved experiment description; serializing and re-parsing it is
/// the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub env: EnvSpec,
    pub policy: PolicySpec,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

/// Environment family plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum EnvSpec {
    #[serde(rename = "modal_seq")]
    ModalSeq(ModalParams),
    #[serde(rename = "conditional")]
    Conditional(ModalParams),
    #[serde(rename = "hypergrid")]
    Hypergrid(HypergridParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalParams {
    pub vocab_size: usize,
    pub length: usize,
    pub variable_length: bool,
    pub num_modes: usize,
    pub peaks: Vec<f64>,
    pub tau: Vec<f64>,
    pub floor: f64,
    pub radius: usize,
    pub num_prompts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypergridParams {
    pub dims: usize,
    pub side: usize,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub radius: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Token/position embedding width (mlp policies and the critic).
    pub token_embed_dim: usize,
    /// Hidden width shared by the mlp policy head, the partition net, and
    /// the critic head.
    pub hidden_dim: usize,
}

/// One-parameter grid: `parameter` is a dotted path into the resolved spec
/// (e.g. `train.beta`), crossed with `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: String,
    pub values: Vec<Value>,
    pub seeds: Vec<u64>,
}

// ---------------------------------------------------------------------------
// Raw (pre-default) form.
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    env: Option<RawEnv>,
    policy: Option<RawPolicy>,
    train: Option<RawTrain>,
    eval: Option<RawEval>,
    sweep: Option<SweepSpec>,
}

#[derive(Debug, Default, Deserialize)]
struct RawEnv {
    family: Option<String>,
    vocab_size: Option<usize>,
    length: Option<usize>,
    variable_length: Option<bool>,
    num_modes: Option<usize>,
    peaks: Option<Vec<f64>>,
    tau: Option<Vec<f64>>,
    floor: Option<f64>,
    radius: Option<usize>,
    num_prompts: Option<usize>,
    seed: Option<u64>,
    dims: Option<usize>,
    side: Option<usize>,
    r0: Option<f64>,
    r1: Option<f64>,
    r2: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    kind: Option<PolicyKind>,
    token_embed_dim: Option<usize>,
    hidden_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    algorithm: Option<Algorithm>,
    steps: Option<usize>,
    prompts_per_batch: Option<usize>,
    group_size: Option<usize>,
    micro_batches_per_rollout: Option<usize>,
    optimizer: Option<OptimizerKind>,
    lr_policy: Option<f64>,
    lr_partition: Option<f64>,
    lr_critic: Option<f64>,
    beta: Option<f64>,
    epsilon: Option<f64>,
    lambda: Option<f64>,
    reward_norm_mode: Option<RewardNormMode>,
    use_importance_weights: Option<bool>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    interval: Option<usize>,
    samples: Option<usize>,
    enumerate: Option<bool>,
    checkpoint_interval: Option<usize>,
}

// ---------------------------------------------------------------------------
// Key validation with suggestions.
// ---------------------------------------------------------------------------

const TOP_KEYS: &[&str] = &["env", "policy", "train", "eval", "sweep"];
const MODAL_KEYS: &[&str] = &[
    "family",
    "vocab_size",
    "length",
    "variable_length",
    "num_modes",
    "peaks",
    "tau",
    "floor",
    "radius",
    "num_prompts",
    "seed",
];
const HYPERGRID_KEYS: &[&str] = &["family", "dims", "side", "r0", "r1", "r2", "radius"];
const POLICY_KEYS: &[&str] = &["kind", "token_embed_dim", "hidden_dim"];
const TRAIN_KEYS: &[&str] = &[
    "algorithm",
    "steps",
    "prompts_per_batch",
    "group_size",
    "micro_batches_per_rollout",
    "optimizer",
    "lr_policy",
    "lr_partition",
    "lr_critic",
    "beta",
    "epsilon",
    "lambda",
    "reward_norm_mode",
    "use_importance_weights",
    "seed",
];
const EVAL_KEYS: &[&str] = &["interval", "samples", "enumerate", "checkpoint_interval"];
const SWEEP_KEYS: &[&str] = &["parameter", "values", "seeds"];
const FAMILIES: &[&str] = &["modal_seq", "conditional", "hypergrid"];

/// Classic edit distance; small strings only.
fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut row = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            row.push(sub.min(prev[j + 1] + 1).min(row[j] + 1));
        }
        prev = row;
    }
    prev[b.len()]
}

fn nearest<'a>(key: &str, allowed: &[&'a str]) -> &'a str {
    allowed
        .iter()
        .min_by_key(|a| edit_distance(key, a))
        .expect("allowed key lists are never empty")
}

fn check_keys(section: &str, obj: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            let at = if section.is_empty() {
                key.clone()
            } else {
                format!("{section}.{key}")
            };
            return Err(Error::Config(format!(
                "unknown key \"{at}\"; nearest valid key is \"{}\"",
                nearest(key, allowed)
            )));
        }
    }
    Ok(())
}

fn as_object<'v>(section: &str, v: &'v Value) -> Result<&'v Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::Config(format!("section \"{section}\" must be a JSON object")))
}

/// Reject unknown keys everywhere before typed parsing, so misspellings get
/// suggestions instead of bare serde errors.
fn validate_keys(root: &Value) -> Result<()> {
    let top = as_object("<root>", root)?;
    check_keys("", top, TOP_KEYS)?;
    if let Some(env) = top.get("env") {
        let obj = as_object("env", env)?;
        let family = match obj.get("family") {
            None => "modal_seq",
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(Error::Config("env.family must be a string".into())),
        };
        let allowed = match family {
            "modal_seq" | "conditional" => MODAL_KEYS,
            "hypergrid" => HYPERGRID_KEYS,
            other => {
                return Err(Error::Config(format!(
                    "unknown env family \"{other}\"; valid families are {FAMILIES:?}"
                )))
            }
        };
        check_keys("env", obj, allowed)?;
    }
    for (name, allowed) in [
        ("policy", POLICY_KEYS),
        ("train", TRAIN_KEYS),
        ("eval", EVAL_KEYS),
        ("sweep", SWEEP_KEYS),
    ] {
        if let Some(section) = top.get(name) {
            check_keys(name, as_object(name, section)?, allowed)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Defaults and resolution.
// ---------------------------------------------------------------------------

fn resolve_env(raw: RawEnv) -> EnvSpec {
    let family = raw.family.as_deref().unwrap_or("modal_seq");
    match family {
        "hypergrid" => EnvSpec::Hypergrid(HypergridParams {
            dims: raw.dims.unwrap_or(2),
            side: raw.side.unwrap_or(8),
            r0: raw.r0.unwrap_or(0.01),
            r1: raw.r1.unwrap_or(0.5),
            r2: raw.r2.unwrap_or(2.0),
            radius: raw.radius.unwrap_or(1),
        }),
        _ => {
            let conditional = family == "conditional";
            let params = ModalParams {
                vocab_size: raw.vocab_size.unwrap_or(4),
                length: raw.length.unwrap_or(6),
                variable_length: raw.variable_length.unwrap_or(false),
                num_modes: raw.num_modes.unwrap_or(4),
                peaks: raw.peaks.unwrap_or_else(|| vec![1.0]),
                tau: raw.tau.unwrap_or_else(|| vec![0.5]),
                floor: raw.floor.unwrap_or(0.01),
                radius: raw.radius.unwrap_or(1),
                num_prompts: raw.num_prompts.unwrap_or(if conditional { 4 } else { 1 }),
                seed: raw.seed.unwrap_or(7),
            };
            if conditional {
                EnvSpec::Conditional(params)
            } else {
                EnvSpec::ModalSeq(params)
            }
        }
    }
}

fn resolve(raw: RawSpec) -> ExperimentSpec {
    let env = resolve_env(raw.env.unwrap_or_default());
    let rp = raw.policy.unwrap_or_default();
    let policy = PolicySpec {
        kind: rp.kind.unwrap_or(PolicyKind::Tabular),
        token_embed_dim: rp.token_embed_dim.unwrap_or(8),
        hidden_dim: rp.hidden_dim.unwrap_or(16),
    };
    let rt = raw.train.unwrap_or_default();
    let lr_policy = rt.lr_policy.unwrap_or(match policy.kind {
        PolicyKind::Tabular => 1e-2,
        PolicyKind::Mlp => 1e-3,
    });
    let train = TrainConfig {
        algorithm: rt.algorithm.unwrap_or(Algorithm::Flowrl),
        steps: rt.steps.unwrap_or(500),
        prompts_per_batch: rt.prompts_per_batch.unwrap_or(1),
        group_size: rt.group_size.unwrap_or(8),
        micro_batches_per_rollout: rt.micro_batches_per_rollout.unwrap_or(4),
        optimizer: rt.optimizer.unwrap_or(OptimizerKind::Adam),
        lr_policy,
        lr_partition: rt.lr_partition.unwrap_or(10.0 * lr_policy),
        lr_critic: rt.lr_critic.unwrap_or(lr_policy),
        beta: rt.beta.unwrap_or(15.0),
        epsilon: rt.epsilon.unwrap_or(0.2),
        lambda: rt.lambda.unwrap_or(1e-3),
        reward_norm_mode: rt.reward_norm_mode.unwrap_or(RewardNormMode::Group),
        use_importance_weights: rt.use_importance_weights.unwrap_or(true),
        seed: rt.seed.unwrap_or(0),
    };
    let re = raw.eval.unwrap_or_default();
    let eval = EvalSettings {
        interval: re.interval.unwrap_or(50),
        samples: re.samples.unwrap_or(20_000),
        enumerate: re.enumerate.unwrap_or(true),
        checkpoint_interval: re.checkpoint_interval.unwrap_or(0),
    };
    ExperimentSpec {
        env,
        policy,
        train,
        eval,
        sweep: raw.sweep,
    }
}

/// Parse, validate, and resolve a config document held in memory.
pub fn parse_config_value(root: Value) -> Result<ExperimentSpec> {
    validate_keys(&root)?;
    let raw: RawSpec = serde_path_to_error::deserialize(root)
        .map_err(|e| Error::Config(format!("at {}: {}", e.path(), e.inner())))?;
    let spec = resolve(raw);
    spec.train.validate()?;
    spec.eval.validate()?;
    if let Some(sweep) = &spec.sweep {
        if sweep.values.is_empty() || sweep.seeds.is_empty() {
            return Err(Error::Config(
                "sweep.values and sweep.seeds must be non-empty".into(),
            ));
        }
    }
    Ok(spec)
}

/// Parse an experiment config file (strict JSON).
pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", path.display())))?;
    parse_config_value(root)
}

/// Set a dotted-path parameter (e.g. `train.beta`) in a resolved spec and
/// re-validate. Used by sweeps.
pub fn override_parameter(
    spec: &ExperimentSpec,
    parameter: &str,
    value: &Value,
) -> Result<ExperimentSpec> {
    let mut root = serde_json::to_value(spec)?;
    let segments: Vec<&str> = parameter.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!(
            "sweep parameter \"{parameter}\" is not a dotted key path"
        )));
    }
    // Validate the path immutably so misses get suggestions.
    let mut node = &root;
    for (i, segment) in segments.iter().enumerate() {
        let obj = node.as_object().ok_or_else(|| {
            Error::Config(format!(
                "sweep parameter \"{parameter}\": \"{}\" is not an object",
                segments[..i].join(".")
            ))
        })?;
        match obj.get(*segment) {
            Some(next) => node = next,
            None => {
                let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
                return Err(Error::Config(format!(
                    "sweep parameter \"{parameter}\": no such key \"{segment}\"; nearest is \"{}\"",
                    nearest(segment, &keys)
                )));
            }
        }
    }
    let (last, parents) = segments.split_last().expect("non-empty by construction");
    let parent = if parents.is_empty() {
        &mut root
    } else {
        root.pointer_mut(&format!("/{}", parents.join("/")))
            .expect("path validated above")
    };
    parent
        .as_object_mut()
        .expect("path validated above")
        .insert((*last).to_string(), value.clone());
    parse_config_value(root)
}

// ---------------------------------------------------------------------------
// Builders.
// ---------------------------------------------------------------------------

/// Instantiate the environment described by a resolved spec.
pub fn build_env(spec: &EnvSpec) -> Result<Environment> {
    match spec {
        EnvSpec::ModalSeq(p) | EnvSpec::Conditional(p) => ModalConfig {
            vocab_size: p.vocab_size,
            length: p.length,
            variable_length: p.variable_length,
            num_modes: p.num_modes,
            peaks: p.peaks.clone(),
            tau: p.tau.clone(),
            floor: p.floor,
            radius: p.radius,
            num_prompts: p.num_prompts,
            seed: p.seed,
        }
        .build(),
        EnvSpec::Hypergrid(p) => HypergridConfig {
            dims: p.dims,
            side: p.side,
            r0: p.r0,
            r1: p.r1,
            r2: p.r2,
            radius: p.radius,
        }
        .build(),
    }
}

/// Instantiate the learner (policy plus any auxiliary nets) for the
/// configured algorithm. Initialization draws from dedicated RNG streams
/// keyed by the training seed.
pub fn build_learner(spec: &ExperimentSpec, env: &Environment) -> Result<Learner> {
    let prompt_dim = env
        .prompts
        .first()
        .map(|p| p.embedding.len())
        .ok_or_else(|| Error::Contract("environment has no prompts".into()))?;
    let dims = MlpDims {
        prompt_dim,
        token_embed_dim: spec.policy.token_embed_dim,
        hidden_dim: spec.policy.hidden_dim,
    };
    let seed = spec.train.seed;
    let policy = match spec.policy.kind {
        PolicyKind::Tabular => Policy::new_tabular(env.space),
        PolicyKind::Mlp => {
            Policy::new_mlp(env.space, dims, &mut rng::stream(seed, &[CHANNEL_INIT, 0]))
        }
    };
    Ok(match spec.train.algorithm {
        Algorithm::Flowrl | Algorithm::Tb => Learner::Flow(FlowModel {
            policy,
            partition: PartitionNet::new(
                prompt_dim,
                spec.policy.hidden_dim,
                &mut rng::stream(seed, &[CHANNEL_INIT, 1]),
            ),
        }),
        Algorithm::Grpo | Algorithm::Rpp => Learner::PolicyOnly(policy),
        Algorithm::Ppo => Learner::ActorCritic(ActorCritic {
            policy,
            critic: Critic::new(env.space, dims, &mut rng::stream(seed, &[CHANNEL_INIT, 2])),
        }),
    })
}
