//! Dynamic early exit: per-block exit scores, the cumulative exit rule, and
//! the block sparsity loss.
//!
//! Block `l > enforced` is preceded by a gate that reads one scalar per token
//! from the tokens entering the block and maps it through a linear layer and
//! a sigmoid. The forward pass stops after the first block `l` at which
//! `sum_{k=enforced+1..=l} weight * score_k >= 1 - slack`; otherwise it runs
//! to full depth.

use std::convert::Infallible;

use rand::Rng;

use crate::backbone::TokenSequence;
use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::numerics::{trunc_normal, Graph, ParamStore, Session, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// The parameters of the exit rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitRule {
    pub depth: usize,
    pub enforced: usize,
    pub weight: f64,
    pub slack: f64,
}

impl ExitRule {
    pub fn threshold(&self) -> f64 {
        1.0 - self.slack
    }

    pub fn first_examined(&self) -> usize {
        self.enforced + 1
    }
}

impl From<&ViTConfig> for ExitRule {
    fn from(cfg: &ViTConfig) -> Self {
        Self {
            depth: cfg.depth,
            enforced: cfg.enforced_blocks,
            weight: cfg.exit_weight,
            slack: cfg.exit_slack,
        }
    }
}

/// Scores and cumulative scores of the examined blocks, and where the
/// forward pass stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitTrace {
    /// Layer of `scores[0]`.
    pub first_examined: usize,
    pub scores: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub exit_layer: usize,
    pub exited_early: bool,
}

impl ExitTrace {
    /// Trace of a pass that never examined a gate.
    pub fn full_depth(depth: usize) -> Self {
        Self {
            first_examined: depth + 1,
            scores: Vec::new(),
            cumulative: Vec::new(),
            exit_layer: depth,
            exited_early: false,
        }
    }

    pub fn examined(&self) -> usize {
        self.scores.len()
    }

    pub fn score_at(&self, layer: usize) -> Option<f64> {
        layer
            .checked_sub(self.first_examined)
            .and_then(|i| self.scores.get(i).copied())
    }

    pub fn mean_score(&self) -> Option<f64> {
        (!self.scores.is_empty()).then(|| self.scores.iter().sum::<f64>() / self.scores.len() as f64)
    }
}

/// Evaluates `score_at(l)` for `l = enforced+1, enforced+2, ...` and stops at
/// the first layer whose cumulative score reaches the threshold. Layers
/// past the exit are never evaluated.
pub fn resolve_exit(rule: &ExitRule, mut score_at: impl FnMut(usize) -> f64) -> ExitTrace {
    match try_resolve_exit(rule, |l| Ok::<_, Infallible>(score_at(l))) {
        Ok(t) => t,
        Err(never) => match never {},
    }
}

pub fn try_resolve_exit<E>(
    rule: &ExitRule,
    mut score_at: impl FnMut(usize) -> std::result::Result<f64, E>,
) -> std::result::Result<ExitTrace, E> {
    let first = rule.first_examined();
    let mut trace = ExitTrace {
        first_examined: first,
        scores: Vec::new(),
        cumulative: Vec::new(),
        exit_layer: rule.depth,
        exited_early: false,
    };
    let mut q = 0.0;
    for layer in first..=rule.depth {
        let e = score_at(layer)?;
        q += rule.weight * e;
        trace.scores.push(e);
        trace.cumulative.push(q);
        if q >= rule.threshold() {
            trace.exit_layer = layer;
            trace.exited_early = layer < rule.depth;
            break;
        }
    }
    Ok(trace)
}

/// Parameter names of the gate in front of block `layer`.
pub fn gate_names(cfg: &ViTConfig, layer: usize) -> (String, String) {
    let key = if cfg.share_exit_layers {
        "shared".to_owned()
    } else {
        format!("{layer:02}")
    };
    (format!("exit.{key}.weight"), format!("exit.{key}.bias"))
}

/// Gates exist for every block that could be examined under any valid
/// `enforced_blocks`, i.e. blocks `2..=depth`.
pub(crate) fn register_params<R: Rng>(store: &mut ParamStore, cfg: &ViTConfig, rng: &mut R) -> Result<()> {
    let k = cfg.total_tokens();
    let layers: Vec<usize> = if cfg.share_exit_layers {
        vec![2]
    } else {
        (2..=cfg.depth).collect()
    };
    for l in layers {
        let (w, b) = gate_names(cfg, l);
        store.insert(w, trunc_normal(&[k, 1], INIT_STD, rng))?;
        store.insert(b, Tensor::zeros(&[1]))?;
    }
    Ok(())
}

/// One scalar per token: the first embedding channel, shape `[K]`.
pub fn slice_vector(g: &mut Graph, t: &TokenSequence) -> Result<Var> {
    let col = g.slice_cols(t.tokens, 0, 1)?;
    g.reshape(col, &[t.len()])
}

/// `sigmoid(b . weight + bias)` as a one-element var.
pub fn exit_score(g: &mut Graph, b: Var, weight: Var, bias: Var) -> Result<Var> {
    let k = g.shape(b).iter().product();
    if g.shape(weight) != [k, 1] {
        return Err(Error::shape(
            "exit_score",
            format!("slice has {k} entries, gate weight is {:?}", g.shape(weight)),
        ));
    }
    let row = g.reshape(b, &[1, k])?;
    let z = g.matmul(row, weight)?;
    let z = g.add(z, bias)?;
    let z = g.reshape(z, &[1])?;
    Ok(g.sigmoid(z))
}

/// Exit score of the gate in front of block `layer`, read from the tokens
/// that enter it (`t.layer == layer - 1`).
pub fn gate_score(s: &mut Session, cfg: &ViTConfig, t: &TokenSequence, layer: usize) -> Result<Var> {
    if t.layer + 1 != layer {
        return Err(Error::InvalidArgument(format!(
            "gate {layer} reads tokens from layer {}, got layer {}",
            layer - 1,
            t.layer
        )));
    }
    let (wn, bn) = gate_names(cfg, layer);
    let w = s.param(&wn)?;
    let b = s.param(&bn)?;
    let slice = slice_vector(s, t)?;
    exit_score(s, slice, w, b)
}

/// `(mean(scores) - target)^2`.
pub fn sparsity_loss(g: &mut Graph, scores: &[Var], target: f64) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("sparsity loss needs at least one examined gate".into()));
    }
    let all = g.concat(scores)?;
    let mean = g.mean(all);
    let diff = g.add_scalar(mean, -target);
    Ok(g.square(diff))
}
