//! Transfer to an unseen region with everything but the GAT layer and head frozen.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headcalib::EvalReport;

use super::model::{Model, Prepared};
use super::train::{evaluate, run_epochs, History, Schedule};

pub const TRAINABLE_PREFIXES: [&str; 2] = ["gat.", "head."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenDiff {
    pub checked: usize,
    /// Frozen tensors whose bytes changed; must be empty.
    pub changed_frozen: Vec<String>,
    pub changed_trainable: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub zero_shot: EvalReport,
    pub finetuned: EvalReport,
    pub history: History,
    /// Pretrained against the returned (best) state.
    pub diff: FrozenDiff,
    /// Pretrained against the state after the last epoch, which differs from
    /// `diff` when early stopping kept an earlier state.
    pub last_diff: FrozenDiff,
}

fn is_trainable(name: &str) -> bool {
    TRAINABLE_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Byte-level comparison of every tensor in `before` against `after`.
pub fn frozen_diff(before: &Model, after: &Model) -> FrozenDiff {
    let mut diff = FrozenDiff { checked: 0, changed_frozen: Vec::new(), changed_trainable: Vec::new() };
    for name in before.store.names() {
        diff.checked += 1;
        if before.store.value_bytes(name) != after.store.value_bytes(name) {
            if is_trainable(name) {
                diff.changed_trainable.push(name.to_string());
            } else {
                diff.changed_frozen.push(name.to_string());
            }
        }
    }
    diff
}

/// Fine-tunes a copy of `pretrained` on `prep` for at most `epochs` epochs,
/// keeping the best validation-F1 state (the pretrained one included).
pub fn finetune(pretrained: &Model, prep: &Prepared, epochs: usize) -> Result<(Model, FinetuneReport)> {
    let cfg = &pretrained.cfg;
    let zero_shot = evaluate(pretrained, prep, prep.split.test(), 1)?.report;
    let mut model = pretrained.clone();
    model.store.freeze_all_except(&TRAINABLE_PREFIXES);
    let sched = Schedule {
        epochs,
        patience: Some(cfg.patience),
        include_start: true,
        refit_gate: false,
        seed: cfg.seed.wrapping_add(1),
    };
    let (history, last) = run_epochs(&mut model, prep, sched)?;
    let diff = frozen_diff(pretrained, &model);
    let last_diff = frozen_diff(pretrained, &Model { store: last, ..model.clone() });
    for d in [&diff, &last_diff] {
        if !d.changed_frozen.is_empty() {
            return Err(Error::FrozenViolation(d.changed_frozen.join(", ")));
        }
    }
    model.store.set_all_trainable(true);
    let finetuned = evaluate(&model, prep, prep.split.test(), 1)?.report;
    Ok((model, FinetuneReport { zero_shot, finetuned, history, diff, last_diff }))
}
