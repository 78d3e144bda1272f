//! Aligned text renderings of result tables; JSON comes from serde.

use std::fmt::Write as _;

use super::ablate::AblationResult;
use super::finetune::FinetuneReport;
use super::train::GridPoint;

pub fn ablation_table(res: &AblationResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:>8} {:>8} {:>8} {:>9} {:>8} {:>6}", "variant", "f1", "ece", "accuracy", "precision", "recall", "epoch");
    for r in &res.rows {
        let _ = writeln!(
            s,
            "{:<28} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>8.4} {:>6}",
            r.label, r.f1, r.ece, r.accuracy, r.precision, r.recall, r.best_epoch
        );
    }
    s
}

pub fn grid_table(grid: &[GridPoint]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>5} {:>5} {:>10} {:>10} {:>8} {:>8}", "low", "high", "tau_low", "tau_high", "val_f1", "val_ece");
    for p in grid {
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>10.6} {:>10.6} {:>8.4} {:>8.4}",
            p.low_pct, p.high_pct, p.tau_low, p.tau_high, p.val_f1, p.val_ece
        );
    }
    s
}

pub fn finetune_table(rep: &FinetuneReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>9} {:>8}", "model", "f1", "ece", "accuracy", "precision", "recall");
    for (name, r) in [("zero-shot", &rep.zero_shot), ("fine-tuned", &rep.finetuned)] {
        let _ = writeln!(
            s,
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>8.4}",
            name, r.f1, r.ece, r.accuracy, r.precision, r.recall
        );
    }
    let _ = writeln!(s, "best_epoch={}", rep.history.best_epoch);
    let _ = writeln!(s, "tensors_checked={}", rep.diff.checked);
    let _ = writeln!(s, "changed_frozen={}", rep.diff.changed_frozen.len());
    let _ = writeln!(s, "changed_trainable={}", rep.diff.changed_trainable.join(","));
    let _ = writeln!(s, "last_changed_frozen={}", rep.last_diff.changed_frozen.len());
    let _ = writeln!(s, "last_changed_trainable={}", rep.last_diff.changed_trainable.join(","));
    s
}
