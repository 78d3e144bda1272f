use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hexrisk::diffcore::{AdamW, DropoutKey, Graph, ParamStore, Tensor};
use hexrisk::harness::{evaluate, finetune, frozen_diff, generate_synth, train, HarnessConfig, Prepared, SynthData, Variant};
use hexrisk::headcalib::{head_graph, init_head, mc_dropout_predict_batch, HeadConfig};

fn tiny() -> HarnessConfig {
    HarnessConfig {
        seed: 5,
        epochs: 1,
        steps_per_epoch: 4,
        windows_per_step: 2,
        d: 4,
        t_tokens: 1,
        p_tokens: 4,
        tile_px: 4,
        n_layers: 1,
        n_heads: 1,
        dh: 4,
        fusion_layers: 1,
        globals: 1,
        sparse_blocks: 1,
        head_hidden: 4,
        val_stride: 4,
        synth_cols: 5,
        synth_rows: 4,
        synth_hours: 240,
        ..HarnessConfig::default()
    }
}

fn prepared(cfg: &HarnessConfig) -> (SynthData, Prepared) {
    let synth = generate_synth(&cfg.synth()).unwrap();
    let prep = Prepared::new(&synth.dataset(cfg.knn_k).unwrap(), &synth.tiles, cfg).unwrap();
    (synth, prep)
}

#[test]
fn one_epoch_on_twenty_cells_gives_finite_val_f1() {
    let cfg = tiny();
    let (_, prep) = prepared(&cfg);
    assert_eq!(prep.n(), 20);
    let out = train(&prep, Variant::PlusAdaptiveGating, &cfg).unwrap();
    assert!(out.history.epochs.iter().all(|e| e.val_f1.is_finite()));
    assert!(out.history.step_losses.iter().all(|l| l.is_finite()));
    assert!(!out.grid.is_empty());
}

#[test]
fn same_seed_reproduces_the_loss_trajectory_bitwise() {
    let cfg = tiny();
    let (_, prep) = prepared(&cfg);
    for v in [Variant::Baseline, Variant::PlusAdaptiveGating] {
        let a = train(&prep, v, &cfg).unwrap();
        let b = train(&prep, v, &cfg).unwrap();
        let bits = |h: &[f64]| h.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history.step_losses), bits(&b.history.step_losses), "{v}");
        assert!(frozen_diff(&a.model, &b.model).changed_frozen.is_empty());
        assert!(frozen_diff(&a.model, &b.model).changed_trainable.is_empty());
    }
}

#[test]
fn zero_finetune_epochs_equals_direct_evaluation() {
    let cfg = tiny();
    let (_, prep) = prepared(&cfg);
    let model = train(&prep, Variant::PlusAdaptiveGating, &cfg).unwrap().model;
    let direct = evaluate(&model, &prep, prep.split.test(), 1).unwrap().report;
    let (tuned, rep) = finetune(&model, &prep, 0).unwrap();
    assert_eq!(rep.finetuned, direct);
    assert_eq!(rep.zero_shot, direct);
    assert!(rep.diff.changed_frozen.is_empty() && rep.diff.changed_trainable.is_empty());
    assert_eq!(rep.last_diff, rep.diff);
    assert!(frozen_diff(&model, &tuned).changed_trainable.is_empty());
}

#[test]
fn finetune_touches_only_gat_and_head() {
    let mut cfg = tiny();
    cfg.synth_regions = 2;
    let (_, prep) = prepared(&cfg);
    let source = prep_subset(&cfg, "r0");
    let target = prep_subset(&cfg, "r1");
    drop(prep);
    let model = train(&source, Variant::PlusAdaptiveGating, &cfg).unwrap().model;
    let (_, rep) = finetune(&model, &target, 2).unwrap();
    assert!(rep.diff.changed_frozen.is_empty());
    assert_eq!(rep.diff.checked, model.store.names().count());
    assert!(rep.diff.changed_trainable.iter().all(|n| n.starts_with("gat.") || n.starts_with("head.")));
    assert!(rep.last_diff.changed_frozen.is_empty());
    assert!(!rep.last_diff.changed_trainable.is_empty());
    assert!(rep.last_diff.changed_trainable.iter().all(|n| n.starts_with("gat.") || n.starts_with("head.")));
}

fn prep_subset(cfg: &HarnessConfig, region: &str) -> Prepared {
    let synth = generate_synth(&cfg.synth()).unwrap();
    let ds = synth.dataset(cfg.knn_k).unwrap().subset(&[region.to_string()], 0.7).unwrap();
    Prepared::new(&ds, &synth.tiles, cfg).unwrap()
}

/// Head fitted by plain BCE to labels drawn from a known `q`; the MC interval
/// should contain `q` for most points. Needs enough samples for a close fit:
/// at n = 400 coverage drops to about 0.73.
#[test]
fn mc_interval_covers_the_true_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d, n) = (3, 2000);
    let beta = [1.2, -0.8, 0.5];
    let z: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let q: Vec<f64> = (0..n)
        .map(|i| 1.0 / (1.0 + (-(0..d).map(|j| beta[j] * z[i * d + j]).sum::<f64>()).exp()))
        .collect();
    let y: Vec<f64> = q.iter().map(|&p| f64::from(rng.random::<f64>() < p)).collect();
    let x = Tensor::from_f64(&[n, d], &z).unwrap();
    let cfg = HeadConfig { hidden: 16, dropout: 0.2 };
    let mut store = ParamStore::new();
    init_head(&mut store, &mut rng, d, &cfg);
    let mut opt = AdamW::new(1e-2, 1e-2, 1e-2, 0.0);
    for step in 0..800 {
        let mut g = Graph::new().with_dropout(DropoutKey { seed: 1, call: step });
        let xv = g.constant(x.clone());
        let p = head_graph(&mut g, &store, &cfg, xv).unwrap();
        let loss = g.weighted_bce(p, &y, 1.0, 1.0).unwrap();
        store.zero_grad();
        g.backward(loss).unwrap().accumulate_into(&g, &mut store);
        opt.step(&mut store);
    }
    let coverage = |cfg: &HeadConfig| {
        let preds = mc_dropout_predict_batch(&x, &store, cfg, 10, 3).unwrap();
        let covered = preds.iter().zip(&q).filter(|(p, &q)| p.ci_low <= q && q <= p.ci_high).count();
        (covered as f64 / n as f64, preds.iter().all(|p| p.sigma == 0.0))
    };
    let (frac, _) = coverage(&cfg);
    let (point, zero_width) = coverage(&HeadConfig { dropout: 0.0, ..cfg });
    assert!(zero_width);
    assert!(frac > 0.8 && frac > point, "coverage {frac} vs point {point}");
}
