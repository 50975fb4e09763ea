//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `--nocapture` to see them all). Criteria 8 and 9 run
//! real multi-seed toy pretrainings and take several minutes each on CPU.

use detco_core::augment::{jigsaw_views, AugmentConfig};
use detco_core::config::ExperimentConfig;
use detco_core::contrast::{
    detco_loss, info_nce, info_nce_with_grad, LossWeights, Temperatures,
};
use detco_core::data::{generate_toy, ToySpec};
use detco_core::error::DetcoError;
use detco_core::eval::{extract_features, linear_probe};
use detco_core::image_ops::SourceImage;
use detco_core::memory::{FeatureQueue, QueueBank};
use detco_core::model::{momentum_update, DetcoModel, EmbeddingSet, ParameterSet};
use detco_core::rng::stream;
use detco_core::trainer::{run, TrainState};
use detco_core::viz::attention_map;
use ndarray::{arr2, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, d));
    for mut row in m.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-3 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    m
}

/// Independent explicit-softmax cross-entropy oracle (textbook form, no
/// max shift, separate code path from the implementation).
fn oracle_info_nce(q: &Array2<f64>, k: &Array2<f64>, negs: &Array2<f64>, tau: f64) -> f64 {
    let b = q.dim().0;
    let mut total = 0.0;
    for bi in 0..b {
        let pos = (q.row(bi).dot(&k.row(bi)) / tau).exp();
        let mut denom = pos;
        for n in negs.rows() {
            denom += (q.row(bi).dot(&n) / tau).exp();
        }
        total += -(pos / denom).ln();
    }
    total / b as f64
}

#[test]
fn criterion_1_info_nce_oracle() {
    let start = Instant::now();
    let mut rng = stream(100, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let b = rng.gen_range(1..=8);
        let k = rng.gen_range(0..=64);
        let d = rng.gen_range(2..=32);
        let tau = rng.gen_range(0.05..2.0);
        let q = unit_rows(&mut rng, b, d);
        let kp = unit_rows(&mut rng, b, d);
        let negs = unit_rows(&mut rng, k, d);
        let got = info_nce(q.view(), kp.view(), negs.view(), tau).unwrap();
        let want = oracle_info_nce(&q, &kp, &negs, tau);
        worst = worst.max((got - want).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "1 info-nce-oracle",
        worst < 1e-6 && elapsed < 10.0,
        &format!("1000 instances, worst |diff| {worst:.2e}, {elapsed:.2}s"),
    );
}

#[test]
fn criterion_2_gradient_check() {
    let start = Instant::now();
    let mut rng = stream(101, 0);
    let eps = 1e-4;
    let mut worst_rel = 0.0f64;
    let mut instances = 0;
    while instances < 100 {
        let b = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=32);
        let d = rng.gen_range(2..=16);
        let tau = rng.gen_range(0.1..1.0);
        let q = unit_rows(&mut rng, b, d);
        let kp = unit_rows(&mut rng, b, d);
        let negs = unit_rows(&mut rng, k, d);
        let (_, grad) = info_nce_with_grad(q.view(), kp.view(), negs.view(), tau).unwrap();
        // probe a handful of coordinates per instance
        for _ in 0..4 {
            let bi = rng.gen_range(0..b);
            let di = rng.gen_range(0..d);
            let mut qp = q.clone();
            qp[[bi, di]] += eps;
            let mut qm = q.clone();
            qm[[bi, di]] -= eps;
            let fp = info_nce(qp.view(), kp.view(), negs.view(), tau).unwrap();
            let fm = info_nce(qm.view(), kp.view(), negs.view(), tau).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            let g = grad[[bi, di]];
            let rel = (fd - g).abs() / g.abs().max(1e-6);
            worst_rel = worst_rel.max(rel);
        }
        instances += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "2 gradient-check",
        worst_rel < 1e-3 && elapsed < 30.0,
        &format!("{instances} instances, worst rel err {worst_rel:.2e}, {elapsed:.2}s"),
    );
}

fn fast_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.augment.global_side = 32;
    cfg.model.stage_channels = [2, 3, 4, 5];
    cfg.model.embed_dim = 8;
    cfg.memory.queue_capacity = 32;
    cfg.trainer.batch_size = 2;
    cfg.trainer.seed = seed;
    cfg
}

#[test]
fn criterion_3_total_recombination() {
    // (a) every step of a 100-step run recombines to 1e-6
    let mut cfg = fast_config(3);
    cfg.trainer.total_steps = 100;
    cfg.trainer.checkpoint_every = 1000;
    let ds = generate_toy(&ToySpec {
        num_classes: 2,
        samples_per_class: 4,
        image_side: 64,
        seed: 3,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::init(&cfg).unwrap();
    let summary = run(&cfg, &ds, dir.path(), &mut state).unwrap();
    let text = std::fs::read_to_string(&summary.metrics_path).unwrap();
    let mut worst = 0.0f64;
    let mut steps = 0;
    for line in text.lines() {
        let rec: detco_core::trainer::MetricsRecord = serde_json::from_str(line).unwrap();
        let recombined: f64 = (0..4)
            .map(|i| cfg.contrast.loss_weights.0[i] * (rec.l_gg[i] + rec.l_ll[i] + rec.l_gl[i]))
            .sum();
        worst = worst.max((recombined - rec.total).abs());
        steps += 1;
    }

    // (b) uniform-logit construction: every sub-loss ln(4), total 2.2*3*ln4.
    // (The criterion's printed decimal 9.1589 contradicts its own formula
    // 2.2*3*ln(4) = 9.14954...; the formula is asserted.)
    let e1 = arr2(&[[1.0, 0.0]]);
    let e2 = arr2(&[[0.0, 1.0]]);
    let embeds_q = EmbeddingSet {
        global: [e1.clone(), e1.clone(), e1.clone(), e1.clone()],
        local: [e1.clone(), e1.clone(), e1.clone(), e1.clone()],
    };
    let embeds_k = EmbeddingSet {
        global: [e2.clone(), e2.clone(), e2.clone(), e2.clone()],
        local: [e2.clone(), e2.clone(), e2.clone(), e2.clone()],
    };
    let mut bank = QueueBank::empty(8, 2).unwrap();
    for i in 0..4 {
        for _ in 0..3 {
            bank.global[i].enqueue(e2.view()).unwrap();
            bank.local[i].enqueue(e2.view()).unwrap();
        }
    }
    let report = detco_loss(
        &embeds_q,
        &embeds_k,
        &bank,
        &Temperatures::default(),
        &LossWeights::default(),
    )
    .unwrap();
    let expect = 2.2 * 3.0 * 4.0f64.ln();
    let forced_diff = (report.total - expect).abs();

    verdict(
        "3 eq1-recombination",
        steps == 100 && worst < 1e-6 && forced_diff < 1e-4,
        &format!(
            "{steps} steps, worst recombination diff {worst:.2e}, forced-ln4 total {:.5} vs {expect:.5}",
            report.total
        ),
    );
}

#[test]
fn criterion_4_ema_closed_form() {
    let n = 50;
    let mut worst = 0.0f64;
    for m in [0.9, 0.99, 0.999] {
        let mut key = ParameterSet::new();
        key.insert("a", ArrayD::from_elem(IxDyn(&[8]), 1.25));
        key.insert("b", ArrayD::from_elem(IxDyn(&[3, 2]), -0.5));
        let mut query = ParameterSet::new();
        query.insert("a", ArrayD::from_elem(IxDyn(&[8]), -2.0));
        query.insert("b", ArrayD::from_elem(IxDyn(&[3, 2]), 0.75));
        let mut cur = key.clone();
        for _ in 0..n {
            cur = momentum_update(&cur, &query, m).unwrap();
        }
        let mn = m.powi(n);
        for (name, init, q) in [("a", 1.25, -2.0), ("b", -0.5, 0.75)] {
            let expect = mn * init + (1.0 - mn) * q;
            for v in cur.get(name).unwrap().iter() {
                worst = worst.max((v - expect).abs());
            }
        }
    }
    verdict(
        "4 ema-closed-form",
        worst < 1e-6,
        &format!("N=50, m in {{0.9, 0.99, 0.999}}, worst |diff| {worst:.2e}"),
    );
}

#[test]
fn criterion_5_queue_semantics() {
    // (a) randomized schedules vs the last-K list oracle, exact equality
    let mut rng = stream(105, 0);
    let k = 16;
    let d = 5;
    let mut q = FeatureQueue::new(k, d).unwrap();
    let mut oracle: Vec<Vec<f64>> = Vec::new();
    let mut ops = 0;
    let mut exact = true;
    while ops < 1000 {
        let b = rng.gen_range(1..=k);
        let batch = unit_rows(&mut rng, b, d);
        q.enqueue(batch.view()).unwrap();
        for row in batch.rows() {
            oracle.push(row.to_vec());
        }
        let start = oracle.len().saturating_sub(k);
        let mut expect: Vec<Vec<f64>> = oracle[start..].to_vec();
        let negs = q.negatives().unwrap();
        let mut got: Vec<Vec<f64>> = negs.rows().into_iter().map(|r| r.to_vec()).collect();
        let key = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        expect.sort_by_key(key);
        got.sort_by_key(key);
        exact &= expect == got;
        ops += 1;
    }

    // (b) loss invariant to 1e-9 under permutation of negative rows
    let qq = unit_rows(&mut rng, 6, 24);
    let kk = unit_rows(&mut rng, 6, 24);
    let negs = unit_rows(&mut rng, 64, 24);
    let base = info_nce(qq.view(), kk.view(), negs.view(), 0.2).unwrap();
    let mut worst_perm = 0.0f64;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..64).collect();
        for i in (1..64).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let shuffled = negs.select(Axis(0), &perm);
        let other = info_nce(qq.view(), kk.view(), shuffled.view(), 0.2).unwrap();
        worst_perm = worst_perm.max((base - other).abs());
    }
    verdict(
        "5 queue-semantics",
        exact && worst_perm < 1e-9,
        &format!("1000 ops exact={exact}, worst permutation diff {worst_perm:.2e}"),
    );
}

#[test]
fn criterion_6_jigsaw_geometry() {
    let cfg = AugmentConfig::desk();
    let mut rng = stream(106, 0);
    let px = Array3::from_shape_fn((96, 96, 3), |_| rng.gen_range(0.0..1.0));
    let img = SourceImage::new(px).unwrap();

    let draws = 10_000u64;
    let results: Vec<Result<[usize; 9], String>> = (0..draws)
        .into_par_iter()
        .map(|seed| {
            let ps = jigsaw_views(&img, seed, &cfg);
            if ps.patches.len() != 9 {
                return Err(format!("seed {seed}: {} patches", ps.patches.len()));
            }
            for p in &ps.patches {
                if p.dim() != (cfg.patch_side, cfg.patch_side, 3) {
                    return Err(format!("seed {seed}: patch shape {:?}", p.dim()));
                }
            }
            let mut sorted = ps.permutation.clone();
            sorted.sort_unstable();
            if sorted != (0..9).collect::<Vec<_>>() {
                return Err(format!("seed {seed}: invalid permutation"));
            }
            for (j, rect) in ps.crops.iter().enumerate() {
                if !ps.cells[ps.permutation[j]].contains(rect) {
                    return Err(format!("seed {seed}: crop {j} escapes its cell"));
                }
            }
            let mut row = [0usize; 9];
            for (pos, &cell) in ps.permutation.iter().enumerate() {
                row[pos] = cell;
            }
            Ok(row)
        })
        .collect();

    let mut counts = [[0u64; 9]; 9];
    let mut first_err = None;
    for r in results {
        match r {
            Ok(perm) => {
                for (pos, &cell) in perm.iter().enumerate() {
                    counts[pos][cell] += 1;
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let mut worst_freq_dev = 0.0f64;
    for pos in 0..9 {
        for cell in 0..9 {
            let freq = counts[pos][cell] as f64 / draws as f64;
            worst_freq_dev = worst_freq_dev.max((freq - 1.0 / 9.0).abs());
        }
    }
    let pass = first_err.is_none() && worst_freq_dev <= 0.02;
    verdict(
        "6 jigsaw-geometry",
        pass,
        &format!(
            "10000 draws, geometry errors: {}, worst |freq - 1/9| {worst_freq_dev:.4}",
            first_err.unwrap_or_else(|| "none".into())
        ),
    );
}

#[test]
fn criterion_7_ablation_containment() {
    let ds = generate_toy(&ToySpec {
        num_classes: 2,
        samples_per_class: 8,
        image_side: 64,
        seed: 7,
    })
    .unwrap();

    // GLC off for 50 steps: local heads bit-identical
    let mut cfg = fast_config(7);
    cfg.trainer.total_steps = 50;
    cfg.trainer.checkpoint_every = 200;
    cfg.trainer.glc_enabled = false;
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::init(&cfg).unwrap();
    let before = state.model_q.export_params();
    run(&cfg, &ds, dir.path(), &mut state).unwrap();
    let after = state.model_q.export_params();
    let mut glc_ok = true;
    let mut glc_trained = false;
    for (name, a) in before.iter() {
        let b = after.get(name).unwrap();
        if name.starts_with("head.local") {
            glc_ok &= a == b;
        } else if name.starts_with("head.global5") {
            glc_trained |= a != b;
        }
    }

    // MLS off for 50 steps: stage 2..4 global heads bit-identical
    let mut cfg = fast_config(17);
    cfg.trainer.total_steps = 50;
    cfg.trainer.checkpoint_every = 200;
    cfg.trainer.mls_enabled = false;
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::init(&cfg).unwrap();
    let before = state.model_q.export_params();
    run(&cfg, &ds, dir.path(), &mut state).unwrap();
    let after = state.model_q.export_params();
    let mut mls_ok = true;
    let mut mls_trained = false;
    for (name, a) in before.iter() {
        let b = after.get(name).unwrap();
        if name.starts_with("head.global2")
            || name.starts_with("head.global3")
            || name.starts_with("head.global4")
        {
            mls_ok &= a == b;
        } else if name.starts_with("head.global5") || name.starts_with("head.local5") {
            mls_trained |= a != b;
        }
    }

    verdict(
        "7 ablation-containment",
        glc_ok && glc_trained && mls_ok && mls_trained,
        &format!(
            "glc-off local heads frozen: {glc_ok} (deep head trained: {glc_trained}); \
             mls-off shallow global heads frozen: {mls_ok} (deep heads trained: {mls_trained})"
        ),
    );
}

/// Shared machinery for the run-based criteria: desk-default config with
/// given flags and seed, trained on the default toy dataset.
fn desk_run(
    seed: u64,
    mls: bool,
    glc: bool,
    ds: &detco_core::data::LabeledDataset,
) -> (TrainState, f64, f64) {
    let mut cfg = ExperimentConfig::default();
    cfg.trainer.seed = seed;
    cfg.trainer.mls_enabled = mls;
    cfg.trainer.glc_enabled = glc;
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::init(&cfg).unwrap();
    let summary = run(&cfg, ds, dir.path(), &mut state).unwrap();
    // mean total loss over the first and last 10 steps
    let text = std::fs::read_to_string(&summary.metrics_path).unwrap();
    let totals: Vec<f64> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<detco_core::trainer::MetricsRecord>(l)
                .unwrap()
                .total
        })
        .collect();
    let head: f64 = totals[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
    (state, head, tail)
}

fn probe_stage(state: &TrainState, ds: &detco_core::data::LabeledDataset, stage: usize) -> f64 {
    let cfg = ExperimentConfig::default();
    let (features, labels) =
        extract_features(&state.model_q, ds, stage, cfg.augment.global_side).unwrap();
    linear_probe(&features, &labels, &cfg.eval).unwrap()
}

#[test]
fn criterion_8_toy_learning_signal() {
    let ds = generate_toy(&ToySpec::default()).unwrap();
    let mut drop_votes = 0;
    let mut probe_votes = 0;
    let mut details = Vec::new();
    for seed in [0u64, 1, 2] {
        let start = Instant::now();
        let (state, head, tail) = desk_run(seed, true, true, &ds);
        let elapsed = start.elapsed().as_secs_f64();
        let dropped = tail <= 0.7 * head;
        drop_votes += dropped as u32;

        let trained_acc = probe_stage(&state, &ds, 5);
        let init_cfg = {
            let mut c = ExperimentConfig::default();
            c.trainer.seed = seed;
            c
        };
        let init_state = TrainState::init(&init_cfg).unwrap();
        let init_acc = probe_stage(&init_state, &ds, 5);
        let gained = trained_acc >= init_acc + 0.10;
        probe_votes += gained as u32;
        details.push(format!(
            "seed {seed}: loss {head:.2}->{tail:.2} (drop {:.0}%, {elapsed:.0}s), probe {init_acc:.3}->{trained_acc:.3}",
            100.0 * (1.0 - tail / head)
        ));
    }
    let pass = drop_votes >= 2 && probe_votes >= 2;
    verdict(
        "8 toy-learning-signal",
        pass,
        &format!(
            "loss-drop votes {drop_votes}/3, probe-gain votes {probe_votes}/3; {}",
            details.join("; ")
        ),
    );
}

#[test]
fn criterion_9_shallow_stage_direction() {
    let ds = generate_toy(&ToySpec::default()).unwrap();
    let mut votes = 0;
    let mut details = Vec::new();
    for seed in [0u64, 1, 2] {
        let (mls_state, _, _) = desk_run(seed, true, false, &ds);
        let (base_state, _, _) = desk_run(seed, false, false, &ds);
        let mls_s2 = probe_stage(&mls_state, &ds, 2);
        let mls_s3 = probe_stage(&mls_state, &ds, 3);
        let base_s2 = probe_stage(&base_state, &ds, 2);
        let base_s3 = probe_stage(&base_state, &ds, 3);
        let ok = mls_s2 >= base_s2 && mls_s3 >= base_s3;
        votes += ok as u32;
        details.push(format!(
            "seed {seed}: s2 {base_s2:.3}->{mls_s2:.3}, s3 {base_s3:.3}->{mls_s3:.3}"
        ));
    }
    verdict(
        "9 table9-direction",
        votes >= 2,
        &format!("votes {votes}/3; {}", details.join("; ")),
    );
}

#[test]
fn criterion_10_attention_map() {
    let mut rng = stream(110, 0);
    // shape contract from the visualization procedure
    let f5 = Array3::from_shape_fn((2048, 14, 14), |_| rng.gen_range(-1.0..1.0));
    let amap = attention_map(&f5).unwrap();
    let shape_ok = amap.values.dim() == (14, 14);

    // extrema and channel-permutation invariance over 100 random maps
    let mut extrema_ok = true;
    let mut worst_perm = 0.0f64;
    for _ in 0..100 {
        let c = rng.gen_range(2..=32);
        let h = rng.gen_range(2..=10);
        let w = rng.gen_range(2..=10);
        let f = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-2.0..2.0));
        let a = attention_map(&f).unwrap();
        let lo = a.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = a.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        extrema_ok &= lo == 0.0 && hi == 1.0;
        extrema_ok &= a.values.iter().all(|v| (0.0..=1.0).contains(v));

        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut shuffled = Array3::zeros((c, h, w));
        for (dst, &src) in perm.iter().enumerate() {
            shuffled
                .index_axis_mut(Axis(0), dst)
                .assign(&f.index_axis(Axis(0), src));
        }
        let b = attention_map(&shuffled).unwrap();
        let diff = (&a.values - &b.values)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        worst_perm = worst_perm.max(diff);
    }
    verdict(
        "10 attention-map",
        shape_ok && extrema_ok && worst_perm < 1e-9,
        &format!(
            "2048x14x14 -> 14x14: {shape_ok}, extrema exact: {extrema_ok}, worst permutation diff {worst_perm:.2e}"
        ),
    );
}

/// Non-criterion guard: the error classes named by the contracts stay
/// distinguishable end to end.
#[test]
fn error_classes_are_preserved() {
    let q = FeatureQueue::new(4, 2).unwrap();
    assert!(matches!(q.negatives(), Err(DetcoError::State(_))));
    let bad = arr2(&[[3.0, 0.0]]);
    let kp = arr2(&[[1.0, 0.0]]);
    let negs = Array2::<f64>::zeros((0, 2));
    assert!(matches!(
        info_nce(bad.view(), kp.view(), negs.view(), 1.0),
        Err(DetcoError::Validation(_))
    ));
    let mut model_cfg = detco_core::model::EncoderConfig::toy_desk();
    model_cfg.embed_dim = 1;
    assert!(matches!(
        DetcoModel::new(&model_cfg, 0),
        Err(DetcoError::Config(_))
    ));
}
