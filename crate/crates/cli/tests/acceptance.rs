//! Acceptance suite. Every criterion runs in sequence, prints one PASS/FAIL
//! line on stderr (uncaptured) and the test fails if any criterion fails.
//!
//! Criteria 5 to 7 train dozens of networks; run with `--release` or the
//! workspace test profile (optimised) to stay within their time limits.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use jrl_core::attention::{attend, AttentionParams, EncoderOutputs};
use jrl_core::cell::{decoder_step, encoder_step, CellState, LstmCell};
use jrl_core::context::max_fuse;
use jrl_core::data::{
    build_orders, generate_synthetic, labels_to_sequence, sequence_to_labels, OrderSpec, SynthSpec,
    SyntheticData,
};
use jrl_core::eval::{evaluate_models, instance_metrics, map_cls, vote, MetricsReport};
use jrl_core::experiments::{run_ensemble, Preset};
use jrl_core::gradcheck::{gradcheck, GradcheckConfig};
use jrl_core::model::{Checkpoint, ExemplarCache, JrlModel, ModelConfig};
use jrl_core::numerics::softmax;
use jrl_core::train::{train_member, EnsembleSpec, TrainConfig};
use jrl_core::{Dataset, SeededRng, Vector};

type Outcome = Result<String, String>;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// One point on the 0-100 scale the metrics are reported in.
const POINT: f64 = 0.01;

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn run(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if elapsed <= limit => (true, d),
        Ok(d) => (false, format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
        Err(e) => (false, e),
    };
    let tag = if ok { "PASS" } else { "FAIL" };
    report(&format!("{tag} [{id}] {name} ({elapsed:.1?}): {detail}"));
    ok
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn acceptance_data(n_global: Option<usize>) -> SyntheticData<f64> {
    let mut spec = Preset::acceptance().synth;
    if let Some(g) = n_global {
        spec.n_global = g;
    }
    generate_synthetic(&spec, &mut SeededRng::new(1)).unwrap()
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..Preset::acceptance().train
    }
}

/// Test-split metrics of one rare-first member trained with `seed`.
fn single_member(data: &SyntheticData<f64>, model: &ModelConfig, seed: u64) -> MetricsReport {
    let order = &build_orders(&data.vocab, 4, seed)[0];
    let run = train_member(&data.train, order, &train_cfg(seed), model).unwrap();
    let (report, _) = evaluate_models(&[run.checkpoint.model], vec!["member".into()], &data.train, &data.test).unwrap();
    report.ensemble
}

fn gradient_oracle() -> Outcome {
    let cfg = GradcheckConfig::default();
    let rep = gradcheck(&cfg).map_err(|e| e.to_string())?;
    let worst = rep.max_rel_error;
    check(rep.passed(), || format!("max relative error {worst:.3e} > {:e}", GradcheckConfig::TOLERANCE))?;
    Ok(format!("{} parameters, max relative error {worst:.2e}", rep.checked))
}

fn unit_oracles() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = 1 + rng.below(6);
        let dx = 1 + rng.below(5);
        let e = 1 + rng.below(4);
        let m = 1 + rng.below(5);
        let width = 1 + rng.below(5);
        let prev = CellState {
            h: rng.uniform_vector(d, 1.0),
            c: rng.uniform_vector(d, 2.0),
        };

        let enc = common::random_cell(&mut rng, LstmCell::encoder_zeros(d, dx));
        let x = rng.uniform_vector(dx, 3.0);
        let (s, _) = encoder_step(&enc, &prev, &x).unwrap();
        let (h, c) = common::lstm_step(&enc, &prev.h, &prev.c, &[&x]);
        worst = worst.max(common::max_abs_diff(&s.h, &h)).max(common::max_abs_diff(&s.c, &c));

        let dec = common::random_cell(&mut rng, LstmCell::decoder_zeros(d, e));
        let z = rng.uniform_vector(d, 1.0);
        let y = rng.uniform_vector(e, 1.0);
        let (s, _) = decoder_step(&dec, &prev, &z, &y).unwrap();
        let (h, c) = common::lstm_step(&dec, &prev.h, &prev.c, &[&z, &y]);
        worst = worst.max(common::max_abs_diff(&s.h, &h)).max(common::max_abs_diff(&s.c, &c));

        let mut att = AttentionParams::zeros(d, width).init_random(&mut rng);
        att.b_a = rng.uniform_vector(width, 0.5);
        let states: Vec<Vector<f64>> = (0..m).map(|_| rng.uniform_vector(d, 1.0)).collect();
        let plain: Vec<Vec<f64>> = states.iter().map(|s| s.to_vec()).collect();
        let (zt, w, _) = attend(&att, &prev.h, &EncoderOutputs { states }).unwrap();
        let (zt_ref, w_ref) = common::attend(&att, &prev.h, &plain);
        worst = worst.max(common::max_abs_diff(&zt, &zt_ref)).max(common::max_abs_diff(&w, &w_ref));
    }
    check(worst <= 1e-12, || format!("max deviation {worst:.3e} > 1e-12"))?;
    Ok(format!("300 cell/attention instances, max deviation {worst:.1e}"))
}

fn overfit() -> Outcome {
    let preset = Preset::acceptance();
    let spec = SynthSpec {
        n_train: 20,
        n_test: 0,
        ..preset.synth.clone()
    };
    let data = generate_synthetic::<f64>(&spec, &mut SeededRng::new(1)).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 4,
        seed: 1,
        ..preset.train.clone()
    };
    let order = &build_orders(&data.vocab, 4, 1)[0];
    let run = train_member(&data.train, order, &cfg, &preset.model).unwrap();
    let model = &run.checkpoint.model;

    let cache = ExemplarCache::build(model, &data.train).unwrap();
    let k = model.config.effective_k();
    let neighbours = cache.train_neighbours(&data.train, k).unwrap();
    let preds: Vec<Vec<u8>> = data
        .train
        .samples
        .iter()
        .zip(&neighbours)
        .map(|(s, nb)| {
            let out = model.predict(&s.regions, &cache.contexts(nb)).unwrap();
            sequence_to_labels(&out.sequence, spec.n_attr).unwrap()
        })
        .collect();
    let (_, _, f1) = instance_metrics(&preds, &data.train.labels()).unwrap();
    let detail = format!("training loss {:.4} nats/step, training F1 {f1:.4}", run.final_loss);
    check(run.final_loss < 0.05 && f1 >= 0.99, || detail.clone())?;
    Ok(detail)
}

fn metric_fixtures() -> Outcome {
    let gts = vec![vec![1], vec![1], vec![1], vec![0], vec![0]];
    let preds = vec![vec![1], vec![1], vec![0], vec![1], vec![0]];
    let (ap, _) = map_cls(&preds, &gts).map_err(|e| e.to_string())?;
    check((ap - 7.0 / 12.0).abs() <= 1e-12, || format!("AP {ap} != 7/12"))?;

    let gts = vec![vec![1, 1, 0], vec![0, 0, 1]];
    let preds = vec![vec![1, 0, 0], vec![0, 1, 1]];
    let (p, r, f) = instance_metrics(&preds, &gts).map_err(|e| e.to_string())?;
    for (name, v) in [("mPrc", p), ("mRcl", r), ("F1", f)] {
        check((v - 0.75).abs() <= 1e-12, || format!("{name} {v} != 0.75"))?;
    }
    Ok("AP = 7/12, mPrc = mRcl = F1 = 0.75".into())
}

fn ensemble_direction() -> Outcome {
    let preset = Preset::acceptance();
    let data = acceptance_data(None);
    let mut lines = Vec::new();
    let mut ok_all = true;
    let mut margin_hits = 0;
    for seed in SEEDS {
        let spec = EnsembleSpec::standard(&data.vocab, seed);
        let out = run_ensemble(&data.train, &data.test, &spec, &train_cfg(seed), &preset.model).unwrap();
        let (ens, avg) = (out.report.ensemble.f1_ins, out.report.member_average.f1_ins);
        ok_all &= ens >= avg;
        margin_hits += (ens >= avg + 0.5 * POINT) as usize;
        lines.push(format!("seed {seed}: {:.2} vs {:.2}", 100.0 * ens, 100.0 * avg));
    }
    let detail = format!("voted vs average F1: {}; +0.5 in {margin_hits}/5", lines.join(", "));
    check(ok_all && margin_hits >= 3, || detail.clone())?;
    Ok(detail)
}

fn attention_direction() -> Outcome {
    let data = acceptance_data(Some(0));
    let on = Preset::acceptance().model;
    let off = ModelConfig {
        attention: false,
        ..on.clone()
    };
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let a = single_member(&data, &on, seed).map_cls;
        let b = single_member(&data, &off, seed).map_cls;
        gaps.push(a - b);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let wins = gaps.iter().filter(|&&g| g > 0.0).count();
    let shown: Vec<String> = gaps.iter().map(|g| format!("{:+.2}", 100.0 * g)).collect();
    let detail = format!(
        "mAP on - off per seed [{}], mean {:+.2} points, on ahead in {wins}/5",
        shown.join(", "),
        100.0 * mean
    );
    check(mean >= -0.2 * POINT && wins >= 3, || detail.clone())?;
    Ok(detail)
}

fn context_direction() -> Outcome {
    let data = acceptance_data(None);
    let with = Preset::acceptance().model;
    let without = ModelConfig {
        context: false,
        ..with.clone()
    };
    let (mut f_with, mut f_without) = (0.0, 0.0);
    for seed in SEEDS {
        f_with += single_member(&data, &with, seed).f1_ins / SEEDS.len() as f64;
        f_without += single_member(&data, &without, seed).f1_ins / SEEDS.len() as f64;
    }
    let detail = format!(
        "mean F1 k={} {:.2} vs k=0 {:.2}",
        with.context_k,
        100.0 * f_with,
        100.0 * f_without
    );
    check(f_with >= f_without - 0.2 * POINT, || detail.clone())?;
    Ok(detail)
}

fn structural_invariants() -> Outcome {
    let mut rng = SeededRng::new(8);
    let mut checks = 0usize;

    for _ in 0..200 {
        let v: Vec<f64> = (0..1 + rng.below(12)).map(|_| rng.uniform(-500.0, 500.0)).collect();
        let p = softmax(&v);
        check((p.iter().sum::<f64>() - 1.0).abs() < 1e-12, || format!("softmax sum for {v:?}"))?;
        checks += 1;
    }

    for _ in 0..100 {
        let cell = LstmCell::encoder_zeros(4, 3).init_random(&mut rng);
        let mut s = CellState::zeros(4);
        for _ in 0..6 {
            s = encoder_step(&cell, &s, &rng.uniform_vector(3, 5.0)).unwrap().0;
            check(s.h.iter().all(|h: &f64| h.abs() < 1.0), || "hidden state left (-1, 1)".into())?;
        }
        checks += 1;
    }

    for _ in 0..100 {
        let z = rng.uniform_vector(5, 2.0);
        let ex: Vec<Vector<f64>> = (0..rng.below(4)).map(|_| rng.uniform_vector(5, 2.0)).collect();
        let refs: Vec<&[f64]> = ex.iter().map(|e| &e[..]).collect();
        let (fused, _) = max_fuse(&z, &refs).unwrap();
        let dominates = (0..5).all(|j| fused[j] >= z[j] && ex.iter().all(|e| fused[j] >= e[j]));
        check(dominates, || "fusion does not dominate".into())?;
        check(max_fuse(&z, &[]).unwrap().0 == z, || "fusion without exemplars changed z".into())?;
        check(max_fuse(&fused, &[&fused[..]]).unwrap().0 == fused, || "fusion not idempotent".into())?;
        checks += 1;
    }

    for case in 0..100u64 {
        let n_attr = 1 + rng.below(8);
        let mut cfg = ModelConfig::new(5, 3, 4, n_attr);
        cfg.embed_dim = 3;
        cfg.attention = case % 2 == 0;
        let mut model = JrlModel::new(cfg, &mut rng).unwrap();
        let scale = rng.uniform(0.0, 20.0);
        for w in model.params.head_w.as_mut_slice() {
            *w *= scale;
        }
        for b in model.params.head_b.iter_mut() {
            *b = rng.uniform(-3.0, 3.0);
        }
        let regions: Vec<Vector<f64>> = (0..3).map(|_| rng.uniform_vector(4, 2.0)).collect();
        let out = model.predict(&regions, &[]).unwrap();
        check(out.tokens.len() <= n_attr + 1 && out.tokens.last() == Some(&n_attr), || {
            format!("decode did not stop: {:?}", out.tokens)
        })?;
        let mut seen = vec![false; n_attr];
        for &a in out.sequence.attrs() {
            check(!std::mem::replace(&mut seen[a], true), || "duplicate attribute".into())?;
        }
        checks += 1;
    }

    for _ in 0..100 {
        let n = 1 + rng.below(7);
        let members: Vec<Vec<u8>> = (0..n).map(|_| (0..5).map(|_| rng.bernoulli(0.5) as u8).collect()).collect();
        let refs: Vec<&[u8]> = members.iter().map(|m| &m[..]).collect();
        let base = vote(&refs).unwrap();
        let mut shuffled = refs.clone();
        rng.shuffle(&mut shuffled);
        check(vote(&shuffled).unwrap() == base, || "vote depends on member order".into())?;
        let mut raised = members.clone();
        let (i, j) = (rng.below(n), rng.below(5));
        raised[i][j] = 1;
        let refs: Vec<&[u8]> = raised.iter().map(|m| &m[..]).collect();
        let after = vote(&refs).unwrap();
        check((0..5).all(|k| after[k] >= base[k]), || "vote not monotone".into())?;
        checks += 1;
    }

    for n_attr in 1..=10usize {
        let order = OrderSpec::random(n_attr, n_attr as u64);
        for bits in 0u32..(1 << n_attr) {
            let labels: Vec<u8> = (0..n_attr).map(|a| ((bits >> a) & 1) as u8).collect();
            let seq = labels_to_sequence(&labels, &order).unwrap();
            check(sequence_to_labels(&seq, n_attr).unwrap() == labels, || {
                format!("round trip failed for {labels:?}")
            })?;
        }
        checks += 1;
    }

    let model = JrlModel::<f64>::new(ModelConfig::new(6, 3, 4, 5), &mut rng).unwrap();
    let ckpt = Checkpoint::new(model, Some(OrderSpec::random(5, 3)));
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    check(back.to_bytes().unwrap() == bytes, || "checkpoint bytes differ".into())?;
    checks += 1;

    let spec = SynthSpec {
        n_train: 48,
        n_test: 0,
        ..SynthSpec::default()
    };
    let gen = |s| generate_synthetic::<f64>(&spec, &mut SeededRng::new(s)).unwrap().train;
    let data: Dataset = gen(4);
    check(data == gen(4), || "generator is not deterministic".into())?;
    let mut model_cfg = ModelConfig::new(8, spec.m, spec.region_dim, spec.n_attr);
    model_cfg.embed_dim = 4;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 9,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let order = OrderSpec::identity(spec.n_attr);
    let a = train_member(&data, &order, &cfg, &model_cfg).unwrap();
    let b = train_member(&data, &order, &cfg, &model_cfg).unwrap();
    check(a.checkpoint.to_bytes().unwrap() == b.checkpoint.to_bytes().unwrap(), || {
        "training is not deterministic".into()
    })?;
    checks += 2;

    Ok(format!("{checks} invariant groups hold"))
}

fn robustness_harness() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_jrl");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    let out = Command::new(bin)
        .args(["gen-data", "--seed", "2", "--n-train", "80", "--n-test", "40", "--out"])
        .arg(&data)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;

    let report = tmp.path().join("robustness.json");
    let out = Command::new(bin)
        .args(["ablate", "--protocol", "robustness", "--preset", "acceptance", "--ensemble-size", "2"])
        .args(["--d", "8", "--embed-dim", "4", "--epochs", "1", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&report)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;

    let stdout = String::from_utf8_lossy(&out.stdout);
    let table: Vec<&str> = stdout.lines().skip_while(|l| !l.contains("mAP_cls")).collect();
    check(table.len() == 5, || format!("expected header + 4 rows, got:\n{stdout}"))?;
    for name in ["mAP_cls", "mPrc_ins", "mRcl_ins", "F1_ins"] {
        check(table[0].contains(name), || format!("table header lacks {name}"))?;
    }

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let rows = json["rows"].as_array().ok_or("report has no rows")?;
    let fractions: Vec<f64> = rows.iter().filter_map(|r| r["fraction"].as_f64()).collect();
    check(fractions == [1.0, 0.75, 0.5, 0.25], || format!("fractions {fractions:?}"))?;
    let sizes: Vec<u64> = rows.iter().filter_map(|r| r["n_train"].as_u64()).collect();
    check(sizes.len() == 4 && sizes.windows(2).all(|w| w[0] > w[1]), || {
        format!("subset sizes {sizes:?} not strictly decreasing")
    })?;
    for r in rows {
        let m = r["metrics"].as_array().ok_or("row without metrics")?;
        check(
            m.len() == 4 && m.iter().all(|v| v.as_f64().is_some_and(|x| (0.0..=1.0).contains(&x))),
            || format!("bad metrics row {r}"),
        )?;
    }
    Ok(format!("4 rows, subset sizes {sizes:?}"))
}

#[test]
fn acceptance_criteria() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let results = [
        run(1, "gradient oracle", min(2), gradient_oracle),
        run(2, "cell and attention oracles", Duration::from_secs(10), unit_oracles),
        run(3, "overfit sanity", min(5), overfit),
        run(4, "metric fixtures", Duration::from_secs(1), metric_fixtures),
        run(5, "ensemble direction", min(30), ensemble_direction),
        run(6, "attention direction", min(30), attention_direction),
        run(7, "context direction", min(30), context_direction),
        run(8, "structural invariants", min(2), structural_invariants),
        run(9, "robustness protocol harness", min(30), robustness_harness),
    ];
    let failed: Vec<usize> = (1..=results.len()).filter(|&i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
