use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::args::*;
use jrl_core::data::{
    build_orders, generate_synthetic, AttributeVocab, DataDir, DatasetShape, OrderKind, OrderSpec, SynthSpec,
};
use jrl_core::eval::{evaluate_ensemble, evaluate_models, predict_dataset, vote};
use jrl_core::experiments::{ablate, robustness, Preset, ROBUSTNESS_FRACTIONS};
use jrl_core::gradcheck::{gradcheck, GradcheckConfig};
use jrl_core::model::{ExemplarCache, ModelConfig};
use jrl_core::train::{train_ensemble, train_member, write_loss_log, EnsembleSpec, Manifest, TrainConfig};
use jrl_core::{Checkpoint, Dataset, JrlError, Result, SeededRng};

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::TrainEnsemble(a) => train_ensemble_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn print_config(command: &str, value: serde_json::Value) {
    let text = serde_json::to_string_pretty(&json!({ "command": command, "config": value }))
        .expect("config serializes");
    println!("{text}");
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| JrlError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| JrlError::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| JrlError::io(p, e)),
        _ => Ok(()),
    }
}

fn base_preset(name: Option<&str>) -> Result<Preset> {
    match name {
        Some(n) => Preset::by_name(n),
        None => Ok(Preset::full()),
    }
}

fn gen_data(a: GenDataArgs) -> Result<u8> {
    let base = base_preset(a.preset.as_deref())?.synth;
    let region_dim = a.region_dim.unwrap_or(base.region_dim);
    let spec = SynthSpec {
        n_attr: a.n_attr.unwrap_or(base.n_attr),
        m: a.m.unwrap_or(base.m),
        region_dim,
        global_dim: region_dim,
        n_train: a.n_train.unwrap_or(base.n_train),
        n_test: a.n_test.unwrap_or(base.n_test),
        noise_sigma: a.noise.unwrap_or(base.noise_sigma),
        correlation_strength: a.correlation.unwrap_or(base.correlation_strength),
        n_global: a.n_global.unwrap_or(base.n_global),
        min_rate: a.min_rate.unwrap_or(base.min_rate),
        max_rate: a.max_rate.unwrap_or(base.max_rate),
    };
    print_config("gen-data", json!({ "seed": a.seed, "out": a.out, "synth": spec }));
    let data = generate_synthetic::<f64>(&spec, &mut SeededRng::new(a.seed))?;
    DataDir::new(&a.out).save(&data.train, &data.test, &data.vocab)?;
    println!(
        "wrote {} train / {} test samples over {} attributes to {}",
        data.train.len(),
        data.test.len(),
        data.vocab.len(),
        a.out.display()
    );
    Ok(0)
}

struct Loaded {
    train: Dataset,
    test: Dataset,
    vocab: AttributeVocab,
    shape: DatasetShape,
}

fn load_data(flags: &DataFlags) -> Result<Loaded> {
    let (train, test, vocab) = DataDir::new(&flags.data).load::<f64>(flags.vocab.as_deref())?;
    let shape = train.shape()?;
    Ok(Loaded {
        train,
        test,
        vocab,
        shape,
    })
}

fn resolve(model: &ModelFlags, train: &TrainFlags, shape: &DatasetShape) -> Result<(ModelConfig, TrainConfig)> {
    let base = base_preset(model.preset.as_deref())?;
    for (flag, given, actual) in [("--m", model.m, shape.m), ("--n-attr", model.n_attr, shape.n_attr)] {
        if let Some(g) = given {
            if g != actual {
                return Err(JrlError::InvalidConfig(format!("{flag} {g} but the data has {actual}")));
            }
        }
    }
    let d = model.d.unwrap_or(base.model.hidden_size);
    let same_d = d == base.model.hidden_size;
    let mut mc = ModelConfig::new(d, shape.m, shape.region_dim, shape.n_attr);
    mc.embed_dim = model
        .embed_dim
        .unwrap_or(if same_d { base.model.embed_dim } else { mc.embed_dim });
    mc.attention_dim = model
        .attention_dim
        .unwrap_or(if same_d { base.model.attention_dim } else { mc.attention_dim });
    mc.context_k = model.context_k.unwrap_or(base.model.context_k);
    mc.attention = !model.no_attention;
    mc.context = !model.no_context && mc.context_k > 0;
    mc.encoder = !model.no_encoder;
    mc.dropout = model.dropout.unwrap_or(base.model.dropout);
    mc.validate()?;

    let bt = base.train;
    let tc = TrainConfig {
        epochs: train.epochs.unwrap_or(bt.epochs),
        batch_size: train.batch.unwrap_or(bt.batch_size),
        seed: train.seed,
        learning_rate: train.lr.unwrap_or(bt.learning_rate),
        dropout: mc.dropout > 0.0,
        clip: train.clip.or(bt.clip),
        refresh_every: train.refresh_every.unwrap_or(bt.refresh_every),
        validation_fraction: train.validation_fraction.unwrap_or(bt.validation_fraction),
        patience: train.patience.or(bt.patience),
    };
    tc.validate()?;
    Ok((mc, tc))
}

fn pick_order(vocab: &AttributeVocab, choice: OrderChoice, seed: u64) -> Result<OrderSpec> {
    let kind = match choice {
        OrderChoice::RareFirst => OrderKind::RareFirst,
        OrderChoice::FrequentFirst => OrderKind::FrequentFirst,
        OrderChoice::TopDown => OrderKind::TopDown,
        OrderChoice::BottomUp => OrderKind::BottomUp,
        OrderChoice::GlobalLocal => OrderKind::GlobalLocal,
        OrderChoice::LocalGlobal => OrderKind::LocalGlobal,
        OrderChoice::Random => return Ok(OrderSpec::random(vocab.len(), seed)),
    };
    build_orders(vocab, 0, seed)
        .into_iter()
        .find(|o| o.kind == kind)
        .ok_or_else(|| JrlError::InvalidConfig(format!("order {kind} needs vocabulary metadata the sidecar lacks")))
}

fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.csv");
    checkpoint.with_file_name(name)
}

fn train(a: TrainArgs) -> Result<u8> {
    let d = load_data(&a.data)?;
    let (mc, tc) = resolve(&a.model, &a.train, &d.shape)?;
    let order = pick_order(&d.vocab, a.order, a.order_seed)?;
    print_config(
        "train",
        json!({ "data": a.data.data, "out": a.out, "order": order, "model": mc, "train": tc }),
    );
    let run = train_member(&d.train, &order, &tc, &mc)?;
    create_parent(&a.out)?;
    run.checkpoint.save(&a.out)?;
    let log_path = loss_log_path(&a.out);
    write_loss_log(&log_path, &run.loss_log)?;
    println!(
        "trained {} epochs under {}; final training loss {:.4}; checkpoint {}",
        run.loss_log.len(),
        order.kind,
        run.final_loss,
        a.out.display()
    );
    Ok(0)
}

fn train_ensemble_cmd(a: EnsembleArgs) -> Result<u8> {
    let d = load_data(&a.data)?;
    let (mc, tc) = resolve(&a.model, &a.train, &d.shape)?;
    let spec = EnsembleSpec::standard(&d.vocab, tc.seed);
    print_config(
        "train-ensemble",
        json!({ "data": a.data.data, "out": a.out, "members": spec.members, "model": mc, "train": tc }),
    );
    let manifest = train_ensemble(&d.train, &spec, &tc, &mc, &a.out)?;
    for (i, e) in manifest.members.iter().enumerate() {
        match (&e.final_loss, &e.error) {
            (Some(l), _) => println!("member {i:02} {:<16} loss {l:.4}", e.order.kind.to_string()),
            (None, err) => println!(
                "member {i:02} {:<16} FAILED: {}",
                e.order.kind.to_string(),
                err.as_deref().unwrap_or("unknown")
            ),
        }
    }
    println!("manifest {}", a.out.join("manifest.json").display());
    Ok(if manifest.complete { 0 } else { 1 })
}

fn label_names(vocab: &AttributeVocab, labels: &[u8]) -> Vec<String> {
    labels
        .iter()
        .zip(&vocab.names)
        .filter(|(&l, _)| l != 0)
        .map(|(_, n)| n.clone())
        .collect()
}

fn predict(a: PredictArgs) -> Result<u8> {
    let d = load_data(&a.data)?;
    let models = match (&a.checkpoint, &a.manifest) {
        (Some(c), _) => vec![Checkpoint::load(c)?],
        (None, Some(m)) => Manifest::load(m)?.load_members::<f64>(m)?,
        (None, None) => unreachable!("clap requires one of --checkpoint or --manifest"),
    };
    print_config(
        "predict",
        json!({
            "data": a.data.data,
            "checkpoint": a.checkpoint,
            "manifest": a.manifest,
            "members": models.len(),
            "out": a.out,
            "dump_attention": a.dump_attention,
        }),
    );
    let per_member = models
        .iter()
        .map(|c| predict_dataset(&c.model, &d.train, &d.test))
        .collect::<Result<Vec<_>>>()?;

    create_parent(&a.out)?;
    let file = fs::File::create(&a.out).map_err(|e| JrlError::io(&a.out, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (i, s) in d.test.samples.iter().enumerate() {
        let votes: Vec<&[u8]> = per_member.iter().map(|p| &p[i][..]).collect();
        let labels = vote(&votes)?;
        let line = json!({ "id": s.id, "attrs": labels, "names": label_names(&d.vocab, &labels) });
        writeln!(w, "{line}").map_err(|e| JrlError::io(&a.out, e))?;
    }
    w.flush().map_err(|e| JrlError::io(&a.out, e))?;

    if let Some(path) = &a.dump_attention {
        dump_attention(path, &models, &d)?;
    }
    println!("wrote {} predictions to {}", d.test.len(), a.out.display());
    Ok(0)
}

fn dump_attention(path: &Path, models: &[Checkpoint], d: &Loaded) -> Result<()> {
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| JrlError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| JrlError::io(path, std::io::Error::other(e));
    let mut header = vec!["id".to_string(), "member".into(), "step".into(), "token".into()];
    header.extend((1..=d.shape.m).map(|r| format!("region_{r}")));
    w.write_record(&header).map_err(csv_err)?;
    for (mi, ck) in models.iter().enumerate() {
        let model = &ck.model;
        if !model.config.attention {
            log::warn!("member {mi} has attention disabled; no weights to dump");
            continue;
        }
        let k = model.config.effective_k();
        let cache = if k > 0 { Some(ExemplarCache::build(model, &d.train)?) } else { None };
        for s in &d.test.samples {
            let ex = match &cache {
                Some(c) => c.contexts(&c.neighbours(&s.global, k, None)?),
                None => Vec::new(),
            };
            let trace = model.predict(&s.regions, &ex)?;
            for (step, (weights, &tok)) in trace.attention.iter().zip(&trace.tokens).enumerate() {
                let token = d.vocab.names.get(tok).cloned().unwrap_or_else(|| "<stop>".into());
                let mut row = vec![s.id.clone(), mi.to_string(), (step + 1).to_string(), token];
                row.extend(weights.iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| JrlError::io(path, e))
}

fn evaluate(a: EvaluateArgs) -> Result<u8> {
    print_config(
        "evaluate",
        json!({ "data": a.data.data, "manifest": a.manifest, "checkpoint": a.checkpoint, "out": a.out }),
    );
    let report = match (&a.manifest, &a.checkpoint) {
        (Some(path), _) => {
            let manifest = Manifest::load(path)?;
            let d = load_data(&a.data)?;
            if manifest.model.n_attr != d.shape.n_attr {
                return Err(JrlError::InvalidData(format!(
                    "manifest model has {} attributes, data has {}",
                    manifest.model.n_attr, d.shape.n_attr
                )));
            }
            evaluate_ensemble::<f64>(path, &d.train, &d.test)?.0
        }
        (None, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            let d = load_data(&a.data)?;
            let label = ck.order.as_ref().map_or("model".to_string(), |o| o.kind.to_string());
            evaluate_models(&[ck.model], vec![label], &d.train, &d.test)?.0
        }
        (None, None) => unreachable!("clap requires one of --manifest or --checkpoint"),
    };
    print!("{}", report.table());
    if let Some(out) = &a.out {
        create_parent(out)?;
        write_json(out, &report)?;
    }
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<u8> {
    let cfg = GradcheckConfig {
        hidden_size: a.d,
        regions: a.m,
        region_dim: a.region_dim,
        n_attr: a.n_attr,
        embed_dim: a.embed_dim,
        attention_dim: a.attention_dim,
        context_k: a.context_k,
        attention: !a.no_attention,
        encoder: !a.no_encoder,
        epsilon: a.epsilon,
        seed: a.seed,
    };
    print_config("gradcheck", json!(cfg));
    let report = gradcheck(&cfg)?;
    for t in &report.tensors {
        println!("{:<20} max rel error {:.3e}", t.name, t.max_rel_error);
    }
    println!(
        "checked {} parameters; max relative error {:.3e} (tolerance {:.0e})",
        report.checked,
        report.max_rel_error,
        GradcheckConfig::TOLERANCE
    );
    if let Some(out) = &a.out {
        create_parent(out)?;
        write_json(out, &report)?;
    }
    if report.passed() {
        Ok(0)
    } else {
        println!("FAILED");
        Ok(1)
    }
}

fn ablate_cmd(a: AblateArgs) -> Result<u8> {
    let d = load_data(&a.data)?;
    let (mc, tc) = resolve(&a.model, &a.train, &d.shape)?;
    print_config(
        "ablate",
        json!({
            "data": a.data.data,
            "protocol": format!("{:?}", a.protocol).to_lowercase(),
            "ensemble_size": a.ensemble_size,
            "model": mc,
            "train": tc,
        }),
    );
    let (table, value) = match a.protocol {
        Protocol::Ablation => {
            let r = ablate(&d.train, &d.test, &d.vocab, &tc, &mc, a.ensemble_size)?;
            (r.table(), serde_json::to_value(&r))
        }
        Protocol::Robustness => {
            let r = robustness(&d.train, &d.test, &d.vocab, &tc, &mc, a.ensemble_size, &ROBUSTNESS_FRACTIONS)?;
            (r.table(), serde_json::to_value(&r))
        }
    };
    print!("{table}");
    if let Some(out) = &a.out {
        create_parent(out)?;
        let value = value.map_err(|e| JrlError::json(out, e))?;
        write_json(out, &value)?;
    }
    Ok(0)
}
