use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sonar_core::corpus::{generate_domains, load_labels, load_pool, save_labels, save_pool, CorpusPool, DomainSpec};
use sonar_core::eval::{evaluate, retention_baseline, ProbeTask};
use sonar_core::experiment::{desk_scenario, ScenarioShape};
use sonar_core::sampler::build_adaptive_dataset;
use sonar_core::seed::{self, tag};
use sonar_core::trainer::{load_checkpoint, records_to_jsonl, save_checkpoint, Learner, TrainConfig};

use crate::args::{Adapt, BuildDataset, Cli, Command, Eval, GenData, Overrides, Pretrain};
use crate::manifest::RunManifest;
use crate::{report, Failure};

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildDataset(a) => build_dataset(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report::run(a),
    }
}

/// Config file first, then individual flags.
fn resolve(mut cfg: TrainConfig, o: &Overrides) -> Result<TrainConfig, Failure> {
    if let Some(path) = &o.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    let set = |cfg: &mut TrainConfig, key: &str, v: Option<String>| -> Result<(), Failure> {
        if let Some(v) = v {
            cfg.set(key, &v).map_err(|e| Failure::Usage(e.to_string()))?;
        }
        Ok(())
    };
    set(&mut cfg, "seed", o.seed.map(|v| v.to_string()))?;
    set(&mut cfg, "epochs", o.epochs.map(|v| v.to_string()))?;
    set(&mut cfg, "learning_rate", o.lr.map(|v| v.to_string()))?;
    set(&mut cfg, "lambda_reg", o.lambda_reg.map(|v| v.to_string()))?;
    set(&mut cfg, "mu_reg", o.mu_reg.map(|v| v.to_string()))?;
    set(&mut cfg, "lambda_contra", o.lambda_contra.map(|v| v.to_string()))?;
    set(&mut cfg, "gamma", o.gamma.map(|v| v.to_string()))?;
    set(&mut cfg, "tau", o.tau.map(|v| v.to_string()))?;
    set(&mut cfg, "mask_ratio", o.mask_ratio.map(|v| v.to_string()))?;
    set(&mut cfg, "codebook_size", o.codebook_size.map(|v| v.to_string()))?;
    Ok(cfg)
}

fn validated(cfg: TrainConfig) -> Result<TrainConfig, Failure> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn pool(path: &Path) -> Result<CorpusPool, Failure> {
    load_pool(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn labels_path(pool: &Path) -> PathBuf {
    pool.with_extension("labels")
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))
}

#[derive(Debug, Deserialize)]
struct SpecFile {
    domain: Vec<DomainSpec>,
}

fn gen_data(a: GenData) -> Result<(), Failure> {
    out_dir(&a.out)?;
    let mut m = RunManifest::new("gen-data", &a.out);
    let pools = if let Some(spec) = &a.spec {
        let text = fs::read_to_string(spec).map_err(|e| Failure::Input(format!("{}: {e}", spec.display())))?;
        let file: SpecFile = toml::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", spec.display())))?;
        m.inputs.push(spec.clone());
        m.seeds = file.domain.iter().map(|d| d.seed).collect();
        generate_domains(&file.domain)?
    } else {
        m.seeds.push(a.seed);
        let sc = desk_scenario(&ScenarioShape::default(), a.seed)?;
        vec![sc.general, sc.domain]
    };
    for (p, labels) in &pools {
        let path = a.out.join(format!("{}.snrf", p.name()));
        save_pool(p, &path)?;
        save_labels(p, labels, labels_path(&path))?;
        println!("{}: {} clips, dim {}", path.display(), p.len(), p.dim());
    }
    m.write()
}

fn build_dataset(a: BuildDataset) -> Result<(), Failure> {
    out_dir(&a.out)?;
    let task = pool(&a.task)?;
    let general = pool(&a.general)?;
    let adaptive = match &a.adaptive {
        Some(p) => pool(p)?,
        None => CorpusPool::empty("adaptive", task.dim()),
    };
    let cfg = resolve(TrainConfig { dim: task.dim(), ..TrainConfig::default() }, &a.overrides)?;
    let budget = a.budget.unwrap_or(task.len());
    let ds = build_adaptive_dataset(&task, &general, &adaptive, &cfg.sampling_config(budget), a.stage)?;
    let stem = format!("stage{}.dataset", a.stage);
    save_pool(&ds.pool, a.out.join(format!("{stem}.snrf")))?;
    fs::write(a.out.join(format!("{stem}.tsv")), ds.manifest_text())?;
    println!("{} clips written to {}", ds.pool.len(), a.out.join(format!("{stem}.snrf")).display());
    let mut m = RunManifest::new("build-dataset", &a.out).with_config(a.overrides.config.as_deref(), &cfg);
    m.inputs = [Some(a.task), Some(a.general), a.adaptive].into_iter().flatten().collect();
    m.write()
}

fn pretrain(a: Pretrain) -> Result<(), Failure> {
    out_dir(&a.out)?;
    let general = pool(&a.general)?;
    let cfg = resolve(TrainConfig::default(), &a.overrides)?;
    let cfg = validated(TrainConfig { dim: general.dim(), ..cfg })?;
    let mut m = RunManifest::new("pretrain", &a.out).with_config(a.overrides.config.as_deref(), &cfg);
    m.inputs.push(a.general.clone());
    m.write()?;
    let (learner, out) = Learner::pretrain(cfg, &general)?;
    save_checkpoint(&learner, a.out.join("stage0.snrc"))?;
    fs::write(a.out.join("stage0.records.jsonl"), records_to_jsonl(&out.records))?;
    println!(
        "stage 0: tokenizer loss {:.6}, model loss {:.6}, codebook perplexity {:.3}",
        out.summary.final_tokenizer_loss, out.summary.final_model_loss, out.summary.codebook.perplexity
    );
    Ok(())
}

fn adapt(a: Adapt) -> Result<(), Failure> {
    out_dir(&a.out)?;
    let mut learner = load_checkpoint(&a.checkpoint, None)?;
    let domain = pool(&a.domain)?;
    let general = pool(&a.general)?;
    let adaptive = match &a.adaptive {
        Some(p) => pool(p)?,
        None => CorpusPool::empty("adaptive", domain.dim()),
    };
    let before = learner.config.clone();
    let mut cfg = resolve(before.clone(), &a.overrides)?;
    if a.dcpt {
        cfg = cfg.dcpt();
    }
    cfg.reinit &= !a.no_reinit;
    cfg.contrastive &= !a.no_contrastive;
    cfg.sampling &= !a.no_sampling;
    if (cfg.dim, cfg.hidden, cfg.codebook_size) != (before.dim, before.hidden, before.codebook_size) {
        return Err(Failure::Usage("dim, hidden and codebook size are fixed by the checkpoint".into()));
    }
    learner.config = validated(cfg)?;
    let stage = learner.stage + 1;
    let mut m = RunManifest::new(&format!("adapt-stage{stage}"), &a.out)
        .with_config(a.overrides.config.as_deref(), &learner.config);
    m.inputs = [Some(a.checkpoint), Some(a.domain), Some(a.general), a.adaptive].into_iter().flatten().collect();
    m.write()?;
    let out = learner.adapt(&domain, &general, &adaptive)?;
    save_checkpoint(&learner, a.out.join(format!("stage{stage}.snrc")))?;
    fs::write(a.out.join(format!("stage{stage}.records.jsonl")), records_to_jsonl(&out.records))?;
    if let Some(ds) = &out.retrieval {
        fs::write(a.out.join(format!("stage{stage}.dataset.tsv")), ds.manifest_text())?;
    }
    save_pool(&out.adaptive, a.out.join(format!("stage{stage}.adaptive.snrf")))?;
    let summary = serde_json::to_string_pretty(&out.summary).map_err(|e| Failure::Input(e.to_string()))?;
    fs::write(a.out.join(format!("stage{stage}.summary.json")), summary + "\n")?;
    println!(
        "stage {stage}: {} clips, tokenizer drift {:.6}, model drift {:.6}, codebook perplexity {:.3}",
        out.summary.dataset_size, out.summary.tokenizer_drift, out.summary.model_drift, out.summary.codebook.perplexity
    );
    Ok(())
}

fn labelled(path: &Path, seed: u64) -> Result<ProbeTask, Failure> {
    let p = pool(path)?;
    let lp = labels_path(path);
    let labels = load_labels(&p, &lp).map_err(|e| Failure::Input(format!("{}: {e}", lp.display())))?;
    Ok(ProbeTask::new(p, labels, seed)?)
}

fn eval(a: Eval) -> Result<(), Failure> {
    out_dir(&a.out)?;
    let base = load_checkpoint(&a.base, None)?;
    let current = load_checkpoint(&a.checkpoint, None)?;
    let probe_seed = seed::derive(base.config.seed, &[tag::PROBE, 2]);
    let retention = labelled(&a.general, probe_seed)?;
    let domains = a.domain.iter().map(|d| labelled(d, probe_seed)).collect::<Result<Vec<_>, _>>()?;
    let label = match a.label {
        Some(l) => l,
        None => a.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("eval").to_string(),
    };
    if label.is_empty() || label.contains(['/', '\\']) {
        return Err(Failure::Usage(format!("label {label:?} cannot be used as a file name")));
    }
    let baseline = retention_baseline(&base, &retention)?;
    let report = evaluate(&current, &label, &retention, &domains, &baseline)?;
    fs::write(a.out.join(format!("eval-{label}.jsonl")), report.to_jsonl())?;
    let mut m = RunManifest::new(&format!("eval-{label}"), &a.out);
    m.inputs = [a.checkpoint, a.base, a.general].into_iter().chain(a.domain).collect();
    m.seeds.push(base.config.seed);
    m.write()?;
    println!(
        "{label}: retention mAP {:.2} (base {:.2}), FR {:.2}",
        report.retention_map, report.baseline_map, report.forgetting_rate
    );
    Ok(())
}
