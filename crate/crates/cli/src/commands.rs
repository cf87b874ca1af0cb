use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use dive_core::affinity::{read_matrix_csv, write_assignment_csv, write_matrix_csv, ClusterAssignment};
use dive_core::analysis::{
    compare_report, emit_heatmap_csv, routing_distribution, token_attribution, Candidate, EvalSet, Heatmap,
};
use dive_core::checkpoint::{load_checkpoint, load_dense, load_moe, save_dense, save_moe, Checkpoint};
use dive_core::config::RunConfig;
use dive_core::corpus::{mix_cluster_calibration, tokenize, CorpusSet};
use dive_core::model::eval_tokens;
use dive_core::pipeline::{self, heldout_split, CalibrationSource, MoeRun};
use dive_core::prune::{prune_model, write_prune_csv};
use dive_core::retrain::{write_trace_csv, TraceRow, TrainPlan};
use dive_core::{DenseModel32, DetRng, MoeModel32};

use crate::{plot, Command, Common, UsageError};

const DEFAULT_PRESET: &str = "dive-1of8";

/// Resolved configuration plus the run directory.
struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// An artifact an earlier subcommand must have produced.
    fn input(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(UsageError(format!("missing {} (run `dive {producer}` first)", p.display())).into());
        }
        Ok(p)
    }

    fn corpus(&self) -> Result<CorpusSet> {
        let dir = self.input("corpus/manifest.json", "gen-corpus")?;
        Ok(CorpusSet::load(dir.parent().expect("manifest has a parent"))?)
    }

    fn dense(&self) -> Result<DenseModel32> {
        Ok(load_dense(&self.input("dense.ckpt", "train-dense")?)?)
    }

    fn manifest(&self, command: &str, inputs: &[&str], outputs: &[&str], metrics: Value, started: Instant) -> Result<()> {
        let dir = self.path("manifests");
        std::fs::create_dir_all(&dir)?;
        let m = json!({
            "command": command,
            "config": self.cfg,
            "inputs": inputs,
            "outputs": outputs,
            "metrics": metrics,
            "elapsed_secs": started.elapsed().as_secs_f64(),
        });
        let path = dir.join(format!("{command}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&m)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn resolve(common: &Common, command: &Command) -> Result<Ctx> {
    let mut cfg = if let Some(path) = &common.config {
        if !path.exists() {
            return Err(UsageError(format!("config file {} does not exist", path.display())).into());
        }
        RunConfig::load(path)?
    } else if let Some(p) = &common.preset {
        RunConfig::preset(p)?
    } else {
        let saved = common.out.as_ref().map(|o| o.join("config.json")).filter(|p| p.exists());
        match saved {
            Some(p) => RunConfig::load(&p)?,
            None => RunConfig::preset(DEFAULT_PRESET)?,
        }
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.corpus.seed = s;
    }
    if let Some(r) = common.ratio {
        cfg.ratio = r;
    }
    if let Some(n) = common.experts {
        cfg.n_experts = n;
    }
    if let Some(k) = common.top_k {
        cfg.top_k = k;
    }
    if let Some(t) = common.temperature {
        cfg.temperature = t;
    }
    if let Some(tokens) = common.tokens {
        match command {
            Command::TrainRouters => cfg.stage1.tokens = tokens,
            _ => cfg.stage2.tokens = tokens,
        }
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate().map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let saved = out.join("config.json");
    if !saved.exists() {
        cfg.save(&saved)?;
    }
    Ok(Ctx { cfg, out })
}

pub fn dispatch(common: Common, command: Command) -> Result<()> {
    if let Command::Plot { input, output, title } = &command {
        return plot_cmd(input, output.as_deref(), title.as_deref());
    }
    let ctx = resolve(&common, &command)?;
    match command {
        Command::GenCorpus => gen_corpus(&ctx),
        Command::TrainDense => train_dense(&ctx),
        Command::Prune => prune(&ctx),
        Command::Affinity => affinity(&ctx),
        Command::Cluster => cluster(&ctx),
        Command::Reconstruct { no_dam } => reconstruct(&ctx, no_dam),
        Command::TrainRouters => train_routers(&ctx),
        Command::TrainSparse { with_mha } => train_sparse(&ctx, with_mha),
        Command::Eval { checkpoint, data, seq_len } => eval(&ctx, checkpoint, data, seq_len),
        Command::RouteStats { checkpoint } => route_stats(&ctx, checkpoint),
        Command::CaseStudy {
            checkpoint,
            text,
            domain,
            len,
        } => case_study(&ctx, checkpoint, text, domain, len),
        Command::Compare => compare(&ctx),
        Command::BaselineSplit => baseline_split(&ctx),
        Command::Ablate { no_dam, with_mha } => ablate(&ctx, no_dam, with_mha),
        Command::Run => run_all(&ctx),
        Command::Plot { .. } => unreachable!("handled above"),
    }
}

fn gen_corpus(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let corpus = pipeline::generate_corpus_set(&ctx.cfg)?;
    corpus.save(&ctx.path("corpus"))?;
    let sizes: Vec<Value> = corpus
        .domains
        .iter()
        .map(|d| json!({"domain": d.spec.domain.name(), "train_bytes": d.train.len(), "eval_bytes": d.eval.len()}))
        .collect();
    println!("wrote {} domains to {}", corpus.domains.len(), ctx.path("corpus").display());
    ctx.manifest("gen-corpus", &[], &["corpus/"], json!({ "domains": sizes }), t)
}

fn train_dense(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let (model, trace) = pipeline::train_dense_model::<f32>(&ctx.cfg, &corpus)?;
    save_dense(&model, &ctx.path("dense.ckpt"))?;
    let mut csv = String::from("step,train_loss\n");
    for (i, l) in trace.train.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(ctx.path("dense_trace.csv"), csv)?;
    let held = pipeline::heldout_eval(&model, &corpus, &ctx.cfg)?;
    println!("dense model trained: final loss {:.4}, held-out ppl {:.4}", trace.train.last().copied().unwrap_or(f64::NAN), held.mixed);
    ctx.manifest(
        "train-dense",
        &["corpus/"],
        &["dense.ckpt", "dense_trace.csv"],
        json!({ "final_train_loss": trace.train.last(), "heldout": held }),
        t,
    )
}

fn prune(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let dense = ctx.dense()?;
    let cfg = &ctx.cfg;
    let calib = mix_cluster_calibration(&corpus.specs(), cfg.calibration_samples, cfg.sample_len, DetRng::derive_seed(cfg.seed, "flap"))?;
    let (pruned, report) = prune_model(&dense, &calib, cfg.ratio)?;
    save_dense(&pruned, &ctx.path("pruned.ckpt"))?;
    write_prune_csv(&ctx.path("prune.csv"), &report)?;
    let held = pipeline::heldout_eval(&pruned, &corpus, cfg)?;
    println!("pruned {:.0}% of FFN channels: held-out ppl {:.4}", 100.0 * cfg.ratio, held.mixed);
    ctx.manifest("prune", &["corpus/", "dense.ckpt"], &["pruned.ckpt", "prune.csv"], json!({ "heldout": held }), t)
}

fn affinity(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let dense = ctx.dense()?;
    let m = pipeline::mine_affinity(&ctx.cfg, &dense, &corpus)?;
    write_matrix_csv(&ctx.path("affinity.csv"), &m)?;
    let heat = Heatmap {
        rows: m.tasks.clone(),
        cols: m.tasks.clone(),
        values: m.norm.clone(),
    };
    emit_heatmap_csv(&ctx.path("affinity_heatmap.csv"), &heat)?;
    for (task, row) in m.tasks.iter().zip(&m.norm) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("{task:>10} {}", cells.join(" "));
    }
    ctx.manifest(
        "affinity",
        &["corpus/", "dense.ckpt"],
        &["affinity.csv", "affinity_heatmap.csv"],
        json!({ "tasks": m.tasks }),
        t,
    )
}

fn load_assignment(ctx: &Ctx) -> Result<ClusterAssignment> {
    let p = ctx.input("clusters.json", "cluster")?;
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
    Ok(serde_json::from_value(v["assignment"].clone())?)
}

fn cluster(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let m = read_matrix_csv(&ctx.input("affinity.csv", "affinity")?)?;
    let a = pipeline::cluster_tasks(&ctx.cfg, &m)?;
    write_assignment_csv(&ctx.path("clusters.csv"), &m.tasks, &a)?;
    let doc = json!({ "tasks": m.tasks, "assignment": a });
    std::fs::write(ctx.path("clusters.json"), serde_json::to_string_pretty(&doc)?)?;
    for c in 0..a.n_clusters {
        let names: Vec<&str> = a.members(c).iter().map(|&i| m.tasks[i].as_str()).collect();
        println!("cluster {c}: {}", names.join(", "));
    }
    ctx.manifest("cluster", &["affinity.csv"], &["clusters.csv", "clusters.json"], doc, t)
}

fn reconstruct(ctx: &Ctx, no_dam: bool) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let dense = ctx.dense()?;
    let assignment;
    let source = if no_dam {
        CalibrationSource::Random
    } else {
        assignment = load_assignment(ctx)?;
        CalibrationSource::Clusters(&assignment)
    };
    let moe = pipeline::reconstruct(&ctx.cfg, &dense, &corpus, source)?;
    save_moe(&moe, &ctx.path("moe_init.ckpt"))?;
    println!("reconstructed {} experts of width {}", moe.n_experts, moe.expert_width);
    let clusters: Vec<&Vec<String>> = moe.experts.iter().map(|e| &e.cluster).collect();
    ctx.manifest(
        "reconstruct",
        &["corpus/", "dense.ckpt", if no_dam { "" } else { "clusters.json" }],
        &["moe_init.ckpt"],
        json!({ "no_dam": no_dam, "experts": clusters }),
        t,
    )
}

fn save_abort(ctx: &Ctx, moe: &MoeModel32, err: dive_core::DiveError) -> anyhow::Error {
    if err.is_numeric() {
        let p = ctx.path("moe_abort.ckpt");
        if save_moe(moe, &p).is_ok() {
            eprintln!("numeric failure; last good parameters saved to {}", p.display());
        }
    }
    err.into()
}

fn train_routers(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let mut moe = load_moe::<f32>(&ctx.input("moe_init.ckpt", "reconstruct")?)?;
    let plan = ctx.cfg.stage1_plan();
    let trace = pipeline::run_stage1(&mut moe, &corpus, &plan).map_err(|e| save_abort(ctx, &moe, e))?;
    save_moe(&moe, &ctx.path("moe_routers.ckpt"))?;
    write_trace_csv(&ctx.path("trace_stage1.csv"), &trace)?;
    report_trace("router training", &trace);
    ctx.manifest(
        "train-routers",
        &["corpus/", "moe_init.ckpt"],
        &["moe_routers.ckpt", "trace_stage1.csv"],
        json!({ "steps": trace.len(), "final": trace.last() }),
        t,
    )
}

fn train_sparse(ctx: &Ctx, with_mha: bool) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let mut moe = load_moe::<f32>(&ctx.input("moe_routers.ckpt", "train-routers")?)?;
    let cfg = RunConfig {
        include_mha: ctx.cfg.include_mha || with_mha,
        ..ctx.cfg.clone()
    };
    let trace = pipeline::run_stage2(&cfg, &mut moe, &corpus).map_err(|e| save_abort(ctx, &moe, e))?;
    save_moe(&moe, &ctx.path("moe.ckpt"))?;
    write_trace_csv(&ctx.path("trace_stage2.csv"), &trace)?;
    report_trace("sparse training", &trace);
    let held = pipeline::heldout_eval(&moe, &corpus, &cfg)?;
    println!("held-out ppl {:.4}", held.mixed);
    ctx.manifest(
        "train-sparse",
        &["corpus/", "moe_routers.ckpt"],
        &["moe.ckpt", "trace_stage2.csv"],
        json!({ "steps": trace.len(), "final": trace.last(), "heldout": held }),
        t,
    )
}

fn report_trace(what: &str, trace: &[TraceRow]) {
    if let (Some(a), Some(b)) = (trace.first(), trace.last()) {
        println!("{what}: {} steps, loss {:.4} -> {:.4}", trace.len(), a.train_loss, b.train_loss);
    } else {
        println!("{what}: no steps in budget");
    }
}

fn checkpoint_path(ctx: &Ctx, given: Option<PathBuf>, default: &str) -> Result<PathBuf> {
    match given {
        Some(p) if p.exists() => Ok(p),
        Some(p) => Err(UsageError(format!("checkpoint {} does not exist", p.display())).into()),
        None => ctx.input(default, "train-sparse"),
    }
}

fn eval(ctx: &Ctx, checkpoint: Option<PathBuf>, data: Option<PathBuf>, seq_len: Option<usize>) -> Result<()> {
    let t = Instant::now();
    let path = checkpoint_path(ctx, checkpoint, "moe.ckpt")?;
    let ckpt = load_checkpoint::<f32>(&path)?;
    let seq = seq_len.unwrap_or(ctx.cfg.eval_seq_len);
    let metrics = if let Some(d) = data {
        let bytes = std::fs::read(&d).map_err(|e| UsageError(format!("cannot read {}: {e}", d.display())))?;
        let tokens = tokenize(&bytes);
        let r = match &ckpt {
            Checkpoint::Dense(m) => eval_tokens(m, &tokens, seq)?,
            Checkpoint::Moe(m) => eval_tokens(m, &tokens, seq)?,
        };
        println!("perplexity {}", r.perplexity);
        json!({ "data": d, "report": r })
    } else {
        let corpus = ctx.corpus()?;
        let cfg = RunConfig {
            eval_seq_len: seq,
            ..ctx.cfg.clone()
        };
        let held = match &ckpt {
            Checkpoint::Dense(m) => pipeline::heldout_eval(m, &corpus, &cfg)?,
            Checkpoint::Moe(m) => pipeline::heldout_eval(m, &corpus, &cfg)?,
        };
        for (d, p) in held.domains.iter().zip(&held.perplexity) {
            println!("{d:>10} {p}");
        }
        println!("{:>10} {}", "mixed", held.mixed);
        json!({ "heldout": held })
    };
    std::fs::write(ctx.path("eval.json"), serde_json::to_string_pretty(&metrics)?)?;
    ctx.manifest("eval", &[&path.display().to_string()], &["eval.json"], metrics, t)
}

fn heldout_sets<'a>(corpus: &'a CorpusSet) -> Vec<EvalSet<'a>> {
    corpus
        .domains
        .iter()
        .map(|d| EvalSet {
            name: d.spec.domain.name(),
            bytes: heldout_split(&d.eval),
        })
        .collect()
}

fn route_stats(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let path = checkpoint_path(ctx, checkpoint, "moe.ckpt")?;
    let moe = load_moe::<f32>(&path)?;
    let k = moe.top_k().unwrap_or(ctx.cfg.top_k);
    let stats = routing_distribution(&moe, &heldout_sets(&corpus), k, ctx.cfg.eval_seq_len, ctx.cfg.eval_cap)?;
    emit_heatmap_csv(&ctx.path("route_stats.csv"), &stats.heatmap())?;
    let mut counts = String::from("set,layer,expert,count\n");
    for (s, per_layer) in stats.sets.iter().zip(&stats.counts) {
        for (l, row) in per_layer.iter().enumerate() {
            for (e, c) in row.iter().enumerate() {
                counts.push_str(&format!("{s},{l},{e},{c}\n"));
            }
        }
    }
    std::fs::write(ctx.path("route_counts.csv"), counts)?;
    for (s, r) in stats.sets.iter().zip(&stats.ratios) {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:.3}")).collect();
        println!("{s:>10} {}", cells.join(" "));
    }
    ctx.manifest(
        "route-stats",
        &["corpus/", &path.display().to_string()],
        &["route_stats.csv", "route_counts.csv"],
        json!({ "top_k": k, "ratios": stats.ratios }),
        t,
    )
}

fn case_study(ctx: &Ctx, checkpoint: Option<PathBuf>, text: Option<String>, domain: Option<String>, len: usize) -> Result<()> {
    let t = Instant::now();
    let path = checkpoint_path(ctx, checkpoint, "moe.ckpt")?;
    let moe = load_moe::<f32>(&path)?;
    let bytes: Vec<u8> = match (text, domain) {
        (Some(s), _) => s.into_bytes(),
        (None, Some(d)) => {
            let corpus = ctx.corpus()?;
            let h = heldout_split(&corpus.get(&d)?.eval);
            h[..len.min(h.len())].to_vec()
        }
        (None, None) => return Err(UsageError("case-study needs --text or --domain".into()).into()),
    };
    if bytes.is_empty() {
        return Err(UsageError("case-study text is empty".into()).into());
    }
    let attr = token_attribution(&moe, &bytes, ctx.cfg.eval_seq_len)?;
    let mut csv = String::from("position,byte,expert\n");
    let mut line = String::new();
    for a in &attr {
        csv.push_str(&format!("{},{},{}\n", a.position, a.token, a.expert));
        line.push_str(&format!("{}", a.expert));
    }
    std::fs::write(ctx.path("case_study.csv"), csv)?;
    println!("{}", String::from_utf8_lossy(&bytes));
    println!("{line}");
    let mut share = vec![0usize; moe.n_experts];
    for a in &attr {
        share[a.expert] += 1;
    }
    ctx.manifest("case-study", &[&path.display().to_string()], &["case_study.csv"], json!({ "tokens_per_expert": share }), t)
}

fn compare(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let mut dense = Vec::new();
    let mut moes = Vec::new();
    for (name, rel) in [("dense", "dense.ckpt"), ("flap", "pruned.ckpt")] {
        let p = ctx.path(rel);
        if p.exists() {
            dense.push((name, load_dense::<f32>(&p)?));
        }
    }
    for (name, rel) in [
        ("dive", "moe.ckpt"),
        ("random-split", "baseline_split/moe.ckpt"),
        ("dive-no-dam", "ablate_no_dam/moe.ckpt"),
        ("dive-with-mha", "ablate_with_mha/moe.ckpt"),
    ] {
        let p = ctx.path(rel);
        if p.exists() {
            moes.push((name, load_moe::<f32>(&p)?));
        }
    }
    let mut models: Vec<(&str, Candidate<'_, f32>)> = dense.iter().map(|(n, m)| (*n, Candidate::Dense(m))).collect();
    models.extend(moes.iter().map(|(n, m)| (*n, Candidate::Moe(m))));
    if models.is_empty() {
        return Err(UsageError("no checkpoints to compare (run `dive train-dense` first)".into()).into());
    }
    let capped: Vec<Vec<u8>> = corpus
        .domains
        .iter()
        .map(|d| {
            let h = heldout_split(&d.eval);
            h[..ctx.cfg.eval_cap.unwrap_or(usize::MAX).min(h.len())].to_vec()
        })
        .collect();
    let mixed: Vec<u8> = capped.concat();
    let mut sets: Vec<EvalSet<'_>> = corpus
        .names()
        .into_iter()
        .zip(&capped)
        .map(|(name, bytes)| EvalSet { name, bytes })
        .collect();
    sets.push(EvalSet {
        name: "mixed",
        bytes: &mixed,
    });
    let table = compare_report(&models, &sets, ctx.cfg.eval_seq_len)?;
    table.write_csv(&ctx.path("compare.csv"))?;
    print!("{}", table.to_csv());
    ctx.manifest("compare", &["corpus/"], &["compare.csv"], serde_json::to_value(&table)?, t)
}

fn write_run(ctx: &Ctx, dir: &str, run: &MoeRun<f32>) -> Result<()> {
    let d = ctx.path(dir);
    std::fs::create_dir_all(&d)?;
    save_moe(&run.after_stage1, &d.join("moe_routers.ckpt"))?;
    save_moe(&run.moe, &d.join("moe.ckpt"))?;
    write_trace_csv(&d.join("trace.csv"), &run.traces.rows())?;
    println!("{dir}: held-out ppl {:.4}", run.heldout.mixed);
    Ok(())
}

fn baseline_split(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let dense = ctx.dense()?;
    let run = pipeline::run_random_split(&ctx.cfg, &dense, &corpus)?;
    write_run(ctx, "baseline_split", &run)?;
    ctx.manifest(
        "baseline-split",
        &["corpus/", "dense.ckpt"],
        &["baseline_split/moe.ckpt", "baseline_split/trace.csv"],
        json!({ "heldout": run.heldout }),
        t,
    )
}

fn ablate(ctx: &Ctx, no_dam: bool, with_mha: bool) -> Result<()> {
    if !no_dam && !with_mha {
        return Err(UsageError("ablate needs --no-dam and/or --with-mha".into()).into());
    }
    let t = Instant::now();
    let corpus = ctx.corpus()?;
    let dense = ctx.dense()?;
    let mut metrics = serde_json::Map::new();
    if no_dam {
        let run = pipeline::run_no_dam(&ctx.cfg, &dense, &corpus)?;
        write_run(ctx, "ablate_no_dam", &run)?;
        metrics.insert("no_dam".into(), json!(run.heldout));
    }
    if with_mha {
        let m = read_matrix_csv(&ctx.input("affinity.csv", "affinity")?)?;
        let cfg = RunConfig {
            include_mha: true,
            ..ctx.cfg.clone()
        };
        let run = pipeline::run_dive_with(&cfg, &dense, &corpus, m)?.run;
        write_run(ctx, "ablate_with_mha", &run)?;
        metrics.insert("with_mha".into(), json!(run.heldout));
    }
    ctx.manifest("ablate", &["corpus/", "dense.ckpt"], &["ablate_*/"], Value::Object(metrics), t)
}

fn run_all(ctx: &Ctx) -> Result<()> {
    let t = Instant::now();
    gen_corpus(ctx)?;
    train_dense(ctx)?;
    prune(ctx)?;
    affinity(ctx)?;
    cluster(ctx)?;
    reconstruct(ctx, false)?;
    train_routers(ctx)?;
    train_sparse(ctx, false)?;
    route_stats(ctx, None)?;
    baseline_split(ctx)?;
    ablate(ctx, true, false)?;
    compare(ctx)?;
    let plan: TrainPlan = ctx.cfg.stage2_plan();
    ctx.manifest("run", &[], &["*"], json!({ "stage2_steps": plan.steps() }), t)
}

fn plot_cmd(input: &Path, output: Option<&Path>, title: Option<&str>) -> Result<()> {
    if !input.exists() {
        return Err(UsageError(format!("input {} does not exist", input.display())).into());
    }
    let h = dive_core::analysis::read_heatmap_csv(input)?;
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("svg"));
    let title = title.map(str::to_string).unwrap_or_else(|| {
        input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    std::fs::write(&out, plot::heatmap_svg(&h, &title)).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}
