use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use headshare_core::analysis::{head_similarity_matrix, layer_similarity_matrix, matched_degree};
use headshare_core::engine::{self, format_sequences, read_sequences};
use headshare_core::postshare::{postshare_train, PostShareConfig, RegNorm, RegOptions, TrainState};
use headshare_core::report::{memory_report, memory_report_for_counts, MemoryReport, MEMORY_NOTE};
use headshare_core::sharing::{apply_share_plan, direct_share_plan, target_pairs};
use headshare_core::similarity::pairwise_scores;
use headshare_core::store::{load_store_with, save_store, Dtype, LoadOptions, Tensor, TensorData};
use headshare_core::{toy, HeadRef, ModelConfig, SharePlan, TensorStore, TokenSequence};
use rand::Rng;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::output::{read_json, sibling, write_csv, write_json};
use crate::{
    AnalyzeArgs, Command, DegreeArgs, DtypeArg, GenToyArgs, HeatmapArgs, NormArg, PostshareArgs, Preset, ReportArgs,
    ShareArgs, TraceArgs,
};

pub fn run(cmd: &Command, seed: u64) -> Result<()> {
    let (inputs, outputs, manifest_path) = match cmd {
        Command::GenToy(a) => gen_toy(a, seed)?,
        Command::Analyze(a) => analyze(a)?,
        Command::Share(a) => share(a)?,
        Command::Postshare(a) => postshare(a, seed)?,
        Command::Trace(a) => trace(a)?,
        Command::Degree(a) => degree(a)?,
        Command::Heatmap(a) => heatmap(a)?,
        Command::Report(a) => report(a)?,
    };
    let args = match cmd {
        Command::GenToy(a) => serde_json::to_value(a),
        Command::Analyze(a) => serde_json::to_value(a),
        Command::Share(a) => serde_json::to_value(a),
        Command::Postshare(a) => serde_json::to_value(a),
        Command::Trace(a) => serde_json::to_value(a),
        Command::Degree(a) => serde_json::to_value(a),
        Command::Heatmap(a) => serde_json::to_value(a),
        Command::Report(a) => serde_json::to_value(a),
    }?;
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    RunManifest::new(cmd.name(), args, seed, &inputs, outputs)?.write(&manifest_path)
}

/// Inputs read, outputs written, and where the manifest goes.
type RunFiles = (Vec<PathBuf>, Vec<PathBuf>, PathBuf);

fn load_model(path: &Path, allow_extra: bool) -> Result<(TensorStore, ModelConfig)> {
    let store = load_store_with(path, LoadOptions { allow_extra })
        .with_context(|| format!("loading {}", path.display()))?;
    let cfg = store.require_config()?;
    Ok((store, cfg))
}

fn load_sequences(path: &Path, cfg: &ModelConfig) -> Result<Vec<TokenSequence>> {
    let seqs = read_sequences(path).with_context(|| format!("reading {}", path.display()))?;
    for s in &seqs {
        s.validate(cfg)?;
    }
    Ok(seqs)
}

fn save(store: &TensorStore, path: &Path) -> Result<()> {
    save_store(store, path).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn to_f32(store: TensorStore) -> TensorStore {
    let mut out = TensorStore::new(store.config().copied());
    for (name, t) in store.iter() {
        let data = TensorData::F32(t.data().to_f64_vec().into_iter().map(|v| v as f32).collect());
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"));
    }
    out
}

fn gen_toy(a: &GenToyArgs, seed: u64) -> Result<RunFiles> {
    let cfg = ModelConfig {
        max_seq_len: a.max_seq_len,
        ..ModelConfig::new(a.layers, a.heads, a.embed_dim, a.head_dim, a.ffn_dim, a.vocab)
    };
    cfg.validate()?;
    if a.seq_len > cfg.max_seq_len {
        return Err(headshare_core::Error::InvalidArgument(format!(
            "--seq-len {} exceeds --max-seq-len {}",
            a.seq_len, cfg.max_seq_len
        ))
        .into());
    }
    let mut rng = toy::rng(seed);
    let model_seed: u64 = rng.random();
    let corpus_seed: u64 = rng.random();
    let dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    let store = if a.plant.is_empty() {
        toy::random_store(&cfg, model_seed, dtype)
    } else {
        let s = toy::planted_duplicates(&cfg, model_seed, &a.plant)?;
        if dtype == Dtype::F32 {
            to_f32(s)
        } else {
            s
        }
    };
    let corpus = toy::markov_corpus(&cfg, corpus_seed, a.sequences, a.seq_len);
    let corpus_path = sibling(&a.out, ".corpus.txt");
    save(&store, &a.out)?;
    fs::write(&corpus_path, format_sequences(&corpus)).with_context(|| format!("writing {}", corpus_path.display()))?;
    Ok((vec![], vec![a.out.clone(), corpus_path], sibling(&a.out, ".manifest.json")))
}

#[derive(Serialize)]
struct PairRow {
    layer_i: usize,
    head_i: usize,
    layer_j: usize,
    head_j: usize,
    score: f64,
}

fn pair_row(i: HeadRef, j: HeadRef, score: f64) -> PairRow {
    PairRow {
        layer_i: i.layer,
        head_i: i.head,
        layer_j: j.layer,
        head_j: j.head,
        score,
    }
}

fn analyze(a: &AnalyzeArgs) -> Result<RunFiles> {
    let (store, cfg) = load_model(&a.model, a.allow_extra)?;
    let scores = pairwise_scores(&store, &cfg, a.match_function)?;
    write_csv(&a.out, scores.iter().map(|s| pair_row(s.pair.0, s.pair.1, s.score)))?;
    Ok((vec![a.model.clone()], vec![a.out.clone()], sibling(&a.out, ".manifest.json")))
}

fn share(a: &ShareArgs) -> Result<RunFiles> {
    let (store, cfg) = load_model(&a.model, a.allow_extra)?;
    let mut inputs = vec![a.model.clone()];
    let plan: SharePlan = match &a.plan {
        Some(p) => {
            inputs.push(p.clone());
            read_json(p)?
        }
        None => direct_share_plan(&store, &cfg, a.ratio.unwrap_or(0.0), a.match_function, a.ffn_ratio)?,
    };
    let tied = apply_share_plan(&store, &cfg, &plan)?;
    let plan_path = sibling(&a.out, ".plan.json");
    save(&tied, &a.out)?;
    write_json(&plan_path, &plan)?;
    Ok((inputs, vec![a.out.clone(), plan_path], sibling(&a.out, ".manifest.json")))
}

fn postshare(a: &PostshareArgs, seed: u64) -> Result<RunFiles> {
    let (store, cfg) = load_model(&a.model, false)?;
    let corpus = load_sequences(&a.corpus, &cfg)?;
    let mut inputs = vec![a.model.clone(), a.corpus.clone()];
    let plan: SharePlan = match &a.plan {
        Some(p) => {
            inputs.push(p.clone());
            read_json(p)?
        }
        None => direct_share_plan(&store, &cfg, a.ratio.unwrap_or(0.0), a.match_function, None)?,
    };
    let pscfg = PostShareConfig {
        gamma: a.gamma,
        learning_rate: a.lr,
        steps: a.steps,
        checkpoint_every: a.checkpoint_every,
        batch_size: a.batch_size,
        seed,
        reg: RegOptions {
            norm: match a.reg_norm {
                NormArg::Frobenius => RegNorm::Frobenius,
                NormArg::Squared => RegNorm::Squared,
            },
            include_output: a.reg_include_output,
        },
        ..Default::default()
    };
    let mut outputs = Vec::new();
    let mut state = TrainState::new(&store);
    let log = postshare_train(&mut state, &cfg, &plan, &corpus, &pscfg, |s| {
        let path = sibling(&a.out, &format!(".step{}.hws", s.step));
        save_store(&s.weights, &path)?;
        outputs.push(path);
        Ok(())
    })?;
    let loss_path = sibling(&a.out, ".loss.csv");
    let plan_path = sibling(&a.out, ".plan.json");
    save(&state.weights, &a.out)?;
    write_csv(&loss_path, &log)?;
    write_json(&plan_path, &plan)?;
    outputs.extend([a.out.clone(), loss_path, plan_path]);
    Ok((inputs, outputs, sibling(&a.out, ".manifest.json")))
}

#[derive(Serialize)]
struct TraceRow {
    sequence: usize,
    layer: usize,
    head: usize,
    row: usize,
    col: usize,
    weight: f64,
}

fn trace(a: &TraceArgs) -> Result<RunFiles> {
    let (store, cfg) = load_model(&a.model, false)?;
    let seqs = load_sequences(&a.inputs, &cfg)?;
    let picked: Vec<usize> = if a.index.is_empty() { (0..seqs.len()).collect() } else { a.index.clone() };
    let w = engine::Weights::from_store(&store, &cfg)?;
    let mut rows = Vec::new();
    for &i in &picked {
        let seq = seqs.get(i).ok_or_else(|| {
            headshare_core::Error::InvalidArgument(format!("sequence index {i} out of range ({} sequences)", seqs.len()))
        })?;
        let t = engine::forward_with(&w, seq)?;
        for h in HeadRef::all(&cfg) {
            for ((row, col), &weight) in t.attention_map(h).indexed_iter() {
                rows.push(TraceRow { sequence: i, layer: h.layer, head: h.head, row, col, weight });
            }
        }
    }
    write_csv(&a.out, rows)?;
    Ok((vec![a.model.clone(), a.inputs.clone()], vec![a.out.clone()], sibling(&a.out, ".manifest.json")))
}

#[derive(Serialize)]
struct DegreeRow {
    set: &'static str,
    keep_layer: usize,
    keep_head: usize,
    replace_layer: usize,
    replace_head: usize,
    score: f64,
    in_both: bool,
}

fn degree(a: &DegreeArgs) -> Result<RunFiles> {
    let (store, cfg) = load_model(&a.model, false)?;
    let seqs = load_sequences(&a.inputs, &cfg)?;
    let r = matched_degree(&store, &cfg, &seqs, a.ratio, a.match_function)?;
    let key = |c: &headshare_core::sharing::Candidate| (c.best, c.this);
    let in_weight: Vec<_> = r.set_weight.iter().map(key).collect();
    let in_attn: Vec<_> = r.set_attn.iter().map(key).collect();
    let rows = r
        .set_weight
        .iter()
        .map(|c| ("weight", c, in_attn.contains(&key(c))))
        .chain(r.set_attn.iter().map(|c| ("attention", c, in_weight.contains(&key(c)))))
        .map(|(set, c, in_both)| DegreeRow {
            set,
            keep_layer: c.best.layer,
            keep_head: c.best.head,
            replace_layer: c.this.layer,
            replace_head: c.this.head,
            score: c.score,
            in_both,
        });
    let json_path = sibling(&a.out, ".json");
    write_csv(&a.out, rows)?;
    write_json(&json_path, &r)?;
    println!(
        "k={} intersection={} overlap_ratio={} raw_degree={}",
        r.k, r.intersection, r.overlap_ratio, r.raw_degree
    );
    Ok((vec![a.model.clone(), a.inputs.clone()], vec![a.out.clone(), json_path], sibling(&a.out, ".manifest.json")))
}

#[derive(Serialize)]
struct LayerRow {
    layer_i: usize,
    layer_j: usize,
    score: f64,
}

fn heatmap(a: &HeatmapArgs) -> Result<RunFiles> {
    let (store, cfg) = load_model(&a.model, false)?;
    let seqs = load_sequences(&a.inputs, &cfg)?;
    let layers = layer_similarity_matrix(&store, &cfg, &seqs)?;
    let heads = head_similarity_matrix(&store, &cfg, &seqs)?;
    let h = cfg.heads_per_layer;
    let layer_path = with_suffix(&a.out, ".layers.csv");
    let head_path = with_suffix(&a.out, ".heads.csv");
    write_csv(
        &layer_path,
        layers.indexed_iter().map(|((i, j), &score)| LayerRow { layer_i: i, layer_j: j, score }),
    )?;
    write_csv(
        &head_path,
        heads
            .indexed_iter()
            .map(|((i, j), &score)| pair_row(HeadRef::new(i / h, i % h), HeadRef::new(j / h, j % h), score)),
    )?;
    Ok((
        vec![a.model.clone(), a.inputs.clone()],
        vec![layer_path, head_path],
        with_suffix(&a.out, ".manifest.json"),
    ))
}

#[derive(Serialize)]
struct ReportOut {
    config: ModelConfig,
    head_pairs: usize,
    ffn_layers: usize,
    #[serde(flatten)]
    report: MemoryReport,
    note: &'static str,
}

fn report(a: &ReportArgs) -> Result<RunFiles> {
    let mut inputs = Vec::new();
    let (cfg, default_base) = match (a.preset, &a.model) {
        (Some(Preset::Llama2_7b), _) => (ModelConfig::llama2_7b(), 6_740_000_000),
        (Some(Preset::Llama2_13b), _) => (ModelConfig::llama2_13b(), 13_020_000_000),
        (None, Some(m)) => {
            inputs.push(m.clone());
            let (store, cfg) = load_model(m, true)?;
            (cfg, store.iter().map(|(_, t)| t.len() as u64).sum())
        }
        (None, None) => unreachable!("clap requires --preset or --model"),
    };
    let base = a.base_total.unwrap_or(default_base);
    let (head_pairs, ffn_layers, report) = match &a.plan {
        Some(p) => {
            inputs.push(p.clone());
            let plan: SharePlan = read_json(p)?;
            (plan.pairs.len(), plan.ffn_layers.len(), memory_report(&cfg, &plan, base)?)
        }
        None => {
            let ratio = a.ratio.unwrap_or(0.0);
            let pairs = target_pairs(&cfg, ratio).min(cfg.total_heads() - cfg.heads_per_layer);
            let ffn = a
                .ffn_ratio
                .map(|r| ((r * cfg.num_layers as f64).round() as usize).min(cfg.num_layers.saturating_sub(1)))
                .unwrap_or(0);
            (pairs, ffn, memory_report_for_counts(&cfg, pairs, ffn, base)?)
        }
    };
    println!(
        "config        L={} H={} D={} d={} F={}",
        cfg.num_layers, cfg.heads_per_layer, cfg.embed_dim, cfg.head_dim_q, cfg.ffn_dim
    );
    println!("base params   {}", report.total_params);
    println!("head pairs    {head_pairs} (saves {})", report.per_block.mha_saved);
    println!("ffn layers    {ffn_layers} (saves {})", report.per_block.ffn_saved);
    println!("effective     {}", report.effective_params);
    println!("ratio         {:.2}%", 100.0 * report.ratio_vs_base);
    println!("note: {MEMORY_NOTE}");
    write_json(&a.out, &ReportOut { config: cfg, head_pairs, ffn_layers, report, note: MEMORY_NOTE })?;
    Ok((inputs, vec![a.out.clone()], sibling(&a.out, ".manifest.json")))
}
