//! Command-line front end. Every run resolves one JSON configuration (file,
//! then `--set` overrides), executes a single command and writes its outputs
//! plus a `manifest.json` into the output directory.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{build_report, residualize_trace, write_report, BinConfig};
use crate::codec::{CodecParams, CodecVariant};
use crate::container::{load_codec, save_codec};
use crate::controller::{compute_budget_ratios, BudgetInputs, Engine, EngineConfig};
use crate::corpus::MarkovCorpus;
use crate::error::{Error, Result};
use crate::model::{dense_forward, init_model, KvTrace};
use crate::reference::ReferenceSet;
use crate::tensor::{Matrix, Precision, Real};
use crate::train::{train, write_loss_csv, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "deltakv", version, about = "Residual KV-cache compression toolkit")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; a random seed is drawn and recorded when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub output_dir: PathBuf,
    /// Override a configuration value by dotted path, e.g. `engine.controller.budget=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Residualization statistics of a toy-model KV trace.
    Analyze {
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Train a codec against the frozen toy model.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Greedy generation through the sparse engine.
    Generate(GenerateArgs),
    /// Memory audit of a prefilled request.
    Audit {
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Relative time shares of compression, reconstruction and attention.
    Bench {
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Keep and compute ratios for a layer layout.
    Ratios(RatiosArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub new_tokens: Option<usize>,
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Use the identity-linear codec.
    #[arg(long)]
    pub identity_codec: bool,
    #[arg(long)]
    pub budget: Option<f64>,
    /// Codec checkpoint to load.
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// Compare every step's logits with a dense forward pass.
    #[arg(long)]
    pub compare_dense: bool,
}

#[derive(Debug, Args)]
pub struct RatiosArgs {
    #[arg(long)]
    pub l_full: usize,
    #[arg(long)]
    pub l_total: usize,
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    /// `d_c / 2d_k`.
    #[arg(long, default_value_t = 0.25)]
    pub dc_ratio: f64,
    /// Byte shrink of quantized latents.
    #[arg(long, default_value_t = 1.0)]
    pub q: f64,
    #[arg(long, default_value_t = 0.3)]
    pub budget: f64,
}

/// Everything a run can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub train: TrainConfig,
    pub analysis: BinConfig,
    pub corpus_branching: usize,
    pub prompt_len: usize,
    pub new_tokens: usize,
    pub chunk: usize,
    /// Dense logit deviation accepted by `generate --compare-dense`.
    pub compare_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            train: TrainConfig::default(),
            analysis: BinConfig::default(),
            corpus_branching: 4,
            prompt_len: 64,
            new_tokens: 64,
            chunk: 16,
            compare_tolerance: 1e-5,
        }
    }
}

/// Sets `path` (dot separated) in a JSON object; the value is parsed as JSON
/// and falls back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` lacks `=`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("`{key}` descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config("empty override key".into()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Reads the config file (if any), applies overrides and validates the
/// result against the schema.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => serde_json::to_value(RunConfig::default())?,
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)?;
    cfg.engine.model.validate()?;
    cfg.engine.controller.validate(cfg.engine.model.n_layers)?;
    Ok(cfg)
}

struct Outcome {
    files: Vec<PathBuf>,
    summary: Value,
    success: bool,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn sample_tokens(cfg: &RunConfig, seed: u64, len: usize) -> Result<Vec<u32>> {
    let mut corpus = MarkovCorpus::new(cfg.engine.model.vocab, cfg.corpus_branching, len, seed)?;
    Ok(corpus.next().expect("infinite corpus"))
}

fn cmd_analyze<T: Real>(cfg: &RunConfig, seed: u64, out: &Path, tokens: Option<usize>) -> Result<Outcome> {
    let n = tokens.unwrap_or(cfg.prompt_len.max(64));
    let model = init_model::<T>(&cfg.engine.model, cfg.engine.model_seed)?;
    let codec = CodecParams::<T>::init(&cfg.engine.codec_config(), cfg.engine.codec_seed)?;
    let seq = sample_tokens(cfg, seed, n)?;
    let (_, trace) = dense_forward(&model, &seq)?;
    let bins = &cfg.analysis;
    let residual = residualize_trace(&trace, bins.stride, bins.k_refs)?;
    let latent = latent_trace(&trace, &codec, bins.stride, bins.k_refs)?;
    let report = build_report(&trace, &residual, Some(&latent), bins)?;
    let files = write_report(&report, out)?;
    let mean_norm = |t: &KvTrace<T>| -> Result<f64> { Ok(crate::analysis::norm_stats(&crate::analysis::stack(t)?).mean) };
    Ok(Outcome {
        files,
        summary: serde_json::json!({
            "tokens": n,
            "mean_norm_original": mean_norm(&trace)?,
            "mean_norm_residual": mean_norm(&residual)?,
            "flatness_original": report.flatness_original,
            "flatness_residual": report.flatness_residual,
        }),
        success: true,
    })
}

/// Latent codes of every token of every layer, with raw strided references.
fn latent_trace<T: Real>(trace: &KvTrace<T>, codec: &CodecParams<T>, stride: usize, k: usize) -> Result<Matrix<T>> {
    let mut rows = Vec::new();
    for m in &trace.layers {
        let mut refs = ReferenceSet::new(stride, m.cols())?;
        for i in 0..m.rows() {
            let bar = refs.mean_reference(&refs.topk(m.row(i), k, i))?;
            rows.push(codec.compress(m.row(i), &bar)?);
            refs.maybe_append(i, m.row(i))?;
        }
    }
    Matrix::from_rows(&rows)
}

fn cmd_train<T: Real>(cfg: &RunConfig, seed: u64, out: &Path, steps: Option<usize>) -> Result<Outcome> {
    let mut tc = cfg.train.clone();
    if let Some(s) = steps {
        tc.total_steps = s;
    }
    tc.seed = seed;
    tc.delta.filter_layers = cfg.engine.controller.filter_layers.clone();
    let model = init_model::<T>(&cfg.engine.model, cfg.engine.model_seed)?;
    let codec = CodecParams::<T>::init(&cfg.engine.codec_config(), cfg.engine.codec_seed)?;
    let before = model.checksum();
    let mut corpus = MarkovCorpus::new(cfg.engine.model.vocab, cfg.corpus_branching, tc.seq_len + 1, seed)?;
    let outcome = train(&model, &codec, &mut corpus, &tc)?;
    if model.checksum() != before {
        return Err(Error::Numerical("model parameters changed during training".into()));
    }
    let ckpt = out.join("codec.dkv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&ckpt)?);
    save_codec(&mut f, &outcome.codec, cfg.engine.codec_seed)?;
    drop(f);
    let csv = out.join("loss.csv");
    let mut buf = Vec::new();
    write_loss_csv(&outcome.history, &mut buf)?;
    std::fs::write(&csv, buf)?;
    let mean = |r: &[crate::train::LossRecord]| if r.is_empty() { 0.0 } else { r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64 };
    let h = &outcome.history;
    let w = h.len().min(50);
    Ok(Outcome {
        files: vec![ckpt, csv],
        summary: serde_json::json!({
            "steps": h.len(),
            "initial_mean_total": mean(&h[..w]),
            "final_mean_total": mean(&h[h.len() - w..]),
            "model_checksum": before,
            "fd_max_rel_error": outcome.fd_max_rel_error,
        }),
        success: true,
    })
}

fn build_engine<T: Real>(cfg: &RunConfig, args: Option<&GenerateArgs>) -> Result<(Engine<T>, Option<PathBuf>)> {
    let mut ec = cfg.engine.clone();
    let mut ckpt = None;
    if let Some(a) = args {
        if a.identity_codec {
            ec.controller.codec_variant = CodecVariant::IdentityLinear;
            ec.codec = None;
        }
        if let Some(b) = a.budget {
            ec.controller.budget = b;
        }
        ckpt = a.codec.clone();
    }
    ec.controller.validate(ec.model.n_layers)?;
    let model = init_model::<T>(&ec.model, ec.model_seed)?;
    let codec = match &ckpt {
        Some(p) => {
            let (c, _) = load_codec::<T>(&mut std::io::BufReader::new(std::fs::File::open(p)?))?;
            ec.codec = Some(c.config.clone());
            c
        }
        None => CodecParams::init(&ec.codec_config(), ec.codec_seed)?,
    };
    Ok((Engine::new(model, codec, ec.controller.clone(), ec.cache_config())?, ckpt))
}

fn cmd_generate<T: Real>(cfg: &RunConfig, seed: u64, out: &Path, args: &GenerateArgs) -> Result<Outcome> {
    let (mut engine, _) = build_engine::<T>(cfg, Some(args))?;
    let prompt = sample_tokens(cfg, seed, args.prompt_len.unwrap_or(cfg.prompt_len))?;
    let n_new = args.new_tokens.unwrap_or(cfg.new_tokens);
    let generation = engine.generate(&prompt, n_new, args.chunk.unwrap_or(cfg.chunk))?;
    let path = out.join("transcript.jsonl");
    let mut text = String::new();
    for r in &generation.records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&path, text)?;
    let mut summary = serde_json::json!({ "prompt_len": prompt.len(), "generated": generation.tokens });
    let mut success = true;
    if args.compare_dense {
        let dev = dense_deviation(&engine, &generation)?;
        success = dev < cfg.compare_tolerance;
        summary["max_logit_deviation"] = serde_json::json!(dev);
        summary["tolerance"] = serde_json::json!(cfg.compare_tolerance);
    }
    Ok(Outcome { files: vec![path], summary, success })
}

/// Largest absolute difference between each step's logits and the dense
/// model's logits at the same position.
pub fn dense_deviation<T: Real>(engine: &Engine<T>, g: &crate::controller::Generation<T>) -> Result<f64> {
    if g.tokens.is_empty() {
        return Ok(0.0);
    }
    let mut seq = g.prompt.clone();
    seq.extend_from_slice(&g.tokens[..g.tokens.len() - 1]);
    let (dense, _) = dense_forward(engine.model(), &seq)?;
    let base = g.prompt.len() - 1;
    let mut worst: f64 = 0.0;
    for (i, row) in g.logits.iter().enumerate() {
        for (a, b) in row.iter().zip(dense.row(base + i)) {
            worst = worst.max((a.f64() - b.f64()).abs());
        }
    }
    Ok(worst)
}

fn cmd_audit<T: Real>(cfg: &RunConfig, seed: u64, out: &Path, tokens: Option<usize>) -> Result<Outcome> {
    let (mut engine, _) = build_engine::<T>(cfg, None)?;
    let n = tokens.unwrap_or(cfg.engine.model.max_seq);
    let prompt = sample_tokens(cfg, seed, n)?;
    engine.prefill(&prompt, cfg.chunk)?;
    engine.cache().check_invariants()?;
    let audit = engine.cache().memory_audit(engine.request_id())?;
    let path = out.join("audit.json");
    write_json(&path, &audit)?;
    Ok(Outcome { files: vec![path], summary: serde_json::to_value(&audit)?, success: true })
}

fn cmd_bench<T: Real>(cfg: &RunConfig, seed: u64, out: &Path, tokens: Option<usize>) -> Result<Outcome> {
    let n = tokens.unwrap_or(cfg.engine.model.max_seq.min(256));
    let model = init_model::<T>(&cfg.engine.model, cfg.engine.model_seed)?;
    let codec = CodecParams::<T>::init(&cfg.engine.codec_config(), cfg.engine.codec_seed)?;
    let seq = sample_tokens(cfg, seed, n)?;
    let t0 = Instant::now();
    let (_, trace) = dense_forward(&model, &seq)?;
    let attention = t0.elapsed().as_secs_f64();
    let kv = trace.layers.last().ok_or_else(|| Error::Input("empty trace".into()))?;
    let mut refs = ReferenceSet::new(cfg.engine.controller.stride, kv.cols())?;
    let mut codes = Vec::with_capacity(n);
    let t1 = Instant::now();
    for i in 0..n {
        let entries = refs.topk(kv.row(i), cfg.engine.controller.k_refs, i);
        let bar = refs.mean_reference(&entries)?;
        codes.push((codec.compress(kv.row(i), &bar)?, bar));
        refs.maybe_append(i, kv.row(i))?;
    }
    let compression = t1.elapsed().as_secs_f64();
    let t2 = Instant::now();
    for (z, bar) in &codes {
        std::hint::black_box(codec.reconstruct(z, bar)?);
    }
    let reconstruction = t2.elapsed().as_secs_f64();
    let total = (attention + compression + reconstruction).max(f64::MIN_POSITIVE);
    let shares = serde_json::json!({
        "tokens": n,
        "share_dense_forward": attention / total,
        "share_compression": compression / total,
        "share_reconstruction": reconstruction / total,
    });
    let path = out.join("bench.json");
    write_json(&path, &shares)?;
    Ok(Outcome { files: vec![path], summary: shares, success: true })
}

fn cmd_ratios(out: &Path, a: &RatiosArgs) -> Result<Outcome> {
    let r = compute_budget_ratios(&BudgetInputs {
        l_full: a.l_full,
        l_total: a.l_total,
        stride: a.stride,
        latent_ratio: a.dc_ratio,
        q: a.q,
        budget: a.budget,
    })?;
    println!("KR={:.3} CR={:.3} r={}", r.kr, r.cr, r.budget);
    let path = out.join("ratios.json");
    write_json(&path, &r)?;
    Ok(Outcome { files: vec![path], summary: serde_json::to_value(r)?, success: true })
}

fn dispatch<T: Real>(cli: &Cli, cfg: &RunConfig, seed: u64) -> Result<Outcome> {
    let out = cli.output_dir.as_path();
    match &cli.command {
        Command::Analyze { tokens } => cmd_analyze::<T>(cfg, seed, out, *tokens),
        Command::Train { steps } => cmd_train::<T>(cfg, seed, out, *steps),
        Command::Generate(a) => cmd_generate::<T>(cfg, seed, out, a),
        Command::Audit { tokens } => cmd_audit::<T>(cfg, seed, out, *tokens),
        Command::Bench { tokens } => cmd_bench::<T>(cfg, seed, out, *tokens),
        Command::Ratios(a) => cmd_ratios(out, a),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Analyze { .. } => "analyze",
        Command::Train { .. } => "train",
        Command::Generate(_) => "generate",
        Command::Audit { .. } => "audit",
        Command::Bench { .. } => "bench",
        Command::Ratios(_) => "ratios",
    }
}

fn execute(cli: &Cli, cfg: &RunConfig, argv: &[String]) -> Result<bool> {
    let (seed, seed_source) = match cli.seed {
        Some(s) => (s, "argument"),
        None => (ChaCha8Rng::from_entropy().gen(), "generated"),
    };
    std::fs::create_dir_all(&cli.output_dir)?;
    let precision = Precision::from_env();
    let outcome = match precision {
        Precision::Standard => dispatch::<f32>(cli, cfg, seed)?,
        Precision::Verify => dispatch::<f64>(cli, cfg, seed)?,
    };
    let mut inputs = serde_json::Map::new();
    if let Some(p) = &cli.config {
        inputs.insert(p.display().to_string(), Value::String(sha256_file(p)?));
    }
    if let Command::Generate(GenerateArgs { codec: Some(p), .. }) = &cli.command {
        inputs.insert(p.display().to_string(), Value::String(sha256_file(p)?));
    }
    let manifest = serde_json::json!({
        "command": command_name(&cli.command),
        "argv": argv,
        "seed": seed,
        "seed_source": seed_source,
        "precision": if precision == Precision::Verify { "f64" } else { "f32" },
        "config": cfg,
        "versions": { "deltakv": env!("CARGO_PKG_VERSION") },
        "input_sha256": inputs,
        "outputs": outcome.files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>(),
        "summary": outcome.summary,
        "timestamp_unix": SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    });
    write_json(&cli.output_dir.join("manifest.json"), &manifest)?;
    if !matches!(cli.command, Command::Ratios(_)) {
        println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    }
    Ok(outcome.success)
}

/// Runs one command; returns 0 on success, 1 on usage or configuration
/// errors, 2 on runtime errors (including a failed dense comparison).
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve_config(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match execute(&cli, &cfg, &argv) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_paths() {
        let mut v = serde_json::json!({ "engine": { "controller": { "budget": 0.3 } } });
        apply_override(&mut v, "engine.controller.budget=0.5").unwrap();
        apply_override(&mut v, "engine.name=toy").unwrap();
        assert_eq!(v["engine"]["controller"]["budget"], 0.5);
        assert_eq!(v["engine"]["name"], "toy");
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(vec!["deltakv".into(), "frobnicate".into()]), 1);
        assert_eq!(run(vec!["deltakv".into(), "ratios".into(), "--bogus".into()]), 1);
        let argv = ["deltakv", "--set", "train.lr=1", "ratios", "--l-full", "1", "--l-total", "4"];
        assert_eq!(run(argv.iter().map(|s| s.to_string()).collect()), 1);
    }
}
