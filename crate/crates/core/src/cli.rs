//! Subcommands of the `pmlm` binary.
//!
//! Configuration is layered: built-in defaults, then an optional TOML file,
//! then `PMLM_<SECTION>__<KEY>` environment variables, then flags.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pmlm::encoder::ModelConfig;
use pmlm::evalkit::{
    self, all_pairs, compare_mlm_vs_pmlm, evaluate_contacts, finetune_contact, kl_histogram, median,
    precision_at_l5, random_baseline, read_contact_file, read_jsonl, scan_pair_kl, CompareConfig, ContactModel,
    ContactRecord, FinetuneConfig, FinetuneMode, PairScores, RangeFilter, Representation,
};
use pmlm::gradcheck::{self, GradCheckConfig};
use pmlm::masking::MaskingConfig;
use pmlm::seqio::{read_fasta_file, write_fasta, FastaOptions};
use pmlm::synthgen::{contacts_from_spec, sample_sequences, CoupledModelSpec, GibbsConfig, SamplerMode};
use pmlm::trainer::{self, config_hash, load_checkpoint, save_checkpoint, Dataset, RunOutputs, TrainConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const ENV_PREFIX: &str = "PMLM_";
/// Directory that relative data paths are resolved against.
const DATA_DIR_VAR: &str = "PMLM_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "pmlm", version, about = "Pairwise masked language model for protein sequences")]
pub struct Cli {
    /// Worker threads for parallel sections; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train an encoder with the combined token and pair objective.
    Pretrain(PretrainArgs),
    /// Sample sequences from a coupled model, with ground-truth contacts.
    GenSynth(GenSynthArgs),
    /// Per-pair KL between the product of marginals and the pair joint.
    AnalyzeKl(AnalyzeKlArgs),
    /// Train a contact head on a pre-trained encoder.
    FinetuneContact(FinetuneArgs),
    /// Precision of the top L/5 contact predictions.
    EvalContact(EvalContactArgs),
    /// Token-only vs. combined pre-training on synthetic data, per seed.
    Compare(CompareArgs),
    /// Central finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// TOML file with optional `data`, `[model]`, `[masking]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset used as the base before the file and flags apply.
    #[arg(long)]
    preset: Option<String>,
    /// FASTA training data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for `model.ckpt`, `metrics.jsonl` and `config.toml`.
    #[arg(long, default_value = "pmlm-run")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    validate_every: Option<u64>,
    /// Pair objective only, with diagonal pairs and no token head.
    #[arg(long)]
    pmlm_only: bool,
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    /// Named spec, e.g. `accept-L8`.
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// Spec in the plain-text coupled-model format.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `sequences.fasta`, `contacts.jsonl`, `spec.txt` and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
    /// Gibbs sampling instead of exact enumeration.
    #[arg(long)]
    gibbs: bool,
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 10)]
    thin: usize,
    #[arg(long, default_value_t = 1)]
    chains: usize,
}

#[derive(Args, Debug)]
struct AnalyzeKlArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// FASTA sequences to scan.
    #[arg(long)]
    data: PathBuf,
    /// `all`, or a comma-separated list such as `0-5,1-3`.
    #[arg(long, default_value = "all")]
    pairs: String,
    /// Coupled-model spec; when given, records are labelled coupled/uncoupled.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    max_sequences: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    bucket_width: f64,
    /// JSONL output of per-pair records.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Contact records (JSONL).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Probe)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = ReprArg::PairHead)]
    representation: ReprArg,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Probe,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReprArg {
    PairHead,
    Fallback,
}

#[derive(Args, Debug)]
struct EvalContactArgs {
    /// Contact records (JSONL) with the true maps.
    #[arg(long)]
    truth: PathBuf,
    /// Pair scores (JSONL of `{id, length, scores}`).
    #[arg(long, conflicts_with = "ckpt")]
    scores: Option<PathBuf>,
    /// Fine-tuned contact checkpoint to score the truth sequences with.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// `medium-long` (|i-j| ≥ 12), `all`, or a minimum separation.
    #[arg(long, default_value = "medium-long")]
    range: String,
    /// Require the separation to exceed the minimum instead of reaching it.
    #[arg(long)]
    strict: bool,
    /// Write the scores used (JSONL).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// TOML comparison settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "spec", default_value = "accept-L8")]
    preset: String,
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long)]
    steps: Option<u64>,
    /// JSONL output, one report per seed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Model preset name or TOML model config.
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long, default_value_t = 0.5)]
    mask_prob: f64,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

/// Resolved `pretrain` configuration.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    data: Option<PathBuf>,
    model: ModelConfig,
    masking: MaskingConfig,
    train: TrainConfig,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        log::warn!("thread pool: {e}");
    }
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::AnalyzeKl(a) => analyze_kl(a),
        Command::FinetuneContact(a) => finetune(a),
        Command::EvalContact(a) => eval_contact(a),
        Command::Compare(a) => compare(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_VAR) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

/// Set `dotted.key` inside a TOML table, creating intermediate tables.
fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().ok_or_else(|| anyhow!("empty key"))?;
    let mut t = root;
    for p in parts {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` in `{key}` is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A TOML scalar from an environment string; bare words become strings.
fn env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Defaults, then the file, then `PMLM_*` variables, then flag overrides.
fn layered<T: Serialize + serde::de::DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    flags: Vec<(&str, toml::Value)>,
) -> Result<T> {
    let mut table = toml::Table::try_from(defaults)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let over: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut table, over);
    }
    let mut env: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != DATA_DIR_VAR)
        .collect();
    env.sort();
    for (k, v) in env {
        let key = k[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
        set_path(&mut table, &key, env_value(&v))?;
    }
    for (k, v) in flags {
        set_path(&mut table, k, v)?;
    }
    T::deserialize(toml::Value::Table(table)).map_err(|e| anyhow!("invalid configuration: {e}"))
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn header_line(w: &mut impl Write, config_hash: &str, seed: u64) -> Result<()> {
    let h = serde_json::json!({ "kind": "header", "version": VERSION, "config_hash": config_hash, "seed": seed });
    writeln!(w, "{h}")?;
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<ExitCode> {
    let mut base = RunConfig::default();
    if let Some(p) = &a.preset {
        base.model = ModelConfig::preset(p).ok_or_else(|| anyhow!("unknown model preset `{p}`"))?;
    }
    let mut flags: Vec<(&str, toml::Value)> = Vec::new();
    let mut flag = |k, v: Option<toml::Value>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    let int = |v: Option<u64>| v.map(|x| toml::Value::Integer(x as i64));
    flag("data", a.data.as_ref().map(|p| toml::Value::String(p.display().to_string())));
    flag("train.total_steps", int(a.steps));
    flag("train.warmup_steps", int(a.warmup));
    flag("train.seed", int(a.seed));
    flag("train.batch_size", int(a.batch_size.map(|v| v as u64)));
    flag("train.validate_every", int(a.validate_every));
    flag("train.peak_lr", a.lr.map(toml::Value::Float));
    flag("model.lambda", a.lambda.map(toml::Value::Float));
    flag("model.max_len", int(a.max_len.map(|v| v as u64)));
    flag("masking.mask_prob", a.mask_prob.map(toml::Value::Float));
    if a.pmlm_only {
        flag("model.pmlm_only_with_diagonal", Some(toml::Value::Boolean(true)));
        flag("masking.include_diagonal", Some(toml::Value::Boolean(true)));
    }
    let cfg: RunConfig = layered(&base, a.config.as_deref(), flags)?;
    cfg.model.validate()?;
    cfg.masking.validate()?;
    cfg.train.validate()?;
    let data = cfg.data.as_deref().ok_or_else(|| anyhow!("no training data: pass --data or set `data`"))?;
    let data = data_path(data);
    let opts = FastaOptions {
        max_residues: Some(cfg.model.max_len.saturating_sub(2)),
        ..Default::default()
    };
    let parsed = read_fasta_file(&data, &opts).with_context(|| format!("reading {}", data.display()))?;
    log::info!(
        "{} sequences ({} truncated, {} skipped)",
        parsed.records.len(),
        parsed.truncated,
        parsed.skipped_empty + parsed.skipped_long
    );
    let dataset = Dataset::split(parsed.records, cfg.train.valid_fraction);

    fs::create_dir_all(&a.out)?;
    let hash = config_hash(&cfg.model, &cfg.masking, &cfg.train);
    let resolved = format!(
        "# version {VERSION}\n# config_hash {hash}\n# seed {}\n{}",
        cfg.train.seed,
        toml::to_string(&cfg)?
    );
    fs::write(a.out.join("config.toml"), resolved)?;
    let mut log = BufWriter::new(File::create(a.out.join("metrics.jsonl"))?);
    let ckpt = a.out.join("model.ckpt");
    let outcome = trainer::pretrain(
        &dataset,
        &cfg.model,
        &cfg.masking,
        &cfg.train,
        RunOutputs {
            log: Some(&mut log),
            checkpoint: Some(&ckpt),
        },
    );
    log.flush()?;
    let outcome = outcome.with_context(|| {
        if ckpt.exists() {
            format!("training aborted; last good checkpoint kept at {}", ckpt.display())
        } else {
            "training aborted".to_string()
        }
    })?;
    if let Some(last) = outcome.log.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    println!("checkpoint {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    version: &'a str,
    config_hash: String,
    seed: u64,
    n: usize,
    sampler: String,
    files: [&'a str; 3],
}

fn load_spec(preset: Option<&str>, path: Option<&Path>) -> Result<CoupledModelSpec> {
    match (preset, path) {
        (_, Some(p)) => {
            let p = data_path(p);
            CoupledModelSpec::read_file(&p).with_context(|| format!("reading spec {}", p.display()))
        }
        (Some(name), None) => CoupledModelSpec::preset(name).ok_or_else(|| anyhow!("unknown spec preset `{name}`")),
        (None, None) => bail!("pass --preset or --spec"),
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<ExitCode> {
    if a.n == 0 {
        bail!("n must be ≥ 1");
    }
    let spec = load_spec(a.preset.as_deref(), a.spec.as_deref())?;
    let mode = if a.gibbs {
        SamplerMode::Gibbs(GibbsConfig {
            burn_in_sweeps: a.burn_in,
            thin_sweeps: a.thin,
            chains: a.chains,
        })
    } else {
        SamplerMode::Exact
    };
    let seqs = sample_sequences(&spec, a.n, &mode, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let text = spec.to_text();
    let sampler = format!("{mode:?}");
    let hash = hex_sha256(format!("{text}\n{sampler}\n{}", a.n).as_bytes());

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("spec.txt"), &text)?;
    write_fasta(BufWriter::new(File::create(a.out.join("sequences.fasta"))?), &seqs)?;
    let truth = contacts_from_spec(&spec);
    let mut w = BufWriter::new(File::create(a.out.join("contacts.jsonl"))?);
    header_line(&mut w, &hash, a.seed)?;
    for s in &seqs {
        writeln!(w, "{}", serde_json::to_string(&ContactRecord::from_pair(s, &truth))?)?;
    }
    w.flush()?;
    let manifest = SynthManifest {
        version: VERSION,
        config_hash: hash,
        seed: a.seed,
        n: a.n,
        sampler,
        files: ["sequences.fasta", "contacts.jsonl", "spec.txt"],
    };
    fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_pairs(s: &str, length: usize) -> Result<Vec<(usize, usize)>> {
    if s == "all" {
        return Ok(all_pairs(length));
    }
    s.split(',')
        .map(|p| {
            let (i, j) = p.trim().split_once('-').ok_or_else(|| anyhow!("pair `{p}` is not `i-j`"))?;
            let (i, j): (usize, usize) = (i.parse()?, j.parse()?);
            if i == j || i >= length || j >= length {
                bail!("pair `{p}` invalid for length {length}");
            }
            Ok((i, j))
        })
        .collect()
}

fn load_model_checkpoint(path: &Path) -> Result<trainer::Checkpoint> {
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Serialize)]
struct KlOut<'a> {
    #[serde(flatten)]
    record: &'a evalkit::KlRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    coupled: Option<bool>,
}

fn analyze_kl(a: AnalyzeKlArgs) -> Result<ExitCode> {
    let ck = load_model_checkpoint(&a.ckpt)?;
    let data = data_path(&a.data);
    let opts = FastaOptions {
        max_residues: Some(ck.model.config.max_len - 2),
        ..Default::default()
    };
    let mut seqs = read_fasta_file(&data, &opts)?.records;
    if let Some(n) = a.max_sequences {
        seqs.truncate(n);
    }
    let spec = a.spec.as_deref().map(|p| load_spec(None, Some(p))).transpose()?;
    let coupled = spec.as_ref().map(|s| s.coupled_pairs());
    let hash = hex_sha256(format!("{}\n{}\n{}", a.ckpt.display(), data.display(), a.pairs).as_bytes());
    let mut out = a.out.as_ref().map(|p| File::create(p).map(BufWriter::new)).transpose()?;
    if let Some(w) = out.as_mut() {
        header_line(w, &hash, 0)?;
    }
    let (mut all, mut yes, mut no) = (Vec::new(), Vec::new(), Vec::new());
    for s in &seqs {
        let pairs = parse_pairs(&a.pairs, s.len())?;
        for r in scan_pair_kl(&ck.model, s, &pairs)? {
            let is_coupled = coupled.as_ref().map(|c| c.contains(&(r.i.min(r.j), r.i.max(r.j))));
            match is_coupled {
                Some(true) => yes.push(r.kl),
                Some(false) => no.push(r.kl),
                None => {}
            }
            all.push(r.kl);
            if let Some(w) = out.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&KlOut { record: &r, coupled: is_coupled })?)?;
            }
        }
    }
    if let Some(w) = out.as_mut() {
        w.flush()?;
    }
    println!("pairs {} median_kl {:.6}", all.len(), median(&all).unwrap_or(0.0));
    if coupled.is_some() {
        println!(
            "median_kl coupled {:.6} uncoupled {:.6}",
            median(&yes).unwrap_or(0.0),
            median(&no).unwrap_or(0.0)
        );
    }
    println!("bucket_low count");
    for (low, count) in kl_histogram(&all, a.bucket_width) {
        println!("{low:.3} {count}");
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize, Deserialize)]
struct ContactSidecar {
    version: String,
    representation: Representation,
    dropout: f64,
    seed: u64,
    config_hash: String,
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".contact.json");
    PathBuf::from(s)
}

fn finetune(a: FinetuneArgs) -> Result<ExitCode> {
    let ck = load_model_checkpoint(&a.ckpt)?;
    let labeled = read_contact_file(&data_path(&a.data))?;
    let cfg = FinetuneConfig {
        mode: match a.mode {
            ModeArg::Probe => FinetuneMode::Probe,
            ModeArg::Full => FinetuneMode::Full,
        },
        representation: match a.representation {
            ReprArg::PairHead => Representation::PairHead,
            ReprArg::Fallback => Representation::Fallback,
        },
        dropout: a.dropout,
        lr: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        ..Default::default()
    };
    let cm = finetune_contact(&ck.model, &labeled, &cfg)?;
    save_checkpoint(&cm.model, None, ck.masking.as_ref(), ck.train.as_ref(), &a.out)?;
    let side = ContactSidecar {
        version: VERSION.into(),
        representation: cm.representation,
        dropout: cm.dropout,
        seed: a.seed,
        config_hash: hex_sha256(serde_json::to_string(&cfg)?.as_bytes()),
    };
    fs::write(sidecar_path(&a.out), serde_json::to_string_pretty(&side)? + "\n")?;
    let (p, base) = evaluate_contacts(&cm, &labeled, RangeFilter::at_least(1))?;
    println!("training P@L/5 (all pairs) {p:.4} (random {base:.4})");
    println!("checkpoint {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_range(s: &str, strict: bool) -> Result<RangeFilter> {
    let min_separation = match s {
        "medium-long" => 12,
        "all" => 1,
        k => k
            .trim_start_matches("min:")
            .parse()
            .map_err(|_| anyhow!("range `{k}`: expected medium-long, all or a separation"))?,
    };
    Ok(RangeFilter {
        min_separation,
        strict,
    })
}

fn eval_contact(a: EvalContactArgs) -> Result<ExitCode> {
    let filter = parse_range(&a.range, a.strict)?;
    let truth = read_contact_file(&data_path(&a.truth))?;
    let truth_bytes = fs::read(data_path(&a.truth))?;
    let mut seed = None;
    let scores: Vec<PairScores> = match (&a.scores, &a.ckpt) {
        (Some(p), _) => read_jsonl(&data_path(p))?,
        (None, Some(c)) => {
            let side: ContactSidecar = serde_json::from_str(
                &fs::read_to_string(sidecar_path(c)).with_context(|| format!("contact metadata for {}", c.display()))?,
            )?;
            seed = Some(side.seed);
            let ck = load_model_checkpoint(c)?;
            let cm = ContactModel::from_parts(ck.model, side.representation, side.dropout)?;
            let seqs: Vec<_> = truth.iter().map(|(s, _)| s.clone()).collect();
            cm.predict(&seqs)?
        }
        (None, None) => bail!("pass --scores or --ckpt"),
    };
    let hash = hex_sha256(
        format!(
            "{}\n{}\n{}",
            hex_sha256(&truth_bytes),
            filter.min_separation,
            filter.strict
        )
        .as_bytes(),
    );
    if let Some(p) = &a.out {
        let mut w = BufWriter::new(File::create(p)?);
        header_line(&mut w, &hash, seed.unwrap_or(0))?;
        for s in &scores {
            writeln!(w, "{}", serde_json::to_string(s)?)?;
        }
        w.flush()?;
    }
    let by_id: std::collections::HashMap<&str, &PairScores> = scores.iter().map(|s| (s.id.as_str(), s)).collect();
    let (mut p, mut base) = (0.0, 0.0);
    for (seq, map) in &truth {
        let sc = by_id.get(seq.id.as_str()).ok_or_else(|| anyhow!("no scores for record {}", seq.id))?;
        p += precision_at_l5(sc, map, filter)?;
        base += random_baseline(map, filter)?;
    }
    let n = truth.len().max(1) as f64;
    let summary = serde_json::json!({
        "version": VERSION,
        "config_hash": hash,
        "seed": seed,
        "records": truth.len(),
        "min_separation": filter.min_separation,
        "strict": filter.strict,
        "precision_at_l5": p / n,
        "random_baseline": base / n,
    });
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn compare(a: CompareArgs) -> Result<ExitCode> {
    let spec = load_spec(Some(&a.preset), a.spec.as_deref())?;
    let mut flags = Vec::new();
    if let Some(s) = a.steps {
        flags.push(("train.total_steps", toml::Value::Integer(s as i64)));
    }
    let base: CompareConfig = layered(&CompareConfig::default(), a.config.as_deref(), flags)?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| anyhow!("bad seed `{s}`")))
        .collect::<Result<_>>()?;
    let mut out = a.out.as_ref().map(|p| File::create(p).map(BufWriter::new)).transpose()?;
    for seed in seeds {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let report = compare_mlm_vs_pmlm(&spec, &cfg)?;
        println!("seed {seed}\n{}", report.table());
        if let Some(w) = out.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&report)?)?;
        }
    }
    if let Some(w) = out.as_mut() {
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<ExitCode> {
    let model = match ModelConfig::preset(&a.config) {
        Some(m) => m,
        None => {
            let p = Path::new(&a.config);
            let text = fs::read_to_string(p).with_context(|| format!("`{}` is neither a preset nor a file", a.config))?;
            toml::from_str(&text).map_err(|e| anyhow!("invalid model config: {e}"))?
        }
    };
    let masking = MaskingConfig {
        mask_prob: a.mask_prob,
        ..Default::default()
    };
    let cfg = GradCheckConfig {
        seed: a.seed,
        ..Default::default()
    };
    let r = gradcheck::run(&model, &masking, &cfg)?;
    for p in &r.params {
        println!("{:<32} {:>8} {:>12.3e}", p.name, p.size, p.max_rel_error);
    }
    println!(
        "{} worst {} {:.3e} (tolerance {:.0e})",
        if r.passed { "PASS" } else { "FAIL" },
        r.worst_param,
        r.worst_rel_error,
        r.tolerance
    );
    Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
