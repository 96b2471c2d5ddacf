use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use persona_probe::activations::{collect, default_instructions, read_shard, write_shard, Position};
use persona_probe::chat::Decoding;
use persona_probe::directions::{alignment, fit_all, DirectionSet, FitOptions, Method, Solver};
use persona_probe::oracle::{generate_dataset, PlantedModel, ScoreSampling, ToyConfig, ToyProvider};
use persona_probe::persona::http::OpenAiCompatProvider;
use persona_probe::persona::{annotate_corpus, default_roster, read_corpus, read_roster_tsv, AnnotateOptions, CompletionProvider};
use persona_probe::probes::{adjective_sweep, default_adjectives, read_adjectives, write_roc_csv, RocResult, SweepOptions};
use persona_probe::steering::{alpha_sweep, linear_grid, validate_grid, ForcedChoiceTask, SteeringEntry, SteeringSpec};
use persona_probe::{ActivationBackend, TokenPolicy, Trait};
use serde::Deserialize;
use serde_json::json;

use crate::backend::{input, output, BackendArgs};
use crate::failure::{CliResult, Failure};
use crate::service;

pub const ROC_SCHEMA_VERSION: &str = "persona-probe/roc/1";

#[derive(Debug, Parser)]
#[command(name = "persona-probe", version, about = "Big Five trait directions: collect, fit, probe and steer")]
pub struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Annotate characters with the 50-item questionnaire.
    GenerateCharacters(GenerateCharacters),
    /// Capture hidden states for every (character, instruction) pair.
    Collect(Collect),
    /// Fit per-layer trait directions from an activation shard.
    Fit(Fit),
    /// ROC of trait-adjective prompts projected onto fitted directions.
    EvalAdjectives(EvalAdjectives),
    /// Forced-choice steering sweep over alpha.
    Sweep(Sweep),
    /// Write a planted synthetic shard, a toy corpus and a toy model config.
    Oracle(Oracle),
    /// Serve directions and steered generation over HTTP.
    Serve(Serve),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    /// OpenAI-compatible endpoint from PROVIDER_BASE_URL / PROVIDER_API_KEY.
    Http,
    /// Deterministic offline provider.
    Toy,
}

#[derive(Debug, Args)]
pub struct GenerateCharacters {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "http")]
    pub provider: ProviderKind,
    /// Model name sent to the HTTP provider.
    #[arg(long)]
    pub model: Option<String>,
    /// Provider without system-role support: fold the system text into the user turn.
    #[arg(long)]
    pub no_system_role: bool,
    /// `name<TAB>franchise` file; defaults to the bundled 406-character roster.
    #[arg(long)]
    pub roster: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub retries: usize,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, default_value_t = 256)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Collect {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output shard directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Instruction ids to use (default: all).
    #[arg(long, value_delimiter = ',')]
    pub instructions: Option<Vec<u32>>,
    /// One instruction per line, replacing the bundled set.
    #[arg(long)]
    pub instructions_file: Option<PathBuf>,
    /// Only the first N characters of the corpus.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Fit {
    #[arg(long)]
    pub shard: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "regression")]
    pub method: Method,
    /// gavish-donoho, min-norm or ridge=LAMBDA.
    #[arg(long, default_value = "gavish-donoho", value_parser = parse_solver)]
    pub solver: Solver,
    #[arg(long, value_delimiter = ',')]
    pub traits: Option<Vec<Trait>>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    pub positions: Option<Vec<Position>>,
    /// SVD axes kept per (trait, layer, position).
    #[arg(long, default_value_t = 1)]
    pub svd_k: usize,
    /// Also fit each instruction on its own.
    #[arg(long)]
    pub per_instruction: bool,
    /// Write pairwise cosines of the fitted directions here.
    #[arg(long)]
    pub alignment: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalAdjectives {
    #[arg(long)]
    pub directions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Adjective lists (JSON); defaults to the bundled lists.
    #[arg(long)]
    pub adjectives: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub traits: Option<Vec<Trait>>,
    /// Position of the fitted directions to project onto.
    #[arg(long, default_value = "last_input_token")]
    pub position: Position,
    #[arg(long, default_value = "regression")]
    pub method: Method,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    pub instructions: Option<Vec<u32>>,
    #[arg(long)]
    pub include_bias: bool,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[arg(long)]
    pub directions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long = "trait", default_value = "EXT")]
    pub trait_: Trait,
    /// Forced-choice statements (JSON `{trait, positive, negative}`); the
    /// bundled extraversion set is used otherwise.
    #[arg(long)]
    pub statements: Option<PathBuf>,
    /// Explicit alpha grid.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with_all = ["grid_min", "grid_max", "steps"])]
    pub grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = -0.4, allow_negative_numbers = true)]
    pub grid_min: f64,
    #[arg(long, default_value_t = 0.4, allow_negative_numbers = true)]
    pub grid_max: f64,
    #[arg(long, default_value_t = 9)]
    pub steps: usize,
    /// Largest allowed |alpha|.
    #[arg(long, default_value_t = persona_probe::steering::DEFAULT_ALPHA_MAX)]
    pub alpha_max: f64,
    #[arg(long)]
    pub allow_unsafe_alpha: bool,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Persona text placed in the system prompt.
    #[arg(long, conflicts_with = "persona_character")]
    pub persona: Option<String>,
    /// Use this corpus character's self-description as the persona.
    #[arg(long, requires = "corpus")]
    pub persona_character: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "mean_input")]
    pub position: Position,
    #[arg(long, default_value = "regression")]
    pub method: Method,
    #[arg(long, default_value = "last-input-only", value_parser = parse_policy)]
    pub token_policy: TokenPolicy,
    /// Steer with unit-norm directions.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<u32>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = 128)]
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sampling {
    Uniform,
    Likert,
}

#[derive(Debug, Args)]
pub struct Oracle {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub traits: usize,
    #[arg(long, default_value_t = 406)]
    pub characters: usize,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    /// Planted-shard noise.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add a distractor direction with this variance relative to the scores.
    #[arg(long)]
    pub distractor: Option<f64>,
    #[arg(long, value_enum, default_value = "uniform")]
    pub sampling: Sampling,
    /// Characters annotated by the toy provider (default: --characters, at
    /// most the roster size).
    #[arg(long)]
    pub corpus_characters: Option<usize>,
    /// Noise of the toy model written to toy.json.
    #[arg(long, default_value_t = 0.0)]
    pub toy_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub persona_gain: f64,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long)]
    pub directions: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = persona_probe::steering::DEFAULT_ALPHA_MAX)]
    pub alpha_max: f64,
    /// Waiting generation requests beyond this get 429.
    #[arg(long, default_value_t = 32)]
    pub queue_capacity: usize,
    #[arg(long, default_value_t = 128)]
    pub max_tokens: usize,
}

fn parse_solver(s: &str) -> Result<Solver, String> {
    s.parse().map_err(|e: persona_probe::Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<TokenPolicy, String> {
    match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
        "last-input-only" | "last-input" => Ok(TokenPolicy::LastInputOnly),
        "every-generated-token" | "every-token" => Ok(TokenPolicy::EveryGeneratedToken),
        other => Err(format!("unknown token policy `{other}` (last-input-only, every-generated-token)")),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    let p = output(path)?;
    File::create(&p)
        .map(BufWriter::new)
        .map_err(|e| Failure::runtime("IO_ERROR", format!("{}: {e}", p.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn report(value: serde_json::Value) {
    println!("{value}");
}

pub async fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenerateCharacters(a) => blocking(move || generate_characters(a)).await,
        Command::Collect(a) => blocking(move || collect_cmd(a)).await,
        Command::Fit(a) => blocking(move || fit(a)).await,
        Command::EvalAdjectives(a) => blocking(move || eval_adjectives(a)).await,
        Command::Sweep(a) => blocking(move || sweep(a)).await,
        Command::Oracle(a) => blocking(move || oracle(a)).await,
        Command::Serve(a) => serve(a).await,
    }
}

async fn blocking(f: impl FnOnce() -> CliResult<()> + Send + 'static) -> CliResult<()> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure::runtime("INTERNAL", e.to_string()))?
}

fn generate_characters(a: GenerateCharacters) -> CliResult<()> {
    let mut roster = match &a.roster {
        Some(p) => read_roster_tsv(BufReader::new(File::open(input(p)?)?))?,
        None => default_roster(),
    };
    if let Some(n) = a.limit {
        roster.truncate(n);
    }
    let provider: Box<dyn CompletionProvider> = match a.provider {
        ProviderKind::Toy => Box::new(ToyProvider::new(a.seed)),
        ProviderKind::Http => {
            let model = a
                .model
                .clone()
                .ok_or_else(|| Failure::usage("MISSING_MODEL", "--provider http needs --model"))?;
            let p = OpenAiCompatProvider::from_env(model).map_err(|e| Failure::usage(e.code(), e.to_string()))?;
            Box::new(p.with_system_role(!a.no_system_role))
        }
    };
    let opts = AnnotateOptions {
        retries: a.retries,
        decoding: Decoding {
            max_tokens: a.max_tokens,
            temperature: a.temperature,
            seed: a.seed,
        },
    };
    let mut out = create(&a.out)?;
    let summary = annotate_corpus(&roster, provider.as_ref(), &opts, a.workers, &mut out)?;
    out.flush()?;
    for (id, e) in &summary.rejected {
        log::warn!("rejected {id}: {e}");
    }
    if summary.written == 0 {
        return Err(Failure::runtime("EMPTY_CORPUS", "no character produced a complete profile"));
    }
    report(json!({
        "corpus": a.out,
        "written": summary.written,
        "rejected": summary.rejected.iter().map(|(id, e)| json!({"id": id, "code": e.code()})).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn instruction_set(file: Option<&PathBuf>) -> CliResult<Vec<String>> {
    match file {
        Some(p) => {
            let text = std::fs::read_to_string(input(p)?)?;
            let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if lines.is_empty() {
                return Err(Failure::usage("INVALID_ARGUMENT", "instructions file is empty"));
            }
            Ok(lines)
        }
        None => Ok(default_instructions().to_vec()),
    }
}

fn instruction_ids(ids: Option<&Vec<u32>>, available: usize) -> CliResult<Vec<u32>> {
    let ids = ids.cloned().unwrap_or_else(|| (0..available as u32).collect());
    if let Some(bad) = ids.iter().find(|&&i| i as usize >= available) {
        return Err(Failure::usage("INVALID_ARGUMENT", format!("instruction {bad} out of range (have {available})")));
    }
    Ok(ids)
}

fn collect_cmd(a: Collect) -> CliResult<()> {
    let corpus = input(&a.corpus)?;
    let instructions = instruction_set(a.instructions_file.as_ref())?;
    let ids = instruction_ids(a.instructions.as_ref(), instructions.len())?;
    let loaded = a.backend.load()?;
    let mut profiles = read_corpus(&corpus)?;
    if let Some(n) = a.limit {
        profiles.truncate(n);
    }
    let decoding = Decoding {
        max_tokens: a.max_tokens,
        temperature: a.temperature,
        seed: a.seed,
    };
    let b = &loaded.backend;
    log::info!("collecting {} characters x {} instructions on {}", profiles.len(), ids.len(), b.model_id());
    let records = collect(b.as_ref(), &profiles, &ids, &instructions, &decoding)?;
    let out = output(&a.out)?;
    let manifest = write_shard(&out, b.model_id(), b.layer_count(), b.hidden_dim(), &records)?;
    report(json!({"shard": out, "manifest": manifest}));
    Ok(())
}

fn fit(a: Fit) -> CliResult<()> {
    let shard = read_shard(&input(&a.shard)?)?;
    let defaults = FitOptions::default();
    let opts = FitOptions {
        traits: a.traits.clone().unwrap_or(defaults.traits),
        layers: a.layers.clone(),
        positions: a.positions.clone().unwrap_or(defaults.positions),
        method: a.method,
        solver: a.solver,
        svd_k: a.svd_k,
        per_instruction: a.per_instruction,
    };
    if opts.svd_k == 0 {
        return Err(Failure::usage("INVALID_ARGUMENT", "--svd-k must be at least 1"));
    }
    let set = fit_all(&shard.records, &shard.manifest.model_id, &opts)?;
    if set.entries.is_empty() {
        return Err(Failure::runtime("EMPTY_INPUT", "no (trait, layer, position) had records to fit"));
    }
    let out = output(&a.out)?;
    set.save(&out)?;
    if let Some(p) = &a.alignment {
        write_json(p, &alignment(&set.entries)?)?;
    }
    report(json!({
        "directions": out,
        "model_id": set.model_id,
        "entries": set.entries.len(),
        "min_r2_grouped": set.entries.iter().map(|e| e.fit.r2_grouped).fold(f64::INFINITY, f64::min),
    }));
    Ok(())
}

fn check_backend_matches(b: &dyn ActivationBackend, set: &DirectionSet) -> CliResult<()> {
    if b.model_id() != set.model_id {
        return Err(persona_probe::Error::ModelMismatch {
            directions: set.model_id.clone(),
            backend: b.model_id().to_string(),
        }
        .into());
    }
    Ok(())
}

fn eval_adjectives(a: EvalAdjectives) -> CliResult<()> {
    let set = DirectionSet::load(&input(&a.directions)?)?;
    let adjectives = match &a.adjectives {
        Some(p) => read_adjectives(&input(p)?)?,
        None => default_adjectives(),
    };
    let instructions = default_instructions();
    let ids = instruction_ids(a.instructions.as_ref(), instructions.len())?;
    let chosen: Vec<String> = ids.iter().map(|&i| instructions[i as usize].clone()).collect();
    let loaded = a.backend.load()?;
    check_backend_matches(loaded.backend.as_ref(), &set)?;
    let opts = SweepOptions {
        direction_position: a.position,
        method: a.method,
        layers: a.layers.clone(),
        include_bias: a.include_bias,
    };
    let traits = a.traits.clone().unwrap_or_else(|| Trait::ALL.to_vec());
    let mut results: Vec<RocResult> = Vec::new();
    for adj in adjectives.iter().filter(|s| traits.contains(&s.trait_)) {
        results.extend(adjective_sweep(loaded.backend.as_ref(), &set, adj, &chosen, &opts, &Decoding::default())?);
    }
    write_json(
        &a.out,
        &json!({"schema_version": ROC_SCHEMA_VERSION, "model_id": set.model_id, "results": results}),
    )?;
    if let Some(p) = &a.csv {
        let mut w = create(p)?;
        write_roc_csv(&mut w, &results)?;
        w.flush()?;
    }
    let per_trait: Vec<_> = traits
        .iter()
        .map(|t| {
            let aucs: Vec<f64> = results.iter().filter(|r| r.trait_ == *t).map(|r| r.roc.auc).collect();
            json!({
                "trait": t,
                "min_auc": aucs.iter().copied().fold(f64::INFINITY, f64::min),
                "max_auc": aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect();
    report(json!({"roc": a.out, "traits": per_trait}));
    Ok(())
}

#[derive(Deserialize)]
struct StatementFile {
    #[serde(rename = "trait")]
    trait_: Trait,
    positive: Vec<String>,
    negative: Vec<String>,
}

fn sweep(a: Sweep) -> CliResult<()> {
    let grid = match &a.grid {
        Some(g) => g.clone(),
        None => linear_grid(a.grid_min, a.grid_max, a.steps).map_err(|e| Failure::usage(e.code(), e.to_string()))?,
    };
    if a.alpha_max.is_nan() || a.alpha_max <= 0.0 {
        return Err(Failure::usage("INVALID_ARGUMENT", "--alpha-max must be positive"));
    }
    validate_grid(&grid, a.alpha_max, a.allow_unsafe_alpha).map_err(|e| Failure::usage(e.code(), e.to_string()))?;
    if a.repeats == 0 {
        return Err(Failure::usage("INVALID_ARGUMENT", "--repeats must be at least 1"));
    }

    let mut task = match &a.statements {
        Some(p) => {
            let f: StatementFile = serde_json::from_str(&std::fs::read_to_string(input(p)?)?)?;
            let pos: Vec<&str> = f.positive.iter().map(String::as_str).collect();
            let neg: Vec<&str> = f.negative.iter().map(String::as_str).collect();
            ForcedChoiceTask::new(f.trait_, &pos, &neg)?
        }
        None => ForcedChoiceTask::extraversion(),
    };
    if task.trait_ != a.trait_ {
        return Err(Failure::usage(
            "INVALID_ARGUMENT",
            format!("statements are for {}, sweep trait is {}; pass --statements", task.trait_, a.trait_),
        ));
    }
    task = task.with_seed(a.seed);
    if let Some(p) = &a.persona {
        task = task.with_persona(p.clone());
    }
    if let (Some(name), Some(corpus)) = (&a.persona_character, &a.corpus) {
        let profiles = read_corpus(&input(corpus)?)?;
        let p = profiles
            .iter()
            .find(|p| p.character.id == *name || p.character.name == *name)
            .ok_or_else(|| Failure::usage("INVALID_ARGUMENT", format!("character `{name}` is not in the corpus")))?;
        task = task.with_persona(p.description());
    }

    let set = DirectionSet::load(&input(&a.directions)?)?;
    let loaded = a.backend.load()?;
    check_backend_matches(loaded.backend.as_ref(), &set)?;
    let template = SteeringSpec {
        entries: vec![SteeringEntry {
            trait_: a.trait_,
            alpha: 0.0,
            layers: a.layers.clone(),
        }],
        token_policy: a.token_policy,
        position: a.position,
        method: a.method,
        normalize: a.normalize,
        alpha_max: a.alpha_max,
        allow_unsafe_alpha: a.allow_unsafe_alpha,
    };
    let decoding = Decoding {
        max_tokens: a.max_tokens,
        temperature: a.temperature,
        seed: a.seed,
    };
    let result = alpha_sweep(loaded.backend.as_ref(), &task, &set, &template, &grid, a.repeats, &decoding)?;
    write_json(&a.out, &result)?;
    if let Some(p) = &a.csv {
        let mut w = create(p)?;
        result.write_csv(&mut w)?;
        w.flush()?;
    }
    report(json!({
        "sweep": a.out,
        "alpha": result.grid,
        "fraction_positive": result.outcomes.iter().map(|o| o.fraction_positive).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn oracle(a: Oracle) -> CliResult<()> {
    let mut planted = PlantedModel::new(a.d, a.traits, a.sigma, a.seed).map_err(|e| Failure::usage(e.code(), e.to_string()))?;
    if let Some(r) = a.distractor {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Failure::usage("INVALID_ARGUMENT", "--distractor must be a finite ratio >= 0"));
        }
        planted = planted.with_distractor(r);
    }
    let sampling = match a.sampling {
        Sampling::Uniform => ScoreSampling::Uniform,
        Sampling::Likert => ScoreSampling::Likert,
    };
    let records = generate_dataset(&planted, a.characters, &sampling, a.layers).map_err(|e| Failure::usage(e.code(), e.to_string()))?;
    let out = output(&a.out)?;
    std::fs::create_dir_all(&out)?;
    let planted_id = format!("planted-d{}-t{}-seed{}", a.d, a.traits, a.seed);
    let shard_dir = out.join("planted");
    let manifest = write_shard(&shard_dir, &planted_id, a.layers, a.d, &records)?;
    write_json(&out.join("planted.json"), &planted)?;

    let roster = default_roster();
    let n = a.corpus_characters.unwrap_or(a.characters).min(roster.len());
    let provider = ToyProvider::new(a.seed);
    let mut corpus = create(&out.join("corpus.jsonl"))?;
    let summary = annotate_corpus(&roster[..n], &provider, &AnnotateOptions::default(), 4, &mut corpus)?;
    corpus.flush()?;

    let toy = ToyConfig {
        d: a.d,
        layers: a.layers,
        sigma: a.toy_sigma,
        persona_gain: a.persona_gain,
        seed: a.seed,
        ..ToyConfig::default()
    };
    persona_probe::oracle::ToyBackend::new(toy.clone()).map_err(|e| Failure::usage(e.code(), e.to_string()))?;
    write_json(&out.join("toy.json"), &toy)?;
    report(json!({
        "shard": shard_dir,
        "rows": manifest.row_count,
        "model_id": planted_id,
        "corpus": out.join("corpus.jsonl"),
        "profiles": summary.written,
        "toy_config": out.join("toy.json"),
    }));
    Ok(())
}

async fn serve(a: Serve) -> CliResult<()> {
    if !(a.alpha_max > 0.0 && a.alpha_max.is_finite()) {
        return Err(Failure::usage("INVALID_ARGUMENT", "--alpha-max must be positive"));
    }
    let path = input(&a.directions)?;
    let backend_args = a.backend.clone();
    let (set, loaded) = blocking_value(move || Ok((DirectionSet::load(&path)?, backend_args.load()?))).await?;
    check_backend_matches(loaded.backend.as_ref(), &set)?;
    let state = service::AppState::new(
        loaded.backend,
        Arc::new(set),
        service::ServiceConfig {
            alpha_max: a.alpha_max,
            queue_capacity: a.queue_capacity,
            max_tokens: a.max_tokens,
            inline_sweeps: loaded.is_toy,
        },
    );
    let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
        .await
        .map_err(|e| Failure::runtime("BIND_FAILED", format!("{}:{}: {e}", a.host, a.port)))?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    service::serve(listener, state, service::shutdown_signal()).await?;
    Ok(())
}

async fn blocking_value<T: Send + 'static>(f: impl FnOnce() -> CliResult<T> + Send + 'static) -> CliResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure::runtime("INTERNAL", e.to_string()))?
}
