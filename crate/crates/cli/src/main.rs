use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptkp_core::auxgen::{collect_pool, InterpolationPath};
use promptkp_core::corpus::{keypoint_text, load_dataset};
use promptkp_core::detector::write_pfm;
use promptkp_core::diverseprompt::{
    llm_parse, parsing_accuracy, synthesize_prompt_set, FallbackParser, Normalizer, ParseMode,
    ParsedPrompt, PromptRecord, TemplateBank,
};
use promptkp_core::harness::eval::split_ids;
use promptkp_core::harness::plot::overlay;
use promptkp_core::harness::prompting::{score_prompts, PromptContext};
use promptkp_core::harness::setup::{build_gateway, load_data};
use promptkp_core::harness::{evaluate, Checkpoint, KeypointSplit, RunConfig, Trainer};
use promptkp_core::llm::LlmMode;
use promptkp_core::model::{EvalMode, Model, Task};
use promptkp_core::synth::{write_benchmark, BenchmarkConfig};
use promptkp_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "promptkp",
    version,
    about = "Keypoint detection from visual and text prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Chat backend: live, record, replay or mock.
    #[arg(long)]
    llm_mode: Option<LlmMode>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.set)?;
        if let Some(m) = self.llm_mode {
            cfg.llm.mode = m;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset manifest, or render the synthetic benchmark.
    Ingest(IngestArgs),
    /// Train a detector and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint with PCK on held-out species.
    Eval(EvalArgs),
    /// Ask the chat backend for texts between keypoint pairs.
    InterpolateTexts(InterpolateArgs),
    /// Generate a diverse prompt set from the template bank.
    SynthPrompts(SynthArgs),
    /// Parse diverse prompts into keypoint and object names.
    Parse(ParseArgs),
    /// Compare parsed prompts with their ground truth.
    ScoreParsing(ScoreArgs),
    /// Write predicted heatmaps as PNG overlays and PFM grids.
    PlotHeatmaps(PlotArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest to validate.
    #[arg(long, conflicts_with = "render_benchmark")]
    manifest: Option<PathBuf>,
    /// Image root for `--manifest` (defaults to its directory).
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Write the synthetic benchmark (images, masks, manifest) to this directory.
    #[arg(long)]
    render_benchmark: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint output path.
    #[arg(long, default_value = "checkpoint.json")]
    out: PathBuf,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// zero_shot, k_shot or k_shot_with_text.
    #[arg(long)]
    mode: Option<EvalMode>,
    /// base, novel or all.
    #[arg(long)]
    split: Option<KeypointSplit>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Score a diverse prompt set (JSON lines) instead of episodes.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Prompt handling with `--prompts`: llm, fallback or none.
    #[arg(long, default_value = "fallback")]
    parse_mode: ParseMode,
}

#[derive(Args)]
struct InterpolateArgs {
    #[command(flatten)]
    common: Common,
    /// Only this path, given as `start,end`.
    #[arg(long)]
    path: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Species split to draw from: train, val or test.
    #[arg(long, default_value = "test")]
    species: String,
    /// Keypoint split: base, novel or all.
    #[arg(long, default_value = "all")]
    keypoints: KeypointSplit,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParseArgs {
    #[command(flatten)]
    common: Common,
    /// Prompt set (JSON lines with a `text` field).
    #[arg(long)]
    prompts: PathBuf,
    /// llm or fallback.
    #[arg(long, default_value = "llm")]
    mode: ParseMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    prompts: PathBuf,
    /// Parsed output of `parse`.
    #[arg(long)]
    parsed: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test-split instance index.
    #[arg(long, default_value_t = 0)]
    instance: usize,
    /// Keypoint names (defaults to every visible keypoint).
    #[arg(long, value_delimiter = ',')]
    keypoints: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::InterpolateTexts(a) => interpolate(a),
        Command::SynthPrompts(a) => synth_prompts(a),
        Command::Parse(a) => parse(a),
        Command::ScoreParsing(a) => score_parsing(a),
        Command::PlotHeatmaps(a) => plot(a),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("stdout", e)),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            index: i,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for it in items {
        writeln!(w, "{}", serde_json::to_string(it)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let cfg = a.common.run_config()?;
    if let Some(dir) = a.render_benchmark {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ds = write_benchmark(
            &dir,
            &BenchmarkConfig {
                per_species: cfg.data.synthetic_per_species,
                seed: cfg.data.synthetic_seed,
                ..Default::default()
            },
        )?;
        return print_json(&serde_json::json!({
            "written": dir, "instances": ds.len(), "species": ds.species_count(),
        }));
    }
    let manifest = a
        .manifest
        .or(cfg.data.manifest.clone())
        .ok_or_else(|| Error::Config("ingest needs --manifest or --render-benchmark".into()))?;
    let mut data = cfg.data.clone();
    data.manifest = Some(manifest.clone());
    data.image_root = a.image_root.or(data.image_root);
    let s = load_data(&data, cfg.model.input_size)?;
    let raw = load_dataset(&manifest, None)?;
    print_json(&serde_json::json!({
        "instances": raw.len(),
        "species": raw.species_count(),
        "keypoints": raw.schema.names,
        "train": s.train.len(), "val": s.val.len(), "test": s.test.len(),
        "images": s.bank.len(),
    }))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.common.run_config()?;
    let data = load_data(&cfg.data, cfg.model.input_size)?;
    let gw = build_gateway(&cfg.llm)?;
    let mut model = Model::new(cfg.model.clone())?;
    let mut start = 0;
    if let Some(p) = &a.resume {
        let ck = Checkpoint::load(p)?;
        ck.restore_into(&mut model)?;
        start = ck.step;
    }
    let mut trainer = Trainer::new(cfg.clone(), model, &data.train, &data.bank, &gw)?;
    trainer.step = start;
    let out = trainer.run()?;
    Checkpoint::capture(&out.model, &cfg, out.steps).save(&a.out)?;
    let last = out.history.last();
    print_json(&serde_json::json!({
        "checkpoint": a.out, "steps": out.steps, "final_loss": last.map(|r| r.loss),
    }))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = if a.common.config.is_some() {
        a.common.run_config()?
    } else {
        ck.config.clone().with_overrides(&a.common.set)?
    };
    if let Some(m) = a.mode {
        cfg.eval.mode = m;
    }
    if let Some(s) = a.split {
        cfg.eval.split = s;
    }
    if let Some(n) = a.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(s) = a.seed {
        cfg.eval.seed = s;
    }
    let model = ck.to_model()?;
    let data = load_data(&cfg.data, cfg.model.input_size)?;
    if let Some(prompts) = a.prompts {
        let records: Vec<PromptRecord> = read_jsonl(&prompts)?;
        let gw = build_gateway(&cfg.llm)?;
        let ctx = prompt_context(&model, &data.bank, &data.test, &cfg, Some(&gw))?;
        let simple = score_prompts(&ctx, &data.test, &records, None, cfg.eval.rho)?;
        let parsed = score_prompts(&ctx, &data.test, &records, Some(a.parse_mode), cfg.eval.rho)?;
        return print_json(&serde_json::json!({
            "simple_prompts": simple, "diverse_prompts": parsed,
            "drop": simple.pck - parsed.pck,
        }));
    }
    let report = evaluate(&model, &data.test, &data.bank, &cfg.eval)?;
    print_json(&report)
}

fn prompt_context<'a>(
    model: &'a Model,
    bank: &'a promptkp_core::raster::ImageBank,
    ds: &promptkp_core::corpus::Dataset,
    cfg: &RunConfig,
    gateway: Option<&'a promptkp_core::llm::Gateway>,
) -> Result<PromptContext<'a>> {
    let objects: Vec<String> = ds.species().map(str::to_string).collect();
    Ok(PromptContext {
        model,
        bank,
        template: cfg.eval.template.clone(),
        fallback: FallbackParser::new(&TemplateBank::shipped(), &ds.schema, &objects)?,
        normalizer: Normalizer::shipped(Some(&ds.schema)),
        gateway,
    })
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let cfg = a.common.run_config()?;
    let gw = build_gateway(&cfg.llm)?;
    let schema = promptkp_core::synth::schema();
    let pairs: Vec<[String; 2]> = match &a.path {
        Some(p) => {
            let (s, e) = p
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("--path {p:?} is not start,end")))?;
            vec![[s.trim().to_string(), e.trim().to_string()]]
        }
        None => cfg.train.interpolation_paths.clone(),
    };
    let mut out = Vec::new();
    for [s, e] in &pairs {
        let path = InterpolationPath::new(
            &schema,
            s,
            e,
            cfg.train.interpolation_z,
            &cfg.train.path_category,
        )?;
        let pool = collect_pool(&path, cfg.ftc.r, &gw)?;
        out.push(serde_json::json!({ "path": path.label(), "pool": pool }));
    }
    print_json(&out)
}

fn synth_prompts(a: SynthArgs) -> Result<()> {
    let cfg = a.common.run_config()?;
    let data = load_data(&cfg.data, cfg.model.input_size)?;
    let ds = match a.species.as_str() {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => {
            return Err(Error::Config(format!(
                "--species {other:?} (train, val, test)"
            )))
        }
    };
    let ids: BTreeSet<usize> = split_ids(&ds.schema, a.keypoints);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let records =
        synthesize_prompt_set(ds, &TemplateBank::shipped(), Some(&ids), a.count, &mut rng)?;
    write_jsonl(&a.out, &records)?;
    print_json(&serde_json::json!({ "written": a.out, "count": records.len() }))
}

fn parse(a: ParseArgs) -> Result<()> {
    let cfg = a.common.run_config()?;
    let records: Vec<PromptRecord> = read_jsonl(&a.prompts)?;
    let schema = promptkp_core::synth::schema();
    let mut out: Vec<Option<ParsedPrompt>> = Vec::with_capacity(records.len());
    match a.mode {
        ParseMode::Llm => {
            let gw = build_gateway(&cfg.llm)?;
            let norm = Normalizer::shipped(Some(&schema));
            for r in &records {
                out.push(log_failure(&r.text, llm_parse(&r.text, &gw, &norm))?);
            }
        }
        ParseMode::Fallback => {
            let objects: Vec<String> = promptkp_core::synth::TRAIN_SPECIES
                .iter()
                .chain(promptkp_core::synth::HELD_OUT_SPECIES.iter())
                .map(|s| s.to_string())
                .collect();
            let p = FallbackParser::new(&TemplateBank::shipped(), &schema, &objects)?;
            for r in &records {
                out.push(log_failure(&r.text, p.parse(&r.text))?);
            }
        }
        ParseMode::None => {
            return Err(Error::Config("parse --mode must be llm or fallback".into()))
        }
    }
    write_jsonl(&a.out, &out)?;
    let failures = out.iter().filter(|p| p.is_none()).count();
    print_json(
        &serde_json::json!({ "written": a.out, "parsed": out.len() - failures, "failures": failures }),
    )
}

fn log_failure(text: &str, r: Result<ParsedPrompt>) -> Result<Option<ParsedPrompt>> {
    match r {
        Ok(p) => Ok(Some(p)),
        Err(e @ (Error::Parse(_) | Error::Selection(_))) => {
            log::warn!("could not parse {text:?}: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn score_parsing(a: ScoreArgs) -> Result<()> {
    let records: Vec<PromptRecord> = read_jsonl(&a.prompts)?;
    let parsed: Vec<Option<ParsedPrompt>> = read_jsonl(&a.parsed)?;
    if records.len() != parsed.len() {
        return Err(Error::Argument(format!(
            "{} prompts but {} parses",
            records.len(),
            parsed.len()
        )));
    }
    let truth: Vec<ParsedPrompt> = records.iter().map(PromptRecord::truth).collect();
    let (kp, obj) = parsing_accuracy(&parsed, &truth, a.threshold)?;
    print_json(&serde_json::json!({ "acc_kp": kp, "acc_obj": obj, "count": truth.len() }))
}

fn plot(a: PlotArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = if a.common.config.is_some() {
        a.common.run_config()?
    } else {
        ck.config.clone().with_overrides(&a.common.set)?
    };
    let model = ck.to_model()?;
    let data = load_data(&cfg.data, cfg.model.input_size)?;
    let inst = data.test.instances.get(a.instance).ok_or_else(|| {
        Error::Argument(format!(
            "instance {} out of range ({} test instances)",
            a.instance,
            data.test.len()
        ))
    })?;
    let names: Vec<String> = if a.keypoints.is_empty() {
        inst.visible_ids()
            .map(|i| data.test.schema.names[i].clone())
            .collect()
    } else {
        a.keypoints.clone()
    };
    let task = Task {
        supports: Vec::new(),
        query: inst.image_ref.clone(),
        entries: names
            .iter()
            .map(|n| promptkp_core::model::Entry {
                support_points: Vec::new(),
                texts: vec![keypoint_text(&cfg.eval.template, n, &inst.species)],
                target: None,
            })
            .collect(),
        use_visual: false,
        use_text: true,
    };
    let maps = model.predict_heatmaps(&task, &data.bank)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let img = data.bank.image(&inst.image_ref)?;
    let mut written = Vec::new();
    for (name, h) in names.iter().zip(&maps) {
        let stem = name.replace(' ', "_");
        let peak = promptkp_core::detector::heatmap_to_coords(h, model.stride());
        let png = a.out.join(format!("{stem}.png"));
        overlay(img, h, model.heatmap_cell(), &[peak]).save_png(&png)?;
        write_pfm(h, &a.out.join(format!("{stem}.pfm")))?;
        written.push(png);
    }
    print_json(&serde_json::json!({ "instance": inst.image_ref, "written": written }))
}
