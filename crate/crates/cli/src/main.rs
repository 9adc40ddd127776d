use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use cabin_core::bank::{
    BankBuildConfig, DescriptionGenerator, ExternalGenerator, FlakyGenerator, HashNgramEncoder, PrototypeBank,
    TemplateGenerator,
};
use cabin_core::checkpoint::Checkpoint;
use cabin_core::data_model::{ActionTaxonomy, Modality, ObjectTaxonomy, RuleTable, SplitName};
use cabin_core::dataset::{load_dataset, write_dataset, Dataset};
use cabin_core::harness::{
    evaluate_with_records, export_attention, prepare_eval, run_ablation, train, Axis, LabelLevel, TrainConfig,
};
use cabin_core::model::Model;
use cabin_core::synth::ScenarioSpec;
use cabin_core::{defaults, Error};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "cabin", version, about = "In-cabin driver action recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset from a scenario spec.
    GenerateData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate, validate, encode and export a prototype bank.
    BuildBank {
        /// `{"actions": ..., "objects": ...}`; the shipped taxonomy when omitted.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Action → objects rule table; the shipped table when omitted.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = GeneratorKind::Template)]
        generator: GeneratorKind,
        /// Program run by the external generator.
        #[arg(long)]
        program: Option<String>,
        /// Arguments for the external program.
        #[arg(long = "arg", allow_hyphen_values = true)]
        args: Vec<String>,
        /// Chance the mock generator returns an invalid batch.
        #[arg(long, default_value_t = 0.5)]
        invalid_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        max_retries: usize,
        #[arg(long)]
        out: PathBuf,
        /// Where the config snapshot and metrics go; defaults to `<out stem>.run` beside the bank.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Dataset directory; read from the training run when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Defaults to `eval-<split>` beside the checkpoint.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Train and evaluate one run per (value, seed) along one axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// o_max, tau, relation_depth, modules or modality.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write last-block attention heatmaps, chosen prototypes and slot weights for one clip.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Defaults to `attention-<clip>` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum GeneratorKind {
    Template,
    Mock,
    External,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    #[default]
    Toy,
    Full,
}

/// A training run as written by the user: paths, a preset and a partial
/// [`TrainConfig`] merged over the preset.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    data: PathBuf,
    #[serde(default)]
    bank: Option<PathBuf>,
    out: PathBuf,
    #[serde(default)]
    preset: Preset,
    #[serde(default)]
    train: Value,
}

/// Paths of a training run, written as `run.json` next to its checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunPaths {
    data: PathBuf,
    bank: Option<PathBuf>,
    out: PathBuf,
    preset: Preset,
}

#[derive(Deserialize)]
struct TaxonomyFile {
    actions: ActionTaxonomy,
    objects: ObjectTaxonomy,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// A directory holding `config.resolved.json` and a `metrics.jsonl` stream.
struct RunDir {
    metrics: File,
}

impl RunDir {
    fn create(dir: &Path, resolved: &impl Serialize) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join("config.resolved.json"), resolved)?;
        let p = dir.join("metrics.jsonl");
        let metrics = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(Self { metrics })
    }

    fn log(&mut self, v: &Value) -> anyhow::Result<()> {
        writeln!(self.metrics, "{v}")?;
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn num_classes(data: &Dataset, level: LabelLevel) -> usize {
    match level {
        LabelLevel::Fine => data.action_taxonomy.num_fine(),
        LabelLevel::Coarse => data.action_taxonomy.num_coarse(),
    }
}

fn load_bank(path: Option<&Path>) -> anyhow::Result<Option<PrototypeBank>> {
    path.map(|p| PrototypeBank::import(p).with_context(|| format!("importing bank {}", p.display()))).transpose()
}

/// Resolves a run file into paths plus a complete training config. The
/// dataset is loaded with every modality when `all_modalities` is set.
fn resolve_run(
    path: &Path,
    seed: Option<u64>,
    all_modalities: bool,
) -> anyhow::Result<(RunPaths, TrainConfig, Dataset, Option<PrototypeBank>)> {
    let file: RunFile = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let paths = RunPaths {
        data: relative_to(base, &file.data),
        bank: file.bank.as_deref().map(|b| relative_to(base, b)),
        out: relative_to(base, &file.out),
        preset: file.preset,
    };
    let preset = match file.preset {
        Preset::Toy => TrainConfig::toy(0),
        Preset::Full => TrainConfig::full(0),
    };
    let mut v = serde_json::to_value(&preset)?;
    let over = if file.train.is_null() { json!({}) } else { file.train };
    let explicit = |ptr: &str| over.pointer(ptr).is_some();
    let (set_classes, set_text_dim) = (explicit("/model/num_classes"), explicit("/model/text_dim"));
    merge(&mut v, over);
    let mut cfg: TrainConfig = serde_json::from_value(v).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mods: Option<&[Modality]> = if all_modalities { None } else { Some(&cfg.model.modalities) };
    let data = load_dataset(&paths.data, mods)?;
    if !set_classes {
        cfg.model.num_classes = num_classes(&data, cfg.level);
    }
    let bank = load_bank(paths.bank.as_deref())?;
    if let (Some(b), false) = (&bank, set_text_dim) {
        cfg.model.text_dim = b.dim();
    }
    cfg.validate()?;
    Ok((paths, cfg, data, bank))
}

fn generate_data(spec: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec: ScenarioSpec = read_json(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let card = write_dataset(&spec, out)?;
    let mut run = RunDir::create(out, &spec)?;
    run.log(&json!({
        "num_clips": card.num_clips,
        "clips_per_split": card.clips_per_split,
        "warnings": card.warnings.len(),
        "seed": card.seed,
    }))?;
    println!("{} clips written to {}", card.num_clips, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_bank(
    taxonomy: Option<&Path>,
    rules: Option<&Path>,
    kind: GeneratorKind,
    program: Option<String>,
    args: Vec<String>,
    invalid_rate: f64,
    seed: u64,
    dim: usize,
    max_retries: usize,
    out: &Path,
    run_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let (tax_a, tax_o) = match taxonomy {
        Some(p) => {
            let t: TaxonomyFile = read_json(p)?;
            t.actions.check()?;
            t.objects.check()?;
            (t.actions, t.objects)
        }
        None => (defaults::action_taxonomy(), defaults::object_taxonomy()),
    };
    let rule_table: RuleTable = match rules {
        Some(p) => read_json(p)?,
        None => defaults::rule_table(),
    };
    if !(0.0..=1.0).contains(&invalid_rate) {
        return Err(invalid(format!("invalid rate {invalid_rate} outside [0, 1]")));
    }
    let mut generator: Box<dyn DescriptionGenerator> = match kind {
        GeneratorKind::Template => Box::new(TemplateGenerator),
        GeneratorKind::Mock => Box::new(FlakyGenerator::new(invalid_rate, seed)),
        GeneratorKind::External => {
            let program = program.clone().ok_or_else(|| invalid("the external generator needs --program"))?;
            Box::new(ExternalGenerator { program, args: args.clone() })
        }
    };
    let cfg = BankBuildConfig { max_retries, ..BankBuildConfig::default() };
    let bank =
        PrototypeBank::build(&tax_a, &tax_o, &rule_table, generator.as_mut(), &HashNgramEncoder::new(dim), &cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    bank.export(out)?;

    let run_dir = run_dir.unwrap_or_else(|| {
        let stem = out.file_stem().map_or("bank".into(), |s| s.to_string_lossy().into_owned());
        out.with_file_name(format!("{stem}.run"))
    });
    let resolved = json!({
        "taxonomy": { "actions": tax_a, "objects": tax_o },
        "rules": rule_table,
        "generator": kind,
        "program": program,
        "args": args,
        "invalid_rate": invalid_rate,
        "seed": seed,
        "dim": dim,
        "max_retries": max_retries,
        "out": out,
    });
    let mut run = RunDir::create(&run_dir, &resolved)?;
    for set in bank.action_sets.iter().chain(&bank.relation_sets) {
        run.log(&json!({
            "kind": set.kind,
            "label": set.label,
            "texts": set.texts.len(),
            "attempts": set.provenance.attempts,
        }))?;
    }
    run.log(&json!({
        "t_a": bank.t_a.rows,
        "t_o": bank.t_o.rows,
        "t_r": bank.t_r.rows,
        "dim": bank.dim(),
    }))?;
    println!("bank with {}/{}/{} prototypes written to {}", bank.t_a.rows, bank.t_o.rows, bank.t_r.rows, out.display());
    Ok(())
}

fn train_cmd(config: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let (paths, cfg, data, bank) = resolve_run(config, seed, false)?;
    std::fs::create_dir_all(&paths.out).with_context(|| format!("creating {}", paths.out.display()))?;
    write_json(&paths.out.join("run.json"), &paths)?;
    let out = train(&cfg, &data, bank.as_ref(), Some(&paths.out))?;
    match &out.best_val {
        Some(r) => {
            println!("best epoch {}: val top1 {:.2} top5 {:.2} mean1 {:.2}", out.best_epoch, r.top1, r.top5, r.mean1)
        }
        None => println!("best epoch {} (no val split)", out.best_epoch),
    }
    Ok(())
}

fn eval_cmd(
    ckpt: &Path,
    split: &str,
    data: Option<PathBuf>,
    bank: Option<PathBuf>,
    batch_size: usize,
    run_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let split_name = SplitName::parse(split).ok_or_else(|| invalid(format!("unknown split `{split}`")))?;
    let ck_dir = ckpt.parent().unwrap_or(Path::new(".")).to_path_buf();
    let run: Option<RunPaths> = {
        let p = ck_dir.join("run.json");
        if p.exists() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    let data_dir = data
        .or_else(|| run.as_ref().map(|r| r.data.clone()))
        .ok_or_else(|| invalid("no --data and no run.json beside the checkpoint"))?;
    let bank_path = bank.or_else(|| run.as_ref().and_then(|r| r.bank.clone()));

    let ck = Checkpoint::load(ckpt)?;
    let level: LabelLevel = serde_json::from_value(ck.meta["extra"]["level"].clone()).unwrap_or_default();
    let model = Model::from_checkpoint(&ck)?;
    let cfg = model.config().clone();
    let data = load_dataset(&data_dir, Some(&cfg.modalities))?;
    let bank = load_bank(bank_path.as_deref())?;
    let tensors = bank.as_ref().map(PrototypeBank::tensors).transpose()?;
    let clips = data.split_clips(split_name);
    let samples = prepare_eval(&clips, &cfg, &data.object_taxonomy, level)?;
    let (report, records) = evaluate_with_records(&model, &samples, tensors.as_ref(), batch_size)?;

    let run_dir = run_dir.unwrap_or_else(|| ck_dir.join(format!("eval-{split}")));
    let resolved = json!({
        "ckpt": ckpt,
        "split": split,
        "data": data_dir,
        "bank": bank_path,
        "level": level,
        "batch_size": batch_size,
        "model": cfg,
    });
    let mut out = RunDir::create(&run_dir, &resolved)?;
    out.log(&json!({ "split": split, "top1": report.top1, "top5": report.top5, "mean1": report.mean1, "n_samples": report.n_samples }))?;
    write_json(&run_dir.join("report.json"), &report)?;
    if !records.is_empty() {
        let p = run_dir.join("alignments.jsonl");
        let mut f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        for r in &records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    println!(
        "{split}: top1 {:.2} top5 {:.2} mean1 {:.2} over {} clips",
        report.top1, report.top5, report.mean1, report.n_samples
    );
    Ok(())
}

fn ablate_cmd(config: &Path, axis: &str, values: &[String], seeds: &[u64], out: &Path) -> anyhow::Result<()> {
    let axis = Axis::parse(axis).ok_or_else(|| invalid(format!("unknown ablation axis `{axis}`")))?;
    let (paths, cfg, data, bank) = resolve_run(config, None, axis == Axis::Modality)?;
    let resolved = json!({ "axis": axis, "values": values, "seeds": seeds, "run": paths, "base": cfg });
    let mut run = RunDir::create(out, &resolved)?;
    let table = run_ablation(axis, values, &cfg, seeds, &data, bank.as_ref(), Some(out))?;
    for r in &table.rows {
        run.log(&serde_json::to_value(r)?)?;
    }
    print!("{}", table.to_markdown());
    Ok(())
}

fn export_cmd(
    ckpt: &Path,
    clip: &str,
    data: Option<PathBuf>,
    bank: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let ck_dir = ckpt.parent().unwrap_or(Path::new(".")).to_path_buf();
    let run: Option<RunPaths> = {
        let p = ck_dir.join("run.json");
        if p.exists() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    let data_dir = data
        .or_else(|| run.as_ref().map(|r| r.data.clone()))
        .ok_or_else(|| invalid("no --data and no run.json beside the checkpoint"))?;
    let bank_path = bank.or_else(|| run.as_ref().and_then(|r| r.bank.clone()));
    let model = Model::load(ckpt)?;
    let data = load_dataset(&data_dir, Some(&model.config().modalities))?;
    let entry = data
        .clips
        .iter()
        .find(|(r, _)| r.clip_id == clip)
        .ok_or_else(|| invalid(format!("no clip `{clip}` in {}", data_dir.display())))?;
    let bank = load_bank(bank_path.as_deref())?;

    let out = out.unwrap_or_else(|| ck_dir.join(format!("attention-{clip}")));
    let resolved = json!({ "ckpt": ckpt, "clip": clip, "data": data_dir, "bank": bank_path });
    let mut run = RunDir::create(&out, &resolved)?;
    let export = export_attention(&model, bank.as_ref(), entry, &data.object_taxonomy, Some(&out))?;
    for f in &export.frames {
        let mean =
            f.heatmap.iter().flatten().sum::<f64>() / f.heatmap.iter().map(Vec::len).sum::<usize>().max(1) as f64;
        run.log(&json!({
            "modality": f.modality,
            "sampled": f.sampled,
            "source_frame": f.source_frame,
            "row_sum": f.row_sum,
            "mean_heat": mean,
        }))?;
    }
    run.log(&json!({ "weights": export.weights, "weight_sum": export.weights.iter().sum::<f64>() }))?;
    println!("{} heatmaps written to {}", export.frames.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { spec, out, seed } => generate_data(&spec, &out, seed),
        Command::BuildBank {
            taxonomy,
            rules,
            generator,
            program,
            args,
            invalid_rate,
            seed,
            dim,
            max_retries,
            out,
            run_dir,
        } => build_bank(
            taxonomy.as_deref(),
            rules.as_deref(),
            generator,
            program,
            args,
            invalid_rate,
            seed,
            dim,
            max_retries,
            &out,
            run_dir,
        ),
        Command::Train { config, seed } => train_cmd(&config, seed),
        Command::Eval { ckpt, split, data, bank, batch_size, run_dir } => {
            eval_cmd(&ckpt, &split, data, bank, batch_size, run_dir)
        }
        Command::Ablate { config, axis, values, seeds, out } => ablate_cmd(&config, &axis, &values, &seeds, &out),
        Command::ExportAttention { ckpt, clip, data, bank, out } => export_cmd(&ckpt, &clip, data, bank, out),
    }
}

/// 2 for anything the user can fix by changing inputs, 3 for divergence,
/// 1 for environment failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Diverged { .. } => 3,
                Error::Io { .. } | Error::Image { .. } | Error::Generator(_) | Error::Tensor(_) => 1,
                _ => 2,
            };
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let tag = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or("ERROR", Error::code);
            eprintln!("error [{tag}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
