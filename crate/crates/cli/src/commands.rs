use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use scg_core::benchmark::{
    evaluate_binding, generate_prompts, paper_templates, parse_prompt, read_jsonl, report_csv, toy_prompts,
    write_jsonl, BenchmarkPrompt, EvalRow, LayoutDetector, TaskCounts, WordLists,
};
use scg_core::diagnostics::{dump_tensors, load_tensors, profile_run};
use scg_core::image::{read_ppm, write_ppm};
use scg_core::scg::{
    guided_sample, ActiveSteps, BindingPrompt, PlannerEndpoint, RatioPlanner, RatioTable, TraceLevel, TraceOptions,
};
use scg_core::toy_dit::{checkpoint, make_dataset, train as fit, DiffusionSchedule, ToyModel};
use scg_core::Vocab;

use crate::config::{RunConfig, TraceVerbosity};
use crate::error::CliError;
use crate::{BenchArgs, BenchPreset, Preset, SampleArgs, Switch};

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(scg_core::Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

pub fn train(config: &Path, out: Option<PathBuf>, epochs: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(p) = out {
        cfg.checkpoint = p;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = make_dataset(&cfg.dataset, cfg.train.seed)?;
    let schedule = DiffusionSchedule::new(&cfg.schedule)?;
    let mut model = ToyModel::<f32>::new(cfg.resolved_model(), cfg.train.seed)?;
    let report = fit(&mut model, &data, &schedule, &cfg.train, |epoch, loss| {
        eprintln!("epoch {epoch}: loss {loss:.5}");
    })?;
    if let Some(parent) = cfg.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    checkpoint::save(&cfg.checkpoint, &model, Some(&cfg.dataset.vocab()), Some(&cfg.dataset))?;

    #[derive(Serialize)]
    struct TrainManifest<'a> {
        config: &'a RunConfig,
        epoch_losses: &'a [f64],
        steps: usize,
    }
    write_json(
        &cfg.checkpoint.with_extension("json"),
        &TrainManifest {
            config: &cfg,
            epoch_losses: &report.epoch_losses,
            steps: report.steps,
        },
    )?;
    match (report.first_loss(), report.last_loss()) {
        (Some(first), Some(last)) => println!("first epoch loss {first:.5}, last epoch loss {last:.5}"),
        _ => println!("no epochs run"),
    }
    println!("wrote {}", cfg.checkpoint.display());
    Ok(())
}

/// Directory-safe name for a free-text prompt.
fn slug(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Serialize)]
struct SampleManifest<'a> {
    config: &'a RunConfig,
    scg: bool,
    prompts: Vec<PromptEntry<'a>>,
    images: Vec<PathBuf>,
}

#[derive(Serialize)]
struct PromptEntry<'a> {
    id: &'a str,
    text: &'a str,
}

pub fn sample(args: SampleArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if args.preset == Some(Preset::Paper) {
        cfg.apply_paper_preset();
    }
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(c) = args.c {
        cfg.guidance.amplification_factor = c;
    }
    if let Some(p) = args.checkpoint {
        cfg.checkpoint = p;
    }
    if let Some(o) = args.out {
        cfg.output_dir = o;
    }
    if let Some(t) = args.trace {
        cfg.trace = t;
    }
    let guided = args.scg == Switch::On;
    let schedule = DiffusionSchedule::new(&cfg.schedule)?;
    cfg.guidance.validate(schedule.num_steps())?;

    if !cfg.checkpoint.exists() {
        return Err(CliError::runtime(format!(
            "checkpoint {} not found; run `scg train --config <file>` first",
            cfg.checkpoint.display()
        )));
    }
    let ckpt = checkpoint::load(&cfg.checkpoint)?;
    let vocab = ckpt
        .vocab
        .ok_or_else(|| CliError::runtime("checkpoint carries no vocabulary"))?;
    let model = ckpt.model;
    if schedule.num_steps() > model.config.num_timesteps {
        return Err(CliError::Usage(format!(
            "schedule has {} steps but the checkpoint embeds only {}",
            schedule.num_steps(),
            model.config.num_timesteps
        )));
    }

    let prompts: Vec<(String, BindingPrompt)> = match (&args.prompt, &args.benchmark) {
        (Some(text), _) => {
            let prompt = parse_prompt(text, &vocab, None).map_err(|e| CliError::Usage(e.to_string()))?;
            let id = args.prompt_id.clone().unwrap_or_else(|| slug(text));
            vec![(id, prompt)]
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(io(path))?;
            read_jsonl(&text)?
                .into_iter()
                .map(|r| Ok((r.id.clone(), r.to_prompt(&vocab)?)))
                .collect::<Result<_>>()?
        }
        (None, None) => unreachable!("clap requires --prompt or --benchmark"),
    };

    let mut guidance = cfg.guidance.clone();
    if !guided {
        guidance.active_steps = ActiveSteps::None;
    }
    let trace_opts = TraceOptions {
        level: if cfg.trace == TraceVerbosity::Maps {
            TraceLevel::Maps
        } else {
            TraceLevel::Masks
        },
        ..TraceOptions::default()
    };
    let planner = RatioPlanner::new(RatioTable::builtin(), PlannerEndpoint::from_env());
    for (id, _) in &prompts {
        ensure_dir(&cfg.output_dir.join(id))?;
    }

    let jobs: Vec<(usize, u64)> = (0..prompts.len())
        .flat_map(|p| cfg.seeds.as_slice().iter().map(move |&s| (p, s)))
        .collect();
    let images: Vec<PathBuf> = jobs
        .par_iter()
        .map(|&(p, seed)| -> Result<PathBuf> {
            let (id, prompt) = &prompts[p];
            let dir = cfg.output_dir.join(id);
            let (image, trace) = guided_sample(&model, &schedule, prompt, &guidance, seed, &planner, &trace_opts)?;
            let path = dir.join(format!("{seed}.ppm"));
            write_ppm(&path, &image)?;
            if cfg.trace != TraceVerbosity::Off {
                trace.export_masks(&dir.join(format!("{seed}_masks")))?;
            }
            if cfg.trace == TraceVerbosity::Maps {
                dump_tensors(&trace.pre_maps(), &dir.join(format!("{seed}.scgatt")))?;
            }
            Ok(path)
        })
        .collect::<Result<_>>()?;

    for f in planner.fallbacks() {
        eprintln!("warning: ratio planner fell back to the table: {f:?}");
    }
    write_json(
        &cfg.output_dir.join("manifest.json"),
        &SampleManifest {
            config: &cfg,
            scg: guided,
            prompts: prompts
                .iter()
                .map(|(id, p)| PromptEntry { id, text: &p.raw_text })
                .collect(),
            images: images.clone(),
        },
    )?;
    println!("wrote {} images under {}", images.len(), cfg.output_dir.display());
    Ok(())
}

pub fn entropy(dump: &Path, token: usize, out: Option<&Path>) -> Result<()> {
    let maps = load_tensors(dump)?;
    let tokens = maps.first().map_or(0, |m| m.tokens());
    if token >= tokens {
        return Err(CliError::Usage(format!(
            "token {token} out of range; the maps have {tokens} tokens"
        )));
    }
    let csv = profile_run(&maps, token)?.to_csv();
    match out {
        Some(path) => std::fs::write(path, csv).map_err(io(path))?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let flags = (args.coarse, args.fine, args.style);
    let items: Vec<BenchmarkPrompt> = match args.preset {
        BenchPreset::Paper | BenchPreset::Custom => {
            let counts = if args.preset == BenchPreset::Paper {
                if flags != (None, None, None) {
                    return Err(CliError::Usage("--coarse/--fine/--style need --preset custom".into()));
                }
                TaskCounts::PAPER
            } else {
                let counts = TaskCounts {
                    coarse: flags.0.unwrap_or(0),
                    fine: flags.1.unwrap_or(0),
                    style: flags.2.unwrap_or(0),
                };
                if counts.total() == 0 {
                    return Err(CliError::Usage(
                        "--preset custom needs --coarse, --fine or --style".into(),
                    ));
                }
                counts
            };
            let words = WordLists::paper();
            generate_prompts(&paper_templates(), &words, &words.vocab(), &counts, args.seed)?
        }
        BenchPreset::Toy => {
            if flags.1.is_some() || flags.2.is_some() {
                return Err(CliError::Usage("the toy preset has coarse prompts only".into()));
            }
            let cfg = RunConfig::load_or_default(args.config.as_deref())?;
            toy_prompts(&cfg.dataset, flags.0.unwrap_or(8), args.seed)?
        }
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_jsonl(&args.out, &items)?;
    let mut per_task: BTreeMap<&str, usize> = BTreeMap::new();
    for item in &items {
        *per_task.entry(item.prompt.task.name()).or_default() += 1;
    }
    for (task, n) in per_task {
        println!("{task}: {n} prompts");
    }
    println!("wrote {} prompts to {}", items.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    images: usize,
    mean_accuracy: f64,
    per_task: BTreeMap<String, f64>,
}

pub fn eval(images: &Path, benchmark: &Path, config: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load_or_default(config)?;
    let text = std::fs::read_to_string(benchmark).map_err(io(benchmark))?;
    let records = read_jsonl(&text)?;
    if records.is_empty() {
        return Err(CliError::runtime(format!("{} lists no prompts", benchmark.display())));
    }

    let mut jobs = Vec::new();
    let mut missing = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        let dir = images.join(&rec.id);
        let mut seeds: Vec<u64> = std::fs::read_dir(&dir)
            .map(|entries| {
                entries
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
                    .filter_map(|p| p.file_stem()?.to_str()?.parse().ok())
                    .collect()
            })
            .unwrap_or_default();
        if seeds.is_empty() {
            missing.push(dir.join("<seed>.ppm").display().to_string());
        }
        seeds.sort_unstable();
        jobs.extend(seeds.into_iter().map(|s| (r, s)));
    }
    if !missing.is_empty() {
        return Err(CliError::runtime(format!(
            "no images found; expected:\n  {}",
            missing.join("\n  ")
        )));
    }

    let detector = LayoutDetector::for_dataset(&cfg.dataset);
    let rows: Vec<EvalRow> = jobs
        .par_iter()
        .map(|&(r, seed)| -> Result<EvalRow> {
            let rec = &records[r];
            let vocab = Vocab::new(rec.text.split_whitespace());
            let prompt = rec.to_prompt(&vocab)?;
            let image = read_ppm(&images.join(&rec.id).join(format!("{seed}.ppm")))?;
            let score = evaluate_binding(&image, &prompt, &detector)?;
            Ok(EvalRow {
                prompt_id: rec.id.clone(),
                seed,
                accuracy: score.accuracy,
                flags: score.flags().into_iter().map(String::from).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let mut by_task: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (row, &(r, _)) in rows.iter().zip(&jobs) {
        let e = by_task.entry(records[r].task.name().to_string()).or_default();
        e.0 += row.accuracy;
        e.1 += 1;
    }
    let summary = EvalSummary {
        images: rows.len(),
        mean_accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64,
        per_task: by_task.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect(),
    };

    let report = out.unwrap_or_else(|| images.join("report.csv"));
    std::fs::write(&report, report_csv(&rows)).map_err(io(&report))?;
    write_json(&report.with_extension("summary.json"), &summary)?;
    for (task, mean) in &summary.per_task {
        println!("{task}: mean accuracy {mean:.4}");
    }
    println!(
        "overall: mean accuracy {:.4} over {} images",
        summary.mean_accuracy, summary.images
    );
    println!("wrote {}", report.display());
    Ok(())
}
