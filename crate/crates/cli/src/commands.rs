use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msc_core::dataset::{DatasetManifest, MANIFEST_FILE};
use msc_core::eval::{po_density, po_density_csv};
use msc_core::features::NormalizationCaps;
use msc_core::models::{evaluate_manifest, load_model, train_from_manifest};
use msc_core::parser::ParserConfig;
use msc_core::pipeline::{
    extract_stage, filter_stage, list_files, parse_stage, parsed_replay_ids, run_pipeline,
    sample_replay_ids, split_stage, trace_replay_ids, FilterManifest, PipelineConfig, FILTER_FILE,
    TRACE_SUFFIX,
};
use msc_core::plot::{curves_svg, svg_for_csv};
use msc_core::trace::{gen_synthetic, read_trace_file, write_trace_file, SynthConfig};

use crate::config;
use crate::{
    Cli, Command, EvalArgs, ExtractArgs, FilterArgs, GenArgs, ParseArgs, PlotArgs, RunArgs,
    SplitArgs, StatsArgs, TrainArgs,
};

pub const REPORT_FILE: &str = "report.json";
pub const PHASE_FILE: &str = "phase_accuracy.csv";
pub const PO_DENSITY_FILE: &str = "po_density.csv";

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = config::load(cli.global.config.as_deref())?;
    if let Some(dir) = cli.global.workdir {
        cfg.work_dir = dir;
    }
    if let Some(w) = cli.global.workers {
        cfg.workers = w;
    }
    match cli.command {
        Command::Gen(a) => gen(cfg, a),
        Command::Filter(a) => filter(cfg, a),
        Command::Parse(a) => parse(cfg, a),
        Command::Extract(a) => extract(cfg, a),
        Command::Split(a) => split(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Stats(a) => stats(cfg, a),
        Command::Run(a) => run_all(cfg, a),
        Command::Plot(a) => plot(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string(value).expect("summary serializes")
    );
}

fn gen(cfg: PipelineConfig, a: GenArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| cfg.work().traces());
    let mut synth = SynthConfig::new(a.matchup, a.n);
    synth.profile = a.profile;
    synth.length = (
        a.min_frames.unwrap_or(synth.length.0),
        a.max_frames.unwrap_or(synth.length.1),
    );
    let traces = gen_synthetic(&synth, a.seed.unwrap_or(cfg.seed))?;
    create_dir(&out)?;
    for t in &traces {
        write_trace_file(&out, t)?;
    }
    log::info!("wrote {} traces to {}", traces.len(), out.display());
    Ok(())
}

fn filter(cfg: PipelineConfig, a: FilterArgs) -> Result<()> {
    let input = a.input.unwrap_or_else(|| cfg.traces_dir());
    let out = a
        .out
        .unwrap_or_else(|| cfg.work().reports().join(FILTER_FILE));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut log = Vec::new();
    let (manifest, _) = filter_stage(&input, &out, cfg.workers, &mut log)?;
    print_json(&serde_json::json!({
        "accepted": manifest.accepted.len(),
        "rejected": manifest.rejected.len(),
        "invalid": manifest.invalid.len(),
        "counts": manifest.counts,
    }));
    Ok(())
}

fn parse(mut cfg: PipelineConfig, a: ParseArgs) -> Result<()> {
    if let Some(n) = a.n {
        cfg.parser = ParserConfig { n };
    }
    if a.vocab.is_some() {
        cfg.vocab = a.vocab;
    }
    if cfg.parser.n == 0 {
        bail!("--n must be at least 1");
    }
    let matchup = a.matchup.or(cfg.matchup);
    let input = a.input.unwrap_or_else(|| cfg.traces_dir());
    let out = a.out.unwrap_or_else(|| cfg.work().parsed());
    let default_filter = cfg.work().reports().join(FILTER_FILE);
    let filter = a
        .filter
        .or_else(|| default_filter.is_file().then_some(default_filter));
    let ids = match filter {
        Some(path) => FilterManifest::load(&path)?.selected(matchup),
        None => {
            if matchup.is_some() {
                bail!("--matchup needs a filter manifest (run `msc filter` first)");
            }
            trace_replay_ids(&input)?
        }
    };
    let vocab = cfg.load_vocab()?;
    if let Some(path) = a.write_vocab {
        vocab.save(&path)?;
    }
    let mut log = Vec::new();
    let s = parse_stage(
        &ids,
        &input,
        &out,
        cfg.parser,
        &vocab,
        cfg.workers,
        &mut log,
    )?;
    print_json(&s);
    Ok(())
}

fn extract(mut cfg: PipelineConfig, a: ExtractArgs) -> Result<()> {
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.spatial {
        cfg.spatial = true;
    }
    if let Some(path) = a.caps {
        cfg.caps = NormalizationCaps::load(&path)?;
    }
    if a.vocab.is_some() {
        cfg.vocab = a.vocab;
    }
    let traces = a.traces.unwrap_or_else(|| cfg.traces_dir());
    let parsed = a.input.unwrap_or_else(|| cfg.work().parsed());
    let out = a.out.unwrap_or_else(|| cfg.work().samples());
    let ids = parsed_replay_ids(&parsed)?;
    let vocab = cfg.load_vocab()?;
    let mut log = Vec::new();
    let s = extract_stage(
        &ids,
        &traces,
        &parsed,
        &out,
        &cfg.extract_options(),
        &vocab,
        cfg.workers,
        &mut log,
    )?;
    print_json(&s);
    Ok(())
}

fn split(cfg: PipelineConfig, a: SplitArgs) -> Result<()> {
    let samples = a.input.unwrap_or_else(|| cfg.work().samples());
    let out = a.out.unwrap_or_else(|| cfg.work().dataset());
    let ids = sample_replay_ids(&samples)?;
    let mut log = Vec::new();
    let (manifest, _) = split_stage(
        &ids,
        &samples,
        &out,
        a.seed.unwrap_or(cfg.seed),
        cfg.pair_lock && !a.no_pair_lock,
        a.matchup.or(cfg.matchup),
        &mut log,
    )?;
    print_json(&manifest.counts);
    Ok(())
}

fn manifest_path(cfg: &PipelineConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.work().dataset().join(MANIFEST_FILE))
}

fn dataset_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

fn train(cfg: PipelineConfig, a: TrainArgs) -> Result<()> {
    let mut t = cfg.train.clone();
    if let Some(v) = a.task {
        t.task = v;
    }
    if let Some(v) = a.features {
        t.features = v;
    }
    if let Some(v) = a.width {
        t.width = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.tbptt_len {
        t.tbptt_len = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    let path = manifest_path(&cfg, a.manifest);
    let manifest = DatasetManifest::load(&path)?;
    let out = a.out.unwrap_or_else(|| cfg.work().ckpt());
    let outcome = train_from_manifest(&manifest, &dataset_dir(&path), &t, &out)?;
    if let Some(last) = outcome
        .curves
        .iter()
        .rev()
        .find(|r| r.split.as_str() == "val")
    {
        log::info!("final val accuracy {:.4}", last.accuracy);
    }
    let curves = fs::read_to_string(out.join(msc_core::models::CURVES_FILE))?;
    write_file(
        &out.join("curves.svg"),
        &curves_svg(&curves, "accuracy", "training curves")?,
    )?;
    Ok(())
}

fn eval(cfg: PipelineConfig, a: EvalArgs) -> Result<()> {
    let ckpt = a.ckpt.unwrap_or_else(|| cfg.work().ckpt());
    let (spec, net) = load_model(&ckpt)?;
    if let Some(task) = a.task {
        if task != spec.task {
            bail!(
                "checkpoint {} was trained for {}, not {task}",
                ckpt.display(),
                spec.task
            );
        }
    }
    let path = manifest_path(&cfg, a.manifest);
    let manifest = DatasetManifest::load(&path)?;
    let e = evaluate_manifest(
        &net,
        &spec,
        &manifest,
        &dataset_dir(&path),
        a.split,
        cfg.train.eval_batch,
    )?;
    let report = e.report.context("no steps evaluated")?;
    let out = a.out.unwrap_or_else(|| cfg.work().reports());
    let mut json = serde_json::to_value(&report)?;
    json["split"] = serde_json::json!(a.split);
    json["loss"] = serde_json::json!(e.loss);
    write_file(
        &out.join(REPORT_FILE),
        &(serde_json::to_string_pretty(&json)? + "\n"),
    )?;
    write_file(&out.join(PHASE_FILE), &report.phase_csv())?;
    print_json(&json);
    Ok(())
}

fn stats(cfg: PipelineConfig, a: StatsArgs) -> Result<()> {
    let input = a.input.unwrap_or_else(|| cfg.traces_dir());
    let files = list_files(&input, TRACE_SUFFIX)?;
    let traces = files
        .iter()
        .map(|p| read_trace_file(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let groups = msc_core::preprocess::group_replays(traces.iter().map(|t| &t.header));
    let mut summary = serde_json::json!({ "traces": traces.len(), "counts": groups.counts });
    if a.po_density {
        let stride = a.n.unwrap_or(cfg.parser.n);
        let deciles = po_density(&traces, stride);
        let out = a.out.unwrap_or_else(|| cfg.work().reports());
        write_file(&out.join(PO_DENSITY_FILE), &po_density_csv(&deciles))?;
        summary["po_density"] = serde_json::json!(deciles);
    }
    print_json(&summary);
    Ok(())
}

fn run_all(mut cfg: PipelineConfig, a: RunArgs) -> Result<()> {
    if a.input.is_some() {
        cfg.input_dir = a.input;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.n {
        cfg.parser = ParserConfig { n };
    }
    if a.matchup.is_some() {
        cfg.matchup = a.matchup;
    }
    if a.spatial {
        cfg.spatial = true;
    }
    if a.no_pair_lock {
        cfg.pair_lock = false;
    }
    let summary = run_pipeline(&cfg)?;
    for s in &summary.stages {
        print_json(s);
    }
    print_json(&summary.manifest.counts);
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let title = a.title.unwrap_or_else(|| {
        a.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let svg = if text.starts_with("epoch,") {
        curves_svg(&text, &a.metric, &title)?
    } else {
        svg_for_csv(&text, &title)?
    };
    let out = a.out.unwrap_or_else(|| a.input.with_extension("svg"));
    write_file(&out, &svg)
}
