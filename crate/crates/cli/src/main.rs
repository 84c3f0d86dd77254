use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ham_core::data::{load_csv, save_csv, split_train_val};
use ham_core::eval::{self, line_chart_svg, Knob, Row, Series};
use ham_core::merge::{trim_source, TrimLevel};
use ham_core::params::{flatten, load_checkpoint, render_checkpoint, BitMask};
use ham_core::{generate, train_all, Dataset, HamError, MergeInput, MergeStrategy, ParamSet, Result, RunConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "ham", version, about = "Train, merge and evaluate per-source cosine classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration (defaults for every missing key)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the training seed (train) or the seed list (run, ablate, sweep)
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.lambda
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides merge.trim_ratio
    #[arg(long)]
    r: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain dataset
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train every source from the shared initialization
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV (generated from the config when absent)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Domain to leave out of training
        #[arg(long)]
        held_out: Option<usize>,
    },
    /// Merge source checkpoints into one model
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        theta0: PathBuf,
        /// rhm, avg, layer_trim or best_model
        #[arg(long)]
        strategy: Option<MergeStrategy>,
        /// Comma-separated validation accuracies, one per source (best_model)
        #[arg(long, value_delimiter = ',')]
        val_acc: Option<Vec<f64>>,
        #[arg(required = true)]
        sources: Vec<PathBuf>,
    },
    /// Leave-one-domain-out evaluation
    Run(ProtocolArgs),
    /// Leave-one-domain-out evaluation plus the ablation table
    Ablate(ProtocolArgs),
    /// Repeat the protocol over values of one knob
    Sweep {
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// lambda, r, beta or logit_scale
        #[arg(long)]
        param: Knob,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

#[derive(Args)]
struct ProtocolArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated rows, e.g. `avg,rhm+opa+sae`
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<Row>>,
    /// Worker threads for protocol cells
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(l) = common.lambda {
        cfg.train.lambda = l;
    }
    if let Some(r) = common.r {
        cfg.merge.trim_ratio = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HamError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HamError::io(dir, e))
}

fn pretty(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json value serializes");
    s.push('\n');
    s
}

fn load_data(path: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    match path {
        Some(p) => {
            let ds = load_csv(p, cfg.data.num_classes)?;
            if ds.input_dim() != cfg.data.input_dim {
                return Err(HamError::config(
                    "data.input_dim",
                    format!("config says {}, {} has {}", cfg.data.input_dim, p.display(), ds.input_dim()),
                ));
            }
            Ok(ds)
        }
        None => generate(&cfg.data),
    }
}

fn cmd_gen(common: &Common) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let ds = generate(&cfg.data)?;
    create_dir(&common.out)?;
    save_csv(&ds, common.out.join("data.csv"))?;
    let meta = json!({ "config": cfg.to_json_value(), "seed": cfg.data.seed, "samples": ds.len() });
    write(&common.out.join("data.json"), pretty(&meta))
}

fn loss_curve(log: &[ham_core::train::StepRecord], n_sources: usize) -> String {
    let mut series: Vec<Series> = (0..n_sources)
        .map(|i| Series { name: format!("source {i}"), points: Vec::new() })
        .collect();
    for r in log {
        series[r.source].points.push((r.step as f64, r.ce_loss + r.sign_loss));
    }
    line_chart_svg("training loss", "step", "loss", &series)
}

fn cmd_train(common: &Common, data: Option<&Path>, held_out: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    let ds = load_data(data, &cfg)?;
    let ds = match held_out {
        Some(h) if !ds.domain_ids().contains(&h) => {
            return Err(HamError::config("held_out", format!("domain {h} is not in the dataset")))
        }
        Some(h) => ds.filter_domains(|d| d != h),
        None => ds,
    };
    let domains = ds.domain_ids();
    let split = split_train_val(&ds, cfg.train.seed)?;
    let parts: Vec<Dataset> = domains.iter().map(|&d| split.train.domain(d)).collect();
    let sources: Vec<&Dataset> = parts.iter().collect();

    let clf = eval::classifier(&cfg)?;
    let theta0 = eval::initial_params(&cfg)?;
    create_dir(&common.out)?;
    let meta = json!({
        "config": cfg.to_json_value(),
        "seed": cfg.train.seed,
        "held_out": held_out,
        "source_domains": domains,
    });
    write(&common.out.join("run_meta.json"), pretty(&meta))?;
    write(&common.out.join("theta0.json"), render_checkpoint(&theta0))?;
    write(&common.out.join("prototypes.json"), render_checkpoint(&clf.prototypes().to_param_set()))?;

    let out = match train_all(&clf, &theta0, &sources, &cfg.train, &TrainOptions::default()) {
        Ok(out) => out,
        Err(HamError::Numerical { step, source_id, detail }) => {
            let dump = common.out.join("numerical_failure.json");
            let body = json!({ "config": cfg.to_json_value(), "step": step, "source": source_id, "detail": detail });
            write(&dump, pretty(&body))?;
            eprintln!("diagnostics written to {}", dump.display());
            return Err(HamError::Numerical { step, source_id, detail });
        }
        Err(e) => return Err(e),
    };
    for (i, (avg, fin)) in out.averaged.iter().zip(&out.finals).enumerate() {
        write(&common.out.join(format!("source_{i}_ma.json")), render_checkpoint(avg))?;
        write(&common.out.join(format!("source_{i}_final.json")), render_checkpoint(fin))?;
    }
    let mut log = String::new();
    for r in &out.log {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    write(&common.out.join("train_log.jsonl"), log)?;
    write(&common.out.join("loss_curve.svg"), loss_curve(&out.log, sources.len()))
}

fn mask_json(masks: &[BitMask]) -> serde_json::Value {
    let sources: Vec<serde_json::Value> = masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let layers: Vec<serde_json::Value> = m
                .layout()
                .segments()
                .iter()
                .map(|s| {
                    let bits: String = m.bits()[s.offset..s.offset + s.length].iter().map(|&b| if b { '1' } else { '0' }).collect();
                    json!({ "name": s.name, "bits": bits })
                })
                .collect();
            json!({ "source": i, "layers": layers })
        })
        .collect();
    json!(sources)
}

fn cmd_merge(common: &Common, theta0: &Path, strategy: Option<MergeStrategy>, val_acc: Option<&[f64]>, paths: &[PathBuf]) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(s) = strategy {
        cfg.merge.strategy = s;
    }
    let base = load_checkpoint(theta0)?;
    let sources = paths.iter().map(load_checkpoint).collect::<Result<Vec<ParamSet>>>()?;
    let sample_seed = common.seed.unwrap_or(0);
    let mut input = MergeInput::new(&base, &sources, cfg.merge.strategy, cfg.merge.trim_ratio);
    input.val_accuracies = val_acc;
    input.percentile_sample = cfg.merge.percentile_sample.map(|n| (n, sample_seed));
    let (merged, report) = ham_core::merge(&input)?;

    create_dir(&common.out)?;
    write(&common.out.join("merged.json"), render_checkpoint(&merged))?;
    let inputs: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    let body = json!({
        "config": cfg.to_json_value(),
        "seed": sample_seed,
        "theta0": theta0.display().to_string(),
        "sources": inputs,
        "report": report,
    });
    write(&common.out.join("merge_report.json"), pretty(&body))?;

    let level = match cfg.merge.strategy {
        MergeStrategy::Rhm => Some(TrimLevel::Model),
        MergeStrategy::LayerTrim => Some(TrimLevel::Layer),
        _ => None,
    };
    let masks: Vec<BitMask> = match level {
        Some(level) => sources
            .iter()
            .map(|s| trim_source(s, &base, cfg.merge.trim_ratio, level, input.percentile_sample).map(|(_, m)| m))
            .collect::<Result<_>>()?,
        None => sources.iter().map(|s| BitMask::filled(flatten(s).layout().clone(), true)).collect(),
    };
    let body = json!({ "config": cfg.to_json_value(), "seed": sample_seed, "masks": mask_json(&masks) });
    write(&common.out.join("masks.json"), pretty(&body))
}

fn protocol_config(args: &ProtocolArgs) -> Result<(RunConfig, Dataset)> {
    let mut cfg = resolve(&args.common)?;
    if let Some(s) = args.common.seed {
        cfg.eval.seeds = vec![s];
    }
    if let Some(rows) = &args.strategy {
        cfg.eval.strategies = rows.clone();
    }
    cfg.validate()?;
    let ds = load_data(args.data.as_deref(), &cfg)?;
    Ok((cfg, ds))
}

fn cmd_run(args: &ProtocolArgs, ablate: bool) -> Result<()> {
    let (cfg, ds) = protocol_config(args)?;
    let report = eval::leave_one_out_run(&ds, &cfg, args.jobs)?;
    let out = &args.common.out;
    create_dir(out)?;
    write(&out.join("report.json"), report.to_json())?;
    if ablate {
        let meta = format!("# seeds={:?} config={}\n", report.seeds, serde_json::to_string(&report.config)?);
        write(&out.join("ablation.csv"), meta + &report.ablation_csv())?;
        write(&out.join("cells.csv"), report.cells_csv())?;
    }
    print!("{}", report.ablation_csv());
    Ok(())
}

fn cmd_sweep(args: &ProtocolArgs, knob: Knob, values: &[f64]) -> Result<()> {
    let (cfg, ds) = protocol_config(args)?;
    let report = eval::sweep(&ds, &cfg, knob, values, args.jobs)?;
    let out = &args.common.out;
    create_dir(out)?;
    let mut json_body = serde_json::to_string_pretty(&report)?;
    json_body.push('\n');
    write(&out.join("sweep.json"), json_body)?;
    let meta = format!("# seeds={:?} config={}\n", cfg.eval.seeds, serde_json::to_string(&report.config)?);
    write(&out.join("sweep.csv"), meta + &report.to_csv())?;
    write(&out.join("sweep.svg"), report.to_svg())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => cmd_gen(&common),
        Command::Train { common, data, held_out } => cmd_train(&common, data.as_deref(), held_out),
        Command::Merge { common, theta0, strategy, val_acc, sources } => {
            cmd_merge(&common, &theta0, strategy, val_acc.as_deref(), &sources)
        }
        Command::Run(args) => cmd_run(&args, false),
        Command::Ablate(args) => cmd_run(&args, true),
        Command::Sweep { protocol, param, values } => cmd_sweep(&protocol, param, &values),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
