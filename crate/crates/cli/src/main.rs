//! `seetn`: generate synthetic gaze data, train, score label noise, evaluate
//! and compare against the plain L1 baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use seetn_core::checkpoint::Checkpoint;
use seetn_core::config::{apply_overrides, load_file, Mode, TrainConfig};
use seetn_core::data::{load_dataset, save_dataset, Dataset, GenerateConfig};
use seetn_core::eval::{
    compare_baseline, comparison_svg, comparisons_to_csv, detection_metrics, evaluate, per_sample_csv,
    reports_to_csv, Comparison,
};
use seetn_core::trainer::{EvalSets, Trainer};

#[derive(Parser, Debug)]
#[command(name = "seetn", version, about = "Noise-robust gaze regression with prototype manifolds")]
struct Cli {
    /// Directory that receives every output file.
    #[arg(long, global = true, env = "SEETN_OUT_DIR", default_value = "seetn-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw the synthetic source, validation and target splits.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint, loss log and per-epoch metrics.
    Train(TrainArgs),
    /// Score every sample of a dataset and rank by the noise indicator.
    Detect(DetectArgs),
    /// Mean angular error of a checkpoint on one or more datasets.
    Eval(EvalArgs),
    /// Baseline versus full method across several label-noise ratios.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// `key=value` setting applied on top of the config; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,

    #[arg(long)]
    noise_ratio: Option<f64>,

    #[arg(long)]
    noise_sigma_deg: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,

    /// Training CSV (usually `source.csv`).
    #[arg(long)]
    data: PathBuf,

    /// Held-out split from the training distribution.
    #[arg(long)]
    val: Option<PathBuf>,

    /// Shifted target domain, scored after every epoch.
    #[arg(long)]
    target: Option<PathBuf>,

    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long)]
    data: PathBuf,

    /// `key=value` changes to the checkpoint's config (e.g. `t_percent=20`).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// Dataset CSV; repeatable.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,

    /// Also write per-sample errors for every dataset.
    #[arg(long)]
    per_sample: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    cfg: ConfigArgs,

    /// Generator configuration; defaults are used when absent.
    #[arg(long)]
    data_config: Option<PathBuf>,

    /// `key=value` generator setting; repeatable.
    #[arg(long = "data-override", value_name = "KEY=VALUE")]
    data_overrides: Vec<String>,

    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    noise_ratios: Vec<f64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects written files and their hashes for the run manifest.
struct Outputs {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.insert(name.to_string(), sha256_hex(contents));
        Ok(path)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.path(name))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(mut self, command: &str, details: serde_json::Value) -> Result<()> {
        let manifest = json!({
            "command": command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "version": env!("CARGO_PKG_VERSION"),
            "details": details,
            "artifacts": self.artifacts,
        });
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let name = format!("{command}_manifest.json");
        self.artifacts.clear();
        self.write(&name, text.as_bytes())?;
        Ok(())
    }
}

fn train_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let base = match &args.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    Ok(base.with_overrides(&args.overrides)?)
}

fn generate_config(path: Option<&Path>, overrides: &[String]) -> Result<GenerateConfig> {
    let base = match path {
        Some(p) => load_file(p).with_context(|| format!("loading {}", p.display()))?,
        None => GenerateConfig::default(),
    };
    let cfg: GenerateConfig = apply_overrides(&base, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn cmd_generate(out_dir: &Path, args: &GenerateArgs) -> Result<()> {
    let mut cfg = generate_config(args.cfg.config.as_deref(), &args.cfg.overrides)?;
    if let Some(r) = args.noise_ratio {
        cfg.noise_ratio = r;
    }
    if let Some(s) = args.noise_sigma_deg {
        cfg.noise_sigma_deg = s;
    }
    cfg.validate()?;
    let scenario = cfg.generate()?;
    let mut out = Outputs::new(out_dir)?;
    for (name, d) in [
        ("source.csv", &scenario.source),
        ("source_val.csv", &scenario.source_val),
        ("target.csv", &scenario.target),
    ] {
        save_dataset(d, &out.path(name))?;
        out.record(name)?;
    }
    out.write("generate_config.toml", toml::to_string(&cfg)?.as_bytes())?;
    let flagged = scenario.source.noise_mask().iter().filter(|&&m| m).count();
    println!(
        "wrote {} source ({flagged} noisy), {} validation and {} target samples to {}",
        scenario.source.len(),
        scenario.source_val.len(),
        scenario.target.len(),
        out_dir.display()
    );
    out.finish(
        "generate",
        json!({
            "config": cfg,
            "noise_ratio": cfg.noise_ratio,
            "noise_sigma_deg": cfg.noise_sigma_deg,
            "seeds": {
                "embedding": cfg.embedding_seed,
                "source": cfg.source.sample_seed,
                "source_val": cfg.source_val.sample_seed,
                "target": cfg.target.sample_seed,
                "noise": cfg.noise_seed,
            },
            "flagged_noisy": flagged,
        }),
    )
}

fn cmd_train(out_dir: &Path, args: &TrainArgs) -> Result<()> {
    let mut cfg = train_config(&args.cfg)?;
    if let Some(e) = args.max_epochs {
        cfg.max_epochs = e;
    }
    cfg.validate()?;
    let data = load(&args.data)?;
    let val = args.val.as_deref().map(load).transpose()?;
    let target = args.target.as_deref().map(load).transpose()?;
    let sets = EvalSets {
        source_val: val.as_ref(),
        target: target.as_ref(),
    };

    let mut out = Outputs::new(out_dir)?;
    let mut periodic = Vec::new();
    let every = cfg.checkpoint_every;
    let result = Trainer::new(cfg.clone())?.fit_with(&data, sets, |t, m| {
        println!(
            "epoch {:>3}  target {}  auroc {}",
            m.epoch,
            m.target_error.map_or("-".into(), |e| format!("{e:.3}")),
            m.auroc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        if every > 0 && (t.epoch - cfg.warmup_epochs) % every == 0 {
            let ck = Checkpoint::new(&t.cfg, t.epoch, t.model.clone(), t.bank.clone());
            periodic.push((format!("checkpoints/epoch_{:04}.ckpt", t.epoch), ck.to_text()));
        }
        Ok(())
    });
    let result = result.context("training failed")?;
    for (name, text) in &periodic {
        out.write(name, text.as_bytes())?;
    }
    let epochs = cfg.warmup_epochs + cfg.max_epochs;
    let ck = Checkpoint::new(&cfg, epochs, result.model, result.bank);
    out.write("checkpoint.ckpt", ck.to_text().as_bytes())?;
    out.write("training_log.csv", result.history.training_log_csv().as_bytes())?;
    out.write("metrics.csv", result.history.metrics_csv().as_bytes())?;
    out.write("train_config.toml", cfg.to_toml().as_bytes())?;
    let inputs: BTreeMap<String, String> = [Some(&args.data), args.val.as_ref(), args.target.as_ref()]
        .into_iter()
        .flatten()
        .map(|p| Ok((p.display().to_string(), sha256_hex(&fs::read(p)?))))
        .collect::<Result<_>>()?;
    println!("wrote checkpoint and logs to {}", out_dir.display());
    out.finish(
        "train",
        json!({
            "config": cfg,
            "config_hash": cfg.hash(),
            "seeds": { "init": cfg.init_seed, "data": cfg.data_seed, "shuffle": cfg.shuffle_seed },
            "inputs": inputs,
            "epochs": epochs,
            "repartitions": result.history.repartitions,
        }),
    )
}

fn cmd_detect(out_dir: &Path, args: &DetectArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let cfg = ck.meta.config.with_overrides(&args.overrides)?;
    let data = load(&args.data)?;
    if data.input_dim() != cfg.model.input {
        bail!(
            "dataset has {} input features but the checkpoint expects {}",
            data.input_dim(),
            cfg.model.input
        );
    }
    let mut trainer = Trainer::from_state(cfg.clone(), ck.model, ck.bank)?;
    trainer.epoch = ck.meta.epoch;
    let part = trainer.repartition(&data)?;
    let flagged = part.noisy_mask();
    let mask = data.has_noise().then(|| data.noise_mask());

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| part.eta[b].total_cmp(&part.eta[a]).then(a.cmp(&b)));
    let mut csv = String::from("index,eta,is_flagged_noisy");
    csv.push_str(if mask.is_some() { ",true_noise_flag\n" } else { "\n" });
    for &i in &order {
        csv.push_str(&format!("{i},{:?},{}", part.eta[i], u8::from(flagged[i])));
        if let Some(m) = &mask {
            csv.push_str(&format!(",{}", u8::from(m[i])));
        }
        csv.push('\n');
    }
    let mut out = Outputs::new(out_dir)?;
    out.write("eta.csv", csv.as_bytes())?;
    let mut summary = format!(
        "samples {}  flagged {} (t = {}%)  indicator {:?}\n",
        data.len(),
        part.noisy_indices.len(),
        cfg.t_percent,
        cfg.indicator
    );
    let detection = match &mask {
        Some(m) if m.iter().any(|&b| !b) => {
            let d = detection_metrics(&part.eta, m, cfg.t_percent)?;
            summary.push_str(&format!(
                "precision {:.4}  recall {:.4}  auroc {:.4}\n",
                d.precision, d.recall, d.auroc
            ));
            Some(d)
        }
        _ => None,
    };
    print!("{summary}");
    out.write("detect_summary.txt", summary.as_bytes())?;
    out.finish(
        "detect",
        json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "checkpoint_sha256": sha256_hex(&fs::read(&args.checkpoint)?),
            "data": args.data.display().to_string(),
            "config": cfg,
            "detection": detection,
        }),
    )
}

fn cmd_eval(out_dir: &Path, args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let mut out = Outputs::new(out_dir)?;
    let mut reports = Vec::new();
    for path in &args.data {
        let data = load(path)?;
        if data.input_dim() != ck.model.dims.input {
            bail!(
                "{} has {} input features but the checkpoint expects {}",
                path.display(),
                data.input_dim(),
                ck.model.dims.input
            );
        }
        let report = evaluate(&ck.model, &data)?;
        println!("{}", report.summary());
        if args.per_sample {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
            out.write(&format!("errors_{stem}.csv"), per_sample_csv(&report).as_bytes())?;
        }
        reports.push(report);
    }
    out.write("eval_report.csv", reports_to_csv(&reports).as_bytes())?;
    out.finish(
        "eval",
        json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "checkpoint_sha256": sha256_hex(&fs::read(&args.checkpoint)?),
            "data": args.data.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }),
    )
}

fn cmd_compare(out_dir: &Path, args: &CompareArgs) -> Result<()> {
    let cfg = train_config(&args.cfg)?;
    let gen = generate_config(args.data_config.as_deref(), &args.data_overrides)?;
    if args.noise_ratios.is_empty() {
        bail!("no noise ratios given");
    }
    let mut rows: Vec<Comparison> = Vec::new();
    for &ratio in &args.noise_ratios {
        let g = GenerateConfig {
            noise_ratio: ratio,
            ..gen.clone()
        };
        g.validate()?;
        let scenario = g.generate()?;
        let run = compare_baseline(&scenario.source, &scenario.target, &TrainConfig { mode: Mode::Seetn, ..cfg.clone() })
            .with_context(|| format!("run at noise ratio {ratio} failed"))?;
        let c = run.comparison;
        println!(
            "noise {:>4.2}  baseline {:.3} deg  seetn {:.3} deg  improvement {:+.1}%",
            ratio,
            c.baseline_target_error,
            c.seetn_target_error,
            100.0 * c.relative_improvement
        );
        rows.push(c);
    }
    let mut out = Outputs::new(out_dir)?;
    out.write("comparison.csv", comparisons_to_csv(&rows).as_bytes())?;
    out.write("comparison.svg", comparison_svg(&rows).as_bytes())?;
    out.finish(
        "compare",
        json!({
            "train_config": cfg,
            "config_hash": cfg.hash(),
            "generate_config": gen,
            "noise_ratios": args.noise_ratios,
        }),
    )
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(&cli.out_dir, a),
        Command::Train(a) => cmd_train(&cli.out_dir, a),
        Command::Detect(a) => cmd_detect(&cli.out_dir, a),
        Command::Eval(a) => cmd_eval(&cli.out_dir, a),
        Command::Compare(a) => cmd_compare(&cli.out_dir, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
