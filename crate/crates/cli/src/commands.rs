use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ssmlab_core::analysis::{self, AnalysisConfig, FilterThresholds, KernelReport};
use ssmlab_core::blocks::{Arch, FeatureBlockConfig};
use ssmlab_core::corpus::{self, SplitSpec};
use ssmlab_core::numeric::{rng, Rng};
use ssmlab_core::train::{self, EpochLog, Metrics, PosWeight, TrainConfig, TrainedModel};
use ssmlab_core::Error as CoreError;

use crate::manifest::{self, RunManifest};
use crate::{AnalyzeArgs, Cli, Command, CompareArgs, ReplayArgs, SynthArgs, Task, TrainArgs};

/// Replayed artifacts differ from the recorded ones.
#[derive(Debug)]
pub struct ReplayMismatch(pub Vec<String>);

impl std::fmt::Display for ReplayMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "replay mismatch: {}", self.0.join(", "))
    }
}

impl std::error::Error for ReplayMismatch {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ReplayMismatch>().is_some() {
        return 1;
    }
    let numerical = e
        .chain()
        .any(|c| c.downcast_ref::<CoreError>().is_some_and(CoreError::is_numerical));
    if numerical {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a, args).map(|_| ()),
        Command::Train(a) => train_cmd(&a, args).map(|_| ()),
        Command::Analyze(a) => analyze(&a, args).map(|_| ()),
        Command::Compare(a) => compare(&a, args).map(|_| ()),
        Command::Replay(a) => replay(&a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: &SynthArgs, args: Vec<String>) -> Result<RunManifest> {
    let start = Instant::now();
    let mut rng = Rng::new(a.seed).split(rng::DATA);
    let ds = match a.task {
        Task::Longrange => corpus::synth_longrange(a.n, a.len, a.distance, &mut rng)?,
        Task::Local => corpus::synth_local(a.n, a.len, &mut rng)?,
    };
    ensure_parent(&a.out)?;
    ds.to_corpus().write_jsonl(&a.out)?;
    eprintln!(
        "wrote {} examples ({} positive) to {}",
        ds.len(),
        ds.stats.n_pos,
        a.out.display()
    );
    let config = json!({
        "task": format!("{:?}", a.task).to_lowercase(),
        "n": a.n,
        "len": a.len,
        "distance": a.distance,
        "n_pos": ds.stats.n_pos,
        "n_neg": ds.stats.n_neg,
    });
    let m = RunManifest::new(args, Some(a.seed), config, &[a.out.clone()], start.elapsed().as_secs_f64())?;
    m.save(&manifest::beside(&a.out))?;
    Ok(m)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let pos_weight = match a.pos_weight.as_str() {
        "auto" => PosWeight::Auto,
        v => PosWeight::Explicit(
            v.parse()
                .map_err(|_| anyhow!("--pos-weight must be `auto` or a number, got `{v}`"))?,
        ),
    };
    let cfg = TrainConfig {
        model: FeatureBlockConfig {
            embed_dim: a.embed_dim,
            hidden: a.hidden,
            kernel_sizes: a.kernel_sizes.clone(),
            state_size: a.state_size,
            dropout: a.dropout,
            seq_len: a.seq_len,
            dt_min: a.dt_min,
            dt_max: a.dt_max,
            input_adapter: a.input_adapter,
            ..FeatureBlockConfig::new(a.arch)
        },
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        dropout: a.dropout,
        seed: a.seed,
        pos_weight,
        split: SplitSpec {
            train: a.train_frac,
            val: a.val_frac,
            test: a.test_frac,
            seed: a.seed,
            stratified: !a.no_stratify,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    arch: Arch,
    seed: u64,
    epoch: usize,
    train: Metrics,
    val: Metrics,
    test: Metrics,
}

impl MetricsFile {
    fn of(m: &TrainedModel) -> Self {
        Self {
            arch: m.arch,
            seed: m.config.seed,
            epoch: m.epoch,
            train: m.metrics.train.clone(),
            val: m.metrics.val.clone(),
            test: m.metrics.test.clone(),
        }
    }
}

fn write_epochs_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch,train_loss,val_f1")?;
    for l in logs {
        writeln!(w, "{},{},{}", l.epoch, l.train_loss, l.val_f1)?;
    }
    w.flush()?;
    Ok(())
}

fn train_cmd(a: &TrainArgs, args: Vec<String>) -> Result<RunManifest> {
    let start = Instant::now();
    let cfg = train_config(a)?;
    let data = corpus::ingest_jsonl(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let quiet = a.quiet;
    let epochs = cfg.epochs;
    let out = train::train_run_with(&cfg, &data, &mut |l| {
        if !quiet {
            eprintln!(
                "epoch {}/{epochs}  train_loss {:.6}  val_f1 {:.2}  val_acc {:.2}",
                l.epoch, l.train_loss, l.val_f1, l.val_accuracy
            );
        }
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let model_path = a.out.join("model.json");
    let best_path = a.out.join("best_model.json");
    let metrics_path = a.out.join("metrics.json");
    let epochs_path = a.out.join("epochs.csv");
    out.model.save(&model_path)?;
    out.best.save(&best_path)?;
    write_json(&metrics_path, &MetricsFile::of(&out.model))?;
    write_epochs_csv(&epochs_path, &out.model.epochs)?;
    let t = &out.model.metrics.test;
    eprintln!(
        "test  acc {:.2}  precision {:.2}  recall {:.2}  f1 {:.2}",
        t.accuracy, t.precision, t.recall, t.f1
    );
    let outputs = [model_path, best_path, metrics_path, epochs_path];
    let config = serde_json::to_value(&cfg)?;
    let m = RunManifest::new(args, Some(cfg.seed), config, &outputs, start.elapsed().as_secs_f64())?;
    m.save(&a.out.join("manifest.json"))?;
    Ok(m)
}

fn analyze(a: &AnalyzeArgs, args: Vec<String>) -> Result<RunManifest> {
    let start = Instant::now();
    let model = TrainedModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let kernel = model
        .kernels()?
        .ok_or_else(|| anyhow!("{} has no convolution kernels to analyze", model.arch))?;
    let cfg = AnalysisConfig {
        sharpness_k: a.sharpness_k,
        secondary_threshold: a.secondary_threshold,
        filter: FilterThresholds {
            low_cut: a.low_cut,
            high_cut: a.high_cut,
            broadband_entropy: a.broadband_entropy,
        },
    };
    let report = analysis::analyze_kernel(&kernel, model.arch.name(), &a.model.to_string_lossy(), &cfg)?;
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => a.model.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let report_path = dir.join("report.json");
    let time_path = dir.join("time_response.csv");
    let spec_path = dir.join("spectrum.csv");
    write_json(&report_path, &report)?;

    let (row, time, spec) = match a.channel {
        Some(h) => {
            let c = report
                .channel_reports
                .get(h)
                .ok_or_else(|| anyhow!("channel {h} out of range (kernel has {})", report.channels))?;
            let spec = c
                .spectrum
                .as_ref()
                .ok_or_else(|| anyhow!("channel {h} has zero energy"))?;
            (kernel.row(h).to_vec(), &c.time, spec)
        }
        None => (
            report.aggregate.mean_kernel.clone(),
            &report.aggregate.mean_kernel_time,
            &report.aggregate.mean_psd,
        ),
    };
    let mut w = BufWriter::new(fs::File::create(&time_path)?);
    analysis::write_time_csv(&mut w, &row, time)?;
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(&spec_path)?);
    analysis::write_spectrum_csv(&mut w, spec)?;
    w.flush()?;
    eprintln!(
        "{}: kernel_len={} channels={} dominant {:.4} cycles/sample, entropy {:.4}, {}",
        report.arch,
        report.kernel_len,
        report.channels,
        report.dominant_frequency(),
        report.entropy(),
        report.filter_class
    );
    let config = json!({ "analysis": cfg, "channel": a.channel });
    let outputs = [report_path, time_path, spec_path];
    let m = RunManifest::new(args, Some(model.config.seed), config, &outputs, start.elapsed().as_secs_f64())?;
    m.save(&manifest::beside(&outputs[0]))?;
    Ok(m)
}

struct Row {
    arch: String,
    seed: Option<u64>,
    metrics: Option<Metrics>,
    report: Option<KernelReport>,
}

fn read_row(input: &Path) -> Result<Row> {
    let (dir, metrics_path, report_path) = if input.is_dir() {
        (input.to_path_buf(), input.join("metrics.json"), input.join("report.json"))
    } else {
        if !input.exists() {
            bail!("{} does not exist", input.display());
        }
        let dir = input.parent().map(Path::to_path_buf).unwrap_or_default();
        let name = input.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.contains("report") {
            (dir.clone(), dir.join("metrics.json"), input.to_path_buf())
        } else {
            (dir.clone(), input.to_path_buf(), dir.join("report.json"))
        }
    };
    let metrics: Option<MetricsFile> = if metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path)?;
        Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", metrics_path.display()))?)
    } else {
        None
    };
    let report: Option<KernelReport> = if report_path.exists() {
        let text = fs::read_to_string(&report_path)?;
        Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", report_path.display()))?)
    } else {
        None
    };
    let arch = match (&metrics, &report) {
        (Some(m), _) => m.arch.name().to_string(),
        (None, Some(r)) => r.arch.clone(),
        (None, None) => bail!("no metrics.json or report.json found for {}", dir.display()),
    };
    Ok(Row {
        arch,
        seed: metrics.as_ref().map(|m| m.seed),
        metrics: metrics.map(|m| m.test),
        report,
    })
}

fn compare(a: &CompareArgs, args: Vec<String>) -> Result<RunManifest> {
    let start = Instant::now();
    let rows: Vec<Row> = a.inputs.iter().map(|p| read_row(p)).collect::<Result<_>>()?;
    ensure_parent(&a.out)?;
    let mut w = BufWriter::new(fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    writeln!(w, "arch,seed,accuracy,precision,recall,f1,dominant_freq,entropy,filter_class")?;
    for r in &rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        let m = match &r.metrics {
            Some(m) => format!("{:.2},{:.2},{:.2},{:.2}", m.accuracy, m.precision, m.recall, m.f1),
            None => ",,,".into(),
        };
        let s = match &r.report {
            Some(rep) => format!("{:.4},{:.4},{}", rep.dominant_frequency(), rep.entropy(), rep.filter_class),
            None => ",,".into(),
        };
        writeln!(w, "{},{seed},{m},{s}", r.arch)?;
    }
    w.flush()?;
    let seeds: Vec<u64> = rows.iter().filter_map(|r| r.seed).collect();
    let config = json!({ "inputs": a.inputs, "seeds": seeds });
    let m = RunManifest::new(args, None, config, &[a.out.clone()], start.elapsed().as_secs_f64())?;
    m.save(&manifest::beside(&a.out))?;
    Ok(m)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let recorded = RunManifest::load(&a.manifest)?;
    let mut argv = vec!["ssmlab".to_string()];
    argv.extend(recorded.command.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| anyhow!("recorded command does not parse: {e}"))?;
    let fresh = match cli.command {
        Command::Synth(s) => synth(&s, recorded.command.clone())?,
        Command::Train(t) => train_cmd(&t, recorded.command.clone())?,
        Command::Analyze(x) => analyze(&x, recorded.command.clone())?,
        Command::Compare(c) => compare(&c, recorded.command.clone())?,
        Command::Replay(_) => bail!("a manifest cannot record a replay"),
    };
    let mut bad = Vec::new();
    for old in &recorded.artifacts {
        match fresh.artifacts.iter().find(|n| n.path == old.path) {
            Some(n) if n.sha256 == old.sha256 => {}
            _ => bad.push(old.path.clone()),
        }
    }
    if !bad.is_empty() {
        return Err(ReplayMismatch(bad).into());
    }
    eprintln!("replay ok: {} artifacts identical", recorded.artifacts.len());
    Ok(())
}

