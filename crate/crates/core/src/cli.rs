//! `biasfix` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bft::{bft_run, BftConfig, Schedule};
use crate::error::Result;
use crate::fixtures::toy_fixture;
use crate::ibc::{ibc_run, IbcConfig, LayerOutcome};
use crate::io::{self, fmt_sig9, RunManifest};
use crate::metrics::evaluate;
use crate::nn::forward;
use crate::qstats::{aggregate_layers, compute_channel_stats, Site};
use crate::quant::{forward_quant, prepare_and_quantize, QuantConfig};
use crate::theory::{mssr_scaling_sim, rounding_error_sum_stats, MonteCarloConfig};

#[derive(Debug, Parser)]
#[command(name = "biasfix", version, about = "Post-training quantization simulator and bias correction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SiteArg {
    Pre,
    Post,
}

impl From<SiteArg> for Site {
    fn from(s: SiteArg) -> Self {
        match s {
            SiteArg::Pre => Site::Pre,
            SiteArg::Post => Site::Post,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic toy model and datasets.
    GenFixtures {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold batch norm, drop dead channels and quantize.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits_w: u32,
        #[arg(long, default_value_t = 8)]
        bits_a: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel and per-layer quantization error statistics.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        qmodel: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long = "where", value_enum, default_value = "post")]
        site: SiteArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative bias correction.
    Ibc {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        qmodel: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long, value_enum, default_value = "post")]
        mode: SiteArg,
        /// Keep corrected biases in full precision instead of rounding them.
        #[arg(long)]
        no_requantize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bias fine-tuning by distillation.
    Bft {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        qmodel: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated LRxEPOCHS phases.
        #[arg(long, default_value = "1e-3x16,1e-4x16,1e-5x16,1e-6x16")]
        schedule: String,
        #[arg(long, default_value_t = 32)]
        minibatch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-student cross-entropy and accuracy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Quantized student; the full-precision model itself when omitted.
        #[arg(long)]
        qmodel: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo study of rounding-error sums and MSSR scaling.
    Theory {
        #[arg(long, value_delimiter = ',', default_value = "9,27,128,512")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.class().exit_code()
        }
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    io::ensure_dir(out)
}

pub fn run(cmd: Command) -> Result<()> {
    let start = Instant::now();
    let (out, mut manifest) = match cmd {
        Command::GenFixtures { seed, out } => gen_fixtures(seed, &out)?,
        Command::Quantize {
            model,
            calib,
            bits_w,
            bits_a,
            seed,
            out,
        } => quantize(&model, &calib, QuantConfig { bits_w, bits_a }, seed, &out)?,
        Command::Analyze {
            model,
            qmodel,
            batch,
            site,
            out,
        } => analyze(&model, &qmodel, &batch, site.into(), &out)?,
        Command::Ibc {
            model,
            qmodel,
            batch,
            mode,
            no_requantize,
            out,
        } => {
            let cfg = IbcConfig {
                mode: mode.into(),
                bias_requantize: !no_requantize,
            };
            ibc(&model, &qmodel, &batch, cfg, &out)?
        }
        Command::Bft {
            model,
            qmodel,
            data,
            schedule,
            minibatch,
            seed,
            out,
        } => {
            let cfg = BftConfig {
                schedule: schedule.parse::<Schedule>()?,
                minibatch,
                seed,
                ..BftConfig::default()
            };
            bft(&model, &qmodel, &data, &cfg, &out)?
        }
        Command::Eval {
            model,
            qmodel,
            data,
            labels,
            out,
        } => {
            let result = eval(&model, qmodel.as_deref(), &data, labels.as_deref(), out.as_deref())?;
            match result {
                Some(r) => r,
                None => return Ok(()),
            }
        }
        Command::Theory {
            k,
            trials,
            bits,
            seed,
            out,
        } => {
            let cfg = MonteCarloConfig {
                k_values: k,
                trials,
                bits,
                seed,
                ..MonteCarloConfig::default()
            };
            theory(&cfg, &out)?
        }
    };
    manifest.duration_seconds = start.elapsed().as_secs_f64();
    manifest.write(&out)
}

type Emitted = (PathBuf, RunManifest);

fn gen_fixtures(seed: u64, out: &Path) -> Result<Emitted> {
    prepare_out(out)?;
    let fx = toy_fixture(seed)?;
    io::save_model(&out.join("model.json"), &fx.graph)?;
    io::write_tensor(&out.join("calib.tensor"), &fx.calib)?;
    io::write_tensor(&out.join("ibc.tensor"), &fx.ibc)?;
    io::write_tensor(&out.join("tune.tensor"), &fx.tune)?;
    io::write_tensor(&out.join("heldout.tensor"), &fx.heldout)?;
    io::write_labels(&out.join("heldout.labels"), &fx.heldout_labels)?;
    Ok((out.to_path_buf(), RunManifest::new("gen-fixtures", json!({ "seed": seed }), Some(seed))))
}

fn quantize(model: &Path, calib: &Path, cfg: QuantConfig, seed: u64, out: &Path) -> Result<Emitted> {
    let graph = io::load_model(model)?;
    let batch = io::read_tensor(calib)?;
    let mut manifest = RunManifest::new(
        "quantize",
        json!({ "bits_w": cfg.bits_w, "bits_a": cfg.bits_a, "seed": seed }),
        Some(seed),
    );
    manifest.add_input("model", model)?;
    manifest.add_input("model_blob", &model.with_extension("bin"))?;
    manifest.add_input("calib", calib)?;
    let prepared = prepare_and_quantize(&graph, &batch, cfg)?;
    prepare_out(out)?;
    io::save_qmodel(&out.join("qmodel.json"), &prepared.qmodel)?;
    io::write_csv(
        &out.join("dead_channels.csv"),
        &["layer", "name", "channel", "value", "variance", "action"],
        |w| {
            for d in &prepared.dead {
                w.write_record([
                    d.layer.to_string(),
                    graph.layers[d.layer].name.clone(),
                    d.channel.to_string(),
                    fmt_sig9(d.value),
                    fmt_sig9(d.variance),
                    format!("{:?}", d.action).to_lowercase(),
                ])?;
            }
            Ok(())
        },
    )?;
    Ok((out.to_path_buf(), manifest))
}

fn analyze(model: &Path, qmodel: &Path, batch_path: &Path, site: Site, out: &Path) -> Result<Emitted> {
    let graph = io::load_model(model)?;
    let q = io::load_qmodel(qmodel)?;
    let batch = io::read_tensor(batch_path)?;
    let mut manifest = RunManifest::new("analyze", json!({ "where": site }), None);
    manifest.add_input("model", model)?;
    manifest.add_input("qmodel", qmodel)?;
    manifest.add_input("batch", batch_path)?;
    let (_, fp) = forward(&graph, &batch, true)?;
    let (_, qt) = forward_quant(&q, &batch, true)?;
    let stats = compute_channel_stats(fp.as_ref().expect("captured"), qt.as_ref().expect("captured"), site)?;
    let layers = aggregate_layers(&stats);
    prepare_out(out)?;
    io::write_csv(
        &out.join("channel_stats.csv"),
        &[
            "layer",
            "name",
            "channel",
            "n_samples",
            "mas",
            "signal_energy",
            "error_energy",
            "mssr",
            "rqnsr",
            "degenerate",
        ],
        |w| {
            for s in &stats {
                w.write_record([
                    s.layer.to_string(),
                    graph.layers[s.layer].name.clone(),
                    s.channel.to_string(),
                    s.n_samples.to_string(),
                    fmt_sig9(s.mas),
                    fmt_sig9(s.signal_energy),
                    fmt_sig9(s.error_energy),
                    fmt_sig9(s.mssr),
                    fmt_sig9(s.rqnsr),
                    s.degenerate.to_string(),
                ])?;
            }
            Ok(())
        },
    )?;
    io::write_csv(
        &out.join("layer_summary.csv"),
        &["layer", "name", "kind", "k", "channels", "mas_rms", "mssr_rms", "rqnsr_rms", "ratio"],
        |w| {
            for l in &layers {
                let spec = &graph.layers[l.layer];
                w.write_record([
                    l.layer.to_string(),
                    spec.name.clone(),
                    spec.kind.name().to_string(),
                    spec.fan_in_k().map(|k| k.to_string()).unwrap_or_default(),
                    l.channels.to_string(),
                    fmt_sig9(l.mas_rms),
                    fmt_sig9(l.mssr_rms),
                    fmt_sig9(l.rqnsr_rms),
                    fmt_sig9(l.ratio),
                ])?;
            }
            Ok(())
        },
    )?;
    let degenerate = stats.iter().filter(|s| s.degenerate).count();
    io::write_json_report(
        &out.join("summary.json"),
        &json!({ "where": site, "images": batch.batch(), "degenerate_channels": degenerate, "layers": layers }),
    )?;
    Ok((out.to_path_buf(), manifest))
}

fn ibc(model: &Path, qmodel: &Path, batch_path: &Path, cfg: IbcConfig, out: &Path) -> Result<Emitted> {
    let graph = io::load_model(model)?;
    let q = io::load_qmodel(qmodel)?;
    let batch = io::read_tensor(batch_path)?;
    let mut manifest = RunManifest::new("ibc", serde_json::to_value(cfg).expect("plain struct"), None);
    manifest.add_input("model", model)?;
    manifest.add_input("qmodel", qmodel)?;
    manifest.add_input("batch", batch_path)?;
    let (corrected, report) = ibc_run(&graph, &q, &batch, cfg)?;
    prepare_out(out)?;
    io::save_qmodel(&out.join("qmodel.json"), &corrected)?;
    io::write_csv(
        &out.join("ibc_report.csv"),
        &["layer", "name", "outcome", "channel", "delta", "residual", "dead"],
        |w| {
            for r in &report {
                if r.outcome == LayerOutcome::Skipped {
                    w.write_record([r.layer.to_string(), r.name.clone(), "skipped".into(), "".into(), "".into(), "".into(), "".into()])?;
                    continue;
                }
                for ch in 0..r.delta.len() {
                    w.write_record([
                        r.layer.to_string(),
                        r.name.clone(),
                        "corrected".into(),
                        ch.to_string(),
                        fmt_sig9(r.delta[ch]),
                        fmt_sig9(r.residual[ch]),
                        r.dead[ch].to_string(),
                    ])?;
                }
            }
            Ok(())
        },
    )?;
    let saturated: usize = report.iter().map(|r| r.saturated).sum();
    let dead: usize = report.iter().map(|r| r.dead.iter().filter(|d| **d).count()).sum();
    io::write_json_report(
        &out.join("summary.json"),
        &json!({ "images": batch.batch(), "saturated_biases": saturated, "dead_channels": dead }),
    )?;
    if saturated > 0 {
        eprintln!("warning: {saturated} corrected bias values saturated their grid");
    }
    Ok((out.to_path_buf(), manifest))
}

fn bft(model: &Path, qmodel: &Path, data: &Path, cfg: &BftConfig, out: &Path) -> Result<Emitted> {
    let graph = io::load_model(model)?;
    let q = io::load_qmodel(qmodel)?;
    let tuning = io::read_tensor(data)?;
    let config = json!({
        "schedule": cfg.schedule.to_string(),
        "minibatch": cfg.minibatch,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "eps": cfg.eps,
        "seed": cfg.seed,
    });
    let mut manifest = RunManifest::new("bft", config, Some(cfg.seed));
    manifest.add_input("model", model)?;
    manifest.add_input("qmodel", qmodel)?;
    manifest.add_input("data", data)?;
    let (tuned, report) = bft_run(&graph, &q, &tuning, cfg)?;
    prepare_out(out)?;
    io::save_qmodel(&out.join("qmodel.json"), &tuned)?;
    io::write_csv(&out.join("loss_history.csv"), &["step", "loss"], |w| {
        for (i, l) in report.step_losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), fmt_sig9(*l)])?;
        }
        Ok(())
    })?;
    io::write_csv(&out.join("boundary_losses.csv"), &["phase", "lr", "loss"], |w| {
        w.write_record(["0".to_string(), String::new(), fmt_sig9(report.boundary_losses[0])])?;
        for (i, (p, l)) in cfg.schedule.0.iter().zip(&report.boundary_losses[1..]).enumerate() {
            w.write_record([(i + 1).to_string(), fmt_sig9(p.lr), fmt_sig9(*l)])?;
        }
        Ok(())
    })?;
    io::write_json_report(
        &out.join("summary.json"),
        &json!({ "final_loss": report.final_loss, "saturated_biases": report.saturated, "steps": report.step_losses.len() }),
    )?;
    Ok((out.to_path_buf(), manifest))
}

fn eval(model: &Path, qmodel: Option<&Path>, data: &Path, labels: Option<&Path>, out: Option<&Path>) -> Result<Option<Emitted>> {
    let graph = io::load_model(model)?;
    let batch = io::read_tensor(data)?;
    let labels_v = labels.map(io::read_labels).transpose()?;
    let (teacher, _) = forward(&graph, &batch, false)?;
    let student = match qmodel {
        Some(p) => forward_quant(&io::load_qmodel(p)?, &batch, false)?.0,
        None => teacher.clone(),
    };
    let report = evaluate(&teacher, &student, labels_v.as_deref())?;
    let text = serde_json::to_string_pretty(&report).expect("plain struct");
    println!("{text}");
    let Some(out) = out else { return Ok(None) };
    let mut manifest = RunManifest::new("eval", json!({}), None);
    manifest.add_input("model", model)?;
    if let Some(p) = qmodel {
        manifest.add_input("qmodel", p)?;
    }
    manifest.add_input("data", data)?;
    if let Some(p) = labels {
        manifest.add_input("labels", p)?;
    }
    prepare_out(out)?;
    io::write_json_report(&out.join("eval.json"), &report)?;
    Ok(Some((out.to_path_buf(), manifest)))
}

fn theory(cfg: &MonteCarloConfig, out: &Path) -> Result<Emitted> {
    let sums = rounding_error_sum_stats(cfg)?;
    let mssr = mssr_scaling_sim(cfg)?;
    let manifest = RunManifest::new("theory", serde_json::to_value(cfg).expect("plain struct"), Some(cfg.seed));
    prepare_out(out)?;
    io::write_csv(
        &out.join("theory.csv"),
        &[
            "k",
            "empirical_mean",
            "empirical_std",
            "predicted_std",
            "mssr_std",
            "step_predicted_std",
            "mssr_mean",
            "redrawn",
        ],
        |w| {
            for (s, m) in sums.iter().zip(&mssr.rows) {
                w.write_record([
                    s.k.to_string(),
                    fmt_sig9(s.empirical_mean),
                    fmt_sig9(s.empirical_std),
                    fmt_sig9(s.predicted_std),
                    fmt_sig9(m.mssr_std),
                    fmt_sig9(s.step_predicted_std),
                    fmt_sig9(m.mssr_mean),
                    (s.redrawn + m.redrawn).to_string(),
                ])?;
            }
            Ok(())
        },
    )?;
    io::write_json_report(
        &out.join("summary.json"),
        &json!({ "slope": mssr.slope, "intercept": mssr.intercept }),
    )?;
    println!("fitted log-log slope of std(MSSR) vs k: {}", fmt_sig9(mssr.slope));
    Ok((out.to_path_buf(), manifest))
}
