use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use grn_core::checkpoint::Checkpoint;
use grn_core::config::RunConfig;
use grn_core::graph::{load_csv, synth_generate, SplitMode, SynthParams};
use grn_core::perf::{run_bench, BenchSpec};
use grn_core::retention::{recurrent_step, Paradigm};
use grn_core::training::{evaluate, fit, MetricsReport};
use grn_core::verify::{run_verify, VerifyOptions};
use grn_core::{GrnError, Matrix, Result, RngState};

#[derive(Parser)]
#[command(name = "grn", version, about = "Graph retention networks on temporal event streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config; writes a checkpoint and per-epoch metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score the test segment of a dataset with a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        setting: Option<Setting>,
        #[arg(long, value_enum, default_value = "recurrent")]
        paradigm: ParadigmArg,
        #[arg(long)]
        chunk_size: Option<usize>,
        /// Also write the metrics line to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suite and print one line per property.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only run properties whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Directory holding wikipedia.csv and uci.csv.
        #[arg(long, env = "GRN_DATA_DIR")]
        data_dir: Option<PathBuf>,
        /// Print the report as JSON instead of text.
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true)]
        mutate_recurrent_sign: bool,
    },
    /// Per-event latency of the three paradigms over history lengths.
    Bench {
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["parallel", "recurrent", "chunkwise"])]
        paradigms: Vec<ParadigmArg>,
        #[arg(long, value_delimiter = ',', default_values = ["100", "1000", "10000"])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["64"])]
        chunk_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Timed events per repeat.
        #[arg(long, default_value_t = 256)]
        events: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic periodic user-item stream as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Node id sidecar; defaults to `<out>.ids.csv`.
        #[arg(long)]
        id_map: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        num_users: Option<usize>,
        #[arg(long)]
        num_items: Option<usize>,
        #[arg(long)]
        period: Option<usize>,
        #[arg(long)]
        noise_frac: Option<f64>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        edge_feat_dim: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Setting {
    Transductive,
    Inductive,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ParadigmArg {
    Parallel,
    Recurrent,
    Chunkwise,
}

fn paradigm(arg: ParadigmArg, chunk: Option<usize>) -> Result<Paradigm> {
    let name = match arg {
        ParadigmArg::Parallel => "parallel",
        ParadigmArg::Recurrent => "recurrent",
        ParadigmArg::Chunkwise => "chunkwise",
    };
    Paradigm::parse(name, chunk)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Train { config } => train(&config),
        Command::Eval {
            checkpoint,
            data,
            setting,
            paradigm: p,
            chunk_size,
            out,
        } => {
            let p = paradigm(p, chunk_size)?;
            eval(&checkpoint, &data, setting, p, out.as_deref())
        }
        Command::Verify {
            seed,
            filter,
            data_dir,
            json,
            mutate_recurrent_sign,
        } => {
            let mut opts = VerifyOptions {
                seed,
                data_dir,
                filter,
                ..VerifyOptions::default()
            };
            if mutate_recurrent_sign {
                opts.kernel = sign_flipped_step;
            }
            verify(&opts, json)
        }
        Command::Bench {
            paradigms,
            lengths,
            chunk_sizes,
            repeats,
            events,
            dim,
            seed,
            out,
        } => {
            let mut list = Vec::new();
            for p in paradigms {
                if p == ParadigmArg::Chunkwise {
                    for &b in &chunk_sizes {
                        list.push(paradigm(p, Some(b))?);
                    }
                } else {
                    list.push(paradigm(p, None)?);
                }
            }
            let spec = BenchSpec {
                paradigms: list,
                lengths,
                repeats,
                events,
                dim,
                seed,
                ..BenchSpec::default()
            };
            bench(&spec, out.as_deref())
        }
        Command::Synth {
            out,
            id_map,
            seed,
            num_users,
            num_items,
            period,
            noise_frac,
            length,
            edge_feat_dim,
        } => {
            let d = SynthParams::default();
            let params = SynthParams {
                num_users: num_users.unwrap_or(d.num_users),
                num_items: num_items.unwrap_or(d.num_items),
                period: period.unwrap_or(d.period),
                noise_frac: noise_frac.unwrap_or(d.noise_frac),
                length: length.unwrap_or(d.length),
                edge_feat_dim: edge_feat_dim.unwrap_or(d.edge_feat_dim),
            };
            synth(&params, seed, &out, id_map)
        }
    }
}

fn sign_flipped_step(s: &mut Matrix, q: &[f64], k: &[f64], v: &[f64], w: f64, out: &mut [f64]) {
    recurrent_step(s, q, k, v, -w, out)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn train(config: &Path) -> Result<u8> {
    let mut cfg = RunConfig::load(config)?;
    let stream = cfg.load_stream()?;
    for p in [&cfg.output.checkpoint, &cfg.output.metrics, &cfg.output.timing] {
        create_parent(p)?;
    }
    let mut metrics = BufWriter::new(File::create(&cfg.output.metrics)?);
    let mut timing = BufWriter::new(File::create(&cfg.output.timing)?);
    let mut write_err: Option<GrnError> = None;
    let mut on_report = |r: &MetricsReport| {
        let lines = r.to_json_line(false).and_then(|m| Ok((m, r.to_json_line(true)?)));
        let written = lines.and_then(|(m, t)| {
            writeln!(metrics, "{m}")?;
            writeln!(timing, "{t}")?;
            eprintln!("{t}");
            Ok(())
        });
        if let Err(e) = written {
            write_err.get_or_insert(e);
        }
    };
    let outcome = fit(&stream, &cfg.model, &cfg.train, None, &mut on_report);
    metrics.flush()?;
    timing.flush()?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let outcome = outcome?;

    let mut ck = Checkpoint::new(&outcome.model, Some(&cfg.train), Some(&outcome.adam));
    ck.best_epoch = Some(outcome.best_epoch);
    ck.save(&cfg.output.checkpoint)?;

    let summary = serde_json::json!({
        "kind": "summary",
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "best_val_ap": outcome.best_val_ap,
        "test_ap": outcome.test.as_ref().map(|t| t.ap),
        "test_auc_roc": outcome.test.as_ref().map(|t| t.auc_roc),
        "checkpoint": cfg.output.checkpoint,
    });
    println!("{summary}");
    Ok(0)
}

fn eval(ckpt: &Path, data: &Path, setting: Option<Setting>, p: Paradigm, out: Option<&Path>) -> Result<u8> {
    let ck = Checkpoint::load(ckpt)?;
    let model = ck.to_model()?;
    let mut train = ck
        .train
        .clone()
        .ok_or_else(|| GrnError::Checkpoint("checkpoint carries no training config".into()))?;
    let stream = load_csv(data)?;
    if stream.edge_feat_dim != ck.model.edge_feat_dim {
        return Err(GrnError::Checkpoint(format!(
            "checkpoint expects {} edge features but {} has {}",
            ck.model.edge_feat_dim,
            data.display(),
            stream.edge_feat_dim
        )));
    }
    if let Some(s) = setting {
        train.split.mode = match s {
            Setting::Transductive => SplitMode::Transductive,
            Setting::Inductive => SplitMode::Inductive,
        };
    }
    let report = evaluate(&model, &stream, &train, p, None)?;
    let line = report.to_json_line(false)?;
    println!("{line}");
    if let Some(out) = out {
        create_parent(out)?;
        fs::write(out, format!("{line}\n"))?;
    }
    Ok(0)
}

fn verify(opts: &VerifyOptions, json: bool) -> Result<u8> {
    let report = run_verify(opts);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for r in &report.results {
            println!("{}", r.line());
        }
        println!();
        print!("{}", report.traceability_table());
        let failed = report.failures().count();
        let skipped = report
            .results
            .iter()
            .filter(|r| matches!(r.outcome, grn_core::verify::Outcome::Skip { .. }))
            .count();
        println!();
        println!(
            "{} properties in {} families: {} passed, {failed} failed, {skipped} skipped",
            report.results.len(),
            report.families().len(),
            report.results.len() - failed - skipped,
        );
    }
    Ok(if report.passed() { 0 } else { 1 })
}

fn bench(spec: &BenchSpec, out: Option<&Path>) -> Result<u8> {
    let report = run_bench(spec)?;
    for row in &report.rows {
        println!("{}", serde_json::to_string(row)?);
    }
    println!("{}", serde_json::to_string(&report.constant_cost)?);
    if let Some(out) = out {
        create_parent(out)?;
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(0)
}

fn synth(params: &SynthParams, seed: u64, out: &Path, id_map: Option<PathBuf>) -> Result<u8> {
    params.validate()?;
    let id_map = id_map.unwrap_or_else(|| {
        let mut name = out.file_stem().unwrap_or_default().to_os_string();
        name.push(".ids.csv");
        out.with_file_name(name)
    });
    for p in [out, id_map.as_path()] {
        let parent = p.parent().filter(|q| !q.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() || p.is_dir() {
            return Err(GrnError::InvalidArgument(format!("cannot write {}", p.display())));
        }
    }
    let stream = synth_generate(params, &mut RngState::new(seed).derive(0))?;
    let unwritable = |p: &Path, e: GrnError| match e {
        GrnError::Io(io) => GrnError::InvalidArgument(format!("cannot write {}: {io}", p.display())),
        other => other,
    };
    stream.write_csv(out).map_err(|e| unwritable(out, e))?;
    stream.write_id_map(&id_map).map_err(|e| unwritable(&id_map, e))?;
    println!(
        "{}",
        serde_json::json!({"events": stream.len(), "nodes": stream.num_nodes, "csv": out, "id_map": id_map})
    );
    Ok(0)
}
