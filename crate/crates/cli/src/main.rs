//! `decaf` — command-line driver for the decentralized LoRA simulator.
//!
//! Subcommands: `run`, `sweep`, `validate-topology`, `bench-tsvd`,
//! `constants`. Outputs are CSV/JSON written atomically (temp file, then
//! rename); stdout carries one progress line per sampled iteration and
//! warnings go to stderr. Failures print a single `error[category]: message`
//! line and exit nonzero.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use decaf_core::adapter::{gaussian_mat, AdapterPair};
use decaf_core::config::{parse_config_text, parse_override, RunConfig};
use decaf_core::lowrank::{frobenius_norm, tsvd};
use decaf_core::metrics::{ledger_csv, metrics_csv, MetricsRecord};
use decaf_core::rng::{stream, Purpose};
use decaf_core::topology::{build_topology, build_torus, spectral_report, MixingMatrix, TopologyKind};
use decaf_core::trainer::{run_observed, RunResult};

#[derive(Parser)]
#[command(name = "decaf", version, about = "Decentralized LoRA fine-tuning simulator")]
struct Cli {
    /// Worker threads (0 = hardware parallelism). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics.csv, summary.json, ledger.csv.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Also write final factors to <out>/adapters/agent_<i>_{A,B}.csv.
        #[arg(long)]
        dump_adapters: bool,
    },
    /// Train once per value of one axis, everything else fixed.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of r, topology, n_agents, tau, alpha, heterogeneity.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Output directory; each value gets a `<axis>=<value>` subdirectory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a mixing matrix and print its spectral quantities.
    ValidateTopology {
        #[arg(long)]
        kind: TopologyKind,
        #[arg(long)]
        agents: Option<usize>,
        /// Explicit torus grid rows.
        #[arg(long)]
        rows: Option<usize>,
        /// Explicit torus grid columns.
        #[arg(long)]
        cols: Option<usize>,
        /// CSV mixing matrix for `--kind custom`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Time truncated SVD on random matrices and report its accuracy.
    BenchTsvd {
        /// Square sizes d = k to time.
        #[arg(long, value_delimiter = ',', default_values_t = vec![16, 32, 64, 128])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a configuration and print the estimated problem constants.
    Constants {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// A resolved configuration plus the text it was resolved from.
struct Resolved {
    config: RunConfig,
    file_text: Option<String>,
}

impl ConfigArgs {
    /// File pairs, then `--set` overrides, then `DECAF_SEED`.
    fn resolve(&self) -> Result<Resolved> {
        let mut pairs = Vec::new();
        let mut file_text = None;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            pairs.extend(parse_config_text(&text)?);
            file_text = Some(text);
        }
        for o in &self.overrides {
            pairs.push(parse_override(o)?);
        }
        if let Ok(seed) = std::env::var("DECAF_SEED") {
            pairs.push(("seed".to_string(), seed));
        }
        let config = RunConfig::from_pairs(&pairs)?;
        config.validate()?;
        Ok(Resolved { config, file_text })
    }
}

/// Git blob hash: `sha256("blob <len>\0" ++ content)`.
fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn config_text(config: &RunConfig) -> String {
    config
        .to_pairs()
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(content.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn progress_line(prefix: &str, m: &MetricsRecord) {
    let cd = m
        .consensus_diff
        .map_or_else(|| "-".to_string(), |x| format!("{x:.3e}"));
    println!(
        "{prefix}iter={} global_loss={:.6e} grad_sq={:.3e} disagreement={:.3e} consensus_diff={cd} comm_bytes={}",
        m.iter, m.global_loss, m.avg_grad_norm_sq, m.disagreement, m.comm_bytes
    );
}

fn train(config: &RunConfig, prefix: &str) -> Result<RunResult> {
    let result = run_observed(config, &mut |m| progress_line(prefix, m))?;
    for w in &result.warnings {
        eprintln!("warning: {prefix}{w}");
    }
    Ok(result)
}

fn write_outputs(out: &Path, resolved: &Resolved, result: &RunResult, dump_adapters: bool) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let canonical = config_text(&result.config);
    let config: serde_json::Map<String, serde_json::Value> = result
        .config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::String(v)))
        .collect();
    let summary = serde_json::json!({
        "config": config,
        "input_hash": blob_hash(canonical.as_bytes()),
        "config_file_hash": resolved.file_text.as_ref().map(|t| blob_hash(t.as_bytes())),
        "summary": result.summary,
        "warnings": result.warnings,
    });
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&result.metrics))?;
    write_atomic(&out.join("ledger.csv"), &ledger_csv(&result.rounds))?;
    write_atomic(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    if dump_adapters {
        dump_states(&out.join("adapters"), &result.final_states)?;
    }
    if let Some(v) = &result.first_bound_violation {
        dump_states(&out.join("bound_violation").join(format!("iter_{}", v.iter)), &v.states)?;
    }
    Ok(())
}

fn dump_states(dir: &Path, states: &[AdapterPair]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, p) in states.iter().enumerate() {
        write_atomic(&dir.join(format!("agent_{i}_A.csv")), &p.a.to_csv())?;
        write_atomic(&dir.join(format!("agent_{i}_B.csv")), &p.b.to_csv())?;
    }
    Ok(())
}

fn validate_topology(
    kind: TopologyKind,
    agents: Option<usize>,
    rows: Option<usize>,
    cols: Option<usize>,
    file: Option<&Path>,
) -> Result<()> {
    let m = match (kind, rows, cols) {
        (TopologyKind::Custom, _, _) => match file {
            Some(f) => MixingMatrix::load_csv(f)?,
            None => bail!("--kind custom requires --file"),
        },
        (TopologyKind::Torus, Some(r), Some(c)) => build_torus(r, c)?,
        (_, None, None) => match agents {
            Some(n) => build_topology(kind, n)?,
            None => bail!("--agents is required for --kind {kind}"),
        },
        _ => bail!("--rows and --cols must be given together, and only with --kind torus"),
    };
    let report = spectral_report(&m)?;
    println!(
        "kind={} agents={} rho={:.12} spectral_gap={:.12} connected={}",
        m.kind(),
        m.n_agents(),
        report.rho,
        report.spectral_gap,
        report.connected
    );
    Ok(())
}

fn bench_tsvd(sizes: &[usize], rank: usize, reps: usize, seed: u64) -> Result<()> {
    if reps == 0 {
        bail!("--reps must be positive");
    }
    println!("d,k,r,reps,mean_secs,relative_error,tail_energy_gap");
    for (idx, &n) in sizes.iter().enumerate() {
        let m = gaussian_mat(n, n, 1.0, &mut stream(seed, Purpose::Probe, idx as u64, 0));
        let started = Instant::now();
        let mut last = None;
        for _ in 0..reps {
            last = Some(tsvd(&m, rank)?);
        }
        let secs = started.elapsed().as_secs_f64() / reps as f64;
        let t = last.expect("reps > 0");
        let err = frobenius_norm(&m.sub(&t.reconstruct()));
        let gap = (err - t.tail_energy.sqrt()).abs();
        println!(
            "{n},{n},{},{reps},{secs:.6e},{:.6e},{gap:.3e}",
            t.rank(),
            err / frobenius_norm(&m)
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { cfg, out, dump_adapters } => {
            let resolved = cfg.resolve()?;
            let result = train(&resolved.config, "")?;
            write_outputs(&out, &resolved, &result, dump_adapters)
        }
        Command::Sweep { cfg, axis, values, out } => {
            let resolved = cfg.resolve()?;
            let key = RunConfig::sweep_key(&axis)?;
            let mut table = String::from("value,final_global_loss,final_avg_grad_norm_sq,comm_bytes_total\n");
            for value in &values {
                let mut config = resolved.config.clone();
                config.set(key, value)?;
                config.validate()?;
                let result = train(&config, &format!("{axis}={value} "))?;
                write_outputs(&out.join(format!("{axis}={value}")), &resolved, &result, false)?;
                let s = &result.summary;
                let _ = writeln!(
                    table,
                    "{value},{:.15e},{:.15e},{}",
                    s.final_global_loss, s.final_avg_grad_norm_sq, s.comm_bytes_total
                );
            }
            write_atomic(&out.join("sweep.csv"), &table)
        }
        Command::ValidateTopology { kind, agents, rows, cols, file } => {
            validate_topology(kind, agents, rows, cols, file.as_deref())
        }
        Command::BenchTsvd { sizes, rank, reps, seed } => bench_tsvd(&sizes, rank, reps, seed),
        Command::Constants { cfg } => {
            let resolved = cfg.resolve()?;
            let result = run_observed(&resolved.config, &mut |_| {})?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            let s = &result.summary;
            let c = &s.constants;
            println!("label={}", c.label);
            println!("L={:.6e}", c.l);
            println!("G={:.6e}", c.g);
            println!("c={:.6e}", c.c);
            println!("zeta={:.6e}", c.zeta);
            println!("kappa={:.6e}", c.kappa);
            println!("L_hat={:.6e}", s.l_hat);
            println!("trajectory_G={:.6e}", s.trajectory_g);
            println!("trajectory_c={:.6e}", s.trajectory_c);
            println!("step_size_limit={:.6e}", s.step_size_limit);
            Ok(())
        }
    }
}

fn category(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<decaf_core::Error>() {
        return e.category();
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "cli"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error[cli]: building thread pool: {e}");
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&err));
            ExitCode::FAILURE
        }
    }
}
