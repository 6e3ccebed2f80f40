use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use zeroride::gateway::{export_stats, parse_time};
use zeroride::privacy::{k_report, KeyService, PrivacyError, QuasiField, SealedKv};
use zeroride::quickin::{retention_sweep, RetentionConfig};
use zeroride::sim::{run_scenario, synthetic_day, ScenarioConfig};
use zeroride::store::{DirKv, KvStore};
use zeroride::transit::CompletedSessionStore;
use zeroride::ServiceId;

/// Zero-interaction transit ticketing: simulation and store tooling.
#[derive(Parser)]
#[command(name = "zeroride", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic one-day scenario config.
    SynthConfig {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        riders: usize,
        #[arg(long, default_value_t = 10)]
        buses: usize,
        #[arg(long, default_value_t = 2)]
        lines: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario and write its metrics JSON.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep the encrypted stores in this directory.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// k-anonymity report over archived rides.
    AuditK {
        #[arg(long)]
        store: PathBuf,
        /// Comma-separated quasi-identifiers: age_range, gender, start_pos, end_pos.
        #[arg(long, default_value = "age_range")]
        quasi: String,
        /// Restrict to one service.
        #[arg(long)]
        service: Option<String>,
    },
    /// Per-day ride counts for a service; refused below the k threshold.
    ExportStats {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        service: String,
        /// Unix seconds or RFC3339.
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long, default_value_t = zeroride::gateway::DEFAULT_K_THRESHOLD)]
        k_threshold: u64,
    },
    /// Delete route records older than the retention period.
    SweepRetention {
        #[arg(long)]
        store: PathBuf,
        /// Unix seconds or RFC3339.
        #[arg(long)]
        now: String,
        #[arg(long, default_value_t = zeroride::quickin::DEFAULT_RETENTION_DAYS)]
        max_age_days: i64,
    },
}

fn open_store(dir: &Path) -> Result<SealedKv> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let keys = KeyService::open_or_create(&dir.join("keys").join("master.json")).context("opening master key")?;
    let kv = DirKv::open(dir.join("data")).context("opening store")?;
    Ok(SealedKv::new(Arc::new(kv), Arc::new(keys)))
}

fn time_arg(s: &str) -> Result<zeroride::Timestamp> {
    parse_time(s).with_context(|| format!("not a unix time or RFC3339 timestamp: {s}"))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn services_in(store: &SealedKv) -> Result<Vec<String>> {
    let names: std::collections::BTreeSet<String> = store
        .keys_with_prefix("completed/")?
        .iter()
        .filter_map(|k| k.strip_prefix("completed/")?.split('/').next().map(str::to_owned))
        .collect();
    Ok(names.into_iter().collect())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SynthConfig {
            seed,
            riders,
            buses,
            lines,
            out,
        } => {
            let cfg = synthetic_day(seed, riders, buses, lines);
            write_out(out.as_deref(), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
        }
        Command::Simulate {
            config,
            seed,
            out,
            store,
        } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg: ScenarioConfig = serde_json::from_str(&text).context("parsing scenario config")?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let sealed = match &store {
                Some(dir) => open_store(dir)?,
                None => SealedKv::new(
                    Arc::new(zeroride::store::MemoryKv::new()),
                    Arc::new(KeyService::ephemeral()),
                ),
            };
            let run = run_scenario(&cfg, sealed)?;
            write_out(out.as_deref(), &(run.metrics.to_json() + "\n"))?;
        }
        Command::AuditK { store, quasi, service } => {
            let quasi: Vec<QuasiField> = quasi
                .split(',')
                .map(|q| QuasiField::parse(q.trim()).with_context(|| format!("unknown quasi-identifier {q}")))
                .collect::<Result<_>>()?;
            let sealed = open_store(&store)?;
            let services = match service {
                Some(s) => vec![s],
                None => services_in(&sealed)?,
            };
            let mut records = Vec::new();
            for s in services {
                records.extend(CompletedSessionStore::new(sealed.clone(), &ServiceId::new(s)).records()?);
            }
            if records.is_empty() {
                bail!("no archived rides in {}", store.display());
            }
            print!("{}", k_report(&records, &quasi)?.to_csv());
        }
        Command::ExportStats {
            store,
            service,
            from,
            to,
            k_threshold,
        } => {
            let (from, to) = (time_arg(&from)?, time_arg(&to)?);
            if to < from {
                bail!("--to precedes --from");
            }
            let sealed = open_store(&store)?;
            let records = CompletedSessionStore::new(sealed, &ServiceId::new(service)).records()?;
            match export_stats(&records, from, to, k_threshold) {
                Ok(csv) => print!("{csv}"),
                Err(PrivacyError::BelowThreshold { k_min, threshold, .. }) => {
                    eprintln!("export refused: smallest group has {k_min} rides, threshold is {threshold}");
                    return Ok(ExitCode::from(2));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::SweepRetention {
            store,
            now,
            max_age_days,
        } => {
            let now = time_arg(&now)?;
            if max_age_days <= 0 {
                bail!("--max-age-days must be positive");
            }
            let kv = DirKv::open(store.join("data")).context("opening store")?;
            let deleted = retention_sweep(&kv as &dyn KvStore, now, &RetentionConfig { max_age_days })?;
            println!("deleted {} route records", deleted.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
