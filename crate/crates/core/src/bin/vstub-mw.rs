use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use vstub_core::harness::{
    self, emit_report, BenchConfig, BenchMode, Deployment, HarnessError, ReportFormat, Summary, Testbed,
    TrialRecord,
};
use vstub_core::reconfig::description_for_key;
use vstub_core::service_host::{self, catalog};
use vstub_core::{RegistryClient, RegistryServer, StubCache};

const EXIT_SETUP: u8 = 2;
const EXIT_TRIAL: u8 = 3;
const EXIT_PARSE: u8 = 4;

#[derive(Parser)]
#[command(name = "vstub-mw", version, about = "Service registry, device services and binding benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a service registry until killed.
    Registry {
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
    /// Run a bundled device service until killed.
    Service {
        #[arg(long)]
        registry: String,
        #[arg(long)]
        key: String,
        /// Device type: light or ac.
        #[arg(long = "type")]
        service_type: String,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
    /// Measure reconfiguration latency with and without the stub cache.
    Bench(BenchArgs),
    /// Replay scripted scenarios.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Inspect a stub cache.
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// One or more of cached, uncached, cold-clear.
    #[arg(long, value_delimiter = ',', default_value = "cached,uncached")]
    mode: Vec<BenchMode>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Bindings per trigger.
    #[arg(long, default_value_t = 1)]
    bindings: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Untimed warm-up triggers in cached mode.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// CSV output path; CSV goes to stdout when omitted and --text is not given.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the per-mode summary table.
    #[arg(long)]
    text: bool,
    /// Run registry and services as threads instead of child processes.
    #[arg(long)]
    in_process: bool,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Replay a scenario file and print its action trace.
    Run {
        file: PathBuf,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CacheCommand {
    /// Populate a fresh cache from a registry and print its entries as JSON.
    Dump {
        #[arg(long)]
        registry: String,
        /// Keys to resolve; defaults to every registered key.
        #[arg(long, value_delimiter = ',')]
        keys: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_PARSE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Registry { listen } => run_registry(&listen),
        Command::Service {
            registry,
            key,
            service_type,
            listen,
        } => run_service(&registry, &key, &service_type, &listen),
        Command::Bench(args) => run_bench(&args),
        Command::Scenario {
            command: ScenarioCommand::Run { file, report },
        } => run_scenario(&file, report.as_deref()),
        Command::Cache {
            command: CacheCommand::Dump { registry, keys },
        } => run_cache_dump(&registry, &keys),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("vstub-mw: {message}");
            ExitCode::from(code)
        }
    }
}

type CliResult = Result<(), (u8, String)>;

fn harness_err(e: HarnessError) -> (u8, String) {
    (e.exit_code() as u8, e.to_string())
}

fn announce(words: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "LISTENING {words}");
    let _ = out.flush();
}

fn block_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn run_registry(listen: &str) -> CliResult {
    let server = RegistryServer::start(listen).map_err(|e| (EXIT_SETUP, format!("registry on {listen}: {e}")))?;
    announce(&server.local_addr().to_string());
    block_forever()
}

fn run_service(registry: &str, key: &str, service_type: &str, listen: &str) -> CliResult {
    let svc = catalog::for_type(service_type, key)
        .ok_or_else(|| (EXIT_SETUP, format!("unknown service type {service_type:?}")))?;
    let handle = service_host::start_service(svc, registry, listen).map_err(|e| (EXIT_SETUP, e.to_string()))?;
    let d = handle.descriptor();
    announce(&format!("{} {} epoch={}", handle.local_addr(), d.key, d.epoch));
    block_forever()
}

fn run_bench(args: &BenchArgs) -> CliResult {
    let deployment = if args.in_process {
        Deployment::InProcess
    } else {
        let exe = std::env::current_exe().map_err(|e| (EXIT_SETUP, format!("locating own executable: {e}")))?;
        Deployment::Subprocess { exe }
    };
    let mut configs = Vec::new();
    for &mode in &args.mode {
        let cfg = BenchConfig {
            mode,
            trials: args.trials,
            warmup_trials: args.warmup,
            bindings_per_trigger: args.bindings,
            deployment: deployment.clone(),
            seed: args.seed,
            ..BenchConfig::default()
        };
        cfg.validate().map_err(harness_err)?;
        configs.push(cfg);
    }
    let first = configs.first().ok_or((EXIT_SETUP, "no benchmark mode given".to_string()))?;
    let bed = Testbed::start(deployment, &harness::bench_services(&first.location, args.bindings))
        .map_err(harness_err)?;

    let mut records: Vec<TrialRecord> = Vec::new();
    let mut summaries: Vec<Summary> = Vec::new();
    let mut failure = None;
    for cfg in &configs {
        match harness::run_bench_on(&bed, cfg) {
            Ok(run) => {
                records.extend(run.records);
                summaries.push(run.summary);
            }
            Err(HarnessError::Trial { index, message, partial }) => {
                records.extend(partial);
                failure = Some((EXIT_TRIAL, format!("{} trial {index}: {message}", cfg.mode)));
                break;
            }
            Err(e) => return Err(harness_err(e)),
        }
    }
    drop(bed);

    let csv = emit_report(&records, &summaries, ReportFormat::Csv).map_err(harness_err)?;
    match &args.out {
        Some(path) => std::fs::write(path, csv).map_err(|e| (EXIT_SETUP, format!("{}: {e}", path.display())))?,
        None if !args.text => print!("{csv}"),
        None => {}
    }
    if args.text {
        print!("{}", emit_report(&records, &summaries, ReportFormat::Text).map_err(harness_err)?);
    }
    failure.map_or(Ok(()), Err)
}

fn run_scenario(file: &std::path::Path, report_path: Option<&std::path::Path>) -> CliResult {
    let report = harness::run_scenario(file).map_err(harness_err)?;
    for (i, ev) in report.events.iter().enumerate() {
        let e = &ev.event;
        println!("event {i}: {} {} {}", e.user_id, e.phase.as_str(), e.location);
        for a in &ev.actions {
            println!("  {:<14} {:<32} {}", a.policy_id, a.action, a.outcome.label());
        }
    }
    for (key, state) in &report.device_states {
        println!("state {key} {state}");
    }
    let s = &report.cache_stats;
    println!(
        "cache hits={} misses={} lookups={} failovers={}",
        s.hits, s.misses, s.remote_lookups, report.failovers
    );
    if let Some(path) = report_path {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, json + "\n").map_err(|e| (EXIT_SETUP, format!("{}: {e}", path.display())))?;
    }
    if report.errors > 0 {
        return Err((EXIT_TRIAL, format!("{} action(s) failed", report.errors)));
    }
    Ok(())
}

fn run_cache_dump(registry: &str, keys: &[String]) -> CliResult {
    let client = Arc::new(RegistryClient::connect(registry).map_err(|e| (EXIT_SETUP, e.to_string()))?);
    let descriptions = if keys.is_empty() {
        client.list("/").map_err(|e| (EXIT_SETUP, e.to_string()))?
    } else {
        keys.iter().map(|k| description_for_key(k)).collect()
    };
    let cache = StubCache::new(Arc::clone(&client));
    for d in &descriptions {
        cache
            .get_virtual_stub(d)
            .map_err(|e| (EXIT_SETUP, format!("{}: {e}", d.key)))?;
    }
    println!("{}", serde_json::to_string_pretty(&cache.dump()).expect("dump serializes"));
    Ok(())
}
