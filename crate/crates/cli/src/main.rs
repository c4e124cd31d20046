//! `couplet` — command-line entry point for the coupling runtime.
//!
//! Subcommands: `validate`, `run`, `bench-speed`, `bench-overhead`,
//! `relay`, `demo-canal`. Exit codes: 0 on success, 1 on validation
//! failure, 2 on runtime abort, 64 on usage errors.

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use couplet_core::bench::{
    default_sizes, overhead_csv, overhead_table, run_overhead_experiment, run_pingpong,
    speed_csv, speed_table, BenchTransport,
};
use couplet_core::canal::{
    default_resolutions, efficiency_csv, efficiency_sweep, efficiency_table, CanalSpec,
};
use couplet_core::config::{parse_config, ConfigError};
use couplet_core::relay::{Relay, RelayConfig, DEFAULT_BUFFER_LIMIT};
use couplet_core::runtime::{
    run_manager, run_simulation, ImplRegistry, ManagerCfg, ProcessRole, RelayClientCfg,
    RunOptions, RunPlan,
};

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 1;
const EXIT_ABORT: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "couplet",
    about = "Coupling library and runtime for time-driven multiscale simulations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration file and print any violations.
    Validate {
        /// Path to the configuration file.
        config: String,
    },
    /// Execute a configuration.
    Run(RunArgs),
    /// Measure ping-pong latency and throughput per message size.
    BenchSpeed(BenchSpeedArgs),
    /// Measure startup overhead over submodel and conduit counts.
    BenchOverhead(BenchOverheadArgs),
    /// Run the cross-cluster forwarding relay.
    Relay(RelayArgs),
    /// Run the canal demo and report coupling efficiency.
    DemoCanal(DemoCanalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the configuration file.
    config: String,
    /// Simulation manager address (host:port) for distributed runs.
    /// Without it, everything runs inside this process.
    #[arg(long)]
    manager: Option<String>,
    /// Place an instance on a manager (repeatable): INSTANCE=MANAGER.
    /// Unplaced instances go to the manager named `main`.
    #[arg(long = "place", value_name = "INSTANCE=MANAGER")]
    place: Vec<String>,
    /// Which manager this process runs (distributed runs only).
    #[arg(long = "as", default_value = "main", value_name = "MANAGER")]
    manager_id: String,
    /// Serve the simulation manager from this process at --manager.
    #[arg(long)]
    serve_manager: bool,
    /// Bind address of this manager's data listener.
    #[arg(long, default_value = "127.0.0.1:0")]
    bind: String,
    /// Relay to dial for destinations outside --local-range.
    #[arg(long)]
    relay: Option<String>,
    /// Port range (LO:HI) considered local when --relay is set.
    #[arg(long, value_name = "LO:HI")]
    local_range: Option<String>,
}

#[derive(Args)]
struct BenchSpeedArgs {
    /// Transport to measure: in-process, socket or relay.
    #[arg(long)]
    transport: String,
    /// Message sizes in bytes (comma separated). Default: 0 and 2^i KiB
    /// up to 64 MiB.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Round trips per size.
    #[arg(long, default_value_t = 100)]
    round_trips: usize,
    /// Write the CSV to this file instead of stdout.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct BenchOverheadArgs {
    /// Submodel counts (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    n_values: Vec<usize>,
    /// Conduit counts (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    m_values: Vec<usize>,
    /// Timed repeats per configuration; the median is kept.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Write the CSV to this file instead of stdout.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct RelayArgs {
    /// Name of this relay; the lexicographically smaller peer initiates
    /// each link.
    #[arg(long)]
    name: String,
    /// Listen address for local clients and peer links.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Local cluster port range, LO:HI inclusive.
    #[arg(long, value_name = "LO:HI")]
    range: String,
    /// Peer relay (repeatable): NAME=HOST:PORT,LO:HI.
    #[arg(long = "peer", value_name = "NAME=HOST:PORT,LO:HI")]
    peers: Vec<String>,
    /// Pending-buffer limit in bytes.
    #[arg(long, default_value_t = DEFAULT_BUFFER_LIMIT)]
    buffer_limit: usize,
}

#[derive(Args)]
struct DemoCanalArgs {
    /// Grid resolutions in points per metre (comma separated).
    #[arg(long, value_delimiter = ',')]
    n_values: Option<Vec<f64>>,
    /// Stencil iterations per run.
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// Canal length in metres.
    #[arg(long, default_value_t = 600.0)]
    length_m: f64,
    /// Write the CSV to this file instead of stdout.
    #[arg(long)]
    out: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Run(args) => cmd_run(args),
        Command::BenchSpeed(args) => cmd_bench_speed(args),
        Command::BenchOverhead(args) => cmd_bench_overhead(args),
        Command::Relay(args) => cmd_relay(args),
        Command::DemoCanal(args) => cmd_demo_canal(args),
    };
    ExitCode::from(code)
}

fn read_config(path: &str) -> Result<couplet_core::config::ConfigDocument, u8> {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(err) => {
            eprintln!("cannot read {path}: {err}");
            return Err(EXIT_VALIDATION);
        }
    };
    parse_config(&text).map_err(|err| {
        match err {
            ConfigError::InvalidTopology(violations) => {
                for violation in violations {
                    println!("{violation}");
                }
            }
            other => println!("{other}"),
        }
        EXIT_VALIDATION
    })
}

fn cmd_validate(path: &str) -> u8 {
    match read_config(path) {
        Ok(_) => EXIT_OK,
        Err(code) => code,
    }
}

fn parse_range(text: &str) -> Result<(u16, u16), String> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| format!("expected LO:HI, got {text:?}"))?;
    let lo = lo.parse().map_err(|_| format!("bad port {lo:?}"))?;
    let hi = hi.parse().map_err(|_| format!("bad port {hi:?}"))?;
    Ok((lo, hi))
}

fn cmd_run(args: RunArgs) -> u8 {
    let doc = match read_config(&args.config) {
        Ok(doc) => doc,
        Err(code) => return code,
    };
    let mut plan = RunPlan::single(doc);
    for placement in &args.place {
        let Some((instance, manager)) = placement.split_once('=') else {
            eprintln!("bad --place {placement:?}: expected INSTANCE=MANAGER");
            return EXIT_USAGE;
        };
        plan.placement
            .insert(instance.to_string(), manager.to_string());
        plan.managers
            .entry(manager.to_string())
            .or_insert_with(ManagerCfg::default);
    }
    let relay = match (&args.relay, &args.local_range) {
        (Some(addr), Some(range)) => match parse_range(range) {
            Ok(local_ports) => Some(RelayClientCfg {
                addr: addr.clone(),
                local_ports,
            }),
            Err(err) => {
                eprintln!("bad --local-range: {err}");
                return EXIT_USAGE;
            }
        },
        (Some(_), None) | (None, Some(_)) => {
            eprintln!("--relay and --local-range must be given together");
            return EXIT_USAGE;
        }
        (None, None) => None,
    };
    if let Some(cfg) = plan.managers.get_mut(&args.manager_id) {
        cfg.bind = args.bind.clone();
        cfg.relay = relay;
    }

    let impls = ImplRegistry::with_builtins();
    let options = RunOptions::default();
    let report = match &args.manager {
        None => run_simulation(&plan, &impls, &options),
        Some(addr) => {
            let role = ProcessRole {
                manager_id: args.manager_id.clone(),
                sim_manager: addr.clone(),
                serve_sim_manager: args.serve_manager,
            };
            run_manager(&plan, &impls, &role, &options)
        }
    };
    match report {
        Ok(report) if report.success() => {
            println!("all instances deregistered");
            EXIT_OK
        }
        Ok(report) => {
            eprintln!("run aborted: {:?}", report.outcome);
            EXIT_ABORT
        }
        Err(err) => {
            eprintln!("cannot start run: {err}");
            EXIT_VALIDATION
        }
    }
}

fn write_csv(out: &Option<String>, csv: &str) -> u8 {
    match out {
        Some(path) => match std::fs::write(path, csv) {
            Ok(()) => EXIT_OK,
            Err(err) => {
                eprintln!("cannot write {path}: {err}");
                EXIT_ABORT
            }
        },
        None => {
            print!("{csv}");
            EXIT_OK
        }
    }
}

fn cmd_bench_speed(args: BenchSpeedArgs) -> u8 {
    let Some(transport) = BenchTransport::parse(&args.transport) else {
        eprintln!(
            "unknown transport {:?}: expected in-process, socket or relay",
            args.transport
        );
        return EXIT_USAGE;
    };
    let sizes = args
        .sizes
        .unwrap_or_else(|| default_sizes(64 * 1024 * 1024));
    match run_pingpong(transport, &sizes, args.round_trips) {
        Ok(report) => {
            print!("{}", speed_table(&report));
            write_csv(&args.out, &speed_csv(&report))
        }
        Err(err) => {
            eprintln!("bench-speed failed: {err}");
            EXIT_ABORT
        }
    }
}

fn cmd_bench_overhead(args: BenchOverheadArgs) -> u8 {
    match run_overhead_experiment(&args.n_values, &args.m_values, args.repeats) {
        Ok(report) => {
            print!("{}", overhead_table(&report));
            write_csv(&args.out, &overhead_csv(&report))
        }
        Err(err) => {
            eprintln!("bench-overhead failed: {err}");
            EXIT_ABORT
        }
    }
}

fn cmd_relay(args: RelayArgs) -> u8 {
    let local_range = match parse_range(&args.range) {
        Ok(range) => range,
        Err(err) => {
            eprintln!("bad --range: {err}");
            return EXIT_USAGE;
        }
    };
    let mut config = RelayConfig::new(&args.name, &args.listen, local_range);
    config.buffer_limit = args.buffer_limit;
    for peer in &args.peers {
        let parsed = (|| -> Option<(String, String, (u16, u16))> {
            let (name, rest) = peer.split_once('=')?;
            let (addr, range) = rest.rsplit_once(',')?;
            let range = parse_range(range).ok()?;
            Some((name.to_string(), addr.to_string(), range))
        })();
        let Some((name, addr, range)) = parsed else {
            eprintln!("bad --peer {peer:?}: expected NAME=HOST:PORT,LO:HI");
            return EXIT_USAGE;
        };
        config = config.with_peer(name, addr, range);
    }
    match Relay::start(config) {
        Ok(relay) => {
            println!("relay {} listening on {}", args.name, relay.local_addr());
            // Runs until killed.
            loop {
                std::thread::park();
            }
        }
        Err(err) => {
            eprintln!("cannot start relay: {err}");
            EXIT_VALIDATION
        }
    }
}

fn cmd_demo_canal(args: DemoCanalArgs) -> u8 {
    let resolutions = args.n_values.unwrap_or_else(default_resolutions);
    let template = CanalSpec {
        length_m: args.length_m,
        iterations: args.iterations,
        ..CanalSpec::default()
    };
    match efficiency_sweep(&resolutions, &template) {
        Ok(report) => {
            print!("{}", efficiency_table(&report));
            write_csv(&args.out, &efficiency_csv(&report))
        }
        Err(err) => {
            eprintln!("demo-canal failed: {err}");
            EXIT_ABORT
        }
    }
}
