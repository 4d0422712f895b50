use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::num::NonZeroU64;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tracing::{info, warn};

use hive_core::csv::export_csv;
use hive_core::gateway::{open_serial, run_daemon, GatewayConfig};
use hive_core::hub::{serve, Hub, HubConfig, SensorSource};
use hive_core::mqtt::BrokerServer;
use hive_core::serial::StreamLink;
use hive_core::sim::{run_simulation, Scenario, SimulatedSensors, TraceConfig};
use hive_core::tsdb::{
    aggregate_window, open_ingestor, run_subscriber, AggFn, IngestConfig, Store, TELEMETRY_MEASUREMENT,
};
use hive_core::{Clock, SystemClock};

#[derive(Parser)]
#[command(name = "hive", version, about = "Beehive telemetry pipeline")]
struct Cli {
    /// More log output (repeatable). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the sensor hub, with trace-driven sensors, on a serial endpoint.
    Hub {
        /// Serve gateways connecting to this TCP address.
        #[arg(long, conflicts_with = "device", required_unless_present = "device")]
        listen: Option<String>,
        /// Serve on a serial character device.
        #[arg(long)]
        device: Option<PathBuf>,
        /// Trace configuration for the simulated sensors (JSON).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = hive_core::hub::DEFAULT_COUNTS_PER_KG)]
        counts_per_kg: f64,
        #[arg(long, default_value_t = 0)]
        tare: i64,
        /// Stop after this many seconds.
        #[arg(long)]
        run_for: Option<u64>,
    },
    /// Run the publishing gateway.
    Gateway {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_for: Option<u64>,
    },
    /// Run the MQTT broker.
    Broker {
        #[arg(long, default_value = "127.0.0.1:1883")]
        listen: String,
        #[arg(long)]
        run_for: Option<u64>,
    },
    /// Subscribe to telemetry and store it.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_for: Option<u64>,
    },
    /// Run a scenario on the virtual clock and print the report.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Virtual seconds per wall second; 0 runs unpaced.
        #[arg(long)]
        time_scale: Option<f64>,
        /// Keep spool, store and report.json here instead of a temp dir.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Print a field series from a store.
    Query {
        #[command(flatten)]
        q: QueryArgs,
    },
    /// Write a field series as CSV.
    ExportCsv {
        #[command(flatten)]
        q: QueryArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a saved simulation report.
    Report {
        /// report.json, or a simulate work dir containing one.
        path: PathBuf,
        /// Print the raw JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(clap::Args)]
struct QueryArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = TELEMETRY_MEASUREMENT)]
    measurement: String,
    #[arg(long)]
    field: String,
    /// Inclusive start, unix nanoseconds.
    #[arg(long, default_value_t = 0)]
    from: u64,
    /// Exclusive end, unix nanoseconds.
    #[arg(long, default_value_t = u64::MAX)]
    to: u64,
    /// Downsampling window in nanoseconds, aligned to --from.
    #[arg(long)]
    window: Option<NonZeroU64>,
    #[arg(long, default_value = "mean")]
    agg: AggFn,
    /// Only points of this hive.
    #[arg(long)]
    hive: Option<String>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

/// Write to stdout; a reader that went away (`hive ... | head`) is not an error.
fn emit(text: &str) -> CmdResult {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(anyhow::Error::from(e).context("writing output").into())
        }
        _ => Ok(()),
    }
}

fn stop_flag(run_for: Option<u64>) -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(secs) = run_for {
        let s = stop.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_secs(secs));
            s.store(true, Ordering::Relaxed);
        });
    }
    stop
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn run_hub(
    listen: Option<String>,
    device: Option<PathBuf>,
    trace: Option<PathBuf>,
    counts_per_kg: f64,
    tare: i64,
    run_for: Option<u64>,
) -> CmdResult {
    let trace: TraceConfig = match trace {
        Some(p) => read_json(&p)?,
        None => TraceConfig::default(),
    };
    let cfg = HubConfig {
        counts_per_kg,
        tare_offset: tare,
    };
    let mut hub = Hub::new(cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut sensors = SimulatedSensors::new(trace, counts_per_kg, tare);
    let clock = SystemClock::new();
    let stop = stop_flag(run_for);
    if let Some(path) = device {
        let f = fs::OpenOptions::new()
            .read(true)
            .write(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        let mut link = StreamLink::new(f.try_clone().context("cloning device handle")?, f);
        serve(&mut link, &mut hub, &mut sensors, &clock, &stop).context("hub loop")?;
        return Ok(());
    }
    let addr = listen.expect("clap enforces one endpoint");
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
    listener.set_nonblocking(true).context("listener mode")?;
    info!(addr = %listener.local_addr().context("local addr")?, "hub listening");
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((sock, peer)) => {
                info!(%peer, "gateway attached");
                sock.set_nonblocking(false).context("socket mode")?;
                let reader = sock.try_clone().context("cloning socket")?;
                let mut link = StreamLink::new(reader, sock);
                if let Err(e) = serve(&mut link, &mut hub, &mut sensors, &clock, &stop) {
                    warn!(error = %e, "link failed");
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                // Keep sampling between connections so windows stay complete.
                while hub.tick() * 1000 <= clock.now_ms() {
                    let r = sensors.read(hub.tick());
                    hub.sample_tick(&r);
                }
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(anyhow::Error::new(e).context("accept").into()),
        }
    }
    Ok(())
}

fn run_gateway(config: &Path, run_for: Option<u64>) -> CmdResult {
    let cfg: GatewayConfig = read_json(config)?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let endpoint = cfg
        .serial
        .clone()
        .ok_or_else(|| Failure::Usage("gateway config needs a `serial` endpoint".into()))?;
    let mut link = open_serial(&endpoint).with_context(|| format!("opening serial endpoint {endpoint}"))?;
    let stop = stop_flag(run_for);
    let counters = run_daemon(cfg, link.as_mut(), &SystemClock::new(), &stop).context("gateway")?;
    emit(&format!(
        "{}\n",
        serde_json::to_string(&counters).expect("counters serialize")
    ))
}

fn run_broker(listen: &str, run_for: Option<u64>) -> CmdResult {
    let server = BrokerServer::bind(listen).with_context(|| format!("binding {listen}"))?;
    info!(addr = %server.local_addr(), "broker listening");
    eprintln!("listening on {}", server.local_addr());
    match run_for {
        Some(secs) => {
            std::thread::sleep(Duration::from_secs(secs));
            server.shutdown();
        }
        None => server.wait(),
    }
    Ok(())
}

fn run_ingest(config: &Path, run_for: Option<u64>) -> CmdResult {
    let cfg: IngestConfig = read_json(config)?;
    let ingestor = open_ingestor(&cfg).map_err(|e| match e {
        hive_core::tsdb::IngestError::Rules(r) => Failure::Usage(r.to_string()),
        other => Failure::Runtime(other.into()),
    })?;
    let stop = stop_flag(run_for);
    let ingestor = run_subscriber(&cfg, ingestor, &stop).context("ingest")?;
    emit(&format!(
        "{}\n",
        serde_json::to_string(&ingestor.counters()).expect("counters serialize")
    ))
}

fn run_simulate(scenario: &Path, time_scale: Option<f64>, work_dir: Option<PathBuf>) -> CmdResult {
    let text = fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
    let mut s = Scenario::from_json(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    if time_scale.is_some() {
        s.time_scale = time_scale;
    }
    s.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let tmp;
    let dir = match work_dir {
        Some(d) => {
            fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
            d
        }
        None => {
            tmp = tempfile::TempDir::new().context("creating work dir")?;
            tmp.path().to_path_buf()
        }
    };
    let report = run_simulation(&s, &dir).context("simulation")?;
    let json = report.to_json();
    fs::write(dir.join("report.json"), &json).context("writing report.json")?;
    emit(&format!("{json}\n"))
}

fn series(q: &QueryArgs) -> Result<Vec<(u64, f64)>, Failure> {
    if q.from > q.to {
        return Err(Failure::Usage(format!("--from {} is after --to {}", q.from, q.to)));
    }
    if !q.store.is_dir() {
        return Err(Failure::Usage(format!("no store at {}", q.store.display())));
    }
    let store = Store::open(&q.store).context("opening store")?;
    let mut tags = std::collections::BTreeMap::new();
    if let Some(h) = &q.hive {
        tags.insert("hive_id".to_owned(), h.clone());
    }
    let raw = store
        .query_range(&q.measurement, &q.field, q.from, q.to, &tags)
        .context("query")?;
    Ok(match q.window {
        Some(w) => aggregate_window(&raw, q.from, w, q.agg),
        None => raw,
    })
}

fn run_query(q: &QueryArgs) -> CmdResult {
    let mut text = String::new();
    for (ts, v) in series(q)? {
        let _ = writeln!(text, "{ts}\t{v}");
    }
    emit(&text)
}

fn run_export(q: &QueryArgs, out: Option<PathBuf>) -> CmdResult {
    let csv = export_csv(&q.field, &series(q)?);
    match out {
        Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => emit(&csv)?,
    }
    Ok(())
}

fn run_report(path: &Path, json: bool) -> CmdResult {
    let file = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let report: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
    if json {
        return emit(&format!(
            "{}\n",
            serde_json::to_string_pretty(&report).expect("value serializes")
        ));
    }
    let mut out = String::new();
    let n = |k: &str| report.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
    let _ = writeln!(out, "cycles      {}/{}", n("cycles_completed"), n("cycles_expected"));
    let _ = writeln!(
        out,
        "messages    appended {}  published {}  stored {}  deduplicated {}",
        n("messages_appended"),
        n("messages_published"),
        n("messages_stored"),
        n("messages_deduplicated")
    );
    let _ = writeln!(
        out,
        "spool       pending {}  dropped {}  conservation {}",
        n("messages_in_spool"),
        n("messages_dropped"),
        if report["conservation_ok"].as_bool() == Some(true) {
            "ok"
        } else {
            "VIOLATED"
        }
    );
    let _ = writeln!(
        out,
        "events      missed windows {}  drops {}",
        n("missed_windows"),
        n("drop_events")
    );
    if let Some(errs) = report["max_rel_error"].as_object() {
        for (ch, e) in errs {
            let _ = writeln!(out, "max rel err {ch:<12} {}", e);
        }
    }
    let alerts = report["alert_events"].as_array().map_or(0, |a| a.len());
    let _ = writeln!(out, "alerts      {alerts}");
    emit(&out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let default = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default)),
        )
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Cmd::Hub {
            listen,
            device,
            trace,
            counts_per_kg,
            tare,
            run_for,
        } => run_hub(listen, device, trace, counts_per_kg, tare, run_for),
        Cmd::Gateway { config, run_for } => run_gateway(&config, run_for),
        Cmd::Broker { listen, run_for } => run_broker(&listen, run_for),
        Cmd::Ingest { config, run_for } => run_ingest(&config, run_for),
        Cmd::Simulate {
            scenario,
            time_scale,
            work_dir,
        } => run_simulate(&scenario, time_scale, work_dir),
        Cmd::Query { q } => run_query(&q),
        Cmd::ExportCsv { q, out } => run_export(&q, out),
        Cmd::Report { path, json } => run_report(&path, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
