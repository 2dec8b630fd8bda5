//! `colaboot`: serve, sync, verify, generate, simulate, status, gc.
//!
//! Exit codes: 0 success, 1 a check failed (verification entry, sync
//! verification, simulated boot), 2 anything else (bad config, port in
//! use, unreachable remote, I/O).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use colaboot_core::asset_store::{open_remote, sync_once, AssetStore, StoreError, SyncError};
use colaboot_core::boot_session::{read_event_log, BootReport, BootTracker};
use colaboot_core::clock::MonotonicClock;
use colaboot_core::config::ServerConfig;
use colaboot_core::deploykit::{
    generate_firewall_rules, generate_installer_script, generate_server_config, DeployProfile,
};
use colaboot_core::netproto::ClientArch;
use colaboot_core::server::{self, Listeners};
use colaboot_core::sim::{
    fleet_mac, run_fleet, AssetSizes, Lab, LabOptions, SimClientConfig, SimTiming,
};
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "colaboot", version, about = "Diskless network-boot server")]
struct Cli {
    /// Server configuration file.
    #[arg(long, global = true, env = "COLABOOT_CONFIG", default_value = "colaboot.toml")]
    config: PathBuf,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run DHCP, TFTP, the image service and periodic sync until interrupted.
    Serve,
    /// Pull the remote manifest once and activate it if newer.
    Sync,
    /// Re-hash every asset of the active version.
    Verify,
    /// Write firewall rules, installer script and server config from a profile.
    Generate {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Boot simulated clients against a private loopback server.
    Simulate {
        #[arg(long, default_value_t = 1)]
        clients: u32,
        #[arg(long, default_value_t = 0.0)]
        loss: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Lease pool size of the private server.
        #[arg(long, default_value_t = 100)]
        pool: u32,
        #[arg(long, value_enum, default_value_t = Arch::Bios)]
        arch: Arch,
        #[arg(long)]
        blksize: Option<u16>,
        /// Use small assets (about 2.3 MiB in total) instead of the full set.
        #[arg(long)]
        small: bool,
        /// Also write the server's boot report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Session table replayed from the event log.
    Status,
    /// Delete old versions and unreferenced blobs.
    Gc {
        #[arg(long, default_value_t = 2)]
        keep: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arch {
    Bios,
    Uefi,
}

/// Success, or a check that ran and failed.
enum Outcome {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_from_env("COLABOOT_LOG").unwrap_or_else(|_| {
        EnvFilter::new(if matches!(cli.command, Command::Serve) { "info" } else { "warn" })
    });
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

async fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Serve => serve(&load(&cli.config)?, cli.json).await,
        Command::Sync => sync(&load(&cli.config)?, cli.json).await,
        Command::Verify => verify(&load(&cli.config)?, cli.json),
        Command::Generate { ref profile, ref out } => generate(profile, out),
        Command::Simulate { clients, loss, seed, pool, arch, blksize, small, ref report } => {
            let opts = SimOptions { clients, loss, seed, pool, arch, blksize, small, report: report.clone() };
            simulate(opts, cli.json).await
        }
        Command::Status => status(&load(&cli.config)?, cli.json),
        Command::Gc { keep } => gc(&load(&cli.config)?, keep, cli.json),
    }
}

fn load(path: &Path) -> Result<ServerConfig> {
    ServerConfig::load(path).with_context(|| format!("invalid configuration {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn open_or_init(root: &Path) -> Result<AssetStore> {
    match AssetStore::open(root) {
        Ok(s) => Ok(s),
        Err(StoreError::NotInitialized(_)) => Ok(AssetStore::init(root)?),
        Err(e) => Err(e.into()),
    }
}

async fn serve(cfg: &ServerConfig, json: bool) -> Result<Outcome> {
    let store = open_or_init(&cfg.store_root)?;
    if store.active_version()?.is_none() {
        match &cfg.sync_source {
            Some(src) => match sync_once(open_remote(src).as_ref(), &store).await {
                Ok(r) => info!(version = ?r.new_version, "initial sync"),
                Err(e) => warn!(error = %e, "initial sync failed; serving without assets until the next sync"),
            },
            None => warn!("store has no active version and no sync_source is set"),
        }
    }
    // Every listener is bound before any service starts.
    let listeners = Listeners::bind(cfg).await?;
    let running = server::start(cfg, listeners, Arc::new(store), MonotonicClock::shared())?;
    let shutdown = ShutdownSignals::install()?;
    let a = running.addrs;
    println!("listening dhcp={} tftp={} http={}", a.dhcp, a.tftp, a.http);
    std::io::stdout().flush()?;

    shutdown.wait().await;
    info!("shutting down");
    let report = running.shutdown().await;
    if json {
        print_json(&report)?;
    } else {
        print!("{}", report.render_table());
    }
    Ok(Outcome::Ok)
}

// Registered before the listening line goes out, so a signal sent right
// after it is never taken with the default disposition.
#[cfg(unix)]
struct ShutdownSignals {
    int: tokio::signal::unix::Signal,
    term: tokio::signal::unix::Signal,
}

#[cfg(unix)]
impl ShutdownSignals {
    fn install() -> Result<Self> {
        use tokio::signal::unix::{signal, SignalKind};
        Ok(Self { int: signal(SignalKind::interrupt())?, term: signal(SignalKind::terminate())? })
    }

    async fn wait(mut self) {
        tokio::select! {
            _ = self.int.recv() => {}
            _ = self.term.recv() => {}
        }
    }
}

#[cfg(not(unix))]
struct ShutdownSignals;

#[cfg(not(unix))]
impl ShutdownSignals {
    fn install() -> Result<Self> {
        Ok(Self)
    }

    async fn wait(self) {
        tokio::signal::ctrl_c().await.ok();
    }
}

async fn sync(cfg: &ServerConfig, json: bool) -> Result<Outcome> {
    let src = cfg.sync_source.as_deref().ok_or_else(|| anyhow!("sync_source is not set"))?;
    let store = open_or_init(&cfg.store_root)?;
    match sync_once(open_remote(src).as_ref(), &store).await {
        Ok(report) => {
            if json {
                print_json(&report)?;
            } else {
                match report.new_version {
                    Some(v) => println!("activated version {v}: fetched {} blobs, {} bytes", report.fetched, report.bytes),
                    None => println!("up to date at version {}", report.remote_version),
                }
            }
            Ok(Outcome::Ok)
        }
        Err(e @ SyncError::VerificationFailed { .. }) => {
            eprintln!("sync failed: {e}");
            Ok(Outcome::CheckFailed)
        }
        Err(e) => Err(e.into()),
    }
}

fn verify(cfg: &ServerConfig, json: bool) -> Result<Outcome> {
    let store = AssetStore::open(&cfg.store_root)?;
    let report = store.verify_active()?;
    if json {
        print_json(&report)?;
    } else {
        for c in &report.assets {
            let status = serde_json::to_value(&c.status)?;
            let s = status.get("status").and_then(|v| v.as_str()).unwrap_or("?").to_string();
            println!("{:<4}  {:<10}  {}  {}", if s == "ok" { "ok" } else { "FAIL" }, c.role, c.path, if s == "ok" { String::new() } else { status.to_string() });
        }
        println!("version {}: {}", report.version, if report.ok { "ok" } else { "FAILED" });
    }
    Ok(if report.ok { Outcome::Ok } else { Outcome::CheckFailed })
}

fn generate(profile_path: &Path, out: &Path) -> Result<Outcome> {
    let text = std::fs::read_to_string(profile_path).with_context(|| format!("cannot read {}", profile_path.display()))?;
    let profile = DeployProfile::from_toml(&text)?;
    let dialect = profile.dialect()?;
    let files = [
        ("firewall.txt", generate_firewall_rules(&profile)?),
        (dialect.script_name(), generate_installer_script(&profile)?),
        ("colaboot.toml", generate_server_config(&profile, &profile.bootfiles)?),
    ];
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    for (name, body) in files {
        let path = out.join(name);
        std::fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(Outcome::Ok)
}

struct SimOptions {
    clients: u32,
    loss: f64,
    seed: u64,
    pool: u32,
    arch: Arch,
    blksize: Option<u16>,
    small: bool,
    report: Option<PathBuf>,
}

/// Server retransmit interval for lossy simulations. The default second
/// would make each dropped datagram cost a full second.
const LOSSY_SERVER_TIMEOUT: Duration = Duration::from_millis(10);

async fn simulate(o: SimOptions, json: bool) -> Result<Outcome> {
    if !(0.0..1.0).contains(&o.loss) {
        bail!("--loss must be in [0, 1)");
    }
    if o.clients == 0 {
        bail!("--clients must be at least 1");
    }
    let dir = tempfile::tempdir()?;
    let lossy = o.loss > 0.0;
    let opts = LabOptions {
        sizes: if o.small { AssetSizes::small() } else { AssetSizes::default() },
        pool_size: o.pool,
        tftp_timeout: if lossy { LOSSY_SERVER_TIMEOUT } else { Duration::from_secs(1) },
        tftp_retries: if lossy { 12 } else { 5 },
        ..LabOptions::default()
    };
    let lab = Lab::start(dir.path(), opts).await?;
    let template = SimClientConfig {
        arch: match o.arch {
            Arch::Bios => ClientArch::LEGACY_BIOS,
            Arch::Uefi => ClientArch::UEFI_X64,
        },
        loss_rate: o.loss,
        seed: o.seed,
        blksize_request: o.blksize.or(Some(1428)),
        timing: if lossy {
            SimTiming::lossy(LOSSY_SERVER_TIMEOUT)
        } else {
            SimTiming { dhcp_timeout: Duration::from_secs(3), ..SimTiming::default() }
        },
        ..SimClientConfig::default()
    };
    let started = Instant::now();
    let results = run_fleet(o.clients, &template, lab.endpoints).await;
    let wall = started.elapsed();
    let report: BootReport = lab.shutdown().await;

    let ok = results.iter().filter(|r| r.is_ok()).count();
    let rows: Vec<serde_json::Value> = results
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok(b) => serde_json::to_value(b).unwrap_or_default(),
            Err(e) => serde_json::json!({
                "mac": fleet_mac(template.mac, i as u32).to_string(),
                "ok": false,
                "error": e.to_string(),
            }),
        })
        .collect();
    if let Some(path) = &o.report {
        std::fs::write(path, serde_json::to_vec_pretty(&report)?).with_context(|| format!("cannot write {}", path.display()))?;
    }

    let mut summary = String::new();
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(b) => summary.push_str(&format!(
                "{}  ok    lease={} version={} {:.2}s bootfile={}\n",
                b.mac, b.lease, b.manifest_version, b.total_s, b.bootfile
            )),
            Err(e) => summary.push_str(&format!("{}  FAIL  {e}\n", fleet_mac(template.mac, i as u32))),
        }
    }
    summary.push_str(&report.render_table());
    summary.push_str(&format!("{ok}/{} clients booted in {:.2}s\n", results.len(), wall.as_secs_f64()));
    if json {
        print_json(&rows)?;
        eprint!("{summary}");
    } else {
        print!("{summary}");
    }
    Ok(if ok == results.len() { Outcome::Ok } else { Outcome::CheckFailed })
}

fn status(cfg: &ServerConfig, json: bool) -> Result<Outcome> {
    let path = cfg.event_log.as_deref().ok_or_else(|| anyhow!("event_log is not set in the configuration"))?;
    let events = match read_event_log(path) {
        Ok(ev) => ev,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(anyhow!(e).context(format!("cannot read {}", path.display()))),
    };
    let report = BootTracker::replay(&events).report();
    if json {
        print_json(&report)?;
    } else {
        print!("{}", report.render_table());
    }
    Ok(Outcome::Ok)
}

fn gc(cfg: &ServerConfig, keep: usize, json: bool) -> Result<Outcome> {
    let store = AssetStore::open(&cfg.store_root)?;
    let report = store.gc(keep)?;
    if json {
        print_json(&report)?;
    } else {
        println!(
            "kept versions {:?}, removed versions {:?}, {} blobs, {} bytes freed",
            report.kept_versions, report.removed_versions, report.removed_objects, report.freed_bytes
        );
    }
    Ok(Outcome::Ok)
}
