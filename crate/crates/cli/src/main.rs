//! `qflow`: deploy an application into a store, run the engine, and
//! inspect or feed the store offline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use qflow::config::EngineConfig;
use qflow::engine::{compile_ruleset, CompiledPlan};
use qflow::expr::Atomic;
use qflow::lang::{parse_application, validate_application, ApplicationDef};
use qflow::scheduler::Runtime;
use qflow::store::{EnqueueRequest, Message, Snapshot, Store, StoreError, StoreOptions};
use qflow::system::{GatewayContext, HttpGateway, HttpTransport};
use qflow::xml::parse_document;

#[derive(Parser)]
#[command(name = "qflow", version, about = "Rule-driven XML message queue engine")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// HTTP listen address for incoming gateway queues.
    #[arg(long, global = true)]
    listen: Option<String>,
    /// Worker threads processing messages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, validate and compile an application and record it in the store.
    Deploy { file: PathBuf },
    /// Run the engine until interrupted.
    Run,
    /// Enqueue one message while the engine is stopped. Prints its id.
    Enqueue {
        queue: String,
        file: PathBuf,
        /// Explicit property, `name=value`. Repeatable.
        #[arg(long = "prop", value_name = "NAME=VALUE")]
        props: Vec<String>,
    },
    /// Print the messages of a queue, or of the current slice `<slicing> <key>`.
    Inspect {
        name: String,
        key: Option<String>,
    },
    /// Remove messages that are processed and in no current slice.
    Gc,
}

/// A failure with the exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 1, error: e.into() }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    let cfg = match config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cfg.log_level)
        .format_timestamp_millis()
        .init();
    let result = match cli.command {
        Command::Deploy { file } => deploy(&cfg, &file),
        Command::Run => run(&cfg),
        Command::Enqueue { queue, file, props } => enqueue(&cfg, &queue, &file, &props),
        Command::Inspect { name, key } => inspect(&cfg, &name, key.as_deref()),
        Command::Gc => gc(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn config(cli: &Cli) -> anyhow::Result<EngineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            EngineConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => EngineConfig::default(),
    };
    if let Some(s) = &cli.store {
        cfg.store_dir = Some(s.clone());
    }
    if let Some(l) = &cli.listen {
        cfg.http_listen = l.clone();
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        cfg.workers = w;
    }
    Ok(cfg)
}

fn store_dir(cfg: &EngineConfig) -> Result<&Path, Failure> {
    cfg.store_dir
        .as_deref()
        .ok_or_else(|| anyhow!("no store directory: pass --store or set storeDir").into())
}

fn options(read_only: bool) -> StoreOptions {
    StoreOptions {
        read_only,
        ..StoreOptions::default()
    }
}

/// Loads the application recorded in the store.
fn deployed(dir: &Path) -> Result<ApplicationDef, Failure> {
    let text = match Store::deployed_application(dir) {
        Ok(t) => t,
        Err(StoreError::NotDeployed) => {
            return Err(anyhow!("no application deployed in {}", dir.display()).into())
        }
        Err(e) => return Err(e.into()),
    };
    parse_application(&text).map_err(|e| anyhow!("deployed application is unreadable: {e}").into())
}

fn open(dir: &Path, app: &ApplicationDef, read_only: bool) -> Result<Store, Failure> {
    Store::open(dir, app, options(read_only)).map_err(|e| match e {
        StoreError::Locked => anyhow!("store {} is locked by a running engine", dir.display()).into(),
        e => e.into(),
    })
}

fn deploy(cfg: &EngineConfig, file: &Path) -> Result<(), Failure> {
    let dir = store_dir(cfg)?;
    let text = std::fs::read_to_string(file)
        .with_context(|| format!("reading {}", file.display()))
        .map_err(|e| fail(1, e))?;
    let app = parse_application(&text).map_err(|e| fail(1, anyhow!("{}: {e}", file.display())))?;
    let report = validate_application(&app);
    if !report.is_empty() {
        return Err(fail(2, anyhow!("{}: {report}", file.display())));
    }
    let plan = compile_ruleset(&app).map_err(|e| fail(2, anyhow!("{e}")))?;
    if let Some(q) = &cfg.system_error_queue {
        if plan.catalog().queue(q).is_none() {
            return Err(fail(2, anyhow!("system error queue '{q}' is not declared")));
        }
    }
    let store = Store::open(dir, &app, options(false)).map_err(|e| match e {
        StoreError::IncompatibleApplication(_) => fail(3, e.into()),
        StoreError::Locked => fail(1, anyhow!("store {} is locked by a running engine", dir.display())),
        e => fail(1, e.into()),
    })?;
    store.install_manifest(&text)?;
    println!(
        "deployed {} queues, {} properties, {} slicings, {} rules into {}",
        app.queues.len(),
        app.properties.len(),
        app.slicings.len(),
        app.rules.len(),
        dir.display()
    );
    Ok(())
}

fn run(cfg: &EngineConfig) -> Result<(), Failure> {
    let dir = store_dir(cfg)?;
    let app = deployed(dir)?;
    let plan: Arc<CompiledPlan> = Arc::new(compile_ruleset(&app).map_err(|e| anyhow!("{e}"))?);
    if let Some(q) = &cfg.system_error_queue {
        if plan.catalog().queue(q).is_none() {
            return Err(anyhow!("system error queue '{q}' is not declared").into());
        }
    }
    let store = Arc::new(open(dir, &app, false)?);
    log::info!(
        "store {} open at version {} with {} messages",
        dir.display(),
        store.snapshot().version(),
        store.snapshot().message_count()
    );
    let transport = Arc::new(HttpTransport::new(Duration::from_secs(30)));
    let runtime = Runtime::new(store.clone(), plan, cfg.clone(), transport);
    let ctx = GatewayContext::new(
        store.clone(),
        runtime.hub().clone(),
        cfg.system_error_queue.clone(),
        cfg.sync_timeout,
        runtime.notifier(),
    );
    let gateway = HttpGateway::start(&cfg.http_listen, Arc::new(ctx))
        .with_context(|| format!("listening on {}", cfg.http_listen))?;
    log::info!("listening on http://{}", gateway.addr);
    // Scripts read this line to find the bound port.
    println!("listening on {}", gateway.addr);

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)).context("installing signal handler")?;
    }
    let result = runtime.run(&stop);
    gateway.stop();
    let stats = result.map_err(|e| anyhow!("engine stopped: {e}"))?;
    let version = store.checkpoint()?;
    log::info!(
        "shut down: {} processed, {} conflicts, {} echoes, {} collected; checkpoint at version {version}",
        stats.processed,
        stats.conflicts,
        stats.echoes_fired,
        stats.collected
    );
    Ok(())
}

fn enqueue(cfg: &EngineConfig, queue: &str, file: &Path, props: &[String]) -> Result<(), Failure> {
    let dir = store_dir(cfg)?;
    let app = deployed(dir)?;
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let body = parse_document(&text).with_context(|| format!("{} is not well-formed XML", file.display()))?;
    let mut req = EnqueueRequest::new(queue, body);
    for p in props {
        let (name, value) = p
            .split_once('=')
            .ok_or_else(|| anyhow!("--prop expects name=value, got '{p}'"))?;
        req = req.with(name.trim(), Atomic::Untyped(value.to_string()));
    }
    let store = open(dir, &app, false)?;
    let mut txn = store.begin();
    let id = txn.enqueue(req)?;
    txn.commit()?;
    println!("{id}");
    Ok(())
}

fn record(out: &mut String, snap: &Snapshot, m: &Message) {
    let _ = writeln!(out, "id: {}", m.id);
    let _ = writeln!(out, "queue: {}", m.queue);
    let _ = writeln!(out, "processed: {}", snap.is_processed(m.id));
    for (name, value) in &m.props {
        let _ = writeln!(out, "property.{name}: {}", value.lexical().replace('\n', " "));
    }
    let _ = writeln!(out, "body: {}", m.document().to_xml().replace('\n', "&#10;"));
    out.push('\n');
}

fn inspect(cfg: &EngineConfig, name: &str, key: Option<&str>) -> Result<(), Failure> {
    let dir = store_dir(cfg)?;
    let app = deployed(dir)?;
    let store = open(dir, &app, true)?;
    let snap = store.snapshot();
    let msgs = match key {
        None => snap.read_queue(name)?,
        Some(k) => snap.read_slice(name, &Atomic::Untyped(k.to_string()))?,
    };
    let mut out = String::new();
    for m in &msgs {
        record(&mut out, &snap, m);
    }
    print!("{out}");
    Ok(())
}

fn gc(cfg: &EngineConfig) -> Result<(), Failure> {
    let dir = store_dir(cfg)?;
    let app = deployed(dir)?;
    let store = open(dir, &app, false)?;
    println!("{}", store.garbage_collect()?);
    Ok(())
}
