//! `albf` subcommands.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use albf_core::beamform::{BeamformerSet, Method};
use albf_core::geometry::{delay_compensate, GridConfig};
use albf_core::metrics::{MetricsReport, RegionSpec};
use albf_core::neural::Model;
use albf_core::postprocess::{bmode, envelope, render_png, DEFAULT_DYNAMIC_RANGE_DB};
use albf_core::rfbin::{self, RfbinFile};
use albf_core::session::{
    replay, simulation_window, FrameSource, RfbinDirSource, Session, SessionConfig, SessionLog, SimulatedSource,
    SimulatedSourceConfig,
};
use albf_core::{BeamformedData, DelayedTensor, PhantomSpec, ProbeConfig};

use crate::api::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "albf", version, about = "Active-learning ultrasound beamforming")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one plane-wave RF frame and write it as .rfbin.
    Simulate(SimulateArgs),
    /// Beamform an .rfbin frame and write the B-mode PNG.
    Beamform(BeamformArgs),
    /// Image-quality metrics of one beamformed frame, as JSON.
    Metrics(MetricsArgs),
    /// Run an interactive session behind the HTTP API.
    Serve(ServeArgs),
    /// Re-run a session log and compare checkpoints.
    Replay(ReplayArgs),
    /// Run a session that always picks one conventional method.
    TrainOffline(TrainOfflineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Das,
    Fdmas,
    Mvdr,
    Gcf,
    Model,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Das => Method::Das,
            MethodArg::Fdmas => Method::Fdmas,
            MethodArg::Mvdr => Method::Mvdr,
            MethodArg::Gcf => Method::Gcf,
            MethodArg::Model => Method::Model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionalArg {
    Das,
    Fdmas,
    Mvdr,
    Gcf,
}

impl From<ConventionalArg> for Method {
    fn from(m: ConventionalArg) -> Self {
        match m {
            ConventionalArg::Das => Method::Das,
            ConventionalArg::Fdmas => Method::Fdmas,
            ConventionalArg::Mvdr => Method::Mvdr,
            ConventionalArg::Gcf => Method::Gcf,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Phantom TOML; without it a random speckle/cyst/point phantom is drawn.
    #[arg(long)]
    pub phantom: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frame index within the seeded random sequence.
    #[arg(long, default_value_t = 0)]
    pub index: u64,
    /// Session TOML supplying the probe and imaging grid.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BeamformArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model checkpoint, required for `--method model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DYNAMIC_RANGE_DB)]
    pub dynamic_range: f64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "das")]
    pub method: MethodArg,
    /// Point target position `X_MM,Z_MM`.
    #[arg(long, value_parser = parse_point)]
    pub point: Option<(f64, f64)>,
    /// TOML with `[target]` and `[background]` circles in pixel units.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "ALBF_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of .rfbin frames; simulated frames otherwise.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Overrides the session seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop offering rounds after this many simulated frames.
    #[arg(long)]
    pub rounds: Option<u64>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Save the model here after every training step.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub retain_frames: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOfflineArgs {
    #[arg(long, value_enum)]
    pub method: ConventionalArg,
    #[arg(long, conflicts_with = "rounds")]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub rounds: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn parse_point(s: &str) -> std::result::Result<(f64, f64), String> {
    let (x, z) = s.split_once(',').ok_or("expected X_MM,Z_MM")?;
    let x: f64 = x.trim().parse().map_err(|e| format!("x: {e}"))?;
    let z: f64 = z.trim().parse().map_err(|e| format!("z: {e}"))?;
    Ok((x, z))
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Beamform(a) => beamform(a),
        Command::Metrics(a) => metrics(a),
        Command::Serve(a) => serve(a),
        Command::Replay(a) => replay_log(a),
        Command::TrainOffline(a) => train_offline(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<SessionConfig> {
    match path {
        Some(p) => SessionConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SessionConfig::default()),
    }
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let config = load_config(a.config.as_deref())?;
    let grid = config.grid.build(&config.probe)?;
    let source_cfg = SimulatedSourceConfig { seed: a.seed, ..SimulatedSourceConfig::default() };
    let phantom = match &a.phantom {
        Some(p) => PhantomSpec::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => SimulatedSource::new(source_cfg).phantom(&grid, a.index),
    };
    let window = simulation_window(&grid, 2.0 * source_cfg.margin);
    let frame = albf_core::phantom::synthesize_frame(&phantom, &config.probe, &window)?;
    rfbin::write(&a.out, &RfbinFile::Frame(frame))?;
    Ok(ExitCode::SUCCESS)
}

/// Delay-compensated input on the configured grid, or on the default grid for the frame's own probe.
fn load_delayed(input: &Path, config: Option<&Path>) -> Result<(DelayedTensor, Option<SessionConfig>)> {
    let config = config.map(|p| load_config(Some(p))).transpose()?;
    let file = rfbin::read(input).with_context(|| format!("reading {}", input.display()))?;
    let t = match file {
        RfbinFile::Delayed(t) => t,
        RfbinFile::Frame(frame) => {
            let grid = match &config {
                Some(c) => c.grid.build(&c.probe)?,
                None => GridConfig::default().build(&frame.probe)?,
            };
            if grid.probe != frame.probe {
                bail!("frame probe does not match the configured probe");
            }
            delay_compensate(&frame, &grid)?
        }
    };
    Ok((t, config))
}

fn beamformed(
    method: Method,
    t: &DelayedTensor,
    config: Option<&SessionConfig>,
    checkpoint: Option<&Path>,
) -> Result<BeamformedData> {
    let probe: &ProbeConfig = t.probe();
    if method == Method::Model {
        let path = checkpoint.context("--method model needs --checkpoint")?;
        let mut model = Model::<f64>::load_stored(path).with_context(|| format!("loading {}", path.display()))?;
        return Ok(model.beamform(t)?);
    }
    let set = config.map_or_else(|| BeamformerSet::for_channels(probe.num_channels), |c| c.beamformers);
    Ok(set.run(method, t)?)
}

fn beamform(a: BeamformArgs) -> Result<ExitCode> {
    let (t, config) = load_delayed(&a.input, a.config.as_deref())?;
    let data = beamformed(a.method.into(), &t, config.as_ref(), a.checkpoint.as_deref())?;
    std::fs::write(&a.out, render_png(&bmode(&data, a.dynamic_range)?))
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn metrics(a: MetricsArgs) -> Result<ExitCode> {
    let (t, config) = load_delayed(&a.input, a.config.as_deref())?;
    let method: Method = a.method.into();
    let data = beamformed(method, &t, config.as_ref(), a.checkpoint.as_deref())?;
    let env = envelope(&data);
    let point = a.point.map(|(x, z)| t.grid.nearest_pixel(x * 1e-3, z * 1e-3));
    let regions: Option<RegionSpec> = match &a.regions {
        Some(p) => Some(
            toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        ),
        None => None,
    };
    let report = MetricsReport::evaluate(method, &env, &t.grid, point, regions.as_ref())?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn frame_source(frames: Option<&Path>, seed: u64, limit: Option<u64>) -> Result<Box<dyn FrameSource>> {
    Ok(match frames {
        Some(dir) => Box::new(RfbinDirSource::new(dir)?),
        None => Box::new(SimulatedSource::new(SimulatedSourceConfig { seed, limit, ..SimulatedSourceConfig::default() })),
    })
}

fn build_session(config: SessionConfig, log: Option<&Path>, checkpoint: Option<&Path>) -> Result<Session> {
    let mut session = Session::new(config)?;
    if let Some(p) = log {
        session = session.with_log(p).with_context(|| format!("creating {}", p.display()))?;
    }
    if let Some(p) = checkpoint {
        session = session.with_checkpoint(p);
    }
    Ok(session)
}

fn serve(a: ServeArgs) -> Result<ExitCode> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.retain_frames |= a.retain_frames;
    let source = frame_source(a.frames.as_deref(), config.seed, a.rounds)?;
    let session = build_session(config, a.log.as_deref(), a.checkpoint.as_deref())?;
    let app = router(AppState::new(session, source));
    let addr = SocketAddr::new(a.host, a.port);

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn replay_log(a: ReplayArgs) -> Result<ExitCode> {
    let log = SessionLog::read(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
    let report = replay(&log)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.matches() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn train_offline(a: TrainOfflineArgs) -> Result<ExitCode> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let method: Method = a.method.into();
    let limit = a.frames.is_none().then_some(a.rounds);
    let mut source = frame_source(a.frames.as_deref(), config.seed, limit)?;
    let mut session = build_session(config, a.log.as_deref(), a.checkpoint.as_deref())?;
    while let Some(set) = session.next_round(source.as_mut())? {
        let pick = set
            .candidates
            .iter()
            .find(|c| session.reveal(&c.id) == Some(method))
            .context("selected method missing from the candidates")?
            .id
            .clone();
        let out = session.submit_selection(set.round_id, &pick)?;
        eprintln!("round {} loss {:.6e}", out.round_id, out.loss);
    }
    let summary = serde_json::json!({
        "rounds": session.records().len(),
        "model_step": session.model().step(),
        "checkpoint_id": session.model().checkpoint_id(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}
