//! Active-learning rounds: anonymized candidates, one user pick, one training step.
//!
//! ```text
//!  Idle ──run_round──> Awaiting ──submit_selection──> Idle
//!   ^                     │ wrong round  -> BadRound
//!   │                     │ unknown id   -> UnknownCandidate
//!   └─────────────────────┘ second run   -> Sequencing
//! ```

mod log;
mod source;
mod stats;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::log::{replay, LogEntry, LogWriter, ReplayReport, RoundTiming, SessionLog, SessionRecord, LOG_VERSION};
pub use self::source::{
    simulation_window, FrameOrigin, FrameSource, RfbinDirSource, SimulatedSource, SimulatedSourceConfig,
};
pub use self::stats::{LossPoint, MethodShare, SessionStats, TimingSummary};

use crate::beamform::{BeamformedData, BeamformerSet, Method};
use crate::error::{Error, Result};
use crate::geometry::{delay_compensate, DelayedTensor, GridConfig, ImageGrid};
use crate::neural::{Model, TrainConfig, TrainTarget, UNetConfig};
use crate::phantom::{ProbeConfig, RfFrame};
use crate::postprocess::{bmode, render_png};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("round {requested} is not open (open round: {open:?})")]
    BadRound { requested: u64, open: Option<u64> },

    #[error("unknown candidate id {0}")]
    UnknownCandidate(String),

    #[error("{0}")]
    Sequencing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub seed: u64,
    /// Rounds before the model's own image joins the candidates.
    pub warmup_rounds: u64,
    pub epochs_per_round: u32,
    /// Keep every frame in memory instead of dropping it after its round.
    pub retain_frames: bool,
    pub probe: ProbeConfig,
    pub grid: GridConfig,
    pub beamformers: BeamformerSet,
    pub unet: UNetConfig,
    pub train: TrainConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        SessionConfig {
            seed: 0,
            warmup_rounds: 5,
            epochs_per_round: 1,
            retain_frames: false,
            probe,
            grid: GridConfig::default(),
            beamformers: BeamformerSet::for_channels(probe.num_channels),
            unet: UNetConfig::for_channels(probe.num_channels, 16),
            train: TrainConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        self.grid.build(&self.probe)?;
        let n = self.probe.num_channels;
        self.beamformers.mvdr.validate(n)?;
        self.beamformers.gcf.validate(n)?;
        self.unet.validate()?;
        if self.unet.in_channels != n || self.unet.out_channels != n {
            return Err(Error::config(format!(
                "network maps {} -> {} channels but the probe has {n}",
                self.unet.in_channels, self.unet.out_channels
            )));
        }
        if self.epochs_per_round == 0 {
            return Err(Error::config("epochs_per_round must be at least 1"));
        }
        self.train.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SessionConfig = toml::from_str(text).map_err(|e| Error::Format(format!("session config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("session config is representable as TOML")
    }
}

/// One anonymized candidate as shown to the user.
#[derive(Debug, Clone)]
pub struct Candidate {
    /// 128-bit random token, hex.
    pub id: String,
    pub png: Arc<Vec<u8>>,
}

/// The images of the open round in display order. Carries no method information.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub round_id: u64,
    pub permutation_seed: u64,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub round_id: u64,
    pub method: Method,
    pub loss: f64,
    pub step_skipped: bool,
    pub checkpoint_id: String,
    pub stats: SessionStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPhase {
    Idle,
    AwaitingSelection,
}

struct Hidden {
    id: String,
    method: Method,
    data: BeamformedData,
    png: Arc<Vec<u8>>,
}

struct OpenRound {
    round_id: u64,
    permutation_seed: u64,
    frame: RfFrame,
    origin: FrameOrigin,
    delayed: DelayedTensor,
    candidates: Vec<Hidden>,
    render_s: f64,
}

enum RoundState {
    Idle { last_closed: Option<u64> },
    Awaiting(Box<OpenRound>),
}

/// Single-writer session state. Callers serialize access (e.g. behind a mutex).
pub struct Session {
    config: SessionConfig,
    grid: ImageGrid,
    model: Model<f64>,
    state: RoundState,
    rounds_started: u64,
    records: Vec<SessionRecord>,
    rng: ChaCha8Rng,
    log: Option<LogWriter>,
    checkpoint_path: Option<PathBuf>,
    retained: Vec<RfFrame>,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid.build(&config.probe)?;
        let model = Model::new(config.unet, config.train)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Session {
            config,
            grid,
            model,
            state: RoundState::Idle { last_closed: None },
            rounds_started: 0,
            records: Vec::new(),
            rng,
            log: None,
            checkpoint_path: None,
            retained: Vec::new(),
        })
    }

    /// Starts a fresh log file at `path`.
    pub fn with_log(mut self, path: &Path) -> Result<Self> {
        self.log = Some(LogWriter::create(path, &self.config)?);
        Ok(self)
    }

    /// Saves the model to `path` after every training step.
    pub fn with_checkpoint(mut self, path: &Path) -> Self {
        self.checkpoint_path = Some(path.to_path_buf());
        self
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn model(&mut self) -> &mut Model<f64> {
        &mut self.model
    }

    pub fn records(&self) -> &[SessionRecord] {
        &self.records
    }

    pub fn retained_frames(&self) -> &[RfFrame] {
        &self.retained
    }

    pub fn stats(&self) -> SessionStats {
        SessionStats::from_records(&self.records)
    }

    pub fn phase(&self) -> RoundPhase {
        match self.state {
            RoundState::Idle { .. } => RoundPhase::Idle,
            RoundState::Awaiting(_) => RoundPhase::AwaitingSelection,
        }
    }

    pub fn open_round_id(&self) -> Option<u64> {
        match &self.state {
            RoundState::Awaiting(r) => Some(r.round_id),
            RoundState::Idle { .. } => None,
        }
    }

    /// Whether the model's own image is offered in round `round_id` (1-based).
    pub fn model_shown_in(&self, round_id: u64) -> bool {
        round_id > self.config.warmup_rounds
    }

    /// Computes, anonymizes and shuffles the candidates for `frame`.
    pub fn run_round(&mut self, frame: RfFrame, origin: FrameOrigin) -> Result<CandidateSet> {
        if let RoundState::Awaiting(r) = &self.state {
            return Err(SessionError::Sequencing(format!("round {} is still awaiting a selection", r.round_id)).into());
        }
        let started = Instant::now();
        let round_id = self.rounds_started + 1;
        let delayed = delay_compensate(&frame, &self.grid)?;

        let mut methods: Vec<Method> = Method::CONVENTIONAL.to_vec();
        if self.model_shown_in(round_id) {
            methods.push(Method::Model);
        }
        let mut rendered = Vec::with_capacity(methods.len());
        for &method in &methods {
            let data = match method {
                Method::Model => self.model.beamform(&delayed)?,
                other => self.config.beamformers.run(other, &delayed)?,
            };
            let png = Arc::new(render_png(&bmode(&data, self.config.train.head.dynamic_range)?));
            rendered.push((method, data, png));
        }

        let permutation_seed: u64 = self.rng.random();
        let mut order_rng = ChaCha8Rng::seed_from_u64(permutation_seed);
        rendered.shuffle(&mut order_rng);
        let candidates: Vec<Hidden> = rendered
            .into_iter()
            .map(|(method, data, png)| Hidden { id: format!("{:032x}", order_rng.random::<u128>()), method, data, png })
            .collect();

        self.rounds_started = round_id;
        let set = CandidateSet {
            round_id,
            permutation_seed,
            candidates: candidates.iter().map(|c| Candidate { id: c.id.clone(), png: c.png.clone() }).collect(),
        };
        self.state = RoundState::Awaiting(Box::new(OpenRound {
            round_id,
            permutation_seed,
            frame,
            origin,
            delayed,
            candidates,
            render_s: started.elapsed().as_secs_f64(),
        }));
        Ok(set)
    }

    /// Pulls the next frame from `source` and starts a round; `Ok(None)` when exhausted.
    pub fn next_round(&mut self, source: &mut dyn FrameSource) -> Result<Option<CandidateSet>> {
        if let RoundState::Awaiting(r) = &self.state {
            return Err(SessionError::Sequencing(format!("round {} is still awaiting a selection", r.round_id)).into());
        }
        match source.next_frame(&self.grid)? {
            Some((frame, origin)) => self.run_round(frame, origin).map(Some),
            None => Ok(None),
        }
    }

    /// The open round's candidates, unchanged since `run_round`.
    pub fn current(&self) -> Option<CandidateSet> {
        match &self.state {
            RoundState::Awaiting(r) => Some(CandidateSet {
                round_id: r.round_id,
                permutation_seed: r.permutation_seed,
                candidates: r.candidates.iter().map(|c| Candidate { id: c.id.clone(), png: c.png.clone() }).collect(),
            }),
            RoundState::Idle { .. } => None,
        }
    }

    /// Server-side mapping from an open-round candidate id to its method.
    pub fn reveal(&self, candidate_id: &str) -> Option<Method> {
        match &self.state {
            RoundState::Awaiting(r) => r.candidates.iter().find(|c| c.id == candidate_id).map(|c| c.method),
            RoundState::Idle { .. } => None,
        }
    }

    fn check_selection(&self, round_id: u64, candidate_id: &str) -> Result<usize, SessionError> {
        match &self.state {
            RoundState::Idle { last_closed } => {
                if *last_closed == Some(round_id) {
                    Err(SessionError::Sequencing(format!("round {round_id} already has a selection")))
                } else {
                    Err(SessionError::BadRound { requested: round_id, open: None })
                }
            }
            RoundState::Awaiting(r) if r.round_id != round_id => {
                Err(SessionError::BadRound { requested: round_id, open: Some(r.round_id) })
            }
            RoundState::Awaiting(r) => r
                .candidates
                .iter()
                .position(|c| c.id == candidate_id)
                .ok_or_else(|| SessionError::UnknownCandidate(candidate_id.to_string())),
        }
    }

    /// Records the user's pick and trains toward it unless it is the model's own image.
    /// A failed training step leaves the round open and the model unchanged.
    pub fn submit_selection(&mut self, round_id: u64, candidate_id: &str) -> Result<SelectionOutcome> {
        let index = self.check_selection(round_id, candidate_id)?;
        let RoundState::Awaiting(open) = &self.state else { unreachable!("checked above") };
        let chosen = &open.candidates[index];
        let method = chosen.method;

        let started = Instant::now();
        let (loss, step_skipped) = if method == Method::Model {
            (0.0, true)
        } else {
            (train_on_selection(&mut self.model, &open.delayed, &chosen.data, &self.config)?, false)
        };
        let train_s = if step_skipped { 0.0 } else { started.elapsed().as_secs_f64() };

        if let (Some(path), false) = (&self.checkpoint_path, step_skipped) {
            self.model.save(path)?;
        }
        let checkpoint_id = self.model.checkpoint_id();

        let RoundState::Awaiting(open) = std::mem::replace(&mut self.state, RoundState::Idle { last_closed: Some(round_id) })
        else {
            unreachable!("checked above")
        };
        let record = SessionRecord {
            round_id,
            frame_digest: open.frame.digest(),
            frame_origin: open.origin,
            permutation_seed: open.permutation_seed,
            shown: open.candidates.iter().map(|c| c.id.clone()).collect(),
            selected_id: candidate_id.to_string(),
            selected_method: method,
            loss,
            step_skipped,
            model_step: self.model.step(),
            checkpoint_id: checkpoint_id.clone(),
            timing: RoundTiming { render_s: open.render_s, train_s },
            timestamp_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
        };
        if self.config.retain_frames {
            self.retained.push(open.frame);
        }
        if let Some(log) = &mut self.log {
            log.append(&LogEntry::Round(record.clone()))?;
        }
        self.records.push(record);
        Ok(SelectionOutcome { round_id, method, loss, step_skipped, checkpoint_id, stats: self.stats() })
    }
}

/// Trains `model` toward the B-mode image of `data` for the configured number of
/// epochs; returns the loss of the first step.
pub(crate) fn train_on_selection(
    model: &mut Model<f64>,
    t: &DelayedTensor,
    data: &BeamformedData,
    config: &SessionConfig,
) -> Result<f64> {
    let target = TrainTarget::from_beamformed(data, config.train.head.dynamic_range)?;
    let mut first = None;
    for _ in 0..config.epochs_per_round {
        let report = model.train_step(t, &target)?;
        first.get_or_insert(report.loss);
    }
    Ok(first.expect("at least one epoch"))
}

/// Checklist shown next to the candidates.
pub fn selection_criteria_text() -> [&'static str; 3] {
    [
        "Bright reflectors: prefer the image where isolated bright points look smallest and sharpest.",
        "Uniform tissue: prefer the image whose background texture looks most even and fine-grained.",
        "Contrast: prefer the image where dark regions such as cysts stand out most cleanly from their surroundings.",
    ]
}
