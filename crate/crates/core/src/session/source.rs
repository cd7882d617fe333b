use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;
use crate::phantom::{synthesize_frame, AcquisitionWindow, CystRegion, PhantomSpec, PointTarget, Rect, RfFrame};
use crate::rfbin;

/// Where a round's frame came from; enough to regenerate or reload it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOrigin {
    Simulated { phantom: PhantomSpec, window: AcquisitionWindow },
    File { path: PathBuf },
}

impl FrameOrigin {
    /// Rebuilds the frame for `grid`'s probe.
    pub fn load(&self, grid: &ImageGrid) -> Result<RfFrame> {
        match self {
            FrameOrigin::Simulated { phantom, window } => synthesize_frame(phantom, &grid.probe, window),
            FrameOrigin::File { path } => rfbin::read_frame(path),
        }
    }
}

/// Supplies one frame per round.
pub trait FrameSource: Send {
    /// `Ok(None)` once the source is exhausted.
    fn next_frame(&mut self, grid: &ImageGrid) -> Result<Option<(RfFrame, FrameOrigin)>>;
}

/// Acquisition window for simulating frames imaged on `grid`, with room for
/// scatterers up to `margin` beyond the deepest row.
pub fn simulation_window(grid: &ImageGrid, margin: f64) -> AcquisitionWindow {
    AcquisitionWindow::covering_depth(&grid.probe, grid.z_max + margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatedSourceConfig {
    /// Scatterers per mm².
    pub speckle_density: f64,
    /// Speckle is scattered this far (m) beyond the grid on every side.
    pub margin: f64,
    pub cyst_radius: f64,
    pub cyst_echogenicity: f64,
    pub point_amplitude: f64,
    pub seed: u64,
    /// Stop after this many frames.
    pub limit: Option<u64>,
}

impl Default for SimulatedSourceConfig {
    fn default() -> Self {
        SimulatedSourceConfig {
            speckle_density: 40.0,
            margin: 1e-3,
            cyst_radius: 0.6e-3,
            cyst_echogenicity: 0.0,
            point_amplitude: 8.0,
            seed: 0,
            limit: None,
        }
    }
}

/// Speckle field with one anechoic cyst and one point target, both placed at random inside the grid.
#[derive(Debug, Clone)]
pub struct SimulatedSource {
    pub config: SimulatedSourceConfig,
    produced: u64,
}

impl SimulatedSource {
    pub fn new(config: SimulatedSourceConfig) -> Self {
        SimulatedSource { config, produced: 0 }
    }

    /// The phantom for frame `index` (0-based).
    pub fn phantom(&self, grid: &ImageGrid, index: u64) -> PhantomSpec {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let inset = cfg.cyst_radius;
        let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                0.5 * (lo + hi)
            }
        };
        let cyst = CystRegion {
            x: pick(&mut rng, grid.x_min + inset, grid.x_max - inset),
            z: pick(&mut rng, grid.z_min + inset, grid.z_max - inset),
            radius: cfg.cyst_radius,
            echogenicity: cfg.cyst_echogenicity,
        };
        let point = PointTarget {
            x: pick(&mut rng, grid.x_min, grid.x_max),
            z: pick(&mut rng, grid.z_min, grid.z_max),
            amplitude: cfg.point_amplitude,
        };
        PhantomSpec {
            point_targets: vec![point],
            cyst_regions: vec![cyst],
            speckle_density: cfg.speckle_density,
            speckle_region: Some(Rect {
                x_min: grid.x_min - cfg.margin,
                x_max: grid.x_max + cfg.margin,
                z_min: grid.z_min - cfg.margin,
                z_max: grid.z_max + cfg.margin,
            }),
            rng_seed: rng.random(),
        }
    }
}

impl FrameSource for SimulatedSource {
    fn next_frame(&mut self, grid: &ImageGrid) -> Result<Option<(RfFrame, FrameOrigin)>> {
        if self.config.limit.is_some_and(|l| self.produced >= l) {
            return Ok(None);
        }
        let phantom = self.phantom(grid, self.produced);
        let window = simulation_window(grid, 2.0 * self.config.margin);
        let frame = synthesize_frame(&phantom, &grid.probe, &window)?;
        self.produced += 1;
        Ok(Some((frame, FrameOrigin::Simulated { phantom, window })))
    }
}

/// Replays `.rfbin` frames from a directory in lexicographic order.
#[derive(Debug, Clone)]
pub struct RfbinDirSource {
    files: Vec<PathBuf>,
    next: usize,
}

impl RfbinDirSource {
    pub fn new(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "rfbin"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::config(format!("no .rfbin files in {}", dir.display())));
        }
        Ok(RfbinDirSource { files, next: 0 })
    }
}

impl FrameSource for RfbinDirSource {
    fn next_frame(&mut self, _grid: &ImageGrid) -> Result<Option<(RfFrame, FrameOrigin)>> {
        let Some(path) = self.files.get(self.next).cloned() else {
            return Ok(None);
        };
        self.next += 1;
        let frame = rfbin::read_frame(&path)?;
        Ok(Some((frame, FrameOrigin::File { path })))
    }
}
