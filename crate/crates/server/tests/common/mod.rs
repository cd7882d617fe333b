#![allow(dead_code)]

use albf_core::beamform::BeamformerSet;
use albf_core::geometry::GridConfig;
use albf_core::neural::UNetConfig;
use albf_core::phantom::ProbeConfig;
use albf_core::session::{SessionConfig, SimulatedSourceConfig};

pub fn small_config(seed: u64, channels: usize, depth_px: usize, lateral_px: usize) -> SessionConfig {
    let probe = ProbeConfig::with_channels(channels);
    SessionConfig {
        seed,
        probe,
        grid: GridConfig { depth_px, lateral_px, z_min: 18.4e-3 },
        beamformers: BeamformerSet::for_channels(channels),
        unet: UNetConfig { seed, ..UNetConfig::for_channels(channels, 4) },
        ..SessionConfig::default()
    }
}

pub fn tiny_config(seed: u64) -> SessionConfig {
    small_config(seed, 4, 16, 8)
}

pub fn tiny_source(seed: u64, limit: Option<u64>) -> SimulatedSourceConfig {
    SimulatedSourceConfig { seed, limit, speckle_density: 10.0, cyst_radius: 0.1e-3, ..Default::default() }
}
