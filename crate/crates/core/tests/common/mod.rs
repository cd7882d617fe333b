#![allow(dead_code)]

use albf_core::beamform::BeamformerSet;
use albf_core::geometry::GridConfig;
use albf_core::neural::UNetConfig;
use albf_core::phantom::ProbeConfig;
use albf_core::session::{SessionConfig, SimulatedSourceConfig};

/// Four channels on a 16 x 8 grid: a full round takes milliseconds.
pub fn tiny_config(seed: u64) -> SessionConfig {
    let probe = ProbeConfig::with_channels(4);
    SessionConfig {
        seed,
        probe,
        grid: GridConfig { depth_px: 16, lateral_px: 8, z_min: 18.4e-3 },
        beamformers: BeamformerSet::for_channels(4),
        unet: UNetConfig { seed, ..UNetConfig::for_channels(4, 4) },
        ..SessionConfig::default()
    }
}

pub fn tiny_source(seed: u64) -> SimulatedSourceConfig {
    SimulatedSourceConfig { seed, speckle_density: 10.0, cyst_radius: 0.1e-3, ..Default::default() }
}
