//! The epoch dataset file format: line-delimited JSON with an explicit
//! header record, human-inspectable and diff-friendly.
//!
//! Line 1 is a header object carrying the format version, the ENU origin
//! (degrees in the file, radians in memory), and the generating scenario
//! metadata. Every following line is one epoch record with its full
//! observation list. Writing is deterministic (fixed field order, exact
//! shortest float encoding), so identical runs produce byte-identical
//! files; reading canonicalizes observation order and validates every
//! epoch.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::Geodetic;
use crate::obs::EpochObservations;
use crate::sim::{ScenarioConfig, SimulatedRun};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    format_version: u32,
    /// Origin latitude/longitude in degrees, height in meters.
    origin_lat_deg: f64,
    origin_lon_deg: f64,
    origin_height_m: f64,
    scenario: ScenarioConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EpochLine {
    kind: String,
    #[serde(flatten)]
    epoch: EpochObservations,
}

/// In-memory dataset: origin, scenario metadata, epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub origin: Geodetic,
    pub scenario: ScenarioConfig,
    pub epochs: Vec<EpochObservations>,
}

impl Dataset {
    pub fn from_run(run: SimulatedRun) -> Self {
        Self { origin: run.config.origin, scenario: run.config, epochs: run.epochs }
    }

    pub fn has_truth(&self) -> bool {
        self.epochs.iter().all(|e| e.truth_position.is_some())
    }
}

/// Write a dataset. Deterministic byte-for-byte for identical inputs.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        kind: "header".to_string(),
        format_version: DATASET_VERSION,
        origin_lat_deg: dataset.origin.lat.to_degrees(),
        origin_lon_deg: dataset.origin.lon.to_degrees(),
        origin_height_m: dataset.origin.height,
        scenario: dataset.scenario.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for epoch in &dataset.epochs {
        let line = EpochLine { kind: "epoch".to_string(), epoch: epoch.clone() };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset, rejecting unknown versions and validating every epoch.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or(Error::Malformed { what: "dataset", message: "empty file".into() })??;
    let header: Header = serde_json::from_str(&header_line)?;
    if header.kind != "header" {
        return Err(Error::Malformed {
            what: "dataset",
            message: "first record is not a header".into(),
        });
    }
    if header.format_version != DATASET_VERSION {
        return Err(Error::FormatVersion {
            found: header.format_version,
            expected: DATASET_VERSION,
            what: "dataset",
        });
    }
    let origin = Geodetic::from_degrees(
        header.origin_lat_deg,
        header.origin_lon_deg,
        header.origin_height_m,
    );
    let mut epochs = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let record: EpochLine = serde_json::from_str(&line)?;
        if record.kind != "epoch" {
            return Err(Error::Malformed {
                what: "dataset",
                message: format!("unexpected record kind '{}'", record.kind),
            });
        }
        let mut epoch = record.epoch;
        epoch.canonicalize();
        match epoch.validate() {
            // Underpopulated epochs are dropped (and logged), not fatal.
            Err(Error::InsufficientObservations { epoch_index, count, minimum }) => {
                eprintln!(
                    "dataset: dropping epoch {epoch_index} with {count} observations (minimum {minimum})"
                );
                continue;
            }
            Err(e) => return Err(e),
            Ok(()) => {}
        }
        epochs.push(epoch);
    }
    if epochs.is_empty() {
        return Err(Error::EmptyRun);
    }
    Ok(Dataset { origin, scenario: header.scenario, epochs })
}
