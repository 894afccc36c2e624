//! Newline-delimited JSON episode traces.

use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};

use super::SimState;
use crate::state::KeypointState;

/// First line of every trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub keypoint_count: usize,
    pub include_mesh: bool,
}

/// One record per macro step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub anchors: [[f64; 3]; 2],
    /// Flat 3M keypoint coordinates, object frame.
    pub keypoints: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
}

impl TraceRecord {
    pub fn from_state(state: &SimState, keypoints: &KeypointState, include_mesh: bool) -> Self {
        Self {
            t: state.time_step_index,
            anchors: [state.anchors[0].into(), state.anchors[1].into()],
            keypoints: keypoints.to_flat(),
            mesh: include_mesh.then(|| state.mesh.positions.iter().map(|p| (*p).into()).collect()),
            reward: None,
            cost: None,
            chamfer: None,
        }
    }
}

pub fn write_trace<W: Write>(mut out: W, header: &TraceHeader, records: &[TraceRecord]) -> io::Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace<R: BufRead>(input: R) -> io::Result<(TraceHeader, Vec<TraceRecord>)> {
    let mut lines = input.lines();
    let header_line = lines.next().ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "empty trace"))??;
    let header: TraceHeader = serde_json::from_str(&header_line)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header, records))
}
