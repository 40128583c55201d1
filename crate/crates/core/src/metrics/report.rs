use std::io::Write;

use serde::{Deserialize, Serialize};

/// One row of the per-frame metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub video_id: String,
    pub frame_id: usize,
    pub cc: f64,
    pub sim: f64,
    pub auc_judd: f64,
    pub sauc: f64,
    pub nss: f64,
    pub kldiv: f64,
}

/// Writes rows as CSV with a header line.
pub fn write_report<W: Write>(out: W, rows: &[FrameScores]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
