//! Tracks CSV: header `track_id,frame,u,v,visible`, one row per observation.
//! `visible` is 0/1 (`true`/`false` also accepted). Rows of one track need
//! not be contiguous; tracks keep the order of their first row.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::camsolve::{Observation, Trajectory2D};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    track_id: u64,
    frame: usize,
    u: f64,
    v: f64,
    visible: String,
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(format!("tracks CSV: {e}"))
}

pub fn read_tracks<R: Read>(reader: R) -> Result<Vec<Trajectory2D>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let expected = ["track_id", "frame", "u", "v", "visible"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Io(format!(
            "tracks CSV header must be `{}`, got `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut order: Vec<u64> = Vec::new();
    let mut by_id: HashMap<u64, Vec<Observation>> = HashMap::new();
    for (line, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(csv_error)?;
        let visible = match row.visible.as_str() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(Error::Io(format!(
                    "tracks CSV row {}: visible must be 0 or 1, got `{other}`",
                    line + 2
                )))
            }
        };
        if visible && !(row.u.is_finite() && row.v.is_finite()) {
            return Err(Error::Io(format!("tracks CSV row {}: visible observation is not finite", line + 2)));
        }
        by_id
            .entry(row.track_id)
            .or_insert_with(|| {
                order.push(row.track_id);
                Vec::new()
            })
            .push(Observation {
                frame: row.frame,
                u: row.u,
                v: row.v,
                visible,
            });
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let mut observations = by_id.remove(&id).unwrap_or_default();
            observations.sort_by_key(|o| o.frame);
            Trajectory2D { id, observations }
        })
        .collect())
}

pub fn write_tracks<W: Write>(writer: W, tracks: &[Trajectory2D]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in tracks {
        for o in &t.observations {
            w.serialize(Row {
                track_id: t.id,
                frame: o.frame,
                u: o.u,
                v: o.v,
                visible: if o.visible { "1" } else { "0" }.to_string(),
            })
            .map_err(csv_error)?;
        }
    }
    if tracks.iter().all(|t| t.observations.is_empty()) {
        w.write_record(["track_id", "frame", "u", "v", "visible"]).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}
