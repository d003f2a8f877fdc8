//! Line-delimited JSON dialog corpora.
//!
//! One object per line:
//! `{"image_id": "...", "U": "...", "dialog": [["R", "H"], ...], "gold_box": [y0, x0, y1, x1]}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{DialogError, Turn};
use crate::loc::BoxNorm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogRecord {
    pub image_id: String,
    #[serde(rename = "U")]
    pub user_request: String,
    pub dialog: Vec<(String, String)>,
    pub gold_box: [f64; 4],
}

impl DialogRecord {
    pub fn turns(&self) -> Vec<Turn> {
        self.dialog
            .iter()
            .map(|(q, a)| Turn::new(q.clone(), a.clone()))
            .collect()
    }

    pub fn gold(&self) -> Result<BoxNorm, DialogError> {
        Ok(BoxNorm::from_array(self.gold_box)?)
    }
}

/// Reads every non-blank line. Boxes are validated on load.
pub fn read_corpus<R: BufRead>(source: R) -> Result<Vec<DialogRecord>, DialogError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let err = |message: String| DialogError::Corpus { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.gold().map_err(|e| err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(records: &[DialogRecord], mut sink: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}
