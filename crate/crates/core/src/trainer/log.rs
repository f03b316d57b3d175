use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "step,lr,l_g1,l_g2_s,l_g2_t,l_g3,l_d,mask_fraction,ms";

/// Per-step record. Loss terms that were not computed are logged as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_g1: f64,
    pub l_g2_s: f64,
    pub l_g2_t: f64,
    pub l_g3: f64,
    pub l_d: f64,
    pub mask_fraction: f64,
    pub ms: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.step, self.lr, self.l_g1, self.l_g2_s, self.l_g2_t, self.l_g3, self.l_d, self.mask_fraction, self.ms
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "step {:>6}  lr {:.3e}  l_g1 {:.4}  l_g2_s {:.4}  l_g2_t {:.4}  l_g3 {:.4}  l_d {:.4}  mask {:.3}",
            self.step, self.lr, self.l_g1, self.l_g2_s, self.l_g2_t, self.l_g3, self.l_d, self.mask_fraction
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.records.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}", serde_json::to_string(r).expect("record serializes"));
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(TrainLog { records })
    }

    pub fn write(&self, csv: &Path, jsonl: &Path) -> io::Result<()> {
        fs::write(csv, self.to_csv())?;
        fs::write(jsonl, self.to_jsonl())
    }
}
