//! Frame CSV files.
//!
//! One row per anchor measurement:
//!
//! ```text
//! timestamp,anchor_id,d,rx,fp,label,agent,x_true,y_true,presented
//! ```
//!
//! `label` is the true LOS label (`1` LOS, `-1` NLOS). Training files only need
//! the first six columns; recordings for replay carry all ten. Floats are
//! written in shortest round-trip form so a replay sees bit-identical input.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::sensor::UwbFrame;
use crate::sim::{Measurement, SyntheticFrame};
use crate::svm::Label;

pub const HEADER: &str = "timestamp,anchor_id,d,rx,fp,label,agent,x_true,y_true,presented";
const TRAINING_COLUMNS: usize = 6;
const RECORD_COLUMNS: usize = 10;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Line { line: u64, message: String },
}

fn sign(los: bool) -> i8 {
    if los {
        1
    } else {
        -1
    }
}

pub fn frames_csv_string(frames: &[SyntheticFrame]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for f in frames {
        for m in &f.measurements {
            let u = &m.frame;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                u.timestamp,
                u.anchor_id,
                u.d,
                u.rx,
                u.fp,
                sign(m.true_los),
                f.agent,
                f.true_pose[0],
                f.true_pose[1],
                sign(m.presented_los)
            );
        }
    }
    out
}

pub fn write_frames_csv(path: &Path, frames: &[SyntheticFrame]) -> Result<(), SchemaError> {
    fs::write(path, frames_csv_string(frames))?;
    Ok(())
}

struct Row<'r> {
    line: u64,
    record: &'r csv::StringRecord,
}

impl Row<'_> {
    fn err(&self, message: String) -> SchemaError {
        SchemaError::Line {
            line: self.line,
            message,
        }
    }

    fn parse<T: std::str::FromStr>(&self, k: usize, name: &str) -> Result<T, SchemaError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.record.get(k).unwrap_or("").trim();
        raw.parse::<T>().map_err(|e| self.err(format!("column `{name}`: `{raw}`: {e}")))
    }

    fn finite(&self, k: usize, name: &str) -> Result<f64, SchemaError> {
        let v: f64 = self.parse(k, name)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("column `{name}` is not finite")))
        }
    }

    fn label(&self, k: usize, name: &str) -> Result<bool, SchemaError> {
        match self.parse::<i64>(k, name)? {
            1 => Ok(true),
            -1 => Ok(false),
            other => Err(self.err(format!("column `{name}` must be 1 or -1, got {other}"))),
        }
    }

    fn frame(&self) -> Result<UwbFrame, SchemaError> {
        let d = self.finite(2, "d")?;
        if d < 0.0 {
            return Err(self.err(format!("negative range {d}")));
        }
        Ok(UwbFrame {
            timestamp: self.finite(0, "timestamp")?,
            anchor_id: self.parse(1, "anchor_id")?,
            d,
            rx: self.finite(3, "rx")?,
            fp: self.finite(4, "fp")?,
        })
    }
}

fn for_each_row(
    text: &str,
    min_columns: usize,
    mut f: impl FnMut(&Row<'_>) -> Result<(), SchemaError>,
) -> Result<(), SchemaError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let expected: Vec<&str> = HEADER.split(',').take(min_columns).collect();
    let found: Vec<&str> = header.iter().take(min_columns).map(str::trim).collect();
    if found != expected {
        return Err(SchemaError::Line {
            line: 1,
            message: format!("header must start with `{}`", expected.join(",")),
        });
    }
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        if !reader.read_record(&mut record)? {
            break;
        }
        let row = Row { line, record: &record };
        if record.len() < min_columns {
            return Err(row.err(format!("expected {min_columns} columns, found {}", record.len())));
        }
        f(&row)?;
    }
    Ok(())
}

/// Labeled frames from a training CSV.
pub fn parse_training_csv(text: &str) -> Result<Vec<(UwbFrame, Label)>, SchemaError> {
    let mut out = Vec::new();
    for_each_row(text, TRAINING_COLUMNS, |row| {
        out.push((row.frame()?, Label::from_los(row.label(5, "label")?)));
        Ok(())
    })?;
    Ok(out)
}

pub fn read_training_csv(path: &Path) -> Result<Vec<(UwbFrame, Label)>, SchemaError> {
    parse_training_csv(&fs::read_to_string(path)?)
}

/// A recording, regrouped into frames: consecutive rows sharing agent and
/// timestamp belong to one frame.
pub fn parse_recording(text: &str) -> Result<Vec<SyntheticFrame>, SchemaError> {
    let mut out: Vec<SyntheticFrame> = Vec::new();
    for_each_row(text, RECORD_COLUMNS, |row| {
        let frame = row.frame()?;
        let agent: usize = row.parse(6, "agent")?;
        let pose = [row.finite(7, "x_true")?, row.finite(8, "y_true")?];
        let m = Measurement {
            frame,
            true_los: row.label(5, "label")?,
            presented_los: row.label(9, "presented")?,
        };
        match out.last_mut() {
            Some(last) if last.agent == agent && last.timestamp == frame.timestamp => last.measurements.push(m),
            _ => out.push(SyntheticFrame {
                agent,
                timestamp: frame.timestamp,
                true_pose: pose,
                measurements: vec![m],
            }),
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn read_recording(path: &Path) -> Result<Vec<SyntheticFrame>, SchemaError> {
    parse_recording(&fs::read_to_string(path)?)
}
