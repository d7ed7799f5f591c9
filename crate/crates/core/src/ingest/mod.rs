//! Detection stream wire formats and frame access.
//!
//! JSONL is the canonical format, one detection per line:
//!
//! ```text
//! {"frame": 12, "track": 7, "bbox": [x_min, y_min, x_max, y_max], "conf": 0.91, "class": "car"}
//! ```
//!
//! `track` may be `null` when the upstream detector does not track. An optional
//! `tile` rectangle marks the box as tile-local (see [`crate::tiling`]).
//! MOTChallenge `det.txt`/`gt.txt` files can be imported read-only.

mod frame_store;

pub use frame_store::{
    write_png, DirFrameStore, FrameManifest, FrameSource, PixelRect, MANIFEST_FILE,
};

use crate::geom::BBox;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("stream order violation at line {line}: frame {frame} follows frame {previous}")]
    FrameRegression {
        line: usize,
        frame: u64,
        previous: u64,
    },

    #[error("frame {frame}: image decode failed: {reason}")]
    Decode { frame: u64, reason: String },

    #[error("frame {frame}: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    DimensionMismatch {
        frame: u64,
        expected_w: u32,
        expected_h: u32,
        found_w: u32,
        found_h: u32,
    },

    #[error("invalid frame store manifest: {0}")]
    Manifest(String),
}

/// A single detected object in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "frame")]
    pub frame_index: u64,
    #[serde(rename = "track")]
    pub track_id: Option<u64>,
    pub bbox: BBox,
    #[serde(rename = "conf")]
    pub confidence: f64,
    #[serde(rename = "class")]
    pub class_label: String,
    /// Tile rectangle when `bbox` is expressed in tile-local coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<BBox>,
}

impl Detection {
    pub fn new(
        frame_index: u64,
        track_id: Option<u64>,
        bbox: BBox,
        confidence: f64,
        class_label: &str,
    ) -> Self {
        Self {
            frame_index,
            track_id,
            bbox,
            confidence,
            class_label: class_label.to_string(),
            tile: None,
        }
    }
}

/// All detections sharing one frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBatch {
    pub frame_index: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamFormat {
    Jsonl,
    Mot,
}

impl std::str::FromStr for StreamFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(StreamFormat::Jsonl),
            "mot" | "txt" => Ok(StreamFormat::Mot),
            other => Err(format!("unknown detection format '{other}'")),
        }
    }
}

/// A record the reader could not parse and skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

/// Per-run ingest summary. Skipped records are listed (first 100) and counted.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub records_read: usize,
    pub records_skipped: usize,
    pub batches: usize,
    pub skipped: Vec<SkippedRecord>,
}

const MAX_LISTED_SKIPS: usize = 100;

/// Streaming reader yielding per-frame batches in strictly ascending order.
pub struct DetectionReader<R> {
    source: R,
    format: StreamFormat,
    line_no: usize,
    buf: String,
    pending: Option<Detection>,
    last_frame: Option<u64>,
    report: IngestReport,
    done: bool,
}

impl<R: BufRead> DetectionReader<R> {
    pub fn new(source: R, format: StreamFormat) -> Self {
        Self {
            source,
            format,
            line_no: 0,
            buf: String::new(),
            pending: None,
            last_frame: None,
            report: IngestReport::default(),
            done: false,
        }
    }

    pub fn report(&self) -> &IngestReport {
        &self.report
    }

    pub fn into_report(self) -> IngestReport {
        self.report
    }

    /// Next well-formed detection, skipping (and counting) malformed lines.
    fn next_record(&mut self) -> Result<Option<(usize, Detection)>, IngestError> {
        loop {
            self.buf.clear();
            if self.source.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            let line = self.buf.trim();
            if line.is_empty() {
                continue;
            }
            let parsed = match self.format {
                StreamFormat::Jsonl => parse_jsonl_record(line),
                StreamFormat::Mot => parse_mot_record(line),
            };
            match parsed {
                Ok(det) => {
                    self.report.records_read += 1;
                    return Ok(Some((self.line_no, det)));
                }
                Err(reason) => {
                    self.report.records_skipped += 1;
                    if self.report.skipped.len() < MAX_LISTED_SKIPS {
                        self.report.skipped.push(SkippedRecord {
                            line: self.line_no,
                            reason,
                        });
                    }
                    tracing::debug!(line = self.line_no, "skipping malformed detection record");
                }
            }
        }
    }

    fn next_batch(&mut self) -> Result<Option<DetectionBatch>, IngestError> {
        let first = match self.pending.take() {
            Some(d) => d,
            None => match self.next_record()? {
                Some((line, d)) => {
                    self.check_order(line, d.frame_index)?;
                    d
                }
                None => return Ok(None),
            },
        };
        let frame = first.frame_index;
        self.last_frame = Some(frame);
        let mut detections = vec![first];
        while let Some((line, det)) = self.next_record()? {
            if det.frame_index == frame {
                detections.push(det);
            } else {
                self.check_order(line, det.frame_index)?;
                self.pending = Some(det);
                break;
            }
        }
        self.report.batches += 1;
        Ok(Some(DetectionBatch {
            frame_index: frame,
            detections,
        }))
    }

    fn check_order(&self, line: usize, frame: u64) -> Result<(), IngestError> {
        match self.last_frame {
            Some(prev) if frame <= prev => Err(IngestError::FrameRegression {
                line,
                frame,
                previous: prev,
            }),
            _ => Ok(()),
        }
    }
}

impl<R: BufRead> Iterator for DetectionReader<R> {
    type Item = Result<DetectionBatch, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_batch() {
            Ok(Some(b)) => Some(Ok(b)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Reads a whole detection stream into memory.
pub fn read_detection_stream<R: BufRead>(
    source: R,
    format: StreamFormat,
) -> Result<(Vec<DetectionBatch>, IngestReport), IngestError> {
    let mut reader = DetectionReader::new(source, format);
    let mut batches = Vec::new();
    for batch in reader.by_ref() {
        batches.push(batch?);
    }
    Ok((batches, reader.into_report()))
}

fn parse_jsonl_record(line: &str) -> Result<Detection, String> {
    let det: Detection = serde_json::from_str(line).map_err(|e| e.to_string())?;
    validate(det)
}

fn validate(det: Detection) -> Result<Detection, String> {
    if !(0.0..=1.0).contains(&det.confidence) {
        return Err(format!("confidence {} outside [0, 1]", det.confidence));
    }
    if det.class_label.is_empty() {
        return Err("empty class label".into());
    }
    Ok(det)
}

/// MOTChallenge: `frame,id,left,top,width,height,conf,x,y,z` with 1-based frames.
fn parse_mot_record(line: &str) -> Result<Detection, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 6 {
        return Err(format!(
            "expected at least 6 fields, found {}",
            fields.len()
        ));
    }
    let num = |i: usize| -> Result<f64, String> {
        fields[i]
            .parse::<f64>()
            .map_err(|_| format!("field {} is not numeric: '{}'", i + 1, fields[i]))
    };
    let frame = num(0)?;
    if frame < 1.0 || frame.fract() != 0.0 {
        return Err(format!("invalid MOT frame number {frame}"));
    }
    let id = num(1)?;
    let track_id = if id < 0.0 { None } else { Some(id as u64) };
    let (left, top, w, h) = (num(2)?, num(3)?, num(4)?, num(5)?);
    let bbox = BBox::new(left, top, left + w, top + h).map_err(|e| e.to_string())?;
    // det files carry raw detector scores, gt files a 0/1 flag
    let confidence = if fields.len() > 6 {
        num(6)?.clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(Detection::new(
        frame as u64 - 1,
        track_id,
        bbox,
        confidence,
        "vehicle",
    ))
}

/// Writes detections as canonical JSONL, one object per line.
pub fn write_detections_jsonl<'a, W, I>(mut out: W, detections: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Detection>,
{
    for det in detections {
        serde_json::to_writer(&mut out, det)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
