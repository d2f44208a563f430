//! Throughput benchmarking of external detectors.
//!
//! A detector is any executable speaking a line-delimited JSON protocol on
//! stdin/stdout:
//!
//! ```text
//! harness -> {"hello": 1}
//! adapter -> {"ready": true, "model": "<name>"}
//! harness -> {"image": "/abs/path.png"}
//! adapter -> {"image_id": "...", "boxes": [{"x_min": ..., "confidence": ...}]}
//! ...
//! harness -> {"bye": true}          (then stdin closes)
//! ```
//!
//! Latency is wall-clock time from writing a request line to reading its
//! response line; the adapter does its own image decode, so the measurement
//! compares model speed, not disk speed. Requests are strictly sequential,
//! one in flight at a time.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use serde::Deserialize;

use crate::dataset::{parse_detection_line, Dataset, DetectionMap, DetectionRecord};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("empty adapter command")]
    EmptyCommand,
    #[error("timeouts must be positive")]
    NonPositiveTimeout,
    #[error("cannot spawn adapter `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("adapter handshake failed: {0}")]
    Handshake(String),
    #[error("adapter timed out after {0:?}")]
    Timeout(Duration),
    #[error("adapter closed its output stream")]
    AdapterExited,
    #[error("adapter protocol violation: {reason}; offending line: {line:?}")]
    Protocol { reason: String, line: String },
    #[error("adapter io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset has no images")]
    EmptyDataset,
    #[error("warmup {warmup} leaves no measured images out of {count}")]
    WarmupTooLarge { warmup: usize, count: usize },
    #[error("no entry for model `{model}` on hardware `{hardware}` in the reference table")]
    UnknownReferenceKey { model: String, hardware: String },
    #[error("cannot read reference table {path}: {reason}")]
    ReferenceParse { path: PathBuf, reason: String },
}

/// How to launch and talk to an adapter process.
#[derive(Debug, Clone)]
pub struct AdapterConfig {
    /// Executable followed by its arguments.
    pub command: Vec<String>,
    pub startup_timeout: Duration,
    pub per_image_timeout: Duration,
}

impl AdapterConfig {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            startup_timeout: Duration::from_secs(30),
            per_image_timeout: Duration::from_secs(60),
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.command.is_empty() {
            return Err(BenchError::EmptyCommand);
        }
        if self.startup_timeout.is_zero() || self.per_image_timeout.is_zero() {
            return Err(BenchError::NonPositiveTimeout);
        }
        Ok(())
    }
}

/// A live adapter subprocess, handshaken and ready for requests.
pub struct Adapter {
    child: Child,
    // Dropped on shutdown so the adapter sees EOF.
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    model: String,
}

#[derive(Deserialize)]
struct ReadyLine {
    ready: bool,
    model: String,
}

impl Adapter {
    /// Spawn the adapter and perform the handshake.
    pub fn spawn(cfg: &AdapterConfig) -> Result<Self, BenchError> {
        cfg.validate()?;
        let mut child = Command::new(&cfg.command[0])
            .args(&cfg.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| BenchError::Spawn {
                command: cfg.command.join(" "),
                source,
            })?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = child.stdout.take().expect("stdout was piped");

        // A reader thread feeds lines through a channel so each wait can
        // carry its own timeout.
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let mut adapter = Adapter {
            child,
            stdin: Some(stdin),
            lines,
            model: String::new(),
        };
        adapter.send_line("{\"hello\": 1}")?;
        let line = adapter.read_line(cfg.startup_timeout)?;
        let ready: ReadyLine = serde_json::from_str(&line)
            .map_err(|e| BenchError::Handshake(format!("{e}; got {line:?}")))?;
        if !ready.ready {
            return Err(BenchError::Handshake(format!("adapter not ready: {line:?}")));
        }
        adapter.model = ready.model;
        Ok(adapter)
    }

    /// Model name reported during the handshake.
    pub fn model(&self) -> &str {
        &self.model
    }

    fn send_line(&mut self, line: &str) -> Result<(), BenchError> {
        let stdin = self.stdin.as_mut().ok_or(BenchError::AdapterExited)?;
        stdin.write_all(line.as_bytes())?;
        stdin.write_all(b"\n")?;
        stdin.flush()?;
        Ok(())
    }

    fn read_line(&mut self, timeout: Duration) -> Result<String, BenchError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(BenchError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(BenchError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(BenchError::AdapterExited),
        }
    }

    /// Run one image through the adapter.
    ///
    /// Returns the parsed detections and the request-to-response latency.
    pub fn detect(
        &mut self,
        image_path: &Path,
        timeout: Duration,
    ) -> Result<(DetectionRecord, Duration), BenchError> {
        let request = serde_json::json!({ "image": image_path }).to_string();
        let started = Instant::now();
        self.send_line(&request)?;
        let line = self.read_line(timeout)?;
        let latency = started.elapsed();
        let record = parse_detection_line(&line).map_err(|reason| BenchError::Protocol {
            reason,
            line: line.clone(),
        })?;
        Ok((record, latency))
    }

    /// Send the shutdown message and reap the process.
    pub fn shutdown(mut self) -> Result<(), BenchError> {
        let _ = self.send_line("{\"bye\": true}");
        drop(self.stdin.take());
        self.child.wait()?;
        Ok(())
    }
}

impl Drop for Adapter {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Throughput summary for one benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub model_name: String,
    /// Images actually completed (equals `per_image_ms.len()`).
    pub image_count: usize,
    pub warmup_count: usize,
    /// Completed non-warmup images divided by their summed latency.
    pub mean_fps: f64,
    pub per_image_ms: Vec<f64>,
    pub hardware_label: String,
    /// Present when the adapter failed mid-run and the report is partial.
    pub failure: Option<String>,
}

/// A benchmark run: the throughput report plus everything the adapter
/// detected, ready to feed into evaluation.
#[derive(Debug)]
pub struct BenchRun {
    pub report: ThroughputReport,
    pub detections: DetectionMap,
}

/// Run every dataset image through the adapter once, in manifest order.
///
/// The first `warmup` latencies are recorded but excluded from `mean_fps`.
/// If the adapter dies mid-run a partial report is returned with its
/// `failure` field set, as long as at least one measured image completed.
pub fn benchmark(
    dataset: &Dataset,
    images_root: &Path,
    cfg: &AdapterConfig,
    warmup: usize,
    hardware_label: &str,
) -> Result<BenchRun, BenchError> {
    if dataset.images.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    if warmup >= dataset.images.len() {
        return Err(BenchError::WarmupTooLarge {
            warmup,
            count: dataset.images.len(),
        });
    }

    let mut adapter = Adapter::spawn(cfg)?;
    let model_name = adapter.model().to_string();
    let mut per_image_ms = Vec::with_capacity(dataset.images.len());
    let mut detections = DetectionMap::new();
    let mut failure = None;

    for entry in &dataset.images {
        // The protocol promises absolute paths, so the adapter's working
        // directory never matters.
        let image_path = std::path::absolute(images_root.join(&entry.file_path))?;
        match adapter.detect(&image_path, cfg.per_image_timeout) {
            Ok((mut record, latency)) => {
                // Requests are strictly sequential, so the response belongs
                // to `entry` regardless of the id the adapter echoed (an
                // adapter only sees the file path, not the manifest id).
                record.image_id = entry.image_id.clone();
                per_image_ms.push(latency.as_secs_f64() * 1e3);
                detections.insert(entry.image_id.clone(), record);
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }
    match failure {
        // Shutdown trouble after a clean run is a real error.
        None => adapter.shutdown()?,
        // The adapter already failed; reap it and keep the partial data.
        Some(_) => drop(adapter),
    }

    let measured = per_image_ms.len().saturating_sub(warmup);
    if measured == 0 {
        return Err(match failure {
            Some(reason) => BenchError::Handshake(format!(
                "adapter failed before any measured image completed: {reason}"
            )),
            None => BenchError::WarmupTooLarge {
                warmup,
                count: per_image_ms.len(),
            },
        });
    }
    let measured_seconds: f64 = per_image_ms[warmup..].iter().sum::<f64>() / 1e3;
    let report = ThroughputReport {
        model_name,
        image_count: per_image_ms.len(),
        warmup_count: warmup,
        mean_fps: measured as f64 / measured_seconds,
        per_image_ms,
        hardware_label: hardware_label.to_string(),
        failure,
    };
    Ok(BenchRun { report, detections })
}

/// Published FPS numbers keyed by `(model, hardware)`.
#[derive(Debug, Clone, Default)]
pub struct FpsReference {
    entries: BTreeMap<(String, String), f64>,
}

impl FpsReference {
    /// Load a `model,hardware,fps` CSV.
    pub fn load_csv(path: &Path) -> Result<Self, BenchError> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| BenchError::ReferenceParse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut entries = BTreeMap::new();
        for row in reader.deserialize::<(String, String, f64)>() {
            let (model, hardware, fps) = row.map_err(|e| BenchError::ReferenceParse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            entries.insert((model, hardware), fps);
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, model: &str, hardware: &str, fps: f64) {
        self.entries.insert((model.to_string(), hardware.to_string()), fps);
    }

    pub fn get(&self, model: &str, hardware: &str) -> Option<f64> {
        self.entries.get(&(model.to_string(), hardware.to_string())).copied()
    }
}

/// Measured-versus-published throughput for one (model, hardware) pair.
/// Informational only: the reference hardware is not assumed present, so no
/// pass/fail judgment is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub hardware: String,
    pub measured_fps: f64,
    pub reference_fps: f64,
    pub ratio: f64,
}

pub fn compare_reference(
    report: &ThroughputReport,
    reference: &FpsReference,
) -> Result<ComparisonRow, BenchError> {
    let reference_fps = reference
        .get(&report.model_name, &report.hardware_label)
        .ok_or_else(|| BenchError::UnknownReferenceKey {
            model: report.model_name.clone(),
            hardware: report.hardware_label.clone(),
        })?;
    Ok(ComparisonRow {
        model: report.model_name.clone(),
        hardware: report.hardware_label.clone(),
        measured_fps: report.mean_fps,
        reference_fps,
        ratio: report.mean_fps / reference_fps,
    })
}
