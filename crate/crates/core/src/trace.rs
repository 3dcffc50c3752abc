//! Expert-activation traces: capture, validation and the JSONL wire format.
//!
//! A trace file is UTF-8, one JSON object per line. Line 1 is the header
//! `{"trace_version":1,"source":...,"model_shape":[L,N]}`; every following
//! line is one [`ActivationRecord`]. Gate values are written with the shortest
//! representation that parses back to the identical `f64`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::ForwardResult;

pub const POSITION_TAG: &str = "last_input_token";
pub const TRACE_VERSION: u32 = 1;
pub const GATE_SUM_TOLERANCE: f64 = 1e-6;

/// `<dataset>.<scenario>.trace.jsonl`
pub fn trace_file_name(dataset: &str, scenario: &str) -> String {
    format!("{dataset}.{scenario}.trace.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub prompt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_label: Option<String>,
    pub layer_count: usize,
    pub experts_per_layer: usize,
    /// Per layer, `(expert index, gate)` for every activated expert.
    pub activations: Vec<Vec<(usize, f64)>>,
    pub position_tag: String,
    /// Always-active experts, when the exporting model has any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shared: Vec<usize>,
}

impl ActivationRecord {
    pub fn gate(&self, layer: usize, index: usize) -> Option<f64> {
        self.activations
            .get(layer)?
            .iter()
            .find(|(i, _)| *i == index)
            .map(|(_, g)| *g)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("record `{}`: {msg}", self.prompt_id)));
        if self.position_tag != POSITION_TAG {
            return fail(format!("position_tag `{}` is not `{POSITION_TAG}`", self.position_tag));
        }
        if self.activations.len() != self.layer_count {
            return fail(format!(
                "{} activation layers for layer_count {}",
                self.activations.len(),
                self.layer_count
            ));
        }
        for (layer, pairs) in self.activations.iter().enumerate() {
            let mut seen = HashSet::new();
            let mut sum = 0.0;
            for &(idx, gate) in pairs {
                if idx >= self.experts_per_layer {
                    return fail(format!("layer {layer}: expert index {idx} out of range"));
                }
                if !seen.insert(idx) {
                    return fail(format!("layer {layer}: duplicate expert index {idx}"));
                }
                if !(gate > 0.0 && gate.is_finite()) {
                    return fail(format!("layer {layer}: gate {gate} for expert {idx} is not positive"));
                }
                sum += gate;
            }
            if (sum - 1.0).abs() > GATE_SUM_TOLERANCE {
                return fail(format!("layer {layer}: gate sum {sum} differs from 1"));
            }
        }
        Ok(())
    }
}

/// Extracts the positive gates of every layer at the last input position.
pub fn capture(result: &ForwardResult, prompt_id: &str, label: Option<&str>) -> ActivationRecord {
    let experts_per_layer = result.gates.first().map_or(0, |g| g.gates.len());
    ActivationRecord {
        prompt_id: prompt_id.to_string(),
        scenario_label: label.map(str::to_string),
        layer_count: result.gates.len(),
        experts_per_layer,
        activations: result.gates.iter().map(|g| g.active().collect()).collect(),
        position_tag: POSITION_TAG.to_string(),
        shared: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub source: String,
    pub model_shape: (usize, usize),
    pub records: Vec<ActivationRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    trace_version: u32,
    source: String,
    model_shape: (usize, usize),
}

impl TraceSet {
    pub fn new(source: impl Into<String>, model_shape: (usize, usize)) -> Self {
        Self {
            source: source.into(),
            model_shape,
            records: Vec::new(),
        }
    }

    pub fn from_records(
        source: impl Into<String>,
        model_shape: (usize, usize),
        records: Vec<ActivationRecord>,
    ) -> Result<Self> {
        let set = Self {
            source: source.into(),
            model_shape,
            records,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            self.check_record(r)?;
            if !ids.insert(r.prompt_id.as_str()) {
                return Err(Error::Validation(format!("duplicate prompt_id `{}`", r.prompt_id)));
            }
        }
        Ok(())
    }

    fn check_record(&self, r: &ActivationRecord) -> Result<()> {
        if (r.layer_count, r.experts_per_layer) != self.model_shape {
            return Err(Error::Validation(format!(
                "record `{}` has shape ({}, {}), set has ({}, {})",
                r.prompt_id, r.layer_count, r.experts_per_layer, self.model_shape.0, self.model_shape.1
            )));
        }
        r.validate()
    }

    /// Records carrying `label`, as a new set.
    pub fn filter_label(&self, label: &str) -> TraceSet {
        TraceSet {
            source: self.source.clone(),
            model_shape: self.model_shape,
            records: self
                .records
                .iter()
                .filter(|r| r.scenario_label.as_deref() == Some(label))
                .cloned()
                .collect(),
        }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        let header = Header {
            trace_version: TRACE_VERSION,
            source: self.source.clone(),
            model_shape: self.model_shape,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let header_line = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing header line".into(),
        })??;
        let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.trace_version != TRACE_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported trace_version {}", header.trace_version),
            });
        }
        let mut set = TraceSet::new(header.source, header.model_shape);
        let mut ids = HashSet::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ActivationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            set.check_record(&record)
                .map_err(|e| Error::Validation(format!("line {line_no}: {e}")))?;
            if !ids.insert(record.prompt_id.clone()) {
                return Err(Error::Validation(format!(
                    "line {line_no}: duplicate prompt_id `{}`",
                    record.prompt_id
                )));
            }
            set.records.push(record);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Data(format!("cannot open trace {}: {e}", path.display())))?;
        Self::read(file)
    }
}
