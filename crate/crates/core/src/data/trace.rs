//! Long-format interpretability traces: one value per row.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{fmt_f64, Dataset};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{forward_full, Batch, ModelParams};
use crate::nn::Forward;
use crate::train::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    AttnT2i,
    AttnI2t,
    XattnT,
    XattnI,
    RefineAttn,
    GateT,
    GateI,
    ExpertGate,
    Prediction,
    Label,
}

const KINDS: [(TraceKind, &str); 10] = [
    (TraceKind::AttnT2i, "attn_t2i"),
    (TraceKind::AttnI2t, "attn_i2t"),
    (TraceKind::XattnT, "xattn_t"),
    (TraceKind::XattnI, "xattn_i"),
    (TraceKind::RefineAttn, "refine_attn"),
    (TraceKind::GateT, "gate_t"),
    (TraceKind::GateI, "gate_i"),
    (TraceKind::ExpertGate, "expert_gate"),
    (TraceKind::Prediction, "prediction"),
    (TraceKind::Label, "label"),
];

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        KINDS.iter().find(|(k, _)| *k == self).map(|(_, s)| *s).unwrap_or("?")
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TraceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KINDS
            .iter()
            .find(|(_, name)| *name == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown trace kind {s:?}")))
    }
}

/// One traced scalar. Attention rows are indexed `[head, row, col]`, gates
/// `[channel]`, expert weights `[expert]`; prediction and label have no index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub id: String,
    pub kind: TraceKind,
    pub indices: Vec<usize>,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" => Ok(TraceFormat::Jsonl),
            _ => Err(Error::InvalidArgument(format!("unknown trace format {s:?}"))),
        }
    }
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (slot, &n) in idx.iter_mut().zip(shape).rev() {
        *slot = flat % n;
        flat /= n;
    }
    idx
}

/// Emits rows for tensor `v` whose leading axis is the batch.
fn push_rows(rows: &mut [Vec<TraceRow>], tape: &Tape, v: Option<Var>, kind: TraceKind, ids: &[&str]) {
    let Some(v) = v else { return };
    let t = tape.value(v);
    let inner: Vec<usize> = t.shape()[1..].to_vec();
    // gates carry a length-1 sequence axis that is not worth indexing
    let keep: Vec<usize> = match kind {
        TraceKind::GateT | TraceKind::GateI => vec![inner.len() - 1],
        _ => (0..inner.len()).collect(),
    };
    let per = inner.iter().product::<usize>();
    for (b, chunk) in t.data().chunks(per).enumerate() {
        for (flat, &value) in chunk.iter().enumerate() {
            let full = unravel(flat, &inner);
            rows[b].push(TraceRow {
                id: ids[b].to_string(),
                kind,
                indices: keep.iter().map(|&k| full[k]).collect(),
                value,
            });
        }
    }
}

/// Eval-mode traces for every record, grouped by record in dataset order.
pub fn collect_traces(model: &ModelParams, dataset: &Dataset) -> Result<Vec<TraceRow>> {
    let mut out = Vec::new();
    for chunk in dataset.records.chunks(256) {
        let batch = Batch::from_records(chunk)?;
        let ids: Vec<&str> = chunk.iter().map(|r| r.id.as_str()).collect();
        let mut tape = Tape::new();
        let bind = model.store.bind(&mut tape);
        let text = tape.constant(batch.text.clone());
        let image = tape.constant(batch.image.clone());
        let mut f = Forward::eval(&mut tape, &bind);
        let fo = forward_full(&mut f, model, text, image)?;

        let mut rows: Vec<Vec<TraceRow>> = vec![Vec::new(); chunk.len()];
        push_rows(&mut rows, &tape, fo.gated.attn_t2i_w, TraceKind::AttnT2i, &ids);
        push_rows(&mut rows, &tape, fo.gated.attn_i2t_w, TraceKind::AttnI2t, &ids);
        push_rows(&mut rows, &tape, fo.dual.xattn_t_w, TraceKind::XattnT, &ids);
        push_rows(&mut rows, &tape, fo.dual.xattn_i_w, TraceKind::XattnI, &ids);
        push_rows(&mut rows, &tape, fo.fusion.refine_w, TraceKind::RefineAttn, &ids);
        push_rows(&mut rows, &tape, fo.gated.g_t, TraceKind::GateT, &ids);
        push_rows(&mut rows, &tape, fo.gated.g_i, TraceKind::GateI, &ids);
        push_rows(&mut rows, &tape, fo.fusion.g, TraceKind::ExpertGate, &ids);

        let logits = tape.value(fo.logits);
        let c = model.num_classes();
        for (b, r) in chunk.iter().enumerate() {
            let pred = argmax(&logits.data()[b * c..(b + 1) * c]);
            for (kind, value) in [(TraceKind::Prediction, pred), (TraceKind::Label, r.label)] {
                rows[b].push(TraceRow {
                    id: r.id.clone(),
                    kind,
                    indices: Vec::new(),
                    value: value as f64,
                });
            }
        }
        out.extend(rows.into_iter().flatten());
    }
    Ok(out)
}

fn join_indices(idx: &[usize]) -> String {
    idx.iter().map(usize::to_string).collect::<Vec<_>>().join(":")
}

fn split_indices(s: &str) -> std::result::Result<Vec<usize>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(':')
        .map(|p| p.parse().map_err(|_| format!("bad index {p:?}")))
        .collect()
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let werr = |e: csv::Error| Error::InvalidArgument(format!("csv write: {e}"));
    wr.write_record(["id", "kind", "indices", "value"]).map_err(werr)?;
    for r in rows {
        wr.write_record([
            r.id.as_str(),
            r.kind.as_str(),
            &join_indices(&r.indices),
            &fmt_f64(r.value),
        ])
        .map_err(werr)?;
    }
    wr.flush().map_err(|e| Error::InvalidArgument(format!("csv write: {e}")))
}

pub fn write_trace_jsonl<W: Write>(rows: &[TraceRow], mut w: W) -> Result<()> {
    let werr = |e: std::io::Error| Error::InvalidArgument(format!("jsonl write: {e}"));
    for r in rows {
        let id = serde_json::to_string(&r.id).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let idx = r.indices.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        writeln!(
            w,
            "{{\"id\":{id},\"kind\":\"{}\",\"indices\":[{idx}],\"value\":{}}}",
            r.kind,
            fmt_f64(r.value)
        )
        .map_err(werr)?;
    }
    w.flush().map_err(werr)
}

/// Writes traces to `path`; refuses an empty trace set.
pub fn export_trace(rows: &[TraceRow], path: impl AsRef<Path>, format: TraceFormat) -> Result<()> {
    let path = path.as_ref();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no trace rows to export".into()));
    }
    let file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    match format {
        TraceFormat::Csv => write_trace_csv(rows, file),
        TraceFormat::Jsonl => write_trace_jsonl(rows, file),
    }
}

pub fn parse_trace_csv<R: std::io::Read>(r: R) -> Result<Vec<TraceRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "kind", "indices", "value"] {
        return Err(Error::Parse {
            line: 1,
            msg: "expected columns id,kind,indices,value".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let perr = |msg: String| Error::Parse { line, msg };
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if rec.len() != 4 {
            return Err(perr(format!("expected 4 columns, found {}", rec.len())));
        }
        let value: f64 = rec[3].parse().map_err(|_| perr(format!("bad value {:?}", &rec[3])))?;
        rows.push(TraceRow {
            id: rec[0].to_string(),
            kind: rec[1].parse().map_err(|e: Error| perr(e.to_string()))?,
            indices: split_indices(&rec[2]).map_err(perr)?,
            value,
        });
    }
    Ok(rows)
}

pub fn parse_trace_jsonl<R: std::io::Read>(r: R) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let perr = |msg: String| Error::Parse { line: i + 1, msg };
        let line = line.map_err(|e| perr(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<TraceRow> {
        vec![
            TraceRow {
                id: "a,\"quoted\"".into(),
                kind: TraceKind::AttnT2i,
                indices: vec![1, 0, 0],
                value: 0.1 + 0.2,
            },
            TraceRow {
                id: "b".into(),
                kind: TraceKind::Prediction,
                indices: vec![],
                value: 1.0,
            },
        ]
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_trace_csv(&rows(), &mut buf).unwrap();
        assert_eq!(parse_trace_csv(&buf[..]).unwrap(), rows());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut buf = Vec::new();
        write_trace_jsonl(&rows(), &mut buf).unwrap();
        assert_eq!(parse_trace_jsonl(&buf[..]).unwrap(), rows());
    }

    #[test]
    fn unravel_is_row_major() {
        assert_eq!(unravel(5, &[2, 3]), vec![1, 2]);
        assert_eq!(unravel(0, &[]), Vec::<usize>::new());
    }
}
