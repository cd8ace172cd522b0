//! CSV tables with fixed column schemas, and SVG figures.
//!
//! Floats are written in Rust's shortest round-trip form and missing
//! values as empty fields, so a table's bytes depend only on its values.

pub mod svg;

use std::path::Path;

use crate::{Error, Result};

/// Column orders of every CSV the workbench writes.
pub mod schema {
    pub const SELECTION: &[&str] = &["layer", "position", "bypass", "induce", "kl", "objective", "admissible"];
    pub const TRAIN_LOSS: &[&str] = &["step", "loss", "smoothed"];
    pub const FIT_LOSS: &[&str] = &["vector", "epoch", "val_loss"];
    pub const BEHAVIOUR: &[&str] = &["vector", "class", "coef", "asr"];
    pub const PATCH_PARTS: &[&str] =
        &["vector", "class", "orientation", "samples", "positions", "skipped", "steer_node_score"];
    pub const EDGES: &[&str] = &["vector", "upstream", "downstream", "channel", "score"];
    pub const NODES: &[&str] = &["vector", "node", "score"];
    pub const DIMS: &[&str] = &["vector", "dim", "s", "ie", "r"];
    pub const ORACLE: &[&str] = &["vector", "orientation", "edge", "eap", "direct"];
    pub const CIRCUIT: &[&str] = &["upstream", "downstream", "channel", "score"];
    pub const FAITH_CURVE: &[&str] = &["vector", "class", "size", "fraction", "faithfulness"];
    pub const CIRCUIT_SUMMARY: &[&str] =
        &["vector", "class", "size", "fraction", "faithfulness", "complement", "positions"];
    pub const OVERLAP: &[&str] = &["size", "a", "b", "overlap"];
    pub const INTERCHANGE: &[&str] = &["circuit", "vector", "class", "size", "kind", "seed", "faithfulness"];
    pub const EDGE_DIST: &[&str] = &["vector", "scope", "axis", "kind", "count", "pct"];
    pub const SVV: &[&str] = &["vector", "source", "rank", "token", "logit"];
    pub const ABLATION: &[&str] = &[
        "vector",
        "kind",
        "harmful_asr",
        "harmless_asr",
        "harmful_drop_pct",
        "harmless_drop_pct",
        "avg_drop_pct",
    ];
    pub const SWEEP: &[&str] = &["vector", "method", "tau", "k", "sparsity_pct", "class", "seed", "asr"];
    pub const IOU: &[&str] = &["tau", "pair", "iou", "pvalue"];
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: &'static [&'static str],
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &'static [&'static str]) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width for {:?}", self.header);
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        w.into_inner().map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Header and rows of a CSV file, for checking written tables.
    pub fn read(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
        let header = r
            .headers()
            .map_err(|e| Error::Serde(e.to_string()))?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(|e| Error::Serde(e.to_string()))?.iter().map(String::from).collect());
        }
        Ok((header, rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(schema::SWEEP);
        assert_eq!(
            String::from_utf8(t.to_bytes().unwrap()).unwrap(),
            "vector,method,tau,k,sparsity_pct,class,seed,asr\n"
        );
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-17, 1e300] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(opt(None), "");
    }
}
