//! CSV and manifest writers.
//!
//! One CSV per field, keyed by node id `slice/index`. Floats are written
//! with `Display` (shortest round-trip form), so identical inputs give
//! byte-identical files.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::field::NodeField;
use crate::indifference::{AsymptoticsReport, IndifferenceResult};
use crate::lattice::LatticeModel;
use crate::measure::MeasureChange;
use crate::verify::{Status, VerifyReport};

/// A named column group; a field of dimension > 1 expands to `name_0..`.
pub struct Column<'a> {
    pub name: &'a str,
    pub field: &'a NodeField,
}

fn header_for(cols: &[Column<'_>]) -> Vec<String> {
    let mut h: Vec<String> = ["node", "slice", "index", "time"].iter().map(|s| s.to_string()).collect();
    for c in cols {
        if c.field.dim() == 1 {
            h.push(c.name.to_string());
        } else {
            h.extend((0..c.field.dim()).map(|j| format!("{}_{j}", c.name)));
        }
    }
    h
}

/// Writes node-keyed fields. Fields with fewer slices than the lattice
/// (strategies, integrands) leave the later slices blank.
pub fn write_node_fields(path: &Path, model: &LatticeModel, cols: &[Column<'_>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header_for(cols))?;
    let mut row = Vec::new();
    for k in 0..=model.steps() {
        let t = model.time(k);
        for i in 0..model.slice_len(k) {
            row.clear();
            row.push(format!("{k}/{i}"));
            row.push(k.to_string());
            row.push(i.to_string());
            row.push(t.to_string());
            for c in cols {
                if k < c.field.slice_count() {
                    row.extend(c.field.get(k, i).iter().map(|v| v.to_string()));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), c.field.dim()));
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Branch probabilities of a measure, one row per (node, branch).
pub fn write_measure(path: &Path, model: &LatticeModel, q: &MeasureChange) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "branch", "sign", "jump", "measure", "prob", "base_prob", "density"])?;
    let label = q.label().to_string();
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let base = model.probs(k, i);
            for (b, p) in q.probs(k, i).iter().enumerate() {
                let jump = model.jump_of(b).map(|j| (j + 1).to_string()).unwrap_or_else(|| "0".into());
                w.write_record([
                    format!("{k}/{i}"),
                    b.to_string(),
                    model.sign_of(b).to_string(),
                    jump,
                    label.clone(),
                    p.to_string(),
                    base[b].to_string(),
                    q.density(k, i).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_indifference(path: &Path, model: &LatticeModel, r: &IndifferenceResult) -> Result<()> {
    let mut cols = vec![
        Column { name: "pi", field: &r.pi },
        Column { name: "psi", field: &r.psi },
        Column { name: "u", field: &r.u },
        Column { name: "y_zero", field: &r.y_zero },
    ];
    if let Some(a) = &r.u_all {
        cols.push(Column { name: "u_all", field: a });
    }
    write_node_fields(path, model, &cols)
}

pub fn write_asymptotics(path: &Path, rep: &AsymptoticsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "alpha",
        "sup_gap",
        "z_gap",
        "u_gap",
        "pi0",
        "risk_min0",
        "slope_sup",
        "slope_z",
        "slope_u",
    ])?;
    let slope = |s: Option<f64>| s.map(|v| v.to_string()).unwrap_or_default();
    for r in &rep.rows {
        w.write_record([
            r.alpha.to_string(),
            r.sup_gap.to_string(),
            r.z_gap.to_string(),
            r.u_gap.to_string(),
            r.pi0.to_string(),
            r.risk_min0.to_string(),
            slope(rep.slopes[0]),
            slope(rep.slopes[1]),
            slope(rep.slopes[2]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_verify(path: &Path, rep: &VerifyReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["module", "check", "value", "tolerance", "status", "note"])?;
    for c in &rep.checks {
        let status = match c.status {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skip => "skip",
        };
        w.write_record([c.module, &c.label, &c.value.to_string(), &c.tolerance.to_string(), status, &c.note])?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column key/value table for scalar summaries.
pub fn write_scalars(path: &Path, rows: &[(&str, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["quantity", "value"])?;
    for (k, v) in rows {
        w.write_record([*k, &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub scenario: String,
    pub config_sha256: String,
    pub crate_version: String,
    pub mode: String,
    pub measure: Vec<String>,
    pub tolerances: serde_json::Value,
    pub files: Vec<String>,
    pub timing_ms: u128,
    pub exit_status: i32,
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<PathBuf> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(m)?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::tests::config;

    #[test]
    fn node_fields_blank_past_their_slices() {
        let model = LatticeModel::build(&config(0.4, 0.2, 2, &[(1.0, 0.2)])).unwrap();
        let y = model.terminal_values(|l| l.s[0]);
        let sol = crate::bsde::solve_bsde(&model, &crate::GeneratorSpec::Zero, &y, &Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let early = NodeField::from_slices(1, sol.y.slices()[..2].to_vec());
        write_node_fields(&p, &model, &[Column { name: "y", field: &sol.y }, Column { name: "u", field: &early }]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "node,slice,index,time,y,u");
        assert_eq!(lines.len(), 1 + model.node_count());
        assert!(lines.last().unwrap().ends_with(','));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
