//! Plot-ready CSV tables.
//!
//! | file            | header                       |
//! |-----------------|------------------------------|
//! | dataset export  | `x0,x1,label` (label blank when unknown) |
//! | heatmap         | `x,y,lds` (row-major, y outer) |
//! | ε sweep         | `eps,val_error,r_vadv_final` |
//! | SD-norm series  | `update,K,sd_norm`           |
//!
//! Floats are written with Rust's shortest round-trip formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use vatlab_core::oracle::Heatmap;
use vatlab_core::Dataset;

use crate::error::{Result, VatlabError};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(VatlabError::io(path))
}

/// Up to the first two input columns, with the label if there is one.
pub fn dataset_csv(d: &Dataset) -> String {
    let mut s = String::from("x0,x1,label\n");
    for i in 0..d.len() {
        let row = d.inputs.row(i);
        let x1 = row.get(1).map_or(String::new(), |v| format!("{:?}", v));
        let label = d.labels.as_ref().map_or(String::new(), |l| l[i].to_string());
        let _ = writeln!(s, "{:?},{},{}", row[0], x1, label);
    }
    s
}

pub fn heatmap_csv(h: &Heatmap) -> String {
    let mut s = String::from("x,y,lds\n");
    for (p, v) in h.points.iter().zip(&h.values) {
        let _ = writeln!(s, "{:?},{:?},{:?}", p[0], p[1], v);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub eps: f64,
    pub val_error: f64,
    pub r_vadv_final: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("eps,val_error,r_vadv_final\n");
    for r in rows {
        let _ = writeln!(s, "{:?},{:?},{:?}", r.eps, r.val_error, r.r_vadv_final);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdNormRow {
    pub update: usize,
    pub k: usize,
    pub sd_norm: f64,
}

pub fn sdnorm_csv(rows: &[SdNormRow]) -> String {
    let mut s = String::from("update,K,sd_norm\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:?}", r.update, r.k, r.sd_norm);
    }
    s
}

/// Reads a CSV written by this module back as a header plus rows of cells.
pub fn read_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").split(',').map(String::from).collect();
    let rows = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}
