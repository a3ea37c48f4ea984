// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed-schema result tables (CSV and JSONL) and spatial-map heatmaps.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::circuits::SpatialMap;
use crate::error::{Error, Result};
use crate::svr::{CANVAS, CELL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schema {
    MainTable,
    ControlsTable,
    BootstrapTable,
    SubsampleTable,
    SweepTable,
    Sensitivity,
    Ablation,
    ProbeTrajectory,
    Interference,
    Calibration,
    LnCurve,
    EntropyCurve,
    Curvature,
    Validation,
}

impl Schema {
    pub fn name(self) -> &'static str {
        match self {
            Schema::MainTable => "main_table",
            Schema::ControlsTable => "controls_table",
            Schema::BootstrapTable => "bootstrap_table",
            Schema::SubsampleTable => "subsample_table",
            Schema::SweepTable => "sweep_table",
            Schema::Sensitivity => "sensitivity",
            Schema::Ablation => "ablation",
            Schema::ProbeTrajectory => "probe_trajectory",
            Schema::Interference => "interference",
            Schema::Calibration => "calibration",
            Schema::LnCurve => "ln_curve",
            Schema::EntropyCurve => "entropy_curve",
            Schema::Curvature => "curvature",
            Schema::Validation => "validation",
        }
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Schema::MainTable | Schema::ControlsTable => {
                &["config", "base", "delta_pp", "chg_pct", "rel_perturbation", "n", "seed"]
            }
            Schema::BootstrapTable => &["config", "delta_pp_mean", "delta_pp_std", "chg_mean", "chg_std"],
            Schema::SubsampleTable => &["config", "n", "delta_pp_mean", "delta_pp_std", "chg_mean", "chg_std"],
            Schema::SweepTable => &["config", "layer", "scale", "delta_pp", "drift"],
            Schema::Sensitivity => &["layer", "lambda", "delta_pp", "sensitivity", "chg_pct", "rel_perturbation"],
            Schema::Ablation => &["set", "flip_pct", "set_size", "dictionary_fraction"],
            Schema::ProbeTrajectory => &["layer", "mean_acc", "std_acc", "shuffled_acc"],
            Schema::Interference => &[
                "rho",
                "fraction_negative",
                "union_norm_ratio",
                "p_global_given_pattern",
                "pattern_norm",
                "global_norm",
            ],
            Schema::Calibration => &["target", "reference", "lambda", "residual", "reference_rel", "target_rel"],
            Schema::LnCurve => &["delta_norm", "nsr"],
            Schema::EntropyCurve => &["signal_norm", "entropy", "max_entropy"],
            Schema::Curvature => &["alpha", "e_drift", "measured"],
            Schema::Validation => &["split", "records", "mismatches", "parse_failures"],
        }
    }
}

/// Rows checked against a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: Schema,
    rows: Vec<Map<String, Value>>,
}

impl Table {
    /// Builds a table from serializable rows. Every schema column must be
    /// present in every row; the error lists each missing cell.
    pub fn from_rows<T: Serialize>(schema: Schema, rows: &[T]) -> Result<Self> {
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let Value::Object(obj) = serde_json::to_value(r)? else {
                return Err(Error::Invalid(format!("{} row {i} is not a record", schema.name())));
            };
            for c in schema.columns() {
                if !obj.contains_key(*c) {
                    missing.push(format!("row {i}: {c}"));
                }
            }
            out.push(obj);
        }
        if !missing.is_empty() {
            return Err(Error::Invalid(format!(
                "incomplete {} bundle, missing {}",
                schema.name(),
                missing.join(", ")
            )));
        }
        Ok(Self { schema, rows: out })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let cols = self.schema.columns();
        w.write_record(cols).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(cols.iter().map(|c| cell(&r[*c]))).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// One JSON object per row with the schema columns in order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            let ordered: Map<String, Value> = self
                .schema
                .columns()
                .iter()
                .map(|c| (c.to_string(), r[*c].clone()))
                .collect();
            s.push_str(&serde_json::to_string(&Value::Object(ordered))?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Writes `{name}.csv` and `{name}.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{}.csv", self.schema.name()));
        let jsonl_path = dir.join(format!("{}.jsonl", self.schema.name()));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        std::fs::write(&jsonl_path, self.to_jsonl()?).map_err(|e| Error::io(&jsonl_path, e))?;
        Ok(vec![csv_path, jsonl_path])
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

/// Fixed formatting so reports are byte-stable.
fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Number(n) if n.is_f64() => format!("{:.6}", n.as_f64().unwrap_or(f64::NAN)),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Renders a spatial map as a viridis raster, one `CELL`-sized block per
/// grid cell, normalized by the map maximum.
pub fn render_heatmap(map: &SpatialMap) -> Result<RgbImage> {
    let (h, w) = map.grid;
    if h == 0 || w == 0 || map.values.len() != h * w {
        return Err(Error::Shape(format!("spatial map {h}×{w} with {} values", map.values.len())));
    }
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("spatial map of feature {}", map.feature)));
    }
    let max = map.values.iter().copied().fold(0.0, f64::max);
    let (cw, ch) = if (h, w) == (4, 4) { (CELL, CELL) } else { (CANVAS / w as u32, CANVAS / h as u32) };
    let mut img = RgbImage::new(cw * w as u32, ch * h as u32);
    for r in 0..h {
        for c in 0..w {
            let t = if max > 0.0 { (map.get(r, c) / max).clamp(0.0, 1.0) } else { 0.0 };
            let col = colorous::VIRIDIS.eval_continuous(t);
            let px = Rgb([col.r, col.g, col.b]);
            for y in 0..ch {
                for x in 0..cw {
                    img.put_pixel(c as u32 * cw + x, r as u32 * ch + y, px);
                }
            }
        }
    }
    Ok(img)
}

pub fn plot_heatmap(map: &SpatialMap, path: &Path) -> Result<()> {
    let png = crate::svr::render::encode_png(&render_heatmap(map)?)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, png).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Partial {
        config: String,
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::from_rows::<Partial>(Schema::MainTable, &[]).unwrap();
        assert_eq!(t.to_csv().unwrap(), "config,base,delta_pp,chg_pct,rel_perturbation,n,seed\n");
        assert_eq!(t.to_jsonl().unwrap(), "");
    }

    #[test]
    fn missing_cells_are_listed() {
        let err = Table::from_rows(Schema::MainTable, &[Partial { config: "x".into() }]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 0: base") && msg.contains("row 0: seed"), "{msg}");
    }
}
