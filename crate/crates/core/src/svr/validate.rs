// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent answer checker.
//!
//! Works on the raw JSON of a record and shares no answer logic with the
//! generator: predicates, relations and panel rules are re-implemented
//! here against `serde_json::Value`.

use std::io::BufRead;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

use super::vocab::Vocabulary;

struct Obj<'a> {
    shape: &'a str,
    color: &'a str,
    size: &'a str,
    x: u64,
    y: u64,
}

fn field<'a>(v: &'a Value, path: &str) -> Result<&'a Value> {
    let mut cur = v;
    for part in path.split('.') {
        cur = cur.get(part).ok_or_else(|| Error::metadata(path, "missing"))?;
    }
    Ok(cur)
}

fn str_field<'a>(v: &'a Value, path: &str) -> Result<&'a str> {
    field(v, path)?.as_str().ok_or_else(|| Error::metadata(path, "expected a string"))
}

fn objects(meta: &Value) -> Result<Vec<Obj<'_>>> {
    let arr = field(meta, "scene.objects")?
        .as_array()
        .ok_or_else(|| Error::metadata("scene.objects", "expected an array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, o)| {
            let name = |f: &str| format!("scene.objects[{i}].{f}");
            let get = |f: &str| o.get(f).and_then(Value::as_str).ok_or_else(|| Error::metadata(name(f), "expected a string"));
            let cell = o
                .get("cell")
                .and_then(Value::as_array)
                .filter(|c| c.len() == 2)
                .ok_or_else(|| Error::metadata(name("cell"), "expected [x, y]"))?;
            let coord = |j: usize| cell[j].as_u64().ok_or_else(|| Error::metadata(name("cell"), "non-integer coordinate"));
            Ok(Obj {
                shape: get("shape")?,
                color: get("color")?,
                size: get("size")?,
                x: coord(0)?,
                y: coord(1)?,
            })
        })
        .collect()
}

/// Filter from a JSON predicate object. Absent keys match anything.
fn pred_match(pred: &Value, o: &Obj<'_>) -> bool {
    let eq = |k: &str, v: &str| pred.get(k).and_then(Value::as_str).is_none_or(|p| p == v);
    let ne = pred.get("not_color").and_then(Value::as_str).is_none_or(|p| p != o.color);
    eq("color", o.color) && eq("shape", o.shape) && eq("size", o.size) && ne
}

fn count(pred: &Value, objs: &[Obj<'_>]) -> usize {
    let mut n = 0;
    for o in objs {
        if pred_match(pred, o) {
            n += 1;
        }
    }
    n
}

fn relation(rel: &str, s: &Obj<'_>, o: &Obj<'_>) -> Result<bool> {
    let (sx, sy, ox, oy) = (s.x as i64, s.y as i64, o.x as i64, o.y as i64);
    Ok(match rel {
        "left_of" => sx < ox,
        "right_of" => sx > ox,
        "above" => sy < oy,
        "below" => sy > oy,
        "directly_above" => sx == ox && sy < oy,
        "directly_below" => sx == ox && sy > oy,
        other => return Err(Error::metadata("query.clauses.relation", format!("unknown relation `{other}`"))),
    })
}

fn colors_list<'a>(q: &'a Value, key: &str) -> Result<Vec<&'a str>> {
    let path = format!("query.{key}");
    q.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::metadata(&path, "expected an array"))?
        .iter()
        .map(|c| c.as_str().ok_or_else(|| Error::metadata(&path, "expected strings")))
        .collect()
}

/// Option text the answer should carry, derived from metadata alone.
fn expected_option(meta: &Value, vocab: &Vocabulary) -> Result<String> {
    let q = field(meta, "query")?;
    let kind = str_field(meta, "query.kind")?;
    let objs = objects(meta)?;
    let yn = |b: bool| if b { "yes".to_string() } else { "no".to_string() };
    match kind {
        "count" => Ok(count(field(q, "predicate")?, &objs).to_string()),
        "compare" => {
            let a = count(field(q, "left")?, &objs);
            let b = count(field(q, "right")?, &objs);
            Ok(yn(match str_field(q, "relation")? {
                "more" => a > b,
                "fewer" => a < b,
                "at_least" => a >= b,
                r => return Err(Error::metadata("query.relation", format!("unknown `{r}`"))),
            }))
        }
        "spatial" => {
            let subj = field(q, "subject")?;
            let clauses = field(q, "clauses")?
                .as_array()
                .ok_or_else(|| Error::metadata("query.clauses", "expected an array"))?;
            let subjects: Vec<&Obj<'_>> = objs.iter().filter(|o| pred_match(subj, o)).collect();
            if str_field(q, "quantifier")? == "the" && subjects.len() != 1 {
                return Err(Error::metadata("query.subject", "definite subject not unique"));
            }
            let mut any = false;
            for s in &subjects {
                let mut all = true;
                for cl in clauses {
                    let rel = str_field(cl, "relation")?;
                    let target = field(cl, "object")?;
                    let mut found = false;
                    for o in &objs {
                        if (o.x, o.y) != (s.x, s.y) && pred_match(target, o) && relation(rel, s, o)? {
                            found = true;
                            break;
                        }
                    }
                    all &= found;
                }
                any |= all;
            }
            Ok(yn(any))
        }
        "pattern" => {
            let panel = field(meta, "scene.panel")?;
            let grid: Vec<Vec<&str>> = field(panel, "grid")?
                .as_array()
                .ok_or_else(|| Error::metadata("scene.panel.grid", "expected rows"))?
                .iter()
                .map(|r| r.as_array().map(|r| r.iter().filter_map(Value::as_str).collect()).unwrap_or_default())
                .collect();
            if grid.len() != 3 || grid.iter().any(|r: &Vec<&str>| r.len() != 3) {
                return Err(Error::metadata("scene.panel.grid", "expected 3×3 color ids"));
            }
            let mc = field(panel, "masked_cell")?
                .as_array()
                .filter(|m| m.len() == 2)
                .ok_or_else(|| Error::metadata("scene.panel.masked_cell", "expected [row, col]"))?;
            let (r, c) = (
                mc[0].as_u64().unwrap_or(99) as usize,
                mc[1].as_u64().unwrap_or(99) as usize,
            );
            if r > 2 || c > 2 {
                return Err(Error::metadata("scene.panel.masked_cell", "out of range"));
            }
            // The hidden value is read from the visible tiles only.
            let id = match str_field(panel, "rule")? {
                "row_repetition" => grid[r][if c == 0 { 1 } else { 0 }],
                "horizontal_symmetry" => {
                    if c == 1 {
                        return Err(Error::metadata("scene.panel.masked_cell", "centre column is not determined by symmetry"));
                    }
                    grid[r][2 - c]
                }
                other => return Err(Error::metadata("scene.panel.rule", format!("unknown `{other}`"))),
            };
            vocab
                .colors
                .iter()
                .find(|col| col.id == id)
                .map(|col| col.name.clone())
                .ok_or_else(|| Error::metadata("scene.panel.grid", format!("unknown color `{id}`")))
        }
        "exists" => Ok(yn(count(field(q, "predicate")?, &objs) > 0)),
        "global" => {
            let n = objs.len();
            let t = q.get("threshold").and_then(Value::as_u64).map(|t| t as usize);
            let need_t = || t.ok_or_else(|| Error::metadata("query.threshold", "missing"));
            Ok(yn(match str_field(q, "property")? {
                "same_color" => objs.iter().all(|o| o.color == objs[0].color),
                "same_shape" => objs.iter().all(|o| o.shape == objs[0].shape),
                "total_more_than" => n > need_t()?,
                "total_at_most" => n <= need_t()?,
                p => return Err(Error::metadata("query.property", format!("unknown `{p}`"))),
            }))
        }
        "any_not" => {
            let pred = field(q, "predicate")?;
            let excl = colors_list(q, "excluded_colors")?;
            Ok(yn(objs.iter().any(|o| pred_match(pred, o) && !excl.contains(&o.color))))
        }
        "every" => {
            let pred = field(q, "predicate")?;
            let allowed = colors_list(q, "allowed_colors")?;
            Ok(yn(objs.iter().filter(|o| pred_match(pred, o)).all(|o| allowed.contains(&o.color))))
        }
        other => Err(Error::metadata("query.kind", format!("unknown `{other}`"))),
    }
}

/// Recomputes the answer letter of one JSON record from its metadata.
pub fn recompute_answer(record: &Value, vocab: &Vocabulary) -> Result<String> {
    let meta = record.get("metadata").ok_or_else(|| Error::metadata("metadata", "missing"))?;
    let want = expected_option(meta, vocab)?;
    let options = record
        .get("options")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::metadata("options", "expected an array"))?;
    let pos = options
        .iter()
        .position(|o| o.as_str() == Some(want.as_str()))
        .ok_or_else(|| Error::metadata("options", format!("no option reads `{want}`")))?;
    Ok(char::from(b'A' + pos as u8).to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordIssue {
    /// One-based line number in the JSONL file.
    pub line: usize,
    pub id: Option<String>,
    pub stored: Option<String>,
    pub recomputed: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub mismatches: usize,
    /// Lines that were not valid JSON or lacked the fields needed to check them.
    pub parse_failures: usize,
    pub issues: Vec<RecordIssue>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches == 0 && self.parse_failures == 0
    }
}

/// Validates JSONL text already in memory.
pub fn validate_reader<R: BufRead>(reader: R, vocab: &Vocabulary) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.records += 1;
        let value: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                report.parse_failures += 1;
                report.issues.push(RecordIssue {
                    line: i + 1,
                    id: None,
                    stored: None,
                    recomputed: None,
                    reason: format!("unparseable JSON: {e}"),
                });
                continue;
            }
        };
        let id = value.get("id").and_then(Value::as_str).map(str::to_string);
        let stored = value.get("answer").and_then(Value::as_str).map(str::to_string);
        match recompute_answer(&value, vocab) {
            Ok(got) if Some(&got) == stored.as_ref() => {}
            Ok(got) => {
                report.mismatches += 1;
                report.issues.push(RecordIssue {
                    line: i + 1,
                    id,
                    stored,
                    recomputed: Some(got),
                    reason: "answer mismatch".into(),
                });
            }
            Err(e) => {
                report.parse_failures += 1;
                report.issues.push(RecordIssue {
                    line: i + 1,
                    id,
                    stored,
                    recomputed: None,
                    reason: e.to_string(),
                });
            }
        }
    }
    if report.records == 0 {
        report.warnings.push("no records found".into());
        log::warn!("validation input holds no records");
    }
    Ok(report)
}

/// Validates a `reasoning_{split}.jsonl` file.
pub fn validate_split(path: &Path, vocab: &Vocabulary) -> Result<ValidationReport> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    validate_reader(std::io::BufReader::new(f), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn comparison_three_vs_one() {
        let rec = json!({
            "options": ["yes", "no"],
            "answer": "A",
            "metadata": {
                "scene": {"objects": [
                    {"shape": "circle", "color": "red", "size": "large", "cell": [0, 0]},
                    {"shape": "circle", "color": "red", "size": "small", "cell": [1, 0]},
                    {"shape": "circle", "color": "red", "size": "large", "cell": [2, 0]},
                    {"shape": "star", "color": "blue", "size": "large", "cell": [3, 0]}
                ], "seed": 0},
                "query": {"kind": "compare", "relation": "more",
                          "left": {"shape": "circle"}, "right": {"shape": "star"}}
            }
        });
        assert_eq!(recompute_answer(&rec, &Vocabulary::default()).unwrap(), "A");
    }

    #[test]
    fn empty_input_warns() {
        let r = validate_reader(std::io::Cursor::new(""), &Vocabulary::default()).unwrap();
        assert_eq!((r.records, r.mismatches), (0, 0));
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn missing_field_is_named() {
        let rec = json!({"options": ["yes", "no"], "metadata": {"scene": {"objects": []}}});
        let err = recompute_answer(&rec, &Vocabulary::default()).unwrap_err();
        assert!(err.to_string().contains("query"), "{err}");
    }
}
