//! External predictor driven through files:
//! `<cmd> train <trainCsv> <modelPath>` and
//! `<cmd> predict <modelPath> <featuresCsv> <outCsv>`.
//! `outCsv` has a header; its first column is the label, any further columns
//! are per-class scores named after the classes.

use std::path::Path;
use std::process::Command;

use super::{label_cell, FittedPredictor};
use crate::error::{Error, Result};
use crate::table::{write_csv, Cell, Table, Task};

pub struct PluginBackbone {
    command: String,
    dir: tempfile::TempDir,
    table: Table,
    classes: Vec<String>,
}

fn quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', "'\\''"))
}

fn run(command: &str, args: &[String]) -> Result<()> {
    let line = format!("{command} {}", args.join(" "));
    let out = Command::new("sh")
        .arg("-c")
        .arg(&line)
        .output()
        .map_err(|e| Error::Plugin(format!("cannot launch `{command}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::Plugin(format!(
            "`{line}` failed with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(())
}

fn write_table(table: &Table, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(table, f)
}

impl PluginBackbone {
    pub fn fit(command: &str, train: &Table) -> Result<PluginBackbone> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let train_csv = dir.path().join("train.csv");
        write_table(train, &train_csv)?;
        let model = dir.path().join("model");
        run(command, &["train".into(), quote(&train_csv), quote(&model)])?;
        let classes = if train.schema.task() == Some(Task::Classification) {
            train.class_values()
        } else {
            Vec::new()
        };
        Ok(PluginBackbone {
            command: command.to_string(),
            dir,
            table: train.empty_like(),
            classes,
        })
    }

    fn run_predict(&self, features: &Table) -> Result<(Vec<String>, Vec<Vec<String>>)> {
        self.table.schema.check_compatible(&features.schema)?;
        let feats = self.dir.path().join("features.csv");
        let out = self.dir.path().join("predictions.csv");
        let mut view = features.clone();
        if let Some(l) = view.schema.label_index() {
            view.rows.iter_mut().for_each(|r| r[l] = Cell::Missing);
        }
        write_table(&view, &feats)?;
        run(
            &self.command,
            &[
                "predict".into(),
                quote(&self.dir.path().join("model")),
                quote(&feats),
                quote(&out),
            ],
        )?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&out)
            .map_err(|e| Error::Plugin(format!("reading predictions: {e}")))?;
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Plugin(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rdr
            .records()
            .map(|r| {
                r.map(|r| r.iter().map(str::to_string).collect())
                    .map_err(|e| Error::Plugin(format!("reading predictions: {e}")))
            })
            .collect::<Result<Vec<Vec<String>>>>()?;
        if rows.len() != features.len() {
            return Err(Error::Plugin(format!(
                "plugin returned {} predictions for {} rows",
                rows.len(),
                features.len()
            )));
        }
        Ok((header, rows))
    }
}

impl FittedPredictor for PluginBackbone {
    fn predict(&self, features: &Table) -> Result<Vec<Cell>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let (_, rows) = self.run_predict(features)?;
        rows.iter()
            .map(|r| {
                let v = r.first().ok_or_else(|| Error::Plugin("empty prediction row".into()))?;
                if self.classes.is_empty() {
                    Cell::number(v.trim())
                        .ok_or_else(|| Error::Plugin(format!("`{v}` is not a number")))
                } else {
                    Ok(label_cell(&self.table.schema, v))
                }
            })
            .collect()
    }

    fn predict_scores(&self, features: &Table) -> Result<Option<Vec<Vec<f64>>>> {
        if self.classes.is_empty() {
            return Ok(None);
        }
        if features.is_empty() {
            return Ok(Some(Vec::new()));
        }
        let (header, rows) = self.run_predict(features)?;
        let cols: Option<Vec<usize>> = self
            .classes
            .iter()
            .map(|c| header.iter().skip(1).position(|h| h == c).map(|p| p + 1))
            .collect();
        Ok(Some(match cols {
            Some(cols) => rows
                .iter()
                .map(|r| {
                    cols.iter()
                        .map(|&c| {
                            r.get(c).and_then(|v| v.trim().parse().ok()).ok_or_else(|| {
                                Error::Plugin(format!("bad score in column {c}"))
                            })
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?,
            // no score columns: one-hot on the predicted label
            None => rows
                .iter()
                .map(|r| {
                    self.classes
                        .iter()
                        .map(|c| f64::from(u8::from(r.first() == Some(c))))
                        .collect()
                })
                .collect(),
        }))
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }
}
