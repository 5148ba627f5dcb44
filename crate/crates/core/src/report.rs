//! Plain-text and JSON reports over persisted phase records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{bin_labels, AngleHistogram, RAM_BINS, SAM_BINS};
use crate::error::{Error, Result};
use crate::experiment::{load_records, Diagnostics, PhaseRecord, RECALL_KS};

/// Selects one histogram from a record's diagnostics.
type Pick = fn(&Diagnostics) -> Option<&AngleHistogram>;

/// Records of one run directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecords {
    /// Path relative to the report root; `.` for the root itself.
    pub run: String,
    pub records: Vec<PhaseRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub runs: Vec<RunRecords>,
}

impl Report {
    /// Collect records from `dir` and its immediate subdirectories.
    pub fn collect(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::MissingRecords(dir.to_path_buf()));
        }
        let mut candidates: Vec<(String, PathBuf)> = vec![(".".into(), dir.to_path_buf())];
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .filter(|p| {
                !p.file_name()
                    .map(|n| n.to_string_lossy().starts_with("phase_"))
                    .unwrap_or(false)
            })
            .collect();
        subdirs.sort();
        for p in subdirs {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            candidates.push((name, p));
        }
        let mut runs = Vec::new();
        for (run, path) in candidates {
            let records = load_records(&path)?;
            if !records.is_empty() {
                runs.push(RunRecords { run, records });
            }
        }
        if runs.is_empty() {
            return Err(Error::MissingRecords(dir.to_path_buf()));
        }
        Ok(Self { runs })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.retrieval_table());
        let hist_tables: [(&str, &[f64], Pick); 5] = [
            ("SAM-delta (vision)", &SAM_BINS, |d| Some(&d.sam_delta_vision)),
            ("SAM-delta (language)", &SAM_BINS, |d| Some(&d.sam_delta_language)),
            ("RAM (vision)", &RAM_BINS, |d| Some(&d.ram_vision)),
            ("RAM (language)", &RAM_BINS, |d| Some(&d.ram_language)),
            ("ImAV", &SAM_BINS, |d| d.imav.as_ref()),
        ];
        for (title, preset, pick) in hist_tables {
            out.push('\n');
            out.push_str(&self.histogram_table(title, preset, pick));
        }
        out
    }

    fn retrieval_table(&self) -> String {
        let domains: Vec<String> = self
            .runs
            .iter()
            .flat_map(|r| r.records.iter().flat_map(|rec| rec.retrieval.keys().cloned()))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut header = vec!["run".to_string(), "strategy".into(), "alpha".into(), "phase".into()];
        for d in &domains {
            for dir in ["i2t", "t2i"] {
                for k in RECALL_KS {
                    header.push(format!("{d} {dir} R@{k}"));
                }
            }
        }
        let mut rows = Vec::new();
        for run in &self.runs {
            for rec in &run.records {
                let mut row = vec![
                    run.run.clone(),
                    rec.strategy.to_string(),
                    rec.alpha.to_string(),
                    rec.phase.to_string(),
                ];
                for d in &domains {
                    let report = rec.retrieval.get(d);
                    for map in [report.map(|r| &r.image_to_text), report.map(|r| &r.text_to_image)] {
                        for k in RECALL_KS {
                            row.push(fmt_opt(map.and_then(|m| m.get(&k)).copied()));
                        }
                    }
                }
                rows.push(row);
            }
        }
        format!("Retrieval\n{}", aligned(&header, &rows))
    }

    fn histogram_table(&self, title: &str, preset: &[f64], pick: Pick) -> String {
        let mut groups: BTreeMap<Vec<String>, Vec<Vec<String>>> = BTreeMap::new();
        for run in &self.runs {
            for rec in &run.records {
                let Some(diag) = rec.diagnostics.as_ref() else {
                    continue;
                };
                let mut row = vec![
                    run.run.clone(),
                    rec.strategy.to_string(),
                    rec.alpha.to_string(),
                    rec.phase.to_string(),
                ];
                let labels = match pick(diag) {
                    Some(h) => {
                        row.push(h.total().to_string());
                        row.extend(h.fractions.iter().map(|f| format!("{:.4}", f)));
                        h.labels()
                    }
                    None => {
                        row.push("0".into());
                        row.extend(std::iter::repeat_n("-".to_string(), preset.len() - 1));
                        bin_labels(preset)
                    }
                };
                groups.entry(labels).or_default().push(row);
            }
        }
        if groups.is_empty() {
            return format!("{title}\n(no diagnostics recorded)\n");
        }
        let mut out = format!("{title}\n");
        for (labels, rows) in groups {
            let mut header = vec![
                "run".to_string(),
                "strategy".into(),
                "alpha".into(),
                "phase".into(),
                "n".into(),
            ];
            header.extend(labels);
            out.push_str(&aligned(&header, &rows));
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Columns padded to their widest cell; first column left-aligned, the rest
/// right-aligned.
fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&(rule.join("  ") + "\n"));
    for row in rows {
        out.push_str(&line(row));
    }
    out
}

/// Text tables and the JSON summary for every run under `dir`.
pub fn render_report(dir: &Path) -> Result<(String, String)> {
    let report = Report::collect(dir)?;
    Ok((report.render_text(), report.to_json()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_pads_columns() {
        let t = aligned(
            &["a".into(), "bb".into()],
            &[vec!["xyz".into(), "1".into()], vec!["q".into(), "22".into()]],
        );
        assert_eq!(t, "a    bb\n---  --\nxyz   1\nq    22\n");
    }

    #[test]
    fn empty_directory_is_missing_records() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(render_report(dir.path()), Err(Error::MissingRecords(_))));
        assert!(matches!(
            render_report(&dir.path().join("absent")),
            Err(Error::MissingRecords(_))
        ));
    }
}
