//! Plot-ready CSV tables built from training run directories.
//!
//! A run is either a training output directory (`val_log.csv`, optional
//! `train_log.csv` and `config.txt`) or a bare validation log file. Several
//! runs together give an ablation grid: one row per run with its flags and
//! the metrics of its best validation epoch.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{AblationFlags, TrainConfig};
use crate::error::{Error, Result};
use crate::train::{CONFIG_FILE, TRAIN_LOG_FILE, VAL_LOG_FILE};

pub const CURVES_FILE: &str = "curves.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Header plus rows of a numeric CSV; empty cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, head)) = lines.next() else {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: "missing header".into(),
            });
        };
        let header: Vec<String> = head.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: format!("expected {} fields, found {}", header.len(), cells.len()),
                });
            }
            let row = cells
                .iter()
                .map(|c| {
                    let c = c.trim();
                    if c.is_empty() {
                        return Ok(None);
                    }
                    c.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                        path: path.into(),
                        line: i + 1,
                        msg: format!("`{c}` is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Table::parse(&text, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub label: String,
    pub flags: Option<AblationFlags>,
    pub val: Table,
    pub train: Option<Table>,
}

impl RunLog {
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let label = file_label(path);
            let val = read_table(&path.join(VAL_LOG_FILE))?;
            let train_path = path.join(TRAIN_LOG_FILE);
            let train = train_path.exists().then(|| read_table(&train_path)).transpose()?;
            let config_path = path.join(CONFIG_FILE);
            let flags = config_path
                .exists()
                .then(|| TrainConfig::load(&config_path).map(|c| c.flags))
                .transpose()?;
            return Ok(Self { label, flags, val, train });
        }
        let val = read_table(path)?;
        let label = match path.file_stem().and_then(|s| s.to_str()) {
            Some(stem) if stem != "val_log" => stem.to_string(),
            _ => path.parent().map_or_else(|| "run".to_string(), file_label),
        };
        Ok(Self { label, flags: None, val, train: None })
    }

    /// Row of the highest validation mIoU; the earliest epoch wins ties.
    pub fn best(&self) -> Option<&[Option<f64>]> {
        let col = self.val.column("mIoU")?;
        let mut best: Option<(f64, usize)> = None;
        for (i, row) in self.val.rows.iter().enumerate() {
            if let Some(m) = row[col] {
                if best.is_none_or(|(b, _)| m > b) {
                    best = Some((m, i));
                }
            }
        }
        best.map(|(_, i)| self.val.rows[i].as_slice())
    }
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .and_then(|s| s.to_str())
        .map_or_else(|| path.display().to_string(), str::to_string)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn check_headers<'a>(tables: impl Iterator<Item = (&'a str, &'a Table)>) -> Result<Option<Vec<String>>> {
    let mut header: Option<&Vec<String>> = None;
    for (label, t) in tables {
        match header {
            None => header = Some(&t.header),
            Some(h) if *h != t.header => {
                return Err(Error::Data(format!(
                    "run `{label}` has columns {:?}, expected {:?}",
                    t.header, h
                )));
            }
            Some(_) => {}
        }
    }
    Ok(header.cloned())
}

fn long_format<'a>(tables: impl Iterator<Item = (&'a str, &'a Table)> + Clone) -> Result<String> {
    let Some(header) = check_headers(tables.clone())? else {
        return Ok(String::new());
    };
    let mut s = format!("run,{}\n", header.join(","));
    for (label, t) in tables {
        for row in &t.rows {
            let cells: Vec<String> = row.iter().map(|v| cell(*v)).collect();
            writeln!(s, "{label},{}", cells.join(",")).unwrap();
        }
    }
    Ok(s)
}

/// Validation curves of every run, stacked with a leading `run` column.
pub fn curves_csv(runs: &[RunLog]) -> Result<String> {
    long_format(runs.iter().map(|r| (r.label.as_str(), &r.val)))
}

/// Per-step losses of the runs that carry a training log.
pub fn losses_csv(runs: &[RunLog]) -> Result<String> {
    long_format(runs.iter().filter_map(|r| r.train.as_ref().map(|t| (r.label.as_str(), t))))
}

/// One row per run: ablation flags (1/0, blank when unknown) and the
/// validation columns at the best epoch.
pub fn summary_csv(runs: &[RunLog]) -> Result<String> {
    let header = check_headers(runs.iter().map(|r| (r.label.as_str(), &r.val)))?.unwrap_or_default();
    let mut s = String::from("run");
    for name in AblationFlags::NAMES {
        write!(s, ",{name}").unwrap();
    }
    for h in &header {
        write!(s, ",{}", if h == "epoch" { "best_epoch" } else { h }).unwrap();
    }
    s.push('\n');
    for r in runs {
        s.push_str(&r.label);
        match &r.flags {
            Some(f) => f.values().iter().for_each(|&v| write!(s, ",{}", v as u8).unwrap()),
            None => AblationFlags::NAMES.iter().for_each(|_| s.push(',')),
        }
        match r.best() {
            Some(row) => row.iter().for_each(|v| write!(s, ",{}", cell(*v)).unwrap()),
            None => header.iter().for_each(|_| s.push(',')),
        }
        s.push('\n');
    }
    Ok(s)
}

/// Loads every run and writes the report tables into `out`. Returns the
/// written paths.
pub fn write_report(logs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if logs.is_empty() {
        return Err(Error::Input("no logs given".into()));
    }
    let mut runs = logs.iter().map(|p| RunLog::load(p)).collect::<Result<Vec<_>>>()?;
    disambiguate(&mut runs);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<()> {
        if text.is_empty() {
            return Ok(());
        }
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    emit(CURVES_FILE, curves_csv(&runs)?)?;
    emit(LOSSES_FILE, losses_csv(&runs)?)?;
    emit(SUMMARY_FILE, summary_csv(&runs)?)?;
    Ok(written)
}

/// Repeated labels get a `#n` suffix so rows stay distinguishable.
fn disambiguate(runs: &mut [RunLog]) {
    for i in 0..runs.len() {
        let dup = runs[..i].iter().filter(|r| r.label == runs[i].label).count()
            + runs[..i].iter().filter(|r| r.label.starts_with(&format!("{}#", runs[i].label))).count();
        if dup > 0 {
            runs[i].label = format!("{}#{}", runs[i].label, dup + 1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VAL: &str = "epoch,L_train,R@0.3,R@0.5,R@0.7,mIoU\n1,2.5,10,5,1,12.5\n2,1.5,40,20,5,30\n3,1.2,38,22,6,30\n";

    fn run(label: &str) -> RunLog {
        RunLog {
            label: label.into(),
            flags: None,
            val: Table::parse(VAL, Path::new("v.csv")).unwrap(),
            train: None,
        }
    }

    #[test]
    fn parses_blank_cells() {
        let t = Table::parse("epoch,L_train,mIoU\n1,0.5,\n", Path::new("x")).unwrap();
        assert_eq!(t.rows, vec![vec![Some(1.0), Some(0.5), None]]);
    }

    #[test]
    fn ragged_row_names_line() {
        let err = Table::parse("a,b\n1,2\n3\n", Path::new("log.csv")).unwrap_err();
        assert!(err.to_string().starts_with("log.csv:3:"), "{err}");
    }

    #[test]
    fn best_prefers_earliest_tie() {
        let r = run("a");
        assert_eq!(r.best().unwrap()[0], Some(2.0));
    }

    #[test]
    fn summary_grid_has_one_row_per_run() {
        let mut a = run("full");
        a.flags = Some(AblationFlags::default());
        let mut b = run("no_qan");
        b.flags = Some(AblationFlags::default().with("use_qan", false).unwrap());
        let s = summary_csv(&[a, b]).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("run,use_qan,"));
        assert!(lines[0].ends_with("best_epoch,L_train,R@0.3,R@0.5,R@0.7,mIoU"));
        assert_eq!(lines[1], "full,1,1,1,1,1,1,1,2,1.5,40,20,5,30");
        assert_eq!(lines[2], "no_qan,0,1,1,1,1,1,1,2,1.5,40,20,5,30");
    }

    #[test]
    fn curves_stack_runs() {
        let s = curves_csv(&[run("a"), run("b")]).unwrap();
        assert_eq!(s.lines().count(), 7);
        assert!(s.lines().nth(4).unwrap().starts_with("b,1,"));
    }

    #[test]
    fn mismatched_columns_rejected() {
        let mut b = run("b");
        b.val.header[1] = "loss".into();
        assert!(matches!(curves_csv(&[run("a"), b]), Err(Error::Data(_))));
    }

    #[test]
    fn duplicate_labels_suffixed() {
        let mut runs = vec![run("x"), run("x"), run("x")];
        disambiguate(&mut runs);
        let labels: Vec<&str> = runs.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["x", "x#2", "x#3"]);
    }
}
