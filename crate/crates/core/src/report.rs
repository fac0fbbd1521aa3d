//! Results table and text reports.
//!
//! The results table is an append-only TSV. Rows are keyed by
//! `(net, K, policy, reg_p, reg_lambda, mode)`; appending a row identical to
//! one already stored is a no-op, and readers keep the last row per key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::LayerHistogram;

pub const RESULTS_HEADER: &str = "net\tword_length\tpolicy\treg_p\treg_lambda\tmode\taccuracy\tcorrect\ttotal\tmem_bits\tmacs";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub net: String,
    /// `None` for the float network.
    pub word_length: Option<u32>,
    pub policy: String,
    pub reg_p: u32,
    pub reg_lambda: f64,
    pub mode: String,
    pub correct: usize,
    pub total: usize,
    pub mem_bits: u64,
    pub macs: u64,
}

pub type RowKey = (String, Option<u32>, String, u32, String, String);

impl ResultRow {
    /// Accuracy in percent.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }

    pub fn key(&self) -> RowKey {
        (
            self.net.clone(),
            self.word_length,
            self.policy.clone(),
            self.reg_p,
            self.reg_lambda.to_string(),
            self.mode.clone(),
        )
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{}\t{}\t{}\t{}",
            self.net,
            self.word_length.map_or("float".to_string(), |k| k.to_string()),
            self.policy,
            self.reg_p,
            self.reg_lambda,
            self.mode,
            self.accuracy(),
            self.correct,
            self.total,
            self.mem_bits,
            self.macs
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Malformed(format!("results row `{line}`"));
        if f.len() != 11 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
        Ok(Self {
            net: f[0].to_string(),
            word_length: match f[1] {
                "float" => None,
                k => Some(k.parse().map_err(|_| bad())?),
            },
            policy: f[2].to_string(),
            reg_p: f[3].parse().map_err(|_| bad())?,
            reg_lambda: f[4].parse().map_err(|_| bad())?,
            mode: f[5].to_string(),
            correct: num(f[7])? as usize,
            total: num(f[8])? as usize,
            mem_bits: num(f[9])?,
            macs: num(f[10])?,
        })
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        None => Ok(Vec::new()),
        Some(RESULTS_HEADER) => Ok(lines.filter(|l| !l.is_empty()).map(str::to_string).collect()),
        Some(other) => Err(Error::Malformed(format!("results table header `{other}`"))),
    }
}

/// Appends `row`; returns `false` if the latest row under its key is identical.
pub fn append_result(path: &Path, row: &ResultRow) -> Result<bool> {
    let line = row.to_tsv();
    let existing = read_lines(path)?;
    let key = row.key();
    let latest = existing
        .iter()
        .rev()
        .filter_map(|l| ResultRow::from_tsv(l).ok())
        .find(|r| r.key() == key);
    if latest.is_some_and(|r| r.to_tsv() == line) {
        return Ok(false);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    writeln!(f, "{line}")?;
    Ok(true)
}

/// Rows in first-seen key order, keeping the latest value per key.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut order: Vec<RowKey> = Vec::new();
    let mut latest: BTreeMap<RowKey, ResultRow> = BTreeMap::new();
    for line in read_lines(path)? {
        let row = ResultRow::from_tsv(&line)?;
        let key = row.key();
        if !latest.contains_key(&key) {
            order.push(key.clone());
        }
        latest.insert(key, row);
    }
    Ok(order.into_iter().map(|k| latest.remove(&k).unwrap()).collect())
}

fn column_name(row: &ResultRow) -> String {
    if row.mode == "integer" {
        format!("{}/int", row.policy)
    } else {
        row.policy.clone()
    }
}

/// One table per `(net, reg_p, reg_lambda)`: rows are word lengths, columns
/// policies, cells accuracies in percent.
pub fn accuracy_tables(rows: &[ResultRow]) -> String {
    if rows.is_empty() {
        return "no results recorded\n".to_string();
    }
    let mut groups: BTreeMap<(String, u32, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.net.clone(), r.reg_p, r.reg_lambda.to_string())).or_default().push(r);
    }
    let mut out = String::new();
    for ((net, p, lambda), rows) in groups {
        let _ = writeln!(out, "{net}  reg_p={p}  reg_lambda={lambda}");
        for r in rows.iter().filter(|r| r.word_length.is_none()) {
            let _ = writeln!(out, "  float baseline: {:.2}", r.accuracy());
        }
        let quantized: Vec<&&ResultRow> = rows.iter().filter(|r| r.word_length.is_some()).collect();
        if quantized.is_empty() {
            out.push('\n');
            continue;
        }
        let mut columns: Vec<String> = Vec::new();
        for r in &quantized {
            let c = column_name(r);
            if !columns.contains(&c) {
                columns.push(c);
            }
        }
        columns.sort();
        let mut ks: Vec<u32> = quantized.iter().filter_map(|r| r.word_length).collect();
        ks.sort_unstable();
        ks.dedup();
        let width = columns.iter().map(String::len).max().unwrap_or(0).max(6);
        let _ = write!(out, "  {:>3}", "K");
        for c in &columns {
            let _ = write!(out, "  {c:>width$}");
        }
        out.push('\n');
        for k in ks {
            let _ = write!(out, "  {k:>3}");
            for c in &columns {
                let cell = quantized
                    .iter()
                    .find(|r| r.word_length == Some(k) && &column_name(r) == c)
                    .map_or("-".to_string(), |r| format!("{:.2}", r.accuracy()));
                let _ = write!(out, "  {cell:>width$}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Writes `<dir>/<stem>.layer<i>.hist.tsv` per layer plus `<dir>/<stem>.stats.tsv`.
pub fn write_histograms(dir: &Path, stem: &str, histograms: &[LayerHistogram]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut stats = String::from("layer\tcount\tmean\tstd\tmax_abs\texcess_kurtosis\n");
    for h in histograms {
        let path = dir.join(format!("{stem}.layer{}.hist.tsv", h.layer));
        fs::write(&path, h.to_text())?;
        written.push(path);
        let s = &h.stats;
        let _ = writeln!(
            stats,
            "{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{}",
            h.layer,
            s.count,
            s.mean,
            s.std,
            s.max_abs,
            s.excess_kurtosis.map_or("nan".to_string(), |k| format!("{k:.6}"))
        );
    }
    let path = dir.join(format!("{stem}.stats.tsv"));
    fs::write(&path, stats)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(k: Option<u32>, policy: &str, correct: usize) -> ResultRow {
        ResultRow {
            net: "mnistnet1".into(),
            word_length: k,
            policy: policy.into(),
            reg_p: 1,
            reg_lambda: 0.0,
            mode: "mixed".into(),
            correct,
            total: 10000,
            mem_bits: 1,
            macs: 2,
        }
    }

    #[test]
    fn tsv_round_trip() {
        let r = ResultRow { reg_lambda: 1e-4, ..row(Some(3), "minmse2", 9876) };
        let line = r.to_tsv();
        assert!(line.contains("\t98.76\t"));
        assert_eq!(ResultRow::from_tsv(&line).unwrap(), r);
        assert_eq!(ResultRow::from_tsv(&row(None, "float", 1).to_tsv()).unwrap().word_length, None);
        assert!(ResultRow::from_tsv("a\tb").is_err());
    }

    #[test]
    fn append_dedupes_and_latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs/results.tsv");
        assert!(append_result(&path, &row(Some(2), "maxabs", 5000)).unwrap());
        assert!(!append_result(&path, &row(Some(2), "maxabs", 5000)).unwrap());
        assert!(append_result(&path, &row(Some(4), "maxabs", 7000)).unwrap());
        assert!(append_result(&path, &row(Some(2), "maxabs", 6000)).unwrap());
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        let rows = read_results(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].word_length, rows[0].correct), (Some(2), 6000));
    }

    #[test]
    fn tables() {
        assert_eq!(accuracy_tables(&[]), "no results recorded\n");
        let single = accuracy_tables(&[row(Some(8), "minmse1", 9800)]);
        assert_eq!(single.lines().filter(|l| l.contains("98.00")).count(), 1);
        let rows = vec![
            row(None, "float", 9840),
            row(Some(2), "maxabs", 3000),
            row(Some(2), "minmse1", 6000),
            row(Some(4), "minmse1", 9000),
            ResultRow { mode: "integer".into(), ..row(Some(4), "minmse2", 8000) },
        ];
        let t = accuracy_tables(&rows);
        assert!(t.contains("float baseline: 98.40"));
        assert!(t.contains("minmse2/int"));
        let k2 = t.lines().find(|l| l.trim_start().starts_with("2 ")).unwrap();
        assert!(k2.contains("30.00") && k2.contains("60.00") && k2.contains('-'));
    }

    #[test]
    fn histogram_files() {
        use crate::trainer::WeightStats;
        let dir = tempfile::tempdir().unwrap();
        let h = LayerHistogram { layer: 0, centers: vec![-0.5, 0.5], counts: vec![1, 3], stats: WeightStats::of(&[-0.5, 0.5, 0.5, 0.5]) };
        let files = write_histograms(dir.path(), "net", &[h]).unwrap();
        assert_eq!(files.len(), 2);
        let body = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(body.lines().count(), 2);
        assert!(body.lines().all(|l| l.split('\t').count() == 2));
    }
}
