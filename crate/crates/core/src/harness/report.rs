use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SLICE_NAMES;
use crate::error::{Error, Result};

/// One (strategy, seed, slice) accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub strategy: String,
    pub seed: u64,
    pub slice: String,
    pub accuracy: f64,
    pub n_test: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub version: String,
    /// Earliest and latest post timestamp seen by the run.
    pub data_start: i64,
    pub data_end: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
    pub per_seed: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cells: Vec<MetricCell>,
    pub meta: RunMeta,
}

const CSV_HEADER: [&str; 6] = ["strategy", "seed", "slice", "accuracy", "n_test", "config_hash"];

impl MetricsReport {
    /// Sorts cells by (strategy order of first appearance, seed, slice).
    pub fn new(mut cells: Vec<MetricCell>, meta: RunMeta) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for c in &cells {
            if !(0.0..=1.0).contains(&c.accuracy) {
                return Err(Error::InvalidInput(format!("accuracy {} outside [0, 1]", c.accuracy)));
            }
            let key = (c.strategy.clone(), c.seed, c.slice.clone());
            if seen.insert(key, ()).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate cell {}/{}/{}",
                    c.strategy, c.seed, c.slice
                )));
            }
        }
        let order: Vec<String> = cells.iter().fold(Vec::new(), |mut acc, c| {
            if !acc.contains(&c.strategy) {
                acc.push(c.strategy.clone());
            }
            acc
        });
        cells.sort_by(|a, b| {
            let pa = order.iter().position(|s| *s == a.strategy);
            let pb = order.iter().position(|s| *s == b.strategy);
            pa.cmp(&pb)
                .then(a.seed.cmp(&b.seed))
                .then(slice_rank(&a.slice).cmp(&slice_rank(&b.slice)))
                .then(a.slice.cmp(&b.slice))
        });
        Ok(MetricsReport { cells, meta })
    }

    pub fn strategies(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.strategy.as_str()) {
                out.push(&c.strategy);
            }
        }
        out
    }

    pub fn slices(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.slice.as_str()) {
                out.push(&c.slice);
            }
        }
        out.sort_by_key(|s| (slice_rank(s), s.to_string()));
        out
    }

    pub fn get(&self, strategy: &str, seed: u64, slice: &str) -> Option<&MetricCell> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.seed == seed && c.slice == slice)
    }

    pub fn aggregate(&self, strategy: &str, slice: &str) -> Option<Aggregate> {
        let per_seed: BTreeMap<String, f64> = self
            .cells
            .iter()
            .filter(|c| c.strategy == strategy && c.slice == slice)
            .map(|c| (c.seed.to_string(), c.accuracy))
            .collect();
        if per_seed.is_empty() {
            return None;
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.values().sum::<f64>() / n;
        let std = if per_seed.len() > 1 {
            (per_seed.values().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Aggregate { mean, std, per_seed })
    }

    pub fn mean(&self, strategy: &str, slice: &str) -> Option<f64> {
        self.aggregate(strategy, slice).map(|a| a.mean)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for c in &self.cells {
            w.write_record([
                c.strategy.clone(),
                c.seed.to_string(),
                c.slice.clone(),
                c.accuracy.to_string(),
                c.n_test.to_string(),
                c.config_hash.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Parses cells written by [`MetricsReport::to_csv`].
    pub fn cells_from_csv(text: &str) -> Result<Vec<MetricCell>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(Error::Schema(format!("unexpected report header {header:?}")));
        }
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let bad = |what: &str| Error::Schema(format!("bad {what} in report row {:?}", rec));
            cells.push(MetricCell {
                strategy: field(0).to_string(),
                seed: field(1).parse().map_err(|_| bad("seed"))?,
                slice: field(2).to_string(),
                accuracy: field(3).parse().map_err(|_| bad("accuracy"))?,
                n_test: field(4).parse().map_err(|_| bad("n_test"))?,
                config_hash: field(5).to_string(),
            });
        }
        Ok(cells)
    }

    /// `{strategy → slice → {mean, std, per_seed}}`.
    pub fn to_json(&self) -> Result<String> {
        let mut root: BTreeMap<&str, BTreeMap<&str, Aggregate>> = BTreeMap::new();
        for s in self.strategies() {
            let row = root.entry(s).or_default();
            for sl in self.slices() {
                if let Some(a) = self.aggregate(s, sl) {
                    row.insert(sl, a);
                }
            }
        }
        let mut out = serde_json::to_string_pretty(&root)?;
        out.push('\n');
        Ok(out)
    }

    /// Rows are slices, columns strategies; cells are `mean ± std` in percent.
    pub fn render_table(&self) -> String {
        let strategies = self.strategies();
        let mut out = String::new();
        let _ = write!(out, "| slice |");
        for s in &strategies {
            let _ = write!(out, " {s} |");
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in &strategies {
            out.push_str("---|");
        }
        out.push('\n');
        for sl in self.slices() {
            let _ = write!(out, "| {sl} |");
            for s in &strategies {
                match self.aggregate(s, sl) {
                    Some(a) => {
                        let _ = write!(out, " {:.1} ± {:.1} |", 100.0 * a.mean, 100.0 * a.std);
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `metrics.csv`, `metrics.json`, `table.md` and `meta.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let io = crate::io::write_atomic;
        io(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        io(&dir.join(format!("{stem}.json")), self.to_json()?.as_bytes())?;
        io(&dir.join(format!("{stem}_table.md")), self.render_table().as_bytes())?;
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        io(&dir.join(format!("{stem}_meta.json")), meta.as_bytes())
    }
}

fn slice_rank(s: &str) -> usize {
    SLICE_NAMES.iter().position(|x| *x == s).unwrap_or(SLICE_NAMES.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        let mut cells = Vec::new();
        for (si, s) in ["BASE", "PL[frac=0.3333]"].iter().enumerate() {
            for seed in [0u64, 1] {
                for sl in ["t4", "t0"] {
                    cells.push(MetricCell {
                        strategy: s.to_string(),
                        seed,
                        slice: sl.into(),
                        accuracy: 0.1 + 0.2 * si as f64 + 0.01 * seed as f64 + 1.0 / 3.0 * 0.1,
                        n_test: 500,
                        config_hash: "abc".into(),
                    });
                }
            }
        }
        let meta = RunMeta {
            config_hash: "abc".into(),
            version: "0".into(),
            data_start: 0,
            data_end: 1,
        };
        MetricsReport::new(cells, meta).unwrap()
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let r = report();
        let text = r.to_csv().unwrap();
        assert!(text.starts_with("strategy,seed,slice,accuracy,n_test,config_hash\n"));
        let back = MetricsReport::new(MetricsReport::cells_from_csv(&text).unwrap(), r.meta.clone()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn aggregates_and_ordering() {
        let r = report();
        assert_eq!(r.slices(), vec!["t0", "t4"]);
        assert_eq!(r.cells[0].slice, "t0");
        let a = r.aggregate("BASE", "t4").unwrap();
        assert!((a.mean - (0.1 + 0.005 + 0.1 / 3.0)).abs() < 1e-12);
        assert!((a.std - (0.01f64 * 0.01 / 2.0).sqrt()).abs() < 1e-12);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(json["BASE"]["t0"]["per_seed"]["1"].is_number());
        let table = r.render_table();
        assert!(table.lines().nth(2).unwrap().starts_with("| t0 |"));
    }

    #[test]
    fn duplicates_and_range_rejected() {
        let mut cells = report().cells;
        cells.push(cells[0].clone());
        assert!(MetricsReport::new(cells, report().meta).is_err());
        let mut cells = report().cells;
        cells[0].accuracy = 1.5;
        assert!(MetricsReport::new(cells, report().meta).is_err());
    }
}
