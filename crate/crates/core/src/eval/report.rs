use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::MeasurementRate;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub image: String,
    pub rate: MeasurementRate,
    pub method: String,
    pub psnr_db: f64,
    pub recon_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ReportMetadata {
    /// sha256 of each model file, by rate.
    pub model_hashes: BTreeMap<MeasurementRate, String>,
    pub seed: u64,
    /// Unix seconds.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    pub metadata: ReportMetadata,
}

const HEADER: [&str; 5] = ["image", "rate", "method", "psnr_db", "recon_seconds"];

impl EvalReport {
    /// Methods in first-seen order.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.method) {
                out.push(e.method.clone());
            }
        }
        out
    }

    pub fn rates(&self) -> Vec<MeasurementRate> {
        let mut r: Vec<_> = self.entries.iter().map(|e| e.rate).collect();
        r.sort();
        r.dedup();
        r
    }

    pub fn images(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.image) {
                out.push(e.image.clone());
            }
        }
        out
    }

    pub fn find(&self, image: &str, rate: MeasurementRate, method: &str) -> Option<&EvalEntry> {
        self.entries
            .iter()
            .find(|e| e.image == image && e.rate == rate && e.method == method)
    }

    /// Mean PSNR over images for one rate and method.
    pub fn mean_psnr(&self, rate: MeasurementRate, method: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.rate == rate && e.method == method)
            .map(|e| e.psnr_db)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// CSV with `#`-prefixed metadata lines ahead of the header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# seed={}", self.metadata.seed);
        let _ = writeln!(out, "# timestamp={}", self.metadata.timestamp);
        for (rate, hash) in &self.metadata.model_hashes {
            let _ = writeln!(out, "# model_sha256[{rate}]={hash}");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for e in &self.entries {
            w.write_record([
                e.image.clone(),
                e.rate.to_string(),
                e.method.clone(),
                e.psnr_db.to_string(),
                e.recon_seconds.to_string(),
            ])
            .expect("in-memory write");
        }
        let body = w.into_inner().expect("in-memory flush");
        out.push_str(&String::from_utf8(body).expect("utf-8 fields"));
        out
    }

    pub fn from_csv(text: &str) -> Result<EvalReport> {
        let mut metadata = ReportMetadata::default();
        for line in text.lines().filter_map(|l| l.strip_prefix('#')) {
            let Some((key, value)) = line.trim().split_once('=') else {
                continue;
            };
            let bad = |what: &str| Error::format("report metadata", format!("bad {what}: {value}"));
            if key == "seed" {
                metadata.seed = value.parse().map_err(|_| bad("seed"))?;
            } else if key == "timestamp" {
                metadata.timestamp = value.parse().map_err(|_| bad("timestamp"))?;
            } else if let Some(rate) = key.strip_prefix("model_sha256[").and_then(|k| k.strip_suffix(']')) {
                let rate = rate.parse().map_err(|_| bad("rate"))?;
                metadata.model_hashes.insert(rate, value.to_string());
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::format("report header", e.to_string()))?;
        if header.iter().ne(HEADER) {
            return Err(Error::format("report header", format!("expected {}", HEADER.join(","))));
        }
        let mut entries = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let section = format!("report row {}", row + 1);
            let record = record.map_err(|e| Error::format(&section, e.to_string()))?;
            let field = |i: usize| record.get(i).unwrap_or_default();
            let num = |i: usize| {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| Error::format(&section, format!("bad number {:?}", field(i))))
            };
            entries.push(EvalEntry {
                image: field(0).to_string(),
                rate: field(1)
                    .parse()
                    .map_err(|_| Error::format(&section, format!("bad rate {:?}", field(1))))?,
                method: field(2).to_string(),
                psnr_db: num(3)?,
                recon_seconds: num(4)?,
            });
        }
        Ok(EvalReport { entries, metadata })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<EvalReport> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Aligned text table: one row per image and method, one PSNR column per
    /// rate, then a mean row per method.
    pub fn to_table(&self) -> String {
        let rates = self.rates();
        let methods = self.methods();
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut head = vec!["image".to_string(), "method".to_string()];
        head.extend(rates.iter().map(|r| format!("MR={r}")));
        rows.push(head);
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        for image in self.images() {
            for method in &methods {
                let mut row = vec![image.clone(), method.clone()];
                row.extend(
                    rates
                        .iter()
                        .map(|&r| cell(self.find(&image, r, method).map(|e| e.psnr_db))),
                );
                rows.push(row);
            }
        }
        for method in &methods {
            let mut row = vec!["mean".to_string(), method.clone()];
            row.extend(rates.iter().map(|&r| cell(self.mean_psnr(r, method))));
            rows.push(row);
        }

        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, v)| {
                    if c < 2 {
                        format!("{v:<w$}", w = widths[c])
                    } else {
                        format!("{v:>w$}", w = widths[c])
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> EvalReport {
        let mut report = EvalReport::default();
        for (i, rate) in [MeasurementRate::R25, MeasurementRate::R01].into_iter().enumerate() {
            for method in ["learned", "gaussian_ls"] {
                report.entries.push(EvalEntry {
                    image: "camera, man.png".into(),
                    rate,
                    method: method.into(),
                    psnr_db: 24.5 - 6.0 * i as f64 + 0.1 / 3.0,
                    recon_seconds: 0.012345678901234,
                });
            }
        }
        report.metadata.seed = 7;
        report.metadata.timestamp = 1_700_000_000;
        report
            .metadata
            .model_hashes
            .insert(MeasurementRate::R25, "ab".repeat(32));
        report
    }

    #[test]
    fn csv_round_trip() {
        let report = sample();
        let text = report.to_csv();
        assert!(text.lines().any(|l| l == "image,rate,method,psnr_db,recon_seconds"));
        assert_eq!(EvalReport::from_csv(&text).unwrap(), report);
    }

    #[test]
    fn infinite_psnr_survives_csv() {
        let mut report = sample();
        report.entries[0].psnr_db = f64::INFINITY;
        assert_eq!(EvalReport::from_csv(&report.to_csv()).unwrap(), report);
    }

    #[test]
    fn bad_csv_is_rejected() {
        assert!(EvalReport::from_csv("a,b\n1,2\n").is_err());
        assert!(EvalReport::from_csv("image,rate,method,psnr_db,recon_seconds\nx,0.33,learned,1,1\n").is_err());
        assert!(EvalReport::from_csv("image,rate,method,psnr_db,recon_seconds\nx,0.25,learned,abc,1\n").is_err());
    }

    #[test]
    fn means_and_table() {
        let report = sample();
        assert!((report.mean_psnr(MeasurementRate::R01, "learned").unwrap() - (18.5 + 0.1 / 3.0)).abs() < 1e-12);
        assert_eq!(report.mean_psnr(MeasurementRate::R10, "learned"), None);
        let table = report.to_table();
        let header = table.lines().next().unwrap();
        assert!(header.find("MR=0.25").unwrap() < header.find("MR=0.01").unwrap());
        assert!(table.lines().any(|l| l.starts_with("mean") && l.contains("24.53")));
    }

    proptest! {
        #[test]
        fn csv_round_trip_any_values(
            psnr in prop::num::f64::NORMAL | prop::num::f64::ZERO,
            secs in 0.0f64..100.0,
            name in "[a-zA-Z0-9 ,._\"-]{1,12}",
        ) {
            let report = EvalReport {
                entries: vec![EvalEntry {
                    image: name,
                    rate: MeasurementRate::R04,
                    method: "learned".into(),
                    psnr_db: psnr,
                    recon_seconds: secs,
                }],
                metadata: ReportMetadata::default(),
            };
            prop_assert_eq!(EvalReport::from_csv(&report.to_csv()).unwrap(), report);
        }
    }
}
