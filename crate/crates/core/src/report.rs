//! Test-split evaluation and latency benchmarking.
//!
//! A [`ScoreReport`] is written as two files: `<base>.json`, the full report,
//! and `<base>.csv`, one row per test sample with the columns
//! `id,label,anomaly_family,picturable,unpicturable,z_picturable,z_unpicturable,fused`
//! (empty cells for branches that were not run).
//!
//! JSON schema, version 1:
//!
//! ```text
//! schema_version   integer, 1
//! category         string
//! selection        "fused" | "picturable-only" | "unpicturable-only"
//! records          [{ id, label, anomaly_family, picturable, unpicturable,
//!                     z_picturable, z_unpicturable, fused }]
//!                  label: "normal" | "logical" | "structural";
//!                  family and scores may be null
//! auroc            { picturable | unpicturable | fused:
//!                    { overall, logical, structural,
//!                      family_picturable, family_unpicturable } }
//!                  a branch is absent when it was not run; a subset is null
//!                  when the test split has no anomalies of that kind
//! latency_ms       { forward | picturable | unpicturable | fusion | total:
//!                    { mean, median, p95 } }   per image
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::{AnomalyFamily, DatasetBundle, Image, ImageSample, Label, Split};
use crate::detector::{BranchSelection, Detector, ImageScores, StageTimes};
use crate::error::{Error, Result};
use crate::fusion::auroc;
use crate::picturable::quantile;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: Label,
    pub anomaly_family: Option<AnomalyFamily>,
    pub picturable: Option<f64>,
    pub unpicturable: Option<f64>,
    pub z_picturable: Option<f64>,
    pub z_unpicturable: Option<f64>,
    pub fused: Option<f64>,
}

impl SampleRecord {
    fn new(sample: &ImageSample, scores: &ImageScores) -> Self {
        Self {
            id: sample.id.clone(),
            label: sample.label,
            anomaly_family: sample.anomaly_family,
            picturable: scores.picturable,
            unpicturable: scores.unpicturable,
            z_picturable: scores.z_picturable,
            z_unpicturable: scores.z_unpicturable,
            fused: scores.fused,
        }
    }

    pub fn is_anomalous(&self) -> bool {
        self.label.is_anomalous()
    }
}

/// AUROC over all test samples and over each anomaly subset (that subset
/// against every normal sample).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AurocBreakdown {
    pub overall: f64,
    pub logical: Option<f64>,
    pub structural: Option<f64>,
    pub family_picturable: Option<f64>,
    pub family_unpicturable: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl LatencyStats {
    fn of(samples: &[Duration]) -> Self {
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        if ms.is_empty() {
            return Self {
                mean: 0.0,
                median: 0.0,
                p95: 0.0,
            };
        }
        Self {
            mean: ms.iter().sum::<f64>() / ms.len() as f64,
            median: quantile(&ms, 0.5),
            p95: quantile(&ms, 0.95),
        }
    }
}

/// Per-image latency of each scoring stage and of their sum, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub forward: LatencyStats,
    pub picturable: LatencyStats,
    pub unpicturable: LatencyStats,
    pub fusion: LatencyStats,
    pub total: LatencyStats,
}

impl StageLatency {
    pub fn of(times: &[StageTimes]) -> Self {
        let pick = |f: fn(&StageTimes) -> Duration| {
            LatencyStats::of(&times.iter().map(f).collect::<Vec<_>>())
        };
        Self {
            forward: pick(|t| t.forward),
            picturable: pick(|t| t.picturable),
            unpicturable: pick(|t| t.unpicturable),
            fusion: pick(|t| t.fusion),
            total: pick(StageTimes::total),
        }
    }

    /// Median unpicturable-stage time over median total time.
    pub fn unpicturable_fraction(&self) -> f64 {
        if self.total.median > 0.0 {
            self.unpicturable.median / self.total.median
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub category: String,
    pub selection: BranchSelection,
    pub records: Vec<SampleRecord>,
    pub auroc: BTreeMap<String, AurocBreakdown>,
    pub latency_ms: StageLatency,
}

fn breakdown(
    records: &[SampleRecord],
    score: impl Fn(&SampleRecord) -> Option<f64>,
) -> Result<Option<AurocBreakdown>> {
    let scored: Vec<(&SampleRecord, f64)> = records
        .iter()
        .filter_map(|r| score(r).map(|s| (r, s)))
        .collect();
    if scored.is_empty() {
        return Ok(None);
    }
    let subset = |keep: &dyn Fn(&SampleRecord) -> bool| -> Result<Option<f64>> {
        let picked: Vec<&(&SampleRecord, f64)> = scored
            .iter()
            .filter(|(r, _)| !r.is_anomalous() || keep(r))
            .collect();
        let n_pos = picked.iter().filter(|(r, _)| r.is_anomalous()).count();
        if n_pos == 0 || n_pos == picked.len() {
            return Ok(None);
        }
        let s: Vec<f64> = picked.iter().map(|(_, s)| *s).collect();
        let l: Vec<bool> = picked.iter().map(|(r, _)| r.is_anomalous()).collect();
        auroc(&s, &l).map(Some)
    };
    let family = |f: AnomalyFamily| move |r: &SampleRecord| r.anomaly_family == Some(f);
    let overall = subset(&|_| true)?.ok_or_else(|| {
        Error::Evaluation("test split needs both normal and anomalous samples".into())
    })?;
    Ok(Some(AurocBreakdown {
        overall,
        logical: subset(&|r| r.label == Label::Logical)?,
        structural: subset(&|r| r.label == Label::Structural)?,
        family_picturable: subset(&family(AnomalyFamily::Picturable))?,
        family_unpicturable: subset(&family(AnomalyFamily::Unpicturable))?,
    }))
}

impl ScoreReport {
    /// Builds the report from already scored records.
    pub fn from_records(
        category: &str,
        selection: BranchSelection,
        records: Vec<SampleRecord>,
        times: &[StageTimes],
    ) -> Result<Self> {
        let mut aurocs = BTreeMap::new();
        let columns: [(&str, fn(&SampleRecord) -> Option<f64>); 3] = [
            ("picturable", |r| r.picturable),
            ("unpicturable", |r| r.unpicturable),
            ("fused", |r| r.fused),
        ];
        for (name, col) in columns {
            if let Some(b) = breakdown(&records, col)? {
                aurocs.insert(name.to_string(), b);
            }
        }
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            category: category.to_string(),
            selection,
            records,
            auroc: aurocs,
            latency_ms: StageLatency::of(times),
        })
    }

    /// AUROC breakdown of the score the report's selection ranks by.
    pub fn primary(&self) -> Option<&AurocBreakdown> {
        let key = match self.selection {
            BranchSelection::Fused => "fused",
            BranchSelection::PicturableOnly => "picturable",
            BranchSelection::UnpicturableOnly => "unpicturable",
        };
        self.auroc.get(key)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("invalid report JSON: {e}")))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported report schema version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "id",
            "label",
            "anomaly_family",
            "picturable",
            "unpicturable",
            "z_picturable",
            "z_unpicturable",
            "fused",
        ])
        .expect("in-memory write");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.id.clone(),
                r.label.as_str().to_string(),
                r.anomaly_family
                    .map(|f| f.as_str().to_string())
                    .unwrap_or_default(),
                cell(r.picturable),
                cell(r.unpicturable),
                cell(r.z_picturable),
                cell(r.z_unpicturable),
                cell(r.fused),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Writes `<base>.json` and `<base>.csv` and returns both paths.
    pub fn write(&self, base: &Path) -> Result<(PathBuf, PathBuf)> {
        let json = base.with_extension("json");
        let csv = base.with_extension("csv");
        fs::write(&json, self.to_json())?;
        fs::write(&csv, self.to_csv())?;
        Ok((json, csv))
    }
}

fn score_all(
    detector: &Detector,
    samples: &[ImageSample],
    selection: BranchSelection,
    workers: usize,
) -> Result<Vec<(ImageScores, StageTimes)>> {
    if workers <= 1 || samples.len() < 2 {
        return samples
            .iter()
            .map(|s| detector.score_timed(&s.pixels, selection))
            .collect();
    }
    let chunk = samples.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| detector.score_timed(&s.pixels, selection))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("scoring thread panicked")?);
        }
        Ok(out)
    })
}

/// Scores every test sample and summarizes AUROC and latency. Scores do not
/// depend on `workers`; latencies measured with more than one worker share
/// the CPU and are only indicative.
pub fn evaluate(
    detector: &Detector,
    dataset: &DatasetBundle,
    selection: BranchSelection,
    workers: usize,
) -> Result<ScoreReport> {
    let test = dataset.nonempty_split(Split::Test)?;
    let scored = score_all(detector, test, selection, workers)?;
    let times: Vec<StageTimes> = scored.iter().map(|(_, t)| *t).collect();
    let records = test
        .iter()
        .zip(&scored)
        .map(|(s, (scores, _))| SampleRecord::new(s, scores))
        .collect();
    ScoreReport::from_records(dataset.category(), selection, records, &times)
}

/// Single-image latency benchmark: `warmup` unmeasured runs, then `runs`
/// measured ones, cycling through `images`.
pub fn bench(
    detector: &Detector,
    images: &[&Image],
    warmup: usize,
    runs: usize,
) -> Result<StageLatency> {
    if images.is_empty() || runs == 0 {
        return Err(Error::Evaluation(
            "benchmark needs at least one image and one run".into(),
        ));
    }
    for i in 0..warmup {
        detector.score_timed(images[i % images.len()], BranchSelection::Fused)?;
    }
    let times = (0..runs)
        .map(|i| {
            Ok(detector
                .score_timed(images[i % images.len()], BranchSelection::Fused)?
                .1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageLatency::of(&times))
}

/// Fixed-width text table of a latency summary.
pub fn latency_table(lat: &StageLatency) -> String {
    let mut s = format!(
        "{:<14}{:>12}{:>12}{:>12}\n",
        "stage", "median ms", "mean ms", "p95 ms"
    );
    for (name, st) in [
        ("forward", lat.forward),
        ("picturable", lat.picturable),
        ("unpicturable", lat.unpicturable),
        ("fusion", lat.fusion),
        ("total", lat.total),
    ] {
        s.push_str(&format!(
            "{name:<14}{:>12.4}{:>12.4}{:>12.4}\n",
            st.median, st.mean, st.p95
        ));
    }
    s.push_str(&format!(
        "unpicturable share of total (median): {:.2}%\n",
        100.0 * lat.unpicturable_fraction()
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: Label, family: Option<AnomalyFamily>, p: f64, u: f64) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            label,
            anomaly_family: family,
            picturable: Some(p),
            unpicturable: Some(u),
            z_picturable: Some(p),
            z_unpicturable: Some(u),
            fused: Some(p + u),
        }
    }

    fn records() -> Vec<SampleRecord> {
        vec![
            rec("a", Label::Normal, None, 0.1, 0.1),
            rec("b", Label::Normal, None, 0.2, 0.3),
            rec(
                "c",
                Label::Structural,
                Some(AnomalyFamily::Picturable),
                0.9,
                0.2,
            ),
            rec(
                "d",
                Label::Logical,
                Some(AnomalyFamily::Unpicturable),
                0.15,
                0.9,
            ),
        ]
    }

    #[test]
    fn breakdown_by_subset() {
        let r = ScoreReport::from_records("x", BranchSelection::Fused, records(), &[]).unwrap();
        let p = r.auroc["picturable"];
        assert_eq!(p.structural, Some(1.0));
        assert_eq!(p.logical, Some(0.5));
        assert_eq!(p.family_picturable, Some(1.0));
        assert_eq!(r.auroc["unpicturable"].logical, Some(1.0));
        assert_eq!(r.primary().unwrap().overall, 1.0);
    }

    #[test]
    fn missing_subset_is_absent() {
        let recs: Vec<_> = records()
            .into_iter()
            .filter(|r| r.label != Label::Logical)
            .collect();
        let r = ScoreReport::from_records("x", BranchSelection::Fused, recs, &[]).unwrap();
        assert_eq!(r.auroc["fused"].logical, None);
        assert_eq!(r.auroc["fused"].family_unpicturable, None);
        assert!(r.auroc["fused"].structural.is_some());
    }

    #[test]
    fn single_branch_omits_the_other() {
        let mut recs = records();
        for r in &mut recs {
            r.unpicturable = None;
            r.z_unpicturable = None;
            r.fused = None;
        }
        let r = ScoreReport::from_records("x", BranchSelection::PicturableOnly, recs, &[]).unwrap();
        assert_eq!(r.auroc.keys().collect::<Vec<_>>(), vec!["picturable"]);
        let csv = r.to_csv();
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row, ["a", "normal", "", "0.1", "", "0.1", "", ""]);
    }

    #[test]
    fn json_and_csv() {
        let r = ScoreReport::from_records(
            "x",
            BranchSelection::Fused,
            records(),
            &[StageTimes::default()],
        )
        .unwrap();
        let back = ScoreReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("id,label,anomaly_family,picturable"));
        let bad = r
            .to_json()
            .replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(ScoreReport::from_json(&bad).is_err());
    }

    #[test]
    fn single_class_test_split() {
        let recs: Vec<_> = records()
            .into_iter()
            .filter(|r| !r.is_anomalous())
            .collect();
        assert!(matches!(
            ScoreReport::from_records("x", BranchSelection::Fused, recs, &[]),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn latency_stats() {
        let ms = |v: u64| Duration::from_millis(v);
        let s = LatencyStats::of(&[ms(3), ms(1), ms(2)]);
        assert!((s.mean - 2.0).abs() < 1e-9);
        assert!((s.median - 2.0).abs() < 1e-9);
        assert!((s.p95 - 2.9).abs() < 1e-9);
    }
}
