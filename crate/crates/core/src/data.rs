//! Experiment records, datasets and truth tables, with their file formats.
//!
//! Datasets (`.qpd`) and truth tables (`.qpt`) share one layout: a single
//! line holding a JSON header, a column-name line, then one comma-separated
//! line per entry. Writers emit entries in canonical order, so reading and
//! re-writing a canonical file reproduces it byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{QpiError, Result};
use crate::schedule::{Schedule, ScheduleParams};

pub const DATASET_FORMAT: &str = "qpd/1";
pub const TRUTH_FORMAT: &str = "qpt/1";
const DATASET_COLUMNS: &str = "i,t,m,N,Y";
const TRUTH_COLUMNS: &str = "i,t,m,F";

/// One experiment `(i, t, m)` repeated `n` times with `y` YES outcomes.
/// `i` and `m` index the dataset's label lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExperimentRecord {
    pub i: usize,
    pub t: u64,
    pub m: usize,
    pub n: u64,
    pub y: u64,
}

impl ExperimentRecord {
    /// Observed YES frequency `Y/N`.
    pub fn freq(&self) -> f64 {
        self.y as f64 / self.n as f64
    }

    /// Binomial variance of the frequency with a pseudocount-smoothed
    /// success probability `(Y + c)/(N + 2c)`; strictly positive whenever
    /// `c > 0`.
    pub fn estimate_variance(&self, pseudocount: f64) -> f64 {
        let n = self.n as f64;
        let f = (self.y as f64 + pseudocount) / (n + 2.0 * pseudocount);
        f * (1.0 - f) / n
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub name: String,
    pub parameters: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleHeader {
    pub l: usize,
    pub a_bar: usize,
    pub b_bar: usize,
    pub flight_len: usize,
    pub bases: Vec<u64>,
}

impl ScheduleHeader {
    pub fn from_schedule(s: &Schedule) -> Self {
        let p = s.params();
        ScheduleHeader { l: p.l, a_bar: p.a_bar, b_bar: p.b_bar, flight_len: p.flight_len, bases: s.bases().to_vec() }
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams { l: self.l, a_bar: self.a_bar, b_bar: self.b_bar, flight_len: self.flight_len }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub schedule: ScheduleHeader,
    pub init_labels: Vec<String>,
    pub meas_labels: Vec<String>,
    pub scenario: ScenarioInfo,
    pub seed: u64,
}

/// A complete set of records: exactly one per `(i, t, m)` with `t` in the
/// schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    schedule: Schedule,
    records: Vec<ExperimentRecord>,
    t_index: HashMap<u64, usize>,
}

fn check_labels(labels: &[String], what: &str) -> Result<()> {
    if labels.is_empty() {
        return Err(QpiError::Format(format!("{what} labels are empty")));
    }
    for l in labels {
        if l.is_empty() || l.contains([',', '\n', '\r']) {
            return Err(QpiError::Format(format!("invalid {what} label {l:?}")));
        }
    }
    let mut sorted: Vec<&String> = labels.iter().collect();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(QpiError::Format(format!("duplicate {what} labels")));
    }
    Ok(())
}

impl Dataset {
    /// Validates coverage and uniqueness and stores the records in canonical
    /// `(i, t, m)` order.
    pub fn new(header: DatasetHeader, records: Vec<ExperimentRecord>) -> Result<Self> {
        check_labels(&header.init_labels, "initialization")?;
        check_labels(&header.meas_labels, "measurement")?;
        let schedule = Schedule::build(header.schedule.params())?;
        if schedule.bases() != header.schedule.bases.as_slice() {
            return Err(QpiError::Format("schedule bases do not match schedule parameters".into()));
        }
        let n_i = header.init_labels.len();
        let n_m = header.meas_labels.len();
        let t_index: HashMap<u64, usize> = schedule.t_set().iter().enumerate().map(|(k, &t)| (t, k)).collect();
        let n_t = t_index.len();
        let mut slots: Vec<Option<ExperimentRecord>> = vec![None; n_i * n_t * n_m];
        for r in records {
            if r.i >= n_i || r.m >= n_m {
                return Err(QpiError::Format(format!("record label index out of range: {r:?}")));
            }
            let tk =
                *t_index.get(&r.t).ok_or_else(|| QpiError::Format(format!("t = {} is not in the schedule", r.t)))?;
            if r.n == 0 || r.y > r.n {
                return Err(QpiError::Format(format!("invalid counts N = {}, Y = {}", r.n, r.y)));
            }
            let slot = &mut slots[(r.i * n_t + tk) * n_m + r.m];
            if slot.is_some() {
                return Err(QpiError::DuplicateKey {
                    i: header.init_labels[r.i].clone(),
                    t: r.t,
                    m: header.meas_labels[r.m].clone(),
                });
            }
            *slot = Some(r);
        }
        let mut out = Vec::with_capacity(slots.len());
        for (k, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(r) => out.push(r),
                None => {
                    let m = k % n_m;
                    let tk = (k / n_m) % n_t;
                    let i = k / (n_m * n_t);
                    return Err(QpiError::CoverageGap {
                        i: header.init_labels[i].clone(),
                        t: schedule.t_set()[tk],
                        m: header.meas_labels[m].clone(),
                    });
                }
            }
        }
        Ok(Dataset { header, schedule, records: out, t_index })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn records(&self) -> &[ExperimentRecord] {
        &self.records
    }

    pub fn init_labels(&self) -> &[String] {
        &self.header.init_labels
    }

    pub fn meas_labels(&self) -> &[String] {
        &self.header.meas_labels
    }

    pub fn n_init(&self) -> usize {
        self.header.init_labels.len()
    }

    pub fn n_meas(&self) -> usize {
        self.header.meas_labels.len()
    }

    /// Position of `(i, t, m)` in [`Dataset::records`], if `t` is scheduled.
    pub fn index_of(&self, i: usize, t: u64, m: usize) -> Option<usize> {
        let tk = *self.t_index.get(&t)?;
        if i >= self.n_init() || m >= self.n_meas() {
            return None;
        }
        Some((i * self.t_index.len() + tk) * self.n_meas() + m)
    }

    pub fn get(&self, i: usize, t: u64, m: usize) -> Option<&ExperimentRecord> {
        self.index_of(i, t, m).map(|k| &self.records[k])
    }

    /// Observed frequency matrix `F̃(t)`, `|I| x |M|`.
    pub fn freq_matrix(&self, t: u64) -> Option<DMatrix<f64>> {
        self.t_index.get(&t)?;
        Some(DMatrix::from_fn(self.n_init(), self.n_meas(), |i, m| self.get(i, t, m).unwrap().freq()))
    }

    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serialization is infallible");
        out.push('\n');
        out.push_str(DATASET_COLUMNS);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.header.init_labels[r.i], r.t, self.header.meas_labels[r.m], r.n, r.y
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, head) = lines.next().ok_or_else(|| QpiError::Format("empty dataset file".into()))?;
        let header: DatasetHeader =
            serde_json::from_str(head).map_err(|e| QpiError::MalformedLine { line: 1, reason: e.to_string() })?;
        if header.format != DATASET_FORMAT {
            return Err(QpiError::Format(format!("unsupported dataset format {:?}", header.format)));
        }
        match lines.next() {
            Some((_, cols)) if cols == DATASET_COLUMNS => {}
            _ => return Err(QpiError::MalformedLine { line: 2, reason: format!("expected {DATASET_COLUMNS:?}") }),
        }
        let init: HashMap<&str, usize> = header.init_labels.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let meas: HashMap<&str, usize> = header.meas_labels.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let mut records = Vec::new();
        for (k, line) in lines {
            let lineno = k + 1;
            let bad = |reason: String| QpiError::MalformedLine { line: lineno, reason };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", fields.len())));
            }
            let i = *init.get(fields[0]).ok_or_else(|| bad(format!("unknown initialization {:?}", fields[0])))?;
            let m = *meas.get(fields[2]).ok_or_else(|| bad(format!("unknown measurement {:?}", fields[2])))?;
            let num = |s: &str, what: &str| s.parse::<u64>().map_err(|e| bad(format!("{what}: {e}")));
            let t = num(fields[1], "t")?;
            let n = num(fields[3], "N")?;
            let y = num(fields[4], "Y")?;
            if n == 0 || y > n {
                return Err(bad(format!("invalid counts N = {n}, Y = {y}")));
            }
            records.push(ExperimentRecord { i, t, m, n, y });
        }
        Dataset::new(header, records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Dataset::from_text(&std::fs::read_to_string(path)?)
    }

    /// Frequencies for plotting: `i,t,m,N,Y,freq`.
    pub fn frequencies_csv(&self) -> String {
        let mut out = String::from("i,t,m,N,Y,freq\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.header.init_labels[r.i],
                r.t,
                self.header.meas_labels[r.m],
                r.n,
                r.y,
                r.freq()
            );
        }
        out
    }
}

/// Exact YES probabilities for every `t` in `0..=t_max`, plus the noiseless
/// tomographic-frame data used by the process-tomography baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthTable {
    pub scenario: ScenarioInfo,
    pub init_labels: Vec<String>,
    pub meas_labels: Vec<String>,
    /// `probs[t]` is the `|I| x |M|` probability matrix at time `t`.
    pub probs: Vec<DMatrix<f64>>,
    pub frame: FrameData,
}

/// Frame states (rows) measured with the Pauli observables plus the trivial
/// always-YES measurement (columns), at `t = 0` and `t = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameData {
    pub init_labels: Vec<String>,
    pub meas_labels: Vec<String>,
    pub f0: Vec<Vec<f64>>,
    pub f1: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TruthHeader {
    format: String,
    scenario: ScenarioInfo,
    init_labels: Vec<String>,
    meas_labels: Vec<String>,
    t_max: u64,
    frame: FrameData,
}

impl TruthTable {
    pub fn t_max(&self) -> u64 {
        self.probs.len() as u64 - 1
    }

    pub fn at(&self, t: u64) -> Option<&DMatrix<f64>> {
        self.probs.get(t as usize)
    }

    pub fn to_text(&self) -> String {
        let header = TruthHeader {
            format: TRUTH_FORMAT.into(),
            scenario: self.scenario.clone(),
            init_labels: self.init_labels.clone(),
            meas_labels: self.meas_labels.clone(),
            t_max: self.t_max(),
            frame: self.frame.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serialization is infallible");
        out.push('\n');
        out.push_str(TRUTH_COLUMNS);
        out.push('\n');
        for (i, il) in self.init_labels.iter().enumerate() {
            for (t, f) in self.probs.iter().enumerate() {
                for (m, ml) in self.meas_labels.iter().enumerate() {
                    let _ = writeln!(out, "{il},{t},{ml},{}", f[(i, m)]);
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, head) = lines.next().ok_or_else(|| QpiError::Format("empty truth file".into()))?;
        let header: TruthHeader =
            serde_json::from_str(head).map_err(|e| QpiError::MalformedLine { line: 1, reason: e.to_string() })?;
        if header.format != TRUTH_FORMAT {
            return Err(QpiError::Format(format!("unsupported truth format {:?}", header.format)));
        }
        check_labels(&header.init_labels, "initialization")?;
        check_labels(&header.meas_labels, "measurement")?;
        match lines.next() {
            Some((_, cols)) if cols == TRUTH_COLUMNS => {}
            _ => return Err(QpiError::MalformedLine { line: 2, reason: format!("expected {TRUTH_COLUMNS:?}") }),
        }
        let n_i = header.init_labels.len();
        let n_m = header.meas_labels.len();
        let n_t = header.t_max as usize + 1;
        let init: HashMap<&str, usize> = header.init_labels.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let meas: HashMap<&str, usize> = header.meas_labels.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let mut values: Vec<Option<f64>> = vec![None; n_i * n_t * n_m];
        for (k, line) in lines {
            let lineno = k + 1;
            let bad = |reason: String| QpiError::MalformedLine { line: lineno, reason };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", fields.len())));
            }
            let i = *init.get(fields[0]).ok_or_else(|| bad(format!("unknown initialization {:?}", fields[0])))?;
            let m = *meas.get(fields[2]).ok_or_else(|| bad(format!("unknown measurement {:?}", fields[2])))?;
            let t: usize = fields[1].parse().map_err(|e| bad(format!("t: {e}")))?;
            if t >= n_t {
                return Err(bad(format!("t = {t} exceeds t_max = {}", header.t_max)));
            }
            let f: f64 = fields[3].parse().map_err(|e| bad(format!("F: {e}")))?;
            let slot = &mut values[(i * n_t + t) * n_m + m];
            if slot.is_some() {
                return Err(QpiError::DuplicateKey { i: fields[0].into(), t: t as u64, m: fields[2].into() });
            }
            *slot = Some(f);
        }
        let mut probs = Vec::with_capacity(n_t);
        for t in 0..n_t {
            let mut f = DMatrix::zeros(n_i, n_m);
            for i in 0..n_i {
                for m in 0..n_m {
                    f[(i, m)] = values[(i * n_t + t) * n_m + m].ok_or_else(|| QpiError::CoverageGap {
                        i: header.init_labels[i].clone(),
                        t: t as u64,
                        m: header.meas_labels[m].clone(),
                    })?;
                }
            }
            probs.push(f);
        }
        Ok(TruthTable {
            scenario: header.scenario,
            init_labels: header.init_labels,
            meas_labels: header.meas_labels,
            probs,
            frame: header.frame,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        TruthTable::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: u64, y: u64) -> ExperimentRecord {
        ExperimentRecord { i: 0, t: 0, m: 0, n, y }
    }

    #[test]
    fn frequencies() {
        assert_eq!(rec(4, 2).freq(), 0.5);
        assert_eq!(rec(10_000, 0).freq(), 0.0);
        assert_eq!(rec(3, 3).freq(), 1.0);
    }

    #[test]
    fn variance_symmetric_case() {
        assert!((rec(100, 50).estimate_variance(1.0) - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn variance_is_positive_at_zero_successes() {
        let expected = (1.0 / 102.0) * (101.0 / 102.0) / 100.0;
        let v = rec(100, 0).estimate_variance(1.0);
        assert!((v - expected).abs() < 1e-18);
        assert!(v > 0.0 && (v - 9.71e-5).abs() < 1e-7);
        assert!(rec(100, 100).estimate_variance(1.0) > 0.0);
    }

    #[test]
    fn variance_approaches_binomial_limit() {
        let n = 1_000_000;
        let f = 0.3;
        let v = rec(n, (f * n as f64) as u64).estimate_variance(1.0);
        let limit = f * (1.0 - f) / n as f64;
        assert!((v / limit - 1.0).abs() < 1e-5);
    }

    #[test]
    fn variance_decreases_with_trials_at_fixed_ratio() {
        let mut prev = f64::INFINITY;
        for n in [10u64, 20, 40, 100, 1000, 10_000] {
            let v = rec(n, n / 5).estimate_variance(1.0);
            assert!(v < prev);
            prev = v;
        }
    }

    pub(crate) fn tiny_dataset() -> Dataset {
        let params = ScheduleParams { l: 0, a_bar: 0, b_bar: 1, flight_len: 2 };
        let schedule = Schedule::build(params).unwrap();
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            schedule: ScheduleHeader::from_schedule(&schedule),
            init_labels: vec!["+z".into(), "+x".into()],
            meas_labels: vec!["X".into(), "Z".into()],
            scenario: ScenarioInfo { name: "test".into(), parameters: BTreeMap::from([("gamma".into(), 0.5)]) },
            seed: 3,
        };
        let mut records = Vec::new();
        for &t in schedule.t_set() {
            for i in 0..2 {
                for m in 0..2 {
                    records.push(ExperimentRecord { i, t, m, n: 10, y: (t as usize + i + m) as u64 % 11 });
                }
            }
        }
        records.reverse();
        Dataset::new(header, records).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_byte_stable() {
        let ds = tiny_dataset();
        let text = ds.to_text();
        let back = Dataset::from_text(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn missing_record_is_a_coverage_gap() {
        let text = tiny_dataset().to_text();
        let truncated: Vec<&str> = text.lines().filter(|l| *l != "+x,2,Z,10,4").collect();
        assert_eq!(truncated.len() + 1, text.lines().count());
        let err = Dataset::from_text(&truncated.join("\n")).unwrap_err();
        assert!(matches!(err, QpiError::CoverageGap { ref i, t: 2, ref m } if i == "+x" && m == "Z"), "{err}");
    }

    #[test]
    fn duplicate_record_is_rejected() {
        let mut text = tiny_dataset().to_text();
        text.push_str("+z,0,X,10,1\n");
        assert!(matches!(Dataset::from_text(&text), Err(QpiError::DuplicateKey { .. })));
    }

    #[test]
    fn malformed_line_is_rejected() {
        let mut text = tiny_dataset().to_text();
        text.push_str("+z,0,X,ten,1\n");
        assert!(matches!(Dataset::from_text(&text), Err(QpiError::MalformedLine { .. })));
        let mut text = tiny_dataset().to_text();
        text.push_str("+z,0,X,10\n");
        assert!(matches!(Dataset::from_text(&text), Err(QpiError::MalformedLine { .. })));
    }

    #[test]
    fn successes_above_trials_are_rejected() {
        let text = tiny_dataset().to_text().replace("+z,0,X,10,0", "+z,0,X,10,11");
        assert!(matches!(Dataset::from_text(&text), Err(QpiError::MalformedLine { .. })));
    }

    #[test]
    fn frequency_csv_has_expected_columns() {
        let csv = tiny_dataset().frequencies_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("i,t,m,N,Y,freq"));
        assert_eq!(lines.next(), Some("+z,0,X,10,0,0"));
    }

    #[test]
    fn truth_round_trip() {
        let truth = TruthTable {
            scenario: ScenarioInfo { name: "x".into(), parameters: BTreeMap::new() },
            init_labels: vec!["a".into()],
            meas_labels: vec!["X".into(), "Y".into()],
            probs: (0..4).map(|t| DMatrix::from_row_slice(1, 2, &[0.1 * t as f64, 1.0 / 3.0])).collect(),
            frame: FrameData {
                init_labels: vec!["a".into()],
                meas_labels: vec!["X".into()],
                f0: vec![vec![0.25]],
                f1: vec![vec![0.75]],
            },
        };
        let text = truth.to_text();
        let back = TruthTable::from_text(&text).unwrap();
        assert_eq!(back, truth);
        assert_eq!(back.to_text(), text);
    }
}
