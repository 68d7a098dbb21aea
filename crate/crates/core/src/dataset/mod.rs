//! Check-in logs: parsing, sparse filtering, chronological splits and
//! synthetic corpora with planted structure.

mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LatLon;

pub use synth::{generate_synthetic, DecisionSynthSpec, GroundTruth, PlantedDecisions, SynthOutput, SynthPoi, SynthSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{malformed} of {total} lines malformed; first offending line {first_line}")]
    Format {
        malformed: usize,
        total: usize,
        first_line: usize,
    },
    #[error("metadata line {line}: expected `entity_id<TAB>item_id`")]
    Metadata { line: usize },
    #[error("invalid split ratios {0:?}: must be non-negative with a positive train share and sum to 1")]
    Ratios((f64, f64, f64)),
    #[error("invalid synthetic spec: {0}")]
    Parameter(String),
}

/// One visit event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub poi_id: String,
}

impl CheckIn {
    pub fn loc(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }

    fn is_valid(&self) -> bool {
        self.timestamp > 0 && self.loc().is_valid() && !self.user_id.is_empty() && !self.poi_id.is_empty()
    }
}

/// Check-ins grouped by user (ascending id), each user's records in
/// non-decreasing time order with ties kept in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckInLog {
    records: Vec<CheckIn>,
}

impl CheckInLog {
    pub fn new(mut records: Vec<CheckIn>) -> Self {
        // stable: equal (user, time) keep input order
        records.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
        Self { records }
    }

    pub fn records(&self) -> &[CheckIn] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-user chronological sequences, users in ascending id order.
    pub fn by_user(&self) -> Vec<(&str, &[CheckIn])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].user_id != self.records[start].user_id {
                out.push((self.records[start].user_id.as_str(), &self.records[start..i]));
                start = i;
            }
        }
        out
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.user_id.as_str()).collect()
    }

    pub fn pois(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.poi_id.as_str()).collect()
    }

    /// Mean observed coordinate of every POI.
    pub fn poi_locations(&self) -> BTreeMap<String, LatLon> {
        let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = acc.entry(&r.poi_id).or_insert((0.0, 0.0, 0));
            e.0 += r.lat;
            e.1 += r.lon;
            e.2 += 1;
        }
        acc.into_iter()
            .map(|(k, (la, lo, n))| (k.to_string(), LatLon::new(la / n as f64, lo / n as f64)))
            .collect()
    }

    pub fn concat(logs: &[&CheckInLog]) -> CheckInLog {
        CheckInLog::new(logs.iter().flat_map(|l| l.records.iter().cloned()).collect())
    }
}

/// Zero-based column positions of the five check-in fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSpec {
    pub user_id: usize,
    pub timestamp: usize,
    pub lat: usize,
    pub lon: usize,
    pub poi_id: usize,
}

impl Default for ColumnSpec {
    /// `user_id \t timestamp \t lat \t lon \t poi_id`, as in the public Gowalla dump.
    fn default() -> Self {
        Self {
            user_id: 0,
            timestamp: 1,
            lat: 2,
            lon: 3,
            poi_id: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub lines: usize,
    pub malformed: usize,
    pub first_malformed_line: Option<usize>,
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

fn format_timestamp(ts: i64) -> String {
    match DateTime::<Utc>::from_timestamp(ts, 0) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        None => ts.to_string(),
    }
}

fn parse_line(line: &str, cols: &ColumnSpec) -> Option<CheckIn> {
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    let get = |i: usize| fields.get(i).copied();
    let rec = CheckIn {
        user_id: get(cols.user_id)?.to_string(),
        timestamp: parse_timestamp(get(cols.timestamp)?)?,
        lat: get(cols.lat)?.parse().ok()?,
        lon: get(cols.lon)?.parse().ok()?,
        poi_id: get(cols.poi_id)?.to_string(),
    };
    rec.is_valid().then_some(rec)
}

/// Parses a tab-separated check-in stream. Blank lines are skipped; malformed
/// lines (wrong arity, unparsable fields, out-of-range coordinates,
/// non-positive timestamps) are counted and dropped. More than half malformed
/// is a format error.
pub fn parse_checkins<R: BufRead>(reader: R, cols: &ColumnSpec) -> Result<(CheckInLog, ParseReport), DatasetError> {
    let mut report = ParseReport::default();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        match parse_line(&line, cols) {
            Some(r) => records.push(r),
            None => {
                report.malformed += 1;
                report.first_malformed_line.get_or_insert(i + 1);
            }
        }
    }
    if report.malformed * 2 > report.lines {
        return Err(DatasetError::Format {
            malformed: report.malformed,
            total: report.lines,
            first_line: report.first_malformed_line.unwrap_or(0),
        });
    }
    Ok((CheckInLog::new(records), report))
}

/// Writes the log in the default column order with ISO-8601 UTC timestamps.
pub fn write_checkins<W: Write>(mut w: W, log: &CheckInLog) -> std::io::Result<()> {
    for r in &log.records {
        writeln!(
            w,
            "{}\t{}\t{:?}\t{:?}\t{}",
            r.user_id,
            format_timestamp(r.timestamp),
            r.lat,
            r.lon,
            r.poi_id
        )?;
    }
    Ok(())
}

/// Item sets attached to users and POIs. The two vocabularies are kept apart.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub poi_meta: BTreeMap<String, BTreeSet<String>>,
    pub user_meta: BTreeMap<String, BTreeSet<String>>,
}

/// Reads `entity_id \t item_id` pairs.
pub fn parse_metadata<R: BufRead>(reader: R) -> Result<BTreeMap<String, BTreeSet<String>>, DatasetError> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (e, item) = line.split_once('\t').ok_or(DatasetError::Metadata { line: i + 1 })?;
        let (e, item) = (e.trim(), item.trim());
        if e.is_empty() || item.is_empty() || item.contains('\t') {
            return Err(DatasetError::Metadata { line: i + 1 });
        }
        out.entry(e.to_string()).or_default().insert(item.to_string());
    }
    Ok(out)
}

pub fn write_metadata<W: Write>(mut w: W, meta: &BTreeMap<String, BTreeSet<String>>) -> std::io::Result<()> {
    for (e, items) in meta {
        for item in items {
            writeln!(w, "{e}\t{item}")?;
        }
    }
    Ok(())
}

/// Repeatedly drops users with fewer than `min_user` records and POIs with
/// fewer than `min_poi` visits until both thresholds hold at once.
pub fn filter_sparse(log: &CheckInLog, min_user: usize, min_poi: usize) -> CheckInLog {
    let mut records = log.records.clone();
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut poi_counts: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *user_counts.entry(&r.user_id).or_default() += 1;
            *poi_counts.entry(&r.poi_id).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| user_counts[r.user_id.as_str()] >= min_user && poi_counts[r.poi_id.as_str()] >= min_poi)
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap_or(false));
    }
    CheckInLog { records }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.2,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCorpus {
    pub train: CheckInLog,
    pub validation: CheckInLog,
    pub test: CheckInLog,
    pub ratios: SplitRatios,
}

impl SplitCorpus {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Users with fewer records than this go entirely to train.
pub const MIN_RECORDS_TO_SPLIT: usize = 3;

fn ceil_share(r: f64, n: usize) -> usize {
    // 0.7 * 10 is 7.000000000000001 in binary floating point
    ((r * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Per-user chronological split: the first `ceil(train * n)` records go to
/// train, the next `ceil(validation * n)` to validation, the rest to test.
pub fn split(log: &CheckInLog, ratios: SplitRatios) -> Result<SplitCorpus, DatasetError> {
    let SplitRatios { train, validation, test } = ratios;
    let ok = [train, validation, test].iter().all(|r| r.is_finite() && *r >= 0.0)
        && train > 0.0
        && (train + validation + test - 1.0).abs() <= 1e-9;
    if !ok {
        return Err(DatasetError::Ratios((train, validation, test)));
    }
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (_, seq) in log.by_user() {
        let n = seq.len();
        if n < MIN_RECORDS_TO_SPLIT {
            tr.extend_from_slice(seq);
            continue;
        }
        let n_train = ceil_share(train, n).min(n);
        let n_val = ceil_share(validation, n).min(n - n_train);
        tr.extend_from_slice(&seq[..n_train]);
        va.extend_from_slice(&seq[n_train..n_train + n_val]);
        te.extend_from_slice(&seq[n_train + n_val..]);
    }
    Ok(SplitCorpus {
        train: CheckInLog { records: tr },
        validation: CheckInLog { records: va },
        test: CheckInLog { records: te },
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(u: &str, t: i64, p: &str) -> CheckIn {
        CheckIn {
            user_id: u.into(),
            timestamp: t,
            lat: 22.5,
            lon: 114.0,
            poi_id: p.into(),
        }
    }

    fn parse(s: &str) -> Result<(CheckInLog, ParseReport), DatasetError> {
        parse_checkins(s.as_bytes(), &ColumnSpec::default())
    }

    #[test]
    fn empty_input() {
        let (log, rep) = parse("").unwrap();
        assert!(log.is_empty());
        assert_eq!(rep.malformed, 0);
    }

    #[test]
    fn user_records_sorted() {
        let text = "u1\t300\t1.0\t2.0\tp1\nu1\t100\t1.0\t2.0\tp2\nu1\t2010-10-19T23:55:27Z\t1.0\t2.0\tp3\n";
        let (log, _) = parse(text).unwrap();
        let ts: Vec<i64> = log.records().iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, vec![100, 300, 1287532527]);
    }

    #[test]
    fn out_of_range_latitude_is_malformed() {
        let text = "u1\t100\t95.0\t2.0\tp1\nu1\t100\t1.0\t2.0\tp1\nu2\t100\t1.0\t2.0\tp1\n";
        let (log, rep) = parse(text).unwrap();
        assert_eq!(rep.malformed, 1);
        assert_eq!(rep.first_malformed_line, Some(1));
        assert_eq!(log.len(), 2);
        assert!(log.records().iter().all(|r| (-90.0..=90.0).contains(&r.lat)));
    }

    #[test]
    fn mostly_malformed_is_error() {
        let text = "u1\t100\t1.0\t2.0\tp1\nbad line\nu1\t-5\t1\t1\tp\n";
        match parse(text) {
            Err(DatasetError::Format { first_line, malformed, .. }) => {
                assert_eq!(first_line, 2);
                assert_eq!(malformed, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn filter_identity_and_threshold() {
        let log = CheckInLog::new((0..9).map(|i| rec("u", 10 + i, "p")).collect());
        assert_eq!(filter_sparse(&log, 0, 0), log);
        assert!(filter_sparse(&log, 10, 0).is_empty());
    }

    /// Independent re-scan: true when no user/POI is below its threshold.
    fn satisfies(log: &CheckInLog, mu: usize, mp: usize) -> bool {
        let mut u: BTreeMap<&str, usize> = BTreeMap::new();
        let mut p: BTreeMap<&str, usize> = BTreeMap::new();
        for r in log.records() {
            *u.entry(&r.user_id).or_default() += 1;
            *p.entry(&r.poi_id).or_default() += 1;
        }
        u.values().all(|&c| c >= mu) && p.values().all(|&c| c >= mp)
    }

    #[test]
    fn filter_chain_reaches_fixed_point() {
        // With 3/3, dropping user c and POIs p1, p2 leaves b with two visits,
        // which then also drops.
        let mut recs = vec![rec("a", 1, "p1"), rec("a", 2, "p1"), rec("a", 3, "p2")];
        recs.extend([rec("b", 1, "p2"), rec("b", 2, "p3"), rec("b", 3, "p3")]);
        recs.push(rec("c", 1, "p3"));
        let log = CheckInLog::new(recs);
        let f = filter_sparse(&log, 3, 3);
        assert!(satisfies(&f, 3, 3));
        assert!(f.is_empty());
        let g = filter_sparse(&log, 2, 2);
        assert!(satisfies(&g, 2, 2));
        assert_eq!(g.len(), 6);
    }

    #[test]
    fn split_examples() {
        let log = CheckInLog::new((0..10).map(|i| rec("u", 100 + i, "p")).collect());
        let s = split(&log, SplitRatios::default()).unwrap();
        assert_eq!(s.counts(), (7, 2, 1));
        let all = split(&log, SplitRatios { train: 1.0, validation: 0.0, test: 0.0 }).unwrap();
        assert_eq!(all.counts(), (10, 0, 0));
        let small = CheckInLog::new(vec![rec("v", 1, "p"), rec("v", 2, "q")]);
        assert_eq!(split(&small, SplitRatios::default()).unwrap().counts(), (2, 0, 0));
        assert!(split(&log, SplitRatios { train: 0.5, validation: 0.2, test: 0.2 }).is_err());
    }

    #[test]
    fn metadata_parse_and_errors() {
        let m = parse_metadata("p1\tcafe\np1\twifi\np2\tbar\n".as_bytes()).unwrap();
        assert_eq!(m["p1"].len(), 2);
        assert!(matches!(parse_metadata("p1 cafe\n".as_bytes()), Err(DatasetError::Metadata { line: 1 })));
        let mut buf = Vec::new();
        write_metadata(&mut buf, &m).unwrap();
        assert_eq!(parse_metadata(buf.as_slice()).unwrap(), m);
    }

    fn arb_log() -> impl Strategy<Value = CheckInLog> {
        proptest::collection::vec(
            (0u8..4, 1_000_000_000i64..1_300_000_000, -90.0f64..=90.0, -180.0f64..=180.0, 0u8..6),
            0..40,
        )
        .prop_map(|v| {
            CheckInLog::new(
                v.into_iter()
                    .map(|(u, t, la, lo, p)| CheckIn {
                        user_id: format!("u{u}"),
                        timestamp: t,
                        lat: la,
                        lon: lo,
                        poi_id: format!("p{p}"),
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_write(log in arb_log()) {
            let mut buf = Vec::new();
            write_checkins(&mut buf, &log).unwrap();
            let (back, rep) = parse_checkins(buf.as_slice(), &ColumnSpec::default()).unwrap();
            prop_assert_eq!(rep.malformed, 0);
            prop_assert_eq!(back, log);
        }

        #[test]
        fn split_preserves_records_and_order(log in arb_log()) {
            let s = split(&log, SplitRatios::default()).unwrap();
            let joined = CheckInLog::concat(&[&s.train, &s.validation, &s.test]);
            prop_assert_eq!(&joined, &log);
            // train precedes validation precedes test within each user
            for (u, seq) in log.by_user() {
                let last = |l: &CheckInLog| l.records().iter().filter(|r| r.user_id == u).map(|r| r.timestamp).max();
                let first = |l: &CheckInLog| l.records().iter().filter(|r| r.user_id == u).map(|r| r.timestamp).min();
                if let (Some(a), Some(b)) = (last(&s.train), first(&s.validation)) { prop_assert!(a <= b); }
                if let (Some(a), Some(b)) = (last(&s.validation), first(&s.test)) { prop_assert!(a <= b); }
                prop_assert!(!seq.is_empty());
            }
        }

        #[test]
        fn filter_output_has_no_violations(log in arb_log(), mu in 0usize..6, mp in 0usize..6) {
            prop_assert!(satisfies(&filter_sparse(&log, mu, mp), mu, mp));
        }
    }
}
