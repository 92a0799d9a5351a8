//! Parsing of call-detail and card-transaction logs into count matrices.
//!
//! Input CSV layouts:
//!
//! | file        | header                            |
//! |-------------|-----------------------------------|
//! | `cdr.csv`   | `user_id,tower_id,timestamp`      |
//! | `ccr.csv`   | `user_id,mcc,amount,timestamp`    |
//! | `towers.csv`| `tower_id,lat,lon`                |
//!
//! Timestamps are ISO-8601; values without an offset are read as UTC.
//! Malformed rows are reported with their line number and skipped. A CDR row
//! naming a tower that is not in the registry is skipped and counted.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{Index, SparseCountMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrEvent {
    pub user_id: String,
    pub tower_id: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcrEvent {
    pub user_id: String,
    pub mcc: String,
    pub amount: f64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerRecord {
    pub tower_id: String,
    pub lat: f64,
    pub lon: f64,
}

/// A rejected input row. `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseReport<T> {
    pub events: Vec<T>,
    pub errors: Vec<RowError>,
    /// Rows skipped because their tower is not in the registry.
    pub unknown_towers: usize,
}

impl<T> ParseReport<T> {
    pub fn skipped(&self) -> usize {
        self.errors.len() + self.unknown_towers
    }
}

pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S"))
        .ok()
        .map(|naive| naive.and_utc())
}

struct Columns {
    positions: Vec<usize>,
}

impl Columns {
    fn resolve(headers: &csv::StringRecord, required: &[&str]) -> Result<Self> {
        let positions = required
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h.trim() == *name)
                    .ok_or_else(|| Error::Parse(format!("missing header column {name:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Columns { positions })
    }

    fn field<'r>(&self, record: &'r csv::StringRecord, i: usize) -> &'r str {
        record.get(self.positions[i]).unwrap_or("").trim()
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).from_reader(input)
}

/// Parses `user_id,tower_id,timestamp` rows, keeping file order.
pub fn parse_cdr<R: Read>(input: R, towers: &Index) -> Result<ParseReport<CdrEvent>> {
    let mut rdr = reader(input);
    let cols = Columns::resolve(rdr.headers()?, &["user_id", "tower_id", "timestamp"])?;
    let mut report = ParseReport {
        events: Vec::new(),
        errors: Vec::new(),
        unknown_towers: 0,
    };
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let user_id = cols.field(&record, 0);
        let tower_id = cols.field(&record, 1);
        let raw_ts = cols.field(&record, 2);
        if user_id.is_empty() || tower_id.is_empty() {
            report.errors.push(RowError { line, message: "empty user_id or tower_id".into() });
            continue;
        }
        let Some(timestamp) = parse_timestamp(raw_ts) else {
            report.errors.push(RowError { line, message: format!("bad timestamp {raw_ts:?}") });
            continue;
        };
        if towers.get(tower_id).is_none() {
            log::warn!("cdr line {line}: unknown tower {tower_id:?}, row skipped");
            report.unknown_towers += 1;
            continue;
        }
        report.events.push(CdrEvent {
            user_id: user_id.to_string(),
            tower_id: tower_id.to_string(),
            timestamp,
        });
    }
    Ok(report)
}

/// Parses `user_id,mcc,amount,timestamp` rows, keeping file order.
pub fn parse_ccr<R: Read>(input: R) -> Result<ParseReport<CcrEvent>> {
    let mut rdr = reader(input);
    let cols = Columns::resolve(rdr.headers()?, &["user_id", "mcc", "amount", "timestamp"])?;
    let mut report = ParseReport {
        events: Vec::new(),
        errors: Vec::new(),
        unknown_towers: 0,
    };
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let user_id = cols.field(&record, 0);
        let mcc = cols.field(&record, 1);
        let raw_amount = cols.field(&record, 2);
        let raw_ts = cols.field(&record, 3);
        if user_id.is_empty() || mcc.is_empty() {
            report.errors.push(RowError { line, message: "empty user_id or mcc".into() });
            continue;
        }
        let amount = match raw_amount.parse::<f64>() {
            Ok(a) if a.is_finite() && a >= 0.0 => a,
            _ => {
                report.errors.push(RowError { line, message: format!("bad amount {raw_amount:?}") });
                continue;
            }
        };
        let Some(timestamp) = parse_timestamp(raw_ts) else {
            report.errors.push(RowError { line, message: format!("bad timestamp {raw_ts:?}") });
            continue;
        };
        report.events.push(CcrEvent {
            user_id: user_id.to_string(),
            mcc: mcc.to_string(),
            amount,
            timestamp,
        });
    }
    Ok(report)
}

/// Parses the tower registry. Any malformed row is an error.
pub fn parse_towers<R: Read>(input: R) -> Result<Vec<TowerRecord>> {
    let mut rdr = reader(input);
    let cols = Columns::resolve(rdr.headers()?, &["tower_id", "lat", "lon"])?;
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let tower_id = cols.field(&record, 0);
        let parse = |j: usize| -> Result<f64> {
            let raw = cols.field(&record, j);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse(format!("towers line {line}: bad coordinate {raw:?}")))
        };
        if tower_id.is_empty() {
            return Err(Error::Parse(format!("towers line {line}: empty tower_id")));
        }
        out.push(TowerRecord {
            tower_id: tower_id.to_string(),
            lat: parse(1)?,
            lon: parse(2)?,
        });
    }
    Ok(out)
}

/// `w[u][t]` = number of distinct UTC calendar days on which user `u` placed
/// at least one call at tower `t`.
pub fn build_visit_matrix(
    events: &[CdrEvent],
    users: &Index,
    towers: &Index,
) -> Result<SparseCountMatrix> {
    let mut days: HashSet<(usize, usize, NaiveDate)> = HashSet::new();
    for e in events {
        let u = users
            .get(&e.user_id)
            .ok_or_else(|| Error::Shape(format!("user {:?} not in user index", e.user_id)))?;
        let t = towers
            .get(&e.tower_id)
            .ok_or_else(|| Error::Shape(format!("tower {:?} not in tower index", e.tower_id)))?;
        days.insert((u, t, e.timestamp.date_naive()));
    }
    SparseCountMatrix::from_triplets(
        users.len(),
        towers.len(),
        days.into_iter().map(|(u, t, _)| (u, t, 1)),
    )
}

/// Per-user transaction documents over an MCC (or MCC-amount) vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct MccDocuments {
    pub counts: SparseCountMatrix,
    pub vocabulary: Index,
}

/// Linear-interpolation quantile of sorted data at probability `q`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Builds one document per user. Without `amount_buckets` the token is the MCC;
/// with `B` buckets the token is `mcc@b`, where `b` counts how many of that
/// MCC's corpus-wide `j/B` amount quantiles the amount strictly exceeds.
pub fn build_mcc_documents(
    events: &[CcrEvent],
    users: &Index,
    amount_buckets: Option<usize>,
) -> Result<MccDocuments> {
    if let Some(b) = amount_buckets {
        if b < 2 {
            return Err(Error::InvalidConfig(format!("amount_buckets must be >= 2, got {b}")));
        }
    }

    let edges: BTreeMap<&str, Vec<f64>> = match amount_buckets {
        None => BTreeMap::new(),
        Some(buckets) => {
            let mut amounts: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for e in events {
                amounts.entry(e.mcc.as_str()).or_default().push(e.amount);
            }
            amounts
                .into_iter()
                .map(|(mcc, mut values)| {
                    values.sort_by(f64::total_cmp);
                    let cuts = (1..buckets)
                        .map(|j| quantile_sorted(&values, j as f64 / buckets as f64))
                        .collect();
                    (mcc, cuts)
                })
                .collect()
        }
    };

    let token = |e: &CcrEvent| -> String {
        match edges.get(e.mcc.as_str()) {
            None => e.mcc.clone(),
            Some(cuts) => {
                let bucket = cuts.iter().filter(|&&c| e.amount > c).count();
                format!("{}@{}", e.mcc, bucket)
            }
        }
    };

    let tokens: Vec<String> = events.iter().map(token).collect();
    let vocabulary = Index::from_unsorted(tokens.iter().cloned());
    let mut triplets = Vec::with_capacity(events.len());
    for (e, tok) in events.iter().zip(&tokens) {
        let u = users
            .get(&e.user_id)
            .ok_or_else(|| Error::Shape(format!("user {:?} not in user index", e.user_id)))?;
        triplets.push((u, vocabulary.get(tok).expect("token in vocabulary"), 1));
    }
    let counts = SparseCountMatrix::from_triplets(users.len(), vocabulary.len(), triplets)?;
    Ok(MccDocuments { counts, vocabulary })
}

/// Total spend per user divided by the number of weeks in the global window
/// `[min timestamp, max timestamp]`, with weeks = max(1, ceil(days / 7)).
pub fn average_weekly_spend(events: &[CcrEvent], users: &Index) -> Result<Vec<f64>> {
    let mut totals = vec![0.0; users.len()];
    if events.is_empty() {
        return Ok(totals);
    }
    let start = events.iter().map(|e| e.timestamp).min().expect("nonempty");
    let end = events.iter().map(|e| e.timestamp).max().expect("nonempty");
    let days = (end - start).num_seconds() as f64 / 86_400.0;
    let weeks = (days / 7.0).ceil().max(1.0);
    for e in events {
        let u = users
            .get(&e.user_id)
            .ok_or_else(|| Error::Shape(format!("user {:?} not in user index", e.user_id)))?;
        totals[u] += e.amount;
    }
    Ok(totals.into_iter().map(|t| t / weeks).collect())
}

/// Aligned indices and count matrices for one corpus of logs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub users: Index,
    pub towers: Index,
    pub mccs: Index,
    pub visit_counts: SparseCountMatrix,
    pub mcc_counts: SparseCountMatrix,
}

impl Dataset {
    /// Users are the sorted union of ids seen in either log.
    pub fn build(
        cdr: &[CdrEvent],
        ccr: &[CcrEvent],
        towers: Index,
        amount_buckets: Option<usize>,
    ) -> Result<Self> {
        let users = Index::from_unsorted(
            cdr.iter()
                .map(|e| e.user_id.as_str())
                .chain(ccr.iter().map(|e| e.user_id.as_str())),
        );
        let visit_counts = build_visit_matrix(cdr, &users, &towers)?;
        let docs = build_mcc_documents(ccr, &users, amount_buckets)?;
        Ok(Dataset {
            users,
            towers,
            mccs: docs.vocabulary,
            visit_counts,
            mcc_counts: docs.counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_timestamp(s).unwrap()
    }

    fn cdr(u: &str, t: &str, when: &str) -> CdrEvent {
        CdrEvent { user_id: u.into(), tower_id: t.into(), timestamp: ts(when) }
    }

    fn ccr(u: &str, mcc: &str, amount: f64, when: &str) -> CcrEvent {
        CcrEvent { user_id: u.into(), mcc: mcc.into(), amount, timestamp: ts(when) }
    }

    fn registry() -> Index {
        Index::from_ordered(["t1", "t2", "t3", "t4"]).unwrap()
    }

    #[test]
    fn single_valid_row() {
        let csv = "user_id,tower_id,timestamp\nu1,t1,2015-03-01T10:00:00Z\n";
        let r = parse_cdr(csv.as_bytes(), &registry()).unwrap();
        assert_eq!(r.events, vec![cdr("u1", "t1", "2015-03-01T10:00:00Z")]);
        assert_eq!(r.skipped(), 0);
    }

    #[test]
    fn header_only_gives_no_events() {
        let r = parse_cdr("user_id,tower_id,timestamp\n".as_bytes(), &registry()).unwrap();
        assert!(r.events.is_empty());
    }

    #[test]
    fn bad_timestamp_is_skipped_with_line() {
        let csv = "user_id,tower_id,timestamp\nu1,t1,yesterday\nu2,t2,2015-03-01T00:00:00Z\n";
        let r = parse_cdr(csv.as_bytes(), &registry()).unwrap();
        assert_eq!(r.events.len(), 1);
        assert_eq!(r.skipped(), 1);
        assert_eq!(r.errors[0].line, 2);
    }

    #[test]
    fn unknown_tower_is_counted() {
        let csv = "user_id,tower_id,timestamp\nu1,t9,2015-03-01T10:00:00Z\n";
        let r = parse_cdr(csv.as_bytes(), &registry()).unwrap();
        assert!(r.events.is_empty());
        assert_eq!(r.unknown_towers, 1);
        assert!(r.errors.is_empty());
    }

    #[test]
    fn missing_header_is_an_error() {
        assert!(parse_cdr("a,b,c\n".as_bytes(), &registry()).is_err());
    }

    #[test]
    fn ccr_rejects_negative_amount_and_empty_mcc() {
        let csv = "user_id,mcc,amount,timestamp\n\
                   u1,5411,-3,2015-03-01T00:00:00Z\n\
                   u1,,3,2015-03-01T00:00:00Z\n\
                   u1,5411,3.5,2015-03-01T00:00:00Z\n";
        let r = parse_ccr(csv.as_bytes()).unwrap();
        assert_eq!(r.events.len(), 1);
        assert_eq!(r.errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn towers_registry_parses() {
        let csv = "tower_id,lat,lon\nt1,19.4,-99.1\nt2,19.5,-99.2\n";
        let t = parse_towers(csv.as_bytes()).unwrap();
        assert_eq!(t.len(), 2);
        assert!(parse_towers("tower_id,lat,lon\nt1,x,1\n".as_bytes()).is_err());
    }

    #[test]
    fn same_day_calls_count_once() {
        let users = Index::from_ordered(["u1"]).unwrap();
        let ev = vec![
            cdr("u1", "t1", "2015-03-01T08:00:00Z"),
            cdr("u1", "t1", "2015-03-01T12:00:00Z"),
            cdr("u1", "t1", "2015-03-01T23:59:59Z"),
        ];
        let w = build_visit_matrix(&ev, &users, &registry()).unwrap();
        assert_eq!(w.get(0, 0), 1);
    }

    #[test]
    fn two_days_count_twice() {
        let users = Index::from_ordered(["u1"]).unwrap();
        let ev = vec![
            cdr("u1", "t1", "2015-03-01T23:00:00Z"),
            cdr("u1", "t1", "2015-03-02T01:00:00Z"),
        ];
        let w = build_visit_matrix(&ev, &users, &registry()).unwrap();
        assert_eq!(w.get(0, 0), 2);
    }

    fn random_cdr(seed: u64, n_events: usize) -> Vec<CdrEvent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_events)
            .map(|_| {
                let u = format!("u{}", rng.gen_range(1..=3));
                let t = format!("t{}", rng.gen_range(1..=4));
                let day = rng.gen_range(1..=3);
                let hour = rng.gen_range(0..24);
                cdr(&u, &t, &format!("2015-03-0{day}T{hour:02}:00:00Z"))
            })
            .collect()
    }

    #[test]
    fn visit_matrix_matches_day_set_oracle() {
        let users = Index::from_ordered(["u1", "u2", "u3"]).unwrap();
        for seed in 0..5 {
            let ev = random_cdr(seed, 10);
            let w = build_visit_matrix(&ev, &users, &registry()).unwrap();
            let mut oracle: HashMap<(String, String), HashSet<NaiveDate>> = HashMap::new();
            for e in &ev {
                oracle
                    .entry((e.user_id.clone(), e.tower_id.clone()))
                    .or_default()
                    .insert(e.timestamp.date_naive());
            }
            for u in 0..3 {
                for t in 0..4 {
                    let key = (users.id(u).to_string(), registry().id(t).to_string());
                    let expect = oracle.get(&key).map_or(0, |s| s.len() as u64);
                    assert_eq!(w.get(u, t), expect);
                }
            }
        }
    }

    #[test]
    fn mcc_counts_plain_tokens() {
        let users = Index::from_ordered(["u1"]).unwrap();
        let ev = vec![
            ccr("u1", "5411", 10.0, "2015-03-01T00:00:00Z"),
            ccr("u1", "5411", 20.0, "2015-03-02T00:00:00Z"),
        ];
        let docs = build_mcc_documents(&ev, &users, None).unwrap();
        let col = docs.vocabulary.get("5411").unwrap();
        assert_eq!(docs.counts.get(0, col), 2);
    }

    #[test]
    fn mcc_amount_buckets_split_at_median() {
        let users = Index::from_ordered(["u1", "u2"]).unwrap();
        let ev = vec![
            ccr("u1", "5411", 10.0, "2015-03-01T00:00:00Z"),
            ccr("u1", "5411", 1000.0, "2015-03-01T00:00:00Z"),
            ccr("u2", "5411", 100.0, "2015-03-01T00:00:00Z"),
        ];
        let docs = build_mcc_documents(&ev, &users, Some(2)).unwrap();
        let lo = docs.vocabulary.get("5411@0").unwrap();
        let hi = docs.vocabulary.get("5411@1").unwrap();
        assert_eq!(docs.counts.get(0, lo), 1);
        assert_eq!(docs.counts.get(0, hi), 1);
        assert!(matches!(
            build_mcc_documents(&ev, &users, Some(1)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn mcc_counts_match_tally_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let names: Vec<String> = (0..5).map(|i| format!("u{i}")).collect();
        let users = Index::from_ordered(names.clone()).unwrap();
        let mccs = ["5411", "5812", "4121"];
        let ev: Vec<CcrEvent> = (0..60)
            .map(|_| {
                let u = &names[rng.gen_range(0..5)];
                let m = mccs[rng.gen_range(0..3)];
                ccr(u, m, rng.gen_range(1.0..100.0), "2015-03-01T00:00:00Z")
            })
            .collect();
        let docs = build_mcc_documents(&ev, &users, None).unwrap();
        let mut tally: HashMap<(&str, &str), u64> = HashMap::new();
        for e in &ev {
            *tally.entry((e.user_id.as_str(), e.mcc.as_str())).or_default() += 1;
        }
        for (u, name) in names.iter().enumerate() {
            for m in mccs {
                let expect = tally.get(&(name.as_str(), m)).copied().unwrap_or(0);
                let got = docs.vocabulary.get(m).map_or(0, |c| docs.counts.get(u, c));
                assert_eq!(got, expect);
            }
        }
        let per_user: Vec<u64> = names
            .iter()
            .map(|n| ev.iter().filter(|e| &e.user_id == n).count() as u64)
            .collect();
        assert_eq!(docs.counts.row_sums(), per_user);
    }

    #[test]
    fn weekly_spend_one_week() {
        let users = Index::from_ordered(["u1", "u2"]).unwrap();
        let ev = vec![
            ccr("u1", "5411", 30.0, "2015-03-01T00:00:00Z"),
            ccr("u1", "5411", 40.0, "2015-03-08T00:00:00Z"),
        ];
        let spend = average_weekly_spend(&ev, &users).unwrap();
        assert_eq!(spend, vec![70.0, 0.0]);
    }

    #[test]
    fn weekly_spend_three_weeks() {
        let users = Index::from_ordered(["a", "b", "c"]).unwrap();
        let ev = vec![
            ccr("a", "1", 12.0, "2015-03-01T00:00:00Z"),
            ccr("b", "1", 30.0, "2015-03-10T00:00:00Z"),
            ccr("a", "1", 6.0, "2015-03-15T00:00:00Z"),
            ccr("c", "1", 9.0, "2015-03-22T00:00:00Z"),
        ];
        let spend = average_weekly_spend(&ev, &users).unwrap();
        assert_eq!(spend, vec![18.0 / 3.0, 30.0 / 3.0, 9.0 / 3.0]);
    }

    proptest! {
        #[test]
        fn visit_matrix_is_order_invariant_and_bounded(seed in 0u64..500, n in 0usize..40) {
            let users = Index::from_ordered(["u1", "u2", "u3"]).unwrap();
            let mut ev = random_cdr(seed, n);
            let w = build_visit_matrix(&ev, &users, &registry()).unwrap();
            prop_assert!(w.total() <= ev.len() as u64);
            let triples: HashSet<_> = ev
                .iter()
                .map(|e| (e.user_id.clone(), e.tower_id.clone(), e.timestamp.date_naive()))
                .collect();
            prop_assert_eq!(w.total(), triples.len() as u64);
            ev.reverse();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
            for i in (1..ev.len()).rev() {
                ev.swap(i, rng.gen_range(0..=i));
            }
            prop_assert_eq!(build_visit_matrix(&ev, &users, &registry()).unwrap(), w);
        }
    }
}
