//! Body-weight table ingestion: wide files with one row per mouse, long
//! format with one row per mouse-week, validation and per-group summaries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

pub const ID_COLUMN: &str = "mouseid";
pub const GROUP_COLUMN: &str = "grp";
pub const WEEK_COLUMN: &str = "tw";
pub const WEIGHT_COLUMN: &str = "weight";
const WEEK_PREFIX: &str = "bw";

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("weight columns must be bw1..bwW without gaps; found weeks {found:?}")]
    NonContiguousWeeks { found: Vec<u32> },
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("line {line}, column `{column}`: cannot parse `{value}` as a number")]
    BadNumber {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}: duplicate mouse id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("table has no data rows")]
    Empty,
    #[error("malformed table: {0}")]
    Malformed(String),
    #[error("long table failed validation: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct WideRow {
    pub mouse_id: String,
    pub group: u32,
    /// Weights in grams, index 0 is week 1.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WideDataset {
    pub rows: Vec<WideRow>,
    pub weeks: u32,
    /// Header columns that were not recognised and were skipped.
    pub ignored_columns: Vec<String>,
}

impl WideDataset {
    pub fn n_mice(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub mouse_id: String,
    pub group: u32,
    pub tw: u32,
    pub weight: f64,
}

/// One record per mouse per week, kept sorted by `(mouse_id, tw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongDataset {
    records: Vec<Record>,
    n_mice: usize,
}

impl LongDataset {
    /// Sorts the records; does not validate them (see [`validate_long`]).
    pub fn from_records(mut records: Vec<Record>) -> Self {
        records.sort_by(|a, b| a.mouse_id.cmp(&b.mouse_id).then(a.tw.cmp(&b.tw)));
        let n_mice = records
            .iter()
            .map(|r| r.mouse_id.as_str())
            .collect::<HashSet<_>>()
            .len();
        Self { records, n_mice }
    }

    /// Like [`LongDataset::from_records`] but rejects data with validation findings.
    pub fn try_from_records(records: Vec<Record>) -> Result<Self> {
        let d = Self::from_records(records);
        let report = validate_long(&d);
        if report.is_empty() {
            Ok(d)
        } else {
            Err(DataError::Invalid(report.to_string()))
        }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn n_obs(&self) -> usize {
        self.records.len()
    }

    pub fn n_mice(&self) -> usize {
        self.n_mice
    }

    /// Records grouped by mouse, in mouse-id order.
    pub fn by_mouse(&self) -> Vec<&[Record]> {
        self.records
            .chunk_by(|a, b| a.mouse_id == b.mouse_id)
            .collect()
    }

    /// Distinct group labels, ascending.
    pub fn group_levels(&self) -> Vec<u32> {
        let mut levels: Vec<u32> = self.records.iter().map(|r| r.group).collect();
        levels.sort_unstable();
        levels.dedup();
        levels
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ID_COLUMN},{GROUP_COLUMN},{WEEK_COLUMN},{WEIGHT_COLUMN}\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.mouse_id, r.group, r.tw, r.weight);
        }
        out
    }
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn parse_number<T: std::str::FromStr>(value: &str, line: usize, column: &str) -> Result<T> {
    value.parse().map_err(|_| DataError::BadNumber {
        line,
        column: column.to_string(),
        value: value.to_string(),
    })
}

fn parse_weight(value: &str, line: usize, column: &str) -> Result<f64> {
    let w: f64 = parse_number(value, line, column)?;
    if w.is_finite() {
        Ok(w)
    } else {
        Err(DataError::BadNumber {
            line,
            column: column.to_string(),
            value: value.to_string(),
        })
    }
}

/// Parses a wide table with header `mouseid,grp,bw1..bwW`.
pub fn parse_wide(text: &str) -> Result<WideDataset> {
    let mut rdr = reader(text);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Malformed(e.to_string()))?
        .clone();

    let mut id_col = None;
    let mut grp_col = None;
    let mut week_cols: BTreeMap<u32, usize> = BTreeMap::new();
    let mut ignored = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        let week = h
            .strip_prefix(WEEK_PREFIX)
            .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse::<u32>().ok());
        match (h, week) {
            (ID_COLUMN, _) => {
                if id_col.replace(i).is_some() {
                    return Err(DataError::DuplicateColumn(h.to_string()));
                }
            }
            (GROUP_COLUMN, _) => {
                if grp_col.replace(i).is_some() {
                    return Err(DataError::DuplicateColumn(h.to_string()));
                }
            }
            (_, Some(k)) => {
                if week_cols.insert(k, i).is_some() {
                    return Err(DataError::DuplicateColumn(h.to_string()));
                }
            }
            _ => ignored.push(h.to_string()),
        }
    }
    let id_col = id_col.ok_or_else(|| DataError::MissingColumn(ID_COLUMN.into()))?;
    let grp_col = grp_col.ok_or_else(|| DataError::MissingColumn(GROUP_COLUMN.into()))?;
    if week_cols.is_empty() {
        return Err(DataError::MissingColumn(format!("{WEEK_PREFIX}1")));
    }
    let found: Vec<u32> = week_cols.keys().copied().collect();
    if found.iter().enumerate().any(|(i, &k)| k as usize != i + 1) {
        return Err(DataError::NonContiguousWeeks { found });
    }
    let weeks = found.len() as u32;

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DataError::Malformed(e.to_string()))?;
        let mouse_id = rec.get(id_col).unwrap_or_default().to_string();
        if mouse_id.is_empty() {
            return Err(DataError::Malformed(format!("line {line}: empty mouse id")));
        }
        if !seen.insert(mouse_id.clone()) {
            return Err(DataError::DuplicateId { line, id: mouse_id });
        }
        let group = parse_number(rec.get(grp_col).unwrap_or_default(), line, GROUP_COLUMN)?;
        let weights = week_cols
            .iter()
            .map(|(k, &c)| {
                parse_weight(
                    rec.get(c).unwrap_or_default(),
                    line,
                    &format!("{WEEK_PREFIX}{k}"),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(WideRow {
            mouse_id,
            group,
            weights,
        });
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(WideDataset {
        rows,
        weeks,
        ignored_columns: ignored,
    })
}

/// Reshapes to long format; `tw` is the numeric suffix of each `bw<k>` column.
pub fn pivot_longer(w: &WideDataset) -> LongDataset {
    let records = w
        .rows
        .iter()
        .flat_map(|row| {
            row.weights
                .iter()
                .enumerate()
                .map(move |(k, &weight)| Record {
                    mouse_id: row.mouse_id.clone(),
                    group: row.group,
                    tw: k as u32 + 1,
                    weight,
                })
        })
        .collect();
    LongDataset::from_records(records)
}

/// Parses a long table with header `mouseid,grp,tw,weight` and validates it.
pub fn parse_long(text: &str) -> Result<LongDataset> {
    let mut rdr = reader(text);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Malformed(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let (id_col, grp_col, tw_col, w_col) = (
        col(ID_COLUMN)?,
        col(GROUP_COLUMN)?,
        col(WEEK_COLUMN)?,
        col(WEIGHT_COLUMN)?,
    );
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DataError::Malformed(e.to_string()))?;
        records.push(Record {
            mouse_id: rec.get(id_col).unwrap_or_default().to_string(),
            group: parse_number(rec.get(grp_col).unwrap_or_default(), line, GROUP_COLUMN)?,
            tw: parse_number(rec.get(tw_col).unwrap_or_default(), line, WEEK_COLUMN)?,
            weight: parse_weight(rec.get(w_col).unwrap_or_default(), line, WEIGHT_COLUMN)?,
        });
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    LongDataset::try_from_records(records)
}

/// Reads either layout, choosing by the presence of a `tw` column.
pub fn parse_any(text: &str) -> Result<LongDataset> {
    let first = text.lines().next().unwrap_or_default();
    if first.split(',').any(|h| h.trim() == WEEK_COLUMN) {
        parse_long(text)
    } else {
        parse_wide(text).map(|w| pivot_longer(&w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Finding {
    DuplicateObservation {
        mouse_id: String,
        tw: u32,
    },
    GroupSwitch {
        mouse_id: String,
        groups: Vec<u32>,
    },
    NonPositiveWeight {
        mouse_id: String,
        tw: u32,
        weight: f64,
    },
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::DuplicateObservation { mouse_id, tw } => {
                write!(f, "duplicate observation for {mouse_id} at week {tw}")
            }
            Finding::GroupSwitch { mouse_id, groups } => {
                write!(f, "mouse {mouse_id} appears in groups {groups:?}")
            }
            Finding::NonPositiveWeight {
                mouse_id,
                tw,
                weight,
            } => write!(
                f,
                "mouse {mouse_id} week {tw}: weight {weight} is not positive"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.findings.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_long(d: &LongDataset) -> ValidationReport {
    let mut findings = Vec::new();
    for mouse in d.by_mouse() {
        let id = &mouse[0].mouse_id;
        for pair in mouse.windows(2) {
            if pair[0].tw == pair[1].tw {
                findings.push(Finding::DuplicateObservation {
                    mouse_id: id.clone(),
                    tw: pair[0].tw,
                });
            }
        }
        let mut groups: Vec<u32> = mouse.iter().map(|r| r.group).collect();
        groups.sort_unstable();
        groups.dedup();
        if groups.len() > 1 {
            findings.push(Finding::GroupSwitch {
                mouse_id: id.clone(),
                groups,
            });
        }
        for r in mouse {
            if !(r.weight.is_finite() && r.weight > 0.0) {
                findings.push(Finding::NonPositiveWeight {
                    mouse_id: id.clone(),
                    tw: r.tw,
                    weight: r.weight,
                });
            }
        }
    }
    ValidationReport { findings }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanCell {
    pub group: u32,
    pub tw: u32,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeekMeans {
    pub cells: Vec<MeanCell>,
}

impl GroupWeekMeans {
    pub fn get(&self, group: u32, tw: u32) -> Option<&MeanCell> {
        self.cells.iter().find(|c| c.group == group && c.tw == tw)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("grp,tw,mean_weight,count\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{:.3},{}", c.group, c.tw, c.mean, c.count);
        }
        out
    }
}

/// Sample mean weight per (group, week), ordered by group then week.
pub fn group_week_means(d: &LongDataset) -> GroupWeekMeans {
    let mut acc: BTreeMap<(u32, u32), (f64, usize)> = BTreeMap::new();
    for r in d.records() {
        let e = acc.entry((r.group, r.tw)).or_default();
        e.0 += r.weight;
        e.1 += 1;
    }
    let cells = acc
        .into_iter()
        .map(|((group, tw), (sum, count))| MeanCell {
            group,
            tw,
            mean: sum / count as f64,
            count,
        })
        .collect();
    GroupWeekMeans { cells }
}

/// Regroups long records into per-mouse weight vectors keyed by mouse id.
pub fn trajectories(d: &LongDataset) -> HashMap<String, Vec<(u32, f64)>> {
    d.by_mouse()
        .into_iter()
        .map(|m| {
            (
                m[0].mouse_id.clone(),
                m.iter().map(|r| (r.tw, r.weight)).collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(weeks: u32) -> String {
        let cols: Vec<String> = (1..=weeks).map(|k| format!("bw{k}")).collect();
        format!("mouseid,grp,{}", cols.join(","))
    }

    fn wide_text(rows: &[(&str, u32, Vec<f64>)]) -> String {
        let w = rows[0].2.len() as u32;
        let mut s = header(w);
        s.push('\n');
        for (id, g, ws) in rows {
            let vals: Vec<String> = ws.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{id},{g},{}\n", vals.join(",")));
        }
        s
    }

    #[test]
    fn thirty_one_mice_by_twelve_weeks() {
        let rows: Vec<(String, u32, Vec<f64>)> = (0..31)
            .map(|i| {
                let g = 1 + (i / 10).min(2);
                (
                    format!("M{i:02}"),
                    g,
                    (1..=12).map(|k| 20.0 + k as f64).collect(),
                )
            })
            .collect();
        let borrowed: Vec<(&str, u32, Vec<f64>)> = rows
            .iter()
            .map(|(id, g, w)| (id.as_str(), *g, w.clone()))
            .collect();
        let w = parse_wide(&wide_text(&borrowed)).unwrap();
        assert_eq!((w.n_mice(), w.weeks), (31, 12));
        let long = pivot_longer(&w);
        assert_eq!(long.n_obs(), 372);
        assert_eq!(long.n_mice(), 31);
        assert!(validate_long(&long).is_empty());
    }

    #[test]
    fn single_row() {
        let w = parse_wide(&wide_text(&[("M1", 1, vec![20.0; 12])])).unwrap();
        assert_eq!((w.n_mice(), w.weeks), (1, 12));
    }

    #[test]
    fn week_gap_rejected() {
        let text = "mouseid,grp,bw1,bw2,bw3,bw4,bw5,bw7\nM1,1,1,2,3,4,5,6\n";
        assert!(matches!(
            parse_wide(text),
            Err(DataError::NonContiguousWeeks { .. })
        ));
    }

    #[test]
    fn header_errors() {
        assert_eq!(
            parse_wide("grp,bw1\n1,2\n"),
            Err(DataError::MissingColumn("mouseid".into()))
        );
        assert_eq!(
            parse_wide("mouseid,bw1\nM,2\n"),
            Err(DataError::MissingColumn("grp".into()))
        );
        assert!(matches!(
            parse_wide("mouseid,grp,bw1\nM1,1,abc\n"),
            Err(DataError::BadNumber { line: 2, .. })
        ));
        assert!(matches!(
            parse_wide("mouseid,grp,bw1\nM1,1,\n"),
            Err(DataError::BadNumber { .. })
        ));
        assert!(matches!(
            parse_wide("mouseid,grp,bw1\nM1,1,3\nM1,2,4\n"),
            Err(DataError::DuplicateId { line: 3, .. })
        ));
    }

    #[test]
    fn extra_columns_and_crlf() {
        let text = "mouseid,genotype,grp,bw2,bw1\r\nA,ob/ob,2,11.5,10\r\n";
        let w = parse_wide(text).unwrap();
        assert_eq!(w.ignored_columns, vec!["genotype".to_string()]);
        assert_eq!(w.rows[0].weights, vec![10.0, 11.5]);
        assert_eq!(w.rows[0].group, 2);
    }

    #[test]
    fn pivot_preserves_order() {
        let w = parse_wide(&wide_text(&[("M1", 1, vec![10.0, 11.0, 12.0])])).unwrap();
        let long = pivot_longer(&w);
        let pairs: Vec<(u32, f64)> = long.records().iter().map(|r| (r.tw, r.weight)).collect();
        assert_eq!(pairs, vec![(1, 10.0), (2, 11.0), (3, 12.0)]);
        assert_eq!(
            pivot_longer(&parse_wide(&wide_text(&[("M1", 1, vec![1.0; 12])])).unwrap()).records()
                [11]
            .tw,
            12
        );
    }

    fn rec(id: &str, group: u32, tw: u32, weight: f64) -> Record {
        Record {
            mouse_id: id.into(),
            group,
            tw,
            weight,
        }
    }

    #[test]
    fn validation_findings() {
        let d = LongDataset::from_records(vec![
            rec("M1", 1, 3, 10.0),
            rec("M1", 1, 3, 11.0),
            rec("M1", 1, 4, 12.0),
        ]);
        let r = validate_long(&d);
        assert_eq!(
            r.findings,
            vec![Finding::DuplicateObservation {
                mouse_id: "M1".into(),
                tw: 3
            }]
        );

        let d = LongDataset::from_records(vec![rec("M1", 1, 1, 10.0), rec("M1", 2, 2, 11.0)]);
        assert!(matches!(
            validate_long(&d).findings.as_slice(),
            [Finding::GroupSwitch { .. }]
        ));

        let d = LongDataset::from_records(vec![rec("M1", 1, 1, -1.0)]);
        assert!(matches!(
            validate_long(&d).findings.as_slice(),
            [Finding::NonPositiveWeight { .. }]
        ));
        assert!(LongDataset::try_from_records(vec![rec("M1", 1, 1, 0.0)]).is_err());
    }

    #[test]
    fn long_roundtrip_through_csv() {
        let d = LongDataset::from_records(vec![
            rec("B", 2, 2, 11.25),
            rec("A", 1, 1, 20.5),
            rec("B", 2, 1, 10.0),
        ]);
        let back = parse_long(&d.to_csv()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.records()[0].mouse_id, "A");
        assert_eq!(parse_any(&d.to_csv()).unwrap(), d);
    }

    #[test]
    fn means() {
        let d = LongDataset::from_records(vec![rec("A", 1, 1, 10.0), rec("A", 1, 2, 11.0)]);
        let m = group_week_means(&d);
        assert_eq!(m.cells.len(), 2);
        assert_eq!((m.cells[0].mean, m.cells[0].count), (10.0, 1));
        assert_eq!(m.cells[1].mean, 11.0);

        let d = LongDataset::from_records(vec![rec("A", 1, 1, 10.0), rec("B", 1, 1, 20.0)]);
        let m = group_week_means(&d);
        assert_eq!((m.cells[0].mean, m.cells[0].count), (15.0, 2));
    }

    proptest! {
        #[test]
        fn pivot_is_information_preserving(
            rows in prop::collection::vec((1u32..4, prop::collection::vec(1.0f64..100.0, 5)), 1..8)
        ) {
            let wide = WideDataset {
                rows: rows
                    .iter()
                    .enumerate()
                    .map(|(i, (g, w))| WideRow { mouse_id: format!("M{i}"), group: *g, weights: w.clone() })
                    .collect(),
                weeks: 5,
                ignored_columns: vec![],
            };
            let long = pivot_longer(&wide);
            prop_assert_eq!(long.n_obs(), wide.rows.len() * 5);
            let traj = trajectories(&long);
            for row in &wide.rows {
                let got: Vec<f64> = traj[&row.mouse_id].iter().map(|p| p.1).collect();
                prop_assert_eq!(&got, &row.weights);
            }
        }
    }
}
