//! Dataset containers, CSV schemas and validation.
//!
//! Category codes are 1-based (0 is invalid). Class labels produced by the
//! latent class stage are 0-based indices into the fitted classes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Formats a real with 17 significant digits so that parsing it back is exact.
pub fn fmt_real(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Row-major matrix of 1-based categorical codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Responses {
    n_rows: usize,
    n_items: usize,
    codes: Vec<u16>,
}

impl Responses {
    pub fn new(n_rows: usize, n_items: usize, codes: Vec<u16>) -> Result<Self> {
        if codes.len() != n_rows * n_items {
            return Err(Error::DimensionMismatch(format!(
                "{} codes for a {}x{} response matrix",
                codes.len(),
                n_rows,
                n_items
            )));
        }
        Ok(Self { n_rows, n_items, codes })
    }

    pub fn from_rows(rows: &[Vec<u16>]) -> Result<Self> {
        let n_items = rows.first().map_or(0, |r| r.len());
        let mut codes = Vec::with_capacity(rows.len() * n_items);
        for r in rows {
            if r.len() != n_items {
                return Err(Error::DimensionMismatch("ragged response rows".into()));
            }
            codes.extend_from_slice(r);
        }
        Self::new(rows.len(), n_items, codes)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn row(&self, i: usize) -> &[u16] {
        &self.codes[i * self.n_items..(i + 1) * self.n_items]
    }

    pub fn get(&self, i: usize, j: usize) -> u16 {
        self.codes[i * self.n_items + j]
    }

    /// Largest code seen in each column.
    pub fn column_maxima(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.n_items];
        for i in 0..self.n_rows {
            for (j, &c) in self.row(i).iter().enumerate() {
                out[j] = out[j].max(c as usize);
            }
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut codes = Vec::with_capacity(idx.len() * self.n_items);
        for &i in idx {
            codes.extend_from_slice(self.row(i));
        }
        Self { n_rows: idx.len(), n_items: self.n_items, codes }
    }

    fn check_codes(&self, category_counts: &[usize]) -> Result<()> {
        for i in 0..self.n_rows {
            for (j, &c) in self.row(i).iter().enumerate() {
                if c == 0 || c as usize > category_counts[j] {
                    return Err(Error::OutOfRangeCategory {
                        row: i,
                        column: format!("m{}", j + 1),
                        value: c as i64,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Expert survey: group covariates, manifest responses and binary opinions.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    pub x: DMatrix<f64>,
    pub responses: Responses,
    pub opinions: Vec<u8>,
    pub category_counts: Vec<usize>,
}

impl SurveyDataset {
    pub fn new(
        x: DMatrix<f64>,
        responses: Responses,
        opinions: Vec<u8>,
        category_counts: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self { x, responses, opinions, category_counts };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_experts(&self) -> usize {
        self.opinions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.opinions.len();
        if n == 0 {
            return Err(Error::InvalidDataset("survey has no experts".into()));
        }
        if self.x.nrows() != n || self.responses.n_rows() != n {
            return Err(Error::InvalidDataset("survey row counts differ".into()));
        }
        if self.category_counts.len() != self.responses.n_items() {
            return Err(Error::InvalidDataset(
                "category_counts length differs from the number of manifest variables".into(),
            ));
        }
        if let Some(j) = self.category_counts.iter().position(|&k| k == 0) {
            return Err(Error::InvalidDataset(format!("m{} has no categories", j + 1)));
        }
        self.responses.check_codes(&self.category_counts)?;
        for (i, &o) in self.opinions.iter().enumerate() {
            if o > 1 {
                return Err(Error::OutOfRangeCategory {
                    row: i,
                    column: "opinion".into(),
                    value: o as i64,
                });
            }
        }
        check_finite(&self.x, "x")
    }
}

/// Observed participants after truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedDataset {
    pub y1: DVector<f64>,
    pub w: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
    /// Columns of `x` that enter the selection index directly.
    pub x_contextual_idx: Vec<usize>,
    pub responses: Responses,
}

impl TruncatedDataset {
    pub fn new(
        y1: DVector<f64>,
        w: DMatrix<f64>,
        z: DMatrix<f64>,
        x: DMatrix<f64>,
        x_contextual_idx: Vec<usize>,
        responses: Responses,
    ) -> Result<Self> {
        let ds = Self { y1, w, z, x, x_contextual_idx, responses };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y1.len();
        if self.w.nrows() != n
            || self.z.nrows() != n
            || self.x.nrows() != n
            || self.responses.n_rows() != n
        {
            return Err(Error::InvalidDataset("truncated row counts differ".into()));
        }
        let lx = self.x.ncols();
        let mut idx = self.x_contextual_idx.clone();
        idx.sort_unstable();
        idx.dedup();
        if idx.len() != self.x_contextual_idx.len() || idx.iter().any(|&c| c >= lx) {
            return Err(Error::InvalidDataset("contextual indices invalid".into()));
        }
        if idx.len() >= lx {
            return Err(Error::InvalidDataset(
                "contextual columns must be a strict subset of x".into(),
            ));
        }
        for i in 0..n {
            for (j, &c) in self.responses.row(i).iter().enumerate() {
                if c == 0 {
                    return Err(Error::OutOfRangeCategory {
                        row: i,
                        column: format!("m{}", j + 1),
                        value: 0,
                    });
                }
            }
        }
        if self.y1.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("y1".into()));
        }
        check_finite(&self.w, "w")?;
        check_finite(&self.z, "z")?;
        check_finite(&self.x, "x")
    }

    /// Contextual covariates as an n × |idx| matrix.
    pub fn x_contextual(&self) -> DMatrix<f64> {
        self.x.select_columns(self.x_contextual_idx.iter())
    }
}

/// A dataset paired with 0-based class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<D> {
    pub base: D,
    pub labels: Vec<usize>,
    pub k: usize,
}

pub trait RowCount {
    fn row_count(&self) -> usize;
}

impl RowCount for SurveyDataset {
    fn row_count(&self) -> usize {
        self.n_experts()
    }
}

impl RowCount for TruncatedDataset {
    fn row_count(&self) -> usize {
        self.n()
    }
}

impl<D: RowCount> LabeledDataset<D> {
    pub fn new(base: D, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != base.row_count() {
            return Err(Error::InvalidDataset("label count differs from row count".into()));
        }
        if k == 0 || labels.iter().any(|&l| l >= k) {
            return Err(Error::InvalidDataset("label out of range".into()));
        }
        Ok(Self { base, labels, k })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Schema {
    Survey,
    Truncated { contextual: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Survey(SurveyDataset),
    Truncated(TruncatedDataset),
}

fn check_finite(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput(name.into()))
    }
}

/// Indices of header columns named `{prefix}1..{prefix}L`, in order.
fn prefixed(header: &[String], prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(pos, name)| {
            let rest = name.strip_prefix(prefix)?;
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            rest.parse::<usize>().ok().map(|n| (n, pos))
        })
        .collect();
    found.sort_unstable();
    for (expect, &(n, _)) in found.iter().enumerate() {
        if n != expect + 1 {
            return Err(Error::MissingColumn { column: format!("{}{}", prefix, expect + 1) });
        }
    }
    Ok(found.into_iter().map(|(_, pos)| pos).collect())
}

fn named(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn { column: name.into() })
}

fn parse_real(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::NonNumericCell {
        row,
        column: column.into(),
        value: cell.into(),
    })
}

fn parse_code(cell: &str, row: usize, column: &str) -> Result<u16> {
    let v: i64 = cell.trim().parse().map_err(|_| Error::NonNumericCell {
        row,
        column: column.into(),
        value: cell.into(),
    })?;
    if v < 1 || v > u16::MAX as i64 {
        return Err(Error::OutOfRangeCategory { row, column: column.into(), value: v });
    }
    Ok(v as u16)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

impl Table {
    fn reals(&self, cols: &[usize]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.rows.len(), cols.len());
        for (i, row) in self.rows.iter().enumerate() {
            for (c, &pos) in cols.iter().enumerate() {
                m[(i, c)] = parse_real(&row[pos], i, &self.header[pos])?;
            }
        }
        Ok(m)
    }

    fn codes(&self, cols: &[usize]) -> Result<Responses> {
        let mut codes = Vec::with_capacity(self.rows.len() * cols.len());
        for (i, row) in self.rows.iter().enumerate() {
            for &pos in cols {
                codes.push(parse_code(&row[pos], i, &self.header[pos])?);
            }
        }
        Responses::new(self.rows.len(), cols.len(), codes)
    }
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    match schema {
        Schema::Survey => load_survey(path).map(Dataset::Survey),
        Schema::Truncated { contextual } => {
            load_truncated(path, contextual.clone()).map(Dataset::Truncated)
        }
    }
}

pub fn load_survey(path: &Path) -> Result<SurveyDataset> {
    let t = read_table(path)?;
    let xc = prefixed(&t.header, "x")?;
    let mc = prefixed(&t.header, "m")?;
    let oc = named(&t.header, "opinion")?;
    let x = t.reals(&xc)?;
    let responses = t.codes(&mc)?;
    let mut opinions = Vec::with_capacity(t.rows.len());
    for (i, row) in t.rows.iter().enumerate() {
        let v: i64 = row[oc].trim().parse().map_err(|_| Error::NonNumericCell {
            row: i,
            column: "opinion".into(),
            value: row[oc].clone(),
        })?;
        if v != 0 && v != 1 {
            return Err(Error::OutOfRangeCategory { row: i, column: "opinion".into(), value: v });
        }
        opinions.push(v as u8);
    }
    let category_counts = responses.column_maxima();
    SurveyDataset::new(x, responses, opinions, category_counts)
}

pub fn load_truncated(path: &Path, contextual: Vec<usize>) -> Result<TruncatedDataset> {
    let t = read_table(path)?;
    let yc = named(&t.header, "y1")?;
    let wc = prefixed(&t.header, "w")?;
    let zc = prefixed(&t.header, "z")?;
    let xc = prefixed(&t.header, "x")?;
    let mc = prefixed(&t.header, "m")?;
    let y1 = t.reals(&[yc])?.column(0).into_owned();
    TruncatedDataset::new(y1, t.reals(&wc)?, t.reals(&zc)?, t.reals(&xc)?, contextual, t.codes(&mc)?)
}

fn write_lines(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        writeln!(out, "{}", r.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn names(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

pub fn save_survey(ds: &SurveyDataset, path: &Path) -> Result<()> {
    let lx = ds.x.ncols();
    let j = ds.responses.n_items();
    let mut header: Vec<String> = names("x", lx).chain(names("m", j)).collect();
    header.push("opinion".into());
    let rows = (0..ds.n_experts()).map(|i| {
        let mut r: Vec<String> = (0..lx).map(|c| fmt_real(ds.x[(i, c)])).collect();
        r.extend(ds.responses.row(i).iter().map(|c| c.to_string()));
        r.push(ds.opinions[i].to_string());
        r
    });
    write_lines(path, header, rows)
}

pub fn save_truncated(ds: &TruncatedDataset, path: &Path) -> Result<()> {
    let (lw, lz, lx, j) = (ds.w.ncols(), ds.z.ncols(), ds.x.ncols(), ds.responses.n_items());
    let header: Vec<String> = std::iter::once("y1".to_string())
        .chain(names("w", lw))
        .chain(names("z", lz))
        .chain(names("x", lx))
        .chain(names("m", j))
        .collect();
    let rows = (0..ds.n()).map(|i| {
        let mut r = vec![fmt_real(ds.y1[i])];
        r.extend((0..lw).map(|c| fmt_real(ds.w[(i, c)])));
        r.extend((0..lz).map(|c| fmt_real(ds.z[(i, c)])));
        r.extend((0..lx).map(|c| fmt_real(ds.x[(i, c)])));
        r.extend(ds.responses.row(i).iter().map(|c| c.to_string()));
        r
    });
    write_lines(path, header, rows)
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    match ds {
        Dataset::Survey(s) => save_survey(s, path),
        Dataset::Truncated(t) => save_truncated(t, path),
    }
}

/// Writes any serializable value as pretty-printed JSON.
pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn small_survey() -> SurveyDataset {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, -1.0, 2.5, 0.333, -7.0, 1e-9]);
        let r = Responses::from_rows(&[vec![1, 2], vec![3, 1], vec![2, 2]]).unwrap();
        SurveyDataset::new(x, r, vec![1, 0, 1], vec![3, 2]).unwrap()
    }

    #[test]
    fn survey_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = small_survey();
        save_survey(&s, &p).unwrap();
        let back = load_survey(&p).unwrap();
        assert_eq!(back.n_experts(), 3);
        assert_eq!(back, s);
    }

    #[test]
    fn truncated_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let t = TruncatedDataset::new(
            DVector::from_vec(vec![1.0 / 3.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[0.5, 1.0, std::f64::consts::PI, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.7, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            vec![1],
            Responses::from_rows(&[vec![1], vec![2]]).unwrap(),
        )
        .unwrap();
        save_truncated(&t, &p).unwrap();
        let back = load_truncated(&p, vec![1]).unwrap();
        assert_eq!(back, t);
        let header = fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("y1,w1,w2,z1,x1,x2,m1\n"));
    }

    #[test]
    fn opinion_two_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "x1,m1,opinion\n0.5,1,1\n0.2,2,2\n").unwrap();
        match load_survey(&p) {
            Err(Error::OutOfRangeCategory { row, column, value }) => {
                assert_eq!((row, column.as_str(), value), (1, "opinion", 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_code_and_text_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "x1,m1,opinion\n0.5,0,1\n").unwrap();
        assert!(matches!(load_survey(&p), Err(Error::OutOfRangeCategory { .. })));
        fs::write(&p, "x1,m1,opinion\nabc,1,1\n").unwrap();
        assert!(matches!(load_survey(&p), Err(Error::NonNumericCell { row: 0, .. })));
    }

    #[test]
    fn missing_columns_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "x1,m1\n0.5,1\n").unwrap();
        match load_survey(&p) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "opinion"),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&p, "x1,x3,m1,opinion\n0.5,1,1,1\n").unwrap();
        match load_survey(&p) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "x2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_path_is_io_error() {
        let s = small_survey();
        assert!(matches!(save_survey(&s, Path::new("")), Err(Error::Io(_))));
    }

    #[test]
    fn seven_item_layout_has_expected_columns() {
        let k = [3usize, 2, 3, 4, 3, 3, 2];
        let rows: Vec<Vec<u16>> = (0..4)
            .map(|i| k.iter().map(|&kj| (i % kj + 1) as u16).collect())
            .collect();
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let s = SurveyDataset::new(x, Responses::from_rows(&rows).unwrap(), vec![0, 1, 1, 0], k.to_vec())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        save_survey(&s, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        assert_eq!(header.len(), 2 + 7 + 1);
        assert_eq!(header[2..9], ["m1", "m2", "m3", "m4", "m5", "m6", "m7"]);
        assert_eq!(*header.last().unwrap(), "opinion");
    }

    #[test]
    fn contextual_must_be_strict_subset() {
        let mk = |ctx: Vec<usize>| {
            TruncatedDataset::new(
                DVector::from_vec(vec![1.0]),
                DMatrix::from_row_slice(1, 1, &[0.5]),
                DMatrix::from_row_slice(1, 1, &[0.7]),
                DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
                ctx,
                Responses::from_rows(&[vec![1]]).unwrap(),
            )
        };
        assert!(mk(vec![1]).is_ok());
        assert!(mk(vec![0, 1]).is_err());
        assert!(mk(vec![2]).is_err());
    }

    #[test]
    fn fmt_real_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 123456.789] {
            assert_eq!(fmt_real(v).parse::<f64>().unwrap(), v);
        }
    }
}
