//! Records with partially observed auxiliary (`X`) and primary (`L`) blocks,
//! CSV ingestion, stratum bookkeeping and target functionals `f(L)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{Pattern, PatternPair, MAX_PATTERN_LEN};

/// Largest `p + d` the estimators accept.
pub const MAX_TOTAL_VARIABLES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    x: Vec<Option<f64>>,
    l: Vec<Option<f64>>,
    r: Pattern,
    a: Pattern,
}

impl Record {
    pub fn new(x: Vec<Option<f64>>, l: Vec<Option<f64>>) -> Result<Self> {
        if x.is_empty() || l.is_empty() || x.len() > MAX_PATTERN_LEN || l.len() > MAX_PATTERN_LEN {
            return Err(Error::Argument(format!(
                "record blocks must have between 1 and {MAX_PATTERN_LEN} entries (got p={}, d={})",
                x.len(),
                l.len()
            )));
        }
        if let Some(v) = x.iter().chain(l.iter()).flatten().find(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite value {v} in record")));
        }
        let r = Pattern::new(&x.iter().map(Option::is_some).collect::<Vec<_>>())?;
        let a = Pattern::new(&l.iter().map(Option::is_some).collect::<Vec<_>>())?;
        Ok(Record { x, l, r, a })
    }

    #[inline]
    pub fn x(&self) -> &[Option<f64>] {
        &self.x
    }

    #[inline]
    pub fn l(&self) -> &[Option<f64>] {
        &self.l
    }

    /// Response pattern of `X`.
    #[inline]
    pub fn r(&self) -> Pattern {
        self.r
    }

    /// Response pattern of `L`.
    #[inline]
    pub fn a(&self) -> Pattern {
        self.a
    }

    #[inline]
    pub fn pair(&self) -> PatternPair {
        PatternPair::new(self.r, self.a)
    }

    #[inline]
    pub fn primary_complete(&self) -> bool {
        self.a.is_complete()
    }

    /// `L` as a dense vector; `None` unless every primary coordinate is observed.
    pub fn l_complete(&self) -> Option<Vec<f64>> {
        self.l.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    p: usize,
    d: usize,
    x_names: Vec<String>,
    l_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<Record>, x_names: Vec<String>, l_names: Vec<String>) -> Result<Self> {
        let p = x_names.len();
        let d = l_names.len();
        if records.is_empty() {
            return Err(Error::Argument("dataset must contain at least one record".into()));
        }
        if let Some((i, _)) = records
            .iter()
            .enumerate()
            .find(|(_, rec)| rec.x.len() != p || rec.l.len() != d)
        {
            return Err(Error::Argument(format!(
                "record {i} does not have p={p} auxiliary and d={d} primary entries"
            )));
        }
        Ok(Dataset {
            records,
            p,
            d,
            x_names,
            l_names,
        })
    }

    /// Dataset with generated column names `X1..Xp`, `L1..Ld`.
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Argument("dataset must contain at least one record".into()))?;
        let x_names = (1..=first.x.len()).map(|j| format!("X{j}")).collect();
        let l_names = (1..=first.l.len()).map(|j| format!("L{j}")).collect();
        Self::new(records, x_names, l_names)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn l_names(&self) -> &[String] {
        &self.l_names
    }

    pub fn complete_l_pattern(&self) -> Pattern {
        Pattern::ones(self.d).expect("d validated at construction")
    }

    /// New dataset made of the records at `indices` (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            p: self.p,
            d: self.d,
            x_names: self.x_names.clone(),
            l_names: self.l_names.clone(),
        }
    }

    pub fn check_estimator_dimensions(&self) -> Result<()> {
        if self.p + self.d > MAX_TOTAL_VARIABLES {
            return Err(Error::Config(format!(
                "p + d = {} exceeds the supported maximum of {MAX_TOTAL_VARIABLES}",
                self.p + self.d
            )));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.x_names.iter().chain(self.l_names.iter()))?;
        for rec in &self.records {
            w.write_record(rec.x.iter().chain(rec.l.iter()).map(|v| match v {
                Some(v) => format!("{v:?}"),
                None => String::new(),
            }))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Column roles and missing-value tokens for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub x: Vec<String>,
    pub l: Vec<String>,
    #[serde(default = "default_missing_tokens")]
    pub missing: Vec<String>,
}

pub fn default_missing_tokens() -> Vec<String> {
    vec![String::new(), "NA".to_string()]
}

impl CsvSchema {
    pub fn new(x: Vec<String>, l: Vec<String>) -> Self {
        CsvSchema {
            x,
            l,
            missing: default_missing_tokens(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(std::io::BufReader::new(file), schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    if schema.x.is_empty() || schema.l.is_empty() {
        return Err(Error::Schema(
            "schema must name at least one X column and one L column".into(),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let locate = |name: &String| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let x_cols = schema.x.iter().map(locate).collect::<Result<Vec<_>>>()?;
    let l_cols = schema.l.iter().map(locate).collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (row, result) in rdr.records().enumerate() {
        let line = result?;
        let parse = |col: usize, name: &str| -> Result<Option<f64>> {
            let cell = line.get(col).unwrap_or("");
            if schema.missing.iter().any(|t| t == cell) {
                return Ok(None);
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(Error::Parse {
                    row: row + 1,
                    column: name.to_string(),
                    message: format!("`{cell}` is not a finite real"),
                }),
            }
        };
        let x = x_cols
            .iter()
            .zip(&schema.x)
            .map(|(&c, name)| parse(c, name))
            .collect::<Result<Vec<_>>>()?;
        let l = l_cols
            .iter()
            .zip(&schema.l)
            .map(|(&c, name)| parse(c, name))
            .collect::<Result<Vec<_>>>()?;
        records.push(Record::new(x, l)?);
    }
    if records.is_empty() {
        return Err(Error::Schema("CSV contains no data rows".into()));
    }
    Dataset::new(records, schema.x.clone(), schema.l.clone())
}

/// Record indices grouped by stratum, plus available complete-case pools.
#[derive(Debug, Clone)]
pub struct StratumIndex {
    strata: BTreeMap<PatternPair, Vec<usize>>,
    pools: BTreeMap<Pattern, Vec<usize>>,
    complete: Vec<usize>,
}

impl StratumIndex {
    pub fn strata(&self) -> &BTreeMap<PatternPair, Vec<usize>> {
        &self.strata
    }

    pub fn stratum(&self, pair: &PatternPair) -> &[usize] {
        self.strata.get(pair).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The pool `{R >= r, A = 1_d}`; empty when `r` has no incomplete stratum.
    pub fn pool(&self, r: &Pattern) -> &[usize] {
        self.pools.get(r).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn pools(&self) -> &BTreeMap<Pattern, Vec<usize>> {
        &self.pools
    }

    /// Records with `A = 1_d`.
    pub fn complete_cases(&self) -> &[usize] {
        &self.complete
    }

    /// Strata with `a != 1_d` that contain at least one record, in canonical order.
    pub fn incomplete_pairs(&self) -> impl Iterator<Item = PatternPair> + '_ {
        self.strata.keys().copied().filter(PatternPair::is_incomplete)
    }
}

pub fn build_strata(ds: &Dataset) -> StratumIndex {
    let mut strata: BTreeMap<PatternPair, Vec<usize>> = BTreeMap::new();
    let mut complete = Vec::new();
    for (i, rec) in ds.records.iter().enumerate() {
        strata.entry(rec.pair()).or_default().push(i);
        if rec.primary_complete() {
            complete.push(i);
        }
    }
    let mut pools: BTreeMap<Pattern, Vec<usize>> = BTreeMap::new();
    for pair in strata.keys().filter(|p| p.is_incomplete()) {
        pools.entry(pair.r).or_insert_with(|| {
            complete
                .iter()
                .copied()
                .filter(|&i| ds.records[i].r.dominates(&pair.r))
                .collect()
        });
    }
    StratumIndex {
        strata,
        pools,
        complete,
    }
}

/// User-supplied `f`, evaluated at a complete `L`.
pub type CustomFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// The target `f` in `θ = E[f(L)]`. Coordinates are 0-based.
#[derive(Clone)]
pub enum Functional {
    Coordinate(usize),
    Average(Vec<usize>),
    Product(Vec<usize>),
    /// `I(L_j <= t_j for all listed j)`.
    JointThreshold {
        coords: Vec<usize>,
        thresholds: Vec<f64>,
    },
    Custom {
        name: String,
        func: CustomFn,
    },
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Functional::Coordinate(j) => write!(f, "Coordinate({j})"),
            Functional::Average(c) => write!(f, "Average({c:?})"),
            Functional::Product(c) => write!(f, "Product({c:?})"),
            Functional::JointThreshold { coords, thresholds } => {
                write!(f, "JointThreshold({coords:?} <= {thresholds:?})")
            }
            Functional::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl Functional {
    pub fn custom(name: impl Into<String>, func: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Functional::Custom {
            name: name.into(),
            func: Arc::new(func),
        }
    }

    /// Checks coordinate indices against `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        let coords: &[usize] = match self {
            Functional::Coordinate(j) => std::slice::from_ref(j),
            Functional::Average(c) | Functional::Product(c) => c,
            Functional::JointThreshold { coords, thresholds } => {
                if coords.len() != thresholds.len() {
                    return Err(Error::Config(
                        "joint threshold needs one threshold per coordinate".into(),
                    ));
                }
                if thresholds.iter().any(|t| t.is_nan()) {
                    return Err(Error::Config("thresholds must not be NaN".into()));
                }
                coords
            }
            Functional::Custom { .. } => return Ok(()),
        };
        if coords.is_empty() {
            return Err(Error::Config("functional needs at least one coordinate".into()));
        }
        if let Some(&j) = coords.iter().find(|&&j| j >= d) {
            return Err(Error::Config(format!(
                "functional refers to primary coordinate {} but d = {d}",
                j + 1
            )));
        }
        Ok(())
    }

    /// Evaluates `f` at a fully observed `L`.
    pub fn evaluate(&self, l: &[f64]) -> Result<f64> {
        let v = match self {
            Functional::Coordinate(j) => l[*j],
            Functional::Average(c) => c.iter().map(|&j| l[j]).sum::<f64>() / c.len() as f64,
            Functional::Product(c) => c.iter().map(|&j| l[j]).product(),
            Functional::JointThreshold { coords, thresholds } => {
                let inside = coords.iter().zip(thresholds).all(|(&j, &t)| l[j] <= t);
                if inside {
                    1.0
                } else {
                    0.0
                }
            }
            Functional::Custom { func, .. } => func(l),
        };
        if !v.is_finite() {
            return Err(Error::Degenerate(format!("f(L) = {v} is not finite")));
        }
        Ok(v)
    }

    /// Evaluates `f` on a record; errors unless `A = 1_d`.
    pub fn evaluate_record(&self, rec: &Record) -> Result<f64> {
        let l = rec.l_complete().ok_or_else(|| {
            Error::Precondition(format!(
                "f(L) requires all primary coordinates, record has A = {}",
                rec.a()
            ))
        })?;
        self.evaluate(&l)
    }

    /// Coordinates whose product equals `f`, when `f` is a pure product.
    pub fn product_coords(&self) -> Option<&[usize]> {
        match self {
            Functional::Coordinate(j) => Some(std::slice::from_ref(j)),
            Functional::Product(c) => Some(c),
            _ => None,
        }
    }
}
