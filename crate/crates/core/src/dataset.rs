//! Masked data model.
//!
//! A [`MaskedDataset`] holds `n` rows of `d` optionally-missing features and an
//! always-observed response. Rows are grouped by their missingness [`Pattern`],
//! an [`AdjustmentSet`] picks the patterns used to build adjustment statistics,
//! and [`project`] extracts the observed coordinates `(x^m, y)` of a row set.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{CamError, Result};

/// Largest supported feature dimension.
pub const MAX_DIM: usize = 30;

/// Missingness pattern `m ∈ {0,1}^d`; bit value 1 means the feature is missing.
///
/// Feature 1 is the most significant bit, so the derived ordering is the
/// lexicographic order of the canonical bit string.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pattern {
    d: u8,
    bits: u32,
}

impl Pattern {
    /// The all-observed pattern `0_d`.
    pub fn complete(d: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&d), "dimension out of range");
        Pattern { d: d as u8, bits: 0 }
    }

    /// Build a pattern from per-feature missing flags.
    pub fn from_missing(missing: &[bool]) -> Result<Self> {
        let d = missing.len();
        if d == 0 || d > MAX_DIM {
            return Err(CamError::Dimension(d));
        }
        let mut bits = 0u32;
        for (j, &miss) in missing.iter().enumerate() {
            if miss {
                bits |= 1 << (d - 1 - j);
            }
        }
        Ok(Pattern { d: d as u8, bits })
    }

    /// Pattern missing exactly the listed (0-based) features.
    pub fn missing_features(d: usize, features: &[usize]) -> Result<Self> {
        let mut flags = vec![false; d];
        for &j in features {
            if j >= d {
                return Err(CamError::FeatureOutOfRange { index: j, d });
            }
            flags[j] = true;
        }
        Pattern::from_missing(&flags)
    }

    /// Parse the canonical bit string, e.g. `"101"`.
    pub fn parse(s: &str) -> Result<Self> {
        let flags: Option<Vec<bool>> = s
            .chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect();
        match flags {
            Some(f) if !f.is_empty() && f.len() <= MAX_DIM => Pattern::from_missing(&f),
            _ => Err(CamError::InvalidPattern(s.to_string())),
        }
    }

    /// Canonical bit string, feature 1 first.
    pub fn encode(&self) -> String {
        (0..self.d())
            .map(|j| if self.is_missing(j) { '1' } else { '0' })
            .collect()
    }

    pub fn d(&self) -> usize {
        self.d as usize
    }

    /// Number of observed features `d_m`.
    pub fn d_m(&self) -> usize {
        self.d() - self.bits.count_ones() as usize
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn is_missing(&self, j: usize) -> bool {
        (self.bits >> (self.d() - 1 - j)) & 1 == 1
    }

    pub fn is_observed(&self, j: usize) -> bool {
        !self.is_missing(j)
    }

    pub fn is_complete(&self) -> bool {
        self.bits == 0
    }

    /// Observed feature indices (0-based) in increasing order.
    pub fn observed_features(&self) -> Vec<usize> {
        (0..self.d()).filter(|&j| self.is_observed(j)).collect()
    }

    /// Position of feature `j` inside the projected vector `x^m`.
    pub fn position_of(&self, j: usize) -> Option<usize> {
        if j >= self.d() || self.is_missing(j) {
            return None;
        }
        Some((0..j).filter(|&k| self.is_observed(k)).count())
    }

    /// Partial order: `self ≤ other` iff the missing set of `self` is contained in
    /// that of `other`.
    pub fn le(&self, other: &Pattern) -> bool {
        self.d == other.d && self.bits & !other.bits == 0
    }

    /// Entrywise minimum (intersection of the missing sets).
    pub fn pmin(&self, other: &Pattern) -> Pattern {
        debug_assert_eq!(self.d, other.d);
        Pattern {
            d: self.d,
            bits: self.bits & other.bits,
        }
    }

    /// Entrywise maximum (union of the missing sets).
    pub fn pmax(&self, other: &Pattern) -> Pattern {
        debug_assert_eq!(self.d, other.d);
        Pattern {
            d: self.d,
            bits: self.bits | other.bits,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pattern({})", self.encode())
    }
}

impl Serialize for Pattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.encode())
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Pattern::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// `n` observations of `d` optionally-missing features plus a response.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDataset {
    d: usize,
    feature_names: Vec<String>,
    response_name: String,
    // Row-major n×d; missing cells hold NaN.
    values: Vec<f64>,
    y: Vec<f64>,
    patterns: Vec<Pattern>,
}

impl MaskedDataset {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return Err(CamError::Dimension(d));
        }
        Ok(MaskedDataset {
            d,
            feature_names: (1..=d).map(|j| format!("x{j}")).collect(),
            response_name: "y".to_string(),
            values: Vec::new(),
            y: Vec::new(),
            patterns: Vec::new(),
        })
    }

    pub fn with_names(mut self, features: Vec<String>, response: String) -> Result<Self> {
        if features.len() != self.d {
            return Err(CamError::DimensionMismatch {
                expected: self.d,
                got: features.len(),
            });
        }
        self.feature_names = features;
        self.response_name = response;
        Ok(self)
    }

    /// Build from `(x, y)` rows.
    pub fn from_rows<I>(d: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<Option<f64>>, f64)>,
    {
        let mut ds = MaskedDataset::new(d)?;
        for (x, y) in rows {
            ds.push_row(&x, y)?;
        }
        Ok(ds)
    }

    pub fn push_row(&mut self, x: &[Option<f64>], y: f64) -> Result<()> {
        if x.len() != self.d {
            return Err(CamError::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        if !y.is_finite() {
            return Err(CamError::MissingResponse { row: self.n() + 1 });
        }
        let missing: Vec<bool> = x.iter().map(Option::is_none).collect();
        self.patterns.push(Pattern::from_missing(&missing)?);
        self.values.extend(x.iter().map(|v| v.unwrap_or(f64::NAN)));
        self.y.push(y);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        if self.patterns[i].is_missing(j) {
            None
        } else {
            Some(self.values[i * self.d + j])
        }
    }

    /// Raw feature row; missing cells are NaN.
    pub fn row_values(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn pattern(&self, i: usize) -> Pattern {
        self.patterns[i]
    }

    /// Observed-feature mask: bit for feature 1 is the most significant, 1 = observed.
    pub fn present_mask(&self, i: usize) -> u32 {
        let full = if self.d == 32 { u32::MAX } else { (1u32 << self.d) - 1 };
        !self.patterns[i].bits() & full
    }

    /// Copy with responses replaced by `f(y)`.
    pub fn map_responses(&self, f: impl Fn(f64) -> f64) -> MaskedDataset {
        let mut out = self.clone();
        for v in &mut out.y {
            *v = f(*v);
        }
        out
    }

    /// Copy restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> MaskedDataset {
        let mut out = MaskedDataset {
            d: self.d,
            feature_names: self.feature_names.clone(),
            response_name: self.response_name.clone(),
            values: Vec::with_capacity(rows.len() * self.d),
            y: Vec::with_capacity(rows.len()),
            patterns: Vec::with_capacity(rows.len()),
        };
        for &i in rows {
            out.values.extend_from_slice(self.row_values(i));
            out.y.push(self.y[i]);
            out.patterns.push(self.patterns[i]);
        }
        out
    }
}

/// Column layout and missing-value markers for [`ingest_csv`].
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub response: String,
    /// Feature columns in order; `None` takes every non-response column.
    pub features: Option<Vec<String>>,
    pub na_markers: Vec<String>,
}

impl CsvSchema {
    pub fn new(response: impl Into<String>) -> Self {
        CsvSchema {
            response: response.into(),
            features: None,
            na_markers: vec!["NA".to_string(), String::new()],
        }
    }
}

/// Read a headered CSV into a dataset. Row order is preserved.
pub fn ingest_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<MaskedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CamError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CamError::UnknownColumn(name.to_string()))
    };
    let y_col = col(&schema.response)?;
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..header.len()).filter(|&c| c != y_col).collect(),
    };
    if feature_cols.is_empty() {
        return Err(CamError::NoFeatures);
    }
    let names = feature_cols.iter().map(|&c| header[c].clone()).collect();
    let mut ds = MaskedDataset::new(feature_cols.len())?.with_names(names, schema.response.clone())?;

    let is_na = |s: &str| schema.na_markers.iter().any(|m| m == s);
    let parse = |row: usize, c: usize, s: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| CamError::NonNumeric {
                row,
                column: header[c].clone(),
                value: s.to_string(),
            })
    };

    let mut x = vec![None; feature_cols.len()];
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| CamError::Csv(format!("row {row}: {e}")))?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let ys = cell(y_col);
        if is_na(ys) {
            return Err(CamError::MissingResponse { row });
        }
        let y = parse(row, y_col, ys)?;
        for (slot, &c) in x.iter_mut().zip(&feature_cols) {
            let s = cell(c);
            *slot = if is_na(s) { None } else { Some(parse(row, c, s)?) };
        }
        ds.push_row(&x, y)?;
    }
    Ok(ds)
}

/// Partition of the row indices by missingness pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternGroups {
    d: usize,
    n: usize,
    groups: BTreeMap<Pattern, Vec<usize>>,
}

impl PatternGroups {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Rows with pattern `m` (0-based, increasing). Empty if none.
    pub fn group(&self, m: &Pattern) -> &[usize] {
        self.groups.get(m).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The complete cases `A_0`.
    pub fn complete(&self) -> &[usize] {
        self.group(&Pattern::complete(self.d))
    }

    pub fn n_m(&self, m: &Pattern) -> usize {
        self.group(m).len()
    }

    /// Non-empty groups in pattern order.
    pub fn iter(&self) -> impl Iterator<Item = (&Pattern, &Vec<usize>)> {
        self.groups.iter()
    }

    /// `Ā_m`: incomplete rows whose missing set is contained in that of `m`.
    pub fn integrated_rows(&self, m: &Pattern) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .groups
            .iter()
            .filter(|&(p, _)| !p.is_complete() && p.le(m))
            .flat_map(|(_, r)| r.iter().copied())
            .collect();
        rows.sort_unstable();
        rows
    }
}

pub fn group_by_pattern(ds: &MaskedDataset) -> PatternGroups {
    let mut groups: BTreeMap<Pattern, Vec<usize>> = BTreeMap::new();
    for i in 0..ds.n() {
        groups.entry(ds.pattern(i)).or_default().push(i);
    }
    PatternGroups {
        d: ds.d(),
        n: ds.n(),
        groups,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjustmentEntry {
    pub pattern: Pattern,
    /// Effective rows: `A_m`, or `Ā_m` with integration.
    pub rows: Vec<usize>,
}

/// The ordered pattern set `M` used for adjustment, with effective row sets.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjustmentSet {
    pub integrate: bool,
    entries: Vec<AdjustmentEntry>,
}

impl AdjustmentSet {
    pub fn empty() -> Self {
        AdjustmentSet {
            integrate: false,
            entries: Vec::new(),
        }
    }

    /// Build from explicit entries; sorts by pattern and rejects `0_d`.
    pub fn from_entries(mut entries: Vec<AdjustmentEntry>, integrate: bool) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| e.pattern.is_complete()) {
            return Err(CamError::InvalidPattern(e.pattern.encode()));
        }
        entries.sort_by_key(|e| e.pattern);
        Ok(AdjustmentSet { integrate, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AdjustmentEntry] {
        &self.entries
    }

    pub fn patterns(&self) -> Vec<Pattern> {
        self.entries.iter().map(|e| e.pattern).collect()
    }

    pub fn position(&self, m: &Pattern) -> Option<usize> {
        self.entries.iter().position(|e| e.pattern == *m)
    }

    pub fn rows(&self, m: &Pattern) -> Result<&[usize]> {
        self.position(m)
            .map(|k| self.entries[k].rows.as_slice())
            .ok_or_else(|| CamError::PatternNotInSet(m.encode()))
    }

    /// Keep only the listed patterns.
    pub fn restrict(&self, keep: &[Pattern]) -> AdjustmentSet {
        AdjustmentSet {
            integrate: self.integrate,
            entries: self
                .entries
                .iter()
                .filter(|e| keep.contains(&e.pattern))
                .cloned()
                .collect(),
        }
    }
}

/// Choose `M` from the observed incomplete patterns.
///
/// Without integration `m` is kept iff `n_m ≥ min_count`; with integration the
/// effective set is `Ā_m` and the threshold applies to its size.
pub fn select_adjustment_set(
    groups: &PatternGroups,
    min_count: usize,
    integrate: bool,
) -> Result<AdjustmentSet> {
    if groups.complete().is_empty() {
        return Err(CamError::NoCompleteCases);
    }
    let entries = groups
        .iter()
        .filter(|(p, _)| !p.is_complete())
        .filter_map(|(p, rows)| {
            let rows = if integrate {
                groups.integrated_rows(p)
            } else {
                rows.clone()
            };
            (rows.len() >= min_count).then_some(AdjustmentEntry { pattern: *p, rows })
        })
        .collect();
    AdjustmentSet::from_entries(entries, integrate)
}

/// One projected observation `(x^m, y)`.
#[derive(Clone, Copy, Debug)]
pub struct Rec<'a> {
    pub x: &'a [f64],
    pub y: f64,
}

/// `T_{A,m}`: the observed coordinates `(x^m, y)` of a row set, in row order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSample {
    pattern: Pattern,
    rows: Vec<usize>,
    d_m: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl ProjectedSample {
    /// Build directly from projected coordinates (row ids are `0..len`).
    pub fn from_parts(pattern: Pattern, x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(CamError::DimensionMismatch {
                expected: y.len(),
                got: x.len(),
            });
        }
        let d_m = pattern.d_m();
        if let Some(bad) = x.iter().find(|r| r.len() != d_m) {
            return Err(CamError::DimensionMismatch {
                expected: d_m,
                got: bad.len(),
            });
        }
        Ok(ProjectedSample {
            pattern,
            rows: (0..y.len()).collect(),
            d_m,
            x: x.into_iter().flatten().collect(),
            y,
        })
    }

    pub fn pattern(&self) -> Pattern {
        self.pattern
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d_m(&self) -> usize {
        self.d_m
    }

    /// Source row indices (0-based).
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d_m..(i + 1) * self.d_m]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    pub fn record(&self, i: usize) -> Rec<'_> {
        Rec {
            x: self.x(i),
            y: self.y[i],
        }
    }

    /// Sub-sample at the given positions.
    pub fn subset(&self, positions: &[usize]) -> ProjectedSample {
        let mut x = Vec::with_capacity(positions.len() * self.d_m);
        for &p in positions {
            x.extend_from_slice(self.x(p));
        }
        ProjectedSample {
            pattern: self.pattern,
            rows: positions.iter().map(|&p| self.rows[p]).collect(),
            d_m: self.d_m,
            x,
            y: positions.iter().map(|&p| self.y[p]).collect(),
        }
    }

    /// Copy with responses replaced.
    pub fn with_responses(&self, y: Vec<f64>) -> Result<ProjectedSample> {
        if y.len() != self.len() {
            return Err(CamError::DimensionMismatch {
                expected: self.len(),
                got: y.len(),
            });
        }
        Ok(ProjectedSample { y, ..self.clone() })
    }
}

/// Project rows `indices` onto the coordinates observed under `m`.
pub fn project(ds: &MaskedDataset, indices: &[usize], m: Pattern) -> Result<ProjectedSample> {
    if m.d() != ds.d() {
        return Err(CamError::DimensionMismatch {
            expected: ds.d(),
            got: m.d(),
        });
    }
    let observed = m.observed_features();
    let mut x = Vec::with_capacity(indices.len() * observed.len());
    let mut y = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= ds.n() || !ds.pattern(i).le(&m) {
            return Err(CamError::PatternIncompatible {
                row: i + 1,
                pattern: m.encode(),
            });
        }
        let row = ds.row_values(i);
        x.extend(observed.iter().map(|&j| row[j]));
        y.push(ds.y(i));
    }
    Ok(ProjectedSample {
        pattern: m,
        rows: indices.to_vec(),
        d_m: observed.len(),
        x,
        y,
    })
}
