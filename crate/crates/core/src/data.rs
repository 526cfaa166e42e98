//! Tabular records with fairness roles, CSV ingestion and stratified splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AttributeHierarchy;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(i64),
    Cat(String),
}

impl Value {
    pub fn cat(s: impl Into<String>) -> Self {
        Value::Cat(s.into())
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(n) => write!(f, "{n}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Sensitive,
    ProxySensitive,
    NonSensitive,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub kind: Kind,
    pub role: Role,
    /// Distinct values, sorted. Declared values plus everything observed at load.
    #[serde(default, rename = "values")]
    pub domain: Vec<Value>,
}

/// Role-annotated schema, as read from the sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(rename = "attribute")]
    pub attributes: Vec<Attribute>,
    /// Label value treated as the positive (advantaged) outcome.
    pub positive: Value,
    /// Sensitive value of the majority group; the most frequent value when omitted.
    #[serde(default)]
    pub majority: Option<Value>,
    /// Serialization template id.
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub hierarchy: Option<AttributeHierarchy>,
}

impl Schema {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut schema: Schema =
            toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        for attr in &mut schema.attributes {
            attr.domain = normalize_domain(attr.kind, std::mem::take(&mut attr.domain))?;
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute `{}`", a.name)));
            }
        }
        let labels = self.attributes.iter().filter(|a| a.role == Role::Label).count();
        if labels != 1 {
            return Err(Error::Schema(format!(
                "exactly one label attribute required, found {labels}"
            )));
        }
        let sensitive = self
            .attributes
            .iter()
            .filter(|a| a.role == Role::Sensitive)
            .count();
        if sensitive > 1 {
            return Err(Error::Schema(format!(
                "at most one sensitive attribute allowed, found {sensitive}"
            )));
        }
        if self.attributes[self.label_index()].kind != Kind::Categorical {
            return Err(Error::Schema("label attribute must be categorical".into()));
        }
        if let Some(h) = &self.hierarchy {
            h.validate(self)?;
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn label_index(&self) -> usize {
        self.attributes
            .iter()
            .position(|a| a.role == Role::Label)
            .expect("validated schema has a label")
    }

    pub fn sensitive_index(&self) -> Option<usize> {
        self.attributes.iter().position(|a| a.role == Role::Sensitive)
    }

    pub fn require_sensitive(&self) -> Result<usize> {
        self.sensitive_index()
            .ok_or_else(|| Error::Schema("no sensitive attribute declared".into()))
    }

    /// Proxy-sensitive attributes in declaration order.
    pub fn proxy_indices(&self) -> Vec<usize> {
        self.attributes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.role == Role::ProxySensitive)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn label(&self) -> &Attribute {
        &self.attributes[self.label_index()]
    }
}

fn normalize_domain(kind: Kind, values: Vec<Value>) -> Result<Vec<Value>> {
    let mut out = BTreeSet::new();
    for v in values {
        out.insert(match (kind, v) {
            (Kind::Numeric, Value::Cat(s)) => Value::Num(
                s.trim()
                    .parse()
                    .map_err(|_| Error::Schema(format!("`{s}` is not numeric")))?,
            ),
            (Kind::Categorical, Value::Num(n)) => Value::Cat(n.to_string()),
            (_, v) => v,
        });
    }
    Ok(out.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    /// One value per schema attribute, in schema order.
    pub values: Vec<Value>,
}

impl Record {
    pub fn get<'a>(&'a self, schema: &Schema, name: &str) -> Option<&'a Value> {
        schema.index_of(name).map(|i| &self.values[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented,
    Mixture,
    Test,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Augmented => "augmented",
            Provenance::Mixture => "mixture",
            Provenance::Test => "test",
        }
    }
}

/// Which side of a binary sensitive attribute a record falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Majority,
    Minority,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub records: Vec<Record>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(schema: Schema, records: Vec<Record>, provenance: Provenance) -> Self {
        Self {
            schema,
            records,
            provenance,
        }
    }

    pub fn size(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_of<'a>(&self, r: &'a Record) -> &'a Value {
        &r.values[self.schema.label_index()]
    }

    pub fn is_positive(&self, r: &Record) -> bool {
        *self.label_of(r) == self.schema.positive
    }

    pub fn by_id(&self, id: u64) -> Option<&Record> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
            .or_else(|| self.records.iter().find(|r| r.id == id))
    }

    /// Majority and minority values of a binary sensitive attribute.
    pub fn group_values(&self) -> Result<(Value, Value)> {
        let s = self.schema.require_sensitive()?;
        let domain = &self.schema.attributes[s].domain;
        if domain.len() != 2 {
            return Err(Error::Schema(format!(
                "sensitive attribute must be binary, has {} values",
                domain.len()
            )));
        }
        let majority = match &self.schema.majority {
            Some(v) if domain.contains(v) => v.clone(),
            Some(v) => {
                return Err(Error::Schema(format!(
                    "majority value `{v}` not in sensitive domain"
                )))
            }
            None => {
                let count = |v: &Value| self.records.iter().filter(|r| r.values[s] == *v).count();
                if count(&domain[1]) > count(&domain[0]) {
                    domain[1].clone()
                } else {
                    domain[0].clone()
                }
            }
        };
        let minority = domain.iter().find(|v| **v != majority).unwrap().clone();
        Ok((majority, minority))
    }

    pub fn group_of(&self, r: &Record) -> Result<Group> {
        let s = self.schema.require_sensitive()?;
        let (majority, _) = self.group_values()?;
        Ok(if r.values[s] == majority {
            Group::Majority
        } else {
            Group::Minority
        })
    }

    /// Records restricted to `ids`, keeping this dataset's order.
    pub fn subset(&self, ids: &BTreeSet<u64>, provenance: Provenance) -> Dataset {
        let records = self
            .records
            .iter()
            .filter(|r| ids.contains(&r.id))
            .cloned()
            .collect();
        Dataset::new(self.schema.clone(), records, provenance)
    }

    pub fn without(&self, other: &Dataset) -> Dataset {
        let drop: BTreeSet<u64> = other.records.iter().map(|r| r.id).collect();
        let records = self
            .records
            .iter()
            .filter(|r| !drop.contains(&r.id))
            .cloned()
            .collect();
        Dataset::new(self.schema.clone(), records, self.provenance)
    }

    /// Refresh every attribute domain from the records (keeping declared values).
    pub fn refresh_domains(&mut self) {
        for (i, attr) in self.schema.attributes.iter_mut().enumerate() {
            let mut set: BTreeSet<Value> = attr.domain.iter().cloned().collect();
            set.extend(self.records.iter().map(|r| r.values[i].clone()));
            attr.domain = set.into_iter().collect();
        }
    }

    pub fn check_conforms(&self) -> Result<()> {
        let n = self.schema.attributes.len();
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if r.values.len() != n {
                return Err(Error::Schema(format!("record {} has wrong arity", r.id)));
            }
            if !ids.insert(r.id) {
                return Err(Error::Schema(format!("duplicate record id {}", r.id)));
            }
            for (v, a) in r.values.iter().zip(&self.schema.attributes) {
                let ok = matches!(
                    (a.kind, v),
                    (Kind::Numeric, Value::Num(_)) | (Kind::Categorical, Value::Cat(_))
                );
                if !ok || (!a.domain.is_empty() && !a.domain.contains(v)) {
                    return Err(Error::Schema(format!(
                        "record {}: value `{v}` invalid for `{}`",
                        r.id, a.name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn is_missing(raw: &str) -> bool {
    raw.is_empty() || raw == "?"
}

/// Load a CSV with a header row against a role-annotated schema.
///
/// Columns not named by the schema are ignored. Lines starting with `#` are
/// comments. Ids are assigned in file order from 0.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let columns: Vec<usize> = schema
        .attributes
        .iter()
        .map(|a| {
            headers
                .iter()
                .position(|h| h == a.name)
                .ok_or_else(|| Error::MissingColumn(a.name.clone()))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let raw = result?;
        let mut values = Vec::with_capacity(columns.len());
        for (attr, &col) in schema.attributes.iter().zip(&columns) {
            let cell = raw.get(col).unwrap_or("");
            if is_missing(cell) {
                return Err(Error::MissingValue {
                    row,
                    column: attr.name.clone(),
                });
            }
            values.push(match attr.kind {
                Kind::Numeric => Value::Num(cell.parse().map_err(|_| {
                    Error::UnparseableNumeric {
                        row,
                        column: attr.name.clone(),
                        value: cell.to_string(),
                    }
                })?),
                Kind::Categorical => Value::Cat(cell.to_string()),
            });
        }
        records.push(Record {
            id: records.len() as u64,
            values,
        });
    }
    let mut d = Dataset::new(schema.clone(), records, Provenance::Original);
    d.refresh_domains();
    Ok(d)
}

/// Write records as CSV (schema columns plus a `provenance` column).
/// `comment`, when given, becomes a leading `#` line.
pub fn write_csv(d: &Dataset, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(c) = comment {
        writeln!(file, "#{c}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<&str> = d.schema.attributes.iter().map(|a| a.name.as_str()).collect();
    header.push("provenance");
    w.write_record(&header)?;
    for r in &d.records {
        let mut row: Vec<String> = r.values.iter().map(Value::to_string).collect();
        row.push(d.provenance.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// The leading `#` comment line of a file written by [`write_csv`], if any.
pub fn read_csv_comment(path: impl AsRef<Path>) -> Result<Option<String>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(file)
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    Ok(line
        .strip_prefix('#')
        .map(|s| s.trim_end_matches(['\r', '\n']).to_string()))
}

/// Counts per (sensitive value, label value) cell, over the full domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupLabelCounts {
    pub cells: BTreeMap<(Value, Value), usize>,
}

impl GroupLabelCounts {
    pub fn get(&self, group: &Value, label: &Value) -> usize {
        self.cells
            .get(&(group.clone(), label.clone()))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.cells.values().sum()
    }
}

pub fn group_label_counts(d: &Dataset) -> Result<GroupLabelCounts> {
    let s = d.schema.require_sensitive()?;
    let l = d.schema.label_index();
    let mut cells = BTreeMap::new();
    for g in &d.schema.attributes[s].domain {
        for y in &d.schema.attributes[l].domain {
            cells.insert((g.clone(), y.clone()), 0);
        }
    }
    for r in &d.records {
        *cells
            .entry((r.values[s].clone(), r.values[l].clone()))
            .or_insert(0) += 1;
    }
    Ok(GroupLabelCounts { cells })
}

/// Draw `per_cell` records from every (sensitive group x label) cell.
///
/// Within a cell the draw is a partial Fisher-Yates shuffle over the cell's
/// records in id order; the output is sorted by id.
pub fn stratified_test_sample(d: &Dataset, per_cell: usize, seed: u64) -> Result<Dataset> {
    let s = d.schema.require_sensitive()?;
    let l = d.schema.label_index();
    let mut chosen = BTreeSet::new();
    let mut rng = seed::rng(seed);
    for g in &d.schema.attributes[s].domain {
        for y in &d.schema.attributes[l].domain {
            let mut cell: Vec<u64> = d
                .records
                .iter()
                .filter(|r| r.values[s] == *g && r.values[l] == *y)
                .map(|r| r.id)
                .collect();
            cell.sort_unstable();
            if cell.len() < per_cell {
                return Err(Error::InsufficientCell {
                    group: g.to_string(),
                    label: y.to_string(),
                    available: cell.len(),
                    required: per_cell,
                });
            }
            for i in seed::sample_indices(&mut rng, cell.len(), per_cell) {
                chosen.insert(cell[i]);
            }
        }
    }
    Ok(d.subset(&chosen, Provenance::Test))
}

/// Uniform sample of `n` records (all of them when `n >= size`), sorted by id.
pub fn subsample(d: &Dataset, n: usize, seed: u64) -> Dataset {
    if n >= d.size() {
        return d.clone();
    }
    let mut rng = seed::rng(seed);
    let ids: BTreeSet<u64> = seed::sample_indices(&mut rng, d.size(), n)
        .into_iter()
        .map(|i| d.records[i].id)
        .collect();
    d.subset(&ids, d.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const TOY_SCHEMA: &str = r#"
positive = "1"
majority = "M"

[[attribute]]
name = "education"
kind = "categorical"
role = "non-sensitive"

[[attribute]]
name = "sex"
kind = "categorical"
role = "sensitive"

[[attribute]]
name = "income"
kind = "categorical"
role = "label"
"#;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn toy(rows: &[(&str, &str, &str)]) -> Dataset {
        let schema = Schema::from_toml(TOY_SCHEMA).unwrap();
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, (e, s, y))| Record {
                id: i as u64,
                values: vec![Value::cat(*e), Value::cat(*s), Value::cat(*y)],
            })
            .collect();
        let mut d = Dataset::new(schema, records, Provenance::Original);
        d.refresh_domains();
        d
    }

    #[test]
    fn toy_file_domains_are_the_observed_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "toy.csv",
            "education,sex,income\nHS,M,0\nHS,F,0\nBS,M,1\nBS,F,1\n",
        );
        let d = load_csv(&p, &Schema::from_toml(TOY_SCHEMA).unwrap()).unwrap();
        assert_eq!(d.size(), 4);
        let dom = |n: &str| d.schema.attribute(n).unwrap().domain.clone();
        assert_eq!(dom("education"), vec![Value::cat("BS"), Value::cat("HS")]);
        assert_eq!(dom("sex"), vec![Value::cat("F"), Value::cat("M")]);
        assert_eq!(dom("income"), vec![Value::cat("0"), Value::cat("1")]);
        assert_eq!(d.records.iter().map(|r| r.id).collect::<Vec<_>>(), [0, 1, 2, 3]);
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "h.csv", "education,sex,income\n");
        let d = load_csv(&p, &Schema::from_toml(TOY_SCHEMA).unwrap()).unwrap();
        assert_eq!(d.size(), 0);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let schema = Schema::from_toml(TOY_SCHEMA).unwrap();
        let p = write(&dir, "m.csv", "education,income\nHS,0\n");
        assert!(matches!(load_csv(&p, &schema), Err(Error::MissingColumn(c)) if c == "sex"));
        let p = write(&dir, "e.csv", "");
        assert!(matches!(load_csv(&p, &schema), Err(Error::EmptyFile(_))));
        let p = write(&dir, "q.csv", "education,sex,income\nHS,?,0\n");
        assert!(matches!(load_csv(&p, &schema), Err(Error::MissingValue { .. })));

        let numeric = TOY_SCHEMA.replace(
            "name = \"education\"\nkind = \"categorical\"",
            "name = \"education\"\nkind = \"numeric\"",
        );
        let schema = Schema::from_toml(&numeric).unwrap();
        let p = write(&dir, "n.csv", "education,sex,income\n12,M,0\nHS,F,1\n");
        assert!(matches!(
            load_csv(&p, &schema),
            Err(Error::UnparseableNumeric { row: 1, .. })
        ));
    }

    #[test]
    fn schema_requires_one_label() {
        let bad = TOY_SCHEMA.replace("role = \"label\"", "role = \"non-sensitive\"");
        assert!(Schema::from_toml(&bad).is_err());
        let two = TOY_SCHEMA.replace("role = \"non-sensitive\"", "role = \"sensitive\"");
        assert!(Schema::from_toml(&two).is_err());
    }

    #[test]
    fn domains_stable_under_reload() {
        let dir = tempfile::tempdir().unwrap();
        let d = toy(&[("HS", "M", "0"), ("BS", "F", "1"), ("HS", "F", "1")]);
        let p = dir.path().join("out.csv");
        write_csv(&d, &p, Some("fingerprint=abc")).unwrap();
        assert_eq!(read_csv_comment(&p).unwrap().as_deref(), Some("fingerprint=abc"));
        let again = load_csv(&p, &d.schema).unwrap();
        assert_eq!(again.schema, d.schema);
        assert_eq!(again.records, d.records);
    }

    #[test]
    fn counts_toy_cells() {
        let d = toy(&[("HS", "M", "0"), ("HS", "F", "0"), ("BS", "M", "1"), ("BS", "F", "1")]);
        let c = group_label_counts(&d).unwrap();
        assert_eq!(c.cells.len(), 4);
        assert!(c.cells.values().all(|&n| n == 1));
    }

    #[test]
    fn empty_dataset_counts_are_zero() {
        let mut schema = Schema::from_toml(TOY_SCHEMA).unwrap();
        schema.attributes[1].domain = vec![Value::cat("F"), Value::cat("M")];
        schema.attributes[2].domain = vec![Value::cat("0"), Value::cat("1")];
        let d = Dataset::new(schema, vec![], Provenance::Original);
        let c = group_label_counts(&d).unwrap();
        assert_eq!(c.cells.len(), 4);
        assert_eq!(c.total(), 0);
    }

    #[test]
    fn stratified_sample_per_cell() {
        let d = toy(&[
            ("HS", "M", "0"),
            ("BS", "M", "0"),
            ("HS", "F", "0"),
            ("BS", "F", "0"),
            ("HS", "M", "1"),
            ("BS", "M", "1"),
            ("HS", "F", "1"),
            ("BS", "F", "1"),
        ]);
        for seed in [1, 2] {
            let t = stratified_test_sample(&d, 1, seed).unwrap();
            assert_eq!(t.size(), 4);
            assert!(group_label_counts(&t).unwrap().cells.values().all(|&n| n == 1));
            assert_eq!(t, stratified_test_sample(&d, 1, seed).unwrap());
        }
        // Enumerate: each cell holds ids {2c, 2c+1}; every seed picks one of them.
        let draws: BTreeSet<Vec<u64>> = (0..32)
            .map(|s| {
                stratified_test_sample(&d, 1, s)
                    .unwrap()
                    .records
                    .iter()
                    .map(|r| r.id)
                    .collect()
            })
            .collect();
        assert!(draws.len() > 1);
        assert!(stratified_test_sample(&d, 0, 1).unwrap().is_empty());
        assert!(matches!(
            stratified_test_sample(&d, 3, 1),
            Err(Error::InsufficientCell { required: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn counts_total_equals_size(rows in prop::collection::vec((0..3usize, 0..2usize, 0..2usize), 0..60)) {
            let eds = ["HS", "BS", "MS"];
            let sexes = ["M", "F"];
            let labels = ["0", "1"];
            let rows: Vec<_> = rows.iter().map(|&(e, s, y)| (eds[e], sexes[s], labels[y])).collect();
            let d = toy(&rows);
            prop_assert_eq!(group_label_counts(&d).unwrap().total(), d.size());
        }
    }
}
