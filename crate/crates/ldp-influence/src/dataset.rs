//! Tabular categorical data: schema-driven CSV loading, one-hot encoding,
//! train/test splitting, and training-group construction.
//!
//! Every attribute is categorical by declaration; continuous columns must be
//! binned before they reach this crate, because randomized response is
//! defined over finite domains.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How one attribute is turned into design-matrix columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    /// One column per category, exactly one of them 1.
    #[default]
    OneHot,
    /// Single 0/1 column; only valid for two-category attributes.
    Binarize,
}

/// One categorical attribute: its name and ordered category labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDomain {
    pub name: String,
    pub categories: Vec<String>,
    pub encode_mode: EncodeMode,
}

impl CategoricalDomain {
    pub fn new(name: impl Into<String>, categories: Vec<String>) -> Result<Self> {
        Self::with_mode(name, categories, EncodeMode::OneHot)
    }

    pub fn with_mode(
        name: impl Into<String>,
        categories: Vec<String>,
        encode_mode: EncodeMode,
    ) -> Result<Self> {
        let name = name.into();
        if categories.len() < 2 {
            return Err(Error::Schema(format!(
                "attribute '{name}' needs at least 2 categories, got {}",
                categories.len()
            )));
        }
        let distinct: HashSet<&str> = categories.iter().map(String::as_str).collect();
        if distinct.len() != categories.len() {
            return Err(Error::Schema(format!(
                "attribute '{name}' has duplicate categories"
            )));
        }
        if encode_mode == EncodeMode::Binarize && categories.len() != 2 {
            return Err(Error::Schema(format!(
                "attribute '{name}': binarize encoding requires exactly 2 categories"
            )));
        }
        Ok(Self {
            name,
            categories,
            encode_mode,
        })
    }

    pub fn cardinality(&self) -> usize {
        self.categories.len()
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == value)
    }
}

/// Categorical records plus the attribute domains they index into.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub attributes: Vec<CategoricalDomain>,
    pub records: Vec<Vec<usize>>,
    pub label_attribute: usize,
}

impl Dataset {
    pub fn new(
        attributes: Vec<CategoricalDomain>,
        records: Vec<Vec<usize>>,
        label_attribute: usize,
    ) -> Result<Self> {
        if label_attribute >= attributes.len() {
            return Err(Error::Schema(format!(
                "label attribute index {label_attribute} out of range"
            )));
        }
        for (i, record) in records.iter().enumerate() {
            if record.len() != attributes.len() {
                return Err(Error::Data(format!(
                    "record {i} has {} values, expected {}",
                    record.len(),
                    attributes.len()
                )));
            }
            for (a, (&v, dom)) in record.iter().zip(&attributes).enumerate() {
                if v >= dom.cardinality() {
                    return Err(Error::Data(format!(
                        "record {i}, attribute {a} ('{}'): index {v} out of domain size {}",
                        dom.name,
                        dom.cardinality()
                    )));
                }
            }
        }
        Ok(Self {
            attributes,
            records,
            label_attribute,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of label classes C.
    pub fn n_classes(&self) -> usize {
        self.attributes[self.label_attribute].cardinality()
    }

    /// Domain size of every attribute, in attribute order.
    pub fn cardinalities(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.cardinality()).collect()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// New dataset with the same attributes and the given subset of records.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices
            .iter()
            .map(|&i| {
                self.records
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("record index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            attributes: self.attributes.clone(),
            records,
            label_attribute: self.label_attribute,
        })
    }
}

// ---------------------------------------------------------------------------
// Schema document
// ---------------------------------------------------------------------------

/// JSON schema document describing a CSV file: per-attribute category sets,
/// the label attribute, and cleaning flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub attributes: Vec<AttributeSchema>,
    pub label: String,
    #[serde(default)]
    pub drop_duplicates: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub categories: Vec<String>,
    #[serde(default)]
    pub encode: EncodeMode,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("invalid schema JSON: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.attributes.len() < 2 {
            return Err(Error::Schema(
                "schema needs at least 2 attributes (features plus a label)".into(),
            ));
        }
        let names: HashSet<&str> = self.attributes.iter().map(|a| a.name.as_str()).collect();
        if names.len() != self.attributes.len() {
            return Err(Error::Schema("duplicate attribute names in schema".into()));
        }
        if !names.contains(self.label.as_str()) {
            return Err(Error::Schema(format!(
                "label attribute '{}' not declared in schema",
                self.label
            )));
        }
        Ok(())
    }

    fn domains(&self) -> Result<(Vec<CategoricalDomain>, usize)> {
        let domains = self
            .attributes
            .iter()
            .map(|a| CategoricalDomain::with_mode(a.name.clone(), a.categories.clone(), a.encode))
            .collect::<Result<Vec<_>>>()?;
        let label = domains
            .iter()
            .position(|d| d.name == self.label)
            .expect("validated");
        Ok((domains, label))
    }

    /// Schema matching an in-memory dataset, with declared category sets.
    pub fn describing(ds: &Dataset, drop_duplicates: bool) -> Self {
        Schema {
            attributes: ds
                .attributes
                .iter()
                .map(|a| AttributeSchema {
                    name: a.name.clone(),
                    categories: a.categories.clone(),
                    encode: a.encode_mode,
                })
                .collect(),
            label: ds.attributes[ds.label_attribute].name.clone(),
            drop_duplicates,
        }
    }
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

/// Load an RFC-4180 style CSV (header row required) against a schema.
/// Values are whitespace-trimmed before category lookup; unknown categories
/// are a hard error naming the offending row.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let column_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("CSV is missing column '{name}'")))
    };
    let columns: Vec<usize> = schema
        .attributes
        .iter()
        .map(|a| column_of(&a.name))
        .collect::<Result<Vec<_>>>()?;
    let (domains, label_attribute) = schema.domains()?;

    let mut records: Vec<Vec<usize>> = Vec::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_number = i + 2; // 1-based, counting the header row
        let row = row.map_err(|e| Error::Parse {
            row: row_number,
            message: e.to_string(),
        })?;
        let mut record = Vec::with_capacity(domains.len());
        for (dom, &col) in domains.iter().zip(&columns) {
            let raw = row.get(col).ok_or_else(|| Error::Parse {
                row: row_number,
                message: format!("missing field for column '{}'", dom.name),
            })?;
            let value = raw.trim();
            let idx = dom.index_of(value).ok_or_else(|| {
                Error::Schema(format!(
                    "row {row_number}: unknown category '{value}' for attribute '{}'",
                    dom.name
                ))
            })?;
            record.push(idx);
        }
        if schema.drop_duplicates {
            if seen.insert(record.clone()) {
                records.push(record);
            }
        } else {
            records.push(record);
        }
    }
    Dataset::new(domains, records, label_attribute)
}

/// Write a dataset back out as CSV with a header row. Round-trips through
/// [`load_csv`] with the describing schema.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    writer
        .write_record(ds.attributes.iter().map(|a| a.name.as_str()))
        .map_err(|e| Error::Data(e.to_string()))?;
    for record in &ds.records {
        writer
            .write_record(
                record
                    .iter()
                    .zip(&ds.attributes)
                    .map(|(&v, a)| a.categories[v].as_str()),
            )
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// Column range occupied by one encoded attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBlock {
    pub attribute: usize,
    pub start: usize,
    pub width: usize,
    pub mode: EncodeMode,
}

/// Mapping from categorical records to design-matrix rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub blocks: Vec<EncodedBlock>,
    pub bias: bool,
    pub label_attribute: usize,
    pub width: usize,
}

impl Encoding {
    pub fn from_dataset(ds: &Dataset, bias: bool) -> Self {
        let mut blocks = Vec::new();
        let mut cursor = 0;
        for (a, dom) in ds.attributes.iter().enumerate() {
            if a == ds.label_attribute {
                continue;
            }
            let width = match dom.encode_mode {
                EncodeMode::OneHot => dom.cardinality(),
                EncodeMode::Binarize => 1,
            };
            blocks.push(EncodedBlock {
                attribute: a,
                start: cursor,
                width,
                mode: dom.encode_mode,
            });
            cursor += width;
        }
        let width = cursor + usize::from(bias);
        Encoding {
            blocks,
            bias,
            label_attribute: ds.label_attribute,
            width,
        }
    }

    /// Encode one categorical record into (feature row, label index).
    pub fn encode_record(&self, record: &[usize]) -> (Array1<f64>, usize) {
        let mut row = Array1::<f64>::zeros(self.width);
        for block in &self.blocks {
            let v = record[block.attribute];
            match block.mode {
                EncodeMode::OneHot => row[block.start + v] = 1.0,
                EncodeMode::Binarize => row[block.start] = v as f64,
            }
        }
        if self.bias {
            row[self.width - 1] = 1.0;
        }
        (row, record[self.label_attribute])
    }

    /// Invert [`Self::encode_record`]. Errors if the row is not an exact
    /// encoding (used by the round-trip invariant checks).
    pub fn decode_row(&self, row: ArrayView1<f64>, label: usize, n_attrs: usize) -> Result<Vec<usize>> {
        if row.len() != self.width {
            return Err(Error::Dimension {
                expected: self.width,
                got: row.len(),
            });
        }
        let mut record = vec![0usize; n_attrs];
        for block in &self.blocks {
            match block.mode {
                EncodeMode::OneHot => {
                    let mut hit = None;
                    for j in 0..block.width {
                        let v = row[block.start + j];
                        if v == 1.0 {
                            if hit.is_some() {
                                return Err(Error::Data(format!(
                                    "attribute {}: more than one 1 in one-hot block",
                                    block.attribute
                                )));
                            }
                            hit = Some(j);
                        } else if v != 0.0 {
                            return Err(Error::Data(format!(
                                "attribute {}: non-binary entry {v} in one-hot block",
                                block.attribute
                            )));
                        }
                    }
                    record[block.attribute] = hit.ok_or_else(|| {
                        Error::Data(format!("attribute {}: empty one-hot block", block.attribute))
                    })?;
                }
                EncodeMode::Binarize => {
                    let v = row[block.start];
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Data(format!(
                            "attribute {}: non-binary entry {v}",
                            block.attribute
                        )));
                    }
                    record[block.attribute] = v as usize;
                }
            }
        }
        record[self.label_attribute] = label;
        Ok(record)
    }
}

/// Design matrix plus class labels for model fitting.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub design: Array2<f64>,
    pub labels: Vec<usize>,
    pub encoding: Encoding,
    pub n_classes: usize,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Design-matrix width p.
    pub fn width(&self) -> usize {
        self.design.ncols()
    }
}

/// One-hot (or binarized) encode every non-label attribute; the label
/// becomes the class-index vector.
pub fn encode(ds: &Dataset, bias: bool) -> Result<EncodedDataset> {
    if ds.n_classes() < 2 {
        return Err(Error::Schema("label attribute needs at least 2 classes".into()));
    }
    let encoding = Encoding::from_dataset(ds, bias);
    let mut design = Array2::<f64>::zeros((ds.len(), encoding.width));
    let mut labels = Vec::with_capacity(ds.len());
    for (i, record) in ds.records.iter().enumerate() {
        let (row, label) = encoding.encode_record(record);
        design.row_mut(i).assign(&row);
        labels.push(label);
    }
    Ok(EncodedDataset {
        design,
        labels,
        encoding,
        n_classes: ds.n_classes(),
    })
}

// ---------------------------------------------------------------------------
// Splitting and group construction
// ---------------------------------------------------------------------------

/// Deterministic shuffled train/test split. The test partition takes
/// `⌊n·test_fraction⌋` records.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    let n = ds.len();
    let n_test = ((n as f64) * test_fraction + 1e-9).floor() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Data(format!(
            "split of n={n} at fraction {test_fraction} leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test_idx = &order[..n_test];
    let train_idx = &order[n_test..];
    Ok((ds.subset(train_idx)?, ds.subset(test_idx)?))
}

/// How a training group is carved out: rows matching `attribute == category`,
/// shuffled by `seed`, first `⌊fraction·matches⌋` taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    pub attribute: usize,
    pub category: usize,
    pub fraction: f64,
    pub seed: u64,
}

/// A chosen training group S and the test rows S_te it is scored against.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub group_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub rule: SelectionRule,
}

impl GroupSpec {
    pub fn group_size(&self) -> usize {
        self.group_indices.len()
    }
}

/// Select a training group. Groups selected with the same seed nest: a
/// smaller fraction yields a prefix (as a set) of a larger one.
/// `test_len` sizes the default S_te = all test rows.
pub fn select_group(train: &Dataset, test_len: usize, rule: &SelectionRule) -> Result<GroupSpec> {
    if !(rule.fraction > 0.0 && rule.fraction <= 1.0) {
        return Err(Error::Config(format!(
            "group fraction must lie in (0,1], got {}",
            rule.fraction
        )));
    }
    let dom = train
        .attributes
        .get(rule.attribute)
        .ok_or_else(|| Error::Config(format!("attribute index {} out of range", rule.attribute)))?;
    if rule.category >= dom.cardinality() {
        return Err(Error::Config(format!(
            "category index {} out of range for attribute '{}'",
            rule.category, dom.name
        )));
    }
    let mut matching: Vec<usize> = train
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r[rule.attribute] == rule.category)
        .map(|(i, _)| i)
        .collect();
    if matching.is_empty() {
        return Err(Error::Data(format!(
            "no training rows match {} == '{}'",
            dom.name, dom.categories[rule.category]
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(rule.seed);
    matching.shuffle(&mut rng);
    let take = ((matching.len() as f64) * rule.fraction + 1e-9).floor() as usize;
    if take == 0 {
        return Err(Error::Data(format!(
            "fraction {} of {} matching rows rounds down to an empty group",
            rule.fraction,
            matching.len()
        )));
    }
    let mut group_indices = matching[..take].to_vec();
    group_indices.sort_unstable();
    Ok(GroupSpec {
        group_indices,
        test_indices: (0..test_len).collect(),
        rule: rule.clone(),
    })
}
