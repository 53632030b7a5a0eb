use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result, SampleBatch};

/// Label given to merged rare categories.
pub const OTHER: &str = "other";

/// Raw CSV contents as strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn from_reader<R: Read>(reader: R, delimiter: u8) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = csv.headers()?.iter().map(str::to_string).collect();
        let rows = csv
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { headers, rows })
    }

    pub fn from_path(path: impl AsRef<Path>, delimiter: u8) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?, delimiter)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitiveKind {
    /// One-hot block, one column per category.
    Categorical,
    /// Single raw column.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitiveSpec {
    pub name: String,
    pub kind: SensitiveKind,
    /// Categories rarer than this fraction of rows are merged into `other`.
    #[serde(default)]
    pub merge_below: Option<f64>,
}

/// Drops rows whose `column` holds one of `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowFilter {
    pub column: String,
    pub values: Vec<String>,
}

/// Replaces `from` by `to` in the listed columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recode {
    pub columns: Vec<String>,
    pub from: String,
    pub to: String,
}

fn default_true() -> bool {
    true
}

fn default_delimiter() -> char {
    ','
}

/// Column roles and preprocessing rules of a tabular dataset.
///
/// When `features` is empty, every column that is not the label, a
/// sensitive column or dropped becomes a feature, numeric if all of its
/// values parse as numbers and categorical otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub label: String,
    /// Label value mapped to the positive class.
    #[serde(default)]
    pub positive_value: Option<String>,
    /// Numeric labels strictly above this value are positive.
    #[serde(default)]
    pub positive_above: Option<f64>,
    #[serde(default)]
    pub features: Vec<FeatureSpec>,
    pub sensitive: Vec<SensitiveSpec>,
    #[serde(default)]
    pub drop_columns: Vec<String>,
    #[serde(default)]
    pub drop_rows_where: Vec<RowFilter>,
    /// Applied after row drops.
    #[serde(default)]
    pub recode: Vec<Recode>,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

impl DatasetSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive_value.is_some() && self.positive_above.is_some() {
            return Err(Error::Schema(
                "set at most one of positive_value and positive_above".into(),
            ));
        }
        if self.sensitive.is_empty() {
            return Err(Error::Schema(
                "at least one sensitive column is required".into(),
            ));
        }
        if !self.delimiter.is_ascii() {
            return Err(Error::Schema(
                "delimiter must be a single ASCII character".into(),
            ));
        }
        for s in &self.sensitive {
            if s.name == self.label {
                return Err(Error::Schema(format!(
                    "`{}` is both label and sensitive",
                    s.name
                )));
            }
            if self.features.iter().any(|f| f.name == s.name) {
                return Err(Error::Schema(format!(
                    "`{}` is both a feature and sensitive",
                    s.name
                )));
            }
            if let Some(t) = s.merge_below {
                if !(0.0..1.0).contains(&t) {
                    return Err(Error::Schema(format!("merge_below {t} is not in [0, 1)")));
                }
            }
        }
        if self.features.iter().any(|f| f.name == self.label) {
            return Err(Error::Schema(format!(
                "label `{}` is listed as a feature",
                self.label
            )));
        }
        Ok(())
    }

    /// Reads a CSV file with this schema's delimiter.
    pub fn read_table(&self, path: impl AsRef<Path>) -> Result<Table> {
        Table::from_path(path, self.delimiter as u8)
    }

    /// Applies row drops and recodes.
    pub fn prepare(&self, table: &Table) -> Result<Table> {
        let filters = self
            .drop_rows_where
            .iter()
            .map(|f| Ok((table.column(&f.column)?, &f.values)))
            .collect::<Result<Vec<_>>>()?;
        let recodes = self
            .recode
            .iter()
            .map(|r| {
                let cols = r
                    .columns
                    .iter()
                    .map(|c| table.column(c))
                    .collect::<Result<Vec<_>>>()?;
                Ok((cols, r))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = table
            .rows
            .iter()
            .filter(|row| !filters.iter().any(|(c, values)| values.contains(&row[*c])))
            .map(|row| {
                let mut row = row.clone();
                for (cols, r) in &recodes {
                    for &c in cols {
                        if row[c] == r.from {
                            row[c] = r.to.clone();
                        }
                    }
                }
                row
            })
            .collect();
        Ok(Table {
            headers: table.headers.clone(),
            rows,
        })
    }

    fn resolve_features(&self, table: &Table) -> Result<Vec<FeatureSpec>> {
        if !self.features.is_empty() {
            return Ok(self.features.clone());
        }
        let excluded = |h: &String| {
            *h == self.label
                || self.drop_columns.contains(h)
                || self.sensitive.iter().any(|s| s.name == *h)
        };
        Ok(table
            .headers
            .iter()
            .enumerate()
            .filter(|(_, h)| !excluded(h))
            .map(|(c, h)| {
                let numeric = table.rows.iter().all(|r| r[c].parse::<f64>().is_ok());
                FeatureSpec {
                    name: h.clone(),
                    kind: if numeric {
                        FeatureKind::Numeric
                    } else {
                        FeatureKind::Categorical
                    },
                }
            })
            .collect())
    }
}

/// Bidirectional map between category strings and indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEncoder {
    values: Vec<String>,
    /// Categories folded into [`OTHER`].
    merged: Vec<String>,
}

impl CategoryEncoder {
    /// Sorted distinct values of `column`.
    pub fn fit<'a>(column: impl IntoIterator<Item = &'a str>) -> Self {
        let counts = count(column);
        Self {
            values: counts.into_keys().collect(),
            merged: Vec::new(),
        }
    }

    /// Like [`CategoryEncoder::fit`], folding categories below `threshold`
    /// (a fraction of rows) into [`OTHER`]. Further categories are folded,
    /// smallest first, until the merged group reaches the threshold too.
    pub fn fit_merging<'a>(column: impl IntoIterator<Item = &'a str>, threshold: f64) -> Self {
        let counts = count(column);
        let total: usize = counts.values().sum();
        let min = threshold * total as f64;
        let mut by_size: Vec<(String, usize)> = counts.into_iter().collect();
        by_size.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let mut merged = Vec::new();
        let mut merged_count = 0;
        for (value, c) in &by_size {
            let small = (*c as f64) < min;
            let other_too_small = !merged.is_empty() && (merged_count as f64) < min;
            if (small || other_too_small) && merged.len() + 1 < by_size.len() {
                merged.push(value.clone());
                merged_count += c;
            } else {
                break;
            }
        }
        // A single rare category stays as it is rather than being renamed.
        if merged.len() == 1 {
            merged.clear();
        }
        let mut values: Vec<String> = by_size
            .into_iter()
            .map(|(v, _)| v)
            .filter(|v| !merged.contains(v))
            .collect();
        if !merged.is_empty() {
            values.push(OTHER.to_string());
        }
        values.sort();
        merged.sort();
        Self { values, merged }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn merged(&self) -> &[String] {
        &self.merged
    }

    pub fn encode(&self, value: &str) -> Option<usize> {
        let key = if self.merged.iter().any(|m| m == value) {
            OTHER
        } else {
            value
        };
        self.values.binary_search_by(|v| v.as_str().cmp(key)).ok()
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.values.get(index).map(String::as_str)
    }
}

fn count<'a>(column: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for v in column {
        *counts.entry(v.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Schema fitted to a table: category vocabularies and column layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEncoder {
    pub schema: DatasetSchema,
    pub features: Vec<FeatureSpec>,
    feature_encoders: Vec<Option<CategoryEncoder>>,
    sensitive_encoders: Vec<Option<CategoryEncoder>>,
    /// Names of the encoded feature columns.
    pub feature_names: Vec<String>,
    /// Names of the encoded sensitive columns.
    pub sensitive_names: Vec<String>,
    /// Encoded feature columns holding numeric features.
    pub numeric_columns: Vec<usize>,
}

fn parse_number(value: &str, column: &str, row: usize) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            Error::Schema(format!(
                "column `{column}` row {row}: `{value}` is not numeric"
            ))
        })
}

impl DatasetEncoder {
    /// Fits vocabularies on `table` after the schema's row rules.
    pub fn fit(schema: &DatasetSchema, table: &Table) -> Result<Self> {
        schema.validate()?;
        let table = schema.prepare(table)?;
        table.column(&schema.label)?;
        for c in &schema.drop_columns {
            table.column(c)?;
        }
        let features = schema.resolve_features(&table)?;
        let column_values = |name: &str| -> Result<Vec<&str>> {
            let c = table.column(name)?;
            Ok(table.rows.iter().map(|r| r[c].as_str()).collect())
        };

        let mut feature_encoders = Vec::new();
        let mut feature_names = Vec::new();
        let mut numeric_columns = Vec::new();
        for f in &features {
            let values = column_values(&f.name)?;
            match f.kind {
                FeatureKind::Numeric => {
                    numeric_columns.push(feature_names.len());
                    feature_names.push(f.name.clone());
                    feature_encoders.push(None);
                }
                FeatureKind::Categorical => {
                    let enc = CategoryEncoder::fit(values);
                    feature_names.extend(enc.values().iter().map(|v| format!("{}={v}", f.name)));
                    feature_encoders.push(Some(enc));
                }
            }
        }

        let mut sensitive_encoders = Vec::new();
        let mut sensitive_names = Vec::new();
        for s in &schema.sensitive {
            let values = column_values(&s.name)?;
            match s.kind {
                SensitiveKind::Continuous => {
                    sensitive_names.push(s.name.clone());
                    sensitive_encoders.push(None);
                }
                SensitiveKind::Categorical => {
                    let enc = match s.merge_below {
                        Some(t) => CategoryEncoder::fit_merging(values, t),
                        None => CategoryEncoder::fit(values),
                    };
                    sensitive_names.extend(enc.values().iter().map(|v| format!("{}={v}", s.name)));
                    sensitive_encoders.push(Some(enc));
                }
            }
        }
        Ok(Self {
            schema: schema.clone(),
            features,
            feature_encoders,
            sensitive_encoders,
            feature_names,
            sensitive_names,
            numeric_columns,
        })
    }

    pub fn d_x(&self) -> usize {
        self.feature_names.len()
    }

    pub fn d_s(&self) -> usize {
        self.sensitive_names.len()
    }

    fn label(&self, value: &str, row: usize) -> Result<f64> {
        let schema = &self.schema;
        if let Some(p) = &schema.positive_value {
            return Ok(f64::from(value == p));
        }
        if let Some(t) = schema.positive_above {
            return Ok(f64::from(parse_number(value, &schema.label, row)? > t));
        }
        match value.to_ascii_lowercase().as_str() {
            "1" | "1.0" | "true" => Ok(1.0),
            "0" | "0.0" | "false" => Ok(0.0),
            _ => Err(Error::Schema(format!(
                "label `{}` row {row}: `{value}` is not binary; set positive_value or positive_above",
                schema.label
            ))),
        }
    }

    /// Encodes a table with the fitted layout. Rows with unseen categories
    /// are reported together.
    pub fn encode(&self, table: &Table) -> Result<SampleBatch> {
        let table = self.schema.prepare(table)?;
        if table.rows.is_empty() {
            return Err(Error::InvalidBatch(
                "no rows left after preprocessing".into(),
            ));
        }
        let label_col = table.column(&self.schema.label)?;
        let feature_cols = self
            .features
            .iter()
            .map(|f| table.column(&f.name))
            .collect::<Result<Vec<_>>>()?;
        let sensitive_cols = self
            .schema
            .sensitive
            .iter()
            .map(|s| table.column(&s.name))
            .collect::<Result<Vec<_>>>()?;

        let n = table.rows.len();
        let (d_x, d_s) = (self.d_x(), self.d_s());
        let mut x = vec![0.0; n * d_x];
        let mut s = vec![0.0; n * d_s];
        let mut labels = Vec::with_capacity(n);
        let mut unknown: HashMap<usize, (String, String)> = HashMap::new();

        for (i, row) in table.rows.iter().enumerate() {
            labels.push(self.label(&row[label_col], i)?);
            let mut offset = 0;
            for ((spec, enc), &c) in self
                .features
                .iter()
                .zip(&self.feature_encoders)
                .zip(&feature_cols)
            {
                match enc {
                    None => {
                        x[i * d_x + offset] = parse_number(&row[c], &spec.name, i)?;
                        offset += 1;
                    }
                    Some(enc) => {
                        match enc.encode(&row[c]) {
                            Some(k) => x[i * d_x + offset + k] = 1.0,
                            None => {
                                unknown
                                    .entry(i)
                                    .or_insert((spec.name.clone(), row[c].clone()));
                            }
                        }
                        offset += enc.len();
                    }
                }
            }
            let mut offset = 0;
            for ((spec, enc), &c) in self
                .schema
                .sensitive
                .iter()
                .zip(&self.sensitive_encoders)
                .zip(&sensitive_cols)
            {
                match enc {
                    None => {
                        s[i * d_s + offset] = parse_number(&row[c], &spec.name, i)?;
                        offset += 1;
                    }
                    Some(enc) => {
                        match enc.encode(&row[c]) {
                            Some(k) => s[i * d_s + offset + k] = 1.0,
                            None => {
                                unknown
                                    .entry(i)
                                    .or_insert((spec.name.clone(), row[c].clone()));
                            }
                        }
                        offset += enc.len();
                    }
                }
            }
        }
        if let Some(first) = unknown.keys().min() {
            let (column, value) = unknown[first].clone();
            return Err(Error::UnknownCategories {
                count: unknown.len(),
                column,
                value,
            });
        }
        SampleBatch::new(
            Tensor::matrix(n, d_x, x)?,
            labels,
            Tensor::matrix(n, d_s, s)?,
        )
    }
}

/// Reads, fits and encodes a dataset in one go. Features are not
/// standardized here; fit a [`super::Standardizer`] on the training split.
pub fn load_dataset(
    schema: &DatasetSchema,
    path: impl AsRef<Path>,
) -> Result<(SampleBatch, DatasetEncoder)> {
    let table = schema.read_table(path)?;
    let encoder = DatasetEncoder::fit(schema, &table)?;
    let batch = encoder.encode(&table)?;
    Ok((batch, encoder))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "\
age,gender,marital,income,job,y
30,f,single,1.5,a,yes
41,m,married,2.0,b,no
25,f,divorced,0.5,a,no
52,m,single,3.5,c,yes
";

    fn schema() -> DatasetSchema {
        DatasetSchema::from_json(
            r#"{
                "label": "y",
                "positive_value": "yes",
                "sensitive": [
                    {"name": "gender", "kind": "categorical"},
                    {"name": "marital", "kind": "categorical"},
                    {"name": "age", "kind": "continuous"}
                ]
            }"#,
        )
        .unwrap()
    }

    fn table(text: &str) -> Table {
        Table::from_reader(text.as_bytes(), b',').unwrap()
    }

    #[test]
    fn encodes_sensitive_blocks_and_features() {
        let t = table(CSV);
        let enc = DatasetEncoder::fit(&schema(), &t).unwrap();
        let b = enc.encode(&t).unwrap();
        assert_eq!(b.labels(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            enc.sensitive_names,
            [
                "gender=f",
                "gender=m",
                "marital=divorced",
                "marital=married",
                "marital=single",
                "age"
            ]
        );
        assert_eq!(enc.feature_names, ["income", "job=a", "job=b", "job=c"]);
        assert_eq!(enc.numeric_columns, [0]);
        for i in 0..4 {
            let row = b.sensitive().row(i);
            assert_eq!(row[0] + row[1], 1.0);
            assert_eq!(row[2..5].iter().sum::<f64>(), 1.0);
            assert_eq!(row[..5].iter().sum::<f64>(), 2.0);
        }
        assert_eq!(b.sensitive().row(3)[5], 52.0);
    }

    #[test]
    fn unknown_categories_are_counted() {
        let enc = DatasetEncoder::fit(&schema(), &table(CSV)).unwrap();
        let other = table("age,gender,marital,income,job,y\n30,x,single,1.0,a,no\n31,f,single,1.0,z,no\n32,f,single,1.0,a,no\n");
        match enc.encode(&other).unwrap_err() {
            Error::UnknownCategories {
                count,
                column,
                value,
            } => {
                assert_eq!(count, 2);
                assert_eq!((column.as_str(), value.as_str()), ("gender", "x"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_columns_are_schema_errors() {
        let mut s = schema();
        s.sensitive[0].name = "sex".into();
        assert!(matches!(
            DatasetEncoder::fit(&s, &table(CSV)),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn row_drops_and_recodes() {
        let mut s = schema();
        s.drop_rows_where = vec![RowFilter {
            column: "marital".into(),
            values: vec!["divorced".into()],
        }];
        s.recode = vec![Recode {
            columns: vec!["job".into()],
            from: "c".into(),
            to: "b".into(),
        }];
        s.drop_columns = vec!["income".into()];
        let t = table(CSV);
        let enc = DatasetEncoder::fit(&s, &t).unwrap();
        let b = enc.encode(&t).unwrap();
        assert_eq!(b.n(), 3);
        assert_eq!(enc.feature_names, ["job=a", "job=b"]);
        assert_eq!(enc.sensitive_names.len(), 2 + 2 + 1);
    }

    #[test]
    fn category_round_trip_and_merge() {
        let values = ["b", "a", "c", "a", "b", "a"];
        let enc = CategoryEncoder::fit(values);
        for v in values {
            assert_eq!(enc.decode(enc.encode(v).unwrap()), Some(v));
        }
        let mut column = vec!["w"; 200];
        column.extend(["x", "y", "z"]);
        let merged = CategoryEncoder::fit_merging(column.iter().copied(), 0.01);
        assert_eq!(merged.values(), ["other", "w"]);
        assert_eq!(merged.merged(), ["x", "y", "z"]);
        assert_eq!(merged.encode("y"), merged.encode(OTHER));
        assert_eq!(merged.encode("q"), None);
    }

    #[test]
    fn numeric_threshold_labels() {
        let mut s = schema();
        s.label = "income".into();
        s.positive_value = None;
        s.positive_above = Some(1.0);
        s.drop_columns = vec!["y".into()];
        let t = table(CSV);
        let b = DatasetEncoder::fit(&s, &t).unwrap().encode(&t).unwrap();
        assert_eq!(b.labels(), &[1.0, 1.0, 0.0, 1.0]);
    }
}
