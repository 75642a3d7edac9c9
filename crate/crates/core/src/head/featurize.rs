use super::HeadError;
use crate::text::{hash_key, tokenize};
use crate::value::FeatureValue;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    pub kind: ColumnKind,
}

impl DesignColumn {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        DesignColumn {
            name: name.to_string(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    pub d_text: usize,
    pub d_cat: usize,
    /// Longest token n-gram hashed from text columns.
    pub max_ngram: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            d_text: 1 << 15,
            d_cat: 1 << 12,
            max_ngram: 2,
        }
    }
}

/// Sparse vector: sorted, duplicate-free `(index, value)` pairs.
pub type SparseVec = Vec<(usize, f64)>;

pub const MISSING: &str = "\u{0}MISSING";

/// Output layout: one slot per numeric column, then the categorical hash
/// block, then the text hash block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub config: FeaturizerConfig,
    pub columns: Vec<DesignColumn>,
    /// Per column; zero for non-numeric columns.
    pub means: Vec<f64>,
    /// Per column; zero marks a constant (or non-numeric) column.
    pub stds: Vec<f64>,
}

fn numeric(v: &Option<FeatureValue>) -> Option<f64> {
    v.as_ref().and_then(FeatureValue::as_f64).filter(|x| x.is_finite())
}

impl Featurizer {
    pub fn fit(
        columns: Vec<DesignColumn>,
        rows: &[Vec<Option<FeatureValue>>],
        config: FeaturizerConfig,
    ) -> Result<Self, HeadError> {
        if columns.is_empty() {
            return Err(HeadError::NoFeatureColumns);
        }
        if rows.is_empty() {
            return Err(HeadError::EmptyTable);
        }
        let mut means = vec![0.0; columns.len()];
        let mut stds = vec![0.0; columns.len()];
        for (j, c) in columns.iter().enumerate() {
            if c.kind != ColumnKind::Numeric {
                continue;
            }
            let mut xs = Vec::with_capacity(rows.len());
            for r in rows {
                if r.len() != columns.len() {
                    return Err(HeadError::Arity {
                        expected: columns.len(),
                        got: r.len(),
                    });
                }
                if let Some(x) = numeric(&r[j]) {
                    xs.push(x);
                }
            }
            if xs.is_empty() {
                continue;
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            means[j] = mean;
            stds[j] = if var.sqrt() > 1e-12 * mean.abs().max(1.0) {
                var.sqrt()
            } else {
                0.0
            };
        }
        Ok(Featurizer {
            config,
            columns,
            means,
            stds,
        })
    }

    fn n_numeric(&self) -> usize {
        self.columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Numeric)
            .count()
    }

    pub fn dim(&self) -> usize {
        self.n_numeric() + self.config.d_cat + self.config.d_text
    }

    /// Index of the hashed categorical slot for `(column, category)`.
    pub fn categorical_index(&self, column: &str, category: &str) -> usize {
        self.n_numeric() + (hash_key(column, category) % self.config.d_cat as u64) as usize
    }

    /// Index of the hashed text slot for `(column, n-gram)`; n-gram tokens are
    /// joined by single spaces.
    pub fn text_index(&self, column: &str, gram: &str) -> usize {
        self.n_numeric()
            + self.config.d_cat
            + (hash_key(column, gram) % self.config.d_text as u64) as usize
    }

    pub fn transform(&self, values: &[Option<FeatureValue>]) -> Result<SparseVec, HeadError> {
        if values.len() != self.columns.len() {
            return Err(HeadError::Arity {
                expected: self.columns.len(),
                got: values.len(),
            });
        }
        let mut out: SparseVec = Vec::new();
        let mut slot = 0;
        for (j, (c, v)) in self.columns.iter().zip(values).enumerate() {
            match c.kind {
                ColumnKind::Numeric => {
                    if self.stds[j] > 0.0 {
                        if let Some(x) = numeric(v) {
                            let z = (x - self.means[j]) / self.stds[j];
                            if z != 0.0 && z.is_finite() {
                                out.push((slot, z));
                            }
                        }
                    }
                    slot += 1;
                }
                ColumnKind::Categorical => {
                    let cat = v.as_ref().map(FeatureValue::category);
                    let cat = cat.as_deref().unwrap_or(MISSING);
                    out.push((self.categorical_index(&c.name, cat), 1.0));
                }
                ColumnKind::Text => {
                    let Some(text) = v.as_ref().map(FeatureValue::category) else {
                        continue;
                    };
                    let toks = tokenize(&text);
                    for n in 1..=self.config.max_ngram.max(1) {
                        for w in toks.windows(n) {
                            out.push((self.text_index(&c.name, &w.join(" ")), 1.0));
                        }
                    }
                }
            }
        }
        Ok(normalize(out))
    }
}

/// Sorts by index and sums duplicates.
pub fn normalize(mut v: SparseVec) -> SparseVec {
    v.sort_by_key(|p| p.0);
    let mut out: SparseVec = Vec::with_capacity(v.len());
    for (i, x) in v {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += x,
            _ => out.push((i, x)),
        }
    }
    out.retain(|p| p.1 != 0.0);
    out
}

pub fn dot(w: &[f64], x: &[(usize, f64)]) -> f64 {
    x.iter().map(|&(i, v)| w[i] * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(x: f64) -> Option<FeatureValue> {
        Some(FeatureValue::Number(x))
    }

    #[test]
    fn constant_numeric_column_scales_to_zero() {
        let cols = vec![DesignColumn::new("k", ColumnKind::Numeric)];
        let rows = vec![vec![num(3.0)]; 4];
        let f = Featurizer::fit(cols, &rows, FeaturizerConfig::default()).unwrap();
        for r in &rows {
            assert!(f.transform(r).unwrap().is_empty());
        }
    }

    #[test]
    fn text_counts_unigrams_and_bigrams() {
        let cols = vec![DesignColumn::new("t", ColumnKind::Text)];
        let row = vec![Some(FeatureValue::Text("show orders orders get".into()))];
        let f = Featurizer::fit(cols, &[row.clone()], FeaturizerConfig::default()).unwrap();
        let x = f.transform(&row).unwrap();
        let mut expected = std::collections::BTreeMap::new();
        for g in ["show", "orders", "orders", "get", "show orders", "orders orders", "orders get"] {
            let idx = (crate::text::fnv1a(format!("t\u{1f}{g}").as_bytes()) % (1 << 15)) as usize
                + (1 << 12);
            *expected.entry(idx).or_insert(0.0) += 1.0;
        }
        let got: std::collections::BTreeMap<usize, f64> = x.into_iter().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn unseen_category_and_missing_values_transform() {
        let cols = vec![
            DesignColumn::new("c", ColumnKind::Categorical),
            DesignColumn::new("n", ColumnKind::Numeric),
        ];
        let rows = vec![
            vec![Some(FeatureValue::Text("a".into())), num(1.0)],
            vec![Some(FeatureValue::Text("b".into())), num(2.0)],
        ];
        let f = Featurizer::fit(cols, &rows, FeaturizerConfig::default()).unwrap();
        let x = f
            .transform(&[Some(FeatureValue::Text("never seen".into())), None])
            .unwrap();
        assert_eq!(x.len(), 1);
        let m = f.transform(&[None, num(1.5)]).unwrap();
        assert_eq!(m, vec![(f.categorical_index("c", MISSING), 1.0)]);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let cols = vec![DesignColumn::new("n", ColumnKind::Numeric)];
        assert!(matches!(
            Featurizer::fit(cols, &[], FeaturizerConfig::default()),
            Err(HeadError::EmptyTable)
        ));
        assert!(matches!(
            Featurizer::fit(vec![], &[vec![]], FeaturizerConfig::default()),
            Err(HeadError::NoFeatureColumns)
        ));
    }
}
