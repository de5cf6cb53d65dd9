use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};

/// Kind of a single feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureKind {
    Continuous,
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FeatureRepr", into = "FeatureRepr")]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRepr {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
}

impl TryFrom<FeatureRepr> for Feature {
    type Error = String;

    fn try_from(r: FeatureRepr) -> std::result::Result<Self, String> {
        let kind = match (r.kind.as_str(), r.categories) {
            ("continuous", None) => FeatureKind::Continuous,
            ("continuous", Some(_)) => {
                return Err(format!("continuous column `{}` cannot list categories", r.name))
            }
            ("categorical", Some(categories)) => FeatureKind::Categorical { categories },
            ("categorical", None) => {
                return Err(format!("categorical column `{}` needs `categories`", r.name))
            }
            (other, _) => return Err(format!("column `{}` has unknown kind `{other}`", r.name)),
        };
        Ok(Feature { name: r.name, kind })
    }
}

impl From<Feature> for FeatureRepr {
    fn from(f: Feature) -> Self {
        match f.kind {
            FeatureKind::Continuous => FeatureRepr {
                name: f.name,
                kind: "continuous".into(),
                categories: None,
            },
            FeatureKind::Categorical { categories } => FeatureRepr {
                name: f.name,
                kind: "categorical".into(),
                categories: Some(categories),
            },
        }
    }
}

/// Which of the `d` features are continuous and which are categorical.
///
/// Serialized as `{"columns": [{"name": "x", "kind": "continuous"},
/// {"name": "c", "kind": "categorical", "categories": ["a", "b"]}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub columns: Vec<Feature>,
}

impl FeatureSchema {
    pub fn new(columns: Vec<Feature>) -> Result<Self> {
        let schema = FeatureSchema { columns };
        schema.validate()?;
        Ok(schema)
    }

    /// `d` continuous features named `x0, x1, ...`.
    pub fn continuous(d: usize) -> Self {
        FeatureSchema {
            columns: (0..d)
                .map(|i| Feature {
                    name: format!("x{i}"),
                    kind: FeatureKind::Continuous,
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(AceError::config("schema has no columns"));
        }
        for f in &self.columns {
            if let FeatureKind::Categorical { categories } = &f.kind {
                if categories.len() < 2 {
                    return Err(AceError::config(format!(
                        "categorical column `{}` needs at least two categories",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn kind(&self, i: usize) -> &FeatureKind {
        &self.columns[i].kind
    }

    pub fn is_continuous(&self, i: usize) -> bool {
        matches!(self.columns[i].kind, FeatureKind::Continuous)
    }

    /// Number of categories for a categorical feature, `None` when continuous.
    pub fn category_count(&self, i: usize) -> Option<usize> {
        match &self.columns[i].kind {
            FeatureKind::Continuous => None,
            FeatureKind::Categorical { categories } => Some(categories.len()),
        }
    }

    /// Width of feature `i` in the network encoding: 1, or its one-hot width.
    pub fn encoded_width(&self, i: usize) -> usize {
        self.category_count(i).unwrap_or(1)
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_schema() {
        let s = FeatureSchema::from_json(
            r#"{"columns":[{"name":"age","kind":"continuous"},
                {"name":"sex","kind":"categorical","categories":["f","m"]}]}"#,
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.is_continuous(0));
        assert_eq!(s.category_count(1), Some(2));
        assert_eq!(s.encoded_width(1), 2);
    }

    #[test]
    fn rejects_unknown_keys_and_degenerate_categories() {
        assert!(FeatureSchema::from_json(r#"{"columns":[],"extra":1}"#).is_err());
        assert!(FeatureSchema::from_json(
            r#"{"columns":[{"name":"c","kind":"categorical","categories":["only"]}]}"#
        )
        .is_err());
        assert!(FeatureSchema::from_json(r#"{"columns":[{"name":"c","kind":"ordinal"}]}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = FeatureSchema::from_json(
            r#"{"columns":[{"name":"a","kind":"continuous"},{"name":"b","kind":"categorical","categories":["x","y","z"]}]}"#,
        )
        .unwrap();
        let back = FeatureSchema::from_json(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
    }
}
