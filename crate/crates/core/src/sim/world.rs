//! Simulated images, tasks and the canonical edit grammar.
//!
//! A thought in the sim is `set <attr>=<value>` clauses joined by `"; "`,
//! e.g. `set sky=night; set hat=cap`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageKind, ImageRef};
use crate::sim::rng::Lcg;

/// Detail retained per actor call.
pub const DETAIL_DECAY: f64 = 0.98;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unparseable thought: {0}")]
    UnparseableThought(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid sim parameters: {0}")]
    InvalidParams(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub attributes: Vec<Attribute>,
}

const DEFAULT_SCHEMA: [(&str, [&str; 5]); 10] = [
    ("sky", ["day", "night", "dusk", "dawn", "overcast"]),
    ("season", ["spring", "summer", "autumn", "winter", "monsoon"]),
    ("lighting", ["soft", "harsh", "neon", "candle", "backlit"]),
    ("hat", ["none", "cap", "beanie", "fedora", "helmet"]),
    ("shirt", ["white", "red", "blue", "striped", "plaid"]),
    ("background", ["city", "forest", "beach", "desert", "studio"]),
    ("style", ["photo", "watercolor", "sketch", "anime", "oil"]),
    ("animal", ["none", "cat", "dog", "bird", "horse"]),
    ("hair", ["black", "blond", "red", "gray", "bald"]),
    ("ground", ["grass", "sand", "snow", "asphalt", "water"]),
];

impl Default for Schema {
    fn default() -> Self {
        Schema {
            attributes: DEFAULT_SCHEMA
                .iter()
                .map(|(n, vs)| Attribute {
                    name: n.to_string(),
                    values: vs.iter().map(|v| v.to_string()).collect(),
                })
                .collect(),
        }
    }
}

impl Schema {
    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.attributes.is_empty() {
            return Err(SimError::SchemaMismatch("schema has no attributes".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(&a.name) {
                return Err(SimError::SchemaMismatch(format!("duplicate attribute {}", a.name)));
            }
            if a.values.len() < 2 {
                return Err(SimError::SchemaMismatch(format!("attribute {} needs two values", a.name)));
            }
            for token in std::iter::once(&a.name).chain(&a.values) {
                if token.is_empty() || !token.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    return Err(SimError::SchemaMismatch(format!("bad token {token:?}")));
                }
            }
        }
        Ok(())
    }

    /// Checks that `image` assigns every attribute one of its values.
    pub fn check(&self, image: &SimImage) -> Result<(), SimError> {
        if image.attributes.len() != self.attributes.len() {
            return Err(SimError::SchemaMismatch("attribute count differs".into()));
        }
        for a in &self.attributes {
            let v = image
                .attributes
                .get(&a.name)
                .ok_or_else(|| SimError::SchemaMismatch(format!("missing attribute {}", a.name)))?;
            if !a.values.contains(v) {
                return Err(SimError::SchemaMismatch(format!("{}={v} not in schema", a.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimImage {
    pub attributes: BTreeMap<String, String>,
    pub detail_budget: f64,
}

impl SimImage {
    pub fn to_ref(&self) -> ImageRef {
        ImageRef::sim(serde_json::to_string(self).expect("sim image serializes"))
    }

    pub fn from_ref(image: &ImageRef) -> Result<Self, SimError> {
        if image.kind != ImageKind::Sim {
            return Err(SimError::SchemaMismatch("not a sim image".into()));
        }
        serde_json::from_str(&image.locator).map_err(|e| SimError::SchemaMismatch(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub attribute: String,
    pub value: String,
}

/// Renders edits in the canonical grammar.
pub fn render_edits(edits: &[Edit]) -> String {
    edits
        .iter()
        .map(|e| format!("set {}={}", e.attribute, e.value))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses the canonical grammar. Attributes must be distinct.
pub fn parse_edits(text: &str) -> Result<Vec<Edit>, SimError> {
    let bad = || SimError::UnparseableThought(text.to_string());
    let mut out: Vec<Edit> = Vec::new();
    for clause in text.split("; ") {
        let rest = clause.strip_prefix("set ").ok_or_else(bad)?;
        let (attribute, value) = rest.split_once('=').ok_or_else(bad)?;
        let ok = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !ok(attribute) || !ok(value) || out.iter().any(|e| e.attribute == attribute) {
            return Err(bad());
        }
        out.push(Edit {
            attribute: attribute.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTask {
    #[serde(default)]
    pub schema: Schema,
    pub initial: SimImage,
    pub edits: Vec<Edit>,
}

impl SimTask {
    pub fn complexity(&self) -> u32 {
        self.edits.len() as u32
    }

    pub fn instruction(&self) -> String {
        render_edits(&self.edits)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.schema.validate()?;
        self.schema.check(&self.initial)?;
        if self.edits.is_empty() {
            return Err(SimError::InvalidTask("task has no edits".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.edits {
            let attr = self
                .schema
                .attribute(&e.attribute)
                .ok_or_else(|| SimError::InvalidTask(format!("unknown attribute {}", e.attribute)))?;
            if !attr.values.contains(&e.value) {
                return Err(SimError::InvalidTask(format!("{}={} not in schema", e.attribute, e.value)));
            }
            if !seen.insert(&e.attribute) {
                return Err(SimError::InvalidTask(format!("attribute {} edited twice", e.attribute)));
            }
            if self.initial.attributes[&e.attribute] == e.value {
                return Err(SimError::InvalidTask(format!("{} already {}", e.attribute, e.value)));
            }
        }
        Ok(())
    }

    /// Random task with `complexity` edits on distinct attributes.
    pub fn generate(schema: &Schema, complexity: u32, seed: u64) -> Result<SimTask, SimError> {
        let n = schema.attributes.len();
        if complexity == 0 || complexity as usize > n {
            return Err(SimError::InvalidTask(format!(
                "complexity {complexity} outside 1..={n}"
            )));
        }
        let mut rng = Lcg::new(seed);
        let attributes = schema
            .attributes
            .iter()
            .map(|a| (a.name.clone(), a.values[rng.below(a.values.len())].clone()))
            .collect::<BTreeMap<_, _>>();
        let edits = rng
            .sample_indices(n, complexity as usize)
            .into_iter()
            .map(|i| {
                let a = &schema.attributes[i];
                let current = &attributes[&a.name];
                let others: Vec<&String> = a.values.iter().filter(|v| *v != current).collect();
                Edit {
                    attribute: a.name.clone(),
                    value: others[rng.below(others.len())].clone(),
                }
            })
            .collect();
        let task = SimTask {
            schema: schema.clone(),
            initial: SimImage {
                attributes,
                detail_budget: 1.0,
            },
            edits,
        };
        task.validate()?;
        Ok(task)
    }
}
