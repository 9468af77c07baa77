//! Relation → question templates for ATOMIC-style knowledge triples.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TABLE_VERSION: &str = "atomic-mr-v1";

const DEFAULT_TEMPLATES: &[(&str, &str)] = &[
    ("xAttr", "PersonX is seen as"),
    ("xEffect", "As a result, PersonX then"),
    ("xIntent", "Because PersonX wanted"),
    ("xNeed", "Before, PersonX needed to"),
    ("xReact", "As a result, PersonX feels"),
    ("xWant", "As a result, PersonX wanted to"),
    ("oEffect", "As a result, others then"),
    ("oReact", "As a result, others feel"),
    ("oWant", "As a result, others wanted to"),
    ("isAfter", "Before that,"),
    ("isBefore", "After that,"),
    ("HinderedBy", "This would not happen if"),
    ("HasSubEvent", "This includes the event that"),
    ("Causes", "This causes"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateTable {
    pub version: String,
    pub templates: BTreeMap<String, String>,
}

impl Default for TemplateTable {
    fn default() -> Self {
        Self {
            version: DEFAULT_TABLE_VERSION.to_string(),
            templates: DEFAULT_TEMPLATES
                .iter()
                .map(|(r, t)| (r.to_string(), t.to_string()))
                .collect(),
        }
    }
}

impl TemplateTable {
    /// Reads `{"version": ..., "templates": {relation: template}}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let table: TemplateTable = serde_json::from_str(&text)
            .map_err(|e| Error::schema(Some(e.line()), e.to_string()))?;
        if table.templates.is_empty() {
            return Err(Error::schema(None, "template table is empty"));
        }
        Ok(table)
    }

    pub fn get(&self, relation: &str) -> Result<&str> {
        self.templates
            .get(relation)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownRelation(relation.to_string()))
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// Question for a head event and relation: the head as a sentence
    /// followed by the relation's template.
    pub fn render(&self, head: &str, relation: &str) -> Result<String> {
        let template = self.get(relation)?;
        let head = head.trim();
        let sep = if head.ends_with(['.', '!', '?']) { " " } else { ". " };
        Ok(format!("{head}{sep}{template}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xwant_renders_the_wanted_to_template() {
        let t = TemplateTable::default();
        let q = t.render("PersonX eats breakfast", "xWant").unwrap();
        assert_eq!(q, "PersonX eats breakfast. As a result, PersonX wanted to");
        let q = t.render("PersonX eats breakfast.", "xWant").unwrap();
        assert_eq!(q, "PersonX eats breakfast. As a result, PersonX wanted to");
    }

    #[test]
    fn unknown_relation() {
        assert!(matches!(
            TemplateTable::default().render("x", "xDance"),
            Err(Error::UnknownRelation(_))
        ));
    }

    #[test]
    fn load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        std::fs::write(&p, serde_json::to_string(&TemplateTable::default()).unwrap()).unwrap();
        assert_eq!(TemplateTable::load(&p).unwrap(), TemplateTable::default());
        std::fs::write(&p, r#"{"version":"v","templates":{}}"#).unwrap();
        assert!(TemplateTable::load(&p).is_err());
    }
}
