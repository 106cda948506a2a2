//! Superpixel orderings produced by other explanation methods.
//!
//! The file is a JSON array of `{"image_id", "method", "order"}` objects;
//! `order` lists superpixel ids from most to least important.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingEntry {
    pub image_id: String,
    pub method: String,
    pub order: Vec<usize>,
}

pub fn parse_rankings(text: &str) -> Result<Vec<RankingEntry>, serde_json::Error> {
    serde_json::from_str(text)
}

pub fn read_rankings(path: &Path) -> CliResult<Vec<RankingEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let entries = parse_rankings(&text).map_err(|e| CliError::json(path, e))?;
    let mut seen = std::collections::BTreeSet::new();
    for e in &entries {
        if e.method.is_empty() {
            return Err(CliError::Usage(format!("{}: empty method name", path.display())));
        }
        if !seen.insert((e.method.as_str(), e.image_id.as_str())) {
            return Err(CliError::Usage(format!(
                "{}: duplicate ranking for method {:?} on image {:?}",
                path.display(),
                e.method,
                e.image_id
            )));
        }
    }
    Ok(entries)
}

/// Groups entries by method, keeping first-appearance order.
pub fn group_by_method(entries: &[RankingEntry]) -> Vec<(String, Vec<&RankingEntry>)> {
    let mut groups: Vec<(String, Vec<&RankingEntry>)> = Vec::new();
    for e in entries {
        match groups.iter_mut().find(|(m, _)| *m == e.method) {
            Some((_, list)) => list.push(e),
            None => groups.push((e.method.clone(), vec![e])),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_group() {
        let text = r#"[
            {"image_id": "a", "method": "lime", "order": [3, 1]},
            {"image_id": "a", "method": "gradcam", "order": [0]},
            {"image_id": "b", "method": "lime", "order": []}
        ]"#;
        let entries = parse_rankings(text).unwrap();
        let groups = group_by_method(&entries);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].0, "lime");
        assert_eq!(groups[0].1.len(), 2);
        assert_eq!(groups[1].1[0].order, vec![0]);
    }

    #[test]
    fn malformed_input_rejected() {
        assert!(parse_rankings("{}").is_err());
        assert!(parse_rankings(r#"[{"image_id": "a", "method": "m", "order": [-1]}]"#).is_err());
        assert!(parse_rankings(r#"[{"image_id": "a", "method": "m", "order": [], "x": 1}]"#).is_err());
    }

    #[test]
    fn duplicates_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        std::fs::write(
            &path,
            r#"[{"image_id": "a", "method": "m", "order": [1]}, {"image_id": "a", "method": "m", "order": [0]}]"#,
        )
        .unwrap();
        assert!(read_rankings(&path).is_err());
    }
}
