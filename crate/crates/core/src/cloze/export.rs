use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{render_cloze, stable_u64, AnswerKey, ClozeItem, ClozePassage};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::model::Modality;

/// Counts written by an export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub items: usize,
    pub blanks: usize,
    pub per_modality: BTreeMap<Modality, usize>,
    pub base_seed: u64,
}

/// Per-item rendering seed, derived from the run seed and the media id so
/// that the same blank number lands on different letters across items.
pub fn item_seed(base_seed: u64, media_id: &str) -> u64 {
    stable_u64(&[&base_seed.to_le_bytes(), media_id.as_bytes()])
}

/// Renders every passage and writes the judge-visible items and the answer
/// keys to separate JSONL files.
pub fn export_benchmark(
    passages: &[ClozePassage],
    base_seed: u64,
    items_path: &Path,
    keys_path: &Path,
) -> std::io::Result<ExportSummary> {
    let mut items = Vec::with_capacity(passages.len());
    let mut keys = Vec::with_capacity(passages.len());
    let mut per_modality = BTreeMap::new();
    let mut blanks = 0;
    for p in passages {
        let rendered = render_cloze(p, item_seed(base_seed, p.media_id()));
        for b in &rendered.item.blanks {
            *per_modality.entry(b.required_modality).or_insert(0) += 1;
        }
        blanks += rendered.item.blanks.len();
        items.push(rendered.item);
        keys.push(rendered.answer_key);
    }
    write_jsonl(items_path, &items)?;
    write_jsonl(keys_path, &keys)?;
    Ok(ExportSummary { items: items.len(), blanks, per_modality, base_seed })
}

/// Reads an exported benchmark back, pairing each item with its key.
pub fn load_benchmark(items_path: &Path, keys_path: &Path) -> Result<Vec<(ClozeItem, AnswerKey)>, JsonlError> {
    let items: Vec<ClozeItem> = read_jsonl(items_path)?;
    let mut keys: HashMap<String, AnswerKey> =
        read_jsonl::<AnswerKey>(keys_path)?.into_iter().map(|k| (k.media_id.clone(), k)).collect();
    items
        .into_iter()
        .map(|item| {
            let key = keys.remove(&item.media_id).ok_or_else(|| JsonlError::Parse {
                path: keys_path.to_path_buf(),
                line: 0,
                message: format!("no answer key for item `{}`", item.media_id),
            })?;
            Ok((item, key))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloze::fixtures::default_passage;

    #[test]
    fn items_and_keys_are_split() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, kp) = (dir.path().join("items.jsonl"), dir.path().join("keys.jsonl"));
        let passages = vec![default_passage("a"), default_passage("b")];
        let s = export_benchmark(&passages, 11, &ip, &kp).unwrap();
        assert_eq!((s.items, s.blanks), (2, 60));
        assert_eq!(s.per_modality[&Modality::AudioVisual], 10);
        let items_text = std::fs::read_to_string(&ip).unwrap();
        assert!(!items_text.contains("\"key\""));
        let loaded = load_benchmark(&ip, &kp).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_ne!(loaded[0].0.seed, loaded[1].0.seed);
        assert_eq!(loaded[0].0.seed, item_seed(11, "a"));
    }
}
