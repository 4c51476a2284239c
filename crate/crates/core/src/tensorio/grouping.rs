//! Grouping of 2-D weight matrices into transformer blocks by name.
//!
//! Patterns are globs over the full tensor name: `*` matches any run of
//! characters and `{i}` captures the decimal block index. Exactly one `{i}`
//! is required in the block pattern.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::WeightStore;

#[derive(Debug, Error)]
pub enum GroupingError {
    #[error("invalid pattern `{pattern}`: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("unknown grouping preset `{0}` (expected llama, gpt2 or a rules file)")]
    UnknownPreset(String),
    #[error("block indices are not contiguous: missing {missing:?} between {first} and {last}")]
    NonContiguous {
        first: usize,
        last: usize,
        missing: Vec<usize>,
    },
    #[error("tensor `{name}`: block index `{index}` out of range")]
    BadIndex { name: String, index: String },
    #[error("cannot read grouping rules: {0}")]
    Rules(String),
}

/// Rules file schema: `{"block_pattern": "...", "exclude_patterns": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingRules {
    pub block_pattern: String,
    #[serde(default)]
    pub exclude_patterns: Vec<String>,
}

impl GroupingRules {
    /// `model.layers.{i}.*`, excluding embeddings and the LM head.
    pub fn llama() -> Self {
        GroupingRules {
            block_pattern: "model.layers.{i}.*".into(),
            exclude_patterns: vec!["model.embed_tokens.*".into(), "lm_head.*".into()],
        }
    }

    /// `h.{i}.*` (bare GPT-2 module names), excluding token/position
    /// embeddings. Checkpoints saved from the LM-head wrapper carry a
    /// `transformer.` prefix and need a rules file.
    pub fn gpt2() -> Self {
        GroupingRules {
            block_pattern: "h.{i}.*".into(),
            exclude_patterns: vec!["wte.*".into(), "wpe.*".into(), "lm_head.*".into()],
        }
    }

    pub fn preset(name: &str) -> Result<Self, GroupingError> {
        match name {
            "llama" => Ok(Self::llama()),
            "gpt2" => Ok(Self::gpt2()),
            other => Err(GroupingError::UnknownPreset(other.to_string())),
        }
    }

    /// A preset name, or else the path of a rules file.
    pub fn resolve(spec: &str) -> Result<Self, GroupingError> {
        if let Ok(rules) = Self::preset(spec) {
            return Ok(rules);
        }
        match std::fs::read_to_string(spec) {
            Ok(text) => Self::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(GroupingError::UnknownPreset(spec.to_string())),
            Err(e) => Err(GroupingError::Rules(format!("{spec}: {e}"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, GroupingError> {
        serde_json::from_str(text).map_err(|e| GroupingError::Rules(e.to_string()))
    }
}

fn compile(pattern: &str, with_index: bool) -> Result<Regex, GroupingError> {
    let invalid = |reason: &str| GroupingError::InvalidPattern {
        pattern: pattern.to_string(),
        reason: reason.to_string(),
    };
    let captures = pattern.matches("{i}").count();
    match (with_index, captures) {
        (true, 1) | (false, 0) => {}
        (true, _) => return Err(invalid("block pattern needs exactly one `{i}`")),
        (false, _) => return Err(invalid("exclude patterns cannot contain `{i}`")),
    }
    let mut re = String::from("^");
    for (n, piece) in pattern.split("{i}").enumerate() {
        if n > 0 {
            re.push_str(r"(\d+)");
        }
        let literal: Vec<String> = piece.split('*').map(regex::escape).collect();
        re.push_str(&literal.join(".*"));
    }
    re.push('$');
    Regex::new(&re).map_err(|e| invalid(&e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub index: usize,
    pub matrices: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrouping {
    /// Sorted by index; member names sorted.
    pub blocks: Vec<Block>,
    /// Tensors left out of allocation: non-matrices, excluded names and
    /// unmatched matrices.
    pub ungrouped: Vec<String>,
    /// 2-D tensors that matched neither the block pattern nor an exclusion.
    /// Not fatal, reported so that a wrong preset is noticed.
    pub unmatched: Vec<String>,
}

impl BlockGrouping {
    pub fn grouped_names(&self) -> impl Iterator<Item = (usize, &str)> {
        self.blocks
            .iter()
            .flat_map(|b| b.matrices.iter().map(move |m| (b.index, m.as_str())))
    }

    pub fn grouped_count(&self) -> usize {
        self.blocks.iter().map(|b| b.matrices.len()).sum()
    }

    pub fn block_of(&self, name: &str) -> Option<usize> {
        self.grouped_names().find(|(_, n)| *n == name).map(|(b, _)| b)
    }
}

/// Assign every 2-D tensor of `store` to a block, or to the ungrouped list.
pub fn group_blocks(store: &WeightStore, rules: &GroupingRules) -> Result<BlockGrouping, GroupingError> {
    let block_re = compile(&rules.block_pattern, true)?;
    let excludes = rules
        .exclude_patterns
        .iter()
        .map(|p| compile(p, false))
        .collect::<Result<Vec<_>, _>>()?;

    let mut blocks: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut grouping = BlockGrouping::default();

    // store iteration is name-sorted, so output does not depend on file order
    for (name, tensor) in store.iter() {
        if !tensor.is_matrix() || excludes.iter().any(|re| re.is_match(name)) {
            grouping.ungrouped.push(name.to_string());
            continue;
        }
        match block_re.captures(name) {
            Some(caps) => {
                let raw = &caps[1];
                let index: usize = raw.parse().map_err(|_| GroupingError::BadIndex {
                    name: name.to_string(),
                    index: raw.to_string(),
                })?;
                blocks.entry(index).or_default().push(name.to_string());
            }
            None => {
                grouping.ungrouped.push(name.to_string());
                grouping.unmatched.push(name.to_string());
            }
        }
    }

    if let (Some(&first), Some(&last)) = (blocks.keys().next(), blocks.keys().next_back()) {
        let missing: Vec<usize> = (first..=last).filter(|i| !blocks.contains_key(i)).collect();
        if !missing.is_empty() {
            return Err(GroupingError::NonContiguous { first, last, missing });
        }
    }

    grouping.blocks = blocks
        .into_iter()
        .map(|(index, matrices)| Block { index, matrices })
        .collect();
    Ok(grouping)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::{DType, Tensor};

    fn store(names: &[(&str, &[usize])]) -> WeightStore {
        let mut s = WeightStore::new();
        for (name, shape) in names {
            let n = shape.iter().product();
            s.insert(*name, Tensor::new(shape.to_vec(), DType::F32, vec![0.0; n]).unwrap())
                .unwrap();
        }
        s
    }

    #[test]
    fn llama_preset_example() {
        let s = store(&[
            ("model.layers.0.self_attn.q_proj.weight", &[4, 4]),
            ("model.layers.0.mlp.up_proj.weight", &[8, 4]),
            ("model.layers.1.self_attn.q_proj.weight", &[4, 4]),
            ("lm_head.weight", &[10, 4]),
        ]);
        let g = group_blocks(&s, &GroupingRules::llama()).unwrap();
        assert_eq!(
            g.blocks,
            vec![
                Block {
                    index: 0,
                    matrices: vec![
                        "model.layers.0.mlp.up_proj.weight".into(),
                        "model.layers.0.self_attn.q_proj.weight".into()
                    ]
                },
                Block {
                    index: 1,
                    matrices: vec!["model.layers.1.self_attn.q_proj.weight".into()]
                },
            ]
        );
        assert_eq!(g.ungrouped, vec!["lm_head.weight".to_string()]);
        assert!(g.unmatched.is_empty());
    }

    #[test]
    fn single_matching_tensor() {
        let s = store(&[("h.0.attn.c_attn.weight", &[3, 9])]);
        let g = group_blocks(&s, &GroupingRules::gpt2()).unwrap();
        assert_eq!(g.blocks.len(), 1);
        assert_eq!(g.blocks[0].matrices, vec!["h.0.attn.c_attn.weight".to_string()]);
    }

    #[test]
    fn custom_rules_on_three_block_store() {
        let s = store(&[
            ("enc.0.attn", &[4, 4]),
            ("enc.0.ffn", &[4, 8]),
            ("enc.0.norm", &[4]),
            ("enc.1.attn", &[4, 4]),
            ("enc.2.attn", &[4, 4]),
            ("enc.2.ffn", &[4, 8]),
            ("embed", &[16, 4]),
            ("dec.out", &[4, 4]),
        ]);
        let rules = GroupingRules::from_json(r#"{"block_pattern": "enc.{i}.*", "exclude_patterns": ["embed"]}"#).unwrap();
        let g = group_blocks(&s, &rules).unwrap();
        let expected: Vec<(usize, Vec<&str>)> = vec![
            (0, vec!["enc.0.attn", "enc.0.ffn"]),
            (1, vec!["enc.1.attn"]),
            (2, vec!["enc.2.attn", "enc.2.ffn"]),
        ];
        let got: Vec<(usize, Vec<&str>)> = g
            .blocks
            .iter()
            .map(|b| (b.index, b.matrices.iter().map(String::as_str).collect()))
            .collect();
        assert_eq!(got, expected);
        assert_eq!(g.ungrouped, vec!["dec.out", "embed", "enc.0.norm"]);
        assert_eq!(g.unmatched, vec!["dec.out"]);
    }

    #[test]
    fn gap_in_indices_is_an_error() {
        let s = store(&[("h.0.a", &[2, 2]), ("h.2.a", &[2, 2])]);
        let err = group_blocks(&s, &GroupingRules::gpt2()).unwrap_err();
        assert!(matches!(err, GroupingError::NonContiguous { ref missing, .. } if missing == &vec![1]));
    }

    #[test]
    fn pattern_needs_one_capture() {
        let s = store(&[]);
        let rules = GroupingRules {
            block_pattern: "layers.*".into(),
            exclude_patterns: vec![],
        };
        assert!(matches!(group_blocks(&s, &rules), Err(GroupingError::InvalidPattern { .. })));
    }

    #[test]
    fn dots_are_literal() {
        let s = store(&[("hx0xa", &[2, 2])]);
        let g = group_blocks(&s, &GroupingRules::gpt2()).unwrap();
        assert!(g.blocks.is_empty());
        assert_eq!(g.unmatched, vec!["hx0xa"]);
    }
}
