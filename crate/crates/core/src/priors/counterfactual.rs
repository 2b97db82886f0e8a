use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{placeholders, render, tokenize, AttributeGrammar, Attributes};
use crate::error::{Error, Result};

/// Expression with exactly one attribute slot replaced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualQuery {
    pub text: String,
    pub source_expression_id: String,
    pub perturbed_slot: String,
    pub original_value: String,
    pub new_value: String,
}

impl CounterfactualQuery {
    /// Record-local invariants (no access to the source text).
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("empty counterfactual text".into());
        }
        if self.perturbed_slot.is_empty() {
            return Err("missing perturbed_slot".into());
        }
        if self.new_value == self.original_value {
            return Err(format!(
                "new_value equals original_value (`{}`)",
                self.new_value
            ));
        }
        if !tokenize(&self.text).contains(&self.new_value.to_lowercase()) {
            return Err(format!(
                "text does not contain new_value `{}`",
                self.new_value
            ));
        }
        Ok(())
    }

    /// True when the token-level difference from `source` is confined to
    /// the perturbed value.
    pub fn is_single_edit_of(&self, source: &str) -> bool {
        let a = tokenize(source);
        let b = tokenize(&self.text);
        if a.len() != b.len() {
            return false;
        }
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        diffs.len() == 1
            && a[diffs[0]] == self.original_value.to_lowercase()
            && b[diffs[0]] == self.new_value.to_lowercase()
    }
}

fn find_template<'a>(
    grammar: &'a AttributeGrammar,
    text: &str,
    attrs: &Attributes,
) -> Option<&'a str> {
    grammar.templates.iter().map(String::as_str).find(|t| {
        let slots = placeholders(t);
        slots.len() == attrs.len()
            && slots.iter().all(|s| attrs.contains_key(s))
            && render(t, attrs)
                .map(|r| tokenize(&r) == tokenize(text))
                .unwrap_or(false)
    })
}

/// Swaps one realized slot (chosen uniformly) for a different value
/// (chosen uniformly among the rest) and re-renders the expression.
pub fn perturb_expression<R: Rng>(
    source_expression_id: &str,
    text: &str,
    attributes: &Attributes,
    grammar: &AttributeGrammar,
    rng: &mut R,
) -> Result<CounterfactualQuery> {
    let slots: Vec<&String> = grammar
        .slots
        .iter()
        .filter(|s| attributes.contains_key(*s) && grammar.values(s).len() >= 2)
        .collect();
    if slots.is_empty() {
        return Err(Error::Invalid(format!(
            "expression `{text}` has no perturbable slot"
        )));
    }
    let slot = slots[rng.gen_range(0..slots.len())].clone();
    let original = attributes[&slot].clone();
    let others: Vec<&String> = grammar
        .values(&slot)
        .iter()
        .filter(|v| **v != original)
        .collect();
    let new_value = others[rng.gen_range(0..others.len())].clone();

    let mut attrs = attributes.clone();
    attrs.insert(slot.clone(), new_value.clone());
    let new_text = match find_template(grammar, text, attributes) {
        Some(t) => render(t, &attrs)?,
        None => {
            // Free-form text: substitute the single token carrying the value.
            let mut toks = tokenize(text);
            let hits: Vec<usize> = (0..toks.len())
                .filter(|&i| toks[i] == original.to_lowercase())
                .collect();
            if hits.len() != 1 {
                return Err(Error::Invalid(format!(
                    "cannot locate slot `{slot}` in `{text}`"
                )));
            }
            toks[hits[0]] = new_value.clone();
            toks.join(" ")
        }
    };
    Ok(CounterfactualQuery {
        text: new_text,
        source_expression_id: source_expression_id.to_string(),
        perturbed_slot: slot,
        original_value: original,
        new_value,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CounterfactualFile {
    Grouped(BTreeMap<String, Vec<CounterfactualQuery>>),
    Flat(Vec<CounterfactualQuery>),
}

/// Parses counterfactual records, either grouped by expression id or as a
/// flat list, enforcing record invariants.
pub fn parse_counterfactuals(json: &str) -> Result<BTreeMap<String, Vec<CounterfactualQuery>>> {
    let parsed: CounterfactualFile =
        serde_json::from_str(json).map_err(|e| Error::Format(format!("counterfactuals: {e}")))?;
    let grouped = match parsed {
        CounterfactualFile::Grouped(m) => m,
        CounterfactualFile::Flat(list) => {
            let mut m: BTreeMap<String, Vec<CounterfactualQuery>> = BTreeMap::new();
            for q in list {
                m.entry(q.source_expression_id.clone()).or_default().push(q);
            }
            m
        }
    };
    let mut index = 0;
    for (id, list) in &grouped {
        for q in list {
            if &q.source_expression_id != id {
                return Err(Error::Record {
                    index,
                    msg: format!(
                        "source_expression_id `{}` filed under `{id}`",
                        q.source_expression_id
                    ),
                });
            }
            q.check().map_err(|msg| Error::Record {
                index,
                msg: format!("{id}: {msg}"),
            })?;
            index += 1;
        }
    }
    Ok(grouped)
}

pub fn load_counterfactuals(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, Vec<CounterfactualQuery>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_counterfactuals(&text)
}
