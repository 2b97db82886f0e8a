use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slot name -> attribute value.
pub type Attributes = BTreeMap<String, String>;

/// Small attribute grammar used to render referring expressions and captions.
///
/// Every slot value is a single token, so rendering a template never
/// changes the token count when one value is swapped for another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeGrammar {
    pub slots: Vec<String>,
    pub vocab: BTreeMap<String, Vec<String>>,
    /// Expression templates with `{slot}` placeholders.
    pub templates: Vec<String>,
    /// Template used for proposal captions; must mention every slot.
    pub caption_template: String,
}

impl Default for AttributeGrammar {
    fn default() -> Self {
        let vocab: BTreeMap<String, Vec<String>> = [
            ("category", &["car", "van", "person", "cyclist"][..]),
            ("color", &["red", "white", "black", "silver", "blue"][..]),
            ("location", &["left", "right", "center"][..]),
            ("motion", &["moving", "parked", "turning"][..]),
        ]
        .into_iter()
        .map(|(k, vs)| (k.to_string(), vs.iter().map(|s| s.to_string()).collect()))
        .collect();
        Self {
            slots: ["category", "color", "location", "motion"]
                .map(String::from)
                .to_vec(),
            vocab,
            templates: [
                "the {color} {category} on the {location}",
                "the {color} {category}",
                "the {motion} {color} {category}",
                "the {motion} {category} on the {location}",
                "the {category} on the {location}",
                "the {motion} {color} {category} on the {location}",
            ]
            .map(String::from)
            .to_vec(),
            caption_template: "a {motion} {color} {category} on the {location}".to_string(),
        }
    }
}

impl AttributeGrammar {
    pub fn validate(&self) -> Result<()> {
        for slot in &self.slots {
            let values = self
                .vocab
                .get(slot)
                .ok_or_else(|| Error::Invalid(format!("slot `{slot}` has no vocabulary")))?;
            if values.len() < 2 {
                return Err(Error::Invalid(format!(
                    "slot `{slot}` needs at least two values"
                )));
            }
            if values
                .iter()
                .any(|v| v.is_empty() || v.contains(char::is_whitespace))
            {
                return Err(Error::Invalid(format!(
                    "slot `{slot}` values must be single tokens"
                )));
            }
        }
        for t in self.templates.iter().chain([&self.caption_template]) {
            for s in placeholders(t) {
                if !self.slots.contains(&s) {
                    return Err(Error::Invalid(format!(
                        "template `{t}` uses unknown slot `{s}`"
                    )));
                }
            }
        }
        if placeholders(&self.caption_template).len() != self.slots.len() {
            return Err(Error::Invalid(
                "caption template must mention every slot".into(),
            ));
        }
        Ok(())
    }

    pub fn values(&self, slot: &str) -> &[String] {
        self.vocab.get(slot).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Slot order and one-hot width of the attribute encoding.
    pub fn attribute_dim(&self) -> usize {
        self.slots.iter().map(|s| self.values(s).len()).sum()
    }

    /// Concatenated one-hot blocks, one per slot in grammar order.
    pub fn one_hot(&self, attrs: &Attributes) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.attribute_dim());
        for slot in &self.slots {
            let values = self.values(slot);
            let hit = attrs
                .get(slot)
                .and_then(|v| values.iter().position(|x| x == v));
            out.extend((0..values.len()).map(|i| if Some(i) == hit { 1.0 } else { 0.0 }));
        }
        out
    }

    /// Every token the grammar can emit (template words and slot values).
    pub fn tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |t: &str| {
            if !out.iter().any(|x| x == t) {
                out.push(t.to_string());
            }
        };
        for t in self.templates.iter().chain([&self.caption_template]) {
            for tok in t.split_whitespace().filter(|w| !w.starts_with('{')) {
                push(tok);
            }
        }
        for slot in &self.slots {
            for v in self.values(slot) {
                push(v);
            }
        }
        out
    }

    pub fn caption(&self, attrs: &Attributes) -> Result<String> {
        render(&self.caption_template, attrs)
    }
}

pub fn placeholders(template: &str) -> Vec<String> {
    template
        .split_whitespace()
        .filter_map(|w| w.strip_prefix('{').and_then(|w| w.strip_suffix('}')))
        .map(String::from)
        .collect()
}

pub fn render(template: &str, attrs: &Attributes) -> Result<String> {
    let words = template
        .split_whitespace()
        .map(
            |w| match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                Some(slot) => attrs
                    .get(slot)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("template needs slot `{slot}`"))),
                None => Ok(w.to_string()),
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

/// Lowercased whitespace tokenization shared by every text consumer.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grammar_is_valid() {
        let g = AttributeGrammar::default();
        g.validate().unwrap();
        assert_eq!(g.attribute_dim(), 15);
    }

    #[test]
    fn one_hot_blocks() {
        let g = AttributeGrammar::default();
        let attrs: Attributes = [
            ("category", "van"),
            ("color", "blue"),
            ("location", "left"),
            ("motion", "turning"),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let v = g.one_hot(&attrs);
        let hot: Vec<usize> = v
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot, vec![1, 4 + 4, 9, 12 + 2]);
    }

    #[test]
    fn render_and_placeholders() {
        let attrs: Attributes = [("color", "red"), ("category", "car"), ("location", "left")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        assert_eq!(
            render("the {color} {category} on the {location}", &attrs).unwrap(),
            "the red car on the left"
        );
        assert!(render("the {motion} car", &attrs).is_err());
        assert_eq!(
            placeholders("the {color} {category}"),
            vec!["color", "category"]
        );
    }
}
