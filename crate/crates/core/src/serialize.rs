//! Records to natural-language profiles, ICL prompts and training sequences.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Record, Schema};
use crate::error::{Error, Result};

pub const ANSWER_DELIMITER: &str = "### Answer:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounForms {
    pub subject: String,
    pub object: String,
    pub possessive: String,
}

impl PronounForms {
    fn neutral() -> Self {
        Self {
            subject: "they".into(),
            object: "them".into(),
            possessive: "their".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounRule {
    /// Attribute whose value selects the pronoun forms.
    pub attribute: String,
    pub forms: BTreeMap<String, PronounForms>,
}

/// A serialization template read from a TOML file.
///
/// `profile` holds `{attribute}` slots and the pronoun slots `{subject}`,
/// `{object}`, `{possessive}` (capitalized variants `{Subject}` etc. start a
/// sentence). `phrases.<attribute>` maps raw values to the text that replaces
/// the slot; phrases may themselves use pronoun slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub instruction: String,
    pub question: String,
    pub profile: String,
    #[serde(default = "default_answer_prefix")]
    pub answer_prefix: String,
    /// Replaces the sensitive slot when the sensitive attribute is suppressed.
    #[serde(default = "default_placeholder")]
    pub sensitive_placeholder: String,
    #[serde(default)]
    pub pronouns: Option<PronounRule>,
    #[serde(default)]
    pub phrases: BTreeMap<String, BTreeMap<String, String>>,
}

fn default_answer_prefix() -> String {
    ANSWER_DELIMITER.to_string()
}

fn default_placeholder() -> String {
    "person".to_string()
}

impl Template {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Template(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Every slot must name a schema attribute or a pronoun form.
    pub fn check(&self, schema: &Schema) -> Result<()> {
        let mut texts = vec![self.profile.as_str()];
        texts.extend(self.phrases.values().flat_map(|m| m.values().map(String::as_str)));
        for text in texts {
            for slot in slots(text)? {
                if !is_pronoun_slot(slot) && schema.index_of(slot).is_none() {
                    return Err(Error::Template(format!("unknown slot `{{{slot}}}`")));
                }
            }
        }
        if let Some(p) = &self.pronouns {
            if schema.index_of(&p.attribute).is_none() {
                return Err(Error::Template(format!(
                    "pronoun attribute `{}` not in schema",
                    p.attribute
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub include_sensitive: bool,
    pub neutral_pronouns: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            include_sensitive: true,
            neutral_pronouns: false,
        }
    }
}

impl RenderOptions {
    pub fn removal() -> Self {
        Self {
            include_sensitive: false,
            neutral_pronouns: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedExample {
    pub profile: String,
    pub question: String,
    pub answer: Option<String>,
    pub source_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub instruction: String,
    pub demonstrations: Vec<SerializedExample>,
    pub query: SerializedExample,
    pub render_options: RenderOptions,
}

fn is_pronoun_slot(slot: &str) -> bool {
    matches!(
        slot,
        "subject" | "object" | "possessive" | "Subject" | "Object" | "Possessive"
    )
}

fn slots(text: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed slot in `{text}`")))?;
        out.push(&after[..end]);
        rest = &after[end + 1..];
    }
    Ok(out)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Replace `{slot}`s using `lookup`.
fn fill(text: &str, mut lookup: impl FnMut(&str) -> Result<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len() + 64);
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed slot in `{text}`")))?;
        out.push_str(&lookup(&after[..end])?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn serialize_record(
    r: &Record,
    schema: &Schema,
    t: &Template,
    opts: RenderOptions,
) -> Result<SerializedExample> {
    let sensitive = schema.sensitive_index();
    let forms = if opts.neutral_pronouns {
        PronounForms::neutral()
    } else {
        match &t.pronouns {
            Some(rule) => {
                let i = schema.index_of(&rule.attribute).ok_or_else(|| {
                    Error::Template(format!("pronoun attribute `{}` not in schema", rule.attribute))
                })?;
                let v = r.values[i].to_string();
                rule.forms.get(&v).cloned().ok_or_else(|| {
                    Error::Template(format!("no pronoun forms for `{v}`"))
                })?
            }
            None => PronounForms::neutral(),
        }
    };
    let pronoun = |slot: &str| -> Option<String> {
        Some(match slot {
            "subject" => forms.subject.clone(),
            "object" => forms.object.clone(),
            "possessive" => forms.possessive.clone(),
            "Subject" => capitalize(&forms.subject),
            "Object" => capitalize(&forms.object),
            "Possessive" => capitalize(&forms.possessive),
            _ => return None,
        })
    };
    let profile = fill(&t.profile, |slot| {
        if let Some(p) = pronoun(slot) {
            return Ok(p);
        }
        let i = schema
            .index_of(slot)
            .ok_or_else(|| Error::Template(format!("unknown slot `{{{slot}}}`")))?;
        if Some(i) == sensitive && !opts.include_sensitive {
            return Ok(t.sensitive_placeholder.clone());
        }
        let raw = r.values[i].to_string();
        match t.phrases.get(slot).and_then(|m| m.get(&raw)) {
            Some(phrase) => fill(phrase, |s| {
                pronoun(s).ok_or_else(|| Error::Template(format!("unknown slot `{{{s}}}` in phrase")))
            }),
            None => Ok(raw),
        }
    })?;
    let profile = if opts.neutral_pronouns {
        neutralize(&profile)
    } else {
        profile
    };
    Ok(SerializedExample {
        profile,
        question: t.question.clone(),
        answer: None,
        source_id: r.id,
    })
}

fn neutral_word(lower: &str, next_is_word: bool) -> Option<&'static str> {
    Some(match lower {
        "he" | "she" => "they",
        "his" | "hers" => "their",
        "him" => "them",
        "her" if next_is_word => "their",
        "her" => "them",
        "himself" | "herself" => "themselves",
        "husband" | "wife" => "spouse",
        "husbands" | "wives" => "spouses",
        _ => return None,
    })
}

fn plural_verb(lower: &str) -> Option<&'static str> {
    Some(match lower {
        "has" => "have",
        "is" => "are",
        "was" => "were",
        "does" => "do",
        "works" => "work",
        _ => return None,
    })
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        capitalize(replacement)
    } else {
        replacement.to_string()
    }
}

/// Replace gendered pronouns and spouse terms with neutral ones, and make the
/// verb after a `they` subject agree.
pub fn neutralize(text: &str) -> String {
    // Split into alternating word / non-word runs.
    let mut pieces: Vec<(bool, &str)> = Vec::new();
    let mut start = 0;
    let mut in_word = None;
    for (i, c) in text.char_indices() {
        let w = c.is_alphabetic();
        match in_word {
            Some(prev) if prev != w => {
                pieces.push((prev, &text[start..i]));
                start = i;
            }
            _ => {}
        }
        in_word = Some(w);
    }
    if let Some(w) = in_word {
        pieces.push((w, &text[start..]));
    }

    let mut out = String::with_capacity(text.len());
    let mut after_they = false;
    for (i, &(is_word, piece)) in pieces.iter().enumerate() {
        if !is_word {
            out.push_str(piece);
            if piece != " " {
                after_they = false;
            }
            continue;
        }
        let next_is_word = matches!(pieces.get(i + 1), Some((false, " ")))
            && matches!(pieces.get(i + 2), Some((true, _)));
        let lower = piece.to_lowercase();
        let word = if after_they {
            plural_verb(&lower).map(|v| match_case(piece, v))
        } else {
            None
        }
        .or_else(|| neutral_word(&lower, next_is_word).map(|n| match_case(piece, n)))
        .unwrap_or_else(|| piece.to_string());
        after_they = word.eq_ignore_ascii_case("they");
        out.push_str(&word);
    }
    out
}

pub fn verbalize(positive: bool) -> &'static str {
    if positive {
        "Yes"
    } else {
        "No"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsedAnswer {
    Positive,
    Negative,
    Unparseable,
}

impl ParsedAnswer {
    /// Unparseable answers count as negative predictions.
    pub fn as_prediction(self) -> bool {
        self == ParsedAnswer::Positive
    }
}

/// First whitespace-delimited word, trailing punctuation ignored, matched
/// case-insensitively against yes/no.
pub fn parse_answer(generated: &str) -> ParsedAnswer {
    let first = generated.split_whitespace().next().unwrap_or("");
    let word = first.trim_end_matches(|c: char| c.is_ascii_punctuation());
    if word.eq_ignore_ascii_case("yes") {
        ParsedAnswer::Positive
    } else if word.eq_ignore_ascii_case("no") {
        ParsedAnswer::Negative
    } else {
        ParsedAnswer::Unparseable
    }
}

fn push_block(out: &mut String, ex: &SerializedExample, answer_prefix: &str) {
    out.push_str("### Profile: ");
    out.push_str(&ex.profile);
    out.push_str("\n\n### Question: ");
    out.push_str(&ex.question);
    out.push('\n');
    out.push_str(answer_prefix);
    out.push(' ');
}

/// Instruction, answered demonstrations, then the query awaiting its answer.
/// The result ends with `"### Answer: "`.
pub fn build_icl_prompt(spec: &PromptSpec) -> Result<String> {
    let mut out = String::new();
    out.push_str("### Instruction: ");
    out.push_str(&spec.instruction);
    out.push_str("\n\n");
    for demo in &spec.demonstrations {
        let answer = demo.answer.as_deref().ok_or_else(|| {
            Error::Template(format!("demonstration {} has no answer", demo.source_id))
        })?;
        push_block(&mut out, demo, ANSWER_DELIMITER);
        out.push_str(answer);
        out.push_str("\n\n");
    }
    push_block(&mut out, &spec.query, ANSWER_DELIMITER);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub text: String,
    /// Byte range of the verbalized answer inside `text`.
    pub target: Range<usize>,
}

pub fn build_training_sequence(
    inst: &str,
    demos: &[SerializedExample],
    query: &SerializedExample,
    positive: bool,
) -> Result<TrainingSequence> {
    let spec = PromptSpec {
        instruction: inst.to_string(),
        demonstrations: demos.to_vec(),
        query: SerializedExample {
            answer: None,
            ..query.clone()
        },
        render_options: RenderOptions::default(),
    };
    let mut text = build_icl_prompt(&spec)?;
    let start = text.len();
    text.push_str(verbalize(positive));
    let end = text.len();
    Ok(TrainingSequence {
        text,
        target: start..end,
    })
}

/// A single answered block with no instruction, used when scoring examples.
pub fn answered_block(ex: &SerializedExample) -> Result<String> {
    let answer = ex
        .answer
        .as_deref()
        .ok_or_else(|| Error::Template(format!("example {} has no answer", ex.source_id)))?;
    let mut out = String::new();
    push_block(&mut out, ex, ANSWER_DELIMITER);
    out.push_str(answer);
    Ok(out)
}

pub fn with_answer(mut ex: SerializedExample, positive: bool) -> SerializedExample {
    ex.answer = Some(verbalize(positive).to_string());
    ex
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Attribute, Kind, Role, Value};
    use proptest::prelude::*;

    fn schema() -> Schema {
        let attr = |n: &str, kind, role| Attribute {
            name: n.into(),
            kind,
            role,
            domain: vec![],
        };
        Schema {
            attributes: vec![
                attr("age", Kind::Numeric, Role::NonSensitive),
                attr("sex", Kind::Categorical, Role::Sensitive),
                attr("relationship", Kind::Categorical, Role::ProxySensitive),
                attr("income", Kind::Categorical, Role::Label),
            ],
            positive: Value::cat("1"),
            majority: None,
            template: None,
            hierarchy: None,
        }
    }

    fn template() -> Template {
        Template::from_toml(
            r#"
id = "mini"
instruction = "Answer the question."
question = "Is income high?"
profile = "This person is a {age} years old {sex}. {Subject} has a job. {Subject} {relationship}."

[pronouns]
attribute = "sex"
[pronouns.forms.Female]
subject = "she"
object = "her"
possessive = "her"
[pronouns.forms.Male]
subject = "he"
object = "him"
possessive = "his"

[phrases.sex]
Female = "female"
Male = "male"

[phrases.relationship]
Husband = "is the husband of the other person in {possessive} household"
Wife = "is the wife of the other person in {possessive} household"
"#,
        )
        .unwrap()
    }

    fn record(id: u64, age: i64, sex: &str, rel: &str) -> Record {
        Record {
            id,
            values: vec![Value::Num(age), Value::cat(sex), Value::cat(rel), Value::cat("1")],
        }
    }

    #[test]
    fn renders_slots_phrases_and_pronouns() {
        let ex = serialize_record(&record(0, 38, "Female", "Wife"), &schema(), &template(), RenderOptions::default()).unwrap();
        assert_eq!(
            ex.profile,
            "This person is a 38 years old female. She has a job. She is the wife of the other person in her household."
        );
    }

    #[test]
    fn removal_neutralizes() {
        let ex = serialize_record(&record(0, 28, "Male", "Husband"), &schema(), &template(), RenderOptions::removal()).unwrap();
        assert_eq!(
            ex.profile,
            "This person is a 28 years old person. They have a job. They are the spouse of the other person in their household."
        );
    }

    #[test]
    fn id_is_not_rendered() {
        let (s, t) = (schema(), template());
        let a = serialize_record(&record(1, 30, "Male", "Husband"), &s, &t, RenderOptions::default()).unwrap();
        let b = serialize_record(&record(99, 30, "Male", "Husband"), &s, &t, RenderOptions::default()).unwrap();
        assert_eq!(a.profile, b.profile);
    }

    #[test]
    fn unknown_slot_is_an_error() {
        let mut t = template();
        t.profile = "{nope}".into();
        assert!(serialize_record(&record(0, 1, "Male", "Husband"), &schema(), &t, RenderOptions::default()).is_err());
        assert!(t.check(&schema()).is_err());
        assert!(template().check(&schema()).is_ok());
    }

    #[test]
    fn neutralize_object_and_possessive_her() {
        assert_eq!(neutralize("I saw her. Her dog likes her cat."), "I saw them. Their dog likes their cat.");
        assert_eq!(neutralize("He is here and she was there."), "They are here and they were there.");
        assert_eq!(neutralize("Hershey is fine"), "Hershey is fine");
    }

    fn ex(id: u64, p: &str, a: Option<&str>) -> SerializedExample {
        SerializedExample {
            profile: p.into(),
            question: "Q?".into(),
            answer: a.map(String::from),
            source_id: id,
        }
    }

    #[test]
    fn zero_shot_prompt() {
        let spec = PromptSpec {
            instruction: "Do it.".into(),
            demonstrations: vec![],
            query: ex(0, "P", None),
            render_options: RenderOptions::default(),
        };
        assert_eq!(
            build_icl_prompt(&spec).unwrap(),
            "### Instruction: Do it.\n\n### Profile: P\n\n### Question: Q?\n### Answer: "
        );
    }

    #[test]
    fn demo_order_is_preserved_and_answers_required() {
        let d1 = ex(1, "A", Some("Yes"));
        let d2 = ex(2, "B", Some("No"));
        let mk = |demos: Vec<SerializedExample>| PromptSpec {
            instruction: "I".into(),
            demonstrations: demos,
            query: ex(0, "P", None),
            render_options: RenderOptions::default(),
        };
        let a = build_icl_prompt(&mk(vec![d1.clone(), d2.clone()])).unwrap();
        let b = build_icl_prompt(&mk(vec![d2.clone(), d1.clone()])).unwrap();
        assert_ne!(a, b);
        assert!(build_icl_prompt(&mk(vec![ex(3, "C", None)])).is_err());
        let one = build_icl_prompt(&mk(vec![d1.clone()])).unwrap();
        assert!(one.len() > build_icl_prompt(&mk(vec![])).unwrap().len());
        assert!(a.len() > one.len());
    }

    #[test]
    fn training_sequence_targets_answer() {
        let seq = build_training_sequence("I", &[], &ex(0, "P", None), true).unwrap();
        assert!(seq.text.ends_with("### Answer: Yes"));
        assert_eq!(&seq.text[seq.target.clone()], "Yes");

        let demos = [ex(1, "A", Some("No")), ex(2, "B", Some("Yes"))];
        let seq = build_training_sequence("I", &demos, &ex(0, "P", None), false).unwrap();
        assert_eq!(
            seq.text,
            "### Instruction: I\n\n### Profile: A\n\n### Question: Q?\n### Answer: No\n\n\
             ### Profile: B\n\n### Question: Q?\n### Answer: Yes\n\n\
             ### Profile: P\n\n### Question: Q?\n### Answer: No"
        );
        assert_eq!(&seq.text[seq.target.clone()], "No");
    }

    #[test]
    fn parse_rules() {
        assert_eq!(parse_answer("Yes"), ParsedAnswer::Positive);
        assert_eq!(parse_answer(" yes, because the profile..."), ParsedAnswer::Positive);
        assert_eq!(parse_answer("NO"), ParsedAnswer::Negative);
        assert_eq!(parse_answer("Income exceeds 50K"), ParsedAnswer::Unparseable);
        assert_eq!(parse_answer(""), ParsedAnswer::Unparseable);
        assert!(!ParsedAnswer::Unparseable.as_prediction());
        assert_eq!(verbalize(true), "Yes");
        assert_eq!(verbalize(false), "No");
    }

    proptest! {
        #[test]
        fn every_value_rendered_once(vals in prop::collection::vec("[a-z]{3,8}", 4)) {
            let names = ["w", "x", "y", "z"];
            let attrs = names.iter().map(|n| Attribute { name: n.to_string(), kind: Kind::Categorical, role: if *n == "z" { Role::Label } else { Role::NonSensitive }, domain: vec![] }).collect();
            let schema = Schema { attributes: attrs, positive: Value::cat("1"), majority: None, template: None, hierarchy: None };
            let t = Template::from_toml(r#"
id = "p"
instruction = "i"
question = "q"
profile = "A <{w}> B <{x}> C <{y}>."
"#).unwrap();
            let r = Record { id: 0, values: vals.iter().map(|v| Value::cat(v.clone())).collect() };
            let ex = serialize_record(&r, &schema, &t, RenderOptions::default()).unwrap();
            for v in &vals[..3] {
                let needle = format!("<{v}>");
                prop_assert_eq!(ex.profile.matches(&needle).count(), 1);
            }
        }
    }
}
