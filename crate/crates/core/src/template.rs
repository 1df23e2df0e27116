//! Prompt templates with `[[key]]` placeholders.
//!
//! A placeholder is `[[` followed by an identifier (`[A-Za-z0-9_]+`) and
//! `]]`. A literal `[[` is written `[[[[`. Substitution is one left-to-right
//! pass over the template; substituted values are never rescanned.

use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, RowSource, Value};
use crate::query::{CompletionQuery, GenParams, Payload, Query, QueryError, RankedQuery};

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("unclosed placeholder starting at byte {0}")]
    Unclosed(usize),
    #[error("invalid placeholder identifier {ident:?} at byte {pos}")]
    BadIdentifier { pos: usize, ident: String },
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<TemplateError>,
    },
    #[error("image column {0:?} is missing")]
    MissingImageColumn(String),
    #[error("placeholder {0:?} does not name a slot")]
    UnknownSlot(String),
    #[error("slot expansion produced no candidates")]
    EmptyExpansion,
    #[error("answer_choices must not be empty")]
    EmptyChoices,
    #[error("template record needs either answer_choices or slots, not both")]
    AmbiguousRecord,
    #[error(transparent)]
    Query(#[from] QueryError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Key(String),
}

/// A parsed text with placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    source: String,
    segments: Vec<Segment>,
}

impl Pattern {
    pub fn parse(source: &str) -> Result<Pattern, TemplateError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut rest = source;
        let mut offset = 0;
        while let Some(start) = rest.find("[[") {
            literal.push_str(&rest[..start]);
            let after = &rest[start..];
            if let Some(tail) = after.strip_prefix("[[[[") {
                literal.push_str("[[");
                rest = tail;
                offset += start + 4;
                continue;
            }
            let pos = offset + start;
            let close = after[2..].find("]]").ok_or(TemplateError::Unclosed(pos))?;
            let ident = &after[2..2 + close];
            if ident.is_empty() || !ident.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
                return Err(TemplateError::BadIdentifier { pos, ident: ident.to_string() });
            }
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Key(ident.to_string()));
            let consumed = start + 2 + close + 2;
            rest = &rest[consumed..];
            offset += consumed;
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Pattern { source: source.to_string(), segments })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Distinct placeholder keys in order of first appearance.
    pub fn keys(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Key(k) if seen.insert(k.as_str()) => Some(k.as_str()),
                _ => None,
            })
            .collect()
    }

    /// The text with every placeholder removed.
    pub fn skeleton(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(l) => Some(l.as_str()),
                Segment::Key(_) => None,
            })
            .collect()
    }

    pub fn render(&self, mut lookup: impl FnMut(&str) -> Option<String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.source.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(l) => out.push_str(l),
                Segment::Key(k) => out.push_str(&lookup(k).ok_or_else(|| TemplateError::MissingKey(k.clone()))?),
            }
        }
        Ok(out)
    }

    fn render_row<R: RowSource + ?Sized>(&self, row: &R) -> Result<String, TemplateError> {
        self.render(|k| row.cell(k).map(|v| v.render().into_owned()))
    }
}

/// A text template. With `answer_choices` it yields ranked queries,
/// otherwise completion queries. Choices may contain placeholders, which
/// are resolved per row.
#[derive(Debug, Clone, PartialEq)]
pub struct StringTemplate {
    prompt: Pattern,
    answer_choices: Option<Vec<Pattern>>,
    gen_params: GenParams,
}

impl StringTemplate {
    pub fn new(template: &str) -> Result<Self, TemplateError> {
        Ok(StringTemplate { prompt: Pattern::parse(template)?, answer_choices: None, gen_params: GenParams::default() })
    }

    pub fn with_choices<S: AsRef<str>>(template: &str, choices: &[S]) -> Result<Self, TemplateError> {
        if choices.is_empty() {
            return Err(TemplateError::EmptyChoices);
        }
        let answer_choices = choices.iter().map(|c| Pattern::parse(c.as_ref())).collect::<Result<_, _>>()?;
        Ok(StringTemplate { answer_choices: Some(answer_choices), ..Self::new(template)? })
    }

    pub fn gen_params(mut self, params: GenParams) -> Self {
        self.gen_params = params;
        self
    }

    pub fn prompt(&self) -> &Pattern {
        &self.prompt
    }

    pub fn is_ranked(&self) -> bool {
        self.answer_choices.is_some()
    }

    /// Choices as written, placeholders unresolved.
    pub fn answer_choices(&self) -> Option<Vec<&str>> {
        self.answer_choices.as_ref().map(|c| c.iter().map(Pattern::source).collect())
    }

    pub fn apply<R: RowSource + ?Sized>(&self, row: &R) -> Result<Query, TemplateError> {
        let prompt = self.prompt.render_row(row)?;
        Ok(match &self.answer_choices {
            None => CompletionQuery::with_params(prompt, self.gen_params.clone())?.into(),
            Some(choices) => {
                let candidates = choices.iter().map(|c| c.render_row(row)).collect::<Result<_, _>>()?;
                RankedQuery::text(prompt, candidates)?.into()
            }
        })
    }

    /// Fills every placeholder of the prompt and the choices with `fill`.
    pub fn apply_uniform(&self, fill: &str) -> Result<Query, TemplateError> {
        let prompt = self.prompt.render(|_| Some(fill.to_string()))?;
        Ok(match &self.answer_choices {
            None => CompletionQuery::with_params(prompt, self.gen_params.clone())?.into(),
            Some(choices) => {
                let candidates =
                    choices.iter().map(|c| c.render(|_| Some(fill.to_string()))).collect::<Result<_, _>>()?;
                RankedQuery::text(prompt, candidates)?.into()
            }
        })
    }
}

/// Caption template over named slots; every row becomes a ranked query of
/// its image against the cartesian expansion of the slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTemplate {
    slots: IndexMap<String, Vec<String>>,
    caption: Pattern,
    image_column: String,
    candidates: Vec<String>,
}

pub const DEFAULT_IMAGE_COLUMN: &str = "image";

impl ImageTemplate {
    pub fn new(slots: IndexMap<String, Vec<String>>, template: &str) -> Result<Self, TemplateError> {
        let caption = Pattern::parse(template)?;
        if let Some(unknown) = caption.keys().into_iter().find(|k| !slots.contains_key(*k)) {
            return Err(TemplateError::UnknownSlot(unknown.to_string()));
        }
        let candidates = expand(&slots, &caption)?;
        Ok(ImageTemplate { slots, caption, image_column: DEFAULT_IMAGE_COLUMN.to_string(), candidates })
    }

    pub fn image_column(mut self, column: impl Into<String>) -> Self {
        self.image_column = column.into();
        self
    }

    pub fn slots(&self) -> &IndexMap<String, Vec<String>> {
        &self.slots
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn apply<R: RowSource + ?Sized>(&self, row: &R) -> Result<Query, TemplateError> {
        let path = match row.cell(&self.image_column) {
            Some(Value::ImageRef(p) | Value::Text(p)) => p.to_string(),
            _ => return Err(TemplateError::MissingImageColumn(self.image_column.clone())),
        };
        Ok(RankedQuery::new(Payload::Image(path), self.candidates.clone())?.into())
    }
}

/// Cartesian expansion in slot-declaration order, first slot outermost.
fn expand(slots: &IndexMap<String, Vec<String>>, caption: &Pattern) -> Result<Vec<String>, TemplateError> {
    let mut combos: Vec<Vec<&str>> = vec![Vec::new()];
    for values in slots.values() {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(v.as_str());
                    next
                })
            })
            .collect();
    }
    if combos.is_empty() {
        return Err(TemplateError::EmptyExpansion);
    }
    let keys: Vec<&String> = slots.keys().collect();
    let candidates = combos
        .iter()
        .map(|combo| caption.render(|k| keys.iter().position(|s| *s == k).map(|i| combo[i].to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(candidates)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Template {
    String(StringTemplate),
    Image(ImageTemplate),
}

impl From<StringTemplate> for Template {
    fn from(t: StringTemplate) -> Self {
        Template::String(t)
    }
}

impl From<ImageTemplate> for Template {
    fn from(t: ImageTemplate) -> Self {
        Template::Image(t)
    }
}

impl Template {
    pub fn apply<R: RowSource + ?Sized>(&self, row: &R) -> Result<Query, TemplateError> {
        match self {
            Template::String(t) => t.apply(row),
            Template::Image(t) => t.apply(row),
        }
    }

    /// One query per row, in row order. The first failing row aborts.
    pub fn apply_to_dataset(&self, dataset: &Dataset) -> Result<Vec<Query>, TemplateError> {
        dataset
            .rows()
            .map(|row| self.apply(&row).map_err(|e| TemplateError::Row { row: row.index(), source: Box::new(e) }))
            .collect()
    }

    pub fn is_ranked(&self) -> bool {
        match self {
            Template::String(t) => t.is_ranked(),
            Template::Image(_) => true,
        }
    }
}

/// Flat serialized form of a template, as stored in task configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRecord {
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<IndexMap<String, Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<String>,
}

impl TryFrom<&TemplateRecord> for Template {
    type Error = TemplateError;

    fn try_from(r: &TemplateRecord) -> Result<Self, Self::Error> {
        match (&r.answer_choices, &r.slots) {
            (Some(_), Some(_)) => Err(TemplateError::AmbiguousRecord),
            (None, Some(slots)) => {
                let t = ImageTemplate::new(slots.clone(), &r.template)?;
                Ok(match &r.image_column {
                    Some(c) => t.image_column(c.clone()),
                    None => t,
                }
                .into())
            }
            (choices, None) => {
                let defaults = GenParams::default();
                let params = GenParams {
                    max_tokens: r.max_tokens.unwrap_or(defaults.max_tokens),
                    temperature: r.temperature.unwrap_or(defaults.temperature),
                    stop: r.stop.clone(),
                };
                let t = match choices {
                    Some(c) => StringTemplate::with_choices(&r.template, c)?,
                    None => StringTemplate::new(&r.template)?,
                };
                Ok(t.gen_params(params).into())
            }
        }
    }
}
