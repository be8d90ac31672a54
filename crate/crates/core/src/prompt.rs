//! Prompt assembly: instructions, few-shot exemplars, table, question.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perturb::PerturbedInstance;
use crate::table::{render_pipe, QaInstance, Table};

pub const DEFAULT_TEMPLATE_ID: &str = "default";
pub const ANSWER_CUE: &str = "Answer:";
pub const MAX_SHOTS: usize = 3;

pub const DEFAULT_INSTRUCTIONS: &str = "Answer the question using the table. \
Reply with the answer only, without explanation.";

/// `{exemplars}` expands to zero or more exemplar blocks, `{table}` to the
/// rendered table followed by a newline (or nothing when the table is
/// omitted).
pub const DEFAULT_TEMPLATE: &str = "{instructions}\n\n{exemplars}{table}Question: {question}\nAnswer:\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {id:?} is missing the {placeholder} placeholder")]
    MissingPlaceholder { id: String, placeholder: &'static str },
    #[error("shots = {shots} but {exemplars} exemplars were supplied")]
    ShotMismatch { shots: usize, exemplars: usize },
    #[error("at most {MAX_SHOTS} shots are supported, got {0}")]
    TooManyShots(usize),
}

/// A few-shot exemplar: an instance plus the answer shown for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    #[serde(flatten)]
    pub instance: QaInstance,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub shots: usize,
    pub exemplars: Vec<Exemplar>,
    pub include_table: bool,
    pub template_id: String,
}

impl PromptSpec {
    pub fn zero_shot(include_table: bool) -> Self {
        Self {
            shots: 0,
            exemplars: Vec::new(),
            include_table,
            template_id: DEFAULT_TEMPLATE_ID.to_owned(),
        }
    }

    /// Takes the first `shots` exemplars from a pool.
    pub fn with_exemplars(
        shots: usize,
        pool: &[Exemplar],
        include_table: bool,
        template_id: &str,
    ) -> Result<Self, PromptError> {
        if shots > MAX_SHOTS {
            return Err(PromptError::TooManyShots(shots));
        }
        if pool.len() < shots {
            return Err(PromptError::ShotMismatch {
                shots,
                exemplars: pool.len(),
            });
        }
        Ok(Self {
            shots,
            exemplars: pool[..shots].to_vec(),
            include_table,
            template_id: template_id.to_owned(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub body: String,
}

impl Template {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Result<Self, PromptError> {
        let id = id.into();
        let body = body.into();
        for placeholder in ["{question}"] {
            if !body.contains(placeholder) {
                return Err(PromptError::MissingPlaceholder { id, placeholder });
            }
        }
        Ok(Self { id, body })
    }
}

/// Named templates; always contains the built-in `default`.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            DEFAULT_TEMPLATE_ID.to_owned(),
            Template {
                id: DEFAULT_TEMPLATE_ID.to_owned(),
                body: DEFAULT_TEMPLATE.to_owned(),
            },
        );
        Self { templates }
    }
}

impl TemplateRegistry {
    pub fn register(&mut self, template: Template) {
        self.templates.insert(template.id.clone(), template);
    }

    pub fn get(&self, id: &str) -> Result<&Template, PromptError> {
        self.templates
            .get(id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_owned()))
    }
}

/// What the target block of a prompt is built from.
#[derive(Debug, Clone, Copy)]
pub struct PromptTarget<'a> {
    pub table: Option<&'a Table>,
    pub question: &'a str,
}

impl<'a> From<&'a QaInstance> for PromptTarget<'a> {
    fn from(i: &'a QaInstance) -> Self {
        Self {
            table: i.table.as_ref(),
            question: &i.question,
        }
    }
}

impl<'a> From<&'a PerturbedInstance> for PromptTarget<'a> {
    fn from(i: &'a PerturbedInstance) -> Self {
        Self {
            table: i.table.as_ref(),
            question: &i.question,
        }
    }
}

fn table_block(table: Option<&Table>, include_table: bool) -> String {
    match table {
        Some(t) if include_table => {
            let mut s = render_pipe(t);
            s.push('\n');
            s
        }
        _ => String::new(),
    }
}

fn exemplar_block(ex: &Exemplar, include_table: bool) -> String {
    format!(
        "{}Question: {}\n{ANSWER_CUE}\n{}\n\n",
        table_block(ex.instance.table.as_ref(), include_table),
        ex.instance.question,
        ex.answer
    )
}

/// Fills the template. Placeholders are substituted in a single left-to-right
/// pass so text inside tables or questions is never re-expanded.
fn fill(body: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in values {
            if let Some(after) = tail
                .strip_prefix('{')
                .and_then(|t| t.strip_prefix(name))
                .and_then(|t| t.strip_prefix('}'))
            {
                out.push_str(value);
                rest = after;
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

pub fn build_prompt<'a>(
    target: impl Into<PromptTarget<'a>>,
    spec: &PromptSpec,
    templates: &TemplateRegistry,
) -> Result<String, PromptError> {
    let target = target.into();
    if spec.shots > MAX_SHOTS {
        return Err(PromptError::TooManyShots(spec.shots));
    }
    if spec.shots != spec.exemplars.len() {
        return Err(PromptError::ShotMismatch {
            shots: spec.shots,
            exemplars: spec.exemplars.len(),
        });
    }
    let template = templates.get(&spec.template_id)?;
    let exemplars: String = spec
        .exemplars
        .iter()
        .map(|e| exemplar_block(e, spec.include_table))
        .collect();
    let table = table_block(target.table, spec.include_table);
    let mut prompt = fill(
        &template.body,
        &[
            ("instructions", DEFAULT_INSTRUCTIONS),
            ("exemplars", &exemplars),
            ("table", &table),
            ("question", target.question),
        ],
    );
    if !prompt.ends_with('\n') {
        prompt.push('\n');
    }
    Ok(prompt)
}
