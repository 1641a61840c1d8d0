use std::path::Path;

use super::PromptError;

pub const PARENT: &str = "parent";
pub const INSPIRATIONS: &str = "inspirations";
pub const IDEA: &str = "idea";
pub const ERROR: &str = "error";
pub const FORMAT_INSTRUCTIONS: &str = "format_instructions";

const KNOWN: [&str; 5] = [PARENT, INSPIRATIONS, IDEA, ERROR, FORMAT_INSTRUCTIONS];

pub(crate) const BUILTIN_POOL: [(&str, &str); 3] = [
    ("conservative-optimize", include_str!("../../assets/templates/conservative-optimize.txt")),
    ("aggressive-rewrite", include_str!("../../assets/templates/aggressive-rewrite.txt")),
    ("profile-guided", include_str!("../../assets/templates/profile-guided.txt")),
];
pub(crate) const META_IMPLEMENT: &str = include_str!("../../assets/templates/meta-implement.txt");
pub(crate) const REPAIR: &str = include_str!("../../assets/templates/repair.txt");

/// A prompt template with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    id: String,
    body: String,
}

/// Iterates `(start, end, name)` for every `{{identifier}}` in `body`.
fn placeholders(body: &str) -> impl Iterator<Item = (usize, usize, &str)> {
    let mut cursor = 0;
    std::iter::from_fn(move || {
        while let Some(rel) = body[cursor..].find("{{") {
            let start = cursor + rel;
            let inner_start = start + 2;
            let Some(close) = body[inner_start..].find("}}") else {
                cursor = body.len();
                return None;
            };
            let name = &body[inner_start..inner_start + close];
            if !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                let end = inner_start + close + 2;
                cursor = end;
                return Some((start, end, name));
            }
            cursor = inner_start;
        }
        None
    })
}

impl Template {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Result<Self, PromptError> {
        let id = id.into();
        let body = body.into();
        if let Some((_, _, name)) = placeholders(&body).find(|(_, _, n)| !KNOWN.contains(n)) {
            return Err(PromptError::UnknownPlaceholder {
                template: id,
                name: name.to_string(),
            });
        }
        Ok(Self { id, body })
    }

    /// Loads a template file; its id is the file stem.
    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let body = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Self::new(id, body)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn uses(&self, name: &str) -> bool {
        placeholders(&self.body).any(|(_, _, n)| n == name)
    }

    pub(crate) fn require(&self, names: &[&str]) -> Result<(), PromptError> {
        match names.iter().find(|n| !self.uses(n)) {
            Some(missing) => Err(PromptError::MissingPlaceholder {
                template: self.id.clone(),
                name: missing.to_string(),
            }),
            None => Ok(()),
        }
    }

    /// Single-pass substitution. Substituted text is never rescanned, so
    /// placeholder-like text inside program sources stays literal.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.body.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
        let mut last = 0;
        for (start, end, name) in placeholders(&self.body) {
            out.push_str(&self.body[last..start]);
            let value = values.iter().find(|(n, _)| *n == name).map_or("", |(_, v)| *v);
            out.push_str(value);
            last = end;
        }
        out.push_str(&self.body[last..]);
        out
    }
}
