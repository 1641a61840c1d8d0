//! Prompt construction and edit-script handling.
//!
//! Four prompt shapes exist: a direct prompt from a randomly chosen pool
//! template, the two meta-prompting stages (idea, then implementation of
//! that idea), and a repair prompt for candidates that fail the fast check.
//! Every code-producing prompt asks for search/replace blocks, which
//! [`parse_edit_script`] and [`apply_edit_script`] turn into a child source.

pub mod edit;
pub mod templates;

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use edit::{apply_edit_script, parse_edit_script, AppliedEdit, EditBlock, EditError, EditScript};
pub use templates::Template;

use crate::program_store::{ProgramId, ProgramRecord};
use templates::{ERROR, FORMAT_INSTRUCTIONS, IDEA, INSPIRATIONS, PARENT};

pub const FORMAT_INSTRUCTIONS_TEXT: &str = "\
Respond with one or more search/replace blocks in exactly this format:

<<<<<<< SEARCH
lines copied exactly from the current program
=======
the lines that replace them
>>>>>>> REPLACE

Every SEARCH section must match the current program character for character,
including indentation. Prefer several small blocks over one large block.";

pub const IDEA_INSTRUCTIONS_TEXT: &str = "\
Do not write any code in this reply. Propose one concrete idea for making the
current program train faster while still reaching the validation-loss target.
Emphasize novelty and creativity: prefer an idea that none of the programs above
has tried. Describe it in a few short paragraphs of plain language, precise
enough that an engineer could implement it from your description alone.";

pub const INSPIRATION_HEADER: &str = "### Inspiration ";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template pool is empty")]
    EmptyPool,
    #[error("meta-prompt idea text is empty")]
    EmptyIdea,
    #[error("repair prompt needs non-empty error text")]
    EmptyErrorText,
    #[error("template `{template}` uses unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` is missing required placeholder `{{{{{name}}}}}`")]
    MissingPlaceholder { template: String, name: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Direct,
    MetaIdea,
    MetaImplement,
    Repair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnippetRole {
    Top,
    Diverse,
}

/// One inspiration program as shown to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    pub id: ProgramId,
    pub role: SnippetRole,
    pub source: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub template_id: String,
    pub parent_source: String,
    pub top_snippets: Vec<Snippet>,
    pub diverse_snippets: Vec<Snippet>,
    pub idea_text: Option<String>,
    pub error_text: Option<String>,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Extra pool templates, one file each; the file stem is the id.
    pub template_files: Vec<PathBuf>,
    pub include_builtin_templates: bool,
    pub idea_char_cap: usize,
    pub error_char_cap: usize,
    /// Total bytes of inspiration source embedded in one prompt.
    pub inspiration_byte_budget: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template_files: Vec::new(),
            include_builtin_templates: true,
            idea_char_cap: 4_000,
            error_char_cap: 8_000,
            inspiration_byte_budget: 64 * 1024,
        }
    }
}

/// Stateless prompt builder.
#[derive(Debug, Clone)]
pub struct PromptEngine {
    pool: Vec<Template>,
    meta_implement: Template,
    repair: Template,
    idea_char_cap: usize,
    error_char_cap: usize,
    inspiration_byte_budget: usize,
}

impl PromptEngine {
    pub fn new(pool: Vec<Template>, config: &PromptConfig) -> Result<Self, PromptError> {
        if pool.is_empty() {
            return Err(PromptError::EmptyPool);
        }
        for t in &pool {
            t.require(&[PARENT, FORMAT_INSTRUCTIONS])?;
        }
        Ok(Self {
            pool,
            meta_implement: Template::new("meta-implement", templates::META_IMPLEMENT)?,
            repair: Template::new("repair", templates::REPAIR)?,
            idea_char_cap: config.idea_char_cap,
            error_char_cap: config.error_char_cap,
            inspiration_byte_budget: config.inspiration_byte_budget,
        })
    }

    /// Built-in pool plus any configured template files.
    pub fn from_config(config: &PromptConfig) -> Result<Self, PromptError> {
        let mut pool = Vec::new();
        if config.include_builtin_templates {
            for (id, body) in templates::BUILTIN_POOL {
                pool.push(Template::new(id, body)?);
            }
        }
        for path in &config.template_files {
            pool.push(Template::from_file(path)?);
        }
        Self::new(pool, config)
    }

    pub fn pool(&self) -> &[Template] {
        &self.pool
    }

    fn choose_template<R: Rng + ?Sized>(&self, rng: &mut R) -> &Template {
        &self.pool[rng.random_range(0..self.pool.len())]
    }

    pub fn build_direct_prompt<R: Rng + ?Sized>(
        &self,
        parent: &ProgramRecord,
        top: &[&ProgramRecord],
        diverse: &[&ProgramRecord],
        rng: &mut R,
    ) -> PromptBundle {
        let template = self.choose_template(rng);
        let (top_snippets, diverse_snippets) = self.snippets(top, diverse);
        let rendered = template.render(&[
            (PARENT, &parent_block(parent)),
            (INSPIRATIONS, &inspirations_block(&top_snippets, &diverse_snippets)),
            (FORMAT_INSTRUCTIONS, FORMAT_INSTRUCTIONS_TEXT),
        ]);
        PromptBundle {
            kind: PromptKind::Direct,
            template_id: template.id().to_string(),
            parent_source: parent.source.clone(),
            top_snippets,
            diverse_snippets,
            idea_text: None,
            error_text: None,
            rendered,
        }
    }

    /// Stage one asks for a plain-language idea; the returned builder turns
    /// that idea into the stage-two implementation prompt.
    pub fn build_meta_prompts<R: Rng + ?Sized>(
        &self,
        parent: &ProgramRecord,
        top: &[&ProgramRecord],
        diverse: &[&ProgramRecord],
        rng: &mut R,
    ) -> (PromptBundle, MetaImplementBuilder) {
        let template = self.choose_template(rng);
        let (top_snippets, diverse_snippets) = self.snippets(top, diverse);
        let parent_text = parent_block(parent);
        let rendered = template.render(&[
            (PARENT, &parent_text),
            (INSPIRATIONS, &inspirations_block(&top_snippets, &diverse_snippets)),
            (FORMAT_INSTRUCTIONS, IDEA_INSTRUCTIONS_TEXT),
        ]);
        let stage1 = PromptBundle {
            kind: PromptKind::MetaIdea,
            template_id: template.id().to_string(),
            parent_source: parent.source.clone(),
            top_snippets,
            diverse_snippets,
            idea_text: None,
            error_text: None,
            rendered,
        };
        let builder = MetaImplementBuilder {
            template: self.meta_implement.clone(),
            template_id: stage1.template_id.clone(),
            parent_source: parent.source.clone(),
            parent_text,
            top_snippets: stage1.top_snippets.clone(),
            diverse_snippets: stage1.diverse_snippets.clone(),
            idea_char_cap: self.idea_char_cap,
        };
        (stage1, builder)
    }

    pub fn build_repair_prompt(&self, candidate_source: &str, error_text: &str) -> Result<PromptBundle, PromptError> {
        if error_text.trim().is_empty() {
            return Err(PromptError::EmptyErrorText);
        }
        let error = truncate_tail(error_text, self.error_char_cap);
        let rendered = self.repair.render(&[
            (PARENT, &fenced("Program:", candidate_source)),
            (ERROR, &error),
            (FORMAT_INSTRUCTIONS, FORMAT_INSTRUCTIONS_TEXT),
        ]);
        Ok(PromptBundle {
            kind: PromptKind::Repair,
            template_id: self.repair.id().to_string(),
            parent_source: candidate_source.to_string(),
            top_snippets: Vec::new(),
            diverse_snippets: Vec::new(),
            idea_text: None,
            error_text: Some(error),
            rendered,
        })
    }

    fn snippets(&self, top: &[&ProgramRecord], diverse: &[&ProgramRecord]) -> (Vec<Snippet>, Vec<Snippet>) {
        let make = |r: &&ProgramRecord, role| Snippet {
            id: r.id,
            role,
            source: r.source.clone(),
            summary: metrics_summary(r),
        };
        let mut all: Vec<Snippet> = top
            .iter()
            .map(|r| make(r, SnippetRole::Top))
            .chain(diverse.iter().map(|r| make(r, SnippetRole::Diverse)))
            .collect();
        fit_budget(&mut all, self.inspiration_byte_budget);
        let split = top.len();
        let diverse = all.split_off(split);
        (all, diverse)
    }
}

/// Second meta-prompting stage, bound to the stage-one context.
#[derive(Debug, Clone)]
pub struct MetaImplementBuilder {
    template: Template,
    template_id: String,
    parent_source: String,
    parent_text: String,
    top_snippets: Vec<Snippet>,
    diverse_snippets: Vec<Snippet>,
    idea_char_cap: usize,
}

impl MetaImplementBuilder {
    pub fn template_id(&self) -> &str {
        &self.template_id
    }

    pub fn build(&self, idea: &str) -> Result<PromptBundle, PromptError> {
        let idea = idea.trim();
        if idea.is_empty() {
            return Err(PromptError::EmptyIdea);
        }
        let idea = truncate_head(idea, self.idea_char_cap);
        let rendered = self.template.render(&[
            (IDEA, &idea),
            (PARENT, &self.parent_text),
            (FORMAT_INSTRUCTIONS, FORMAT_INSTRUCTIONS_TEXT),
        ]);
        Ok(PromptBundle {
            kind: PromptKind::MetaImplement,
            template_id: self.template_id.clone(),
            parent_source: self.parent_source.clone(),
            top_snippets: self.top_snippets.clone(),
            diverse_snippets: self.diverse_snippets.clone(),
            idea_text: Some(idea),
            error_text: None,
            rendered,
        })
    }
}

/// Score, final loss, step time and the three hottest sections.
pub fn metrics_summary(record: &ProgramRecord) -> String {
    let Some(m) = &record.metrics else {
        return "no metrics".to_string();
    };
    let score = record.score.map_or("n/a".to_string(), |s| format!("{s:.6}"));
    let sections = m
        .top_sections(3)
        .iter()
        .map(|s| format!("{} {:.1}%", s.name, s.pct_of_total))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "score {score}, val_loss {:.6}, step_avg_time {:.6} s; hottest sections: {sections}",
        m.final_val_loss, m.step_avg_time
    )
}

fn fenced(header: &str, source: &str) -> String {
    format!("{header}\n```\n{source}\n```")
}

fn parent_block(parent: &ProgramRecord) -> String {
    fenced(&format!("Current program ({}):", metrics_summary(parent)), &parent.source)
}

fn inspirations_block(top: &[Snippet], diverse: &[Snippet]) -> String {
    if top.is_empty() && diverse.is_empty() {
        return String::new();
    }
    let mut out = String::from("Reference programs from the database:\n");
    for (i, s) in top.iter().chain(diverse).enumerate() {
        let role = match s.role {
            SnippetRole::Top => "top",
            SnippetRole::Diverse => "diverse",
        };
        out.push('\n');
        out.push_str(&fenced(
            &format!("{INSPIRATION_HEADER}{} ({role} program {}; {}):", i + 1, s.id, s.summary),
            &s.source,
        ));
        out.push('\n');
    }
    out
}

/// Shrinks sources, least elite (last) first, until the total fits.
/// Truncation markers do not count against the budget.
fn fit_budget(snippets: &mut [Snippet], budget: usize) {
    let mut total: usize = snippets.iter().map(|s| s.source.len()).sum();
    for s in snippets.iter_mut().rev() {
        if total <= budget {
            break;
        }
        let excess = total - budget;
        let keep = s.source.len().saturating_sub(excess);
        let before = s.source.len();
        s.source = truncate_bytes(&s.source, keep);
        total = total - before + keep;
    }
}

fn truncate_bytes(text: &str, keep: usize) -> String {
    if text.len() <= keep {
        return text.to_string();
    }
    let mut cut = keep;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}\n... [truncated {} bytes]", &text[..cut], text.len() - cut)
}

/// Keeps the first `cap` characters.
fn truncate_head(text: &str, cap: usize) -> String {
    match text.char_indices().nth(cap) {
        Some((idx, _)) => text[..idx].to_string(),
        None => text.to_string(),
    }
}

/// Keeps the end of `text` so the result, marker included, is at most
/// `cap` characters.
pub fn truncate_tail(text: &str, cap: usize) -> String {
    let total = text.chars().count();
    if total <= cap {
        return text.to_string();
    }
    let marker = |n: usize| format!("[... {n} earlier characters truncated ...]\n");
    let keep = cap.saturating_sub(marker(total).chars().count());
    let dropped = total - keep;
    let start = text.char_indices().nth(dropped).map_or(text.len(), |(i, _)| i);
    format!("{}{}", marker(dropped), &text[start..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program_store::test_support::scored;
    use crate::telemetry::metrics::fixtures::report;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn engine_with(pool: Vec<Template>) -> PromptEngine {
        PromptEngine::new(pool, &PromptConfig::default()).unwrap()
    }

    fn builtin() -> PromptEngine {
        PromptEngine::from_config(&PromptConfig::default()).unwrap()
    }

    fn parent() -> ProgramRecord {
        let mut p = scored(0, 0, 0, 6.56);
        p.source = "learning_rate = 0.5\nsteps = 200\n".into();
        p.metrics = Some(report(3.28, 2.0));
        p
    }

    fn program(id: u64, src: &str) -> ProgramRecord {
        let mut r = scored(id, 0, 0, id as f64);
        r.source = src.into();
        r
    }

    #[test]
    fn single_template_no_inspirations() {
        let t = Template::new("only", "P:\n{{parent}}\n{{inspirations}}{{format_instructions}}").unwrap();
        let e = engine_with(vec![t]);
        let b = e.build_direct_prompt(&parent(), &[], &[], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.template_id, "only");
        assert_eq!(b.kind, PromptKind::Direct);
        let expected = format!("P:\n{}\n{FORMAT_INSTRUCTIONS_TEXT}", parent_block(&parent()));
        assert_eq!(b.rendered, expected);
        assert_eq!(b.rendered.matches(&parent().source).count(), 1);
    }

    #[test]
    fn empty_pool_is_config_error() {
        assert!(matches!(PromptEngine::new(vec![], &PromptConfig::default()), Err(PromptError::EmptyPool)));
        let cfg = PromptConfig { include_builtin_templates: false, ..Default::default() };
        assert!(matches!(PromptEngine::from_config(&cfg), Err(PromptError::EmptyPool)));
    }

    #[test]
    fn pool_template_must_embed_parent() {
        let t = Template::new("bad", "{{format_instructions}}").unwrap();
        assert!(matches!(
            PromptEngine::new(vec![t], &PromptConfig::default()),
            Err(PromptError::MissingPlaceholder { .. })
        ));
    }

    #[test]
    fn template_choice_is_uniform() {
        let e = builtin();
        assert_eq!(e.pool().len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = parent();
        let draws = 9_999;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..draws {
            *counts.entry(e.build_direct_prompt(&p, &[], &[], &mut rng).template_id).or_insert(0usize) += 1;
        }
        for (id, c) in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 3.0).abs() <= 0.02, "{id}: {f}");
        }
    }

    #[test]
    fn inspirations_in_top_then_diverse_order() {
        let e = builtin();
        let t1 = program(1, "top_one = 1\n");
        let t2 = program(2, "top_two = 2\n");
        let d1 = program(3, "diverse_one = 3\n");
        let b = e.build_direct_prompt(&parent(), &[&t1, &t2], &[&d1], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.rendered.matches(INSPIRATION_HEADER).count(), 3);
        let pos = |s: &str| b.rendered.find(s).unwrap();
        assert!(pos("top_one") < pos("top_two") && pos("top_two") < pos("diverse_one"));
        assert!(b.rendered.contains("(top program 000001;"));
        assert!(b.rendered.contains("(diverse program 000003;"));
        assert!(b.rendered.contains("hottest sections: data_loading 40.0%, optimizer 30.0%, backward 20.0%"));
        assert!(b.rendered.contains(edit::SEARCH_MARKER));
    }

    #[test]
    fn placeholder_text_in_sources_stays_literal() {
        let e = builtin();
        let mut p = parent();
        p.source = "x = '{{inspirations}}'\n".into();
        let b = e.build_direct_prompt(&p, &[], &[], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(b.rendered.contains("x = '{{inspirations}}'"));
    }

    #[test]
    fn byte_budget_trims_least_elite_first() {
        let cfg = PromptConfig { inspiration_byte_budget: 30, ..Default::default() };
        let e = PromptEngine::from_config(&cfg).unwrap();
        let t = program(1, &"t".repeat(20));
        let d = program(2, &"d".repeat(20));
        let b = e.build_direct_prompt(&parent(), &[&t], &[&d], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.top_snippets[0].source, "t".repeat(20));
        assert!(b.diverse_snippets[0].source.starts_with(&"d".repeat(10)));
        assert!(b.diverse_snippets[0].source.contains("[truncated 10 bytes]"));
    }

    #[test]
    fn stage_one_has_no_edit_markers() {
        let e = builtin();
        let t1 = program(1, "a = 1\n");
        let (s1, _) = e.build_meta_prompts(&parent(), &[&t1], &[], &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(s1.kind, PromptKind::MetaIdea);
        for m in [edit::SEARCH_MARKER, edit::DIVIDER_MARKER, edit::REPLACE_MARKER] {
            assert!(!s1.rendered.contains(m), "stage one contains {m}");
        }
    }

    #[test]
    fn stage_two_embeds_idea_once() {
        let e = builtin();
        let (s1, builder) = e.build_meta_prompts(&parent(), &[], &[], &mut ChaCha8Rng::seed_from_u64(4));
        let s2 = builder.build("fuse the two loops").unwrap();
        assert_eq!(s2.kind, PromptKind::MetaImplement);
        assert_eq!(s2.rendered.matches("fuse the two loops").count(), 1);
        assert_eq!(s2.idea_text.as_deref(), Some("fuse the two loops"));
        assert_eq!(s2.template_id, s1.template_id);
        assert!(s2.rendered.contains(edit::SEARCH_MARKER));
        assert_eq!(s2.rendered.matches(&parent().source).count(), 1);
        assert!(matches!(builder.build("  \n"), Err(PromptError::EmptyIdea)));
    }

    #[test]
    fn idea_capped() {
        let e = builtin();
        let (_, builder) = e.build_meta_prompts(&parent(), &[], &[], &mut ChaCha8Rng::seed_from_u64(0));
        let s2 = builder.build(&"i".repeat(10_000)).unwrap();
        assert_eq!(s2.idea_text.unwrap().len(), 4_000);
    }

    #[test]
    fn meta_template_choice_replays() {
        let e = builtin();
        let p = parent();
        for seed in 0..20 {
            let (a, ba) = e.build_meta_prompts(&p, &[], &[], &mut ChaCha8Rng::seed_from_u64(seed));
            let (b, bb) = e.build_meta_prompts(&p, &[], &[], &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a.template_id, b.template_id);
            assert_eq!(ba.template_id(), bb.template_id());
            assert_eq!(ba.build("idea").unwrap().template_id, a.template_id);
        }
    }

    #[test]
    fn repair_embeds_error_verbatim() {
        let e = builtin();
        let tb = "Traceback (most recent call last): ZeroDivisionError: division by zero";
        let b = e.build_repair_prompt("x = 1 / 0\n", tb).unwrap();
        assert_eq!(b.kind, PromptKind::Repair);
        assert!(b.rendered.contains(tb));
        assert!(b.rendered.contains("x = 1 / 0"));
        assert!(b.rendered.contains(edit::REPLACE_MARKER));
    }

    #[test]
    fn repair_error_is_tail_capped() {
        let e = builtin();
        let log = format!("{}FINAL ERROR LINE", "noise\n".repeat(100_000 / 6));
        assert!(log.len() > 100_000 - 20);
        let b = e.build_repair_prompt("src", &log).unwrap();
        let kept = b.error_text.unwrap();
        assert!(kept.chars().count() <= 8_000);
        assert!(kept.starts_with("[... "));
        assert!(kept.ends_with("FINAL ERROR LINE"));
    }

    #[test]
    fn repair_requires_error_text() {
        assert!(matches!(builtin().build_repair_prompt("src", ""), Err(PromptError::EmptyErrorText)));
    }

    #[test]
    fn user_template_file_joins_pool() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("terse.txt");
        std::fs::write(&path, "Improve:\n{{parent}}\n{{format_instructions}}\n").unwrap();
        let cfg = PromptConfig { template_files: vec![path], ..Default::default() };
        let e = PromptEngine::from_config(&cfg).unwrap();
        assert_eq!(e.pool().len(), 4);
        assert_eq!(e.pool()[3].id(), "terse");
    }

    #[test]
    fn truncate_tail_exact_cap() {
        let s = "abcdefghij".repeat(10);
        let out = truncate_tail(&s, 60);
        let n = out.chars().count();
        assert!((55..=60).contains(&n), "{n}");
        assert!(out.ends_with("hij"));
        assert_eq!(truncate_tail("short", 60), "short");
    }
}
