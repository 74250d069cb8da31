//! Named prompt templates, loadable from a plain text file so they can be
//! edited without recompilation.
//!
//! File format: a line starting with `@@ ` opens a template and names it;
//! the body runs until the next `@@ ` line. The built-in registry ships the
//! templates the pipeline uses: `sys_base`, `sys_low`, `sys_high`,
//! `user_main`, `fewshot_levels`, `level_fiveway`, `level_binary`,
//! `tag_predict`, `judge_rubric`, `rr_low`, `rr_high`, `solve_low`,
//! `solve_high`, `cot`, `verify`, `reselect`.

use std::collections::BTreeMap;
use std::path::Path;

const DEFAULT_PROMPTS: &str = include_str!("prompts/default_prompts.txt");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unknown template `{0}`")]
    Missing(String),

    #[error("prompt file contains no templates")]
    Empty,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Immutable map of named templates.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    templates: BTreeMap<String, String>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::parse(DEFAULT_PROMPTS).expect("built-in prompts must parse")
    }
}

impl PromptRegistry {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        let mut name: Option<String> = None;
        let mut body = String::new();
        for line in text.lines() {
            if let Some(next) = line.strip_prefix("@@ ") {
                if let Some(prev) = name.take() {
                    templates.insert(prev, body.trim().to_string());
                }
                name = Some(next.trim().to_string());
                body = String::new();
            } else if name.is_some() {
                body.push_str(line);
                body.push('\n');
            }
        }
        if let Some(prev) = name {
            templates.insert(prev, body.trim().to_string());
        }
        if templates.is_empty() {
            return Err(PromptError::Empty);
        }
        Ok(Self { templates })
    }

    /// Load a registry from a file, falling back to built-in bodies for any
    /// template the file does not override.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)?;
        let overrides = Self::parse(&text)?;
        let mut merged = Self::default();
        merged.templates.extend(overrides.templates);
        Ok(merged)
    }

    pub fn get(&self, name: &str) -> Result<&str, PromptError> {
        self.templates
            .get(name)
            .map(|s| s.as_str())
            .ok_or_else(|| PromptError::Missing(name.to_string()))
    }

    /// Fetch `name` and substitute each `{key}` placeholder.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut text = self.get(name)?.to_string();
        for (key, value) in vars {
            text = text.replace(&format!("{{{key}}}"), value);
        }
        Ok(text)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(|s| s.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_has_required_templates() {
        let reg = PromptRegistry::default();
        for name in [
            "sys_base",
            "sys_low",
            "sys_high",
            "user_main",
            "fewshot_levels",
            "level_fiveway",
            "level_binary",
            "tag_predict",
            "judge_rubric",
            "rr_low",
            "rr_high",
            "solve_low",
            "solve_high",
            "cot",
            "verify",
            "reselect",
        ] {
            assert!(reg.get(name).is_ok(), "missing template {name}");
        }
    }

    #[test]
    fn fewshot_block_has_one_exemplar_per_level() {
        let reg = PromptRegistry::default();
        let block = reg.get("fewshot_levels").unwrap();
        for level in ["Remember", "Understand", "Apply", "Analyze", "Evaluate"] {
            assert_eq!(
                block.matches(level).count(),
                1,
                "expected exactly one {level} exemplar"
            );
        }
    }

    #[test]
    fn render_substitutes_placeholders_only() {
        let reg = PromptRegistry::parse("@@ t\nHello {name}, keep {\"rel\": 1} intact.").unwrap();
        let out = reg.render("t", &[("name", "world")]).unwrap();
        assert_eq!(out, "Hello world, keep {\"rel\": 1} intact.");
    }

    #[test]
    fn file_overrides_merge_with_builtins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.txt");
        std::fs::write(&path, "@@ sys_low\ncustom low prompt").unwrap();
        let reg = PromptRegistry::from_file(&path).unwrap();
        assert_eq!(reg.get("sys_low").unwrap(), "custom low prompt");
        assert!(reg.get("sys_high").unwrap().contains("reasoning-level"));
    }

    #[test]
    fn unknown_template_is_an_error() {
        let reg = PromptRegistry::default();
        assert!(matches!(reg.get("nope"), Err(PromptError::Missing(_))));
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(
            PromptRegistry::parse("no headers here"),
            Err(PromptError::Empty)
        ));
    }
}
