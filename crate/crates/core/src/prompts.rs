//! Agent prompt templates.
//!
//! Templates are plain text files with `{name}` placeholders. The built-in
//! set is compiled from `prompts/*.v1.txt`; a directory containing files of
//! the same names overrides it.

use std::path::Path;

use thiserror::Error;

pub const PROMPT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("reading prompt template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("template `{name}` is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { name: &'static str, placeholder: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub system: String,
    pub extractor: String,
    pub query: String,
    pub scorer: String,
}

const REQUIRED: [(&str, &[&str]); 3] = [
    ("extractor", &["note"]),
    ("query", &["note", "findings", "n_queries"]),
    ("scorer", &["findings", "evidence"]),
];

impl Default for Prompts {
    fn default() -> Self {
        Self {
            system: include_str!("../prompts/system.v1.txt").to_string(),
            extractor: include_str!("../prompts/extractor.v1.txt").to_string(),
            query: include_str!("../prompts/query.v1.txt").to_string(),
            scorer: include_str!("../prompts/scorer.v1.txt").to_string(),
        }
    }
}

impl Prompts {
    /// Loads `{system,extractor,query,scorer}.v1.txt` from `dir`; missing
    /// files fall back to the built-in templates.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut p = Self::default();
        for (name, slot) in [
            ("system", &mut p.system),
            ("extractor", &mut p.extractor),
            ("query", &mut p.query),
            ("scorer", &mut p.scorer),
        ] {
            let path = dir.join(format!("{name}.{PROMPT_VERSION}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(text) => *slot = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => {
                    return Err(PromptError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                }
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, placeholders) in REQUIRED {
            let text = match name {
                "extractor" => &self.extractor,
                "query" => &self.query,
                _ => &self.scorer,
            };
            for &placeholder in placeholders {
                if !text.contains(&format!("{{{placeholder}}}")) {
                    return Err(PromptError::MissingPlaceholder { name, placeholder });
                }
            }
        }
        Ok(())
    }
}

/// Substitutes `{name}` placeholders in a single pass; substituted values
/// are never rescanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (name, value) in vars {
            let key = format!("{{{name}}}");
            if tail.starts_with(&key) {
                out.push_str(value);
                rest = &tail[key.len()..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}
