//! Description templates, prompt rendering and response parsing.
//!
//! Template 1 (per-image description):
//! `A photo of the class [<label>], with <feature>, <feature> in <scene>.`
//!
//! Template 2 (class feature template, no scene):
//! `A photo of the class [<label>] with <feature>, <feature>.`
//!
//! Parsing tolerates arbitrary internal whitespace, a missing final period,
//! case changes in the fixed words and an optional comma after the label.
//! The scene is everything after the last ` in ` of the body.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("invalid template input: {0}")]
    Invalid(String),
    #[error("text does not match the template: {0:?}")]
    NoMatch(String),
    #[error("label mismatch: expected {expected:?}, found {found:?}")]
    LabelMismatch { expected: String, found: String },
    #[error("prompt {kind:?} is missing context field `{field}`")]
    MissingField {
        kind: PromptKind,
        field: &'static str,
    },
}

impl From<TemplateError> for Error {
    fn from(e: TemplateError) -> Self {
        Error::Validation(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Captioned,
    Expanded,
    Refined,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Captioned => "captioned",
            Origin::Expanded => "expanded",
            Origin::Refined => "refined",
        }
    }

    pub fn parse(s: &str) -> Option<Origin> {
        match s {
            "captioned" => Some(Origin::Captioned),
            "expanded" => Some(Origin::Expanded),
            "refined" => Some(Origin::Refined),
            _ => None,
        }
    }
}

/// One Template-1 description of an image of a class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub class_id: usize,
    pub features: Vec<String>,
    pub scene: String,
    /// Canonical Template-1 rendering of `(label, features, scene)`.
    pub raw_text: String,
    pub origin: Origin,
    pub revision: u32,
}

impl Description {
    pub fn new(
        class_id: usize,
        label: &str,
        features: Vec<String>,
        scene: String,
        origin: Origin,
    ) -> Result<Self, TemplateError> {
        let raw_text = render_template1(label, &features, &scene)?;
        Ok(Description {
            class_id,
            features,
            scene,
            raw_text,
            origin,
            revision: 0,
        })
    }

    pub fn normalized(&self) -> String {
        normalize(&self.raw_text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DescriptionList {
    pub class_id: usize,
    pub items: Vec<Description>,
}

impl DescriptionList {
    pub fn new(class_id: usize) -> Self {
        DescriptionList {
            class_id,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn raw_texts(&self) -> Vec<String> {
        self.items.iter().map(|d| d.raw_text.clone()).collect()
    }

    pub fn count_origin(&self, origin: Origin) -> usize {
        self.items.iter().filter(|d| d.origin == origin).count()
    }
}

/// C_y: a class's most distinctive features, used as the scoring anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFeatureTemplate {
    pub class_id: usize,
    pub features: Vec<String>,
    pub rendered: String,
    /// Set when no summary could be obtained and the bare class prompt is used.
    #[serde(default)]
    pub fallback: bool,
}

impl ClassFeatureTemplate {
    /// The bare class prompt used when a class has nothing to summarize.
    pub fn fallback(class_id: usize, label: &str) -> Self {
        ClassFeatureTemplate {
            class_id,
            features: Vec::new(),
            rendered: format!("A photo of a [{label}]."),
            fallback: true,
        }
    }
}

fn check_label(label: &str) -> Result<(), TemplateError> {
    if label.trim().is_empty() {
        return Err(TemplateError::Invalid("empty label".into()));
    }
    if label.contains(['[', ']', '\n', '\t']) {
        return Err(TemplateError::Invalid(format!(
            "label {label:?} contains a reserved character"
        )));
    }
    Ok(())
}

fn check_features(features: &[String]) -> Result<(), TemplateError> {
    if features.is_empty() {
        return Err(TemplateError::Invalid("feature list is empty".into()));
    }
    for f in features {
        if f.trim().is_empty() || f.contains([',', '\n', '\t', '[', ']']) {
            return Err(TemplateError::Invalid(format!("invalid feature {f:?}")));
        }
    }
    Ok(())
}

pub fn render_template1(
    label: &str,
    features: &[String],
    scene: &str,
) -> Result<String, TemplateError> {
    check_label(label)?;
    check_features(features)?;
    if scene.trim().is_empty() || scene.contains(['\n', '\t', '[', ']']) || scene.contains(" in ") {
        return Err(TemplateError::Invalid(format!("invalid scene {scene:?}")));
    }
    Ok(format!(
        "A photo of the class [{label}], with {} in {scene}.",
        features.join(", ")
    ))
}

pub fn render_template2(label: &str, features: &[String]) -> Result<String, TemplateError> {
    check_label(label)?;
    check_features(features)?;
    if features.iter().any(|f| f.contains(" in ")) {
        return Err(TemplateError::Invalid(
            "class feature templates carry no scene clause".into(),
        ));
    }
    Ok(format!(
        "A photo of the class [{label}] with {}.",
        features.join(", ")
    ))
}

static TEMPLATE_HEAD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^a photo of the class \[([^\[\]]+)\] ?,? ?with (.+)$").expect("valid regex")
});

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits `text` into (label, body) with the final period removed.
fn split_head(text: &str) -> Result<(String, String), TemplateError> {
    let collapsed = collapse_whitespace(text);
    let caps = TEMPLATE_HEAD
        .captures(&collapsed)
        .ok_or_else(|| TemplateError::NoMatch(text.to_string()))?;
    let label = caps[1].trim().to_string();
    let body = caps[2].trim();
    let body = body.strip_suffix('.').unwrap_or(body).trim_end();
    // Trailing chatter after the sentence ("... park. Hope this helps") is rejected.
    if body.is_empty() || body.contains(". ") || body.ends_with('.') {
        return Err(TemplateError::NoMatch(text.to_string()));
    }
    Ok((label, body.to_string()))
}

fn check_expected(found: &str, expected: &str) -> Result<(), TemplateError> {
    if found.to_lowercase() != collapse_whitespace(expected).to_lowercase() {
        return Err(TemplateError::LabelMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

fn split_features(list: &str, text: &str) -> Result<Vec<String>, TemplateError> {
    let features: Vec<String> = list.split(',').map(|f| f.trim().to_string()).collect();
    if features.iter().any(String::is_empty) {
        return Err(TemplateError::NoMatch(text.to_string()));
    }
    Ok(features)
}

/// Parses a Template-1 sentence. The returned description is canonical:
/// its `raw_text` is re-rendered with `expected_label`.
pub fn parse_template1(
    text: &str,
    class_id: usize,
    expected_label: &str,
    origin: Origin,
) -> Result<Description, TemplateError> {
    let (label, body) = split_head(text)?;
    check_expected(&label, expected_label)?;
    let split_at = body
        .rfind(" in ")
        .ok_or_else(|| TemplateError::NoMatch(text.to_string()))?;
    let features = split_features(&body[..split_at], text)?;
    let scene = body[split_at + 4..].trim().to_string();
    if scene.is_empty() {
        return Err(TemplateError::NoMatch(text.to_string()));
    }
    Description::new(class_id, expected_label, features, scene, origin)
}

pub fn parse_template2(
    text: &str,
    class_id: usize,
    expected_label: &str,
) -> Result<ClassFeatureTemplate, TemplateError> {
    let (label, body) = split_head(text)?;
    check_expected(&label, expected_label)?;
    if body.contains(" in ") {
        return Err(TemplateError::NoMatch(text.to_string()));
    }
    let features = split_features(&body, text)?;
    let rendered = render_template2(expected_label, &features)?;
    Ok(ClassFeatureTemplate {
        class_id,
        features,
        rendered,
        fallback: false,
    })
}

/// Dedup key: lowercase, single spaces, no trailing punctuation.
pub fn normalize(text: &str) -> String {
    let lowered = collapse_whitespace(&text.to_lowercase());
    lowered
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

static ENUMERATOR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:\d+[.)]|[-*•])\s+").expect("valid regex"));

/// Splits a model response into candidate sentences, one per line, with list
/// enumerators and wrapping quotes removed.
pub fn split_response_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let l = ENUMERATOR.replace(l, "");
            l.trim().trim_matches('"').trim().to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    /// Caption one existing image.
    P1,
    /// Ask for new descriptions beyond the current list.
    P2,
    /// Remove repeated features and scenes from the list.
    P3,
    /// Summarize the class into a Template-2 feature template.
    P4,
    /// Refine a description whose image scored too low.
    P5,
}

impl PromptKind {
    pub fn golden(self) -> &'static str {
        match self {
            PromptKind::P1 => include_str!("../prompts/p1_caption.txt"),
            PromptKind::P2 => include_str!("../prompts/p2_expand.txt"),
            PromptKind::P3 => include_str!("../prompts/p3_dedup.txt"),
            PromptKind::P4 => include_str!("../prompts/p4_summarize.txt"),
            PromptKind::P5 => include_str!("../prompts/p5_refine.txt"),
        }
    }
}

/// Fields interpolated into a prompt; each kind requires a subset.
#[derive(Debug, Clone, Default)]
pub struct PromptContext<'a> {
    pub label: Option<&'a str>,
    pub list: Option<&'a [String]>,
    pub count: Option<usize>,
    pub description: Option<&'a str>,
}

pub const EMPTY_LIST_PLACEHOLDER: &str = "(none yet)";

fn render_list(items: &[String]) -> String {
    if items.is_empty() {
        return EMPTY_LIST_PLACEHOLDER.to_string();
    }
    items
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_prompt(kind: PromptKind, ctx: &PromptContext<'_>) -> Result<String, TemplateError> {
    let missing = |field| TemplateError::MissingField { kind, field };
    let label = ctx.label.ok_or_else(|| missing("label"))?;
    check_label(label)?;
    let mut out = kind.golden().replace("{label}", label);
    if matches!(kind, PromptKind::P2 | PromptKind::P3 | PromptKind::P4) {
        let list = ctx.list.ok_or_else(|| missing("list"))?;
        out = out.replace("{list}", &render_list(list));
    }
    if kind == PromptKind::P2 {
        let count = ctx.count.ok_or_else(|| missing("count"))?;
        out = out.replace("{count}", &count.to_string());
    }
    if kind == PromptKind::P5 {
        let description = ctx.description.ok_or_else(|| missing("description"))?;
        out = out.replace("{description}", description);
    }
    Ok(out)
}

/// Reads the class label back out of a rendered prompt or template sentence.
pub fn extract_label(text: &str) -> Option<&str> {
    let start = text.find("class [").map(|i| i + 7).or_else(|| {
        // fallback template: "A photo of a [label]."
        text.find('[').map(|i| i + 1)
    })?;
    let end = start + text[start..].find(']')?;
    Some(&text[start..end])
}

/// Numbered list entries (`1. ...`) embedded in a rendered prompt.
pub fn extract_listed(prompt: &str) -> Vec<String> {
    static LISTED: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"^\d+\. (.+)$").expect("valid regex"));
    prompt
        .lines()
        .filter_map(|l| LISTED.captures(l).map(|c| c[1].to_string()))
        .collect()
}

/// The quoted description inside a rendered refinement prompt.
pub fn extract_refine_target(prompt: &str) -> Option<&str> {
    let start = prompt.find("This description \"")? + "This description \"".len();
    let end = start + prompt[start..].find("\" doesn't seem")?;
    Some(&prompt[start..end])
}

/// Requested batch size embedded in an expansion prompt.
pub fn extract_count(prompt: &str) -> Option<usize> {
    let start = prompt.find("exactly ")? + "exactly ".len();
    prompt[start..].split_whitespace().next()?.parse().ok()
}
