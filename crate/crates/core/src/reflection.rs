//! Per-class description pipeline.
//!
//! Existing images are captioned into Template-1 descriptions, the list is
//! then grown with expansion prompts (each round embeds the whole current
//! list) until it holds `K_y = M_y + N_y` items, repetitions are removed by a
//! dedup prompt followed by a local normalized-text pass, and finally the
//! class is summarized into a feature template.
//!
//! Every expander call, expansion or dedup, counts against a per-class
//! budget of `3 * ceil(N_y / batch_size)` calls, so the loop always ends.
//! Captioned originals are never removed.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backends::{Captioner, Expander, Summarizer};
use crate::dataset::{ClassRecord, GenerationQuota};
use crate::error::{Error, Result};
use crate::seed;
use crate::templating::{
    self, normalize, render_prompt, ClassFeatureTemplate, DescriptionList, Origin, PromptContext,
    PromptKind,
};

pub const DEFAULT_BATCH_SIZE: usize = 10;

/// A model response that could not be parsed, kept for the run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub class_id: usize,
    pub stage: String,
    /// What was being asked about: an image locator, a round number, ...
    pub subject: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionStatus {
    Expanding,
    DedupPending,
    Complete,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionState {
    pub class_id: usize,
    pub label: String,
    pub list: DescriptionList,
    pub quota: GenerationQuota,
    /// K_y, the list size the class is expanded to.
    pub target_total: usize,
    /// Expander calls made so far (expansion and dedup rounds).
    pub rounds_used: usize,
    pub round_budget: usize,
    pub status: ExpansionStatus,
    pub parse_failures: Vec<ParseFailure>,
}

pub fn round_budget(target_new: usize, batch_size: usize) -> usize {
    3 * target_new.div_ceil(batch_size.max(1))
}

impl ExpansionState {
    pub fn new(
        class: &ClassRecord,
        captions: DescriptionList,
        quota: GenerationQuota,
        batch_size: usize,
    ) -> Self {
        let status = if quota.target_new == 0 {
            ExpansionStatus::Complete
        } else {
            ExpansionStatus::Expanding
        };
        ExpansionState {
            class_id: class.class_id,
            label: class.label.clone(),
            list: captions,
            quota,
            target_total: class.original_count() + quota.target_new,
            rounds_used: 0,
            round_budget: round_budget(quota.target_new, batch_size),
            status,
            parse_failures: Vec::new(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self.status,
            ExpansionStatus::Complete | ExpansionStatus::Stalled
        )
    }

    /// Room for one more expansion round plus the dedup round after it.
    fn can_expand_again(&self) -> bool {
        self.rounds_used + 2 <= self.round_budget
    }
}

fn caption_seed(run_seed: u64, image_ref: &str, attempt: u32) -> u64 {
    let base = seed::derive(run_seed, &format!("caption:{image_ref}"));
    if attempt == 0 {
        base
    } else {
        seed::derive_indexed(base, "reask", attempt as u64)
    }
}

/// Captions every image of `class`; an unparseable caption is re-asked once
/// and then skipped with a recorded failure.
pub fn caption_existing(
    class: &ClassRecord,
    captioner: &dyn Captioner,
    run_seed: u64,
) -> Result<(DescriptionList, Vec<ParseFailure>)> {
    let mut list = DescriptionList::new(class.class_id);
    let mut failures = Vec::new();
    if class.image_refs.is_empty() {
        return Ok((list, failures));
    }
    let prompt = render_prompt(
        PromptKind::P1,
        &PromptContext {
            label: Some(&class.label),
            ..Default::default()
        },
    )?;
    for image_ref in &class.image_refs {
        let mut last = String::new();
        let mut parsed = None;
        for attempt in 0..2 {
            let text = captioner.caption(
                image_ref,
                &prompt,
                caption_seed(run_seed, image_ref, attempt),
            )?;
            match templating::parse_template1(
                &text,
                class.class_id,
                &class.label,
                Origin::Captioned,
            ) {
                Ok(d) => {
                    parsed = Some(d);
                    break;
                }
                Err(_) => last = text,
            }
        }
        match parsed {
            Some(d) => list.items.push(d),
            None => {
                log::warn!(
                    "class {}: caption for {image_ref} unparseable after re-ask: {last:?}",
                    class.class_id
                );
                failures.push(ParseFailure {
                    class_id: class.class_id,
                    stage: "caption".into(),
                    subject: image_ref.clone(),
                    text: last,
                });
            }
        }
    }
    Ok((list, failures))
}

/// One expansion round: asks for up to `batch_size` new descriptions with the
/// full current list embedded, and appends whatever parses (truncated at K_y).
pub fn expand_class(
    mut state: ExpansionState,
    expander: &dyn Expander,
    batch_size: usize,
    run_seed: u64,
) -> Result<ExpansionState> {
    if state.status != ExpansionStatus::Expanding {
        return Err(Error::validation(format!(
            "class {} is not expanding ({:?})",
            state.class_id, state.status
        )));
    }
    let remaining = state.target_total.saturating_sub(state.list.len());
    let count = batch_size.max(1).min(remaining);
    let texts = state.list.raw_texts();
    let prompt = render_prompt(
        PromptKind::P2,
        &PromptContext {
            label: Some(&state.label),
            list: Some(&texts),
            count: Some(count),
            ..Default::default()
        },
    )?;
    let round_seed = seed::derive_indexed(
        run_seed,
        &format!("expand:{}", state.class_id),
        state.rounds_used as u64,
    );
    let response = expander.expand(&prompt, round_seed)?;
    state.rounds_used += 1;
    for line in response
        .iter()
        .flat_map(|r| templating::split_response_lines(r))
    {
        match templating::parse_template1(&line, state.class_id, &state.label, Origin::Expanded) {
            Ok(d) if state.list.len() < state.target_total => state.list.items.push(d),
            Ok(_) => {}
            Err(_) => state.parse_failures.push(ParseFailure {
                class_id: state.class_id,
                stage: "expand".into(),
                subject: format!("round {}", state.rounds_used),
                text: line,
            }),
        }
    }
    state.status = if state.list.len() >= state.target_total {
        ExpansionStatus::DedupPending
    } else if state.can_expand_again() {
        ExpansionStatus::Expanding
    } else {
        ExpansionStatus::Stalled
    };
    Ok(state)
}

/// Repetition check: a dedup prompt (when budget allows) whose answer is
/// intersected with a local normalized-text dedup of the expanded items.
pub fn dedup_class(
    mut state: ExpansionState,
    expander: &dyn Expander,
    run_seed: u64,
) -> Result<ExpansionState> {
    if !matches!(
        state.status,
        ExpansionStatus::DedupPending | ExpansionStatus::Stalled
    ) {
        return Err(Error::validation(format!(
            "class {} is not ready for dedup ({:?})",
            state.class_id, state.status
        )));
    }
    let was_stalled = state.status == ExpansionStatus::Stalled;

    let mut accepted: Option<HashSet<String>> = None;
    if state.rounds_used < state.round_budget && !state.list.is_empty() {
        let texts = state.list.raw_texts();
        let prompt = render_prompt(
            PromptKind::P3,
            &PromptContext {
                label: Some(&state.label),
                list: Some(&texts),
                ..Default::default()
            },
        )?;
        let round_seed = seed::derive_indexed(
            run_seed,
            &format!("dedup:{}", state.class_id),
            state.rounds_used as u64,
        );
        let response = expander.expand(&prompt, round_seed)?;
        state.rounds_used += 1;
        let mut returned = HashSet::new();
        for line in response
            .iter()
            .flat_map(|r| templating::split_response_lines(r))
        {
            if let Ok(d) =
                templating::parse_template1(&line, state.class_id, &state.label, Origin::Expanded)
            {
                returned.insert(d.normalized());
            }
            returned.insert(normalize(&line));
        }
        let drops_original = state
            .list
            .items
            .iter()
            .any(|d| d.origin == Origin::Captioned && !returned.contains(&d.normalized()));
        if drops_original {
            log::warn!(
                "class {}: dedup response removed captioned originals; using local dedup only",
                state.class_id
            );
        } else {
            accepted = Some(returned);
        }
    }

    let mut seen = HashSet::new();
    let items = std::mem::take(&mut state.list.items);
    for d in items {
        let key = d.normalized();
        if d.origin == Origin::Captioned {
            seen.insert(key);
            state.list.items.push(d);
            continue;
        }
        let kept_by_model = accepted.as_ref().is_none_or(|set| set.contains(&key));
        if kept_by_model && seen.insert(key) {
            state.list.items.push(d);
        }
    }

    state.status = if state.list.len() >= state.target_total {
        ExpansionStatus::Complete
    } else if !was_stalled && state.can_expand_again() {
        ExpansionStatus::Expanding
    } else {
        ExpansionStatus::Stalled
    };
    Ok(state)
}

/// Drives expansion and dedup rounds until the class is complete or stalled.
pub fn run_self_reflection(
    mut state: ExpansionState,
    expander: &dyn Expander,
    batch_size: usize,
    run_seed: u64,
) -> Result<ExpansionState> {
    while !state.is_terminal() {
        while state.status == ExpansionStatus::Expanding {
            state = expand_class(state, expander, batch_size, run_seed)?;
        }
        state = dedup_class(state, expander, run_seed)?;
    }
    if state.status == ExpansionStatus::Stalled {
        log::warn!(
            "class {} stalled at {} of {} descriptions",
            state.class_id,
            state.list.len(),
            state.target_total
        );
    }
    Ok(state)
}

/// Summarizes a class into its feature template, re-asking once on an
/// unparseable reply and falling back to the bare class prompt.
pub fn build_class_feature_template(
    class: &ClassRecord,
    list: &DescriptionList,
    summarizer: &dyn Summarizer,
    run_seed: u64,
) -> Result<(ClassFeatureTemplate, Option<ParseFailure>)> {
    if list.is_empty() {
        log::warn!(
            "class {} has no descriptions; using the bare class template",
            class.class_id
        );
        return Ok((
            ClassFeatureTemplate::fallback(class.class_id, &class.label),
            None,
        ));
    }
    let texts = list.raw_texts();
    let prompt = render_prompt(
        PromptKind::P4,
        &PromptContext {
            label: Some(&class.label),
            list: Some(&texts),
            ..Default::default()
        },
    )?;
    let base = seed::derive(run_seed, &format!("summarize:{}", class.class_id));
    let mut last = String::new();
    for attempt in 0..2u64 {
        let s = if attempt == 0 {
            base
        } else {
            seed::derive_indexed(base, "reask", attempt)
        };
        let text = summarizer.summarize(&prompt, s)?;
        let candidate = templating::split_response_lines(&text)
            .into_iter()
            .next()
            .unwrap_or_default();
        if let Ok(t) = templating::parse_template2(&candidate, class.class_id, &class.label) {
            return Ok((t, None));
        }
        last = text;
    }
    log::warn!(
        "class {}: summary unparseable after re-ask; using the bare class template",
        class.class_id
    );
    Ok((
        ClassFeatureTemplate::fallback(class.class_id, &class.label),
        Some(ParseFailure {
            class_id: class.class_id,
            stage: "summarize".into(),
            subject: "template".into(),
            text: last,
        }),
    ))
}
