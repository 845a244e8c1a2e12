//! Quality gate for generated images.
//!
//! Each image is scored by the cosine between its embedding and the
//! embedding of its class feature template. Low scorers get their
//! description refined, are regenerated and rescored, up to `max_cycles`
//! scorings in total. Images that never reach the threshold are rejected and
//! kept out of the pool, but their history is retained.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Embedder, Embedding, ImageGenerator, Refiner};
use crate::error::{Error, Result};
use crate::imaging::{ImageStore, RgbImage};
use crate::reflection::ParseFailure;
use crate::seed;
use crate::templating::{
    self, render_prompt, ClassFeatureTemplate, Description, Origin, PromptContext, PromptKind,
};

pub const DEFAULT_MAX_CYCLES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    Pending,
    Accepted,
    Rejected,
}

impl ImageStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageStatus::Pending => "pending",
            ImageStatus::Accepted => "accepted",
            ImageStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub image_id: String,
    pub class_id: usize,
    pub description: Description,
    pub buffer_ref: String,
    /// 1-based; the number of scorings the image has reached.
    pub cycle: u32,
    pub status: ImageStatus,
    pub last_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub cycle: u32,
    pub score: f64,
    pub verdict: Verdict,
    /// Revision of the description the scored image was generated from.
    pub revision: u32,
    /// The image was regenerated from an unrefined description with a new
    /// seed because refinement could not be parsed.
    pub fresh_seed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// μ: minimum cosine for acceptance.
    pub threshold: f64,
    pub max_cycles: u32,
    pub seed: u64,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::validation(format!(
                "score threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if self.max_cycles == 0 {
            return Err(Error::validation("max_cycles must be at least 1"));
        }
        Ok(())
    }
}

/// The three services the gate talks to.
#[derive(Clone, Copy)]
pub struct EvalBackends<'a> {
    pub refiner: &'a dyn Refiner,
    pub generator: &'a dyn ImageGenerator,
    pub embedder: &'a dyn Embedder,
}

impl<'a> EvalBackends<'a> {
    pub fn from_hub(hub: &'a Backends) -> Self {
        EvalBackends {
            refiner: hub,
            generator: hub,
            embedder: hub,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub image: GeneratedImage,
    pub records: Vec<EvalRecord>,
    pub parse_failures: Vec<ParseFailure>,
}

pub fn image_id(class_id: usize, index: usize) -> String {
    format!("c{class_id:04}-{index:05}")
}

pub fn buffer_ref(image_id: &str, cycle: u32) -> String {
    format!("images/{image_id}-c{cycle}.ppm")
}

/// Seed for rendering `description` at `cycle`; a new cycle always gets a new
/// seed, and the same description at the same cycle always gets the same one.
pub fn generation_seed(run_seed: u64, description: &Description, cycle: u32) -> u64 {
    let h = seed::hash_parts(&[&run_seed.to_le_bytes(), description.raw_text.as_bytes()]);
    seed::derive_indexed(h, "generate", cycle as u64)
}

fn fresh_seed(run_seed: u64, description: &Description, cycle: u32) -> u64 {
    seed::derive_indexed(
        generation_seed(run_seed, description, cycle),
        "fresh",
        cycle as u64,
    )
}

/// Renders the first image of an expanded description and stores it.
pub fn generate_initial(
    class_id: usize,
    index: usize,
    description: &Description,
    generator: &dyn ImageGenerator,
    store: &dyn ImageStore,
    run_seed: u64,
) -> Result<GeneratedImage> {
    let id = image_id(class_id, index);
    let img = generator.generate_image(
        &description.raw_text,
        generation_seed(run_seed, description, 1),
    )?;
    let locator = buffer_ref(&id, 1);
    store.put(&locator, &img)?;
    Ok(GeneratedImage {
        image_id: id,
        class_id,
        description: description.clone(),
        buffer_ref: locator,
        cycle: 1,
        status: ImageStatus::Pending,
        last_score: None,
    })
}

/// S: cosine between the image and the class feature template.
pub fn score_image(
    buffer: &RgbImage,
    template: &ClassFeatureTemplate,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let text = embedder.embed_text(&template.rendered)?;
    score_against(buffer, &text, embedder)
}

fn score_against(buffer: &RgbImage, text: &Embedding, embedder: &dyn Embedder) -> Result<f64> {
    Ok(embedder.embed_image(buffer)?.cosine(text))
}

/// Asks for a refined description, re-asking once; `None` when neither
/// reply parses as a description of the class.
fn refine_description(
    image: &GeneratedImage,
    label: &str,
    refiner: &dyn Refiner,
    run_seed: u64,
    failures: &mut Vec<ParseFailure>,
) -> Result<Option<Description>> {
    let prompt = render_prompt(
        PromptKind::P5,
        &PromptContext {
            label: Some(label),
            description: Some(&image.description.raw_text),
            ..Default::default()
        },
    )?;
    let base = seed::derive(
        run_seed,
        &format!("refine:{}:{}", image.image_id, image.cycle),
    );
    let mut last = String::new();
    for attempt in 0..2u64 {
        let s = if attempt == 0 {
            base
        } else {
            seed::derive_indexed(base, "reask", attempt)
        };
        let text = refiner.refine(&prompt, s)?;
        let parsed = templating::split_response_lines(&text)
            .into_iter()
            .find_map(|line| {
                templating::parse_template1(&line, image.class_id, label, Origin::Refined).ok()
            });
        if let Some(mut d) = parsed {
            d.revision = image.description.revision + 1;
            return Ok(Some(d));
        }
        last = text;
    }
    failures.push(ParseFailure {
        class_id: image.class_id,
        stage: "refine".into(),
        subject: format!("{} cycle {}", image.image_id, image.cycle),
        text: last,
    });
    Ok(None)
}

/// Runs one image's score / refine / regenerate loop to a terminal status.
pub fn evaluate_and_refine(
    mut image: GeneratedImage,
    template: &ClassFeatureTemplate,
    label: &str,
    backends: EvalBackends<'_>,
    store: &dyn ImageStore,
    config: &EvalConfig,
) -> Result<EvalOutcome> {
    if image.status != ImageStatus::Pending {
        return Err(Error::validation(format!(
            "image {} is already {}",
            image.image_id,
            image.status.as_str()
        )));
    }
    if template.class_id != image.class_id {
        return Err(Error::validation(format!(
            "template for class {} used on image {} of class {}",
            template.class_id, image.image_id, image.class_id
        )));
    }
    let text = backends.embedder.embed_text(&template.rendered)?;
    let mut records = Vec::new();
    let mut parse_failures = Vec::new();
    let mut fresh = false;
    loop {
        let buffer = store.get(&image.buffer_ref)?;
        let score = score_against(&buffer, &text, backends.embedder)?;
        let pass = score >= config.threshold;
        records.push(EvalRecord {
            image_id: image.image_id.clone(),
            cycle: image.cycle,
            score,
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            revision: image.description.revision,
            fresh_seed: fresh,
        });
        image.last_score = Some(score);
        if pass {
            image.status = ImageStatus::Accepted;
            break;
        }
        if image.cycle >= config.max_cycles {
            image.status = ImageStatus::Rejected;
            break;
        }
        let next_cycle = image.cycle + 1;
        let refined = refine_description(
            &image,
            label,
            backends.refiner,
            config.seed,
            &mut parse_failures,
        )?;
        let s = match refined {
            Some(d) => {
                image.description = d;
                fresh = false;
                generation_seed(config.seed, &image.description, next_cycle)
            }
            None => {
                fresh = true;
                fresh_seed(config.seed, &image.description, next_cycle)
            }
        };
        let img = backends
            .generator
            .generate_image(&image.description.raw_text, s)?;
        let locator = buffer_ref(&image.image_id, next_cycle);
        store.put(&locator, &img)?;
        image.buffer_ref = locator;
        image.cycle = next_cycle;
    }
    Ok(EvalOutcome {
        image,
        records,
        parse_failures,
    })
}

/// Class templates and labels the gate needs, by class id.
pub struct EvalContext<'a> {
    pub templates: &'a BTreeMap<usize, ClassFeatureTemplate>,
    pub labels: &'a BTreeMap<usize, String>,
}

/// Evaluates all images concurrently; `on_done` sees each outcome as it
/// finishes. The result is ordered by (class_id, image_id).
pub fn run_eval_batch_with(
    images: Vec<GeneratedImage>,
    context: &EvalContext<'_>,
    backends: EvalBackends<'_>,
    store: &dyn ImageStore,
    config: &EvalConfig,
    on_done: &(dyn Fn(&EvalOutcome) -> Result<()> + Sync),
) -> Result<Vec<EvalOutcome>> {
    config.validate()?;
    for img in &images {
        if !context.templates.contains_key(&img.class_id)
            || !context.labels.contains_key(&img.class_id)
        {
            return Err(Error::validation(format!(
                "no template for class {} of image {}",
                img.class_id, img.image_id
            )));
        }
    }
    let mut outcomes: Vec<EvalOutcome> = images
        .into_par_iter()
        .map(|img| {
            let class_id = img.class_id;
            let outcome = evaluate_and_refine(
                img,
                &context.templates[&class_id],
                &context.labels[&class_id],
                backends,
                store,
                config,
            )?;
            on_done(&outcome)?;
            Ok(outcome)
        })
        .collect::<Result<_>>()?;
    outcomes.sort_by(|a, b| {
        (a.image.class_id, &a.image.image_id).cmp(&(b.image.class_id, &b.image.image_id))
    });
    Ok(outcomes)
}

pub fn run_eval_batch(
    images: Vec<GeneratedImage>,
    context: &EvalContext<'_>,
    backends: EvalBackends<'_>,
    store: &dyn ImageStore,
    config: &EvalConfig,
) -> Result<Vec<EvalOutcome>> {
    run_eval_batch_with(images, context, backends, store, config, &|_| Ok(()))
}

/// `image_id<TAB>cycle<TAB>score<TAB>verdict`, one line per scoring.
pub fn eval_journal_tsv(outcomes: &[EvalOutcome]) -> String {
    let mut out = String::new();
    for r in outcomes.iter().flat_map(|o| &o.records) {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.image_id, r.cycle, r.score, r.verdict
        ));
    }
    out
}

/// Parsed line of the eval journal.
#[derive(Debug, Clone, PartialEq)]
pub struct JournalLine {
    pub image_id: String,
    pub cycle: u32,
    pub score: f64,
    pub verdict: Verdict,
}

pub fn parse_eval_journal(text: &str) -> Result<Vec<JournalLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |message: &str| Error::Parse {
            line: i + 1,
            message: message.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        out.push(JournalLine {
            image_id: fields[0].to_string(),
            cycle: fields[1].parse().map_err(|_| bad("bad cycle"))?,
            score: fields[2].parse().map_err(|_| bad("bad score"))?,
            verdict: match fields[3] {
                "pass" => Verdict::Pass,
                "fail" => Verdict::Fail,
                _ => return Err(bad("verdict must be pass or fail")),
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::clock::SimulatedClock;
    use crate::backends::mock::{MockBackend, MockConfig};
    use crate::backends::BackendResult;
    use crate::imaging::MemoryImageStore;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    const LABEL: &str = "snow leopard";

    fn hub(base: f64, gain: f64) -> Backends {
        let mock = MockBackend::new(MockConfig {
            base,
            gain,
            embed_dim: 64,
            resolution: 16,
            ..Default::default()
        })
        .unwrap();
        Backends::uniform(Arc::new(mock), Arc::new(SimulatedClock::new()))
    }

    fn description(i: usize) -> Description {
        Description::new(
            7,
            LABEL,
            vec![format!("thick fur {i}"), "long tail".into()],
            "a rocky slope".into(),
            Origin::Expanded,
        )
        .unwrap()
    }

    fn template() -> ClassFeatureTemplate {
        templating::parse_template2(
            "A photo of the class [snow leopard] with thick fur, long tail.",
            7,
            LABEL,
        )
        .unwrap()
    }

    fn config(threshold: f64) -> EvalConfig {
        EvalConfig {
            threshold,
            max_cycles: 3,
            seed: 11,
        }
    }

    fn run_one(hub: &Backends, threshold: f64) -> EvalOutcome {
        let store = MemoryImageStore::new();
        let img = generate_initial(7, 0, &description(0), hub, &store, 11).unwrap();
        evaluate_and_refine(
            img,
            &template(),
            LABEL,
            EvalBackends::from_hub(hub),
            &store,
            &config(threshold),
        )
        .unwrap()
    }

    #[test]
    fn refinement_climbs_to_acceptance() {
        let out = run_one(&hub(0.5, 0.2), 0.8);
        let scores: Vec<f64> = out.records.iter().map(|r| r.score).collect();
        for (s, want) in scores.iter().zip([0.5, 0.7, 0.9]) {
            assert!((s - want).abs() < 1e-6, "{scores:?}");
        }
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.image.status, ImageStatus::Accepted);
        assert_eq!(out.image.cycle, 3);
        assert_eq!(out.image.description.revision, 2);
        assert_eq!(
            out.records.iter().map(|r| r.revision).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn flat_coupling_is_rejected_at_cap() {
        let out = run_one(&hub(0.5, 0.0), 0.8);
        assert_eq!(out.image.status, ImageStatus::Rejected);
        assert_eq!(out.image.cycle, 3);
        assert!(out.records.iter().all(|r| r.verdict == Verdict::Fail));
    }

    #[test]
    fn pass_first_time_makes_no_refine_calls() {
        let h = hub(0.9, 0.0);
        let out = run_one(&h, 0.8);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.image.status, ImageStatus::Accepted);
        let t = h.tallies();
        assert!(!t.contains_key(&crate::backends::Kind::Refine));
        assert_eq!(t[&crate::backends::Kind::GenerateImage].calls, 1);
    }

    #[test]
    fn score_is_scale_invariant_cosine() {
        struct Fixed(Vec<f64>, Vec<f64>);
        impl Embedder for Fixed {
            fn embed_image(&self, _: &RgbImage) -> BackendResult<Embedding> {
                Ok(Embedding::normalized(self.0.clone()).unwrap())
            }
            fn embed_text(&self, _: &str) -> BackendResult<Embedding> {
                Ok(Embedding::normalized(self.1.clone()).unwrap())
            }
        }
        let img = RgbImage::new(2, 2);
        let same = Fixed(vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]);
        assert!((score_image(&img, &template(), &same).unwrap() - 1.0).abs() < 1e-6);
        let ortho = Fixed(vec![1.0, 0.0], vec![0.0, 5.0]);
        assert!(score_image(&img, &template(), &ortho).unwrap().abs() < 1e-6);
    }

    /// Replies with prose the parser cannot read.
    struct Garbled(AtomicUsize);
    impl Refiner for Garbled {
        fn refine(&self, _: &str, _: u64) -> BackendResult<String> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok("Sure! Here is a better one.".into())
        }
    }

    #[test]
    fn unparseable_refinement_regenerates_with_fresh_seed() {
        let h = hub(0.5, 0.2);
        let refiner = Garbled(AtomicUsize::new(0));
        let store = MemoryImageStore::new();
        let img = generate_initial(7, 0, &description(0), &h, &store, 11).unwrap();
        let backends = EvalBackends {
            refiner: &refiner,
            generator: &h,
            embedder: &h,
        };
        let out =
            evaluate_and_refine(img, &template(), LABEL, backends, &store, &config(0.8)).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.image.status, ImageStatus::Rejected);
        assert_eq!(out.image.description.revision, 0);
        assert_eq!(
            out.records.iter().map(|r| r.fresh_seed).collect::<Vec<_>>(),
            vec![false, true, true]
        );
        // one re-ask per failed refinement
        assert_eq!(refiner.0.load(Ordering::SeqCst), 4);
        assert_eq!(out.parse_failures.len(), 2);
        let a = store.get(&buffer_ref(&out.image.image_id, 2)).unwrap();
        let b = store.get(&buffer_ref(&out.image.image_id, 3)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn batch_of_mixed_outcomes() {
        let mut config_mock = MockConfig {
            base: 0.9,
            gain: 0.0,
            embed_dim: 32,
            resolution: 16,
            ..Default::default()
        };
        config_mock.coupling.insert(
            "bad".into(),
            crate::backends::mock::Coupling {
                base: 0.1,
                gain: 0.0,
            },
        );
        let h = Backends::uniform(
            Arc::new(MockBackend::new(config_mock).unwrap()),
            Arc::new(SimulatedClock::new()),
        );
        let store = MemoryImageStore::new();
        let mut images = Vec::new();
        let mut templates = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for (class_id, label) in [(0usize, "good"), (1, "bad")] {
            labels.insert(class_id, label.to_string());
            templates.insert(
                class_id,
                ClassFeatureTemplate {
                    class_id,
                    features: vec!["stripes".into()],
                    rendered: templating::render_template2(label, &["stripes".into()]).unwrap(),
                    fallback: false,
                },
            );
            for i in 0..50 {
                let d = Description::new(
                    class_id,
                    label,
                    vec![format!("feature {i}")],
                    "a field".into(),
                    Origin::Expanded,
                )
                .unwrap();
                images.push(generate_initial(class_id, i, &d, &h, &store, 3).unwrap());
            }
        }
        images.reverse();
        let ctx = EvalContext {
            templates: &templates,
            labels: &labels,
        };
        let out = run_eval_batch(
            images,
            &ctx,
            EvalBackends::from_hub(&h),
            &store,
            &config(0.8),
        )
        .unwrap();
        let accepted = out
            .iter()
            .filter(|o| o.image.status == ImageStatus::Accepted)
            .count();
        assert_eq!(accepted, 50);
        assert_eq!(
            out.iter().map(|o| o.records.len()).sum::<usize>(),
            50 + 50 * 3
        );
        assert_eq!(out[0].image.image_id, "c0000-00000");
        assert_eq!(out[99].image.image_id, "c0001-00049");

        let journal = parse_eval_journal(&eval_journal_tsv(&out)).unwrap();
        assert_eq!(journal.len(), 200);
        assert!(journal
            .iter()
            .all(|l| (l.verdict == Verdict::Pass) == (l.score >= 0.8)));
    }

    #[test]
    fn journal_parse_errors_carry_line() {
        let err = parse_eval_journal("a\t1\t0.5\tpass\nb\t1\tx\tfail\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
