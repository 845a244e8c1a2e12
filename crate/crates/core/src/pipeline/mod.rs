//! End-to-end, resumable run.
//!
//! Stages run in a fixed order with a full barrier between them:
//! ingest, caption, expand (with dedup), templates, generate, evaluate, mix.
//! Work inside a stage is split into units (a class, or one image during
//! evaluation) that run on a bounded worker pool. Every finished unit is
//! checkpointed and journaled, so a resumed run loads finished units instead
//! of recomputing them and produces the same bytes as an uninterrupted run.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml              effective configuration
//! journal.jsonl            hash-chained event log
//! checkpoints/<stage>/     per-unit results
//! manifest.tsv             ingested dataset
//! descriptions/            class_XXXX.tsv: class_id, origin, revision, text
//! templates.tsv            class_id, fallback flag, template sentence
//! images/                  every generated image, one file per cycle
//! images.tsv               every generated image with its final status
//! eval_journal.tsv         image_id, cycle, score, verdict
//! pool.tsv                 accepted images
//! parse_failures.tsv       unparseable model replies
//! mix/                     mixed samples, labels.tsv, index.tsv
//! summary.json             per-class counts and backend tallies
//! ```

pub mod config;
pub mod journal;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, CallTally};
use crate::dataset::{DatasetManifest, Split, SplitStats};
use crate::error::{Error, Result};
use crate::eval::{self, EvalBackends, EvalOutcome, GeneratedImage, ImageStatus};
use crate::fsutil;
use crate::imaging::DirImageStore;
use crate::mix::{
    self, Emitter, FileOriginals, GeneratedPool, OriginalImages, ProceduralOriginals,
};
use crate::reflection::{self, ExpansionState, ExpansionStatus, ParseFailure};
use crate::seed::sha256_hex;
use crate::templating::{ClassFeatureTemplate, DescriptionList, Origin};

use config::OriginalSource;
pub use config::PipelineConfig;
use journal::{Checkpoints, Journal, Outcome, Progress};

pub const CONFIG_FILE: &str = "config.toml";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

const INGEST: &str = "ingest";
const CAPTION: &str = "caption";
const EXPAND: &str = "expand";
const TEMPLATES: &str = "templates";
const GENERATE: &str = "generate";
const EVALUATE: &str = "evaluate";
const MIX: &str = "mix";
const RUN: &str = "run";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_id: usize,
    pub label: String,
    pub split: Split,
    pub original: usize,
    pub captioned: usize,
    pub expanded_kept: usize,
    pub list_size: usize,
    pub target_total: usize,
    pub stalled: bool,
    pub template_fallback: bool,
    pub generated: usize,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub per_class_cap: usize,
    pub score_threshold: f64,
    pub split_stats: SplitStats,
    pub classes: Vec<ClassSummary>,
    pub stalled_classes: Vec<usize>,
    pub generated: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub acceptance_rate: f64,
    pub parse_failures: usize,
    pub mix_samples: usize,
    /// Backend activity of the process that finished the run.
    pub tallies: BTreeMap<String, CallTally>,
}

impl RunSummary {
    pub fn render(&self) -> String {
        let mut out = format!(
            "dataset {}: cap {} threshold {}\n",
            self.dataset, self.per_class_cap, self.score_threshold
        );
        out.push_str("class\tlabel\toriginal\tlist\ttarget\tgenerated\taccepted\trejected\n");
        for c in &self.classes {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}{}\n",
                c.class_id,
                c.label,
                c.original,
                c.list_size,
                c.target_total,
                c.generated,
                c.accepted,
                c.rejected,
                if c.stalled { "\tstalled" } else { "" }
            ));
        }
        out.push_str(&format!(
            "generated {} accepted {} rejected {} (acceptance {:.3}); mixed samples {}\n",
            self.generated, self.accepted, self.rejected, self.acceptance_rate, self.mix_samples
        ));
        for (kind, t) in &self.tallies {
            out.push_str(&format!(
                "{kind}: {} calls, {} cache hits, {} retries, {} failures\n",
                t.calls, t.cache_hits, t.retries, t.failures
            ));
        }
        out
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    backends: Backends,
    out: PathBuf,
}

impl Pipeline {
    /// A pipeline whose backends are built from `config`.
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.into();
        let backends = config.build_backends(&out)?;
        Ok(Pipeline {
            config,
            backends,
            out,
        })
    }

    pub fn with_backends(
        config: PipelineConfig,
        backends: Backends,
        out: impl Into<PathBuf>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            config,
            backends,
            out: out.into(),
        })
    }

    /// Reopens an existing run directory using its saved configuration.
    pub fn open(out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        let config = saved_config(&out)?;
        Self::new(config, out)
    }

    pub fn open_with_backends(out: impl Into<PathBuf>, backends: Backends) -> Result<Self> {
        let out = out.into();
        let config = saved_config(&out)?;
        Self::with_backends(config, backends, out)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Starts a new run in an empty (or missing) output directory.
    pub fn run(&mut self, manifest_path: &Path) -> Result<RunSummary> {
        if self.out.join(JOURNAL_FILE).exists() {
            return Err(Error::validation(format!(
                "{} already holds a run; use resume",
                self.out.display()
            )));
        }
        let text =
            std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let name = manifest_path
            .file_stem()
            .map_or("dataset".to_string(), |s| s.to_string_lossy().into_owned());
        let manifest = DatasetManifest::ingest_str(name, &text)?;
        self.check_manifest(&manifest)?;
        if self.config.original_root.is_none() {
            let parent = manifest_path.parent().unwrap_or(Path::new("."));
            let parent = if parent.as_os_str().is_empty() {
                Path::new(".")
            } else {
                parent
            };
            self.config.original_root =
                Some(parent.canonicalize().map_err(|e| Error::io(parent, e))?);
        }
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        fsutil::write_atomic(
            &self.out.join(CONFIG_FILE),
            self.config.to_toml()?.as_bytes(),
        )?;

        let run = self.start()?;
        run.unit(INGEST, "manifest", || Ok(manifest.clone()))?;
        run.seal(
            INGEST,
            &[("manifest.tsv".into(), manifest.serialize().into_bytes())],
        )?;
        run.proceed(manifest)
    }

    /// Continues an interrupted run; a finished run just returns its summary.
    pub fn resume(&mut self) -> Result<RunSummary> {
        let run = self.start()?;
        let Some(hash) = run.progress.unit_hash(INGEST, "manifest") else {
            return Err(Error::validation(format!(
                "{} has no ingested manifest to resume from",
                self.out.display()
            )));
        };
        let manifest: DatasetManifest = run.checkpoints.load(INGEST, "manifest", hash)?;
        if !run.progress.is_sealed(INGEST) {
            run.seal(
                INGEST,
                &[("manifest.tsv".into(), manifest.serialize().into_bytes())],
            )?;
        }
        run.proceed(manifest)
    }

    fn check_manifest(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.config.num_mix_samples > 0 {
            mix::BalancedSampler::new(manifest)?;
        }
        Ok(())
    }

    fn start(&self) -> Result<Run<'_>> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let (journal, events) =
            Journal::open(&self.out.join(JOURNAL_FILE), self.backends.clock().clone())?;
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.worker_width)
            .build()
            .map_err(|e| Error::validation(format!("cannot start worker pool: {e}")))?;
        Ok(Run {
            config: &self.config,
            backends: &self.backends,
            out: &self.out,
            journal,
            progress: Progress::from_events(&events),
            checkpoints: Checkpoints::new(&self.out),
            workers,
        })
    }
}

fn saved_config(out: &Path) -> Result<PipelineConfig> {
    let path = out.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::validation(format!(
            "{} is not a run directory",
            out.display()
        )));
    }
    PipelineConfig::load(&path)
}

struct Run<'a> {
    config: &'a PipelineConfig,
    backends: &'a Backends,
    out: &'a Path,
    journal: Journal,
    progress: Progress,
    checkpoints: Checkpoints,
    workers: rayon::ThreadPool,
}

fn class_unit(class_id: usize) -> String {
    format!("class_{class_id:04}")
}

fn outputs_digest(outputs: &[(String, Vec<u8>)]) -> String {
    let listing: String = outputs
        .iter()
        .map(|(rel, bytes)| format!("{rel}\t{}\n", sha256_hex(bytes)))
        .collect();
    sha256_hex(listing.as_bytes())
}

fn tsv_field(text: &str) -> String {
    text.replace('\t', " ")
        .replace('\r', "")
        .replace('\n', "\\n")
}

impl Run<'_> {
    /// Loads a finished unit or computes, checkpoints and journals it.
    fn unit<T: Serialize + DeserializeOwned>(
        &self,
        stage: &str,
        unit: &str,
        f: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        if let Some(hash) = self.progress.unit_hash(stage, unit) {
            return self.checkpoints.load(stage, unit, hash);
        }
        match f() {
            Ok(value) => {
                let hash = self.checkpoints.save(stage, unit, &value)?;
                self.journal.append(stage, unit, &hash, Outcome::Done)?;
                Ok(value)
            }
            Err(e) => {
                if let Err(j) = self.journal.append(stage, unit, "", Outcome::Failed) {
                    log::error!("could not journal failure of {stage}/{unit}: {j}");
                }
                Err(e)
            }
        }
    }

    fn units<I, T>(
        &self,
        stage: &str,
        items: &[I],
        name: impl Fn(&I) -> String + Sync,
        f: impl Fn(&I) -> Result<T> + Sync,
    ) -> Result<Vec<T>>
    where
        I: Sync,
        T: Serialize + DeserializeOwned + Send,
    {
        log::info!("stage {stage}: {} units", items.len());
        self.workers.install(|| {
            items
                .par_iter()
                .map(|item| self.unit(stage, &name(item), || f(item)))
                .collect()
        })
    }

    /// Writes a stage's outputs and marks the stage complete. Outputs of a
    /// stage sealed earlier are left as they are.
    fn seal(&self, stage: &str, outputs: &[(String, Vec<u8>)]) -> Result<()> {
        if self.progress.is_sealed(stage) {
            return Ok(());
        }
        for (rel, bytes) in outputs {
            fsutil::write_atomic(&self.out.join(rel), bytes)?;
        }
        self.journal
            .append(stage, "*", &outputs_digest(outputs), Outcome::Sealed)?;
        Ok(())
    }

    fn proceed(&self, manifest: DatasetManifest) -> Result<RunSummary> {
        if let Some(hash) = self.progress.sealed.get(RUN) {
            let path = self.out.join(SUMMARY_FILE);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if &outputs_digest(&[(SUMMARY_FILE.into(), bytes.clone())]) != hash {
                return Err(Error::Integrity(format!(
                    "{} does not match the journal",
                    path.display()
                )));
            }
            log::info!("run already complete");
            return Ok(serde_json::from_slice(&bytes)?);
        }
        let config = self.config;
        let seed = config.seed;
        let hub = self.backends;
        let classes = &manifest.classes;

        let captions: Vec<(DescriptionList, Vec<ParseFailure>)> = self.units(
            CAPTION,
            classes,
            |c| class_unit(c.class_id),
            |c| reflection::caption_existing(c, hub, seed),
        )?;
        self.seal(CAPTION, &[])?;

        let quotas = manifest.generation_quota(config.cap()?)?;
        let jobs: Vec<usize> = (0..classes.len()).collect();
        let states: Vec<ExpansionState> = self.units(
            EXPAND,
            &jobs,
            |&i| class_unit(classes[i].class_id),
            |&i| {
                let state = ExpansionState::new(
                    &classes[i],
                    captions[i].0.clone(),
                    quotas[i],
                    config.batch_size,
                );
                reflection::run_self_reflection(state, hub, config.batch_size, seed)
            },
        )?;
        let description_files: Vec<(String, Vec<u8>)> = states
            .iter()
            .map(|s| {
                let body: String = s
                    .list
                    .items
                    .iter()
                    .map(|d| {
                        format!(
                            "{}\t{}\t{}\t{}\n",
                            s.class_id,
                            d.origin.as_str(),
                            d.revision,
                            d.raw_text
                        )
                    })
                    .collect();
                (
                    format!("descriptions/class_{:04}.tsv", s.class_id),
                    body.into_bytes(),
                )
            })
            .collect();
        self.seal(EXPAND, &description_files)?;

        let templates: Vec<(ClassFeatureTemplate, Option<ParseFailure>)> = self.units(
            TEMPLATES,
            &jobs,
            |&i| class_unit(classes[i].class_id),
            |&i| reflection::build_class_feature_template(&classes[i], &states[i].list, hub, seed),
        )?;
        let templates_tsv: String = templates
            .iter()
            .map(|(t, _)| format!("{}\t{}\t{}\n", t.class_id, t.fallback, t.rendered))
            .collect();
        self.seal(
            TEMPLATES,
            &[("templates.tsv".into(), templates_tsv.into_bytes())],
        )?;

        let store = DirImageStore::new(self.out);
        let generated: Vec<Vec<GeneratedImage>> = self.units(
            GENERATE,
            &jobs,
            |&i| class_unit(classes[i].class_id),
            |&i| {
                states[i]
                    .list
                    .items
                    .iter()
                    .filter(|d| d.origin == Origin::Expanded)
                    .enumerate()
                    .map(|(k, d)| {
                        eval::generate_initial(classes[i].class_id, k, d, hub, &store, seed)
                    })
                    .collect()
            },
        )?;
        self.seal(GENERATE, &[])?;

        let eval_config = config.eval_config()?;
        let template_of: BTreeMap<usize, &ClassFeatureTemplate> =
            templates.iter().map(|(t, _)| (t.class_id, t)).collect();
        let images: Vec<GeneratedImage> = generated.into_iter().flatten().collect();
        let mut outcomes: Vec<EvalOutcome> = self.units(
            EVALUATE,
            &images,
            |img| img.image_id.clone(),
            |img| {
                let class = &classes[img.class_id];
                eval::evaluate_and_refine(
                    img.clone(),
                    template_of[&img.class_id],
                    &class.label,
                    EvalBackends::from_hub(hub),
                    &store,
                    &eval_config,
                )
            },
        )?;
        outcomes.sort_by(|a, b| {
            (a.image.class_id, &a.image.image_id).cmp(&(b.image.class_id, &b.image.image_id))
        });
        let pool = GeneratedPool::from_outcomes(&outcomes);

        let mut failures: Vec<&ParseFailure> = Vec::new();
        for i in 0..classes.len() {
            failures.extend(&captions[i].1);
            failures.extend(&states[i].parse_failures);
            failures.extend(&templates[i].1);
        }
        failures.extend(outcomes.iter().flat_map(|o| &o.parse_failures));
        let failures_tsv: String = failures
            .iter()
            .map(|f| {
                format!(
                    "{}\t{}\t{}\t{}\n",
                    f.class_id,
                    f.stage,
                    tsv_field(&f.subject),
                    tsv_field(&f.text)
                )
            })
            .collect();
        let images_tsv: String = outcomes
            .iter()
            .map(|o| {
                let i = &o.image;
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    i.image_id,
                    i.class_id,
                    i.status.as_str(),
                    i.cycle,
                    i.description.revision,
                    i.buffer_ref,
                    i.last_score.unwrap_or(f64::NAN)
                )
            })
            .collect();
        self.seal(
            EVALUATE,
            &[
                (
                    "eval_journal.tsv".into(),
                    eval::eval_journal_tsv(&outcomes).into_bytes(),
                ),
                ("pool.tsv".into(), pool.to_tsv().into_bytes()),
                ("images.tsv".into(), images_tsv.into_bytes()),
                ("parse_failures.tsv".into(), failures_tsv.into_bytes()),
            ],
        )?;

        let mix_samples: usize = self.unit(MIX, "samples", || {
            let originals = originals_for(config);
            let emitter = Emitter::new(
                &manifest,
                &pool,
                config.mix_config(config.num_mix_samples, seed),
                originals.as_ref(),
                &store,
            )?;
            mix::write_samples(&self.out.join("mix"), &emitter)
        })?;
        self.seal(MIX, &[])?;

        let summary = summarize(
            &manifest,
            config,
            &states,
            &templates,
            &outcomes,
            failures.len(),
            mix_samples,
            hub,
        )?;
        let bytes = serde_json::to_vec_pretty(&summary)?;
        self.seal(RUN, &[(SUMMARY_FILE.into(), bytes)])?;
        Ok(summary)
    }
}

fn originals_for(config: &PipelineConfig) -> Box<dyn OriginalImages> {
    match config.original_images {
        OriginalSource::Files => Box::new(FileOriginals {
            root: config
                .original_root
                .clone()
                .unwrap_or_else(|| PathBuf::from(".")),
        }),
        OriginalSource::Procedural => Box::new(ProceduralOriginals {
            side: config.resolution,
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    manifest: &DatasetManifest,
    config: &PipelineConfig,
    states: &[ExpansionState],
    templates: &[(ClassFeatureTemplate, Option<ParseFailure>)],
    outcomes: &[EvalOutcome],
    parse_failures: usize,
    mix_samples: usize,
    hub: &Backends,
) -> Result<RunSummary> {
    let mut classes = Vec::new();
    for (i, class) in manifest.classes.iter().enumerate() {
        let mine = outcomes
            .iter()
            .filter(|o| o.image.class_id == class.class_id);
        let (mut accepted, mut rejected, mut generated) = (0, 0, 0);
        for o in mine {
            generated += 1;
            match o.image.status {
                ImageStatus::Accepted => accepted += 1,
                ImageStatus::Rejected => rejected += 1,
                ImageStatus::Pending => {}
            }
        }
        let s = &states[i];
        classes.push(ClassSummary {
            class_id: class.class_id,
            label: class.label.clone(),
            split: Split::of_count(class.original_count()),
            original: class.original_count(),
            captioned: s.list.count_origin(Origin::Captioned),
            expanded_kept: s.list.count_origin(Origin::Expanded),
            list_size: s.list.len(),
            target_total: s.target_total,
            stalled: s.status == ExpansionStatus::Stalled,
            template_fallback: templates[i].0.fallback,
            generated,
            accepted,
            rejected,
        });
    }
    let generated: usize = classes.iter().map(|c| c.generated).sum();
    let accepted: usize = classes.iter().map(|c| c.accepted).sum();
    Ok(RunSummary {
        dataset: manifest.name.clone(),
        per_class_cap: config.cap()?,
        score_threshold: config.threshold()?,
        split_stats: manifest.split_stats(),
        stalled_classes: classes
            .iter()
            .filter(|c| c.stalled)
            .map(|c| c.class_id)
            .collect(),
        generated,
        accepted,
        rejected: classes.iter().map(|c| c.rejected).sum(),
        acceptance_rate: if generated == 0 {
            0.0
        } else {
            accepted as f64 / generated as f64
        },
        parse_failures,
        mix_samples,
        tallies: hub
            .tallies()
            .into_iter()
            .map(|(k, t)| (k.as_str().to_string(), t))
            .collect(),
        classes,
    })
}

/// Emits `num` extra mixed samples from a finished run into
/// `<run>/mix_s<seed>_n<num>/`, returning that directory.
pub fn emit_mix(run_dir: &Path, num: usize, seed: u64) -> Result<PathBuf> {
    let config = saved_config(run_dir)?;
    let text = std::fs::read_to_string(run_dir.join(JOURNAL_FILE))
        .map_err(|e| Error::io(run_dir.join(JOURNAL_FILE), e))?;
    let progress = Progress::from_events(&journal::replay(&text)?);
    if !progress.is_sealed(EVALUATE) {
        return Err(Error::validation(format!(
            "{} has not finished evaluation; resume it first",
            run_dir.display()
        )));
    }
    let hash = progress
        .unit_hash(INGEST, "manifest")
        .ok_or_else(|| Error::Integrity("journal has no manifest checkpoint".into()))?;
    let manifest: DatasetManifest = Checkpoints::new(run_dir).load(INGEST, "manifest", hash)?;
    let pool_path = run_dir.join("pool.tsv");
    let pool_text = std::fs::read_to_string(&pool_path).map_err(|e| Error::io(&pool_path, e))?;
    let pool = GeneratedPool::parse_tsv(&pool_text)?;
    let originals = originals_for(&config);
    let store = DirImageStore::new(run_dir);
    let emitter = Emitter::new(
        &manifest,
        &pool,
        config.mix_config(num, seed),
        originals.as_ref(),
        &store,
    )?;
    let dir = run_dir.join(format!("mix_s{seed}_n{num}"));
    mix::write_samples(&dir, &emitter)?;
    Ok(dir)
}
