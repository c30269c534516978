//! The pseudo-label in-context estimation loop and its demonstration
//! selection.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{similarity, FeatureSpace};
use crate::llm::{complete_many, parse_numeric_answer, Backend, CompletionRequest, DEFAULT_TEMPERATURE, DEFAULT_TOP_P, ESTIMATION_MAX_TOKENS};
use crate::prompt::{build_estimation_prompt_within, DemoSource, Demonstration, PromptTemplateSet, Trim};
use crate::region::KShotSplit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Full,
    NoCoarse,
    NoFine,
    Random,
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SelectionMode::Full),
            "no_coarse" => Ok(SelectionMode::NoCoarse),
            "no_fine" => Ok(SelectionMode::NoFine),
            "random" => Ok(SelectionMode::Random),
            other => Err(Error::Argument(format!("unknown selection mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub init_queries: usize,
    pub selection_mode: SelectionMode,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: u64,
    /// Re-queries after an unparseable answer, before the region is requeued.
    pub parse_retries: usize,
    /// Character budget for one estimation prompt.
    pub max_prompt_chars: Option<usize>,
}

impl EstimationConfig {
    /// Five coarse and five fine demos without labels, three each with.
    pub fn for_k(k: usize, seed: u64) -> Self {
        let n = if k == 0 { 5 } else { 3 };
        EstimationConfig {
            n_coarse: n,
            n_fine: n,
            init_queries: 3,
            selection_mode: SelectionMode::Full,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: ESTIMATION_MAX_TOKENS,
            seed,
            parse_retries: 2,
            max_prompt_chars: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coarse_on = matches!(self.selection_mode, SelectionMode::Full | SelectionMode::NoFine);
        if coarse_on && self.n_coarse < 2 {
            return Err(Error::Config(format!("n_coarse must be at least 2, got {}", self.n_coarse)));
        }
        if self.init_queries == 0 {
            return Err(Error::Config("init_queries must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Init,
    Loop,
    GroundTruth,
    Baseline,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Init => "init",
            Provenance::Loop => "loop",
            Provenance::GroundTruth => "ground_truth",
            Provenance::Baseline => "baseline",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Provenance::Init),
            "loop" => Ok(Provenance::Loop),
            "ground_truth" => Ok(Provenance::GroundTruth),
            "baseline" => Ok(Provenance::Baseline),
            other => Err(Error::Argument(format!("unknown provenance {other:?}"))),
        }
    }
}

/// Pseudo-labels in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    entries: Vec<(String, f64)>,
    provenance: BTreeMap<String, Provenance>,
}

impl PseudoLabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, region_id: impl Into<String>, value: f64, provenance: Provenance) -> Result<()> {
        let id = region_id.into();
        if self.provenance.contains_key(&id) {
            return Err(Error::Validation(format!("{id} already has a pseudo-label")));
        }
        self.provenance.insert(id.clone(), provenance);
        self.entries.push((id, value));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn provenance(&self, region_id: &str) -> Option<Provenance> {
        self.provenance.get(region_id).copied()
    }

    pub fn get(&self, region_id: &str) -> Option<f64> {
        self.entries.iter().find(|(id, _)| id == region_id).map(|(_, v)| *v)
    }

    pub fn contains(&self, region_id: &str) -> bool {
        self.provenance.contains_key(region_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn round_half_up_div(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Quantile-spaced picks over the store sorted by value (ties by id):
/// ranks `round(i·(S−1)/(n−1))` for `i = 0..n`.
pub fn select_coarse(entries: &[(String, f64)], n_coarse: usize) -> Vec<String> {
    let mut sorted: Vec<&(String, f64)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let s = sorted.len();
    if s == 0 || n_coarse == 0 {
        return Vec::new();
    }
    if s <= n_coarse {
        return sorted.iter().map(|e| e.0.clone()).collect();
    }
    if n_coarse == 1 {
        return vec![sorted[0].0.clone()];
    }
    let mut out: Vec<String> = Vec::with_capacity(n_coarse);
    for i in 0..n_coarse {
        let rank = round_half_up_div(i * (s - 1), n_coarse - 1);
        let id = &sorted[rank].0;
        if out.last() != Some(id) {
            out.push(id.clone());
        }
    }
    out
}

/// Every store member ranked by similarity to the target, best first, ties
/// by id.
pub fn rank_by_similarity(entries: &[(String, f64)], space: &FeatureSpace, target_id: &str) -> Result<Vec<String>> {
    let target = space
        .get(target_id)
        .ok_or_else(|| Error::Validation(format!("no feature vector for {target_id}")))?;
    let mut scored = Vec::with_capacity(entries.len());
    for (id, _) in entries {
        let v = space
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no feature vector for {id}")))?;
        scored.push((similarity(target, v)?, id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, id)| id.clone()).collect())
}

/// The `n_fine` most similar store members.
pub fn select_fine(entries: &[(String, f64)], space: &FeatureSpace, target_id: &str, n_fine: usize) -> Result<Vec<String>> {
    let mut ranked = rank_by_similarity(entries, space, target_id)?;
    ranked.truncate(n_fine);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoPick {
    pub region_id: String,
    pub label: f64,
    pub source: DemoSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub target_id: String,
    /// Labeled demos first, then pseudo demos by ascending label.
    pub members: Vec<DemoPick>,
    /// Fine picks, most similar first. Used when trimming to a budget.
    pub fine_rank: Vec<String>,
}

impl DemonstrationSet {
    pub fn pseudo_count(&self) -> usize {
        self.members.iter().filter(|m| m.source != DemoSource::Labeled).count()
    }

    pub fn with_paragraphs(&self, paragraphs: &BTreeMap<String, String>) -> Result<Vec<Demonstration>> {
        self.members
            .iter()
            .map(|m| {
                let paragraph = paragraphs
                    .get(&m.region_id)
                    .ok_or_else(|| Error::Validation(format!("no paragraph for {}", m.region_id)))?;
                Ok(Demonstration {
                    region_id: m.region_id.clone(),
                    paragraph: paragraph.clone(),
                    label: m.label,
                    source: m.source,
                })
            })
            .collect()
    }
}

fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + iteration);
    rng
}

/// Picks demonstrations for one target from the pseudo-label pool, then
/// appends the labeled set.
pub fn select_demonstrations(
    pool: &[(String, f64)],
    labeled: &[(String, f64)],
    space: &FeatureSpace,
    target_id: &str,
    config: &EstimationConfig,
    iteration: u64,
) -> Result<DemonstrationSet> {
    let pool: Vec<(String, f64)> = pool.iter().filter(|(id, _)| id != target_id).cloned().collect();
    let label_of: BTreeMap<&str, f64> = pool.iter().map(|(id, v)| (id.as_str(), *v)).collect();
    let mut picks: Vec<(String, DemoSource)> = Vec::new();
    let mut fine_rank = Vec::new();
    match config.selection_mode {
        SelectionMode::Full => {
            for id in select_coarse(&pool, config.n_coarse) {
                picks.push((id, DemoSource::Coarse));
            }
            let want = (config.n_coarse + config.n_fine).min(pool.len());
            let ranked = rank_by_similarity(&pool, space, target_id)?;
            // nearest first; skipping coarse picks backfills overlaps
            for id in ranked {
                if picks.len() >= want {
                    break;
                }
                if picks.iter().any(|(p, _)| *p == id) {
                    continue;
                }
                fine_rank.push(id.clone());
                picks.push((id, DemoSource::Fine));
            }
        }
        SelectionMode::NoCoarse => {
            for id in select_fine(&pool, space, target_id, config.n_fine)? {
                fine_rank.push(id.clone());
                picks.push((id, DemoSource::Fine));
            }
        }
        SelectionMode::NoFine => {
            for id in select_coarse(&pool, config.n_coarse) {
                picks.push((id, DemoSource::Coarse));
            }
        }
        SelectionMode::Random => {
            let mut rng = iteration_rng(config.seed, iteration);
            let n = (config.n_coarse + config.n_fine).min(pool.len());
            for (id, _) in pool.choose_multiple(&mut rng, n) {
                picks.push((id.clone(), DemoSource::Coarse));
            }
        }
    }
    let mut pseudo: Vec<DemoPick> = picks
        .into_iter()
        .map(|(id, source)| DemoPick {
            label: label_of[id.as_str()],
            region_id: id,
            source,
        })
        .collect();
    pseudo.sort_by(|a, b| a.label.total_cmp(&b.label).then_with(|| a.region_id.cmp(&b.region_id)));
    let mut members: Vec<DemoPick> = labeled
        .iter()
        .filter(|(id, _)| id != target_id)
        .map(|(id, y)| DemoPick {
            region_id: id.clone(),
            label: *y,
            source: DemoSource::Labeled,
        })
        .collect();
    members.extend(pseudo);
    Ok(DemonstrationSet {
        target_id: target_id.to_string(),
        members,
        fine_rank,
    })
}

/// Everything the loop needs besides the backend.
#[derive(Debug, Clone)]
pub struct EstimationInputs {
    pub paragraphs: BTreeMap<String, String>,
    pub space: FeatureSpace,
    pub indicator_phrase: String,
    pub templates: PromptTemplateSet,
}

/// Loop state persisted after every insertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub store: PseudoLabelStore,
    /// Regions still to estimate, in sampling order.
    pub queue: Vec<String>,
    /// Regions already pushed back once after persistent parse failures.
    pub requeued: Vec<String>,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    /// Atomic write: temp file then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Per-iteration view handed to an observer.
pub struct LoopState<'a> {
    pub iteration: u64,
    pub target_id: &'a str,
    pub store: &'a PseudoLabelStore,
    pub remaining: &'a VecDeque<String>,
    pub labeled: &'a [(String, f64)],
    pub demonstrations: &'a DemonstrationSet,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub trims: Vec<(String, Vec<Trim>)>,
    pub parse_failures: Vec<String>,
    pub requeued: Vec<String>,
    pub resumed_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationOutcome {
    pub store: PseudoLabelStore,
    pub log: RunLog,
}

/// Seeded sampling order over the unlabeled set.
pub fn sampling_order(unlabeled: &[String], seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order = unlabeled.to_vec();
    order.shuffle(&mut rng);
    order
}

pub fn config_hash(config: &EstimationConfig, split: &KShotSplit, inputs: &EstimationInputs) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(serde_json::to_vec(split).expect("split serializes"));
    h.update(inputs.indicator_phrase.as_bytes());
    for (id, p) in &inputs.paragraphs {
        h.update(id.as_bytes());
        h.update([0]);
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

pub struct Estimator<'a> {
    pub backend: &'a dyn Backend,
    pub config: EstimationConfig,
    pub inputs: &'a EstimationInputs,
    pub checkpoint: Option<PathBuf>,
}

impl<'a> Estimator<'a> {
    pub fn new(backend: &'a dyn Backend, config: EstimationConfig, inputs: &'a EstimationInputs) -> Self {
        Estimator {
            backend,
            config,
            inputs,
            checkpoint: None,
        }
    }

    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    fn request(&self, prompt: String) -> CompletionRequest {
        CompletionRequest::new(prompt)
            .temperature(self.config.temperature)
            .max_tokens(self.config.max_tokens)
            .top_p(self.config.top_p)
    }

    /// `n` completions averaged over the parseable ones, re-querying up to
    /// `parse_retries` times when none parse. `Ok(None)` means every attempt
    /// failed to parse.
    fn query(&self, prompt: &str, n: usize, log: &mut RunLog, target: &str) -> Result<Option<f64>> {
        let req = self.request(prompt.to_string());
        for _ in 0..=self.config.parse_retries {
            let mut values = Vec::new();
            for r in complete_many(self.backend, &req, n) {
                match parse_numeric_answer(&r?) {
                    Ok(v) => values.push(v),
                    Err(e) => log.parse_failures.push(format!("{target}: {e}")),
                }
            }
            if !values.is_empty() {
                return Ok(Some(values.iter().sum::<f64>() / values.len() as f64));
            }
        }
        Ok(None)
    }

    fn save(&self, cp: &Checkpoint) -> Result<()> {
        match &self.checkpoint {
            Some(path) => cp.write(path),
            None => Ok(()),
        }
    }

    pub fn estimate_all(&self, split: &KShotSplit) -> Result<EstimationOutcome> {
        self.estimate_all_observed(split, &mut |_| {})
    }

    /// Runs the loop; `observe` sees the state before each insertion.
    pub fn estimate_all_observed(
        &self,
        split: &KShotSplit,
        observe: &mut dyn FnMut(&LoopState),
    ) -> Result<EstimationOutcome> {
        self.config.validate()?;
        let hash = config_hash(&self.config, split, self.inputs);
        let mut log = RunLog::default();
        let mut cp = match &self.checkpoint {
            Some(path) if path.exists() => {
                let cp = Checkpoint::read(path)?;
                if cp.config_hash != hash {
                    return Err(Error::Config(format!(
                        "checkpoint {} was written for a different configuration",
                        path.display()
                    )));
                }
                log.resumed_at = Some(cp.iteration);
                cp
            }
            _ => Checkpoint {
                config_hash: hash,
                store: PseudoLabelStore::new(),
                queue: sampling_order(&split.unlabeled, self.config.seed),
                requeued: Vec::new(),
                iteration: 0,
            },
        };
        let mut queue: VecDeque<String> = cp.queue.iter().cloned().collect();
        while let Some(target) = queue.pop_front() {
            let is_init = cp.store.is_empty();
            let demos = select_demonstrations(
                cp.store.entries(),
                &split.labeled,
                &self.inputs.space,
                &target,
                &self.config,
                cp.iteration,
            )?;
            observe(&LoopState {
                iteration: cp.iteration,
                target_id: &target,
                store: &cp.store,
                remaining: &queue,
                labeled: &split.labeled,
                demonstrations: &demos,
            });
            let paragraph = self
                .inputs
                .paragraphs
                .get(&target)
                .ok_or_else(|| Error::Validation(format!("no paragraph for {target}")))?;
            let (prompt, trims) = build_estimation_prompt_within(
                paragraph,
                &demos.with_paragraphs(&self.inputs.paragraphs)?,
                &demos.fine_rank,
                &self.inputs.indicator_phrase,
                &self.inputs.templates,
                self.config.max_prompt_chars,
            );
            if !trims.is_empty() {
                log.trims.push((target.clone(), trims));
            }
            let n = if is_init { self.config.init_queries } else { 1 };
            let answer = match self.query(&prompt, n, &mut log, &target) {
                Ok(a) => a,
                Err(e) => {
                    // leave a resumable state that still includes this region
                    queue.push_front(target);
                    cp.queue = queue.into_iter().collect();
                    self.save(&cp)?;
                    return Err(e);
                }
            };
            match answer {
                Some(v) => {
                    let prov = if is_init { Provenance::Init } else { Provenance::Loop };
                    cp.store.insert(target, v, prov)?;
                }
                None if !cp.requeued.contains(&target) => {
                    log::warn!("no parseable answer for {target}; requeueing");
                    log.requeued.push(target.clone());
                    cp.requeued.push(target.clone());
                    queue.push_back(target);
                }
                None => {
                    queue.push_front(target.clone());
                    cp.queue = queue.into_iter().collect();
                    self.save(&cp)?;
                    return Err(Error::Estimation(format!(
                        "no parseable answer for {target} after retries and requeue; partial store saved"
                    )));
                }
            }
            cp.iteration += 1;
            cp.queue = queue.iter().cloned().collect();
            self.save(&cp)?;
        }
        Ok(EstimationOutcome { store: cp.store, log })
    }

    /// Pure transfer: every target is estimated from demonstrations drawn
    /// from the source pool only. `space` must hold source regions under
    /// `source_prefix` and target regions under their own ids; `source_pool`
    /// and `source_paragraphs` use the prefixed ids.
    pub fn estimate_transfer(
        &self,
        targets: &[String],
        source_pool: &[(String, f64)],
        source_paragraphs: &BTreeMap<String, String>,
    ) -> Result<EstimationOutcome> {
        self.config.validate()?;
        if source_pool.is_empty() {
            return Err(Error::Validation("transfer source has no labeled regions".into()));
        }
        let mut paragraphs = self.inputs.paragraphs.clone();
        paragraphs.extend(source_paragraphs.iter().map(|(k, v)| (k.clone(), v.clone())));
        let mut log = RunLog::default();
        let mut store = PseudoLabelStore::new();
        for (i, target) in targets.iter().enumerate() {
            let demos = select_demonstrations(source_pool, &[], &self.inputs.space, target, &self.config, i as u64)?;
            let paragraph = paragraphs
                .get(target)
                .ok_or_else(|| Error::Validation(format!("no paragraph for {target}")))?;
            let (prompt, trims) = build_estimation_prompt_within(
                paragraph,
                &demos.with_paragraphs(&paragraphs)?,
                &demos.fine_rank,
                &self.inputs.indicator_phrase,
                &self.inputs.templates,
                self.config.max_prompt_chars,
            );
            if !trims.is_empty() {
                log.trims.push((target.clone(), trims));
            }
            match self.query(&prompt, 1, &mut log, target)? {
                Some(v) => store.insert(target.clone(), v, Provenance::Loop)?,
                None => {
                    return Err(Error::Estimation(format!("no parseable answer for {target}")));
                }
            }
        }
        Ok(EstimationOutcome { store, log })
    }
}

/// One row of `predictions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub region_id: String,
    pub indicator: String,
    pub prediction: f64,
    pub provenance: Provenance,
}

/// Store entries followed by the labeled set.
pub fn predictions_from(store: &PseudoLabelStore, labeled: &[(String, f64)], indicator: &str) -> Vec<Prediction> {
    let mut out: Vec<Prediction> = store
        .entries()
        .iter()
        .map(|(id, v)| Prediction {
            region_id: id.clone(),
            indicator: indicator.into(),
            prediction: *v,
            provenance: store.provenance(id).unwrap_or(Provenance::Loop),
        })
        .collect();
    out.extend(labeled.iter().map(|(id, v)| Prediction {
        region_id: id.clone(),
        indicator: indicator.into(),
        prediction: *v,
        provenance: Provenance::GroundTruth,
    }));
    out
}

pub fn write_predictions(path: &Path, rows: &[Prediction]) -> Result<()> {
    let err = |e: csv::Error| Error::parse(path.display().to_string(), e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let err = |e: csv::Error| Error::parse(path.display().to_string(), e);
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for row in r.deserialize() {
        let p: Prediction = row.map_err(err)?;
        if !seen.insert(p.region_id.clone()) {
            return Err(Error::Validation(format!("duplicate prediction for {}", p.region_id)));
        }
        out.push(p);
    }
    Ok(out)
}
