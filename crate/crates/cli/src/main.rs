use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use regionscope::baseline::{baseline_nightlight, baseline_ols, baseline_pca, nightlight_feature};
use regionscope::config::PipelineConfig;
use regionscope::datadir::{DataDir, IngestInputs};
use regionscope::estimator::{
    predictions_from, read_predictions, write_predictions, EstimationConfig, EstimationInputs, Estimator, Prediction,
    Provenance, SelectionMode,
};
use regionscope::eval::{evaluate, Setting};
use regionscope::features::{build_feature_vectors, FeatureSpace, RawMatrix};
use regionscope::llm::DEFAULT_TEMPERATURE;
use regionscope::modules::{extract_all, HttpGeocoder, ModuleCache, ModuleOutputTable, ReverseGeocoder};
use regionscope::prompt::{
    build_selection_prompt, default_catalog, select_modules_with, serialize_table, PromptTemplateSet,
    SelectionResult, SELECTION_ITERATIONS, SELECTION_THRESHOLD,
};
use regionscope::region::{load_labels, split_kshot, Indicator, UnitKind};

#[derive(Parser)]
#[command(name = "regionscope", version, about = "Sub-national indicator estimation with info modules and in-context learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate inputs and write a data directory.
    Ingest {
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Indicator code (POP, ELP, HER, LPR, GRDP) or a custom code.
        #[arg(long, default_value = "POP")]
        indicator: String,
        /// Prompt phrase for a custom indicator code.
        #[arg(long)]
        phrase: Option<String>,
        /// Unit kind for a custom indicator code.
        #[arg(long, value_parser = ["count", "ratio"])]
        unit_kind: Option<String>,
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        nightlight: Option<PathBuf>,
        #[arg(long, requires = "legend")]
        landcover: Option<PathBuf>,
        #[arg(long, requires = "landcover")]
        legend: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask the backend which modules to run, by self-consistency voting.
    SelectModules {
        #[arg(long)]
        indicator: String,
        #[arg(long)]
        country: String,
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Output file, or a directory to receive selection_{country}_{indicator}.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the selected modules over every region.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        /// Module output table (JSON); a flat module_outputs.csv is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Result cache directory. Defaults to DATA/cache.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Reverse-geocoding endpoint for regions missing from the gazetteer.
        #[arg(long)]
        geocoder_url: Option<String>,
    },
    /// Render module outputs as one paragraph per region.
    Serialize {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pseudo-label estimation loop.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        backend: PathBuf,
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Data directory of a source country (with outputs.json) to draw demonstrations from.
        #[arg(long)]
        transfer_source: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Checkpoint file; an existing one is resumed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Non-LLM baselines.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        data: PathBuf,
        /// Module output table (ols and pca).
        #[arg(long)]
        outputs: Option<PathBuf>,
        /// Restrict ols/pca to the modules in --selection.
        #[arg(long, requires = "selection")]
        selected: bool,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate predictions with labels across seeds.
    Evaluate {
        /// One predictions.csv per seed.
        #[arg(long, num_args = 1.., required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        /// unsupervised, kshot:K or transfer:SOURCE
        #[arg(long)]
        setting: String,
        #[arg(long, default_value = "POP")]
        indicator: String,
        #[arg(long, default_value = "")]
        country: String,
        /// Seed of each predictions file, in order. Defaults to 0, 1, 2, ...
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    NoCoarse,
    NoFine,
    Random,
}

impl From<Mode> for SelectionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => SelectionMode::Full,
            Mode::NoCoarse => SelectionMode::NoCoarse,
            Mode::NoFine => SelectionMode::NoFine,
            Mode::Random => SelectionMode::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Nightlight,
    Ols,
    Pca,
}

fn indicator_for(code: &str, phrase: Option<String>, unit_kind: Option<String>) -> Result<Indicator> {
    match Indicator::lookup(code) {
        Ok(mut i) => {
            if let Some(p) = phrase {
                i.phrase = p;
            }
            if let Some(u) = unit_kind {
                i.unit_kind = u.parse()?;
            }
            Ok(i)
        }
        Err(_) => {
            let (Some(phrase), Some(u)) = (phrase, unit_kind) else {
                bail!("custom indicator {code:?} needs --phrase and --unit-kind");
            };
            Ok(Indicator {
                code: code.into(),
                phrase,
                unit_kind: u.parse()?,
            })
        }
    }
}

fn templates(path: &Option<PathBuf>) -> Result<PromptTemplateSet> {
    Ok(match path {
        Some(p) => PromptTemplateSet::load(p)?,
        None => PromptTemplateSet::default(),
    })
}

fn write_json(path: &Path, value: &BTreeMap<String, String>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn rows(values: Vec<(String, f64)>, indicator: &str, labeled: &[(String, f64)]) -> Vec<Prediction> {
    let mut out: Vec<Prediction> = values
        .into_iter()
        .filter(|(id, _)| !labeled.iter().any(|(l, _)| l == id))
        .map(|(region_id, prediction)| Prediction {
            region_id,
            indicator: indicator.into(),
            prediction,
            provenance: Provenance::Baseline,
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

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            regions,
            labels,
            indicator,
            phrase,
            unit_kind,
            gazetteer,
            targets,
            nightlight,
            landcover,
            legend,
            out,
        } => {
            let inputs = IngestInputs {
                regions,
                labels,
                indicator: Some(indicator_for(&indicator, phrase, unit_kind)?),
                gazetteer,
                targets,
                nightlight,
                landcover,
                legend,
            };
            let d = DataDir::ingest(&inputs, &out)?;
            println!(
                "ingested {} regions ({} labeled) for {} into {}",
                d.manifest.regions,
                d.manifest.labeled,
                d.manifest.country,
                out.display()
            );
        }
        Command::SelectModules {
            indicator,
            country,
            backend,
            templates: tpath,
            out,
        } => {
            let cfg = PipelineConfig::load(&backend)?;
            let phrase = Indicator::lookup(&indicator).map(|i| i.phrase).unwrap_or_else(|_| indicator.clone());
            let prompt = build_selection_prompt(&phrase, &country, &default_catalog(), &templates(&tpath)?)?;
            let b = cfg.backend.build()?;
            let iterations = cfg.selection.iterations.unwrap_or(SELECTION_ITERATIONS);
            let threshold = cfg.selection.threshold.unwrap_or(SELECTION_THRESHOLD);
            let temperature = cfg.selection.temperature.unwrap_or(DEFAULT_TEMPERATURE);
            let result = select_modules_with(&*b, &prompt, iterations, threshold, temperature)?;
            let path = if out.is_dir() {
                out.join(SelectionResult::file_name(&country, &indicator))
            } else {
                out
            };
            result.write(&path)?;
            for w in &result.warnings {
                log::warn!("{w}");
            }
            println!("selected {} modules -> {}", result.selected.len(), path.display());
            for c in &result.selected {
                println!("  {c} ({} votes)", result.votes[c]);
            }
        }
        Command::Extract {
            data,
            selection,
            out,
            cache,
            geocoder_url,
        } => {
            let d = DataDir::open(&data)?;
            let sel = SelectionResult::read(&selection)?;
            let geocoder = geocoder_url.map(|u| Arc::new(HttpGeocoder::new(u)) as Arc<dyn ReverseGeocoder>);
            let sources = d.sources(geocoder)?;
            let cache = ModuleCache::new(cache.unwrap_or_else(|| data.join("cache")));
            let table = extract_all(&d.dataset, &sel.selected, &sources, Some(&cache))?;
            table.write(&out)?;
            let csv = out.with_file_name("module_outputs.csv");
            table.write_csv(&csv)?;
            println!(
                "extracted {} calls for {} regions ({} cached, {} computed) -> {}",
                table.calls.len(),
                table.regions.len(),
                cache.hits(),
                cache.misses(),
                out.display()
            );
        }
        Command::Serialize {
            outputs,
            templates: tpath,
            out,
        } => {
            let table = ModuleOutputTable::read(&outputs)?;
            let paragraphs = serialize_table(&table, &templates(&tpath)?)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("paragraphs.json"), &paragraphs)?;
            println!("wrote {} paragraphs to {}", paragraphs.len(), out.display());
        }
        Command::Estimate {
            data,
            outputs,
            backend,
            k,
            seed,
            mode,
            transfer_source,
            templates: tpath,
            checkpoint,
            out,
        } => {
            let d = DataDir::open(&data)?;
            let cfg = PipelineConfig::load(&backend)?;
            let b = cfg.backend.build()?;
            let mut econf = cfg.estimation.apply(EstimationConfig::for_k(k, seed));
            if let Some(m) = mode {
                econf.selection_mode = m.into();
            }
            let tset = templates(&tpath)?;
            let table = ModuleOutputTable::read(&outputs)?;
            let paragraphs = serialize_table(&table, &tset)?;
            let code = d.manifest.indicator.code.clone();
            let rows = match transfer_source {
                None => {
                    let inputs = EstimationInputs {
                        paragraphs,
                        space: build_feature_vectors(&table)?,
                        indicator_phrase: d.manifest.indicator.phrase.clone(),
                        templates: tset,
                    };
                    let split = split_kshot(&d.dataset, &d.labels, k, seed)?;
                    let mut est = Estimator::new(&*b, econf, &inputs);
                    if let Some(cp) = checkpoint {
                        est = est.with_checkpoint(cp);
                    }
                    let outcome = est.estimate_all(&split)?;
                    if let Some(at) = outcome.log.resumed_at {
                        println!("resumed from iteration {at}");
                    }
                    for (id, trims) in &outcome.log.trims {
                        log::warn!("{id}: dropped {} demonstrations to fit the prompt budget", trims.len());
                    }
                    predictions_from(&outcome.store, &split.labeled, &code)
                }
                Some(src) => {
                    let sd = DataDir::open(&src)?;
                    let stable = ModuleOutputTable::read(&src.join("outputs.json"))
                        .with_context(|| format!("transfer source {} needs outputs.json", src.display()))?;
                    const PREFIX: &str = "source:";
                    let space = FeatureSpace::joint(&RawMatrix::from_table(&stable), &RawMatrix::from_table(&table), PREFIX)?;
                    let source_paragraphs: BTreeMap<String, String> = serialize_table(&stable, &tset)?
                        .into_iter()
                        .map(|(id, p)| (format!("{PREFIX}{id}"), p))
                        .collect();
                    let pool: Vec<(String, f64)> =
                        sd.labels.values.iter().map(|(id, v)| (format!("{PREFIX}{id}"), *v)).collect();
                    let inputs = EstimationInputs {
                        paragraphs,
                        space,
                        indicator_phrase: d.manifest.indicator.phrase.clone(),
                        templates: tset,
                    };
                    let targets: Vec<String> = d.dataset.ids().map(String::from).collect();
                    let est = Estimator::new(&*b, econf, &inputs);
                    let outcome = est.estimate_transfer(&targets, &pool, &source_paragraphs)?;
                    predictions_from(&outcome.store, &[], &code)
                }
            };
            write_predictions(&out, &rows)?;
            println!("wrote {} predictions to {}", rows.len(), out.display());
        }
        Command::Baseline {
            kind,
            data,
            outputs,
            selected,
            selection,
            k,
            seed,
            out,
        } => {
            let d = DataDir::open(&data)?;
            let split = split_kshot(&d.dataset, &d.labels, k, seed)?;
            let code = d.manifest.indicator.code.clone();
            let matrix = || -> Result<RawMatrix> {
                let Some(p) = &outputs else {
                    bail!("--outputs is required for this baseline");
                };
                let mut table = ModuleOutputTable::read(p)?;
                if selected {
                    let sel = SelectionResult::read(selection.as_ref().expect("clap enforces --selection"))?;
                    table = table.restrict(&sel.selected);
                }
                Ok(RawMatrix::from_table(&table))
            };
            let values = match kind {
                BaselineKind::Nightlight => {
                    let raster = d.nightlight()?.context("data directory has no nightlight raster")?;
                    let feat = nightlight_feature(&d.dataset, &raster, d.unit_kind());
                    baseline_nightlight(&feat, &split.labeled)?
                }
                BaselineKind::Ols => baseline_ols(&matrix()?, &split.labeled)?.predictions,
                BaselineKind::Pca => {
                    let m = baseline_pca(&matrix()?)?;
                    println!("leading eigenvalue {:.6} after {} iterations", m.eigenvalue, m.iterations);
                    m.scores
                }
            };
            let rows = rows(values, &code, &split.labeled);
            write_predictions(&out, &rows)?;
            println!("wrote {} predictions to {}", rows.len(), out.display());
        }
        Command::Evaluate {
            predictions,
            labels,
            setting,
            indicator,
            country,
            seeds,
            out,
        } => {
            let setting: Setting = setting.parse()?;
            if !seeds.is_empty() && seeds.len() != predictions.len() {
                bail!("{} seeds given for {} prediction files", seeds.len(), predictions.len());
            }
            let unit_kind = Indicator::lookup(&indicator).map(|i| i.unit_kind).unwrap_or(UnitKind::Count);
            let table = load_labels(&labels, &indicator, unit_kind)?;
            let mut runs = Vec::new();
            for (i, p) in predictions.iter().enumerate() {
                let seed = seeds.get(i).copied().unwrap_or(i as u64);
                runs.push((seed, read_predictions(p)?));
            }
            let report = evaluate(&country, &indicator, setting, &runs, &table.values)?;
            report.write(&out)?;
            let show = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{x:.4}"));
            println!(
                "pearson {} ± {}, spearman {} ± {} over {} seeds",
                show(report.mean_pearson),
                show(report.std_pearson),
                show(report.mean_spearman),
                show(report.std_spearman),
                report.per_seed.len()
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
