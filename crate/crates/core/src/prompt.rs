//! Prompt construction, self-consistency module selection, and paragraph
//! serialization of module results.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{complete_many, parse_module_list, Backend, CompletionRequest, DEFAULT_TEMPERATURE, SELECTION_MAX_TOKENS};
use crate::modules::{Family, LandcoverClass, ModuleCall, ModuleOutputTable, ModuleResult, Value};
use crate::region::TargetClass;

pub const SELECTION_ITERATIONS: usize = 10;
pub const SELECTION_THRESHOLD: usize = 5;

const SELECTION_TEMPLATE: &str = "Given a modular set, determine the sequence of modules that can be executed with inputs to solve the question given following the format below.

Format for reseponse:
1. MODULE 1
2. MODULE 2
...

The modules are defined as follows:
{module_catalog}

Question: {task_question}
Input:
- Location of the region - [Loc]

Answer:";

const TASK_QUESTION: &str = "Which information is useful to infer the {indicator} of {country}?";

const INSTRUCTION: &str = "Infer a the {indicator_phrase} from given location's description. Answer the numeric score only.";
const INSTRUCTION_CORRECTED: &str =
    "Infer the {indicator_phrase} from the given location's description. Answer the numeric score only.";

/// One line of the module catalog shown in the selection prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub family: String,
    pub signature: String,
    pub description: String,
}

/// The registered module families with their prompt descriptions, in
/// catalog order.
pub fn default_catalog() -> Vec<CatalogEntry> {
    let classes = LandcoverClass::ALL
        .iter()
        .map(|c| format!("\"{c}\""))
        .collect::<Vec<_>>()
        .join(", ");
    let targets = TargetClass::ALL
        .iter()
        .map(|t| format!("'{t}'"))
        .collect::<Vec<_>>()
        .join(", ");
    let entry = |family: Family, signature: &str, description: String| CatalogEntry {
        family: family.name().into(),
        signature: signature.into(),
        description,
    };
    vec![
        entry(
            Family::CountArea,
            "count_area(Loc, Class)",
            format!("Count the pixels of the given class in the location image. Class should be one of the element in [{classes}]."),
        ),
        entry(Family::GetAddress, "get_address(Loc)", "Get address of given location.".into()),
        entry(Family::GetArea, "get_area(Loc)", "Get area size of given location's region.".into()),
        entry(Family::GetNightLight, "get_night_light(Loc)", "Get nightlight intensity of given location.".into()),
        entry(
            Family::GetDistanceToNearestTarget,
            "get_distance_to_nearest_target(Loc, Class)",
            format!("Get distance of given location to class. Class should be one of the element in [{targets}]"),
        ),
        entry(
            Family::GetAggregateNeighborInfo,
            "get_aggregate_neighbor_info(Loc, Func)",
            "Get neighbor regions' information of given location, using functions defined above. The format of Func would be the lambda function (i.e., lambda x: [function name](loc=x, ...)).".into(),
        ),
    ]
}

/// Key into [`PromptTemplateSet::sentence_templates`].
pub fn sentence_key(call: &ModuleCall, value_name: &str) -> String {
    match call {
        ModuleCall::Neighbor(inner) => format!("{}.{value_name}.neighbor", inner.family().name()),
        other => format!("{}.{value_name}", other.family().name()),
    }
}

fn default_sentence_templates() -> BTreeMap<String, String> {
    let reps = [
        ModuleCall::Address,
        ModuleCall::Area,
        ModuleCall::NightLight,
        ModuleCall::CountArea(LandcoverClass::Bareland),
        ModuleCall::DistanceToNearest(TargetClass::Airport),
    ];
    let mut out = BTreeMap::new();
    for base in reps {
        let mut calls = vec![base.clone()];
        if let Ok(n) = ModuleCall::neighbor(base) {
            calls.push(n);
        }
        for call in calls {
            let class = call.inner().unwrap_or(&call).class_arg();
            for spec in call.value_specs() {
                let desc = match class {
                    Some(c) => spec.description.replace(c, "{class}"),
                    None => spec.description.clone(),
                };
                out.insert(sentence_key(&call, spec.name), format!("{desc} is {{value}}."));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplateSet {
    /// Slots: `{module_catalog}`, `{task_question}`.
    pub selection_template: String,
    /// Slots: `{indicator}`, `{country}`.
    pub task_question: String,
    /// Keyed by `family.value[.neighbor]`; slots `{class}`, `{value}`.
    pub sentence_templates: BTreeMap<String, String>,
    /// Slot: `{indicator_phrase}`.
    pub instruction_template: String,
    pub answer_prefix: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        PromptTemplateSet {
            selection_template: SELECTION_TEMPLATE.into(),
            task_question: TASK_QUESTION.into(),
            sentence_templates: default_sentence_templates(),
            instruction_template: INSTRUCTION.into(),
            answer_prefix: "Answer:".into(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct TemplateOverrides {
    selection_template: Option<String>,
    task_question: Option<String>,
    instruction_template: Option<String>,
    answer_prefix: Option<String>,
    /// Swap in the grammatical instruction sentence.
    #[serde(default)]
    corrected_instruction: bool,
    #[serde(default)]
    sentence_templates: BTreeMap<String, String>,
}

impl PromptTemplateSet {
    /// Defaults with the grammatical instruction sentence.
    pub fn corrected() -> Self {
        PromptTemplateSet {
            instruction_template: INSTRUCTION_CORRECTED.into(),
            ..Default::default()
        }
    }

    /// Applies a TOML override document on top of the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let o: TemplateOverrides = toml::from_str(text).map_err(|e| Error::parse("templates", e))?;
        let mut t = if o.corrected_instruction {
            Self::corrected()
        } else {
            Self::default()
        };
        if let Some(v) = o.selection_template {
            t.selection_template = v;
        }
        if let Some(v) = o.task_question {
            t.task_question = v;
        }
        if let Some(v) = o.instruction_template {
            t.instruction_template = v;
        }
        if let Some(v) = o.answer_prefix {
            t.answer_prefix = v;
        }
        t.sentence_templates.extend(o.sentence_templates);
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn instruction(&self, indicator_phrase: &str) -> String {
        self.instruction_template.replace("{indicator_phrase}", indicator_phrase)
    }
}

/// Round half-to-even at three decimals, then drop trailing zeros while
/// keeping at least one decimal digit.
pub fn format_number(x: f64) -> String {
    let r = (x * 1000.0).round_ties_even() / 1000.0;
    let mut s = format!("{r:.3}");
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    if s == "-0.0" {
        s = "0.0".into();
    }
    s
}

/// Demonstration labels always carry exactly one decimal.
pub fn format_label(x: f64) -> String {
    format!("{x:.1}")
}

pub fn build_selection_prompt(
    indicator_phrase: &str,
    country: &str,
    catalog: &[CatalogEntry],
    templates: &PromptTemplateSet,
) -> Result<String> {
    if catalog.is_empty() {
        return Err(Error::Validation("module catalog is empty".into()));
    }
    let module_catalog = catalog
        .iter()
        .map(|e| format!("- {}: {}", e.signature, e.description))
        .collect::<Vec<_>>()
        .join("\n\n");
    let question = templates
        .task_question
        .replace("{indicator}", indicator_phrase)
        .replace("{country}", country);
    Ok(templates
        .selection_template
        .replace("{module_catalog}", &module_catalog)
        .replace("{task_question}", &question))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub votes: BTreeMap<ModuleCall, usize>,
    /// Calls with at least `threshold` votes, in first-mention order.
    pub selected: Vec<ModuleCall>,
    pub iterations: usize,
    pub threshold: usize,
    pub raw_responses: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SelectionResult {
    /// Tallies responses with set semantics per response.
    pub fn tally(raw_responses: Vec<String>, threshold: usize) -> Self {
        let mut votes: BTreeMap<ModuleCall, usize> = BTreeMap::new();
        let mut first_seen: Vec<ModuleCall> = Vec::new();
        let mut warnings = Vec::new();
        for (i, text) in raw_responses.iter().enumerate() {
            let parsed = parse_module_list(text);
            for call in parsed.calls {
                *votes.entry(call.clone()).or_default() += 1;
                if !first_seen.contains(&call) {
                    first_seen.push(call);
                }
            }
            warnings.extend(parsed.warnings.into_iter().map(|w| format!("response {i}: {w}")));
        }
        let selected = first_seen
            .into_iter()
            .filter(|c| votes[c] >= threshold)
            .collect();
        SelectionResult {
            votes,
            selected,
            iterations: raw_responses.len(),
            threshold,
            raw_responses,
            warnings,
        }
    }

    pub fn file_name(country: &str, indicator: &str) -> String {
        format!("selection_{country}_{indicator}.json")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("selection serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

/// Self-consistency module selection: ten completions, keep calls named in
/// at least five of them.
pub fn select_modules(backend: &dyn Backend, prompt: &str) -> Result<SelectionResult> {
    select_modules_with(backend, prompt, SELECTION_ITERATIONS, SELECTION_THRESHOLD, DEFAULT_TEMPERATURE)
}

pub fn select_modules_with(
    backend: &dyn Backend,
    prompt: &str,
    iterations: usize,
    threshold: usize,
    temperature: f64,
) -> Result<SelectionResult> {
    let request = CompletionRequest::new(prompt)
        .max_tokens(SELECTION_MAX_TOKENS)
        .temperature(temperature);
    request.validate()?;
    let raw = complete_many(backend, &request, iterations)
        .into_iter()
        .collect::<Result<Vec<String>>>()?;
    let unparseable = raw.iter().filter(|r| parse_module_list(r).calls.is_empty()).count();
    if unparseable * 2 >= iterations {
        return Err(Error::Selection(format!(
            "{unparseable} of {iterations} responses named no known module"
        )));
    }
    Ok(SelectionResult::tally(raw, threshold))
}

fn render_sentence(result: &ModuleResult, value_index: usize, templates: &PromptTemplateSet) -> Result<String> {
    let v = &result.values[value_index];
    let key = sentence_key(&result.call, &v.name);
    let pattern = templates
        .sentence_templates
        .get(&key)
        .ok_or_else(|| Error::Config(format!("no sentence template for {key}")))?;
    let class = result.call.inner().unwrap_or(&result.call).class_arg().unwrap_or_default();
    let value = match &v.value {
        Value::Number(x) => format_number(*x),
        Value::Text(s) => s.clone(),
    };
    Ok(pattern
        .replace("{class}", class)
        .replace("{description}", &v.description)
        .replace("{value}", &value))
}

/// Renders a region's results as `"f_1 is r_1. ... f_m is r_m."`.
///
/// Results with no values (a failed address lookup, a missing target class)
/// are left out.
pub fn serialize_region(results: &[ModuleResult], templates: &PromptTemplateSet) -> Result<String> {
    let mut sentences = Vec::new();
    for r in results {
        if r.values.is_empty() {
            if let Some(w) = &r.warning {
                log::warn!("omitting {} from paragraph: {w}", r.call);
            }
            continue;
        }
        for i in 0..r.values.len() {
            sentences.push(render_sentence(r, i, templates)?);
        }
    }
    Ok(sentences.join(" "))
}

/// One paragraph per region of the table.
pub fn serialize_table(table: &ModuleOutputTable, templates: &PromptTemplateSet) -> Result<BTreeMap<String, String>> {
    table
        .regions
        .iter()
        .map(|id| Ok((id.clone(), serialize_region(table.get(id).unwrap_or_default(), templates)?)))
        .collect()
}

fn block(paragraph: &str, instruction: &str, answer: &str) -> String {
    format!("{paragraph}\n{instruction}\n{answer}")
}

/// Demonstrations (paragraph, label) followed by the unanswered target.
pub fn build_estimation_prompt(
    target_paragraph: &str,
    demonstrations: &[(String, f64)],
    indicator_phrase: &str,
    templates: &PromptTemplateSet,
) -> String {
    let instruction = templates.instruction(indicator_phrase);
    let prefix = &templates.answer_prefix;
    let mut blocks: Vec<String> = demonstrations
        .iter()
        .map(|(p, label)| block(p, &instruction, &format!("{prefix} {}", format_label(*label))))
        .collect();
    blocks.push(block(target_paragraph, &instruction, prefix));
    blocks.join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoSource {
    Labeled,
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub region_id: String,
    pub paragraph: String,
    pub label: f64,
    pub source: DemoSource,
}

/// A demonstration dropped to fit the context budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trim {
    pub region_id: String,
    pub source: DemoSource,
}

/// Builds the estimation prompt, dropping demonstrations until it fits in
/// `max_chars`: fine picks first (least similar first), then interior coarse
/// picks, then the coarse extremes. Labeled demonstrations are never dropped.
///
/// `demos` must be in prompt order; fine picks are assumed to be listed in
/// descending similarity among themselves via `fine_rank`.
pub fn build_estimation_prompt_within(
    target_paragraph: &str,
    demos: &[Demonstration],
    fine_rank: &[String],
    indicator_phrase: &str,
    templates: &PromptTemplateSet,
    max_chars: Option<usize>,
) -> (String, Vec<Trim>) {
    let render = |kept: &[&Demonstration]| {
        let pairs: Vec<(String, f64)> = kept.iter().map(|d| (d.paragraph.clone(), d.label)).collect();
        build_estimation_prompt(target_paragraph, &pairs, indicator_phrase, templates)
    };
    let mut kept: Vec<&Demonstration> = demos.iter().collect();
    let mut trims = Vec::new();
    let Some(limit) = max_chars else {
        return (render(&kept), trims);
    };
    let mut prompt = render(&kept);
    while prompt.chars().count() > limit {
        let victim = next_trim(&kept, fine_rank);
        let Some(idx) = victim else {
            log::warn!("prompt still exceeds {limit} chars with only labeled demonstrations");
            break;
        };
        let d = kept.remove(idx);
        trims.push(Trim {
            region_id: d.region_id.clone(),
            source: d.source,
        });
        prompt = render(&kept);
    }
    (prompt, trims)
}

fn next_trim(kept: &[&Demonstration], fine_rank: &[String]) -> Option<usize> {
    let rank = |id: &str| fine_rank.iter().position(|r| r == id).unwrap_or(usize::MAX);
    let fine = kept
        .iter()
        .enumerate()
        .filter(|(_, d)| d.source == DemoSource::Fine)
        .max_by_key(|(_, d)| rank(&d.region_id))
        .map(|(i, _)| i);
    if fine.is_some() {
        return fine;
    }
    let coarse: Vec<usize> = kept
        .iter()
        .enumerate()
        .filter(|(_, d)| d.source == DemoSource::Coarse)
        .map(|(i, _)| i)
        .collect();
    if coarse.is_empty() {
        return None;
    }
    let by_label = |i: &usize| kept[*i].label;
    let lo = *coarse.iter().min_by(|a, b| by_label(a).total_cmp(&by_label(b)))?;
    let hi = *coarse.iter().max_by(|a, b| by_label(a).total_cmp(&by_label(b)))?;
    let interior: Vec<usize> = coarse.iter().copied().filter(|i| *i != lo && *i != hi).collect();
    if !interior.is_empty() {
        // drop from the middle of the label range outward
        return Some(interior[interior.len() / 2]);
    }
    Some(if hi != lo { hi } else { lo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;
    use crate::modules::NamedValue;

    #[test]
    fn number_format_examples() {
        assert_eq!(format_number(0.020), "0.02");
        assert_eq!(format_number(3.824), "3.824");
        assert_eq!(format_number(0.55), "0.55");
        assert_eq!(format_number(402.647), "402.647");
        assert_eq!(format_number(5.0), "5.0");
        assert_eq!(format_number(0.0), "0.0");
        assert_eq!(format_number(-0.0001), "0.0");
        assert_eq!(format_number(0.0625), "0.062");
        assert_eq!(format_number(0.1875), "0.188");
        assert_eq!(format_number(1234567.891234), "1234567.891");
        assert_eq!(format_label(885670.0), "885670.0");
        assert_eq!(format_label(1177613.04), "1177613.0");
    }

    #[test]
    fn every_call_has_a_template_matching_its_description() {
        let t = PromptTemplateSet::default();
        for call in ModuleCall::all() {
            for spec in call.value_specs() {
                let r = ModuleResult {
                    call: call.clone(),
                    values: vec![NamedValue {
                        name: spec.name.into(),
                        description: spec.description.clone(),
                        value: Value::Number(1.5),
                    }],
                    warning: None,
                };
                assert_eq!(
                    render_sentence(&r, 0, &t).unwrap(),
                    format!("{} is 1.5.", spec.description),
                    "{call}"
                );
            }
        }
    }

    #[test]
    fn missing_template_is_config_error() {
        let mut t = PromptTemplateSet::default();
        t.sentence_templates.remove("get_area.area");
        let r = ModuleResult {
            call: ModuleCall::Area,
            values: vec![NamedValue {
                name: "area".into(),
                description: "x".into(),
                value: Value::Number(1.0),
            }],
            warning: None,
        };
        assert!(matches!(serialize_region(&[r], &t), Err(Error::Config(_))));
    }

    #[test]
    fn empty_result_is_omitted() {
        let t = PromptTemplateSet::default();
        let area = ModuleResult {
            call: ModuleCall::Area,
            values: vec![NamedValue {
                name: "area".into(),
                description: "area of region (km$^2$) of the given location".into(),
                value: Value::Number(402.647),
            }],
            warning: None,
        };
        let addr = ModuleResult {
            call: ModuleCall::Address,
            values: vec![],
            warning: Some("no geocoder".into()),
        };
        assert_eq!(
            serialize_region(&[addr, area], &t).unwrap(),
            "area of region (km$^2$) of the given location is 402.647."
        );
    }

    #[test]
    fn zero_shot_prompt() {
        let p = build_estimation_prompt("para.", &[], "population", &PromptTemplateSet::default());
        assert_eq!(
            p,
            "para.\nInfer a the population from given location's description. Answer the numeric score only.\nAnswer:"
        );
    }

    #[test]
    fn empty_catalog_rejected() {
        assert!(build_selection_prompt("population", "Malawi", &[], &PromptTemplateSet::default()).is_err());
    }

    #[test]
    fn template_overrides() {
        let t = PromptTemplateSet::from_toml(
            "corrected_instruction = true\n[sentence_templates]\n\"get_area.area\" = \"Area: {value} km2.\"\n",
        )
        .unwrap();
        assert!(t.instruction("population").starts_with("Infer the population from the given"));
        assert_eq!(t.sentence_templates["get_area.area"], "Area: {value} km2.");
        assert!(t.sentence_templates.contains_key("count_area.ratio"));
    }

    #[test]
    fn unanimous_and_subthreshold_votes() {
        let mut responses = vec!["1. get_area(Loc)\n2. count_area(Loc, \"road\")".to_string(); 4];
        responses.extend(vec!["1. get_area(Loc)".to_string(); 6]);
        let b = ScriptedBackend::new(responses);
        let s = select_modules(&b, "prompt").unwrap();
        assert_eq!(s.votes[&ModuleCall::Area], 10);
        assert_eq!(s.votes[&ModuleCall::CountArea(LandcoverClass::Road)], 4);
        assert_eq!(s.selected, vec![ModuleCall::Area]);
        assert_eq!(s.raw_responses.len(), 10);
    }

    #[test]
    fn too_many_unparseable_fails() {
        let mut responses = vec!["no idea".to_string(); 5];
        responses.extend(vec!["1. get_area(Loc)".to_string(); 5]);
        let b = ScriptedBackend::new(responses);
        assert!(matches!(select_modules(&b, "p"), Err(Error::Selection(_))));
    }

    fn demo(id: &str, label: f64, source: DemoSource) -> Demonstration {
        Demonstration {
            region_id: id.into(),
            paragraph: format!("paragraph of {id} with some padding text."),
            label,
            source,
        }
    }

    #[test]
    fn budget_trims_fine_then_interior_coarse() {
        let demos = vec![
            demo("l", 5.0, DemoSource::Labeled),
            demo("c1", 1.0, DemoSource::Coarse),
            demo("c2", 2.0, DemoSource::Coarse),
            demo("c3", 3.0, DemoSource::Coarse),
            demo("f1", 2.5, DemoSource::Fine),
            demo("f2", 2.6, DemoSource::Fine),
        ];
        let t = PromptTemplateSet::default();
        let rank = vec!["f2".to_string(), "f1".to_string()];
        let (full, trims) = build_estimation_prompt_within("target.", &demos, &rank, "population", &t, None);
        assert!(trims.is_empty());
        let (_, trims) =
            build_estimation_prompt_within("target.", &demos, &rank, "population", &t, Some(full.len() - 1));
        assert_eq!(trims.len(), 1);
        assert_eq!(trims[0].region_id, "f1");
        let (_, trims) = build_estimation_prompt_within("target.", &demos, &rank, "population", &t, Some(10));
        let order: Vec<&str> = trims.iter().map(|t| t.region_id.as_str()).collect();
        assert_eq!(order, vec!["f1", "f2", "c2", "c3", "c1"]);
    }
}
