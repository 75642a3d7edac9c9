use super::dsl::{check_program, evaluate, EvalContext, ExtractorProgram};
use super::prompts;
use super::{
    unit_score, CardEntry, FeatureCard, FeatureSpec, FeatureType, JudgeType, JudgeVerdict,
    MetaDecision, Provenance, SchemaError,
};
use crate::provider::{complete_parsed, extract_json, LlmProvider, ProviderError};
use crate::text::fnv1a;
use crate::trace::{Catalogs, ToolIndex, Trajectory};
use crate::value::{FeatureValue, ValueType};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    /// Trajectories shown to the analyzer, one call each.
    pub max_batch: usize,
    pub max_repairs: usize,
    pub max_refinements: usize,
    /// A feature extractable on fewer than this share of trajectories is
    /// flagged as hallucinated.
    pub hallucination_threshold: f64,
    /// Attempts per structured call before giving up on a response.
    pub parse_attempts: usize,
    /// Also turn `conditional` meta decisions into columns.
    pub include_conditional: bool,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            max_batch: 8,
            max_repairs: 3,
            max_refinements: 2,
            hallucination_threshold: 0.5,
            parse_attempts: 3,
            include_conditional: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedSpec {
    pub feature_name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Analysis {
    pub specs: Vec<FeatureSpec>,
    pub rejected: Vec<RejectedSpec>,
}

/// Parses `{"potential_features": [...]}` (or `filtered_features`, or a bare
/// array) into specs paired with their raw `program` value, if any.
fn parse_spec_list(raw: &str) -> Result<Vec<(FeatureSpec, Option<serde_json::Value>)>, String> {
    let v = extract_json(raw)?;
    let items = match &v {
        serde_json::Value::Array(items) => items.clone(),
        serde_json::Value::Object(o) => ["potential_features", "filtered_features", "features"]
            .iter()
            .find_map(|k| o.get(*k).and_then(|x| x.as_array()).cloned())
            .ok_or_else(|| "expected a `potential_features` array".to_string())?,
        _ => return Err("expected a JSON array or object".into()),
    };
    let mut out = Vec::new();
    for (i, mut item) in items.into_iter().enumerate() {
        let program = item.as_object_mut().and_then(|o| o.remove("program"));
        match serde_json::from_value::<FeatureSpec>(item) {
            Ok(spec) if !spec.feature_name.trim().is_empty() => out.push((spec, program)),
            Ok(_) => log::warn!("feature {i}: empty feature_name, skipped"),
            Err(e) => log::warn!("feature {i}: {e}, skipped"),
        }
    }
    Ok(out)
}

fn checked_program(v: &serde_json::Value) -> Result<ExtractorProgram, String> {
    let p = ExtractorProgram::from_json(v)?;
    check_program(&p).map_err(|e| e.to_string())?;
    Ok(p)
}

/// Asks the code extractor for a program; `Ok(None)` when no valid program
/// was produced within the attempt budget.
fn request_program(
    spec: &FeatureSpec,
    target: &str,
    provider: &dyn LlmProvider,
    cfg: &SchemaConfig,
) -> Result<Option<ExtractorProgram>, SchemaError> {
    let prompt = prompts::code_extractor(spec, target);
    match complete_parsed(provider, &prompt, cfg.parse_attempts, |raw| {
        checked_program(&extract_json(raw)?)
    }) {
        Ok(p) => Ok(Some(p)),
        Err(ProviderError::Unparseable { last_error, .. }) => {
            log::warn!("feature {}: no valid program: {last_error}", spec.feature_name);
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Resolves programs for parsed specs, rejecting those whose program reads
/// out-of-bounds content.
fn admit_specs(
    parsed: Vec<(FeatureSpec, Option<serde_json::Value>)>,
    target: &str,
    provider: &dyn LlmProvider,
    cfg: &SchemaConfig,
    out: &mut Analysis,
) -> Result<(), SchemaError> {
    for (mut spec, program) in parsed {
        match program {
            Some(v) => match checked_program(&v) {
                Ok(p) => spec.program = Some(p),
                Err(reason) => {
                    log::warn!("feature {} rejected: {reason}", spec.feature_name);
                    out.rejected.push(RejectedSpec {
                        feature_name: spec.feature_name,
                        reason,
                    });
                    continue;
                }
            },
            None => match request_program(&spec, target, provider, cfg)? {
                Some(p) => spec.program = Some(p),
                None => {
                    out.rejected.push(RejectedSpec {
                        feature_name: spec.feature_name,
                        reason: "no valid extractor program".into(),
                    });
                    continue;
                }
            },
        }
        out.specs.push(spec);
    }
    Ok(())
}

/// Proposes feature specs from the part of each trajectory that precedes the
/// decision step, merging proposals by exact `feature_name` (first wins).
pub fn analyze_features(
    batch: &[Trajectory],
    target: &str,
    provider: &dyn LlmProvider,
    cfg: &SchemaConfig,
) -> Result<Analysis, SchemaError> {
    if batch.is_empty() {
        return Err(SchemaError::EmptyBatch);
    }
    let shown: Vec<(&Trajectory, usize)> = batch
        .iter()
        .filter_map(|t| t.target_index(target).map(|i| (t, i)))
        .take(cfg.max_batch.max(1))
        .collect();
    if shown.is_empty() {
        return Err(SchemaError::TargetAbsent(target.to_string()));
    }
    let mut merged: Vec<(FeatureSpec, Option<serde_json::Value>)> = Vec::new();
    let mut names = BTreeSet::new();
    for (t, i) in shown {
        let prompt = prompts::analyzer(t, i, target);
        let parsed = complete_parsed(provider, &prompt, cfg.parse_attempts, parse_spec_list)?;
        for (spec, program) in parsed {
            if names.insert(spec.feature_name.clone()) {
                merged.push((spec, program));
            }
        }
    }
    let mut out = Analysis::default();
    admit_specs(merged, target, provider, cfg, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// `None` when the feature is unextractable for this trajectory.
    pub value: Option<FeatureValue>,
    /// The program that produced the value (possibly repaired).
    pub program: ExtractorProgram,
    pub repairs: usize,
    pub errors: Vec<String>,
}

/// Evaluates a spec's program, asking for repairs after runtime failures.
/// At most `max_repairs` repair calls are made; each carries every error seen
/// so far.
pub fn compile_and_run(
    spec: &FeatureSpec,
    ctx: &EvalContext<'_>,
    provider: &dyn LlmProvider,
    max_repairs: usize,
) -> Result<RunOutcome, SchemaError> {
    let original = spec
        .program
        .clone()
        .ok_or_else(|| SchemaError::NoProgram(spec.feature_name.clone()))?;
    check_program(&original).map_err(|source| SchemaError::Sandbox {
        feature: spec.feature_name.clone(),
        source,
    })?;
    let mut program = original;
    let mut runnable = true;
    let mut errors: Vec<String> = Vec::new();
    let mut repairs = 0;
    loop {
        if runnable {
            match evaluate(&program, ctx) {
                Ok(value) => {
                    return Ok(RunOutcome {
                        value: Some(value),
                        program,
                        repairs,
                        errors,
                    })
                }
                Err(e) => errors.push(e),
            }
        }
        if repairs == max_repairs {
            log::debug!(
                "feature {} unextractable on task {} after {repairs} repairs",
                spec.feature_name,
                ctx.trajectory.task_id
            );
            return Ok(RunOutcome {
                value: None,
                program,
                repairs,
                errors,
            });
        }
        repairs += 1;
        let raw = provider.complete(&prompts::code_repair(spec, &program, &errors))?;
        match extract_json(&raw).and_then(|v| checked_program(&v)) {
            Ok(p) => {
                program = p;
                runnable = true;
            }
            Err(e) => {
                errors.push(format!("repair response rejected: {e}"));
                runnable = false;
            }
        }
    }
}

/// Per-trajectory realization of a set of specs, column-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RealizedTable {
    pub task_ids: Vec<String>,
    pub columns: Vec<Vec<Option<FeatureValue>>>,
}

/// Runs every spec on every trajectory that contains the decision step.
/// Repaired programs replace the spec's program for later trajectories.
pub fn realize_features(
    specs: &mut [FeatureSpec],
    trajectories: &[Trajectory],
    target: &str,
    tools: &ToolIndex,
    provider: &dyn LlmProvider,
    cfg: &SchemaConfig,
) -> Result<RealizedTable, SchemaError> {
    let mut table = RealizedTable {
        task_ids: Vec::new(),
        columns: vec![Vec::new(); specs.len()],
    };
    for t in trajectories {
        let Some(target_index) = t.target_index(target) else {
            continue;
        };
        table.task_ids.push(t.task_id.clone());
        let ctx = EvalContext {
            trajectory: t,
            target_index,
            candidate: None,
            tools: Some(tools),
        };
        for (spec, column) in specs.iter_mut().zip(&mut table.columns) {
            let out = compile_and_run(spec, &ctx, provider, cfg.max_repairs)?;
            if out.value.is_some() && out.repairs > 0 {
                spec.program = Some(out.program);
            }
            column.push(out.value);
        }
    }
    for (spec, column) in specs.iter_mut().zip(&table.columns) {
        spec.realized_type = dominant_type(column);
    }
    Ok(table)
}

fn dominant_type(column: &[Option<FeatureValue>]) -> Option<ValueType> {
    let mut counts: BTreeMap<ValueType, usize> = BTreeMap::new();
    for v in column.iter().flatten() {
        *counts.entry(v.value_type()).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None::<(ValueType, usize)>, |best, (t, n)| match best {
            Some((_, m)) if m >= n => best,
            _ => Some((t, n)),
        })
        .map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    Hallucinated { extractable_rate: f64 },
    TypeDrift { declared: FeatureType, realized: Vec<ValueType> },
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationFlag {
    pub feature_name: String,
    pub issue: Issue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRequest {
    pub feature_name: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReview {
    pub agreement: bool,
    pub flags: Vec<ValidationFlag>,
    pub repair_requests: Vec<RepairRequest>,
}

impl ValidationReview {
    pub fn flagged(&self) -> BTreeSet<&str> {
        self.flags.iter().map(|f| f.feature_name.as_str()).collect()
    }
}

/// Flags hallucinated (rarely extractable), type-drifting, and constant columns.
pub fn validate_extraction(
    specs: &[FeatureSpec],
    realized: &RealizedTable,
    hallucination_threshold: f64,
) -> ValidationReview {
    let mut review = ValidationReview::default();
    let n = realized.task_ids.len();
    for (spec, column) in specs.iter().zip(&realized.columns) {
        let name = &spec.feature_name;
        let present: Vec<&FeatureValue> = column.iter().flatten().collect();
        let rate = if n == 0 { 0.0 } else { present.len() as f64 / n as f64 };
        if rate < hallucination_threshold {
            review.flags.push(ValidationFlag {
                feature_name: name.clone(),
                issue: Issue::Hallucinated {
                    extractable_rate: rate,
                },
            });
            review.repair_requests.push(RepairRequest {
                feature_name: name.clone(),
                instruction: format!(
                    "extractable on only {:.0}% of trajectories; read a source that is \
                     present in most trajectories or drop the feature",
                    rate * 100.0
                ),
            });
            continue;
        }
        let realized_types: BTreeSet<ValueType> = present.iter().map(|v| v.value_type()).collect();
        if realized_types.iter().any(|t| !spec.feature_type.admits(*t)) {
            review.flags.push(ValidationFlag {
                feature_name: name.clone(),
                issue: Issue::TypeDrift {
                    declared: spec.feature_type,
                    realized: realized_types.iter().copied().collect(),
                },
            });
            review.repair_requests.push(RepairRequest {
                feature_name: name.clone(),
                instruction: format!(
                    "declared {} but produced {:?}; fix the program or the declared type",
                    spec.feature_type, realized_types
                ),
            });
            continue;
        }
        let distinct: BTreeSet<String> = present.iter().map(|v| v.category()).collect();
        if distinct.len() == 1 && present.len() > 1 {
            review.flags.push(ValidationFlag {
                feature_name: name.clone(),
                issue: Issue::Constant,
            });
            review.repair_requests.push(RepairRequest {
                feature_name: name.clone(),
                instruction: "takes a single value on every trajectory".into(),
            });
        }
    }
    review.agreement = review.flags.is_empty();
    review
}

fn parse_verdicts(
    raw: &str,
    judge: JudgeType,
    names: &[&str],
) -> Result<Vec<JudgeVerdict>, String> {
    let v = extract_json(raw)?;
    if let Some(jt) = v.get("judge_type").and_then(|x| x.as_str()) {
        if JudgeType::parse(jt) != Some(judge) {
            return Err(format!("judge_type `{jt}` does not match {}", judge.stage()));
        }
    }
    let items = v
        .get("features")
        .unwrap_or(&v)
        .as_array()
        .ok_or("expected a `features` array")?;
    let mut by_name: BTreeMap<String, JudgeVerdict> = BTreeMap::new();
    for item in items {
        let name = item["feature_name"]
            .as_str()
            .ok_or("verdict without feature_name")?;
        if !names.contains(&name) {
            return Err(format!("verdict for unknown feature `{name}`"));
        }
        let score = item["score"]
            .as_f64()
            .ok_or_else(|| format!("`{name}`: score is not a number"))?;
        if !(1.0..=5.0).contains(&score) {
            return Err(format!("`{name}`: score {score} outside 1-5"));
        }
        let confidence = item["confidence"].as_f64().unwrap_or(3.0);
        if !(1.0..=5.0).contains(&confidence) {
            return Err(format!("`{name}`: confidence {confidence} outside 1-5"));
        }
        let verdict = JudgeVerdict {
            judge_type: judge,
            score: unit_score(score),
            confidence: unit_score(confidence),
            assessment: item["assessment"].as_str().unwrap_or_default().to_string(),
            key_factors: item["key_factors"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|k| k.as_str().map(str::to_string))
                .collect(),
            raw_score: score,
        };
        if by_name.insert(name.to_string(), verdict).is_some() {
            return Err(format!("`{name}` rated twice"));
        }
    }
    names
        .iter()
        .map(|n| {
            by_name
                .remove(*n)
                .ok_or_else(|| format!("no verdict for `{n}`"))
        })
        .collect()
}

/// One verdict per judge per feature. The three judges run concurrently and
/// each sees only the card, never another judge's output.
pub fn judge_features(
    specs: &[FeatureSpec],
    provider: &dyn LlmProvider,
    cfg: &SchemaConfig,
) -> Result<Vec<(FeatureSpec, Vec<JudgeVerdict>)>, SchemaError> {
    if specs.is_empty() {
        return Err(SchemaError::EmptyCard);
    }
    let names: Vec<&str> = specs.iter().map(|s| s.feature_name.as_str()).collect();
    let results: Vec<Result<Vec<JudgeVerdict>, ProviderError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = JudgeType::ALL
            .iter()
            .map(|&judge| {
                let names = &names;
                scope.spawn(move || {
                    let prompt = prompts::judge(judge, specs);
                    complete_parsed(provider, &prompt, cfg.parse_attempts, |raw| {
                        parse_verdicts(raw, judge, names)
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("judge thread panicked"))
            .collect()
    });
    let mut per_judge = Vec::with_capacity(3);
    for r in results {
        per_judge.push(r?);
    }
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut spec = spec.clone();
            let verdicts: Vec<JudgeVerdict> = per_judge.iter().map(|v| v[i].clone()).collect();
            spec.relevance_score = verdicts[0].score;
            (spec, verdicts)
        })
        .collect())
}

struct Decision {
    decision: MetaDecision,
    meta_score: f64,
    confidence: f64,
    rationale: String,
}

fn parse_decisions(
    raw: &str,
    features: &[(FeatureSpec, Vec<JudgeVerdict>)],
) -> Result<Vec<Decision>, String> {
    let v = extract_json(raw)?;
    let items = v
        .get("features")
        .unwrap_or(&v)
        .as_array()
        .ok_or("expected an array of decisions")?;
    let mut by_name: BTreeMap<String, Decision> = BTreeMap::new();
    for item in items {
        let name = item["feature_name"]
            .as_str()
            .ok_or("decision without feature_name")?;
        let Some((_, verdicts)) = features.iter().find(|(s, _)| s.feature_name == name) else {
            return Err(format!("decision for unknown feature `{name}`"));
        };
        let raw_decision = item["final_decision"].as_str().unwrap_or_default();
        let decision = MetaDecision::parse(raw_decision)
            .ok_or_else(|| format!("`{name}`: final_decision `{raw_decision}` is not accept/conditional/reject"))?;
        let rationale = item["decision_rationale"]
            .as_str()
            .unwrap_or_default()
            .trim()
            .to_string();
        if decision == MetaDecision::Reject && rationale.is_empty() {
            return Err(format!("`{name}`: rejection without decision_rationale"));
        }
        if verdicts.iter().all(|v| v.score == 0.0) && decision != MetaDecision::Reject {
            return Err(format!("`{name}`: every judge scored 0 but decision is not reject"));
        }
        let meta_score = item["meta_score"].as_f64().unwrap_or(0.0);
        let confidence = item["confidence"].as_f64().unwrap_or(0.0);
        by_name.insert(
            name.to_string(),
            Decision {
                decision,
                meta_score,
                confidence,
                rationale,
            },
        );
    }
    features
        .iter()
        .map(|(s, _)| {
            by_name
                .remove(&s.feature_name)
                .ok_or_else(|| format!("no decision for `{}`", s.feature_name))
        })
        .collect()
}

/// Reconciles judge verdicts into accept / conditional / reject decisions.
pub fn meta_judge(
    features: &[(FeatureSpec, Vec<JudgeVerdict>)],
    provider: &dyn LlmProvider,
    cfg: &SchemaConfig,
) -> Result<FeatureCard, SchemaError> {
    if features.is_empty() {
        return Err(SchemaError::EmptyCard);
    }
    for (spec, verdicts) in features {
        let types: BTreeSet<JudgeType> = verdicts.iter().map(|v| v.judge_type).collect();
        if verdicts.len() != 3 || types.len() != 3 {
            return Err(SchemaError::MissingVerdicts(spec.feature_name.clone()));
        }
    }
    let prompt = prompts::meta(features);
    let decisions = complete_parsed(provider, &prompt, cfg.parse_attempts, |raw| {
        parse_decisions(raw, features)
    })?;
    let entries = features
        .iter()
        .zip(decisions)
        .map(|((spec, verdicts), d)| CardEntry {
            spec: spec.clone(),
            verdicts: verdicts.clone(),
            final_decision: d.decision,
            meta_score: d.meta_score,
            confidence: d.confidence,
            decision_rationale: d.rationale,
        })
        .collect();
    Ok(FeatureCard {
        features: entries,
        provenance: Provenance {
            provider: provider.id(),
            include_conditional: cfg.include_conditional,
            ..Provenance::default()
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabSchemaRun {
    pub card: FeatureCard,
    pub reviews: Vec<ValidationReview>,
}

/// Analyzer, extraction with repairs, validation with bounded refinement,
/// judges, and meta-judge, in that order.
pub fn run_tabschema(
    trajectories: &[Trajectory],
    catalogs: &Catalogs,
    target: &str,
    provider: &dyn LlmProvider,
    cfg: &SchemaConfig,
    seed: u64,
) -> Result<TabSchemaRun, SchemaError> {
    let successful: Vec<Trajectory> = trajectories
        .iter()
        .filter(|t| t.is_successful())
        .cloned()
        .collect();
    if successful.is_empty() {
        return Err(SchemaError::EmptyBatch);
    }
    let tools = ToolIndex::new(catalogs);
    let analysis = analyze_features(&successful, target, provider, cfg)?;
    let mut rejected = analysis.rejected;
    let mut specs = analysis.specs;
    let batch: Vec<&Trajectory> = successful
        .iter()
        .filter(|t| t.target_index(target).is_some())
        .take(cfg.max_batch.max(1))
        .collect();
    let batch_hash = format!(
        "{:016x}",
        fnv1a(serde_json::to_string(&batch).expect("batch serializes").as_bytes())
    );

    let mut realized = realize_features(&mut specs, &successful, target, &tools, provider, cfg)?;
    let mut reviews = vec![validate_extraction(&specs, &realized, cfg.hallucination_threshold)];
    let mut cycles = 0;
    while !reviews.last().expect("non-empty").agreement && cycles < cfg.max_refinements {
        cycles += 1;
        let review = reviews.last().expect("non-empty").clone();
        let prompt = prompts::refiner(&specs, &review.repair_requests);
        let parsed = complete_parsed(provider, &prompt, cfg.parse_attempts, parse_spec_list)?;
        let flagged = review.flagged();
        let revisions: Vec<_> = parsed
            .into_iter()
            .filter(|(s, _)| flagged.contains(s.feature_name.as_str()))
            .collect();
        if revisions.is_empty() {
            break;
        }
        let mut revised = Analysis::default();
        admit_specs(revisions, target, provider, cfg, &mut revised)?;
        rejected.extend(revised.rejected);
        for r in revised.specs {
            if let Some(slot) = specs.iter_mut().find(|s| s.feature_name == r.feature_name) {
                *slot = r;
            }
        }
        realized = realize_features(&mut specs, &successful, target, &tools, provider, cfg)?;
        reviews.push(validate_extraction(&specs, &realized, cfg.hallucination_threshold));
    }
    let last = reviews.last().expect("non-empty").clone();
    let flagged = last.flagged();
    specs.retain(|s| !flagged.contains(s.feature_name.as_str()));
    if specs.is_empty() {
        return Err(SchemaError::EmptyCard);
    }

    let judged = judge_features(&specs, provider, cfg)?;
    let mut card = meta_judge(&judged, provider, cfg)?;
    card.provenance = Provenance {
        provider: provider.id(),
        seed,
        batch_hash,
        target: target.to_string(),
        refinement_cycles: cycles,
        rejected_specs: rejected,
        dropped_after_validation: last.flags,
        include_conditional: cfg.include_conditional,
    };
    Ok(TabSchemaRun { card, reviews })
}
