//! Seeded generator for desk-scale trajectory corpora.
//!
//! The generator reproduces a target tools-per-task histogram exactly (quotas
//! by largest remainder), builds one catalog per app, and writes CUGA-style
//! step sequences. With `plant_state_dependence` set, a planner step before
//! the shortlister lists the tools that the coder later invokes, and a share
//! of intents are rewritten to copy the description of a tool that is *not*
//! used (a lexical decoy). Lexical scorers are misled by the decoys while a
//! scorer reading the planner state is not.

use super::{ArgSpec, ArgType, Catalogs, Role, Step, ToolCatalog, ToolSpec, Trajectory, Turn};
use super::TraceError;
use crate::text::tokenize;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppSpec {
    pub name: String,
    pub n_tasks: usize,
    pub catalog_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub apps: Vec<AppSpec>,
    /// `(tools per task, weight)`; weights are normalized.
    pub tool_count_weights: Vec<(usize, f64)>,
    pub plant_state_dependence: bool,
    /// Fraction of tasks whose intent copies a decoy tool's description.
    pub decoy_fraction: f64,
    /// Fraction of multi-tool tasks with an earlier shortlisting round.
    pub prior_shortlister_fraction: f64,
}

/// Tools-per-task counts over 605 successful tasks.
pub const APPWORLD_TOOL_COUNTS: [(usize, usize); 12] = [
    (1, 155),
    (2, 175),
    (3, 151),
    (4, 69),
    (5, 29),
    (6, 10),
    (7, 6),
    (8, 5),
    (9, 2),
    (10, 1),
    (13, 1),
    (15, 1),
];

impl CorpusSpec {
    /// 605 single-app tasks with the reference tools-per-task histogram.
    ///
    /// The five core apps carry their reference task counts (529 tasks); the
    /// remaining 76 are spread over three smaller apps.
    pub fn appworld_like() -> Self {
        let apps = [
            ("amazon", 230, 60),
            ("gmail", 190, 60),
            ("phone", 73, 40),
            ("simple_note", 17, 30),
            ("spotify", 19, 50),
            ("venmo", 40, 40),
            ("splitwise", 20, 30),
            ("file_system", 16, 30),
        ];
        CorpusSpec {
            apps: apps
                .iter()
                .map(|(name, n, c)| AppSpec {
                    name: name.to_string(),
                    n_tasks: *n,
                    catalog_size: *c,
                })
                .collect(),
            tool_count_weights: APPWORLD_TOOL_COUNTS
                .iter()
                .map(|(k, n)| (*k, *n as f64))
                .collect(),
            plant_state_dependence: false,
            decoy_fraction: 0.0,
            prior_shortlister_fraction: 0.25,
        }
    }

    /// Five apps, `n_tasks` tasks split in reference proportions, planted
    /// planner state and lexical decoys on 60% of tasks.
    pub fn planted(n_tasks: usize) -> Self {
        let shares = [
            ("amazon", 230.0, 60),
            ("gmail", 190.0, 60),
            ("phone", 73.0, 40),
            ("simple_note", 17.0, 30),
            ("spotify", 19.0, 50),
        ];
        let total: f64 = shares.iter().map(|s| s.1).sum();
        let weights: Vec<f64> = shares.iter().map(|s| s.1 / total).collect();
        let counts = largest_remainder(&weights, n_tasks);
        CorpusSpec {
            apps: shares
                .iter()
                .zip(counts)
                .map(|((name, _, c), n)| AppSpec {
                    name: name.to_string(),
                    n_tasks: n,
                    catalog_size: *c,
                })
                .collect(),
            tool_count_weights: APPWORLD_TOOL_COUNTS
                .iter()
                .map(|(k, n)| (*k, *n as f64))
                .collect(),
            plant_state_dependence: true,
            decoy_fraction: 0.6,
            prior_shortlister_fraction: 0.25,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.apps.iter().map(|a| a.n_tasks).sum()
    }
}

/// Integer quotas proportional to `weights` summing to `total`.
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable: ties resolved by bin order.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Fraction of `description` tokens that also occur in `intent`.
pub fn lexical_overlap(description: &str, intent: &str) -> f64 {
    let desc: BTreeSet<String> = tokenize(description).into_iter().collect();
    if desc.is_empty() {
        return 0.0;
    }
    let intent: BTreeSet<String> = tokenize(intent).into_iter().collect();
    desc.intersection(&intent).count() as f64 / desc.len() as f64
}

const VERBS: [&str; 16] = [
    "show", "search", "create", "update", "delete", "send", "initiate", "download", "add",
    "remove", "mark", "play", "archive", "reply", "rate", "export",
];
const NOUNS: [&str; 24] = [
    "orders", "returns", "cart", "product", "review", "address", "payment", "email", "draft",
    "thread", "attachment", "contact", "call", "message", "note", "tag", "song", "playlist",
    "album", "alarm", "voicemail", "wishlist", "coupon", "folder",
];
const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ren", "tu", "vos", "zel", "pra", "dun", "fi", "gor", "hal", "jin", "kesh",
    "lum", "nar", "ost", "pel", "quo", "sif",
];
const ARG_NAMES: [&str; 10] = [
    "page", "query", "item_id", "limit", "target", "note", "amount", "flag", "filters", "tags",
];
const ARG_TYPES: [ArgType; 7] = [
    ArgType::String,
    ArgType::Integer,
    ArgType::Real,
    ArgType::Boolean,
    ArgType::Enum,
    ArgType::Object,
    ArgType::List,
];

fn filler(rng: &mut ChaCha8Rng) -> String {
    let a = SYLLABLES[rng.gen_range(0..SYLLABLES.len())];
    let b = SYLLABLES[rng.gen_range(0..SYLLABLES.len())];
    format!("{a}{b}")
}

fn make_catalog(app: &AppSpec, rng: &mut ChaCha8Rng) -> ToolCatalog {
    let mut combos: Vec<(&str, &str)> = VERBS
        .iter()
        .flat_map(|v| NOUNS.iter().map(move |n| (*v, *n)))
        .collect();
    combos.shuffle(rng);
    let tools = combos
        .into_iter()
        .take(app.catalog_size)
        .map(|(verb, noun)| {
            let words: Vec<String> = (0..3).map(|_| filler(rng)).collect();
            let n_args = rng.gen_range(0..=4);
            let mut names: Vec<&str> = ARG_NAMES.to_vec();
            names.shuffle(rng);
            let argument_schema = names
                .into_iter()
                .take(n_args)
                .map(|name| ArgSpec {
                    name: name.to_string(),
                    arg_type: ARG_TYPES[rng.gen_range(0..ARG_TYPES.len())],
                    required: rng.gen_bool(0.5),
                })
                .collect();
            ToolSpec {
                tool_id: format!("{}_{verb}_{noun}", app.name),
                app: app.name.clone(),
                description: format!("{verb} {noun} {}", words.join(" ")),
                argument_schema,
                taxonomy_depth: rng.gen_range(1..=3),
                io_cardinality: (rng.gen_range(1..=3), rng.gen_range(1..=3)),
            }
        })
        .collect();
    ToolCatalog::new(app.name.clone(), tools).expect("verb/noun combos are unique")
}

fn turn(role: Role, value: impl Into<String>) -> Turn {
    Turn {
        role,
        value: value.into(),
    }
}

fn step(name: &str, system: &str, generation: serde_json::Value, data: Option<&str>) -> Step {
    Step {
        name: name.to_string(),
        prompts: vec![
            turn(Role::System, system),
            turn(Role::Generation, generation.to_string()),
        ],
        data: data.map(str::to_string),
    }
}

fn noun_of(tool: &ToolSpec) -> &str {
    tool.description.split(' ').nth(1).unwrap_or_default()
}

fn verb_of(tool: &ToolSpec) -> &str {
    tool.description.split(' ').next().unwrap_or_default()
}

/// Generates `(trajectories, catalogs)`; a pure function of `(spec, seed)`.
pub fn generate_synthetic_corpus(
    spec: &CorpusSpec,
    seed: u64,
) -> Result<(Vec<Trajectory>, Catalogs), TraceError> {
    if spec.apps.is_empty() {
        return Err(TraceError::InfeasibleCorpus("no apps".into()));
    }
    if spec.tool_count_weights.iter().any(|(k, w)| *k == 0 || *w < 0.0) {
        return Err(TraceError::InfeasibleCorpus(
            "tool-count bins must be >= 1 with non-negative weight".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.decoy_fraction)
        || !(0.0..=1.0).contains(&spec.prior_shortlister_fraction)
    {
        return Err(TraceError::InfeasibleCorpus("fractions must be in [0, 1]".into()));
    }
    let max_combos = VERBS.len() * NOUNS.len();
    let n_total = spec.n_tasks();
    let weights: Vec<f64> = spec.tool_count_weights.iter().map(|(_, w)| *w).collect();
    let quotas = largest_remainder(&weights, n_total);
    let reserve = usize::from(spec.decoy_fraction > 0.0);
    for app in &spec.apps {
        if app.catalog_size > max_combos {
            return Err(TraceError::InfeasibleCorpus(format!(
                "catalog size {} for `{}` exceeds {max_combos} distinct tools",
                app.catalog_size, app.name
            )));
        }
        for ((k, _), q) in spec.tool_count_weights.iter().zip(&quotas) {
            if *q > 0 && app.n_tasks > 0 && k + reserve > app.catalog_size {
                return Err(TraceError::InfeasibleCorpus(format!(
                    "tool-count bin {k} exceeds catalog size {} of `{}`",
                    app.catalog_size, app.name
                )));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut catalogs = Catalogs::new();
    for app in &spec.apps {
        catalogs.insert(app.name.clone(), make_catalog(app, &mut rng));
    }

    let mut counts: Vec<usize> = spec
        .tool_count_weights
        .iter()
        .zip(&quotas)
        .flat_map(|((k, _), q)| std::iter::repeat(*k).take(*q))
        .collect();
    counts.shuffle(&mut rng);

    let mut trajectories = Vec::with_capacity(n_total);
    let mut next = 0usize;
    for app in &spec.apps {
        let catalog = &catalogs[&app.name];
        for i in 0..app.n_tasks {
            let k = counts[next];
            next += 1;
            let task_id = format!("{}_{i:04}", app.name);
            trajectories.push(make_task(spec, catalog, &task_id, k, &mut rng));
        }
    }
    Ok((trajectories, catalogs))
}

fn make_task(
    spec: &CorpusSpec,
    catalog: &ToolCatalog,
    task_id: &str,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let app = catalog.app.as_str();
    let mut picks: Vec<&ToolSpec> = catalog.tools.iter().collect();
    picks.shuffle(rng);
    let relevant: Vec<&ToolSpec> = picks[..k].to_vec();
    let decoy = (spec.decoy_fraction > 0.0 && rng.gen_bool(spec.decoy_fraction))
        .then(|| picks[k]);

    let intent = match decoy {
        Some(d) => format!("Please {} for me today.", d.description),
        None => {
            let nouns: Vec<&str> = relevant.iter().take(3).map(|t| noun_of(t)).collect();
            let verb = verb_of(relevant[0]);
            format!("I need to {verb} my {} on {app}.", nouns.join(" and "))
        }
    };
    let ids: Vec<&str> = relevant.iter().map(|t| t.tool_id.as_str()).collect();

    let mut steps = vec![
        step(
            "TaskAnalyzerAgent",
            "System: determine which applications are required to fulfill a user's request.",
            serde_json::json!({
                "thoughts": [format!("The request concerns the {app} app.")],
                "relevant_apps": [app],
            }),
            None,
        ),
        step(
            "TaskDecompositionAgent",
            "System: break down a user's intent into high-level subtasks.",
            serde_json::json!({
                "thoughts": format!("Split the request into {k} subtask(s) on {app}."),
            }),
            None,
        ),
    ];

    let prior = k >= 2 && rng.gen_bool(spec.prior_shortlister_fraction);
    if prior {
        steps.push(step(
            "ShortlisterAgent",
            "System: select relevant APIs to fulfill a user's request.",
            serde_json::json!({
                "thoughts": ["Start with a lookup."],
                "result": [ids[0]],
            }),
            None,
        ));
        steps.push(step(
            "CoderAgent",
            "System: write code that calls the shortlisted APIs.",
            serde_json::Value::String(format!("lookup = {}(page=1)\nprint(lookup)", ids[0])),
            Some(r#"{"status": "success"}"#),
        ));
    }

    let mut plan = serde_json::json!({
        "thoughts": [format!("Next, continue the {app} work for the user.")],
        "next_subtask": format!("Complete the remaining {app} operations."),
        "next_subtask_app": app,
    });
    if spec.plant_state_dependence {
        let mut planned = ids.clone();
        planned.shuffle(rng);
        plan["planned_apis"] = serde_json::json!(planned);
    }
    steps.push(step(
        "PlanControllerAgent",
        "System: As a plan controller agent, decide the next subtask.",
        plan,
        None,
    ));
    steps.push(step(
        "ShortlisterAgent",
        "System: select relevant APIs to fulfill a user's request.",
        serde_json::json!({
            "thoughts": ["Shortlist the APIs for the current subtask."],
            "result": ids,
        }),
        Some("[...]"),
    ));
    let code: Vec<String> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| format!("r{i} = {id}()"))
        .collect();
    steps.push(step(
        "CoderAgent",
        "System: write code that calls the shortlisted APIs.",
        serde_json::Value::String(code.join("\n")),
        Some(r#"{"status": "success"}"#),
    ));
    steps.push(step(
        "FinalAnswerAgent",
        "System: report the outcome to the user.",
        serde_json::json!({"final_answer": "Done."}),
        None,
    ));

    Trajectory {
        task_id: task_id.to_string(),
        intent,
        score: 1.0,
        steps,
        apps: BTreeSet::from([app.to_string()]),
        tools_used: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{derive_labels, difficulty_shares, tools_used, ToolIndex};
    use std::collections::BTreeMap;

    #[test]
    fn quotas_sum_and_track_weights() {
        let q = largest_remainder(&[1.0, 1.0, 1.0], 10);
        assert_eq!(q.iter().sum::<usize>(), 10);
        assert_eq!(q, vec![4, 3, 3]);
    }

    #[test]
    fn appworld_histogram_is_reproduced() {
        let spec = CorpusSpec::appworld_like();
        let (trajs, catalogs) = generate_synthetic_corpus(&spec, 7).unwrap();
        assert_eq!(trajs.len(), 605);
        let labels = derive_labels(&trajs, &catalogs).unwrap();
        assert_eq!(labels.len(), 605);
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for l in &labels {
            *hist.entry(l.r()).or_default() += 1;
        }
        for (k, n) in APPWORLD_TOOL_COUNTS {
            let got = hist.get(&k).copied().unwrap_or(0) as f64 / 605.0;
            assert!((got - n as f64 / 605.0).abs() <= 0.02, "bin {k}");
        }
        let mean = labels.iter().map(|l| l.r() as f64).sum::<f64>() / 605.0;
        assert!((mean - 2.61).abs() <= 0.01, "mean {mean}");
        let shares = difficulty_shares(&labels);
        assert!((shares[0] - 0.795).abs() <= 0.01);
        assert!((shares[1] - 0.188).abs() <= 0.01);
        assert!((shares[2] - 0.017).abs() <= 0.01);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = CorpusSpec::planted(120);
        let a = generate_synthetic_corpus(&spec, 3).unwrap();
        let b = generate_synthetic_corpus(&spec, 3).unwrap();
        let ser = |x: &(Vec<Trajectory>, Catalogs)| serde_json::to_string(&x.0).unwrap()
            + &serde_json::to_string(&x.1).unwrap();
        assert_eq!(ser(&a), ser(&b));
        let c = generate_synthetic_corpus(&spec, 4).unwrap();
        assert_ne!(ser(&a), ser(&c));
    }

    #[test]
    fn decoys_overlap_intent_but_are_unused() {
        let spec = CorpusSpec::planted(300);
        let (trajs, catalogs) = generate_synthetic_corpus(&spec, 11).unwrap();
        let index = ToolIndex::new(&catalogs);
        let mut with_decoy = 0;
        for t in &trajs {
            let used: BTreeSet<String> = tools_used(t, &index).into_iter().collect();
            let app = t.apps.iter().next().unwrap();
            let decoy = catalogs[app].tools.iter().any(|tool| {
                !used.contains(&tool.tool_id) && lexical_overlap(&tool.description, &t.intent) >= 0.6
            });
            with_decoy += usize::from(decoy);
        }
        assert!(with_decoy as f64 / trajs.len() as f64 >= 0.3, "{with_decoy}");
    }

    #[test]
    fn infeasible_bins_are_rejected() {
        let mut spec = CorpusSpec::planted(50);
        spec.apps[0].catalog_size = 3;
        assert!(matches!(
            generate_synthetic_corpus(&spec, 1),
            Err(TraceError::InfeasibleCorpus(_))
        ));
    }
}
