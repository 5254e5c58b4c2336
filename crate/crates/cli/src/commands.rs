// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline stages. Each reads its inputs through [`Run::input`] so missing
//! artifacts are named and hashed, and finishes by writing a run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cuekit::activations::{
    decoder_path, read_decoders, read_dump_all, write_decoder, write_dump, ActivationRecord,
    DumpManifest, MANIFEST_FILE,
};
use cuekit::corpus::Corpus;
use cuekit::cue::{build_prototypes, cue_project, BiasReport, CueVector, PrototypeSet};
use cuekit::eval::{
    compare_pair, condition_csv, condition_rows, ensemble_score, pairwise_csv, universal_features,
    universal_share, Condition, Judge, JudgeInput, JudgeScore, ProxyJudge, RawCosineJudge, Tally,
};
use cuekit::probes::{run_probes, Pooling, ProbeHyper};
use cuekit::rng;
use cuekit::selection::{score_features, select_features, SelectionResult};
use cuekit::steering::{
    decode_delta, select_alpha, steering_delta, AlphaPolicy, AlphaScore, LayerSubset,
    SteeringOptions, SteeringVectorSet, DEFAULT_FLUENCY_FLOOR,
};
use cuekit::toymodel::{
    generate_synthetic_dump, load_json, CorpusMix, GenerationPlan, Layout, ToyConfig, ToyWorld,
    WorldConfig,
};
use cuekit::CueError;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::run::{io_err, write_json, write_text, CliError, CliResult, Run, RunConfig};

const SELECTION_FILE: &str = "selection.json";
const PROTOTYPES_FILE: &str = "prototypes.json";
const STEERING_DIR: &str = "steering";
const RESPONSES_DIR: &str = "responses";
const GENERATIONS_FILE: &str = "generations.jsonl";
/// Words per synthetic corpus assertion.
const CORPUS_WORDS: usize = 8;
/// Noise firing rate of the default synthetic layout.
const NOISE_RATE: f64 = 0.05;
/// A feature active in at least this fraction of every label's records is
/// universal.
const UNIVERSAL_MIN_RATE: f64 = 0.9;

fn stage(pairs: &[(&str, serde_json::Value)]) -> BTreeMap<String, serde_json::Value> {
    pairs
        .iter()
        .map(|(k, v)| ((*k).to_owned(), v.clone()))
        .collect()
}

fn load_world(run: &mut Run) -> CliResult<ToyWorld> {
    let path = run.world_path();
    run.input(&path)?;
    let cfg: WorldConfig = load_json(&path)?;
    Ok(ToyWorld::build(cfg)?)
}

fn load_selection(run: &mut Run) -> CliResult<SelectionResult> {
    let path = run.out(SELECTION_FILE);
    run.input(&path)?;
    Ok(SelectionResult::load(&path)?)
}

/// Loads prototypes and checks they were built over `selection`.
fn load_prototypes(run: &mut Run, selection: &SelectionResult) -> CliResult<PrototypeSet> {
    let path = run.out(PROTOTYPES_FILE);
    run.input(&path)?;
    let protos = PrototypeSet::load(&path)?;
    if protos.selection != selection.fingerprint() {
        return Err(CueError::Mismatch(format!(
            "{} was built over a different selection than {SELECTION_FILE}",
            path.display()
        ))
        .into());
    }
    Ok(protos)
}

fn load_dump(run: &mut Run) -> CliResult<(DumpManifest, Vec<ActivationRecord>)> {
    let path = run.dump_path();
    run.input(&path)?;
    Ok(read_dump_all(&path)?)
}

/// Labels to process: `--target` if given (must be known), else all.
fn targets(config: &RunConfig, known: &[String]) -> CliResult<Vec<String>> {
    match &config.target {
        Some(t) if known.contains(t) => Ok(vec![t.clone()]),
        Some(t) => Err(CueError::UnknownLabel(t.clone()).into()),
        None => Ok(known.to_vec()),
    }
}

fn conditions(config: &RunConfig) -> CliResult<Vec<Condition>> {
    Ok(match config.condition()? {
        Some(c) => vec![c],
        None => Condition::ALL.to_vec(),
    })
}

pub fn synth(
    config: RunConfig,
    n_per_label: usize,
    world_config: Option<PathBuf>,
) -> CliResult<()> {
    let mut run = Run::start(
        config,
        "synth",
        stage(&[
            ("n_per_label", json!(n_per_label)),
            ("world_config", json!(world_config)),
        ]),
    )?;
    if n_per_label == 0 {
        return Err(CliError::Config("--n-per-label must be at least 1".into()));
    }
    let seed = run.config.seed;
    let cfg = match &world_config {
        Some(path) => {
            run.input(path)?;
            load_json::<WorldConfig>(path)?
        }
        None => {
            let toy = ToyConfig {
                seed: rng::derive_seed(seed, "world"),
                ..ToyConfig::default()
            };
            WorldConfig::with_layout(toy, Layout::default(), NOISE_RATE)?
        }
    };
    let world = ToyWorld::build(cfg)?;

    let world_path = run.world_path();
    write_json(&world_path, world.config())?;
    run.output(world_path);

    let (manifest, records) = generate_synthetic_dump(
        world.spec(),
        world.sae(),
        n_per_label,
        rng::derive_seed(seed, "synth-dump"),
    )?;
    let dump = run.dump_path();
    write_dump(&dump, &manifest, &records)?;
    run.output(dump);

    let decoders = run.decoders_path();
    fs::create_dir_all(&decoders).map_err(|e| io_err(&decoders, e))?;
    for (layer, m) in world.decoders() {
        write_decoder(decoder_path(&decoders, layer), &m)?;
    }
    run.output(decoders);

    let corpus = world.synthetic_corpus(
        n_per_label,
        CORPUS_WORDS,
        CorpusMix::default(),
        rng::derive_seed(seed, "corpus"),
    )?;
    let corpus_path = run.corpus_path();
    corpus.save(&corpus_path)?;
    run.output(corpus_path);

    println!(
        "synth: {} labels, {} dump records, {} corpus assertions",
        world.spec().labels.len(),
        records.len(),
        corpus.len()
    );
    run.finish()
}

pub fn select(config: RunConfig) -> CliResult<()> {
    let mut run = Run::start(config, "select", BTreeMap::new())?;
    let scheme = run.config.quantization()?;
    let (_, records) = load_dump(&mut run)?;
    let scores = score_features(&records, &scheme)?;
    let n_scored = scores.len();
    let sel = select_features(scores, run.config.rho)?;

    let path = run.out(SELECTION_FILE);
    sel.save(&path)?;
    run.output(path);
    let mut csv = String::from("layer,count\n");
    for (layer, n) in sel.layer_counts() {
        csv.push_str(&format!("{layer},{n}\n"));
    }
    let csv_path = run.out("selection_layers.csv");
    write_text(&csv_path, &csv)?;
    run.output(csv_path);

    println!(
        "select: kept {} of {n_scored} active features ({:.4} of {:.4} bits)",
        sel.len(),
        sel.selected.iter().map(|s| s.bits).sum::<f64>(),
        sel.total_bits
    );
    run.finish()
}

pub fn prototypes(config: RunConfig) -> CliResult<()> {
    let mut run = Run::start(config, "prototypes", BTreeMap::new())?;
    let sel = load_selection(&mut run)?;
    let (_, records) = load_dump(&mut run)?;
    let protos = build_prototypes(&records, &sel)?;
    let path = run.out(PROTOTYPES_FILE);
    protos.save(&path)?;
    run.output(path);
    println!(
        "prototypes: {} labels over {} features",
        protos.labels.len(),
        protos.dim()
    );
    run.finish()
}

pub fn steer_build(config: RunConfig, normalize: bool) -> CliResult<()> {
    let mut run = Run::start(
        config,
        "steer-build",
        stage(&[("normalize", json!(normalize))]),
    )?;
    let sel = load_selection(&mut run)?;
    let protos = load_prototypes(&mut run, &sel)?;
    let manifest_path = run.dump_path().join(MANIFEST_FILE);
    run.input(&manifest_path)?;
    let manifest = DumpManifest::load(&run.dump_path())?;
    let dec_dir = run.decoders_path();
    let options = SteeringOptions {
        layers: LayerSubset::from_stride(run.config.layer_stride)?,
        normalize,
    };
    let layers: Vec<u32> = sel
        .by_layer()
        .into_keys()
        .filter(|&l| options.layers.contains(l))
        .collect();
    for &l in &layers {
        run.input(&decoder_path(&dec_dir, l))?;
    }
    let decoders = read_decoders(&dec_dir, layers, &manifest)?;
    for target in targets(&run.config, &protos.labels)? {
        let dir = steering_delta(&protos, &target)?;
        let set = decode_delta(&dir, &sel, &decoders, &options)?;
        let out = run.out(STEERING_DIR).join(&target);
        set.save(&out)?;
        run.output(out);
        println!(
            "steer-build: {target} over layers {:?}",
            set.layers().collect::<Vec<_>>()
        );
    }
    run.finish()
}

/// One line of `generations.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenerationLine {
    id: String,
    tokens: Vec<usize>,
    prompt_len: usize,
    /// Mean per-token log-likelihood of the continuation under the
    /// unsteered model.
    loglik: f64,
}

fn alpha_dir(alpha: f64) -> String {
    format!("a{alpha}")
}

fn response_dir(run: &Run, condition: Condition, target: &str, alpha: Option<f64>) -> PathBuf {
    let base = run.out(RESPONSES_DIR).join(condition.as_str()).join(target);
    match alpha {
        Some(a) => base.join(alpha_dir(a)),
        None => base,
    }
}

pub fn steer_run(config: RunConfig, generations: usize, new_tokens: usize) -> CliResult<()> {
    let mut run = Run::start(
        config,
        "steer-run",
        stage(&[
            ("generations", json!(generations)),
            ("new_tokens", json!(new_tokens)),
        ]),
    )?;
    if generations == 0 || new_tokens == 0 {
        return Err(CliError::Config(
            "--generations and --new-tokens must be at least 1".into(),
        ));
    }
    let world = load_world(&mut run)?;
    let conds = conditions(&run.config)?;
    let labels = world.spec().labels.clone();
    let plan = GenerationPlan {
        n: generations,
        n_new: new_tokens,
        temperature: world.config().toy.temperature,
        seed: rng::derive_seed(run.config.seed, "steer-run"),
    };
    let manifest = world.manifest()?;
    let alphas = run.config.sorted_alphas();
    for target in targets(&run.config, &labels)? {
        let mut base_set: Option<SteeringVectorSet> = None;
        for &cond in &conds {
            let settings: Vec<Option<f64>> = if cond.steered() {
                if base_set.is_none() {
                    let dir = run.out(STEERING_DIR).join(&target);
                    run.input(&dir)?;
                    base_set = Some(SteeringVectorSet::load(&dir)?);
                }
                alphas.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for alpha in settings {
                let set = alpha.map(|a| base_set.clone().expect("loaded above").with_alpha(a));
                let gens =
                    world.generate_responses(&target, cond.explicit(), set.as_ref(), &plan)?;
                let mut records = Vec::with_capacity(gens.len());
                let mut lines = String::new();
                for (i, g) in gens.iter().enumerate() {
                    let id = format!("r{i:04}");
                    records.push(world.read_response(&id, &target, g)?);
                    let line = GenerationLine {
                        loglik: world.model().mean_loglik(&g.tokens, g.prompt_len)?,
                        id,
                        tokens: g.tokens.clone(),
                        prompt_len: g.prompt_len,
                    };
                    lines.push_str(&serde_json::to_string(&line).expect("line serializes"));
                    lines.push('\n');
                }
                let dir = response_dir(&run, cond, &target, alpha);
                write_dump(&dir, &manifest, &records)?;
                write_text(&dir.join(GENERATIONS_FILE), &lines)?;
                run.output(dir);
            }
        }
        println!("steer-run: {target} done");
    }
    run.finish()
}

/// A response batch found under `<out>/responses`.
#[derive(Debug, Clone)]
struct ResponseSet {
    condition: Condition,
    target: String,
    alpha: Option<f64>,
    dir: PathBuf,
}

impl ResponseSet {
    fn name(&self) -> String {
        match self.alpha {
            Some(a) => format!("{}_{}_{}", self.condition, self.target, alpha_dir(a)),
            None => format!("{}_{}", self.condition, self.target),
        }
    }
}

fn sorted_subdirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Response sets matching `--condition`/`--target`, in condition, target,
/// alpha order.
fn discover_responses(run: &Run) -> CliResult<Vec<ResponseSet>> {
    let root = run.out(RESPONSES_DIR);
    if !root.is_dir() {
        return Err(CueError::MissingInput(root).into());
    }
    let wanted = conditions(&run.config)?;
    let mut sets = Vec::new();
    for condition in wanted {
        for tdir in sorted_subdirs(&root.join(condition.as_str()))? {
            let target = file_name(&tdir);
            if run.config.target.as_ref().is_some_and(|t| *t != target) {
                continue;
            }
            if condition.steered() {
                let mut by_alpha: Vec<(f64, PathBuf)> = Vec::new();
                for adir in sorted_subdirs(&tdir)? {
                    let name = file_name(&adir);
                    if let Some(a) = name.strip_prefix('a').and_then(|s| s.parse::<f64>().ok()) {
                        by_alpha.push((a, adir));
                    }
                }
                by_alpha.sort_by(|a, b| a.0.total_cmp(&b.0));
                sets.extend(by_alpha.into_iter().map(|(a, dir)| ResponseSet {
                    condition,
                    target: target.clone(),
                    alpha: Some(a),
                    dir,
                }));
            } else {
                sets.push(ResponseSet {
                    condition,
                    target,
                    alpha: None,
                    dir: tdir,
                });
            }
        }
    }
    if sets.is_empty() {
        return Err(CueError::MissingInput(root).into());
    }
    Ok(sets)
}

fn project_all(records: &[ActivationRecord], sel: &SelectionResult) -> CliResult<Vec<CueVector>> {
    Ok(records
        .iter()
        .map(|r| cue_project(r, sel))
        .collect::<cuekit::Result<Vec<_>>>()?)
}

fn write_bias(
    run: &mut Run,
    stem: &Path,
    records: &[ActivationRecord],
    cues: &[CueVector],
    protos: &PrototypeSet,
) -> CliResult<BiasReport> {
    let report = BiasReport::build(
        records.iter().map(|r| r.assertion_id.as_str()).zip(cues),
        protos,
    )?;
    let json_path = stem.with_extension("json");
    let csv_path = PathBuf::from(format!("{}_heatmap.csv", stem.display()));
    if let Some(parent) = json_path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    report.save(&json_path)?;
    write_text(&csv_path, &report.heatmap_csv())?;
    run.output(json_path);
    run.output(csv_path);
    Ok(report)
}

pub fn bias(config: RunConfig) -> CliResult<()> {
    let mut run = Run::start(config, "bias", BTreeMap::new())?;
    let sel = load_selection(&mut run)?;
    let protos = load_prototypes(&mut run, &sel)?;
    if run.config.dump.is_some() {
        let (_, records) = load_dump(&mut run)?;
        let cues = project_all(&records, &sel)?;
        let stem = run.out("bias_report");
        let report = write_bias(&mut run, &stem, &records, &cues, &protos)?;
        println!(
            "bias: {} responses, concentration {:.4}",
            report.per_response.len(),
            report.concentration
        );
        return run.finish();
    }
    let mut summary = String::from("condition,target,alpha,n,target_share,concentration\n");
    for set in discover_responses(&run)? {
        run.input(&set.dir)?;
        let (_, records) = read_dump_all(&set.dir)?;
        let cues = project_all(&records, &sel)?;
        let stem = run.out("bias").join(set.name());
        let report = write_bias(&mut run, &stem, &records, &cues, &protos)?;
        let share = report.share_of(&set.target).unwrap_or(0.0);
        summary.push_str(&format!(
            "{},{},{},{},{share:.6},{:.6}\n",
            set.condition,
            set.target,
            set.alpha.map(|a| a.to_string()).unwrap_or_default(),
            report.per_response.len(),
            report.concentration
        ));
    }
    let path = run.out("bias_summary.csv");
    write_text(&path, &summary)?;
    run.output(path);
    print!("{summary}");
    run.finish()
}

/// Judged scores of one response set.
struct ScoredSet {
    set: ResponseSet,
    scores: Vec<JudgeScore>,
    /// Per-response faithfulness from each of the two judges.
    per_judge: Vec<[f64; 2]>,
}

impl ScoredSet {
    fn mean(&self, f: impl Fn(&JudgeScore) -> f64) -> f64 {
        self.scores.iter().map(f).sum::<f64>() / self.scores.len().max(1) as f64
    }
}

fn read_generations(dir: &Path) -> CliResult<Vec<GenerationLine>> {
    let path = dir.join(GENERATIONS_FILE);
    if !path.exists() {
        return Err(CueError::MissingInput(path).into());
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Core(CueError::Parse {
                    path: path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
        })
        .collect()
}

#[derive(Serialize)]
struct AlphaRow {
    alpha: f64,
    #[serde(flatten)]
    score: AlphaScore,
}

#[derive(Serialize)]
struct AlphaChoice {
    target: String,
    /// Mean faithfulness of explicit prompting.
    explicit_baseline: f64,
    table: Vec<AlphaRow>,
    /// Smallest strength meeting the policy, if any.
    selected: Option<f64>,
    /// Strength reported in the condition matrix; the smallest candidate
    /// when none qualified.
    used: f64,
}

pub fn report(config: RunConfig) -> CliResult<()> {
    let mut run = Run::start(config, "report", BTreeMap::new())?;
    let sel = load_selection(&mut run)?;
    let protos = load_prototypes(&mut run, &sel)?;
    let (_, corpus_records) = load_dump(&mut run)?;
    let universal = universal_features(&corpus_records, UNIVERSAL_MIN_RATE);
    let sets = discover_responses(&run)?;

    let mut loaded = Vec::with_capacity(sets.len());
    for set in sets {
        run.input(&set.dir)?;
        let (_, records) = read_dump_all(&set.dir)?;
        let gens = read_generations(&set.dir)?;
        if gens.len() != records.len() {
            return Err(CueError::Mismatch(format!(
                "{}: {} generations for {} records",
                set.dir.display(),
                gens.len(),
                records.len()
            ))
            .into());
        }
        loaded.push((set, records, gens));
    }

    // Fluency reference: unsteered implicit generation per target.
    let mut ll_ref: BTreeMap<String, f64> = BTreeMap::new();
    for (set, _, gens) in &loaded {
        if set.condition == Condition::Implicit && !gens.is_empty() {
            let mean = gens.iter().map(|g| g.loglik).sum::<f64>() / gens.len() as f64;
            ll_ref.insert(set.target.clone(), mean);
        }
    }

    let proxy = ProxyJudge;
    let raw = RawCosineJudge;
    let judges: [&dyn Judge; 2] = [&proxy, &raw];
    let mut scored = Vec::with_capacity(loaded.len());
    for (set, records, gens) in loaded {
        let reference = *ll_ref.get(&set.target).ok_or_else(|| {
            CueError::MissingInput(run.out(RESPONSES_DIR).join("implicit").join(&set.target))
        })?;
        let mut scores = Vec::with_capacity(records.len());
        let mut per_judge = Vec::with_capacity(records.len());
        for (rec, g) in records.iter().zip(&gens) {
            let cue = cue_project(rec, &sel)?;
            let input = JudgeInput {
                response: &cue,
                target: &set.target,
                protos: &protos,
                universal_share: universal_share(rec, &universal),
                loglik: g.loglik,
                ll_ref: reference,
            };
            scores.push(ensemble_score(&judges, &input)?);
            per_judge.push([
                proxy.score(&input)?.faithfulness,
                raw.score(&input)?.faithfulness,
            ]);
        }
        scored.push(ScoredSet {
            set,
            scores,
            per_judge,
        });
    }

    let find = |c: Condition, t: &str, a: Option<f64>| {
        scored
            .iter()
            .find(|s| s.set.condition == c && s.set.target == t && s.set.alpha == a)
    };

    let mut targets: Vec<String> = scored.iter().map(|s| s.set.target.clone()).collect();
    targets.sort();
    targets.dedup();

    let mut choices = Vec::new();
    let mut used: BTreeMap<String, f64> = BTreeMap::new();
    for t in &targets {
        let steered: Vec<&ScoredSet> = [Condition::SteerImplicit, Condition::SteerExplicit]
            .into_iter()
            .map(|c| {
                scored
                    .iter()
                    .filter(|s| s.set.condition == c && s.set.target == *t)
                    .filter(|s| s.set.alpha.is_some_and(|a| a > 0.0))
                    .collect::<Vec<_>>()
            })
            .find(|v| !v.is_empty())
            .unwrap_or_default();
        if steered.is_empty() {
            continue;
        }
        let baseline = find(Condition::Explicit, t, None)
            .ok_or_else(|| CueError::MissingInput(run.out(RESPONSES_DIR).join("explicit").join(t)))?
            .mean(|s| s.faithfulness);
        let table: Vec<(f64, AlphaScore)> = steered
            .iter()
            .map(|s| {
                (
                    s.set.alpha.expect("steered"),
                    AlphaScore {
                        cultural: s.mean(|x| x.faithfulness),
                        fluency: s.mean(|x| x.fluency),
                    },
                )
            })
            .collect();
        let policy = AlphaPolicy::new(table.iter().map(|r| r.0).collect(), DEFAULT_FLUENCY_FLOOR)?;
        let selected = select_alpha(&table, baseline, &policy)?;
        let chosen = selected.unwrap_or(table[0].0);
        used.insert(t.clone(), chosen);
        choices.push(AlphaChoice {
            target: t.clone(),
            explicit_baseline: baseline,
            table: table
                .into_iter()
                .map(|(alpha, score)| AlphaRow { alpha, score })
                .collect(),
            selected,
            used: chosen,
        });
    }

    let mut cells = Vec::new();
    for s in &scored {
        let keep = match s.set.alpha {
            None => true,
            Some(a) => used.get(&s.set.target) == Some(&a),
        };
        if keep {
            cells.extend(
                s.scores
                    .iter()
                    .map(|&sc| (s.set.condition, s.set.target.as_str(), sc)),
            );
        }
    }
    let rows = condition_rows(cells);
    let report_path = run.out("report.csv");
    write_text(&report_path, &condition_csv(&rows))?;
    run.output(report_path);

    let alpha_path = run.out("alpha_selection.json");
    write_json(
        &alpha_path,
        &json!({ "config_hash": run.config_hash(), "targets": choices }),
    )?;
    run.output(alpha_path);

    let pairs = [
        (Condition::SteerImplicit, Condition::Implicit),
        (Condition::SteerExplicit, Condition::Explicit),
        (Condition::SteerImplicit, Condition::Explicit),
    ];
    let mut coin = rng::seeded(rng::derive_seed(run.config.seed, "pairwise"));
    let mut tallies: BTreeMap<(String, String), Tally> = BTreeMap::new();
    for (left, right) in pairs {
        for t in &targets {
            let Some(&a) = used.get(t) else { continue };
            let (Some(l), Some(r)) = (
                find(left, t, Some(a)).or_else(|| find(left, t, None)),
                find(right, t, None),
            ) else {
                continue;
            };
            let tally = tallies
                .entry((left.to_string(), right.to_string()))
                .or_default();
            for (lj, rj) in l.per_judge.iter().zip(&r.per_judge) {
                let swap = rng::unit(&mut coin) < 0.5;
                tally.add(compare_pair(*lj, *rj, swap).1);
            }
        }
    }
    let pair_path = run.out("pairwise.csv");
    write_text(&pair_path, &pairwise_csv(&tallies))?;
    run.output(pair_path);

    print!("{}", condition_csv(&rows));
    run.finish()
}

pub fn probe(config: RunConfig, pooling: Pooling, epochs: usize) -> CliResult<()> {
    let mut run = Run::start(
        config,
        "probe",
        stage(&[("pooling", json!(pooling)), ("epochs", json!(epochs))]),
    )?;
    if epochs == 0 {
        return Err(CliError::Config("--epochs must be at least 1".into()));
    }
    let world = load_world(&mut run)?;
    let corpus_path = run.corpus_path();
    run.input(&corpus_path)?;
    let corpus = Corpus::load(&corpus_path)?;
    let mut features: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    let mut labels = Vec::with_capacity(corpus.len());
    for a in corpus.records() {
        for (layer, v) in world.residual_features(&world.tokenize(&a.text), pooling)? {
            features.entry(layer).or_default().push(v);
        }
        labels.push(a.label.clone());
    }
    let hyper = ProbeHyper {
        epochs,
        seed: rng::derive_seed(run.config.seed, "probe"),
        ..ProbeHyper::default()
    };
    let report = run_probes(&features, &labels, pooling, &hyper)?;
    let path = run.out("probe_report.json");
    report.save(&path)?;
    run.output(path);
    for l in &report.layers {
        let csv = report.confusion_csv(l.layer).expect("layer present");
        let p = run.out(format!("probe_confusion_L{}.csv", l.layer));
        write_text(&p, &csv)?;
        run.output(p);
        println!(
            "probe: layer {} macro-F1 {:.4} (chance {:.4})",
            l.layer, l.macro_f1, report.chance
        );
    }
    run.finish()
}
