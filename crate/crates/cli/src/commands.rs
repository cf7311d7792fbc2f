use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hsadapt::adapters::{Adapter, AdapterKind};
use hsadapt::evaluator::{evaluate_split, heldout_report, intensity_report_scores, score_direct, SplitResult};
use hsadapt::factset::{fact_ids, load_anchors, load_facts, make_splits, synth_factset, to_jsonl, AnchorFact, Candidates, Fact, SplitSpec, SynthOptions};
use hsadapt::generation::{decode, repetition_score, GenMode};
use hsadapt::gradcheck::{run_gradcheck, GradcheckOptions};
use hsadapt::model::{build_cache, ByteTokenizer, EmbeddingTable, HiddenStateCache, Tokenizer, ToyModel, ToyModelConfig};
use hsadapt::paperdata::{load_golden, load_golden_dir, reproduce};
use hsadapt::steering::{default_layer_grid, sweep, DEFAULT_STRENGTHS};
use hsadapt::trainer::{train as train_adapter, TrainConfig, TrainOutcome};

use crate::error::{CliError, StageExt};
use crate::output::{Run, Staged};
use crate::{CacheArgs, EvalArgs, GenerateArgs, GradcheckArgs, PipelineArgs, ReportArgs, StatsArgs, SteerArgs, SynthArgs, TrainArgs, TrainOverrides};

pub const FACTS_FILE: &str = "facts.jsonl";
pub const ANCHORS_FILE: &str = "anchors.jsonl";
pub const MODEL_FILE: &str = "model.toy";
pub const CACHE_FILE: &str = "cache.hsc";
pub const EMBED_FILE: &str = "embed.emb";
pub const SPLITS_FILE: &str = "splits.json";
pub const RESULTS_FILE: &str = "results.jsonl";

/// Run settings shared by `train` and `pipeline`; the config file holds the
/// top-level keys and a `[train]` table.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_splits: usize,
    pub train_size: usize,
    pub kinds: Vec<AdapterKind>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_splits: 5,
            train_size: 15,
            kinds: vec![AdapterKind::Swiglu, AdapterKind::Linear],
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>, run: &mut Run) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        run.input(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    fn apply(&mut self, o: &TrainOverrides) {
        let t = &mut self.train;
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = o.$field { t.$field = v; })* };
        }
        set!(kind, tau, anchor_floor, anchor_weight, lr, weight_decay, clip_norm, max_steps, gate);
        if o.d_inner.is_some() {
            t.d_inner = o.d_inner;
        }
        if o.param_budget.is_some() {
            t.param_budget = o.param_budget;
        }
    }

    /// Trainer settings for one cell: adapter init is seeded by `seed + split`.
    fn cell(&self, kind: AdapterKind, split: usize) -> TrainConfig {
        TrainConfig { kind, seed: self.seed.wrapping_add(split as u64), ..self.train.clone() }
    }
}

/// Contents of `splits.json` written by `cache`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitsFile {
    pub seed: u64,
    pub fact_ids: Vec<String>,
    pub anchor_ids: Vec<String>,
    pub splits: Vec<SplitSpec>,
}

struct Corpus {
    facts: Vec<Fact>,
    anchors: Vec<AnchorFact>,
    model: ToyModel,
}

fn load_corpus(dir: &Path, run: &mut Run) -> Result<Corpus, CliError> {
    let path = |f: &str| dir.join(f);
    for f in [FACTS_FILE, ANCHORS_FILE, MODEL_FILE] {
        run.input(&path(f))?;
    }
    Ok(Corpus {
        facts: load_facts(&path(FACTS_FILE)).stage(|| format!("load {}", path(FACTS_FILE).display()))?,
        anchors: load_anchors(&path(ANCHORS_FILE)).stage(|| format!("load {}", path(ANCHORS_FILE).display()))?,
        model: ToyModel::load(&path(MODEL_FILE)).stage(|| format!("load {}", path(MODEL_FILE).display()))?,
    })
}

fn load_model(dir: &Path, run: &mut Run) -> Result<ToyModel, CliError> {
    let path = dir.join(MODEL_FILE);
    run.input(&path)?;
    ToyModel::load(&path).stage(|| format!("load {}", path.display()))
}

struct CacheDir {
    cache: HiddenStateCache,
    embed: EmbeddingTable,
    splits: SplitsFile,
}

fn load_cache_dir(dir: &Path, run: &mut Run) -> Result<CacheDir, CliError> {
    let path = |f: &str| dir.join(f);
    for f in [CACHE_FILE, EMBED_FILE, SPLITS_FILE] {
        run.input(&path(f))?;
    }
    let text = fs::read_to_string(path(SPLITS_FILE)).map_err(|e| CliError::io(&path(SPLITS_FILE), e))?;
    Ok(CacheDir {
        cache: HiddenStateCache::load(&path(CACHE_FILE)).stage(|| format!("load {}", path(CACHE_FILE).display()))?,
        embed: EmbeddingTable::load(&path(EMBED_FILE)).stage(|| format!("load {}", path(EMBED_FILE).display()))?,
        splits: serde_json::from_str(&text).map_err(|e| CliError::Check(format!("{}: {e}", path(SPLITS_FILE).display())))?,
    })
}

fn json_pretty<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| CliError::Check(e.to_string()))
}

/// Runs `body`, recording a failed manifest in `out` if it errors.
fn guarded(run: &Run, out: &Path, body: impl FnOnce() -> Result<(), CliError>) -> Result<(), CliError> {
    let result = body();
    if let Err(e) = &result {
        run.record_failure(out, e);
    }
    result
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let run = Run::new("synth", Some(a.seed), a)?;
    let defaults = ToyModelConfig::default();
    let config = ToyModelConfig {
        n_layers: a.n_layers.unwrap_or(defaults.n_layers),
        d_model: a.d_model.unwrap_or(defaults.d_model),
        init_seed: a.model_seed.unwrap_or(a.seed),
        ..defaults
    };
    let model = ToyModel::new(config).stage(|| "model".into())?;
    let corpus = synth_factset(a.seed, a.facts, a.anchors, &model, &SynthOptions::default()).stage(|| "synth".into())?;

    let scores = corpus
        .facts
        .iter()
        .map(|f| score_direct(&model, &ByteTokenizer, f, None))
        .collect::<hsadapt::Result<Vec<_>>>()
        .stage(|| "baseline scoring".into())?;
    let mut summary = format!(
        "{} facts ({} with negative baseline margin), {} anchors\nlevel  passed  mean margin\n",
        corpus.facts.len(),
        scores.iter().filter(|s| s.margin < 0.0).count(),
        corpus.anchors.len()
    );
    for l in intensity_report_scores(&corpus.facts, &scores) {
        summary.push_str(&format!("L{}     {:>2}/{:<2}   {:>+8.3}\n", l.level, l.passed, l.n, l.mean_margin));
    }

    let mut staged = Staged::default();
    staged.add(FACTS_FILE, to_jsonl(&corpus.facts)?);
    staged.add(ANCHORS_FILE, to_jsonl(&corpus.anchors)?);
    staged.add_with(MODEL_FILE, |w| model.write_to(w))?;
    staged.add("baseline.txt", summary.clone());
    staged.commit(&a.out, &run)?;
    print!("{summary}");
    Ok(())
}

fn build_cache_outputs(corpus: &Corpus, seed: u64, n_splits: usize, train_size: usize) -> Result<(CacheDir, Staged), CliError> {
    let cache = build_cache(&corpus.model, &corpus.facts, &corpus.anchors, &ByteTokenizer).stage(|| "cache".into())?;
    let ids = fact_ids(&corpus.facts);
    let splits = make_splits(&ids, n_splits, train_size, seed).stage(|| "splits".into())?;
    let splits = SplitsFile {
        seed,
        fact_ids: ids.iter().map(|s| s.to_string()).collect(),
        anchor_ids: corpus.anchors.iter().map(|a| a.id.clone()).collect(),
        splits,
    };
    let embed = corpus.model.embed().clone();
    let mut staged = Staged::default();
    staged.add_with(CACHE_FILE, |w| cache.write_to(w))?;
    staged.add_with(EMBED_FILE, |w| embed.write_to(w))?;
    staged.add(SPLITS_FILE, json_pretty(&splits)?);
    Ok((CacheDir { cache, embed, splits }, staged))
}

pub fn cache(a: &CacheArgs) -> Result<(), CliError> {
    let mut run = Run::new("cache", Some(a.seed), a)?;
    let corpus = load_corpus(&a.corpus, &mut run)?;
    let (dir, staged) = build_cache_outputs(&corpus, a.seed, a.n_splits, a.train_size)?;
    staged.commit(&a.out, &run)?;
    println!(
        "cached {} records ({} facts, {} anchors), {} splits of {} train",
        dir.cache.len(),
        corpus.facts.len(),
        corpus.anchors.len(),
        dir.splits.splits.len(),
        a.train_size
    );
    Ok(())
}

fn split_by_index(splits: &SplitsFile, index: usize) -> Result<&SplitSpec, CliError> {
    splits
        .splits
        .iter()
        .find(|s| s.split_index == index)
        .ok_or_else(|| CliError::Usage(format!("split {index} not found ({} splits cached)", splits.splits.len())))
}

fn train_cell(dir: &CacheDir, split: &SplitSpec, cfg: &TrainConfig) -> Result<TrainOutcome, CliError> {
    train_adapter(&dir.cache, &dir.embed, split, &dir.splits.anchor_ids, cfg)
        .stage(|| format!("train split {} {}", split.split_index + 1, cfg.kind))
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut run = Run::new("train", a.seed, a)?;
    let mut cfg = RunConfig::load(a.train.config.as_deref(), &mut run)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.apply(&a.train);
    let cell = cfg.cell(cfg.train.kind, a.split);
    run.config = serde_json::to_value(&cell).map_err(|e| CliError::Check(e.to_string()))?;
    run.seed = Some(cfg.seed);
    guarded(&run, &a.out, || {
        let mut r = Run::new("train", Some(cfg.seed), &cell)?;
        let dir = load_cache_dir(&a.cache_dir, &mut r)?;
        let split = split_by_index(&dir.splits, a.split)?;
        let out = train_cell(&dir, split, &cell)?;
        let last = out.history.steps.last();
        let mut staged = Staged::default();
        staged.add_with("adapter.adp", |w| out.adapter.write_to(w))?;
        staged.add("history.csv", out.history.to_csv());
        staged.commit(&a.out, &r)?;
        println!(
            "trained {} on split {}: {} steps, final loss {:.6}",
            cell.kind,
            a.split + 1,
            out.history.len(),
            last.map_or(f64::NAN, |s| s.loss)
        );
        Ok(())
    })
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut run = Run::new("eval", None, a)?;
    guarded(&Run::new("eval", None, a)?, &a.out, || {
        let dir = load_cache_dir(&a.cache_dir, &mut run)?;
        let adapter = match &a.adapter {
            Some(p) => {
                run.input(p)?;
                Some(Adapter::load(p).stage(|| format!("load {}", p.display()))?)
            }
            None => None,
        };
        let indices: Vec<usize> =
            if a.split.is_empty() { dir.splits.splits.iter().map(|s| s.split_index).collect() } else { a.split.clone() };
        let mut results = Vec::new();
        for i in indices {
            let split = split_by_index(&dir.splits, i)?;
            results.push(
                evaluate_split(&dir.cache, &dir.embed, adapter.as_ref(), split).stage(|| format!("eval split {}", i + 1))?,
            );
        }
        let mut staged = Staged::default();
        staged.add(RESULTS_FILE, to_jsonl(&results)?);
        staged.commit(&a.out, &run)?;
        for r in &results {
            println!(
                "split {}: train {}/{}, held-out {}/{}",
                r.split_index + 1,
                r.train_passed,
                r.train.len(),
                r.heldout_passed,
                r.heldout.len()
            );
        }
        Ok(())
    })
}

fn read_results(path: &Path, run: &mut Run) -> Result<Vec<SplitResult>, CliError> {
    run.input(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Check(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut run = Run::new("report", None, a)?;
    guarded(&Run::new("report", None, a)?, &a.out, || {
        let mut results = Vec::new();
        for p in &a.results {
            results.extend(read_results(p, &mut run)?);
        }
        let facts = match &a.corpus {
            Some(dir) => {
                let p = dir.join(FACTS_FILE);
                run.input(&p)?;
                load_facts(&p).stage(|| format!("load {}", p.display()))?
            }
            None => Vec::new(),
        };
        let report = heldout_report(&results, &facts).stage(|| "report".into())?;
        let text = report.render();
        let mut staged = Staged::default();
        staged.add("report.txt", text.clone());
        staged.add("report.csv", report.to_csv());
        staged.commit(&a.out, &run)?;
        print!("{text}");
        Ok(())
    })
}

pub fn steer(a: &SteerArgs) -> Result<(), CliError> {
    let mut run = Run::new("steer", None, a)?;
    guarded(&Run::new("steer", None, a)?, &a.out, || {
        let corpus = load_corpus(&a.corpus, &mut run)?;
        let layers = if a.layers.is_empty() { default_layer_grid(corpus.model.n_layers()) } else { a.layers.clone() };
        let strengths = if a.strengths.is_empty() { DEFAULT_STRENGTHS.to_vec() } else { a.strengths.clone() };
        let items: Vec<&dyn Candidates> = corpus.facts.iter().map(|f| f as &dyn Candidates).collect();
        let grid = sweep(&corpus.model, &ByteTokenizer, &items, &layers, &strengths).stage(|| "steer".into())?;
        let text = grid.render();
        let mut staged = Staged::default();
        staged.add("grid.csv", grid.to_csv());
        staged.add("grid.txt", text.clone());
        staged.commit(&a.out, &run)?;
        print!("{text}");
        Ok(())
    })
}

pub fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let mut run = Run::new("generate", None, a)?;
    let model = load_model(&a.corpus, &mut run)?;
    let adapter = match &a.adapter {
        Some(p) => Some(Adapter::load(p).stage(|| format!("load {}", p.display()))?),
        None => None,
    };
    let prompt = ByteTokenizer.encode(&a.prompt);
    let run_mode = |mode: GenMode, adapter: Option<&Adapter>| {
        decode(&model, &prompt, mode, adapter, a.max_tokens).stage(|| format!("generate ({mode})"))
    };
    // Decode the requested mode first so an incompatible adapter fails before any output.
    let mut shown = vec![(a.mode, run_mode(a.mode, adapter.as_ref())?)];
    if a.side_by_side && a.mode != GenMode::Baseline {
        shown.insert(0, (GenMode::Baseline, run_mode(GenMode::Baseline, None)?));
    }
    println!("prompt:     {:?}", a.prompt);
    for (mode, out) in shown {
        let rep = if out.tokens.len() >= 2 { repetition_score(&out.tokens)? } else { 0.0 };
        let text: String = out.tokens.iter().flat_map(|&b| std::ascii::escape_default(b as u8)).map(char::from).collect();
        println!("mode:       {mode}");
        println!("output:     \"{text}\"");
        println!("repetition: {rep:.3}");
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let run = Run::new("gradcheck", None, a)?;
    let opts = GradcheckOptions { eps: a.eps, seeds: (0..a.seeds).collect(), tolerance: a.tolerance, ..Default::default() };
    if !(opts.eps > 0.0) || a.seeds == 0 {
        return Err(CliError::Usage("--eps must be positive and --seeds at least 1".into()));
    }
    let report = run_gradcheck(&opts).stage(|| "gradcheck".into())?;
    let text = report.render();
    if let Some(out) = &a.out {
        let mut staged = Staged::default();
        staged.add("gradcheck.txt", text.clone());
        staged.add("gradcheck.json", json_pretty(&report)?);
        if report.passed() {
            staged.commit(out, &run)?;
        } else {
            let err = CliError::Check("gradient check failed".into());
            fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
            run.record_failure(out, &err);
        }
    }
    print!("{text}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Check("gradient check failed".into()))
    }
}

pub fn stats(a: &StatsArgs) -> Result<(), CliError> {
    let mut run = Run::new("stats", None, a)?;
    let golden = match &a.data {
        Some(dir) => {
            run.input(&dir.join(hsadapt::paperdata::MANIFEST_FILE))?;
            load_golden_dir(dir).stage(|| format!("load {}", dir.display()))?
        }
        None => load_golden().stage(|| "load embedded data".into())?,
    };
    let r = reproduce(&golden).stage(|| "reproduce".into())?;
    let text = r.render();
    print!("{text}");
    if let Some(out) = &a.out {
        if r.passed() {
            let mut staged = Staged::default();
            staged.add("stats.txt", text);
            staged.add("stats.csv", r.to_csv());
            staged.commit(out, &run)?;
        } else {
            fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
            run.record_failure(out, &CliError::Check("statistics mismatch".into()));
        }
    }
    if r.passed() {
        Ok(())
    } else {
        Err(CliError::Check("recomputed statistics differ from the printed values".into()))
    }
}

struct Cell {
    split: usize,
    kind: AdapterKind,
    outcome: TrainOutcome,
    result: SplitResult,
}

pub fn pipeline(a: &PipelineArgs) -> Result<(), CliError> {
    let mut run = Run::new("pipeline", None, a)?;
    let mut cfg = RunConfig::load(a.train.config.as_deref(), &mut run)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_splits {
        cfg.n_splits = n;
    }
    if let Some(n) = a.train_size {
        cfg.train_size = n;
    }
    if !a.kinds.is_empty() {
        cfg.kinds = a.kinds.clone();
    }
    cfg.apply(&a.train);
    cfg.kinds.sort();
    cfg.kinds.dedup();
    if cfg.kinds.is_empty() {
        return Err(CliError::Usage("no adapter kinds selected".into()));
    }
    run.seed = Some(cfg.seed);
    run.config = serde_json::to_value(&cfg).map_err(|e| CliError::Check(e.to_string()))?;

    let failure_run = Run::new("pipeline", Some(cfg.seed), &cfg)?;
    guarded(&failure_run, &a.out, || {
        let corpus = load_corpus(&a.corpus, &mut run)?;
        let (dir, mut staged) = build_cache_outputs(&corpus, cfg.seed, cfg.n_splits, cfg.train_size)?;

        let mut results = Vec::new();
        for split in &dir.splits.splits {
            results.push(
                evaluate_split(&dir.cache, &dir.embed, None, split).stage(|| format!("baseline split {}", split.split_index + 1))?,
            );
        }

        let jobs: Vec<(&SplitSpec, AdapterKind)> =
            dir.splits.splits.iter().flat_map(|s| cfg.kinds.iter().map(move |&k| (s, k))).collect();
        let cells = jobs
            .par_iter()
            .map(|&(split, kind)| {
                let outcome = train_cell(&dir, split, &cfg.cell(kind, split.split_index))?;
                let result = evaluate_split(&dir.cache, &dir.embed, Some(&outcome.adapter), split)
                    .stage(|| format!("eval split {} {kind}", split.split_index + 1))?;
                Ok(Cell { split: split.split_index, kind, outcome, result })
            })
            .collect::<Result<Vec<Cell>, CliError>>()?;

        for c in &cells {
            let stem = format!("split{}-{}", c.split + 1, c.kind);
            staged.add_with(PathBuf::from("adapters").join(format!("{stem}.adp")), |w| c.outcome.adapter.write_to(w))?;
            staged.add(PathBuf::from("history").join(format!("{stem}.csv")), c.outcome.history.to_csv());
        }
        results.extend(cells.into_iter().map(|c| c.result));

        let report = heldout_report(&results, &corpus.facts).stage(|| "report".into())?;
        let text = report.render();
        staged.add(RESULTS_FILE, to_jsonl(&results)?);
        staged.add("report.txt", text.clone());
        staged.add("report.csv", report.to_csv());
        staged.commit(&a.out, &run)?;
        print!("{text}");
        Ok(())
    })
}
