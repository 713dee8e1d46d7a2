//! Stage orchestration over a run directory.
//!
//! Layout under the run root:
//!
//! ```text
//! gen-data/    pretrain.jsonl task.jsonl eval.jsonl general.jsonl languages.json
//! pretrain/    model.json losses.json
//! categorize/  labeled.jsonl proportions.json
//! profile/     profile_src.jsonl profile_tgt.jsonl profile_general.jsonl divergence.json
//! identify/    task_experts.json
//! finetune/<method>/  config.json metrics.jsonl model.json
//! eval/<method>/      summary.json
//! report/      comparison.json divergence.json divergence.csv
//! flops/       flops.json
//! ```
//!
//! Every stage directory holds a `manifest.json` with the hash of the config
//! sections the stage depends on and the hashes of its input and output files.
//! An existing stage directory is never overwritten; a rerun writes to a
//! sibling `<dir>.rerun-<unix-seconds>` instead.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::align::{finetune, routing_steer_decode, EvalMonitor, StepMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{hash_file, hash_json, read_json, read_jsonl, write_json, write_jsonl};
use crate::metrics::{
    accuracy_of, divergence_report, eval_decode, flops_estimate, gflops, selection_rate,
    FlopsInput, SelectionMode, Side,
};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, Parameters, RoutingTrace};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::routing::{
    divergence_profile, from_profile_records, identify_task_experts, seq_routing_dist,
    teacher_force_trace, to_profile_records, DivergenceProfile, LayerRange, ProfileRecord,
    SeqRoutingDist, TaskExpertMap,
};
use crate::synth::{
    gen_corpus, CorpusConfig, LanguageSpec, ParallelExample, PretrainSeq, VocabLayout, BOS, SEP,
};
use crate::taxonomy::{categorize, ProportionReport, TaxonomyLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Pretrain,
    Categorize,
    Profile,
    Identify,
    Finetune,
    Eval,
    Steer,
    Report,
    Flops,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenData,
        Stage::Pretrain,
        Stage::Categorize,
        Stage::Profile,
        Stage::Identify,
        Stage::Finetune,
        Stage::Eval,
        Stage::Steer,
        Stage::Report,
        Stage::Flops,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::Categorize => "categorize",
            Stage::Profile => "profile",
            Stage::Identify => "identify",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Steer => "steer",
            Stage::Report => "report",
            Stage::Flops => "flops",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageConfig {
    pub n_langs: usize,
    pub n_words: usize,
    pub seed: u64,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        let l = VocabLayout::default();
        Self {
            n_langs: l.n_langs,
            n_words: l.n_words,
            seed: 0,
        }
    }
}

impl LanguageConfig {
    pub fn layout(&self) -> VocabLayout {
        VocabLayout {
            n_langs: self.n_langs,
            n_words: self.n_words,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Maximum generated tokens per greedy decode.
    pub max_new: usize,
    /// Eval examples scored by teacher forcing at fine-tuning eval steps.
    pub monitor_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new: 8,
            monitor_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub run_dir: PathBuf,
    pub languages: LanguageConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub steer_delta: f64,
    pub flops: FlopsInput,
    /// Free-text notes on where defaults come from; ignored by every stage.
    pub comments: BTreeMap<String, String>,
}

fn default_comments() -> BTreeMap<String, String> {
    [
        ("train.lambda", "alignment weight; reference recipe value 1.0"),
        ("train.k", "task experts per middle layer; reference recipe value 8"),
        ("train.adapter_rank", "adapters on expert up/down projections, rank scaled to d_model/4; the large-model recipe uses rank 16; 0 = full fine-tuning"),
        ("train.lr", "1e-3 at desk scale; the large-model recipe uses 2e-5 with AdamW"),
        ("train.warmup_ratio", "linear warmup over 3% of steps, then linear decay (reference recipe)"),
        ("train.epochs", "3 epochs"),
        ("flops", "reference FLOPs inputs: B=4096 tokens, 16 layers, 8 active experts, d_m=2048, d_e=1024, r=16, 64 experts"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let languages = LanguageConfig::default();
        let model = ModelConfig {
            vocab_size: languages.layout().vocab_size(),
            ..ModelConfig::desk()
        };
        Self {
            run_dir: PathBuf::from("runs/default"),
            languages,
            corpus: CorpusConfig::default(),
            model,
            model_seed: 0,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            steer_delta: 1.0,
            flops: FlopsInput {
                b: 4096,
                l: 16,
                k: 8,
                d_m: 2048,
                d_e: 1024,
                r: 16,
                e: 64,
            },
            comments: default_comments(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let vocab = self.languages.layout().vocab_size();
        if self.model.vocab_size != vocab {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match the language layout ({vocab})",
                self.model.vocab_size
            )));
        }
        Ok(())
    }

    /// Directory name of the fine-tuned method implied by the train config.
    pub fn method_name(&self) -> String {
        let t = &self.train;
        let mut name = if t.effective_lambda() == 0.0 {
            "sft".to_string()
        } else {
            let mut n = "ra-moe".to_string();
            if t.ablation.no_task_experts {
                n.push_str("-no-task-experts");
            }
            if t.ablation.no_ci_filter {
                n.push_str("-no-ci-filter");
            }
            if t.ablation.all_layers {
                n.push_str("-all-layers");
            }
            if t.lambda != 1.0 {
                n.push_str(&format!("-lambda{}", t.lambda));
            }
            n
        };
        name.push_str(&format!("-seed{}", t.seed));
        name
    }

    pub fn steer_name(&self) -> String {
        format!("steer-delta{}", self.steer_delta)
    }

    /// Hash of every config section `stage` depends on (cumulative over its
    /// upstream stages).
    pub fn stage_hash(&self, stage: Stage) -> Result<String> {
        let data = json!({"languages": self.languages, "corpus": self.corpus});
        let base = json!({"data": data, "model": self.model, "model_seed": self.model_seed, "pretrain": self.pretrain});
        let labeled = json!({"base": base, "max_new": self.eval.max_new});
        let identify = json!({"labeled": labeled, "k": self.train.k});
        let value = match stage {
            Stage::GenData => data,
            Stage::Pretrain => base,
            Stage::Categorize | Stage::Profile => json!({"labeled": labeled, "stage": stage}),
            Stage::Identify => identify,
            Stage::Finetune => json!({"identify": identify, "train": self.train}),
            Stage::Eval => json!({"identify": identify, "train": self.train, "eval": self.eval}),
            Stage::Steer => {
                json!({"identify": identify, "eval": self.eval, "delta": self.steer_delta})
            }
            Stage::Report => json!({"identify": identify, "eval": self.eval}),
            Stage::Flops => json!({"flops": self.flops}),
        };
        hash_json(&value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub config_hash: String,
    /// Input files relative to the run root, with content hashes.
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the stage directory, with content hashes.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    /// Hash of the manifest itself; changes whenever any upstream artifact does.
    pub fn digest(&self) -> Result<String> {
        hash_json(self)
    }
}

/// Per-method evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: Option<u64>,
    pub accuracy_src: f64,
    pub accuracy_tgt: f64,
    pub ci_proportion: f64,
    pub mid_layers: LayerRange,
    pub divergence: Vec<f64>,
    pub mid_divergence: f64,
    pub selection_rate: f64,
    pub eval_set_hash: String,
    #[serde(default)]
    pub relative_gain: Option<f64>,
    #[serde(default)]
    pub divergence_delta: Option<f64>,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    root: PathBuf,
    inputs: BTreeMap<String, String>,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a PipelineConfig) -> Self {
        Self {
            cfg,
            root: cfg.run_dir.clone(),
            inputs: BTreeMap::new(),
        }
    }

    /// Verifies an upstream stage directory and records `file` as an input.
    fn input(&mut self, stage: Stage, dir: &str, file: &str) -> Result<PathBuf> {
        let stage_dir = self.root.join(dir);
        let path = stage_dir.join(file);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} (run the {stage} stage first)",
                path.display()
            )));
        }
        let manifest_path = stage_dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{}",
                manifest_path.display()
            )));
        }
        let manifest: Manifest = read_json(&manifest_path)?;
        let current = self.cfg.stage_hash(stage)?;
        if manifest.config_hash != current {
            return Err(Error::ConfigMismatch {
                stage: format!(
                    "{stage} ({}); the config changed since it ran, use a new --out directory",
                    stage_dir.display()
                ),
                recorded: manifest.config_hash,
                current,
            });
        }
        let hash = hash_file(&path)?;
        if manifest.outputs.get(file) != Some(&hash) {
            return Err(Error::ConfigMismatch {
                stage: format!(
                    "{stage}: {} was modified after the stage ran",
                    path.display()
                ),
                recorded: manifest.outputs.get(file).cloned().unwrap_or_default(),
                current: hash,
            });
        }
        self.inputs.insert(format!("{dir}/{file}"), hash);
        Ok(path)
    }

    /// Fresh output directory for `dir`; an existing one is left untouched.
    fn output_dir(&self, dir: &str) -> Result<PathBuf> {
        let canonical = self.root.join(dir);
        if !canonical.exists() {
            return Ok(canonical);
        }
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let mut n = 0;
        loop {
            let suffix = if n == 0 {
                String::new()
            } else {
                format!("-{n}")
            };
            let cand = self.root.join(format!("{dir}.rerun-{secs}{suffix}"));
            if !cand.exists() {
                log::warn!(
                    "{} exists; writing the rerun to {}",
                    canonical.display(),
                    cand.display()
                );
                return Ok(cand);
            }
            n += 1;
        }
    }

    fn finish(self, stage: Stage, out: &Path, files: &[&str]) -> Result<PathBuf> {
        let mut outputs = BTreeMap::new();
        for f in files {
            outputs.insert(f.to_string(), hash_file(out.join(f))?);
        }
        let manifest = Manifest {
            stage,
            config_hash: self.cfg.stage_hash(stage)?,
            inputs: self.inputs,
            outputs,
        };
        write_json(out.join("manifest.json"), &manifest)?;
        Ok(out.to_path_buf())
    }
}

#[derive(Serialize, Deserialize)]
struct LanguagesFile {
    layout: VocabLayout,
    languages: Vec<LanguageSpec>,
}

#[derive(Serialize, Deserialize)]
struct GeneralRecord {
    id: String,
    tokens: Vec<u32>,
}

fn load_params(path: &Path) -> Result<Parameters<f64>> {
    load_checkpoint(path)
}

type DistsById = BTreeMap<String, SeqRoutingDist<f64>>;

fn src_tgt_dists(
    params: &Parameters<f64>,
    examples: &[ParallelExample],
    response: impl Fn(&ParallelExample, Side) -> Option<Vec<u32>>,
) -> Result<(DistsById, DistsById)> {
    let (mut src, mut tgt) = (BTreeMap::new(), BTreeMap::new());
    for ex in examples {
        let (Some(rs), Some(rt)) = (response(ex, Side::Src), response(ex, Side::Tgt)) else {
            continue;
        };
        if rs.is_empty() || rt.is_empty() {
            log::warn!("{}: empty response, left out of the profile", ex.id);
            continue;
        }
        src.insert(
            ex.id.clone(),
            seq_routing_dist(&teacher_force_trace(params, &ex.prompt_src, &rs)?)?,
        );
        tgt.insert(
            ex.id.clone(),
            seq_routing_dist(&teacher_force_trace(params, &ex.prompt_tgt, &rt)?)?,
        );
    }
    Ok((src, tgt))
}

/// Divergence profile on the eval set by teacher forcing the gold response in
/// both languages.
pub fn eval_divergence(
    params: &Parameters<f64>,
    eval: &[ParallelExample],
) -> Result<DivergenceProfile> {
    let (src, tgt) = src_tgt_dists(params, eval, |ex, _| Some(ex.gold_response.clone()))?;
    divergence_profile(&src, &tgt)
}

/// Target-side teacher-forced traces over the gold response, for selection rates.
pub fn eval_traces_tgt(
    params: &Parameters<f64>,
    eval: &[ParallelExample],
) -> Result<Vec<RoutingTrace<f64>>> {
    eval.iter()
        .map(|ex| teacher_force_trace(params, &ex.prompt_tgt, &ex.gold_response))
        .collect()
}

/// Accuracies, eval-set divergence and selection rate of one parameter set.
#[allow(clippy::too_many_arguments)]
pub fn summarize(
    method: &str,
    seed: Option<u64>,
    params: &Parameters<f64>,
    eval: &[ParallelExample],
    map: &TaskExpertMap,
    ci_proportion: f64,
    max_new: usize,
    eval_set_hash: &str,
) -> Result<RunSummary> {
    let (accuracy_src, _, _) = eval_decode(params, eval, Side::Src, max_new, SEP)?;
    let (accuracy_tgt, _, _) = eval_decode(params, eval, Side::Tgt, max_new, SEP)?;
    let profile = eval_divergence(params, eval)?;
    let rate = selection_rate(
        &eval_traces_tgt(params, eval)?,
        map,
        params.config.top_k,
        false,
        SelectionMode::Slots,
    );
    Ok(RunSummary {
        method: method.to_string(),
        seed,
        accuracy_src,
        accuracy_tgt,
        ci_proportion,
        mid_layers: map.mid_layers,
        mid_divergence: profile.range_mean(map.mid_layers),
        divergence: profile.mean_div,
        selection_rate: rate,
        eval_set_hash: eval_set_hash.to_string(),
        relative_gain: None,
        divergence_delta: None,
    })
}

/// Runs one stage and returns the directory it wrote.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let mut ctx = Ctx::new(cfg);
    match stage {
        Stage::GenData => {
            let layout = cfg.languages.layout();
            let langs = LanguageSpec::standard_set(layout, cfg.languages.seed);
            let corpus = gen_corpus(&cfg.corpus, &langs)?;
            let out = ctx.output_dir("gen-data")?;
            write_jsonl(out.join("pretrain.jsonl"), &corpus.pretrain)?;
            write_jsonl(out.join("task.jsonl"), &corpus.task_parallel)?;
            write_jsonl(out.join("eval.jsonl"), &corpus.eval_parallel)?;
            let general: Vec<GeneralRecord> = corpus
                .general
                .iter()
                .enumerate()
                .map(|(i, t)| GeneralRecord {
                    id: format!("general-{i:06}"),
                    tokens: t.clone(),
                })
                .collect();
            write_jsonl(out.join("general.jsonl"), &general)?;
            write_json(
                out.join("languages.json"),
                &LanguagesFile {
                    layout,
                    languages: langs,
                },
            )?;
            ctx.finish(
                stage,
                &out,
                &[
                    "pretrain.jsonl",
                    "task.jsonl",
                    "eval.jsonl",
                    "general.jsonl",
                    "languages.json",
                ],
            )
        }
        Stage::Pretrain => {
            let seqs: Vec<PretrainSeq> =
                read_jsonl(ctx.input(Stage::GenData, "gen-data", "pretrain.jsonl")?)?;
            let seqs: Vec<Vec<u32>> = seqs.into_iter().map(|s| s.tokens).collect();
            let init = Parameters::<f64>::init(&cfg.model, cfg.model_seed)?;
            let (params, losses) = pretrain(&init, &seqs, &cfg.pretrain)?;
            let out = ctx.output_dir("pretrain")?;
            save_checkpoint(&params, out.join("model.json"))?;
            write_json(out.join("losses.json"), &losses)?;
            ctx.finish(stage, &out, &["model.json", "losses.json"])
        }
        Stage::Categorize => {
            let params = load_params(&ctx.input(Stage::Pretrain, "pretrain", "model.json")?)?;
            let task: Vec<ParallelExample> =
                read_jsonl(ctx.input(Stage::GenData, "gen-data", "task.jsonl")?)?;
            let cat = categorize(&task, &params, cfg.eval.max_new, SEP)?;
            log::info!("taxonomy proportions {:?}", cat.report.proportions);
            let out = ctx.output_dir("categorize")?;
            write_jsonl(out.join("labeled.jsonl"), &cat.examples)?;
            write_json(out.join("proportions.json"), &cat.report)?;
            ctx.finish(stage, &out, &["labeled.jsonl", "proportions.json"])
        }
        Stage::Profile => {
            let params = load_params(&ctx.input(Stage::Pretrain, "pretrain", "model.json")?)?;
            let labeled: Vec<ParallelExample> =
                read_jsonl(ctx.input(Stage::Categorize, "categorize", "labeled.jsonl")?)?;
            let general: Vec<GeneralRecord> =
                read_jsonl(ctx.input(Stage::GenData, "gen-data", "general.jsonl")?)?;
            // Stage-1 responses, teacher forced.
            let (src, tgt) = src_tgt_dists(&params, &labeled, |ex, side| match side {
                Side::Src => ex.response_src.clone(),
                Side::Tgt => ex.response_tgt.clone(),
            })?;
            let profile = divergence_profile(&src, &tgt)?;
            let mut gen = BTreeMap::new();
            for g in &general {
                let (prompt, rest) = g
                    .tokens
                    .split_at(usize::from(g.tokens.first() == Some(&BOS)));
                gen.insert(
                    g.id.clone(),
                    seq_routing_dist(&teacher_force_trace(&params, prompt, rest)?)?,
                );
            }
            let out = ctx.output_dir("profile")?;
            write_jsonl(
                out.join("profile_src.jsonl"),
                &to_profile_records("src", &src),
            )?;
            write_jsonl(
                out.join("profile_tgt.jsonl"),
                &to_profile_records("tgt", &tgt),
            )?;
            write_jsonl(
                out.join("profile_general.jsonl"),
                &to_profile_records("general", &gen),
            )?;
            write_json(out.join("divergence.json"), &profile)?;
            ctx.finish(
                stage,
                &out,
                &[
                    "profile_src.jsonl",
                    "profile_tgt.jsonl",
                    "profile_general.jsonl",
                    "divergence.json",
                ],
            )
        }
        Stage::Identify => {
            let labeled: Vec<ParallelExample> =
                read_jsonl(ctx.input(Stage::Categorize, "categorize", "labeled.jsonl")?)?;
            let src_recs: Vec<ProfileRecord> =
                read_jsonl(ctx.input(Stage::Profile, "profile", "profile_src.jsonl")?)?;
            let gen_recs: Vec<ProfileRecord> =
                read_jsonl(ctx.input(Stage::Profile, "profile", "profile_general.jsonl")?)?;
            let profile: DivergenceProfile =
                read_json(ctx.input(Stage::Profile, "profile", "divergence.json")?)?;
            let src = from_profile_records(&src_recs, "src")?;
            let gen = from_profile_records(&gen_recs, "general")?;
            let task_src: Vec<&SeqRoutingDist<f64>> = labeled
                .iter()
                .filter(|e| e.label.is_some_and(TaxonomyLabel::src_correct))
                .filter_map(|e| src.get(&e.id))
                .collect();
            let ci: Vec<String> = labeled
                .iter()
                .filter(|e| e.label == Some(TaxonomyLabel::Ci) && src.contains_key(&e.id))
                .map(|e| e.id.clone())
                .collect();
            let general: Vec<&SeqRoutingDist<f64>> = gen.values().collect();
            let map = identify_task_experts(&profile, &task_src, &general, &ci, &src, cfg.train.k)?;
            log::info!(
                "middle layers {:?}, {} ci references",
                map.mid_layers,
                ci.len()
            );
            let out = ctx.output_dir("identify")?;
            write_json(out.join("task_experts.json"), &map)?;
            ctx.finish(stage, &out, &["task_experts.json"])
        }
        Stage::Finetune => {
            let map: TaskExpertMap =
                read_json(ctx.input(Stage::Identify, "identify", "task_experts.json")?)?;
            let params = load_params(&ctx.input(Stage::Pretrain, "pretrain", "model.json")?)?;
            let labeled: Vec<ParallelExample> =
                read_jsonl(ctx.input(Stage::Categorize, "categorize", "labeled.jsonl")?)?;
            let eval: Vec<ParallelExample> =
                read_jsonl(ctx.input(Stage::GenData, "gen-data", "eval.jsonl")?)?;
            let monitor = EvalMonitor {
                examples: &eval[..cfg.eval.monitor_size.min(eval.len())],
            };
            let (trained, metrics) = finetune(&params, &labeled, &map, &cfg.train, Some(&monitor))?;
            let out = ctx.output_dir(&format!("finetune/{}", cfg.method_name()))?;
            write_json(out.join("config.json"), &cfg.train)?;
            write_jsonl(out.join("metrics.jsonl"), &metrics.steps)?;
            save_checkpoint(&trained, out.join("model.json"))?;
            ctx.finish(stage, &out, &["config.json", "metrics.jsonl", "model.json"])
        }
        Stage::Eval => {
            let method = cfg.method_name();
            let model_path =
                ctx.input(Stage::Finetune, &format!("finetune/{method}"), "model.json")?;
            let params = load_params(&model_path)?;
            let (eval, eval_hash, map, ci) = eval_inputs(&mut ctx)?;
            let s = summarize(
                &method,
                Some(cfg.train.seed),
                &params,
                &eval,
                &map,
                ci,
                cfg.eval.max_new,
                &eval_hash,
            )?;
            let out = ctx.output_dir(&format!("eval/{method}"))?;
            write_json(out.join("summary.json"), &s)?;
            ctx.finish(stage, &out, &["summary.json"])
        }
        Stage::Steer => {
            let params = load_params(&ctx.input(Stage::Pretrain, "pretrain", "model.json")?)?;
            let (eval, eval_hash, map, ci) = eval_inputs(&mut ctx)?;
            let mut base = summarize(
                "base",
                None,
                &params,
                &eval,
                &map,
                ci,
                cfg.eval.max_new,
                &eval_hash,
            )?;
            let mut responses = Vec::with_capacity(eval.len());
            for ex in &eval {
                responses.push(
                    routing_steer_decode(
                        &params,
                        &ex.prompt_tgt,
                        &map,
                        cfg.steer_delta,
                        cfg.eval.max_new,
                    )?
                    .tokens,
                );
            }
            let golds: Vec<&[u32]> = eval.iter().map(|e| e.gold_answer.as_slice()).collect();
            base.method = cfg.steer_name();
            base.accuracy_tgt = accuracy_of(&responses, &golds, SEP);
            let out = ctx.output_dir(&format!("eval/{}", cfg.steer_name()))?;
            write_json(out.join("summary.json"), &base)?;
            ctx.finish(stage, &out, &["summary.json"])
        }
        Stage::Report => {
            let params = load_params(&ctx.input(Stage::Pretrain, "pretrain", "model.json")?)?;
            let (eval, eval_hash, map, ci) = eval_inputs(&mut ctx)?;
            let base = summarize(
                "base",
                None,
                &params,
                &eval,
                &map,
                ci,
                cfg.eval.max_new,
                &eval_hash,
            )?;
            let eval_root = ctx.root.join("eval");
            let mut dirs: Vec<PathBuf> = match std::fs::read_dir(&eval_root) {
                Ok(rd) => rd
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.join("summary.json").exists() && !p.to_string_lossy().contains(".rerun-")
                    })
                    .collect(),
                Err(_) => Vec::new(),
            };
            dirs.sort();
            let mut summaries = vec![base];
            for d in &dirs {
                let rel = d
                    .strip_prefix(&ctx.root)
                    .unwrap_or(d)
                    .to_string_lossy()
                    .into_owned();
                ctx.inputs.insert(
                    format!("{rel}/summary.json"),
                    hash_file(d.join("summary.json"))?,
                );
                summaries.push(read_json(d.join("summary.json"))?);
            }
            let table = compare_summaries(summaries)?;
            let report = divergence_report(
                &table
                    .iter()
                    .map(|s| (s.method.clone(), s.divergence.clone()))
                    .collect::<Vec<_>>(),
                map.mid_layers,
            )?;
            let out = ctx.output_dir("report")?;
            write_json(out.join("comparison.json"), &table)?;
            write_json(out.join("divergence.json"), &report)?;
            let csv = out.join("divergence.csv");
            std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
            ctx.finish(
                stage,
                &out,
                &["comparison.json", "divergence.json", "divergence.csv"],
            )
        }
        Stage::Flops => {
            let f = flops_estimate(cfg.flops);
            let doc = json!({
                "input": cfg.flops,
                "flops": f,
                "gflops": {
                    "base": gflops(f.base),
                    "lora": gflops(f.lora),
                    "align": gflops(f.align),
                    "total": gflops(f.total),
                },
                "align_fraction_of_total": f.align as f64 / f.total.max(1) as f64,
            });
            let out = ctx.output_dir("flops")?;
            write_json(out.join("flops.json"), &doc)?;
            ctx.finish(stage, &out, &["flops.json"])
        }
    }
}

fn eval_inputs(ctx: &mut Ctx<'_>) -> Result<(Vec<ParallelExample>, String, TaskExpertMap, f64)> {
    let eval_path = ctx.input(Stage::GenData, "gen-data", "eval.jsonl")?;
    let eval: Vec<ParallelExample> = read_jsonl(&eval_path)?;
    let eval_hash = hash_file(&eval_path)?;
    let map: TaskExpertMap =
        read_json(ctx.input(Stage::Identify, "identify", "task_experts.json")?)?;
    let props: ProportionReport =
        read_json(ctx.input(Stage::Categorize, "categorize", "proportions.json")?)?;
    Ok((eval, eval_hash, map, props.proportion(TaxonomyLabel::Ci)))
}

/// Runs every stage except steering in order, returning the stage directories.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    [
        Stage::GenData,
        Stage::Pretrain,
        Stage::Categorize,
        Stage::Profile,
        Stage::Identify,
        Stage::Finetune,
        Stage::Eval,
        Stage::Report,
        Stage::Flops,
    ]
    .into_iter()
    .map(|s| run_stage(s, cfg))
    .collect()
}

/// Attaches gains to summaries kept in the given order. The baseline of each
/// row is the SFT row with the same seed, else the first SFT row, else the
/// first row.
pub fn compare_summaries(mut rows: Vec<RunSummary>) -> Result<Vec<RunSummary>> {
    if rows.is_empty() {
        return Err(Error::Input("no runs to compare".into()));
    }
    if let Some(r) = rows
        .iter()
        .find(|r| r.eval_set_hash != rows[0].eval_set_hash)
    {
        return Err(Error::Analysis(format!(
            "{} was evaluated on a different eval set ({} vs {})",
            r.method, r.eval_set_hash, rows[0].eval_set_hash
        )));
    }
    let baselines: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            let b = rows
                .iter()
                .find(|s| s.method.starts_with("sft") && s.seed == r.seed)
                .or_else(|| rows.iter().find(|s| s.method.starts_with("sft")))
                .unwrap_or(&rows[0]);
            (b.accuracy_tgt, b.mid_divergence)
        })
        .collect();
    for (r, (acc, div)) in rows.iter_mut().zip(baselines) {
        r.relative_gain = (acc > 0.0).then(|| (r.accuracy_tgt - acc) / acc);
        r.divergence_delta = Some(r.mid_divergence - div);
    }
    Ok(rows)
}

/// Reads `summary.json` from each directory and compares them in the given order.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    if dirs.len() < 2 {
        return Err(Error::Input("compare_runs needs at least two runs".into()));
    }
    let rows = dirs
        .iter()
        .map(|d| {
            let p = d.join("summary.json");
            if !p.exists() {
                return Err(Error::MissingArtifact(p.display().to_string()));
            }
            read_json(&p)
        })
        .collect::<Result<Vec<RunSummary>>>()?;
    compare_summaries(rows)
}

/// Per-step metrics of a fine-tuning run directory.
pub fn read_metrics(dir: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    read_jsonl(dir.as_ref().join("metrics.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::default();
        let p = dir.path().join("c.json");
        cfg.save(&p).unwrap();
        assert_eq!(PipelineConfig::load(&p).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn method_names() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.method_name(), "ra-moe-seed0");
        cfg.train.ablation.no_align = true;
        assert_eq!(cfg.method_name(), "sft-seed0");
        cfg.train.ablation.no_align = false;
        cfg.train.lambda = 0.0;
        assert_eq!(cfg.method_name(), "sft-seed0");
    }

    #[test]
    fn comparing_a_run_with_itself_has_zero_gain() {
        let s = RunSummary {
            method: "ra-moe-seed0".into(),
            seed: Some(0),
            accuracy_src: 0.9,
            accuracy_tgt: 0.5,
            ci_proportion: 0.2,
            mid_layers: LayerRange(1, 2),
            divergence: vec![0.1, 0.05, 0.04, 0.2],
            mid_divergence: 0.045,
            selection_rate: 0.6,
            eval_set_hash: "h".into(),
            relative_gain: None,
            divergence_delta: None,
        };
        let rows = compare_summaries(vec![s.clone(), s.clone()]).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.relative_gain == Some(0.0) && r.divergence_delta == Some(0.0)));
        let mut other = s.clone();
        other.eval_set_hash = "x".into();
        assert!(compare_summaries(vec![s, other]).is_err());
    }
}
