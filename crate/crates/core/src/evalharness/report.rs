use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{distance_stratified, eval_episodes, evaluate_agent, metric_spl, metric_sr, random_policy};
use super::{AblationFlags, EpisodeResult, EvalError, Result};
use crate::gridworld::{EpisodeSpec, SplitKind};
use crate::metatrain::{Agent, Checkpoint, MetaConfig, StepRecord, Trainer, World, WorldConfig};
use crate::policy::{PolicyConfig, ZrSource};
use crate::seeding;

/// Everything a multi-seed run depends on besides the seeds' artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub meta: MetaConfig,
    pub policy: PolicyConfig,
    /// Evaluation episodes per split and seed.
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    /// Lower bounds on `L*` for the distance table.
    pub thresholds: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            meta: MetaConfig::default(),
            policy: PolicyConfig::default(),
            eval_episodes: 200,
            seeds: vec![0, 1, 2],
            thresholds: vec![1, 5],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.meta.validate()?;
        if self.eval_episodes == 0 || self.seeds.is_empty() {
            return Err(EvalError::Flags("need at least one seed and one evaluation episode".into()));
        }
        Ok(())
    }
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: SplitKind,
    pub sr: Vec<f64>,
    pub spl: Vec<f64>,
    pub sr_mean: f64,
    pub sr_std: f64,
    pub spl_mean: f64,
    pub spl_std: f64,
}

impl SplitSummary {
    pub fn from_seeds(split: SplitKind, per_seed: &[Vec<EpisodeResult>]) -> Result<Self> {
        let sr = per_seed.iter().map(|r| metric_sr(r)).collect::<Result<Vec<_>>>()?;
        let spl = per_seed.iter().map(|r| metric_spl(r)).collect::<Result<Vec<_>>>()?;
        let (sr_mean, sr_std) = mean_std(&sr);
        let (spl_mean, spl_std) = mean_std(&spl);
        Ok(Self { split, sr, spl, sr_mean, sr_std, spl_mean, spl_std })
    }
}

/// Metrics over episodes with `L* ≥ min_shortest`, pooled over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub split: SplitKind,
    pub min_shortest: usize,
    /// `None` when no episode qualifies.
    pub count: Option<usize>,
    pub sr: Option<f64>,
    pub spl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    /// `None` for the random policy.
    pub flags: Option<AblationFlags>,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<String>,
    /// Hash of the label, flags, config, seeds and checkpoint hashes.
    pub input_hash: String,
    pub splits: Vec<SplitSummary>,
    pub strata: Vec<StratumRow>,
}

impl RunReport {
    pub fn split(&self, s: SplitKind) -> Option<&SplitSummary> {
        self.splits.iter().find(|x| x.split == s)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| EvalError::Io(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

fn input_hash(label: &str, flags: Option<&AblationFlags>, cfg: &RunConfig, seeds: &[u64], ckpts: &[String]) -> Result<String> {
    let v = serde_json::json!({ "label": label, "flags": flags, "config": cfg, "seeds": seeds, "checkpoints": ckpts });
    let s = serde_json::to_string(&v).map_err(|e| EvalError::Io(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(s.as_bytes())))
}

/// One seed's world and trained agent.
#[derive(Debug, Clone, Copy)]
pub struct SeedRun<'a> {
    pub seed: u64,
    pub world: &'a World,
    pub checkpoint: &'a Checkpoint,
}

/// Fresh agent for `flags`, trained for the configured budget.
pub fn train_agent(world: &World, seed: u64, flags: AblationFlags, cfg: &RunConfig) -> Result<Trainer> {
    let agent = Agent::new(seed, world, flags.for_training(), cfg.policy, cfg.meta)?;
    let mut t = Trainer::new(seed, agent);
    t.train(world, cfg.meta.episodes, None)?;
    Ok(t)
}

/// Rejects checkpoints trained under other settings than `cfg` and `flags`.
pub fn check_checkpoint(c: &Checkpoint, world: &World, cfg: &RunConfig, flags: &AblationFlags) -> Result<()> {
    let a = &c.agent;
    if a.meta != cfg.meta {
        return Err(EvalError::Mismatch("meta-training settings differ".into()));
    }
    if a.policy != cfg.policy {
        return Err(EvalError::Mismatch("policy settings differ".into()));
    }
    if a.flags.for_training() != flags.for_training() {
        return Err(EvalError::Mismatch("ablation flags differ".into()));
    }
    if world.config != cfg.world {
        return Err(EvalError::Mismatch("world settings differ".into()));
    }
    a.check_world(world).map_err(|e| EvalError::Mismatch(e.to_string()))
}

/// Evaluation episodes of every split for one seed.
pub fn split_episodes(world: &World, cfg: &RunConfig, seed: u64) -> Result<Vec<(SplitKind, Vec<EpisodeSpec>)>> {
    let s = seeding::derive(seed, &[seeding::tag("eval-set")]);
    SplitKind::ALL.iter().map(|k| Ok((*k, eval_episodes(world, *k, cfg.eval_episodes, s)?))).collect()
}

/// One trace line: episode coordinates plus the step record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub seed: u64,
    pub split: SplitKind,
    pub episode: usize,
    #[serde(flatten)]
    pub record: StepRecord,
}

/// Line-delimited JSON of the traces.
pub fn traces_jsonl(lines: &[TraceLine]) -> Result<String> {
    let mut out = String::new();
    for l in lines {
        out += &serde_json::to_string(l).map_err(|e| EvalError::Io(e.to_string()))?;
        out.push('\n');
    }
    Ok(out)
}

fn assemble(
    label: &str,
    flags: Option<AblationFlags>,
    cfg: &RunConfig,
    seeds: Vec<u64>,
    checkpoints: Vec<String>,
    results: BTreeMap<SplitKind, Vec<Vec<EpisodeResult>>>,
) -> Result<RunReport> {
    let mut splits = Vec::new();
    let mut strata = Vec::new();
    for (k, per_seed) in &results {
        splits.push(SplitSummary::from_seeds(*k, per_seed)?);
        let pooled: Vec<EpisodeResult> = per_seed.iter().flatten().copied().collect();
        for (t, s) in distance_stratified(&pooled, &cfg.thresholds)? {
            strata.push(StratumRow {
                split: *k,
                min_shortest: t,
                count: s.map(|s| s.count),
                sr: s.map(|s| s.sr),
                spl: s.map(|s| s.spl),
            });
        }
    }
    let input_hash = input_hash(label, flags.as_ref(), cfg, &seeds, &checkpoints)?;
    Ok(RunReport { label: label.to_string(), flags, config: cfg.clone(), seeds, checkpoints, input_hash, splits, strata })
}

/// Greedy evaluation of every seed's checkpoint on all three splits. The
/// identifier substitution in `flags` applies here; everything else must
/// match the checkpoint.
pub fn eval_splits(
    runs: &[SeedRun],
    cfg: &RunConfig,
    flags: AblationFlags,
    label: &str,
    mut traces: Option<&mut Vec<TraceLine>>,
) -> Result<RunReport> {
    flags.validate()?;
    if runs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut results: BTreeMap<SplitKind, Vec<Vec<EpisodeResult>>> = BTreeMap::new();
    let mut hashes = Vec::new();
    for run in runs {
        check_checkpoint(run.checkpoint, run.world, cfg, &flags)?;
        hashes.push(run.checkpoint.hash()?);
        let mut agent = run.checkpoint.agent.clone();
        agent.flags = flags;
        for (k, eps) in split_episodes(run.world, cfg, run.seed)? {
            let mut t = Vec::new();
            let r = evaluate_agent(run.world, &agent, &eps, run.seed, traces.is_some().then_some(&mut t))?;
            if let Some(out) = traces.as_deref_mut() {
                for (i, steps) in t.into_iter().enumerate() {
                    out.extend(steps.into_iter().map(|record| TraceLine { seed: run.seed, split: k, episode: i, record }));
                }
            }
            results.entry(k).or_default().push(r);
        }
    }
    assemble(label, Some(flags), cfg, runs.iter().map(|r| r.seed).collect(), hashes, results)
}

/// The random policy on the same episodes `eval_splits` uses.
pub fn random_report(worlds: &[(u64, &World)], cfg: &RunConfig) -> Result<RunReport> {
    if worlds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut results: BTreeMap<SplitKind, Vec<Vec<EpisodeResult>>> = BTreeMap::new();
    for (seed, world) in worlds {
        for (k, eps) in split_episodes(world, cfg, *seed)? {
            results.entry(k).or_default().push(random_policy(world, &eps, *seed)?);
        }
    }
    assemble("random", None, cfg, worlds.iter().map(|w| w.0).collect(), Vec::new(), results)
}

/// Greedy evaluation of a policy trained with every component off.
pub fn plain_baseline(world: &World, checkpoint: &Checkpoint, episodes: &[EpisodeSpec], seed: u64) -> Result<Vec<EpisodeResult>> {
    let a = &checkpoint.agent;
    if a.flags != AblationFlags::baseline() || a.dims.zr != ZrSource::None {
        return Err(EvalError::Mismatch("not a plain baseline checkpoint".into()));
    }
    evaluate_agent(world, a, episodes, seed, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<RunReport>,
}

/// Trains each preset on every seed and evaluates it. Presets that only
/// differ at evaluation share one training run.
pub fn ablation_matrix(worlds: &[(u64, &World)], cfg: &RunConfig, presets: &[&str]) -> Result<AblationReport> {
    let mut trained: BTreeMap<String, Vec<Checkpoint>> = BTreeMap::new();
    let mut rows = Vec::new();
    for name in presets {
        let flags = AblationFlags::preset(name)?;
        let key = serde_json::to_string(&flags.for_training()).map_err(|e| EvalError::Io(e.to_string()))?;
        if !trained.contains_key(&key) {
            let cks = worlds
                .iter()
                .map(|(seed, w)| Ok(train_agent(w, *seed, flags, cfg)?.checkpoint()))
                .collect::<Result<Vec<_>>>()?;
            trained.insert(key.clone(), cks);
        }
        let cks = &trained[&key];
        let runs: Vec<SeedRun> =
            worlds.iter().zip(cks).map(|((seed, world), checkpoint)| SeedRun { seed: *seed, world, checkpoint }).collect();
        rows.push(eval_splits(&runs, cfg, flags, name, None)?);
    }
    Ok(AblationReport { rows })
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn opt4(x: Option<f64>) -> String {
    x.map_or_else(String::new, f4)
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| EvalError::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Io(e.to_string()))
}

fn split_cells(r: &RunReport, splits: &[SplitKind]) -> Vec<String> {
    let mut out = Vec::new();
    for k in splits {
        match r.split(*k) {
            Some(s) => out.extend([f4(s.sr_mean), f4(s.sr_std), f4(s.spl_mean), f4(s.spl_std)]),
            None => out.extend(std::iter::repeat_n(String::new(), 4)),
        }
    }
    out
}

fn split_header(splits: &[SplitKind]) -> Vec<String> {
    splits
        .iter()
        .flat_map(|k| ["sr", "sr_std", "spl", "spl_std"].map(|m| format!("{}_{m}", k.name())))
        .collect()
}

/// Method per row, SR and SPL per split.
pub fn split_table(rows: &[&RunReport]) -> Result<String> {
    let h = split_header(&SplitKind::ALL);
    let header: Vec<&str> = std::iter::once("method").chain(h.iter().map(String::as_str)).collect();
    let body = rows
        .iter()
        .map(|r| std::iter::once(r.label.clone()).chain(split_cells(r, &SplitKind::ALL)).collect())
        .collect();
    csv_string(&header, body)
}

/// Component switches per row, then SR and SPL per split.
pub fn ablation_table(rows: &[&RunReport]) -> Result<String> {
    let switches =
        ["uot", "tfg_uoi", "mcfm", "mogl", "mcfm_loss", "cca_loss", "mcfm_meta", "mogl_meta", "gt_cls"];
    let h = split_header(&SplitKind::ALL);
    let header: Vec<&str> = std::iter::once("variant").chain(switches).chain(h.iter().map(String::as_str)).collect();
    let mark = |b: bool| if b { "1" } else { "0" }.to_string();
    let body = rows
        .iter()
        .map(|r| {
            let f = r.flags.unwrap_or_else(AblationFlags::baseline);
            let bits = [
                f.use_uot,
                f.use_tfg_uoi,
                f.use_mcfm,
                f.use_mogl,
                f.mcfm_loss_on,
                f.cca_loss_on,
                f.mcfm_meta_on,
                f.mogl_meta_on,
                f.use_gt_cls,
            ];
            std::iter::once(r.label.clone()).chain(bits.map(mark)).chain(split_cells(r, &SplitKind::ALL)).collect()
        })
        .collect();
    csv_string(&header, body)
}

/// Unlabeled splits only, for comparing identifier sources.
pub fn gt_cls_table(rows: &[&RunReport]) -> Result<String> {
    let splits = [SplitKind::Unknown, SplitKind::Unseen];
    let h = split_header(&splits);
    let header: Vec<&str> = std::iter::once("method").chain(h.iter().map(String::as_str)).collect();
    let body =
        rows.iter().map(|r| std::iter::once(r.label.clone()).chain(split_cells(r, &splits)).collect()).collect();
    csv_string(&header, body)
}

/// Pooled SR and SPL per split and distance stratum; absent strata are blank.
pub fn distance_table(rows: &[&RunReport]) -> Result<String> {
    let header = ["method", "split", "min_shortest", "count", "sr", "spl"];
    let mut body = Vec::new();
    for r in rows {
        for s in &r.strata {
            body.push(vec![
                r.label.clone(),
                s.split.name().to_string(),
                s.min_shortest.to_string(),
                s.count.map_or_else(String::new, |c| c.to_string()),
                opt4(s.sr),
                opt4(s.spl),
            ]);
        }
    }
    csv_string(&header, body)
}
