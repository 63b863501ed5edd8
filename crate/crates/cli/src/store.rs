//! Artifact directory: one subdirectory per seed holding the output of each
//! stage. A stage reuses earlier artifacts when present and writes the ones
//! it had to compute.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use zson_core::evalharness::{check_checkpoint, AblationFlags, RunConfig, RunReport, PRESETS};
use zson_core::metatrain::{
    build_oracle, feature_bank, gen_scenes, pretrain_tfg, pretrain_uoi, Checkpoint, Trainer, SceneSet, World,
};
use zson_core::perception::{Tfg, TfgReport};
use zson_core::uoi::{PretrainReport, Uoi};

#[derive(Serialize, Deserialize)]
struct TfgFile {
    seed: u64,
    tfg: Tfg,
    report: TfgReport,
}

#[derive(Serialize, Deserialize)]
struct UoiFile {
    seed: u64,
    uoi: Uoi,
    report: PretrainReport,
}

pub struct Store {
    root: PathBuf,
    cfg: RunConfig,
}

fn same_settings(a: &RunConfig, b: &RunConfig) -> bool {
    a.world == b.world && a.meta == b.meta && a.policy == b.policy && a.eval_episodes == b.eval_episodes && a.thresholds == b.thresholds
}

impl Store {
    /// Opens `root`, refusing directories written under other settings.
    pub fn open(root: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let snap = root.join("config.json");
        if snap.exists() {
            let old: RunConfig = read_json(&snap)?;
            if !same_settings(&old, cfg) {
                bail!("{} was produced with different settings; use another --out", root.display());
            }
        } else {
            write_file(&snap, &serde_json::to_string_pretty(cfg)?)?;
        }
        Ok(Self { root: root.to_path_buf(), cfg: cfg.clone() })
    }

    /// File-name form of a flag spec.
    pub fn label(spec: &str) -> String {
        spec.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
    }

    /// Name of the preset that trains like `flags`, or a digest of them.
    fn train_label(flags: &AblationFlags) -> String {
        let t = flags.for_training();
        PRESETS
            .iter()
            .find(|p| AblationFlags::preset(p).is_ok_and(|f| f == t))
            .map(|p| p.to_string())
            .unwrap_or_else(|| {
                let bits = serde_json::to_value(t).unwrap_or_default();
                let on: Vec<String> = bits
                    .as_object()
                    .map(|m| m.iter().filter(|(_, v)| v.as_bool() == Some(true)).map(|(k, _)| k.clone()).collect())
                    .unwrap_or_default();
                format!("custom_{}", on.join("_"))
            })
    }

    fn seed_dir(&self, seed: u64) -> Result<PathBuf> {
        let d = self.root.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        write_file(&self.root.join(name), text)
    }

    pub fn scenes(&self, seed: u64) -> Result<SceneSet> {
        let p = self.seed_dir(seed)?.join("scenes.json");
        if p.exists() {
            let s: SceneSet = read_json(&p)?;
            if s.seed != seed {
                bail!("{} holds seed {}, expected {seed}", p.display(), s.seed);
            }
            return Ok(s);
        }
        let s = gen_scenes(seed, &self.cfg.world)?;
        write_file(&p, &serde_json::to_string(&s)?)?;
        Ok(s)
    }

    pub fn tfg(&self, seed: u64) -> Result<Tfg> {
        let p = self.seed_dir(seed)?.join("tfg.json");
        if p.exists() {
            let f: TfgFile = read_json(&p)?;
            check_seed(&p, f.seed, seed)?;
            return Ok(f.tfg);
        }
        let scenes = self.scenes(seed)?;
        let oracle = build_oracle(&scenes, &self.cfg.world)?;
        let (tfg, report) = pretrain_tfg(&scenes, &oracle, &self.cfg.world)?;
        write_file(&p, &serde_json::to_string(&TfgFile { seed, tfg: tfg.clone(), report })?)?;
        Ok(tfg)
    }

    pub fn uoi(&self, seed: u64) -> Result<(Uoi, PretrainReport)> {
        let p = self.seed_dir(seed)?.join("uoi.json");
        if p.exists() {
            let f: UoiFile = read_json(&p)?;
            check_seed(&p, f.seed, seed)?;
            return Ok((f.uoi, f.report));
        }
        let scenes = self.scenes(seed)?;
        let tfg = self.tfg(seed)?;
        let oracle = build_oracle(&scenes, &self.cfg.world)?;
        let bank = feature_bank(&tfg, &scenes.split)?;
        let (uoi, report) = pretrain_uoi(&scenes, &oracle, &bank, &self.cfg.world)?;
        write_file(&p, &serde_json::to_string(&UoiFile { seed, uoi: uoi.clone(), report: report.clone() })?)?;
        Ok((uoi, report))
    }

    pub fn world(&self, seed: u64) -> Result<World> {
        let scenes = self.scenes(seed)?;
        let tfg = self.tfg(seed)?;
        let (uoi, _) = self.uoi(seed)?;
        let oracle = build_oracle(&scenes, &self.cfg.world)?;
        Ok(World::new(self.cfg.world, scenes, oracle, tfg, uoi)?)
    }

    /// Trained checkpoint for `flags`, training and saving it when absent.
    pub fn checkpoint(&self, seed: u64, world: &World, flags: AblationFlags) -> Result<Checkpoint> {
        let label = Self::train_label(&flags);
        let dir = self.seed_dir(seed)?;
        let p = dir.join(format!("checkpoint-{label}.json"));
        if p.exists() {
            let c = Checkpoint::from_json(&std::fs::read_to_string(&p)?)?;
            check_seed(&p, c.seed, seed)?;
            check_checkpoint(&c, world, &self.cfg, &flags)?;
            return Ok(c);
        }
        let agent = zson_core::metatrain::Agent::new(seed, world, flags.for_training(), self.cfg.policy, self.cfg.meta)?;
        let mut trainer = Trainer::new(seed, agent);
        let logs = trainer.train(world, self.cfg.meta.episodes, None)?;
        let mut lines = String::new();
        for l in &logs {
            lines += &serde_json::to_string(l)?;
            lines.push('\n');
        }
        write_file(&dir.join(format!("train-{label}.jsonl")), &lines)?;
        let c = trainer.checkpoint();
        write_file(&p, &c.to_json()?)?;
        eprintln!("seed {seed}: trained {label}, checkpoint {}", c.hash()?);
        Ok(c)
    }

    /// Every `report-*.json` in the directory, by file name.
    pub fn reports(&self) -> Result<Vec<RunReport>> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&self.root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("report-") && n.ends_with(".json"))
            })
            .collect();
        names.sort();
        names.iter().map(|p| read_json(p)).collect()
    }
}

fn check_seed(p: &Path, found: u64, want: u64) -> Result<()> {
    if found != want {
        bail!("{} holds seed {found}, expected {want}", p.display());
    }
    Ok(())
}

fn read_json<T: DeserializeOwned>(p: &Path) -> Result<T> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}
