//! Phantom generation, preprocessing, pre-training and fine-tuning commands.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::run::{container_files, read_config, with_run, write_atomic, Run};
use super::{runtime, CliError, FinetuneArgs, PhantomArgs, PreprocessArgs, PretrainArgs};
use crate::backbone::{load_checkpoint, ModelConfig};
use crate::dataio::{preprocess_study, read_study, write_study, GridSpec, PreprocessConfig};
use crate::phantom::{generate_study, PhantomParams};
use crate::study::CineStudy;
use crate::training::{
    build_samples, evaluate, finetune, fixed_eval_loss, predict_study, pretrain, write_prediction, Arm, FinetuneConfig,
    LogEntry, PretrainState, TrainConfig,
};

/// Environment variable naming the phantom cache directory.
pub const CACHE_ENV: &str = "CINEMA_CACHE";

/// Phantoms drawn around `base` with per-study jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSetConfig {
    pub version: u32,
    pub n_studies: usize,
    pub seed: u64,
    #[serde(default)]
    pub base: PhantomParams,
    #[serde(default)]
    pub variation: Variation,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_prefix() -> String {
    "phantom_".into()
}

/// Relative jitter ranges; each study draws uniformly within `±` the fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variation {
    pub semi_axis: f64,
    pub wall_thickness: f64,
    pub rv_offset: f64,
    /// Absolute range of the end-systolic scale.
    pub contraction: [f64; 2],
}

impl Default for Variation {
    fn default() -> Self {
        Self { semi_axis: 0.1, wall_thickness: 0.1, rv_offset: 0.1, contraction: [0.65, 0.9] }
    }
}

impl PhantomSetConfig {
    fn validate(&self) -> Result<(), CliError> {
        let v = &self.variation;
        let fractions = [v.semi_axis, v.wall_thickness, v.rv_offset];
        if self.n_studies == 0 {
            return Err(CliError::Config("n_studies must be positive".into()));
        }
        if fractions.iter().any(|f| !(0.0..0.5).contains(f)) {
            return Err(CliError::Config("jitter fractions must lie in [0, 0.5)".into()));
        }
        let [lo, hi] = v.contraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(CliError::Config(format!("contraction range {:?} must satisfy 0 < lo <= hi < 1", v.contraction)));
        }
        Ok(())
    }

    /// Parameters and id of study `i`, drawn from stream `i` of the set seed.
    pub fn study_params(&self, i: usize) -> (PhantomParams, String) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        let v = &self.variation;
        let mut jitter = |f: f64| if f > 0.0 { 1.0 + rng.random_range(-f..=f) } else { 1.0 };
        let mut p = self.base.clone();
        for a in p.lv_semi_axes_ed.iter_mut() {
            *a *= jitter(v.semi_axis);
        }
        p.wall_thickness *= jitter(v.wall_thickness);
        p.rv_offset *= jitter(v.rv_offset);
        let [lo, hi] = v.contraction;
        p.contraction = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        p.seed = rng.random();
        (p, format!("{}{i:04}", self.id_prefix))
    }
}

/// Ground-truth label added to every phantom: 1 when the ejection fraction is below 50%.
pub const DISEASE_EF_THRESHOLD: f64 = 50.0;

fn phantom_study(params: &PhantomParams, id: &str) -> Result<CineStudy, CliError> {
    let mut s = generate_study(params, id).map_err(|e| CliError::Config(format!("study {id}: {e}")))?;
    let disease = (s.gt_scalars["ef"] < DISEASE_EF_THRESHOLD) as u8 as f64;
    s.gt_scalars.insert("disease".into(), disease);
    Ok(s)
}

/// Write the study of `params` to `dest`, going through the cache when one is configured.
fn write_phantom(params: &PhantomParams, id: &str, dest: &Path) -> Result<CineStudy, CliError> {
    let Some(cache) = std::env::var_os(CACHE_ENV).filter(|c| !c.is_empty()) else {
        let s = phantom_study(params, id)?;
        write_study(&s, dest).map_err(runtime)?;
        return Ok(s);
    };
    let cache = PathBuf::from(cache);
    fs::create_dir_all(&cache).map_err(|e| runtime(format!("{}: {e}", cache.display())))?;
    let key = json!({"params": params, "id": id, "code_version": env!("CARGO_PKG_VERSION")}).to_string();
    let stem = format!("{:08x}", crc32fast::hash(key.as_bytes()));
    let (data, sidecar) = (cache.join(format!("{stem}.cmrc")), cache.join(format!("{stem}.json")));
    if fs::read_to_string(&sidecar).is_ok_and(|k| k == key) {
        if let Ok(s) = read_study(&data) {
            fs::copy(&data, dest).map_err(runtime)?;
            return Ok(s);
        }
    }
    let s = phantom_study(params, id)?;
    write_study(&s, &data).map_err(runtime)?;
    write_atomic(&sidecar, key.as_bytes())?;
    fs::copy(&data, dest).map_err(runtime)?;
    Ok(s)
}

pub fn phantom_generate(a: &PhantomArgs, argv: &[String]) -> Result<(), CliError> {
    let (cfg, _): (PhantomSetConfig, _) = read_config(&a.config)?;
    cfg.validate()?;
    let snapshot = serde_json::to_value(&cfg).map_err(runtime)?;
    let run = Run::start(&a.out, "phantom generate", argv, snapshot, vec![cfg.seed], &[&a.config])?;
    with_run(run, |run| {
        let mut studies = Vec::new();
        for i in 0..cfg.n_studies {
            let (params, id) = cfg.study_params(i);
            let file = format!("{id}.cmrc");
            let s = write_phantom(&params, &id, &run.out.join(&file))?;
            run.record(file.clone());
            studies.push(json!({"id": id, "file": file, "gt": s.gt_scalars, "params": params}));
        }
        let listing = json!({"studies": studies});
        run.set_summary(listing.clone());
        Ok(listing)
    })
}

/// Read every study container of `dir`.
pub fn load_studies(dir: &Path) -> Result<Vec<CineStudy>, CliError> {
    let files = container_files(dir)?;
    if files.is_empty() {
        return Err(runtime(format!("{} holds no study containers", dir.display())));
    }
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        out.push(read_study(&f).map_err(|e| runtime(format!("{}: {e}", f.display())))?);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Target grids of `data preprocess`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub version: u32,
    pub sax: GridSpec,
    pub lax: GridSpec,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

pub fn data_preprocess(a: &PreprocessArgs, argv: &[String]) -> Result<(), CliError> {
    let (cfg, _): (GridConfig, _) = read_config(&a.grid)?;
    let pc = PreprocessConfig { sax: cfg.sax.clone(), lax: cfg.lax.clone(), normalize: cfg.normalize };
    pc.sax.validate().map_err(|e| CliError::Config(format!("sax grid: {e}")))?;
    pc.lax.validate().map_err(|e| CliError::Config(format!("lax grid: {e}")))?;
    let snapshot = serde_json::to_value(&cfg).map_err(runtime)?;
    let run = Run::start(&a.out, "data preprocess", argv, snapshot, vec![], &[&a.input, &a.grid])?;
    with_run(run, |run| {
        let mut ids = Vec::new();
        for f in container_files(&a.input)? {
            let s = read_study(&f).map_err(|e| runtime(format!("{}: {e}", f.display())))?;
            let p = preprocess_study(&s, &pc).map_err(|e| runtime(format!("study {}: {e}", s.id)))?;
            let name = f.file_name().expect("file").to_string_lossy().into_owned();
            write_study(&p, &run.out.join(&name)).map_err(runtime)?;
            run.record(name);
            ids.push(p.id);
        }
        if ids.is_empty() {
            return Err(runtime(format!("{} holds no study containers", a.input.display())));
        }
        Ok(json!({"studies": ids, "grid": cfg}))
    })
}

/// Named preset (`"desk"`, `"base"`) or a full model config.
pub fn resolve_model(v: &Value) -> Result<ModelConfig, CliError> {
    let cfg = match v {
        Value::String(s) if s == "desk" => ModelConfig::desk(),
        Value::String(s) if s == "base" => ModelConfig::base(),
        Value::String(s) => return Err(CliError::Config(format!("unknown model preset {s:?}"))),
        other => serde_json::from_value(other.clone()).map_err(|e| CliError::Config(format!("model: {e}")))?,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRunConfig {
    pub version: u32,
    /// Preset name or model config.
    pub model: Value,
    pub train: TrainConfig,
    /// Seed of the fixed masks used to score reconstruction before and after.
    #[serde(default)]
    pub eval_seed: u64,
}

fn append_log(path: &Path, entries: &[LogEntry]) -> Result<(), CliError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(runtime)?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e).map_err(runtime)?).map_err(runtime)?;
    }
    Ok(())
}

pub fn train_pretrain(a: &PretrainArgs, argv: &[String]) -> Result<(), CliError> {
    let (cfg, _): (PretrainRunConfig, _) = read_config(&a.config)?;
    let model = resolve_model(&cfg.model)?;
    cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.train.task != crate::training::Task::Pretrain {
        return Err(CliError::Config("train.task must be \"pretrain\"".into()));
    }
    let snapshot = json!({"version": cfg.version, "model": model, "train": cfg.train, "eval_seed": cfg.eval_seed});
    let mut inputs: Vec<&Path> = vec![&a.config, &a.data];
    if let Some(r) = &a.resume {
        inputs.push(r);
    }
    let run = Run::start(&a.out, "train pretrain", argv, snapshot, vec![cfg.train.seed, cfg.eval_seed], &inputs)?;
    with_run(run, |run| {
        let studies = load_studies(&a.data)?;
        let mut state = match &a.resume {
            Some(path) => {
                let s = PretrainState::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
                if s.model.config != model || s.train != cfg.train {
                    return Err(CliError::Config("resume checkpoint was trained with a different config".into()));
                }
                s
            }
            None => PretrainState::new(&model, &cfg.train).map_err(|e| CliError::Config(e.to_string()))?,
        };
        let eval_before = fixed_eval_loss(&state.model, &studies, cfg.eval_seed).map_err(runtime)?;
        let (log, ckpt) = (run.out.join("log.jsonl"), run.out.join("checkpoint.cmrc"));
        let budget = a.max_epochs.unwrap_or(usize::MAX);
        let mut losses = Vec::new();
        let mut epochs_run = 0;
        while state.epoch < cfg.train.epochs && epochs_run < budget {
            let mut entries = Vec::new();
            let outcome = pretrain(&mut state, &studies, Some(1), &mut |e| entries.push(e.clone())).map_err(runtime)?;
            append_log(&log, &entries)?;
            state.save(&ckpt).map_err(runtime)?;
            losses.extend(outcome.losses);
            epochs_run += outcome.epochs_run;
            if outcome.epochs_run == 0 {
                break;
            }
        }
        if epochs_run == 0 {
            state.save(&ckpt).map_err(runtime)?;
        }
        run.record("log.jsonl");
        run.record("checkpoint.cmrc");
        let eval_after = fixed_eval_loss(&state.model, &studies, cfg.eval_seed).map_err(runtime)?;
        Ok(json!({
            "n_params": state.model.store.num_params(),
            "n_studies": studies.len(),
            "epochs_run": epochs_run,
            "epochs_completed": state.epoch,
            "steps_completed": state.step,
            "finished": state.epoch >= cfg.train.epochs,
            "first_loss": losses.first(),
            "final_loss": losses.last(),
            "eval_loss_before": eval_before,
            "eval_loss_after": eval_after,
            "eval_loss_reduction": 1.0 - eval_after / eval_before,
        }))
    })
}

/// Deterministic split over studies sorted by id: the last `n_test` are held
/// out for testing, the `n_val` before them validate, the rest train.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_val: usize,
    pub n_test: usize,
}

impl SplitConfig {
    pub fn apply<'a>(
        &self,
        studies: &'a [CineStudy],
    ) -> Result<(&'a [CineStudy], &'a [CineStudy], &'a [CineStudy]), CliError> {
        let n = studies.len();
        if self.n_val == 0 || self.n_test == 0 || self.n_val + self.n_test >= n {
            return Err(CliError::Config(format!(
                "split needs 0 < n_val, 0 < n_test and n_val + n_test < {n} studies, got {} + {}",
                self.n_val, self.n_test
            )));
        }
        let (rest, test) = studies.split_at(n - self.n_test);
        let (train, val) = rest.split_at(rest.len() - self.n_val);
        Ok((train, val, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRunConfig {
    pub version: u32,
    /// Preset name or model config; taken from the checkpoint when one is given.
    #[serde(default)]
    pub model: Option<Value>,
    pub finetune: FinetuneConfig,
    pub split: SplitConfig,
}

pub fn train_finetune(a: &FinetuneArgs, argv: &[String]) -> Result<(), CliError> {
    let (cfg, _): (FinetuneRunConfig, _) = read_config(&a.config)?;
    cfg.finetune.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if a.seeds.is_empty() {
        return Err(CliError::Config("at least one seed is required".into()));
    }
    if cfg.finetune.arm == Arm::FineTune && a.checkpoint.is_none() {
        return Err(CliError::Config("the fine_tune arm needs --checkpoint".into()));
    }
    let configured = cfg.model.as_ref().map(resolve_model).transpose()?;
    let checkpoint = match &a.checkpoint {
        Some(p) => Some(load_checkpoint(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let backbone = match (&checkpoint, configured) {
        (Some(ck), configured) => {
            let m: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
                .map_err(|e| CliError::Config(format!("checkpoint model config: {e}")))?;
            if configured.is_some_and(|c| c != m) {
                return Err(CliError::Config("model config differs from the checkpoint's".into()));
            }
            m
        }
        (None, Some(c)) => c,
        (None, None) => return Err(CliError::Config("model is required without --checkpoint".into())),
    };
    let snapshot = json!({"version": cfg.version, "model": backbone, "finetune": cfg.finetune, "split": cfg.split});
    let mut inputs: Vec<&Path> = vec![&a.config, &a.data];
    if let Some(p) = &a.checkpoint {
        inputs.push(p);
    }
    let run = Run::start(&a.out, "train finetune", argv, snapshot, a.seeds.clone(), &inputs)?;
    with_run(run, |run| {
        let studies = load_studies(&a.data)?;
        let (train, val, test) = cfg.split.apply(&studies)?;
        let pretrained = checkpoint.as_ref().filter(|_| cfg.finetune.arm == Arm::FineTune).map(|c| &c.params);
        let mut per_seed = Vec::new();
        let mut n_params = 0;
        for &seed in &a.seeds {
            let mut ft = cfg.finetune.clone();
            ft.train.seed = seed;
            let dir = format!("seed{seed}");
            fs::create_dir_all(run.out.join(&dir).join("predictions")).map_err(runtime)?;
            let mut entries = Vec::new();
            let outcome = finetune(&backbone, &ft, pretrained, train, val, &mut |e| entries.push(e.clone()))
                .map_err(runtime)?;
            let log = format!("{dir}/log.jsonl");
            let _ = fs::remove_file(run.out.join(&log));
            append_log(&run.out.join(&log), &entries)?;
            run.record(log);
            let model = &outcome.model;
            n_params = model.num_params();
            let samples = build_samples(test, &model.config, &ft).map_err(runtime)?;
            let (_, test_metric) = evaluate(model, &samples).map_err(runtime)?;
            for s in test {
                let p = predict_study(model, &ft, s).map_err(runtime)?;
                let rel = format!("{dir}/predictions/{}.cmrc", s.id);
                write_prediction(&p, &run.out.join(&rel)).map_err(runtime)?;
                run.record(rel);
            }
            per_seed.push(json!({
                "seed": seed,
                "best_epoch": outcome.best_epoch,
                "best_val_metric": outcome.best_metric,
                "stopped_early": outcome.stopped_early,
                "evals": outcome.evals,
                "final_loss": outcome.losses.last(),
                "test_metric": test_metric,
            }));
        }
        let ids = |s: &[CineStudy]| s.iter().map(|x| x.id.clone()).collect::<Vec<_>>();
        Ok(json!({
            "task": cfg.finetune.train.task,
            "arm": cfg.finetune.arm,
            "target_view": cfg.finetune.target_view,
            "views": cfg.finetune.views,
            "validation_metric": cfg.finetune.train.validation_metric,
            "n_params": n_params,
            "split": {"train": ids(train), "val": ids(val), "test": ids(test)},
            "seeds": per_seed,
        }))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(n: usize) -> PhantomSetConfig {
        PhantomSetConfig {
            version: 1,
            n_studies: n,
            seed: 3,
            base: PhantomParams::default(),
            variation: Variation::default(),
            id_prefix: "p".into(),
        }
    }

    #[test]
    fn study_params_are_valid_and_varied() {
        let cfg = set(40);
        let mut efs = Vec::new();
        for i in 0..cfg.n_studies {
            let (p, id) = cfg.study_params(i);
            assert_eq!(id, format!("p{i:04}"));
            let gt = crate::phantom::analytic_ground_truth(&p).unwrap();
            efs.push(gt.ef);
            assert_eq!(cfg.study_params(i).0, p);
        }
        assert!(efs.iter().any(|&e| e < DISEASE_EF_THRESHOLD) && efs.iter().any(|&e| e >= DISEASE_EF_THRESHOLD));
    }

    #[test]
    fn phantom_jitter_keeps_grids_valid() {
        let mut cfg = set(12);
        cfg.base.n_phases = 2;
        for i in 0..cfg.n_studies {
            let (p, id) = cfg.study_params(i);
            phantom_study(&p, &id).unwrap();
        }
    }

    #[test]
    fn split_is_ordered_and_checked() {
        let mut studies = crate::training::fixtures::tiny_studies(6, 0);
        for (i, s) in studies.iter_mut().enumerate() {
            s.id = format!("s{i}");
        }
        let (tr, va, te) = SplitConfig { n_val: 1, n_test: 2 }.apply(&studies).unwrap();
        assert_eq!((tr.len(), va[0].id.as_str(), te[0].id.as_str()), (3, "s3", "s4"));
        assert!(SplitConfig { n_val: 3, n_test: 3 }.apply(&studies).is_err());
    }

    #[test]
    fn presets_resolve() {
        assert_eq!(resolve_model(&json!("desk")).unwrap(), ModelConfig::desk());
        assert!(matches!(resolve_model(&json!("huge")), Err(CliError::Config(_))));
        let v = serde_json::to_value(ModelConfig::desk()).unwrap();
        assert_eq!(resolve_model(&v).unwrap(), ModelConfig::desk());
    }
}
