//! Command implementations shared by the binary and the tests.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use migs_core::checkpoint::Checkpoint;
use migs_core::eval::{evaluate_task, MetricsReport, MetricsRow};
use migs_core::losses::LossBreakdown;
use migs_core::meta::{
    baseline_train, finetune, meta_train, Learner, Optimizers, Progress, ScenePool, TrainRngs,
};
use migs_core::model::Pipeline;
use migs_core::scenegraph::{AnnotatedScene, SceneGraph};
use migs_core::state::{ModelState, ParamKind};
use migs_core::synthdata::{default_vocabulary, generate_dataset, Dataset, DatasetManifest};
use migs_core::{MigsError, Result};
use migs_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::report::comparison_table;

/// Prefix of optimiser tensors stored alongside the model in checkpoints.
pub const OPTIM_PREFIX: &str = "optim/";

pub const CURVE_HEADER: &str = "iteration,tasks,box_l1,gan_global_g,gan_global_d,gan_obj_g,gan_obj_d,aux,aux_d,perceptual,image_l1,total_g,total_d";

/// Stable process exit code for an error.
pub fn exit_code(err: &MigsError) -> i32 {
    match err {
        MigsError::Io { .. } => 2,
        MigsError::Diverged { .. } => 3,
        MigsError::Version { .. } => 4,
        _ => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Migs,
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Migs => "migs",
            Method::Baseline => "baseline",
        }
    }
}

/// Provenance of one command invocation, written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub source_revision: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn source_revision() -> String {
    option_env!("MIGS_SOURCE_REVISION")
        .map(str::to_string)
        .unwrap_or_else(|| format!("migs-cli {}", env!("CARGO_PKG_VERSION")))
}

impl RunRecord {
    fn start(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash_hex(),
            source_revision: source_revision(),
            started_unix: now_unix(),
            finished_unix: 0,
            checkpoints: Vec::new(),
            reports: Vec::new(),
        }
    }

    fn finish(mut self, dir: &Path) -> Result<Self> {
        self.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(&self).expect("run record serialises") + "\n";
        write_file(&dir.join("run.json"), text.as_bytes())?;
        Ok(self)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| MigsError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| MigsError::io(path, e))
}

/// `gen-data`: write the synthetic dataset described by the config.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    generate_dataset(&cfg.dataset, out)
}

/// Load a dataset directory and check it was generated from `cfg`.
pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let data = Dataset::load(dir)?;
    check_dataset(cfg, &data)?;
    Ok(data)
}

fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if data.manifest.config != cfg.dataset {
        return Err(MigsError::Config(
            "dataset was generated with a different dataset section than the config".into(),
        ));
    }
    Ok(())
}

pub fn pipeline(cfg: &ExperimentConfig) -> Result<Pipeline> {
    Pipeline::new(
        cfg.model_config(),
        default_vocabulary(),
        cfg.dataset.image_height,
        cfg.dataset.image_width,
        cfg.inner.batch_size,
    )
}

/// Checkpoint with the model state and optimiser moments.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ExperimentConfig,
    iteration: u64,
    rngs: &TrainRngs,
    state: &ModelState,
    opts: &Optimizers,
) -> Result<()> {
    let mut all = state.clone();
    for (name, t) in opts.export() {
        all.insert(format!("{OPTIM_PREFIX}{name}"), t, ParamKind::Buffer);
    }
    Checkpoint {
        config_hash: cfg.hash(),
        outer_iteration: iteration,
        rngs: rngs.clone(),
        state: all,
    }
    .save(path)
}

/// A checkpoint split into model state and optimiser entries.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub config_hash: [u8; 32],
    pub iteration: u64,
    pub rngs: TrainRngs,
    pub state: ModelState,
    pub optimizer: Vec<(String, Tensor)>,
}

/// Load a checkpoint and check its tensors match the pipeline's model.
pub fn load_model(path: &Path, pipeline: &Pipeline) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(path)?;
    let mut state = ModelState::new();
    let mut optimizer = Vec::new();
    for (name, entry) in ckpt.state.iter() {
        match name.strip_prefix(OPTIM_PREFIX) {
            Some(rest) => optimizer.push((rest.to_string(), entry.value.clone())),
            None => state.insert(name, entry.value.clone(), entry.kind),
        }
    }
    let expected = pipeline.init_state(0);
    if !state.same_names(&expected)
        || state
            .iter()
            .any(|(n, e)| e.value.shape() != expected.tensor(n).shape())
    {
        return Err(MigsError::Config(format!(
            "{} does not match the configured model architecture",
            path.display()
        )));
    }
    Ok(LoadedModel {
        config_hash: ckpt.config_hash,
        iteration: ckpt.outer_iteration,
        rngs: ckpt.rngs,
        state,
        optimizer,
    })
}

fn curve_row(p: &Progress) -> String {
    let b: &LossBreakdown = &p.mean;
    let tasks: Vec<String> = p.tasks.iter().map(|t| t.to_string()).collect();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        p.iteration,
        tasks.join(";"),
        b.box_l1,
        b.gan_global_g,
        b.gan_global_d,
        b.gan_obj_g,
        b.gan_obj_d,
        b.aux,
        b.aux_d,
        b.perceptual,
        b.image_l1,
        b.total_g,
        b.total_d
    )
}

/// Keep the header and rows up to `iteration`.
fn truncate_curve(path: &Path, iteration: u64) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| MigsError::io(path, e))?;
    let mut out = format!("{CURVE_HEADER}\n");
    for line in text.lines().skip(1) {
        let it: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| MigsError::Format {
                path: path.to_path_buf(),
                message: format!("bad curve row {line:?}"),
            })?;
        if it <= iteration {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_file(path, out.as_bytes())
}

/// Files produced by a training command.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub iterations: u64,
    pub state: ModelState,
    pub record: RunRecord,
}

/// `meta-train` / `baseline-train`. With `resume`, continues from
/// `out/checkpoints/latest.ckpt`. `on_progress` sees every curve row.
pub fn train(
    cfg: &ExperimentConfig,
    method: Method,
    data: &Dataset,
    out: &Path,
    resume: bool,
    mut on_progress: impl FnMut(&Progress),
) -> Result<TrainOutcome> {
    check_dataset(cfg, data)?;
    let pipe = pipeline(cfg)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let config_path = out.join("config.json");
    let canonical = cfg.canonical_json();
    if resume {
        let stored =
            std::fs::read_to_string(&config_path).map_err(|e| MigsError::io(&config_path, e))?;
        if stored != canonical {
            return Err(MigsError::Config(format!(
                "{} differs from the resumed configuration",
                config_path.display()
            )));
        }
    } else {
        write_file(&config_path, canonical.as_bytes())?;
    }
    let mut record = RunRecord::start(&format!("{}-train", method.name()), cfg);
    let latest = ckpt_dir.join("latest.ckpt");
    let curve = out.join("curve.csv");
    let groups = pipe.groups();
    let (state, mut rngs, start, opts) = if resume {
        let m = load_model(&latest, &pipe)?;
        if m.config_hash != cfg.hash() {
            return Err(MigsError::Config(format!(
                "{} was written under a different config",
                latest.display()
            )));
        }
        let mut opts = Optimizers::new(&groups, cfg.inner.optimizer, cfg.inner.lr);
        let entries: Vec<(&str, &Tensor)> =
            m.optimizer.iter().map(|(n, t)| (n.as_str(), t)).collect();
        opts.import(&entries)?;
        truncate_curve(&curve, m.iteration)?;
        (m.state, m.rngs, m.iteration, Some(opts))
    } else {
        write_file(&curve, format!("{CURVE_HEADER}\n").as_bytes())?;
        (pipe.init_state(cfg.seed), TrainRngs::new(cfg.seed), 0, None)
    };
    let fallback_opts = opts.clone();
    let mut curve_file = OpenOptions::new()
        .append(true)
        .open(&curve)
        .map_err(|e| MigsError::io(&curve, e))?;
    let mut saved = Vec::new();
    let every = cfg.outer.checkpoint_every;
    let mut hook = |p: &Progress,
                    s: &ModelState,
                    r: &TrainRngs,
                    o: &Optimizers,
                    row_index: u64|
     -> Result<()> {
        curve_file
            .write_all(curve_row(p).as_bytes())
            .and_then(|_| curve_file.flush())
            .map_err(|e| MigsError::io(&curve, e))?;
        on_progress(p);
        if every > 0 && row_index.is_multiple_of(every) {
            let path = ckpt_dir.join(format!("iter_{}.ckpt", p.iteration));
            save_checkpoint(&path, cfg, p.iteration, r, s, o)?;
            save_checkpoint(&latest, cfg, p.iteration, r, s, o)?;
            saved.push(path);
        }
        Ok(())
    };
    let (state, iterations, last_opts) = match method {
        Method::Migs => {
            let pools: Vec<ScenePool> = data
                .train_tasks()
                .iter()
                .map(|t| ScenePool::new(t.train.iter().cloned().enumerate().collect()))
                .collect();
            let refs: Vec<&ScenePool> = pools.iter().collect();
            let mut last = None;
            let s = meta_train(
                &pipe,
                state,
                &refs,
                &cfg.inner,
                &cfg.outer,
                &mut rngs,
                start,
                opts,
                |p, s, r, o| {
                    last = Some(o.clone());
                    hook(p, s, r, o, p.iteration)
                },
            )?;
            (s, cfg.outer.iterations.max(start), last)
        }
        Method::Baseline => {
            let union: Vec<(usize, AnnotatedScene)> = data
                .train_tasks()
                .iter()
                .flat_map(|t| t.train.iter().cloned())
                .enumerate()
                .collect();
            let pool = ScenePool::new(union);
            let every_row = cfg.baseline_report_every();
            let mut last = None;
            let s = baseline_train(
                &pipe,
                state,
                &pool,
                &cfg.inner,
                cfg.baseline_steps(),
                every_row,
                cfg.outer.divergence_bound,
                &mut rngs,
                start,
                opts,
                |p, s, r, o| {
                    last = Some(o.clone());
                    hook(p, s, r, o, p.iteration.div_ceil(every_row))
                },
            )?;
            (s, cfg.baseline_steps().max(start), last)
        }
    };
    let opts = last_opts
        .or(fallback_opts)
        .unwrap_or_else(|| Optimizers::new(&groups, cfg.inner.optimizer, cfg.inner.lr));
    let final_path = ckpt_dir.join("final.ckpt");
    save_checkpoint(&final_path, cfg, iterations, &rngs, &state, &opts)?;
    save_checkpoint(&latest, cfg, iterations, &rngs, &state, &opts)?;
    record.checkpoints = saved;
    record.checkpoints.push(final_path.clone());
    record.reports.push(curve);
    let record = record.finish(out)?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        iterations,
        state,
        record,
    })
}

/// Seed of one (task, shots) cell; shared by every method so all methods
/// fine-tune on the same shots.
pub fn cell_seed(seed: u64, task_id: &str, shots: usize) -> u64 {
    let d = Sha256::digest(format!("{seed}/{task_id}/{shots}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Number of parallel evaluation cells: `MIGS_NUM_WORKERS` if set.
pub fn num_workers() -> Result<usize> {
    match std::env::var("MIGS_NUM_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(MigsError::Config(format!(
                "MIGS_NUM_WORKERS={v:?} is not a positive integer"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

/// A trained model entering evaluation.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub method: String,
    pub state: ModelState,
}

/// Fine-tune every candidate on every (test task, shots) cell and score it
/// on the task's held-out scenes. Rows are ordered by task, shots, method.
pub fn finetune_eval(
    cfg: &ExperimentConfig,
    data: &Dataset,
    candidates: &[Candidate],
    shots: &[usize],
    workers: usize,
) -> Result<MetricsReport> {
    check_dataset(cfg, data)?;
    let pipe = pipeline(cfg)?;
    let decoder = cfg.model.decoder.name();
    let mut cells = Vec::new();
    for task in data.test_tasks() {
        for &k in shots {
            for c in candidates {
                cells.push((task, k, c));
            }
        }
    }
    let run = |&(task, k, c): &(&migs_core::synthdata::TaskData, usize, &Candidate)| -> Result<MetricsRow> {
        let seed = cell_seed(cfg.seed, &task.spec.task_id, k);
        let n_train = task.train.len();
        let pool = ScenePool::new(task.train.iter().cloned().enumerate().collect());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ft = finetune(&pipe, &c.state, &pool, k, cfg.eval.finetune_steps, &cfg.inner, &mut rng)?;
        let test: Vec<(usize, &AnnotatedScene)> = task.test.iter().enumerate().map(|(i, s)| (n_train + i, s)).collect();
        evaluate_task(
            &task.spec.task_id,
            &c.method,
            decoder,
            &ft.shot_ids,
            &test,
            pipe.extractor(),
            &cfg.eval.prd,
            |id, s| pipe.generate(&ft.state, &s.graph, seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        )
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| MigsError::Config(format!("cannot start worker pool: {e}")))?;
    let rows = pool.install(|| cells.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    Ok(MetricsReport {
        extractor_fingerprint: pipe.extractor().fingerprint(),
        config_hash: cfg.hash_hex(),
        rows,
    })
}

/// Write `report.json`, `report.csv`, `comparison.md` and `run.json`.
pub fn write_reports(
    cfg: &ExperimentConfig,
    report: &MetricsReport,
    shots: &[usize],
    out: &Path,
) -> Result<RunRecord> {
    create_dir(out)?;
    let mut record = RunRecord::start("finetune-eval", cfg);
    let files = [
        ("report.json", report.to_json()),
        ("report.csv", report.to_csv()),
        (
            "comparison.md",
            comparison_table(report, shots, &cfg.eval.metrics),
        ),
    ];
    for (name, text) in files {
        let p = out.join(name);
        write_file(&p, text.as_bytes())?;
        record.reports.push(p);
    }
    record.finish(out)
}

/// Find `config.json` next to a checkpoint or in one of its ancestors.
pub fn find_config(checkpoint: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(checkpoint).map_err(|e| MigsError::io(checkpoint, e))?;
    abs.ancestors()
        .skip(1)
        .map(|d| d.join("config.json"))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            MigsError::Config(format!(
                "no config.json found above {}; pass --config",
                checkpoint.display()
            ))
        })
}

/// Parse a scene graph document (`objects` plus `[s, p, o]` edges).
pub fn parse_graph(text: &str) -> Result<SceneGraph> {
    serde_json::from_str(text)
        .map_err(|e| MigsError::InvalidGraph(format!("line {}: {e}", e.line())))
}

/// `generate`: one PNG for a graph file.
pub fn generate_image(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    graph: &Path,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let pipe = pipeline(cfg)?;
    let text = std::fs::read_to_string(graph).map_err(|e| MigsError::io(graph, e))?;
    let g = parse_graph(&text)?;
    let model = load_model(checkpoint, &pipe)?;
    let img = pipe.generate(&model.state, &g, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    img.save_png(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&MigsError::Config("x".into())), 1);
        assert_eq!(exit_code(&MigsError::InvalidGraph("x".into())), 1);
        assert_eq!(
            exit_code(&MigsError::io("p", std::io::Error::other("x"))),
            2
        );
        assert_eq!(
            exit_code(&MigsError::Diverged {
                at: 3,
                detail: String::new()
            }),
            3
        );
        assert_eq!(
            exit_code(&MigsError::Version {
                found: 2,
                expected: 1
            }),
            4
        );
    }

    #[test]
    fn curve_truncation_keeps_earlier_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        std::fs::write(&p, format!("{CURVE_HEADER}\n1,0,a\n2,1,b\n3,0,c\n")).unwrap();
        truncate_curve(&p, 2).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            format!("{CURVE_HEADER}\n1,0,a\n2,1,b\n")
        );
    }

    #[test]
    fn cell_seeds_differ_per_cell() {
        assert_eq!(cell_seed(1, "a", 5), cell_seed(1, "a", 5));
        assert_ne!(cell_seed(1, "a", 5), cell_seed(1, "a", 10));
        assert_ne!(cell_seed(1, "a", 5), cell_seed(1, "b", 5));
        assert_ne!(cell_seed(1, "a", 5), cell_seed(2, "a", 5));
    }

    #[test]
    fn graph_documents() {
        let g = parse_graph(r#"{"objects": [0, 2], "edges": [[0, 1, 1]]}"#).unwrap();
        assert_eq!(g.objects, vec![0, 2]);
        assert!(matches!(
            parse_graph(r#"{"objects": "x"}"#),
            Err(MigsError::InvalidGraph(_))
        ));
    }
}
