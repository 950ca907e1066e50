//! First-order meta-learning (Reptile): inner adaptation, the outer
//! interpolation step, joint baseline training and few-shot fine-tuning.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use migs_tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MigsError, Result};
use crate::losses::LossBreakdown;
use crate::optim::{Optimizer, OptimizerKind};
use crate::scenegraph::AnnotatedScene;
use crate::state::{ModelState, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerConfig {
    pub k: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    /// Fresh optimiser moments for every task.
    pub reset_moments: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            k: 10,
            lr: 1e-4,
            optimizer: OptimizerKind::default(),
            batch_size: 4,
            reset_moments: true,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(MigsError::Config("inner lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(MigsError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuterConfig {
    pub beta: f64,
    pub iterations: u64,
    pub tasks_per_step: usize,
    pub checkpoint_every: u64,
    /// Training halts when a loss exceeds this value.
    pub divergence_bound: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            iterations: 2000,
            tasks_per_step: 1,
            checkpoint_every: 200,
            divergence_bound: 1e6,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(MigsError::Config(format!(
                "beta {} outside (0, 1]",
                self.beta
            )));
        }
        if self.tasks_per_step == 0 {
            return Err(MigsError::Config(
                "tasks_per_step must be at least 1".into(),
            ));
        }
        if !(self.divergence_bound > 0.0) {
            return Err(MigsError::Config(
                "divergence bound must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One optimiser per parameter group.
#[derive(Debug, Clone)]
pub struct Optimizers {
    by_group: BTreeMap<String, Optimizer>,
}

impl Optimizers {
    pub fn new(groups: &[String], kind: OptimizerKind, lr: f64) -> Self {
        Self {
            by_group: groups
                .iter()
                .map(|g| (g.clone(), Optimizer::new(kind, lr)))
                .collect(),
        }
    }

    /// Every group's moment state as named tensors.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.by_group
            .iter()
            .flat_map(|(g, o)| o.export(&format!("{g}/")))
            .collect()
    }

    pub fn import<'a>(&mut self, entries: &[(&'a str, &'a Tensor)]) -> Result<()> {
        for (g, o) in self.by_group.iter_mut() {
            o.import(&format!("{g}/"), entries.iter().copied())?;
        }
        Ok(())
    }

    pub fn step(
        &mut self,
        group: &str,
        state: &mut ModelState,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let opt = self
            .by_group
            .get_mut(group)
            .ok_or_else(|| MigsError::Contract(format!("no optimiser for group {group}")))?;
        opt.step(state, grads)
    }
}

/// Outcome of one inner iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
}

/// A model that can take one training iteration on a data pool.
pub trait Learner {
    type Pool: ?Sized;

    /// Parameter-name prefixes, each updated by its own optimiser and
    /// interpolated separately by the outer step.
    fn groups(&self) -> Vec<String>;

    fn step(
        &self,
        state: &mut ModelState,
        opts: &mut Optimizers,
        pool: &Self::Pool,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepReport>;
}

fn check_report(r: &StepReport, at: u64, bound: f64) -> Result<()> {
    let b = &r.breakdown;
    if !b.is_finite() || b.total_g.abs() > bound || b.total_d.abs() > bound {
        return Err(MigsError::Diverged {
            at,
            detail: format!("{b:?}"),
        });
    }
    Ok(())
}

fn run_steps<L: Learner>(
    learner: &L,
    state: &mut ModelState,
    opts: &mut Optimizers,
    pool: &L::Pool,
    steps: usize,
    rng: &mut ChaCha8Rng,
    bound: f64,
) -> Result<Vec<StepReport>> {
    let mut reports = Vec::with_capacity(steps);
    for i in 0..steps {
        let r = learner.step(state, opts, pool, rng)?;
        check_report(&r, i as u64, bound)?;
        reports.push(r);
    }
    Ok(reports)
}

/// `U^k`: a deep copy of `theta` after `k` iterations on `pool`.
pub fn inner_adapt<L: Learner>(
    learner: &L,
    theta: &ModelState,
    pool: &L::Pool,
    cfg: &InnerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ModelState> {
    let mut opts = Optimizers::new(&learner.groups(), cfg.optimizer, cfg.lr);
    Ok(inner_adapt_with(learner, theta, pool, cfg.k, &mut opts, rng, f64::INFINITY)?.0)
}

fn inner_adapt_with<L: Learner>(
    learner: &L,
    theta: &ModelState,
    pool: &L::Pool,
    k: usize,
    opts: &mut Optimizers,
    rng: &mut ChaCha8Rng,
    bound: f64,
) -> Result<(ModelState, Vec<StepReport>)> {
    let mut adapted = theta.clone();
    let reports = run_steps(learner, &mut adapted, opts, pool, k, rng, bound)?;
    Ok((adapted, reports))
}

/// `θ' = θ + β·mean_l(θ_l − θ)` over every tensor whose name satisfies
/// `select`, buffers included. Other tensors are copied from `theta`.
pub fn reptile_step_where(
    theta: &ModelState,
    adapted: &[ModelState],
    beta: f64,
    select: impl Fn(&str) -> bool,
) -> Result<ModelState> {
    if adapted.is_empty() {
        return Err(MigsError::Contract(
            "reptile step needs at least one adapted state".into(),
        ));
    }
    if let Some(i) = adapted.iter().position(|a| !a.same_names(theta)) {
        return Err(MigsError::Contract(format!(
            "adapted state {i} has a different name set"
        )));
    }
    let l = adapted.len() as f64;
    let mut out = theta.clone();
    for (name, entry) in theta.iter() {
        if !select(name) {
            continue;
        }
        let base = entry.value.data();
        let mut mean = vec![0.0; base.len()];
        for a in adapted {
            for (m, v) in mean.iter_mut().zip(a.tensor(name).data()) {
                *m += v;
            }
        }
        // (1−β)θ + β·mean(θ_l) equals θ + β·mean(θ_l − θ) and is exact at β ∈ {0, 1}.
        let value: Vec<f64> = base
            .iter()
            .zip(&mean)
            .map(|(&t, &m)| {
                let m = if adapted.len() == 1 { m } else { m / l };
                if beta == 1.0 {
                    m
                } else {
                    (1.0 - beta) * t + beta * m
                }
            })
            .collect();
        out.set(name, Tensor::new(entry.value.shape(), value))?;
    }
    Ok(out)
}

pub fn reptile_step(theta: &ModelState, adapted: &[ModelState], beta: f64) -> Result<ModelState> {
    reptile_step_where(theta, adapted, beta, |_| true)
}

/// Independent random streams: one for choosing tasks, one for everything
/// inside an inner loop (batches, noise).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRngs {
    pub tasks: ChaCha8Rng,
    pub batches: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        let mut tasks = ChaCha8Rng::seed_from_u64(seed);
        tasks.set_stream(1);
        let mut batches = ChaCha8Rng::seed_from_u64(seed);
        batches.set_stream(2);
        Self { tasks, batches }
    }
}

/// Summary of one outer iteration (or one baseline step).
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    /// Number of completed iterations.
    pub iteration: u64,
    pub tasks: Vec<usize>,
    /// Mean over every inner step of the iteration.
    pub mean: LossBreakdown,
}

fn mean_breakdown(reports: &[StepReport]) -> LossBreakdown {
    let n = reports.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for r in reports {
        let b = &r.breakdown;
        m.box_l1 += b.box_l1 / n;
        m.gan_global_g += b.gan_global_g / n;
        m.gan_global_d += b.gan_global_d / n;
        m.gan_obj_g += b.gan_obj_g / n;
        m.gan_obj_d += b.gan_obj_d / n;
        m.aux += b.aux / n;
        m.aux_d += b.aux_d / n;
        m.perceptual += b.perceptual / n;
        m.image_l1 += b.image_l1 / n;
        m.total_g += b.total_g / n;
        m.total_d += b.total_d / n;
    }
    m
}

fn in_group(name: &str, group: &str) -> bool {
    name.starts_with(group)
}

/// Outer loop. Runs iterations `start..outer.iterations`; `hook` is called
/// after each one with the new meta-state (checkpointing, logging).
#[allow(clippy::too_many_arguments)]
pub fn meta_train<L: Learner>(
    learner: &L,
    mut theta: ModelState,
    pools: &[&L::Pool],
    inner: &InnerConfig,
    outer: &OuterConfig,
    rngs: &mut TrainRngs,
    start: u64,
    opts: Option<Optimizers>,
    mut hook: impl FnMut(&Progress, &ModelState, &TrainRngs, &Optimizers) -> Result<()>,
) -> Result<ModelState> {
    if pools.is_empty() {
        return Err(MigsError::Contract(
            "meta-training needs at least one task".into(),
        ));
    }
    inner.validate()?;
    outer.validate()?;
    let groups = learner.groups();
    let mut shared = opts.unwrap_or_else(|| Optimizers::new(&groups, inner.optimizer, inner.lr));
    for it in start..outer.iterations {
        let tasks: Vec<usize> = if outer.tasks_per_step <= pools.len() {
            sample(&mut rngs.tasks, pools.len(), outer.tasks_per_step).into_vec()
        } else {
            (0..outer.tasks_per_step)
                .map(|_| rngs.tasks.random_range(0..pools.len()))
                .collect()
        };
        let mut adapted = Vec::with_capacity(tasks.len());
        let mut reports = Vec::new();
        for &t in &tasks {
            let mut fresh;
            let opts = if inner.reset_moments {
                fresh = Optimizers::new(&groups, inner.optimizer, inner.lr);
                &mut fresh
            } else {
                &mut shared
            };
            let (a, r) = inner_adapt_with(
                learner,
                &theta,
                pools[t],
                inner.k,
                opts,
                &mut rngs.batches,
                outer.divergence_bound,
            )
            .map_err(|e| match e {
                MigsError::Diverged { at, detail } => MigsError::Diverged {
                    at: it,
                    detail: format!("task {t}, inner step {at}: {detail}"),
                },
                other => other,
            })?;
            adapted.push(a);
            reports.extend(r);
        }
        let mut next = theta.clone();
        for g in &groups {
            next = reptile_step_where(&next, &adapted, outer.beta, |n| in_group(n, g))?;
        }
        next = reptile_step_where(&next, &adapted, outer.beta, |n| {
            !groups.iter().any(|g| in_group(n, g))
        })?;
        if !next.is_finite() {
            return Err(MigsError::Diverged {
                at: it,
                detail: "non-finite meta-parameters".into(),
            });
        }
        theta = next;
        let progress = Progress {
            iteration: it + 1,
            tasks,
            mean: mean_breakdown(&reports),
        };
        hook(&progress, &theta, rngs, &shared)?;
    }
    Ok(theta)
}

/// Joint training on one pool (the union of training tasks), one optimiser
/// state for the whole run. `hook` sees every `report_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn baseline_train<L: Learner>(
    learner: &L,
    mut phi: ModelState,
    pool: &L::Pool,
    inner: &InnerConfig,
    steps: u64,
    report_every: u64,
    divergence_bound: f64,
    rngs: &mut TrainRngs,
    start: u64,
    opts: Option<Optimizers>,
    mut hook: impl FnMut(&Progress, &ModelState, &TrainRngs, &Optimizers) -> Result<()>,
) -> Result<ModelState> {
    inner.validate()?;
    let report_every = report_every.max(1);
    let mut opts =
        opts.unwrap_or_else(|| Optimizers::new(&learner.groups(), inner.optimizer, inner.lr));
    let mut reports = Vec::new();
    for s in start..steps {
        let r = learner.step(&mut phi, &mut opts, pool, &mut rngs.batches)?;
        check_report(&r, s, divergence_bound)?;
        reports.push(r);
        if (s + 1) % report_every == 0 || s + 1 == steps {
            let progress = Progress {
                iteration: s + 1,
                tasks: vec![0],
                mean: mean_breakdown(&reports),
            };
            reports.clear();
            hook(&progress, &phi, rngs, &opts)?;
        }
    }
    Ok(phi)
}

/// Scenes of one task with stable per-task indices, recording every scene
/// a learner reads.
#[derive(Debug, Clone)]
pub struct ScenePool {
    items: Arc<Vec<(usize, AnnotatedScene)>>,
    visible: Vec<usize>,
    log: Arc<Mutex<BTreeSet<usize>>>,
}

impl ScenePool {
    /// `items` pairs each scene with its index inside the task.
    pub fn new(items: Vec<(usize, AnnotatedScene)>) -> Self {
        let visible = (0..items.len()).collect();
        Self {
            items: Arc::new(items),
            visible,
            log: Arc::new(Mutex::new(BTreeSet::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    /// Scene at position `i`; its task index is logged.
    pub fn get(&self, i: usize) -> &AnnotatedScene {
        let (id, scene) = &self.items[self.visible[i]];
        self.log.lock().expect("log lock").insert(*id);
        scene
    }

    /// Task index of position `i` (not logged).
    pub fn id(&self, i: usize) -> usize {
        self.items[self.visible[i]].0
    }

    pub fn ids(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.id(i)).collect()
    }

    /// View of the given positions sharing this pool's access log.
    pub fn subset(&self, positions: &[usize]) -> Self {
        Self {
            items: Arc::clone(&self.items),
            visible: positions.iter().map(|&p| self.visible[p]).collect(),
            log: Arc::clone(&self.log),
        }
    }

    /// Distinct task indices read so far.
    pub fn accessed(&self) -> BTreeSet<usize> {
        self.log.lock().expect("log lock").clone()
    }
}

/// Result of fine-tuning.
#[derive(Debug, Clone)]
pub struct Finetuned {
    pub state: ModelState,
    /// Task indices of the sampled shots.
    pub shot_ids: Vec<usize>,
}

/// Sample exactly `shots` scenes once and adapt on them for `steps`
/// iterations. `theta` is not modified.
pub fn finetune<L: Learner<Pool = ScenePool>>(
    learner: &L,
    theta: &ModelState,
    pool: &ScenePool,
    shots: usize,
    steps: usize,
    inner: &InnerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Finetuned> {
    if shots == 0 || pool.len() < shots {
        return Err(MigsError::Contract(format!(
            "cannot draw {shots} shots from a pool of {}",
            pool.len()
        )));
    }
    let mut positions = sample(rng, pool.len(), shots).into_vec();
    positions.sort_unstable();
    let sub = pool.subset(&positions);
    let cfg = InnerConfig { k: steps, ..*inner };
    let state = inner_adapt(learner, theta, &sub, &cfg, rng)?;
    Ok(Finetuned {
        state,
        shot_ids: sub.ids(),
    })
}

/// Reference learner on `f_c(θ) = ½‖θ − c‖²`, where the pool is the centre
/// `c`. Parameters live under `"theta"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticLearner;

impl QuadraticLearner {
    pub fn init(theta: &[f64]) -> ModelState {
        let mut s = ModelState::new();
        s.insert(
            "theta",
            Tensor::new(&[theta.len()], theta.to_vec()),
            ParamKind::Trainable,
        );
        s
    }
}

impl Learner for QuadraticLearner {
    type Pool = [f64];

    fn groups(&self) -> Vec<String> {
        vec!["theta".into()]
    }

    fn step(
        &self,
        state: &mut ModelState,
        opts: &mut Optimizers,
        centre: &[f64],
        _rng: &mut ChaCha8Rng,
    ) -> Result<StepReport> {
        let theta = state.tensor("theta").clone();
        let grad = Tensor::from_fn(theta.shape(), |i| theta.data()[i] - centre[i]);
        let loss = 0.5 * grad.data().iter().map(|g| g * g).sum::<f64>();
        opts.step(
            "theta",
            state,
            &BTreeMap::from([("theta".to_string(), grad)]),
        )?;
        Ok(StepReport {
            breakdown: LossBreakdown {
                total_g: loss,
                ..Default::default()
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd(k: usize, lr: f64) -> InnerConfig {
        InnerConfig {
            k,
            lr,
            optimizer: OptimizerKind::Sgd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_inner_steps_is_identity() {
        let theta = QuadraticLearner::init(&[0.25, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = inner_adapt(
            &QuadraticLearner,
            &theta,
            &[1.0, 1.0][..],
            &sgd(0, 0.1),
            &mut rng,
        )
        .unwrap();
        assert_eq!(a, theta);
    }

    #[test]
    fn one_sgd_step_on_scalar_quadratic() {
        let theta = QuadraticLearner::init(&[1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = inner_adapt(
            &QuadraticLearner,
            &theta,
            &[3.0][..],
            &sgd(1, 0.1),
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.tensor("theta").item(), 1.2f32 as f64);
        assert_eq!(theta.tensor("theta").item(), 1.0);
    }

    #[test]
    fn reptile_identities() {
        let theta = QuadraticLearner::init(&[1.0, 1.0]);
        let a = QuadraticLearner::init(&[3.0, 1.0]);
        let b = QuadraticLearner::init(&[1.0, 3.0]);
        assert_eq!(reptile_step(&theta, std::slice::from_ref(&a), 1.0).unwrap(), a);
        assert_eq!(
            reptile_step(&theta, &[a.clone(), b.clone()], 0.0).unwrap(),
            theta
        );
        let avg = reptile_step(&theta, &[a, b], 0.5).unwrap();
        assert_eq!(avg.tensor("theta").data(), &[1.5, 1.5]);
    }

    #[test]
    fn reptile_rejects_name_mismatch() {
        let theta = QuadraticLearner::init(&[1.0]);
        let mut other = ModelState::new();
        other.insert("phi", Tensor::scalar(1.0), ParamKind::Trainable);
        assert!(matches!(
            reptile_step(&theta, &[other], 1.0),
            Err(MigsError::Contract(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let theta = QuadraticLearner::init(&[1.0]);
        let outer = OuterConfig {
            iterations: 5,
            divergence_bound: 1e-3,
            ..Default::default()
        };
        let pools: Vec<&[f64]> = vec![&[100.0]];
        let r = meta_train(
            &QuadraticLearner,
            theta,
            &pools,
            &sgd(2, 0.1),
            &outer,
            &mut TrainRngs::new(0),
            0,
            None,
            |_, _, _, _| Ok(()),
        );
        assert!(matches!(r, Err(MigsError::Diverged { at: 0, .. })));
    }
}
