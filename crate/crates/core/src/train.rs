//! SGD training with per-example perturbation, clean evaluation, grid
//! search over `(p, sigma)`, multi-seed experiments and training-fraction
//! sweeps.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::{split_cv, split_holdout, subsample, Dataset};
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::model::{self, ClassifierParams, ModelSpec};
use crate::perturb::{make_perturbation, FlipOrder, PerturbConfig, Phase, Strategy};
use crate::seed::{derive_seed, rng_from_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.5,
            batch_size: 16,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss on the perturbed training inputs.
    pub train_loss: f64,
    /// Clean accuracy on the training set after the epoch.
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ClassifierParams,
    pub embeddings: EmbeddingMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Best dev accuracy over epochs.
    pub dev_metric: f64,
    /// Test accuracy of the best-dev snapshot, when a test set was given.
    pub test_metric: Option<f64>,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
    pub perturb: PerturbConfig,
    pub config: TrainConfig,
    /// Parameters at the best dev epoch.
    pub model: TrainedModel,
}

/// Clean accuracy; draws no randomness.
pub fn evaluate(params: &ClassifierParams, emb: &EmbeddingMatrix, dataset: &Dataset) -> Result<f64> {
    let preds = predictions(params, emb, dataset)?;
    let correct = preds
        .iter()
        .zip(&dataset.examples)
        .filter(|(p, ex)| **p == ex.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Predicted class per example, computed on unperturbed inputs.
pub fn predictions(
    params: &ClassifierParams,
    emb: &EmbeddingMatrix,
    dataset: &Dataset,
) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset
        .examples
        .iter()
        .map(|ex| model::predict(params, &emb.lookup(&ex.tokens)?.values))
        .collect()
}

/// Accuracy with the inputs routed through `cfg` in the evaluation phase,
/// where every strategy is the identity.
pub fn evaluate_with(
    params: &ClassifierParams,
    emb: &EmbeddingMatrix,
    dataset: &Dataset,
    cfg: &PerturbConfig,
) -> Result<f64> {
    let cfg = cfg.for_phase(Phase::Eval);
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut unused = rng_from_seed(0);
    let mut correct = 0usize;
    for ex in &dataset.examples {
        let input = make_perturbation(
            &cfg,
            emb,
            &ex.tokens,
            |_| Err(Error::invalid("phase", "no gradients during evaluation")),
            &mut unused,
        )?
        .input;
        if model::predict(params, &input)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Sets evaluated after every epoch.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub dev: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

/// Trains one model with plain mini-batch SGD.
///
/// Each step perturbs every example in the batch with a fresh draw,
/// averages the perturbed-loss gradients, and updates parameters and (when
/// trainable) the embedding rows that were looked up. The perturbation
/// mask is treated as a constant of the update. Shuffling and noise use
/// separate streams derived from `cfg.seed`.
pub fn train_one(
    train: &Dataset,
    eval: EvalSets<'_>,
    model_init: ClassifierParams,
    emb: EmbeddingMatrix,
    perturb: &PerturbConfig,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    perturb.validate()?;
    if train.is_empty() || eval.dev.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if emb.dim() != model_init.input_dim() {
        return Err(Error::invalid("embeddings", "dimension differs from the model input"));
    }

    let mut params = model_init;
    let mut emb = emb;
    let mut shuffle_rng = rng_from_seed(derive_seed(cfg.seed, Stream::Shuffle, 0));
    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, Stream::Noise, 0));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, TrainedModel)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = params.zeros_like();
            let mut emb_grads = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &train.examples[i];
                // non-finite weights surface as NonFinite inside the model
                let diverged = |e: Error| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                };
                let pert = make_perturbation(
                    perturb,
                    &emb,
                    &ex.tokens,
                    |x| Ok(model::loss_and_grads(&params, x, ex.label)?.2),
                    &mut noise_rng,
                )
                .map_err(diverged)?;
                let (loss, g, dx) =
                    model::loss_and_grads(&params, &pert.input, ex.label).map_err(diverged)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss });
                }
                loss_sum += loss;
                grad.add_scaled(1.0, &g);
                if emb.trainable() {
                    emb_grads.push((pert.grad_to_embeddings(&dx), pert.tokens));
                }
            }
            let rate = cfg.lr / batch.len() as f64;
            params.add_scaled(-rate, &grad);
            for (g, tokens) in &emb_grads {
                emb.accumulate_update(tokens, g, rate)?;
            }
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
        }

        let dev_accuracy = evaluate(&params, &emb, eval.dev)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: evaluate(&params, &emb, train)?,
            dev_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| dev_accuracy > *acc) {
            best = Some((
                epoch,
                dev_accuracy,
                TrainedModel {
                    params: params.clone(),
                    embeddings: emb.clone(),
                },
            ));
        }
    }

    let (best_epoch, dev_metric, model) = best.expect("epochs >= 1");
    let test_metric = eval
        .test
        .map(|t| evaluate(&model.params, &model.embeddings, t))
        .transpose()?;
    Ok(RunResult {
        dev_metric,
        test_metric,
        best_epoch,
        history,
        perturb: *perturb,
        config: *cfg,
        model,
    })
}

/// Hyperparameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub p_values: Vec<f64>,
    pub sigma_values: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            p_values: vec![0.7, 0.8, 0.9, 0.95],
            sigma_values: vec![0.001, 0.01, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub p: f64,
    pub sigma: f64,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if self.p_values.is_empty() || self.sigma_values.is_empty() {
            return Err(Error::invalid("grid", "grid must be nonempty"));
        }
        for &p in &self.p_values {
            PerturbConfig::new(Strategy::None, p, 0.0)?;
        }
        for &s in &self.sigma_values {
            PerturbConfig::new(Strategy::None, 1.0, s)?;
        }
        Ok(())
    }

    /// Points searched for `strategy`. Unused hyperparameters are fixed at
    /// `p = 1`, `sigma = 0`.
    pub fn points(&self, strategy: Strategy) -> Vec<GridPoint> {
        if strategy.uses_p() {
            self.p_values.iter().map(|&p| GridPoint { p, sigma: 0.0 }).collect()
        } else if strategy.uses_sigma() {
            self.sigma_values
                .iter()
                .map(|&sigma| GridPoint { p: 1.0, sigma })
                .collect()
        } else {
            vec![GridPoint { p: 1.0, sigma: 0.0 }]
        }
    }
}

/// How the development signal is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DevSplit {
    /// Stratified hold-out of this fraction of the training portion.
    Holdout(f64),
    /// k-fold cross-validation over the training portion.
    CrossValidation(usize),
}

/// Source of the initial embedding matrix for each run.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingInit {
    /// Fresh uniform matrix per run.
    Random {
        vocab_size: usize,
        dim: usize,
        scale: f64,
    },
    /// A fixed starting matrix (e.g. loaded vectors), copied per run.
    Fixed(EmbeddingMatrix),
}

impl EmbeddingInit {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingInit::Random { dim, .. } => *dim,
            EmbeddingInit::Fixed(m) => m.dim(),
        }
    }

    fn build(&self, seed: u64, trainable: bool) -> Result<EmbeddingMatrix> {
        let mut m = match self {
            EmbeddingInit::Random {
                vocab_size,
                dim,
                scale,
            } => EmbeddingMatrix::init_random(*vocab_size, *dim, *scale, seed)?,
            EmbeddingInit::Fixed(m) => m.clone(),
        };
        m.set_trainable(trainable);
        Ok(m)
    }
}

/// Everything that defines an experiment apart from the data and the
/// strategy list.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub embeddings: EmbeddingInit,
    pub freeze_embeddings: bool,
    pub test_fraction: f64,
    pub dev: DevSplit,
    pub grid: Grid,
    pub runs_per_point: usize,
    pub n_runs: usize,
    pub flip_order: FlipOrder,
}

impl Protocol {
    pub fn new(embeddings: EmbeddingInit) -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelSpec::default(),
            embeddings,
            freeze_embeddings: false,
            test_fraction: 0.2,
            dev: DevSplit::Holdout(0.2),
            grid: Grid::default(),
            runs_per_point: 2,
            n_runs: 5,
            flip_order: FlipOrder::Ascending,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.grid.validate()?;
        if self.n_runs == 0 {
            return Err(Error::invalid("runs", "must be >= 1"));
        }
        if self.runs_per_point == 0 {
            return Err(Error::invalid("runs_per_point", "must be >= 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction", "must be in (0, 1)"));
        }
        match self.dev {
            DevSplit::Holdout(f) if !(f > 0.0 && f < 1.0) => {
                Err(Error::invalid("dev_fraction", "must be in (0, 1)"))
            }
            DevSplit::CrossValidation(k) if k < 2 => Err(Error::invalid("cv_folds", "must be >= 2")),
            _ => Ok(()),
        }
    }

    fn perturb_config(&self, strategy: Strategy, point: GridPoint) -> Result<PerturbConfig> {
        Ok(PerturbConfig::new(strategy, point.p, point.sigma)?.with_flip_order(self.flip_order))
    }

    /// One full training run under `run_seed`.
    pub fn run(
        &self,
        fold: &Fold,
        test: Option<&Dataset>,
        perturb: &PerturbConfig,
        run_seed: u64,
    ) -> Result<RunResult> {
        let num_classes = fold.train.num_classes;
        let params = ClassifierParams::init(
            &self.model,
            self.embeddings.dim(),
            num_classes,
            derive_seed(run_seed, Stream::ModelInit, 0),
        )?;
        let emb = self.embeddings.build(
            derive_seed(run_seed, Stream::EmbeddingInit, 0),
            !self.freeze_embeddings,
        )?;
        let cfg = TrainConfig {
            seed: run_seed,
            ..self.train
        };
        train_one(
            &fold.train,
            EvalSets {
                dev: &fold.dev,
                test,
            },
            params,
            emb,
            perturb,
            &cfg,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub train: Dataset,
    pub dev: Dataset,
}

/// Fixed data partition shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub folds: Vec<Fold>,
    pub test: Dataset,
}

impl PreparedData {
    /// Splits off a stratified test set, then a dev hold-out or CV folds
    /// from the remainder. Depends only on the base seed.
    pub fn prepare(dataset: &Dataset, protocol: &Protocol) -> Result<Self> {
        let base = protocol.train.seed;
        let (rest, test) = split_holdout(
            dataset,
            protocol.test_fraction,
            derive_seed(base, Stream::Split, 0),
        )?;
        let folds = match protocol.dev {
            DevSplit::Holdout(f) => {
                let (train, dev) = split_holdout(&rest, f, derive_seed(base, Stream::Split, 1))?;
                vec![Fold { train, dev }]
            }
            DevSplit::CrossValidation(k) => split_cv(&rest, k, derive_seed(base, Stream::Split, 1))?
                .into_iter()
                .map(|(train, dev)| Fold { train, dev })
                .collect(),
        };
        Ok(Self { folds, test })
    }

    /// Same partition with every training part subsampled to `fraction`.
    pub fn with_train_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        let folds = self
            .folds
            .iter()
            .enumerate()
            .map(|(i, f)| {
                Ok(Fold {
                    train: subsample(&f.train, fraction, derive_seed(seed, Stream::Subsample, i as u64))?,
                    dev: f.dev.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            folds,
            test: self.test.clone(),
        })
    }

    pub fn train_size(&self) -> usize {
        self.folds[0].train.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub point: GridPoint,
    pub mean_dev: f64,
    /// One value per (run, fold), run-major.
    pub dev_metrics: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub best: GridPoint,
    pub table: Vec<GridEntry>,
}

/// Picks the grid point with the best mean dev accuracy over
/// `runs_per_point` seeded runs (and all folds). Ties go to larger `p`,
/// then smaller `sigma`. Every point sees the same run seeds.
pub fn grid_search(
    data: &PreparedData,
    strategy: Strategy,
    protocol: &Protocol,
) -> Result<GridSearch> {
    protocol.validate()?;
    let points = protocol.grid.points(strategy);
    let base = protocol.train.seed;
    let jobs: Vec<(usize, usize, usize)> = (0..points.len())
        .flat_map(|pi| {
            (0..protocol.runs_per_point)
                .flat_map(move |r| (0..data.folds.len()).map(move |f| (pi, r, f)))
        })
        .collect();
    let metrics: Vec<f64> = jobs
        .par_iter()
        .map(|&(pi, r, f)| {
            let cfg = protocol.perturb_config(strategy, points[pi])?;
            let seed = derive_seed(base, Stream::GridRun, r as u64);
            Ok(protocol.run(&data.folds[f], None, &cfg, seed)?.dev_metric)
        })
        .collect::<Result<_>>()?;

    let per_point = protocol.runs_per_point * data.folds.len();
    let table: Vec<GridEntry> = points
        .iter()
        .zip(metrics.chunks(per_point))
        .map(|(&point, m)| GridEntry {
            point,
            mean_dev: mean(m),
            dev_metrics: m.to_vec(),
        })
        .collect();

    let best = table
        .iter()
        .max_by(|a, b| {
            a.mean_dev
                .total_cmp(&b.mean_dev)
                .then(a.point.p.total_cmp(&b.point.p))
                .then(b.point.sigma.total_cmp(&a.point.sigma))
        })
        .expect("grid is nonempty")
        .point;
    Ok(GridSearch { best, table })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Aggregated test results for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub chosen: GridPoint,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n_runs: usize,
    pub test_metrics: Vec<f64>,
    pub grid: Vec<GridEntry>,
}

impl StrategyRow {
    fn from_metrics(strategy: Strategy, search: GridSearch, test_metrics: Vec<f64>) -> Self {
        Self {
            strategy,
            chosen: search.best,
            mean: mean(&test_metrics),
            std: std_dev(&test_metrics),
            min: test_metrics.iter().copied().fold(f64::INFINITY, f64::min),
            max: test_metrics.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n_runs: test_metrics.len(),
            test_metrics,
            grid: search.table,
        }
    }
}

/// Baseline first, then the requested strategies in order, without
/// duplicates.
pub fn normalize_strategies(strategies: &[Strategy]) -> Vec<Strategy> {
    let mut out = vec![Strategy::None];
    for &s in strategies {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Test accuracies of `n_runs` runs at a fixed configuration. Run `k`
/// uses `hash(base_seed, k)` and fold `k mod folds`.
pub fn test_runs(
    data: &PreparedData,
    cfg: &PerturbConfig,
    protocol: &Protocol,
) -> Result<Vec<f64>> {
    let base = protocol.train.seed;
    (0..protocol.n_runs)
        .into_par_iter()
        .map(|k| {
            let fold = &data.folds[k % data.folds.len()];
            let seed = derive_seed(base, Stream::TestRun, k as u64);
            let result = protocol.run(fold, Some(&data.test), cfg, seed)?;
            Ok(result.test_metric.expect("test set supplied"))
        })
        .collect()
}

/// Grid search plus `n_runs` test evaluations for each strategy; calls
/// `on_row` as each strategy completes.
pub fn run_experiment_with<F>(
    data: &PreparedData,
    strategies: &[Strategy],
    protocol: &Protocol,
    mut on_row: F,
) -> Result<Vec<StrategyRow>>
where
    F: FnMut(&StrategyRow),
{
    protocol.validate()?;
    let mut rows = Vec::new();
    for strategy in normalize_strategies(strategies) {
        let search = grid_search(data, strategy, protocol)?;
        let cfg = protocol.perturb_config(strategy, search.best)?;
        let metrics = test_runs(data, &cfg, protocol)?;
        let row = StrategyRow::from_metrics(strategy, search, metrics);
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn run_experiment(
    dataset: &Dataset,
    strategies: &[Strategy],
    protocol: &Protocol,
) -> Result<Vec<StrategyRow>> {
    let data = PreparedData::prepare(dataset, protocol)?;
    run_experiment_with(&data, strategies, protocol, |_| {})
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub fraction: f64,
    pub train_size: usize,
    pub rows: Vec<StrategyRow>,
}

/// Full experiment at each training fraction. Dev and test sets stay
/// fixed; only the training part is subsampled.
pub fn fraction_sweep(
    dataset: &Dataset,
    strategies: &[Strategy],
    fractions: &[f64],
    protocol: &Protocol,
) -> Result<Vec<SweepPoint>> {
    if fractions.is_empty() {
        return Err(Error::invalid("fractions", "need at least one fraction"));
    }
    if let Some(&bad) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::invalid("fractions", format!("{bad} not in (0, 1]")));
    }
    let full = PreparedData::prepare(dataset, protocol)?;
    let mut sorted = fractions.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted
        .into_iter()
        .map(|fraction| {
            let data = full.with_train_fraction(fraction, protocol.train.seed)?;
            let rows = run_experiment_with(&data, strategies, protocol, |_| {})?;
            Ok(SweepPoint {
                fraction,
                train_size: data.train_size(),
                rows,
            })
        })
        .collect()
}
