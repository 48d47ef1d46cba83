//! Multiplicative noise masks over embedded sequences and the seven
//! perturbation strategies built from them.
//!
//! Every strategy except word dropout is expressed as an `l x d` mask `e`
//! applied elementwise to the embedded sentence. Binary masks carry their
//! keep probability and are applied with inverted-dropout scaling `1/p`.
//! The adversarial variants take one normalized gradient-ascent step on `e`
//! (or a budgeted set of sign-consistent flips when `e` must stay binary).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::corpus::UNK;
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    None,
    Gaussian,
    Bernoulli,
    Adversarial,
    WordDropout,
    SemanticDropout,
    GaussianAdv,
    BernoulliAdv,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::None,
        Strategy::Gaussian,
        Strategy::Bernoulli,
        Strategy::Adversarial,
        Strategy::WordDropout,
        Strategy::SemanticDropout,
        Strategy::GaussianAdv,
        Strategy::BernoulliAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Gaussian => "gaussian",
            Strategy::Bernoulli => "bernoulli",
            Strategy::Adversarial => "adversarial",
            Strategy::WordDropout => "word_dropout",
            Strategy::SemanticDropout => "semantic_dropout",
            Strategy::GaussianAdv => "gaussian_adv",
            Strategy::BernoulliAdv => "bernoulli_adv",
        }
    }

    /// Whether the keep probability is a hyperparameter of this strategy.
    pub fn uses_p(self) -> bool {
        matches!(
            self,
            Strategy::Bernoulli
                | Strategy::WordDropout
                | Strategy::SemanticDropout
                | Strategy::BernoulliAdv
        )
    }

    /// Whether sigma (noise std or step size) is a hyperparameter.
    pub fn uses_sigma(self) -> bool {
        matches!(
            self,
            Strategy::Gaussian | Strategy::Adversarial | Strategy::GaussianAdv
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid("strategy", format!("unknown strategy {s:?}")))
    }
}

/// Visiting order of units in adversarial dropout, by `|g|`.
///
/// `Ascending` is the default. With a budget of `l*d*(1-p)` flips,
/// largest-first flipping strips most of the class evidence from a short
/// sentence, and training on the toy corpus collapses to chance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlipOrder {
    Descending,
    #[default]
    Ascending,
}

impl FromStr for FlipOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descending" => Ok(FlipOrder::Descending),
            "ascending" => Ok(FlipOrder::Ascending),
            _ => Err(Error::invalid("flip_order", format!("unknown order {s:?}"))),
        }
    }
}

impl fmt::Display for FlipOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlipOrder::Descending => "descending",
            FlipOrder::Ascending => "ascending",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbConfig {
    pub strategy: Strategy,
    /// Keep probability in `(0, 1]`.
    pub p: f64,
    /// Noise std / adversarial step size, `>= 0`.
    pub sigma: f64,
    pub flip_order: FlipOrder,
}

/// Training or evaluation; noise only exists in the former.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("p", format!("{p} not in (0, 1]")))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("sigma", format!("{sigma} must be finite and >= 0")))
    }
}

impl PerturbConfig {
    pub fn new(strategy: Strategy, p: f64, sigma: f64) -> Result<Self> {
        check_p(p)?;
        check_sigma(sigma)?;
        Ok(Self {
            strategy,
            p,
            sigma,
            flip_order: FlipOrder::default(),
        })
    }

    pub fn none() -> Self {
        Self {
            strategy: Strategy::None,
            p: 1.0,
            sigma: 0.0,
            flip_order: FlipOrder::default(),
        }
    }

    pub fn with_flip_order(mut self, order: FlipOrder) -> Self {
        self.flip_order = order;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        check_sigma(self.sigma)
    }

    /// The configuration actually in force during `phase`.
    pub fn for_phase(&self, phase: Phase) -> Self {
        match phase {
            Phase::Train => *self,
            Phase::Eval => Self::none(),
        }
    }

    /// True when the strategy provably leaves the input untouched, in
    /// which case no randomness is drawn and no gradient is requested.
    pub fn is_identity(&self) -> bool {
        match self.strategy {
            Strategy::None => true,
            Strategy::Gaussian | Strategy::Adversarial | Strategy::GaussianAdv => self.sigma == 0.0,
            Strategy::Bernoulli
            | Strategy::WordDropout
            | Strategy::SemanticDropout
            | Strategy::BernoulliAdv => self.p == 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    Continuous,
    Binary { keep_prob: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMask {
    pub values: Array2<f64>,
    pub kind: MaskKind,
}

impl NoiseMask {
    pub fn ones(l: usize, d: usize) -> Self {
        Self {
            values: Array2::ones((l, d)),
            kind: MaskKind::Continuous,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Multiplier applied on top of `values`: `1/p` for binary masks.
    pub fn scale(&self) -> f64 {
        match self.kind {
            MaskKind::Continuous => 1.0,
            MaskKind::Binary { keep_prob } => 1.0 / keep_prob,
        }
    }

    /// `values * scale`, the factor each embedding unit is multiplied by.
    pub fn effective(&self) -> Array2<f64> {
        let s = self.scale();
        self.values.mapv(|v| v * s)
    }
}

fn check_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape { expected, found })
    }
}

/// Entries i.i.d. `N(1, sigma^2)`.
pub fn gaussian_mask(l: usize, d: usize, sigma: f64, rng: &mut Rng) -> Result<NoiseMask> {
    check_sigma(sigma)?;
    let values = Array2::from_shape_simple_fn((l, d), || {
        let z: f64 = rng.sample(StandardNormal);
        1.0 + sigma * z
    });
    Ok(NoiseMask {
        values,
        kind: MaskKind::Continuous,
    })
}

fn keep(rng: &mut Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Entries i.i.d. Bernoulli(`p`), applied with scale `1/p`.
pub fn bernoulli_mask(l: usize, d: usize, p: f64, rng: &mut Rng) -> Result<NoiseMask> {
    check_p(p)?;
    let values = Array2::from_shape_simple_fn((l, d), || if keep(rng, p) { 1.0 } else { 0.0 });
    Ok(NoiseMask {
        values,
        kind: MaskKind::Binary { keep_prob: p },
    })
}

/// Replaces each index with [`UNK`] with probability `1 - p`. No rescaling.
pub fn word_dropout(tokens: &[usize], p: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    check_p(p)?;
    Ok(word_dropout_unchecked(tokens, p, rng))
}

pub(crate) fn word_dropout_unchecked(tokens: &[usize], p: f64, rng: &mut Rng) -> Vec<usize> {
    tokens
        .iter()
        .map(|&t| if keep(rng, p) { t } else { UNK })
        .collect()
}

/// One Bernoulli(`p`) decision per embedding dimension, shared by every
/// row; applied with scale `1/p`.
pub fn semantic_mask(l: usize, d: usize, p: f64, rng: &mut Rng) -> Result<NoiseMask> {
    check_p(p)?;
    let columns: Vec<f64> = (0..d).map(|_| if keep(rng, p) { 1.0 } else { 0.0 }).collect();
    let values = Array2::from_shape_fn((l, d), |(_, j)| columns[j]);
    Ok(NoiseMask {
        values,
        kind: MaskKind::Binary { keep_prob: p },
    })
}

/// `e + sigma * g / ||g||_F`; returns the mask unchanged when `g == 0`.
pub fn adversarial_step(mask: &NoiseMask, grad_e: &Array2<f64>, sigma: f64) -> Result<NoiseMask> {
    check_shape(mask.dim(), grad_e.dim())?;
    check_sigma(sigma)?;
    if grad_e.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("mask gradient"));
    }
    let norm = grad_e.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(mask.clone());
    }
    let mut values = mask.values.clone();
    let step = sigma / norm;
    Zip::from(&mut values)
        .and(grad_e)
        .for_each(|e, &g| *e += step * g);
    Ok(NoiseMask {
        values,
        kind: MaskKind::Continuous,
    })
}

/// `floor(units * (1 - p))`, snapped to the nearest integer when the
/// product is within rounding error of one.
pub fn flip_budget(units: usize, p: f64) -> usize {
    let x = units as f64 * (1.0 - p);
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r.max(0.0) as usize
    } else {
        x.floor().max(0.0) as usize
    }
}

/// Flips binary mask units to increase the loss to first order.
///
/// Units are visited by `|g|` in `order` (ties by row-major position). A
/// kept unit with `g < 0` is dropped, a dropped unit with `g > 0` is
/// restored; everything else is skipped. Stops after
/// [`flip_budget`]`(l*d, p)` flips.
pub fn adversarial_dropout(
    mask: &NoiseMask,
    grad_e: &Array2<f64>,
    p: f64,
    order: FlipOrder,
) -> Result<NoiseMask> {
    let budget = flip_budget(mask.values.len(), p);
    adversarial_dropout_with_budget(mask, grad_e, p, order, budget)
}

/// [`adversarial_dropout`] with an explicit flip budget.
pub fn adversarial_dropout_with_budget(
    mask: &NoiseMask,
    grad_e: &Array2<f64>,
    p: f64,
    order: FlipOrder,
    budget: usize,
) -> Result<NoiseMask> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("p", format!("{p} not in (0, 1)")));
    }
    check_shape(mask.dim(), grad_e.dim())?;
    if mask.values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask", "adversarial dropout needs a binary mask"));
    }
    if grad_e.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("mask gradient"));
    }

    let d = mask.values.ncols();
    let grads: Vec<f64> = grad_e.iter().copied().collect();
    let mut order_idx: Vec<usize> = (0..grads.len()).collect();
    match order {
        FlipOrder::Descending => {
            order_idx.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()).then(a.cmp(&b)))
        }
        FlipOrder::Ascending => {
            order_idx.sort_by(|&a, &b| grads[a].abs().total_cmp(&grads[b].abs()).then(a.cmp(&b)))
        }
    }

    let mut values = mask.values.clone();
    let mut flips = 0;
    for idx in order_idx {
        if flips >= budget {
            break;
        }
        let (i, j) = (idx / d, idx % d);
        let g = grads[idx];
        let e = &mut values[[i, j]];
        if *e == 1.0 && g < 0.0 {
            *e = 0.0;
            flips += 1;
        } else if *e == 0.0 && g > 0.0 {
            *e = 1.0;
            flips += 1;
        }
    }
    Ok(NoiseMask {
        values,
        kind: MaskKind::Binary { keep_prob: p },
    })
}

/// `x ⊙ e`, times `1/p` for binary masks.
pub fn apply_mask(x: &Array2<f64>, mask: &NoiseMask) -> Result<Array2<f64>> {
    check_shape(x.dim(), mask.dim())?;
    let s = mask.scale();
    let mut out = x.clone();
    Zip::from(&mut out)
        .and(&mask.values)
        .for_each(|o, &e| *o *= e * s);
    Ok(out)
}

/// Gradient of the loss with respect to the mask, given the gradient with
/// respect to the perturbed input `scale * x ⊙ e`:
/// `dL/de = scale * grad_input ⊙ x`.
pub fn grad_wrt_mask(x: &Array2<f64>, grad_input: &Array2<f64>, scale: f64) -> Result<Array2<f64>> {
    check_shape(x.dim(), grad_input.dim())?;
    let mut out = grad_input.clone();
    Zip::from(&mut out).and(x).for_each(|g, &xv| *g *= xv * scale);
    Ok(out)
}

/// Output of [`make_perturbation`].
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    /// Token indices after word dropout (otherwise the originals).
    pub tokens: Vec<usize>,
    /// Embedding lookup of `tokens`.
    pub clean: Array2<f64>,
    /// Model input.
    pub input: Array2<f64>,
    /// `d input / d clean`, elementwise; `None` means identity.
    pub multiplier: Option<Array2<f64>>,
}

impl Perturbed {
    /// Chain rule from the model input back to the looked-up rows.
    pub fn grad_to_embeddings(&self, grad_input: &Array2<f64>) -> Array2<f64> {
        match &self.multiplier {
            None => grad_input.clone(),
            Some(m) => grad_input * m,
        }
    }
}

fn masked(tokens: Vec<usize>, clean: Array2<f64>, mask: &NoiseMask) -> Result<Perturbed> {
    let input = apply_mask(&clean, mask)?;
    Ok(Perturbed {
        tokens,
        clean,
        input,
        multiplier: Some(mask.effective()),
    })
}

/// Produces the training input for one example under `cfg`.
///
/// `loss_grad` returns the gradient of the loss with respect to a given
/// model input; it is only called by the adversarial strategies. Identity
/// configurations draw nothing from `rng`.
pub fn make_perturbation<F>(
    cfg: &PerturbConfig,
    emb: &EmbeddingMatrix,
    tokens: &[usize],
    mut loss_grad: F,
    rng: &mut Rng,
) -> Result<Perturbed>
where
    F: FnMut(&Array2<f64>) -> Result<Array2<f64>>,
{
    cfg.validate()?;
    if cfg.is_identity() {
        let clean = emb.lookup(tokens)?.values;
        return Ok(Perturbed {
            tokens: tokens.to_vec(),
            input: clean.clone(),
            clean,
            multiplier: None,
        });
    }

    if cfg.strategy == Strategy::WordDropout {
        let dropped = word_dropout(tokens, cfg.p, rng)?;
        let clean = emb.lookup(&dropped)?.values;
        return Ok(Perturbed {
            tokens: dropped,
            input: clean.clone(),
            clean,
            multiplier: None,
        });
    }

    let clean = emb.lookup(tokens)?.values;
    let (l, d) = clean.dim();
    let tokens = tokens.to_vec();
    match cfg.strategy {
        Strategy::None | Strategy::WordDropout => unreachable!("handled above"),
        Strategy::Gaussian => {
            let mask = gaussian_mask(l, d, cfg.sigma, rng)?;
            masked(tokens, clean, &mask)
        }
        Strategy::Bernoulli => {
            let mask = bernoulli_mask(l, d, cfg.p, rng)?;
            masked(tokens, clean, &mask)
        }
        Strategy::SemanticDropout => {
            let mask = semantic_mask(l, d, cfg.p, rng)?;
            masked(tokens, clean, &mask)
        }
        Strategy::Adversarial => {
            let start = NoiseMask::ones(l, d);
            let g = grad_wrt_mask(&clean, &loss_grad(&clean)?, 1.0)?;
            let mask = adversarial_step(&start, &g, cfg.sigma)?;
            masked(tokens, clean, &mask)
        }
        Strategy::GaussianAdv => {
            let start = gaussian_mask(l, d, cfg.sigma, rng)?;
            let grad_input = loss_grad(&apply_mask(&clean, &start)?)?;
            let g = grad_wrt_mask(&clean, &grad_input, start.scale())?;
            let mask = adversarial_step(&start, &g, cfg.sigma)?;
            masked(tokens, clean, &mask)
        }
        Strategy::BernoulliAdv => {
            let start = bernoulli_mask(l, d, cfg.p, rng)?;
            let grad_input = loss_grad(&apply_mask(&clean, &start)?)?;
            let g = grad_wrt_mask(&clean, &grad_input, start.scale())?;
            let mask = adversarial_dropout(&start, &g, cfg.p, cfg.flip_order)?;
            masked(tokens, clean, &mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use ndarray::array;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn binary(values: Array2<f64>, p: f64) -> NoiseMask {
        NoiseMask {
            values,
            kind: MaskKind::Binary { keep_prob: p },
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("dropout".parse::<Strategy>().is_err());
    }

    #[test]
    fn gaussian_degenerate_and_deterministic() {
        let m = gaussian_mask(3, 4, 0.0, &mut rng_from_seed(1)).unwrap();
        assert!(m.values.iter().all(|&v| v == 1.0));
        let a = gaussian_mask(3, 4, 0.1, &mut rng_from_seed(7)).unwrap();
        let b = gaussian_mask(3, 4, 0.1, &mut rng_from_seed(7)).unwrap();
        assert_eq!(a, b);
        assert!(gaussian_mask(1, 1, -0.1, &mut rng_from_seed(7)).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let m = gaussian_mask(1000, 100, 0.1, &mut rng_from_seed(11)).unwrap();
        let n = m.values.len() as f64;
        let mean = m.values.sum() / n;
        let var = m.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 1.0).abs() < 0.002, "mean {mean}");
        assert!((var - 0.01).abs() < 0.001, "var {var}");
    }

    #[test]
    fn bernoulli_values() {
        let m = bernoulli_mask(4, 5, 1.0, &mut rng_from_seed(2)).unwrap();
        assert!(m.effective().iter().all(|&v| v == 1.0));
        let m = bernoulli_mask(40, 50, 0.8, &mut rng_from_seed(2)).unwrap();
        assert!(m.effective().iter().all(|&v| v == 0.0 || v == 1.25));
        let big = bernoulli_mask(1000, 100, 0.8, &mut rng_from_seed(3)).unwrap();
        let kept = big.values.sum() / big.values.len() as f64;
        assert!((kept - 0.8).abs() < 0.004, "kept {kept}");
        assert!(bernoulli_mask(1, 1, 0.0, &mut rng_from_seed(2)).is_err());
    }

    #[test]
    fn word_dropout_cases() {
        let toks = vec![3, 1, 4, 1];
        assert_eq!(word_dropout(&toks, 1.0, &mut rng_from_seed(0)).unwrap(), toks);
        assert_eq!(
            word_dropout(&toks, 1e-9, &mut rng_from_seed(0)).unwrap(),
            vec![0, 0, 0, 0]
        );
        assert_eq!(word_dropout_unchecked(&toks, 0.0, &mut rng_from_seed(0)), vec![0; 4]);
        let long: Vec<usize> = vec![5; 100_000];
        let out = word_dropout(&long, 0.9, &mut rng_from_seed(4)).unwrap();
        let frac = out.iter().filter(|&&t| t == UNK).count() as f64 / 1e5;
        assert!((frac - 0.1).abs() < 0.003, "unk fraction {frac}");
        assert!(word_dropout(&toks, 0.0, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn semantic_mask_drops_columns() {
        let m = semantic_mask(6, 5, 1.0, &mut rng_from_seed(0)).unwrap();
        assert!(m.values.iter().all(|&v| v == 1.0));
        let mut rng = rng_from_seed(9);
        let mut dropped = 0usize;
        for _ in 0..10_000 {
            let m = semantic_mask(3, 20, 0.95, &mut rng).unwrap();
            for col in m.values.columns() {
                assert!(col.iter().all(|&v| v == col[0]));
            }
            dropped += m.values.row(0).iter().filter(|&&v| v == 0.0).count();
        }
        let mean = dropped as f64 / 1e4;
        assert!((mean - 1.0).abs() < 0.1, "mean dropped {mean}");
    }

    #[test]
    fn adversarial_step_examples() {
        let e = NoiseMask {
            values: array![[1.0, 1.0]],
            kind: MaskKind::Continuous,
        };
        let out = adversarial_step(&e, &array![[3.0, 4.0]], 0.01).unwrap();
        assert!((out.values[[0, 0]] - 1.006).abs() < 1e-15);
        assert!((out.values[[0, 1]] - 1.008).abs() < 1e-15);
        let same = adversarial_step(&e, &array![[0.0, 0.0]], 0.01).unwrap();
        assert_eq!(same, e);
        assert!(adversarial_step(&e, &array![[f64::NAN, 0.0]], 0.01).is_err());
        assert!(adversarial_step(&e, &array![[1.0, 0.0, 0.0]], 0.01).is_err());
    }

    #[test]
    fn flip_budget_examples() {
        assert_eq!(flip_budget(10 * 300, 0.9), 300);
        assert_eq!(flip_budget(20, 0.7), 6);
        assert_eq!(flip_budget(7, 0.95), 0);
    }

    #[test]
    fn adversarial_dropout_examples() {
        let e = binary(array![[1.0, 0.0]], 0.5);
        let g = array![[-0.5, 0.3]];
        let out = adversarial_dropout_with_budget(&e, &g, 0.5, FlipOrder::Descending, 2).unwrap();
        assert_eq!(out.values, array![[0.0, 1.0]]);
        // default budget floor(2 * 0.5) = 1 takes only the larger |g|
        let out = adversarial_dropout(&e, &g, 0.5, FlipOrder::Descending).unwrap();
        assert_eq!(out.values, array![[0.0, 0.0]]);

        let e = binary(array![[1.0, 1.0, 0.0]], 0.9);
        let g = array![[-0.2, -0.9, 0.5]];
        let out = adversarial_dropout_with_budget(&e, &g, 0.9, FlipOrder::Descending, 1).unwrap();
        assert_eq!(out.values, array![[1.0, 0.0, 0.0]]);
        let asc = adversarial_dropout_with_budget(&e, &g, 0.9, FlipOrder::Ascending, 1).unwrap();
        assert_eq!(asc.values, array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn adversarial_dropout_rejects_bad_inputs() {
        let e = binary(array![[1.0, 0.5]], 0.5);
        assert!(adversarial_dropout(&e, &array![[1.0, 1.0]], 0.5, FlipOrder::Descending).is_err());
        let e = binary(array![[1.0, 0.0]], 0.5);
        assert!(adversarial_dropout(&e, &array![[1.0, 1.0]], 1.0, FlipOrder::Descending).is_err());
    }

    #[test]
    fn apply_mask_examples() {
        let x = array![[2.0, -4.0]];
        assert_eq!(apply_mask(&x, &NoiseMask::ones(1, 2)).unwrap(), x);
        assert_eq!(apply_mask(&x, &binary(array![[1.0, 0.0]], 0.8)).unwrap(), array![[2.5, 0.0]]);
        let zero = NoiseMask {
            values: Array2::zeros((1, 2)),
            kind: MaskKind::Continuous,
        };
        assert_eq!(apply_mask(&x, &zero).unwrap(), array![[0.0, 0.0]]);
        assert!(apply_mask(&x, &NoiseMask::ones(2, 2)).is_err());
    }

    #[test]
    fn grad_wrt_mask_examples() {
        let g = grad_wrt_mask(&array![[2.0, 3.0]], &array![[0.5, -1.0]], 1.0).unwrap();
        assert_eq!(g, array![[1.0, -3.0]]);
        let z = grad_wrt_mask(&Array2::zeros((2, 2)), &array![[1.0, 2.0], [3.0, 4.0]], 1.0).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(grad_wrt_mask(&array![[1.0]], &array![[1.0, 2.0]], 1.0).is_err());
    }

    fn toy_emb() -> EmbeddingMatrix {
        EmbeddingMatrix::init_random(6, 4, 0.5, 3).unwrap()
    }

    fn no_grad(_: &Array2<f64>) -> Result<Array2<f64>> {
        panic!("gradient requested")
    }

    #[test]
    fn none_is_lookup_and_draws_nothing() {
        let emb = toy_emb();
        let mut rng = rng_from_seed(5);
        let before = rng.clone();
        let out = make_perturbation(&PerturbConfig::none(), &emb, &[1, 2, 3], no_grad, &mut rng).unwrap();
        assert_eq!(out.input, emb.lookup(&[1, 2, 3]).unwrap().values);
        assert_eq!(rng, before);
    }

    #[test]
    fn identity_configs_draw_nothing() {
        let emb = toy_emb();
        for (s, p, sigma) in [
            (Strategy::Bernoulli, 1.0, 0.1),
            (Strategy::WordDropout, 1.0, 0.1),
            (Strategy::SemanticDropout, 1.0, 0.1),
            (Strategy::BernoulliAdv, 1.0, 0.1),
            (Strategy::Adversarial, 0.5, 0.0),
            (Strategy::Gaussian, 0.5, 0.0),
            (Strategy::GaussianAdv, 0.5, 0.0),
        ] {
            let cfg = PerturbConfig::new(s, p, sigma).unwrap();
            assert!(cfg.is_identity());
            let mut rng = rng_from_seed(5);
            let before = rng.clone();
            let out = make_perturbation(&cfg, &emb, &[4, 5], no_grad, &mut rng).unwrap();
            assert_eq!(out.input, emb.lookup(&[4, 5]).unwrap().values);
            assert_eq!(rng, before);
        }
    }

    #[test]
    fn adversarial_moves_along_gradient() {
        let emb = toy_emb();
        let cfg = PerturbConfig::new(Strategy::Adversarial, 1.0, 0.1).unwrap();
        // loss = sum(input), so grad_input = 1 and g = x
        let out = make_perturbation(
            &cfg,
            &emb,
            &[1, 2],
            |x: &Array2<f64>| Ok(Array2::ones(x.dim())),
            &mut rng_from_seed(0),
        )
        .unwrap();
        let x = &out.clean;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (o, &xv) in out.input.iter().zip(x.iter()) {
            let expected = xv * (1.0 + 0.1 * xv / norm);
            assert!((o - expected).abs() < 1e-15);
        }
        assert!(out.input.sum() > x.sum());
    }

    #[test]
    fn bernoulli_adv_stays_binary() {
        let emb = toy_emb();
        let cfg = PerturbConfig::new(Strategy::BernoulliAdv, 0.7, 0.0).unwrap();
        let out = make_perturbation(
            &cfg,
            &emb,
            &[1, 2, 3],
            |x: &Array2<f64>| Ok(x.mapv(|v| -v)),
            &mut rng_from_seed(8),
        )
        .unwrap();
        let m = out.multiplier.unwrap();
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
    }

    #[test]
    fn strategies_are_deterministic() {
        let emb = toy_emb();
        for s in Strategy::ALL {
            let cfg = PerturbConfig::new(s, 0.8, 0.05).unwrap();
            let run = |seed| {
                make_perturbation(
                    &cfg,
                    &emb,
                    &[1, 2, 3, 4],
                    |x: &Array2<f64>| Ok(x.mapv(|v| v.sin())),
                    &mut rng_from_seed(seed),
                )
                .unwrap()
            };
            assert_eq!(run(3), run(3), "{s}");
        }
    }

    proptest! {
        #[test]
        fn step_norm_law(seed: u64, l in 1usize..6, d in 1usize..6, sigma in 0.0f64..1.0) {
            let mut rng = rng_from_seed(seed);
            let e = gaussian_mask(l, d, 0.3, &mut rng).unwrap();
            let g = gaussian_mask(l, d, 1.0, &mut rng).unwrap().values;
            let out = adversarial_step(&e, &g, sigma).unwrap();
            let dist = (&out.values - &e.values).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((dist - sigma).abs() < 1e-12);
        }

        #[test]
        fn dropout_contract(seed: u64, l in 1usize..10, d in 1usize..20, p in prop::sample::select(vec![0.7, 0.9])) {
            let mut rng = rng_from_seed(seed);
            let e = bernoulli_mask(l, d, p, &mut rng).unwrap();
            let g = gaussian_mask(l, d, 1.0, &mut rng).unwrap().values.mapv(|v| v - 1.0);
            let out = adversarial_dropout(&e, &g, p, FlipOrder::Descending).unwrap();
            let mut flips = 0;
            for ((&a, &b), &gv) in e.values.iter().zip(out.values.iter()).zip(g.iter()) {
                prop_assert!(b == 0.0 || b == 1.0);
                if a != b {
                    flips += 1;
                    prop_assert!((b - a) * gv > 0.0);
                }
            }
            prop_assert!(flips <= flip_budget(l * d, p));
        }

        #[test]
        fn semantic_columns_constant(seed: u64, l in 1usize..8, d in 1usize..12, p in 0.05f64..=1.0) {
            let m = semantic_mask(l, d, p, &mut rng_from_seed(seed)).unwrap();
            for col in m.values.columns() {
                prop_assert!(col.iter().all(|&v| v == col[0]));
            }
        }

        #[test]
        fn word_dropout_preserves_length(seed: u64, toks in proptest::collection::vec(0usize..50, 0..40), p in 0.01f64..=1.0) {
            let out = word_dropout(&toks, p, &mut rng_from_seed(seed)).unwrap();
            prop_assert_eq!(out.len(), toks.len());
        }
    }
}
