//! Built-in oracle suite: finite-difference gradient checks, mask
//! statistics, adversarial step and flip laws, determinism.
//!
//! Each check group is independent and reports its tolerance. The mask
//! gradient is taken through [`VerifyHooks`] so a harness can substitute a
//! broken implementation and confirm the suite catches it.

use ndarray::Array2;
use rand::Rng as _;

use crate::embed::EmbeddingMatrix;
use crate::error::Result;
use crate::model::{self, Activation, Architecture, ClassifierParams, ModelSpec};
use crate::perturb::{self, FlipOrder, NoiseMask, PerturbConfig, Strategy};
use crate::seed::{derive_seed, rng_from_seed, Rng, Stream};

pub type MaskGradFn = fn(&Array2<f64>, &Array2<f64>, f64) -> Result<Array2<f64>>;

#[derive(Debug, Clone, Copy)]
pub struct VerifyHooks {
    pub grad_wrt_mask: MaskGradFn,
}

impl Default for VerifyHooks {
    fn default() -> Self {
        Self {
            grad_wrt_mask: perturb::grad_wrt_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: String,
    pub passed: bool,
    pub tolerance: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn groups(&self) -> Vec<&'static str> {
        let mut g: Vec<&'static str> = Vec::new();
        for c in &self.checks {
            if !g.contains(&c.group) {
                g.push(c.group);
            }
        }
        g
    }

    fn push(&mut self, group: &'static str, name: impl Into<String>, passed: bool, tolerance: impl Into<String>, detail: impl Into<String>) {
        self.checks.push(CheckResult {
            group,
            name: name.into(),
            passed,
            tolerance: tolerance.into(),
            detail: detail.into(),
        });
    }

    /// One line per check: `[PASS] group/name (tol ...): detail`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {}/{} (tolerance: {}): {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.group,
                c.name,
                c.tolerance,
                c.detail
            ));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!(
            "{} checks in {} groups, {} failed\n",
            self.checks.len(),
            self.groups().len(),
            failed
        ));
        out
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-5;
/// Differences below this are treated as agreement regardless of scale.
pub const FD_ABS_FLOOR: f64 = 1e-9;
/// Minimum gap between the two best max-pool positions for a conv
/// instance to be differentiable across the finite-difference stencil.
pub const POOL_MARGIN: f64 = 1e-3;

pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= FD_ABS_FLOOR {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// A random classifier instance small enough for exhaustive
/// finite-difference checks.
pub struct Instance {
    pub params: ClassifierParams,
    pub x: Array2<f64>,
    pub label: usize,
}

/// Draws a random instance; conv instances are redrawn until max-pool
/// winners are separated by at least [`POOL_MARGIN`].
pub fn random_instance(arch: Architecture, seed: u64) -> Instance {
    let mut rng = rng_from_seed(seed);
    loop {
        let l = rng.random_range(1..=5usize);
        let d = rng.random_range(1..=6usize);
        let c = rng.random_range(2..=3usize);
        let spec = ModelSpec {
            arch,
            filters: rng.random_range(1..=3),
            filter_width: rng.random_range(1..=3),
            activation: Activation::Tanh,
        };
        let mut params = ClassifierParams::init(&spec, d, c, rng.random()).expect("valid shape");
        for (_, a) in params.arrays_mut() {
            for v in a.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = uniform(l, d, -1.0, 1.0, &mut rng);
        let label = rng.random_range(0..c);
        let (_, trace) = model::forward(&params, &x).expect("finite input");
        if trace.min_pool_margin() >= POOL_MARGIN {
            return Instance { params, x, label };
        }
    }
}

fn instance_loss(params: &ClassifierParams, x: &Array2<f64>, label: usize) -> f64 {
    let (logits, _) = model::forward(params, x).expect("finite input");
    model::loss(logits.view(), label)
}

fn central<F: FnMut(f64) -> f64>(mut f: F, at: f64) -> f64 {
    (f(at + FD_STEP) - f(at - FD_STEP)) / (2.0 * FD_STEP)
}

/// Worst relative error of parameter and input gradients.
fn param_and_input_error(inst: &Instance) -> f64 {
    let (_, grads, dx) = model::loss_and_grads(&inst.params, &inst.x, inst.label).expect("valid");
    let mut worst: f64 = 0.0;
    let analytic: Vec<Vec<f64>> = grads.arrays().iter().map(|(_, a)| a.to_vec()).collect();
    for (ai, arr) in analytic.iter().enumerate() {
        for (k, &g) in arr.iter().enumerate() {
            let at = inst.params.arrays()[ai].1[k];
            let numeric = central(
                |v| {
                    let mut p = inst.params.clone();
                    p.arrays_mut()[ai].1[k] = v;
                    instance_loss(&p, &inst.x, inst.label)
                },
                at,
            );
            worst = worst.max(relative_error(g, numeric));
        }
    }
    for ((i, j), &g) in dx.indexed_iter() {
        let numeric = central(
            |v| {
                let mut x = inst.x.clone();
                x[[i, j]] = v;
                instance_loss(&inst.params, &x, inst.label)
            },
            inst.x[[i, j]],
        );
        worst = worst.max(relative_error(g, numeric));
    }
    worst
}

/// Worst relative error of `dL/de` for `L(e) = loss(scale * x ⊙ e)`.
fn mask_grad_error(inst: &Instance, mask: &NoiseMask, hooks: &VerifyHooks) -> f64 {
    let input = perturb::apply_mask(&inst.x, mask).expect("shapes match");
    let (_, _, dx) = model::loss_and_grads(&inst.params, &input, inst.label).expect("valid");
    let analytic = (hooks.grad_wrt_mask)(&inst.x, &dx, mask.scale()).expect("shapes match");
    let mut worst: f64 = 0.0;
    for ((i, j), &g) in analytic.indexed_iter() {
        let numeric = central(
            |v| {
                let mut m = mask.clone();
                m.values[[i, j]] = v;
                let x = perturb::apply_mask(&inst.x, &m).expect("shapes match");
                instance_loss(&inst.params, &x, inst.label)
            },
            mask.values[[i, j]],
        );
        worst = worst.max(relative_error(g, numeric));
    }
    worst
}

fn gradient_checks(report: &mut VerifyReport, hooks: &VerifyHooks, instances: usize) {
    let tol = format!("rel {FD_REL_TOL:e}, h = {FD_STEP:e}");
    for (group, arch) in [
        ("gradient_meanpool", Architecture::MeanPool),
        ("gradient_conv", Architecture::Conv),
    ] {
        let worst = (0..instances)
            .map(|i| param_and_input_error(&random_instance(arch, derive_seed(1, Stream::ModelInit, i as u64))))
            .fold(0.0, f64::max);
        report.push(
            group,
            "params_and_input",
            worst < FD_REL_TOL,
            tol.clone(),
            format!("{instances} instances, worst relative error {worst:.3e}"),
        );
    }

    let mut worst: f64 = 0.0;
    for i in 0..instances {
        for arch in [Architecture::MeanPool, Architecture::Conv] {
            let seed = derive_seed(2, Stream::ModelInit, i as u64);
            let inst = random_instance(arch, seed);
            let (l, d) = inst.x.dim();
            let mut rng = rng_from_seed(seed);
            let continuous = perturb::gaussian_mask(l, d, 0.3, &mut rng).expect("valid sigma");
            let binary = perturb::bernoulli_mask(l, d, 0.8, &mut rng).expect("valid p");
            for mask in [&continuous, &binary] {
                // skip stencils that move a max-pool winner
                let x = perturb::apply_mask(&inst.x, mask).expect("shapes");
                let (_, trace) = model::forward(&inst.params, &x).expect("finite");
                if trace.min_pool_margin() < POOL_MARGIN {
                    continue;
                }
                worst = worst.max(mask_grad_error(&inst, mask, hooks));
            }
        }
    }
    report.push(
        "gradient_mask",
        "dL_de_vs_finite_differences",
        worst < FD_REL_TOL,
        tol,
        format!("{instances} instances per architecture, continuous and binary masks, worst {worst:.3e}"),
    );
}

fn mask_statistics(report: &mut VerifyReport) {
    const N: usize = 100_000;
    let mut rng = rng_from_seed(derive_seed(3, Stream::Noise, 0));
    for p in [0.7, 0.8, 0.9, 0.95] {
        let se = ((1.0 - p) / p / N as f64).sqrt();
        let m = perturb::bernoulli_mask(100, N / 100, p, &mut rng).expect("valid p");
        let mean = m.effective().mean().expect("nonempty");
        report.push(
            "mask_statistics",
            format!("bernoulli_p{p}_mean"),
            (mean - 1.0).abs() <= 3.0 * se,
            format!("3 SE = {:.2e}", 3.0 * se),
            format!("mean {mean:.6}"),
        );

        // one column decision per entry of the first row
        let mut sum = 0.0;
        for _ in 0..N / 50 {
            let s = perturb::semantic_mask(4, 50, p, &mut rng).expect("valid p");
            sum += s.effective().row(0).sum();
        }
        let mean = sum / N as f64;
        report.push(
            "mask_statistics",
            format!("semantic_p{p}_mean"),
            (mean - 1.0).abs() <= 3.0 * se,
            format!("3 SE = {:.2e}", 3.0 * se),
            format!("mean {mean:.6}"),
        );
    }
    for sigma in [0.001, 0.01, 0.1] {
        let m = perturb::gaussian_mask(100, N / 100, sigma, &mut rng).expect("valid sigma");
        let n = m.values.len() as f64;
        let mean = m.values.sum() / n;
        let var = m.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = sigma / n.sqrt();
        let target = sigma * sigma;
        report.push(
            "mask_statistics",
            format!("gaussian_sigma{sigma}"),
            (mean - 1.0).abs() <= 3.0 * se && (var - target).abs() <= 0.1 * target,
            format!("mean 3 SE = {:.2e}, variance 10%", 3.0 * se),
            format!("mean {mean:.7}, variance {var:.4e} vs {target:.4e}"),
        );
    }
}

fn adversarial_step_checks(report: &mut VerifyReport) {
    let mut rng = rng_from_seed(derive_seed(4, Stream::Noise, 0));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let l = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let sigma = rng.random_range(0.0..1.0);
        let e = perturb::gaussian_mask(l, d, 0.5, &mut rng).expect("valid");
        let g = uniform(l, d, -2.0, 2.0, &mut rng);
        let out = perturb::adversarial_step(&e, &g, sigma).expect("finite");
        let dist = (&out.values - &e.values).iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((dist - sigma).abs());
    }
    report.push(
        "adversarial_step",
        "norm_law",
        worst <= 1e-12,
        "abs 1e-12",
        format!("1000 instances, worst | ||e'-e|| - sigma | = {worst:.2e}"),
    );
    let e = perturb::gaussian_mask(3, 4, 0.5, &mut rng).expect("valid");
    let same = perturb::adversarial_step(&e, &Array2::zeros((3, 4)), 0.1).expect("finite");
    report.push(
        "adversarial_step",
        "zero_gradient_guard",
        same == e,
        "exact",
        "zero gradient leaves the mask unchanged",
    );
}

fn first_order_ascent(report: &mut VerifyReport, hooks: &VerifyHooks) {
    const TRIALS: usize = 1000;
    const SIGMA: f64 = 0.001;
    let mut ascended = 0;
    for i in 0..TRIALS {
        let inst = random_instance(Architecture::MeanPool, derive_seed(5, Stream::ModelInit, i as u64));
        let (l, d) = inst.x.dim();
        let (clean, _, dx) = model::loss_and_grads(&inst.params, &inst.x, inst.label).expect("valid");
        let g = (hooks.grad_wrt_mask)(&inst.x, &dx, 1.0).expect("shapes");
        let e = perturb::adversarial_step(&NoiseMask::ones(l, d), &g, SIGMA).expect("finite");
        let x = perturb::apply_mask(&inst.x, &e).expect("shapes");
        if instance_loss(&inst.params, &x, inst.label) >= clean {
            ascended += 1;
        }
    }
    let frac = ascended as f64 / TRIALS as f64;
    report.push(
        "first_order_ascent",
        "adversarial_increases_loss",
        frac >= 0.95,
        ">= 95% of trials",
        format!("{ascended}/{TRIALS} trials at sigma = {SIGMA}"),
    );
}

fn adversarial_dropout_checks(report: &mut VerifyReport) {
    let mut rng = rng_from_seed(derive_seed(6, Stream::Noise, 0));
    let mut violations = Vec::new();
    for trial in 0..500 {
        let l = rng.random_range(1..=10);
        let d = rng.random_range(1..=20);
        let p = if trial % 2 == 0 { 0.7 } else { 0.9 };
        let e = perturb::bernoulli_mask(l, d, p, &mut rng).expect("valid");
        let g = uniform(l, d, -1.0, 1.0, &mut rng);
        let out = perturb::adversarial_dropout(&e, &g, p, FlipOrder::Descending).expect("binary");
        let mut flips = 0;
        for ((&a, &b), &gv) in e.values.iter().zip(out.values.iter()).zip(g.iter()) {
            if b != 0.0 && b != 1.0 {
                violations.push(format!("trial {trial}: non-binary output"));
            }
            if a != b {
                flips += 1;
                if (b - a) * gv <= 0.0 {
                    violations.push(format!("trial {trial}: flip against gradient"));
                }
            }
        }
        if flips > perturb::flip_budget(l * d, p) {
            violations.push(format!("trial {trial}: {flips} flips over budget"));
        }

        let one = perturb::adversarial_dropout_with_budget(&e, &g, p, FlipOrder::Descending, 1)
            .expect("binary");
        let eligible_max = e
            .values
            .iter()
            .zip(g.iter())
            .filter(|(&a, &gv)| (a == 1.0 && gv < 0.0) || (a == 0.0 && gv > 0.0))
            .map(|(_, gv)| gv.abs())
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let flipped: Vec<f64> = e
            .values
            .iter()
            .zip(one.values.iter())
            .zip(g.iter())
            .filter(|((a, b), _)| a != b)
            .map(|(_, gv)| gv.abs())
            .collect();
        match (eligible_max, flipped.as_slice()) {
            (None, []) => {}
            (Some(m), [f]) if *f == m => {}
            _ => violations.push(format!("trial {trial}: budget-1 flip is not the max eligible |g|")),
        }
    }
    report.push(
        "adversarial_dropout",
        "budget_sign_binary_order",
        violations.is_empty(),
        "exact",
        if violations.is_empty() {
            "500 instances, l<=10, d<=20, p in {0.7, 0.9}".to_owned()
        } else {
            violations.join("; ")
        },
    );
}

fn word_dropout_checks(report: &mut VerifyReport) {
    let mut rng = rng_from_seed(derive_seed(7, Stream::Noise, 0));
    let tokens: Vec<usize> = (0..100_000).map(|i| 1 + i % 50).collect();
    let out = perturb::word_dropout(&tokens, 0.9, &mut rng).expect("valid p");
    let frac = out.iter().filter(|&&t| t == crate::corpus::UNK).count() as f64 / tokens.len() as f64;
    report.push(
        "word_dropout",
        "length_and_unk_rate",
        out.len() == tokens.len() && (frac - 0.1).abs() <= 0.003,
        "UNK fraction 0.1 +/- 0.003",
        format!("UNK fraction {frac:.5}"),
    );
}

fn determinism_checks(report: &mut VerifyReport) {
    let emb = EmbeddingMatrix::init_random(20, 6, 0.5, 8).expect("valid");
    let params = ClassifierParams::init(&ModelSpec::default(), 6, 2, 9).expect("valid");
    let tokens = [3, 1, 4, 1, 5, 9];
    let mut mismatched = Vec::new();
    for s in Strategy::ALL {
        let cfg = PerturbConfig::new(s, 0.8, 0.05).expect("valid");
        let run = || {
            let mut rng = rng_from_seed(77);
            perturb::make_perturbation(
                &cfg,
                &emb,
                &tokens,
                |x| Ok(model::loss_and_grads(&params, x, 1)?.2),
                &mut rng,
            )
            .expect("valid")
            .input
        };
        let (a, b) = (run(), run());
        let bits = |m: &Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&a) != bits(&b) {
            mismatched.push(s.name());
        }
    }
    report.push(
        "determinism",
        "same_seed_same_bits",
        mismatched.is_empty(),
        "bit-identical",
        if mismatched.is_empty() {
            "all strategies".to_owned()
        } else {
            format!("differs: {}", mismatched.join(", "))
        },
    );
    let mut rng = rng_from_seed(5);
    let before = rng.clone();
    let _ = perturb::make_perturbation(&PerturbConfig::none(), &emb, &tokens, |_| unreachable!(), &mut rng);
    report.push(
        "determinism",
        "baseline_draws_no_randomness",
        rng == before,
        "exact",
        "strategy none leaves the RNG untouched",
    );
}

/// Runs every check group with `instances` random gradient-check
/// instances per architecture.
pub fn run_checks(hooks: &VerifyHooks, instances: usize) -> VerifyReport {
    let mut report = VerifyReport::default();
    gradient_checks(&mut report, hooks, instances);
    mask_statistics(&mut report);
    adversarial_step_checks(&mut report);
    first_order_ascent(&mut report, hooks);
    adversarial_dropout_checks(&mut report);
    word_dropout_checks(&mut report);
    determinism_checks(&mut report);
    report
}

/// The default suite: 100 gradient instances per architecture.
pub fn run_all() -> VerifyReport {
    run_checks(&VerifyHooks::default(), 100)
}
