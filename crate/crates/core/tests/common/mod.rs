//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use confviz::autodiff::Tape;
use confviz::convnet::Model;
use confviz::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const MIN_COORDS: usize = 100;
/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Value, branch signature and analytic gradients of a scalar function.
pub struct Eval {
    pub value: f64,
    pub signature: Vec<usize>,
    pub grads: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOutcome {
    pub checked: usize,
    pub kinks: usize,
    pub max_rel: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.checked >= MIN_COORDS && self.max_rel <= GRAD_TOL
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Central-difference check at randomly drawn coordinates of `inputs`.
/// A coordinate is skipped when either probe changes the branch signature.
pub fn gradient_check(inputs: &[Tensor], eval: impl Fn(&[Tensor]) -> Eval, seed: u64) -> CheckOutcome {
    let base = eval(inputs);
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng(seed);
    let mut out = CheckOutcome {
        checked: 0,
        kinks: 0,
        max_rel: 0.0,
    };
    let mut probe = inputs.to_vec();
    for _ in 0..20 * MIN_COORDS {
        if out.checked >= MIN_COORDS + MIN_COORDS / 5 {
            break;
        }
        let mut flat = r.random_range(0..total);
        let mut leaf = 0;
        while flat >= sizes[leaf] {
            flat -= sizes[leaf];
            leaf += 1;
        }
        let orig = inputs[leaf].data()[flat];
        probe[leaf].data_mut()[flat] = orig + FD_EPS;
        let hi = eval(&probe);
        probe[leaf].data_mut()[flat] = orig - FD_EPS;
        let lo = eval(&probe);
        probe[leaf].data_mut()[flat] = orig;
        if hi.signature != base.signature || lo.signature != base.signature {
            out.kinks += 1;
            continue;
        }
        let numeric = (hi.value - lo.value) / (2.0 * FD_EPS);
        let analytic = base.grads[leaf].data()[flat];
        out.max_rel = out.max_rel.max(rel_err(analytic, numeric));
        out.checked += 1;
    }
    out
}

/// Wraps a tape builder into an [`Eval`] of `<output, weights>`.
pub fn tape_eval<'a>(
    build: impl Fn(&mut Tape, &[confviz::autodiff::NodeId]) -> confviz::autodiff::NodeId + 'a,
    weights: Tensor,
) -> impl Fn(&[Tensor]) -> Eval + 'a {
    move |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &leaves);
        let value = tape.value(out).dot(&weights);
        let g = tape.backward_from(out, weights.clone()).unwrap();
        Eval {
            value,
            signature: tape.branch_signature(),
            grads: leaves.iter().map(|&id| g.get(id).clone()).collect(),
        }
    }
}

/// Score of `model` with its parameters replaced by `inputs[1..]`, as a
/// function of the image `inputs[0]` and those parameters.
pub fn model_eval(model: &Model) -> impl Fn(&[Tensor]) -> Eval + '_ {
    move |inputs: &[Tensor]| {
        let mut m = model.clone();
        m.params = inputs[1..].to_vec();
        let pass = m.forward(&inputs[0]).unwrap();
        let g = pass.tape.backward(pass.score).unwrap();
        let mut grads = vec![g.get(pass.input).clone()];
        grads.extend(pass.params.iter().map(|&id| g.get(id).clone()));
        Eval {
            value: pass.score(),
            signature: pass.tape.branch_signature(),
            grads,
        }
    }
}

/// Zero-padded 2x2 cross-correlation written directly from the definition.
pub fn conv_oracle(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let co = kernel.shape()[0];
    let at = |ch: usize, r: usize, q: usize| {
        if r < h && q < w {
            input.data()[(ch * h + r) * w + q]
        } else {
            0.0
        }
    };
    let k = |o: usize, ch: usize, a: usize, b: usize| kernel.data()[((o * c + ch) * 2 + a) * 2 + b];
    Tensor::from_fn(&[co, h, w], |flat| {
        let (o, r, q) = (flat / (h * w), (flat / w) % h, flat % w);
        let mut acc = bias.data()[o];
        for ch in 0..c {
            for a in 0..2 {
                for b in 0..2 {
                    acc += k(o, ch, a, b) * at(ch, r + a, q + b);
                }
            }
        }
        acc
    })
}

pub struct OlsOracle {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub dof: usize,
}

/// Inverts a square matrix by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for row in 0..n {
            if row != col {
                let f = m[row][col];
                if f != 0.0 {
                    let pivot_row = m[col].clone();
                    for (v, p) in m[row].iter_mut().zip(pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Least squares through the normal equations `(X'X) b = X'y`.
pub fn ols_oracle(y: &[f64], s: &[f64], z: &[Vec<f64>]) -> OlsOracle {
    let n = y.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = vec![1.0, s[i]];
            r.extend(z.iter().map(|col| col[i]));
            r
        })
        .collect();
    let p = rows[0].len();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (row, &yi) in rows.iter().zip(y) {
        for a in 0..p {
            xty[a] += row[a] * yi;
            for b in 0..p {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    let inv = gauss_jordan_inverse(&xtx);
    let beta: Vec<f64> = (0..p).map(|a| (0..p).map(|b| inv[a][b] * xty[b]).sum()).collect();
    let rss: f64 = rows
        .iter()
        .zip(y)
        .map(|(row, &yi)| {
            let fit: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
            (yi - fit).powi(2)
        })
        .sum();
    let dof = n - p;
    let sigma2 = rss / dof as f64;
    let se: Vec<f64> = (0..p).map(|a| (sigma2 * inv[a][a]).sqrt()).collect();
    let t = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    OlsOracle { beta, se, t, dof }
}

#[allow(clippy::too_many_arguments)]
fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb) = (f(a), f(b));
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Two-sided Student-t tail probability by quadrature. With `x = tan(theta)`
/// the unnormalized density becomes a bounded integrand on [0, pi/2];
/// the normalizing constant is integrated the same way.
pub fn t_pvalue_oracle(t: f64, dof: usize) -> f64 {
    let nu = dof as f64;
    let h = move |theta: f64| {
        let (s, c) = theta.sin_cos();
        let c = c.max(0.0);
        if c == 0.0 {
            return if dof == 1 { 1.0 } else { 0.0 };
        }
        ((nu - 1.0) * c.ln() - 0.5 * (nu + 1.0) * (nu * c * c + s * s).ln() + 0.5 * (nu + 1.0) * nu.ln()).exp()
    };
    let half = std::f64::consts::FRAC_PI_2;
    let split = t.abs().atan();
    let tail = integrate(h, split, half, 1e-15);
    let body = integrate(h, 0.0, split, 1e-15);
    tail / (tail + body)
}

/// Gradient checks for every tape primitive, each at its own seed.
pub fn primitive_checks() -> Vec<(&'static str, CheckOutcome)> {
    use confviz::autodiff::Activation;
    let mut r = rng(101);
    let mut out = Vec::new();

    let inputs = vec![
        random_tensor(&[3, 6, 6], -1.0, 1.0, &mut r),
        random_tensor(&[4, 3, 2, 2], -1.0, 1.0, &mut r),
        random_tensor(&[4], -0.5, 0.5, &mut r),
    ];
    let w = random_tensor(&[4, 6, 6], -1.0, 1.0, &mut r);
    let f = tape_eval(|t, l| t.conv2d(l[0], l[1], l[2]).unwrap(), w);
    out.push(("conv2d", gradient_check(&inputs, f, 1)));

    let inputs = vec![random_tensor(&[4, 8, 8], -1.0, 1.0, &mut r)];
    let w = random_tensor(&[4, 4, 4], -1.0, 1.0, &mut r);
    let f = tape_eval(|t, l| t.maxpool2(l[0]).unwrap(), w);
    out.push(("maxpool2", gradient_check(&inputs, f, 2)));

    for (name, act, range, seed) in [
        ("relu", Activation::Relu, 1.0, 3),
        ("tanh", Activation::Tanh, 3.0, 4),
        ("sigmoid", Activation::Sigmoid, 6.0, 5),
    ] {
        let inputs = vec![random_tensor(&[300], -range, range, &mut r)];
        let w = random_tensor(&[300], -1.0, 1.0, &mut r);
        let f = tape_eval(move |t, l| t.pointwise(l[0], act), w);
        out.push((name, gradient_check(&inputs, f, seed)));
    }

    let inputs = vec![
        random_tensor(&[20], -1.0, 1.0, &mut r),
        random_tensor(&[12, 20], -1.0, 1.0, &mut r),
        random_tensor(&[12], -1.0, 1.0, &mut r),
    ];
    let w = random_tensor(&[12], -1.0, 1.0, &mut r);
    let f = tape_eval(|t, l| t.affine(l[0], l[1], l[2]).unwrap(), w);
    out.push(("affine", gradient_check(&inputs, f, 6)));

    let inputs = vec![random_tensor(&[4, 6, 6], -1.0, 1.0, &mut r)];
    let w = random_tensor(&[144], -1.0, 1.0, &mut r);
    let f = tape_eval(|t, l| t.flatten(l[0]), w);
    out.push(("flatten", gradient_check(&inputs, f, 7)));
    out
}

/// Gradient check of the composed model over the image and all parameters.
pub fn model_check(model: &Model, image: &Tensor, seed: u64) -> CheckOutcome {
    let mut inputs = vec![image.clone()];
    inputs.extend(model.params.iter().cloned());
    gradient_check(&inputs, model_eval(model), seed)
}

/// Linear part of the convolution (zero bias) and its adjoint agree under
/// the dot-product test; returns the relative mismatch.
pub fn conv_adjoint_mismatch(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&[3, 7, 5], -1.0, 1.0, &mut r);
    let k = random_tensor(&[4, 3, 2, 2], -1.0, 1.0, &mut r);
    let g = random_tensor(&[4, 7, 5], -1.0, 1.0, &mut r);
    let ax = confviz::autodiff::conv2d_forward(&x, &k, &Tensor::zeros(&[4])).unwrap();
    let atg = confviz::autodiff::conv2d_backward_input(&g, &k, x.shape());
    let (lhs, rhs) = (ax.dot(&g), x.dot(&atg));
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0)
}

/// A random well-posed regression problem: response, score, confounders.
pub fn random_glm_instance(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let n = r.random_range(8..40);
    let k = r.random_range(1..=3);
    let s: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let z: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n).map(|_| r.random_range(-3.0..3.0)).collect())
        .collect();
    let coef: Vec<f64> = (0..k + 2).map(|_| r.random_range(-2.0..2.0)).collect();
    let y = (0..n)
        .map(|i| {
            let mut v = coef[0] + coef[1] * s[i] + r.random_range(-1.0..1.0);
            for (c, col) in coef[2..].iter().zip(&z) {
                v += c * col[i];
            }
            v
        })
        .collect();
    (y, s, z)
}

fn scaled_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest discrepancy between `fit_glm` and the normal-equations oracle
/// over `count` random instances: (coefficients/SE/t, p-values).
pub fn glm_oracle_discrepancy(count: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut worst, mut worst_p) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let (y, s, z) = random_glm_instance(&mut r);
        let fit = confviz::glm::fit_glm(&y, &s, &z).unwrap();
        let o = ols_oracle(&y, &s, &z);
        assert_eq!(fit.residual_dof, o.dof);
        for j in 0..o.beta.len() {
            worst = worst
                .max(scaled_diff(fit.coefficients[j], o.beta[j]))
                .max(scaled_diff(fit.std_errors[j], o.se[j]))
                .max(scaled_diff(fit.t_stats[j], o.t[j]));
            worst_p = worst_p.max((fit.p_values[j] - t_pvalue_oracle(o.t[j], o.dof)).abs());
        }
    }
    (worst, worst_p)
}

pub const PVALUE_GRID_T: [f64; 10] = [0.05, 0.3, 0.8, 1.2, 1.7, 2.228, 3.0, 4.5, 7.0, 12.0];
pub const PVALUE_GRID_DOF: [usize; 5] = [1, 2, 5, 10, 40];

/// Largest |t_pvalue - quadrature| over the 50-point grid.
pub fn pvalue_grid_discrepancy() -> f64 {
    let mut worst = 0.0f64;
    for &t in &PVALUE_GRID_T {
        for &dof in &PVALUE_GRID_DOF {
            let p = confviz::glm::t_pvalue(t, dof).unwrap();
            worst = worst.max((p - t_pvalue_oracle(t, dof)).abs());
        }
    }
    worst
}

pub struct RescaleOutcome {
    pub p_bit_identical: bool,
    pub max_p_rel_diff: f64,
    pub mask_identical: bool,
}

/// Refits a feature matrix after `z -> a z + c` on every confounder column.
pub fn rescale_invariance(
    features: &confviz::glm::FeatureMatrix,
    score: &[f64],
    z: &[Vec<f64>],
    names: &[String],
    alpha: f64,
) -> RescaleOutcome {
    use confviz::glm::{build_confound_mask, MaskOptions};
    let opts = MaskOptions { alpha, bonferroni: false };
    let rescaled: Vec<Vec<f64>> = z
        .iter()
        .enumerate()
        .map(|(k, col)| {
            let (a, c) = (3.7 + k as f64, -12.5 * (k as f64 + 1.0));
            col.iter().map(|v| a * v + c).collect()
        })
        .collect();
    let (m1, r1) = build_confound_mask(features, score, z, names, &opts).unwrap();
    let (m2, r2) = build_confound_mask(features, score, &rescaled, names, &opts).unwrap();
    let mut out = RescaleOutcome {
        p_bit_identical: true,
        max_p_rel_diff: 0.0,
        mask_identical: m1.bits() == m2.bits(),
    };
    for (f1, f2) in r1.features.iter().zip(&r2.features) {
        for ((_, p1), (_, p2)) in f1.p.iter().zip(&f2.p).skip(2) {
            if p1.to_bits() != p2.to_bits() {
                out.p_bit_identical = false;
            }
            let rel = if p1 == p2 { 0.0 } else { (p1 - p2).abs() / p1.abs().max(p2.abs()) };
            out.max_p_rel_diff = out.max_p_rel_diff.max(rel);
        }
    }
    out
}

/// `sum_j (ds/df_j)(df_j/dI)` assembled one Jacobian row at a time, with
/// each row scaled by `weights[j]`.
pub fn chain_rule_gradient(model: &Model, image: &Tensor, weights: &[f64]) -> Tensor {
    use confviz::saliency::{feature_jacobian_row, feature_sensitivities};
    let sens = feature_sensitivities(model, image).unwrap();
    let mut acc = Tensor::zeros(image.shape());
    for (j, (&ds, &b)) in sens.iter().zip(weights).enumerate() {
        if b != 0.0 {
            acc.add_assign(&feature_jacobian_row(model, image, j).unwrap().map(|v| b * ds * v));
        }
    }
    acc
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Fresh draws from the generator, alternating groups.
pub fn random_images(count: usize, seed: u64) -> Vec<Tensor> {
    use confviz::synthdata::{generate_image, Group};
    let mut r = rng(seed);
    (0..count)
        .map(|i| generate_image(if i % 2 == 0 { Group::One } else { Group::Two }, &mut r).image)
        .collect()
}

/// Worst per-pixel gap between the full input gradient and the chain-rule
/// sum over all features.
pub fn chain_rule_identity_gap(model: &Model, images: &[Tensor]) -> f64 {
    let ones = vec![1.0; model.feature_dim()];
    images
        .iter()
        .map(|img| {
            let direct = confviz::saliency::input_gradient(model, img).unwrap();
            max_abs_diff(&direct, &chain_rule_gradient(model, img, &ones))
        })
        .fold(0.0, f64::max)
}

pub struct RefactorOutcome {
    /// Worst pairwise gap among the three partial gradients.
    pub pairwise: f64,
    /// Worst gap between an all-ones mask and the full map.
    pub all_ones: f64,
    /// Whether all-zero masks produced exactly zero maps.
    pub all_zero_exact: bool,
}

/// Compares the dummy-layer, masked-adjoint and explicit-sum routes on
/// random (image, mask) pairs.
pub fn refactorization_agreement(model: &Model, images: &[Tensor], seed: u64) -> RefactorOutcome {
    use confviz::glm::ConfoundMask;
    use confviz::saliency::{
        input_gradient, partial_input_gradient, partial_saliency_map, refactorize_model, saliency_map,
    };
    let m = model.feature_dim();
    let mut r = rng(seed);
    let mut out = RefactorOutcome {
        pairwise: 0.0,
        all_ones: 0.0,
        all_zero_exact: true,
    };
    for img in images {
        let mask = ConfoundMask::from_bits((0..m).map(|_| r.random_bool(0.5)).collect());
        let weights = mask.as_weights();
        let dummy = refactorize_model(model, img, &mask, None).unwrap().input_gradient(img).unwrap();
        let masked = partial_input_gradient(model, img, &mask).unwrap();
        let explicit = chain_rule_gradient(model, img, &weights);
        out.pairwise = out
            .pairwise
            .max(max_abs_diff(&dummy, &masked))
            .max(max_abs_diff(&dummy, &explicit))
            .max(max_abs_diff(&masked, &explicit));

        let ones = ConfoundMask::all_retained(m);
        let full = saliency_map(model, img).unwrap();
        let full_grad = input_gradient(model, img).unwrap();
        let via_mask = partial_saliency_map(model, img, &ones).unwrap();
        let via_dummy = refactorize_model(model, img, &ones, None).unwrap().input_gradient(img).unwrap();
        for (a, b) in full.values().iter().zip(via_mask.values()) {
            out.all_ones = out.all_ones.max((a - b).abs());
        }
        out.all_ones = out.all_ones.max(max_abs_diff(&full_grad, &via_dummy));

        let zeros = ConfoundMask::from_bits(vec![false; m]);
        let z1 = partial_input_gradient(model, img, &zeros).unwrap();
        let z2 = refactorize_model(model, img, &zeros, None).unwrap().input_gradient(img).unwrap();
        if z1.data().iter().chain(z2.data()).any(|&v| v != 0.0) {
            out.all_zero_exact = false;
        }
    }
    out
}

/// A briefly trained model on a small dataset, for tests that need
/// non-trivial weights but not the full recipe.
pub fn quick_model(seed: u64) -> Model {
    use confviz::convnet::{ModelSpec, TrainConfig};
    let ds = confviz::synthdata::generate_dataset(48, seed).unwrap();
    let mut model = Model::init(ModelSpec::synthetic(), seed).unwrap();
    let config = TrainConfig {
        epochs: 6,
        seed,
        ..TrainConfig::default()
    };
    model.train(&ds, &config).unwrap();
    model
}
