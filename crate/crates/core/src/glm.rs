//! Per-feature general linear model and confound test.
//!
//! Each encoder feature `f^j` (one value per image) is regressed on an
//! intercept, the prediction score `s`, and every confounder column:
//!
//! ```text
//! f^j = b0 + b1 * s + b_1 * z_1 + ... + b_K * z_K
//! ```
//!
//! A feature is confounded when the two-sided t-test of at least one
//! confounder coefficient has `p < alpha`. The score coefficient is fitted
//! and reported but never used for masking.
//!
//! The design matrix is shared by every feature, so it is factored once
//! (Householder QR) and each feature column costs one `Q^T y` and one
//! triangular solve.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot size below which a design column counts as collinear.
const RANK_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Student-t tail probability
// ---------------------------------------------------------------------------

/// ln Γ(x) for x > 0 (Lanczos, g = 7, n = 9; relative error ~1e-15).
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for I_x(a, b), modified Lentz.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b). `y` must equal `1 - x`; passing
/// it separately keeps precision when `x` is close to 1.
pub fn regularized_incomplete_beta(x: f64, y: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * y.ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(y, b, a) / b
    }
}

/// Two-sided p-value of a t statistic: `I_{dof/(dof+t^2)}(dof/2, 1/2)`.
pub fn t_pvalue(t: f64, dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Dof { n: 0, params: 0 });
    }
    if t.is_nan() {
        return Ok(f64::NAN);
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let nu = dof as f64;
    let t2 = t * t;
    let x = nu / (nu + t2);
    let y = t2 / (nu + t2);
    Ok(regularized_incomplete_beta(x, y, 0.5 * nu, 0.5).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// OLS
// ---------------------------------------------------------------------------

/// Factored design `[1, s, z_1..z_K]`.
#[derive(Debug, Clone)]
pub struct Design {
    names: Vec<String>,
    n: usize,
    /// Householder vectors, column-major, `n` entries per column.
    reflectors: Vec<Vec<f64>>,
    /// Upper-triangular factor, row-major `p × p`.
    r: Vec<f64>,
    /// Diagonal of `(X^T X)^{-1}`.
    xtx_inv_diag: Vec<f64>,
}

impl Design {
    /// `confounders` are columns of length N, named by `confounder_names`.
    pub fn new(score: &[f64], confounders: &[Vec<f64>], confounder_names: &[String]) -> Result<Self> {
        let n = score.len();
        let k = confounders.len();
        let p = k + 2;
        if confounder_names.len() != k {
            return Err(Error::Shape(format!(
                "{k} confounder columns but {} names",
                confounder_names.len()
            )));
        }
        if let Some((i, z)) = confounders.iter().enumerate().find(|(_, z)| z.len() != n) {
            return Err(Error::Shape(format!(
                "confounder `{}` has {} rows, score has {n}",
                confounder_names[i],
                z.len()
            )));
        }
        if n < p + 1 {
            return Err(Error::Dof { n, params: p });
        }
        let mut names = vec!["intercept".to_string(), "score".to_string()];
        names.extend(confounder_names.iter().cloned());

        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
        cols.push(vec![1.0; n]);
        cols.push(score.to_vec());
        cols.extend(confounders.iter().cloned());
        if cols.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("design matrix has non-finite entries".into()));
        }
        let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();

        let mut reflectors = Vec::with_capacity(p);
        let mut r = vec![0.0; p * p];
        for j in 0..p {
            // reflect column j below the diagonal
            let x = &cols[j][j..];
            let alpha = norm(x);
            let mut v = x.to_vec();
            let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
            v[0] += sign * alpha;
            let vnorm = norm(&v);
            let diag = -sign * alpha;
            if norms[j] == 0.0 || diag.abs() <= RANK_TOL * norms[j] {
                return Err(Error::Singular {
                    column: names[j].clone(),
                });
            }
            for e in v.iter_mut() {
                *e /= vnorm;
            }
            for col in cols.iter_mut().skip(j) {
                apply_reflector(&v, &mut col[j..]);
            }
            for (i, col) in cols.iter().enumerate().skip(j) {
                r[j * p + i] = col[j];
            }
            reflectors.push(v);
        }

        // diag((X^T X)^{-1}) = row norms^2 of R^{-1}
        let mut rinv = vec![0.0; p * p];
        for c in 0..p {
            rinv[c * p + c] = 1.0 / r[c * p + c];
            for row in (0..c).rev() {
                let mut acc = 0.0;
                for m in row + 1..=c {
                    acc += r[row * p + m] * rinv[m * p + c];
                }
                rinv[row * p + c] = -acc / r[row * p + row];
            }
        }
        let xtx_inv_diag = (0..p)
            .map(|row| (row..p).map(|c| rinv[row * p + c].powi(2)).sum())
            .collect();

        Ok(Self {
            names,
            n,
            reflectors,
            r,
            xtx_inv_diag,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_confounders(&self) -> usize {
        self.names.len() - 2
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn residual_dof(&self) -> usize {
        self.n - self.n_params()
    }

    pub fn fit(&self, response: &[f64]) -> Result<GlmFit> {
        let p = self.n_params();
        if response.len() != self.n {
            return Err(Error::Shape(format!(
                "response has {} rows, design has {}",
                response.len(),
                self.n
            )));
        }
        let mut qty = response.to_vec();
        for (j, v) in self.reflectors.iter().enumerate() {
            apply_reflector(v, &mut qty[j..]);
        }
        let mut beta = vec![0.0; p];
        for row in (0..p).rev() {
            let mut acc = qty[row];
            for (r, b) in self.r[row * p + row + 1..(row + 1) * p].iter().zip(&beta[row + 1..]) {
                acc -= r * b;
            }
            beta[row] = acc / self.r[row * p + row];
        }
        let rss: f64 = qty[p..].iter().map(|v| v * v).sum();
        let dof = self.residual_dof();
        let degenerate = rss < 1e-12 * self.n as f64;

        let (std_errors, t_stats, p_values) = if degenerate {
            let se = vec![0.0; p];
            let t = beta
                .iter()
                .map(|&b| {
                    if b.abs() > 1e-8 {
                        f64::INFINITY.copysign(b)
                    } else {
                        0.0
                    }
                })
                .collect();
            let pv = beta
                .iter()
                .map(|&b| if b.abs() > 1e-8 { 0.0 } else { 1.0 })
                .collect();
            (se, t, pv)
        } else {
            let sigma2 = rss / dof as f64;
            let se: Vec<f64> = self
                .xtx_inv_diag
                .iter()
                .map(|d| (sigma2 * d).sqrt())
                .collect();
            let t: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
            let pv = t
                .iter()
                .map(|&tv| t_pvalue(tv, dof))
                .collect::<Result<Vec<_>>>()?;
            (se, t, pv)
        };

        Ok(GlmFit {
            coefficients: beta,
            std_errors,
            t_stats,
            p_values,
            residual_dof: dof,
            rss,
            degenerate,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    // scaled to avoid overflow on large columns
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
}

/// `x <- (I - 2 v v^T) x` for unit `v`.
fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let d: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi -= 2.0 * d * vi;
    }
}

/// Coefficients in design order: intercept, score, then one per confounder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    /// Two-sided.
    pub p_values: Vec<f64>,
    pub residual_dof: usize,
    pub rss: f64,
    /// Residual sum of squares below `1e-12 * N`; p-values are 0 or 1.
    pub degenerate: bool,
}

impl GlmFit {
    pub fn confounder_p_values(&self) -> &[f64] {
        &self.p_values[2..]
    }

    pub fn min_confounder_p(&self) -> f64 {
        self.confounder_p_values()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Fits `f = b0 + b1 s + sum_k bk z_k` by least squares. Confounder columns
/// are named `z1..zK` in errors.
pub fn fit_glm(response: &[f64], score: &[f64], confounders: &[Vec<f64>]) -> Result<GlmFit> {
    let names: Vec<String> = (1..=confounders.len()).map(|k| format!("z{k}")).collect();
    Design::new(score, confounders, &names)?.fit(response)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTest {
    pub confounded: bool,
    pub confounder_p_values: Vec<f64>,
    pub fit: GlmFit,
}

pub fn test_feature(
    response: &[f64],
    score: &[f64],
    confounders: &[Vec<f64>],
    alpha: f64,
) -> Result<FeatureTest> {
    check_alpha(alpha)?;
    let fit = fit_glm(response, score, confounders)?;
    Ok(FeatureTest {
        confounded: fit.min_confounder_p() < alpha,
        confounder_p_values: fit.confounder_p_values().to_vec(),
        fit,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature matrix and mask
// ---------------------------------------------------------------------------

/// N×M feature values, rows are images.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
    pub model_id: String,
}

impl FeatureMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, model_id: impl Into<String>) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || n_cols == 0 {
            return Err(Error::Shape("feature matrix must be non-empty".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != n_cols) {
            return Err(Error::Shape(format!(
                "feature row {i} has {} values, expected {n_cols}",
                rows[i].len()
            )));
        }
        let n_rows = rows.len();
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature matrix has non-finite entries".into()));
        }
        Ok(Self {
            n_rows,
            n_cols,
            values,
            model_id: model_id.into(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.values[i * self.n_cols + j]).collect()
    }

    pub fn to_csv(&self) -> String {
        let header: Vec<String> = (0..self.n_cols).map(|j| format!("f_{j}")).collect();
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.n_rows {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, model_id: impl Into<String>) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("features header", "empty file"))?;
        let cols: Vec<&str> = header.split(',').collect();
        for (j, c) in cols.iter().enumerate() {
            if *c != format!("f_{j}") {
                return Err(Error::format("features header", format!("column {j} is `{c}`")));
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::format(format!("features row {i}"), format!("bad number `{v}`")))
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        Self::from_rows(rows, model_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub alpha: f64,
    /// Divide alpha by `M * K`.
    pub bonferroni: bool,
}

/// Outcome of the test for one feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub index: usize,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    #[serde(with = "crate::floats::vec")]
    pub t: Vec<f64>,
    /// Keyed by covariate name, in design order.
    pub p: Vec<(String, f64)>,
    pub min_confounder_p: Option<f64>,
    pub confounded: bool,
    pub degenerate: bool,
    pub zero_variance: bool,
    pub error: Option<String>,
}

/// Per-feature retain bits: `true` (b = 1) keeps the feature, `false`
/// (b = 0) marks it confounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundMask {
    bits: Vec<bool>,
    pub alpha: f64,
    /// Threshold actually applied (alpha after optional correction).
    pub threshold: f64,
    pub min_p: Vec<Option<f64>>,
}

impl ConfoundMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let n = bits.len();
        Self {
            bits,
            alpha: f64::NAN,
            threshold: f64::NAN,
            min_p: vec![None; n],
        }
    }

    pub fn all_retained(m: usize) -> Self {
        Self::from_bits(vec![true; m])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn n_confounded(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    /// Bits as 0.0 / 1.0.
    pub fn as_weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// `"1101..."`, one character per feature.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .enumerate()
            .map(|(i, c)| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::format("mask", format!("character {i} is `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.is_empty() {
            return Err(Error::format("mask", "empty mask"));
        }
        Ok(Self::from_bits(bits))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmReport {
    pub alpha: f64,
    pub threshold: f64,
    pub bonferroni: bool,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub covariates: Vec<String>,
    pub model_id: String,
    pub n_confounded: usize,
    pub mask: String,
    pub features: Vec<FeatureRecord>,
}

impl GlmReport {
    pub fn confound_mask(&self) -> Result<ConfoundMask> {
        let mut mask = ConfoundMask::parse_bit_string(&self.mask)?;
        if mask.len() != self.m {
            return Err(Error::format(
                "mask",
                format!("{} bits for M = {}", mask.len(), self.m),
            ));
        }
        mask.alpha = self.alpha;
        mask.threshold = self.threshold;
        mask.min_p = self.features.iter().map(|f| f.min_confounder_p).collect();
        Ok(mask)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("glm_report.json", e.to_string()))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{} of {} features confounded at p < {}",
            self.n_confounded, self.m, self.threshold
        );
        s
    }
}

/// Runs the confound test on every column of `features`.
///
/// Zero-variance columns and columns whose fit fails are kept (b = 1) and
/// flagged in the report rather than aborting the whole run.
pub fn build_confound_mask(
    features: &FeatureMatrix,
    score: &[f64],
    confounders: &[Vec<f64>],
    confounder_names: &[String],
    options: &MaskOptions,
) -> Result<(ConfoundMask, GlmReport)> {
    check_alpha(options.alpha)?;
    if score.len() != features.n_rows() {
        return Err(Error::Shape(format!(
            "{} scores for {} feature rows",
            score.len(),
            features.n_rows()
        )));
    }
    let design = Design::new(score, confounders, confounder_names)?;
    let m = features.n_cols();
    let k = design.n_confounders();
    let threshold = if options.bonferroni {
        options.alpha / (m * k.max(1)) as f64
    } else {
        options.alpha
    };

    let mut bits = Vec::with_capacity(m);
    let mut min_p = Vec::with_capacity(m);
    let mut records = Vec::with_capacity(m);
    for j in 0..m {
        let col = features.column(j);
        let mut rec = FeatureRecord {
            index: j,
            beta: vec![],
            se: vec![],
            t: vec![],
            p: vec![],
            min_confounder_p: None,
            confounded: false,
            degenerate: false,
            zero_variance: false,
            error: None,
        };
        if col.iter().all(|&v| v == col[0]) {
            rec.zero_variance = true;
        } else {
            match design.fit(&col) {
                Ok(fit) => {
                    let mp = fit.min_confounder_p();
                    rec.confounded = mp < threshold;
                    rec.min_confounder_p = Some(mp);
                    rec.degenerate = fit.degenerate;
                    rec.p = design
                        .names()
                        .iter()
                        .cloned()
                        .zip(fit.p_values.iter().copied())
                        .collect();
                    rec.beta = fit.coefficients;
                    rec.se = fit.std_errors;
                    rec.t = fit.t_stats;
                }
                Err(e) => {
                    log::warn!("feature {j}: {e}");
                    rec.error = Some(e.to_string());
                }
            }
        }
        bits.push(!rec.confounded);
        min_p.push(rec.min_confounder_p);
        records.push(rec);
    }

    let mask = ConfoundMask {
        bits,
        alpha: options.alpha,
        threshold,
        min_p,
    };
    let report = GlmReport {
        alpha: options.alpha,
        threshold,
        bonferroni: options.bonferroni,
        k,
        n: features.n_rows(),
        m,
        covariates: design.names().to_vec(),
        model_id: features.model_id.clone(),
        n_confounded: mask.n_confounded(),
        mask: mask.to_bit_string(),
        features: records,
    };
    Ok((mask, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pvalue_limits() {
        for dof in [1, 2, 5, 30, 1000] {
            assert_eq!(t_pvalue(0.0, dof).unwrap(), 1.0);
        }
        assert!(t_pvalue(1e6, 10).unwrap() < 1e-12);
        assert!(t_pvalue(-1e6, 10).unwrap() < 1e-12);
        assert!(matches!(t_pvalue(1.0, 0), Err(Error::Dof { .. })));
    }

    #[test]
    fn pvalue_closed_forms() {
        // dof = 1 is Cauchy: p = 1 - 2 atan(|t|) / pi
        for t in [0.1, 0.5, 1.0, 3.0, 20.0] {
            let exact = 1.0 - 2.0 * f64::atan(t) / std::f64::consts::PI;
            assert!((t_pvalue(t, 1).unwrap() - exact).abs() < 1e-13);
        }
        // dof = 2: p = 1 - |t| / sqrt(2 + t^2)
        for t in [0.1, 0.5, 1.0, 3.0, 20.0] {
            let exact = 1.0 - t / f64::sqrt(2.0 + t * t);
            assert!((t_pvalue(t, 2).unwrap() - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn pvalue_monotone_in_abs_t() {
        for dof in [1, 3, 10, 100] {
            let mut prev = 1.0;
            for i in 1..200 {
                let p = t_pvalue(i as f64 * 0.05, dof).unwrap();
                assert!(p < prev, "dof {dof} step {i}");
                prev = p;
            }
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(10.5) - 13.940_625_219_403_763).abs() < 1e-12);
    }

    #[test]
    fn constant_response() {
        let s = [0.1, 0.4, 0.2, 0.9, 0.5, 0.7];
        let z = vec![vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0]];
        let fit = fit_glm(&[2.5; 6], &s, &z).unwrap();
        assert!((fit.coefficients[0] - 2.5).abs() < 1e-12);
        assert!(fit.coefficients[1].abs() < 1e-12);
        assert!(fit.coefficients[2].abs() < 1e-12);
        assert_eq!(fit.t_stats[2], 0.0);
        assert_eq!(fit.p_values[2], 1.0);
        assert!(fit.degenerate);
    }

    #[test]
    fn collinear_column_is_named() {
        let s = [0.0, 0.25, 0.5, 0.75, 1.0];
        let z = vec![s.iter().map(|v| 2.0 * v + 1.0).collect()];
        match fit_glm(&[1.0, 2.0, 3.0, 5.0, 4.0], &s, &z) {
            Err(Error::Singular { column }) => assert_eq!(column, "z1"),
            other => panic!("{other:?}"),
        }
        match fit_glm(&[1.0, 2.0, 3.0, 5.0, 4.0], &[0.3; 5], &[]) {
            Err(Error::Singular { column }) => assert_eq!(column, "score"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_rows_is_dof_error() {
        let z = vec![vec![1.0, 2.0, 4.0]];
        assert!(matches!(
            fit_glm(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.2], &z),
            Err(Error::Dof { .. })
        ));
    }

    #[test]
    fn degenerate_perfect_fit() {
        let s = [0.0, 0.25, 0.5, 0.75, 1.0];
        let z = vec![vec![1.0, 3.0, 2.0, 5.0, 4.0]];
        let f: Vec<f64> = z[0].iter().map(|v| 2.0 * v + 1.0).collect();
        let fit = fit_glm(&f, &s, &z).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.p_values[2], 0.0);
        assert_eq!(fit.p_values[1], 1.0);
    }

    #[test]
    fn alpha_near_zero_never_confounds() {
        let s = [0.0, 0.25, 0.5, 0.75, 1.0];
        let z = vec![vec![1.0, 3.0, 2.0, 5.0, 4.0]];
        let f = [1.1, 1.9, 3.2, 3.8, 5.1];
        let t = test_feature(&f, &s, &z, 1e-300).unwrap();
        assert!(!t.confounded);
        assert!(test_feature(&f, &s, &z, 0.0).is_err());
        assert!(test_feature(&f, &s, &z, 1.0).is_err());
    }

    #[test]
    fn mask_marks_zero_variance_columns_retained() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![1.0, i as f64 * 0.3 + (i as f64).sin(), 0.0])
            .collect();
        let fm = FeatureMatrix::from_rows(rows, "t").unwrap();
        let s: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let z = vec![(0..20).map(|i| i as f64).collect()];
        let opts = MaskOptions {
            alpha: 0.05,
            bonferroni: false,
        };
        let (mask, report) = build_confound_mask(&fm, &s, &z, &["age".into()], &opts).unwrap();
        assert!(report.features[0].zero_variance);
        assert!(report.features[2].zero_variance);
        assert!(mask.bits()[0] && mask.bits()[2]);
        assert!(!mask.bits()[1]);
        assert_eq!(report.mask, "101");
        assert_eq!(report.n_confounded, 1);
        assert_eq!(report.confound_mask().unwrap().bits(), mask.bits());
    }

    #[test]
    fn bonferroni_divides_alpha() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).cos(), (i as f64 * 1.7).sin()]).collect();
        let fm = FeatureMatrix::from_rows(rows, "t").unwrap();
        let s: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).fract()).collect();
        let z = vec![(0..30).map(|i| (i as f64 * 0.61).fract()).collect()];
        let opts = MaskOptions {
            alpha: 0.05,
            bonferroni: true,
        };
        let (mask, _) = build_confound_mask(&fm, &s, &z, &["z".into()], &opts).unwrap();
        assert!((mask.threshold - 0.025).abs() < 1e-15);
    }

    #[test]
    fn bit_string_round_trip_and_errors() {
        let m = ConfoundMask::parse_bit_string("10110").unwrap();
        assert_eq!(m.to_bit_string(), "10110");
        assert_eq!(m.n_confounded(), 2);
        assert!(ConfoundMask::parse_bit_string("10a").is_err());
        assert!(ConfoundMask::parse_bit_string("").is_err());
    }

    #[test]
    fn feature_csv_round_trip() {
        let fm = FeatureMatrix::from_rows(vec![vec![0.1, 2.0], vec![-3.5, 1e-17]], "m").unwrap();
        let back = FeatureMatrix::from_csv(&fm.to_csv(), "m").unwrap();
        assert_eq!(back, fm);
        assert!(FeatureMatrix::from_csv("f_0,g\n1,2\n", "m").is_err());
    }
}
