//! Training objectives and their exact gradients.
//!
//! Spectral losses compare the DFT amplitude and principal phase of two
//! equal-length signals. SoftCLIP is the one-directional soft-target
//! contrastive loss; the prior term is a plain MSE stand-in for a diffusion
//! prior. Every loss comes with a `*_grad` twin returning gradients with
//! respect to all of its inputs.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::Supervision;
use crate::error::{Error, Result};
use crate::spectral::{self, phase_of, wrap_angle, EPS_PHASE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(rename = "softclip")]
    pub w_softclip: f64,
    #[serde(rename = "prior")]
    pub w_prior: f64,
    #[serde(rename = "amp")]
    pub w_amp: f64,
    #[serde(rename = "pha")]
    pub w_pha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_softclip: 1.0,
            w_prior: 30.0,
            w_amp: 2.0,
            w_pha: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_softclip, self.w_prior, self.w_amp, self.w_pha];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Component names as they appear in reports and `train_log.csv`.
pub const COMPONENTS: [&str; 5] = ["softclip", "prior", "amp", "pha", "mse"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Unweighted component values of the enabled terms.
    pub components: BTreeMap<String, f64>,
    /// Weight applied to each enabled component.
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    fn push(&mut self, name: &str, weight: f64, value: f64) {
        self.components.insert(name.to_string(), value);
        self.weights.insert(name.to_string(), weight);
        self.total += weight * value;
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    /// Weighted component sum, recomputed in a fixed order.
    pub fn weighted_sum(&self) -> f64 {
        COMPONENTS
            .iter()
            .filter_map(|c| Some(self.weights.get(*c)? * self.components.get(*c)?))
            .sum()
    }
}

fn check_len(a: &[f64], b: &[f64], what: &'static str) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::shape(what, a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty signal")));
    }
    Ok(a.len())
}

// ---------------------------------------------------------------------------
// Spectral losses

struct Polar {
    f: Vec<Complex64>,
    amp: Vec<f64>,
    pha: Vec<f64>,
}

fn polar(x: &[f64]) -> Result<Polar> {
    let f = spectral::dft_complex(x)?;
    let (amp, pha) = f
        .iter()
        .map(|c| {
            let a = c.re.hypot(c.im);
            (a, phase_of(c.re, c.im, a))
        })
        .unzip();
    Ok(Polar { f, amp, pha })
}

pub fn l_amp(xi: &[f64], xj: &[f64]) -> Result<f64> {
    let n = check_len(xi, xj, "l_amp")?;
    let (pi, pj) = (polar(xi)?, polar(xj)?);
    Ok(pi
        .amp
        .iter()
        .zip(&pj.amp)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n as f64)
}

/// `(value, d/dxi, d/dxj)` of the amplitude loss.
pub fn l_amp_grad(xi: &[f64], xj: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = check_len(xi, xj, "l_amp")?;
    let (pi, pj) = (polar(xi)?, polar(xj)?);
    let nf = n as f64;
    let mut value = 0.0;
    let mut ci = Vec::with_capacity(n);
    let mut cj = Vec::with_capacity(n);
    for k in 0..n {
        let d = pi.amp[k] - pj.amp[k];
        value += d * d;
        let g = 2.0 * d / nf;
        // dA/dF = F / |F|, zero at the origin
        ci.push(unit_or_zero(pi.f[k], pi.amp[k]) * g);
        cj.push(unit_or_zero(pj.f[k], pj.amp[k]) * -g);
    }
    Ok((
        value / nf,
        spectral::real_adjoint(&ci),
        spectral::real_adjoint(&cj),
    ))
}

fn unit_or_zero(f: Complex64, a: f64) -> Complex64 {
    if a < EPS_PHASE {
        Complex64::new(0.0, 0.0)
    } else {
        f / a
    }
}

fn phase_diff(a: f64, b: f64, wrap: bool) -> f64 {
    if wrap {
        wrap_angle(a - b)
    } else {
        a - b
    }
}

pub fn l_pha(xi: &[f64], xj: &[f64], wrap: bool) -> Result<f64> {
    let n = check_len(xi, xj, "l_pha")?;
    let (pi, pj) = (polar(xi)?, polar(xj)?);
    Ok(pi
        .pha
        .iter()
        .zip(&pj.pha)
        .map(|(a, b)| phase_diff(*a, *b, wrap).powi(2))
        .sum::<f64>()
        / n as f64)
}

/// `(value, d/dxi, d/dxj)` of the phase loss. The principal-value branch cut
/// is a measure-zero set and contributes no gradient.
pub fn l_pha_grad(xi: &[f64], xj: &[f64], wrap: bool) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = check_len(xi, xj, "l_pha")?;
    let (pi, pj) = (polar(xi)?, polar(xj)?);
    let nf = n as f64;
    let mut value = 0.0;
    let mut ci = Vec::with_capacity(n);
    let mut cj = Vec::with_capacity(n);
    for k in 0..n {
        let d = phase_diff(pi.pha[k], pj.pha[k], wrap);
        value += d * d;
        let g = 2.0 * d / nf;
        // dP/dx[n] = Re(i F exp(+i theta) / |F|^2)
        ci.push(phase_coeff(pi.f[k], pi.amp[k]) * g);
        cj.push(phase_coeff(pj.f[k], pj.amp[k]) * -g);
    }
    Ok((
        value / nf,
        spectral::real_adjoint(&ci),
        spectral::real_adjoint(&cj),
    ))
}

fn phase_coeff(f: Complex64, a: f64) -> Complex64 {
    if a < EPS_PHASE {
        Complex64::new(0.0, 0.0)
    } else {
        Complex64::new(0.0, 1.0) * f / (a * a)
    }
}

pub fn l_fourier(xi: &[f64], xj: &[f64], wrap: bool) -> Result<f64> {
    Ok(l_amp(xi, xj)? + l_pha(xi, xj, wrap)?)
}

pub fn l_mse_signal(xi: &[f64], xj: &[f64]) -> Result<f64> {
    let n = check_len(xi, xj, "l_mse_signal")?;
    Ok(xi.iter().zip(xj).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64)
}

pub fn l_mse_signal_grad(xi: &[f64], xj: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = check_len(xi, xj, "l_mse_signal")? as f64;
    let gi: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let gj = gi.iter().map(|g| -g).collect();
    Ok((l_mse_signal(xi, xj)?, gi, gj))
}

// ---------------------------------------------------------------------------
// Contrastive and prior losses

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            what,
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

fn normalize_rows(m: ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{what}: row {i} has zero or non-finite norm"
        )));
    }
    let u = &m / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Pulls a gradient on normalized rows `u = e / |e|` back to `e`.
fn normalize_rows_backward(u: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let mut de = du.clone();
    Zip::from(de.rows_mut())
        .and(u.rows())
        .and(norms)
        .for_each(|mut d, u, &n| {
            let proj = u.dot(&d);
            d.zip_mut_with(&u, |dv, uv| *dv = (*dv - uv * proj) / n);
        });
    de
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean row cross-entropy `-(1/B) sum_ij T_ij log softmax(S)_ij`, with
/// gradients w.r.t. the logits and the targets. Target rows sum to one.
fn soft_cross_entropy(
    logits: &Array2<f64>,
    targets: &Array2<f64>,
) -> (f64, Array2<f64>, Array2<f64>) {
    let b = logits.nrows() as f64;
    let logp = log_softmax_rows(logits);
    let loss = -(targets * &logp).sum() / b;
    let d_logits = (logp.mapv(f64::exp) - targets) / b;
    let d_targets = -&logp / b;
    (loss, d_logits, d_targets)
}

fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.dim());
    Zip::from(out.rows_mut())
        .and(p.rows())
        .and(dp.rows())
        .for_each(|mut o, p, d| {
            let dot = p.dot(&d);
            Zip::from(&mut o)
                .and(&p)
                .and(&d)
                .for_each(|o, &p, &d| *o = p * (d - dot));
        });
    out
}

fn check_softclip(e_b: ArrayView2<f64>, e_i: ArrayView2<f64>, tau: f64) -> Result<()> {
    check_pair(e_b, e_i, "softclip_loss")?;
    if e_b.nrows() < 2 {
        return Err(Error::InvalidInput(format!(
            "softclip needs B >= 2, got {}",
            e_b.nrows()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Soft targets `softmax(v v^T / tau)` of the normalized target rows.
pub fn softclip_targets(e_i: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
    let (v, _) = normalize_rows(e_i, "softclip targets")?;
    Ok(softmax_rows(&(v.dot(&v.t()) / tau)))
}

/// Mean row entropy of the soft targets: the floor of the SoftCLIP loss.
pub fn softclip_floor(e_i: ArrayView2<f64>, tau: f64) -> Result<f64> {
    let t = softclip_targets(e_i, tau)?;
    let b = t.nrows() as f64;
    Ok(-t
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
        / b)
}

pub fn softclip_loss(
    e_b: ArrayView2<f64>,
    e_i: ArrayView2<f64>,
    tau: f64,
    bidirectional: bool,
) -> Result<f64> {
    Ok(softclip_grad(e_b, e_i, tau, bidirectional)?.0)
}

/// `(value, d/de_b, d/de_i)` of SoftCLIP.
pub fn softclip_grad(
    e_b: ArrayView2<f64>,
    e_i: ArrayView2<f64>,
    tau: f64,
    bidirectional: bool,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_softclip(e_b, e_i, tau)?;
    let (u, nu) = normalize_rows(e_b, "brain embeddings")?;
    let (v, nv) = normalize_rows(e_i, "target embeddings")?;
    let s = u.dot(&v.t()) / tau;
    let t = softmax_rows(&(v.dot(&v.t()) / tau));

    let (mut loss, mut ds, mut dt) = soft_cross_entropy(&s, &t);
    if bidirectional {
        let st = s.t().to_owned();
        let (l2, ds2, dt2) = soft_cross_entropy(&st, &t);
        loss = 0.5 * (loss + l2);
        ds = 0.5 * (ds + ds2.t());
        dt = 0.5 * (dt + dt2);
    }
    let dq = softmax_rows_backward(&t, &dt);
    let du = ds.dot(&v) / tau;
    let dv = (ds.t().dot(&u) + (&dq + &dq.t()).dot(&v)) / tau;
    Ok((
        loss,
        normalize_rows_backward(&u, &nu, &du),
        normalize_rows_backward(&v, &nv, &dv),
    ))
}

/// Mean squared error between the prior head output and the target.
pub fn prior_loss(e_refined: ArrayView2<f64>, e_i: ArrayView2<f64>) -> Result<f64> {
    check_pair(e_refined, e_i, "prior_loss")?;
    let n = e_refined.len().max(1) as f64;
    Ok(Zip::from(&e_refined)
        .and(&e_i)
        .fold(0.0, |acc, a, b| acc + (a - b).powi(2))
        / n)
}

pub fn prior_grad(e_refined: ArrayView2<f64>, e_i: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let value = prior_loss(e_refined, e_i)?;
    let n = e_refined.len().max(1) as f64;
    Ok((value, (&e_refined - &e_i) * (2.0 / n)))
}

// ---------------------------------------------------------------------------
// Composites

/// Everything needed to evaluate a training objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub tau: f64,
    pub weights: LossWeights,
    pub supervision: Supervision,
    pub bidirectional: bool,
    pub wrap_phase_diff: bool,
    pub use_prior: bool,
}

impl LossSpec {
    pub fn semantic(tau: f64, weights: LossWeights) -> Self {
        LossSpec {
            tau,
            weights,
            supervision: Supervision::None,
            bidirectional: false,
            wrap_phase_diff: false,
            use_prior: true,
        }
    }

    pub fn with_supervision(mut self, supervision: Supervision) -> Self {
        self.supervision = supervision;
        self
    }
}

/// Gradients of a composite objective with respect to its inputs.
#[derive(Clone, Debug)]
pub struct ObjectiveGrads {
    pub d_brain: Array2<f64>,
    pub d_refined: Array2<f64>,
    /// Gradient w.r.t. the adapted new-subject signals, when cross-subject
    /// terms are active.
    pub d_adapted: Option<Array2<f64>>,
}

/// Evaluates the weighted objective and its gradients.
///
/// `cross` holds `(x_i_hat, x_j)` row-aligned pairs; it is required whenever
/// the supervision mode is not `None`. Cross-subject terms are averaged
/// over rows. The `mse` mode is weighted by `w_amp`.
pub fn objective(
    spec: &LossSpec,
    e_b: ArrayView2<f64>,
    e_refined: ArrayView2<f64>,
    e_i: ArrayView2<f64>,
    cross: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
) -> Result<(LossReport, ObjectiveGrads)> {
    let w = &spec.weights;
    let mut report = LossReport::default();

    let (sc, d_sc, _) = softclip_grad(e_b, e_i, spec.tau, spec.bidirectional)?;
    report.push("softclip", w.w_softclip, sc);
    let d_brain = d_sc * w.w_softclip;

    let mut d_refined = Array2::zeros(e_refined.dim());
    if spec.use_prior {
        let (pr, d_pr) = prior_grad(e_refined, e_i)?;
        report.push("prior", w.w_prior, pr);
        d_refined = d_pr * w.w_prior;
    }

    let d_adapted = match (spec.supervision, cross) {
        (Supervision::None, _) => None,
        (_, None) => {
            return Err(Error::InvalidInput(
                "cross-subject supervision requested without partner signals".into(),
            ))
        }
        (mode, Some((xi, xj))) => {
            check_pair(xi, xj, "cross-subject pairs")?;
            let rows = xi.nrows() as f64;
            let mut grad = Array2::zeros(xi.dim());
            let mut acc = |name: &str,
                           weight: f64,
                           f: &dyn Fn(&[f64], &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>|
             -> Result<()> {
                let mut total = 0.0;
                for (r, (a, b)) in xi.rows().into_iter().zip(xj.rows()).enumerate() {
                    let (a, b) = (a.to_vec(), b.to_vec());
                    let (v, ga, _) = f(&a, &b)?;
                    total += v;
                    grad.row_mut(r)
                        .zip_mut_with(&Array1::from(ga), |g, d| *g += weight * d / rows);
                }
                report.push(name, weight, total / rows);
                Ok(())
            };
            let wrap = spec.wrap_phase_diff;
            match mode {
                Supervision::Mse => acc("mse", w.w_amp, &|a, b| l_mse_signal_grad(a, b))?,
                Supervision::Amp => acc("amp", w.w_amp, &|a, b| l_amp_grad(a, b))?,
                Supervision::Fourier => {
                    acc("amp", w.w_amp, &|a, b| l_amp_grad(a, b))?;
                    acc("pha", w.w_pha, &|a, b| l_pha_grad(a, b, wrap))?;
                }
                Supervision::None => unreachable!(),
            }
            Some(grad)
        }
    };

    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss components {:?}",
            report.components
        )));
    }
    Ok((
        report,
        ObjectiveGrads {
            d_brain,
            d_refined,
            d_adapted,
        },
    ))
}

/// `w_softclip * softclip + w_prior * prior`.
pub fn l_semantic(
    e_b: ArrayView2<f64>,
    e_refined: ArrayView2<f64>,
    e_i: ArrayView2<f64>,
    tau: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    let spec = LossSpec::semantic(tau, *weights);
    Ok(objective(&spec, e_b, e_refined, e_i, None)?.0)
}

/// Semantic loss plus weighted amplitude and phase terms between the adapted
/// new-subject signals and their pooled pretrained-subject partners.
pub fn l_total(
    e_b: ArrayView2<f64>,
    e_refined: ArrayView2<f64>,
    e_i: ArrayView2<f64>,
    x_i_hat: ArrayView2<f64>,
    x_j_hat: ArrayView2<f64>,
    tau: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    let spec = LossSpec::semantic(tau, *weights).with_supervision(Supervision::Fourier);
    Ok(objective(&spec, e_b, e_refined, e_i, Some((x_i_hat, x_j_hat)))?.0)
}
