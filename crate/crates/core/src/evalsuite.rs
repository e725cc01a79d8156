//! Sample-quality metrics in classifier feature space, the per-step entropy
//! diagnostic, and SVG figure output.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffnet::dist::xlogx;
use crate::diffnet::{Classifier, Denoiser};
use crate::error::{Error, Result};
use crate::sampler::sample;
use crate::schedule::{NoiseSchedule, TimeGrid};

/// Gaussian fit (mean, unbiased covariance) of a feature cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `F x F`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_features(features: &Array2<f64>) -> Result<Self> {
        let (m, f) = features.dim();
        if m < 2 {
            return Err(Error::Argument(format!(
                "feature statistics need at least 2 samples, got {m}"
            )));
        }
        let mean = features.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let centered = features - &mean;
        let cov = centered.t().dot(&centered) / (m - 1) as f64;
        let mut covariance = Vec::with_capacity(f * f);
        for i in 0..f {
            for j in 0..f {
                covariance.push(0.5 * (cov[[i, j]] + cov[[j, i]]));
            }
        }
        Ok(FeatureStats {
            mean: mean.to_vec(),
            covariance,
            count: m,
        })
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

/// Feature statistics of `samples` under the classifier's extractor.
pub fn feature_stats(classifier: &Classifier, samples: &Array2<f64>) -> Result<FeatureStats> {
    if samples.nrows() < classifier.feature_dim() + 1 && samples.nrows() >= 2 {
        eprintln!(
            "warning: {} samples for {} features gives a rank-deficient covariance",
            samples.nrows(),
            classifier.feature_dim()
        );
    }
    FeatureStats::from_features(&classifier.extract_batch(samples)?)
}

const PSD_TOLERANCE: f64 = 1e-9;

/// Symmetric PSD square root via eigendecomposition; small negative
/// eigenvalues (within tolerance) are clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -PSD_TOLERANCE * scale) {
        return Err(Error::Numeric("matrix is not positive semi-definite".into()));
    }
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `Tr((A B)^{1/2})` for PSD `A`, `B`, computed as `Tr((A^{1/2} B A^{1/2})^{1/2})`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = psd_sqrt(a)?;
    let inner = &ra * b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -1e-6 * scale) {
        return Err(Error::Numeric("covariance product is not PSD".into()));
    }
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum())
}

/// The matrix `(A B)^{1/2} = A^{1/2} (A^{1/2} B A^{1/2})^{1/2} A^{-1/2}`;
/// requires `A` positive definite.
pub fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ra = psd_sqrt(a)?;
    let ra_inv = ra
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("covariance is singular".into()))?;
    let inner = &ra * b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    Ok(&ra * psd_sqrt(&inner)? * ra_inv)
}

/// Squared Fréchet distance between two Gaussian fits, clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "feature dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (ca, cb) = (a.cov_matrix(), b.cov_matrix());
    let cross = trace_sqrt_product(&ca, &cb)?;
    let d = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    if d < -1e-6 {
        return Err(Error::Numeric(format!("negative Fréchet distance {d}")));
    }
    Ok(d.max(0.0))
}

/// `exp(mean_x KL(p(y|x) || p_bar(y)))` from a matrix of class probabilities.
pub fn inception_style_score_from_probs(probs: &Array2<f64>) -> Result<f64> {
    if probs.nrows() == 0 {
        return Err(Error::Argument("score of an empty sample set".into()));
    }
    let marginal = probs.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let mut total = 0.0;
    for row in probs.rows() {
        total += row
            .iter()
            .zip(marginal.iter())
            .map(|(&p, &m)| if p > 0.0 { xlogx(p) - p * m.ln() } else { 0.0 })
            .sum::<f64>();
    }
    let classes = probs.ncols() as f64;
    Ok((total / probs.nrows() as f64).exp().clamp(1.0, classes))
}

pub fn inception_style_score(classifier: &Classifier, samples: &Array2<f64>) -> Result<f64> {
    inception_style_score_from_probs(&classifier.predict_proba(samples)?)
}

/// Mean entropy of per-row class probabilities.
pub fn mean_entropy(probs: &Array2<f64>) -> f64 {
    probs
        .rows()
        .into_iter()
        .map(|r| -r.iter().map(|&p| xlogx(p)).sum::<f64>())
        .sum::<f64>()
        / probs.nrows().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntropy {
    pub step: usize,
    pub t: f64,
    pub entropy: f64,
}

/// Mean prediction entropy of each step's predicted clean point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntropyProfile {
    pub steps: Vec<StepEntropy>,
    pub sample_count: usize,
}

impl StepEntropyProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t,mean_entropy\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{:.6},{:.9}", s.step, s.t, s.entropy);
        }
        out
    }
}

pub fn entropy_profile(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    classifier: &Classifier,
    noise: &Array2<f64>,
) -> Result<StepEntropyProfile> {
    if noise.nrows() == 0 {
        return Err(Error::Argument("entropy profile needs at least one sample".into()));
    }
    let traj = sample(model, schedule, grid, noise, true)?;
    let steps = traj
        .steps
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let probs = classifier.predict_proba(&rec.x_hat)?;
            Ok(StepEntropy {
                step: i + 1,
                t: rec.t,
                entropy: mean_entropy(&probs),
            })
        })
        .collect::<Result<_>>()?;
    Ok(StepEntropyProfile {
        steps,
        sample_count: noise.nrows(),
    })
}

// ---- SVG figures --------------------------------------------------------

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(xs: impl Iterator<Item = &'a f64> + Clone, ys: impl Iterator<Item = &'a f64> + Clone) -> Frame {
        let (mut x0, mut x1) = bounds(xs);
        let (mut y0, mut y1) = bounds(ys);
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let (px, py) = (0.05 * (x1 - x0), 0.05 * (y1 - y0));
        Frame {
            x0: x0 - px,
            x1: x1 + px,
            y0: y0 - py,
            y1: y1 + py,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn bounds<'a>(v: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str, x_label: &str, y_label: &str, frame: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l:.1},{t:.1} L{l:.1},{b:.1} L{r:.1},{b:.1}" fill="none" stroke="black"/>"#
    );
    for (i, frac) in [0.0, 0.5, 1.0].iter().enumerate() {
        let xv = frame.x0 + frac * (frame.x1 - frame.x0);
        let yv = frame.y0 + frac * (frame.y1 - frame.y0);
        let anchor = ["start", "middle", "end"][i];
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}" font-family="sans-serif" font-size="10">{xv:.3}</text>"#,
            frame.px(xv),
            b + 14.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="10">{yv:.3}</text>"#,
            l - 4.0,
            frame.py(yv) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {:.1})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    s
}

fn no_data(s: &mut String) {
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="14" fill="gray">no data</text>"#,
        WIDTH / 2.0,
        HEIGHT / 2.0
    );
}

fn legend(s: &mut String, i: usize, label: &str, color: &str) {
    let y = MARGIN + 14.0 * i as f64;
    let _ = writeln!(
        s,
        r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10">{}</text>"#,
        WIDTH - MARGIN - 110.0,
        y - 9.0,
        WIDTH - MARGIN - 96.0,
        y,
        escape(label)
    );
}

/// Scatter plot of labeled point clouds (first two coordinates).
pub fn scatter_svg(title: &str, series: &[(&str, &Array2<f64>)]) -> String {
    let all_x: Vec<f64> = series.iter().flat_map(|(_, p)| p.column(0).to_vec()).collect();
    let all_y: Vec<f64> = series
        .iter()
        .flat_map(|(_, p)| if p.ncols() > 1 { p.column(1).to_vec() } else { vec![] })
        .collect();
    let frame = Frame::fit(all_x.iter(), all_y.iter());
    let mut s = svg_open(title, "x1", "x2", &frame);
    if all_x.is_empty() {
        no_data(&mut s);
    }
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        legend(&mut s, k, label, color);
        if pts.ncols() < 2 {
            continue;
        }
        for row in pts.rows() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{color}" fill-opacity="0.5"/>"#,
                frame.px(row[0]),
                frame.py(row[1])
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// A horizontal reference line drawn across a line chart.
#[derive(Debug, Clone)]
pub struct Reference<'a> {
    pub label: &'a str,
    pub value: f64,
}

/// Line chart of one or more `(x, y)` series with optional reference lines.
pub fn line_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
    references: &[Reference<'_>],
) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .chain(references.iter().map(|r| r.value))
        .collect();
    let frame = Frame::fit(xs.iter(), ys.iter());
    let mut s = svg_open(title, x_label, y_label, &frame);
    if xs.is_empty() {
        no_data(&mut s);
    }
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        legend(&mut s, k, label, color);
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        if !coords.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                coords.join(" ")
            );
        }
        for &(x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
    }
    for (k, r) in references.iter().enumerate() {
        let color = PALETTE[(series.len() + k) % PALETTE.len()];
        let y = frame.py(r.value);
        let _ = writeln!(
            s,
            r#"<line x1="{MARGIN:.1}" y1="{y:.2}" x2="{:.1}" y2="{y:.2}" stroke="{color}" stroke-dasharray="5,4"/>"#,
            WIDTH - MARGIN
        );
        legend(&mut s, series.len() + k, r.label, color);
    }
    s.push_str("</svg>\n");
    s
}

// ---- Metrics table ------------------------------------------------------

pub const METRICS_HEADER: &str = "run_id,stage,steps,loss_kind,tau,beta,gamma,seed,ffd,is_like,wall_seconds";

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub stage: String,
    pub steps: usize,
    pub loss_kind: String,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub ffd: f64,
    pub is_like: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.9},{:.9},{:.3}",
            self.run_id,
            self.stage,
            self.steps,
            self.loss_kind,
            self.tau,
            self.beta,
            self.gamma,
            self.seed,
            self.ffd,
            self.is_like,
            self.wall_seconds
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 11 {
            return Err(Error::Argument(format!("metrics row has {} fields, expected 11", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Argument(format!("bad number `{}` in metrics row", f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse().map_err(|_| Error::Argument(format!("bad integer `{}` in metrics row", f[i])))
        };
        Ok(MetricsRow {
            run_id: f[0].to_string(),
            stage: f[1].to_string(),
            steps: int(2)? as usize,
            loss_kind: f[3].to_string(),
            tau: num(4)?,
            beta: num(5)?,
            gamma: num(6)?,
            seed: int(7)?,
            ffd: num(8)?,
            is_like: num(9)?,
            wall_seconds: num(10)?,
        })
    }
}

/// Parses a metrics table, skipping the header.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && *l != METRICS_HEADER)
        .map(MetricsRow::parse_csv_line)
        .collect()
}

/// Sample quality of a sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerScore {
    pub ffd: f64,
    pub is_like: f64,
}

/// Runs the sampler from `noise` and scores its terminal samples against
/// cached real-data statistics.
pub fn score_sampler(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    classifier: &Classifier,
    real: &FeatureStats,
    noise: &Array2<f64>,
) -> Result<SamplerScore> {
    let samples = sample(model, schedule, grid, noise, false)?.samples;
    let stats = feature_stats(classifier, &samples)?;
    Ok(SamplerScore {
        ffd: frechet_distance(&stats, real)?,
        is_like: inception_style_score(classifier, &samples)?,
    })
}
