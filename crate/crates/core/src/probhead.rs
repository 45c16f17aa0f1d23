//! Discrete per-step distributions over fixed support sets.
//!
//! Support points are built from a partition of `[-B, B]`; a head projects
//! branch features to `T x S` logits, softmax turns every row into a
//! distribution, and the regression value is its expectation. Two branches on
//! interleaved supports are fused by their per-step maximum probability.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Linear};

/// How support points are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportFlavor {
    /// Cells of equal truncated standard-normal mass.
    EqualProbability,
    /// Cells of equal width.
    Uniform,
    /// Midpoints of another set plus one boundary point.
    Interleaved,
}

impl std::str::FromStr for SupportFlavor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal_probability" | "equal-probability" => Ok(SupportFlavor::EqualProbability),
            "uniform" => Ok(SupportFlavor::Uniform),
            "interleaved" => Ok(SupportFlavor::Interleaved),
            other => Err(Error::InvalidArgument(format!(
                "unknown support flavor {other:?} (expected equal_probability, uniform or interleaved)"
            ))),
        }
    }
}

impl std::fmt::Display for SupportFlavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SupportFlavor::EqualProbability => "equal_probability",
            SupportFlavor::Uniform => "uniform",
            SupportFlavor::Interleaved => "interleaved",
        })
    }
}

/// Which end of `[-B, B]` is appended to the interleaved set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppendedBoundary {
    #[default]
    Upper,
    Lower,
}

/// Sorted support points with the cell edges they were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    points: Vec<f64>,
    /// `S + 1` increasing cell edges spanning `[-B, B]`.
    edges: Vec<f64>,
    boundary: f64,
    flavor: SupportFlavor,
}

fn check_support_args(count: usize, boundary: f64) -> Result<()> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "support set needs at least 2 points, got {count}"
        )));
    }
    if !(boundary > 0.0 && boundary.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "support boundary must be positive, got {boundary}"
        )));
    }
    Ok(())
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Solve `Phi(x) = target` on `[lo, hi]` by bisection to an absolute width of 1e-12.
fn invert_cdf(target: f64, mut lo: f64, mut hi: f64) -> f64 {
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if normal_cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn midpoints(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

impl SupportSet {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn boundary(&self) -> f64 {
        self.boundary
    }

    pub fn flavor(&self) -> SupportFlavor {
        self.flavor
    }

    pub fn min(&self) -> f64 {
        self.points[0]
    }

    pub fn max(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Standard-normal probability mass of every cell.
    pub fn cell_masses(&self) -> Vec<f64> {
        self.edges
            .windows(2)
            .map(|w| normal_cdf(w[1]) - normal_cdf(w[0]))
            .collect()
    }

    pub fn build(flavor: SupportFlavor, count: usize, boundary: f64) -> Result<Self> {
        match flavor {
            SupportFlavor::EqualProbability => build_support_set(count, boundary),
            SupportFlavor::Uniform => build_uniform_support_set(count, boundary),
            SupportFlavor::Interleaved => {
                let base = build_support_set(count, boundary)?;
                build_interleaved_set(&base, AppendedBoundary::Upper)
            }
        }
    }
}

/// Equal-probability support set: `S` cells of equal standard-normal mass
/// truncated to `[-B, B]`, one point at the middle of each cell.
pub fn build_support_set(count: usize, boundary: f64) -> Result<SupportSet> {
    check_support_args(count, boundary)?;
    let lo = normal_cdf(-boundary);
    let hi = normal_cdf(boundary);
    let mut edges = Vec::with_capacity(count + 1);
    edges.push(-boundary);
    for j in 1..count {
        let target = lo + (j as f64 / count as f64) * (hi - lo);
        edges.push(invert_cdf(target, -boundary, boundary));
    }
    edges.push(boundary);
    // exact symmetry: mirror the lower half onto the upper half
    for j in 0..=count / 2 {
        let m = -edges[count - j];
        if j < count - j {
            edges[j] = if j == 0 { -boundary } else { 0.5 * (edges[j] + m) };
            edges[count - j] = -edges[j];
        }
    }
    if count.is_multiple_of(2) {
        edges[count / 2] = 0.0;
    }
    Ok(SupportSet {
        points: midpoints(&edges),
        edges,
        boundary,
        flavor: SupportFlavor::EqualProbability,
    })
}

/// Uniform support set: midpoints of `S` equal-width cells of `[-B, B]`.
pub fn build_uniform_support_set(count: usize, boundary: f64) -> Result<SupportSet> {
    check_support_args(count, boundary)?;
    let width = 2.0 * boundary / count as f64;
    let edges: Vec<f64> = (0..=count).map(|j| -boundary + j as f64 * width).collect();
    let points = (0..count)
        .map(|j| -boundary + (j as f64 + 0.5) * width)
        .collect();
    Ok(SupportSet {
        points,
        edges,
        boundary,
        flavor: SupportFlavor::Uniform,
    })
}

/// Interleaved companion of `base`: its `S - 1` adjacent midpoints plus one
/// boundary point, sorted.
pub fn build_interleaved_set(base: &SupportSet, side: AppendedBoundary) -> Result<SupportSet> {
    check_support_args(base.len(), base.boundary)?;
    let b = base.boundary;
    let mut points = midpoints(&base.points);
    match side {
        AppendedBoundary::Upper => points.push(b),
        AppendedBoundary::Lower => points.insert(0, -b),
    }
    // cells: halfway between neighbours, clipped to the boundary
    let mut edges = vec![-b];
    edges.extend(midpoints(&points));
    edges.push(b);
    Ok(SupportSet {
        points,
        edges,
        boundary: b,
        flavor: SupportFlavor::Interleaved,
    })
}

/// `T x S` row-stochastic matrix of per-step probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDistribution {
    pub probs: Array2<f64>,
}

impl StepDistribution {
    pub fn steps(&self) -> usize {
        self.probs.nrows()
    }

    pub fn support_len(&self) -> usize {
        self.probs.ncols()
    }

    /// Distribution from `T x S` logits.
    pub fn from_logits(logits: ArrayView2<f64>) -> Self {
        Self {
            probs: softmax_rows(logits),
        }
    }

    /// Largest probability of every row.
    pub fn confidence(&self) -> Vec<f64> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .collect()
    }
}

/// Project `2T` branch features through a head to `T_out x S` and softmax each row.
pub fn project_distribution(
    features: ArrayView1<f64>,
    head: &Linear<f64>,
    steps: usize,
    support_len: usize,
) -> Result<StepDistribution> {
    if head.input_dim() != features.len() || head.output_dim() != steps * support_len {
        return Err(Error::Shape(format!(
            "head maps {} -> {}, expected {} -> {steps}x{support_len}",
            head.input_dim(),
            head.output_dim(),
            features.len()
        )));
    }
    let logits = head.forward(features.insert_axis(ndarray::Axis(0)));
    let logits = logits
        .into_shape_with_order((steps, support_len))
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(StepDistribution::from_logits(logits.view()))
}

/// Per-step expectation over the support points.
pub fn expectation(dist: &StepDistribution, support: &SupportSet) -> Result<Vec<f64>> {
    if dist.support_len() != support.len() {
        return Err(Error::Shape(format!(
            "distribution has {} columns, support set has {} points",
            dist.support_len(),
            support.len()
        )));
    }
    let sp = ArrayView1::from(support.points());
    Ok(dist.probs.dot(&sp).to_vec())
}

/// Confidence-weighted fusion of two branches.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    pub fused: Vec<f64>,
    pub weights: Vec<f64>,
    pub expectation_1: Vec<f64>,
    pub expectation_2: Vec<f64>,
    pub confidence_1: Vec<f64>,
    pub confidence_2: Vec<f64>,
}

/// Fusion weight from per-step confidences: `e1 / (e1 + e2)`.
pub fn fusion_weight(e1: f64, e2: f64) -> f64 {
    e1 / (e1 + e2)
}

/// `w * x1 + (1 - w) * x2`.
pub fn fuse(w: f64, x1: f64, x2: f64) -> f64 {
    w * x1 + (1.0 - w) * x2
}

pub fn confidence_fusion(
    dist1: &StepDistribution,
    dist2: &StepDistribution,
    sp1: &SupportSet,
    sp2: &SupportSet,
) -> Result<FusionResult> {
    if dist1.steps() != dist2.steps() {
        return Err(Error::Shape(format!(
            "branches predict {} and {} steps",
            dist1.steps(),
            dist2.steps()
        )));
    }
    let expectation_1 = expectation(dist1, sp1)?;
    let expectation_2 = expectation(dist2, sp2)?;
    let confidence_1 = dist1.confidence();
    let confidence_2 = dist2.confidence();
    let weights: Vec<f64> = confidence_1
        .iter()
        .zip(&confidence_2)
        .map(|(&a, &b)| fusion_weight(a, b))
        .collect();
    let fused = weights
        .iter()
        .zip(expectation_1.iter().zip(&expectation_2))
        .map(|(&w, (&a, &b))| fuse(w, a, b))
        .collect();
    Ok(FusionResult {
        fused,
        weights,
        expectation_1,
        expectation_2,
        confidence_1,
        confidence_2,
    })
}

/// Weighted union of two distributions on their sorted joint support.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedDistribution {
    /// Strictly increasing.
    pub points: Vec<f64>,
    /// `T x points.len()`, rows sum to one.
    pub probs: Array2<f64>,
}

/// Interleave `w * dist1` and `(1 - w) * dist2` on the union of both supports.
///
/// Rows are renormalized by their sum; with `literal_softmax` the weighted
/// masses are passed through a softmax instead. Points shared by both sets
/// are merged and their masses summed.
pub fn merge_distributions(
    dist1: &StepDistribution,
    dist2: &StepDistribution,
    weights: &[f64],
    sp1: &SupportSet,
    sp2: &SupportSet,
    literal_softmax: bool,
) -> Result<MergedDistribution> {
    let t = dist1.steps();
    if dist2.steps() != t || weights.len() != t {
        return Err(Error::Shape(format!(
            "merge needs matching steps: {} / {} / {} weights",
            t,
            dist2.steps(),
            weights.len()
        )));
    }
    if dist1.support_len() != sp1.len() || dist2.support_len() != sp2.len() {
        return Err(Error::Shape("distribution and support sizes differ".into()));
    }
    // (point, source, column) sorted by point
    let mut order: Vec<(f64, usize, usize)> = sp1
        .points()
        .iter()
        .enumerate()
        .map(|(j, &p)| (p, 0, j))
        .chain(sp2.points().iter().enumerate().map(|(j, &p)| (p, 1, j)))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut points: Vec<f64> = Vec::with_capacity(order.len());
    let mut slot = Vec::with_capacity(order.len());
    for &(p, _, _) in &order {
        if points.last().is_none_or(|&last| p > last) {
            points.push(p);
        }
        slot.push(points.len() - 1);
    }
    let mut probs = Array2::zeros((t, points.len()));
    for step in 0..t {
        let w = weights[step];
        let mut row = probs.row_mut(step);
        for (k, &(_, src, col)) in order.iter().enumerate() {
            let mass = if src == 0 {
                w * dist1.probs[[step, col]]
            } else {
                (1.0 - w) * dist2.probs[[step, col]]
            };
            row[slot[k]] += mass;
        }
        if literal_softmax {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
        }
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(MergedDistribution { points, probs })
}

impl MergedDistribution {
    /// Collapse a single distribution into merged form.
    pub fn from_single(dist: &StepDistribution, support: &SupportSet) -> Self {
        Self {
            points: support.points().to_vec(),
            probs: dist.probs.clone(),
        }
    }

    pub fn steps(&self) -> usize {
        self.probs.nrows()
    }

    /// Point mass at `values[t]` for every step, on the given points.
    pub fn point_mass(points: Vec<f64>, index: &[usize]) -> Self {
        let mut probs = Array2::zeros((index.len(), points.len()));
        for (t, &j) in index.iter().enumerate() {
            probs[[t, j]] = 1.0;
        }
        Self { points, probs }
    }
}

/// Support points as an ndarray column, for batched dot products.
pub fn support_column<F: crate::Real>(support: &SupportSet) -> Array1<F> {
    support.points().iter().map(|&p| F::lit(p)).collect()
}
