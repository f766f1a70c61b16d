//! Small differentiable predictors with exact per-sample gradients.
//!
//! Parameters live in one flat vector. The MLP layout is layer-major: for each
//! layer the weight matrix (row-major, `out x in`) is followed by its bias.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{all_finite, axpy, norm, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Squared,
    CrossEntropy,
}

/// Model architecture. `layer_widths` runs from input to output, so a linear
/// model on `d` features is `[d, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

impl ModelSpec {
    /// `y_hat = w . x` with half squared error; no bias.
    pub fn linear(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            layer_widths: vec![input_dim, 1],
            activation: Activation::Tanh,
            loss: Loss::Squared,
        }
    }

    pub fn mlp(layer_widths: Vec<usize>, loss: Loss) -> Self {
        Self {
            kind: ModelKind::Mlp,
            layer_widths,
            activation: Activation::Tanh,
            loss,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::invalid("layer_widths needs at least input and output widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("every layer width must be >= 1"));
        }
        match self.kind {
            ModelKind::Linear => {
                if self.layer_widths.len() != 2 || self.output_dim() != 1 || self.loss != Loss::Squared {
                    return Err(Error::invalid("linear model must have widths [d, 1] and squared loss"));
                }
            }
            ModelKind::Mlp => match self.loss {
                Loss::Squared if self.output_dim() != 1 => {
                    return Err(Error::invalid("squared-loss MLP must have output width 1"));
                }
                Loss::CrossEntropy if self.output_dim() < 2 => {
                    return Err(Error::invalid("cross-entropy MLP needs output width >= 2"));
                }
                _ => {}
            },
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Linear => self.input_dim(),
            ModelKind::Mlp => self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
        }
    }

    fn check_params(&self, w: &[f64]) -> Result<()> {
        let p = self.param_count();
        if w.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ModelKind::Linear => write!(f, "linear({})", self.input_dim()),
            ModelKind::Mlp => {
                let widths: Vec<String> = self.layer_widths.iter().map(usize::to_string).collect();
                let loss = match self.loss {
                    Loss::Squared => "squared",
                    Loss::CrossEntropy => "cross_entropy",
                };
                write!(f, "mlp({};tanh;{loss})", widths.join("-"))
            }
        }
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse model spec `{s}`"));
        let s = s.trim();
        let spec = if let Some(inner) = s.strip_prefix("linear(").and_then(|r| r.strip_suffix(')')) {
            ModelSpec::linear(inner.trim().parse().map_err(|_| bad())?)
        } else if let Some(inner) = s.strip_prefix("mlp(").and_then(|r| r.strip_suffix(')')) {
            let parts: Vec<&str> = inner.split(';').collect();
            if parts.len() != 3 || parts[1] != "tanh" {
                return Err(bad());
            }
            let widths = parts[0]
                .split('-')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            let loss = match parts[2] {
                "squared" => Loss::Squared,
                "cross_entropy" => Loss::CrossEntropy,
                _ => return Err(bad()),
            };
            ModelSpec::mlp(widths, loss)
        } else {
            return Err(bad());
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Linear: zeros. MLP: every weight and bias uniform in `±1/sqrt(fan_in)`.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> Result<Vec<f64>> {
    spec.validate()?;
    match spec.kind {
        ModelKind::Linear => Ok(vec![0.0; spec.param_count()]),
        ModelKind::Mlp => {
            let mut w = Vec::with_capacity(spec.param_count());
            for pair in spec.layer_widths.windows(2) {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                for _ in 0..fan_in * fan_out + fan_out {
                    w.push(rng.uniform_range(-bound, bound));
                }
            }
            Ok(w)
        }
    }
}

fn class_index(y: f64, classes: usize) -> Result<usize> {
    if y.fract() != 0.0 || y < 0.0 || y >= classes as f64 {
        return Err(Error::invalid(format!(
            "label {y} is not a class index in [0, {classes})"
        )));
    }
    Ok(y as usize)
}

fn domain_error(detail: &str) -> Error {
    Error::NumericDomain {
        location: "forward pass".into(),
        detail: detail.into(),
    }
}

/// MLP forward pass. Returns the hidden activations (input first) and the output pre-activation.
fn mlp_forward(spec: &ModelSpec, w: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let widths = &spec.layer_widths;
    let layers = widths.len() - 1;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers);
    acts.push(x.to_vec());
    let mut offset = 0;
    let mut out = Vec::new();
    for l in 0..layers {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let weights = &w[offset..offset + fan_in * fan_out];
        let bias = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let input = acts.last().expect("input pushed");
        let z: Vec<f64> = (0..fan_out)
            .map(|j| {
                let row = &weights[j * fan_in..(j + 1) * fan_in];
                bias[j] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        if l + 1 == layers {
            out = z;
        } else {
            acts.push(z.into_iter().map(f64::tanh).collect());
        }
    }
    (acts, out)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss value and `d loss / d output`.
fn output_loss(loss: Loss, out: &[f64], y: f64) -> Result<(f64, Vec<f64>)> {
    match loss {
        Loss::Squared => {
            let r = out[0] - y;
            Ok((0.5 * r * r, vec![r]))
        }
        Loss::CrossEntropy => {
            let k = class_index(y, out.len())?;
            let lse = log_sum_exp(out);
            let dout = out
                .iter()
                .enumerate()
                .map(|(j, z)| (z - lse).exp() - if j == k { 1.0 } else { 0.0 })
                .collect();
            Ok((lse - out[k], dout))
        }
    }
}

pub fn loss_per_sample(spec: &ModelSpec, w: &[f64], x: &[f64], y: f64) -> Result<f64> {
    spec.check_params(w)?;
    spec.check_input(x)?;
    let value = match spec.kind {
        ModelKind::Linear => {
            let r = y - crate::numerics::dot(w, x);
            0.5 * r * r
        }
        ModelKind::Mlp => {
            let (_, out) = mlp_forward(spec, w, x);
            output_loss(spec.loss, &out, y)?.0
        }
    };
    if !value.is_finite() {
        return Err(domain_error("non-finite loss"));
    }
    Ok(value)
}

/// Adds `scale * grad f(w, (x, y))` into `acc` and returns the loss.
fn accumulate_grad(spec: &ModelSpec, w: &[f64], x: &[f64], y: f64, scale: f64, acc: &mut [f64]) -> Result<f64> {
    match spec.kind {
        ModelKind::Linear => {
            let r = crate::numerics::dot(w, x) - y;
            let loss = 0.5 * r * r;
            if !loss.is_finite() {
                return Err(domain_error("non-finite loss"));
            }
            axpy(scale * r, x, acc);
            Ok(loss)
        }
        ModelKind::Mlp => {
            let widths = &spec.layer_widths;
            let layers = widths.len() - 1;
            let (acts, out) = mlp_forward(spec, w, x);
            if !all_finite(&out) {
                return Err(domain_error("non-finite network output"));
            }
            let (loss, mut delta) = output_loss(spec.loss, &out, y)?;

            let mut offsets = Vec::with_capacity(layers);
            let mut offset = 0;
            for l in 0..layers {
                offsets.push(offset);
                offset += widths[l] * widths[l + 1] + widths[l + 1];
            }
            for l in (0..layers).rev() {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let base = offsets[l];
                let input = &acts[l];
                for j in 0..fan_out {
                    let dj = scale * delta[j];
                    let row = &mut acc[base + j * fan_in..base + (j + 1) * fan_in];
                    axpy(dj, input, row);
                    acc[base + fan_in * fan_out + j] += dj;
                }
                if l > 0 {
                    let weights = &w[base..base + fan_in * fan_out];
                    let mut prev = vec![0.0; fan_in];
                    for j in 0..fan_out {
                        axpy(delta[j], &weights[j * fan_in..(j + 1) * fan_in], &mut prev);
                    }
                    for (p, a) in prev.iter_mut().zip(input) {
                        *p *= 1.0 - a * a;
                    }
                    delta = prev;
                }
            }
            Ok(loss)
        }
    }
}

pub fn grad_per_sample(spec: &ModelSpec, w: &[f64], x: &[f64], y: f64) -> Result<Vec<f64>> {
    loss_and_grad(spec, w, x, y).map(|(_, g)| g)
}

pub fn loss_and_grad(spec: &ModelSpec, w: &[f64], x: &[f64], y: f64) -> Result<(f64, Vec<f64>)> {
    spec.check_params(w)?;
    spec.check_input(x)?;
    let mut g = vec![0.0; w.len()];
    let loss = accumulate_grad(spec, w, x, y, 1.0, &mut g)?;
    if !loss.is_finite() || !all_finite(&g) {
        return Err(domain_error("non-finite loss or gradient"));
    }
    Ok((loss, g))
}

fn with_sample(err: Error, i: usize) -> Error {
    match err {
        Error::NumericDomain { location, detail } => Error::NumericDomain {
            location: format!("sample {i}: {location}"),
            detail,
        },
        other => other,
    }
}

/// Mean loss and mean gradient over the rows at `indices`.
///
/// Per-sample gradients are summed sequentially in the order given and the sum
/// is divided by the count, so the result is bit-reproducible.
pub fn grad_mean_over(spec: &ModelSpec, w: &[f64], data: &Dataset, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
    spec.check_params(w)?;
    if indices.is_empty() {
        return Err(Error::invalid("mean over an empty index set"));
    }
    if data.dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: data.dim(),
        });
    }
    let mut g = vec![0.0; w.len()];
    let mut total = 0.0;
    for &i in indices {
        total += accumulate_grad(spec, w, data.row(i), data.label(i), 1.0, &mut g).map_err(|e| with_sample(e, i))?;
    }
    let m = indices.len() as f64;
    for gi in g.iter_mut() {
        *gi /= m;
    }
    let f = total / m;
    if !f.is_finite() || !all_finite(&g) {
        return Err(domain_error("non-finite mean loss or gradient"));
    }
    Ok((f, g))
}

/// `(F, grad F)` over the whole dataset.
pub fn grad_mean(spec: &ModelSpec, w: &[f64], data: &Dataset) -> Result<(f64, Vec<f64>)> {
    let all: Vec<usize> = (0..data.len()).collect();
    grad_mean_over(spec, w, data, &all)
}

pub fn loss_mean(spec: &ModelSpec, w: &[f64], data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.len() {
        total += loss_per_sample(spec, w, data.row(i), data.label(i)).map_err(|e| with_sample(e, i))?;
    }
    Ok(total / data.len() as f64)
}

/// Per-sample gradients stacked row-major, one row per sample.
#[derive(Clone, Debug)]
pub struct GradMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    losses: Vec<f64>,
}

impl GradMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Sequential mean of the rows.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for i in 0..self.rows {
            axpy(1.0, self.row(i), &mut m);
        }
        for v in m.iter_mut() {
            *v /= self.rows as f64;
        }
        m
    }

    pub fn row_norms_sq(&self) -> Vec<f64> {
        (0..self.rows).map(|i| crate::numerics::norm_sq(self.row(i))).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self {
            rows: rows.len(),
            cols,
            values: rows.concat(),
            losses: vec![0.0; rows.len()],
        }
    }
}

pub fn per_sample_grads(spec: &ModelSpec, w: &[f64], data: &Dataset, indices: &[usize]) -> Result<GradMatrix> {
    spec.check_params(w)?;
    let cols = w.len();
    let mut values = vec![0.0; indices.len() * cols];
    let mut losses = Vec::with_capacity(indices.len());
    for (r, &i) in indices.iter().enumerate() {
        let row = &mut values[r * cols..(r + 1) * cols];
        let loss = accumulate_grad(spec, w, data.row(i), data.label(i), 1.0, row).map_err(|e| with_sample(e, i))?;
        if !all_finite(row) {
            return Err(with_sample(domain_error("non-finite gradient"), i));
        }
        losses.push(loss);
    }
    Ok(GradMatrix {
        rows: indices.len(),
        cols,
        values,
        losses,
    })
}

/// Central-difference Hessian-vector product of the mean loss:
/// `(grad F(w + h u) - grad F(w - h u)) / 2h * |v|` with `u = v / |v|`.
pub fn hessian_vector_product(spec: &ModelSpec, w: &[f64], data: &Dataset, v: &[f64], h: f64) -> Result<Vec<f64>> {
    spec.check_params(w)?;
    if v.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: v.len(),
        });
    }
    let nv = norm(v);
    if nv == 0.0 || !nv.is_finite() {
        return Err(Error::invalid("HVP direction must have positive finite norm"));
    }
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("HVP step must be positive"));
    }
    let shifted = |sign: f64| -> Vec<f64> { w.iter().zip(v).map(|(wi, vi)| wi + sign * h * vi / nv).collect() };
    let (_, g_plus) = grad_mean(spec, &shifted(1.0), data)?;
    let (_, g_minus) = grad_mean(spec, &shifted(-1.0), data)?;
    Ok(g_plus
        .iter()
        .zip(&g_minus)
        .map(|(a, b)| (a - b) / (2.0 * h) * nv)
        .collect())
}

/// Dense Hessian of the linear model's mean loss, `(1/n) X^T X`.
pub fn linear_hessian(data: &Dataset) -> DMatrix<f64> {
    let d = data.dim();
    let x = DMatrix::from_row_slice(data.len(), d, data.features());
    (x.transpose() * &x) / data.len() as f64
}

/// Largest eigenvalue of `(1/n) X^T X` by dense symmetric eigensolve.
pub fn linear_top_curvature(data: &Dataset) -> f64 {
    SymmetricEigen::new(linear_hessian(data)).eigenvalues.max()
}

/// Writes `# spec=<spec>;P=<count>` followed by one CSV row of parameters.
pub fn write_param_snapshot<W: Write>(out: &mut W, spec: &ModelSpec, w: &[f64]) -> std::io::Result<()> {
    writeln!(out, "# spec={spec};P={}", w.len())?;
    let row: Vec<String> = w.iter().map(|v| format!("{v:e}")).collect();
    writeln!(out, "{}", row.join(","))
}

pub fn read_param_snapshot<R: BufRead>(input: R) -> Result<(ModelSpec, Vec<f64>)> {
    let mut lines = input.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Schema(format!("snapshot missing {what}")))?
            .map_err(|e| Error::io("<snapshot>", e))
    };
    let header = next("header")?;
    let body = header
        .strip_prefix("# spec=")
        .ok_or_else(|| Error::Schema("snapshot header must start with `# spec=`".into()))?;
    let (spec_str, count_str) = body
        .rsplit_once(";P=")
        .ok_or_else(|| Error::Schema("snapshot header missing `;P=`".into()))?;
    let spec: ModelSpec = spec_str.parse()?;
    let count: usize = count_str
        .trim()
        .parse()
        .map_err(|_| Error::Schema(format!("bad parameter count `{count_str}`")))?;
    let row = next("parameter row")?;
    let values = row
        .split(',')
        .enumerate()
        .map(|(i, s)| {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                row: 2,
                column: format!("w{i}"),
                detail: format!("`{s}` is not a number"),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != count || count != spec.param_count() {
        return Err(Error::Schema(format!(
            "snapshot declares P={count}, spec needs {}, row has {}",
            spec.param_count(),
            values.len()
        )));
    }
    Ok((spec, values))
}
