//! Random streams, small vector helpers, power iteration and finite-difference
//! gradients shared by the rest of the crate.
//!
//! Every source of randomness goes through [`RngStream`], a ChaCha8 generator
//! keyed by `(master_seed, stream_id)`. ChaCha's 64-bit stream selector gives
//! non-overlapping substreams for free, so Monte-Carlo workers and training
//! runs can each own a stream without coordinating.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Deterministic random stream identified by a master seed and a substream index.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            inner,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream under the same master seed. Does not advance `self`.
    pub fn substream(&self, stream_id: u64) -> Self {
        Self::new(self.master_seed, stream_id)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `k` distinct indices from `[0, n)`, uniform over subsets, sorted ascending.
    pub fn distinct_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx = rand::seq::index::sample(&mut self.inner, n, k).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Uniformly random permutation of `[0, n)`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, n).into_vec()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// A vector of Rademacher signs, each exactly -1 or +1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignVector {
    signs: Vec<i8>,
}

impl SignVector {
    pub fn from_signs(signs: Vec<i8>) -> Result<Self> {
        if let Some(bad) = signs.iter().position(|&s| s != 1 && s != -1) {
            return Err(Error::invalid(format!(
                "sign at index {bad} is {}, expected -1 or +1",
                signs[bad]
            )));
        }
        Ok(Self { signs })
    }

    /// Signs from the low `n` bits of `mask` (bit set means +1).
    pub fn from_mask(mask: u64, n: usize) -> Self {
        let signs = (0..n).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect();
        Self { signs }
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.signs
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.signs.iter().map(|&s| f64::from(s))
    }

    /// Indices carrying a +1 sign.
    pub fn positive_indices(&self) -> Vec<usize> {
        self.signs
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn rademacher_signs(rng: &mut RngStream, n: usize) -> Result<SignVector> {
    if n == 0 {
        return Err(Error::invalid("rademacher_signs needs n >= 1"));
    }
    let signs = (0..n).map(|_| if rng.coin() { 1 } else { -1 }).collect();
    Ok(SignVector { signs })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &mut [f64], alpha: f64) {
    for x in a.iter_mut() {
        *x *= alpha;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

#[derive(Clone, Debug)]
pub struct Eigenpair {
    pub value: f64,
    /// Unit-norm direction whose Rayleigh quotient is `value`.
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const MAX_RESTARTS: usize = 8;
const POWER_ITERATION_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Dominant eigenpair of a symmetric operator given only as a matrix-vector map.
///
/// Stops once consecutive Rayleigh quotients differ by at most `tol`, or after
/// `iters` applications. A start vector the operator annihilates is replaced by
/// a fresh random direction; an operator that annihilates every direction tried
/// reports eigenvalue 0.
pub fn power_iteration_top_eig<F>(mut apply: F, dim: usize, iters: usize, tol: f64) -> Result<Eigenpair>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(Error::invalid("power iteration needs dim >= 1"));
    }
    let mut rng = RngStream::new(POWER_ITERATION_SEED, dim as u64);
    let random_unit = |rng: &mut RngStream| {
        let mut v = rng.normal_vec(dim);
        let nv = norm(&v);
        scale(&mut v, 1.0 / nv);
        v
    };

    let mut v = random_unit(&mut rng);
    let mut prev: Option<f64> = None;
    let mut restarts = 0;
    let mut k = 0;
    while k < iters.max(1) {
        let av = apply(&v)?;
        if av.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: av.len(),
            });
        }
        if !all_finite(&av) {
            return Err(Error::NumericDomain {
                location: format!("power iteration step {k}"),
                detail: "operator returned a non-finite vector".into(),
            });
        }
        let lambda = dot(&v, &av);
        let nav = norm(&av);
        k += 1;
        if nav <= f64::MIN_POSITIVE {
            restarts += 1;
            if restarts > MAX_RESTARTS {
                return Ok(Eigenpair {
                    value: 0.0,
                    vector: v,
                    iterations: k,
                    converged: true,
                });
            }
            v = random_unit(&mut rng);
            prev = None;
            continue;
        }
        if let Some(p) = prev {
            if (lambda - p).abs() <= tol {
                return Ok(Eigenpair {
                    value: lambda,
                    vector: v,
                    iterations: k,
                    converged: true,
                });
            }
        }
        prev = Some(lambda);
        if k == iters.max(1) {
            return Ok(Eigenpair {
                value: lambda,
                vector: v,
                iterations: k,
                converged: false,
            });
        }
        v = av;
        scale(&mut v, 1.0 / nav);
    }
    unreachable!("loop returns on its last iteration")
}

/// Default central-difference step: `1e-4 * max(1, |w|_inf)`.
pub fn default_fd_step(w: &[f64]) -> f64 {
    1e-4 * norm_inf(w).max(1.0)
}

/// Coordinate-wise central differences `(f(w + h e_i) - f(w - h e_i)) / 2h`.
pub fn central_diff_gradient<F>(mut f: F, w: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = w.to_vec();
    let mut grad = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        probe[i] = w[i] + h;
        let up = f(&probe);
        probe[i] = w[i] - h;
        let down = f(&probe);
        probe[i] = w[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericDomain {
                location: format!("coordinate {i}"),
                detail: format!("f(w +/- h e_{i}) = ({up}, {down})"),
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
