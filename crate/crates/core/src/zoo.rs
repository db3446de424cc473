//! Synthetic conditionally-independent mixtures and the parameter samplers of
//! the benchmark protocols.
//!
//! Randomness comes from ChaCha8 with fixed streams, so specs and samples are
//! reproducible across runs and platforms:
//!
//! * protocol parameters: stream [`PARAMETER_STREAM`] of the protocol seed;
//! * synthetic images: stream [`IMAGE_STREAM`];
//! * sample labels: stream 0 of the sampling seed;
//! * coordinate `i` of component `j`: stream `1 + j * n + i`.

use crate::error::{MomError, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

pub const PARAMETER_STREAM: u64 = u64::MAX;
/// Stream of [`smooth_blob_images`].
pub const IMAGE_STREAM: u64 = u64::MAX - 1;

/// One coordinate distribution of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Coordinate {
    Gaussian { mean: f64, sd: f64 },
    Bernoulli { mean: f64 },
    Gamma { shape: f64, scale: f64 },
    Poisson { rate: f64 },
    /// Mass `probs[k - 1]` on the value `k`, for `k = 1..=probs.len()`.
    Discrete { probs: Vec<f64> },
}

impl Coordinate {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MomError::Validation(msg));
        match self {
            Self::Gaussian { mean, sd } => {
                if !mean.is_finite() || !(*sd > 0.0 && sd.is_finite()) {
                    return bad(format!("gaussian needs finite mean and sd > 0, got ({mean}, {sd})"));
                }
            }
            Self::Bernoulli { mean } => {
                if !(0.0..=1.0).contains(mean) {
                    return bad(format!("bernoulli mean {mean} outside [0, 1]"));
                }
            }
            Self::Gamma { shape, scale } => {
                if !(*shape > 0.0 && shape.is_finite() && *scale > 0.0 && scale.is_finite()) {
                    return bad(format!("gamma needs shape > 0 and scale > 0, got ({shape}, {scale})"));
                }
            }
            Self::Poisson { rate } => {
                if !(*rate >= 0.0 && rate.is_finite()) {
                    return bad(format!("poisson rate {rate} must be finite and >= 0"));
                }
            }
            Self::Discrete { probs } => {
                let total: f64 = probs.iter().sum();
                if probs.is_empty() || probs.iter().any(|q| !(*q >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return bad(format!("discrete probabilities {probs:?} must be >= 0 and sum to 1"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.raw_moment(1)
    }

    /// `E[X^s]`.
    pub fn raw_moment(&self, s: u32) -> f64 {
        match self {
            Self::Gaussian { mean, sd } => {
                // E X^s = mu E X^{s-1} + (s-1) sigma^2 E X^{s-2}.
                let (mut prev, mut cur) = (1.0, *mean);
                if s == 0 {
                    return 1.0;
                }
                for k in 2..=s {
                    let next = mean * cur + (k - 1) as f64 * sd * sd * prev;
                    prev = cur;
                    cur = next;
                }
                cur
            }
            Self::Bernoulli { mean } => {
                if s == 0 {
                    1.0
                } else {
                    *mean
                }
            }
            Self::Gamma { shape, scale } => (0..s).map(|i| (shape + i as f64) * scale).product(),
            Self::Poisson { rate } => {
                // Touchard polynomial: sum_k S(s, k) rate^k.
                (0..=s).map(|k| stirling2(s, k) * rate.powi(k as i32)).sum()
            }
            Self::Discrete { probs } => probs
                .iter()
                .enumerate()
                .map(|(k, q)| q * ((k + 1) as f64).powi(s as i32))
                .sum(),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            Self::Bernoulli { mean } => f64::from(u8::from(rng.random::<f64>() < *mean)),
            Self::Gamma { shape, scale } => Gamma::new(*shape, *scale).expect("validated").sample(rng),
            Self::Poisson { rate } => {
                if *rate == 0.0 {
                    0.0
                } else {
                    Poisson::new(*rate).expect("validated").sample(rng)
                }
            }
            Self::Discrete { probs } => (categorical(probs, rng.random::<f64>()) + 1) as f64,
        }
    }
}

fn stirling2(n: u32, k: u32) -> f64 {
    let mut row = vec![0.0; k as usize + 1];
    row[0] = 1.0;
    for i in 1..=n as usize {
        for j in (1..=k.min(i as u32) as usize).rev() {
            row[j] = j as f64 * row[j] + row[j - 1];
        }
        row[0] = 0.0;
    }
    row[k as usize]
}

/// Index `i` with `cum[i-1] <= u * total < cum[i]`.
fn categorical(probs: &[f64], u: f64) -> usize {
    let target = u * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, q) in probs.iter().enumerate() {
        acc += q;
        if target < acc {
            return i;
        }
    }
    probs.iter().rposition(|q| *q > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub coordinates: Vec<Coordinate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub components: Vec<ComponentSpec>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let r = self.components.len();
        if r == 0 || self.weights.len() != r {
            return Err(MomError::Validation(format!(
                "{} weights for {r} components",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MomError::Validation("weights must be >= 0 and sum to 1".into()));
        }
        let n = self.components[0].coordinates.len();
        if n == 0 {
            return Err(MomError::Validation("components need at least one coordinate".into()));
        }
        for (j, c) in self.components.iter().enumerate() {
            if c.coordinates.len() != n {
                return Err(MomError::Validation(format!(
                    "component {j} has {} coordinates, expected {n}",
                    c.coordinates.len()
                )));
            }
            for (i, x) in c.coordinates.iter().enumerate() {
                x.validate()
                    .map_err(|e| MomError::Validation(format!("component {j}, coordinate {i}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.components.first().map_or(0, |c| c.coordinates.len())
    }

    pub fn r(&self) -> usize {
        self.components.len()
    }

    pub fn weight_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }

    /// n x r matrix of componentwise moments `E_j[X_i^s]`.
    pub fn raw_moments(&self, s: u32) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.r(), |i, j| self.components[j].coordinates[i].raw_moment(s))
    }

    pub fn means(&self) -> DMatrix<f64> {
        self.raw_moments(1)
    }
}

/// `p` independent draws: a label from the weights, then every coordinate
/// independently from its component distribution.
pub fn sample(spec: &MixtureSpec, p: usize, seed: u64) -> Result<(DMatrix<f64>, Vec<usize>)> {
    spec.validate()?;
    if p == 0 {
        return Err(MomError::InvalidArgument("sample count must be at least 1".into()));
    }
    let (n, r) = (spec.n(), spec.r());
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let mut label_rng = stream(0);
    let mut coord_rngs: Vec<ChaCha8Rng> = (0..r * n).map(|s| stream(1 + s as u64)).collect();
    let mut v = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(p);
    for l in 0..p {
        let j = categorical(&spec.weights, label_rng.random::<f64>());
        labels.push(j);
        for (i, dist) in spec.components[j].coordinates.iter().enumerate() {
            v[(i, l)] = dist.sample(&mut coord_rngs[j * n + i]);
        }
    }
    Ok((v, labels))
}

fn parameter_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PARAMETER_STREAM);
    rng
}

/// Uniform on `[1, 5]^r`, normalized.
fn protocol_weights(rng: &mut ChaCha8Rng, r: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..r).map(|_| rng.random_range(1.0..=5.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn check_rank(n: usize, r: usize) -> Result<()> {
    if r == 0 || n == 0 {
        return Err(MomError::InvalidArgument("n and r must be positive".into()));
    }
    Ok(())
}

fn from_columns(weights: Vec<f64>, columns: Vec<Vec<Coordinate>>) -> MixtureSpec {
    MixtureSpec {
        weights,
        components: columns.into_iter().map(|coordinates| ComponentSpec { coordinates }).collect(),
    }
}

/// n x r unit vectors with pairwise inner product 0.5 in a random orientation:
/// the Cholesky factor of `0.5 (I + 1 1^T)` applied to a random orthonormal
/// frame.
pub fn sixty_degree_frame(n: usize, r: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if r > n {
        return Err(MomError::InvalidArgument(format!(
            "cannot place {r} equiangular means in dimension {n}"
        )));
    }
    let gram = DMatrix::from_fn(r, r, |i, j| if i == j { 1.0 } else { 0.5 });
    let l = gram.cholesky().expect("positive definite").unpack();
    let g = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for c in 0..r {
        if rr[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    Ok(q * l.transpose())
}

/// Gaussian protocol: equiangular unit means plus `0.05 N(0, I)`, standard
/// deviations uniform on `[1e-3, 0.2]`.
pub fn gen_gaussian_protocol(n: usize, r: usize, seed: u64) -> Result<MixtureSpec> {
    check_rank(n, r)?;
    let mut rng = parameter_rng(seed);
    let frame = sixty_degree_frame(n, r, &mut rng)?;
    let weights = protocol_weights(&mut rng, r);
    let columns = (0..r)
        .map(|j| {
            (0..n)
                .map(|i| {
                    let noise: f64 = rng.sample(StandardNormal);
                    Coordinate::Gaussian {
                        mean: frame[(i, j)] + 0.05 * noise,
                        sd: rng.random_range(1e-3..=0.2),
                    }
                })
                .collect()
        })
        .collect();
    Ok(from_columns(weights, columns))
}

/// Bernoulli protocol: means uniform on `[0, 1]`.
pub fn gen_bernoulli_protocol(n: usize, r: usize, seed: u64) -> Result<MixtureSpec> {
    check_rank(n, r)?;
    let mut rng = parameter_rng(seed);
    let weights = protocol_weights(&mut rng, r);
    let columns = (0..r)
        .map(|_| {
            (0..n)
                .map(|_| Coordinate::Bernoulli {
                    mean: rng.random_range(0.0..=1.0),
                })
                .collect()
        })
        .collect();
    Ok(from_columns(weights, columns))
}

/// Gamma protocol: scale uniform on `[0.1, 5]`, shape uniform on `[1, 5]`.
pub fn gen_gamma_protocol(n: usize, r: usize, seed: u64) -> Result<MixtureSpec> {
    check_rank(n, r)?;
    let mut rng = parameter_rng(seed);
    let weights = protocol_weights(&mut rng, r);
    let columns = (0..r)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let scale = rng.random_range(0.1..=5.0);
                    let shape = rng.random_range(1.0..=5.0);
                    Coordinate::Gamma { shape, scale }
                })
                .collect()
        })
        .collect();
    Ok(from_columns(weights, columns))
}

/// Coordinates per block of the heterogeneous protocol.
pub const HETEROGENEOUS_BLOCK: usize = 10;

/// Heterogeneous protocol, n = 40 in four blocks of ten: Bernoulli (means
/// uniform on `[0, 1]`), discrete on `{1..5}` (row-stochastic uniform
/// masses), Gaussian (standard normal means, sd uniform on `(0, sqrt 10]`),
/// Poisson (rates uniform on `[0, 5]`).
pub fn gen_heterogeneous_protocol(r: usize, seed: u64) -> Result<MixtureSpec> {
    check_rank(4 * HETEROGENEOUS_BLOCK, r)?;
    let mut rng = parameter_rng(seed);
    let weights = protocol_weights(&mut rng, r);
    let b = HETEROGENEOUS_BLOCK;
    let columns = (0..r)
        .map(|_| {
            let mut coords = Vec::with_capacity(4 * b);
            coords.extend((0..b).map(|_| Coordinate::Bernoulli {
                mean: rng.random_range(0.0..=1.0),
            }));
            coords.extend((0..b).map(|_| {
                let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                Coordinate::Discrete {
                    probs: raw.into_iter().map(|x| x / total).collect(),
                }
            }));
            coords.extend((0..b).map(|_| {
                let mean: f64 = rng.sample(StandardNormal);
                let sd = (1.0 - rng.random::<f64>()) * 10f64.sqrt();
                Coordinate::Gaussian { mean, sd }
            }));
            coords.extend((0..b).map(|_| Coordinate::Poisson {
                rate: rng.random_range(0.0..=5.0),
            }));
            coords
        })
        .collect();
    Ok(from_columns(weights, columns))
}

/// Poisson mixture whose component rates are the given nonnegative images
/// (each flattened to length n).
pub fn gen_poisson_image_protocol(images: &[Vec<f64>], seed: u64) -> Result<MixtureSpec> {
    let r = images.len();
    let n = images.first().map_or(0, Vec::len);
    check_rank(n, r)?;
    let mut rng = parameter_rng(seed);
    let weights = protocol_weights(&mut rng, r);
    let columns = images
        .iter()
        .map(|img| img.iter().map(|&rate| Coordinate::Poisson { rate }).collect())
        .collect();
    let spec = from_columns(weights, columns);
    spec.validate()?;
    Ok(spec)
}

/// `count` smooth nonnegative `side x side` images (row-major), each a
/// background level plus a few Gaussian blobs with peak rates up to about 5.
pub fn smooth_blob_images(side: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(IMAGE_STREAM);
    let s = side as f64;
    (0..count)
        .map(|_| {
            let background = rng.random_range(0.2..=0.5);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.0..s),
                        rng.random_range(0.0..s),
                        rng.random_range(0.12 * s..=0.3 * s),
                        rng.random_range(1.5..=5.0),
                    )
                })
                .collect();
            (0..side * side)
                .map(|pix| {
                    let (y, x) = ((pix / side) as f64, (pix % side) as f64);
                    background
                        + blobs
                            .iter()
                            .map(|&(cy, cx, w, h)| h * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * w * w)).exp())
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Gaussian mixture with standard normal means and `|N(0, 1)|` standard
/// deviations, as used for rank selection.
pub fn gen_planted_gaussian(n: usize, r: usize, seed: u64) -> Result<MixtureSpec> {
    check_rank(n, r)?;
    let mut rng = parameter_rng(seed);
    let weights = protocol_weights(&mut rng, r);
    let columns = (0..r)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let mean: f64 = rng.sample(StandardNormal);
                    let sd = rng.sample::<f64, _>(StandardNormal).abs().max(f64::MIN_POSITIVE);
                    Coordinate::Gaussian { mean, sd }
                })
                .collect()
        })
        .collect();
    Ok(from_columns(weights, columns))
}

/// Named protocols for the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Gaussian,
    Bernoulli,
    Gamma,
    Heterogeneous,
    PoissonImage,
    Planted,
}

impl std::str::FromStr for Protocol {
    type Err = MomError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussian" => Self::Gaussian,
            "bernoulli" => Self::Bernoulli,
            "gamma" => Self::Gamma,
            "heterogeneous" => Self::Heterogeneous,
            "poisson-image" => Self::PoissonImage,
            "planted" => Self::Planted,
            other => return Err(MomError::InvalidArgument(format!("unknown protocol {other:?}"))),
        })
    }
}
