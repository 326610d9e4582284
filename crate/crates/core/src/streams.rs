//! Seeded piecewise-stationary data streams.
//!
//! Every stream kind draws a base input `z ~ N(0, I_d)` per sample. The
//! segment index `⌊t / segment_len⌋` selects the generating parameters,
//! which change by a bounded amount at each segment boundary.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{DnhError, Result};
use crate::numerics::{Matrix, RngState, Vector};

const DATA_STREAM: u64 = 0;
const PARAM_STREAM: u64 = 1;
const HELDOUT_STREAM_BASE: u64 = 1 << 32;

/// Radius of the circle carrying the class means of `rotating_gaussian`.
pub const CLASS_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// Regression onto `A_s x + noise`, with `A_s` taking a bounded random step per segment.
    DriftingLinear,
    /// Class-conditional Gaussians whose means rotate by `shift_magnitude` radians per segment.
    RotatingGaussian,
    /// Fixed teacher applied to inputs under a per-segment signed permutation.
    PermutedFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub dim: usize,
    pub segment_len: usize,
    pub num_segments: usize,
    pub shift_magnitude: f64,
    pub noise_std: f64,
    /// Falls back to the experiment seed when absent.
    pub seed: Option<u64>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            kind: StreamKind::DriftingLinear,
            dim: 8,
            segment_len: 2000,
            num_segments: 10,
            shift_magnitude: 0.3,
            noise_std: 0.1,
            seed: None,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DnhError::Config(format!("stream: {msg}")));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.segment_len == 0 || self.num_segments == 0 {
            return bad("segment_len and num_segments must be positive".into());
        }
        if !(self.shift_magnitude >= 0.0) || !self.shift_magnitude.is_finite() {
            return bad(format!("shift_magnitude must be finite and >= 0, got {}", self.shift_magnitude));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if self.kind == StreamKind::RotatingGaussian && self.dim < 2 {
            return bad("rotating_gaussian needs dim >= 2".into());
        }
        if self.kind == StreamKind::PermutedFeatures && self.shift_magnitude > 1.0 {
            return bad("permuted_features shift_magnitude is a displacement fraction in [0, 1]".into());
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.segment_len * self.num_segments
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vector,
    pub target: Vector,
    pub t: u64,
    pub segment_id: usize,
}

/// Per-segment generating parameters.
#[derive(Debug, Clone, PartialEq)]
enum Segments {
    Linear(Vec<Matrix>),
    Rotating(Vec<f64>),
    Permuted { teacher: Matrix, maps: Vec<Matrix>, displaced: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Stream {
    spec: StreamSpec,
    seed: u64,
    segments: Segments,
    rng: RngState,
    next_t: u64,
}

/// Teacher close to the identity: `I + P` with `P_ij ~ N(0, 1/(16d))`.
fn near_identity(rng: &mut RngState, d: usize) -> Matrix {
    let std = (1.0 / (16.0 * d as f64)).sqrt();
    Matrix::identity(d).add(&rng.normal_matrix(d, d, std))
}

/// Signed permutation moving exactly `m` coordinates along a random cycle,
/// with one sign flipped for even cycles so the determinant stays `+1`.
fn cycle_map(rng: &mut RngState, d: usize, m: usize) -> (Matrix, usize) {
    let mut p = Matrix::identity(d);
    if m < 2 {
        return (p, 0);
    }
    let mut coords: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut coords);
    let chosen = &coords[..m];
    for &c in chosen {
        p.set(c, c, 0.0);
    }
    for i in 0..m {
        p.set(chosen[(i + 1) % m], chosen[i], 1.0);
    }
    if m.is_multiple_of(2) {
        p.set(chosen[1], chosen[0], -1.0);
    }
    (p, m)
}

fn class_mean(d: usize, angle: f64, class: usize) -> Vector {
    let phi = angle + std::f64::consts::TAU * class as f64 / d as f64;
    let mut mu = Vector::zeros(d);
    mu[0] = CLASS_RADIUS * phi.cos();
    mu[1] = CLASS_RADIUS * phi.sin();
    mu
}

fn draw(spec: &StreamSpec, segments: &Segments, rng: &mut RngState, segment: usize, t: u64) -> Sample {
    let d = spec.dim;
    let z = rng.normal_vector(d, 1.0);
    let (x, target) = match segments {
        Segments::Linear(mats) => {
            let noise = rng.normal_vector(d, spec.noise_std);
            let y = mats[segment].matvec(&z).add(&noise);
            (z, y)
        }
        Segments::Rotating(angles) => {
            let class = rng.below(d);
            let x = z.add(&class_mean(d, angles[segment], class));
            (x, Vector::basis(d, class))
        }
        Segments::Permuted { teacher, maps, .. } => {
            let noise = rng.normal_vector(d, spec.noise_std);
            let y = teacher.matvec(&maps[segment].matvec(&z)).add(&noise);
            (z, y)
        }
    };
    Sample { x, target, t, segment_id: segment }
}

impl Stream {
    pub fn new(spec: &StreamSpec) -> Result<Self> {
        spec.validate()?;
        let seed = spec.seed.unwrap_or(0);
        let d = spec.dim;
        let mut prng = RngState::with_stream(seed, PARAM_STREAM);
        let segments = match spec.kind {
            StreamKind::DriftingLinear => {
                let mut mats = vec![near_identity(&mut prng, d)];
                for _ in 1..spec.num_segments {
                    let u = prng.normal_matrix(d, d, 1.0);
                    let norm = u.frobenius();
                    let mut next = mats.last().expect("non-empty").clone();
                    if norm > 0.0 {
                        next.add_scaled(&u, spec.shift_magnitude / norm);
                    }
                    mats.push(next);
                }
                Segments::Linear(mats)
            }
            StreamKind::RotatingGaussian => {
                let base = prng.uniform() * std::f64::consts::TAU;
                Segments::Rotating((0..spec.num_segments).map(|s| base + s as f64 * spec.shift_magnitude).collect())
            }
            StreamKind::PermutedFeatures => {
                let teacher = near_identity(&mut prng, d);
                let m = (spec.shift_magnitude * d as f64).floor() as usize;
                let mut maps = vec![Matrix::identity(d)];
                let mut displaced = vec![0];
                for _ in 1..spec.num_segments {
                    let (sigma, moved) = cycle_map(&mut prng, d, m);
                    maps.push(maps.last().expect("non-empty").matmul(&sigma));
                    displaced.push(moved);
                }
                Segments::Permuted { teacher, maps, displaced }
            }
        };
        Ok(Stream {
            spec: spec.clone(),
            seed,
            segments,
            rng: RngState::with_stream(seed, DATA_STREAM),
            next_t: 0,
        })
    }

    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    pub fn total_len(&self) -> usize {
        self.spec.total_len()
    }

    /// Ground-truth linear map of a regression segment.
    pub fn teacher(&self, segment: usize) -> Option<Matrix> {
        match &self.segments {
            Segments::Linear(m) => m.get(segment).cloned(),
            Segments::Permuted { teacher, maps, .. } => maps.get(segment).map(|p| teacher.matmul(p)),
            Segments::Rotating(_) => None,
        }
    }

    fn draw(&self, rng: &mut RngState, segment: usize, t: u64) -> Sample {
        draw(&self.spec, &self.segments, rng, segment, t)
    }

    /// Next sample in order, or `None` once the stream is exhausted.
    pub fn next_sample(&mut self) -> Option<Sample> {
        if self.next_t as usize >= self.total_len() {
            return None;
        }
        let t = self.next_t;
        let segment = t as usize / self.spec.segment_len;
        let s = draw(&self.spec, &self.segments, &mut self.rng, segment, t);
        self.next_t += 1;
        Some(s)
    }

    /// Fresh samples from a segment's distribution, independent of the training draws.
    pub fn heldout(&self, segment: usize, n: usize) -> Result<Vec<Sample>> {
        if segment >= self.spec.num_segments {
            return Err(DnhError::Range { index: segment, len: self.spec.num_segments });
        }
        let mut rng = RngState::with_stream(self.seed, HELDOUT_STREAM_BASE + segment as u64);
        let t0 = (segment * self.spec.segment_len) as u64;
        Ok((0..n).map(|i| self.draw(&mut rng, segment, t0 + i as u64)).collect())
    }

    /// Parameter change entering step `t`: nonzero only on segment boundaries.
    pub fn true_shift_at(&self, t: u64) -> Result<f64> {
        let len = self.total_len();
        if t as usize >= len {
            return Err(DnhError::Range { index: t as usize, len });
        }
        let t = t as usize;
        if t == 0 || !t.is_multiple_of(self.spec.segment_len) {
            return Ok(0.0);
        }
        let s = t / self.spec.segment_len;
        Ok(match &self.segments {
            Segments::Linear(m) => m[s].sub(&m[s - 1]).frobenius(),
            Segments::Rotating(a) => (a[s] - a[s - 1]).abs(),
            Segments::Permuted { displaced, .. } => displaced[s] as f64 / self.spec.dim as f64,
        })
    }

    /// Writes the remaining samples as delimited text: `t,segment_id,x_1..x_d,target_1..target_d`.
    pub fn dump_csv<W: Write>(&mut self, mut out: W) -> std::io::Result<()> {
        let d = self.spec.dim;
        let mut header = String::from("t,segment_id");
        for i in 1..=d {
            write!(header, ",x_{i}").expect("string write");
        }
        for i in 1..=d {
            write!(header, ",target_{i}").expect("string write");
        }
        writeln!(out, "{header}")?;
        while let Some(s) = self.next_sample() {
            let mut line = format!("{},{}", s.t, s.segment_id);
            for v in s.x.as_slice().iter().chain(s.target.as_slice()) {
                write!(line, ",{v}").expect("string write");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

impl Iterator for Stream {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        self.next_sample()
    }
}
