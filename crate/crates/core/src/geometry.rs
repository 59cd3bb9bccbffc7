//! Finite particle configurations in `R^d` and their closed-ball
//! neighbourhood structure.
//!
//! A [`Configuration`] is immutable once built: neighbour lists and degrees
//! are computed at construction and never serialized.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{invalid, Error, Result};

pub const MAX_DIM: usize = 3;

/// Locally finite point set restricted to the window `[-S, S]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    dim: usize,
    coords: Vec<f64>,
    radii: Vec<f64>,
    rho: f64,
    box_halfwidth: f64,
    seed: u64,
    neighbors: Vec<Vec<usize>>,
}

/// Parameters of a Poisson sample in a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub intensity: f64,
    pub box_halfwidth: f64,
    pub dim: usize,
    pub rho: f64,
    pub seed: u64,
}

/// Closed-ball membership used everywhere a neighbour relation is needed.
#[inline]
pub fn within(a: &[f64], b: &[f64], rho: f64) -> bool {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d2 <= rho * rho
}

pub fn euclidean_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > MAX_DIM {
        return Err(invalid(format!("dimension {dim} outside 1..={MAX_DIM}")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(invalid(format!("{name} must be finite and > 0, got {v}")));
    }
    Ok(())
}

impl Configuration {
    /// Builds a configuration from explicit coordinates (`points.len() / dim` sites).
    pub fn from_coords(dim: usize, coords: Vec<f64>, rho: f64, box_halfwidth: f64) -> Result<Self> {
        Self::from_coords_seeded(dim, coords, rho, box_halfwidth, 0)
    }

    fn from_coords_seeded(dim: usize, coords: Vec<f64>, rho: f64, box_halfwidth: f64, seed: u64) -> Result<Self> {
        check_dim(dim)?;
        check_positive("rho", rho)?;
        check_positive("box half-width", box_halfwidth)?;
        if !coords.len().is_multiple_of(dim) {
            return Err(invalid("coordinate count is not a multiple of the dimension"));
        }
        if let Some(bad) = coords.iter().find(|c| !c.is_finite() || c.abs() > box_halfwidth) {
            return Err(invalid(format!("coordinate {bad} outside [-S, S] or not finite")));
        }
        let mut seen = HashSet::with_capacity(coords.len() / dim);
        for p in coords.chunks(dim) {
            let key: Vec<u64> = p.iter().map(|c| (c + 0.0).to_bits()).collect();
            if !seen.insert(key) {
                return Err(invalid(format!("duplicate point {p:?}")));
            }
        }
        let radii = coords.chunks(dim).map(euclidean_norm).collect();
        let neighbors = build_neighborhoods(dim, &coords, rho).0;
        Ok(Self { dim, coords, radii, rho, box_halfwidth, seed, neighbors })
    }

    /// Convenience constructor from a list of points.
    pub fn from_points(points: &[Vec<f64>], dim: usize, rho: f64, box_halfwidth: f64) -> Result<Self> {
        if points.iter().any(|p| p.len() != dim) {
            return Err(invalid("point with wrong dimension"));
        }
        Self::from_coords(dim, points.concat(), rho, box_halfwidth)
    }

    pub fn empty(dim: usize, rho: f64, box_halfwidth: f64) -> Result<Self> {
        Self::from_coords(dim, Vec::new(), rho, box_halfwidth)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn box_halfwidth(&self) -> f64 {
        self.box_halfwidth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks(self.dim)
    }

    /// Euclidean norm `|x|` of site `i`.
    pub fn radius(&self, i: usize) -> f64 {
        self.radii[i]
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// Sorted indices of `B_x`, which always contains `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.point(i).iter().zip(self.point(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Drops every site with `|x| <= radius` and rebuilds the neighbour table.
    pub fn excluding_ball(&self, radius: f64) -> Result<Self> {
        let coords: Vec<f64> =
            self.points().zip(&self.radii).filter(|(_, r)| **r > radius).flat_map(|(p, _)| p.iter().copied()).collect();
        Self::from_coords_seeded(self.dim, coords, self.rho, self.box_halfwidth, self.seed)
    }

    /// Serializes to the flat text format: header `d rho S seed`, then
    /// `index x1 .. xd` per site.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} {} {} {}", self.dim, self.rho, self.box_halfwidth, self.seed).unwrap();
        for (i, p) in self.points().enumerate() {
            write!(out, "{i}").unwrap();
            for c in p {
                write!(out, " {c}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("missing header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!("header needs `d rho S seed`, got `{header}`")));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
        let dim: usize = fields[0].parse().map_err(|e| Error::Parse(format!("dimension: {e}")))?;
        let rho = parse_f(fields[1])?;
        let halfwidth = parse_f(fields[2])?;
        let seed: u64 = fields[3].parse().map_err(|e| Error::Parse(format!("seed: {e}")))?;
        check_dim(dim)?;
        let mut coords = Vec::new();
        for (expected, line) in lines.enumerate() {
            let mut it = line.split_whitespace();
            let idx: usize = it
                .next()
                .ok_or_else(|| Error::Parse("empty site line".into()))?
                .parse()
                .map_err(|e| Error::Parse(format!("site index: {e}")))?;
            if idx != expected {
                return Err(Error::Parse(format!("site index {idx}, expected {expected}")));
            }
            let before = coords.len();
            for tok in it {
                coords.push(parse_f(tok)?);
            }
            if coords.len() - before != dim {
                return Err(Error::Parse(format!("site {idx} does not have {dim} coordinates")));
            }
        }
        Self::from_coords_seeded(dim, coords, rho, halfwidth, seed)
    }
}

/// Poisson sample with intensity `λ` in `[-S, S]^d`: the count is
/// `Poisson(λ (2S)^d)` and points are i.i.d. uniform in the box.
pub fn sample_configuration(params: &SamplingParams) -> Result<Configuration> {
    let SamplingParams { intensity, box_halfwidth, dim, rho, seed } = *params;
    check_dim(dim)?;
    if !intensity.is_finite() || intensity < 0.0 {
        return Err(invalid(format!("intensity must be finite and >= 0, got {intensity}")));
    }
    check_positive("box half-width", box_halfwidth)?;
    check_positive("rho", rho)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = intensity * (2.0 * box_halfwidth).powi(dim as i32);
    let count = if mean > 0.0 {
        let dist = Poisson::new(mean).map_err(|e| invalid(format!("poisson mean {mean}: {e}")))?;
        dist.sample(&mut rng) as usize
    } else {
        0
    };

    let mut coords = Vec::with_capacity(count * dim);
    let mut seen = HashSet::with_capacity(count);
    let mut point = vec![0.0; dim];
    while seen.len() < count {
        for c in point.iter_mut() {
            *c = rng.random_range(-box_halfwidth..=box_halfwidth);
        }
        let key: Vec<u64> = point.iter().map(|c| (c + 0.0).to_bits()).collect();
        // Exact collisions are resampled.
        if seen.insert(key) {
            coords.extend_from_slice(&point);
        }
    }
    Configuration::from_coords_seeded(dim, coords, rho, box_halfwidth, seed)
}

/// Closed-ball neighbour lists `B_x` and degrees `n_x`, via a uniform cell
/// grid of cell size `rho`.
pub fn build_neighborhoods(dim: usize, coords: &[f64], rho: f64) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = coords.len().checked_div(dim).unwrap_or(0);
    let point = |i: usize| &coords[i * dim..(i + 1) * dim];
    let cell_of = |p: &[f64]| {
        let mut key = [0i64; MAX_DIM];
        for (k, c) in key.iter_mut().zip(p) {
            *k = (c / rho).floor() as i64;
        }
        key
    };

    let mut cells: HashMap<[i64; MAX_DIM], Vec<usize>> = HashMap::new();
    for i in 0..n {
        cells.entry(cell_of(point(i))).or_default().push(i);
    }

    let offsets = neighbor_offsets(dim);
    let mut neighbors = Vec::with_capacity(n);
    for i in 0..n {
        let p = point(i);
        let home = cell_of(p);
        let mut list = Vec::new();
        for off in &offsets {
            let mut key = home;
            for k in 0..dim {
                key[k] += off[k];
            }
            if let Some(members) = cells.get(&key) {
                list.extend(members.iter().copied().filter(|&j| within(p, point(j), rho)));
            }
        }
        list.sort_unstable();
        neighbors.push(list);
    }
    let degrees = neighbors.iter().map(Vec::len).collect();
    (neighbors, degrees)
}

fn neighbor_offsets(dim: usize) -> Vec<[i64; MAX_DIM]> {
    let mut out = vec![[0i64; MAX_DIM]];
    for k in 0..dim {
        out = out
            .into_iter()
            .flat_map(|base| {
                (-1..=1).map(move |d| {
                    let mut o = base;
                    o[k] = d;
                    o
                })
            })
            .collect();
    }
    out
}

/// Denominator of the guarded growth inequality: `max(log(1+|x|), log 2)`.
pub fn growth_denominator(radius: f64) -> f64 {
    radius.ln_1p().max(std::f64::consts::LN_2)
}

/// Smallest `N` with `n_x <= N max(log(1+|x|), log 2)` at every site.
pub fn estimate_growth_constant(config: &Configuration) -> Result<f64> {
    growth_argmax(config).map(|(_, v)| v)
}

/// Site attaining the growth constant, and the constant.
pub fn growth_argmax(config: &Configuration) -> Result<(usize, f64)> {
    (0..config.len())
        .map(|i| (i, config.degree(i) as f64 / growth_denominator(config.radius(i))))
        .fold(None, |best: Option<(usize, f64)>, (i, r)| match best {
            Some((_, b)) if b >= r => best,
            _ => Some((i, r)),
        })
        .ok_or(Error::EmptyConfiguration)
}

/// Nested subsets `Λ_j = {x : |x| <= j S / k}` with `Λ_k` forced to every site.
pub fn exhaustion_sequence(config: &Configuration, levels: usize) -> Result<Vec<Vec<usize>>> {
    if levels < 1 {
        return Err(invalid("exhaustion needs at least one level"));
    }
    let step = config.box_halfwidth() / levels as f64;
    Ok((1..=levels)
        .map(|j| {
            if j == levels {
                (0..config.len()).collect()
            } else {
                let cutoff = j as f64 * step;
                (0..config.len()).filter(|&i| config.radius(i) <= cutoff).collect()
            }
        })
        .collect())
}
