//! Counter-based Gaussian white-noise streams.
//!
//! Every normal draw is addressed by `(master_seed, replica, channel, step,
//! component, lattice cell)`. The address is mapped onto the ChaCha8 key,
//! nonce and block counter, so any increment can be regenerated in isolation
//! and workers never share generator state. Cells are addressed by their
//! signed lattice coordinates, which makes the noise on a torus a restriction
//! of the noise on any larger torus with the same spacing.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::torus::{Field, Spectral, TorusGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Drives the SPDE and the averaged EW component.
    W,
    /// Independent copy driving the fluctuating EW component.
    WTilde,
}

impl Channel {
    fn code(self) -> u64 {
        match self {
            Channel::W => 0,
            Channel::WTilde => 1,
        }
    }
}

const PX_BITS: u32 = 15;
const GY_BITS: u32 = 17;
const COMP_BITS: u32 = 4;
const STEP_BITS: u32 = 28;
const DOMAIN_SHIFT: u32 = 56;

const DOMAIN_FIELD: u64 = 0;
const DOMAIN_SCALAR: u64 = 1;

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = 1.0 - (a >> 11) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// One replica's noise on one channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub master_seed: u64,
    pub replica: u64,
    pub channel: Channel,
    pub step: u64,
}

/// White-noise increment over one step, stored as a density: each cell holds
/// an `N(0, Δt/Δx²)` draw so that `∑ f·ΔW·Δx²` approximates `∫ f dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrement {
    pub field: Field,
    pub dt: f64,
}

impl NoiseStream {
    pub fn new(master_seed: u64, replica: u64, channel: Channel) -> Self {
        Self {
            master_seed,
            replica,
            channel,
            step: 0,
        }
    }

    fn rng(&self, split: bool) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        let stream = (DOMAIN_FIELD << DOMAIN_SHIFT)
            | (self.replica << 3)
            | (self.channel.code() << 1)
            | split as u64;
        rng.set_stream(stream);
        rng
    }

    fn fill(rng: &mut ChaCha8Rng, step_key: u64, grid: &TorusGrid, m: usize, scale: f64, out: &mut [f64]) {
        let n = grid.n();
        assert!(n / 2 <= 1 << PX_BITS, "grid too large for noise addressing");
        assert!(m <= 1 << COMP_BITS, "too many components for noise addressing");
        assert!(step_key < 1 << STEP_BITS, "step counter overflow");
        let half = (n / 2) as i64;
        for c in 0..m {
            for i in 0..n {
                let gy = grid.lattice_coord(i) + (1i64 << (GY_BITS - 1));
                let px0 = -half / 2 + (1i64 << (PX_BITS - 1));
                let pair = ((((step_key << COMP_BITS) | c as u64) << GY_BITS | gy as u64) << PX_BITS)
                    | px0 as u64;
                rng.set_word_pos(pair as u128 * 4);
                let row = &mut out[(c * n + i) * n..(c * n + i + 1) * n];
                for chunk in row.chunks_exact_mut(2) {
                    let (z0, z1) = box_muller(rng.next_u64(), rng.next_u64());
                    chunk[0] = z0 * scale;
                    chunk[1] = z1 * scale;
                }
            }
        }
    }

    /// Increment for an arbitrary step without touching the counter.
    pub fn increment_at(&self, step: u64, dt: f64, grid: &TorusGrid, m: usize) -> Result<NoiseIncrement> {
        check_dt(dt)?;
        let mut field = Field::zeros(*grid, m);
        let scale = dt.sqrt() / grid.dx();
        Self::fill(&mut self.rng(false), step, grid, m, scale, field.values_mut());
        Ok(NoiseIncrement { field, dt })
    }

    /// Next increment; advances the step counter.
    pub fn sample_increment(&mut self, dt: f64, grid: &TorusGrid, m: usize) -> Result<NoiseIncrement> {
        let inc = self.increment_at(self.step, dt, grid, m)?;
        self.step += 1;
        Ok(inc)
    }

    /// Fill a preallocated buffer with the next increment (hot-loop variant).
    pub fn sample_into(&mut self, dt: f64, grid: &TorusGrid, m: usize, out: &mut [f64]) {
        let scale = dt.sqrt() / grid.dx();
        Self::fill(&mut self.rng(false), self.step, grid, m, scale, out);
        self.step += 1;
    }

    /// Next increment as two independent half-step pieces whose sum is the
    /// full increment. Uses a separate substream from [`Self::sample_increment`].
    pub fn sample_split_into(&mut self, dt: f64, grid: &TorusGrid, m: usize, first: &mut [f64], second: &mut [f64]) {
        let scale = (0.5 * dt).sqrt() / grid.dx();
        let mut rng = self.rng(true);
        Self::fill(&mut rng, 2 * self.step, grid, m, scale, first);
        Self::fill(&mut rng, 2 * self.step + 1, grid, m, scale, second);
        self.step += 1;
    }
}

impl NoiseStream {
    /// Next increment as the sum of `k` consecutive base increments of
    /// length `dt/k`. Runs with different `k` over the same base step share
    /// their Brownian path; `k = 1` reproduces [`Self::sample_into`].
    pub fn sample_refined_into(&mut self, dt: f64, k: u32, grid: &TorusGrid, m: usize, out: &mut [f64], tmp: &mut [f64]) {
        let base = self.step * k as u64;
        let scale = (dt / k as f64).sqrt() / grid.dx();
        let mut rng = self.rng(false);
        Self::fill(&mut rng, base, grid, m, scale, out);
        for i in 1..k as u64 {
            Self::fill(&mut rng, base + i, grid, m, scale, tmp);
            out.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o += t);
        }
        self.step += 1;
    }

    /// Split form of [`Self::sample_refined_into`]: the first and second
    /// `k/2` base increments. `k` must be even.
    pub fn sample_refined_split_into(
        &mut self,
        dt: f64,
        k: u32,
        grid: &TorusGrid,
        m: usize,
        first: &mut [f64],
        second: &mut [f64],
        tmp: &mut [f64],
    ) {
        assert!(k >= 2 && k % 2 == 0, "split refinement needs an even factor");
        let base = self.step * k as u64;
        let scale = (dt / k as f64).sqrt() / grid.dx();
        let mut rng = self.rng(false);
        let h = k as u64 / 2;
        for (piece, start) in [(&mut *first, base), (&mut *second, base + h)] {
            Self::fill(&mut rng, start, grid, m, scale, piece);
            for i in 1..h {
                Self::fill(&mut rng, start + i, grid, m, scale, tmp);
                piece.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o += t);
            }
        }
        self.step += 1;
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    Ok(())
}

/// `𝒢_ρ ΔW`, componentwise.
pub fn smooth_increment(inc: &NoiseIncrement, rho: f64, spectral: &Spectral) -> Result<NoiseIncrement> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(invalid("rho", format!("must be positive, got {rho}")));
    }
    Ok(NoiseIncrement {
        field: spectral.heat_propagate(&inc.field, rho)?,
        dt: inc.dt,
    })
}

/// Sequential standard normals for scalar Monte Carlo (Brownian paths),
/// keyed by `(master_seed, domain, index)`.
#[derive(Debug, Clone)]
pub struct ScalarStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl ScalarStream {
    pub fn new(master_seed: u64, domain: u32, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        assert!(index < 1 << 40, "scalar stream index overflow");
        rng.set_stream((DOMAIN_SCALAR << DOMAIN_SHIFT) | ((domain as u64) << 40) | index);
        Self { rng, spare: None }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
        self.spare = Some(z1);
        z0
    }

    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TorusGrid {
        TorusGrid::new(4.0, 32).unwrap()
    }

    #[test]
    fn same_address_reproduces() {
        let g = grid();
        let mut a = NoiseStream::new(7, 3, Channel::W);
        let mut b = NoiseStream::new(7, 3, Channel::W);
        let x = a.sample_increment(0.01, &g, 2).unwrap();
        let y = b.sample_increment(0.01, &g, 2).unwrap();
        assert_eq!(x, y);
        assert_eq!(a.step, 1);
        assert_eq!(a.increment_at(0, 0.01, &g, 2).unwrap(), x);
        let z = a.sample_increment(0.01, &g, 2).unwrap();
        assert_ne!(z, x);
    }

    #[test]
    fn distinct_addresses_differ() {
        let g = grid();
        let base = NoiseStream::new(7, 3, Channel::W).increment_at(0, 0.01, &g, 1).unwrap();
        for other in [
            NoiseStream::new(8, 3, Channel::W),
            NoiseStream::new(7, 4, Channel::W),
            NoiseStream::new(7, 3, Channel::WTilde),
        ] {
            assert_ne!(other.increment_at(0, 0.01, &g, 1).unwrap(), base);
        }
    }

    #[test]
    fn halving_spacing_doubles_std_exactly() {
        let coarse = TorusGrid::new(4.0, 32).unwrap();
        let fine = TorusGrid::new(2.0, 32).unwrap();
        let s = NoiseStream::new(1, 0, Channel::W);
        let a = s.increment_at(5, 0.02, &coarse, 1).unwrap();
        let b = s.increment_at(5, 0.02, &fine, 1).unwrap();
        for (x, y) in a.field.values().iter().zip(b.field.values()) {
            assert!((2.0 * x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }

    #[test]
    fn small_torus_is_restriction_of_large_torus() {
        let small = TorusGrid::new(4.0, 32).unwrap();
        let large = TorusGrid::new(8.0, 64).unwrap();
        let s = NoiseStream::new(11, 2, Channel::WTilde);
        let a = s.increment_at(9, 0.01, &small, 1).unwrap();
        let b = s.increment_at(9, 0.01, &large, 1).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(a.field.at(0, i, j), b.field.at(0, i + 16, j + 16));
            }
        }
    }

    #[test]
    fn split_halves_have_half_variance() {
        let g = TorusGrid::new(8.0, 64).unwrap();
        let mut s = NoiseStream::new(3, 0, Channel::W);
        let (mut a, mut b) = (vec![0.0; g.cells()], vec![0.0; g.cells()]);
        let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
        let steps = 40;
        for _ in 0..steps {
            s.sample_split_into(0.04, &g, 1, &mut a, &mut b);
            for (x, y) in a.iter().zip(&b) {
                sa += x * x;
                sb += y * y;
                sab += x * y;
            }
        }
        let count = (steps * g.cells()) as f64;
        let target = 0.02 / g.cell_area();
        let se = target * (2.0 / count).sqrt();
        assert!((sa / count - target).abs() < 5.0 * se);
        assert!((sb / count - target).abs() < 5.0 * se);
        assert!((sab / count).abs() < 5.0 * target / count.sqrt());
    }

    #[test]
    fn smoothing_rejects_nonpositive_rho() {
        let g = grid();
        let sp = Spectral::new(g);
        let inc = NoiseStream::new(1, 0, Channel::W).increment_at(0, 0.1, &g, 1).unwrap();
        assert!(smooth_increment(&inc, 0.0, &sp).is_err());
        assert!(NoiseStream::new(1, 0, Channel::W).increment_at(0, 0.0, &g, 1).is_err());
    }

    #[test]
    fn scalar_stream_moments() {
        let mut s = ScalarStream::new(5, 0, 0);
        let n = 200_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let z = s.normal();
            m1 += z;
            m2 += z * z;
        }
        let nf = n as f64;
        assert!((m1 / nf).abs() < 5.0 / nf.sqrt());
        assert!((m2 / nf - 1.0).abs() < 5.0 * (2.0 / nf).sqrt());
    }

    #[test]
    fn refined_increments_sum_base_increments() {
        let g = grid();
        let len = g.cells();
        let dt = 0.02;
        let (mut one, mut tmp) = (vec![0.0; len], vec![0.0; len]);
        let mut plain = vec![0.0; len];
        let mut s = NoiseStream::new(4, 1, Channel::W);
        s.step = 3;
        s.clone().sample_refined_into(dt, 1, &g, 1, &mut one, &mut tmp);
        s.clone().sample_into(dt, &g, 1, &mut plain);
        assert_eq!(one, plain);
        // k = 2 over dt equals two unrefined draws over dt/2 at steps 6, 7
        let mut two = vec![0.0; len];
        s.clone().sample_refined_into(dt, 2, &g, 1, &mut two, &mut tmp);
        let a = s.increment_at(6, dt / 2.0, &g, 1).unwrap();
        let b = s.increment_at(7, dt / 2.0, &g, 1).unwrap();
        for (i, v) in two.iter().enumerate() {
            assert!((v - a.field.values()[i] - b.field.values()[i]).abs() < 1e-12);
        }
        let (mut f, mut h) = (vec![0.0; len], vec![0.0; len]);
        s.clone().sample_refined_split_into(dt, 2, &g, 1, &mut f, &mut h, &mut tmp);
        assert_eq!(f, a.field.values());
        assert_eq!(h, b.field.values());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn replica_order_does_not_matter(seed in any::<u64>(), order in Just((0u64..6).collect::<Vec<_>>()).prop_shuffle()) {
                let g = grid();
                let draw = |r: u64| NoiseStream::new(seed, r, Channel::W).increment_at(2, 0.01, &g, 1).unwrap().field;
                let sorted: Vec<Field> = (0..6).map(draw).collect();
                let mut shuffled: Vec<(u64, Field)> = order.iter().map(|r| (*r, draw(*r))).collect();
                shuffled.sort_by_key(|(r, _)| *r);
                prop_assert_eq!(sorted, shuffled.into_iter().map(|(_, f)| f).collect::<Vec<_>>());
            }

            #[test]
            fn tuples_give_distinct_streams(seed in any::<u64>(), r in 0u64..1000, step in 0u64..1000) {
                let g = grid();
                let a = NoiseStream::new(seed, r, Channel::W).increment_at(step, 0.01, &g, 1).unwrap();
                let b = NoiseStream::new(seed, r + 1, Channel::W).increment_at(step, 0.01, &g, 1).unwrap();
                let c = NoiseStream::new(seed, r, Channel::WTilde).increment_at(step, 0.01, &g, 1).unwrap();
                let d = NoiseStream::new(seed, r, Channel::W).increment_at(step + 1, 0.01, &g, 1).unwrap();
                prop_assert!(a.field != b.field && a.field != c.field && a.field != d.field);
                prop_assert!(a.field.is_finite());
            }
        }
    }
}
