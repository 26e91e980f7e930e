//! Counter-based white-noise streams.
//!
//! Every increment is a pure function of (seed, replica, channel, step),
//! so replicas can be generated in any order. Refined draws over a finer
//! base step share one Brownian path across coarser Δt.

use shelab::noise::{smooth_increment, Channel, NoiseStream};
use shelab::stats::{mean, variance};
use shelab::torus::{Spectral, TorusGrid};

fn main() -> shelab::Result<()> {
    let grid = TorusGrid::new(8.0, 64)?;
    let dt = 0.01;

    let mut s = NoiseStream::new(7, 3, Channel::W);
    let first = s.sample_increment(dt, &grid, 1)?;
    let again = NoiseStream::new(7, 3, Channel::W).increment_at(0, dt, &grid, 1)?;
    println!("replayed step 0 identical: {}", first.field == again.field);

    let v = first.field.values();
    println!(
        "cell mean {:+.4}, cell variance {:.4} (target dt/dx^2 = {:.4})",
        mean(v),
        variance(v),
        dt / (grid.dx() * grid.dx())
    );

    let other = NoiseStream::new(7, 3, Channel::WTilde).increment_at(0, dt, &grid, 1)?;
    let corr = shelab::stats::covariance(v, other.field.values()) / variance(v);
    println!("W vs W~ channel correlation {corr:+.4}");

    // one step of 4·dt drawn as 4 base increments equals the sum of the
    // base increments drawn one at a time
    let cells = grid.cells();
    let (mut coarse, mut tmp) = (vec![0.0; cells], vec![0.0; cells]);
    NoiseStream::new(7, 3, Channel::W).sample_refined_into(4.0 * dt, 4, &grid, 1, &mut coarse, &mut tmp);
    let mut fine = NoiseStream::new(7, 3, Channel::W);
    let mut sum = vec![0.0; cells];
    for _ in 0..4 {
        let mut b = vec![0.0; cells];
        fine.sample_refined_into(dt, 1, &grid, 1, &mut b, &mut tmp);
        for (acc, x) in sum.iter_mut().zip(&b) {
            *acc += x;
        }
    }
    let diff = coarse.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("refined coarse step vs summed fine steps: max diff {diff:.2e}");

    // spatial smoothing at scale rho shrinks the cell variance
    let spectral = Spectral::new(grid);
    for rho in [0.1, 0.05, 0.025] {
        let sm = smooth_increment(&first, rho, &spectral)?;
        println!("rho {rho}: smoothed cell variance {:.4}", variance(sm.field.values()));
    }
    Ok(())
}
