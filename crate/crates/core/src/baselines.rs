//! Reference power-allocation schemes: fixed max-power, uniform random, and
//! two iterative optimizers — a weighted minimum mean-squared-error solver
//! and a fractional-programming (quadratic-transform) solver — each tracing
//! per-iterate sum-rates for convergence plots.
//!
//! Both iterative solvers work on channel **magnitudes** only: the sum-rate
//! depends on the gains solely through `|h|²`, so dropping phases is exact
//! for this model and keeps every internal quantity real. Both initialize at
//! full power and stop when the relative sum-rate change falls below the
//! tolerance. A converged point is then probed with single-link boundary
//! flips (one link fully off or fully on): full power can be a per-link
//! equilibrium of the coordinate updates even when silencing one strong
//! interferer is strictly better, and the flip probes escape exactly that
//! kind of stationary point. A flip is accepted only when it already raises
//! the sum-rate, and the descent then resumes from the flipped allocation,
//! so recorded traces stay monotonically nondecreasing throughout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::netmodel::{noise_power, sinr, sum_rate, ChannelTensor, NetworkConfig, PowerMatrix};

/// Default relative sum-rate change below which a solver stops.
pub const DEFAULT_SOLVER_TOL: f64 = 1e-4;
/// Default iteration budget for the iterative solvers.
pub const DEFAULT_SOLVER_MAX_ITERS: usize = 500;

/// Iterate-by-iterate record of one solver run.
#[derive(Debug, Clone)]
pub struct SolverTrace {
    /// Power allocation at every iterate, index 0 being the initialization.
    pub powers: Vec<PowerMatrix>,
    /// Network sum-rate (bits/s) of each recorded allocation.
    pub sum_rates: Vec<f64>,
    /// Whether the final descent stopped via the relative-change rule
    /// (rather than by exhausting the iteration budget).
    pub converged: bool,
    /// Power updates performed — descent steps and accepted boundary flips
    /// alike (trace length minus the initial point).
    pub iterations: usize,
}

impl SolverTrace {
    pub fn final_powers(&self) -> &PowerMatrix {
        self.powers
            .last()
            .expect("trace always holds the initial point")
    }

    pub fn final_sum_rate(&self) -> f64 {
        *self
            .sum_rates
            .last()
            .expect("trace always holds the initial point")
    }
}

/// Every BS transmits at the full per-link budget to every user.
pub fn max_power(cfg: &NetworkConfig) -> PowerMatrix {
    PowerMatrix::uniform(cfg.num_cells, cfg.users_per_cell, cfg.pmax_watts())
}

/// Independent uniform draws on `[0, Pmax]` for every link, in row-major
/// (BS-major, then user) order.
pub fn random_power(cfg: &NetworkConfig, rng: &mut impl Rng) -> PowerMatrix {
    let data = (0..cfg.num_links())
        .map(|_| rng.random::<f64>() * cfg.pmax_watts())
        .collect();
    PowerMatrix::from_rows(cfg.num_cells, cfg.users_per_cell, data)
        .expect("dimensions are consistent by construction")
}

/// Gain magnitudes `a[tx][cell][k] = |h[tx][cell][k]|` in the channel
/// tensor's own index order.
struct GainMagnitudes {
    b: usize,
    k: usize,
    a: Vec<f64>,
}

impl GainMagnitudes {
    fn new(h: &ChannelTensor) -> Result<Self> {
        let (b, k) = (h.num_cells(), h.users_per_cell());
        let mut a = Vec::with_capacity(b * b * k);
        for tx in 0..b {
            for cell in 0..b {
                for user in 0..k {
                    let mag = h.gain(tx, cell, user).norm();
                    if !mag.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite channel magnitude at tx {tx}, cell {cell}, user {user}"
                        )));
                    }
                    a.push(mag);
                }
            }
        }
        Ok(GainMagnitudes { b, k, a })
    }

    #[inline]
    fn get(&self, tx: usize, cell: usize, user: usize) -> f64 {
        self.a[(tx * self.b + cell) * self.k + user]
    }
}

fn check_solver_args(h: &ChannelTensor, cfg: &NetworkConfig, tol: f64) -> Result<()> {
    cfg.validate()?;
    if h.num_cells() != cfg.num_cells || h.users_per_cell() != cfg.users_per_cell {
        return Err(Error::Shape(format!(
            "channel tensor is {}×{} users but the network is {}×{}",
            h.num_cells(),
            h.users_per_cell(),
            cfg.num_cells,
            cfg.users_per_cell
        )));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::Config(format!(
            "solver tolerance must be positive, got {tol}"
        )));
    }
    Ok(())
}

/// Shared solver driver. Alternates two phases, starting from full power:
///
/// 1. **Descent** — apply `step` until the relative sum-rate change drops
///    below `tol` or the shared iteration budget runs out.
/// 2. **Escape probe** — evaluate every allocation that differs from the
///    converged point by one link forced to a power bound (0 or `Pmax`); if
///    the best such flip strictly raises the sum-rate, take it and go back
///    to phase 1 from there.
///
/// Phase 2 rescues the descent from boundary equilibria: full power is a
/// fixed point of the per-link updates on some channel draws even though
/// silencing one strong interferer is strictly better, and no monotone
/// coordinate method can leave it on its own. Flips are accepted only when
/// they already improve the objective, so traces remain monotonically
/// nondecreasing; at most one flip per link is taken, and descent steps all
/// draw from the single `max_iters` budget. Optionally snapshots every
/// iterate.
fn run_solver(
    name: &str,
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    max_iters: usize,
    tol: f64,
    record: bool,
    mut step: impl FnMut(&mut PowerMatrix) -> Result<()>,
) -> Result<SolverTrace> {
    check_solver_args(h, cfg, tol)?;
    let z = noise_power(&cfg);
    let w = cfg.bandwidth_hz;
    let pmax = cfg.pmax_watts();
    let mut p = max_power(cfg);
    let mut rate = sum_rate(h, &p, z, w);
    let mut trace = SolverTrace {
        powers: if record { vec![p.clone()] } else { Vec::new() },
        sum_rates: vec![rate],
        converged: false,
        iterations: 0,
    };
    let mut budget = max_iters;
    let mut flips_left = cfg.num_links();
    loop {
        // Descent until the stopping rule or the budget fires.
        trace.converged = false;
        while budget > 0 {
            budget -= 1;
            step(&mut p)?;
            let new_rate = sum_rate(h, &p, z, w);
            if !new_rate.is_finite() {
                return Err(Error::Numerical(format!(
                    "{name} produced a non-finite sum-rate at iteration {}",
                    trace.iterations + 1
                )));
            }
            if record {
                trace.powers.push(p.clone());
            }
            trace.sum_rates.push(new_rate);
            trace.iterations += 1;
            let done = (new_rate - rate).abs() <= tol * rate.abs().max(f64::MIN_POSITIVE);
            rate = new_rate;
            if done {
                trace.converged = true;
                break;
            }
        }
        if !trace.converged || flips_left == 0 {
            break; // budget exhausted mid-descent, or all flips spent
        }
        // Best strictly improving single-link boundary flip, if any.
        let mut best: Option<(usize, usize, f64, f64)> = None;
        for b in 0..cfg.num_cells {
            for k in 0..cfg.users_per_cell {
                let old = p.get(b, k);
                for level in [0.0, pmax] {
                    if old == level {
                        continue;
                    }
                    p.set(b, k, level);
                    let r = sum_rate(h, &p, z, w);
                    if r > rate && best.map_or(true, |(_, _, _, br)| r > br) {
                        best = Some((b, k, level, r));
                    }
                }
                p.set(b, k, old);
            }
        }
        let Some((b, k, level, r)) = best else { break };
        p.set(b, k, level);
        rate = r;
        flips_left -= 1;
        if record {
            trace.powers.push(p.clone());
        }
        trace.sum_rates.push(r);
        trace.iterations += 1;
    }
    if !record {
        trace.powers.push(p);
    }
    Ok(trace)
}

/// One block-coordinate round of the weighted MMSE solver, updating the
/// allocation in place. `v = sqrt(p)` are transmit amplitudes; receiver
/// scalars `u`, MSE weights `w`, and amplitudes are each updated in closed
/// form, with the amplitude clamped to the feasible interval (applied in the
/// power domain so an active ceiling lands on `Pmax` exactly).
fn wmmse_step(a: &GainMagnitudes, z: f64, pmax: f64, p: &mut PowerMatrix) -> Result<()> {
    let (nb, nk) = (a.b, a.k);
    let v: Vec<f64> = p.as_slice().iter().map(|&x| x.sqrt()).collect();
    let idx = |b: usize, k: usize| b * nk + k;

    // Receiver scalar per link: matched filter over total received power.
    let mut u = vec![0.0; nb * nk];
    for b in 0..nb {
        for k in 0..nk {
            let mut denom = z;
            for bp in 0..nb {
                let g = a.get(bp, b, k);
                let g2 = g * g;
                for kp in 0..nk {
                    denom += g2 * v[idx(bp, kp)] * v[idx(bp, kp)];
                }
            }
            u[idx(b, k)] = a.get(b, b, k) * v[idx(b, k)] / denom;
        }
    }

    // MSE weight per link; the own-signal fraction is strictly below one, so
    // the weight is finite and at least one.
    let mut w = vec![0.0; nb * nk];
    for b in 0..nb {
        for k in 0..nk {
            w[idx(b, k)] = 1.0 / (1.0 - u[idx(b, k)] * a.get(b, b, k) * v[idx(b, k)]);
        }
    }

    // Amplitude per link, clamped to the power budget.
    for b in 0..nb {
        for k in 0..nk {
            let mut denom = 0.0;
            for bp in 0..nb {
                for kp in 0..nk {
                    let g = a.get(b, bp, kp);
                    let uu = u[idx(bp, kp)];
                    denom += w[idx(bp, kp)] * uu * uu * g * g;
                }
            }
            let v_new = w[idx(b, k)] * u[idx(b, k)] * a.get(b, b, k) / denom;
            let p_new = (v_new * v_new).clamp(0.0, pmax);
            if !p_new.is_finite() {
                return Err(Error::Numerical(
                    "non-finite iterate in the MMSE solver".into(),
                ));
            }
            p.set(b, k, p_new);
        }
    }
    Ok(())
}

/// One round of the fractional-programming (quadratic-transform) solver:
/// refresh the per-link SINRs, update the auxiliary variables `y` (the
/// denominator intentionally includes the own-signal term), then take the
/// closed-form power update capped at the budget.
fn fp_step(
    a: &GainMagnitudes,
    z: f64,
    pmax: f64,
    h: &ChannelTensor,
    p: &mut PowerMatrix,
) -> Result<()> {
    let (nb, nk) = (a.b, a.k);
    let idx = |b: usize, k: usize| b * nk + k;

    let mut gamma = vec![0.0; nb * nk];
    for b in 0..nb {
        for k in 0..nk {
            gamma[idx(b, k)] = sinr(h, p, z, b, k);
        }
    }

    let mut y = vec![0.0; nb * nk];
    for b in 0..nb {
        for k in 0..nk {
            let mut denom = z;
            for bp in 0..nb {
                let g = a.get(bp, b, k);
                let g2 = g * g;
                for kp in 0..nk {
                    denom += g2 * p.get(bp, kp);
                }
            }
            let g_own = a.get(b, b, k);
            y[idx(b, k)] = ((1.0 + gamma[idx(b, k)]) * p.get(b, k)).sqrt() * g_own / denom;
        }
    }

    for b in 0..nb {
        for k in 0..nk {
            let mut denom = 0.0;
            for bp in 0..nb {
                for kp in 0..nk {
                    let g = a.get(b, bp, kp);
                    let yy = y[idx(bp, kp)];
                    denom += yy * yy * g * g;
                }
            }
            let num = y[idx(b, k)] * (1.0 + gamma[idx(b, k)]).sqrt() * a.get(b, b, k);
            let root = num / denom;
            let p_new = (root * root).min(pmax);
            if !p_new.is_finite() {
                return Err(Error::Numerical(
                    "non-finite iterate in the FP solver".into(),
                ));
            }
            p.set(b, k, p_new);
        }
    }
    Ok(())
}

/// Weighted-MMSE power allocation with a full per-iterate trace.
pub fn wmmse(
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    max_iters: usize,
    tol: f64,
) -> Result<SolverTrace> {
    let a = GainMagnitudes::new(h)?;
    let (z, pmax) = (noise_power(cfg), cfg.pmax_watts());
    run_solver("wmmse", h, cfg, max_iters, tol, true, |p| {
        wmmse_step(&a, z, pmax, p)
    })
}

/// Weighted-MMSE allocation keeping only the final point (no per-iterate
/// snapshots); the arithmetic is identical to [`wmmse`].
pub fn wmmse_allocation(
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    max_iters: usize,
    tol: f64,
) -> Result<SolverTrace> {
    let a = GainMagnitudes::new(h)?;
    let (z, pmax) = (noise_power(cfg), cfg.pmax_watts());
    run_solver("wmmse", h, cfg, max_iters, tol, false, |p| {
        wmmse_step(&a, z, pmax, p)
    })
}

/// Fractional-programming power allocation with a full per-iterate trace.
pub fn fp(
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    max_iters: usize,
    tol: f64,
) -> Result<SolverTrace> {
    let a = GainMagnitudes::new(h)?;
    let (z, pmax) = (noise_power(cfg), cfg.pmax_watts());
    run_solver("fp", h, cfg, max_iters, tol, true, |p| {
        fp_step(&a, z, pmax, h, p)
    })
}

/// Fractional-programming allocation keeping only the final point; the
/// arithmetic is identical to [`fp`].
pub fn fp_allocation(
    h: &ChannelTensor,
    cfg: &NetworkConfig,
    max_iters: usize,
    tol: f64,
) -> Result<SolverTrace> {
    let a = GainMagnitudes::new(h)?;
    let (z, pmax) = (noise_power(cfg), cfg.pmax_watts());
    run_solver("fp", h, cfg, max_iters, tol, false, |p| {
        fp_step(&a, z, pmax, h, p)
    })
}
