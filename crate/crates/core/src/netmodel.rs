//! Multi-cell downlink network model: cell geometry, fading channels, SINR and
//! sum-rate evaluation, and power-feasibility projections.
//!
//! The network has `B` cells, each with one base station (BS) serving `K`
//! single-antenna users over a shared band of `W` Hz. Every transmission other
//! than a user's own — including the serving BS's transmissions to co-cell
//! users — appears as interference at that user. Channel amplitudes combine
//! `(1 + d/d0)^(-alpha)` distance pathloss with unit-variance Rayleigh fading.
//!
//! All arithmetic is carried out in watts, Hz, and meters; dBm appears only at
//! configuration and reporting boundaries.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell arrangement for BS placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Cells in a row, adjacent centers `2·r·cos(30°)` apart. Works for any
    /// `B ≥ 1`; degenerates to a single cell at the origin for `B = 1`.
    Line3,
    /// Seven-cell hexagonal cluster; BS→user distances use the wraparound
    /// minimum over the cluster's six mirror translations. Requires `B = 7`.
    Hex7Wraparound,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::Line3 => "line3",
            Layout::Hex7Wraparound => "hex7_wraparound",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "line3" => Ok(Layout::Line3),
            "hex7_wraparound" => Ok(Layout::Hex7Wraparound),
            other => Err(Error::Parse(format!("unknown layout `{other}`"))),
        }
    }
}

/// Physical and layout constants of the simulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of cells (equivalently base stations) B.
    pub num_cells: usize,
    /// Users per cell K.
    pub users_per_cell: usize,
    /// System bandwidth W in Hz.
    pub bandwidth_hz: f64,
    /// Transmit power ceiling in dBm (per user, or per BS in sum-power mode).
    pub pmax_dbm: f64,
    /// Thermal noise power spectral density in dBm/Hz.
    pub noise_psd_dbm_hz: f64,
    /// Receiver noise figure in dB.
    pub noise_figure_db: f64,
    /// Pathloss reference distance d0 in meters.
    pub ref_distance_m: f64,
    /// Cell circumradius in meters.
    pub cell_radius_m: f64,
    /// Pathloss exponent alpha.
    pub pathloss_exp: f64,
    /// BS arrangement.
    pub layout: Layout,
}

impl NetworkConfig {
    /// Three cells in a row, two users each — the small benchmark scenario.
    pub fn three_cell() -> Self {
        NetworkConfig {
            num_cells: 3,
            users_per_cell: 2,
            bandwidth_hz: 20e6,
            pmax_dbm: 43.0,
            noise_psd_dbm_hz: -150.0,
            noise_figure_db: 9.0,
            ref_distance_m: 0.392,
            cell_radius_m: 1000.0,
            pathloss_exp: 3.76,
            layout: Layout::Line3,
        }
    }

    /// Seven-cell wraparound cluster, eight users per cell — the large
    /// benchmark scenario.
    pub fn seven_cell() -> Self {
        NetworkConfig {
            num_cells: 7,
            users_per_cell: 8,
            pathloss_exp: 4.00,
            layout: Layout::Hex7Wraparound,
            ..Self::three_cell()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cells == 0 || self.users_per_cell == 0 {
            return Err(Error::Config(
                "need at least one cell and one user per cell".into(),
            ));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::Config(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth_hz
            )));
        }
        if !(self.cell_radius_m > 0.0) || !(self.ref_distance_m > 0.0) {
            return Err(Error::Config(
                "cell radius and reference distance must be positive".into(),
            ));
        }
        if !(self.pathloss_exp > 0.0) {
            return Err(Error::Config(format!(
                "pathloss exponent must be positive, got {}",
                self.pathloss_exp
            )));
        }
        if !self.pmax_dbm.is_finite()
            || !self.noise_psd_dbm_hz.is_finite()
            || !self.noise_figure_db.is_finite()
        {
            return Err(Error::Config(
                "power and noise figures must be finite".into(),
            ));
        }
        if self.layout == Layout::Hex7Wraparound && self.num_cells != 7 {
            return Err(Error::Config(format!(
                "hex7_wraparound layout requires 7 cells, got {}",
                self.num_cells
            )));
        }
        Ok(())
    }

    /// Power ceiling converted to watts.
    pub fn pmax_watts(&self) -> f64 {
        dbm_to_watts(self.pmax_dbm)
    }

    /// Total links in the network (B·K).
    pub fn num_links(&self) -> usize {
        self.num_cells * self.users_per_cell
    }
}

/// Converts a power level from dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Converts a power level from watts to dBm.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// A point in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// BS and user positions for one realization.
#[derive(Debug, Clone)]
pub struct Geometry {
    bs: Vec<Point2>,
    users: Vec<Point2>,
    users_per_cell: usize,
}

impl Geometry {
    pub fn num_cells(&self) -> usize {
        self.bs.len()
    }

    pub fn bs(&self, b: usize) -> Point2 {
        self.bs[b]
    }

    /// Position of user `k` served by BS `b`.
    pub fn user(&self, b: usize, k: usize) -> Point2 {
        self.users[b * self.users_per_cell + k]
    }
}

/// BS centers for the given layout, cells spaced `sqrt(3)·r` apart.
fn bs_centers(cfg: &NetworkConfig) -> Vec<Point2> {
    let spacing = 3f64.sqrt() * cfg.cell_radius_m;
    match cfg.layout {
        Layout::Line3 => {
            let mid = (cfg.num_cells as f64 - 1.0) / 2.0;
            (0..cfg.num_cells)
                .map(|i| Point2 {
                    x: (i as f64 - mid) * spacing,
                    y: 0.0,
                })
                .collect()
        }
        Layout::Hex7Wraparound => {
            let mut centers = vec![Point2 { x: 0.0, y: 0.0 }];
            for i in 0..6 {
                let ang = i as f64 * std::f64::consts::FRAC_PI_3;
                centers.push(Point2 {
                    x: spacing * ang.cos(),
                    y: spacing * ang.sin(),
                });
            }
            centers
        }
    }
}

/// Mirror translations whose images tile the plane with copies of the 7-cell
/// cluster; includes the identity. Minimum-image distances take the closest
/// copy of the BS.
fn wraparound_images(cfg: &NetworkConfig) -> Vec<Point2> {
    match cfg.layout {
        Layout::Line3 => vec![Point2 { x: 0.0, y: 0.0 }],
        Layout::Hex7Wraparound => {
            // Cluster translation vector t = 2·a1 + a2 for cell lattice basis
            // a1, a2 (|t| = sqrt(21)·r); the six mirrors are its 60° rotations.
            let r = cfg.cell_radius_m;
            let s3 = 3f64.sqrt();
            let (tx, ty) = (2.5 * s3 * r, 1.5 * r);
            let mut images = vec![Point2 { x: 0.0, y: 0.0 }];
            for i in 0..6 {
                let ang = i as f64 * std::f64::consts::FRAC_PI_3;
                let (c, s) = (ang.cos(), ang.sin());
                images.push(Point2 {
                    x: tx * c - ty * s,
                    y: tx * s + ty * c,
                });
            }
            images
        }
    }
}

/// BS→user distance, minimized over wraparound images for the 7-cell cluster.
fn link_distance(cfg: &NetworkConfig, images: &[Point2], bs: Point2, user: Point2) -> f64 {
    debug_assert!(!images.is_empty());
    let _ = cfg;
    images
        .iter()
        .map(|t| {
            Point2 {
                x: bs.x + t.x,
                y: bs.y + t.y,
            }
            .dist(user)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Uniform point in a pointy-top hexagon of circumradius `r` centered at `c`,
/// via rejection sampling from the bounding box (acceptance probability 3/4).
fn sample_in_hexagon(c: Point2, r: f64, rng: &mut impl Rng) -> Point2 {
    let half_w = 3f64.sqrt() / 2.0 * r;
    loop {
        let x = (2.0 * rng.random::<f64>() - 1.0) * half_w;
        let y = (2.0 * rng.random::<f64>() - 1.0) * r;
        if x.abs() + 3f64.sqrt() * y.abs() <= 3f64.sqrt() * r {
            return Point2 {
                x: c.x + x,
                y: c.y + y,
            };
        }
    }
}

/// Samples BS-fixed, user-uniform network geometry.
pub fn sample_geometry(cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Geometry> {
    cfg.validate()?;
    let bs = bs_centers(cfg);
    let mut users = Vec::with_capacity(cfg.num_links());
    for &center in &bs {
        for _ in 0..cfg.users_per_cell {
            users.push(sample_in_hexagon(center, cfg.cell_radius_m, rng));
        }
    }
    Ok(Geometry {
        bs,
        users,
        users_per_cell: cfg.users_per_cell,
    })
}

/// Distance pathloss `(1 + d/d0)^(-alpha)`.
pub fn pathloss(distance_m: f64, ref_distance_m: f64, alpha: f64) -> f64 {
    debug_assert!(distance_m >= 0.0 && ref_distance_m > 0.0 && alpha > 0.0);
    (1.0 + distance_m / ref_distance_m).powf(-alpha)
}

/// Complex downlink amplitudes for one time slot, indexed
/// `(transmitting BS, serving BS, user)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    num_cells: usize,
    users_per_cell: usize,
    data: Vec<Complex64>,
}

impl ChannelTensor {
    pub fn new(num_cells: usize, users_per_cell: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != num_cells * num_cells * users_per_cell {
            return Err(Error::Shape(format!(
                "channel tensor for B={num_cells}, K={users_per_cell} needs {} entries, got {}",
                num_cells * num_cells * users_per_cell,
                data.len()
            )));
        }
        Ok(ChannelTensor {
            num_cells,
            users_per_cell,
            data,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn users_per_cell(&self) -> usize {
        self.users_per_cell
    }

    fn idx(&self, tx: usize, cell: usize, user: usize) -> usize {
        debug_assert!(tx < self.num_cells && cell < self.num_cells && user < self.users_per_cell);
        (tx * self.num_cells + cell) * self.users_per_cell + user
    }

    /// Amplitude from BS `tx` to user `user` served by BS `cell`.
    pub fn gain(&self, tx: usize, cell: usize, user: usize) -> Complex64 {
        self.data[self.idx(tx, cell, user)]
    }

    /// `|h|²` for the same link.
    pub fn power_gain(&self, tx: usize, cell: usize, user: usize) -> f64 {
        self.gain(tx, cell, user).norm_sqr()
    }

    pub fn set_gain(&mut self, tx: usize, cell: usize, user: usize, value: Complex64) {
        let i = self.idx(tx, cell, user);
        self.data[i] = value;
    }
}

/// Draws one channel realization: `h = g·sqrt(beta)` with unit-variance
/// circularly-symmetric complex normal fading `g`, independent per entry.
pub fn sample_channels(geom: &Geometry, cfg: &NetworkConfig, rng: &mut impl Rng) -> ChannelTensor {
    let (b_n, k_n) = (cfg.num_cells, cfg.users_per_cell);
    debug_assert_eq!(geom.num_cells(), b_n);
    let images = wraparound_images(cfg);
    let mut data = Vec::with_capacity(b_n * b_n * k_n);
    for tx in 0..b_n {
        for cell in 0..b_n {
            for user in 0..k_n {
                let d = link_distance(cfg, &images, geom.bs(tx), geom.user(cell, user));
                let beta = pathloss(d, cfg.ref_distance_m, cfg.pathloss_exp);
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                let g = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
                data.push(g * beta.sqrt());
            }
        }
    }
    ChannelTensor {
        num_cells: b_n,
        users_per_cell: k_n,
        data,
    }
}

/// Receiver noise power in watts:
/// `z_dBm = noise PSD + 10·log10(W) + noise figure`.
pub fn noise_power(cfg: &NetworkConfig) -> f64 {
    let z_dbm = cfg.noise_psd_dbm_hz + 10.0 * cfg.bandwidth_hz.log10() + cfg.noise_figure_db;
    dbm_to_watts(z_dbm)
}

/// Per-(BS, user) transmit powers in watts — the decision variable.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerMatrix {
    num_cells: usize,
    users_per_cell: usize,
    data: Vec<f64>,
}

impl PowerMatrix {
    pub fn zeros(num_cells: usize, users_per_cell: usize) -> Self {
        PowerMatrix {
            num_cells,
            users_per_cell,
            data: vec![0.0; num_cells * users_per_cell],
        }
    }

    pub fn uniform(num_cells: usize, users_per_cell: usize, value: f64) -> Self {
        PowerMatrix {
            num_cells,
            users_per_cell,
            data: vec![value; num_cells * users_per_cell],
        }
    }

    pub fn from_rows(num_cells: usize, users_per_cell: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_cells * users_per_cell {
            return Err(Error::Shape(format!(
                "power matrix for B={num_cells}, K={users_per_cell} needs {} entries, got {}",
                num_cells * users_per_cell,
                data.len()
            )));
        }
        Ok(PowerMatrix {
            num_cells,
            users_per_cell,
            data,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn users_per_cell(&self) -> usize {
        self.users_per_cell
    }

    pub fn get(&self, b: usize, k: usize) -> f64 {
        self.data[b * self.users_per_cell + k]
    }

    pub fn set(&mut self, b: usize, k: usize, value: f64) {
        self.data[b * self.users_per_cell + k] = value;
    }

    /// Flat view, row-major by BS.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.data[b * self.users_per_cell..(b + 1) * self.users_per_cell]
    }

    pub fn row_sum(&self, b: usize) -> f64 {
        self.row(b).iter().sum()
    }
}

/// Power-feasibility interpretation of the ceiling `Pmax`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Every entry individually within `[0, Pmax]`.
    #[default]
    PerUser,
    /// Entries nonnegative and every BS row summing to at most `Pmax`.
    SumPower,
}

impl ConstraintMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintMode::PerUser => "per_user",
            ConstraintMode::SumPower => "sum_power",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_user" => Ok(ConstraintMode::PerUser),
            "sum_power" => Ok(ConstraintMode::SumPower),
            other => Err(Error::Parse(format!("unknown constraint mode `{other}`"))),
        }
    }
}

/// Projects one BS's power row onto the feasible set in place.
///
/// Per-user: clamp each entry to `[0, Pmax]`. Sum-power: clamp entries to
/// `[0, Pmax]`, then rescale the row down to the budget if its sum exceeds
/// `Pmax`.
pub fn project_power_row(row: &mut [f64], pmax_watts: f64, mode: ConstraintMode) {
    for v in row.iter_mut() {
        *v = v.clamp(0.0, pmax_watts);
    }
    if mode == ConstraintMode::SumPower {
        let s: f64 = row.iter().sum();
        if s > pmax_watts {
            let scale = pmax_watts / s;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Projects raw powers onto the feasible set of the selected constraint mode,
/// row by row (see [`project_power_row`]).
pub fn project_powers(p: &PowerMatrix, pmax_watts: f64, mode: ConstraintMode) -> PowerMatrix {
    let mut out = p.clone();
    for b in 0..out.num_cells {
        let start = b * out.users_per_cell;
        project_power_row(
            &mut out.data[start..start + out.users_per_cell],
            pmax_watts,
            mode,
        );
    }
    out
}

/// SINR of link `(b, k)`: own-signal power over noise plus the power received
/// from every other link's transmission, intra-cell terms included.
pub fn sinr(h: &ChannelTensor, p: &PowerMatrix, z: f64, b: usize, k: usize) -> f64 {
    debug_assert!(z > 0.0);
    let signal = p.get(b, k) * h.power_gain(b, b, k);
    let mut denom = z;
    for tx in 0..h.num_cells() {
        for kp in 0..h.users_per_cell() {
            if tx == b && kp == k {
                continue;
            }
            denom += p.get(tx, kp) * h.power_gain(tx, b, k);
        }
    }
    signal / denom
}

/// Network sum-rate `W·Σ log2(1 + SINR)` in bits/s.
pub fn sum_rate(h: &ChannelTensor, p: &PowerMatrix, z: f64, bandwidth_hz: f64) -> f64 {
    let mut acc = 0.0;
    for b in 0..h.num_cells() {
        for k in 0..h.users_per_cell() {
            acc += (1.0 + sinr(h, p, z, b, k)).log2();
        }
    }
    bandwidth_hz * acc
}
