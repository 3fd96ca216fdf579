//! Deterministic synthetic dataset with a family → variant hierarchy.
//!
//! Each codec family owns a base `(SR, BPS, Q)` triple on a fixed grid and a
//! random direction; every record is a variant that moves one parameter one
//! grid step. The 32-dim raw feature is the family direction (8 values) plus
//! sinusoidal encodings of the three log-parameters (8 each), plus Gaussian
//! noise, mapped to `dim` by a fixed random matrix. The last `open_families`
//! families only appear in the test split, and their variants never coincide
//! with a closed family's variant.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, EmbeddingRecord, SetType, Split};
use crate::error::{Error, Result};

pub const SR_GRID: [f64; 4] = [8000.0, 16000.0, 24000.0, 44100.0];
pub const BPS_GRID: [f64; 5] = [1500.0, 3000.0, 6000.0, 12000.0, 24000.0];
pub const Q_GRID: [u32; 5] = [2, 4, 8, 16, 32];

const DIRECTION_DIM: usize = 8;
const FREQUENCIES: usize = 8;
pub const RAW_DIM: usize = DIRECTION_DIM + 3 * FREQUENCIES;

const MAX_FAMILY_DRAWS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dim: usize,
    pub family_count: usize,
    pub open_families: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 8000,
            n_val: 1000,
            n_test: 2000,
            dim: 128,
            family_count: 8,
            open_families: 2,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < RAW_DIM {
            return Err(Error::Config(format!(
                "synthetic dimension {} is below the {RAW_DIM} raw features",
                self.dim
            )));
        }
        if self.open_families >= self.family_count {
            return Err(Error::Config(format!(
                "{} open families leave no closed family out of {}",
                self.open_families, self.family_count
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Grid indices `[sr, bps, q]`.
type Cell = [usize; 3];

const GRID_LEN: [usize; 3] = [SR_GRID.len(), BPS_GRID.len(), Q_GRID.len()];

fn variants(base: Cell) -> Vec<Cell> {
    let mut out = Vec::with_capacity(6);
    for p in 0..3 {
        if base[p] > 0 {
            let mut c = base;
            c[p] -= 1;
            out.push(c);
        }
        if base[p] + 1 < GRID_LEN[p] {
            let mut c = base;
            c[p] += 1;
            out.push(c);
        }
    }
    out
}

fn values(c: Cell) -> (f64, f64, u32) {
    (SR_GRID[c[0]], BPS_GRID[c[1]], Q_GRID[c[2]])
}

/// Position of `v` in `[lo, hi]` on a log scale.
fn log_position(v: f64, lo: f64, hi: f64) -> f64 {
    (v.ln() - lo.ln()) / (hi.ln() - lo.ln())
}

fn encode(c: Cell, out: &mut [f64]) {
    let (sr, bps, q) = values(c);
    let pos = [
        log_position(sr, SR_GRID[0], SR_GRID[3]),
        log_position(bps, BPS_GRID[0], BPS_GRID[4]),
        log_position(q as f64, Q_GRID[0] as f64, Q_GRID[4] as f64),
    ];
    for (p, s) in pos.iter().enumerate() {
        for i in 0..FREQUENCIES {
            let w = (i + 1) as f64 * PI / 2.0;
            out[p * FREQUENCIES + i] = (w * s + i as f64 * PI / 4.0).sin();
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Draws distinct base cells; open families must not share any variant with
/// a closed family.
fn family_bases(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Cell>> {
    let closed = cfg.family_count - cfg.open_families;
    let mut bases: Vec<Cell> = Vec::with_capacity(cfg.family_count);
    let mut closed_variants: HashSet<Cell> = HashSet::new();
    let mut draws = 0;
    while bases.len() < cfg.family_count {
        draws += 1;
        if draws > MAX_FAMILY_DRAWS {
            return Err(Error::Config(format!(
                "cannot place {} families ({} open) on the label grid",
                cfg.family_count, cfg.open_families
            )));
        }
        let cell = [
            rng.random_range(0..GRID_LEN[0]),
            rng.random_range(0..GRID_LEN[1]),
            rng.random_range(0..GRID_LEN[2]),
        ];
        if bases.contains(&cell) {
            continue;
        }
        let vs = variants(cell);
        if bases.len() < closed {
            closed_variants.extend(vs);
        } else if vs.iter().any(|v| closed_variants.contains(v)) {
            continue;
        }
        bases.push(cell);
    }
    Ok(bases)
}

pub fn gen_synth(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut structure = stream(cfg.seed, 0);
    let bases = family_bases(cfg, &mut structure)?;
    let directions: Vec<Vec<f64>> = (0..cfg.family_count)
        .map(|_| {
            (0..DIRECTION_DIM)
                .map(|_| StandardNormal.sample(&mut structure))
                .collect()
        })
        .collect();
    let proj_scale = 1.0 / (RAW_DIM as f64).sqrt();
    let projection: Vec<f64> = (0..RAW_DIM * cfg.dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut structure);
            proj_scale * z
        })
        .collect();
    let family_variants: Vec<Vec<Cell>> = bases.iter().map(|&b| variants(b)).collect();
    let closed = cfg.family_count - cfg.open_families;
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");

    let mut rng = stream(cfg.seed, 1);
    let mut records = Vec::with_capacity(cfg.n_train + cfg.n_val + cfg.n_test);
    let mut raw = vec![0.0; RAW_DIM];
    for (split, n) in [
        (Split::Train, cfg.n_train),
        (Split::Val, cfg.n_val),
        (Split::Test, cfg.n_test),
    ] {
        let pool = if split == Split::Test {
            cfg.family_count
        } else {
            closed
        };
        for i in 0..n {
            let f = rng.random_range(0..pool);
            let cell = *family_variants[f]
                .choose(&mut rng)
                .expect("grid has neighbours");
            raw[..DIRECTION_DIM].copy_from_slice(&directions[f]);
            encode(cell, &mut raw[DIRECTION_DIM..]);
            if cfg.noise_sigma > 0.0 {
                for v in raw.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            let embedding = (0..cfg.dim)
                .map(|j| {
                    raw.iter()
                        .enumerate()
                        .map(|(r, v)| v * projection[r * cfg.dim + j])
                        .sum::<f64>() as f32
                })
                .collect();
            let (sr_hz, bps, q) = values(cell);
            let split_name = match split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            records.push(EmbeddingRecord {
                id: format!("{split_name}-{i:05}"),
                embedding,
                sr_hz,
                bps,
                q,
                codec_name: format!("family-{f}"),
                split,
                set_type: if f >= closed {
                    SetType::Open
                } else {
                    SetType::Closed
                },
            });
        }
    }
    Dataset::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_move_one_step() {
        for base in [[0, 0, 0], [3, 4, 4], [1, 2, 3]] {
            let vs = variants(base);
            assert!(!vs.is_empty() && vs.len() <= 6);
            for v in vs {
                let moved: usize = (0..3).map(|p| v[p].abs_diff(base[p])).sum();
                assert_eq!(moved, 1);
            }
        }
        assert_eq!(variants([1, 2, 3]).len(), 6);
    }

    #[test]
    fn encodings_are_distinct_across_the_grid() {
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for a in 0..4 {
            for b in 0..5 {
                for c in 0..5 {
                    let mut e = vec![0.0; 3 * FREQUENCIES];
                    encode([a, b, c], &mut e);
                    for s in &seen {
                        let d: f64 = s.iter().zip(&e).map(|(x, y)| (x - y).powi(2)).sum();
                        assert!(d > 1e-3);
                    }
                    seen.push(e);
                }
            }
        }
    }

    #[test]
    fn open_families_keep_clear_of_closed_variants() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                seed,
                ..SynthConfig::default()
            };
            let bases = family_bases(&cfg, &mut stream(seed, 0)).unwrap();
            let closed: HashSet<Cell> = bases[..6].iter().flat_map(|&b| variants(b)).collect();
            for &b in &bases[6..] {
                assert!(variants(b).iter().all(|v| !closed.contains(v)));
            }
        }
    }
}
