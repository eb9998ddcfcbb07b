use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EarningsParams, GeneratorConfig, OutcomeMode, RegionParams};
use crate::record::RegionId;

/// Number of regions and aggregate regions in the calibrated preset.
pub const PRESET_REGIONS: usize = 290;
pub const PRESET_AGGREGATES: usize = 25;

/// (cumulative share, lineages) anchors of the region-size distribution;
/// sizes are interpolated log-linearly between anchors.
const SIZE_ANCHORS: [(f64, f64); 6] = [
    (0.0, 263.0),
    (0.197, 1000.0),
    (0.552, 2000.0),
    (0.862, 5000.0),
    (0.95, 12000.0),
    (1.0, 56969.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwedenPreset {
    pub seed: u64,
    /// Multiplies every region size (1.0 gives about 1.1 million lineages).
    pub scale: f64,
    pub spousal_corr: f64,
    pub lambda_mean: f64,
    pub lambda_sd: f64,
    pub rho_mean: f64,
    pub rho_sd: f64,
    pub earnings_rho_mean: f64,
    pub earnings_rho_sd: f64,
    /// Extra log-earnings dispersion per unit of transferability above its mean;
    /// this ties regional inequality to transferability.
    pub inequality_slope: f64,
}

impl Default for SwedenPreset {
    fn default() -> Self {
        Self {
            seed: 2024,
            scale: 1.0,
            spousal_corr: 0.9,
            lambda_mean: 0.403,
            lambda_sd: 0.08,
            rho_mean: 0.890,
            rho_sd: 0.04,
            earnings_rho_mean: 0.756,
            earnings_rho_sd: 0.08,
            inequality_slope: 0.8,
        }
    }
}

fn size_quantile(p: f64) -> f64 {
    let i = SIZE_ANCHORS
        .iter()
        .position(|&(q, _)| q >= p)
        .unwrap_or(SIZE_ANCHORS.len() - 1)
        .max(1);
    let (p0, s0) = SIZE_ANCHORS[i - 1];
    let (p1, s1) = SIZE_ANCHORS[i];
    let t = ((p - p0) / (p1 - p0)).clamp(0.0, 1.0);
    (s0.ln() + t * (s1.ln() - s0.ln())).exp()
}

/// Region sizes at the midpoint quantiles of the anchor distribution, in
/// shuffled order.
fn region_sizes<R: rand::Rng>(rng: &mut R, scale: f64) -> Vec<usize> {
    let mut sizes: Vec<usize> = (0..PRESET_REGIONS)
        .map(|i| {
            let p = (i as f64 + 0.5) / PRESET_REGIONS as f64;
            ((size_quantile(p) * scale).round() as usize).max(10)
        })
        .collect();
    sizes.shuffle(rng);
    sizes
}

fn clipped<R: rand::Rng>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    Normal::new(mean, sd).expect("positive sd").sample(rng).clamp(lo, hi)
}

/// Shifts `values` so their `weights`-weighted mean is `target`, keeping
/// every value inside `[lo, hi]`. Clipping can move the mean again, so the
/// shift is repeated until it settles.
fn recentre(values: &mut [f64], weights: &[f64], target: f64, lo: f64, hi: f64) {
    let total: f64 = weights.iter().sum();
    for _ in 0..50 {
        let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
        let shift = target - mean;
        if shift.abs() < 1e-12 {
            break;
        }
        for v in values.iter_mut() {
            *v = (*v + shift).clamp(lo, hi);
        }
    }
}

/// Generator configuration for a 290-region population with heterogeneous
/// returns and transferability, categorical schooling, and log earnings
/// whose regional dispersion rises with transferability. Region draws are
/// recentred so their size-weighted means equal the configured means.
///
/// Region ids are `(aggregate + 1) * 100 + k`, so [`RegionId::aggregate`]
/// recovers one of 25 aggregate regions.
pub fn sweden_preset(preset: &SwedenPreset) -> GeneratorConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(preset.seed ^ 0x0005_eed0_f5e7);
    let sizes = region_sizes(&mut rng, preset.scale);
    let noise = Normal::new(0.0, 0.03).expect("positive sd");
    let n = sizes.len();
    let (mut lambdas, mut rhos, mut e_rhos, mut shocks) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        lambdas.push(clipped(&mut rng, preset.lambda_mean, preset.lambda_sd, 0.1, 0.75));
        rhos.push(clipped(&mut rng, preset.rho_mean, preset.rho_sd, 0.6, 1.0));
        e_rhos.push(clipped(
            &mut rng,
            preset.earnings_rho_mean,
            preset.earnings_rho_sd,
            0.4,
            1.0,
        ));
        shocks.push(noise.sample(&mut rng));
    }
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    recentre(&mut lambdas, &weights, preset.lambda_mean, 0.1, 0.75);
    recentre(&mut rhos, &weights, preset.rho_mean, 0.6, 1.0);
    recentre(&mut e_rhos, &weights, preset.earnings_rho_mean, 0.4, 1.0);
    let regions = sizes
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let aggregate = (i % PRESET_AGGREGATES) as u32;
            let k = (i / PRESET_AGGREGATES) as u32;
            let lambda = lambdas[i];
            let spread = preset.inequality_slope * (lambda - preset.lambda_mean) + shocks[i];
            let e_sds = [0.55, 0.5, 0.5].map(|s: f64| (s + spread).max(0.1));
            RegionParams {
                region_id: RegionId((aggregate + 1) * 100 + k),
                rho: rhos[i],
                lambda,
                n_lineages: n,
                gen_means: [9.2, 11.7, 13.45],
                gen_sds: [2.5, 2.8, 2.3],
                missing_rates: [0.0, 0.04, 0.03, 0.30, 0.35, 0.30, 0.35],
                earnings: Some(EarningsParams {
                    rho: e_rhos[i],
                    gen_means: [12.47, 12.42, 12.87],
                    gen_sds: e_sds,
                    missing_rates: [0.0, 0.04, 0.03, 0.30, 0.35, 0.30, 0.35],
                }),
            }
        })
        .collect();
    let mut cfg = GeneratorConfig::new(preset.seed, regions);
    cfg.outcome_mode = OutcomeMode::CategoricalEducation;
    cfg.spousal_corr = preset.spousal_corr;
    cfg
}
