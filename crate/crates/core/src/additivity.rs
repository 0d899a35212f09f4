//! Validation of the additivity property: how closely the summed
//! single-removal criterion (the knapsack surrogate) tracks the joint-removal
//! criterion over random subsets spanning the pruning-ratio range.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::criteria::{
    compute_baseline, removal_value, CriteriaError, CriterionKind, LayerTable, Score,
};
use crate::diffusion::{add_noise, CalibrationSet, NoiseSchedule};
use crate::net::{LayerId, Network};
use crate::textio::f64_repr;

pub type AdditivityResult<T> = Result<T, AdditivityError>;

#[derive(Debug)]
pub enum AdditivityError {
    /// approx_criterion asked for a layer the table does not list.
    MissingLayer(LayerId),
    /// The criterion has no joint-removal form (magnitude, taylor).
    NotConstructed(CriterionKind),
    Criteria(CriteriaError),
}

impl fmt::Display for AdditivityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdditivityError::MissingLayer(id) => {
                write!(f, "layer {id} is not present in the table")
            }
            AdditivityError::NotConstructed(kind) => {
                write!(f, "criterion {kind} has no joint-removal counterpart")
            }
            AdditivityError::Criteria(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AdditivityError {}

impl From<CriteriaError> for AdditivityError {
    fn from(e: CriteriaError) -> Self {
        AdditivityError::Criteria(e)
    }
}

/// Joint-removal criterion value: the paired-tuple mean of the discrepancy
/// metric under `kind`, with all of `removal` taken out at once. With a
/// single-element set this is bit-identical to the table value of that
/// layer.
pub fn real_criterion(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    kind: CriterionKind,
    removal: &BTreeSet<LayerId>,
    score: Option<&dyn Score>,
) -> AdditivityResult<f64> {
    if !CriterionKind::CONSTRUCTED.contains(&kind) {
        return Err(AdditivityError::NotConstructed(kind));
    }
    let baseline = compute_baseline(net, calib, sched, score)?;
    Ok(removal_value(net, calib, sched, &baseline, kind, removal, score)?)
}

/// Surrogate criterion value: sum of the table's single-removal values.
pub fn approx_criterion(table: &LayerTable, removal: &BTreeSet<LayerId>) -> AdditivityResult<f64> {
    let mut total = 0.0;
    for id in removal {
        total += table.value_of(id).ok_or(AdditivityError::MissingLayer(*id))?;
    }
    Ok(total)
}

/// One observation: a subset, its achieved pruning ratio, and the two
/// criterion values.
#[derive(Clone, Debug)]
pub struct AdditivityPoint {
    pub subset: Vec<LayerId>,
    pub ratio: f64,
    pub approx: f64,
    pub real: f64,
    pub kind: CriterionKind,
}

/// Per-requested-ratio aggregate.
#[derive(Clone, Debug)]
pub struct RatioBucket {
    pub ratio: f64,
    pub n_points: usize,
    pub mean_approx: f64,
    pub mean_real: f64,
    pub mean_rel_dev: f64,
    pub skipped: bool,
}

/// Full sweep outcome.
#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub kind: CriterionKind,
    pub points: Vec<AdditivityPoint>,
    /// Pearson correlation between approx and real over all points; NaN when
    /// fewer than two points or degenerate variance.
    pub pearson_r: f64,
    /// Mean of `|approx - real| / max(real, 1e-12)` over all points.
    pub mean_rel_dev: f64,
    pub buckets: Vec<RatioBucket>,
}

const GUARD: f64 = 1e-12;
const REJECTION_ATTEMPTS: usize = 10_000;

fn pearson(points: &[AdditivityPoint]) -> f64 {
    let n = points.len();
    if n < 2 {
        return f64::NAN;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.approx).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.real).sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for p in points {
        let dx = p.approx - mx;
        let dy = p.real - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

fn rel_dev(p: &AdditivityPoint) -> f64 {
    (p.approx - p.real).abs() / p.real.max(GUARD)
}

/// Sample one subset whose parameter mass lands within `tol` of the target
/// ratio (both relative to total network parameters).
fn sample_subset(
    rng: &mut ChaCha8Rng,
    layers: &[(LayerId, u64)],
    total_params: f64,
    prunable_params: f64,
    ratio: f64,
    tol: f64,
) -> Option<Vec<LayerId>> {
    let target_mass = ratio * total_params;
    let p = (target_mass / prunable_params).clamp(0.0, 1.0);
    for _ in 0..REJECTION_ATTEMPTS {
        let mut subset = Vec::new();
        let mut mass = 0u64;
        for (id, w) in layers {
            if rng.random::<f64>() < p {
                subset.push(*id);
                mass += w;
            }
        }
        let achieved = mass as f64 / total_params;
        if (achieved - ratio).abs() <= tol {
            return Some(subset);
        }
    }
    None
}

/// Run the sweep: for each requested ratio, draw `per_ratio` random subsets
/// whose parameter mass is within 2 percentage points of the target, and
/// evaluate both criteria on each. Unattainable buckets are skipped and
/// flagged in the bucket list.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    kind: CriterionKind,
    table: &LayerTable,
    ratios: &[f64],
    per_ratio: usize,
    seed: u64,
    score: Option<&dyn Score>,
) -> AdditivityResult<SweepSummary> {
    if !CriterionKind::CONSTRUCTED.contains(&kind) {
        return Err(AdditivityError::NotConstructed(kind));
    }
    let baseline = compute_baseline(net, calib, sched, score)?;
    let layers: Vec<(LayerId, u64)> = net
        .prunable_layers()
        .into_iter()
        .map(|id| {
            let w = net.param_count(&id).expect("layer from own layout");
            (id, w)
        })
        .collect();
    let total = net.total_params() as f64;
    let prunable = net.prunable_params() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut buckets = Vec::new();
    for &ratio in ratios {
        let mut bucket_points = Vec::new();
        let mut skipped = false;
        for _ in 0..per_ratio {
            match sample_subset(&mut rng, &layers, total, prunable, ratio, 0.02) {
                Some(subset) => {
                    let set: BTreeSet<LayerId> = subset.iter().copied().collect();
                    let mass: u64 =
                        set.iter().map(|id| net.param_count(id).expect("own layout")).sum();
                    let approx = approx_criterion(table, &set)?;
                    let real =
                        removal_value(net, calib, sched, &baseline, kind, &set, score)?;
                    bucket_points.push(AdditivityPoint {
                        subset,
                        ratio: mass as f64 / total,
                        approx,
                        real,
                        kind,
                    });
                }
                None => {
                    skipped = true;
                    break;
                }
            }
        }
        let n = bucket_points.len();
        let bucket = if n == 0 {
            RatioBucket {
                ratio,
                n_points: 0,
                mean_approx: f64::NAN,
                mean_real: f64::NAN,
                mean_rel_dev: f64::NAN,
                skipped,
            }
        } else {
            RatioBucket {
                ratio,
                n_points: n,
                mean_approx: bucket_points.iter().map(|p| p.approx).sum::<f64>() / n as f64,
                mean_real: bucket_points.iter().map(|p| p.real).sum::<f64>() / n as f64,
                mean_rel_dev: bucket_points.iter().map(rel_dev).sum::<f64>() / n as f64,
                skipped,
            }
        };
        buckets.push(bucket);
        points.extend(bucket_points);
    }
    let mean_rel_dev = if points.is_empty() {
        f64::NAN
    } else {
        points.iter().map(rel_dev).sum::<f64>() / points.len() as f64
    };
    let pearson_r = pearson(&points);
    Ok(SweepSummary { kind, points, pearson_r, mean_rel_dev, buckets })
}

/// Scatter CSV rows for one or more sweeps: `criterion,ratio,approx,real`.
pub fn scatter_csv(summaries: &[SweepSummary]) -> String {
    let mut out = String::from("criterion,ratio,approx,real\n");
    for s in summaries {
        for p in &s.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.kind,
                f64_repr(p.ratio),
                f64_repr(p.approx),
                f64_repr(p.real)
            ));
        }
    }
    out
}

/// Summary CSV: `criterion,pearson_r,mean_rel_dev,n_points`.
pub fn summary_csv(summaries: &[SweepSummary]) -> String {
    let mut out = String::from("criterion,pearson_r,mean_rel_dev,n_points\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.kind,
            f64_repr(s.pearson_r),
            f64_repr(s.mean_rel_dev),
            s.points.len()
        ));
    }
    out
}

/// Bucket CSV with skip markers:
/// `criterion,ratio,n_points,mean_approx,mean_real,mean_rel_dev,status`.
pub fn buckets_csv(summaries: &[SweepSummary]) -> String {
    let mut out = String::from("criterion,ratio,n_points,mean_approx,mean_real,mean_rel_dev,status\n");
    for s in summaries {
        for b in &s.buckets {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.kind,
                f64_repr(b.ratio),
                b.n_points,
                f64_repr(b.mean_approx),
                f64_repr(b.mean_real),
                f64_repr(b.mean_rel_dev),
                if b.skipped { "skipped" } else { "ok" }
            ));
        }
    }
    out
}

/// Chain-decomposition measurement. For an ordered chain `r_1..r_m`, the
/// telescoped consecutive-removal decomposition bounds the joint distance
/// when plain norms are telescoped (triangle inequality); the squared form
/// carries cross terms and can undershoot. The harness asserts nothing about
/// the squared form — it reports how often and by how much the squared chain
/// sum falls below the joint squared loss.
#[derive(Clone, Debug, Default)]
pub struct ChainStats {
    pub chains: usize,
    /// Chains where the mean joint distance exceeded the telescoped mean
    /// distance sum (beyond float tolerance). Zero by the triangle
    /// inequality.
    pub distance_form_violations: usize,
    /// Chains where the squared chain sum underestimates the joint squared
    /// loss.
    pub squared_form_violations: usize,
    /// Largest relative shortfall `(joint - chain_sum) / joint` over the
    /// squared form.
    pub max_squared_shortfall: f64,
}

pub fn chain_bound_stats(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    chains: &[Vec<LayerId>],
) -> AdditivityResult<ChainStats> {
    let mut stats = ChainStats::default();
    for chain in chains {
        stats.chains += 1;
        // Outputs of every prefix network on every tuple.
        let mut prefix_outputs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(chain.len() + 1);
        for upto in 0..=chain.len() {
            let removal: BTreeSet<LayerId> = chain[..upto].iter().copied().collect();
            let pruned = net.remove_layers(&removal).map_err(CriteriaError::Net)?;
            let mut outs = Vec::with_capacity(calib.len());
            for tp in &calib.tuples {
                let z_t = add_noise(&tp.z, &tp.eps, tp.t, sched).map_err(CriteriaError::Task)?;
                let (eps, _) = pruned.predict(&z_t, tp.y, tp.t).map_err(CriteriaError::Net)?;
                outs.push(eps);
            }
            prefix_outputs.push(outs);
        }
        let n = calib.len() as f64;
        let dist = |a: &[Vec<f64>], b: &[Vec<f64>], squared: bool| -> f64 {
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b) {
                let ss: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
                acc += if squared { ss } else { ss.sqrt() };
            }
            acc / n
        };
        let first = &prefix_outputs[0];
        let last = &prefix_outputs[chain.len()];

        let joint_dist = dist(first, last, false);
        let chain_dist: f64 = (0..chain.len())
            .map(|i| dist(&prefix_outputs[i], &prefix_outputs[i + 1], false))
            .sum();
        if joint_dist > chain_dist * (1.0 + 1e-9) + 1e-12 {
            stats.distance_form_violations += 1;
        }

        let joint_sq = dist(first, last, true);
        let chain_sq: f64 = (0..chain.len())
            .map(|i| dist(&prefix_outputs[i], &prefix_outputs[i + 1], true))
            .sum();
        if joint_sq > chain_sq {
            stats.squared_form_violations += 1;
            let shortfall = (joint_sq - chain_sq) / joint_sq.max(GUARD);
            stats.max_squared_shortfall = stats.max_squared_shortfall.max(shortfall);
        }
    }
    Ok(stats)
}
