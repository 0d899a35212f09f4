//! Per-layer importance criteria.
//!
//! Three criteria difference the full network against single-layer-removed
//! networks on a fixed calibration set (output loss, delta task loss, delta
//! score); two baselines need no removals (parameter magnitude, first-order
//! Taylor estimate). A [`LayerTable`] pairs each prunable layer's criterion
//! value with its parameter count — the items of the knapsack step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Graph;
use crate::diffusion::{add_noise, CalibrationSet, NoiseSchedule, TaskError};
use crate::net::{LayerId, LayerKind, NetError, Network, StageId};
use crate::textio::f64_repr;

pub type CriteriaResult<T> = Result<T, CriteriaError>;

#[derive(Debug)]
pub enum CriteriaError {
    NotPrunable(LayerId),
    EmptyCalibration,
    /// `DeltaScore` needs a score function.
    MissingScore,
    Net(NetError),
    Task(TaskError),
    Parse(String),
}

impl fmt::Display for CriteriaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CriteriaError::NotPrunable(id) => write!(f, "layer {id} is not prunable here"),
            CriteriaError::EmptyCalibration => write!(f, "calibration set is empty"),
            CriteriaError::MissingScore => {
                write!(f, "criterion delta_score requires a score function")
            }
            CriteriaError::Net(e) => write!(f, "{e}"),
            CriteriaError::Task(e) => write!(f, "{e}"),
            CriteriaError::Parse(msg) => write!(f, "table parse error: {msg}"),
        }
    }
}

impl std::error::Error for CriteriaError {}

impl From<NetError> for CriteriaError {
    fn from(e: NetError) -> Self {
        CriteriaError::Net(e)
    }
}

impl From<TaskError> for CriteriaError {
    fn from(e: TaskError) -> Self {
        CriteriaError::Task(e)
    }
}

impl From<crate::autodiff::TensorError> for CriteriaError {
    fn from(e: crate::autodiff::TensorError) -> Self {
        CriteriaError::Net(NetError::Tensor(e))
    }
}

/// The five criteria of the ablation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    OutputLoss,
    DeltaTaskLoss,
    DeltaScore,
    Magnitude,
    Taylor,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 5] = [
        CriterionKind::OutputLoss,
        CriterionKind::DeltaTaskLoss,
        CriterionKind::DeltaScore,
        CriterionKind::Magnitude,
        CriterionKind::Taylor,
    ];

    /// The three criteria defined by differencing against a jointly-removed
    /// network; only these have a joint-removal ("real") counterpart.
    pub const CONSTRUCTED: [CriterionKind; 3] = [
        CriterionKind::OutputLoss,
        CriterionKind::DeltaTaskLoss,
        CriterionKind::DeltaScore,
    ];
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CriterionKind::OutputLoss => "output_loss",
            CriterionKind::DeltaTaskLoss => "delta_task_loss",
            CriterionKind::DeltaScore => "delta_score",
            CriterionKind::Magnitude => "magnitude",
            CriterionKind::Taylor => "taylor",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for CriterionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "output_loss" => Ok(CriterionKind::OutputLoss),
            "delta_task_loss" => Ok(CriterionKind::DeltaTaskLoss),
            "delta_score" => Ok(CriterionKind::DeltaScore),
            "magnitude" => Ok(CriterionKind::Magnitude),
            "taylor" => Ok(CriterionKind::Taylor),
            other => Err(format!(
                "unknown criterion {other:?} (expected output_loss|delta_task_loss|delta_score|magnitude|taylor)"
            )),
        }
    }
}

/// How Taylor estimates aggregate over a layer's parameters. The default
/// takes the absolute value of the signed sum `|sum g*w|`, the first-order
/// estimate of the loss change when the layer's contribution drops to zero;
/// the alternative sums per-parameter magnitudes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorMode {
    #[default]
    SignedSum,
    PerParamAbs,
}

/// Deterministic score function over predictions.
pub trait Score {
    fn score(&self, eps_pred: &[f64], z: &[f64], y: usize) -> f64;
}

/// Default score proxy: cosine similarity between the prediction and a fixed
/// seeded random direction assigned to the condition class.
pub struct ProxyScore {
    targets: Vec<Vec<f64>>,
}

impl ProxyScore {
    pub fn new(seed: u64, vocab: usize, dim: usize) -> ProxyScore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = (0..vocab)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        ProxyScore { targets }
    }
}

impl Score for ProxyScore {
    fn score(&self, eps_pred: &[f64], _z: &[f64], y: usize) -> f64 {
        let target = &self.targets[y];
        let dot: f64 = eps_pred.iter().zip(target).map(|(a, b)| a * b).sum();
        let na: f64 = eps_pred.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// One knapsack item: a prunable layer, its criterion value, its parameter
/// count.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub layer: LayerId,
    pub value: f64,
    pub weight: u64,
}

/// The full value/weight table for a network under one criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTable {
    pub rows: Vec<LayerRow>,
    pub kind: CriterionKind,
    pub calib_seed: u64,
    pub net_fingerprint: u64,
}

impl LayerTable {
    pub fn value_of(&self, layer: &LayerId) -> Option<f64> {
        self.rows.iter().find(|r| r.layer == *layer).map(|r| r.value)
    }

    /// CSV serialization: `stage,index,kind,value,weight`, values with 17
    /// significant digits so parsing recovers exact bits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,index,kind,value,weight\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.layer.stage,
                row.layer.index,
                row.layer.kind,
                f64_repr(row.value),
                row.weight
            ));
        }
        out
    }

    /// Parse a table CSV produced by [`LayerTable::to_csv`]. Metadata fields
    /// (criterion kind, seeds) are not stored in the CSV and must be
    /// supplied.
    pub fn from_csv(
        text: &str,
        kind: CriterionKind,
        calib_seed: u64,
        net_fingerprint: u64,
    ) -> CriteriaResult<LayerTable> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "stage,index,kind,value,weight" {
            return Err(CriteriaError::Parse(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(CriteriaError::Parse(format!("bad row {line:?}")));
            }
            let stage: StageId =
                fields[0].parse().map_err(|e| CriteriaError::Parse(format!("{e}")))?;
            let index: usize =
                fields[1].parse().map_err(|_| CriteriaError::Parse(format!("bad row {line:?}")))?;
            let kind_field = match fields[2] {
                "residual" => LayerKind::Residual,
                "mixer" => LayerKind::Mixer,
                other => return Err(CriteriaError::Parse(format!("bad layer kind {other:?}"))),
            };
            let value: f64 =
                fields[3].parse().map_err(|_| CriteriaError::Parse(format!("bad row {line:?}")))?;
            let weight: u64 =
                fields[4].parse().map_err(|_| CriteriaError::Parse(format!("bad row {line:?}")))?;
            rows.push(LayerRow {
                layer: LayerId { stage, index, kind: kind_field },
                value,
                weight,
            });
        }
        Ok(LayerTable { rows, kind, calib_seed, net_fingerprint })
    }
}

// ── paired evaluation core ──────────────────────────────────────────────
//
// All constructed criteria difference the same per-tuple quantities, so the
// baseline (full network) pass is computed once and removal passes are
// differenced against it tuple by tuple. Joint-removal evaluation used by
// the additivity sweeps goes through the same function, which makes the
// single-removal table value and the |R| = 1 joint value bit-identical.

/// Per-tuple reference quantities of the unpruned network.
pub struct Baseline {
    eps: Vec<Vec<f64>>,
    task: Vec<f64>,
    score: Vec<Option<f64>>,
}

fn tuple_outputs(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
) -> CriteriaResult<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(calib.len());
    for tp in &calib.tuples {
        let z_t = add_noise(&tp.z, &tp.eps, tp.t, sched)?;
        let (eps_pred, _) = net.predict(&z_t, tp.y, tp.t)?;
        out.push(eps_pred);
    }
    Ok(out)
}

fn per_tuple_task(eps_pred: &[f64], eps_true: &[f64]) -> f64 {
    let ss: f64 = eps_pred.iter().zip(eps_true).map(|(a, b)| (a - b) * (a - b)).sum();
    ss / eps_true.len() as f64
}

/// Evaluate the baseline pass over the calibration set.
pub fn compute_baseline(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    score: Option<&dyn Score>,
) -> CriteriaResult<Baseline> {
    if calib.is_empty() {
        return Err(CriteriaError::EmptyCalibration);
    }
    let eps = tuple_outputs(net, calib, sched)?;
    let task = eps
        .iter()
        .zip(&calib.tuples)
        .map(|(pred, tp)| per_tuple_task(pred, &tp.eps))
        .collect();
    let score = eps
        .iter()
        .zip(&calib.tuples)
        .map(|(pred, tp)| score.map(|s| s.score(pred, &tp.z, tp.y)))
        .collect();
    Ok(Baseline { eps, task, score })
}

/// Paired-tuple criterion value of removing `removal` jointly, differenced
/// against a baseline of the same network.
pub fn removal_value(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    baseline: &Baseline,
    kind: CriterionKind,
    removal: &BTreeSet<LayerId>,
    score: Option<&dyn Score>,
) -> CriteriaResult<f64> {
    if calib.is_empty() {
        return Err(CriteriaError::EmptyCalibration);
    }
    let pruned = net.remove_layers(removal)?;
    let outputs = tuple_outputs(&pruned, calib, sched)?;
    let mut acc = 0.0;
    for (i, (pred, tp)) in outputs.iter().zip(&calib.tuples).enumerate() {
        let d = match kind {
            CriterionKind::OutputLoss => {
                pred.iter().zip(&baseline.eps[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            CriterionKind::DeltaTaskLoss => {
                (per_tuple_task(pred, &tp.eps) - baseline.task[i]).abs()
            }
            CriterionKind::DeltaScore => {
                let s = score.ok_or(CriteriaError::MissingScore)?;
                let base = baseline.score[i].ok_or(CriteriaError::MissingScore)?;
                (s.score(pred, &tp.z, tp.y) - base).abs()
            }
            CriterionKind::Magnitude | CriterionKind::Taylor => {
                unreachable!("baseline criteria have no removal form")
            }
        };
        acc += d;
    }
    Ok(acc / calib.len() as f64)
}

fn require_prunable(net: &Network, layer: &LayerId) -> CriteriaResult<()> {
    if net.prunable_layers().contains(layer) {
        Ok(())
    } else {
        Err(CriteriaError::NotPrunable(*layer))
    }
}

/// Mean paired squared output distance caused by removing one layer.
pub fn eval_output_loss(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    layer: &LayerId,
) -> CriteriaResult<f64> {
    require_prunable(net, layer)?;
    let baseline = compute_baseline(net, calib, sched, None)?;
    removal_value(net, calib, sched, &baseline, CriterionKind::OutputLoss, &BTreeSet::from([*layer]), None)
}

/// Mean paired absolute change in per-tuple task loss.
pub fn eval_delta_task_loss(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    layer: &LayerId,
) -> CriteriaResult<f64> {
    require_prunable(net, layer)?;
    let baseline = compute_baseline(net, calib, sched, None)?;
    removal_value(net, calib, sched, &baseline, CriterionKind::DeltaTaskLoss, &BTreeSet::from([*layer]), None)
}

/// Mean paired absolute change in the score function.
pub fn eval_delta_score(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    layer: &LayerId,
    score: &dyn Score,
) -> CriteriaResult<f64> {
    require_prunable(net, layer)?;
    let baseline = compute_baseline(net, calib, sched, Some(score))?;
    removal_value(
        net,
        calib,
        sched,
        &baseline,
        CriterionKind::DeltaScore,
        &BTreeSet::from([*layer]),
        Some(score),
    )
}

/// Summed parameter magnitude of a layer; needs no calibration data.
pub fn eval_magnitude(net: &Network, layer: &LayerId) -> CriteriaResult<f64> {
    require_prunable(net, layer)?;
    let names = net.layer_param_names(layer)?;
    Ok(names
        .iter()
        .map(|n| net.params()[n].data.iter().map(|v| v.abs()).sum::<f64>())
        .sum())
}

/// Per-tuple gradient-times-weight sums for every surviving prunable layer;
/// shared by the Taylor table build and single-layer queries so both paths
/// agree bit for bit.
fn taylor_values(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    mode: TaylorMode,
) -> CriteriaResult<BTreeMap<LayerId, f64>> {
    if calib.is_empty() {
        return Err(CriteriaError::EmptyCalibration);
    }
    let layers = net.prunable_layers();
    let mut acc: BTreeMap<LayerId, f64> = layers.iter().map(|l| (*l, 0.0)).collect();
    let layer_names: Vec<(LayerId, Vec<String>)> = layers
        .iter()
        .map(|l| (*l, net.layer_param_names(l).expect("layer from own layout")))
        .collect();
    for tp in &calib.tuples {
        let g = Graph::new();
        let bound = net.bind(&g, true);
        let loss = crate::diffusion::tuple_task_loss(&g, &bound, tp, sched)?;
        g.backward(loss)?;
        for (layer, names) in &layer_names {
            let mut sum = 0.0;
            for name in names {
                let leaf = bound.leaf(name).expect("bound param");
                let w = leaf.data();
                // A param that never fed the loss gets no gradient; its
                // contribution is zero.
                if let Some(grad) = leaf.grad() {
                    match mode {
                        TaylorMode::SignedSum => {
                            sum += grad.iter().zip(&w).map(|(gv, wv)| gv * wv).sum::<f64>();
                        }
                        TaylorMode::PerParamAbs => {
                            sum += grad.iter().zip(&w).map(|(gv, wv)| (gv * wv).abs()).sum::<f64>();
                        }
                    }
                }
            }
            let v = match mode {
                TaylorMode::SignedSum => sum.abs(),
                TaylorMode::PerParamAbs => sum,
            };
            *acc.get_mut(layer).unwrap() += v;
        }
    }
    let n = calib.len() as f64;
    for v in acc.values_mut() {
        *v /= n;
    }
    Ok(acc)
}

/// First-order Taylor estimate of the loss change from removing a layer.
pub fn eval_taylor(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    layer: &LayerId,
    mode: TaylorMode,
) -> CriteriaResult<f64> {
    require_prunable(net, layer)?;
    Ok(taylor_values(net, calib, sched, mode)?[layer])
}

/// Optional knobs for [`build_table`].
#[derive(Default)]
pub struct CriterionOptions<'a> {
    pub score: Option<&'a dyn Score>,
    pub taylor_mode: TaylorMode,
}

/// Build the full value/weight table under one criterion. Costs one
/// single-layer-removal evaluation per prunable layer for the constructed
/// criteria, one gradient pass per tuple for Taylor, and nothing beyond the
/// stored weights for magnitude.
pub fn build_table(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    kind: CriterionKind,
    opts: &CriterionOptions<'_>,
) -> CriteriaResult<LayerTable> {
    if kind == CriterionKind::DeltaScore && opts.score.is_none() {
        return Err(CriteriaError::MissingScore);
    }
    let layers = net.prunable_layers();
    let mut values: Vec<f64> = Vec::with_capacity(layers.len());
    match kind {
        CriterionKind::Magnitude => {
            for layer in &layers {
                values.push(eval_magnitude(net, layer)?);
            }
        }
        CriterionKind::Taylor => {
            let all = taylor_values(net, calib, sched, opts.taylor_mode)?;
            for layer in &layers {
                values.push(all[layer]);
            }
        }
        _ => {
            let baseline = compute_baseline(net, calib, sched, opts.score)?;
            for layer in &layers {
                values.push(removal_value(
                    net,
                    calib,
                    sched,
                    &baseline,
                    kind,
                    &BTreeSet::from([*layer]),
                    opts.score,
                )?);
            }
        }
    }
    let rows = layers
        .iter()
        .zip(values)
        .map(|(layer, value)| LayerRow {
            layer: *layer,
            value,
            weight: net.param_count(layer).expect("layer from own layout"),
        })
        .collect();
    Ok(LayerTable { rows, kind, calib_seed: calib.seed, net_fingerprint: net.fingerprint() })
}
