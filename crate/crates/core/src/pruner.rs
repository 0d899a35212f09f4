//! One-shot layer pruning pipeline: criterion table -> knapsack -> removal
//! set -> pruned network, plus the per-stage architecture report.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::criteria::{
    build_table, CriteriaError, CriterionKind, CriterionOptions, LayerTable,
};
use crate::diffusion::{CalibrationSet, NoiseSchedule};
use crate::knapsack::{
    solve_dp, solve_exhaustive, solve_greedy, Instance, KnapsackError, SolverTag,
};
use crate::net::{LayerId, LayerKind, Network, StageId};

pub type PrunerResult<T> = Result<T, PrunerError>;

#[derive(Debug)]
pub enum PrunerError {
    /// Requested ratio cannot be met; reports the largest feasible ratio.
    InfeasibleRatio { requested: f64, max_feasible: f64 },
    NegativeRatio { requested: f64 },
    Criteria(CriteriaError),
    Knapsack(KnapsackError),
    Net(crate::net::NetError),
}

impl fmt::Display for PrunerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrunerError::InfeasibleRatio { requested, max_feasible } => write!(
                f,
                "pruning ratio {requested} exceeds the prunable fraction; maximum feasible ratio is {max_feasible}"
            ),
            PrunerError::NegativeRatio { requested } => {
                write!(f, "pruning ratio must be non-negative, got {requested}")
            }
            PrunerError::Criteria(e) => write!(f, "{e}"),
            PrunerError::Knapsack(e) => write!(f, "{e}"),
            PrunerError::Net(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PrunerError {}

impl From<CriteriaError> for PrunerError {
    fn from(e: CriteriaError) -> Self {
        PrunerError::Criteria(e)
    }
}

impl From<KnapsackError> for PrunerError {
    fn from(e: KnapsackError) -> Self {
        PrunerError::Knapsack(e)
    }
}

impl From<crate::net::NetError> for PrunerError {
    fn from(e: crate::net::NetError) -> Self {
        PrunerError::Net(e)
    }
}

/// Serializable reference to a prunable layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRef {
    pub stage: String,
    pub index: usize,
    pub kind: String,
}

impl From<&LayerId> for LayerRef {
    fn from(id: &LayerId) -> Self {
        LayerRef { stage: id.stage.to_string(), index: id.index, kind: id.kind.to_string() }
    }
}

/// Per-stage architecture summary row: residual/mixer counts before pruning,
/// counts removed, and the fraction of the stage's prunable parameters
/// removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRow {
    pub stage: String,
    pub res_orig: usize,
    pub res_pruned: usize,
    pub mix_orig: usize,
    pub mix_pruned: usize,
    /// Removed prunable parameters / total prunable parameters in the stage;
    /// 0 when the stage has no prunable parameters.
    pub p_ratio: f64,
}

/// Outcome of one pruning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningPlan {
    pub removal: Vec<LayerRef>,
    pub criterion: CriterionKind,
    pub solver: SolverTag,
    pub requested_ratio: f64,
    pub capacity: u64,
    pub achieved_params: u64,
    pub total_params: u64,
    pub prunable_params: u64,
    pub total_criterion_value: f64,
    pub stage_rows: Vec<StageRow>,
}

impl PruningPlan {
    /// Removal set as typed layer ids, resolved against a network.
    pub fn removal_ids(&self, net: &Network) -> PrunerResult<BTreeSet<LayerId>> {
        let mut out = BTreeSet::new();
        for r in &self.removal {
            let stage: StageId = r.stage.parse().map_err(|e: String| {
                PrunerError::Net(crate::net::NetError::Format(e))
            })?;
            let kind = match r.kind.as_str() {
                "residual" => LayerKind::Residual,
                "mixer" => LayerKind::Mixer,
                other => {
                    return Err(PrunerError::Net(crate::net::NetError::Format(format!(
                        "bad layer kind {other:?}"
                    ))))
                }
            };
            let id = LayerId { stage, index: r.index, kind };
            // Validate against the network layout.
            net.param_count(&id)?;
            out.insert(id);
        }
        Ok(out)
    }
}

/// Parameters-to-prune target: `ceil(ratio * total params)`. The ratio is
/// relative to the whole network, so the maximum feasible ratio equals the
/// prunable fraction.
pub fn compute_capacity(net: &Network, ratio: f64) -> PrunerResult<u64> {
    if ratio < 0.0 || !ratio.is_finite() {
        return Err(PrunerError::NegativeRatio { requested: ratio });
    }
    let total = net.total_params();
    let prunable = net.prunable_params();
    let raw = (ratio * total as f64).ceil() as u64;
    if raw > prunable {
        // ceil can overshoot by one when ratio*total rounds just above the
        // prunable mass; accept exactly-at-the-boundary requests.
        if ratio <= prunable as f64 / total as f64 {
            return Ok(prunable);
        }
        return Err(PrunerError::InfeasibleRatio {
            requested: ratio,
            max_feasible: prunable as f64 / total as f64,
        });
    }
    Ok(raw)
}

/// Solve the knapsack over a prebuilt table.
pub fn plan_from_table(
    net: &Network,
    table: &LayerTable,
    ratio: f64,
    solver: SolverTag,
) -> PrunerResult<PruningPlan> {
    let capacity = compute_capacity(net, ratio)?;
    let values: Vec<f64> = table.rows.iter().map(|r| r.value).collect();
    let weights: Vec<u64> = table.rows.iter().map(|r| r.weight).collect();
    let inst = Instance::new(values, weights, capacity)?;
    let sol = match solver {
        SolverTag::Greedy => solve_greedy(&inst)?,
        SolverTag::Dp => solve_dp(&inst)?,
        SolverTag::Exhaustive => solve_exhaustive(&inst)?,
    };
    let removal: Vec<LayerId> = sol.chosen.iter().map(|&i| table.rows[i].layer).collect();
    let removal_set: BTreeSet<LayerId> = removal.iter().copied().collect();
    Ok(PruningPlan {
        removal: removal.iter().map(LayerRef::from).collect(),
        criterion: table.kind,
        solver,
        requested_ratio: ratio,
        capacity,
        achieved_params: sol.total_weight,
        total_params: net.total_params(),
        prunable_params: net.prunable_params(),
        total_criterion_value: sol.total_value,
        stage_rows: stage_rows(net, &removal_set),
    })
}

/// Full one-shot pipeline: build the criterion table, solve the knapsack,
/// and return the plan together with the pruned network. The input network
/// is untouched (it stays available as the distillation teacher).
pub fn prune(
    net: &Network,
    calib: &CalibrationSet,
    sched: &NoiseSchedule,
    kind: CriterionKind,
    ratio: f64,
    solver: SolverTag,
    opts: &CriterionOptions<'_>,
) -> PrunerResult<(PruningPlan, Network)> {
    // Validate the ratio before paying for the table.
    let _ = compute_capacity(net, ratio)?;
    let table = build_table(net, calib, sched, kind, opts)?;
    let plan = plan_from_table(net, &table, ratio, solver)?;
    let removal = plan.removal_ids(net)?;
    let pruned = net.remove_layers(&removal)?;
    Ok((plan, pruned))
}

fn stage_rows(net: &Network, removal: &BTreeSet<LayerId>) -> Vec<StageRow> {
    net.spec()
        .stage_order()
        .into_iter()
        .map(|stage| {
            let mut row = StageRow {
                stage: stage.to_string(),
                res_orig: 0,
                res_pruned: 0,
                mix_orig: 0,
                mix_pruned: 0,
                p_ratio: 0.0,
            };
            let mut stage_params = 0u64;
            let mut pruned_params = 0u64;
            for id in net.prunable_layers_full().iter().filter(|id| id.stage == stage) {
                let w = net.param_count(id).expect("layer from own layout");
                stage_params += w;
                let removed = removal.contains(id);
                if removed {
                    pruned_params += w;
                }
                match id.kind {
                    LayerKind::Residual => {
                        row.res_orig += 1;
                        if removed {
                            row.res_pruned += 1;
                        }
                    }
                    LayerKind::Mixer => {
                        row.mix_orig += 1;
                        if removed {
                            row.mix_pruned += 1;
                        }
                    }
                    LayerKind::Sampler => unreachable!(),
                }
            }
            if stage_params > 0 {
                row.p_ratio = pruned_params as f64 / stage_params as f64;
            }
            row
        })
        .collect()
}

/// Human-readable stage label: paper-style 1-based network position, with
/// the deepest Up stage printed first.
fn stage_label(stage: &str, num_dn: usize) -> String {
    let id: StageId = stage.parse().expect("stage rows hold valid ids");
    match id {
        StageId::Dn(k) => format!("Dn {}", k + 1),
        StageId::Mid => "Mid".to_string(),
        StageId::Up(k) => format!("Up {}", num_dn - k),
    }
}

fn aggregate(rows: &[&StageRow], net: &Network, removal: &BTreeSet<LayerId>, which: &str) -> StageRow {
    let mut agg = StageRow {
        stage: which.to_string(),
        res_orig: rows.iter().map(|r| r.res_orig).sum(),
        res_pruned: rows.iter().map(|r| r.res_pruned).sum(),
        mix_orig: rows.iter().map(|r| r.mix_orig).sum(),
        mix_pruned: rows.iter().map(|r| r.mix_pruned).sum(),
        p_ratio: 0.0,
    };
    let keep = |id: &LayerId| match (which, id.stage) {
        ("Dn Total", StageId::Dn(_)) => true,
        ("Up Total", StageId::Up(_)) => true,
        _ => false,
    };
    let mut total = 0u64;
    let mut pruned = 0u64;
    for id in net.prunable_layers_full().iter().filter(|id| keep(id)) {
        let w = net.param_count(id).expect("layer from own layout");
        total += w;
        if removal.contains(id) {
            pruned += w;
        }
    }
    if total > 0 {
        agg.p_ratio = pruned as f64 / total as f64;
    }
    agg
}

/// Render the plan as a per-stage table: CSV plus an aligned text block for
/// standard output. Rows cover every stage plus Dn/Up totals; the encoder
/// (Dn) versus decoder (Up) aggregation is reported, not asserted.
pub fn report(plan: &PruningPlan, net: &Network) -> PrunerResult<(String, String)> {
    let removal = plan.removal_ids(net)?;
    let num_dn = net.spec().num_dn_stages();
    let mut rows: Vec<(String, StageRow)> = plan
        .stage_rows
        .iter()
        .map(|r| (stage_label(&r.stage, num_dn), r.clone()))
        .collect();
    let dn_rows: Vec<&StageRow> =
        plan.stage_rows.iter().filter(|r| r.stage.starts_with("dn")).collect();
    let up_rows: Vec<&StageRow> =
        plan.stage_rows.iter().filter(|r| r.stage.starts_with("up")).collect();
    let dn_total = aggregate(&dn_rows, net, &removal, "Dn Total");
    let up_total = aggregate(&up_rows, net, &removal, "Up Total");
    rows.push(("Dn Total".to_string(), dn_total));
    rows.push(("Up Total".to_string(), up_total));

    let mut csv = String::from("stage,r_ori,r_prn,t_ori,t_prn,p_ratio\n");
    for (label, r) in &rows {
        csv.push_str(&format!(
            "{label},{},{},{},{},{:.0}%\n",
            r.res_orig,
            r.res_pruned,
            r.mix_orig,
            r.mix_pruned,
            r.p_ratio * 100.0
        ));
    }

    let mut text = format!(
        "pruning ratio {:.2}% ({} of {} params, capacity {}), criterion {}, solver {}\n",
        100.0 * plan.achieved_params as f64 / plan.total_params as f64,
        plan.achieved_params,
        plan.total_params,
        plan.capacity,
        plan.criterion,
        plan.solver,
    );
    text.push_str(&format!(
        "prunable fraction {:.1}% ({} of {} params)\n",
        100.0 * plan.prunable_params as f64 / plan.total_params as f64,
        plan.prunable_params,
        plan.total_params,
    ));
    text.push_str(&format!(
        "{:<10} {:>6} {:>6} {:>6} {:>6} {:>8}\n",
        "Stage", "#R_ori", "#R_prn", "#T_ori", "#T_prn", "P-Ratio"
    ));
    for (label, r) in &rows {
        text.push_str(&format!(
            "{:<10} {:>6} {:>6} {:>6} {:>6} {:>7.0}%\n",
            label, r.res_orig, r.res_pruned, r.mix_orig, r.mix_pruned, r.p_ratio * 100.0
        ));
    }
    Ok((csv, text))
}
