//! Training losses: TB, SubTB, SubTB-lambda, chunked SubTB, log-variance and
//! importance-weighted batch aggregation.
//!
//! Plain functions evaluate a loss from stored log-densities. The `record_*`
//! functions build the same quantities on a [`Tape`] for a whole batch so the
//! gradients come out of a single backward sweep. Segment-based losses share
//! one construction: for segment `(m, n)` the residual is
//! `log F_m + sum_{m<=i<n} (log_fwd_i - log_back_i) - log F_n`,
//! with `log F_0 = log Z_theta + log p_0` and `log F_N = log R`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::process::{FlowParams, FlowVars, PolicyVars, Process, Trajectory};

/// Which parameter group a loss is allowed to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Policy,
    Flow,
    Both,
}

/// Scalar loss with its per-trajectory breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub per_trajectory: Vec<f64>,
    pub target: GradTarget,
}

/// A loss recorded on a tape.
#[derive(Clone, Debug)]
pub struct RecordedLoss {
    pub total: Var,
    pub report: LossReport,
}

/// `log F_0..log F_N` along one trajectory, with `F_0 = Z_theta p_0` and `F_N = R`.
pub fn flow_trace<P: Process>(
    process: &P,
    flow: Option<&FlowParams>,
    traj: &Trajectory<P::State>,
    log_z: f64,
) -> Result<Vec<f64>> {
    let n = traj.steps();
    let mut out = Vec::with_capacity(n + 1);
    out.push(log_z + traj.log_p0);
    for i in 1..n {
        let f = flow.ok_or_else(|| Error::input("interior flow values need flow parameters"))?;
        out.push(f.log_value(process, &traj.states[i], i)?);
    }
    out.push(traj.log_r);
    Ok(out)
}

/// `log Z_theta + log p_0 + sum log_fwd - log R - sum log_back`.
pub fn tb_residual<S>(traj: &Trajectory<S>, log_z: f64) -> f64 {
    let f0 = log_z + traj.log_p0;
    f0 + traj.log_fwd.iter().sum::<f64>() - traj.log_r - traj.log_back.iter().sum::<f64>()
}

pub fn tb_loss<S>(traj: &Trajectory<S>, log_z: f64) -> f64 {
    tb_residual(traj, log_z).powi(2)
}

pub fn subtb_residual<S>(traj: &Trajectory<S>, trace: &[f64], m: usize, n: usize) -> f64 {
    trace[m] + traj.log_fwd[m..n].iter().sum::<f64>() - trace[n] - traj.log_back[m..n].iter().sum::<f64>()
}

/// SubTB on the segment `tau_{m:n}`.
pub fn subtb_loss<S>(traj: &Trajectory<S>, trace: &[f64], m: usize, n: usize) -> Result<f64> {
    if !(m < n && n <= traj.steps()) || trace.len() != traj.steps() + 1 {
        return Err(Error::input(format!("invalid segment {m}..{n} for {} steps", traj.steps())));
    }
    Ok(subtb_residual(traj, trace, m, n).powi(2))
}

/// The `(m, n, weight)` segments of the lambda-weighted SubTB average.
pub fn lambda_segments(steps: usize, lambda: f64) -> Result<Vec<(usize, usize, f64)>> {
    if !(lambda > 0.0) {
        return Err(Error::config(format!("subtb_lambda: must be positive, got {lambda}")));
    }
    let mut segs = Vec::new();
    for m in 0..steps {
        for n in m + 1..=steps {
            segs.push((m, n, lambda.powi((n - m) as i32)));
        }
    }
    let total: f64 = segs.iter().map(|s| s.2).sum();
    for s in &mut segs {
        s.2 /= total;
    }
    Ok(segs)
}

/// The `(m, n, weight)` segments of the chunked SubTB sum.
pub fn chunk_segments(steps: usize, chunk: usize) -> Result<Vec<(usize, usize, f64)>> {
    if chunk == 0 || steps % chunk != 0 {
        return Err(Error::config(format!("chunk: {chunk} does not divide steps {steps}")));
    }
    let count = steps / chunk;
    let mut segs = Vec::with_capacity(2 * count);
    for i in 0..count {
        segs.push((i * chunk, (i + 1) * chunk, 1.0));
        segs.push((i * chunk, steps, 1.0 / (count - i) as f64));
    }
    Ok(segs)
}

fn weighted_segment_loss<S>(traj: &Trajectory<S>, trace: &[f64], segs: &[(usize, usize, f64)]) -> f64 {
    segs.iter().map(|&(m, n, w)| w * subtb_residual(traj, trace, m, n).powi(2)).sum()
}

pub fn subtb_lambda_loss<S>(traj: &Trajectory<S>, trace: &[f64], lambda: f64) -> Result<f64> {
    Ok(weighted_segment_loss(traj, trace, &lambda_segments(traj.steps(), lambda)?))
}

pub fn subtb_chunk_loss<S>(traj: &Trajectory<S>, trace: &[f64], chunk: usize) -> Result<f64> {
    Ok(weighted_segment_loss(traj, trace, &chunk_segments(traj.steps(), chunk)?))
}

/// Sample variance of the AIS log-weights (divides by `K - 1`).
pub fn lv_loss<S>(trajs: &[Trajectory<S>]) -> Result<f64> {
    if trajs.len() < 2 {
        return Err(Error::contract("the log-variance loss needs at least two trajectories"));
    }
    let lw: Vec<f64> = trajs.iter().map(|t| t.log_weight()).collect();
    Ok(crate::math::sample_variance(&lw))
}

pub fn check_weights(weights: &[f64], count: usize) -> Result<()> {
    if weights.len() != count {
        return Err(Error::contract(format!("{} weights for {count} trajectories", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::contract("batch weights must be non-negative"));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("batch weights sum to {s}, expected 1")));
    }
    Ok(())
}

/// `sum_k W_k loss_k`.
pub fn weighted_batch_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    check_weights(weights, losses.len())?;
    Ok(losses.iter().zip(weights).map(|(l, w)| l * w).sum())
}

pub fn uniform_weights(count: usize) -> Vec<f64> {
    vec![1.0 / count as f64; count]
}

/// How the policy enters a recorded loss.
#[derive(Clone, Copy, Debug)]
pub enum PolicyTerms<'a> {
    /// Gradients flow into the policy network and `log Z_theta`.
    Attached(&'a PolicyVars),
    /// Stored `log_fwd` and the given `log Z_theta` are constants.
    Detached { log_z: f64 },
}

fn record_forward_matrix<P: Process>(
    tape: &mut Tape,
    process: &P,
    terms: PolicyTerms,
    trajs: &[Trajectory<P::State>],
) -> Result<Var> {
    let k = trajs.len();
    let n = process.steps();
    match terms {
        PolicyTerms::Attached(vars) => {
            let (prev, next, ns) = crate::process::transitions(trajs);
            let col = process.record_log_fwd(tape, vars, &prev, &next, &ns)?;
            Ok(tape.reshape(col, k, n))
        }
        PolicyTerms::Detached { .. } => {
            let data = trajs.iter().flat_map(|t| t.log_fwd.iter().copied()).collect();
            Ok(tape.constant(Tensor::new(k, n, data)))
        }
    }
}

fn check_batch<S>(trajs: &[Trajectory<S>], steps: usize) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::contract("empty trajectory batch"));
    }
    if let Some(t) = trajs.iter().find(|t| t.steps() != steps || t.log_back.len() != steps) {
        return Err(Error::input(format!("trajectory has {} steps, expected {steps}", t.steps())));
    }
    Ok(())
}

/// Optional clamp on `|residual|` applied through a constant rescaling.
fn cap_residuals(tape: &mut Tape, res: Var, cap: Option<f64>) -> Var {
    let Some(cap) = cap else { return res };
    let v = tape.value(res);
    let (rows, cols) = (v.rows, v.cols);
    let factors = v.data.iter().map(|r| if r.abs() > cap { cap / r.abs() } else { 1.0 }).collect();
    if v.data.iter().all(|r| r.abs() <= cap) {
        return res;
    }
    let f = tape.constant(Tensor::new(rows, cols, factors));
    tape.mul(res, f)
}

/// Records `sum_k W_k L_k` where `L_k = sum_s c_s r_{k,s}^2` over `segments`.
#[allow(clippy::too_many_arguments)]
fn record_segments<P: Process>(
    tape: &mut Tape,
    process: &P,
    terms: PolicyTerms,
    flow: Option<(&FlowParams, &FlowVars)>,
    trajs: &[Trajectory<P::State>],
    weights: &[f64],
    segments: &[(usize, usize, f64)],
    cap: Option<f64>,
    target: GradTarget,
) -> Result<RecordedLoss> {
    let steps = process.steps();
    check_batch(trajs, steps)?;
    check_weights(weights, trajs.len())?;
    let k = trajs.len();
    let s = segments.len();

    // Segment sums of (log_fwd - log_back).
    let fwd = record_forward_matrix(tape, process, terms, trajs)?;
    let back = tape.constant(Tensor::new(k, steps, trajs.iter().flat_map(|t| t.log_back.iter().copied()).collect()));
    let diff = tape.sub(fwd, back);
    let mut sel = Tensor::zeros(steps, s);
    for (j, &(m, n, _)) in segments.iter().enumerate() {
        for i in m..n {
            sel.data[i * s + j] = 1.0;
        }
    }
    let sel = tape.constant(sel);
    let mut res = tape.matmul(diff, sel);

    // Start flows at m = 0 and end flows at n = N.
    let log_p0 = tape.constant(Tensor::column(trajs.iter().map(|t| t.log_p0).collect()));
    let f0 = match terms {
        PolicyTerms::Attached(vars) => tape.add_scalar(log_p0, vars.log_z),
        PolicyTerms::Detached { log_z } => tape.offset(log_p0, log_z),
    };
    let starts = Tensor::row(segments.iter().map(|&(m, _, _)| if m == 0 { 1.0 } else { 0.0 }).collect());
    if starts.data.iter().any(|&v| v != 0.0) {
        let starts = tape.constant(starts);
        let f0s = tape.matmul(f0, starts);
        res = tape.add(res, f0s);
    }
    let ends = Tensor::row(segments.iter().map(|&(_, n, _)| if n == steps { -1.0 } else { 0.0 }).collect());
    if ends.data.iter().any(|&v| v != 0.0) {
        let log_r = tape.constant(Tensor::column(trajs.iter().map(|t| t.log_r).collect()));
        let ends = tape.constant(ends);
        let frs = tape.matmul(log_r, ends);
        res = tape.add(res, frs);
    }

    // Interior flows at every boundary strictly between 0 and N.
    let mut interior: Vec<usize> = segments
        .iter()
        .flat_map(|&(m, n, _)| [m, n])
        .filter(|&i| i > 0 && i < steps)
        .collect();
    interior.sort_unstable();
    interior.dedup();
    if !interior.is_empty() {
        let (fp, fv) = flow.ok_or_else(|| Error::input("segment losses with interior boundaries need flows"))?;
        let j = interior.len();
        let mut xs = Vec::with_capacity(k * j);
        let mut ns = Vec::with_capacity(k * j);
        for t in trajs {
            for &i in &interior {
                xs.push(&t.states[i]);
                ns.push(i);
            }
        }
        let col = fp.record_log_values(tape, fv, process, &xs, &ns)?;
        let mat = tape.reshape(col, k, j);
        let mut isel = Tensor::zeros(j, s);
        for (c, &(m, n, _)) in segments.iter().enumerate() {
            if let Ok(r) = interior.binary_search(&m) {
                isel.data[r * s + c] += 1.0;
            }
            if let Ok(r) = interior.binary_search(&n) {
                isel.data[r * s + c] -= 1.0;
            }
        }
        let isel = tape.constant(isel);
        let fi = tape.matmul(mat, isel);
        res = tape.add(res, fi);
    }

    let res = cap_residuals(tape, res, cap);
    let sq = tape.square(res);
    let coef = tape.constant(Tensor::column(segments.iter().map(|s| s.2).collect()));
    let per = tape.matmul(sq, coef);
    let per_trajectory = tape.value(per).data.clone();
    let w = tape.constant(Tensor::column(weights.to_vec()));
    let weighted = tape.mul(per, w);
    let total = tape.sum(weighted);
    let value = tape.value(total).item();
    Ok(RecordedLoss { total, report: LossReport { value, per_trajectory, target } })
}

/// Importance-weighted TB, `sum_k W_k TB(tau_k)`.
pub fn record_tb<P: Process>(
    tape: &mut Tape,
    process: &P,
    vars: &PolicyVars,
    trajs: &[Trajectory<P::State>],
    weights: &[f64],
    cap: Option<f64>,
) -> Result<RecordedLoss> {
    let segs = [(0, process.steps(), 1.0)];
    record_segments(tape, process, PolicyTerms::Attached(vars), None, trajs, weights, &segs, cap, GradTarget::Policy)
}

/// Weighted chunked SubTB; with detached policy terms only `phi` is trained.
pub fn record_subtb_chunk<P: Process>(
    tape: &mut Tape,
    process: &P,
    terms: PolicyTerms,
    flow: (&FlowParams, &FlowVars),
    trajs: &[Trajectory<P::State>],
    weights: &[f64],
    chunk: usize,
) -> Result<RecordedLoss> {
    let segs = chunk_segments(process.steps(), chunk)?;
    let target = grad_target(terms);
    record_segments(tape, process, terms, Some(flow), trajs, weights, &segs, None, target)
}

/// Weighted SubTB-lambda.
pub fn record_subtb_lambda<P: Process>(
    tape: &mut Tape,
    process: &P,
    terms: PolicyTerms,
    flow: (&FlowParams, &FlowVars),
    trajs: &[Trajectory<P::State>],
    weights: &[f64],
    lambda: f64,
) -> Result<RecordedLoss> {
    let segs = lambda_segments(process.steps(), lambda)?;
    let target = grad_target(terms);
    record_segments(tape, process, terms, Some(flow), trajs, weights, &segs, None, target)
}

fn grad_target(terms: PolicyTerms) -> GradTarget {
    match terms {
        PolicyTerms::Attached(_) => GradTarget::Both,
        PolicyTerms::Detached { .. } => GradTarget::Flow,
    }
}

/// Log-variance loss over the batch; independent of `log Z_theta`.
pub fn record_lv<P: Process>(
    tape: &mut Tape,
    process: &P,
    vars: &PolicyVars,
    trajs: &[Trajectory<P::State>],
) -> Result<RecordedLoss> {
    check_batch(trajs, process.steps())?;
    if trajs.len() < 2 {
        return Err(Error::contract("the log-variance loss needs at least two trajectories"));
    }
    let k = trajs.len();
    let fwd = record_forward_matrix(tape, process, PolicyTerms::Attached(vars), trajs)?;
    let sum_fwd = tape.row_sum(fwd);
    let rest = trajs.iter().map(|t| t.log_r + t.log_back.iter().sum::<f64>() - t.log_p0).collect();
    let rest = tape.constant(Tensor::column(rest));
    let lw = tape.sub(rest, sum_fwd);
    let mean = tape.mean(lw);
    let neg = tape.scale(mean, -1.0);
    let centred = tape.add_scalar(lw, neg);
    let sq = tape.square(centred);
    let per_trajectory = tape.value(sq).data.iter().map(|v| v / (k as f64 - 1.0)).collect();
    let s = tape.sum(sq);
    let total = tape.scale(s, 1.0 / (k as f64 - 1.0));
    let value = tape.value(total).item();
    Ok(RecordedLoss { total, report: LossReport { value, per_trajectory, target: GradTarget::Policy } })
}
