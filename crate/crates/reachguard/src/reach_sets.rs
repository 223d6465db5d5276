//! The named safety sets, as computable grid objects.
//!
//! Pairwise layer (relative-state grid, offline): the exit-game buffer value
//! `v_exit` (pairs that can touch the danger disk within `Te` even while
//! cooperating to do so later get a grace period before removal), and the
//! converged potential-conflict value `v_pc` whose `K`-sublevel set is the
//! region where a pair must start coordinating.
//!
//! Outsider layer (absolute-pose grid, per scenario): the outsider unsafe
//! region OUR(t) = union over vehicle pairs of intersected pulled-back
//! conflict sets, the outsider's forward reachable set, and the minimal
//! backward reach value `brs_minus` whose complement is the certified-safe
//! start region.
//!
//! All sets are sub-zero level sets; unions are pointwise minima and
//! intersections pointwise maxima of value functions.

use std::sync::Arc;

use crate::dynamics::{
    ham_exit, ham_frs_dubins, ham_pc, opt_control_pc, relative_state_of, wrap_angle, DubinsParams,
    DubinsState, RelativeState,
};
use crate::error::{Error, Result};
use crate::grid::{make_signed_distance_disk, Grid, TimeIndexedValueFunction, ValueFunction};
use crate::hj_solver::{
    solve_brs_time_varying_sampled, solve_brs_to_convergence, solve_frs, HamiltonianSpec,
    SolveConfig,
};

/// Default decimation of trajectory samples into stored set frames.
pub const DEFAULT_FRAME_STRIDE: usize = 5;

/// Seed radius for origin forward-reach solves, in cells of the origin grid.
pub const FRS_SEED_CELLS: f64 = 1.5;

/// Offline pairwise tables shared by every ordered vehicle pair.
#[derive(Clone)]
pub struct PairwiseTables {
    /// Converged potential-conflict value on the relative-state grid.
    pub v_pc: ValueFunction,
    /// Exit-game value over the grace horizon; its sub-zero set is the buffer.
    pub v_exit: ValueFunction,
    /// Conflict threshold: membership is `v_pc <= K` (closed sublevel set).
    pub k: f64,
    /// Grace horizon of the buffer set, seconds.
    pub te: f64,
    /// Finite stand-in for "outside the relative grid": strictly above both
    /// every stored v_pc value and K, so out-of-grid states are never members
    /// but stored frames stay finite.
    sentinel: f64,
}

/// Result of a single pairwise conflict query.
#[derive(Clone, Copy, Debug)]
pub struct PcsMembership {
    pub member: bool,
    /// Interpolated v_pc value; +infinity when the relative state leaves the
    /// grid (defined non-member).
    pub value: f64,
}

/// Per-scenario outsider tables on one grid and one time list over [0, Tr].
#[derive(Clone)]
pub struct OutsiderSets {
    pub our: TimeIndexedValueFunction,
    /// Present when the minimal backward reach solve was run for this seed.
    pub brs_minus: Option<TimeIndexedValueFunction>,
    /// Forward reach of the outsider, resampled onto the shared grid/times.
    pub frs: TimeIndexedValueFunction,
    pub tr: f64,
}

impl OutsiderSets {
    pub fn new(
        our: TimeIndexedValueFunction,
        brs_minus: Option<TimeIndexedValueFunction>,
        frs: TimeIndexedValueFunction,
        tr: f64,
    ) -> Result<OutsiderSets> {
        let grid = our.grid();
        if !grid.same_as(frs.grid()) || brs_minus.as_ref().is_some_and(|b| !grid.same_as(b.grid()))
        {
            return Err(Error::GridMismatch(
                "outsider tables must share one grid".into(),
            ));
        }
        let same_times = |t: &[f64]| {
            t.len() == our.times().len()
                && t.iter()
                    .zip(our.times())
                    .all(|(a, b)| (a - b).abs() <= 1e-9)
        };
        if !same_times(frs.times()) || brs_minus.as_ref().is_some_and(|b| !same_times(b.times())) {
            return Err(Error::argument("outsider tables must share one time list"));
        }
        if our.times()[0] > 1e-9 || our.times()[our.len() - 1] < tr - 1e-9 {
            return Err(Error::argument(format!(
                "time list [{}, {}] does not cover [0, {tr}]",
                our.times()[0],
                our.times()[our.len() - 1]
            )));
        }
        if let Some(b) = &brs_minus {
            for (bf, of) in b.frames().iter().zip(our.frames()) {
                for (bv, ov) in bf.data().iter().zip(of.data()) {
                    if *ov <= 0.0 && *bv > *ov + 1e-9 {
                        return Err(Error::argument(
                            "minimal backward reach set must contain the unsafe region",
                        ));
                    }
                }
            }
        }
        Ok(OutsiderSets {
            our,
            brs_minus,
            frs,
            tr,
        })
    }
}

/// Vehicle paths sampled on one shared, strictly increasing time list.
#[derive(Clone, Debug)]
pub struct TrajectorySet {
    times: Vec<f64>,
    paths: Vec<Vec<DubinsState>>,
}

impl TrajectorySet {
    pub fn new(times: Vec<f64>, paths: Vec<Vec<DubinsState>>) -> Result<TrajectorySet> {
        if times.is_empty() {
            return Err(Error::argument("empty time list"));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::argument(
                "times must be finite and strictly increasing",
            ));
        }
        if paths.iter().any(|p| p.len() != times.len()) {
            return Err(Error::argument(
                "every path must carry one state per sample time",
            ));
        }
        Ok(TrajectorySet { times, paths })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn vehicle_count(&self) -> usize {
        self.paths.len()
    }

    pub fn path(&self, vehicle: usize) -> &[DubinsState] {
        &self.paths[vehicle]
    }

    /// Index of the sample nearest to `t` (ties toward the earlier sample).
    pub fn nearest_sample(&self, t: f64) -> usize {
        let n = self.times.len();
        let after = self.times.partition_point(|&ft| ft < t);
        if after == 0 {
            return 0;
        }
        if after >= n {
            return n - 1;
        }
        let before = after - 1;
        if (t - self.times[before]) <= (self.times[after] - t) {
            before
        } else {
            after
        }
    }

    pub fn state_at(&self, vehicle: usize, t: f64) -> DubinsState {
        self.paths[vehicle][self.nearest_sample(t)]
    }
}

/// Per-dim dissipation bounds for the pairwise relative Hamiltonians over the
/// grid box: |dH/dl1| <= 2v + w*max|y|, |dH/dl2| <= v + w*max|x|,
/// |dH/dl3| <= 2w.
pub fn relative_alpha(grid: &Grid, p: &DubinsParams) -> Vec<f64> {
    let max_abs = |k: usize| {
        let d = grid.dim(k);
        d.min.abs().max(d.max.abs())
    };
    vec![
        2.0 * p.speed + p.max_turn_rate * max_abs(1),
        p.speed + p.max_turn_rate * max_abs(0),
        2.0 * p.max_turn_rate,
    ]
}

/// Dissipation bounds for single-vehicle Dubins Hamiltonians.
pub fn dubins_alpha(p: &DubinsParams) -> Vec<f64> {
    vec![p.speed, p.speed, p.max_turn_rate]
}

fn require_pose_grid(grid: &Grid, what: &str) -> Result<()> {
    if grid.dim_count() != 3
        || !grid.dim(2).periodic
        || grid.dim(0).periodic
        || grid.dim(1).periodic
    {
        return Err(Error::argument(format!(
            "{what} needs an (x, y, heading) grid with periodic heading only"
        )));
    }
    Ok(())
}

/// Offline pairwise stage: exit-game buffer value over `[0, Te]` from the
/// danger disk, then the converged conflict value grown from the buffer set.
pub fn compute_pairwise_tables(
    grid_rel: &Arc<Grid>,
    params: &DubinsParams,
    rc: f64,
    te: f64,
    k: f64,
    cfg: &SolveConfig,
) -> Result<PairwiseTables> {
    if !(rc > 0.0) || !(te > 0.0) || !(k > 0.0) {
        return Err(Error::argument("Rc, Te and K must all be positive"));
    }
    require_pose_grid(grid_rel, "pairwise tables")?;
    let p = *params;
    let alpha = relative_alpha(grid_rel, &p);

    let danger = make_signed_distance_disk(grid_rel, [0.0, 0.0], rc)?;
    let exit_ham = HamiltonianSpec::new(alpha.clone(), move |x, c, _t| {
        ham_exit(&[x[0], x[1], x[2]], &[c[0], c[1], c[2]], &p)
    });
    let exit_frames = crate::hj_solver::solve_brs_time_varying(
        grid_rel,
        &TimeIndexedValueFunction::from_static(danger),
        &exit_ham,
        0.0,
        te,
        cfg,
    )?;
    let v_exit = exit_frames.frames()[0].clone();

    let pc_ham = HamiltonianSpec::new(alpha, move |x, c, _t| {
        ham_pc(&[x[0], x[1], x[2]], &[c[0], c[1], c[2]], &p)
    });
    let solved = solve_brs_to_convergence(grid_rel, &v_exit, &pc_ham, cfg)?;
    if !solved.converged {
        return Err(Error::Numeric {
            step: solved.steps,
            what: format!(
                "conflict value not converged (residual {:.3e})",
                solved.residual
            ),
        });
    }
    let v_pc = solved.value;
    let vpc_max = v_pc
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(PairwiseTables {
        sentinel: vpc_max.max(k) + 1.0,
        v_pc,
        v_exit,
        k,
        te,
    })
}

impl PairwiseTables {
    /// Assemble tables from precomputed value functions (cache load path).
    pub fn from_parts(
        v_pc: ValueFunction,
        v_exit: ValueFunction,
        k: f64,
        te: f64,
    ) -> Result<PairwiseTables> {
        if !v_pc.grid().same_as(v_exit.grid()) {
            return Err(Error::GridMismatch(
                "conflict and buffer values must share the relative grid".into(),
            ));
        }
        if !(k > 0.0) || !(te > 0.0) {
            return Err(Error::argument("Te and K must be positive"));
        }
        let vpc_max = v_pc
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(PairwiseTables {
            sentinel: vpc_max.max(k) + 1.0,
            v_pc,
            v_exit,
            k,
            te,
        })
    }

    /// Finite out-of-grid stand-in used when sets built from v_pc must stay
    /// finite; strictly above K and above every stored value.
    pub fn sentinel_value(&self) -> f64 {
        self.sentinel
    }

    /// Interpolated v_pc at the mapped relative state, finite sentinel
    /// outside the grid.
    fn vpc_at(&self, rel: &RelativeState) -> f64 {
        self.v_pc
            .interpolate(&[rel.x, rel.y, rel.theta])
            .unwrap_or(self.sentinel)
    }

    /// Interpolated buffer value at the mapped relative state, sentinel
    /// outside the grid (outside the grid the pair cannot touch the disk
    /// within the grace horizon).
    pub fn exit_value(&self, xi: &DubinsState, xj: &DubinsState) -> f64 {
        let rel = relative_state_of(xi, xj);
        self.v_exit
            .interpolate(&[rel.x, rel.y, rel.theta])
            .unwrap_or(self.sentinel)
    }
}

/// Conflict query between two world poses: value of v_pc at the mapped
/// relative state, member iff value <= K. Out of grid is a defined
/// non-member with value +infinity.
pub fn pcs_membership(
    tables: &PairwiseTables,
    xi: &DubinsState,
    xj: &DubinsState,
) -> PcsMembership {
    let rel = relative_state_of(xi, xj);
    match tables.v_pc.interpolate(&[rel.x, rel.y, rel.theta]) {
        Ok(value) => PcsMembership {
            member: value <= tables.k,
            value,
        },
        Err(_) => PcsMembership {
            member: false,
            value: f64::INFINITY,
        },
    }
}

fn run_over_frame(data: &mut [f64], slab: usize, body: impl Fn(usize, &mut [f64]) + Sync) {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(slab)
            .enumerate()
            .for_each(|(i0, chunk)| body(i0, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(slab)
            .enumerate()
            .for_each(|(i0, chunk)| body(i0, chunk));
    }
}

/// Frame times kept from a sampled trajectory: every `stride`-th sample plus
/// the final one.
fn decimated_indices(n: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if *idx.last().unwrap() != n - 1 {
        idx.push(n - 1);
    }
    idx
}

/// Outsider unsafe region: at each kept sample time, the union over unordered
/// vehicle pairs of the intersections of their pulled-back conflict sets,
/// evaluated on the outsider's full pose grid in value form (v_pc - K).
pub fn compute_our(
    tables: &PairwiseTables,
    traj: &TrajectorySet,
    outsider_grid: &Arc<Grid>,
    stride: usize,
) -> Result<TimeIndexedValueFunction> {
    if traj.vehicle_count() < 2 {
        return Err(Error::argument(
            "unsafe-region construction needs at least two vehicles",
        ));
    }
    require_pose_grid(outsider_grid, "the unsafe region")?;
    let kept = decimated_indices(traj.times().len(), stride);
    let slab = outsider_grid.strides()[0];
    let nveh = traj.vehicle_count();
    let mut times = Vec::with_capacity(kept.len());
    let mut frames = Vec::with_capacity(kept.len());
    for &sample in &kept {
        let states: Vec<DubinsState> = (0..nveh).map(|i| traj.path(i)[sample]).collect();
        let mut data = vec![0.0; outsider_grid.len()];
        run_over_frame(&mut data, slab, |i0, chunk| {
            let mut vals = vec![0.0; nveh];
            for (local, slot) in chunk.iter_mut().enumerate() {
                let flat = i0 * slab + local;
                let c = outsider_grid.node_coords(flat);
                let pose = DubinsState::new(c[0], c[1], c[2]);
                for (v, s) in vals.iter_mut().zip(&states) {
                    *v = tables.vpc_at(&relative_state_of(&pose, s)) - tables.k;
                }
                let mut best = f64::INFINITY;
                for a in 0..nveh {
                    for b in a + 1..nveh {
                        best = best.min(vals[a].max(vals[b]));
                    }
                }
                *slot = best;
            }
        });
        times.push(traj.times()[sample]);
        frames.push(ValueFunction::new(outsider_grid.clone(), data)?);
    }
    TimeIndexedValueFunction::new(times, frames)
}

/// Forward reach of a vehicle seeded at the origin pose: planar disk of
/// radius 1.5 cells through every heading. A seed pinched to a thin heading
/// slab stalls numerically (its heading dissipation consumes the planar
/// transport until turning widens the slab), while the free-heading cylinder
/// propagates at full speed and errs on the safe side as a superset.
/// Frames stay origin-centered; [`resample_frs`] maps them to a seed pose.
pub fn compute_frs_origin(
    grid_origin: &Arc<Grid>,
    params: &DubinsParams,
    horizon: f64,
    cfg: &SolveConfig,
) -> Result<TimeIndexedValueFunction> {
    if !(horizon > 0.0) {
        return Err(Error::argument("horizon must be positive"));
    }
    require_pose_grid(grid_origin, "the forward reach solve")?;
    let p = *params;
    let seed =
        make_signed_distance_disk(grid_origin, [0.0, 0.0], FRS_SEED_CELLS * grid_origin.dx(0))?;
    let ham = HamiltonianSpec::new(dubins_alpha(&p), move |x, c, _t| {
        ham_frs_dubins(&[x[0], x[1], x[2]], &[c[0], c[1], c[2]], &p)
    })
    .with_local_alpha(move |x, a| {
        a[0] = p.speed * x[2].cos().abs();
        a[1] = p.speed * x[2].sin().abs();
        a[2] = p.max_turn_rate;
    });
    solve_frs(grid_origin, &seed, &ham, 0.0, horizon, cfg)
}

/// Conservative stand-in for the forward reach value when the query leaves
/// the cached table (in space or time): anything within speed reach of the
/// seed counts as possibly occupied.
fn frs_fallback(seed: &DubinsState, p: &DubinsParams, t: f64, x: f64, y: f64, r0: f64) -> f64 {
    let d = ((x - seed.x).powi(2) + (y - seed.y).powi(2)).sqrt();
    d - p.speed * t - r0
}

/// Map the origin forward-reach table to a concrete seed pose and resample it
/// onto the outsider grid at the requested times. Queries beyond the cached
/// horizon or outside the origin grid fall back to the speed bound.
pub fn resample_frs(
    origin: &TimeIndexedValueFunction,
    params: &DubinsParams,
    seed: &DubinsState,
    grid_abs: &Arc<Grid>,
    times: &[f64],
) -> Result<TimeIndexedValueFunction> {
    require_pose_grid(grid_abs, "forward reach resampling")?;
    require_pose_grid(origin.grid(), "the origin forward reach table")?;
    if times.is_empty() || times.windows(2).any(|w| !(w[0] < w[1])) || times[0] < -1e-12 {
        return Err(Error::argument(
            "resample times must be nonnegative and strictly increasing",
        ));
    }
    let horizon = origin.times()[origin.len() - 1];
    let r0 = FRS_SEED_CELLS * origin.grid().dx(0);
    let (sin_s, cos_s) = seed.theta.sin_cos();
    let slab = grid_abs.strides()[0];
    let mut frames = Vec::with_capacity(times.len());
    for &t in times {
        let frame = (t <= horizon + 1e-9).then(|| origin.frame_at_or_before(t));
        let mut data = vec![0.0; grid_abs.len()];
        run_over_frame(&mut data, slab, |i0, chunk| {
            for (local, slot) in chunk.iter_mut().enumerate() {
                let flat = i0 * slab + local;
                let c = grid_abs.node_coords(flat);
                let dx = c[0] - seed.x;
                let dy = c[1] - seed.y;
                let ox = cos_s * dx + sin_s * dy;
                let oy = -sin_s * dx + cos_s * dy;
                let oth = wrap_angle(c[2] - seed.theta);
                *slot = match frame {
                    Some(f) => f
                        .interpolate(&[ox, oy, oth])
                        .unwrap_or_else(|_| frs_fallback(seed, params, t, c[0], c[1], r0)),
                    None => frs_fallback(seed, params, t, c[0], c[1], r0),
                };
            }
        });
        frames.push(ValueFunction::new(grid_abs.clone(), data)?);
    }
    TimeIndexedValueFunction::new(times.to_vec(), frames)
}

/// First sample time at which the forward reach set touches the unsafe
/// region: smallest t in the union of both time lists where some node has
/// max(frs, our) <= 0. Frames are compared at their most recent samples.
pub fn frs_intersects_our(
    frs: &TimeIndexedValueFunction,
    our: &TimeIndexedValueFunction,
) -> Result<Option<f64>> {
    if !frs.grid().same_as(our.grid()) {
        return Err(Error::GridMismatch(
            "forward reach and unsafe region live on different grids".into(),
        ));
    }
    let mut times: Vec<f64> = frs.times().iter().chain(our.times()).cloned().collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    for t in times {
        let f = frs.frame_at_or_before(t);
        let o = our.frame_at_or_before(t);
        let hit = f
            .data()
            .iter()
            .zip(o.data())
            .any(|(fv, ov)| fv.max(*ov) <= 0.0);
        if hit {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Per-node control mode for the minimal backward reach Hamiltonian.
/// 0: free (worst case over turn rates); +-1: inside exactly one conflict
/// set, turn rate forced to +-max by the pairwise avoid policy.
fn brs_minus_modes(
    tables: &PairwiseTables,
    traj: &TrajectorySet,
    grid: &Arc<Grid>,
    times: &[f64],
    p: &DubinsParams,
) -> Vec<Vec<i8>> {
    let slab = grid.strides()[0];
    let nveh = traj.vehicle_count();
    times
        .iter()
        .map(|&t| {
            let states: Vec<DubinsState> = (0..nveh).map(|i| traj.state_at(i, t)).collect();
            let mut modes = vec![0i8; grid.len()];
            let body = |i0: usize, chunk: &mut [i8]| {
                for (local, slot) in chunk.iter_mut().enumerate() {
                    let flat = i0 * slab + local;
                    let c = grid.node_coords(flat);
                    let pose = DubinsState::new(c[0], c[1], c[2]);
                    let mut inside: Option<RelativeState> = None;
                    let mut count = 0;
                    for s in &states {
                        let rel = relative_state_of(&pose, s);
                        if tables.vpc_at(&rel) <= tables.k {
                            count += 1;
                            inside = Some(rel);
                        }
                    }
                    *slot = if count == 1 {
                        let rel = inside.unwrap();
                        match tables.v_pc.gradient(&[rel.x, rel.y, rel.theta]) {
                            Ok(g) => {
                                let u = opt_control_pc(&rel, &[g[0], g[1], g[2]], p);
                                if u >= 0.0 {
                                    1
                                } else {
                                    -1
                                }
                            }
                            Err(_) => 0,
                        }
                    } else {
                        0
                    };
                }
            };
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                modes
                    .par_chunks_mut(slab)
                    .enumerate()
                    .for_each(|(i0, chunk)| body(i0, chunk));
            }
            #[cfg(not(feature = "parallel"))]
            {
                modes
                    .chunks_mut(slab)
                    .enumerate()
                    .for_each(|(i0, chunk)| body(i0, chunk));
            }
            modes
        })
        .collect()
}

/// Minimal backward reach of the unsafe region over [0, Tr]: states from
/// which entering OUR at some time is unavoidable under the staged avoidance
/// behavior. Inside exactly one conflict set the heading rate is pinned to
/// the pairwise avoid policy; elsewhere the worst case over turn rates
/// applies (nodes inside two or more sets are already in the target, where
/// the freeze term decides).
pub fn compute_brs_minus(
    our: &TimeIndexedValueFunction,
    traj: &TrajectorySet,
    tables: &PairwiseTables,
    params: &DubinsParams,
    tr: f64,
    cfg: &SolveConfig,
) -> Result<TimeIndexedValueFunction> {
    let grid = our.grid().clone();
    require_pose_grid(&grid, "the minimal backward reach solve")?;
    if !(tr > 0.0) {
        return Err(Error::argument("Tr must be positive"));
    }
    let times = our.times().to_vec();
    if times[0] > 1e-9 || times[times.len() - 1] < tr - 1e-9 {
        return Err(Error::argument(format!(
            "unsafe region frames [{}, {}] do not cover [0, {tr}]",
            times[0],
            times[times.len() - 1]
        )));
    }
    let p = *params;
    let modes = brs_minus_modes(tables, traj, &grid, &times, &p);

    // Exact node-index recovery from the coordinates the solver hands back,
    // plus a heading trig table: node headings are exactly min + i * dx.
    let g = grid.clone();
    let times_for_eval = times.clone();
    let theta_trig: Vec<(f64, f64)> = (0..g.dim(2).nodes)
        .map(|i| g.coord(2, i).sin_cos())
        .collect();
    let ham = HamiltonianSpec::new(dubins_alpha(&p), move |x, c, t| {
        let i0 = ((x[0] - g.dim(0).min) / g.dx(0)).round() as usize;
        let i1 = ((x[1] - g.dim(1).min) / g.dx(1)).round() as usize;
        let i2 = ((x[2] - g.dim(2).min) / g.dx(2)).round() as usize;
        let flat = g.index(&[i0, i1, i2]);
        let slot = match times_for_eval.partition_point(|&ft| ft < t - 1e-12) {
            0 => 0,
            n if n >= times_for_eval.len() => times_for_eval.len() - 1,
            n => {
                // Nearest sample; mode is piecewise constant in time.
                if (t - times_for_eval[n - 1]) <= (times_for_eval[n] - t) {
                    n - 1
                } else {
                    n
                }
            }
        };
        let (sin_t, cos_t) = theta_trig[i2];
        match modes[slot][flat] {
            0 => p.speed * (c[0] * cos_t + c[1] * sin_t) + p.max_turn_rate * c[2].abs(),
            m => {
                let u = f64::from(m) * p.max_turn_rate;
                p.speed * (c[0] * cos_t + c[1] * sin_t) + c[2] * u
            }
        }
    });
    solve_brs_time_varying_sampled(&grid, our, &ham, 0.0, times[times.len() - 1], cfg, &times)
}

/// Turn rate the minimal-BRS Hamiltonian assumes at a pose, for rollout use:
/// the forced pairwise policy inside exactly one conflict set, otherwise the
/// worst-case turn toward the unsafe region is left to the caller.
pub fn forced_mode_control(
    tables: &PairwiseTables,
    states: &[DubinsState],
    pose: &DubinsState,
    p: &DubinsParams,
) -> Option<f64> {
    let mut inside = None;
    let mut count = 0;
    for s in states {
        let rel = relative_state_of(pose, s);
        if tables.vpc_at(&rel) <= tables.k {
            count += 1;
            inside = Some(rel);
        }
    }
    if count != 1 {
        return None;
    }
    let rel = inside?;
    let g = tables.v_pc.gradient(&[rel.x, rel.y, rel.theta]).ok()?;
    Some(opt_control_pc(&rel, &[g[0], g[1], g[2]], p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DimSpec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    const P: DubinsParams = DubinsParams {
        speed: 1.0,
        max_turn_rate: 1.0,
    };

    fn rel_grid_coarse() -> Arc<Grid> {
        let pi = std::f64::consts::PI;
        Grid::new(vec![
            DimSpec {
                min: -6.0,
                max: 6.0,
                nodes: 25,
                periodic: false,
            },
            DimSpec {
                min: -6.0,
                max: 6.0,
                nodes: 25,
                periodic: false,
            },
            DimSpec {
                min: -pi,
                max: pi,
                nodes: 15,
                periodic: true,
            },
        ])
        .unwrap()
    }

    fn outsider_grid_coarse() -> Arc<Grid> {
        let pi = std::f64::consts::PI;
        Grid::new(vec![
            DimSpec {
                min: -5.0,
                max: 5.0,
                nodes: 21,
                periodic: false,
            },
            DimSpec {
                min: -5.0,
                max: 5.0,
                nodes: 21,
                periodic: false,
            },
            DimSpec {
                min: -pi,
                max: pi,
                nodes: 11,
                periodic: true,
            },
        ])
        .unwrap()
    }

    /// Shared coarse tables: Rc = 1.5 fits the +-6 box with room for the
    /// conflict set to converge inside it.
    fn coarse_tables() -> &'static PairwiseTables {
        static TABLES: OnceLock<PairwiseTables> = OnceLock::new();
        TABLES.get_or_init(|| {
            let cfg = SolveConfig {
                max_steps: 4000,
                ..SolveConfig::default()
            };
            compute_pairwise_tables(&rel_grid_coarse(), &P, 1.5, 1.0, 0.8, &cfg).unwrap()
        })
    }

    #[test]
    fn one_step_grace_buffer_stays_near_the_danger_disk() {
        let g = rel_grid_coarse();
        let alpha = relative_alpha(&g, &P);
        let rate: f64 = alpha.iter().enumerate().map(|(k, a)| a / g.dx(k)).sum();
        let te = 0.9 * SolveConfig::default().cfl / rate;
        let t = compute_pairwise_tables(&g, &P, 1.5, te, 0.8, &SolveConfig::default()).unwrap();
        let disk = make_signed_distance_disk(&g, [0.0, 0.0], 1.5).unwrap();
        let max_dev = t
            .v_exit
            .data()
            .iter()
            .zip(disk.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            max_dev <= 1.5 * g.dx(0),
            "one-step buffer deviates {max_dev} from the disk"
        );
    }

    #[test]
    fn pairwise_tables_nest_and_flag_coincident_vehicles() {
        let t = coarse_tables();
        let disk = make_signed_distance_disk(&rel_grid_coarse(), [0.0, 0.0], 1.5).unwrap();
        for i in 0..disk.data().len() {
            if disk.data()[i] <= 0.0 {
                assert!(
                    t.v_exit.data()[i] <= 1e-9,
                    "buffer must contain the danger disk"
                );
            }
            if t.v_exit.data()[i] <= 0.0 {
                assert!(
                    t.v_pc.data()[i] <= t.k,
                    "conflict set must contain the buffer"
                );
            }
        }
        let origin = t.v_pc.interpolate(&[0.0, 0.0, 0.0]).unwrap();
        assert!(origin <= 0.0, "coincident vehicles are in conflict");
    }

    #[test]
    fn membership_uses_a_closed_sublevel_set_and_a_sentinel() {
        let t = coarse_tables();
        let same = DubinsState::new(1.0, 1.0, 0.3);
        let q = pcs_membership(t, &same, &same);
        assert!(q.member && q.value <= 0.0);

        let far = pcs_membership(
            t,
            &DubinsState::new(0.0, 0.0, 0.0),
            &DubinsState::new(100.0, 0.0, 0.0),
        );
        assert!(!far.member);
        assert!(far.value.is_infinite() && far.value > 0.0);

        // Tie rule: exactly K is a member; work on a synthetic table whose
        // values are constant, so interpolation is exact.
        let g = rel_grid_coarse();
        let k = 0.8;
        let flat = PairwiseTables::from_parts(
            ValueFunction::new(g.clone(), vec![k; g.len()]).unwrap(),
            ValueFunction::new(g.clone(), vec![1.0; g.len()]).unwrap(),
            k,
            1.0,
        )
        .unwrap();
        let at_k = pcs_membership(&flat, &same, &same);
        assert!(at_k.member && at_k.value == k);
    }

    #[test]
    fn sentinel_dominates_threshold_and_table() {
        let t = coarse_tables();
        let s = t.sentinel_value();
        assert!(s > t.k);
        assert!(t.v_pc.data().iter().all(|v| *v < s));
    }

    fn straight_paths(n: usize, starts: &[DubinsState], dt: f64, steps: usize) -> TrajectorySet {
        let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        let paths = starts[..n]
            .iter()
            .map(|s| {
                times
                    .iter()
                    .map(|t| {
                        DubinsState::new(
                            s.x + t * P.speed * s.theta.cos(),
                            s.y + t * P.speed * s.theta.sin(),
                            s.theta,
                        )
                    })
                    .collect()
            })
            .collect();
        TrajectorySet::new(times, paths).unwrap()
    }

    /// Independent re-evaluation of the unsafe region: literal double loop
    /// over ordered pairs with set algebra on whole frames.
    fn our_bruteforce(
        tables: &PairwiseTables,
        traj: &TrajectorySet,
        grid: &Arc<Grid>,
        stride: usize,
    ) -> TimeIndexedValueFunction {
        let kept = decimated_indices(traj.times().len(), stride);
        let nveh = traj.vehicle_count();
        let mut frames = Vec::new();
        let mut times = Vec::new();
        for &s in &kept {
            let mut acc: Option<ValueFunction> = None;
            for a in 0..nveh {
                for b in 0..nveh {
                    if a == b {
                        continue;
                    }
                    if a > b {
                        continue;
                    }
                    let mut pa = Vec::with_capacity(grid.len());
                    let mut pb = Vec::with_capacity(grid.len());
                    for flat in 0..grid.len() {
                        let c = grid.node_coords(flat);
                        let pose = DubinsState::new(c[0], c[1], c[2]);
                        pa.push(
                            tables.vpc_at(&relative_state_of(&pose, &traj.path(a)[s])) - tables.k,
                        );
                        pb.push(
                            tables.vpc_at(&relative_state_of(&pose, &traj.path(b)[s])) - tables.k,
                        );
                    }
                    let inter = ValueFunction::new(grid.clone(), pa)
                        .unwrap()
                        .set_intersect(&ValueFunction::new(grid.clone(), pb).unwrap())
                        .unwrap();
                    acc = Some(match acc {
                        None => inter,
                        Some(u) => u.set_union(&inter).unwrap(),
                    });
                }
            }
            times.push(traj.times()[s]);
            frames.push(acc.unwrap());
        }
        TimeIndexedValueFunction::new(times, frames).unwrap()
    }

    #[test]
    fn unsafe_region_matches_bruteforce_and_is_permutation_invariant() {
        let t = coarse_tables();
        let og = outsider_grid_coarse();
        let starts = [
            DubinsState::new(-1.0, -0.5, 0.4),
            DubinsState::new(1.0, 0.5, 2.5),
            DubinsState::new(0.0, -1.5, -1.2),
        ];
        let traj = straight_paths(3, &starts, 0.2, 6);
        let ours = compute_our(t, &traj, &og, 2).unwrap();
        let oracle = our_bruteforce(t, &traj, &og, 2);
        assert_eq!(ours.times(), oracle.times());
        for (a, b) in ours.frames().iter().zip(oracle.frames()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }

        let permuted = TrajectorySet::new(
            traj.times().to_vec(),
            vec![
                traj.path(2).to_vec(),
                traj.path(0).to_vec(),
                traj.path(1).to_vec(),
            ],
        )
        .unwrap();
        let ours_p = compute_our(t, &permuted, &og, 2).unwrap();
        for (a, b) in ours.frames().iter().zip(ours_p.frames()) {
            assert_eq!(a.data(), b.data(), "union over unordered pairs");
        }
    }

    #[test]
    fn unsafe_region_trivial_cases() {
        let t = coarse_tables();
        let og = outsider_grid_coarse();
        // Far-away vehicles: empty region.
        let far = straight_paths(
            2,
            &[
                DubinsState::new(500.0, 0.0, 0.0),
                DubinsState::new(-500.0, 0.0, 0.0),
            ],
            0.2,
            3,
        );
        let empty = compute_our(t, &far, &og, 1).unwrap();
        assert!(empty
            .frames()
            .iter()
            .all(|f| f.data().iter().all(|v| *v > 0.0)));

        // Coincident vehicles at the grid center: the center node is unsafe.
        let center = straight_paths(
            2,
            &[
                DubinsState::new(0.0, 0.0, 0.0),
                DubinsState::new(0.0, 0.0, 0.0),
            ],
            0.2,
            3,
        );
        let ours = compute_our(t, &center, &og, 1).unwrap();
        let v = ours.frames()[0].interpolate(&[0.0, 0.0, 0.0]).unwrap();
        assert!(v <= 0.0, "center node value {v}");

        // Fewer than two vehicles is a contract violation.
        let one = straight_paths(1, &[DubinsState::new(0.0, 0.0, 0.0)], 0.2, 3);
        assert!(compute_our(t, &one, &og, 1).is_err());
    }

    #[test]
    fn unsafe_region_values_drop_when_the_threshold_grows() {
        let base = coarse_tables();
        let og = outsider_grid_coarse();
        let bigger = PairwiseTables::from_parts(
            base.v_pc.clone(),
            base.v_exit.clone(),
            base.k + 0.5,
            base.te,
        )
        .unwrap();
        let traj = straight_paths(
            2,
            &[
                DubinsState::new(-1.0, 0.0, 0.0),
                DubinsState::new(1.0, 0.0, 3.0),
            ],
            0.2,
            4,
        );
        let small = compute_our(base, &traj, &og, 2).unwrap();
        let large = compute_our(&bigger, &traj, &og, 2).unwrap();
        for (a, b) in small.frames().iter().zip(large.frames()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(*y <= x + 1e-12, "larger K can only enlarge the region");
            }
        }
    }

    fn origin_grid_coarse() -> Arc<Grid> {
        let pi = std::f64::consts::PI;
        Grid::new(vec![
            DimSpec {
                min: -3.0,
                max: 3.0,
                nodes: 31,
                periodic: false,
            },
            DimSpec {
                min: -3.0,
                max: 3.0,
                nodes: 31,
                periodic: false,
            },
            DimSpec {
                min: -pi,
                max: pi,
                nodes: 15,
                periodic: true,
            },
        ])
        .unwrap()
    }

    fn origin_frs_shared() -> &'static TimeIndexedValueFunction {
        static FRS: OnceLock<TimeIndexedValueFunction> = OnceLock::new();
        FRS.get_or_init(|| {
            compute_frs_origin(&origin_grid_coarse(), &P, 1.2, &SolveConfig::default()).unwrap()
        })
    }

    #[test]
    fn forward_reach_starts_at_the_seed_and_respects_the_speed_bound() {
        let frs = origin_frs_shared();
        let g = frs.grid();
        let dx = g.dx(0);
        let first = &frs.frames()[0];
        let at_seed = first.interpolate(&[0.0, 0.0, 0.0]).unwrap();
        assert!(at_seed <= 0.0, "seed pose starts inside");
        assert!(
            first.interpolate(&[2.0, 0.0, 0.0]).unwrap() > 0.0,
            "far pose starts outside"
        );

        let t = 1.0;
        let f = frs.frame_at_or_before(t);
        for i in 0..g.len() {
            if f.data()[i] <= 0.0 {
                let c = g.node_coords(i);
                let d = (c[0] * c[0] + c[1] * c[1]).sqrt();
                assert!(
                    d <= P.speed * t + FRS_SEED_CELLS * dx + 2.0 * dx,
                    "reached distance {d} beyond the speed bound at t = {t}"
                );
            }
        }
    }

    #[test]
    fn forward_reach_resampling_is_rotation_equivariant() {
        let frs = origin_frs_shared();
        let og = outsider_grid_coarse();
        let times = vec![0.0, 0.5, 1.0];
        let seat = DubinsState::new(0.4, -0.2, std::f64::consts::FRAC_PI_2);
        let rs = resample_frs(frs, &P, &seat, &og, &times).unwrap();
        // Compare a handful of probe poses against a direct inverse-mapped
        // interpolation of the origin table.
        let (sin_s, cos_s) = seat.theta.sin_cos();
        let probes = [
            [0.4, 0.6, 1.2],
            [0.0, 0.0, 0.0],
            [-0.3, 0.4, std::f64::consts::FRAC_PI_2],
        ];
        for (ti, &t) in times.iter().enumerate() {
            let origin_frame = frs.frame_at_or_before(t);
            for pr in probes {
                let dx = pr[0] - seat.x;
                let dy = pr[1] - seat.y;
                let mapped = [
                    cos_s * dx + sin_s * dy,
                    -sin_s * dx + cos_s * dy,
                    wrap_angle(pr[2] - seat.theta),
                ];
                let direct = origin_frame.interpolate(&mapped).unwrap();
                let via_grid = rs.frames()[ti].interpolate(&pr).unwrap();
                // The resampled table adds one grid interpolation layer.
                assert!(
                    (direct - via_grid).abs() <= 0.35,
                    "t {t} probe {pr:?}: {direct} vs {via_grid}"
                );
            }
        }
    }

    #[test]
    fn forward_reach_fallback_extends_beyond_the_cached_horizon() {
        let frs = origin_frs_shared();
        let og = outsider_grid_coarse();
        let seed = DubinsState::new(0.0, 0.0, 0.0);
        let rs = resample_frs(frs, &P, &seed, &og, &vec![0.0, 2.0, 4.0]).unwrap();
        // t = 4 exceeds the 1.2 s cache: the disk of radius ~4 covers the
        // whole +-5 grid except the far corners.
        let f = rs.frames()[2].clone();
        assert!(f.interpolate(&[3.5, 0.0, 1.0]).unwrap() <= 0.0);
        assert!(f.interpolate(&[4.9, 4.9, 0.0]).unwrap() > 0.0);
    }

    /// Exhaustive double-loop reference for the intersection scan.
    fn intersect_oracle(
        frs: &TimeIndexedValueFunction,
        our: &TimeIndexedValueFunction,
    ) -> Option<f64> {
        let mut times: Vec<f64> = frs.times().iter().chain(our.times()).cloned().collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
        for t in times {
            let f = frs.frame_at_or_before(t);
            let o = our.frame_at_or_before(t);
            for i in 0..f.data().len() {
                if f.data()[i] <= 0.0 && o.data()[i] <= 0.0 {
                    return Some(t);
                }
            }
        }
        None
    }

    #[test]
    fn intersection_scan_matches_the_exhaustive_oracle() {
        let og = outsider_grid_coarse();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..6 {
            let times: Vec<f64> = (0..5).map(|i| i as f64 * 0.3).collect();
            let mk = |rng: &mut ChaCha8Rng, offset: f64| {
                let frames = times
                    .iter()
                    .map(|t| {
                        let cx = rng.random_range(-3.0..3.0);
                        let cy = rng.random_range(-3.0..3.0);
                        let r = rng.random_range(0.4..1.4);
                        let data = (0..og.len())
                            .map(|i| {
                                let c = og.node_coords(i);
                                ((c[0] - cx).powi(2) + (c[1] - cy).powi(2)).sqrt() - r + offset * t
                            })
                            .collect();
                        ValueFunction::new(og.clone(), data).unwrap()
                    })
                    .collect();
                TimeIndexedValueFunction::new(times.clone(), frames).unwrap()
            };
            let frs = mk(&mut rng, 0.0);
            let our = mk(&mut rng, if case % 2 == 0 { 0.0 } else { 5.0 });
            assert_eq!(
                frs_intersects_our(&frs, &our).unwrap(),
                intersect_oracle(&frs, &our),
                "case {case}"
            );
        }
    }

    #[test]
    fn intersection_scan_trivial_cases() {
        let og = outsider_grid_coarse();
        let times = vec![0.0, 0.5];
        let pos = ValueFunction::new(og.clone(), vec![1.0; og.len()]).unwrap();
        let empty =
            TimeIndexedValueFunction::new(times.clone(), vec![pos.clone(), pos.clone()]).unwrap();
        let seeded_frames: Vec<ValueFunction> = times
            .iter()
            .map(|_| make_signed_distance_disk(&og, [0.0, 0.0], 1.0).unwrap())
            .collect();
        let seeded = TimeIndexedValueFunction::new(times.clone(), seeded_frames).unwrap();
        assert_eq!(frs_intersects_our(&seeded, &empty).unwrap(), None);
        assert_eq!(frs_intersects_our(&seeded, &seeded).unwrap(), Some(0.0));
    }

    #[test]
    fn minimal_backward_reach_contains_the_region_and_clears_when_empty() {
        let t = coarse_tables();
        let og = outsider_grid_coarse();
        let traj = straight_paths(
            2,
            &[
                DubinsState::new(-1.2, 0.0, 0.0),
                DubinsState::new(1.2, 0.0, std::f64::consts::PI),
            ],
            0.1,
            10,
        );
        let our = compute_our(t, &traj, &og, 5).unwrap();
        let tr = *our.times().last().unwrap();
        let brs = compute_brs_minus(&our, &traj, t, &P, tr, &SolveConfig::default()).unwrap();
        assert_eq!(brs.times(), our.times());
        for (bf, of) in brs.frames().iter().zip(our.frames()) {
            for (bv, ov) in bf.data().iter().zip(of.data()) {
                if *ov <= 0.0 {
                    assert!(*bv <= *ov + 1e-9, "freeze keeps the region inside");
                }
            }
        }
        let sets = OutsiderSets::new(
            our.clone(),
            Some(brs),
            resample_frs(
                origin_frs_shared(),
                &P,
                &DubinsState::new(-3.0, -3.0, 0.0),
                &og,
                our.times(),
            )
            .unwrap(),
            tr,
        );
        assert!(sets.is_ok());

        // Empty region: backward reach stays strictly positive.
        let ones = ValueFunction::new(og.clone(), vec![1.0; og.len()]).unwrap();
        let empty =
            TimeIndexedValueFunction::new(our.times().to_vec(), vec![ones; our.times().len()])
                .unwrap();
        let clear = compute_brs_minus(&empty, &traj, t, &P, tr, &SolveConfig::default()).unwrap();
        assert!(clear
            .frames()
            .iter()
            .all(|f| f.data().iter().all(|v| *v > 0.0)));
    }

    #[test]
    fn outsider_sets_reject_mismatched_inputs() {
        let og = outsider_grid_coarse();
        let times = vec![0.0, 0.5, 1.0];
        let ones = ValueFunction::new(og.clone(), vec![1.0; og.len()]).unwrap();
        let tivf = |ts: &[f64]| {
            TimeIndexedValueFunction::new(ts.to_vec(), vec![ones.clone(); ts.len()]).unwrap()
        };
        // Time list not covering [0, Tr].
        assert!(OutsiderSets::new(tivf(&times), None, tivf(&times), 2.0).is_err());
        // Mismatched time lists.
        assert!(OutsiderSets::new(tivf(&times), None, tivf(&[0.0, 0.4, 1.0]), 1.0).is_err());
        // Containment violation: backward value above the region value.
        let zeros = ValueFunction::new(og.clone(), vec![0.0; og.len()]).unwrap();
        let our0 = TimeIndexedValueFunction::new(times.clone(), vec![zeros; 3]).unwrap();
        assert!(OutsiderSets::new(our0, Some(tivf(&times)), tivf(&times), 1.0).is_err());
    }

    #[test]
    fn trajectory_sets_validate_and_look_up_nearest_samples() {
        let ts = straight_paths(
            2,
            &[
                DubinsState::new(0.0, 0.0, 0.0),
                DubinsState::new(1.0, 0.0, 0.0),
            ],
            0.5,
            4,
        );
        assert_eq!(ts.nearest_sample(-1.0), 0);
        assert_eq!(ts.nearest_sample(0.2), 0);
        assert_eq!(ts.nearest_sample(0.26), 1);
        assert_eq!(ts.nearest_sample(99.0), 4);
        let s = ts.state_at(0, 1.01);
        assert!((s.x - 1.0).abs() < 1e-12);

        assert!(TrajectorySet::new(vec![], vec![]).is_err());
        assert!(TrajectorySet::new(vec![0.0, 0.0], vec![vec![]; 0]).is_err());
        assert!(
            TrajectorySet::new(vec![0.0, 1.0], vec![vec![DubinsState::new(0.0, 0.0, 0.0)]])
                .is_err()
        );
    }
}
