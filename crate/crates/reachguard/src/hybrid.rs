//! Staged N+1 coordination layer: the conflict graph, the four-stage safety
//! automaton, outsider selection and control synthesis, and a pluggable
//! N-vehicle avoidance baseline.
//!
//! The scheme maintains pairwise guarantees for up to N simultaneous
//! conflicting vehicles. When an (N+1)-th vehicle joins the conflict, one
//! vehicle is designated the outsider: the remaining N resolve their conflict
//! over a horizon Tr while the outsider steers around their joint unsafe
//! region, with a certified guarantee when its forward reach misses that
//! region (or its pose starts outside the minimal backward reach of it), and
//! best effort otherwise. A buffer entry during Stage 2 forces the outsider
//! to leave the shared space (Stage 3).

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    goal_controller, opt_control_free, opt_control_pc, relative_state_of, step_dubins, Control,
    DubinsParams, DubinsState,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, TimeIndexedValueFunction};
use crate::hj_solver::SolveConfig;
use crate::reach_sets::{
    compute_brs_minus, compute_our, frs_intersects_our, pcs_membership, resample_frs, OutsiderSets,
    PairwiseTables, TrajectorySet,
};

/// Undirected conflict graph over vehicle indices: an edge means at least one
/// of the two poses sits in the other's potential-conflict set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConflictGraph {
    vehicle_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl ConflictGraph {
    pub fn new(
        vehicle_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<ConflictGraph> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::argument("conflict graphs have no self-loops"));
            }
            if a >= vehicle_count || b >= vehicle_count {
                return Err(Error::argument(format!(
                    "edge ({a}, {b}) out of range for {vehicle_count} vehicles"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(ConflictGraph {
            vehicle_count,
            edges: set,
        })
    }

    pub fn vehicle_count(&self) -> usize {
        self.vehicle_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges
            .iter()
            .filter(|(a, b)| *a == v || *b == v)
            .count()
    }
}

/// Build the conflict graph from world poses: edge {i, j} iff either ordered
/// membership query fires.
pub fn conflict_graph(states: &[DubinsState], tables: &PairwiseTables) -> Result<ConflictGraph> {
    if states.len() < 2 {
        return Err(Error::argument(
            "conflict graphs need at least two vehicles",
        ));
    }
    let mut edges = Vec::new();
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            if pcs_membership(tables, &states[i], &states[j]).member
                || pcs_membership(tables, &states[j], &states[i]).member
            {
                edges.push((i, j));
            }
        }
    }
    ConflictGraph::new(states.len(), edges)
}

/// Number of vehicles with at least one conflict edge.
pub fn conflict_size(g: &ConflictGraph) -> usize {
    (0..g.vehicle_count).filter(|v| g.degree(*v) > 0).count()
}

/// Automaton phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagePhase {
    Stage0,
    Stage1,
    Stage2,
    Stage3,
}

/// Phase plus the time it was entered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage {
    pub phase: StagePhase,
    pub entered_at: f64,
}

impl Stage {
    pub fn initial() -> Stage {
        Stage {
            phase: StagePhase::Stage0,
            entered_at: 0.0,
        }
    }
}

/// Times the transition function needs: the current instant and the active
/// resolution deadline, when one is running.
#[derive(Clone, Copy, Debug)]
pub struct StageClocks {
    pub now: f64,
    pub tr_deadline: Option<f64>,
}

/// Pure transition step of the staged automaton. `n_cap` is the largest
/// conflict size the N-vehicle layer handles directly. Stage 3 is terminal;
/// Stage 1 and Stage 2 persist until the resolution deadline and then
/// re-evaluate from the Stage 0 rules; a buffer entry before the deadline
/// escalates Stage 2 to Stage 3; conflict growth escalates Stage 1 to
/// Stage 2 immediately.
pub fn stage_transition(
    current: &Stage,
    g: &ConflictGraph,
    n_cap: usize,
    clocks: &StageClocks,
    buffer_hit: bool,
) -> Stage {
    let size = conflict_size(g);
    let by_size = |t: f64| {
        let phase = if size < n_cap {
            StagePhase::Stage0
        } else if size == n_cap {
            StagePhase::Stage1
        } else {
            StagePhase::Stage2
        };
        Stage {
            phase,
            entered_at: t,
        }
    };
    let keep_or = |next: Stage| {
        if next.phase == current.phase {
            *current
        } else {
            next
        }
    };
    let deadline_passed = clocks.tr_deadline.is_some_and(|d| clocks.now >= d - 1e-12);
    match current.phase {
        StagePhase::Stage3 => *current,
        StagePhase::Stage2 => {
            if buffer_hit && !deadline_passed {
                Stage {
                    phase: StagePhase::Stage3,
                    entered_at: clocks.now,
                }
            } else if deadline_passed {
                keep_or(by_size(clocks.now))
            } else {
                *current
            }
        }
        StagePhase::Stage1 => {
            if size > n_cap {
                Stage {
                    phase: StagePhase::Stage2,
                    entered_at: clocks.now,
                }
            } else if deadline_passed {
                keep_or(by_size(clocks.now))
            } else {
                *current
            }
        }
        StagePhase::Stage0 => keep_or(by_size(clocks.now)),
    }
}

/// Output of the pluggable N-vehicle resolution layer.
#[derive(Clone, Debug)]
pub struct NAvoidanceResult {
    /// Time by which the conflict size among the handled set dropped.
    pub tr: f64,
    /// Sampled paths of the handled vehicles over [0, Tr], one row per input.
    pub trajectories: TrajectorySet,
}

/// Hard cap on the baseline resolution horizon.
pub const HANDLE_N_CAP: f64 = 60.0;

/// Baseline N-vehicle resolution: priority by index. Each vehicle applies the
/// pairwise avoid policy against the single lowest-index higher-priority
/// vehicle whose conflict set contains it, and pursues its goal otherwise.
/// The rollout stops the first time the conflict size drops by at least one.
/// With no initial conflict the result is the documented degenerate case:
/// one straight step, Tr = dt.
pub fn handle_n(
    states: &[DubinsState],
    goals: &[[f64; 2]],
    tables: &PairwiseTables,
    params: &DubinsParams,
    dt: f64,
) -> Result<NAvoidanceResult> {
    if states.len() < 2 {
        return Err(Error::argument(
            "the N-vehicle layer needs at least two vehicles",
        ));
    }
    if goals.len() != states.len() {
        return Err(Error::argument("one goal per vehicle"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::argument("dt must be positive"));
    }
    let initial_size = conflict_size(&conflict_graph(states, tables)?);
    if initial_size == 0 {
        let paths: Vec<Vec<DubinsState>> = states
            .iter()
            .map(|s| vec![*s, step_dubins(s, params, 0.0, dt)])
            .collect();
        return Ok(NAvoidanceResult {
            tr: dt,
            trajectories: TrajectorySet::new(vec![0.0, dt], paths)?,
        });
    }

    let mut current: Vec<DubinsState> = states.to_vec();
    let mut times = vec![0.0];
    let mut paths: Vec<Vec<DubinsState>> = current.iter().map(|s| vec![*s]).collect();
    let max_steps = (HANDLE_N_CAP / dt).ceil() as usize;
    for step in 1..=max_steps {
        let controls: Vec<Control> = current
            .iter()
            .enumerate()
            .map(|(i, s)| priority_control(i, s, &current, &goals[i], tables, params))
            .collect::<Result<_>>()?;
        for (s, u) in current.iter_mut().zip(&controls) {
            *s = step_dubins(s, params, *u, dt);
        }
        let t = step as f64 * dt;
        times.push(t);
        for (p, s) in paths.iter_mut().zip(&current) {
            p.push(*s);
        }
        let size = conflict_size(&conflict_graph(&current, tables)?);
        if size + 1 <= initial_size {
            return Ok(NAvoidanceResult {
                tr: t,
                trajectories: TrajectorySet::new(times, paths)?,
            });
        }
    }
    Err(Error::protocol(format!(
        "baseline resolution exceeded the {HANDLE_N_CAP} s cap (conflict size stuck at {initial_size})"
    )))
}

/// The baseline per-vehicle policy: avoid the lowest-index higher-priority
/// vehicle whose conflict set contains us, else pursue the goal.
fn priority_control(
    i: usize,
    s: &DubinsState,
    all: &[DubinsState],
    goal: &[f64; 2],
    tables: &PairwiseTables,
    params: &DubinsParams,
) -> Result<Control> {
    for (j, other) in all.iter().enumerate().take(i) {
        if j == i {
            continue;
        }
        if pcs_membership(tables, s, other).member {
            let rel = relative_state_of(s, other);
            let g = tables.v_pc.gradient(&[rel.x, rel.y, rel.theta])?;
            return Ok(opt_control_pc(&rel, &[g[0], g[1], g[2]], params));
        }
    }
    Ok(goal_controller(s, goal, params))
}

/// Guarantee class attached to an outsider assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guarantee {
    /// The outsider's forward reach never meets the unsafe region.
    FrsClear,
    /// The outsider's start pose lies outside the minimal backward reach.
    BrsMinusClear,
    /// Best effort only.
    Unguaranteed,
}

/// Everything the outsider needs to steer itself over [0, Tr].
#[derive(Clone)]
pub struct OutsiderAssignment {
    pub outsider_index: usize,
    pub tr: f64,
    /// Paths of the N handled vehicles, rows matching `handled`.
    pub n_trajectories: TrajectorySet,
    /// Original indices of the handled vehicles, ascending.
    pub handled: Vec<usize>,
    pub sets: OutsiderSets,
    pub guarantee: Guarantee,
    pub outsider_goal: [f64; 2],
    pub params: DubinsParams,
}

/// Scenario-level inputs of outsider selection.
pub struct OutsiderContext<'a> {
    pub outsider_grid: Arc<Grid>,
    /// Origin-centered forward reach table, mapped per candidate pose.
    pub origin_frs: &'a TimeIndexedValueFunction,
    /// Trajectory samples per stored set frame.
    pub frame_stride: usize,
    /// Simulation step used by the baseline resolution layer.
    pub dt: f64,
    pub solve_cfg: SolveConfig,
}

/// Minimum-degree vehicles in ascending index order.
pub fn min_degree_candidates(g: &ConflictGraph) -> Vec<usize> {
    let min = (0..g.vehicle_count())
        .map(|v| g.degree(v))
        .min()
        .unwrap_or(0);
    (0..g.vehicle_count())
        .filter(|v| g.degree(*v) == min)
        .collect()
}

/// Designate the outsider among N+1 conflicting vehicles. Candidates are the
/// minimum-degree vehicles in index order; each is scored by running the
/// N-vehicle layer on the rest, then accepted with the strongest guarantee
/// that holds: forward reach missing the unsafe region, else start pose
/// outside the minimal backward reach by more than one cell. If no candidate
/// earns a guarantee, the first one whose resolution succeeded is returned
/// unguaranteed; if the resolution layer fails for all candidates the
/// protocol is stuck.
pub fn pick_outsider(
    states: &[DubinsState],
    goals: &[[f64; 2]],
    tables: &PairwiseTables,
    params: &DubinsParams,
    ctx: &OutsiderContext,
) -> Result<OutsiderAssignment> {
    if states.len() < 3 {
        return Err(Error::argument(
            "outsider selection needs at least three vehicles",
        ));
    }
    if goals.len() != states.len() {
        return Err(Error::argument("one goal per vehicle"));
    }
    let g = conflict_graph(states, tables)?;
    let candidates = min_degree_candidates(&g);
    let mut fallback: Option<OutsiderAssignment> = None;
    for &c in &candidates {
        let rest_states: Vec<DubinsState> = states
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != c)
            .map(|(_, s)| *s)
            .collect();
        let rest_goals: Vec<[f64; 2]> = goals
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != c)
            .map(|(_, g)| *g)
            .collect();
        let handled: Vec<usize> = (0..states.len()).filter(|i| *i != c).collect();
        let res = match handle_n(&rest_states, &rest_goals, tables, params, ctx.dt) {
            Ok(r) => r,
            Err(Error::Protocol(_)) => continue,
            Err(e) => return Err(e),
        };
        let our = compute_our(
            tables,
            &res.trajectories,
            &ctx.outsider_grid,
            ctx.frame_stride,
        )?;
        let frs = resample_frs(
            ctx.origin_frs,
            params,
            &states[c],
            &ctx.outsider_grid,
            our.times(),
        )?;
        if frs_intersects_our(&frs, &our)?.is_none() {
            let sets = OutsiderSets::new(our, None, frs, res.tr)?;
            return Ok(OutsiderAssignment {
                outsider_index: c,
                tr: res.tr,
                n_trajectories: res.trajectories,
                handled,
                sets,
                guarantee: Guarantee::FrsClear,
                outsider_goal: goals[c],
                params: *params,
            });
        }
        let brs = compute_brs_minus(
            &our,
            &res.trajectories,
            tables,
            params,
            res.tr,
            &ctx.solve_cfg,
        )?;
        let eps_cell = ctx.outsider_grid.dx(0);
        let v0 = brs.frames()[0]
            .interpolate(&states[c].coords())
            .unwrap_or(f64::INFINITY);
        let sets = OutsiderSets::new(our, Some(brs), frs, res.tr)?;
        let assignment = OutsiderAssignment {
            outsider_index: c,
            tr: res.tr,
            n_trajectories: res.trajectories,
            handled,
            sets,
            guarantee: Guarantee::BrsMinusClear,
            outsider_goal: goals[c],
            params: *params,
        };
        if v0 > eps_cell {
            return Ok(assignment);
        }
        if fallback.is_none() {
            fallback = Some(OutsiderAssignment {
                guarantee: Guarantee::Unguaranteed,
                ..assignment
            });
        }
    }
    fallback.ok_or_else(|| {
        Error::protocol("no outsider candidate admits a feasible N-vehicle resolution")
    })
}

/// The avoid-the-conflicting-vehicle control branch: against the conflicting
/// vehicle with the lowest conflict value when there is one, goal pursuit
/// otherwise.
fn avoid_or_goal(
    a: &OutsiderAssignment,
    x_o: &DubinsState,
    t: f64,
    tables: &PairwiseTables,
) -> Result<Control> {
    let mut best: Option<(f64, usize)> = None;
    for row in 0..a.handled.len() {
        let s = a.n_trajectories.state_at(row, t);
        let q = pcs_membership(tables, x_o, &s);
        if q.member && best.is_none_or(|(v, _)| q.value < v) {
            best = Some((q.value, row));
        }
    }
    match best {
        None => Ok(goal_controller(x_o, &a.outsider_goal, &a.params)),
        Some((_, row)) => {
            let s = a.n_trajectories.state_at(row, t);
            let rel = relative_state_of(x_o, &s);
            let g = tables.v_pc.gradient(&[rel.x, rel.y, rel.theta])?;
            Ok(opt_control_pc(&rel, &[g[0], g[1], g[2]], &a.params))
        }
    }
}

/// Outsider steering law over [0, Tr], switching on the guarantee class.
/// With a forward-reach guarantee the avoid/goal branch suffices. With a
/// backward-reach guarantee the boundary band of the minimal backward reach
/// (half a cell in value units) triggers the worst-case evasion control along
/// its gradient; elsewhere the avoid/goal branch applies. Best effort uses
/// the avoid/goal branch alone.
pub fn outsider_control(
    a: &OutsiderAssignment,
    x_o: &DubinsState,
    t: f64,
    tables: &PairwiseTables,
) -> Result<Control> {
    if t < -1e-9 || t > a.tr + 1e-9 {
        return Err(Error::argument(format!(
            "control query at t = {t} outside [0, {}]",
            a.tr
        )));
    }
    match a.guarantee {
        Guarantee::FrsClear | Guarantee::Unguaranteed => avoid_or_goal(a, x_o, t, tables),
        Guarantee::BrsMinusClear => {
            let brs = a.sets.brs_minus.as_ref().ok_or_else(|| {
                Error::argument("backward-reach guarantee without a stored table")
            })?;
            let frame = &brs.frames()[brs.nearest_index(t)];
            let coords = x_o.coords();
            let v = frame.interpolate(&coords).unwrap_or(f64::INFINITY);
            let delta = 0.5 * brs.grid().dx(0);
            if v.abs() <= delta {
                let g = frame.gradient(&coords)?;
                Ok(opt_control_free(&[g[0], g[1], g[2]], &a.params))
            } else {
                avoid_or_goal(a, x_o, t, tables)
            }
        }
    }
}

/// All ordered pairs whose relative state sits inside the grace buffer.
pub fn buffer_monitor(states: &[DubinsState], tables: &PairwiseTables) -> Vec<(usize, usize)> {
    let mut hits = Vec::new();
    for i in 0..states.len() {
        for j in 0..states.len() {
            if i != j && tables.exit_value(&states[i], &states[j]) <= 0.0 {
                hits.push((i, j));
            }
        }
    }
    hits
}

/// One line of the run log: what happened and when.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Logged record types; serialized as `{"time": …, "type": …, "payload": …}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    Stage {
        stage: StagePhase,
    },
    ConflictEdge {
        i: usize,
        j: usize,
        present: bool,
    },
    OutsiderClaim {
        vehicle: usize,
        guarantee: Guarantee,
    },
    BufferHit {
        i: usize,
        j: usize,
    },
    Removal {
        vehicle: usize,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::wrap_angle;
    use crate::grid::{DimSpec, ValueFunction};
    use crate::reach_sets::{compute_frs_origin, compute_pairwise_tables};
    use std::sync::OnceLock;

    const P: DubinsParams = DubinsParams {
        speed: 1.0,
        max_turn_rate: 1.0,
    };

    fn rel_grid() -> Arc<Grid> {
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

    fn tables() -> &'static PairwiseTables {
        static T: OnceLock<PairwiseTables> = OnceLock::new();
        T.get_or_init(|| {
            let cfg = SolveConfig {
                max_steps: 4000,
                ..SolveConfig::default()
            };
            compute_pairwise_tables(&rel_grid(), &P, 1.5, 1.0, 0.8, &cfg).unwrap()
        })
    }

    fn outsider_grid() -> Arc<Grid> {
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

    fn origin_frs() -> &'static TimeIndexedValueFunction {
        static F: OnceLock<TimeIndexedValueFunction> = OnceLock::new();
        F.get_or_init(|| {
            let pi = std::f64::consts::PI;
            let g = Grid::new(vec![
                DimSpec {
                    min: -3.0,
                    max: 3.0,
                    nodes: 25,
                    periodic: false,
                },
                DimSpec {
                    min: -3.0,
                    max: 3.0,
                    nodes: 25,
                    periodic: false,
                },
                DimSpec {
                    min: -pi,
                    max: pi,
                    nodes: 13,
                    periodic: true,
                },
            ])
            .unwrap();
            compute_frs_origin(&g, &P, 1.5, &SolveConfig::default()).unwrap()
        })
    }

    /// Constant-value tables: every pose pair is always in conflict. Useful
    /// for forcing unresolvable scenarios.
    fn always_conflicting() -> PairwiseTables {
        let g = rel_grid();
        PairwiseTables::from_parts(
            ValueFunction::new(g.clone(), vec![-1.0; g.len()]).unwrap(),
            ValueFunction::new(g.clone(), vec![1.0; g.len()]).unwrap(),
            0.8,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn conflict_graph_matches_membership_double_loop() {
        let t = tables();
        let states = [
            DubinsState::new(-1.0, 0.0, 0.0),
            DubinsState::new(1.0, 0.0, std::f64::consts::PI),
            DubinsState::new(400.0, 0.0, 0.0),
            DubinsState::new(0.3, 0.4, 1.0),
        ];
        let g = conflict_graph(&states, t).unwrap();
        for i in 0..states.len() {
            for j in 0..states.len() {
                if i < j {
                    let expect = pcs_membership(t, &states[i], &states[j]).member
                        || pcs_membership(t, &states[j], &states[i]).member;
                    assert_eq!(g.has_edge(i, j), expect, "edge ({i}, {j})");
                }
            }
        }
        // The far vehicle is isolated.
        assert_eq!(g.degree(2), 0);
    }

    #[test]
    fn conflict_graph_trivial_cases() {
        let t = tables();
        let distant: Vec<DubinsState> = (0..4)
            .map(|i| DubinsState::new(300.0 * i as f64, 0.0, 0.0))
            .collect();
        let g = conflict_graph(&distant, t).unwrap();
        assert_eq!(conflict_size(&g), 0);

        let mut states = distant.clone();
        states[1] = DubinsState::new(300.0, 1e-6, 0.0);
        states[2] = DubinsState::new(300.0, 0.0, 0.1);
        // vehicles 1 and 2 nearly coincident, 0 and 3 far away
        let g = conflict_graph(&states, t).unwrap();
        assert!(g.has_edge(1, 2));
        assert_eq!(conflict_size(&g), 2);
    }

    #[test]
    fn conflict_size_counts_touched_nodes() {
        let empty = ConflictGraph::new(4, []).unwrap();
        assert_eq!(conflict_size(&empty), 0);
        let triangle = ConflictGraph::new(4, [(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(conflict_size(&triangle), 3);
        let star = ConflictGraph::new(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        assert_eq!(conflict_size(&star), 4);
        assert!(ConflictGraph::new(2, [(0, 0)]).is_err());
        assert!(ConflictGraph::new(2, [(0, 5)]).is_err());
    }

    #[test]
    fn conflict_size_is_label_invariant() {
        let t = tables();
        let states = [
            DubinsState::new(-1.0, 0.0, 0.0),
            DubinsState::new(1.0, 0.0, std::f64::consts::PI),
            DubinsState::new(0.0, 1.0, -1.0),
        ];
        let base = conflict_size(&conflict_graph(&states, t).unwrap());
        let perm = [states[2], states[0], states[1]];
        assert_eq!(base, conflict_size(&conflict_graph(&perm, t).unwrap()));
    }

    #[test]
    fn stage_rules_follow_the_automaton() {
        let g2 = ConflictGraph::new(4, [(0, 1), (1, 2)]).unwrap(); // size 3
        let g_small = ConflictGraph::new(4, [(0, 1)]).unwrap(); // size 2
        let g_big = ConflictGraph::new(4, [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap(); // size 4
        let t0 = Stage::initial();
        let clocks = |now, dl| StageClocks {
            now,
            tr_deadline: dl,
        };

        // Size below the cap stays in Stage 0; at the cap enters Stage 1.
        assert_eq!(
            stage_transition(&t0, &g_small, 3, &clocks(0.0, None), false).phase,
            StagePhase::Stage0
        );
        let s1 = stage_transition(&t0, &g2, 3, &clocks(0.0, None), false);
        assert_eq!(s1.phase, StagePhase::Stage1);

        // Stage 1 persists before the deadline even if conflicts resolve.
        let hold = stage_transition(&s1, &g_small, 3, &clocks(1.0, Some(5.0)), false);
        assert_eq!(hold, s1, "early resolution does not leave Stage 1");
        // Growth escalates immediately.
        let s2 = stage_transition(&s1, &g_big, 3, &clocks(2.0, Some(5.0)), false);
        assert_eq!(s2.phase, StagePhase::Stage2);
        // Buffer entry before the deadline escalates to Stage 3.
        let s3 = stage_transition(&s2, &g_big, 3, &clocks(3.0, Some(5.0)), true);
        assert_eq!(s3.phase, StagePhase::Stage3);
        // Stage 3 is terminal.
        assert_eq!(
            stage_transition(&s3, &g_small, 3, &clocks(9.0, None), false).phase,
            StagePhase::Stage3
        );
        // At the deadline both resolution stages re-evaluate by size.
        assert_eq!(
            stage_transition(&s1, &g_small, 3, &clocks(5.0, Some(5.0)), false).phase,
            StagePhase::Stage0
        );
        assert_eq!(
            stage_transition(&s2, &g_big, 3, &clocks(5.0, Some(5.0)), false).phase,
            StagePhase::Stage2
        );
        // Direct Stage 0 to Stage 2 jump when the size overshoots in one step.
        assert_eq!(
            stage_transition(&t0, &g_big, 3, &clocks(0.0, None), false).phase,
            StagePhase::Stage2
        );
        // Replay determinism.
        let a = stage_transition(&s1, &g_big, 3, &clocks(2.0, Some(5.0)), false);
        let b = stage_transition(&s1, &g_big, 3, &clocks(2.0, Some(5.0)), false);
        assert_eq!(a, b);
    }

    #[test]
    fn no_conflict_resolution_degenerates_to_one_straight_step() {
        let t = tables();
        let states = [
            DubinsState::new(0.0, 0.0, 0.0),
            DubinsState::new(500.0, 0.0, 1.0),
        ];
        let goals = [[10.0, 0.0], [510.0, 10.0]];
        let r = handle_n(&states, &goals, t, &P, 0.05).unwrap();
        assert_eq!(r.tr, 0.05);
        assert_eq!(r.trajectories.times().len(), 2);
        let end = r.trajectories.path(0)[1];
        assert!((end.x - 0.05).abs() < 1e-12, "straight step along +x");
        assert_eq!(end.theta, 0.0);
    }

    #[test]
    fn head_on_pair_resolves_with_separation_above_the_danger_radius() {
        let t = tables();
        // Find a head-on separation that is conflicting but not deep inside.
        let mut d = 5.0;
        let mut q = pcs_membership(
            t,
            &DubinsState::new(-d / 2.0, 0.0, 0.0),
            &DubinsState::new(d / 2.0, 0.0, std::f64::consts::PI),
        );
        while !(q.member && q.value <= 0.5 * t.k) && d > 1.0 {
            d -= 0.1;
            q = pcs_membership(
                t,
                &DubinsState::new(-d / 2.0, 0.0, 0.0),
                &DubinsState::new(d / 2.0, 0.0, std::f64::consts::PI),
            );
        }
        assert!(q.member, "no conflicting head-on separation found");
        let states = [
            DubinsState::new(-d / 2.0, 0.0, 0.0),
            DubinsState::new(d / 2.0, 0.0, std::f64::consts::PI),
        ];
        let goals = [[d / 2.0 + 5.0, 0.0], [-d / 2.0 - 5.0, 0.0]];
        let r = handle_n(&states, &goals, t, &P, 0.05).unwrap();
        assert!(r.tr > 0.05 && r.tr < HANDLE_N_CAP);
        let mut min_sep = f64::INFINITY;
        for k in 0..r.trajectories.times().len() {
            let a = r.trajectories.path(0)[k];
            let b = r.trajectories.path(1)[k];
            min_sep = min_sep.min(((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt());
        }
        assert!(
            min_sep > 1.5,
            "planar separation dipped to {min_sep} (danger radius 1.5)"
        );
    }

    #[test]
    fn resolution_paths_are_dynamically_feasible() {
        let t = tables();
        let states = [
            DubinsState::new(-1.6, 0.1, 0.0),
            DubinsState::new(1.6, -0.1, std::f64::consts::PI),
            DubinsState::new(0.0, 2.0, -std::f64::consts::FRAC_PI_2),
        ];
        let goals = [[5.0, 0.0], [-5.0, 0.0], [0.0, -5.0]];
        let dt = 0.05;
        let r = handle_n(&states, &goals, t, &P, dt).unwrap();
        for v in 0..3 {
            let path = r.trajectories.path(v);
            for w in path.windows(2) {
                let omega = wrap_angle(w[1].theta - w[0].theta) / dt;
                assert!(
                    omega.abs() <= P.max_turn_rate + 1e-9,
                    "turn rate {omega} beyond the limit"
                );
                let predicted = step_dubins(&w[0], &P, omega, dt);
                let err = ((predicted.x - w[1].x).powi(2) + (predicted.y - w[1].y).powi(2)).sqrt();
                assert!(err <= 10.0 * dt * dt, "position off by {err}");
            }
        }
    }

    #[test]
    fn unresolvable_conflicts_hit_the_cap() {
        let t = always_conflicting();
        let states = [
            DubinsState::new(0.0, 0.0, 0.0),
            DubinsState::new(1.0, 0.0, 0.0),
        ];
        let goals = [[5.0, 0.0], [6.0, 0.0]];
        let r = handle_n(&states, &goals, &t, &P, 0.5);
        assert!(matches!(r, Err(Error::Protocol(_))));
    }

    #[test]
    fn buffer_monitor_matches_brute_force_and_reports_ordered_pairs() {
        let t = tables();
        let states = [
            DubinsState::new(0.0, 0.0, 0.0),
            DubinsState::new(0.4, 0.0, 0.0),
            DubinsState::new(200.0, 0.0, 0.0),
        ];
        let hits = buffer_monitor(&states, t);
        // Near-coincident pair: both ordered pairs fire.
        assert!(hits.contains(&(0, 1)));
        assert!(hits.contains(&(1, 0)));
        assert!(hits.iter().all(|(i, j)| *i != 2 && *j != 2));
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let expect = t.exit_value(&states[i], &states[j]) <= 0.0;
                    assert_eq!(hits.contains(&(i, j)), expect);
                }
            }
        }

        let far = [
            DubinsState::new(0.0, 0.0, 0.0),
            DubinsState::new(500.0, 0.0, 0.0),
        ];
        assert!(buffer_monitor(&far, t).is_empty());
    }

    fn triangle_scenario() -> ([DubinsState; 3], [[f64; 2]; 3]) {
        let pi = std::f64::consts::PI;
        let states = [
            DubinsState::new(-1.4, -0.3, 0.0),
            DubinsState::new(1.4, 0.3, pi),
            DubinsState::new(0.0, 1.8, -pi / 2.0),
        ];
        let goals = [[4.0, 0.0], [-4.0, 0.0], [0.0, -4.0]];
        (states, goals)
    }

    #[test]
    fn outsider_selection_is_deterministic_and_honors_the_candidate_set() {
        let t = tables();
        let (states, goals) = triangle_scenario();
        let g = conflict_graph(&states, t).unwrap();
        assert!(conflict_size(&g) >= 2, "fixture must start conflicting");
        let ctx = OutsiderContext {
            outsider_grid: outsider_grid(),
            origin_frs: origin_frs(),
            frame_stride: 5,
            dt: 0.05,
            solve_cfg: SolveConfig::default(),
        };
        let a = pick_outsider(&states, &goals, t, &P, &ctx).unwrap();
        let b = pick_outsider(&states, &goals, t, &P, &ctx).unwrap();
        assert_eq!(a.outsider_index, b.outsider_index);
        assert_eq!(a.guarantee, b.guarantee);
        assert!(!a.handled.contains(&a.outsider_index));
        assert_eq!(a.handled.len(), 2);
        let candidates = min_degree_candidates(&g);
        assert!(candidates.contains(&a.outsider_index) || a.guarantee == Guarantee::Unguaranteed);
        if a.guarantee == Guarantee::FrsClear {
            assert!(frs_intersects_our(&a.sets.frs, &a.sets.our)
                .unwrap()
                .is_none());
            assert!(a.sets.brs_minus.is_none());
        }
        if a.guarantee == Guarantee::BrsMinusClear {
            assert!(a.sets.brs_minus.is_some());
        }
    }

    #[test]
    fn outsider_control_branches() {
        let t = tables();
        let (states, goals) = triangle_scenario();
        let ctx = OutsiderContext {
            outsider_grid: outsider_grid(),
            origin_frs: origin_frs(),
            frame_stride: 5,
            dt: 0.05,
            solve_cfg: SolveConfig::default(),
        };
        let a = pick_outsider(&states, &goals, t, &P, &ctx).unwrap();

        // Far from everything: pure goal pursuit.
        let far = DubinsState::new(-4.5, -4.5, 0.0);
        let u = outsider_control(&a, &far, 0.0, t).unwrap();
        assert_eq!(u, goal_controller(&far, &a.outsider_goal, &P));

        // Inside exactly one conflict set: the pairwise avoid control.
        let row0 = a.n_trajectories.state_at(0, 0.0);
        let probe = DubinsState::new(row0.x + 0.4, row0.y + 0.2, row0.theta);
        let q = pcs_membership(t, &probe, &row0);
        if q.member {
            let others: Vec<bool> = (1..a.handled.len())
                .map(|r| pcs_membership(t, &probe, &a.n_trajectories.state_at(r, 0.0)).member)
                .collect();
            if others.iter().all(|m| !m) && a.guarantee != Guarantee::BrsMinusClear {
                let rel = relative_state_of(&probe, &row0);
                let g = t.v_pc.gradient(&[rel.x, rel.y, rel.theta]).unwrap();
                let expect = opt_control_pc(&rel, &[g[0], g[1], g[2]], &P);
                assert_eq!(outsider_control(&a, &probe, 0.0, t).unwrap(), expect);
            }
        }

        // Out-of-window query errors.
        assert!(outsider_control(&a, &far, a.tr + 1.0, t).is_err());
    }

    #[test]
    fn boundary_band_triggers_the_evasion_law() {
        let t = tables();
        let (states, goals) = triangle_scenario();
        // Hand-build a backward-reach table: a static disk of radius 2 at the
        // origin, so the band and gradient are known exactly.
        let og = outsider_grid();
        let times: Vec<f64> = vec![0.0, 1.0];
        let disk = crate::grid::make_signed_distance_disk(&og, [0.0, 0.0], 2.0).unwrap();
        let brs =
            TimeIndexedValueFunction::new(times.clone(), vec![disk.clone(), disk.clone()]).unwrap();
        let ones = ValueFunction::new(og.clone(), vec![1.0; og.len()]).unwrap();
        let our =
            TimeIndexedValueFunction::new(times.clone(), vec![ones.clone(), ones.clone()]).unwrap();
        let frs = TimeIndexedValueFunction::new(times, vec![ones.clone(), ones]).unwrap();
        let sets = OutsiderSets::new(our, Some(brs), frs, 1.0).unwrap();
        let a = OutsiderAssignment {
            outsider_index: 2,
            tr: 1.0,
            n_trajectories: TrajectorySet::new(
                vec![0.0, 1.0],
                vec![vec![states[0]; 2], vec![states[1]; 2]],
            )
            .unwrap(),
            handled: vec![0, 1],
            sets,
            guarantee: Guarantee::BrsMinusClear,
            outsider_goal: goals[2],
            params: P,
        };
        // Pose on the disk boundary pointing outward: inside the band.
        let pose = DubinsState::new(2.0, 0.0, 0.0);
        let grad = a.sets.brs_minus.as_ref().unwrap().frames()[0]
            .gradient(&pose.coords())
            .unwrap();
        let expect = opt_control_free(&[grad[0], grad[1], grad[2]], &P);
        assert_eq!(outsider_control(&a, &pose, 0.0, t).unwrap(), expect);

        // Far outside the band: falls through to avoid/goal.
        let outside = DubinsState::new(4.5, 4.5, 1.0);
        let u = outsider_control(&a, &outside, 0.0, t).unwrap();
        assert_eq!(u, goal_controller(&outside, &a.outsider_goal, &P));
    }

    #[test]
    fn events_serialize_with_the_documented_layout() {
        let e = Event {
            time: 1.25,
            kind: EventKind::OutsiderClaim {
                vehicle: 2,
                guarantee: Guarantee::FrsClear,
            },
        };
        let line = serde_json::to_string(&e).unwrap();
        assert_eq!(
            line,
            r#"{"time":1.25,"type":"outsider_claim","payload":{"vehicle":2,"guarantee":"frs_clear"}}"#
        );
        let back: Event = serde_json::from_str(&line).unwrap();
        assert_eq!(back, e);

        let s = Event {
            time: 0.0,
            kind: EventKind::Stage {
                stage: StagePhase::Stage2,
            },
        };
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"time":0.0,"type":"stage","payload":{"stage":"stage2"}}"#
        );
    }
}
