//! Steady flow in a branching tree: mass conservation plus Bernoulli
//! relations with laminar friction loss, solved by Newton's method.
//!
//! Unknowns are the static pressure at every non-terminal node and the
//! velocity of every edge except the root edge, whose inlet velocity is
//! prescribed; terminal pressures are boundary data. Each edge contributes
//! one Bernoulli residual between its endpoint states (a node's kinetic term
//! uses its parent-edge velocity, the root uses the inlet velocity), so
//! summing the relations along a root-terminal path telescopes to the
//! classical inlet/outlet Bernoulli balance with the path-summed loss.
//!
//! Any consistent unit system works; the pipeline supplies mm / s / Pa with
//! density in Pa*s^2/mm^2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::solve_dense;
use crate::tree::{NodeKind, VascularTree};

/// Fluid density and dynamic viscosity in a consistent unit system.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidProps {
    pub density: f64,
    pub viscosity: f64,
}

impl FluidProps {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0) || !(self.viscosity > 0.0) {
            return Err(Error::Flow(format!(
                "density and viscosity must be > 0 (got {} / {})",
                self.density, self.viscosity
            )));
        }
        Ok(())
    }
}

/// Solved (or trial) flow state over a tree.
#[derive(Debug, Clone)]
pub struct TreeFlowState {
    /// Velocity per edge, positive from parent to child.
    pub edge_velocity: Vec<f64>,
    /// Static pressure per node; terminal entries hold the boundary data.
    pub node_pressure: Vec<f64>,
    /// Prescribed root-edge velocity.
    pub root_velocity: f64,
    /// Newton iterations spent (0 for hand-built states).
    pub iterations: usize,
}

impl TreeFlowState {
    /// Volumetric flow through an edge: `A w` with `A = pi r^2`.
    pub fn edge_flow(&self, tree: &VascularTree, edge: usize) -> f64 {
        cross_section(tree, edge) * self.edge_velocity[edge]
    }
}

fn cross_section(tree: &VascularTree, edge: usize) -> f64 {
    let r = tree.edges[edge].radius;
    std::f64::consts::PI * r * r
}

/// Laminar friction loss of a branch: the textbook form
/// `1/2 rho w^2 (L/D) (64/Re)` with `Re = rho w D / mu` reduces to
/// `32 mu L w / D^2`, which stays regular at `w = 0` and is what Newton
/// linearizes. The sign follows the flow direction.
pub fn branch_loss(w: f64, length: f64, diameter: f64, props: &FluidProps) -> f64 {
    32.0 * props.viscosity * length * w / (diameter * diameter)
}

fn check_tree(tree: &VascularTree) -> Result<usize> {
    tree.validate()?;
    let children = tree.children();
    let root_edges = &children[tree.root];
    if root_edges.len() != 1 {
        return Err(Error::Flow(format!(
            "flow solve needs exactly one root edge, found {}",
            root_edges.len()
        )));
    }
    for (ei, e) in tree.edges.iter().enumerate() {
        if !(e.radius > 0.0) {
            return Err(Error::Flow(format!("edge {ei} has non-positive radius")));
        }
    }
    Ok(root_edges[0])
}

/// Kinetic reference velocity of a node: its parent-edge velocity, or the
/// inlet velocity at the root.
fn node_velocity(tree: &VascularTree, state: &TreeFlowState, parents: &[Option<usize>], node: usize) -> f64 {
    match parents[node] {
        Some(pe) => state.edge_velocity[pe],
        None => state.root_velocity,
    }
}

/// Residual vector: one Bernoulli relation per edge, then one mass balance
/// per internal (non-root, non-terminal) node.
pub fn tree_residual(
    tree: &VascularTree,
    state: &TreeFlowState,
    props: &FluidProps,
) -> Result<Vec<f64>> {
    check_tree(tree)?;
    props.validate()?;
    let parents = tree.parent_edge();
    let children = tree.children();
    let mut residual = Vec::with_capacity(tree.edges.len() + tree.nodes.len());

    for (ei, e) in tree.edges.iter().enumerate() {
        let w = state.edge_velocity[ei];
        let w_up = node_velocity(tree, state, &parents, e.parent);
        let loss = branch_loss(
            w,
            tree.edge_length(ei),
            2.0 * e.radius,
            props,
        );
        residual.push(
            state.node_pressure[e.parent] + 0.5 * props.density * w_up * w_up
                - state.node_pressure[e.child]
                - 0.5 * props.density * w * w
                - loss,
        );
    }
    for n in 0..tree.nodes.len() {
        if n == tree.root || tree.nodes[n].kind == NodeKind::Terminal {
            continue;
        }
        let pe = parents[n].expect("non-root node has a parent");
        let inflow = cross_section(tree, pe) * state.edge_velocity[pe];
        let outflow: f64 = children[n]
            .iter()
            .map(|&ce| cross_section(tree, ce) * state.edge_velocity[ce])
            .sum();
        residual.push(inflow - outflow);
    }
    Ok(residual)
}

/// Unknown layout for the Newton system.
struct UnknownMap {
    /// Column of each node's pressure (terminals excluded).
    pressure_col: Vec<Option<usize>>,
    /// Column of each edge's velocity (root edge excluded).
    velocity_col: Vec<Option<usize>>,
    count: usize,
}

fn unknown_map(tree: &VascularTree, root_edge: usize) -> UnknownMap {
    let mut pressure_col = vec![None; tree.nodes.len()];
    let mut velocity_col = vec![None; tree.edges.len()];
    let mut count = 0;
    for n in 0..tree.nodes.len() {
        if tree.nodes[n].kind != NodeKind::Terminal {
            pressure_col[n] = Some(count);
            count += 1;
        }
    }
    for e in 0..tree.edges.len() {
        if e != root_edge {
            velocity_col[e] = Some(count);
            count += 1;
        }
    }
    UnknownMap {
        pressure_col,
        velocity_col,
        count,
    }
}

/// Analytic Jacobian in the same row order as [`tree_residual`].
fn jacobian(
    tree: &VascularTree,
    state: &TreeFlowState,
    props: &FluidProps,
    map: &UnknownMap,
) -> Vec<Vec<f64>> {
    let parents = tree.parent_edge();
    let children = tree.children();
    let mut rows = Vec::with_capacity(map.count);

    for (ei, e) in tree.edges.iter().enumerate() {
        let mut row = vec![0.0; map.count];
        if let Some(c) = map.pressure_col[e.parent] {
            row[c] = 1.0;
        }
        if let Some(c) = map.pressure_col[e.child] {
            row[c] = -1.0;
        }
        if let Some(c) = map.velocity_col[ei] {
            let w = state.edge_velocity[ei];
            let friction = 32.0 * props.viscosity * tree.edge_length(ei)
                / (2.0 * e.radius * 2.0 * e.radius);
            row[c] += -props.density * w - friction;
        }
        if let Some(pe) = parents[e.parent] {
            if let Some(c) = map.velocity_col[pe] {
                row[c] += props.density * state.edge_velocity[pe];
            }
        }
        rows.push(row);
    }
    for n in 0..tree.nodes.len() {
        if n == tree.root || tree.nodes[n].kind == NodeKind::Terminal {
            continue;
        }
        let mut row = vec![0.0; map.count];
        let pe = parents[n].unwrap();
        if let Some(c) = map.velocity_col[pe] {
            row[c] = cross_section(tree, pe);
        }
        for &ce in &children[n] {
            if let Some(c) = map.velocity_col[ce] {
                row[c] = -cross_section(tree, ce);
            }
        }
        rows.push(row);
    }
    rows
}

const NEWTON_MAX_ITERS: usize = 50;

fn describe_unknown(tree: &VascularTree, map: &UnknownMap, col: usize) -> String {
    for (n, &c) in map.pressure_col.iter().enumerate() {
        if c == Some(col) {
            return format!("pressure at node {n}");
        }
    }
    for (e, &c) in map.velocity_col.iter().enumerate() {
        if c == Some(col) {
            return format!(
                "velocity of edge {e} ({} -> {})",
                tree.edges[e].parent, tree.edges[e].child
            );
        }
    }
    format!("unknown column {col}")
}

/// Solve for the inlet pressure, interior pressures and branch velocities
/// given the inlet velocity `w0` and one pressure per terminal node.
pub fn solve_tree_flow(
    tree: &VascularTree,
    w0: f64,
    terminal_pressures: &BTreeMap<usize, f64>,
    props: &FluidProps,
) -> Result<TreeFlowState> {
    props.validate()?;
    let root_edge = check_tree(tree)?;
    if w0 < 0.0 {
        return Err(Error::Flow(format!("inlet velocity must be >= 0, got {w0}")));
    }
    let terminals = tree.terminal_ids();
    for &t in &terminals {
        if !terminal_pressures.contains_key(&t) {
            return Err(Error::Flow(format!("terminal node {t} has no pressure")));
        }
    }

    // Initial guess: flow-conserving equal split over subtree terminal
    // counts; pressures at the terminal mean.
    let order = tree.edges_topological()?;
    let children = tree.children();
    let mut subtree_terminals = vec![0usize; tree.edges.len()];
    for &ei in order.iter().rev() {
        let child = tree.edges[ei].child;
        subtree_terminals[ei] = if children[child].is_empty() {
            1
        } else {
            children[child].iter().map(|&ce| subtree_terminals[ce]).sum()
        };
    }
    let total_terminals = subtree_terminals[root_edge] as f64;
    let root_flow = cross_section(tree, root_edge) * w0;
    let p_mean = terminal_pressures.values().sum::<f64>() / terminals.len() as f64;

    let mut state = TreeFlowState {
        edge_velocity: (0..tree.edges.len())
            .map(|ei| {
                root_flow * subtree_terminals[ei] as f64
                    / (total_terminals * cross_section(tree, ei))
            })
            .collect(),
        node_pressure: vec![p_mean; tree.nodes.len()],
        root_velocity: w0,
        iterations: 0,
    };
    state.edge_velocity[root_edge] = w0;
    for (&t, &p) in terminal_pressures {
        state.node_pressure[t] = p;
    }

    let map = unknown_map(tree, root_edge);
    let tol = 1e-10 * (props.density * w0 * w0).max(1.0);
    for iter in 0..NEWTON_MAX_ITERS {
        let residual = tree_residual(tree, &state, props)?;
        let norm = residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        if norm < tol {
            state.iterations = iter;
            return Ok(state);
        }
        let jac = jacobian(tree, &state, props, &map);
        let rhs: Vec<f64> = residual.iter().map(|r| -r).collect();
        let delta = solve_dense(jac, rhs).map_err(|col| {
            Error::Flow(format!(
                "singular Jacobian at {}",
                describe_unknown(tree, &map, col)
            ))
        })?;
        for (n, &c) in map.pressure_col.iter().enumerate() {
            if let Some(c) = c {
                state.node_pressure[n] += delta[c];
            }
        }
        for (e, &c) in map.velocity_col.iter().enumerate() {
            if let Some(c) = c {
                state.edge_velocity[e] += delta[c];
            }
        }
    }
    Err(Error::Flow(format!(
        "Newton did not converge in {NEWTON_MAX_ITERS} iterations"
    )))
}

/// Plug-flow convection time to every terminal: the sum of `L / w` along the
/// root-terminal path. A non-positive velocity on the path makes the time
/// infinite, reported explicitly.
pub fn transit_times(tree: &VascularTree, state: &TreeFlowState) -> Result<BTreeMap<usize, f64>> {
    let parents = tree.parent_edge();
    let mut times = BTreeMap::new();
    for t in tree.terminal_ids() {
        let mut node = t;
        let mut time = 0.0;
        while let Some(pe) = parents[node] {
            let w = state.edge_velocity[pe];
            if w <= 0.0 {
                time = f64::INFINITY;
                break;
            }
            time += tree.edge_length(pe) / w;
            node = tree.edges[pe].parent;
        }
        times.insert(t, time);
    }
    Ok(times)
}

/// Telescoped Bernoulli defect for one terminal: inlet total head minus
/// outlet total head minus the path-summed losses. Zero at a converged
/// solution; exposed for verification.
pub fn telescoped_defect(
    tree: &VascularTree,
    state: &TreeFlowState,
    props: &FluidProps,
    terminal: usize,
) -> Result<f64> {
    let parents = tree.parent_edge();
    let mut node = terminal;
    let mut loss_sum = 0.0;
    let mut terminal_velocity = None;
    while let Some(pe) = parents[node] {
        let w = state.edge_velocity[pe];
        if terminal_velocity.is_none() {
            terminal_velocity = Some(w);
        }
        loss_sum += branch_loss(w, tree.edge_length(pe), 2.0 * tree.edges[pe].radius, props);
        node = tree.edges[pe].parent;
    }
    if node != tree.root {
        return Err(Error::Flow(format!("node {terminal} is not a terminal")));
    }
    let w_k = terminal_velocity.ok_or_else(|| Error::Flow("terminal is the root".into()))?;
    let w0 = state.root_velocity;
    Ok(
        0.5 * props.density * w0 * w0 + state.node_pressure[tree.root]
            - 0.5 * props.density * w_k * w_k
            - state.node_pressure[terminal]
            - loss_sum,
    )
}
