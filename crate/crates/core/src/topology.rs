//! Directed communication graph with per-edge formation offsets.
//!
//! Agents are indexed from 0 in the API. An edge `(from, to)` means agent
//! `to` receives information from agent `from`, so `from` belongs to the
//! neighbor set of `to`. Agents may additionally carry a static virtual
//! reference that behaves like one more neighbor with a constant state.

use nalgebra::DVector;

use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
    /// Desired relative state `x_to - x_from`.
    pub offset: DVector<f64>,
}

/// A constant pseudo-neighbor used to give an agent a goal.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualReference {
    pub state: DVector<f64>,
    /// Desired relative state `x_agent - state`.
    pub offset: DVector<f64>,
    pub weight: f64,
}

/// Where a neighbor's information comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Agent(usize),
    Reference,
}

/// One incoming link of an agent, real or virtual.
#[derive(Debug, Clone, PartialEq)]
pub struct Link<'a> {
    pub source: Source,
    pub weight: f64,
    pub offset: &'a DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    num_agents: usize,
    state_dim: usize,
    edges: Vec<Edge>,
    references: Vec<Option<VirtualReference>>,
}

impl Topology {
    pub fn new(num_agents: usize, state_dim: usize, mut edges: Vec<Edge>) -> Result<Self> {
        if num_agents == 0 {
            return Err(Error::domain("topology needs at least one agent"));
        }
        for e in &edges {
            if e.from >= num_agents || e.to >= num_agents {
                return Err(Error::domain(format!(
                    "edge ({}, {}) references an unknown agent",
                    e.from + 1,
                    e.to + 1
                )));
            }
            if e.from == e.to {
                return Err(Error::domain(format!("self-loop on agent {}", e.to + 1)));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::domain(format!(
                    "edge ({}, {}) has non-positive weight {}",
                    e.from + 1,
                    e.to + 1,
                    e.weight
                )));
            }
            ensure_dim("edge offset", e.offset.len(), state_dim)?;
        }
        edges.sort_by_key(|e| (e.to, e.from));
        if edges.windows(2).any(|w| w[0].to == w[1].to && w[0].from == w[1].from) {
            return Err(Error::domain("duplicate edge"));
        }
        Ok(Self { num_agents, state_dim, edges, references: vec![None; num_agents] })
    }

    pub fn with_reference(mut self, agent: usize, reference: VirtualReference) -> Result<Self> {
        self.check_agent(agent)?;
        ensure_dim("reference state", reference.state.len(), self.state_dim)?;
        ensure_dim("reference offset", reference.offset.len(), self.state_dim)?;
        if !(reference.weight > 0.0) {
            return Err(Error::domain("reference weight must be positive"));
        }
        self.references[agent] = Some(reference);
        Ok(self)
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn reference(&self, agent: usize) -> Option<&VirtualReference> {
        self.references.get(agent).and_then(Option::as_ref)
    }

    fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.num_agents {
            return Err(Error::domain(format!(
                "unknown agent {} (have {})",
                agent + 1,
                self.num_agents
            )));
        }
        Ok(())
    }

    /// Agents `j` with an edge `(j, i)`, ascending.
    pub fn neighbors(&self, agent: usize) -> Result<Vec<usize>> {
        self.check_agent(agent)?;
        Ok(self.edges.iter().filter(|e| e.to == agent).map(|e| e.from).collect())
    }

    pub fn offset(&self, agent: usize, neighbor: usize) -> Option<&DVector<f64>> {
        self.edges
            .iter()
            .find(|e| e.to == agent && e.from == neighbor)
            .map(|e| &e.offset)
    }

    /// Real neighbors in ascending order, followed by the virtual reference if any.
    pub fn links(&self, agent: usize) -> Result<Vec<Link<'_>>> {
        self.check_agent(agent)?;
        let mut links: Vec<Link<'_>> = self
            .edges
            .iter()
            .filter(|e| e.to == agent)
            .map(|e| Link { source: Source::Agent(e.from), weight: e.weight, offset: &e.offset })
            .collect();
        if let Some(r) = self.reference(agent) {
            links.push(Link { source: Source::Reference, weight: r.weight, offset: &r.offset });
        }
        Ok(links)
    }

    /// Largest `‖x_i - x_j - d_ij‖` over all edges and virtual references.
    pub fn max_formation_error(&self, states: &[DVector<f64>]) -> Result<f64> {
        ensure_dim("state list", states.len(), self.num_agents)?;
        let mut worst = 0.0_f64;
        for e in &self.edges {
            let y = formation_error(&states[e.to], &states[e.from], &e.offset)?;
            worst = worst.max(y.norm());
        }
        for (i, r) in self.references.iter().enumerate() {
            if let Some(r) = r {
                let y = formation_error(&states[i], &r.state, &r.offset)?;
                worst = worst.max(y.norm());
            }
        }
        Ok(worst)
    }
}

/// `x_i - x_j - d_ij`. Passing an estimated `x_j` gives the estimated error.
pub fn formation_error(
    x_i: &DVector<f64>,
    x_j: &DVector<f64>,
    d_ij: &DVector<f64>,
) -> Result<DVector<f64>> {
    ensure_dim("x_j", x_j.len(), x_i.len())?;
    ensure_dim("offset", d_ij.len(), x_i.len())?;
    Ok(x_i - x_j - d_ij)
}
