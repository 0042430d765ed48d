//! A fully resolved problem instance: coupling matrix, one Lagrangian table
//! per index, and the discretization parameters shared by the action, cycle
//! iteration and Aubry layers.

use crate::lagrangian::{
    BoxGrid, FenchelOptions, HamiltonianSpec, LagrangianError, LagrangianTable, TorusGrid,
};
use crate::markov::{CouplingError, CouplingMatrix};
use crate::stopping::StoppingOptions;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("coupling matrix has {coupling} indices but {specs} Hamiltonians were given")]
    IndexMismatch { coupling: usize, specs: usize },
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Lagrangian(#[from] LagrangianError),
    #[error("bad instance parameter: {0}")]
    BadParameter(String),
}

/// Discretization choices for building an instance.
#[derive(Debug, Clone)]
pub struct InstanceOptions {
    /// Position grid subdivisions per axis.
    pub x_subdivisions: usize,
    /// Velocity box half-width; `None` asks each Hamiltonian for a bound and
    /// takes the maximum.
    pub velocity_bound: Option<f64>,
    /// Velocity box subdivisions per axis.
    pub q_subdivisions: usize,
    pub fenchel: FenchelOptions,
    /// Dyadic level of the stopping-time grids: step `2^-level`.
    pub grid_level: u32,
    pub stopping: StoppingOptions,
    /// Base seed for all Monte Carlo work on this instance.
    pub seed: u64,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        InstanceOptions {
            x_subdivisions: 128,
            velocity_bound: None,
            q_subdivisions: 64,
            fenchel: FenchelOptions::default(),
            grid_level: 6,
            stopping: StoppingOptions::default(),
            seed: 0x5eed,
        }
    }
}

/// Coupled system ready for numerical experiments.
#[derive(Debug, Clone)]
pub struct SystemInstance {
    coupling: CouplingMatrix,
    hamiltonians: Vec<HamiltonianSpec>,
    tables: Vec<LagrangianTable>,
    grid_level: u32,
    stopping: StoppingOptions,
    seed: u64,
}

impl SystemInstance {
    pub fn build(
        coupling: CouplingMatrix,
        hamiltonians: &[HamiltonianSpec],
        dim: usize,
        options: &InstanceOptions,
    ) -> Result<Self, InstanceError> {
        if coupling.index_count() != hamiltonians.len() {
            return Err(InstanceError::IndexMismatch {
                coupling: coupling.index_count(),
                specs: hamiltonians.len(),
            });
        }
        if options.grid_level > 20 {
            return Err(InstanceError::BadParameter(format!(
                "grid level {} too fine",
                options.grid_level
            )));
        }
        let x_grid = TorusGrid::new(dim, options.x_subdivisions)?;
        let bound = match options.velocity_bound {
            Some(m) if m.is_finite() && m > 0.0 => m,
            Some(m) => {
                return Err(InstanceError::BadParameter(format!(
                    "velocity bound {m}"
                )))
            }
            None => {
                let probe = BoxGrid::new(dim, options.fenchel.momentum_radius, 64)?;
                hamiltonians
                    .iter()
                    .map(|h| h.suggest_velocity_bound(&x_grid, &probe))
                    .fold(1.0f64, f64::max)
            }
        };
        let q_box = BoxGrid::new(dim, bound, options.q_subdivisions)?;
        let tables = hamiltonians
            .iter()
            .map(|h| LagrangianTable::build(h, x_grid.clone(), q_box.clone(), &options.fenchel))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SystemInstance {
            coupling,
            hamiltonians: hamiltonians.to_vec(),
            tables,
            grid_level: options.grid_level,
            stopping: options.stopping.clone(),
            seed: options.seed,
        })
    }

    /// Two identical indices with the cosine well `V(x) = cos(2 pi x)` and
    /// the symmetric unit coupling. A standard analytically tractable case:
    /// the flat critical value is 1 and the projected Aubry set is `{1/2}`.
    pub fn two_index_cosine_well(options: &InstanceOptions) -> Result<Self, InstanceError> {
        let coupling = CouplingMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]])?;
        let spec = HamiltonianSpec::QuadraticMinusPotential {
            potential: crate::lagrangian::Potential::cosine_well(),
        };
        Self::build(coupling, &[spec.clone(), spec], 1, options)
    }

    pub fn coupling(&self) -> &CouplingMatrix {
        &self.coupling
    }

    pub fn index_count(&self) -> usize {
        self.coupling.index_count()
    }

    pub fn dim(&self) -> usize {
        self.tables[0].x_grid().dim()
    }

    pub fn table(&self, index: usize) -> &LagrangianTable {
        &self.tables[index]
    }

    /// Hamiltonian the table of one index was built from.
    pub fn hamiltonian(&self, index: usize) -> &HamiltonianSpec {
        &self.hamiltonians[index]
    }

    pub fn velocity_bound(&self) -> f64 {
        self.tables[0].velocity_box().radius()
    }

    pub fn grid_level(&self) -> u32 {
        self.grid_level
    }

    /// Step of the dyadic stopping-time grid.
    pub fn grid_step(&self) -> f64 {
        (0.5f64).powi(self.grid_level as i32)
    }

    pub fn stopping_options(&self) -> &StoppingOptions {
        &self.stopping
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Interpolated Lagrangian of one index.
    pub fn lagrangian(&self, index: usize, x: &[f64], q: &[f64]) -> f64 {
        self.tables[index].eval(x, q)
    }
}
