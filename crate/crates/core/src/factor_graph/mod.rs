//! Batch nonlinear least squares over poses and landmark positions.

mod factors;
mod linear;
mod marginals;
mod optimizer;
mod sparse;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::geometry::{Point2, Pose2};

pub(crate) use factors::{linearize_range_bearing, range_bearing_residual};
pub use factors::{
    numerical_jacobians, BetweenPose2Factor, Factor, JacobianBlock, LinearizedFactor,
    PriorPose2Factor, RangeBearingFactor, RangeBearingMeasurement,
};
pub use linear::{linearize, LinearSystem};
pub use marginals::{information_matrix, joint_marginal_covariance, MarginalSolver};
pub use optimizer::{optimize, OptStats, OptimizerConfig};
pub use sparse::SparseCholesky;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariableKind {
    Pose,
    Landmark,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableId {
    pub kind: VariableKind,
    pub index: usize,
}

impl VariableId {
    pub const fn pose(index: usize) -> Self {
        Self {
            kind: VariableKind::Pose,
            index,
        }
    }

    pub const fn landmark(index: usize) -> Self {
        Self {
            kind: VariableKind::Landmark,
            index,
        }
    }

    /// Tangent dimension of the variable.
    pub const fn dim(&self) -> usize {
        match self.kind {
            VariableKind::Pose => 3,
            VariableKind::Landmark => 2,
        }
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariableKind::Pose => write!(f, "x{}", self.index),
            VariableKind::Landmark => write!(f, "l{}", self.index),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variable {
    Pose(Pose2),
    Point(Point2),
}

/// Current estimate of every variable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Values {
    map: BTreeMap<VariableId, Variable>,
}

impl Values {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_pose(&mut self, index: usize, pose: Pose2) {
        self.map
            .insert(VariableId::pose(index), Variable::Pose(pose));
    }

    pub fn insert_point(&mut self, index: usize, point: Point2) {
        self.map
            .insert(VariableId::landmark(index), Variable::Point(point));
    }

    pub fn pose(&self, index: usize) -> Result<Pose2> {
        match self.map.get(&VariableId::pose(index)) {
            Some(Variable::Pose(p)) => Ok(*p),
            _ => Err(SlamError::MissingVariable(VariableId::pose(index))),
        }
    }

    pub fn point(&self, index: usize) -> Result<Point2> {
        match self.map.get(&VariableId::landmark(index)) {
            Some(Variable::Point(p)) => Ok(*p),
            _ => Err(SlamError::MissingVariable(VariableId::landmark(index))),
        }
    }

    pub fn contains(&self, id: &VariableId) -> bool {
        self.map.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VariableId> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VariableId, &Variable)> {
        self.map.iter()
    }

    /// Poses in index order.
    pub fn poses(&self) -> impl Iterator<Item = (usize, Pose2)> + '_ {
        self.map.iter().filter_map(|(k, v)| match v {
            Variable::Pose(p) => Some((k.index, *p)),
            Variable::Point(_) => None,
        })
    }

    /// Landmark positions in index order.
    pub fn points(&self) -> impl Iterator<Item = (usize, Point2)> + '_ {
        self.map.iter().filter_map(|(k, v)| match v {
            Variable::Point(p) => Some((k.index, *p)),
            Variable::Pose(_) => None,
        })
    }

    /// Applies a stacked tangent update laid out by `ordering`.
    pub fn retract(&self, ordering: &Ordering, delta: &DVector<f64>) -> Values {
        let mut out = self.clone();
        for (id, value) in out.map.iter_mut() {
            let Some(offset) = ordering.offset(id) else {
                continue;
            };
            match value {
                Variable::Pose(p) => {
                    let d = Vector3::new(delta[offset], delta[offset + 1], delta[offset + 2]);
                    *p = p.retract(&d);
                }
                Variable::Point(p) => {
                    let v = p.to_vector() + Vector2::new(delta[offset], delta[offset + 1]);
                    *p = Point2::from_vector(&v);
                }
            }
        }
        out
    }
}

/// Column layout of the stacked tangent vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ordering {
    offsets: BTreeMap<VariableId, usize>,
    ids: Vec<VariableId>,
    dim: usize,
}

impl Ordering {
    /// Variables in `VariableId` order: poses by time, then landmarks by id.
    pub fn from_values(values: &Values) -> Self {
        let mut offsets = BTreeMap::new();
        let mut ids = Vec::with_capacity(values.len());
        let mut dim = 0;
        for id in values.keys() {
            offsets.insert(*id, dim);
            ids.push(*id);
            dim += id.dim();
        }
        Self { offsets, ids, dim }
    }

    pub fn offset(&self, id: &VariableId) -> Option<usize> {
        self.offsets.get(id).copied()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[VariableId] {
        &self.ids
    }
}

/// A collection of factors.
#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a factor and returns its index.
    pub fn add(&mut self, factor: impl Into<Factor>) -> usize {
        self.factors.push(factor.into());
        self.factors.len() - 1
    }

    pub fn replace(&mut self, index: usize, factor: impl Into<Factor>) {
        self.factors[index] = factor.into();
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn get(&self, index: usize) -> Option<&Factor> {
        self.factors.get(index)
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Total negative log-likelihood, normalization constants included.
    pub fn error(&self, values: &Values) -> Result<f64> {
        self.factors.iter().map(|f| f.nll(values)).sum()
    }

    /// Fails with `SingularSystem` unless every variable in `values` is tied
    /// to a pose prior through the factors.
    pub fn check_gauge(&self, values: &Values) -> Result<()> {
        let ordering = Ordering::from_values(values);
        let n = ordering.ids().len();
        let index: BTreeMap<VariableId, usize> = ordering
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i))
            .collect();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut anchored = vec![false; n];
        for factor in &self.factors {
            let keys = factor.keys();
            for key in &keys {
                if !index.contains_key(key) {
                    return Err(SlamError::MissingVariable(*key));
                }
            }
            if let Factor::PriorPose2(p) = factor {
                anchored[index[&VariableId::pose(p.pose)]] = true;
            }
            for pair in keys.windows(2) {
                let a = find(&mut parent, index[&pair[0]]);
                let b = find(&mut parent, index[&pair[1]]);
                parent[a] = b;
            }
        }
        let mut root_anchored = vec![false; n];
        for i in 0..n {
            if anchored[i] {
                let r = find(&mut parent, i);
                root_anchored[r] = true;
            }
        }
        for (i, id) in ordering.ids().iter().enumerate() {
            let r = find(&mut parent, i);
            if !root_anchored[r] {
                return Err(SlamError::SingularSystem(format!(
                    "variable {id} is not connected to a pose prior"
                )));
            }
        }
        Ok(())
    }
}
