//! Constraint violations, normalised penalty terms and self-adaptive penalty
//! parameters evaluated over a trajectory.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diff::Scalar;
use crate::error::{Error, Result};
use crate::ode::Trajectory;
use crate::penalty::psi_scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    /// `c = 0`, violation `|c|^2`.
    Equality,
    /// `c <= 0`, violation `([c]^+)^2`.
    Inequality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    PerStep,
    /// Evaluated on each consecutive pair `(y_t, y_{t+1})`.
    PerPair,
}

/// The constraint function `c`.
#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintExpr {
    /// `Σ coeffs[k] * y[k] + offset` on each state.
    Affine { coeffs: Vec<f64>, offset: f64 },
    /// `E(next) - E(cur)` with `E = m v^2 / 2 + k x^2 / 2` on state `(x, v)`.
    EnergyChange { mass: f64, stiffness: f64 },
    /// `D(next) - D(cur)` with dissipation rate `D = -c v x` on state `(x, v)`.
    DissipationChange { damping: f64 },
}

impl ConstraintExpr {
    pub fn arity(&self) -> Arity {
        match self {
            ConstraintExpr::Affine { .. } => Arity::PerStep,
            _ => Arity::PerPair,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ConstraintExpr::Affine { coeffs, .. } => coeffs.len(),
            _ => 2,
        }
    }

    fn energy<S: Scalar>(mass: f64, stiffness: f64, y: &[S]) -> S {
        y[1].square() * (0.5 * mass) + y[0].square() * (0.5 * stiffness)
    }

    fn dissipation<S: Scalar>(damping: f64, y: &[S]) -> S {
        y[1] * y[0] * -damping
    }

    fn eval<S: Scalar>(&self, cur: &[S], next: Option<&[S]>) -> S {
        match self {
            ConstraintExpr::Affine { coeffs, offset } => {
                let mut acc = cur[0] * coeffs[0];
                for (y, &a) in cur.iter().zip(coeffs).skip(1) {
                    acc = acc + *y * a;
                }
                acc + *offset
            }
            ConstraintExpr::EnergyChange { mass, stiffness } => {
                let next = next.expect("pair constraint needs a successor state");
                Self::energy(*mass, *stiffness, next) - Self::energy(*mass, *stiffness, cur)
            }
            ConstraintExpr::DissipationChange { damping } => {
                let next = next.expect("pair constraint needs a successor state");
                Self::dissipation(*damping, next) - Self::dissipation(*damping, cur)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub id: String,
    pub kind: ConstraintKind,
    pub expr: ConstraintExpr,
}

impl Constraint {
    pub fn new(id: impl Into<String>, kind: ConstraintKind, expr: ConstraintExpr) -> Self {
        Self {
            id: id.into(),
            kind,
            expr,
        }
    }

    pub fn arity(&self) -> Arity {
        self.expr.arity()
    }

    /// Raw constraint values `c_t` along the trajectory.
    pub fn values<S: Scalar>(&self, traj: &Trajectory<S>) -> Result<Vec<S>> {
        if traj.dim() != self.expr.state_dim() {
            return Err(Error::Shape {
                context: "constraint state dimension",
                expected: self.expr.state_dim(),
                found: traj.dim(),
            });
        }
        Ok(match self.arity() {
            Arity::PerStep => traj.states.iter().map(|s| self.expr.eval(s, None)).collect(),
            Arity::PerPair => traj
                .states
                .windows(2)
                .map(|w| self.expr.eval(&w[0], Some(&w[1])))
                .collect(),
        })
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rel = match self.kind {
            ConstraintKind::Equality => "= 0",
            ConstraintKind::Inequality => "<= 0",
        };
        write!(f, "{}: c {rel}", self.id)
    }
}

/// Equality and inequality constraints applied to every prediction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Self {
        Self { constraints }
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints.iter()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.constraints.iter().map(|c| c.id.as_str()).collect()
    }
}

/// Per-step (or per-pair) squared violations of one constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct ViolationVector<S = f64> {
    pub constraint_id: String,
    pub kind: ConstraintKind,
    pub values: Vec<S>,
}

impl<S: Scalar> ViolationVector<S> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn raw(&self) -> Vec<f64> {
        self.values.iter().map(Scalar::value).collect()
    }
}

/// `|c|^2` for equalities, `([c]^+)^2` for inequalities.
pub fn violations<S: Scalar>(c: &Constraint, traj: &Trajectory<S>) -> Result<ViolationVector<S>> {
    let values = c
        .values(traj)?
        .into_iter()
        .map(|v| match c.kind {
            ConstraintKind::Equality => v.square(),
            ConstraintKind::Inequality => v.relu().square(),
        })
        .collect();
    Ok(ViolationVector {
        constraint_id: c.id.clone(),
        kind: c.kind,
        values,
    })
}

/// `P = mean_t ψ(v_t)`, in `[0, 1)`.
pub fn penalty_term<S: Scalar>(v: &[S]) -> S {
    let normalised: Vec<S> = v.iter().map(|&x| psi_scalar(x)).collect();
    S::sum(&normalised) / v.len() as f64
}

/// Fraction of entries strictly above `zero_threshold`.
pub fn adaptive_mu(v: &[f64], zero_threshold: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let violated = v.iter().filter(|&&x| x > zero_threshold).count();
    violated as f64 / v.len() as f64
}

/// One constraint's contribution to the self-adaptive penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTerm<S = f64> {
    pub id: String,
    pub kind: ConstraintKind,
    pub p: S,
    pub mu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTerms<S = f64> {
    pub terms: Vec<PenaltyTerm<S>>,
    /// `P_θ = Σ P_i + Σ P_j`.
    pub total: f64,
}

impl<S: Scalar> PenaltyTerms<S> {
    pub fn from_violations(vs: &[ViolationVector<S>], zero_threshold: f64) -> Self {
        let terms: Vec<PenaltyTerm<S>> = vs
            .iter()
            .map(|v| PenaltyTerm {
                id: v.constraint_id.clone(),
                kind: v.kind,
                p: penalty_term(&v.values),
                mu: adaptive_mu(&v.raw(), zero_threshold),
            })
            .collect();
        let total = terms.iter().map(|t| t.p.value()).sum();
        Self { terms, total }
    }

    pub fn evaluate(
        constraints: &ConstraintSet,
        traj: &Trajectory<S>,
        zero_threshold: f64,
    ) -> Result<Self> {
        let vs = constraints
            .iter()
            .map(|c| violations(c, traj))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_violations(&vs, zero_threshold))
    }
}

/// Mean over constraints of the mean un-normalised violation; the evaluation metric P.
pub fn raw_violation_metric(constraints: &ConstraintSet, traj: &Trajectory<f64>) -> Result<f64> {
    if constraints.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for c in constraints.iter() {
        let v = violations(c, traj)?;
        total += v.values.iter().sum::<f64>() / v.len() as f64;
    }
    Ok(total / constraints.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{TimeGrid, TrajectoryKind};
    use proptest::prelude::*;

    fn traj(states: Vec<Vec<f64>>) -> Trajectory<f64> {
        let grid = TimeGrid::uniform(0.0, 1.0, states.len()).unwrap();
        Trajectory::new(grid, states, TrajectoryKind::Predicted).unwrap()
    }

    fn cap(bound: f64) -> Constraint {
        Constraint::new(
            "cap",
            ConstraintKind::Inequality,
            ConstraintExpr::Affine {
                coeffs: vec![1.0],
                offset: -bound,
            },
        )
    }

    #[test]
    fn exact_conservation_is_feasible() {
        let c = Constraint::new(
            "mass",
            ConstraintKind::Equality,
            ConstraintExpr::Affine {
                coeffs: vec![1.0; 4],
                offset: -1.0,
            },
        );
        let t = traj(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.25, 0.125, 0.125],
            vec![0.25, 0.25, 0.25, 0.25],
        ]);
        assert_eq!(violations(&c, &t).unwrap().values, vec![0.0; 3]);
    }

    #[test]
    fn inequality_hinge() {
        let t = traj(vec![vec![11.0], vec![13.0]]);
        assert_eq!(violations(&cap(12.0), &t).unwrap().values, vec![0.0, 1.0]);
    }

    #[test]
    fn equality_squares() {
        let c = Constraint::new(
            "eq",
            ConstraintKind::Equality,
            ConstraintExpr::Affine {
                coeffs: vec![1.0],
                offset: 0.0,
            },
        );
        let t = traj(vec![vec![-0.5], vec![0.0]]);
        assert_eq!(violations(&c, &t).unwrap().values, vec![0.25, 0.0]);
    }

    #[test]
    fn pair_constraints_have_n_minus_one_entries() {
        let c = Constraint::new(
            "energy",
            ConstraintKind::Inequality,
            ConstraintExpr::EnergyChange {
                mass: 1.0,
                stiffness: 1.0,
            },
        );
        // E = 0.5, 2.0, 0.5: one increase of 1.5
        let t = traj(vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(violations(&c, &t).unwrap().values, vec![2.25, 0.0]);

        let d = Constraint::new(
            "power",
            ConstraintKind::Equality,
            ConstraintExpr::DissipationChange { damping: 0.5 },
        );
        // D = -0.5 * v * x: 0, -1, -0.5 ... diffs -1, 0.5
        let t = traj(vec![vec![1.0, 0.0], vec![1.0, 2.0], vec![1.0, 1.0]]);
        assert_eq!(violations(&d, &t).unwrap().values, vec![1.0, 0.25]);
    }

    #[test]
    fn dimension_mismatch() {
        let t = traj(vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!(matches!(violations(&cap(1.0), &t), Err(Error::Shape { .. })));
    }

    #[test]
    fn penalty_term_examples() {
        assert_eq!(penalty_term(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(penalty_term(&[1.0, 1.0]), 0.5);
        assert_eq!(penalty_term(&[0.0, 1.0, 3.0, 0.0]), 0.3125);
    }

    #[test]
    fn adaptive_mu_examples() {
        assert_eq!(adaptive_mu(&[0.0; 4], 0.0), 0.0);
        assert_eq!(adaptive_mu(&[0.2, 0.0, 0.1, 0.0], 0.0), 0.5);
        assert_eq!(adaptive_mu(&[0.2, 3.0, 0.1], 0.0), 1.0);
        assert_eq!(adaptive_mu(&[0.2, 0.0, 0.1, 0.0], 0.15), 0.25);
    }

    #[test]
    fn raw_metric_examples() {
        let eq = Constraint::new(
            "eq",
            ConstraintKind::Equality,
            ConstraintExpr::Affine {
                coeffs: vec![1.0],
                offset: 0.0,
            },
        );
        let set = ConstraintSet::new(vec![eq]);
        assert_eq!(raw_violation_metric(&set, &traj(vec![vec![2.0], vec![0.0]])).unwrap(), 2.0);
        assert_eq!(raw_violation_metric(&set, &traj(vec![vec![0.0], vec![0.0]])).unwrap(), 0.0);
        // unbounded, unlike the normalised term
        let big = raw_violation_metric(&set, &traj(vec![vec![4.0], vec![3.0]])).unwrap();
        assert_eq!(big, 12.5);
    }

    proptest! {
        #[test]
        fn penalty_term_below_one(v in prop::collection::vec(0.0f64..1e12, 1..50)) {
            let p = penalty_term(&v);
            prop_assert!((0.0..1.0).contains(&p));
        }

        #[test]
        fn mu_is_scale_invariant(v in prop::collection::vec(prop_oneof![Just(0.0), 1e-6f64..1e3], 1..40), lambda in 1e-3f64..1e3) {
            let scaled: Vec<f64> = v.iter().map(|x| x * lambda).collect();
            prop_assert_eq!(adaptive_mu(&v, 0.0), adaptive_mu(&scaled, 0.0));
        }

        #[test]
        fn zero_equivalences(v in prop::collection::vec(prop_oneof![Just(0.0), 1e-9f64..10.0], 1..40)) {
            let p_zero = penalty_term(&v) == 0.0;
            let mu_zero = adaptive_mu(&v, 0.0) == 0.0;
            let all_zero = v.iter().all(|&x| x <= 0.0);
            prop_assert_eq!(p_zero, mu_zero);
            prop_assert_eq!(mu_zero, all_zero);
        }

        #[test]
        fn violations_nonnegative_and_zero_where_satisfied(ps in prop::collection::vec(-20.0f64..20.0, 2..30)) {
            let t = traj(ps.iter().map(|&p| vec![p]).collect());
            let v = violations(&cap(0.0), &t).unwrap();
            for (p, x) in ps.iter().zip(&v.values) {
                prop_assert!(*x >= 0.0);
                prop_assert_eq!(*x == 0.0, *p <= 0.0);
            }
        }
    }
}
