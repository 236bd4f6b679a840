//! Discrete-time subsystem dynamics: RK4 discretization of continuous
//! models, the three-wheeled omni-directional robot, linear integrators and
//! finite-difference linearization.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Real;

/// Tolerance on `step(ξ, u_ξ) = ξ`.
pub const EPS_EQ: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("wheel matrix is singular (body radius {body_radius})")]
    SingularB { body_radius: f64 },
    #[error("non-finite state encountered")]
    NonFiniteState,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("target is not a steady state: ‖f(ξ, u_ξ) − ξ‖∞ = {residual:e}")]
    NotEquilibrium { residual: f64 },
    #[error("invalid model parameter: {0}")]
    InvalidParams(String),
}

/// Classical fourth-order Runge-Kutta step with the input held constant.
pub fn rk4_step<T: Real, F>(f: F, x: &[T], u: &[T], dt: T) -> Result<Vec<T>, ModelError>
where
    F: Fn(&[T], &[T]) -> Vec<T>,
{
    let half = dt / T::lit(2.0);
    let axpy = |base: &[T], k: &[T], h: T| -> Vec<T> {
        base.iter().zip(k).map(|(b, d)| *b + h * *d).collect()
    };
    let k1 = f(x, u);
    let k2 = f(&axpy(x, &k1, half), u);
    let k3 = f(&axpy(x, &k2, half), u);
    let k4 = f(&axpy(x, &k3, dt), u);
    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);
    let out: Vec<T> = (0..x.len())
        .map(|i| x[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(ModelError::NonFiniteState)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmniRobotParams {
    pub body_radius: f64,
    pub wheel_radius: f64,
}

impl Default for OmniRobotParams {
    fn default() -> Self {
        Self {
            body_radius: 0.2,
            wheel_radius: 0.05,
        }
    }
}

/// Three-wheeled omni-directional robot with state `[px, py, ψ]` and wheel
/// speeds as inputs: `ẋ = R(ψ) (Bᵀ)⁻¹ r u`.
#[derive(Debug, Clone, PartialEq)]
pub struct OmniRobot {
    params: OmniRobotParams,
    // r·(Bᵀ)⁻¹, row-major
    wheel_map: [[f64; 3]; 3],
}

impl OmniRobot {
    pub fn new(params: OmniRobotParams) -> Result<Self, ModelError> {
        if !(params.body_radius > 0.0) || !(params.wheel_radius > 0.0) {
            return Err(ModelError::InvalidParams(
                "body_radius and wheel_radius must be positive".into(),
            ));
        }
        let (s, c) = 30f64.to_radians().sin_cos();
        let l = params.body_radius;
        let b = DMatrix::from_row_slice(3, 3, &[0.0, c, -c, -1.0, s, s, l, l, l]);
        let inv = b
            .transpose()
            .try_inverse()
            .ok_or(ModelError::SingularB { body_radius: l })?;
        let mut wheel_map = [[0.0; 3]; 3];
        for (i, row) in wheel_map.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = params.wheel_radius * inv[(i, j)];
            }
        }
        Ok(Self { params, wheel_map })
    }

    pub fn params(&self) -> OmniRobotParams {
        self.params
    }

    /// Body-frame velocity `(Bᵀ)⁻¹ r u`.
    pub fn body_velocity<T: Real>(&self, u: &[T]) -> [T; 3] {
        let mut v = [T::zero(); 3];
        for (i, vi) in v.iter_mut().enumerate() {
            for j in 0..3 {
                *vi = *vi + T::lit(self.wheel_map[i][j]) * u[j];
            }
        }
        v
    }

    /// `ẋ = R(ψ) (Bᵀ)⁻¹ r u`.
    pub fn continuous<T: Real>(&self, x: &[T], u: &[T]) -> Vec<T> {
        let v = self.body_velocity(u);
        let (s, c) = x[2].sin_cos();
        vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
    }
}

/// What drives a subsystem.
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    OmniRobot(OmniRobot),
    /// `ẋ = Ac x + Bc u`, discretized with RK4 like the nonlinear models.
    ContinuousLinear {
        ac: DMatrix<f64>,
        bc: DMatrix<f64>,
    },
    /// `x⁺ = A x + B u`.
    DiscreteLinear {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
    },
}

impl Dynamics {
    /// Planar single integrator `ṗ = u`.
    pub fn integrator2d() -> Self {
        Self::ContinuousLinear {
            ac: DMatrix::zeros(2, 2),
            bc: DMatrix::identity(2, 2),
        }
    }

    /// Scalar integrator `ẋ = u`; with `dt = 1` its RK4 map is `x⁺ = x + u`.
    pub fn scalar_integrator() -> Self {
        Self::ContinuousLinear {
            ac: DMatrix::zeros(1, 1),
            bc: DMatrix::identity(1, 1),
        }
    }

    /// Position/velocity double integrator with one force input.
    pub fn double_integrator() -> Self {
        Self::ContinuousLinear {
            ac: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            bc: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::OmniRobot(_) => 3,
            Self::ContinuousLinear { ac, .. } => ac.nrows(),
            Self::DiscreteLinear { a, .. } => a.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::OmniRobot(_) => 3,
            Self::ContinuousLinear { bc, .. } => bc.ncols(),
            Self::DiscreteLinear { b, .. } => b.ncols(),
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, Self::OmniRobot(_))
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

/// A subsystem `x⁺ = f(x, u)` together with its steady state `(ξ, u_ξ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemModel {
    dynamics: Dynamics,
    dt: f64,
    target: DVector<f64>,
    target_input: DVector<f64>,
}

impl SubsystemModel {
    /// Validates dimensions and that `(target, target_input)` is a steady
    /// state of the discrete map.
    pub fn new(
        dynamics: Dynamics,
        dt: f64,
        target: DVector<f64>,
        target_input: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(ModelError::InvalidParams(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if let Dynamics::ContinuousLinear { ac, bc } | Dynamics::DiscreteLinear { a: ac, b: bc } =
            &dynamics
        {
            if ac.nrows() != ac.ncols() || bc.nrows() != ac.nrows() {
                return Err(ModelError::DimensionMismatch {
                    expected: ac.nrows(),
                    found: bc.nrows(),
                });
            }
        }
        let model = Self {
            dynamics,
            dt,
            target,
            target_input,
        };
        model.check_dims(&model.target, &model.target_input)?;
        let next = model.step(&model.target, &model.target_input)?;
        let residual = (next - &model.target).amax();
        if residual > EPS_EQ {
            return Err(ModelError::NotEquilibrium { residual });
        }
        Ok(model)
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn n(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn m(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn target_input(&self) -> &DVector<f64> {
        &self.target_input
    }

    pub fn is_linear(&self) -> bool {
        self.dynamics.is_linear()
    }

    /// Same dynamics with a different steady state.
    pub fn with_target(
        &self,
        target: DVector<f64>,
        target_input: DVector<f64>,
    ) -> Result<Self, ModelError> {
        Self::new(self.dynamics.clone(), self.dt, target, target_input)
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(), ModelError> {
        if x.len() != self.n() {
            return Err(ModelError::DimensionMismatch {
                expected: self.n(),
                found: x.len(),
            });
        }
        if u.len() != self.m() {
            return Err(ModelError::DimensionMismatch {
                expected: self.m(),
                found: u.len(),
            });
        }
        Ok(())
    }

    /// Continuous-time vector field, for models that have one.
    pub fn continuous(&self, x: &[f64], u: &[f64]) -> Option<Vec<f64>> {
        match &self.dynamics {
            Dynamics::OmniRobot(r) => Some(r.continuous(x, u)),
            Dynamics::ContinuousLinear { ac, bc } => {
                let ax = mat_vec(ac, x);
                let bu = mat_vec(bc, u);
                Some(ax.iter().zip(&bu).map(|(p, q)| p + q).collect())
            }
            Dynamics::DiscreteLinear { .. } => None,
        }
    }

    /// Discrete map `f(x, u)`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.check_dims(x, u)?;
        let next = match &self.dynamics {
            Dynamics::OmniRobot(r) => rk4_step(
                |x, u| r.continuous(x, u),
                x.as_slice(),
                u.as_slice(),
                self.dt,
            )?,
            Dynamics::ContinuousLinear { ac, bc } => rk4_step(
                |x, u| {
                    let ax = mat_vec(ac, x);
                    let bu = mat_vec(bc, u);
                    ax.iter().zip(&bu).map(|(p, q)| p + q).collect()
                },
                x.as_slice(),
                u.as_slice(),
                self.dt,
            )?,
            Dynamics::DiscreteLinear { a, b } => {
                let v = a * x + b * u;
                if !v.iter().all(|e| e.is_finite()) {
                    return Err(ModelError::NonFiniteState);
                }
                return Ok(v);
            }
        };
        Ok(DVector::from_vec(next))
    }

    /// Jacobians `(∂f/∂x, ∂f/∂u)`. Exact for linear models; central finite
    /// differences with step `max(1e−6, 1e−6·|v|)` otherwise.
    pub fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        self.check_dims(x, u)?;
        match &self.dynamics {
            Dynamics::DiscreteLinear { a, b } => Ok((a.clone(), b.clone())),
            Dynamics::ContinuousLinear { ac, bc } => Ok(rk4_linear_maps(ac, bc, self.dt)),
            Dynamics::OmniRobot(_) => self.finite_difference_jacobians(x, u),
        }
    }

    /// Central-difference Jacobians regardless of model kind.
    pub fn finite_difference_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        let (n, m) = (self.n(), self.m());
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        for j in 0..n {
            let h = 1e-6f64.max(1e-6 * x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let d = (self.step(&xp, u)? - self.step(&xm, u)?) / (2.0 * h);
            a.set_column(j, &d);
        }
        for j in 0..m {
            let h = 1e-6f64.max(1e-6 * u[j].abs());
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let d = (self.step(x, &up)? - self.step(x, &um)?) / (2.0 * h);
            b.set_column(j, &d);
        }
        Ok((a, b))
    }
}

/// Discrete `(A, B)` of one RK4 step applied to `ẋ = Ac x + Bc u`:
/// `A = Σ_{k≤4} (dt·Ac)^k / k!`, `B = dt·Σ_{k≤3} (dt·Ac)^k / (k+1)! · Bc`.
pub fn rk4_linear_maps(
    ac: &DMatrix<f64>,
    bc: &DMatrix<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = ac.nrows();
    let m = ac * dt;
    let mut a = DMatrix::identity(n, n);
    let mut b_sum = DMatrix::identity(n, n);
    let mut power = DMatrix::identity(n, n);
    let mut fact = 1.0;
    for k in 1..=4 {
        power = &power * &m;
        fact *= k as f64;
        a += &power / fact;
        if k <= 3 {
            b_sum += &power / (fact * (k as f64 + 1.0));
        }
    }
    (a, b_sum * bc * dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn robot_model(target: [f64; 3]) -> SubsystemModel {
        SubsystemModel::new(
            Dynamics::OmniRobot(OmniRobot::new(OmniRobotParams::default()).unwrap()),
            12.0 / 36.0,
            DVector::from_row_slice(&target),
            DVector::zeros(3),
        )
        .unwrap()
    }

    #[test]
    fn zero_input_is_rest() {
        let r = OmniRobot::new(OmniRobotParams::default()).unwrap();
        assert_eq!(
            r.continuous(&[1.0, 2.0, 0.3], &[0.0, 0.0, 0.0]),
            vec![0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn equal_wheels_rotate_in_place() {
        let r = OmniRobot::new(OmniRobotParams::default()).unwrap();
        let v = r.body_velocity(&[2.0f64, 2.0, 2.0]);
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
        assert!((v[2] - 2.0 * 0.05 / 0.2).abs() < 1e-12);
    }

    #[test]
    fn rk4_examples() {
        let x = rk4_step(|_: &[f64], _: &[f64]| vec![0.0, 0.0], &[1.0, 2.0], &[], 0.1).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        let x = rk4_step(|_: &[f64], u: &[f64]| vec![u[0]], &[3.0], &[1.0], 0.5).unwrap();
        assert_eq!(x, vec![3.5]);
        let bad = rk4_step(|_: &[f64], _: &[f64]| vec![f64::NAN], &[0.0], &[], 0.5);
        assert_eq!(bad, Err(ModelError::NonFiniteState));
    }

    #[test]
    fn rk4_generic_in_f32() {
        let x = rk4_step(|x: &[f32], _: &[f32]| vec![-x[0]], &[1.0f32], &[], 0.1).unwrap();
        assert!((x[0] - (-0.1f32).exp()).abs() < 1e-6);
    }

    /// Exact flow for a constant input: the body velocity is constant, so
    /// the heading is affine in time and the position integral has a closed
    /// form.
    fn exact_robot_flow(r: &OmniRobot, x0: [f64; 3], u: [f64; 3], t: f64) -> [f64; 3] {
        let v = r.body_velocity(&u);
        let w = v[2];
        let psi = x0[2] + w * t;
        if w.abs() < 1e-12 {
            let (s, c) = x0[2].sin_cos();
            return [
                x0[0] + t * (c * v[0] - s * v[1]),
                x0[1] + t * (s * v[0] + c * v[1]),
                psi,
            ];
        }
        // ∫ cos(ψ0 + w s) ds = (sin ψ − sin ψ0)/w, ∫ sin = (cos ψ0 − cos ψ)/w
        let ic = (psi.sin() - x0[2].sin()) / w;
        let is = (x0[2].cos() - psi.cos()) / w;
        [
            x0[0] + ic * v[0] - is * v[1],
            x0[1] + is * v[0] + ic * v[1],
            psi,
        ]
    }

    #[test]
    fn robot_matches_exact_flow_and_fine_euler() {
        let m = robot_model([0.0; 3]);
        let r = OmniRobot::new(OmniRobotParams::default()).unwrap();
        let x0 = [0.3, -0.2, 0.9];
        let u = [4.0, -7.0, 11.0];
        let rk = m
            .step(&DVector::from_row_slice(&x0), &DVector::from_row_slice(&u))
            .unwrap();
        let exact = exact_robot_flow(&r, x0, u, m.dt());
        // Richardson-extrapolated Euler with 1000 and 2000 substeps
        let euler = |steps: usize| {
            let mut x = x0.to_vec();
            let h = m.dt() / steps as f64;
            for _ in 0..steps {
                let d = r.continuous(&x, &u);
                for i in 0..3 {
                    x[i] += h * d[i];
                }
            }
            x
        };
        let (e1, e2) = (euler(1000), euler(2000));
        for i in 0..3 {
            let extrapolated = 2.0 * e2[i] - e1[i];
            assert!(
                (rk[i] - exact[i]).abs() < 1e-6,
                "coord {i}: {} vs {}",
                rk[i],
                exact[i]
            );
            assert!(
                (rk[i] - extrapolated).abs() < 1e-6,
                "coord {i}: {} vs {}",
                rk[i],
                extrapolated
            );
        }
    }

    #[test]
    fn linear_examples() {
        let m = SubsystemModel::new(
            Dynamics::DiscreteLinear {
                a: DMatrix::from_element(1, 1, 2.0),
                b: DMatrix::from_element(1, 1, 3.0),
            },
            1.0,
            DVector::zeros(1),
            DVector::zeros(1),
        )
        .unwrap();
        let (a, b) = m
            .linearize(
                &DVector::from_element(1, 0.7),
                &DVector::from_element(1, -0.1),
            )
            .unwrap();
        assert_eq!((a[(0, 0)], b[(0, 0)]), (2.0, 3.0));

        let dt = 0.25;
        let di = SubsystemModel::new(
            Dynamics::double_integrator(),
            dt,
            DVector::zeros(2),
            DVector::zeros(1),
        )
        .unwrap();
        let (a, b) = di
            .linearize(&DVector::zeros(2), &DVector::zeros(1))
            .unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]));
        assert!((b[(0, 0)] - dt * dt / 2.0).abs() < 1e-15 && (b[(1, 0)] - dt).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_enforced() {
        let m = robot_model([1.0, -1.0, 0.7]);
        assert_eq!(m.step(m.target(), m.target_input()).unwrap(), *m.target());
        let err = SubsystemModel::new(
            Dynamics::scalar_integrator(),
            1.0,
            DVector::zeros(1),
            DVector::from_element(1, 0.5),
        );
        assert!(matches!(err, Err(ModelError::NotEquilibrium { .. })));
    }

    #[test]
    fn robot_jacobian_at_rest_is_identity_in_state() {
        let m = robot_model([0.0; 3]);
        let (a, b) = m
            .linearize(
                &DVector::from_row_slice(&[1.0, 2.0, 0.4]),
                &DVector::zeros(3),
            )
            .unwrap();
        assert!((a - DMatrix::identity(3, 3)).amax() < 1e-9);
        // B = dt · R(ψ) r (Bᵀ)⁻¹ at rest
        let r = OmniRobot::new(OmniRobotParams::default()).unwrap();
        let (s, c) = 0.4f64.sin_cos();
        for j in 0..3 {
            let mut e = [0.0; 3];
            e[j] = 1.0;
            let v = r.body_velocity(&e);
            let expect = [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
            for i in 0..3 {
                assert!((b[(i, j)] - m.dt() * expect[i]).abs() < 1e-8);
            }
        }
    }
}
