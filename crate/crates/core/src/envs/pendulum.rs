use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    ActionSpace, EnvSpec, Environment, EnvironmentPair, ModificationRecord, ObservationSpace,
    SimRng, StepOutcome,
};
use crate::error::{Error, Result};

/// Pendulum mass of the unmodified simulator.
pub const DEFAULT_SIM_MASS: f64 = 4.89;
/// Pendulum mass of the modified ("real") environment.
pub const DEFAULT_REAL_MASS: f64 = 100.0;

/// Torque-driven inverted pendulum, `theta = 0` upright.
///
/// `theta'' = (m g l sin(theta) + tau) / (I0 + m l^2)`, integrated with
/// semi-implicit Euler. `I0` is the rotor/rod inertia, so a heavier bob both
/// falls faster and responds less to torque. The action in `[-1, 1]` is scaled
/// by `max_torque`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub base_inertia: f64,
    pub max_torque: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Upright while `|theta| < upright_threshold`.
    pub upright_threshold: f64,
    /// Start states are uniform in `[-init_range, init_range]^2`.
    pub init_range: f64,
    pub max_speed: f64,
    pub terminate_on_fall: bool,
}

impl PendulumParams {
    pub fn with_mass(mass: f64) -> Self {
        Self {
            mass,
            length: 1.0,
            gravity: 9.81,
            base_inertia: 10.0,
            max_torque: 600.0,
            dt: 0.02,
            horizon: 200,
            upright_threshold: 0.2,
            init_range: 0.05,
            max_speed: 50.0,
            terminate_on_fall: true,
        }
    }

    pub fn sim() -> Self {
        Self::with_mass(DEFAULT_SIM_MASS)
    }

    pub fn real() -> Self {
        Self::with_mass(DEFAULT_REAL_MASS)
    }

    pub fn inertia(&self) -> f64 {
        self.base_inertia + self.mass * self.length * self.length
    }

    /// Angular acceleration for a given angle and torque.
    pub fn acceleration(&self, theta: f64, torque: f64) -> f64 {
        (self.mass * self.gravity * self.length * theta.sin() + torque) / self.inertia()
    }

    /// Kinetic plus potential energy (potential measured from the hanging position).
    pub fn energy(&self, theta: f64, omega: f64) -> f64 {
        0.5 * self.inertia() * omega * omega
            + self.mass * self.gravity * self.length * (1.0 + theta.cos())
    }

    fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mass {} must be positive",
                self.mass
            )));
        }
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return Err(Error::InvalidParameter(format!(
                "dt {} must lie in (0, 0.1]",
                self.dt
            )));
        }
        if !(self.length > 0.0 && self.base_inertia >= 0.0 && self.max_torque > 0.0)
            || self.horizon == 0
        {
            return Err(Error::InvalidParameter("pendulum geometry".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    params: PendulumParams,
    spec: EnvSpec,
    theta: f64,
    omega: f64,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        params.validate()?;
        let spec = EnvSpec {
            name: "pendulum".into(),
            observation: ObservationSpace::Box {
                low: vec![-std::f64::consts::PI, -params.max_speed],
                high: vec![std::f64::consts::PI, params.max_speed],
            },
            action: ActionSpace::Box {
                low: vec![-1.0],
                high: vec![1.0],
            },
            horizon: params.horizon,
        };
        Ok(Self {
            params,
            spec,
            theta: 0.0,
            omega: 0.0,
        })
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }

    /// One integrator step from `(theta, omega)` under a clipped action.
    pub fn integrate(params: &PendulumParams, theta: f64, omega: f64, action: f64) -> (f64, f64) {
        let torque = action.clamp(-1.0, 1.0) * params.max_torque;
        let omega2 = (omega + params.dt * params.acceleration(theta, torque))
            .clamp(-params.max_speed, params.max_speed);
        let mut theta2 = theta + params.dt * omega2;
        // Wrap into [-pi, pi].
        let pi = std::f64::consts::PI;
        if theta2 > pi || theta2 < -pi {
            theta2 = (theta2 + pi).rem_euclid(2.0 * pi) - pi;
        }
        (theta2, omega2)
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        let r = self.params.init_range;
        self.theta = rng.random_range(-r..=r);
        self.omega = rng.random_range(-r..=r);
        self.state()
    }

    fn state(&self) -> Vec<f64> {
        vec![self.theta, self.omega]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if !self.spec.observation.contains(state) {
            return Err(Error::OutOfBounds(format!(
                "{state:?} outside pendulum state space"
            )));
        }
        self.theta = state[0];
        self.omega = state[1];
        Ok(())
    }

    fn step(&mut self, action: &[f64], _rng: &mut SimRng) -> StepOutcome {
        let (theta, omega) = Self::integrate(&self.params, self.theta, self.omega, action[0]);
        self.theta = theta;
        self.omega = omega;
        let upright = theta.abs() < self.params.upright_threshold;
        StepOutcome {
            next_state: self.state(),
            reward: if upright { 1.0 } else { 0.0 },
            done: !upright && self.params.terminate_on_fall,
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Pendulum pair differing in bob mass; all other parameters shared.
pub fn make_pendulum_pair(
    sim_mass: f64,
    real_mass: f64,
    dt: f64,
    horizon: usize,
) -> Result<EnvironmentPair> {
    let base = PendulumParams {
        dt,
        horizon,
        ..PendulumParams::sim()
    };
    let sim = Pendulum::new(PendulumParams {
        mass: sim_mass,
        ..base.clone()
    })?;
    let real = Pendulum::new(PendulumParams {
        mass: real_mass,
        ..base
    })?;
    EnvironmentPair::new(
        Box::new(sim),
        Box::new(real),
        ModificationRecord {
            property_name: "mass".into(),
            default_value: sim_mass,
            modified_value: real_mass,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::rng_from_seed;

    #[test]
    fn upright_rest_is_a_fixed_point() {
        let mut p = Pendulum::new(PendulumParams::sim()).unwrap();
        let mut rng = rng_from_seed(0);
        p.set_state(&[0.0, 0.0]).unwrap();
        for _ in 0..200 {
            let out = p.step(&[0.0], &mut rng);
            assert_eq!(out.next_state, vec![0.0, 0.0]);
            assert!(!out.done);
        }
    }

    #[test]
    fn mass_mismatch_shows_after_one_step() {
        let pair = make_pendulum_pair(DEFAULT_SIM_MASS, DEFAULT_REAL_MASS, 0.02, 200).unwrap();
        let (mut sim, mut real) = (pair.sim, pair.real);
        let mut rng = rng_from_seed(0);
        sim.set_state(&[0.05, 0.0]).unwrap();
        real.set_state(&[0.05, 0.0]).unwrap();
        let a = sim.step(&[0.3], &mut rng).next_state;
        let b = real.step(&[0.3], &mut rng).next_state;

        // Hand-integrated single step.
        let dt = 0.02f64;
        let sim_acc = (4.89 * 9.81 * 0.05f64.sin() + 0.3 * 600.0) / (10.0 + 4.89);
        let real_acc = (100.0 * 9.81 * 0.05f64.sin() + 0.3 * 600.0) / (10.0 + 100.0);
        let expect_sim = [0.05 + dt * dt * sim_acc, dt * sim_acc];
        let expect_real = [0.05 + dt * dt * real_acc, dt * real_acc];
        for i in 0..2 {
            assert!((a[i] - expect_sim[i]).abs() < 1e-14);
            assert!((b[i] - expect_real[i]).abs() < 1e-14);
        }
        let l2 = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!(l2 > 0.0);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(make_pendulum_pair(0.0, 1.0, 0.02, 10).is_err());
        assert!(make_pendulum_pair(1.0, -1.0, 0.02, 10).is_err());
        assert!(make_pendulum_pair(1.0, 2.0, 0.0, 10).is_err());
        assert!(make_pendulum_pair(1.0, 2.0, 0.2, 10).is_err());
    }

    #[test]
    fn set_state_round_trip_and_bounds() {
        let mut p = Pendulum::new(PendulumParams::real()).unwrap();
        p.set_state(&[0.1, -0.4]).unwrap();
        assert_eq!(p.state(), vec![0.1, -0.4]);
        assert!(p.set_state(&[4.0, 0.0]).is_err());
        assert!(p.set_state(&[0.0, f64::NAN]).is_err());
        let mut rng = rng_from_seed(1);
        let x = p.step(&[0.2], &mut rng).next_state;
        p.set_state(&[0.1, -0.4]).unwrap();
        assert_eq!(p.step(&[0.2], &mut rng).next_state, x);
    }

    #[test]
    fn energy_drift_shrinks_with_dt() {
        // Free swing without termination for a fixed simulated time.
        let drift = |dt: f64| {
            let params = PendulumParams {
                dt,
                terminate_on_fall: false,
                ..PendulumParams::sim()
            };
            let (mut th, mut om) = (0.3, 0.0);
            let e0 = params.energy(th, om);
            let steps = (2.0 / dt) as usize;
            let mut worst = 0.0f64;
            for _ in 0..steps {
                (th, om) = Pendulum::integrate(&params, th, om, 0.0);
                worst = worst.max((params.energy(th, om) - e0).abs());
            }
            worst
        };
        let d = [drift(0.04), drift(0.02), drift(0.01), drift(0.005)];
        for w in d.windows(2) {
            assert!(w[1] < w[0], "{d:?}");
        }
    }
}
