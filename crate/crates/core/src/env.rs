//! Simulators for data collection and on-policy evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::math;
use crate::mdp::{PolicyTable, TabularMdp};

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic simulator with a discrete action set and vector states.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> Result<Step>;
}

/// Anything that maps a state vector to action probabilities.
pub trait StatePolicy {
    fn action_probs(&self, state: &[f64]) -> Result<Vec<f64>>;
}

/// Draws an index from a categorical distribution.
pub fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Uniform over a fixed number of actions.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub n_actions: usize,
}

impl StatePolicy for UniformPolicy {
    fn action_probs(&self, _state: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.n_actions as f64; self.n_actions])
    }
}

/// A policy table read through one-hot state vectors.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub table: PolicyTable,
}

impl StatePolicy for TabularPolicy {
    fn action_probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let s = state_index(state)
            .ok_or_else(|| Error::InvalidInput("state is not a one-hot vector".into()))?;
        if s >= self.table.n_states() {
            return Err(Error::InvalidInput(format!("state {s} outside the policy table")));
        }
        Ok(self.table.row(s).to_vec())
    }
}

pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const FORCE_MAG: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const GRAVITY: f64 = 9.8;
pub const ANGLE_THRESHOLD: f64 = 12.0 * 2.0 * core::f64::consts::PI / 360.0;
pub const POSITION_THRESHOLD: f64 = 2.4;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CartPoleState {
    pub cart_position: f64,
    pub cart_velocity: f64,
    pub pole_angle: f64,
    pub pole_angular_velocity: f64,
}

impl CartPoleState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.cart_position,
            self.cart_velocity,
            self.pole_angle,
            self.pole_angular_velocity,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::DimensionMismatch {
                context: "cart-pole state",
                expected: 4,
                found: v.len(),
            });
        }
        Ok(CartPoleState {
            cart_position: v[0],
            cart_velocity: v[1],
            pole_angle: v[2],
            pole_angular_velocity: v[3],
        })
    }

    pub fn out_of_bounds(&self) -> bool {
        self.cart_position.abs() > POSITION_THRESHOLD || self.pole_angle.abs() > ANGLE_THRESHOLD
    }
}

/// One explicit Euler step. Action 0 pushes left, 1 pushes right. Every
/// step pays 1, including the one that ends the episode.
pub fn cartpole_step(state: CartPoleState, action: usize) -> (CartPoleState, f64, bool) {
    let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
    let total_mass = CART_MASS + POLE_MASS;
    let polemass_length = POLE_MASS * POLE_HALF_LENGTH;
    let (sin, cos) = (math::sin(state.pole_angle), math::cos(state.pole_angle));
    let temp = (force + polemass_length * state.pole_angular_velocity * state.pole_angular_velocity * sin)
        / total_mass;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
    let x_acc = temp - polemass_length * theta_acc * cos / total_mass;
    let next = CartPoleState {
        cart_position: state.cart_position + TAU * state.cart_velocity,
        cart_velocity: state.cart_velocity + TAU * x_acc,
        pole_angle: state.pole_angle + TAU * state.pole_angular_velocity,
        pole_angular_velocity: state.pole_angular_velocity + TAU * theta_acc,
    };
    let done = next.out_of_bounds();
    (next, 1.0, done)
}

/// Each component uniform in `[-0.05, 0.05]`.
pub fn cartpole_reset(rng: &mut dyn RngCore) -> CartPoleState {
    let mut u = || rng.gen_range(-0.05..=0.05);
    CartPoleState {
        cart_position: u(),
        cart_velocity: u(),
        pole_angle: u(),
        pole_angular_velocity: u(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct CartPole {
    state: CartPoleState,
}

impl CartPole {
    pub fn new() -> Self {
        CartPole::default()
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }
}

impl Environment for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = cartpole_reset(rng);
        self.state.to_vec()
    }

    fn step(&mut self, action: usize, _rng: &mut dyn RngCore) -> Result<Step> {
        if action >= 2 {
            return Err(Error::InvalidInput(format!("cart-pole action {action}")));
        }
        let (next, reward, done) = cartpole_step(self.state, action);
        self.state = next;
        Ok(Step {
            next_state: next.to_vec(),
            reward,
            done,
        })
    }
}

pub fn one_hot(n: usize, s: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[s] = 1.0;
    v
}

/// Index of the single `1.0` entry, `None` for anything else (including the
/// all-zeros absorbing sentinel).
pub fn state_index(v: &[f64]) -> Option<usize> {
    let mut found = None;
    for (i, &x) in v.iter().enumerate() {
        if x == 1.0 {
            if found.is_some() {
                return None;
            }
            found = Some(i);
        } else if x != 0.0 {
            return None;
        }
    }
    found
}

/// A tabular MDP seen through one-hot states. Entering a zero-reward
/// self-absorbing state ends the episode.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    terminal: Vec<bool>,
    current: usize,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp) -> Self {
        let terminal = mdp.terminal_states();
        TabularEnv {
            mdp,
            terminal,
            current: 0,
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn current(&self) -> usize {
        self.current
    }
}

impl Environment for TabularEnv {
    fn state_dim(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.current = sample_categorical(self.mdp.initial_dist(), rng);
        one_hot(self.mdp.n_states(), self.current)
    }

    fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> Result<Step> {
        if action >= self.mdp.n_actions() {
            return Err(Error::InvalidInput(format!("action {action} out of range")));
        }
        let s = self.current;
        let next = sample_categorical(self.mdp.transition(s, action), rng);
        let reward = self.mdp.reward(s, action);
        self.current = next;
        Ok(Step {
            next_state: one_hot(self.mdp.n_states(), next),
            reward,
            done: self.terminal[next],
        })
    }
}
