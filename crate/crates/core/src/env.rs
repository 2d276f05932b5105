//! Sequential-route MDP: one vehicle at a time, in a given order, builds a
//! partial route that ends at the depot.

use crate::error::{CoreError, Result};
use crate::instance::{dist, Instance, Point};

/// Absolute tolerance of every fuel comparison.
pub const EPS: f64 = 1e-9;

/// Whether a vehicle with `fuel` can go to a customer `to_customer` away and
/// then return to the depot `customer_home` further. Shared by every solver.
#[inline]
pub fn can_visit(fuel: f64, to_customer: f64, customer_home: f64) -> bool {
    fuel >= to_customer + customer_home - EPS
}

/// Checks that `order` is a permutation of `0..k`.
pub fn check_order(order: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    let ok = order.len() == k
        && order.iter().all(|&v| {
            v < k && !std::mem::replace(&mut seen[v], true)
        });
    if ok {
        Ok(())
    } else {
        Err(CoreError::InvalidOrder {
            order: order.to_vec(),
            k,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub pos: Point,
    /// Last visited customer, `None` while at the start or at the depot.
    pub at: Option<usize>,
    pub fuel: f64,
    pub collected: f64,
    pub traveled: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct State<'a> {
    inst: &'a Instance,
    residual: Vec<f64>,
    visited: Vec<bool>,
    vehicles: Vec<VehicleState>,
    order: Vec<usize>,
    /// Position in `order` of the active vehicle; `order.len()` once terminal.
    cursor: usize,
    t: usize,
    t_dec: usize,
    routes: Vec<Vec<usize>>,
}

impl<'a> State<'a> {
    pub fn reset(inst: &'a Instance, order: &[usize]) -> Result<Self> {
        check_order(order, inst.k())?;
        let mut residual = Vec::with_capacity(inst.n() + 1);
        residual.push(0.0);
        residual.extend(inst.customers.iter().map(|c| c.prize));
        Ok(Self {
            inst,
            residual,
            visited: vec![false; inst.n() + 1],
            vehicles: inst
                .vehicles
                .iter()
                .map(|v| VehicleState {
                    pos: v.start,
                    at: None,
                    fuel: v.fuel,
                    collected: 0.0,
                    traveled: 0.0,
                    done: false,
                })
                .collect(),
            order: order.to_vec(),
            cursor: 0,
            t: 0,
            t_dec: 0,
            routes: vec![Vec::new(); inst.k()],
        })
    }

    pub fn instance(&self) -> &'a Instance {
        self.inst
    }

    pub fn is_terminal(&self) -> bool {
        self.cursor >= self.order.len()
    }

    /// Index (into the instance's vehicle list) of the vehicle building its
    /// route.
    pub fn active(&self) -> Option<usize> {
        self.order.get(self.cursor).copied()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn t_dec(&self) -> usize {
        self.t_dec
    }

    /// Residual prizes indexed by node; entry 0 is the depot.
    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    /// Customer sequences per vehicle, in instance order.
    pub fn routes(&self) -> &[Vec<usize>] {
        &self.routes
    }

    pub fn visited_count(&self) -> usize {
        self.visited.iter().filter(|v| **v).count()
    }

    /// Sum of per-vehicle collected prizes.
    pub fn reward(&self) -> f64 {
        self.vehicles.iter().map(|v| v.collected).sum()
    }

    /// Feasible actions of the active vehicle, indexed by node. The depot is
    /// always feasible.
    pub fn feasible_mask(&self) -> Result<Vec<bool>> {
        let k = self.active().ok_or(CoreError::Terminal)?;
        let v = &self.vehicles[k];
        let depot = self.inst.depot;
        let mut mask = Vec::with_capacity(self.inst.n() + 1);
        mask.push(true);
        for (i, c) in self.inst.customers.iter().enumerate() {
            mask.push(!self.visited[i + 1] && can_visit(v.fuel, dist(v.pos, c.pos), dist(c.pos, depot)));
        }
        Ok(mask)
    }

    /// Applies action `a` (0 = return to depot) for the active vehicle.
    pub fn step(&mut self, a: usize) -> Result<()> {
        let k = self.active().ok_or(CoreError::Terminal)?;
        let feasible = a <= self.inst.n() && self.feasible_mask()?[a];
        if !feasible {
            return Err(CoreError::Infeasible { action: a, vehicle: k });
        }
        let target = self.inst.node(a);
        let v = &mut self.vehicles[k];
        let d = dist(v.pos, target);
        v.fuel -= d;
        v.traveled += d;
        v.pos = target;
        self.t += 1;
        if a == 0 {
            v.at = None;
            v.done = true;
            self.cursor += 1;
            self.t_dec = 0;
        } else {
            v.at = Some(a);
            v.collected += self.residual[a];
            self.residual[a] = 0.0;
            self.visited[a] = true;
            self.routes[k].push(a);
            self.t_dec += 1;
        }
        Ok(())
    }

    /// Replays `actions` from a fresh reset.
    pub fn replay(inst: &'a Instance, order: &[usize], actions: &[usize]) -> Result<Self> {
        let mut s = Self::reset(inst, order)?;
        for &a in actions {
            s.step(a)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub vehicle: usize,
    pub action: usize,
    pub fuel_after: f64,
    pub logprob: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub order: Vec<usize>,
    pub steps: Vec<StepRecord>,
    /// Per vehicle, instance order.
    pub routes: Vec<Vec<usize>>,
    pub reward: f64,
    pub terminal: bool,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn logprob(&self) -> f64 {
        self.steps.iter().map(|s| s.logprob).sum()
    }

    /// Text dump, one line per step.
    pub fn dump(&self) -> String {
        self.steps
            .iter()
            .map(|s| {
                format!(
                    "t={} vehicle={} action={} fuel_after={} logprob={} entropy={}\n",
                    s.t, s.vehicle, s.action, s.fuel_after, s.logprob, s.entropy
                )
            })
            .collect()
    }
}

/// Total prize of a finished trajectory.
pub fn reward(traj: &Trajectory) -> Result<f64> {
    if traj.terminal {
        Ok(traj.reward)
    } else {
        Err(CoreError::NotTerminal)
    }
}

/// Builds a trajectory record from a replay of `actions` with the given
/// per-step log-probabilities and entropies (zeros when absent).
pub fn trajectory_from_actions(
    inst: &Instance,
    order: &[usize],
    actions: &[usize],
    stats: Option<&[(f64, f64)]>,
) -> Result<Trajectory> {
    let mut s = State::reset(inst, order)?;
    let mut steps = Vec::with_capacity(actions.len());
    for (i, &a) in actions.iter().enumerate() {
        let vehicle = s.active().ok_or(CoreError::Terminal)?;
        s.step(a)?;
        let (logprob, entropy) = stats.map_or((0.0, 0.0), |st| st[i]);
        steps.push(StepRecord {
            t: i,
            vehicle,
            action: a,
            fuel_after: s.vehicles()[vehicle].fuel,
            logprob,
            entropy,
        });
    }
    Ok(Trajectory {
        order: order.to_vec(),
        steps,
        routes: s.routes().to_vec(),
        reward: s.reward(),
        terminal: s.is_terminal(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{Customer, PrizeMode, Vehicle};

    fn line_instance() -> Instance {
        // Depot at origin, customers on the x axis.
        Instance {
            depot: Point::new(0.0, 0.0),
            customers: vec![
                Customer {
                    pos: Point::new(0.25, 0.0),
                    prize: 0.4,
                },
                Customer {
                    pos: Point::new(0.5, 0.0),
                    prize: 1.0,
                },
            ],
            vehicles: vec![
                Vehicle {
                    start: Point::new(0.0, 0.0),
                    fuel: 1.0,
                },
                Vehicle {
                    start: Point::new(0.5, 0.0),
                    fuel: 0.5,
                },
            ],
            t_max: 1.0,
            prize_mode: PrizeMode::Uniform,
            seed: 0,
        }
    }

    #[test]
    fn reset_sets_active_from_order() {
        let inst = line_instance();
        assert_eq!(State::reset(&inst, &[0, 1]).unwrap().active(), Some(0));
        assert_eq!(State::reset(&inst, &[1, 0]).unwrap().active(), Some(1));
        assert_eq!(State::reset(&inst, &[0, 1]).unwrap(), State::reset(&inst, &[0, 1]).unwrap());
        assert!(State::reset(&inst, &[0, 0]).is_err());
        assert!(State::reset(&inst, &[0]).is_err());
        assert!(State::reset(&inst, &[0, 2]).is_err());
    }

    #[test]
    fn step_updates_fuel_and_prizes() {
        let inst = line_instance();
        let mut s = State::reset(&inst, &[0, 1]).unwrap();
        s.step(1).unwrap();
        assert_eq!(s.vehicles()[0].fuel, 0.75);
        assert_eq!(s.vehicles()[0].collected, 0.4);
        assert_eq!(s.residual()[1], 0.0);
        assert!(s.visited()[1]);
        assert_eq!((s.t(), s.t_dec()), (1, 1));
        s.step(0).unwrap();
        assert_eq!(s.active(), Some(1));
        assert_eq!(s.t_dec(), 0);
        assert!(s.vehicles()[0].done);
    }

    #[test]
    fn fuel_exactly_home_allows_only_depot() {
        let mut inst = line_instance();
        inst.customers[0].pos = Point::new(0.25, 0.1);
        inst.customers[1].pos = Point::new(0.5, 0.2);
        let mut s = State::reset(&inst, &[1, 0]).unwrap();
        // Vehicle 1 has exactly the fuel to drive home; any detour fails.
        assert_eq!(s.vehicles()[1].fuel, dist(s.vehicles()[1].pos, inst.depot));
        assert_eq!(s.feasible_mask().unwrap(), vec![true, false, false]);
        assert!(s.step(2).is_err());
        s.step(0).unwrap();
        assert!(s.vehicles()[1].fuel.abs() <= EPS);
    }

    #[test]
    fn boundary_detour_is_feasible() {
        let inst = line_instance();
        // Customer 1 lies on the way home: detour length equals the fuel.
        let s = State::reset(&inst, &[1, 0]).unwrap();
        assert_eq!(s.feasible_mask().unwrap(), vec![true, true, true]);
    }

    #[test]
    fn visited_customers_are_infeasible() {
        let inst = line_instance();
        let s = State::replay(&inst, &[0, 1], &[2, 0]).unwrap();
        assert_eq!(s.feasible_mask().unwrap(), vec![true, true, false]);
    }

    #[test]
    fn last_depot_terminates() {
        let inst = line_instance();
        let mut s = State::replay(&inst, &[0, 1], &[1, 2, 0]).unwrap();
        s.step(0).unwrap();
        assert!(s.is_terminal());
        assert_eq!(s.t(), 4);
        assert!(matches!(s.feasible_mask(), Err(CoreError::Terminal)));
        assert!(matches!(s.step(0), Err(CoreError::Terminal)));
        assert!((s.reward() - 1.4).abs() < 1e-15);
    }

    #[test]
    fn empty_routes_have_zero_reward() {
        let inst = line_instance();
        let t = trajectory_from_actions(&inst, &[0, 1], &[0, 0], None).unwrap();
        assert_eq!(reward(&t).unwrap(), 0.0);
        let partial = trajectory_from_actions(&inst, &[0, 1], &[0], None).unwrap();
        assert!(matches!(reward(&partial), Err(CoreError::NotTerminal)));
    }
}
