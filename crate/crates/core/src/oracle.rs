//! Exact and heuristic solvers plus an independent solution checker.
//!
//! Routes are listed per vehicle in instance order and contain customer
//! indices only; each route implicitly starts at the vehicle's start and ends
//! at the depot.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{can_visit, EPS};
use crate::error::{CoreError, Result};
use crate::instance::{dist, Instance, Point};

/// Largest instance the exhaustive enumerator accepts.
pub const BRUTE_FORCE_MAX_N: usize = 8;
/// Largest instance the exact solver accepts (visited sets are bitmasks).
pub const EXACT_MAX_N: usize = 31;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub routes: Vec<Vec<usize>>,
    pub objective: f64,
    pub optimal: bool,
    pub expansions: u64,
}

impl Solution {
    /// Objective recomputed from the routes.
    pub fn from_routes(inst: &Instance, routes: Vec<Vec<usize>>, optimal: bool, expansions: u64) -> Self {
        let objective = inst.objective_of(routes.iter().flatten().copied());
        Self {
            routes,
            objective,
            optimal,
            expansions,
        }
    }

    /// `y[i][k]`: whether vehicle `k` visits node `i` (row 0 is the depot,
    /// visited by every vehicle).
    pub fn visit_incidence(&self, n: usize) -> Vec<Vec<bool>> {
        let mut y = vec![vec![false; self.routes.len()]; n + 1];
        for (k, r) in self.routes.iter().enumerate() {
            y[0][k] = true;
            for &i in r {
                if i <= n {
                    y[i][k] = true;
                }
            }
        }
        y
    }

    /// Arcs `(from, to)` used by vehicle `k`; `None` denotes the start.
    pub fn arcs(&self, k: usize) -> Vec<(Option<usize>, usize)> {
        let r = &self.routes[k];
        let mut arcs = Vec::with_capacity(r.len() + 1);
        let mut prev = None;
        for &j in r.iter().chain(std::iter::once(&0)) {
            arcs.push((prev, j));
            prev = Some(j);
        }
        arcs
    }
}

/// Length of a route from `start` through `route` to the depot.
pub fn route_length(inst: &Instance, start: Point, route: &[usize]) -> f64 {
    let mut pos = start;
    let mut len = 0.0;
    for &j in route {
        let p = inst.node(j);
        len += dist(pos, p);
        pos = p;
    }
    len + dist(pos, inst.depot)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub constraint: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Report {
    pub violations: Vec<Violation>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first(&self) -> Option<&Violation> {
        self.violations.first()
    }
}

pub const ROUTE_COUNT: &str = "route-count";
pub const NODE_INDEX: &str = "node-index";
pub const VISIT_ONCE: &str = "visit-at-most-once";
pub const ROUTE_LENGTH: &str = "route-length";
pub const OBJECTIVE: &str = "objective";

/// Checks every structural constraint and recomputes the objective.
pub fn verify(inst: &Instance, sol: &Solution) -> Report {
    let mut violations = Vec::new();
    let mut push = |constraint, detail| violations.push(Violation { constraint, detail });
    if sol.routes.len() != inst.k() {
        push(ROUTE_COUNT, format!("{} routes for {} vehicles", sol.routes.len(), inst.k()));
    }
    let mut seen = vec![None; inst.n() + 1];
    for (k, route) in sol.routes.iter().enumerate() {
        for &j in route {
            if j == 0 || j > inst.n() {
                push(NODE_INDEX, format!("vehicle {k} lists node {j}"));
                continue;
            }
            if let Some(other) = seen[j] {
                push(VISIT_ONCE, format!("customer {j} on vehicles {other} and {k}"));
            }
            seen[j] = Some(k);
        }
        if k < inst.k() && route.iter().all(|&j| (1..=inst.n()).contains(&j)) {
            let v = inst.vehicles[k];
            let len = route_length(inst, v.start, route);
            if len > v.fuel + EPS {
                push(ROUTE_LENGTH, format!("vehicle {k} travels {len} with fuel {}", v.fuel));
            }
        }
    }
    let visited = seen.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(j, _)| j);
    let recomputed = inst.objective_of(visited);
    if (recomputed - sol.objective).abs() > EPS {
        push(OBJECTIVE, format!("reported {} but routes collect {recomputed}", sol.objective));
    }
    Report { violations }
}

/// Precomputed geometry for the searches.
struct Geometry {
    n: usize,
    /// `d[i][j]` between nodes `0..=n`.
    d: Vec<Vec<f64>>,
    /// `s[k][j]` from vehicle `k`'s start to node `j`.
    s: Vec<Vec<f64>>,
    prize: Vec<f64>,
    fuel: Vec<f64>,
}

impl Geometry {
    fn new(inst: &Instance) -> Self {
        let n = inst.n();
        let nodes: Vec<Point> = (0..=n).map(|j| inst.node(j)).collect();
        Self {
            n,
            d: nodes.iter().map(|a| nodes.iter().map(|b| dist(*a, *b)).collect()).collect(),
            s: inst
                .vehicles
                .iter()
                .map(|v| nodes.iter().map(|b| dist(v.start, *b)).collect())
                .collect(),
            prize: (0..=n).map(|j| inst.prize(j)).collect(),
            fuel: inst.vehicles.iter().map(|v| v.fuel).collect(),
        }
    }

    /// Distance from location `loc` of vehicle `k` (`None` = start) to `j`.
    #[inline]
    fn from(&self, k: usize, loc: Option<usize>, j: usize) -> f64 {
        match loc {
            None => self.s[k][j],
            Some(i) => self.d[i][j],
        }
    }

    fn objective(&self, mask: u64) -> f64 {
        (1..=self.n).filter(|j| mask >> j & 1 == 1).map(|j| self.prize[j]).sum()
    }
}

/// Search node: vehicle `k` at `loc` with `fuel`, customers in `mask` taken.
#[derive(Clone, Copy)]
struct Node {
    k: usize,
    loc: Option<usize>,
    fuel: f64,
    mask: u64,
}

type MemoKey = (usize, usize, u64);

fn memo_key(n: &Node) -> MemoKey {
    (n.k, n.loc.map_or(0, |l| l + 1), n.mask)
}

struct Search<'g> {
    g: &'g Geometry,
    k: usize,
    /// Customers reachable from the start by some vehicle after `k`.
    later: Vec<u64>,
    budget: u64,
    expansions: u64,
    exhausted: bool,
    memo: HashMap<MemoKey, f64>,
    path: Vec<Vec<usize>>,
}

impl<'g> Search<'g> {
    fn new(g: &'g Geometry, budget: u64) -> Self {
        let k = g.fuel.len();
        let mut later = vec![0u64; k + 1];
        for v in (0..k).rev() {
            let mut reach = 0u64;
            for j in 1..=g.n {
                if can_visit(g.fuel[v], g.s[v][j], g.d[j][0]) {
                    reach |= 1 << j;
                }
            }
            later[v] = later[v + 1] | reach;
        }
        Self {
            g,
            k,
            later,
            budget,
            expansions: 0,
            exhausted: false,
            memo: HashMap::new(),
            path: vec![Vec::new(); k],
        }
    }

    /// Admissible bound on the prize still collectable from `node`.
    fn bound(&self, node: &Node) -> f64 {
        let g = self.g;
        let mut total = 0.0;
        for j in 1..=g.n {
            if node.mask >> j & 1 == 1 {
                continue;
            }
            let now = can_visit(node.fuel, g.from(node.k, node.loc, j), g.d[j][0]);
            if now || self.later[node.k + 1] >> j & 1 == 1 {
                total += g.prize[j];
            }
        }
        total
    }

    fn children(&self, node: &Node) -> Vec<usize> {
        let g = self.g;
        (1..=g.n)
            .filter(|&j| node.mask >> j & 1 == 0 && can_visit(node.fuel, g.from(node.k, node.loc, j), g.d[j][0]))
            .collect()
    }

    fn advance(&self, node: &Node, j: usize) -> Node {
        if j == 0 {
            let k = node.k + 1;
            Node {
                k,
                loc: None,
                fuel: if k < self.k { self.g.fuel[k] } else { 0.0 },
                mask: node.mask,
            }
        } else {
            Node {
                k: node.k,
                loc: Some(j),
                fuel: node.fuel - self.g.from(node.k, node.loc, j),
                mask: node.mask | 1 << j,
            }
        }
    }

    fn tick(&mut self) -> bool {
        if self.expansions >= self.budget {
            self.exhausted = true;
            return false;
        }
        self.expansions += 1;
        true
    }

    /// Best-first DFS for the optimal value. Updates `best` in place.
    fn maximize(&mut self, node: Node, collected: f64, best: &mut (f64, Vec<Vec<usize>>)) {
        if node.k == self.k {
            let value = self.g.objective(node.mask);
            if value > best.0 + EPS {
                *best = (value, self.path.clone());
            }
            return;
        }
        if !self.tick() {
            return;
        }
        if collected + self.bound(&node) <= best.0 + EPS {
            return;
        }
        let key = memo_key(&node);
        match self.memo.get(&key) {
            Some(&f) if f >= node.fuel => return,
            _ => {
                self.memo.insert(key, node.fuel);
            }
        }
        let mut kids = self.children(&node);
        let g = self.g;
        let desirability = |j: usize| g.prize[j] / g.from(node.k, node.loc, j).max(1e-12);
        kids.sort_by(|&a, &b| desirability(b).total_cmp(&desirability(a)).then(a.cmp(&b)));
        for j in kids {
            let child = self.advance(&node, j);
            self.path[node.k].push(j);
            self.maximize(child, collected + g.prize[j], best);
            self.path[node.k].pop();
            if self.exhausted {
                return;
            }
        }
        let child = self.advance(&node, 0);
        self.maximize(child, collected, best);
    }

    /// Lexicographic DFS for the first route set reaching `target`.
    fn first_reaching(&mut self, node: Node, collected: f64, target: f64) -> bool {
        if node.k == self.k {
            return self.g.objective(node.mask) >= target - EPS;
        }
        if !self.tick() {
            return false;
        }
        if collected + self.bound(&node) < target - EPS {
            return false;
        }
        let key = memo_key(&node);
        if let Some(&f) = self.memo.get(&key) {
            if f >= node.fuel {
                return false;
            }
        }
        let child = self.advance(&node, 0);
        if self.first_reaching(child, collected, target) {
            return true;
        }
        for j in self.children(&node) {
            let child = self.advance(&node, j);
            self.path[node.k].push(j);
            if self.first_reaching(child, collected + self.g.prize[j], target) {
                return true;
            }
            self.path[node.k].pop();
            if self.exhausted {
                return false;
            }
        }
        if !self.exhausted {
            let slot = self.memo.entry(key).or_insert(f64::NEG_INFINITY);
            *slot = slot.max(node.fuel);
        }
        false
    }
}

/// Branch-and-bound over sequential route construction. The first pass finds
/// the optimal value; the second returns the lexicographically smallest route
/// set attaining it. Each pass may expand at most `budget` nodes; if the first
/// pass runs out the best incumbent is returned with `optimal == false`.
pub fn solve_exact(inst: &Instance, budget: u64) -> Result<Solution> {
    if inst.n() > EXACT_MAX_N {
        return Err(CoreError::TooLarge {
            solver: "solve_exact",
            n: inst.n(),
            limit: EXACT_MAX_N,
        });
    }
    if budget == 0 {
        return Err(CoreError::InvalidConfig("node budget must be positive".into()));
    }
    let g = Geometry::new(inst);
    let root = Node {
        k: 0,
        loc: None,
        fuel: g.fuel[0],
        mask: 0,
    };
    let mut search = Search::new(&g, budget);
    let mut best = (0.0, vec![Vec::new(); inst.k()]);
    search.maximize(root, 0.0, &mut best);
    let mut expansions = search.expansions;
    if search.exhausted {
        return Ok(Solution::from_routes(inst, best.1, false, expansions));
    }

    let mut lex = Search::new(&g, budget);
    let found = lex.first_reaching(root, 0.0, best.0);
    expansions += lex.expansions;
    let routes = if found { lex.path } else { best.1 };
    Ok(Solution::from_routes(inst, routes, true, expansions))
}

/// Exhaustive enumeration: every feasible route of every vehicle, reduced to
/// the lexicographically smallest route per visited set, then every
/// combination of pairwise disjoint sets.
pub fn brute_force_enum(inst: &Instance) -> Result<Solution> {
    let n = inst.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(CoreError::TooLarge {
            solver: "brute_force_enum",
            n,
            limit: BRUTE_FORCE_MAX_N,
        });
    }
    let per_vehicle: Vec<HashMap<u64, Vec<usize>>> = inst
        .vehicles
        .iter()
        .map(|v| {
            let mut best: HashMap<u64, Vec<usize>> = HashMap::new();
            let mut route = Vec::new();
            enumerate_routes(inst, v.start, v.fuel, 0, &mut route, &mut best);
            best
        })
        .collect();

    let mut choice: Vec<(u64, &Vec<usize>)> = Vec::new();
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    combine(inst, &per_vehicle, 0, 0, &mut choice, &mut best);
    let routes = best.map(|b| b.1).unwrap_or_else(|| vec![Vec::new(); inst.k()]);
    let expansions = per_vehicle.iter().map(|m| m.len() as u64).sum();
    Ok(Solution::from_routes(inst, routes, true, expansions))
}

fn enumerate_routes(
    inst: &Instance,
    pos: Point,
    fuel: f64,
    mask: u64,
    route: &mut Vec<usize>,
    best: &mut HashMap<u64, Vec<usize>>,
) {
    match best.get(&mask) {
        Some(r) if r.as_slice() <= route.as_slice() => {}
        _ => {
            best.insert(mask, route.clone());
        }
    }
    for j in 1..=inst.n() {
        if mask >> j & 1 == 1 {
            continue;
        }
        let p = inst.node(j);
        let d = dist(pos, p);
        if can_visit(fuel, d, dist(p, inst.depot)) {
            route.push(j);
            enumerate_routes(inst, p, fuel - d, mask | 1 << j, route, best);
            route.pop();
        }
    }
}

fn combine<'a>(
    inst: &Instance,
    per_vehicle: &'a [HashMap<u64, Vec<usize>>],
    k: usize,
    used: u64,
    choice: &mut Vec<(u64, &'a Vec<usize>)>,
    best: &mut Option<(f64, Vec<Vec<usize>>)>,
) {
    if k == per_vehicle.len() {
        let value = inst.objective_of((1..=inst.n()).filter(|j| used >> j & 1 == 1));
        let routes: Vec<Vec<usize>> = choice.iter().map(|(_, r)| (*r).clone()).collect();
        let better = match best {
            None => true,
            Some((v, r)) => value > *v + EPS || (value >= *v - EPS && routes < *r),
        };
        if better {
            *best = Some((value, routes));
        }
        return;
    }
    for (&mask, route) in &per_vehicle[k] {
        if mask & used == 0 {
            choice.push((mask, route));
            combine(inst, per_vehicle, k + 1, used | mask, choice, best);
            choice.pop();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsiliParams {
    pub samples: usize,
    /// Desirability exponent.
    pub r: f64,
    pub candidates: usize,
}

impl Default for TsiliParams {
    fn default() -> Self {
        Self {
            samples: 1280,
            r: 4.0,
            candidates: 4,
        }
    }
}

/// Stochastic constructive heuristic: vehicles route one after another in
/// instance order; each step draws among the `candidates` most desirable
/// feasible customers with probability proportional to
/// `(prize / distance)^r`. The best of `samples` rollouts is returned.
pub fn tsili_solve(inst: &Instance, params: &TsiliParams, seed: u64) -> Result<Solution> {
    if params.samples == 0 || params.candidates == 0 || !(params.r > 0.0) {
        return Err(CoreError::InvalidConfig(format!("invalid Tsiligirides parameters {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Solution> = None;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(inst.n());
    for _ in 0..params.samples {
        let mut visited = vec![false; inst.n() + 1];
        let mut routes = vec![Vec::new(); inst.k()];
        for (k, v) in inst.vehicles.iter().enumerate() {
            let (mut pos, mut fuel) = (v.start, v.fuel);
            loop {
                scored.clear();
                for (i, c) in inst.customers.iter().enumerate() {
                    let j = i + 1;
                    let d = dist(pos, c.pos);
                    if !visited[j] && can_visit(fuel, d, dist(c.pos, inst.depot)) {
                        scored.push(((c.prize / d.max(1e-12)).powf(params.r), j));
                    }
                }
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                scored.truncate(params.candidates);
                let total: f64 = scored.iter().map(|s| s.0).sum();
                if !(total > 0.0) || !total.is_finite() {
                    break;
                }
                let pick = if scored.len() == 1 {
                    scored[0].1
                } else {
                    let mut u = rng.gen::<f64>() * total;
                    let mut pick = scored[scored.len() - 1].1;
                    for &(w, j) in &scored {
                        if u < w {
                            pick = j;
                            break;
                        }
                        u -= w;
                    }
                    pick
                };
                let p = inst.node(pick);
                fuel -= dist(pos, p);
                pos = p;
                visited[pick] = true;
                routes[k].push(pick);
            }
        }
        let sol = Solution::from_routes(inst, routes, false, 0);
        if best.as_ref().is_none_or(|b| sol.objective > b.objective) {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one sample"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate, Customer, GenConfig, PrizeMode, Vehicle};

    const BUDGET: u64 = 50_000_000;

    fn single(fuel: f64) -> Instance {
        Instance {
            depot: Point::new(0.0, 0.0),
            customers: vec![Customer {
                pos: Point::new(0.5, 0.5),
                prize: 1.0,
            }],
            vehicles: vec![Vehicle {
                start: Point::new(1.0, 1.0),
                fuel,
            }],
            t_max: 1.5,
            prize_mode: PrizeMode::Constant,
            seed: 0,
        }
    }

    fn random(n: usize, k: usize, mode: PrizeMode, seed: u64) -> Instance {
        generate(&GenConfig {
            n,
            k,
            t_max: 1.5,
            prize_mode: mode,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn single_customer_geometry() {
        let sol = solve_exact(&single(1.5), BUDGET).unwrap();
        assert_eq!(sol.objective, 1.0);
        assert_eq!(sol.routes, vec![vec![1]]);
        assert!(sol.optimal);
        // The detour needs sqrt(2) > 1.0.
        let sol = solve_exact(&single(1.0), BUDGET).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.routes, vec![Vec::<usize>::new()]);
    }

    #[test]
    fn brute_force_trivial_cases() {
        let mut empty = single(1.5);
        empty.customers.clear();
        assert_eq!(brute_force_enum(&empty).unwrap().objective, 0.0);
        let mut two = single(1.5);
        two.vehicles.push(Vehicle {
            start: Point::new(0.0, 1.0),
            fuel: 1.5,
        });
        assert_eq!(brute_force_enum(&two).unwrap().objective, 1.0);
        let big = random(9, 2, PrizeMode::Constant, 0);
        assert!(matches!(brute_force_enum(&big), Err(CoreError::TooLarge { .. })));
    }

    #[test]
    fn exact_matches_brute_force_routes_and_objective() {
        for seed in 0..60 {
            for mode in [PrizeMode::Constant, PrizeMode::Uniform] {
                let inst = random(5, 2, mode, seed);
                let e = solve_exact(&inst, BUDGET).unwrap();
                let b = brute_force_enum(&inst).unwrap();
                assert_eq!(e.objective, b.objective, "seed {seed}");
                assert!(verify(&inst, &e).ok());
                assert!(verify(&inst, &b).ok());
                assert_eq!(e.routes, b.routes, "seed {seed}");
            }
        }
    }

    #[test]
    fn tiny_budget_reports_non_optimal() {
        let inst = random(10, 2, PrizeMode::Uniform, 3);
        let sol = solve_exact(&inst, 5).unwrap();
        assert!(!sol.optimal);
        assert!(verify(&inst, &sol).ok());
        assert!(solve_exact(&inst, 0).is_err());
    }

    #[test]
    fn verify_names_constraints() {
        let inst = random(5, 2, PrizeMode::Constant, 1);
        let sol = solve_exact(&inst, BUDGET).unwrap();
        assert!(verify(&inst, &sol).ok());

        let mut dup = Solution::from_routes(&inst, vec![vec![1], vec![1]], false, 0);
        assert_eq!(verify(&inst, &dup).first().unwrap().constraint, VISIT_ONCE);
        dup.routes.pop();
        assert_eq!(verify(&inst, &dup).first().unwrap().constraint, ROUTE_COUNT);

        let mut over = single(1.5);
        over.vehicles[0].fuel = route_length(&over, over.vehicles[0].start, &[1]) - 0.1;
        let sol = Solution::from_routes(&over, vec![vec![1]], false, 0);
        assert_eq!(verify(&over, &sol).first().unwrap().constraint, ROUTE_LENGTH);

        let mut bad = solve_exact(&inst, BUDGET).unwrap();
        bad.objective += 1.0;
        assert_eq!(verify(&inst, &bad).first().unwrap().constraint, OBJECTIVE);

        let bad_node = Solution::from_routes(&inst, vec![vec![0], vec![9]], false, 0);
        assert_eq!(verify(&inst, &bad_node).first().unwrap().constraint, NODE_INDEX);
    }

    #[test]
    fn incidence_and_arcs() {
        let sol = Solution {
            routes: vec![vec![2, 1], vec![]],
            objective: 2.0,
            optimal: false,
            expansions: 0,
        };
        let y = sol.visit_incidence(2);
        assert_eq!(y, vec![vec![true, true], vec![true, false], vec![true, false]]);
        assert_eq!(sol.arcs(0), vec![(None, 2), (Some(2), 1), (Some(1), 0)]);
        assert_eq!(sol.arcs(1), vec![(None, 0)]);
    }

    #[test]
    fn tsili_degenerate_and_unreachable() {
        let inst = random(8, 2, PrizeMode::Uniform, 5);
        let one = TsiliParams {
            samples: 3,
            r: 2.0,
            candidates: 1,
        };
        let a = tsili_solve(&inst, &one, 1).unwrap();
        let b = tsili_solve(&inst, &one, 99).unwrap();
        assert_eq!(a, b);
        assert!(verify(&inst, &a).ok());

        let mut stuck = single(1.5);
        stuck.customers[0].pos = Point::new(0.5, 0.6);
        stuck.vehicles[0].fuel = dist(stuck.vehicles[0].start, stuck.depot);
        let sol = tsili_solve(&stuck, &TsiliParams::default(), 0).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.routes, vec![Vec::<usize>::new()]);
        assert!(tsili_solve(&inst, &TsiliParams { samples: 0, ..one }, 0).is_err());
    }

    #[test]
    fn tsili_never_beats_exact() {
        for seed in 0..20 {
            let inst = random(7, 2, PrizeMode::Uniform, seed);
            let exact = solve_exact(&inst, BUDGET).unwrap();
            let h = tsili_solve(
                &inst,
                &TsiliParams {
                    samples: 64,
                    ..TsiliParams::default()
                },
                seed,
            )
            .unwrap();
            assert!(verify(&inst, &h).ok());
            assert!(h.objective <= exact.objective + EPS);
        }
    }
}
