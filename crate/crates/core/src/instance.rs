//! Problem instances: generation, unit-square symmetries, distances and
//! JSON-lines persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const DATASET_VERSION: u32 = 1;

/// Rejection-sampling cap for vehicle starts that cannot reach the depot.
const MAX_START_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Euclidean length. Symmetric bit-for-bit since squares do not depend on
/// the sign of the difference.
pub fn dist(a: Point, b: Point) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrizeMode {
    Constant,
    Uniform,
}

impl std::str::FromStr for PrizeMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "uniform" => Ok(Self::Uniform),
            other => Err(CoreError::InvalidConfig(format!("unknown prize mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PrizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Customer {
    pub pos: Point,
    pub prize: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle {
    pub start: Point,
    /// Remaining travel budget at the start.
    pub fuel: f64,
}

/// Node 0 is the depot and nodes `1..=n` are customers. Vehicle starts are
/// addressed separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub depot: Point,
    pub customers: Vec<Customer>,
    pub vehicles: Vec<Vehicle>,
    pub t_max: f64,
    pub prize_mode: PrizeMode,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Depot,
    /// 1-based customer index.
    Customer(usize),
    /// 0-based vehicle index.
    VehicleStart(usize),
}

impl Instance {
    pub fn n(&self) -> usize {
        self.customers.len()
    }

    pub fn k(&self) -> usize {
        self.vehicles.len()
    }

    /// Position of node `j` (0 depot, `1..=n` customers). Panics when out of
    /// range; see [`Instance::point`] for the checked form.
    pub fn node(&self, j: usize) -> Point {
        if j == 0 {
            self.depot
        } else {
            self.customers[j - 1].pos
        }
    }

    /// Original prize of node `j`; the depot has none.
    pub fn prize(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.customers[j - 1].prize
        }
    }

    pub fn point(&self, r: NodeRef) -> Result<Point> {
        match r {
            NodeRef::Depot => Ok(self.depot),
            NodeRef::Customer(i) if (1..=self.n()).contains(&i) => Ok(self.customers[i - 1].pos),
            NodeRef::VehicleStart(k) if k < self.k() => Ok(self.vehicles[k].start),
            other => Err(CoreError::InvalidReference(format!(
                "{other:?} (n = {}, K = {})",
                self.n(),
                self.k()
            ))),
        }
    }

    pub fn distance(&self, a: NodeRef, b: NodeRef) -> Result<f64> {
        Ok(dist(self.point(a)?, self.point(b)?))
    }

    /// Sum of original prizes over the customers in `visited`, accumulated in
    /// ascending node order. Out-of-range entries are ignored.
    pub fn objective_of<I: IntoIterator<Item = usize>>(&self, visited: I) -> f64 {
        let n = self.n();
        let mut nodes: Vec<usize> = visited.into_iter().filter(|j| (1..=n).contains(j)).collect();
        nodes.sort_unstable();
        nodes.dedup();
        nodes.into_iter().map(|j| self.prize(j)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |p: Point| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y);
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("t_max = {}", self.t_max)));
        }
        if !inside(self.depot) {
            return Err(CoreError::InvalidConfig("depot outside the unit square".into()));
        }
        for (i, c) in self.customers.iter().enumerate() {
            if !inside(c.pos) {
                return Err(CoreError::InvalidConfig(format!("customer {} outside the unit square", i + 1)));
            }
            let ok = match self.prize_mode {
                PrizeMode::Constant => c.prize == 1.0,
                PrizeMode::Uniform => (0.0..=1.0).contains(&c.prize),
            };
            if !ok {
                return Err(CoreError::InvalidConfig(format!(
                    "customer {} prize {} invalid for {} prizes",
                    i + 1,
                    c.prize,
                    self.prize_mode
                )));
            }
        }
        if self.vehicles.is_empty() {
            return Err(CoreError::InvalidConfig("no vehicles".into()));
        }
        for (k, v) in self.vehicles.iter().enumerate() {
            if !inside(v.start) {
                return Err(CoreError::InvalidConfig(format!("vehicle {k} outside the unit square")));
            }
            let home = dist(v.start, self.depot);
            if !(v.fuel >= home && v.fuel <= self.t_max) {
                return Err(CoreError::InvalidConfig(format!(
                    "vehicle {k} fuel {} outside [{home}, {}]",
                    v.fuel, self.t_max
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub k: usize,
    pub t_max: f64,
    pub prize_mode: PrizeMode,
    pub seed: u64,
}

/// `(n, K, T_max)` of the named benchmark sizes.
pub fn preset(name: &str) -> Option<(usize, usize, f64)> {
    match name {
        "mstop10" => Some((10, 2, 1.5)),
        "mstop20" => Some((20, 2, 2.0)),
        "mstop50" => Some((50, 3, 3.0)),
        "mstop70" => Some((70, 3, 3.0)),
        _ => None,
    }
}

pub const PRESETS: [&str; 4] = ["mstop10", "mstop20", "mstop50", "mstop70"];

impl GenConfig {
    pub fn from_preset(name: &str, prize_mode: PrizeMode, seed: u64) -> Result<Self> {
        let (n, k, t_max) = preset(name).ok_or_else(|| {
            CoreError::InvalidConfig(format!("unknown preset `{name}` (expected one of {PRESETS:?})"))
        })?;
        Ok(Self {
            n,
            k,
            t_max,
            prize_mode,
            seed,
        })
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Samples an instance. Deterministic in `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<Instance> {
    if cfg.n == 0 || cfg.k == 0 || !(cfg.t_max > 0.0 && cfg.t_max.is_finite()) {
        return Err(CoreError::InvalidConfig(format!(
            "need n >= 1, K >= 1 and finite t_max > 0 (got n = {}, K = {}, t_max = {})",
            cfg.n, cfg.k, cfg.t_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let point = |rng: &mut ChaCha8Rng| Point::new(rng.gen(), rng.gen());
    let depot = point(&mut rng);
    let customers = (0..cfg.n)
        .map(|_| {
            let pos = point(&mut rng);
            let prize = match cfg.prize_mode {
                PrizeMode::Constant => 1.0,
                PrizeMode::Uniform => rng.gen(),
            };
            Customer { pos, prize }
        })
        .collect();
    let mut vehicles = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let mut attempts = 0;
        let (start, home) = loop {
            let p = point(&mut rng);
            let d = dist(p, depot);
            if d <= cfg.t_max {
                break (p, d);
            }
            attempts += 1;
            if attempts >= MAX_START_ATTEMPTS {
                return Err(CoreError::InvalidConfig(format!(
                    "t_max = {} too small: vehicle {k} start never within reach of the depot",
                    cfg.t_max
                )));
            }
        };
        let fuel = rng.gen_range(home..=cfg.t_max);
        vehicles.push(Vehicle { start, fuel });
    }
    Ok(Instance {
        depot,
        customers,
        vehicles,
        t_max: cfg.t_max,
        prize_mode: cfg.prize_mode,
        seed: cfg.seed,
    })
}

/// The eight symmetries of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    Swap,
    FlipY,
    SwapFlipX,
    FlipX,
    SwapFlipY,
    FlipXY,
    SwapFlipXY,
}

impl Transform {
    pub const ALL: [Transform; 8] = [
        Transform::Identity,
        Transform::Swap,
        Transform::FlipY,
        Transform::SwapFlipX,
        Transform::FlipX,
        Transform::SwapFlipY,
        Transform::FlipXY,
        Transform::SwapFlipXY,
    ];

    pub fn apply(self, p: Point) -> Point {
        let (x, y) = (p.x, p.y);
        let (a, b) = match self {
            Transform::Identity => (x, y),
            Transform::Swap => (y, x),
            Transform::FlipY => (x, 1.0 - y),
            Transform::SwapFlipX => (y, 1.0 - x),
            Transform::FlipX => (1.0 - x, y),
            Transform::SwapFlipY => (1.0 - y, x),
            Transform::FlipXY => (1.0 - x, 1.0 - y),
            Transform::SwapFlipXY => (1.0 - y, 1.0 - x),
        };
        Point::new(a, b)
    }

    pub fn label(self) -> &'static str {
        match self {
            Transform::Identity => "(x, y)",
            Transform::Swap => "(y, x)",
            Transform::FlipY => "(x, 1-y)",
            Transform::SwapFlipX => "(y, 1-x)",
            Transform::FlipX => "(1-x, y)",
            Transform::SwapFlipY => "(1-y, x)",
            Transform::FlipXY => "(1-x, 1-y)",
            Transform::SwapFlipXY => "(1-y, 1-x)",
        }
    }

    pub fn apply_instance(self, inst: &Instance) -> Instance {
        Instance {
            depot: self.apply(inst.depot),
            customers: inst
                .customers
                .iter()
                .map(|c| Customer {
                    pos: self.apply(c.pos),
                    prize: c.prize,
                })
                .collect(),
            vehicles: inst
                .vehicles
                .iter()
                .map(|v| Vehicle {
                    start: self.apply(v.start),
                    fuel: v.fuel,
                })
                .collect(),
            ..inst.clone()
        }
    }
}

/// All eight transformed copies, identity first.
pub fn augment(inst: &Instance) -> Vec<Instance> {
    Transform::ALL.iter().map(|t| t.apply_instance(inst)).collect()
}

#[derive(Serialize, Deserialize)]
struct Record {
    version: u32,
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    t_max: f64,
    prize_mode: PrizeMode,
    depot: [f64; 2],
    customers: Vec<[f64; 3]>,
    vehicles: Vec<[f64; 3]>,
    seed: u64,
}

impl From<&Instance> for Record {
    fn from(inst: &Instance) -> Self {
        Record {
            version: DATASET_VERSION,
            n: inst.n(),
            k: inst.k(),
            t_max: inst.t_max,
            prize_mode: inst.prize_mode,
            depot: [inst.depot.x, inst.depot.y],
            customers: inst.customers.iter().map(|c| [c.pos.x, c.pos.y, c.prize]).collect(),
            vehicles: inst.vehicles.iter().map(|v| [v.start.x, v.start.y, v.fuel]).collect(),
            seed: inst.seed,
        }
    }
}

impl Record {
    fn into_instance(self, line: usize) -> Result<Instance> {
        if self.version != DATASET_VERSION {
            return Err(CoreError::DatasetVersion {
                line,
                found: self.version,
                expected: DATASET_VERSION,
            });
        }
        if self.customers.len() != self.n || self.vehicles.len() != self.k {
            return Err(CoreError::Dataset {
                line,
                msg: format!(
                    "declares n = {}, K = {} but lists {} customers and {} vehicles",
                    self.n,
                    self.k,
                    self.customers.len(),
                    self.vehicles.len()
                ),
            });
        }
        let inst = Instance {
            depot: Point::new(self.depot[0], self.depot[1]),
            customers: self
                .customers
                .iter()
                .map(|c| Customer {
                    pos: Point::new(c[0], c[1]),
                    prize: c[2],
                })
                .collect(),
            vehicles: self
                .vehicles
                .iter()
                .map(|v| Vehicle {
                    start: Point::new(v[0], v[1]),
                    fuel: v[2],
                })
                .collect(),
            t_max: self.t_max,
            prize_mode: self.prize_mode,
            seed: self.seed,
        };
        inst.validate().map_err(|e| CoreError::Dataset {
            line,
            msg: e.to_string(),
        })?;
        Ok(inst)
    }
}

pub fn write_dataset<W: Write>(w: &mut W, instances: &[Instance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut *w, &Record::from(inst)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| CoreError::Dataset {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(rec.into_instance(line_no)?);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, instances)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, k: usize, t_max: f64, prize_mode: PrizeMode, seed: u64) -> GenConfig {
        GenConfig {
            n,
            k,
            t_max,
            prize_mode,
            seed,
        }
    }

    #[test]
    fn mstop10_constant_has_unit_prizes() {
        let g = GenConfig::from_preset("mstop10", PrizeMode::Constant, 3).unwrap();
        assert_eq!((g.n, g.k, g.t_max), (10, 2, 1.5));
        let inst = generate(&g).unwrap();
        assert_eq!(inst.n(), 10);
        assert!(inst.customers.iter().all(|c| c.prize == 1.0));
        inst.validate().unwrap();
    }

    #[test]
    fn mstop20_uniform_prizes_in_unit_interval() {
        let inst = generate(&GenConfig::from_preset("mstop20", PrizeMode::Uniform, 4).unwrap()).unwrap();
        assert_eq!((inst.n(), inst.k(), inst.t_max), (20, 2, 2.0));
        assert!(inst.customers.iter().all(|c| (0.0..=1.0).contains(&c.prize)));
    }

    #[test]
    fn presets_match_table() {
        assert_eq!(preset("mstop50"), Some((50, 3, 3.0)));
        assert_eq!(preset("mstop70"), Some((70, 3, 3.0)));
        assert!(GenConfig::from_preset("mstop30", PrizeMode::Constant, 0).is_err());
    }

    #[test]
    fn fuel_covers_return_trip_over_many_draws() {
        let mut draws = 0;
        for seed in 0..5000 {
            let inst = generate(&cfg(1, 2, 1.5, PrizeMode::Constant, seed)).unwrap();
            for v in &inst.vehicles {
                assert!(v.fuel >= dist(v.start, inst.depot) && v.fuel <= inst.t_max);
                draws += 1;
            }
        }
        assert_eq!(draws, 10_000);
    }

    #[test]
    fn small_t_max_rejects_far_starts() {
        for seed in 0..200 {
            let inst = generate(&cfg(3, 3, 0.3, PrizeMode::Uniform, seed)).unwrap();
            inst.validate().unwrap();
        }
    }

    #[test]
    fn invalid_extents_are_rejected() {
        assert!(generate(&cfg(0, 2, 1.0, PrizeMode::Constant, 0)).is_err());
        assert!(generate(&cfg(3, 0, 1.0, PrizeMode::Constant, 0)).is_err());
        assert!(generate(&cfg(3, 1, 0.0, PrizeMode::Constant, 0)).is_err());
        assert!(generate(&cfg(3, 1, f64::NAN, PrizeMode::Constant, 0)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&cfg(7, 3, 2.0, PrizeMode::Uniform, 11)).unwrap();
        let b = generate(&cfg(7, 3, 2.0, PrizeMode::Uniform, 11)).unwrap();
        let c = generate(&cfg(7, 3, 2.0, PrizeMode::Uniform, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn table_maps_on_reference_point() {
        let p = Point::new(0.2, 0.7);
        let q = Transform::FlipXY.apply(p);
        assert!((q.x - 0.8).abs() < 1e-15 && (q.y - 0.3).abs() < 1e-15);
        assert_eq!(Transform::Swap.apply(p), Point::new(0.7, 0.2));
    }

    #[test]
    fn augment_keeps_identity_first_and_attributes() {
        let inst = generate(&cfg(5, 2, 1.5, PrizeMode::Uniform, 9)).unwrap();
        let aug = augment(&inst);
        assert_eq!(aug.len(), 8);
        assert_eq!(aug[0], inst);
        for a in &aug {
            assert_eq!(a.t_max, inst.t_max);
            for (c, o) in a.customers.iter().zip(&inst.customers) {
                assert_eq!(c.prize, o.prize);
            }
            for (v, o) in a.vehicles.iter().zip(&inst.vehicles) {
                assert_eq!(v.fuel, o.fuel);
            }
            a.validate().unwrap();
        }
    }

    #[test]
    fn three_four_five() {
        let inst = Instance {
            depot: Point::new(0.0, 0.0),
            customers: vec![Customer {
                pos: Point::new(0.3, 0.4),
                prize: 1.0,
            }],
            vehicles: vec![Vehicle {
                start: Point::new(0.0, 0.0),
                fuel: 1.0,
            }],
            t_max: 1.0,
            prize_mode: PrizeMode::Constant,
            seed: 0,
        };
        let d = inst.distance(NodeRef::Depot, NodeRef::Customer(1)).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        assert_eq!(inst.distance(NodeRef::Customer(1), NodeRef::Customer(1)).unwrap(), 0.0);
        assert!(inst.distance(NodeRef::Customer(2), NodeRef::Depot).is_err());
        assert!(inst.distance(NodeRef::VehicleStart(1), NodeRef::Depot).is_err());
        assert!(inst.distance(NodeRef::Customer(0), NodeRef::Depot).is_err());
    }

    #[test]
    fn empty_dataset_reads_as_empty() {
        assert!(read_dataset(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn truncated_last_line_names_line() {
        let insts: Vec<_> = (0..3)
            .map(|s| generate(&cfg(4, 2, 1.5, PrizeMode::Uniform, s)).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &insts).unwrap();
        buf.truncate(buf.len() - 20);
        match read_dataset(buf.as_slice()) {
            Err(CoreError::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let inst = generate(&cfg(2, 1, 1.5, PrizeMode::Constant, 0)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &[inst]).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("\"version\":1", "\"version\":9");
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(CoreError::DatasetVersion { line: 1, found: 9, .. })
        ));
    }
}
