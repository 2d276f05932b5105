use mstop_numkit::{BnStats, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DdtmConfig;
use crate::error::Result;

/// Batch-normalization slot: affine parameters plus running-statistic
/// buffers.
#[derive(Debug, Clone, Copy)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bn1: BnIds,
    pub ff0: ParamId,
    pub ff1: ParamId,
    pub bn2: BnIds,
}

/// `[wq, wk, wv, wo]` of one attention block.
pub type AttnIds = [ParamId; 4];

#[derive(Debug, Clone, Copy)]
pub struct DecLayerIds {
    pub sa: AttnIds,
    pub att: AttnIds,
}

#[derive(Debug, Clone)]
pub struct DdtmParams {
    pub config: DdtmConfig,
    pub store: ParamStore,
    pub init_depot: ParamId,
    pub init_node: ParamId,
    pub init_vehicle: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub proj: ParamId,
    pub dec: Vec<DecLayerIds>,
    pub graph: ParamId,
    pub final_q: ParamId,
    pub final_k: ParamId,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    bound: f64,
}

impl Builder {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let b = self.bound;
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-b..=b)).collect();
        Ok(self.store.register(name, Tensor::new(vec![rows, cols], data)?, true)?)
    }

    fn bn(&mut self, prefix: &str, d: usize) -> Result<BnIds> {
        Ok(BnIds {
            gamma: self.store.register(&format!("{prefix}.gamma"), Tensor::full(&[1, d], 1.0), true)?,
            beta: self.store.register(&format!("{prefix}.beta"), Tensor::zeros(&[1, d]), true)?,
            running_mean: self
                .store
                .register(&format!("{prefix}.running_mean"), Tensor::zeros(&[1, d]), false)?,
            running_var: self
                .store
                .register(&format!("{prefix}.running_var"), Tensor::full(&[1, d], 1.0), false)?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        Ok([
            self.weight(&format!("{prefix}.wq"), d, d)?,
            self.weight(&format!("{prefix}.wk"), d, d)?,
            self.weight(&format!("{prefix}.wv"), d, d)?,
            self.weight(&format!("{prefix}.wo"), d, d)?,
        ])
    }
}

impl DdtmParams {
    /// Registers every array; weights are uniform in `[-1/sqrt(d), 1/sqrt(d)]`,
    /// BN scales 1 and shifts 0.
    pub fn new(config: DdtmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: 1.0 / (d as f64).sqrt(),
        };
        let init_depot = b.weight("enc.init.depot", 2, d)?;
        let init_node = b.weight("enc.init.node", 3, d)?;
        let init_vehicle = b.weight("enc.init.vehicle", 3, d)?;
        let mut enc = Vec::with_capacity(config.n_enc);
        for l in 0..config.n_enc {
            let [wq, wk, wv, wo] = b.attn(&format!("enc.{l}"), d)?;
            let bn1 = b.bn(&format!("enc.{l}.bn1"), d)?;
            let ff0 = b.weight(&format!("enc.{l}.ff0"), d, config.d_ff)?;
            let ff1 = b.weight(&format!("enc.{l}.ff1"), config.d_ff, d)?;
            let bn2 = b.bn(&format!("enc.{l}.bn2"), d)?;
            enc.push(EncLayerIds {
                wq,
                wk,
                wv,
                wo,
                bn1,
                ff0,
                ff1,
                bn2,
            });
        }
        let proj = b.weight("dec.proj", d + 1, d)?;
        let mut dec = Vec::with_capacity(config.n_dec);
        for l in 0..config.n_dec {
            dec.push(DecLayerIds {
                sa: b.attn(&format!("dec.{l}.sa"), d)?,
                att: b.attn(&format!("dec.{l}.att"), d)?,
            });
        }
        let graph = b.weight("dec.graph", d, d)?;
        let final_q = b.weight("dec.final.wq", d, d)?;
        let final_k = b.weight("dec.final.wk", d, d)?;
        Ok(Self {
            config,
            store: b.store,
            init_depot,
            init_node,
            init_vehicle,
            enc,
            proj,
            dec,
            graph,
            final_q,
            final_k,
        })
    }

    /// BN slots in forward order (two per encoder layer).
    pub fn bn_slots(&self) -> Vec<BnIds> {
        self.enc.iter().flat_map(|l| [l.bn1, l.bn2]).collect()
    }

    /// Blends observed batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * mean(observed)`.
    /// `observed[i]` lists the statistics seen at slot `i`.
    pub fn update_running_stats(&mut self, observed: &[Vec<BnStats>], momentum: f64) {
        for (slot, stats) in self.bn_slots().into_iter().zip(observed) {
            if stats.is_empty() {
                continue;
            }
            let d = self.config.d;
            let count = stats.len() as f64;
            for (buffer, pick) in [
                (slot.running_mean, (|s: &BnStats| &s.mean) as fn(&BnStats) -> &Vec<f64>),
                (slot.running_var, |s: &BnStats| &s.var),
            ] {
                let mut avg = vec![0.0; d];
                for s in stats {
                    for (a, v) in avg.iter_mut().zip(pick(s)) {
                        *a += v / count;
                    }
                }
                let run = self.store.get_mut(buffer).data_mut();
                for (r, a) in run.iter_mut().zip(avg) {
                    *r = (1.0 - momentum) * *r + momentum * a;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_shapes_follow_config() {
        let cfg = DdtmConfig::default();
        let p = DdtmParams::new(cfg, 0).unwrap();
        assert_eq!(p.store.get(p.init_depot).shape(), &[2, cfg.d]);
        assert_eq!(p.store.get(p.init_node).shape(), &[3, cfg.d]);
        assert_eq!(p.store.get(p.proj).shape(), &[cfg.d + 1, cfg.d]);
        assert_eq!(p.store.get(p.enc[1].ff0).shape(), &[cfg.d, cfg.d_ff]);
        assert_eq!(p.store.get(p.enc[1].ff1).shape(), &[cfg.d_ff, cfg.d]);
        assert_eq!(p.bn_slots().len(), 2 * cfg.n_enc);
        assert!(!p.store.is_trainable(p.enc[0].bn1.running_mean));
        let bound = 1.0 / (cfg.d as f64).sqrt();
        assert!(p.store.get(p.graph).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = DdtmParams::new(DdtmConfig::default(), 5).unwrap();
        let b = DdtmParams::new(DdtmConfig::default(), 5).unwrap();
        let c = DdtmParams::new(DdtmConfig::default(), 6).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn bad_head_split_is_rejected() {
        let cfg = DdtmConfig {
            d: 30,
            heads: 4,
            ..DdtmConfig::default()
        };
        assert!(DdtmParams::new(cfg, 0).is_err());
    }

    #[test]
    fn running_stats_move_by_momentum() {
        let mut p = DdtmParams::new(DdtmConfig::default(), 0).unwrap();
        let d = p.config.d;
        let stats = BnStats {
            mean: vec![1.0; d],
            var: vec![3.0; d],
            count: 4,
        };
        let mut observed = vec![Vec::new(); p.bn_slots().len()];
        observed[0] = vec![stats.clone(), stats];
        p.update_running_stats(&observed, 0.1);
        let slot = p.bn_slots()[0];
        assert!(p.store.get(slot.running_mean).data().iter().all(|v| (v - 0.1).abs() < 1e-15));
        assert!(p.store.get(slot.running_var).data().iter().all(|v| (v - 1.2).abs() < 1e-15));
        let untouched = p.bn_slots()[1];
        assert!(p.store.get(untouched.running_var).data().iter().all(|v| *v == 1.0));
    }
}
