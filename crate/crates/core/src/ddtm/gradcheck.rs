//! Finite-difference probes of the full policy-gradient surrogate under
//! teacher forcing.

use mstop_numkit::gradcheck::{rel_err, H, TOL};
use mstop_numkit::ParamId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DdtmConfig, DdtmParams, DecodeMode};
use crate::error::Result;
use crate::instance::{generate, GenConfig, Instance, PrizeMode};

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub probes: usize,
    pub worst: f64,
    pub failures: usize,
    pub first_failure: Option<String>,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.worst <= TOL
    }
}

/// `-(advantage * sum log p + alpha * sum H)` along `actions`.
pub fn surrogate_loss(
    params: &DdtmParams,
    inst: &Instance,
    order: &[usize],
    actions: &[usize],
    advantage: f64,
    alpha: f64,
) -> Result<(mstop_numkit::Tape, mstop_numkit::Var)> {
    let r = params.rollout_taped(inst, order, DecodeMode::Forced(actions))?;
    let mut tape = r.tape;
    let pg = tape.scale(r.logp_sum, -advantage)?;
    let ent = tape.scale(r.entropy_sum, -alpha)?;
    let loss = tape.add(pg, ent)?;
    Ok((tape, loss))
}

/// Compares analytic gradients of [`surrogate_loss`] against central
/// differences on `probes` random trainable coordinates.
pub fn check_surrogate(probes: usize, seed: u64, advantage: f64, alpha: f64) -> Result<LossCheck> {
    let config = DdtmConfig {
        d: 8,
        heads: 2,
        d_ff: 16,
        n_enc: 2,
        n_dec: 2,
        clip: 10.0,
    };
    let params = DdtmParams::new(config, seed)?;
    let inst = generate(&GenConfig {
        n: 5,
        k: 2,
        t_max: 2.0,
        prize_mode: PrizeMode::Uniform,
        seed,
    })?;
    let order = [1, 0];
    let actions = params.rollout(&inst, &order, DecodeMode::Sample(seed))?.actions();

    let (tape, loss) = surrogate_loss(&params, &inst, &order, &actions, advantage, alpha)?;
    let grads = tape.backward(loss)?.param_grads(&params.store);
    let trainable: Vec<ParamId> = params.store.trainable_ids().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut report = LossCheck {
        probes,
        worst: 0.0,
        failures: 0,
        first_failure: None,
    };
    for probe in 0..probes {
        let id = trainable[rng.gen_range(0..trainable.len())];
        let len = params.store.get(id).len();
        let e = rng.gen_range(0..len);
        let eval = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            p.store.get_mut(id).data_mut()[e] += delta;
            let (t, l) = surrogate_loss(&p, &inst, &order, &actions, advantage, alpha)?;
            Ok(t.scalar(l))
        };
        let numeric = (eval(H)? - eval(-H)?) / (2.0 * H);
        let analytic = grads.get(id).map_or(0.0, |g| g[e]);
        let err = rel_err(analytic, numeric);
        report.worst = report.worst.max(err);
        if err > TOL {
            report.failures += 1;
            report.first_failure.get_or_insert_with(|| {
                format!(
                    "probe {probe}: {}[{e}] analytic {analytic} vs numeric {numeric}",
                    params.store.name(id)
                )
            });
        }
    }
    Ok(report)
}
