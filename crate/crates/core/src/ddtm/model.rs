//! Encoder, three-step decoder and trajectory rollouts.
//!
//! Encoder rows are ordered depot, customers `1..=n`, vehicles `0..K`.

use mstop_numkit::{additive_mask, BnMode, BnStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{AttnIds, BnIds, DdtmParams};
use crate::env::{State, StepRecord, Trajectory};
use crate::error::{CoreError, Result};
use crate::instance::Instance;

/// Sinusoidal position code with the parity taken on the flat index `i`
/// and exponent `2i/d`.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Embeddings {
    /// `[n + K + 1, d]`.
    pub h: Var,
    /// `[1, d]` mean over the active rows.
    pub graph: Var,
    /// Rows still in play: depot, unvisited customers, vehicles not yet home.
    pub active: Vec<bool>,
    /// Batch statistics of each BN slot, in forward order.
    pub bn_stats: Vec<BnStats>,
}

impl Embeddings {
    pub fn divisor(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode<'a> {
    Greedy,
    Sample(u64),
    /// Teacher forcing: take these actions in order.
    Forced(&'a [usize]),
}

/// A rollout together with its tape, for gradient computation.
pub struct TapedRollout {
    pub trajectory: Trajectory,
    pub tape: Tape,
    /// Sum of chosen-action log-probabilities.
    pub logp_sum: Var,
    /// Sum of per-step entropies.
    pub entropy_sum: Var,
    /// Per BN slot, the statistics of every encoder pass.
    pub bn_stats: Vec<Vec<BnStats>>,
}

/// Per-vehicle decoder state hoisted out of the inner loop.
struct VehicleContext {
    /// Keys and values of the encoder-decoder attention per decoder layer.
    att_kv: Vec<(Var, Var)>,
    final_k: Var,
    graph_q: Var,
    vehicle_row: usize,
    /// Self-attention keys and values of earlier steps, per decoder layer.
    history: Vec<(Vec<Var>, Vec<Var>)>,
}

/// Output of one decoding step over `{depot, customers}`.
pub struct StepOutput {
    /// Clamped logits before masking, `[1, n + 1]`.
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

impl DdtmParams {
    fn p(&self, tape: &mut Tape, id: mstop_numkit::ParamId) -> Var {
        tape.param(&self.store, id)
    }

    /// Multi-head attention of projected `q` over `k`, `v`; heads are
    /// concatenated, the output projection is left to the caller.
    fn heads(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&[f64]>) -> Result<Var> {
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut parts = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s, mask)?;
            parts.push(tape.matmul(a, vh)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(tape.concat(&parts)?)
        }
    }

    fn batch_norm(&self, tape: &mut Tape, x: Var, slot: BnIds, rows: &[bool]) -> Result<(Var, Option<BnStats>)> {
        let gamma = self.p(tape, slot.gamma);
        let beta = self.p(tape, slot.beta);
        Ok(tape.batch_norm(
            x,
            gamma,
            beta,
            BnMode::Train {
                rows: Some(rows),
                running_mean: self.store.get(slot.running_mean).data(),
                running_var: self.store.get(slot.running_var).data(),
            },
        )?)
    }

    /// Encodes the current graph: raw features of every row, then masked
    /// self-attention layers with BN, residuals and a feed-forward block.
    pub fn encode(&self, tape: &mut Tape, state: &State<'_>) -> Result<Embeddings> {
        let inst = state.instance();
        let (n, k) = (inst.n(), inst.k());
        if state.is_terminal() {
            return Err(CoreError::Terminal);
        }
        let depot_x = tape.constant(Tensor::row(vec![inst.depot.x, inst.depot.y]))?;
        let node_x = tape.constant(Tensor::new(
            vec![n, 3],
            inst.customers
                .iter()
                .zip(&state.residual()[1..])
                .flat_map(|(c, p)| [c.pos.x, c.pos.y, *p])
                .collect(),
        )?)?;
        let veh_x = tape.constant(Tensor::new(
            vec![k, 3],
            state.vehicles().iter().flat_map(|v| [v.pos.x, v.pos.y, v.fuel]).collect(),
        )?)?;
        let w0 = self.p(tape, self.init_depot);
        let wn = self.p(tape, self.init_node);
        let wv = self.p(tape, self.init_vehicle);
        let h0 = tape.matmul(depot_x, w0)?;
        let hn = tape.matmul(node_x, wn)?;
        let hv = tape.matmul(veh_x, wv)?;
        let mut h = tape.stack_rows(&[h0, hn, hv])?;

        let mut active = Vec::with_capacity(n + k + 1);
        active.push(true);
        active.extend(state.visited()[1..].iter().map(|v| !v));
        active.extend(state.vehicles().iter().map(|v| !v.done));
        let rows = active.len();
        let mut mask = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                if i != j && !(active[i] && active[j]) {
                    mask[i * rows + j] = mstop_numkit::MASK_NEG;
                }
            }
        }

        let mut bn_stats = Vec::with_capacity(2 * self.enc.len());
        for layer in &self.enc {
            let (wq, wk, wv, wo) = (
                self.p(tape, layer.wq),
                self.p(tape, layer.wk),
                self.p(tape, layer.wv),
                self.p(tape, layer.wo),
            );
            let q = tape.matmul(h, wq)?;
            let kk = tape.matmul(h, wk)?;
            let vv = tape.matmul(h, wv)?;
            let z = self.heads(tape, q, kk, vv, Some(&mask))?;
            let mha = tape.matmul(z, wo)?;
            let res = tape.add(h, mha)?;
            let (h1, s1) = self.batch_norm(tape, res, layer.bn1, &active)?;
            let f0 = self.p(tape, layer.ff0);
            let f1 = self.p(tape, layer.ff1);
            let ff = tape.matmul(h1, f0)?;
            let ff = tape.relu(ff)?;
            let ff = tape.matmul(ff, f1)?;
            let res = tape.add(ff, h1)?;
            let (h2, s2) = self.batch_norm(tape, res, layer.bn2, &active)?;
            bn_stats.extend(s1);
            bn_stats.extend(s2);
            h = h2;
        }
        let keep: Vec<usize> = (0..rows).filter(|&i| active[i]).collect();
        let kept = tape.select_rows(h, &keep)?;
        let graph = tape.mean(kept, 0)?;
        Ok(Embeddings {
            h,
            graph,
            active,
            bn_stats,
        })
    }

    fn attn_params(&self, tape: &mut Tape, ids: AttnIds) -> [Var; 4] {
        ids.map(|id| self.p(tape, id))
    }

    fn vehicle_context(&self, tape: &mut Tape, emb: &Embeddings, n: usize, vehicle: usize) -> Result<VehicleContext> {
        let vehicle_row = n + 1 + vehicle;
        let mut node_rows: Vec<usize> = (0..=n).collect();
        node_rows.push(vehicle_row);
        let h_node = tape.select_rows(emb.h, &node_rows)?;
        let mut att_kv = Vec::with_capacity(self.dec.len());
        for layer in &self.dec {
            let [_, wk, wv, _] = self.attn_params(tape, layer.att);
            att_kv.push((tape.matmul(h_node, wk)?, tape.matmul(h_node, wv)?));
        }
        let nodes_only: Vec<usize> = (0..=n).collect();
        let h_tilde = tape.select_rows(emb.h, &nodes_only)?;
        let fk = self.p(tape, self.final_k);
        let final_k = tape.matmul(h_tilde, fk)?;
        let wg = self.p(tape, self.graph);
        let graph_q = tape.matmul(emb.graph, wg)?;
        Ok(VehicleContext {
            att_kv,
            final_k,
            graph_q,
            vehicle_row,
            history: vec![(Vec::new(), Vec::new()); self.dec.len()],
        })
    }

    /// One decoding step: context row, `n_dec` layers of self-attention over
    /// the partial route and masked attention over the candidate nodes, then
    /// the clamped single-head pointer.
    fn decode_step(
        &self,
        tape: &mut Tape,
        emb: &Embeddings,
        ctx: &mut VehicleContext,
        current_row: usize,
        fuel: f64,
        t_dec: usize,
        feasible: &[bool],
    ) -> Result<StepOutput> {
        let d = self.config.d;
        let cur = tape.select_rows(emb.h, &[current_row])?;
        let fuel_v = tape.constant(Tensor::new(vec![1, 1], vec![fuel])?)?;
        let pair = tape.concat(&[cur, fuel_v])?;
        let wp = self.p(tape, self.proj);
        let x = tape.matmul(pair, wp)?;
        let pe = tape.constant(Tensor::row(positional_encoding(t_dec, d)))?;
        let mut x = tape.add(x, pe)?;

        let mut node_mask = additive_mask(feasible);
        node_mask.push(0.0);
        for (l, layer) in self.dec.iter().enumerate() {
            let [wq, wk, wv, wo] = self.attn_params(tape, layer.sa);
            let q = tape.matmul(x, wq)?;
            let k_new = tape.matmul(x, wk)?;
            let v_new = tape.matmul(x, wv)?;
            let (hk, hv) = &mut ctx.history[l];
            let (keys, values) = if hk.is_empty() {
                (k_new, v_new)
            } else {
                (tape.stack_rows(hk)?, tape.stack_rows(hv)?)
            };
            hk.push(k_new);
            hv.push(v_new);
            let z = self.heads(tape, q, keys, values, None)?;
            let x_sa = tape.matmul(z, wo)?;

            let [aq, _, _, ao] = self.attn_params(tape, layer.att);
            let q = tape.matmul(x_sa, aq)?;
            let (ak, av) = ctx.att_kv[l];
            let z = self.heads(tape, q, ak, av, Some(&node_mask))?;
            x = tape.matmul(z, ao)?;
        }

        let x = tape.add(x, ctx.graph_q)?;
        let fq = self.p(tape, self.final_q);
        let q = tape.matmul(x, fq)?;
        let u = tape.matmul_nt(q, ctx.final_k)?;
        let u = tape.scale(u, 1.0 / (d as f64).sqrt())?;
        let u = tape.tanh(u)?;
        let logits = tape.scale(u, self.config.clip)?;
        let mask = additive_mask(feasible);
        let probs = tape.softmax(logits, Some(&mask))?;
        let log_probs = tape.log_softmax(logits, Some(&mask))?;
        Ok(StepOutput {
            logits,
            probs,
            log_probs,
        })
    }

    /// Builds a complete trajectory for `order` on a single tape.
    pub fn rollout_taped(&self, inst: &Instance, order: &[usize], mode: DecodeMode<'_>) -> Result<TapedRollout> {
        let mut tape = Tape::new();
        let mut state = State::reset(inst, order)?;
        let mut rng = match mode {
            DecodeMode::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        let n = inst.n();
        let mut steps = Vec::new();
        let mut logp_sum: Option<Var> = None;
        let mut entropy_sum: Option<Var> = None;
        let mut bn_stats = vec![Vec::new(); 2 * self.enc.len()];

        while let Some(vehicle) = state.active() {
            let emb = self.encode(&mut tape, &state)?;
            for (slot, s) in bn_stats.iter_mut().zip(&emb.bn_stats) {
                slot.push(s.clone());
            }
            let mut ctx = self.vehicle_context(&mut tape, &emb, n, vehicle)?;
            let mut current_row = ctx.vehicle_row;
            loop {
                let feasible = state.feasible_mask()?;
                let fuel = state.vehicles()[vehicle].fuel;
                let out = self.decode_step(&mut tape, &emb, &mut ctx, current_row, fuel, state.t_dec(), &feasible)?;
                let probs = tape.value(out.probs).data().to_vec();
                let action = match mode {
                    DecodeMode::Greedy => argmax(&probs),
                    DecodeMode::Sample(_) => sample(&probs, rng.as_mut().expect("sampling rng")),
                    DecodeMode::Forced(actions) => *actions.get(steps.len()).ok_or_else(|| {
                        CoreError::CountMismatch(format!("forced actions exhausted after {} steps", actions.len()))
                    })?,
                };
                if action > n || !feasible[action] {
                    return Err(CoreError::Infeasible { action, vehicle });
                }
                let chosen = tape.slice_cols(out.log_probs, action, 1)?;
                let plogp = tape.mul(out.probs, out.log_probs)?;
                let neg_h = tape.sum(plogp)?;
                let entropy = tape.scale(neg_h, -1.0)?;
                let t = state.t();
                state.step(action)?;
                steps.push(StepRecord {
                    t,
                    vehicle,
                    action,
                    fuel_after: state.vehicles()[vehicle].fuel,
                    logprob: tape.scalar(chosen),
                    entropy: tape.scalar(entropy),
                });
                let chosen = tape.sum(chosen)?;
                logp_sum = Some(match logp_sum {
                    Some(acc) => tape.add(acc, chosen)?,
                    None => chosen,
                });
                entropy_sum = Some(match entropy_sum {
                    Some(acc) => tape.add(acc, entropy)?,
                    None => entropy,
                });
                if action == 0 {
                    break;
                }
                current_row = action;
            }
        }
        if let DecodeMode::Forced(actions) = mode {
            if actions.len() != steps.len() {
                return Err(CoreError::CountMismatch(format!(
                    "{} forced actions but the episode ended after {}",
                    actions.len(),
                    steps.len()
                )));
            }
        }
        let (logp_sum, entropy_sum) = match (logp_sum, entropy_sum) {
            (Some(l), Some(h)) => (l, h),
            _ => return Err(CoreError::Terminal),
        };
        let trajectory = Trajectory {
            order: order.to_vec(),
            steps,
            routes: state.routes().to_vec(),
            reward: state.reward(),
            terminal: true,
        };
        Ok(TapedRollout {
            trajectory,
            tape,
            logp_sum,
            entropy_sum,
            bn_stats,
        })
    }

    pub fn rollout(&self, inst: &Instance, order: &[usize], mode: DecodeMode<'_>) -> Result<Trajectory> {
        Ok(self.rollout_taped(inst, order, mode)?.trajectory)
    }

    /// Action distribution at the first step of `order`, for inspection.
    pub fn first_step(&self, inst: &Instance, order: &[usize]) -> Result<(Vec<f64>, Vec<f64>, Embeddings, Tape)> {
        let mut tape = Tape::new();
        let state = State::reset(inst, order)?;
        let vehicle = state.active().ok_or(CoreError::Terminal)?;
        let emb = self.encode(&mut tape, &state)?;
        let mut ctx = self.vehicle_context(&mut tape, &emb, inst.n(), vehicle)?;
        let feasible = state.feasible_mask()?;
        let fuel = state.vehicles()[vehicle].fuel;
        let row = ctx.vehicle_row;
        let out = self.decode_step(&mut tape, &emb, &mut ctx, row, fuel, 0, &feasible)?;
        let logits = tape.value(out.logits).data().to_vec();
        let probs = tape.value(out.probs).data().to_vec();
        Ok((logits, probs, emb, tape))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// Categorical draw; zero-probability entries are never returned.
pub fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
