//! Central finite-difference probes of the backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{additive_mask, BnMode, Tape, Var};
use crate::tensor::Tensor;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Entries of magnitude in `[0.05, 1.5)`, random sign unless `positive`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.5);
            if positive || rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindReport {
    pub kind: &'static str,
    pub trials: usize,
    pub checked: usize,
    pub worst: f64,
    pub failures: usize,
    pub first_failure: Option<String>,
}

impl KindReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.worst <= TOL
    }
}

type ShapeFn<'a> = &'a dyn Fn(&mut ChaCha8Rng) -> Vec<(Vec<usize>, bool)>;
type OpFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

/// Builds `sum(op(inputs) * weights)` on a fresh tape.
fn build(inputs: &[Tensor], weights: &Tensor, op: OpFn<'_>) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).expect("finite input")).collect();
    let out = op(&mut tape, &vars);
    let w = tape.constant(weights.clone()).expect("finite weights");
    let prod = tape.mul(out, w).expect("weights match output");
    let loss = tape.sum(prod).expect("sum");
    (tape, loss, vars)
}

/// Probes every input element of `trials` random instances of one kind.
pub fn check_kind(kind: &'static str, seed: u64, trials: usize, shapes: ShapeFn<'_>, op: OpFn<'_>) -> KindReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = KindReport {
        kind,
        trials,
        checked: 0,
        worst: 0.0,
        failures: 0,
        first_failure: None,
    };
    for trial in 0..trials {
        let spec = shapes(&mut rng);
        let inputs: Vec<Tensor> = spec.iter().map(|(s, pos)| random_tensor(&mut rng, s, *pos)).collect();
        let out_shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true).expect("finite input")).collect();
            let out = op(&mut t, &vars);
            t.value(out).shape().to_vec()
        };
        let weights = random_tensor(&mut rng, &out_shape, false);
        let (tape, loss, vars) = build(&inputs, &weights, op);
        let grads = tape.backward(loss).expect("scalar loss");
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(&tape, *v).expect("leaf gradient");
            for e in 0..inputs[k].len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].data_mut()[e] += delta;
                    let (t, l, _) = build(&perturbed, &weights, op);
                    t.scalar(l)
                };
                let numeric = (eval(H) - eval(-H)) / (2.0 * H);
                let err = rel_err(analytic.data()[e], numeric);
                report.checked += 1;
                report.worst = report.worst.max(err);
                if err > TOL {
                    report.failures += 1;
                    report.first_failure.get_or_insert_with(|| {
                        format!(
                            "trial {trial}, input {k}, element {e}: analytic {} vs numeric {numeric}",
                            analytic.data()[e]
                        )
                    });
                }
            }
        }
    }
    report
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

fn matmul_gradients(trials: usize, out: &mut Vec<KindReport>) {
    out.push(check_kind(
        "matmul",
        1,
        trials,
        &|rng| {
            let (m, k, n) = dims(rng);
            vec![(vec![m, k], false), (vec![k, n], false)]
        },
        &|t, v| t.matmul(v[0], v[1]).unwrap(),
    ));
}

fn matmul_nt_gradients(trials: usize, out: &mut Vec<KindReport>) {
    out.push(check_kind(
        "matmul_nt",
        2,
        trials,
        &|rng| {
            let (m, k, n) = dims(rng);
            vec![(vec![m, k], false), (vec![n, k], false)]
        },
        &|t, v| t.matmul_nt(v[0], v[1]).unwrap(),
    ));
}

fn transpose_gradients(trials: usize, out: &mut Vec<KindReport>) {
    out.push(check_kind(
        "transpose",
        3,
        trials,
        &|rng| {
            let (m, n, _) = dims(rng);
            vec![(vec![m, n], false)]
        },
        &|t, v| t.transpose(v[0]).unwrap(),
    ));
}

fn elementwise_binary_gradients(trials: usize, out: &mut Vec<KindReport>) {
    let shape = |rng: &mut ChaCha8Rng| {
        let (m, n, _) = dims(rng);
        vec![(vec![m, n], false), (vec![m, n], false)]
    };
    out.push(check_kind("add", 4, trials, &shape, &|t, v| t.add(v[0], v[1]).unwrap()));
    out.push(check_kind("sub", 5, trials, &shape, &|t, v| t.sub(v[0], v[1]).unwrap()));
    out.push(check_kind("mul", 6, trials, &shape, &|t, v| t.mul(v[0], v[1]).unwrap()));
}

fn add_row_gradients(trials: usize, out: &mut Vec<KindReport>) {
    out.push(check_kind(
        "add_row",
        7,
        trials,
        &|rng| {
            let (m, n, _) = dims(rng);
            vec![(vec![m, n], false), (vec![1, n], false)]
        },
        &|t, v| t.add_row(v[0], v[1]).unwrap(),
    ));
}

fn unary_gradients(trials: usize, out: &mut Vec<KindReport>) {
    let shape = |rng: &mut ChaCha8Rng| {
        let (m, n, _) = dims(rng);
        vec![(vec![m, n], false)]
    };
    out.push(check_kind("scale", 8, trials, &shape, &|t, v| t.scale(v[0], -1.7).unwrap()));
    out.push(check_kind("relu", 9, trials, &shape, &|t, v| t.relu(v[0]).unwrap()));
    out.push(check_kind("tanh", 10, trials, &shape, &|t, v| t.tanh(v[0]).unwrap()));
    out.push(check_kind(
        "log",
        11,
        trials,
        &|rng| {
            let (m, n, _) = dims(rng);
            vec![(vec![m, n], true)]
        },
        &|t, v| t.log(v[0]).unwrap(),
    ));
}

fn structural_gradients(trials: usize, out: &mut Vec<KindReport>) {
    out.push(check_kind(
        "concat",
        12,
        trials,
        &|rng| {
            let (m, a, b) = dims(rng);
            vec![(vec![m, a], false), (vec![m, b], false), (vec![m, 1], false)]
        },
        &|t, v| t.concat(v).unwrap(),
    ));
    out.push(check_kind(
        "stack_rows",
        13,
        trials,
        &|rng| {
            let (a, b, n) = dims(rng);
            vec![(vec![a, n], false), (vec![b, n], false)]
        },
        &|t, v| t.stack_rows(v).unwrap(),
    ));
    out.push(check_kind(
        "slice_cols",
        14,
        trials,
        &|rng| {
            let (m, _, _) = dims(rng);
            vec![(vec![m, 5], false)]
        },
        &|t, v| t.slice_cols(v[0], 1, 3).unwrap(),
    ));
    out.push(check_kind(
        "select_rows",
        15,
        trials,
        &|rng| {
            let (_, n, _) = dims(rng);
            vec![(vec![4, n], false)]
        },
        &|t, v| t.select_rows(v[0], &[3, 0, 3, 1]).unwrap(),
    ));
}

fn reduction_gradients(trials: usize, out: &mut Vec<KindReport>) {
    let shape = |rng: &mut ChaCha8Rng| {
        let (m, n, _) = dims(rng);
        vec![(vec![m, n], false)]
    };
    out.push(check_kind("sum", 16, trials, &shape, &|t, v| t.sum(v[0]).unwrap()));
    out.push(check_kind("mean_axis0", 17, trials, &shape, &|t, v| t.mean(v[0], 0).unwrap()));
    out.push(check_kind("mean_axis1", 18, trials, &shape, &|t, v| t.mean(v[0], 1).unwrap()));
}

fn softmax_gradients(trials: usize, out: &mut Vec<KindReport>) {
    let shape = |_: &mut ChaCha8Rng| vec![(vec![3, 5], false)];
    let mask = additive_mask(&[true, false, true, true, false]);
    out.push(check_kind("softmax", 19, trials, &shape, &|t, v| t.softmax(v[0], None).unwrap()));
    out.push(check_kind("softmax_masked", 20, trials, &shape, &|t, v| t.softmax(v[0], Some(&mask)).unwrap()));
    out.push(check_kind("log_softmax", 21, trials, &shape, &|t, v| t.log_softmax(v[0], None).unwrap()));
    out.push(check_kind("log_softmax_masked", 22, trials, &shape, &|t, v| t.log_softmax(v[0], Some(&mask)).unwrap()));
}

fn batch_norm_gradients(trials: usize, out: &mut Vec<KindReport>) {
    let shape = |rng: &mut ChaCha8Rng| {
        let m = rng.gen_range(2..6);
        vec![(vec![m, 3], false), (vec![1, 3], false), (vec![1, 3], false)]
    };
    let running = [0.1, -0.2, 0.3];
    let running_var = [1.5, 0.7, 2.0];
    out.push(check_kind("batch_norm_train", 23, trials, &shape, &|t, v| {
        t.batch_norm(
            v[0],
            v[1],
            v[2],
            BnMode::Train {
                rows: None,
                running_mean: &running,
                running_var: &running_var,
            },
        )
        .unwrap()
        .0
    }));
    out.push(check_kind(
        "batch_norm_train_rows",
        24,
        trials,
        &|_| vec![(vec![5, 3], false), (vec![1, 3], false), (vec![1, 3], false)],
        &|t, v| {
            t.batch_norm(
                v[0],
                v[1],
                v[2],
                BnMode::Train {
                    rows: Some(&[true, false, true, true, false]),
                    running_mean: &running,
                    running_var: &running_var,
                },
            )
            .unwrap()
            .0
        },
    ));
    out.push(check_kind("batch_norm_eval", 25, trials, &shape, &|t, v| {
        t.batch_norm(
            v[0],
            v[1],
            v[2],
            BnMode::Eval {
                mean: &running,
                var: &running_var,
            },
        )
        .unwrap()
        .0
    }));
}

fn attention_block(trials: usize, out: &mut Vec<KindReport>) {
    // Scaled dot-product attention built from the primitive kinds.
    out.push(check_kind(
        "attention",
        26,
        trials,
        &|rng| {
            let r = rng.gen_range(2..5);
            vec![(vec![r, 4], false), (vec![4, 4], false), (vec![4, 4], false), (vec![4, 4], false)]
        },
        &|t, v| {
            let q = t.matmul(v[0], v[1]).unwrap();
            let k = t.matmul(v[0], v[2]).unwrap();
            let val = t.matmul(v[0], v[3]).unwrap();
            let s = t.matmul_nt(q, k).unwrap();
            let s = t.scale(s, 0.5).unwrap();
            let a = t.softmax(s, None).unwrap();
            t.matmul(a, val).unwrap()
        },
    ));
}

/// Every forward kind, `trials` random probes each.
pub fn check_all_kinds(trials: usize) -> Vec<KindReport> {
    let mut out = Vec::new();
    for group in [
        matmul_gradients as fn(usize, &mut Vec<KindReport>),
        matmul_nt_gradients,
        transpose_gradients,
        elementwise_binary_gradients,
        add_row_gradients,
        unary_gradients,
        structural_gradients,
        reduction_gradients,
        softmax_gradients,
        batch_norm_gradients,
        attention_block,
    ] {
        group(trials, &mut out);
    }
    out
}
