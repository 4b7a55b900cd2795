//! Central finite-difference gradient checking.
//!
//! The checker evaluates the loss as a plain function of flat parameter
//! vectors, entirely outside the tape's backward path, so it is an
//! independent oracle for every analytic gradient in the crate. The same
//! machinery backs the unit tests and the `gradcheck` CLI subcommand.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a unit floor: `|g - fd| / max(1, |g|, |fd|)`.
pub fn rel_err(g: f64, fd: f64) -> f64 {
    (g - fd).abs() / g.abs().max(fd.abs()).max(1.0)
}

/// Largest elementwise [`rel_err`] between two gradient vectors.
pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len(), "gradient length mismatch");
    analytic.iter().zip(fd).map(|(&a, &b)| rel_err(a, b)).fold(0.0, f64::max)
}

/// Central finite differences of `f` with respect to `x`.
pub fn fd_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// One named check in the suite: runs at a seed, reports the worst relative
/// error observed and the tolerance it must stay under.
pub struct CheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Result of a full suite run.
pub struct SuiteReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(CheckOutcome::passed)
    }
}

/// Runs every per-operation check plus the whole-model check, each at
/// `seeds_per_check` consecutive seeds derived from `base_seed`.
pub fn run_suite(base_seed: u64, seeds_per_check: u64) -> Result<SuiteReport> {
    let mut outcomes = Vec::new();
    for &(name, tol, check) in suite_checks() {
        for s in 0..seeds_per_check {
            let seed = base_seed.wrapping_add(s);
            let max_rel_err = check(seed)?;
            outcomes.push(CheckOutcome { name, seed, max_rel_err, tolerance: tol });
        }
    }
    Ok(SuiteReport { outcomes })
}

type CheckFn = fn(u64) -> Result<f64>;

fn suite_checks() -> &'static [(&'static str, f64, CheckFn)] {
    &[
        ("elementwise mul/add/sub/div", 1e-6, checks::elementwise),
        ("sigmoid/tanh/relu", 1e-6, checks::activations),
        ("matmul", 1e-6, checks::matmul),
        ("linear", 1e-6, checks::linear),
        ("conv2d", 1e-4, checks::conv2d),
        ("maxpool2d + upsample2d", 1e-6, checks::pool_upsample),
        ("concat + permute + reshape", 1e-6, checks::shape_ops),
        ("softmax", 1e-6, checks::softmax),
        ("reduce sum/mean", 1e-6, checks::reduce),
        ("broadcast add/mul", 1e-6, checks::broadcast),
        ("lstm cell", 1e-6, checks::lstm_cell),
        ("bidirectional pass", 1e-6, checks::bidirectional),
        ("combine_y", 1e-6, checks::combine_y),
        ("channel attention", 1e-6, checks::channel_attention),
        ("fuse_skip", 1e-4, checks::fuse_skip),
        ("dense block", 1e-4, checks::dense_block),
        ("transitions", 1e-4, checks::transitions),
        ("attention gate", 1e-4, checks::attention_gate),
        ("soft dice loss", 1e-6, checks::soft_dice),
        ("full model", 1e-4, checks::full_model),
    ]
}

/// Helper: analytic gradient of a tape-built scalar wrt one leaf.
pub fn tape_grad_of(
    tape: &Tape,
    loss: &Tensor,
    leaf: &Tensor,
) -> Result<Vec<f64>> {
    tape.backward(loss)?;
    Ok(tape
        .grad(leaf)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; leaf.numel()]))
}

mod checks {
    use super::{fd_grad, max_rel_err, FD_STEP};
    use crate::error::Result;
    use crate::lstm::{CellOutput, FusionParams, GateParams, LstmParams, SkipFusionParams};
    use crate::model::{Model, ModelConfig};
    use crate::nn::{AttentionGateParams, ConvParams, DenseBlockConfig, DenseBlockParams};
    use crate::tensor::{Tape, Tensor};
    use crate::{lstm, nn, train};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sample(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Vec<f64> {
        Tensor::uniform(shape, -bound, bound, rng).data().to_vec()
    }

    /// Generic driver: `eval` maps flat input vectors to (loss, gradients of
    /// each input). FD runs on each input in turn; returns the worst error.
    fn drive(
        inputs: &[(Vec<f64>, Vec<usize>)],
        h: f64,
        eval: impl Fn(&[(Vec<f64>, Vec<usize>)], bool) -> Result<(f64, Vec<Vec<f64>>)>,
    ) -> Result<f64> {
        let (_, grads) = eval(inputs, true)?;
        let mut worst: f64 = 0.0;
        for i in 0..inputs.len() {
            let fd = fd_grad(&inputs[i].0, h, |v| {
                let mut probe = inputs.to_vec();
                probe[i].0 = v.to_vec();
                eval(&probe, false).map(|(l, _)| l).expect("fd eval")
            });
            worst = worst.max(max_rel_err(&grads[i], &fd));
        }
        Ok(worst)
    }

    /// Registers the inputs as leaves, applies `build`, sums the result, and
    /// returns loss plus (optionally) all leaf gradients.
    fn sum_loss_eval(
        build: impl Fn(&Tape, &[Tensor]) -> Result<Tensor>,
    ) -> impl Fn(&[(Vec<f64>, Vec<usize>)], bool) -> Result<(f64, Vec<Vec<f64>>)> {
        move |inputs, want_grads| {
            let tape = Tape::new();
            let leaves: Vec<Tensor> = inputs
                .iter()
                .map(|(v, s)| tape.leaf(&Tensor::from_vec(v.clone(), s).expect("check shape")))
                .collect();
            let out = build(&tape, &leaves)?;
            let loss = if out.numel() == 1 && out.is_scalar() { out } else { tape.sum(&out)? };
            let value = loss.item();
            if !want_grads {
                return Ok((value, Vec::new()));
            }
            tape.backward(&loss)?;
            let grads = leaves
                .iter()
                .map(|l| {
                    tape.grad(l)
                        .map(|g| g.data().to_vec())
                        .unwrap_or_else(|| vec![0.0; l.numel()])
                })
                .collect();
            Ok((value, grads))
        }
    }

    pub fn elementwise(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let shape = vec![3, 4];
        let inputs = vec![
            (sample(&mut r, &shape, 1.5), shape.clone()),
            (sample(&mut r, &shape, 1.5), shape.clone()),
            // kept away from zero so div stays well-conditioned
            (
                sample(&mut r, &shape, 0.5).iter().map(|v| v + 1.5).collect(),
                shape.clone(),
            ),
        ];
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let m = t.mul(&l[0], &l[1])?;
            let a = t.add(&m, &l[0])?;
            let s = t.sub(&a, &l[1])?;
            t.div(&s, &l[2])
        }))
    }

    pub fn activations(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let shape = vec![2, 5];
        // relu has a kink at zero; keep probes off it
        let data: Vec<f64> = sample(&mut r, &shape, 2.0)
            .iter()
            .map(|&v| if v.abs() < 1e-3 { v + 0.01 } else { v })
            .collect();
        let inputs = vec![(data, shape)];
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let s = t.sigmoid(&l[0])?;
            let th = t.tanh(&l[0])?;
            let re = t.relu(&l[0])?;
            t.add(&t.add(&s, &th)?, &re)
        }))
    }

    pub fn matmul(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![
            (sample(&mut r, &[3, 4], 1.0), vec![3, 4]),
            (sample(&mut r, &[4, 2], 1.0), vec![4, 2]),
        ];
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| t.matmul(&l[0], &l[1])))
    }

    pub fn linear(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![
            (sample(&mut r, &[5, 3], 1.0), vec![5, 3]),
            (sample(&mut r, &[3, 4], 1.0), vec![3, 4]),
            (sample(&mut r, &[4], 1.0), vec![4]),
        ];
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            // square the output so the weight gradient is input-dependent
            let y = t.linear(&l[0], &l[1], &l[2])?;
            t.mul(&y, &y)
        }))
    }

    pub fn conv2d(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![
            (sample(&mut r, &[1, 2, 5, 5], 1.0), vec![1, 2, 5, 5]),
            (sample(&mut r, &[3, 2, 3, 3], 0.7), vec![3, 2, 3, 3]),
            (sample(&mut r, &[3], 0.3), vec![3]),
        ];
        drive(&inputs, FD_STEP, sum_loss_eval(|t, l| {
            let y = t.conv2d(&l[0], &l[1], Some(&l[2]), 1, 1)?;
            t.mul(&y, &y)
        }))
    }

    pub fn pool_upsample(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![(sample(&mut r, &[1, 1, 4, 4], 1.0), vec![1, 1, 4, 4])];
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let p = t.maxpool2d(&l[0], 2)?;
            let u = t.upsample2d(&p, 2)?;
            t.mul(&u, &u)
        }))
    }

    pub fn shape_ops(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![
            (sample(&mut r, &[2, 3, 2], 1.0), vec![2, 3, 2]),
            (sample(&mut r, &[2, 1, 2], 1.0), vec![2, 1, 2]),
        ];
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let c = t.concat(&[&l[0], &l[1]], 1)?;
            let p = t.permute(&c, &[1, 0, 2])?;
            let rs = t.reshape(&p, &[4, 4])?;
            t.mul(&rs, &rs)
        }))
    }

    pub fn softmax(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![(sample(&mut r, &[5], 2.0), vec![5])];
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let s = t.softmax(&l[0], 0)?;
            t.mul(&s, &s)
        }))
    }

    pub fn reduce(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![(sample(&mut r, &[3, 4], 1.0), vec![3, 4])];
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let sq = t.mul(&l[0], &l[0])?;
            let sa = t.reduce(&sq, crate::tensor::Reduce::Sum, Some(1))?;
            let me = t.reduce(&sa, crate::tensor::Reduce::Mean, None)?;
            let su = t.sum(&sq)?;
            t.add(&me, &su)
        }))
    }

    pub fn broadcast(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![
            (sample(&mut r, &[2, 3, 2, 2], 1.0), vec![2, 3, 2, 2]),
            (sample(&mut r, &[2, 1, 2, 2], 1.0), vec![2, 1, 2, 2]),
            (sample(&mut r, &[2, 2], 1.0), vec![2, 2]),
        ];
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let ch = t.mul(&l[0], &l[1])?;
            let tr = t.add(&ch, &l[2])?;
            t.mul(&tr, &tr)
        }))
    }

    fn lstm_inputs(r: &mut ChaCha8Rng, d_in: usize, d_h: usize) -> Vec<(Vec<f64>, Vec<usize>)> {
        let mut v = Vec::new();
        for _ in 0..4 {
            v.push((sample(r, &[d_in, d_h], 0.7), vec![d_in, d_h]));
            v.push((sample(r, &[d_h, d_h], 0.7), vec![d_h, d_h]));
            v.push((sample(r, &[d_h], 0.4), vec![d_h]));
        }
        v
    }

    fn lstm_params_from(leaves: &[Tensor], sigma_h: CellOutput) -> LstmParams {
        let gate = |i: usize| GateParams {
            w: leaves[3 * i].clone(),
            u: leaves[3 * i + 1].clone(),
            b: leaves[3 * i + 2].clone(),
        };
        LstmParams {
            input: gate(0),
            forget: gate(1),
            output: gate(2),
            candidate: gate(3),
            sigma_h,
        }
    }

    pub fn lstm_cell(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let (d_in, d_h) = (3, 4);
        let mut inputs = lstm_inputs(&mut r, d_in, d_h);
        inputs.push((sample(&mut r, &[1, d_in], 1.0), vec![1, d_in]));
        inputs.push((sample(&mut r, &[1, d_h], 1.0), vec![1, d_h]));
        inputs.push((sample(&mut r, &[1, d_h], 1.0), vec![1, d_h]));
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let p = lstm_params_from(&l[..12], CellOutput::Identity);
            let (h, _) = lstm::lstm_cell(t, &l[12], &l[13], &l[14], &p)?;
            Ok(h)
        }))
    }

    pub fn bidirectional(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let d = 3;
        let mut inputs = lstm_inputs(&mut r, d, d);
        inputs.extend(lstm_inputs(&mut r, d, d));
        inputs.push((sample(&mut r, &[1, d], 1.0), vec![1, d]));
        inputs.push((sample(&mut r, &[1, d], 1.0), vec![1, d]));
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let fwd = lstm_params_from(&l[..12], CellOutput::Identity);
            let bwd = lstm_params_from(&l[12..24], CellOutput::Identity);
            let (hf, hb) = lstm::bidirectional_pass(t, &[l[24].clone(), l[25].clone()], &fwd, &bwd)?;
            let mut acc = t.add(&hf[0], &hb[0])?;
            acc = t.add(&acc, &hf[1])?;
            t.add(&acc, &hb[1])
        }))
    }

    fn fusion_inputs(r: &mut ChaCha8Rng, d: usize, d_a: usize) -> Vec<(Vec<f64>, Vec<usize>)> {
        vec![
            (sample(r, &[d, d], 0.7), vec![d, d]),
            (sample(r, &[d, d], 0.7), vec![d, d]),
            (sample(r, &[d], 0.4), vec![d]),
            (sample(r, &[d_a], 0.7), vec![d_a]),
            (sample(r, &[2, d_a], 0.7), vec![2, d_a]),
        ]
    }

    fn fusion_params_from(leaves: &[Tensor]) -> FusionParams {
        FusionParams {
            wyf: leaves[0].clone(),
            wyb: leaves[1].clone(),
            by: leaves[2].clone(),
            va: leaves[3].clone(),
            wa: leaves[4].clone(),
        }
    }

    pub fn combine_y(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let d = 4;
        let mut inputs = fusion_inputs(&mut r, d, 3);
        inputs.push((sample(&mut r, &[2, d], 1.0), vec![2, d]));
        inputs.push((sample(&mut r, &[2, d], 1.0), vec![2, d]));
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let p = fusion_params_from(&l[..5]);
            lstm::combine_y(t, &l[5], &l[6], &p)
        }))
    }

    pub fn channel_attention(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let d = 4;
        let mut inputs = fusion_inputs(&mut r, d, 3);
        inputs.push((sample(&mut r, &[2, d], 1.0), vec![2, d]));
        inputs.push((sample(&mut r, &[2, d], 1.0), vec![2, d]));
        drive(&inputs, 1e-6, sum_loss_eval(|t, l| {
            let p = fusion_params_from(&l[..5]);
            let s = t.scale(&t.add(&l[5], &l[6])?, 0.5)?;
            let (fused, _) = lstm::channel_attention(t, &[l[5].clone(), l[6].clone()], &s, &p)?;
            Ok(fused)
        }))
    }

    pub fn fuse_skip(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let c = 4;
        let mut inputs = lstm_inputs(&mut r, c, c);
        inputs.extend(lstm_inputs(&mut r, c, c));
        inputs.extend(fusion_inputs(&mut r, c, 3));
        inputs.push((sample(&mut r, &[1, c, 4, 4], 1.0), vec![1, c, 4, 4]));
        inputs.push((sample(&mut r, &[1, c, 4, 4], 1.0), vec![1, c, 4, 4]));
        drive(&inputs, FD_STEP, sum_loss_eval(|t, l| {
            let p = SkipFusionParams {
                fwd: lstm_params_from(&l[..12], CellOutput::Identity),
                bwd: lstm_params_from(&l[12..24], CellOutput::Identity),
                fusion: fusion_params_from(&l[24..29]),
                use_channel_attention: true,
            };
            Ok(lstm::fuse_skip(t, &l[29], &l[30], &p)?.fused)
        }))
    }

    pub fn dense_block(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let cfg = DenseBlockConfig::new(2, 3, 2).expect("valid");
        let mut inputs = Vec::new();
        for j in 0..cfg.num_layers {
            let c_in = cfg.layer_in_channels(j);
            inputs.push((sample(&mut r, &[3, c_in, 3, 3], 0.5), vec![3, c_in, 3, 3]));
            inputs.push((sample(&mut r, &[3], 0.3), vec![3]));
        }
        inputs.push((sample(&mut r, &[1, 2, 5, 5], 1.0), vec![1, 2, 5, 5]));
        drive(&inputs, FD_STEP, sum_loss_eval(move |t, l| {
            let params = DenseBlockParams {
                layers: vec![
                    ConvParams { weight: l[0].clone(), bias: l[1].clone() },
                    ConvParams { weight: l[2].clone(), bias: l[3].clone() },
                ],
            };
            let y = nn::dense_block(t, &l[4], &cfg, &params)?;
            t.mul(&y, &y)
        }))
    }

    pub fn transitions(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![
            (sample(&mut r, &[2, 4, 1, 1], 0.5), vec![2, 4, 1, 1]),
            (sample(&mut r, &[2], 0.3), vec![2]),
            (sample(&mut r, &[4, 2, 3, 3], 0.5), vec![4, 2, 3, 3]),
            (sample(&mut r, &[4], 0.3), vec![4]),
            (sample(&mut r, &[1, 4, 6, 6], 1.0), vec![1, 4, 6, 6]),
        ];
        drive(&inputs, FD_STEP, sum_loss_eval(|t, l| {
            let down = ConvParams { weight: l[0].clone(), bias: l[1].clone() };
            let up = ConvParams { weight: l[2].clone(), bias: l[3].clone() };
            let mid = nn::transition_down(t, &l[4], &down)?;
            let y = nn::transition_up(t, &mid, &up)?;
            t.mul(&y, &y)
        }))
    }

    pub fn attention_gate(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let inputs = vec![
            (sample(&mut r, &[2, 4, 1, 1], 0.5), vec![2, 4, 1, 1]),
            (sample(&mut r, &[2, 6, 1, 1], 0.5), vec![2, 6, 1, 1]),
            (sample(&mut r, &[2], 0.3), vec![2]),
            (sample(&mut r, &[1, 2, 1, 1], 0.5), vec![1, 2, 1, 1]),
            (sample(&mut r, &[1], 0.3), vec![1]),
            (sample(&mut r, &[1, 4, 8, 8], 1.0), vec![1, 4, 8, 8]),
            (sample(&mut r, &[1, 6, 4, 4], 1.0), vec![1, 6, 4, 4]),
        ];
        drive(&inputs, FD_STEP, sum_loss_eval(|t, l| {
            let p = AttentionGateParams {
                wx: l[0].clone(),
                wg: l[1].clone(),
                bg: l[2].clone(),
                psi: l[3].clone(),
                bpsi: l[4].clone(),
            };
            let (x_hat, _) = nn::attention_gate(t, &l[5], &l[6], &p)?;
            Ok(x_hat)
        }))
    }

    pub fn soft_dice(seed: u64) -> Result<f64> {
        let mut r = rng(seed);
        let prob: Vec<f64> = (0..64).map(|_| r.gen_range(0.05..0.95)).collect();
        let mask: Vec<f64> = (0..64).map(|_| f64::from(r.gen_bool(0.3))).collect();
        let mask_t = Tensor::from_vec(mask, &[1, 1, 8, 8]).expect("mask");
        let inputs = vec![(prob, vec![1, 1, 8, 8])];
        drive(&inputs, 1e-6, sum_loss_eval(move |t, l| train::soft_dice_loss(t, &l[0], &mask_t)))
    }

    pub fn full_model(seed: u64) -> Result<f64> {
        let cfg = ModelConfig {
            input_h: 16,
            input_w: 16,
            seed,
            ..ModelConfig::default()
        };
        let mut model = Model::build(&cfg)?;
        let mut r = rng(seed.wrapping_add(99));
        let x = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut r);

        let loss_of = |m: &Model| -> Result<f64> {
            let tape = Tape::new();
            let trace = m.run(&tape, &x, &Default::default())?;
            Ok(tape.sum(&trace.prob)?.item())
        };

        // Analytic gradients for every parameter.
        let tape = Tape::new();
        let trace = model.run(&tape, &x, &Default::default())?;
        let loss = tape.sum(&trace.prob)?;
        tape.backward(&loss)?;
        let grads: Vec<Vec<f64>> = trace
            .param_leaves
            .iter()
            .map(|l| {
                tape.grad(l)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; l.numel()])
            })
            .collect();

        // Sample 20 scalar coordinates across all parameters.
        let total: usize = model.store().total_scalars();
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let flat = r.gen_range(0..total);
            let (pi, offset) = model.store().locate(flat);
            let analytic = grads[pi][offset];
            let orig = model.store().value(pi, offset);
            model.store_mut().set_value(pi, offset, orig + FD_STEP);
            let fp = loss_of(&model)?;
            model.store_mut().set_value(pi, offset, orig - FD_STEP);
            let fm = loss_of(&model)?;
            model.store_mut().set_value(pi, offset, orig);
            let fd = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(super::rel_err(analytic, fd));
        }
        Ok(worst)
    }
}
