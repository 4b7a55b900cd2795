//! Skip-connection fusion: a two-step bidirectional LSTM over the encoded
//! and up-sampled features at every spatial location, combined per step and
//! weighted by a per-channel attention over the two steps.
//!
//! All operations here work on row matrices `[P, D]` where each row is one
//! spatial location's channel vector; `P = N*H*W` when called from
//! [`fuse_skip`], and `P = 1` reduces everything to the plain vector
//! pipeline. LSTM and fusion weights are shared across rows, which is what
//! makes the fusion equivariant under spatial permutations.

use crate::error::{Error, Result};
use crate::tensor::{Reduce, Tape, Tensor};

/// Output squashing `sigma_h` applied to the cell state in `h_t = o_t *
/// sigma_h(c_t)`. The identity is the default; tanh is available for
/// comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellOutput {
    #[default]
    Identity,
    Tanh,
}

/// One gate's maps: `w: [D_in, D_h]` (input), `u: [D_h, D_h]` (recurrent),
/// `b: [D_h]`.
#[derive(Clone)]
pub struct GateParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

/// Parameters of one LSTM direction.
///
/// Gate/parameter pairing follows the standard convention: `W_i` with the
/// input gate `i_t`, `W_f` with the forget gate `f_t`. (Some write-ups swap
/// the `i`/`f` parameter subscripts; the swapped form is a pure relabeling
/// with identical behavior.)
#[derive(Clone)]
pub struct LstmParams {
    pub input: GateParams,
    pub forget: GateParams,
    pub output: GateParams,
    pub candidate: GateParams,
    pub sigma_h: CellOutput,
}

impl LstmParams {
    /// Trainable scalar count for given `D_in`, `D_h`.
    pub fn param_count(d_in: usize, d_h: usize) -> usize {
        4 * (d_in * d_h + d_h * d_h + d_h)
    }
}

/// Per-step combination and channel-attention parameters.
#[derive(Clone)]
pub struct FusionParams {
    /// `[D_h, D_out]`, applied to the forward hidden state.
    pub wyf: Tensor,
    /// `[D_h, D_out]`, applied to the backward hidden state.
    pub wyb: Tensor,
    /// `[D_out]`.
    pub by: Tensor,
    /// `[D_a]`, attention score vector.
    pub va: Tensor,
    /// `[2, D_a]`, shared map from a `(query, state)` channel pair to the
    /// attention width.
    pub wa: Tensor,
}

impl FusionParams {
    pub fn param_count(d_h: usize, d_out: usize, d_a: usize, with_attention: bool) -> usize {
        let combine = 2 * d_h * d_out + d_out;
        if with_attention {
            combine + d_a + 2 * d_a
        } else {
            combine
        }
    }
}

/// One LSTM step over a batch of rows.
///
/// `i_t = sig(x W_i + h U_i + b_i)`, `f_t`, `o_t` alike;
/// `c_t = f_t * c_prev + i_t * tanh(x W_c + h U_c + b_c)`;
/// `h_t = o_t * sigma_h(c_t)`.
pub fn lstm_cell(
    tape: &Tape,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    params: &LstmParams,
) -> Result<(Tensor, Tensor)> {
    // One affine map per gate over the joined [x | h] rows; identical to
    // x*W + h*U + b with half the products.
    let joined = tape.concat(&[x, h_prev], 1)?;
    let gate = |g: &GateParams| -> Result<Tensor> {
        let wu = tape.concat(&[&g.w, &g.u], 0)?;
        tape.linear(&joined, &wu, &g.b)
    };
    let i_t = tape.sigmoid(&gate(&params.input)?)?;
    let f_t = tape.sigmoid(&gate(&params.forget)?)?;
    let o_t = tape.sigmoid(&gate(&params.output)?)?;
    let candidate = tape.tanh(&gate(&params.candidate)?)?;
    let c_t = tape.add(&tape.mul(&f_t, c_prev)?, &tape.mul(&i_t, &candidate)?)?;
    let squashed = match params.sigma_h {
        CellOutput::Identity => c_t.clone(),
        CellOutput::Tanh => tape.tanh(&c_t)?,
    };
    let h_t = tape.mul(&o_t, &squashed)?;
    Ok((h_t, c_t))
}

/// Runs both directions over a sequence with zero initial state.
///
/// The forward direction processes `seq[0], seq[1], ...`; the backward
/// direction processes the reverse. Outputs are aligned: index `i` of either
/// result is the hidden state each direction produced at timestep `i`.
pub fn bidirectional_pass(
    tape: &Tape,
    seq: &[Tensor],
    fwd: &LstmParams,
    bwd: &LstmParams,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if seq.is_empty() {
        return Err(Error::contract("bidirectional_pass", "empty sequence"));
    }
    let rows = seq[0].shape()[0];
    let d_h = fwd.input.u.shape()[0];
    let run = |params: &LstmParams, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<(usize, Tensor)>> {
        let mut h = Tensor::zeros(&[rows, d_h]);
        let mut c = Tensor::zeros(&[rows, d_h]);
        let mut states = Vec::with_capacity(seq.len());
        for t in order {
            let (h_t, c_t) = lstm_cell(tape, &seq[t], &h, &c, params)?;
            states.push((t, h_t.clone()));
            h = h_t;
            c = c_t;
        }
        Ok(states)
    };
    let fwd_states = run(fwd, &mut (0..seq.len()))?;
    let mut bwd_states = run(bwd, &mut (0..seq.len()).rev())?;
    bwd_states.sort_by_key(|(t, _)| *t);
    let h_fwd = fwd_states.into_iter().map(|(_, h)| h).collect();
    let h_bwd = bwd_states.into_iter().map(|(_, h)| h).collect();
    Ok((h_fwd, h_bwd))
}

/// Combines the two directions' hidden states at one timestep:
/// `Y_t = sig(h_fwd W_yf + h_bwd W_yb + b_y)`, so every channel of `Y_t`
/// lies in (0, 1).
pub fn combine_y(
    tape: &Tape,
    h_fwd: &Tensor,
    h_bwd: &Tensor,
    params: &FusionParams,
) -> Result<Tensor> {
    let a = tape.linear(h_fwd, &params.wyf, &params.by)?;
    let b = tape.matmul(h_bwd, &params.wyb)?;
    tape.sigmoid(&tape.add(&a, &b)?)
}

/// Per-channel attention over the two combined states.
///
/// For each row and channel `c`, the score of state `i` is
/// `e_i = va . sig(wa^T [s_c, H_i,c])`; `beta` is the softmax of the two
/// scores, so `beta[.., 0, c] + beta[.., 1, c] = 1`, and the fused value is
/// `sum_i beta_i,c * H_i,c`.
///
/// Returns `(fused: [P, C], beta: [P, 2, C])`.
pub fn channel_attention(
    tape: &Tape,
    states: &[Tensor],
    query: &Tensor,
    params: &FusionParams,
) -> Result<(Tensor, Tensor)> {
    if states.len() != 2 {
        return Err(Error::contract(
            "channel_attention",
            format!("expected exactly 2 states, got {}", states.len()),
        ));
    }
    let shape = states[0].shape();
    if states[1].shape() != shape || query.shape() != shape || shape.len() != 2 {
        return Err(Error::shape(
            "channel_attention",
            format!(
                "states {:?}/{:?} and query {:?} must share one [P, C] shape",
                states[0].shape(),
                states[1].shape(),
                query.shape()
            ),
        ));
    }
    let (p, c) = (shape[0], shape[1]);
    let d_a = params.va.shape()[0];
    let rows = p * c;
    let q_col = tape.reshape(query, &[rows, 1])?;

    let score = |state: &Tensor| -> Result<Tensor> {
        let s_col = tape.reshape(state, &[rows, 1])?;
        let pair = tape.concat(&[&q_col, &s_col], 1)?;
        let z = tape.sigmoid(&tape.matmul(&pair, &params.wa)?)?;
        let e = tape.matmul(&z, &tape.reshape(&params.va, &[d_a, 1])?)?;
        tape.reshape(&e, &[p, 1, c])
    };
    let e1 = score(&states[0])?;
    let e2 = score(&states[1])?;
    let scores = tape.concat(&[&e1, &e2], 1)?;
    let beta = tape.softmax(&scores, 1)?;

    let s1 = tape.reshape(&states[0], &[p, 1, c])?;
    let s2 = tape.reshape(&states[1], &[p, 1, c])?;
    let stacked = tape.concat(&[&s1, &s2], 1)?;
    let weighted = tape.mul(&beta, &stacked)?;
    let fused = tape.reduce(&weighted, Reduce::Sum, Some(1))?;
    Ok((fused, beta))
}

/// Everything one skip level needs: both LSTM directions, the combination
/// maps, and whether the channel attention is active. With the attention
/// disabled the fused value is the fixed mean of `Y_1` and `Y_2`.
#[derive(Clone)]
pub struct SkipFusionParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub fusion: FusionParams,
    pub use_channel_attention: bool,
}

/// Output of [`fuse_skip`]: the fused feature map plus the attention weights
/// (`[P, 2, C]`, present only when the channel attention is enabled).
pub struct FuseOutput {
    pub fused: Tensor,
    pub beta: Option<Tensor>,
}

/// Fuses an encoded skip feature with the matching up-sampled decoder
/// feature. At every spatial location the two channel vectors form the
/// two-step sequence `{encoded, up-sampled}`; the bidirectional LSTM, the
/// per-step combination, and the channel attention all share weights across
/// locations. The result keeps the input shape `[N, C, H, W]`.
pub fn fuse_skip(
    tape: &Tape,
    encoded: &Tensor,
    upsampled: &Tensor,
    params: &SkipFusionParams,
) -> Result<FuseOutput> {
    if encoded.shape() != upsampled.shape() || encoded.shape().len() != 4 {
        return Err(Error::shape(
            "fuse_skip",
            format!("inputs must share one [N,C,H,W] shape, got {:?} and {:?}", encoded.shape(), upsampled.shape()),
        ));
    }
    let (n, c, h, w) = (
        encoded.shape()[0],
        encoded.shape()[1],
        encoded.shape()[2],
        encoded.shape()[3],
    );
    let rows = n * h * w;
    let to_rows = |t: &Tensor| -> Result<Tensor> {
        let nhwc = tape.permute(t, &[0, 2, 3, 1])?;
        tape.reshape(&nhwc, &[rows, c])
    };
    let x1 = to_rows(encoded)?;
    let x2 = to_rows(upsampled)?;

    let (h_fwd, h_bwd) = bidirectional_pass(tape, &[x1, x2], &params.fwd, &params.bwd)?;
    let y1 = combine_y(tape, &h_fwd[0], &h_bwd[0], &params.fusion)?;
    let y2 = combine_y(tape, &h_fwd[1], &h_bwd[1], &params.fusion)?;

    let (fused_rows, beta) = if params.use_channel_attention {
        let query = tape.scale(&tape.add(&y1, &y2)?, 0.5)?;
        let (fused, beta) = channel_attention(tape, &[y1, y2], &query, &params.fusion)?;
        (fused, Some(beta))
    } else {
        (tape.scale(&tape.add(&y1, &y2)?, 0.5)?, None)
    };

    let nhwc = tape.reshape(&fused_rows, &[n, h, w, c])?;
    let fused = tape.permute(&nhwc, &[0, 3, 1, 2])?;
    Ok(FuseOutput { fused, beta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_grad, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
        Tensor::uniform(shape, -bound, bound, rng)
    }

    fn zero_gate(tape: &Tape, d_in: usize, d_h: usize) -> GateParams {
        GateParams {
            w: tape.leaf(&Tensor::zeros(&[d_in, d_h])),
            u: tape.leaf(&Tensor::zeros(&[d_h, d_h])),
            b: tape.leaf(&Tensor::zeros(&[d_h])),
        }
    }

    fn zero_lstm(tape: &Tape, d_in: usize, d_h: usize) -> LstmParams {
        LstmParams {
            input: zero_gate(tape, d_in, d_h),
            forget: zero_gate(tape, d_in, d_h),
            output: zero_gate(tape, d_in, d_h),
            candidate: zero_gate(tape, d_in, d_h),
            sigma_h: CellOutput::Identity,
        }
    }

    fn random_gate(tape: &Tape, rng: &mut ChaCha8Rng, d_in: usize, d_h: usize) -> GateParams {
        GateParams {
            w: tape.leaf(&uniform(rng, &[d_in, d_h], 0.6)),
            u: tape.leaf(&uniform(rng, &[d_h, d_h], 0.6)),
            b: tape.leaf(&uniform(rng, &[d_h], 0.3)),
        }
    }

    fn random_lstm(tape: &Tape, rng: &mut ChaCha8Rng, d_in: usize, d_h: usize) -> LstmParams {
        LstmParams {
            input: random_gate(tape, rng, d_in, d_h),
            forget: random_gate(tape, rng, d_in, d_h),
            output: random_gate(tape, rng, d_in, d_h),
            candidate: random_gate(tape, rng, d_in, d_h),
            sigma_h: CellOutput::Identity,
        }
    }

    fn random_fusion(tape: &Tape, rng: &mut ChaCha8Rng, d: usize, d_a: usize) -> FusionParams {
        FusionParams {
            wyf: tape.leaf(&uniform(rng, &[d, d], 0.6)),
            wyb: tape.leaf(&uniform(rng, &[d, d], 0.6)),
            by: tape.leaf(&uniform(rng, &[d], 0.3)),
            va: tape.leaf(&uniform(rng, &[d_a], 0.6)),
            wa: tape.leaf(&uniform(rng, &[2, d_a], 0.6)),
        }
    }

    #[test]
    fn lstm_cell_zero_parameters_is_a_fixed_point() {
        let tape = Tape::new();
        let params = zero_lstm(&tape, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(&mut rng, &[1, 3], 1.0);
        let (h, c) = lstm_cell(&tape, &x, &Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 4]), &params).unwrap();
        // gates sit at 0.5, candidate tanh(0) = 0, so both states stay zero
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_cell_saturated_forget_gate_preserves_memory() {
        let tape = Tape::new();
        let mut params = zero_lstm(&tape, 3, 4);
        params.forget.b = tape.leaf(&Tensor::full(&[4], 20.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = uniform(&mut rng, &[1, 3], 1.0);
        let c_prev = uniform(&mut rng, &[1, 4], 1.0);
        let (_, c) = lstm_cell(&tape, &x, &Tensor::zeros(&[1, 4]), &c_prev, &params).unwrap();
        for (new, old) in c.data().iter().zip(c_prev.data()) {
            assert!((new - old).abs() <= 1e-8, "cell state drifted: {new} vs {old}");
        }
    }

    #[test]
    fn lstm_cell_matches_hand_rolled_equations() {
        // Independent scalar-by-scalar evaluation of the gate equations.
        let d_in = 3;
        let d_h = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tape = Tape::new();
        let params = random_lstm(&tape, &mut rng, d_in, d_h);
        let x = uniform(&mut rng, &[1, d_in], 1.0);
        let h_prev = uniform(&mut rng, &[1, d_h], 1.0);
        let c_prev = uniform(&mut rng, &[1, d_h], 1.0);
        let (h, c) = lstm_cell(&tape, &x, &h_prev, &c_prev, &params).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gate = |g: &GateParams, squash: &dyn Fn(f64) -> f64| -> Vec<f64> {
            (0..d_h)
                .map(|j| {
                    let mut acc = g.b.data()[j];
                    for i in 0..d_in {
                        acc += x.data()[i] * g.w.data()[i * d_h + j];
                    }
                    for i in 0..d_h {
                        acc += h_prev.data()[i] * g.u.data()[i * d_h + j];
                    }
                    squash(acc)
                })
                .collect()
        };
        let i_t = gate(&params.input, &sig);
        let f_t = gate(&params.forget, &sig);
        let o_t = gate(&params.output, &sig);
        let g_t = gate(&params.candidate, &|v| v.tanh());
        for j in 0..d_h {
            let c_expect = f_t[j] * c_prev.data()[j] + i_t[j] * g_t[j];
            let h_expect = o_t[j] * c_expect; // identity sigma_h
            assert!((c.data()[j] - c_expect).abs() <= 1e-12);
            assert!((h.data()[j] - h_expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn lstm_gate_ranges_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tape = Tape::new();
        let mut params = random_lstm(&tape, &mut rng, 4, 4);
        params.sigma_h = CellOutput::Tanh;
        let x = uniform(&mut rng, &[8, 4], 5.0);
        let h0 = uniform(&mut rng, &[8, 4], 5.0);
        let c0 = uniform(&mut rng, &[8, 4], 5.0);
        let (h, _) = lstm_cell(&tape, &x, &h0, &c0, &params).unwrap();
        // with sigma_h = tanh, h = o * tanh(c) lands strictly inside (-1, 1)
        assert!(h.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn bidirectional_mirror_symmetry_with_shared_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tape = Tape::new();
        let params = random_lstm(&tape, &mut rng, 3, 3);
        let x = uniform(&mut rng, &[2, 3], 1.0);
        let (h_fwd, h_bwd) = bidirectional_pass(&tape, &[x.clone(), x], &params, &params).unwrap();
        // equal inputs + shared parameters: the directions mirror each other
        assert_eq!(h_fwd[0].data(), h_bwd[1].data());
        assert_eq!(h_fwd[1].data(), h_bwd[0].data());
    }

    #[test]
    fn bidirectional_zero_params_all_states_zero() {
        let tape = Tape::new();
        let params = zero_lstm(&tape, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = uniform(&mut rng, &[1, 3], 1.0);
        let x2 = uniform(&mut rng, &[1, 3], 1.0);
        let (h_fwd, h_bwd) = bidirectional_pass(&tape, &[x1, x2], &params, &params).unwrap();
        for h in h_fwd.iter().chain(&h_bwd) {
            assert!(h.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bidirectional_rejects_empty_sequence() {
        let tape = Tape::new();
        let params = zero_lstm(&tape, 3, 3);
        assert!(bidirectional_pass(&tape, &[], &params, &params).is_err());
    }

    #[test]
    fn bidirectional_gradient_wrt_first_input_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let d = 3;
        let w: Vec<Vec<f64>> = (0..24)
            .map(|i| {
                let shape: &[usize] = if i % 3 == 2 { &[d] } else { &[d, d] };
                uniform(&mut rng, shape, 0.6).data().to_vec()
            })
            .collect();
        let x1 = uniform(&mut rng, &[1, d], 1.0);
        let x2 = uniform(&mut rng, &[1, d], 1.0);

        let eval = |x1v: &[f64], want_grad: bool| -> (f64, Option<Vec<f64>>) {
            let tape = Tape::new();
            let gate = |base: usize| GateParams {
                w: tape.leaf(&Tensor::from_vec(w[base].clone(), &[d, d]).unwrap()),
                u: tape.leaf(&Tensor::from_vec(w[base + 1].clone(), &[d, d]).unwrap()),
                b: tape.leaf(&Tensor::from_vec(w[base + 2].clone(), &[d]).unwrap()),
            };
            let mk = |o: usize| LstmParams {
                input: gate(o),
                forget: gate(o + 3),
                output: gate(o + 6),
                candidate: gate(o + 9),
                sigma_h: CellOutput::Identity,
            };
            let (fwd, bwd) = (mk(0), mk(12));
            let x1t = tape.leaf(&Tensor::from_vec(x1v.to_vec(), &[1, d]).unwrap());
            let (hf, hb) = bidirectional_pass(&tape, &[x1t.clone(), x2.clone()], &fwd, &bwd).unwrap();
            let mut acc = tape.add(&hf[0], &hb[0]).unwrap();
            acc = tape.add(&acc, &hf[1]).unwrap();
            acc = tape.add(&acc, &hb[1]).unwrap();
            let loss = tape.sum(&acc).unwrap();
            let v = loss.item();
            if !want_grad {
                return (v, None);
            }
            tape.backward(&loss).unwrap();
            (v, Some(tape.grad(&x1t).unwrap().data().to_vec()))
        };

        let (_, g) = eval(x1.data(), true);
        let fd = fd_grad(x1.data(), 1e-6, |v| eval(v, false).0);
        assert!(max_rel_err(&g.unwrap(), &fd) <= 1e-6);
    }

    #[test]
    fn combine_y_zero_params_gives_half() {
        let tape = Tape::new();
        let d = 4;
        let params = FusionParams {
            wyf: tape.leaf(&Tensor::zeros(&[d, d])),
            wyb: tape.leaf(&Tensor::zeros(&[d, d])),
            by: tape.leaf(&Tensor::zeros(&[d])),
            va: tape.leaf(&Tensor::zeros(&[3])),
            wa: tape.leaf(&Tensor::zeros(&[2, 3])),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = combine_y(&tape, &uniform(&mut rng, &[2, d], 1.0), &uniform(&mut rng, &[2, d], 1.0), &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn combine_y_ignores_backward_state_when_wyb_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let d = 4;
        let params = FusionParams {
            wyf: tape.leaf(&uniform(&mut rng, &[d, d], 0.6)),
            wyb: tape.leaf(&Tensor::zeros(&[d, d])),
            by: tape.leaf(&uniform(&mut rng, &[d], 0.3)),
            va: tape.leaf(&Tensor::zeros(&[3])),
            wa: tape.leaf(&Tensor::zeros(&[2, 3])),
        };
        let hf = uniform(&mut rng, &[2, d], 1.0);
        let a = combine_y(&tape, &hf, &uniform(&mut rng, &[2, d], 1.0), &params).unwrap();
        let b = combine_y(&tape, &hf, &uniform(&mut rng, &[2, d], 5.0), &params).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn channel_attention_symmetric_states_give_uniform_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let params = random_fusion(&tape, &mut rng, 4, 3);
        let y = uniform(&mut rng, &[3, 4], 1.0);
        let s = y.clone();
        let (fused, beta) = channel_attention(&tape, &[y.clone(), y.clone()], &s, &params).unwrap();
        assert!(beta.data().iter().all(|&b| (b - 0.5).abs() <= 1e-15));
        for (f, yv) in fused.data().iter().zip(y.data()) {
            assert!((f - yv).abs() <= 1e-15);
        }
    }

    #[test]
    fn channel_attention_zero_scores_give_uniform_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let mut params = random_fusion(&tape, &mut rng, 4, 3);
        params.va = tape.leaf(&Tensor::zeros(&[3]));
        let y1 = uniform(&mut rng, &[2, 4], 1.0);
        let y2 = uniform(&mut rng, &[2, 4], 1.0);
        let s = tape.scale(&tape.add(&y1, &y2).unwrap(), 0.5).unwrap();
        let (_, beta) = channel_attention(&tape, &[y1, y2], &s, &params).unwrap();
        assert!(beta.data().iter().all(|&b| b == 0.5));
    }

    #[test]
    fn channel_attention_matches_direct_formula() {
        // Re-evaluates the per-channel score/softmax/mix chain with plain
        // scalar arithmetic on random inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let tape = Tape::new();
            let (p, c, d_a) = (3, 5, 4);
            let params = random_fusion(&tape, &mut rng, c, d_a);
            // random magnitudes up to +-50 to exercise the stabilized softmax
            let y1 = uniform(&mut rng, &[p, c], 50.0);
            let y2 = uniform(&mut rng, &[p, c], 50.0);
            let s = tape.scale(&tape.add(&y1, &y2).unwrap(), 0.5).unwrap();
            let (fused, beta) = channel_attention(&tape, &[y1.clone(), y2.clone()], &s, &params).unwrap();

            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let score = |q: f64, h: f64| -> f64 {
                (0..d_a)
                    .map(|a| {
                        let z = sig(q * params.wa.data()[a] + h * params.wa.data()[d_a + a]);
                        params.va.data()[a] * z
                    })
                    .sum()
            };
            for pi in 0..p {
                for ci in 0..c {
                    let q = s.data()[pi * c + ci];
                    let h1 = y1.data()[pi * c + ci];
                    let h2 = y2.data()[pi * c + ci];
                    let (e1, e2) = (score(q, h1), score(q, h2));
                    let m = e1.max(e2);
                    let (x1, x2) = ((e1 - m).exp(), (e2 - m).exp());
                    let b1 = x1 / (x1 + x2);
                    let b2 = x2 / (x1 + x2);
                    assert!((beta.at(&[pi, 0, ci]) - b1).abs() <= 1e-12);
                    assert!((beta.at(&[pi, 1, ci]) - b2).abs() <= 1e-12);
                    assert!((b1 + b2 - 1.0).abs() <= 1e-12);
                    let f = b1 * h1 + b2 * h2;
                    assert!((fused.at(&[pi, ci]) - f).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_attention_requires_exactly_two_states() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_fusion(&tape, &mut rng, 4, 3);
        let y = uniform(&mut rng, &[2, 4], 1.0);
        let err = channel_attention(&tape, &[y.clone()], &y, &params);
        assert!(matches!(err, Err(crate::error::Error::Contract { .. })));
    }

    fn symmetric_skip_params(tape: &Tape, rng: &mut ChaCha8Rng, c: usize) -> SkipFusionParams {
        let shared = random_lstm(tape, rng, c, c);
        let wy = tape.leaf(&uniform(rng, &[c, c], 0.6));
        let fusion = FusionParams {
            wyf: wy.clone(),
            wyb: wy,
            by: tape.leaf(&uniform(rng, &[c], 0.3)),
            va: tape.leaf(&uniform(rng, &[3], 0.6)),
            wa: tape.leaf(&uniform(rng, &[2, 3], 0.6)),
        };
        SkipFusionParams { fwd: shared.clone(), bwd: shared, fusion, use_channel_attention: true }
    }

    #[test]
    fn fuse_skip_equal_inputs_and_symmetric_params_reduce_to_y1() {
        // With encoded == upsampled, shared direction parameters, and
        // wyf == wyb, the two combined states coincide; symmetric beta then
        // makes the output equal Y_1 (= Y_2) at each location.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tape = Tape::new();
        let c = 4;
        let params = symmetric_skip_params(&tape, &mut rng, c);
        let x = uniform(&mut rng, &[1, c, 3, 3], 1.0);
        let out = fuse_skip(&tape, &x, &x, &params).unwrap();

        // Y_1 computed through the vector pipeline on the same rows.
        let rows = tape.reshape(&tape.permute(&x, &[0, 2, 3, 1]).unwrap(), &[9, c]).unwrap();
        let (hf, hb) = bidirectional_pass(&tape, &[rows.clone(), rows], &params.fwd, &params.bwd).unwrap();
        let y1 = combine_y(&tape, &hf[0], &hb[0], &params.fusion).unwrap();
        let y2 = combine_y(&tape, &hf[1], &hb[1], &params.fusion).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
        let back = tape
            .permute(&tape.reshape(&y1, &[1, 3, 3, c]).unwrap(), &[0, 3, 1, 2])
            .unwrap();
        for (o, e) in out.fused.data().iter().zip(back.data()) {
            assert!((o - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn fuse_skip_single_pixel_equals_vector_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let tape = Tape::new();
        let c = 5;
        let params = SkipFusionParams {
            fwd: random_lstm(&tape, &mut rng, c, c),
            bwd: random_lstm(&tape, &mut rng, c, c),
            fusion: random_fusion(&tape, &mut rng, c, 3),
            use_channel_attention: true,
        };
        let enc = uniform(&mut rng, &[1, c, 1, 1], 1.0);
        let ups = uniform(&mut rng, &[1, c, 1, 1], 1.0);
        let out = fuse_skip(&tape, &enc, &ups, &params).unwrap();

        let x1 = Tensor::from_vec(enc.data().to_vec(), &[1, c]).unwrap();
        let x2 = Tensor::from_vec(ups.data().to_vec(), &[1, c]).unwrap();
        let (hf, hb) = bidirectional_pass(&tape, &[x1, x2], &params.fwd, &params.bwd).unwrap();
        let y1 = combine_y(&tape, &hf[0], &hb[0], &params.fusion).unwrap();
        let y2 = combine_y(&tape, &hf[1], &hb[1], &params.fusion).unwrap();
        let s = tape.scale(&tape.add(&y1, &y2).unwrap(), 0.5).unwrap();
        let (fused, _) = channel_attention(&tape, &[y1, y2], &s, &params.fusion).unwrap();
        for (a, b) in out.fused.data().iter().zip(fused.data()) {
            assert_eq!(a, b, "single-pixel fuse_skip must match the composed ops bitwise");
        }
    }

    #[test]
    fn fuse_skip_without_attention_is_the_mean_of_y1_y2() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let tape = Tape::new();
        let c = 3;
        let mut params = SkipFusionParams {
            fwd: random_lstm(&tape, &mut rng, c, c),
            bwd: random_lstm(&tape, &mut rng, c, c),
            fusion: random_fusion(&tape, &mut rng, c, 3),
            use_channel_attention: false,
        };
        let enc = uniform(&mut rng, &[1, c, 2, 2], 1.0);
        let ups = uniform(&mut rng, &[1, c, 2, 2], 1.0);
        let out = fuse_skip(&tape, &enc, &ups, &params).unwrap();
        assert!(out.beta.is_none());

        params.use_channel_attention = true;
        params.fusion.va = tape.leaf(&Tensor::zeros(&[3]));
        let with_uniform_beta = fuse_skip(&tape, &enc, &ups, &params).unwrap();
        // zero scores force beta = 1/2, which is exactly the fixed mean
        for (a, b) in out.fused.data().iter().zip(with_uniform_beta.fused.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn fuse_skip_is_equivariant_under_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let tape = Tape::new();
        let c = 3;
        let params = SkipFusionParams {
            fwd: random_lstm(&tape, &mut rng, c, c),
            bwd: random_lstm(&tape, &mut rng, c, c),
            fusion: random_fusion(&tape, &mut rng, c, 3),
            use_channel_attention: true,
        };
        let (h, w) = (2, 3);
        let enc = uniform(&mut rng, &[1, c, h, w], 1.0);
        let ups = uniform(&mut rng, &[1, c, h, w], 1.0);
        let base = fuse_skip(&tape, &enc, &ups, &params).unwrap();

        // Swap two spatial locations in both inputs, expect the same swap in
        // the output.
        let (pa, pb) = ((0usize, 1usize), (1usize, 2usize));
        let swap = |t: &Tensor| -> Tensor {
            let mut d = t.data().to_vec();
            for ci in 0..c {
                let ia = (ci * h + pa.0) * w + pa.1;
                let ib = (ci * h + pb.0) * w + pb.1;
                d.swap(ia, ib);
            }
            Tensor::from_vec(d, t.shape()).unwrap()
        };
        let swapped = fuse_skip(&tape, &swap(&enc), &swap(&ups), &params).unwrap();
        let expected = swap(&base.fused);
        for (a, b) in swapped.fused.data().iter().zip(expected.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fuse_skip_rejects_mismatched_shapes() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = SkipFusionParams {
            fwd: random_lstm(&tape, &mut rng, 3, 3),
            bwd: random_lstm(&tape, &mut rng, 3, 3),
            fusion: random_fusion(&tape, &mut rng, 3, 3),
            use_channel_attention: true,
        };
        let a = uniform(&mut rng, &[1, 3, 2, 2], 1.0);
        let b = uniform(&mut rng, &[1, 3, 4, 4], 1.0);
        assert!(fuse_skip(&tape, &a, &b, &params).is_err());
    }

    #[test]
    fn beta_rows_sum_to_one_under_extreme_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let tape = Tape::new();
        let params = random_fusion(&tape, &mut rng, 4, 3);
        let y1 = uniform(&mut rng, &[4, 4], 50.0);
        let y2 = uniform(&mut rng, &[4, 4], 50.0);
        let s = tape.scale(&tape.add(&y1, &y2).unwrap(), 0.5).unwrap();
        let (_, beta) = channel_attention(&tape, &[y1, y2], &s, &params).unwrap();
        for pi in 0..4 {
            for ci in 0..4 {
                let total = beta.at(&[pi, 0, ci]) + beta.at(&[pi, 1, ci]);
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }
}
