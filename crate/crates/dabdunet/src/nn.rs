//! Architecture building blocks: dense blocks, transition layers, and the
//! attention gate applied to encoder skips.
//!
//! Blocks are pure functions of `(input, params)` recorded on a caller-owned
//! [`Tape`]; they hold no state of their own. Parameter structs carry
//! tape-registered leaf tensors so gradients land on them directly.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Shape of one dense block: `num_layers` composite layers, each producing
/// `growth_rate` channels on top of `in_channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub in_channels: usize,
}

impl DenseBlockConfig {
    pub fn new(num_layers: usize, growth_rate: usize, in_channels: usize) -> Result<Self> {
        if num_layers == 0 || growth_rate == 0 {
            return Err(Error::Config(format!(
                "dense block needs num_layers >= 1 and growth_rate >= 1, got L={num_layers}, k={growth_rate}"
            )));
        }
        Ok(DenseBlockConfig { num_layers, growth_rate, in_channels })
    }

    /// Channels entering layer `j` (0-based): the input plus all previous
    /// layer outputs.
    pub fn layer_in_channels(&self, j: usize) -> usize {
        self.in_channels + j * self.growth_rate
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.num_layers * self.growth_rate
    }

    /// Trainable scalar count of the whole block (3x3 kernels plus biases).
    pub fn param_count(&self) -> usize {
        (0..self.num_layers)
            .map(|j| self.growth_rate * self.layer_in_channels(j) * 9 + self.growth_rate)
            .sum()
    }
}

/// One convolution's weights: kernel `[F, C, kh, kw]` and bias `[F]`.
#[derive(Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer convolution parameters of a dense block, in layer order.
#[derive(Clone)]
pub struct DenseBlockParams {
    pub layers: Vec<ConvParams>,
}

/// Dense connectivity: layer `j` sees the channel concatenation of the block
/// input and every previous layer output, applies ReLU then a padded 3x3
/// convolution, and contributes `growth_rate` new channels. The block output
/// is `concat(input, y_1, ..., y_L)`; spatial extents are preserved.
pub fn dense_block(
    tape: &Tape,
    x: &Tensor,
    cfg: &DenseBlockConfig,
    params: &DenseBlockParams,
) -> Result<Tensor> {
    if x.shape().len() != 4 || x.shape()[1] != cfg.in_channels {
        return Err(Error::shape(
            "dense_block",
            format!("input {:?} does not carry {} channels", x.shape(), cfg.in_channels),
        ));
    }
    if params.layers.len() != cfg.num_layers {
        return Err(Error::shape(
            "dense_block",
            format!("{} layer params for {} layers", params.layers.len(), cfg.num_layers),
        ));
    }
    let mut features: Vec<Tensor> = vec![x.clone()];
    for (j, layer) in params.layers.iter().enumerate() {
        let want = [cfg.growth_rate, cfg.layer_in_channels(j), 3, 3];
        if layer.weight.shape() != want {
            return Err(Error::shape(
                "dense_block",
                format!("layer {j} kernel {:?}, want {:?}", layer.weight.shape(), want),
            ));
        }
        let refs: Vec<&Tensor> = features.iter().collect();
        let stacked = tape.concat(&refs, 1)?;
        let y = tape.conv2d_pre_relu(&stacked, &layer.weight, Some(&layer.bias), 1, 1)?;
        features.push(y);
    }
    let refs: Vec<&Tensor> = features.iter().collect();
    tape.concat(&refs, 1)
}

/// 1x1 channel-compressing convolution followed by 2x2 max pooling.
pub fn transition_down(tape: &Tape, x: &Tensor, conv: &ConvParams) -> Result<Tensor> {
    let w = conv.weight.shape();
    if w.len() != 4 || w[2] != 1 || w[3] != 1 {
        return Err(Error::shape("transition_down", format!("expected 1x1 kernel, got {w:?}")));
    }
    let compressed = tape.conv2d(x, &conv.weight, Some(&conv.bias), 1, 0)?;
    tape.maxpool2d(&compressed, 2)
}

/// Nearest-neighbor 2x upsampling followed by a padded 3x3 convolution that
/// sets the channel count for the level above.
pub fn transition_up(tape: &Tape, x: &Tensor, conv: &ConvParams) -> Result<Tensor> {
    let w = conv.weight.shape();
    if w.len() != 4 || w[2] != 3 || w[3] != 3 {
        return Err(Error::shape("transition_up", format!("expected 3x3 kernel, got {w:?}")));
    }
    let up = tape.upsample2d(x, 2)?;
    tape.conv2d(&up, &conv.weight, Some(&conv.bias), 1, 1)
}

/// Attention gate parameters. `wx` and `wg` are 1x1 convolutions into the
/// intermediate attention width `F_a`; `psi` maps `F_a` to a single
/// coefficient channel.
#[derive(Clone)]
pub struct AttentionGateParams {
    /// `[F_a, F_l, 1, 1]`, no bias.
    pub wx: Tensor,
    /// `[F_a, F_g, 1, 1]`.
    pub wg: Tensor,
    /// `[F_a]`, bias of the gating-signal path.
    pub bg: Tensor,
    /// `[1, F_a, 1, 1]`.
    pub psi: Tensor,
    /// `[1]`, scalar bias after `psi`.
    pub bpsi: Tensor,
}

impl AttentionGateParams {
    /// Closed-form trainable scalar count for given widths.
    pub fn param_count(f_l: usize, f_g: usize, f_a: usize) -> usize {
        f_a * f_l + f_a * f_g + f_a + f_a + 1
    }
}

/// Gates the skip feature `x` by a per-pixel coefficient computed from `x`
/// and the coarser gating signal `g`:
///
/// `alpha = sigmoid(psi^T relu(Wx x + Wg g + bg) + b_psi)`, output
/// `x_hat = x * alpha` with `alpha` broadcast over channels.
///
/// `g` may sit one ladder level coarser (`H/2 x W/2`); it is then upsampled
/// onto `x`'s grid inside the gate. Returns `(x_hat, alpha)` so tests and
/// diagnostics can inspect the coefficients.
pub fn attention_gate(
    tape: &Tape,
    x: &Tensor,
    g: &Tensor,
    params: &AttentionGateParams,
) -> Result<(Tensor, Tensor)> {
    let xs = x.shape();
    let gs = g.shape();
    if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] {
        return Err(Error::shape(
            "attention_gate",
            format!("inputs must be [N,C,H,W] with equal batch, got {xs:?} and {gs:?}"),
        ));
    }
    let (h, w) = (xs[2], xs[3]);
    let g_up = if gs[2] == h && gs[3] == w {
        g.clone()
    } else if gs[2] * 2 == h && gs[3] * 2 == w {
        tape.upsample2d(g, 2)?
    } else {
        return Err(Error::shape(
            "attention_gate",
            format!("gating signal {}x{} is neither equal to nor one level coarser than {h}x{w}", gs[2], gs[3]),
        ));
    };
    let xa = tape.conv2d(x, &params.wx, None, 1, 0)?;
    let ga = tape.conv2d(&g_up, &params.wg, Some(&params.bg), 1, 0)?;
    let joint = tape.add(&xa, &ga)?;
    let q = tape.conv2d_pre_relu(&joint, &params.psi, Some(&params.bpsi), 1, 0)?;
    let alpha = tape.sigmoid(&q)?;
    let x_hat = tape.mul(x, &alpha)?;
    Ok((x_hat, alpha))
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

    fn block_params(rng: &mut ChaCha8Rng, cfg: &DenseBlockConfig) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..cfg.num_layers)
            .map(|j| {
                let w = uniform(rng, &[cfg.growth_rate, cfg.layer_in_channels(j), 3, 3], 0.5);
                let b = uniform(rng, &[cfg.growth_rate], 0.2);
                (w.data().to_vec(), b.data().to_vec())
            })
            .collect()
    }

    fn make_params(tape: &Tape, cfg: &DenseBlockConfig, raw: &[(Vec<f64>, Vec<f64>)]) -> DenseBlockParams {
        DenseBlockParams {
            layers: raw
                .iter()
                .enumerate()
                .map(|(j, (w, b))| ConvParams {
                    weight: tape
                        .leaf(&Tensor::from_vec(w.clone(), &[cfg.growth_rate, cfg.layer_in_channels(j), 3, 3]).unwrap()),
                    bias: tape.leaf(&Tensor::from_vec(b.clone(), &[cfg.growth_rate]).unwrap()),
                })
                .collect(),
        }
    }

    #[test]
    fn dense_block_channel_arithmetic() {
        let cfg = DenseBlockConfig::new(2, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = block_params(&mut rng, &cfg);
        let tape = Tape::new();
        let params = make_params(&tape, &cfg, &raw);
        let x = uniform(&mut rng, &[1, 3, 8, 8], 1.0);
        let out = dense_block(&tape, &x, &cfg, &params).unwrap();
        assert_eq!(out.shape(), &[1, 11, 8, 8]);
    }

    #[test]
    fn dense_block_zero_weights_passes_input_through() {
        let cfg = DenseBlockConfig::new(2, 4, 3).unwrap();
        let tape = Tape::new();
        let params = DenseBlockParams {
            layers: (0..2)
                .map(|j| ConvParams {
                    weight: tape.leaf(&Tensor::zeros(&[4, cfg.layer_in_channels(j), 3, 3])),
                    bias: tape.leaf(&Tensor::zeros(&[4])),
                })
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform(&mut rng, &[1, 3, 8, 8], 1.0);
        let out = dense_block(&tape, &x, &cfg, &params).unwrap();
        // First 3 channels are the input, the remaining 8 are all zero.
        let plane = 64;
        assert_eq!(&out.data()[..3 * plane], x.data());
        assert!(out.data()[3 * plane..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_block_middle_layer_gradient_matches_fd() {
        let cfg = DenseBlockConfig::new(3, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let raw = block_params(&mut rng, &cfg);
        let x = uniform(&mut rng, &[1, 2, 5, 5], 1.0);

        // Analytic gradient of sum(output) wrt the middle layer kernel.
        let tape = Tape::new();
        let params = make_params(&tape, &cfg, &raw);
        let out = dense_block(&tape, &x, &cfg, &params).unwrap();
        let loss = tape.sum(&out).unwrap();
        tape.backward(&loss).unwrap();
        let analytic = tape.grad(&params.layers[1].weight).unwrap();

        let fd = fd_grad(&raw[1].0, 1e-5, |wv| {
            let mut raw2 = raw.clone();
            raw2[1].0 = wv.to_vec();
            let tape = Tape::new();
            let params = make_params(&tape, &cfg, &raw2);
            let out = dense_block(&tape, &x, &cfg, &params).unwrap();
            tape.sum(&out).unwrap().item()
        });
        assert!(max_rel_err(analytic.data(), &fd) <= 1e-4);
    }

    #[test]
    fn dense_connectivity_zeroing_a_layer_only_touches_downstream_channels() {
        let cfg = DenseBlockConfig::new(3, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let raw = block_params(&mut rng, &cfg);
        let x = uniform(&mut rng, &[1, 2, 6, 6], 1.0);

        let run = |raw: &[(Vec<f64>, Vec<f64>)]| {
            let tape = Tape::new();
            let params = make_params(&tape, &cfg, raw);
            dense_block(&tape, &x, &cfg, &params).unwrap()
        };
        let base = run(&raw);
        // Zero layer j = 1 (0-based): channels of x and layer 0 stay put,
        // layer 1's slice goes to zero, layer 2's slice may move.
        let mut ablated = raw.clone();
        ablated[1].0.iter_mut().for_each(|v| *v = 0.0);
        ablated[1].1.iter_mut().for_each(|v| *v = 0.0);
        let out = run(&ablated);

        let plane = 36;
        let upstream = (cfg.in_channels + cfg.growth_rate) * plane;
        assert_eq!(&out.data()[..upstream], &base.data()[..upstream]);
        let layer1 = &out.data()[upstream..upstream + cfg.growth_rate * plane];
        assert!(layer1.iter().all(|&v| v == 0.0));
        let downstream = upstream + cfg.growth_rate * plane;
        assert_ne!(&out.data()[downstream..], &base.data()[downstream..]);
    }

    #[test]
    fn block_param_count_matches_tensors() {
        let cfg = DenseBlockConfig::new(2, 8, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = block_params(&mut rng, &cfg);
        let actual: usize = raw.iter().map(|(w, b)| w.len() + b.len()).sum();
        assert_eq!(actual, cfg.param_count());
        assert_eq!(cfg.out_channels(), 32);
    }

    #[test]
    fn transitions_change_resolution_and_channels() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = uniform(&mut rng, &[1, 8, 16, 16], 1.0);
        let down = ConvParams {
            weight: tape.leaf(&uniform(&mut rng, &[4, 8, 1, 1], 0.5)),
            bias: tape.leaf(&uniform(&mut rng, &[4], 0.2)),
        };
        let y = transition_down(&tape, &x, &down).unwrap();
        assert_eq!(y.shape(), &[1, 4, 8, 8]);

        let up = ConvParams {
            weight: tape.leaf(&uniform(&mut rng, &[8, 4, 3, 3], 0.5)),
            bias: tape.leaf(&uniform(&mut rng, &[8], 0.2)),
        };
        let z = transition_up(&tape, &y, &up).unwrap();
        assert_eq!(z.shape(), &[1, 8, 16, 16]);
    }

    #[test]
    fn transition_round_trip_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x_raw = uniform(&mut rng, &[1, 4, 8, 8], 1.0);
        let dw = uniform(&mut rng, &[2, 4, 1, 1], 0.5).data().to_vec();
        let db = uniform(&mut rng, &[2], 0.2).data().to_vec();
        let uw = uniform(&mut rng, &[4, 2, 3, 3], 0.5).data().to_vec();
        let ub = uniform(&mut rng, &[4], 0.2).data().to_vec();

        let eval = |xv: &[f64]| -> (f64, Option<Tensor>) {
            let tape = Tape::new();
            let x = tape.leaf(&Tensor::from_vec(xv.to_vec(), &[1, 4, 8, 8]).unwrap());
            let down = ConvParams {
                weight: tape.leaf(&Tensor::from_vec(dw.clone(), &[2, 4, 1, 1]).unwrap()),
                bias: tape.leaf(&Tensor::from_vec(db.clone(), &[2]).unwrap()),
            };
            let up = ConvParams {
                weight: tape.leaf(&Tensor::from_vec(uw.clone(), &[4, 2, 3, 3]).unwrap()),
                bias: tape.leaf(&Tensor::from_vec(ub.clone(), &[4]).unwrap()),
            };
            let mid = transition_down(&tape, &x, &down).unwrap();
            let out = transition_up(&tape, &mid, &up).unwrap();
            let loss = tape.sum(&out).unwrap();
            let v = loss.item();
            tape.backward(&loss).unwrap();
            (v, tape.grad(&x))
        };
        let (_, gx) = eval(x_raw.data());
        let fd = fd_grad(x_raw.data(), 1e-5, |xv| eval(xv).0);
        assert!(max_rel_err(gx.unwrap().data(), &fd) <= 1e-4);
    }

    #[test]
    fn attention_gate_zero_psi_halves_input() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = uniform(&mut rng, &[1, 4, 8, 8], 1.0);
        let g = uniform(&mut rng, &[1, 6, 4, 4], 1.0);
        let params = AttentionGateParams {
            wx: tape.leaf(&uniform(&mut rng, &[2, 4, 1, 1], 0.5)),
            wg: tape.leaf(&uniform(&mut rng, &[2, 6, 1, 1], 0.5)),
            bg: tape.leaf(&uniform(&mut rng, &[2], 0.2)),
            psi: tape.leaf(&Tensor::zeros(&[1, 2, 1, 1])),
            bpsi: tape.leaf(&Tensor::zeros(&[1])),
        };
        let (x_hat, alpha) = attention_gate(&tape, &x, &g, &params).unwrap();
        assert!(alpha.data().iter().all(|&a| a == 0.5));
        for (o, i) in x_hat.data().iter().zip(x.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn attention_gate_saturated_bias_opens_gate() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = uniform(&mut rng, &[1, 4, 8, 8], 1.0);
        let g = uniform(&mut rng, &[1, 6, 4, 4], 1.0);
        let params = AttentionGateParams {
            wx: tape.leaf(&uniform(&mut rng, &[2, 4, 1, 1], 0.5)),
            wg: tape.leaf(&uniform(&mut rng, &[2, 6, 1, 1], 0.5)),
            bg: tape.leaf(&uniform(&mut rng, &[2], 0.2)),
            psi: tape.leaf(&Tensor::zeros(&[1, 2, 1, 1])),
            bpsi: tape.leaf(&Tensor::from_vec(vec![20.0], &[1]).unwrap()),
        };
        let (x_hat, alpha) = attention_gate(&tape, &x, &g, &params).unwrap();
        assert!(alpha.data().iter().all(|&a| a >= 1.0 - 1e-8));
        for (o, i) in x_hat.data().iter().zip(x.data()) {
            assert!((o - i).abs() <= 1e-7 * i.abs().max(1.0));
        }
    }

    #[test]
    fn attention_gate_alpha_stays_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let tape = Tape::new();
            let x = uniform(&mut rng, &[2, 4, 8, 8], 3.0);
            let g = uniform(&mut rng, &[2, 6, 4, 4], 3.0);
            let params = AttentionGateParams {
                wx: tape.leaf(&uniform(&mut rng, &[2, 4, 1, 1], 2.0)),
                wg: tape.leaf(&uniform(&mut rng, &[2, 6, 1, 1], 2.0)),
                bg: tape.leaf(&uniform(&mut rng, &[2], 2.0)),
                psi: tape.leaf(&uniform(&mut rng, &[1, 2, 1, 1], 2.0)),
                bpsi: tape.leaf(&uniform(&mut rng, &[1], 2.0)),
            };
            let (_, alpha) = attention_gate(&tape, &x, &g, &params).unwrap();
            assert!(alpha.data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn attention_gate_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x0 = uniform(&mut rng, &[1, 4, 8, 8], 1.0);
        let g0 = uniform(&mut rng, &[1, 6, 4, 4], 1.0);
        let raw: Vec<(Vec<f64>, Vec<usize>)> = vec![
            (uniform(&mut rng, &[2, 4, 1, 1], 0.5).data().to_vec(), vec![2, 4, 1, 1]),
            (uniform(&mut rng, &[2, 6, 1, 1], 0.5).data().to_vec(), vec![2, 6, 1, 1]),
            (uniform(&mut rng, &[2], 0.3).data().to_vec(), vec![2]),
            (uniform(&mut rng, &[1, 2, 1, 1], 0.5).data().to_vec(), vec![1, 2, 1, 1]),
            (uniform(&mut rng, &[1], 0.3).data().to_vec(), vec![1]),
        ];

        // Loss as a function of (x, g, all five parameter groups).
        let eval = |xv: &[f64], gv: &[f64], raw: &[(Vec<f64>, Vec<usize>)], want_grads: bool| {
            let tape = Tape::new();
            let x = tape.leaf(&Tensor::from_vec(xv.to_vec(), &[1, 4, 8, 8]).unwrap());
            let g = tape.leaf(&Tensor::from_vec(gv.to_vec(), &[1, 6, 4, 4]).unwrap());
            let leaves: Vec<Tensor> = raw
                .iter()
                .map(|(v, s)| tape.leaf(&Tensor::from_vec(v.clone(), s).unwrap()))
                .collect();
            let params = AttentionGateParams {
                wx: leaves[0].clone(),
                wg: leaves[1].clone(),
                bg: leaves[2].clone(),
                psi: leaves[3].clone(),
                bpsi: leaves[4].clone(),
            };
            let (x_hat, _) = attention_gate(&tape, &x, &g, &params).unwrap();
            let loss = tape.sum(&x_hat).unwrap();
            let v = loss.item();
            if !want_grads {
                return (v, Vec::new());
            }
            tape.backward(&loss).unwrap();
            let mut grads = vec![
                tape.grad(&x).unwrap().data().to_vec(),
                tape.grad(&g).unwrap().data().to_vec(),
            ];
            grads.extend(leaves.iter().map(|l| tape.grad(l).unwrap().data().to_vec()));
            (v, grads)
        };

        let (_, grads) = eval(x0.data(), g0.data(), &raw, true);

        let fd_x = fd_grad(x0.data(), 1e-5, |v| eval(v, g0.data(), &raw, false).0);
        assert!(max_rel_err(&grads[0], &fd_x) <= 1e-4, "d/dx");
        let fd_g = fd_grad(g0.data(), 1e-5, |v| eval(x0.data(), v, &raw, false).0);
        assert!(max_rel_err(&grads[1], &fd_g) <= 1e-4, "d/dg");
        for pi in 0..raw.len() {
            let fd = fd_grad(&raw[pi].0, 1e-5, |v| {
                let mut r = raw.clone();
                r[pi].0 = v.to_vec();
                eval(x0.data(), g0.data(), &r, false).0
            });
            assert!(max_rel_err(&grads[2 + pi], &fd) <= 1e-4, "param group {pi}");
        }
    }

    #[test]
    fn attention_gate_rejects_incompatible_grids() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = uniform(&mut rng, &[1, 4, 8, 8], 1.0);
        let g = uniform(&mut rng, &[1, 6, 3, 3], 1.0);
        let params = AttentionGateParams {
            wx: tape.leaf(&uniform(&mut rng, &[2, 4, 1, 1], 0.5)),
            wg: tape.leaf(&uniform(&mut rng, &[2, 6, 1, 1], 0.5)),
            bg: tape.leaf(&uniform(&mut rng, &[2], 0.2)),
            psi: tape.leaf(&Tensor::zeros(&[1, 2, 1, 1])),
            bpsi: tape.leaf(&Tensor::zeros(&[1])),
        };
        assert!(attention_gate(&tape, &x, &g, &params).is_err());
    }
}
