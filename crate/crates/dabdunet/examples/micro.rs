// Scratch micro-benchmarks for kernel throughput. Run by hand.

use std::hint::black_box;
use std::time::Instant;

use dabdunet::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (p, c) = (4096usize, 32usize);
    let a = Tensor::uniform(&[p, c], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[c, c], -1.0, 1.0, &mut rng);

    // tape matmul [4096x32][32x32]
    let t0 = Instant::now();
    let tape = Tape::new();
    for _ in 0..100 {
        black_box(tape.matmul(&a, &b).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64() / 100.0;
    let flops = 2.0 * (p * c * c) as f64;
    println!("matmul {p}x{c}x{c}: {:.1} us, {:.2} GFLOP/s", dt * 1e6, flops / dt / 1e9);

    // sigmoid over p*c
    let t0 = Instant::now();
    for _ in 0..100 {
        black_box(tape.sigmoid(&a).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64() / 100.0;
    println!("sigmoid {}: {:.1} us ({:.1} ns/elem)", p * c, dt * 1e6, dt / (p * c) as f64 * 1e9);

    // raw exp cost
    let vals: Vec<f64> = a.data().to_vec();
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..100 {
        for &v in &vals {
            acc += black_box((-v).exp());
        }
    }
    let dt = t0.elapsed().as_secs_f64() / 100.0;
    println!("raw exp {}: {:.1} us ({:.1} ns/elem), acc {acc:.1}", vals.len(), dt * 1e6, dt / vals.len() as f64 * 1e9);

    // conv2d 3x3, 48 -> 32 @ 32^2, batch 4 (the big decoder up-conv)
    let x = Tensor::uniform(&[4, 48, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[32, 48, 3, 3], -0.2, 0.2, &mut rng);
    let bias = Tensor::uniform(&[32], -0.1, 0.1, &mut rng);
    let t0 = Instant::now();
    for _ in 0..10 {
        black_box(tape.conv2d(&x, &w, Some(&bias), 1, 1).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64() / 10.0;
    let macs = 4.0 * 32.0 * 48.0 * 9.0 * 1024.0;
    println!("conv 48->32 @32^2 b4: {:.1} us, {:.2} GFLOP/s", dt * 1e6, 2.0 * macs / dt / 1e9);

    // concat of 8 feature maps along channels (dense-block style)
    let parts: Vec<Tensor> =
        (0..4).map(|_| Tensor::uniform(&[4, 8, 32, 32], -1.0, 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor> = parts.iter().collect();
    let t0 = Instant::now();
    for _ in 0..100 {
        black_box(tape.concat(&refs, 1).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64() / 100.0;
    println!("concat 4x[4,8,32,32]: {:.1} us", dt * 1e6);

    // permute NCHW -> NHWC on [4,32,32,32]
    let big = Tensor::uniform(&[4, 32, 32, 32], -1.0, 1.0, &mut rng);
    let t0 = Instant::now();
    for _ in 0..100 {
        black_box(tape.permute(&big, &[0, 2, 3, 1]).unwrap());
    }
    let dt = t0.elapsed().as_secs_f64() / 100.0;
    println!("permute [4,32,32,32]: {:.1} us", dt * 1e6);

    println!("tape nodes allocated: {}", tape.len());
    bench_mm_variants();
    bench_backward_parts();
}

// variant experiments appended: compare mm inner-loop structures
mod mmvar {
    pub fn mm_v2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        // 4 independent accumulator rows, summed at the end
        let mut out = vec![0.0; m * n];
        let mut acc0 = vec![0.0; n];
        let mut acc1 = vec![0.0; n];
        let mut acc2 = vec![0.0; n];
        let mut acc3 = vec![0.0; n];
        for i in 0..m {
            acc0.fill(0.0);
            acc1.fill(0.0);
            acc2.fill(0.0);
            acc3.fill(0.0);
            let row_a = &a[i * k..(i + 1) * k];
            let mut p = 0;
            while p + 4 <= k {
                let a0 = row_a[p];
                let a1 = row_a[p + 1];
                let a2 = row_a[p + 2];
                let a3 = row_a[p + 3];
                let b0 = &b[p * n..][..n];
                let b1 = &b[(p + 1) * n..][..n];
                let b2 = &b[(p + 2) * n..][..n];
                let b3 = &b[(p + 3) * n..][..n];
                for j in 0..n {
                    acc0[j] += a0 * b0[j];
                    acc1[j] += a1 * b1[j];
                    acc2[j] += a2 * b2[j];
                    acc3[j] += a3 * b3[j];
                }
                p += 4;
            }
            while p < k {
                let a0 = row_a[p];
                let b0 = &b[p * n..][..n];
                for j in 0..n {
                    acc0[j] += a0 * b0[j];
                }
                p += 1;
            }
            let row_o = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                row_o[j] = (acc0[j] + acc1[j]) + (acc2[j] + acc3[j]);
            }
        }
        out
    }

    pub fn mm_v3(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        // two output rows at a time, 2-wide p unroll
        let mut out = vec![0.0; m * n];
        let mut i = 0;
        while i + 2 <= m {
            let (o_lo, o_hi) = out.split_at_mut((i + 1) * n);
            let row_o0 = &mut o_lo[i * n..];
            let row_o1 = &mut o_hi[..n];
            let ra0 = &a[i * k..(i + 1) * k];
            let ra1 = &a[(i + 1) * k..(i + 2) * k];
            let mut p = 0;
            while p + 2 <= k {
                let a00 = ra0[p];
                let a01 = ra0[p + 1];
                let a10 = ra1[p];
                let a11 = ra1[p + 1];
                let b0 = &b[p * n..][..n];
                let b1 = &b[(p + 1) * n..][..n];
                for j in 0..n {
                    row_o0[j] += a00 * b0[j] + a01 * b1[j];
                    row_o1[j] += a10 * b0[j] + a11 * b1[j];
                }
                p += 2;
            }
            while p < k {
                let b0 = &b[p * n..][..n];
                for j in 0..n {
                    row_o0[j] += ra0[p] * b0[j];
                    row_o1[j] += ra1[p] * b0[j];
                }
                p += 1;
            }
            i += 2;
        }
        while i < m {
            let row_o = &mut out[i * n..(i + 1) * n];
            let ra = &a[i * k..(i + 1) * k];
            for p in 0..k {
                let b0 = &b[p * n..][..n];
                for j in 0..n {
                    row_o[j] += ra[p] * b0[j];
                }
            }
            i += 1;
        }
        out
    }
}

#[allow(dead_code)]
fn bench_mm_variants() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for (m, k, n) in [(4096usize, 32usize, 32usize), (4096, 432, 32), (4096, 32, 128)] {
        let a = dabdunet::Tensor::uniform(&[m, k], -1.0, 1.0, &mut rng);
        let b = dabdunet::Tensor::uniform(&[k, n], -1.0, 1.0, &mut rng);
        let flops = 2.0 * (m * k * n) as f64;
        let reps = (2e9 / flops).max(3.0) as usize;
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            std::hint::black_box(mmvar::mm_v2(a.data(), b.data(), m, k, n));
        }
        let v2 = t0.elapsed().as_secs_f64() / reps as f64;
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            std::hint::black_box(mmvar::mm_v3(a.data(), b.data(), m, k, n));
        }
        let v3 = t0.elapsed().as_secs_f64() / reps as f64;
        println!(
            "mm {m}x{k}x{n}: v2 {:.2} GFLOP/s, v3 {:.2} GFLOP/s",
            flops / v2 / 1e9,
            flops / v3 / 1e9
        );
    }
}

#[allow(dead_code)]
fn bench_backward_parts() {
    use dabdunet::lstm::{fuse_skip, CellOutput, FusionParams, GateParams, LstmParams, SkipFusionParams};
    use rand::SeedableRng;
    use std::hint::black_box;
    use std::time::Instant;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);

    // conv fwd+bwd at the decoder level-1 shape
    let x = dabdunet::Tensor::uniform(&[4, 48, 32, 32], -1.0, 1.0, &mut rng);
    let w = dabdunet::Tensor::uniform(&[32, 48, 3, 3], -0.2, 0.2, &mut rng);
    let bias = dabdunet::Tensor::uniform(&[32], -0.1, 0.1, &mut rng);
    let t0 = Instant::now();
    for _ in 0..10 {
        let tape = dabdunet::Tape::new();
        let xl = tape.leaf(&x);
        let y = tape.conv2d(&xl, &w, Some(&bias), 1, 1).unwrap();
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        black_box(tape.grad(&xl));
    }
    println!("conv48->32 fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() / 10.0 * 1e3);

    // fuse_skip fwd+bwd at level-1 shape (P=4096, C=32)
    let c = 32;
    let gate = |rng: &mut rand_chacha::ChaCha8Rng| GateParams {
        w: dabdunet::Tensor::uniform(&[c, c], -0.2, 0.2, rng),
        u: dabdunet::Tensor::uniform(&[c, c], -0.2, 0.2, rng),
        b: dabdunet::Tensor::uniform(&[c], -0.1, 0.1, rng),
    };
    let mk = |rng: &mut rand_chacha::ChaCha8Rng| LstmParams {
        input: gate(rng),
        forget: gate(rng),
        output: gate(rng),
        candidate: gate(rng),
        sigma_h: CellOutput::Identity,
    };
    let params = SkipFusionParams {
        fwd: mk(&mut rng),
        bwd: mk(&mut rng),
        fusion: FusionParams {
            wyf: dabdunet::Tensor::uniform(&[c, c], -0.2, 0.2, &mut rng),
            wyb: dabdunet::Tensor::uniform(&[c, c], -0.2, 0.2, &mut rng),
            by: dabdunet::Tensor::uniform(&[c], -0.1, 0.1, &mut rng),
            va: dabdunet::Tensor::uniform(&[8], -0.3, 0.3, &mut rng),
            wa: dabdunet::Tensor::uniform(&[2, 8], -0.3, 0.3, &mut rng),
        },
        use_channel_attention: true,
    };
    let enc = dabdunet::Tensor::uniform(&[4, c, 32, 32], -1.0, 1.0, &mut rng);
    let ups = dabdunet::Tensor::uniform(&[4, c, 32, 32], -1.0, 1.0, &mut rng);

    let detach = |p: &SkipFusionParams| SkipFusionParams {
        fwd: p.fwd.clone(),
        bwd: p.bwd.clone(),
        fusion: p.fusion.clone(),
        use_channel_attention: true,
    };
    for round in 0..3 {
        let t0 = Instant::now();
        for _ in 0..5 {
            let fresh = dabdunet::Tape::new();
            let out = fuse_skip(&fresh, &enc, &ups, &detach(&params)).unwrap();
            black_box(&out.fused);
        }
        let fwd = t0.elapsed().as_secs_f64() / 5.0;
        let t0 = Instant::now();
        for _ in 0..5 {
            let fresh = dabdunet::Tape::new();
            let out = fuse_skip(&fresh, &enc, &ups, &detach(&params)).unwrap();
            let loss = fresh.sum(&out.fused).unwrap();
            fresh.backward(&loss).unwrap();
        }
        let both = t0.elapsed().as_secs_f64() / 5.0;
        println!("round {round} fuse_skip P=4096 C=32: fwd {:.1} ms, fwd+bwd {:.1} ms", fwd * 1e3, both * 1e3);
    }
}
