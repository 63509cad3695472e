//! Times individual tape ops at training-step shapes. Inputs are built
//! once outside the timed region.

use crosswell_core::{Tape, Tensor};
use std::time::Instant;

fn timed(label: &str, reps: usize, mut f: impl FnMut()) {
    f(); // warmup
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{label}: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn randv(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i as f32 * 0.61803) % 1.0) - 0.5).collect()
}

fn main() {
    let nseq = 440;
    let l = 57;
    let e = 192;
    let heads = 6;
    let dh = 32;
    let rows = nseq * l;

    let x_e = randv(rows * e);
    let w_qkv = randv(e * 3 * e);
    let w_mlp = randv(e * 4 * e);
    let x_qkv = randv(rows * 3 * e);
    let x_mlp = randv(rows * 4 * e);
    let x_heads = randv(nseq * heads * l * dh);
    let x_scores = randv(nseq * heads * l * l);
    let bias_qkv = randv(3 * e);
    let ones_e = vec![1.0f32; e];
    let zeros_e = vec![0.0f32; e];

    timed("matmul qkv fwd (25080x192 @ 192x576)", 5, || {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant_from(vec![rows, e], x_e.clone()).unwrap();
        let b = tape.constant_from(vec![e, 3 * e], w_qkv.clone()).unwrap();
        let _ = tape.matmul(a, b).unwrap();
    });

    timed("matmul qkv fwd+bwd", 5, || {
        let mut tape = Tape::<f32>::new();
        let a = tape
            .leaf(&Tensor::from_vec(vec![rows, e], x_e.clone()).unwrap().requires_grad(true));
        let b = tape
            .leaf(&Tensor::from_vec(vec![e, 3 * e], w_qkv.clone()).unwrap().requires_grad(true));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c, None).unwrap();
        tape.backward(loss).unwrap();
    });

    timed("permute qkv (440,57,3,6,32)->(2,0,3,1,4)", 5, || {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant_from(vec![nseq, l, 3, heads, dh], x_qkv.clone()).unwrap();
        let _ = tape.permute(a, &[2, 0, 3, 1, 4]).unwrap();
    });

    timed("permute kt (2640,57,32)->(0,2,1)", 5, || {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant_from(vec![nseq * heads, l, dh], x_heads.clone()).unwrap();
        let _ = tape.permute(a, &[0, 2, 1]).unwrap();
    });

    timed("bmm scores (2640 x 57x32 @ 32x57)", 5, || {
        let mut tape = Tape::<f32>::inference();
        let q = tape.constant_from(vec![nseq * heads, l, dh], x_heads.clone()).unwrap();
        let k = tape.constant_from(vec![nseq * heads, dh, l], x_heads.clone()).unwrap();
        let _ = tape.matmul(q, k).unwrap();
    });

    timed("softmax (2640,57,57) axis2", 5, || {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant_from(vec![nseq * heads, l, l], x_scores.clone()).unwrap();
        let _ = tape.softmax(a, 2).unwrap();
    });

    timed("layer_norm (25080x192)", 5, || {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant_from(vec![rows, e], x_e.clone()).unwrap();
        let g = tape.constant_from(vec![e], ones_e.clone()).unwrap();
        let b = tape.constant_from(vec![e], zeros_e.clone()).unwrap();
        let _ = tape.layer_norm(a, g, b, 1e-6).unwrap();
    });

    timed("gelu (25080x768)", 5, || {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant_from(vec![rows, 4 * e], x_mlp.clone()).unwrap();
        let _ = tape.gelu(a).unwrap();
    });

    timed("add bias broadcast (25080x576 + 576)", 5, || {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant_from(vec![rows, 3 * e], x_qkv.clone()).unwrap();
        let b = tape.constant_from(vec![3 * e], bias_qkv.clone()).unwrap();
        let _ = tape.add(a, b).unwrap();
    });

    timed("clone 19.3M f32 (baseline)", 5, || {
        let v = x_mlp.clone();
        std::hint::black_box(&v);
    });
}
