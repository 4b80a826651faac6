//! Tape gradients against central differences for every layer type.

use std::rc::Rc;

use floodgtn::graph::{normalized_adjacency, StationGraph};
use floodgtn::nn::gradcheck::{
    analytic_gradients, gradient_check, max_relative_error, numeric_gradients, project, DEFAULT_EPS,
};
use floodgtn::nn::layers::{EncoderBlock, GcnLayer, Linear, LstmCell, MultiHeadAttention};
use floodgtn::nn::{ModelParams, Tape, Var};
use floodgtn::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const THRESHOLD: f64 = 1e-4;
const ENCODER_THRESHOLD: f64 = 1e-3;

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Moves every parameter off its initial value so zero biases and unit
/// gains are exercised too.
fn jitter(params: &mut ModelParams, rng: &mut impl Rng) {
    for p in params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

/// Softmax is invariant to a per-row shift, so the key bias never receives
/// gradient; relative error is undefined there and the check is absolute.
fn check_attention(
    f: impl Fn(&mut Tape, &ModelParams, &[Var]) -> Result<Var>,
    p: &ModelParams,
    inputs: &[Tensor],
) -> f64 {
    let a = analytic_gradients(&f, p, inputs).unwrap();
    let n = numeric_gradients(&f, p, inputs, DEFAULT_EPS).unwrap();
    let names: Vec<&str> = p.iter().map(|q| q.name.as_str()).collect();
    let mut worst: f64 = 0.0;
    for i in 0..a.len() {
        if names.get(i).is_some_and(|n| n.ends_with(".k.b")) {
            assert!(a[i].data().iter().all(|g| g.abs() < 1e-12), "{}", names[i]);
            assert!(n[i].data().iter().all(|g| g.abs() < 1e-9), "{}", names[i]);
        } else {
            worst = worst.max(max_relative_error(&a[i..i + 1], &n[i..i + 1]));
        }
    }
    worst
}

#[test]
fn linear_layer() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let layer = Linear::new(&mut p, "lin", 4, 3, &mut rng);
        jitter(&mut p, &mut rng);
        let x = random(5, 4, &mut rng);
        let f = |t: &mut Tape, p: &ModelParams, x: &[Var]| -> Result<Var> {
            let y = layer.forward(t, p, x[0])?;
            project(t, y, seed)
        };
        let r = gradient_check(f, &p, &[x], DEFAULT_EPS).unwrap();
        assert!(r.passes(THRESHOLD), "seed {seed}: {r:?}");
    }
}

#[test]
fn lstm_cell_step() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let cell = LstmCell::new(&mut p, "cell", 3, 4, &mut rng);
        jitter(&mut p, &mut rng);
        let inputs = [random(2, 3, &mut rng), random(2, 4, &mut rng), random(2, 4, &mut rng)];
        let f = |t: &mut Tape, p: &ModelParams, x: &[Var]| -> Result<Var> {
            let (h, c) = cell.step(t, p, x[0], x[1], x[2])?;
            let both = t.concat_cols(&[h, c])?;
            project(t, both, seed)
        };
        let r = gradient_check(f, &p, &inputs, DEFAULT_EPS).unwrap();
        assert!(r.passes(THRESHOLD), "seed {seed}: {r:?}");
    }
}

#[test]
fn lstm_cell_unrolled() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let cell = LstmCell::new(&mut p, "cell", 2, 3, &mut rng);
        jitter(&mut p, &mut rng);
        let xs = random(4 * 2, 2, &mut rng);
        let f = |t: &mut Tape, p: &ModelParams, x: &[Var]| -> Result<Var> {
            let (all, _) = cell.run(t, p, x[0], 4, 2)?;
            project(t, all, seed)
        };
        let r = gradient_check(f, &p, &[xs], DEFAULT_EPS).unwrap();
        assert!(r.passes(THRESHOLD), "seed {seed}: {r:?}");
    }
}

#[test]
fn gcn_layer_on_bundled_graph() {
    let g = StationGraph::bundled_default();
    let adj = normalized_adjacency(&g);
    let n = adj.dim();
    let adj = Rc::new(Tensor::from_vec(n, n, adj.values).unwrap());
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let layer = GcnLayer::new(&mut p, "gcn", 3, 4, &mut rng);
        // two stacked hours
        let h = random(2 * n, 3, &mut rng);
        let f = |t: &mut Tape, p: &ModelParams, x: &[Var]| -> Result<Var> {
            let y = layer.forward(t, p, x[0], &adj)?;
            project(t, y, seed)
        };
        let r = gradient_check(f, &p, &[h], DEFAULT_EPS).unwrap();
        assert!(r.passes(THRESHOLD), "seed {seed}: {r:?}");
    }
}

#[test]
fn multi_head_attention_three_by_eight() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let mha = MultiHeadAttention::new(&mut p, "mha", 8, 2, &mut rng).unwrap();
        jitter(&mut p, &mut rng);
        let inputs = [random(3, 8, &mut rng), random(3, 8, &mut rng)];
        let f = |t: &mut Tape, p: &ModelParams, x: &[Var]| -> Result<Var> {
            let o = mha.forward(t, p, x[0], x[1], 1)?;
            project(t, o.out, seed)
        };
        let err = check_attention(f, &p, &inputs);
        assert!(err < THRESHOLD, "seed {seed}: {err:e}");
    }
}

#[test]
fn encoder_block() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let block = EncoderBlock::new(&mut p, "enc", 8, 2, 16, 0.0, &mut rng).unwrap();
        jitter(&mut p, &mut rng);
        let x = random(2 * 3, 8, &mut rng);
        let f = |t: &mut Tape, p: &ModelParams, x: &[Var]| -> Result<Var> {
            let y = block.forward(t, p, x[0], 2)?;
            project(t, y, seed)
        };
        let err = check_attention(f, &p, &[x]);
        assert!(err < ENCODER_THRESHOLD, "seed {seed}: {err:e}");
    }
}
