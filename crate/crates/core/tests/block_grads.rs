//! Finite-difference gradient checks for the composite attention blocks.
//!
//! Each check rebuilds the block from scratch per evaluation point so the
//! numeric gradient uses forward passes only, then compares against one
//! analytic backward pass. Parameter initialization and inputs are seeded,
//! so failures reproduce exactly.

use cauesc_core::attention::{
    attend, cause_attention, fuse, AttentionParams, CrossAttBlock, DecoderLayer, Diagnostics,
    EncoderLayer, FusionGate, ParamBuilder,
};
use cauesc_core::gradcheck::{fd_gradient, max_rel_err};
use cauesc_core::tensor::{randn_vec, Graph, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BLOCK_TOL: f64 = 1e-4;
const SEEDS: u64 = 20;
/// Larger than the kernel-suite step: composite blocks stack enough ops
/// that f64 roundoff (which shrinks with a larger step) dominates the
/// truncation error (which grows with it) at 1e-5.
const BLOCK_STEP: f64 = 1e-4;

fn spread_loss(g: &mut Graph<f64>, x: TensorId, seed: u64) -> TensorId {
    let (r, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.leaf(r, c, randn_vec(r * c, 1.0, &mut rng)).unwrap();
    let prod = g.mul(x, w).unwrap();
    g.sum_all(prod)
}

/// `build` constructs the block and inputs for a seed, optionally forcing
/// all checked tensors to the given buffers before any forward op runs,
/// and returns (checked tensor ids, scalar loss id).
fn check_block(
    name: &str,
    build: &dyn Fn(&mut Graph<f64>, u64, Option<&[Vec<f64>]>) -> (Vec<TensorId>, TensorId),
) {
    for seed in 0..SEEDS {
        let mut g = Graph::new();
        let (ids, loss) = build(&mut g, seed, None);
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| g.grad(*id).expect("checked tensors must be params").to_vec())
            .collect();
        let bufs: Vec<Vec<f64>> = ids.iter().map(|id| g.data(*id).to_vec()).collect();

        let mut f = |point: &[Vec<f64>]| {
            let mut g2 = Graph::new();
            let (_, l) = build(&mut g2, seed, Some(point));
            g2.item(l).unwrap()
        };
        let numeric = fd_gradient(&mut f, &bufs, BLOCK_STEP);
        let err = max_rel_err(&analytic, &numeric);
        assert!(
            err < BLOCK_TOL,
            "{name} seed {seed}: max relative error {err} exceeds {BLOCK_TOL}"
        );
    }
}

fn override_all(g: &mut Graph<f64>, ids: &[TensorId], point: Option<&[Vec<f64>]>) {
    if let Some(bufs) = point {
        for (id, buf) in ids.iter().zip(bufs) {
            g.set_data(*id, buf.clone()).unwrap();
        }
    }
}

#[test]
fn self_attention_block_gradients() {
    check_block("self_attention", &|g, seed, point| {
        let (p, mut ids) = {
            let mut pb = ParamBuilder::new(g, 100 + seed, 0.3);
            let p = AttentionParams::new(&mut pb, "a", 8, 2).unwrap();
            let ids: Vec<TensorId> = pb.into_names().into_iter().map(|(_, id)| id).collect();
            (p, ids)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = g.param(4, 8, randn_vec(32, 0.8, &mut rng)).unwrap();
        ids.push(h);
        override_all(g, &ids, point);
        let out = attend(g, &p, h, h, None, false).unwrap();
        let loss = spread_loss(g, out, seed);
        (ids, loss)
    });
}

#[test]
fn causal_self_attention_gradients() {
    check_block("causal_self_attention", &|g, seed, point| {
        let (p, mut ids) = {
            let mut pb = ParamBuilder::new(g, 200 + seed, 0.3);
            let p = AttentionParams::new(&mut pb, "a", 8, 4).unwrap();
            let ids: Vec<TensorId> = pb.into_names().into_iter().map(|(_, id)| id).collect();
            (p, ids)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = g.param(5, 8, randn_vec(40, 0.8, &mut rng)).unwrap();
        ids.push(h);
        override_all(g, &ids, point);
        let out = attend(g, &p, h, h, None, true).unwrap();
        let loss = spread_loss(g, out, seed);
        (ids, loss)
    });
}

#[test]
fn cause_attention_gradients_under_a_partial_mask() {
    check_block("cause_attention", &|g, seed, point| {
        let (p, mut ids) = {
            let mut pb = ParamBuilder::new(g, 300 + seed, 0.3);
            let p = AttentionParams::new(&mut pb, "a", 8, 2).unwrap();
            let ids: Vec<TensorId> = pb.into_names().into_iter().map(|(_, id)| id).collect();
            (p, ids)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = g.param(5, 8, randn_vec(40, 0.8, &mut rng)).unwrap();
        ids.push(h);
        override_all(g, &ids, point);
        let diag = Diagnostics::new();
        let mask = [true, false, true, true, false];
        let out = cause_attention(g, &p, h, &mask, None, &diag).unwrap();
        let loss = spread_loss(g, out, seed);
        (ids, loss)
    });
}

#[test]
fn cross_attention_block_gradients() {
    check_block("cross_att_block", &|g, seed, point| {
        let (block, mut ids) = {
            let mut pb = ParamBuilder::new(g, 400 + seed, 0.3);
            let block = CrossAttBlock::new(&mut pb, "c", 8, 2).unwrap();
            let ids: Vec<TensorId> = pb.into_names().into_iter().map(|(_, id)| id).collect();
            (block, ids)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = g.param(3, 8, randn_vec(24, 0.8, &mut rng)).unwrap();
        let mem = g.param(4, 8, randn_vec(32, 0.8, &mut rng)).unwrap();
        ids.push(q);
        ids.push(mem);
        override_all(g, &ids, point);
        let diag = Diagnostics::new();
        let out = block.apply(g, q, Some(mem), None, &diag).unwrap();
        let loss = spread_loss(g, out, seed);
        (ids, loss)
    });
}

#[test]
fn fusion_gate_gradients() {
    check_block("fusion_gate", &|g, seed, point| {
        let (gate, mut ids) = {
            let mut pb = ParamBuilder::new(g, 500 + seed, 0.3);
            let gate = FusionGate::new(&mut pb, "f", 6).unwrap();
            let ids: Vec<TensorId> = pb.into_names().into_iter().map(|(_, id)| id).collect();
            (gate, ids)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_c = g.param(3, 6, randn_vec(18, 0.8, &mut rng)).unwrap();
        let a_s = g.param(3, 6, randn_vec(18, 0.8, &mut rng)).unwrap();
        ids.push(a_c);
        ids.push(a_s);
        override_all(g, &ids, point);
        let out = fuse(g, &gate, a_c, a_s).unwrap();
        let loss = spread_loss(g, out, seed);
        (ids, loss)
    });
}

#[test]
fn encoder_layer_gradients_with_a_cause_mask() {
    check_block("encoder_layer", &|g, seed, point| {
        let (layer, mut ids) = {
            let mut pb = ParamBuilder::new(g, 600 + seed, 0.3);
            let layer = EncoderLayer::new(&mut pb, "e", 8, 2, 16).unwrap();
            let ids: Vec<TensorId> = pb.into_names().into_iter().map(|(_, id)| id).collect();
            (layer, ids)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = g.param(4, 8, randn_vec(32, 0.8, &mut rng)).unwrap();
        ids.push(h);
        override_all(g, &ids, point);
        let diag = Diagnostics::new();
        let mask = [true, false, true, true];
        let out = layer.forward(g, h, Some(&mask), None, &diag).unwrap();
        let loss = spread_loss(g, out, seed);
        (ids, loss)
    });
}

#[test]
fn decoder_layer_gradients() {
    check_block("decoder_layer", &|g, seed, point| {
        let (layer, mut ids) = {
            let mut pb = ParamBuilder::new(g, 700 + seed, 0.3);
            let layer = DecoderLayer::new(&mut pb, "d", 8, 2, 16).unwrap();
            let ids: Vec<TensorId> = pb.into_names().into_iter().map(|(_, id)| id).collect();
            (layer, ids)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = g.param(3, 8, randn_vec(24, 0.8, &mut rng)).unwrap();
        let mem = g.param(5, 8, randn_vec(40, 0.8, &mut rng)).unwrap();
        ids.push(o);
        ids.push(mem);
        override_all(g, &ids, point);
        let diag = Diagnostics::new();
        let out = layer.forward(g, o, Some(mem), None, &diag).unwrap();
        let loss = spread_loss(g, out, seed);
        (ids, loss)
    });
}
