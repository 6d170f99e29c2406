use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

pub(crate) fn toy_config(depth: usize, heads: usize, dim: usize) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        dim,
        depth,
        heads,
        mlp_ratio: 2.0,
        eps: 1e-6,
        num_classes: 5,
        in_chans: 3,
        final_norm: true,
    }
}

fn random_image(cfg: &ViTConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.in_chans * cfg.image_size * cfg.image_size;
    Tensor::new(
        vec![cfg.in_chans, cfg.image_size, cfg.image_size],
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn zero_tensor_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.shape())
}

#[test]
fn patch_embed_zero_image() {
    let cfg = toy_config(1, 2, 8);
    let mut w = WeightSet::random(&cfg, 1).unwrap();
    w.patch_bias = zero_tensor_like(&w.patch_bias);
    w.pos_embed = zero_tensor_like(&w.pos_embed);
    let img = Tensor::zeros(&[3, 8, 8]);
    let tokens = patch_embed(&img, &w, &cfg).unwrap();
    assert_eq!(tokens.shape(), &[5, 8]);
    assert_eq!(tokens.row(0), w.cls_token.data());
    assert!(tokens.data()[8..].iter().all(|&v| v == 0.0));
}

#[test]
fn patch_embed_224_has_197_tokens() {
    let cfg = ViTConfig {
        image_size: 224,
        patch_size: 16,
        dim: 6,
        depth: 1,
        heads: 2,
        mlp_ratio: 1.0,
        eps: 1e-6,
        num_classes: 0,
        in_chans: 3,
        final_norm: true,
    };
    let w = WeightSet::random(&cfg, 2).unwrap();
    let tokens = patch_embed(&Tensor::zeros(&[3, 224, 224]), &w, &cfg).unwrap();
    assert_eq!(tokens.shape(), &[197, 6]);
}

#[test]
fn patch_embed_delta_pixel_selects_kernel_entry() {
    let cfg = toy_config(1, 2, 8);
    let w = WeightSet::random(&cfg, 3).unwrap();
    // Patch (row 1, col 0) is patch index 2; pixel (ch 1, y 5, x 2) sits at
    // offset (1, 1, 2) inside it.
    let mut img = Tensor::zeros(&[3, 8, 8]);
    img.data_mut()[64 + 5 * 8 + 2] = 1.0;
    let tokens = patch_embed(&img, &w, &cfg).unwrap();
    let k = w.patch_weight.data();
    for d in 0..8 {
        let expected = k[d * 48 + 16 + 4 + 2] + w.patch_bias.data()[d] + w.pos_embed.at2(3, d);
        assert!((tokens.at2(3, d) - expected).abs() < 1e-15);
    }
    assert!(patch_embed(&Tensor::zeros(&[3, 4, 4]), &w, &cfg).is_err());
}

#[test]
fn zero_qkv_gives_uniform_class_attention() {
    let cfg = toy_config(1, 2, 8);
    let mut w = WeightSet::random(&cfg, 4).unwrap();
    w.blocks[0].qkv.weight = zero_tensor_like(&w.blocks[0].qkv.weight);
    w.blocks[0].qkv.bias = zero_tensor_like(&w.blocks[0].qkv.bias);
    let m = patch_embed(&random_image(&cfg, 1), &w, &cfg).unwrap();
    let att = mhsa_forward(&m, &w.blocks[0], &cfg).unwrap();
    assert!(att.class_attention.data().iter().all(|&a| (a - 0.2).abs() < 1e-15));
}

#[test]
fn zero_projection_is_residual_identity() {
    let cfg = toy_config(1, 2, 8);
    let mut w = WeightSet::random(&cfg, 5).unwrap();
    w.blocks[0].proj.weight = zero_tensor_like(&w.blocks[0].proj.weight);
    w.blocks[0].proj.bias = zero_tensor_like(&w.blocks[0].proj.bias);
    let m = patch_embed(&random_image(&cfg, 2), &w, &cfg).unwrap();
    assert_eq!(mhsa_forward(&m, &w.blocks[0], &cfg).unwrap().out, m);
}

#[test]
fn zero_second_ffn_layer_passes_attention_output() {
    let cfg = toy_config(1, 2, 8);
    let mut w = WeightSet::random(&cfg, 6).unwrap();
    w.blocks[0].fc2.weight = zero_tensor_like(&w.blocks[0].fc2.weight);
    w.blocks[0].fc2.bias = zero_tensor_like(&w.blocks[0].fc2.bias);
    let m = patch_embed(&random_image(&cfg, 3), &w, &cfg).unwrap();
    let att = mhsa_forward(&m, &w.blocks[0], &cfg).unwrap();
    let (next, _) = block_forward(&m, &w.blocks[0], &cfg).unwrap();
    assert_eq!(next, att.out);
}

#[test]
fn all_zero_block_is_identity() {
    let cfg = toy_config(1, 2, 8);
    let mut w = WeightSet::random(&cfg, 7).unwrap();
    let b = &mut w.blocks[0];
    for t in [
        &mut b.ln1.gamma,
        &mut b.ln1.beta,
        &mut b.qkv.weight,
        &mut b.qkv.bias,
        &mut b.proj.weight,
        &mut b.proj.bias,
        &mut b.ln2.gamma,
        &mut b.ln2.beta,
        &mut b.fc1.weight,
        &mut b.fc1.bias,
        &mut b.fc2.weight,
        &mut b.fc2.bias,
    ] {
        *t = zero_tensor_like(t);
    }
    let m = patch_embed(&random_image(&cfg, 4), &w, &cfg).unwrap();
    let (next, _) = block_forward(&m, &w.blocks[0], &cfg).unwrap();
    assert_eq!(next, m);
}

#[test]
fn trace_shapes_and_softmax_rows() {
    let cfg = toy_config(1, 2, 8);
    let model = VisionTransformer::random(cfg.clone(), 8).unwrap();
    let trace = model.forward(&random_image(&cfg, 5)).unwrap();
    assert_eq!(trace.depth(), 1);
    assert_eq!(trace.logits.as_ref().unwrap().numel(), 5);
    let bt = trace.block(1).unwrap();
    assert_eq!(bt.class_attention.shape(), &[2, 5]);
    assert_eq!(bt.values.shape(), &[2, 5, 4]);
    for h in 0..2 {
        assert!((bt.class_attention.row(h).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(matches!(trace.block(2), Err(Error::BlockOutOfRange { .. })));
}

#[test]
fn concatenated_head_outputs_equal_t() {
    let cfg = toy_config(3, 4, 16);
    let model = VisionTransformer::random(cfg.clone(), 9).unwrap();
    let trace = model.forward(&random_image(&cfg, 6)).unwrap();
    let (hd, tokens) = (cfg.head_dim(), cfg.num_tokens());
    for bt in &trace.blocks {
        for h in 0..cfg.heads {
            for j in 0..hd {
                let mut s = 0.0;
                for n in 0..tokens {
                    s += bt.class_attention.at2(h, n) * bt.values.data()[(h * tokens + n) * hd + j];
                }
                assert!((s - bt.t.data()[h * hd + j]).abs() < 1e-9);
            }
        }
        assert_eq!(bt.class_token_out.numel(), cfg.dim);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = toy_config(2, 2, 8);
    let model = VisionTransformer::random(cfg.clone(), 10).unwrap();
    let img = random_image(&cfg, 7);
    let a = model.forward(&img).unwrap();
    let b = model.forward(&img).unwrap();
    assert_eq!(a.class_token, b.class_token);
    for (x, y) in a.blocks.iter().zip(&b.blocks) {
        assert_eq!(x.class_attention, y.class_attention);
        assert_eq!(x.values, y.values);
        assert_eq!(x.t, y.t);
    }
}

/// Single block, FFN off, projection `I`, no final norm: `x_B = T_B + x_{B-1}`.
#[test]
fn identity_fixture_has_identity_jacobian() {
    let mut cfg = toy_config(1, 2, 8);
    cfg.final_norm = false;
    let mut w = WeightSet::random(&cfg, 11).unwrap();
    w.blocks[0].fc2.weight = zero_tensor_like(&w.blocks[0].fc2.weight);
    w.blocks[0].fc2.bias = zero_tensor_like(&w.blocks[0].fc2.bias);
    w.blocks[0].proj.weight = Tensor::eye(8);
    let model = VisionTransformer::new(cfg.clone(), w).unwrap();
    let trace = model.forward(&random_image(&cfg, 8)).unwrap();
    for mode in [JacobianMode::Full, JacobianMode::ResidualPath] {
        let j = model.jacobian(&trace, 1, mode).unwrap();
        assert!(j.max_abs_diff(&Tensor::eye(8)) < 1e-14);
    }
}

fn fd_check(model: &VisionTransformer, img: &Tensor, mode: JacobianMode, seed: u64) {
    let cfg = model.config();
    let trace = model.forward(img).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    for b in 1..=cfg.depth {
        let jac = model.jacobian(&trace, b, mode).unwrap();
        for _ in 0..3 {
            let dir: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let plus: Vec<f64> = dir.iter().map(|v| v * eps).collect();
            let minus: Vec<f64> = dir.iter().map(|v| -v * eps).collect();
            let fp = model.perturbed_class_token(img, &trace, b, &plus, mode).unwrap();
            let fm = model.perturbed_class_token(img, &trace, b, &minus, mode).unwrap();
            let fd: Vec<f64> = fp.data().iter().zip(fm.data()).map(|(a, c)| (a - c) / (2.0 * eps)).collect();
            let an: Vec<f64> = (0..cfg.dim)
                .map(|i| crate::numerics::dot(jac.row(i), &dir))
                .collect();
            let num: f64 = fd.iter().zip(&an).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            let den: f64 = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den < 1e-4, "block {b} mode {mode:?}: rel err {}", num / den);
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let cfg = toy_config(3, 2, 8);
    let model = VisionTransformer::random(cfg.clone(), 12).unwrap();
    let img = random_image(&cfg, 9);
    fd_check(&model, &img, JacobianMode::Full, 1);
    fd_check(&model, &img, JacobianMode::ResidualPath, 2);
}

#[test]
fn residual_path_equals_full_on_depth_one() {
    let cfg = toy_config(1, 2, 8);
    let model = VisionTransformer::random(cfg.clone(), 13).unwrap();
    let trace = model.forward(&random_image(&cfg, 10)).unwrap();
    let full = model.jacobian(&trace, 1, JacobianMode::Full).unwrap();
    let res = model.jacobian(&trace, 1, JacobianMode::ResidualPath).unwrap();
    assert!(full.max_abs_diff(&res) < 1e-13);
}

#[test]
fn residual_path_differs_from_full_on_deeper_models() {
    let cfg = toy_config(2, 2, 8);
    let model = VisionTransformer::random(cfg.clone(), 14).unwrap();
    let trace = model.forward(&random_image(&cfg, 11)).unwrap();
    let full = model.jacobian(&trace, 1, JacobianMode::Full).unwrap();
    let res = model.jacobian(&trace, 1, JacobianMode::ResidualPath).unwrap();
    assert!(full.max_abs_diff(&res) > 1e-6);
}

#[test]
fn zero_projection_cuts_block_sensitivity() {
    let cfg = toy_config(2, 2, 8);
    let mut w = WeightSet::random(&cfg, 15).unwrap();
    w.blocks[0].proj.weight = zero_tensor_like(&w.blocks[0].proj.weight);
    let model = VisionTransformer::new(cfg.clone(), w).unwrap();
    let img = random_image(&cfg, 12);
    let trace = model.forward(&img).unwrap();
    let j1 = model.jacobian(&trace, 1, JacobianMode::Full).unwrap();
    assert!(j1.data().iter().all(|&v| v == 0.0));
    let delta = vec![1e-3; 8];
    let moved = model
        .perturbed_class_token(&img, &trace, 1, &delta, JacobianMode::Full)
        .unwrap();
    assert!(moved.max_abs_diff(&trace.class_token) < 1e-15);
    // Block 2 still carries the ordinary path.
    let j2 = model.jacobian(&trace, 2, JacobianMode::Full).unwrap();
    assert!(j2.data().iter().any(|&v| v.abs() > 1e-3));
    fd_check(&model, &img, JacobianMode::Full, 3);
}

#[test]
fn jacobian_rejects_bad_block() {
    let cfg = toy_config(2, 2, 8);
    let model = VisionTransformer::random(cfg.clone(), 16).unwrap();
    let trace = model.forward(&random_image(&cfg, 13)).unwrap();
    assert!(model.jacobian(&trace, 0, JacobianMode::Full).is_err());
    assert!(model.jacobian(&trace, 3, JacobianMode::Full).is_err());
}

#[test]
fn mode_parses() {
    assert_eq!("full".parse::<JacobianMode>().unwrap(), JacobianMode::Full);
    assert_eq!("residual".parse::<JacobianMode>().unwrap(), JacobianMode::ResidualPath);
    assert!("other".parse::<JacobianMode>().is_err());
}
