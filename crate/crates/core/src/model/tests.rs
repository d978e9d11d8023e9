use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::ParamKind;

fn tiny(dstm: bool) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::shallow(4),
        dstm: dstm.then(|| DstmConfig::single_layer(5, 3, 4)),
        input_size: 32,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
        init_seed: 7,
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Moves batch-norm affine terms and running statistics away from their
/// identity initialisation so inference mode exercises every parameter.
fn perturb(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        if model.params().kind(id) == ParamKind::Weight && name.ends_with(".weight") {
            continue;
        }
        let positive = name.ends_with("running_var") || name.ends_with("gamma");
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = if positive { rng.random_range(0.5..1.5) } else { rng.random_range(-0.5..0.5) };
        }
    }
}

fn model(dstm: bool) -> Model<f64> {
    let mut m = Model::new(tiny(dstm)).unwrap();
    perturb(&mut m, 99);
    m
}

fn rows(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let items: Vec<Tensor<f64>> = order
        .iter()
        .map(|&i| Tensor::new(t.shape()[1..].to_vec(), t.row(i).to_vec()).unwrap())
        .collect();
    Tensor::stack(&items.iter().collect::<Vec<_>>()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn preset_shapes_follow_the_published_table() {
    assert_eq!(ModelConfig::shallow_dstm().feature_shape().unwrap(), [64, 28, 28]);
    assert_eq!(ModelConfig::shallow_dstm().embedding_shape().unwrap(), [64, 14, 14]);
    assert_eq!(ModelConfig::baseline().embedding_shape().unwrap(), [64, 28, 28]);
    assert_eq!(ModelConfig::vgg_residual().feature_shape().unwrap(), [256, 14, 14]);
    assert_eq!(ModelConfig::resnet_residual().feature_shape().unwrap(), [256, 14, 14]);
    for c in [ModelConfig::shallow_dstm(), ModelConfig::vgg_residual(), ModelConfig::resnet_residual()] {
        c.validate().unwrap();
        let table = c.shape_table().unwrap();
        assert_eq!(table.last().unwrap().1, [64, 14, 14]);
    }
}

#[test]
fn forward_shapes_match_the_config() {
    // Traced at reduced width so the test stays fast; spatial sizes are the real ones.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mut config in [ModelConfig::shallow_dstm(), ModelConfig::vgg_residual(), ModelConfig::resnet_residual(), ModelConfig::baseline()] {
        config.backbone.channels = config.backbone.channels.iter().map(|c| c / 16).collect();
        if let Some(d) = config.dstm.as_mut() {
            d.hidden = 4;
            d.mask_channels = 3;
        }
        let m = Model::<f64>::new(config.clone()).unwrap();
        let q = random(&[1, 3, 112, 112], &mut rng);
        let s = random(&[2, 3, 112, 112], &mut rng);
        let feats = m.embed_backbone(&s).unwrap();
        let [c, h, w] = config.feature_shape().unwrap();
        assert_eq!(feats.shape(), [2, c, h, w], "{:?}", config.backbone.kind);
        let (qv, sv) = m.embed_episode(&q, &s).unwrap();
        let len = config.embedding_len().unwrap();
        assert_eq!(qv.len(), len);
        assert!(sv.iter().all(|v| v.len() == len));
        if m.has_dstm() {
            let h = m.equivariant_step(&feats).unwrap();
            assert_eq!(h.shape(), [2, 4, h.shape()[2], h.shape()[3]]);
            assert_eq!(m.invariant_pool(&h).unwrap().shape(), [1, 3, 14, 14]);
        }
    }
}

#[test]
fn invalid_configs_and_inputs_are_rejected() {
    let mut c = tiny(true);
    c.dstm.as_mut().unwrap().mask_size = 3;
    assert!(matches!(Model::<f32>::new(c), Err(Error::InvalidConfig(_))));
    let mut c = tiny(true);
    c.backbone.channels = vec![4, 8];
    assert!(c.validate().is_err());
    let mut c = tiny(false);
    c.input_size = 30;
    assert!(c.validate().is_err());
    assert!(ModelConfig::from_json(r#"{"backbone":{"kind":"shallow","channels":[4]},"dstm":null,"extra":1}"#).is_err());
    let parsed = ModelConfig::from_json(r#"{"backbone":{"kind":"shallow","channels":[64]},"dstm":{"block":"single_layer","hidden":64,"mask_channels":64,"mask_size":14}}"#).unwrap();
    assert_eq!(parsed, ModelConfig::shallow_dstm());

    let m = model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(matches!(m.embed_backbone(&random(&[1, 3, 31, 32], &mut rng)), Err(Error::Shape(_))));
    assert!(matches!(m.embed_backbone(&random(&[1, 1, 32, 32], &mut rng)), Err(Error::Shape(_))));
    let feats = m.embed_backbone(&random(&[1, 3, 32, 32], &mut rng)).unwrap();
    assert!(matches!(m.neighbor_union(&feats), Err(Error::InvalidArgument(_))));
    assert!(matches!(m.equivariant_step(&feats), Err(Error::InvalidArgument(_))));
    assert!(m.apply_mask(&random(&[1, 3, 2, 2], &mut rng), &feats).is_err());
    let base = model(false);
    assert!(matches!(base.neighbor_union(&feats), Err(Error::InvalidArgument(_))));
}

#[test]
fn backbone_is_deterministic_and_batch_order_preserving() {
    let m = model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imgs = random(&[3, 3, 32, 32], &mut rng);
    let a = m.embed_backbone(&imgs).unwrap();
    assert_eq!(a, m.embed_backbone(&imgs).unwrap());
    let single = m.embed_backbone(&rows(&imgs, &[2])).unwrap();
    assert!(close(single.data(), a.row(2), 1e-12));
}

#[test]
fn neighbor_union_is_the_mean_of_the_other_elements() {
    let m = model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feats = m.embed_backbone(&random(&[3, 3, 32, 32], &mut rng)).unwrap();
    // In a pair, each element's neighbourhood is exactly f_φ of the other one.
    let phi1 = m.neighbor_union(&rows(&feats, &[0, 1])).unwrap().row(0).to_vec();
    let phi2 = m.neighbor_union(&rows(&feats, &[0, 2])).unwrap().row(0).to_vec();
    let union = m.neighbor_union(&feats).unwrap();
    let expected: Vec<f64> = phi1.iter().zip(&phi2).map(|(a, b)| (a + b) / 2.0).collect();
    assert!(close(union.row(0), &expected, 1e-12));

    let swapped = m.neighbor_union(&rows(&feats, &[0, 2, 1])).unwrap();
    assert!(close(swapped.row(0), union.row(0), 1e-12));

    let same = rows(&feats, &[1, 1, 1]);
    let u = m.neighbor_union(&same).unwrap();
    assert!(close(u.row(0), &phi1, 1e-12));
}

#[test]
fn equivariant_step_permutes_with_the_support() {
    let m = model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feats = m.embed_backbone(&random(&[4, 3, 32, 32], &mut rng)).unwrap();
    let h = m.equivariant_step(&feats).unwrap();
    let order = [1, 0, 3, 2];
    let hp = m.equivariant_step(&rows(&feats, &order)).unwrap();
    for (i, &j) in order.iter().enumerate() {
        assert!(close(hp.row(i), h.row(j), 1e-9));
    }
    let same = m.equivariant_step(&rows(&feats, &[2, 2, 2])).unwrap();
    assert!(close(same.row(0), same.row(1), 0.0) && close(same.row(1), same.row(2), 0.0));
}

#[test]
fn invariant_pool_yields_a_normalised_permutation_invariant_mask() {
    let m = model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let feats = m.embed_backbone(&random(&[4, 3, 32, 32], &mut rng)).unwrap();
    let h = m.equivariant_step(&feats).unwrap();
    let mask = m.invariant_pool(&h).unwrap();
    let permuted = m.invariant_pool(&rows(&h, &[3, 1, 0, 2])).unwrap();
    assert!(mask.max_abs_diff(&permuted) < 1e-12);
    let [_, c, hh, ww] = mask.dims4().unwrap();
    for p in 0..hh * ww {
        let s: f64 = (0..c).map(|ch| mask.data()[ch * hh * ww + p]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(mask.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    let single = m.invariant_pool(&rows(&h, &[2])).unwrap();
    assert!(single.max_abs_diff(&mask) > 0.0);
}

#[test]
fn apply_mask_scales_the_reshaped_features() {
    let m = model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feats = m.embed_backbone(&random(&[2, 3, 32, 32], &mut rng)).unwrap();
    let uniform = Tensor::full(&[1, 3, 4, 4], 1.0 / 3.0);
    let masked = m.apply_mask(&uniform, &feats).unwrap();
    let r = m.reshape(&feats).unwrap();
    assert_eq!(masked.shape(), [2, 3, 4, 4]);
    let expected: Vec<f64> = r.data().iter().map(|v| v / 3.0).collect();
    assert!(close(masked.data(), &expected, 1e-12));
    let zeros = Tensor::zeros(feats.shape());
    assert!(m.apply_mask(&uniform, &zeros).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn episode_embeddings_follow_the_support_order() {
    let m = model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = random(&[3, 32, 32], &mut rng);
    let s = random(&[4, 3, 32, 32], &mut rng);
    let (qv, sv) = m.embed_episode(&q, &s).unwrap();
    assert_eq!(qv.len(), 3 * 4 * 4);
    let (qv2, sv2) = m.embed_episode(&q, &s).unwrap();
    assert_eq!((&qv, &sv), (&qv2, &sv2));
    let order = [2, 0, 3, 1];
    let (qp, sp) = m.embed_episode(&q, &rows(&s, &order)).unwrap();
    assert!(close(&qp, &qv, 1e-9));
    for (i, &j) in order.iter().enumerate() {
        assert!(close(&sp[i], &sv[j], 1e-9));
    }
    let other = random(&[4, 3, 32, 32], &mut rng);
    let (qo, _) = m.embed_episode(&q, &other).unwrap();
    assert!(!close(&qo, &qv, 0.0));
}

#[test]
fn baseline_embeds_flattened_backbone_features() {
    let m = model(false);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random(&[1, 3, 32, 32], &mut rng);
    let s = random(&[2, 3, 32, 32], &mut rng);
    let (qv, sv) = m.embed_episode(&q, &s).unwrap();
    assert!(close(&qv, m.embed_backbone(&q).unwrap().data(), 1e-12));
    assert!(close(&sv[1], m.embed_backbone(&s).unwrap().row(1), 1e-12));
}

#[test]
fn residual_dstm_builds_and_runs() {
    let mut c = tiny(true);
    c.dstm.as_mut().unwrap().block = DstmBlock::ResidualBlock;
    let m = Model::<f64>::new(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (qv, sv) = m.embed_episode(&random(&[3, 32, 32], &mut rng), &random(&[3, 3, 32, 32], &mut rng)).unwrap();
    assert_eq!(qv.len(), sv[0].len());
    assert!(m.params().find("dstm.f_theta.shortcut.conv.weight").is_some());
}
