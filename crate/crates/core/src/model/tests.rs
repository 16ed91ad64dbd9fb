use super::*;
use crate::dataset::Window;
use crate::numerics::Tape;
use crate::preprocess::RunKind;
use crate::rng;
use rand::Rng as _;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 6,
        seq_len: 1,
        n_layers: 1,
        n_heads: 2,
        forward_expansion: 2,
        dropout_p: 0.0,
        mbm_hidden: 5,
        ln_eps: 1e-5,
    }
}

fn seq(width: usize, len: usize, f: impl Fn(usize) -> f32) -> FiveSeq {
    FiveSeq {
        subject_id: "01".into(),
        run_id: 0,
        run_kind: RunKind::Training,
        clip_index: 0,
        window: Window::First,
        genre_id: 0,
        start_timepoint: 0,
        width,
        images: (0..len * width)
            .map(|i| if i % width < TOKEN_DIMS { 0.0 } else { f(i) })
            .collect(),
        has_successor: true,
    }
}

fn random_input(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[]);
    Tensor::from_fn(&[batch * cfg.positions(), cfg.d_model], |_| r.gen_range(-1.0..1.0))
}

#[test]
fn default_param_count_matches_store() {
    for cfg in [ModelConfig::default(), tiny(), ModelConfig { n_layers: 4, ..Default::default() }] {
        let p = ModelParams::<f32>::zeroed(&cfg).unwrap();
        assert_eq!(p.store.num_elements(), cfg.param_count());
    }
    let d = 420;
    let layer = 4 * (d * d + d) + 4 * d + (d * 1680 + 1680) + (1680 * d + d);
    let heads = (d * 210 + 210 + 420 + 2) + (d * 840 + 840 + 840 * d + d) + (2 * d + 2);
    assert_eq!(ModelConfig::default().param_count(), 3 * layer + heads);
}

#[test]
fn block_shapes() {
    let p = ModelParams::<f32>::zeroed(&ModelConfig::default()).unwrap();
    let shape = |n: &str| p.store.value(p.store.find(n).unwrap()).shape().to_vec();
    assert_eq!(shape("block1.w1"), [420, 210]);
    assert_eq!(shape("block1.w2"), [210, 2]);
    assert_eq!(shape("block2.w1"), [420, 840]);
    assert_eq!(shape("block2.w2"), [840, 420]);
    assert_eq!(shape("block3.w"), [420, 2]);
    assert_eq!(p.block_ids(3).len(), 2);
    assert!(p.store.iter().all(|t| t.name.starts_with("layer") || t.name.starts_with("block")));
}

#[test]
fn config_validation() {
    for bad in [
        ModelConfig { n_heads: 8, ..Default::default() },
        ModelConfig { dropout_p: 1.0, ..Default::default() },
        ModelConfig { d_model: 3, n_heads: 1, ..Default::default() },
        ModelConfig { n_layers: 0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    for heads in [2, 3, 4, 5, 6, 7] {
        ModelConfig { n_heads: heads, ..Default::default() }.validate().unwrap();
    }
}

#[test]
fn tokens_are_orthogonal_one_hots() {
    let t: Vec<Vec<f64>> = [token::CLS, token::SEP, token::MSK]
        .iter()
        .map(|&k| token_vector(420, k))
        .collect();
    for i in 0..3 {
        assert_eq!(t[i].iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(t[i][TOKEN_DIMS..].iter().all(|&v| v == 0.0));
        for j in 0..i {
            let dot: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
            assert_eq!(dot, 0.0);
        }
    }
}

#[test]
fn input_layout() {
    let cfg = ModelConfig::default();
    let a = seq(420, 5, |i| i as f32 * 0.01);
    let b = seq(420, 5, |i| -(i as f32));
    let x: Tensor<f32> = assemble_input(&cfg, &a, &b).unwrap();
    assert_eq!(x.shape(), &[12, 420]);
    assert_eq!(x.row(0), token_vector::<f32>(420, token::CLS).as_slice());
    assert_eq!(x.row(6), token_vector::<f32>(420, token::SEP).as_slice());
    for i in 0..5 {
        assert_eq!(x.row(1 + i), a.image(i));
        assert_eq!(x.row(7 + i), b.image(i));
    }
    let z = seq(420, 5, |_| 0.0);
    let x: Tensor<f32> = assemble_input(&cfg, &z, &z).unwrap();
    for r in 0..12 {
        let nonzero = x.row(r).iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, r == 0 || r == 6);
    }
    let short = seq(420, 4, |_| 1.0);
    assert!(matches!(assemble_input::<f32>(&cfg, &short, &a), Err(Error::Shape(_))));
}

#[test]
fn positional_table_properties() {
    let pe = positional_table::<f64>(12, 420);
    for pos in 0..12 {
        assert!((pe.row(pos)[0] - (pos as f64).sin()).abs() < 1e-12);
        assert!((pe.row(pos)[1] - (pos as f64).cos()).abs() < 1e-12);
    }
    for i in 0..12 {
        for j in 0..i {
            assert!(pe.row(i).iter().zip(pe.row(j)).any(|(a, b)| (a - b).abs() > 1e-6));
        }
    }
    let cfg = ModelConfig::default();
    for seed in [1, 2] {
        let x = random_input(&cfg, 2, seed);
        let mut y = x.clone();
        positional_encode(&mut y, 12).unwrap();
        for (k, (a, b)) in y.data().iter().zip(x.data()).enumerate() {
            assert!((a - b - pe.data()[k % (12 * 420)]).abs() < 1e-12);
        }
    }
}

#[test]
fn eval_forward_is_pure() {
    let cfg = ModelConfig { n_layers: 1, ..Default::default() };
    let p = ModelParams::<f64>::init(&cfg, 4).unwrap();
    let x = random_input(&cfg, 2, 9);
    let a = encoder_forward(&p, x.clone(), 2, None).unwrap();
    let b = encoder_forward(&p, x, 2, None).unwrap();
    assert_eq!(a.shape(), &[24, 420]);
    assert_eq!(a, b);
}

#[test]
fn dropout_only_in_train_mode() {
    let cfg = ModelConfig { dropout_p: 0.5, ..tiny() };
    let p = ModelParams::<f64>::init(&cfg, 4).unwrap();
    let x = random_input(&cfg, 1, 9);
    let eval = encoder_forward(&p, x.clone(), 1, None).unwrap();
    let train = encoder_forward(&p, x, 1, Some(&mut rng::stream(1, &[]))).unwrap();
    assert!(eval.max_abs_diff(&train) > 1e-6);
}

#[test]
fn batched_forward_matches_single() {
    let cfg = tiny();
    let p = ModelParams::<f64>::init(&cfg, 2).unwrap();
    let x = random_input(&cfg, 3, 5);
    let all = encoder_forward(&p, x.clone(), 3, None).unwrap();
    let rows = cfg.positions() * cfg.d_model;
    for b in 0..3 {
        let one = Tensor::new(
            vec![cfg.positions(), cfg.d_model],
            x.data()[b * rows..(b + 1) * rows].to_vec(),
        )
        .unwrap();
        let y = encoder_forward(&p, one, 1, None).unwrap();
        assert_eq!(y.data(), &all.data()[b * rows..(b + 1) * rows]);
    }
}

/// Scalar-loop post-LN encoder layer.
fn naive_layer(p: &ModelParams<f64>, l: usize, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let get = |n: &str| p.store.value(p.store.find(&format!("layer{l}.{n}")).unwrap()).data().to_vec();
    let d = cfg.d_model;
    let affine = |x: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
        (0..out)
            .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[i * out + j]).sum::<f64>())
            .collect()
    };
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| g[i] * (v - mu) / (var + cfg.ln_eps).sqrt() + b[i])
            .collect()
    };
    let s = x.len();
    let q: Vec<_> = x.iter().map(|r| affine(r, &get("attn.wq"), &get("attn.bq"), d)).collect();
    let k: Vec<_> = x.iter().map(|r| affine(r, &get("attn.wk"), &get("attn.bk"), d)).collect();
    let v: Vec<_> = x.iter().map(|r| affine(r, &get("attn.wv"), &get("attn.bv"), d)).collect();
    let dh = d / cfg.n_heads;
    let mut att = vec![vec![0.0; d]; s];
    for h in 0..cfg.n_heads {
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..s {
                for c in 0..dh {
                    att[i][h * dh + c] += e[j] / z * v[j][h * dh + c];
                }
            }
        }
    }
    (0..s)
        .map(|i| {
            let o = affine(&att[i], &get("attn.wo"), &get("attn.bo"), d);
            let r1: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let h1 = ln(&r1, &get("ln1.gamma"), &get("ln1.beta"));
            let f = affine(&h1, &get("ff.w1"), &get("ff.b1"), cfg.ff_hidden());
            let f: Vec<f64> = f.into_iter().map(|v| v.max(0.0)).collect();
            let f = affine(&f, &get("ff.w2"), &get("ff.b2"), d);
            let r2: Vec<f64> = h1.iter().zip(&f).map(|(a, b)| a + b).collect();
            ln(&r2, &get("ln2.gamma"), &get("ln2.beta"))
        })
        .collect()
}

#[test]
fn tiny_encoder_matches_scalar_oracle() {
    let cfg = tiny();
    assert_eq!(cfg.positions(), 4);
    let mut p = ModelParams::<f64>::init(&cfg, 13).unwrap();
    // non-trivial layer-norm affines
    let mut r = rng::stream(2, &[]);
    for n in ["layer0.ln1.gamma", "layer0.ln1.beta", "layer0.ln2.gamma", "layer0.ln2.beta"] {
        let id = p.store.find(n).unwrap();
        for v in p.store.get_mut(id).value.data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    let x = random_input(&cfg, 1, 3);
    let rows: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).to_vec()).collect();
    let want = naive_layer(&p, 0, &rows);
    let got = encoder_forward(&p, x, 1, None).unwrap();
    for i in 0..4 {
        for j in 0..6 {
            assert!((got.row(i)[j] - want[i][j]).abs() < 1e-12);
        }
    }
    let two = ModelConfig { n_layers: 2, ..cfg };
    let p2 = ModelParams::<f64>::init(&two, 1).unwrap();
    let x = random_input(&two, 1, 8);
    let rows: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).to_vec()).collect();
    let want = naive_layer(&p2, 1, &naive_layer(&p2, 0, &rows));
    let got = encoder_forward(&p2, x, 1, None).unwrap();
    for i in 0..4 {
        for j in 0..6 {
            assert!((got.row(i)[j] - want[i][j]).abs() < 1e-12);
        }
    }
}

fn set(p: &mut ModelParams<f64>, name: &str, vals: &[f64]) {
    let id = p.store.find(name).unwrap();
    p.store.get_mut(id).value.data_mut().copy_from_slice(vals);
}

#[test]
fn zeroed_classifiers_are_uniform() {
    let p = ModelParams::<f64>::zeroed(&tiny()).unwrap();
    let x = Tensor::from_fn(&[3, 6], |i| i as f64 - 4.0);
    for probs in [output_block1(&p, &x).unwrap(), output_block3(&p, &x).unwrap()] {
        assert_eq!(probs.shape(), &[3, 2]);
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }
    assert!(output_block2(&p, &Tensor::zeros(&[1, 6])).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn random_classifiers_sum_to_one() {
    let p = ModelParams::<f64>::init(&ModelConfig::default(), 3).unwrap();
    let mut r = rng::stream(1, &[]);
    let x = Tensor::from_fn(&[4, 420], |_| r.gen_range(-2.0..2.0));
    for probs in [output_block1(&p, &x).unwrap(), output_block3(&p, &x).unwrap()] {
        for row in 0..4 {
            let s: f64 = probs.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn block1_scalar_oracle() {
    let mut p = ModelParams::<f64>::zeroed(&tiny()).unwrap();
    // 6 → 3 → 2
    let w1: Vec<f64> = (0..18).map(|i| (i as f64 - 9.0) * 0.1).collect();
    let b1 = [0.1, -0.2, 0.3];
    let w2 = [0.5, -0.5, 1.0, 0.25, -1.0, 0.0];
    let b2 = [0.05, -0.05];
    set(&mut p, "block1.w1", &w1);
    set(&mut p, "block1.b1", &b1);
    set(&mut p, "block1.w2", &w2);
    set(&mut p, "block1.b2", &b2);
    let x = [1.0, -1.0, 0.5, 2.0, 0.0, -0.5];
    let h: Vec<f64> = (0..3)
        .map(|j| b1[j] + (0..6).map(|i| x[i] * w1[i * 3 + j]).sum::<f64>())
        .collect();
    let z: Vec<f64> = (0..2)
        .map(|j| b2[j] + (0..3).map(|i| h[i] * w2[i * 2 + j]).sum::<f64>())
        .collect();
    let e1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
    let got = output_block1(&p, &Tensor::new(vec![1, 6], x.to_vec()).unwrap()).unwrap();
    assert!((got.data()[1] - e1).abs() < 1e-12);
    assert!((got.data()[0] - (1.0 - e1)).abs() < 1e-12);
}

#[test]
fn block2_scalar_oracle_and_relu() {
    let mut p = ModelParams::<f64>::zeroed(&tiny()).unwrap();
    // 6 → 5 → 6
    let w1: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect();
    let b1 = [-10.0, 0.1, 0.0, 0.2, -0.1];
    let w2: Vec<f64> = (0..30).map(|i| ((i * 3) % 7) as f64 * 0.2 - 0.6).collect();
    let b2 = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    set(&mut p, "block2.w1", &w1);
    set(&mut p, "block2.b1", &b1);
    set(&mut p, "block2.w2", &w2);
    set(&mut p, "block2.b2", &b2);
    let x = [0.3, -0.7, 1.1, 0.0, 0.4, -0.2];
    let h: Vec<f64> = (0..5)
        .map(|j| (b1[j] + (0..6).map(|i| x[i] * w1[i * 5 + j]).sum::<f64>()).max(0.0))
        .collect();
    assert_eq!(h[0], 0.0);
    let want: Vec<f64> = (0..6)
        .map(|j| b2[j] + (0..5).map(|i| h[i] * w2[i * 6 + j]).sum::<f64>())
        .collect();
    let got = output_block2(&p, &Tensor::new(vec![1, 6], x.to_vec()).unwrap()).unwrap();
    for j in 0..6 {
        assert!((got.data()[j] - want[j]).abs() < 1e-12);
    }
}

#[test]
fn block3_scalar_oracle() {
    let mut p = ModelParams::<f64>::zeroed(&tiny()).unwrap();
    let w: Vec<f64> = (0..12).map(|i| (i as f64 - 6.0) * 0.15).collect();
    let b = [0.2, -0.1];
    set(&mut p, "block3.w", &w);
    set(&mut p, "block3.b", &b);
    let x = [0.5, 0.5, -1.0, 2.0, 1.5, -0.3];
    let z: Vec<f64> = (0..2)
        .map(|j| b[j] + (0..6).map(|i| x[i] * w[i * 2 + j]).sum::<f64>())
        .collect();
    let e1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
    let got = output_block3(&p, &Tensor::new(vec![1, 6], x.to_vec()).unwrap()).unwrap();
    assert!((got.data()[1] - e1).abs() < 1e-12);
}

#[test]
fn init_respects_fan_in_bounds() {
    let cfg = ModelConfig::default();
    let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let check = |n: &str, fan: usize| {
        let v = p.store.value(p.store.find(n).unwrap());
        let bound = 1.0 / (fan as f32).sqrt();
        assert!(v.data().iter().all(|x| x.abs() <= bound));
        assert!(v.data().iter().any(|x| x.abs() > 0.5 * bound));
    };
    check("layer0.attn.wq", 420);
    check("layer2.ff.w2", 1680);
    check("block1.w2", 210);
    check("block2.w2", 840);
    check("block3.w", 420);
    let g = p.store.value(p.store.find("layer1.ln2.gamma").unwrap());
    assert!(g.data().iter().all(|&v| v == 1.0));
}

#[test]
fn sg_head_redraw_leaves_the_rest() {
    let cfg = tiny();
    let a = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let mut b = a.clone();
    b.reinit_sg_head(99);
    for id in a.store.ids() {
        let same = a.store.value(id) == b.store.value(id);
        assert_eq!(same, !a.store.get(id).name.starts_with("block3"));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig { n_layers: 1, ..Default::default() };
    let p = ModelParams::<f32>::init(&cfg, 7).unwrap();
    let meta = CheckpointMeta {
        regimen: "multitask".into(),
        fold: Some(3),
        epoch: Some(4),
        seed: 7,
        val_accuracy: Some(0.625),
    };
    let bytes = save_checkpoint(&p, &meta);
    assert_eq!(&bytes[..4], b"PSTX");
    let (q, m) = load_checkpoint(&bytes).unwrap();
    assert_eq!(m, meta);
    assert_eq!(q.config, cfg);
    for id in p.store.ids() {
        let (a, b) = (p.store.value(id), q.store.value(id));
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(save_checkpoint(&q, &m), bytes);
}

#[test]
fn checkpoint_rejects_mismatch_and_corruption() {
    let three = ModelConfig { d_model: 12, mbm_hidden: 24, ..Default::default() };
    let four = ModelConfig { n_layers: 4, ..three.clone() };
    let bytes = save_checkpoint(&ModelParams::init(&three, 1).unwrap(), &CheckpointMeta::default());
    assert!(matches!(ModelParams::load_matching(&bytes, &four), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(load_checkpoint(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(load_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    assert!(matches!(load_checkpoint(b"NOPE"), Err(Error::Checkpoint(_))));
    let lenient = ModelConfig { dropout_p: 0.0, ..three.clone() };
    assert_eq!(ModelParams::load_matching(&bytes, &lenient).unwrap().0.config, lenient);
}

#[test]
fn finetune_load_keeps_encoder_and_redraws_block3() {
    let cfg = ModelConfig { d_model: 12, mbm_hidden: 24, ..Default::default() };
    let pre = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let bytes = save_checkpoint(&pre, &CheckpointMeta::default());
    let ft = ModelParams::for_finetune(&bytes, &cfg, 50).unwrap();
    let fresh = ModelParams::<f32>::init(&cfg, 50).unwrap();
    for id in pre.store.ids() {
        let name = &pre.store.get(id).name;
        if name.starts_with("block3") {
            assert_eq!(ft.store.value(id), fresh.store.value(id));
            assert_ne!(ft.store.value(id), pre.store.value(id));
        } else {
            assert_eq!(ft.store.value(id), pre.store.value(id), "{name}");
        }
    }
}

#[test]
fn heads_on_a_tape_share_the_encoder() {
    let cfg = tiny();
    let p = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let x = random_input(&cfg, 2, 1);
    let mut tape = Tape::new();
    let h = p.encode(&mut tape, x.clone(), 2, None).unwrap();
    let cls = p.cls_rows(&mut tape, h, 2).unwrap();
    let probs = p.ntp_probs(&mut tape, cls).unwrap();
    let enc = encoder_forward(&p, x, 2, None).unwrap();
    let direct = output_block1(
        &p,
        &Tensor::from_rows(&[enc.row(0).to_vec(), enc.row(4).to_vec()]).unwrap(),
    )
    .unwrap();
    assert_eq!(tape.value(probs), &direct);
}
