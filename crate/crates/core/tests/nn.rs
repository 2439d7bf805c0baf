mod layers {
    use motionforge::nn::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn silu_at_zero() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let ln = LayerNorm::new(4);
        let (y, _) = ln.forward(&Array2::from_elem((2, 4), 3.5));
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ema_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut online = Linear::new(2, 2, &mut rng);
        online.set_flat(&[1.0; 6]);
        let mut target = online.zeros_like();
        ema_update(&online, &mut target, 1.0);
        assert_eq!(target.flat(), vec![0.0; 6]);
        ema_update(&online, &mut target, 0.5);
        ema_update(&online, &mut target, 0.5);
        assert_eq!(target.flat(), vec![0.75; 6]);
        ema_update(&online, &mut target, 0.0);
        assert_eq!(target.flat(), online.flat());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let s = MapShape {
            batch: 1,
            height: 5,
            width: 5,
            channels: 2,
        };
        let x = Array2::from_shape_fn((25, 2), |_| rng.random_range(-1.0..1.0));
        let (y, _) = conv.forward(&x, s);
        let o = conv.output_shape(s);
        assert_eq!((o.height, o.width), (3, 3));
        for oy in 0..3 {
            for ox in 0..3 {
                for oc in 0..3 {
                    let mut acc = conv.b[oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += conv.weight(oc, ic, ky, kx)
                                        * x[[(iy * 5 + ix) as usize, ic]];
                                }
                            }
                        }
                    }
                    assert!((y[[oy * 3 + ox, oc]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sgd_and_adam_descend_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let start = Linear::new(3, 1, &mut rng);
        let loss = |p: &Linear| p.flat().iter().map(|v| v * v).sum::<f64>();
        let grad = |p: &Linear| {
            let mut g = p.zeros_like();
            let v: Vec<f64> = p.flat().iter().map(|v| 2.0 * v).collect();
            g.set_flat(&v);
            g
        };
        let mut a = start.clone();
        let mut sgd = Sgd::new(0.05, 0.9);
        let mut b = start.clone();
        let mut adam = Adam::new(0.05);
        for _ in 0..200 {
            let g = grad(&a);
            sgd.step(&mut a, &g);
            let g = grad(&b);
            adam.step(&mut b, &g);
        }
        assert!(loss(&a) < 1e-3 * loss(&start));
        assert!(loss(&b) < 1e-2 * loss(&start));
    }
}

mod checkpoint {
    use motionforge::checkpoint::*;
    use motionforge::nn::ParamSet;
    use motionforge::nn::{Mlp, OutputActivation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(&[3, 8, 2], OutputActivation::Tanh, &mut rng);
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test"}));
        ck.push_params("mlp", &mlp);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);

        let mut restored = Mlp::new(&[3, 8, 2], OutputActivation::Tanh, &mut rng);
        back.load_params("mlp", &mut restored).unwrap();
        for (a, b) in mlp.flat().iter().zip(restored.flat()) {
            assert_eq!(*a as f32, b as f32);
        }
    }

    #[test]
    fn rejects_wrong_shapes_and_garbage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(&[3, 8, 2], OutputActivation::Identity, &mut rng);
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.push_params("mlp", &mlp);
        let mut other = Mlp::new(&[4, 8, 2], OutputActivation::Identity, &mut rng);
        assert!(matches!(
            ck.load_params("mlp", &mut other),
            Err(CheckpointError::ShapeMismatch(_))
        ));
        assert!(matches!(
            Checkpoint::read_from(&mut &b"NOPE...."[..]),
            Err(CheckpointError::BadMagic)
        ));
    }
}
