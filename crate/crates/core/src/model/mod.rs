//! SVDF encoder/decoder keyword model in batch (tape) and streaming form.

mod checkpoint;
mod config;
mod forward;
mod params;
mod streaming;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Activation, LayerConfig, ModelConfig, SvdfLayerConfig};
pub use forward::{batch_forward, forward_on_tape, input_tensor, load_params, HeadOutputs};
pub use params::{DenseParams, Head, HeadParams, LayerParams, ModelParams};
pub use streaming::{full_forward_streaming, step_frame, svdf_step, StreamingState, SvdfBuffer};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FeatureSequence;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sequence(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureSequence {
        let v = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureSequence::new(frames, dim, v).unwrap()
    }

    fn small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
        let svdf = |rng: &mut ChaCha8Rng| {
            LayerConfig::Svdf(SvdfLayerConfig::new(
                rng.random_range(1..6),
                rng.random_range(1..6),
                rng.random_range(1..3),
            ))
        };
        ModelConfig {
            input_dim: rng.random_range(1..6),
            encoder: vec![svdf(rng), LayerConfig::Bottleneck { dim: 3 }, svdf(rng)],
            encoder_outputs: rng.random_range(2..5),
            decoder: vec![svdf(rng)],
            decoder_outputs: 2,
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_weights_give_activation_of_bias() {
        let layer = SvdfLayerConfig::new(3, 4, 2);
        let mut buf = SvdfBuffer::new(4, 6);
        let feature = Tensor::zeros(&[5, 6]);
        let time = Tensor::zeros(&[6, 4]);
        let bias = Tensor::vector(vec![0.5, -0.5, 2.0]);
        let out = svdf_step(&layer, &feature, &time, &bias, &mut buf, &[1.0; 5]).unwrap();
        assert_eq!(out, vec![0.5, 0.0, 2.0]);
    }

    #[test]
    fn memory_one_rank_one_is_dense() {
        let layer = SvdfLayerConfig::new(2, 1, 1);
        let mut buf = SvdfBuffer::new(1, 2);
        let feature = Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
        let time = Tensor::from_rows(&[vec![3.0], vec![-2.0]]).unwrap();
        let bias = Tensor::vector(vec![0.1, 0.2]);
        let x = [0.5, 1.0];
        let out = svdf_step(&layer, &feature, &time, &bias, &mut buf, &x).unwrap();
        // w_feat·x = [2.5, 0.0]
        let expect = [(3.0f64 * 2.5 + 0.1).max(0.0), (-2.0f64 * 0.0 + 0.2).max(0.0)];
        assert!((out[0] - expect[0]).abs() < 1e-15 && (out[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_wrong_frame_size() {
        let layer = SvdfLayerConfig::new(2, 3, 1);
        let mut buf = SvdfBuffer::new(3, 2);
        let r = svdf_step(
            &layer,
            &Tensor::zeros(&[4, 2]),
            &Tensor::zeros(&[2, 3]),
            &Tensor::zeros(&[2]),
            &mut buf,
            &[0.0; 3],
        );
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn streaming_matches_batch_with_arbitrary_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let cfg = small_config(&mut rng);
            let params = ModelParams::init_uniform(&cfg, 0.8, rng.random()).unwrap();
            let frames = rng.random_range(1..40);
            let x = random_sequence(&mut rng, frames, cfg.input_dim);
            let (be, bd) = batch_forward(&params, &x).unwrap();

            let split = rng.random_range(0..=frames);
            let (a, b) = x.values().split_at(split * cfg.input_dim);
            let xa = FeatureSequence::new(split, cfg.input_dim, a.to_vec()).unwrap();
            let xb = FeatureSequence::new(frames - split, cfg.input_dim, b.to_vec()).unwrap();
            let mut state = StreamingState::new(&cfg);
            let (e1, d1) = full_forward_streaming(&xa, &params, &mut state).unwrap();
            let (e2, d2) = full_forward_streaming(&xb, &params, &mut state).unwrap();
            let cat = |p: Tensor, q: Tensor, cols: usize| {
                let mut v = p.into_data();
                v.extend(q.into_data());
                Tensor::new(vec![frames, cols], v).unwrap()
            };
            assert!(max_abs_diff(&be, &cat(e1, e2, cfg.encoder_outputs)) < 1e-9);
            assert!(max_abs_diff(&bd, &cat(d1, d2, 2)) < 1e-9);
        }
    }

    #[test]
    fn zero_length_input_leaves_state_alone() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init_uniform(&cfg, 0.05, 1).unwrap();
        let mut state = StreamingState::new(&cfg);
        let before = state.clone();
        let x = FeatureSequence::new(0, cfg.input_dim, vec![]).unwrap();
        let (e, d) = full_forward_streaming(&x, &params, &mut state).unwrap();
        assert!(e.is_empty() && d.is_empty());
        assert_eq!(state, before);
    }

    #[test]
    fn constant_input_reaches_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig::default();
        let params = ModelParams::init_uniform(&cfg, 0.3, 2).unwrap();
        let frame: Vec<f64> = (0..cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let settle = cfg.receptive_lookback() + 1;
        let mut state = StreamingState::new(&cfg);
        let mut outputs = Vec::new();
        for _ in 0..settle + 5 {
            outputs.push(step_frame(&params, &mut state, &frame).unwrap());
        }
        // every buffer is saturated once all layers' histories are full
        for o in &outputs[settle..] {
            assert_eq!(o, &outputs[settle - 1]);
        }
        assert_ne!(outputs[0], outputs[settle - 1]);
    }

    #[test]
    fn posteriors_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig::default();
        let params = ModelParams::init_uniform(&cfg, 0.05, 4).unwrap();
        let x = random_sequence(&mut rng, 30, cfg.input_dim);
        let (e, d) = batch_forward(&params, &x).unwrap();
        assert_eq!(e.rows(), 30);
        assert_eq!(d.shape(), &[30, 2]);
        for r in 0..30 {
            assert!((e.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((d.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_model_is_near_uniform_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ModelConfig::default();
        let params = ModelParams::init_uniform(&cfg, 0.05, 6).unwrap();
        let x = random_sequence(&mut rng, 2000, cfg.input_dim);
        let (e, d) = batch_forward(&params, &x).unwrap();
        for (t, k) in [(&e, cfg.encoder_outputs), (&d, 2)] {
            for c in 0..k {
                let mean = (0..t.rows()).map(|r| t.at(r, c)).sum::<f64>() / t.rows() as f64;
                assert!((mean - 1.0 / k as f64).abs() < 0.1, "col {c} mean {mean}");
            }
        }
    }

    #[test]
    fn batch_input_dim_checked() {
        let cfg = ModelConfig::default();
        let params = ModelParams::zeros(&cfg).unwrap();
        let x = FeatureSequence::new(3, 7, vec![0.0; 21]).unwrap();
        assert!(batch_forward(&params, &x).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let cfg = ModelConfig::default();
        let ck = Checkpoint {
            frontend: crate::frontend::FrontendConfig::default(),
            params: ModelParams::init_uniform(&cfg, 0.05, 3).unwrap(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SMPW");
        assert_eq!(Checkpoint::read_from(&bytes[..]).unwrap(), ck);

        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::read_from(cut) {
            Err(crate::Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&bad[..]), Err(crate::Error::Format { offset: 0, .. })));
    }
}
