//! Encoder invariances, decoder contracts, checkpoint round trips and size
//! budgets for the two stream models.

mod common;

use resplat_autodiff::{Tape, Tensor};
use resplat_data::tensorize;
use resplat_model::{CheckpointMeta, ModelConfig, ParamStore, Stream, StreamVae};

fn tiny_model(stream: Stream, seed: u64) -> StreamVae {
    StreamVae::new(stream, ModelConfig::tiny(), seed).expect("tiny config is valid")
}

/// Posterior mean and log-variance rows for a batch, via a fresh tape.
fn encode_rows(model: &StreamVae, batch: &resplat_data::LineageBatch) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::inference();
    let bound = model.params.bind(&mut tape);
    let (mu, logvar) = model.encode(&mut tape, &bound, batch).expect("visible rows");
    (tape.value(mu).data().to_vec(), tape.value(logvar).data().to_vec())
}

#[test]
fn identical_sequences_yield_identical_latents() {
    for stream in [Stream::Geometry, Stream::Appearance] {
        let model = tiny_model(stream, 11);
        // Same features, different ids; ids are not part of the features.
        let mut a = common::varied_lineage(3, 4);
        a.id = 90;
        let b = common::varied_lineage(3, 4);
        let batch = tensorize(&[a, b], 4, &[1.0, 1.0]).expect("valid batch");
        let (mu, logvar) = encode_rows(&model, &batch);
        let latent = mu.len() / 2;
        assert_eq!(
            mu[..latent].to_vec(),
            mu[latent..].to_vec(),
            "identical inputs must encode to bitwise-identical means ({stream:?})",
            stream = stream
        );
        assert_eq!(
            logvar[..latent].to_vec(),
            logvar[latent..].to_vec(),
            "identical inputs must encode to bitwise-identical variances"
        );
    }
}

#[test]
fn permuting_the_batch_permutes_the_latents() {
    let model = tiny_model(Stream::Geometry, 5);
    let lins: Vec<_> = (0..3).map(|i| common::varied_lineage(i, 4)).collect();
    let fwd = tensorize(&lins, 4, &[1.0; 3]).expect("valid batch");
    let shuffled = vec![lins[2].clone(), lins[0].clone(), lins[1].clone()];
    let rev = tensorize(&shuffled, 4, &[1.0; 3]).expect("valid batch");

    let (mu_f, _) = encode_rows(&model, &fwd);
    let (mu_r, _) = encode_rows(&model, &rev);
    let l = mu_f.len() / 3;
    let row = |v: &[f64], i: usize| v[i * l..(i + 1) * l].to_vec();
    assert_eq!(row(&mu_r, 0), row(&mu_f, 2), "row 0 of the permuted batch is old row 2");
    assert_eq!(row(&mu_r, 1), row(&mu_f, 0));
    assert_eq!(row(&mu_r, 2), row(&mu_f, 1));
}

#[test]
fn padded_slot_garbage_never_reaches_the_outputs() {
    for stream in [Stream::Geometry, Stream::Appearance] {
        let model = tiny_model(stream, 29);
        // Lengths 3 and 5 pack to T=5, so row 0 has two padded slots.
        let lins = vec![common::varied_lineage(0, 3), common::varied_lineage(1, 5)];
        let batch = tensorize(&lins, 5, &[1.0, 1.0]).expect("valid batch");

        let mut poisoned = batch.clone();
        let t = poisoned.time();
        let gdim = Stream::Geometry.feature_dim();
        let adim = Stream::Appearance.feature_dim();
        let g = poisoned.geometry.data_mut();
        for slot in 0..2 {
            for d in 0..gdim {
                g[slot * gdim + d] = 731.25 - d as f64 * 13.5;
            }
        }
        let a = poisoned.appearance.data_mut();
        for slot in 0..2 {
            for d in 0..adim {
                a[slot * adim + d] = -512.5 + d as f64 * 7.25;
            }
        }
        assert!(!poisoned.mask[0] && !poisoned.mask[1], "poisoned slots are padding");
        let _ = t;

        let (mu_c, lv_c) = encode_rows(&model, &batch);
        let (mu_p, lv_p) = encode_rows(&model, &poisoned);
        assert_eq!(mu_c, mu_p, "padded-slot values must not reach the posterior mean");
        assert_eq!(lv_c, lv_p, "padded-slot values must not reach the posterior variance");

        // The decoder must be equally blind to padding garbage.
        let decode_values = |b: &resplat_data::LineageBatch| {
            let mut tape = Tape::inference();
            let bound = model.params.bind(&mut tape);
            let (mu, _) = model.encode(&mut tape, &bound, b).expect("visible rows");
            let out = model.decode(&mut tape, &bound, b, mu).expect("decodes");
            tape.value(out.output).data().to_vec()
        };
        assert_eq!(decode_values(&batch), decode_values(&poisoned), "decoded outputs must match");
    }
}

#[test]
fn a_fully_masked_sequence_is_rejected() {
    let model = tiny_model(Stream::Geometry, 3);
    let lins = vec![common::varied_lineage(0, 3), common::varied_lineage(1, 3)];
    let mut batch = tensorize(&lins, 3, &[1.0, 1.0]).expect("valid batch");
    for slot in 0..batch.time() {
        batch.mask[slot] = false;
    }
    let mut tape = Tape::inference();
    let bound = model.params.bind(&mut tape);
    let err = model.encode(&mut tape, &bound, &batch);
    match err {
        Err(e) => assert!(
            e.to_string().contains("no visible timesteps"),
            "unexpected message: {e}"
        ),
        Ok(_) => panic!("an all-masked sequence must be an error, not a silent zero"),
    }
}

#[test]
fn decoded_geometry_offsets_the_last_visible_position() {
    let model = tiny_model(Stream::Geometry, 17);
    let lins: Vec<_> = (0..2).map(|i| common::varied_lineage(i, 4)).collect();
    let batch = tensorize(&lins, 4, &[1.0, 1.0]).expect("valid batch");
    let b = batch.batch();

    let mut tape = Tape::inference();
    let bound = model.params.bind(&mut tape);
    let (mu, _) = model.encode(&mut tape, &bound, &batch).expect("visible rows");
    let decoded = model.decode(&mut tape, &bound, &batch, mu).expect("decodes");

    let out = tape.value(decoded.output).clone();
    assert_eq!(out.shape(), &[b, Stream::Geometry.feature_dim()]);
    let pos = tape.value(decoded.positions.expect("geometry emits positions")).clone();
    assert_eq!(pos.shape(), &[b, 3]);

    // positions = predicted delta + the last visible input position.
    let gdim = Stream::Geometry.feature_dim();
    let t = batch.time();
    for bi in 0..b {
        let last_visible = (bi * t + batch.target_index[bi] - 1) * gdim;
        for d in 0..3 {
            let expected = out.data()[bi * gdim + d] + batch.geometry.data()[last_visible + d];
            assert_eq!(
                pos.data()[bi * 3 + d],
                expected,
                "absolute position must be delta plus base, bit for bit"
            );
        }
    }
}

#[test]
fn appearance_decoding_emits_no_positions() {
    let model = tiny_model(Stream::Appearance, 17);
    let lins: Vec<_> = (0..2).map(|i| common::varied_lineage(i, 3)).collect();
    let batch = tensorize(&lins, 3, &[1.0, 1.0]).expect("valid batch");
    let mut tape = Tape::inference();
    let bound = model.params.bind(&mut tape);
    let (mu, _) = model.encode(&mut tape, &bound, &batch).expect("visible rows");
    let decoded = model.decode(&mut tape, &bound, &batch, mu).expect("decodes");
    assert_eq!(
        tape.value(decoded.output).shape(),
        &[2, Stream::Appearance.feature_dim()]
    );
    assert!(decoded.positions.is_none(), "only the geometry stream predicts positions");
}

#[test]
fn near_zero_variance_collapses_the_sample_onto_the_mean() {
    let mut tape = Tape::new();
    let latent = 4;
    let mu_t = Tensor::new(vec![1, latent], vec![0.7, -0.3, 1.2, 0.0]);
    let lv_t = Tensor::new(vec![1, latent], vec![-10.0; latent]);
    let eps = Tensor::new(vec![1, latent], vec![1.5, -1.5, 0.9, 1.0]);
    let mu = tape.constant(mu_t.clone());
    let logvar = tape.constant(lv_t);
    let z = StreamVae::reparameterize(&mut tape, mu, logvar, &eps);
    let bound = (-5.0f64).exp();
    for (i, (zv, mv)) in tape.value(z).data().iter().zip(mu_t.data()).enumerate() {
        let dist = (zv - mv).abs();
        let limit = bound * eps.data()[i].abs();
        assert!(
            dist <= limit * (1.0 + 1e-12),
            "dim {i}: |z - mu| = {dist:e} exceeds exp(-5)|eps| = {limit:e}"
        );
    }
}

#[test]
fn full_size_models_fit_their_checkpoint_budgets() {
    for stream in [Stream::Geometry, Stream::Appearance] {
        let cfg = ModelConfig::for_stream(stream);
        let model = StreamVae::new(stream, cfg, 0).expect("default config is valid");
        let payload = model.params.payload_bytes();
        let budget = stream.size_budget_bytes();
        assert!(
            payload <= budget,
            "{name} stream payload {payload} exceeds its budget {budget}",
            name = stream.name()
        );
        assert!(payload > 0, "model must have parameters");

        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.ckpt");
        model.save(&path, None).expect("within budget");
        let file_len = std::fs::metadata(&path).expect("saved").len() as usize;
        assert!(
            file_len <= budget + 16 * 1024,
            "{name} checkpoint file {file_len} is far over the payload budget",
            name = stream.name()
        );
    }
}

#[test]
fn checkpoints_round_trip_and_reject_foreign_stores() {
    let model = tiny_model(Stream::Appearance, 41);
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("app.ckpt");
    model.save(&path, Some(serde_json::json!({"step": 3}))).expect("saves");

    let loaded = StreamVae::load(&path).expect("loads");
    assert_eq!(loaded.stream, Stream::Appearance);
    assert_eq!(loaded.params.names(), model.params.names(), "tensor order preserved");
    for (a, b) in loaded.params.tensors().iter().zip(model.params.tensors()) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32 as f64, "values survive as their f32 quantization");
        }
    }

    // A store whose tensors do not match the recorded architecture must be
    // refused, not silently reinterpreted.
    let meta = CheckpointMeta {
        stream: Stream::Appearance,
        config: ModelConfig::tiny(),
        train: None,
    };
    let mut bogus = ParamStore::new();
    bogus.add("stray.tensor", Tensor::new(vec![2, 2], vec![1.0; 4]));
    let bad_path = dir.path().join("bogus.ckpt");
    bogus
        .save(&bad_path, &serde_json::to_string(&meta).expect("serializes"))
        .expect("writes");
    assert!(
        StreamVae::load(&bad_path).is_err(),
        "a checkpoint with foreign tensors must not load"
    );
}
