use lowdose::dosesim::{generate_dataset, Dataset, DatasetPlan, Split};
use lowdose::losses::{total_loss, LossWeights};
use lowdose::nets::{NetConfig, ParamKind, Params, CONTEXTUAL, DISCRIMINATOR, FEATURES, MLNET};
use lowdose::trainer::{
    decode_checkpoint, encode_checkpoint, fit, fit_with, train_step, StageMode, TrainConfig,
    TrainState, Variant,
};
use lowdose::{Error, Tensor};

fn tiny_net() -> NetConfig {
    NetConfig {
        base_channels: 2,
        class_hidden: 4,
        refiner_channels: 2,
        ..NetConfig::default()
    }
}

fn tiny_data() -> Dataset {
    generate_dataset(&DatasetPlan {
        train: 4,
        val: 2,
        test: 2,
        seed: 5,
        ..DatasetPlan::default()
    })
    .unwrap()
}

fn config(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_epochs: epochs,
        variant,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn snapshot(p: &dyn Params) -> Vec<(String, Tensor, ParamKind)> {
    let mut out = Vec::new();
    p.visit("", &mut |n, t, k| out.push((n.to_string(), t.clone(), k)));
    out
}

fn batch(data: &Dataset) -> Vec<lowdose::dosesim::VolumePair> {
    let ids = data.manifest.split(Split::Train);
    vec![
        data.normalized_pair(ids[0], 100).unwrap(),
        data.normalized_pair(ids[1], 4).unwrap(),
    ]
}

#[test]
fn step_touches_only_trained_networks() {
    let data = tiny_data();
    let mut state = TrainState::new(tiny_net(), config(Variant::Full, 1)).unwrap();
    let before = snapshot(&state.nets);
    let losses = train_step(&mut state, &batch(&data)).unwrap();
    let after = snapshot(&state.nets);
    let mut changed = [false; 3];
    for ((name, a, kind), (_, b, _)) in before.iter().zip(&after) {
        if name.starts_with(FEATURES) {
            assert_eq!(a, b, "{name} is frozen");
        }
        if *kind == ParamKind::Trainable && a != b {
            for (i, p) in [MLNET, CONTEXTUAL, DISCRIMINATOR].iter().enumerate() {
                changed[i] |= name.starts_with(p);
            }
        }
    }
    assert_eq!(changed, [true, true, true]);
    assert!(losses.l_dis_d > 0.0 && losses.l_refine > 0.0);
}

#[test]
fn baseline_step_leaves_head_refiner_and_discriminator() {
    let data = tiny_data();
    let mut state = TrainState::new(tiny_net(), config(Variant::Baseline, 1)).unwrap();
    let before = snapshot(&state.nets);
    let losses = train_step(&mut state, &batch(&data)).unwrap();
    for ((name, a, kind), (_, b, _)) in before.iter().zip(&snapshot(&state.nets)) {
        let untouched = !name.starts_with(&format!("{MLNET}.")) || name.starts_with(&format!("{MLNET}.head."));
        if untouched {
            assert_eq!(a, b, "{name}");
        } else if *kind == ParamKind::Trainable && name.ends_with("weight") {
            assert_ne!(a, b, "{name}");
        }
    }
    assert_eq!((losses.l_class, losses.l_refine, losses.l_dis_g, losses.l_dis_d), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn breakdown_satisfies_weighted_sum() {
    let data = tiny_data();
    let (_, logs) = fit(&data, tiny_net(), config(Variant::Full, 2)).unwrap();
    let w = LossWeights::default();
    for log in &logs {
        let t = &log.train;
        let expect = w.lambda1 * t.l_re + w.lambda2 * t.l_class + w.lambda3 * t.l_refine + w.lambda4 * t.l_dis_g;
        assert_eq!(t.l_total, expect);
        assert_eq!(total_loss(&w, t.parts()).unwrap(), *t);
    }
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data();
    let (a, la) = fit(&data, tiny_net(), config(Variant::Full, 2)).unwrap();
    let (b, lb) = fit(&data, tiny_net(), config(Variant::Full, 2)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(encode_checkpoint(&a).unwrap(), encode_checkpoint(&b).unwrap());
    let (c, _) = fit(&data, tiny_net(), TrainConfig { seed: 4, ..config(Variant::Full, 2) }).unwrap();
    assert_ne!(a.nets, c.nets);
}

#[test]
fn single_epoch_run() {
    let data = tiny_data();
    let (state, logs) = fit(&data, tiny_net(), config(Variant::Cg, 1)).unwrap();
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0].epoch, 1);
    assert_eq!(state.progress.epoch, 1);
    assert!(state.progress.finished);
    let line = logs[0].to_json_line();
    assert!(line.starts_with('{') && !line.contains('\n'));
}

#[test]
fn early_stop_ends_training() {
    let data = tiny_data();
    let cfg = TrainConfig {
        lr_initial: 1e-6,
        ..config(Variant::Baseline, 10)
    };
    let (_, logs) = fit(&data, tiny_net(), cfg.clone()).unwrap();
    assert!(logs.len() < cfg.max_epochs);
    assert!(logs.last().unwrap().lr < cfg.lr_stop_threshold);
}

#[test]
fn checkpoint_round_trip() {
    let data = tiny_data();
    let (mut state, _) = fit(&data, tiny_net(), config(Variant::Full, 1)).unwrap();
    let path = std::path::Path::new("mem.ckpt");
    let bytes = encode_checkpoint(&state).unwrap();
    let mut loaded = decode_checkpoint(&bytes, path).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(encode_checkpoint(&loaded).unwrap(), bytes);
    let x = batch(&data)[0].x.clone();
    let a = state.predict(&x).unwrap();
    let b = loaded.predict(&x).unwrap();
    assert_eq!(a.refined, b.refined);
    assert_eq!(a.logits, b.logits);

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(decode_checkpoint(&bad, path), Err(Error::Version { .. })));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 3], path),
        Err(Error::Format { .. })
    ));

    // Same tensors under a header describing a wider network.
    let mut other = state.clone();
    other.net.base_channels = 3;
    let header = encode_checkpoint(&other).unwrap();
    let hlen = |b: &[u8]| 20 + u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
    let mut spliced = header[..hlen(&header)].to_vec();
    spliced.extend_from_slice(&bytes[hlen(&bytes)..]);
    assert!(matches!(decode_checkpoint(&spliced, path), Err(Error::Incompatible(_))));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tiny_data();
    let cfg = config(Variant::Full, 2);
    let (straight, straight_logs) = fit(&data, tiny_net(), cfg.clone()).unwrap();
    let mut saved = None;
    fit_with(TrainState::new(tiny_net(), cfg).unwrap(), &data, |s, log| {
        if log.epoch == 1 {
            saved = Some(encode_checkpoint(s)?);
        }
        Ok(())
    })
    .unwrap();
    let state = decode_checkpoint(&saved.unwrap(), "mem.ckpt".as_ref()).unwrap();
    let (resumed, logs) = fit_with(state, &data, |_, _| Ok(())).unwrap();
    assert_eq!(logs, straight_logs[1..]);
    assert_eq!(encode_checkpoint(&resumed).unwrap(), encode_checkpoint(&straight).unwrap());
}

#[test]
fn zeroed_weights_reproduce_baseline_trajectory() {
    let data = tiny_data();
    let (base, _) = fit(&data, tiny_net(), config(Variant::Baseline, 2)).unwrap();
    let zeroed = TrainConfig {
        weights: LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            ..LossWeights::default()
        },
        ..config(Variant::Full, 2)
    };
    let (full, _) = fit(&data, tiny_net(), zeroed).unwrap();
    let a = snapshot(&base.nets.mlnet);
    let b = snapshot(&full.nets.mlnet);
    for ((name, x, _), (_, y, _)) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data(), "{name}");
    }
}

#[test]
fn two_stage_freezes_mlnet_in_second_stage() {
    let data = tiny_data();
    let cfg = TrainConfig {
        stage_mode: StageMode::TwoStage,
        ..config(Variant::Full, 2)
    };
    let mut after_first = None;
    let (state, logs) = fit_with(TrainState::new(tiny_net(), cfg).unwrap(), &data, |s, log| {
        if log.epoch == 1 {
            after_first = Some(s.clone());
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(logs.iter().map(|l| l.stage).collect::<Vec<_>>(), vec![0, 1]);
    let first = after_first.unwrap();
    assert_eq!(first.nets.mlnet, state.nets.mlnet);
    assert_ne!(first.nets.contextual, state.nets.contextual);
    assert_eq!(logs[0].train.l_refine, 0.0);
}
