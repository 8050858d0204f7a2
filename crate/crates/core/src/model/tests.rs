use super::*;
use crate::data::{Lang, TrainingExample, Vocabulary};
use crate::tensor::FdOptions;

fn vocabs() -> Vocabs {
    gradcheck::fixture_vocabs()
}

fn micro(vocabs: &Vocabs, s2c: S2CVariant) -> ModelConfig {
    gradcheck::fixture_config(vocabs, s2c)
}

fn noise(cfg: &ModelConfig, seed: u64) -> Image {
    gradcheck::noise_image(cfg, seed)
}

fn setup(s2c: S2CVariant) -> (ModelConfig, Vocabs, Vec<TrainingExample>) {
    let v = vocabs();
    let cfg = micro(&v, s2c);
    let ex = gradcheck::fixture_examples(&cfg);
    (cfg, v, ex)
}

#[test]
fn every_loss_term_matches_finite_differences() {
    let opts = FdOptions {
        max_coords: Some(3),
        ..FdOptions::default()
    };
    let variants = [S2CVariant::Sat(2), S2CVariant::None, S2CVariant::Ctc, S2CVariant::At];
    let checks = gradcheck::check_objectives(&variants, &opts).unwrap();
    assert_eq!(checks.len(), 9 + 2 * variants.len());
    for c in &checks {
        assert!(c.report.coords_checked > 0);
        assert!(c.report.max_rel_err <= 1e-4, "stage {} {} {}: {:?}", c.stage, c.s2c, c.term, c.report);
    }
}

#[test]
fn straight_through_gradient_equals_frozen_replay() {
    let (cfg, v, ex) = setup(S2CVariant::Sat(2));
    let mut store = ParamStore::<f64>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let refs: Vec<_> = ex.iter().collect();
    let batch = Batch::new(&cfg, &v, &refs, None).unwrap();
    let frozen = model.freeze_vq(&store, &batch).unwrap();
    let run = |replay: bool| {
        let mut g = Graph::new(&store);
        let loss = if replay {
            model.stage1_loss_frozen(&mut g, &batch, &frozen)
        } else {
            model.stage1_loss(&mut g, &batch)
        }
        .unwrap();
        let value = g.value(loss.total).item();
        (value, g.backward(loss.total).unwrap())
    };
    let (plain, grads) = run(false);
    let (replayed, replay_grads) = run(true);
    assert!((plain - replayed).abs() <= 1e-12);
    for id in store.ids() {
        let (a, b) = (grads.get(id), replay_grads.get(id));
        match (a, b) {
            (Some(a), Some(b)) => {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{}", store.get(id).name);
                }
            }
            _ => assert_eq!(a.is_some(), b.is_some(), "{}", store.get(id).name),
        }
    }
}

#[test]
fn total_gradient_is_sum_of_term_gradients() {
    let (cfg, v, ex) = setup(S2CVariant::Sat(2));
    let mut store = ParamStore::<f64>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let refs: Vec<_> = ex.iter().collect();
    let batch = Batch::new(&cfg, &v, &refs, None).unwrap();
    let grad_of = |pick: Option<usize>| {
        let mut g = Graph::new(&store);
        let loss = model.stage1_loss(&mut g, &batch).unwrap();
        let root = pick.map_or(loss.total, |i| loss.parts[i].1);
        g.backward(root).unwrap()
    };
    let total = grad_of(None);
    let parts: Vec<_> = (0..9).map(|i| grad_of(Some(i))).collect();
    for id in store.ids() {
        let n = store.value(id).numel();
        for k in 0..n {
            let want: f64 = parts.iter().map(|p| p.get(id).map_or(0.0, |t| t.data()[k])).sum();
            let got = total.get(id).map_or(0.0, |t| t.data()[k]);
            assert!((want - got).abs() <= 1e-12 * want.abs().max(1.0), "{}", store.get(id).name);
        }
    }
}

#[test]
fn stage1_total_is_sum_of_named_parts() {
    let (cfg, v, ex) = setup(S2CVariant::Sat(2));
    let mut store = ParamStore::<f64>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let refs: Vec<_> = ex.iter().collect();
    let batch = Batch::new(&cfg, &v, &refs, None).unwrap();
    let mut g = Graph::inference(&store);
    let report = model.stage1_loss(&mut g, &batch).unwrap().report(&g);
    let names: Vec<&str> = report.components.iter().map(|(n, _)| &**n).collect();
    assert_eq!(names, gradcheck::stage1_terms());
    let sum: f64 = report.components.iter().map(|(_, v)| v).sum();
    assert!((sum - report.total).abs() <= 1e-12 * report.total.abs().max(1.0));
}

#[test]
fn none_variant_has_zero_char_loss() {
    let (cfg, v, ex) = setup(S2CVariant::None);
    let mut store = ParamStore::<f64>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let tgt: Vec<_> = ex.iter().map(|e| &e.tgt_image).collect();
    let codes = model.extract_target_codes(&store, &tgt).unwrap();
    let refs: Vec<_> = ex.iter().collect();
    let batch = Batch::new(&cfg, &v, &refs, Some(&codes)).unwrap();
    let mut g = Graph::inference(&store);
    let report = model.stage2_loss(&mut g, &batch, None).unwrap().report(&g);
    assert_eq!(report.get("ce_char"), Some(0.0));
    assert_eq!(report.get("ce_code"), Some(report.total));
}

#[test]
fn stage2_step_leaves_stage1_bit_identical() {
    let (cfg, v, ex) = setup(S2CVariant::Sat(2));
    let mut store = ParamStore::<f32>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let before: Vec<_> = store
        .iter()
        .filter(|(_, p)| !is_stage2_param(&p.name))
        .map(|(_, p)| p.value.clone())
        .collect();
    let tcfg = train::TrainConfig {
        epochs: 1,
        batch_size: 2,
        warmup: 1,
        peak_lr: 1e-2,
        ..train::TrainConfig::default()
    };
    let (logs, _) = train::train_stage2(&model, &mut store, &v, &ex, &tcfg, |_| Ok(())).unwrap();
    assert_eq!(logs.len(), 1);
    let after: Vec<_> = store
        .iter()
        .filter(|(_, p)| !is_stage2_param(&p.name))
        .map(|(_, p)| p.value.clone())
        .collect();
    assert_eq!(before, after);
    assert!(store.iter().any(|(_, p)| is_stage2_param(&p.name) && p.requires_grad));
}

#[test]
fn stage2_modules_are_named_by_prefix() {
    let (cfg, _, _) = setup(S2CVariant::Ctc);
    let mut store = ParamStore::<f32>::new();
    VisTrans::new(&cfg, &mut store).unwrap();
    let stage2: Vec<_> = store.iter().filter(|(_, p)| is_stage2_param(&p.name)).collect();
    assert!(stage2.iter().any(|(_, p)| p.name.starts_with("s2c.")));
    assert!(stage2.iter().any(|(_, p)| p.name.starts_with("two_pass.")));
}

#[test]
fn tiny_background_states_and_code_grid() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::<f32>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let img = noise(&cfg, 3);
    let (h_back, _) = model.encode_source(&store, &img).unwrap();
    assert_eq!(h_back.shape(), [1, 64, cfg.d_model]);
    let a = model.extract_target_codes(&store, &[&img]).unwrap();
    let b = model.extract_target_codes(&store, &[&img]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].len(), 64);
    assert!(a[0].iter().all(|&c| c < cfg.codebook_size));
}

#[test]
fn beam_of_one_is_greedy() {
    let (cfg, v, ex) = setup(S2CVariant::Sat(2));
    let mut store = ParamStore::<f32>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let tag = v.subword.lang_id(Lang::Fr).unwrap();
    for e in &ex {
        let (_, h_trans) = model.encode_source(&store, &e.src_image).unwrap();
        let greedy = DecodeConfig::greedy(&cfg);
        let beam = DecodeConfig {
            strategy: Strategy::Beam(1),
            ..greedy
        };
        assert_eq!(
            model.decode_subwords(&store, &h_trans, tag, &greedy).unwrap(),
            model.decode_subwords(&store, &h_trans, tag, &beam).unwrap()
        );
    }
}

#[test]
fn wider_beam_respects_length_limit() {
    let (cfg, v, ex) = setup(S2CVariant::Sat(2));
    let mut store = ParamStore::<f32>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let tag = v.subword.lang_id(Lang::Cs).unwrap();
    let (_, h_trans) = model.encode_source(&store, &ex[0].src_image).unwrap();
    let beam = DecodeConfig {
        strategy: Strategy::Beam(3),
        ..DecodeConfig::greedy(&cfg)
    };
    let (ids, _) = model.decode_subwords(&store, &h_trans, tag, &beam).unwrap();
    assert!(ids.len() <= cfg.max_subword_len);
    assert!(ids.iter().all(|&t| t != crate::data::vocab::EOS));
}

#[test]
fn sat_step_count_for_fixed_length() {
    let v = vocabs();
    for (s2c, steps) in [
        (S2CVariant::Sat(2), 5),
        (S2CVariant::Sat(4), 3),
        (S2CVariant::At, 10),
        (S2CVariant::Ctc, 1),
        (S2CVariant::None, 0),
    ] {
        let cfg = ModelConfig {
            max_char_len: 12,
            ..micro(&v, s2c)
        };
        let mut store = ParamStore::<f32>::new();
        let model = VisTrans::new(&cfg, &mut store).unwrap();
        let h_1pass = Tensor::full(vec![1, 4, cfg.d_model], 0.1f32);
        let out = model.decode_chars(&store, &h_1pass, 12, Some(10)).unwrap();
        assert_eq!(out.steps, steps, "{s2c}");
        assert_eq!(out.steps, s2c.decode_steps(10), "{s2c}");
        if s2c.has_decoder() {
            assert_eq!(out.chars.len(), 10);
        }
    }
}

#[test]
fn first_pass_states_are_causal() {
    let (cfg, v, ex) = setup(S2CVariant::Sat(2));
    let mut store = ParamStore::<f32>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let tag = v.subword.lang_id(Lang::De).unwrap();
    let (_, h_trans) = model.encode_source(&store, &ex[0].src_image).unwrap();
    let short = model.one_pass_hidden(&store, &h_trans, tag, &[5, 6]).unwrap();
    let long = model.one_pass_hidden(&store, &h_trans, tag, &[5, 6, 7, 8]).unwrap();
    let d = cfg.d_model;
    assert_eq!(&short.data()[..3 * d], &long.data()[..3 * d]);
}

#[test]
fn translate_produces_canvas_image() {
    let (cfg, v, ex) = setup(S2CVariant::Sat(2));
    let mut store = ParamStore::<f32>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let out = model.translate(&store, &v, &ex[0].src_image, Lang::Ro, &DecodeConfig::greedy(&cfg)).unwrap();
    assert_eq!((out.image.height(), out.image.width()), (cfg.height, cfg.width));
    assert_eq!(out.codes.len(), cfg.code_len());
    assert!(out.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn unknown_tag_is_rejected() {
    let (cfg, _, ex) = setup(S2CVariant::At);
    let mut store = ParamStore::<f32>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let no_tags = Vocabs {
        subword: Vocabulary::chars(&["ab"]).unwrap(),
        chars: Vocabulary::chars(&["ab"]).unwrap(),
    };
    let err = model
        .translate(&store, &no_tags, &ex[0].src_image, Lang::De, &DecodeConfig::greedy(&cfg))
        .unwrap_err();
    assert!(matches!(err, Error::UnknownLanguage(_)));
}

#[test]
fn wrong_canvas_is_rejected() {
    let (cfg, _, _) = setup(S2CVariant::At);
    let mut store = ParamStore::<f32>::new();
    let model = VisTrans::new(&cfg, &mut store).unwrap();
    let bad = Image::filled(cfg.height - 1, cfg.width, &[0.5; 3]);
    assert!(model.encode_source(&store, &bad).is_err());
}
