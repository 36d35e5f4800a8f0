use audioadapt::config::{ExperimentConfig, MethodConfig};
use audioadapt::labels::Provenance;
use audioadapt::pipeline::{
    average_predictions, generate_streams, load_models, pretrain_audio, save_models, train_stage2, Baseline, Session,
};
use audioadapt::synthgen::{generate, DomainSpec};
use ndarray::{array, Array2};

fn tiny(seed: u64) -> ExperimentConfig {
    ExperimentConfig::tiny(seed)
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny(3);
    let a = Session::new(&cfg).unwrap().run(&cfg).unwrap();
    let b = Session::new(&cfg).unwrap().run(&cfg).unwrap();
    assert_eq!(a.target_probs, b.target_probs);
    assert_eq!(a.report.to_csv(), b.report.to_csv());
}

#[test]
fn loss_traces_are_finite() {
    for seed in 0..5 {
        let cfg = tiny(seed);
        let mut session = Session::new(&cfg).unwrap();
        assert!(session.audio_trace.iter().all(|x| x.is_finite()));
        let run = session.run(&cfg).unwrap();
        let m = &run.models[0];
        assert_eq!(m.stage1.trace.len(), cfg.optim.stage1_epochs);
        assert!(m.stage1.trace.iter().all(|x| x.is_finite()), "seed {seed}");
        assert!(m.stage2.as_ref().unwrap().trace.iter().all(|x| x.is_finite()), "seed {seed}");
    }
}

#[test]
fn target_truth_never_reaches_training() {
    let cfg = tiny(5);
    let data = generate_streams(&cfg).unwrap();
    let scrambled: Vec<_> = data.iter().map(|d| d.with_scrambled_target_truth(99)).collect();
    assert_ne!(
        data[0].evaluation_truth(audioadapt::synthgen::Domain::Target),
        scrambled[0].evaluation_truth(audioadapt::synthgen::Domain::Target)
    );
    let a = Session::from_datasets(&cfg, data).unwrap().run(&cfg).unwrap();
    let b = Session::from_datasets(&cfg, scrambled).unwrap().run(&cfg).unwrap();
    assert_eq!(a.target_probs, b.target_probs);
}

#[test]
fn stage_two_leaves_stage_one_untouched() {
    let cfg = tiny(1);
    let mut session = Session::new(&cfg).unwrap();
    let mut s1 = cfg.clone();
    s1.method.stage2 = false;
    let run = session.run(&s1).unwrap();
    let stage1 = run.models[0].stage1.clone();
    let before = (stage1.model.clone(), stage1.audio.params.clone());
    let _ = train_stage2(&cfg, &session.streams[0], &stage1).unwrap();
    assert_eq!(stage1.model.visual.params, before.0.visual.params);
    assert_eq!(
        stage1.model.attention.as_ref().unwrap().params,
        before.0.attention.as_ref().unwrap().params
    );
    assert_eq!(stage1.audio.params, before.1);
}

#[test]
fn visual_baseline_ignores_audio() {
    let cfg = tiny(2);
    let data = generate_streams(&cfg).unwrap();
    let mut silent = data.clone();
    let ds = &mut silent[0];
    for v in ds.source.iter_mut().chain(ds.target.iter_mut()) {
        v.audio.iter_mut().for_each(|x| *x = 0.0);
    }
    let (a, _) = Session::from_datasets(&cfg, data).unwrap().baseline(Baseline::VisualOnly).unwrap();
    let (b, _) = Session::from_datasets(&cfg, silent).unwrap().baseline(Baseline::VisualOnly).unwrap();
    assert_eq!(a, b);
}

#[test]
fn baselines_are_deterministic_and_fusion_averages() {
    let cfg = tiny(4);
    let mut s = Session::new(&cfg).unwrap();
    let (v, _) = s.baseline(Baseline::VisualOnly).unwrap();
    let (a, _) = s.baseline(Baseline::AudioOnly).unwrap();
    let (f, _) = s.baseline(Baseline::LateFusion).unwrap();
    assert_eq!(f, average_predictions(&[v.clone(), a]).unwrap());
    let (v2, _) = Session::new(&cfg).unwrap().baseline(Baseline::VisualOnly).unwrap();
    assert_eq!(v, v2);
    assert!("early_fusion".parse::<Baseline>().is_err());
}

#[test]
fn averaging_rules() {
    let p = array![[1.0, 0.0]];
    let q = array![[0.0, 1.0]];
    assert_eq!(average_predictions(&[p.clone(), q]).unwrap(), array![[0.5, 0.5]]);
    assert_eq!(average_predictions(&[p.clone(), p.clone()]).unwrap(), p);
    assert!(average_predictions(&[]).is_err());
    assert!(average_predictions(&[p, Array2::zeros((2, 2))]).is_err());
}

#[test]
fn audio_pretraining_beats_chance_on_audible_classes() {
    let mut cfg = tiny(0);
    cfg.data.num_source = 200;
    cfg.optim.pretrain_epochs = 20;
    let ds = generate(&cfg.data).unwrap();
    let (enc, _) = pretrain_audio(&cfg, &ds).unwrap();
    let x = audioadapt::pipeline::stack(&ds.source, cfg.data.clips, false);
    let probs = enc.infer(&x, cfg.data.clips).unwrap().probs;
    let labels: Vec<_> = ds.source_labels();
    let acc = audioadapt::eval::headline(&probs, &labels).unwrap();
    assert!(acc > 50.0, "source accuracy {acc}");
    let (again, _) = pretrain_audio(&cfg, &ds).unwrap();
    assert_eq!(enc.params, again.params);
}

#[test]
fn silent_audio_stays_near_chance() {
    let mut cfg = tiny(0);
    cfg.data = DomainSpec {
        audible: vec![false; 4],
        source_class_prior: vec![0.25; 4],
        num_source: 400,
        ..DomainSpec::tiny(0)
    };
    cfg.optim.pretrain_epochs = 10;
    let ds = generate(&cfg.data).unwrap();
    let (enc, _) = pretrain_audio(&cfg, &ds).unwrap();
    // Score on fresh videos so memorization does not count.
    let fresh = generate(&DomainSpec { seed: 77, ..cfg.data.clone() }).unwrap();
    let x = audioadapt::pipeline::stack(&fresh.source, cfg.data.clips, false);
    let probs = enc.infer(&x, cfg.data.clips).unwrap().probs;
    let acc = audioadapt::eval::headline(&probs, &fresh.source_labels()).unwrap();
    // Chance is 25% (or the majority rate); 3 sigma at n=400 is about 6.5 points.
    assert!(acc < 25.0 + 3.0 * (0.25f64 * 0.75 / 400.0).sqrt() * 100.0 + 5.0, "accuracy {acc}");
}

#[test]
fn checkpoints_reproduce_predictions() {
    let cfg = tiny(6);
    let mut s = Session::new(&cfg).unwrap();
    let run = s.run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_models(dir.path(), &s.audio, &run.models).unwrap();
    let (audio, models) = load_models(&cfg, dir.path()).unwrap();
    let fresh = Session::with_audio(&cfg, audio, Vec::new()).unwrap();
    let probs = fresh.predict(&models).unwrap();
    assert_eq!(probs, run.target_probs);
    assert_eq!(fresh.report(&probs).unwrap().to_csv(), run.report.to_csv());
}

#[test]
fn dual_modality_averages_two_streams() {
    let mut cfg = tiny(8);
    cfg.method.dual_modality = true;
    let mut s = Session::new(&cfg).unwrap();
    assert_eq!(s.streams.len(), 2);
    let run = s.run(&cfg).unwrap();
    assert_eq!(run.models.len(), 2);
    let one = s.predict_stream(0, &run.models[0]).unwrap();
    let two = s.predict_stream(1, &run.models[1]).unwrap();
    assert!(s.predict_stream(2, &run.models[1]).is_err());
    assert_eq!(run.target_probs, average_predictions(&[one, two]).unwrap());
    for row in run.target_probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn single_stream_session_refuses_dual_runs() {
    let cfg = tiny(8);
    let mut s = Session::new(&cfg).unwrap();
    let mut dual = cfg.clone();
    dual.method.dual_modality = true;
    assert!(s.run(&dual).is_err());
    let mut other = cfg.clone();
    other.noise.train = 0.5;
    assert!(s.run(&other).is_err());
}

#[test]
fn every_stage_one_variant_trains() {
    let cfg = tiny(9);
    let mut s = Session::new(&cfg).unwrap();
    for (att, absent, balanced) in [(false, false, false), (true, false, false), (true, true, false), (true, true, true)] {
        let mut c = cfg.clone();
        c.method = MethodConfig::stage1(att, absent, balanced);
        let run = s.run(&c).unwrap();
        assert!(run.models[0].stage2.is_none());
        assert_eq!(run.models[0].stage1.clusters.is_some(), balanced);
    }
    let mut c = cfg.clone();
    c.method.pseudo_source = Provenance::Visual;
    c.method.pseudo_kind = audioadapt::config::PseudoKind::Hard;
    c.method.cluster_feature = audioadapt::clustering::FeatureSource::Visual;
    c.method.finetune_audio = true;
    c.method.labeled_target_fraction = 0.5;
    s.run(&c).unwrap();
}

#[test]
fn absent_labels_from_audio_and_visual() {
    let cfg = tiny(10);
    let mut s = Session::new(&cfg).unwrap();
    let a = s.absent_labels(Provenance::Audio, &cfg).unwrap();
    let v = s.absent_labels(Provenance::Visual, &cfg).unwrap();
    assert_eq!(a.len(), cfg.data.num_target);
    assert_eq!(v.len(), cfg.data.num_target);
    assert!((0..a.len()).all(|i| a.set(i).len() == cfg.loss.r));
}

#[test]
fn multilabel_runs_report_map() {
    let mut cfg = tiny(11);
    cfg.data.multilabel = true;
    cfg.loss.base = audioadapt::losses::BaseLoss::SigmoidCe;
    let run = Session::new(&cfg).unwrap().run(&cfg).unwrap();
    let v = run.report.get("map", "all").unwrap();
    assert!((0.0..=100.0).contains(&v));
}
