use sttran_core::checkpoint::load_checkpoint;
use sttran_core::config::{Mode, ModelConfig};
use sttran_core::data::{synth_generate, SynthSpec, VideoSample};
use sttran_core::model::Sttran;
use sttran_core::par::Exec;
use sttran_core::train::{video_for_step, CheckpointPolicy, Trainer};
use sttran_core::Error;

fn videos() -> (SynthSpec, Vec<VideoSample>) {
    let spec = SynthSpec {
        n_videos: 8,
        frames: 4,
        ..SynthSpec::default()
    };
    let v = synth_generate(&spec).unwrap();
    (spec, v)
}

fn run(cfg: &ModelConfig, videos: &[VideoSample], steps: u64) -> Vec<f64> {
    let mut t = Trainer::new(Sttran::new(cfg.clone()).unwrap());
    t.run(videos, steps, None).unwrap().losses()
}

#[test]
fn same_seed_same_losses() {
    let (_, v) = videos();
    let cfg = ModelConfig::desk();
    let a = run(&cfg, &v, 30);
    assert_eq!(a.len(), 30);
    assert_eq!(a, run(&cfg, &v, 30));
    assert_ne!(a, run(&ModelConfig { seed: 1, ..cfg }, &v, 30));
}

#[test]
fn loss_goes_down() {
    let (_, v) = videos();
    let l = run(&ModelConfig::desk(), &v, 80);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean(&l[70..]) < mean(&l[..10]), "{:?}", l);
}

#[test]
fn all_modes_train_and_predict() {
    let (_, v) = videos();
    for mode in Mode::ALL {
        let cfg = ModelConfig {
            mode,
            ..ModelConfig::desk()
        };
        let mut t = Trainer::new(Sttran::new(cfg).unwrap());
        let rec = t.run(&v, 5, None).unwrap();
        assert!(rec.losses().iter().all(|l| l.is_finite() && *l >= 0.0));
        let out = t.model.predict(&v[0]).unwrap();
        assert_eq!(out.frames.len(), v[0].num_frames());
        for f in &out.frames {
            assert!(mode != Mode::PredCls || !f.pairs.is_empty());
            for p in &f.pairs {
                assert_eq!(p.logits.each_ref().map(Vec::len), [2, 3, 4]);
                assert!(f.objects[p.subject].label == 0, "subjects are people");
            }
            if mode == Mode::PredCls {
                assert!(f.objects.iter().all(|o| o.score == 1.0));
            } else {
                assert!(f.objects.iter().all(|o| o.score > 0.0 && o.score <= 1.0));
            }
        }
    }
}

#[test]
fn parallel_and_sequential_predictions_agree() {
    let (_, v) = videos();
    let model = Sttran::new(ModelConfig::desk()).unwrap();
    let par: Vec<_> = model.predict_many(&v, Exec::Parallel).into_iter().map(Result::unwrap).collect();
    let seq: Vec<_> = model.predict_many(&v, Exec::Sequential).into_iter().map(Result::unwrap).collect();
    assert_eq!(par, seq);
}

#[test]
fn resumed_run_sees_the_same_videos() {
    let (spec, v) = videos();
    let vocab = spec.vocabulary();
    let cfg = ModelConfig::desk();
    let dir = tempfile::tempdir().unwrap();
    let policy = CheckpointPolicy {
        path: dir.path().join("ck.sttc"),
        every: 10,
        vocab: &vocab,
    };
    let mut whole = Trainer::new(Sttran::new(cfg.clone()).unwrap());
    let full = whole.run(&v, 20, None).unwrap();

    let mut first = Trainer::new(Sttran::new(cfg).unwrap());
    let head = first.run(&v, 12, Some(&policy)).unwrap();
    assert_eq!(head.checkpoints.len(), 2);
    let ck = load_checkpoint(&policy.path, &vocab).unwrap();
    assert_eq!(ck.optimizer.as_ref().unwrap().step, 12);
    let mut resumed = Trainer::resume(ck.model, ck.optimizer);
    let tail = resumed.run(&v, 20, None).unwrap();
    let ids = |r: &sttran_core::train::RunRecord| r.steps.iter().map(|s| s.video.clone()).collect::<Vec<_>>();
    let mut joined = ids(&head);
    joined.extend(ids(&tail));
    assert_eq!(joined, ids(&full));
    let idx: Vec<usize> = (0..20).map(|s| video_for_step(v.len(), 0, s)).collect();
    assert_eq!(ids(&full), idx.iter().map(|&i| v[i].id.clone()).collect::<Vec<_>>());
}

#[test]
fn unannotated_data_is_rejected() {
    let (_, mut v) = videos();
    for video in &mut v {
        for f in &mut video.frames {
            f.gt.relations.clear();
        }
    }
    let mut t = Trainer::new(Sttran::new(ModelConfig::desk()).unwrap());
    assert!(matches!(t.run(&v, 3, None), Err(Error::Config(_))));
    assert!(matches!(t.run(&[], 3, None), Err(Error::Config(_))));
}
