use chromalink::data::{synth_clip, Clip, SynthSpec};
use chromalink::pipeline::{colorize_video_n, split_into_blocks, Trainer};
use chromalink::{Checkpoint, LabFrame, Model32, PipelineConfig, VideoColorizer};

fn small(seed: u64) -> PipelineConfig {
    PipelineConfig { width: 32, height: 24, seed, log_every: 0, ..PipelineConfig::tiny() }
}

fn clip(seed: u64, frames: usize) -> (Vec<LabFrame<f32>>, LabFrame<f32>) {
    let c = synth_clip(&SynthSpec::new(seed, frames, 24, 32, 2)).unwrap();
    (c.gray(), c.lab[0].clone())
}

fn train_clip(seed: u64) -> Clip {
    synth_clip(&SynthSpec::new(seed, 4, 24, 32, 2)).unwrap().to_clip()
}

fn same_frames(a: &[LabFrame<f32>], b: &[LabFrame<f32>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.l.data() == y.l.data() && x.ab.data() == y.ab.data())
}

#[test]
fn frame_count_and_luminance_survive_every_block_size() {
    let model = Model32::new(small(0)).unwrap();
    for len in 1..=7 {
        let (gray, reference) = clip(len as u64, len);
        for n in 1..=3 {
            let out = colorize_video_n(&model, &gray, &reference, n).unwrap();
            assert_eq!(out.len(), len);
            for (o, i) in out.iter().zip(&gray) {
                assert_eq!(o.l.data(), i.l.data());
                assert!(o.ab.max_abs() < 1.0);
            }
        }
    }
}

#[test]
fn odd_sizes_are_padded_and_cropped() {
    let cfg = PipelineConfig { width: 30, height: 21, ..small(0) };
    let model = Model32::new(cfg).unwrap();
    let c = synth_clip(&SynthSpec::new(3, 3, 21, 30, 2)).unwrap();
    let out = colorize_video_n(&model, &c.gray(), &c.lab[0], 2).unwrap();
    assert_eq!(out[0].ab.shape(), &[2, 21, 30]);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let model = Model32::new(small(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Model32::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    for id in model.store.ids() {
        assert_eq!(model.store.get(id), back.store.get(id));
    }
    let (gray, reference) = clip(9, 5);
    assert!(same_frames(
        &colorize_video_n(&model, &gray, &reference, 2).unwrap(),
        &colorize_video_n(&back, &gray, &reference, 2).unwrap()
    ));
    let ck = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
}

#[test]
fn same_seed_same_everything() {
    let (gray, reference) = clip(11, 4);
    let a = Model32::new(small(7)).unwrap();
    let b = Model32::new(small(7)).unwrap();
    let c = Model32::new(small(8)).unwrap();
    let oa = colorize_video_n(&a, &gray, &reference, 2).unwrap();
    assert!(same_frames(&oa, &colorize_video_n(&b, &gray, &reference, 2).unwrap()));
    assert!(!same_frames(&oa, &colorize_video_n(&c, &gray, &reference, 2).unwrap()));

    let clips = [train_clip(1), train_clip(2)];
    let run = || {
        let cfg = PipelineConfig { max_steps: 3, lambda_adv: 0.2, ..small(7) };
        let mut t = Trainer::new(Model32::new(cfg).unwrap());
        let recs = t.fit(&clips, None, |_| {}).unwrap();
        (recs.iter().map(|r| (r.clip, r.total)).collect::<Vec<_>>(), t.model)
    };
    let (ra, ma) = run();
    let (rb, mb) = run();
    assert_eq!(ra, rb);
    for id in ma.store.ids() {
        assert_eq!(ma.store.get(id), mb.store.get(id));
    }
}

#[test]
fn no_linkage_matches_resetting_before_every_block() {
    let (gray, reference) = clip(12, 7);
    let mut model = Model32::new(small(3)).unwrap();
    let linked = colorize_video_n(&model, &gray, &reference, 2).unwrap();

    let mut vc = VideoColorizer::new(&model, &reference).unwrap();
    let mut reset = Vec::new();
    for b in split_into_blocks(&gray, 2).unwrap() {
        vc = VideoColorizer::new(&model, &reference).unwrap();
        reset.extend(vc.push_block(b).unwrap());
    }
    assert_eq!(vc.blocks_done(), 1);
    assert!(!same_frames(&linked, &reset), "linkage should matter once a state exists");

    model.set_ablation(false, false, true);
    let unlinked = colorize_video_n(&model, &gray, &reference, 2).unwrap();
    assert!(same_frames(&unlinked, &reset));
}

#[test]
fn state_is_fixed_size_and_fresh_per_video() {
    let model = Model32::new(small(5)).unwrap();
    let (gray, reference) = clip(13, 6);
    let mut vc = VideoColorizer::new(&model, &reference).unwrap();
    assert!(vc.state().is_empty());
    let mut shape = None;
    for (i, b) in split_into_blocks(&gray, 2).unwrap().into_iter().enumerate() {
        vc.push_block(b).unwrap();
        let s = vc.state().info.as_ref().unwrap().shape().to_vec();
        assert_eq!(*shape.get_or_insert(s.clone()), s);
        assert_eq!(vc.state().last_block, Some(i));
    }

    // A second video after another one sees no trace of the first.
    let (other, other_ref) = clip(14, 6);
    let _ = colorize_video_n(&model, &other, &other_ref, 2).unwrap();
    let a = colorize_video_n(&model, &gray, &reference, 2).unwrap();
    let b = colorize_video_n(&model, &gray, &reference, 2).unwrap();
    assert!(same_frames(&a, &b));
}

#[test]
fn resuming_from_a_saved_state_continues_the_stream() {
    let model = Model32::new(small(6)).unwrap();
    let (gray, reference) = clip(15, 6);
    let whole = colorize_video_n(&model, &gray, &reference, 2).unwrap();
    let blocks = split_into_blocks(&gray, 2).unwrap();
    let mut first = VideoColorizer::new(&model, &reference).unwrap();
    let mut out = first.push_block(blocks[0]).unwrap();
    let mut second = VideoColorizer::new(&model, &reference).unwrap().with_state(first.state().clone());
    assert_eq!(second.blocks_done(), 1);
    for b in &blocks[1..] {
        out.extend(second.push_block(b).unwrap());
    }
    assert!(same_frames(&whole, &out));
}

#[test]
fn learning_rate_drops_tenfold_at_each_decay_epoch() {
    let cfg = PipelineConfig {
        max_steps: 0,
        epochs: 10,
        steps_per_epoch: 1,
        lambda_adv: 0.0,
        lambda_perc: 0.0,
        ..small(2)
    };
    let scales: Vec<f64> = (0..10).map(|e| cfg.lr_multiplier(e)).collect();
    assert_eq!(&scales[..4], &[1.0; 4]);
    assert_eq!(&scales[4..8], &[0.1; 4]);
    assert_eq!(&scales[8..], &[0.01; 2]);
    let mut t = Trainer::new(Model32::new(cfg).unwrap());
    let recs = t.fit(&[train_clip(3)], None, |_| {}).unwrap();
    assert_eq!(recs.len(), 10);
    for w in recs.windows(2) {
        let ratio = w[1].lr_scale / w[0].lr_scale;
        assert!(ratio == 1.0 || (ratio - 0.1).abs() < 1e-12, "ratio {ratio}");
    }
    assert_eq!(recs.iter().filter(|r| r.lr_scale == 0.1).count(), 4);
}

#[test]
fn training_lowers_the_loss_on_one_clip() {
    let cfg = PipelineConfig { max_steps: 25, lr_others: 1e-3, lambda_adv: 0.0, steps_per_epoch: 100, ..small(1) };
    let mut t = Trainer::new(Model32::new(cfg).unwrap());
    let recs = t.fit(&[train_clip(21)], None, |_| {}).unwrap();
    let head: f64 = recs[..3].iter().map(|r| r.l1.unwrap()).sum::<f64>() / 3.0;
    let tail: f64 = recs[recs.len() - 3..].iter().map(|r| r.l1.unwrap()).sum::<f64>() / 3.0;
    assert!(tail < head, "l1 {head} -> {tail}");
    assert!(recs.iter().all(|r| r.total.is_finite()));
}
