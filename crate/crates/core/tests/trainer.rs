//! Run determinism, bit-identical resume and logged quantities.

mod common;

use cclab::trainer::{
    detect_spikes, global_param_norm, load_checkpoint, parse_metrics_csv, resume, train, train_to_dir, train_with,
    Checkpoint, METRICS_FILE,
};
use proptest::prelude::*;

#[test]
fn identical_configs_give_identical_runs() {
    let cfg = common::three_state_config(60);
    let (a, la) = train::<f64>(&cfg).unwrap();
    let (b, lb) = train::<f64>(&cfg).unwrap();
    assert_eq!(la.to_csv(), lb.to_csv());
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(la.losses, lb.losses);

    let (c, lc) = train::<f32>(&cfg).unwrap();
    let (d, ld) = train::<f32>(&cfg).unwrap();
    assert_eq!(lc.to_csv(), ld.to_csv());
    assert_eq!(c.to_bytes(), d.to_bytes());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut cfg = common::three_state_config(40);
    cfg.logging.checkpoint_every = 10;
    cfg.logging.log_every = 5;
    let mut mids: Vec<Checkpoint> = Vec::new();
    let (full, full_log) = train_with::<f64>(&cfg, None, |ck| {
        mids.push(ck.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(mids.iter().map(|c| c.step).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
    for mid in &mids[..3] {
        // Through the byte container, as a real interruption would.
        let restored = Checkpoint::from_bytes(&mid.to_bytes()).unwrap();
        let (end, log) = resume::<f64>(&restored).unwrap();
        assert_eq!(end.to_bytes(), full.to_bytes(), "resumed from step {}", mid.step);
        let tail: Vec<_> = full_log.records.iter().filter(|r| r.step > mid.step).cloned().collect();
        assert_eq!(log.records, tail);
        assert_eq!(log.losses[..], full_log.losses[mid.step as usize..]);
    }
}

#[test]
fn resume_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::three_state_config(30);
    cfg.logging.checkpoint_every = 15;
    cfg.logging.log_every = 10;
    cfg.logging.out_dir = dir.path().join("run");
    let (full, _) = train_to_dir::<f32>(&cfg, None).unwrap();
    let mid = load_checkpoint(&dir.path().join("run/step-00000015.cclm")).unwrap();
    let (end, _) = resume::<f32>(&mid).unwrap();
    assert_eq!(end.params, full.params);
    assert_eq!(end.optim, full.optim);
    let rows = parse_metrics_csv(&std::fs::read_to_string(dir.path().join("run").join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30]);
}

#[test]
fn logged_norm_is_the_global_l2_norm() {
    let cfg = common::three_state_config(20);
    let (ck, log) = train::<f64>(&cfg).unwrap();
    let direct: f64 = ck
        .params
        .tensors
        .values()
        .flat_map(|t| t.data().iter().map(|&x| (x as f64) * (x as f64)))
        .sum::<f64>()
        .sqrt();
    assert!((global_param_norm(&ck.params) - direct).abs() <= 1e-12 * direct);
    assert!((log.last().unwrap().param_norm - direct).abs() <= 1e-6 * direct);
    assert_eq!(log.last().unwrap().step, 20);
}

#[test]
fn resume_rejects_edited_config() {
    let mut cfg = common::three_state_config(20);
    cfg.logging.checkpoint_every = 10;
    let mut mid = None;
    train_with::<f64>(&cfg, None, |ck| {
        mid.get_or_insert_with(|| ck.clone());
        Ok(())
    })
    .unwrap();
    let mid = mid.unwrap();
    let mut edited = mid.config.clone();
    edited.optim.lr_max *= 2.0;
    assert!(train_with::<f64>(&edited, Some(&mid), |_| Ok(())).is_err());
}

proptest! {
    #[test]
    fn constant_series_has_no_spikes(v in -5.0f64..5.0, len in 8usize..200, window in 8usize..40, k in 0.0f64..10.0) {
        prop_assume!(len >= window);
        prop_assert!(detect_spikes(&vec![v; len], window, k).unwrap().is_empty());
    }

    #[test]
    fn injected_spike_is_found(
        base in prop::collection::vec(0.9f64..1.1, 64..200),
        at in 32usize..200,
        k in 1.0f64..6.0,
    ) {
        let mut s = base;
        let at = 32 + at % (s.len() - 32);
        s[at] = 100.0;
        let found = detect_spikes(&s, 32, k).unwrap();
        prop_assert!(found.contains(&at));
        prop_assert!(found.iter().all(|&i| i >= 32 && s[i] > 1.0));
    }

    #[test]
    fn spikes_are_shift_and_scale_invariant(
        s in prop::collection::vec(0.0f64..10.0, 40..120),
        a in -100.0f64..100.0,
        b in 0.5f64..4.0,
    ) {
        let moved: Vec<f64> = s.iter().map(|x| a + b * x).collect();
        let k = 1.5;
        let x = detect_spikes(&s, 16, k).unwrap();
        let y = detect_spikes(&moved, 16, k).unwrap();
        // Exact comparisons can flip at ties after rounding.
        let diff = x.iter().filter(|i| !y.contains(i)).count() + y.iter().filter(|i| !x.contains(i)).count();
        prop_assert!(diff <= 1, "{:?} vs {:?}", x, y);
    }
}
