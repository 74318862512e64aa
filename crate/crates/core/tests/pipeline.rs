use featgraft::io::encode_png;
use featgraft::matching::DEFAULT_OMEGA;
use featgraft::pipeline::{
    match_viz, run_pipeline, run_pipeline_with, scenarios, GraftConfig, RunOptions, Seeds, Variant,
};

fn config(seed: u64, steps: usize) -> GraftConfig {
    GraftConfig {
        steps,
        seeds: Seeds::derive(seed),
        ..GraftConfig::default()
    }
}

#[test]
fn identical_configs_reproduce_bit_for_bit() {
    let (scene, reference) = scenarios::translated_subject(21);
    let refs = [reference];
    let c = config(21, 8);
    let a = run_pipeline(&c, &scene, &refs).unwrap();
    let b = run_pipeline(&c, &scene, &refs).unwrap();
    assert_eq!(encode_png(&a.image).unwrap(), encode_png(&b.image).unwrap());
    assert_eq!(a.report.retained_popcounts, b.report.retained_popcounts);
    assert_eq!(a.report.counts, b.report.counts);

    let other = GraftConfig {
        seeds: Seeds {
            dropout: c.seeds.dropout ^ 1,
            ..c.seeds
        },
        ..c
    };
    let d = run_pipeline(&other, &scene, &refs).unwrap();
    assert_ne!(a.report.retained_popcounts, d.report.retained_popcounts);
}

#[test]
fn variant_lattice_shares_inputs() {
    let (scene, reference) = scenarios::translated_subject(22);
    let refs = [reference];
    let run = |variant| {
        let c = GraftConfig {
            variant,
            ..config(22, 6)
        };
        run_pipeline(&c, &scene, &refs).unwrap()
    };
    let full = run(Variant::Full);
    let no_match = run(Variant::NoMatch);
    let no_graft = run(Variant::NoGraft);
    let no_init = run(Variant::NoInit);
    let replace = run(Variant::Replace);

    // Same collage, same inverted noise, same reference trajectory.
    for other in [&no_match, &no_graft, &replace] {
        assert_eq!(other.init, full.init);
        assert_eq!(other.collage.image, full.collage.image);
        assert_eq!(other.trajectory, full.trajectory);
    }
    // No-init changes the noise and nothing upstream of it.
    assert_ne!(no_init.init, full.init);
    assert_eq!(no_init.trajectory, full.trajectory);
    assert!(no_graft.report.retained_popcounts.iter().all(|&c| c == 0));
    assert!(no_match.report.counts.iter().all(|c| c.final_mask == c.pre));
    assert_ne!(full.image, no_graft.image);
}

#[test]
fn retained_never_exceeds_pre_mask() {
    for seed in 0..4 {
        let (scene, reference) = scenarios::translated_subject(seed);
        let refs = [reference];
        for variant in Variant::ALL {
            let c = GraftConfig {
                variant,
                omega: 0.0,
                ..config(seed, 4)
            };
            let r = run_pipeline(&c, &scene, &refs).unwrap().report;
            assert!(r.retained_popcounts.iter().all(|&k| k <= r.pre_mask_popcount));
            assert!(r.counts.iter().all(|k| k.sim <= k.pre && k.consi <= k.pre && k.final_mask <= k.sim.min(k.consi)));
        }
    }
}

#[test]
fn dropout_attenuates_by_one_minus_omega_t() {
    let steps = 5;
    let (scene, reference) = scenarios::translated_subject(30);
    let refs = [reference];
    // Per step: kept, expected kept, variance.
    let mut stats = vec![(0.0f64, 0.0f64, 0.0f64); steps];
    let mut keys = vec![0.0f32; steps];
    for seed in 0..50u64 {
        let mut c = config(30, steps);
        c.seeds.dropout = seed;
        let report = run_pipeline(&c, &scene, &refs).unwrap().report;
        for k in &report.counts {
            let p = 1.0 - (DEFAULT_OMEGA * k.t) as f64;
            let s = &mut stats[k.step];
            s.0 += k.retained as f64;
            s.1 += k.final_mask as f64 * p;
            s.2 += k.final_mask as f64 * p * (1.0 - p);
            keys[k.step] = k.t;
        }
    }
    for (step, (kept, expected, var)) in stats.into_iter().enumerate() {
        assert!(
            (kept - expected).abs() <= 3.0 * var.sqrt(),
            "step {step} (t = {}): kept {kept}, expected {expected:.1} ± {:.1}",
            keys[step],
            3.0 * var.sqrt()
        );
    }
}

#[test]
fn capture_feeds_match_viz() {
    let (scene, reference) = scenarios::translated_subject(5);
    let options = RunOptions {
        capture: Some((3, 1)),
        ..RunOptions::default()
    };
    let out = run_pipeline_with(&config(5, 6), &scene, &[reference], &options).unwrap();
    let snap = out.snapshot.expect("capture point inside the run");
    assert_eq!((snap.at.step, snap.at.block), (3, 1));
    let svg = match_viz(&out.collage.image, &out.image, &snap.matching, &snap.retained).unwrap();
    assert_eq!(svg.matches("class=\"match\"").count(), snap.retained.popcount());
}

#[test]
fn missing_subject_is_a_stage_error() {
    let (scene, mut reference) = scenarios::translated_subject(6);
    reference.subject = "ghost".into();
    let err = run_pipeline(&config(6, 2), &scene, &[reference]).err().unwrap();
    let text = err.to_string();
    assert!(text.contains("ground") && text.contains("ghost"), "{text}");
}
