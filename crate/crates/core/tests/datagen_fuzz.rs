use ddsp_core::datagen::*;
use ddsp_core::synth::{mix, render_source, SourceParams};

#[test]
fn thousand_separation_items_satisfy_invariants() {
    let cfg = separation_frame_config();
    let choir: Vec<_> = (1..=4).map(|k| presets_for(k).unwrap()).collect();
    let hard: Vec<_> = (1..=4).map(|k| hard_presets(k).unwrap()).collect();
    for i in 0..1000 {
        let presets = if i % 2 == 0 { &choir[i % 4] } else { &hard[i % 4] };
        let item = separation_item(presets, &cfg, item_seed(2024, i)).unwrap();
        assert_eq!(item.params.len(), presets.len());
        for (p, preset) in item.params.iter().zip(presets) {
            p.validate(&cfg, SAMPLE_RATE).unwrap_or_else(|e| panic!("item {i}: {e}"));
            assert!(p.f0.iter().all(|f| (preset.f0_lo..=preset.f0_hi).contains(f)), "item {i}");
            assert!(p.reflection.iter().all(|k| k.abs() < 1.0), "item {i}");
        }
        for s in item.sources.iter().chain([&item.mixture]) {
            assert_eq!(s.len(), cfg.samples());
            assert!(s.samples().iter().all(|v| v.is_finite()), "item {i}");
        }
        if i % 50 == 0 {
            assert_eq!(mix(&item.sources).unwrap(), item.mixture);
            for (k, p) in item.params.iter().enumerate() {
                assert_eq!(render_source(p, &cfg, SAMPLE_RATE, item.noise_seeds[k]).unwrap(), item.sources[k]);
            }
        }
    }
}

#[test]
fn thousand_matching_items_satisfy_invariants() {
    let space = ParamBox::new(matching_frame_config()).unwrap();
    assert_eq!(space.dim(), 281);
    for i in 0..1000 {
        let item = matching_item(&space, item_seed(77, i)).unwrap();
        item.params.validate(&space.cfg, SAMPLE_RATE).unwrap_or_else(|e| panic!("item {i}: {e}"));
        assert!(item.normalized.iter().all(|u| (0.0..=1.0).contains(u)), "item {i}");
        let theta = item.params.flatten();
        let back = space.normalize(&theta).unwrap();
        for (a, b) in back.iter().zip(&item.normalized) {
            assert!((a - b).abs() < 1e-12, "item {i}");
        }
        assert_eq!(SourceParams::from_flat(&space.cfg, &theta).unwrap(), item.params);
        assert!(item.signal.samples().iter().all(|v| v.is_finite()));
        if i % 100 == 0 {
            assert_eq!(matching_item(&space, item_seed(77, i)).unwrap(), item);
        }
    }
}

#[test]
fn item_seeds_are_distinct() {
    let mut seeds: Vec<u64> = (0..10_000).map(|i| item_seed(5, i)).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 10_000);
}
