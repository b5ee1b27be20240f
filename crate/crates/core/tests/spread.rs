//! Members trained on different views end up further apart in weight space
//! than members that only differ in their initialisation.

use splitnet::archspec::ArchSpec;
use splitnet::cotrain::{train, TrainConfig};
use splitnet::datagen::{spirals, Transform, ViewPipeline};
use splitnet::ensemble::weight_spread;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn final_spread(seed: u64, with_views: bool) -> f64 {
    let (tr, te) = spirals(900, 3, 0.15, seed).unwrap().split_at(720).unwrap();
    let s = 3;
    let cfg = TrainConfig {
        s,
        max_epoch: 15,
        slow_epoch: 2,
        lr: 0.05,
        cot_warm_epochs: 5,
        batch_size: 32,
        base_seed: seed,
        ..TrainConfig::default()
    };
    let specs = vec![ArchSpec::mlp("m", 2, &[16, 16], 3); s as usize];
    let views: Vec<ViewPipeline> = if with_views {
        (0..s as usize)
            .map(|i| ViewPipeline::new(i, seed, vec![Transform::FeatureJitter { sigma: 0.3 }]).unwrap())
            .collect()
    } else {
        Vec::new()
    };
    let out = train::<f64>(&cfg, &specs, &views, &tr, &te).unwrap();
    let heads: Vec<Vec<f64>> = out
        .models
        .iter()
        .map(|m| {
            let w = m.params().iter().rev().find(|p| p.decay).expect("final weight");
            w.value.data().to_vec()
        })
        .collect();
    weight_spread(&heads).unwrap().std
}

#[test]
fn views_do_not_shrink_weight_spread() {
    let seeds = 0..5;
    let with = median(seeds.clone().map(|s| final_spread(s, true)).collect());
    let without = median(seeds.map(|s| final_spread(s, false)).collect());
    assert!(with >= without, "median spread with views {with} < without {without}");
}
