//! Layer heatmaps over activations of two independently seeded encoders.

use dilution_core::cka::{self, ActivationMatrix, CkaOptions, PoolMode};
use dilution_core::geometry::{CropPlan, Profile};
use dilution_core::swinsim::{Encoder, EncoderConfig, NullSink};
use dilution_core::synth::{generate, plan_cohort, CohortSpec, ZDistribution};
use dilution_core::volumes::preprocess;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn block_layers(seed: u64) -> Vec<ActivationMatrix> {
    let spec = CohortSpec {
        n: 4,
        in_plane: 64,
        z_distribution: ZDistribution::Uniform { lo: 40, hi: 64 },
        seed: 12,
        ..CohortSpec::default()
    };
    let plan = CropPlan::new([64; 3]).unwrap();
    let enc = Encoder::new(EncoderConfig::for_profile(Profile::Smit, seed).with_embed_dim(12)).unwrap();
    let mut per_layer: Vec<Vec<ActivationMatrix>> = Vec::new();
    for scan in plan_cohort(&spec).unwrap() {
        let (v, _) = generate(&scan.phantom).unwrap();
        let (c, ind) = plan.apply(&preprocess(&v).unwrap());
        let (_, blocks) = enc.forward_blocks(&c, &ind, &mut NullSink).unwrap();
        per_layer.resize(blocks.len(), Vec::new());
        for (i, b) in blocks.iter().enumerate() {
            per_layer[i].push(cka::pooled_activation(format!("block{i}"), b, PoolMode::PerToken).unwrap());
        }
    }
    per_layer
        .iter()
        .enumerate()
        .map(|(i, p)| ActivationMatrix::stack(format!("block{i}"), p).unwrap())
        .collect()
}

#[test]
fn early_blocks_agree_more_than_late_blocks_across_seeds() {
    let a = block_layers(1);
    let b = block_layers(2);
    let h = cka::layer_heatmap(&a, &b, &CkaOptions::default()).unwrap();
    let d = h.diagonal.unwrap();
    assert_eq!(d.len(), 8);
    let early = (d[0] + d[1]) / 2.0;
    let late = (d[6] + d[7]) / 2.0;
    assert!(early > late, "diagonal {d:?}");
    for (x, y) in d.iter().zip(h.drift.unwrap()) {
        assert!((x + y - 1.0).abs() < 1e-12);
    }

    // shuffling the sample order of one side destroys the correspondence
    let mut order: Vec<usize> = (0..a[0].n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let shuffled: Vec<ActivationMatrix> = b
        .iter()
        .map(|l| {
            let values = order.iter().flat_map(|&i| l.row(i).to_vec()).collect();
            ActivationMatrix::new(l.layer_id.clone(), l.n, l.d, values).unwrap()
        })
        .collect();
    let h = cka::layer_heatmap(&a, &shuffled, &CkaOptions::default()).unwrap();
    for v in h.diagonal.unwrap() {
        assert!(v.abs() < 0.1, "shuffled CKA {v}");
    }
}

#[test]
fn mismatched_layer_counts_give_grid_without_diagonal() {
    let a = block_layers(1);
    let h = cka::layer_heatmap(&a, &a[..5], &CkaOptions::default()).unwrap();
    assert_eq!(h.values.len(), 8);
    assert!(h.values.iter().all(|r| r.len() == 5));
    assert!(h.diagonal.is_none() && h.drift.is_none());
    assert_eq!(h.warnings.len(), 1);
}

#[test]
fn parallel_and_sequential_heatmaps_are_identical() {
    let a = block_layers(1);
    let b = block_layers(3);
    let par = cka::layer_heatmap(&a, &b, &CkaOptions::default()).unwrap();
    let seq = cka::layer_heatmap(
        &a,
        &b,
        &CkaOptions {
            execution: dilution_core::Execution::Sequential,
            ..CkaOptions::default()
        },
    )
    .unwrap();
    assert_eq!(par, seq);
}
