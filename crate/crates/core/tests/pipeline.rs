use patchprune::cost::{model_gflops, stage_schedule};
use patchprune::io::{decode_weights, encode_weights, load_weights, random_weights, save_weights, ImageRGB};
use patchprune::model::{embed_patches, forward, PatchOrigin};
use patchprune::{Backend, Exec, IndicatorKind, ModelConfig};
use proptest::prelude::*;

fn small(image: usize, patch: usize, stride: usize) -> ModelConfig {
    ModelConfig {
        image_size: image,
        patch_size: patch,
        stride,
        embed_dim: 12,
        qkv_dim: 12,
        heads: 3,
        depth: 3,
        mlp_ratio: 2.0,
        num_classes: 5,
        prune_block_indices: vec![1, 3],
        keep_rate: 0.6,
        indicator: IndicatorKind::Medad,
        fusion_enabled: true,
        ..ModelConfig::deit_small()
    }
}

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (
        4usize..=16,
        1usize..=4,
        prop_oneof![Just(IndicatorKind::Mean), Just(IndicatorKind::Variance), Just(IndicatorKind::Medad)],
        0.05f64..=1.0,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(p, k, indicator, r, fusion, overlap)| {
            ModelConfig {
                keep_rate: r,
                indicator,
                fusion_enabled: fusion,
                ..small(p * k + p, p, p)
            }
            .with_overlap(overlap)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_side_matches_enumeration(image in 1usize..=64, patch in 1usize..=64, stride in 1usize..=64) {
        prop_assume!(patch <= image && stride <= patch);
        let cfg = small(image, patch, stride);
        let positions = (0..image).step_by(stride).filter(|x| x + patch <= image).count();
        prop_assert_eq!(cfg.grid_side(), positions);
        prop_assert_eq!(cfg.num_patches(), positions * positions);
    }

    #[test]
    fn embedding_has_one_token_per_cell(image in 8usize..=40, patch in 2usize..=8, stride in 1usize..=8) {
        prop_assume!(patch <= image && stride <= patch);
        let cfg = small(image, patch, stride);
        let w = random_weights(&cfg, 1);
        let seq = embed_patches(&ImageRGB::random(image, 2), &cfg, &w, &Exec::default()).unwrap();
        prop_assert_eq!(seq.len(), 1 + cfg.num_patches());
        prop_assert!(!seq.has_fusion());
        prop_assert_eq!(seq.grid_token_count(), cfg.num_patches());
    }

    #[test]
    fn counted_macs_match_cost_model(cfg in arb_config(), seed in 0u64..1000) {
        let w = random_weights(&cfg, seed);
        let exec = Exec::counting();
        let out = forward(&ImageRGB::random(cfg.image_size, seed), &w, &cfg, &exec).unwrap();
        prop_assert_eq!(exec.macs(), model_gflops(&cfg).unwrap().total_macs);

        let schedule = stage_schedule(&cfg);
        prop_assert_eq!(out.stages.len(), schedule.len());
        for (st, sc) in out.stages.iter().zip(&schedule) {
            prop_assert_eq!(st.block, sc.block);
            prop_assert_eq!(st.kept_count(), sc.kept);
            prop_assert_eq!(st.tokens_after, sc.tokens_after);
            prop_assert_eq!(st.decision.fusion_token_built, sc.fusion_appended);
        }
        prop_assert_eq!(out.logits.len(), cfg.num_classes);
        prop_assert!(out.logits.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn truncated_files_are_rejected(cut in 0usize..1000) {
        let cfg = small(16, 4, 4);
        let bytes = encode_weights(&cfg, &random_weights(&cfg, 0)).unwrap();
        let cut = cut * bytes.len() / 1000;
        prop_assert!(decode_weights(&bytes[..cut]).is_err());
    }
}

#[test]
fn fusion_origin_is_retained_only_as_fusion() {
    let cfg = small(32, 4, 4);
    let w = random_weights(&cfg, 9);
    let out = forward(&ImageRGB::random(32, 9), &w, &cfg, &Exec::default()).unwrap();
    let first = &out.stages[0];
    let second = &out.stages[1];
    assert!(!first.candidate_origins.contains(&PatchOrigin::Fusion));
    assert_eq!(second.candidate_origins.last(), Some(&PatchOrigin::Fusion));
    let cells = second.retained_cells();
    assert!(cells.iter().all(|c| first.retained_cells().contains(c)));
}

#[test]
fn backends_agree_on_full_size_model() {
    let cfg = ModelConfig::deit_small();
    let w = random_weights(&cfg, 11);
    let img = ImageRGB::random(224, 11);
    let seq = forward(&img, &w, &cfg, &Exec::new(Backend::Sequential)).unwrap();
    let par = forward(&img, &w, &cfg, &Exec::new(Backend::Parallel)).unwrap();
    assert_eq!(seq, par);
    assert_eq!(
        seq.stages.iter().map(|s| s.kept_count()).collect::<Vec<_>>(),
        [137, 96, 67]
    );
}

#[test]
fn weights_survive_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vpw");
    let cfg = small(24, 6, 6);
    let w = random_weights(&cfg, 4);
    save_weights(&path, &cfg, &w).unwrap();
    let (cfg2, w2) = load_weights(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(w2.named_tensors().len(), w.named_tensors().len());
    let img = ImageRGB::random(24, 4);
    let a = forward(&img, &w, &cfg, &Exec::default()).unwrap();
    let b = forward(&img, &w2, &cfg2, &Exec::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(&path).unwrap(), encode_weights(&cfg2, &w2).unwrap());
}

#[test]
fn load_error_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing.vpw");
    let err = load_weights(&path).unwrap_err().to_string();
    assert!(err.contains("missing.vpw"), "{err}");
}
