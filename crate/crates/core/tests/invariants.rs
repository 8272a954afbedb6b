use mtmixatt_core::config::{GroupingMode, MixingInit, ModelConfig, NormVariant, ScenarioVariant};
use mtmixatt_core::data::{generate, SyntheticConfig};
use mtmixatt_core::heads::Heads;
use mtmixatt_core::model::Model;
use mtmixatt_core::params::ParamStore;
use mtmixatt_core::rng::SeededRng;
use mtmixatt_core::topk::topk_indices;
use proptest::prelude::*;

const GROUPINGS: [GroupingMode; 3] = [GroupingMode::Random, GroupingMode::AutoToken, GroupingMode::Manual];
const MIXINGS: [MixingInit; 4] = [MixingInit::FixedTranspose, MixingInit::Zeros, MixingInit::Orthogonal, MixingInit::Ones];
const NORMS: [NormVariant; 4] = [NormVariant::PreNorm, NormVariant::PostNorm, NormVariant::PreNormL, NormVariant::PostNormR];

fn variant_config(g: usize, mix: usize, norm: usize, v: usize, layers: usize, shared: usize, split: usize, rank: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.grouping = GROUPINGS[g];
    if cfg.grouping == GroupingMode::Manual {
        cfg.manual_groups = Some(vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
    }
    cfg.mixing = MIXINGS[mix];
    cfg.norm = NORMS[norm];
    cfg.scenario_moe = ScenarioVariant::ALL[v].preset(10.0);
    cfg.layers = layers;
    cfg.moe.shared_experts = shared;
    cfg.moe.split = split;
    cfg.adapter_rank = rank;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_count_matches_built_model(
        g in 0usize..3, mix in 0usize..4, norm in 0usize..4, v in 0usize..6,
        layers in 1usize..4, shared in 0usize..3, split in 1usize..3, rank in 1usize..4,
    ) {
        let cfg = variant_config(g, mix, norm, v, layers, shared, split, rank);
        prop_assume!(cfg.validate().is_ok());
        let model = Model::new(&cfg, 1).unwrap();
        prop_assert_eq!(model.param_count(), cfg.count_params());
    }

    #[test]
    fn adapters_are_a_no_op_at_init(seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let heads = Heads::new(&mut store, 12, 8, 4, 2, &mut rng);
        let repr: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let main = heads.predict(&store, &repr, 0).unwrap();
        for c in 1..4 {
            let p = heads.predict(&store, &repr, c).unwrap();
            prop_assert_eq!(p.ctr.to_bits(), main.ctr.to_bits());
            prop_assert_eq!(p.ctcvr.to_bits(), main.ctcvr.to_bits());
        }
    }

    #[test]
    fn topk_agrees_with_full_sort(raw in proptest::collection::vec(-4i8..5, 1..40), k_frac in 0.0f64..1.0) {
        // Half-steps and signed zeros make ties common.
        let values: Vec<f64> = raw.iter().map(|&r| if r == 4 { -0.0 } else { r as f64 / 2.0 }).collect();
        let k = ((values.len() as f64 * k_frac) as usize).min(values.len());
        let mut sorted: Vec<usize> = (0..values.len()).collect();
        sorted.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
        sorted.truncate(k);
        prop_assert_eq!(topk_indices(&values, k).unwrap(), sorted);
    }

    #[test]
    fn generated_labels_are_consistent(seed in 0u64..50) {
        let cfg = SyntheticConfig::desk(seed);
        let a = generate(&cfg, 64).unwrap();
        prop_assert!(a.samples.iter().all(|s| s.conversion <= s.click && s.scenario < cfg.scenarios));
        prop_assert_eq!(a, generate(&cfg, 64).unwrap());
    }
}

#[test]
fn expert_compute_is_constant_under_splitting() {
    let base = ModelConfig::desk();
    let macs: Vec<usize> = [1, 2, 4]
        .iter()
        .map(|&m| {
            let mut cfg = base.clone();
            cfg.moe.split = m;
            cfg.validate().unwrap();
            cfg.expert_macs_per_token()
        })
        .collect();
    assert!(macs.windows(2).all(|w| w[0] == w[1]), "{macs:?}");
}

#[test]
fn size_ladder_grows_and_production_presets_are_counted() {
    let counts: Vec<usize> = ModelConfig::size_ladder().iter().map(|(_, c)| c.count_params()).collect();
    assert_eq!(counts.len(), 4);
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    let small = ModelConfig::production_15m().count_params();
    assert!((1_000_000..100_000_000).contains(&small), "{small}");
    assert!(ModelConfig::production_1b().count_params() > small);
}
