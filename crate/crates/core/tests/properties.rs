mod common;

use common::checks;
use common::{random_system, GenConfig};
use proptest::prelude::*;
use spalift::parser::{parse_system, serialize_system};
use spalift::semantics::{flatten, FlattenOptions};

fn flat_of(sys: &spalift::model::SpaSystem) -> spalift::semantics::FlatTS {
    flatten(sys, FlattenOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn neighbourhood_classes_match_definition(seed in any::<u64>()) {
        let sys = random_system(seed, &GenConfig::default());
        let mut v = Vec::new();
        checks::neighbourhoods(&sys, &mut v);
        prop_assert!(v.is_empty(), "{:?}", v);
    }

    #[test]
    fn sets_match_derivations(seed in any::<u64>()) {
        let sys = random_system(seed, &GenConfig::default());
        let mut v = Vec::new();
        checks::transition_sets_agree(&sys, &flat_of(&sys), &mut v);
        prop_assert!(v.is_empty(), "{:?}", v);
    }

    #[test]
    fn selfloop_free_participation_is_movement(seed in any::<u64>()) {
        let cfg = GenConfig { selfloop_probability: 0.0, ..GenConfig::default() };
        let sys = random_system(seed, &cfg);
        let mut v = Vec::new();
        checks::transition_sets_agree(&sys, &flat_of(&sys), &mut v);
        prop_assert!(v.is_empty(), "{:?}", v);
    }

    #[test]
    fn trysync_preserves_relation(seed in any::<u64>()) {
        let sys = random_system(seed, &GenConfig::default());
        let mut v = Vec::new();
        checks::trysync_preserves(&sys, &flat_of(&sys), &mut v);
        prop_assert!(v.is_empty(), "{:?}", v);
    }

    #[test]
    fn identity_lift(seed in any::<u64>()) {
        let sys = random_system(seed, &GenConfig::default());
        let mut v = Vec::new();
        checks::identity_lift(&sys, &flat_of(&sys), &mut v);
        prop_assert!(v.is_empty(), "{:?}", v);
    }

    #[test]
    fn model_text_round_trip(seed in any::<u64>()) {
        let sys = random_system(seed, &GenConfig::default());
        let text = serialize_system(&sys);
        let back = parse_system(&text).unwrap();
        prop_assert_eq!(&back, &sys);
        prop_assert_eq!(serialize_system(&back), text);
    }
}
