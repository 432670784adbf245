mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spinalsum::segmenter::{segment_sentence, SegmentConfig};
use spinalsum::treebank::{derive_spines, parse_ptb, HeadTable};

#[test]
fn fixture_spines() {
    let table = HeadTable::collins();
    for fx in common::spine_fixtures() {
        let tree = parse_ptb(&fx.parse).unwrap();
        let got: Vec<String> = derive_spines(&tree, &table).iter().map(|s| s.to_string()).collect();
        let want: Vec<String> = fx.expected.iter().map(|(_, s)| s.clone()).collect();
        assert_eq!(got, want, "{}", fx.parse);
    }
}

proptest! {
    #[test]
    fn spines_partition_the_tree(seed in any::<u64>(), depth in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = common::random_tree(&mut rng, depth);
        let tree = parse_ptb(&text).unwrap();
        let table = HeadTable::collins();
        let spines = derive_spines(&tree, &table);
        prop_assert_eq!(spines.iter().map(|s| s.len()).sum::<usize>(), tree.node_count());
        let walked = common::spines_by_head_walk(&tree, &table);
        for (s, w) in spines.iter().zip(&walked) {
            prop_assert_eq!(&s.labels, w);
        }
    }

    #[test]
    fn units_tile_the_sentence(seed in any::<u64>(), depth in 1usize..7, min_tokens in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = parse_ptb(&common::random_tree(&mut rng, depth)).unwrap();
        let config = SegmentConfig { min_tokens, ..SegmentConfig::default() };
        let units = segment_sentence(&tree, &HeadTable::collins(), &config).unwrap();
        let joined: Vec<String> = units.iter().flat_map(|u| u.tokens.clone()).collect();
        prop_assert_eq!(joined, tree.tokens().iter().map(|t| t.to_string()).collect::<Vec<_>>());
        for u in &units {
            prop_assert_eq!(u.spines.len(), u.tokens.len());
        }
    }
}
