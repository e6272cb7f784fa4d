use paed_core::labelspace::{
    class_count, decode_group, decode_predictions, encode_group, encode_targets, FrameLabelMatrix,
    TaskDecomposition,
};
use proptest::prelude::*;

#[test]
fn group_codec_is_a_bijection_up_to_eight_members() {
    for size in 1..=8usize {
        // scattered, unsorted member indices
        let group: Vec<usize> = (0..size).map(|i| (i * 5 + 3) % 17).collect();
        for idx in 0..(1u32 << size) {
            let members = decode_group(idx, &group).unwrap();
            assert_eq!(encode_group(&members, &group), idx);
        }
    }
}

fn partition() -> impl Strategy<Value = TaskDecomposition> {
    (1usize..=16)
        .prop_flat_map(|y| {
            (
                Just(y),
                Just((0..y).collect::<Vec<_>>()).prop_shuffle(),
                1usize..=y,
            )
        })
        .prop_flat_map(|(y, order, n)| {
            (
                Just(y),
                Just(order),
                proptest::sample::subsequence((1..y).collect::<Vec<_>>(), n.min(y) - 1),
            )
        })
        .prop_map(|(y, order, mut cuts)| {
            cuts.sort_unstable();
            let mut groups = Vec::new();
            let mut start = 0;
            for c in cuts.into_iter().chain(std::iter::once(y)) {
                groups.push(order[start..c].to_vec());
                start = c;
            }
            TaskDecomposition::new(groups, y).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn targets_round_trip(decomp in partition(), seed in any::<u64>(), frames in 1usize..40) {
        let y = decomp.categories();
        let data: Vec<u8> = (0..frames * y).map(|i| ((seed.rotate_left(i as u32 % 64) ^ i as u64) & 1) as u8).collect();
        let labels = FrameLabelMatrix::new(frames, y, data).unwrap();
        let targets = encode_targets(&labels, &decomp).unwrap();
        prop_assert_eq!(decode_predictions(&targets, &decomp).unwrap(), labels);
    }

    #[test]
    fn partitions_cover_categories_and_counts_multiply(decomp in partition()) {
        let total: usize = decomp.groups().iter().map(Vec::len).sum();
        prop_assert_eq!(total, decomp.categories());
        let log2: u32 = class_count(&decomp).iter().map(|c| c.trailing_zeros()).sum();
        prop_assert_eq!(log2 as usize, decomp.categories());
    }
}
