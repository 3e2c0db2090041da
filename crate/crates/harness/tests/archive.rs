use cpl_harness::archive::{expected_len, Archive, ArchiveFormat, Record, HEADER_LEN};
use cpl_harness::HarnessError;
use proptest::prelude::*;

fn archive_strategy(finite: bool) -> impl Strategy<Value = Archive> {
    (1u32..24, prop::collection::btree_set(any::<u64>(), 0..24)).prop_flat_map(move |(dim, ids)| {
        let n = ids.len();
        let value = if finite {
            (-1e30f32..1e30f32).boxed()
        } else {
            any::<u32>().prop_map(f32::from_bits).boxed()
        };
        (
            Just(dim),
            Just(ids),
            prop::collection::vec(any::<u32>(), n),
            prop::collection::vec(prop::collection::vec(value, dim as usize), n),
        )
            .prop_map(|(dim, ids, labels, feats)| {
                let records = ids
                    .into_iter()
                    .zip(labels)
                    .zip(feats)
                    .map(|((id, label), feature)| Record { id, label, feature })
                    .collect();
                Archive::new(dim, records).unwrap()
            })
    })
}

fn bits(a: &Archive) -> Vec<(u64, u32, Vec<u32>)> {
    a.records
        .iter()
        .map(|r| (r.id, r.label, r.feature.iter().map(|x| x.to_bits()).collect()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn binary_round_trip_is_bit_exact(a in archive_strategy(false)) {
        let bytes = a.to_bytes();
        prop_assert_eq!(bytes.len() as u64, expected_len(a.records.len() as u64, a.dim));
        prop_assert_eq!(&bytes[..4], b"CPLE");
        let back = Archive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.dim, a.dim);
        prop_assert_eq!(bits(&back), bits(&a));
    }

    #[test]
    fn jsonl_round_trip(a in archive_strategy(true)) {
        let back = Archive::from_jsonl(a.to_jsonl().as_bytes()).unwrap();
        prop_assert_eq!(bits(&back), bits(&a));
    }
}

#[test]
fn length_formula_matches_layout() {
    // header: 4 magic + 4 version + 4 dim + 8 count; record: 8 id + 4 label + 4 per value
    for (count, dim) in [(0u64, 1u32), (1, 1), (3, 32), (128, 512), (7, 5)] {
        assert_eq!(expected_len(count, dim), 20 + count * (8 + 4 + 4 * dim as u64));
        let a = Archive::new(
            dim,
            (0..count)
                .map(|i| Record {
                    id: i,
                    label: 0,
                    feature: vec![0.0; dim as usize],
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(a.to_bytes().len() as u64, expected_len(count, dim));
    }
    assert_eq!(HEADER_LEN, 20);
}

#[test]
fn header_fields_are_little_endian() {
    let a = Archive::new(
        3,
        vec![Record {
            id: 0x0102030405060708,
            label: 7,
            feature: vec![1.0, -2.0, 0.5],
        }],
    )
    .unwrap();
    let b = a.to_bytes();
    assert_eq!(&b[4..8], &1u32.to_le_bytes());
    assert_eq!(&b[8..12], &3u32.to_le_bytes());
    assert_eq!(&b[12..20], &1u64.to_le_bytes());
    assert_eq!(&b[20..28], &[8, 7, 6, 5, 4, 3, 2, 1]);
    assert_eq!(&b[28..32], &7u32.to_le_bytes());
    assert_eq!(&b[32..36], &1.0f32.to_le_bytes());
}

#[test]
fn every_truncation_is_rejected_with_lengths() {
    let a = Archive::new(
        2,
        (0..3)
            .map(|i| Record {
                id: i,
                label: 1,
                feature: vec![i as f32, 1.0],
            })
            .collect(),
    )
    .unwrap();
    let bytes = a.to_bytes();
    for cut in 0..bytes.len() {
        let err = Archive::from_bytes(&bytes[..cut]).unwrap_err();
        assert_eq!(err.exit_code(), 3, "cut {cut}: {err}");
        if cut >= HEADER_LEN as usize {
            let msg = err.to_string();
            assert!(msg.contains(&format!("expected length {}", bytes.len())), "{msg}");
            assert!(msg.contains(&format!("found {cut}")), "{msg}");
        }
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(Archive::from_bytes(&long).is_err());
}

#[test]
fn wrong_version_is_rejected() {
    let mut bytes = Archive::new(1, vec![]).unwrap().to_bytes();
    bytes[4] = 2;
    assert!(Archive::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
}

#[test]
fn files_round_trip_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let a = Archive::new(
        4,
        vec![
            Record { id: 10, label: 2, feature: vec![0.1, 0.2, 0.3, 0.4] },
            Record { id: 11, label: 0, feature: vec![-1.0, 1e-8, 3e8, 0.0] },
        ],
    )
    .unwrap();
    for (name, format) in [("a.cple", ArchiveFormat::Binary), ("a.jsonl", ArchiveFormat::Jsonl)] {
        let path = dir.path().join(name);
        a.write(&path, format).unwrap();
        assert_eq!(Archive::read(&path).unwrap(), a);
    }
}

#[test]
fn archive_dim_must_match_configuration() {
    let a = Archive::new(4, vec![Record { id: 0, label: 0, feature: vec![1.0; 4] }]).unwrap();
    assert!(matches!(a.features(Some(8)), Err(HarnessError::Data(_))));
    let f = a.features(Some(4)).unwrap();
    assert_eq!(f.len(), 1);
}

#[test]
fn jsonl_count_mismatch_is_rejected() {
    let a = Archive::new(1, vec![Record { id: 0, label: 0, feature: vec![1.0] }]).unwrap();
    let text = a.to_jsonl().replace("\"count\":1", "\"count\":2");
    assert!(Archive::from_jsonl(text.as_bytes()).is_err());
}
