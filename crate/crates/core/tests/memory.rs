mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use aec::encoder::CanonicalKey;
use aec::gridworld::Action;
use aec::memory::{EpisodeBuffer, EpisodicMemory, MemoryError, MemoryMetadata, SharedMemory};
use common::gen;
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Q = Ratio<i128>;

fn keys(rng: &mut ChaCha8Rng, n: usize) -> Vec<CanonicalKey> {
    (0..n).map(|_| gen::key(rng)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn commits_never_lower_values(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ks = keys(&mut rng, 6);
        let mut m = EpisodicMemory::new(MemoryMetadata::new("t", 0.9));
        for _ in 0..n {
            let before = m.value_table();
            let b = gen::buffer(&mut rng, &ks, 30);
            m.commit(&b, 0.9).unwrap();
            let after = m.value_table();
            for (k, v) in &before {
                prop_assert!(after[k] >= *v);
            }
            for (k, a, r) in b.compute_returns(0.9).unwrap() {
                prop_assert!(m.lookup(&k).unwrap().values[&a] >= r);
            }
            let bytes = m.to_jsonl();
            let again = m.commit(&b, 0.9).unwrap();
            prop_assert_eq!(again.inserts + again.raises, 0);
            prop_assert_eq!(m.to_jsonl(), bytes);
        }
    }

    #[test]
    fn merge_dominates_both_sources(a in any::<u64>(), b in any::<u64>()) {
        let ma = gen::memory(&mut ChaCha8Rng::seed_from_u64(a), 80);
        let mb = gen::memory(&mut ChaCha8Rng::seed_from_u64(b), 80);
        let mut ab = ma.clone();
        ab.import_foreign(&mb).unwrap();
        let mut ba = mb.clone();
        ba.import_foreign(&ma).unwrap();
        let t = ab.value_table();
        prop_assert_eq!(&t, &ba.value_table());
        for src in [&ma, &mb] {
            for (k, v) in src.value_table() {
                prop_assert!(t[&k] >= v);
            }
        }
    }
}

fn forward_returns(rewards: &[Q], gamma: Q) -> Vec<Q> {
    (0..rewards.len())
        .map(|t| {
            let mut g = Q::from_integer(1);
            let mut sum = Q::from_integer(0);
            for r in &rewards[t..] {
                sum += *r * g;
                g *= gamma;
            }
            sum
        })
        .collect()
}

#[test]
fn rational_returns_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = gen::key(&mut rng);
    for _ in 0..300 {
        let gamma = [Q::new(1, 2), Q::new(9, 10), Q::from_integer(1)][rng.gen_range(0..3)];
        let len = rng.gen_range(1..=20);
        let rewards: Vec<Q> = (0..len).map(|_| Q::new(rng.gen_range(0..4), 4)).collect();
        let mut b = EpisodeBuffer::<Q>::new();
        for r in &rewards {
            b.record(k.clone(), Action::GoForward, *r).unwrap();
        }
        b.seal();
        let got: Vec<Q> = b.compute_returns(gamma).unwrap().into_iter().map(|x| x.2).collect();
        assert_eq!(got, forward_returns(&rewards, gamma));
    }
}

#[test]
fn rational_memory_keeps_exact_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let k = gen::key(&mut rng);
    let mut m = EpisodicMemory::<Q>::new(MemoryMetadata::new("t", Q::from_integer(1)));
    let mut best = Q::from_integer(0);
    for _ in 0..200 {
        let v = Q::new(rng.gen_range(0..1000), 997);
        m.update(&k, Action::Toggle, v);
        best = best.max(v);
        assert_eq!(m.best_action(&k), Some((Action::Toggle, best)));
    }
}

#[test]
fn lookup_and_best_action_match_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let m = gen::memory(&mut rng, 60);
        let table = m.value_table();
        for _ in 0..20 {
            let probe = gen::key(&mut rng);
            let scan: BTreeMap<Action, f64> =
                table.iter().filter(|((k, _), _)| *k == probe).map(|((_, a), v)| (*a, *v)).collect();
            match m.lookup(&probe) {
                None => assert!(scan.is_empty()),
                Some(e) => assert_eq!(e.values, scan),
            }
            let mut want: Option<(Action, f64)> = None;
            for a in Action::ALL {
                if let Some(&v) = scan.get(&a) {
                    if want.is_none_or(|(_, w)| v > w) {
                        want = Some((a, v));
                    }
                }
            }
            assert_eq!(m.best_action(&probe), want);
        }
    }
}

#[test]
fn ten_thousand_entries_roundtrip_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m = EpisodicMemory::new(MemoryMetadata::new("FindObj", 0.99));
    while m.len() < 10_000 {
        // Long random keys so 10k distinct entries exist.
        let k = CanonicalKey::parse(&format!("{};x={}", gen::key(&mut rng).as_str(), rng.gen::<u32>()));
        let k = k.unwrap_or_else(|_| gen::key(&mut rng));
        m.update(&k, gen::action(&mut rng), rng.gen::<f64>());
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    m.save(&p).unwrap();
    let loaded = EpisodicMemory::<f64>::load(&p).unwrap();
    assert_eq!(loaded.value_table(), m.value_table());
    assert_eq!(loaded.to_jsonl(), m.to_jsonl());
    assert_eq!(std::fs::read_to_string(&p).unwrap(), m.to_jsonl());
}

#[test]
fn truncated_file_names_last_valid_line() {
    let m = gen::memory(&mut ChaCha8Rng::seed_from_u64(9), 50);
    let text = m.to_jsonl();
    let lines: Vec<&str> = text.lines().collect();
    // Cut in the middle of the fifth line.
    let mut cut = lines[..4].join("\n");
    cut.push('\n');
    cut.push_str(&lines[4][..lines[4].len() / 2]);
    let err = EpisodicMemory::<f64>::from_jsonl(&cut, "cut.jsonl").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, MemoryError::Load { line: 5, .. }), "{msg}");
    assert!(msg.contains("last valid line 4"), "{msg}");
    // Dropping whole lines is caught by the header count.
    let short = lines[..4].join("\n") + "\n";
    let msg = EpisodicMemory::<f64>::from_jsonl(&short, "short.jsonl").unwrap_err().to_string();
    assert!(msg.contains("truncated"), "{msg}");
}

#[test]
fn empty_memory_roundtrips_with_metadata() {
    let m = EpisodicMemory::<f64>::new(MemoryMetadata::new("UnlockLocal", 0.5));
    let back = EpisodicMemory::<f64>::from_jsonl(&m.to_jsonl(), "x").unwrap();
    assert!(back.is_empty());
    assert_eq!(back.metadata(), m.metadata());
}

#[test]
fn foreign_canonical_form_rejected() {
    let mut a = EpisodicMemory::<f64>::new(MemoryMetadata::new("GoToLocal", 0.99));
    let mut meta = MemoryMetadata::new("PickupLocal", 0.99);
    meta.canonical_form += 1;
    let b = EpisodicMemory::<f64>::new(meta);
    assert!(matches!(a.import_foreign(&b), Err(MemoryError::CanonicalForm { .. })));
}

#[test]
fn import_into_empty_copies_values() {
    let src = gen::memory(&mut ChaCha8Rng::seed_from_u64(10), 100);
    let mut dst = EpisodicMemory::<f64>::new(MemoryMetadata::new("GoToLocal", 0.99));
    dst.import_foreign(&src).unwrap();
    assert_eq!(dst.value_table(), src.value_table());
    assert_eq!(dst.metadata().imported_from, vec!["GoToLocal".to_string()]);
}

#[test]
fn readers_never_observe_partial_commits() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ks = keys(&mut rng, 40);
    let shared = SharedMemory::new(EpisodicMemory::<f64>::new(MemoryMetadata::new("t", 1.0)));
    // Every buffer writes the same value to all of its pairs, so a reader
    // sees either none or all of them at that value or above.
    let buffers: Vec<EpisodeBuffer<f64>> = (0..200)
        .map(|i| {
            let mut b = EpisodeBuffer::new();
            for k in &ks {
                b.record(k.clone(), Action::ALL[i % 6], 0.0).unwrap();
            }
            b.record(ks[0].clone(), Action::ALL[i % 6], i as f64).unwrap();
            b.seal();
            b
        })
        .collect();
    let done = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..3)
        .map(|_| {
            let s = shared.clone();
            let d = done.clone();
            let ks = ks.clone();
            std::thread::spawn(move || {
                let mut reads = 0;
                while !d.load(Ordering::SeqCst) || reads == 0 {
                    s.with(|m| {
                        for a in Action::ALL {
                            let vals: Vec<Option<f64>> =
                                ks.iter().map(|k| m.lookup(k).and_then(|e| e.values.get(&a).copied())).collect();
                            let present = vals.iter().filter(|v| v.is_some()).count();
                            assert!(present == 0 || present == ks.len());
                        }
                    });
                    reads += 1;
                }
            })
        })
        .collect();
    for b in &buffers {
        shared.commit(b, 1.0).unwrap();
    }
    done.store(true, Ordering::SeqCst);
    for r in readers {
        r.join().unwrap();
    }
    assert_eq!(shared.snapshot().pair_count(), ks.len() * 6);
}
