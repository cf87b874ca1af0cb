use std::collections::HashSet;

use dive_core::corpus::{detokenize, mix_cluster_calibration, sample_calibration, tokenize, CorpusSpec, DOMAINS};
use dive_core::DetRng;
use proptest::prelude::*;

const TRAIN: usize = 256 * 1024;
const EVAL: usize = 32 * 1024;

fn histogram(bytes: &[u8]) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &b in bytes {
        h[b as usize] += 1.0;
    }
    h
}

/// Pearson chi-square statistic of a 2 x 256 contingency table.
fn chi_square(a: &[u8], b: &[u8]) -> f64 {
    let (ha, hb) = (histogram(a), histogram(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut stat = 0.0;
    for c in 0..256 {
        let tot = ha[c] + hb[c];
        if tot == 0.0 {
            continue;
        }
        let (ea, eb) = (tot * na / (na + nb), tot * nb / (na + nb));
        stat += (ha[c] - ea).powi(2) / ea + (hb[c] - eb).powi(2) / eb;
    }
    stat
}

fn stream(domain: &str, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let s = CorpusSpec::new(domain, seed, TRAIN, EVAL).unwrap();
    (s.train_stream(), s.eval_stream())
}

#[test]
fn domains_have_distinguishable_byte_statistics() {
    let streams: Vec<Vec<u8>> = DOMAINS.iter().map(|d| stream(d, 5).1).collect();
    for (i, a) in streams.iter().enumerate() {
        let (x, y) = a.split_at(a.len() / 2);
        let within = chi_square(x, y);
        for (j, b) in streams.iter().enumerate() {
            // Word shuffling keeps the byte histogram of prose by design.
            if i == j || (DOMAINS[i], DOMAINS[j]) == ("prose", "shuffle") || (DOMAINS[i], DOMAINS[j]) == ("shuffle", "prose") {
                continue;
            }
            let across = chi_square(a, b);
            assert!(across > 10.0 * within.max(300.0), "{} vs {}: {across} (within {within})", DOMAINS[i], DOMAINS[j]);
        }
    }
}

#[test]
fn arithmetic_is_digit_heavy() {
    let digits = |b: &[u8]| b.iter().filter(|c| c.is_ascii_digit()).count() as f64 / b.len() as f64;
    let arith = digits(&stream("arith", 1).1);
    let prose = digits(&stream("prose", 1).1);
    assert!(arith >= 10.0 * prose.max(1e-3), "arith {arith} prose {prose}");
}

#[test]
fn eval_windows_never_appear_in_train() {
    for seed in 0..10 {
        for d in DOMAINS {
            let (train, eval) = stream(d, seed);
            let seen: HashSet<&[u8]> = train.windows(64).collect();
            let shared = eval.windows(64).filter(|w| seen.contains(w)).count();
            assert_eq!(shared, 0, "{d} seed {seed}: {shared} shared windows");
        }
    }
}

#[test]
fn different_seeds_give_different_text() {
    for d in DOMAINS {
        let (a, b) = (stream(d, 10).1, stream(d, 11).1);
        let rows = a.len() / 64;
        let differ = a.chunks(64).zip(b.chunks(64)).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * rows as f64, "{d}: {differ}/{rows}");
    }
}

#[test]
fn generation_is_deterministic() {
    for d in DOMAINS {
        assert_eq!(stream(d, 4), stream(d, 4));
    }
}

#[test]
fn random_bytes_survive_tokenization() {
    let mut rng = DetRng::new(9);
    let bytes: Vec<u8> = (0..1 << 20).map(|_| rng.below(256) as u8).collect();
    assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn mixing_shares_differ_by_at_most_one(m in 1usize..6, total in 0usize..40, seed in any::<u64>()) {
        let members: Vec<CorpusSpec> = DOMAINS[..m].iter().map(|d| CorpusSpec::new(d, seed, 4096, 256).unwrap()).collect();
        let batch = mix_cluster_calibration(&members, total, 16, seed).unwrap();
        prop_assert_eq!(batch.rows(), total);
        let counts: Vec<usize> = (0..m).map(|i| batch.domains.iter().filter(|&&d| d == members[i].domain.index()).count()).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(mix_cluster_calibration(&members, total, 16, seed).unwrap(), batch);
    }

    #[test]
    fn one_member_mix_is_plain_sampling(total in 1usize..30, seed in any::<u64>(), d in 0usize..6) {
        let spec = CorpusSpec::new(DOMAINS[d], seed, 4096, 256).unwrap();
        let mixed = mix_cluster_calibration(std::slice::from_ref(&spec), total, 16, seed).unwrap();
        prop_assert_eq!(mixed, sample_calibration(&spec, total, 16, seed).unwrap());
    }
}
