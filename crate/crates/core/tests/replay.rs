use ndarray::Array4;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use mkd_core::replay::ReplayBuffer;
use mkd_core::seed::{self, Stream};

fn chi2_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(chi2)
}

fn filled(capacity: usize, n: usize) -> ReplayBuffer {
    let mut buf = ReplayBuffer::new(capacity, (1, 1, 1), n);
    let mut rng = seed::rng(0, Stream::Reservoir);
    for i in 0..n {
        buf.offer(&[i as f32], i, None, &mut rng).unwrap();
    }
    buf
}

#[test]
fn retrieval_draws_slots_uniformly_without_repeats() {
    let buf = filled(20, 50);
    let mut rng = seed::rng(1, Stream::Retrieve);
    let mut slot_of = std::collections::HashMap::new();
    for (slot, it) in buf.items().iter().enumerate() {
        slot_of.insert(it.label, slot);
    }
    let mut counts = vec![0u64; 20];
    for _ in 0..20_000 {
        let batch = buf.random_retrieve(5, &mut rng);
        let mut seen = batch.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 5);
        for l in &batch.labels {
            counts[slot_of[l]] += 1;
        }
    }
    assert!(chi2_p(&counts) > 0.01, "{counts:?}");
}

#[test]
fn retrieval_caps_at_buffer_size() {
    let buf = filled(20, 7);
    let mut rng = seed::rng(1, Stream::Retrieve);
    assert_eq!(buf.random_retrieve(64, &mut rng).len(), 7);
    let empty = ReplayBuffer::new(5, (1, 1, 1), 3);
    assert!(empty.random_retrieve(4, &mut rng).is_empty());
}

#[test]
fn batch_update_matches_sequential_offers() {
    let images = Array4::from_shape_fn((30, 1, 1, 1), |(i, ..)| i as f32);
    let labels: Vec<usize> = (0..30).collect();
    let mut a = ReplayBuffer::new(8, (1, 1, 1), 30);
    let mut b = a.clone();
    let (mut ra, mut rb) = (seed::rng(2, Stream::Reservoir), seed::rng(2, Stream::Reservoir));
    for chunk in 0..3 {
        let rows = chunk * 10..(chunk + 1) * 10;
        let x = images.slice(ndarray::s![rows.clone(), .., .., ..]).to_owned();
        a.reservoir_update(&x, &labels[rows.clone()], None, &mut ra).unwrap();
        for i in rows {
            b.offer(&[i as f32], i, None, &mut rb).unwrap();
        }
    }
    let la: Vec<usize> = a.items().iter().map(|it| it.label).collect();
    let lb: Vec<usize> = b.items().iter().map(|it| it.label).collect();
    assert_eq!(la, lb);
    assert_eq!(a.n_seen(), 30);
}

#[test]
fn late_items_enter_with_the_reservoir_probability() {
    // Item t (1-based) survives to the end of a length-n stream with
    // probability M/n regardless of t; check the first and last items.
    let (m, n, runs) = (5usize, 40usize, 40_000usize);
    let mut rng = seed::rng(3, Stream::Reservoir);
    let (mut first, mut last) = (0u64, 0u64);
    for _ in 0..runs {
        let mut buf = ReplayBuffer::new(m, (1, 1, 1), n);
        for i in 0..n {
            buf.offer(&[0.0], i, None, &mut rng).unwrap();
        }
        first += u64::from(buf.items().iter().any(|it| it.label == 0));
        last += u64::from(buf.items().iter().any(|it| it.label == n - 1));
    }
    let p = m as f64 / n as f64;
    let sd = (p * (1.0 - p) / runs as f64).sqrt();
    for hits in [first, last] {
        let freq = hits as f64 / runs as f64;
        assert!((freq - p).abs() < 4.0 * sd, "{freq} vs {p}");
    }
}
