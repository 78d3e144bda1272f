use std::collections::BTreeMap;

use hexrisk::harness::{generate_synth, SynthSpec};
use hexrisk::hexgrid::CellIndex;

fn labels(spec: &SynthSpec) -> (hexrisk::hexgrid::GridTopology, BTreeMap<CellIndex, Vec<f64>>) {
    let data = generate_synth(spec).unwrap();
    let mut y: BTreeMap<CellIndex, Vec<f64>> = BTreeMap::new();
    for r in &data.records {
        y.entry(r.cell.clone()).or_default().push(f64::from(r.severity > 0));
    }
    (data.topology, y)
}

/// Pearson correlation of label indicators over all (cell, neighbour, hour) triples.
fn neighbour_correlation(spec: &SynthSpec) -> (f64, usize) {
    let (topo, y) = labels(spec);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..topo.len() {
        for &j in topo.neighbor_indices(i) {
            if j > i {
                xs.extend_from_slice(&y[topo.cell(i)]);
                ys.extend_from_slice(&y[topo.cell(j)]);
            }
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = (xs.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (ys.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    (cov / (sx * sy), xs.len())
}

#[test]
fn no_spillover_means_independent_neighbours() {
    let spec = SynthSpec { cols: 4, rows: 4, hours: 800, spillover: 0.0, tile_px: 8, seed: 21, ..SynthSpec::default() };
    let (rho, n) = neighbour_correlation(&spec);
    assert!(n >= 10_000);
    assert!(rho.abs() <= 3.0 / (n as f64).sqrt(), "rho {rho} over {n} pairs");
    let with = SynthSpec { spillover: 1.0, ..spec };
    let (rho1, _) = neighbour_correlation(&with);
    assert!(rho1 > 3.0 / (n as f64).sqrt(), "spillover should correlate neighbours: {rho1}");
}

#[test]
fn empirical_rate_matches_request() {
    for (seed, rate) in [(1, 0.1), (2, 0.05), (3, 0.2)] {
        let spec = SynthSpec { cols: 5, rows: 5, hours: 1000, positive_rate: rate, tile_px: 8, seed, ..SynthSpec::default() };
        let got = generate_synth(&spec).unwrap().empirical_rate();
        assert!((got - rate).abs() <= 0.02, "{rate} -> {got}");
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let spec = SynthSpec { cols: 3, rows: 3, hours: 100, tile_px: 8, seed: 9, ..SynthSpec::default() };
    let (a, b) = (generate_synth(&spec).unwrap(), generate_synth(&spec).unwrap());
    assert_eq!(a.manifest(), b.manifest());
    assert_eq!(a.records, b.records);
    for (c, t) in &a.tiles {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        t.write_binary(&mut x).unwrap();
        b.tiles[c].write_binary(&mut y).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn regimes_split_at_the_requested_fraction() {
    let spec = SynthSpec { cols: 6, rows: 5, hours: 50, tile_px: 8, seed: 4, ..SynthSpec::default() };
    let data = generate_synth(&spec).unwrap();
    let high = data.high_vol.values().filter(|&&h| h).count();
    assert_eq!(high, 15);
    // high-volatility tiles are textured, low ones nearly flat
    let spread = |c: &CellIndex| {
        let t = &data.tiles[c].data;
        let m = t.iter().sum::<f64>() / t.len() as f64;
        (t.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64).sqrt()
    };
    for (c, &h) in &data.high_vol {
        if h {
            assert!(spread(c) > 0.05);
        } else {
            assert!(spread(c) < 0.02);
        }
    }
}
