//! Regenerates `data/signal_design.json` from a master seed and per-sensor
//! spreads, and reports the standardized between-cluster separation of each
//! signal sensor.
//!
//! cargo run -p funclust --example signal_design -- <seed> <spread>... > data/signal_design.json

use funclust::simbench::design::{draw_signal_means, FrozenSignals};
use funclust::simbench::{generate_dataset, SimulationDesign};

/// Mean pairwise RMS gap and largest pointwise gap between standardized
/// cluster mean curves.
fn separation(design: &SimulationDesign, sensor: usize) -> (f64, f64) {
    let data = generate_dataset(design).expect("valid design");
    let labels = data.labels().unwrap();
    let tau = data.tau();
    let m = design.m_true;
    let mut sums = vec![vec![0.0; tau]; m];
    let mut counts = vec![0.0; m];
    for i in 0..data.n() {
        counts[labels[i]] += 1.0;
        for (t, v) in data.curve(i, sensor).iter().enumerate() {
            sums[labels[i]][t] += v;
        }
    }
    let mut total = 0.0;
    let mut pairs = 0.0;
    let mut widest = 0.0f64;
    for a in 0..m {
        for b in a + 1..m {
            let ms: f64 = (0..tau)
                .map(|t| (sums[a][t] / counts[a] - sums[b][t] / counts[b]).powi(2))
                .sum::<f64>()
                / tau as f64;
            total += ms.sqrt();
            for t in 0..tau {
                widest = widest.max((sums[a][t] / counts[a] - sums[b][t] / counts[b]).abs());
            }
            pairs += 1.0;
        }
    }
    (total / pairs, widest)
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(20240601);
    let spreads: Vec<f64> = if args.len() > 1 {
        args[1..].iter().map(|s| s.parse().expect("numeric spread")).collect()
    } else {
        vec![1.0, 0.6]
    };
    let frozen = FrozenSignals {
        master_seed: seed,
        signal_means: draw_signal_means(seed, &spreads, 3, 12),
        spreads,
        signal_variance: 1.0,
        noise_variance: 1.0,
    };
    let design = SimulationDesign {
        n: 30_000,
        p_signal: frozen.signal_means.len(),
        p_noise: 0,
        signal_means: frozen.signal_means.clone(),
        ..Default::default()
    };
    for s in 0..design.p_signal {
        let (rms, widest) = separation(&design, s);
        eprintln!("sensor {}: mean RMS gap {rms:.3}, widest gap {widest:.3}", s + 1);
    }
    println!("{}", serde_json::to_string_pretty(&frozen).unwrap());
}
