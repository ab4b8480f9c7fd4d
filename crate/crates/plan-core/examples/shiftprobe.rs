//! Scratch probe: tunes shift strength vs warmup transfer. Not shipped.

use plan_core::data::{domain_family, generate_domain, zero_shot_accuracy, Sample, ShiftParams};
use plan_core::encoder::ModelConfig;
use plan_core::fed::{build_environment, DatasetConfig, ExperimentConfig};
use plan_core::rng;

fn logits(w: &[f64], classes: usize, dim: usize, x: &[f64]) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
            row[dim] + x.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn fit(data: &[Sample], classes: usize, steps: usize, lr: f64) -> Vec<f64> {
    let dim = data[0].image.numel();
    let mut w = vec![0.0; classes * (dim + 1)];
    let n = data.len() as f64;
    for _ in 0..steps {
        let mut grad = vec![0.0; w.len()];
        for s in data {
            let mut p = logits(&w, classes, dim, s.image.data());
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in p.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for c in 0..classes {
                let err = p[c] / z - if c == s.label { 1.0 } else { 0.0 };
                let row = &mut grad[c * (dim + 1)..(c + 1) * (dim + 1)];
                for (g, x) in row.iter_mut().zip(s.image.data()) {
                    *g += err * x;
                }
                row[dim] += err;
            }
        }
        for (wv, g) in w.iter_mut().zip(&grad) {
            *wv -= lr * g / n;
        }
    }
    w
}

fn acc(w: &[f64], classes: usize, data: &[Sample]) -> f64 {
    let dim = data[0].image.numel();
    let hits = data
        .iter()
        .filter(|s| {
            let l = logits(w, classes, dim, s.image.data());
            let best = (0..l.len()).max_by(|a, b| l[*a].partial_cmp(&l[*b]).unwrap()).unwrap();
            best == s.label
        })
        .count();
    hits as f64 / data.len() as f64
}

fn main() {
    let cfg = ModelConfig::desk();
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("probe");

    if mode == "probe" {
        for (ms, os, ns, aj) in [
            (0.35, 0.18, 0.03, 0.15),
            (0.5, 0.18, 0.03, 0.15),
            (0.7, 0.18, 0.03, 0.15),
            (0.9, 0.18, 0.03, 0.15),
            (1.2, 0.18, 0.03, 0.15),
            (1.6, 0.18, 0.03, 0.15),
        ] {
            let shift = ShiftParams {
                mix_strength: ms,
                offset_scale: os,
                noise_sigma: ns,
                jitter: 0,
                amp_jitter: aj,
            };
            let mut gaps = Vec::new();
            let mut min_src = f64::INFINITY;
            for fam in [11u64, 29, 47] {
                let specs = domain_family(&cfg, 4, 100, &shift, fam);
                let doms: Vec<_> = specs
                    .iter()
                    .map(|s| generate_domain(&cfg, s, 3).unwrap())
                    .collect();
                for a in 0..4 {
                    let w = fit(&doms[a].samples, cfg.n_classes, 300, 2.0);
                    let on_a = acc(&w, cfg.n_classes, &doms[a].samples);
                    min_src = min_src.min(on_a);
                    for b in 0..4 {
                        if a != b {
                            gaps.push(on_a - acc(&w, cfg.n_classes, &doms[b].samples));
                        }
                    }
                }
            }
            let worst = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            let frac10 = gaps.iter().filter(|g| **g >= 0.10).count() as f64 / gaps.len() as f64;
            println!(
                "mix {ms} off {os} noise {ns} amp {aj}: min src {min_src:.3} gap min {worst:.3} mean {mean:.3} frac>=0.10 {frac10:.2}"
            );
        }
    }

    if mode == "pairs" {
        let shift = ShiftParams::default();
        for fam in [11u64, 29, 47] {
            for n in [2usize, 4] {
                let specs = domain_family(&cfg, n, 100, &shift, fam);
                let doms: Vec<_> = specs
                    .iter()
                    .map(|s| generate_domain(&cfg, s, 3).unwrap())
                    .collect();
                for a in 0..n {
                    let w = fit(&doms[a].samples, cfg.n_classes, 300, 2.0);
                    let on_a = acc(&w, cfg.n_classes, &doms[a].samples);
                    for b in 0..n {
                        if a != b {
                            let on_b = acc(&w, cfg.n_classes, &doms[b].samples);
                            println!(
                                "fam {fam} n {n} {a}->{b}: src {on_a:.4} tgt {on_b:.4} gap {:.4}",
                                on_a - on_b
                            );
                        }
                    }
                }
            }
        }
    }

    if mode == "warmup" {
        let ms: f64 = args[2].parse().unwrap();
        let os: f64 = args[3].parse().unwrap();
        let ns: f64 = args[4].parse().unwrap();
        let aj: f64 = args[5].parse().unwrap();
        let wdoms: usize = args[6].parse().unwrap();
        let steps: usize = args[7].parse().unwrap();
        let shift = ShiftParams {
            mix_strength: ms,
            offset_scale: os,
            noise_sigma: ns,
            jitter: 0,
            amp_jitter: aj,
        };
        for seed in [5u64, 6, 7] {
            let mut ecfg = ExperimentConfig::desk(0, seed);
            ecfg.dataset = DatasetConfig {
                shift: shift.clone(),
                warmup_domains: wdoms,
                ..DatasetConfig::desk()
            };
            ecfg.dataset.warmup.steps = steps;
            match build_environment(&ecfg) {
                Ok(env) => {
                    let specs = domain_family(&cfg, 4, 100, &shift, ecfg.dataset.family_seed);
                    let data_seed = rng::subseed(ecfg.seed, "data", &[]);
                    let accs: Vec<f64> = specs
                        .iter()
                        .map(|s| {
                            let ds = generate_domain(&cfg, s, data_seed).unwrap();
                            zero_shot_accuracy(&env.backbone, &ds.samples).unwrap()
                        })
                        .collect();
                    println!("seed {seed} wdoms {wdoms} steps {steps}: zs {accs:?}");
                }
                Err(e) => println!("seed {seed} wdoms {wdoms} steps {steps}: FAIL {e}"),
            }
        }
    }
}
