//! Scratch probe: tunes desk-scale experiment hyperparameters. Not shipped.

use std::time::Instant;

use plan_core::fed::{
    build_environment, run_experiment_with_env, AblationFlags, ExperimentConfig, Method, NullClock,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lrs: Vec<f64> = args
        .get(1)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0.05]);
    let seeds: Vec<u64> = args
        .get(2)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
    let held_out: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);

    let mut envs = Vec::new();
    for &seed in &seeds {
        let cfg = ExperimentConfig::desk(held_out, seed);
        let t = Instant::now();
        let env = build_environment(&cfg).unwrap();
        println!("env seed {seed}: built in {:.1}s", t.elapsed().as_secs_f64());
        envs.push(env);
    }

    for &lr in &lrs {
        for (label, method, flags) in [
            ("plan", Method::Plan, AblationFlags::default()),
            ("avg ", Method::AvgBaseline, AblationFlags::default()),
            (
                "a0  ",
                Method::Plan,
                AblationFlags { disable_kl: true, ..AblationFlags::default() },
            ),
        ] {
            let mut accs = Vec::new();
            let mut secs = 0.0;
            for (&seed, env) in seeds.iter().zip(&envs) {
                let mut cfg = ExperimentConfig::desk(held_out, seed);
                cfg.train.lr = lr;
                cfg.method = method;
                cfg.flags = flags;
                let t = Instant::now();
                let out = run_experiment_with_env(&cfg, env, &NullClock).unwrap();
                secs += t.elapsed().as_secs_f64();
                accs.push(out.metrics.last().unwrap().target_accuracy.unwrap());
            }
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            println!(
                "lr {lr:.3} {label}: mean {mean:.4} sd {sd:.4} accs {:?} ({:.1}s total)",
                accs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
                secs
            );
        }
    }
}
