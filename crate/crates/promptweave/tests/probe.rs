//! Scratch probe for benchmark margin tuning. Not part of the suite.

use std::path::Path;
use std::time::Instant;

use promptweave::backbone::{ModelConfig, Task};
use promptweave::data::{generate_synthetic, SyntheticSpec};
use promptweave::eval::{evaluate_cases, Evaluator};
use promptweave::numerics::rng::Rng;
use promptweave::training::{pretrain, prompt_tune, BaselineMode, Stage, TrainConfig};

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn envu(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn model_cfg() -> ModelConfig {
    let dr = envu("P_DRAW", 8);
    ModelConfig {
        d_model: 32,
        prompt_len: envu("P_LP", 12),
        n_heads: 4,
        n_layers: 2,
        n_self_layers: envu("P_SELF", 1),
        ffn_mult: 4,
        d_raw: [dr, dr, dr],
        seq_len: [12, 12, 12],
        task: Task::Regression,
        dropout: 0.1,
    }
}

fn base_spec() -> SyntheticSpec {
    let dr = envu("P_DRAW", 8);
    SyntheticSpec {
        z_dim: envu("P_Z", 6),
        seq_len: [12, 12, 12],
        d_raw: [dr, dr, dr],
        noise: [envf("P_NOISE_A", 0.8), envf("P_NOISE_V", 0.8), envf("P_NOISE_T", 0.25)],
        bias_noise: [envf("P_BIAS_A", 1.2), envf("P_BIAS_V", 1.2), envf("P_BIAS_T", 0.2)],
        envelope_dc: envf("P_DC", 1.0),
        label_norm: 1.6,
        n_train: 0,
        n_val: 0,
        n_test: 8,
        task: Task::Regression,
        map_seed: 11,
        domain_shift_seed: 0,
        domain_shift_scale: envf("P_SHIFT", 0.05),
    }
}

fn tune_cfg(seed: u64, baseline: BaselineMode) -> TrainConfig {
    TrainConfig {
        stage: Stage::PromptTune,
        baseline,
        eta: 0.7,
        epochs: envu("P_TUNE_EP", 60),
        batch_size: 16,
        lr: envf("P_TUNE_LR", 1e-3),
        seed,
        resample_masks: true,
        ..TrainConfig::default()
    }
}

fn avg_acc(ckpt: &Path, test: &[promptweave::data::ModalityBundle<f32>], seed: u64) -> f64 {
    let ev = Evaluator::load(ckpt).unwrap();
    evaluate_cases(&ev, test, None, seed, 0.7).unwrap().average.acc
}

#[test]
#[ignore]
fn margin_probe() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let pre_spec = SyntheticSpec {
        n_train: envu("P_PRE_N", 240),
        n_val: 60,
        domain_shift_seed: 0,
        ..base_spec()
    };
    let tune_spec = SyntheticSpec {
        n_train: envu("P_TUNE_N", 96),
        n_val: envu("P_TUNE_VALN", 24),
        n_test: 400,
        domain_shift_seed: 7,
        ..base_spec()
    };
    let pre = generate_synthetic::<f32>(&pre_spec, &Rng::new(101)).unwrap();
    let tune = generate_synthetic::<f32>(&tune_spec, &Rng::new(202)).unwrap();

    let mut rows: Vec<[f64; 3]> = Vec::new();
    for seed in [1u64, 2, 3] {
        let ptcfg = TrainConfig {
            stage: Stage::Pretrain,
            epochs: envu("P_PRE_EP", 25),
            batch_size: 24,
            seed,
            ..TrainConfig::default()
        };
        let pre_path = dir.path().join(format!("pre{seed}.ckpt"));
        pretrain(&model_cfg(), &ptcfg, &pre.train, &pre.val, &pre_path).unwrap();

        let mut accs = [0.0f64; 3];
        for (i, bl) in [BaselineMode::None, BaselineMode::Substitution, BaselineMode::ModalityDropout]
            .into_iter()
            .enumerate()
        {
            let out = dir.path().join(format!("t{seed}_{i}.ckpt"));
            let rep =
                prompt_tune(&pre_path, &tune_cfg(seed, bl), &tune.train, &tune.val, None, &out)
                    .unwrap();
            accs[i] = avg_acc(&out, &tune.test, seed);
            let ev = Evaluator::load(&out).unwrap();
            let er = evaluate_cases(&ev, &tune.test, None, seed, 0.7).unwrap();
            let cases: Vec<String> =
                er.cases.iter().map(|c| format!("{}={:.1}", c.case, c.metrics.acc)).collect();
            println!(
                "  s{seed} [{bl:?}] {}  best_ep={} val={:.4}",
                cases.join(" "),
                rep.best_epoch,
                rep.best_val_loss
            );
        }
        println!(
            "seed {seed}: full={:.2} ms={:.2} md={:.2}  (vs ms {:+.2}, vs md {:+.2})",
            accs[0], accs[1], accs[2], accs[0] - accs[1], accs[0] - accs[2]
        );
        rows.push(accs);
    }
    let mean = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64;
    let (f, s, m) = (mean(0), mean(1), mean(2));
    println!(
        "MEAN: full={f:.2} ms={s:.2} md={m:.2}  margin_ms={:+.2} margin_md={:+.2}  [{:.0}s]",
        f - s,
        f - m,
        t0.elapsed().as_secs_f64()
    );
}
