//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The training experiments (6, 7, 8) take hours on one core and are
//! skipped unless `SPIKENORM_ACCEPTANCE_FULL=1`. `SPIKENORM_ACCEPTANCE_ONLY`
//! takes a comma-separated list of criterion numbers. Real datasets are used
//! when `SPIKENORM_NMNIST` / `SPIKENORM_FMNIST` point at them; otherwise
//! procedural stand-ins in the same layout are generated.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mimalloc::MiMalloc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikenorm::arch::{parse_architecture, Style};
use spikenorm::audit;
use spikenorm::data::{decode_aer, decode_idx, encode_aer, encode_idx, events_to_spikes, Event, IdxData};
use spikenorm::kernels::{build_epsilon, build_nu};
use spikenorm::model::{assemble, ModelConfig};
use spikenorm::norm::{AxesMode, NormForm, Normalizer, NormalizerConfig, Phase};
use spikenorm::synth::SynthSpec;
use spikenorm::tensor::{AnalogTensor, Shape5, SpikeTensor};
use spikenorm::training::{evaluate, spike_count_loss, train};
use spikenorm::Error;
use spikenorm_cli::commands::{cmd_diag_threshold, cmd_synth_data, cmd_train, load_splits, METRICS_FILE};
use spikenorm_cli::config::{Dataset, RunConfig};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    let ok = elapsed < limit;
    (ok, format!("runtime {:.2?} (limit {limit:?})", elapsed))
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

fn kernels_exact() -> Outcome {
    let start = Instant::now();
    let (tau_s, tau_r, theta, t) = (10.0f64, 10.0f64, 10.0f64, 300usize);
    let eps = build_epsilon(tau_s, t).unwrap();
    let nu = build_nu(theta, tau_r, t).unwrap();
    let mut worst = 0.0f64;
    for k in 0..t {
        let x = k as f64 / tau_s;
        worst = worst.max((eps.samples()[k] - x * (1.0 - x).exp()).abs());
        worst = worst.max((nu.samples()[k] + 2.0 * theta * (-(k as f64) / tau_r).exp()).abs());
    }
    let anchors = (eps.samples()[10] - 1.0).abs() < 1e-12 && (nu.samples()[0] + 20.0).abs() < 1e-12;
    let (fast, rt) = within(start.elapsed(), Duration::from_secs(1));
    outcome(
        worst < 1e-12 && anchors && fast,
        format!("max deviation {worst:.1e} over {t} steps, eps(10)=1 and nu(0)=-20: {anchors}; {rt}"),
    )
}

fn gradient_audit() -> Outcome {
    let start = Instant::now();
    let trials = 100;
    let audits = [
        audit::temporal_convolution(trials),
        audit::weighted_layers(trials),
        audit::normalizers(trials),
        audit::spike_count_loss_grad(trials),
        audit::networks(),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for a in audits {
        let a = a.unwrap();
        pass &= a.max_rel_error <= 1e-5 && a.checks > 0;
        parts.push(format!("{} {:.1e}", a.name, a.max_rel_error));
    }
    let (fast, rt) = within(start.elapsed(), Duration::from_secs(60));
    outcome(pass && fast, format!("max relative error: {}; {rt}", parts.join(", ")))
}

fn norm_self_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = Shape5::new(4, 3, 2, 2, 6).unwrap();
    let mut worst_moment = 0.0f64;
    let mut worst_const = 0.0f64;
    let mut worst_xi = 0.0f64;
    for axes in [AxesMode::Layer, AxesMode::Batch] {
        let psp =
            |lambda| Normalizer::new(NormalizerConfig { form: NormForm::Psp, axes, lambda, momentum: 0.9 }, 3).unwrap();
        let x = AnalogTensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(0.0..5.0)).collect()).unwrap();
        let (y, _) = psp(0.0).forward(&x, Phase::Train).unwrap();
        // Second raw moment over each sample (layer) or each channel (batch).
        let [n, c, h, w, t] = shape.dims();
        let groups: Vec<(Vec<usize>, Vec<usize>)> = match axes {
            AxesMode::Layer => (0..n).map(|i| (vec![i], (0..c).collect())).collect(),
            AxesMode::Batch => (0..c).map(|j| ((0..n).collect(), vec![j])).collect(),
        };
        for (samples, channels) in groups {
            let (mut sum, mut count) = (0.0, 0.0);
            for (&i, &gc) in samples.iter().flat_map(|i| channels.iter().map(move |j| (i, j))) {
                for yy in 0..h {
                    for xx in 0..w {
                        for tt in 0..t {
                            sum += y.get(i, gc, yy, xx, tt).powi(2);
                            count += 1.0;
                        }
                    }
                }
            }
            worst_moment = worst_moment.max((sum / count - 1.0).abs());
        }
        let (yc, _) = psp(0.1).forward(&AnalogTensor::filled(shape, 3.0), Phase::Train).unwrap();
        let expect = 3.0 / 9.1f64.sqrt();
        worst_const = yc.data().iter().fold(worst_const, |m, v| m.max((v - expect).abs()));
        let mut std =
            Normalizer::new(NormalizerConfig { form: NormForm::Standard, axes, lambda: 0.1, momentum: 0.9 }, 3)
                .unwrap();
        std.xi = vec![0.25, -0.5, 1.5];
        let (ys, _) = std.forward(&AnalogTensor::filled(shape, 7.0), Phase::Train).unwrap();
        for i in 0..n {
            for j in 0..c {
                for tt in 0..t {
                    worst_xi = worst_xi.max((ys.get(i, j, 0, 0, tt) - std.xi[j]).abs());
                }
            }
        }
    }
    outcome(
        worst_moment < 1e-9 && worst_const < 1e-9 && worst_xi < 1e-9,
        format!(
            "moment at lambda=0 off by {worst_moment:.1e}; constant 3 at lambda=0.1 off 3/sqrt(9.1) by {worst_const:.1e}; standard form on constants off xi by {worst_xi:.1e}"
        ),
    )
}

fn diag_threshold_monotone() -> Outcome {
    let start = Instant::now();
    let lambdas = [1e-3, 1e-2, 1e-1, 1.0];
    let thetas = [1.0, 10.0];
    let moments: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
    let csv = cmd_diag_threshold(&lambdas, &thetas, &moments, 0.0).unwrap();
    let rows: Vec<[f64; 4]> = csv
        .lines()
        .skip(2)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|f| f.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3]]
        })
        .collect();
    let mut monotone = true;
    let mut worst_zero = 0.0f64;
    for chunk in rows.chunks(moments.len()) {
        monotone &= chunk.windows(2).all(|w| w[1][3] > w[0][3]);
        let [lambda, theta, m, th] = chunk[0];
        assert_eq!(m, 0.0);
        worst_zero = worst_zero.max((th - lambda.sqrt() * theta).abs());
    }
    let (fast, rt) = within(start.elapsed(), Duration::from_secs(1));
    outcome(
        monotone && worst_zero < 1e-9 && rows.len() == 8 * moments.len() && fast,
        format!("{} rows, strictly increasing in the moment: {monotone}; theta_hat(0) off sqrt(lambda)*theta by {worst_zero:.1e}; {rt}", rows.len()),
    )
}

/// Direct time-stepped simulation of one SRM neuron driven by `input`
/// through weight `w`: every potential is re-summed from the spike history.
fn brute_force_neuron(input: &[u8], w: f64, tau_s: f64, tau_r: f64, theta: f64) -> Vec<u8> {
    let t_len = input.len();
    let mut out = vec![0u8; t_len];
    for t in 0..t_len {
        let mut u = 0.0;
        for tf in 0..=t {
            if input[tf] == 1 {
                let s = (t - tf) as f64 / tau_s;
                u += w * s * (1.0 - s).exp();
            }
        }
        for tf in 0..t {
            if out[tf] == 1 {
                u += -2.0 * theta * (-((t - tf) as f64) / tau_r).exp();
            }
        }
        if u >= theta {
            out[t] = 1;
        }
    }
    out
}

fn micro_network_oracle() -> Outcome {
    let start = Instant::now();
    let t = 300;
    let mut mismatches = 0;
    let mut spikes = (0usize, 0usize);
    for cfg_i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + cfg_i);
        let tau_s = rng.gen_range(2.0..20.0);
        let tau_r = rng.gen_range(2.0..20.0);
        let theta = rng.gen_range(1.0..20.0);
        let rate = rng.gen_range(0.02..0.3);
        let w1 = rng.gen_range(0.3..3.0) * theta;
        let w2 = rng.gen_range(0.3..3.0) * theta;
        let input: Vec<u8> = (0..t).map(|_| rng.gen_bool(rate) as u8).collect();
        let hidden = brute_force_neuron(&input, w1, tau_s, tau_r, theta);
        let output = brute_force_neuron(&hidden, w2, tau_s, tau_r, theta);
        spikes.0 += hidden.iter().map(|&s| s as usize).sum::<usize>();
        spikes.1 += output.iter().map(|&s| s as usize).sum::<usize>();

        let cfg = ModelConfig { tau_s, tau_r, theta, t_steps: t, ..ModelConfig::default() };
        let x = SpikeTensor::from_vec(Shape5::new(1, 1, 1, 1, t).unwrap(), input.clone()).unwrap();
        let run = |arch: &str, weights: &[f64]| -> Vec<u8> {
            let mut m = assemble(&parse_architecture(arch).unwrap(), &cfg, 0).unwrap();
            for (slot, &w) in m.param_slots().into_iter().zip(weights) {
                assert_eq!(slot.values.len(), 1);
                slot.values[0] = w;
            }
            let fwd = m.forward(&x, Phase::Eval).unwrap();
            fwd.output.data().iter().map(|&v| v as u8).collect()
        };
        let lib_hidden = run("1x1x1-1", &[w1]);
        let lib_output = run("1x1x1-1-1", &[w1, w2]);
        if lib_hidden != hidden || lib_output != output {
            mismatches += 1;
        }
    }
    let (fast, rt) = within(start.elapsed(), Duration::from_secs(10));
    outcome(
        mismatches == 0 && fast,
        format!(
            "50 configurations x {t} steps, {mismatches} mismatching; {} hidden and {} output spikes compared; {rt}",
            spikes.0, spikes.1
        ),
    )
}

fn dataset_root(dataset: Dataset, dir: &Path, spec: SynthSpec) -> (PathBuf, &'static str) {
    let var = match dataset {
        Dataset::NMnist => "SPIKENORM_NMNIST",
        Dataset::FMnist => "SPIKENORM_FMNIST",
    };
    if let Some(root) = std::env::var_os(var) {
        return (PathBuf::from(root), "real data");
    }
    let root = dir.join(format!("{dataset:?}"));
    cmd_synth_data(dataset, &root, spec).unwrap();
    (root, "synthetic stand-in data")
}

struct TrainingResult {
    accuracy: f64,
    hidden_rate: f64,
}

const SIX_CONV_NORM: &str = "34x34x2-n4c3-{n4c3}*4-n8c3-10";
const SIX_CONV_PLAIN: &str = "34x34x2-4c3-{4c3}*4-8c3-10";

fn six_conv_runs() -> (Vec<[TrainingResult; 3]>, Duration, &'static str) {
    let start = Instant::now();
    let dir = scratch();
    let (root, source) = dataset_root(Dataset::NMnist, dir.path(), SynthSpec { train: 1000, test: 500, seed: 11 });
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        let run = |arch: &str, axes: AxesMode, name: &str| {
            let mut cfg = RunConfig::defaults(Dataset::NMnist);
            cfg.data_root = Some(root.clone());
            cfg.architecture = arch.into();
            cfg.norm_axes = axes;
            cfg.time_steps = 100;
            cfg.epochs = 10;
            cfg.train_samples = Some(1000);
            cfg.test_samples = Some(500);
            cfg.subsample = None;
            cfg.seed = seed;
            let s = cmd_train(&cfg, &dir.path().join(format!("{name}-{seed}"))).unwrap();
            eprintln!(
                "  seed {seed} {name}: test accuracy {:.4}, mean hidden rate {:.5} ({:.0?} elapsed)",
                s.test.accuracy,
                s.test.mean_layer_rate(),
                start.elapsed()
            );
            TrainingResult { accuracy: s.test.accuracy, hidden_rate: s.test.mean_layer_rate() }
        };
        per_seed.push([
            run(SIX_CONV_NORM, AxesMode::Layer, "psp-ln"),
            run(SIX_CONV_NORM, AxesMode::Batch, "psp-bn"),
            run(SIX_CONV_PLAIN, AxesMode::Layer, "plain"),
        ]);
    }
    (per_seed, start.elapsed(), source)
}

fn training_efficacy(runs: &[[TrainingResult; 3]], elapsed: Duration, source: &str) -> Outcome {
    let mean = |k: usize| runs.iter().map(|r| r[k].accuracy).sum::<f64>() / runs.len() as f64;
    let (ln, bn, plain) = (mean(0), mean(1), mean(2));
    let margin = |a: f64| (a - plain) * 100.0;
    let over_chance = |a: f64| (a - 0.1) * 100.0;
    let property = margin(ln) >= 5.0 && margin(bn) >= 5.0 && over_chance(ln) >= 20.0 && over_chance(bn) >= 20.0;
    let (fast, rt) = within(elapsed, Duration::from_secs(3600));
    outcome(
        property && fast,
        format!(
            "{source}; mean test accuracy PSP-LN {:.1}%, PSP-BN {:.1}%, unnormalized {:.1}% (margins {:+.1}/{:+.1} pts); accuracy property met: {property}; {rt}",
            ln * 100.0,
            bn * 100.0,
            plain * 100.0,
            margin(ln),
            margin(bn)
        ),
    )
}

fn rate_suppression(runs: &[[TrainingResult; 3]]) -> Outcome {
    let wins = |k: usize| runs.iter().filter(|r| r[k].hidden_rate < r[2].hidden_rate).count();
    let (ln, bn) = (wins(0), wins(1));
    let rates: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.4}/{:.4}/{:.4}", r[0].hidden_rate, r[1].hidden_rate, r[2].hidden_rate))
        .collect();
    outcome(
        ln >= 2 && bn >= 2,
        format!("PSP-LN lower on {ln}/3 seeds, PSP-BN lower on {bn}/3 (LN/BN/plain rates: {})", rates.join(", ")),
    )
}

/// Stem conv + 24 two-conv blocks + dense: 50 weighted layers.
const DEEP_RESNET: &str = "34x34-n4c3-{n4c3}*48-10";

fn residual_depth() -> Outcome {
    let start = Instant::now();
    let dir = scratch();
    let (root, source) = dataset_root(Dataset::FMnist, dir.path(), SynthSpec { train: 240, test: 10, seed: 17 });
    let mut cfg = RunConfig::defaults(Dataset::FMnist);
    cfg.data_root = Some(root);
    cfg.architecture = DEEP_RESNET.into();
    cfg.train_samples = Some(200);
    cfg.test_samples = Some(10);
    cfg.subsample = None;
    cfg.epochs = 5;
    cfg.seed = 0;
    let data = load_splits(&cfg).unwrap();

    let build = |style: Style| {
        let mut c = cfg.clone();
        c.style = style;
        assemble(&c.network().unwrap(), &c.model_config(), c.seed).unwrap()
    };
    let first_layer_grad = |model: &mut spikenorm::model::Model| {
        let batch: Vec<SpikeTensor> =
            data.train_idx[..cfg.batch_size].iter().map(|&i| data.train.spikes(i, cfg.time_steps).unwrap()).collect();
        let refs: Vec<&SpikeTensor> = batch.iter().collect();
        let labels: Vec<usize> = data.train_idx[..cfg.batch_size].iter().map(|&i| data.train.label(i)).collect();
        model.zero_grad();
        let fwd = model.forward(&SpikeTensor::stack(&refs).unwrap(), Phase::Train).unwrap();
        let (_, seed) = spike_count_loss(&fwd.output, &labels, &cfg.loss()).unwrap();
        model.backward(&fwd, &seed).unwrap();
        model.layer_grad_norms()[0]
    };

    let mut pre = build(Style::ResnetPre);
    let mut post = build(Style::ResnetPost);
    let depth = pre.weighted_layer_count();
    let g_pre = first_layer_grad(&mut pre);
    let g_post = first_layer_grad(&mut post);
    let ratio = g_pre / g_post;

    let before = evaluate(&mut pre, data.train.as_ref(), &data.train_idx, cfg.batch_size, &cfg.loss()).unwrap().loss;
    let outcome_pre = train(&mut pre, data.train.as_ref(), &data.train_idx, &[], &cfg.train_config(), |m| {
        eprintln!(
            "  pre-activation epoch {}: train loss {:.3} ({:.0?} elapsed)",
            m.epoch,
            m.train_loss,
            start.elapsed()
        );
    })
    .unwrap();
    pre.load_state(&outcome_pre.best_state).unwrap();
    let after = evaluate(&mut pre, data.train.as_ref(), &data.train_idx, cfg.batch_size, &cfg.loss()).unwrap().loss;
    let drop = 1.0 - after / before;

    let property = depth >= 50 && drop >= 0.2 && ratio >= 10.0;
    let (fast, rt) = within(start.elapsed(), Duration::from_secs(3600));
    outcome(
        property && fast,
        format!(
            "{source}; {depth} weighted layers, {} training samples; pre-activation training loss {before:.2} -> {after:.2} ({:.1}% drop); first-layer gradient norm pre {g_pre:.3e} vs post {g_post:.3e} ({ratio:.1}x); {rt}",
            data.train_idx.len(),
            drop * 100.0
        ),
    )
}

fn data_fidelity() -> Outcome {
    // Hand-decoded records in time order: x, y, polarity bit + 23-bit
    // microsecond timestamp.
    let fixture: [(&[u8], Event); 3] = [
        (&[0x00, 0x00, 0x00, 0x00, 0x00], Event { x: 0, y: 0, polarity: 0, timestamp_us: 0 }),
        (&[0x12, 0x21, 0x80, 0x01, 0xF4], Event { x: 18, y: 33, polarity: 1, timestamp_us: 500 }),
        (&[0x05, 0x09, 0x7F, 0xFF, 0xFF], Event { x: 5, y: 9, polarity: 0, timestamp_us: 0x7F_FFFF }),
    ];
    let bytes: Vec<u8> = fixture.iter().flat_map(|(b, _)| b.iter().copied()).collect();
    let expected: Vec<Event> = fixture.iter().map(|(_, e)| *e).collect();
    let aer_ok = decode_aer(&bytes).map(|d| d == expected).unwrap_or(false)
        && encode_aer(&expected).map(|b| b == bytes).unwrap_or(false)
        && matches!(decode_aer(&bytes[..7]), Err(Error::Format { .. }));

    let mut images = encode_idx(&IdxData::Images { rows: 28, cols: 28, pixels: vec![0; 2 * 784] });
    let good = matches!(decode_idx(&images), Ok(IdxData::Images { rows: 28, cols: 28, .. }));
    images[2] = 9;
    let bad_type = matches!(decode_idx(&images), Err(Error::Format { .. }));
    images[2] = 8;
    images.truncate(images.len() - 1);
    let bad_len = matches!(decode_idx(&images), Err(Error::Format { .. }));
    let labels = encode_idx(&IdxData::Labels(vec![1, 2, 3]));
    let mut wrong_rank = labels.clone();
    wrong_rank[3] = 3;
    let idx_ok = good && bad_type && bad_len && matches!(decode_idx(&wrong_rank), Err(Error::Format { .. }));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut binning_ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(0..400);
        let events: Vec<Event> = (0..n)
            .map(|_| Event {
                x: rng.gen_range(0..34),
                y: rng.gen_range(0..34),
                polarity: rng.gen_range(0..2),
                timestamp_us: rng.gen_range(0..400_000),
            })
            .collect();
        let s = events_to_spikes(&events, rng.gen_range(1..350));
        binning_ok &= s.count() <= events.len() && s.data().iter().all(|&v| v <= 1);
    }
    outcome(
        aer_ok && idx_ok && binning_ok,
        format!("AER fixtures byte-exact: {aer_ok}; IDX magic/dimension checks: {idx_ok}; binning on 1000 random samples: {binning_ok}"),
    )
}

fn determinism() -> Outcome {
    let dir = scratch();
    let root = dir.path().join("data");
    cmd_synth_data(Dataset::FMnist, &root, SynthSpec { train: 60, test: 20, seed: 21 }).unwrap();
    let mut cfg = RunConfig::defaults(Dataset::FMnist);
    cfg.data_root = Some(root);
    cfg.architecture = "34x34-n4c3-n4c3-10".into();
    cfg.time_steps = 30;
    cfg.epochs = 3;
    cfg.train_samples = Some(50);
    cfg.val_samples = 10;
    cfg.test_samples = Some(20);
    cfg.subsample = Some(30);
    cfg.seed = 4;
    let read = |name: &str| {
        cmd_train(&cfg, &dir.path().join(name)).unwrap();
        std::fs::read(dir.path().join(name).join(METRICS_FILE)).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    outcome(
        a == b && !a.is_empty(),
        format!("two seeded runs: metrics CSVs of {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    )
}

fn main() -> ExitCode {
    let full = std::env::var("SPIKENORM_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let only: Option<Vec<usize>> = std::env::var("SPIKENORM_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let heavy = |n: usize| full || only.as_ref().is_some_and(|o| o.contains(&n));

    let mut failed = 0;
    let mut report = |n: usize, o: Option<Outcome>| match o {
        Some(o) => {
            println!("criterion {n:>2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            failed += usize::from(!o.pass);
        }
        None => println!("criterion {n:>2}: SKIP - training experiment; set SPIKENORM_ACCEPTANCE_FULL=1 to run"),
    };

    let light: [(usize, fn() -> Outcome); 5] = [
        (1, kernels_exact),
        (2, gradient_audit),
        (3, norm_self_consistency),
        (4, diag_threshold_monotone),
        (5, micro_network_oracle),
    ];
    for (n, f) in light {
        if wanted(n) {
            report(n, Some(f()));
        }
    }
    if wanted(6) || wanted(7) {
        let runs = (heavy(6) || heavy(7)).then(six_conv_runs);
        if wanted(6) {
            report(6, runs.as_ref().map(|(r, t, s)| training_efficacy(r, *t, s)));
        }
        if wanted(7) {
            report(7, runs.as_ref().map(|(r, _, _)| rate_suppression(r)));
        }
    }
    if wanted(8) {
        report(8, heavy(8).then(residual_depth));
    }
    if wanted(9) {
        report(9, Some(data_fidelity()));
    }
    if wanted(10) {
        report(10, Some(determinism()));
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
