//! End-to-end acceptance run on the synthetic shapes benchmark.
//!
//! Trains the benchmark classifier once, shares it across the checks and
//! prints one PASS/FAIL line per criterion. Exits nonzero if any fails.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use invdet::attacks::{cw_attack, kd_attack, random_targets, AttackConfig, AttackResult, CombinedModelG, DetectorSpec};
use invdet::autodiff::{LinearMap, Tape, Tensor, Var};
use invdet::classifier::{Classifier, ClassifierConfig, TrainConfig};
use invdet::data::{select, DatasetSpec, DatasetSplit, LabeledImage};
use invdet::detectors::{calibrate_threshold, dkl_score, dkl_scores, kl_divergence, msr_from_logits};
use invdet::evaluation::{auroc_split, roc_curve, run_experiment, ExperimentSpec, Suite, SuiteConfig};
use invdet::mlp_detector::{MlpConfig, MlpModel};
use invdet::transforms::TransformSpec;

const N_UD: usize = 100;
const N_FIXED: usize = 50;
const N_KD: usize = 50;
const TARGET_FPR: f64 = 0.01;
const TARGET_SEED: u64 = 11;
const GRAD_INSTANCES: usize = 100;

fn attack_cfg(k: f64) -> AttackConfig {
    AttackConfig {
        confidence: k,
        binary_search_steps: 6,
        iterations: 300,
        initial_c: 0.3,
        lr: 0.05,
        ..AttackConfig::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ------------------------------------------------------------ fixtures

struct Bench {
    images: Vec<LabeledImage>,
    split: DatasetSplit,
    model: Classifier,
}

impl Bench {
    fn eval(&self) -> Vec<&LabeledImage> {
        select(&self.images, &self.split.detector_eval)
    }

    fn detector_train(&self) -> Vec<&LabeledImage> {
        select(&self.images, &self.split.detector_train)
    }
}

fn train(images: &[LabeledImage], split: &DatasetSplit, augment_flip: bool) -> Classifier {
    let cfg = ClassifierConfig::new(4, 3, 32);
    let tc = TrainConfig {
        augment_flip,
        ..TrainConfig::default()
    };
    let mut m = Classifier::new(cfg, tc.seed).unwrap();
    let train = select(images, &split.train);
    m.train(&train, &tc, None).unwrap();
    m
}

fn pixels<'a>(imgs: &[&'a LabeledImage]) -> Vec<&'a Tensor> {
    imgs.iter().map(|i| &i.pixels).collect()
}

fn correct<'a>(model: &Classifier, imgs: &[&'a LabeledImage]) -> Vec<&'a LabeledImage> {
    let preds = model.predict_batch(&pixels(imgs)).unwrap();
    imgs.iter().zip(preds).filter(|(i, p)| i.label == *p).map(|(i, _)| *i).collect()
}

fn msr_scores(model: &Classifier, xs: &[&Tensor]) -> Vec<f64> {
    model
        .logits_batch(xs)
        .unwrap()
        .iter()
        .map(|z| msr_from_logits(z).unwrap())
        .collect()
}

fn attack(model: &Classifier, imgs: &[&LabeledImage], targets: &[usize], k: f64) -> Vec<AttackResult> {
    let ids: Vec<u64> = imgs.iter().map(|i| i.id).collect();
    let ys: Vec<usize> = imgs.iter().map(|i| i.label).collect();
    cw_attack(model, &pixels(imgs), &ys, &ids, Some(targets), &attack_cfg(k)).unwrap()
}

fn adversarials(results: &[AttackResult]) -> Vec<&Tensor> {
    results
        .iter()
        .filter(|r| r.success)
        .map(|r| r.adversarial.as_ref().unwrap())
        .collect()
}

fn threshold(model: &Classifier, calib: &[&Tensor], t: &TransformSpec, temperature: f64) -> f64 {
    let s = dkl_scores(model, calib, t, temperature).unwrap();
    calibrate_threshold(&s, TARGET_FPR).unwrap().threshold
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ------------------------------------------------- 1: gradient checks

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

type OpFn = dyn Fn(&mut Tape, &[Var]) -> invdet::Result<Var>;

/// Projects the op's output onto fixed random weights so every output
/// element contributes to the checked scalar.
fn projected(tape: &mut Tape, f: &OpFn, xs: &[Var], w: &Tensor) -> Var {
    let y = f(tape, xs).unwrap();
    let wv = tape.constant(w.clone().reshape(tape.shape(y)).unwrap());
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p).unwrap()
}

fn scalar_at(f: &OpFn, inputs: &[Tensor], w: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let s = projected(&mut tape, f, &xs, w);
    tape.scalar(s)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over `GRAD_INSTANCES` random draws.
fn gradcheck(rng: &mut ChaCha8Rng, draw: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: &OpFn) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_INSTANCES {
        let inputs = draw(rng);
        let (analytic, w) = {
            let mut tape = Tape::new();
            let xs: Vec<Var> = inputs
                .iter()
                .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
                .collect();
            let y = f(&mut tape, &xs).unwrap();
            let n: usize = tape.shape(y).iter().product();
            let w = Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut tape = Tape::new();
            let xs: Vec<Var> = inputs
                .iter()
                .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
                .collect();
            let s = projected(&mut tape, f, &xs, &w);
            tape.backward(s).unwrap();
            let g: Vec<f64> = xs.iter().flat_map(|&v| tape.grad(v).unwrap().to_vec()).collect();
            (g, w)
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                numeric.push((scalar_at(f, &plus, &w) - scalar_at(f, &minus, &w)) / (2.0 * h));
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from the kink at 0.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    type Draw = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
    type F = Box<OpFn>;
    let one = |lo: f64, hi: f64| -> Draw { Box::new(move |r| vec![uniform(r, &[3, 4], lo, hi)]) };
    let pair = |sa: Vec<usize>, sb: Vec<usize>, lo: f64, hi: f64| -> Draw {
        Box::new(move |r| vec![uniform(r, &sa, lo, hi), uniform(r, &sb, lo, hi)])
    };
    let mut cases: Vec<(&str, Draw, F)> = vec![
        ("neg", one(-2.0, 2.0), Box::new(|t, x| t.neg(x[0]))),
        ("exp", one(-2.0, 2.0), Box::new(|t, x| t.exp(x[0]))),
        ("log", one(0.1, 3.0), Box::new(|t, x| t.log(x[0]))),
        ("tanh", one(-2.0, 2.0), Box::new(|t, x| t.tanh(x[0]))),
        ("relu", Box::new(|r| vec![off_zero(r, &[3, 4])]), Box::new(|t, x| t.relu(x[0]))),
        ("sigmoid", one(-3.0, 3.0), Box::new(|t, x| t.sigmoid(x[0]))),
        ("softplus", one(-3.0, 3.0), Box::new(|t, x| t.softplus(x[0]))),
        ("add_scalar", one(-2.0, 2.0), Box::new(|t, x| t.add_scalar(x[0], 0.7))),
        ("mul_scalar", one(-2.0, 2.0), Box::new(|t, x| t.mul_scalar(x[0], -1.3))),
        ("pow_scalar", one(0.1, 2.0), Box::new(|t, x| t.pow_scalar(x[0], 0.6))),
        ("max_scalar", Box::new(|r| vec![off_zero(r, &[3, 4])]), Box::new(|t, x| t.max_scalar(x[0], 0.0))),
        (
            "clamp",
            Box::new(|r| {
                let v: Vec<f64> = (0..12)
                    .map(|_| loop {
                        let v: f64 = r.random_range(-0.5..1.5);
                        if (v - 0.0).abs() > 0.02 && (v - 1.0).abs() > 0.02 {
                            break v;
                        }
                    })
                    .collect();
                vec![Tensor::new(vec![3, 4], v).unwrap()]
            }),
            Box::new(|t, x| t.clamp(x[0], 0.0, 1.0)),
        ),
        ("add", pair(vec![3, 4], vec![4], -2.0, 2.0), Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", pair(vec![3, 1], vec![3, 4], -2.0, 2.0), Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", pair(vec![2, 3, 4], vec![3, 1], -2.0, 2.0), Box::new(|t, x| t.mul(x[0], x[1]))),
        ("div", pair(vec![3, 4], vec![3, 4], 0.5, 2.0), Box::new(|t, x| t.div(x[0], x[1]))),
        ("pow", pair(vec![3, 4], vec![4], 0.2, 2.0), Box::new(|t, x| t.pow(x[0], x[1]))),
        (
            "maximum",
            Box::new(|r| {
                let a = uniform(r, &[3, 4], -1.0, 1.0);
                let gap: Vec<f64> = a.data().iter().map(|v| v + off_zero(r, &[1]).data()[0] * 0.5).collect();
                vec![a, Tensor::new(vec![3, 4], gap).unwrap()]
            }),
            Box::new(|t, x| t.maximum(x[0], x[1])),
        ),
        ("sum", one(-2.0, 2.0), Box::new(|t, x| t.sum(x[0]))),
        ("mean", one(-2.0, 2.0), Box::new(|t, x| t.mean(x[0]))),
        (
            "sum_axis",
            Box::new(|r| vec![uniform(r, &[2, 3, 4], -2.0, 2.0)]),
            Box::new(|t, x| t.sum_axis(x[0], 1)),
        ),
        (
            "mean_axis",
            Box::new(|r| vec![uniform(r, &[2, 3, 4], -2.0, 2.0)]),
            Box::new(|t, x| t.mean_axis(x[0], 2)),
        ),
        (
            "reshape",
            Box::new(|r| vec![uniform(r, &[2, 6], -2.0, 2.0)]),
            Box::new(|t, x| t.reshape(x[0], &[3, 4])),
        ),
        ("matmul", pair(vec![3, 5], vec![5, 2], -1.0, 1.0), Box::new(|t, x| t.matmul(x[0], x[1]))),
        (
            "conv2d",
            Box::new(|r| {
                vec![
                    uniform(r, &[2, 2, 5, 5], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ]
            }),
            Box::new(|t, x| t.conv2d(x[0], x[1], Some(x[2]), 1, 1)),
        ),
        (
            "conv2d/stride2",
            Box::new(|r| vec![uniform(r, &[1, 2, 6, 6], -1.0, 1.0), uniform(r, &[2, 2, 2, 2], -1.0, 1.0)]),
            Box::new(|t, x| t.conv2d(x[0], x[1], None, 2, 0)),
        ),
        (
            "max_pool2d",
            Box::new(|r| vec![uniform(r, &[2, 2, 4, 4], -1.0, 1.0)]),
            Box::new(|t, x| t.max_pool2d(x[0])),
        ),
        ("log_softmax", one(-3.0, 3.0), Box::new(|t, x| t.log_softmax(x[0]))),
        ("softmax", one(-3.0, 3.0), Box::new(|t, x| t.softmax(x[0]))),
        ("max_last", one(-3.0, 3.0), Box::new(|t, x| t.max_last(x[0]))),
        ("pick", one(-3.0, 3.0), Box::new(|t, x| t.pick(x[0], &[3, 0, 2]))),
        (
            "concat_last",
            pair(vec![3, 2], vec![3, 4], -2.0, 2.0),
            Box::new(|t, x| t.concat_last(&[x[0], x[1], x[0]])),
        ),
    ];
    let map = Arc::new(
        LinearMap::from_rows(
            &[2, 3],
            &[4],
            vec![
                vec![(0, 0.5), (4, -1.0)],
                vec![(1, 2.0)],
                vec![],
                vec![(2, 0.25), (3, 0.25), (5, 1.5)],
            ],
        )
        .unwrap(),
    );
    cases.push((
        "linear_map",
        Box::new(|r| vec![uniform(r, &[3, 2, 3], -1.0, 1.0)]),
        Box::new(move |t, x| t.linear_map(x[0], map.clone())),
    ));
    for spec in [
        "hflip",
        "zoom:1.05",
        "zoom:1.03",
        "gamma:0.6",
        "shift:0.5,0.5",
        "shift:-1.3,2.2",
        "contrast:1.3",
        "grayscale",
        "hblur:3",
        "brightness:0.1",
    ] {
        let t: TransformSpec = spec.parse().unwrap();
        let name: &'static str = Box::leak(format!("transform {spec}").into_boxed_str());
        // interior pixels keep every clamp inactive
        cases.push((
            name,
            Box::new(|r| vec![uniform(r, &[1, 3, 8, 8], 0.3, 0.7)]),
            Box::new(move |tape, x| t.apply_var(tape, x[0])),
        ));
    }

    let mut worst_name = "";
    let mut worst = 0.0;
    let mut failed = Vec::new();
    for (name, draw, f) in &cases {
        let e = gradcheck(&mut rng, draw.as_ref(), f.as_ref());
        if e > worst {
            worst = e;
            worst_name = name;
        }
        if !(e < 1e-4) {
            failed.push(format!("{name} ({e:.1e})"));
        }
    }
    outcome(
        failed.is_empty(),
        format!(
            "{} ops/transforms x {GRAD_INSTANCES} draws; worst rel err {worst:.1e} ({worst_name}){}",
            cases.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; over 1e-4: {}", failed.join(", "))
            }
        ),
    )
}

// ------------------------------------------ 2: KL and AUROC oracles

fn random_dist(rng: &mut ChaCha8Rng, n: usize, zeros: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0f64..4.0).exp()).collect();
    if zeros {
        v[rng.random_range(0..n)] = 0.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn pair_count_auroc(neg: &[f64], pos: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn criterion_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut kl_worst: f64 = 0.0;
    for i in 0..1000 {
        let n = rng.random_range(2..12);
        let p = random_dist(&mut rng, n, i % 5 == 0);
        let q = random_dist(&mut rng, n, false);
        let direct: f64 = p
            .iter()
            .zip(&q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi / qi).ln())
            .sum();
        kl_worst = kl_worst.max((kl_divergence(&p, &q).unwrap() - direct).abs());
    }
    let mut auc_worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(4..80);
        let levels = rng.random_range(2..8);
        let mut labeled: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.random_range(0..levels) as f64 / 2.0, rng.random::<f64>() < 0.4))
            .collect();
        labeled[0].1 = true;
        labeled[1].1 = false;
        let trapezoid = roc_curve(&labeled).unwrap().area();
        let neg: Vec<f64> = labeled.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let pos: Vec<f64> = labeled.iter().filter(|s| s.1).map(|s| s.0).collect();
        auc_worst = auc_worst.max((trapezoid - pair_count_auroc(&neg, &pos)).abs());
    }
    outcome(
        kl_worst <= 1e-12 && auc_worst <= 1e-9,
        format!("KL max |err| {kl_worst:.1e} over 1000 pairs; AUROC max |err| {auc_worst:.1e} over 200 tied sets"),
    )
}

// --------------------------------------------- 3: combined model G

fn criterion_detector_rule(b: &Bench) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eval = b.eval();
    let inputs: Vec<Tensor> = (0..1000)
        .map(|i| {
            let base = &eval[i % eval.len()].pixels;
            let a: f64 = rng.random_range(0.0..0.6);
            let v = base
                .data()
                .iter()
                .map(|x| (1.0 - a) * x + a * rng.random::<f64>())
                .collect();
            Tensor::new(base.shape().to_vec(), v).unwrap()
        })
        .collect();
    let mut mismatches = 0;
    let mut flagged = 0;
    for (t, temperature) in [(TransformSpec::HFlip, 1.0), ("zoom:1.03".parse().unwrap(), 0.15)] {
        let xs: Vec<&Tensor> = inputs.iter().step_by(2).collect();
        let mut d = dkl_scores(&b.model, &xs, &t, temperature).unwrap();
        let raw = d.clone();
        d.sort_by(f64::total_cmp);
        let mid = d.len() / 2;
        let tau = 0.5 * (d[mid - 1] + d[mid]);
        let g = CombinedModelG::new(
            &b.model,
            DetectorSpec {
                transform: t,
                temperature,
                threshold: tau,
            },
            1.0,
        )
        .unwrap();
        for (x, &score) in xs.iter().zip(&raw) {
            let extra = g.predict(x).unwrap() == g.detector_class();
            flagged += extra as usize;
            if extra != (score > tau) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over 1000 inputs ({flagged} flagged)"),
    )
}

// ------------------------------------------------- 4, 5, 9: UD runs

struct UdRuns<'a> {
    attacked: Vec<&'a LabeledImage>,
    negatives: Vec<&'a Tensor>,
    by_k: HashMap<u32, Vec<AttackResult>>,
}

fn ud_runs(b: &Bench) -> UdRuns<'_> {
    let eval = b.eval();
    let clean = correct(&b.model, &eval);
    let attacked: Vec<&LabeledImage> = clean.iter().take(N_UD).copied().collect();
    let ys: Vec<usize> = attacked.iter().map(|i| i.label).collect();
    let targets = random_targets(&ys, 4, TARGET_SEED).unwrap();
    let mut by_k = HashMap::new();
    for k in [0u32, 8] {
        by_k.insert(k, attack(&b.model, &attacked, &targets, k as f64));
    }
    for k in [2u32, 4] {
        by_k.insert(k, attack(&b.model, &attacked[..N_FIXED], &targets[..N_FIXED], k as f64));
    }
    UdRuns {
        attacked,
        negatives: pixels(&clean),
        by_k,
    }
}

fn criterion_ud(b: &Bench, ud: &UdRuns) -> Outcome {
    let dkl_neg = dkl_scores(&b.model, &ud.negatives, &TransformSpec::HFlip, 1.0).unwrap();
    let msr_neg = msr_scores(&b.model, &ud.negatives);
    let mut dkl = HashMap::new();
    let mut msr = HashMap::new();
    let mut succ = HashMap::new();
    for k in [0u32, 8] {
        let adv = adversarials(&ud.by_k[&k]);
        succ.insert(k, adv.len());
        let d = dkl_scores(&b.model, &adv, &TransformSpec::HFlip, 1.0).unwrap();
        dkl.insert(k, auroc_split(&dkl_neg, &d).unwrap_or(f64::NAN));
        msr.insert(k, auroc_split(&msr_neg, &msr_scores(&b.model, &adv)).unwrap_or(f64::NAN));
    }
    let pass = dkl[&0] >= 0.90 && dkl[&8] > msr[&8] && msr[&8] < msr[&0];
    outcome(
        pass,
        format!(
            "k=0: D_KL {:.3} (need >= 0.90), MSR {:.3}, {}/{} succeeded; k=8: D_KL {:.3} vs MSR {:.3}, {}/{} succeeded",
            dkl[&0],
            msr[&0],
            succ[&0],
            ud.attacked.len(),
            dkl[&8],
            msr[&8],
            succ[&8],
            ud.attacked.len()
        ),
    )
}

fn criterion_transform_table(b: &Bench, ud: &UdRuns) -> Outcome {
    let adv = adversarials(&ud.by_k[&0]);
    let mut parts = Vec::new();
    let mut pass = true;
    for spec in ["hflip", "gamma:0.6", "zoom:1.05"] {
        let t: TransformSpec = spec.parse().unwrap();
        let neg = dkl_scores(&b.model, &ud.negatives, &t, 1.0).unwrap();
        let pos = dkl_scores(&b.model, &adv, &t, 1.0).unwrap();
        let a = auroc_split(&neg, &pos).unwrap_or(f64::NAN);
        pass &= a >= 0.85;
        parts.push(format!("{spec} {a:.3}"));
    }
    outcome(pass, format!("UD AUROC {} (each needs >= 0.85)", parts.join(", ")))
}

fn criterion_confidence(ud: &UdRuns) -> Outcome {
    let grid = [0u32, 2, 4, 8];
    let common: Vec<usize> = (0..N_FIXED)
        .filter(|&i| grid.iter().all(|k| ud.by_k[k][i].success))
        .collect();
    let means: Vec<f64> = grid
        .iter()
        .map(|k| mean(&common.iter().map(|&i| ud.by_k[k][i].l2).collect::<Vec<_>>()))
        .collect();
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);
    outcome(
        monotone && !common.is_empty(),
        format!(
            "mean L2 over {} images successful at every k: {}",
            common.len(),
            grid.iter()
                .zip(&means)
                .map(|(k, m)| format!("k={k} {m:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

// ------------------------------------------------------- 6, 7: KD

struct KdRun {
    temperature: f64,
    tau: f64,
    results: Vec<AttackResult>,
}

fn kd_runs(b: &Bench) -> Vec<KdRun> {
    let eval = b.eval();
    let attacked: Vec<&LabeledImage> = correct(&b.model, &eval).into_iter().take(N_KD).collect();
    let ys: Vec<usize> = attacked.iter().map(|i| i.label).collect();
    let ids: Vec<u64> = attacked.iter().map(|i| i.id).collect();
    let targets = random_targets(&ys, 4, TARGET_SEED).unwrap();
    let calib = correct(&b.model, &b.detector_train());
    [1.0, 0.15]
        .into_iter()
        .map(|temperature| {
            let tau = threshold(&b.model, &pixels(&calib), &TransformSpec::HFlip, temperature);
            let g = CombinedModelG::new(
                &b.model,
                DetectorSpec {
                    transform: TransformSpec::HFlip,
                    temperature,
                    threshold: tau,
                },
                1.0,
            )
            .unwrap();
            let results = kd_attack(&g, &pixels(&attacked), &ys, &ids, Some(&targets), &attack_cfg(0.0)).unwrap();
            KdRun {
                temperature,
                tau,
                results,
            }
        })
        .collect()
}

fn criterion_kd_temperature(runs: &[KdRun]) -> Outcome {
    let stats: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            let ok: Vec<f64> = r.results.iter().filter(|a| a.success).map(|a| a.l2).collect();
            (ok.len() as f64 / r.results.len() as f64, median(ok))
        })
        .collect();
    let (b1, m1) = stats[0];
    let (b2, m2) = stats[1];
    outcome(
        m2 >= 2.0 * m1 && b2 < b1,
        format!(
            "T=1: bypass {b1:.2}, median L2 {m1:.3} (tau {:.3}); T=0.15: bypass {b2:.2}, median L2 {m2:.3} (tau {:.3}); ratio {:.2} (need >= 2)",
            runs[0].tau,
            runs[1].tau,
            m2 / m1
        ),
    )
}

fn criterion_kd_reverify(b: &Bench, runs: &[KdRun]) -> Outcome {
    let mut checked = 0;
    let mut bad = 0;
    for r in runs {
        for a in r.results.iter().filter(|a| a.success) {
            checked += 1;
            let x = a.adversarial.as_ref().unwrap();
            let d = dkl_score(&b.model, x, &TransformSpec::HFlip, r.temperature).unwrap();
            let p = b.model.predict(x).unwrap();
            if !(d < r.tau) || Some(p) != a.target {
                bad += 1;
            }
        }
    }
    outcome(
        bad == 0 && checked > 0,
        format!("{} of {checked} reported bypasses confirmed by independent rescoring", checked - bad),
    )
}

// ------------------------------------------------ 8: natural errors

fn criterion_natural(b: &Bench) -> Outcome {
    let (mlp, _) = MlpModel::train_on_images(&b.model, &b.detector_train(), MlpConfig::default()).unwrap();
    let eval = b.eval();
    let xs = pixels(&eval);
    let preds = b.model.predict_batch(&xs).unwrap();
    let wrong: Vec<bool> = eval.iter().zip(&preds).map(|(i, p)| i.label != *p).collect();
    let split = |s: Vec<f64>| -> f64 {
        let neg: Vec<f64> = s.iter().zip(&wrong).filter(|(_, w)| !**w).map(|(s, _)| *s).collect();
        let pos: Vec<f64> = s.iter().zip(&wrong).filter(|(_, w)| **w).map(|(s, _)| *s).collect();
        auroc_split(&neg, &pos).unwrap_or(f64::NAN)
    };
    let a_mlp = split(mlp.score_images(&b.model, &xs).unwrap());
    let a_dkl = split(dkl_scores(&b.model, &xs, &TransformSpec::HFlip, 1.0).unwrap());
    let a_msr = split(msr_scores(&b.model, &xs));
    let errors = wrong.iter().filter(|w| **w).count();
    outcome(
        eval.len() >= 500 && a_mlp >= a_dkl - 0.01 && a_mlp >= a_msr && a_mlp >= 0.75,
        format!(
            "{} images, {errors} errors: MLP {a_mlp:.3}, D_KL(hflip) {a_dkl:.3}, MSR {a_msr:.3}",
            eval.len()
        ),
    )
}

// --------------------------------------------- 10: flip augmentation

fn ud_dkl_auroc(model: &Classifier, eval: &[&LabeledImage]) -> (f64, usize) {
    let clean = correct(model, eval);
    let attacked: Vec<&LabeledImage> = clean.iter().take(N_UD).copied().collect();
    let ys: Vec<usize> = attacked.iter().map(|i| i.label).collect();
    let targets = random_targets(&ys, 4, TARGET_SEED).unwrap();
    let results = attack(model, &attacked, &targets, 0.0);
    let adv = adversarials(&results);
    let neg = dkl_scores(model, &pixels(&clean), &TransformSpec::HFlip, 1.0).unwrap();
    let pos = dkl_scores(model, &adv, &TransformSpec::HFlip, 1.0).unwrap();
    (auroc_split(&neg, &pos).unwrap_or(f64::NAN), adv.len())
}

fn criterion_augmentation(b: &Bench, ud: &UdRuns) -> Outcome {
    let plain = train(&b.images, &b.split, false);
    let eval = b.eval();
    let (without, n) = ud_dkl_auroc(&plain, &eval);
    let adv = adversarials(&ud.by_k[&0]);
    let neg = dkl_scores(&b.model, &ud.negatives, &TransformSpec::HFlip, 1.0).unwrap();
    let pos = dkl_scores(&b.model, &adv, &TransformSpec::HFlip, 1.0).unwrap();
    let with_aug = auroc_split(&neg, &pos).unwrap_or(f64::NAN);
    let acc = plain.accuracy(&eval).unwrap();
    outcome(
        (with_aug - without).abs() <= 0.10,
        format!(
            "D_KL(hflip) UD AUROC {without:.3} without vs {with_aug:.3} with flip augmentation ({n} adversarials on the unaugmented model, its accuracy {acc:.3})"
        ),
    )
}

// ------------------------------------------------ 11: determinism

fn criterion_determinism(b: &Bench) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("classifier.ckpt");
    b.model.save(&ckpt).unwrap();
    let config = SuiteConfig {
        seed: 5,
        n_eval: 300,
        n_attack: 5,
        confidences: vec![0.0, 4.0],
        temperatures: Some(vec![1.0, 0.15]),
        attack: AttackConfig {
            iterations: 60,
            binary_search_steps: 3,
            initial_c: 0.3,
            ..AttackConfig::default()
        },
        dropout_passes: 8,
        mlp: MlpConfig {
            epochs: 5,
            ..MlpConfig::default()
        },
        ..SuiteConfig::default()
    };
    let mut differing = Vec::new();
    for suite in Suite::ALL {
        let run = |name: &str| {
            let spec = ExperimentSpec {
                suite,
                dataset: DatasetSpec::default(),
                classifier: ckpt.clone(),
                mlp: None,
                out_dir: dir.path().join(name),
                experiment_id: Some(suite.to_string()),
                config: config.clone(),
            };
            run_experiment(&spec).unwrap();
            let read = |f: &str| std::fs::read(dir.path().join(name).join(suite.to_string()).join(f)).unwrap();
            (read("report.json"), read("scores.csv"), read("attacks.csv"))
        };
        if run("first") != run("second") {
            differing.push(suite.to_string());
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} suites rerun with seed 5: report.json, scores.csv and attacks.csv byte-identical", Suite::ALL.len())
        } else {
            format!("outputs differ for {}", differing.join(", "))
        },
    )
}

// ------------------------------------------------------------ driver

fn report(id: usize, name: &str, started: Instant, o: &Outcome, all: &mut Vec<(usize, bool)>) {
    println!(
        "criterion {id:>2} {} {name}: {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
    all.push((id, o.pass));
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut all = Vec::new();

    if wanted(1) {
        let t = Instant::now();
        report(1, "autodiff and transform gradients", t, &criterion_gradients(), &mut all);
    }
    if wanted(2) {
        let t = Instant::now();
        report(2, "KL and AUROC oracles", t, &criterion_oracles(), &mut all);
    }
    if (3..=11).any(wanted) {
        let t = Instant::now();
        let spec = DatasetSpec::default();
        let (images, split) = spec.load_split().unwrap();
        let model = train(&images, &split, true);
        let b = Bench { images, split, model };
        let acc = b.model.accuracy(&b.eval()).unwrap();
        println!("benchmark classifier trained: held-out accuracy {acc:.4} [{:.1}s]", t.elapsed().as_secs_f64());

        if wanted(3) {
            let t = Instant::now();
            report(3, "combined-model decision rule", t, &criterion_detector_rule(&b), &mut all);
        }
        if [4, 5, 9, 10].into_iter().any(wanted) {
            let t = Instant::now();
            let ud = ud_runs(&b);
            println!("UD attacks done [{:.1}s]", t.elapsed().as_secs_f64());
            if wanted(4) {
                report(4, "UD detection vs confidence", t, &criterion_ud(&b, &ud), &mut all);
            }
            if wanted(5) {
                let t = Instant::now();
                report(5, "transform table", t, &criterion_transform_table(&b, &ud), &mut all);
            }
            if wanted(9) {
                let t = Instant::now();
                report(9, "C&W confidence monotonicity", t, &criterion_confidence(&ud), &mut all);
            }
            if wanted(10) {
                let t = Instant::now();
                report(10, "flip-augmentation independence", t, &criterion_augmentation(&b, &ud), &mut all);
            }
        }
        if wanted(6) || wanted(7) {
            let t = Instant::now();
            let runs = kd_runs(&b);
            if wanted(6) {
                report(6, "KD temperature effect", t, &criterion_kd_temperature(&runs), &mut all);
            }
            if wanted(7) {
                let t = Instant::now();
                report(7, "KD bypass re-verification", t, &criterion_kd_reverify(&b, &runs), &mut all);
            }
        }
        if wanted(8) {
            let t = Instant::now();
            report(8, "natural-error detection ordering", t, &criterion_natural(&b), &mut all);
        }
        if wanted(11) {
            let t = Instant::now();
            report(11, "suite determinism", t, &criterion_determinism(&b), &mut all);
        }
    }

    all.sort();
    let failed: Vec<String> = all.iter().filter(|(_, p)| !p).map(|(i, _)| i.to_string()).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        all.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" (criteria {})", failed.join(", "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
