//! Acceptance checks. Runs every criterion, prints one `PASS`/`FAIL` line per
//! criterion and exits non-zero if any failed. A positional argument filters
//! criteria by name.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use personaseg::context::{
    aggregate_group_context, attention_weights, enhance, extract_regions, ContextVariant, GroupContextParams,
    RegionNorm,
};
use personaseg::data::{generate_synthetic, SynthSpec, IGNORE_INDEX};
use personaseg::grouping::{embed_images, kmeans, Descriptor, GroupBatcher, KMeansConfig, PixelHistogramDescriptor};
use personaseg::losses::{adv_losses, entropy_from_logits, entropy_map, pseudo_loss, seg_loss, DiscInput};
use personaseg::metrics::{
    make_report, render_ablation_table, render_class_table, render_user_table, EvalReport, FiouMode, Metric,
    UserEvaluation,
};
use personaseg::networks::{build_desk_model, DiscConfig, Discriminator, ModelConfig, Precision};
use personaseg::nn::ParamStore;
use personaseg::pipeline::{cluster_personal, run_two_stage, RunConfig, RunDir, METRICS_FILE, REPORT_FILE};
use personaseg::training::{select_from_predictions, MetricsLog, Prediction};
use personaseg::Result;

type Check = Result<(bool, String)>;

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn tensor(data: &[f64], dims: &[usize]) -> Tensor {
    Tensor::from_vec(data.to_vec(), dims, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// context math

/// Dense copy of an affine map: `w[o][i]`, `b[o]`.
struct Dense {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Dense {
    fn of(a: &personaseg::nn::Affine) -> Self {
        Self {
            w: a.weight.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap(),
            b: flat(&a.bias),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

struct Instance {
    n: usize,
    ch: usize,
    c: usize,
    h: usize,
    w: usize,
    features: Vec<f64>,
    aux: Vec<f64>,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng, n: usize, ch: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            ch,
            c,
            h,
            w,
            features: normal(rng, n * ch * h * w, 1.0),
            aux: normal(rng, n * c * h * w, 1.5),
        }
    }

    fn features(&self) -> Tensor {
        tensor(&self.features, &[self.n, self.ch, self.h, self.w])
    }

    fn aux(&self) -> Tensor {
        tensor(&self.aux, &[self.n, self.c, self.h, self.w])
    }

    fn x(&self, n: usize, k: usize, p: usize) -> f64 {
        self.features[(n * self.ch + k) * self.h * self.w + p]
    }

    /// `[n][c][k]` soft class regions by explicit loops.
    fn regions(&self, spatial: bool) -> Vec<Vec<Vec<f64>>> {
        let hw = self.h * self.w;
        let mut out = vec![vec![vec![0.0; self.ch]; self.c]; self.n];
        for n in 0..self.n {
            let mut r = vec![vec![0.0; hw]; self.c];
            for p in 0..hw {
                let logits: Vec<f64> = (0..self.c).map(|c| self.aux[(n * self.c + c) * hw + p]).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..self.c {
                    r[c][p] = (logits[c] - m).exp() / z;
                }
            }
            for c in 0..self.c {
                let mass: f64 = r[c].iter().sum::<f64>() + 1e-6;
                for k in 0..self.ch {
                    let mut acc = 0.0;
                    for p in 0..hw {
                        acc += r[c][p] * self.x(n, k, p);
                    }
                    out[n][c][k] = if spatial { acc / mass } else { acc };
                }
            }
        }
        out
    }

    /// Context and enhanced features, both (N, CH, H, W) flattened.
    fn group_context(&self, regions: &[Vec<Vec<f64>>], params: &GroupContextParams) -> (Vec<f64>, Vec<f64>) {
        let (q, k, v, o, f) = (
            Dense::of(&params.query),
            Dense::of(&params.key),
            Dense::of(&params.value),
            Dense::of(&params.output),
            Dense::of(&params.fuse),
        );
        let bank: Vec<&Vec<f64>> = regions.iter().flatten().collect();
        let keys: Vec<Vec<f64>> = bank.iter().map(|r| k.apply(r)).collect();
        let values: Vec<Vec<f64>> = bank.iter().map(|r| v.apply(r)).collect();
        let hw = self.h * self.w;
        let mut ctx = vec![0.0; self.n * self.ch * hw];
        let mut enh = vec![0.0; self.n * self.ch * hw];
        for n in 0..self.n {
            for p in 0..hw {
                let x: Vec<f64> = (0..self.ch).map(|c| self.x(n, c, p)).collect();
                let qp = q.apply(&x);
                let scores: Vec<f64> = keys.iter().map(|kj| kj.iter().zip(&qp).map(|(a, b)| a * b).sum()).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                let mut agg = vec![0.0; self.ch];
                for (s, vj) in scores.iter().zip(&values) {
                    let a = (s - m).exp() / z;
                    for (g, vv) in agg.iter_mut().zip(vj) {
                        *g += a * vv;
                    }
                }
                let c_p = o.apply(&agg);
                let joined: Vec<f64> = x.iter().chain(&c_p).copied().collect();
                let e_p = f.apply(&joined);
                for c in 0..self.ch {
                    ctx[(n * self.ch + c) * hw + p] = c_p[c];
                    enh[(n * self.ch + c) * hw + p] = e_p[c];
                }
            }
        }
        (ctx, enh)
    }
}

fn context_oracle() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(&mut rng, 3, 8, 5, 4, 4);
        let mut store = ParamStore::new(1000 + seed, DType::F64);
        let params = GroupContextParams::new_random(&mut store, "ctx", 8, 6)?;
        for (norm, spatial) in [(RegionNorm::SoftmaxSpatial, true), (RegionNorm::SoftmaxOnly, false)] {
            let bank = extract_regions(&inst.features(), &inst.aux(), norm)?;
            let oracle = inst.regions(spatial);
            let expect: Vec<f64> = oracle.iter().flatten().flatten().copied().collect();
            worst = worst.max(max_abs_diff(&flat(bank.tensor()), &expect));

            let ctx = aggregate_group_context(&inst.features(), &bank, &params)?;
            let enh = enhance(&inst.features(), &ctx, &params)?;
            let (ctx_o, enh_o) = inst.group_context(&oracle, &params);
            worst = worst.max(max_abs_diff(&flat(&ctx), &ctx_o));
            worst = worst.max(max_abs_diff(&flat(&enh), &enh_o));
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst < 1e-5 && elapsed < Duration::from_secs(30),
        format!("50 instances, max |diff| {worst:.2e} (< 1e-5), {:.2} s (< 30 s)", elapsed.as_secs_f64()),
    ))
}

// ---------------------------------------------------------------------------
// gradients

/// Largest relative error between backprop and central differences over
/// `probes` random coordinates of every variable.
fn grad_check(vars: &[Var], loss: &dyn Fn() -> Result<Tensor>, rng: &mut ChaCha8Rng, probes: usize) -> Result<f64> {
    let l = loss()?;
    let grads = l.backward()?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for var in vars {
        let dims = var.dims().to_vec();
        let base = flat(var.as_tensor());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g),
            None => vec![0.0; base.len()],
        };
        for _ in 0..probes {
            let i = rng.random_range(0..base.len());
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            var.set(&tensor(&probe, &dims))?;
            let plus = flat(&loss()?)[0];
            probe[i] = base[i] - h;
            var.set(&tensor(&probe, &dims))?;
            let minus = flat(&loss()?)[0];
            var.set(&tensor(&base, &dims))?;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn random_var(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Var {
    let n = dims.iter().product();
    Var::from_tensor(&tensor(&normal(rng, n, scale), dims)).unwrap()
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize, classes: usize, ignore: f64) -> Vec<u8> {
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < ignore {
                IGNORE_INDEX
            } else {
                rng.random_range(0..classes) as u8
            }
        })
        .collect()
}

fn context_param_vars(store: &ParamStore) -> Vec<Var> {
    store.trainable().map(|(_, v)| v.clone()).collect()
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut results: Vec<(String, f64)> = Vec::new();

    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let (n, ch, c, h, w) = (2, 4, 3, 3, 3);
        let x = random_var(&mut rng, &[n, ch, h, w], 1.0);
        let a = random_var(&mut rng, &[n, c, h, w], 1.0);
        let mut store = ParamStore::new(seed, DType::F64);
        let params = GroupContextParams::new_random(&mut store, "ctx", ch, 3)?;
        let weights = tensor(&normal(&mut rng, n * ch * h * w, 1.0), &[n, ch, h, w]);
        let norm = if seed % 2 == 0 {
            RegionNorm::SoftmaxSpatial
        } else {
            RegionNorm::SoftmaxOnly
        };
        let loss = || -> Result<Tensor> {
            let bank = extract_regions(x.as_tensor(), a.as_tensor(), norm)?;
            let ctx = aggregate_group_context(x.as_tensor(), &bank, &params)?;
            let out = enhance(x.as_tensor(), &ctx, &params)?;
            Ok(out.mul(&weights)?.sum_all()?)
        };
        let mut vars = vec![x.clone(), a.clone()];
        vars.extend(context_param_vars(&store));
        results.push((format!("context#{seed}"), grad_check(&vars, &loss, &mut rng, 4)?));
    }

    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(80 + seed);
        let (n, c, h, w) = (2, 4, 4, 4);
        let logits = random_var(&mut rng, &[n, c, h, w], 2.0);
        let targets = random_targets(&mut rng, n * h * w, c, 0.2);
        let loss = || Ok(seg_loss(logits.as_tensor(), &targets)?.loss);
        results.push((format!("seg#{seed}"), grad_check(&[logits.clone()], &loss, &mut rng, 12)?));

        let pseudo = random_targets(&mut rng, n * h * w, c, 0.5);
        let loss = || Ok(pseudo_loss(logits.as_tensor(), &pseudo)?.loss);
        results.push((format!("pse#{seed}"), grad_check(&[logits.clone()], &loss, &mut rng, 12)?));
    }

    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(90 + seed);
        let (n, c, h, w) = (2, 3, 16, 16);
        let src = random_var(&mut rng, &[n, c, h, w], 1.0);
        let per = random_var(&mut rng, &[n, c, h, w], 1.0);
        let config = DiscConfig {
            widths: [3, 4, 4],
            ..DiscConfig::default()
        };
        let disc = Discriminator::new(&config, c, seed, DType::F64)?;
        let run = |which: bool| -> Result<Tensor> {
            let e_s = DiscInput::Entropy.map(src.as_tensor())?;
            let e_p = DiscInput::Entropy.map(per.as_tensor())?;
            let l = adv_losses(&e_s, &e_p, &|m| disc.forward(m))?;
            Ok(if which { l.adv } else { l.disc })
        };
        let mut vars = vec![per.clone()];
        vars.extend(disc.store().trainable().map(|(_, v)| v.clone()));
        results.push((format!("adv#{seed}"), grad_check(&vars, &|| run(true), &mut rng, 6)?));
        let vars: Vec<Var> = disc.store().trainable().map(|(_, v)| v.clone()).collect();
        results.push((format!("disc#{seed}"), grad_check(&vars, &|| run(false), &mut rng, 6)?));
    }

    let elapsed = start.elapsed();
    let (name, worst) = results
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, r| if r.1 >= acc.1 { r } else { acc });
    Ok((
        worst < 1e-3 && results.len() >= 20 && elapsed < Duration::from_secs(120),
        format!(
            "{} instances, worst relative error {worst:.2e} ({name}, < 1e-3), {:.1} s (< 120 s)",
            results.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------------------
// normalization

fn normalization_invariants() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut row_err = 0.0f64;
    for _ in 0..10 {
        let inst = Instance::random(&mut rng, 3, 8, 5, 4, 4);
        let mut store = ParamStore::new(rng.random(), DType::F64);
        let params = GroupContextParams::new_random(&mut store, "ctx", 8, 6)?;
        let bank = extract_regions(&inst.features(), &inst.aux(), RegionNorm::SoftmaxSpatial)?;
        let a = attention_weights(&inst.features(), &bank, &params)?.to_vec2::<f64>()?;
        for row in a {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            ok &= row.iter().all(|v| *v >= 0.0);
        }
    }
    ok &= row_err <= 1e-6;
    notes.push(format!("attention row sums off by {row_err:.1e}"));

    let (mut lo, mut hi_excess, mut uni_err, mut hot) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for c in [2usize, 5, 21] {
        let ln_c = (c as f64).ln();
        let logits = tensor(&normal(&mut rng, 2 * c * 6 * 6, 3.0), &[2, c, 6, 6]);
        let probs = personaseg::nn::softmax(&logits, 1)?;
        for e in [flat(&entropy_map(&probs)?), flat(&entropy_from_logits(&logits)?)] {
            lo = lo.min(e.iter().cloned().fold(f64::INFINITY, f64::min));
            hi_excess = hi_excess.max(e.iter().map(|v| v - ln_c).fold(f64::NEG_INFINITY, f64::max));
        }

        let uniform = Tensor::full(1.0 / c as f64, (1, c, 3, 3), &Device::Cpu)?;
        let zeros = Tensor::zeros((1, c, 3, 3), DType::F64, &Device::Cpu)?;
        for e in [flat(&entropy_map(&uniform)?), flat(&entropy_from_logits(&zeros)?)] {
            uni_err = uni_err.max(e.iter().map(|v| (v - ln_c).abs()).fold(0.0, f64::max));
        }

        let mut onehot = vec![0.0; c * 9];
        for p in 0..9 {
            onehot[(p % c) * 9 + p] = 1.0;
        }
        let e = flat(&entropy_map(&tensor(&onehot, &[1, c, 3, 3]))?);
        hot = hot.max(e.iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    ok &= lo >= 0.0 && hi_excess <= 1e-12 && uni_err <= 1e-6 && hot == 0.0;
    notes.push(format!(
        "entropy min {lo:.2e}, max - ln C {hi_excess:.1e}, |uniform - ln C| {uni_err:.1e}, one-hot {hot:.1e}"
    ));
    Ok((ok, notes.join("; ")))
}

// ---------------------------------------------------------------------------
// identity init

fn identity_init() -> Check {
    let synth = generate_synthetic(&SynthSpec {
        n_source: 8,
        n_personal: 8,
        ..SynthSpec::default()
    })?;
    let images: Vec<_> = synth.personal.samples.iter().take(6).map(|s| &s.image).collect();
    let mut worst = 0.0f64;
    for (seed, precision) in [(0u64, Precision::F32), (1, Precision::F32), (2, Precision::F64)] {
        let config = ModelConfig {
            precision,
            ..ModelConfig::desk(4)
        };
        let mut model = build_desk_model(&config, seed)?;
        let x = model.batch_tensor(&images)?;
        let group = model.forward(&x, personaseg::context::BankSource::FromBatch)?;
        model.set_variant(ContextVariant::None);
        let none = model.forward(&x, personaseg::context::BankSource::Absent)?;
        worst = worst.max(max_abs_diff(&flat(&group.logits), &flat(&none.logits)));
    }
    Ok((worst <= 1e-6, format!("max |group - none| {worst:.1e} (<= 1e-6)")))
}

// ---------------------------------------------------------------------------
// metrics

struct Pair {
    user: usize,
    gt: Vec<u8>,
    pred: Vec<u8>,
}

fn metric_pairs(rng: &mut ChaCha8Rng, classes: usize) -> Vec<Pair> {
    (0..100)
        .map(|i| {
            let empty = i % 17 == 3;
            let pixel = |rng: &mut ChaCha8Rng| {
                if empty {
                    0
                } else if rng.random::<f64>() < 0.5 {
                    0
                } else {
                    rng.random_range(1..classes) as u8
                }
            };
            let gt = (0..64)
                .map(|_| {
                    if rng.random::<f64>() < 0.1 {
                        IGNORE_INDEX
                    } else {
                        pixel(rng)
                    }
                })
                .collect();
            let pred = (0..64).map(|_| pixel(rng)).collect();
            Pair { user: i % 3, gt, pred }
        })
        .collect()
}

/// Brute-force class IoU, MIoU and FIoU of one user's pairs.
fn metric_oracle(pairs: &[&Pair], classes: usize) -> (Vec<Option<f64>>, Option<f64>, Option<f64>) {
    let mut class_iou = Vec::new();
    for c in 0..classes as u8 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for pair in pairs {
            for (&g, &p) in pair.gt.iter().zip(&pair.pred) {
                if g == IGNORE_INDEX {
                    continue;
                }
                match (g == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
        }
        class_iou.push((tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64));
    }
    let present: Vec<f64> = class_iou.iter().flatten().copied().collect();
    let miou = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    let mut per_image = Vec::new();
    for pair in pairs {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&g, &p) in pair.gt.iter().zip(&pair.pred) {
            if g == IGNORE_INDEX {
                continue;
            }
            if g > 0 && p > 0 {
                inter += 1;
            }
            if g > 0 || p > 0 {
                union += 1;
            }
        }
        if union > 0 {
            per_image.push(inter as f64 / union as f64);
        }
    }
    let fiou = (!per_image.is_empty()).then(|| per_image.iter().sum::<f64>() / per_image.len() as f64);
    (class_iou, miou, fiou)
}

fn metric_oracle_check() -> Check {
    let classes = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs = metric_pairs(&mut rng, classes);
    let mut evals: Vec<UserEvaluation> = (0..3)
        .map(|u| UserEvaluation::new(&format!("user{u}"), classes, FiouMode::Binary))
        .collect();
    for (i, p) in pairs.iter().enumerate() {
        evals[p.user].add_image(&format!("img{i:03}"), &p.gt, &p.pred)?;
    }
    let report = make_report(evals)?;
    let mut mismatches = Vec::new();
    let (mut mious, mut fious) = (Vec::new(), Vec::new());
    for u in 0..3 {
        let mine: Vec<&Pair> = pairs.iter().filter(|p| p.user == u).collect();
        let (class_iou, miou, fiou) = metric_oracle(&mine, classes);
        let got = report.user(&format!("user{u}")).expect("user in report");
        if got.class_iou != class_iou {
            mismatches.push(format!("user{u} class IoU"));
        }
        if got.miou != miou {
            mismatches.push(format!("user{u} MIoU"));
        }
        if got.fiou != fiou {
            mismatches.push(format!("user{u} FIoU"));
        }
        mious.extend(miou);
        fious.extend(fiou);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    if report.mean_miou != Some(mean(&mious)) || report.mean_fiou != Some(mean(&fious)) {
        mismatches.push("user means".into());
    }

    let rendered = render_tables(&report);
    let tables_ok = rendered.iter().all(|(labels, text)| labels.iter().all(|l| text.contains(l)));
    if !tables_ok {
        mismatches.push("table rendering".into());
    }
    Ok((
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "100 pairs over 3 users equal the counting oracle; user, class and ablation tables render".into()
        } else {
            format!("mismatch in {}", mismatches.join(", "))
        },
    ))
}

/// Renders the three ablation layouts plus user and class tables; returns the
/// labels each text must contain.
fn render_tables(report: &EvalReport) -> Vec<(Vec<String>, String)> {
    let mut out = Vec::new();
    let layouts: [(&str, Vec<&str>); 3] = [
        ("Context", vec!["None", "Global", "Group"]),
        ("Groups", vec!["1", "10", "80", "200"]),
        ("Data", vec!["Personal", "MixSample", "MixAll"]),
    ];
    for (title, labels) in layouts {
        let rows: Vec<(String, Vec<&EvalReport>)> = labels.iter().map(|l| (l.to_string(), vec![report])).collect();
        let text = render_ablation_table(title, &rows);
        let mut expect: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
        expect.push(title.to_string());
        expect.push(personaseg::metrics::fmt_cell(report.mean_fiou));
        out.push((expect, text));
    }
    let users = render_user_table(&[("S1", report)], Metric::Fiou);
    out.push((vec!["user0".into(), "user2".into(), "S1".into()], users));
    out.push((vec!["1".into()], render_class_table(report, None)));
    out
}

// ---------------------------------------------------------------------------
// pseudo labels

fn prediction(rng: &mut ChaCha8Rng, id: String, entropy: Option<f32>) -> Prediction {
    let n = 64;
    Prediction {
        id,
        height: 8,
        width: 8,
        labels: (0..n).map(|_| rng.random_range(0..4u8)).collect(),
        entropy: (0..n).map(|_| entropy.unwrap_or_else(|| rng.random::<f32>() * 1.3)).collect(),
    }
}

fn pseudo_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut notes = Vec::new();
    let mut ok = true;

    let preds: Vec<Prediction> = (0..100).map(|i| prediction(&mut rng, format!("p{i:03}"), None)).collect();
    let set = select_from_predictions(&preds, 0.5, 0.8)?;
    let mut by_entropy: Vec<(f64, &str)> = preds.iter().map(|p| (p.mean_entropy(), p.id.as_str())).collect();
    by_entropy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    let expected: BTreeSet<&str> = by_entropy.iter().take(50).map(|(_, id)| *id).collect();
    let got: BTreeSet<&str> = set.masks.keys().map(String::as_str).collect();
    ok &= set.len() == 50 && got == expected;
    notes.push(format!("r=0.5 kept {} of 100 lowest-entropy images", set.len()));

    // all images tie: the lexicographically first ids win, whatever the input order
    let mut tied: Vec<Prediction> = (0..100).map(|i| prediction(&mut rng, format!("t{i:03}"), Some(0.4))).collect();
    let first = select_from_predictions(&tied, 0.5, 0.8)?;
    tied.shuffle(&mut rng);
    let again = select_from_predictions(&tied, 0.5, 0.8)?;
    let lowest: BTreeSet<String> = (0..50).map(|i| format!("t{i:03}")).collect();
    let tie_ok = first == again && first.masks.keys().cloned().collect::<BTreeSet<_>>() == lowest;
    ok &= tie_ok;
    notes.push(format!("ties by id {}", if tie_ok { "stable" } else { "UNSTABLE" }));

    let none = select_from_predictions(&preds, 0.5, 1.0)?;
    let all = select_from_predictions(&preds, 0.5, 0.0)?;
    let none_masked = none.masks.values().all(|m| m.data().iter().all(|&v| v != IGNORE_INDEX));
    let all_masked = all.masks.values().all(|m| m.data().iter().all(|&v| v == IGNORE_INDEX));
    ok &= none_masked && all_masked;
    notes.push(format!("q=1 masks none: {none_masked}, q=0 masks all: {all_masked}"));
    Ok((ok, notes.join("; ")))
}

// ---------------------------------------------------------------------------
// k-means and batching

fn blobs(rng: &mut ChaCha8Rng, n: usize, dim: usize, centers: usize) -> Vec<Descriptor> {
    let means: Vec<Vec<f64>> = (0..centers).map(|_| normal(rng, dim, 3.0)).collect();
    (0..n)
        .map(|i| {
            let m = &means[rng.random_range(0..centers)];
            Descriptor {
                id: format!("d{i:04}"),
                vector: m.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)).collect(),
            }
        })
        .collect()
}

fn kmeans_batching() -> Check {
    let mut problems = BTreeSet::new();
    let mut cases = 0;
    let synth = generate_synthetic(&SynthSpec {
        n_source: 8,
        n_personal: 120,
        ..SynthSpec::default()
    })?;
    let images = embed_images(&synth.personal.samples, &PixelHistogramDescriptor::default())?;
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let descriptors = if seed % 3 == 0 {
            images.clone()
        } else {
            blobs(&mut rng, 150 + 10 * seed as usize, 5, 6)
        };
        for k in [1usize, 3, 4, 10] {
            cases += 1;
            let config = KMeansConfig::new(k, seed);
            let c = kmeans(&descriptors, &config)?;
            if c.objective.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
                problems.insert("objective increased");
            }
            if c != kmeans(&descriptors, &config)? {
                problems.insert("clustering not deterministic");
            }
            let a = &c.assignment;
            let ids: BTreeSet<&str> = descriptors.iter().map(|d| d.id.as_str()).collect();
            let mapped: BTreeSet<&str> = a.mapping.keys().map(String::as_str).collect();
            let members = a.members();
            let total: usize = members.iter().map(Vec::len).sum();
            if ids != mapped || total != ids.len() || a.mapping.values().any(|&g| g >= k) || members.len() != k {
                problems.insert("partition not exact");
            }
            if members.iter().any(Vec::is_empty) {
                problems.insert("empty cluster");
            }

            let all: Vec<String> = a.mapping.keys().cloned().collect();
            let batcher = GroupBatcher::new(a, &all, 8, false, seed)?;
            for epoch in 0..3 {
                let batches = batcher.epoch(epoch);
                if batches != batcher.epoch(epoch) {
                    problems.insert("batches not deterministic");
                }
                let mut seen = BTreeMap::new();
                for b in &batches {
                    let groups: BTreeSet<usize> = b.iter().map(|id| a.mapping[id]).collect();
                    if groups.len() != 1 || b.is_empty() || b.len() > 8 {
                        problems.insert("batch spans groups");
                    }
                    for id in b {
                        *seen.entry(id.clone()).or_insert(0) += 1;
                    }
                }
                if seen.len() != all.len() || seen.values().any(|&v| v != 1) {
                    problems.insert("epoch does not cover every image once");
                }
            }
        }
    }
    Ok((
        problems.is_empty(),
        if problems.is_empty() {
            format!("{cases} clusterings: monotone objective, exact partitions, single-group batches, reproducible")
        } else {
            problems.into_iter().collect::<Vec<_>>().join(", ")
        },
    ))
}

// ---------------------------------------------------------------------------
// desk-scale runs

const DESK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Target FIoU per run. `source_only` and `none` share the context-free
/// network and differ only in the adversarial weight.
struct SeedRuns {
    source_only: f64,
    none: f64,
    group_s1: f64,
    group_s2: f64,
}

struct DeskRuns {
    seeds: Vec<SeedRuns>,
    /// None and group runs (the ablation proper).
    ablation_time: Duration,
    source_only_time: Duration,
}

fn fiou(report: &EvalReport) -> f64 {
    report.mean_fiou.unwrap_or(0.0)
}

fn desk_runs() -> &'static std::result::Result<DeskRuns, String> {
    static RUNS: OnceLock<std::result::Result<DeskRuns, String>> = OnceLock::new();
    RUNS.get_or_init(|| run_desk().map_err(|e| e.to_string()))
}

fn run_desk() -> Result<DeskRuns> {
    let mut seeds = Vec::new();
    let (mut ablation_time, mut source_only_time) = (Duration::ZERO, Duration::ZERO);
    for &seed in &DESK_SEEDS {
        let base = RunConfig::desk().with_seed(seed);
        let t = Instant::now();
        let synth = generate_synthetic(&base.data.synth)?;
        let groups = cluster_personal(&synth.personal, &base.grouping, base.cluster_seed(), None)?;
        let eval = [(&synth.personal, &groups)];
        let setup = t.elapsed();
        let mut log = MetricsLog::in_memory();

        let t = Instant::now();
        let mut none_cfg = base.clone();
        none_cfg.model.variant = ContextVariant::None;
        let none = run_two_stage(&none_cfg, &synth.source, &synth.personal, &groups, &eval, false, &mut log)?;
        let group = run_two_stage(&base, &synth.source, &synth.personal, &groups, &eval, true, &mut log)?;
        ablation_time += setup + t.elapsed();

        let t = Instant::now();
        let mut src_cfg = none_cfg.clone();
        src_cfg.train.lambda_adv = 0.0;
        let src = run_two_stage(&src_cfg, &synth.source, &synth.personal, &groups, &eval, false, &mut log)?;
        source_only_time += t.elapsed();

        let runs = SeedRuns {
            source_only: fiou(&src.step1),
            none: fiou(&none.step1),
            group_s1: fiou(&group.step1),
            group_s2: group.step2.as_ref().map(fiou).unwrap_or(0.0),
        };
        eprintln!(
            "  seed {seed}: source-only {:.4}  none {:.4}  group S1 {:.4}  group S2 {:.4}",
            runs.source_only, runs.none, runs.group_s1, runs.group_s2
        );
        seeds.push(runs);
    }
    Ok(DeskRuns {
        seeds,
        ablation_time,
        source_only_time,
    })
}

fn series(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| format!("{:.1}", 100.0 * v)).collect::<Vec<_>>().join("/")
}

fn desk_ablation() -> Check {
    let runs = match desk_runs() {
        Ok(r) => r,
        Err(e) => return Ok((false, format!("desk runs failed: {e}"))),
    };
    let group_wins = runs.seeds.iter().filter(|s| s.group_s1 > s.none).count();
    let s2_wins = runs.seeds.iter().filter(|s| s.group_s2 >= s.group_s1).count();
    let minutes = runs.ablation_time.as_secs_f64() / 60.0;
    Ok((
        group_wins >= 4 && s2_wins >= 4 && minutes < 30.0,
        format!(
            "group > none in {group_wins}/5 (group {} vs none {}), S2 >= S1 in {s2_wins}/5 (S2 {}), {minutes:.1} min (< 30)",
            series(runs.seeds.iter().map(|s| s.group_s1)),
            series(runs.seeds.iter().map(|s| s.none)),
            series(runs.seeds.iter().map(|s| s.group_s2)),
        ),
    ))
}

fn adaptation_direction() -> Check {
    let runs = match desk_runs() {
        Ok(r) => r,
        Err(e) => return Ok((false, format!("desk runs failed: {e}"))),
    };
    let wins = runs.seeds.iter().filter(|s| s.none > s.source_only).count();
    Ok((
        wins >= 4,
        format!(
            "adversarial S1 > source-only in {wins}/5 ({} vs {}), source-only runs {:.1} min",
            series(runs.seeds.iter().map(|s| s.none)),
            series(runs.seeds.iter().map(|s| s.source_only)),
            runs.source_only_time.as_secs_f64() / 60.0
        ),
    ))
}

// ---------------------------------------------------------------------------
// determinism

fn small_run_config() -> RunConfig {
    let mut config = RunConfig::desk().with_seed(9);
    config.name = "determinism".into();
    config.data.synth.n_source = 48;
    config.data.synth.n_personal = 48;
    config.train.steps_step1 = 12;
    config.train.steps_step2 = 6;
    config
}

fn determinism() -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut metrics = Vec::new();
    let mut reports = Vec::new();
    for d in &dirs {
        let run = RunDir::create(d.path(), &small_run_config())?;
        run.run_all()?;
        metrics.push(std::fs::read(run.path(METRICS_FILE)).unwrap());
        reports.push(std::fs::read(run.path(REPORT_FILE)).unwrap());
    }
    let lines = String::from_utf8_lossy(&metrics[0]).lines().count();
    let same = metrics[0] == metrics[1] && lines > 0;
    Ok((
        same && reports[0] == reports[1],
        format!(
            "two runs: metrics.jsonl ({lines} lines) {}, report.json {}",
            if same { "byte-identical" } else { "DIFFERENT" },
            if reports[0] == reports[1] { "byte-identical" } else { "DIFFERENT" }
        ),
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("context-oracle", context_oracle),
        ("gradient-suite", gradient_suite),
        ("normalization-invariants", normalization_invariants),
        ("identity-init", identity_init),
        ("metric-oracle", metric_oracle_check),
        ("pseudo-selection", pseudo_contract),
        ("kmeans-batching", kmeans_batching),
        ("determinism", determinism),
        ("desk-ablation-direction", desk_ablation),
        ("adaptation-direction", adaptation_direction),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in &criteria {
            println!("{name}: test");
        }
        return;
    }
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let (pass, detail) = match outcome {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => (
                false,
                format!(
                    "panic: {}",
                    p.downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default()
                ),
            ),
        };
        failed += !pass as usize;
        println!(
            "{} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
