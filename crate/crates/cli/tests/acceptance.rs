//! Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero if any fails.
//!
//! The few-shot experiment trains a small backbone and the frozen extractor from
//! scratch, so a full run takes about fifteen minutes on one core.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dafkit::augment::{
    balanced_batch, build_dafusion_policy, build_store, choose_augmentation, class_positions, generate_record,
    group_by_class, preserve_mask, ConceptMode, GenerationContext, Origin,
};
use dafkit::denoiser::{
    decode_checkpoint, encode_checkpoint, finetune_concepts, gradient_check, Checkpoint, GradCheckScope,
    ScheduleParams,
};
use dafkit::fewshot::{
    auc_over_q, confidence_interval_68, gen_toy_dataset, mean_pairwise_distance, normalize_scores, run_experiment,
    train_backbone, train_extractor, Backbone, BackboneConfig, ExperimentConfig, ExperimentReport, ExtractorConfig,
    Method, MethodSummary, ToyDatasetSpec,
};
use dafkit::rng::{gaussian, gaussian_image};
use dafkit::sampler::{guided_noise, inpaint_blend, reverse_step, sdedit, sdedit_masked};
use dafkit::schedule::{forward_sample, make_linear_schedule, splice_index};
use dafkit::{
    AugmentationPolicy, ConceptKey, ConceptTable, DatasetRecord, EpsilonNet, Granularity, ImageTensor, MaskRole,
    MaskTensor, MixerConfig, NetConfig, NoisePredictor, RngStream, SamplerConfig, TrainConfig,
};
use dafkit_cli::manifest::RunManifest;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(
        elapsed <= Duration::from_secs(limit_s),
        format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- oracles

fn oracle_alpha_bars(betas: &[f64]) -> Vec<f64> {
    let mut out = vec![1.0];
    for b in betas {
        let prev = *out.last().unwrap();
        out.push(prev * (1.0 - b));
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Noise prediction that depends on the input, the timestep and the embedding.
struct Wobble;

impl NoisePredictor for Wobble {
    fn predict(&self, x_t: &ImageTensor, t: usize, w: &[f64]) -> dafkit::Result<ImageTensor> {
        let gain = 0.3 + 0.001 * t as f64;
        let off: f64 = w.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum();
        Ok(x_t.map(|x| gain * x.sin() + off))
    }
    fn cond_dim(&self) -> usize {
        3
    }
}

fn random_image<R: Rng>(rng: &mut R, h: usize, w: usize, c: usize) -> ImageTensor {
    gaussian_image(rng, h, w, c)
}

// ---------------------------------------------------------------- criterion 1

fn equation_suite() -> Outcome {
    let start = Instant::now();
    let schedule = make_linear_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let betas = schedule.betas().to_vec();
    let abar = oracle_alpha_bars(&betas);
    let mut rng = RngStream::root(101).rng();
    let mut worst: f64 = 0.0;

    for _ in 0..300 {
        let (h, w, c) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4));
        let t = rng.random_range(1..=1000);
        let x = random_image(&mut rng, h, w, c);
        let eps = random_image(&mut rng, h, w, c);
        let z = random_image(&mut rng, h, w, c);

        let fwd = forward_sample(&x, t, &eps, &schedule).unwrap();
        let expect: Vec<f64> =
            x.data.iter().zip(&eps.data).map(|(a, e)| abar[t].sqrt() * a + (1.0 - abar[t]).sqrt() * e).collect();
        worst = worst.max(max_abs_diff(&fwd.data, &expect));

        let b = betas[t - 1];
        let rev = reverse_step(&x, t, &eps, &schedule, Some(&z)).unwrap();
        let expect: Vec<f64> = (0..x.len())
            .map(|i| (x.data[i] - b / (1.0 - abar[t]).sqrt() * eps.data[i]) / (1.0 - b).sqrt() + b.sqrt() * z.data[i])
            .collect();
        worst = worst.max(max_abs_diff(&rev.data, &expect));

        let tb = rng.random_range(0..=1000);
        let v: Vec<f64> = (0..h * w)
            .map(|_| if rng.random::<bool>() { rng.random::<f64>() } else { rng.random_range(0..2) as f64 })
            .collect();
        let mask = MaskTensor::from_vec(h, w, v.clone()).unwrap();
        let blend = inpaint_blend(&x, &z, &mask, tb, &eps, &schedule).unwrap();
        let expect: Vec<f64> = (0..x.len())
            .map(|i| {
                let m = v[i % (h * w)];
                let known = abar[tb].sqrt() * z.data[i] + (1.0 - abar[tb]).sqrt() * eps.data[i];
                (1.0 - m) * x.data[i] + m * known
            })
            .collect();
        worst = worst.max(max_abs_diff(&blend.data, &expect));

        let mut table = ConceptTable::new(3, &RngStream::root(5));
        let wc: Vec<f64> = (0..3).map(|_| gaussian(&mut rng)).collect();
        table.insert(ConceptKey::Class(0), wc.clone(), true).unwrap();
        let s = rng.random_range(-1.0..10.0);
        let g = guided_noise(&Wobble, &table, &x, t, ConceptKey::Class(0), s).unwrap();
        let eu = Wobble.predict(&x, t, table.null()).unwrap();
        let ec = Wobble.predict(&x, t, &wc).unwrap();
        let expect: Vec<f64> = eu.data.iter().zip(&ec.data).map(|(u, c)| u + s * (c - u)).collect();
        worst = worst.max(max_abs_diff(&g.data, &expect));

        let steps = rng.random_range(1..200);
        let t0: f64 = rng.random();
        let by_count = (1..=steps).filter(|k| *k as f64 <= steps as f64 * t0).count();
        check(splice_index(steps, t0).unwrap() == by_count, format!("splice_index({steps}, {t0})"))?;
    }
    check(worst <= 1e-10, format!("max deviation from oracles {worst:e}"))?;

    // Boundary identities, compared bit for bit.
    let mut table = ConceptTable::new(3, &RngStream::root(5));
    table.insert(ConceptKey::Class(0), vec![0.4, -0.1, 0.2], true).unwrap();
    let cfg = SamplerConfig { steps: 25, guidance_scale: 2.0, final_noise: false };
    let x = random_image(&mut rng, 4, 4, 3);
    let eta = random_image(&mut rng, 4, 4, 3);
    let r = random_image(&mut rng, 4, 4, 3);
    let stream = RngStream::root(9);
    check(splice_index(25, 0.0).unwrap() == 0 && splice_index(25, 1.0).unwrap() == 25, "splice endpoints")?;
    let same = sdedit(&x, 0.0, &Wobble, &table, &schedule, &cfg, ConceptKey::Class(0), &stream).unwrap();
    check(same == x, "t0 = 0 must return the reference")?;
    let kept = inpaint_blend(&x, &r, &MaskTensor::zeros(4, 4), 300, &eta, &schedule).unwrap();
    check(kept == x, "v = 0 must return x_t")?;
    let pinned = inpaint_blend(&x, &r, &MaskTensor::ones(4, 4), 300, &eta, &schedule).unwrap();
    let known = r.zip_with(&eta, |a, e| schedule.alpha_bar(300).sqrt() * a + (1.0 - schedule.alpha_bar(300)).sqrt() * e);
    check(pinned == known, "v = 1 must return the noised reference")?;
    let at_zero = inpaint_blend(&x, &r, &MaskTensor::ones(4, 4), 0, &eta, &schedule).unwrap();
    check(at_zero == r, "v = 1 at t = 0 must return the reference")?;
    let eu = Wobble.predict(&x, 10, table.null()).unwrap();
    let ec = Wobble.predict(&x, 10, table.get(ConceptKey::Class(0)).unwrap()).unwrap();
    check(guided_noise(&Wobble, &table, &x, 10, ConceptKey::Class(0), 0.0).unwrap() == eu, "s = 0")?;
    check(guided_noise(&Wobble, &table, &x, 10, ConceptKey::Class(0), 1.0).unwrap() == ec, "s = 1")?;
    within(start.elapsed(), 10)?;
    Ok(format!("max oracle deviation {worst:.1e}, boundary identities exact"))
}

// ---------------------------------------------------------------- criterion 2

fn statistical_suite() -> Outcome {
    let start = Instant::now();
    let schedule = make_linear_schedule(10, 0.01, 0.2).map_err(|e| e.to_string())?;
    let x0 = [0.8, -0.5, 0.1, 1.0];
    let n = 10_000;
    let mut rng = RngStream::root(202).rng();
    // sums[t][p] and squares[t][p] over samples of the iterated chain.
    let mut sums = vec![[0.0; 4]; 11];
    let mut squares = vec![[0.0; 4]; 11];
    for _ in 0..n {
        let mut x = x0;
        for t in 1..=10 {
            let b = schedule.beta(t);
            for (p, v) in x.iter_mut().enumerate() {
                *v = (1.0 - b).sqrt() * *v + b.sqrt() * gaussian(&mut rng);
                sums[t][p] += *v;
                squares[t][p] += *v * *v;
            }
        }
    }
    let mut worst_z: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for t in 1..=10 {
        let ab = schedule.alpha_bar(t);
        for p in 0..4 {
            let mean = sums[t][p] / n as f64;
            let var = (squares[t][p] - n as f64 * mean * mean) / (n - 1) as f64;
            let z = (mean - ab.sqrt() * x0[p]) / (var / n as f64).sqrt();
            worst_z = worst_z.max(z.abs());
            worst_var = worst_var.max((var / (1.0 - ab) - 1.0).abs());
        }
    }
    check(worst_z < 4.0, format!("forward mean off by {worst_z:.2} standard errors"))?;
    check(worst_var < 0.05, format!("forward variance off by {:.1}%", 100.0 * worst_var))?;

    let spec = ToyDatasetSpec { per_class: 3, resolution: 8, ..ToyDatasetSpec::default() };
    let data = gen_toy_dataset(&spec).map_err(|e| e.to_string())?;
    let net = EpsilonNet::new(
        NetConfig { height: 8, width: 8, widths: [2, 2, 2], cond_dim: 3, time_dim: 4, hidden: 4, ..NetConfig::default() },
        &RngStream::root(1),
    )
    .map_err(|e| e.to_string())?;
    let table = ConceptTable::new(3, &RngStream::root(2));
    let sched = ScheduleParams::default().build().map_err(|e| e.to_string())?;
    let ctx = GenerationContext {
        net: &net,
        table: &table,
        schedule: &sched,
        sampler: SamplerConfig::default(),
        concept_mode: ConceptMode::Null,
        mask_dilation: 1,
        workers: 1,
    };
    let store = build_store(&data, &AugmentationPolicy::identity(), 3, &ctx, &RngStream::root(3)).map_err(|e| e.to_string())?;
    let mut worst_alpha: f64 = 0.0;
    for alpha in [0.3, 0.5, 0.7] {
        let mix = MixerConfig { alpha, batch_size: 32 };
        let mut rng = RngStream::root(303).rng();
        let (mut slots, mut synthetic) = (0usize, 0usize);
        while slots < 100_000 {
            let batch = balanced_batch(&data, Some(&store), &mix, &mut rng).map_err(|e| e.to_string())?;
            slots += batch.len();
            synthetic += batch.iter().filter(|b| b.origin == Origin::Synthetic).count();
        }
        let frac = synthetic as f64 / slots as f64;
        worst_alpha = worst_alpha.max((frac - alpha).abs());
        check((frac - alpha).abs() <= 0.01, format!("alpha {alpha}: synthetic fraction {frac:.4}"))?;
    }

    let policy = build_dafusion_policy(4, None).map_err(|e| e.to_string())?;
    let mut counts = [0usize; 4];
    let mut rng = RngStream::root(404).rng();
    for _ in 0..100_000 {
        counts[choose_augmentation(&policy, &mut rng)] += 1;
    }
    let worst_p = counts.iter().map(|c| (*c as f64 / 100_000.0 - 0.25).abs()).fold(0.0, f64::max);
    check(worst_p <= 0.01, format!("entry frequencies {counts:?}"))?;
    within(start.elapsed(), 60)?;
    Ok(format!(
        "forward |z| <= {worst_z:.2}, variance within {:.2}%, alpha within {worst_alpha:.4}, entry frequencies within {worst_p:.4}",
        100.0 * worst_var
    ))
}

// ---------------------------------------------------------------- criterion 3

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let schedule = ScheduleParams::default().build().map_err(|e| e.to_string())?;
    let cfg = NetConfig { height: 16, width: 16, widths: [4, 8, 8], cond_dim: 8, time_dim: 8, hidden: 16, ..NetConfig::default() };
    let net = EpsilonNet::new(cfg, &RngStream::root(31)).map_err(|e| e.to_string())?;
    let mut table = ConceptTable::new(8, &RngStream::root(32));
    let mut rng = RngStream::root(33).rng();
    table
        .insert(ConceptKey::Class(0), (0..8).map(|_| 0.5 * gaussian(&mut rng)).collect(), true)
        .unwrap();
    let spec = ToyDatasetSpec { per_class: 2, resolution: 16, ..ToyDatasetSpec::default() };
    let data = gen_toy_dataset(&spec).map_err(|e| e.to_string())?;
    let batch: Vec<(ImageTensor, ConceptKey)> = data
        .iter()
        .take(4)
        .enumerate()
        .map(|(i, r)| (r.image.clone(), if i % 2 == 0 { ConceptKey::Class(0) } else { ConceptKey::Null }))
        .collect();
    let err = gradient_check(&net, &table, &batch, &schedule, &RngStream::root(34), GradCheckScope::Full { param_coords: 150 })
        .map_err(|e| e.to_string())?;
    check(err < 1e-4, format!("max relative gradient error {err:e}"))?;

    let before = net.params.values.clone();
    let groups = group_by_class(&data);
    let inv = TrainConfig { steps: 20, ..TrainConfig::default() };
    let learned = finetune_concepts(&net, &table, &groups, Granularity::Pooled, &schedule, &inv).map_err(|e| e.to_string())?;
    let changed = net.params.values.iter().zip(&before).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    check(changed == 0, format!("{changed} backbone coordinates changed"))?;
    check(learned.null() == table.null(), "null embedding changed")?;
    within(start.elapsed(), 60)?;
    Ok(format!("max relative error {err:.2e} over 150 parameters and one embedding, 0 backbone coordinates changed"))
}

// ---------------------------------------------------------------- shared trained model

struct Trained {
    net: EpsilonNet,
    table: ConceptTable,
    schedule: dafkit::NoiseSchedule,
    setup: Duration,
}

fn trained_backbone() -> Result<Trained, String> {
    let start = Instant::now();
    let cfg = BackboneConfig {
        net: NetConfig { widths: [8, 16, 32], ..NetConfig::default() },
        train: TrainConfig { steps: 2500, ..TrainConfig::backbone() },
        per_class: 200,
        ..BackboneConfig::default()
    };
    let (net, table) = train_backbone(&cfg, |_, _| {}).map_err(|e| e.to_string())?;
    // Round-trip through the checkpoint format so the model matches what the CLI reloads.
    let ckpt = Checkpoint { schedule: cfg.schedule.clone(), net, table, config: serde_json::Value::Null };
    let ckpt = decode_checkpoint(&encode_checkpoint(&ckpt).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let schedule = ckpt.schedule.build().map_err(|e| e.to_string())?;
    Ok(Trained { net: ckpt.net, table: ckpt.table, schedule, setup: start.elapsed() })
}

fn sampler() -> SamplerConfig {
    SamplerConfig { steps: 20, guidance_scale: 3.0, ..SamplerConfig::default() }
}

fn inversion() -> TrainConfig {
    TrainConfig { steps: 200, lr: 5e-3, ..TrainConfig::default() }
}

// ---------------------------------------------------------------- criterion 4

fn masked_edit(model: &Trained) -> Outcome {
    let start = Instant::now();
    let spec = ToyDatasetSpec { per_class: 5, seed: 44, ..ToyDatasetSpec::default() };
    let data = gen_toy_dataset(&spec).map_err(|e| e.to_string())?;
    let mut rng = RngStream::root(404).rng();
    let cfg = sampler();
    let mut edited_min = f64::INFINITY;
    for (pair, record) in data.iter().enumerate() {
        let n = record.image.height;
        let keep = match pair % 3 {
            0 => preserve_mask(record.object_mask().unwrap(), MaskRole::Foreground, 1).unwrap(),
            1 => preserve_mask(record.object_mask().unwrap(), MaskRole::Background, 1).unwrap(),
            _ => {
                let (y0, x0) = (rng.random_range(0..n / 2), rng.random_range(0..n / 2));
                let (y1, x1) = (rng.random_range(y0 + 4..n), rng.random_range(x0 + 4..n));
                let v = (0..n * n).map(|p| ((y0..y1).contains(&(p / n)) && (x0..x1).contains(&(p % n))) as u8 as f64).collect();
                MaskTensor::from_vec(n, n, v).unwrap()
            }
        };
        let t0 = [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)];
        let out = sdedit_masked(
            &record.image,
            &keep,
            t0,
            &model.net,
            &model.table,
            &model.schedule,
            &cfg,
            ConceptKey::Null,
            &RngStream::root(400 + pair as u64),
        )
        .map_err(|e| e.to_string())?;
        let plane = n * n;
        let (mut moved, mut free) = (0.0, 0usize);
        for (i, (o, x)) in out.data.iter().zip(&record.image.data).enumerate() {
            if keep.data[i % plane] == 1.0 {
                check(o.to_bits() == x.to_bits(), format!("pair {pair}: preserved pixel {i} changed"))?;
            } else {
                moved += (o - x).abs();
                free += 1;
            }
        }
        if free > 0 {
            edited_min = edited_min.min(moved / free as f64);
        }
    }
    check(edited_min > 0.0, "an edited region came back unchanged")?;
    within(start.elapsed(), 300)?;
    Ok(format!(
        "{} pairs preserved exactly, smallest mean edit outside the mask {edited_min:.3}",
        data.len()
    ))
}

// ---------------------------------------------------------------- criteria 5 and 6

fn experiment(model: &Trained) -> Result<(ExperimentReport, Duration), String> {
    let start = Instant::now();
    let ext = train_extractor(&ExtractorConfig::default(), 32).map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig {
        q_grid: vec![1, 2, 4, 8],
        trials: 8,
        m: 5,
        methods: vec![
            Method::Baseline,
            Method::RealGuidance,
            Method::Dafusion { k: 4, t0: None, mask: None },
            Method::Dafusion { k: 1, t0: Some(0.5), mask: None },
            Method::IdentityControl,
        ],
        sampler: sampler(),
        inversion: inversion(),
        ..ExperimentConfig::default()
    };
    cfg.dataset.seed = 1;
    cfg.probe.steps = 1000;
    cfg.probe.lr = 1e-3;
    cfg.probe.eval_every = 100;
    let records = gen_toy_dataset(&cfg.dataset).map_err(|e| e.to_string())?;
    let bb = Backbone { net: &model.net, table: &model.table, schedule: &model.schedule };
    let report = run_experiment(&cfg, &records, Some(&bb), &ext).map_err(|e| e.to_string())?;
    Ok((report, start.elapsed() + model.setup))
}

fn summary<'a>(report: &'a ExperimentReport, method: &Method) -> Result<&'a MethodSummary, String> {
    let name = method.name();
    report.summaries.iter().find(|s| s.method == name).ok_or(format!("no summary for {name}"))
}

fn auc_line(s: &MethodSummary) -> String {
    format!(
        "{} {:.4} [{:.4}, {:.4}]",
        s.method,
        s.auc.unwrap_or(f64::NAN),
        s.auc_ci_low.unwrap_or(f64::NAN),
        s.auc_ci_high.unwrap_or(f64::NAN)
    )
}

fn fewshot_directional(report: &ExperimentReport, elapsed: Duration) -> Outcome {
    check(report.is_complete(), format!("{} failed cells", report.failed_cells()))?;
    check(report.audit.ok(), "generative stages touched validation images")?;
    let base = summary(report, &Method::Baseline)?;
    let rg = summary(report, &Method::RealGuidance)?;
    let daf = summary(report, &Method::Dafusion { k: 4, t0: None, mask: None })?;
    let ctrl = summary(report, &Method::IdentityControl)?;
    for s in [base, rg, daf, ctrl] {
        println!("    {}", auc_line(s));
    }
    let (b, d) = (base.auc.unwrap(), daf.auc.unwrap());
    check(d > b, format!("dafusion AUC {d:.4} does not exceed baseline {b:.4}"))?;
    let lo = base.auc_ci_low.unwrap().max(ctrl.auc_ci_low.unwrap());
    let hi = base.auc_ci_high.unwrap().min(ctrl.auc_ci_high.unwrap());
    check(lo <= hi, "identity control CI does not overlap the baseline CI")?;
    within(elapsed, 3600)?;
    Ok(format!(
        "dafusion - baseline = {:+.4}, identity control - baseline = {:+.4} with overlapping CIs",
        d - b,
        ctrl.auc.unwrap() - b
    ))
}

/// Mean over images of the mean pairwise distance among `m` augmentations.
fn diversity(model: &Trained, table: &ConceptTable, data: &[DatasetRecord], policy: &AugmentationPolicy, m: usize) -> f64 {
    let ctx = GenerationContext {
        net: &model.net,
        table,
        schedule: &model.schedule,
        sampler: sampler(),
        concept_mode: ConceptMode::Learned,
        mask_dilation: 1,
        workers: 1,
    };
    let positions = class_positions(data);
    let rng = RngStream::root(606);
    let per_image: Vec<f64> = (0..data.len())
        .map(|i| {
            let imgs: Vec<ImageTensor> = (0..m)
                .map(|j| generate_record(data, &positions, policy, &ctx, &rng, i, j).image.expect("generation succeeds"))
                .collect();
            mean_pairwise_distance(&imgs)
        })
        .collect();
    per_image.iter().sum::<f64>() / per_image.len() as f64
}

fn stacking_ablation(model: &Trained, report: &ExperimentReport) -> Outcome {
    let k4 = summary(report, &Method::Dafusion { k: 4, t0: None, mask: None })?;
    let k1 = summary(report, &Method::Dafusion { k: 1, t0: Some(0.5), mask: None })?;
    check(report.is_complete(), format!("{} failed cells", report.failed_cells()))?;
    check(k4.per_trial_auc.len() == report.trials && k1.per_trial_auc.len() == report.trials, "missing trial AUCs")?;
    let diffs: Vec<f64> = k4.per_trial_auc.iter().zip(&k1.per_trial_auc).map(|(a, b)| a - b).collect();
    let (gap, gap_lo, gap_hi) = confidence_interval_68(&diffs).map_err(|e| e.to_string())?;
    println!("    {}", auc_line(k4));
    println!("    {}", auc_line(k1));
    println!("    AUC(k=4) - AUC(k=1) = {gap:+.4} [{gap_lo:+.4}, {gap_hi:+.4}] (recorded, not gated)");

    let spec = ToyDatasetSpec { per_class: 5, seed: 66, ..ToyDatasetSpec::default() };
    let data = gen_toy_dataset(&spec).map_err(|e| e.to_string())?;
    let table = finetune_concepts(&model.net, &model.table, &group_by_class(&data), Granularity::Pooled, &model.schedule, &inversion())
        .map_err(|e| e.to_string())?;
    let stacked = build_dafusion_policy(4, None).map_err(|e| e.to_string())?;
    let single = build_dafusion_policy(1, None).and_then(|p| p.with_fixed_t0(0.5)).map_err(|e| e.to_string())?;
    let d4 = diversity(model, &table, &data, &stacked, 10);
    let d1 = diversity(model, &table, &data, &single, 10);
    check(d4 > d1, format!("stacked diversity {d4:.3} does not exceed single-strength {d1:.3}"))?;
    Ok(format!("cells complete, mean pairwise distance k=4 {d4:.3} > k=1 {d1:.3} over {} images", data.len()))
}

// ---------------------------------------------------------------- criterion 7

fn oracle_auc(curve: &[(f64, f64)]) -> f64 {
    // Weight each accuracy by half the log-width of its neighbouring intervals.
    let x: Vec<f64> = curve.iter().map(|(q, _)| q.ln() / std::f64::consts::LN_2).collect();
    let n = x.len();
    let mut area = 0.0;
    for i in 0..n {
        let left = if i > 0 { x[i] - x[i - 1] } else { 0.0 };
        let right = if i + 1 < n { x[i + 1] - x[i] } else { 0.0 };
        area += curve[i].1 * (left + right) / 2.0;
    }
    area / (x[n - 1] - x[0])
}

fn oracle_ci(samples: &[f64]) -> (f64, f64, f64) {
    // Welford's running mean and sum of squared deviations.
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, s) in samples.iter().enumerate() {
        let d = s - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (s - mean);
    }
    let n = samples.len() as f64;
    let sem = (m2 / (n - 1.0) / n).sqrt();
    (mean, mean - sem, mean + sem)
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::root(707).rng();
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let len = rng.random_range(2..8);
        let mut q = rng.random_range(0.5..2.0);
        let curve: Vec<(f64, f64)> = (0..len)
            .map(|_| {
                q *= rng.random_range(1.1..3.0);
                (q, rng.random::<f64>())
            })
            .collect();
        worst = worst.max((auc_over_q(&curve).unwrap() - oracle_auc(&curve)).abs());

        let ys: Vec<f64> = (0..len).map(|_| rng.random_range(0.2..0.9)).collect();
        let (lo, hi) = (rng.random_range(0.0..0.2), rng.random_range(0.9..1.0));
        let norm = normalize_scores(&ys, lo, hi).unwrap();
        for (n, y) in norm.iter().zip(&ys) {
            worst = worst.max((n - (y - lo) / (hi - lo)).abs());
        }
        let ends = normalize_scores(&[lo, hi], lo, hi).unwrap();
        check(ends == vec![0.0, 1.0], format!("endpoints map to {ends:?}"))?;

        let (m, l, h) = confidence_interval_68(&ys).unwrap();
        let (om, ol, oh) = oracle_ci(&ys);
        worst = worst.max((m - om).abs()).max((l - ol).abs()).max((h - oh).abs());
    }
    check(worst <= 1e-12, format!("max deviation from oracles {worst:e}"))?;
    within(start.elapsed(), 5)?;
    Ok(format!("2000 random cases, max deviation {worst:.1e}, endpoints exact"))
}

// ---------------------------------------------------------------- criterion 8

const REPRO_CONFIG: &str = r#"
seed = 11

[table1]
synthetic_images_per_real = 2
stacked_augmentations = 2
textual_inversion_training_steps = 5
denoising_steps = 4
resolution = 16
classifier_batch_size = 8
classifier_training_steps = 40
classifier_early_stopping_interval = 10

[dataset.toy]
families = ["circle", "square", "triangle"]
per_class = 5
resolution = 16

[backbone]
widths = [4, 8, 8]
per_class = 6

[backbone.train]
steps = 30

[extractor]
widths = [4, 8, 8]
per_class = 6
steps = 30

[experiment]
q_grid = [1, 2, 4]
trials = 2
methods = ["baseline", "real-guidance", "dafusion"]
"#;

fn dafkit(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dafkit"))
        .args(args)
        .env_remove("DAFKIT_WORKERS")
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("dafkit {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)),
    )
}

fn outputs(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    let m = RunManifest::read(dir).map_err(|e| e.to_string())?;
    check(m.mismatches(dir).is_empty(), format!("manifest hashes disagree with files: {:?}", m.mismatches(dir)))?;
    Ok(m.outputs.into_iter().map(|f| (f.path, f.hash)).collect())
}

fn one_pipeline(root: &Path, config: &Path, tag: &str) -> Result<BTreeMap<String, String>, String> {
    let c = config.to_str().unwrap();
    let dir = |stage: &str| root.join(format!("{tag}-{stage}"));
    let (train, inv, aug, few) = (dir("train"), dir("invert"), dir("augment"), dir("fewshot"));
    let p = |d: &Path| d.to_str().unwrap().to_string();
    dafkit(&["train", "--config", c, "--out", &p(&train)])?;
    let backbone = train.join("backbone.dafkit");
    dafkit(&["invert", "--config", c, "--out", &p(&inv), "--checkpoint", &p(&backbone)])?;
    dafkit(&["augment", "--config", c, "--out", &p(&aug), "--checkpoint", &p(&inv.join("concepts.dafkit"))])?;
    dafkit(&["fewshot", "--config", c, "--out", &p(&few), "--from", &p(&train)])?;
    let mut all = BTreeMap::new();
    for (stage, d) in [("train", &train), ("invert", &inv), ("augment", &aug), ("fewshot", &few)] {
        for (path, hash) in outputs(d)? {
            all.insert(format!("{stage}/{path}"), hash);
        }
    }
    Ok(all)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("repro.toml");
    std::fs::write(&config, REPRO_CONFIG).map_err(|e| e.to_string())?;
    let a = one_pipeline(tmp.path(), &config, "a")?;
    let b = one_pipeline(tmp.path(), &config, "b")?;
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    check(a.len() == b.len() && differing.is_empty(), format!("outputs differ between reruns: {differing:?}"))?;
    for key in ["train/backbone.dafkit", "invert/concepts.dafkit", "augment/store/manifest.json", "fewshot/report/metrics.csv"] {
        check(a.contains_key(key), format!("{key} missing from the run manifests"))?;
    }
    let metrics_a = std::fs::read(tmp.path().join("a-fewshot/report/metrics.csv")).map_err(|e| e.to_string())?;
    let metrics_b = std::fs::read(tmp.path().join("b-fewshot/report/metrics.csv")).map_err(|e| e.to_string())?;
    check(metrics_a == metrics_b, "metrics.csv differs between reruns")?;
    Ok(format!("{} hashed outputs identical across two full reruns, metrics.csv byte-identical", a.len()))
}

// ---------------------------------------------------------------- driver

fn report(id: &str, name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS {id} {name}: {detail}"),
        Err(why) => {
            *failures += 1;
            println!("FAIL {id} {name}: {why}");
        }
    }
}

fn main() {
    let mut failures = 0;
    report("1", "equation suite", equation_suite(), &mut failures);
    report("2", "statistical suite", statistical_suite(), &mut failures);
    report("3", "gradient suite", gradient_suite(), &mut failures);
    report("7", "metric oracles", metric_oracles(), &mut failures);
    report("8", "reproducibility", reproducibility(), &mut failures);

    match trained_backbone() {
        Ok(model) => {
            report("4", "masked-edit guarantee", masked_edit(&model), &mut failures);
            match experiment(&model) {
                Ok((rep, elapsed)) => {
                    report("5", "few-shot experiment", fewshot_directional(&rep, elapsed), &mut failures);
                    report("6", "stacking ablation", stacking_ablation(&model, &rep), &mut failures);
                }
                Err(e) => {
                    report("5", "few-shot experiment", Err(e.clone()), &mut failures);
                    report("6", "stacking ablation", Err(e), &mut failures);
                }
            }
        }
        Err(e) => {
            for (id, name) in [("4", "masked-edit guarantee"), ("5", "few-shot experiment"), ("6", "stacking ablation")] {
                report(id, name, Err(format!("backbone training failed: {e}")), &mut failures);
            }
        }
    }

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
