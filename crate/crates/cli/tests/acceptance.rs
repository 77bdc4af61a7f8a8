//! Acceptance criteria, one test each. Every test prints a single
//! `[acceptance] N PASS|FAIL ...` line to stderr before asserting.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use spkdistill::numerics::{cosine_similarity, dot, gaussian_draw, log_softmax, logsumexp, norm, softmax};
use spkdistill::objectives::{asoftmax_ce, emd_cosine, emd_cosine_batch, kld_distill, softmax_ce, TeacherOutputs};
use spkdistill::regularizers::{l1_sp_penalty, l2_norm_penalty, l2_sp_penalty, split_l2_sp_penalty, PenaltyOutput};
use spkdistill::training::{batch_objective, finetune, EpochLog, FineTuneConfig};
use spkdistill::{
    compute_eer, extract_embeddings, forward, generate_corpus, make_trials, random_subspace, replace_classifier,
    select_groups, train_baseline, train_student, train_teacher, ClassLoss, Corpus, CorpusSpec, DistillationConfig,
    Domain, DomainShift, EncoderConfig, FeatureSequence, Gradients, LayerSelection, LengthClass, LrSchedule, Matrix,
    ParameterSet, Pooling, Regularizer, Rng, SpReference, TrainConfig, TrialList,
};

const H: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
/// Denominator floor of the relative error, so entries that are both
/// essentially zero do not count as failures.
const REL_FLOOR: f64 = 1e-6;

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {n} {verdict} {title}: {detail}");
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error of `analytic` against central differences of `f` at `x`.
fn fd_vec(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.to_vec();
        p[i] += H;
        let fp = f(&p);
        p[i] = x[i] - H;
        let fm = f(&p);
        worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * H)));
    }
    worst
}

/// Same over every scalar of a parameter set.
fn fd_params(params: &ParameterSet, f: impl Fn(&ParameterSet) -> f64, analytic: &Gradients) -> f64 {
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for g in 0..params.groups().len() {
        for t in 0..params.groups()[g].values.len() {
            for k in 0..params.groups()[g].values[t].as_slice().len() {
                let orig = params.groups()[g].values[t].as_slice()[k];
                p.groups_mut()[g].values[t].as_mut_slice()[k] = orig + H;
                let fp = f(&p);
                p.groups_mut()[g].values[t].as_mut_slice()[k] = orig - H;
                let fm = f(&p);
                p.groups_mut()[g].values[t].as_mut_slice()[k] = orig;
                worst = worst.max(rel_err(analytic.groups[g][t].as_slice()[k], (fp - fm) / (2.0 * H)));
            }
        }
    }
    worst
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn small_encoder(pooling: Pooling, tap: spkdistill::network::EmbeddingTap, context: usize) -> EncoderConfig {
    EncoderConfig {
        input_dim: 3,
        block_widths: vec![4, 5],
        conv_context: context,
        pooling,
        lde_components: 3,
        embedding_dim: 4,
        num_classes: 3,
        embedding_tap: tap,
    }
}

#[test]
fn criterion_1_gradient_integrity() {
    use spkdistill::network::EmbeddingTap::{PostActivation, PreActivation};
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut lines = Vec::new();

    // (a) every layer kind, through the whole network, both upstream paths
    let mut layers: f64 = 0.0;
    for (pooling, tap, context) in [
        (Pooling::Lde, PostActivation, 3),
        (Pooling::Mean, PreActivation, 1),
        (Pooling::Lde, PreActivation, 5),
        (Pooling::Mean, PostActivation, 3),
    ] {
        let params = ParameterSet::init(small_encoder(pooling, tap, context), &mut rng).unwrap();
        let x = gaussian_draw(&mut rng, 0.0, 1.0, 7, 3).unwrap();
        let a = normals(&mut rng, 3);
        let b = normals(&mut rng, 4);
        let f = |p: &ParameterSet| {
            let t = forward(p, &x).unwrap();
            dot(&a, &t.logits) + dot(&b, &t.embedding)
        };
        let trace = forward(&params, &x).unwrap();
        let mut grads = params.zeros_like();
        spkdistill::backward(&params, &trace, Some(&a), Some(&b), &mut grads, None).unwrap();
        layers = layers.max(fd_params(&params, f, &grads));
    }
    lines.push(("layers", layers));

    // (b) each loss
    let z = normals(&mut rng, 6);
    let (_, g) = softmax_ce(&z, 2).unwrap();
    lines.push(("softmax_ce", fd_vec(|z| softmax_ce(z, 2).unwrap().0, &z, &g)));

    for m in [1, 2] {
        let w = gaussian_draw(&mut rng, 0.0, 1.0, 5, 4).unwrap();
        let e = normals(&mut rng, 4);
        let out = asoftmax_ce(&w, &e, 1, m).unwrap();
        let de = fd_vec(|e| asoftmax_ce(&w, e, 1, m).unwrap().value, &e, &out.d_embedding);
        let dw = fd_vec(
            |wv| asoftmax_ce(&Matrix::from_vec(5, 4, wv.to_vec()).unwrap(), &e, 1, m).unwrap().value,
            w.as_slice(),
            out.d_weights.as_slice(),
        );
        lines.push((if m == 1 { "asoftmax m=1" } else { "asoftmax m=2" }, de.max(dw)));
    }

    let zt = normals(&mut rng, 6);
    let zs = normals(&mut rng, 6);
    let (_, g) = kld_distill(&zt, &zs, 1.0).unwrap();
    lines.push(("teacher-posterior CE", fd_vec(|z| kld_distill(&zt, z, 1.0).unwrap().0, &zs, &g)));

    let et = normals(&mut rng, 5);
    let es = normals(&mut rng, 5);
    let (_, g) = emd_cosine(&et, &es).unwrap();
    lines.push(("negative cosine", fd_vec(|e| emd_cosine(&et, e).unwrap().0, &es, &g)));

    // (c) regularizers, kept clear of the L1 kinks
    let cfg = small_encoder(Pooling::Lde, PostActivation, 3);
    let start_point = ParameterSet::init(cfg, &mut rng).unwrap();
    let live = replace_classifier(&start_point, 4, &mut rng).unwrap();
    let mut live = live;
    for (g, g0) in live.groups_mut().iter_mut().zip(start_point.groups()) {
        if g.values.iter().zip(&g0.values).all(|(a, b)| a.shape() == b.shape()) {
            for (v, v0) in g.values.iter_mut().zip(&g0.values) {
                for (x, x0) in v.as_mut_slice().iter_mut().zip(v0.as_slice()) {
                    let step = 0.05 + 0.1 * rng.uniform();
                    *x = x0 + if rng.uniform() < 0.5 { -step } else { step };
                }
            }
        }
    }
    let mask = select_groups(&live, LayerSelection::All);
    let reference = SpReference::for_model(start_point.snapshot(), &live, &mask).unwrap();
    type Pen<'a> = Box<dyn Fn(&ParameterSet) -> PenaltyOutput + 'a>;
    let penalties: Vec<(&str, Pen<'_>)> = vec![
        ("l2-norm", Box::new(|p| l2_norm_penalty(p, None, 0.3, true).unwrap())),
        ("l2-sp", Box::new(|p| l2_sp_penalty(p, &reference.without_modified(), None, 0.3, true).unwrap())),
        ("split l2-sp", Box::new(|p| split_l2_sp_penalty(p, &reference, None, 0.3, 0.07, true).unwrap())),
        ("l1-sp", Box::new(|p| l1_sp_penalty(p, &reference, None, 0.3, 0.07, true).unwrap())),
    ];
    for (name, pen) in &penalties {
        let g = pen(&live).grads;
        lines.push((name, fd_params(&live, |p| pen(p).value, &g)));
    }

    // (d) the full composite objective through the network, both heads
    let student = ParameterSet::init(small_encoder(Pooling::Lde, PostActivation, 3), &mut rng).unwrap();
    let teachers: Vec<TeacherOutputs> =
        (0..3).map(|_| TeacherOutputs { logits: normals(&mut rng, 3), embedding: normals(&mut rng, 4) }).collect();
    let items: Vec<_> =
        (0..3).map(|i| (gaussian_draw(&mut rng, 0.0, 1.0, 6 + i, 3).unwrap(), i % 3, Some(&teachers[i]))).collect();
    for (name, class_loss) in [("composite softmax", ClassLoss::Softmax), ("composite A-softmax", ClassLoss::Asoftmax)]
    {
        let loss = DistillationConfig {
            weight_kld: 0.7,
            weight_emd: 1.3,
            ..DistillationConfig::with_terms(class_loss, true, true)
        };
        let (_, g) = batch_objective(&student, None, &loss, &items).unwrap();
        lines.push((name, fd_params(&student, |p| batch_objective(p, None, &loss, &items).unwrap().0, &g)));
    }

    let worst = lines.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let detail: Vec<String> = lines.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let pass = worst < FD_TOL && elapsed < 120.0;
    report(1, "gradient integrity", pass, &format!("worst {worst:.2e} in {elapsed:.1}s [{}]", detail.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_2_loss_identities() {
    let mut rng = Rng::new(7);

    // teacher posterior against itself: the loss is the teacher entropy
    let mut kld_err: f64 = 0.0;
    let mut kld_grad: f64 = 0.0;
    for _ in 0..100 {
        let z: Vec<f64> = normals(&mut rng, 10).iter().map(|v| 3.0 * v).collect();
        let (v, g) = kld_distill(&z, &z, 1.0).unwrap();
        let entropy: f64 = -log_softmax(&z).iter().zip(softmax(&z)).map(|(l, p)| p * l).sum::<f64>();
        kld_err = kld_err.max((v - entropy).abs());
        kld_grad = kld_grad.max(norm(&g));
    }

    // identical pairs give exactly −batch size
    let mut emd_exact = true;
    for batch in [1, 7, 64, 333] {
        let embs: Vec<Vec<f64>> = (0..batch).map(|_| normals(&mut rng, 16).iter().map(|v| v * 4.0).collect()).collect();
        let v = emd_cosine_batch(embs.iter().map(|e| (e.as_slice(), e.as_slice()))).unwrap();
        emd_exact &= v == -(batch as f64);
    }

    // margin 1 against an independent normalized softmax
    let mut asm_err: f64 = 0.0;
    for _ in 0..1000 {
        let classes = 2 + (rng.next_u64() % 9) as usize;
        let dim = 2 + (rng.next_u64() % 9) as usize;
        let w = gaussian_draw(&mut rng, 0.0, 1.0, classes, dim).unwrap();
        let e = normals(&mut rng, dim);
        let y = (rng.next_u64() % classes as u64) as usize;
        let logits: Vec<f64> = (0..classes).map(|j| dot(w.row(j), &e) / norm(w.row(j))).collect();
        let oracle = logsumexp(&logits) - logits[y];
        asm_err = asm_err.max((asoftmax_ce(&w, &e, y, 1).unwrap().value - oracle).abs());
    }

    let pass = kld_err <= 1e-12 && kld_grad < 1e-10 && emd_exact && asm_err <= 1e-12;
    report(
        2,
        "loss identities",
        pass,
        &format!(
            "posterior CE vs entropy {kld_err:.1e}, grad norm {kld_grad:.1e}; identical-pair cosine exact: {emd_exact}; margin-1 vs normalized softmax {asm_err:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_regularizer_identities() {
    use spkdistill::network::EmbeddingTap::PostActivation;
    let mut rng = Rng::new(11);
    let start_point = ParameterSet::init(small_encoder(Pooling::Lde, PostActivation, 3), &mut rng).unwrap();
    let all = select_groups(&start_point, LayerSelection::All);

    let mut zeroed = start_point.clone();
    for g in zeroed.groups_mut() {
        for v in &mut g.values {
            v.fill(0.0);
        }
    }
    let l2_zero = l2_norm_penalty(&zeroed, None, 0.1, true).unwrap();

    let shared_only = SpReference::for_model(start_point.snapshot(), &start_point, &all).unwrap();
    let l2sp_zero = l2_sp_penalty(&start_point, &shared_only, None, 0.1, true).unwrap();

    // minimizer of the split penalties: shared at the start point, new classifier at zero
    let mut replaced = replace_classifier(&start_point, 5, &mut rng).unwrap();
    let reference = SpReference::for_model(start_point.snapshot(), &replaced, &all).unwrap();
    for name in reference.modified_groups().to_vec() {
        for v in &mut replaced.group_mut(&name).unwrap().values {
            v.fill(0.0);
        }
    }
    let split_zero = split_l2_sp_penalty(&replaced, &reference, None, 0.1, 0.01, true).unwrap();
    let l1_zero = l1_sp_penalty(&replaced, &reference, None, 0.1, 0.01, true).unwrap();
    let minimizers = [&l2_zero, &l2sp_zero, &split_zero, &l1_zero].iter().all(|p| p.value == 0.0 && p.grads.is_zero());

    // empty modified set: split L2-SP is plain L2-SP
    let mut moved = start_point.clone();
    for g in moved.groups_mut() {
        for v in &mut g.values {
            for x in v.as_mut_slice() {
                *x += 0.1 * rng.normal();
            }
        }
    }
    let a = split_l2_sp_penalty(&moved, &shared_only, None, 0.1, 0.01, true).unwrap();
    let b = l2_sp_penalty(&moved, &shared_only, None, 0.1, true).unwrap();
    let reduces = shared_only.modified_groups().is_empty()
        && a.value == b.value
        && a.grads.groups.iter().zip(&b.grads.groups).all(|(x, y)| x == y);

    // α = 0.1, β = 0.01 through the CLI, echoed verbatim
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    let mut cfg: serde_json::Value = serde_json::from_str(common::TINY_CONFIG).unwrap();
    cfg["finetune"]["regularizer"] = "split_l2sp".into();
    cfg["finetune"]["alpha"] = 0.1.into();
    cfg["finetune"]["beta"] = 0.01.into();
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    common::pipeline(dir.path(), cfg_path.to_str().unwrap());
    let echo = std::fs::read_to_string(dir.path().join("finetune/config.json")).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("finetune/metrics.jsonl")).unwrap();
    let penalized = metrics.lines().all(|l| {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        v["penalty"].as_f64().is_some_and(|p| p > 0.0)
    });
    let verbatim = echo.contains("\"regularizer\": \"split_l2sp\"")
        && echo.contains("\"alpha\": 0.1,")
        && echo.contains("\"beta\": 0.01,")
        && penalized;

    let pass = minimizers && reduces && verbatim;
    report(
        3,
        "regularizer identities",
        pass,
        &format!("zero at minimizers: {minimizers}; split with empty modified set = l2-sp: {reduces}; alpha 0.1 / beta 0.01 echoed and applied: {verbatim}"),
    );
    assert!(pass);
}

/// Exhaustive sweep: every candidate threshold is counted from scratch.
fn eer_oracle(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(f64::INFINITY);
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    let rates = |t: f64| {
        let miss = scores.iter().zip(labels).filter(|(s, &l)| l && **s < t).count();
        let fa = scores.iter().zip(labels).filter(|(s, &l)| !l && **s >= t).count();
        (miss as f64 / n_tar as f64, fa as f64 / n_non as f64)
    };
    let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &thresholds {
        let (frr, far) = rates(t);
        let d = frr - far;
        if d == 0.0 {
            return (far, t);
        }
        if d > 0.0 {
            let (pfrr, pfar, pt) = prev.expect("the first candidate has FRR 0 and FAR 1");
            let dp = pfrr - pfar;
            let lambda = -dp / (d - dp);
            let t0 = if pt.is_finite() { pt } else { lo };
            let t1 = if t.is_finite() { t } else { hi };
            return (pfar + lambda * (far - pfar), t0 + lambda * (t1 - t0));
        }
        prev = Some((frr, far, t));
    }
    unreachable!()
}

#[test]
fn criterion_4_eer_oracle() {
    let mut rng = Rng::new(99);
    let mut mismatches = 0;
    let mut not_invariant = 0;
    for case in 0..1000 {
        let n = 2 + (rng.next_u64() % 499) as usize;
        let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.3).collect();
        labels[0] = true;
        labels[1] = false;
        // every third set is coarsely quantized to force ties
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s = rng.normal() + if l { 1.0 } else { 0.0 };
                if case % 3 == 0 {
                    (s * 4.0).round() / 4.0
                } else {
                    s
                }
            })
            .collect();
        let got = compute_eer(&scores, &labels).unwrap();
        if got != eer_oracle(&scores, &labels) {
            mismatches += 1;
        }
        for transform in [f64::exp as fn(f64) -> f64, |s| 2.0 * s + 3.0] {
            let mapped: Vec<f64> = scores.iter().map(|&s| transform(s)).collect();
            if compute_eer(&mapped, &labels).unwrap().0 != got.0 {
                not_invariant += 1;
            }
        }
    }
    let pass = mismatches == 0 && not_invariant == 0;
    report(
        4,
        "EER oracle equivalence",
        pass,
        &format!("1000 score sets: {mismatches} oracle mismatches, {not_invariant} changes under exp and 2s+3"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    common::pipeline(&a, &cfg);
    common::pipeline(&b, &cfg);
    let files = [
        "data/source.spkc",
        "data/target_ft.spkc",
        "data/target_eval.spkc",
        "data/trials.tsv",
        "data/config.json",
        "teacher/model.spkm",
        "teacher/config.json",
        "student/model.spkm",
        "finetune/model.spkm",
        "eval/scores.tsv",
        "eval/report.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    let pass = differing.is_empty();
    report(8, "determinism", pass, &format!("{} files compared, differing: {differing:?}", files.len()));
    assert!(pass);
}

#[test]
fn criterion_9_smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path());
    let start = Instant::now();
    let eval = common::pipeline(dir.path(), &cfg);
    let elapsed = start.elapsed().as_secs_f64();
    let report_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    let eer = report_json["eer"].as_f64().unwrap();
    let pass = elapsed < 60.0 && (0.0..=0.5).contains(&eer);
    report(
        9,
        "smoke pipeline",
        pass,
        &format!("5 source / 3 target speakers, 2 epochs per stage: {elapsed:.2}s, EER {eer:.4}"),
    );
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cosine_eer(params: &ParameterSet, eval: &Corpus, trials: &TrialList) -> f64 {
    let xs: Vec<&FeatureSequence> = eval.utterances.iter().map(|u| &u.features).collect();
    let emb = extract_embeddings(params, &xs).unwrap();
    let scores: Vec<f64> =
        trials.trials.iter().map(|t| cosine_similarity(emb.row(t.enroll), emb.row(t.test)).unwrap()).collect();
    compute_eer(&scores, &trials.labels()).unwrap().0
}

const SEEDS: u64 = 5;

/// Teacher on whole long utterances, baseline and students on short crops
/// with the same epoch budget; EER on short utterances of unseen source
/// speakers. Returns `[teacher, baseline, kld, emd, all]`.
fn distillation_run(seed: u64) -> [f64; 5] {
    let spec = CorpusSpec {
        n_speakers: 120,
        utts_per_speaker: 6,
        feature_dim: 16,
        long_frames: (100, 250),
        short_frames: (25, 75),
        speaker_subspace: Some(random_subspace(16, 6, &mut Rng::new(777 + seed)).unwrap()),
        speaker_spread: 1.5,
        channel_spread: 0.3,
        frame_noise: 1.5,
        ar_coeff: 0.8,
        seed: 100 + seed,
        ..CorpusSpec::default()
    };
    let source = generate_corpus(&spec).unwrap();
    let eval = generate_corpus(&CorpusSpec {
        n_speakers: 60,
        utts_per_speaker: 10,
        lengths: LengthClass::Short,
        seed: 900 + seed,
        ..spec.clone()
    })
    .unwrap();
    let trials = make_trials(&eval, None, 2700, 40_000, &mut Rng::new(seed)).unwrap();
    let encoder = EncoderConfig {
        input_dim: 16,
        block_widths: vec![16; 3],
        embedding_dim: 16,
        num_classes: 120,
        ..EncoderConfig::default()
    };
    let cfg =
        TrainConfig { batch_size: 32, epochs: 15, schedule: LrSchedule::Constant { lr: 0.01 }, seed, crop_frames: 60 };
    let class_only = DistillationConfig::class_only(ClassLoss::Softmax);
    let teacher = train_teacher(&source, encoder.clone(), &class_only, &cfg).unwrap().params;
    let baseline = train_baseline(&source, encoder, &class_only, &cfg).unwrap().params;
    let student = |kld, emd| {
        let loss = DistillationConfig::with_terms(ClassLoss::Softmax, kld, emd);
        train_student(&teacher, &source, &loss, &cfg).unwrap().params
    };
    [
        cosine_eer(&teacher, &eval, &trials),
        cosine_eer(&baseline, &eval, &trials),
        cosine_eer(&student(true, false), &eval, &trials),
        cosine_eer(&student(false, true), &eval, &trials),
        cosine_eer(&student(true, true), &eval, &trials),
    ]
}

#[test]
fn criterion_5_distillation_ordering() {
    let start = Instant::now();
    let runs: Vec<[f64; 5]> = (0..SEEDS).map(distillation_run).collect();
    let m: Vec<f64> = (0..5).map(|k| median(runs.iter().map(|r| r[k]).collect())).collect();
    let (teacher, baseline, kld, emd, all) = (m[0], m[1], m[2], m[3], m[4]);
    let checks = [
        ("baseline < teacher", baseline < teacher),
        ("kld < baseline", kld < baseline),
        ("emd <= kld", emd <= kld),
        ("all <= kld, emd", all <= kld && all <= emd),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let pass = failed.is_empty() && start.elapsed().as_secs_f64() <= 1800.0;
    report(
        5,
        "distillation ordering",
        pass,
        &format!(
            "median EER teacher {teacher:.4} baseline {baseline:.4} kld {kld:.4} emd {emd:.4} all {all:.4}; \
             violated {failed:?}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

const SELECTIONS: [LayerSelection; 3] =
    [LayerSelection::Last2Fc, LayerSelection::Last2FcPoolLastBlock, LayerSelection::All];
const REGULARIZERS: [Regularizer; 4] = [Regularizer::None, Regularizer::L2, Regularizer::L1sp, Regularizer::SplitL2sp];

struct FineTuneRun {
    /// EER per selection and regularizer, indexed like the constants above.
    eer: [[f64; 4]; 3],
    /// Final `(task loss, shared distance)` of split L²-SP over all layers.
    sp_final: (f64, f64),
    /// Per-epoch `(task loss, shared distance)` of L²-norm over all layers,
    /// trained more slowly than the runs behind `eer`.
    l2_history: Vec<(f64, f64)>,
    seconds: f64,
}

/// Distilled start point from a source corpus, then fine-tuning on five
/// target speakers and cosine scoring on a hundred others.
fn finetune_run(seed: u64) -> FineTuneRun {
    let started = Instant::now();
    let d = 16;
    let spec = CorpusSpec {
        n_speakers: 120,
        utts_per_speaker: 6,
        feature_dim: d,
        long_frames: (100, 250),
        short_frames: (25, 75),
        speaker_subspace: Some(random_subspace(d, 6, &mut Rng::new(777 + seed)).unwrap()),
        speaker_spread: 1.5,
        seed: 100 + seed,
        ..CorpusSpec::default()
    };
    let source = generate_corpus(&spec).unwrap();
    let shift = DomainShift::random(d, 0.9, 1.0, 1.0, &mut Rng::new(555 + seed)).unwrap();
    let target = generate_corpus(&CorpusSpec {
        domain: Domain::Target,
        lengths: LengthClass::Short,
        n_speakers: 105,
        utts_per_speaker: 12,
        shift: Some(shift),
        seed: 900 + seed,
        ..spec.clone()
    })
    .unwrap();
    let (ft, eval) = target.split_speakers(100).unwrap();
    let trials = make_trials(&eval, None, 6600, 30_000, &mut Rng::new(seed)).unwrap();

    let encoder = EncoderConfig {
        input_dim: d,
        block_widths: vec![16; 3],
        embedding_dim: 16,
        num_classes: 120,
        ..EncoderConfig::default()
    };
    let cfg =
        TrainConfig { batch_size: 32, epochs: 15, schedule: LrSchedule::Constant { lr: 0.01 }, seed, crop_frames: 60 };
    let teacher =
        train_teacher(&source, encoder, &DistillationConfig::class_only(ClassLoss::Softmax), &cfg).unwrap().params;
    let loss = DistillationConfig::with_terms(ClassLoss::Softmax, true, true);
    let start = train_student(&teacher, &source, &loss, &TrainConfig { epochs: 10, ..cfg }).unwrap().params;

    let mut eer = [[0.0; 4]; 3];
    let mut sp_final = (0.0, 0.0);
    let trace = |h: &EpochLog| (h.task_loss, h.shared_distance.unwrap());
    for (si, &selection) in SELECTIONS.iter().enumerate() {
        for (ri, &regularizer) in REGULARIZERS.iter().enumerate() {
            let fc = FineTuneConfig {
                regularizer,
                selection,
                lr_replaced: 3e-2,
                lr_rest: 1e-2,
                decay_every: 20,
                epochs: 40,
                seed,
                ..FineTuneConfig::default()
            };
            let out = finetune(&start, &ft, &fc).unwrap();
            eer[si][ri] = cosine_eer(&out.params, &eval, &trials);
            if selection == LayerSelection::All && regularizer == Regularizer::SplitL2sp {
                sp_final = trace(out.history.last().unwrap());
            }
        }
    }
    // The same L²-norm run at an eighth of the rate, so that consecutive
    // epochs differ by a few percent in task loss and one can be matched.
    let slow = FineTuneConfig {
        regularizer: Regularizer::L2,
        selection: LayerSelection::All,
        lr_replaced: 3e-2 / 8.0,
        lr_rest: 1e-2 / 8.0,
        decay_every: 160,
        epochs: 320,
        seed,
        ..FineTuneConfig::default()
    };
    let l2_history = finetune(&start, &ft, &slow).unwrap().history.iter().map(trace).collect();
    FineTuneRun { eer, sp_final, l2_history, seconds: started.elapsed().as_secs_f64() }
}

/// Criteria 6 and 7 read the same runs.
fn finetune_runs() -> &'static [FineTuneRun] {
    static RUNS: OnceLock<Vec<FineTuneRun>> = OnceLock::new();
    RUNS.get_or_init(|| (0..SEEDS).map(finetune_run).collect())
}

#[test]
fn criterion_6_finetuning_ordering() {
    let runs = finetune_runs();
    let m = |s: usize, r: usize| median(runs.iter().map(|run| run.eer[s][r]).collect());
    let (none, l2, l1sp, sp) = (0, 1, 2, 3);
    let (last2fc, middle, all) = (0, 1, 2);
    let mut violated = Vec::new();
    for (s, sel) in SELECTIONS.iter().enumerate() {
        for r in [l2, l1sp, sp] {
            if m(s, r) > m(s, none) {
                violated.push(format!("{}: {} > none", sel.as_str(), REGULARIZERS[r].as_str()));
            }
        }
        if m(s, sp) > m(s, l2) {
            violated.push(format!("{}: split_l2sp > l2", sel.as_str()));
        }
    }
    for s in [last2fc, middle] {
        if m(all, l2) < m(s, l2) {
            violated.push(format!("l2: all < {}", SELECTIONS[s].as_str()));
        }
    }
    if m(all, sp) > m(last2fc, sp) {
        violated.push("split_l2sp: all > last2fc".to_string());
    }
    let table: Vec<String> = SELECTIONS
        .iter()
        .enumerate()
        .map(|(s, sel)| {
            let cells: Vec<String> =
                REGULARIZERS.iter().enumerate().map(|(r, reg)| format!("{} {:.4}", reg.as_str(), m(s, r))).collect();
            format!("{} [{}]", sel.as_str(), cells.join(", "))
        })
        .collect();
    let seconds: f64 = runs.iter().map(|r| r.seconds).sum();
    let pass = violated.is_empty() && seconds <= 1800.0;
    report(
        6,
        "fine-tuning ordering",
        pass,
        &format!("median EER {}; violated {violated:?}; {seconds:.0}s", table.join("; ")),
    );
    assert!(pass);
}

/// Shared distance of the L²-norm epoch whose task loss is closest to
/// `target`, if that loss is within 5% of it.
fn distance_at_matched_loss(history: &[(f64, f64)], target: f64) -> Option<f64> {
    history
        .iter()
        .min_by(|a, b| (a.0 - target).abs().total_cmp(&(b.0 - target).abs()))
        .filter(|(loss, _)| (loss - target).abs() <= 0.05 * target.abs())
        .map(|&(_, dist)| dist)
}

#[test]
fn criterion_7_start_point_fidelity() {
    let runs = finetune_runs();
    let matched: Vec<(f64, f64)> = runs
        .iter()
        .filter_map(|r| distance_at_matched_loss(&r.l2_history, r.sp_final.0).map(|l2| (r.sp_final.1, l2)))
        .collect();
    let sp = median(matched.iter().map(|m| m.0).collect());
    let l2 = median(matched.iter().map(|m| m.1).collect());
    let pass = matched.len() == runs.len() && sp < l2;
    report(
        7,
        "start-point fidelity",
        pass,
        &format!(
            "{}/{} seeds matched within 5% task loss; median shared distance split_l2sp {sp:.4} vs l2 {l2:.4}",
            matched.len(),
            runs.len()
        ),
    );
    assert!(pass);
}
