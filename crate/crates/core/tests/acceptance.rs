//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ppcr::criteria::{bce_loss, ce_loss, coord_bins, dice_loss, l1_box_loss, CriteriaError, MetricAccumulator};
use ppcr::diffcore::{
    grad_check, linear_forward, lora_forward, merge_lora, DiffError, GradCheckConfig, Graph, LoraAdapter, LoraConfig,
    ParamStore, Tensor,
};
use ppcr::grounding::{
    attn_box_predict, map_to_box, rescale_box, BoxHeadKind, BoxPredictor, GroundingConfig, GroundingHeads,
    NormalizedBox,
};
use ppcr::harness::{
    evaluate, predict_sample, run_ablation, train, AblationOutcome, EvalReport, PpcrModel, RunConfig, StageTrace,
    Variant,
};
use ppcr::prompt::{PromptVariant, TemplateBank, Vocab, SEM_TOKEN};
use ppcr::raster::Mask;
use ppcr::reasoner::{Reasoner, ReasonerConfig, SpatialSegPrompt};
use ppcr::segmenter::{Segmenter, SegmenterConfig, SegmenterError};
use ppcr::shapeworld::{generate_samples, ReferringSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: f64, what: &str) -> Result<(), String> {
    check(
        elapsed.as_secs_f64() < limit_secs,
        format!("{what} took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- metrics

fn pixel_set(m: &Mask) -> HashSet<(usize, usize)> {
    let mut s = HashSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(x, y) {
                s.insert((x, y));
            }
        }
    }
    s
}

/// Integer counts and both ratios straight from pixel sets.
fn brute_force(pairs: &[(Mask, Mask)]) -> (Vec<(u64, u64)>, f64, f64) {
    let counts: Vec<(u64, u64)> = pairs
        .iter()
        .map(|(p, g)| {
            let (ps, gs) = (pixel_set(p), pixel_set(g));
            (ps.intersection(&gs).count() as u64, ps.union(&gs).count() as u64)
        })
        .collect();
    let (ti, tu) = counts.iter().fold((0u64, 0u64), |(a, b), (i, u)| (a + i, b + u));
    let oiou = if tu == 0 { 1.0 } else { ti as f64 / tu as f64 };
    let miou = counts
        .iter()
        .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum::<f64>()
        / counts.len() as f64;
    (counts, oiou, miou)
}

fn metric_agreement(pairs: &[(Mask, Mask)]) -> Result<(f64, f64), String> {
    let (counts, oiou, miou) = brute_force(pairs);
    let mut acc = MetricAccumulator::new();
    for ((p, g), &(i, u)) in pairs.iter().zip(&counts) {
        check(
            p.overlap_counts(g) == (i, u),
            format!("counts {:?} vs oracle {:?}", p.overlap_counts(g), (i, u)),
        )?;
        acc.accumulate(p, g).map_err(|e| e.to_string())?;
    }
    let (o, m) = acc.finalize().map_err(|e| e.to_string())?;
    check((o - oiou).abs() <= 1e-12, format!("oIoU {o} vs oracle {oiou}"))?;
    check((m - miou).abs() <= 1e-12, format!("mIoU {m} vs oracle {miou}"))?;
    Ok((o, m))
}

fn criterion_metric_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut pairs = Vec::new();
    for _ in 0..50 {
        let (w, h) = (rng.random_range(1..48), rng.random_range(1..48));
        let p = random_mask(&mut rng, w, h);
        let g = random_mask(&mut rng, w, h);
        pairs.push((p, g));
    }
    metric_agreement(&pairs)?;

    // A large perfect hit and a small total miss: the two metrics diverge.
    let big = Mask::from_fn(10, 10, |_, _| true);
    let small_gt = Mask::from_fn(5, 4, |_, _| true);
    let divergent = vec![(big.clone(), big), (Mask::empty(5, 4), small_gt)];
    let (o, m) = metric_agreement(&divergent)?;
    check(
        (o - 100.0 / 120.0).abs() <= 1e-12 && m == 0.5,
        format!("divergence example gave oIoU {o}, mIoU {m}"),
    )?;
    within(start.elapsed(), 5.0, "metric oracle")?;
    Ok(format!(
        "50 random pairs + divergence example (oIoU {o:.4}, mIoU {m}) in {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- gradients

fn crit_diff(e: CriteriaError) -> DiffError {
    match e {
        CriteriaError::Diff(d) => d,
        other => DiffError::Domain(other.to_string()),
    }
}

fn seg_diff(e: SegmenterError) -> DiffError {
    match e {
        SegmenterError::Diff(d) => d,
        other => DiffError::Domain(other.to_string()),
    }
}

const FD: GradCheckConfig = GradCheckConfig {
    step: 1e-2,
    tolerance: 1e-3,
    max_coords: None,
};

// The perceptron is smooth but runs several f32 matmuls, so rounding in the
// forward pass outweighs truncation until the step grows.
const FD_SMOOTH: GradCheckConfig = GradCheckConfig { step: 2e-2, ..FD };

// The box prior's edge is about a pixel wide, i.e. 1/64 in unit coordinates,
// so box corners need a step well below that.
const FD_BOX: GradCheckConfig = GradCheckConfig { step: 3e-4, ..FD };

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    let density = rng.random_range(0.0..1.0);
    let bits = (0..w * h).map(|_| rng.random_bool(density)).collect();
    Mask::from_bits(w, h, bits).expect("size matches")
}

/// Random box whose coordinates stay at least 0.05 away from `gt`'s.
fn off_kink(rng: &mut ChaCha8Rng, gt: NormalizedBox) -> Vec<f32> {
    gt.to_array()
        .iter()
        .map(|t| {
            let off: f32 = rng.random_range(0.05..0.4);
            if rng.random_bool(0.5) {
                t + off
            } else {
                t - off
            }
        })
        .collect()
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, report: ppcr::diffcore::GradCheckReport| -> Result<(), String> {
        check(report.passed(), format!("{name}: rel. err {:.2e}", report.worst()))?;
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some(w) => w.1 = w.1.max(report.worst()),
            None => worst.push((name, report.worst())),
        }
        Ok(())
    };

    for _ in 0..10 {
        let gt = random_mask(&mut rng, 7, 6);
        let mut store = ParamStore::new();
        let z = store
            .add("logits", Tensor::randn(&mut rng, &[6, 7], 2.0), true)
            .unwrap();
        let r = grad_check(&mut store, &[z], FD, |g, s| {
            let v = g.param(s, z);
            bce_loss(g, v, &gt).map_err(crit_diff)
        });
        record("bce", r.map_err(|e| e.to_string())?)?;
        let r = grad_check(&mut store, &[z], FD, |g, s| {
            let v = g.param(s, z);
            dice_loss(g, v, &gt).map_err(crit_diff)
        });
        record("dice", r.map_err(|e| e.to_string())?)?;

        let gt_box = NormalizedBox::new(
            rng.random_range(0.1..0.4),
            rng.random_range(0.1..0.4),
            rng.random_range(0.6..0.9),
            rng.random_range(0.6..0.9),
        );
        let p = store.add("box", Tensor::row(off_kink(&mut rng, gt_box)), true).unwrap();
        let r = grad_check(&mut store, &[p], FD, |g, s| {
            let v = g.param(s, p);
            l1_box_loss(g, v, gt_box).map_err(crit_diff)
        });
        record("l1", r.map_err(|e| e.to_string())?)?;

        let bins = coord_bins(gt_box, 16);
        let c = store
            .add("coord", Tensor::randn(&mut rng, &[4, 16], 1.5), true)
            .unwrap();
        let r = grad_check(&mut store, &[c], FD, |g, s| {
            let v = g.param(s, c);
            ce_loss(g, v, &bins).map_err(crit_diff)
        });
        record("ce", r.map_err(|e| e.to_string())?)?;
    }

    // map_to_box: perceptron + sigmoid, read out through fixed random weights.
    let mut store = ParamStore::new();
    let heads = GroundingHeads::new(&mut store, &mut rng, 64, GroundingConfig::default()).unwrap();
    let BoxPredictor::Mlp(head) = heads.predictor.clone() else {
        return Err("default grounding head is not the perceptron".into());
    };
    let ids: Vec<_> = head.mlp.fc1.ids().into_iter().chain(head.mlp.fc2.ids()).collect();
    for _ in 0..10 {
        let prompt = Tensor::randn(&mut rng, &[1, 64], 1.0);
        let readout = Tensor::randn(&mut rng, &[1, 4], 1.0);
        let r = grad_check(&mut store, &ids, FD_SMOOTH, |g, s| {
            let pv = g.constant(prompt.clone())?;
            let b = head.forward(g, s, pv)?;
            let w = g.constant(readout.clone())?;
            let y = g.mul(b, w)?;
            g.sum(y)
        });
        record("map_to_box", r.map_err(|e| e.to_string())?)?;
    }

    // Prompt encoding + two-way decoding + BCE, w.r.t. the semantic token and the box.
    let mut store = ParamStore::new();
    let seg = Segmenter::new(&mut store, &mut rng, SegmenterConfig::default(), 64).unwrap();
    let samples = generate_samples(&ppcr::shapeworld::DatasetManifest::new("grad", 10, 77)).unwrap();
    for s in &samples {
        let feats = seg.encode_image_seg(&store, &s.image).map_err(|e| e.to_string())?;
        let sem = store
            .add(
                format!("probe.sem.{}", s.id),
                Tensor::randn(&mut rng, &[1, 64], 1.0),
                true,
            )
            .unwrap();
        let bx = store
            .add(
                format!("probe.box.{}", s.id),
                Tensor::row(vec![
                    rng.random_range(0.05..0.45),
                    rng.random_range(0.05..0.45),
                    rng.random_range(0.55..0.95),
                    rng.random_range(0.55..0.95),
                ]),
                true,
            )
            .unwrap();
        let gt = std::rc::Rc::new(s.gt_mask.to_f32());
        let mut loss = |g: &mut Graph, st: &ParamStore| {
            let sv = g.param(st, sem);
            let bv = g.param(st, bx);
            let p = seg.prompt_forward(g, st, sv, Some(bv)).map_err(seg_diff)?;
            let z = seg.decode_forward(g, st, &feats, p, Some(bv)).map_err(seg_diff)?;
            let z = g.reshape(z, &[1, 64 * 64])?;
            g.bce_with_logits(z, gt.clone())
        };
        let r = grad_check(&mut store, &[sem], FD, &mut loss);
        record("decode_mask", r.map_err(|e| e.to_string())?)?;
        let r = grad_check(&mut store, &[bx], FD_BOX, &mut loss);
        record("decode_mask", r.map_err(|e| e.to_string())?)?;
    }
    within(start.elapsed(), 60.0, "gradient suite")?;
    let summary: Vec<String> = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok(format!(
        "worst rel. err: {} ({:.1}s)",
        summary.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- sweep

struct Sweep {
    config: RunConfig,
    outcome: AblationOutcome,
    checkpoints: PathBuf,
    train_set: Vec<ReferringSample>,
    eval_set: Vec<ReferringSample>,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn sweep() -> &'static Result<Sweep, String> {
    static SWEEP: OnceLock<Result<Sweep, String>> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let start = Instant::now();
        let config = RunConfig::default();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let checkpoints = dir.path().join("checkpoints");
        let train_set = generate_samples(&config.train).map_err(|e| e.to_string())?;
        let eval_set = generate_samples(&config.eval).map_err(|e| e.to_string())?;
        let outcome = run_ablation(
            &config,
            &TemplateBank::builtin(),
            &[Variant::NoSpatial, Variant::Ppcr, Variant::GtBoxOracle],
            &SEEDS,
            &train_set,
            &eval_set,
            Some(&checkpoints),
            |line| eprintln!("  {line}"),
        )
        .map_err(|e| e.to_string())?;
        Ok(Sweep {
            config,
            outcome,
            checkpoints,
            train_set,
            eval_set,
            elapsed: start.elapsed(),
            _dir: dir,
        })
    })
}

fn with_sweep(f: impl FnOnce(&Sweep) -> Verdict) -> Verdict {
    match sweep() {
        Ok(s) => f(s),
        Err(e) => Err(format!("sweep failed: {e}")),
    }
}

// ---------------------------------------------------------------- LoRA

fn criterion_lora() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f32;
    for i in 0..100 {
        let (d_in, d_out, n) = (rng.random_range(2..24), rng.random_range(2..24), rng.random_range(1..6));
        let rank = rng.random_range(1..=d_in.min(d_out));
        let cfg = LoraConfig {
            rank,
            alpha: rng.random_range(0.5..=2.0 * rank as f32),
            init_std: 0.02,
        };
        // Unit-variance activations throughout, as in the model.
        let fan_in = 1.0 / (d_in as f32).sqrt();
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::randn(&mut rng, &[d_out, d_in], fan_in), false)
            .unwrap();
        let adapter = LoraAdapter::attach(&mut store, &mut rng, w, "a", cfg).unwrap();
        let x = Tensor::randn(&mut rng, &[n, d_in], 1.0);

        // A fresh adapter is an exact identity.
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let base = linear_forward(&mut g, &store, w, None, xv).unwrap();
        let fresh = lora_forward(&mut g, &store, w, &adapter, xv).unwrap();
        check(
            g.value(base) == g.value(fresh),
            format!("instance {i}: fresh adapter changed the output"),
        )?;
        check(
            &merge_lora(&store, w, &adapter).unwrap() == store.tensor(w),
            format!("instance {i}: fresh merge changed W"),
        )?;

        // Trained-looking adapter: merged weight reproduces the adapted layer.
        store
            .set(
                adapter.up,
                Tensor::randn(&mut rng, &[d_out, rank], 1.0 / (rank as f32).sqrt()),
            )
            .unwrap();
        store
            .set(adapter.down, Tensor::randn(&mut rng, &[rank, d_in], fan_in))
            .unwrap();
        let merged = merge_lora(&store, w, &adapter).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let adapted = lora_forward(&mut g, &store, w, &adapter, xv).unwrap();
        let via_merge = x.matmul(&merged.transpose()).unwrap();
        worst = worst.max(g.value(adapted).max_abs_diff(&via_merge));
    }
    check(worst < 1e-5, format!("merge equivalence max-abs {worst:.2e}"))?;

    with_sweep(|s| {
        let mut checked = 0;
        for seed in SEEDS {
            for v in [Variant::NoSpatial, Variant::Ppcr] {
                let (trained, _) =
                    PpcrModel::load(&s.checkpoints.join(format!("{v}-seed{seed}"))).map_err(|e| e.to_string())?;
                let fresh =
                    PpcrModel::new(s.config.model, v, TemplateBank::builtin(), seed).map_err(|e| e.to_string())?;
                for id in fresh.frozen_params() {
                    let name = &fresh.store.get(id).name;
                    let other = trained.store.id(name).ok_or(format!("{name} missing"))?;
                    check(
                        trained.store.tensor(other) == fresh.store.tensor(id),
                        format!("{v} seed {seed}: frozen {name} changed"),
                    )?;
                    checked += 1;
                }
            }
        }
        Ok(format!(
            "merge max-abs {worst:.1e} over 100 instances; fresh identity exact; {checked} frozen tensors bitwise unchanged after 6 full runs"
        ))
    })
}

// ---------------------------------------------------------------- ranges

fn criterion_ranges() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = ReasonerConfig::default();
    let mut store = ParamStore::new();
    let vocab = Vocab::from_bank(&TemplateBank::builtin()).map_err(|e| e.to_string())?;
    let reasoner = Reasoner::new(&mut store, &mut rng, cfg, vocab).map_err(|e| e.to_string())?;
    let scenes = generate_samples(&ppcr::shapeworld::DatasetManifest::new("fuzz", 4, 9)).unwrap();
    let feats: Vec<_> = scenes
        .iter()
        .map(|s| reasoner.encode_image(&store, &s.image).unwrap())
        .collect();

    let mut heads = Vec::new();
    for i in 0..10 {
        let head = if i % 2 == 0 {
            BoxHeadKind::Mlp
        } else {
            BoxHeadKind::Attention
        };
        let gcfg = GroundingConfig {
            head,
            ..GroundingConfig::default()
        };
        let mut head_store = ParamStore::new();
        let h = GroundingHeads::new(&mut head_store, &mut rng, cfg.d_model, gcfg).unwrap();
        heads.push((head_store, h));
    }

    let pixel_ok = |b: &ppcr::grounding::PixelBox, w: usize, h: usize| {
        b.within(w, h) && b.area() >= 1.0 && b.x1 <= b.x2 && b.y1 <= b.y2
    };
    for case in 0..1000 {
        let scale = 10f32.powf(rng.random_range(-2.0..3.0));
        let prompt = SpatialSegPrompt {
            embedding: Tensor::randn(&mut rng, &[1, cfg.d_model], scale),
            variant: PromptVariant::Ppcr,
        };
        let (head_store, h) = &heads[case % heads.len()];
        let unit = match h.kind() {
            BoxHeadKind::Mlp => map_to_box(head_store, h, &prompt),
            BoxHeadKind::Attention => attn_box_predict(head_store, h, &feats[case % feats.len()], &prompt),
        }
        .map_err(|e| format!("case {case}: {e}"))?;
        check(
            unit.in_unit_range(),
            format!("case {case}: normalized box {:?}", unit.to_array()),
        )?;
        let (w, hgt) = (rng.random_range(1..=256), rng.random_range(1..=256));
        let px = rescale_box(unit, w, hgt);
        check(
            pixel_ok(&px, w, hgt),
            format!("case {case}: pixel box {:?} on {w}x{hgt}", px.to_array()),
        )?;

        // Hostile raw boxes go through the same repair.
        let wild = |rng: &mut ChaCha8Rng| match rng.random_range(0..8) {
            0 => f32::NAN,
            1 => f32::INFINITY,
            2 => f32::NEG_INFINITY,
            _ => rng.random_range(-3.0..4.0),
        };
        let raw = NormalizedBox::new(wild(&mut rng), wild(&mut rng), wild(&mut rng), wild(&mut rng));
        let px = rescale_box(raw, w, hgt);
        check(
            pixel_ok(&px, w, hgt),
            format!(
                "case {case}: raw {:?} repaired to {:?} on {w}x{hgt}",
                raw.to_array(),
                px.to_array()
            ),
        )?;
    }
    Ok(
        "1000 predicted boxes in [0,1]^4 (perceptron and attention heads); 2000 pixel boxes in bounds with area >= 1"
            .into(),
    )
}

// ---------------------------------------------------------------- trends

fn mean_miou(s: &Sweep, v: Variant) -> f64 {
    SEEDS
        .iter()
        .map(|&seed| s.outcome.evaluations[&(v, seed)].miou)
        .sum::<f64>()
        / SEEDS.len() as f64
}

fn criterion_trend() -> Verdict {
    with_sweep(|s| {
        let m = &s.config.train;
        check(
            m.sample_count == 512 && s.config.eval.sample_count == 128 && s.config.epochs == 5,
            "sweep is not at 512/128 samples and 5 epochs",
        )?;
        check(
            m.relational_fraction == 0.7 && m.min_shapes >= 3 && s.train_set.iter().all(|x| x.scene.shapes.len() >= 3),
            "training scenes do not carry at least two distractors",
        )?;
        let ppcr = mean_miou(s, Variant::Ppcr);
        let base = mean_miou(s, Variant::NoSpatial);
        let delta = 100.0 * (ppcr - base);
        let per_seed: Vec<String> = SEEDS
            .iter()
            .map(|&seed| {
                format!(
                    "{:.2}/{:.2}",
                    100.0 * s.outcome.evaluations[&(Variant::Ppcr, seed)].miou,
                    100.0 * s.outcome.evaluations[&(Variant::NoSpatial, seed)].miou
                )
            })
            .collect();
        let detail = format!(
            "mIoU ppcr {:.2} vs no_spatial {:.2} (delta {delta:+.2} points; per seed {}) in {:.1} min",
            100.0 * ppcr,
            100.0 * base,
            per_seed.join(", "),
            s.elapsed.as_secs_f64() / 60.0
        );
        check(delta >= 2.0, detail.clone())?;
        within(s.elapsed, 20.0 * 60.0, "trend sweep")?;
        Ok(detail)
    })
}

fn criterion_oracle() -> Verdict {
    with_sweep(|s| {
        let mut parts = Vec::new();
        for seed in SEEDS {
            let oracle = s.outcome.evaluations[&(Variant::GtBoxOracle, seed)].miou;
            let ppcr = s.outcome.evaluations[&(Variant::Ppcr, seed)].miou;
            parts.push(format!("seed {seed}: {:.2} >= {:.2}", 100.0 * oracle, 100.0 * ppcr));
            check(
                oracle >= ppcr,
                format!("seed {seed}: oracle {oracle:.4} < ppcr {ppcr:.4}"),
            )?;
        }
        Ok(format!("oracle mIoU {}", parts.join("; ")))
    })
}

// ---------------------------------------------------------------- determinism

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism() -> Verdict {
    with_sweep(|s| {
        let seed = 0;
        let cfg = s.config.with_variant(Variant::Ppcr, seed);
        let rerun = train(&cfg, TemplateBank::builtin(), &s.train_set).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        rerun
            .model
            .save(dir.path(), seed, cfg.optimizer)
            .map_err(|e| e.to_string())?;
        let first = s.checkpoints.join(format!("ppcr-seed{seed}"));
        let (a, b) = (files_under(&first), files_under(dir.path()));
        check(a == b, "checkpoint file lists differ")?;
        for f in &a {
            check(
                fs::read(first.join(f)).unwrap() == fs::read(dir.path().join(f)).unwrap(),
                format!("checkpoint file {} differs", f.display()),
            )?;
        }
        let again = evaluate(&rerun.model, &s.eval_set, Variant::Ppcr, &cfg).map_err(|e| e.to_string())?;
        let before: &EvalReport = &s.outcome.evaluations[&(Variant::Ppcr, seed)];
        check(again.report.same_results(before, 1e-9), "evaluation reports differ")?;
        Ok(format!(
            "ppcr seed {seed} retrained: {} checkpoint files bitwise equal, EvalReport equal (mIoU {:.6})",
            a.len(),
            again.report.miou
        ))
    })
}

// ---------------------------------------------------------------- routing

fn criterion_routing() -> Verdict {
    with_sweep(|s| {
        for ((v, seed), r) in &s.outcome.evaluations {
            check(
                r.routing_checked == r.records.len(),
                format!(
                    "{v} seed {seed}: {} of {} traces checked",
                    r.routing_checked,
                    r.records.len()
                ),
            )?;
        }
        let probe = &s.eval_set[..32];
        let mut checked = 0;
        for v in Variant::ALL {
            let model = PpcrModel::new(s.config.model, v, TemplateBank::builtin(), 5).map_err(|e| e.to_string())?;
            let cfg = s.config.with_variant(v, 5);
            let ev = evaluate(&model, probe, v, &cfg).map_err(|e| format!("{v}: {e}"))?;
            check(ev.report.routing_checked == probe.len(), format!("{v}: traces skipped"))?;
            for sample in probe {
                let trace = predict_sample(&model, sample, v, 5, cfg.threshold)
                    .map_err(|e| e.to_string())?
                    .trace
                    .ok_or("prediction without trace")?;
                for stage in &trace.stages {
                    match (v, stage) {
                        (Variant::NoSpatial, StageTrace::Segment { box_prompt, .. }) => {
                            check(box_prompt.is_none(), "no_spatial sent a box prompt")?
                        }
                        (Variant::NoSpatial, StageTrace::Spatial { .. }) => {
                            return Err("no_spatial ran a spatial pass".into())
                        }
                        (Variant::Ppcr, StageTrace::Spatial { tokens, .. }) => check(
                            !tokens.iter().any(|t| sample.expression.contains(t)),
                            format!("ppcr spatial prompt {tokens:?} leaks {:?}", sample.expression),
                        )?,
                        (
                            Variant::ReOnly,
                            StageTrace::Spatial {
                                tokens, injected_slots, ..
                            },
                        ) => check(
                            injected_slots.is_empty() && !tokens.iter().any(|t| t == SEM_TOKEN),
                            "re_only injected the semantic embedding",
                        )?,
                        _ => {}
                    }
                }
                checked += 1;
            }
        }
        let sweep_traces: usize = s.outcome.evaluations.values().map(|r| r.routing_checked).sum();
        Ok(format!(
            "{sweep_traces} sweep traces checked during eval; {checked} explicit traces across all 6 variants"
        ))
    })
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("metric oracle", criterion_metric_oracle),
        ("gradient suite", criterion_gradients),
        ("lora contracts", criterion_lora),
        ("range/repair contracts", criterion_ranges),
        ("trend: ppcr vs no_spatial", criterion_trend),
        ("oracle: gt_box_oracle vs ppcr", criterion_oracle),
        ("determinism", criterion_determinism),
        ("variant routing", criterion_routing),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let verdict = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("criterion {} [{name}]: PASS - {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} [{name}]: FAIL - {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
