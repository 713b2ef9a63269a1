//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) and then asserts.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{ot_lp, random_segmenter, tie_free, tiny_run, tiny_world, TinyWorld};
use dsa_cyclegan::dsm::{dsm, extract_dsm_features, wasserstein_1d, wasserstein_1d_grad, FeatureMeanBatch, ReferenceBank};
use dsa_cyclegan::eval::{correlate_dsm_f1, noise_probe, report, EvaluationReport};
use dsa_cyclegan::losses::{dsl_loss, seg_consistency_loss, LossBreakdown};
use dsa_cyclegan::rng::stream;
use dsa_cyclegan::synth::{build_dataset, BuildOutcome, Dataset, Split, StainProfile};
use dsa_cyclegan::training::translator::TRANSLATOR_FILE;
use dsa_cyclegan::training::{
    load_translator, run_protocol, train_segmenter, train_translator, ExperimentConfig, ProtocolInputs, ReplayBuffer, RunConfig,
    TrainInputs, TranslatorTrainer,
};
use dsa_cyclegan::variants::{DslTerms, VariantRegistry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Device, Kind, Tensor};

const EQUAL_SIZE_TOL: f64 = 1e-9;
const UNEQUAL_SIZE_TOL: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-3;
const RECOMPOSE_TOL: f64 = 1e-9;
const PARITY_TOL: f64 = 1e-6;
const SWAP_RATE_TOL: f64 = 0.05;
const RUN_BUDGET: Duration = Duration::from_secs(20 * 60);

fn verdict(id: u32, ok: bool, what: &str, detail: String) {
    let line = format!(
        "acceptance criterion {id:>2} [{}] {what}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

#[test]
fn criterion_01_wasserstein_matches_transport_lp() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut eq, mut uneq) = (0.0f64, 0.0f64);
    for pair in 0..200 {
        let n = rng.gen_range(1..=16);
        let m = if pair < 100 { n } else { rng.gen_range(1..=16) };
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gap = (wasserstein_1d(&a, &b).unwrap() - ot_lp(&a, &b)).abs();
        if n == m {
            eq = eq.max(gap);
        } else {
            uneq = uneq.max(gap);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        eq <= EQUAL_SIZE_TOL && uneq <= UNEQUAL_SIZE_TOL && elapsed < Duration::from_secs(10),
        "closed form equals LP oracle on 200 pairs",
        format!("max gap equal {eq:.2e}, unequal {uneq:.2e}, {:.2}s", elapsed.as_secs_f64()),
    );
}

fn batch(rng: &mut ChaCha8Rng, n: usize, k: usize) -> FeatureMeanBatch {
    let v: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-4.0..4.0)).collect();
    FeatureMeanBatch::new("bottleneck", Tensor::from_slice(&v).view([n as i64, k as i64])).unwrap()
}

#[test]
fn criterion_02_metric_axioms() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = true;
    let mut worst_sym = 0.0f64;
    for _ in 0..100 {
        let (n, m, k) = (rng.gen_range(1..20), rng.gen_range(1..20), rng.gen_range(1..6));
        let a = batch(&mut rng, n, k);
        let b = batch(&mut rng, m, k);
        let ab = dsm(&a, &b).unwrap().value;
        let ba = dsm(&b, &a).unwrap().value;
        worst_sym = worst_sym.max((ab - ba).abs());
        ok &= dsm(&a, &a).unwrap().value == 0.0 && ab >= 0.0;
        let single_a = batch(&mut rng, n, 1);
        let single_b = batch(&mut rng, m, 1);
        let col = |x: &FeatureMeanBatch| x.to_rows().iter().map(|r| r[0]).collect::<Vec<_>>();
        ok &= dsm(&single_a, &single_b).unwrap().value == wasserstein_1d(&col(&single_a), &col(&single_b)).unwrap();
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        ok && worst_sym <= SYMMETRY_TOL && elapsed < Duration::from_secs(1),
        "identity, symmetry, nonnegativity, single-filter collapse",
        format!("max asymmetry {worst_sym:.1e}, {:.3}s", elapsed.as_secs_f64()),
    );
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn criterion_03_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    let mut worst_1d = 0.0f64;
    for (n, m) in [(6, 6), (5, 9), (11, 4)] {
        let a = tie_free(&mut rng, n);
        let b = tie_free(&mut rng, m);
        let g = wasserstein_1d_grad(&a, &b).unwrap();
        for i in 0..n {
            let (mut up, mut down) = (a.clone(), a.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (wasserstein_1d(&up, &b).unwrap() - wasserstein_1d(&down, &b).unwrap()) / (2.0 * h);
            worst_1d = worst_1d.max(rel_err(g[i], fd));
        }
    }

    let seg = random_segmenter(21).into_double();
    tch::manual_seed(4);
    let reference = Tensor::rand([12, 3, 16, 16], (Kind::Double, Device::Cpu));
    let bank = ReferenceBank::from_features(&extract_dsm_features(&seg, &reference, "bottleneck").unwrap(), 12).unwrap();
    let fake_only = DslTerms { fake: true, cyc: false, id: false };
    let loss = |img: &Tensor| dsl_loss(&seg, &bank, img, img, img, fake_only).unwrap().fake.unwrap();
    let x = (Tensor::rand([3, 3, 16, 16], (Kind::Double, Device::Cpu)) * 1.6 - 0.8).set_requires_grad(true);
    loss(&x).backward();
    let grad = x.grad().flatten(0, -1);
    let mut worst_dsl = 0.0f64;
    let mut checked = 0;
    for idx in (0..x.numel() as i64).step_by(61) {
        let bump = |d: f64| {
            let y = x.detach().copy();
            let _ = y.view(-1).get(idx).g_add_scalar_(d);
            tch::no_grad(|| loss(&y).double_value(&[]))
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let an = grad.double_value(&[idx]);
        if an.abs() < 1e-9 && fd.abs() < 1e-9 {
            continue;
        }
        worst_dsl = worst_dsl.max(rel_err(an, fd));
        checked += 1;
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        worst_1d <= GRAD_REL_TOL && worst_dsl <= GRAD_REL_TOL && checked >= 5 && elapsed < Duration::from_secs(60),
        "analytic gradients match central differences",
        format!(
            "wasserstein rel err {worst_1d:.1e}, fake-term rel err {worst_dsl:.1e} over {checked} pixels, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn steps(world: &TinyWorld, cfg: &RunConfig, n: u64) -> Vec<LossBreakdown> {
    let streams = world.data.translation_streams(StainProfile::Rich);
    let inputs = TrainInputs {
        data: &streams,
        segmenter: Some(&world.segmenter),
        bank: Some(&world.bank),
    };
    let mut t = TranslatorTrainer::new(cfg, 1, &VariantRegistry::with_builtins(), Device::Cpu).unwrap();
    (0..n).map(|_| t.train_step(&inputs).unwrap()).collect()
}

fn max_gap(a: &[LossBreakdown], b: &[LossBreakdown]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            [
                (x.adv - y.adv).abs(),
                (x.cyc - y.cyc).abs(),
                (x.id - y.id).abs(),
                (x.total_g - y.total_g).abs(),
                (x.total_d - y.total_d).abs(),
            ]
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_04_recomposition_and_zero_weight_parity() {
    let world = tiny_world();
    let registry = VariantRegistry::with_builtins();
    let mut worst = 0.0f64;
    for variant in ["baseline", "dsa", "dsa_fake", "dsa_cyc_id", "self_supervision", "gaussian_noise"] {
        let cfg = tiny_run(variant);
        let w = cfg.weights.effective_for(registry.create(variant, &cfg.variant_params).unwrap().as_ref());
        for b in steps(&world, &cfg, 3) {
            worst = worst.max((b.total_g - b.recompose(&w)).abs());
        }
    }
    let mut silenced = tiny_run("dsa");
    silenced.weights.w_dsl = 0.0;
    let parity = max_gap(&steps(&world, &silenced, 10), &steps(&world, &tiny_run("baseline"), 10));
    verdict(
        4,
        worst <= RECOMPOSE_TOL && parity <= PARITY_TOL,
        "logged totals recompose; dsa with w_dsl=0 tracks baseline",
        format!("recompose gap {worst:.1e}, 10-step parity gap {parity:.1e}"),
    );
}

#[test]
fn criterion_05_segmenter_stays_frozen() {
    let world = tiny_world();
    let s = world.data.split(Split::Train).images(StainProfile::Rich).narrow(0, 0, 4) * 2.0 - 1.0;
    let fake = (Tensor::rand([4, 3, 16, 16], (Kind::Float, Device::Cpu)) * 2.0 - 1.0).set_requires_grad(true);
    let dsl = dsl_loss(&world.segmenter, &world.bank, &fake, &fake, &fake, DslTerms::ALL).unwrap().sum().unwrap();
    let seg = seg_consistency_loss(&world.segmenter, &s, &fake, &fake).unwrap();
    (dsl + seg).backward();
    let grads_zero = world.segmenter.parameters().iter().all(|p| {
        let g = p.grad();
        !g.defined() || g.abs().max().double_value(&[]) == 0.0
    });
    let input_grad = fake.grad().abs().sum(Kind::Double).double_value(&[]);

    let (seg_sum, bank_sum) = (world.segmenter.checksum(), world.bank.checksum());
    let streams = world.data.translation_streams(StainProfile::Rich);
    let inputs = TrainInputs {
        data: &streams,
        segmenter: Some(&world.segmenter),
        bank: Some(&world.bank),
    };
    let registry = VariantRegistry::with_builtins();
    let mut same = true;
    for variant in ["dsa", "self_supervision"] {
        let out = train_translator(&inputs, &tiny_run(variant), 1, &registry, None, Device::Cpu).unwrap();
        same &= out.frozen.segmenter.as_deref() == Some(seg_sum.as_str());
        same &= world.segmenter.checksum() == seg_sum && world.bank.checksum() == bank_sum;
    }
    verdict(
        5,
        grads_zero && input_grad > 0.0 && same,
        "no segmenter gradients; segmenter and bank checksums constant",
        format!("segmenter grads zero: {grads_zero}, generated-image grad mass {input_grad:.2e}, checksums unchanged: {same}"),
    );
}

/// Shared desk-scale protocol: baseline and dsa over three seeds.
struct Desk {
    report: EvaluationReport,
    zero_sigma_factors: Vec<f64>,
    slowest_run: Duration,
    failures: usize,
}

fn desk_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    ExperimentConfig::load(&path).expect("configs/desk.toml")
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = desk_config();
        let out = std::env::var_os("DSA_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join(format!("dsa-acceptance-{}", std::process::id())));
        let data = Dataset::generate(&cfg.data).unwrap();
        let (seg, _) = train_segmenter(&data, cfg.source_profile, &cfg.segmenter_training, Device::Cpu).unwrap();
        let seg = seg.freeze();
        std::fs::create_dir_all(&out).unwrap();
        let seg_path = out.join("segmenter.bin");
        seg.save(&seg_path).unwrap();
        let source = data.translation_streams(cfg.source_profile).source;
        let n = cfg.run.reference_bank_size as i64;
        let bank = ReferenceBank::build(&seg, &source.narrow(0, 0, n), &cfg.run.dsm_layer, n as usize).unwrap();
        let inputs = ProtocolInputs {
            dataset: &data,
            segmenter: &seg,
            bank: &bank,
            segmenter_path: &seg_path,
        };
        let registry = VariantRegistry::with_builtins();
        let mut slowest = Duration::ZERO;
        let mut failures = 0;
        // Cells run one at a time so each is timed on its own.
        for variant in &cfg.protocol.variants {
            for &seed in &cfg.run.seeds {
                let mut one = cfg.clone();
                one.protocol.variants = vec![variant.clone()];
                one.run.seeds = vec![seed];
                let start = Instant::now();
                failures += run_protocol(&one, &inputs, &out, &registry, Device::Cpu).unwrap().failures.len();
                slowest = slowest.max(start.elapsed());
            }
        }
        let outcome = run_protocol(&cfg, &inputs, &out, &registry, Device::Cpu).unwrap();
        let target = data.split(Split::Test).images(cfg.source_profile.other());
        let zero_sigma_factors = outcome
            .run_dirs
            .iter()
            .map(|d| {
                let bundle = load_translator(&d.join(TRANSLATOR_FILE), Device::Cpu).unwrap();
                noise_probe(&bundle, target, 0.0, 0).unwrap().factor
            })
            .collect();
        Desk {
            report: outcome.report.expect("protocol produced rows"),
            zero_sigma_factors,
            slowest_run: slowest,
            failures: failures + outcome.failures.len(),
        }
    })
}

fn median_of(rep: &EvaluationReport, variant: &str, metric: &str) -> f64 {
    rep.aggregate(variant, metric).map(|a| a.median).unwrap_or(f64::NAN)
}

#[test]
fn criterion_06_desk_scale_direction() {
    let d = desk();
    let (f1_b, f1_d) = (median_of(&d.report, "baseline", "pixel_f1"), median_of(&d.report, "dsa", "pixel_f1"));
    let (m_b, m_d) = (median_of(&d.report, "baseline", "dsm_to_source"), median_of(&d.report, "dsa", "dsm_to_source"));
    verdict(
        6,
        d.failures == 0 && f1_d >= f1_b && m_d <= m_b && d.slowest_run <= RUN_BUDGET,
        "median pixel F1 dsa >= baseline and median DSM dsa <= baseline over 3 seeds",
        format!(
            "F1 baseline {f1_b:.4} dsa {f1_d:.4}; DSM baseline {m_b:.4} dsa {m_d:.4}; slowest run {:.0}s",
            d.slowest_run.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_noise_embedding_probe() {
    let d = desk();
    let (p_b, p_d) = (
        median_of(&d.report, "baseline", "noise_probe_factor"),
        median_of(&d.report, "dsa", "noise_probe_factor"),
    );
    let exact = d.zero_sigma_factors.iter().all(|f| *f == 1.0);
    verdict(
        7,
        p_b > p_d && exact,
        "median probe factor baseline > dsa; sigma=0 gives exactly 1",
        format!("baseline {p_b:.4}, dsa {p_d:.4}; sigma=0 factors {:?}", d.zero_sigma_factors),
    );
}

#[test]
fn criterion_08_correlation_direction() {
    let d = desk();
    let rho = correlate_dsm_f1(&d.report.cells);
    verdict(
        8,
        matches!(rho, Ok(r) if r < 0.0),
        "Spearman(DSM to source, pixel F1) across cells is negative",
        format!("{rho:?} over {} cells", d.report.cells.len()),
    );
}

#[test]
fn criterion_09_variant_contracts() {
    let world = tiny_world();
    let mut noisy = tiny_run("gaussian_noise");
    noisy.variant_params.sigma = 0.0;
    let noise_gap = max_gap(&steps(&world, &noisy, 10), &steps(&world, &tiny_run("baseline"), 10));

    let registry = VariantRegistry::with_builtins();
    let extra = TranslatorTrainer::new(&tiny_run("extra_channels"), 1, &registry, Device::Cpu).unwrap();
    let b = extra.bundle();
    let probe_img = world.data.split(Split::Test).images(StainProfile::Poor);
    let translated = b.to_source(probe_img).unwrap();
    let visible_ok = b.carrier_channels == 1 && translated.size()[1] == 3 && b.to_target(probe_img).unwrap().size()[1] == 3;
    let disc_ok = b.d_s.forward(&translated).is_ok() && b.d_s.forward(&b.with_carrier(&translated)).is_err();

    let ss = steps(&world, &tiny_run("self_supervision"), 4);
    let ss_ok = ss.iter().all(|x| x.dsl_fake == 0.0 && x.dsl_cyc == 0.0 && x.dsl_id == 0.0);

    let mut buf = ReplayBuffer::new(50);
    let mut rng = stream(11, "replay");
    let img = Tensor::zeros([1, 1, 1, 1], (Kind::Float, Device::Cpu));
    for i in 0..10_050 {
        let _ = buf.query(&(&img + i as f64), &mut rng);
    }
    let rate = buf.swaps() as f64 / buf.queries_at_capacity() as f64;
    verdict(
        9,
        noise_gap <= PARITY_TOL && visible_ok && disc_ok && ss_ok && (rate - 0.5).abs() <= SWAP_RATE_TOL,
        "noise sigma=0 parity, visible C channels, no metric terms in self-supervision, swap rate",
        format!("noise parity gap {noise_gap:.1e}, visible ok {visible_ok}/{disc_ok}, self-supervision ok {ss_ok}, swap rate {rate:.4}"),
    );
}

#[test]
fn criterion_10_determinism_and_idempotence() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = common::tiny_data_spec();
    let (first, o1) = build_dataset(&tmp.path().join("a"), &spec).unwrap();
    let (again, o2) = build_dataset(&tmp.path().join("a"), &spec).unwrap();
    let (fresh, _) = build_dataset(&tmp.path().join("b"), &spec).unwrap();
    let data_ok = o1 == BuildOutcome::Written
        && o2 == BuildOutcome::Unchanged
        && first.digest() == again.digest()
        && first.digest() == fresh.digest();

    let world = tiny_world();
    let cfg = tiny_run("dsa");
    let metrics_ok = steps(&world, &cfg, 10) == steps(&world, &cfg, 10);

    let rows = (0..24)
        .map(|i| dsa_cyclegan::eval::PatchRow {
            scene_id: i % 6,
            variant: if i < 12 { "baseline".into() } else { "dsa".into() },
            seed: 1 + (i / 6) % 2,
            pixel_f1: (i as f64 * 0.37).fract(),
            object_f1: (i as f64 * 0.11).fract(),
            dsm_to_source: 0.1 * (1 + (i / 6)) as f64,
        })
        .collect();
    let dir = tmp.path().join("report");
    EvaluationReport::from_rows(rows, vec![]).unwrap().write(&dir).unwrap();
    let files = ["results.csv", "cells.csv", "summary.md"];
    let read = || files.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect::<Vec<_>>();
    let before = read();
    report(&dir).unwrap();
    let report_ok = read() == before;
    verdict(
        10,
        data_ok && metrics_ok && report_ok,
        "dataset regeneration stable, same-seed metrics identical, report byte-stable",
        format!("dataset {data_ok}, 10-step metrics {metrics_ok}, report {report_ok}"),
    );
}
