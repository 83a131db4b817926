//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use oodprompt::collection::bank::{decode_payload, HEADER_LEN};
use oodprompt::collection::{hybrid_collect, EmbeddingBank, Group, Provenance, RowMeta};
use oodprompt::metrics::{auroc, auroc_pairwise, fpr_at_tpr, fpr_at_tpr_scan};
use oodprompt::numeric::{dot, norm, FeatureMatrix, RngStream, StreamTag};
use oodprompt::pipeline::{simulate, RunConfig};
use oodprompt::prompts::{init_prompts, PromptInit, Scheme};
use oodprompt::scoring::{mcm_score, neglabel_from_cosines};
use oodprompt::training::{
    gradient_check, mix_cross_distribution, mix_cross_distribution_with, mix_cross_modal,
    mix_cross_modal_with, Batch, StepBatches, Terms, TrainConfig,
};
use oodprompt::{Error, LabelSpace};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration) -> String {
    format!("{:.2}s of {}s", elapsed.as_secs_f64(), limit.as_secs())
}

fn rng(seed: u64) -> RngStream {
    RngStream::new(seed, StreamTag::ToyWorld)
}

/// Scores drawn from a small grid so ties are common.
fn tied_scores(r: &mut RngStream, max_len: usize) -> Vec<f64> {
    let len = 1 + r.index(max_len);
    let levels = 2 + r.index(40);
    (0..len)
        .map(|_| r.index(levels) as f64 / levels as f64)
        .collect()
}

fn metric_oracles() -> Outcome {
    let limit = Duration::from_secs(30);
    let start = Instant::now();
    let mut r = rng(101);
    let fixtures = 1200;
    let mut worst_auroc = 0.0f64;
    let mut fpr_mismatches = 0;
    for _ in 0..fixtures {
        let id = tied_scores(&mut r, 200);
        let ood = tied_scores(&mut r, 200);
        worst_auroc =
            worst_auroc.max((auroc(&id, &ood).unwrap() - auroc_pairwise(&id, &ood)).abs());
        if fpr_at_tpr(&id, &ood, 0.95).unwrap() != fpr_at_tpr_scan(&id, &ood, 0.95) {
            fpr_mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_auroc <= 1e-9 && fpr_mismatches == 0 && elapsed < limit,
        format!(
            "{fixtures} fixtures, max |auroc - oracle| {worst_auroc:.1e}, fpr mismatches {fpr_mismatches}, {}",
            within(elapsed, limit)
        ),
    )
}

fn random_space(r: &mut RngStream, c: usize, m: usize, dim: usize) -> LabelSpace {
    let rows = |r: &mut RngStream, k: usize| {
        FeatureMatrix::from_rows(dim, &(0..k).map(|_| r.unit_vector(dim)).collect::<Vec<_>>())
            .unwrap()
    };
    let id = rows(r, c);
    let neg = rows(r, m);
    LabelSpace::new(
        (0..c).map(|i| format!("id-{i}")).collect(),
        id,
        (0..m).map(|i| format!("neg-{i}")).collect(),
        neg,
    )
    .unwrap()
}

/// A batch of noisy anchor copies, cycling through every class.
fn noisy_batch(r: &mut RngStream, space: &LabelSpace, size: usize, sigma: f64) -> Batch {
    let k = space.num_classes();
    let mut b = Batch::empty(space.dim(), k);
    for i in 0..size {
        let class = if i % 2 == 0 {
            i / 2 % space.num_id()
        } else {
            space.num_id() + r.index(space.num_neg())
        };
        let mut v: Vec<f64> = space
            .anchor(class)
            .iter()
            .zip(r.gaussian_vec(space.dim(), sigma))
            .map(|(a, e)| a + e)
            .collect();
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        b.features.push_row(&v).unwrap();
        let mut label = vec![0.0; k];
        label[class] = 1.0;
        b.labels.extend(label);
        b.classes.push(class);
    }
    b
}

fn gradients() -> Outcome {
    let limit = Duration::from_secs(10);
    let start = Instant::now();
    let mut r = rng(202);
    let space = random_space(&mut r, 3, 4, 8);
    let cfg = TrainConfig::default();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for scheme in [
        Scheme::Unified,
        Scheme::ClassSpecific,
        Scheme::DistributionAware,
    ] {
        let mut p = init_prompts(
            scheme,
            2,
            space.dim(),
            space.num_classes(),
            &PromptInit::Random,
            7,
        )
        .unwrap();
        // move away from the near-anchor start so every term has curvature
        p.token_sets.iter_mut().flatten().for_each(|x| *x *= 10.0);
        let plain = noisy_batch(&mut r, &space, 8, 0.3);
        let mut mix = RngStream::new(9, StreamTag::Mixing);
        let batches = StepBatches::draw(plain, &space, &cfg, &mut mix).unwrap();
        for terms in [
            Terms::ALL,
            Terms::PLAIN,
            Terms::CROSS_MODAL,
            Terms::CROSS_DISTRIBUTION,
        ] {
            worst = worst
                .max(gradient_check(&p, &space, &batches, cfg.tau_train, terms, 1e-5).unwrap());
            checks += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < limit,
        format!(
            "C=3 M=4 batch 8, {checks} scheme/term checks, max rel err {worst:.2e}, {}",
            within(elapsed, limit)
        ),
    )
}

fn score_identities() -> Outcome {
    let mut worst = 0.0f64;
    for c in 1..=8usize {
        for m in 1..=12usize {
            for tau in [0.01, 0.1, 1.0] {
                let cos = 0.37;
                worst = worst.max(
                    (neglabel_from_cosines(&vec![cos; c], &vec![cos; m], tau).unwrap()
                        - c as f64 / (c + m) as f64)
                        .abs(),
                );
            }
        }
        let dim = c + 1;
        let id = FeatureMatrix::from_rows(
            dim,
            &(0..c)
                .map(|i| {
                    let mut e = vec![0.0; dim];
                    e[i] = 1.0;
                    e
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut v = vec![0.0; dim];
        v[c] = 1.0;
        for tau in [0.01, 0.1, 1.0] {
            worst = worst.max((mcm_score(&v, &id, tau).unwrap() - 1.0 / c as f64).abs());
        }
    }

    let mut r = rng(303);
    let fixtures = 10_000;
    let mut violations = 0;
    for _ in 0..fixtures {
        let c = 1 + r.index(6);
        let m = 1 + r.index(8);
        let tau = 0.01 + r.uniform() * 2.0;
        let id: Vec<f64> = (0..c).map(|_| 2.0 * r.uniform() - 1.0).collect();
        let neg: Vec<f64> = (0..m).map(|_| 2.0 * r.uniform() - 1.0).collect();
        let bump = r.uniform() * 0.5;
        let base = neglabel_from_cosines(&id, &neg, tau).unwrap();
        let mut up = id.clone();
        up[r.index(c)] += bump;
        let mut worse = neg.clone();
        worse[r.index(m)] += bump;
        if neglabel_from_cosines(&up, &neg, tau).unwrap() < base
            || neglabel_from_cosines(&id, &worse, tau).unwrap() > base
        {
            violations += 1;
        }
        // mcm through real vectors: v has the chosen cosines as coordinates
        // against axis rows, with the slack in one spare dimension
        let unit_with = |xs: &[f64]| {
            let mut v = xs.to_vec();
            v.push((1.0 - xs.iter().map(|x| x * x).sum::<f64>()).sqrt());
            v
        };
        let axes = FeatureMatrix::from_rows(
            c + 1,
            &(0..c)
                .map(|i| {
                    let mut e = vec![0.0; c + 1];
                    e[i] = 1.0;
                    e
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let half = 0.5 / (c as f64).sqrt();
        let xs: Vec<f64> = (0..c).map(|_| half * (2.0 * r.uniform() - 1.0)).collect();
        let k = xs
            .iter()
            .enumerate()
            .fold(0, |b, (i, &x)| if x > xs[b] { i } else { b });
        let mut raised = xs.clone();
        raised[k] += half * r.uniform();
        let before = mcm_score(&unit_with(&xs), &axes, tau).unwrap();
        let after = mcm_score(&unit_with(&raised), &axes, tau).unwrap();
        let floor = 1.0 / c as f64 - 1e-12;
        if after < before - 1e-12 || before < floor || before > 1.0 + 1e-12 {
            violations += 1;
        }
    }
    outcome(
        worst <= 1e-12 && violations == 0,
        format!("symmetry max err {worst:.1e}; {fixtures} monotonicity fixtures, {violations} violations"),
    )
}

fn mixing_contracts() -> Outcome {
    let mut r = rng(404);
    let mut endpoint_failures = 0;
    for _ in 0..1000 {
        let dim = 2 + r.index(10);
        let v = r.unit_vector(dim);
        let a = r.unit_vector(dim);
        let l1 = [0.2, 0.8, 0.0];
        let l2 = [0.0, 0.0, 1.0];
        if mix_cross_modal_with(&v, &a, 1.0).unwrap() != v
            || mix_cross_modal_with(&v, &a, 0.0).unwrap() != a
        {
            endpoint_failures += 1;
        }
        if mix_cross_distribution_with(&v, &l1, &a, &l2, 1.0).unwrap() != (v.clone(), l1.to_vec())
            || mix_cross_distribution_with(&v, &l1, &a, &l2, 0.0).unwrap()
                != (a.clone(), l2.to_vec())
        {
            endpoint_failures += 1;
        }
    }

    let target = 10_000;
    let mut draws = 0;
    let mut worst_sum = 0.0f64;
    let mut worst_norm = 0.0f64;
    let mut mix = RngStream::new(5, StreamTag::Mixing);
    let space = random_space(&mut r, 4, 6, 8);
    while draws < target {
        let alpha = 0.1 + 4.9 * r.uniform();
        let plain = noisy_batch(&mut r, &space, 32, 0.5);
        let cm = mix_cross_modal(&plain, &space, alpha, &mut mix).unwrap();
        let cd = mix_cross_distribution(&plain, space.num_id(), alpha, &mut mix).unwrap();
        for b in [&cm, &cd] {
            for i in 0..b.len() {
                worst_sum = worst_sum.max((b.label(i).iter().sum::<f64>() - 1.0).abs());
                worst_norm = worst_norm.max((norm(b.features.row(i)) - 1.0).abs());
                draws += 1;
            }
        }
    }
    outcome(
        endpoint_failures == 0 && worst_sum <= 1e-9 && worst_norm <= 1e-9,
        format!("endpoint failures {endpoint_failures}; {draws} mixed rows, max |sum-1| {worst_sum:.1e}, max |norm-1| {worst_norm:.1e}"),
    )
}

fn hybrid_selection() -> Outcome {
    let mut r = rng(505);
    let fixtures = 1000;
    let mut below = 0;
    let mut non_monotone = 0;
    for _ in 0..fixtures {
        let dim = 4 + r.index(12);
        let anchor = r.unit_vector(dim);
        let spread = 0.2 + r.uniform() * 1.5;
        let pool = |r: &mut RngStream, k: usize| {
            let mut m = FeatureMatrix::new(dim);
            for _ in 0..k {
                let mut v: Vec<f64> = anchor
                    .iter()
                    .zip(r.gaussian_vec(dim, spread))
                    .map(|(a, e)| a + e)
                    .collect();
                let n = norm(&v);
                v.iter_mut().for_each(|x| *x /= n);
                m.push_row(&v).unwrap();
            }
            m
        };
        let n = 1 + r.index(20);
        let n_real = r.index(30);
        let real = pool(&mut r, n_real);
        let synth = pool(&mut r, n);
        let k1 = 0.05 + 0.9 * r.uniform();
        let k2 = k1 + (0.99 - k1) * r.uniform();
        let (f1, p1) = hybrid_collect(&real, &synth, &anchor, k1, n).unwrap();
        let (_, p2) = hybrid_collect(&real, &synth, &anchor, k2, n).unwrap();
        for (i, p) in p1.iter().enumerate() {
            if *p == Provenance::Real && dot(f1.row(i), &anchor) <= k1 {
                below += 1;
            }
        }
        let count = |p: &[Provenance]| p.iter().filter(|&&x| x == Provenance::Real).count();
        if count(&p2) > count(&p1) {
            non_monotone += 1;
        }
    }
    outcome(
        below == 0 && non_monotone == 0,
        format!("{fixtures} fixtures, real rows at or below kappa {below}, kappa-monotonicity violations {non_monotone}"),
    )
}

fn directional_claim() -> Outcome {
    let limit = Duration::from_secs(120);
    let start = Instant::now();
    let seeds = 5u64;
    let mut base = (0.0, 0.0);
    let mut da = (0.0, 0.0);
    let mut uni = 0.0;
    for seed in 0..seeds {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let d = simulate(&RunConfig {
            scheme: Scheme::DistributionAware,
            ..cfg.clone()
        })
        .unwrap();
        let u = simulate(&RunConfig {
            scheme: Scheme::Unified,
            ..cfg
        })
        .unwrap();
        base.0 += d.baseline.mean_auroc;
        base.1 += d.baseline.mean_fpr95;
        da.0 += d.trained.mean_auroc;
        da.1 += d.trained.mean_fpr95;
        uni += u.trained.mean_auroc;
    }
    let n = seeds as f64;
    let (b_auc, b_fpr, d_auc, d_fpr, u_auc) = (base.0 / n, base.1 / n, da.0 / n, da.1 / n, uni / n);
    let elapsed = start.elapsed();
    let pass = d_auc >= b_auc + 0.02 && d_fpr <= b_fpr - 0.03 && d_auc >= u_auc && elapsed < limit;
    outcome(
        pass,
        format!(
            "{seeds} seeds: AUROC base {b_auc:.4} DA {d_auc:.4} unified {u_auc:.4}; FPR95 base {b_fpr:.4} DA {d_fpr:.4}; {}",
            within(elapsed, limit)
        ),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_oodprompt"))
            .args(["run-all", "--seed", "11", "--out"])
            .arg(d.path())
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(
                false,
                format!(
                    "run-all failed: {}",
                    String::from_utf8_lossy(&status.stderr)
                ),
            );
        }
    }
    let (a, b) = (snapshot(dirs[0].path()), snapshot(dirs[1].path()));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let covers = [
        "prompts.json",
        "report.json",
        "report_baseline.json",
        "training.bank",
        "labelspace.bank",
    ]
    .iter()
    .all(|want| a.iter().any(|(n, _)| n == want));
    outcome(
        a.len() == b.len() && differing.is_empty() && covers,
        format!("{} files compared, {} differ", a.len(), differing.len()),
    )
}

fn format_suite() -> Outcome {
    let mut r = rng(606);
    let mut failures = Vec::new();
    for trial in 0..50 {
        let dim = 1 + r.index(32);
        let rows = r.index(20);
        let feats = FeatureMatrix::from_rows(
            dim,
            &(0..rows).map(|_| r.unit_vector(dim)).collect::<Vec<_>>(),
        )
        .unwrap();
        let meta = (0..rows)
            .map(|i| RowMeta::new(format!("w{i}"), Group::Corpus, Provenance::External))
            .collect();
        let bank = EmbeddingBank::from_features(&feats, meta).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bank");
        bank.save(&path).unwrap();
        let back = EmbeddingBank::load(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        if back != bank || back.encode() != bytes {
            failures.push(format!("round trip {trial}"));
        }
    }

    let feats = FeatureMatrix::from_rows(3, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let bank = EmbeddingBank::from_features(
        &feats,
        vec![
            RowMeta::new("a", Group::Id, Provenance::Real),
            RowMeta::new("b", Group::Id, Provenance::Real),
        ],
    )
    .unwrap();
    let bytes = bank.encode();
    let manifest = bank.encode_manifest();

    let mut bad = bytes.clone();
    bad[..8].copy_from_slice(b"NOTABANK");
    if !matches!(EmbeddingBank::decode(&bad, &manifest), Err(Error::BadMagic)) {
        failures.push("bad magic".into());
    }
    for cut in [4, HEADER_LEN - 1, HEADER_LEN + 5, bytes.len() - 1] {
        if !matches!(
            decode_payload(&bytes[..cut]),
            Err(Error::TruncatedFile { .. })
        ) {
            failures.push(format!("truncation at {cut}"));
        }
    }
    let short: String = manifest.lines().next().unwrap().to_string();
    if !matches!(
        EmbeddingBank::decode(&bytes, &short),
        Err(Error::ManifestMismatch(_))
    ) {
        failures.push("manifest with a missing row".into());
    }
    let extra = format!(
        "{manifest}{{\"index\":2,\"label\":\"c\",\"group\":\"id\",\"provenance\":\"real\"}}\n"
    );
    if !matches!(
        EmbeddingBank::decode(&bytes, &extra),
        Err(Error::ManifestMismatch(_))
    ) {
        failures.push("manifest with an extra row".into());
    }
    let mut scaled = bytes.clone();
    scaled[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&2.0f32.to_le_bytes());
    if !matches!(
        EmbeddingBank::decode(&scaled, &manifest),
        Err(Error::NormViolation { .. })
    ) {
        failures.push("non-unit row".into());
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "50 round trips bit-exact; corrupted fixtures rejected".to_string()
        } else {
            failures.join(", ")
        },
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("metric oracles", metric_oracles),
        ("gradient correctness", gradients),
        ("score identities", score_identities),
        ("mixing contracts", mixing_contracts),
        ("hybrid selection", hybrid_selection),
        ("directional improvement", directional_claim),
        ("run-all determinism", determinism),
        ("bank format", format_suite),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name:<24} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
