//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use clora_core::attention::{infonce_loss, ContrastiveObjective};
use clora_core::backend::toy::{ToyBackend, ToyConfig};
use clora_core::backend::{Conditioning, DenoiserBackend};
use clora_core::composition::{build_groups, build_variants, CompositionSpec, ConceptBinding, LoraId};
use clora_core::lora::{apply_delta, weighted_merge, LoraLayerDelta, LoraSet};
use clora_core::mask::{binary_mask, lora_mask, upsample_mask};
use clora_core::pipeline::bench::{run_benchmark, BenchOptions, Manifest};
use clora_core::pipeline::eval::{evaluate, EvalReport, FeatureExtractor, ToyExtractor};
use clora_core::pipeline::{
    generate, merged_prompt, png_bytes, resolve_adapters, sample_single, Generation, Method, RunOptions,
};
use clora_core::Result as CoreResult;
use image::{GrayImage, Luma};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEPS: usize = 50;

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cat_dog(seed: u64) -> CompositionSpec {
    let mut spec = CompositionSpec::new(
        "a cat and a dog",
        vec![
            ConceptBinding::content("cat", "blackcat"),
            ConceptBinding::content("dog", "browndog"),
        ],
    );
    spec.seed = seed;
    spec
}

fn run(spec: &CompositionSpec, method: Method, opts: &RunOptions) -> Generation {
    let mut backend = ToyBackend::new(ToyConfig::default().with_steps(STEPS)).unwrap();
    let (adapters, info) = resolve_adapters(spec, None, Some(&backend)).unwrap();
    generate(&mut backend, spec, method, &adapters, &info, opts).unwrap()
}

// ---------------------------------------------------------------- 1 and 2

/// Straight transcription of the loss: for each anchor and each other
/// member of its group, -log(e^{s+/t} / (e^{s+/t} + sum over other-group
/// members e^{s-/t})), averaged over those pairs.
fn brute_force_infonce(groups: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        dot / (na.sqrt() * nb.sqrt())
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (g, group) in groups.iter().enumerate() {
        for (j, anchor) in group.iter().enumerate() {
            for (k, positive) in group.iter().enumerate() {
                if j == k {
                    continue;
                }
                let pos = (cos(anchor, positive) / tau).exp();
                let mut neg = 0.0;
                for (h, other) in groups.iter().enumerate() {
                    if h == g {
                        continue;
                    }
                    for n in other {
                        neg += (cos(anchor, n) / tau).exp();
                    }
                }
                total += -(pos / (pos + neg)).ln();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_groups = rng.random_range(1..=4);
        let len = rng.random_range(8..=64);
        let groups: Vec<Vec<Vec<f64>>> = (0..n_groups)
            .map(|_| {
                let members = rng.random_range(1..=4);
                (0..members)
                    .map(|_| (0..len).map(|_| rng.random_range(0.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let arrays: Vec<Vec<Array1<f64>>> = groups
            .iter()
            .map(|g| g.iter().map(|m| Array1::from(m.clone())).collect())
            .collect();
        let ours = infonce_loss(&arrays, 0.5).unwrap();
        worst = worst.max((ours - brute_force_infonce(&groups, 0.5)).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(5),
        format!("200 instances, max |diff| {worst:.2e} (tol 1e-9), {elapsed:.2?} (limit 5s)"),
    )
}

fn criterion_2() -> Outcome {
    let a = array![1.0, 0.0];
    let groups = vec![vec![a.clone(), a], vec![array![0.0, 1.0]]];
    let loss = infonce_loss(&groups, 0.5).unwrap();
    let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
    outcome(
        (loss - expected).abs() <= 1e-6 && (loss - 0.126928).abs() <= 1e-6,
        format!("loss {loss:.9}, closed form {expected:.9} (tol 1e-6)"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..5u64 {
        let spec = cat_dog(seed);
        let mut backend = ToyBackend::new(ToyConfig::default().with_steps(STEPS)).unwrap();
        let (adapters, _) = resolve_adapters(&spec, None, Some(&backend)).unwrap();
        let variants = build_variants(&spec, backend.tokenizer()).unwrap();
        let groups = build_groups(&variants, &spec).unwrap();
        let mut embs = Vec::new();
        let mut sets = Vec::new();
        for v in &variants {
            let set = match &v.active_lora {
                Some(id) => LoraSet::single(adapters[id].clone()),
                None => LoraSet::empty(),
            };
            embs.push(backend.encode_prompt(v, &set).unwrap());
            sets.push(set);
        }
        let branches: Vec<Conditioning<'_>> = embs
            .iter()
            .zip(&sets)
            .map(|(e, s)| Conditioning { embedding: e, loras: s })
            .collect();
        let objective = ContrastiveObjective {
            groups: &groups,
            branch_variants: variants.iter().map(|v| v.variant_id).collect(),
            temperature: 0.5,
        };
        let mut z = backend.initial_latent(seed);
        z.timestep_index = (seed as usize * 7) % 25;
        let analytic = backend.grad_wrt_latent(&z, &branches, &objective).unwrap().grad;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (c, h, w) = z.data.dim();
        let h_fd = 1e-6;
        for _ in 0..32 {
            let idx = (rng.random_range(0..c), rng.random_range(0..h), rng.random_range(0..w));
            let mut plus = z.clone();
            plus.data[idx] += h_fd;
            let mut minus = z.clone();
            minus.data[idx] -= h_fd;
            let lp = backend.grad_wrt_latent(&plus, &branches, &objective).unwrap().loss;
            let lm = backend.grad_wrt_latent(&minus, &branches, &objective).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h_fd);
            let an = analytic[idx];
            // relative to the larger magnitude, floored at 1e-6 so that
            // coordinates with vanishing gradient compare absolutely
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("{checked} coordinates over 5 seeds, max rel err {worst:.2e} (tol 1e-4), {elapsed:.2?} (limit 60s)"),
    )
}

// ---------------------------------------------------------------- 4

fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
    f64::from(rng.random_range(-64i32..=64)) / 8.0
}

fn criterion_4() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = Array2::from_shape_fn((3, 4), |_| dyadic(&mut rng));

    let zero_up = LoraLayerDelta::new("w", Array2::from_shape_fn((2, 4), |_| dyadic(&mut rng)), Array2::zeros((3, 2)), 2.0)
        .unwrap();
    let zero_down =
        LoraLayerDelta::new("w", Array2::zeros((2, 4)), Array2::from_shape_fn((3, 2), |_| dyadic(&mut rng)), 2.0)
            .unwrap();
    if apply_delta(&base, &zero_up, 1.0).unwrap() != base || apply_delta(&base, &zero_down, 1.0).unwrap() != base {
        failures.push("zero-delta identity");
    }

    let hand = LoraLayerDelta::new("w", array![[0.0, 1.0]], array![[1.0], [0.0]], 1.0).unwrap();
    if apply_delta(&Array2::eye(2), &hand, 1.0).unwrap() != array![[1.0, 1.0], [0.0, 1.0]] {
        failures.push("rank-1 hand example");
    }

    for _ in 0..100 {
        let d = LoraLayerDelta::new(
            "w",
            Array2::from_shape_fn((1, 4), |_| dyadic(&mut rng)),
            Array2::from_shape_fn((3, 1), |_| dyadic(&mut rng)),
            1.0,
        )
        .unwrap();
        let (s1, s2) = (dyadic(&mut rng), dyadic(&mut rng));
        let lhs = apply_delta(&base, &d, s1).unwrap() + apply_delta(&base, &d, s2).unwrap() - &base;
        if lhs != apply_delta(&base, &d, s1 + s2).unwrap() {
            failures.push("scale affinity");
            break;
        }
    }

    let spec = CompositionSpec::new(
        "a cat and a dog",
        vec![
            ConceptBinding {
                weight: 1.0,
                ..ConceptBinding::content("cat", "blackcat")
            },
            ConceptBinding {
                weight: 0.0,
                ..ConceptBinding::content("dog", "browndog")
            },
        ],
    );
    let mut backend = ToyBackend::new(ToyConfig::default().with_steps(STEPS)).unwrap();
    let (adapters, info) = resolve_adapters(&spec, None, Some(&backend)).unwrap();
    let first = adapters[&LoraId::from("blackcat")].clone();
    let merged = weighted_merge(&LoraSet {
        entries: vec![(first.clone(), 1.0), (adapters[&LoraId::from("browndog")].clone(), 0.0)],
    })
    .unwrap();
    for (key, d) in &first.deltas {
        let w = backend.weight(key).unwrap();
        if apply_delta(&w, &merged.deltas[key], 1.0).unwrap() != apply_delta(&w, d, 1.0).unwrap() {
            failures.push("merge (1,0) layer weights");
            break;
        }
    }
    let merged_run = generate(&mut backend, &spec, Method::Merge, &adapters, &info, &RunOptions::default()).unwrap();
    let text = merged_prompt(&spec, &backend).unwrap();
    let single = sample_single(&mut backend, &text, &LoraSet::single(first), 0).unwrap();
    if png_bytes(&merged_run.image).unwrap() != png_bytes(&backend.decode(&single).unwrap()).unwrap() {
        failures.push("merge (1,0) generation");
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "zero delta, [[1,1],[0,1]], 100 dyadic affinity trials, merge (1,0) weights and image: all bit-exact".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = [0usize; 5];
    let tau = 0.5;
    let random_map = |rng: &mut ChaCha8Rng| -> Array2<f64> {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
    };
    for _ in 0..100 {
        let a = random_map(&mut rng);
        let c = rng.random_range(0.01..100.0);
        if binary_mask(a.view(), tau).unwrap() != binary_mask((&a * c).view(), tau).unwrap() {
            failures[0] += 1;
        }
    }
    for _ in 0..100 {
        let a = random_map(&mut rng);
        let m = binary_mask(a.view(), tau).unwrap();
        let (idx, _) = a
            .indexed_iter()
            .fold(((0, 0), f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        if !m[idx] {
            failures[1] += 1;
        }
    }
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let v = rng.random_range(0.001..10.0);
        if !binary_mask(Array2::from_elem((h, w), v).view(), tau).unwrap().iter().all(|&b| b) {
            failures[2] += 1;
        }
    }
    for _ in 0..100 {
        let k = rng.random_range(1..=4);
        let sources: Vec<Array2<f64>> = (0..=k)
            .map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0)))
            .collect();
        let views: Vec<_> = sources.iter().map(|s| s.view()).collect();
        let fewer = lora_mask(&views[..k], tau).unwrap();
        let more = lora_mask(&views, tau).unwrap();
        if fewer.iter().zip(more.iter()).any(|(&f, &m)| f && !m) {
            failures[3] += 1;
        }
    }
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (fy, fx) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let m = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.5));
        let up = upsample_mask(&m, (h * fy, w * fx)).unwrap();
        if up.indexed_iter().any(|((i, j), &v)| v != m[[i / fy, j / fx]]) {
            failures[4] += 1;
        }
    }
    let total: usize = failures.iter().sum();
    outcome(
        total == 0,
        format!(
            "100 trials each; failures: scale {}, argmax {}, uniform {}, union monotone {}, nearest blocks {}",
            failures[0], failures[1], failures[2], failures[3], failures[4]
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let spec = CompositionSpec::new(
        "a woman with an umbrella",
        vec![
            ConceptBinding::content("woman", "L1"),
            ConceptBinding::content("umbrella", "L2"),
        ],
    );
    let backend = ToyBackend::new(ToyConfig::default()).unwrap();
    let variants = build_variants(&spec, backend.tokenizer()).unwrap();
    let groups = build_groups(&variants, &spec).unwrap();
    let texts: Vec<&str> = variants.iter().map(|v| v.text.as_str()).collect();
    // (variant, token) with BOS at index 0
    let woman = vec![(0, 2), (1, 2), (1, 3), (2, 2)];
    let umbrella = vec![(0, 5), (1, 6), (2, 5), (2, 6)];
    let ok = texts == ["a woman with an umbrella", "a L1 woman with an umbrella", "a woman with an L2 umbrella"]
        && groups.len() == 2
        && groups[0].members == woman
        && groups[1].members == umbrella;
    outcome(
        ok,
        format!(
            "woman group {:?} (woman@v0, L1@v1, woman@v1, woman@v2), umbrella group {:?} (umbrella@v0, umbrella@v1, L2@v2, umbrella@v2)",
            groups.first().map(|g| &g.members),
            groups.get(1).map(|g| &g.members)
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut collapse = 0;
    let mut removed = 0;
    for seed in 0..10u64 {
        let mut off = cat_dog(seed);
        off.guidance_config.enabled = false;
        off.mask_config.enabled = false;
        let a = run(&off, Method::Clora, &RunOptions::default());
        let b = run(&cat_dog(seed), Method::Composite, &RunOptions::default());
        if png_bytes(&a.image).unwrap() == png_bytes(&b.image).unwrap() {
            collapse += 1;
        }

        let mut no_guidance = cat_dog(seed);
        no_guidance.guidance_config.enabled = false;
        let c = run(&no_guidance, Method::Clora, &RunOptions::default());
        let bypass = RunOptions {
            bypass_guidance: true,
            ..RunOptions::default()
        };
        let d = run(&cat_dog(seed), Method::Clora, &bypass);
        if png_bytes(&c.image).unwrap() == png_bytes(&d.image).unwrap() {
            removed += 1;
        }
    }
    outcome(
        collapse == 10 && removed == 10,
        format!("no-guidance+no-masking == composite: {collapse}/10; no-guidance == module removed: {removed}/10"),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut decreased = 0;
    let mut guided_iou = 0.0;
    let mut unguided_iou = 0.0;
    let mut slowest = Duration::ZERO;
    for seed in 0..20u64 {
        let spec = cat_dog(seed);
        let start = Instant::now();
        let g = run(&spec, Method::Clora, &RunOptions::default());
        slowest = slowest.max(start.elapsed());
        let step0 = &g.metadata.trace.steps[0];
        if step0.loss_after.unwrap() <= step0.losses[0] {
            decreased += 1;
        }
        let mut off = spec.clone();
        off.guidance_config.enabled = false;
        let u = run(&off, Method::Clora, &RunOptions::default());
        guided_iou += g.metadata.mean_inter_group_iou().unwrap() / 20.0;
        unguided_iou += u.metadata.mean_inter_group_iou().unwrap() / 20.0;
    }
    outcome(
        decreased >= 18 && guided_iou < unguided_iou && slowest < Duration::from_secs(10),
        format!(
            "loss reduced by step-0 refinement in {decreased}/20 seeds (need 18); mean inter-group IoU guided {guided_iou:.5} vs unguided {unguided_iou:.5}; slowest 50-step run {slowest:.2?} (limit 10s)"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let mut failures = Vec::new();
    let a = run(&cat_dog(3), Method::Clora, &RunOptions::default());
    let b = run(&cat_dog(3), Method::Clora, &RunOptions::default());
    if png_bytes(&a.image).unwrap() != png_bytes(&b.image).unwrap() {
        failures.push("image bytes");
    }
    if a.metadata.to_json() != b.metadata.to_json() {
        failures.push("metadata");
    }

    let manifest_text = |entries: &str| {
        format!("seeds = [0, 1]\nmethods = [\"clora\", \"composite\"]\n{entries}")
    };
    let e1 = "[[entries]]\nprompt = \"a cat and a dog\"\nconcepts = [\"cat\", \"dog\"]\nloras = [\"blackcat\", \"browndog\"]\n";
    let e2 = "[[entries]]\nprompt = \"a bird on a tree\"\nconcepts = [\"bird\", \"tree\"]\nloras = [\"bluebird\", \"oak\"]\n";
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let manifests = [
        Manifest::from_toml(&manifest_text(&format!("{e1}{e2}"))).unwrap(),
        Manifest::from_toml(&manifest_text(&format!("{e1}{e2}"))).unwrap(),
        Manifest::from_toml(&manifest_text(&format!("{e2}{e1}"))).unwrap(),
    ];
    for (m, d) in manifests.iter().zip(&dirs) {
        let opts = BenchOptions {
            backend: "toy".into(),
            steps: STEPS,
            out_dir: d.path().to_path_buf(),
        };
        run_benchmark(m, &opts, Some(&ToyExtractor::default())).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    if read(&dirs[0], "table.csv") != read(&dirs[1], "table.csv") {
        failures.push("benchmark table");
    }
    let mut cells = 0;
    for entry in std::fs::read_dir(dirs[0].path().join("cells")).unwrap() {
        let name = entry.unwrap().file_name();
        let rel = std::path::Path::new("cells").join(&name);
        let first = read(&dirs[0], rel.to_str().unwrap());
        if first != read(&dirs[1], rel.to_str().unwrap()) || first != read(&dirs[2], rel.to_str().unwrap()) {
            failures.push("cell artifact");
            break;
        }
        cells += 1;
    }
    outcome(
        failures.is_empty() && cells == 16,
        if failures.is_empty() {
            format!("image, metadata, table identical on rerun; {cells} cell files identical under manifest reordering")
        } else {
            format!("differs: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 10

/// Features keyed by the first pixel, with hand-picked integer vectors whose
/// cosines with the target are exactly 1/5 and 4/5.
struct HandExtractor;

impl FeatureExtractor for HandExtractor {
    fn name(&self) -> &str {
        "hand"
    }

    fn extract(&self, image: &GrayImage) -> CoreResult<Vec<f64>> {
        Ok(match image.get_pixel(0, 0).0[0] {
            0 => vec![1.0, 0.0, 0.0, 0.0],
            1 => vec![1.0, 2.0, 2.0, 4.0],
            _ => vec![4.0, 3.0, 0.0, 0.0],
        })
    }
}

fn criterion_10() -> Outcome {
    let img = |v: u8| GrayImage::from_pixel(4, 4, Luma([v]));
    let report = evaluate(
        &img(0),
        &[(LoraId::from("a"), vec![img(1)]), (LoraId::from("b"), vec![img(2)])],
        &HandExtractor,
    )
    .unwrap();
    let exact = report.min_sim == 0.2 && report.avg_sim == 0.5 && report.max_sim == 0.8;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ordered = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let sims = (0..n)
            .map(|i| (LoraId(format!("l{i}")), rng.random_range(-1.0..=1.0)))
            .collect();
        let r = EvalReport::from_similarities(sims).unwrap();
        if r.min_sim <= r.avg_sim && r.avg_sim <= r.max_sim {
            ordered += 1;
        }
    }
    outcome(
        exact && ordered == 100,
        format!(
            "hand cosines report (min {}, avg {}, max {}); min <= avg <= max on {ordered}/100 random reports",
            report.min_sim, report.avg_sim, report.max_sim
        ),
    )
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("InfoNCE matches brute force", criterion_1),
        ("InfoNCE closed-form case", criterion_2),
        ("latent gradient vs finite differences", criterion_3),
        ("adapter arithmetic exactness", criterion_4),
        ("mask properties", criterion_5),
        ("concept grouping", criterion_6),
        ("ablation equivalences", criterion_7),
        ("toy guidance efficacy", criterion_8),
        ("determinism", criterion_9),
        ("evaluation arithmetic", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "acceptance {:>2} [{}] {name}: {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
