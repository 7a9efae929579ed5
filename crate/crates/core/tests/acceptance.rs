//! Acceptance run: every criterion is checked at its stated tolerance and
//! reported as one `PASS` / `FAIL` line. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavetag::analysis::{read_std_profile, read_tag_means, sort_channels, tag_means_file, STD_PROFILE_FILE};
use wavetag::blocks::{BlockKind, DEFAULT_ALPHA, RES2_DROPOUT};
use wavetag::cli::{main_with_args, DataSection};
use wavetag::data::{export_dataset, load_manifest, synth_generate, AudioFormat, Dataset, Split, SynthConfig, SAMPLE_RATE};
use wavetag::eval::{auc_tag, evaluate};
use wavetag::gradcheck::{block_suite, model_check, primitive_suite, GradCheckReport, TOL_BATCHNORM, TOL_PRIMITIVE};
use wavetag::model::{input_len_for_depth, load_checkpoint, save_checkpoint, ModelConfig, Network, DEFAULT_SCHEDULE};
use wavetag::train::{fit, nesterov_update, OptimState, PlateauConfig, PlateauSchedule, TrainConfig};
use wavetag::{Layer, Session, Shape, Tensor};

type Outcome = (bool, String);

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut reports: Vec<GradCheckReport> = primitive_suite(0, 0.0).unwrap();
    for kind in BlockKind::ALL {
        reports.extend(block_suite(kind, 0, 0.0).unwrap());
        reports.push(model_check(kind, 3, 0, 0.0).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let tolerances_ok = reports
        .iter()
        .all(|r| r.tolerance == TOL_PRIMITIVE || r.tolerance == TOL_BATCHNORM);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.label.as_str()).collect();
    let worst = reports
        .iter()
        .max_by(|a, b| (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance)))
        .unwrap();
    (
        failed.is_empty() && tolerances_ok && secs < 60.0,
        format!(
            "{} checks, worst {} at {:.2e} (tol {:.0e}), failed {:?}, {secs:.1} s",
            reports.len(),
            worst.label,
            worst.max_rel_error,
            worst.tolerance,
            failed
        ),
    )
}

fn shape_collapse() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for depth in [3, 6, 9] {
        let cfg = ModelConfig {
            depth,
            input_len: input_len_for_depth(depth),
            channel_schedule: DEFAULT_SCHEDULE[..depth].to_vec(),
            ..ModelConfig::default()
        };
        let mut net = Network::<f32>::zeroed(cfg.clone()).unwrap();
        let mut sess = Session::inference();
        let mut h = net
            .input
            .forward(&Tensor::zeros(Shape::new(1, cfg.input_len, 1)), &mut sess)
            .unwrap();
        for b in &mut net.blocks {
            h = b.forward(&h, &mut sess).unwrap();
        }
        let last3: usize = cfg.channel_schedule[depth - 3..].iter().sum();
        ok &= h.shape().time == 1 && cfg.head_input_dim() == last3;
        details.push(format!("depth {depth}: T={} head={}", h.shape().time, cfg.head_input_dim()));
    }
    ok &= ModelConfig::default().head_input_dim() == 256 + 512 + 512;
    (ok, details.join(", "))
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut compared, mut undefined, mut worst) = (0, 0, 0.0f64);
    let mut ok = true;
    for instance in 0..1000 {
        let n = rng.gen_range(1..=64);
        let levels = rng.gen_range(1..=8);
        let scores: Vec<f64> = match instance % 10 {
            0 => vec![0.5; n],
            _ => (0..n).map(|_| f64::from(rng.gen_range(0..levels)) / levels as f64).collect(),
        };
        let p = rng.gen_range(0.0..1.0);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
        match (auc_tag(&scores, &labels), both) {
            (Some(a), true) => {
                let err = (a - pairwise_auc(&scores, &labels)).abs();
                worst = worst.max(err);
                ok &= err <= 1e-12;
                compared += 1;
            }
            (None, false) => undefined += 1,
            _ => ok = false,
        }
    }
    (
        ok,
        format!("1000 instances: {compared} compared, max |diff| {worst:.1e}, {undefined} single-class"),
    )
}

fn optimizer_oracle() -> Outcome {
    let (mut w, mut v) = ([1.0f64], [0.0f64]);
    nesterov_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
    let step_ok = (w[0] - 0.81).abs() <= 1e-7;

    let mut state = OptimState::<f32>::new(0.01, 0.9, 0.0).unwrap();
    let mut sched = PlateauSchedule::new(PlateauConfig {
        patience: 1,
        ..PlateauConfig::default()
    })
    .unwrap();
    let mut trace = vec![state.lr];
    for loss in [1.0, 1.0, 1.0] {
        if sched.step(loss, &mut state) {
            trace.push(state.lr);
        }
    }
    let expect = [0.01, 0.002, 0.0004];
    let sched_ok = trace.len() == 3 && trace.iter().zip(expect).all(|(a, b)| (a - b).abs() <= 1e-15);
    (step_ok && sched_ok, format!("w={:.9}, lr trace {trace:?}", w[0]))
}

fn recipe_constants() -> Outcome {
    let m = ModelConfig::default();
    let t = TrainConfig::default();
    let checks = [
        ("alpha", DEFAULT_ALPHA == 16.0),
        ("res2 dropout", RES2_DROPOUT == 0.2),
        ("head dropout", m.dropout_head == 0.5),
        ("segment", m.input_len == 59049 && m.depth == 9),
        ("sample rate", SAMPLE_RATE == 22050),
        ("tags", DataSection::default().num_tags == 50 && m.num_tags == 50),
        ("batch", t.batch_size == 23),
        ("lr", t.lr == 0.01),
        ("momentum", t.momentum == 0.9),
        ("decay factor", t.plateau.factor == 5.0),
        ("segments per clip", 29 * SAMPLE_RATE as usize / m.input_len == 10),
    ];
    let bad: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    (bad.is_empty(), format!("{} settings, mismatched {bad:?}", checks.len()))
}

/// The full-scale pipeline accepts a tagged manifest and keeps the 50 most
/// frequent training tags; the full network builds at 59049 samples.
fn full_scale_protocol() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("song_id,audio_path,split,tags\n");
    for i in 0..240 {
        let j = i / 3;
        let tags = [format!("tag{:02}", j % 60), format!("tag{:02}", (j * 7 + 3) % 60)];
        let split = ["train", "valid", "test"][i % 3];
        text.push_str(&format!("clip{i},mp3/{i}.f32,{split},{}\n", tags.join("|")));
    }
    let path = dir.path().join("annotations.csv");
    fs::write(&path, text).unwrap();
    let (manifest, vocab) = load_manifest(&path, 50).unwrap();
    let net = Network::<f32>::build(ModelConfig::default(), 0).unwrap();
    let ok = vocab.len() == 50 && net.config.input_len == 59049 && !manifest.rows.is_empty();
    (
        ok,
        format!(
            "{} tags kept, {} songs, {} parameters (AUC values need the full dataset and are not checked)",
            vocab.len(),
            manifest.rows.len(),
            net.config.param_count()
        ),
    )
}

struct DeskRun {
    kind: BlockKind,
    seed: u64,
    train_auc: f64,
    test_auc: f64,
    epochs: usize,
    secs: f64,
    net: Network<f32>,
}

fn desk_model(kind: BlockKind, tags: &[String]) -> ModelConfig {
    let mut cfg = ModelConfig::desk(kind, 6, 16, tags.len());
    cfg.head_hidden = 64;
    cfg.dropout_head = 0.5;
    cfg.multi_level = true;
    cfg.tags = tags.to_vec();
    cfg
}

fn desk_train(data: &Dataset, kind: BlockKind, seed: u64) -> DeskRun {
    let start = Instant::now();
    let cfg = desk_model(kind, data.vocab.names());
    let len = cfg.input_len;
    let mut net = Network::<f32>::build(cfg, seed).unwrap();
    let train = data.view(Some(Split::Train), len);
    let val = data.view(Some(Split::Valid), len);
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let out = fit(&mut net, &train, &val, &tc, None).unwrap();
    let mut best = out.best;
    let train_auc = evaluate(&mut best, &train).unwrap().macro_auc;
    let test_auc = evaluate(&mut best, &data.view(Some(Split::Test), len)).unwrap().macro_auc;
    DeskRun {
        kind,
        seed,
        train_auc,
        test_auc,
        epochs: out.history.len(),
        secs: start.elapsed().as_secs_f64(),
        net: best,
    }
}

fn desk_data() -> Dataset {
    synth_generate(&SynthConfig::default()).unwrap()
}

fn desk_learning(runs: &[DeskRun]) -> Outcome {
    let se: Vec<&DeskRun> = runs.iter().filter(|r| r.kind == BlockKind::Se).collect();
    let basic: Vec<&DeskRun> = runs.iter().filter(|r| r.kind == BlockKind::Basic).collect();
    let mean = |rs: &[&DeskRun]| rs.iter().map(|r| r.test_auc).sum::<f64>() / rs.len() as f64;
    let targets = se
        .iter()
        .all(|r| r.train_auc >= 0.95 && r.test_auc >= 0.85 && r.epochs <= 50 && r.secs < 900.0);
    let (se_mean, basic_mean) = (mean(&se), mean(&basic));
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "{}#{}: train {:.4} test {:.4} ({} ep, {:.0} s)",
                r.kind, r.seed, r.train_auc, r.test_auc, r.epochs, r.secs
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    (
        targets && se.len() == 3 && basic.len() == 3 && se_mean >= basic_mean - 0.02,
        format!("mean test SE {se_mean:.4} vs Basic {basic_mean:.4}; {detail}"),
    )
}

fn read_csv_counts(path: &Path) -> BTreeMap<(String, String), u64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').skip(1).collect();
    let mut out = BTreeMap::new();
    for line in lines {
        let mut f = line.split(',');
        let row = f.next().unwrap().to_string();
        for (col, v) in header.iter().zip(f) {
            out.insert((row.clone(), col.to_string()), v.parse().unwrap());
        }
    }
    out
}

fn run_analyze(ckpt: &Path, manifest: &Path, tags: &str, out: &Path, zero: bool) -> i32 {
    let mut args = vec![
        "wavetag", "analyze", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
        "--tags", tags, "--split", "test", "--out", out.to_str().unwrap(),
    ];
    if zero {
        args.push("--zero-gates");
    }
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = main_with_args(args, &mut o, &mut e);
    if code != 0 {
        eprintln!("{}", String::from_utf8_lossy(&e));
    }
    code
}

fn excitation_pipeline(data: &Dataset, se_run: &DeskRun) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    export_dataset(data, dir.path(), AudioFormat::Wav).unwrap();
    let manifest = dir.path().join("manifest.csv");
    let ckpt = dir.path().join("se.ckpt");
    save_checkpoint(&se_run.net, &ckpt).unwrap();
    let se_blocks = se_run.net.se_block_indices().len();
    let chosen = ["sine_220", "pulse_100", "chirp_up"];

    let out = dir.path().join("analysis");
    if run_analyze(&ckpt, &manifest, &chosen.join(","), &out, false) != 0 {
        return (false, "analyze exited non-zero".into());
    }
    let mut ok = true;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for b in 0..se_blocks {
        let means = read_tag_means(out.join(tag_means_file(b)), b).unwrap();
        for v in means.rows.iter().flatten().flatten() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        let mut order = sort_channels(&means);
        order.sort_unstable();
        ok &= order == (0..means.channels()).collect::<Vec<_>>();
    }
    ok &= lo > 0.0 && hi < 1.0;
    let profile = read_std_profile(out.join(STD_PROFILE_FILE)).unwrap();
    ok &= profile.len() == se_blocks;

    // Brute-force count straight from the manifest text.
    let text = fs::read_to_string(&manifest).unwrap();
    let test_songs: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[2] == "test")
        .map(|f| f[3].split('|').collect())
        .collect();
    let counts = read_csv_counts(&out.join("cooccurrence.csv"));
    let mut cooc_ok = counts.len() == chosen.len() * chosen.len();
    for a in chosen {
        for b in chosen {
            let brute = test_songs.iter().filter(|t| t.contains(&a) && t.contains(&b)).count() as u64;
            cooc_ok &= counts.get(&(a.to_string(), b.to_string())) == Some(&brute);
        }
    }
    ok &= cooc_ok;

    let control = dir.path().join("control");
    if run_analyze(&ckpt, &manifest, &chosen.join(","), &control, true) != 0 {
        return (false, "analyze --zero-gates exited non-zero".into());
    }
    let mut control_ok = true;
    for b in 0..se_blocks {
        let means = read_tag_means(control.join(tag_means_file(b)), b).unwrap();
        control_ok &= means.rows.iter().flatten().flatten().all(|&v| v == 0.5);
    }
    let control_std = read_std_profile(control.join(STD_PROFILE_FILE)).unwrap();
    control_ok &= control_std.len() == se_blocks && control_std.iter().all(|&(_, s)| s == 0.0);
    ok &= control_ok;
    let stds: Vec<String> = profile.iter().map(|(_, s)| format!("{s:.4}")).collect();
    (
        ok,
        format!(
            "{se_blocks} SE blocks, means in [{lo:.4}, {hi:.4}], std profile [{}], co-occurrence {}, zeroed control {}",
            stds.join(", "),
            if cooc_ok { "matches" } else { "differs" },
            if control_ok { "exact 0.5 / zero std" } else { "not constant" }
        ),
    )
}

fn reproducibility(data: &Dataset, se_run: &DeskRun) -> Outcome {
    let trace = || {
        let cfg = desk_model(BlockKind::Se, data.vocab.names());
        let len = cfg.input_len;
        let mut net = Network::<f32>::build(cfg, 7).unwrap();
        let tc = TrainConfig {
            max_epochs: 3,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = fit(
            &mut net,
            &data.view(Some(Split::Train), len),
            &data.view(Some(Split::Valid), len),
            &tc,
            None,
        )
        .unwrap();
        out.history
            .iter()
            .map(|r| (r.train_loss.to_bits(), r.val_loss.to_bits()))
            .collect::<Vec<_>>()
    };
    let trace_ok = trace() == trace();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&se_run.net, &path).unwrap();
    let mut original = se_run.net.clone();
    let mut loaded = load_checkpoint(&path).unwrap();
    let view = data.view(Some(Split::Test), original.config.input_len);
    let idx: Vec<usize> = (0..view.len()).collect();
    let (x, _) = view.batch(&idx).unwrap();
    let a = original.predict(&x).unwrap();
    let b = loaded.predict(&x).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let ckpt_ok = bits(&a) == bits(&b);
    (
        trace_ok && ckpt_ok,
        format!(
            "3-epoch loss trace {}, {} test predictions after reload {}",
            if trace_ok { "bit-identical" } else { "differs" },
            a.data().len(),
            if ckpt_ok { "bit-identical" } else { "differ" }
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, outcome: Outcome| {
        println!("{} {name}: {}", if outcome.0 { "PASS" } else { "FAIL" }, outcome.1);
        results.push((name, outcome));
    };
    report("gradient_suite", guarded(gradient_suite));
    report("shape_collapse", guarded(shape_collapse));
    report("auc_oracle", guarded(auc_oracle));
    report("optimizer_oracle", guarded(optimizer_oracle));
    report("recipe_constants", guarded(recipe_constants));
    report("full_scale_protocol", guarded(full_scale_protocol));

    let data = desk_data();
    let runs: Vec<DeskRun> = [BlockKind::Se, BlockKind::Basic]
        .into_iter()
        .flat_map(|k| (0..3).map(move |s| (k, s)))
        .map(|(k, s)| desk_train(&data, k, s))
        .collect();
    report("desk_learning", guarded(|| desk_learning(&runs)));
    let se0 = runs.iter().find(|r| r.kind == BlockKind::Se && r.seed == 0).unwrap();
    report("excitation_pipeline", guarded(|| excitation_pipeline(&data, se0)));
    report("reproducibility", guarded(|| reproducibility(&data, se0)));

    let failed = results.iter().filter(|(_, o)| !o.0).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
