//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 4 to 7 train desk-scale models from `configs/desk.toml`; the
//! whole run takes a few minutes on one core with the test profile.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use parahtr::collapse::CollapseMode;
use parahtr::config::{DecoderKind, ExperimentConfig};
use parahtr::ctc::{ctc_brute_force, ctc_loss, LabelSeq, LogitSeq};
use parahtr::data::{generate_corpus, save_dataset, Alphabet, GenSpec, ParagraphSample, SegmentConfig, Span};
use parahtr::eval::{attention_mass_in_box, evaluate, transcribe, EvalReport, Pipeline};
use parahtr::model::Model;
use parahtr::optim::{
    layer_suite, model_suite, run_curriculum, tiny_config, CurriculumPhase, CurriculumRun, GradcheckConfig,
    LogWriter, PhaseData, Progress,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn desk_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    ExperimentConfig::load(&path).expect("desk config loads")
}

fn paragraph_spec(seed: u64) -> GenSpec {
    GenSpec { lines: Span::fixed(3), chars_per_line: Span::new(4, 8), scale: 2, jitter: Span::new(0, 1), seed, ..GenSpec::default() }
}

/// A trained paragraph model plus the standard-collapse line model that
/// the first phase produced.
struct Trained {
    model: Model,
    line_model: Model,
    seconds: f64,
}

fn train(cfg: &ExperimentConfig, train: &[ParagraphSample], validation: &[ParagraphSample], dir: &Path) -> Trained {
    let alphabet = cfg.alphabet().unwrap();
    let data: Vec<PhaseData> = cfg
        .phases
        .iter()
        .map(|p| {
            PhaseData::for_phase(
                p,
                train,
                validation,
                &alphabet,
                cfg.line_join,
                cfg.data.crop_margin,
                cfg.data.validation_slice,
                Path::new("generated"),
            )
            .unwrap()
        })
        .collect();
    let mut model = Model::new(cfg).unwrap();
    let run = CurriculumRun {
        phases: &cfg.phases,
        data: &data,
        optimizer: &cfg.optimizer,
        seed: cfg.seed,
        start: Progress::default(),
        paragraph_steps: cfg.attention.steps,
        checkpoint_dir: Some(dir),
    };
    let log_path = dir.join("train.log");
    fs::create_dir_all(dir).unwrap();
    let mut log = LogWriter::new(fs::File::create(&log_path).unwrap(), true).unwrap();
    let started = Instant::now();
    run_curriculum(&mut model, &run, &mut log).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let first = format!("phase1-{}.ckpt", cfg.phases[0].name);
    let (line_model, _) = Model::load(&dir.join(first)).unwrap();
    Trained { model, line_model, seconds }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let cfg = GradcheckConfig::default();
    let mut worst = (0.0f64, String::new());
    let mut layers = Vec::new();
    for (name, report) in layer_suite(&cfg).unwrap().into_iter().chain(model_suite(&cfg).unwrap()) {
        layers.push(name.clone());
        if report.max_error() > worst.0 {
            worst = (report.max_error(), name);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && secs < 120.0,
        format!("{} checks, max rel. error {:.2e} ({}), {secs:.1}s", layers.len(), worst.0, worst.1),
    )
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    while checked < 200 {
        let k = rng.gen_range(1..=3);
        let frames = rng.gen_range(1..=6);
        let len = rng.gen_range(0..=frames);
        let target = LabelSeq::new((0..len).map(|_| rng.gen_range(0..k)).collect(), k).unwrap();
        if target.min_frames() > frames {
            continue;
        }
        let logits = LogitSeq::new(frames, k + 1, (0..frames * (k + 1)).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let dp = ctc_loss(&logits, &target).unwrap().0;
        let brute = ctc_brute_force(&logits, &target).unwrap();
        worst = worst.max((dp - brute).abs());
        checked += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(worst < 1e-9 && secs < 60.0, format!("{checked} instances, max |DP - brute force| {worst:.2e}, {secs:.2}s"))
}

fn criterion_3(trained: &[&Model], samples: &[ParagraphSample]) -> Outcome {
    let mut worst = 0.0f64;
    let mut passes = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let mut model = Model::new(&tiny_config(seed)).unwrap();
        let steps = rng.gen_range(1..=4);
        model.set_collapse(CollapseMode::Attention, steps);
        let (h, w) = (rng.gen_range(4..=24), rng.gen_range(4..=32));
        let image = parahtr::layers::ImagePlane::gray(h, w, (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, cache) = model.forward(&image).unwrap();
        worst = worst.max(cache.attention().unwrap().max_column_error());
        passes += 1;
    }
    for model in trained {
        for s in samples {
            let (_, map) = transcribe(model, &s.image).unwrap();
            worst = worst.max(map.unwrap().max_column_error());
            passes += 1;
        }
    }
    outcome(worst < 1e-6, format!("{passes} forward passes, max |column sum - 1| {worst:.2e}"))
}

fn criterion_4(trained: &Trained, train: &[ParagraphSample], held: &[ParagraphSample], join: parahtr::data::LineJoin) -> (Outcome, EvalReport) {
    let train_report = evaluate(&trained.model, train, Pipeline::Model, join);
    let held_report = evaluate(&trained.model, held, Pipeline::Model, join);
    let pass = train_report.cer() < 5.0 && held_report.cer() < 15.0 && trained.seconds < 7200.0;
    let detail = format!(
        "train CER {:.2}% (n={}), held-out CER {:.2}% (n={}), training {:.0}s",
        train_report.cer(),
        train_report.rows.len(),
        held_report.cer(),
        held_report.rows.len(),
        trained.seconds
    );
    (outcome(pass, detail), held_report)
}

fn criterion_5(model: &Model, held: &[ParagraphSample], report: &EvalReport) -> Outcome {
    let cell = model.downsampling();
    let (mut correct, mut ordered, mut concentrated, mut both) = (0, 0, 0, 0);
    let mut min_mass = f64::INFINITY;
    for (s, row) in held.iter().zip(&report.rows) {
        if row.char_edits != 0 {
            continue;
        }
        correct += 1;
        let map = transcribe(model, &s.image).unwrap().1.unwrap();
        let boxes = s.boxes().unwrap();
        let n = s.lines.len();
        let increasing = (1..n).all(|t| map.row_centroid(t) > map.row_centroid(t - 1));
        let masses: Vec<f64> = (0..n).map(|t| attention_mass_in_box(&map, t, &boxes[t], cell)).collect();
        let inside = masses.iter().all(|&m| m >= 0.6);
        min_mass = masses.iter().copied().fold(min_mass, f64::min);
        ordered += increasing as usize;
        concentrated += inside as usize;
        both += (increasing && inside) as usize;
    }
    let share = if correct == 0 { 0.0 } else { both as f64 / correct as f64 };
    outcome(
        correct > 0 && share >= 0.9,
        format!(
            "{correct} correct held-out paragraphs: centroid increasing {ordered}, every step >= 60% in box {concentrated}, both {both} ({:.0}%), min step mass {:.2}",
            100.0 * share,
            min_mass
        ),
    )
}

fn touching(sample: &ParagraphSample) -> bool {
    let boxes = sample.boxes().unwrap();
    boxes.windows(2).any(|w| w[1].top <= w[0].bottom + 1)
}

/// 30% of the samples are drawn with one forced touching gap.
fn touching_corpus(count: usize, seed: u64) -> Vec<ParagraphSample> {
    let touching_count = count * 3 / 10;
    let mut samples = generate_corpus(&GenSpec { touch_prob: 1.0, ..paragraph_spec(seed) }, touching_count).unwrap();
    samples.extend(generate_corpus(&paragraph_spec(seed + 50_000), count - touching_count).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    samples.shuffle(&mut rng);
    samples
}

fn criterion_6(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let train_set = touching_corpus(100, 6_000);
    let held = touching_corpus(50, 7_000);
    let touching_share = held.iter().filter(|s| touching(s)).count() as f64 / held.len() as f64;
    let trained = train(cfg, &train_set, &held, dir);
    let join = cfg.line_join;
    let attention = evaluate(&trained.model, &held, Pipeline::Model, join);
    let seg = SegmentConfig::scaled(cfg.data.scale);
    let baseline = evaluate(&trained.line_model, &held, Pipeline::Projection(seg), join);
    outcome(
        attention.cer() < baseline.cer() && attention.skipped == 0,
        format!(
            "held-out n={} with {:.0}% touching: attention CER {:.2}% vs projection baseline CER {:.2}%",
            held.len(),
            100.0 * touching_share,
            attention.cer(),
            baseline.cer()
        ),
    )
}

/// Both decoders train on the same single-line corpus with the same optimizer
/// and epoch budget, long enough for both to converge. The lines are set
/// tight and noisy (no character gap, more jitter and noise) so that reading
/// them takes context beyond clean, separated glyphs.
fn criterion_7(cfg: &ExperimentConfig, dir: &Path, paragraph_cer: f64) -> Outcome {
    let spec = GenSpec {
        lines: Span::fixed(1),
        char_gap: 0,
        jitter: Span::new(0, 2),
        noise: 0.1,
        ..paragraph_spec(8_000)
    };
    let train_set = generate_corpus(&spec, 300).unwrap();
    let held = generate_corpus(&GenSpec { seed: 9_000, ..spec }, 200).unwrap();
    let lines_only = |kind: DecoderKind| {
        let mut c = cfg.clone();
        c.decoder.kind = kind;
        c.encoder.final_dim = None;
        c.phases = vec![CurriculumPhase { name: "lines".into(), epochs: 100, ..cfg.phases[0].clone() }];
        c
    };
    let blstm = train(&lines_only(DecoderKind::Blstm), &train_set, &held, &dir.join("blstm"));
    let softmax = train(&lines_only(DecoderKind::Softmax), &train_set, &held, &dir.join("softmax"));
    let join = cfg.line_join;
    let b = evaluate(&blstm.model, &held, Pipeline::Model, join).cer();
    let s = evaluate(&softmax.model, &held, Pipeline::Model, join).cer();
    let multi_line = evaluate(&blstm.model, &generate_corpus(&paragraph_spec(9_500), 20).unwrap(), Pipeline::Model, join).cer();
    outcome(
        b <= s,
        format!(
            "single lines (n={}): standard+BLSTM CER {b:.2}% vs standard+softmax CER {s:.2}%; on 3-line paragraphs the standard+BLSTM line model gets CER {multi_line:.2}% vs attention {paragraph_cer:.2}% (criterion 4)",
            held.len()
        ),
    )
}

fn criterion_8(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let data = dir.join("data");
    let samples = generate_corpus(&paragraph_spec(11_000), 12).unwrap();
    let manifest = save_dataset(&data, &samples).unwrap();
    let mut short = cfg.clone();
    for p in &mut short.phases {
        p.epochs = 1;
    }
    let config_path = dir.join("three-epochs.toml");
    fs::write(&config_path, short.to_toml()).unwrap();
    let run = |out: &PathBuf| {
        let status = Command::new(env!("CARGO_BIN_EXE_parahtr"))
            .args(["train", "--config"])
            .arg(&config_path)
            .arg("--train")
            .arg(&manifest)
            .arg("--validation")
            .arg(&manifest)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    };
    let (a, b) = (dir.join("run-a"), dir.join("run-b"));
    run(&a);
    run(&b);
    let masked = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("train.log"))
            .unwrap()
            .lines()
            .map(|l| if l.starts_with('#') { l.to_string() } else { l.rsplit_once('\t').unwrap().0.to_string() })
            .collect()
    };
    let (log_a, log_b) = (masked(&a), masked(&b));
    let epochs = log_a.iter().filter(|l| !l.starts_with('#') && !l.starts_with("epoch")).count();
    let mut checkpoints = 0;
    let mut identical = log_a == log_b;
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if Path::new(&name).extension().is_some_and(|e| e == "ckpt") {
            checkpoints += 1;
            identical &= fs::read(a.join(&name)).unwrap() == fs::read(b.join(&name)).unwrap();
        }
    }
    outcome(
        identical && epochs == 3 && checkpoints == 4,
        format!("{epochs} epochs, logs (seconds column masked) and {checkpoints} checkpoints byte-identical: {identical}"),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture` or a filter;
    // a filter that does not match "acceptance" skips the run.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|f| !"acceptance".contains(f.as_str())) || std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let cfg = desk_config();
    let alphabet = Alphabet::new(&cfg.alphabet).unwrap();
    assert_eq!(alphabet.len(), 11);

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "gradcheck suite", criterion_1());
    report(2, "CTC oracle equivalence", criterion_2());

    let train_set = generate_corpus(&paragraph_spec(1_000), 100).unwrap();
    let held = generate_corpus(&paragraph_spec(900_000), 20).unwrap();
    let overfit = train(&cfg, &train_set, &held, &work.path().join("overfit"));
    let (c4, held_report) = criterion_4(&overfit, &train_set, &held, cfg.line_join);
    let paragraph_cer = held_report.cer();

    report(3, "attention normalization", criterion_3(&[&overfit.model], &held));
    report(4, "synthetic overfit", c4);
    report(5, "implicit line ordering", criterion_5(&overfit.model, &held, &held_report));
    report(6, "attention beats projection segmentation", criterion_6(&cfg, &work.path().join("touching")));
    report(7, "decoder ablation direction", criterion_7(&cfg, &work.path().join("ablation"), paragraph_cer));
    report(8, "determinism", criterion_8(&cfg, &work.path().join("determinism")));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
