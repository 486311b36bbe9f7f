//! Multi-seed study behind criteria 8 to 10, driven by the shipped configs.
//!
//! Per seed: train the source model, decode the target test set with it
//! directly, then train baseline, vanilla, frozen taps at K=6 and K=2, and the
//! K=6 tap with embedding SpecAug. Set `TAPASR_TREND_DIR` to keep the runs (and
//! reuse finished ones) instead of a throwaway directory.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use tapasr::experiments::train::final_checkpoint_path;
use tapasr::experiments::{run_evaluate, run_train, ExperimentConfig};
use tapasr::frontend::SpecAugPolicy;

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Embedding SpecAug widths for the 64-wide desk embeddings.
pub const EMBED_SPECAUG: (usize, usize) = (3, 1);

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub source_cer: f64,
    pub direct_cer: f64,
    pub baseline: f64,
    pub vanilla: f64,
    pub tap6: f64,
    pub tap2: f64,
    pub tap6_aug: f64,
}

pub struct Study {
    pub runs: Vec<SeedRun>,
    pub minutes: f64,
}

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn train_and_test(mut cfg: ExperimentConfig, dir: PathBuf, seed: u64) -> f64 {
    cfg.optimizer.seed = seed;
    cfg.optimizer.checkpoint_every = 0;
    cfg.output_dir = dir;
    if !final_checkpoint_path(&cfg.output_dir).exists() {
        run_train(&cfg, false).unwrap_or_else(|e| panic!("{}: {e}", cfg.output_dir.display()));
    }
    test_cer(&cfg, &final_checkpoint_path(&cfg.output_dir))
}

fn test_cer(cfg: &ExperimentConfig, ckpt: &Path) -> f64 {
    let test = cfg.data.test.as_ref().expect("config has a test split").load().unwrap();
    run_evaluate(ckpt, &test, &cfg.frontend, &cfg.decode, cfg.unit, None).unwrap().wer
}

fn run_seed(root: &Path, seed: u64) -> SeedRun {
    let dir = root.join(format!("seed{seed}"));
    let source_cer = train_and_test(config("source.yaml"), dir.join("source"), seed);
    let source_ckpt = final_checkpoint_path(&dir.join("source"));
    let with_source = |name: &str| {
        let mut c = config(name);
        c.source_checkpoint = Some(source_ckpt.clone());
        c
    };
    let direct_cer = test_cer(&with_source("direct.yaml"), &source_ckpt);
    let baseline = train_and_test(config("baseline.yaml"), dir.join("baseline"), seed);
    let vanilla = train_and_test(with_source("vanilla.yaml"), dir.join("vanilla"), seed);
    let tap = |k: usize, aug: bool, name: &str| {
        let mut c = with_source("tap.yaml");
        let t = c.transfer.as_mut().expect("tap config has a transfer section");
        t.tap_layer_k = k;
        t.freeze_prefix = true;
        t.embed_specaug = aug.then(|| SpecAugPolicy::new(EMBED_SPECAUG.0, EMBED_SPECAUG.1));
        train_and_test(c, dir.join(name), seed)
    };
    let run = SeedRun {
        source_cer,
        direct_cer,
        baseline,
        vanilla,
        tap6: tap(6, false, "tap6"),
        tap2: tap(2, false, "tap2"),
        tap6_aug: tap(6, true, &format!("tap6_aug{}x{}", EMBED_SPECAUG.0, EMBED_SPECAUG.1)),
    };
    println!("trend seed {seed}: {run:?}");
    run
}

pub fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let start = Instant::now();
        let keep = std::env::var_os("TAPASR_TREND_DIR").map(PathBuf::from);
        let scratch = tempfile::tempdir().unwrap();
        let root = keep.unwrap_or_else(|| scratch.path().to_path_buf());
        let runs = SEEDS.iter().map(|&s| run_seed(&root, s)).collect();
        Study {
            runs,
            minutes: start.elapsed().as_secs_f64() / 60.0,
        }
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn col(s: &Study, n: usize, f: impl Fn(&SeedRun) -> f64) -> Vec<f64> {
    s.runs.iter().take(n).map(f).collect()
}

/// Criterion 8: median target CER of the unadapted source model is at least
/// 1.5 times its median source-matched CER (first three seeds).
pub fn domain_gap(s: &Study) -> (bool, String) {
    let src = median(col(s, 3, |r| r.source_cer));
    let tgt = median(col(s, 3, |r| r.direct_cer));
    let pass = tgt > 0.0 && tgt >= 1.5 * src;
    (pass, format!("median source-test CER {src:.2}%, target-test CER {tgt:.2}% over 3 seeds"))
}

/// Criterion 9: tap6 < vanilla < baseline and tap6 <= tap2 in at least 4 of 5
/// seeds and on the medians, with >= 15% median relative reduction vs baseline,
/// all within two hours.
pub fn ordering(s: &Study) -> (bool, String) {
    let n = s.runs.len();
    let holds = |r: &SeedRun| r.tap6 < r.vanilla && r.vanilla < r.baseline && r.tap6 <= r.tap2;
    let seeds_ok = s.runs.iter().filter(|r| holds(r)).count();
    let m = |f: fn(&SeedRun) -> f64| median(col(s, n, f));
    let (b, v, t6, t2) = (m(|r| r.baseline), m(|r| r.vanilla), m(|r| r.tap6), m(|r| r.tap2));
    let rel = 100.0 * (b - t6) / b;
    let medians_ok = t6 < v && v < b && t6 <= t2;
    let pass = seeds_ok >= 4 && medians_ok && rel >= 15.0 && s.minutes < 120.0;
    (
        pass,
        format!(
            "median CER baseline {b:.2}, vanilla {v:.2}, tap K6 {t6:.2}, tap K2 {t2:.2}; ordering holds in {seeds_ok}/{n} seeds; K6 relative reduction {rel:.1}%; {:.0} min",
            s.minutes
        ),
    )
}

/// Criterion 10: embedding SpecAug on the frozen K=6 tap costs at most 2%
/// relative on the median and helps in at least 3 of 5 seeds.
pub fn embedding_specaug(s: &Study) -> (bool, String) {
    let n = s.runs.len();
    let plain = median(col(s, n, |r| r.tap6));
    let aug = median(col(s, n, |r| r.tap6_aug));
    let better = s.runs.iter().filter(|r| r.tap6_aug < r.tap6).count();
    let pass = aug <= 1.02 * plain && better >= 3;
    (
        pass,
        format!(
            "median CER K6 {plain:.2}, K6 + embedding SpecAug {}x{} {aug:.2}; improves in {better}/{n} seeds",
            EMBED_SPECAUG.0, EMBED_SPECAUG.1
        ),
    )
}
