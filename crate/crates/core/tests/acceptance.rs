//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Criteria 8 to 10 share one multi-seed study (source models plus every
//! target-domain variant) that takes about 100 minutes on one core; it is
//! computed once per process.

mod common;
mod trend;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tapasr::autograd::Tape;
use tapasr::data::{synth_generate, DomainSpec, Tokenizer};
use tapasr::experiments::ablate::{parse_results_csv, relative_improvement, report};
use tapasr::experiments::config::OptimizerConfig;
use tapasr::experiments::optim::Adam;
use tapasr::experiments::train::{fit, prepare, TrainOptions};
use tapasr::experiments::{decode_examples, score_decoded};
use tapasr::frontend::{apply_specaug, FrontendConfig, SpecAugPolicy};
use tapasr::nnet::checkpoint::{Checkpoint, ModelSpec};
use tapasr::nnet::{joint_objective, AsrModel, ConformerConfig, ConformerModel, ForwardCtx};
use tapasr::objective::{ctc_loss, BeamOptions};
use tapasr::scoring::{edit_distance, score_corpus, ScoredPair, Unit};
use tapasr::tensor::Mat;
use tapasr::transfer::{compose, tap_prefix, TransferConfig, EXTRACTOR_PREFIX};

pub fn verdict(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

// ---- 1: CTC oracle ----

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if k != 0 && prev != Some(k) {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[test]
fn criterion_01_ctc_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut cases) = (0.0f64, 0usize);
    for labels in 1..=3usize {
        for frames in 1..=5usize {
            for _ in 0..4 {
                let lp = common::random_log_probs(&mut rng, frames, labels + 1);
                // every path, bucketed by its collapse
                let mut mass = std::collections::HashMap::<Vec<usize>, f64>::new();
                let cols = labels + 1;
                for code in 0..cols.pow(frames as u32) {
                    let mut c = code;
                    let path: Vec<usize> = (0..frames)
                        .map(|_| {
                            let k = c % cols;
                            c /= cols;
                            k
                        })
                        .collect();
                    let p: f64 = path.iter().enumerate().map(|(t, &k)| lp.get(t, k)).sum::<f64>().exp();
                    *mass.entry(collapse(&path)).or_default() += p;
                }
                let mut targets = vec![vec![]];
                for len in 1..=3 {
                    for code in 0..labels.pow(len) {
                        let mut c = code;
                        targets.push((0..len).map(|_| { let k = c % labels + 1; c /= labels; k }).collect());
                    }
                }
                for y in targets {
                    let want = mass.get(&y).copied().unwrap_or(0.0);
                    let got = ctc_loss(&lp, &y).unwrap();
                    let p = if got.reachable { (-got.value).exp() } else { 0.0 };
                    worst = worst.max((p - want).abs());
                    cases += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && secs < 10.0;
    verdict(1, pass, &format!("{cases} instances, max |p - p_enum| = {worst:.2e}, {secs:.2}s"));
    assert!(pass);
}

// ---- 2: gradient check ----

const STEP: f64 = 1e-5;

fn loss_at<M: AsrModel<f64>>(m: &M, x: &Mat<f64>, y: &[usize]) -> f64 {
    let mut tape = Tape::new(m.params(), false);
    let mut ctx = ForwardCtx::train(7, 0.1);
    let t = joint_objective(m, &mut tape, x, y, 0.3, &mut ctx).unwrap();
    tape.scalar(t.loss)
}

fn group_errors<M: AsrModel<f64>>(m: &mut M, x: &Mat<f64>, y: &[usize]) -> Vec<(String, f64)> {
    let grads = {
        let mut tape = Tape::new(m.params(), true);
        let mut ctx = ForwardCtx::train(7, 0.1);
        let t = joint_objective(&*m, &mut tape, x, y, 0.3, &mut ctx).unwrap();
        tape.backward(t.loss).unwrap()
    };
    let ids: Vec<_> = m.params().ids().collect();
    ids.into_iter()
        .map(|id| {
            let n = m.params().value(id).len();
            let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
            for j in 0..n {
                let orig = m.params().value(id).data()[j];
                m.params_mut().value_mut(id).data_mut()[j] = orig + STEP;
                let up = loss_at(&*m, x, y);
                m.params_mut().value_mut(id).data_mut()[j] = orig - STEP;
                let down = loss_at(&*m, x, y);
                m.params_mut().value_mut(id).data_mut()[j] = orig;
                let num = (up - down) / (2.0 * STEP);
                let ana = grads.get(id).map_or(0.0, |g| g.data()[j]);
                d2 += (num - ana) * (num - ana);
                a2 += ana * ana;
                n2 += num * num;
            }
            let scale = f64::max(a2.sqrt(), n2.sqrt()).max(1e-6);
            (m.params().name(id).to_string(), d2.sqrt() / scale)
        })
        .collect()
}

#[test]
fn criterion_02_gradient_check() {
    let start = Instant::now();
    let mut plain = ConformerModel::<f64>::new(common::tiny_config(), 3).unwrap();
    let mut errs = group_errors(&mut plain, &common::tiny_input(), &[4]);
    let mut tapped = common::tiny_transfer(false);
    errs.extend(group_errors(&mut tapped, &common::tiny_input(), &[4]));
    let (name, worst) = errs.iter().cloned().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let crosses = errs.iter().any(|(n, _)| n.starts_with(EXTRACTOR_PREFIX)) && errs.iter().any(|(n, _)| n.starts_with("bridge."));
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && crosses && secs < 120.0;
    verdict(2, pass, &format!("{} groups, worst {worst:.2e} at {name}, {secs:.1}s", errs.len()));
    assert!(pass);
}

// ---- 3: freeze contract ----

fn desk_source(vocab: usize, seed: u64) -> Checkpoint<f32> {
    let m = ConformerModel::<f32>::new(ConformerConfig { vocab_size: vocab, ..ConformerConfig::default() }, seed).unwrap();
    Checkpoint {
        model: ModelSpec::Conformer { config: m.config.clone() },
        tokenizer: Tokenizer::build(&[String::new()]),
        step: 0,
        params: m.params,
        optimizer: None,
    }
}

fn small_target(freeze: bool, k: usize, vocab: usize) -> TransferConfig {
    TransferConfig {
        tap_layer_k: k,
        freeze_prefix: freeze,
        embed_specaug: Some(SpecAugPolicy::new(8, 2)),
        target_config: ConformerConfig {
            input_dim: 64,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            vocab_size: vocab,
            ..ConformerConfig::default()
        },
        project_if_mismatch: false,
    }
}

#[test]
fn criterion_03_freeze_contract() {
    let start = Instant::now();
    let utts = synth_generate(&DomainSpec::target(), 16, 3).unwrap();
    let tok = Tokenizer::build(&utts.iter().map(|u| u.transcript.as_str()).collect::<Vec<_>>());
    let ex = prepare(&utts, &FrontendConfig::default(), &tok).unwrap();
    let src = desk_source(30, 1);
    let opts = TrainOptions {
        optimizer: OptimizerConfig { batch_size: 2, warmup_steps: 20, ..OptimizerConfig::default() },
        input_specaug: Some(SpecAugPolicy::new(10, 5)),
    };

    let mut frozen = compose(&tap_prefix(&src, 2).unwrap(), &small_target(true, 2, tok.vocab_size()), 1).unwrap();
    let before = frozen.extractor_checksum();
    // gradients reaching frozen parameters on one utterance
    let mut tape = Tape::new(&frozen.params, true);
    let mut ctx = ForwardCtx::train(3, 0.1);
    let t = joint_objective(&frozen, &mut tape, &ex[0].feats, &ex[0].tokens, 0.3, &mut ctx).unwrap();
    let g = tape.backward(t.loss).unwrap();
    let frozen_grad = g.frozen_sq_norm(&frozen.params);
    let reached = g.iter().filter(|(id, _)| frozen.params.name(*id).starts_with(EXTRACTOR_PREFIX)).count();
    let mut adam = Adam::new(&frozen.params);
    let mut unchanged = true;
    fit(&mut frozen, &mut adam, &ex, &opts, 0, 100, |_, m, _| {
        unchanged &= m.params().checksum_prefix(EXTRACTOR_PREFIX) == before;
        Ok(())
    })
    .unwrap();

    let mut open = compose(&tap_prefix(&src, 2).unwrap(), &small_target(false, 2, tok.vocab_size()), 1).unwrap();
    let mut adam = Adam::new(&open.params);
    fit(&mut open, &mut adam, &ex, &opts, 0, 1, |_, _, _| Ok(())).unwrap();
    let moved = open.extractor_checksum() != before;

    let secs = start.elapsed().as_secs_f64();
    let pass = unchanged && frozen_grad == 0.0 && reached == 0 && moved && secs < 60.0;
    verdict(
        3,
        pass,
        &format!("frozen checksum stable over 100 steps: {unchanged}, frozen grad norm^2 {frozen_grad}, unfrozen moved at step 1: {moved}, {secs:.1}s"),
    );
    assert!(pass);
}

// ---- 4: tap fidelity ----

#[test]
fn criterion_04_tap_fidelity() {
    let start = Instant::now();
    let src = desk_source(30, 2);
    let model = ConformerModel::from_checkpoint(&src).unwrap();
    let utts = synth_generate(&DomainSpec::source(), 3, 4).unwrap();
    let tok = Tokenizer::build(&utts.iter().map(|u| u.transcript.as_str()).collect::<Vec<_>>());
    let ex = prepare(&utts, &FrontendConfig::default(), &tok).unwrap();
    let mut exact = 0;
    let depth = model.config.num_encoder_layers;
    for e in &ex {
        let layers = model.encoder_forward(&e.feats, false, 0).unwrap();
        for k in 1..=depth {
            let tapped = tap_prefix(&src, k).unwrap().forward(&e.feats).unwrap();
            let same = tapped.shape() == layers.layer(k).unwrap().shape()
                && tapped.data().iter().zip(layers.layer(k).unwrap().data()).all(|(a, b)| a.to_bits() == b.to_bits());
            exact += usize::from(same);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = exact == depth * ex.len() && secs < 30.0;
    verdict(4, pass, &format!("{exact}/{} (utterance, K) pairs bit-identical, {secs:.1}s", depth * ex.len()));
    assert!(pass);
}

// ---- 5: SpecAug exactness ----

/// Independent replay of the documented draw order.
fn replay_masked(frames: usize, dims: usize, p: &SpecAugPolicy, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; frames * dims];
    for _ in 0..p.num_freq_masks {
        let w = rng.random_range(0..=p.freq_mask_width.min(dims));
        let s = rng.random_range(0..=dims - w);
        for c in s..s + w {
            (0..frames).for_each(|t| masked[t * dims + c] = true);
        }
    }
    for _ in 0..p.num_time_masks {
        let w = rng.random_range(0..=p.time_mask_width.min(frames));
        let s = rng.random_range(0..=frames - w);
        for t in s..s + w {
            (0..dims).for_each(|c| masked[t * dims + c] = true);
        }
    }
    masked
}

#[test]
fn criterion_05_specaug_exactness() {
    let start = Instant::now();
    let mut ok = true;
    let mut checked = 0;
    for (f, t) in [(20, 10), (20, 20), (27, 40), (0, 0)] {
        for seed in 0..50u64 {
            let frames = 30 + (seed as usize * 7) % 90;
            let x = Mat::from_fn(frames, 80, |r, c| ((r * 80 + c) as f32 * 0.01).sin() + 2.0);
            let p = SpecAugPolicy { mask_value: -1.5, ..SpecAugPolicy::new(f, t) };
            let y = apply_specaug(&x, &p, seed);
            let masked = replay_masked(frames, 80, &p, seed);
            for (i, m) in masked.iter().enumerate() {
                ok &= if *m { y.data()[i] == -1.5 } else { y.data()[i].to_bits() == x.data()[i].to_bits() };
            }
            ok &= y == apply_specaug(&x, &p, seed);
            if (f, t) == (0, 0) {
                ok &= y == x;
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = ok && secs < 10.0;
    verdict(5, pass, &format!("{checked} seeded applications replayed, widths (20,10) (20,20) (27,40) (0,0), {secs:.2}s"));
    assert!(pass);
}

// ---- 6: scoring oracle ----

fn recursive(a: &[u8], b: &[u8], memo: &mut [[Option<usize>; 7]; 7]) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    if let Some(d) = memo[a.len()][b.len()] {
        return d;
    }
    let d = (recursive(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]))
        .min(recursive(&a[1..], b, memo) + 1)
        .min(recursive(a, &b[1..], memo) + 1);
    memo[a.len()][b.len()] = Some(d);
    d
}

#[test]
fn criterion_06_scoring_oracle() {
    let start = Instant::now();
    let mut all: Vec<Vec<u8>> = vec![vec![]];
    let mut from = 0;
    for _ in 0..6 {
        let to = all.len();
        for i in from..to {
            for c in 0..4 {
                let mut s = all[i].clone();
                s.push(c);
                all.push(s);
            }
        }
        from = to;
    }
    // one reference per relabelling class; every hypothesis
    let canonical = |s: &[u8]| {
        let mut next = 0;
        s.iter().all(|&c| {
            let ok = c <= next;
            if c == next {
                next += 1;
            }
            ok
        })
    };
    let (mut agree, mut total) = (0usize, 0usize);
    for r in all.iter().filter(|s| canonical(s)) {
        for h in &all {
            agree += usize::from(edit_distance(r, h).total() == recursive(r, h, &mut [[None; 7]; 7]));
            total += 1;
        }
    }
    let pooled = score_corpus(
        [
            ScoredPair { utt_id: "u1", reference: "a b", hypothesis: "a c" },
            ScoredPair { utt_id: "u2", reference: "a b c d e f", hypothesis: "a b c d e f" },
        ],
        Unit::Word,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = agree == total && pooled.wer == 12.5 && secs < 30.0;
    verdict(6, pass, &format!("{agree}/{total} pairs agree, pooled rate {}%, {secs:.1}s", pooled.wer));
    assert!(pass);
}

// ---- 7: overfit smoke test ----

#[test]
fn criterion_07_overfit_smoke() {
    let start = Instant::now();
    let utts = synth_generate(&DomainSpec::source(), 4, 7).unwrap();
    let tok = Tokenizer::build(&utts.iter().map(|u| u.transcript.as_str()).collect::<Vec<_>>());
    let frontend = FrontendConfig::default();
    let ex = prepare(&utts, &frontend, &tok).unwrap();
    let cfg = ConformerConfig { vocab_size: tok.vocab_size(), ..ConformerConfig::default() };
    let mut model = ConformerModel::<f32>::new(cfg, 1).unwrap();
    let opts = TrainOptions {
        optimizer: OptimizerConfig { batch_size: 4, warmup_steps: 100, total_steps: 300, ..OptimizerConfig::default() },
        input_specaug: None,
    };
    let mut adam = Adam::new(&model.params);
    fit(&mut model, &mut adam, &ex, &opts, 0, 300, |_, _, _| Ok(())).unwrap();
    let loss = ex
        .iter()
        .map(|e| {
            let mut tape = Tape::new(&model.params, false);
            let t = joint_objective(&model, &mut tape, &e.feats, &e.tokens, 0.3, &mut ForwardCtx::eval()).unwrap();
            tape.scalar(t.loss) as f64
        })
        .sum::<f64>()
        / ex.len() as f64;
    let cer = |beam| score_decoded(&decode_examples(&model, &tok, &ex, &BeamOptions::new(beam, 0.3)).unwrap(), Unit::Char).unwrap().wer;
    let (cer1, cer4) = (cer(1), cer(4));
    let secs = start.elapsed().as_secs_f64();
    let pass = loss < 0.1 && cer1 == 0.0 && cer4 == 0.0 && secs < 300.0;
    verdict(7, pass, &format!("joint loss {loss:.4} after 300 steps, CER beam 1 {cer1}%, beam 4 {cer4}%, {secs:.1}s"));
    assert!(pass);
}

// ---- 8 to 10: trends ----

#[test]
fn criterion_08_domain_gap() {
    let s = trend::study();
    let (pass, detail) = trend::domain_gap(s);
    verdict(8, pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_09_transfer_ordering() {
    let s = trend::study();
    let (pass, detail) = trend::ordering(s);
    verdict(9, pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_10_embedding_specaug() {
    let s = trend::study();
    let (pass, detail) = trend::embedding_specaug(s);
    verdict(10, pass, &detail);
    assert!(pass, "{detail}");
}

// ---- 11: report arithmetic ----

#[test]
fn criterion_11_report_arithmetic() {
    let start = Instant::now();
    let fixture = "mode,K,freeze,specaug_F,specaug_T,dev_wer,test_wer,rel_improvement\n\
                   baseline,,,,,,11.9,\n\
                   tap,6,true,,,,5.5,\n";
    let rows = parse_results_csv(fixture, std::path::Path::new("fixture.csv")).unwrap();
    let (md, csv) = report(&rows).unwrap();
    let direct = relative_improvement(11.9, 5.5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = format!("{direct:.1}") == "53.8" && md.contains("+53.8") && csv.lines().nth(2).is_some_and(|l| l.ends_with(",53.78")) && secs < 1.0;
    verdict(11, pass, &format!("11.9 -> 5.5 gives {direct:.4}%"));
    assert!(pass, "{md}\n{csv}");
}
