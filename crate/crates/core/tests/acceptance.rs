//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::oracle::{as_reference, oracle_matched, random_graph, random_program, reference_disassemble};
use common::{gradient_suite, FD_TOL};
use evmhunt_core::avp::{score_nodes, PatternTable, ScoreConfig, VulnClass};
use evmhunt_core::cfg::{build_cfg, UnresolvedReason};
use evmhunt_core::disasm::{disassemble_bytes, ContractBytecode};
use evmhunt_core::distill::{mk_loss, msl_loss, pre_loss, softmax_entropy, LossConfig};
use evmhunt_core::harness::{
    evaluate, model_to_bytes, stratified_split, subset, synth_dataset, train, Metrics, Model, SampleRecord,
    SynthConfig, TrainConfig,
};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn disassembler_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut instructions = 0;
    for _ in 0..200 {
        let len = rng.random_range(0..=512);
        let code: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let ours = as_reference(&disassemble_bytes(&code));
        instructions += ours.len();
        if ours != reference_disassemble(&code) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("200 strings, {instructions} instructions, {mismatches} mismatching strings, {}", secs(elapsed)),
    )
}

struct HandCase {
    name: &'static str,
    code: Vec<u8>,
    starts: Vec<usize>,
    edges: Vec<(usize, usize)>,
    unresolved: Vec<UnresolvedReason>,
}

/// The diamond B1 -> {B2, B3}, B2 -> B4, B3 -> B5 with CALLVALUE in B1, SUB in
/// B3 and SSTORE in B5.
fn withdraw_diamond() -> Vec<u8> {
    vec![
        0x34, 0x60, 0x07, 0x57, // 0: CALLVALUE PUSH1 7 JUMPI
        0x60, 0x0f, 0x56, // 4: PUSH1 15 JUMP
        0x5b, 0x60, 0x01, 0x80, 0x03, 0x60, 0x11, 0x56, // 7: JUMPDEST PUSH1 1 DUP1 SUB PUSH1 17 JUMP
        0x5b, 0x00, // 15: JUMPDEST STOP
        0x5b, 0x60, 0x00, 0x55, 0x00, // 17: JUMPDEST PUSH1 0 SSTORE STOP
    ]
}

fn hand_cases() -> Vec<HandCase> {
    use UnresolvedReason::*;
    let case = |name, code: &[u8], starts: &[usize], edges: &[(usize, usize)], unresolved: &[UnresolvedReason]| HandCase {
        name,
        code: code.to_vec(),
        starts: starts.to_vec(),
        edges: edges.to_vec(),
        unresolved: unresolved.to_vec(),
    };
    vec![
        case("straight line", &[0x60, 0x01, 0x60, 0x02, 0x01, 0x00], &[0], &[], &[]),
        case("empty", &[], &[], &[], &[]),
        case("direct jump", &[0x60, 0x03, 0x56, 0x5b, 0x00], &[0, 3], &[(0, 1)], &[]),
        case(
            "conditional jump",
            &[0x60, 0x00, 0x60, 0x06, 0x57, 0x00, 0x5b, 0x00],
            &[0, 5, 6],
            &[(0, 1), (0, 2)],
            &[],
        ),
        case("diamond", &withdraw_diamond(), &[0, 4, 7, 15, 17], &[(0, 1), (0, 2), (1, 3), (2, 4)], &[]),
        case("loop", &[0x5b, 0x36, 0x60, 0x00, 0x57, 0x00], &[0, 5], &[(0, 0), (0, 1)], &[]),
        case("dynamic jump", &[0x35, 0x56, 0x5b, 0x00], &[0, 2], &[], &[UnknownTarget]),
        case("truncated push", &[0x60, 0x03, 0x56, 0x5b, 0x61, 0x01], &[0, 3], &[(0, 1)], &[]),
        case("jump into push data", &[0x60, 0x04, 0x56, 0x60, 0x5b, 0x00], &[0, 3], &[], &[NotJumpdest]),
        case(
            "target through swap and dup",
            &[0x60, 0x01, 0x60, 0x09, 0x90, 0x50, 0x80, 0x50, 0x56, 0x5b, 0x00],
            &[0, 9],
            &[(0, 1)],
            &[],
        ),
        case(
            "target across blocks",
            &[0x60, 0x08, 0x60, 0x06, 0x56, 0x00, 0x5b, 0x56, 0x5b, 0x00],
            &[0, 5, 6, 8],
            &[(0, 2), (2, 3)],
            &[],
        ),
        case("consecutive jumpdests", &[0x5b, 0x5b, 0x00], &[0, 1], &[(0, 1)], &[]),
        case("halting blocks", &[0x00, 0x5b, 0xfe, 0x5b, 0xf3], &[0, 1, 3], &[], &[]),
        case("push2 target", &[0x61, 0x00, 0x05, 0x56, 0x00, 0x5b, 0x00], &[0, 4, 5], &[(0, 2)], &[]),
    ]
}

fn cfg_suite() -> Outcome {
    let cases = hand_cases();
    let mut failed = Vec::new();
    for c in &cases {
        let cfg = build_cfg(&ContractBytecode::new(c.name, c.code.clone()));
        let starts: Vec<usize> = cfg.blocks.iter().map(|b| b.start_offset).collect();
        let edges: Vec<(usize, usize)> = cfg.edges.iter().copied().collect();
        let unresolved: Vec<UnresolvedReason> = cfg.unresolved.iter().map(|u| u.reason).collect();
        if starts != c.starts || edges != c.edges || unresolved != c.unresolved {
            failed.push(c.name);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut jump_edges, mut unsound) = (0, 0);
    for _ in 0..500 {
        let cfg = build_cfg(&ContractBytecode::new("r", random_program(&mut rng, 40)));
        for &(_, to) in &cfg.jump_edges {
            jump_edges += 1;
            if !cfg.blocks[to].starts_with_jumpdest() {
                unsound += 1;
            }
        }
    }
    outcome(
        failed.is_empty() && unsound == 0 && cases.len() >= 10,
        format!(
            "{} hand-traced programs, failing {failed:?}; 500 random programs, {jump_edges} jump edges, {unsound} not on JUMPDEST",
            cases.len()
        ),
    )
}

fn avp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut disagreements, mut with_matches) = (0, 0);
    for i in 0..300 {
        let l = 1 + i % 3;
        let p = rng.random_range(0.1..0.35);
        let g = random_graph(&mut rng, 12, p);
        let table = PatternTable::default_for(VulnClass::ALL[i % 4]);
        let config = ScoreConfig {
            l,
            feature_dim: 2,
            ..Default::default()
        };
        let expected = oracle_matched(&g, &table, l);
        let got = score_nodes(&g.to_cfg(), &table, &config);
        let expected_scores: Vec<f64> = expected.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        if got.scores != expected_scores {
            disagreements += 1;
        }
        if expected.contains(&true) {
            with_matches += 1;
        }
    }

    let diamond = build_cfg(&ContractBytecode::new("withdraw", withdraw_diamond()));
    let figure = score_nodes(
        &diamond,
        &PatternTable::default_for(VulnClass::Reentrancy),
        &ScoreConfig::default(),
    )
    .scores;
    let figure_ok = figure == [1.0, 0.0, 1.0, 0.0, 1.0];
    outcome(
        disagreements == 0 && figure_ok,
        format!("300 graphs ({with_matches} with matches), {disagreements} disagreements; diamond scores {figure:?}"),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut checked = 0;
    for seed in 0..20 {
        for (name, err) in gradient_suite(5000 + seed) {
            checked += 1;
            // NaN must count as a failure.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(err <= worst.1) {
                worst = (name, err);
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.1 <= FD_TOL && elapsed < Duration::from_secs(60),
        format!(
            "20 points, {checked} tensor checks, worst relative error {:.2e} ({}), {}",
            worst.1,
            worst.0,
            secs(elapsed)
        ),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_homog = 0.0f64;
    for _ in 0..1000 {
        let cfg = LossConfig::new(rng.random_range(0.0..2.0), rng.random_range(0.01..2.0)).unwrap();
        let (a, b) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        let c: f64 = rng.random_range(0.1..10.0);
        let base = mk_loss(a, b, &cfg).unwrap();
        let scaled_losses = mk_loss(c * a, c * b, &cfg).unwrap();
        let scaled_weights = mk_loss(a, b, &LossConfig::new(c * cfg.alpha, c * cfg.beta).unwrap()).unwrap();
        for v in [scaled_losses, scaled_weights] {
            let rel = (v - c * base).abs() / (c * base).abs().max(f64::MIN_POSITIVE);
            worst_homog = worst_homog.max(rel);
        }
    }
    let homog_ok = worst_homog <= 4.0 * f64::EPSILON;

    let mut worst_entropy = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let h = Array1::from_shape_simple_fn(n, || rng.random_range(-5.0..5.0));
        worst_entropy = worst_entropy.max((msl_loss(&h, &h).unwrap() - softmax_entropy(&h)).abs());
    }
    let pre = pre_loss(&[0.5], &[1.0]).unwrap();
    let pre_err = (pre - std::f64::consts::LN_2).abs();
    outcome(
        homog_ok && worst_entropy <= 1e-12 && pre_err <= 1e-12,
        format!(
            "homogeneity worst relative error {worst_homog:.1e}; |msl(h,h) - H(h)| <= {worst_entropy:.1e}; |pre(0.5,1) - ln 2| = {pre_err:.1e}"
        ),
    )
}

struct Run {
    model: Model,
    test: Vec<SampleRecord>,
    metrics: Metrics,
    elapsed: Duration,
}

fn synthetic_run(seed: u64, config: &TrainConfig) -> Run {
    let data = synth_dataset(&SynthConfig {
        seed,
        ..Default::default()
    });
    let (tr, te) = stratified_split(&data, 0.2, seed);
    let (train_set, test) = (subset(&data, &tr), subset(&data, &te));
    let start = Instant::now();
    let (model, _) = train(&train_set, config).expect("training succeeds");
    let elapsed = start.elapsed();
    let metrics = evaluate(&model, &test, config.threshold).expect("evaluation succeeds");
    Run {
        model,
        test,
        metrics,
        elapsed,
    }
}

fn describe(m: &Metrics) -> String {
    format!("F1 {:.4} (tp {} fp {} tn {} fn {})", m.f1, m.tp, m.fp, m.tn, m.fn_)
}

fn end_to_end(run: &Run) -> Outcome {
    outcome(
        run.metrics.f1 >= 0.90 && run.elapsed <= Duration::from_secs(600),
        format!("seed 42: {} on {} held-out contracts, trained in {}", describe(&run.metrics), run.test.len(), secs(run.elapsed)),
    )
}

fn ablation() -> Outcome {
    let (mut full, mut no_stage_a, mut no_teacher) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 1..=5 {
        let base = TrainConfig {
            seed,
            ..Default::default()
        };
        full.push(synthetic_run(seed, &base).metrics.f1);
        let skip = TrainConfig {
            skip_stage_a: true,
            ..base.clone()
        };
        no_stage_a.push(synthetic_run(seed, &skip).metrics.f1);
        let mut zero = base.clone();
        zero.loss.alpha = 0.0;
        no_teacher.push(synthetic_run(seed, &zero).metrics.f1);
    }
    let fmt = |v: &[f64]| v.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(" ");
    let detail = format!(
        "median F1 full {:.4} [{}], no stage A {:.4} [{}], alpha=0 {:.4} [{}]",
        median(full.clone()),
        fmt(&full),
        median(no_stage_a.clone()),
        fmt(&no_stage_a),
        median(no_teacher.clone()),
        fmt(&no_teacher)
    );
    let (m_full, m_skip, m_zero) = (median(full), median(no_stage_a), median(no_teacher));
    outcome(m_full >= m_skip && m_full >= m_zero, detail)
}

fn denoising_norms(run: &Run) -> Outcome {
    let (mut xi_norms, mut nu_norms) = (Vec::new(), Vec::new());
    let xi = run.model.config.score.xi;
    for s in &run.test {
        let f = run.model.features(s).expect("features");
        for (row, &score) in f.sequence.rows().into_iter().zip(&f.scores) {
            let norm = row.dot(&row).sqrt();
            if score == xi {
                xi_norms.push(norm);
            } else {
                nu_norms.push(norm);
            }
        }
    }
    if xi_norms.is_empty() || nu_norms.is_empty() {
        return outcome(false, "no nodes of one kind in the test set");
    }
    let (nx, nn) = (xi_norms.len(), nu_norms.len());
    let (mx, mn) = (median(xi_norms), median(nu_norms));
    outcome(
        mn < mx,
        format!("median norm of noise rows {mn:.4} ({nn} rows) vs matched rows {mx:.4} ({nx} rows)"),
    )
}

fn determinism(first: &Run, config: &TrainConfig) -> Outcome {
    let second = synthetic_run(42, config);
    let bits = |m: &Metrics| [m.accuracy, m.recall, m.precision, m.f1].map(f64::to_bits);
    let same_metrics = first.metrics == second.metrics && bits(&first.metrics) == bits(&second.metrics);
    let same_model = model_to_bytes(&first.model) == model_to_bytes(&second.model);
    outcome(
        same_metrics && same_model,
        format!("metrics identical: {same_metrics}, checkpoints identical: {same_model}"),
    )
}

fn main() {
    let started = Instant::now();
    let mut failed = BTreeSet::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} [{tag}] {name}: {}", o.detail);
        if !o.pass {
            failed.insert(n);
        }
    };

    report(1, "disassembler vs reference", disassembler_oracle());
    report(2, "control-flow graphs", cfg_suite());
    report(3, "pattern matching vs exhaustive oracle", avp_oracle());
    report(4, "finite-difference gradients", gradient_checks());
    report(5, "loss identities", loss_identities());

    let config = TrainConfig::default();
    let run = synthetic_run(42, &config);
    report(6, "synthetic end-to-end", end_to_end(&run));
    report(7, "ablation direction", ablation());
    report(8, "denoising feature norms", denoising_norms(&run));
    report(9, "bit-identical reruns", determinism(&run, &config));

    println!("acceptance finished in {}", secs(started.elapsed()));
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
