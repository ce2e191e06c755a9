//! End-to-end acceptance checks, one line per criterion.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::*;
use fadnest::engine::EngineConfig;
use fadnest::fad::{check_trace, FadState};
use fadnest::modeling::{apply_activation, Activation, Batch, Mlp, MlpConfig};
use fadnest::ops::OpKind;
use fadnest::program::{generate, GenConfig, Program};
use fadnest::static_graph::{self, partition, rewrite, select_candidates};
use fadnest::tensor::Category;
use fadnest::{Engine, Mode, Shape};

const SWISH_BP_TOL: f64 = 1e-12;
const SWISH_FD_TOL: f64 = 1e-6;
const SWISH_FD_H: f64 = 1e-6;
const CROSS_MODE_TOL: f64 = 1e-10;
const TRAJECTORY_TOL: f64 = 1e-8;
const PROGRAMS: u64 = 1000;
const PARTITION_GRAPHS: u64 = 500;
const PARTITION_MAX_NODES: usize = 12;
const TRAIN_STEPS: usize = 200;

type Outcome = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    ensure(elapsed < limit, || {
        format!("took {elapsed:?}, limit {limit:?}")
    })
}

fn programs() -> Vec<Program> {
    (0..PROGRAMS)
        .map(|s| generate(s, GenConfig::default()))
        .collect()
}

fn swish_grad(mode: Mode, xs: &[f64]) -> Vec<f64> {
    let mut e = Engine::new(EngineConfig::new(mode));
    let x = e
        .weight(Shape::vector(xs.len()).unwrap(), xs.to_vec())
        .unwrap();
    let y = apply_activation(&mut e, Activation::Swish, x).unwrap();
    let l = e.unary(OpKind::ReduceSum, y).unwrap();
    e.release(y).unwrap();
    e.backward(l, 1.0).unwrap().get(x).unwrap().to_vec()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let xs = [0.0, 1.0, -2.0];
    let fad = swish_grad(Mode::Fad, &xs);
    let bp = swish_grad(Mode::Bp, &xs);
    ensure(fad[0] == 0.5, || format!("d swish(0) = {}", fad[0]))?;
    let swish = |v: f64| v / (1.0 + (-v).exp());
    for (i, &x) in xs.iter().enumerate() {
        let fd = central_fd(|p| swish(p[0]), &[x], SWISH_FD_H)[0];
        ensure((fad[i] - bp[i]).abs() <= SWISH_BP_TOL, || {
            format!("x={x}: fad {} bp {}", fad[i], bp[i])
        })?;
        ensure(
            (fad[i] - fd).abs() <= SWISH_FD_TOL * fd.abs().max(1.0),
            || format!("x={x}: fad {} fd {fd}", fad[i]),
        )?;
    }
    within(start.elapsed(), Duration::from_secs(1))
}

fn criterion_2(progs: &[Program]) -> Outcome {
    let start = Instant::now();
    for (s, p) in progs.iter().enumerate() {
        let bp = run(p, Mode::Bp).grads;
        let paths = [
            ("recompute", run(p, Mode::Recompute).grads),
            ("fad", run(p, Mode::Fad).grads),
            ("static", static_grads(p)),
        ];
        for (name, g) in &paths {
            let r = max_rel(&bp, g);
            ensure(r <= CROSS_MODE_TOL, || {
                format!("program {s}: {name} vs bp rel err {r:e}")
            })?;
        }
    }
    within(start.elapsed(), Duration::from_secs(60))
}

fn mlp_cells() -> Vec<(Vec<usize>, Activation, usize)> {
    let mut cells = Vec::new();
    for widths in [vec![2, 16, 16, 1], vec![4, 32, 32, 32, 2]] {
        for act in [Activation::Swish, Activation::Mish, Activation::Gelu] {
            for batch in [8, 64] {
                cells.push((widths.clone(), act, batch));
            }
        }
    }
    cells
}

fn outcome(
    widths: &[usize],
    act: Activation,
    batch: usize,
    mode: Mode,
) -> (fadnest::modeling::PassOutcome, Engine) {
    let cfg = MlpConfig::new(widths.to_vec(), act, batch, 11, mode);
    let data = Batch::synthetic(widths[0], *widths.last().unwrap(), batch, 11);
    Mlp::new(&cfg)
        .unwrap()
        .pass_with(EngineConfig::new(mode).with_trace().with_events(), &data)
        .unwrap()
}

fn criterion_3() -> Outcome {
    let widths = [2, 16, 16, 1];
    for act in [Activation::Swish, Activation::Gelu, Activation::Mish] {
        let bp = outcome(&widths, act, 64, Mode::Bp).0.retained;
        let fad = outcome(&widths, act, 64, Mode::Fad).0.retained;
        let saves = enumerated_saves(act);
        if act == Activation::Swish {
            ensure(saves == 2, || format!("swish enumerates {saves} saves"))?;
        }
        ensure(fad.act_bytes * saves == bp.act_bytes, || {
            format!(
                "{act}: bp im_act {} fad {} expected ratio {saves}",
                bp.act_bytes, fad.act_bytes
            )
        })?;
    }
    for (w, act, batch) in mlp_cells() {
        let bp = outcome(&w, act, batch, Mode::Bp).0.peak_total_bytes;
        let fad = outcome(&w, act, batch, Mode::Fad).0.peak_total_bytes;
        ensure(fad < bp, || {
            format!("{act} {w:?} batch {batch}: peak fad {fad} bp {bp}")
        })?;
    }
    Ok(())
}

/// Tape nodes implied by the trace: one per NN/YN op plus one collapse per
/// fad operand of a YN op.
fn nodes_from_trace(e: &Engine) -> usize {
    e.trace()
        .iter()
        .map(|r| match r.state {
            FadState::NN => 1,
            FadState::YN => 1 + r.inputs.iter().filter(|(_, f)| *f).count(),
            _ => 0,
        })
        .sum()
}

fn criterion_4(progs: &[Program]) -> Outcome {
    for (w, act, batch) in mlp_cells() {
        let (bp, _) = outcome(&w, act, batch, Mode::Bp);
        let (rc, _) = outcome(&w, act, batch, Mode::Recompute);
        let (fad, e) = outcome(&w, act, batch, Mode::Fad);
        let tag = format!("{act} {w:?} batch {batch}");
        ensure(
            fad.stats.forward_kernels == bp.stats.forward_kernels,
            || {
                format!(
                    "{tag}: fad kernels {} bp {}",
                    fad.stats.forward_kernels, bp.stats.forward_kernels
                )
            },
        )?;
        ensure(
            rc.stats.forward_kernels == bp.stats.forward_kernels + rc.stats.recompute_count,
            || {
                format!(
                    "{tag}: recompute kernels {} bp {} recomputed {}",
                    rc.stats.forward_kernels, bp.stats.forward_kernels, rc.stats.recompute_count
                )
            },
        )?;
        let expect = nodes_from_trace(&e);
        ensure(fad.backward_nodes == expect, || {
            format!(
                "{tag}: {} backward nodes, trace implies {expect}",
                fad.backward_nodes
            )
        })?;
    }
    for (s, p) in progs.iter().enumerate() {
        let bp = run(p, Mode::Bp);
        let rc = run(p, Mode::Recompute);
        let fad = run(p, Mode::Fad);
        ensure(
            fad.stats.forward_kernels == bp.stats.forward_kernels,
            || format!("program {s}: fad kernels differ"),
        )?;
        ensure(
            rc.stats.forward_kernels == bp.stats.forward_kernels + rc.stats.recompute_count,
            || format!("program {s}: recompute kernel count"),
        )?;
        // The generated losses are never fad, so no collapse happens at backward time.
        let expect = nodes_from_trace(&fad.engine);
        ensure(fad.backward_nodes == expect, || {
            format!(
                "program {s}: {} backward nodes, trace implies {expect}",
                fad.backward_nodes
            )
        })?;
    }
    Ok(())
}

fn criterion_5(progs: &[Program]) -> Outcome {
    let (e, _) = chain_example(Mode::Fad);
    let states: Vec<FadState> = e.trace().iter().map(|r| r.state).collect();
    use FadState::*;
    ensure(states[..6] == [NN, NY, YY, YY, YN, YN], || {
        format!("states {states:?}")
    })?;
    check_trace(e.trace(), true).map_err(|v| format!("example rejected: {v}"))?;

    let base = e.trace().to_vec();
    let mut mutants = Vec::new();
    let mut m = base.clone();
    m[2].state = NY; // restarting a chain on a fad operand
    mutants.push(("NY on fad input", m));
    let mut m = base.clone();
    m[3].src = Some(fadnest::TensorId(u64::MAX)); // wrong source
    mutants.push(("foreign source", m));
    let mut m = base.clone();
    m[1].state = NN; // chain never started
    mutants.push(("missing start", m));
    let mut m = base.clone();
    m.truncate(4); // chain never closed
    mutants.push(("unclosed", m));
    for (name, m) in &mutants {
        ensure(check_trace(m, true).is_err(), || {
            format!("mutant `{name}` accepted")
        })?;
    }

    for (s, p) in progs.iter().enumerate() {
        let x = run(p, Mode::Fad);
        check_trace(x.engine.trace(), true).map_err(|v| format!("program {s}: {v}"))?;
    }
    for (w, act, batch) in mlp_cells() {
        let (_, e) = outcome(&w, act, batch, Mode::Fad);
        check_trace(e.trace(), true).map_err(|v| format!("{act} {w:?}: {v}"))?;
    }
    Ok(())
}

type Component = (BTreeSet<String>, usize, usize);

fn criterion_6(progs: &[Program]) -> Outcome {
    for seed in 0..PARTITION_GRAPHS {
        let g = random_forward_graph(seed, PARTITION_MAX_NODES);
        let mut got: Vec<Component> = partition(&g)
            .map_err(|e| format!("graph {seed}: {e}"))?
            .into_iter()
            .map(|s| (s.members.into_iter().collect(), s.in_degree, s.out_degree))
            .collect();
        let mut want = brute_partition(&g);
        got.sort();
        want.sort();
        ensure(got == want, || {
            format!("graph {seed}: got {got:?}, oracle {want:?}")
        })?;
    }
    for (s, p) in progs.iter().enumerate().take(200) {
        let mut g = static_graph::from_program(p).map_err(|e| e.to_string())?;
        loop {
            let subs = partition(&g).map_err(|e| e.to_string())?;
            let Some(c) = select_candidates(&g, &subs).into_iter().next() else {
                break;
            };
            let r = rewrite(&g, &c).map_err(|e| format!("program {s}: {e}"))?;
            let acc = r
                .backward
                .iter()
                .find(|n| n.op == "fad_acc" && g.node(&n.id).is_none())
                .ok_or_else(|| format!("program {s}: no new accumulate node"))?;
            let into = r.save_edges.iter().filter(|(_, b)| *b == acc.id).count();
            ensure(into == c.out_degree, || {
                format!(
                    "program {s}: {into} save-edges into {}, out-degree {}",
                    acc.id, c.out_degree
                )
            })?;
            g = r;
        }
        let bp = run(p, Mode::Bp).grads;
        let r = max_rel(&bp, &static_grads(p));
        ensure(r <= CROSS_MODE_TOL, || {
            format!("program {s}: rewritten graph rel err {r:e}")
        })?;
    }
    Ok(())
}

fn criterion_7(progs: &[Program]) -> Outcome {
    let leaked = |e: &Engine| {
        e.ledger().live(Category::Intermediate) + e.ledger().live(Category::FadDerivative)
    };
    for (s, p) in progs.iter().enumerate() {
        for mode in Mode::ALL {
            let x = run(p, mode);
            ensure(leaked(&x.engine) == 0, || {
                format!(
                    "program {s} {}: {} bytes live",
                    mode.name(),
                    leaked(&x.engine)
                )
            })?;
            if mode == Mode::Fad {
                check_release_order(x.engine.trace(), x.engine.ledger().events(), None)
                    .map_err(|m| format!("program {s}: {m}"))?;
            }
        }
    }
    let (mut e, l) = chain_example(Mode::Fad);
    e.backward(l, 1.0).map_err(|e| e.to_string())?;
    e.release(l).map_err(|e| e.to_string())?;
    e.teardown().map_err(|e| e.to_string())?;
    ensure(leaked(&e) == 0, || "chain example leaks".into())?;
    check_release_order(e.trace(), e.ledger().events(), None)
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let cfg = MlpConfig::new(vec![2, 16, 16, 1], Activation::Gelu, 32, 5, Mode::Bp);
    let data = Batch::synthetic(2, 1, 32, 5);
    let mut a = Mlp::new(&cfg).map_err(|e| e.to_string())?;
    let mut b = a.clone();
    let (la, ta) = a
        .train(Mode::Bp, &data, TRAIN_STEPS, cfg.lr)
        .map_err(|e| e.to_string())?;
    let (lb, tb) = b
        .train(Mode::Fad, &data, TRAIN_STEPS, cfg.lr)
        .map_err(|e| e.to_string())?;
    for (step, (x, y)) in ta.iter().zip(&tb).enumerate() {
        let r = rel_err(x, y);
        ensure(r <= TRAJECTORY_TOL, || {
            format!("step {step}: parameters differ by {r:e}")
        })?;
    }
    for (step, (x, y)) in la.iter().zip(&lb).enumerate() {
        let r = rel_err(&[*x], &[*y]);
        ensure(r <= TRAJECTORY_TOL, || {
            format!("step {step}: losses {x} vs {y}")
        })?;
    }
    ensure(la.last() < la.first(), || {
        format!("loss went {} -> {}", la[0], la[TRAIN_STEPS])
    })?;
    within(start.elapsed(), Duration::from_secs(30))
}

#[test]
fn acceptance() {
    let progs = programs();
    let results = [
        criterion_1(),
        criterion_2(&progs),
        criterion_3(),
        criterion_4(&progs),
        criterion_5(&progs),
        criterion_6(&progs),
        criterion_7(&progs),
        criterion_8(),
    ];
    let mut failed = Vec::new();
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(()) => println!("criterion {}: PASS", i + 1),
            Err(m) => {
                println!("criterion {}: FAIL ({m})", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
