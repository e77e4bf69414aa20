//! End-to-end acceptance checks. Each test prints a single PASS line
//! (visible with `--nocapture`); a failed assertion marks the criterion
//! failed.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spot_mamba::cli::{
    cmd_ablate, cmd_eval, cmd_synth, cmd_train, EvalArgs, Overrides, SynthArgs, TrainArgs,
};
use spot_mamba::data::{
    generate_synthetic, metric_mae, metric_mape, metric_rmse, normalize, split_622, StgDataset,
};
use spot_mamba::graph::{bfs_depths, generate_walks, Graph, WalkSet, WalkType};
use spot_mamba::model::{FwdCtx, ModelConfig, SpoTModel};
use spot_mamba::numerics::{max_rel_err, ParamSet, Tape, Tensor, Var};
use spot_mamba::ssm::{
    apply_kernel, discretize_bilinear, discretize_zoh, DiscreteSsm, SelectiveParams, SsmParams,
    StateMatrix,
};
use spot_mamba::trainer::{evaluate, split_anchors, train, TrainConfig};

fn report(n: usize, elapsed: std::time::Duration, desc: &str) {
    println!("ACCEPTANCE {n:02} PASS ({:.2}s) - {desc}", elapsed.as_secs_f64());
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_lti_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..200 {
        let n = rng.gen_range(1..=8);
        let p = SsmParams {
            a: StateMatrix::Diag((0..n).map(|_| rng.gen_range(-2.0..-0.01)).collect()),
            b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            c: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            d: rng.gen_range(-1.0..1.0),
            delta: rng.gen_range(0.01..1.0),
        };
        let l = rng.gen_range(1..=64);
        let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for disc in [discretize_bilinear(&p).unwrap(), discretize_zoh(&p).unwrap()] {
            let y_rec = disc.scan_recurrent(&x);
            let y_conv = apply_kernel(&disc.build_kernel(l), &x, disc.d);
            let err = max_rel_err(&y_rec, &y_conv, 1e-9);
            assert!(err < 1e-6, "scan/kernel mismatch: {err}");
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "over budget: {elapsed:?}");
    report(1, elapsed, "200 LTI systems: recurrent scan matches kernel, < 1e-6");
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_selective_reduces_to_lti() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..50 {
        let d_inner = rng.gen_range(1..=4);
        let d_state = rng.gen_range(1..=5);
        let l = rng.gen_range(2..=24);
        let mut ps = ParamSet::new();
        let sel = SelectiveParams::new(&mut ps, "sel", d_inner, d_state, &mut rng);
        // input-independent projections with nonzero biases
        *ps.value_mut(sel.w_delta) = Tensor::zeros(&[d_inner, d_inner]);
        *ps.value_mut(sel.w_b) = Tensor::zeros(&[d_inner, d_state]);
        *ps.value_mut(sel.w_c) = Tensor::zeros(&[d_inner, d_state]);
        *ps.value_mut(sel.b_b) =
            Tensor::from_vec((0..d_state).map(|_| rng.gen_range(0.2..1.0)).collect());
        *ps.value_mut(sel.b_c) =
            Tensor::from_vec((0..d_state).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let mut tape = Tape::new();
        let pv = ps.leaves(&mut tape);
        let x_data: Vec<f64> = (0..l * d_inner).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = tape.constant(Tensor::new(vec![l, d_inner], x_data.clone()));
        let y = sel.forward(&mut tape, &pv, x).unwrap();
        let y = tape.value(y).clone();

        for ch in 0..d_inner {
            let delta = ps.value(sel.b_delta).data[ch].exp().ln_1p();
            let a_row: Vec<f64> = ps.value(sel.a_raw).data[ch * d_state..(ch + 1) * d_state]
                .iter()
                .map(|r| -r.exp().ln_1p())
                .collect();
            let disc = DiscreteSsm {
                a_bar: StateMatrix::Diag(a_row.iter().map(|a| (delta * a).exp()).collect()),
                b_bar: ps.value(sel.b_b).data.iter().map(|b| delta * b).collect(),
                c_bar: ps.value(sel.b_c).data.clone(),
                d: ps.value(sel.d_skip).data[ch],
            };
            let x_ch: Vec<f64> = (0..l).map(|t| x_data[t * d_inner + ch]).collect();
            let want = disc.scan_recurrent(&x_ch);
            let got: Vec<f64> = (0..l).map(|t| y.data[t * d_inner + ch]).collect();
            let err = max_rel_err(&got, &want, 1e-9);
            assert!(err < 1e-8, "channel {ch} err {err}");
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "over budget: {elapsed:?}");
    report(2, elapsed, "50 input-independent selective scans match the LTI oracle, < 1e-8");
}

// ---------------------------------------------------------------- 3

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Max relative error between tape gradients and central differences for
/// scalar(w . build(inputs)). Large inputs are spot-checked on 8 coords.
fn fd_max_rel_err(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let weight = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars);
        let mut wrng = ChaCha8Rng::seed_from_u64(99);
        rand_tensor(&tape.value(y).shape.clone(), -1.0, 1.0, &mut wrng)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars);
        let w = tape.constant(weight.clone());
        let wy = tape.mul(y, w).unwrap();
        let s = tape.reduce_sum(wy, None).unwrap();
        tape.value(s).scalar_value()
    };
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let w = tape.constant(weight.clone());
    let wy = tape.mul(y, w).unwrap();
    let s = tape.reduce_sum(wy, None).unwrap();
    tape.backward(s).unwrap();

    let h = 1e-5;
    let mut coord_rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for (j, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[j])
            .unwrap_or_else(|| panic!("{name}: input {j} got no gradient"));
        let n = input.numel();
        let coords: Vec<usize> = if n <= 16 {
            (0..n).collect()
        } else {
            (0..8).map(|_| coord_rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[j].data[c] += h;
            let mut minus = inputs.to_vec();
            minus[j].data[c] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic[c];
            let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "{name}: input {j} coord {c}: analytic {an} vs fd {fd} (err {err})"
            );
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut check = |name: &str, inputs: Vec<Tensor>, build: &dyn Fn(&mut Tape, &[Var]) -> Var| {
        let e = fd_max_rel_err(name, &inputs, build);
        worst = worst.max(e);
    };

    let a34 = rand_tensor(&[3, 4], -2.0, 2.0, &mut rng);
    let b34 = rand_tensor(&[3, 4], -2.0, 2.0, &mut rng);
    check("add", vec![a34.clone(), b34.clone()], &|t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check("sub", vec![a34.clone(), b34.clone()], &|t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    check("mul", vec![a34.clone(), b34.clone()], &|t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check("scale", vec![a34.clone()], &|t, v| t.scale(v[0], -1.7));
    check(
        "matmul",
        vec![
            rand_tensor(&[3, 4], -1.0, 1.0, &mut rng),
            rand_tensor(&[4, 2], -1.0, 1.0, &mut rng),
        ],
        &|t, v| t.matmul(v[0], v[1]).unwrap(),
    );
    check("transpose", vec![a34.clone()], &|t, v| t.transpose(v[0]).unwrap());
    check(
        "concat_rows",
        vec![
            rand_tensor(&[2, 3], -1.0, 1.0, &mut rng),
            rand_tensor(&[3, 3], -1.0, 1.0, &mut rng),
        ],
        &|t, v| t.concat(0, v).unwrap(),
    );
    check(
        "concat_cols",
        vec![
            rand_tensor(&[3, 2], -1.0, 1.0, &mut rng),
            rand_tensor(&[3, 4], -1.0, 1.0, &mut rng),
        ],
        &|t, v| t.concat(1, v).unwrap(),
    );
    check("slice_cols", vec![rand_tensor(&[4, 5], -1.0, 1.0, &mut rng)], &|t, v| {
        t.slice(v[0], 1, 1, 3).unwrap()
    });
    check("slice_rows", vec![rand_tensor(&[4, 5], -1.0, 1.0, &mut rng)], &|t, v| {
        t.slice(v[0], 0, 2, 2).unwrap()
    });
    check("reshape", vec![a34.clone()], &|t, v| t.reshape(v[0], &[2, 6]).unwrap());
    check("reduce_sum_all", vec![a34.clone()], &|t, v| {
        t.reduce_sum(v[0], None).unwrap()
    });
    check("reduce_sum_rows", vec![a34.clone()], &|t, v| {
        t.reduce_sum(v[0], Some(0)).unwrap()
    });
    check("reduce_mean_cols", vec![a34.clone()], &|t, v| {
        t.reduce_mean(v[0], Some(1)).unwrap()
    });
    check("exp", vec![rand_tensor(&[3, 4], -1.5, 1.5, &mut rng)], &|t, v| t.exp(v[0]));
    check("log", vec![rand_tensor(&[3, 4], 0.3, 3.0, &mut rng)], &|t, v| t.log(v[0]));
    check("sqrt", vec![rand_tensor(&[3, 4], 0.3, 3.0, &mut rng)], &|t, v| t.sqrt(v[0]));
    check("sigmoid", vec![a34.clone()], &|t, v| t.sigmoid(v[0]));
    check("silu", vec![a34.clone()], &|t, v| t.silu(v[0]));
    check("softplus", vec![a34.clone()], &|t, v| t.softplus(v[0]));
    check("tanh", vec![a34.clone()], &|t, v| t.tanh(v[0]));
    // keep relu pre-activations away from the kink
    let relu_in = Tensor::new(
        vec![3, 4],
        a34.data
            .iter()
            .map(|x| if x.abs() < 0.2 { x + 0.5 } else { *x })
            .collect(),
    );
    check("relu", vec![relu_in], &|t, v| t.relu(v[0]));
    check("softmax", vec![a34.clone()], &|t, v| t.softmax(v[0]));
    check("layer_norm", vec![a34.clone()], &|t, v| t.layer_norm(v[0]));
    check("dropout", vec![a34.clone()], &|t, v| {
        let mut drng = ChaCha8Rng::seed_from_u64(42);
        t.dropout(v[0], 0.3, &mut drng)
    });
    check("gather", vec![rand_tensor(&[5, 3], -1.0, 1.0, &mut rng)], &|t, v| {
        t.gather(v[0], &[0, 2, 2, 4]).unwrap()
    });
    check(
        "causal_conv1d",
        vec![
            rand_tensor(&[6, 3], -1.0, 1.0, &mut rng),
            rand_tensor(&[3, 4], -1.0, 1.0, &mut rng),
            rand_tensor(&[3], -0.5, 0.5, &mut rng),
        ],
        &|t, v| t.causal_conv1d(v[0], v[1], v[2]).unwrap(),
    );
    check("reverse", vec![rand_tensor(&[4, 3], -1.0, 1.0, &mut rng)], &|t, v| {
        t.reverse(v[0], 0).unwrap()
    });
    check(
        "add_bias",
        vec![a34.clone(), rand_tensor(&[4], -1.0, 1.0, &mut rng)],
        &|t, v| t.add_bias(v[0], v[1]).unwrap(),
    );
    check(
        "row_mul",
        vec![a34.clone(), rand_tensor(&[4], 0.2, 1.5, &mut rng)],
        &|t, v| t.row_mul(v[0], v[1]).unwrap(),
    );
    check(
        "linear",
        vec![
            rand_tensor(&[3, 4], -1.0, 1.0, &mut rng),
            rand_tensor(&[4, 2], -1.0, 1.0, &mut rng),
            rand_tensor(&[2], -0.5, 0.5, &mut rng),
        ],
        &|t, v| t.linear(v[0], v[1], v[2]).unwrap(),
    );
    check(
        "selective_scan",
        vec![
            rand_tensor(&[5, 2], -1.0, 1.0, &mut rng),
            rand_tensor(&[5, 2], 0.05, 0.4, &mut rng),
            rand_tensor(&[2, 3], -1.5, -0.2, &mut rng),
            rand_tensor(&[5, 3], -1.0, 1.0, &mut rng),
            rand_tensor(&[5, 3], -1.0, 1.0, &mut rng),
            rand_tensor(&[2], 0.5, 1.5, &mut rng),
        ],
        &|t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap(),
    );
    // huber errors kept away from the |e| = delta knee
    let pred = Tensor::from_vec(vec![0.3, -0.5, 2.0, -1.8, 0.1]);
    let truth = Tensor::from_vec(vec![0.0; 5]);
    check("huber", vec![pred, truth], &|t, v| {
        t.huber(v[0], v[1], 1.0).unwrap()
    });

    // end-to-end: 4-node ring fixture
    let cfg = ModelConfig {
        d: 4,
        k: 5,
        m: 2,
        t_in: 3,
        t_out: 3,
        n_layers: 1,
        ff_dim: 8,
        dropout: 0.0,
        d_state: 4,
        n_heads: 2,
        ..ModelConfig::default()
    };
    let mut model = SpoTModel::new(cfg.clone(), 4, 7).unwrap();
    let graph = Graph::ring(4);
    let walks = generate_walks(&graph, cfg.k, cfg.m, 3);
    let inputs = rand_tensor(&[cfg.t_in, 4, 1], -1.0, 1.0, &mut rng);
    let tod: Vec<usize> = (0..cfg.t_in).map(|t| t + 30).collect();
    let dow = vec![3usize; cfg.t_in];
    let targets = rand_tensor(&[cfg.t_out, 4, 1], -1.0, 1.0, &mut rng);
    let target_mat = model.target_matrix(&targets);

    let loss_of = |model: &SpoTModel| -> f64 {
        let mut tape = Tape::new();
        let pv = model.params.leaves(&mut tape);
        let mut ctx = FwdCtx::eval();
        let pred = model
            .forecast(&mut tape, &pv, &walks, &inputs, &tod, &dow, &mut ctx)
            .unwrap();
        let tgt = tape.constant(target_mat.clone());
        let l = tape.huber(pred, tgt, cfg.huber_delta).unwrap();
        tape.value(l).scalar_value()
    };

    let mut tape = Tape::new();
    let pv = model.params.leaves(&mut tape);
    let mut ctx = FwdCtx::eval();
    let pred = model
        .forecast(&mut tape, &pv, &walks, &inputs, &tod, &dow, &mut ctx)
        .unwrap();
    let tgt = tape.constant(target_mat.clone());
    let l = tape.huber(pred, tgt, cfg.huber_delta).unwrap();
    tape.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = pv
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let h = 1e-5;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut coord_rng = ChaCha8Rng::seed_from_u64(17);
    for (idx, id) in model.params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let n = model.params.value(id).numel();
        assert!(!analytic[idx].is_empty(), "{}: no gradient", names[idx]);
        let coords: Vec<usize> = if n <= 2 {
            (0..n).collect()
        } else {
            (0..2).map(|_| coord_rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let orig = model.params.value(id).data[c];
            model.params.value_mut(id).data[c] = orig + h;
            let fp = loss_of(&model);
            model.params.value_mut(id).data[c] = orig - h;
            let fm = loss_of(&model);
            model.params.value_mut(id).data[c] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[idx][c];
            let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "{}[{c}]: analytic {an} vs fd {fd} (err {err})",
                names[idx]
            );
            worst = worst.max(err);
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "over budget: {elapsed:?}");
    report(
        3,
        elapsed,
        &format!("finite-difference checks on every primitive and the full model (worst {worst:.2e})"),
    );
}

// ---------------------------------------------------------------- 4

fn random_graph(rng: &mut ChaCha8Rng) -> Graph {
    let n = rng.gen_range(2..=50);
    let p = rng.gen_range(0.02..0.3);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges, false)
}

fn check_segmented(g: &Graph, source: usize, walk: &[usize], wt: WalkType) {
    let depths = bfs_depths(g, source);
    let reachable = depths.iter().filter(|&&d| d != usize::MAX).count();
    for segment in walk.chunks(reachable) {
        assert_eq!(segment[0], source, "segment must restart at the source");
        let mut seen = vec![false; g.n_nodes()];
        let mut prev_depth = 0usize;
        for (i, &node) in segment.iter().enumerate() {
            assert!(node < g.n_nodes());
            assert!(!seen[node], "repeat inside one traversal segment");
            seen[node] = true;
            match wt {
                WalkType::Bfs => {
                    assert!(
                        depths[node] >= prev_depth,
                        "BFS depth decreased within a segment"
                    );
                    prev_depth = depths[node];
                }
                WalkType::Dfs => {
                    if i > 0 {
                        let connected = segment[..i]
                            .iter()
                            .any(|&prev| g.neighbors(prev).contains(&node));
                        assert!(connected, "DFS node not adjacent to the visited set");
                    }
                }
                WalkType::RandomWalk => unreachable!(),
            }
        }
    }
}

#[test]
fn criterion_04_walk_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for trial in 0..100 {
        let g = random_graph(&mut rng);
        let k = rng.gen_range(3..=20);
        let m = rng.gen_range(1..=3);
        let seed = rng.gen::<u64>();
        let ws = generate_walks(&g, k, m, seed);
        assert_eq!(generate_walks(&g, k, m, seed), ws, "not seed-deterministic");
        for wt in WalkType::ALL {
            for mi in 0..m {
                for node in 0..g.n_nodes() {
                    let walk = ws.sequence(wt, mi, node);
                    assert_eq!(walk.len(), k, "trial {trial}: wrong length");
                    assert_eq!(walk[0], node, "walk must start at its source");
                    match wt {
                        WalkType::RandomWalk => {
                            for pair in walk.windows(2) {
                                let (a, b) = (pair[0], pair[1]);
                                if g.neighbors(a).is_empty() {
                                    assert_eq!(a, b, "isolated node must stall");
                                } else {
                                    assert!(
                                        g.neighbors(a).contains(&b),
                                        "random walk crossed a non-edge"
                                    );
                                }
                            }
                        }
                        _ => check_segmented(&g, node, walk, wt),
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "over budget: {elapsed:?}");
    report(4, elapsed, "walk invariants hold on 100 random graphs");
}

// ---------------------------------------------------------------- 5

fn remap_walks(ws: &WalkSet, perm: &[usize]) -> WalkSet {
    let mut out = ws.clone();
    for wt in WalkType::ALL {
        for m in 0..ws.m {
            for node in 0..ws.n_nodes {
                let mapped: Vec<usize> =
                    ws.sequence(wt, m, node).iter().map(|&v| perm[v]).collect();
                out.set_sequence(wt, m, perm[node], mapped);
            }
        }
    }
    out
}

#[test]
fn criterion_05_structural_claims() {
    let start = Instant::now();
    let cfg = ModelConfig {
        d: 4,
        k: 5,
        m: 2,
        t_in: 3,
        t_out: 3,
        n_layers: 1,
        ff_dim: 8,
        dropout: 0.0,
        d_state: 4,
        n_heads: 2,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.z_width(), 4 * cfg.d, "joint feature width must be 4D");
    assert_eq!(ModelConfig::default().z_width(), 128);

    let n = 5;
    let model = SpoTModel::new(cfg.clone(), n, 7).unwrap();
    let edges = [(0usize, 1usize), (1, 2), (2, 3), (3, 4), (0, 2)];
    let graph = Graph::from_edges(n, &edges, false);
    let walks = generate_walks(&graph, cfg.k, cfg.m, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = rand_tensor(&[cfg.t_in, n, 1], -1.0, 1.0, &mut rng);
    let tod: Vec<usize> = (0..cfg.t_in).collect();
    let dow = vec![1usize; cfg.t_in];

    // forecast output shape
    let base = model.predict(&walks, &inputs, &tod, &dow).unwrap();
    assert_eq!(base.shape, vec![cfg.t_out, n, 1]);

    // node relabeling equivariance: permute ids, table rows, signal
    // columns, and walk contents together
    let perm = [2usize, 0, 4, 1, 3];
    let mut model2 = SpoTModel::new(cfg.clone(), n, 7).unwrap();
    let table = model.params.value(model.node_table_id()).clone();
    let mut table2 = table.clone();
    for i in 0..n {
        for c in 0..cfg.d {
            table2.data[perm[i] * cfg.d + c] = table.data[i * cfg.d + c];
        }
    }
    *model2.params.value_mut(model2.node_table_id()) = table2;
    let walks2 = remap_walks(&walks, &perm);
    let mut inputs2 = inputs.clone();
    for t in 0..cfg.t_in {
        for i in 0..n {
            inputs2.data[t * n + perm[i]] = inputs.data[t * n + i];
        }
    }
    let out = model2.predict(&walks2, &inputs2, &tod, &dow).unwrap();
    for t in 0..cfg.t_out {
        for i in 0..n {
            let diff = (base.data[t * n + i] - out.data[t * n + perm[i]]).abs();
            assert!(diff < 1e-8, "relabeling equivariance broken: {diff}");
        }
    }

    // spatial_mix permutation equivariance on raw features
    let zw = cfg.z_width();
    let nodes: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..cfg.t_in * zw).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let run = |per_node_data: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let pv = model.params.leaves(&mut tape);
        let mut ctx = FwdCtx::eval();
        let per_node: Vec<Var> = per_node_data
            .iter()
            .map(|d| tape.constant(Tensor::new(vec![cfg.t_in, zw], d.clone())))
            .collect();
        let mixed = model.spatial_mix(&mut tape, &pv, &per_node, &mut ctx).unwrap();
        mixed
            .iter()
            .map(|&v| tape.value(v).data.clone())
            .collect::<Vec<_>>()
    };
    let mix_base = run(&nodes);
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| nodes[p].clone()).collect();
    let mix_out = run(&permuted);
    for (dst, &src) in perm.iter().enumerate() {
        let err = mix_out[dst]
            .iter()
            .zip(&mix_base[src])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "spatial permutation equivariance broken: {err}");
    }

    report(5, start.elapsed(), "shape, relabeling, and permutation equivariance claims hold");
}

// ---------------------------------------------------------------- 6

fn overfit_dataset() -> StgDataset {
    let mut ds = generate_synthetic(8, 2016, 1);
    let (train_range, _, _) = split_622(ds.tau());
    normalize(&mut ds, &train_range).unwrap();
    ds
}

fn small_train_model_cfg() -> ModelConfig {
    ModelConfig {
        d: 8,
        k: 8,
        m: 1,
        t_in: 12,
        t_out: 12,
        n_layers: 1,
        ff_dim: 32,
        dropout: 0.0,
        d_state: 4,
        n_heads: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn criterion_06_overfit_eight_windows() {
    let start = Instant::now();
    let ds = overfit_dataset();
    let cfg = small_train_model_cfg();
    let walks = generate_walks(&ds.graph, cfg.k, cfg.m, 1);
    let (train_a, _, _) = split_anchors(&ds, cfg.t_in, cfg.t_out);
    let anchors: Vec<usize> = train_a.iter().step_by(97).take(8).cloned().collect();
    assert_eq!(anchors.len(), 8);
    let tc = TrainConfig {
        lr: 0.01,
        weight_decay: 0.0,
        lr_decay_rate: 1.0,
        decay_epochs: vec![],
        max_epochs: 300,
        patience: 300,
        batch_size: 8,
        seed: 1,
    };
    let mut model = SpoTModel::new(cfg, ds.n_nodes(), 1).unwrap();
    let result = train(&mut model, &ds, &walks, &anchors, &anchors, &tc, None).unwrap();
    let first = result.history.first().unwrap().train_loss;
    let last = result.history.last().unwrap().train_loss;
    assert!(
        last < 0.01 * first,
        "did not overfit: first {first}, last {last}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "over budget: {elapsed:?}");
    report(
        6,
        elapsed,
        &format!("8-window overfit: loss {first:.4} -> {last:.6} (< 1%)"),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_beats_naive_baseline() {
    let start = Instant::now();
    let ds = overfit_dataset();
    let cfg = ModelConfig {
        m: 2,
        ..small_train_model_cfg()
    };
    let walks = generate_walks(&ds.graph, cfg.k, cfg.m, 1);
    let (train_a, val_a, test_a) = split_anchors(&ds, cfg.t_in, cfg.t_out);
    let tc = TrainConfig {
        lr: 0.002,
        weight_decay: 0.0001,
        lr_decay_rate: 0.5,
        decay_epochs: vec![4, 7],
        max_epochs: 8,
        patience: 8,
        batch_size: 32,
        seed: 1,
    };
    let mut model = SpoTModel::new(cfg, ds.n_nodes(), 1).unwrap();
    train(&mut model, &ds, &walks, &train_a, &val_a, &tc, None).unwrap();
    let report_eval = evaluate(&model, &ds, &walks, &test_a).unwrap();
    let ratio = report_eval.avg.mae / report_eval.naive_avg.mae;
    assert!(
        ratio < 0.7,
        "model MAE {} not < 0.7 x naive MAE {}",
        report_eval.avg.mae,
        report_eval.naive_avg.mae
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1800.0, "over budget: {elapsed:?}");
    report(
        7,
        elapsed,
        &format!(
            "full pipeline: test MAE {:.3} vs naive {:.3} (ratio {ratio:.2})",
            report_eval.avg.mae, report_eval.naive_avg.mae
        ),
    );
}

// ---------------------------------------------------------------- 8 / 10

fn tiny_cli_overrides() -> Overrides {
    Overrides {
        seed: Some(5),
        m: Some(1),
        k: Some(4),
        d: Some(4),
        n_layers: Some(1),
        max_epochs: Some(1),
        batch_size: Some(8),
        ..Overrides::default()
    }
}

fn synth_into(dir: &Path) {
    cmd_synth(&SynthArgs {
        nodes: 4,
        steps: 120,
        seed: 3,
        out: dir.to_path_buf(),
    })
    .unwrap();
}

fn train_into(data: &Path, out: &Path) {
    cmd_train(&TrainArgs {
        data: data.to_path_buf(),
        config: None,
        out: out.to_path_buf(),
        overrides: tiny_cli_overrides(),
    })
    .unwrap();
}

#[test]
fn criterion_08_ablation_harness() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_into(&data);

    let train_out = dir.path().join("train");
    train_into(&data, &train_out);

    let ablate_out = dir.path().join("ablate");
    cmd_ablate(&TrainArgs {
        data: data.clone(),
        config: None,
        out: ablate_out.clone(),
        overrides: tiny_cli_overrides(),
    })
    .unwrap();

    // all four arms finished with finite metrics
    let csv = std::fs::read_to_string(ablate_out.join("ablation.csv")).unwrap();
    let arms: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(arms.len(), 4, "expected four ablation arms");
    for line in &arms {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 5);
        for cell in &cells[1..] {
            let v: f64 = cell.parse().unwrap();
            assert!(v.is_finite(), "non-finite metric in {line}");
        }
    }

    // the (mamba, mamba) arm bit-matches the plain training run
    let arm_ckpt = ablate_out.join("mamba_mamba/checkpoint");
    let train_ckpt = train_out.join("checkpoint");
    let mut names: Vec<String> = std::fs::read_dir(&train_ckpt)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n.ends_with(".bin")));
    for name in &names {
        let a = std::fs::read(train_ckpt.join(name)).unwrap();
        let b = std::fs::read(arm_ckpt.join(name)).unwrap();
        assert_eq!(a, b, "checkpoint file {name} differs between train and ablate");
    }

    report(8, start.elapsed(), "four ablation arms finite; mamba/mamba arm bit-matches train");
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_metric_ground_truths() {
    let start = Instant::now();
    let pred = [11.0, 18.0];
    let truth = [10.0, 20.0];
    let rtol = 1e-12;
    assert!((metric_mae(&pred, &truth) - 1.5).abs() <= rtol * 1.5);
    assert!((metric_rmse(&pred, &truth) - 2.5f64.sqrt()).abs() <= rtol * 2.5f64.sqrt());
    assert!((metric_mape(&pred, &truth).unwrap() - 10.0).abs() <= rtol * 10.0);

    let mut tape = Tape::new();
    let t = tape.constant(Tensor::from_vec(vec![0.0]));
    for (e, want) in [(0.5, 0.125), (2.0, 1.5), (1.0, 0.5)] {
        let p = tape.constant(Tensor::from_vec(vec![e]));
        let l = tape.huber(p, t, 1.0).unwrap();
        assert!((tape.value(l).scalar_value() - want).abs() <= rtol * want);
    }

    // MAE <= RMSE always (Jensen)
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for _ in 0..50 {
        let n = rng.gen_range(1..40);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        assert!(metric_mae(&p, &t) <= metric_rmse(&p, &t) + 1e-12);
    }
    report(9, start.elapsed(), "metric and Huber hand values exact; MAE <= RMSE");
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_deterministic_metrics() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_into(&data);
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        train_into(&data, &out);
        let metrics = out.join("metrics.csv");
        cmd_eval(&EvalArgs {
            data: data.clone(),
            checkpoint: out.join("checkpoint"),
            seed: 5,
            split: "test".into(),
            out: metrics.clone(),
        })
        .unwrap();
        outputs.push(std::fs::read(metrics).unwrap());
    }
    assert!(!outputs[0].is_empty());
    assert_eq!(outputs[0], outputs[1], "metrics CSVs differ across identical runs");
    report(10, start.elapsed(), "two identical runs give byte-identical metrics CSVs");
}
