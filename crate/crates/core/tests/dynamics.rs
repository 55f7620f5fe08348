use lteode::dynamics::{
    embedded_dual_step, evolve, local_truncation_error, Affine, EvolveConfig, MaskMode, NfeCounter, StreamVars,
};
use lteode::graph::SpatialGraph;
use lteode::model::{forward, ModelConfig, ModelParams};
use lteode::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(tape: &mut Tape, w: Tensor, b: Tensor) -> Affine<lteode::tensor::Var> {
    Affine {
        weight: tape.param(w),
        bias: tape.param(b),
    }
}

#[test]
fn linear_field_error_matches_closed_form() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = 4;
        let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dt = rng.random_range(0.01..0.5);
        let mut tape = Tape::new();
        let a_op = tape.constant(Tensor::new(&[n, n], a.clone()).unwrap());
        let hv = tape.constant(Tensor::new(&[1, n, 1], h.clone()).unwrap());
        let p = field(&mut tape, Tensor::eye(1), Tensor::zeros(&[1]));
        let (eu, rk) = embedded_dual_step(&mut tape, hv, dt, a_op, &p, &NfeCounter::new()).unwrap();
        let e = local_truncation_error(&mut tape, eu, rk).unwrap();

        let ah: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * h[j]).sum()).collect();
        let a2h: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * ah[j]).sum()).collect();
        for (got, want) in tape.data(e).iter().zip(&a2h) {
            let want = dt * dt / 2.0 * want.abs();
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

/// One-step errors of Euler and RK2 against `exp(λΔt)` for `f(h) = λh`.
fn one_step_errors(lambda: f64, dt: f64) -> (f64, f64) {
    let mut tape = Tape::new();
    let a_op = tape.constant(Tensor::eye(1));
    let h = tape.constant(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
    let p = field(&mut tape, Tensor::new(&[1, 1], vec![lambda]).unwrap(), Tensor::zeros(&[1]));
    let (eu, rk) = embedded_dual_step(&mut tape, h, dt, a_op, &p, &NfeCounter::new()).unwrap();
    let exact = (lambda * dt).exp();
    ((tape.data(eu)[0] - exact).abs(), (tape.data(rk)[0] - exact).abs())
}

#[test]
fn solver_orders() {
    for lambda in [-1.0, 0.7, -2.5] {
        for dt in [0.1, 0.05, 0.025] {
            let (e1, r1) = one_step_errors(lambda, dt);
            let (e2, r2) = one_step_errors(lambda, dt / 2.0);
            let (euler_ratio, rk2_ratio) = (e1 / e2, r1 / r2);
            assert!((3.5..=4.5).contains(&euler_ratio), "λ={lambda} Δt={dt}: euler ratio {euler_ratio}");
            assert!((6.5..=9.5).contains(&rk2_ratio), "λ={lambda} Δt={dt}: rk2 ratio {rk2_ratio}");
        }
    }
}

#[test]
fn nfe_is_two_per_step_in_every_mode() {
    for mode in MaskMode::ALL {
        for steps in [1, 2, 4, 8] {
            let cfg = ModelConfig {
                proj_dim: 3,
                embed_dim: 2,
                steps,
                mask_mode: mode,
                ..ModelConfig::new(3, 1, 2, 2)
            };
            let params = ModelParams::init(&cfg, 1).unwrap();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.constant(Tensor::full(&[2, 3, 2, 1], 0.3));
            let a = tape.constant(SpatialGraph::ring_lattice(3, 1).unwrap().normalize_adjacency());
            let nfe = NfeCounter::new();
            let out = forward(&mut tape, x, a, &vars, &cfg, &nfe).unwrap();
            assert_eq!(nfe.get(), 2 * steps * 2, "{mode:?} S={steps}");
            for evo in out.evolutions() {
                assert!(evo.traces.iter().all(|t| t.nfe == 2));
            }
        }
    }
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        proj_dim: 4,
        embed_dim: 3,
        steps: 3,
        ..ModelConfig::new(5, 2, 3, 2)
    }
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn node_permutation_equivariance() {
    let cfg = small_cfg();
    let n = cfg.n_nodes;
    let params = ModelParams::init(&cfg, 4).unwrap();
    let graph = SpatialGraph::new(n, [(0, 1, 1.0), (1, 2, 0.5), (3, 4, 2.0), (0, 4, 1.0)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_input(&mut rng, &[2, n, cfg.window, cfg.in_dim]);
    let perm = [3, 0, 4, 1, 2];

    let run = |params: &ModelParams, graph: &SpatialGraph, x: &Tensor| {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x.clone());
        let a = tape.constant(graph.normalize_adjacency());
        let out = forward(&mut tape, xv, a, &vars, &cfg, &NfeCounter::new()).unwrap();
        tape.data(out.y_hat).to_vec()
    };
    let y = run(&params, &graph, &x);

    let permute_rows = |data: &[f64], batch: usize, width: usize| {
        let mut out = vec![0.0; data.len()];
        for b in 0..batch {
            for (i, &p) in perm.iter().enumerate() {
                let src = (b * n + i) * width;
                let dst = (b * n + p) * width;
                out[dst..dst + width].copy_from_slice(&data[src..src + width]);
            }
        }
        out
    };
    let width = cfg.window * cfg.in_dim;
    let xp = Tensor::new(x.shape(), permute_rows(x.data(), 2, width)).unwrap();
    let gp = SpatialGraph::new(
        n,
        graph.edges().iter().map(|&(s, d, w)| (perm[s], perm[d], w)),
    )
    .unwrap();
    let mut pp = params.clone();
    pp.e_node = Tensor::new(params.e_node.shape(), permute_rows(params.e_node.data(), 1, cfg.embed_dim)).unwrap();
    let yp = run(&pp, &gp, &xp);
    let expected = permute_rows(&y, 2, cfg.horizon);
    for (a, b) in yp.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn streams_evolve_independently() {
    let cfg = small_cfg();
    let params = ModelParams::init(&cfg, 6).unwrap();
    let mut other = params.clone();
    other.topological.field.weight = Tensor::full(other.topological.field.weight.shape(), 0.05);
    let graph = SpatialGraph::ring_lattice(cfg.n_nodes, 1).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(2), &[1, cfg.n_nodes, cfg.window, cfg.in_dim]);
    let states = |p: &ModelParams| {
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let xv = tape.constant(x.clone());
        let a = tape.constant(graph.normalize_adjacency());
        let out = forward(&mut tape, xv, a, &vars, &cfg, &NfeCounter::new()).unwrap();
        let s: Vec<Vec<f64>> = out.spatial.states.iter().map(|&v| tape.data(v).to_vec()).collect();
        let k: Vec<Vec<f64>> = out.topological.states.iter().map(|&v| tape.data(v).to_vec()).collect();
        (s, k)
    };
    let (s1, k1) = states(&params);
    let (s2, k2) = states(&other);
    assert_eq!(s1, s2);
    assert_ne!(k1, k2);
}

#[test]
fn off_mode_is_plain_rk2() {
    let mut tape = Tape::new();
    let a = tape.constant(SpatialGraph::new(2, [(0, 1, 1.0)]).unwrap().normalize_adjacency());
    let h0 = tape.constant(Tensor::new(&[1, 2, 1], vec![1.0, -0.5]).unwrap());
    let p = field(&mut tape, Tensor::new(&[1, 1], vec![-0.8]).unwrap(), Tensor::new(&[1], vec![0.1]).unwrap());
    let cfg = EvolveConfig::new(4, MaskMode::Off);
    let stream = StreamVars {
        field: &p,
        compensator: None,
        learned_mask: None,
    };
    let evo = evolve(&mut tape, h0, a, stream, &cfg, &NfeCounter::new()).unwrap();

    let mut h = h0;
    for _ in 0..4 {
        h = embedded_dual_step(&mut tape, h, 0.25, a, &p, &NfeCounter::new()).unwrap().1;
    }
    assert_eq!(tape.data(evo.h_final), tape.data(h));
    // masks are still recorded for diagnostics
    assert!(evo.masks.iter().all(|&m| tape.data(m).iter().all(|v| (0.5..1.0).contains(v))));
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_cfg();
    let run = || {
        let params = ModelParams::init(&cfg, 9).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let x = tape.constant(random_input(&mut ChaCha8Rng::seed_from_u64(1), &[2, 5, 3, 2]));
        let a = tape.constant(SpatialGraph::ring_lattice(5, 2).unwrap().normalize_adjacency());
        let out = forward(&mut tape, x, a, &vars, &cfg, &NfeCounter::new()).unwrap();
        let l = tape.mean(out.y_hat).unwrap();
        tape.backward(l).unwrap();
        (tape.data(out.y_hat).to_vec(), tape.grad(vars.w_input).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
