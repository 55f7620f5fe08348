use lteode::tensor::{finite_diff_gradient, max_relative_error, Tape, Tensor, Var};
use lteode::Result;
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

/// Fixed projection so the scalar objective depends on every output entry differently.
fn weights(n: usize) -> Tensor {
    let w = (0..n).map(|k| (1.3 * k as f64 + 0.2).cos()).collect::<Vec<_>>();
    Tensor::new(&[n], w).unwrap()
}

fn objective(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[n])?;
    let w = tape.constant(weights(n));
    let prod = tape.hadamard(flat, w)?;
    tape.sum(prod)
}

/// Compare tape gradients against central differences for every input.
fn check<F>(inputs: Vec<Tensor>, build: F) -> std::result::Result<(), TestCaseError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<(f64, Tape, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let l = objective(&mut tape, out)?;
        tape.backward(l)?;
        Ok((tape.value(l).item()?, tape, vars))
    };
    let (_, tape, vars) = eval(&inputs).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        let numeric = finite_diff_gradient(
            |probe| {
                let mut vals = inputs.clone();
                vals[i] = probe.clone();
                Ok(eval(&vals)?.0)
            },
            x,
            EPS,
        )
        .unwrap();
        let err = max_relative_error(&analytic, numeric.data(), FLOOR);
        prop_assert!(err < TOL, "input {i}: rel err {err}\n{analytic:?}\n{:?}", numeric.data());
    }
    Ok(())
}

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(n: usize) -> impl Strategy<Value = Vec<f64>> {
    values(n, -2.0, 2.0).prop_map(|v| v.into_iter().map(|x| if x.abs() < 0.05 { x + 0.1 } else { x }).collect())
}

fn matrix(lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    (1usize..=8, 1usize..=8).prop_flat_map(move |(r, c)| values(r * c, lo, hi).prop_map(move |d| Tensor::new(&[r, c], d).unwrap()))
}

fn tensor3() -> impl Strategy<Value = Tensor> {
    (1usize..=3, 1usize..=4, 1usize..=4)
        .prop_flat_map(|(b, n, c)| values(b * n * c, -2.0, 2.0).prop_map(move |d| Tensor::new(&[b, n, c], d).unwrap()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul((m, k, n) in (1usize..=8, 1usize..=8, 1usize..=8), seed in values(128, -2.0, 2.0)) {
        let a = Tensor::new(&[m, k], seed[..m * k].to_vec()).unwrap();
        let b = Tensor::new(&[k, n], seed[64..64 + k * n].to_vec()).unwrap();
        check(vec![a, b], |t, v| t.matmul(v[0], v[1]))?;
    }

    #[test]
    fn binary_same_shape(a in matrix(-2.0, 2.0), s in values(64, -2.0, 2.0)) {
        let b = Tensor::new(a.shape(), s[..a.numel()].to_vec()).unwrap();
        check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
        check(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?;
        check(vec![a, b], |t, v| t.hadamard(v[0], v[1]))?;
    }

    #[test]
    fn binary_broadcast(a in matrix(-2.0, 2.0), s in -2.0f64..2.0) {
        let b = Tensor::new(&[1], vec![s]).unwrap();
        check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
        check(vec![b.clone(), a.clone()], |t, v| t.sub(v[0], v[1]))?;
        check(vec![a, b], |t, v| t.hadamard(v[0], v[1]))?;
    }

    #[test]
    fn smooth_unary(a in matrix(-3.0, 3.0), f in -2.0f64..2.0) {
        check(vec![a.clone()], |t, v| t.tanh(v[0]))?;
        check(vec![a.clone()], |t, v| t.sigmoid(v[0]))?;
        check(vec![a], |t, v| t.scale(v[0], f))?;
    }

    #[test]
    fn kinked_unary((r, c) in (1usize..=8, 1usize..=8), s in away_from_zero(64)) {
        let a = Tensor::new(&[r, c], s[..r * c].to_vec()).unwrap();
        check(vec![a.clone()], |t, v| t.abs(v[0]))?;
        check(vec![a], |t, v| t.relu(v[0]))?;
    }

    #[test]
    fn channel_ops(a in tensor3(), extra in 1usize..=3, s in values(64, -2.0, 2.0)) {
        let sh = a.shape().to_vec();
        let b = Tensor::new(&[sh[0], sh[1], extra], s[..sh[0] * sh[1] * extra].to_vec()).unwrap();
        check(vec![a.clone(), b], |t, v| t.concat_channels(v[0], v[1]))?;
        let c = sh[2];
        check(vec![a.clone()], move |t, v| t.slice_channels(v[0], c / 2, c - c / 2))?;
        let n = a.numel();
        check(vec![a], move |t, v| t.reshape(v[0], &[n, 1]))?;
    }

    #[test]
    fn transpose_and_normalize(a in matrix(-2.0, 2.0), p in matrix(0.1, 2.0)) {
        check(vec![a], |t, v| t.transpose(v[0]))?;
        check(vec![p], |t, v| t.row_normalize(v[0]))?;
    }

    #[test]
    fn propagate_and_bias(h in tensor3(), s in values(64, -2.0, 2.0)) {
        let (n, c) = (h.shape()[1], h.shape()[2]);
        let op = Tensor::new(&[n, n], s[..n * n].to_vec()).unwrap();
        let bias = Tensor::new(&[c], s[32..32 + c].to_vec()).unwrap();
        check(vec![op, h.clone()], |t, v| t.propagate(v[0], v[1]))?;
        check(vec![h, bias], |t, v| t.add_bias(v[0], v[1]))?;
    }

    #[test]
    fn reductions(a in matrix(-2.0, 2.0), b in 1usize..=3, s in away_from_zero(64)) {
        check(vec![a.clone()], move |t, v| t.repeat_batch(v[0], b))?;
        check(vec![a.clone()], |t, v| t.mean(v[0]))?;
        check(vec![a.clone()], |t, v| t.sum(v[0]))?;
        // offset keeps every residual away from the kink at zero
        let target = Tensor::new(a.shape(), a.data().iter().zip(&s).map(|(x, d)| x + d).collect()).unwrap();
        check(vec![a, target], |t, v| t.mean_abs_error(v[0], v[1]))?;
    }

    #[test]
    fn gather_scatter(a in matrix(-2.0, 2.0), pick in prop::collection::vec(any::<prop::sample::Index>(), 1..6)) {
        let r = a.shape()[0];
        let mut rows: Vec<usize> = pick.iter().map(|i| i.index(r)).collect();
        check(vec![a.clone()], |t, v| t.gather_rows(v[0], &rows))?;
        rows.sort_unstable();
        rows.dedup();
        let k = rows.len();
        let c = a.shape()[1];
        let src = Tensor::new(&[k, c], a.data()[..k.min(r) * c].iter().copied().cycle().take(k * c).collect()).unwrap();
        check(vec![src], |t, v| t.scatter_rows(v[0], &rows, r + 1))?;
    }
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn fan_out_accumulates() {
    // y = x·x + x, dy/dx = 2x + 1
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[1], vec![3.0]).unwrap());
    let sq = tape.hadamard(x, x).unwrap();
    let y = tape.add(sq, x).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[7.0]);
}

#[test]
fn sigmoid_range_and_stability() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[5], vec![-800.0, -30.0, 0.0, 30.0, 800.0]).unwrap());
    let s = tape.sigmoid(x).unwrap();
    let d = tape.data(s);
    assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(d[2], 0.5);
    assert!(d[0] >= 0.0 && d[4] <= 1.0);
}
