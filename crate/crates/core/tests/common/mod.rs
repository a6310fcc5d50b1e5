#![allow(dead_code)]

pub mod blocks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sctransnet::{Mode, ParamKind, ParamStore, Tape, Tensor, Var};
use sctransnet_oracle::{finite_diff_grad, FiniteDiffSpec};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Largest relative gradient error over a block's parameters and inputs, and where it occurred.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub block: String,
    pub coords: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel <= tol
    }
}

type Forward<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Vec<Var> + 'a;

/// Reduces every output to `BCE(sigmoid(out), fixed target)` and sums.
fn scalar(tape: &mut Tape<f64>, outs: &[Var]) -> Var {
    let mut terms = Vec::new();
    for (i, &o) in outs.iter().enumerate() {
        let target = random(tape.shape(o), 1000 + i as u64).map(|v| (v + 1.0) / 2.0);
        let p = tape.sigmoid(o);
        terms.push((tape.bce(p, &target).unwrap(), 1.0));
    }
    tape.weighted_sum(&terms).unwrap()
}

fn evaluate(store: &ParamStore<f64>, inputs: &[Tensor<f64>], mode: Mode, forward: &Forward) -> f64 {
    let mut tape = Tape::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let outs = forward(&mut tape, store, &vars);
    let l = scalar(&mut tape, &outs);
    tape.value(l).data()[0]
}

/// Compares analytic gradients of every learnable scalar and every input
/// coordinate of a block with central finite differences.
pub fn check_block(
    block: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    forward: &Forward,
) -> GradReport {
    let spec = FiniteDiffSpec {
        step: 1e-5,
        ..FiniteDiffSpec::default()
    };
    let mut tape = Tape::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let outs = forward(&mut tape, store, &vars);
    let l = scalar(&mut tape, &outs);
    let grads = tape.backward(l).unwrap();
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    grads.accumulate_into(&mut analytic_store);

    let mut report = GradReport {
        block: block.to_string(),
        coords: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let record = |name: String, analytic: &[f64], fd: &[f64], report: &mut GradReport| {
        for (k, (a, f)) in analytic.iter().zip(fd).enumerate() {
            report.coords += 1;
            let rel = (a - f).abs() / (f.abs() + spec.abs_floor);
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{k}] analytic {a:e} fd {f:e}");
            }
        }
    };

    for id in store
        .ids()
        .filter(|&id| store.kind(id) == ParamKind::Learnable)
    {
        let mut probe = store.clone();
        let fd = finite_diff_grad(
            |v| {
                probe.value_mut(id).data_mut().copy_from_slice(v);
                evaluate(&probe, inputs, mode, forward)
            },
            store.value(id).data(),
            spec.step,
        )
        .unwrap();
        record(
            store.name(id).to_string(),
            analytic_store.grad(id).data(),
            &fd,
            &mut report,
        );
    }
    for (i, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let fd = finite_diff_grad(
            |p| {
                let mut moved = inputs.to_vec();
                moved[i] = Tensor::from_vec(x.shape(), p.to_vec()).unwrap();
                evaluate(store, &moved, mode, forward)
            },
            x.data(),
            spec.step,
        )
        .unwrap();
        record(
            format!("input{i}"),
            grads.wrt(v).unwrap().data(),
            &fd,
            &mut report,
        );
    }
    report
}
