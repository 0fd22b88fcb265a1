#![allow(dead_code)]

use mcsh::tensor::{Tape, Tensor, Var};
use mcsh::Result;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Outcome of a central finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }

    pub fn ok(&self) -> bool {
        self.pass_rate() >= 0.99
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares tape gradients of a scalar function against central differences
/// with step `FD_STEP`, perturbing every coordinate of every input.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs).expect("forward");
        t.value(l).data()[0]
    };

    let mut out = GradCheck {
        checked: 0,
        passed: 0,
        worst: 0.0,
    };
    for (which, input) in inputs.iter().enumerate() {
        for coord in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[which] = bump(&plus[which], coord, FD_STEP);
            minus[which] = bump(&minus[which], coord, -FD_STEP);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let err = rel_err(analytic[which].data()[coord], fd);
            out.checked += 1;
            if err < REL_TOL {
                out.passed += 1;
            }
            out.worst = out.worst.max(err);
        }
    }
    out
}

fn bump(t: &Tensor, coord: usize, h: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[coord] += h;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}
