//! Central finite-difference gradient verification.
//!
//! The checker reruns the forward closure with perturbed leaf values and
//! never consults the backward pass, so it stays an independent oracle for
//! the analytic gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest normalized error over all probed elements.
    pub max_err: f64,
    /// (leaf index, element index, analytic, finite-difference) of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Number of elements probed.
    pub probes: usize,
}

/// Normalized error: relative for gradients above `floor`, absolute below.
fn normalized_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences with step `h`.
///
/// `forward` receives leaves in the order given; all leaves are registered
/// with gradient tracking. When `samples_per_leaf` is set, only that many
/// deterministic positions per leaf are probed (seeded by `seed`); otherwise
/// every element is probed.
pub fn check_gradients<F>(
    leaves: &[Tensor],
    forward: F,
    h: f64,
    samples_per_leaf: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = forward(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    // Analytic gradients from one taped pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = forward(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_err: 0.0,
        worst: None,
        probes: 0,
    };

    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .wrt(vars[li])
            .expect("leaf registered with requires_grad");
        let n = leaf.numel();
        let positions: Vec<usize> = match samples_per_leaf {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for ei in positions {
            let orig = work[li].data()[ei];
            work[li].data_mut()[ei] = orig + h;
            let f_plus = eval(&work)?;
            work[li].data_mut()[ei] = orig - h;
            let f_minus = eval(&work)?;
            work[li].data_mut()[ei] = orig;

            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = analytic.data()[ei];
            let err = normalized_err(a, fd, 1e-3);
            report.probes += 1;
            if err > report.max_err {
                report.max_err = err;
                report.worst = Some((li, ei, a, fd));
            }
        }
    }
    Ok(report)
}

/// Random tensor with entries in `[-1, 1)`, for gradient-check inputs.
pub fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}
