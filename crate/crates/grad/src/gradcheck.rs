//! Central-difference gradient verification against stored parameters.

use crate::nn::VarStore;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub checked: usize,
    pub passed: usize,
    pub max_rel: f64,
    /// (variable, coordinate, analytic, finite-difference) of the worst miss.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl CheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Compare analytic gradients with central finite differences.
///
/// `analytic` is a set of named gradients computed once; `loss` re-evaluates
/// the objective against the (perturbed) store. Up to `coords_per_var`
/// coordinates per variable are probed, chosen deterministically from `seed`.
/// A coordinate passes when `|a - fd| <= tol * max(|a|, |fd|)` or the
/// difference is below an absolute floor of 1e-7.
pub fn fd_check(
    vs: &mut VarStore,
    analytic: &[(String, Tensor)],
    coords_per_var: usize,
    h: f64,
    tol: f64,
    seed: u64,
    mut loss: impl FnMut(&VarStore) -> f64,
) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport { checked: 0, passed: 0, max_rel: 0.0, worst: None };
    for (name, grad) in analytic {
        let n = grad.numel();
        let picks = rand::seq::index::sample(&mut rng, n, coords_per_var.min(n));
        for j in picks {
            let orig = vs.get(name).data()[j];

            let mut plus = vs.get(name).clone();
            plus.data_mut()[j] = orig + h;
            vs.set(name, plus);
            let fp = loss(vs);

            let mut minus = vs.get(name).clone();
            minus.data_mut()[j] = orig - h;
            vs.set(name, minus);
            let fm = loss(vs);

            let mut restore = vs.get(name).clone();
            restore.data_mut()[j] = orig;
            vs.set(name, restore);

            let fd = (fp - fm) / (2.0 * h);
            let an = grad.data()[j];
            let diff = (an - fd).abs();
            let rel = diff / an.abs().max(fd.abs()).max(1e-12);
            let ok = diff <= tol * an.abs().max(fd.abs()) || diff <= 1e-7;
            report.checked += 1;
            if ok {
                report.passed += 1;
            }
            if rel > report.max_rel {
                report.max_rel = rel;
                if !ok {
                    report.worst = Some((name.clone(), j, an, fd));
                }
            }
        }
    }
    report
}
