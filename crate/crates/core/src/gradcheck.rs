//! Central finite-difference verification of analytic gradients.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::VarId;
use crate::blocks::{Ctx, Trainable};
use crate::params::{fnv1a, ParamStore};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error seen (|analytic - fd| / max(|a|+|fd|, 1e-3)).
    pub max_rel_err: f64,
    /// Number of scalar entries checked.
    pub checked: usize,
    /// Parameter entry with the largest error.
    pub worst: String,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs the graph from a parameter store and returns the
/// context plus the scalar loss node. All parameters receive gradients when
/// `Trainable::All` is passed; finite-difference evaluations run frozen.
/// `max_per_tensor` caps how many entries of each tensor are perturbed
/// (entries are chosen with a seeded shuffle); `usize::MAX` checks all.
pub fn fd_gradient_check<F>(
    store: &ParamStore,
    build: F,
    eps: f64,
    max_per_tensor: usize,
    seed: u64,
) -> FdReport
where
    F: for<'a> Fn(&'a ParamStore, Trainable<'a>) -> (Ctx<'a>, VarId),
{
    let (ctx, loss) = build(store, Trainable::All);
    let analytic = ctx.tape.backward(loss);
    drop(ctx);

    let mut report = FdReport { max_rel_err: 0.0, checked: 0, worst: String::new() };
    let mut work = store.clone();

    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let len = store.expect(&name).len();
        let indices: Vec<usize> = if len <= max_per_tensor {
            (0..len).collect()
        } else {
            let mut idx: Vec<usize> = (0..len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&name));
            idx.shuffle(&mut rng);
            idx.truncate(max_per_tensor);
            idx
        };
        for i in indices {
            let orig = store.expect(&name).as_slice().unwrap()[i];

            work.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = orig + eps;
            let (ctx_p, loss_p) = build(&work, Trainable::Frozen);
            let fp = ctx_p.tape.scalar(loss_p);
            drop(ctx_p);

            work.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = orig - eps;
            let (ctx_m, loss_m) = build(&work, Trainable::Frozen);
            let fm = ctx_m.tape.scalar(loss_m);
            drop(ctx_m);

            work.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = orig;

            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic
                .get(&name)
                .map(|g| g.as_slice().unwrap()[i])
                .unwrap_or(0.0);
            let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-3);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}] analytic {an} fd {fd}");
            }
        }
    }
    report
}
