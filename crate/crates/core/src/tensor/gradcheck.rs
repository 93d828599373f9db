//! Central-difference gradient verification.
//!
//! The forward closure must be a pure function of the parameter store: any
//! stochastic piece (dropout) has to reseed its own generator on every call,
//! or the differences measure mask churn instead of the gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

/// One checked coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    pub tolerance: f64,
    /// Worst offenders, highest relative error first (up to 8).
    pub worst: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Relative error with an additive absolute floor, the allclose form:
/// err <= tol means |a - n| <= tol * floor + tol * max(|a|, |n|). A few f32
/// rounding steps of a unit-scale loss put noise of about `k * eps / 2h`
/// (order 1e-4) into the numeric derivative regardless of the gradient's own
/// size, so the floor is set to that noise scale over the tolerance. A
/// genuinely missing gradient path still fails because its numeric side is
/// large while the analytic side is zero.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = floor + analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() / denom
}

/// Pick `n` coordinates spread over every tensor in the store: one per
/// tensor first, the rest proportional to tensor size.
pub fn choose_coords<R: Rng>(store: &ParamStore, n: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let sizes: Vec<usize> = store.entries().map(|e| e.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut coords = Vec::with_capacity(n);
    for (i, &sz) in sizes.iter().enumerate() {
        if coords.len() < n {
            coords.push((ParamId(i), rng.gen_range(0..sz)));
        }
    }
    while coords.len() < n {
        let mut pick = rng.gen_range(0..total);
        for (i, &sz) in sizes.iter().enumerate() {
            if pick < sz {
                coords.push((ParamId(i), pick));
                break;
            }
            pick -= sz;
        }
    }
    coords
}

/// Compare analytic gradients against finite differences at the given
/// coordinates.
///
/// `analytic` runs one recorded forward+backward and returns the gradient of
/// every parameter in store order. `loss` runs a no-grad forward and returns
/// the scalar loss; it is called twice per coordinate and step size with the
/// store perturbed in place (and restored afterwards), plus once unperturbed.
pub fn check_gradients(
    store: &mut ParamStore,
    analytic: &mut dyn FnMut(&ParamStore) -> Result<Vec<Vec<f32>>>,
    loss: &mut dyn FnMut(&ParamStore) -> Result<f64>,
    coords: &[(ParamId, usize)],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let grads = analytic(store)?;
    if grads.len() != store.len() {
        return Err(Error::contract(format!(
            "gradient check: analytic pass returned {} tensors for {} parameters",
            grads.len(),
            store.len()
        )));
    }

    const FLOOR: f64 = 2e-2;
    // The loss surface is only piecewise smooth (relu, max-pool switches), so
    // a single symmetric difference is not a fair judge: a switch point inside
    // the probe band corrupts it, and one sitting at the weight itself makes
    // the two sides disagree forever. Each band therefore yields three honest
    // slope estimates (central, forward, backward) and the coordinate is
    // judged by its best; when a band still misses, the step is halved, which
    // moves the band off any nearby switch. A genuinely wrong analytic
    // gradient keeps failing: every estimate converges to a true one-sided
    // slope as h shrinks, and difference noise stays far below the tolerance
    // because rounding is correlated between evaluations.
    const RETRIES: usize = 4;
    let base = loss(store)?;
    let mut checks: Vec<CoordCheck> = Vec::with_capacity(coords.len());
    for &(pid, idx) in coords {
        let a = *grads[pid.0]
            .get(idx)
            .ok_or_else(|| Error::contract(format!("gradient check: coordinate {idx} out of range")))? as f64;
        let w0 = store.value(pid).data[idx];
        // base step: large enough that one loss rounding step stays well
        // under the tolerance, small enough that curvature does not bite
        let mut h = (8e-3f64).max(1e-2 * (w0 as f64).abs()) as f32;

        let mut best: Option<CoordCheck> = None;
        for _ in 0..=RETRIES {
            store.value_mut(pid).data[idx] = w0 + h;
            let up = loss(store)?;
            store.value_mut(pid).data[idx] = w0 - h;
            let down = loss(store)?;
            store.value_mut(pid).data[idx] = w0;

            let hf = h as f64;
            let central = (up - down) / (2.0 * hf);
            let forward = (up - base) / hf;
            let backward = (base - down) / hf;
            for n in [central, forward, backward] {
                let e = rel_err(a, n, FLOOR);
                if best.as_ref().is_none_or(|b| e < b.rel_err) {
                    best = Some(CoordCheck {
                        name: store.name(pid).to_string(),
                        index: idx,
                        analytic: a,
                        numeric: n,
                        rel_err: e,
                    });
                }
            }
            if best.as_ref().is_some_and(|b| b.rel_err <= tolerance * 0.5) {
                break;
            }
            h /= 2.0;
        }
        checks.push(best.expect("at least one probe ran"));
    }

    let failures = checks.iter().filter(|c| c.rel_err > tolerance).count();
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let mut worst = checks;
    worst.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    worst.truncate(8);
    Ok(GradCheckReport {
        coords_checked: coords.len(),
        max_rel_err,
        failures,
        tolerance,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GradMode, Tape, Tensor};
    use rand::SeedableRng;

    // loss = sum((w - c)^2) has gradient 2(w - c); feed the checker a correct
    // and a deliberately broken analytic gradient.
    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.9])).unwrap();
        s
    }

    fn forward_loss(store: &ParamStore) -> Result<f64> {
        let mut tape = Tape::new(GradMode::NoGrad);
        let b = store.bind(&mut tape);
        let c = tape.leaf(Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0]));
        let d = tape.sub(b[ParamId(0)], c)?;
        let sq = tape.mul(d, d)?;
        let l = tape.sum(sq);
        Ok(tape.data(l)[0] as f64)
    }

    fn analytic_ok(store: &ParamStore) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new(GradMode::Record);
        let b = store.bind(&mut tape);
        let c = tape.leaf(Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0]));
        let d = tape.sub(b[ParamId(0)], c)?;
        let sq = tape.mul(d, d)?;
        let l = tape.sum(sq);
        tape.backward(l)?;
        Ok(vec![tape.grad(b[ParamId(0)]).unwrap().to_vec()])
    }

    #[test]
    fn accepts_correct_gradients() {
        let mut store = quadratic_store();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let coords = choose_coords(&store, 4, &mut rng);
        let report = check_gradients(
            &mut store,
            &mut analytic_ok,
            &mut forward_loss,
            &coords,
            1e-2,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn flags_wrong_gradients() {
        let mut store = quadratic_store();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let coords = choose_coords(&store, 4, &mut rng);
        let mut broken = |store: &ParamStore| -> Result<Vec<Vec<f32>>> {
            let g = analytic_ok(store)?;
            Ok(vec![g[0].iter().map(|v| v * 0.5).collect()])
        };
        let report =
            check_gradients(&mut store, &mut broken, &mut forward_loss, &coords, 1e-2).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.3);
    }

    #[test]
    fn coordinate_choice_covers_every_tensor() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::zeros(vec![3])).unwrap();
        s.register("b", Tensor::zeros(vec![100])).unwrap();
        s.register("c", Tensor::zeros(vec![7])).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let coords = choose_coords(&s, 20, &mut rng);
        assert_eq!(coords.len(), 20);
        for p in 0..3 {
            assert!(coords.iter().any(|(pid, _)| pid.0 == p));
        }
    }
}
