//! Multinomial no-U-turn trajectories with a diagonal metric.

use rand::Rng;

use crate::math::std_normal;
use crate::posterior::LogDensity;

/// Energy error above which a trajectory is declared divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

/// Phase-space point.
#[derive(Debug, Clone)]
pub struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    pub fn at<D: LogDensity + ?Sized>(density: &D, q: Vec<f64>) -> Option<Self> {
        let mut grad = vec![0.0; q.len()];
        let logp = density.logp_and_grad(&q, &mut grad).ok()?;
        let finite = logp.is_finite() && grad.iter().all(|g| g.is_finite());
        finite.then(|| Self {
            p: vec![0.0; q.len()],
            q,
            grad,
            logp,
        })
    }
}

/// Diagonal Euclidean metric: `inv_mass` holds the posterior variance
/// estimates.
#[derive(Debug, Clone)]
pub struct Metric {
    pub inv_mass: Vec<f64>,
}

impl Metric {
    pub fn unit(dim: usize) -> Self {
        Self {
            inv_mass: vec![1.0; dim],
        }
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
    }

    pub fn sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_mass).map(|(p, m)| p * m).collect()
    }

    pub fn sample_momentum<R: Rng + ?Sized>(&self, rng: &mut R, p: &mut [f64]) {
        for (pi, m) in p.iter_mut().zip(&self.inv_mass) {
            *pi = std_normal(rng) / m.sqrt();
        }
    }

    pub fn hamiltonian(&self, z: &Point) -> f64 {
        -z.logp + self.kinetic(&z.p)
    }
}

/// One leapfrog step of signed size `eps`. Returns `None` when the density
/// cannot be evaluated at the new position.
pub fn leapfrog<D: LogDensity + ?Sized>(density: &D, metric: &Metric, z: &Point, eps: f64) -> Option<Point> {
    let mut p: Vec<f64> = z.p.iter().zip(&z.grad).map(|(p, g)| p + 0.5 * eps * g).collect();
    let q: Vec<f64> = z
        .q
        .iter()
        .zip(&p)
        .zip(&metric.inv_mass)
        .map(|((q, p), m)| q + eps * m * p)
        .collect();
    let mut grad = vec![0.0; q.len()];
    let logp = density.logp_and_grad(&q, &mut grad).ok()?;
    if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    for (pi, g) in p.iter_mut().zip(&grad) {
        *pi += 0.5 * eps * g;
    }
    Some(Point { q, p, grad, logp })
}

/// Summary of one NUTS transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStats {
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub depth: usize,
    pub diverging: bool,
    /// `H(proposal) − H(start)`.
    pub energy_error: f64,
    pub step_size: f64,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// No U-turn holds when both end momenta point along `rho`.
fn no_uturn(sharp_a: &[f64], sharp_b: &[f64], rho: &[f64]) -> bool {
    dot(sharp_a, rho) > 0.0 && dot(sharp_b, rho) > 0.0
}

/// A subtree, with its edges listed in growth order: `inner` is adjacent to
/// the tree it extends, `outer` is the new frontier.
struct Subtree {
    inner_p: Vec<f64>,
    inner_sharp: Vec<f64>,
    outer: Point,
    outer_sharp: Vec<f64>,
    rho: Vec<f64>,
    log_w: f64,
    proposal: Point,
}

struct Counters {
    n_leapfrog: usize,
    sum_accept: f64,
    diverging: bool,
}

pub struct Nuts<'a, D: LogDensity + ?Sized> {
    pub density: &'a D,
    pub metric: Metric,
    pub step_size: f64,
    pub max_depth: usize,
}

impl<D: LogDensity + ?Sized> Nuts<'_, D> {
    fn build_tree<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        from: &Point,
        depth: usize,
        eps: f64,
        h0: f64,
        c: &mut Counters,
    ) -> Option<Subtree> {
        if depth == 0 {
            c.n_leapfrog += 1;
            let Some(z) = leapfrog(self.density, &self.metric, from, eps) else {
                c.diverging = true;
                return None;
            };
            let h = self.metric.hamiltonian(&z);
            if !h.is_finite() || h - h0 > MAX_ENERGY_ERROR {
                c.diverging = true;
                return None;
            }
            c.sum_accept += (h0 - h).exp().min(1.0);
            let sharp = self.metric.sharp(&z.p);
            return Some(Subtree {
                inner_p: z.p.clone(),
                inner_sharp: sharp.clone(),
                rho: z.p.clone(),
                outer_sharp: sharp,
                log_w: h0 - h,
                proposal: z.clone(),
                outer: z,
            });
        }
        let a = self.build_tree(rng, from, depth - 1, eps, h0, c)?;
        let b = self.build_tree(rng, &a.outer, depth - 1, eps, h0, c)?;

        let rho = add(&a.rho, &b.rho);
        let persist = no_uturn(&a.inner_sharp, &b.outer_sharp, &rho)
            && no_uturn(&a.inner_sharp, &b.inner_sharp, &add(&a.rho, &b.inner_p))
            && no_uturn(&a.outer_sharp, &b.outer_sharp, &add(&b.rho, &a.outer.p));
        if !persist {
            return None;
        }
        let log_w = log_add_exp(a.log_w, b.log_w);
        let proposal = if rng.random::<f64>().ln() < b.log_w - log_w {
            b.proposal
        } else {
            a.proposal
        };
        Some(Subtree {
            inner_p: a.inner_p,
            inner_sharp: a.inner_sharp,
            outer: b.outer,
            outer_sharp: b.outer_sharp,
            rho,
            log_w,
            proposal,
        })
    }

    /// One transition from `current` (momentum is resampled).
    pub fn transition<R: Rng + ?Sized>(&self, rng: &mut R, current: &Point) -> (Point, TransitionStats) {
        let mut start = current.clone();
        self.metric.sample_momentum(rng, &mut start.p);
        let h0 = self.metric.hamiltonian(&start);

        let start_sharp = self.metric.sharp(&start.p);
        // [backward edge, forward edge]
        let mut edges = [start.clone(), start.clone()];
        let mut sharps = [start_sharp.clone(), start_sharp];
        let mut rho = start.p.clone();
        let mut log_w = 0.0;
        let mut proposal = start.clone();
        let mut c = Counters {
            n_leapfrog: 0,
            sum_accept: 0.0,
            diverging: false,
        };
        let mut depth = 0;

        while depth < self.max_depth {
            let forward = rng.random::<bool>();
            let (grow, far) = if forward { (1, 0) } else { (0, 1) };
            let eps = if forward { self.step_size } else { -self.step_size };
            let sub = self.build_tree(rng, &edges[grow], depth, eps, h0, &mut c);
            depth += 1;
            let Some(sub) = sub else { break };

            if rng.random::<f64>().ln() < sub.log_w - log_w {
                proposal = sub.proposal.clone();
            }
            log_w = log_add_exp(log_w, sub.log_w);

            let old_rho = std::mem::take(&mut rho);
            rho = add(&old_rho, &sub.rho);
            // old tree in growth order: inner = far edge, outer = growing edge
            let persist = no_uturn(&sharps[far], &sub.outer_sharp, &rho)
                && no_uturn(&sharps[far], &sub.inner_sharp, &add(&old_rho, &sub.inner_p))
                && no_uturn(&sharps[grow], &sub.outer_sharp, &add(&sub.rho, &edges[grow].p));
            edges[grow] = sub.outer;
            sharps[grow] = sub.outer_sharp;
            if !persist {
                break;
            }
        }

        let accept_stat = if c.n_leapfrog > 0 {
            c.sum_accept / c.n_leapfrog as f64
        } else {
            0.0
        };
        let energy_error = self.metric.hamiltonian(&proposal) - h0;
        let stats = TransitionStats {
            accept_stat,
            n_leapfrog: c.n_leapfrog,
            depth,
            diverging: c.diverging,
            energy_error,
            step_size: self.step_size,
        };
        (proposal, stats)
    }

    /// Heuristic initial step size: double or halve until the one-step
    /// acceptance probability crosses 0.8.
    pub fn find_reasonable_step_size<R: Rng + ?Sized>(&mut self, rng: &mut R, z: &Point) {
        let mut start = z.clone();
        self.metric.sample_momentum(rng, &mut start.p);
        let h0 = self.metric.hamiltonian(&start);
        let delta_h = |eps: f64| -> f64 {
            match leapfrog(self.density, &self.metric, &start, eps) {
                Some(next) => {
                    let h = self.metric.hamiltonian(&next);
                    if h.is_finite() {
                        h0 - h
                    } else {
                        f64::NEG_INFINITY
                    }
                }
                None => f64::NEG_INFINITY,
            }
        };
        let threshold = 0.8f64.ln();
        let mut eps = self.step_size;
        let up = delta_h(eps) > threshold;
        for _ in 0..100 {
            let next = if up { eps * 2.0 } else { eps * 0.5 };
            let dh = delta_h(next);
            if up && !(dh > threshold) || (!up && dh > threshold) {
                eps = if up { eps } else { next };
                break;
            }
            eps = next;
            if !(1e-10..=1e7).contains(&eps) {
                break;
            }
        }
        self.step_size = eps.clamp(1e-10, 1e7);
    }
}
