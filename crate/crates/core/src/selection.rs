//! Epoch-budget client selection.
//!
//! Each round distributes `E_total` local epochs over `K` clients by solving
//!
//! ```text
//! max  sum_k U_k * E_k  -  lambda * sum_k n_k * x_k
//! s.t. sum_k E_k = E_total,   x_k <= E_k <= E_max * x_k,   x_k in {0, 1}
//! ```
//!
//! exactly, by dynamic programming over `(client, remaining budget)`. Ties are
//! broken toward the lexicographically smallest epoch vector.

use crate::error::{Error, Result};

/// Utility stabilizer in `U_k = |D_k| / (L_k + eps)`.
pub const DEFAULT_EPS_U: f64 = 1e-8;

/// `U_k = |D_k| / (L_k + eps_u)` for each client.
pub fn compute_utilities(dataset_sizes: &[usize], losses: &[f64], eps_u: f64) -> Vec<f64> {
    dataset_sizes
        .iter()
        .zip(losses)
        .map(|(&n, &l)| n as f64 / (l + eps_u))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProblem {
    pub utilities: Vec<f64>,
    pub participation: Vec<u64>,
    pub e_total: usize,
    pub e_max: usize,
    /// Fairness weight; 0 gives the utilitarian allocation.
    pub lambda: f64,
}

impl SelectionProblem {
    pub fn num_clients(&self) -> usize {
        self.utilities.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.utilities.len();
        if k == 0 {
            return Err(Error::config("selection needs at least one client"));
        }
        if self.participation.len() != k {
            return Err(Error::config(format!(
                "{k} utilities but {} participation counts",
                self.participation.len()
            )));
        }
        if let Some(u) = self.utilities.iter().find(|u| !u.is_finite() || **u < 0.0) {
            return Err(Error::config(format!("utilities must be finite and >= 0, got {u}")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        let capacity = k * self.e_max;
        if self.e_total > capacity {
            return Err(Error::Infeasible {
                total: self.e_total,
                capacity,
            });
        }
        Ok(())
    }

    /// Contribution of client `k` receiving `epochs` epochs.
    fn value(&self, k: usize, epochs: usize) -> f64 {
        if epochs == 0 {
            0.0
        } else {
            self.utilities[k] * epochs as f64 - self.lambda * self.participation[k] as f64
        }
    }

    /// Objective of an epoch vector, summed in client order.
    pub fn objective(&self, epochs: &[usize]) -> f64 {
        epochs
            .iter()
            .enumerate()
            .fold(0.0, |acc, (k, &e)| acc + self.value(k, e))
    }

    fn plan(&self, epochs: Vec<usize>) -> SelectionPlan {
        SelectionPlan {
            objective: self.objective(&epochs),
            selected: epochs.iter().map(|&e| e > 0).collect(),
            epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    pub epochs: Vec<usize>,
    /// `x_k`: whether client `k` participates this round.
    pub selected: Vec<bool>,
    pub objective: f64,
}

impl SelectionPlan {
    pub fn selected_clients(&self) -> Vec<usize> {
        (0..self.epochs.len()).filter(|&k| self.selected[k]).collect()
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().sum()
    }
}

/// Globally optimal allocation in `O(K * E_total * E_max)`.
pub fn solve_allocation(prob: &SelectionProblem) -> Result<SelectionPlan> {
    prob.validate()?;
    let k = prob.num_clients();
    let budget = prob.e_total;
    // best[i][b]: optimum over clients i.. with exactly b epochs left to assign.
    let mut best = vec![vec![f64::NEG_INFINITY; budget + 1]; k + 1];
    best[k][0] = 0.0;
    for i in (0..k).rev() {
        for b in 0..=budget {
            let mut top = f64::NEG_INFINITY;
            for e in 0..=b.min(prob.e_max) {
                let rest = best[i + 1][b - e];
                if rest == f64::NEG_INFINITY {
                    continue;
                }
                top = top.max(prob.value(i, e) + rest);
            }
            best[i][b] = top;
        }
    }
    // Walk forward taking the smallest epoch count that attains the optimum.
    let mut epochs = Vec::with_capacity(k);
    let mut left = budget;
    for i in 0..k {
        let target = best[i][left];
        let e = (0..=left.min(prob.e_max))
            .find(|&e| {
                let rest = best[i + 1][left - e];
                rest != f64::NEG_INFINITY && prob.value(i, e) + rest == target
            })
            .expect("optimum is attained");
        epochs.push(e);
        left -= e;
    }
    debug_assert_eq!(left, 0);
    Ok(prob.plan(epochs))
}

/// Enumeration bounds for [`brute_force_allocation`].
pub const BRUTE_FORCE_MAX_CLIENTS: usize = 6;
pub const BRUTE_FORCE_MAX_EPOCHS: usize = 8;

/// Exhaustive search over all `(E_max + 1)^K` epoch vectors, visited in
/// lexicographic order so the first maximum found wins ties.
pub fn brute_force_allocation(prob: &SelectionProblem) -> Result<SelectionPlan> {
    if prob.num_clients() > BRUTE_FORCE_MAX_CLIENTS || prob.e_max > BRUTE_FORCE_MAX_EPOCHS {
        return Err(Error::usage(format!(
            "brute force limited to K <= {BRUTE_FORCE_MAX_CLIENTS}, E_max <= {BRUTE_FORCE_MAX_EPOCHS}"
        )));
    }
    prob.validate()?;
    let k = prob.num_clients();
    let mut current = vec![0usize; k];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if current.iter().sum::<usize>() == prob.e_total {
            let obj = prob.objective(&current);
            if best.as_ref().is_none_or(|(b, _)| obj > *b) {
                best = Some((obj, current.clone()));
            }
        }
        // odometer increment, last digit fastest => lexicographic order
        let mut pos = k;
        loop {
            if pos == 0 {
                let (_, epochs) = best.expect("feasible problem has a solution");
                return Ok(prob.plan(epochs));
            }
            pos -= 1;
            if current[pos] < prob.e_max {
                current[pos] += 1;
                current[pos + 1..].iter_mut().for_each(|v| *v = 0);
                break;
            }
        }
    }
}

/// Every client trains `E_total / K` epochs; the remainder goes one extra
/// epoch each to the lowest-indexed clients.
pub fn baseline_plan(num_clients: usize, e_total: usize) -> Result<SelectionPlan> {
    if num_clients == 0 {
        return Err(Error::config("baseline needs at least one client"));
    }
    if e_total < num_clients {
        return Err(Error::config(format!(
            "baseline needs E_total >= K so every client trains, got E_total = {e_total}, K = {num_clients}"
        )));
    }
    let base = e_total / num_clients;
    let extra = e_total % num_clients;
    let epochs: Vec<usize> = (0..num_clients).map(|k| base + usize::from(k < extra)).collect();
    Ok(SelectionPlan {
        selected: vec![true; num_clients],
        objective: f64::NAN,
        epochs,
    })
}

/// How the fairness weight is chosen each round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    /// `lambda = mean(U) * E_total / (2K)`, recomputed every round.
    Adaptive,
    Constant(f64),
}

impl LambdaMode {
    pub fn resolve(&self, utilities: &[f64], e_total: usize) -> f64 {
        match *self {
            LambdaMode::Constant(v) => v,
            LambdaMode::Adaptive => {
                let k = utilities.len() as f64;
                let mean = utilities.iter().sum::<f64>() / k;
                mean * e_total as f64 / (2.0 * k)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Baseline,
    Utilitarian,
    ProportionalFairness(LambdaMode),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Utilitarian => "utilitarian",
            Strategy::ProportionalFairness(_) => "prop_fair",
        }
    }

    /// Plan one round from the clients' dataset sizes, last reported losses
    /// and participation counts.
    pub fn plan(
        &self,
        dataset_sizes: &[usize],
        losses: &[f64],
        participation: &[u64],
        e_total: usize,
        e_max: usize,
        eps_u: f64,
    ) -> Result<SelectionPlan> {
        let utilities = compute_utilities(dataset_sizes, losses, eps_u);
        let lambda = match self {
            Strategy::Baseline => return baseline_plan(dataset_sizes.len(), e_total),
            Strategy::Utilitarian => 0.0,
            Strategy::ProportionalFairness(mode) => mode.resolve(&utilities, e_total),
        };
        solve_allocation(&SelectionProblem {
            utilities,
            participation: participation.to_vec(),
            e_total,
            e_max,
            lambda,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn problem(u: &[f64], n: &[u64], e_total: usize, e_max: usize, lambda: f64) -> SelectionProblem {
        SelectionProblem {
            utilities: u.to_vec(),
            participation: n.to_vec(),
            e_total,
            e_max,
            lambda,
        }
    }

    /// Dyadic utilities keep every objective exact, so ties are real ties.
    fn random_problem(rng: &mut crate::rng::Rng, lambdas: &[f64]) -> SelectionProblem {
        let k = rng.random_range(1..=5);
        let e_max = rng.random_range(1..=6);
        let e_total = rng.random_range(0..=(k * e_max).min(10));
        problem(
            &(0..k).map(|_| rng.random_range(0..80) as f64 / 4.0).collect::<Vec<_>>(),
            &(0..k).map(|_| rng.random_range(0..6)).collect::<Vec<_>>(),
            e_total,
            e_max,
            lambdas[rng.random_range(0..lambdas.len())],
        )
    }

    #[test]
    fn utilities_formula() {
        let u = compute_utilities(&[100], &[1.0], DEFAULT_EPS_U);
        assert!((u[0] - 100.0).abs() < 1e-5);
        let u = compute_utilities(&[10, 30, 20], &[0.5, 0.5, 0.5], DEFAULT_EPS_U);
        assert!(u[1] > u[2] && u[2] > u[0]);
        let u = compute_utilities(&[40, 7], &[1.0, 1.0], DEFAULT_EPS_U);
        assert_eq!(u, vec![40.0 / (1.0 + DEFAULT_EPS_U), 7.0 / (1.0 + DEFAULT_EPS_U)]);
    }

    #[test]
    fn worked_example() {
        // brute-force enumeration of the 4^3 vectors gives (3, 1, 0) with 5*3 + 3*1 = 18
        let p = problem(&[5.0, 3.0, 1.0], &[0, 0, 0], 4, 3, 0.0);
        let plan = solve_allocation(&p).unwrap();
        assert_eq!(plan.epochs, vec![3, 1, 0]);
        assert_eq!(plan.objective, 18.0);
        assert_eq!(plan.selected, vec![true, true, false]);
        assert_eq!(brute_force_allocation(&p).unwrap(), plan);
    }

    #[test]
    fn forced_unique_point() {
        for lambda in [0.0, 1.0, 1e6] {
            let p = problem(&[1.0, 9.0], &[4, 0], 2, 1, lambda);
            assert_eq!(solve_allocation(&p).unwrap().epochs, vec![1, 1]);
            assert_eq!(brute_force_allocation(&p).unwrap().epochs, vec![1, 1]);
        }
    }

    #[test]
    fn huge_lambda_minimizes_participants() {
        let u = [3.0, 5.0, 4.0, 2.0];
        let e_max = 6;
        let lambda = 5.0 * e_max as f64 * 4.0;
        let p = problem(&u, &[2, 2, 2, 2], 5, e_max, lambda);
        let plan = solve_allocation(&p).unwrap();
        assert_eq!(plan.selected_clients(), vec![1]);
        assert_eq!(plan.epochs[1], 5);
    }

    #[test]
    fn infeasible_rejected_by_both() {
        let p = problem(&[1.0, 2.0], &[0, 0], 5, 2, 0.0);
        assert!(matches!(solve_allocation(&p), Err(Error::Infeasible { total: 5, capacity: 4 })));
        assert!(matches!(brute_force_allocation(&p), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn brute_force_bounds() {
        let p = problem(&[1.0; 7], &[0; 7], 3, 2, 0.0);
        assert!(matches!(brute_force_allocation(&p), Err(Error::Usage(_))));
        let p = problem(&[1.0; 2], &[0; 2], 3, 9, 0.0);
        assert!(matches!(brute_force_allocation(&p), Err(Error::Usage(_))));
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let p = problem(&[2.0, 2.0, 2.0], &[0, 0, 0], 3, 2, 0.0);
        assert_eq!(solve_allocation(&p).unwrap().epochs, vec![0, 1, 2]);
        assert_eq!(brute_force_allocation(&p).unwrap().epochs, vec![0, 1, 2]);
    }

    #[test]
    fn baseline_plans() {
        assert_eq!(baseline_plan(10, 30).unwrap().epochs, vec![3; 10]);
        assert_eq!(baseline_plan(4, 10).unwrap().epochs, vec![3, 3, 2, 2]);
        assert_eq!(baseline_plan(1, 7).unwrap().epochs, vec![7]);
        assert!(baseline_plan(4, 3).is_err());
        assert!(baseline_plan(4, 10).unwrap().selected.iter().all(|&s| s));
    }

    #[test]
    fn adaptive_lambda() {
        let lambda = LambdaMode::Adaptive.resolve(&[10.0, 30.0], 12);
        assert_eq!(lambda, 20.0 * 12.0 / 4.0);
        assert_eq!(LambdaMode::Constant(2.5).resolve(&[1.0], 3), 2.5);
    }

    #[test]
    fn oracle_agreement_on_random_instances() {
        let mut rng = seeded(404);
        for _ in 0..300 {
            let p = random_problem(&mut rng, &[0.0, 0.5, 5.0, 50.0]);
            let dp = solve_allocation(&p).unwrap();
            let bf = brute_force_allocation(&p).unwrap();
            assert_eq!(dp.objective, bf.objective, "{p:?}");
            assert_eq!(dp, bf, "{p:?}");
        }
    }

    #[test]
    fn lambda_does_not_raise_max_selected_participation() {
        let mut rng = seeded(77);
        for _ in 0..300 {
            let mut p = random_problem(&mut rng, &[0.0]);
            if p.e_total == 0 {
                continue;
            }
            let mut last_max = u64::MAX;
            for lambda in [0.0, 0.5, 2.0, 5.0, 20.0, 50.0, 500.0] {
                p.lambda = lambda;
                let plan = solve_allocation(&p).unwrap();
                let max_n = plan
                    .selected_clients()
                    .iter()
                    .map(|&k| p.participation[k])
                    .max()
                    .unwrap();
                assert!(max_n <= last_max, "{p:?} at lambda {lambda}");
                last_max = max_n;
            }
        }
    }

    proptest! {
        #[test]
        fn plans_respect_budget_and_linking(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let p = random_problem(&mut rng, &[0.0, 0.5, 5.0, 50.0]);
            let plan = solve_allocation(&p).unwrap();
            prop_assert_eq!(plan.total_epochs(), p.e_total);
            for k in 0..p.num_clients() {
                prop_assert_eq!(plan.selected[k], plan.epochs[k] > 0);
                prop_assert!(plan.epochs[k] <= p.e_max);
            }
        }

        #[test]
        fn scaling_utilities_and_lambda_keeps_plan(seed in any::<u64>(), c in 1u32..8) {
            let mut rng = seeded(seed);
            let p = random_problem(&mut rng, &[0.0, 0.5, 5.0, 50.0]);
            let c = c as f64;
            let scaled = SelectionProblem {
                utilities: p.utilities.iter().map(|u| u * c).collect(),
                lambda: p.lambda * c,
                ..p.clone()
            };
            prop_assert_eq!(solve_allocation(&p).unwrap().epochs, solve_allocation(&scaled).unwrap().epochs);
        }
    }
}
