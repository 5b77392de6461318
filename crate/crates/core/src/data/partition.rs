use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::data::Corpus;
use crate::error::{Error, Result};

/// Redraws allowed before giving up on a partition that leaves a client empty.
pub const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Disjoint, exhaustive assignment of corpus indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

/// Shuffle `0..n` and hold out the first `round(n * fraction)` indices
/// (at least one when `fraction > 0`). Returns `(train, validation)`, each sorted.
pub fn train_validation_split<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!("validation fraction must be in [0, 1), got {fraction}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut n_val = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 {
        n_val = n_val.max(1);
    }
    if n_val >= n {
        return Err(Error::config(format!("validation split of {n_val} leaves no training images")));
    }
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Split `total` items by proportions with largest-remainder rounding;
/// remainder ties go to the lower index.
fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    (sum > 0.0 && sum.is_finite()).then(|| draws.iter().map(|d| d / sum).collect())
}

/// Per-class Dirichlet split of the whole corpus.
pub fn dirichlet_partition<R: Rng + ?Sized>(corpus: &Corpus, clients: usize, alpha: f64, rng: &mut R) -> Result<Partition> {
    let all: Vec<usize> = (0..corpus.len()).collect();
    dirichlet_partition_subset(corpus, &all, clients, alpha, rng)
}

/// For each class, draw `p ~ Dirichlet(alpha * 1_K)` and deal that class's
/// (shuffled) images out in blocks of largest-remainder sizes. The whole draw
/// is repeated if some client ends up with no images.
pub fn dirichlet_partition_subset<R: Rng + ?Sized>(
    corpus: &Corpus,
    subset: &[usize],
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Partition> {
    let labels = corpus
        .labels()
        .ok_or_else(|| Error::config("Dirichlet partitioning needs a labeled corpus"))?;
    if clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("Dirichlet concentration must be > 0, got {alpha}")));
    }
    if subset.len() < clients {
        return Err(Error::config(format!(
            "{} images cannot give each of {clients} clients one",
            subset.len()
        )));
    }
    let num_classes = subset.iter().map(|&i| labels[i]).max().unwrap_or(0) + 1;
    let by_class: Vec<Vec<usize>> = (0..num_classes)
        .map(|c| subset.iter().copied().filter(|&i| labels[i] == c).collect())
        .collect();

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut assignment = vec![Vec::new(); clients];
        let mut failed = false;
        for members in by_class.iter().filter(|m| !m.is_empty()) {
            let proportions = if clients == 1 {
                vec![1.0]
            } else {
                match dirichlet(clients, alpha, rng) {
                    Some(p) => p,
                    None => {
                        failed = true;
                        break;
                    }
                }
            };
            let mut members = members.clone();
            members.shuffle(rng);
            let mut start = 0;
            for (k, count) in largest_remainder(members.len(), &proportions).into_iter().enumerate() {
                assignment[k].extend_from_slice(&members[start..start + count]);
                start += count;
            }
        }
        if failed || assignment.iter().any(Vec::is_empty) {
            continue;
        }
        assignment.iter_mut().for_each(|a| a.sort_unstable());
        return Ok(Partition {
            clients: assignment,
            alpha,
        });
    }
    Err(Error::config(format!(
        "no partition with every client nonempty after {MAX_PARTITION_ATTEMPTS} Dirichlet draws (alpha = {alpha}, K = {clients})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn labeled(classes: usize, per_class: usize) -> Corpus {
        let images = vec![Tensor::filled(&[1, 1, 1], 0.5); classes * per_class];
        let labels = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        Corpus::new(images, Some(labels)).unwrap()
    }

    #[test]
    fn single_client_gets_everything() {
        let corpus = labeled(3, 7);
        let p = dirichlet_partition(&corpus, 1, 1.0, &mut seeded(0)).unwrap();
        assert_eq!(p.clients, vec![(0..21).collect::<Vec<_>>()]);
    }

    #[test]
    fn unlabeled_rejected() {
        let corpus = Corpus::new(vec![Tensor::filled(&[1, 1, 1], 0.5); 4], None).unwrap();
        assert!(matches!(
            dirichlet_partition(&corpus, 2, 1.0, &mut seeded(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn concentrated_dirichlet_is_nearly_even() {
        let corpus = labeled(2, 1000);
        let p = dirichlet_partition(&corpus, 4, 1e6, &mut seeded(9)).unwrap();
        for size in p.sizes() {
            assert!((size as f64 - 500.0).abs() <= 25.0, "{:?}", p.sizes());
        }
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(largest_remainder(10, &[0.25, 0.25, 0.5]), vec![3, 2, 5]);
        assert_eq!(largest_remainder(7, &[0.5, 0.5]), vec![4, 3]);
        assert_eq!(largest_remainder(3, &[0.1, 0.6, 0.3]), vec![0, 2, 1]);
    }

    #[test]
    fn split_is_disjoint() {
        let (train, val) = train_validation_split(50, 0.2, &mut seeded(4)).unwrap();
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 40);
        let mut all = [train, val].concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(train_validation_split(50, 1.0, &mut seeded(4)).is_err());
    }

    proptest! {
        #[test]
        fn exhaustive_disjoint_reproducible(seed in any::<u64>(), k in 1usize..6, alpha in 0.1f64..10.0) {
            let corpus = labeled(4, 15);
            let a = dirichlet_partition(&corpus, k, alpha, &mut seeded(seed)).unwrap();
            let b = dirichlet_partition(&corpus, k, alpha, &mut seeded(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.clients.iter().all(|c| !c.is_empty()));
            let mut all: Vec<usize> = a.clients.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..60).collect::<Vec<_>>());
        }
    }
}
