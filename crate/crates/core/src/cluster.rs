//! Query-semantic clustering and cluster-aware batch plans.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::Corpus;
use crate::error::{Error, Result};

pub const CLUSTERS_VERSION: &str = "cu-clusters/1";
pub const DEFAULT_RATIO: f64 = 1.2;

/// Sentence embeddings when every sample has one, otherwise the token mean of
/// the raw query features.
pub fn embed_queries(corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    let with: Vec<&str> = corpus
        .samples
        .iter()
        .filter(|s| s.sentence.is_some())
        .map(|s| s.id.as_str())
        .collect();
    if !with.is_empty() && with.len() != corpus.len() {
        let without: Vec<&str> = corpus
            .samples
            .iter()
            .filter(|s| s.sentence.is_none())
            .map(|s| s.id.as_str())
            .collect();
        return Err(Error::Invalid(format!(
            "sentence embeddings present for some samples only; missing for: {}",
            without.join(", ")
        )));
    }
    Ok(corpus
        .samples
        .iter()
        .map(|s| match &s.sentence {
            Some(e) => e.clone(),
            None => s.query.col_mean(),
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(point, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// multi-membership threshold on distance ratios, ≥ 1
    pub ratio: f64,
    /// inertia after each assignment step
    pub inertia: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn with_ratio(mut self, ratio: f64) -> Result<Self> {
        if !(ratio >= 1.0) || !ratio.is_finite() {
            return Err(Error::Config(format!("membership ratio must be ≥ 1, got {ratio}")));
        }
        self.ratio = ratio;
        Ok(self)
    }
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 clusters, got {k}")));
    }
    if points.len() < k {
        return Err(Error::Invalid(format!(
            "cannot form {k} clusters from {} samples",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Invalid("embeddings must be finite and equally sized".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            // only duplicates left; take the first point not yet a centroid
            (0..points.len())
                .find(|&i| !centroids.iter().any(|c| c == &points[i]))
                .unwrap_or(0)
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }

    let mut labels: Vec<usize> = vec![usize::MAX; points.len()];
    let mut inertia = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            changed |= labels[i] != c;
            labels[i] = c;
            dists[i] = d;
            total += d;
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut taken = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // the worst-served point among clusters that can spare one
                let far = (0..points.len())
                    .filter(|&i| counts[labels[i]] > 1 && !taken.contains(&i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    });
                if let Some(i) = far {
                    taken.insert(i);
                    counts[labels[i]] -= 1;
                    centroids[c] = points[i].clone();
                }
            }
        }
    }
    Ok(ClusterModel {
        centroids,
        ratio: DEFAULT_RATIO,
        inertia,
    })
}

/// Member clusters per sample, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub members: Vec<Vec<usize>>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn primary(&self, sample: usize) -> usize {
        self.members[sample][0]
    }

    /// Samples belonging to each cluster, in sample order.
    pub fn cluster_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, m) in self.members.iter().enumerate() {
            for &c in m {
                out[c].push(i);
            }
        }
        out
    }
}

/// Joins each sample to its nearest centroid and to every centroid within
/// `ratio` times that distance.
pub fn assign(model: &ClusterModel, points: &[Vec<f64>]) -> ClusterAssignment {
    let members = points
        .iter()
        .map(|p| {
            let d: Vec<f64> = model.centroids.iter().map(|c| sq_dist(p, c).sqrt()).collect();
            let (primary, _) = nearest(p, &model.centroids);
            let limit = model.ratio * d[primary];
            let mut others: Vec<usize> = (0..d.len()).filter(|&c| c != primary && d[c] <= limit).collect();
            others.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
            std::iter::once(primary).chain(others).collect()
        })
        .collect();
    ClusterAssignment {
        members,
        k: model.k(),
    }
}

/// One training batch: sample indices and the cluster each one stands for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub samples: Vec<usize>,
    pub tags: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
}

pub fn check_batch_shape(batch_size: usize, clusters: usize) -> Result<()> {
    if clusters == 0 || batch_size % clusters != 0 {
        return Err(Error::Config(format!(
            "B must be divisible by N (B={batch_size}, N={clusters})"
        )));
    }
    if batch_size / clusters < 2 {
        return Err(Error::Config(format!(
            "B/N must be at least 2 so every sample has a same-cluster peer (B={batch_size}, N={clusters})"
        )));
    }
    Ok(())
}

/// Batches of `batch_size` drawn from `clusters` distinct clusters each.
///
/// Clusters are picked without replacement with probability proportional to
/// their size; members come from a per-cluster shuffled queue so every sample
/// is visited before any repeats. Batches are added until every sample has
/// appeared at least once.
pub fn make_batches(
    assignment: &ClusterAssignment,
    batch_size: usize,
    clusters: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchPlan> {
    check_batch_shape(batch_size, clusters)?;
    let per = batch_size / clusters;
    let groups = assignment.cluster_members();
    let live: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
    if live.len() < clusters {
        return Err(Error::Config(format!(
            "N={clusters} exceeds the {} non-empty clusters",
            live.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);

    let mut queues: Vec<Vec<usize>> = groups.clone();
    for q in queues.iter_mut() {
        q.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; groups.len()];
    let n = assignment.members.len();
    let mut seen = vec![false; n];
    let mut unseen = n;
    let mut batches = Vec::new();
    // generous bound; coverage normally completes within a few passes
    let cap = 50 * n.div_ceil(batch_size).max(1);
    while unseen > 0 && batches.len() < cap {
        let mut pool = live.clone();
        let mut samples = Vec::with_capacity(batch_size);
        let mut tags = Vec::with_capacity(batch_size);
        for _ in 0..clusters {
            let total: usize = pool.iter().map(|&c| groups[c].len()).sum();
            let mut r = rng.random_range(0..total);
            let slot = pool
                .iter()
                .position(|&c| {
                    let s = groups[c].len();
                    if r < s {
                        true
                    } else {
                        r -= s;
                        false
                    }
                })
                .expect("r < total");
            let c = pool.swap_remove(slot);
            let members = &groups[c];
            if members.len() < per {
                // too small: everyone once, then repeats drawn at random
                samples.extend(members);
                for _ in members.len()..per {
                    samples.push(members[rng.random_range(0..members.len())]);
                }
            } else {
                let mut taken = 0;
                let mut skips = 0;
                while taken < per {
                    if cursor[c] == members.len() {
                        queues[c].shuffle(&mut rng);
                        cursor[c] = 0;
                    }
                    let s = queues[c][cursor[c]];
                    cursor[c] += 1;
                    // a multi-member sample may already stand for another cluster
                    if samples.contains(&s) && skips < members.len() {
                        skips += 1;
                        continue;
                    }
                    samples.push(s);
                    taken += 1;
                }
            }
            tags.extend(std::iter::repeat_n(c, per));
        }
        for &s in &samples {
            if !seen[s] {
                seen[s] = true;
                unseen -= 1;
            }
        }
        batches.push(Batch { samples, tags });
    }
    Ok(BatchPlan { batches })
}

/// Line-delimited `sample-id member,member,...` under a `cu-clusters/1` header.
pub fn save_cluster_dump(ids: &[String], assignment: &ClusterAssignment, path: &Path) -> Result<()> {
    if ids.len() != assignment.members.len() {
        return Err(Error::Invalid("id list and assignment differ in length".into()));
    }
    let mut out = format!("{CLUSTERS_VERSION}\n");
    for (id, m) in ids.iter().zip(&assignment.members) {
        let list: Vec<String> = m.iter().map(usize::to_string).collect();
        writeln!(out, "{id} {}", list.join(",")).expect("string write");
    }
    crate::write_atomic(path, out.as_bytes())
}

pub fn load_cluster_dump(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CLUSTERS_VERSION) {
        return Err(Error::format(path, format!("missing `{CLUSTERS_VERSION}` header")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, list) = l
                .split_once(' ')
                .ok_or_else(|| Error::format(path, format!("malformed line `{l}`")))?;
            let members = list
                .split(',')
                .map(|v| v.parse().map_err(|_| Error::format(path, format!("bad cluster id in `{l}`"))))
                .collect::<Result<Vec<usize>>>()?;
            Ok((id.to_owned(), members))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, GenConfig};

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [[0.0, 0.0], [20.0, 5.0], [-10.0, 15.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            pts.push(vec![
                centres[c][0] + rng.random_range(-1.0..1.0),
                centres[c][1] + rng.random_range(-1.0..1.0),
            ]);
            truth.push(c);
        }
        (pts, truth)
    }

    #[test]
    fn separable_blobs_are_recovered() {
        let (pts, truth) = blobs(1);
        let model = kmeans(&pts, 3, 4, 100).unwrap();
        let a = assign(&model.with_ratio(1.0).unwrap(), &pts);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(truth[i] == truth[j], a.primary(i) == a.primary(j));
            }
        }
        let two = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.2]];
        let a = assign(&kmeans(&two, 2, 0, 10).unwrap(), &two);
        assert_eq!(a.primary(0), a.primary(1));
        assert_ne!(a.primary(0), a.primary(2));
    }

    #[test]
    fn k_equal_to_n_gives_zero_inertia() {
        let (pts, _) = blobs(2);
        let pts = &pts[..12];
        let model = kmeans(pts, 12, 1, 50).unwrap();
        assert_eq!(*model.inertia.last().unwrap(), 0.0);
        assert!(kmeans(pts, 13, 1, 50).is_err());
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let pts: Vec<Vec<f64>> = (0..150)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let m = kmeans(&pts, 7, seed, 100).unwrap();
            assert!(m.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", m.inertia);
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (pts, _) = blobs(5);
        assert_eq!(kmeans(&pts, 4, 9, 50).unwrap(), kmeans(&pts, 4, 9, 50).unwrap());
    }

    fn model_1d(centroids: &[f64], ratio: f64) -> ClusterModel {
        ClusterModel {
            centroids: centroids.iter().map(|&c| vec![c]).collect(),
            ratio,
            inertia: Vec::new(),
        }
    }

    #[test]
    fn membership_ratio_rule() {
        let pts: Vec<Vec<f64>> = [0.5, 4.0, 5.0, 9.5].iter().map(|&x| vec![x]).collect();
        let a = assign(&model_1d(&[0.0, 10.0], 1.0), &pts);
        assert_eq!(a.members, vec![vec![0], vec![0], vec![0, 1], vec![1]]);
        // distances at x=4: 4 and 6, ratio 1.5 admits the second
        let a = assign(&model_1d(&[0.0, 10.0], 1.5), &pts);
        assert_eq!(a.members, vec![vec![0], vec![0, 1], vec![0, 1], vec![1]]);
        let a = assign(&model_1d(&[10.0, 0.0], 1.0), &[vec![5.0]]);
        assert_eq!(a.members, vec![vec![0, 1]]);
    }

    fn hard_assignment(sizes: &[usize]) -> ClusterAssignment {
        let members = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &s)| std::iter::repeat_n(vec![c], s))
            .collect();
        ClusterAssignment { members, k: sizes.len() }
    }

    #[test]
    fn batches_have_exact_cluster_layout_and_cover_everyone() {
        let a = hard_assignment(&[9, 14, 3, 1, 20, 7]);
        for epoch in 0..10 {
            let plan = make_batches(&a, 8, 4, 5, epoch).unwrap();
            let mut covered = vec![false; a.members.len()];
            for b in &plan.batches {
                assert_eq!(b.samples.len(), 8);
                let mut tags = b.tags.clone();
                tags.dedup();
                assert_eq!(tags.len(), 4);
                let mut uniq = tags.clone();
                uniq.sort();
                uniq.dedup();
                assert_eq!(uniq.len(), 4);
                for (s, t) in b.samples.iter().zip(&b.tags) {
                    assert!(a.members[*s].contains(t));
                    covered[*s] = true;
                }
            }
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn singleton_cluster_repeats_its_member() {
        let a = hard_assignment(&[1, 4]);
        let plan = make_batches(&a, 4, 2, 0, 0).unwrap();
        for b in &plan.batches {
            let picked: Vec<usize> = (0..4).filter(|&i| b.tags[i] == 0).map(|i| b.samples[i]).collect();
            assert_eq!(picked, vec![0, 0]);
        }
    }

    #[test]
    fn batch_shape_contract() {
        let a = hard_assignment(&[5, 5, 5, 5]);
        let err = make_batches(&a, 6, 4, 0, 0).unwrap_err();
        assert!(err.to_string().contains("B must be divisible by N"));
        assert!(make_batches(&a, 4, 4, 0, 0).is_err());
        assert!(make_batches(&hard_assignment(&[5, 5]), 6, 3, 0, 0).is_err());
    }

    #[test]
    fn plans_are_fixed_by_seed_and_epoch() {
        let a = hard_assignment(&[9, 14, 3, 20, 7]);
        let p = make_batches(&a, 6, 3, 11, 2).unwrap();
        assert_eq!(p, make_batches(&a, 6, 3, 11, 2).unwrap());
        assert_ne!(p, make_batches(&a, 6, 3, 11, 3).unwrap());
        assert_ne!(p, make_batches(&a, 6, 3, 12, 2).unwrap());
    }

    #[test]
    fn query_embedding_sources() {
        let cfg = GenConfig {
            num_samples: 6,
            ..GenConfig::default()
        };
        let mut corpus = generate_synthetic(&cfg).unwrap();
        let e = embed_queries(&corpus).unwrap();
        assert_eq!(e[0], corpus.samples[0].sentence.clone().unwrap());

        corpus.samples[2].sentence = None;
        corpus.samples[4].sentence = None;
        let err = embed_queries(&corpus).unwrap_err().to_string();
        assert!(err.contains(&corpus.samples[2].id) && err.contains(&corpus.samples[4].id));

        for s in corpus.samples.iter_mut() {
            s.sentence = None;
            let row = s.query.row(0).to_vec();
            let m = s.query.rows();
            s.query = crate::tensorcore::Tensor::from_rows(&vec![row; m]).unwrap();
        }
        let e = embed_queries(&corpus).unwrap();
        for (a, b) in e[1].iter().zip(corpus.samples[1].query.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dump_round_trip() {
        let a = hard_assignment(&[2, 1]);
        let a = ClusterAssignment {
            members: vec![vec![0], vec![0, 1], vec![1]],
            ..a
        };
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.txt");
        save_cluster_dump(&ids, &a, &path).unwrap();
        let back = load_cluster_dump(&path).unwrap();
        assert_eq!(back[1], ("b".to_string(), vec![0, 1]));
        assert_eq!(back.len(), 3);
    }
}
