//! Two-stage discriminative selection of supplemental source images.
//!
//! Stage 1 keeps the N source candidates whose feature vectors are nearest to
//! any starved-class exemplar; stage 2 keeps the M of those farthest from any
//! large-class exemplar. Distance to a class is the minimum L2 distance over
//! its exemplars, and all ties break by ascending candidate id so the result
//! is independent of input order and parallelism.

use std::collections::BTreeMap;

use rand::seq::index::sample as index_sample;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::rng::stage_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SelectionConfig {
    /// Stage-1 shortlist size N.
    pub n_closest: usize,
    /// Stage-2 keep size M.
    pub m_keep: usize,
    /// Size of the source subsample D̂_s.
    pub subsample_k: usize,
    /// Cap on large-class exemplars used for stage-2 distances.
    pub large_ref_cap: usize,
    pub seed: u64,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_closest == 0 || self.m_keep == 0 || self.subsample_k == 0 {
            return Err(Error::InvalidArgument(
                "selection sizes must be >= 1".to_string(),
            ));
        }
        if self.large_ref_cap == 0 {
            return Err(Error::InvalidArgument(
                "large_ref_cap must be >= 1".to_string(),
            ));
        }
        if !(self.m_keep <= self.n_closest && self.n_closest <= self.subsample_k) {
            return Err(Error::InvalidArgument(format!(
                "selection sizes must satisfy M <= N <= subsample_k, got M={} N={} k={}",
                self.m_keep, self.n_closest, self.subsample_k
            )));
        }
        Ok(())
    }
}

/// Outcome of the two-stage selection, with full distance diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// The supplemental set U, ordered by descending distance to the large
    /// class (ties ascending id).
    pub selected_ids: Vec<u64>,
    /// Stage-1 shortlist, ordered by ascending distance to the starved class
    /// (ties ascending id).
    pub shortlist_ids: Vec<u64>,
    /// Min distance to a starved exemplar, for every candidate.
    pub d_starved: BTreeMap<u64, f64>,
    /// Min distance to a large exemplar, for shortlist members only.
    pub d_large: BTreeMap<u64, f64>,
}

/// Seeded uniform subsample of `min(k, len)` ids, returned ascending.
pub fn subsample_source(source_ids: &[u64], k: usize, seed: u64) -> Result<Vec<u64>> {
    if source_ids.is_empty() {
        return Err(Error::EmptyInput("source id list".to_string()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("subsample k must be >= 1".to_string()));
    }
    if k >= source_ids.len() {
        let mut all = source_ids.to_vec();
        all.sort_unstable();
        return Ok(all);
    }
    let mut rng = stage_rng(seed, "subsample_source");
    let mut picked: Vec<u64> = index_sample(&mut rng, source_ids.len(), k)
        .into_iter()
        .map(|i| source_ids[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Euclidean distance between two feature vectors of equal length.
pub fn l2_distance(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    if u.values.len() != v.values.len() {
        return Err(Error::LengthMismatch {
            left: u.values.len(),
            right: v.values.len(),
        });
    }
    let sum_sq: f64 = u
        .values
        .iter()
        .zip(&v.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum_sq.sqrt())
}

/// Minimum L2 distance from `v` to any reference, with the argmin index.
/// Ties resolve to the lowest index.
pub fn min_dist_to_class(v: &FeatureVector, refs: &[FeatureVector]) -> Result<(f64, usize)> {
    if refs.is_empty() {
        return Err(Error::EmptyInput("reference vector list".to_string()));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (i, r) in refs.iter().enumerate() {
        let d = l2_distance(v, r)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best)
}

/// Run the two-stage selection over `candidates`.
pub fn select_supplement(
    candidates: &BTreeMap<u64, FeatureVector>,
    cs_refs: &[FeatureVector],
    cl_refs: &[FeatureVector],
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::EmptyInput("candidate set".to_string()));
    }
    if cs_refs.is_empty() {
        return Err(Error::EmptyInput("starved reference set".to_string()));
    }
    if cl_refs.is_empty() {
        return Err(Error::EmptyInput("large reference set".to_string()));
    }

    // Stage 1: distance of every candidate to the starved class.
    let ordered: Vec<(&u64, &FeatureVector)> = candidates.iter().collect();
    let d_starved_vec: Vec<(u64, f64)> = ordered
        .par_iter()
        .map(|(id, fv)| min_dist_to_class(fv, cs_refs).map(|(d, _)| (**id, d)))
        .collect::<Result<_>>()?;
    let d_starved: BTreeMap<u64, f64> = d_starved_vec.iter().copied().collect();

    let mut stage1: Vec<(u64, f64)> = d_starved_vec;
    stage1.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    stage1.truncate(cfg.n_closest);
    let shortlist_ids: Vec<u64> = stage1.iter().map(|(id, _)| *id).collect();

    // Stage 2: distance of shortlist members to the large class.
    let d_large_vec: Vec<(u64, f64)> = shortlist_ids
        .par_iter()
        .map(|id| {
            min_dist_to_class(&candidates[id], cl_refs).map(|(d, _)| (*id, d))
        })
        .collect::<Result<_>>()?;
    let d_large: BTreeMap<u64, f64> = d_large_vec.iter().copied().collect();

    let mut stage2 = d_large_vec;
    stage2.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    stage2.truncate(cfg.m_keep.min(shortlist_ids.len()));
    let selected_ids: Vec<u64> = stage2.iter().map(|(id, _)| *id).collect();

    Ok(SelectionResult {
        selected_ids,
        shortlist_ids,
        d_starved,
        d_large,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector {
            values: values.to_vec(),
            filters: 1,
            bins: values.len(),
        }
    }

    fn cfg(n: usize, m: usize, k: usize) -> SelectionConfig {
        SelectionConfig {
            n_closest: n,
            m_keep: m,
            subsample_k: k,
            large_ref_cap: 100,
            seed: 0,
        }
    }

    #[test]
    fn subsample_caps_at_full_list() {
        let ids = vec![5, 3, 9];
        assert_eq!(subsample_source(&ids, 10, 0).unwrap(), vec![3, 5, 9]);
    }

    #[test]
    fn subsample_is_seed_deterministic() {
        let ids: Vec<u64> = (0..1000).collect();
        let a = subsample_source(&ids, 100, 4).unwrap();
        let b = subsample_source(&ids, 100, 4).unwrap();
        let c = subsample_source(&ids, 100, 5).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let single = subsample_source(&ids, 1, 9).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single, subsample_source(&ids, 1, 9).unwrap());
    }

    #[test]
    fn subsample_rejects_empty() {
        assert!(subsample_source(&[], 3, 0).is_err());
    }

    #[test]
    fn l2_basics() {
        assert_eq!(l2_distance(&fv(&[1.0, 2.0]), &fv(&[1.0, 2.0])).unwrap(), 0.0);
        let d = l2_distance(&fv(&[0.0, 1.0]), &fv(&[1.0, 0.0])).unwrap();
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(l2_distance(&fv(&[1.0]), &fv(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn l2_matches_brute_force_sum() {
        use rand::Rng;
        let mut rng = crate::rng::stage_rng(1, "l2_test");
        for _ in 0..20 {
            let a: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut sq = 0.0;
            for i in 0..10 {
                sq += (a[i] - b[i]) * (a[i] - b[i]);
            }
            let got = l2_distance(&fv(&a), &fv(&b)).unwrap();
            assert!((got - sq.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn min_dist_identity_and_tie_break() {
        let refs = vec![fv(&[0.0]), fv(&[2.0])];
        let (d, i) = min_dist_to_class(&fv(&[0.5]), &refs).unwrap();
        assert_eq!((d, i), (0.5, 0));
        let (d, i) = min_dist_to_class(&fv(&[2.0]), &refs).unwrap();
        assert_eq!((d, i), (0.0, 1));
        // equidistant: lowest index wins
        let (_, i) = min_dist_to_class(&fv(&[1.0]), &refs).unwrap();
        assert_eq!(i, 0);
        assert!(min_dist_to_class(&fv(&[1.0]), &[]).is_err());
    }

    #[test]
    fn min_dist_matches_exhaustive_scan() {
        use rand::Rng;
        let mut rng = crate::rng::stage_rng(2, "min_dist_test");
        let refs: Vec<FeatureVector> = (0..50)
            .map(|_| fv(&(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let q = fv(&(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let (d, i) = min_dist_to_class(&q, &refs).unwrap();
        let mut best = f64::INFINITY;
        let mut best_i = 0;
        for (j, r) in refs.iter().enumerate() {
            let dj = l2_distance(&q, r).unwrap();
            if dj < best {
                best = dj;
                best_i = j;
            }
        }
        assert_eq!(i, best_i);
        assert!((d - best).abs() < 1e-15);
    }

    #[test]
    fn two_stage_toy_case() {
        let mut cands = BTreeMap::new();
        cands.insert(1, fv(&[0.1])); // a
        cands.insert(2, fv(&[0.2])); // b
        cands.insert(3, fv(&[0.5])); // c
        cands.insert(4, fv(&[0.9])); // d
        let cs = vec![fv(&[0.0])];
        let cl = vec![fv(&[1.0])];
        let res = select_supplement(&cands, &cs, &cl, &cfg(3, 2, 4)).unwrap();
        assert_eq!(res.shortlist_ids, vec![1, 2, 3]);
        assert_eq!(res.selected_ids, vec![1, 2]);
        assert!((res.d_starved[&1] - 0.1).abs() < 1e-12);
        assert!((res.d_large[&1] - 0.9).abs() < 1e-12);
        assert_eq!(res.d_large.len(), 3);
    }

    #[test]
    fn m_equals_n_selects_whole_shortlist() {
        let mut cands = BTreeMap::new();
        for id in 0..6u64 {
            cands.insert(id, fv(&[id as f64 / 10.0]));
        }
        let cs = vec![fv(&[0.0])];
        let cl = vec![fv(&[1.0])];
        let res = select_supplement(&cands, &cs, &cl, &cfg(4, 4, 6)).unwrap();
        let mut sel = res.selected_ids.clone();
        let mut short = res.shortlist_ids.clone();
        sel.sort_unstable();
        short.sort_unstable();
        assert_eq!(sel, short);
    }

    #[test]
    fn config_invariants_enforced() {
        assert!(cfg(3, 4, 6).validate().is_err());
        assert!(cfg(7, 2, 6).validate().is_err());
        assert!(cfg(4, 2, 6).validate().is_ok());
    }

    #[test]
    fn empty_inputs_error() {
        let cands: BTreeMap<u64, FeatureVector> = BTreeMap::new();
        let refs = vec![fv(&[0.0])];
        assert!(select_supplement(&cands, &refs, &refs, &cfg(1, 1, 1)).is_err());
        let mut one = BTreeMap::new();
        one.insert(1u64, fv(&[0.0]));
        assert!(select_supplement(&one, &[], &refs, &cfg(1, 1, 1)).is_err());
        assert!(select_supplement(&one, &refs, &[], &cfg(1, 1, 1)).is_err());
    }

    #[test]
    fn selection_is_invariant_to_uniform_scaling() {
        use rand::Rng;
        let mut rng = crate::rng::stage_rng(3, "scale_test");
        let cands: BTreeMap<u64, FeatureVector> = (0..40u64)
            .map(|id| {
                (
                    id,
                    fv(&(0..4).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>()),
                )
            })
            .collect();
        let cs: Vec<FeatureVector> = (0..3)
            .map(|_| fv(&(0..4).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let cl: Vec<FeatureVector> = (0..3)
            .map(|_| fv(&(0..4).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>()))
            .collect();
        let c = cfg(20, 10, 40);
        let base = select_supplement(&cands, &cs, &cl, &c).unwrap();

        let scale = |v: &FeatureVector| fv(&v.values.iter().map(|x| x * 3.5).collect::<Vec<_>>());
        let cands2: BTreeMap<u64, FeatureVector> =
            cands.iter().map(|(id, v)| (*id, scale(v))).collect();
        let cs2: Vec<_> = cs.iter().map(scale).collect();
        let cl2: Vec<_> = cl.iter().map(scale).collect();
        let scaled = select_supplement(&cands2, &cs2, &cl2, &c).unwrap();
        assert_eq!(base.selected_ids, scaled.selected_ids);
        assert_eq!(base.shortlist_ids, scaled.shortlist_ids);
    }
}
