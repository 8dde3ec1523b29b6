//! Segmentation scoring: most-likely-state decoding, label alignment,
//! frame-wise and switching-point F1, and the transition-weight correlation
//! diagnostic.
//!
//! Learned state labels carry no meaning, so predictions are aligned to the
//! ground truth before scoring: exhaustively over label permutations, by
//! greedy one-to-one matching, or by many-to-one merging.

use crate::error::{Error, Result};
use crate::model::GenerativeParams;
use crate::nn::ParamStore;

/// How predicted labels are mapped onto ground-truth labels before scoring.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Alignment {
    /// Search all bijections over the label set (predictions padded with
    /// unused labels when the counts differ). Supported up to 8 labels.
    Permutation,
    /// Repeatedly assign the (truth, predicted) pair with the largest
    /// frame overlap, without reusing either side.
    Greedy,
    /// Map every predicted label to the truth label it overlaps most
    /// (many-to-one).
    Merging,
}

impl std::fmt::Display for Alignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Alignment::Permutation => write!(f, "permutation"),
            Alignment::Greedy => write!(f, "greedy"),
            Alignment::Merging => write!(f, "merging"),
        }
    }
}

/// Decoded segmentation of one sequence plus its scores.
#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub decoded: Vec<usize>,
    pub aligned: Vec<usize>,
    /// `mapping[predicted_label] = truth_label` after alignment.
    pub mapping: Vec<usize>,
    pub f1_frame: f64,
    /// `(tolerance, f1)` pairs for the switching-point score.
    pub f1_switch: Vec<(usize, f64)>,
}

/// Per-step argmax of the posterior marginals; ties break toward the lower
/// state index.
pub fn decode(gamma1: &[f64], num_states: usize) -> Vec<usize> {
    debug_assert_eq!(gamma1.len() % num_states, 0);
    gamma1
        .chunks_exact(num_states)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn num_labels(seq: &[usize]) -> usize {
    seq.iter().max().map_or(0, |&m| m + 1)
}

/// Frame-overlap counts `counts[truth][pred]`.
fn overlap_counts(pred: &[usize], truth: &[usize], k_pred: usize, k_truth: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k_truth * k_pred];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[t * k_pred + p] += 1;
    }
    counts
}

/// Align predicted labels with ground-truth labels.
///
/// Returns the relabeled prediction and the label mapping. Labels that have
/// no counterpart map to fresh labels beyond the truth's range so they score
/// as errors.
pub fn align_labels(pred: &[usize], truth: &[usize], mode: Alignment) -> Result<(Vec<usize>, Vec<usize>)> {
    if pred.len() != truth.len() {
        return Err(Error::usage("prediction and truth must have equal length"));
    }
    if pred.is_empty() {
        return Err(Error::usage("cannot align empty sequences"));
    }
    let k_pred = num_labels(pred);
    let k_truth = num_labels(truth);
    let mapping = match mode {
        Alignment::Permutation => {
            if k_pred > 8 {
                return Err(Error::usage(format!(
                    "permutation alignment supports at most 8 predicted labels, got {k_pred}"
                )));
            }
            permutation_mapping(pred, truth, k_pred, k_truth)
        }
        Alignment::Greedy => greedy_mapping(pred, truth, k_pred, k_truth),
        Alignment::Merging => merging_mapping(pred, truth, k_pred, k_truth),
    };
    let relabeled: Vec<usize> = pred.iter().map(|&p| mapping[p]).collect();
    Ok((relabeled, mapping))
}

fn permutation_mapping(pred: &[usize], truth: &[usize], k_pred: usize, k_truth: usize) -> Vec<usize> {
    // Permute over the union label space so spare predicted labels can land
    // on unused slots.
    let k = k_pred.max(k_truth);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best_perm = perm.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut relabeled = vec![0usize; pred.len()];
    permute(&mut perm, 0, &mut |p| {
        for (r, &orig) in relabeled.iter_mut().zip(pred) {
            *r = p[orig];
        }
        let score = f1_frame(&relabeled, truth).unwrap_or(f64::NEG_INFINITY);
        if score > best_score {
            best_score = score;
            best_perm = p.to_vec();
        }
    });
    best_perm.truncate(k_pred.max(1));
    best_perm
}

fn permute(items: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

fn greedy_mapping(pred: &[usize], truth: &[usize], k_pred: usize, k_truth: usize) -> Vec<usize> {
    let counts = overlap_counts(pred, truth, k_pred, k_truth);
    let mut truth_taken = vec![false; k_truth];
    let mut pred_taken = vec![false; k_pred];
    let mut mapping = vec![usize::MAX; k_pred];
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for t in 0..k_truth {
            if truth_taken[t] {
                continue;
            }
            for p in 0..k_pred {
                if pred_taken[p] {
                    continue;
                }
                let c = counts[t * k_pred + p];
                let better = match best {
                    None => true,
                    Some((bc, bt, bp)) => {
                        c > bc || (c == bc && (t, p) < (bt, bp))
                    }
                };
                if better {
                    best = Some((c, t, p));
                }
            }
        }
        match best {
            Some((_, t, p)) => {
                truth_taken[t] = true;
                pred_taken[p] = true;
                mapping[p] = t;
            }
            None => break,
        }
    }
    // Unmatched predicted labels score as errors under fresh labels.
    let mut next = k_truth;
    for m in mapping.iter_mut() {
        if *m == usize::MAX {
            *m = next;
            next += 1;
        }
    }
    mapping
}

fn merging_mapping(pred: &[usize], truth: &[usize], k_pred: usize, k_truth: usize) -> Vec<usize> {
    let counts = overlap_counts(pred, truth, k_pred, k_truth);
    let mut mapping = vec![0usize; k_pred];
    for (p, m) in mapping.iter_mut().enumerate() {
        let mut best_t = 0;
        let mut best_c = 0;
        let mut seen = false;
        for t in 0..k_truth {
            let c = counts[t * k_pred + p];
            // Ties break toward the lower truth label.
            if !seen || c > best_c {
                best_t = t;
                best_c = c;
                seen = true;
            }
        }
        *m = best_t;
    }
    mapping
}

/// Frame-wise F1: per-class precision and recall over the classes present in
/// the ground truth, macro-averaged, then combined as `2PR / (P + R)`.
///
/// A truth class nobody predicts contributes zero precision, so collapsed
/// predictions are penalized.
pub fn f1_frame(pred_aligned: &[usize], truth: &[usize]) -> Result<f64> {
    if pred_aligned.len() != truth.len() {
        return Err(Error::usage("sequences must have equal length"));
    }
    if truth.is_empty() {
        return Err(Error::usage("F1 of an empty sequence is undefined"));
    }
    let k = num_labels(truth).max(num_labels(pred_aligned));
    let mut tp = vec![0usize; k];
    let mut pred_count = vec![0usize; k];
    let mut truth_count = vec![0usize; k];
    for (&p, &t) in pred_aligned.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        }
        pred_count[p] += 1;
        truth_count[t] += 1;
    }
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut classes = 0usize;
    for c in 0..k {
        if truth_count[c] == 0 {
            continue;
        }
        classes += 1;
        if pred_count[c] > 0 {
            precision += tp[c] as f64 / pred_count[c] as f64;
        }
        recall += tp[c] as f64 / truth_count[c] as f64;
    }
    let p = precision / classes as f64;
    let r = recall / classes as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

/// Switching-point F1 with a temporal tolerance.
#[derive(Clone, Copy, Debug)]
pub struct SwitchScore {
    pub f1: f64,
    /// Set when the ground truth contains no change-points at all.
    pub no_true_changes: bool,
}

/// Change-points of a label sequence: `(position, new label)` for every step
/// whose label differs from its predecessor.
fn change_points(seq: &[usize]) -> Vec<(usize, usize)> {
    let mut cps = Vec::new();
    for t in 1..seq.len() {
        if seq[t] != seq[t - 1] {
            cps.push((t, seq[t]));
        }
    }
    cps
}

/// Match change-points of the aligned prediction against the truth's.
///
/// A predicted change matches an unused true change when their positions
/// differ by at most `tolerance` and, when `match_labels` is set, the
/// post-change labels agree. Pairs are matched nearest-first. Precision is
/// matched/predicted, recall is matched/true.
pub fn f1_switch_flagged(
    pred_aligned: &[usize],
    truth: &[usize],
    tolerance: usize,
    match_labels: bool,
) -> Result<SwitchScore> {
    if pred_aligned.len() != truth.len() {
        return Err(Error::usage("sequences must have equal length"));
    }
    let pred_cps = change_points(pred_aligned);
    let true_cps = change_points(truth);
    if true_cps.is_empty() {
        return Ok(SwitchScore {
            f1: if pred_cps.is_empty() { 1.0 } else { 0.0 },
            no_true_changes: true,
        });
    }
    if pred_cps.is_empty() {
        return Ok(SwitchScore {
            f1: 0.0,
            no_true_changes: false,
        });
    }

    // All admissible pairs ordered by displacement, then position.
    let mut pairs = Vec::new();
    for (pi, &(pt, pl)) in pred_cps.iter().enumerate() {
        for (ti, &(tt, tl)) in true_cps.iter().enumerate() {
            let dist = pt.abs_diff(tt);
            if dist <= tolerance && (!match_labels || pl == tl) {
                pairs.push((dist, pt, tt, pi, ti));
            }
        }
    }
    pairs.sort_unstable();
    let mut pred_used = vec![false; pred_cps.len()];
    let mut true_used = vec![false; true_cps.len()];
    let mut matched = 0usize;
    for (_, _, _, pi, ti) in pairs {
        if !pred_used[pi] && !true_used[ti] {
            pred_used[pi] = true;
            true_used[ti] = true;
            matched += 1;
        }
    }
    let precision = matched as f64 / pred_cps.len() as f64;
    let recall = matched as f64 / true_cps.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SwitchScore {
        f1,
        no_true_changes: false,
    })
}

/// Switching-point F1 with post-change label agreement required.
pub fn f1_switch(pred_aligned: &[usize], truth: &[usize], tolerance: usize) -> Result<f64> {
    Ok(f1_switch_flagged(pred_aligned, truth, tolerance, true)?.f1)
}

/// Decode, align, and score one sequence against its ground truth.
pub fn score_sequence(
    gamma1: &[f64],
    num_states: usize,
    truth_u8: &[u8],
    mode: Alignment,
    tolerances: &[usize],
) -> Result<SegmentationResult> {
    let decoded = decode(gamma1, num_states);
    let truth: Vec<usize> = truth_u8.iter().map(|&v| v as usize).collect();
    let (aligned, mapping) = align_labels(&decoded, &truth, mode)?;
    let f1 = f1_frame(&aligned, &truth)?;
    let mut switches = Vec::with_capacity(tolerances.len());
    for &tol in tolerances {
        switches.push((tol, f1_switch(&aligned, &truth, tol)?));
    }
    Ok(SegmentationResult {
        decoded,
        aligned,
        mapping,
        f1_frame: f1,
        f1_switch: switches,
    })
}

/// Mean Pearson correlation between the flattened transition weights of all
/// unordered state pairs, plus the number of pairs skipped for having zero
/// variance on either side.
pub fn weight_correlation(store: &ParamStore, gen: &GenerativeParams) -> Result<(f64, usize)> {
    let k = gen.config.num_states;
    if k < 2 {
        return Err(Error::usage("weight correlation needs at least two states"));
    }
    let vectors: Vec<Vec<f64>> = (0..k)
        .map(|s| {
            gen.transition_param_ids(s)
                .iter()
                .flat_map(|&pid| store.values(pid).iter().copied())
                .collect()
        })
        .collect();
    let len = vectors[0].len();
    if vectors.iter().any(|v| v.len() != len) {
        return Err(Error::usage("states have differently-shaped transition nets"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut skipped = 0usize;
    for a in 0..k {
        for b in a + 1..k {
            match pearson(&vectors[a], &vectors[b]) {
                Some(r) => {
                    total += r;
                    pairs += 1;
                }
                None => skipped += 1,
            }
        }
    }
    if pairs == 0 {
        return Err(Error::numeric("all state pairs had zero-variance weights"));
    }
    Ok((total / pairs as f64, skipped))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiscreteInput, ModelConfig, TransitionFamily};
    use crate::nn::Activation;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decode_recovers_one_hot_rows() {
        let gamma = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(decode(&gamma, 3), vec![0, 2, 1]);
    }

    #[test]
    fn decode_breaks_ties_low() {
        let gamma = [0.25, 0.25, 0.25, 0.25, 0.2, 0.4, 0.4, 0.0];
        assert_eq!(decode(&gamma, 4), vec![0, 1]);
    }

    #[test]
    fn decode_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 5;
        let rows = 40;
        let mut gamma = vec![0.0; rows * k];
        for v in gamma.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let got = decode(&gamma, k);
        for (t, &g) in got.iter().enumerate() {
            let row = &gamma[t * k..(t + 1) * k];
            for (i, &v) in row.iter().enumerate() {
                assert!(v <= row[g] && (v < row[g] || i >= g));
            }
        }
    }

    #[test]
    fn identity_alignment_keeps_f1() {
        let truth = vec![0, 0, 1, 1, 2];
        let (aligned, mapping) = align_labels(&truth, &truth, Alignment::Permutation).unwrap();
        assert_eq!(aligned, truth);
        assert_eq!(mapping, vec![0, 1, 2]);
        assert_eq!(f1_frame(&aligned, &truth).unwrap(), 1.0);
    }

    #[test]
    fn swapped_labels_realign_perfectly() {
        let truth = vec![0, 0, 1, 1];
        let pred = vec![1, 1, 0, 0];
        let (aligned, _) = align_labels(&pred, &truth, Alignment::Permutation).unwrap();
        assert_eq!(aligned, truth);
        assert_eq!(f1_frame(&aligned, &truth).unwrap(), 1.0);
    }

    #[test]
    fn merging_maps_to_majority_overlap() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let pred = vec![0, 0, 1, 1, 1, 1];
        let (aligned, mapping) = align_labels(&pred, &truth, Alignment::Merging).unwrap();
        // Predicted 1 overlaps truth 1 and truth 2 twice each; the tie
        // breaks to the lower truth label.
        assert_eq!(mapping[1], 1);
        assert_eq!(aligned, vec![0, 0, 1, 1, 1, 1]);
        let correct = aligned.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert_eq!(correct, 4);
    }

    #[test]
    fn permutation_rejects_large_label_spaces() {
        let pred: Vec<usize> = (0..9).collect();
        let truth = vec![0usize; 9];
        assert!(align_labels(&pred, &truth, Alignment::Permutation).is_err());
    }

    #[test]
    fn permutation_never_loses_to_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let len = rng.random_range(8..40);
            let kp = rng.random_range(1..5usize);
            let kt = rng.random_range(1..4usize);
            let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..kp)).collect();
            let truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..kt)).collect();
            let (ap, _) = align_labels(&pred, &truth, Alignment::Permutation).unwrap();
            let (ag, _) = align_labels(&pred, &truth, Alignment::Greedy).unwrap();
            let fp = f1_frame(&ap, &truth).unwrap();
            let fg = f1_frame(&ag, &truth).unwrap();
            assert!(
                fp >= fg - 1e-12,
                "permutation {fp} lost to greedy {fg} on pred={pred:?} truth={truth:?}"
            );
        }
    }

    #[test]
    fn frame_f1_counts_correctly() {
        assert_eq!(f1_frame(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(f1_frame(&[2, 2, 3, 3], &[0, 0, 1, 1]).unwrap(), 0.0);
        // Half the frames correct, uniformly across both classes.
        let f = f1_frame(&[0, 1, 1, 0], &[0, 0, 1, 1]).unwrap();
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn frame_f1_rejects_empty() {
        assert!(f1_frame(&[], &[]).is_err());
    }

    #[test]
    fn frame_f1_invariant_under_joint_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let len = rng.random_range(5..30);
            let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
            let truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
            let base = f1_frame(&pred, &truth).unwrap();
            let perm = [2usize, 0, 1];
            let pred2: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
            let truth2: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
            let relabeled = f1_frame(&pred2, &truth2).unwrap();
            assert!((base - relabeled).abs() < 1e-12);
        }
    }

    #[test]
    fn switch_f1_exact_and_tolerant() {
        let truth = vec![0, 0, 0, 1, 1, 1, 0, 0];
        assert_eq!(f1_switch(&truth, &truth, 0).unwrap(), 1.0);

        // Every change displaced by one step.
        let pred = vec![0, 0, 1, 1, 1, 0, 0, 0];
        assert_eq!(f1_switch(&pred, &truth, 0).unwrap(), 0.0);
        assert_eq!(f1_switch(&pred, &truth, 1).unwrap(), 1.0);
    }

    #[test]
    fn switch_f1_boundary_tolerance_five() {
        let mut truth = vec![0usize; 20];
        for v in truth.iter_mut().skip(10) {
            *v = 1;
        }
        let mut pred = vec![0usize; 20];
        for v in pred.iter_mut().skip(15) {
            *v = 1;
        }
        assert_eq!(f1_switch(&pred, &truth, 5).unwrap(), 1.0);
        assert_eq!(f1_switch(&pred, &truth, 0).unwrap(), 0.0);
        assert_eq!(f1_switch(&pred, &truth, 4).unwrap(), 0.0);
    }

    #[test]
    fn switch_f1_requires_label_agreement_by_default() {
        let truth = vec![0, 0, 1, 1];
        let pred = vec![0, 0, 2, 2];
        assert_eq!(f1_switch(&pred, &truth, 0).unwrap(), 0.0);
        let relaxed = f1_switch_flagged(&pred, &truth, 0, false).unwrap();
        assert_eq!(relaxed.f1, 1.0);
    }

    #[test]
    fn switch_f1_no_true_changes_flag() {
        let truth = vec![0, 0, 0];
        let none = f1_switch_flagged(&[0, 0, 0], &truth, 0, true).unwrap();
        assert!(none.no_true_changes);
        assert_eq!(none.f1, 1.0);
        let some = f1_switch_flagged(&[0, 1, 1], &truth, 0, true).unwrap();
        assert!(some.no_true_changes);
        assert_eq!(some.f1, 0.0);
    }

    #[test]
    fn switch_f1_monotone_in_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let len = 40;
            let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
            let truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
            let mut prev = 0.0;
            for tol in 0..8 {
                let f = f1_switch(&pred, &truth, tol).unwrap();
                assert!(f >= prev - 1e-12, "tolerance {tol} decreased F1");
                prev = f;
            }
        }
    }

    fn correlation_fixture(k: usize) -> (ParamStore, GenerativeParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let gen = GenerativeParams::init(
            &mut store,
            ModelConfig {
                num_states: k,
                latent_dim: 3,
                obs_dim: 2,
                transition_family: TransitionFamily::Mlp,
                discrete_input: DiscreteInput::PrevObservation,
                emission_hidden: vec![],
                transition_hidden: vec![4],
                transition_gru_units: 0,
                discrete_hidden: vec![],
                hidden_activation: Activation::Tanh,
                init_obs_log_scale: 0.0,
                init_trans_log_scale: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        (store, gen)
    }

    #[test]
    fn identical_states_correlate_perfectly() {
        let (mut store, gen) = correlation_fixture(3);
        let base: Vec<Vec<f64>> = gen
            .transition_param_ids(0)
            .iter()
            .map(|&p| store.values(p).to_vec())
            .collect();
        for s in 1..3 {
            for (pid, vals) in gen.transition_param_ids(s).iter().zip(&base) {
                store.values_mut(*pid).copy_from_slice(vals);
            }
        }
        // Biases are all zero, which would be zero-variance; perturb them.
        for s in 0..3 {
            for pid in gen.transition_param_ids(s) {
                if store.values(pid).iter().all(|&v| v == 0.0) {
                    for (i, v) in store.values_mut(pid).iter_mut().enumerate() {
                        *v = i as f64 * 0.1 + 0.05;
                    }
                }
            }
        }
        let (rho, _) = weight_correlation(&store, &gen).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anticorrelated_states_give_minus_one() {
        let (mut store, gen) = correlation_fixture(2);
        let ids0 = gen.transition_param_ids(0);
        let ids1 = gen.transition_param_ids(1);
        let mut counter = 0.0;
        for &pid in &ids0 {
            for v in store.values_mut(pid).iter_mut() {
                counter += 1.0;
                *v = counter * 0.3;
            }
        }
        for (&p0, &p1) in ids0.iter().zip(&ids1) {
            let neg: Vec<f64> = store.values(p0).iter().map(|v| -v + 0.7).collect();
            store.values_mut(p1).copy_from_slice(&neg);
        }
        let (rho, _) = weight_correlation(&store, &gen).unwrap();
        assert!((rho + 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_weights_decorrelate() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut store = ParamStore::new();
        let gen = GenerativeParams::init(
            &mut store,
            ModelConfig {
                num_states: 2,
                latent_dim: 100,
                obs_dim: 2,
                transition_family: TransitionFamily::Mlp,
                discrete_input: DiscreteInput::None,
                emission_hidden: vec![],
                transition_hidden: vec![100],
                transition_gru_units: 0,
                discrete_hidden: vec![],
                hidden_activation: Activation::Tanh,
                init_obs_log_scale: 0.0,
                init_trans_log_scale: 0.0,
            },
            &mut rng,
        )
        .unwrap();
        // >= 10k weights per state: 100*100 + 100 + 100*100 + 100.
        let (rho, _) = weight_correlation(&store, &gen).unwrap();
        assert!(rho.abs() < 0.1, "independent weights correlate: {rho}");
    }

    #[test]
    fn zero_variance_pairs_are_skipped() {
        let (mut store, gen) = correlation_fixture(3);
        // Zero out state 0 entirely -> its pairs skip.
        for pid in gen.transition_param_ids(0) {
            store.values_mut(pid).fill(0.0);
        }
        let (_, skipped) = weight_correlation(&store, &gen).unwrap();
        assert_eq!(skipped, 2);
    }

    #[test]
    fn decode_then_one_hot_is_identity() {
        let labels = [2usize, 0, 1, 1, 2];
        let k = 3;
        let mut gamma = vec![0.0; labels.len() * k];
        for (t, &l) in labels.iter().enumerate() {
            gamma[t * k + l] = 1.0;
        }
        assert_eq!(decode(&gamma, k), labels.to_vec());
    }
}
