//! Downstream task heads and metrics: linear triplet head with focal loss
//! and mAP; phase classification with a causal multi-stage temporal
//! convolutional refiner and mean phase accuracy.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Linear classifier over class tokens.
#[derive(Clone, Debug)]
pub struct HeadIds {
    pub w: usize,
    pub b: usize,
}

impl HeadIds {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        classes: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        HeadIds {
            w: store.add_normal(format!("{prefix}.w"), vec![in_dim, classes], 0.02, rng),
            b: store.add_zeros(format!("{prefix}.b"), vec![classes]),
        }
    }
}

/// Extract the class-token row of each sample from `[B * tokens, d]`.
pub fn class_tokens(
    tape: &mut Tape,
    latent: Var,
    batch: usize,
    tokens_per_sample: usize,
    d: usize,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch * d);
    for b in 0..batch {
        let start = b * tokens_per_sample * d;
        rows.extend(start..start + d);
    }
    tape.index_select(latent, rows, vec![batch, d])
}

/// Single affine map on class tokens: `[B, d] -> [B, classes]`.
pub fn linear_head(tape: &mut Tape, vars: &[Var], ids: &HeadIds, tokens: Var) -> Result<Var> {
    tape.linear(tokens, vars[ids.w], vars[ids.b])
}

const LOG_FLOOR: f64 = 1e-12;

/// Sigmoid focal loss, averaged over batch entries and classes.
///
/// Per entry: `-[a*y*(1-p)^g*ln p + (1-a)*(1-y)*p^g*ln(1-p)]` with the log
/// arguments clamped at 1e-12.
pub fn focal_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if gamma < 0.0 {
        return Err(Error::config(format!("gamma must be >= 0, got {gamma}")));
    }
    if tape.value(logits).shape() != labels.shape() {
        return Err(Error::Dim {
            op: "focal_loss",
            lhs: tape.value(logits).shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("focal loss labels must be 0 or 1"));
    }
    let n = labels.numel() as f64;
    let y = tape.constant(labels.clone());
    let one_minus_y = tape.affine(y, -1.0, 1.0);

    let p = tape.sigmoid_op(logits);
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let ln_p = tape.ln_clamped(p, LOG_FLOOR);
    let ln_q = tape.ln_clamped(one_minus_p, LOG_FLOOR);

    let w_pos = tape.pow_const(one_minus_p, gamma);
    let t = tape.mul(y, w_pos)?;
    let t = tape.mul(t, ln_p)?;
    let pos = tape.affine(t, -alpha, 0.0);

    let w_neg = tape.pow_const(p, gamma);
    let t = tape.mul(one_minus_y, w_neg)?;
    let t = tape.mul(t, ln_q)?;
    let neg = tape.affine(t, -(1.0 - alpha), 0.0);

    let total = tape.add(pos, neg)?;
    let s = tape.sum_all(total);
    Ok(tape.scale(s, 1.0 / n))
}

/// Focal loss on plain tensors, for evaluation and tests.
pub fn focal_loss_value(logits: &Tensor, labels: &Tensor, alpha: f64, gamma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = focal_loss(&mut tape, l, labels, alpha, gamma)?;
    Ok(tape.value(loss).item())
}

/// Mean cross-entropy of `[T, C]` logits against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::contract(format!(
            "cross_entropy: logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!(
            "cross_entropy: label {bad} out of range for {c} classes"
        )));
    }
    let logp = tape.log_softmax(logits);
    let picks: Vec<usize> = labels.iter().enumerate().map(|(t, &l)| t * c + l).collect();
    let chosen = tape.index_select(logp, picks, vec![labels.len()])?;
    let s = tape.sum_all(chosen);
    Ok(tape.scale(s, -1.0 / labels.len() as f64))
}

/// Average precision of one class from per-frame scores.
///
/// Ranks by descending score with ties broken by original index, then
/// averages precision at each positive's rank. `Ok(None)` marks a class
/// with no positives; the caller excludes it from the mean.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "average_precision: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("average_precision: NaN score"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::contract("average_precision: labels must be 0 or 1"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut cum_pos = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            cum_pos += 1;
            sum += cum_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

/// Arithmetic mean over classes that have at least one positive.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return Err(Error::contract(
            "mean_ap: every class is undefined (no positives anywhere)",
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-video frame accuracy, then an unweighted mean across videos. Empty
/// videos are excluded with a warning.
pub fn phase_accuracy(predictions: &[Vec<usize>], labels: &[Vec<usize>]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "phase_accuracy: {} prediction videos vs {} label videos",
            predictions.len(),
            labels.len()
        )));
    }
    let mut accs = Vec::new();
    for (i, (p, l)) in predictions.iter().zip(labels).enumerate() {
        if p.len() != l.len() {
            return Err(Error::contract(format!(
                "phase_accuracy: video {i} has {} predictions vs {} labels",
                p.len(),
                l.len()
            )));
        }
        if p.is_empty() {
            log::warn!("phase_accuracy: excluding empty video {i}");
            continue;
        }
        let correct = p.iter().zip(l).filter(|(a, b)| a == b).count();
        accs.push(correct as f64 / p.len() as f64);
    }
    if accs.is_empty() {
        return Err(Error::contract("phase_accuracy: no non-empty videos"));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Temporal refiner configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MSTCNConfig {
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl MSTCNConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        MSTCNConfig {
            num_stages: 2,
            layers_per_stage: 8,
            channels: 64,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_stages", self.num_stages),
            ("layers_per_stage", self.layers_per_stage),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::config(format!("mstcn {name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Frames visible to one output within a single stage.
    pub fn stage_receptive_field(&self) -> usize {
        1 + 2 * ((1usize << self.layers_per_stage) - 1)
    }
}

#[derive(Clone, Debug)]
pub struct TcnLayerIds {
    pub conv_w: usize,
    pub conv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Debug)]
pub struct StageIds {
    pub proj_w: usize,
    pub proj_b: usize,
    pub layers: Vec<TcnLayerIds>,
    pub cls_w: usize,
    pub cls_b: usize,
}

#[derive(Clone, Debug)]
pub struct MstcnIds {
    pub stages: Vec<StageIds>,
}

impl MstcnIds {
    pub fn build(
        store: &mut ParamStore,
        cfg: &MSTCNConfig,
        in_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let ch = cfg.channels;
        let stages = (1..=cfg.num_stages)
            .map(|s| {
                let p = format!("mstcn.stage{s}");
                let stage_in = if s == 1 { in_dim } else { cfg.num_classes };
                StageIds {
                    proj_w: store.add_normal(format!("{p}.proj.w"), vec![stage_in, ch], 0.02, rng),
                    proj_b: store.add_zeros(format!("{p}.proj.b"), vec![ch]),
                    layers: (0..cfg.layers_per_stage)
                        .map(|l| TcnLayerIds {
                            conv_w: store.add_normal(
                                format!("{p}.layer{l}.conv.w"),
                                vec![ch, ch, 3],
                                0.02,
                                rng,
                            ),
                            conv_b: store.add_zeros(format!("{p}.layer{l}.conv.b"), vec![ch]),
                            out_w: store.add_normal(
                                format!("{p}.layer{l}.out.w"),
                                vec![ch, ch],
                                0.02,
                                rng,
                            ),
                            out_b: store.add_zeros(format!("{p}.layer{l}.out.b"), vec![ch]),
                        })
                        .collect(),
                    cls_w: store.add_normal(
                        format!("{p}.cls.w"),
                        vec![ch, cfg.num_classes],
                        0.02,
                        rng,
                    ),
                    cls_b: store.add_zeros(format!("{p}.cls.b"), vec![cfg.num_classes]),
                }
            })
            .collect();
        MstcnIds { stages }
    }
}

/// Multi-stage causal temporal refinement over per-frame features `[T, d]`.
///
/// Each stage projects its input to `channels`, applies residual blocks of
/// causal dilated convolutions (dilation `2^l`, kernel 3, left padding
/// only), and emits class logits. Stage `s > 1` consumes the softmax of the
/// previous stage's logits. All stages' logits are returned; training sums
/// their cross-entropies, inference reads the last.
pub fn mstcn_forward(
    tape: &mut Tape,
    vars: &[Var],
    ids: &MstcnIds,
    cfg: &MSTCNConfig,
    features: Var,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract(format!(
            "mstcn_forward expects [T, d] with T >= 1, got {shape:?}"
        )));
    }
    let mut outputs = Vec::with_capacity(ids.stages.len());
    let mut input = features;
    for (s, stage) in ids.stages.iter().enumerate() {
        if s > 0 {
            input = tape.softmax(outputs[s - 1]);
        }
        let mut x = tape.linear(input, vars[stage.proj_w], vars[stage.proj_b])?;
        for (l, layer) in stage.layers.iter().enumerate() {
            let h = tape.causal_conv1d(x, vars[layer.conv_w], vars[layer.conv_b], 1 << l)?;
            let h = tape.relu(h);
            let h = tape.linear(h, vars[layer.out_w], vars[layer.out_b])?;
            x = tape.add(x, h)?;
        }
        outputs.push(tape.linear(x, vars[stage.cls_w], vars[stage.cls_b])?);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, random_tensor};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng20(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut store = ParamStore::new();
        let ids = HeadIds::build(&mut store, "head", 8, 5, &mut rng20(1));
        *store.get_mut(ids.w) = Tensor::zeros(vec![8, 5]);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = tape.constant(random_tensor(vec![3, 8], &mut rng20(2)));
        let out = linear_head(&mut tape, &vars, &ids, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_like_head_on_one_dim() {
        let mut store = ParamStore::new();
        let ids = HeadIds::build(&mut store, "head", 1, 1, &mut rng20(3));
        *store.get_mut(ids.w) = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![2, 1], vec![0.7, -0.3]).unwrap());
        let out = linear_head(&mut tape, &vars, &ids, x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.7, -0.3]);
    }

    #[test]
    fn focal_reduces_to_half_bce_at_gamma_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let logits = random_tensor(vec![3, 6], &mut r).map(|v| 4.0 * v);
            let labels = Tensor::new(
                vec![3, 6],
                (0..18).map(|_| f64::from(u8::from(r.gen_bool(0.3)))).collect(),
            )
            .unwrap();
            let focal = focal_loss_value(&logits, &labels, 0.5, 0.0).unwrap();
            // Independent BCE evaluation.
            let mut bce = 0.0;
            for (l, y) in logits.data().iter().zip(labels.data()) {
                let p = 1.0 / (1.0 + (-l).exp());
                bce += -y * p.max(1e-12).ln() - (1.0 - y) * (1.0 - p).max(1e-12).ln();
            }
            bce /= 18.0;
            assert!((focal - 0.5 * bce).abs() < 1e-9, "{focal} vs {}", 0.5 * bce);
        }
    }

    #[test]
    fn focal_perfect_confident_predictions_vanish() {
        let labels = Tensor::new(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let logits = Tensor::new(vec![1, 4], vec![30.0, -30.0, 30.0, -30.0]).unwrap();
        let loss = focal_loss_value(&logits, &labels, 0.25, 2.0).unwrap();
        assert!(loss <= 1e-9, "loss {loss}");
    }

    #[test]
    fn focal_hand_case() {
        // Single class, p = 0.5 (logit 0), y = 1, alpha 0.25, gamma 2.
        let labels = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let logits = Tensor::zeros(vec![1, 1]);
        let loss = focal_loss_value(&logits, &labels, 0.25, 2.0).unwrap();
        let expect = 0.25 * 0.25 * 2f64.ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        assert!((expect - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn focal_rejects_bad_config_and_labels() {
        let labels = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let logits = Tensor::zeros(vec![1, 2]);
        assert!(focal_loss_value(&logits, &labels, 1.5, 2.0).is_err());
        assert!(focal_loss_value(&logits, &labels, 0.25, -1.0).is_err());
        let bad = Tensor::new(vec![1, 2], vec![0.5, 0.0]).unwrap();
        assert!(focal_loss_value(&logits, &bad, 0.25, 2.0).is_err());
    }

    #[test]
    fn focal_monotone_in_positive_logit() {
        let labels = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mut prev = f64::INFINITY;
        for logit in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let l = Tensor::new(vec![1, 1], vec![logit]).unwrap();
            let loss = focal_loss_value(&l, &labels, 0.25, 2.0).unwrap();
            assert!(loss < prev, "not decreasing at logit {logit}");
            prev = loss;
        }
    }

    #[test]
    fn focal_gradients_match_bce_gradients_at_gamma_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let logits = random_tensor(vec![2, 4], &mut r).map(|v| 2.0 * v);
        let labels = Tensor::new(
            vec![2, 4],
            (0..8).map(|_| f64::from(u8::from(r.gen_bool(0.5)))).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let lv = tape.leaf(logits.clone().with_grad());
        let loss = focal_loss(&mut tape, lv, &labels, 0.5, 0.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(lv).unwrap();
        // BCE gradient: (p - y) / n, halved.
        for ((gv, l), y) in g.data().iter().zip(logits.data()).zip(labels.data()) {
            let p = 1.0 / (1.0 + (-l).exp());
            let expect = 0.5 * (p - y) / 8.0;
            assert!((gv - expect).abs() < 1e-9, "{gv} vs {expect}");
        }
    }

    #[test]
    fn focal_gradient_through_head_matches_finite_differences() {
        let mut store = ParamStore::new();
        let ids = HeadIds::build(&mut store, "head", 6, 4, &mut rng20(6));
        let feats = random_tensor(vec![3, 6], &mut rng20(7));
        let labels = Tensor::new(
            vec![3, 4],
            vec![1., 0., 0., 1., 0., 0., 1., 0., 0., 1., 0., 0.],
        )
        .unwrap();
        let leaves: Vec<Tensor> = store.tensors().to_vec();
        let report = check_gradients(
            &leaves,
            |tape, vars| {
                let x = tape.constant(feats.clone());
                let logits = tape.linear(x, vars[0], vars[1])?;
                focal_loss(tape, logits, &labels, 0.25, 2.0)
            },
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_err < 1e-4, "{:?}", report.worst);
    }

    #[test]
    fn ap_perfect_ranking_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(average_precision(&scores, &labels).unwrap(), Some(1.0));
    }

    #[test]
    fn ap_single_positive_ranked_last() {
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let mut labels = vec![0u8; n];
        labels[n - 1] = 1;
        let ap = average_precision(&scores, &labels).unwrap().unwrap();
        assert!((ap - 1.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn ap_no_positives_is_undefined() {
        assert_eq!(average_precision(&[0.5, 0.2], &[0, 0]).unwrap(), None);
        assert!(average_precision(&[0.5], &[0, 0]).is_err());
        assert!(average_precision(&[f64::NAN], &[1]).is_err());
    }

    /// O(n^2) rank-counting oracle, no sorting involved. Terms are summed
    /// in rank order so exact equality with the implementation is
    /// well-defined.
    fn ap_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
        if pos.is_empty() {
            return None;
        }
        let rank = |i: usize| -> usize {
            1 + (0..scores.len())
                .filter(|&j| {
                    scores[j] > scores[i] || (scores[j] == scores[i] && j < i)
                })
                .count()
        };
        let mut terms: Vec<(usize, f64)> = pos
            .iter()
            .map(|&i| {
                let r = rank(i);
                let hits = pos.iter().filter(|&&j| rank(j) <= r).count();
                (r, hits as f64 / r as f64)
            })
            .collect();
        terms.sort_by_key(|&(r, _)| r);
        let sum: f64 = terms.iter().map(|&(_, t)| t).sum();
        Some(sum / pos.len() as f64)
    }

    #[test]
    fn ap_matches_exhaustive_oracle_on_random_instances() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for case in 0..1000 {
            let n = r.gen_range(1..=10);
            // Coarse score grid to exercise ties.
            let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..5) as f64 / 4.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(r.gen_bool(0.4))).collect();
            let got = average_precision(&scores, &labels).unwrap();
            let want = ap_oracle(&scores, &labels);
            assert_eq!(got, want, "case {case}: scores {scores:?} labels {labels:?}");
        }
    }

    #[test]
    fn ap_invariant_under_monotone_transform() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = r.gen_range(2..=10);
            let scores: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(r.gen_bool(0.5))).collect();
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp()).collect();
            assert_eq!(
                average_precision(&scores, &labels).unwrap(),
                average_precision(&transformed, &labels).unwrap()
            );
        }
    }

    #[test]
    fn mean_ap_cases() {
        assert_eq!(mean_ap(&[Some(1.0), Some(0.5)]).unwrap(), 0.75);
        assert_eq!(mean_ap(&[Some(1.0), None]).unwrap(), 1.0);
        assert!(mean_ap(&[None, None]).is_err());
        let mut r = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let vals: Vec<Option<f64>> = (0..r.gen_range(1..8))
                .map(|_| r.gen_bool(0.7).then(|| r.gen_range(0.0..1.0)))
                .collect();
            let defined: Vec<f64> = vals.iter().filter_map(|v| *v).collect();
            if defined.is_empty() {
                assert!(mean_ap(&vals).is_err());
            } else {
                let want = defined.iter().sum::<f64>() / defined.len() as f64;
                assert!((mean_ap(&vals).unwrap() - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn phase_accuracy_cases() {
        assert_eq!(
            phase_accuracy(&[vec![1, 1, 2]], &[vec![1, 1, 2]]).unwrap(),
            1.0
        );
        // Videos at 100% and 50%, different lengths: unweighted mean 75%.
        let acc = phase_accuracy(
            &[vec![0, 0], vec![1, 1, 0, 0]],
            &[vec![0, 0], vec![1, 1, 1, 1]],
        )
        .unwrap();
        assert!((acc - 0.75).abs() < 1e-15);
        // Counting oracle on random cases.
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let nv = r.gen_range(1..5);
            let mut preds = Vec::new();
            let mut labs = Vec::new();
            for _ in 0..nv {
                let t = r.gen_range(1..8);
                preds.push((0..t).map(|_| r.gen_range(0..3)).collect::<Vec<_>>());
                labs.push((0..t).map(|_| r.gen_range(0..3)).collect::<Vec<_>>());
            }
            let want = preds
                .iter()
                .zip(&labs)
                .map(|(p, l)| {
                    p.iter().zip(l).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
                })
                .sum::<f64>()
                / nv as f64;
            assert!((phase_accuracy(&preds, &labs).unwrap() - want).abs() < 1e-12);
        }
        // Empty video excluded.
        let acc = phase_accuracy(&[vec![], vec![2, 2]], &[vec![], vec![2, 2]]).unwrap();
        assert_eq!(acc, 1.0);
        assert!(phase_accuracy(&[vec![]], &[vec![]]).is_err());
        assert!(phase_accuracy(&[vec![1]], &[vec![1, 2]]).is_err());
    }

    fn small_mstcn(stages: usize, layers: usize, ch: usize, classes: usize) -> (ParamStore, MstcnIds, MSTCNConfig) {
        let cfg = MSTCNConfig {
            num_stages: stages,
            layers_per_stage: layers,
            channels: ch,
            num_classes: classes,
        };
        let mut store = ParamStore::new();
        let ids = MstcnIds::build(&mut store, &cfg, 6, &mut rng20(12));
        (store, ids, cfg)
    }

    /// Shift conv biases well above zero so every ReLU sits in its linear
    /// region; probe tests must not depend on which units happen to fire.
    fn activate_relus(store: &mut ParamStore, ids: &MstcnIds) {
        for stage in &ids.stages {
            for layer in &stage.layers {
                let b = store.get_mut(layer.conv_b);
                for v in b.data_mut() {
                    *v = 0.3;
                }
            }
        }
    }

    #[test]
    fn mstcn_single_frame() {
        let (store, ids, cfg) = small_mstcn(2, 3, 8, 4);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let f = tape.constant(random_tensor(vec![1, 6], &mut rng20(13)));
        let outs = mstcn_forward(&mut tape, &vars, &ids, &cfg, f).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(tape.value(outs[1]).shape(), &[1, 4]);
    }

    #[test]
    fn mstcn_causality_probes() {
        let (store, ids, cfg) = small_mstcn(2, 4, 8, 3);
        let base = random_tensor(vec![40, 6], &mut rng20(14));
        let eval = |features: &Tensor| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let f = tape.constant(features.clone());
            let outs = mstcn_forward(&mut tape, &vars, &ids, &cfg, f).unwrap();
            outs.iter().map(|&o| tape.value(o).clone()).collect()
        };
        let ref_out = eval(&base);
        let mut r = ChaCha8Rng::seed_from_u64(15);
        for probe in 0..50 {
            let t = r.gen_range(0..39);
            let tp = r.gen_range(t + 1..40);
            let mut modified = base.clone();
            for v in modified.data_mut()[tp * 6..(tp + 1) * 6].iter_mut() {
                *v += r.gen_range(0.5..2.0);
            }
            let out = eval(&modified);
            for (stage, (a, b)) in ref_out.iter().zip(&out).enumerate() {
                let c = cfg.num_classes;
                assert_eq!(
                    a.data()[t * c..(t + 1) * c],
                    b.data()[t * c..(t + 1) * c],
                    "probe {probe}: stage {stage} frame {t} changed after touching {tp}"
                );
            }
        }
    }

    #[test]
    fn mstcn_receptive_field_bound() {
        // 8 layers: stage receptive field = 2^9 - 1 = 511.
        let cfg = MSTCNConfig {
            num_stages: 1,
            layers_per_stage: 8,
            channels: 4,
            num_classes: 2,
        };
        assert_eq!(cfg.stage_receptive_field(), 511);
        let mut store = ParamStore::new();
        let ids = MstcnIds::build(&mut store, &cfg, 3, &mut rng20(16));
        activate_relus(&mut store, &ids);
        let t_len = 515;
        let base = random_tensor(vec![t_len, 3], &mut rng20(17));
        let eval = |features: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let f = tape.constant(features.clone());
            let outs = mstcn_forward(&mut tape, &vars, &ids, &cfg, f).unwrap();
            tape.value(outs[0]).clone()
        };
        let ref_out = eval(&base);
        let t = t_len - 1;
        // Just outside the receptive field: no change.
        let mut outside = base.clone();
        for v in outside.data_mut()[(t - 511) * 3..(t - 510) * 3].iter_mut() {
            *v += 5.0;
        }
        let out = eval(&outside);
        assert_eq!(
            ref_out.data()[t * 2..(t + 1) * 2],
            out.data()[t * 2..(t + 1) * 2]
        );
    }

    #[test]
    fn mstcn_receptive_field_is_tight_on_shallow_stage() {
        // With 8 layers the boundary path attenuates below f64 resolution,
        // so tightness is checked on 2 layers (field = 7) with weights
        // large enough for the maximal-offset path to be representable.
        let cfg = MSTCNConfig {
            num_stages: 1,
            layers_per_stage: 2,
            channels: 4,
            num_classes: 2,
        };
        assert_eq!(cfg.stage_receptive_field(), 7);
        let mut store = ParamStore::new();
        let ids = MstcnIds::build(&mut store, &cfg, 3, &mut rng20(19));
        activate_relus(&mut store, &ids);
        for i in 0..store.len() {
            if store.name(i).ends_with(".w") {
                let t = store.get(i).map(|v| v * 25.0);
                *store.get_mut(i) = t;
            }
        }
        let t_len = 12;
        let base = random_tensor(vec![t_len, 3], &mut rng20(20));
        let eval = |features: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let f = tape.constant(features.clone());
            let outs = mstcn_forward(&mut tape, &vars, &ids, &cfg, f).unwrap();
            tape.value(outs[0]).clone()
        };
        let ref_out = eval(&base);
        let t = t_len - 1;
        for (offset, expect_change) in [(7, false), (6, true)] {
            let mut probe = base.clone();
            for v in probe.data_mut()[(t - offset) * 3..(t - offset + 1) * 3].iter_mut() {
                *v += 5.0;
            }
            let out = eval(&probe);
            let changed =
                ref_out.data()[t * 2..(t + 1) * 2] != out.data()[t * 2..(t + 1) * 2];
            assert_eq!(changed, expect_change, "offset {offset}");
        }
    }

    #[test]
    fn mstcn_gradients_match_finite_differences() {
        let (mut store, ids, cfg) = small_mstcn(2, 2, 4, 3);
        activate_relus(&mut store, &ids);
        let feats = random_tensor(vec![9, 6], &mut rng20(18));
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let leaves: Vec<Tensor> = store.tensors().to_vec();
        let report = check_gradients(
            &leaves,
            |tape, vars| {
                let f = tape.constant(feats.clone());
                let outs = mstcn_forward(tape, vars, &ids, &cfg, f)?;
                let mut total = None;
                for o in outs {
                    let ce = cross_entropy(tape, o, &labels)?;
                    total = Some(match total {
                        None => ce,
                        Some(t) => tape.add(t, ce)?,
                    });
                }
                Ok(total.unwrap())
            },
            1e-5,
            Some(6),
            3,
        )
        .unwrap();
        assert!(report.max_err < 1e-4, "{:?} err {}", report.worst, report.max_err);
    }

    #[test]
    fn cross_entropy_basics() {
        let mut tape = Tape::new();
        // Uniform logits: CE = ln(C).
        let l = tape.constant(Tensor::zeros(vec![4, 3]));
        let ce = cross_entropy(&mut tape, l, &[0, 1, 2, 0]).unwrap();
        assert!((tape.value(ce).item() - 3f64.ln()).abs() < 1e-12);
        let l2 = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(cross_entropy(&mut tape, l2, &[0, 3]).is_err());
        assert!(cross_entropy(&mut tape, l2, &[0]).is_err());
    }
}
