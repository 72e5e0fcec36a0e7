//! Centered kernel alignment between expert output features.
//!
//! Feeds the similarity heatmaps, the gamma-2 skip calibration, and the
//! optional merge of pruned experts. Features are taken at expert outputs
//! before routing-weight multiplication, so similarity reflects the expert
//! function rather than the router.

use serde::{Deserialize, Serialize};

use crate::error::{DiepError, Result};
use crate::moe::{expert_forward, MoEModel, RunMode};
use crate::synth::CalibrationSet;
use crate::tensor::{Tape, Tensor};

/// Kernel used to compare feature rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// K = X Xᵀ.
    Linear,
    /// Gaussian kernel with the median heuristic bandwidth: sigma² is the
    /// median of pairwise squared distances.
    RbfMedian,
}

/// Square matrix of pairwise CKA values for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub kernel: KernelKind,
}

/// Kernel (Gram) matrix of a feature matrix with n >= 2 rows.
pub fn gram(x: &Tensor, kernel: KernelKind) -> Result<Tensor> {
    let n = check_features(x)?;
    let d = x.shape()[1];
    let mut out = vec![0.0; n * n];
    match kernel {
        KernelKind::Linear => {
            for i in 0..n {
                for j in 0..=i {
                    let mut s = 0.0;
                    for p in 0..d {
                        s += x.data()[i * d + p] * x.data()[j * d + p];
                    }
                    out[i * n + j] = s;
                    out[j * n + i] = s;
                }
            }
        }
        KernelKind::RbfMedian => {
            let mut d2 = vec![0.0; n * n];
            let mut pair_d2 = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in 0..i {
                    let mut s = 0.0;
                    for p in 0..d {
                        let diff = x.data()[i * d + p] - x.data()[j * d + p];
                        s += diff * diff;
                    }
                    d2[i * n + j] = s;
                    d2[j * n + i] = s;
                    pair_d2.push(s);
                }
            }
            pair_d2.sort_by(f64::total_cmp);
            let m = pair_d2.len();
            let median = if m % 2 == 1 {
                pair_d2[m / 2]
            } else {
                0.5 * (pair_d2[m / 2 - 1] + pair_d2[m / 2])
            };
            if median <= 0.0 {
                return Err(DiepError::Degenerate {
                    context: "rbf kernel: median pairwise distance is zero".to_string(),
                });
            }
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = (-d2[i * n + j] / (2.0 * median)).exp();
                }
            }
        }
    }
    Tensor::new(vec![n, n], out)
}

fn check_features(x: &Tensor) -> Result<usize> {
    if x.shape().len() != 2 || x.shape()[0] < 2 {
        return Err(DiepError::ShapeMismatch {
            op: "feature matrix",
            lhs: x.shape().to_vec(),
            rhs: vec![2, 0],
        });
    }
    if !x.is_finite() {
        return Err(DiepError::NonFinite {
            context: "feature matrix".to_string(),
        });
    }
    Ok(x.shape()[0])
}

/// HSIC(K, L) = trace(K H L H) / (n - 1)² with centering H = I - 11ᵀ/n.
pub fn hsic(k: &Tensor, l: &Tensor) -> Result<f64> {
    if k.shape() != l.shape() || k.shape().len() != 2 || k.shape()[0] != k.shape()[1] {
        return Err(DiepError::ShapeMismatch {
            op: "hsic",
            lhs: k.shape().to_vec(),
            rhs: l.shape().to_vec(),
        });
    }
    let n = k.shape()[0];
    if n < 2 {
        return Err(DiepError::ShapeMismatch {
            op: "hsic",
            lhs: k.shape().to_vec(),
            rhs: vec![2, 2],
        });
    }
    let kc = center(k);
    let lc = center(l);
    let dot: f64 = kc.iter().zip(lc.iter()).map(|(a, b)| a * b).sum();
    Ok(dot / ((n - 1) as f64 * (n - 1) as f64))
}

/// Double centering: out_ij = k_ij - rowmean_i - colmean_j + totalmean.
fn center(k: &Tensor) -> Vec<f64> {
    let n = k.shape()[0];
    let mut row_mean = vec![0.0; n];
    let mut col_mean = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = k.data()[i * n + j];
            row_mean[i] += v;
            col_mean[j] += v;
            total += v;
        }
    }
    for v in row_mean.iter_mut().chain(col_mean.iter_mut()) {
        *v /= n as f64;
    }
    total /= (n * n) as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k.data()[i * n + j] - row_mean[i] - col_mean[j] + total;
        }
    }
    out
}

/// Self-HSIC at or below this floor means the centered kernel is pure
/// rounding noise: the centered Frobenius mass sits at least 12 digits below
/// the raw kernel's, i.e. the features are constant up to roundoff. The
/// floor is relative to the kernel's own norm so that genuinely tiny but
/// varying features stay valid (CKA is scale invariant), and the zero
/// kernel is caught by the `<=` comparison.
fn self_hsic_floor(k: &Tensor) -> f64 {
    let n = k.shape()[0] as f64;
    let tiny = 1e-12 * k.norm() / (n - 1.0);
    tiny * tiny
}

/// Normalized CKA similarity of two feature matrices with equal row counts.
pub fn cka(x: &Tensor, y: &Tensor, kernel: KernelKind) -> Result<f64> {
    if x.shape()[0] != y.shape()[0] {
        return Err(DiepError::ShapeMismatch {
            op: "cka",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let kx = gram(x, kernel)?;
    let ky = gram(y, kernel)?;
    let hxy = hsic(&kx, &ky)?;
    let hxx = hsic(&kx, &kx)?;
    let hyy = hsic(&ky, &ky)?;
    if hxx <= self_hsic_floor(&kx) || hyy <= self_hsic_floor(&ky) {
        return Err(DiepError::Degenerate {
            context: "cka: constant features give zero self-HSIC".to_string(),
        });
    }
    Ok(hxy / (hxx * hyy).sqrt())
}

/// Outputs of every expert of one layer on a shared input batch `[n, d]`.
pub fn expert_features(model: &MoEModel, layer: usize, inputs: &Tensor) -> Result<Vec<Tensor>> {
    if layer >= model.layers.len() {
        return Err(DiepError::IndexOutOfRange {
            what: "layer",
            index: layer,
            bound: model.layers.len(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(inputs.clone());
    let mut features = Vec::with_capacity(model.layers[layer].expert_count());
    for expert in &model.layers[layer].experts {
        let nodes = crate::moe::ExpertNodes {
            w_up: tape.leaf(expert.w_up.clone()),
            b_up: tape.leaf(expert.b_up.clone()),
            w_down: tape.leaf(expert.w_down.clone()),
            b_down: tape.leaf(expert.b_down.clone()),
        };
        let out = expert_forward(&mut tape, x, &nodes)?;
        features.push(tape.value(out).clone());
    }
    Ok(features)
}

/// Pre-routing inputs of every layer under the full model on a calibration
/// set.
pub fn layer_inputs(model: &MoEModel, calibration: &CalibrationSet) -> Result<Vec<Tensor>> {
    calibration.check_tokens(model.config.vocab)?;
    let (tokens, _) = calibration.flattened();
    let (_, trace) = model.run_traced(&tokens, RunMode::Full)?;
    Ok(trace.layer_inputs)
}

/// Pairwise CKA between the experts of one layer, fed the same token batch.
pub fn expert_similarity(
    model: &MoEModel,
    layer: usize,
    calibration: &CalibrationSet,
    kernel: KernelKind,
) -> Result<SimilarityMatrix> {
    let inputs = layer_inputs(model, calibration)?;
    expert_similarity_from_inputs(model, layer, &inputs[layer], kernel)
}

/// As [`expert_similarity`] but with the layer inputs already computed.
pub fn expert_similarity_from_inputs(
    model: &MoEModel,
    layer: usize,
    inputs: &Tensor,
    kernel: KernelKind,
) -> Result<SimilarityMatrix> {
    let features = expert_features(model, layer, inputs)?;
    let n = features.len();
    let grams: Vec<Tensor> = features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            gram(f, kernel).map_err(|e| DiepError::Degenerate {
                context: format!("layer {layer} expert {i}: {e}"),
            })
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let hij = hsic(&grams[i], &grams[j])?;
            let hii = hsic(&grams[i], &grams[i])?;
            let hjj = hsic(&grams[j], &grams[j])?;
            if hii <= self_hsic_floor(&grams[i]) || hjj <= self_hsic_floor(&grams[j]) {
                return Err(DiepError::Degenerate {
                    context: format!(
                        "layer {layer} experts ({i},{j}): constant features give zero self-HSIC"
                    ),
                });
            }
            let v = hij / (hii * hjj).sqrt();
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(SimilarityMatrix {
        values: Tensor::new(vec![n, n], values)?,
        kernel,
    })
}

/// Cross-layer CKA: experts of layer l against experts of layer l+1, each
/// fed its own layer's pre-routing input.
pub fn adjacent_layer_similarity(
    model: &MoEModel,
    layer: usize,
    calibration: &CalibrationSet,
    kernel: KernelKind,
) -> Result<Tensor> {
    if layer + 1 >= model.layers.len() {
        return Err(DiepError::IndexOutOfRange {
            what: "adjacent layer pair",
            index: layer + 1,
            bound: model.layers.len(),
        });
    }
    let inputs = layer_inputs(model, calibration)?;
    let lower = expert_features(model, layer, &inputs[layer])?;
    let upper = expert_features(model, layer + 1, &inputs[layer + 1])?;
    let (n0, n1) = (lower.len(), upper.len());
    let mut values = vec![0.0; n0 * n1];
    for i in 0..n0 {
        for j in 0..n1 {
            values[i * n1 + j] = cka(&lower[i], &upper[j], kernel).map_err(|e| {
                DiepError::Degenerate {
                    context: format!("layers ({},{}) experts ({i},{j}): {e}", layer, layer + 1),
                }
            })?;
        }
    }
    Tensor::new(vec![n0, n1], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_features(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_gram_of_identity_rows() {
        let x = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let k = gram(&x, KernelKind::Linear).unwrap();
        assert_eq!(k.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rbf_diagonal_is_one_and_scale_invariant() {
        let x = rand_features(3, 5, 3);
        let k = gram(&x, KernelKind::RbfMedian).unwrap();
        for i in 0..5 {
            assert_eq!(k.at(i, i), 1.0);
        }
        let scaled = Tensor::new(
            vec![5, 3],
            x.data().iter().map(|v| v * 37.5).collect(),
        )
        .unwrap();
        let ks = gram(&scaled, KernelKind::RbfMedian).unwrap();
        for (a, b) in k.data().iter().zip(ks.data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rbf_rejects_identical_rows() {
        let x = Tensor::matrix(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            gram(&x, KernelKind::RbfMedian),
            Err(DiepError::Degenerate { .. })
        ));
    }

    #[test]
    fn hsic_annihilates_constant_matrices() {
        let x = rand_features(5, 4, 3);
        let k = gram(&x, KernelKind::Linear).unwrap();
        let constant = Tensor::new(vec![4, 4], vec![0.7; 16]).unwrap();
        assert!(hsic(&k, &constant).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn hsic_self_is_nonnegative_and_sizes_must_match() {
        let x = rand_features(7, 6, 2);
        let k = gram(&x, KernelKind::Linear).unwrap();
        assert!(hsic(&k, &k).unwrap() >= 0.0);

        let small = Tensor::zeros(vec![3, 3]);
        assert!(hsic(&k, &small).is_err());
    }

    #[test]
    fn cka_self_is_one_and_symmetric() {
        let x = rand_features(11, 8, 4);
        let y = rand_features(13, 8, 4);
        for kernel in [KernelKind::Linear, KernelKind::RbfMedian] {
            assert!((cka(&x, &x, kernel).unwrap() - 1.0).abs() <= 1e-9);
            let xy = cka(&x, &y, kernel).unwrap();
            let yx = cka(&y, &x, kernel).unwrap();
            assert!((xy - yx).abs() <= 1e-12);
            assert!((0.0..=1.0 + 1e-9).contains(&xy));
        }
    }

    #[test]
    fn linear_cka_is_rotation_invariant() {
        let x = rand_features(17, 6, 3);
        // Givens rotation in coordinates (0, 2)
        let (c, s) = (0.6_f64, 0.8_f64);
        let q = Tensor::matrix(&[
            vec![c, 0.0, -s],
            vec![0.0, 1.0, 0.0],
            vec![s, 0.0, c],
        ])
        .unwrap();
        let mut rotated = vec![0.0; 18];
        for i in 0..6 {
            for j in 0..3 {
                for p in 0..3 {
                    rotated[i * 3 + j] += x.at(i, p) * q.at(p, j);
                }
            }
        }
        let xq = Tensor::new(vec![6, 3], rotated).unwrap();
        let v = cka(&x, &xq, KernelKind::Linear).unwrap();
        assert!((v - 1.0).abs() <= 1e-9, "cka after rotation {v}");
    }

    #[test]
    fn cka_rejects_constant_features() {
        let x = Tensor::new(vec![4, 2], vec![0.3; 8]).unwrap();
        let y = rand_features(19, 4, 2);
        assert!(matches!(
            cka(&x, &y, KernelKind::Linear),
            Err(DiepError::Degenerate { .. })
        ));
    }
}
