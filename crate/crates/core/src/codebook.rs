//! Jointly trained codebook: nearest-neighbour quantization, the codebook and
//! commitment losses, and usage statistics.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Graph, NodeId, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CodebookError {
    #[error("codebook must have at least one entry of dimension >= 1, got {entries}x{dim}")]
    Empty { entries: usize, dim: usize },
    #[error("codebook entries must be finite")]
    NonFinite,
    #[error("latent dimension {got} does not match codebook dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sequence length {left} does not match {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("code index {index} out of range for {entries} entries")]
    IndexOutOfRange { index: usize, entries: usize },
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

/// `K` code vectors of dimension `D`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self, CodebookError> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(CodebookError::Empty {
                entries: entries.nrows(),
                dim: entries.ncols(),
            });
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(CodebookError::NonFinite);
        }
        Ok(Codebook { entries })
    }

    /// Entries drawn uniformly from `[-0.5, 0.5]`.
    pub fn random(k: usize, dim: usize, seed: u64) -> Result<Self, CodebookError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(Array2::from_shape_fn((k, dim), |_| {
            rng.random_range(-0.5..=0.5)
        }))
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.entries.row(k)
    }
}

/// Quantized latents: one code index per frame plus the selected vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSequence {
    pub indices: Vec<usize>,
    pub vectors: Tensor,
}

impl CodeSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Writes `frame_index,code_id` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "frame_index,code_id")?;
        for (t, k) in self.indices.iter().enumerate() {
            writeln!(w, "{t},{k}")?;
        }
        Ok(())
    }
}

/// Index of the nearest entry per row of `z` by squared Euclidean distance.
/// Ties go to the lowest index.
pub fn nearest_indices(z: ArrayView2<f64>, entries: ArrayView2<f64>) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|frame| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, e) in entries.rows().into_iter().enumerate() {
                let mut d = 0.0;
                for (a, b) in frame.iter().zip(e.iter()) {
                    let diff = a - b;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Maps every latent frame to its nearest codebook entry.
pub fn quantize(z: &Tensor, cb: &Codebook) -> Result<CodeSequence, CodebookError> {
    if z.nrows() == 0 {
        return Ok(CodeSequence {
            indices: Vec::new(),
            vectors: Array2::zeros((0, cb.dim())),
        });
    }
    if z.ncols() != cb.dim() {
        return Err(CodebookError::DimensionMismatch {
            expected: cb.dim(),
            got: z.ncols(),
        });
    }
    let indices = nearest_indices(z.view(), cb.entries.view());
    let mut vectors = Array2::zeros((indices.len(), cb.dim()));
    for (t, &k) in indices.iter().enumerate() {
        vectors.row_mut(t).assign(&cb.entries.row(k));
    }
    Ok(CodeSequence { indices, vectors })
}

/// In-graph quantization: selects codes for `z` and gathers them from the
/// codebook node so that the codebook receives gradients. Returns the gathered
/// node and the indices.
pub fn quantize_node(
    g: &mut Graph,
    z: NodeId,
    codebook: NodeId,
) -> Result<(NodeId, Vec<usize>), CodebookError> {
    let (zs, cs) = (g.shape(z), g.shape(codebook));
    if zs[1] != cs[1] {
        return Err(CodebookError::DimensionMismatch {
            expected: cs[1],
            got: zs[1],
        });
    }
    let computed = if g.is_replaying() {
        Vec::new()
    } else {
        nearest_indices(g.value(z).view(), g.value(codebook).view())
    };
    let indices = g.decide_indices(|| computed)?;
    let index: Vec<Option<usize>> = indices.iter().copied().map(Some).collect();
    let q = g.gather_rows(codebook, &index)?;
    Ok((q, indices))
}

fn check_pair(g: &Graph, z: NodeId, q: NodeId) -> Result<(), CodebookError> {
    let (zs, qs) = (g.shape(z), g.shape(q));
    if zs[0] != qs[0] {
        return Err(CodebookError::LengthMismatch {
            left: zs[0],
            right: qs[0],
        });
    }
    if zs[1] != qs[1] {
        return Err(CodebookError::DimensionMismatch {
            expected: qs[1],
            got: zs[1],
        });
    }
    Ok(())
}

/// `||sg(z) - q||²` averaged over frames and dimensions; only the codebook
/// receives gradient.
pub fn vq_loss(g: &mut Graph, z: NodeId, q: NodeId) -> Result<NodeId, CodebookError> {
    check_pair(g, z, q)?;
    let sz = g.stop_gradient(z)?;
    Ok(g.mse(sz, q)?)
}

/// `||z - sg(q)||²` averaged over frames and dimensions; only the encoder
/// producing `z` receives gradient.
pub fn commitment_loss(g: &mut Graph, z: NodeId, q: NodeId) -> Result<NodeId, CodebookError> {
    check_pair(g, z, q)?;
    let sq = g.stop_gradient(q)?;
    Ok(g.mse(z, sq)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationReport {
    pub histogram: Vec<u64>,
    pub used_fraction: f64,
    pub perplexity: f64,
}

impl UtilizationReport {
    /// Relative frequency per code.
    pub fn distribution(&self) -> Vec<f64> {
        let total: u64 = self.histogram.iter().sum();
        if total == 0 {
            return vec![0.0; self.histogram.len()];
        }
        self.histogram
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }

    /// Shannon entropy of the code distribution in nats.
    pub fn entropy_nats(&self) -> f64 {
        self.distribution()
            .into_iter()
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }
}

pub fn usage_stats<'a>(
    seqs: impl IntoIterator<Item = &'a [usize]>,
    k: usize,
) -> Result<UtilizationReport, CodebookError> {
    let mut histogram = vec![0u64; k];
    for seq in seqs {
        for &idx in seq {
            if idx >= k {
                return Err(CodebookError::IndexOutOfRange {
                    index: idx,
                    entries: k,
                });
            }
            histogram[idx] += 1;
        }
    }
    let used = histogram.iter().filter(|&&c| c > 0).count();
    let mut report = UtilizationReport {
        histogram,
        used_fraction: used as f64 / k as f64,
        perplexity: 1.0,
    };
    report.perplexity = report.entropy_nats().exp();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::Rng;

    fn random_latents(rows: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_match_selects_that_entry() {
        let cb = Codebook::random(8, 4, 3).unwrap();
        let z = cb.entries().slice(ndarray::s![3..4, ..]).to_owned();
        let cs = quantize(&z, &cb).unwrap();
        assert_eq!(cs.indices, vec![3]);
        assert_eq!(cs.vectors.row(0), cb.entry(3));
    }

    #[test]
    fn single_entry_codebook() {
        let cb = Codebook::random(1, 4, 0).unwrap();
        let cs = quantize(&random_latents(5, 4, 1), &cb).unwrap();
        assert_eq!(cs.indices, vec![0; 5]);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let cb = Codebook::new(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let cs = quantize(&array![[0.0, 0.0], [0.5, 0.5]], &cb).unwrap();
        assert_eq!(cs.indices, vec![0, 0]);
    }

    #[test]
    fn empty_sequence_and_dimension_errors() {
        let cb = Codebook::random(4, 3, 0).unwrap();
        assert!(quantize(&Array2::zeros((0, 3)), &cb).unwrap().is_empty());
        assert_eq!(
            quantize(&Array2::zeros((2, 5)), &cb),
            Err(CodebookError::DimensionMismatch {
                expected: 3,
                got: 5
            })
        );
        assert!(Codebook::new(Array2::zeros((0, 3))).is_err());
        assert!(Codebook::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn random_init_range() {
        let cb = Codebook::random(160, 64, 11).unwrap();
        assert_eq!((cb.len(), cb.dim()), (160, 64));
        assert!(cb.entries().iter().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn matches_brute_force_scan() {
        let cb = Codebook::random(160, 64, 5).unwrap();
        let z = random_latents(200, 64, 6);
        let cs = quantize(&z, &cb).unwrap();
        for (t, frame) in z.rows().into_iter().enumerate() {
            let dists: Vec<f64> = cb
                .entries()
                .rows()
                .into_iter()
                .map(|e| (&frame - &e).mapv(|d| d * d).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let expected = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(cs.indices[t], expected);
        }
    }

    fn losses_single_frame(dim: usize) -> (f64, f64, Tensor, Tensor, Tensor, Tensor) {
        let mut zv = Array2::zeros((1, dim));
        zv[[0, 0]] = 1.0;
        let qv = Array2::zeros((1, dim));
        let mut g = Graph::new();
        let z = g.param("z", zv.clone()).unwrap();
        let q = g.param("q", qv.clone()).unwrap();
        let vq = vq_loss(&mut g, z, q).unwrap();
        let gv = g.backward(vq).unwrap().params();
        let mut g2 = Graph::new();
        let z2 = g2.param("z", zv).unwrap();
        let q2 = g2.param("q", qv).unwrap();
        let c = commitment_loss(&mut g2, z2, q2).unwrap();
        let gc = g2.backward(c).unwrap().params();
        (
            g.scalar(vq),
            g2.scalar(c),
            gv["z"].clone(),
            gv["q"].clone(),
            gc["z"].clone(),
            gc["q"].clone(),
        )
    }

    #[test]
    fn vq_and_commitment_single_frame() {
        // squared distance 1 averaged over D components
        for dim in [1usize, 64] {
            let (vq, c, vq_dz, vq_dq, c_dz, c_dq) = losses_single_frame(dim);
            let d = dim as f64;
            assert_eq!(vq, 1.0 / d);
            assert_eq!(c, 1.0 / d);
            assert!(vq_dz.iter().all(|&v| v == 0.0));
            assert!(c_dq.iter().all(|&v| v == 0.0));
            assert_eq!(vq_dq[[0, 0]], -2.0 / d);
            assert_eq!(c_dz[[0, 0]], 2.0 / d);
            assert!(c_dz.iter().skip(1).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn coincident_losses_are_zero() {
        let mut g = Graph::new();
        let z = g.param("z", array![[0.3, -0.2]]).unwrap();
        let q = g.param("q", array![[0.3, -0.2]]).unwrap();
        let a = vq_loss(&mut g, z, q).unwrap();
        let b = commitment_loss(&mut g, z, q).unwrap();
        assert_eq!((g.scalar(a), g.scalar(b)), (0.0, 0.0));
        let short = g.param("s", array![[0.3, -0.2], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            vq_loss(&mut g, short, q),
            Err(CodebookError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn codebook_and_encoder_gradients_match_finite_differences() {
        let cb = Codebook::random(6, 3, 2).unwrap();
        let z = random_latents(4, 3, 9);
        let idx: Vec<Option<usize>> = quantize(&z, &cb)
            .unwrap()
            .indices
            .into_iter()
            .map(Some)
            .collect();
        let eval = |zv: &Tensor, cv: &Tensor, which: usize| -> (f64, Tensor, Tensor) {
            let mut g = Graph::new();
            let zn = g.param("z", zv.clone()).unwrap();
            let cn = g.param("cb", cv.clone()).unwrap();
            let q = g.gather_rows(cn, &idx).unwrap();
            let l = if which == 0 {
                vq_loss(&mut g, zn, q)
            } else {
                commitment_loss(&mut g, zn, q)
            }
            .unwrap();
            let grads = g.backward(l).unwrap().params();
            (g.scalar(l), grads["z"].clone(), grads["cb"].clone())
        };
        let h = 1e-5;
        // vq loss: codebook entries; commitment: z
        let (_, _, dcb) = eval(&z, cb.entries(), 0);
        for i in 0..cb.entries().len() {
            let (r, c) = (i / 3, i % 3);
            let mut p = cb.entries().clone();
            p[[r, c]] += h;
            let mut m = cb.entries().clone();
            m[[r, c]] -= h;
            let n = (eval(&z, &p, 0).0 - eval(&z, &m, 0).0) / (2.0 * h);
            assert!((n - dcb[[r, c]]).abs() <= 1e-4 * n.abs().max(dcb[[r, c]].abs()).max(1e-6));
        }
        let (_, dz, dcb_c) = eval(&z, cb.entries(), 1);
        assert!(dcb_c.iter().all(|&v| v == 0.0));
        for i in 0..z.len() {
            let (r, c) = (i / 3, i % 3);
            let mut p = z.clone();
            p[[r, c]] += h;
            let mut m = z.clone();
            m[[r, c]] -= h;
            let n = (eval(&p, cb.entries(), 1).0 - eval(&m, cb.entries(), 1).0) / (2.0 * h);
            assert!((n - dz[[r, c]]).abs() <= 1e-4 * n.abs().max(dz[[r, c]].abs()).max(1e-6));
        }
    }

    #[test]
    fn usage_degenerate_uniform_and_coin() {
        let all_zero = [0usize; 10];
        let r = usage_stats([&all_zero[..]], 160).unwrap();
        assert_eq!(r.perplexity, 1.0);
        assert_eq!(r.used_fraction, 1.0 / 160.0);

        let uniform: Vec<usize> = (0..160).collect();
        let r = usage_stats([&uniform[..]], 160).unwrap();
        assert!((r.perplexity - 160.0).abs() < 1e-9);
        assert_eq!(r.used_fraction, 1.0);

        let coin = [0usize, 0, 1, 1];
        let r = usage_stats([&coin[..]], 160).unwrap();
        assert!((r.perplexity - 2.0).abs() < 1e-12);
        assert_eq!(r.used_fraction, 2.0 / 160.0);

        assert_eq!(
            usage_stats([&[3usize][..]], 3),
            Err(CodebookError::IndexOutOfRange {
                index: 3,
                entries: 3
            })
        );
    }

    #[test]
    fn csv_export() {
        let cs = CodeSequence {
            indices: vec![4, 4, 1],
            vectors: Array2::zeros((3, 2)),
        };
        let mut buf = Vec::new();
        cs.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "frame_index,code_id\n0,4\n1,4\n2,1\n"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn quantize_is_idempotent_and_never_worse(seed in 0u64..1000, rows in 1usize..12) {
            let cb = Codebook::random(16, 5, seed).unwrap();
            let z = random_latents(rows, 5, seed + 1);
            let cs = quantize(&z, &cb).unwrap();
            let again = quantize(&cs.vectors, &cb).unwrap();
            prop_assert_eq!(&again.indices, &cs.indices);
            for (t, frame) in z.rows().into_iter().enumerate() {
                prop_assert_eq!(cs.vectors.row(t), cb.entry(cs.indices[t]));
                let chosen: f64 = (&frame - &cs.vectors.row(t)).mapv(|d| d * d).sum();
                for e in cb.entries().rows() {
                    let d: f64 = (&frame - &e).mapv(|d| d * d).sum();
                    prop_assert!(chosen <= d);
                }
            }
        }

        #[test]
        fn vq_and_commitment_agree_forward(seed in 0u64..1000) {
            let cb = Codebook::random(10, 4, seed).unwrap();
            let z = random_latents(7, 4, seed ^ 77);
            let cs = quantize(&z, &cb).unwrap();
            let mut g = Graph::new();
            let zn = g.constant(z).unwrap();
            let qn = g.constant(cs.vectors).unwrap();
            let a = vq_loss(&mut g, zn, qn).unwrap();
            let b = commitment_loss(&mut g, zn, qn).unwrap();
            prop_assert_eq!(g.scalar(a), g.scalar(b));
        }
    }
}
