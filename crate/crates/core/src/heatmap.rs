//! Heatmaps over a 1D embedding: cells are binned by their coordinate and
//! each gene becomes the vector of its summed expression per bin.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

pub const DEFAULT_BINS: usize = 256;

/// Equal-width bins over `[min y, max y]`, closed at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct BinAssignment {
    pub n_bins: usize,
    pub bin_of: Vec<usize>,
    pub bin_edges: Vec<f64>,
}

impl BinAssignment {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_bins];
        for &b in &self.bin_of {
            c[b] += 1;
        }
        c
    }
}

pub fn bin_embedding<T: Scalar>(y: &[T], n_bins: usize) -> Result<BinAssignment> {
    if n_bins == 0 {
        return Err(Error::invalid("n_bins", "must be at least 1"));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("embedding"));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("embedding coordinate of point {i}")));
    }
    let (mut lo, mut hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v.as_f64()), b.max(v.as_f64())));
    if hi == lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / n_bins as f64;
    let mut bin_edges: Vec<f64> = (0..=n_bins).map(|b| lo + b as f64 * width).collect();
    bin_edges[n_bins] = hi;
    let bin_of = y
        .iter()
        .map(|v| (((v.as_f64() - lo) / width).floor() as usize).min(n_bins - 1))
        .collect();
    Ok(BinAssignment {
        n_bins,
        bin_of,
        bin_edges,
    })
}

/// Genes x bins sums with gene labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneBinMatrix {
    pub genes: Vec<String>,
    pub values: DenseMatrix<f64>,
}

impl GeneBinMatrix {
    pub fn index_of(&self, gene: &str) -> Option<usize> {
        self.genes.iter().position(|g| g == gene)
    }

    /// Divides every bin by its cell count (empty bins stay zero).
    pub fn normalized_by_counts(&self, bins: &BinAssignment) -> Self {
        let counts = bins.counts();
        let mut values = self.values.clone();
        for g in 0..values.nrows() {
            for (x, &c) in values.row_mut(g).iter_mut().zip(&counts) {
                if c > 0 {
                    *x /= c as f64;
                }
            }
        }
        Self {
            genes: self.genes.clone(),
            values,
        }
    }
}

/// Entry `(g, b)` is the expression of gene `g` summed over the cells in bin
/// `b`. `expr` is genes x cells.
pub fn gene_vectors<T: Scalar>(
    expr: &DenseMatrix<T>,
    genes: &[String],
    bins: &BinAssignment,
) -> Result<GeneBinMatrix> {
    if expr.ncols() != bins.bin_of.len() {
        return Err(Error::shape("expression cells", bins.bin_of.len(), expr.ncols()));
    }
    if genes.len() != expr.nrows() {
        return Err(Error::shape("gene labels", expr.nrows(), genes.len()));
    }
    let nb = bins.n_bins;
    let mut values = DenseMatrix::zeros(expr.nrows(), nb);
    values
        .as_mut_slice()
        .par_chunks_mut(nb)
        .enumerate()
        .for_each(|(g, out)| {
            for (&b, &x) in bins.bin_of.iter().zip(expr.row(g)) {
                out[b] += x.as_f64();
            }
        });
    Ok(GeneBinMatrix {
        genes: genes.to_vec(),
        values,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Each seed gene followed by its `n_extra` nearest non-seed genes in the
/// bin-vector metric; repeated genes keep their first position.
pub fn enrich_goi(g: &GeneBinMatrix, goi: &[String], n_extra: usize) -> Result<Vec<String>> {
    if goi.is_empty() {
        return Err(Error::invalid("goi", "at least one gene of interest is required"));
    }
    let index: HashMap<&str, usize> = g.genes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let seeds: Vec<usize> = goi
        .iter()
        .map(|s| index.get(s.as_str()).copied().ok_or_else(|| Error::UnknownGene(s.clone())))
        .collect::<Result<_>>()?;
    let seed_set: HashSet<usize> = seeds.iter().copied().collect();
    let neighbors: Vec<Vec<usize>> = seeds
        .par_iter()
        .map(|&s| {
            let mut cand: Vec<(f64, usize)> = (0..g.genes.len())
                .filter(|j| !seed_set.contains(j))
                .map(|j| (distance(g.values.row(s), g.values.row(j)), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().take(n_extra).map(|c| c.1).collect()
        })
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (&s, nb) in seeds.iter().zip(&neighbors) {
        for &i in std::iter::once(&s).chain(nb) {
            if seen.insert(i) {
                out.push(g.genes[i].clone());
            }
        }
    }
    Ok(out)
}

/// Rows of `g` for the listed genes, in order.
pub fn heatmap_rows(g: &GeneBinMatrix, genes: &[String]) -> Result<DenseMatrix<f64>> {
    let nb = g.values.ncols();
    let mut values = Vec::with_capacity(genes.len() * nb);
    for name in genes {
        let i = g.index_of(name).ok_or_else(|| Error::UnknownGene(name.clone()))?;
        values.extend_from_slice(g.values.row(i));
    }
    DenseMatrix::new(genes.len(), nb, values)
}

/// CSV with a `gene,bin_0,...` header and one labeled row per gene.
pub fn write_heatmap_csv<W: Write>(w: W, genes: &[String], rows: &DenseMatrix<f64>) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    write!(w, "gene")?;
    for b in 0..rows.ncols() {
        write!(w, ",bin_{b}")?;
    }
    writeln!(w)?;
    for (name, row) in genes.iter().zip(rows.rows_iter()) {
        write!(w, "{name}")?;
        for x in row {
            write!(w, ",{x:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i}")).collect()
    }

    #[test]
    fn binning_rules() {
        let b = bin_embedding(&[0.0, 0.1, 0.9, 1.0], 2).unwrap();
        assert_eq!(b.bin_of, vec![0, 0, 1, 1]);
        assert_eq!(b.bin_edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(bin_embedding(&[3.0, -1.0, 7.0], 1).unwrap().bin_of, vec![0, 0, 0]);
        let d = bin_embedding(&[2.0, 2.0, 2.0], 5).unwrap();
        assert_eq!(d.bin_of, vec![2, 2, 2]);
        assert!((d.bin_edges[5] - d.bin_edges[0] - 1.0).abs() < 1e-15);
        assert!(bin_embedding(&[f64::NAN], 3).is_err());
        assert!(bin_embedding::<f64>(&[1.0], 0).is_err());
    }

    #[test]
    fn edges_strictly_increase() {
        let y: Vec<f64> = (0..50).map(|i| (i as f64).sqrt()).collect();
        let b = bin_embedding(&y, 16).unwrap();
        assert!(b.bin_edges.windows(2).all(|w| w[0] < w[1]));
        assert!(b.bin_of.iter().all(|&x| x < 16));
    }

    #[test]
    fn one_cell_per_bin_is_a_permutation() {
        let y = [2.0, 0.0, 1.0];
        let b = bin_embedding(&y, 3).unwrap();
        let expr = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = gene_vectors(&expr, &names(2), &b).unwrap();
        assert_eq!(g.values.as_slice(), &[2.0, 3.0, 1.0, 5.0, 6.0, 4.0]);
    }

    #[test]
    fn single_bin_holds_row_sums() {
        let b = bin_embedding(&[1.0, 1.0, 1.0, 1.0], 3).unwrap();
        let expr = DenseMatrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let g = gene_vectors(&expr, &names(3), &b).unwrap();
        for i in 0..3 {
            assert_eq!(g.values.row(i), &[0.0, (4 * i + 6) as f64, 0.0]);
        }
    }

    #[test]
    fn matches_direct_loop_and_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        let expr = DenseMatrix::from_fn(20, 100, |_, _| rng.random_range(0.0..10.0));
        let b = bin_embedding(&y, 5).unwrap();
        let g = gene_vectors(&expr, &names(20), &b).unwrap();
        for gene in 0..20 {
            for bin in 0..5 {
                let mut want = 0.0;
                for c in 0..100 {
                    if b.bin_of[c] == bin {
                        want += expr.get(gene, c);
                    }
                }
                assert!((g.values.get(gene, bin) - want).abs() < 1e-12);
            }
            let total: f64 = expr.row(gene).iter().sum();
            assert!((g.values.row(gene).iter().sum::<f64>() - total).abs() <= 1e-9 * total);
        }

        // permuting cells changes nothing
        let perm: Vec<usize> = (0..100).rev().collect();
        let y2: Vec<f64> = perm.iter().map(|&c| y[c]).collect();
        let expr2 = DenseMatrix::from_fn(20, 100, |g, c| expr.get(g, perm[c]));
        let g2 = gene_vectors(&expr2, &names(20), &bin_embedding(&y2, 5).unwrap()).unwrap();
        assert!(g2.values.max_abs_diff(&g.values) < 1e-12);
    }

    #[test]
    fn enrichment_order_and_rules() {
        let values = DenseMatrix::new(
            6,
            2,
            vec![0.0, 0.0, 10.0, 10.0, 0.5, 0.0, 10.0, 10.5, 0.0, 0.0, 3.0, 3.0],
        )
        .unwrap();
        let g = GeneBinMatrix {
            genes: names(6),
            values,
        };
        let goi = vec!["g0".to_string(), "g1".to_string()];
        assert_eq!(enrich_goi(&g, &goi, 0).unwrap(), goi);
        // g4 duplicates g0 and sorts first
        assert_eq!(enrich_goi(&g, &goi, 2).unwrap(), vec!["g0", "g4", "g2", "g1", "g3", "g5"]);
        assert!(matches!(
            enrich_goi(&g, &["nope".to_string()], 1),
            Err(Error::UnknownGene(ref s)) if s == "nope"
        ));
    }

    #[test]
    fn three_seeds_with_four_each() {
        // three well separated gene groups of six around distinct profiles
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values = DenseMatrix::from_fn(18, 8, |g, b| {
            let profile = if b / 3 == g / 6 { 50.0 } else { 0.0 };
            profile + rng.random_range(0.0..1.0)
        });
        let g = GeneBinMatrix {
            genes: names(18),
            values,
        };
        let goi: Vec<String> = ["g0", "g6", "g12"].iter().map(|s| s.to_string()).collect();
        let out = enrich_goi(&g, &goi, 4).unwrap();
        assert_eq!(out.len(), 15);
        for (block, seed) in out.chunks(5).zip([0usize, 6, 12]) {
            assert_eq!(block[0], format!("g{seed}"));
            for name in &block[1..] {
                let i: usize = name[1..].parse().unwrap();
                assert_eq!(i / 6, seed / 6);
            }
        }
        let d = |a: usize, b: usize| distance(g.values.row(a), g.values.row(b));
        assert_eq!(d(3, 17), d(17, 3));
        assert_eq!(heatmap_rows(&g, &out).unwrap().shape(), (15, 8));
    }

    #[test]
    fn csv_layout() {
        let rows = DenseMatrix::new(2, 2, vec![1.0, 2.5, 0.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_heatmap_csv(&mut buf, &["a".into(), "b".into()], &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "gene,bin_0,bin_1\na,1.0,2.5\nb,0.0,4.0\n");
    }
}
