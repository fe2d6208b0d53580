use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fastsne::oocpca::{read_csv, write_binary_file};
use fastsne::DenseMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn fastsne(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastsne"))
        .args(args)
        .env_remove("FASTSNE_THREADS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_text(path: &Path, rows: impl IntoIterator<Item = String>) {
    let mut s = String::new();
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

/// `per` points around each of `k` centers spaced `sep` apart on the axes.
fn clusters(k: usize, per: usize, dims: usize, sep: f64, seed: u64) -> (DenseMatrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        for _ in 0..per {
            for d in 0..dims {
                let center = if d == c % dims { sep } else { 0.0 };
                let z: f64 = rng.sample(StandardNormal);
                values.push(center + z);
            }
            labels.push(c);
        }
    }
    (DenseMatrix::new(k * per, dims, values).unwrap(), labels)
}

fn matrix_csv(path: &Path, a: &DenseMatrix<f64>) {
    write_text(
        path,
        a.rows_iter().map(|r| r.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")),
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn tsne_writes_embedding_and_kl_log() {
    let dir = tempfile::tempdir().unwrap();
    let (x, _) = clusters(3, 40, 5, 8.0, 1);
    let input = dir.path().join("x.csv");
    matrix_csv(&input, &x);
    let out = dir.path().join("y.csv");
    let svg = dir.path().join("y.svg");
    let o = fastsne(&[
        "tsne", "--input", p(&input), "--output", p(&out), "--dims", "2", "--perplexity", "10", "--seed", "1",
        "--max-iter", "300", "--svg", p(&svg),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let y = read_csv(&out, false).unwrap();
    assert_eq!(y.shape(), (120, 2));
    assert!(y.is_finite());
    let kl = fs::read_to_string(dir.path().join("y.csv.kl.csv")).unwrap();
    let lines: Vec<&str> = kl.lines().collect();
    assert_eq!(lines[0], "iteration,kl");
    assert_eq!(lines.len(), 301);
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn identical_seed_gives_identical_bytes_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (x, _) = clusters(2, 60, 4, 6.0, 2);
    let input = dir.path().join("x.csv");
    matrix_csv(&input, &x);
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = fastsne(&[
            "--threads", threads, "tsne", "--input", p(&input), "--output", p(&out), "--perplexity", "10",
            "--seed", "7", "--max-iter", "300",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (fs::read(&out).unwrap(), fs::read(dir.path().join(format!("{name}.kl.csv"))).unwrap())
    };
    let a = run("a.csv", "1");
    let b = run("b.csv", "4");
    let c = run("c.csv", "4");
    assert_eq!(a, b);
    assert_eq!(b, c);
}

#[test]
fn three_dimensional_output_is_a_usage_error() {
    let o = fastsne(&["tsne", "--input", "x.csv", "--output", "y.csv", "--dims", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_schedule_exits_one_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (x, _) = clusters(2, 10, 3, 5.0, 3);
    let input = dir.path().join("x.csv");
    matrix_csv(&input, &x);
    let out = dir.path().join("y.csv");
    let o = fastsne(&[
        "tsne", "--input", p(&input), "--output", p(&out), "--perplexity", "3", "--max-iter", "100",
        "--stop-early-exag-iter", "250",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--stop-early-exag-iter"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn missing_input_exits_one_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.bin");
    let o = fastsne(&["pca", "--input", p(&missing), "--output", p(&dir.path().join("out")), "--k", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
}

fn rank_three(m: usize, n: usize, seed: u64) -> DenseMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |r: usize, c: usize| DenseMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let (left, right) = (normal(m, 3), normal(3, n));
    left.matmul(&right).unwrap()
}

fn svd_oracle(a: &DenseMatrix<f64>) -> Vec<f64> {
    let dm = DMatrix::from_row_slice(a.nrows(), a.ncols(), a.as_slice());
    let mut s: Vec<f64> = dm.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

#[test]
fn pca_of_binary_rank_three_matches_dense_svd() {
    let dir = tempfile::tempdir().unwrap();
    let a = rank_three(100, 40, 4);
    let input = dir.path().join("a.bin");
    write_binary_file(&input, &a).unwrap();
    let prefix = dir.path().join("pca");
    let o = fastsne(&["pca", "--input", p(&input), "--output", p(&prefix), "--k", "3", "--mem", "8KiB"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = read_csv(PathBuf::from(format!("{}.S.csv", p(&prefix))), false).unwrap();
    assert_eq!(s.shape(), (3, 1));
    let oracle = svd_oracle(&a);
    for (i, (&got, &want)) in s.as_slice().iter().zip(&oracle).enumerate() {
        assert!((got - want).abs() <= 1e-9 * want, "sigma_{i}: {got} vs {want}");
    }
    let u = read_csv(PathBuf::from(format!("{}.U.csv", p(&prefix))), false).unwrap();
    let v = read_csv(PathBuf::from(format!("{}.V.csv", p(&prefix))), false).unwrap();
    assert_eq!(u.shape(), (100, 3));
    assert_eq!(v.shape(), (40, 3));
}

#[test]
fn pca_accepts_csv_and_binary_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = rank_three(60, 12, 5);
    let input = dir.path().join("a.csv");
    matrix_csv(&input, &a);
    let prefix = dir.path().join("out");
    let o = fastsne(&[
        "pca", "--input", p(&input), "--output", p(&prefix), "--k", "3", "--output-format", "bin",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = fastsne::oocpca::read_binary_file(format!("{}.S.bin", p(&prefix))).unwrap();
    let oracle = svd_oracle(&a);
    for (&got, &want) in s.as_slice().iter().zip(&oracle) {
        assert!((got - want).abs() <= 1e-9 * want);
    }
}

#[test]
fn pca_budget_below_one_row_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = rank_three(50, 40, 6);
    let input = dir.path().join("a.bin");
    write_binary_file(&input, &a).unwrap();
    let o = fastsne(&["pca", "--input", p(&input), "--output", p(&dir.path().join("o")), "--k", "3", "--mem", "100"]);
    assert_eq!(o.status.code(), Some(1));
}

fn expression_csv(path: &Path, genes: &[String], expr: &DenseMatrix<f64>) {
    let header = std::iter::once("gene".to_string())
        .chain((0..expr.ncols()).map(|c| format!("cell_{c}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows = genes.iter().zip(expr.rows_iter()).map(|(g, r)| {
        std::iter::once(g.clone()).chain(r.iter().map(|x| format!("{x:?}"))).collect::<Vec<_>>().join(",")
    });
    write_text(path, std::iter::once(header).chain(rows));
}

fn small_heatmap_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let emb = dir.join("emb.csv");
    write_text(&emb, (0..20).map(|i| format!("{}", i as f64 * 0.5)));
    let genes: Vec<String> = (0..6).map(|g| format!("g{g}")).collect();
    let expr = DenseMatrix::from_fn(6, 20, |g, c| ((g * 7 + c * 3) % 5) as f64);
    let path = dir.join("expr.csv");
    expression_csv(&path, &genes, &expr);
    (emb, path)
}

#[test]
fn unknown_gene_exits_one_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, expr) = small_heatmap_inputs(dir.path());
    let out = dir.path().join("h.csv");
    let o = fastsne(&[
        "heatmap", "--embedding", p(&emb), "--expression", p(&expr), "--output", p(&out), "--goi", "g1,NOPE",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("NOPE"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn no_extra_genes_keeps_only_goi_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, expr) = small_heatmap_inputs(dir.path());
    let out = dir.path().join("h.csv");
    let o = fastsne(&[
        "heatmap", "--embedding", p(&emb), "--expression", p(&expr), "--output", p(&out), "--goi", "g3,g1",
        "--n-extra", "0", "--n-bins", "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["g3", "g1"]);
    assert_eq!(text.lines().next().unwrap(), "gene,bin_0,bin_1,bin_2,bin_3");
}

/// Three cell clusters, three gene groups; group `c` is expressed only in
/// cluster `c`. A 1D embedding followed by a heatmap must show three row
/// groups with disjoint bin supports.
#[test]
fn one_dimensional_tsne_then_heatmap_shows_three_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let per = 60;
    let (x, labels) = clusters(3, per, 10, 12.0, 8);
    let cells = dir.path().join("cells.csv");
    matrix_csv(&cells, &x);
    let emb = dir.path().join("emb.csv");
    let o = fastsne(&[
        "tsne", "--input", p(&cells), "--output", p(&emb), "--dims", "1", "--perplexity", "15", "--seed", "3",
        "--max-iter", "500",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let groups = 3;
    let genes_per_group = 4;
    let genes: Vec<String> = (0..groups * genes_per_group).map(|g| format!("gene{g}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let expr = DenseMatrix::from_fn(genes.len(), labels.len(), |g, c| {
        if labels[c] == g / genes_per_group {
            rng.random_range(1.0..2.0)
        } else {
            0.0
        }
    });
    let expr_path = dir.path().join("expr.csv");
    expression_csv(&expr_path, &genes, &expr);
    let out = dir.path().join("heat.csv");
    let o = fastsne(&[
        "heatmap", "--embedding", p(&emb), "--expression", p(&expr_path), "--output", p(&out), "--goi",
        "gene0,gene4,gene8", "--n-extra", "3", "--n-bins", "30",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<(usize, Vec<f64>)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            let g: usize = f.next().unwrap().trim_start_matches("gene").parse().unwrap();
            (g / genes_per_group, f.map(|v| v.parse::<f64>().unwrap()).collect())
        })
        .collect();
    assert_eq!(rows.len(), groups * genes_per_group);
    let row_groups: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let expected: Vec<usize> = (0..groups).flat_map(|g| std::iter::repeat_n(g, genes_per_group)).collect();
    assert_eq!(row_groups, expected, "each seed is followed by its own group");

    // 1D t-SNE cannot pass points through each other, so a few cells may
    // stay stranded next to another cluster. The bulk of every group must
    // still sit in one contiguous run of bins that the other groups avoid.
    let n_bins = rows[0].1.len();
    let group_mass: Vec<Vec<f64>> = (0..groups)
        .map(|g| {
            (0..n_bins)
                .map(|b| rows[g * genes_per_group..(g + 1) * genes_per_group].iter().map(|r| r.1[b]).sum())
                .collect()
        })
        .collect();
    for g in 0..groups {
        for r in &rows[g * genes_per_group..(g + 1) * genes_per_group] {
            let same: Vec<bool> = r.1.iter().map(|&x| x > 0.0).collect();
            let seed: Vec<bool> = rows[g * genes_per_group].1.iter().map(|&x| x > 0.0).collect();
            assert_eq!(same, seed, "genes of one group share their bins");
        }
        let total: f64 = group_mass[g].iter().sum();
        let shared: f64 = (0..n_bins)
            .filter(|&b| (0..groups).any(|h| h != g && group_mass[h][b] > 0.0))
            .map(|b| group_mass[g][b])
            .sum();
        assert!(shared / total <= 0.1, "group {g}: {:.3} of its mass shares bins", shared / total);
        let mut best = 0.0f64;
        let mut run = 0.0;
        for &m in &group_mass[g] {
            run = if m > 0.0 { run + m } else { 0.0 };
            best = best.max(run);
        }
        assert!(best / total >= 0.85, "group {g}: largest contiguous block holds {:.3}", best / total);
    }
}
