//! Library results checked against independent implementations: dense
//! symmetric eigensolvers, an FFT, Floyd–Warshall, brute-force counting and
//! central finite differences.

use nalgebra::{DMatrix, SymmetricEigen};
use rustfft::{num_complex::Complex, FftPlanner};

use ticketlab::metrics::*;
use ticketlab::model::*;
use ticketlab::numerics::{singular_values, Matrix, SeededRng};
use ticketlab::tasks::{Inputs, TaskKind, TaskSpec, Targets};

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn random_mask(rng: &mut SeededRng, rows: usize, cols: usize, keep: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| f64::from(rng.uniform() < keep)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Eigenvalues of `[[0, B], [Bᵀ, 0]]`, descending.
fn block_adjacency_eigen(b: &Matrix) -> Vec<f64> {
    let (r, c) = b.shape();
    let n = r + c;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..r {
        for j in 0..c {
            a[(i, r + j)] = b.get(i, j);
            a[(r + j, i)] = b.get(i, j);
        }
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    let mut rng = SeededRng::new(11);
    for (r, c) in [(7, 4), (4, 7), (12, 12), (30, 5)] {
        let m = random_matrix(&mut rng, r, c);
        let sv = singular_values(&m).unwrap();
        let dm = DMatrix::from_row_slice(r, c, m.data());
        let mut eig: Vec<f64> = SymmetricEigen::new(dm.transpose() * &dm)
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (a, b) in sv.iter().zip(&eig) {
            assert!((a - b).abs() < 1e-9, "{r}x{c}: {a} vs {b}");
        }
    }
}

#[test]
fn weighted_spectral_gap_matches_block_adjacency() {
    let mut rng = SeededRng::new(12);
    for _ in 0..5 {
        let w = random_matrix(&mut rng, 15, 9);
        let m = random_mask(&mut rng, 15, 9, 0.5);
        let ev = block_adjacency_eigen(&w.hadamard(&m).unwrap().abs());
        let gap = weighted_spectral_gap(&w, Some(&m)).unwrap();
        assert!((gap - (ev[0] - ev[1])).abs() < 1e-9);
    }
}

#[test]
fn ramanujan_gap_matches_dense_eigensolver() {
    let mut rng = SeededRng::new(13);
    for keep in [0.2, 0.5, 0.8] {
        let m = random_mask(&mut rng, 20, 20, keep);
        let ev = block_adjacency_eigen(&m);
        let edges = m.sum();
        let d_avg = 2.0 * edges / 40.0;
        let expected = (2.0 * d_avg - 1.0).sqrt() - ev[2].abs();
        let got = ramanujan_gap(&m, NonTrivialEigen::ThirdLargest).unwrap();
        assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
        let expected_second = (2.0 * d_avg - 1.0).sqrt() - ev[1].abs();
        let got_second = ramanujan_gap(&m, NonTrivialEigen::SecondLargest).unwrap();
        assert!((got_second - expected_second).abs() < 1e-8);
    }
    // Rectangular masks bring zero eigenvalues into the list.
    let m = random_mask(&mut rng, 6, 14, 0.4);
    let ev = block_adjacency_eigen(&m);
    let spec = bipartite_spectrum(&m).unwrap();
    assert_eq!(spec.len(), ev.len());
    for (a, b) in spec.iter().zip(&ev) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn dft_magnitudes_match_fft() {
    let mut rng = SeededRng::new(14);
    for n in [2, 5, 67, 128] {
        let row: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        for (a, b) in dft_magnitudes(&row).iter().zip(&buf) {
            assert!((a - b.norm()).abs() < 1e-9);
        }
    }
}

#[test]
fn fourier_entropy_of_gaussian_rows_is_near_maximal() {
    let mut rng = SeededRng::new(15);
    let m = random_matrix(&mut rng, 48, 67);
    let fe = fourier_entropy(&m).unwrap();
    let max = 66f64.ln();
    assert!(fe <= max + 1e-12);
    assert!((fe - max).abs() < 0.1 * max, "{fe}");
    // Against FFT magnitudes normalised by hand.
    let row = m.row(0);
    let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(67).process(&mut buf);
    let total: f64 = buf[1..].iter().map(|c| c.norm()).sum();
    let h: f64 = -buf[1..].iter().map(|c| c.norm() / total).map(|q| q * q.ln()).sum::<f64>();
    assert!((row_fourier_entropy(row) - h).abs() < 1e-12);
}

#[test]
fn w_inproj_matches_direct_products() {
    let mut rng = SeededRng::new(16);
    let dims = ModelDims::modular(7, 5, 3);
    let p = init_params(dims, 1.0, &mut rng).unwrap();
    let proj = w_inproj(&p, None).unwrap();
    assert_eq!(proj.shape(), (3, 7));
    for h in 0..3 {
        for x in 0..7 {
            let direct: f64 = (0..5).map(|e| p[Layer::In].get(e, h) * p[Layer::Emb].get(e, x)).sum();
            assert!((proj.get(h, x) - direct).abs() < 1e-12);
        }
    }
    let defaults = init_params(ModelDims::modular(67, 500, 48), 1.0, &mut rng).unwrap();
    assert_eq!(w_inproj(&defaults, None).unwrap().shape(), (48, 67));
}

fn floyd_warshall(g: &RelationalGraph) -> Vec<Vec<Option<usize>>> {
    let n = g.node_count();
    let mut d = vec![vec![None; n]; n];
    for i in 0..n {
        d[i][i] = Some(0);
        for j in 0..n {
            if g.has_edge(i, j) {
                d[i][j] = Some(1);
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

fn random_graph(rng: &mut SeededRng, n: usize, p: f64) -> RelationalGraph {
    let mut g = RelationalGraph::new(n);
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.uniform() < p {
                g.add_edge(u, v);
            }
        }
    }
    g
}

#[test]
fn path_length_matches_floyd_warshall() {
    let mut rng = SeededRng::new(17);
    for p in [0.08, 0.2, 0.5] {
        let g = random_graph(&mut rng, 24, p);
        let d = floyd_warshall(&g);
        // Largest component from the distance table; lowest node wins ties.
        let mut best: Vec<usize> = Vec::new();
        for s in 0..24 {
            let comp: Vec<usize> = (0..24).filter(|&t| d[s][t].is_some()).collect();
            if comp.len() > best.len() {
                best = comp;
            }
        }
        let mut total = 0;
        for &i in &best {
            for &j in &best {
                if i != j {
                    total += d[i][j].unwrap();
                }
            }
        }
        let expected = if best.len() < 2 {
            0.0
        } else {
            total as f64 / (best.len() * (best.len() - 1)) as f64
        };
        assert!((avg_path_length(&g).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn clustering_matches_triangle_enumeration() {
    let mut rng = SeededRng::new(18);
    for p in [0.1, 0.3, 0.7] {
        let g = random_graph(&mut rng, 20, p);
        let n = g.node_count();
        let mut total = 0.0;
        for i in 0..n {
            let nb: Vec<usize> = (0..n).filter(|&j| g.has_edge(i, j)).collect();
            let k = nb.len();
            if k < 2 {
                continue;
            }
            let mut tri = 0;
            for a in 0..k {
                for b in 0..k {
                    if a != b && g.has_edge(nb[a], nb[b]) {
                        tri += 1;
                    }
                }
            }
            total += tri as f64 / (k * (k - 1)) as f64;
        }
        assert!((clustering_coefficient(&g) - total / n as f64).abs() < 1e-12);
    }
}

#[test]
fn relational_graph_matches_pairwise_scan() {
    let mut rng = SeededRng::new(19);
    let dims = ModelDims::modular(5, 7, 6);
    let masks = MaskSet(Tensors([
        random_mask(&mut rng, 7, 5, 0.2),
        random_mask(&mut rng, 7, 6, 0.2),
        random_mask(&mut rng, 6, 7, 0.2),
        random_mask(&mut rng, 7, 5, 0.2),
    ]));
    masks.0.check_shapes(&dims).unwrap();
    let n = 4;
    let g = build_relational_graph(&masks, n).unwrap();
    for u in 0..n {
        for v in 0..n {
            let mut expected = false;
            for l in Layer::ALL {
                let m = &masks[l];
                for r in 0..m.rows() {
                    for c in 0..m.cols() {
                        if m.get(r, c) == 1.0 && r % n == u && c % n == v && u != v {
                            expected = true;
                        }
                        if m.get(r, c) == 1.0 && r % n == v && c % n == u && u != v {
                            expected = true;
                        }
                    }
                }
            }
            assert_eq!(g.has_edge(u, v), expected, "({u}, {v})");
        }
    }
}

#[test]
fn accuracy_matches_direct_count() {
    let mut rng = SeededRng::new(20);
    let logits = random_matrix(&mut rng, 50, 6);
    let targets: Vec<usize> = (0..50).map(|_| rng.below(6)).collect();
    let mut hits = 0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let best = (0..6).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        hits += usize::from(best == t);
    }
    assert_eq!(accuracy(&logits, &targets), hits as f64 / 50.0);
}

#[test]
fn norms_match_direct_summation() {
    let mut rng = SeededRng::new(21);
    let dims = ModelDims::modular(5, 4, 3);
    let p = init_params(dims, 1.0, &mut rng).unwrap();
    let mask = MaskSet(Tensors([
        random_mask(&mut rng, 4, 5, 0.5),
        random_mask(&mut rng, 4, 3, 0.5),
        random_mask(&mut rng, 3, 4, 0.5),
        random_mask(&mut rng, 4, 5, 0.5),
    ]));
    let (mut l1, mut l2) = (0.0, 0.0);
    for l in Layer::ALL {
        for (w, m) in p[l].data().iter().zip(mask[l].data()) {
            l1 += (w * m).abs();
            l2 += (w * m) * (w * m);
        }
    }
    let (a, b) = norms(&p, Some(&mask));
    assert!((a - l1).abs() < 1e-12 && (b - l2.sqrt()).abs() < 1e-12);
}

/// Forward pass written out neuron by neuron.
fn hand_logits(p: &ModelParams, a: usize, b: usize) -> Vec<f64> {
    let d = p.dims;
    let emb: Vec<f64> = (0..d.d_emb)
        .map(|e| p[Layer::Emb].get(e, a) + p[Layer::Emb].get(e, b))
        .collect();
    let hidden: Vec<f64> = (0..d.d_hid)
        .map(|h| (0..d.d_emb).map(|e| emb[e] * p[Layer::In].get(e, h)).sum::<f64>().max(0.0))
        .collect();
    let out: Vec<f64> = (0..d.d_emb)
        .map(|e| (0..d.d_hid).map(|h| hidden[h] * p[Layer::Out].get(h, e)).sum())
        .collect();
    (0..d.d_out)
        .map(|o| (0..d.d_emb).map(|e| out[e] * p[Layer::Unemb].get(e, o)).sum())
        .collect()
}

#[test]
fn forward_matches_hand_composition() {
    let mut rng = SeededRng::new(22);
    let p = init_params(ModelDims::modular(5, 6, 4), 1.0, &mut rng).unwrap();
    let pairs = vec![(1, 0), (4, 2), (3, 3)];
    let cache = forward(&p, None, &Inputs::Pairs(pairs.clone())).unwrap();
    for (n, &(a, b)) in pairs.iter().enumerate() {
        for (x, y) in cache.logits.row(n).iter().zip(hand_logits(&p, a, b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn loss_of(p: &ModelParams, mask: Option<&MaskSet>, inputs: &Inputs, targets: &Targets, loss: LossKind) -> f64 {
    let cache = forward(p, mask, inputs).unwrap();
    batch_loss(&cache, targets, loss).unwrap()
}

fn check_gradients(p: &ModelParams, mask: Option<&MaskSet>, inputs: &Inputs, targets: &Targets, loss: LossKind) {
    let cache = forward(p, mask, inputs).unwrap();
    let g = backward(p, mask, &cache, targets, loss).unwrap();
    let eps = 1e-5;
    for l in Layer::ALL {
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for i in 0..p[l].len() {
            let numeric = if mask.is_some_and(|m| m[l].data()[i] == 0.0) {
                0.0
            } else {
                let mut plus = p.clone();
                plus.weights[l].data_mut()[i] += eps;
                let mut minus = p.clone();
                minus.weights[l].data_mut()[i] -= eps;
                (loss_of(&plus, mask, inputs, targets, loss) - loss_of(&minus, mask, inputs, targets, loss)) / (2.0 * eps)
            };
            let analytic = g[l].data()[i];
            diff = diff.max((analytic - numeric).abs());
            scale = scale.max(analytic.abs().max(numeric.abs()));
        }
        let rel = diff / scale.max(1e-12);
        assert!(rel < 1e-5, "{}: relative error {rel:e}", l.name());
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let data = TaskSpec::modular(TaskKind::ModularAdd, 5, 0.5, 0).generate().unwrap();
    let batch = data.train();
    let mut rng = SeededRng::new(23);
    let p = init_params(ModelDims::modular(5, 6, 4), 1.0, &mut rng).unwrap();
    check_gradients(&p, None, &batch.inputs, &batch.targets, LossKind::CrossEntropy);
    let mut mask = MaskSet::ones(&p.dims);
    mask.0[Layer::In].set(2, 1, 0.0);
    mask.0[Layer::Unemb].set(0, 3, 0.0);
    check_gradients(&p, Some(&mask), &batch.inputs, &batch.targets, LossKind::CrossEntropy);
}

#[test]
fn mse_gradients_match_finite_differences() {
    let data = TaskSpec {
        kind: TaskKind::PolyRegression,
        dim: 5,
        n_samples: 12,
        ..TaskSpec::default()
    }
    .generate()
    .unwrap();
    let batch = data.train();
    let mut rng = SeededRng::new(24);
    let dims = ModelDims {
        d_in: 5,
        d_emb: 6,
        d_hid: 4,
        d_out: 1,
    };
    let p = init_params(dims, 1.0, &mut rng).unwrap();
    check_gradients(&p, None, &batch.inputs, &batch.targets, LossKind::Mse);
}

fn flat_gradient(p: &ModelParams, inputs: &Inputs, targets: &Targets) -> Vec<f64> {
    let cache = forward(p, None, inputs).unwrap();
    let g = backward(p, None, &cache, targets, LossKind::CrossEntropy).unwrap();
    Layer::ALL.iter().flat_map(|&l| g[l].data().to_vec()).collect()
}

fn perturbed(p: &ModelParams, flat: usize, delta: f64) -> ModelParams {
    let mut q = p.clone();
    let mut i = flat;
    for l in Layer::ALL {
        let n = q[l].len();
        if i < n {
            q.weights[l].data_mut()[i] += delta;
            return q;
        }
        i -= n;
    }
    unreachable!()
}

#[test]
fn grasp_hessian_product_matches_explicit_hessian() {
    let data = TaskSpec::modular(TaskKind::ModularAdd, 3, 0.67, 0).generate().unwrap();
    let batch = data.train();
    let mut rng = SeededRng::new(25);
    let p = init_params(ModelDims::modular(3, 3, 2), 1.0, &mut rng).unwrap();
    let (inputs, targets) = (&batch.inputs, &batch.targets);

    // Explicit Hessian, one column per parameter, from differences of analytic gradients.
    let g = flat_gradient(&p, inputs, targets);
    let n = g.len();
    let h = 1e-6;
    let mut hess = vec![vec![0.0; n]; n];
    for j in 0..n {
        let gp = flat_gradient(&perturbed(&p, j, h), inputs, targets);
        let gm = flat_gradient(&perturbed(&p, j, -h), inputs, targets);
        for i in 0..n {
            hess[i][j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let expected: Vec<f64> = hess.iter().map(|row| row.iter().zip(&g).map(|(a, b)| a * b).sum()).collect();

    let (g2, hg) = ticketlab::pruning::hessian_gradient_product(&p.weights, |w| {
        let q = ModelParams::from_tensors(p.dims, w.clone()).unwrap();
        let cache = forward(&q, None, inputs).unwrap();
        Ok(backward(&q, None, &cache, targets, LossKind::CrossEntropy).unwrap().0)
    })
    .unwrap();
    let got: Vec<f64> = Layer::ALL.iter().flat_map(|&l| hg[l].data().to_vec()).collect();
    let g2: Vec<f64> = Layer::ALL.iter().flat_map(|&l| g2[l].data().to_vec()).collect();
    assert_eq!(g, g2);
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = expected.iter().zip(&got).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err / scale < 1e-4, "relative error {:e}", err / scale);
}

#[test]
fn top_k_matches_sorting() {
    let mut rng = SeededRng::new(26);
    for keep in [0, 1, 7, 30, 47, 48] {
        let m = random_matrix(&mut rng, 6, 8);
        let mut sorted: Vec<f64> = m.data().to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top = ticketlab::pruning::top_k_matrix(&m, keep);
        for (v, t) in m.data().iter().zip(top.data()) {
            let expected = keep > 0 && *v >= sorted[keep - 1];
            assert_eq!(*t == 1.0, expected, "keep {keep}");
        }
    }
}

#[test]
fn edge_popup_gradient_signs_match_mask_relaxation() {
    let data = TaskSpec::modular(TaskKind::ModularAdd, 7, 0.5, 0).generate().unwrap();
    let batch = data.train();
    let mut rng = SeededRng::new(27);
    let p = init_params(ModelDims::modular(7, 8, 6), 1.0, &mut rng).unwrap();
    let scores = ticketlab::pruning::init_edge_popup_scores(&p);
    let mask = ticketlab::pruning::mask_from_scores(&scores, 0.5).unwrap();
    let cache = forward(&p, Some(&mask), &batch.inputs).unwrap();
    let grad =
        ticketlab::pruning::edge_popup_score_gradient(&p, &cache, &batch.targets, LossKind::CrossEntropy).unwrap();

    // Surrogate: treat each mask entry as continuous and difference the loss in it.
    let eps = 1e-5;
    let (mut agree, mut total) = (0usize, 0usize);
    for l in Layer::ALL {
        for i in 0..p[l].len() {
            let mut plus = mask.clone();
            plus.0[l].data_mut()[i] += eps;
            let mut minus = mask.clone();
            minus.0[l].data_mut()[i] -= eps;
            let fd = (loss_of(&p, Some(&plus), &batch.inputs, &batch.targets, LossKind::CrossEntropy)
                - loss_of(&p, Some(&minus), &batch.inputs, &batch.targets, LossKind::CrossEntropy))
                / (2.0 * eps);
            let a = grad[l].data()[i];
            if fd.abs() < 1e-9 && a.abs() < 1e-9 {
                continue;
            }
            total += 1;
            agree += usize::from(fd.signum() == a.signum());
        }
    }
    assert!(total > 100);
    assert!(agree as f64 / total as f64 > 0.95, "{agree}/{total}");
}
