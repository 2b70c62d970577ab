use emr_core::network::{rir_block_forward, NetworkConfig};
use emr_core::params::ParamStore;
use emr_core::searchspace::*;
use emr_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.entries_mut() {
        for v in &mut e.data {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Plain sliding-window 3x3 dilated convolution on one image, zero padded.
/// `x[c][i][j]`, weights `(out, in, 3, 3)`.
fn naive_conv(x: &[Vec<Vec<f64>>], weight: &[f64], bias: &[f64], dil: usize) -> Vec<Vec<Vec<f64>>> {
    let cin = x.len();
    let (h, w) = (x[0].len(), x[0][0].len());
    let cout = bias.len();
    let mut out = vec![vec![vec![0.0; w]; h]; cout];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[o];
                for c in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let ii = i as isize + (ky as isize - 1) * dil as isize;
                            let jj = j as isize + (kx as isize - 1) * dil as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            acc += weight[((o * cin + c) * 3 + ky) * 3 + kx] * x[c][ii as usize][jj as usize];
                        }
                    }
                }
                out[o][i][j] = acc;
            }
        }
    }
    out
}

fn to_nested(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let [_, c, h, w] = t.shape();
    (0..c)
        .map(|ch| (0..h).map(|i| t.plane(0, ch)[i * w..(i + 1) * w].to_vec()).collect())
        .collect()
}

/// Independent cell: explicit dense wiring for one spec.
fn naive_cell(x: &[Vec<Vec<f64>>], spec: &OperationSpec, wts: &CellWeights, store: &ParamStore, beta: f64) -> Vec<Vec<Vec<f64>>> {
    let dil = spec.dilations();
    let mut cur = x.to_vec();
    for k in 0..4 {
        let mut input = cur.clone();
        if k > 0 && spec.skips().contains(&k) {
            input.extend(x.iter().cloned());
        }
        let conv = &wts.convs[k];
        let mut y = naive_conv(&input, store.get(conv.weight), store.get(conv.bias), dil[k]);
        if k < 3 {
            for plane in &mut y {
                for row in plane {
                    for v in row {
                        if *v < 0.0 {
                            *v *= 0.2;
                        }
                    }
                }
            }
        }
        cur = y;
    }
    x.iter()
        .zip(&cur)
        .map(|(xp, yp)| {
            xp.iter()
                .zip(yp)
                .map(|(xr, yr)| xr.iter().zip(yr).map(|(a, b)| a + beta * b).collect())
                .collect()
        })
        .collect()
}

#[test]
fn op_table_is_exact() {
    let expected: [([usize; 4], &[usize]); 8] = [
        ([1, 2, 4, 1], &[1, 2, 3]),
        ([1, 2, 4, 1], &[2, 3]),
        ([1, 2, 4, 1], &[1, 3]),
        ([1, 2, 4, 1], &[1, 2]),
        ([1, 2, 4, 1], &[1]),
        ([1, 2, 4, 1], &[2]),
        ([1, 2, 4, 1], &[3]),
        ([1, 1, 1, 1], &[1, 2, 3]),
    ];
    let table = op_table();
    assert_eq!(table.len(), 8);
    for (i, (spec, (d, s))) in table.iter().zip(expected.iter()).enumerate() {
        assert_eq!(spec.index(), i + 1);
        assert_eq!(spec.dilations(), *d);
        assert_eq!(spec.skips(), s.to_vec());
    }
}

#[test]
fn conv_input_widths_follow_edge_counts() {
    let c = 5;
    for spec in op_table() {
        let shapes = spec.conv_shapes(c);
        for (k, s) in shapes.iter().enumerate() {
            let edges = 1 + usize::from(k > 0 && spec.skips().contains(&k));
            assert_eq!(s.in_channels, c * edges);
            assert_eq!(s.out_channels, c);
            assert_eq!(s.dilation, spec.dilations()[k]);
        }
    }
}

#[test]
fn cell_matches_direct_convolution_oracle() {
    for (op, seed) in [(8, 1u64), (1, 2), (3, 3), (6, 4)] {
        let spec = OperationSpec::get(op).unwrap();
        let c = 4;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wts = CellWeights::register(&mut store, "cell", spec, c, false, &mut rng);
        randomize(&mut store, seed + 100, 0.3);
        let x = random_tensor([1, c, 16, 16], seed + 200);
        let out = cell_forward(&x, &spec, &wts, &store, 0.2).unwrap();
        let oracle = naive_cell(&to_nested(&x), &spec, &wts, &store, 0.2);
        let got = to_nested(&out);
        let scale = oracle.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in got.iter().flatten().flatten().zip(oracle.iter().flatten().flatten()) {
            assert!((a - b).abs() <= 1e-6 * scale, "O{op}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_weights_or_zero_beta_pass_input_through() {
    let spec = OperationSpec::get(2).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wts = CellWeights::register(&mut store, "cell", spec, 3, false, &mut rng);
    let x = random_tensor([2, 3, 9, 7], 5);
    assert_eq!(cell_forward(&x, &spec, &wts, &store, 0.0).unwrap(), x);
    store.fill(0.0);
    assert_eq!(cell_forward(&x, &spec, &wts, &store, 0.2).unwrap(), x);
    let wrong = random_tensor([1, 4, 9, 7], 5);
    assert!(cell_forward(&wrong, &spec, &wts, &store, 0.2).is_err());
}

#[test]
fn shape_is_preserved_for_every_operation() {
    for spec in op_table() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.index() as u64);
        let wts = CellWeights::register(&mut store, "cell", spec, 2, false, &mut rng);
        let x = random_tensor([1, 2, 6, 11], 1);
        assert_eq!(cell_forward(&x, &spec, &wts, &store, 0.2).unwrap().shape(), [1, 2, 6, 11]);
    }
}

/// Column extent of the nonzero residual response to a centred impulse with
/// all-ones kernels (positive weights, so nothing cancels).
fn impulse_extent(spec: OperationSpec) -> usize {
    let n = 41;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wts = CellWeights::register(&mut store, "cell", spec, 1, false, &mut rng);
    for conv in &wts.convs {
        store.get_mut(conv.weight).fill(1.0);
        store.get_mut(conv.bias).fill(0.0);
    }
    let mut x = Tensor::zeros(1, 1, n, n);
    x.data_mut()[(n / 2) * n + n / 2] = 1.0;
    let out = cell_forward(&x, &spec, &wts, &store, 1.0).unwrap();
    let residual = out.sub(&x);
    let cols: Vec<usize> = (0..n * n)
        .filter(|&i| residual.data()[i] != 0.0)
        .map(|i| i % n)
        .collect();
    let rows: Vec<usize> = (0..n * n)
        .filter(|&i| residual.data()[i] != 0.0)
        .map(|i| i / n)
        .collect();
    let w = cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1;
    let h = rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1;
    assert_eq!(w, h);
    w
}

#[test]
fn receptive_fields_measured_by_impulse() {
    assert_eq!(receptive_field_of(&[1]), 3);
    for spec in op_table() {
        assert_eq!(impulse_extent(spec), receptive_field(&spec), "{spec}");
    }
    let o1 = OperationSpec::get(1).unwrap();
    let o8 = OperationSpec::get(8).unwrap();
    assert_eq!(receptive_field(&o1), 17);
    assert_eq!(receptive_field(&o8), 9);
    for i in 1..=7 {
        assert!(receptive_field(&OperationSpec::get(i).unwrap()) > receptive_field(&o8));
    }
}

#[test]
fn rir_block_matches_composition_of_cells() {
    let cfg = NetworkConfig { channels: 4, ..NetworkConfig::desk() };
    let specs = [3, 8, 5].map(|i| OperationSpec::get(i).unwrap());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cells: Vec<CellWeights> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| CellWeights::register(&mut store, &format!("cell{i}"), *s, 4, false, &mut rng))
        .collect();
    randomize(&mut store, 10, 0.2);
    let x = random_tensor([2, 4, 10, 10], 11);
    let pairs: Vec<(OperationSpec, &CellWeights)> = specs.iter().copied().zip(cells.iter()).collect();
    let out = rir_block_forward(&x, &pairs, &store, &cfg).unwrap();

    let mut h = x.clone();
    for (s, w) in &pairs {
        h = cell_forward(&h, s, w, &store, cfg.beta).unwrap();
    }
    let mut oracle = x.clone();
    oracle.add_scaled(&h.sub(&x), cfg.beta);
    for (a, b) in out.data().iter().zip(oracle.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    // Zero weights: identity with the nested residuals, zero without them.
    store.fill(0.0);
    assert_eq!(rir_block_forward(&x, &pairs, &store, &cfg).unwrap(), x);
    let plain = NetworkConfig { use_rir: false, ..cfg };
    let z = rir_block_forward(&x, &pairs, &store, &plain).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}
