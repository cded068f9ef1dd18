use fishernet::classifier::average_precision;
use fishernet::data::format::{decode_tensor, encode_tensor};
use fishernet::data::{Checkpoint, DynTensor};
use fishernet::fisher::{fisher_layer_forward, fisher_layer_posterior, l2_normalize, power_normalize, FisherParams};
use fishernet::gmm::{posterior, GmmModel};
use fishernet::patches::{dense_patches, project_rect, spp_forward, Rect};
use fishernet::Tensor;
use proptest::prelude::*;

fn model(k: usize, d: usize, vals: &[f64]) -> GmmModel<f64> {
    let w: Vec<f64> = (0..k).map(|i| 0.1 + vals[i].abs()).collect();
    let s: f64 = w.iter().sum();
    GmmModel::new(
        w.into_iter().map(|v| v / s).collect(),
        Tensor::from_vec(&[k, d], (0..k * d).map(|i| vals[k + i]).collect()).unwrap(),
        Tensor::from_vec(&[k, d], (0..k * d).map(|i| 0.2 + vals[i].abs()).collect()).unwrap(),
    )
    .unwrap()
}

fn layer(k: usize, d: usize, vals: &[f64]) -> FisherParams<f64> {
    FisherParams::new(
        Tensor::from_vec(&[k, d], (0..k * d).map(|i| 0.3 + vals[i].abs()).collect()).unwrap(),
        Tensor::from_vec(&[k, d], (0..k * d).map(|i| vals[k * d + i]).collect()).unwrap(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn gmm_posterior_is_a_distribution(
        k in 1usize..6, d in 1usize..6,
        vals in prop::collection::vec(-3.0f64..3.0, 64),
        x in prop::collection::vec(-500.0f64..500.0, 6),
    ) {
        let g = model(k, d, &vals);
        let p = posterior(&x[..d], &g).unwrap();
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_posterior_is_a_distribution_in_f32(
        k in 1usize..6, d in 1usize..6,
        vals in prop::collection::vec(-3.0f64..3.0, 64),
        x in prop::collection::vec(-100.0f32..100.0, 6),
    ) {
        let p = layer(k, d, &vals);
        let p32 = FisherParams::new(p.w.cast::<f32>(), p.b.cast::<f32>()).unwrap();
        let g = fisher_layer_posterior(&x[..d], &p32).unwrap();
        prop_assert!(g.iter().all(|v| v.is_finite()));
        prop_assert!((g.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_output_is_shift_equivariant(
        k in 1usize..4, d in 2usize..5, m in 1usize..5,
        vals in prop::collection::vec(-2.0f64..2.0, 64),
        xs in prop::collection::vec(-2.0f64..2.0, 20),
        shift in prop::collection::vec(-5.0f64..5.0, 5),
    ) {
        // Moving every descriptor by s and every b_k by -s leaves y unchanged.
        let p = layer(k, d, &vals);
        let x = Tensor::from_vec(&[m, d], xs[..m * d].to_vec()).unwrap();
        let mut xs2 = x.clone();
        for row in 0..m {
            for i in 0..d {
                xs2.data_mut()[row * d + i] += shift[i];
            }
        }
        let mut p2 = p.clone();
        for c in 0..k {
            for i in 0..d {
                p2.b.data_mut()[c * d + i] -= shift[i];
            }
        }
        let (a, _) = fisher_layer_forward(&x, &p).unwrap();
        let (b, _) = fisher_layer_forward(&xs2, &p2).unwrap();
        for (u, v) in a.values().iter().zip(b.values()) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn layer_output_ignores_patch_order(
        k in 1usize..4, d in 2usize..5, m in 2usize..5,
        vals in prop::collection::vec(-2.0f64..2.0, 64),
        xs in prop::collection::vec(-2.0f64..2.0, 20),
    ) {
        let p = layer(k, d, &vals);
        let x = Tensor::from_vec(&[m, d], xs[..m * d].to_vec()).unwrap();
        let rev: Vec<f64> = (0..m).rev().flat_map(|j| x.row(j).to_vec()).collect();
        let (a, _) = fisher_layer_forward(&x, &p).unwrap();
        let (b, _) = fisher_layer_forward(&Tensor::from_vec(&[m, d], rev).unwrap(), &p).unwrap();
        for (u, v) in a.values().iter().zip(b.values()) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn single_cell_spp_is_region_max(
        h in 1usize..10, w in 1usize..10,
        vals in prop::collection::vec(-10.0f64..10.0, 100),
        corner in (0usize..10, 0usize..10), size in (1usize..10, 1usize..10),
    ) {
        let fm = Tensor::from_vec(&[1, h, w], vals[..h * w].to_vec()).unwrap();
        let (x0, y0) = (corner.0 % w, corner.1 % h);
        let r = Rect::new(x0, y0, 1 + (size.0 - 1) % (w - x0), 1 + (size.1 - 1) % (h - y0));
        let (out, _) = spp_forward(&fm, r, (1, 1)).unwrap();
        let mut best = f64::NEG_INFINITY;
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                best = best.max(fm.data()[y * w + x]);
            }
        }
        prop_assert_eq!(out.data()[0], best);
    }

    #[test]
    fn dense_patches_fit_and_project_inside(
        w in 1usize..80, h in 1usize..80, step in 1usize..9,
        scales in prop::collection::vec(1usize..40, 1..4), stride in 1usize..5,
    ) {
        let rects = dense_patches(w, h, &scales, step).unwrap();
        prop_assert!(!rects.is_empty());
        let (fw, fh) = (w.div_ceil(stride), h.div_ceil(stride));
        for r in rects {
            prop_assert!(r.fits_in(w, h));
            let p = project_rect(r, stride, fw, fh);
            prop_assert!(p.w >= 1 && p.h >= 1 && p.fits_in(fw, fh));
        }
    }

    #[test]
    fn ap_is_in_unit_interval_and_rank_invariant(
        scores in prop::collection::vec(-100i32..100, 1..30),
        labels_seed in prop::collection::vec(0u8..2, 30),
    ) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let mut y = labels_seed[..s.len()].to_vec();
        y[0] = 1;
        let ap = average_precision(&s, &y).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
        let t: Vec<f64> = s.iter().map(|v| 2.0 * v + 1.0).collect();
        prop_assert_eq!(average_precision(&t, &y).unwrap(), ap);
    }

    #[test]
    fn normalized_features_have_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let p = power_normalize(&v);
        prop_assert!(p.iter().zip(&v).all(|(a, b)| a.signum() == b.signum() || *b == 0.0));
        let n = l2_normalize(&p);
        let norm: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm < 1e-12 || (norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_files_round_trip_bitwise(
        shape in prop::collection::vec(1usize..4, 0..4),
        bits in prop::collection::vec(any::<u64>(), 64),
        single in any::<bool>(),
    ) {
        let n: usize = shape.iter().product();
        let t = if single {
            DynTensor::F32(Tensor::from_vec(&shape, bits[..n].iter().map(|&b| f32::from_bits(b as u32)).collect()).unwrap())
        } else {
            DynTensor::F64(Tensor::from_vec(&shape, bits[..n].iter().map(|&b| f64::from_bits(b)).collect()).unwrap())
        };
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf).unwrap();
        let back = decode_tensor(&buf).unwrap();
        prop_assert!(back.bit_eq(&t));
        let mut again = Vec::new();
        encode_tensor(&back, &mut again).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn checkpoints_round_trip_bitwise(
        names in prop::collection::hash_set("[a-z.]{1,12}", 0..6),
        vals in prop::collection::vec(any::<f64>(), 8),
    ) {
        let mut ck = Checkpoint::new();
        for (i, name) in names.iter().enumerate() {
            if i % 2 == 0 {
                ck.insert(name, &Tensor::from_vec(&[2, 2], vals[..4].to_vec()).unwrap());
            } else {
                ck.insert(name, &Tensor::from_vec(&[3], vals[4..7].iter().map(|&v| v as f32).collect()).unwrap());
            }
        }
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert!(back.bit_eq(&ck));
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }
}
