use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn normalize_basic_and_degenerate() {
    let a = Tensor::from_vec(vec![2.0, 4.0, 6.0], &[1, 3]).unwrap();
    let h = normalize_attention(&a).unwrap();
    assert_eq!(h.values, vec![0.0, 0.5, 1.0]);

    let c = Tensor::from_vec(vec![5.0, 5.0], &[1, 2]).unwrap();
    let h = normalize_attention(&c).unwrap();
    assert_eq!(h.values, vec![0.0, 0.0]);
}

#[test]
fn normalize_hits_exact_bounds_and_is_idempotent() {
    let mut r = rng(1);
    for _ in 0..50 {
        let a = Tensor::rand_uniform(&[4, 5], -3.0, 7.0, &mut r);
        let h = normalize_attention(&a).unwrap();
        let min = h.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = h.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
        let again =
            normalize_attention(&Tensor::from_vec(h.values.clone(), &[4, 5]).unwrap()).unwrap();
        for (x, y) in h.values.iter().zip(again.values.iter()) {
            assert!((x - y).abs() <= 1e-15);
        }
    }
}

#[test]
fn colormap_stops() {
    let heat = Heatmap { values: vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], h: 1, w: 4, label: String::new() };
    let img = colormap(&heat);
    assert_eq!(&img.data[0..3], &[0, 0, 255]); // blue at minimum
    assert_eq!(&img.data[3..6], &[0, 255, 0]); // green at 1/3
    assert_eq!(&img.data[6..9], &[255, 255, 0]); // yellow at 2/3
    assert_eq!(&img.data[9..12], &[255, 0, 0]); // red at maximum
}

#[test]
fn overlay_extremes_and_rounding() {
    let frame = Tensor::from_vec(vec![10.0, 200.0], &[1, 2]).unwrap();
    let heat = RgbImage { h: 1, w: 2, data: vec![255, 0, 0, 0, 0, 255] };
    let zero = overlay(&frame, &heat, 0.0).unwrap();
    assert_eq!(zero.data, vec![10, 10, 10, 200, 200, 200]);
    let one = overlay(&frame, &heat, 1.0).unwrap();
    assert_eq!(one.data, heat.data);

    let black = Tensor::zeros(&[1, 1]);
    let red = RgbImage { h: 1, w: 1, data: vec![255, 0, 0] };
    let half = overlay(&black, &red, 0.5).unwrap();
    assert_eq!(half.data, vec![128, 0, 0]); // 127.5 rounds half-up
}

#[test]
fn perturb_constant_image_unchanged() {
    let frame = Tensor::full(&[12, 12], 77.0);
    let out = perturb(&frame, 5, 5, SIGMA_BLUR, SIGMA_MASK).unwrap();
    for (a, b) in out.to_vec().iter().zip(frame.to_vec()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn perturb_decays_away_from_center() {
    let mut r = rng(2);
    let frame = Tensor::rand_uniform(&[40, 40], 0.0, 255.0, &mut r);
    let sigma_mask = 1.0;
    let out = perturb(&frame, 2, 2, 1.0, sigma_mask).unwrap();
    let (src, dst) = (frame.to_vec(), out.to_vec());
    for y in 0..40 {
        for x in 0..40 {
            let dist = (((y as f64 - 2.0).powi(2) + (x as f64 - 2.0).powi(2)) as f64).sqrt();
            if dist > 5.0 * sigma_mask {
                let diff = (src[y * 40 + x] - dst[y * 40 + x]).abs();
                assert!(diff < 1e-3, "pixel ({y},{x}) at distance {dist} changed by {diff}");
            }
        }
    }
}

#[test]
fn perturb_tiny_mask_touches_only_center() {
    let mut r = rng(3);
    let frame = Tensor::rand_uniform(&[10, 10], 0.0, 255.0, &mut r);
    let out = perturb(&frame, 4, 6, SIGMA_BLUR, 1e-6).unwrap();
    let (src, dst) = (frame.to_vec(), out.to_vec());
    for y in 0..10 {
        for x in 0..10 {
            if (y, x) != (4, 6) {
                assert!((src[y * 10 + x] - dst[y * 10 + x]).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn saliency_of_input_blind_core_is_zero() {
    let mut eval = |_: &Tensor| Ok((vec![0.3, -0.2, 0.9], 1.5));
    let frame = Tensor::full(&[15, 15], 100.0);
    let map = saliency_map(&mut eval, &frame, SaliencyMode::Policy, SALIENCY_STRIDE, SIGMA_BLUR, SIGMA_MASK)
        .unwrap();
    assert!(map.values.iter().all(|&v| v == 0.0));
    let map = saliency_map(&mut eval, &frame, SaliencyMode::Value, SALIENCY_STRIDE, SIGMA_BLUR, SIGMA_MASK)
        .unwrap();
    assert!(map.values.iter().all(|&v| v == 0.0));
}

#[test]
fn saliency_stride_one_equals_per_pixel_brute_force() {
    let mut r = rng(4);
    let frame = Tensor::rand_uniform(&[6, 6], 0.0, 255.0, &mut r);
    let weights: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin()).collect();
    let make_eval = |w: Vec<f64>| {
        move |f: &Tensor| {
            let dot: f64 = f.data().iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            Ok((vec![dot, -dot], dot))
        }
    };
    let mut eval = make_eval(weights.clone());
    let map = saliency_map(&mut eval, &frame, SaliencyMode::Policy, 1, 2.0, 2.0).unwrap();

    let mut eval2 = make_eval(weights);
    let (base, _) = eval2(&frame).unwrap();
    let mut raw = vec![0.0; 36];
    for i in 0..6 {
        for j in 0..6 {
            let (logits, _) = eval2(&perturb(&frame, i, j, 2.0, 2.0).unwrap()).unwrap();
            raw[i * 6 + j] =
                0.5 * base.iter().zip(&logits).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    let expect = normalize_attention(&Tensor::from_vec(raw, &[6, 6]).unwrap()).unwrap();
    for (a, b) in map.values.iter().zip(expect.values.iter()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn saliency_localizes_single_pixel_reader() {
    // a core that reads only pixel (2,3)
    let mut eval = |f: &Tensor| {
        let v = f.data()[2 * 20 + 3];
        Ok((vec![v, -v], v))
    };
    let mut r = rng(5);
    let frame = Tensor::rand_uniform(&[20, 20], 0.0, 255.0, &mut r);
    let map = saliency_map(&mut eval, &frame, SaliencyMode::Policy, SALIENCY_STRIDE, SIGMA_BLUR, SIGMA_MASK)
        .unwrap();
    let argmax = map
        .values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| (i / 20, i % 20))
        .unwrap();
    let dist = (((argmax.0 as f64 - 2.0).powi(2) + (argmax.1 as f64 - 3.0).powi(2)) as f64).sqrt();
    assert!(dist <= SIGMA_MASK, "argmax {argmax:?} too far from (2,3)");
}

#[test]
fn ppm_bytes_match_format_spec() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("white.ppm");
    let img = RgbImage { h: 1, w: 1, data: vec![255, 255, 255] };
    write_ppm(&img, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
}

#[test]
fn ppm_round_trip_and_row_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.ppm");
    // left pixel red, right pixel blue: red bytes precede blue
    let img = RgbImage { h: 1, w: 2, data: vec![255, 0, 0, 0, 0, 255] };
    write_ppm(&img, &path).unwrap();
    let (magic, w, h, payload) = read_pnm(&path).unwrap();
    assert_eq!((magic.as_str(), w, h), ("P6", 2, 1));
    assert_eq!(payload, img.data);
}

#[test]
fn pgm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gray.pgm");
    let frame = Tensor::from_vec(vec![0.0, 64.0, 128.0, 255.0], &[2, 2]).unwrap();
    write_pgm(&frame, &path).unwrap();
    let (magic, w, h, payload) = read_pnm(&path).unwrap();
    assert_eq!((magic.as_str(), w, h), ("P5", 2, 2));
    assert_eq!(payload, vec![0, 64, 128, 255]);
}
