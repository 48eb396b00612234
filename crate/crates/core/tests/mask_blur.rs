//! Mask and blur against direct double-precision evaluations, plus the
//! 512x512 blur golden.
//!
//! Regenerate the golden files with `PERIPH_BLESS=1 cargo test -p periph-core --test mask_blur`.

use periph_core::corpus::procedural_image;
use periph_core::foveamask::build_mask;
use periph_core::imagekit::{encode_png, Image};
use periph_core::radialblur::{radial_blur, radial_blur_layered, BlurProfile, DEFAULT_SIGMA_MAX};
use periph_core::Fixation;
use proptest::prelude::*;

mod common;
use common::{assets, dense_blur, golden_blur, mask_oracle, random_image};

proptest! {
    #[test]
    fn mask_matches_formula_bitwise(
        h in 1usize..80, w in 1usize..80,
        fy in 0.0f64..1.0, fx in 0.0f64..1.0,
        r in prop_oneof![Just(0.0), 0.0f64..60.0, (0u32..40).prop_map(f64::from)],
    ) {
        let fix = Fixation::new(fx * (w as f64 - 1.0), fy * (h as f64 - 1.0), r);
        let mask = build_mask(h, w, &fix).unwrap();
        for i in 0..h {
            for j in 0..w {
                prop_assert_eq!(mask.get(i, j).to_bits(), mask_oracle(i, j, &fix).to_bits());
            }
        }
    }
}

#[test]
fn mask_on_integer_boundaries() {
    // 3-4-5 triangles put pixels exactly on the fovea boundary
    let fix = Fixation::new(10.0, 10.0, 5.0);
    let mask = build_mask(21, 21, &fix).unwrap();
    assert_eq!(mask.get(13, 14), 0.0);
    assert_eq!(mask.get(10, 15), 0.0);
    assert_eq!(mask.get(10, 16), 6.0);
    assert_eq!(mask.get(0, 0), 200f64.sqrt() as f32);
}

#[test]
fn blur_matches_dense_operator() {
    let fixes = [
        Fixation::new(16.0, 16.0, 4.0),
        Fixation::new(3.0, 27.0, 0.0),
        Fixation::new(31.0, 0.0, 10.5),
    ];
    for (k, fix) in fixes.iter().enumerate() {
        for c in [1, 3] {
            let img = random_image(32, 32, c, k as u64 * 10 + c as u64);
            let profile = BlurProfile::for_frame(32, 32, fix, DEFAULT_SIGMA_MAX).unwrap();
            let got = radial_blur(&img, fix, &profile).unwrap();
            let want = dense_blur(&img, fix, DEFAULT_SIGMA_MAX);
            let err = got
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-5, "fixation {fix:?}, {c} channels: max error {err:e}");
        }
    }
}

#[test]
fn constant_images_are_exact_fixpoints() {
    for v in [0.0f32, 0.25, 0.7, 1.0] {
        let img = Image::filled(40, 36, 3, v);
        let fix = Fixation::new(5.0, 30.0, 2.0);
        let profile = BlurProfile::for_frame(40, 36, &fix, 6.0).unwrap();
        assert_eq!(radial_blur(&img, &fix, &profile).unwrap(), img);
        let layered = radial_blur_layered(&img, &fix, &profile, 0.5).unwrap();
        assert!(layered.data().iter().all(|&x| (x - v).abs() < 1e-6));
    }
}

#[test]
fn golden_512_reproduced_bit_exactly() {
    let (input, golden) = (assets().join("golden_input_512.png"), assets().join("golden_blur_512.png"));
    if std::env::var_os("PERIPH_BLESS").is_some() {
        std::fs::create_dir_all(assets()).unwrap();
        std::fs::write(&input, encode_png(&procedural_image(512, 512, 512)).unwrap()).unwrap();
        let blurred = golden_blur(&std::fs::read(&input).unwrap());
        std::fs::write(&golden, blurred).unwrap();
    }
    let out = golden_blur(&std::fs::read(&input).unwrap());
    assert!(out == std::fs::read(&golden).unwrap(), "blur output differs from {}", golden.display());
}
