use msop::curriculum::blur_image;
use msop::plane::Plane;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Squared magnitudes of the 2-D DFT, row-major `[v][u]`.
fn power_spectrum(p: &Plane) -> Vec<f64> {
    let (w, h) = (p.width(), p.height());
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut buf: Vec<Complex<f64>> = p.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for u in 0..w {
        for v in 0..h {
            col[v] = buf[v * w + u];
        }
        col_fft.process(&mut col);
        for v in 0..h {
            buf[v * w + u] = col[v];
        }
    }
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// Energy at frequencies above half the Nyquist rate on either axis.
fn high_band_energy(p: &Plane) -> f64 {
    let (w, h) = (p.width(), p.height());
    let spec = power_spectrum(p);
    let signed = |k: usize, n: usize| k.min(n - k);
    let mut e = 0.0;
    for v in 0..h {
        for u in 0..w {
            if 4 * signed(u, w) > w || 4 * signed(v, h) > h {
                e += spec[v * w + u];
            }
        }
    }
    e
}

fn total_energy(p: &Plane) -> f64 {
    power_spectrum(p).iter().sum()
}

#[test]
fn checkerboard_high_band_energy_strictly_decreases() {
    let board = Plane::from_fn(64, 64, |x, y| if (x + y) % 2 == 0 { 255.0 } else { 0.0 });
    let mut prev = high_band_energy(&board);
    for sigma in [1.0, 2.0, 4.0, 8.0, 16.0] {
        let e = high_band_energy(&blur_image(&board, sigma).unwrap());
        assert!(e < prev, "sigma {sigma}: {e} !< {prev}");
        prev = e;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blur_never_adds_energy(
        w in 2usize..24,
        h in 2usize..24,
        sigma in 0.3f64..10.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Plane::from_fn(w, h, |_, _| rng.random_range(0.0..255.0));
        let before = total_energy(&img);
        let after = total_energy(&blur_image(&img, sigma).unwrap());
        prop_assert!(after <= before * (1.0 + 1e-6), "{after} > {before}");
    }

    #[test]
    fn zero_sigma_is_bit_identical(w in 1usize..16, h in 1usize..16, v in 0.0f64..255.0) {
        let img = Plane::from_fn(w, h, |x, y| (v + (x * 7 + y * 3) as f64) % 256.0);
        prop_assert_eq!(blur_image(&img, 0.0).unwrap(), img);
    }
}
