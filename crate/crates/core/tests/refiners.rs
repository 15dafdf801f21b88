use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pulsebench::extract::{ColorSignal, StrategyConfig, S_IN_H, S_IN_W};
use pulsebench::frame::Patch;
use pulsebench::pipeline::{denoise_ratio, train_g2, truth_signal};
use pulsebench::refiner::{
    add_noise, patch_rows, train_gan, GanPair, NoiseModel, PatchRefiner, RefinerConfig, RefinerKind, SignalDomain,
    SignalRefiner, PATCH_DIM,
};
use pulsebench::roi::crop_resize;
use pulsebench::spectral::periodogram;
use pulsebench::synth::{roi_corpus_frame, synth_clip, FrameSource, SceneDefaults};

fn clean_signals(n: usize, seed: u64) -> Vec<ColorSignal> {
    let d = SceneDefaults::default();
    (0..n)
        .map(|i| {
            let hr = 50.0 + 60.0 * ((i as f64 * 0.618034).fract());
            let clip = synth_clip(&d, hr, seed + i as u64, 660).unwrap();
            truth_signal(clip.meta(), StrategyConfig::A).unwrap()
        })
        .collect()
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

fn peak_bin(x: &[f64]) -> usize {
    let p = periodogram(&centered(x), 22.0, x.len());
    let lo = p.freqs_hz.iter().position(|&f| f >= 0.7).unwrap();
    let hi = p.freqs_hz.iter().position(|&f| f > 4.0).unwrap();
    lo + p.power[lo..hi]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0
}

fn trained_g2() -> (Vec<ColorSignal>, SignalRefiner, GanPair, SignalDomain, RefinerConfig) {
    let train = clean_signals(40, 1000);
    let cfg = RefinerConfig::signal_default();
    let domain = SignalDomain::with_defaults(StrategyConfig::A);
    let (g2, pair) = train_g2(&train, domain, &cfg).unwrap();
    (clean_signals(12, 9000), g2, pair, domain, cfg)
}

fn noisy_copy(x: &ColorSignal, sigma: f64, seed: u64) -> ColorSignal {
    ColorSignal::from_rows(add_noise(&x.values, sigma, seed).unwrap(), x.channels, x.fps, x.strategy).unwrap()
}

#[test]
fn signal_refiner_denoises_held_out_clips() {
    let (held, g2, _, domain, cfg) = trained_g2();
    let k = domain.gain();
    let mut ratios = Vec::new();
    let mut fixed = Vec::new();
    let mut bins = Vec::new();
    for (i, x) in held.iter().enumerate() {
        ratios.push(denoise_ratio(&g2, x, cfg.sigma, i as u64).unwrap());

        let cx = centered(&x.values);
        let gx = centered(&g2.refine(x).unwrap().values);
        fixed.push(dist(&gx, &cx) / cx.iter().map(|v| v * v).sum::<f64>().sqrt());

        let refined = g2.refine(&noisy_copy(x, cfg.sigma / k, 50 + i as u64)).unwrap();
        bins.push((peak_bin(&x.values), peak_bin(&refined.values)));
    }
    let n = held.len() as f64;
    let ratio = ratios.iter().sum::<f64>() / n;
    let fix = fixed.iter().sum::<f64>() / n;
    assert!(ratio <= 0.7, "denoise ratio {ratio:.3}");
    assert!(fix <= 0.1, "clean signals moved by {fix:.3}");
    for (c, r) in &bins {
        assert!(c.abs_diff(*r) <= 1, "peak bin {c} became {r}");
    }
}

#[test]
#[ignore = "D settles at 0.5 on these signals; the real-over-refined margin is ~1e-6 and its sign is not stable"]
fn discriminator_scores_real_above_refined() {
    let (held, g2, pair, domain, cfg) = trained_g2();
    let k = domain.gain();
    let (mut real, mut fake) = (0.0, 0.0);
    for (i, x) in held.iter().enumerate() {
        let noisy = noisy_copy(x, cfg.sigma / k, 50 + i as u64);
        let sr = pair.score(&domain.slices(x, domain.window).unwrap()).unwrap();
        let sf = pair.score(&g2.refine_rows(&domain.slices(&noisy, domain.window).unwrap()).unwrap()).unwrap();
        real += sr.iter().sum::<f64>() / sr.len() as f64;
        fake += sf.iter().sum::<f64>() / sf.len() as f64;
    }
    assert!(real > fake, "D scores real {real:.8} fake {fake:.8}");
}

fn low_patch(seed: u64) -> Patch {
    let (frame, b) = roi_corpus_frame(&SceneDefaults::default(), seed).unwrap();
    crop_resize(&frame, &b).unwrap().resample_area(S_IN_W, S_IN_H)
}

const BLOCK: (usize, usize) = (8, 5);

fn occlude(p: &Patch, x0: usize, y0: usize) -> Patch {
    let mut out = p.clone();
    for c in 0..3 {
        let plane = out.plane_mut(c);
        for y in y0..y0 + BLOCK.1 {
            for x in x0..x0 + BLOCK.0 {
                plane[y * S_IN_W + x] = 0.0;
            }
        }
    }
    out
}

fn block_dist(a: &Patch, b: &Patch, x0: usize, y0: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        for y in y0..y0 + BLOCK.1 {
            for x in x0..x0 + BLOCK.0 {
                s += (a.at(c, x, y) - b.at(c, x, y)).powi(2);
            }
        }
    }
    s.sqrt()
}

#[test]
fn patch_refiner_fills_occluded_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut clean, mut degraded) = (Vec::new(), Vec::new());
    for i in 0..300 {
        let p = low_patch(i);
        let (x0, y0) = (rng.gen_range(0..=S_IN_W - BLOCK.0), rng.gen_range(0..=S_IN_H - BLOCK.1));
        clean.extend(patch_rows(&p));
        degraded.extend(patch_rows(&occlude(&p, x0, y0)));
    }
    let cfg = RefinerConfig {
        generator: vec![128, 32, 128],
        discriminator: vec![32],
        steps: 1500,
        ..RefinerConfig::patch_default()
    };
    let pair = train_gan(&clean, PATCH_DIM, NoiseModel::Paired(&degraded), RefinerKind::Patch, &cfg).unwrap();
    let g1 = PatchRefiner::from_pair(&pair).unwrap();

    let (mut before, mut after) = (0.0, 0.0);
    for i in 0..20 {
        let p = low_patch(50_000 + i);
        let (x0, y0) = (rng.gen_range(0..=S_IN_W - BLOCK.0), rng.gen_range(0..=S_IN_H - BLOCK.1));
        let occ = occlude(&p, x0, y0);
        before += block_dist(&occ, &p, x0, y0);
        after += block_dist(&g1.refine_low(&occ).unwrap(), &p, x0, y0);
    }
    assert!(after < before, "block distance {after:.3} after vs {before:.3} before");
}
